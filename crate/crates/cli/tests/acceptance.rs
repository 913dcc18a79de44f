//! Acceptance suite: one test per criterion, each printing a PASS line.
//! Run with `cargo test --release -p clipfree-cli --test acceptance`
//! (release mode recommended for the end-to-end runs).

use clipfree_cli::commands::{cmd_account, cmd_train};
use clipfree_core::accountant::{
    rdp_subsampled_gaussian, AccountantParams, AccountantState, Strategy,
};
use clipfree_core::bounds::{
    backpropagation_for_bounds, concentration_tail, theoretical_gradient_bound, Neighboring,
    TheoremInputs,
};
use clipfree_core::data::synthetic_two_gaussians;
use clipfree_core::layers::{
    make_residual, ConvMode, LayerDescriptor, MergeRule, Network, ProjectionSettings,
};
use clipfree_core::losses::LossKind;
use clipfree_core::numerics::{Padding, PowerIterationState, Tensor};
use clipfree_core::oracles::{
    finite_difference_gradient, per_sample_gradient_norms, rdp_numerical_oracle, svd_reference,
};
use clipfree_core::trainer::{fit, BoundsRefresh, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::time::Instant;

// ---------------------------------------------------------------------------
// Criterion 1: bound soundness over randomly configured projected networks.
// ---------------------------------------------------------------------------

struct RandomCase {
    input_shape: Vec<usize>,
    descriptors: Vec<LayerDescriptor>,
    input_bound: f64,
    loss: LossKind,
    classes: usize,
}

fn random_case(seed: u64) -> RandomCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_bound = rng.gen_range(0.5..4.0);
    let classes = rng.gen_range(2..=4usize);
    let mut descriptors = vec![LayerDescriptor::BoundedInput { bound: input_bound }];
    let image = rng.gen_bool(0.4);
    let (input_shape, mut flat) = if image {
        let side = *[4usize, 6, 8].choose(&mut rng).expect("nonempty");
        let channels0 = *[1usize, 2].choose(&mut rng).expect("nonempty");
        let mut side_now = side;
        let mut channels = channels0;
        for _ in 0..rng.gen_range(1..=2usize) {
            let filters = *[2usize, 4].choose(&mut rng).expect("nonempty");
            let kernel = if side_now >= 3 {
                *[2usize, 3].choose(&mut rng).expect("nonempty")
            } else {
                2
            };
            let mode = if rng.gen_bool(0.5) {
                ConvMode::Plain
            } else {
                ConvMode::Rko
            };
            // Strided convolutions keep the conservative window bound;
            // the reshaped-kernel constant is stride-1 only.
            let stride = if mode == ConvMode::Plain && side_now >= 4 && rng.gen_bool(0.3) {
                2
            } else {
                1
            };
            let padding = if rng.gen_bool(0.5) {
                Padding::Zero
            } else {
                Padding::Circular
            };
            let lipschitz = *[0.8, 1.0, 1.2].choose(&mut rng).expect("nonempty");
            descriptors.push(LayerDescriptor::SpectralConv2D {
                filters,
                kernel: (kernel, kernel),
                stride: (stride, stride),
                padding,
                mode,
                lipschitz,
            });
            side_now = side_now.div_ceil(stride);
            channels = filters;
            if rng.gen_bool(0.25) {
                descriptors.push(LayerDescriptor::Bias {
                    bound: rng.gen_range(0.05..0.3),
                });
            }
            match rng.gen_range(0..3) {
                0 => descriptors.push(LayerDescriptor::GroupSort2),
                1 => descriptors.push(LayerDescriptor::ReLU),
                _ => descriptors.push(LayerDescriptor::Tanh),
            }
        }
        if side_now % 2 == 0 && rng.gen_bool(0.5) {
            descriptors.push(LayerDescriptor::ScaledL2NormPooling2D { pool: (2, 2) });
            side_now /= 2;
        }
        if rng.gen_bool(0.3) {
            descriptors.push(LayerDescriptor::LayerCentering);
        }
        descriptors.push(LayerDescriptor::Flatten);
        (
            vec![side, side, channels0],
            side_now * side_now * channels,
        )
    } else {
        let dim = 2 * rng.gen_range(2..=8usize);
        (vec![dim], dim)
    };

    for _ in 0..rng.gen_range(1..=2usize) {
        if rng.gen_bool(0.3) {
            let mut inner = vec![LayerDescriptor::SpectralDense {
                units: flat,
                lipschitz: 1.0,
            }];
            if flat % 2 == 0 && rng.gen_bool(0.5) {
                inner.push(LayerDescriptor::GroupSort2);
            }
            let rule = if rng.gen_bool(0.5) {
                MergeRule::PlainAdd
            } else {
                MergeRule::OneLipAdd
            };
            descriptors.extend(make_residual(inner, rule));
        }
        let units = 2 * rng.gen_range(2..=16usize);
        let lipschitz = *[0.7, 1.0, 1.4].choose(&mut rng).expect("nonempty");
        if rng.gen_bool(0.3) {
            descriptors.push(LayerDescriptor::OrthoDense { units, lipschitz: 1.0 });
        } else {
            descriptors.push(LayerDescriptor::SpectralDense { units, lipschitz });
        }
        flat = units;
        if rng.gen_bool(0.5) {
            descriptors.push(LayerDescriptor::Bias {
                bound: rng.gen_range(0.05..0.4),
            });
        }
        match rng.gen_range(0..4) {
            0 => descriptors.push(LayerDescriptor::GroupSort2),
            1 => descriptors.push(LayerDescriptor::ReLU),
            2 => descriptors.push(LayerDescriptor::Tanh),
            _ => descriptors.push(LayerDescriptor::LayerCentering),
        }
        if rng.gen_bool(0.25) {
            descriptors.push(LayerDescriptor::ClipGradient {
                clip: rng.gen_range(0.05..1.0),
            });
        }
    }
    descriptors.push(LayerDescriptor::SpectralDense {
        units: classes,
        lipschitz: 1.0,
    });

    let loss = match rng.gen_range(0..5) {
        0 => LossKind::TauCategoricalCrossentropy {
            tau: rng.gen_range(0.5..4.0),
        },
        1 => LossKind::MulticlassHinge { margin: 1.0 },
        2 => LossKind::KantorovichRubinstein,
        3 => LossKind::HingeKantorovichRubinstein {
            margin: 1.0,
            alpha: rng.gen_range(0.1..3.0),
        },
        _ => LossKind::KCosineSimilarity { k: 1.0, x_min: 0.2 },
    };
    RandomCase {
        input_shape,
        descriptors,
        input_bound,
        loss,
        classes,
    }
}

fn sample_in_ball(shape: &[usize], bound: f64, on_sphere: bool, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut x = Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("finite sample");
    let norm = x.norm();
    if norm > 0.0 {
        let radius = if on_sphere {
            bound
        } else {
            rng.gen_range(0.0..1.0) * bound
        };
        x.scale_in_place(radius / norm);
    }
    x
}

#[test]
fn acceptance_01_bound_soundness() {
    let start = Instant::now();
    let networks = 50;
    let samples_per_network = 200;
    let batch_size = 16;
    let mut violations = 0usize;
    let mut checked = 0usize;
    for seed in 0..networks {
        let case = random_case(1000 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let mut net = Network::new(
            case.input_shape.clone(),
            case.descriptors.clone(),
            &mut rng,
        )
        .expect("generator produces valid networks");
        net.project_all(&ProjectionSettings::strict())
            .expect("projection converges");
        let report = backpropagation_for_bounds(
            &mut net,
            case.input_bound,
            &case.loss,
            batch_size,
            Neighboring::ReplaceOne,
        )
        .expect("certification succeeds on projected networks");

        let xs: Vec<Tensor> = (0..samples_per_network)
            .map(|i| {
                sample_in_ball(
                    &case.input_shape,
                    case.input_bound,
                    i % 4 == 0,
                    &mut rng,
                )
            })
            .collect();
        let ys: Vec<Vec<f64>> = (0..samples_per_network)
            .map(|_| {
                let mut y = vec![0.0; case.classes];
                y[rng.gen_range(0..case.classes)] = 1.0;
                y
            })
            .collect();
        let norms = per_sample_gradient_norms(&net, &xs, &ys, &case.loss)
            .expect("oracle runs");
        for sample in &norms {
            for (layer, &observed) in sample.iter().enumerate() {
                let bound = report.per_sample_bound(layer);
                checked += 1;
                let ok = if bound > 0.0 {
                    observed <= bound + 1e-9
                } else {
                    observed <= 1e-9
                };
                if !ok {
                    violations += 1;
                    eprintln!(
                        "violation: net {seed} layer {layer}: observed {observed} vs bound {bound}"
                    );
                }
            }
        }
    }
    let elapsed = start.elapsed();
    assert_eq!(violations, 0, "{violations} certificate violations");
    assert!(
        elapsed.as_secs() < 300,
        "soundness sweep took {elapsed:?}, budget is 5 minutes"
    );
    println!(
        "PASS criterion 1: bound soundness, {networks} networks x {samples_per_network} samples, \
         {checked} gradient norms within certified bounds (slack 1e-9), {elapsed:?}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: gradient correctness against finite differences.
// ---------------------------------------------------------------------------

fn every_kind_network(seed: u64) -> (Network, Vec<usize>, f64) {
    let input_shape = vec![4, 4, 2];
    let input_bound = 2.0;
    let mut descriptors = vec![
        LayerDescriptor::BoundedInput { bound: input_bound },
        LayerDescriptor::SpectralConv2D {
            filters: 2,
            kernel: (3, 3),
            stride: (1, 1),
            padding: Padding::Zero,
            mode: ConvMode::Plain,
            lipschitz: 1.0,
        },
        LayerDescriptor::GroupSort2,
        LayerDescriptor::SpectralConv2D {
            filters: 2,
            kernel: (3, 3),
            stride: (1, 1),
            padding: Padding::Circular,
            mode: ConvMode::Rko,
            lipschitz: 1.0,
        },
        LayerDescriptor::Tanh,
        LayerDescriptor::ScaledL2NormPooling2D { pool: (2, 2) },
        LayerDescriptor::LayerCentering,
        LayerDescriptor::Flatten,
    ];
    descriptors.extend(make_residual(
        vec![LayerDescriptor::SpectralDense {
            units: 8,
            lipschitz: 0.9,
        }],
        MergeRule::OneLipAdd,
    ));
    descriptors.extend([
        LayerDescriptor::OrthoDense {
            units: 8,
            lipschitz: 1.0,
        },
        LayerDescriptor::Bias { bound: 0.3 },
        LayerDescriptor::ReLU,
        LayerDescriptor::ClipGradient { clip: 50.0 },
        LayerDescriptor::SpectralDense {
            units: 3,
            lipschitz: 1.0,
        },
    ]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::new(input_shape.clone(), descriptors, &mut rng).expect("valid");
    // Randomize the bias so its derivative path is exercised away from zero.
    for layer in net.layers_mut() {
        if let LayerDescriptor::Bias { .. } = layer.desc {
            let n = layer.weight.as_ref().expect("bias").len();
            layer.weight = Some(Tensor::from_vec(
                (0..n).map(|_| rng.gen_range(-0.05..0.05)).collect(),
            ));
        }
    }
    net.project_all(&ProjectionSettings::strict()).expect("projection");
    (net, input_shape, input_bound)
}

/// Distance of the evaluation point from every non-differentiable set the
/// network and loss contain; FD stencils need clearance.
fn conditioning_margin(net: &Network, x: &Tensor, loss: &LossKind, y: &[f64]) -> f64 {
    let mut margin = f64::INFINITY;
    let trace = net.forward_trace(x).expect("forward");
    for (i, layer) in net.layers().iter().enumerate() {
        let input = &trace.inputs[i];
        match &layer.desc {
            LayerDescriptor::BoundedInput { bound } => {
                margin = margin.min((input.norm() - bound).abs());
            }
            LayerDescriptor::GroupSort2 => {
                for p in (0..input.len()).step_by(2) {
                    margin = margin.min((input.data()[p] - input.data()[p + 1]).abs());
                }
            }
            LayerDescriptor::ReLU => {
                for v in input.data() {
                    margin = margin.min(v.abs());
                }
            }
            LayerDescriptor::ScaledL2NormPooling2D { .. } => {
                // Zero-norm windows are the kink; the overall input norm is
                // a cheap lower-bound proxy.
                margin = margin.min(input.norm());
            }
            _ => {}
        }
    }
    let logits = trace.output.data();
    match loss {
        LossKind::MulticlassHinge { margin: m }
        | LossKind::HingeKantorovichRubinstein { margin: m, .. } => {
            for (yh, yi) in logits.iter().zip(y) {
                let sign = 2.0 * yi - 1.0;
                margin = margin.min((m / 2.0 - yh * sign).abs());
            }
        }
        LossKind::KCosineSimilarity { k, x_min } => {
            let n: f64 = logits.iter().map(|v| v * v).sum::<f64>().sqrt();
            margin = margin.min((n - k * x_min).abs());
        }
        _ => {}
    }
    margin
}

#[test]
fn acceptance_02_gradient_correctness() {
    let losses = vec![
        LossKind::TauCategoricalCrossentropy { tau: 1.5 },
        LossKind::MulticlassHinge { margin: 1.0 },
        LossKind::KantorovichRubinstein,
        LossKind::HingeKantorovichRubinstein {
            margin: 1.0,
            alpha: 2.0,
        },
        LossKind::KCosineSimilarity { k: 1.0, x_min: 0.2 },
    ];
    let (net, input_shape, input_bound) = every_kind_network(2024);
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut checked_losses = 0;
    for loss in &losses {
        // Find a well-conditioned evaluation point for this loss.
        let mut found = None;
        for _ in 0..200 {
            let x = sample_in_ball(&input_shape, 0.9 * input_bound, false, &mut rng);
            let mut y = vec![0.0; 3];
            y[rng.gen_range(0..3)] = 1.0;
            if conditioning_margin(&net, &x, loss, &y) > 2e-3 {
                found = Some((x, y));
                break;
            }
        }
        let (x, y) = found.expect("a well-conditioned point exists");

        let trace = net.forward_trace(&x).expect("forward");
        let g0 = loss
            .loss_gradient(trace.output.data(), &y)
            .expect("loss gradient");
        let cot = Tensor::from_vec(g0);
        let (gin, grads) = net.vjp(&trace, &cot).expect("vjp");

        // Input gradient of the end-to-end loss.
        let fd_in = finite_difference_gradient(
            |p| {
                let xt = Tensor::new(input_shape.clone(), p.to_vec()).expect("finite");
                let out = net.forward(&xt).expect("forward");
                loss.loss_value(out.data(), &y).expect("loss")
            },
            x.data(),
            1e-5,
        );
        assert_vector_close(gin.data(), &fd_in, 1e-6, &format!("{loss:?} input"));

        // Parameter gradients of the end-to-end loss, every tensor.
        for (i, gparam) in grads.iter().enumerate() {
            let Some(gparam) = gparam else { continue };
            let w0 = net.layers()[i].weight.as_ref().expect("params").clone();
            let fd_w = finite_difference_gradient(
                |p| {
                    let mut clone = net.clone();
                    clone.layers_mut()[i].weight =
                        Some(Tensor::new(w0.shape().to_vec(), p.to_vec()).expect("finite"));
                    let out = clone.forward(&x).expect("forward");
                    loss.loss_value(out.data(), &y).expect("loss")
                },
                w0.data(),
                1e-5,
            );
            assert_vector_close(
                gparam.data(),
                &fd_w,
                1e-6,
                &format!("{loss:?} params of layer {i}"),
            );
        }
        checked_losses += 1;
    }
    assert_eq!(checked_losses, 5);
    println!(
        "PASS criterion 2: reverse-mode gradients match finite differences (rel 1e-6) \
         across every layer kind and all five losses"
    );
}

fn assert_vector_close(got: &[f64], want: &[f64], rel: f64, what: &str) {
    let mut diff = 0.0;
    let mut scale = 0.0;
    for (a, b) in got.iter().zip(want) {
        diff += (a - b) * (a - b);
        scale += b * b;
    }
    let diff = diff.sqrt();
    let scale = scale.sqrt().max(1e-6);
    assert!(
        diff / scale <= rel,
        "{what}: relative error {} exceeds {rel}",
        diff / scale
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: spectral machinery.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_03_spectral_machinery() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for case in 0..10 {
        let rows = rng.gen_range(2..12);
        let cols = rng.gen_range(2..12);
        let m = Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .expect("finite");
        let mut st = PowerIterationState::new(cols);
        let sigma = clipfree_core::numerics::spectral_norm(&m, &mut st, 2000, 1e-13)
            .expect("power iteration");
        let reference = svd_reference(&m).expect("jacobi")[0];
        assert!(
            (sigma - reference).abs() <= 1e-8,
            "case {case}: power {sigma} vs jacobi {reference}"
        );

        // Björck on the spectrally normalized matrix.
        let scaled = m.scale(1.0 / sigma.max(1e-12));
        let out = clipfree_core::numerics::bjorck_orthonormalize(&scaled, 60, 1e-8)
            .expect("bjorck");
        assert!(out.residual <= 1e-6, "case {case}: residual {}", out.residual);

        // Projection idempotence at 1e-12.
        let mut st2 = PowerIterationState::new(cols);
        let once = clipfree_core::numerics::project_spectral(&m, 1.0, &mut st2, 2000, 1e-13)
            .expect("projection");
        let twice = clipfree_core::numerics::project_spectral(&once, 1.0, &mut st2, 2000, 1e-13)
            .expect("projection");
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() <= 1e-12, "case {case}: projection not idempotent");
        }
    }
    println!(
        "PASS criterion 3: power iteration within 1e-8 of Jacobi SVD, Björck residual <= 1e-6, \
         spectral projection idempotent at 1e-12"
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: closed-form consistency.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_04_closed_form_consistency() {
    // GNP bias-free chain: per-layer sensitivities equal factor*L*X0/b
    // exactly.
    let (x0, b) = (1.5, 8usize);
    let loss = LossKind::TauCategoricalCrossentropy { tau: 2.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut descs = Vec::new();
    for _ in 0..3 {
        descs.push(LayerDescriptor::OrthoDense {
            units: 6,
            lipschitz: 1.0,
        });
        descs.push(LayerDescriptor::GroupSort2);
    }
    descs.push(LayerDescriptor::SpectralDense {
        units: 4,
        lipschitz: 1.0,
    });
    let mut net = Network::new(vec![6], descs, &mut rng).expect("valid");
    net.project_all(&ProjectionSettings::strict()).expect("projection");
    let report =
        backpropagation_for_bounds(&mut net, x0, &loss, b, Neighboring::ReplaceOne)
            .expect("certification");
    let expected = 2.0 * loss.lipschitz_constant() / b as f64 * x0;
    for (i, layer) in net.layers().iter().enumerate() {
        if layer.desc.has_params() {
            assert_eq!(
                report.per_layer_sensitivity[i], expected,
                "layer {i}: GNP bias-free sensitivity must be exact"
            );
        }
    }

    // T-block chains against the explicit closed form at alpha in
    // {0.5, 1, 2}, with and without biases.
    for &(u, bias) in &[
        (0.5, 0.0),
        (0.5, 0.25),
        (1.0, 0.0),
        (1.0, 0.25),
        (2.0, 0.0),
        (2.0, 0.25),
    ] {
        let t = 3usize;
        let mut descs = Vec::new();
        for _ in 0..t {
            descs.push(LayerDescriptor::SpectralDense {
                units: 4,
                lipschitz: u,
            });
            descs.push(LayerDescriptor::Bias { bound: bias });
            descs.push(LayerDescriptor::GroupSort2);
        }
        descs.push(LayerDescriptor::SpectralDense {
            units: 4,
            lipschitz: u,
        });
        descs.push(LayerDescriptor::Bias { bound: bias });
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let mut net = Network::new(vec![4], descs, &mut rng).expect("valid");
        // Saturate the spectral constraint so the cascade is tight.
        for layer in net.layers_mut() {
            if let LayerDescriptor::SpectralDense { .. } = layer.desc {
                let mut w = vec![0.0; 16];
                for i in 0..4 {
                    w[i * 4 + i] = u;
                }
                layer.weight = Some(Tensor::matrix(4, 4, w).expect("finite"));
            }
        }
        let loss = LossKind::KantorovichRubinstein;
        let report =
            backpropagation_for_bounds(&mut net, x0, &loss, b, Neighboring::ReplaceOne)
                .expect("certification");
        let closed = theoretical_gradient_bound(&TheoremInputs {
            s: 1.0,
            u,
            b: bias,
            x: x0,
            t,
            l: loss.lipschitz_constant(),
        });
        let scaled = 2.0 / b as f64 * closed;
        assert!(
            report.global_sensitivity <= scaled * (1.0 + 1e-9),
            "alpha={u} B={bias}: cascade {} above closed form {scaled}",
            report.global_sensitivity
        );
    }
    println!(
        "PASS criterion 4: GNP bias-free sensitivities exact; layer cascade within the \
         closed-form bound at alpha in {{0.5, 1, 2}}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: accountant correctness.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_05_accountant_correctness() {
    // Integer-order bound vs numerical oracle over the whole grid.
    for &sigma in &[0.8, 1.2, 2.0] {
        for &p in &[0.001, 0.01, 0.1] {
            for alpha in 2..=32u64 {
                let bound = rdp_subsampled_gaussian(sigma, p, alpha as f64)
                    .expect("bound evaluates");
                let oracle =
                    rdp_numerical_oracle(sigma, p, alpha as f64).expect("oracle converges");
                assert!(
                    bound + 1e-9 + 1e-6 * oracle.abs() >= oracle,
                    "sigma={sigma} p={p} alpha={alpha}: bound {bound} below oracle {oracle}"
                );
                let rel = (bound - oracle).abs() / oracle.max(1e-12);
                assert!(
                    rel <= 0.01,
                    "sigma={sigma} p={p} alpha={alpha}: bound {bound} vs oracle {oracle} \
                     (rel {rel})"
                );
            }
        }
    }

    // One unamplified Gaussian step at sigma = 1, delta = 1e-5.
    let mut st = AccountantState::new(AccountantParams {
        sigma: 1.0,
        sampling_probability: 1.0,
        strategy: Strategy::Global,
        noised_layers: 1,
        delta: 1e-5,
    })
    .expect("valid params");
    st.compose_step().expect("compose");
    let eps = st.epsilon_at(1e-5).expect("epsilon");
    assert!(
        (eps - 5.3026).abs() <= 0.001,
        "single-step epsilon {eps} vs 5.3026"
    );

    // Local with D = 4 at sigma = 2.4 equals global at sigma = 1.2.
    let mut local = AccountantState::new(AccountantParams {
        sigma: 2.4,
        sampling_probability: 0.01,
        strategy: Strategy::Local,
        noised_layers: 4,
        delta: 1e-5,
    })
    .expect("valid params");
    let mut global = AccountantState::new(AccountantParams {
        sigma: 1.2,
        sampling_probability: 0.01,
        strategy: Strategy::Global,
        noised_layers: 1,
        delta: 1e-5,
    })
    .expect("valid params");
    for _ in 0..7 {
        local.compose_step().expect("compose");
        global.compose_step().expect("compose");
    }
    for (a, b) in local
        .accumulated()
        .values()
        .iter()
        .zip(global.accumulated().values())
    {
        assert!((a - b).abs() <= 1e-12, "local/global curves differ: {a} vs {b}");
    }
    println!(
        "PASS criterion 5: subsampled bound >= oracle and within 1% on the grid; \
         unamplified 1-step epsilon = {eps:.4}; local D=4 sigma=2.4 equals global sigma=1.2"
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: clipped binary cross-entropy against the Kantorovich-
// Rubinstein descent direction.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_06_clipped_bce_kr_equivalence() {
    // Fixed two-class toy set in 2D, labels in {-1, +1}.
    let points: Vec<(Vec<f64>, f64)> = vec![
        (vec![1.0, 0.6], 1.0),
        (vec![0.8, -0.3], 1.0),
        (vec![1.2, 0.1], 1.0),
        (vec![-0.9, 0.4], -1.0),
        (vec![-1.1, -0.2], -1.0),
        (vec![-0.7, -0.65], -1.0),
    ];
    let descriptors = |clip: Option<f64>| {
        let mut d = vec![
            LayerDescriptor::SpectralDense {
                units: 4,
                lipschitz: 1.0,
            },
            LayerDescriptor::GroupSort2,
            LayerDescriptor::SpectralDense {
                units: 1,
                lipschitz: 1.0,
            },
        ];
        if let Some(c) = clip {
            d.push(LayerDescriptor::ClipGradient { clip: c });
        }
        d
    };
    // The per-logit BCE gradient magnitude over the toy set bounds the
    // admissible clip constant from above.
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut probe = Network::new(vec![2], descriptors(None), &mut rng).expect("valid");
    probe
        .project_all(&ProjectionSettings::strict())
        .expect("projection");
    let bce = LossKind::BinaryCrossentropy;
    let mut min_grad = f64::INFINITY;
    for (x, y) in &points {
        let out = probe.forward(&Tensor::from_vec(x.clone())).expect("forward");
        let g = bce.loss_gradient(out.data(), &[*y]).expect("gradient");
        min_grad = min_grad.min(g[0].abs());
    }
    assert!(min_grad > 0.0);
    let clip = 0.5 * min_grad;

    // Same weights, once with the clip layer and once without.
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut clipped = Network::new(vec![2], descriptors(Some(clip)), &mut rng).expect("valid");
    clipped
        .project_all(&ProjectionSettings::strict())
        .expect("projection");
    for (a, b) in probe
        .param_layer_indices()
        .into_iter()
        .zip(clipped.param_layer_indices())
    {
        let w = probe.layers()[a].weight.clone();
        clipped.layers_mut()[b].weight = w;
    }

    // Batch gradient of the clipped BCE loss.
    let mut g_bce: Vec<Tensor> = Vec::new();
    for (x, y) in &points {
        let trace = clipped
            .forward_trace(&Tensor::from_vec(x.clone()))
            .expect("forward");
        let g = bce.loss_gradient(trace.output.data(), &[*y]).expect("gradient");
        let (_, grads) = clipped
            .vjp(&trace, &Tensor::from_vec(g))
            .expect("vjp");
        accumulate(&mut g_bce, grads, 1.0 / points.len() as f64);
    }

    // Batch gradient of the KR descent objective -y_hat * y on the
    // unclipped network with identical weights.
    let mut g_kr: Vec<Tensor> = Vec::new();
    for (x, y) in &points {
        let trace = probe
            .forward_trace(&Tensor::from_vec(x.clone()))
            .expect("forward");
        let (_, grads) = probe
            .vjp(&trace, &Tensor::from_vec(vec![-*y]))
            .expect("vjp");
        accumulate(&mut g_kr, grads, 1.0 / points.len() as f64);
    }

    // Flatten and compare: grad(clipped BCE) must equal clip * grad(KR).
    let flat_bce: Vec<f64> = g_bce.iter().flat_map(|t| t.data().to_vec()).collect();
    let flat_kr: Vec<f64> = g_kr
        .iter()
        .flat_map(|t| t.data().iter().map(|v| clip * v).collect::<Vec<_>>())
        .collect();
    let dot: f64 = flat_bce.iter().zip(&flat_kr).map(|(a, b)| a * b).sum();
    let na: f64 = flat_bce.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = flat_kr.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cosine = dot / (na * nb);
    assert!(
        cosine >= 1.0 - 1e-9,
        "cosine similarity {cosine} between clipped-BCE and scaled KR gradients"
    );
    assert!(
        (na - nb).abs() / nb <= 1e-9,
        "magnitudes differ: {na} vs {nb}"
    );
    println!(
        "PASS criterion 6: clipped-BCE batch gradient equals C x KR gradient \
         (cosine {cosine:.12})"
    );
}

fn accumulate(acc: &mut Vec<Tensor>, grads: Vec<Option<Tensor>>, scale: f64) {
    let tensors: Vec<Tensor> = grads.into_iter().flatten().collect();
    if acc.is_empty() {
        *acc = tensors.into_iter().map(|t| t.scale(scale)).collect();
    } else {
        for (a, t) in acc.iter_mut().zip(&tensors) {
            a.axpy_in_place(scale, t).expect("matching shapes");
        }
    }
}

// ---------------------------------------------------------------------------
// Criterion 7: determinism of checkpoints and metrics.
// ---------------------------------------------------------------------------

const DETERMINISM_CONFIG: &str = r#"
seed = 2718

[data]
source = "synthetic-two-gaussians"
preprocess = "clip"
input_bound = 4.0
n_per_class = 80
dim = 6
separation = 6.0

[[model.layers]]
kind = "bounded_input"

[[model.layers]]
kind = "spectral_dense"
units = 6

[[model.layers]]
kind = "group_sort2"

[[model.layers]]
kind = "spectral_dense"
units = 2

[loss]
kind = "tau_categorical_crossentropy"
tau = 1.0

[dp]
noise_multiplier = 1.0
delta = 1e-5
strategy = "local"

[optimizer]
learning_rate = 0.1
momentum = 0.9
batch_size = 40
epochs = 3
"#;

#[test]
fn acceptance_07_determinism() {
    let dir = tempfile::tempdir().expect("tempdir");
    let config = dir.path().join("run.toml");
    std::fs::write(&config, DETERMINISM_CONFIG).expect("write config");
    let out1 = dir.path().join("run1");
    let out2 = dir.path().join("run2");
    cmd_train(&config, dir.path(), &out1, None).expect("first run");
    cmd_train(&config, dir.path(), &out2, None).expect("second run");
    let m1 = std::fs::read(out1.join("metrics.jsonl")).expect("metrics 1");
    let m2 = std::fs::read(out2.join("metrics.jsonl")).expect("metrics 2");
    assert_eq!(m1, m2, "metrics files differ between identical runs");
    let c1 = std::fs::read(out1.join("checkpoint.bin")).expect("checkpoint 1");
    let c2 = std::fs::read(out2.join("checkpoint.bin")).expect("checkpoint 2");
    assert_eq!(c1, c2, "checkpoints differ between identical runs");
    println!(
        "PASS criterion 7: identical config, seed and data give bitwise-identical \
         metrics ({} bytes) and checkpoints ({} bytes)",
        m1.len(),
        c1.len()
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: end-to-end desk scale on MNIST (runs when the IDX files are
// present; prints SKIP otherwise so the absence is visible, not silent).
// ---------------------------------------------------------------------------

fn mnist_dir() -> Option<PathBuf> {
    let candidates = [
        std::env::var("CLIPFREE_DATA_DIR")
            .map(|d| PathBuf::from(d).join("mnist"))
            .unwrap_or_else(|_| PathBuf::from("/nonexistent")),
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    ];
    candidates.into_iter().find(|dir| {
        [
            "train-images-idx3-ubyte",
            "train-labels-idx1-ubyte",
            "t10k-images-idx3-ubyte",
            "t10k-labels-idx1-ubyte",
        ]
        .iter()
        .all(|f| dir.join(f).exists())
    })
}

#[test]
fn acceptance_08_mnist_end_to_end() {
    let Some(dir) = mnist_dir() else {
        println!(
            "SKIP criterion 8: MNIST IDX files not present (set CLIPFREE_DATA_DIR or place \
             them under data/mnist); the synthetic end-to-end companion below still runs"
        );
        return;
    };
    let start = Instant::now();
    let (mut train, mut val) = clipfree_core::data::load_mnist(&dir).expect("mnist loads");
    let bound = 8.0;
    train
        .preprocess(clipfree_core::data::Preprocess::Clip(bound))
        .expect("preprocess");
    val.preprocess(clipfree_core::data::Preprocess::Clip(bound))
        .expect("preprocess");
    let hidden = if cfg!(debug_assertions) { 64 } else { 256 };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut net = Network::new(
        vec![28, 28, 1],
        vec![
            LayerDescriptor::BoundedInput { bound },
            LayerDescriptor::Flatten,
            LayerDescriptor::OrthoDense {
                units: hidden,
                lipschitz: 1.0,
            },
            LayerDescriptor::GroupSort2,
            LayerDescriptor::OrthoDense {
                units: 10,
                lipschitz: 1.0,
            },
        ],
        &mut rng,
    )
    .expect("valid");
    let loss = LossKind::TauCategoricalCrossentropy { tau: 8.0 };
    let config = TrainConfig {
        batch_size: 1000,
        noise_multiplier: 1.0,
        delta: 1e-5,
        strategy: Strategy::Global,
        neighboring: Neighboring::ReplaceOne,
        epsilon_max: Some(10.0),
        learning_rate: 0.25,
        momentum: 0.9,
        epochs: 25,
        rng_seed: 8,
        audit_every: 5,
        bounds_refresh: BoundsRefresh::PerStep,
    };
    let history = fit(&mut net, &loss, &train, &val, &config).expect("training");
    let last = history.last().expect("epochs ran");
    let eps = last.epsilon.expect("accounted");
    let acc = last.val_accuracy.expect("validation ran");
    assert!(eps <= 10.0, "epsilon {eps} above budget");
    assert!(acc >= 0.85, "validation accuracy {acc} below 0.85");
    // Offline recomputation must agree exactly.
    let mut offline = AccountantState::new(AccountantParams {
        sigma: config.noise_multiplier,
        sampling_probability: config.batch_size as f64 / train.len() as f64,
        strategy: config.strategy,
        noised_layers: 1,
        delta: config.delta,
    })
    .expect("valid");
    for _ in 0..last.step {
        offline.compose_step().expect("compose");
    }
    assert_eq!(eps, offline.epsilon_at(config.delta).expect("epsilon"));
    println!(
        "PASS criterion 8: MNIST GNP dense network reached accuracy {acc:.4} at \
         epsilon {eps:.3} (delta 1e-5) in {:?}",
        start.elapsed()
    );
}

/// Always-on companion to criterion 8: the same full DP pipeline (noise,
/// accounting, budget, audit) on the synthetic corpus.
#[test]
fn acceptance_08_synthetic_end_to_end() {
    let train = synthetic_two_gaussians(500, 8, 10.0, 81).expect("train");
    let val = synthetic_two_gaussians(200, 8, 10.0, 82).expect("val");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut net = Network::new(
        vec![8],
        vec![
            LayerDescriptor::BoundedInput {
                bound: train.input_bound,
            },
            LayerDescriptor::OrthoDense {
                units: 8,
                lipschitz: 1.0,
            },
            LayerDescriptor::GroupSort2,
            LayerDescriptor::OrthoDense {
                units: 2,
                lipschitz: 1.0,
            },
        ],
        &mut rng,
    )
    .expect("valid");
    let loss = LossKind::TauCategoricalCrossentropy { tau: 2.0 };
    let config = TrainConfig {
        batch_size: 100,
        noise_multiplier: 1.0,
        delta: 1e-5,
        strategy: Strategy::Global,
        neighboring: Neighboring::ReplaceOne,
        epsilon_max: Some(10.0),
        learning_rate: 0.3,
        momentum: 0.9,
        epochs: 15,
        rng_seed: 9,
        audit_every: 3,
        bounds_refresh: BoundsRefresh::PerStep,
    };
    let history = fit(&mut net, &loss, &train, &val, &config).expect("training");
    let last = history.last().expect("epochs ran");
    let eps = last.epsilon.expect("accounted");
    let acc = last.val_accuracy.expect("validation ran");
    assert!(eps <= 10.0, "epsilon {eps} above budget");
    assert!(acc >= 0.85, "validation accuracy {acc} below 0.85");
    println!(
        "PASS criterion 8 (synthetic companion): accuracy {acc:.4} at epsilon {eps:.3}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: no-noise sanity on separable data.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_09_no_noise_sanity() {
    let train = synthetic_two_gaussians(150, 6, 10.0, 91).expect("train");
    let val = synthetic_two_gaussians(80, 6, 10.0, 92).expect("val");
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut net = Network::new(
        vec![6],
        vec![
            LayerDescriptor::BoundedInput {
                bound: train.input_bound,
            },
            LayerDescriptor::SpectralDense {
                units: 6,
                lipschitz: 1.0,
            },
            LayerDescriptor::GroupSort2,
            LayerDescriptor::SpectralDense {
                units: 2,
                lipschitz: 1.0,
            },
        ],
        &mut rng,
    )
    .expect("valid");
    let loss = LossKind::TauCategoricalCrossentropy { tau: 1.0 };
    let config = TrainConfig {
        batch_size: 50,
        noise_multiplier: 0.0,
        delta: 1e-5,
        strategy: Strategy::Global,
        neighboring: Neighboring::ReplaceOne,
        epsilon_max: None,
        learning_rate: 0.3,
        momentum: 0.0,
        epochs: 20,
        rng_seed: 10,
        audit_every: 1,
        bounds_refresh: BoundsRefresh::PerStep,
    };
    let history = fit(&mut net, &loss, &train, &val, &config).expect("training");
    let acc = history
        .last()
        .and_then(|m| m.val_accuracy)
        .expect("validation ran");
    assert!(acc >= 0.99, "noise-free accuracy {acc} below 0.99");
    println!("PASS criterion 9: sigma=0 projected training reached accuracy {acc:.4} in 20 epochs");
}

// ---------------------------------------------------------------------------
// Criterion 10: concentration-bound plumbing.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_10_concentration_bound() {
    for &b in &[4usize, 16, 64, 256] {
        let u0 = 2.0 / (b as f64).sqrt();
        assert_eq!(
            concentration_tail(u0, b).expect("applicable"),
            1.0,
            "tail at the threshold must be exactly 1"
        );
        let mut prev = 1.0;
        for i in 1..=100 {
            let u = u0 + 0.05 * i as f64;
            let v = concentration_tail(u, b).expect("applicable");
            assert!(v <= prev, "tail must be monotone decreasing in u");
            prev = v;
        }
        assert!(concentration_tail(u0 * 0.99, b).is_err());
    }
    println!("PASS criterion 10: concentration tail is 1 at u = 2/sqrt(b) and monotone in u");
}

// ---------------------------------------------------------------------------
// Offline recomputation consistency used by criterion 8 is also meaningful
// at desk scale without MNIST; checked against the account subcommand.
// ---------------------------------------------------------------------------

#[test]
fn reported_epsilon_matches_account_subcommand() {
    let report = cmd_account(1.0, 0.05, 60, 1e-5, Strategy::Global, 1, Some(10.0))
        .expect("account");
    let mut st = AccountantState::new(AccountantParams {
        sigma: 1.0,
        sampling_probability: 0.05,
        strategy: Strategy::Global,
        noised_layers: 1,
        delta: 1e-5,
    })
    .expect("valid");
    for _ in 0..60 {
        st.compose_step().expect("compose");
    }
    assert_eq!(report.epsilon, st.epsilon_at(1e-5).expect("epsilon"));
    assert!(report.max_steps_within_budget.expect("budget") >= 60);
}
