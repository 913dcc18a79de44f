//! The four subcommands as library functions, so tests can drive them
//! directly; printing and exit codes live in the binary entry point.

use crate::checkpoint::{load_checkpoint, network_entries, restore_network, save_checkpoint};
use crate::config::RunConfig;
use anyhow::{bail, Context, Result};
use clipfree_core::accountant::{
    max_steps_for_budget, AccountantParams, AccountantState, Strategy, SAMPLING_ASSUMPTION,
};
use clipfree_core::bounds::Neighboring;
use clipfree_core::layers::ProjectionSettings;
use clipfree_core::trainer::{audit_gradient_bounds, fit, EpochMetrics};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub steps: usize,
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub val_accuracy: Option<f64>,
    pub budget_exhausted: bool,
    pub metrics_path: String,
    pub checkpoint_path: String,
    pub sampling_note: String,
}

/// Train per the configuration, writing one metrics record per epoch to
/// `metrics.jsonl` and the final parameters to `checkpoint.bin` in the
/// output directory.
pub fn cmd_train(
    config_path: &Path,
    data_dir: &Path,
    out_dir: &Path,
    seed_override: Option<u64>,
) -> Result<TrainSummary> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    if !data_dir.exists() && config.data.source != crate::config::DataSource::SyntheticTwoGaussians
    {
        bail!("data not found: {} does not exist", data_dir.display());
    }
    let (train, val) = config.build_datasets(data_dir)?;
    let mut network = config.build_network(train.feature_shape().to_vec())?;
    let loss = config.loss.to_loss();
    let train_config = config.train_config();

    let history = fit(&mut network, &loss, &train, &val, &train_config)?;

    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create output dir {}", out_dir.display()))?;
    let metrics_path = out_dir.join("metrics.jsonl");
    write_metrics(&metrics_path, &history)?;
    let checkpoint_path = out_dir.join("checkpoint.bin");
    save_checkpoint(&checkpoint_path, &network_entries(&network))?;

    let last = history.last();
    Ok(TrainSummary {
        epochs_run: history.len(),
        steps: last.map(|m| m.step).unwrap_or(0),
        epsilon: last.and_then(|m| m.epsilon),
        delta: train_config.delta,
        val_accuracy: last.and_then(|m| m.val_accuracy),
        budget_exhausted: last.map(|m| m.budget_exhausted).unwrap_or(false),
        metrics_path: metrics_path.display().to_string(),
        checkpoint_path: checkpoint_path.display().to_string(),
        sampling_note: SAMPLING_ASSUMPTION.to_string(),
    })
}

fn write_metrics(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let mut file = std::fs::File::create(path)
        .with_context(|| format!("cannot create metrics file {}", path.display()))?;
    for record in history {
        let line = serde_json::to_string(record)?;
        file.write_all(line.as_bytes())?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertifyLayer {
    pub index: usize,
    pub kind: String,
    pub input_bound: f64,
    pub backward_factor: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertifyReport {
    pub layers: Vec<CertifyLayer>,
    pub output_bound: f64,
    pub global_sensitivity: f64,
    pub loss_constant: f64,
    pub batch_size: usize,
    pub neighboring_factor: f64,
    pub sampling_note: String,
}

/// Build and project the configured model at initialization and report its
/// certified sensitivities.
pub fn cmd_certify(config_path: &Path) -> Result<CertifyReport> {
    let config = RunConfig::load(config_path)?;
    let input_shape = certify_input_shape(&config)?;
    let mut network = config.build_network(input_shape)?;
    network.project_all(&ProjectionSettings::strict())?;
    let loss = config.loss.to_loss();
    let report = clipfree_core::bounds::backpropagation_for_bounds(
        &mut network,
        config.data.input_bound,
        &loss,
        config.optimizer.batch_size,
        config.dp.neighboring,
    )?;
    let layers = network
        .layers()
        .iter()
        .enumerate()
        .map(|(i, layer)| CertifyLayer {
            index: i,
            kind: layer.desc.name().to_string(),
            input_bound: report.per_layer_input_bound[i],
            backward_factor: report.per_layer_backward_factor[i],
            sensitivity: report.per_layer_sensitivity[i],
        })
        .collect();
    Ok(CertifyReport {
        layers,
        output_bound: *report.per_layer_input_bound.last().expect("nonempty"),
        global_sensitivity: report.global_sensitivity,
        loss_constant: report.loss_constant,
        batch_size: report.batch_size,
        neighboring_factor: report.neighboring_factor,
        sampling_note: SAMPLING_ASSUMPTION.to_string(),
    })
}

fn certify_input_shape(config: &RunConfig) -> Result<Vec<usize>> {
    Ok(match config.data.source {
        crate::config::DataSource::Mnist => vec![28, 28, 1],
        crate::config::DataSource::Cifar10 => vec![32, 32, 3],
        crate::config::DataSource::SyntheticTwoGaussians => {
            vec![config.data.dim.context("synthetic data needs dim")?]
        }
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccountReport {
    pub epsilon: f64,
    pub delta: f64,
    pub optimal_order: u64,
    pub steps: usize,
    pub sigma: f64,
    pub sampling_probability: f64,
    pub strategy: Strategy,
    pub noised_layers: usize,
    pub max_steps_within_budget: Option<usize>,
    pub per_step_orders: Vec<u64>,
    pub per_step_values: Vec<f64>,
    pub sampling_note: String,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_account(
    sigma: f64,
    sampling_probability: f64,
    steps: usize,
    delta: f64,
    strategy: Strategy,
    noised_layers: usize,
    epsilon_budget: Option<f64>,
) -> Result<AccountReport> {
    let params = AccountantParams {
        sigma,
        sampling_probability,
        strategy,
        noised_layers,
        delta,
    };
    let mut state = AccountantState::new(params)?;
    let per_step = state.per_step_curve()?;
    for _ in 0..steps {
        state.compose_step()?;
    }
    let epsilon = state.epsilon_at(delta)?;
    let optimal_order = state.optimal_order(delta)?;
    let max_steps_within_budget = match epsilon_budget {
        Some(budget) => Some(max_steps_for_budget(
            budget,
            delta,
            sigma,
            sampling_probability,
            strategy,
            noised_layers,
        )?),
        None => None,
    };
    Ok(AccountReport {
        epsilon,
        delta,
        optimal_order,
        steps,
        sigma,
        sampling_probability,
        strategy,
        noised_layers,
        max_steps_within_budget,
        per_step_orders: per_step.orders().to_vec(),
        per_step_values: per_step.values().to_vec(),
        sampling_note: SAMPLING_ASSUMPTION.to_string(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditOutput {
    pub max_ratio: f64,
    pub worst_layer: usize,
    pub batches_checked: usize,
    pub samples_checked: usize,
    pub pass: bool,
}

/// Replay the certified-bound audit over the dataset in batches against a
/// trained checkpoint. A ratio above 1 + 1e-6 is a certificate violation.
pub fn cmd_audit(config_path: &Path, checkpoint_path: &Path, data_dir: &Path) -> Result<AuditOutput> {
    let config = RunConfig::load(config_path)?;
    let (train, _) = config.build_datasets(data_dir)?;
    if train.is_empty() {
        bail!("audit dataset is empty");
    }
    let mut network = config.build_network(train.feature_shape().to_vec())?;
    let entries = load_checkpoint(checkpoint_path)?;
    restore_network(&mut network, &entries)?;
    let loss = config.loss.to_loss();
    let b = config.optimizer.batch_size.min(train.len());
    let mut max_ratio = 0.0f64;
    let mut worst_layer = 0usize;
    let mut batches = 0usize;
    let mut samples = 0usize;
    for chunk_start in (0..train.len()).step_by(b) {
        let end = (chunk_start + b).min(train.len());
        let xs = train.features[chunk_start..end].to_vec();
        let ys = train.labels[chunk_start..end].to_vec();
        let audit = audit_gradient_bounds(
            &mut network,
            &xs,
            &ys,
            &loss,
            train.input_bound,
            config.optimizer.batch_size,
            config.dp.neighboring,
        )?;
        if audit.max_ratio > max_ratio {
            max_ratio = audit.max_ratio;
            worst_layer = audit.worst_layer;
        }
        batches += 1;
        samples += audit.samples_checked;
    }
    Ok(AuditOutput {
        max_ratio,
        worst_layer,
        batches_checked: batches,
        samples_checked: samples,
        pass: max_ratio <= 1.0 + clipfree_core::trainer::AUDIT_TOLERANCE,
    })
}

/// Shared by `account` when called from training configs.
pub fn neighboring_label(n: Neighboring) -> &'static str {
    match n {
        Neighboring::ReplaceOne => "replace-one",
        Neighboring::AddRemove => "add-remove",
    }
}
