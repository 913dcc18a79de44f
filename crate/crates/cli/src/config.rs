//! Run configuration: a fixed TOML schema validated fail-closed. Unknown
//! keys are errors so that privacy-critical settings cannot be silently
//! ignored.

use anyhow::{bail, Context, Result};
use clipfree_core::accountant::Strategy;
use clipfree_core::bounds::Neighboring;
use clipfree_core::data::{load_cifar10, load_mnist, synthetic_two_gaussians, Dataset, Preprocess};
use clipfree_core::layers::{ConvMode, LayerDescriptor, MergeRule, Network};
use clipfree_core::losses::LossKind;
use clipfree_core::numerics::Padding;
use clipfree_core::trainer::{BoundsRefresh, TrainConfig};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub dp: DpSection,
    pub optimizer: OptimizerSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Mnist,
    Cifar10,
    SyntheticTwoGaussians,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreprocessMode {
    Clip,
    Normalize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    pub preprocess: PreprocessMode,
    /// Certified input-norm bound established by preprocessing.
    pub input_bound: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_per_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub layers: Vec<LayerSpec>,
}

fn default_lipschitz() -> f64 {
    1.0
}

fn default_stride() -> usize {
    1
}

fn default_padding() -> Padding {
    Padding::Zero
}

fn default_conv_mode() -> ConvMode {
    ConvMode::Plain
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    /// Bound defaults to the data section's input bound.
    BoundedInput {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bound: Option<f64>,
    },
    SpectralDense {
        units: usize,
        #[serde(default = "default_lipschitz")]
        lipschitz: f64,
    },
    OrthoDense {
        units: usize,
        #[serde(default = "default_lipschitz")]
        lipschitz: f64,
    },
    SpectralConv2d {
        filters: usize,
        kernel_size: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default = "default_padding")]
        padding: Padding,
        #[serde(default = "default_conv_mode")]
        mode: ConvMode,
        #[serde(default = "default_lipschitz")]
        lipschitz: f64,
    },
    Bias {
        bound: f64,
    },
    GroupSort2,
    Relu,
    Tanh,
    ScaledL2NormPooling2d {
        pool_size: usize,
    },
    LayerCentering,
    Flatten,
    ClipGradient {
        clip: f64,
    },
    ResidualSplit,
    ResidualMerge {
        rule: MergeRule,
    },
}

impl LayerSpec {
    pub fn to_descriptor(&self, default_input_bound: f64) -> Result<LayerDescriptor> {
        Ok(match self {
            LayerSpec::BoundedInput { bound } => {
                let b = bound.unwrap_or(default_input_bound);
                if b < default_input_bound {
                    bail!(
                        "bounded_input bound {b} is below the preprocessing bound \
                         {default_input_bound}; inputs would be re-projected"
                    );
                }
                LayerDescriptor::BoundedInput { bound: b }
            }
            LayerSpec::SpectralDense { units, lipschitz } => LayerDescriptor::SpectralDense {
                units: *units,
                lipschitz: *lipschitz,
            },
            LayerSpec::OrthoDense { units, lipschitz } => LayerDescriptor::OrthoDense {
                units: *units,
                lipschitz: *lipschitz,
            },
            LayerSpec::SpectralConv2d {
                filters,
                kernel_size,
                stride,
                padding,
                mode,
                lipschitz,
            } => LayerDescriptor::SpectralConv2D {
                filters: *filters,
                kernel: (*kernel_size, *kernel_size),
                stride: (*stride, *stride),
                padding: *padding,
                mode: *mode,
                lipschitz: *lipschitz,
            },
            LayerSpec::Bias { bound } => LayerDescriptor::Bias { bound: *bound },
            LayerSpec::GroupSort2 => LayerDescriptor::GroupSort2,
            LayerSpec::Relu => LayerDescriptor::ReLU,
            LayerSpec::Tanh => LayerDescriptor::Tanh,
            LayerSpec::ScaledL2NormPooling2d { pool_size } => {
                LayerDescriptor::ScaledL2NormPooling2D {
                    pool: (*pool_size, *pool_size),
                }
            }
            LayerSpec::LayerCentering => LayerDescriptor::LayerCentering,
            LayerSpec::Flatten => LayerDescriptor::Flatten,
            LayerSpec::ClipGradient { clip } => LayerDescriptor::ClipGradient { clip: *clip },
            LayerSpec::ResidualSplit => LayerDescriptor::ResidualSplit,
            LayerSpec::ResidualMerge { rule } => LayerDescriptor::ResidualMerge { rule: *rule },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossSection {
    TauCategoricalCrossentropy { tau: f64 },
    MulticlassHinge { margin: f64 },
    KantorovichRubinstein,
    HingeKantorovichRubinstein { margin: f64, alpha: f64 },
    KCosineSimilarity { k: f64, x_min: f64 },
    BinaryCrossentropy,
}

impl LossSection {
    pub fn to_loss(&self) -> LossKind {
        match self {
            LossSection::TauCategoricalCrossentropy { tau } => {
                LossKind::TauCategoricalCrossentropy { tau: *tau }
            }
            LossSection::MulticlassHinge { margin } => {
                LossKind::MulticlassHinge { margin: *margin }
            }
            LossSection::KantorovichRubinstein => LossKind::KantorovichRubinstein,
            LossSection::HingeKantorovichRubinstein { margin, alpha } => {
                LossKind::HingeKantorovichRubinstein {
                    margin: *margin,
                    alpha: *alpha,
                }
            }
            LossSection::KCosineSimilarity { k, x_min } => LossKind::KCosineSimilarity {
                k: *k,
                x_min: *x_min,
            },
            LossSection::BinaryCrossentropy => LossKind::BinaryCrossentropy,
        }
    }
}

fn default_neighboring() -> Neighboring {
    Neighboring::ReplaceOne
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSection {
    pub noise_multiplier: f64,
    pub delta: f64,
    pub strategy: Strategy,
    #[serde(default = "default_neighboring")]
    pub neighboring: Neighboring,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_max: Option<f64>,
}

fn default_momentum() -> f64 {
    0.0
}

fn default_audit_every() -> usize {
    1
}

fn default_bounds_refresh() -> BoundsRefresh {
    BoundsRefresh::PerStep
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_audit_every")]
    pub audit_every: usize,
    #[serde(default = "default_bounds_refresh")]
    pub bounds_refresh: BoundsRefresh,
}

/// Allowed keys per internally tagged table. Tagged enums bypass serde's
/// deny_unknown_fields, so the key sets are checked by hand: unknown keys
/// in privacy-critical settings must be hard errors.
fn check_tagged_keys(table: &toml::Table, context: &str, allowed: &[&str]) -> Result<()> {
    for key in table.keys() {
        if !allowed.contains(&key.as_str()) {
            bail!("unknown key `{key}` in {context} (allowed: {allowed:?})");
        }
    }
    Ok(())
}

fn validate_tagged_sections(value: &toml::Value) -> Result<()> {
    if let Some(layers) = value
        .get("model")
        .and_then(|m| m.get("layers"))
        .and_then(|l| l.as_array())
    {
        for (i, layer) in layers.iter().enumerate() {
            let table = layer
                .as_table()
                .with_context(|| format!("model.layers[{i}] must be a table"))?;
            let kind = table
                .get("kind")
                .and_then(|k| k.as_str())
                .with_context(|| format!("model.layers[{i}] needs a string `kind`"))?;
            let allowed: &[&str] = match kind {
                "bounded_input" => &["kind", "bound"],
                "spectral_dense" | "ortho_dense" => &["kind", "units", "lipschitz"],
                "spectral_conv2d" => &[
                    "kind",
                    "filters",
                    "kernel_size",
                    "stride",
                    "padding",
                    "mode",
                    "lipschitz",
                ],
                "bias" => &["kind", "bound"],
                "scaled_l2_norm_pooling2d" => &["kind", "pool_size"],
                "clip_gradient" => &["kind", "clip"],
                "residual_merge" => &["kind", "rule"],
                "group_sort2" | "relu" | "tanh" | "layer_centering" | "flatten"
                | "residual_split" => &["kind"],
                other => bail!("unknown layer kind `{other}` in model.layers[{i}]"),
            };
            check_tagged_keys(table, &format!("model.layers[{i}] ({kind})"), allowed)?;
        }
    }
    if let Some(loss) = value.get("loss").and_then(|l| l.as_table()) {
        let kind = loss
            .get("kind")
            .and_then(|k| k.as_str())
            .context("loss needs a string `kind`")?;
        let allowed: &[&str] = match kind {
            "tau_categorical_crossentropy" => &["kind", "tau"],
            "multiclass_hinge" => &["kind", "margin"],
            "kantorovich_rubinstein" | "binary_crossentropy" => &["kind"],
            "hinge_kantorovich_rubinstein" => &["kind", "margin", "alpha"],
            "k_cosine_similarity" => &["kind", "k", "x_min"],
            other => bail!("unknown loss kind `{other}`"),
        };
        check_tagged_keys(loss, &format!("loss ({kind})"), allowed)?;
    }
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).context("invalid configuration")?;
        validate_tagged_sections(&value)?;
        let cfg: RunConfig = value.try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing configuration")
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.input_bound <= 0.0 {
            bail!("data.input_bound must be positive");
        }
        if self.model.layers.is_empty() {
            bail!("model needs at least one layer");
        }
        if self.data.source == DataSource::SyntheticTwoGaussians
            && (self.data.n_per_class.is_none()
                || self.data.dim.is_none()
                || self.data.separation.is_none())
        {
            bail!("synthetic-two-gaussians needs n_per_class, dim and separation");
        }
        Ok(())
    }

    pub fn preprocess_mode(&self) -> Preprocess {
        match self.data.preprocess {
            PreprocessMode::Clip => Preprocess::Clip(self.data.input_bound),
            PreprocessMode::Normalize => Preprocess::Normalize(self.data.input_bound),
        }
    }

    /// Load (or synthesize) the train and validation splits and apply the
    /// configured preprocessing to both.
    pub fn build_datasets(&self, data_dir: &Path) -> Result<(Dataset, Dataset)> {
        let (mut train, mut val) = match self.data.source {
            DataSource::Mnist => load_mnist(data_dir)
                .with_context(|| format!("mnist data not found in {}", data_dir.display()))?,
            DataSource::Cifar10 => load_cifar10(data_dir)
                .with_context(|| format!("cifar-10 data not found in {}", data_dir.display()))?,
            DataSource::SyntheticTwoGaussians => {
                let n = self.data.n_per_class.expect("validated");
                let dim = self.data.dim.expect("validated");
                let sep = self.data.separation.expect("validated");
                let train = synthetic_two_gaussians(n, dim, sep, self.seed)?;
                let val = synthetic_two_gaussians(n / 4 + 1, dim, sep, self.seed.wrapping_add(1))?;
                (train, val)
            }
        };
        let mode = self.preprocess_mode();
        train.preprocess(mode)?;
        val.preprocess(mode)?;
        Ok((train, val))
    }

    /// Build and initialize the network; parameters come from seed stream 0.
    pub fn build_network(&self, input_shape: Vec<usize>) -> Result<Network> {
        let mut descriptors = Vec::with_capacity(self.model.layers.len());
        for spec in &self.model.layers {
            descriptors.push(spec.to_descriptor(self.data.input_bound)?);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Network::new(input_shape, descriptors, &mut rng).context("model construction failed")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.optimizer.batch_size,
            noise_multiplier: self.dp.noise_multiplier,
            delta: self.dp.delta,
            strategy: self.dp.strategy,
            neighboring: self.dp.neighboring,
            epsilon_max: self.dp.epsilon_max,
            learning_rate: self.optimizer.learning_rate,
            momentum: self.optimizer.momentum,
            epochs: self.optimizer.epochs,
            rng_seed: self.seed,
            audit_every: self.optimizer.audit_every,
            bounds_refresh: self.optimizer.bounds_refresh,
        }
    }
}
