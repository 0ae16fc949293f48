use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_idx_split, Dataset, GaussianMixture, Split};
use crate::error::{Error, Result};
use crate::nn::ModelSpec;
use crate::optim::OptimizerConfig;
use crate::prune::PruneMethod;
use crate::train::TrainSettings;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSelector {
    /// 784–300–100–10 with biases.
    Lenet300100,
    /// ReLU MLP from the dataset width through `hidden` to the class count.
    Mlp {
        hidden: Vec<usize>,
        #[serde(default = "yes")]
        bias: bool,
    },
    /// `depth` hidden layers of `width` units.
    DeepNarrow { depth: usize, width: usize },
    /// Conv-ReLU-Pool ×2 + dense head; needs `C×S×S` inputs.
    SmallConv,
    Custom { spec: ModelSpec },
}

fn yes() -> bool {
    true
}

impl ModelSelector {
    pub fn resolve(&self, sample_shape: &[usize], classes: usize) -> Result<ModelSpec> {
        let flat: usize = sample_shape.iter().product();
        let spec = match self {
            ModelSelector::Lenet300100 => ModelSpec::lenet_300_100(),
            ModelSelector::Mlp { hidden, bias } => {
                let mut widths = vec![flat];
                widths.extend(hidden);
                widths.push(classes);
                ModelSpec::mlp("mlp", &widths, *bias)
            }
            ModelSelector::DeepNarrow { depth, width } => {
                ModelSpec::deep_narrow(flat, *depth, *width, classes)
            }
            ModelSelector::SmallConv => match *sample_shape {
                [c, h, w] if h == w => ModelSpec::small_conv(c, h, classes),
                _ => {
                    return Err(Error::Config(format!(
                        "small_conv needs square C×S×S inputs, dataset has {sample_shape:?}"
                    )))
                }
            },
            ModelSelector::Custom { spec } => spec.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSelector {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        classes: Option<usize>,
    },
    Synthetic {
        classes: usize,
        dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        separation: f64,
        seed: u64,
    },
}

impl DatasetSelector {
    pub fn label(&self) -> String {
        match self {
            DatasetSelector::Idx { train_images, .. } => train_images
                .file_stem()
                .map_or("idx".into(), |s| s.to_string_lossy().into_owned()),
            DatasetSelector::Synthetic { classes, dim, .. } => format!("gauss-{classes}x{dim}"),
        }
    }

    /// Loads (train, test); the test split reuses the training statistics.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSelector::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                classes,
            } => {
                let train = load_idx_split(train_images, train_labels, *classes, Split::Train, None)?;
                let test = load_idx_split(
                    test_images,
                    test_labels,
                    Some(train.classes()),
                    Split::Test,
                    Some(train.stats().clone()),
                )?;
                Ok((train, test))
            }
            DatasetSelector::Synthetic {
                classes,
                dim,
                train_per_class,
                test_per_class,
                separation,
                seed,
            } => GaussianMixture {
                classes: *classes,
                dim: *dim,
                separation: *separation,
                seed: *seed,
            }
            .split(*train_per_class, *test_per_class),
        }
    }

    fn rebase(&mut self, dir: &Path) {
        if let DatasetSelector::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } = self
        {
            for p in [train_images, train_labels, test_images, test_labels] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
    }
}

fn one() -> usize {
    1
}

/// One sweep over methods × sparsities × seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelSelector,
    pub dataset: DatasetSelector,
    pub methods: Vec<PruneMethod>,
    pub sparsities: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Iterations N for SynFlow and DRIVE.
    pub prune_iterations: usize,
    /// DRIVE's dense early-training epochs E.
    pub pretrain_epochs: usize,
    pub imp_cycles: usize,
    pub imp_epochs_per_cycle: usize,
    /// Training budget T_total shared by every method.
    pub total_epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub output_dir: PathBuf,
    #[serde(default = "one")]
    pub workers: usize,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative dataset paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            cfg.dataset.rebase(dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            optimizer: self.optimizer.clone(),
            batch_size: self.batch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.methods.is_empty() {
            return bad("no methods".into());
        }
        if self.seeds.is_empty() {
            return bad("no seeds".into());
        }
        if self.sparsities.is_empty() {
            return bad("no sparsities".into());
        }
        if let Some(&k) = self.sparsities.iter().find(|k| !(0.0..1.0).contains(*k)) {
            return Err(Error::InvalidSparsity(k));
        }
        if self.batch_size == 0 || self.prune_iterations == 0 || self.imp_cycles == 0 {
            return bad("batch_size, prune_iterations and imp_cycles must be positive".into());
        }
        if self.total_epochs == 0 {
            return bad("total_epochs must be positive".into());
        }
        if self.methods.contains(&PruneMethod::Drive) && self.pretrain_epochs >= self.total_epochs {
            return Err(Error::BudgetExceeded {
                total: self.total_epochs,
                pretrain: self.pretrain_epochs,
            });
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
name = "demo"
methods = ["snip", "drive"]
sparsities = [0.5, 0.9]
seeds = [1]
prune_iterations = 10
pretrain_epochs = 1
imp_cycles = 2
imp_epochs_per_cycle = 1
total_epochs = 3
batch_size = 16
output_dir = "out"

[model]
kind = "mlp"
hidden = [8]

[dataset]
kind = "synthetic"
classes = 3
dim = 5
train_per_class = 20
test_per_class = 10
separation = 4.0
seed = 9

[optimizer]
kind = { type = "sgd", momentum = 0.9 }
schedule = { type = "constant", lr = 0.05 }
"#;

    #[test]
    fn parses_sample() {
        let cfg = ExperimentConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(cfg.methods, vec![PruneMethod::Snip, PruneMethod::Drive]);
        assert_eq!(cfg.workers, 1);
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let typo = SAMPLE.replace("batch_size = 16", "batch_size = 16\nbatchsize = 4");
        assert!(matches!(ExperimentConfig::from_toml(&typo), Err(Error::Config(_))));
        let nested = SAMPLE.replace("separation = 4.0", "separation = 4.0\nseperation = 1.0");
        assert!(ExperimentConfig::from_toml(&nested).is_err());
    }

    #[test]
    fn pretraining_must_fit_budget() {
        let over = SAMPLE.replace("pretrain_epochs = 1", "pretrain_epochs = 3");
        assert!(matches!(
            ExperimentConfig::from_toml(&over),
            Err(Error::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn sparsity_range_checked() {
        let bad = SAMPLE.replace("[0.5, 0.9]", "[0.5, 1.0]");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(Error::InvalidSparsity(_))));
    }

    #[test]
    fn selectors_resolve() {
        let s = ModelSelector::Mlp {
            hidden: vec![4],
            bias: true,
        }
        .resolve(&[1, 2, 3], 5)
        .unwrap();
        assert_eq!(s.input_shape, vec![6]);
        assert_eq!(s.classes, 5);
        assert!(ModelSelector::SmallConv.resolve(&[12], 3).is_err());
        let d = ModelSelector::DeepNarrow { depth: 8, width: 16 }.resolve(&[20], 10).unwrap();
        assert_eq!(d.layers.len(), 9);
    }
}
