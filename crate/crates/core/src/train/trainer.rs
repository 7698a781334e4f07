use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::sample_training_tile;
use crate::error::{Error, Result};
use crate::nn::{softmax_voxelwise, weighted_cross_entropy};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::preprocess::{compute_weight_map, WeightMap};
use crate::rng;
use crate::tensor::{LabelVolume, Scalar, Volume};
use crate::unet::{encode_checkpoint, save_checkpoint, Checkpoint, Model, ModelConfig};

fn yes() -> bool {
    true
}

/// Loss weighting: class balancing, optionally tempered by raising the class
/// counts to `class_power`, plus the component-border term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Weighting {
    pub balance: bool,
    pub class_power: f64,
    pub w0: f64,
    pub sigma_b: f64,
}

impl Default for Weighting {
    fn default() -> Self {
        Weighting {
            balance: true,
            class_power: 1.0,
            w0: 10.0,
            sigma_b: 5.0,
        }
    }
}

impl Weighting {
    pub fn uniform() -> Self {
        Weighting {
            balance: false,
            w0: 0.0,
            ..Weighting::default()
        }
    }

    fn counts(&self, raw: &[u64]) -> Vec<u64> {
        raw.iter()
            .map(|&n| match (n, self.balance) {
                (0, _) => 0,
                (_, false) => 1,
                (n, true) => ((n as f64).powf(self.class_power).round() as u64).max(1),
            })
            .collect()
    }

    pub fn build(&self, labels: &LabelVolume, class_counts: &[u64]) -> Result<WeightMap> {
        if !(self.class_power >= 0.0) || !self.class_power.is_finite() {
            return Err(Error::Parameter(format!("class_power {} is invalid", self.class_power)));
        }
        compute_weight_map(labels, &self.counts(class_counts), self.w0, self.sigma_b)
    }
}

/// Everything that determines a training run apart from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Input tile extents; must be valid for the model.
    pub tile: [usize; 3],
    /// Total step budget.
    pub steps: u64,
    pub seed: u64,
    #[serde(default = "yes")]
    pub lesion_bias: bool,
    #[serde(default)]
    pub weighting: Weighting,
    /// Checkpoint interval in steps; 0 disables periodic checkpoints.
    #[serde(default)]
    pub checkpoint_every: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.model.check_tile(self.tile)?;
        if !(self.optimizer.lr() > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.optimizer.lr())));
        }
        Ok(())
    }
}

struct Sample<T> {
    image: Volume<T>,
    labels: LabelVolume,
    weights: Volume<T>,
}

/// Batch-size-one trainer. Step `s` draws its volume, tile and dropout mask
/// from `(seed, s)` alone, so a resumed run continues the same sequence.
pub struct Trainer<T> {
    config: TrainConfig,
    model: Model<T>,
    optimizer: OptimizerState<T>,
    step: u64,
    samples: Vec<Sample<T>>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, volumes: Vec<(Volume<T>, LabelVolume)>) -> Result<Self> {
        config.validate()?;
        let model = Model::build(&config.model, rng::derive_seed(config.seed, 0))?;
        let optimizer = config.optimizer.init(model.kernels())?;
        Self::assemble(config, model, optimizer, 0, volumes)
    }

    /// Continues from a checkpoint written by an earlier run of the same
    /// configuration.
    pub fn resume(config: TrainConfig, checkpoint: Checkpoint<T>, volumes: Vec<(Volume<T>, LabelVolume)>) -> Result<Self> {
        config.validate()?;
        if checkpoint.model.config() != &config.model {
            return Err(Error::Config("checkpoint model configuration differs from the run configuration".into()));
        }
        let optimizer = match checkpoint.optimizer {
            Some(o) => o,
            None => config.optimizer.init(checkpoint.model.kernels())?,
        };
        Self::assemble(config, checkpoint.model, optimizer, checkpoint.step, volumes)
    }

    fn assemble(
        config: TrainConfig,
        model: Model<T>,
        optimizer: OptimizerState<T>,
        step: u64,
        volumes: Vec<(Volume<T>, LabelVolume)>,
    ) -> Result<Self> {
        if volumes.is_empty() {
            return Err(Error::Config("training needs at least one volume".into()));
        }
        let classes = config.model.num_classes;
        let mut counts = vec![0u64; classes];
        for (_, l) in &volumes {
            l.validate_classes(classes)?;
            for (c, n) in l.histogram(classes).into_iter().enumerate() {
                counts[c] += n;
            }
        }
        let out = config.model.check_tile(config.tile)?;
        let half = [0, 1, 2].map(|a| (config.tile[a] - out[a]) / 2);
        let after = [0, 1, 2].map(|a| config.tile[a] - out[a] - half[a]);
        let samples = volumes
            .into_iter()
            .map(|(image, labels)| {
                if (0..3).any(|a| image.extents()[a] < out[a]) {
                    return Err(Error::Tiling(format!(
                        "volume {:?} is smaller than the output tile {out:?}",
                        image.extents()
                    )));
                }
                let weights = config.weighting.build(&labels, &counts)?.volume::<T>();
                Ok(Sample {
                    image: image.pad(half, after)?,
                    labels: labels.pad(half, after)?,
                    weights: weights.pad(half, after)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Trainer {
            config,
            model,
            optimizer,
            step,
            samples,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn optimizer(&self) -> &OptimizerState<T> {
        &self.optimizer
    }

    /// Steps completed so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// One optimizer step on one tile; returns the weighted loss before the
    /// update.
    pub fn train_step(&mut self) -> Result<f64> {
        let key = rng::derive_seed(self.config.seed, self.step + 1);
        let n = self.samples.len();
        let s = &self.samples[((rng::uniform(key, 0) * n as f64) as usize).min(n - 1)];
        let tile = sample_training_tile(
            &s.image,
            &s.labels,
            &s.weights,
            &self.config.model,
            self.config.tile,
            rng::derive_seed(key, 1),
            self.config.lesion_bias,
        )?;
        let (logits, tape) = self.model.forward(&tile.input, true, rng::derive_seed(key, 2))?;
        let probs = softmax_voxelwise(&logits)?;
        let (loss, grad) = weighted_cross_entropy(&probs, &tile.labels, &tile.weights)?;
        let grads = self.model.backward(&tape, &grad)?;
        self.optimizer.step(self.model.kernels_mut(), &grads.kernels)?;
        self.step += 1;
        let loss = loss.as_f64();
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("loss became {loss} at step {}", self.step)));
        }
        Ok(loss)
    }

    /// Trains until the step budget is reached, reporting `(step, loss)`
    /// after every step.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, u64, f64) -> Result<()>) -> Result<Vec<f64>> {
        let mut losses = Vec::new();
        while self.step < self.config.steps {
            let loss = self.train_step()?;
            losses.push(loss);
            on_step(self, self.step, loss)?;
        }
        Ok(losses)
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        encode_checkpoint(&self.model, Some(&self.optimizer), self.step)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.model, Some(&self.optimizer), self.step, path)
    }
}

/// Per-step loss log: a `step,loss` header and one row per step.
pub struct LossLog {
    file: fs::File,
    path: std::path::PathBuf,
}

impl LossLog {
    /// Creates the log, or on resume keeps only the rows up to `keep_until`.
    pub fn open(path: &Path, keep_until: u64) -> Result<Self> {
        let mut text = String::from("step,loss\n");
        if keep_until > 0 {
            let old = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for line in old.lines().skip(1) {
                let step: u64 = line
                    .split(',')
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad loss row {line:?} in {}", path.display())))?;
                if step <= keep_until {
                    text.push_str(line);
                    text.push('\n');
                }
            }
        }
        fs::write(path, &text).map_err(|e| Error::io(path, e))?;
        let file = fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(LossLog {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn record(&mut self, step: u64, loss: f64) -> Result<()> {
        writeln!(self.file, "{step},{loss:e}").map_err(|e| Error::io(&self.path, e))
    }
}
