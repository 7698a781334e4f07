use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::KernelShape;
use crate::tensor::DType;

/// Standard deviation rule for the Gaussian weight initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    /// `sqrt(2 / fan_in)`.
    #[default]
    He,
    /// `sqrt(2) / fan_in`, kept for comparison runs.
    Literal,
}

impl InitScheme {
    pub fn std_dev(self, fan_in: usize) -> f64 {
        let n = fan_in as f64;
        match self {
            InitScheme::He => (2.0 / n).sqrt(),
            InitScheme::Literal => 2f64.sqrt() / n,
        }
    }
}

/// Architecture hyperparameters of the U-shaped network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channels produced by the first convolution pair.
    pub base_channels: usize,
    /// Number of pooling steps.
    pub depth: usize,
    pub conv_kernel: usize,
    pub pool_kernel: usize,
    pub dropout_p: f64,
    pub dtype: DType,
    pub init: InitScheme,
}

impl Default for ModelConfig {
    /// Depth 4, 64 base channels, 3^3 convolutions, 2^3 pooling, dropout 0.3,
    /// eight classes (seven bleed types plus background).
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            num_classes: 8,
            base_channels: 64,
            depth: 4,
            conv_kernel: 3,
            pool_kernel: 2,
            dropout_p: 0.3,
            dtype: DType::F32,
            init: InitScheme::He,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    UpConv,
    Final,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub shape: KernelShape,
}

impl ModelConfig {
    pub fn canonical() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.depth < 1 {
            return bad("depth must be at least 1".into());
        }
        if self.base_channels < 1 || self.in_channels < 1 {
            return bad("channel counts must be at least 1".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        if self.num_classes > 256 {
            return bad(format!("num_classes {} exceeds the 8-bit label range", self.num_classes));
        }
        if self.conv_kernel < 1 || self.pool_kernel < 1 {
            return bad("kernel extents must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if self
            .base_channels
            .checked_mul(1usize.checked_shl(self.depth as u32).unwrap_or(0))
            .is_none_or(|c| c == 0)
        {
            return bad(format!("depth {} overflows the channel progression", self.depth));
        }
        Ok(())
    }

    /// Channels at encoder level `level` (the bottleneck is level `depth`).
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Every weighted layer in execution order.
    pub fn layer_plan(&self) -> Vec<LayerSpec> {
        let k = self.conv_kernel;
        let conv = |name: String, cin, cout| LayerSpec {
            name,
            kind: LayerKind::Conv,
            shape: KernelShape {
                out_channels: cout,
                in_channels: cin,
                k,
            },
        };
        let mut plan = Vec::new();
        let mut cin = self.in_channels;
        for l in 0..self.depth {
            let c = self.level_channels(l);
            plan.push(conv(format!("enc{l}.conv1"), cin, c));
            plan.push(conv(format!("enc{l}.conv2"), c, c));
            cin = c;
        }
        let cb = self.level_channels(self.depth);
        plan.push(conv("bottleneck.conv1".into(), cin, cb));
        plan.push(conv("bottleneck.conv2".into(), cb, cb));
        for l in (0..self.depth).rev() {
            let c = self.level_channels(l);
            plan.push(LayerSpec {
                name: format!("dec{l}.upconv"),
                kind: LayerKind::UpConv,
                shape: KernelShape {
                    out_channels: c,
                    in_channels: 2 * c,
                    k: self.pool_kernel,
                },
            });
            plan.push(conv(format!("dec{l}.conv1"), 2 * c, c));
            plan.push(conv(format!("dec{l}.conv2"), c, c));
        }
        plan.push(LayerSpec {
            name: "final".into(),
            kind: LayerKind::Final,
            shape: KernelShape {
                out_channels: self.num_classes,
                in_channels: self.base_channels,
                k: 1,
            },
        });
        plan
    }

    pub fn param_count(&self) -> usize {
        self.layer_plan().iter().map(|l| l.shape.param_count()).sum()
    }

    /// Per-axis extent after each stage of the network, starting with the
    /// input. Returns `None` as soon as an extent drops below 1 or a pooled
    /// extent is not divisible by the pool window.
    pub fn extent_chain(&self, input: usize) -> Option<Vec<usize>> {
        let shrink = 2 * (self.conv_kernel - 1);
        let p = self.pool_kernel;
        let mut chain = vec![input];
        let mut s = input;
        for _ in 0..self.depth {
            s = s.checked_sub(shrink).filter(|&v| v >= 1)?;
            chain.push(s);
            if s % p != 0 {
                return None;
            }
            s /= p;
            chain.push(s);
        }
        s = s.checked_sub(shrink).filter(|&v| v >= 1)?;
        chain.push(s);
        for _ in 0..self.depth {
            s *= p;
            chain.push(s);
            s = s.checked_sub(shrink).filter(|&v| v >= 1)?;
            chain.push(s);
        }
        Some(chain)
    }

    /// Output extent for a per-axis input extent, if it is a valid tile.
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        self.extent_chain(input).and_then(|c| c.last().copied())
    }

    /// Every `(input, output)` pair in `range` satisfying the tiling
    /// constraint.
    pub fn valid_tile_shapes(&self, range: RangeInclusive<usize>) -> Vec<(usize, usize)> {
        range
            .filter_map(|s| self.output_extent(s).map(|o| (s, o)))
            .collect()
    }

    /// Nearest valid input extents strictly below and above `input`.
    pub fn nearest_valid(&self, input: usize) -> (Option<usize>, Option<usize>) {
        let below = (1..input).rev().find(|&s| self.output_extent(s).is_some());
        let limit = input.saturating_add(4096);
        let above = (input + 1..=limit).find(|&s| self.output_extent(s).is_some());
        (below, above)
    }

    /// Checks all three extents and reports the nearest valid sizes on failure.
    pub fn check_tile(&self, extents: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for (a, &s) in extents.iter().enumerate() {
            match self.output_extent(s) {
                Some(o) => out[a] = o,
                None => {
                    let (below, above) = self.nearest_valid(s);
                    let describe = |v: Option<usize>| match v {
                        Some(v) => format!("{v} (output {})", self.output_extent(v).unwrap_or(0)),
                        None => "none".into(),
                    };
                    return Err(Error::Tiling(format!(
                        "input extent {s} on axis {a} is not a valid tile for depth {}, conv kernel {}, pool kernel {}; nearest valid: below {}, above {}",
                        self.depth,
                        self.conv_kernel,
                        self.pool_kernel,
                        describe(below),
                        describe(above)
                    )));
                }
            }
        }
        Ok(out)
    }

    /// Largest valid input extent not exceeding `max_input`.
    pub fn largest_valid_at_most(&self, max_input: usize) -> Option<(usize, usize)> {
        (1..=max_input)
            .rev()
            .find_map(|s| self.output_extent(s).map(|o| (s, o)))
    }

    /// Smallest valid input whose output extent is at least `min_output`.
    pub fn smallest_input_covering(&self, min_output: usize) -> Option<(usize, usize)> {
        let start = min_output.max(1);
        (start..start.saturating_add(8192)).find_map(|s| {
            self.output_extent(s)
                .filter(|&o| o >= min_output)
                .map(|o| (s, o))
        })
    }
}
