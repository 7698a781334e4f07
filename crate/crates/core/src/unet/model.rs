use std::sync::atomic::{AtomicU64, Ordering};

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{
    conv3d_backward, conv3d_forward, dropout_backward, dropout_forward, maxpool3d_backward,
    maxpool3d_forward, relu_backward, relu_forward, upconv3d_backward, upconv3d_forward,
    ConvKernel, DropoutMask, PoolIndices,
};
use crate::rng;
use crate::tensor::{Scalar, Shape, Volume};

use super::config::{LayerKind, LayerSpec, ModelConfig};

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed)
}

/// Materialized parameters of the U-shaped network, in execution order.
#[derive(Debug)]
pub struct Model<T> {
    config: ModelConfig,
    layers: Vec<LayerSpec>,
    kernels: Vec<ConvKernel<T>>,
    id: u64,
    generation: u64,
}

impl<T: Scalar> Clone for Model<T> {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            layers: self.layers.clone(),
            kernels: self.kernels.clone(),
            id: next_id(),
            generation: 0,
        }
    }
}

impl<T: Scalar> PartialEq for Model<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.layers == other.layers && self.kernels == other.kernels
    }
}

/// Gradients with the same named structure as the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub kernels: Vec<ConvKernel<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn scale(&mut self, factor: T) {
        for k in &mut self.kernels {
            for buf in k.buffers_mut() {
                buf.iter_mut().for_each(|v| *v = *v * factor);
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.kernels
            .iter()
            .all(|k| k.weights.iter().chain(&k.bias).all(|&v| v == T::zero()))
    }
}

struct EncoderRecord<T> {
    input: Volume<T>,
    a: Volume<T>,
    b: Volume<T>,
    pool: PoolIndices,
}

struct DecoderRecord<T> {
    up_input: Volume<T>,
    up_channels: usize,
    skip_extents: [usize; 3],
    cat: Volume<T>,
    a: Volume<T>,
    b: Volume<T>,
}

/// Everything the backward pass needs from one forward pass.
pub struct Tape<T> {
    model_id: u64,
    generation: u64,
    encoder: Vec<EncoderRecord<T>>,
    bottleneck_input: Volume<T>,
    bottleneck_a: Volume<T>,
    bottleneck_b: Volume<T>,
    dropout: DropoutMask,
    decoder: Vec<DecoderRecord<T>>,
    final_input: Volume<T>,
    logits_shape: Shape,
}

impl<T: Scalar> Tape<T> {
    /// Sign pattern of every ReLU output and every pooling argmax. Two forward
    /// passes with equal patterns run through the same linear pieces of the
    /// network.
    pub fn branch_pattern(&self) -> Vec<u64> {
        let mut out = Vec::new();
        let mut push_signs = |v: &Volume<T>| {
            for chunk in v.data().chunks(64) {
                let mut word = 0u64;
                for (i, &x) in chunk.iter().enumerate() {
                    if x > T::zero() {
                        word |= 1 << i;
                    }
                }
                out.push(word);
            }
        };
        for e in &self.encoder {
            push_signs(&e.a);
            push_signs(&e.b);
        }
        push_signs(&self.bottleneck_a);
        push_signs(&self.bottleneck_b);
        for d in &self.decoder {
            push_signs(&d.a);
            push_signs(&d.b);
        }
        for e in &self.encoder {
            out.extend(e.pool.indices.iter().map(|&i| i as u64));
        }
        out
    }
}

impl<T: Scalar> Model<T> {
    /// Gaussian initialization: weights ~ N(0, σ²) with σ from the configured
    /// scheme and fan-in `C_in·k³`; biases zero. Layer `i` draws from its own
    /// stream of `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layers = config.layer_plan();
        let mut kernels = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            let s = layer.shape;
            let mut kern = ConvKernel::zeros(s.out_channels, s.in_channels, s.k)?;
            let sigma = config.init.std_dev(s.in_channels * s.k * s.k * s.k);
            let normal = Normal::new(0.0, sigma)
                .map_err(|e| Error::Config(format!("initialization of {}: {e}", layer.name)))?;
            let mut r = rng::stream(seed, i as u64);
            for w in &mut kern.weights {
                *w = T::from_f64(normal.sample(&mut r));
            }
            kernels.push(kern);
        }
        Ok(Model {
            config: config.clone(),
            layers,
            kernels,
            id: next_id(),
            generation: 0,
        })
    }

    /// Rebuilds a model from stored kernels, checking them against the plan.
    pub fn from_kernels(config: &ModelConfig, kernels: Vec<ConvKernel<T>>) -> Result<Self> {
        config.validate()?;
        let layers = config.layer_plan();
        if layers.len() != kernels.len() {
            return Err(Error::Format(format!(
                "{} kernel blocks for a {}-layer plan",
                kernels.len(),
                layers.len()
            )));
        }
        for (l, k) in layers.iter().zip(&kernels) {
            if l.shape != k.shape() {
                return Err(Error::Format(format!(
                    "block {} has shape {:?}, plan expects {:?}",
                    l.name,
                    k.shape(),
                    l.shape
                )));
            }
        }
        Ok(Model {
            config: config.clone(),
            layers,
            kernels,
            id: next_id(),
            generation: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn kernels(&self) -> &[ConvKernel<T>] {
        &self.kernels
    }

    /// Mutable parameter access. Any tape recorded before this call becomes
    /// stale.
    pub fn kernels_mut(&mut self) -> &mut [ConvKernel<T>] {
        self.generation += 1;
        &mut self.kernels
    }

    pub fn kernel(&self, name: &str) -> Option<&ConvKernel<T>> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .map(|i| &self.kernels[i])
    }

    pub fn param_count(&self) -> usize {
        self.kernels.iter().map(|k| k.param_count()).sum()
    }

    pub fn count_layers(&self, kind: LayerKind) -> usize {
        self.layers.iter().filter(|l| l.kind == kind).count()
    }

    fn enc_index(&self, level: usize) -> usize {
        2 * level
    }

    fn bottleneck_index(&self) -> usize {
        2 * self.config.depth
    }

    fn dec_index(&self, level: usize) -> usize {
        // Decoder levels run from depth-1 down to 0, three blocks each.
        2 * self.config.depth + 2 + 3 * (self.config.depth - 1 - level)
    }

    fn final_index(&self) -> usize {
        self.kernels.len() - 1
    }

    /// Runs the network on one tile. In training mode dropout after the
    /// second bottleneck convolution draws its mask from `seed`.
    pub fn forward(&self, input: &Volume<T>, training: bool, seed: u64) -> Result<(Volume<T>, Tape<T>)> {
        let cfg = &self.config;
        if input.channels() != cfg.in_channels {
            return Err(Error::Shape(format!(
                "input has {} channels, model expects {}",
                input.channels(),
                cfg.in_channels
            )));
        }
        let out_ext = cfg.check_tile(input.extents())?;
        let p = cfg.pool_kernel;

        let conv_relu = |x: &Volume<T>, idx: usize| -> Result<Volume<T>> {
            Ok(relu_forward(&conv3d_forward(x, &self.kernels[idx])?))
        };

        let mut encoder = Vec::with_capacity(cfg.depth);
        let mut x = input.clone();
        for level in 0..cfg.depth {
            let i = self.enc_index(level);
            let a = conv_relu(&x, i)?;
            let b = conv_relu(&a, i + 1)?;
            let (pooled, pool) = maxpool3d_forward(&b, p)?;
            encoder.push(EncoderRecord { input: x, a, b, pool });
            x = pooled;
        }

        let bi = self.bottleneck_index();
        let bottleneck_a = conv_relu(&x, bi)?;
        let bottleneck_b = conv_relu(&bottleneck_a, bi + 1)?;
        let (mut x_up, dropout) = dropout_forward(&bottleneck_b, cfg.dropout_p, seed, training)?;
        let bottleneck_input = x;

        let mut decoder = Vec::with_capacity(cfg.depth);
        for level in (0..cfg.depth).rev() {
            let i = self.dec_index(level);
            let up = upconv3d_forward(&x_up, &self.kernels[i])?;
            let skip = &encoder[level].b;
            let cropped = skip.crop_center(skip.shape().with_extents(up.extents()))?;
            debug_assert_eq!(cropped.extents(), up.extents());
            let cat = Volume::concat_channels(&up, &cropped)?;
            let a = conv_relu(&cat, i + 1)?;
            let b = conv_relu(&a, i + 2)?;
            let next = b.clone();
            decoder.push(DecoderRecord {
                up_input: x_up,
                up_channels: up.channels(),
                skip_extents: skip.extents(),
                cat,
                a,
                b,
            });
            x_up = next;
        }

        let logits = conv3d_forward(&x_up, &self.kernels[self.final_index()])?;
        debug_assert_eq!(logits.extents(), out_ext);
        let tape = Tape {
            model_id: self.id,
            generation: self.generation,
            encoder,
            bottleneck_input,
            bottleneck_a,
            bottleneck_b,
            dropout,
            decoder,
            final_input: x_up,
            logits_shape: logits.shape(),
        };
        Ok((logits, tape))
    }

    /// Inference-mode logits without keeping the tape.
    pub fn infer(&self, input: &Volume<T>) -> Result<Volume<T>> {
        Ok(self.forward(input, false, 0)?.0)
    }

    /// Exact adjoint of [`Model::forward`] for the recorded tape.
    pub fn backward(&self, tape: &Tape<T>, grad_logits: &Volume<T>) -> Result<Gradients<T>> {
        if tape.model_id != self.id || tape.generation != self.generation {
            return Err(Error::State(
                "tape was recorded against different or since-updated parameters".into(),
            ));
        }
        if grad_logits.shape() != tape.logits_shape {
            return Err(Error::Shape(format!(
                "logit gradient {} does not match forward output {}",
                grad_logits.shape(),
                tape.logits_shape
            )));
        }
        let cfg = &self.config;
        let mut grads: Vec<Option<ConvKernel<T>>> = vec![None; self.kernels.len()];

        let fi = self.final_index();
        let (mut g, gk) = conv3d_backward(&tape.final_input, &self.kernels[fi], grad_logits)?;
        grads[fi] = Some(gk);

        // Decoder records are stored deepest first; walk them shallowest first.
        let mut skip_grads: Vec<Option<Volume<T>>> = (0..cfg.depth).map(|_| None).collect();
        for (rec, level) in tape.decoder.iter().rev().zip(0..cfg.depth) {
            let i = self.dec_index(level);
            g = relu_backward(&rec.b, &g)?;
            let (gi, gk) = conv3d_backward(&rec.a, &self.kernels[i + 2], &g)?;
            grads[i + 2] = Some(gk);
            g = relu_backward(&rec.a, &gi)?;
            let (gi, gk) = conv3d_backward(&rec.cat, &self.kernels[i + 1], &g)?;
            grads[i + 1] = Some(gk);
            let (g_up, g_skip) = gi.split_channels(rec.up_channels)?;
            skip_grads[level] = Some(g_skip.pad_center(rec.skip_extents)?);
            let (gi, gk) = upconv3d_backward(&rec.up_input, &self.kernels[i], &g_up)?;
            grads[i] = Some(gk);
            g = gi;
        }

        let bi = self.bottleneck_index();
        g = dropout_backward(&tape.dropout, &g)?;
        g = relu_backward(&tape.bottleneck_b, &g)?;
        let (gi, gk) = conv3d_backward(&tape.bottleneck_a, &self.kernels[bi + 1], &g)?;
        grads[bi + 1] = Some(gk);
        g = relu_backward(&tape.bottleneck_a, &gi)?;
        let (gi, gk) = conv3d_backward(&tape.bottleneck_input, &self.kernels[bi], &g)?;
        grads[bi] = Some(gk);
        g = gi;

        for level in (0..cfg.depth).rev() {
            let rec = &tape.encoder[level];
            let i = self.enc_index(level);
            let mut gb = maxpool3d_backward(&rec.pool, &g)?;
            let skip = skip_grads[level]
                .take()
                .ok_or_else(|| Error::State(format!("missing skip gradient at level {level}")))?;
            gb.add_scaled(T::one(), &skip)?;
            g = relu_backward(&rec.b, &gb)?;
            let (gi, gk) = conv3d_backward(&rec.a, &self.kernels[i + 1], &g)?;
            grads[i + 1] = Some(gk);
            g = relu_backward(&rec.a, &gi)?;
            let (gi, gk) = conv3d_backward(&rec.input, &self.kernels[i], &g)?;
            grads[i] = Some(gk);
            g = gi;
        }

        let kernels = grads
            .into_iter()
            .enumerate()
            .map(|(i, k)| k.ok_or_else(|| Error::State(format!("no gradient for block {i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { kernels })
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let kernels = self
            .kernels
            .iter()
            .map(|k| ConvKernel {
                out_channels: k.out_channels,
                in_channels: k.in_channels,
                k: k.k,
                weights: k.weights.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                bias: k.bias.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            })
            .collect();
        let mut config = self.config.clone();
        config.dtype = U::DTYPE;
        Model {
            config,
            layers: self.layers.clone(),
            kernels,
            id: next_id(),
            generation: 0,
        }
    }
}
