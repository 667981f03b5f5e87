use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::NoiseSchedule;
use crate::error::{Error, Result};
use crate::lora::{lora_apply, LoraParams};
use crate::tensor::{Eager, Element, Exec, Tensor};
use crate::world::{PromptSpec, PROMPT_TOKENS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    /// Number of fully connected layers (≥ 2).
    pub layers: usize,
    /// Multiplier applied to `t ∈ [0, 1]` before the sinusoidal embedding.
    pub time_scale: f64,
    /// The schedule the weights are trained for; fixes the input/output
    /// scaling around the network.
    pub schedule: NoiseSchedule,
    /// Per-pixel standard deviation assumed for clean model-space images.
    pub sigma_data: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            hidden: 256,
            layers: 3,
            time_scale: 1000.0,
            schedule: NoiseSchedule::flow(),
            sigma_data: 0.1,
        }
    }
}

impl DenoiserConfig {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// `(d_in, d_out)` of every fully connected layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let d = self.pixels();
        let mut dims = vec![(d, self.hidden)];
        dims.extend(std::iter::repeat_n(
            (self.hidden, self.hidden),
            self.layers.saturating_sub(2),
        ));
        dims.push((self.hidden, d));
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 || self.hidden == 0 || !self.hidden.is_multiple_of(2) {
            return Err(Error::Contract(format!(
                "denoiser needs ≥2 layers and an even hidden width: {self:?}"
            )));
        }
        if !(self.sigma_data > 0.0 && self.sigma_data.is_finite()) {
            return Err(Error::Contract(format!(
                "sigma_data must be positive, got {}",
                self.sigma_data
            )));
        }
        self.schedule.validate()?;
        crate::world::ImageBuffer::filled(self.height, self.width, 0.0)?;
        Ok(())
    }
}

/// One fully connected layer, `y = x·W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Denoiser weights: fully connected layers plus the prompt-token table.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub layers: Vec<Linear>,
    /// `[PROMPT_TOKENS, hidden]`, added to the first hidden pre-activation.
    pub token_embedding: Tensor,
}

impl DenoiserParams {
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = config.layer_dims();
        let last = dims.len() - 1;
        let layers = dims
            .iter()
            .enumerate()
            .map(|(i, &(din, dout))| {
                let gain = if i == last { 0.5 } else { 1.0 };
                Linear {
                    weight: Tensor::randn(&[din, dout], gain / (din as f64).sqrt(), &mut rng),
                    bias: Tensor::zeros(&[dout]),
                }
            })
            .collect();
        let token_embedding = Tensor::randn(&[PROMPT_TOKENS, config.hidden], 0.5, &mut rng);
        Ok(Self {
            config,
            layers,
            token_embedding,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.numel() + l.bias.numel())
            .sum::<usize>()
            + self.token_embedding.numel()
    }

    /// All tensors in a fixed order (for optimizers and serialization).
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.weight"), &l.weight));
            out.push((format!("layers.{i}.bias"), &l.bias));
        }
        out.push(("token_embedding".into(), &self.token_embedding));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.token_embedding);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Largest absolute difference over all tensors.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f32> {
        let a = self.tensors();
        let b = other.tensors();
        if a.len() != b.len() {
            return Err(Error::shape("max_abs_diff", "different layer counts"));
        }
        let mut worst = 0.0f32;
        for ((_, x), (_, y)) in a.iter().zip(&b) {
            worst = worst.max(x.max_abs_diff(y)?);
        }
        Ok(worst)
    }
}

/// Prompt/timestep conditioning for a batch, plus the per-row scaling
/// coefficients (`[B, 1]` each) derived from the timesteps.
pub struct Conditioning<E: Element> {
    pub one_hot: Tensor<E>,
    pub times: Tensor<E>,
    pub c_in: Tensor<E>,
    pub c_skip: Tensor<E>,
    pub c_out: Tensor<E>,
}

impl<E: Element> Conditioning<E> {
    pub fn new(config: &DenoiserConfig, prompts: &[PromptSpec], times: &[f32]) -> Result<Self> {
        if prompts.len() != times.len() || prompts.is_empty() {
            return Err(Error::shape(
                "conditioning",
                format!("{} prompts vs {} times", prompts.len(), times.len()),
            ));
        }
        let mut one_hot = Tensor::zeros(&[prompts.len(), PROMPT_TOKENS]);
        for (b, p) in prompts.iter().enumerate() {
            for id in p.token_ids() {
                one_hot.data_mut()[b * PROMPT_TOKENS + id] = E::one();
            }
        }
        let b = times.len();
        let (mut c_in, mut c_skip, mut c_out) = (Vec::with_capacity(b), Vec::with_capacity(b), Vec::with_capacity(b));
        for &tm in times {
            let t = config.schedule.from_model_time(tm);
            let (i, s, o) = config.schedule.preconditioning(t, config.sigma_data)?;
            c_in.push(E::lit(i));
            c_skip.push(E::lit(s));
            c_out.push(E::lit(o));
        }
        Ok(Self {
            one_hot,
            times: Tensor::from_fn(&[b], |i| E::lit(times[i] as f64)),
            c_in: Tensor::new(vec![b, 1], c_in)?,
            c_skip: Tensor::new(vec![b, 1], c_skip)?,
            c_out: Tensor::new(vec![b, 1], c_out)?,
        })
    }
}

/// Per-layer handles used by [`forward`]. `lora` holds `(A, B)` with
/// `A: [r, d_out]`, `B: [d_in, r]`.
pub struct LayerVars<V> {
    pub weight: V,
    pub bias: V,
    pub lora: Option<(V, V)>,
}

pub struct WeightVars<V> {
    pub layers: Vec<LayerVars<V>>,
    pub token_embedding: V,
}

/// Registers denoiser weights as constants of `ex`.
pub fn constant_vars<E: Element, X: Exec<E>>(ex: &mut X, params: &DenoiserParams) -> WeightVars<X::Var> {
    WeightVars {
        layers: params
            .layers
            .iter()
            .map(|l| LayerVars {
                weight: ex.constant(l.weight.cast()),
                bias: ex.constant(l.bias.cast()),
                lora: None,
            })
            .collect(),
        token_embedding: ex.constant(params.token_embedding.cast()),
    }
}

/// The denoiser forward pass, `x: [B, H·W] -> [B, H·W]`.
///
/// Computes `c_skip·x + c_out·F(c_in·x)` where `F` is the MLP. Layer 0 adds the prompt-token embedding and the sinusoidal timestep
/// embedding to its pre-activation; hidden layers use SiLU; the last layer
/// is linear. Every layer computes `x·W + (x·B)·A + b` when a LoRA pair is
/// attached, which equals `x·(W + B·A) + b`.
pub fn forward<E: Element, X: Exec<E>>(
    ex: &mut X,
    config: &DenoiserConfig,
    weights: &WeightVars<X::Var>,
    cond: &Conditioning<E>,
    x: &X::Var,
) -> Result<X::Var> {
    let batch = ex.value(x).rows();
    let dim = ex.value(x).cols();
    let n_layers = weights.layers.len();
    let scale = |ex: &mut X, c: &Tensor<E>, v: &X::Var| -> Result<X::Var> {
        let c = ex.constant(c.clone());
        let c = ex.broadcast(&c, &[batch, dim])?;
        ex.mul(v, &c)
    };
    let mut h = scale(ex, &cond.c_in, x)?;
    for (i, layer) in weights.layers.iter().enumerate() {
        let mut z = ex.matmul(&h, &layer.weight)?;
        if let Some((a, b)) = &layer.lora {
            let xb = ex.matmul(&h, b)?;
            let delta = ex.matmul(&xb, a)?;
            z = ex.add(&z, &delta)?;
        }
        let out_dim = ex.value(&z).cols();
        let bias = ex.broadcast(&layer.bias, &[batch, out_dim])?;
        z = ex.add(&z, &bias)?;
        if i == 0 {
            let one_hot = ex.constant(cond.one_hot.clone());
            let tokens = ex.matmul(&one_hot, &weights.token_embedding)?;
            z = ex.add(&z, &tokens)?;
            let times = ex.constant(cond.times.clone());
            let temb = ex.timestep_embedding(&times, out_dim, config.time_scale)?;
            z = ex.add(&z, &temb)?;
        }
        h = if i + 1 < n_layers { ex.silu(&z)? } else { z };
    }
    let skip = scale(ex, &cond.c_skip, x)?;
    let residual = scale(ex, &cond.c_out, &h)?;
    ex.add(&skip, &residual)
}

/// Anything that can predict the network output for one image state.
pub trait NoisePredictor: Sync {
    /// `state` is an `[H, W]` model-space tensor; returns the same shape.
    fn predict(&self, prompt: &PromptSpec, t: f32, state: &Tensor) -> Result<Tensor>;
}

/// Eager f32 inference over materialized weights.
pub struct Denoiser {
    config: DenoiserConfig,
    weights: WeightVars<Arc<Tensor>>,
}

impl Denoiser {
    pub fn new(params: &DenoiserParams) -> Self {
        Self {
            config: params.config,
            weights: constant_vars::<f32, _>(&mut Eager, params),
        }
    }

    /// Materializes `θ ⊕ φ` once so each prediction costs the same as the
    /// base model.
    pub fn with_lora(params: &DenoiserParams, lora: Option<&LoraParams>) -> Result<Self> {
        Ok(match lora {
            None => Self::new(params),
            Some(l) => Self::new(&lora_apply(params, l)?),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Batched prediction for `[B, H·W]` states.
    pub fn predict_batch(&self, prompts: &[PromptSpec], times: &[f32], x: &Tensor) -> Result<Tensor> {
        let cfg = self.config;
        if x.shape() != [prompts.len(), cfg.pixels()] {
            return Err(Error::shape(
                "denoise_predict",
                format!("expected [{}, {}], got {:?}", prompts.len(), cfg.pixels(), x.shape()),
            ));
        }
        let mut ex = Eager;
        let cond = Conditioning::new(&cfg, prompts, times)?;
        let xv = Exec::<f32>::constant(&mut ex, x.clone());
        let out = forward(&mut ex, &cfg, &self.weights, &cond, &xv)?;
        Ok(Arc::try_unwrap(out).unwrap_or_else(|rc| (*rc).clone()))
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, prompt: &PromptSpec, t: f32, state: &Tensor) -> Result<Tensor> {
        let cfg = self.config;
        if state.shape() != [cfg.height, cfg.width] {
            return Err(Error::shape(
                "denoise_predict",
                format!("expected [{}, {}], got {:?}", cfg.height, cfg.width, state.shape()),
            ));
        }
        let flat = state.reshape(&[1, cfg.pixels()])?;
        self.predict_batch(&[*prompt], &[t], &flat)?
            .reshape(&[cfg.height, cfg.width])
    }
}

/// Wraps a predictor and counts evaluations.
pub struct CountingPredictor<P> {
    pub inner: P,
    count: AtomicUsize,
}

impl<P: NoisePredictor> CountingPredictor<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            count: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.count.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.count.store(0, Ordering::SeqCst);
    }
}

impl<P: NoisePredictor> NoisePredictor for CountingPredictor<P> {
    fn predict(&self, prompt: &PromptSpec, t: f32, state: &Tensor) -> Result<Tensor> {
        self.count.fetch_add(1, Ordering::SeqCst);
        self.inner.predict(prompt, t, state)
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn predict(&self, prompt: &PromptSpec, t: f32, state: &Tensor) -> Result<Tensor> {
        (**self).predict(prompt, t, state)
    }
}

/// One prediction with optional LoRA: `ε̂_{θ⊕φ}(P, t, h_t)`.
pub fn denoise_predict(
    params: &DenoiserParams,
    lora: Option<&LoraParams>,
    prompt: &PromptSpec,
    t: f32,
    h_t: &Tensor,
) -> Result<Tensor> {
    Denoiser::with_lora(params, lora)?.predict(prompt, t, h_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Background, Brightness, Detail, Shape};

    fn prompt() -> PromptSpec {
        PromptSpec::new(Shape::Disk, Brightness::Bright, Background::Dark, Detail::None)
    }

    #[test]
    fn default_config_has_three_layers_under_budget() {
        let p = DenoiserParams::init(DenoiserConfig::default(), 0).unwrap();
        assert_eq!(p.layers.len(), 3);
        assert!(p.parameter_count() <= 200_000, "{}", p.parameter_count());
        let dims = p.config.layer_dims();
        for w in dims.windows(2) {
            assert_eq!(w[0].1, w[1].0);
        }
    }

    #[test]
    fn prediction_shape_and_determinism() {
        let p = DenoiserParams::init(DenoiserConfig::default(), 1).unwrap();
        let d = Denoiser::new(&p);
        let x = Tensor::full(&[16, 16], 0.1);
        let a = d.predict(&prompt(), 0.3, &x).unwrap();
        let b = d.predict(&prompt(), 0.3, &x).unwrap();
        assert_eq!(a.shape(), &[16, 16]);
        assert_eq!(a, b);
        assert!(d.predict(&prompt(), 0.3, &Tensor::zeros(&[8, 8])).is_err());
    }

    #[test]
    fn prompt_and_time_change_the_output() {
        let p = DenoiserParams::init(DenoiserConfig::default(), 2).unwrap();
        let d = Denoiser::new(&p);
        let x = Tensor::zeros(&[16, 16]);
        let base = d.predict(&prompt(), 0.5, &x).unwrap();
        assert_ne!(base, d.predict(&prompt().with_detail(Detail::Halo), 0.5, &x).unwrap());
        assert_ne!(base, d.predict(&prompt(), 0.6, &x).unwrap());
    }

    #[test]
    fn counting_predictor_counts() {
        let p = DenoiserParams::init(DenoiserConfig::default(), 3).unwrap();
        let c = CountingPredictor::new(Denoiser::new(&p));
        let x = Tensor::zeros(&[16, 16]);
        for _ in 0..3 {
            c.predict(&prompt(), 0.1, &x).unwrap();
        }
        assert_eq!(c.count(), 3);
    }
}
