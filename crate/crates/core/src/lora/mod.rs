//! Low-rank adapters over the denoiser's fully connected layers and the exact
//! algebra used to apply, merge and fuse them.
//!
//! Layer `i` has weight `Wᵢ: [d_in, d_out]`; an adapter stores
//! `Bᵢ: [d_in, r]` and `Aᵢ: [r, d_out]` and contributes `Bᵢ·Aᵢ`.

mod io;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};

use crate::diffusion::DenoiserParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{WeightFile, WEIGHT_MAGIC};

/// Standard deviation of the Gaussian used for fresh `A` factors.
pub const LORA_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer {
    /// `[r, d_out]`
    pub a: Tensor,
    /// `[d_in, r]`
    pub b: Tensor,
}

impl LoraLayer {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// `(d_in, d_out)` of the layer this adapter targets.
    pub fn dims(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    /// The dense update `B·A`.
    pub fn delta(&self) -> Result<Tensor> {
        self.b.matmul(&self.a)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraParams {
    pub rank: usize,
    pub layers: Vec<LoraLayer>,
    /// Free-form provenance: source pair, iteration, seed, merge details.
    pub meta: Map<String, Value>,
}

impl LoraParams {
    pub fn dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(LoraLayer::dims).collect()
    }

    /// Dense per-layer updates `Bᵢ·Aᵢ`.
    pub fn deltas(&self) -> Result<Vec<Tensor>> {
        self.layers.iter().map(LoraLayer::delta).collect()
    }

    /// Frobenius norm of the full update, `sqrt(Σᵢ ‖BᵢAᵢ‖²)`.
    pub fn update_norm(&self) -> Result<f64> {
        let mut acc = 0.0f64;
        for d in self.deltas()? {
            acc += d.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        }
        Ok(acc.sqrt())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.a.is_finite() && l.b.is_finite())
    }

    /// Same factors with every `A` multiplied by `s`, so the update scales by `s`.
    pub fn scaled(&self, s: f32) -> Self {
        let mut out = self.clone();
        for l in &mut out.layers {
            l.a = l.a.scale(s);
        }
        out
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }
}

/// Fresh adapter: `A ~ N(0, 0.02²)` seeded, `B = 0`, so `θ ⊕ φ == θ`.
pub fn lora_init(model_dims: &[(usize, usize)], rank: usize, seed: u64) -> Result<LoraParams> {
    if rank == 0 {
        return Err(Error::Contract("lora rank must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(model_dims.len());
    for (i, &(d_in, d_out)) in model_dims.iter().enumerate() {
        if rank > d_in.min(d_out) {
            return Err(Error::Contract(format!(
                "rank {rank} exceeds min({d_in}, {d_out}) on layer {i}"
            )));
        }
        layers.push(LoraLayer {
            a: Tensor::randn(&[rank, d_out], LORA_INIT_STD, &mut rng),
            b: Tensor::zeros(&[d_in, rank]),
        });
    }
    let mut meta = Map::new();
    meta.insert("seed".into(), seed.into());
    Ok(LoraParams { rank, layers, meta })
}

fn check_targets(params: &DenoiserParams, lora: &LoraParams) -> Result<()> {
    if params.layers.len() != lora.layers.len() {
        return Err(Error::shape(
            "lora_apply",
            format!(
                "model has {} layers, lora has {}",
                params.layers.len(),
                lora.layers.len()
            ),
        ));
    }
    for (i, (w, l)) in params.layers.iter().zip(&lora.layers).enumerate() {
        let (d_in, d_out) = l.dims();
        if w.weight.shape() != [d_in, d_out] || l.b.cols() != l.a.rows() {
            return Err(Error::shape(
                "lora_apply",
                format!(
                    "layer {i}: weight {:?} vs B {:?} · A {:?}",
                    w.weight.shape(),
                    l.b.shape(),
                    l.a.shape()
                ),
            ));
        }
    }
    Ok(())
}

/// `θ ⊕ φ = {Wᵢ + BᵢAᵢ}`; `θ` is not mutated.
pub fn lora_apply(params: &DenoiserParams, lora: &LoraParams) -> Result<DenoiserParams> {
    check_targets(params, lora)?;
    let mut out = params.clone();
    for (layer, l) in out.layers.iter_mut().zip(&lora.layers) {
        let delta = l.delta()?;
        layer.weight = layer.weight.zip_map(&delta, "lora_apply", |w, d| w + d)?;
    }
    Ok(out)
}

/// `{Wᵢ + α·BᵢAᵢ}`. `α = 0` returns `θ` unchanged bit-for-bit.
pub fn lora_fuse(params: &DenoiserParams, lora: &LoraParams, alpha: f32) -> Result<DenoiserParams> {
    if !alpha.is_finite() {
        return Err(Error::Contract(format!("fusion weight {alpha} is not finite")));
    }
    check_targets(params, lora)?;
    if alpha == 0.0 {
        return Ok(params.clone());
    }
    let mut out = params.clone();
    for (layer, l) in out.layers.iter_mut().zip(&lora.layers) {
        let delta = l.delta()?;
        layer.weight = layer.weight.zip_map(&delta, "lora_fuse", |w, d| w + alpha * d)?;
    }
    Ok(out)
}

/// Block merge: `B = [B¹ | B² | …]`, `A = [s·A¹; s·A²; …]`, so the merged
/// update is `s·Σⱼ BʲAʲ`. Ranks may differ; the result has their sum.
pub fn lora_concat_scale(loras: &[&LoraParams], scale: f32) -> Result<LoraParams> {
    let Some(first) = loras.first() else {
        return Err(Error::Contract("nothing to concatenate".into()));
    };
    let dims = first.dims();
    for (j, l) in loras.iter().enumerate().skip(1) {
        if l.dims() != dims {
            return Err(Error::shape(
                "lora_concat_scale",
                format!("lora {j} targets {:?}, expected {:?}", l.dims(), dims),
            ));
        }
    }
    let mut layers = Vec::with_capacity(dims.len());
    for i in 0..dims.len() {
        let bs: Vec<&Tensor> = loras.iter().map(|l| &l.layers[i].b).collect();
        let scaled: Vec<Tensor> = loras.iter().map(|l| l.layers[i].a.scale(scale)).collect();
        let as_: Vec<&Tensor> = scaled.iter().collect();
        layers.push(LoraLayer {
            b: concat(&bs, 1)?,
            a: concat(&as_, 0)?,
        });
    }
    let rank = loras.iter().map(|l| l.rank).sum();
    let mut meta = Map::new();
    meta.insert("merged_from".into(), loras.len().into());
    meta.insert("scale".into(), (scale as f64).into());
    Ok(LoraParams { rank, layers, meta })
}

fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    crate::tensor::forward_primitive(&crate::tensor::OpKind::Concat(axis), parts)
}
