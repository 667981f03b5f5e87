use super::{Element, Tensor};
use crate::error::{Error, Result};

/// The closed primitive set. Every differentiable computation in the crate is
/// a composition of these.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `[m,k] · [k,n] -> [m,n]`
    MatMul,
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    /// Numpy-style broadcast to the given shape (trailing dimensions aligned).
    Broadcast(Vec<usize>),
    Silu,
    /// Mean of all elements, shape `[1]`.
    Mean,
    /// Sum of all elements, shape `[1]`.
    Sum,
    /// `Σ (a - b)²`, shape `[1]`.
    SquaredError,
    /// Concatenation along an axis.
    Concat(usize),
    /// Sinusoidal embedding of a `[B]` or `[B,1]` timestep vector into
    /// `[B, dim]`: `sin(scale·t·fᵢ)` in the first half, `cos` in the second,
    /// with `fᵢ = 10000^(-i/half)`.
    TimestepEmbedding {
        dim: usize,
        scale: f64,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Broadcast(_) => "broadcast",
            OpKind::Silu => "silu",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::SquaredError => "squared_error",
            OpKind::Concat(_) => "concat",
            OpKind::TimestepEmbedding { .. } => "timestep_embedding",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::SquaredError => Some(2),
            OpKind::Concat(_) => None,
            _ => Some(1),
        }
    }
}

fn shapes_of<E: Element>(inputs: &[&Tensor<E>]) -> String {
    let shapes: Vec<_> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    format!("{shapes:?}")
}

fn sigmoid<E: Element>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

fn embedding_freq(i: usize, half: usize) -> f64 {
    (-(10000f64.ln()) * i as f64 / half as f64).exp()
}

/// Maps each output flat index of a broadcast to the source flat index.
fn broadcast_index_map(src: &[usize], dst: &[usize]) -> Option<Vec<usize>> {
    if src.len() > dst.len() {
        return None;
    }
    let offset = dst.len() - src.len();
    for (i, &d) in src.iter().enumerate() {
        if d != 1 && d != dst[offset + i] {
            return None;
        }
    }
    // Source strides expressed in destination coordinates; 0 on broadcast axes.
    let mut src_strides = vec![0usize; dst.len()];
    let mut stride = 1;
    for i in (0..src.len()).rev() {
        if src[i] != 1 {
            src_strides[offset + i] = stride;
        }
        stride *= src[i];
    }
    let numel: usize = dst.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; dst.len()];
    for _ in 0..numel {
        map.push(idx.iter().zip(&src_strides).map(|(a, b)| a * b).sum());
        for ax in (0..dst.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < dst[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Some(map)
}

/// Evaluates one primitive.
pub fn forward_primitive<E: Element>(op: &OpKind, inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
    if let Some(n) = op.arity() {
        if inputs.len() != n {
            return Err(Error::shape(
                op.name(),
                format!("expected {n} inputs, got {}", inputs.len()),
            ));
        }
    }
    let mismatch = || Error::shape(op.name(), shapes_of(inputs));
    match op {
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(mismatch());
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![E::zero(); m * n];
            E::gemm(m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1), &mut out);
            Tensor::new(vec![m, n], out)
        }
        OpKind::Add => inputs[0].zip_map(inputs[1], "add", |a, b| a + b),
        OpKind::Sub => inputs[0].zip_map(inputs[1], "sub", |a, b| a - b),
        OpKind::Mul => inputs[0].zip_map(inputs[1], "mul", |a, b| a * b),
        OpKind::Broadcast(target) => {
            let x = inputs[0];
            let map = broadcast_index_map(x.shape(), target)
                .ok_or_else(|| Error::shape("broadcast", format!("{:?} -> {target:?}", x.shape())))?;
            let data = map.iter().map(|&i| x.data()[i]).collect();
            Tensor::new(target.clone(), data)
        }
        OpKind::Silu => Ok(inputs[0].map(|x| x * sigmoid(x))),
        OpKind::Mean => {
            let x = inputs[0];
            let s: E = x.data().iter().copied().sum();
            Ok(Tensor::scalar(s / E::lit(x.numel() as f64)))
        }
        OpKind::Sum => Ok(Tensor::scalar(inputs[0].data().iter().copied().sum())),
        OpKind::SquaredError => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(mismatch());
            }
            let s = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
            Ok(Tensor::scalar(s))
        }
        OpKind::Concat(axis) => {
            let first = inputs.first().ok_or_else(mismatch)?;
            let rank = first.shape().len();
            if *axis >= rank {
                return Err(mismatch());
            }
            for t in inputs {
                if t.shape().len() != rank
                    || t.shape()
                        .iter()
                        .zip(first.shape())
                        .enumerate()
                        .any(|(i, (a, b))| i != *axis && a != b)
                {
                    return Err(mismatch());
                }
            }
            let outer: usize = first.shape()[..*axis].iter().product();
            let inner: usize = first.shape()[axis + 1..].iter().product();
            let mut shape = first.shape().to_vec();
            shape[*axis] = inputs.iter().map(|t| t.shape()[*axis]).sum();
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for t in inputs {
                    let chunk = t.shape()[*axis] * inner;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(shape, data)
        }
        OpKind::TimestepEmbedding { dim, scale } => {
            let t = inputs[0];
            let batch = t.shape()[0];
            if dim % 2 != 0 || *dim == 0 || t.numel() != batch {
                return Err(mismatch());
            }
            let half = dim / 2;
            let mut data = vec![E::zero(); batch * dim];
            for b in 0..batch {
                let tv = t.data()[b].as_f64();
                for i in 0..half {
                    let phase = scale * tv * embedding_freq(i, half);
                    data[b * dim + i] = E::lit(phase.sin());
                    data[b * dim + half + i] = E::lit(phase.cos());
                }
            }
            Tensor::new(vec![batch, *dim], data)
        }
    }
}

/// Gradients of one primitive with respect to each of its inputs, given the
/// gradient flowing into its output.
pub fn backward_primitive<E: Element>(
    op: &OpKind,
    inputs: &[&Tensor<E>],
    grad_out: &Tensor<E>,
) -> Result<Vec<Tensor<E>>> {
    match op {
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            // dA = G · Bᵀ, dB = Aᵀ · G via strided views.
            let mut ga = vec![E::zero(); m * k];
            E::gemm(
                m,
                n,
                k,
                grad_out.data(),
                (n as isize, 1),
                b.data(),
                (1, n as isize),
                &mut ga,
            );
            let mut gb = vec![E::zero(); k * n];
            E::gemm(
                k,
                m,
                n,
                a.data(),
                (1, k as isize),
                grad_out.data(),
                (n as isize, 1),
                &mut gb,
            );
            Ok(vec![Tensor::new(vec![m, k], ga)?, Tensor::new(vec![k, n], gb)?])
        }
        OpKind::Add => Ok(vec![grad_out.clone(), grad_out.clone()]),
        OpKind::Sub => Ok(vec![grad_out.clone(), grad_out.map(|g| -g)]),
        OpKind::Mul => Ok(vec![
            grad_out.zip_map(inputs[1], "mul", |g, b| g * b)?,
            grad_out.zip_map(inputs[0], "mul", |g, a| g * a)?,
        ]),
        OpKind::Broadcast(target) => {
            let x = inputs[0];
            let map = broadcast_index_map(x.shape(), target)
                .ok_or_else(|| Error::shape("broadcast", "backward on invalid broadcast"))?;
            let mut g = vec![E::zero(); x.numel()];
            for (o, &i) in map.iter().enumerate() {
                g[i] = g[i] + grad_out.data()[o];
            }
            Ok(vec![Tensor::new(x.shape().to_vec(), g)?])
        }
        OpKind::Silu => Ok(vec![grad_out.zip_map(inputs[0], "silu", |g, x| {
            let s = sigmoid(x);
            g * s * (E::one() + x * (E::one() - s))
        })?]),
        OpKind::Mean => {
            let x = inputs[0];
            let g = grad_out.item() / E::lit(x.numel() as f64);
            Ok(vec![Tensor::full(x.shape(), g)])
        }
        OpKind::Sum => Ok(vec![Tensor::full(inputs[0].shape(), grad_out.item())]),
        OpKind::SquaredError => {
            let g = grad_out.item();
            let two = E::lit(2.0);
            let da = inputs[0].zip_map(inputs[1], "squared_error", |a, b| two * (a - b) * g)?;
            let db = da.map(|v| -v);
            Ok(vec![da, db])
        }
        OpKind::Concat(axis) => {
            let outer: usize = inputs[0].shape()[..*axis].iter().product();
            let inner: usize = inputs[0].shape()[axis + 1..].iter().product();
            let total = grad_out.shape()[*axis] * inner;
            let mut grads = Vec::with_capacity(inputs.len());
            let mut start = 0;
            for t in inputs {
                let chunk = t.shape()[*axis] * inner;
                let mut g = Vec::with_capacity(t.numel());
                for o in 0..outer {
                    let base = o * total + start;
                    g.extend_from_slice(&grad_out.data()[base..base + chunk]);
                }
                grads.push(Tensor::new(t.shape().to_vec(), g)?);
                start += chunk;
            }
            Ok(grads)
        }
        OpKind::TimestepEmbedding { dim, scale } => {
            let t = inputs[0];
            let batch = t.shape()[0];
            let half = dim / 2;
            let mut g = vec![E::zero(); t.numel()];
            for (b, gb) in g.iter_mut().enumerate().take(batch) {
                let tv = t.data()[b].as_f64();
                let mut acc = 0.0;
                for i in 0..half {
                    let w = scale * embedding_freq(i, half);
                    let phase = w * tv;
                    acc += grad_out.data()[b * dim + i].as_f64() * w * phase.cos();
                    acc -= grad_out.data()[b * dim + half + i].as_f64() * w * phase.sin();
                }
                *gb = E::lit(acc);
            }
            Ok(vec![Tensor::new(t.shape().to_vec(), g)?])
        }
    }
}
