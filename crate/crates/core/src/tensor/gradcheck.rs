use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Element, Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Options for [`finite_difference_check`].
#[derive(Clone, Debug)]
pub struct FdOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many coordinates per parameter tensor (chosen with
    /// `seed`); `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

fn evaluate<E, F>(f: &F, params: &[Tensor<E>]) -> Result<f64>
where
    E: Element,
    F: Fn(&mut Graph<E>, &[NodeId]) -> Result<NodeId>,
{
    use super::Exec;
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| graph.param(p.clone())).collect();
    let loss = f(&mut graph, &ids)?;
    let value = graph.value(&loss);
    if value.numel() != 1 {
        return Err(Error::Contract(format!(
            "function must return a scalar, got {:?}",
            value.shape()
        )));
    }
    let v = value.item().as_f64();
    if !v.is_finite() {
        return Err(Error::Numerical("function value is not finite".into()));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of `f` with central finite differences.
///
/// `f` receives a fresh record with `params` registered as parameters and
/// must return the scalar loss node. Returns the maximum over checked
/// coordinates of `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn finite_difference_check<E, F>(f: F, params: &[Tensor<E>], opts: &FdOptions) -> Result<f64>
where
    E: Element,
    F: Fn(&mut Graph<E>, &[NodeId]) -> Result<NodeId>,
{
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numerical("parameters are not finite".into()));
    }
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| graph.param(p.clone())).collect();
    let loss = f(&mut graph, &ids)?;
    {
        use super::Exec;
        if !graph.value(&loss).item().as_f64().is_finite() {
            return Err(Error::Numerical("function value is not finite".into()));
        }
    }
    let grads = graph.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    let mut perturbed: Vec<Tensor<E>> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads.get(ids[pi]).expect("parameter gradient");
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < param.numel() => sample(&mut rng, param.numel(), k).into_vec(),
            _ => (0..param.numel()).collect(),
        };
        for c in coords {
            let orig = param.data()[c];
            perturbed[pi].data_mut()[c] = orig + E::lit(opts.step);
            let plus = evaluate(&f, &perturbed)?;
            perturbed[pi].data_mut()[c] = orig - E::lit(opts.step);
            let minus = evaluate(&f, &perturbed)?;
            perturbed[pi].data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[c].as_f64();
            let rel = (a - numeric).abs() / (numeric.abs() + 1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Exec;

    #[test]
    fn square_at_three() {
        let w = Tensor::<f64>::full(&[1], 3.0);
        let err = finite_difference_check(|g, p| g.mul(&p[0], &p[0]), &[w], &FdOptions::default()).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let w = Tensor::<f64>::full(&[2], 1.0);
        let err =
            finite_difference_check(|g, _| Ok(g.constant(Tensor::scalar(4.0))), &[w], &FdOptions::default()).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let w = Tensor::<f64>::full(&[1], 1.0);
        let res = finite_difference_check(
            |g, p| {
                let inf = g.constant(Tensor::scalar(f64::INFINITY));
                g.mul(&p[0], &inf)
            },
            &[w],
            &FdOptions::default(),
        );
        assert!(matches!(res, Err(Error::Numerical(_))));
    }
}
