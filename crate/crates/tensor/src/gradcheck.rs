//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub eps: f64,
    /// Coordinates probed per tensor; tensors at or below this size are probed fully.
    pub samples_per_tensor: usize,
    /// Lower bound on the relative-error denominator, so vanishing gradients
    /// are judged on absolute error.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            samples_per_tensor: 200,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per parameter tensor, in argument order.
    pub per_tensor: Vec<f64>,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` gradients against central differences of `value`.
pub fn compare_gradients(
    value: impl Fn(&[Tensor<f64>]) -> Result<f64>,
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    assert_eq!(params.len(), analytic.len(), "one gradient per parameter");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut per_tensor = Vec::with_capacity(params.len());
    let mut coordinates = 0;
    for (pi, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.shape(), params[pi].shape(), "gradient shape");
        let n = params[pi].len();
        let picks: Vec<usize> = if n <= cfg.samples_per_tensor {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, cfg.samples_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst = 0.0f64;
        for i in picks {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + cfg.eps;
            let plus = value(&work)?;
            work[pi].data_mut()[i] = orig - cfg.eps;
            let minus = value(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            worst = worst.max(relative_error(grad.data()[i], numeric, cfg.abs_floor));
            coordinates += 1;
        }
        per_tensor.push(worst);
    }
    Ok(GradCheckReport {
        max_rel_error: per_tensor.iter().copied().fold(0.0, f64::max),
        per_tensor,
        coordinates,
    })
}

/// Checks gradients of a scalar graph function `f(graph, params) -> loss`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let run = |ps: &[Tensor<f64>], keep_grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let value = g.value(loss).data()[0];
        if !keep_grads {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        let grads = vars
            .iter()
            .zip(ps)
            .map(|(v, p)| g.grad_tensor(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((value, grads))
    };
    let (_, analytic) = run(params, true)?;
    compare_gradients(|ps| run(ps, false).map(|r| r.0), params, &analytic, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn quadratic_is_exact() {
        let p = vec_t(&[0.3, -1.2, 2.5, 4.0]);
        let report = grad_check(
            |g, v| {
                let sq = g.square(v[0])?;
                g.sum(sq)
            },
            &[p],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-9, "{report:?}");
    }

    #[test]
    fn sigmoid_sum_is_tight() {
        let p = vec_t(&[0.3, -1.2, 2.5, 4.0, -3.3]);
        let report = grad_check(
            |g, v| {
                let s = g.sigmoid(v[0])?;
                g.sum(s)
            },
            &[p],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-7, "{report:?}");
    }

    #[test]
    fn wrong_backward_is_caught() {
        // value = sum(x^2), but the "analytic" gradient claims x instead of 2x.
        let p = vec_t(&[0.5, -1.0, 2.0]);
        let wrong = p.clone();
        let report = compare_gradients(
            |ps| Ok(ps[0].data().iter().map(|v| v * v).sum()),
            &[p],
            &[wrong],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error > 1e-2);
        assert!(!report.passes(1e-4));
    }
}
