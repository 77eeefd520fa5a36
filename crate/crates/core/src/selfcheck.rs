//! Finite-difference gradient suite over every differentiable op and a tiny
//! full model, in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use windcast_tensor::{grad_check, ConvSpec, GradCheckConfig, Graph, Tensor, TensorError, Var};

use crate::abed::{build_model, rssab_forward, AbedConfig, Mode, RssabVars, BN_EPS};
use crate::error::{Error, Result};
use crate::trainer::masked_mse_graph;

pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

type Loss = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> windcast_tensor::Result<Var>>;

struct Case {
    name: &'static str,
    params: Vec<Tensor<f64>>,
    loss: Loss,
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, for ops with a kink there.
fn off_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(y * R)` for a fixed random `R`, so every output element matters.
fn readout(g: &mut Graph<f64>, y: Var, seed: u64) -> windcast_tensor::Result<Var> {
    let r = rand_t(&g.shape(y).to_vec(), seed);
    let p = g.mul_const(y, r)?;
    g.sum(p)
}

fn to_tensor_error(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::Usage(other.to_string()),
    }
}

fn case(name: &'static str, params: Vec<Tensor<f64>>, loss: impl Fn(&mut Graph<f64>, &[Var]) -> windcast_tensor::Result<Var> + 'static) -> Case {
    Case {
        name,
        params,
        loss: Box::new(loss),
    }
}

fn op_cases() -> Vec<Case> {
    let x5 = [2, 3, 4, 5, 5];
    vec![
        case("conv3d", vec![rand_t(&x5, 1), rand_t(&[4, 3, 3, 3, 3], 2), rand_t(&[4], 3)], |g, v| {
            let y = g.conv3d(v[0], v[1], Some(v[2]), ConvSpec::same([3, 3, 3]))?;
            readout(g, y, 10)
        }),
        case("conv3d_strided", vec![rand_t(&x5, 4), rand_t(&[2, 3, 1, 3, 3], 5)], |g, v| {
            let y = g.conv3d(v[0], v[1], None, ConvSpec::same([1, 3, 3]).with_stride([1, 2, 2]))?;
            readout(g, y, 11)
        }),
        case("batchnorm_train", vec![rand_t(&x5, 6), off_zero(&[3], 7), rand_t(&[3], 8)], |g, v| {
            let (y, _) = g.batchnorm_train(v[0], v[1], v[2], BN_EPS)?;
            readout(g, y, 12)
        }),
        case("batchnorm_infer", vec![rand_t(&x5, 9), off_zero(&[3], 10), rand_t(&[3], 11)], |g, v| {
            let y = g.batchnorm_infer(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], BN_EPS)?;
            readout(g, y, 13)
        }),
        case("sigmoid", vec![rand_t(&x5, 12)], |g, v| {
            let y = g.sigmoid(v[0])?;
            readout(g, y, 14)
        }),
        case("relu", vec![off_zero(&x5, 13)], |g, v| {
            let y = g.relu(v[0])?;
            readout(g, y, 15)
        }),
        case("add_broadcast", vec![rand_t(&x5, 14), rand_t(&[1, 3, 1, 1, 1], 15)], |g, v| {
            let y = g.add(v[0], v[1])?;
            readout(g, y, 16)
        }),
        case("sub_broadcast", vec![rand_t(&x5, 16), rand_t(&[2, 1, 4, 1, 1], 17)], |g, v| {
            let y = g.sub(v[0], v[1])?;
            readout(g, y, 17)
        }),
        case("mul_broadcast", vec![rand_t(&x5, 18), rand_t(&[2, 3, 4, 1, 1], 19), rand_t(&[2, 1, 4, 5, 5], 20)], |g, v| {
            let a = g.mul(v[0], v[1])?;
            let y = g.mul(a, v[2])?;
            readout(g, y, 18)
        }),
        case("square", vec![rand_t(&x5, 21)], |g, v| {
            let y = g.square(v[0])?;
            readout(g, y, 19)
        }),
        case("sum", vec![rand_t(&x5, 22)], |g, v| {
            let y = g.square(v[0])?;
            g.sum(y)
        }),
        case("spatial_mean", vec![rand_t(&x5, 23)], |g, v| {
            let y = g.spatial_mean(v[0])?;
            readout(g, y, 20)
        }),
        case("upsample2x", vec![rand_t(&x5, 24)], |g, v| {
            let y = g.upsample2x_spatial(v[0])?;
            readout(g, y, 21)
        }),
        case("pad_crop", vec![rand_t(&x5, 25)], |g, v| {
            let a = g.pad_crop_spatial(v[0], 3, 8)?;
            readout(g, a, 22)
        }),
        case("masked_mse", vec![rand_t(&[2, 2, 3, 4, 4], 26)], |g, v| {
            let labels = rand_t(&[2, 2, 3, 4, 4], 27);
            let mut rng = ChaCha8Rng::seed_from_u64(28);
            let mask = Tensor::from_fn(&[2, 2, 3, 4, 4], |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
            masked_mse_graph(g, v[0], &labels, &mask).map_err(to_tensor_error)
        }),
    ]
}

fn rssab_case() -> Case {
    let cfg = AbedConfig {
        encoder_channels: vec![4, 8],
        n_rssab: 1,
        ..AbedConfig::default()
    };
    let model = build_model::<f64>(&cfg, 31).expect("valid tiny config");
    let mut params: Vec<Tensor<f64>> = model
        .params
        .iter()
        .filter(|(n, _)| n.starts_with("decoder.rssab0."))
        .map(|(_, t)| t.clone())
        .collect();
    for (i, p) in params.iter_mut().enumerate().filter(|(_, p)| p.ndim() == 1) {
        *p = rand_t(p.shape(), 40 + i as u64);
    }
    let width = cfg.width();
    params.push(rand_t(&[1, width, 4, 5, 5], 32));
    let kernel = cfg.rssab_kernel;
    case("rssab_block", params, move |g, v| {
        let p = RssabVars {
            conv1: (v[0], v[1]),
            conv2: (v[2], v[3]),
            temporal_down: (v[4], v[5]),
            temporal_up: (v[6], v[7]),
            spatial: (v[8], v[9]),
        };
        let mut probes = Vec::new();
        let y = rssab_forward(g, &p, kernel, v[10], 0, &mut probes).map_err(to_tensor_error)?;
        readout(g, y, 33)
    })
}

/// The full model at b=1, t=6 on an 8x8 grid, channels [4, 8], one block.
fn model_case() -> Case {
    let cfg = AbedConfig {
        encoder_channels: vec![4, 8],
        n_rssab: 1,
        ..AbedConfig::default()
    };
    let mut model = build_model::<f64>(&cfg, 51).expect("valid tiny config");
    for (i, (name, p)) in model.params.iter_mut().enumerate() {
        if name.ends_with("bias") || name.ends_with("beta") {
            *p = rand_t(p.shape(), 60 + i as u64).map(|v| 0.1 * v);
        }
    }
    let x = rand_t(&[1, cfg.in_features, 6, 8, 8], 52);
    let labels = rand_t(&[1, 2, 6, 8, 8], 53);
    let mut rng = ChaCha8Rng::seed_from_u64(54);
    let mask = Tensor::from_fn(&[1, 2, 6, 8, 8], |_| if rng.random_bool(0.25) { 1.0 } else { 0.0 });
    let params: Vec<Tensor<f64>> = model.params.iter().map(|(_, t)| t.clone()).collect();
    case("abed_tiny_model", params, move |g, v| {
        let xv = g.constant(x.clone());
        let out = model.forward_graph(g, v, xv, Mode::Train).map_err(to_tensor_error)?;
        masked_mse_graph(g, out.output, &labels, &mask).map_err(to_tensor_error)
    })
}

pub fn case_names() -> Vec<&'static str> {
    let mut v: Vec<&'static str> = op_cases().iter().map(|c| c.name).collect();
    v.extend(["rssab_block", "abed_tiny_model"]);
    v
}

/// Runs every check; `samples_per_tensor` caps the coordinates probed per tensor.
pub fn run(samples_per_tensor: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut cases = op_cases();
    cases.push(rssab_case());
    cases.push(model_case());
    let cfg = GradCheckConfig {
        samples_per_tensor,
        seed,
        ..GradCheckConfig::default()
    };
    cases
        .into_iter()
        .map(|c| {
            let report = grad_check(&c.loss, &c.params, &cfg)?;
            Ok(CheckResult {
                name: c.name.to_string(),
                max_rel_error: report.max_rel_error,
                coordinates: report.coordinates,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let results = run(40, 0).unwrap();
        assert_eq!(results.len(), case_names().len());
        for r in &results {
            assert!(r.passed(), "{r:?}");
            assert!(r.coordinates > 0);
        }
    }
}
