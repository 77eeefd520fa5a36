//! The attention-based encoder-decoder (ABED).
//!
//! ```text
//! x (b,14,t,h,w)
//!   -> batch norm -> stem conv -> [down conv (stride 1,2,2) + relu] per level
//!   -> N x RSSAB
//!   -> [upsample 2x + conv + relu] per level -> centre pad/crop to (h,w)
//!   -> head conv -> (b,2,t,h,w)
//! ```
//!
//! Parameters live in a flat, ordered registry of named tensors whose layout
//! is a pure function of [`AbedConfig`].

use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use windcast_tensor::{BatchStats, ConvSpec, Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AbedConfig {
    pub in_features: usize,
    pub stem_channels: usize,
    /// Channels after each downsampling level; the last is the RSSAB width.
    pub encoder_channels: Vec<usize>,
    pub n_rssab: usize,
    /// `(t, h, w)` kernel used by every non-pointwise convolution.
    pub rssab_kernel: [usize; 3],
    pub attention_reduction: usize,
    pub final_out_channels: usize,
}

impl Default for AbedConfig {
    fn default() -> Self {
        Self {
            in_features: 14,
            stem_channels: 4,
            encoder_channels: vec![8, 16],
            n_rssab: 2,
            rssab_kernel: [3, 3, 3],
            attention_reduction: 4,
            final_out_channels: 2,
        }
    }
}

impl AbedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.in_features == 0 || self.stem_channels == 0 {
            return bad("in_features and stem_channels must be positive".into());
        }
        if self.encoder_channels.is_empty() {
            return bad("encoder_channels must not be empty".into());
        }
        let mut prev = self.stem_channels;
        for &c in &self.encoder_channels {
            if c < prev {
                return bad(format!("encoder_channels must ascend from the stem width, got {:?}", self.encoder_channels));
            }
            prev = c;
        }
        if self.n_rssab == 0 {
            return bad("n_rssab must be at least 1".into());
        }
        if self.rssab_kernel.iter().any(|k| k % 2 == 0) {
            return bad(format!("kernel sizes must be odd, got {:?}", self.rssab_kernel));
        }
        let width = self.width();
        let r = self.attention_reduction;
        if r == 0 || width % r != 0 {
            return bad(format!("attention_reduction {r} must divide the working width {width}"));
        }
        if self.final_out_channels != 2 {
            return bad(format!("final_out_channels must be 2, got {}", self.final_out_channels));
        }
        Ok(())
    }

    /// Decoder working width.
    pub fn width(&self) -> usize {
        *self.encoder_channels.last().expect("validated non-empty")
    }

    fn kernel_volume(&self) -> usize {
        self.rssab_kernel.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    HeUniform,
    Zeros,
    Ones,
}

struct ParamDef {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct RssabIdx {
    conv1: ConvIdx,
    conv2: ConvIdx,
    att_down: ConvIdx,
    att_up: ConvIdx,
    spatial: ConvIdx,
}

#[derive(Debug, Clone)]
struct Layout {
    bn_gamma: usize,
    bn_beta: usize,
    stem: ConvIdx,
    down: Vec<ConvIdx>,
    rssab: Vec<RssabIdx>,
    up: Vec<ConvIdx>,
    head: ConvIdx,
}

struct LayoutBuilder {
    defs: Vec<ParamDef>,
    kernel: [usize; 3],
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.defs.push(ParamDef { name, shape, init });
        self.defs.len() - 1
    }

    fn conv(&mut self, prefix: &str, c_in: usize, c_out: usize, pointwise: bool) -> ConvIdx {
        let k = if pointwise { [1, 1, 1] } else { self.kernel };
        ConvIdx {
            w: self.push(format!("{prefix}.weight"), vec![c_out, c_in, k[0], k[1], k[2]], Init::HeUniform),
            b: self.push(format!("{prefix}.bias"), vec![c_out], Init::Zeros),
        }
    }
}

fn layout(cfg: &AbedConfig) -> (Layout, Vec<ParamDef>) {
    let mut lb = LayoutBuilder {
        defs: Vec::new(),
        kernel: cfg.rssab_kernel,
    };
    let bn_gamma = lb.push("encoder.bn.gamma".into(), vec![cfg.in_features], Init::Ones);
    let bn_beta = lb.push("encoder.bn.beta".into(), vec![cfg.in_features], Init::Zeros);
    let stem = lb.conv("encoder.stem", cfg.in_features, cfg.stem_channels, false);
    let mut widths = vec![cfg.stem_channels];
    widths.extend(&cfg.encoder_channels);
    let down = (0..cfg.encoder_channels.len())
        .map(|i| lb.conv(&format!("encoder.down{i}"), widths[i], widths[i + 1], false))
        .collect();
    let c = cfg.width();
    let hidden = c / cfg.attention_reduction;
    let rssab = (0..cfg.n_rssab)
        .map(|i| {
            let p = format!("decoder.rssab{i}");
            RssabIdx {
                conv1: lb.conv(&format!("{p}.conv1"), c, c, false),
                conv2: lb.conv(&format!("{p}.conv2"), c, c, false),
                att_down: lb.conv(&format!("{p}.temporal_down"), c, hidden, true),
                att_up: lb.conv(&format!("{p}.temporal_up"), hidden, c, true),
                spatial: lb.conv(&format!("{p}.spatial"), c, 1, false),
            }
        })
        .collect();
    let levels = cfg.encoder_channels.len();
    let up = (0..levels)
        .map(|k| {
            let level = levels - 1 - k;
            lb.conv(&format!("decoder.up{k}"), widths[level + 1], widths[level], false)
        })
        .collect();
    let head = lb.conv("head", cfg.stem_channels, cfg.final_out_channels, false);
    (
        Layout {
            bn_gamma,
            bn_beta,
            stem,
            down,
            rssab,
            up,
            head,
        },
        lb.defs,
    )
}

/// Parameters, configuration and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct AbedModel<T> {
    pub config: AbedConfig,
    pub params: Vec<(String, Tensor<T>)>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    layout: Layout,
}

impl PartialEq for Layout {
    fn eq(&self, _: &Self) -> bool {
        // Derived from the config, which is compared separately.
        true
    }
}

pub fn build_model<T: Scalar>(cfg: &AbedConfig, seed: u64) -> Result<AbedModel<T>> {
    cfg.validate()?;
    let (layout, defs) = layout(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = defs
        .into_iter()
        .map(|d| {
            let n: usize = d.shape.iter().product();
            let t = match d.init {
                Init::Zeros => Tensor::zeros(&d.shape),
                Init::Ones => Tensor::full(&d.shape, T::one()),
                Init::HeUniform => {
                    let fan_in: usize = d.shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let data = (0..n).map(|_| T::from_f64_lossy(rng.random_range(-bound..bound))).collect();
                    Tensor::new(d.shape.clone(), data)?
                }
            };
            Ok((d.name, t))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AbedModel {
        config: cfg.clone(),
        params,
        running_mean: vec![T::zero(); cfg.in_features],
        running_var: vec![T::one(); cfg.in_features],
        layout,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Temporal,
    Spatial,
}

/// Range of one attention map seen during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionProbe {
    pub block: usize,
    pub kind: AttentionKind,
    pub min: f64,
    pub max: f64,
}

pub struct ForwardOutput<T> {
    pub output: Var,
    /// Batch statistics of the input normalization, train mode only.
    pub bn_stats: Option<BatchStats<T>>,
    pub attention: Vec<AttentionProbe>,
}

/// Parameter tensors of one RSSAB, in graph form.
#[derive(Debug, Clone, Copy)]
pub struct RssabVars {
    pub conv1: (Var, Var),
    pub conv2: (Var, Var),
    pub temporal_down: (Var, Var),
    pub temporal_up: (Var, Var),
    pub spatial: (Var, Var),
}

fn probe<T: Scalar>(g: &Graph<T>, v: Var, block: usize, kind: AttentionKind) -> AttentionProbe {
    let d = g.value(v).data();
    let (min, max) = d
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x.as_f64()), hi.max(x.as_f64())));
    debug_assert!(min >= 0.0 && max <= 1.0, "attention map outside [0, 1]: {min}..{max}");
    AttentionProbe { block, kind, min, max }
}

/// One residual sequence-and-spatial attention block.
pub fn rssab_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &RssabVars,
    kernel: [usize; 3],
    f_in: Var,
    block: usize,
    probes: &mut Vec<AttentionProbe>,
) -> Result<Var> {
    let same = ConvSpec::same(kernel);
    let h1 = g.conv3d(f_in, p.conv1.0, Some(p.conv1.1), same)?;
    let h1 = g.relu(h1)?;
    let feat = g.conv3d(h1, p.conv2.0, Some(p.conv2.1), same)?;

    let pooled = g.spatial_mean(feat)?;
    let a = g.conv3d(pooled, p.temporal_down.0, Some(p.temporal_down.1), ConvSpec::pointwise())?;
    let a = g.relu(a)?;
    let a = g.conv3d(a, p.temporal_up.0, Some(p.temporal_up.1), ConvSpec::pointwise())?;
    let a = g.sigmoid(a)?;
    probes.push(probe(g, a, block, AttentionKind::Temporal));
    let gated = g.mul(feat, a)?;

    let m = g.conv3d(gated, p.spatial.0, Some(p.spatial.1), same)?;
    let m = g.sigmoid(m)?;
    probes.push(probe(g, m, block, AttentionKind::Spatial));
    let attended = g.mul(gated, m)?;
    Ok(g.add(f_in, attended)?)
}

impl<T: Scalar> AbedModel<T> {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Registers every parameter as a trainable leaf of `g`, in registry order.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|(_, t)| g.param(t.clone())).collect()
    }

    pub fn rssab_vars(&self, vars: &[Var], block: usize) -> RssabVars {
        let r = self.layout.rssab[block];
        let pair = |c: ConvIdx| (vars[c.w], vars[c.b]);
        RssabVars {
            conv1: pair(r.conv1),
            conv2: pair(r.conv2),
            temporal_down: pair(r.att_down),
            temporal_up: pair(r.att_up),
            spatial: pair(r.spatial),
        }
    }

    /// Records the full network on `g` using the bound parameter `vars`.
    pub fn forward_graph(&self, g: &mut Graph<T>, vars: &[Var], x: Var, mode: Mode) -> Result<ForwardOutput<T>> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 5 || shape[1] != self.config.in_features {
            return Err(Error::Tensor(windcast_tensor::TensorError::Shape {
                op: "abed input",
                lhs: shape,
                rhs: vec![0, self.config.in_features, 0, 0, 0],
            }));
        }
        let (h, w) = (shape[3], shape[4]);
        let l = &self.layout;
        let kernel = self.config.rssab_kernel;
        let same = ConvSpec::same(kernel);
        let conv = |g: &mut Graph<T>, input: Var, c: ConvIdx, spec: ConvSpec| g.conv3d(input, vars[c.w], Some(vars[c.b]), spec);

        let (normed, bn_stats) = match mode {
            Mode::Train => {
                let (v, s) = g.batchnorm_train(x, vars[l.bn_gamma], vars[l.bn_beta], BN_EPS)?;
                (v, Some(s))
            }
            Mode::Infer => (
                g.batchnorm_infer(x, vars[l.bn_gamma], vars[l.bn_beta], &self.running_mean, &self.running_var, BN_EPS)?,
                None,
            ),
        };
        let mut f = conv(g, normed, l.stem, same)?;
        for &d in &l.down {
            f = conv(g, f, d, same.with_stride([1, 2, 2]))?;
            f = g.relu(f)?;
        }
        let mut attention = Vec::new();
        for block in 0..l.rssab.len() {
            let p = self.rssab_vars(vars, block);
            f = rssab_forward(g, &p, kernel, f, block, &mut attention)?;
        }
        for &u in &l.up {
            f = g.upsample2x_spatial(f)?;
            f = conv(g, f, u, same)?;
            f = g.relu(f)?;
        }
        f = g.pad_crop_spatial(f, h, w)?;
        let output = conv(g, f, l.head, same)?;
        Ok(ForwardOutput {
            output,
            bn_stats,
            attention,
        })
    }

    /// Stand-alone forward pass. Train mode uses batch statistics but does
    /// not touch the running estimates.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward_probed(x, mode)?.0)
    }

    pub fn forward_probed(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Vec<AttentionProbe>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let xv = g.constant(x.clone());
        let out = self.forward_graph(&mut g, &vars, xv, mode)?;
        Ok((g.value(out.output).clone(), out.attention))
    }

    /// Folds one batch's statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &BatchStats<T>) {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        let keep = T::one() - m;
        for (r, s) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * *s;
        }
        for (r, s) in self.running_var.iter_mut().zip(&stats.var) {
            *r = keep * *r + m * *s;
        }
    }

    pub fn cast<U: Scalar>(&self) -> AbedModel<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect();
        AbedModel {
            config: self.config.clone(),
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            running_mean: conv(&self.running_mean),
            running_var: conv(&self.running_var),
            layout: self.layout.clone(),
        }
    }

    /// Euclidean norm of every parameter tensor, for diagnostics.
    pub fn param_norms(&self) -> Vec<(String, f64)> {
        self.params.iter().map(|(n, t)| (n.clone(), t.norm())).collect()
    }
}

/// Parameter count of one RSSAB for a config.
pub fn rssab_param_count(cfg: &AbedConfig) -> usize {
    let c = cfg.width();
    let hidden = c / cfg.attention_reduction;
    let k = cfg.kernel_volume();
    2 * (c * c * k + c) + (hidden * c + hidden) + (c * hidden + c) + (c * k + 1)
}

const MODEL_MAGIC: &[u8; 4] = b"WABD";
const MODEL_VERSION: u32 = 1;
const RUNNING_MEAN: &str = "encoder.bn.running_mean";
const RUNNING_VAR: &str = "encoder.bn.running_var";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: AbedConfig,
    source_dtype: String,
    tensors: Vec<TensorEntry>,
}

/// Serializes to the checkpoint format. Values are stored as 32-bit floats.
pub fn encode_model<T: Scalar>(model: &AbedModel<T>) -> Result<Vec<u8>> {
    let c = model.config.in_features;
    let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = model
        .params
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data().iter().map(|v| v.as_f64() as f32).collect()))
        .collect();
    let stat = |v: &[T]| v.iter().map(|x| x.as_f64() as f32).collect();
    entries.push((RUNNING_MEAN.into(), vec![c], stat(&model.running_mean)));
    entries.push((RUNNING_VAR.into(), vec![c], stat(&model.running_var)));
    let header = CheckpointHeader {
        config: model.config.clone(),
        source_dtype: T::NAME.into(),
        tensors: entries
            .iter()
            .map(|(n, s, _)| TensorEntry {
                name: n.clone(),
                shape: s.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = MODEL_MAGIC.to_vec();
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, data) in &entries {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decoded checkpoint and any conversion notes.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub model: AbedModel<f32>,
    pub source_dtype: String,
    pub warnings: Vec<String>,
}

pub fn decode_model(bytes: &[u8], expected: Option<&AbedConfig>) -> Result<LoadedModel> {
    let err = |m: String| Error::Checkpoint(m);
    if bytes.len() < 12 || &bytes[..4] != MODEL_MAGIC {
        return Err(err("not a model checkpoint (bad magic)".into()));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != MODEL_VERSION {
        return Err(err(format!("unsupported checkpoint version {version}")));
    }
    let hlen = word(8) as usize;
    let hend = 12usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| err("truncated checkpoint header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[12..hend]).map_err(|e| err(format!("bad checkpoint header: {e}")))?;
    if let Some(exp) = expected {
        if *exp != header.config {
            return Err(err(format!(
                "checkpoint config {:?} does not match expected {:?}",
                header.config, exp
            )));
        }
    }
    let mut model = build_model::<f32>(&header.config, 0).map_err(|e| err(e.to_string()))?;
    let c = header.config.in_features;
    let mut wanted: Vec<(String, Vec<usize>)> =
        model.params.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
    wanted.push((RUNNING_MEAN.into(), vec![c]));
    wanted.push((RUNNING_VAR.into(), vec![c]));
    let got: Vec<(String, Vec<usize>)> = header.tensors.iter().map(|e| (e.name.clone(), e.shape.clone())).collect();
    if got != wanted {
        let first = wanted
            .iter()
            .zip(&got)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("expected {a:?}, found {b:?}"))
            .unwrap_or_else(|| format!("expected {} tensors, found {}", wanted.len(), got.len()));
        return Err(err(format!("parameter manifest mismatch: {first}")));
    }
    let total: usize = wanted.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if bytes.len() != hend + 4 * total {
        return Err(err(format!(
            "checkpoint holds {} data bytes, manifest needs {}",
            bytes.len() - hend,
            4 * total
        )));
    }
    let mut pos = hend;
    let mut read = |n: usize| {
        let v: Vec<f32> = bytes[pos..pos + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        pos += 4 * n;
        v
    };
    for (_, t) in model.params.iter_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&read(n));
    }
    model.running_mean = read(c);
    model.running_var = read(c);
    let mut warnings = Vec::new();
    if header.source_dtype != "f32" {
        let msg = format!(
            "checkpoint was written from a {} model; parameters were rounded to 32-bit floats",
            header.source_dtype
        );
        warn!("{msg}");
        warnings.push(msg);
    }
    Ok(LoadedModel {
        model,
        source_dtype: header.source_dtype,
        warnings,
    })
}

pub fn save_model<T: Scalar>(model: &AbedModel<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_model(model)?)
}

/// Loads a checkpoint, optionally requiring a specific configuration.
pub fn load_model(path: &Path, expected: Option<&AbedConfig>) -> Result<LoadedModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use windcast_tensor::{grad_check, GradCheckConfig};

    fn tiny() -> AbedConfig {
        AbedConfig {
            encoder_channels: vec![4, 8],
            n_rssab: 1,
            ..AbedConfig::default()
        }
    }

    fn random_input<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model::<f32>(&AbedConfig::default(), 3).unwrap();
        let b = build_model::<f32>(&AbedConfig::default(), 3).unwrap();
        let c = build_model::<f32>(&AbedConfig::default(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
        let names: std::collections::HashSet<_> = a.params.iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), a.params.len());
    }

    #[test]
    fn parameter_count_oracle() {
        // Hand count for the default schedule 14 -> 4 -> 8 -> 16, N = 2, r = 4.
        let k = 27;
        let bn = 2 * 14;
        let stem = 4 * 14 * k + 4;
        let down = (8 * 4 * k + 8) + (16 * 8 * k + 16);
        let rssab = 2 * (16 * 16 * k + 16) + (4 * 16 + 4) + (16 * 4 + 16) + (16 * k + 1);
        let up = (8 * 16 * k + 8) + (4 * 8 * k + 4);
        let head = 2 * 4 * k + 2;
        let m = build_model::<f32>(&AbedConfig::default(), 0).unwrap();
        assert_eq!(m.param_count(), bn + stem + down + 2 * rssab + up + head);
        assert_eq!(rssab_param_count(&AbedConfig::default()), rssab);
    }

    #[test]
    fn rssab_count_difference() {
        let one = build_model::<f32>(&AbedConfig { n_rssab: 1, ..AbedConfig::default() }, 0).unwrap();
        let three = build_model::<f32>(&AbedConfig { n_rssab: 3, ..AbedConfig::default() }, 0).unwrap();
        assert_eq!(three.param_count() - one.param_count(), 2 * rssab_param_count(&AbedConfig::default()));
    }

    #[test]
    fn impossible_schedules_rejected() {
        for cfg in [
            AbedConfig { encoder_channels: vec![], ..AbedConfig::default() },
            AbedConfig { encoder_channels: vec![16, 8], ..AbedConfig::default() },
            AbedConfig { n_rssab: 0, ..AbedConfig::default() },
            AbedConfig { attention_reduction: 3, ..AbedConfig::default() },
            AbedConfig { rssab_kernel: [2, 3, 3], ..AbedConfig::default() },
        ] {
            assert!(matches!(build_model::<f32>(&cfg, 0), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn internal_shape_trace_34() {
        let m = build_model::<f32>(&AbedConfig::default(), 1).unwrap();
        let mut g = Graph::new();
        let vars = m.bind(&mut g);
        let x = g.constant(random_input(&[1, 14, 5, 34, 34], 2));
        let out = m.forward_graph(&mut g, &vars, x, Mode::Train).unwrap();
        assert_eq!(g.shape(out.output), &[1, 2, 5, 34, 34]);
        let at_width = |c: usize| -> Vec<Vec<usize>> {
            g.node_shapes()
                .filter(|s| s.len() == 5 && s[1] == c && s[2] == 5 && s[3] > 1)
                .map(|s| s[3..].to_vec())
                .collect()
        };
        let deepest = at_width(16);
        assert!(deepest.contains(&vec![9, 9]) && deepest.contains(&vec![18, 18]), "{deepest:?}");
        assert!(deepest.iter().all(|s| s == &vec![9, 9] || s == &vec![18, 18]), "{deepest:?}");
        let middle = at_width(8);
        assert!(middle.contains(&vec![17, 17]) && middle.contains(&vec![36, 36]), "{middle:?}");
    }

    #[test]
    fn odd_and_even_grids_round_trip() {
        let m = build_model::<f32>(&tiny(), 5).unwrap();
        for (h, w) in [(34, 34), (33, 33), (7, 12), (1, 1)] {
            let y = m.forward(&random_input(&[2, 14, 3, h, w], 9), Mode::Train).unwrap();
            assert_eq!(y.shape(), &[2, 2, 3, h, w]);
            assert!(y.is_finite());
        }
    }

    #[test]
    fn zero_input_is_finite() {
        let m = build_model::<f32>(&tiny(), 5).unwrap();
        let y = m.forward(&Tensor::zeros(&[1, 14, 4, 8, 8]), Mode::Train).unwrap();
        assert!(y.is_finite());
        let y = m.forward(&Tensor::zeros(&[1, 14, 4, 8, 8]), Mode::Infer).unwrap();
        assert!(y.is_finite());
    }

    #[test]
    fn wrong_channel_count_is_shape_error() {
        let m = build_model::<f32>(&tiny(), 5).unwrap();
        let err = m.forward(&Tensor::zeros(&[1, 13, 4, 8, 8]), Mode::Infer).unwrap_err();
        assert!(matches!(err, Error::Tensor(windcast_tensor::TensorError::Shape { .. })));
    }

    #[test]
    fn infer_batch_equals_single_rows() {
        let mut m = build_model::<f64>(&tiny(), 8).unwrap();
        m.running_mean.iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * i as f64);
        m.running_var.iter_mut().enumerate().for_each(|(i, v)| *v = 1.0 + 0.05 * i as f64);
        let x = random_input::<f64>(&[2, 14, 3, 9, 10], 4);
        let both = m.forward(&x, Mode::Infer).unwrap();
        let half = x.len() / 2;
        for b in 0..2 {
            let xb = Tensor::new(vec![1, 14, 3, 9, 10], x.data()[b * half..(b + 1) * half].to_vec()).unwrap();
            let yb = m.forward(&xb, Mode::Infer).unwrap();
            let n = yb.len();
            let diff = both.data()[b * n..(b + 1) * n]
                .iter()
                .zip(yb.data())
                .map(|(a, c)| (a - c).abs())
                .fold(0.0, f64::max);
            assert!(diff <= 1e-12, "row {b}: {diff}");
        }
    }

    fn rssab_setup(seed: u64) -> (AbedModel<f64>, Tensor<f64>) {
        let m = build_model::<f64>(&tiny(), seed).unwrap();
        (m, random_input(&[1, 8, 4, 5, 6], seed + 1))
    }

    fn run_block(m: &AbedModel<f64>, x: &Tensor<f64>) -> (Tensor<f64>, Vec<AttentionProbe>) {
        let mut g = Graph::new();
        let vars = m.bind(&mut g);
        let xv = g.constant(x.clone());
        let mut probes = Vec::new();
        let p = m.rssab_vars(&vars, 0);
        let y = rssab_forward(&mut g, &p, m.config.rssab_kernel, xv, 0, &mut probes).unwrap();
        (g.value(y).clone(), probes)
    }

    #[test]
    fn rssab_residual_identity() {
        let (mut m, x) = rssab_setup(11);
        for name in ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias"] {
            let t = m.param_mut(&format!("decoder.rssab0.{name}")).unwrap();
            t.data_mut().fill(0.0);
        }
        let (y, _) = run_block(&m, &x);
        assert_eq!(y, x);
    }

    #[test]
    fn attention_maps_strictly_inside_unit_interval() {
        let (m, x) = rssab_setup(12);
        let (_, probes) = run_block(&m, &x);
        assert_eq!(probes.len(), 2);
        for p in probes {
            assert!(p.min > 0.0 && p.max < 1.0, "{p:?}");
        }
    }

    #[test]
    fn rssab_gradients_match_finite_differences() {
        let (m, x) = rssab_setup(13);
        let names: Vec<String> = m.params.iter().map(|(n, _)| n.clone()).filter(|n| n.starts_with("decoder.rssab0.")).collect();
        let params: Vec<Tensor<f64>> = names.iter().map(|n| m.param(n).unwrap().clone()).collect();
        let mut params = params;
        // Non-zero biases so the check exercises them away from a special point.
        for p in params.iter_mut().filter(|p| p.ndim() == 1) {
            let n = p.len();
            *p = random_input(&[n], n as u64);
        }
        let readout = random_input::<f64>(&[1, 8, 4, 5, 6], 99);
        let mut all = params.clone();
        all.push(x.clone());
        let report = grad_check(
            |g, v| {
                let p = RssabVars {
                    conv1: (v[0], v[1]),
                    conv2: (v[2], v[3]),
                    temporal_down: (v[4], v[5]),
                    temporal_up: (v[6], v[7]),
                    spatial: (v[8], v[9]),
                };
                let mut probes = Vec::new();
                let y = rssab_forward(g, &p, [3, 3, 3], v[10], 0, &mut probes).map_err(|e| match e {
                    Error::Tensor(t) => t,
                    other => windcast_tensor::TensorError::Usage(other.to_string()),
                })?;
                let y = g.mul_const(y, readout.clone())?;
                g.sum(y)
            },
            &all,
            &GradCheckConfig { samples_per_tensor: 60, ..GradCheckConfig::default() },
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.wabd");
        let mut m = build_model::<f32>(&tiny(), 21).unwrap();
        m.running_mean[3] = 0.25;
        m.running_var[2] = 1.75;
        save_model(&m, &p).unwrap();
        let loaded = load_model(&p, Some(&tiny())).unwrap();
        assert!(loaded.warnings.is_empty());
        assert_eq!(loaded.model, m);
        let x = random_input::<f32>(&[1, 14, 3, 8, 8], 1);
        let a = m.forward(&x, Mode::Infer).unwrap();
        let b = loaded.model.forward(&x, Mode::Infer).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn mismatched_config_is_checkpoint_error() {
        let bytes = encode_model(&build_model::<f32>(&tiny(), 1).unwrap()).unwrap();
        let other = AbedConfig { in_features: 12, ..tiny() };
        assert!(matches!(decode_model(&bytes, Some(&other)), Err(Error::Checkpoint(_))));
        assert!(matches!(decode_model(&bytes[..bytes.len() - 4], None), Err(Error::Checkpoint(_))));
        assert!(matches!(decode_model(b"WCUB\x01\0\0\0\0\0\0\0", None), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn f64_checkpoint_rounds_with_warning() {
        let m = build_model::<f64>(&tiny(), 2).unwrap();
        let loaded = decode_model(&encode_model(&m).unwrap(), None).unwrap();
        assert_eq!(loaded.source_dtype, "f64");
        assert_eq!(loaded.warnings.len(), 1);
        for ((_, a), (_, b)) in m.params.iter().zip(&loaded.model.params) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*y, *x as f32);
            }
        }
    }
}
