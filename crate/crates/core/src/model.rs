//! Small convolutional classifier with style-operator insertion points.
//!
//! Each block is `conv3x3 → style op → relu → avgpool2x2`; insertion point
//! `i` (1-based) sits right after the convolution of block `i`. The blocks
//! are followed by global average pooling (the embedding) and a linear head.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::regularizers::{self, MixStyleConfig};

/// Operator applied at an insertion point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleOp {
    #[default]
    None,
    Unistyle,
    Mixstyle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub input_channels: usize,
    pub image_size: usize,
    /// Output channels of each conv block.
    pub blocks: Vec<usize>,
    pub num_classes: usize,
    /// Insertion point (1-based block index) to operator.
    pub style_ops: BTreeMap<usize, StyleOp>,
    pub mixstyle: MixStyleConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input_channels: 3,
            image_size: 16,
            blocks: vec![16, 32],
            num_classes: 7,
            style_ops: BTreeMap::new(),
            mixstyle: MixStyleConfig::default(),
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::param("num_classes", "must be at least 2"));
        }
        if self.input_channels == 0 || self.blocks.is_empty() || self.blocks.contains(&0) {
            return Err(Error::param("blocks", "need at least one block with positive width"));
        }
        let scale = 1usize << self.blocks.len();
        if self.image_size == 0 || self.image_size % scale != 0 {
            return Err(Error::param(
                "image_size",
                format!("{} is not divisible by {scale}", self.image_size),
            ));
        }
        if let Some(&p) = self
            .style_ops
            .keys()
            .find(|&&p| p == 0 || p > self.blocks.len())
        {
            return Err(Error::param(
                "style_ops",
                format!("insertion point {p} outside 1..={}", self.blocks.len()),
            ));
        }
        Ok(())
    }

    pub fn style_at(&self, point: usize) -> StyleOp {
        self.style_ops.get(&point).copied().unwrap_or_default()
    }

    /// Width of the embedding fed to the head.
    pub fn feature_dim(&self) -> usize {
        *self.blocks.last().unwrap_or(&self.input_channels)
    }

    /// Parameter names and shapes in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        let mut c_in = self.input_channels;
        for (i, &c_out) in self.blocks.iter().enumerate() {
            shapes.push((format!("block{}.bias", i + 1), vec![c_out]));
            shapes.push((format!("block{}.kernel", i + 1), vec![c_out, c_in, 3, 3]));
            c_in = c_out;
        }
        shapes.push(("head.bias".into(), vec![self.num_classes]));
        shapes.push(("head.weight".into(), vec![self.num_classes, c_in]));
        shapes.sort();
        shapes
    }
}

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
}

/// Tape handles for every parameter of one forward pass.
pub type ParamVars = BTreeMap<String, Var>;

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor.detach());
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Every value concatenated in name order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for t in self.tensors.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`ParameterSet::flatten`] for a set of the same layout.
    pub fn with_flat(&self, values: &[f64]) -> Result<ParameterSet> {
        if values.len() != self.num_values() {
            return Err(Error::Dimension {
                op: "with_flat",
                lhs: vec![self.num_values()],
                rhs: vec![values.len()],
            });
        }
        let mut out = self.clone();
        let mut offset = 0;
        for t in out.tensors.values_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }

    /// Record every parameter on `tape`.
    pub fn attach(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        self.tensors
            .iter()
            .map(|(name, t)| {
                let t = t.detach();
                let v = if trainable {
                    tape.variable(t)
                } else {
                    tape.constant(t)
                };
                (name.clone(), v)
            })
            .collect()
    }

    /// Check names and shapes against a model spec.
    pub fn check_layout(&self, spec: &ModelSpec) -> Result<()> {
        let expected = spec.parameter_shapes();
        if expected.len() != self.tensors.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in expected {
            match self.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Dimension {
                        op: "parameter layout",
                        lhs: shape,
                        rhs: t.shape().to_vec(),
                    })
                }
                None => return Err(Error::Contract(format!("missing parameter `{name}`"))),
            }
        }
        Ok(())
    }
}

/// Fan-in scaled uniform weights `U(−√(6/fan_in), √(6/fan_in))`, zero biases.
pub fn init_parameters(spec: &ModelSpec, seed: u64) -> Result<ParameterSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    for (name, shape) in spec.parameter_shapes() {
        let n: usize = shape.iter().product();
        let tensor = if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(shape, data)?
        };
        params.insert(name, tensor);
    }
    Ok(params)
}

/// Forward mode. MixStyle draws from the rng and only acts in training.
pub enum Mode<'a> {
    Train(&'a mut dyn RngCore),
    Eval,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Block output right after the insertion point, keyed by point.
    pub features: BTreeMap<usize, Var>,
    pub embedding: Var,
}

fn param(vars: &ParamVars, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
}

/// Fixed pixel normalisation `(x − 0.5)·4` applied before the first block.
pub const INPUT_CENTER: f64 = 0.5;
pub const INPUT_GAIN: f64 = 4.0;

pub fn forward(
    tape: &mut Tape,
    vars: &ParamVars,
    spec: &ModelSpec,
    batch: Var,
    mut mode: Mode<'_>,
) -> Result<ForwardOutput> {
    let s = tape.shape(batch);
    let expected = [spec.input_channels, spec.image_size, spec.image_size];
    if s.len() != 4 || s[1..] != expected {
        return Err(Error::Dimension {
            op: "forward",
            lhs: s.to_vec(),
            rhs: expected.to_vec(),
        });
    }
    let centred = tape.add_scalar(batch, -INPUT_CENTER);
    let mut x = tape.mul_scalar(centred, INPUT_GAIN);
    let mut features = BTreeMap::new();
    for point in 1..=spec.blocks.len() {
        let kernel = param(vars, &format!("block{point}.kernel"))?;
        let bias = param(vars, &format!("block{point}.bias"))?;
        let mut h = tape.conv2d(x, kernel, bias)?;
        h = match (spec.style_at(point), &mut mode) {
            (StyleOp::None, _) => h,
            (StyleOp::Unistyle, _) => regularizers::unistyle(tape, h)?,
            (StyleOp::Mixstyle, Mode::Train(rng)) => {
                regularizers::mixstyle(tape, h, &mut **rng, &spec.mixstyle)?.0
            }
            (StyleOp::Mixstyle, Mode::Eval) => h,
        };
        features.insert(point, h);
        let r = tape.relu(h);
        x = tape.avgpool2x2(r)?;
    }
    let embedding = tape.global_avg_pool(x)?;
    let weight = param(vars, "head.weight")?;
    let bias = param(vars, "head.bias")?;
    let wt = tape.transpose(weight)?;
    let z = tape.matmul(embedding, wt)?;
    let logits = tape.add_row_broadcast(z, bias)?;
    Ok(ForwardOutput {
        logits,
        features,
        embedding,
    })
}

const EVAL_CHUNK: usize = 128;

/// Eval-mode logits and embeddings for a stack of images `[N, C, H, W]`.
pub fn evaluate(params: &ParameterSet, spec: &ModelSpec, images: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = images.shape()[0];
    let mut logits = Vec::with_capacity(n * spec.num_classes);
    let mut embeddings = Vec::with_capacity(n * spec.feature_dim());
    let rows: Vec<usize> = (0..n).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let vars = params.attach(&mut tape, false);
        let x = tape.constant(images.select(chunk));
        let out = forward(&mut tape, &vars, spec, x, Mode::Eval)?;
        logits.extend_from_slice(tape.data(out.logits));
        embeddings.extend_from_slice(tape.data(out.embedding));
    }
    Ok((
        Tensor::new(vec![n, spec.num_classes], logits)?,
        Tensor::new(vec![n, spec.feature_dim()], embeddings)?,
    ))
}

pub fn eval_logits(params: &ParameterSet, spec: &ModelSpec, images: &Tensor) -> Result<Tensor> {
    Ok(evaluate(params, spec, images)?.0)
}

const CKPT_MAGIC: &[u8; 8] = b"XDEDCKPT";
pub const CKPT_VERSION: u32 = 1;

/// JSON header stored in a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    /// Data the model was trained on, so probes can rebuild it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_domain: Option<usize>,
    /// Set instead of `target_domain` for single-source runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_domain: Option<usize>,
}

pub fn write_checkpoint<W: Write>(w: &mut W, meta: &CheckpointMeta, params: &ParameterSet) -> std::io::Result<()> {
    let json = serde_json::to_vec(meta)?;
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Format(format!("truncated: wanted {n} bytes, {} left", buf.len())));
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

fn take_u32(buf: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, 4)?.try_into().unwrap()))
}

fn take_u64(buf: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(buf, 8)?.try_into().unwrap()))
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(CheckpointMeta, ParameterSet)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = bytes.as_slice();
    if take(&mut buf, 8)? != CKPT_MAGIC {
        return Err(Error::Format("bad magic, not a checkpoint".into()));
    }
    let version = take_u32(&mut buf)?;
    if version != CKPT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CKPT_VERSION,
        });
    }
    let meta_len = take_u64(&mut buf)? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(take(&mut buf, meta_len)?)?;
    let mut params = ParameterSet::new();
    while !buf.is_empty() {
        let name_len = take_u32(&mut buf)? as usize;
        let name = std::str::from_utf8(take(&mut buf, name_len)?)
            .map_err(|e| Error::Format(e.to_string()))?
            .to_owned();
        let rank = take_u32(&mut buf)? as usize;
        let shape = (0..rank)
            .map(|_| take_u64(&mut buf).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = take(&mut buf, n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    params.check_layout(&meta.spec)?;
    Ok((meta, params))
}

pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, params: &ParameterSet) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, meta, params).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, ParameterSet)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_with(style: &[(usize, StyleOp)]) -> ModelSpec {
        ModelSpec {
            blocks: vec![4, 6],
            image_size: 8,
            num_classes: 3,
            style_ops: style.iter().copied().collect(),
            ..Default::default()
        }
    }

    fn images(n: usize, spec: &ModelSpec, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = spec.image_size;
        let data = (0..n * spec.input_channels * s * s)
            .map(|_| rng.random::<f64>())
            .collect();
        Tensor::new(vec![n, spec.input_channels, s, s], data).unwrap()
    }

    #[test]
    fn parameter_names_are_sorted_and_stable() {
        let spec = ModelSpec::default();
        let p = init_parameters(&spec, 1).unwrap();
        let names: Vec<_> = p.names().cloned().collect();
        assert_eq!(
            names,
            ["block1.bias", "block1.kernel", "block2.bias", "block2.kernel", "head.bias", "head.weight"]
        );
        assert_eq!(p.get("block1.kernel").unwrap().shape(), &[16, 3, 3, 3]);
        assert_eq!(p.get("head.weight").unwrap().shape(), &[7, 32]);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = ModelSpec::default();
        assert_eq!(init_parameters(&spec, 9).unwrap(), init_parameters(&spec, 9).unwrap());
        assert_ne!(init_parameters(&spec, 9).unwrap(), init_parameters(&spec, 10).unwrap());
        let p = init_parameters(&spec, 9).unwrap();
        for (name, t) in p.iter() {
            if name.ends_with("bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    fn std_of(v: &[f64]) -> f64 {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    #[test]
    fn kernel_spread_matches_fan_in_law() {
        let spec = ModelSpec { blocks: vec![64, 32], ..Default::default() };
        let p = init_parameters(&spec, 2).unwrap();
        let kernel = p.get("block1.kernel").unwrap().data();
        let fan_in: f64 = 27.0;
        let bound = (6.0 / fan_in).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let reference: Vec<f64> = (0..kernel.len()).map(|_| rng.random_range(-bound..bound)).collect();
        let got = std_of(kernel);
        assert!((got / std_of(&reference) - 1.0).abs() <= 0.2, "{got}");
        assert!((got / (2.0 / fan_in).sqrt() - 1.0).abs() <= 0.2, "{got}");
        assert!(kernel.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec { num_classes: 1, ..Default::default() }.validate().is_err());
        assert!(ModelSpec { image_size: 10, ..Default::default() }.validate().is_err());
        let mut spec = ModelSpec::default();
        spec.style_ops.insert(3, StyleOp::Unistyle);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let spec = spec_with(&[]);
        let mut p = init_parameters(&spec, 3).unwrap();
        p.get_mut("head.weight").unwrap().data_mut().fill(0.0);
        let logits = eval_logits(&p, &spec, &images(5, &spec, 0)).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let spec = spec_with(&[]);
        let p = init_parameters(&spec, 3).unwrap();
        let bad = Tensor::zeros(&[2, 3, 4, 4]);
        assert!(matches!(eval_logits(&p, &spec, &bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn unistyle_at_first_point_removes_input_contrast() {
        // Zero padding makes an additive offset non-uniform at the border, so
        // only a contrast change about the normalisation centre is removed
        // exactly. Large inputs keep the ε guard negligible.
        let spec = spec_with(&[(1, StyleOp::Unistyle)]);
        let mut p = init_parameters(&spec, 4).unwrap();
        for v in p.get_mut("block1.bias").unwrap().data_mut() {
            *v = 0.3;
        }
        let mut x = images(3, &spec, 1);
        for v in x.data_mut() {
            *v *= 1e4;
        }
        let base = eval_logits(&p, &spec, &x).unwrap();
        let mut scaled = x.clone();
        for v in scaled.data_mut() {
            *v = INPUT_CENTER + 3.0 * (*v - INPUT_CENTER);
        }
        let out = eval_logits(&p, &spec, &scaled).unwrap();
        for (a, b) in base.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn train_and_eval_agree_without_style_ops() {
        let spec = spec_with(&[]);
        let p = init_parameters(&spec, 5).unwrap();
        let x = images(4, &spec, 2);
        let eval = eval_logits(&p, &spec, &x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let vars = p.attach(&mut tape, true);
        let xv = tape.constant(x);
        let out = forward(&mut tape, &vars, &spec, xv, Mode::Train(&mut rng)).unwrap();
        assert_eq!(tape.data(out.logits), eval.data());
    }

    #[test]
    fn unistyle_keeps_feature_shapes() {
        let plain = spec_with(&[]);
        let styled = spec_with(&[(1, StyleOp::Unistyle), (2, StyleOp::Unistyle)]);
        let p = init_parameters(&plain, 5).unwrap();
        let x = images(2, &plain, 2);
        let shapes = |spec: &ModelSpec| {
            let mut tape = Tape::new();
            let vars = p.attach(&mut tape, false);
            let xv = tape.constant(x.clone());
            let out = forward(&mut tape, &vars, spec, xv, Mode::Eval).unwrap();
            out.features
                .values()
                .map(|&v| tape.shape(v).to_vec())
                .collect::<Vec<_>>()
        };
        assert_eq!(shapes(&plain), shapes(&styled));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let spec = spec_with(&[(1, StyleOp::Unistyle)]);
        let p = init_parameters(&spec, 11).unwrap();
        let meta = CheckpointMeta {
            spec: spec.clone(),
            epoch: 3,
            seed: 11,
            config_hash: "abc".into(),
            dataset: None,
            target_domain: Some(2),
            source_domain: None,
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &meta, &p).unwrap();
        assert_eq!(&buf[..8], b"XDEDCKPT");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        let (meta2, p2) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(p, p2);
        let mut again = Vec::new();
        write_checkpoint(&mut again, &meta2, &p2).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn checkpoint_version_and_truncation_errors() {
        let spec = spec_with(&[]);
        let p = init_parameters(&spec, 1).unwrap();
        let meta = CheckpointMeta {
            spec,
            epoch: 0,
            seed: 1,
            config_hash: String::new(),
            dataset: None,
            target_domain: None,
            source_domain: None,
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &meta, &p).unwrap();
        let mut wrong = buf.clone();
        wrong[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            read_checkpoint(&mut wrong.as_slice()),
            Err(Error::Version { found: 2, .. })
        ));
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(read_checkpoint(&mut &cut[..]), Err(Error::Format(_))));
    }
}
