use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Linear,
    LayerNorm,
    Mlp,
    AttentionProjection,
    DepthwiseConv,
}

/// The parameters of one layer, keyed by role (`weight`, `bias`, `gain`, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub kind: LayerKind,
    tensors: BTreeMap<String, Tensor>,
}

fn init_std(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

impl LayerParams {
    pub fn new(kind: LayerKind) -> Self {
        Self {
            kind,
            tensors: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: &str, t: Tensor) -> Self {
        self.tensors.insert(name.to_string(), t);
        self
    }

    pub fn linear<R: Rng + ?Sized>(input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        let mut p = Self::new(LayerKind::Linear).with("weight", Tensor::randn(&[input, output], init_std(input), rng));
        if bias {
            p = p.with("bias", Tensor::randn(&[output], 0.02, rng));
        }
        p
    }

    pub fn layernorm(dim: usize) -> Self {
        Self::new(LayerKind::LayerNorm)
            .with("gain", Tensor::full(&[dim], 1.0))
            .with("bias", Tensor::zeros(&[dim]))
    }

    pub fn mlp<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self::new(LayerKind::Mlp)
            .with("fc1.weight", Tensor::randn(&[dim, hidden], init_std(dim), rng))
            .with("fc1.bias", Tensor::randn(&[hidden], 0.02, rng))
            .with("fc2.weight", Tensor::randn(&[hidden, dim], init_std(hidden), rng))
            .with("fc2.bias", Tensor::randn(&[dim], 0.02, rng))
    }

    /// Query/key/value/output projections. The key projection carries no bias:
    /// a key bias shifts every score in a row equally and cancels in softmax.
    pub fn attention<R: Rng + ?Sized>(dim: usize, heads: usize, window: Option<usize>, rng: &mut R) -> Self {
        let s = init_std(dim);
        let mut p = Self::new(LayerKind::AttentionProjection)
            .with("q.weight", Tensor::randn(&[dim, dim], s, rng))
            .with("q.bias", Tensor::randn(&[dim], 0.02, rng))
            .with("k.weight", Tensor::randn(&[dim, dim], s, rng))
            .with("v.weight", Tensor::randn(&[dim, dim], s, rng))
            .with("v.bias", Tensor::randn(&[dim], 0.02, rng))
            .with("proj.weight", Tensor::randn(&[dim, dim], s, rng))
            .with("proj.bias", Tensor::randn(&[dim], 0.02, rng));
        if let Some(m) = window {
            let side = 2 * m - 1;
            p = p.with("rel_bias", Tensor::zeros(&[side * side, heads]));
        }
        p
    }

    pub fn depthwise_conv<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self::new(LayerKind::DepthwiseConv)
            .with("depthwise.weight", Tensor::randn(&[9, dim], 1.0 / 3.0, rng))
            .with("pointwise.weight", Tensor::randn(&[dim, dim], init_std(dim), rng))
            .with("pointwise.bias", Tensor::randn(&[dim], 0.02, rng))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("{:?} layer has no parameter `{name}`", self.kind)))
    }

    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        match self.tensors.get(name) {
            Some(old) if old.shape() != t.shape() => {
                crate::error::shape_err("LayerParams::set", old.shape(), t.shape())
            }
            _ => {
                self.tensors.insert(name.to_string(), t);
                Ok(())
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn expect_kind(&self, kind: LayerKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!("expected {kind:?} parameters, got {:?}", self.kind)));
        }
        self.validate()
    }

    /// Checks that parameter shapes agree with one another.
    pub fn validate(&self) -> Result<()> {
        let shape = |n: &str| self.tensor(n).map(|t| t.shape().to_vec());
        let bad = |what: &str| Err(Error::Config(format!("{:?} layer: {what}", self.kind)));
        match self.kind {
            LayerKind::Linear => {
                let w = shape("weight")?;
                if w.len() != 2 {
                    return bad("weight must be a matrix");
                }
                if let Ok(b) = shape("bias") {
                    if b != [w[1]] {
                        return bad("bias length must equal output dim");
                    }
                }
            }
            LayerKind::LayerNorm => {
                if shape("gain")? != shape("bias")? || shape("gain")?.len() != 1 {
                    return bad("gain and bias must be equal-length vectors");
                }
            }
            LayerKind::Mlp => {
                let (w1, w2) = (shape("fc1.weight")?, shape("fc2.weight")?);
                if w1.len() != 2 || w2.len() != 2 || w1[1] != w2[0] || w1[0] != w2[1] {
                    return bad("fc1/fc2 shapes must be [C,H] and [H,C]");
                }
                if shape("fc1.bias")? != [w1[1]] || shape("fc2.bias")? != [w2[1]] {
                    return bad("bias lengths");
                }
            }
            LayerKind::AttentionProjection => {
                let q = shape("q.weight")?;
                for n in ["k.weight", "v.weight", "proj.weight"] {
                    if shape(n)? != q {
                        return bad("projection weights must share one square shape");
                    }
                }
                if q.len() != 2 || q[0] != q[1] {
                    return bad("projections must be square");
                }
            }
            LayerKind::DepthwiseConv => {
                let d = shape("depthwise.weight")?;
                let p = shape("pointwise.weight")?;
                if d.len() != 2 || d[0] != 9 || p != [d[1], d[1]] {
                    return bad("depthwise [9,C] and pointwise [C,C] expected");
                }
            }
        }
        Ok(())
    }
}

/// Every parameter of a model, flat and ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    tensors: Vec<ManifestEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    /// Adds every tensor of `layer` under `prefix.` after validating it.
    pub fn insert_layer(&mut self, prefix: &str, layer: &LayerParams) -> Result<()> {
        layer.validate()?;
        for (name, t) in layer.iter() {
            self.insert(format!("{prefix}.{name}"), t.clone());
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn flatten(&self) -> Tensor {
        let data: Vec<f64> = self.tensors.values().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::from_parts(vec![data.len().max(1)], if data.is_empty() { vec![0.0] } else { data })
    }

    /// A copy of `self` with values taken in order from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.num_scalars() {
            return crate::error::shape_err("ParamSet::with_flat", &[self.num_scalars()], &[flat.len()]);
        }
        let mut out = BTreeMap::new();
        let mut at = 0;
        for (name, t) in &self.tensors {
            let n = t.numel();
            out.insert(name.clone(), Tensor::from_parts(t.shape().to_vec(), flat[at..at + n].to_vec()));
            at += n;
        }
        Ok(ParamSet { tensors: out })
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.tensors.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect(),
        }
    }

    /// Writes `params.bin` (concatenated binary tensors) and `manifest.json`
    /// (names, shapes, byte offsets) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut bin = BufWriter::new(File::create(dir.join("params.bin"))?);
        let mut entries = Vec::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let bytes = t.to_bytes();
            std::io::Write::write_all(&mut bin, &bytes)?;
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += bytes.len() as u64;
        }
        std::io::Write::flush(&mut bin)?;
        let manifest = Manifest {
            version: 1,
            tensors: entries,
        };
        serde_json::to_writer_pretty(File::create(dir.join("manifest.json"))?, &manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<ParamSet> {
        let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(dir.join("manifest.json"))?))?;
        if manifest.version != 1 {
            return Err(Error::Format(format!("unsupported checkpoint version {}", manifest.version)));
        }
        let mut reader = BufReader::new(File::open(dir.join("params.bin"))?);
        let mut out = ParamSet::new();
        for entry in manifest.tensors {
            let t = Tensor::read_binary(&mut reader)?;
            if t.shape() != entry.shape.as_slice() {
                return crate::error::shape_err("checkpoint", &entry.shape, t.shape());
            }
            out.insert(entry.name, t);
        }
        Ok(out)
    }
}

/// Parameters registered on a tape, looked up by full name.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn opt(&self, name: &str) -> Option<Var<'t>> {
        self.vars.get(name).copied()
    }

    /// Substitutes `v` for the parameter `name`, e.g. to differentiate
    /// with respect to one tensor.
    pub fn replace(mut self, name: &str, v: Var<'t>) -> Self {
        self.vars.insert(name.to_string(), v);
        self
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn validate_catches_inconsistent_shapes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut p = LayerParams::linear(3, 4, true, &mut rng);
        assert!(p.validate().is_ok());
        p.tensors.insert("bias".into(), Tensor::zeros(&[5]));
        assert!(p.validate().is_err());
        assert!(LayerParams::attention(8, 2, Some(4), &mut rng).validate().is_ok());
        assert!(LayerParams::mlp(8, 32, &mut rng).validate().is_ok());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        ps.insert_layer("a", &LayerParams::mlp(3, 5, &mut rng)).unwrap();
        ps.insert_layer("b.norm", &LayerParams::layernorm(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ps.save(dir.path()).unwrap();
        assert_eq!(ParamSet::load(dir.path()).unwrap(), ps);
        let flat = ps.flatten();
        assert_eq!(ps.with_flat(flat.data()).unwrap(), ps);
    }
}
