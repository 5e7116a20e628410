//! Named parameter store, seeded initialisation, checkpoint I/O, and the per-pass
//! [`Session`] that binds parameters onto a fresh tape.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

/// Regularisation class of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Dense, convolution, attention-projection and peephole weights (L2 penalised).
    Weight,
    /// Additive biases (L1 + L2 penalised).
    Bias,
    /// Layer-norm gain and shift (not penalised).
    Norm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Every learnable tensor of a model, keyed by hierarchical path (`genomic.W1`, `ssa.W_xi`, ...).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    entries: BTreeMap<String, Param>,
}

/// Gradients keyed like [`ModelParams`].
pub type Gradients = BTreeMap<String, Tensor>;

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, kind: ParamKind, value: Tensor) {
        self.entries.insert(key.into(), Param { kind, value });
    }

    pub fn get(&self, key: &str) -> Result<&Param> {
        self.entries
            .get(key)
            .ok_or_else(|| Error::MissingParam(key.to_string()))
    }

    pub fn tensor(&self, key: &str) -> Result<&Tensor> {
        Ok(&self.get(key)?.value)
    }

    pub fn tensor_mut(&mut self, key: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(key)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::MissingParam(key.to_string()))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// Sets every value whose key starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (k, p) in self.entries.iter_mut() {
            if k.starts_with(prefix) {
                p.value.data_mut().fill(0.0);
            }
        }
    }

    /// Writes a checkpoint directory: `params.json` (key, kind, shape, file) plus one MGT1 file
    /// per tensor.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut manifest = ParamManifest {
            format_version: PARAM_FORMAT_VERSION,
            params: Vec::with_capacity(self.entries.len()),
        };
        for (key, p) in &self.entries {
            let file = format!("{key}.mgt");
            p.value.save(dir.join(&file))?;
            manifest.params.push(ParamEntry {
                key: key.clone(),
                kind: p.kind,
                shape: p.value.shape().to_vec(),
                file,
            });
        }
        fs::write(
            dir.join("params.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: ParamManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("params.json"))?)?;
        if manifest.format_version != PARAM_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                manifest.format_version
            )));
        }
        let mut out = Self::new();
        for e in manifest.params {
            let value = Tensor::load(dir.join(&e.file))?;
            if value.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter `{}` has shape {:?}, manifest says {:?}",
                    e.key,
                    value.shape(),
                    e.shape
                )));
            }
            out.insert(e.key, e.kind, value);
        }
        Ok(out)
    }
}

const PARAM_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamManifest {
    format_version: u32,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    key: String,
    kind: ParamKind,
    shape: Vec<usize>,
    file: String,
}

/// Uniform Glorot initialisation, `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Adds a dense layer `prefix.W [fan_in × fan_out]`, `prefix.b [fan_out]`.
pub fn init_dense(
    params: &mut ModelParams,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) {
    init_affine(
        params,
        &format!("{prefix}.W"),
        &format!("{prefix}.b"),
        fan_in,
        fan_out,
        rng,
    );
}

/// Dense layer under explicit weight and bias keys.
pub fn init_affine(
    params: &mut ModelParams,
    wkey: &str,
    bkey: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) {
    params.insert(
        wkey,
        ParamKind::Weight,
        glorot(&[fan_in, fan_out], fan_in, fan_out, rng),
    );
    params.insert(bkey, ParamKind::Bias, Tensor::zeros(&[fan_out]));
}

/// Projection matrix without bias.
pub fn init_projection(
    params: &mut ModelParams,
    key: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) {
    params.insert(
        key,
        ParamKind::Weight,
        glorot(&[fan_in, fan_out], fan_in, fan_out, rng),
    );
}

pub fn init_layer_norm(params: &mut ModelParams, prefix: &str, width: usize) {
    params.insert(format!("{prefix}.gain"), ParamKind::Norm, Tensor::ones(&[width]));
    params.insert(format!("{prefix}.bias"), ParamKind::Norm, Tensor::zeros(&[width]));
}

/// Adds `prefix.W [cout × cin × k³]` and `prefix.b [cout]`.
pub fn init_conv(
    params: &mut ModelParams,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) {
    let taps = k * k * k;
    params.insert(
        format!("{prefix}.W"),
        ParamKind::Weight,
        glorot(&[cout, cin, k, k, k], cin * taps, cout * taps, rng),
    );
    params.insert(format!("{prefix}.b"), ParamKind::Bias, Tensor::zeros(&[cout]));
}

/// One forward (and optionally backward) pass: a tape, the parameters bound onto it, the
/// dropout stream, and any attention maps captured for explanation.
pub struct Session<'p> {
    pub tape: Tape,
    params: &'p ModelParams,
    bound: BTreeMap<String, Var>,
    train_params: bool,
    pub mode: Mode,
    pub rng: ChaCha8Rng,
    explain: bool,
    captures: BTreeMap<String, Tensor>,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ModelParams, mode: Mode, rng: ChaCha8Rng) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: BTreeMap::new(),
            train_params: true,
            mode,
            rng,
            explain: false,
            captures: BTreeMap::new(),
        }
    }

    /// Parameters are bound as constants; only explicit inputs receive gradients.
    pub fn frozen(mut self) -> Self {
        self.train_params = false;
        self
    }

    /// Retain attention weights and fusion intermediates (see [`Session::captures`]).
    pub fn explaining(mut self) -> Self {
        self.explain = true;
        self
    }

    pub fn is_explaining(&self) -> bool {
        self.explain
    }

    /// Tape node for parameter `key`, registering it on first use.
    pub fn param(&mut self, key: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(key) {
            return Ok(v);
        }
        let value = self.params.tensor(key)?.clone();
        let v = self.tape.leaf(value, self.train_params);
        self.bound.insert(key.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.tape.leaf(value, requires_grad)
    }

    pub fn capture(&mut self, key: impl Into<String>, value: Tensor) {
        if self.explain {
            self.captures.insert(key.into(), value);
        }
    }

    pub fn captures(&self) -> &BTreeMap<String, Tensor> {
        &self.captures
    }

    /// `x · W + b` with parameters `prefix.W`, `prefix.b`.
    pub fn dense(&mut self, prefix: &str, x: Var) -> Result<Var> {
        self.affine(x, &format!("{prefix}.W"), &format!("{prefix}.b"))
    }

    pub fn affine(&mut self, x: Var, wkey: &str, bkey: &str) -> Result<Var> {
        let w = self.param(wkey)?;
        let b = self.param(bkey)?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_suffix(y, b)
    }

    pub fn layer_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gain"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.tape.layer_norm(x, g, b, LN_EPS)
    }

    pub fn conv(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.W"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        self.tape.conv3d(x, w, b)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        self.tape.dropout(x, p, self.mode, &mut self.rng)
    }

    /// Runs backward from `loss` and returns the gradient of every bound parameter.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.tape.backward(loss)?;
        Ok(self.param_grads())
    }

    pub fn param_grads(&self) -> Gradients {
        self.bound
            .iter()
            .filter_map(|(k, &v)| self.tape.grad(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn glorot_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = glorot(&[10, 20], 10, 20, &mut rng);
        let a = (6.0f64 / 30.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() < a));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ModelParams::new();
        init_dense(&mut p, "head.fc1", 3, 4, &mut rng);
        init_layer_norm(&mut p, "head.ln", 4);
        let dir = tempfile::tempdir().unwrap();
        p.save_dir(dir.path()).unwrap();
        let q = ModelParams::load_dir(dir.path()).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.get("head.fc1.b").unwrap().kind, ParamKind::Bias);
    }

    #[test]
    fn session_binds_each_param_once() {
        let mut p = ModelParams::new();
        p.insert("w", ParamKind::Weight, Tensor::from_vec(vec![1.0, 2.0]));
        let mut s = Session::new(&p, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        let a = s.param("w").unwrap();
        let b = s.param("w").unwrap();
        assert_eq!(a, b);
        assert!(matches!(s.param("nope"), Err(Error::MissingParam(_))));
    }
}
