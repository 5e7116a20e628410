//! Modality encoders: genomic and connectome MLPs, the volumetric CNN, and the
//! ConvLSTM-based spatial sequence attention block.

use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::params::{
    glorot, init_affine, init_conv, init_dense, init_layer_norm, ModelParams, ParamKind, Session, LN_EPS,
};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Genomic encoder φ: two GELU dense layers with dropout and layer norm, then a GELU projection.
#[derive(Debug, Clone)]
pub struct GenomicEncoder {
    pub input_dim: usize,
    pub hidden: [usize; 2],
    pub out_dim: usize,
}

impl GenomicEncoder {
    pub fn init(&self, params: &mut ModelParams, rng: &mut ChaCha8Rng) {
        let [h1, h2] = self.hidden;
        init_affine(params, "genomic.W1", "genomic.b1", self.input_dim, h1, rng);
        init_affine(params, "genomic.W2", "genomic.b2", h1, h2, rng);
        init_affine(params, "genomic.W3", "genomic.b3", h2, self.out_dim, rng);
        init_layer_norm(params, "genomic.ln1", h1);
        init_layer_norm(params, "genomic.ln2", h2);
    }

    /// `G' = LN(Drop(Γ(G W1 + b1), p1))`, `Ḡ = Γ(LN(Drop(Γ(G' W2 + b2), p2)) W3 + b3)`.
    pub fn forward(&self, s: &mut Session, g: Var, p1: f64, p2: f64) -> Result<Var> {
        check_width("genomic_forward", s, g, self.input_dim)?;
        let a = s.affine(g, "genomic.W1", "genomic.b1")?;
        let a = s.tape.gelu(a);
        let a = s.dropout(a, p1)?;
        let g_prime = s.layer_norm("genomic.ln1", a)?;
        let b = s.affine(g_prime, "genomic.W2", "genomic.b2")?;
        let b = s.tape.gelu(b);
        let b = s.dropout(b, p2)?;
        let b = s.layer_norm("genomic.ln2", b)?;
        let c = s.affine(b, "genomic.W3", "genomic.b3")?;
        Ok(s.tape.gelu(c))
    }
}

/// Connectome encoder ψ: one GELU dense layer with dropout and layer norm, then a GELU projection.
#[derive(Debug, Clone)]
pub struct ConnectomeEncoder {
    pub input_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl ConnectomeEncoder {
    pub fn init(&self, params: &mut ModelParams, rng: &mut ChaCha8Rng) {
        init_affine(params, "connectome.W4", "connectome.b4", self.input_dim, self.hidden, rng);
        init_affine(params, "connectome.W5", "connectome.b5", self.hidden, self.out_dim, rng);
        init_layer_norm(params, "connectome.ln", self.hidden);
    }

    /// `C' = LN(Drop(Γ(C W4 + b4), p3))`, `C̄ = Γ(C' W5 + b5)`.
    pub fn forward(&self, s: &mut Session, c: Var, p3: f64) -> Result<Var> {
        check_width("connectome_forward", s, c, self.input_dim)?;
        let a = s.affine(c, "connectome.W4", "connectome.b4")?;
        let a = s.tape.gelu(a);
        let a = s.dropout(a, p3)?;
        let c_prime = s.layer_norm("connectome.ln", a)?;
        let b = s.affine(c_prime, "connectome.W5", "connectome.b5")?;
        Ok(s.tape.gelu(b))
    }
}

fn check_width(op: &'static str, s: &Session, x: Var, width: usize) -> Result<()> {
    let sh = s.tape.shape(x);
    if sh.len() != 2 || sh[1] != width {
        return Err(dim_err(op, sh, &[width]));
    }
    Ok(())
}

/// Extracts a dense 3D feature map from a `[B, 1, D, H, W]` volume.
///
/// Implementations must be deterministic given parameters and input.
pub trait VolumeFeatureExtractor: std::fmt::Debug + Send + Sync {
    fn init(&self, params: &mut ModelParams, rng: &mut ChaCha8Rng);
    fn forward(&self, s: &mut Session, volume: Var) -> Result<Var>;
    fn out_channels(&self) -> usize;
    /// Spatial extents of the feature map for a given input volume.
    fn out_extents(&self, input: [usize; 3]) -> Result<[usize; 3]>;
}

/// Three `conv3d → standardize → GELU → 2× average pool` blocks trained from scratch.
///
/// The standardization is a parameter-free per-subject normalization of the whole feature
/// map (a single-group group norm), which keeps activations at unit scale through the stack.
#[derive(Debug, Clone)]
pub struct ConvVolumeEncoder {
    pub channels: [usize; 3],
    pub kernel: usize,
}

impl Default for ConvVolumeEncoder {
    fn default() -> Self {
        Self {
            channels: [8, 16, 32],
            kernel: 3,
        }
    }
}

impl VolumeFeatureExtractor for ConvVolumeEncoder {
    fn init(&self, params: &mut ModelParams, rng: &mut ChaCha8Rng) {
        let mut cin = 1;
        for (i, &cout) in self.channels.iter().enumerate() {
            init_conv(params, &format!("volume.conv{}", i + 1), cin, cout, self.kernel, rng);
            cin = cout;
        }
    }

    fn forward(&self, s: &mut Session, volume: Var) -> Result<Var> {
        let sh = s.tape.shape(volume).to_vec();
        if sh.len() != 5 || sh[1] != 1 {
            return Err(dim_err("volume_forward", &sh, &[0, 1, 0, 0, 0]));
        }
        self.out_extents([sh[2], sh[3], sh[4]])?;
        let mut x = volume;
        for i in 0..self.channels.len() {
            x = s.conv(&format!("volume.conv{}", i + 1), x)?;
            x = standardize_per_sample(s, x)?;
            x = s.tape.gelu(x);
            x = s.tape.avg_pool3d(x)?;
        }
        Ok(x)
    }

    fn out_channels(&self) -> usize {
        self.channels[2]
    }

    fn out_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        if input.iter().any(|e| e % 8 != 0 || *e == 0) {
            return Err(Error::Config(format!(
                "volume extents {input:?} must be positive multiples of 8 (three 2x poolings)"
            )));
        }
        Ok(input.map(|e| e / 8))
    }
}

fn standardize_per_sample(s: &mut Session, x: Var) -> Result<Var> {
    let shape = s.tape.shape(x).to_vec();
    let width: usize = shape[1..].iter().product();
    let flat = s.tape.reshape(x, &[shape[0], width])?;
    let gain = s.tape.constant(Tensor::ones(&[width]));
    let bias = s.tape.constant(Tensor::zeros(&[width]));
    let normed = s.tape.layer_norm(flat, gain, bias, LN_EPS)?;
    s.tape.reshape(normed, &shape)
}

/// Spatial sequence attention: entry conv3d → ConvLSTM unrolled over `steps` → exit conv3d.
///
/// Every step feeds the same entry feature map; hidden and cell state start at zero.
/// Peephole weights `W_c·` are per-position maps applied with a Hadamard product.
#[derive(Debug, Clone)]
pub struct SpatialSequenceAttention {
    pub channels: usize,
    pub extents: [usize; 3],
    pub kernel: usize,
    pub steps: usize,
}

const GATES: [&str; 4] = ["i", "f", "c", "o"];

impl SpatialSequenceAttention {
    pub fn init(&self, params: &mut ModelParams, rng: &mut ChaCha8Rng) {
        let (c, k) = (self.channels, self.kernel);
        let taps = k * k * k;
        init_conv(params, "ssa.entry", c, c, k, rng);
        init_conv(params, "ssa.exit", c, c, k, rng);
        for g in GATES {
            for src in ["x", "h"] {
                params.insert(
                    format!("ssa.W_{src}{g}"),
                    ParamKind::Weight,
                    glorot(&[c, c, k, k, k], c * taps, c * taps, rng),
                );
            }
            params.insert(format!("ssa.b_{g}"), ParamKind::Bias, Tensor::zeros(&[c]));
        }
        let [d, h, w] = self.extents;
        for g in ["i", "f", "o"] {
            params.insert(
                format!("ssa.W_c{g}"),
                ParamKind::Weight,
                Tensor::zeros(&[c, d, h, w]),
            );
        }
    }

    /// `W_x· * X + b· [+ W_h· * H] [+ W_c· ⊙ C]`
    fn gate_pre(
        &self,
        s: &mut Session,
        gate: &str,
        x: Var,
        state: Option<(Var, Var)>,
        peephole: bool,
    ) -> Result<Var> {
        let wx = s.param(&format!("ssa.W_x{gate}"))?;
        let b = s.param(&format!("ssa.b_{gate}"))?;
        let mut acc = s.tape.conv3d(x, wx, b)?;
        if let Some((h, c)) = state {
            let wh = s.param(&format!("ssa.W_h{gate}"))?;
            let zero = s.tape.constant(Tensor::zeros(&[self.channels]));
            let hh = s.tape.conv3d(h, wh, zero)?;
            acc = s.tape.add(acc, hh)?;
            if peephole {
                let wc = s.param(&format!("ssa.W_c{gate}"))?;
                let cc = s.tape.mul_suffix(c, wc)?;
                acc = s.tape.add(acc, cc)?;
            }
        }
        Ok(acc)
    }

    /// One ConvLSTM step. `state = None` stands for zero hidden and cell maps.
    pub fn cell(&self, s: &mut Session, x: Var, state: Option<(Var, Var)>) -> Result<(Var, Var)> {
        if let Some((h, c)) = state {
            if s.tape.shape(h) != s.tape.shape(x) || s.tape.shape(c) != s.tape.shape(x) {
                return Err(dim_err("convlstm_cell", s.tape.shape(x), s.tape.shape(h)));
            }
        }
        let i_pre = self.gate_pre(s, "i", x, state, true)?;
        let f_pre = self.gate_pre(s, "f", x, state, true)?;
        let c_pre = self.gate_pre(s, "c", x, state, false)?;
        let o_pre = self.gate_pre(s, "o", x, state, true)?;
        let i = s.tape.sigmoid(i_pre);
        let f = s.tape.sigmoid(f_pre);
        let o = s.tape.sigmoid(o_pre);
        let cand = s.tape.tanh(c_pre);
        let write = s.tape.mul(i, cand)?;
        let c_new = match state {
            Some((_, c_prev)) => {
                let keep = s.tape.mul(f, c_prev)?;
                s.tape.add(keep, write)?
            }
            None => write,
        };
        let tc = s.tape.tanh(c_new);
        let h_new = s.tape.mul(o, tc)?;
        Ok((h_new, c_new))
    }

    /// Runs the block on `x: [B, C, D, H, W]`; the output has the same shape.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let sh = s.tape.shape(x).to_vec();
        if sh.len() != 5 || sh[1] != self.channels || sh[2..] != self.extents[..] {
            return Err(dim_err(
                "ssa_forward",
                &sh,
                &[0, self.channels, self.extents[0], self.extents[1], self.extents[2]],
            ));
        }
        let e = s.conv("ssa.entry", x)?;
        let mut state = None;
        for _ in 0..self.steps {
            state = Some(self.cell(s, e, state)?);
        }
        let h = state.map(|(h, _)| h).unwrap_or(e);
        s.conv("ssa.exit", h)
    }
}

/// Global average pool over space followed by a learned `C → d'` map.
#[derive(Debug, Clone)]
pub struct VolumeSqueeze {
    pub channels: usize,
    pub out_dim: usize,
}

impl VolumeSqueeze {
    pub fn init(&self, params: &mut ModelParams, rng: &mut ChaCha8Rng) {
        init_dense(params, "squeeze", self.channels, self.out_dim, rng);
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let pooled = s.tape.global_avg_pool3d(x)?;
        s.dense("squeeze", pooled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use crate::tape::Mode;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_genomic_weights_give_zero_embedding() {
        let enc = GenomicEncoder {
            input_dim: 6,
            hidden: [5, 4],
            out_dim: 3,
        };
        let mut p = ModelParams::new();
        enc.init(&mut p, &mut rng(0));
        for k in ["genomic.W1", "genomic.W2", "genomic.W3"] {
            p.tensor_mut(k).unwrap().data_mut().fill(0.0);
        }
        let mut s = Session::new(&p, Mode::Eval, rng(1));
        let g = s.input(random_tensor(&[2, 6], 1.0, &mut rng(2)), false);
        let out = enc.forward(&mut s, g, 0.5, 0.3).unwrap();
        assert!(s.tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn genomic_eval_ignores_dropout_probability() {
        let enc = GenomicEncoder {
            input_dim: 6,
            hidden: [5, 4],
            out_dim: 3,
        };
        let mut p = ModelParams::new();
        enc.init(&mut p, &mut rng(0));
        let x = random_tensor(&[2, 6], 1.0, &mut rng(2));
        let run = |p1: f64, p2: f64| {
            let mut s = Session::new(&p, Mode::Eval, rng(9));
            let g = s.input(x.clone(), false);
            let out = enc.forward(&mut s, g, p1, p2).unwrap();
            s.tape.value(out).clone()
        };
        assert_eq!(run(0.9, 0.9), run(0.0, 0.0));
    }

    #[test]
    fn connectome_zero_projection() {
        let enc = ConnectomeEncoder {
            input_dim: 1378,
            hidden: 8,
            out_dim: 4,
        };
        let mut p = ModelParams::new();
        enc.init(&mut p, &mut rng(0));
        p.zero_prefix("connectome.W5");
        let mut s = Session::new(&p, Mode::Train, rng(1));
        let c = s.input(random_tensor(&[3, 1378], 1.0, &mut rng(2)), false);
        let out = enc.forward(&mut s, c, 0.3).unwrap();
        assert_eq!(s.tape.shape(out), &[3, 4]);
        assert!(s.tape.value(out).data().iter().all(|&v| v == 0.0));
        let bad = s.input(Tensor::zeros(&[3, 10]), false);
        assert!(enc.forward(&mut s, bad, 0.3).is_err());
    }

    #[test]
    fn volume_encoder_shapes() {
        let enc = ConvVolumeEncoder::default();
        let mut p = ModelParams::new();
        enc.init(&mut p, &mut rng(0));
        let mut s = Session::new(&p, Mode::Eval, rng(1));
        let v = s.input(random_tensor(&[1, 1, 16, 16, 16], 1.0, &mut rng(2)), false);
        let out = enc.forward(&mut s, v).unwrap();
        assert_eq!(s.tape.shape(out), &[1, 32, 2, 2, 2]);
        let z = s.input(Tensor::zeros(&[1, 1, 8, 8, 8]), false);
        let out = enc.forward(&mut s, z).unwrap();
        assert!(s.tape.value(out).data().iter().all(|&v| v == 0.0));
        let odd = s.input(Tensor::zeros(&[1, 1, 12, 8, 8]), false);
        assert!(matches!(enc.forward(&mut s, odd), Err(Error::Config(_))));
    }

    fn ssa(channels: usize, ext: usize, steps: usize) -> SpatialSequenceAttention {
        SpatialSequenceAttention {
            channels,
            extents: [ext; 3],
            kernel: 3,
            steps,
        }
    }

    #[test]
    fn zero_parameter_cell_closed_form() {
        let block = ssa(2, 3, 2);
        let mut p = ModelParams::new();
        block.init(&mut p, &mut rng(0));
        let keys: Vec<String> = p.keys().map(String::from).collect();
        for k in keys {
            p.tensor_mut(&k).unwrap().data_mut().fill(0.0);
        }
        let mut s = Session::new(&p, Mode::Eval, rng(1));
        let x = s.input(random_tensor(&[1, 2, 3, 3, 3], 1.0, &mut rng(2)), false);
        let h0 = s.input(random_tensor(&[1, 2, 3, 3, 3], 1.0, &mut rng(3)), false);
        let c_prev = random_tensor(&[1, 2, 3, 3, 3], 2.0, &mut rng(4));
        let c0 = s.input(c_prev.clone(), false);
        let (h, c) = block.cell(&mut s, x, Some((h0, c0))).unwrap();
        for ((&hv, &cv), &cp) in s
            .tape
            .value(h)
            .data()
            .iter()
            .zip(s.tape.value(c).data())
            .zip(c_prev.data())
        {
            assert!((cv - 0.5 * cp).abs() < 1e-12);
            assert!((hv - 0.5 * (0.5 * cp).tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_forget_gate_retains_cell() {
        let block = ssa(2, 2, 1);
        let mut p = ModelParams::new();
        block.init(&mut p, &mut rng(0));
        p.tensor_mut("ssa.b_f").unwrap().data_mut().fill(50.0);
        let mut s = Session::new(&p, Mode::Eval, rng(1));
        let x = s.input(random_tensor(&[1, 2, 2, 2, 2], 0.5, &mut rng(2)), false);
        let h0 = s.input(random_tensor(&[1, 2, 2, 2, 2], 0.5, &mut rng(3)), false);
        let c0 = s.input(random_tensor(&[1, 2, 2, 2, 2], 1.0, &mut rng(4)), false);
        let (_, c) = block.cell(&mut s, x, Some((h0, c0))).unwrap();
        // C_t - C_prev should equal I ⊙ tanh(candidate); recompute that part directly
        let i_pre = block.gate_pre(&mut s, "i", x, Some((h0, c0)), true).unwrap();
        let c_pre = block.gate_pre(&mut s, "c", x, Some((h0, c0)), false).unwrap();
        let i = s.tape.sigmoid(i_pre);
        let t = s.tape.tanh(c_pre);
        let w = s.tape.mul(i, t).unwrap();
        for ((&cn, &cp), &wr) in s
            .tape
            .value(c)
            .data()
            .iter()
            .zip(s.tape.value(c0).data())
            .zip(s.tape.value(w).data())
        {
            assert!((cn - (cp + wr)).abs() < 1e-12);
        }
    }

    #[test]
    fn ssa_preserves_shape_and_zero() {
        let block = ssa(4, 2, 2);
        let mut p = ModelParams::new();
        block.init(&mut p, &mut rng(0));
        let mut s = Session::new(&p, Mode::Eval, rng(1));
        let x = s.input(random_tensor(&[3, 4, 2, 2, 2], 1.0, &mut rng(2)), false);
        let y = block.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.shape(y), s.tape.shape(x));
        let keys: Vec<String> = p.keys().map(String::from).collect();
        for k in keys {
            p.tensor_mut(&k).unwrap().data_mut().fill(0.0);
        }
        let mut s = Session::new(&p, Mode::Eval, rng(1));
        let x = s.input(random_tensor(&[3, 4, 2, 2, 2], 1.0, &mut rng(2)), false);
        let y = block.forward(&mut s, x).unwrap();
        assert!(s.tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn squeeze_of_constant_map() {
        let sq = VolumeSqueeze {
            channels: 3,
            out_dim: 2,
        };
        let mut p = ModelParams::new();
        sq.init(&mut p, &mut rng(0));
        let mut s = Session::new(&p, Mode::Eval, rng(1));
        let x = s.input(Tensor::full(&[2, 3, 2, 2, 2], 0.75), false);
        let pooled = s.tape.global_avg_pool3d(x).unwrap();
        assert!(s.tape.value(pooled).data().iter().all(|&v| v == 0.75));
        let y = sq.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.shape(y), &[2, 2]);
    }
}
