//! Fusion transformer: scaled dot-product attention, cross-modal multi-head attention,
//! the TransFusor stages, the linear fusion baselines, the classification head, and the loss.

use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::params::{init_dense, init_layer_norm, init_projection, ModelParams, Session};
use crate::tape::{Tape, Var};

/// Loss clamp: probabilities are kept inside `[ε, 1-ε]`.
pub const BCE_EPS: f64 = 1e-12;

/// `Softmax(Q Kᵀ / √d_k) V` for `[B, n, d_k]` inputs. Returns the output and the
/// `[B, n, n]` attention weights.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
        return Err(dim_err("scaled_dot_attention", &qs, &ks));
    }
    let dk = qs[2];
    if dk == 0 {
        return Err(Error::Parameter("attention key width d_k must be positive".into()));
    }
    if ks[2] != dk || qs[0] != ks[0] || ks[..2] != vs[..2] {
        return Err(dim_err("scaled_dot_attention", &qs, &ks));
    }
    let kt = tape.transpose_last2(k)?;
    let scores = tape.bmm(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    let weights = tape.softmax_last(scaled)?;
    let out = tape.bmm(weights, v)?;
    Ok((out, weights))
}

/// Cross-modal multi-head attention, `(h_1 ⊕ … ⊕ h_h) W^o` with
/// `h_i = SA(Q W^Q_i, K W^K_i, V W^V_i)`.
#[derive(Debug, Clone)]
pub struct CrossModalMha {
    pub prefix: String,
    pub model_dim: usize,
    pub heads: usize,
}

impl CrossModalMha {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut ChaCha8Rng) {
        let (dm, dk) = (self.model_dim, self.head_dim());
        for i in 0..self.heads {
            for m in ["WQ", "WK", "WV"] {
                init_projection(params, &format!("{}.{m}{i}", self.prefix), dm, dk, rng);
            }
        }
        init_projection(params, &format!("{}.Wo", self.prefix), self.heads * dk, dm, rng);
    }

    /// Inputs are `[B, n, model_dim]`; returns the output and each head's attention weights.
    pub fn forward(&self, s: &mut Session, q: Var, k: Var, v: Var) -> Result<(Var, Vec<Var>)> {
        for x in [q, k, v] {
            let sh = s.tape.shape(x);
            if sh.len() != 3 || sh[2] != self.model_dim {
                return Err(dim_err("cross_modal_mha", sh, &[0, 0, self.model_dim]));
            }
        }
        let p = &self.prefix;
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let wq = s.param(&format!("{p}.WQ{i}"))?;
            let wk = s.param(&format!("{p}.WK{i}"))?;
            let wv = s.param(&format!("{p}.WV{i}"))?;
            let qi = s.tape.matmul(q, wq)?;
            let ki = s.tape.matmul(k, wk)?;
            let vi = s.tape.matmul(v, wv)?;
            let (h, w) = scaled_dot_attention(&mut s.tape, qi, ki, vi)?;
            heads.push(h);
            weights.push(w);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            s.tape.concat_last(&heads)?
        };
        let wo = s.param(&format!("{p}.Wo"))?;
        Ok((s.tape.matmul(cat, wo)?, weights))
    }
}

/// One TransFusor stage: `V ⊙ LayerNorm(V + x-MHA(Linear_q(A), Linear_k(A), V))`, where `A`
/// is the query-side modality and `V` the value-side modality.
///
/// Embeddings `[B, d']` are split into `tokens` chunks of width `d'/tokens` before attention.
#[derive(Debug, Clone)]
pub struct TransFusor {
    pub prefix: String,
    pub embed_dim: usize,
    pub tokens: usize,
    pub mha: CrossModalMha,
}

impl TransFusor {
    pub fn new(prefix: &str, embed_dim: usize, tokens: usize, heads: usize) -> Result<Self> {
        if tokens == 0 || embed_dim % tokens != 0 {
            return Err(Error::Config(format!(
                "embedding width {embed_dim} is not divisible into {tokens} tokens"
            )));
        }
        let model_dim = embed_dim / tokens;
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::Config(format!(
                "token width {model_dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            prefix: prefix.to_string(),
            embed_dim,
            tokens,
            mha: CrossModalMha {
                prefix: format!("{prefix}.mha"),
                model_dim,
                heads,
            },
        })
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut ChaCha8Rng) {
        let d = self.embed_dim;
        init_dense(params, &format!("{}.q", self.prefix), d, d, rng);
        init_dense(params, &format!("{}.k", self.prefix), d, d, rng);
        self.mha.init(params, rng);
        init_layer_norm(params, &format!("{}.ln", self.prefix), d);
    }

    pub fn forward(&self, s: &mut Session, query_side: Var, value_side: Var) -> Result<Var> {
        let d = self.embed_dim;
        let (qs, vs) = (s.tape.shape(query_side).to_vec(), s.tape.shape(value_side).to_vec());
        if qs.len() != 2 || qs[1] != d || vs != qs {
            return Err(dim_err("transfusor", &qs, &vs));
        }
        let b = qs[0];
        let tok = [b, self.tokens, self.mha.model_dim];
        let q = s.dense(&format!("{}.q", self.prefix), query_side)?;
        let k = s.dense(&format!("{}.k", self.prefix), query_side)?;
        let q = s.tape.reshape(q, &tok)?;
        let k = s.tape.reshape(k, &tok)?;
        let v = s.tape.reshape(value_side, &tok)?;
        let (att, weights) = self.mha.forward(s, q, k, v)?;
        if s.is_explaining() {
            for (i, w) in weights.iter().enumerate() {
                let t = s.tape.value(*w).clone();
                s.capture(format!("{}.attn.head{i}", self.prefix), t);
            }
        }
        let att = s.tape.reshape(att, &[b, d])?;
        let resid = s.tape.add(value_side, att)?;
        let normed = s.layer_norm(&format!("{}.ln", self.prefix), resid)?;
        let fused = s.tape.mul(value_side, normed)?;
        if s.is_explaining() {
            let t = s.tape.value(fused).clone();
            s.capture(format!("{}.fused", self.prefix), t);
        }
        Ok(fused)
    }
}

/// Attentional linear fusion: `g ⊙ A + (1 - g) ⊙ B` with `g = σ([A ⊕ B] W + b)` per dimension.
#[derive(Debug, Clone)]
pub struct GatedFusion {
    pub prefix: String,
    pub embed_dim: usize,
}

impl GatedFusion {
    pub fn init(&self, params: &mut ModelParams, rng: &mut ChaCha8Rng) {
        let d = self.embed_dim;
        init_dense(params, &format!("{}.gate", self.prefix), 2 * d, d, rng);
    }

    pub fn forward(&self, s: &mut Session, a: Var, b: Var) -> Result<Var> {
        let cat = s.tape.concat_last(&[a, b])?;
        let pre = s.dense(&format!("{}.gate", self.prefix), cat)?;
        let g = s.tape.sigmoid(pre);
        let diff = s.tape.sub(a, b)?;
        let mix = s.tape.mul(g, diff)?;
        s.tape.add(b, mix)
    }
}

/// Feed-forward head: dense → GELU → LayerNorm → Dropout → dense → GELU → dense(1).
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub input_dim: usize,
    pub hidden: [usize; 2],
}

impl ClassifierHead {
    pub fn init(&self, params: &mut ModelParams, rng: &mut ChaCha8Rng) {
        let [h1, h2] = self.hidden;
        init_dense(params, "head.fc1", self.input_dim, h1, rng);
        init_layer_norm(params, "head.ln", h1);
        init_dense(params, "head.fc2", h1, h2, rng);
        init_dense(params, "head.out", h2, 1, rng);
    }

    /// Returns the `[B]` logit (the SZ class score); probabilities are its sigmoid.
    pub fn logits(&self, s: &mut Session, x: Var, dropout: f64) -> Result<Var> {
        let sh = s.tape.shape(x).to_vec();
        if sh.len() != 2 || sh[1] != self.input_dim {
            return Err(dim_err("classify", &sh, &[0, self.input_dim]));
        }
        let a = s.dense("head.fc1", x)?;
        let a = s.tape.gelu(a);
        let a = s.layer_norm("head.ln", a)?;
        let a = s.dropout(a, dropout)?;
        let b = s.dense("head.fc2", a)?;
        let b = s.tape.gelu(b);
        let z = s.dense("head.out", b)?;
        s.tape.reshape(z, &[sh[0]])
    }

    /// `ŷ = σ(logit) ∈ (0, 1)`.
    pub fn classify(&self, s: &mut Session, x: Var, dropout: f64) -> Result<Var> {
        let z = self.logits(s, x, dropout)?;
        Ok(s.tape.sigmoid(z))
    }
}

/// Mean binary cross-entropy with the `[ε, 1-ε]` clamp.
pub fn bce_loss(tape: &mut Tape, probs: Var, labels: &[f64]) -> Result<Var> {
    tape.bce(probs, labels, BCE_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use crate::params::ParamKind;
    use crate::tape::Mode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_key_returns_value() {
        let mut tape = Tape::new();
        let q = tape.constant(random_tensor(&[2, 1, 3], 1.0, &mut rng(0)));
        let k = tape.constant(random_tensor(&[2, 1, 3], 1.0, &mut rng(1)));
        let v = tape.constant(random_tensor(&[2, 1, 3], 1.0, &mut rng(2)));
        let (out, w) = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        assert_eq!(tape.value(out), tape.value(v));
        assert!(tape.value(w).data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn zero_query_averages_values() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[1, 3, 2]));
        let k = tape.constant(random_tensor(&[1, 3, 2], 1.0, &mut rng(1)));
        let vt = random_tensor(&[1, 3, 2], 1.0, &mut rng(2));
        let v = tape.constant(vt.clone());
        let (out, w) = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        assert!(tape.value(w).data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let d = vt.data();
        let mean = [(d[0] + d[2] + d[4]) / 3.0, (d[1] + d[3] + d[5]) / 3.0];
        for row in tape.value(out).data().chunks(2) {
            assert!((row[0] - mean[0]).abs() < 1e-15 && (row[1] - mean[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn two_by_two_against_scalar_arithmetic() {
        // Q = K = c·I, V arbitrary; logits are c²/√2 on the diagonal and 0 elsewhere.
        let c = 1.7;
        let mut tape = Tape::new();
        let qk = Tensor::new(vec![1, 2, 2], vec![c, 0.0, 0.0, c]).unwrap();
        let q = tape.constant(qk.clone());
        let k = tape.constant(qk);
        let v = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let (out, w) = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        let e = (c * c / 2f64.sqrt()).exp();
        let hi = e / (e + 1.0);
        let lo = 1.0 / (e + 1.0);
        let expect_w = [hi, lo, lo, hi];
        for (a, b) in tape.value(w).data().iter().zip(expect_w) {
            assert!((a - b).abs() < 1e-15);
        }
        let expect_out = [hi + 3.0 * lo, 2.0 * hi + 4.0 * lo, lo + 3.0 * hi, 2.0 * lo + 4.0 * hi];
        for (a, b) in tape.value(out).data().iter().zip(expect_out) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn single_head_identity_projection_equals_attention() {
        let mha = CrossModalMha {
            prefix: "x".into(),
            model_dim: 4,
            heads: 1,
        };
        let mut p = ModelParams::new();
        for key in ["x.WQ0", "x.WK0", "x.WV0", "x.Wo"] {
            p.insert(key, ParamKind::Weight, Tensor::eye(4));
        }
        let mut s = Session::new(&p, Mode::Eval, rng(0));
        let q = s.input(random_tensor(&[2, 3, 4], 1.0, &mut rng(1)), false);
        let k = s.input(random_tensor(&[2, 3, 4], 1.0, &mut rng(2)), false);
        let v = s.input(random_tensor(&[2, 3, 4], 1.0, &mut rng(3)), false);
        let (out, _) = mha.forward(&mut s, q, k, v).unwrap();
        let (sa, _) = scaled_dot_attention(&mut s.tape, q, k, v).unwrap();
        for (a, b) in s.tape.value(out).data().iter().zip(s.tape.value(sa).data()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn two_head_output_shape() {
        let mha = CrossModalMha {
            prefix: "x".into(),
            model_dim: 8,
            heads: 2,
        };
        let mut p = ModelParams::new();
        mha.init(&mut p, &mut rng(0));
        let mut s = Session::new(&p, Mode::Eval, rng(0));
        let q = s.input(random_tensor(&[3, 2, 8], 1.0, &mut rng(1)), false);
        let (out, w) = mha.forward(&mut s, q, q, q).unwrap();
        assert_eq!(s.tape.shape(out), &[3, 2, 8]);
        assert_eq!(w.len(), 2);
        for wv in w {
            for row in s.tape.value(wv).data().chunks(2) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transfusor_absorbs_zero_value_side() {
        for tokens in [1, 4] {
            let tf = TransFusor::new("gc", 8, tokens, 2).unwrap();
            let mut p = ModelParams::new();
            tf.init(&mut p, &mut rng(0));
            let mut s = Session::new(&p, Mode::Eval, rng(0));
            let g = s.input(random_tensor(&[2, 8], 1.0, &mut rng(1)), false);
            let c = s.input(Tensor::zeros(&[2, 8]), false);
            let out = tf.forward(&mut s, g, c).unwrap();
            assert!(s.tape.value(out).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_token_ignores_query_side() {
        let tf = TransFusor::new("gc", 8, 1, 2).unwrap();
        let mut p = ModelParams::new();
        tf.init(&mut p, &mut rng(0));
        let cv = random_tensor(&[2, 8], 1.0, &mut rng(2));
        let run = |g_seed: u64| {
            let mut s = Session::new(&p, Mode::Eval, rng(0)).explaining();
            let g = s.input(random_tensor(&[2, 8], 1.0, &mut rng(g_seed)), false);
            let c = s.input(cv.clone(), false);
            let out = tf.forward(&mut s, g, c).unwrap();
            let w = s.captures()["gc.attn.head0"].clone();
            (s.tape.value(out).clone(), w)
        };
        let (a, wa) = run(10);
        let (b, _) = run(11);
        assert!(wa.data().iter().all(|&x| x == 1.0));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transfusor_rejects_bad_token_split() {
        assert!(TransFusor::new("gc", 10, 4, 2).is_err());
        assert!(TransFusor::new("gc", 8, 4, 3).is_err());
    }

    #[test]
    fn head_with_zero_output_layer_is_half() {
        let head = ClassifierHead {
            input_dim: 5,
            hidden: [6, 4],
        };
        let mut p = ModelParams::new();
        head.init(&mut p, &mut rng(0));
        p.zero_prefix("head.out");
        let mut s = Session::new(&p, Mode::Eval, rng(0));
        let x = s.input(random_tensor(&[3, 5], 2.0, &mut rng(1)), false);
        let y = head.classify(&mut s, x, 0.3).unwrap();
        assert!(s.tape.value(y).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn head_outputs_are_probabilities() {
        let head = ClassifierHead {
            input_dim: 5,
            hidden: [6, 4],
        };
        let mut p = ModelParams::new();
        head.init(&mut p, &mut rng(0));
        let mut s = Session::new(&p, Mode::Eval, rng(0));
        let x = s.input(random_tensor(&[1000, 5], 5.0, &mut rng(1)), false);
        let y = head.classify(&mut s, x, 0.3).unwrap();
        assert!(s.tape.value(y).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
