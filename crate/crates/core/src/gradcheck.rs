//! Central finite-difference gradient checking.
//!
//! Derivatives are estimated with the five-point stencil
//! `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, whose truncation error is `O(h⁴)`.
//! Layer norms over low-variance rows have large higher derivatives, and the three-point
//! rule's `O(h²)` error is visible there at a 1e-4 relative tolerance.
//!
//! The numeric side only ever evaluates forward values, so it is independent of the
//! adjoint rules it is used to verify.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{Dropouts, Modality, Model, ModelConfig};
use crate::params::{ModelParams, Session};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct FdOptions {
    /// Perturbation half-width.
    pub step: f64,
    /// Denominator floor for the relative error, so vanishing gradients compare absolutely.
    pub floor: f64,
    /// Check at most this many randomly chosen entries per tensor (`None` checks all).
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            floor: 1e-6,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// `(tensor index, flat entry)` of the worst comparison.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic[i]` against central differences of `eval` around `point`.
pub fn compare<F>(point: &[Tensor], analytic: &[Tensor], mut eval: F, opts: &FdOptions) -> Result<FdReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = point.to_vec();
    let mut report = FdReport::default();
    for (ti, t) in point.iter().enumerate() {
        let n = t.numel();
        let entries: Vec<usize> = match opts.max_entries {
            Some(m) if m < n => {
                let mut v = sample(&mut rng, n, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for j in entries {
            let orig = t.data()[j];
            let h = opts.step;
            let mut at = |x: f64, work: &mut Vec<Tensor>| {
                work[ti].data_mut()[j] = x;
                eval(work)
            };
            let d1 = at(orig + h, &mut work)? - at(orig - h, &mut work)?;
            let d2 = at(orig + 2.0 * h, &mut work)? - at(orig - 2.0 * h, &mut work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (8.0 * d1 - d2) / (12.0 * h);
            let a = analytic[ti].data()[j];
            let e = rel_err(a, numeric, opts.floor);
            report.checked += 1;
            if report.worst.is_none() || e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((ti, j));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

/// Gradient check of a scalar function built on a [`Tape`] from the given inputs.
pub fn check_tape_fn<F>(inputs: &[Tensor], f: F, opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf requires grad").clone())
        .collect();
    compare(
        inputs,
        &analytic,
        |pt| {
            let mut t = Tape::new();
            let vs: Vec<Var> = pt.iter().map(|x| t.leaf(x.clone(), false)).collect();
            let l = f(&mut t, &vs)?;
            t.value(l).item()
        },
        opts,
    )
}

/// Random tensor with entries uniform in `[-scale, scale)`.
pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .expect("shape matches data")
}

fn weighted_sum(s: &mut Session, y: Var) -> Result<Var> {
    let w = random_tensor(s.tape.shape(y), 1.0, &mut ChaCha8Rng::seed_from_u64(99));
    let w = s.tape.constant(w);
    let p = s.tape.mul(y, w)?;
    Ok(s.tape.sum(p))
}

/// Gradient check of a session-built function with respect to every parameter in `params`
/// and every input. Non-scalar outputs are reduced by a fixed random weighting. Runs in
/// train mode with a fixed dropout stream, so masks are identical across evaluations.
pub fn check_session<F>(
    params: &ModelParams,
    inputs: &[Tensor],
    build: F,
    max_entries: usize,
) -> Result<FdReport>
where
    F: Fn(&mut Session, &[Var]) -> Result<Var>,
{
    let keys: Vec<String> = params.keys().map(str::to_string).collect();
    let run = |p: &ModelParams, xs: &[Tensor], grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut s = Session::new(p, Mode::Train, ChaCha8Rng::seed_from_u64(7));
        let vars: Vec<Var> = xs.iter().map(|x| s.input(x.clone(), grad)).collect();
        let y = build(&mut s, &vars)?;
        let loss = if s.tape.shape(y).is_empty() {
            y
        } else {
            weighted_sum(&mut s, y)?
        };
        let value = s.tape.value(loss).item()?;
        if !grad {
            return Ok((value, Vec::new()));
        }
        let grads = s.backward(loss)?;
        let mut out = Vec::with_capacity(keys.len() + vars.len());
        for k in &keys {
            out.push(match grads.get(k) {
                Some(g) => g.clone(),
                None => Tensor::zeros(p.tensor(k)?.shape()),
            });
        }
        for &v in &vars {
            out.push(match s.tape.grad(v) {
                Some(g) => g.clone(),
                None => Tensor::zeros(s.tape.shape(v)),
            });
        }
        Ok((value, out))
    };
    let (_, analytic) = run(params, inputs, true)?;
    let mut point = Vec::with_capacity(analytic.len());
    for k in &keys {
        point.push(params.tensor(k)?.clone());
    }
    point.extend(inputs.iter().cloned());
    let opts = FdOptions {
        max_entries: Some(max_entries),
        ..FdOptions::default()
    };
    let np = keys.len();
    compare(
        &point,
        &analytic,
        |pt| {
            let mut p = params.clone();
            for (k, t) in keys.iter().zip(&pt[..np]) {
                *p.tensor_mut(k)? = t.clone();
            }
            Ok(run(&p, &pt[np..], false)?.0)
        },
        &opts,
    )
}

/// End-to-end check of the loss for a batch of two subjects, over every parameter tensor
/// (up to `max_entries` sampled entries each) and every input modality.
pub fn check_model(cfg: &ModelConfig, seed: u64, max_entries: usize) -> Result<FdReport> {
    let model = Model::new(cfg.clone())?;
    let mut p = model.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    if cfg.has(Modality::Volume) {
        // peepholes start at zero; perturb them so their paths carry gradient
        for g in ["i", "f", "o"] {
            let t = p.tensor_mut(&format!("ssa.W_c{g}"))?;
            *t = random_tensor(&t.shape().to_vec(), 0.5, &mut rng);
        }
    }
    let [d, h, w] = cfg.volume_extents;
    let inputs = vec![
        random_tensor(&[2, cfg.snp_dim], 1.0, &mut rng),
        random_tensor(&[2, cfg.fnc_dim], 1.0, &mut rng),
        random_tensor(&[2, 1, d, h, w], 1.0, &mut rng),
    ];
    let labels = [1.0, 0.0];
    let drop = Dropouts {
        p1: 0.5,
        p2: 0.3,
        p3: 0.3,
        head: cfg.head_dropout,
    };
    check_session(
        &p,
        &inputs,
        |s, v| {
            let pick = |m: Modality, i: usize| cfg.has(m).then(|| v[i]);
            let f = model.forward_vars(
                s,
                pick(Modality::Genomic, 0),
                pick(Modality::Connectome, 1),
                pick(Modality::Volume, 2),
                drop,
            )?;
            model.loss(s, &f, &labels)
        },
        max_entries,
    )
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync>;

/// One differentiable tape op on random inputs of fixed shapes.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub f: OpFn,
}

impl OpCase {
    fn new(
        name: &'static str,
        shapes: &[&[usize]],
        f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            f: Box::new(f),
        }
    }

    /// Worst report over `seeds` random draws (entries uniform in ±1.5), each output
    /// reduced by a seeded random weighting.
    pub fn check(&self, seeds: u64, step: f64) -> Result<FdReport> {
        let mut worst: Option<FdReport> = None;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor> = self
                .shapes
                .iter()
                .map(|s| random_tensor(s, 1.5, &mut rng))
                .collect();
            let opts = FdOptions {
                step,
                seed,
                ..FdOptions::default()
            };
            let rep = check_tape_fn(
                &inputs,
                |t, v| {
                    let y = (self.f)(t, v)?;
                    let mut wr = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
                    let w = t.constant(random_tensor(t.shape(y), 1.0, &mut wr));
                    let p = t.mul(y, w)?;
                    Ok(t.sum(p))
                },
                &opts,
            )?;
            if worst.as_ref().is_none_or(|w| rep.max_rel_err > w.max_rel_err) {
                worst = Some(rep);
            }
        }
        Ok(worst.unwrap_or_default())
    }
}

/// Every differentiable tape op, on small shapes.
pub fn op_catalogue() -> Vec<OpCase> {
    vec![
        OpCase::new("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1])),
        OpCase::new("matmul_batched", &[&[2, 3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1])),
        OpCase::new("bmm", &[&[2, 3, 4], &[2, 4, 3]], |t, v| t.bmm(v[0], v[1])),
        OpCase::new("transpose_last2", &[&[2, 3, 4]], |t, v| t.transpose_last2(v[0])),
        OpCase::new("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1])),
        OpCase::new("sub", &[&[3, 4], &[3, 4]], |t, v| t.sub(v[0], v[1])),
        OpCase::new("mul", &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1])),
        OpCase::new("add_suffix", &[&[2, 3, 4], &[4]], |t, v| t.add_suffix(v[0], v[1])),
        OpCase::new("mul_suffix", &[&[2, 3, 4], &[3, 4]], |t, v| t.mul_suffix(v[0], v[1])),
        OpCase::new("scale", &[&[5]], |t, v| Ok(t.scale(v[0], -2.5))),
        OpCase::new("add_scalar", &[&[5]], |t, v| Ok(t.add_scalar(v[0], 0.7))),
        OpCase::new("mul_const", &[&[2, 3]], |t, v| {
            let c = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.0, 3.0, -0.25])?;
            t.mul_const(v[0], &c)
        }),
        OpCase::new("gelu", &[&[4, 6]], |t, v| Ok(t.gelu(v[0]))),
        OpCase::new("tanh", &[&[4, 6]], |t, v| Ok(t.tanh(v[0]))),
        OpCase::new("sigmoid", &[&[4, 6]], |t, v| Ok(t.sigmoid(v[0]))),
        OpCase::new("abs", &[&[4, 6]], |t, v| Ok(t.abs(v[0]))),
        OpCase::new("softmax_last", &[&[3, 5]], |t, v| t.softmax_last(v[0])),
        OpCase::new("layer_norm", &[&[4, 8], &[8], &[8]], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        OpCase::new("dropout", &[&[4, 6]], |t, v| {
            t.dropout(v[0], 0.3, Mode::Train, &mut ChaCha8Rng::seed_from_u64(3))
        }),
        OpCase::new("concat_last", &[&[2, 3], &[2, 2], &[2, 1]], |t, v| {
            t.concat_last(&[v[0], v[1], v[2]])
        }),
        OpCase::new("slice_last", &[&[3, 6]], |t, v| t.slice_last(v[0], 2, 3)),
        OpCase::new("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 2, 2])),
        OpCase::new("conv3d", &[&[2, 2, 4, 4, 4], &[3, 2, 3, 3, 3], &[3]], |t, v| {
            t.conv3d(v[0], v[1], v[2])
        }),
        OpCase::new("avg_pool3d", &[&[2, 2, 4, 2, 4]], |t, v| t.avg_pool3d(v[0])),
        OpCase::new("global_avg_pool3d", &[&[2, 3, 2, 2, 2]], |t, v| {
            t.global_avg_pool3d(v[0])
        }),
        OpCase::new("sum", &[&[3, 3]], |t, v| Ok(t.sum(v[0]))),
        OpCase::new("mean", &[&[3, 3]], |t, v| Ok(t.mean(v[0]))),
        OpCase::new("bce", &[&[4]], |t, v| {
            let p = t.sigmoid(v[0]);
            t.bce(p, &[1.0, 0.0, 1.0, 0.0], 1e-12)
        }),
    ]
}
