//! Saliency for a trained model: GradCAM++-style volume maps over the SSA output, and
//! gradient×input scores for connections and SNPs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{connection_pair, Cohort};
use crate::error::{Error, Result};
use crate::model::{Dropouts, Modality, Model};
use crate::params::{ModelParams, Session};
use crate::tape::Mode;
use crate::tensor::Tensor;

const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetClass {
    /// The SZ logit.
    Sz,
    /// The complementary score, `-logit`.
    Hc,
}

impl TargetClass {
    fn sign(self) -> f64 {
        match self {
            TargetClass::Sz => 1.0,
            TargetClass::Hc => -1.0,
        }
    }
}

/// Per-subject gradients of the class score, plus the tensors they were taken at.
struct Pass {
    genomic: Option<(Tensor, Tensor)>,
    connectome: Option<(Tensor, Tensor)>,
    /// SSA output and its gradient.
    ssa: Option<(Tensor, Tensor)>,
    /// Per-subject mean over heads and queries of the largest final-stage attention weight.
    attention: Option<Vec<f64>>,
}

fn gradient_pass(
    model: &Model,
    params: &ModelParams,
    cohort: &Cohort,
    indices: &[usize],
    target: TargetClass,
) -> Result<Pass> {
    let batch = cohort.batch(indices, &model.config().modalities)?;
    let mut s = Session::new(params, Mode::Eval, ChaCha8Rng::seed_from_u64(0))
        .frozen()
        .explaining();
    let fwd = model.forward(&mut s, &batch, Dropouts::NONE, true)?;
    let total = s.tape.sum(fwd.logits);
    let score = s.tape.scale(total, target.sign());
    s.tape.backward(score)?;
    let pair = |s: &Session, v: Option<crate::tape::Var>| {
        v.map(|v| {
            let g = s.tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(s.tape.shape(v)));
            (s.tape.value(v).clone(), g)
        })
    };
    let attention = final_stage_attention(&s, model, indices.len());
    Ok(Pass {
        genomic: pair(&s, fwd.genomic),
        connectome: pair(&s, fwd.connectome),
        ssa: pair(&s, fwd.ssa_out),
        attention,
    })
}

fn final_stage_attention(s: &Session, model: &Model, b: usize) -> Option<Vec<f64>> {
    if model.config().fusion != crate::model::FusionKind::Trans
        || !model.config().has(Modality::Volume)
    {
        return None;
    }
    let stage: String = model
        .config()
        .modalities
        .iter()
        .map(|m| m.letter().to_ascii_lowercase())
        .collect();
    let heads: Vec<&Tensor> = (0..model.config().heads)
        .filter_map(|i| s.captures().get(&format!("{stage}.attn.head{i}")))
        .collect();
    if heads.is_empty() {
        return None;
    }
    let n = model.config().tokens;
    let mut out = vec![0.0; b];
    for w in &heads {
        for (bi, o) in out.iter_mut().enumerate() {
            let block = &w.data()[bi * n * n..(bi + 1) * n * n];
            let mean_max: f64 = block
                .chunks(n)
                .map(|row| row.iter().cloned().fold(f64::MIN, f64::max))
                .sum::<f64>()
                / n as f64;
            *o += mean_max / heads.len() as f64;
        }
    }
    Some(out)
}

/// `|∂score/∂x · x|` per subject, averaged over subjects: `[width]`.
fn mean_grad_times_input(pairs: &[(Tensor, Tensor)]) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for (x, g) in pairs {
        let width = x.shape()[1];
        if acc.is_empty() {
            acc = vec![0.0; width];
        }
        for (row_x, row_g) in x.data().chunks(width).zip(g.data().chunks(width)) {
            for ((a, xv), gv) in acc.iter_mut().zip(row_x).zip(row_g) {
                *a += (xv * gv).abs();
            }
            count += 1;
        }
    }
    if count > 0 {
        acc.iter_mut().for_each(|a| *a /= count as f64);
    }
    acc
}

fn passes(
    model: &Model,
    params: &ModelParams,
    cohort: &Cohort,
    indices: &[usize],
    target: TargetClass,
) -> Result<Vec<Pass>> {
    model.check_params(params)?;
    indices
        .chunks(CHUNK)
        .map(|c| gradient_pass(model, params, cohort, c, target))
        .collect()
}

/// Indices of the `k` largest positive scores, descending; ties broken by index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > 0.0).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// 1-based descending rank of every entry (ties broken by index).
pub fn ranks(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut r = vec![0; scores.len()];
    for (pos, i) in idx.into_iter().enumerate() {
        r[i] = pos + 1;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    TopK(usize),
    Threshold(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedConnection {
    pub index: usize,
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectionScores {
    pub scores: Vec<f64>,
    pub selected: Vec<SelectedConnection>,
}

/// Mean gradient×input per connection over `indices`, with a top-k or threshold selection.
pub fn connectome_top_connections(
    model: &Model,
    params: &ModelParams,
    cohort: &Cohort,
    indices: &[usize],
    selection: Selection,
    target: TargetClass,
) -> Result<ConnectionScores> {
    if !model.config().has(Modality::Connectome) {
        return Err(Error::Config("model has no connectome pathway".into()));
    }
    let ps = passes(model, params, cohort, indices, target)?;
    let pairs: Vec<(Tensor, Tensor)> = ps.into_iter().filter_map(|p| p.connectome).collect();
    let scores = mean_grad_times_input(&pairs);
    Ok(select_connections(scores, selection))
}

pub fn select_connections(scores: Vec<f64>, selection: Selection) -> ConnectionScores {
    let chosen = match selection {
        Selection::TopK(k) => top_k(&scores, k),
        Selection::Threshold(t) => {
            let all = top_k(&scores, scores.len());
            all.into_iter().filter(|&i| scores[i] >= t).collect()
        }
    };
    let selected = chosen
        .into_iter()
        .map(|index| {
            let (row, col) = connection_pair(index);
            SelectedConnection {
                index,
                row,
                col,
                score: scores[index],
            }
        })
        .collect();
    ConnectionScores { scores, selected }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnpRanking {
    /// One score per SNP (one-hot group sums).
    pub scores: Vec<f64>,
    pub top: Vec<usize>,
}

/// Per-SNP score: the one-hot group sum of mean gradient×input.
pub fn snp_ranking(
    model: &Model,
    params: &ModelParams,
    cohort: &Cohort,
    indices: &[usize],
    top: usize,
    target: TargetClass,
) -> Result<SnpRanking> {
    if !model.config().has(Modality::Genomic) {
        return Err(Error::Config("model has no genomic pathway".into()));
    }
    let categories = cohort.spec.snp_categories.max(1);
    let ps = passes(model, params, cohort, indices, target)?;
    let pairs: Vec<(Tensor, Tensor)> = ps.into_iter().filter_map(|p| p.genomic).collect();
    let flat = mean_grad_times_input(&pairs);
    let scores: Vec<f64> = flat.chunks(categories).map(|g| g.iter().sum()).collect();
    let top = top_k(&scores, top);
    Ok(SnpRanking { scores, top })
}

/// GradCAM++ weighting of one subject's `[C, d, h, w]` feature map `a` with gradient `g`.
pub fn grad_cam_pp(a: &[f64], g: &[f64], channels: usize) -> Vec<f64> {
    let n = a.len() / channels;
    let mut cam = vec![0.0; n];
    for c in 0..channels {
        let (ac, gc) = (&a[c * n..(c + 1) * n], &g[c * n..(c + 1) * n]);
        let sum_ag3: f64 = ac.iter().zip(gc).map(|(x, d)| x * d * d * d).sum();
        let mut weight = 0.0;
        for &d in gc {
            let denom = 2.0 * d * d + sum_ag3;
            let alpha = if denom != 0.0 { d * d / denom } else { 0.0 };
            weight += alpha * d.max(0.0);
        }
        for (o, &x) in cam.iter_mut().zip(ac) {
            *o += weight * x;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    cam
}

/// Trilinear resampling with half-voxel alignment and edge clamping.
pub fn upsample_trilinear(src: &[f64], from: [usize; 3], to: [usize; 3]) -> Vec<f64> {
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
                    .clamp(0.0, (n_in - 1) as f64);
                let i0 = x.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, x - i0 as f64)
            })
            .collect()
    };
    let (az, ay, ax) = (axis(from[0], to[0]), axis(from[1], to[1]), axis(from[2], to[2]));
    let at = |z: usize, y: usize, x: usize| src[(z * from[1] + y) * from[2] + x];
    let mut out = Vec::with_capacity(to.iter().product());
    for &(z0, z1, tz) in &az {
        for &(y0, y1, ty) in &ay {
            for &(x0, x1, tx) in &ax {
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), tx);
                let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), tx);
                let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), tx);
                let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), tx);
                out.push(lerp(lerp(c00, c01, ty), lerp(c10, c11, ty), tz));
            }
        }
    }
    out
}

fn max_normalize(v: &mut [f64]) {
    let m = v.iter().cloned().fold(0.0, f64::max);
    if m > 0.0 {
        v.iter_mut().for_each(|x| *x /= m);
    }
}

/// One max-normalized `[D, H, W]` map per subject, at input resolution.
pub fn volume_attention_maps(
    model: &Model,
    params: &ModelParams,
    cohort: &Cohort,
    indices: &[usize],
    target: TargetClass,
) -> Result<Vec<Tensor>> {
    if !model.config().has(Modality::Volume) {
        return Err(Error::Config("model has no volume pathway".into()));
    }
    let extents = model.config().volume_extents;
    let mut maps = Vec::with_capacity(indices.len());
    for p in passes(model, params, cohort, indices, target)? {
        let (a, g) = p.ssa.expect("volume pathway present");
        let sh = a.shape().to_vec();
        let (c, inner) = (sh[1], sh[2] * sh[3] * sh[4]);
        for b in 0..sh[0] {
            let span = b * c * inner..(b + 1) * c * inner;
            let mut cam = grad_cam_pp(&a.data()[span.clone()], &g.data()[span], c);
            if let Some(att) = &p.attention {
                cam.iter_mut().for_each(|v| *v *= att[b]);
            }
            let mut up = upsample_trilinear(&cam, [sh[2], sh[3], sh[4]], extents);
            max_normalize(&mut up);
            maps.push(Tensor::new(extents.to_vec(), up)?);
        }
    }
    Ok(maps)
}

/// Voxelwise mean of maps, max-normalized.
pub fn mean_map(maps: &[Tensor]) -> Result<Tensor> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Contract("no maps to average".into()))?;
    let mut acc = vec![0.0; first.numel()];
    for m in maps {
        if m.shape() != first.shape() {
            return Err(crate::error::dim_err("mean_map", first.shape(), m.shape()));
        }
        acc.iter_mut().zip(m.data()).for_each(|(a, v)| *a += v / maps.len() as f64);
    }
    max_normalize(&mut acc);
    Tensor::new(first.shape().to_vec(), acc)
}

/// Mean inside `mask` over mean outside it (infinite when outside is zero and inside is not).
pub fn blob_contrast(map: &Tensor, mask: &[bool]) -> f64 {
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &m) in map.data().iter().zip(mask) {
        if m {
            si += v;
            ni += 1;
        } else {
            so += v;
            no += 1;
        }
    }
    let inside = si / ni.max(1) as f64;
    let outside = so / no.max(1) as f64;
    if outside == 0.0 {
        if inside > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        inside / outside
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaliencyOptions {
    pub top_snps: usize,
    pub top_connections: usize,
    pub volume_maps: bool,
    pub target: TargetClass,
}

impl Default for SaliencyOptions {
    fn default() -> Self {
        Self {
            top_snps: 3,
            top_connections: 5,
            volume_maps: true,
            target: TargetClass::Sz,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyBundle {
    pub subject_ids: Vec<String>,
    pub target: TargetClass,
    /// Mean over subjects, max-normalized; absent without a volume pathway.
    #[serde(skip)]
    pub volume_map: Option<Tensor>,
    pub connections: Option<ConnectionScores>,
    pub snps: Option<SnpRanking>,
}

impl SaliencyBundle {
    /// Everything the model's modalities allow, over `indices`.
    pub fn compute(
        model: &Model,
        params: &ModelParams,
        cohort: &Cohort,
        indices: &[usize],
        opts: &SaliencyOptions,
    ) -> Result<Self> {
        let SaliencyOptions {
            top_snps,
            top_connections,
            volume_maps,
            target,
        } = *opts;
        let cfg = model.config();
        let volume_map = if volume_maps && cfg.has(Modality::Volume) {
            Some(mean_map(&volume_attention_maps(model, params, cohort, indices, target)?)?)
        } else {
            None
        };
        let connections = if cfg.has(Modality::Connectome) {
            Some(connectome_top_connections(
                model,
                params,
                cohort,
                indices,
                Selection::TopK(top_connections),
                target,
            )?)
        } else {
            None
        };
        let snps = if cfg.has(Modality::Genomic) {
            Some(snp_ranking(model, params, cohort, indices, top_snps, target)?)
        } else {
            None
        };
        Ok(Self {
            subject_ids: indices.iter().map(|&i| cohort.subjects[i].id.clone()).collect(),
            target,
            volume_map,
            connections,
            snps,
        })
    }

    /// True when every computed score is zero.
    pub fn is_all_zero(&self) -> bool {
        let zero = |v: &[f64]| v.iter().all(|&x| x == 0.0);
        self.volume_map.as_ref().is_none_or(|m| zero(m.data()))
            && self.connections.as_ref().is_none_or(|c| zero(&c.scores))
            && self.snps.as_ref().is_none_or(|s| zero(&s.scores))
    }

    /// Writes `summary.json`, `connections.csv`, `snps.csv`, `volume_map.mgt` and
    /// `volume_slices/slice_XXX.pgm` (whichever apply) under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(self)?)?;
        if let Some(c) = &self.connections {
            fs::write(dir.join("connections.csv"), scores_csv(&c.scores))?;
        }
        if let Some(s) = &self.snps {
            fs::write(dir.join("snps.csv"), scores_csv(&s.scores))?;
        }
        if let Some(m) = &self.volume_map {
            m.save(dir.join("volume_map.mgt"))?;
            let slices = dir.join("volume_slices");
            fs::create_dir_all(&slices)?;
            let sh = m.shape();
            let plane = sh[1] * sh[2];
            for (z, data) in m.data().chunks(plane).enumerate() {
                fs::write(slices.join(format!("slice_{z:03}.pgm")), pgm(sh[2], sh[1], data))?;
            }
        }
        Ok(())
    }
}

/// `index,score,rank` rows in index order.
pub fn scores_csv(scores: &[f64]) -> String {
    let r = ranks(scores);
    let mut out = String::from("index,score,rank\n");
    for (i, s) in scores.iter().enumerate() {
        writeln!(out, "{i},{s:e},{}", r[i]).expect("write to string");
    }
    out
}

/// Binary 8-bit PGM of values in `[0, 1]`.
pub fn pgm(width: usize, height: usize, data: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_cohort, CohortSpec};
    use crate::model::{FusionKind, ModelConfig};

    fn setup() -> (Model, ModelParams, Cohort) {
        let spec = CohortSpec {
            n_subjects: 6,
            volume_extents: [8, 8, 8],
            blob_center: [2.5, 2.5, 2.5],
            blob_radius: 2.0,
            ..CohortSpec::default()
        };
        let cohort = generate_cohort(&spec).unwrap();
        let cfg = ModelConfig {
            snp_dim: spec.snp_dim(),
            fnc_dim: spec.fnc_dim(),
            ..ModelConfig::tiny()
        };
        let model = Model::new(cfg).unwrap();
        let params = model.init_params(1);
        (model, params, cohort)
    }

    #[test]
    fn zero_model_gives_zero_saliency() {
        let (model, mut params, cohort) = setup();
        for (_, p) in params.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let b = SaliencyBundle::compute(&model, &params, &cohort, &[0, 1, 2], &SaliencyOptions::default())
            .unwrap();
        assert!(b.is_all_zero());
        assert!(b.connections.unwrap().selected.is_empty());
    }

    #[test]
    fn zero_volume_pathway_gives_zero_map() {
        let (model, mut params, cohort) = setup();
        params.zero_prefix("volume.");
        let maps = volume_attention_maps(&model, &params, &cohort, &[0, 1], TargetClass::Sz).unwrap();
        assert!(maps.iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn contracts_on_random_model() {
        let (model, params, cohort) = setup();
        let maps = volume_attention_maps(&model, &params, &cohort, &[0, 1, 2], TargetClass::Sz).unwrap();
        for m in &maps {
            assert_eq!(m.shape(), &[8, 8, 8]);
            assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let snps = snp_ranking(&model, &params, &cohort, &[0, 1, 2], 3, TargetClass::Sz).unwrap();
        assert_eq!(snps.scores.len(), cohort.spec.n_snps);
        assert_eq!(snps.top.len(), 3);
        let a = connectome_top_connections(&model, &params, &cohort, &[0, 1], Selection::TopK(4), TargetClass::Hc)
            .unwrap();
        let b = connectome_top_connections(&model, &params, &cohort, &[0, 1], Selection::TopK(4), TargetClass::Hc)
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.selected.len(), 4);
    }

    #[test]
    fn hc_and_sz_scores_agree_in_magnitude() {
        let (model, params, cohort) = setup();
        let sz = snp_ranking(&model, &params, &cohort, &[3], 3, TargetClass::Sz).unwrap();
        let hc = snp_ranking(&model, &params, &cohort, &[3], 3, TargetClass::Hc).unwrap();
        for (a, b) in sz.scores.iter().zip(&hc.scores) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn upsampling_constant_and_identity() {
        let c = upsample_trilinear(&[0.7; 8], [2, 2, 2], [16, 16, 16]);
        assert!(c.iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let src: Vec<f64> = (0..27).map(|i| i as f64).collect();
        assert_eq!(upsample_trilinear(&src, [3, 3, 3], [3, 3, 3]), src);
    }

    #[test]
    fn grad_cam_pp_single_channel_closed_form() {
        // one channel, gradients all g: alpha = 1/(2 + Σa·g), weight = n·alpha·g
        let a = [1.0, 2.0, 0.0, 1.0];
        let g = [0.5; 4];
        let alpha = 0.25 / (0.5 + 4.0 * 0.125);
        let w = 4.0 * alpha * 0.5;
        let cam = grad_cam_pp(&a, &g, 1);
        for (c, x) in cam.iter().zip(a) {
            assert!((c - w * x).abs() < 1e-15);
        }
    }

    #[test]
    fn selection_and_ranks() {
        let s = vec![0.0, 3.0, 1.0, 3.0];
        assert_eq!(top_k(&s, 5), vec![1, 3, 2]);
        assert_eq!(ranks(&s), vec![4, 1, 3, 2]);
        let c = select_connections(s, Selection::Threshold(2.0));
        assert_eq!(c.selected.iter().map(|x| x.index).collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!((c.selected[0].row, c.selected[0].col), (2, 0));
    }

    #[test]
    fn bundle_files() {
        let (model, _, cohort) = setup();
        let cfg = model.config().clone().with(&[Modality::Genomic, Modality::Volume], FusionKind::Trans);
        let model = Model::new(cfg).unwrap();
        let params = model.init_params(2);
        let b = SaliencyBundle::compute(&model, &params, &cohort, &[0, 1], &SaliencyOptions::default())
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        b.write(dir.path()).unwrap();
        assert!(dir.path().join("snps.csv").exists());
        assert!(!dir.path().join("connections.csv").exists());
        let slice = fs::read(dir.path().join("volume_slices/slice_000.pgm")).unwrap();
        assert!(slice.starts_with(b"P5\n8 8\n255\n"));
        assert_eq!(slice.len(), "P5\n8 8\n255\n".len() + 64);
        let csv = fs::read_to_string(dir.path().join("snps.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + cohort.spec.n_snps);
    }
}
