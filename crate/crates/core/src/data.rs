//! Synthetic cohorts with planted cross-modal signal, FNC vectorization, SNP one-hot
//! encoding, and the on-disk cohort layout.
//!
//! A cohort directory holds `manifest.json` and one sub-directory per subject containing
//! `G.mgt` (`[d]`), `C.mgt` (`[f]`) and `S.mgt` (`[D, H, W]`).

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Modality};
use crate::tensor::Tensor;

pub const COHORT_FORMAT_VERSION: u32 = 1;
const SYMMETRY_TOL: f64 = 1e-9;

/// Strictly-lower-triangular entries of a symmetric `n×n` matrix (row-major `data`),
/// in row-major order: `(1,0), (2,0), (2,1), (3,0), …`.
pub fn lower_triangle(n: usize, m: &[f64]) -> Result<Vec<f64>> {
    if m.len() != n * n {
        return Err(Error::Contract(format!(
            "matrix of {} entries is not {n}x{n}",
            m.len()
        )));
    }
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for r in 0..n {
        for c in 0..r {
            let (a, b) = (m[r * n + c], m[c * n + r]);
            if (a - b).abs() > SYMMETRY_TOL {
                return Err(Error::Contract(format!(
                    "matrix is not symmetric at ({r},{c}): {a} vs {b}"
                )));
            }
            out.push(a);
        }
    }
    Ok(out)
}

/// Inverse of [`lower_triangle`]: symmetric matrix with the given diagonal value.
pub fn from_lower_triangle(n: usize, v: &[f64], diagonal: f64) -> Result<Vec<f64>> {
    if v.len() != connection_count(n) {
        return Err(Error::Contract(format!(
            "{} entries cannot fill the lower triangle of a {n}x{n} matrix",
            v.len()
        )));
    }
    let mut m = vec![0.0; n * n];
    for r in 0..n {
        m[r * n + r] = diagonal;
    }
    for (j, &x) in v.iter().enumerate() {
        let (r, c) = connection_pair(j);
        m[r * n + c] = x;
        m[c * n + r] = x;
    }
    Ok(m)
}

pub fn connection_count(nodes: usize) -> usize {
    nodes * nodes.saturating_sub(1) / 2
}

/// Node pair `(row, col)`, `row > col`, of connection index `j`.
pub fn connection_pair(j: usize) -> (usize, usize) {
    // largest r with r(r-1)/2 <= j
    let mut r = ((1.0 + (1.0 + 8.0 * j as f64).sqrt()) / 2.0) as usize;
    while r * (r - 1) / 2 > j {
        r -= 1;
    }
    while (r + 1) * r / 2 <= j {
        r += 1;
    }
    (r, j - r * (r - 1) / 2)
}

pub fn connection_index(r: usize, c: usize) -> usize {
    let (r, c) = if r > c { (r, c) } else { (c, r) };
    r * (r - 1) / 2 + c
}

/// Node count `n` with `n(n-1)/2 = f`, if `f` is triangular.
pub fn nodes_for_connections(f: usize) -> Option<usize> {
    let n = ((1.0 + (1.0 + 8.0 * f as f64).sqrt()) / 2.0).round() as usize;
    (connection_count(n) == f && n >= 2).then_some(n)
}

/// Concatenated one-hot groups, one per SNP.
pub fn one_hot_snps(genotypes: &[usize], categories: usize) -> Result<Vec<f64>> {
    if categories == 0 {
        return Err(Error::Config("snp categories must be positive".into()));
    }
    let mut out = vec![0.0; genotypes.len() * categories];
    for (i, &g) in genotypes.iter().enumerate() {
        if g >= categories {
            return Err(Error::Contract(format!(
                "genotype {g} of SNP {i} outside [0, {categories})"
            )));
        }
        out[i * categories + g] = 1.0;
    }
    Ok(out)
}

/// Generator parameters. Strengths are signal amplitudes in units of the per-feature noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    pub n_subjects: usize,
    /// Fraction of SZ (label 1) subjects.
    pub sz_fraction: f64,
    pub n_snps: usize,
    pub snp_categories: usize,
    pub fnc_nodes: usize,
    pub volume_extents: [usize; 3],
    /// Direct label signal on the causal SNPs.
    pub genomic_strength: f64,
    /// Direct label signal on the causal connections.
    pub connectome_strength: f64,
    /// Direct label signal on the blob intensity.
    pub volume_strength: f64,
    /// XOR interaction: `y = a ⊕ b` with `a` planted in the causal SNPs and `b` in the
    /// causal connections.
    pub cross_modal_strength: f64,
    pub causal_snps: Vec<usize>,
    pub causal_connections: Vec<usize>,
    /// Signal blob centre in voxel coordinates and its radius.
    pub blob_center: [f64; 3],
    pub blob_radius: f64,
    pub distractor_blobs: usize,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_subjects: 64,
            sz_fraction: 0.5,
            n_snps: 32,
            snp_categories: 3,
            fnc_nodes: 12,
            volume_extents: [16, 16, 16],
            genomic_strength: 0.0,
            connectome_strength: 0.0,
            volume_strength: 1.0,
            cross_modal_strength: 2.5,
            causal_snps: vec![4, 11, 23],
            causal_connections: vec![3, 17],
            blob_center: [4.5, 4.5, 4.5],
            blob_radius: 3.0,
            distractor_blobs: 4,
            seed: 0,
        }
    }
}

impl CohortSpec {
    /// No signal in any modality.
    pub fn null(mut self) -> Self {
        self.genomic_strength = 0.0;
        self.connectome_strength = 0.0;
        self.volume_strength = 0.0;
        self.cross_modal_strength = 0.0;
        self
    }

    pub fn snp_dim(&self) -> usize {
        self.n_snps * self.snp_categories
    }

    pub fn fnc_dim(&self) -> usize {
        connection_count(self.fnc_nodes)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("{field}: {why}")));
        if self.n_subjects == 0 {
            return bad("n_subjects", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.sz_fraction) {
            return bad("sz_fraction", "must lie in [0, 1]");
        }
        if self.n_snps == 0 {
            return bad("n_snps", "must be positive");
        }
        if self.snp_categories == 0 {
            return bad("snp_categories", "must be positive");
        }
        if self.fnc_nodes < 2 {
            return bad("fnc_nodes", "need at least 2 nodes");
        }
        if self.volume_extents.contains(&0) {
            return bad("volume_extents", "must be positive");
        }
        for (name, s) in [
            ("genomic_strength", self.genomic_strength),
            ("connectome_strength", self.connectome_strength),
            ("volume_strength", self.volume_strength),
            ("cross_modal_strength", self.cross_modal_strength),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(name, "must be finite and non-negative");
            }
        }
        if let Some(&i) = self.causal_snps.iter().find(|&&i| i >= self.n_snps) {
            return bad("causal_snps", &format!("index {i} >= n_snps {}", self.n_snps));
        }
        if let Some(&j) = self.causal_connections.iter().find(|&&j| j >= self.fnc_dim()) {
            return bad(
                "causal_connections",
                &format!("index {j} >= connection count {}", self.fnc_dim()),
            );
        }
        if self.blob_radius <= 0.0 {
            return bad("blob_radius", "must be positive");
        }
        Ok(())
    }

    /// Voxels inside the signal blob, row-major over `volume_extents`.
    pub fn blob_mask(&self) -> Vec<bool> {
        let [d, h, w] = self.volume_extents;
        let mut out = Vec::with_capacity(d * h * w);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let p = [z as f64, y as f64, x as f64];
                    let r2: f64 = p.iter().zip(self.blob_center).map(|(a, b)| (a - b).powi(2)).sum();
                    out.push(r2 <= self.blob_radius * self.blob_radius);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    /// `[d]` concatenated one-hot groups.
    pub genomic: Tensor,
    /// `[f]` FNC lower triangle.
    pub connectome: Tensor,
    /// `[D, H, W]` density in `[0, 1]`.
    pub volume: Tensor,
    /// 0 = HC, 1 = SZ.
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub spec: CohortSpec,
    pub subjects: Vec<SubjectRecord>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn sign(bit: bool) -> f64 {
    if bit {
        1.0
    } else {
        -1.0
    }
}

/// Dosage from a standard-normal liability, with `categories - 1` thresholds evenly spaced
/// over `[-0.5, 0.5]` (±0.5 for three categories).
fn dosage(liability: f64, categories: usize) -> usize {
    if categories == 1 {
        return 0;
    }
    let span = 1.0;
    let lo = -span / 2.0;
    let step = span / (categories - 1) as f64;
    let mut k = 0;
    while k + 1 < categories && liability > lo + step * k as f64 {
        k += 1;
    }
    k
}

/// Correlation matrix of a per-subject factor model `L Lᵀ + I`, `L = L₀ + 0.5·noise`.
fn factor_correlation(base: &[f64], nodes: usize, factors: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let l: Vec<f64> = base.iter().map(|&b| b + 0.5 * normal(rng)).collect();
    let mut cov = vec![0.0; nodes * nodes];
    for r in 0..nodes {
        for c in 0..nodes {
            let mut acc = if r == c { 1.0 } else { 0.0 };
            for k in 0..factors {
                acc += l[r * factors + k] * l[c * factors + k];
            }
            cov[r * nodes + c] = acc;
        }
    }
    let mut corr = vec![0.0; nodes * nodes];
    for r in 0..nodes {
        for c in 0..nodes {
            corr[r * nodes + c] =
                cov[r * nodes + c] / (cov[r * nodes + r] * cov[c * nodes + c]).sqrt();
        }
    }
    corr
}

struct Blob {
    center: [f64; 3],
    sigma: f64,
    amplitude: f64,
}

fn render(extents: [usize; 3], blobs: &[Blob], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let [d, h, w] = extents;
    let mut out = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let mut v = 0.0;
                for b in blobs {
                    let r2: f64 = p.iter().zip(b.center).map(|(a, c)| (a - c).powi(2)).sum();
                    v += b.amplitude * (-r2 / (2.0 * b.sigma * b.sigma)).exp();
                }
                out.push((v + noise * normal(rng)).clamp(0.0, 1.0));
            }
        }
    }
    out
}

const FNC_FACTORS: usize = 3;
/// Correlation shift per unit of connectome strength.
const FNC_SHIFT: f64 = 0.1;
/// Blob amplitude shift per unit of volume strength.
const BLOB_SHIFT: f64 = 0.1;
const VOXEL_NOISE: f64 = 0.05;

/// Deterministic cohort for `spec`.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Cohort> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let nodes = spec.fnc_nodes;
    let base_loadings: Vec<f64> = (0..nodes * FNC_FACTORS).map(|_| normal(&mut rng)).collect();

    let n_sz = (spec.n_subjects as f64 * spec.sz_fraction).round() as usize;
    let mut labels: Vec<bool> = (0..spec.n_subjects).map(|i| i < n_sz).collect();
    labels.shuffle(&mut rng);

    let extents = spec.volume_extents;
    let mut subjects = Vec::with_capacity(spec.n_subjects);
    for (i, &y) in labels.iter().enumerate() {
        let a: bool = rng.random();
        let b = a ^ y;

        let genotypes: Vec<usize> = (0..spec.n_snps)
            .map(|s| {
                let mut l = normal(&mut rng);
                if spec.causal_snps.contains(&s) {
                    l += spec.cross_modal_strength * sign(a) + spec.genomic_strength * sign(y);
                }
                dosage(l, spec.snp_categories)
            })
            .collect();
        let genomic = one_hot_snps(&genotypes, spec.snp_categories)?;

        let corr = factor_correlation(&base_loadings, nodes, FNC_FACTORS, &mut rng);
        let mut connectome = lower_triangle(nodes, &corr)?;
        for &j in &spec.causal_connections {
            let shift =
                FNC_SHIFT * (spec.cross_modal_strength * sign(b) + spec.connectome_strength * sign(y));
            connectome[j] = (connectome[j] + shift).clamp(-1.0, 1.0);
        }

        let mut blobs = Vec::with_capacity(spec.distractor_blobs + 1);
        blobs.push(Blob {
            center: spec.blob_center,
            sigma: spec.blob_radius / 1.5,
            amplitude: 0.5 + BLOB_SHIFT * spec.volume_strength * sign(y) + 0.1 * normal(&mut rng),
        });
        for _ in 0..spec.distractor_blobs {
            let center = [0, 1, 2].map(|k| rng.random_range(0.0..extents[k] as f64));
            blobs.push(Blob {
                center,
                sigma: rng.random_range(1.0..2.5),
                amplitude: rng.random_range(0.2..0.6),
            });
        }
        let volume = render(extents, &blobs, VOXEL_NOISE, &mut rng);

        subjects.push(SubjectRecord {
            id: format!("sub-{i:04}"),
            genomic: Tensor::new(vec![spec.snp_dim()], genomic)?,
            connectome: Tensor::new(vec![spec.fnc_dim()], connectome)?,
            volume: Tensor::new(extents.to_vec(), volume)?,
            label: y as u8,
        });
    }
    Ok(Cohort {
        spec: spec.clone(),
        subjects,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestSubject {
    id: String,
    label: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    snp_dim: usize,
    snp_categories: usize,
    fnc_dim: usize,
    volume_extents: [usize; 3],
    spec: CohortSpec,
    subjects: Vec<ManifestSubject>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.subjects.iter().map(|s| s.label).collect()
    }

    pub fn snp_dim(&self) -> usize {
        self.subjects.first().map_or(0, |s| s.genomic.numel())
    }

    pub fn fnc_dim(&self) -> usize {
        self.subjects.first().map_or(0, |s| s.connectome.numel())
    }

    pub fn volume_extents(&self) -> [usize; 3] {
        self.subjects.first().map_or([0; 3], |s| {
            let sh = s.volume.shape();
            [sh[0], sh[1], sh[2]]
        })
    }

    /// Same features with labels permuted under `seed`.
    pub fn with_shuffled_labels(&self, seed: u64) -> Cohort {
        let mut labels = self.labels();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut out = self.clone();
        for (s, l) in out.subjects.iter_mut().zip(labels) {
            s.label = l;
        }
        out
    }

    /// Stacks the given subjects for the requested modalities.
    pub fn batch(&self, indices: &[usize], modalities: &[Modality]) -> Result<Batch> {
        let mut rows = Vec::with_capacity(indices.len());
        for &i in indices {
            rows.push(self.subjects.get(i).ok_or_else(|| {
                Error::Contract(format!("subject index {i} out of range ({})", self.len()))
            })?);
        }
        let stack = |f: &dyn Fn(&SubjectRecord) -> &Tensor| -> Result<Tensor> {
            let parts: Vec<&Tensor> = rows.iter().map(|r| f(r)).collect();
            Tensor::stack(&parts)
        };
        let has = |m| modalities.contains(&m);
        let volume = if has(Modality::Volume) {
            let t = stack(&|r| &r.volume)?;
            let mut shape = t.shape().to_vec();
            shape.insert(1, 1);
            Some(t.reshape(&shape)?)
        } else {
            None
        };
        Ok(Batch {
            genomic: has(Modality::Genomic).then(|| stack(&|r| &r.genomic)).transpose()?,
            connectome: has(Modality::Connectome)
                .then(|| stack(&|r| &r.connectome))
                .transpose()?,
            volume,
            labels: rows.iter().map(|r| r.label as f64).collect(),
        })
    }
}

/// Writes `manifest.json` and per-subject tensors under `dir`.
pub fn write_cohort(cohort: &Cohort, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format_version: COHORT_FORMAT_VERSION,
        snp_dim: cohort.snp_dim(),
        snp_categories: cohort.spec.snp_categories,
        fnc_dim: cohort.fnc_dim(),
        volume_extents: cohort.volume_extents(),
        spec: cohort.spec.clone(),
        subjects: cohort
            .subjects
            .iter()
            .map(|s| ManifestSubject {
                id: s.id.clone(),
                label: s.label,
            })
            .collect(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    for s in &cohort.subjects {
        let sub = dir.join(&s.id);
        fs::create_dir_all(&sub)?;
        s.genomic.save(sub.join("G.mgt"))?;
        s.connectome.save(sub.join("C.mgt"))?;
        s.volume.save(sub.join("S.mgt"))?;
    }
    Ok(())
}

pub fn read_cohort(dir: impl AsRef<Path>) -> Result<Cohort> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join("manifest.json")).map_err(|e| {
        Error::Format(format!("cannot read {}: {e}", dir.join("manifest.json").display()))
    })?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format_version != COHORT_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported cohort format version {}",
            m.format_version
        )));
    }
    let mut subjects = Vec::with_capacity(m.subjects.len());
    for e in &m.subjects {
        if e.label > 1 {
            return Err(Error::Format(format!("subject {}: label {} not in {{0,1}}", e.id, e.label)));
        }
        let load = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let path = dir.join(&e.id).join(name);
            let t = Tensor::load(&path).map_err(|err| match err {
                Error::Io(io) => Error::Format(format!("subject {}: {}: {io}", e.id, path.display())),
                Error::Format(msg) => Error::Format(format!("subject {}: {name}: {msg}", e.id)),
                other => other,
            })?;
            if t.shape() != shape {
                return Err(Error::Format(format!(
                    "subject {}: {name} has shape {:?}, manifest says {:?}",
                    e.id,
                    t.shape(),
                    shape
                )));
            }
            Ok(t)
        };
        subjects.push(SubjectRecord {
            id: e.id.clone(),
            genomic: load("G.mgt", &[m.snp_dim])?,
            connectome: load("C.mgt", &[m.fnc_dim])?,
            volume: load("S.mgt", &m.volume_extents)?,
            label: e.label,
        });
    }
    Ok(Cohort { spec: m.spec, subjects })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, proptest};

    #[test]
    fn lower_triangle_examples() {
        assert_eq!(lower_triangle(2, &[1.0, 0.3, 0.3, 1.0]).unwrap(), vec![0.3]);
        let m: Vec<f64> = (0..53 * 53)
            .map(|k| {
                let (r, c) = (k / 53, k % 53);
                (r.min(c) * 100 + r.max(c)) as f64
            })
            .collect();
        assert_eq!(lower_triangle(53, &m).unwrap().len(), 1378);
        assert!(lower_triangle(2, &[1.0, 0.3, 0.2, 1.0]).is_err());
    }

    #[test]
    fn connection_bijection_at_53_nodes() {
        for j in 0..1378 {
            let (r, c) = connection_pair(j);
            assert!(r > c && r < 53);
            assert_eq!(connection_index(r, c), j);
        }
        assert_eq!(nodes_for_connections(1378), Some(53));
        assert_eq!(nodes_for_connections(64), None);
    }

    #[test]
    fn one_hot_examples() {
        assert_eq!(one_hot_snps(&[0], 3).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(one_hot_snps(&[3], 3).is_err());
        assert_eq!(one_hot_snps(&vec![0; 4942], 1).unwrap().len(), 4942);
    }

    proptest! {
        #[test]
        fn lower_triangle_length_and_roundtrip(n in 2usize..20, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..connection_count(n)).map(|_| rng.random_range(-1.0..1.0)).collect();
            let m = from_lower_triangle(n, &v, 1.0).unwrap();
            let back = lower_triangle(n, &m).unwrap();
            prop_assert_eq!(back.len(), n * (n - 1) / 2);
            prop_assert_eq!(back, v);
        }

        #[test]
        fn one_hot_groups_sum_to_one(g in proptest::collection::vec(0usize..3, 1..50)) {
            let x = one_hot_snps(&g, 3).unwrap();
            for grp in x.chunks(3) {
                prop_assert_eq!(grp.iter().sum::<f64>(), 1.0);
            }
        }
    }

    fn small_spec() -> CohortSpec {
        CohortSpec {
            n_subjects: 10,
            volume_extents: [8, 8, 8],
            blob_center: [2.5, 2.5, 2.5],
            blob_radius: 2.0,
            seed: 3,
            ..CohortSpec::default()
        }
    }

    #[test]
    fn generated_records_are_valid_and_deterministic() {
        let spec = small_spec();
        let a = generate_cohort(&spec).unwrap();
        let b = generate_cohort(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels().iter().filter(|&&l| l == 1).count(), 5);
        for s in &a.subjects {
            for g in s.genomic.data().chunks(3) {
                assert_eq!(g.iter().sum::<f64>(), 1.0);
            }
            assert!(s.connectome.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            assert!(s.volume.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let other = generate_cohort(&CohortSpec { seed: 4, ..spec }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn zero_subjects_names_the_field() {
        let err = generate_cohort(&CohortSpec {
            n_subjects: 0,
            ..CohortSpec::default()
        })
        .unwrap_err();
        assert!(err.to_string().contains("n_subjects"));
    }

    #[test]
    fn cohort_roundtrip_and_corruption() {
        let cohort = generate_cohort(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_cohort(&cohort, dir.path()).unwrap();
        assert_eq!(read_cohort(dir.path()).unwrap(), cohort);

        let victim = dir.path().join(&cohort.subjects[2].id).join("C.mgt");
        let mut bytes = fs::read(&victim).unwrap();
        bytes[0] = b'X';
        fs::write(&victim, &bytes).unwrap();
        let err = read_cohort(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format(_)));

        bytes[0] = b'M';
        fs::write(&victim, &bytes).unwrap();
        let other = dir.path().join(&cohort.subjects[5].id).join("G.mgt");
        Tensor::zeros(&[7]).save(&other).unwrap();
        let err = read_cohort(dir.path()).unwrap_err().to_string();
        assert!(err.contains(&cohort.subjects[5].id), "{err}");
    }

    #[test]
    fn batch_stacks_requested_modalities() {
        let cohort = generate_cohort(&small_spec()).unwrap();
        let b = cohort.batch(&[0, 3], &[Modality::Connectome, Modality::Volume]).unwrap();
        assert!(b.genomic.is_none());
        assert_eq!(b.connectome.unwrap().shape(), &[2, 66]);
        assert_eq!(b.volume.unwrap().shape(), &[2, 1, 8, 8, 8]);
        assert_eq!(b.labels.len(), 2);
    }

    #[test]
    fn dosage_thresholds() {
        assert_eq!(dosage(-1.0, 3), 0);
        assert_eq!(dosage(0.0, 3), 1);
        assert_eq!(dosage(1.0, 3), 2);
        assert_eq!(dosage(5.0, 1), 0);
    }
}
