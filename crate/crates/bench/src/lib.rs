//! Fixtures shared by the benchmarks.

use mgt_core::data::{generate_cohort, Cohort, CohortSpec};
use mgt_core::gradcheck::random_tensor;
use mgt_core::{Batch, FusionKind, Modality, Model, ModelConfig, ModelParams, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Input `[batch, cin, e, e, e]`, kernels `[cout, cin, 3, 3, 3]` and bias `[cout]`.
pub fn conv_operands(batch: usize, cin: usize, cout: usize, e: usize) -> (Tensor, Tensor, Tensor) {
    let mut r = rng(1);
    (
        random_tensor(&[batch, cin, e, e, e], 1.0, &mut r),
        random_tensor(&[cout, cin, 3, 3, 3], 0.2, &mut r),
        random_tensor(&[cout], 0.1, &mut r),
    )
}

pub fn matmul_operands(m: usize, k: usize, n: usize) -> (Tensor, Tensor) {
    let mut r = rng(2);
    (
        random_tensor(&[m, k], 1.0, &mut r),
        random_tensor(&[k, n], 1.0, &mut r),
    )
}

/// A desk-scale model of the given row with initialized parameters and a batch from a
/// default cohort.
pub struct ModelFixture {
    pub model: Model,
    pub params: ModelParams,
    pub batch: Batch,
    pub cohort: Cohort,
}

pub fn model_fixture(modalities: &[Modality], fusion: FusionKind, batch: usize) -> ModelFixture {
    let spec = CohortSpec {
        n_subjects: batch.max(2),
        ..CohortSpec::default()
    };
    let cohort = generate_cohort(&spec).expect("default cohort spec is valid");
    let mut cfg = ModelConfig::default().with(modalities, fusion);
    cfg.snp_dim = spec.snp_dim();
    cfg.fnc_dim = spec.fnc_dim();
    let model = Model::new(cfg).expect("valid desk config");
    let params = model.init_params(0);
    let indices: Vec<usize> = (0..batch).collect();
    let batch = cohort
        .batch(&indices, &model.config().modalities)
        .expect("indices in range");
    ModelFixture {
        model,
        params,
        batch,
        cohort,
    }
}
