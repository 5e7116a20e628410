//! Finite-difference checks for the encoders, fusion stages, head, and the whole model.

use mgt_core::encoders::{
    ConnectomeEncoder, ConvVolumeEncoder, GenomicEncoder, SpatialSequenceAttention,
    VolumeFeatureExtractor, VolumeSqueeze,
};
use mgt_core::fusion::{ClassifierHead, CrossModalMha, TransFusor};
use mgt_core::gradcheck::{check_model, check_session, random_tensor, FdReport};
use mgt_core::{FusionKind, Modality, ModelConfig, ModelParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn assert_ok(name: &str, r: &FdReport) {
    assert!(r.checked > 0);
    assert!(
        r.max_rel_err < TOL,
        "{name}: rel err {} at {:?} (analytic {}, numeric {})",
        r.max_rel_err,
        r.worst,
        r.analytic_at_worst,
        r.numeric_at_worst
    );
}

#[test]
fn genomic_encoder() {
    let enc = GenomicEncoder {
        input_dim: 32,
        hidden: [24, 20],
        out_dim: 16,
    };
    let mut p = ModelParams::new();
    enc.init(&mut p, &mut rng(1));
    let x = random_tensor(&[2, 32], 1.0, &mut rng(2));
    let r = check_session(&p, &[x], |s, v| enc.forward(s, v[0], 0.5, 0.3), 40).unwrap();
    assert_ok("genomic", &r);
}

#[test]
fn connectome_encoder() {
    let enc = ConnectomeEncoder {
        input_dim: 64,
        hidden: 24,
        out_dim: 16,
    };
    let mut p = ModelParams::new();
    enc.init(&mut p, &mut rng(1));
    let x = random_tensor(&[2, 64], 1.0, &mut rng(2));
    let r = check_session(&p, &[x], |s, v| enc.forward(s, v[0], 0.3), 40).unwrap();
    assert_ok("connectome", &r);
}

#[test]
fn volume_encoder_on_8_cubed() {
    let enc = ConvVolumeEncoder {
        channels: [2, 3, 4],
        kernel: 3,
    };
    let mut p = ModelParams::new();
    enc.init(&mut p, &mut rng(1));
    let x = random_tensor(&[1, 1, 8, 8, 8], 1.0, &mut rng(2));
    let r = check_session(&p, &[x], |s, v| enc.forward(s, v[0]), 40).unwrap();
    assert_ok("volume", &r);
}

fn ssa(channels: usize, steps: usize) -> SpatialSequenceAttention {
    SpatialSequenceAttention {
        channels,
        extents: [2, 2, 2],
        kernel: 3,
        steps,
    }
}

/// Peepholes start at zero; randomize them so their gradient paths are exercised.
fn ssa_params(block: &SpatialSequenceAttention, seed: u64) -> ModelParams {
    let mut p = ModelParams::new();
    block.init(&mut p, &mut rng(seed));
    for g in ["i", "f", "o"] {
        let k = format!("ssa.W_c{g}");
        let shape = p.tensor(&k).unwrap().shape().to_vec();
        *p.tensor_mut(&k).unwrap() = random_tensor(&shape, 0.5, &mut rng(seed + 10));
    }
    p
}

#[test]
fn convlstm_cell_with_state() {
    let block = ssa(3, 1);
    let p = ssa_params(&block, 1);
    let mut r = rng(2);
    let inputs = [
        random_tensor(&[1, 3, 2, 2, 2], 1.0, &mut r),
        random_tensor(&[1, 3, 2, 2, 2], 1.0, &mut r),
        random_tensor(&[1, 3, 2, 2, 2], 1.0, &mut r),
    ];
    let rep = check_session(
        &p,
        &inputs,
        |s, v| {
            let (h, c) = block.cell(s, v[0], Some((v[1], v[2])))?;
            s.tape.concat_last(&[h, c])
        },
        40,
    )
    .unwrap();
    assert_ok("convlstm cell", &rep);
}

#[test]
fn spatial_sequence_attention_at_8_cubed() {
    let block = SpatialSequenceAttention {
        channels: 4,
        extents: [8, 8, 8],
        kernel: 3,
        steps: 2,
    };
    let p = ssa_params(&block, 3);
    let x = random_tensor(&[1, 4, 8, 8, 8], 1.0, &mut rng(4));
    let r = check_session(&p, &[x], |s, v| block.forward(s, v[0]), 24).unwrap();
    assert_ok("ssa", &r);
}

#[test]
fn volume_squeeze() {
    let sq = VolumeSqueeze {
        channels: 4,
        out_dim: 6,
    };
    let mut p = ModelParams::new();
    sq.init(&mut p, &mut rng(1));
    let x = random_tensor(&[2, 4, 2, 2, 2], 1.0, &mut rng(2));
    let r = check_session(&p, &[x], |s, v| sq.forward(s, v[0]), 100).unwrap();
    assert_ok("squeeze", &r);
}

#[test]
fn cross_modal_mha_both_heads() {
    let mha = CrossModalMha {
        prefix: "x".into(),
        model_dim: 8,
        heads: 2,
    };
    let mut p = ModelParams::new();
    mha.init(&mut p, &mut rng(1));
    let mut r = rng(2);
    let inputs = [
        random_tensor(&[2, 3, 8], 1.0, &mut r),
        random_tensor(&[2, 3, 8], 1.0, &mut r),
        random_tensor(&[2, 3, 8], 1.0, &mut r),
    ];
    let rep = check_session(&p, &inputs, |s, v| Ok(mha.forward(s, v[0], v[1], v[2])?.0), 100).unwrap();
    assert_ok("x-mha", &rep);
}

#[test]
fn transfusor_stages() {
    for tokens in [1, 4] {
        let gc = TransFusor::new("gc", 16, tokens, 2).unwrap();
        let gcs = TransFusor::new("gcs", 16, tokens, 2).unwrap();
        let mut p = ModelParams::new();
        gc.init(&mut p, &mut rng(1));
        gcs.init(&mut p, &mut rng(2));
        let mut r = rng(3);
        let inputs = [
            random_tensor(&[2, 16], 1.0, &mut r),
            random_tensor(&[2, 16], 1.0, &mut r),
            random_tensor(&[2, 16], 1.0, &mut r),
        ];
        let rep = check_session(
            &p,
            &inputs,
            |s, v| {
                let gc_out = gc.forward(s, v[0], v[1])?;
                gcs.forward(s, gc_out, v[2])
            },
            60,
        )
        .unwrap();
        assert_ok(&format!("transfusor n={tokens}"), &rep);
    }
}

#[test]
fn classification_head() {
    let head = ClassifierHead {
        input_dim: 16,
        hidden: [12, 8],
    };
    let mut p = ModelParams::new();
    head.init(&mut p, &mut rng(1));
    let x = random_tensor(&[2, 16], 1.0, &mut rng(2));
    let r = check_session(&p, &[x], |s, v| head.classify(s, v[0], 0.3), 100).unwrap();
    assert_ok("head", &r);
}

#[test]
fn full_model_every_parameter() {
    let cfg = ModelConfig::tiny();
    for fusion in [FusionKind::Trans, FusionKind::Concat, FusionKind::Aff] {
        let c = cfg.clone().with(
            &[Modality::Genomic, Modality::Connectome, Modality::Volume],
            fusion,
        );
        let r = check_model(&c, 5, 24).unwrap();
        assert_ok(&c.label(), &r);
    }
}
