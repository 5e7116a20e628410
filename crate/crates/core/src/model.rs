//! Model assembly: encoders for the selected modalities, a fusion strategy, and the head.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    ConnectomeEncoder, ConvVolumeEncoder, GenomicEncoder, SpatialSequenceAttention,
    VolumeFeatureExtractor, VolumeSqueeze,
};
use crate::error::{Error, Result};
use crate::fusion::{bce_loss, ClassifierHead, GatedFusion, TransFusor};
use crate::params::{ModelParams, Session};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "G")]
    Genomic,
    #[serde(rename = "C")]
    Connectome,
    #[serde(rename = "S")]
    Volume,
}

impl Modality {
    pub fn letter(self) -> char {
        match self {
            Modality::Genomic => 'G',
            Modality::Connectome => 'C',
            Modality::Volume => 'S',
        }
    }

    pub fn from_letter(c: char) -> Result<Self> {
        match c.to_ascii_uppercase() {
            'G' => Ok(Modality::Genomic),
            'C' => Ok(Modality::Connectome),
            'S' => Ok(Modality::Volume),
            other => Err(Error::Config(format!("unknown modality '{other}' (expected G, C or S)"))),
        }
    }

    /// Parses `"G,C,S"`, `"GCS"` or any mix of the two.
    pub fn parse_set(text: &str) -> Result<Vec<Self>> {
        let mut out: Vec<Self> = text
            .chars()
            .filter(|c| !c.is_whitespace() && *c != ',')
            .map(Self::from_letter)
            .collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        if out.is_empty() {
            return Err(Error::Config("modality set is empty".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    None,
    Concat,
    Aff,
    Trans,
}

impl std::str::FromStr for FusionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(FusionKind::None),
            "concat" => Ok(FusionKind::Concat),
            "aff" => Ok(FusionKind::Aff),
            "trans" => Ok(FusionKind::Trans),
            other => Err(Error::Config(format!(
                "unknown fusion '{other}' (expected none, concat, aff or trans)"
            ))),
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionKind::None => "none",
            FusionKind::Concat => "concat",
            FusionKind::Aff => "aff",
            FusionKind::Trans => "trans",
        })
    }
}

/// Architecture and dimensions. Training hyperparameters live in `TrainConfig`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub modalities: Vec<Modality>,
    pub fusion: FusionKind,
    /// One-hot SNP width `d`.
    pub snp_dim: usize,
    /// Connectome width `f`.
    pub fnc_dim: usize,
    /// Shared embedding width `d'`.
    pub embed_dim: usize,
    pub genomic_hidden: [usize; 2],
    pub connectome_hidden: usize,
    pub head_hidden: [usize; 2],
    pub heads: usize,
    /// Tokens per embedding in the fusion attention.
    pub tokens: usize,
    pub volume_extents: [usize; 3],
    pub volume_channels: [usize; 3],
    pub kernel: usize,
    pub ssa_steps: usize,
    pub head_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modalities: vec![Modality::Genomic, Modality::Connectome, Modality::Volume],
            fusion: FusionKind::Trans,
            snp_dim: 96,
            fnc_dim: 66,
            embed_dim: 64,
            genomic_hidden: [128, 96],
            connectome_hidden: 96,
            head_hidden: [64, 32],
            heads: 2,
            tokens: 4,
            volume_extents: [16, 16, 16],
            volume_channels: [8, 16, 32],
            kernel: 3,
            ssa_steps: 2,
            head_dropout: 0.3,
        }
    }
}

impl ModelConfig {
    /// Full-size widths: 4942 three-category SNPs, 53-node FNC, 121×145×121 volumes
    /// rounded up to multiples of 8.
    pub fn full_scale() -> Self {
        Self {
            snp_dim: 4942 * 3,
            fnc_dim: 1378,
            embed_dim: 1536,
            genomic_hidden: [2048, 1536],
            connectome_hidden: 1536,
            head_hidden: [512, 256],
            volume_extents: [128, 152, 128],
            ..Self::default()
        }
    }

    /// Small configuration used by the gradient oracles.
    pub fn tiny() -> Self {
        Self {
            snp_dim: 32,
            fnc_dim: 32,
            embed_dim: 16,
            genomic_hidden: [24, 20],
            connectome_hidden: 20,
            head_hidden: [12, 8],
            volume_extents: [8, 8, 8],
            volume_channels: [2, 3, 4],
            ..Self::default()
        }
    }

    pub fn with(mut self, modalities: &[Modality], fusion: FusionKind) -> Self {
        self.modalities = modalities.to_vec();
        self.fusion = fusion;
        self
    }

    pub fn has(&self, m: Modality) -> bool {
        self.modalities.contains(&m)
    }

    /// Row label such as `GC-trans` or `S`.
    pub fn label(&self) -> String {
        let letters: String = self.modalities.iter().map(|m| m.letter()).collect();
        match self.fusion {
            FusionKind::None => letters,
            f => format!("{letters}-{f}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut sorted = self.modalities.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.is_empty() || sorted.len() != self.modalities.len() {
            return Err(Error::Config(
                "modalities must be a non-empty set without repeats".into(),
            ));
        }
        match (self.fusion, self.modalities.len()) {
            (FusionKind::None, 1) => {}
            (FusionKind::None, n) => {
                return Err(Error::Config(format!(
                    "{n} modalities need a fusion (concat, aff or trans)"
                )))
            }
            (f, 1) => {
                return Err(Error::Config(format!("fusion '{f}' requires at least two modalities")))
            }
            _ => {}
        }
        let positive = [
            ("snp_dim", self.snp_dim),
            ("fnc_dim", self.fnc_dim),
            ("embed_dim", self.embed_dim),
            ("genomic_hidden", self.genomic_hidden[0].min(self.genomic_hidden[1])),
            ("connectome_hidden", self.connectome_hidden),
            ("head_hidden", self.head_hidden[0].min(self.head_hidden[1])),
            ("heads", self.heads),
            ("tokens", self.tokens),
            ("volume_channels", self.volume_channels.iter().copied().min().unwrap_or(0)),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(Error::Config(format!(
                "head_dropout {} must lie in [0, 1)",
                self.head_dropout
            )));
        }
        if self.uses_attention_fusion() {
            TransFusor::new("check", self.embed_dim, self.tokens, self.heads)?;
        }
        if self.has(Modality::Volume) {
            self.volume_encoder().out_extents(self.volume_extents)?;
        }
        Ok(())
    }

    fn uses_attention_fusion(&self) -> bool {
        self.fusion == FusionKind::Trans
            || (self.fusion == FusionKind::None && self.modalities != [Modality::Volume])
    }

    fn volume_encoder(&self) -> ConvVolumeEncoder {
        ConvVolumeEncoder {
            channels: self.volume_channels,
            kernel: self.kernel,
        }
    }
}

/// Per-forward dropout rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dropouts {
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub head: f64,
}

impl Dropouts {
    pub const NONE: Dropouts = Dropouts {
        p1: 0.0,
        p2: 0.0,
        p3: 0.0,
        head: 0.0,
    };
}

/// Stacked inputs for a batch of subjects; absent modalities are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B, d]`
    pub genomic: Option<Tensor>,
    /// `[B, f]`
    pub connectome: Option<Tensor>,
    /// `[B, 1, D, H, W]`
    pub volume: Option<Tensor>,
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[B]` SZ-class score before the sigmoid.
    pub logits: Var,
    /// `[B]` `ŷ`.
    pub probs: Var,
    pub genomic: Option<Var>,
    pub connectome: Option<Var>,
    pub volume: Option<Var>,
    /// SSA output `X̄`, the map used for class-activation maps.
    pub ssa_out: Option<Var>,
}

enum Fuser {
    Concat,
    Aff(Vec<GatedFusion>),
    Trans(Vec<TransFusor>),
    /// Single-modality self-attention stage (query and value from the same embedding).
    SelfAttention(TransFusor),
    Identity,
}

/// Multimodal imaging-genomics classifier.
pub struct Model {
    config: ModelConfig,
    genomic: Option<GenomicEncoder>,
    connectome: Option<ConnectomeEncoder>,
    volume: Option<(Box<dyn VolumeFeatureExtractor>, SpatialSequenceAttention, VolumeSqueeze)>,
    fuser: Fuser,
    head: ClassifierHead,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        Self::with_volume_encoder(config.clone(), Box::new(config.volume_encoder()))
    }

    /// Uses a custom volumetric feature extractor in place of the default CNN.
    pub fn with_volume_encoder(
        mut config: ModelConfig,
        extractor: Box<dyn VolumeFeatureExtractor>,
    ) -> Result<Self> {
        config.modalities.sort();
        config.validate()?;
        let d = config.embed_dim;
        let genomic = config.has(Modality::Genomic).then(|| GenomicEncoder {
            input_dim: config.snp_dim,
            hidden: config.genomic_hidden,
            out_dim: d,
        });
        let connectome = config.has(Modality::Connectome).then(|| ConnectomeEncoder {
            input_dim: config.fnc_dim,
            hidden: config.connectome_hidden,
            out_dim: d,
        });
        let volume = if config.has(Modality::Volume) {
            let channels = extractor.out_channels();
            let extents = extractor.out_extents(config.volume_extents)?;
            let ssa = SpatialSequenceAttention {
                channels,
                extents,
                kernel: config.kernel,
                steps: config.ssa_steps,
            };
            let squeeze = VolumeSqueeze {
                channels,
                out_dim: d,
            };
            Some((extractor, ssa, squeeze))
        } else {
            None
        };
        let letters: Vec<char> = config
            .modalities
            .iter()
            .map(|m| m.letter().to_ascii_lowercase())
            .collect();
        let n = letters.len();
        let fuser = match config.fusion {
            FusionKind::Concat => Fuser::Concat,
            FusionKind::Aff => Fuser::Aff(
                (1..n)
                    .map(|i| GatedFusion {
                        prefix: format!("aff{i}"),
                        embed_dim: d,
                    })
                    .collect(),
            ),
            FusionKind::Trans => Fuser::Trans(
                (1..n)
                    .map(|i| {
                        let name: String = letters[..=i].iter().collect();
                        TransFusor::new(&name, d, config.tokens, config.heads)
                    })
                    .collect::<Result<_>>()?,
            ),
            FusionKind::None if config.modalities[0] == Modality::Volume => Fuser::Identity,
            FusionKind::None => Fuser::SelfAttention(TransFusor::new(
                "sa",
                d,
                config.tokens,
                config.heads,
            )?),
        };
        let head_in = match fuser {
            Fuser::Concat => n * d,
            _ => d,
        };
        let head = ClassifierHead {
            input_dim: head_in,
            hidden: config.head_hidden,
        };
        Ok(Self {
            config,
            genomic,
            connectome,
            volume,
            fuser,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new();
        if let Some(g) = &self.genomic {
            g.init(&mut p, &mut rng);
        }
        if let Some(c) = &self.connectome {
            c.init(&mut p, &mut rng);
        }
        if let Some((ext, ssa, sq)) = &self.volume {
            ext.init(&mut p, &mut rng);
            ssa.init(&mut p, &mut rng);
            sq.init(&mut p, &mut rng);
        }
        match &self.fuser {
            Fuser::Aff(stages) => stages.iter().for_each(|s| s.init(&mut p, &mut rng)),
            Fuser::Trans(stages) => stages.iter().for_each(|s| s.init(&mut p, &mut rng)),
            Fuser::SelfAttention(s) => s.init(&mut p, &mut rng),
            Fuser::Concat | Fuser::Identity => {}
        }
        self.head.init(&mut p, &mut rng);
        p
    }

    /// Rejects parameter sets whose keys or shapes disagree with this architecture.
    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        let expect = self.init_params(0);
        for (key, p) in expect.iter() {
            let got = params.get(key)?;
            if got.value.shape() != p.value.shape() {
                return Err(Error::Config(format!(
                    "parameter {key} has shape {:?}, architecture expects {:?}",
                    got.value.shape(),
                    p.value.shape()
                )));
            }
        }
        if let Some(extra) = params.keys().find(|k| !expect.contains(k)) {
            return Err(Error::Config(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    /// Checks that the batch carries exactly the configured modalities with matching widths.
    pub fn check_batch(&self, batch: &Batch) -> Result<()> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        let [d, h, w] = self.config.volume_extents;
        let checks: [(Modality, &Option<Tensor>, Vec<usize>); 3] = [
            (Modality::Genomic, &batch.genomic, vec![b, self.config.snp_dim]),
            (Modality::Connectome, &batch.connectome, vec![b, self.config.fnc_dim]),
            (Modality::Volume, &batch.volume, vec![b, 1, d, h, w]),
        ];
        for (m, t, shape) in checks {
            match (self.config.has(m), t) {
                (true, Some(t)) if t.shape() == shape.as_slice() => {}
                (true, Some(t)) => {
                    return Err(Error::Config(format!(
                        "modality {} has shape {:?}, model expects {:?}",
                        m.letter(),
                        t.shape(),
                        shape
                    )))
                }
                (true, None) => {
                    return Err(Error::Config(format!("batch lacks modality {}", m.letter())))
                }
                (false, _) => {}
            }
        }
        Ok(())
    }

    /// Records the whole model on the session's tape. When `inputs_require_grad` is set,
    /// input tensors become differentiable leaves (used for saliency).
    pub fn forward(
        &self,
        s: &mut Session,
        batch: &Batch,
        drop: Dropouts,
        inputs_require_grad: bool,
    ) -> Result<Forward> {
        self.check_batch(batch)?;
        let mut bind = |t: &Option<Tensor>| t.as_ref().map(|t| s.input(t.clone(), inputs_require_grad));
        let (g, c, v) = (bind(&batch.genomic), bind(&batch.connectome), bind(&batch.volume));
        self.forward_vars(s, g, c, v, drop)
    }

    /// Forward pass from inputs already on the tape.
    pub fn forward_vars(
        &self,
        s: &mut Session,
        genomic: Option<Var>,
        connectome: Option<Var>,
        volume: Option<Var>,
        drop: Dropouts,
    ) -> Result<Forward> {
        let missing = |m: Modality| Error::Config(format!("missing modality {}", m.letter()));
        let mut embeddings = Vec::with_capacity(3);
        let mut ssa_out = None;
        if let Some(enc) = &self.genomic {
            let x = genomic.ok_or_else(|| missing(Modality::Genomic))?;
            embeddings.push(enc.forward(s, x, drop.p1, drop.p2)?);
        }
        if let Some(enc) = &self.connectome {
            let x = connectome.ok_or_else(|| missing(Modality::Connectome))?;
            embeddings.push(enc.forward(s, x, drop.p3)?);
        }
        if let Some((ext, ssa, sq)) = &self.volume {
            let x = volume.ok_or_else(|| missing(Modality::Volume))?;
            let feat = ext.forward(s, x)?;
            let refined = ssa.forward(s, feat)?;
            if s.is_explaining() {
                let t = s.tape.value(refined).clone();
                s.capture("ssa.out", t);
            }
            ssa_out = Some(refined);
            embeddings.push(sq.forward(s, refined)?);
        }
        let fused = match &self.fuser {
            Fuser::Identity => embeddings[0],
            Fuser::Concat => s.tape.concat_last(&embeddings)?,
            Fuser::SelfAttention(tf) => tf.forward(s, embeddings[0], embeddings[0])?,
            Fuser::Aff(stages) => {
                let mut acc = embeddings[0];
                for (st, &e) in stages.iter().zip(&embeddings[1..]) {
                    acc = st.forward(s, acc, e)?;
                }
                acc
            }
            Fuser::Trans(stages) => {
                let mut acc = embeddings[0];
                for (st, &e) in stages.iter().zip(&embeddings[1..]) {
                    acc = st.forward(s, acc, e)?;
                }
                acc
            }
        };
        let logits = self.head.logits(s, fused, drop.head)?;
        let probs = s.tape.sigmoid(logits);
        Ok(Forward {
            logits,
            probs,
            genomic,
            connectome,
            volume,
            ssa_out,
        })
    }

    /// Mean binary cross-entropy of a forward pass.
    pub fn loss(&self, s: &mut Session, fwd: &Forward, labels: &[f64]) -> Result<Var> {
        bce_loss(&mut s.tape, fwd.probs, labels)
    }
}
