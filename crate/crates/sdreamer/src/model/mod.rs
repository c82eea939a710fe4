//! The epoch and sequence classifiers: embeddings, layer stacks, and
//! pathway-specific heads assembled over the MoME building blocks.
//!
//! Both models expose three forward pathways. The mono pathways (EEG, EMG)
//! read one modality's tokens; the mix pathway reads the concatenation of
//! both token streams and fuses its per-modality summary tokens along the
//! feature axis before its (wider) classification head. Requesting a
//! pathway whose input channels are absent is an error — mono pathways
//! never touch the other modality's data.

pub mod checkpoint;
pub mod infer;

use rand::Rng;
use thiserror::Error;

use crate::mome::{
    embed_patches, pathway_forward, EmbeddingParams, Graph, MomeError, MomeStack, PathwayId,
    RoutingTable,
};
use crate::params::{init, ParamId, ParamStore};
use crate::signal::{PatchedEpoch, SequenceSample, StageLabel};
use crate::tensor::{Tape, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("mix pathway requires both eeg and emg channels")]
    MixNeedsBothModalities,
    #[error("{pathway} pathway requested but the batch has no {modality} channel")]
    MissingModality { pathway: &'static str, modality: &'static str },
    #[error("empty batch")]
    EmptyBatch,
    #[error("inconsistent batch: {what}")]
    InconsistentBatch { what: String },
    #[error(transparent)]
    Mome(#[from] MomeError),
}

/// Which pathways a forward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathwaySelect {
    pub eeg: bool,
    pub emg: bool,
    pub mix: bool,
}

impl PathwaySelect {
    pub fn all() -> Self {
        PathwaySelect { eeg: true, emg: true, mix: true }
    }

    pub fn only(pathway: PathwayId) -> Self {
        PathwaySelect {
            eeg: pathway == PathwayId::Eeg,
            emg: pathway == PathwayId::Emg,
            mix: pathway == PathwayId::Mix,
        }
    }
}

/// Logits per requested pathway; `None` where not requested.
#[derive(Debug, Clone, Copy)]
pub struct PathwayLogits {
    pub eeg: Option<Var>,
    pub emg: Option<Var>,
    pub mix: Option<Var>,
}

impl PathwayLogits {
    pub fn get(&self, pathway: PathwayId) -> Option<Var> {
        match pathway {
            PathwayId::Eeg => self.eeg,
            PathwayId::Emg => self.emg,
            PathwayId::Mix => self.mix,
        }
    }
}

/// Final summary representations per pathway (what the heads consume),
/// for embedding export.
#[derive(Debug, Clone, Copy)]
pub struct PathwayReprs {
    pub eeg: Option<Var>,
    pub emg: Option<Var>,
    pub mix: Option<Var>,
}

/// Epoch-classifier hyperparameters.
///
/// `patches` is the per-epoch token count P; it follows from the data
/// (`floor(sample_rate / patch_width)`) and is fixed at build time because
/// the positional encoding owns one row per token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochModelConfig {
    pub layers: usize,
    /// 1-based first layer with a dedicated mix expert.
    pub mix_start_layer: usize,
    pub dim: usize,
    pub patch_width: usize,
    pub patches: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub n_classes: usize,
    pub use_pos_encoding: bool,
    pub use_mod_encoding: bool,
}

impl Default for EpochModelConfig {
    fn default() -> Self {
        EpochModelConfig {
            layers: 4,
            mix_start_layer: 4,
            dim: 128,
            patch_width: 16,
            patches: 2,
            heads: 4,
            ffn_dim: 512,
            n_classes: 3,
            use_pos_encoding: true,
            use_mod_encoding: true,
        }
    }
}

/// Sequence-classifier hyperparameters: a mono-only epoch-level encoder
/// under a three-pathway sequence-level stack over `seq_len` epochs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceModelConfig {
    pub epoch_layers: usize,
    pub seq_layers: usize,
    /// 1-based first sequence-level layer with a dedicated mix expert.
    pub seq_mix_start_layer: usize,
    /// Epochs per sequence (K).
    pub seq_len: usize,
    pub dim: usize,
    pub patch_width: usize,
    pub patches: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub n_classes: usize,
    pub use_pos_encoding: bool,
    pub use_mod_encoding: bool,
}

impl Default for SequenceModelConfig {
    fn default() -> Self {
        SequenceModelConfig {
            epoch_layers: 2,
            seq_layers: 3,
            seq_mix_start_layer: 3,
            seq_len: 16,
            dim: 128,
            patch_width: 16,
            patches: 2,
            heads: 4,
            ffn_dim: 512,
            n_classes: 3,
            use_pos_encoding: true,
            use_mod_encoding: true,
        }
    }
}

/// One linear classification head.
#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub w: ParamId,
    pub b: ParamId,
}

fn build_head(
    store: &mut ParamStore,
    prefix: &str,
    in_dim: usize,
    n_classes: usize,
    rng: &mut impl Rng,
) -> HeadParams {
    HeadParams {
        w: store.add(
            &format!("{prefix}.w"),
            init::trunc_normal(&[in_dim, n_classes], crate::mome::INIT_STD, rng),
        ),
        b: store.add(&format!("{prefix}.b"), init::zeros(&[n_classes])),
    }
}

fn head_forward(g: &mut Graph, head: HeadParams, x: Var) -> Var {
    let w = g.p(head.w);
    let b = g.p(head.b);
    let y = g.tape.matmul(x, w);
    g.tape.add(y, b)
}

/// Per-epoch classifier: patch embeddings per modality, one three-pathway
/// MoME stack, and one head per pathway (the mix head reads the 2D-wide
/// fusion of the mix pathway's two summary tokens).
#[derive(Debug)]
pub struct EpochModel {
    pub config: EpochModelConfig,
    pub embed_eeg: EmbeddingParams,
    pub embed_emg: EmbeddingParams,
    pub stack: MomeStack,
    pub head_eeg: HeadParams,
    pub head_emg: HeadParams,
    pub head_mix: HeadParams,
}

impl EpochModel {
    pub fn build(
        store: &mut ParamStore,
        config: EpochModelConfig,
        rng: &mut impl Rng,
    ) -> Result<EpochModel, ModelError> {
        let c = &config;
        assert!(
            (1..=c.layers).contains(&c.mix_start_layer),
            "mix_start_layer {} outside 1..={}",
            c.mix_start_layer,
            c.layers
        );
        let embed_eeg =
            EmbeddingParams::build(store, "epoch.embed.eeg", c.patch_width, c.patches, c.dim, rng);
        let embed_emg =
            EmbeddingParams::build(store, "epoch.embed.emg", c.patch_width, c.patches, c.dim, rng);
        let routing = RoutingTable::with_mix(c.layers, c.mix_start_layer);
        let stack = MomeStack::build(store, "epoch.stack", routing, c.dim, c.heads, c.ffn_dim, rng)?;
        let head_eeg = build_head(store, "epoch.head.eeg", c.dim, c.n_classes, rng);
        let head_emg = build_head(store, "epoch.head.emg", c.dim, c.n_classes, rng);
        let head_mix = build_head(store, "epoch.head.mix", 2 * c.dim, c.n_classes, rng);
        Ok(EpochModel { config, embed_eeg, embed_emg, stack, head_eeg, head_emg, head_mix })
    }
}

/// Tensorized batch: `[B, P, W]` per present modality (epoch models) or
/// `[B, K, P, W]` (sequence models).
#[derive(Debug, Clone, Copy)]
pub struct BatchTensors {
    pub eeg: Option<Var>,
    pub emg: Option<Var>,
    pub batch: usize,
}

impl BatchTensors {
    fn require(
        &self,
        pathway: &'static str,
        modality: PathwayId,
    ) -> Result<Var, ModelError> {
        let slot = match modality {
            PathwayId::Eeg => self.eeg,
            PathwayId::Emg => self.emg,
            PathwayId::Mix => unreachable!("mix is not a channel"),
        };
        slot.ok_or(ModelError::MissingModality { pathway, modality: modality.name() })
    }
}

/// Pack patched epochs into batch tensors, one per modality present in all
/// entries. Entries must agree on patch geometry and channel availability.
pub fn epoch_batch(tape: &mut Tape, batch: &[&PatchedEpoch]) -> Result<BatchTensors, ModelError> {
    let first = batch.first().ok_or(ModelError::EmptyBatch)?;
    let (p, w) = (first.patches, first.width);
    let has_eeg = !first.eeg.is_empty();
    let has_emg = !first.emg.is_empty();
    let mut eeg = Vec::with_capacity(if has_eeg { batch.len() * p * w } else { 0 });
    let mut emg = Vec::with_capacity(if has_emg { batch.len() * p * w } else { 0 });
    for e in batch {
        if e.patches != p || e.width != w {
            return Err(ModelError::InconsistentBatch {
                what: format!(
                    "patch geometry {}x{} vs {}x{} (subject {} epoch {})",
                    e.patches, e.width, p, w, e.subject_id, e.position
                ),
            });
        }
        if e.eeg.is_empty() == has_eeg || e.emg.is_empty() == has_emg {
            return Err(ModelError::InconsistentBatch {
                what: format!(
                    "channel availability differs (subject {} epoch {})",
                    e.subject_id, e.position
                ),
            });
        }
        eeg.extend_from_slice(&e.eeg);
        emg.extend_from_slice(&e.emg);
    }
    let shape = [batch.len(), p, w];
    Ok(BatchTensors {
        eeg: has_eeg.then(|| tape.constant(&shape, eeg)),
        emg: has_emg.then(|| tape.constant(&shape, emg)),
        batch: batch.len(),
    })
}

/// Pack sequence windows into `[B, K, P, W]` tensors. All windows must have
/// the same length and index into `epochs`.
pub fn sequence_batch(
    tape: &mut Tape,
    epochs: &[PatchedEpoch],
    windows: &[&SequenceSample],
) -> Result<BatchTensors, ModelError> {
    let first = windows.first().ok_or(ModelError::EmptyBatch)?;
    let k = first.len;
    let mut flat: Vec<&PatchedEpoch> = Vec::with_capacity(windows.len() * k);
    for s in windows {
        if s.len != k {
            return Err(ModelError::InconsistentBatch {
                what: format!("sequence length {} vs {}", s.len, k),
            });
        }
        flat.extend(epochs[s.start..s.start + s.len].iter());
    }
    let packed = epoch_batch(tape, &flat)?;
    let reshape = |tape: &mut Tape, v: Var| {
        let s = tape.shape_of(v).to_vec();
        tape.reshape(v, &[windows.len(), k, s[1], s[2]])
    };
    Ok(BatchTensors {
        eeg: packed.eeg.map(|v| reshape(tape, v)),
        emg: packed.emg.map(|v| reshape(tape, v)),
        batch: windows.len(),
    })
}

/// Labels of one sequence window, in epoch order.
pub fn sequence_labels(epochs: &[PatchedEpoch], window: &SequenceSample) -> Vec<StageLabel> {
    epochs[window.start..window.start + window.len].iter().map(|e| e.label).collect()
}

/// Slice out token `index` along the token axis and drop that axis:
/// `[B, N, D] -> [B, D]`.
fn take_token(g: &mut Graph, x: Var, index: usize) -> Var {
    let shape = g.tape.shape_of(x).to_vec();
    let t = g.tape.slice(x, 1, index, 1);
    g.tape.reshape(t, &[shape[0], shape[2]])
}

/// Run the epoch model over a batch, producing logits `[B, n_classes]` for
/// each selected pathway. Representations for embedding export are
/// returned alongside.
pub fn epoch_forward(
    g: &mut Graph,
    model: &EpochModel,
    inputs: &BatchTensors,
    select: PathwaySelect,
) -> Result<(PathwayLogits, PathwayReprs), ModelError> {
    let c = &model.config;
    let mut logits = PathwayLogits { eeg: None, emg: None, mix: None };
    let mut reprs = PathwayReprs { eeg: None, emg: None, mix: None };

    let tok_eeg = if select.eeg || select.mix {
        let x = if select.mix && (inputs.eeg.is_none() || inputs.emg.is_none()) {
            return Err(ModelError::MixNeedsBothModalities);
        } else {
            inputs.require("eeg", PathwayId::Eeg)?
        };
        Some(embed_patches(g, &model.embed_eeg, x, c.use_pos_encoding, c.use_mod_encoding)?)
    } else {
        None
    };
    let tok_emg = if select.emg || select.mix {
        let x = inputs.require("emg", PathwayId::Emg)?;
        Some(embed_patches(g, &model.embed_emg, x, c.use_pos_encoding, c.use_mod_encoding)?)
    } else {
        None
    };

    if select.eeg {
        let out = pathway_forward(g, &model.stack, PathwayId::Eeg, tok_eeg.unwrap(), None)?;
        let cls = take_token(g, out, 0);
        reprs.eeg = Some(cls);
        logits.eeg = Some(head_forward(g, model.head_eeg, cls));
    }
    if select.emg {
        let out = pathway_forward(g, &model.stack, PathwayId::Emg, tok_emg.unwrap(), None)?;
        let cls = take_token(g, out, 0);
        reprs.emg = Some(cls);
        logits.emg = Some(head_forward(g, model.head_emg, cls));
    }
    if select.mix {
        let n = c.patches + 1;
        let tokens = g.tape.concat(&[tok_eeg.unwrap(), tok_emg.unwrap()], 1);
        let out = pathway_forward(g, &model.stack, PathwayId::Mix, tokens, Some((n, n)))?;
        let cls_eeg = take_token(g, out, 0);
        let cls_emg = take_token(g, out, n);
        let fused = g.tape.concat(&[cls_eeg, cls_emg], 1); // [B, 2D]
        reprs.mix = Some(fused);
        logits.mix = Some(head_forward(g, model.head_mix, fused));
    }
    Ok((logits, reprs))
}

/// Sequence classifier: a shared-per-modality epoch encoder whose summary
/// tokens form K-length sequences, refined by a second three-pathway stack
/// that emits one logit row per epoch (many-to-many).
#[derive(Debug)]
pub struct SequenceModel {
    pub config: SequenceModelConfig,
    pub embed_eeg: EmbeddingParams,
    pub embed_emg: EmbeddingParams,
    /// Mono-only encoder applied to each epoch independently.
    pub epoch_stack: MomeStack,
    /// Three-pathway stack over the K epoch summaries.
    pub seq_stack: MomeStack,
    /// Learnable K x D sequence-position encodings, one per modality.
    pub seq_pos_eeg: ParamId,
    pub seq_pos_emg: ParamId,
    pub head_eeg: HeadParams,
    pub head_emg: HeadParams,
    pub head_mix: HeadParams,
}

impl SequenceModel {
    pub fn build(
        store: &mut ParamStore,
        config: SequenceModelConfig,
        rng: &mut impl Rng,
    ) -> Result<SequenceModel, ModelError> {
        let c = &config;
        assert!(
            (1..=c.seq_layers).contains(&c.seq_mix_start_layer),
            "seq_mix_start_layer {} outside 1..={}",
            c.seq_mix_start_layer,
            c.seq_layers
        );
        let embed_eeg =
            EmbeddingParams::build(store, "seq.embed.eeg", c.patch_width, c.patches, c.dim, rng);
        let embed_emg =
            EmbeddingParams::build(store, "seq.embed.emg", c.patch_width, c.patches, c.dim, rng);
        let epoch_stack = MomeStack::build(
            store,
            "seq.epoch_stack",
            RoutingTable::mono_only(c.epoch_layers),
            c.dim,
            c.heads,
            c.ffn_dim,
            rng,
        )?;
        let seq_stack = MomeStack::build(
            store,
            "seq.seq_stack",
            RoutingTable::with_mix(c.seq_layers, c.seq_mix_start_layer),
            c.dim,
            c.heads,
            c.ffn_dim,
            rng,
        )?;
        let seq_pos_eeg = store.add(
            "seq.pos.eeg",
            init::trunc_normal(&[c.seq_len, c.dim], crate::mome::INIT_STD, rng),
        );
        let seq_pos_emg = store.add(
            "seq.pos.emg",
            init::trunc_normal(&[c.seq_len, c.dim], crate::mome::INIT_STD, rng),
        );
        let head_eeg = build_head(store, "seq.head.eeg", c.dim, c.n_classes, rng);
        let head_emg = build_head(store, "seq.head.emg", c.dim, c.n_classes, rng);
        let head_mix = build_head(store, "seq.head.mix", 2 * c.dim, c.n_classes, rng);
        Ok(SequenceModel {
            config,
            embed_eeg,
            embed_emg,
            epoch_stack,
            seq_stack,
            seq_pos_eeg,
            seq_pos_emg,
            head_eeg,
            head_emg,
            head_mix,
        })
    }
}

/// Encode each epoch of a `[B, K, P, W]` batch through one modality's
/// embedding and the mono epoch-level stack, keep the per-epoch summary
/// tokens, and add the sequence positional encoding: result `[B, K, D]`.
pub fn sequence_epoch_encode(
    g: &mut Graph,
    model: &SequenceModel,
    patches: Var,
    modality: PathwayId,
) -> Result<Var, ModelError> {
    let c = &model.config;
    let shape = g.tape.shape_of(patches).to_vec();
    assert_eq!(shape.len(), 4, "sequence_epoch_encode expects [batch, seq, patches, width]");
    let (b, k, p, w) = (shape[0], shape[1], shape[2], shape[3]);

    let (embed, pos) = match modality {
        PathwayId::Eeg => (&model.embed_eeg, model.seq_pos_eeg),
        PathwayId::Emg => (&model.embed_emg, model.seq_pos_emg),
        // The epoch-level routing table has no mix entries; report the miss
        // rather than silently encoding through a mono expert.
        PathwayId::Mix => {
            return Err(MomeError::RoutingMiss { pathway: "mix", layer: 1 }.into());
        }
    };

    let flat = g.tape.reshape(patches, &[b * k, p, w]);
    let tokens = embed_patches(g, embed, flat, c.use_pos_encoding, c.use_mod_encoding)?;
    let out = pathway_forward(g, &model.epoch_stack, modality, tokens, None)?;
    let cls = g.tape.slice(out, 1, 0, 1); // [B*K, 1, D]
    let seq = g.tape.reshape(cls, &[b, k, c.dim]);
    let pos = g.p(pos);
    Ok(g.tape.add(seq, pos))
}

/// Run the sequence-level stack over encoded sequences, producing logits
/// `[B, K, n_classes]` per selected pathway plus the per-epoch
/// representations the heads consumed.
pub fn sequence_forward(
    g: &mut Graph,
    model: &SequenceModel,
    z_eeg: Option<Var>,
    z_emg: Option<Var>,
    select: PathwaySelect,
) -> Result<(PathwayLogits, PathwayReprs), ModelError> {
    let mut logits = PathwayLogits { eeg: None, emg: None, mix: None };
    let mut reprs = PathwayReprs { eeg: None, emg: None, mix: None };

    let need = |z: Option<Var>, pathway: &'static str, modality: PathwayId| {
        z.ok_or(ModelError::MissingModality { pathway, modality: modality.name() })
    };

    if select.eeg {
        let z = need(z_eeg, "eeg", PathwayId::Eeg)?;
        let out = pathway_forward(g, &model.seq_stack, PathwayId::Eeg, z, None)?;
        reprs.eeg = Some(out);
        logits.eeg = Some(head_forward(g, model.head_eeg, out));
    }
    if select.emg {
        let z = need(z_emg, "emg", PathwayId::Emg)?;
        let out = pathway_forward(g, &model.seq_stack, PathwayId::Emg, z, None)?;
        reprs.emg = Some(out);
        logits.emg = Some(head_forward(g, model.head_emg, out));
    }
    if select.mix {
        let (ze, zm) = match (z_eeg, z_emg) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(ModelError::MixNeedsBothModalities),
        };
        let k = g.tape.shape_of(ze)[1];
        let tokens = g.tape.concat(&[ze, zm], 1); // [B, 2K, D]
        let out = pathway_forward(g, &model.seq_stack, PathwayId::Mix, tokens, Some((k, k)))?;
        let halves = g.tape.split(out, 1, &[k, k]);
        let fused = g.tape.concat(&[halves[0], halves[1]], 2); // [B, K, 2D]
        reprs.mix = Some(fused);
        logits.mix = Some(head_forward(g, model.head_mix, fused));
    }
    Ok((logits, reprs))
}

/// A built model of either kind, paired with the store holding its
/// parameters.
#[derive(Debug)]
pub enum Model {
    Epoch(EpochModel),
    Sequence(SequenceModel),
}

impl Model {
    pub fn n_classes(&self) -> usize {
        match self {
            Model::Epoch(m) => m.config.n_classes,
            Model::Sequence(m) => m.config.n_classes,
        }
    }

    pub fn patch_width(&self) -> usize {
        match self {
            Model::Epoch(m) => m.config.patch_width,
            Model::Sequence(m) => m.config.patch_width,
        }
    }

    pub fn patches(&self) -> usize {
        match self {
            Model::Epoch(m) => m.config.patches,
            Model::Sequence(m) => m.config.patches,
        }
    }
}
