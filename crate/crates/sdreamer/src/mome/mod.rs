//! Mixture-of-modality-experts building blocks.
//!
//! Each layer owns exactly one multi-head self-attention parameter set,
//! shared by all pathways, plus one feed-forward "expert" per modality
//! (and a mix expert from the mix-start layer on). A static routing table
//! decides which expert a pathway's tokens pass through at each layer:
//! mono pathways always use their own modality's expert, while the mix
//! pathway routes each modality's half of its token stream separately in
//! early layers (split-route-merge) and the dedicated mix expert afterward.

mod forward;

pub use forward::{embed_patches, ffn_forward, layer_forward, msa_forward, pathway_forward, Graph};

use rand::Rng;
use thiserror::Error;

use crate::params::{init, ParamId, ParamStore};

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Initialization std for weights and embeddings.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PathwayId {
    Eeg,
    Emg,
    Mix,
}

impl PathwayId {
    pub const ALL: [PathwayId; 3] = [PathwayId::Eeg, PathwayId::Emg, PathwayId::Mix];

    pub fn name(self) -> &'static str {
        match self {
            PathwayId::Eeg => "eeg",
            PathwayId::Emg => "emg",
            PathwayId::Mix => "mix",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertId {
    Eeg,
    Emg,
    Mix,
}

/// Expert selection for one (pathway, layer) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    /// All tokens pass one expert.
    Expert(ExpertId),
    /// Mix tokens before the mix-start layer: the EEG half routes through
    /// the EEG expert, the EMG half through the EMG expert, and the halves
    /// are re-concatenated.
    SplitMerge,
}

#[derive(Debug, Error)]
pub enum MomeError {
    #[error("routing undefined for pathway {pathway} at layer {layer}")]
    RoutingMiss { pathway: &'static str, layer: usize },
    #[error("patch width {got} does not match embedding width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("token count {got} does not match positional encoding rows {expected}")]
    PositionCount { expected: usize, got: usize },
    #[error("model dim {dim} is not divisible by head count {heads}")]
    BadHeadCount { dim: usize, heads: usize },
}

/// Static expert routing: total on `{eeg, emg} x 1..=layers`, plus
/// `mix x 1..=layers` when the stack carries a mix pathway.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingTable {
    layers: usize,
    /// 1-based first layer with a mix expert; `None` for stacks whose
    /// routing domain excludes the mix pathway entirely.
    mix_start: Option<usize>,
}

impl RoutingTable {
    /// Stack serving all three pathways; `mix_start` is the 1-based first
    /// layer using the dedicated mix expert.
    pub fn with_mix(layers: usize, mix_start: usize) -> Self {
        assert!(layers >= 1, "a stack needs at least one layer");
        assert!(
            (1..=layers).contains(&mix_start),
            "mix_start {} outside 1..={}",
            mix_start,
            layers
        );
        RoutingTable { layers, mix_start: Some(mix_start) }
    }

    /// Stack serving only the mono pathways (the sequence model's
    /// epoch-level stack). `layers == 0` gives an identity stack.
    pub fn mono_only(layers: usize) -> Self {
        RoutingTable { layers, mix_start: None }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn mix_start(&self) -> Option<usize> {
        self.mix_start
    }

    /// Expert choice for `pathway` at 1-based `layer`.
    pub fn route(&self, pathway: PathwayId, layer: usize) -> Result<Route, MomeError> {
        let miss = || MomeError::RoutingMiss { pathway: pathway.name(), layer };
        if layer == 0 || layer > self.layers {
            return Err(miss());
        }
        match pathway {
            PathwayId::Eeg => Ok(Route::Expert(ExpertId::Eeg)),
            PathwayId::Emg => Ok(Route::Expert(ExpertId::Emg)),
            PathwayId::Mix => match self.mix_start {
                None => Err(miss()),
                Some(start) if layer >= start => Ok(Route::Expert(ExpertId::Mix)),
                Some(_) => Ok(Route::SplitMerge),
            },
        }
    }

    /// Every (pathway, layer) pair the table is defined on.
    pub fn domain(&self) -> Vec<(PathwayId, usize)> {
        let mut d = Vec::new();
        for layer in 1..=self.layers {
            d.push((PathwayId::Eeg, layer));
            d.push((PathwayId::Emg, layer));
            if self.mix_start.is_some() {
                d.push((PathwayId::Mix, layer));
            }
        }
        d
    }

    /// Does layer `layer` (1-based) hold a mix expert parameter set?
    pub fn has_mix_expert(&self, layer: usize) -> bool {
        self.mix_start.is_some_and(|s| layer >= s)
    }
}

/// Shared multi-head self-attention parameters for one layer.
#[derive(Debug, Clone, Copy)]
pub struct MsaParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

/// One expert feed-forward block: D -> ffn_dim -> D with GELU.
#[derive(Debug, Clone, Copy)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// Parameters of one MoME layer: one shared attention, two layer norms,
/// and the experts this layer's routing table actually uses.
#[derive(Debug, Clone, Copy)]
pub struct MomeLayerParams {
    pub msa: MsaParams,
    pub ln_attn: LayerNormParams,
    pub ln_ffn: LayerNormParams,
    pub ffn_eeg: FfnParams,
    pub ffn_emg: FfnParams,
    pub ffn_mix: Option<FfnParams>,
}

impl MomeLayerParams {
    pub fn expert(&self, id: ExpertId) -> &FfnParams {
        match id {
            ExpertId::Eeg => &self.ffn_eeg,
            ExpertId::Emg => &self.ffn_emg,
            ExpertId::Mix => self
                .ffn_mix
                .as_ref()
                .expect("routing selected the mix expert on a layer built without one"),
        }
    }
}

/// A stack of MoME layers with its routing table.
#[derive(Debug)]
pub struct MomeStack {
    pub routing: RoutingTable,
    pub layers: Vec<MomeLayerParams>,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl MomeStack {
    /// Register all parameters for a stack under `prefix` and return the
    /// id bundle. Weights are truncated-normal, biases zero, layer-norm
    /// gain one / bias zero.
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        routing: RoutingTable,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<MomeStack, MomeError> {
        if !dim.is_multiple_of(heads) {
            return Err(MomeError::BadHeadCount { dim, heads });
        }
        let mut layers = Vec::with_capacity(routing.layers());
        for layer in 1..=routing.layers() {
            let lp = format!("{prefix}.layer{layer}");
            let msa = MsaParams {
                wq: store.add(&format!("{lp}.msa.wq"), init::trunc_normal(&[dim, dim], INIT_STD, rng)),
                bq: store.add(&format!("{lp}.msa.bq"), init::zeros(&[dim])),
                wk: store.add(&format!("{lp}.msa.wk"), init::trunc_normal(&[dim, dim], INIT_STD, rng)),
                bk: store.add(&format!("{lp}.msa.bk"), init::zeros(&[dim])),
                wv: store.add(&format!("{lp}.msa.wv"), init::trunc_normal(&[dim, dim], INIT_STD, rng)),
                bv: store.add(&format!("{lp}.msa.bv"), init::zeros(&[dim])),
                wo: store.add(&format!("{lp}.msa.wo"), init::trunc_normal(&[dim, dim], INIT_STD, rng)),
                bo: store.add(&format!("{lp}.msa.bo"), init::zeros(&[dim])),
            };
            let ln_attn = LayerNormParams {
                gain: store.add(&format!("{lp}.ln_attn.gain"), init::ones(&[dim])),
                bias: store.add(&format!("{lp}.ln_attn.bias"), init::zeros(&[dim])),
            };
            let ln_ffn = LayerNormParams {
                gain: store.add(&format!("{lp}.ln_ffn.gain"), init::ones(&[dim])),
                bias: store.add(&format!("{lp}.ln_ffn.bias"), init::zeros(&[dim])),
            };
            let ffn_eeg = build_ffn(store, &format!("{lp}.expert.eeg"), dim, ffn_dim, rng);
            let ffn_emg = build_ffn(store, &format!("{lp}.expert.emg"), dim, ffn_dim, rng);
            let ffn_mix = if routing.has_mix_expert(layer) {
                Some(build_ffn(store, &format!("{lp}.expert.mix"), dim, ffn_dim, rng))
            } else {
                None
            };
            layers.push(MomeLayerParams { msa, ln_attn, ln_ffn, ffn_eeg, ffn_emg, ffn_mix });
        }
        Ok(MomeStack { routing, layers, dim, heads, ffn_dim })
    }
}

fn build_ffn(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    ffn_dim: usize,
    rng: &mut impl Rng,
) -> FfnParams {
    FfnParams {
        w1: store.add(&format!("{prefix}.w1"), init::trunc_normal(&[dim, ffn_dim], INIT_STD, rng)),
        b1: store.add(&format!("{prefix}.b1"), init::zeros(&[ffn_dim])),
        w2: store.add(&format!("{prefix}.w2"), init::trunc_normal(&[ffn_dim, dim], INIT_STD, rng)),
        b2: store.add(&format!("{prefix}.b2"), init::zeros(&[dim])),
    }
}

/// Patch-embedding parameters for one modality.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingParams {
    /// W x D linear projection of each patch.
    pub e_trans: ParamId,
    /// 1 x 1 x D learnable classification token.
    pub t_cls: ParamId,
    /// (P+1) x D positional encoding (covers the CLS slot).
    pub e_pos: ParamId,
    /// D modality encoding, broadcast over all positions.
    pub e_mod: ParamId,
}

impl EmbeddingParams {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        patches: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> EmbeddingParams {
        EmbeddingParams {
            e_trans: store.add(&format!("{prefix}.e_trans"), init::trunc_normal(&[width, dim], INIT_STD, rng)),
            t_cls: store.add(&format!("{prefix}.t_cls"), init::trunc_normal(&[1, 1, dim], INIT_STD, rng)),
            e_pos: store.add(&format!("{prefix}.e_pos"), init::trunc_normal(&[patches + 1, dim], INIT_STD, rng)),
            e_mod: store.add(&format!("{prefix}.e_mod"), init::trunc_normal(&[dim], INIT_STD, rng)),
        }
    }
}
