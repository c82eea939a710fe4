//! Forward passes through embeddings and MoME layers.
//!
//! All functions operate on a [`Graph`], which couples one tape with one
//! parameter store and memoizes parameter binding, so that every use of a
//! shared parameter (notably the per-layer attention weights) resolves to
//! one tape variable and gradients from all pathways accumulate there.

use crate::params::{ParamBinder, ParamId, ParamStore};
use crate::tensor::{Tape, Var};

use super::{
    EmbeddingParams, FfnParams, MomeError, MomeLayerParams, MomeStack, MsaParams, PathwayId,
    Route, RoutingTable, LN_EPS,
};

/// One forward pass in construction: a tape plus parameter bindings.
pub struct Graph<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    binder: ParamBinder,
}

impl<'a> Graph<'a> {
    /// `trainable = false` binds parameters as constants so the tape
    /// records no backward rules (inference mode).
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, trainable: bool) -> Self {
        let binder = ParamBinder::new(store, trainable);
        Graph { tape, store, binder }
    }

    /// Bind a parameter onto the tape (memoized).
    pub fn p(&mut self, id: ParamId) -> Var {
        self.binder.var(self.tape, self.store, id)
    }

    /// Finish graph construction, releasing the tape and store borrows.
    /// The returned binder harvests parameter gradients after `backward`.
    pub fn finish(self) -> ParamBinder {
        self.binder
    }

    /// Linear map over the last axis: `x @ w + b`.
    fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let wv = self.p(w);
        let bv = self.p(b);
        let y = self.tape.matmul(x, wv);
        self.tape.add(y, bv)
    }

    fn layer_norm(&mut self, x: Var, ln: &super::LayerNormParams) -> Var {
        let g = self.p(ln.gain);
        let b = self.p(ln.bias);
        self.tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Embed a batch of patched signals: project each width-W patch to D
/// dimensions, prepend the CLS token, and add the positional and modality
/// encodings (each optional for ablations).
///
/// `patches` has shape `[B, P, W]`; the result has shape `[B, P+1, D]`.
pub fn embed_patches(
    g: &mut Graph,
    params: &EmbeddingParams,
    patches: Var,
    use_pos: bool,
    use_mod: bool,
) -> Result<Var, MomeError> {
    let shape = g.tape.shape_of(patches).to_vec();
    assert_eq!(shape.len(), 3, "embed_patches expects [batch, patches, width]");
    let (b, p, w) = (shape[0], shape[1], shape[2]);

    let e_trans = g.p(params.e_trans);
    let expected = g.tape.shape_of(e_trans)[0];
    if w != expected {
        return Err(MomeError::WidthMismatch { expected, got: w });
    }

    let projected = g.tape.matmul(patches, e_trans); // [B, P, D]
    let d = g.tape.shape_of(projected)[2];

    // Tile the CLS token across the batch by broadcasting it onto zeros.
    let zeros = g.tape.constant(&[b, 1, d], vec![0.0; b * d]);
    let t_cls = g.p(params.t_cls);
    let cls = g.tape.add(zeros, t_cls); // [B, 1, D]

    let mut tokens = g.tape.concat(&[cls, projected], 1); // [B, P+1, D]
    if use_pos {
        let e_pos = g.p(params.e_pos);
        let pos_rows = g.tape.shape_of(e_pos)[0];
        if pos_rows != p + 1 {
            return Err(MomeError::PositionCount { expected: pos_rows, got: p + 1 });
        }
        tokens = g.tape.add(tokens, e_pos);
    }
    if use_mod {
        let e_mod = g.p(params.e_mod);
        tokens = g.tape.add(tokens, e_mod);
    }
    Ok(tokens)
}

/// Multi-head scaled dot-product self-attention with output projection.
/// `x` has shape `[B, N, D]`; the caller adds the residual.
pub fn msa_forward(g: &mut Graph, params: &MsaParams, x: Var, heads: usize) -> Var {
    let shape = g.tape.shape_of(x).to_vec();
    assert_eq!(shape.len(), 3, "msa_forward expects [batch, tokens, dim]");
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    assert_eq!(d % heads, 0, "dim {} not divisible by heads {}", d, heads);
    let dh = d / heads;

    let q = g.linear(x, params.wq, params.bq);
    let k = g.linear(x, params.wk, params.bk);
    let v = g.linear(x, params.wv, params.bv);

    let split_heads = |g: &mut Graph, t: Var| {
        let t = g.tape.reshape(t, &[b, n, heads, dh]);
        g.tape.swap_axes(t, 1, 2) // [B, h, N, dh]
    };
    let q = split_heads(g, q);
    let k = split_heads(g, k);
    let v = split_heads(g, v);

    let kt = g.tape.swap_axes(k, 2, 3); // [B, h, dh, N]
    let scores = g.tape.matmul(q, kt); // [B, h, N, N]
    let scores = g.tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.tape.softmax(scores, 3);
    let ctx = g.tape.matmul(attn, v); // [B, h, N, dh]
    let ctx = g.tape.swap_axes(ctx, 1, 2); // [B, N, h, dh]
    let ctx = g.tape.reshape(ctx, &[b, n, d]);
    g.linear(ctx, params.wo, params.bo)
}

/// One expert feed-forward block with GELU.
pub fn ffn_forward(g: &mut Graph, params: &FfnParams, x: Var) -> Var {
    let h = g.linear(x, params.w1, params.b1);
    let h = g.tape.gelu(h);
    g.linear(h, params.w2, params.b2)
}

/// One MoME layer: pre-norm shared attention with residual, then the
/// routed expert with residual. For the mix pathway in split-route-merge
/// layers, `mix_split` gives the (EEG, EMG) token counts along axis 1.
#[allow(clippy::too_many_arguments)]
pub fn layer_forward(
    g: &mut Graph,
    layer: &MomeLayerParams,
    routing: &RoutingTable,
    pathway: PathwayId,
    layer_idx: usize,
    heads: usize,
    tokens: Var,
    mix_split: Option<(usize, usize)>,
) -> Result<Var, MomeError> {
    let route = routing.route(pathway, layer_idx)?;

    let normed = g.layer_norm(tokens, &layer.ln_attn);
    let attended = msa_forward(g, &layer.msa, normed, heads);
    let i = g.tape.add(attended, tokens);

    let ffn_in = g.layer_norm(i, &layer.ln_ffn);
    let expert_out = match route {
        Route::Expert(id) => ffn_forward(g, layer.expert(id), ffn_in),
        Route::SplitMerge => {
            let (n_eeg, n_emg) =
                mix_split.expect("split-route-merge requires the mix token split sizes");
            let halves = g.tape.split(ffn_in, 1, &[n_eeg, n_emg]);
            let eeg_out = ffn_forward(g, &layer.ffn_eeg, halves[0]);
            let emg_out = ffn_forward(g, &layer.ffn_emg, halves[1]);
            g.tape.concat(&[eeg_out, emg_out], 1)
        }
    };
    Ok(g.tape.add(expert_out, i))
}

/// Run `tokens` through every layer of the stack along one pathway.
pub fn pathway_forward(
    g: &mut Graph,
    stack: &MomeStack,
    pathway: PathwayId,
    tokens: Var,
    mix_split: Option<(usize, usize)>,
) -> Result<Var, MomeError> {
    let mut t = tokens;
    for (idx, layer) in stack.layers.iter().enumerate() {
        t = layer_forward(g, layer, &stack.routing, pathway, idx + 1, stack.heads, t, mix_split)?;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::gradcheck;
    use rand::SeedableRng;

    fn test_rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(11)
    }

    fn set(store: &mut ParamStore, id: ParamId, data: &[f64]) {
        store.get_mut(id).data_mut().copy_from_slice(data);
    }

    fn zero(store: &mut ParamStore, id: ParamId) {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    fn embed_params(store: &mut ParamStore, w: usize, p: usize, d: usize) -> EmbeddingParams {
        let mut rng = test_rng();
        EmbeddingParams::build(store, "embed.test", w, p, d, &mut rng)
    }

    #[test]
    fn identity_projection_passes_patches_through() {
        let mut store = ParamStore::new();
        let e = embed_params(&mut store, 2, 2, 2);
        set(&mut store, e.e_trans, &[1.0, 0.0, 0.0, 1.0]);
        zero(&mut store, e.t_cls);
        zero(&mut store, e.e_pos);
        zero(&mut store, e.e_mod);

        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store, false);
        let x = g.tape.constant(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let tokens = embed_patches(&mut g, &e, x, true, true).unwrap();
        assert_eq!(tape.shape_of(tokens), &[1, 3, 2]);
        assert_eq!(tape.value(tokens), &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn all_zero_embedding_gives_zero_tokens() {
        let mut store = ParamStore::new();
        let e = embed_params(&mut store, 2, 2, 2);
        for id in [e.e_trans, e.t_cls, e.e_pos, e.e_mod] {
            zero(&mut store, id);
        }
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store, false);
        let x = g.tape.constant(&[1, 2, 2], vec![0.0; 4]);
        let tokens = embed_patches(&mut g, &e, x, true, true).unwrap();
        assert!(tape.value(tokens).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doubling_e_mod_shifts_every_token_equally() {
        let mut store = ParamStore::new();
        let e = embed_params(&mut store, 2, 2, 2);
        let m0: Vec<f64> = store.get(e.e_mod).data().to_vec();

        let run = |store: &ParamStore| -> Vec<f64> {
            let mut tape = Tape::new();
            let mut g = Graph::new(&mut tape, store, false);
            let x = g.tape.constant(&[1, 2, 2], vec![0.3, -0.1, 0.7, 0.2]);
            let t = embed_patches(&mut g, &e, x, true, true).unwrap();
            tape.value(t).to_vec()
        };
        let before = run(&store);
        let doubled: Vec<f64> = m0.iter().map(|v| 2.0 * v).collect();
        set(&mut store, e.e_mod, &doubled);
        let after = run(&store);
        for token in 0..3 {
            for j in 0..2 {
                let diff = after[token * 2 + j] - before[token * 2 + j];
                assert!((diff - m0[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn width_mismatch_is_reported() {
        let mut store = ParamStore::new();
        let e = embed_params(&mut store, 4, 2, 2);
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store, false);
        let x = g.tape.constant(&[1, 2, 3], vec![0.0; 6]);
        let err = embed_patches(&mut g, &e, x, true, true).unwrap_err();
        assert!(matches!(err, MomeError::WidthMismatch { expected: 4, got: 3 }));
    }

    fn msa_params(store: &mut ParamStore, d: usize) -> MsaParams {
        let mut rng = test_rng();
        MsaParams {
            wq: store.add("m.wq", crate::params::init::trunc_normal(&[d, d], 0.1, &mut rng)),
            bq: store.add("m.bq", crate::params::init::zeros(&[d])),
            wk: store.add("m.wk", crate::params::init::trunc_normal(&[d, d], 0.1, &mut rng)),
            bk: store.add("m.bk", crate::params::init::zeros(&[d])),
            wv: store.add("m.wv", crate::params::init::trunc_normal(&[d, d], 0.1, &mut rng)),
            bv: store.add("m.bv", crate::params::init::trunc_normal(&[d], 0.1, &mut rng)),
            wo: store.add("m.wo", crate::params::init::trunc_normal(&[d, d], 0.1, &mut rng)),
            bo: store.add("m.bo", crate::params::init::trunc_normal(&[d], 0.1, &mut rng)),
        }
    }

    #[test]
    fn single_token_attention_is_value_through_output() {
        // With one token the attention weight is exactly 1, so the output is
        // (x Wv + bv) Wo + bo regardless of Wq/Wk.
        let d = 4;
        let mut store = ParamStore::new();
        let m = msa_params(&mut store, d);
        let x: Vec<f64> = vec![0.3, -0.7, 0.9, 0.1];

        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store, false);
        let xv = g.tape.constant(&[1, 1, d], x.clone());
        let out = msa_forward(&mut g, &m, xv, 2);

        let wv = store.get(m.wv).data();
        let bv = store.get(m.bv).data();
        let wo = store.get(m.wo).data();
        let bo = store.get(m.bo).data();
        let mut v = vec![0.0; d];
        for j in 0..d {
            v[j] = bv[j] + (0..d).map(|i| x[i] * wv[i * d + j]).sum::<f64>();
        }
        let mut expect = vec![0.0; d];
        for j in 0..d {
            expect[j] = bo[j] + (0..d).map(|i| v[i] * wo[i * d + j]).sum::<f64>();
        }
        for (a, b) in tape.value(out).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_get_identical_outputs() {
        let d = 6;
        let mut store = ParamStore::new();
        let m = msa_params(&mut store, d);
        let row: Vec<f64> = (0..d).map(|i| (i as f64 * 0.4).sin()).collect();
        let mut data = row.clone();
        data.extend_from_slice(&row);
        data.extend_from_slice(&row);

        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store, false);
        let x = g.tape.constant(&[1, 3, d], data);
        let out = msa_forward(&mut g, &m, x, 2);
        let v = tape.value(out);
        for t in 1..3 {
            for j in 0..d {
                assert!((v[j] - v[t * d + j]).abs() < 1e-12);
            }
        }
    }

    fn small_stack(store: &mut ParamStore, routing: RoutingTable) -> MomeStack {
        let mut rng = test_rng();
        MomeStack::build(store, "stack", routing, 8, 2, 12, &mut rng).unwrap()
    }

    fn zero_layer(store: &mut ParamStore, layer: &MomeLayerParams) {
        let MsaParams { wq, bq, wk, bk, wv, bv, wo, bo } = layer.msa;
        for id in [wq, bq, wk, bk, wv, bv, wo, bo] {
            zero(store, id);
        }
        for ffn in [Some(layer.ffn_eeg), Some(layer.ffn_emg), layer.ffn_mix].into_iter().flatten() {
            for id in [ffn.w1, ffn.b1, ffn.w2, ffn.b2] {
                zero(store, id);
            }
        }
    }

    #[test]
    fn zero_weights_make_layer_identity() {
        let mut store = ParamStore::new();
        let stack = small_stack(&mut store, RoutingTable::with_mix(1, 1));
        zero_layer(&mut store, &stack.layers[0]);

        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.13).cos()).collect();
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store, false);
        let x = g.tape.constant(&[1, 3, 8], data.clone());
        let out = pathway_forward(&mut g, &stack, PathwayId::Eeg, x, None).unwrap();
        assert_eq!(tape.value(out), &data[..]);
    }

    #[test]
    fn empty_stack_is_identity() {
        let mut store = ParamStore::new();
        let stack = small_stack(&mut store, RoutingTable::mono_only(0));
        let data: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store, false);
        let x = g.tape.constant(&[1, 2, 8], data.clone());
        let out = pathway_forward(&mut g, &stack, PathwayId::Emg, x, None).unwrap();
        assert_eq!(tape.value(out), &data[..]);
    }

    #[test]
    fn early_mix_split_merge_matches_mono_halves_when_attention_disabled() {
        // Zeroing the MSA weights makes attention contribute nothing, so the
        // mix layer's expert sub-step must equal the mono layers' on each half.
        let mut store = ParamStore::new();
        let stack = small_stack(&mut store, RoutingTable::with_mix(2, 2));
        for layer in &stack.layers {
            let MsaParams { wq, bq, wk, bk, wv, bv, wo, bo } = layer.msa;
            for id in [wq, bq, wk, bk, wv, bv, wo, bo] {
                zero(&mut store, id);
            }
        }

        let d = 8;
        let eeg_half: Vec<f64> = (0..2 * d).map(|i| (i as f64 * 0.21).sin()).collect();
        let emg_half: Vec<f64> = (0..3 * d).map(|i| (i as f64 * 0.17).cos()).collect();
        let mut mix_data = eeg_half.clone();
        mix_data.extend_from_slice(&emg_half);

        let layer = &stack.layers[0]; // layer 1 routes mix by split-merge

        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store, false);
        let mix = g.tape.constant(&[1, 5, d], mix_data);
        let mix_out = layer_forward(
            &mut g,
            layer,
            &stack.routing,
            PathwayId::Mix,
            1,
            stack.heads,
            mix,
            Some((2, 3)),
        )
        .unwrap();

        let a = g.tape.constant(&[1, 2, d], eeg_half);
        let a_out = layer_forward(&mut g, layer, &stack.routing, PathwayId::Eeg, 1, stack.heads, a, None)
            .unwrap();
        let b = g.tape.constant(&[1, 3, d], emg_half);
        let b_out = layer_forward(&mut g, layer, &stack.routing, PathwayId::Emg, 1, stack.heads, b, None)
            .unwrap();

        let expected: Vec<f64> =
            tape.value(a_out).iter().chain(tape.value(b_out)).copied().collect();
        for (x, y) in tape.value(mix_out).iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mutating_shared_msa_changes_all_pathways() {
        let mut store = ParamStore::new();
        let stack = small_stack(&mut store, RoutingTable::with_mix(1, 1));
        let data: Vec<f64> = (0..32).map(|i| (i as f64 * 0.31).sin()).collect();

        let run = |store: &ParamStore, pathway: PathwayId| -> Vec<f64> {
            let mut tape = Tape::new();
            let mut g = Graph::new(&mut tape, store, false);
            let x = g.tape.constant(&[1, 4, 8], data.clone());
            let split = if pathway == PathwayId::Mix { Some((2, 2)) } else { None };
            let out = pathway_forward(&mut g, &stack, pathway, x, split).unwrap();
            tape.value(out).to_vec()
        };

        let before: Vec<Vec<f64>> =
            PathwayId::ALL.iter().map(|&p| run(&store, p)).collect();
        // Perturb one entry of the single shared Wq. (A uniform shift of the
        // whole matrix would be invisible: layer-normed rows sum to zero.)
        let wq = stack.layers[0].msa.wq;
        let mut bumped: Vec<f64> = store.get(wq).data().to_vec();
        bumped[3] += 0.5;
        set(&mut store, wq, &bumped);
        let after: Vec<Vec<f64>> = PathwayId::ALL.iter().map(|&p| run(&store, p)).collect();

        for (b, a) in before.iter().zip(&after) {
            assert!(b.iter().zip(a).any(|(x, y)| (x - y).abs() > 1e-9));
        }
    }

    #[test]
    fn mix_gradients_reach_all_expert_kinds_and_shared_attention() {
        let mut store = ParamStore::new();
        let stack = small_stack(&mut store, RoutingTable::with_mix(2, 2));
        let data: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();

        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store, true);
        let x = g.tape.constant(&[1, 4, 8], data);
        let out = pathway_forward(&mut g, &stack, PathwayId::Mix, x, Some((2, 2))).unwrap();
        let loss = g.tape.sum_all(out);
        let binder = g.finish();
        tape.backward(loss);
        binder.harvest_grads(&tape, &mut store);

        let grad_norm = |id: ParamId| -> f64 {
            store.get(id).grad.as_deref().map_or(0.0, |g| g.iter().map(|v| v * v).sum())
        };
        assert!(grad_norm(stack.layers[0].ffn_eeg.w1) > 0.0);
        assert!(grad_norm(stack.layers[0].ffn_emg.w1) > 0.0);
        assert!(grad_norm(stack.layers[1].ffn_mix.unwrap().w1) > 0.0);
        assert!(grad_norm(stack.layers[0].msa.wq) > 0.0);
        assert!(grad_norm(stack.layers[1].msa.wq) > 0.0);
    }

    #[test]
    fn full_layer_gradient_matches_finite_differences() {
        // Gradient with respect to the token input through one whole layer
        // (attention + expert + norms + residuals) on a 3-token instance.
        let mut store = ParamStore::new();
        let stack = small_stack(&mut store, RoutingTable::with_mix(1, 1));
        let shape = [1usize, 3, 8];
        let x0: Vec<f64> = (0..24).map(|i| (i as f64 * 0.29).sin() * 0.8).collect();

        let forward = |x: &[f64], store: &ParamStore, trainable: bool| -> (f64, Option<Vec<f64>>) {
            let mut tape = Tape::new();
            let mut g = Graph::new(&mut tape, store, trainable);
            let xv = if trainable {
                g.tape.variable(&shape, x.to_vec())
            } else {
                g.tape.constant(&shape, x.to_vec())
            };
            let out = pathway_forward(&mut g, &stack, PathwayId::Eeg, xv, None).unwrap();
            let w: Vec<f64> = (0..24).map(|i| ((i as f64) * 0.83 + 0.2).cos()).collect();
            let wv = g.tape.constant(&[1, 3, 8], w);
            let prod = g.tape.mul(out, wv);
            let loss = g.tape.sum_all(prod);
            if trainable {
                g.tape.backward(loss);
            }
            let grad = if trainable { Some(tape.grad(xv).unwrap().to_vec()) } else { None };
            (tape.value(loss)[0], grad)
        };

        let (_, analytic) = forward(&x0, &store, true);
        let numeric = gradcheck::finite_diff(&x0, 1e-5, |x| forward(x, &store, false).0);
        let err = gradcheck::max_rel_error(&analytic.unwrap(), &numeric, 1e-6);
        assert!(err <= 1e-4, "layer gradient error {:.3e}", err);
    }
}
