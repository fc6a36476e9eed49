//! Forward pass of the navigation model, one decision step at a time.
//!
//! Row 0 of every node block is the STOP entry; row `i + 1` is map node `i`
//! in insertion order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::{Codebook, CodebookKind};
use crate::tensor::nn::{self, Init};
use crate::tensor::{ParamSet, Tape, Tensor, Var};
use crate::{Error, Result};

use super::topo::{NodeStatus, TopoMap};

/// Hop-distance buckets for the graph-aware attention bias: 0, 1, 2, ≥3.
pub const HOP_BUCKETS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub hidden: usize,
    pub heads: usize,
    pub lang_layers: usize,
    pub cross_layers: usize,
    pub ffn_mult: usize,
    pub feature_dim: usize,
    pub visual_heads: usize,
    pub max_steps: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
    pub num_rooms: usize,
    pub use_layout: bool,
    pub use_dreamer: bool,
    pub dynamic_fuse: bool,
    pub codebook: CodebookKind,
    pub init_seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            heads: 4,
            lang_layers: 2,
            cross_layers: 2,
            ffn_mult: 2,
            feature_dim: 32,
            visual_heads: 4,
            max_steps: 15,
            max_tokens: 16,
            vocab_size: 47,
            num_rooms: 8,
            use_layout: true,
            use_dreamer: true,
            dynamic_fuse: true,
            codebook: CodebookKind::Visual,
            init_seed: 0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by {} heads", self.hidden, self.heads));
        }
        if self.feature_dim == 0 || self.visual_heads == 0 || self.feature_dim % self.visual_heads != 0 {
            return bad(format!(
                "feature dim {} not divisible by {} visual heads",
                self.feature_dim, self.visual_heads
            ));
        }
        if self.max_steps == 0 || self.max_tokens == 0 || self.vocab_size < 4 || self.num_rooms < 2 {
            return bad("max_steps, max_tokens, vocab_size and num_rooms must be positive".into());
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be positive".into());
        }
        Ok(())
    }

    fn inner(&self) -> usize {
        self.hidden * self.ffn_mult
    }
}

/// Fresh parameters for the configured variant.
pub fn init_params(cfg: &AgentConfig) -> Result<ParamSet> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let (h, d, inner) = (cfg.hidden, cfg.feature_dim, cfg.inner());
    {
        let mut init = Init::new(&mut params, &mut rng);
        init.embedding("lang.tok", cfg.vocab_size, h);
        init.embedding("lang.pos", cfg.max_tokens, h);
        init.embedding("lang.type", 1, h);
        init.layer_norm("lang.ln", h);
        for i in 0..cfg.lang_layers {
            init.encoder_layer(&format!("lang.layer{i}"), h, inner);
        }
        init.embedding("vis.type", 2, d);
        init.encoder_layer("vis.layer", d, d * cfg.ffn_mult);
        init.linear("node.vis", d, h);
        init.linear("node.loc", 3, h);
        init.embedding("node.step", cfg.max_steps + 1, h);
        init.embedding("node.stop", 1, h);
        init.layer_norm("node.ln", h);
        init.encoder_layer("gasa.layer", h, inner);
        for i in 0..cfg.cross_layers {
            init.decoder_layer(&format!("glo.layer{i}"), h, h, inner);
            init.decoder_layer(&format!("loc.layer{i}"), h, h, inner);
        }
        init.head("head.glo", h, h, 1);
        init.head("head.loc", h, h, 1);
        init.head("head.gate", 2 * h, h, 1);
        if cfg.use_dreamer {
            init.attention("dream.attn", h, d, h);
            init.layer_norm("dream.ln", h);
            init.head("dream.score", h, h, 1);
            init.head("head.lambda", 2 * h, h, 1);
            init.head("head.fgd_glo", h, h, 1);
            init.head("head.fgd_dream", h, h, 1);
        }
        init.head("og", d, d, 1);
        init.linear("mlm", h, cfg.vocab_size);
        init.linear("mrc", h, cfg.num_rooms);
        if cfg.use_layout && cfg.codebook == CodebookKind::Classifier {
            init.linear("layout.cls", h, cfg.num_rooms);
        }
    }
    params.insert("gasa.bias", Tensor::zeros(&[HOP_BUCKETS, cfg.heads]));
    if cfg.use_layout {
        // small layout heads start near the uniform room distribution
        if cfg.codebook == CodebookKind::Classifier {
            params.get_mut("layout.cls.w")?.data_mut().iter_mut().for_each(|w| *w *= 0.01);
        } else {
            params.insert("layout.proj", Tensor::normal(&[h, d], 0.01, &mut rng));
        }
    }
    Ok(params)
}

/// Encoder input block for the instruction: token + position + type
/// embeddings, normalised, then the self-attention stack. `L × h`.
pub fn encode_instruction(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &AgentConfig,
    tokens: &[usize],
) -> Result<Var> {
    if tokens.is_empty() || tokens.len() > cfg.max_tokens {
        return Err(Error::Config(format!(
            "instruction length {} outside 1..={}",
            tokens.len(),
            cfg.max_tokens
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Config(format!("token id {t} outside vocabulary of {}", cfg.vocab_size)));
    }
    let tok = tape.param(params, "lang.tok")?;
    let pos = tape.param(params, "lang.pos")?;
    let typ = tape.param(params, "lang.type")?;
    let x = tape.gather_rows(tok, tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let p = tape.gather_rows(pos, &positions)?;
    let x = tape.add(x, p)?;
    let x = tape.add_row(x, typ)?;
    let mut x = nn::layer_norm(tape, params, "lang.ln", x)?;
    for i in 0..cfg.lang_layers {
        x = nn::encoder_layer(tape, params, &format!("lang.layer{i}"), x, None, cfg.heads)?;
    }
    Ok(x)
}

/// Joint self-attention over panorama views and object features.
/// Returns `(views D×d, objects n_obj×d)`; objects are `None` when absent.
pub fn fuse_local_visuals(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &AgentConfig,
    panorama: &[Vec<f64>],
    objects: &[Vec<f64>],
) -> Result<(Var, Option<Var>)> {
    let typ = tape.param(params, "vis.type")?;
    let view_type = tape.gather_rows(typ, &[0])?;
    let views = tape.constant(Tensor::from_rows(panorama)?);
    let views = tape.add_row(views, view_type)?;
    let x = if objects.is_empty() {
        views
    } else {
        let obj_type = tape.gather_rows(typ, &[1])?;
        let objs = tape.constant(Tensor::from_rows(objects)?);
        let objs = tape.add_row(objs, obj_type)?;
        tape.concat_rows(&[views, objs])?
    };
    let y = nn::encoder_layer(tape, params, "vis.layer", x, None, cfg.visual_heads)?;
    let nv = panorama.len();
    let view_rows: Vec<usize> = (0..nv).collect();
    let v = tape.gather_rows(y, &view_rows)?;
    let o = if objects.is_empty() {
        None
    } else {
        let rows: Vec<usize> = (nv..nv + objects.len()).collect();
        Some(tape.gather_rows(y, &rows)?)
    };
    Ok((v, o))
}

/// Location features of `to` relative to `from`: distance/10, sin and cos
/// of the heading.
pub fn location_features(from: [f64; 2], to: [f64; 2]) -> [f64; 3] {
    let (dx, dy) = (to[0] - from[0], to[1] - from[1]);
    let dist = (dx * dx + dy * dy).sqrt();
    if dist == 0.0 {
        return [0.0, 0.0, 1.0];
    }
    let h = dy.atan2(dx);
    [dist / 10.0, h.sin(), h.cos()]
}

/// `(1 + n) × h` node embeddings: STOP row, then per map node its visual
/// projection + location embedding + step embedding, layer-normalised.
pub fn embed_nodes(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &AgentConfig,
    map: &TopoMap,
    visual: Var,
) -> Result<Var> {
    let current = map
        .current()
        .and_then(|c| map.node(c))
        .ok_or_else(|| Error::Invariant("embedding an empty map".into()))?;
    let origin = current.position;
    let loc: Vec<Vec<f64>> = map
        .nodes()
        .iter()
        .map(|n| location_features(origin, n.position).to_vec())
        .collect();
    let steps: Vec<usize> = map.nodes().iter().map(|n| n.last_visit.min(cfg.max_steps)).collect();
    let v = nn::linear(tape, params, "node.vis", visual)?;
    let loc = tape.constant(Tensor::from_rows(&loc)?);
    let l = nn::linear(tape, params, "node.loc", loc)?;
    let table = tape.param(params, "node.step")?;
    let s = tape.gather_rows(table, &steps)?;
    let x = tape.add(v, l)?;
    let x = tape.add(x, s)?;
    let stop = tape.param(params, "node.stop")?;
    let x = tape.concat_rows(&[stop, x])?;
    Ok(nn::layer_norm(tape, params, "node.ln", x)?)
}

/// Bucket of every (row, column) pair of the `(1 + n)`-row node block.
pub fn hop_buckets(map: &TopoMap) -> Vec<usize> {
    let hops = map.hop_distances();
    let m = map.len() + 1;
    let mut out = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            out.push(if i == j {
                0
            } else if i == 0 || j == 0 {
                1
            } else {
                hops[i - 1][j - 1].min(HOP_BUCKETS - 1)
            });
        }
    }
    out
}

/// Self-attention over node rows with a learned per-head logit bias indexed
/// by hop-distance bucket. Language is not attended.
pub fn gasa(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &AgentConfig,
    nodes: Var,
    buckets: &[usize],
) -> Result<Var> {
    let m = tape.value(nodes).dims2().0;
    if buckets.len() != m * m {
        return Err(Error::Invariant(format!("{} hop buckets for {m} rows", buckets.len())));
    }
    let mut onehot = vec![0.0; m * m * HOP_BUCKETS];
    for (k, &b) in buckets.iter().enumerate() {
        onehot[k * HOP_BUCKETS + b] = 1.0;
    }
    let onehot = tape.constant(Tensor::new(vec![m * m, HOP_BUCKETS], onehot)?);
    let table = tape.param(params, "gasa.bias")?;
    let all = tape.matmul(onehot, table)?;
    let mut bias = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let col = tape.slice_cols(all, h, h + 1)?;
        bias.push(tape.reshape(col, &[m, m])?);
    }
    Ok(nn::encoder_layer(tape, params, "gasa.layer", nodes, Some(&bias), cfg.heads)?)
}

/// Decoder stack over all node rows attending to the instruction.
pub fn cross_global(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &AgentConfig,
    nodes: Var,
    lang: Var,
) -> Result<Var> {
    let mut x = nodes;
    for i in 0..cfg.cross_layers {
        x = nn::decoder_layer(tape, params, &format!("glo.layer{i}"), x, lang, cfg.heads)?;
    }
    Ok(x)
}

/// Separate decoder stack over `[STOP, current, neighbours...]` rows.
pub fn cross_local(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &AgentConfig,
    nodes: Var,
    lang: Var,
    rows: &[usize],
) -> Result<Var> {
    let mut x = tape.gather_rows(nodes, rows)?;
    for i in 0..cfg.cross_layers {
        x = nn::decoder_layer(tape, params, &format!("loc.layer{i}"), x, lang, cfg.heads)?;
    }
    Ok(x)
}

/// Room-type scores `n × K` for the map rows (STOP excluded).
///
/// With a codebook: `⟨P·x, Σ_j E(k, j)⟩ / (S·√d)` for a bias-free learned
/// projection `P`; the positive constant is a fixed temperature. Without
/// one: a linear classifier.
pub fn layout_predict(
    tape: &mut Tape,
    params: &ParamSet,
    kind: CodebookKind,
    glo: Var,
    codebook: Option<&Codebook>,
) -> Result<Var> {
    let m = tape.value(glo).dims2().0;
    let rows: Vec<usize> = (1..m).collect();
    let x = tape.gather_rows(glo, &rows)?;
    match (kind, codebook) {
        (CodebookKind::Classifier, _) => Ok(nn::linear(tape, params, "layout.cls", x)?),
        (_, Some(cb)) => {
            let proj = tape.param(params, "layout.proj")?;
            let p = tape.matmul(x, proj)?;
            let sums = tape.constant(cb.room_sums());
            let scores = tape.matmul_nt(p, sums)?;
            let t = 1.0 / (cb.per_room as f64 * (cb.dim() as f64).sqrt());
            Ok(tape.scale(scores, t))
        }
        (_, None) => Err(Error::Config(format!("{} layout head needs a codebook", kind.name()))),
    }
}

/// Cross-attention of node rows onto the imagination vectors, then a
/// score per row. Returns `(attended rows, score column (1+n)×1)`.
pub fn dreamer(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &AgentConfig,
    glo: Var,
    imagination: Var,
) -> Result<(Var, Var)> {
    let a = nn::multi_head_attention(
        tape,
        params,
        "dream.attn",
        glo,
        imagination,
        imagination,
        None,
        None,
        cfg.heads,
    )?;
    let x = tape.add(glo, a.output)?;
    let x = nn::layer_norm(tape, params, "dream.ln", x)?;
    let s = nn::feed_forward(tape, params, "dream.score", x)?;
    Ok((x, s))
}

/// Fused decision scores.
pub struct Decision {
    /// `1 × (1+n)` final logits.
    pub logits: Var,
    /// Scalar global/local gate.
    pub gate: Var,
    /// Per-row `(1+n) × 1` mixing weight between the plain and dreamer
    /// branches.
    pub lambda: Option<Var>,
}

/// Combine global, local and (optionally) dreamer evidence at score level.
///
/// `local_rows[k]` is the global row of local row `k`; rows outside the
/// local set keep their global score.
pub fn fuse_decision(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &AgentConfig,
    glo: Var,
    loc: Var,
    dreamt: Option<Var>,
    local_rows: &[usize],
) -> Result<Decision> {
    let m = tape.value(glo).dims2().0;
    let g = nn::feed_forward(tape, params, "head.glo", glo)?;
    let l = nn::feed_forward(tape, params, "head.loc", loc)?;
    let gate = if cfg.dynamic_fuse {
        let sg = tape.gather_rows(glo, &[0])?;
        let sl = tape.gather_rows(loc, &[0])?;
        let both = tape.concat_cols(&[sg, sl])?;
        let z = nn::feed_forward(tape, params, "head.gate", both)?;
        tape.sigmoid(z)
    } else {
        tape.constant(Tensor::scalar(0.5))
    };
    let scattered = tape.scatter_rows(l, local_rows, m)?;
    let mut outside = vec![1.0; m];
    for &r in local_rows {
        outside[r] = 0.0;
    }
    let outside = tape.constant(Tensor::new(vec![m, 1], outside)?);
    let keep = tape.mul(g, outside)?;
    let local_full = tape.add(scattered, keep)?;
    let diff = tape.sub(local_full, g)?;
    let gated = tape.mul_scalar(diff, gate)?;
    let mut total = tape.add(g, gated)?;
    let mut lambda = None;
    if let Some(hat) = dreamt {
        let both = tape.concat_cols(&[glo, hat])?;
        let z = nn::feed_forward(tape, params, "head.lambda", both)?;
        let lam = tape.sigmoid(z);
        let a = nn::feed_forward(tape, params, "head.fgd_glo", glo)?;
        let b = nn::feed_forward(tape, params, "head.fgd_dream", hat)?;
        let ba = tape.sub(b, a)?;
        let mixed = tape.mul(lam, ba)?;
        let fgd = tape.add(a, mixed)?;
        total = tape.add(total, fgd)?;
        lambda = Some(lam);
    }
    let logits = tape.transpose(total)?;
    Ok(Decision { logits, gate, lambda })
}

/// One score per fused object row, as a `1 × n_obj` row.
pub fn ground_objects(tape: &mut Tape, params: &ParamSet, objects: Var) -> Result<Var> {
    let s = nn::feed_forward(tape, params, "og", objects)?;
    Ok(tape.transpose(s)?)
}

/// Everything a decision step produces, as tape handles.
pub struct StepOutput {
    /// `1 × (1+n)` decision logits.
    pub logits: Var,
    /// Support of the decision softmax: STOP plus frontier rows.
    pub mask: Vec<bool>,
    /// `n × K` room scores when the layout head is active.
    pub layout: Option<Var>,
    /// `1 × (1+n)` dreamer logits with support `frontier_mask`.
    pub dream_logits: Option<Var>,
    /// Frontier rows only.
    pub frontier_mask: Vec<bool>,
    pub lambda: Option<Var>,
    pub gate: Var,
    /// `(1+n) × h` globally attended node rows.
    pub global: Var,
    /// `1 × n_obj` grounding scores at the current node.
    pub objects: Option<Var>,
}

/// Full per-step pipeline after the map update.
#[allow(clippy::too_many_arguments)]
pub fn forward_step(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &AgentConfig,
    codebook: Option<&Codebook>,
    lang: Var,
    imagination: Option<Var>,
    map: &TopoMap,
    visual: Var,
    fused_objects: Option<Var>,
) -> Result<StepOutput> {
    let current = map
        .current()
        .ok_or_else(|| Error::Invariant("decision on an empty map".into()))?;
    let nodes = embed_nodes(tape, params, cfg, map, visual)?;
    let buckets = hop_buckets(map);
    let h = gasa(tape, params, cfg, nodes, &buckets)?;
    let glo = cross_global(tape, params, cfg, h, lang)?;
    let row = |id| map.position_of(id).map(|i| i + 1);
    let mut local_rows = vec![0, row(current).expect("current on map")];
    for nb in map.neighbors(current) {
        local_rows.push(row(nb).expect("neighbour on map"));
    }
    let loc = cross_local(tape, params, cfg, nodes, lang, &local_rows)?;
    let layout = if cfg.use_layout {
        Some(layout_predict(tape, params, cfg.codebook, glo, codebook)?)
    } else {
        None
    };
    let mut frontier_mask = vec![false];
    frontier_mask.extend(map.nodes().iter().map(|n| n.status == NodeStatus::Frontier));
    let mut mask = frontier_mask.clone();
    mask[0] = true;
    let (dreamt, dream_logits) = match (cfg.use_dreamer, imagination) {
        (true, Some(im)) => {
            let (hat, s) = dreamer(tape, params, cfg, glo, im)?;
            (Some(hat), Some(tape.transpose(s)?))
        }
        (true, None) => return Err(Error::Config("dreamer enabled without imagination".into())),
        _ => (None, None),
    };
    let decision = fuse_decision(tape, params, cfg, glo, loc, dreamt, &local_rows)?;
    let objects = match fused_objects {
        Some(o) => Some(ground_objects(tape, params, o)?),
        None => None,
    };
    Ok(StepOutput {
        logits: decision.logits,
        mask,
        layout,
        dream_logits,
        frontier_mask,
        lambda: decision.lambda,
        gate: decision.gate,
        global: glo,
        objects,
    })
}
