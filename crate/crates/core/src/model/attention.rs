use super::{Stage, Variant};
use crate::tensor::{Element, Graph, RearrangePlan, Var};
use crate::{Error, Result};

/// Regrouping of canonical `(B, C·F, N)` tokens for one attention stage.
/// The inverse plan restores the canonical layout.
pub fn stage_plan(stage: Stage, batch: usize, channels: usize, frames: usize, dim: usize) -> Result<RearrangePlan> {
    let shape = [batch, channels * frames, dim];
    let sizes = [("c", channels), ("f", frames)];
    let pattern = match stage {
        Stage::Joint => "b l n -> b l n",
        Stage::Spatial => "b (c f) n -> (b f) c n",
        Stage::Temporal => "b (c f) n -> (b c) f n",
    };
    Ok(RearrangePlan::new(pattern, &shape, &sizes)?)
}

/// One plan per stage of `variant`, in execution order.
pub fn variant_plans(
    variant: Variant,
    batch: usize,
    channels: usize,
    frames: usize,
    dim: usize,
) -> Result<Vec<RearrangePlan>> {
    variant
        .stages()
        .iter()
        .map(|&s| stage_plan(s, batch, channels, frames, dim))
        .collect()
}

/// Channel-To-Batch Shift: `(B, C, T, N) -> (B·s, C/s, T, N)`, moving
/// channel group `i` of each sample to batch row `b·s + i`.
pub fn ctbs<E: Element>(g: &mut Graph<E>, x: Var, shift: usize) -> Result<Var> {
    if shift == 0 {
        return Err(Error::Param("shift must be at least 1".into()));
    }
    if shift == 1 {
        return Ok(x);
    }
    let plan = RearrangePlan::new("b (s c) t n -> (b s) c t n", g.shape(x), &[("s", shift)])?;
    Ok(g.rearrange(x, &plan)?)
}

/// Multi-head scaled dot-product attention over groups.
///
/// `q` is `(G, Lq, N)`, `k` and `v` are `(G, Lk, N)`. Returns the output
/// `(G, Lq, N)` and the attention probabilities `(G, heads, Lq, Lk)`.
pub fn attention<E: Element>(g: &mut Graph<E>, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Var)> {
    let qs = g.shape(q).to_vec();
    let ks = g.shape(k).to_vec();
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || g.shape(v) != ks.as_slice() {
        return Err(Error::Param(format!(
            "attention expects q (G, Lq, N) and k, v (G, Lk, N), got {:?}, {:?}, {:?}",
            qs,
            ks,
            g.shape(v)
        )));
    }
    let (groups, lq, n) = (qs[0], qs[1], qs[2]);
    let lk = ks[1];
    if heads == 0 || n % heads != 0 {
        return Err(Error::Param(format!("{heads} heads do not divide width {n}")));
    }
    let d = n / heads;
    let split = |g: &mut Graph<E>, x: Var, l: usize, perm: &[usize]| -> Result<Var> {
        let x = g.reshape(x, &[groups, l, heads, d])?;
        Ok(g.permute(x, perm)?)
    };
    let qh = split(g, q, lq, &[0, 2, 1, 3])?;
    let kt = split(g, k, lk, &[0, 2, 3, 1])?;
    let vh = split(g, v, lk, &[0, 2, 1, 3])?;
    let scores = g.matmul(qh, kt)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let probs = g.softmax(scores, 3)?;
    let out = g.matmul(probs, vh)?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[groups, lq, n])?;
    Ok((out, probs))
}

/// Self-attention on packed `(G, L, 3N)` query/key/value projections.
pub(crate) fn grouped_self_attention<E: Element>(g: &mut Graph<E>, qkv: Var, heads: usize) -> Result<Var> {
    let n = g.shape(qkv)[2] / 3;
    let q = g.narrow(qkv, 2, 0, n)?;
    let k = g.narrow(qkv, 2, n, n)?;
    let v = g.narrow(qkv, 2, 2 * n, n)?;
    Ok(attention(g, q, k, v, heads)?.0)
}

/// Cross attention from prediction-stream queries to condition keys/values.
///
/// `q` is `(B, L, N)`; `kv` holds packed keys and values
/// `(B·s, M, 2N)`, batch-major in the original sample. With `pooled` every
/// query attends to the keys of the whole batch; otherwise each sample sees
/// only the `s·M` keys derived from its own conditions.
pub fn causal_attention<E: Element>(g: &mut Graph<E>, q: Var, kv: Var, heads: usize, pooled: bool) -> Result<Var> {
    let qs = g.shape(q).to_vec();
    let ks = g.shape(kv).to_vec();
    let (b, l, n) = (qs[0], qs[1], qs[2]);
    if ks.len() != 3 || ks[2] != 2 * n || ks[0] % b != 0 {
        return Err(Error::Param(format!(
            "causal attention expects kv (B·s, M, {}) for queries {:?}, got {:?}",
            2 * n,
            qs,
            ks
        )));
    }
    let keys = ks[0] * ks[1];
    let (groups, per_group) = if pooled { (1, keys) } else { (b, keys / b) };
    let qg = g.reshape(q, &[groups, b * l / groups, n])?;
    let kvg = g.reshape(kv, &[groups, per_group, 2 * n])?;
    let k = g.narrow(kvg, 2, 0, n)?;
    let v = g.narrow(kvg, 2, n, n)?;
    let (out, _) = attention(g, qg, k, v, heads)?;
    Ok(g.reshape(out, &[b, l, n])?)
}
