//! Multi-view Style Modulator: merges global style tokens with
//! position-wise compressed local patch tokens and refines the mix with
//! two-pass self-attention.

use crate::numerics::{Tape, Var};
use crate::tokenizer::{TokenKind, TokenSequence};
use crate::{Error, Result};

/// n patch token sequences aligned position-wise: stored as an
/// L×(n·d) matrix whose row j holds the j-th token of every patch.
#[derive(Debug, Clone, Copy)]
pub struct MergedLocalTokens {
    pub var: Var,
    pub seq_len: usize,
    pub n: usize,
    pub d: usize,
}

/// Tape handles for every MSM parameter.
#[derive(Debug, Clone, Copy)]
pub struct MsmVars {
    /// weight predictor: n·d -> 2·n·d -> n logits
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub norm1_g: Var,
    pub norm1_b: Var,
    pub norm2_g: Var,
    pub norm2_b: Var,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Group the j-th token of each patch sequence into row j.
pub fn merge_local(tape: &mut Tape, locals: &[TokenSequence]) -> Result<MergedLocalTokens> {
    if locals.is_empty() {
        return Err(Error::Parameter("merge_local needs at least one sequence".into()));
    }
    let l = tape.rows(locals[0].var);
    let d = tape.cols(locals[0].var);
    for s in locals {
        if tape.rows(s.var) != l || tape.cols(s.var) != d {
            return Err(Error::Dimension("merge_local: sequence shapes differ".into()));
        }
    }
    let vars: Vec<Var> = locals.iter().map(|s| s.var).collect();
    let var = tape.concat_cols(&vars)?;
    Ok(MergedLocalTokens {
        var,
        seq_len: l,
        n: locals.len(),
        d,
    })
}

/// Per group: MLP predicts n logits from the flattened members, softmax
/// normalizes them, and the output token is the convex combination.
pub fn compress(tape: &mut Tape, merged: MergedLocalTokens, vars: &MsmVars) -> Result<TokenSequence> {
    let alpha = compression_weights(tape, merged, vars)?;
    weighted_combine(tape, merged, alpha)
}

/// The normalized α matrix (L×n): softmax over the MLP logits.
pub fn compression_weights(
    tape: &mut Tape,
    merged: MergedLocalTokens,
    vars: &MsmVars,
) -> Result<Var> {
    let h = tape.linear(merged.var, vars.mlp_w1, vars.mlp_b1)?;
    let h = tape.gelu(h);
    let logits = tape.linear(h, vars.mlp_w2, vars.mlp_b2)?;
    if tape.cols(logits) != merged.n {
        return Err(Error::Dimension(format!(
            "weight predictor emits {} logits for n={}",
            tape.cols(logits),
            merged.n
        )));
    }
    Ok(tape.softmax_rows(logits))
}

/// out[j] = Σ_k α[j,k] · group[j][k]
pub fn weighted_combine(
    tape: &mut Tape,
    merged: MergedLocalTokens,
    alpha: Var,
) -> Result<TokenSequence> {
    let (l, n, d) = (merged.seq_len, merged.n, merged.d);
    let ones = tape.leaf(1, d, vec![1.0; d]);
    let mut acc: Option<Var> = None;
    for k in 0..n {
        let member = tape.slice_cols(merged.var, k * d, d)?;
        let ak = tape.slice_cols(alpha, k, 1)?;
        let ak_wide = tape.matmul(ak, ones)?;
        let term = tape.mul(ak_wide, member)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    let _ = l;
    Ok(TokenSequence {
        var: acc.unwrap(),
        kind: TokenKind::StyleLocal,
        grid: None,
    })
}

/// Sequence-axis concatenation, global tokens first.
pub fn mix(tape: &mut Tape, compressed: TokenSequence, global: TokenSequence) -> Result<Var> {
    if tape.rows(compressed.var) != tape.rows(global.var)
        || tape.cols(compressed.var) != tape.cols(global.var)
    {
        return Err(Error::Dimension("mix: global and local shapes differ".into()));
    }
    tape.concat_rows(&[global.var, compressed.var])
}

/// Scaled dot-product multi-head attention. `q`, `k`, `v` are already
/// projected; heads split the width. Each head's score-matrix size is
/// added to the tape's `score_entries` counter.
pub fn multi_head_attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let d = tape.cols(q);
    if !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.matmul_tb(qh, kh)?;
        tape.score_entries += (tape.rows(qh) * tape.rows(kh)) as u64;
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax_rows(scores);
        outs.push(tape.matmul(probs, vh)?);
    }
    tape.concat_cols(&outs)
}

/// Two-pass self-attention over the mixed tokens:
///   X₁ = MSA(Q,K,V) + Q
///   X₂ = MSA(X₁,K,V) + X₁      (K, V reused from the mixed tokens)
///   out = FFN(LN₂(X₂)) + X₂
/// with Q,K,V projected from LN₁(mixed).
pub fn style_attention(
    tape: &mut Tape,
    mixed: Var,
    vars: &MsmVars,
    heads: usize,
) -> Result<TokenSequence> {
    let normed = tape.layer_norm(mixed, vars.norm1_g, vars.norm1_b, LAYER_NORM_EPS)?;
    let q = tape.matmul(normed, vars.wq)?;
    let k = tape.matmul(normed, vars.wk)?;
    let v = tape.matmul(normed, vars.wv)?;

    let a1 = multi_head_attention(tape, q, k, v, heads)?;
    let x1 = tape.add(a1, q)?;
    let a2 = multi_head_attention(tape, x1, k, v, heads)?;
    let x2 = tape.add(a2, x1)?;

    let n2 = tape.layer_norm(x2, vars.norm2_g, vars.norm2_b, LAYER_NORM_EPS)?;
    let f = tape.linear(n2, vars.ffn_w1, vars.ffn_b1)?;
    let f = tape.gelu(f);
    let f = tape.linear(f, vars.ffn_w2, vars.ffn_b2)?;
    let var = tape.add(f, x2)?;
    Ok(TokenSequence {
        var,
        kind: TokenKind::StyleGlobal,
        grid: None,
    })
}

/// Full modulator: style_attention(mix(compress(merge_local(locals)), global)).
pub fn msm_forward(
    tape: &mut Tape,
    global: TokenSequence,
    locals: &[TokenSequence],
    vars: &MsmVars,
    heads: usize,
) -> Result<TokenSequence> {
    let merged = merge_local(tape, locals)?;
    let compressed = compress(tape, merged, vars)?;
    let mixed = mix(tape, compressed, global)?;
    style_attention(tape, mixed, vars, heads)
}

/// Score-entry count of one self-attention pass over the 2L mixed tokens,
/// measured by running the instrumented kernel (single head, so the count
/// is the bare score-matrix size).
pub fn count_mixed_attention_entries(l: usize) -> u64 {
    count_entries_for_len(2 * l)
}

/// Score-entry count of one self-attention pass over the uncompressed
/// joint sequence of the global plus n local patch sequences.
pub fn count_naive_attention_entries(l: usize, n: usize) -> u64 {
    count_entries_for_len((n + 1) * l)
}

fn count_entries_for_len(len: usize) -> u64 {
    use crate::numerics::Precision;
    let mut tape = Tape::new(Precision::F64);
    let d = 4;
    let x = tape.leaf(len, d, (0..len * d).map(|i| (i % 7) as f64 * 0.1).collect());
    multi_head_attention(&mut tape, x, x, x, 1).expect("attention probe");
    tape.score_entries
}

/// Exact score-entry ratio naive/MSM: ((n+1)/2)², independent of L.
pub fn score_entry_ratio(n: usize) -> f64 {
    let r = (n as f64 + 1.0) / 2.0;
    r * r
}
