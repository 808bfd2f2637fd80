//! Relaxed token-level alignment between paired image patches and text
//! tokens.
//!
//! Stage-4 token embeddings of both towers are L2-normalized, the cosine
//! cost 1 - c is built per pair, and a minimum-cost injective matching is
//! solved per sample. The discrete matching is treated as a constant (no
//! gradient through the argmin); gradients flow through the cosine matrix
//! into both encoders. When image and text token counts differ, min(l1, l2)
//! pairs are matched and every sample is normalized by its own matched
//! count, which keeps the loss in [0, 2] and comparable across ragged
//! batches.
//!
//! Only the paired image and text take part; unpaired combinations are
//! never scored. Pad and special text positions are excluded from the
//! column set.

use crate::counters;
use crate::encoders::{StageEmbeddings, TokenBatch, NUM_RESERVED};
use crate::error::{Error, Result};
use crate::matching::{hungarian, Assignment, CostMatrix};
use crate::tensor::{Tape, TensorId};

/// Plain cosine similarity matrix between two sets of token embeddings
/// (rows of `mu` [l1, d] against rows of `omega` [l2, d]).
pub fn cosine_matrix(mu: &[f64], l1: usize, omega: &[f64], l2: usize, d: usize) -> Result<Vec<f64>> {
    if mu.len() != l1 * d || omega.len() != l2 * d {
        return Err(Error::ShapeMismatch {
            op: "cosine_matrix",
            left: vec![l1, d],
            right: vec![l2, d],
        });
    }
    let norm = |rows: &[f64], count: usize, side: &str| -> Result<Vec<f64>> {
        (0..count)
            .map(|i| {
                let row = &rows[i * d..(i + 1) * d];
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n == 0.0 {
                    Err(Error::domain("cosine_matrix", format!("zero-norm {side} token {i}")))
                } else {
                    Ok(n)
                }
            })
            .collect()
    };
    let mu_norms = norm(mu, l1, "image")?;
    let om_norms = norm(omega, l2, "text")?;
    let mut out = vec![0.0; l1 * l2];
    for s in 0..l1 {
        let mrow = &mu[s * d..(s + 1) * d];
        for t in 0..l2 {
            let orow = &omega[t * d..(t + 1) * d];
            let dot: f64 = mrow.iter().zip(orow).map(|(a, b)| a * b).sum();
            out[s * l2 + t] = dot / (mu_norms[s] * om_norms[t]);
        }
    }
    Ok(out)
}

/// Matching cost 1 - cosine, entries in [0, 2].
pub fn cost_matrix(cosine: &[f64], l1: usize, l2: usize) -> Result<CostMatrix> {
    CostMatrix::from_cosine(l1, l2, cosine)
}

/// Text positions eligible as matching columns: non-pad and non-special.
pub fn matchable_positions(batch: &TokenBatch) -> Vec<Vec<usize>> {
    (0..batch.n)
        .map(|i| {
            batch
                .ids(i)
                .iter()
                .enumerate()
                .filter(|&(_, &id)| id >= NUM_RESERVED)
                .map(|(p, _)| p)
                .collect()
        })
        .collect()
}

/// One sample's resolved matching, with columns mapped back to absolute
/// text positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatching {
    /// (image patch index, text position) pairs sorted by patch index.
    pub pairs: Vec<(usize, usize)>,
    pub mean_cost: f64,
}

#[derive(Debug)]
pub struct TokenLossOutput {
    /// Batch loss; `None` when every sample was skipped.
    pub loss: Option<TensorId>,
    /// Samples skipped for having no matchable text tokens.
    pub skipped: usize,
    pub matchings: Vec<Option<SampleMatching>>,
}

/// Token-level objective on stage-4 embeddings with the matching solved
/// fresh per sample.
pub fn token_loss(
    tape: &mut Tape,
    img: &StageEmbeddings,
    txt: &StageEmbeddings,
    txt_batch: &TokenBatch,
) -> Result<TokenLossOutput> {
    token_loss_inner(tape, img, txt, txt_batch, None)
}

/// Token-level objective with externally fixed matchings (used to check
/// gradients with the assignment frozen).
pub fn token_loss_with_matchings(
    tape: &mut Tape,
    img: &StageEmbeddings,
    txt: &StageEmbeddings,
    txt_batch: &TokenBatch,
    fixed: &[Option<SampleMatching>],
) -> Result<TokenLossOutput> {
    token_loss_inner(tape, img, txt, txt_batch, Some(fixed))
}

fn token_loss_inner(
    tape: &mut Tape,
    img: &StageEmbeddings,
    txt: &StageEmbeddings,
    txt_batch: &TokenBatch,
    fixed: Option<&[Option<SampleMatching>]>,
) -> Result<TokenLossOutput> {
    counters::count_token_loss();
    let n = img.blocks.samples();
    if txt.blocks.samples() != n || txt_batch.n != n {
        return Err(Error::Batch(format!(
            "token_loss: image batch {n} vs text batch {}",
            txt.blocks.samples()
        )));
    }
    let d = tape.shape(img.stages[3])[1];
    if tape.shape(txt.stages[3])[1] != d {
        return Err(Error::ShapeMismatch {
            op: "token_loss",
            left: tape.shape(img.stages[3]).to_vec(),
            right: tape.shape(txt.stages[3]).to_vec(),
        });
    }

    let img_norm = tape.l2_normalize_rows(img.stages[3])?;
    let txt_norm = tape.l2_normalize_rows(txt.stages[3])?;
    let columns = matchable_positions(txt_batch);

    let mut per_sample = Vec::new();
    let mut matchings = Vec::with_capacity(n);
    let mut skipped = 0usize;
    for i in 0..n {
        let cols = &columns[i];
        if cols.is_empty() {
            skipped += 1;
            matchings.push(None);
            continue;
        }
        let l1 = img.blocks.lens[i];
        let img_rows: Vec<usize> = img.blocks.range(i).collect();
        let txt_rows: Vec<usize> = cols.iter().map(|&p| txt.blocks.flat(i, p)).collect();
        let mu = tape.gather_rows(img_norm, &img_rows)?;
        let om = tape.gather_rows(txt_norm, &txt_rows)?;
        let c = tape.matmul_nt(mu, om)?;
        let neg = tape.scale(c, -1.0)?;
        let cost_t = tape.add_scalar(neg, 1.0)?;

        let l2 = cols.len();
        let pairs: Vec<(usize, usize)> = match fixed {
            Some(assignments) => assignments
                .get(i)
                .and_then(|m| m.as_ref())
                .map(|m| {
                    // map absolute text positions back to column indices
                    m.pairs
                        .iter()
                        .map(|&(r, p)| {
                            let col = cols.iter().position(|&q| q == p).expect("fixed position");
                            (r, col)
                        })
                        .collect()
                })
                .unwrap_or_default(),
            None => {
                let costs = CostMatrix::new(l1, l2, tape.data(cost_t).to_vec())?;
                hungarian(&costs)?.pairs
            }
        };
        if pairs.is_empty() {
            skipped += 1;
            matchings.push(None);
            continue;
        }

        let flat: Vec<usize> = pairs.iter().map(|&(r, c)| r * l2 + c).collect();
        let matched = tape.gather_elems(cost_t, &flat)?;
        let sample_loss = tape.mean(matched)?;
        let mean_cost = tape.scalar_value(sample_loss);
        per_sample.push(sample_loss);
        matchings.push(Some(SampleMatching {
            pairs: pairs.iter().map(|&(r, c)| (r, cols[c])).collect(),
            mean_cost,
        }));
    }

    let loss = if per_sample.is_empty() {
        None
    } else {
        let stacked = tape.stack_scalars(&per_sample)?;
        Some(tape.mean(stacked)?)
    };
    Ok(TokenLossOutput {
        loss,
        skipped,
        matchings,
    })
}

/// Diagnostic matching on plain stage-4 embeddings (no tape, no loss):
/// returns the per-sample assignment over matchable text positions.
pub fn match_tokens(
    mu: &[f64],
    l1: usize,
    omega: &[f64],
    text_positions: &[usize],
    d: usize,
) -> Result<(Assignment, Vec<usize>)> {
    let l2 = text_positions.len();
    let cos = cosine_matrix(mu, l1, omega, l2, d)?;
    let costs = cost_matrix(&cos, l1, l2)?;
    Ok((hungarian(&costs)?, text_positions.to_vec()))
}
