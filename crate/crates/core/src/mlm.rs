//! Masked language modeling with image-to-text fusion.
//!
//! Standard BERT-style corruption (choose 15% of eligible tokens, replace
//! 80% with MASK, 10% with a random non-special id, keep 10%), a text-only
//! vocabulary head on stage-4 embeddings of the masked text, and a second
//! fused head that reads masked-text embeddings enriched by cross-attention
//! over the unmasked image at two encoder stages. Fusion is strictly a
//! pre-training device; nothing on the inference path calls into it.

use crate::counters;
use crate::encoders::{
    stage_attention, stage_linear, AttentionParams, LinearParams, StageEmbeddings, TapedLinear,
    TokenBatch, VisitParams, NUM_RESERVED, NUM_STAGES,
};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, Stream};
use crate::tensor::{AttnWeights, RowBlocks, Tape, Tensor, TensorId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const MASK_RATE: f64 = 0.15;
pub const MASK_PROB: f64 = 0.8;
pub const RANDOM_PROB: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Masked,
    Random,
    Kept,
}

/// Masked token ids with the original ids and the chosen-position record.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedTextBatch {
    pub masked: TokenBatch,
    pub original: TokenBatch,
    /// (sample, position) of every chosen token, in scan order.
    pub chosen: Vec<(usize, usize)>,
    pub kinds: Vec<MaskKind>,
    /// Samples with zero eligible (non-pad, non-special) tokens.
    pub flagged: Vec<usize>,
}

/// BERT-style corruption at the standard 15% rate.
pub fn apply_masking(tokens: &TokenBatch, vocab_size: usize, seed: u64) -> Result<MaskedTextBatch> {
    apply_masking_with_rate(tokens, vocab_size, seed, MASK_RATE)
}

/// Corruption with an explicit choose rate (rate 0 is the debug identity).
pub fn apply_masking_with_rate(
    tokens: &TokenBatch,
    vocab_size: usize,
    seed: u64,
    rate: f64,
) -> Result<MaskedTextBatch> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::config("masking.rate", format!("rate {rate} outside [0,1]")));
    }
    if vocab_size <= NUM_RESERVED as usize {
        return Err(Error::config("masking.vocab_size", "no non-special ids available"));
    }
    let mut rng = derive_rng(seed, Stream::Masking, 0);
    let mut masked = tokens.clone();
    let mut chosen = Vec::new();
    let mut kinds = Vec::new();
    let mut flagged = Vec::new();
    for i in 0..tokens.n {
        let mut eligible = 0usize;
        for p in 0..tokens.lens[i] {
            let id = tokens.token_ids[i * tokens.max_len + p];
            if id < NUM_RESERVED {
                continue;
            }
            eligible += 1;
            if rng.gen::<f64>() >= rate {
                continue;
            }
            let kind_roll: f64 = rng.gen();
            let kind = if kind_roll < MASK_PROB {
                MaskKind::Masked
            } else if kind_roll < MASK_PROB + RANDOM_PROB {
                MaskKind::Random
            } else {
                MaskKind::Kept
            };
            let new_id = match kind {
                MaskKind::Masked => crate::encoders::MASK_ID,
                MaskKind::Random => rng.gen_range(NUM_RESERVED..vocab_size as u32),
                MaskKind::Kept => id,
            };
            masked.token_ids[i * tokens.max_len + p] = new_id;
            chosen.push((i, p));
            kinds.push(kind);
        }
        if eligible == 0 {
            flagged.push(i);
        }
    }
    Ok(MaskedTextBatch {
        masked,
        original: tokens.clone(),
        chosen,
        kinds,
        flagged,
    })
}

/// Text-only MLM: cross-entropy of the vocabulary head at chosen positions
/// against the original ids, averaged over all chosen positions.
///
/// Returns `None` when the batch has no chosen positions, so the caller can
/// see the missing contribution instead of a silent zero.
pub fn mlm_text_loss(
    tape: &mut Tape,
    masked_stage4: TensorId,
    blocks: &RowBlocks,
    batch: &MaskedTextBatch,
    vocab_head: TapedLinear,
) -> Result<Option<TensorId>> {
    cross_entropy_at_chosen(tape, masked_stage4, blocks, batch, vocab_head)
}

fn cross_entropy_at_chosen(
    tape: &mut Tape,
    embeddings: TensorId,
    blocks: &RowBlocks,
    batch: &MaskedTextBatch,
    vocab_head: TapedLinear,
) -> Result<Option<TensorId>> {
    if batch.chosen.is_empty() {
        return Ok(None);
    }
    let rows: Vec<usize> = batch.chosen.iter().map(|&(i, p)| blocks.flat(i, p)).collect();
    let picked = tape.gather_rows(embeddings, &rows)?;
    let logits = tape.linear(picked, vocab_head.w, vocab_head.b)?;
    let vocab = tape.shape(logits)[1];
    let lsm = tape.log_softmax_rows(logits)?;
    let targets: Vec<usize> = batch
        .chosen
        .iter()
        .enumerate()
        .map(|(r, &(i, p))| {
            let id = batch.original.token_ids[i * batch.original.max_len + p] as usize;
            r * vocab + id
        })
        .collect();
    let picked_logprob = tape.gather_elems(lsm, &targets)?;
    let mean = tape.mean(picked_logprob)?;
    Ok(Some(tape.scale(mean, -1.0)?))
}

/// Which stages feed the fused MLM head and how they are shaped.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    /// 1-based stage indices, strictly increasing.
    pub stages: (usize, usize),
    pub heads: usize,
    /// Width each fused stage is projected to before channel concatenation.
    pub common_width: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            stages: (2, 3),
            heads: 4,
            common_width: 64,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        let (j1, j2) = self.stages;
        if !(1 <= j1 && j1 < j2 && j2 <= NUM_STAGES) {
            return Err(Error::config(
                "fusion.stages",
                format!("need 1 <= j1 < j2 <= 4, got ({j1}, {j2})"),
            ));
        }
        if self.common_width == 0 || self.heads == 0 || embed_dim % self.heads != 0 {
            return Err(Error::config(
                "fusion",
                "common_width and heads must be positive, heads must divide embed_dim",
            ));
        }
        Ok(())
    }
}

/// Parameters for fusing one stage: the image-width projection, the
/// cross-attention block and the post-fusion projection to common width.
#[derive(Debug, Clone)]
pub struct FusionStageParams {
    pub img_proj: LinearParams,
    pub attn: AttentionParams,
    pub to_common: LinearParams,
}

impl FusionStageParams {
    pub fn init(embed_dim: usize, common_width: usize, rng: &mut ChaCha8Rng) -> Self {
        FusionStageParams {
            img_proj: LinearParams::init(embed_dim, embed_dim, rng),
            attn: AttentionParams::init(embed_dim, rng),
            to_common: LinearParams::init(embed_dim, common_width, rng),
        }
    }
}

impl VisitParams for FusionStageParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.img_proj.visit(&format!("{prefix}.img_proj"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.to_common.visit(&format!("{prefix}.to_common"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.img_proj.visit_mut(&format!("{prefix}.img_proj"), f);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.to_common.visit_mut(&format!("{prefix}.to_common"), f);
    }
}

#[derive(Debug, Clone)]
pub struct FusionParams {
    pub stages: [FusionStageParams; 2],
}

impl FusionParams {
    pub fn init(cfg: &FusionConfig, embed_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        FusionParams {
            stages: [
                FusionStageParams::init(embed_dim, cfg.common_width, rng),
                FusionStageParams::init(embed_dim, cfg.common_width, rng),
            ],
        }
    }
}

impl VisitParams for FusionParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.stages[0].visit(&format!("{prefix}.s0"), f);
        self.stages[1].visit(&format!("{prefix}.s1"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.stages[0].visit_mut(&format!("{prefix}.s0"), f);
        self.stages[1].visit_mut(&format!("{prefix}.s1"), f);
    }
}

/// Both MLM vocabulary heads. The fused head reads twice the common width.
#[derive(Debug, Clone)]
pub struct MlmHeads {
    pub text_head: LinearParams,
    pub fused_head: LinearParams,
}

impl MlmHeads {
    pub fn init(
        embed_dim: usize,
        common_width: usize,
        vocab_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        MlmHeads {
            text_head: LinearParams::init(embed_dim, vocab_size, rng),
            fused_head: LinearParams::init(2 * common_width, vocab_size, rng),
        }
    }
}

impl VisitParams for MlmHeads {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.text_head.visit(&format!("{prefix}.text_head"), f);
        self.fused_head.visit(&format!("{prefix}.fused_head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.text_head.visit_mut(&format!("{prefix}.text_head"), f);
        self.fused_head.visit_mut(&format!("{prefix}.fused_head"), f);
    }
}

#[derive(Debug, Clone)]
pub struct TapedFusionStage {
    pub img_proj: TapedLinear,
    pub attn: AttnWeights,
    pub to_common: TapedLinear,
}

#[derive(Debug, Clone)]
pub struct TapedFusion {
    pub stages: [TapedFusionStage; 2],
}

impl FusionParams {
    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> TapedFusion {
        let mut one = |p: &FusionStageParams| TapedFusionStage {
            img_proj: stage_linear(tape, &p.img_proj, trainable),
            attn: stage_attention(tape, &p.attn, trainable),
            to_common: stage_linear(tape, &p.to_common, trainable),
        };
        TapedFusion {
            stages: [one(&self.stages[0]), one(&self.stages[1])],
        }
    }
}

/// Inject unmasked image embeddings into masked text embeddings at one
/// stage: fused = txt + CrossAtt(query = txt, keys/values = projected image
/// tokens). Shape is preserved.
pub fn fuse_stage(
    tape: &mut Tape,
    img_stage: TensorId,
    img_blocks: &RowBlocks,
    txt_stage: TensorId,
    txt_blocks: &RowBlocks,
    p: &TapedFusionStage,
    heads: usize,
) -> Result<TensorId> {
    counters::count_fusion();
    if img_blocks.samples() != txt_blocks.samples() {
        return Err(Error::ShapeMismatch {
            op: "fuse_stage",
            left: vec![img_blocks.samples()],
            right: vec![txt_blocks.samples()],
        });
    }
    let projected = tape.linear(img_stage, p.img_proj.w, p.img_proj.b)?;
    let att = tape.attention(txt_stage, projected, txt_blocks, img_blocks, p.attn, heads)?;
    tape.add(txt_stage, att)
}

/// Fused MLM: fuse at the two configured stages, project each fused stage
/// to the common width, concatenate per token along channels, and apply the
/// fused vocabulary head at chosen positions.
#[allow(clippy::too_many_arguments)]
pub fn mlm_fused_loss(
    tape: &mut Tape,
    img: &StageEmbeddings,
    masked_txt: &StageEmbeddings,
    batch: &MaskedTextBatch,
    fusion_cfg: &FusionConfig,
    fusion: &TapedFusion,
    fused_head: TapedLinear,
) -> Result<Option<TensorId>> {
    let (j1, j2) = fusion_cfg.stages;
    let mut commons = Vec::with_capacity(2);
    for (slot, j) in [(0usize, j1), (1usize, j2)] {
        let fused = fuse_stage(
            tape,
            img.stages[j - 1],
            &img.blocks,
            masked_txt.stages[j - 1],
            &masked_txt.blocks,
            &fusion.stages[slot],
            fusion_cfg.heads,
        )?;
        let p = &fusion.stages[slot].to_common;
        commons.push(tape.linear(fused, p.w, p.b)?);
    }
    let concat = tape.concat_cols(commons[0], commons[1])?;
    cross_entropy_at_chosen(tape, concat, &masked_txt.blocks, batch, fused_head)
}

/// L_mlm = (text term + fused term) / 2.
pub fn mlm_loss(tape: &mut Tape, text_term: TensorId, fused_term: TensorId) -> Result<TensorId> {
    let s = tape.add(text_term, fused_term)?;
    tape.scale(s, 0.5)
}
