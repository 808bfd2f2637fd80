//! Four-stage image and text encoders.
//!
//! Both encoders are small pre-norm transformers evenly divided into four
//! stages: the text tower runs `text_layers` blocks (two per stage by
//! default) over token + position embeddings, the image tower runs one
//! block per stage over linearly projected patch vectors. Patches are
//! treated as an unordered set, so the image tower uses no positional
//! embedding.
//!
//! Text batches are ragged: only the non-pad prefix of each sample is
//! encoded, with all samples' rows flattened into one `[total, d]` tensor
//! described by [`RowBlocks`]. Pad positions therefore cannot influence any
//! output. The global text embedding reads the EOS position of stage 4; the
//! global image embedding mean-pools stage 4. Both are projected and
//! L2-normalized onto the unit sphere.

use crate::error::{Error, Result};
use crate::tensor::{AttnWeights, RowBlocks, Tape, Tensor, TensorId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Reserved vocabulary ids.
pub const PAD_ID: u32 = 0;
pub const MASK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const NUM_RESERVED: u32 = 4;

pub const NUM_STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Shared embedding width d.
    pub embed_dim: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    /// Total text blocks, evenly divided over the four stages.
    pub text_layers: usize,
    /// Raw patch vector width.
    pub patch_dim: usize,
    /// MLP hidden width as a multiple of embed_dim.
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embed_dim: 64,
            heads: 4,
            vocab_size: 512,
            max_text_len: 16,
            text_layers: 8,
            patch_dim: 32,
            mlp_ratio: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(
                "encoder.embed_dim",
                format!(
                    "embed_dim {} must be a positive multiple of heads {}",
                    self.embed_dim, self.heads
                ),
            ));
        }
        if self.vocab_size < NUM_RESERVED as usize * 2 {
            return Err(Error::config(
                "encoder.vocab_size",
                format!("vocab_size {} too small for reserved ids", self.vocab_size),
            ));
        }
        if self.text_layers == 0 || self.text_layers % NUM_STAGES != 0 {
            return Err(Error::config(
                "encoder.text_layers",
                format!("text_layers {} must be a positive multiple of 4", self.text_layers),
            ));
        }
        if self.max_text_len < 3 {
            return Err(Error::config(
                "encoder.max_text_len",
                "need room for BOS, one token and EOS",
            ));
        }
        if self.patch_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("encoder", "patch_dim and mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn text_layers_per_stage(&self) -> usize {
        self.text_layers / NUM_STAGES
    }
}

// ── batches ─────────────────────────────────────────────────────────────

/// A batch of images as raw patch vectors [n, l1, d_in]; every patch is a
/// real (non-padded) token.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub n: usize,
    pub patches: usize,
    pub patch_dim: usize,
    pub data: Vec<f64>,
}

impl ImageBatch {
    pub fn new(n: usize, patches: usize, patch_dim: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || patches == 0 || data.len() != n * patches * patch_dim {
            return Err(Error::Input(format!(
                "image batch: bad dims n={n} l1={patches} d_in={patch_dim} len={}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("image batch: non-finite patch value".into()));
        }
        Ok(ImageBatch {
            n,
            patches,
            patch_dim,
            data,
        })
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let stride = self.patches * self.patch_dim;
        &self.data[i * stride..(i + 1) * stride]
    }
}

/// A batch of token sequences [n, l2_max] with contiguous non-pad prefixes.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub n: usize,
    pub max_len: usize,
    pub token_ids: Vec<u32>,
    pub lens: Vec<usize>,
}

impl TokenBatch {
    /// Build from per-sample sequences, padding each to `max_len` with PAD.
    pub fn new(rows: &[Vec<u32>], max_len: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Input("token batch: empty".into()));
        }
        let n = rows.len();
        let mut token_ids = vec![PAD_ID; n * max_len];
        let mut lens = Vec::with_capacity(n);
        for (i, row) in rows.iter().enumerate() {
            if row.is_empty() || row.len() > max_len {
                return Err(Error::Input(format!(
                    "token batch: sample {i} length {} outside 1..={max_len}",
                    row.len()
                )));
            }
            if row.iter().any(|&id| id == PAD_ID) {
                return Err(Error::Input(format!(
                    "token batch: sample {i} contains PAD inside its prefix"
                )));
            }
            token_ids[i * max_len..i * max_len + row.len()].copy_from_slice(row);
            lens.push(row.len());
        }
        Ok(TokenBatch {
            n,
            max_len,
            token_ids,
            lens,
        })
    }

    pub fn ids(&self, i: usize) -> &[u32] {
        &self.token_ids[i * self.max_len..i * self.max_len + self.lens[i]]
    }

    pub fn is_pad(&self, i: usize, pos: usize) -> bool {
        pos >= self.lens[i]
    }

    pub fn blocks(&self) -> RowBlocks {
        RowBlocks::from_lens(self.lens.clone())
    }
}

// ── parameters ──────────────────────────────────────────────────────────

const TRUNC_NORMAL_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn trunc_normal(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| loop {
            // Box-Muller; resample outside two standard deviations.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            if z.abs() <= 2.0 {
                break z * TRUNC_NORMAL_STD;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("trunc_normal shape")
}

/// Visitor over named parameter tensors, in a stable declaration order.
/// Checkpointing, the optimizer and tape staging all share this order.
pub trait VisitParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));
}

macro_rules! visit_fields {
    ($ty:ty { $($field:ident),+ $(,)? }) => {
        impl VisitParams for $ty {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
                $(f(format!("{prefix}.{}", stringify!($field)), &self.$field);)+
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
                $(f(format!("{prefix}.{}", stringify!($field)), &mut self.$field);)+
            }
        }
    };
}

#[derive(Debug, Clone)]
pub struct LinearParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearParams {
    pub fn init(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        LinearParams {
            w: trunc_normal(vec![input, output], rng),
            b: Tensor::zeros(vec![output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        LinearParams {
            w: Tensor::zeros(vec![input, output]),
            b: Tensor::zeros(vec![output]),
        }
    }
}

visit_fields!(LinearParams { w, b });

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    pub fn init(width: usize) -> Self {
        LayerNormParams {
            gain: Tensor::new(vec![width], vec![1.0; width]).expect("ln gain"),
            bias: Tensor::zeros(vec![width]),
        }
    }
}

visit_fields!(LayerNormParams { gain, bias });

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl AttentionParams {
    pub fn init(width: usize, rng: &mut ChaCha8Rng) -> Self {
        AttentionParams {
            wq: trunc_normal(vec![width, width], rng),
            bq: Tensor::zeros(vec![width]),
            wk: trunc_normal(vec![width, width], rng),
            bk: Tensor::zeros(vec![width]),
            wv: trunc_normal(vec![width, width], rng),
            bv: Tensor::zeros(vec![width]),
            wo: trunc_normal(vec![width, width], rng),
            bo: Tensor::zeros(vec![width]),
        }
    }
}

visit_fields!(AttentionParams { wq, bq, wk, bk, wv, bv, wo, bo });

/// One pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl BlockParams {
    pub fn init(width: usize, mlp_ratio: usize, rng: &mut ChaCha8Rng) -> Self {
        BlockParams {
            ln1: LayerNormParams::init(width),
            attn: AttentionParams::init(width, rng),
            ln2: LayerNormParams::init(width),
            fc1: LinearParams::init(width, width * mlp_ratio, rng),
            fc2: LinearParams::init(width * mlp_ratio, width, rng),
        }
    }
}

impl VisitParams for BlockParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.fc1.visit_mut(&format!("{prefix}.fc1"), f);
        self.fc2.visit_mut(&format!("{prefix}.fc2"), f);
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoderParams {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<BlockParams>,
    pub out_proj: LinearParams,
}

impl TextEncoderParams {
    pub fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        TextEncoderParams {
            tok_emb: trunc_normal(vec![cfg.vocab_size, cfg.embed_dim], rng),
            pos_emb: trunc_normal(vec![cfg.max_text_len, cfg.embed_dim], rng),
            blocks: (0..cfg.text_layers)
                .map(|_| BlockParams::init(cfg.embed_dim, cfg.mlp_ratio, rng))
                .collect(),
            out_proj: LinearParams::init(cfg.embed_dim, cfg.embed_dim, rng),
        }
    }
}

impl VisitParams for TextEncoderParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.tok_emb"), &self.tok_emb);
        f(format!("{prefix}.pos_emb"), &self.pos_emb);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.block{i}"), f);
        }
        self.out_proj.visit(&format!("{prefix}.out_proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.tok_emb"), &mut self.tok_emb);
        f(format!("{prefix}.pos_emb"), &mut self.pos_emb);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.block{i}"), f);
        }
        self.out_proj.visit_mut(&format!("{prefix}.out_proj"), f);
    }
}

#[derive(Debug, Clone)]
pub struct ImageEncoderParams {
    pub patch_proj: LinearParams,
    pub blocks: Vec<BlockParams>,
    pub out_proj: LinearParams,
}

impl ImageEncoderParams {
    pub fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        ImageEncoderParams {
            patch_proj: LinearParams::init(cfg.patch_dim, cfg.embed_dim, rng),
            blocks: (0..NUM_STAGES)
                .map(|_| BlockParams::init(cfg.embed_dim, cfg.mlp_ratio, rng))
                .collect(),
            out_proj: LinearParams::init(cfg.embed_dim, cfg.embed_dim, rng),
        }
    }
}

impl VisitParams for ImageEncoderParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.patch_proj.visit(&format!("{prefix}.patch_proj"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.block{i}"), f);
        }
        self.out_proj.visit(&format!("{prefix}.out_proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.patch_proj.visit_mut(&format!("{prefix}.patch_proj"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.block{i}"), f);
        }
        self.out_proj.visit_mut(&format!("{prefix}.out_proj"), f);
    }
}

// ── taped mirrors ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct TapedLinear {
    pub w: TensorId,
    pub b: TensorId,
}

#[derive(Debug, Clone, Copy)]
pub struct TapedLayerNorm {
    pub gain: TensorId,
    pub bias: TensorId,
}

#[derive(Debug, Clone, Copy)]
pub struct TapedBlock {
    pub ln1: TapedLayerNorm,
    pub attn: AttnWeights,
    pub ln2: TapedLayerNorm,
    pub fc1: TapedLinear,
    pub fc2: TapedLinear,
}

#[derive(Debug, Clone)]
pub struct TapedTextEncoder {
    pub tok_emb: TensorId,
    pub pos_emb: TensorId,
    pub blocks: Vec<TapedBlock>,
    pub out_proj: TapedLinear,
}

#[derive(Debug, Clone)]
pub struct TapedImageEncoder {
    pub patch_proj: TapedLinear,
    pub blocks: Vec<TapedBlock>,
    pub out_proj: TapedLinear,
}

fn stage_tensor(tape: &mut Tape, t: &Tensor, trainable: bool) -> TensorId {
    if trainable {
        tape.param_from(t)
    } else {
        let mut c = t.clone();
        c.requires_grad = false;
        c.grad = None;
        tape.input(c)
    }
}

pub fn stage_linear(tape: &mut Tape, p: &LinearParams, trainable: bool) -> TapedLinear {
    TapedLinear {
        w: stage_tensor(tape, &p.w, trainable),
        b: stage_tensor(tape, &p.b, trainable),
    }
}

pub fn stage_attention(tape: &mut Tape, p: &AttentionParams, trainable: bool) -> AttnWeights {
    AttnWeights {
        wq: stage_tensor(tape, &p.wq, trainable),
        bq: stage_tensor(tape, &p.bq, trainable),
        wk: stage_tensor(tape, &p.wk, trainable),
        bk: stage_tensor(tape, &p.bk, trainable),
        wv: stage_tensor(tape, &p.wv, trainable),
        bv: stage_tensor(tape, &p.bv, trainable),
        wo: stage_tensor(tape, &p.wo, trainable),
        bo: stage_tensor(tape, &p.bo, trainable),
    }
}

fn stage_block(tape: &mut Tape, p: &BlockParams, trainable: bool) -> TapedBlock {
    TapedBlock {
        ln1: TapedLayerNorm {
            gain: stage_tensor(tape, &p.ln1.gain, trainable),
            bias: stage_tensor(tape, &p.ln1.bias, trainable),
        },
        attn: stage_attention(tape, &p.attn, trainable),
        ln2: TapedLayerNorm {
            gain: stage_tensor(tape, &p.ln2.gain, trainable),
            bias: stage_tensor(tape, &p.ln2.bias, trainable),
        },
        fc1: stage_linear(tape, &p.fc1, trainable),
        fc2: stage_linear(tape, &p.fc2, trainable),
    }
}

impl TextEncoderParams {
    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> TapedTextEncoder {
        TapedTextEncoder {
            tok_emb: stage_tensor(tape, &self.tok_emb, trainable),
            pos_emb: stage_tensor(tape, &self.pos_emb, trainable),
            blocks: self
                .blocks
                .iter()
                .map(|b| stage_block(tape, b, trainable))
                .collect(),
            out_proj: stage_linear(tape, &self.out_proj, trainable),
        }
    }
}

impl ImageEncoderParams {
    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> TapedImageEncoder {
        TapedImageEncoder {
            patch_proj: stage_linear(tape, &self.patch_proj, trainable),
            blocks: self
                .blocks
                .iter()
                .map(|b| stage_block(tape, b, trainable))
                .collect(),
            out_proj: stage_linear(tape, &self.out_proj, trainable),
        }
    }
}

// ── forward passes ──────────────────────────────────────────────────────

/// Per-sample token embeddings at each stage plus the global embedding.
#[derive(Debug, Clone)]
pub struct StageEmbeddings {
    /// Flattened [total_rows, d] tensors, one per stage.
    pub stages: [TensorId; NUM_STAGES],
    /// Row layout shared by all four stage tensors.
    pub blocks: RowBlocks,
    /// [n, d], rows on the unit sphere.
    pub global: TensorId,
}

impl StageEmbeddings {
    /// Materialize stage `s` as a padded [n, max_len, d] tensor with zero
    /// rows at pad positions (inspection/serialization view).
    pub fn padded_stage(&self, tape: &Tape, s: usize, max_len: usize) -> Tensor {
        let flat = tape.value(self.stages[s]);
        let d = flat.shape[1];
        let n = self.blocks.samples();
        let mut out = Tensor::zeros(vec![n, max_len, d]);
        for i in 0..n {
            for (p, r) in self.blocks.range(i).enumerate() {
                let dst = (i * max_len + p) * d;
                out.data[dst..dst + d].copy_from_slice(&flat.data[r * d..(r + 1) * d]);
            }
        }
        out
    }
}

/// One pre-norm transformer block: x + Att(LN(x)), then x + MLP(LN(x)).
pub fn transformer_block(
    tape: &mut Tape,
    x: TensorId,
    blocks: &RowBlocks,
    p: &TapedBlock,
    heads: usize,
) -> Result<TensorId> {
    let a = tape.layer_norm_rows(x, p.ln1.gain, p.ln1.bias, LAYER_NORM_EPS)?;
    let att = tape.attention(a, a, blocks, blocks, p.attn, heads)?;
    let x = tape.add(x, att)?;
    let m = tape.layer_norm_rows(x, p.ln2.gain, p.ln2.bias, LAYER_NORM_EPS)?;
    let h = tape.linear(m, p.fc1.w, p.fc1.b)?;
    let h = tape.gelu(h)?;
    let h = tape.linear(h, p.fc2.w, p.fc2.b)?;
    tape.add(x, h)
}

/// Run the blocks belonging to one stage (text tower).
pub(crate) fn text_stage_forward(
    tape: &mut Tape,
    enc: &TapedTextEncoder,
    x: TensorId,
    blocks: &RowBlocks,
    stage: usize,
    cfg: &EncoderConfig,
) -> Result<TensorId> {
    let per = cfg.text_layers_per_stage();
    let mut x = x;
    for b in &enc.blocks[stage * per..(stage + 1) * per] {
        x = transformer_block(tape, x, blocks, b, cfg.heads)?;
    }
    Ok(x)
}

/// Encode a token batch: stage embeddings over the non-pad prefixes and the
/// EOS-position global embedding.
pub fn encode_text(
    tape: &mut Tape,
    enc: &TapedTextEncoder,
    batch: &TokenBatch,
    cfg: &EncoderConfig,
) -> Result<StageEmbeddings> {
    if tape.shape(enc.tok_emb) != [cfg.vocab_size, cfg.embed_dim] {
        return Err(Error::config(
            "encoder.vocab_size",
            "token embedding does not match config",
        ));
    }
    if batch.max_len > cfg.max_text_len {
        return Err(Error::config(
            "encoder.max_text_len",
            format!("batch max_len {} exceeds config {}", batch.max_len, cfg.max_text_len),
        ));
    }
    if let Some(&bad) = batch.token_ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }

    let blocks = batch.blocks();
    let mut tok_idx = Vec::with_capacity(blocks.total());
    let mut pos_idx = Vec::with_capacity(blocks.total());
    for i in 0..batch.n {
        for (p, &id) in batch.ids(i).iter().enumerate() {
            tok_idx.push(id as usize);
            pos_idx.push(p);
        }
    }

    let te = tape.gather_rows(enc.tok_emb, &tok_idx)?;
    let pe = tape.gather_rows(enc.pos_emb, &pos_idx)?;
    let mut x = tape.add(te, pe)?;

    let mut stages = [x; NUM_STAGES];
    for s in 0..NUM_STAGES {
        x = text_stage_forward(tape, enc, x, &blocks, s, cfg)?;
        stages[s] = x;
    }

    let eos_idx: Vec<usize> = (0..batch.n).map(|i| blocks.flat(i, batch.lens[i] - 1)).collect();
    let eos = tape.gather_rows(stages[NUM_STAGES - 1], &eos_idx)?;
    let proj = tape.linear(eos, enc.out_proj.w, enc.out_proj.b)?;
    let global = tape.l2_normalize_rows(proj)?;

    Ok(StageEmbeddings {
        stages,
        blocks,
        global,
    })
}

/// Encode an image batch: projected patches through one block per stage and
/// the mean-pooled global embedding.
pub fn encode_image(
    tape: &mut Tape,
    enc: &TapedImageEncoder,
    batch: &ImageBatch,
    cfg: &EncoderConfig,
) -> Result<StageEmbeddings> {
    if tape.shape(enc.patch_proj.w) != [cfg.patch_dim, cfg.embed_dim] {
        return Err(Error::config(
            "encoder.patch_dim",
            "patch projection does not match config",
        ));
    }
    if batch.patch_dim != cfg.patch_dim {
        return Err(Error::config(
            "encoder.patch_dim",
            format!("batch patch_dim {} vs config {}", batch.patch_dim, cfg.patch_dim),
        ));
    }

    let blocks = RowBlocks::uniform(batch.n, batch.patches);
    let raw = tape.constant(vec![blocks.total(), batch.patch_dim], batch.data.clone())?;
    let mut x = tape.linear(raw, enc.patch_proj.w, enc.patch_proj.b)?;

    let mut stages = [x; NUM_STAGES];
    for s in 0..NUM_STAGES {
        x = transformer_block(tape, x, &blocks, &enc.blocks[s], cfg.heads)?;
        stages[s] = x;
    }

    let pooled = tape.segment_mean_rows(stages[NUM_STAGES - 1], &blocks)?;
    let proj = tape.linear(pooled, enc.out_proj.w, enc.out_proj.b)?;
    let global = tape.l2_normalize_rows(proj)?;

    Ok(StageEmbeddings {
        stages,
        blocks,
        global,
    })
}
