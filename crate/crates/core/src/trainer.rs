//! Objective assembly, the optimization loop, and retrieval evaluation.
//!
//! One training step encodes the unmasked image and text (instance and
//! token objectives), encodes the masked text (MLM), assembles the weighted
//! total loss, backpropagates, and applies AdamW with the warmup-cosine
//! schedule; the temperature scale updates jointly and is clamped. Targets
//! for the instance objective follow the epoch-gated label schedule.
//!
//! Evaluation ranks held-out pairs by global-embedding cosine only; fusion
//! and the matching loss never run there (the instrumentation counters stay
//! untouched). Token-matching accuracy against ground truth is produced by
//! a separate diagnostic that solves assignments directly on stage-4
//! embeddings.

use crate::corpus::{self, ConceptWorld, PairedSample, Split};
use crate::encoders::{
    encode_image, encode_text, EncoderConfig, ImageEncoderParams, TextEncoderParams, VisitParams,
};
use crate::error::{Error, Result};
use crate::instance::{
    self, clamp_log_inv_tau, importance_targets, infonce, log_inv_tau_from_tau, one_hot_targets,
    similarity_logits, smooth_targets, FillSource, LabelSchedule, Phase, TargetDistribution,
};
use crate::matching::Assignment;
use crate::mlm::{
    apply_masking, mlm_fused_loss, mlm_loss, mlm_text_loss, FusionConfig, FusionParams, MlmHeads,
};
use crate::optim::{lr_at, AdamW, AdamWConfig};
use crate::par;
use crate::rng::{derive_rng, derive_seed, Stream};
use crate::tensor::{Tape, Tensor, TensorId};
use crate::token_align::{matchable_positions, token_loss};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const METRICS_HEADER: &str =
    "epoch,step,lr,tau,loss_total,loss_inst,loss_token,loss_mlm_text,loss_mlm_fuse,phase";
pub const EVAL_HEADER: &str = "epoch,r1_i2t,r5_i2t,r1_t2i,r5_t2i,matching_accuracy";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.8,
            beta: 0.1,
            gamma: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(
                    format!("weights.{name}"),
                    format!("{v} outside [0,1]"),
                ));
            }
        }
        let sum = self.alpha + self.beta + self.gamma;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "weights",
                format!("alpha+beta+gamma must equal 1, got {sum}"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub r1: f64,
    pub r2: f64,
    pub delta: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            r1: 0.33,
            r2: 0.66,
            delta: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub train_samples: usize,
    pub heldout_samples: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub tau_init: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub schedule: ScheduleConfig,
    pub fusion: FusionConfig,
    pub encoder: EncoderConfig,
    pub world: ConceptWorld,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 32,
            batch_size: 64,
            train_samples: 4096,
            heldout_samples: 512,
            peak_lr: 5e-4,
            warmup_fraction: 0.05,
            weight_decay: 0.1,
            tau_init: instance::TAU_INIT,
            seed: 42,
            weights: LossWeights::default(),
            schedule: ScheduleConfig::default(),
            fusion: FusionConfig::default(),
            encoder: EncoderConfig::default(),
            world: ConceptWorld::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.encoder.validate()?;
        self.fusion.validate(self.encoder.embed_dim)?;
        self.world.validate(self.encoder.vocab_size)?;
        self.label_schedule()?;
        if self.batch_size < 2 {
            return Err(Error::config("train.batch_size", "contrastive loss needs n >= 2"));
        }
        if self.train_samples == 0 || self.train_samples % self.batch_size != 0 {
            return Err(Error::config(
                "train.train_samples",
                format!(
                    "{} must be a positive multiple of batch_size {}",
                    self.train_samples, self.batch_size
                ),
            ));
        }
        if self.heldout_samples < 2 {
            return Err(Error::config("train.heldout_samples", "need at least 2"));
        }
        if !(0.0 < self.warmup_fraction && self.warmup_fraction < 1.0) {
            return Err(Error::config(
                "train.warmup_fraction",
                format!("{} outside (0,1)", self.warmup_fraction),
            ));
        }
        if self.peak_lr <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config("train", "peak_lr must be positive, weight_decay >= 0"));
        }
        if !(instance::TAU_MIN..=instance::TAU_MAX).contains(&self.tau_init) {
            return Err(Error::config(
                "train.tau_init",
                format!("{} outside [{}, {}]", self.tau_init, instance::TAU_MIN, instance::TAU_MAX),
            ));
        }
        if self.world.patch_dim != self.encoder.patch_dim {
            return Err(Error::config(
                "world.patch_dim",
                format!("{} vs encoder patch_dim {}", self.world.patch_dim, self.encoder.patch_dim),
            ));
        }
        if self.world.max_text_len > self.encoder.max_text_len {
            return Err(Error::config(
                "world.max_text_len",
                "exceeds encoder max_text_len",
            ));
        }
        if self.fusion.common_width != self.encoder.embed_dim {
            // fused head width is fixed at init time; keep them in lockstep
            return Err(Error::config(
                "fusion.common_width",
                format!(
                    "{} must match encoder embed_dim {}",
                    self.fusion.common_width, self.encoder.embed_dim
                ),
            ));
        }
        Ok(())
    }

    pub fn label_schedule(&self) -> Result<LabelSchedule> {
        LabelSchedule::new(self.epochs, self.schedule.r1, self.schedule.r2, self.schedule.delta)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_samples / self.batch_size
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }
}

// ── model parameters ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub image: ImageEncoderParams,
    pub text: TextEncoderParams,
    pub fusion: FusionParams,
    pub heads: MlmHeads,
    pub log_inv_tau: Tensor,
}

impl ModelParams {
    pub fn init(cfg: &TrainConfig) -> Self {
        let mut rng = derive_rng(cfg.seed, Stream::ParamInit, 0);
        ModelParams {
            image: ImageEncoderParams::init(&cfg.encoder, &mut rng),
            text: TextEncoderParams::init(&cfg.encoder, &mut rng),
            fusion: FusionParams::init(&cfg.fusion, cfg.encoder.embed_dim, &mut rng),
            heads: MlmHeads::init(
                cfg.encoder.embed_dim,
                cfg.fusion.common_width,
                cfg.encoder.vocab_size,
                &mut rng,
            ),
            log_inv_tau: Tensor::new(vec![1], vec![log_inv_tau_from_tau(cfg.tau_init)])
                .expect("scalar"),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.image.visit("image", f);
        self.text.visit("text", f);
        self.fusion.visit("fusion", f);
        self.heads.visit("heads", f);
        f("temperature.log_inv_tau".into(), &self.log_inv_tau);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.image.visit_mut("image", f);
        self.text.visit_mut("text", f);
        self.fusion.visit_mut("fusion", f);
        self.heads.visit_mut("heads", f);
        f("temperature.log_inv_tau".into(), &mut self.log_inv_tau);
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |n, _| names.push(n));
        names
    }

    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.visit(&mut |_, _| count += 1);
        count
    }

    pub fn tau(&self) -> f64 {
        (-self.log_inv_tau.data[0]).exp()
    }

    /// Stage every parameter onto a fresh tape, in visit order, returning
    /// the structured handles and the flat id list aligned with `names()`.
    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> (TapedModel, Vec<TensorId>) {
        let start = tape.len();
        let taped = TapedModel {
            image: self.image.stage(tape, trainable),
            text: self.text.stage(tape, trainable),
            fusion: self.fusion.stage(tape, trainable),
            text_head: crate::encoders::stage_linear(tape, &self.heads.text_head, trainable),
            fused_head: crate::encoders::stage_linear(tape, &self.heads.fused_head, trainable),
            log_inv_tau: {
                let mut t = self.log_inv_tau.clone();
                t.requires_grad = trainable;
                tape.input(t)
            },
        };
        let ids: Vec<TensorId> = (start..tape.len()).map(crate::tensor::TensorId).collect();
        debug_assert_eq!(ids.len(), self.param_count());
        (taped, ids)
    }

    /// Save to a manifest+blob container at `base`.
    pub fn save(&self, base: &Path) -> Result<()> {
        let mut entries = Vec::new();
        self.visit(&mut |name, t| entries.push((name, t)));
        crate::checkpoint::save_tensors(base, &entries)
    }

    /// Load from a container, validating the name set and every shape
    /// against a fresh initialization from `cfg`.
    pub fn load(base: &Path, cfg: &TrainConfig) -> Result<Self> {
        let mut params = ModelParams::init(cfg);
        let loaded = crate::checkpoint::load_tensors(base)?;
        let mut by_name: std::collections::BTreeMap<String, Tensor> = loaded.into_iter().collect();
        let mut err = None;
        params.visit_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match by_name.remove(&name) {
                None => err = Some(Error::Checkpoint(format!("missing tensor {name}"))),
                Some(l) if l.shape != t.shape => {
                    err = Some(Error::Checkpoint(format!(
                        "tensor {name}: checkpoint shape {:?} vs config shape {:?}",
                        l.shape, t.shape
                    )))
                }
                Some(l) => t.data = l.data,
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(params)
    }
}

#[derive(Debug, Clone)]
pub struct TapedModel {
    pub image: crate::encoders::TapedImageEncoder,
    pub text: crate::encoders::TapedTextEncoder,
    pub fusion: crate::mlm::TapedFusion,
    pub text_head: crate::encoders::TapedLinear,
    pub fused_head: crate::encoders::TapedLinear,
    pub log_inv_tau: TensorId,
}

// ── objective assembly ──────────────────────────────────────────────────

/// L = alpha * L_inst + beta * L_token + gamma * L_mlm.
pub fn total_loss(
    tape: &mut Tape,
    l_inst: TensorId,
    l_token: TensorId,
    l_mlm: TensorId,
    w: &LossWeights,
) -> Result<TensorId> {
    w.validate()?;
    let a = tape.scale(l_inst, w.alpha)?;
    let b = tape.scale(l_token, w.beta)?;
    let g = tape.scale(l_mlm, w.gamma)?;
    let ab = tape.add(a, b)?;
    tape.add(ab, g)
}

fn targets_for(
    phase: Phase,
    logits_detached: &[f64],
    n: usize,
    delta: f64,
) -> Result<TargetDistribution> {
    match phase {
        Phase::OneHot => one_hot_targets(n),
        Phase::Smoothed => smooth_targets(&one_hot_targets(n)?, delta),
        Phase::ImportanceAware => importance_targets(logits_detached, n, delta, FillSource::Logits),
    }
}

#[derive(Debug, Clone, Copy)]
struct StepLosses {
    total: f64,
    inst: f64,
    token: f64,
    mlm_text: f64,
    mlm_fuse: f64,
}

// ── training ────────────────────────────────────────────────────────────

#[derive(Debug)]
pub struct TrainOutcome {
    /// Final parameters, or the last epoch-end parameters when diverged.
    pub params: ModelParams,
    /// Report on the held-out split for the final parameters.
    pub report: Option<RetrievalReport>,
    /// Per-step metrics CSV (METRICS_HEADER).
    pub metrics_csv: String,
    /// Per-epoch evaluation CSV (EVAL_HEADER).
    pub eval_csv: String,
    /// Set when training aborted on a non-finite loss or gradient.
    pub diverged: Option<String>,
    /// Steps skipped for missing loss terms (no eligible tokens).
    pub incidents: usize,
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let schedule = cfg.label_schedule()?;
    let train_set = corpus::generate(&cfg.world, cfg.train_samples, cfg.seed, Split::Train)?;
    let heldout = corpus::generate(&cfg.world, cfg.heldout_samples, cfg.seed, Split::Heldout)?;

    let mut params = ModelParams::init(cfg);
    let mut last_good = params.clone();
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        params.param_count(),
    );

    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    let mut eval_rows = String::from(EVAL_HEADER);
    eval_rows.push('\n');
    let mut incidents = 0usize;
    let total_steps = cfg.total_steps();
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let phase = schedule.phase_at(epoch)?;

        let mut indices: Vec<usize> = (0..cfg.train_samples).collect();
        indices.shuffle(&mut derive_rng(cfg.seed, Stream::BatchShuffle, epoch as u64));

        for batch_ids in indices.chunks_exact(cfg.batch_size) {
            let batch: Vec<PairedSample> =
                batch_ids.iter().map(|&i| train_set[i].clone()).collect();
            let step_result = run_step(
                cfg,
                &params,
                &batch,
                phase,
                derive_seed(cfg.seed, Stream::Masking, global_step as u64),
            )?;
            let (losses, grads, skipped) = match step_result {
                StepResult::Ok(l, g, s) => (l, g, s),
                StepResult::NonFinite(msg) => {
                    return Ok(TrainOutcome {
                        params: last_good,
                        report: None,
                        metrics_csv: metrics,
                        eval_csv: eval_rows,
                        diverged: Some(msg),
                        incidents,
                    });
                }
            };
            incidents += skipped;

            let lr = lr_at(global_step, total_steps, cfg.peak_lr, cfg.warmup_fraction)?;
            opt.begin_step();
            let mut slot = 0usize;
            let mut opt_err: Option<Error> = None;
            params.visit_mut(&mut |_, tensor| {
                if opt_err.is_some() {
                    slot += 1;
                    return;
                }
                if let Some(grad) = &grads[slot] {
                    let decay = tensor.shape.len() >= 2;
                    if let Err(e) = opt.step_param(slot, tensor, grad, lr, decay) {
                        opt_err = Some(e);
                    }
                }
                slot += 1;
            });
            if let Some(e) = opt_err {
                return Ok(TrainOutcome {
                    params: last_good,
                    report: None,
                    metrics_csv: metrics,
                    eval_csv: eval_rows,
                    diverged: Some(e.to_string()),
                    incidents,
                });
            }
            params.log_inv_tau.data[0] = clamp_log_inv_tau(params.log_inv_tau.data[0]);

            metrics.push_str(&format!(
                "{epoch},{global_step},{lr},{},{},{},{},{},{},{phase}\n",
                params.tau(),
                losses.total,
                losses.inst,
                losses.token,
                losses.mlm_text,
                losses.mlm_fuse
            ));
            global_step += 1;
        }

        let report = evaluate(&params, cfg, &heldout)?;
        eval_rows.push_str(&format!(
            "{epoch},{},{},{},{},{}\n",
            report.r1_i2t, report.r5_i2t, report.r1_t2i, report.r5_t2i, report.matching_accuracy
        ));
        last_good = params.clone();
    }

    let report = evaluate(&params, cfg, &heldout)?;
    Ok(TrainOutcome {
        params,
        report: Some(report),
        metrics_csv: metrics,
        eval_csv: eval_rows,
        diverged: None,
        incidents,
    })
}

enum StepResult {
    Ok(StepLosses, Vec<Option<Vec<f64>>>, usize),
    NonFinite(String),
}

fn run_step(
    cfg: &TrainConfig,
    params: &ModelParams,
    batch: &[PairedSample],
    phase: Phase,
    mask_seed: u64,
) -> Result<StepResult> {
    let (image_batch, text_batch) = corpus::to_batches(&cfg.world, batch)?;
    let mut tape = Tape::new();
    let (model, flat_ids) = params.stage(&mut tape, true);
    let inv_tau = tape.exp(model.log_inv_tau)?;

    let img = encode_image(&mut tape, &model.image, &image_batch, &cfg.encoder)?;
    let txt = encode_text(&mut tape, &model.text, &text_batch, &cfg.encoder)?;

    // instance-level alignment with phase-dependent targets
    let logits = similarity_logits(&mut tape, img.global, txt.global, inv_tau)?;
    let t_i2t = targets_for(phase, tape.data(logits.i2t), logits.n, cfg.schedule.delta)?;
    let t_t2i = targets_for(phase, tape.data(logits.t2i), logits.n, cfg.schedule.delta)?;
    let l_inst = infonce(&mut tape, &logits, &t_i2t, &t_t2i)?;

    let mut skipped = 0usize;
    let zero = tape.constant(vec![1], vec![0.0])?;

    let l_token = if cfg.weights.beta > 0.0 {
        let out = token_loss(&mut tape, &img, &txt, &text_batch)?;
        skipped += out.skipped;
        out.loss.unwrap_or(zero)
    } else {
        zero
    };

    let (l_mlm, mlm_text_v, mlm_fuse_v) = if cfg.weights.gamma > 0.0 {
        let masked = apply_masking(&text_batch, cfg.encoder.vocab_size, mask_seed)?;
        let masked_txt = encode_text(&mut tape, &model.text, &masked.masked, &cfg.encoder)?;
        let text_term = mlm_text_loss(
            &mut tape,
            masked_txt.stages[3],
            &masked_txt.blocks,
            &masked,
            model.text_head,
        )?;
        let fused_term = mlm_fused_loss(
            &mut tape,
            &img,
            &masked_txt,
            &masked,
            &cfg.fusion,
            &model.fusion,
            model.fused_head,
        )?;
        match (text_term, fused_term) {
            (Some(t), Some(f)) => {
                let l = mlm_loss(&mut tape, t, f)?;
                (l, tape.scalar_value(t), tape.scalar_value(f))
            }
            _ => {
                skipped += 1;
                (zero, 0.0, 0.0)
            }
        }
    } else {
        (zero, 0.0, 0.0)
    };

    let total = total_loss(&mut tape, l_inst, l_token, l_mlm, &cfg.weights)?;
    let total_v = tape.scalar_value(total);
    if !total_v.is_finite() {
        return Ok(StepResult::NonFinite(format!(
            "non-finite loss {total_v} in phase {phase}"
        )));
    }

    let losses = StepLosses {
        total: total_v,
        inst: tape.scalar_value(l_inst),
        token: tape.scalar_value(l_token),
        mlm_text: mlm_text_v,
        mlm_fuse: mlm_fuse_v,
    };

    tape.backward(total)?;
    let grads: Vec<Option<Vec<f64>>> = flat_ids
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()))
        .collect();
    Ok(StepResult::Ok(losses, grads, skipped))
}

// ── evaluation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub heldout: usize,
    pub r1_i2t: f64,
    pub r5_i2t: f64,
    pub r1_t2i: f64,
    pub r5_t2i: f64,
    pub matching_accuracy: f64,
}

/// Recall@k for both directions from unit-norm global embeddings
/// (row-major [n, d]). Ties resolve toward the lower index.
pub fn recall_at_k(img: &[f64], txt: &[f64], n: usize, d: usize, k: usize) -> (f64, f64) {
    let rank = |queries: &[f64], keys: &[f64], i: usize| -> usize {
        let q = &queries[i * d..(i + 1) * d];
        let s_true: f64 = q.iter().zip(&keys[i * d..(i + 1) * d]).map(|(a, b)| a * b).sum();
        let mut rank = 0usize;
        for j in 0..n {
            if j == i {
                continue;
            }
            let s: f64 = q.iter().zip(&keys[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum();
            if s > s_true || (s == s_true && j < i) {
                rank += 1;
            }
        }
        rank
    };
    let hits = par::map_indexed(n, |i| {
        let r_i2t = rank(img, txt, i);
        let r_t2i = rank(txt, img, i);
        ((r_i2t < k) as u32, (r_t2i < k) as u32)
    });
    let i2t: u32 = hits.iter().map(|h| h.0).sum();
    let t2i: u32 = hits.iter().map(|h| h.1).sum();
    (i2t as f64 / n as f64, t2i as f64 / n as f64)
}

/// Sequential twin of [`recall_at_k`] for the bench comparison.
pub fn recall_at_k_seq(img: &[f64], txt: &[f64], n: usize, d: usize, k: usize) -> (f64, f64) {
    let mut i2t = 0u32;
    let mut t2i = 0u32;
    let rank = |queries: &[f64], keys: &[f64], i: usize| -> usize {
        let q = &queries[i * d..(i + 1) * d];
        let s_true: f64 = q.iter().zip(&keys[i * d..(i + 1) * d]).map(|(a, b)| a * b).sum();
        let mut rank = 0usize;
        for j in 0..n {
            if j == i {
                continue;
            }
            let s: f64 = q.iter().zip(&keys[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum();
            if s > s_true || (s == s_true && j < i) {
                rank += 1;
            }
        }
        rank
    };
    for i in 0..n {
        i2t += (rank(img, txt, i) < k) as u32;
        t2i += (rank(txt, img, i) < k) as u32;
    }
    (i2t as f64 / n as f64, t2i as f64 / n as f64)
}

/// Monte Carlo chance baseline for recall@k under a random ranking.
pub fn chance_recall_at_k(n: usize, k: usize, trials: usize, seed: u64) -> f64 {
    use rand::Rng;
    let hits = par::map_indexed(trials, |t| {
        let mut rng = derive_rng(seed, Stream::ChanceOracle, t as u64 + 1_000_000);
        (rng.gen_range(0..n) < k) as u32
    });
    hits.iter().map(|&h| h as u64).sum::<u64>() as f64 / trials as f64
}

/// Per-sample diagnostic matchings on plain stage-4 embeddings.
struct EvalEmbeddings {
    img_global: Vec<f64>,
    txt_global: Vec<f64>,
    /// per sample: (image stage-4 rows, matchable text stage-4 rows,
    /// matchable text positions)
    stage4: Vec<(Vec<f64>, Vec<f64>, Vec<usize>)>,
}

fn eval_forward(
    params: &ModelParams,
    cfg: &TrainConfig,
    heldout: &[PairedSample],
) -> Result<EvalEmbeddings> {
    let (image_batch, text_batch) = corpus::to_batches(&cfg.world, heldout)?;
    let mut tape = Tape::new();
    let (model, _) = params.stage(&mut tape, false);
    let img = encode_image(&mut tape, &model.image, &image_batch, &cfg.encoder)?;
    let txt = encode_text(&mut tape, &model.text, &text_batch, &cfg.encoder)?;

    let d = cfg.encoder.embed_dim;
    let positions = matchable_positions(&text_batch);
    let img4 = tape.data(img.stages[3]);
    let txt4 = tape.data(txt.stages[3]);
    let stage4 = (0..heldout.len())
        .map(|i| {
            let ir = img.blocks.range(i);
            let img_rows = img4[ir.start * d..ir.end * d].to_vec();
            let txt_rows: Vec<f64> = positions[i]
                .iter()
                .flat_map(|&p| {
                    let r = txt.blocks.flat(i, p);
                    txt4[r * d..(r + 1) * d].to_vec()
                })
                .collect();
            (img_rows, txt_rows, positions[i].clone())
        })
        .collect();

    Ok(EvalEmbeddings {
        img_global: tape.data(img.global).to_vec(),
        txt_global: tape.data(txt.global).to_vec(),
        stage4,
    })
}

/// Evaluate retrieval recall and token-matching accuracy on a held-out
/// split. The retrieval path touches only global embeddings; the matching
/// accuracy is a diagnostic solved directly with the assignment solver.
pub fn evaluate(
    params: &ModelParams,
    cfg: &TrainConfig,
    heldout: &[PairedSample],
) -> Result<RetrievalReport> {
    let n = heldout.len();
    if n < 2 {
        return Err(Error::Batch("evaluate needs at least 2 held-out samples".into()));
    }
    let emb = eval_forward(params, cfg, heldout)?;
    let d = cfg.encoder.embed_dim;
    let (r1_i2t, r1_t2i) = recall_at_k(&emb.img_global, &emb.txt_global, n, d, 1);
    let (r5_i2t, r5_t2i) = recall_at_k(&emb.img_global, &emb.txt_global, n, d, 5);

    let accs: Vec<Result<f64>> = par::map_indexed(n, |i| {
        let (img_rows, txt_rows, positions) = &emb.stage4[i];
        let l1 = cfg.world.patches_per_image;
        let assignment: Assignment = if positions.is_empty() {
            Assignment {
                pairs: vec![],
                total_cost: 0.0,
            }
        } else {
            crate::token_align::match_tokens(img_rows, l1, txt_rows, positions, d)?.0
        };
        // map solver columns back to absolute text positions
        let mapped = Assignment {
            pairs: assignment
                .pairs
                .iter()
                .map(|&(r, c)| (r, positions[c]))
                .collect(),
            total_cost: assignment.total_cost,
        };
        Ok(corpus::oracle_matching_accuracy(&mapped, &heldout[i].truth))
    });
    let mut acc_sum = 0.0;
    for a in accs {
        acc_sum += a?;
    }

    Ok(RetrievalReport {
        heldout: n,
        r1_i2t,
        r5_i2t,
        r1_t2i,
        r5_t2i,
        matching_accuracy: acc_sum / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            train_samples: 64,
            heldout_samples: 16,
            encoder: EncoderConfig {
                embed_dim: 32,
                heads: 4,
                vocab_size: 128,
                max_text_len: 8,
                text_layers: 4,
                patch_dim: 16,
                mlp_ratio: 2,
            },
            fusion: FusionConfig {
                stages: (2, 3),
                heads: 4,
                common_width: 32,
            },
            world: ConceptWorld {
                concepts: 16,
                patch_dim: 16,
                patches_per_image: 6,
                max_text_len: 8,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn weights_validate_sum_and_range() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { alpha: 0.8, beta: 0.1, gamma: 0.05 }.validate().is_err());
        assert!(LossWeights { alpha: 1.2, beta: -0.1, gamma: -0.1 }.validate().is_err());
    }

    #[test]
    fn total_loss_weighted_sum() {
        let mut tape = Tape::new();
        let one = tape.constant(vec![1], vec![1.0]).unwrap();
        let w = LossWeights::default();
        let l = total_loss(&mut tape, one, one, one, &w).unwrap();
        assert!((tape.scalar_value(l) - 1.0).abs() < 1e-15);

        let a = tape.constant(vec![1], vec![2.0]).unwrap();
        let b = tape.constant(vec![1], vec![1.0]).unwrap();
        let c = tape.constant(vec![1], vec![3.0]).unwrap();
        let l = total_loss(&mut tape, a, b, c, &w).unwrap();
        assert!((tape.scalar_value(l) - 2.0).abs() < 1e-15);

        let inst_only = LossWeights { alpha: 1.0, beta: 0.0, gamma: 0.0 };
        let l = total_loss(&mut tape, a, b, c, &inst_only).unwrap();
        assert!((tape.scalar_value(l) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn param_staging_matches_visit_order() {
        let cfg = quick_cfg();
        let params = ModelParams::init(&cfg);
        let mut tape = Tape::new();
        let (_, ids) = params.stage(&mut tape, true);
        assert_eq!(ids.len(), params.names().len());
        // every staged tensor's shape matches the visited tensor
        let mut slot = 0usize;
        params.visit(&mut |_, t| {
            assert_eq!(tape.shape(ids[slot]), t.shape.as_slice());
            slot += 1;
        });
    }

    #[test]
    fn checkpoint_round_trip_preserves_params() {
        let cfg = quick_cfg();
        let params = ModelParams::init(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("model");
        params.save(&base).unwrap();
        let loaded = ModelParams::load(&base, &cfg).unwrap();
        let mut pairs: Vec<(String, Vec<f64>)> = Vec::new();
        params.visit(&mut |n, t| pairs.push((n, t.data.clone())));
        let mut slot = 0;
        loaded.visit(&mut |n, t| {
            assert_eq!(n, pairs[slot].0);
            assert_eq!(t.data, pairs[slot].1);
            slot += 1;
        });
    }

    #[test]
    fn checkpoint_shape_mismatch_is_rejected() {
        let cfg = quick_cfg();
        let params = ModelParams::init(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("model");
        params.save(&base).unwrap();
        let mut bigger = quick_cfg();
        bigger.encoder.embed_dim = 64;
        bigger.fusion.common_width = 64;
        assert!(matches!(
            ModelParams::load(&base, &bigger),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn perfect_embedding_stub_reaches_full_recall() {
        let n = 50;
        let d = 8;
        let mut rng = derive_rng(5, Stream::ChanceOracle, 3);
        use rand::Rng;
        let mut txt = vec![0.0; n * d];
        for row in txt.chunks_mut(d) {
            let mut norm = 0.0f64;
            for v in row.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
                norm += *v * *v;
            }
            for v in row.iter_mut() {
                *v /= norm.sqrt();
            }
        }
        let img = txt.clone();
        let (r1_i2t, r1_t2i) = recall_at_k(&img, &txt, n, d, 1);
        assert_eq!(r1_i2t, 1.0);
        assert_eq!(r1_t2i, 1.0);
        let seq = recall_at_k_seq(&img, &txt, n, d, 1);
        assert_eq!(seq, (1.0, 1.0));
    }

    #[test]
    fn chance_recall_matches_analytic_value() {
        let chance = chance_recall_at_k(100, 1, 200_000, 9);
        assert!((chance - 0.01).abs() < 0.002, "chance {chance}");
        let chance5 = chance_recall_at_k(100, 5, 200_000, 10);
        assert!((chance5 - 0.05).abs() < 0.004, "chance {chance5}");
    }

    #[test]
    fn smoke_train_two_epochs_improves_and_is_deterministic() {
        let cfg = quick_cfg();
        let out1 = train(&cfg).unwrap();
        assert!(out1.diverged.is_none());
        let report = out1.report.as_ref().unwrap();
        assert!(report.r1_i2t >= 0.0 && report.r1_i2t <= 1.0);

        // two eval rows, one per epoch
        assert_eq!(out1.eval_csv.lines().count(), 1 + cfg.epochs);
        assert_eq!(out1.metrics_csv.lines().count(), 1 + cfg.total_steps());

        // smoothed (epoch-mean) training loss is non-increasing
        let mut per_epoch = vec![0.0f64; cfg.epochs];
        let mut counts = vec![0usize; cfg.epochs];
        for line in out1.metrics_csv.lines().skip(1) {
            let cells: Vec<&str> = line.split(',').collect();
            let e: usize = cells[0].parse().unwrap();
            per_epoch[e] += cells[4].parse::<f64>().unwrap();
            counts[e] += 1;
        }
        let first = per_epoch[0] / counts[0] as f64;
        let last = per_epoch[cfg.epochs - 1] / counts[cfg.epochs - 1] as f64;
        assert!(last <= first, "epoch-mean loss increased: {first} -> {last}");

        let out2 = train(&cfg).unwrap();
        assert_eq!(out1.metrics_csv, out2.metrics_csv);
        assert_eq!(out1.eval_csv, out2.eval_csv);
    }

    #[test]
    fn loss_decomposition_holds_per_row() {
        let cfg = quick_cfg();
        let out = train(&cfg).unwrap();
        let w = cfg.weights;
        for line in out.metrics_csv.lines().skip(1) {
            let cells: Vec<&str> = line.split(',').collect();
            let total: f64 = cells[4].parse().unwrap();
            let inst: f64 = cells[5].parse().unwrap();
            let token: f64 = cells[6].parse().unwrap();
            let mlm_t: f64 = cells[7].parse().unwrap();
            let mlm_f: f64 = cells[8].parse().unwrap();
            let recomposed = w.alpha * inst + w.beta * token + w.gamma * (mlm_t + mlm_f) / 2.0;
            assert!((total - recomposed).abs() < 1e-12, "{total} vs {recomposed}");
        }
    }

    #[test]
    fn eval_path_purity_counters_stay_zero() {
        let cfg = quick_cfg();
        let params = ModelParams::init(&cfg);
        let heldout =
            corpus::generate(&cfg.world, cfg.heldout_samples, cfg.seed, Split::Heldout).unwrap();
        let before = crate::counters::snapshot();
        let report = evaluate(&params, &cfg, &heldout).unwrap();
        let delta = before.delta();
        assert_eq!(delta.fusion_calls, 0);
        assert_eq!(delta.token_loss_calls, 0);
        assert!(report.matching_accuracy >= 0.0);
    }

    #[test]
    fn evaluate_after_reload_matches_in_memory() {
        let mut cfg = quick_cfg();
        cfg.epochs = 1;
        let out = train(&cfg).unwrap();
        let heldout =
            corpus::generate(&cfg.world, cfg.heldout_samples, cfg.seed, Split::Heldout).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ckpt");
        out.params.save(&base).unwrap();
        let reloaded = ModelParams::load(&base, &cfg).unwrap();
        let a = evaluate(&out.params, &cfg, &heldout).unwrap();
        let b = evaluate(&reloaded, &cfg, &heldout).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn untrained_model_sits_at_chance_recall() {
        let mut cfg = quick_cfg();
        cfg.heldout_samples = 100;
        let params = ModelParams::init(&cfg);
        let heldout =
            corpus::generate(&cfg.world, cfg.heldout_samples, cfg.seed, Split::Heldout).unwrap();
        let report = evaluate(&params, &cfg, &heldout).unwrap();
        // chance is 1/100; allow generous slack for the 100-sample estimate
        assert!(report.r1_i2t < 0.15, "untrained r1 {}", report.r1_i2t);
    }

    #[test]
    fn config_validation_rejects_bad_combinations() {
        let mut cfg = quick_cfg();
        cfg.train_samples = 63;
        assert!(cfg.validate().is_err());
        let mut cfg = quick_cfg();
        cfg.weights.alpha = 0.7;
        assert!(cfg.validate().is_err());
        let mut cfg = quick_cfg();
        cfg.world.patch_dim = 99;
        assert!(cfg.validate().is_err());
        assert!(quick_cfg().validate().is_ok());
    }
}
