//! Training methods, the K-shot evaluation protocol, and ablations.
//!
//! Five methods share one parameter store and encoder:
//!
//! * `finetune` — `[CLS]`-head classification, no cloze template.
//! * `prompt_manual` — cloze template, cross entropy over label words.
//! * `prompt_continuous` — cloze plus trainable prompt positions.
//! * `demo_real` — cloze plus one sampled real demonstration per class.
//! * `demo_tuning` — cloze plus per-class virtual demonstration blocks,
//!   trained jointly with a contrastive term that pulls the virtual
//!   sequence toward views where one block is a real demonstration.
//!   Inference uses the bare anchor: no demonstrations at all.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::bank::{
    accumulate_injection_grads, build_injections, mean_virtual_embedding, mean_virtual_encoded,
    sample_demo, BagOfWordsSim, DemoSampling, PromptBank, VirtualDemoBank, VirtualInit,
};
use crate::contrastive::{contrastive_loss_and_grads, ClVector, JointLossConfig, PairBatch};
use crate::data::{Dataset, LabeledText, SplitManifest};
use crate::encoder::{
    self, add_classifier_head, ce_from_logits, head_logits, head_logits_backward, label_logits,
    label_logits_backward, EncoderConfig,
};
use crate::error::{Error, Result};
use crate::task::{Metric, TaskConfig, Verbalizer};
use crate::template::{TemplateEngine, TemplateSpec, TokenPlan};
use crate::tensor::{ParamStore, Tensor};
use crate::vocab::Vocab;

pub const DEFAULT_SEEDS: [u64; 5] = [13, 21, 42, 87, 100];
pub const DEFAULT_K: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Finetune,
    PromptManual,
    PromptContinuous,
    DemoReal,
    DemoTuning,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::PromptManual => "prompt_manual",
            Method::PromptContinuous => "prompt_continuous",
            Method::DemoReal => "demo_real",
            Method::DemoTuning => "demo_tuning",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "finetune" => Ok(Method::Finetune),
            "prompt_manual" => Ok(Method::PromptManual),
            "prompt_continuous" => Ok(Method::PromptContinuous),
            "demo_real" => Ok(Method::DemoReal),
            "demo_tuning" => Ok(Method::DemoTuning),
            other => Err(Error::InvalidConfig(format!("unknown method {other:?}"))),
        }
    }
}

/// Encoder size knobs; the vocabulary size is filled in from data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub init_std: f64,
}

impl Default for ModelShape {
    fn default() -> ModelShape {
        ModelShape {
            dim: 64,
            num_heads: 4,
            num_layers: 2,
            ff_dim: 128,
            max_len: 96,
            init_std: 0.02,
        }
    }
}

impl ModelShape {
    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            max_len: self.max_len,
            dim: self.dim,
            num_heads: self.num_heads,
            num_layers: self.num_layers,
            ff_dim: self.ff_dim,
            init_std: self.init_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub weight_decay: f64,
    pub joint: JointLossConfig,
    pub virtual_init: VirtualInit,
    pub demo_sampling: DemoSampling,
    /// Train only prompt/virtual/head parameters, keeping the encoder fixed.
    pub freeze_encoder: bool,
    /// Prompt positions inserted when `prompt_continuous` runs on a
    /// template without explicit prompt slots.
    pub prompt_len: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            method: Method::DemoTuning,
            lr: 1e-5,
            batch_size: 8,
            max_steps: 1000,
            eval_every: 100,
            weight_decay: 0.01,
            joint: JointLossConfig::default(),
            virtual_init: VirtualInit::default(),
            demo_sampling: DemoSampling::default(),
            freeze_encoder: false,
            prompt_len: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig("lr must be finite and > 0".into()));
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_every == 0 {
            return Err(Error::InvalidConfig(
                "batch_size, max_steps and eval_every must be >= 1".into(),
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(
                "weight_decay must be finite and >= 0".into(),
            ));
        }
        if self.prompt_len == 0 {
            return Err(Error::InvalidConfig("prompt_len must be >= 1".into()));
        }
        self.joint.validate()
    }
}

/// AdamW with decoupled weight decay (applied to 2-D tensors only).
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: ParamStore,
    v: ParamStore,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore, lr: f64, weight_decay: f64) -> AdamW {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &ParamStore,
        trainable: &dyn Fn(&str) -> bool,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            if !trainable(name) {
                continue;
            }
            let g = grads.get(name);
            let m = self.m.get_mut(name);
            for (mi, gi) in m.data.iter_mut().zip(&g.data) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = self.v.get_mut(name);
            for (vi, gi) in v.data.iter_mut().zip(&g.data) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let decay = if p.shape.len() == 2 { self.weight_decay } else { 0.0 };
            let m = self.m.get(name);
            let v = self.v.get(name);
            for i in 0..p.data.len() {
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                p.data[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + decay * p.data[i]);
            }
        }
    }
}

/// Task, template, vocabulary and encoder configuration shared by every
/// seed's run.
#[derive(Debug, Clone)]
pub struct TrainContext {
    pub task: TaskConfig,
    pub spec: TemplateSpec,
    pub vocab: Vocab,
    pub verbalizer: Verbalizer,
    pub encoder_cfg: EncoderConfig,
    pub labels: Vec<String>,
}

impl TrainContext {
    /// Builds the shared context. The vocabulary covers the whole corpus —
    /// the stand-in for a pretrained tokenizer — plus template and label
    /// words.
    pub fn build(task: TaskConfig, corpus: &Dataset, shape: &ModelShape) -> Result<TrainContext> {
        task.validate()?;
        let spec = TemplateSpec::parse(&task.template)?;
        let mut reserved_owned: Vec<String> = spec.literal_words();
        reserved_owned.extend(task.label_words());
        let reserved: Vec<&str> = reserved_owned.iter().map(|s| s.as_str()).collect();
        let texts: Vec<&str> = corpus
            .examples
            .iter()
            .flat_map(|ex| {
                std::iter::once(ex.text.as_str()).chain(ex.text_pair.as_deref())
            })
            .collect();
        let vocab = Vocab::build(texts.iter().copied(), &reserved, true);
        let verbalizer = {
            let pairs: Vec<(String, String)> = task.verbalizer.clone();
            Verbalizer::new(&pairs, &vocab)?
        };
        let encoder_cfg = shape.encoder_config(vocab.len());
        encoder_cfg.validate()?;
        let labels = task.labels();
        Ok(TrainContext {
            task,
            spec,
            vocab,
            verbalizer,
            encoder_cfg,
            labels,
        })
    }

    pub fn engine(&self) -> TemplateEngine<'_> {
        TemplateEngine::new(&self.vocab, self.encoder_cfg.max_len)
    }

    /// The template a method actually runs on.
    pub fn effective_spec(&self, cfg: &TrainConfig) -> TemplateSpec {
        match cfg.method {
            Method::Finetune => TemplateSpec::plain(self.spec.uses_input(1)),
            Method::PromptContinuous if self.spec.num_prompt_tokens() == 0 => {
                self.spec.with_prompt_prefix(cfg.prompt_len)
            }
            _ => self.spec.clone(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.verbalizer.num_classes()
    }
}

/// One optimization step's worth of pre-built sequences. Building is
/// separated from the loss so gradients are a deterministic function of
/// the parameters — that is what makes finite-difference checks possible.
pub struct PreparedStep {
    pub spec: TemplateSpec,
    pub anchors: Vec<TokenPlan>,
    pub golds: Vec<usize>,
    /// Positive views for the contrastive term (demo-tuning only).
    pub positives: Option<Vec<TokenPlan>>,
}

fn cl_row(plan: &TokenPlan, vector: ClVector) -> Result<usize> {
    match vector {
        ClVector::Cls => Ok(plan.cls_pos),
        ClVector::Mask => plan.mask_pos(),
    }
}

/// Builds the training sequences for one batch. Demonstrations (for
/// `demo_real` anchors and `demo_tuning` positives) are drawn from
/// `support` with `rng`.
pub fn prepare_step(
    ctx: &TrainContext,
    cfg: &TrainConfig,
    spec: &TemplateSpec,
    batch: &[&LabeledText],
    support: &Dataset,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedStep> {
    let engine = ctx.engine();
    let by_class = support.by_class(&ctx.labels)?;
    let sim = BagOfWordsSim::new(&ctx.vocab);
    let sim_ref: Option<&dyn crate::bank::SimilarityProvider> = match cfg.demo_sampling {
        DemoSampling::Uniform => None,
        DemoSampling::SimilarityFiltered => Some(&sim),
    };
    let mut anchors = Vec::with_capacity(batch.len());
    let mut golds = Vec::with_capacity(batch.len());
    let mut positives = Vec::new();
    for ex in batch {
        golds.push(ctx.verbalizer.class_of(&ex.label)?);
        let anchor = match cfg.method {
            Method::Finetune | Method::PromptManual | Method::PromptContinuous => {
                engine.render_anchor_fit(spec, ex)?
            }
            Method::DemoReal => {
                let mut demos = Vec::with_capacity(ctx.num_classes());
                for (class, bucket) in by_class.iter().enumerate() {
                    let demo = sample_demo(
                        bucket,
                        ex,
                        &ctx.labels[class],
                        cfg.demo_sampling,
                        sim_ref,
                        rng,
                    )?;
                    demos.push(demo.clone());
                }
                engine.build_demo_augmented(
                    spec,
                    ex,
                    &demos,
                    &ctx.verbalizer,
                    ctx.task.demo_placement,
                )?
            }
            Method::DemoTuning => engine.build_virtual(
                spec,
                ex,
                ctx.num_classes(),
                ctx.task.n,
                ctx.task.demo_placement,
            )?,
        };
        anchors.push(anchor);
        if cfg.method == Method::DemoTuning && cfg.joint.active() {
            let replaced = rng.gen_range(0..ctx.num_classes());
            let demo = sample_demo(
                &by_class[replaced],
                ex,
                &ctx.labels[replaced],
                cfg.demo_sampling,
                sim_ref,
                rng,
            )?;
            positives.push(engine.build_positive(
                spec,
                ex,
                ctx.num_classes(),
                ctx.task.n,
                replaced,
                demo,
                &ctx.verbalizer,
                ctx.task.demo_placement,
            )?);
        }
    }
    Ok(PreparedStep {
        spec: spec.clone(),
        anchors,
        golds,
        positives: if positives.is_empty() { None } else { Some(positives) },
    })
}

struct SeqForward {
    cache: encoder::ForwardCache,
    injections: Vec<(usize, Vec<f64>)>,
    targets: Vec<crate::bank::InjectionTarget>,
}

fn forward_plan(ctx: &TrainContext, params: &ParamStore, plan: &TokenPlan) -> Result<SeqForward> {
    let (injections, targets) = build_injections(params, plan);
    let cache = encoder::forward(&ctx.encoder_cfg, params, &plan.token_ids, &injections)?;
    Ok(SeqForward {
        cache,
        injections,
        targets,
    })
}

fn backward_plan(
    ctx: &TrainContext,
    params: &ParamStore,
    fwd: &SeqForward,
    d_hidden: &Tensor,
    grads: &mut ParamStore,
) {
    let d_inj = encoder::backward(&ctx.encoder_cfg, params, &fwd.cache, d_hidden, grads);
    debug_assert_eq!(d_inj.len(), fwd.injections.len());
    accumulate_injection_grads(grads, &fwd.targets, &d_inj);
}

/// Joint loss and gradients for one prepared batch: mean cross entropy
/// plus `lambda` times the contrastive term when positives are present.
pub fn step_loss_and_grads(
    ctx: &TrainContext,
    params: &ParamStore,
    cfg: &TrainConfig,
    prepared: &PreparedStep,
) -> Result<(f64, ParamStore)> {
    let n = prepared.anchors.len();
    if n == 0 {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let word_ids = ctx.verbalizer.word_ids().to_vec();
    let mut grads = params.zeros_like();

    let mut forwards = Vec::with_capacity(n);
    let mut dlogits_all = Vec::with_capacity(n);
    let mut ce_sum = 0.0;
    for (plan, &gold) in prepared.anchors.iter().zip(&prepared.golds) {
        let fwd = forward_plan(ctx, params, plan)?;
        let logits = match cfg.method {
            Method::Finetune => head_logits(params, &fwd.cache.hidden, plan.cls_pos),
            _ => label_logits(params, &fwd.cache.hidden, plan.mask_pos()?, &word_ids),
        };
        let (ce, dlogits) = ce_from_logits(&logits, gold);
        ce_sum += ce;
        dlogits_all.push(dlogits);
        forwards.push(fwd);
    }
    let ce_mean = ce_sum / n as f64;

    let mut total = ce_mean;
    let mut cl_grads: Option<(Tensor, Tensor, Vec<SeqForward>, Vec<usize>, Vec<usize>)> = None;
    if let Some(pos_plans) = &prepared.positives {
        let dim = ctx.encoder_cfg.dim;
        let mut anchor_rows = Tensor::zeros(&[n, dim]);
        let mut pos_rows = Tensor::zeros(&[n, dim]);
        let mut pos_forwards = Vec::with_capacity(n);
        let mut anchor_cl_rows = Vec::with_capacity(n);
        let mut pos_cl_rows = Vec::with_capacity(n);
        for i in 0..n {
            let a_row = cl_row(&prepared.anchors[i], cfg.joint.cl_vector)?;
            anchor_rows
                .row_mut(i)
                .copy_from_slice(forwards[i].cache.hidden.row(a_row));
            anchor_cl_rows.push(a_row);
            let p_fwd = forward_plan(ctx, params, &pos_plans[i])?;
            let p_row = cl_row(&pos_plans[i], cfg.joint.cl_vector)?;
            pos_rows.row_mut(i).copy_from_slice(p_fwd.cache.hidden.row(p_row));
            pos_cl_rows.push(p_row);
            pos_forwards.push(p_fwd);
        }
        let batch = PairBatch::new(anchor_rows, pos_rows)?;
        let (cl, d_anchor, mut d_pos) = contrastive_loss_and_grads(&batch, &cfg.joint)?;
        if cfg.joint.stop_grad_positive {
            d_pos.fill(0.0);
        }
        total += cfg.joint.lambda * cl;
        cl_grads = Some((d_anchor, d_pos, pos_forwards, anchor_cl_rows, pos_cl_rows));
    }

    // Backward through every anchor sequence.
    for i in 0..n {
        let plan = &prepared.anchors[i];
        let fwd = &forwards[i];
        let mut d_hidden = Tensor::zeros(&[plan.len(), ctx.encoder_cfg.dim]);
        let mut dlogits = dlogits_all[i].clone();
        for v in dlogits.iter_mut() {
            *v /= n as f64;
        }
        match cfg.method {
            Method::Finetune => head_logits_backward(
                params,
                &mut grads,
                &fwd.cache.hidden,
                plan.cls_pos,
                &dlogits,
                &mut d_hidden,
            ),
            _ => label_logits_backward(
                params,
                &mut grads,
                &fwd.cache.hidden,
                plan.mask_pos()?,
                &word_ids,
                &dlogits,
                &mut d_hidden,
            ),
        }
        if let Some((d_anchor, _, _, anchor_cl_rows, _)) = &cl_grads {
            let row = anchor_cl_rows[i];
            for (c, v) in d_anchor.row(i).iter().enumerate() {
                d_hidden.row_mut(row)[c] += cfg.joint.lambda * v;
            }
        }
        backward_plan(ctx, params, fwd, &d_hidden, &mut grads);
    }
    // And through the positive sequences.
    if let Some((_, d_pos, pos_forwards, _, pos_cl_rows)) = &cl_grads {
        if !cfg.joint.stop_grad_positive {
            for i in 0..n {
                let plan = &prepared.positives.as_ref().expect("present")[i];
                let mut d_hidden = Tensor::zeros(&[plan.len(), ctx.encoder_cfg.dim]);
                let row = pos_cl_rows[i];
                for (c, v) in d_pos.row(i).iter().enumerate() {
                    d_hidden.row_mut(row)[c] += cfg.joint.lambda * v;
                }
                backward_plan(ctx, params, &pos_forwards[i], &d_hidden, &mut grads);
            }
        }
    }
    Ok((total, grads))
}

/// Initializes every parameter a method trains.
pub fn init_run_params(
    ctx: &TrainContext,
    cfg: &TrainConfig,
    spec: &TemplateSpec,
    train: &Dataset,
    rng: &mut ChaCha8Rng,
) -> Result<ParamStore> {
    let mut params = encoder::init_params(&ctx.encoder_cfg, rng);
    if cfg.method == Method::Finetune {
        add_classifier_head(&mut params, &ctx.encoder_cfg, ctx.num_classes(), rng);
    }
    let m = spec.num_prompt_tokens();
    if m > 0 {
        PromptBank::new(m, ctx.encoder_cfg.dim).init_vocab_sample(&mut params, &ctx.vocab, rng)?;
    }
    if cfg.method == Method::DemoTuning {
        let bank = VirtualDemoBank::new(ctx.num_classes(), ctx.task.n, ctx.encoder_cfg.dim);
        match cfg.virtual_init {
            VirtualInit::Gaussian { std } => bank.init_gaussian(&mut params, std, rng),
            VirtualInit::VocabSample => bank.init_vocab_sample(&mut params, &ctx.vocab, rng)?,
            VirtualInit::ClassMeanEmbedding => {
                let by_class = train.by_class(&ctx.labels)?;
                let means = mean_virtual_embedding(&params, &ctx.vocab, &by_class)?;
                bank.init_class_mean(&mut params, &means)?;
            }
            VirtualInit::ClassMeanEncoded => {
                let engine = ctx.engine();
                let by_class = train.by_class(&ctx.labels)?;
                let mut plans = Vec::with_capacity(by_class.len());
                for bucket in &by_class {
                    let mut class_plans = Vec::with_capacity(bucket.len());
                    for ex in bucket {
                        class_plans.push(engine.render_anchor_fit(&ctx.spec, ex)?);
                    }
                    plans.push(class_plans);
                }
                let means = mean_virtual_encoded(&ctx.encoder_cfg, &params, &plans)?;
                bank.init_class_mean(&mut params, &means)?;
            }
        }
    }
    Ok(params)
}

/// Predicted class for one example under the trained parameters.
/// `demo_tuning` classifies from the bare anchor — no demonstrations, no
/// virtual blocks.
pub fn infer_example(
    ctx: &TrainContext,
    params: &ParamStore,
    cfg: &TrainConfig,
    spec: &TemplateSpec,
    ex: &LabeledText,
    support: &Dataset,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let engine = ctx.engine();
    let probs = match cfg.method {
        Method::Finetune => {
            let plan = engine.render_anchor_fit(spec, ex)?;
            let fwd = forward_plan(ctx, params, &plan)?;
            let mut logits = head_logits(params, &fwd.cache.hidden, plan.cls_pos);
            crate::tensor::softmax_inplace(&mut logits);
            logits
        }
        Method::DemoReal => {
            let by_class = support.by_class(&ctx.labels)?;
            let sim = BagOfWordsSim::new(&ctx.vocab);
            let sim_ref: Option<&dyn crate::bank::SimilarityProvider> = match cfg.demo_sampling {
                DemoSampling::Uniform => None,
                DemoSampling::SimilarityFiltered => Some(&sim),
            };
            let mut demos = Vec::with_capacity(ctx.num_classes());
            for (class, bucket) in by_class.iter().enumerate() {
                let demo = sample_demo(
                    bucket,
                    ex,
                    &ctx.labels[class],
                    cfg.demo_sampling,
                    sim_ref,
                    rng,
                )?;
                demos.push(demo.clone());
            }
            let plan = engine.build_demo_augmented(
                spec,
                ex,
                &demos,
                &ctx.verbalizer,
                ctx.task.demo_placement,
            )?;
            let fwd = forward_plan(ctx, params, &plan)?;
            encoder::label_distribution_from_hidden(
                params,
                &fwd.cache.hidden,
                plan.mask_pos()?,
                ctx.verbalizer.word_ids(),
            )
        }
        _ => {
            // Manual and continuous prompting, and demonstration-free
            // demo-tuning inference: the bare anchor template.
            let plan = engine.render_anchor_fit(spec, ex)?;
            let fwd = forward_plan(ctx, params, &plan)?;
            encoder::label_distribution_from_hidden(
                params,
                &fwd.cache.hidden,
                plan.mask_pos()?,
                ctx.verbalizer.word_ids(),
            )
        }
    };
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub f1: Option<f64>,
    /// The task's selected metric (accuracy or binary F1).
    pub score: f64,
    pub correct: usize,
    pub total: usize,
}

pub fn accuracy(predictions: &[usize], golds: &[usize]) -> f64 {
    let correct = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    correct as f64 / golds.len().max(1) as f64
}

pub fn binary_f1(predictions: &[usize], golds: &[usize], positive: usize) -> f64 {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    for (&p, &g) in predictions.iter().zip(golds) {
        match (p == positive, g == positive) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            (false, false) => {}
        }
    }
    if tp == 0.0 {
        return 0.0;
    }
    2.0 * tp / (2.0 * tp + fp + fn_)
}

/// Scores `dataset` under the trained parameters. `eval_seed` fixes the
/// demonstration draws `demo_real` makes at inference.
pub fn evaluate(
    ctx: &TrainContext,
    params: &ParamStore,
    cfg: &TrainConfig,
    spec: &TemplateSpec,
    dataset: &Dataset,
    support: &Dataset,
    eval_seed: u64,
) -> Result<EvalOutcome> {
    if dataset.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
    let mut predictions = Vec::with_capacity(dataset.len());
    let mut golds = Vec::with_capacity(dataset.len());
    for ex in &dataset.examples {
        golds.push(ctx.verbalizer.class_of(&ex.label)?);
        predictions.push(infer_example(ctx, params, cfg, spec, ex, support, &mut rng)?);
    }
    let acc = accuracy(&predictions, &golds);
    let f1 = match ctx.task.metric {
        Metric::BinaryF1 => Some(binary_f1(&predictions, &golds, ctx.task.positive_class())),
        Metric::Accuracy => None,
    };
    let score = f1.unwrap_or(acc);
    Ok(EvalOutcome {
        accuracy: acc,
        f1,
        score,
        correct: (acc * golds.len() as f64).round() as usize,
        total: golds.len(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub train_loss: f64,
    pub dev_score: f64,
}

pub struct TrainedModel {
    pub params: ParamStore,
    pub spec: TemplateSpec,
    pub dev_score: f64,
    pub best_step: usize,
    pub history: Vec<EvalPoint>,
}

struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(len: usize) -> BatchSampler {
        BatchSampler {
            order: (0..len).collect(),
            cursor: len, // force a shuffle on first use
        }
    }

    fn next(&mut self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let take = batch_size.min(self.order.len());
        if self.cursor + take > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let batch = self.order[self.cursor..self.cursor + take].to_vec();
        self.cursor += take;
        batch
    }
}

fn derive_eval_seed(seed: u64) -> u64 {
    // Decorrelate inference-time demonstration draws from the training
    // stream without needing a second user-facing seed.
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x00e5_a175)
}

/// Trains one model on one split. All randomness (initialization, batch
/// order, demonstration draws) comes from `seed`; the returned parameters
/// are the best-on-dev snapshot, ties resolved toward the earlier step.
pub fn train_one(
    ctx: &TrainContext,
    cfg: &TrainConfig,
    train: &Dataset,
    dev: &Dataset,
    seed: u64,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ctx.effective_spec(cfg);
    let mut params = init_run_params(ctx, cfg, &spec, train, &mut rng)?;
    let mut opt = AdamW::new(&params, cfg.lr, cfg.weight_decay);
    let freeze = cfg.freeze_encoder;
    let trainable = move |name: &str| {
        !freeze
            || name.starts_with("prompt.")
            || name.starts_with("vdemo.")
            || name.starts_with("head.")
    };
    let mut sampler = BatchSampler::new(train.len());
    let eval_seed = derive_eval_seed(seed);

    let mut best_params = params.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_step = 0;
    let mut history = Vec::new();
    for step in 1..=cfg.max_steps {
        let idx = sampler.next(cfg.batch_size, &mut rng);
        let batch: Vec<&LabeledText> = idx.iter().map(|&i| &train.examples[i]).collect();
        let prepared = prepare_step(ctx, cfg, &spec, &batch, train, &mut rng)?;
        let (loss, grads) = step_loss_and_grads(ctx, &params, cfg, &prepared)?;
        if !loss.is_finite() {
            return Err(Error::DivergedLoss { step });
        }
        opt.step(&mut params, &grads, &trainable);
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let outcome = evaluate(ctx, &params, cfg, &spec, dev, train, eval_seed)?;
            history.push(EvalPoint {
                step,
                train_loss: loss,
                dev_score: outcome.score,
            });
            if outcome.score > best_score {
                best_score = outcome.score;
                best_step = step;
                best_params = params.clone();
            }
        }
    }
    Ok(TrainedModel {
        params: best_params,
        spec,
        dev_score: best_score,
        best_step,
        history,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub dev_score: f64,
    pub test_score: f64,
    pub best_step: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteResult {
    pub task_id: String,
    pub method: String,
    pub metric: Metric,
    pub k: usize,
    pub config_hash: String,
    pub runs: Vec<RunResult>,
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation.
pub fn aggregate(scores: &[f64]) -> (f64, f64) {
    if scores.is_empty() {
        return (0.0, 0.0);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / scores.len() as f64;
    (mean, var.sqrt())
}

/// Hex SHA-256 of the canonical run configuration, for pairing metric
/// files with the settings that produced them.
pub fn config_hash(
    task: &TaskConfig,
    cfg: &TrainConfig,
    shape: &ModelShape,
    k: usize,
    seeds: &[u64],
) -> String {
    #[derive(Serialize)]
    struct Canonical<'a> {
        task: &'a TaskConfig,
        cfg: &'a TrainConfig,
        shape: &'a ModelShape,
        k: usize,
        seeds: &'a [u64],
    }
    let json = serde_json::to_string(&Canonical {
        task,
        cfg,
        shape,
        k,
        seeds,
    })
    .expect("serializable");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct SuiteSpec {
    pub k: usize,
    pub seeds: Vec<u64>,
    pub parallel: bool,
}

impl Default for SuiteSpec {
    fn default() -> SuiteSpec {
        SuiteSpec {
            k: DEFAULT_K,
            seeds: DEFAULT_SEEDS.to_vec(),
            parallel: false,
        }
    }
}

fn run_one_seed(
    ctx: &TrainContext,
    cfg: &TrainConfig,
    dataset: &Dataset,
    split: &SplitManifest,
    checkpoint_dir: Option<&Path>,
) -> Result<RunResult> {
    let seed = split.seed;
    let inner = || -> Result<RunResult> {
        let (train, dev) = split.apply(dataset)?;
        let test = dataset.complement(&split.used_uids());
        if test.is_empty() {
            return Err(Error::EmptyTestSet);
        }
        let model = train_one(ctx, cfg, &train, &dev, seed)?;
        if let Some(dir) = checkpoint_dir {
            Checkpoint::new(
                cfg.method.name(),
                seed,
                ctx.encoder_cfg.clone(),
                ctx.task.clone(),
                ctx.vocab.clone(),
                model.params.clone(),
            )
            .save(&dir.join(format!("checkpoint-seed{seed}.json")))?;
        }
        let outcome = evaluate(
            ctx,
            &model.params,
            cfg,
            &model.spec,
            &test,
            &train,
            derive_eval_seed(seed),
        )?;
        Ok(RunResult {
            seed,
            dev_score: model.dev_score,
            test_score: outcome.score,
            best_step: model.best_step,
        })
    };
    inner().map_err(|e| Error::SeedRun {
        seed,
        source: Box::new(e),
    })
}

/// The full protocol: per seed, draw the K-shot splits, train, score the
/// held-out remainder, then aggregate across seeds. With `checkpoint_dir`
/// set, each seed's best-on-dev parameters are saved there.
pub fn run_suite(
    ctx: &TrainContext,
    cfg: &TrainConfig,
    shape: &ModelShape,
    dataset: &Dataset,
    suite: &SuiteSpec,
    splits: Option<&[SplitManifest]>,
    checkpoint_dir: Option<&Path>,
) -> Result<SuiteResult> {
    let manifests: Vec<SplitManifest> = match splits {
        Some(m) => m.to_vec(),
        None => crate::data::make_seed_suite(dataset, &ctx.labels, suite.k, &suite.seeds)?,
    };
    let runs: Vec<RunResult> = if suite.parallel && manifests.len() > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = manifests
                .iter()
                .map(|split| {
                    scope.spawn(move || run_one_seed(ctx, cfg, dataset, split, checkpoint_dir))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("seed thread panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        manifests
            .iter()
            .map(|split| run_one_seed(ctx, cfg, dataset, split, checkpoint_dir))
            .collect::<Result<Vec<_>>>()?
    };
    let scores: Vec<f64> = runs.iter().map(|r| r.test_score).collect();
    let (mean, std) = aggregate(&scores);
    Ok(SuiteResult {
        task_id: ctx.task.task_id.clone(),
        method: cfg.method.name().to_string(),
        metric: ctx.task.metric,
        k: suite.k,
        config_hash: config_hash(&ctx.task, cfg, shape, suite.k, &suite.seeds),
        runs,
        mean,
        std,
    })
}

/// A named set of config variants run under identical splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: String,
    pub variants: Vec<(String, SuiteResult)>,
}

#[derive(Debug, Clone)]
pub enum AblationAxis {
    /// Contrastive training with in-batch negatives vs the negative-free
    /// loss.
    NegVsNoneg,
    /// Virtual demonstration lengths.
    LengthN(Vec<usize>),
    /// Demonstration strategies: sampled real demonstrations (uniform or
    /// similarity-filtered), mean-representation virtual blocks, and
    /// contrastively trained virtual blocks.
    SamplingStrategy,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<AblationAxis> {
        match s {
            "neg_vs_noneg" | "negatives" => Ok(AblationAxis::NegVsNoneg),
            "length_n" | "length" => Ok(AblationAxis::LengthN(vec![1, 2, 3, 5])),
            "sampling_strategy" | "sampling" => Ok(AblationAxis::SamplingStrategy),
            other => Err(Error::InvalidConfig(format!(
                "unknown ablation axis {other:?} (expected neg_vs_noneg, length_n or sampling_strategy)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::NegVsNoneg => "neg_vs_noneg",
            AblationAxis::LengthN(_) => "length_n",
            AblationAxis::SamplingStrategy => "sampling_strategy",
        }
    }
}

/// Runs one ablation axis over identical splits. The base config should be
/// `demo_tuning`; each variant changes exactly one knob.
pub fn ablate(
    ctx: &TrainContext,
    base: &TrainConfig,
    shape: &ModelShape,
    dataset: &Dataset,
    suite: &SuiteSpec,
    axis: &AblationAxis,
) -> Result<AblationReport> {
    let splits = crate::data::make_seed_suite(dataset, &ctx.labels, suite.k, &suite.seeds)?;
    let mut variants = Vec::new();
    match axis {
        AblationAxis::NegVsNoneg => {
            for (name, mode) in [
                ("with_negatives", crate::contrastive::ClMode::InfoNce),
                ("without_negatives", crate::contrastive::ClMode::NegativeFree),
            ] {
                let mut cfg = base.clone();
                cfg.method = Method::DemoTuning;
                cfg.joint.mode = mode;
                let result = run_suite(ctx, &cfg, shape, dataset, suite, Some(&splits), None)?;
                variants.push((name.to_string(), result));
            }
        }
        AblationAxis::LengthN(lengths) => {
            for &n in lengths {
                let mut ctx_n = ctx.clone();
                ctx_n.task.n = n;
                ctx_n.task.allow_any_n = true;
                ctx_n.task.validate()?;
                let result = run_suite(&ctx_n, base, shape, dataset, suite, Some(&splits), None)?;
                variants.push((format!("n={n}"), result));
            }
        }
        AblationAxis::SamplingStrategy => {
            let variant_cfgs: [(&str, Box<dyn Fn(&mut TrainConfig)>); 4] = [
                ("random", Box::new(|c| {
                    c.method = Method::DemoReal;
                    c.demo_sampling = DemoSampling::Uniform;
                })),
                ("filter_based", Box::new(|c| {
                    c.method = Method::DemoReal;
                    c.demo_sampling = DemoSampling::SimilarityFiltered;
                })),
                ("mean_virtual", Box::new(|c| {
                    c.method = Method::DemoTuning;
                    c.virtual_init = VirtualInit::ClassMeanEncoded;
                    c.joint.mode = crate::contrastive::ClMode::Off;
                })),
                ("demo_tuning", Box::new(|c| {
                    c.method = Method::DemoTuning;
                })),
            ];
            for (name, tweak) in variant_cfgs {
                let mut cfg = base.clone();
                tweak(&mut cfg);
                let result = run_suite(ctx, &cfg, shape, dataset, suite, Some(&splits), None)?;
                variants.push((name.to_string(), result));
            }
        }
    }
    Ok(AblationReport {
        axis: axis.name().to_string(),
        variants,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::ClMode;
    use crate::data::synthetic_sentiment;

    fn tiny_shape() -> ModelShape {
        ModelShape {
            dim: 16,
            num_heads: 2,
            num_layers: 1,
            ff_dim: 24,
            max_len: 48,
            init_std: 0.05,
        }
    }

    fn quick_cfg(method: Method) -> TrainConfig {
        TrainConfig {
            method,
            lr: 0.005,
            batch_size: 4,
            max_steps: 6,
            eval_every: 3,
            ..TrainConfig::default()
        }
    }

    fn ctx_with(shape: &ModelShape, dataset: &Dataset) -> TrainContext {
        TrainContext::build(TaskConfig::synthetic_sentiment(), dataset, shape).unwrap()
    }

    #[test]
    fn adamw_first_step_matches_closed_form() {
        // Single scalar parameter w = 1, gradient g = 0.5: after one step
        // m = 0.1 g, v = 0.001 g^2, and the bias-corrected update is
        // lr * g / (|g| + eps) — i.e. essentially lr * sign(g).
        let mut params = ParamStore::new();
        params.insert("w", Tensor::from_vec(&[1], vec![1.0]));
        let mut grads = params.zeros_like();
        grads.get_mut("w").data[0] = 0.5;
        let mut opt = AdamW::new(&params, 0.1, 0.0);
        opt.step(&mut params, &grads, &|_| true);
        let g: f64 = 0.5;
        let expected = 1.0 - 0.1 * g / (g + 1e-8);
        assert!((params.get("w").data[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn adamw_decays_matrices_but_not_vectors() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::from_vec(&[1, 1], vec![1.0]));
        params.insert("b", Tensor::from_vec(&[1], vec![1.0]));
        let grads = params.zeros_like(); // zero gradient isolates the decay
        let mut opt = AdamW::new(&params, 0.1, 0.5);
        opt.step(&mut params, &grads, &|_| true);
        assert!((params.get("w").data[0] - (1.0 - 0.1 * 0.5)).abs() < 1e-12);
        assert_eq!(params.get("b").data[0], 1.0);
    }

    #[test]
    fn metrics_match_hand_counts() {
        let preds = [1, 1, 1, 0, 0];
        let golds = [1, 1, 0, 1, 0];
        // tp=2 fp=1 fn=1: F1 = 2*2 / (2*2 + 1 + 1) = 2/3.
        assert!((binary_f1(&preds, &golds, 1) - 2.0 / 3.0).abs() < 1e-12);
        assert!((accuracy(&preds, &golds) - 0.6).abs() < 1e-12);
        // No positive predictions and no positive golds: defined as 0.
        assert_eq!(binary_f1(&[0, 0], &[0, 0], 1), 0.0);
    }

    #[test]
    fn aggregate_matches_population_std() {
        let (mean, std) = aggregate(&[0.8, 0.9, 1.0]);
        assert!((mean - 0.9).abs() < 1e-12);
        assert!((std - (0.02f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        let shape = ModelShape {
            dim: 8,
            num_heads: 2,
            num_layers: 1,
            ff_dim: 12,
            max_len: 48,
            init_std: 0.08,
        };
        let dataset = synthetic_sentiment(6, 3);
        let mut ctx = ctx_with(&shape, &dataset);
        // Exercise prompts and virtual blocks together.
        ctx.task.template = "[CLS] [PROMPT:2] {x1} , It was [MASK] . [SEP]".into();
        ctx.spec = TemplateSpec::parse(&ctx.task.template).unwrap();

        for mode in [ClMode::NegativeFree, ClMode::InfoNce] {
            let mut cfg = quick_cfg(Method::DemoTuning);
            cfg.joint.mode = mode;
            cfg.joint.lambda = 0.7;
            cfg.joint.tau = 0.3;
            let spec = ctx.effective_spec(&cfg);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let params = init_run_params(&ctx, &cfg, &spec, &dataset, &mut rng).unwrap();
            let batch: Vec<&LabeledText> = dataset.examples.iter().take(3).collect();
            let prepared = prepare_step(&ctx, &cfg, &spec, &batch, &dataset, &mut rng).unwrap();

            let (_, grads) = step_loss_and_grads(&ctx, &params, &cfg, &prepared).unwrap();
            let h = 1e-5;
            for name in ["vdemo.0", "vdemo.1", "prompt.emb", "mlm.w", "tok_emb", "l0.wq", "ln_f.g"] {
                let numel = params.get(name).numel();
                for idx in [0, numel / 3, numel - 1] {
                    let mut plus = params.clone();
                    plus.get_mut(name).data[idx] += h;
                    let mut minus = params.clone();
                    minus.get_mut(name).data[idx] -= h;
                    let lp = step_loss_and_grads(&ctx, &plus, &cfg, &prepared).unwrap().0;
                    let lm = step_loss_and_grads(&ctx, &minus, &cfg, &prepared).unwrap().0;
                    let fd = (lp - lm) / (2.0 * h);
                    let an = grads.get(name).data[idx];
                    let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                    assert!(
                        rel < 1e-4 || (an.abs() < 1e-8 && fd.abs() < 1e-8),
                        "{mode:?} {name}[{idx}]: analytic {an:.4e} vs fd {fd:.4e}"
                    );
                }
            }
        }
    }

    #[test]
    fn lambda_zero_is_bitwise_identical_to_ce_only() {
        let shape = tiny_shape();
        let dataset = synthetic_sentiment(10, 5);
        let ctx = ctx_with(&shape, &dataset);
        let (train, dev) = dataset.sample_kshot(&ctx.labels, 4, 42).unwrap();

        let mut off = quick_cfg(Method::DemoTuning);
        off.joint.mode = ClMode::Off;
        let mut zero = quick_cfg(Method::DemoTuning);
        zero.joint.mode = ClMode::NegativeFree;
        zero.joint.lambda = 0.0;

        let a = train_one(&ctx, &off, &train, &dev, 13).unwrap();
        let b = train_one(&ctx, &zero, &train, &dev, 13).unwrap();
        for (name, t) in a.params.iter() {
            assert_eq!(t.data, b.params.get(name).data, "{name} diverged");
        }
    }

    #[test]
    fn training_is_seed_deterministic() {
        let shape = tiny_shape();
        let dataset = synthetic_sentiment(10, 5);
        let ctx = ctx_with(&shape, &dataset);
        let (train, dev) = dataset.sample_kshot(&ctx.labels, 4, 21).unwrap();
        let cfg = quick_cfg(Method::DemoTuning);
        let a = train_one(&ctx, &cfg, &train, &dev, 87).unwrap();
        let b = train_one(&ctx, &cfg, &train, &dev, 87).unwrap();
        for (name, t) in a.params.iter() {
            assert_eq!(t.data, b.params.get(name).data, "{name} diverged");
        }
        assert_eq!(a.dev_score, b.dev_score);
        let c = train_one(&ctx, &cfg, &train, &dev, 100).unwrap();
        let differs = a
            .params
            .iter()
            .any(|(name, t)| t.data != c.params.get(name).data);
        assert!(differs, "different seeds should differ somewhere");
    }

    #[test]
    fn every_method_trains_and_infers() {
        let shape = tiny_shape();
        let dataset = synthetic_sentiment(10, 5);
        let ctx = ctx_with(&shape, &dataset);
        let (train, dev) = dataset.sample_kshot(&ctx.labels, 4, 42).unwrap();
        for method in [
            Method::Finetune,
            Method::PromptManual,
            Method::PromptContinuous,
            Method::DemoReal,
            Method::DemoTuning,
        ] {
            let cfg = quick_cfg(method);
            let model = train_one(&ctx, &cfg, &train, &dev, 42)
                .unwrap_or_else(|e| panic!("{} failed: {e}", method.name()));
            assert!(model.params.is_finite(), "{}", method.name());
            assert!(!model.history.is_empty());
            let outcome = evaluate(
                &ctx,
                &model.params,
                &cfg,
                &model.spec,
                &dev,
                &train,
                derive_eval_seed(42),
            )
            .unwrap();
            assert!((0.0..=1.0).contains(&outcome.score), "{}", method.name());
        }
    }

    #[test]
    fn continuous_prompts_are_added_and_trained() {
        let shape = tiny_shape();
        let dataset = synthetic_sentiment(10, 5);
        let ctx = ctx_with(&shape, &dataset);
        let cfg = quick_cfg(Method::PromptContinuous);
        let spec = ctx.effective_spec(&cfg);
        assert_eq!(spec.num_prompt_tokens(), cfg.prompt_len);
        let (train, dev) = dataset.sample_kshot(&ctx.labels, 4, 42).unwrap();
        let model = train_one(&ctx, &cfg, &train, &dev, 7).unwrap();
        assert!(model.params.contains("prompt.emb"));
    }

    #[test]
    fn suite_aggregates_across_seeds() {
        let shape = tiny_shape();
        let dataset = synthetic_sentiment(14, 5);
        let ctx = ctx_with(&shape, &dataset);
        let cfg = quick_cfg(Method::PromptManual);
        let suite = SuiteSpec {
            k: 4,
            seeds: vec![13, 21],
            parallel: false,
        };
        let result = run_suite(&ctx, &cfg, &tiny_shape(), &dataset, &suite, None, None).unwrap();
        assert_eq!(result.runs.len(), 2);
        assert_eq!(result.runs[0].seed, 13);
        assert_eq!(result.runs[1].seed, 21);
        let (mean, _) = aggregate(&[result.runs[0].test_score, result.runs[1].test_score]);
        assert!((result.mean - mean).abs() < 1e-12);
        assert_eq!(result.config_hash.len(), 64);

        // Same settings, parallel: identical results.
        let par = SuiteSpec {
            parallel: true,
            ..suite
        };
        let result_par = run_suite(&ctx, &cfg, &tiny_shape(), &dataset, &par, None, None).unwrap();
        for (a, b) in result.runs.iter().zip(&result_par.runs) {
            assert_eq!(a.test_score, b.test_score);
            assert_eq!(a.dev_score, b.dev_score);
        }
    }

    #[test]
    fn config_hash_tracks_settings() {
        let task = TaskConfig::synthetic_sentiment();
        let cfg = TrainConfig::default();
        let shape = ModelShape::default();
        let a = config_hash(&task, &cfg, &shape, 16, &[13, 21]);
        let b = config_hash(&task, &cfg, &shape, 16, &[13, 21]);
        assert_eq!(a, b);
        let mut cfg2 = cfg.clone();
        cfg2.lr = 2e-5;
        assert_ne!(a, config_hash(&task, &cfg2, &shape, 16, &[13, 21]));
    }

    #[test]
    fn seed_failures_are_attributed() {
        let shape = tiny_shape();
        // 5 per class cannot cover k=4 train + 4 dev.
        let dataset = synthetic_sentiment(5, 5);
        let ctx = ctx_with(&shape, &dataset);
        let cfg = quick_cfg(Method::PromptManual);
        let suite = SuiteSpec {
            k: 4,
            seeds: vec![13],
            parallel: false,
        };
        let err = run_suite(&ctx, &cfg, &shape, &dataset, &suite, None, None).unwrap_err();
        assert!(matches!(err, Error::InsufficientExamples { .. }));

        // With splits that reference missing uids, the failure carries the
        // seed.
        let bogus = SplitManifest {
            seed: 21,
            k: 1,
            train_uids: vec!["nope".into()],
            dev_uids: vec![],
        };
        let err = run_suite(&ctx, &cfg, &shape, &dataset, &suite, Some(&[bogus]), None).unwrap_err();
        match err {
            Error::SeedRun { seed, .. } => assert_eq!(seed, 21),
            other => panic!("expected SeedRun, got {other}"),
        }
    }

    #[test]
    fn ablation_reports_every_variant() {
        let shape = tiny_shape();
        let dataset = synthetic_sentiment(10, 5);
        let ctx = ctx_with(&shape, &dataset);
        let mut cfg = quick_cfg(Method::DemoTuning);
        cfg.max_steps = 2;
        cfg.eval_every = 2;
        let suite = SuiteSpec {
            k: 3,
            seeds: vec![42],
            parallel: false,
        };
        let report = ablate(
            &ctx,
            &cfg,
            &shape,
            &dataset,
            &suite,
            &AblationAxis::NegVsNoneg,
        )
        .unwrap();
        assert_eq!(report.axis, "neg_vs_noneg");
        let names: Vec<&str> = report.variants.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, vec!["with_negatives", "without_negatives"]);

        let report = ablate(
            &ctx,
            &cfg,
            &shape,
            &dataset,
            &suite,
            &AblationAxis::LengthN(vec![1, 2]),
        )
        .unwrap();
        assert_eq!(report.variants.len(), 2);
        assert_eq!(report.variants[0].0, "n=1");

        let report = ablate(
            &ctx,
            &cfg,
            &shape,
            &dataset,
            &suite,
            &AblationAxis::SamplingStrategy,
        )
        .unwrap();
        let names: Vec<&str> = report.variants.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            vec!["random", "filter_based", "mean_virtual", "demo_tuning"]
        );
    }
}
