//! Trainable embedding banks (virtual demonstrations, continuous prompts)
//! and demonstration-sampling strategies.
//!
//! Bank rows live in the shared parameter store — `vdemo.{class}` is an
//! `n x d` block per class, `prompt.emb` is `m x d` — so the optimizer,
//! checkpoints and gradient checks treat them like any other tensor. At
//! sequence-build time the rows are injected at the positions a
//! [`TokenPlan`] reserved for them.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::data::LabeledText;
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::template::TokenPlan;
use crate::tensor::{add_assign, dot, norm, ParamStore, Tensor};
use crate::vocab::Vocab;

pub const PROMPT_EMB: &str = "prompt.emb";

pub fn vdemo_name(class: usize) -> String {
    format!("vdemo.{class}")
}

/// Per-class blocks of `n` trainable demonstration embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VirtualDemoBank {
    pub num_classes: usize,
    pub n: usize,
    pub dim: usize,
}

impl VirtualDemoBank {
    pub fn new(num_classes: usize, n: usize, dim: usize) -> VirtualDemoBank {
        VirtualDemoBank { num_classes, n, dim }
    }

    pub fn init_gaussian<R: Rng>(&self, params: &mut ParamStore, std: f64, rng: &mut R) {
        for class in 0..self.num_classes {
            params.insert(vdemo_name(class), Tensor::randn(&[self.n, self.dim], std, rng));
        }
    }

    /// Each block row starts as a copy of a random content-word embedding,
    /// so virtual demonstrations begin on the token-embedding manifold.
    pub fn init_vocab_sample<R: Rng>(
        &self,
        params: &mut ParamStore,
        vocab: &Vocab,
        rng: &mut R,
    ) -> Result<()> {
        let content = vocab.content_ids();
        if content.is_empty() {
            return Err(Error::InvalidConfig(
                "vocabulary has no content tokens to sample".into(),
            ));
        }
        for class in 0..self.num_classes {
            let mut block = Tensor::zeros(&[self.n, self.dim]);
            for r in 0..self.n {
                let id = *content.choose(rng).expect("non-empty") as usize;
                let row = params.get("tok_emb").row(id).to_vec();
                block.row_mut(r).copy_from_slice(&row);
            }
            params.insert(vdemo_name(class), block);
        }
        Ok(())
    }

    /// Every row of class `c`'s block becomes `means[c]`.
    pub fn init_class_mean(&self, params: &mut ParamStore, means: &[Vec<f64>]) -> Result<()> {
        if means.len() != self.num_classes {
            return Err(Error::InvalidConfig(format!(
                "got {} class means for {} classes",
                means.len(),
                self.num_classes
            )));
        }
        for (class, mean) in means.iter().enumerate() {
            if mean.len() != self.dim {
                return Err(Error::InvalidConfig(format!(
                    "class {class} mean has dim {}, expected {}",
                    mean.len(),
                    self.dim
                )));
            }
            let mut block = Tensor::zeros(&[self.n, self.dim]);
            for r in 0..self.n {
                block.row_mut(r).copy_from_slice(mean);
            }
            params.insert(vdemo_name(class), block);
        }
        Ok(())
    }
}

/// The `m` trainable continuous-prompt embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptBank {
    pub m: usize,
    pub dim: usize,
}

impl PromptBank {
    pub fn new(m: usize, dim: usize) -> PromptBank {
        PromptBank { m, dim }
    }

    pub fn init_gaussian<R: Rng>(&self, params: &mut ParamStore, std: f64, rng: &mut R) {
        params.insert(PROMPT_EMB, Tensor::randn(&[self.m, self.dim], std, rng));
    }

    pub fn init_vocab_sample<R: Rng>(
        &self,
        params: &mut ParamStore,
        vocab: &Vocab,
        rng: &mut R,
    ) -> Result<()> {
        let content = vocab.content_ids();
        if content.is_empty() {
            return Err(Error::InvalidConfig(
                "vocabulary has no content tokens to sample".into(),
            ));
        }
        let mut emb = Tensor::zeros(&[self.m, self.dim]);
        for r in 0..self.m {
            let id = *content.choose(rng).expect("non-empty") as usize;
            let row = params.get("tok_emb").row(id).to_vec();
            emb.row_mut(r).copy_from_slice(&row);
        }
        params.insert(PROMPT_EMB, emb);
        Ok(())
    }
}

/// How virtual demonstration blocks are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VirtualInit {
    Gaussian { std: f64 },
    VocabSample,
    /// Rows start at the mean token embedding of the class's examples.
    ClassMeanEmbedding,
    /// Rows start at the mean encoded `[CLS]` state of the class's examples.
    ClassMeanEncoded,
}

impl Default for VirtualInit {
    fn default() -> VirtualInit {
        VirtualInit::VocabSample
    }
}

/// Mean token embedding of each class's examples (specials excluded).
pub fn mean_virtual_embedding(
    params: &ParamStore,
    vocab: &Vocab,
    examples_by_class: &[Vec<&LabeledText>],
) -> Result<Vec<Vec<f64>>> {
    let tok_emb = params.get("tok_emb");
    let dim = tok_emb.cols();
    let mut means = Vec::with_capacity(examples_by_class.len());
    for (class, examples) in examples_by_class.iter().enumerate() {
        let mut sum = vec![0.0; dim];
        let mut count = 0usize;
        for ex in examples {
            for id in vocab.tokenize(&ex.text) {
                if Vocab::is_special(id) {
                    continue;
                }
                add_assign(&mut sum, tok_emb.row(id as usize));
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyClass(format!("class {class}")));
        }
        for v in sum.iter_mut() {
            *v /= count as f64;
        }
        means.push(sum);
    }
    Ok(means)
}

/// Mean final `[CLS]` hidden state per class over pre-rendered plans.
pub fn mean_virtual_encoded(
    cfg: &EncoderConfig,
    params: &ParamStore,
    plans_by_class: &[Vec<TokenPlan>],
) -> Result<Vec<Vec<f64>>> {
    let mut means = Vec::with_capacity(plans_by_class.len());
    for (class, plans) in plans_by_class.iter().enumerate() {
        if plans.is_empty() {
            return Err(Error::EmptyClass(format!("class {class}")));
        }
        let mut sum = vec![0.0; cfg.dim];
        for plan in plans {
            let cache = encoder::forward(cfg, params, &plan.token_ids, &[])?;
            add_assign(&mut sum, cache.hidden.row(plan.cls_pos));
        }
        for v in sum.iter_mut() {
            *v /= plans.len() as f64;
        }
        means.push(sum);
    }
    Ok(means)
}

/// Where an injected row came from, for gradient routing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectionTarget {
    Prompt { row: usize },
    Virtual { class: usize, row: usize },
}

/// Collects the embedding rows a plan needs injected: continuous prompts
/// first, then each class's virtual block rows. The parallel target list
/// routes gradients back in [`accumulate_injection_grads`].
pub fn build_injections(
    params: &ParamStore,
    plan: &TokenPlan,
) -> (Vec<(usize, Vec<f64>)>, Vec<InjectionTarget>) {
    let mut injections = Vec::new();
    let mut targets = Vec::new();
    if !plan.prompt_positions.is_empty() {
        let emb = params.get(PROMPT_EMB);
        for &(row, pos) in &plan.prompt_positions {
            injections.push((pos, emb.row(row).to_vec()));
            targets.push(InjectionTarget::Prompt { row });
        }
    }
    for (class, positions) in plan.virtual_positions.iter().enumerate() {
        if positions.is_empty() {
            continue;
        }
        let block = params.get(&vdemo_name(class));
        debug_assert_eq!(positions.len(), block.rows());
        for (row, &pos) in positions.iter().enumerate() {
            injections.push((pos, block.row(row).to_vec()));
            targets.push(InjectionTarget::Virtual { class, row });
        }
    }
    (injections, targets)
}

/// Adds the encoder's per-injection gradients into the bank tensors.
pub fn accumulate_injection_grads(
    grads: &mut ParamStore,
    targets: &[InjectionTarget],
    d_injections: &[(usize, Vec<f64>)],
) {
    debug_assert_eq!(targets.len(), d_injections.len());
    for (target, (_, d_vec)) in targets.iter().zip(d_injections) {
        match target {
            InjectionTarget::Prompt { row } => {
                add_assign(grads.get_mut(PROMPT_EMB).row_mut(*row), d_vec);
            }
            InjectionTarget::Virtual { class, row } => {
                add_assign(grads.get_mut(&vdemo_name(*class)).row_mut(*row), d_vec);
            }
        }
    }
}

/// How the real demonstration for a training step is drawn from the
/// support set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoSampling {
    #[default]
    Uniform,
    /// Sample uniformly from the half of the candidates most similar to
    /// the anchor.
    SimilarityFiltered,
}

pub trait SimilarityProvider {
    fn similarity(&self, a: &LabeledText, b: &LabeledText) -> f64;
}

/// Cosine over term-frequency vectors.
pub struct BagOfWordsSim<'a> {
    vocab: &'a Vocab,
}

impl<'a> BagOfWordsSim<'a> {
    pub fn new(vocab: &'a Vocab) -> BagOfWordsSim<'a> {
        BagOfWordsSim { vocab }
    }

    fn counts(&self, ex: &LabeledText) -> HashMap<u32, f64> {
        let mut counts: HashMap<u32, f64> = HashMap::new();
        for id in self.vocab.tokenize(&ex.text) {
            *counts.entry(id).or_default() += 1.0;
        }
        counts
    }
}

impl SimilarityProvider for BagOfWordsSim<'_> {
    fn similarity(&self, a: &LabeledText, b: &LabeledText) -> f64 {
        let ca = self.counts(a);
        let cb = self.counts(b);
        let dot: f64 = ca
            .iter()
            .filter_map(|(id, va)| cb.get(id).map(|vb| va * vb))
            .sum();
        let na: f64 = ca.values().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = cb.values().map(|v| v * v).sum::<f64>().sqrt();
        if na < 1e-12 || nb < 1e-12 {
            return 0.0;
        }
        dot / (na * nb)
    }
}

/// Cosine over mean token embeddings.
pub struct EmbeddingMeanSim<'a> {
    vocab: &'a Vocab,
    params: &'a ParamStore,
}

impl<'a> EmbeddingMeanSim<'a> {
    pub fn new(vocab: &'a Vocab, params: &'a ParamStore) -> EmbeddingMeanSim<'a> {
        EmbeddingMeanSim { vocab, params }
    }

    fn mean_embedding(&self, ex: &LabeledText) -> Vec<f64> {
        let tok_emb = self.params.get("tok_emb");
        let mut sum = vec![0.0; tok_emb.cols()];
        let mut count = 0usize;
        for id in self.vocab.tokenize(&ex.text) {
            if Vocab::is_special(id) {
                continue;
            }
            add_assign(&mut sum, tok_emb.row(id as usize));
            count += 1;
        }
        if count > 0 {
            for v in sum.iter_mut() {
                *v /= count as f64;
            }
        }
        sum
    }
}

impl SimilarityProvider for EmbeddingMeanSim<'_> {
    fn similarity(&self, a: &LabeledText, b: &LabeledText) -> f64 {
        let ma = self.mean_embedding(a);
        let mb = self.mean_embedding(b);
        let (na, nb) = (norm(&ma), norm(&mb));
        if na < 1e-12 || nb < 1e-12 {
            return 0.0;
        }
        dot(&ma, &mb) / (na * nb)
    }
}

/// Draws one demonstration for `anchor` from `candidates` (one class's
/// support examples). The anchor itself is excluded unless it is the only
/// candidate.
pub fn sample_demo<'a, R: Rng>(
    candidates: &[&'a LabeledText],
    anchor: &LabeledText,
    label: &str,
    strategy: DemoSampling,
    sim: Option<&dyn SimilarityProvider>,
    rng: &mut R,
) -> Result<&'a LabeledText> {
    if candidates.is_empty() {
        return Err(Error::EmptyClass(label.to_string()));
    }
    let mut pool: Vec<&LabeledText> = candidates
        .iter()
        .copied()
        .filter(|c| c.uid != anchor.uid)
        .collect();
    if pool.is_empty() {
        pool = candidates.to_vec();
    }
    match strategy {
        DemoSampling::Uniform => Ok(pool[rng.gen_range(0..pool.len())]),
        DemoSampling::SimilarityFiltered => {
            let sim = sim.ok_or_else(|| {
                Error::InvalidConfig(
                    "similarity_filtered sampling needs a similarity provider".into(),
                )
            })?;
            let mut scored: Vec<(f64, &LabeledText)> = pool
                .iter()
                .map(|c| (sim.similarity(anchor, c), *c))
                .collect();
            // Ties break on uid so the ordering is deterministic.
            scored.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| a.1.uid.cmp(&b.1.uid))
            });
            let keep = scored.len().div_ceil(2);
            Ok(scored[rng.gen_range(0..keep)].1)
        }
    }
}
