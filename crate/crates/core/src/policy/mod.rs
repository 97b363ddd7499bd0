//! Log-linear autoregressive policy over response tokens.
//!
//! The next-token logits are a sum of weight rows selected by three feature
//! groups: the previous response token (or `<bos>`), a position bucket
//! (`0..=9`, then `10+`), and the prompt's bag of words hashed into
//! `hash_buckets` buckets. Output columns are the response tokens only.
//! Because the log-likelihood is concave in the weights, gradients are exact
//! and cheap, and supervised training is a convex problem.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Registry;
use crate::schema::tokens::{tokenize_prompt, TokenError};
use crate::schema::{InstructionApiPair, T2IApi, Token, TokenSequence, Vocab, VocabSpec};
use crate::util::rng;

pub mod decode;

pub use decode::{
    decoders, diverse_beam_search, greedy, sample_multinomial, Decoder, DiverseBeamOptions, GreedyOptions,
    MultinomialOptions,
};

pub const CHECKPOINT_FORMAT: &str = "t2i-policy/1";
pub const DEFAULT_HASH_BUCKETS: usize = 512;
/// Positions `0..=9` get their own bucket, the rest share one.
pub const POSITION_BUCKETS: usize = 11;
pub const DEFAULT_MAX_LEN: usize = 24;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("token {0} is outside the vocabulary or output space")]
    UnknownToken(u32),
    #[error("empty response")]
    EmptyResponse,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    DivergenceDetected { epoch: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

/// Row layout of the weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    /// Output columns; also the number of previous-token rows besides `<bos>`.
    pub outputs: usize,
    pub hash_buckets: usize,
}

impl Layout {
    pub fn rows(&self) -> usize {
        self.outputs + 1 + POSITION_BUCKETS + self.hash_buckets
    }

    pub fn len(&self) -> usize {
        self.rows() * self.outputs
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn prev_row(&self, prev: Option<Token>) -> usize {
        prev.map_or(self.outputs, Token::index)
    }

    pub fn position_row(&self, pos: usize) -> usize {
        self.outputs + 1 + pos.min(POSITION_BUCKETS - 1)
    }

    pub fn bucket_row(&self, bucket: usize) -> usize {
        self.outputs + 1 + POSITION_BUCKETS + bucket
    }
}

/// Dense weights, row-major `(feature, output token)`. Also used for gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub layout: Layout,
    pub weights: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(layout: Layout) -> Self {
        PolicyParams { layout, weights: vec![0.0; layout.len()] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let n = self.layout.outputs;
        &self.weights[r * n..(r + 1) * n]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let n = self.layout.outputs;
        &mut self.weights[r * n..(r + 1) * n]
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &PolicyParams) {
        for (w, g) in self.weights.iter_mut().zip(&other.weights) {
            *w += alpha * g;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }
}

/// Vocabulary plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub vocab: Vocab,
    pub params: PolicyParams,
}

/// A prompt reduced to its active hash buckets (sorted, unique).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptFeatures(Vec<usize>);

impl PromptFeatures {
    pub fn buckets(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_tokens: TokenSequence,
    pub response_tokens: TokenSequence,
    pub token_logprobs: Vec<f64>,
}

/// One tokenized training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub prompt: TokenSequence,
    pub response: TokenSequence,
}

/// Builds a vocabulary from the registry's models and the training prompts.
pub fn build_vocab(registry: &Registry, pairs: &[InstructionApiPair]) -> Result<Vocab> {
    let words = pairs.iter().flat_map(|p| tokenize_prompt(&p.instruction.prompt));
    Ok(Vocab::new(registry.model_ids().map(str::to_string), registry.samplers(), words)?)
}

/// Tokenizes a pair; parameters are snapped onto the token bins first.
pub fn encode_pair(vocab: &Vocab, pair: &InstructionApiPair) -> Result<Example> {
    Ok(Example { prompt: vocab.encode_prompt(&pair.instruction.prompt), response: render_snapped(vocab, &pair.api)? })
}

/// Canonical tokens of `api` after snapping its parameters.
pub fn render_snapped(vocab: &Vocab, api: &T2IApi) -> Result<TokenSequence> {
    let snapped = T2IApi { info: api.info.clone(), params: vocab.snap_params(&api.params) };
    Ok(vocab.render_response_tokens(&snapped)?)
}

fn log_softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter_mut().for_each(|v| *v -= lse);
}

impl Policy {
    pub fn new(vocab: Vocab, hash_buckets: usize) -> Self {
        let layout = Layout { outputs: vocab.response_len(), hash_buckets };
        Policy { vocab, params: PolicyParams::zeros(layout) }
    }

    pub fn layout(&self) -> Layout {
        self.params.layout
    }

    pub fn prompt_features(&self, prompt: &[Token]) -> Result<PromptFeatures> {
        let unk = self.vocab.unk();
        let mut b = Vec::with_capacity(prompt.len());
        for &t in prompt {
            if t.index() >= self.vocab.len() {
                return Err(PolicyError::UnknownToken(t.0));
            }
            if t != unk {
                b.push((self.vocab.word_hash(t) % self.layout().hash_buckets as u64) as usize);
            }
        }
        b.sort_unstable();
        b.dedup();
        Ok(PromptFeatures(b))
    }

    fn check_response(&self, r: &[Token]) -> Result<()> {
        match r.iter().find(|t| !self.vocab.is_response_token(**t)) {
            Some(t) => Err(PolicyError::UnknownToken(t.0)),
            None => Ok(()),
        }
    }

    /// Feature rows active when predicting position `pos` after `prev`.
    fn active_rows(&self, f: &PromptFeatures, prev: Option<Token>, pos: usize) -> Vec<usize> {
        let l = self.layout();
        let mut rows = Vec::with_capacity(2 + f.0.len());
        rows.push(l.prev_row(prev));
        rows.push(l.position_row(pos));
        rows.extend(f.0.iter().map(|&b| l.bucket_row(b)));
        rows
    }

    pub fn logits(&self, f: &PromptFeatures, prev: Option<Token>, pos: usize) -> Vec<f64> {
        let mut z = vec![0.0; self.layout().outputs];
        for r in self.active_rows(f, prev, pos) {
            for (zi, w) in z.iter_mut().zip(self.params.row(r)) {
                *zi += w;
            }
        }
        z
    }

    /// Log-probabilities over the output space for the next token.
    pub fn next_logprobs(&self, f: &PromptFeatures, prev: Option<Token>, pos: usize) -> Vec<f64> {
        let mut z = self.logits(f, prev, pos);
        log_softmax_in_place(&mut z);
        z
    }

    /// `log P(r | t)` as a sum over positions, with the per-token terms.
    pub fn conditional_logprob(&self, prompt: &[Token], response: &[Token]) -> Result<(f64, Vec<f64>)> {
        let f = self.prompt_features(prompt)?;
        self.check_response(response)?;
        Ok(self.logprob_with(&f, response))
    }

    fn logprob_with(&self, f: &PromptFeatures, response: &[Token]) -> (f64, Vec<f64>) {
        let mut prev = None;
        let per_token: Vec<f64> = response
            .iter()
            .enumerate()
            .map(|(pos, &tok)| {
                let lp = self.next_logprobs(f, prev, pos)[tok.index()];
                prev = Some(tok);
                lp
            })
            .collect();
        (per_token.iter().sum(), per_token)
    }

    /// Mean per-token log-probability.
    pub fn length_normalized_logprob(&self, prompt: &[Token], response: &[Token]) -> Result<f64> {
        if response.is_empty() {
            return Err(PolicyError::EmptyResponse);
        }
        Ok(self.conditional_logprob(prompt, response)?.0 / response.len() as f64)
    }

    pub fn trajectory(&self, prompt: &[Token], response: &[Token]) -> Result<Trajectory> {
        let (_, token_logprobs) = self.conditional_logprob(prompt, response)?;
        Ok(Trajectory { prompt_tokens: prompt.to_vec(), response_tokens: response.to_vec(), token_logprobs })
    }

    /// Adds `scale * d log P(r | t) / d weights` into `grad`; returns `log P`.
    pub fn accumulate_logprob_grad(
        &self,
        f: &PromptFeatures,
        response: &[Token],
        scale: f64,
        grad: &mut PolicyParams,
    ) -> Result<f64> {
        self.check_response(response)?;
        let mut total = 0.0;
        let mut prev = None;
        for (pos, &tok) in response.iter().enumerate() {
            let lp = self.next_logprobs(f, prev, pos);
            total += lp[tok.index()];
            // d log p_y / d z = onehot(y) - softmax(z)
            let mut d: Vec<f64> = lp.iter().map(|v| -scale * v.exp()).collect();
            d[tok.index()] += scale;
            for r in self.active_rows(f, prev, pos) {
                for (g, di) in grad.row_mut(r).iter_mut().zip(&d) {
                    *g += di;
                }
            }
            prev = Some(tok);
        }
        Ok(total)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            vocab: self.vocab.spec().clone(),
            hash_buckets: self.layout().hash_buckets,
            weights: self.params.weights.clone(),
        };
        let text = serde_json::to_string(&ckpt).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |m: String| PolicyError::Checkpoint(m);
        let ckpt: Checkpoint =
            serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| bad(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("unsupported format `{}`", ckpt.format)));
        }
        let vocab = Vocab::from_spec(ckpt.vocab)?;
        let mut policy = Policy::new(vocab, ckpt.hash_buckets);
        if ckpt.weights.len() != policy.layout().len() {
            return Err(bad(format!("{} weights, vocabulary needs {}", ckpt.weights.len(), policy.layout().len())));
        }
        policy.params.weights = ckpt.weights;
        if !policy.params.is_finite() {
            return Err(bad("non-finite weight".into()));
        }
        Ok(policy)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    vocab: VocabSpec,
    hash_buckets: usize,
    weights: Vec<f64>,
}

/// Mean negative log-likelihood of `batch` and its exact gradient.
pub fn sft_loss_and_grad(policy: &Policy, batch: &[Example]) -> Result<(f64, PolicyParams)> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let mut grad = PolicyParams::zeros(policy.layout());
    let scale = -1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for ex in batch {
        let f = policy.prompt_features(&ex.prompt)?;
        loss += scale * policy.accumulate_logprob_grad(&f, &ex.response, scale, &mut grad)?;
    }
    Ok((loss, grad))
}

/// Mean negative log-likelihood only.
pub fn sft_loss(policy: &Policy, batch: &[Example]) -> Result<f64> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let mut total = 0.0;
    for ex in batch {
        total += policy.conditional_logprob(&ex.prompt, &ex.response)?.0;
    }
    Ok(-total / batch.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Minibatch size; at least the dataset size means full-batch descent.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig { epochs: 40, lr: 1.0, batch_size: 16, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Full-dataset loss after the epoch.
    pub loss: f64,
}

/// Minibatch gradient descent with a seeded shuffle per epoch.
pub fn train_sft(policy: &Policy, data: &[Example], cfg: &SftConfig) -> Result<(Policy, Vec<EpochLoss>)> {
    if data.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let mut p = policy.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut r = rng(cfg.seed);
    let batch = cfg.batch_size.max(1);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(batch) {
            let mb: Vec<Example> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (_, g) = sft_loss_and_grad(&p, &mb)?;
            p.params.axpy(-cfg.lr, &g);
        }
        let loss = sft_loss(&p, data)?;
        if !loss.is_finite() || !p.params.is_finite() {
            return Err(PolicyError::DivergenceDetected { epoch, loss });
        }
        log::info!("sft epoch {epoch}: loss {loss:.6}");
        log.push(EpochLoss { epoch, loss });
    }
    Ok((p, log))
}
