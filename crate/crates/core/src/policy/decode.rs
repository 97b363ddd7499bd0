//! Decoding: greedy, temperature multinomial sampling, and diverse beam
//! search with one beam per group.
//!
//! Every decoder emits response tokens until `<eos>` (kept in the output) or
//! `max_len`. Nothing constrains the output to the response grammar; the
//! parser decides validity.

use rand::Rng;
use serde::Deserialize;

use super::{Policy, PromptFeatures, Result, DEFAULT_MAX_LEN};
use crate::schema::{Token, TokenSequence};
use crate::strategy::{options, StrategyError, StrategyTable};
use crate::util::{derive_seed, rng};

/// Index of the largest value; ties go to the lowest index.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn decode_with<F>(policy: &Policy, f: &PromptFeatures, max_len: usize, mut pick: F) -> TokenSequence
where
    F: FnMut(usize, Vec<f64>) -> usize,
{
    let eos = policy.vocab.eos();
    let mut out = Vec::new();
    let mut prev = None;
    for pos in 0..max_len {
        let tok = Token(pick(pos, policy.next_logprobs(f, prev, pos)) as u32);
        out.push(tok);
        if tok == eos {
            break;
        }
        prev = Some(tok);
    }
    out
}

pub fn greedy(policy: &Policy, prompt: &[Token], max_len: usize) -> Result<TokenSequence> {
    let f = policy.prompt_features(prompt)?;
    Ok(decode_with(policy, &f, max_len, |_, lp| argmax(&lp)))
}

/// Ancestral sampling from `softmax(logits / temperature)`.
pub fn sample_multinomial(
    policy: &Policy,
    prompt: &[Token],
    temperature: f64,
    seed: u64,
    max_len: usize,
) -> Result<TokenSequence> {
    assert!(temperature > 0.0, "temperature must be positive");
    let f = policy.prompt_features(prompt)?;
    let mut r = rng(seed);
    Ok(decode_with(policy, &f, max_len, |_, lp| {
        let scaled: Vec<f64> = lp.iter().map(|v| v / temperature).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = r.gen::<f64>() * total;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        argmax(&weights)
    }))
}

/// `groups` greedy decodes run one after another. At each step a group's
/// log-probabilities are lowered by `lambda` times the number of earlier
/// groups that chose the same token at that step.
pub fn diverse_beam_search(
    policy: &Policy,
    prompt: &[Token],
    groups: usize,
    lambda: f64,
    max_len: usize,
) -> Result<Vec<TokenSequence>> {
    let f = policy.prompt_features(prompt)?;
    let n = policy.layout().outputs;
    let mut chosen = vec![vec![0u32; n]; max_len];
    let mut out = Vec::with_capacity(groups);
    for _ in 0..groups {
        let seq = decode_with(policy, &f, max_len, |pos, mut lp| {
            for (v, c) in lp.iter_mut().zip(&chosen[pos]) {
                *v -= lambda * *c as f64;
            }
            argmax(&lp)
        });
        for (pos, t) in seq.iter().enumerate() {
            chosen[pos][t.index()] += 1;
        }
        out.push(seq);
    }
    Ok(out)
}

/// A decoding strategy selectable by name.
pub trait Decoder: Send + Sync {
    fn name(&self) -> &str;
    /// Candidate sequences for `prompt`; `seed` matters only to stochastic decoders.
    fn decode(&self, policy: &Policy, prompt: &[Token], seed: u64) -> Result<Vec<TokenSequence>>;
}

fn default_max_len() -> usize {
    DEFAULT_MAX_LEN
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GreedyOptions {
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

impl Default for GreedyOptions {
    fn default() -> Self {
        GreedyOptions { max_len: DEFAULT_MAX_LEN }
    }
}

impl Decoder for GreedyOptions {
    fn name(&self) -> &str {
        "greedy"
    }

    fn decode(&self, policy: &Policy, prompt: &[Token], _seed: u64) -> Result<Vec<TokenSequence>> {
        Ok(vec![greedy(policy, prompt, self.max_len)?])
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultinomialOptions {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_samples() -> usize {
    2
}

fn default_temperature() -> f64 {
    1.0
}

impl Default for MultinomialOptions {
    fn default() -> Self {
        MultinomialOptions { samples: default_samples(), temperature: default_temperature(), max_len: DEFAULT_MAX_LEN }
    }
}

impl Decoder for MultinomialOptions {
    fn name(&self) -> &str {
        "multinomial"
    }

    fn decode(&self, policy: &Policy, prompt: &[Token], seed: u64) -> Result<Vec<TokenSequence>> {
        (0..self.samples as u64)
            .map(|i| sample_multinomial(policy, prompt, self.temperature, derive_seed(seed, &[&i.to_le_bytes()]), self.max_len))
            .collect()
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiverseBeamOptions {
    #[serde(default = "default_groups")]
    pub groups: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_groups() -> usize {
    4
}

fn default_lambda() -> f64 {
    0.5
}

impl Default for DiverseBeamOptions {
    fn default() -> Self {
        DiverseBeamOptions { groups: default_groups(), lambda: default_lambda(), max_len: DEFAULT_MAX_LEN }
    }
}

impl Decoder for DiverseBeamOptions {
    fn name(&self) -> &str {
        "diverse-beam"
    }

    fn decode(&self, policy: &Policy, prompt: &[Token], _seed: u64) -> Result<Vec<TokenSequence>> {
        diverse_beam_search(policy, prompt, self.groups, self.lambda, self.max_len)
    }
}

fn checked<D: Decoder + 'static>(name: &str, d: D, ok: bool, reason: &str) -> std::result::Result<Box<dyn Decoder>, StrategyError> {
    if ok {
        Ok(Box::new(d))
    } else {
        Err(StrategyError::Options { name: name.into(), reason: reason.into() })
    }
}

pub fn decoders() -> StrategyTable<Box<dyn Decoder>> {
    let mut t: StrategyTable<Box<dyn Decoder>> = StrategyTable::new("decoder");
    t.register("greedy", |v| {
        let o: GreedyOptions = options("greedy", v)?;
        let ok = o.max_len > 0;
        checked("greedy", o, ok, "max_len must be positive")
    })
    .register("multinomial", |v| {
        let o: MultinomialOptions = options("multinomial", v)?;
        let ok = o.temperature > 0.0 && o.max_len > 0;
        checked("multinomial", o, ok, "temperature and max_len must be positive")
    })
    .register("diverse-beam", |v| {
        let o: DiverseBeamOptions = options("diverse-beam", v)?;
        let ok = o.groups > 0 && o.lambda >= 0.0 && o.max_len > 0;
        checked("diverse-beam", o, ok, "groups must be positive and lambda nonnegative")
    });
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::tests::{example, random_policy, vocab};
    use crate::policy::{Layout, POSITION_BUCKETS};

    #[test]
    fn cold_sampling_is_greedy() {
        for seed in 0..5 {
            let p = random_policy(seed, 3.0);
            let prompt = p.vocab.encode_prompt("pixel corgi");
            let g = greedy(&p, &prompt, DEFAULT_MAX_LEN).unwrap();
            for s in 0..5 {
                assert_eq!(sample_multinomial(&p, &prompt, 1e-4, s, DEFAULT_MAX_LEN).unwrap(), g);
            }
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let p = random_policy(1, 1.0);
        let prompt = p.vocab.encode_prompt("anime");
        let a = sample_multinomial(&p, &prompt, 1.0, 42, 10).unwrap();
        assert_eq!(a, sample_multinomial(&p, &prompt, 1.0, 42, 10).unwrap());
        assert!(a.len() <= 10);
    }

    /// First-token frequencies over 10,000 seeds against the softmax, within
    /// three multinomial standard errors.
    #[test]
    fn first_token_frequencies_match_softmax() {
        let mut p = crate::policy::Policy::new(vocab(), 16);
        let l = p.layout();
        let bos = l.outputs;
        let favoured = [(3usize, 2.0), (10, 1.5), (20, 1.0)];
        for (tok, w) in favoured {
            p.params.row_mut(bos)[tok] = w + 3.0;
        }
        let f = p.prompt_features(&[]).unwrap();
        let probs: Vec<f64> = p.next_logprobs(&f, None, 0).iter().map(|v| v.exp()).collect();
        let n = 10_000;
        let mut counts = vec![0usize; l.outputs];
        for seed in 0..n {
            let s = sample_multinomial(&p, &[], 1.0, seed, 1).unwrap();
            counts[s[0].index()] += 1;
        }
        let mut other_p = 1.0;
        let mut other_c = n as usize;
        for (tok, _) in favoured {
            let q = probs[tok];
            let se = (q * (1.0 - q) / n as f64).sqrt();
            let freq = counts[tok] as f64 / n as f64;
            assert!((freq - q).abs() <= 3.0 * se, "token {tok}: {freq} vs {q}");
            other_p -= q;
            other_c -= counts[tok];
        }
        let se = (other_p * (1.0 - other_p) / n as f64).sqrt();
        assert!((other_c as f64 / n as f64 - other_p).abs() <= 3.0 * se);
    }

    #[test]
    fn zero_lambda_repeats_greedy() {
        let p = random_policy(4, 2.0);
        let prompt = p.vocab.encode_prompt("castle");
        let g = greedy(&p, &prompt, DEFAULT_MAX_LEN).unwrap();
        assert_eq!(diverse_beam_search(&p, &prompt, 2, 0.0, DEFAULT_MAX_LEN).unwrap(), vec![g.clone(), g]);
    }

    #[test]
    fn large_lambda_changes_first_token() {
        let p = random_policy(6, 2.0);
        let prompt = p.vocab.encode_prompt("girl");
        let out = diverse_beam_search(&p, &prompt, 2, 1e3, DEFAULT_MAX_LEN).unwrap();
        assert_ne!(out[0][0], out[1][0]);
    }

    fn row(l: Layout, prev: Option<usize>) -> usize {
        prev.unwrap_or(l.outputs)
    }

    /// Hand-built transition table; expected output simulated by hand:
    ///
    /// ```text
    /// <bos>: a 2.0  b 1.8  c 1.0      a: eos 3.0  b 2.6
    /// b:     eos 3.0  a 2.0           c: eos 3.0
    /// group 1: a (2.0), eos (3.0)
    /// group 2: step 0 a 1.5 < b 1.8 -> b; step 1 eos 2.5 > a 2.0 -> eos
    /// group 3: step 0 a 1.5, b 1.3, c 1.0 -> a;
    ///          step 1 eos 3.0 - 1.0 = 2.0 < b 2.6 -> b; step 2 eos
    /// ```
    #[test]
    fn three_groups_hand_simulated() {
        let mut p = crate::policy::Policy::new(vocab(), 16);
        let l = p.layout();
        let v = p.vocab.clone();
        let a = v.model_token("animagine").unwrap();
        let b = v.model_token("juggernaut").unwrap();
        let c = v.model_token("pixelart-xl").unwrap();
        let eos = v.eos();
        let set = |p: &mut crate::policy::Policy, prev: Option<Token>, tok: Token, w: f64| {
            p.params.row_mut(row(l, prev.map(Token::index)))[tok.index()] = w;
        };
        set(&mut p, None, a, 2.0);
        set(&mut p, None, b, 1.8);
        set(&mut p, None, c, 1.0);
        set(&mut p, Some(a), eos, 3.0);
        set(&mut p, Some(a), b, 2.6);
        set(&mut p, Some(b), eos, 3.0);
        set(&mut p, Some(b), a, 2.0);
        set(&mut p, Some(c), eos, 3.0);
        assert_eq!(l.rows(), l.outputs + 1 + POSITION_BUCKETS + 16);
        let out = diverse_beam_search(&p, &[], 3, 0.5, DEFAULT_MAX_LEN).unwrap();
        assert_eq!(out, vec![vec![a, eos], vec![b, eos], vec![a, b, eos]]);
    }

    #[test]
    fn decoders_are_pure() {
        let p = random_policy(7, 1.0);
        let prompt = example("pixel corgi", "pixelart-xl").prompt;
        let t = decoders();
        assert_eq!(t.names(), vec!["diverse-beam", "greedy", "multinomial"]);
        for name in t.names() {
            let d = t.create(name, &serde_json::Value::Null).unwrap();
            assert_eq!(d.decode(&p, &prompt, 3).unwrap(), d.decode(&p, &prompt, 3).unwrap());
        }
        assert!(t.create("multinomial", &serde_json::json!({"temperature": 0.0})).is_err());
        assert!(t.create("diverse-beam", &serde_json::json!({"width": 2})).is_err());
    }
}
