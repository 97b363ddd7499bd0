//! End-to-end run over an ingested catalog: split, supervised training,
//! ranking alignment and evaluation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{train_rrhf, AlignmentError, EpochRecord, RrhfConfig};
use crate::catalog::{split_dataset, CatalogError, Registry, Splits};
use crate::evaluation::{evaluate, EvalConfig, EvalError, EvalReport, Policies};
use crate::policy::{
    build_vocab, encode_pair, train_sft, EpochLoss, Example, Policy, PolicyError, SftConfig, DEFAULT_HASH_BUCKETS,
};
use crate::schema::{Instruction, InstructionApiPair};
use crate::scoring::Backends;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Training and evaluation settings of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub split_seed: u64,
    pub hash_buckets: usize,
    pub sft: SftConfig,
    pub rrhf: RrhfConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            split_seed: 0,
            hash_buckets: DEFAULT_HASH_BUCKETS,
            sft: SftConfig::default(),
            rrhf: RrhfConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Same settings with every seed derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.split_seed = seed;
        self.sft.seed = seed;
        self.rrhf.seed = seed;
        self
    }
}

pub fn encode_all(policy: &Policy, pairs: &[InstructionApiPair]) -> Result<Vec<Example>, PolicyError> {
    pairs.iter().map(|p| encode_pair(&policy.vocab, p)).collect()
}

pub fn instructions(pairs: &[InstructionApiPair]) -> Vec<Instruction> {
    pairs.iter().map(|p| p.instruction.clone()).collect()
}

/// Fresh zero-weight policy over the vocabulary of `registry` and `pairs`.
pub fn init_policy(registry: &Registry, pairs: &[InstructionApiPair], hash_buckets: usize) -> Result<Policy, PolicyError> {
    Ok(Policy::new(build_vocab(registry, pairs)?, hash_buckets))
}

pub fn run_sft(
    registry: &Registry,
    splits: &Splits,
    cfg: &TrainConfig,
) -> Result<(Policy, Vec<EpochLoss>), PipelineError> {
    let init = init_policy(registry, &splits.train, cfg.hash_buckets)?;
    let data = encode_all(&init, &splits.train)?;
    Ok(train_sft(&init, &data, &cfg.sft)?)
}

pub fn run_rrhf(
    sft: &Policy,
    registry: &Registry,
    splits: &Splits,
    backends: &Backends,
    cfg: &TrainConfig,
) -> Result<(Policy, Vec<EpochRecord>), PipelineError> {
    Ok(train_rrhf(sft, &instructions(&splits.align), registry, backends, &cfg.rrhf)?)
}

/// Everything produced by [`run_all`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub splits: Splits,
    pub sft: Policy,
    pub sft_log: Vec<EpochLoss>,
    pub rrhf: Policy,
    pub rrhf_log: Vec<EpochRecord>,
    pub report: EvalReport,
}

pub fn run_all(
    registry: &Registry,
    pairs: &[InstructionApiPair],
    backends: &Backends,
    cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<RunOutput, PipelineError> {
    let splits = split_dataset(pairs, cfg.split_seed)?;
    let (sft, sft_log) = run_sft(registry, &splits, cfg)?;
    let (rrhf, rrhf_log) = run_rrhf(&sft, registry, &splits, backends, cfg)?;
    let report = evaluate(&splits.eval, Policies { sft: &sft, rrhf: &rrhf }, registry, backends, eval)?;
    Ok(RunOutput { splits, sft, sft_log, rrhf, rrhf_log, report })
}
