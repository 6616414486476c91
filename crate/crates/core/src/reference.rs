//! End-to-end reference experiment: generate the synthetic task, pretrain
//! a base model, align it under each mode and measure the results.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::{compare, evaluate, mean_bad_mass, Comparison, Metrics};
use crate::lm::{ModelConfig, ModelParams};
use crate::synth::{ReferenceTask, TaskConfig};
use crate::trainer::{mean_exact_reward, pretrain, Mode, PretrainConfig, RewardCurvePoint, TrainConfig, Trainer};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceConfig {
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    /// Shared by every mode; `mode` and `seed` are overwritten per run.
    pub train: TrainConfig,
}

impl ReferenceConfig {
    /// The same configuration with every seed derived from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.task.seed = seed;
        c.pretrain.seed = seed;
        c.train.seed = seed;
        c
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModeResult {
    /// `None` for the pretrained base model.
    pub mode: Option<Mode>,
    /// Mean exact expected reward over held-out queries.
    pub exact_reward: f64,
    /// Mean exact probability of a response holding a bad token.
    pub bad_mass: f64,
    pub metrics: Metrics,
    #[serde(skip)]
    pub curve: Vec<RewardCurvePoint>,
    #[serde(skip)]
    pub params: Option<ModelParams>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub base: ModeResult,
    pub neat: ModeResult,
    pub rrhf_like: ModeResult,
    pub sft_only: ModeResult,
    /// Greedy comparison of neat against sft_only on held-out queries.
    pub neat_vs_sft: Comparison,
}

pub fn pretrained_base(cfg: &ReferenceConfig) -> Result<(ReferenceTask, ModelParams)> {
    let task = ReferenceTask::generate(cfg.task)?;
    let corpus = task.pretraining_corpus();
    let base = pretrain(&corpus, cfg.model, &cfg.pretrain)?;
    Ok((task, base))
}

fn measure(task: &ReferenceTask, mode: Option<Mode>, params: ModelParams, curve: Vec<RewardCurvePoint>, max_len: usize) -> Result<ModeResult> {
    Ok(ModeResult {
        mode,
        exact_reward: mean_exact_reward(&params, &task.spec, task.test.records().iter(), max_len)?,
        bad_mass: mean_bad_mass(&params, &task.spec, &task.test, max_len)?,
        metrics: evaluate(&params, &task.test, &task.spec)?,
        curve,
        params: Some(params),
    })
}

pub fn train_mode(task: &ReferenceTask, base: &ModelParams, train: &TrainConfig, mode: Mode) -> Result<ModeResult> {
    let config = TrainConfig { mode, ..train.clone() };
    let max_len = config.max_len;
    let trainer = Trainer::new(&task.spec, &task.prompts, config)?;
    let out = trainer.train(base.clone(), task.train.clone())?;
    measure(task, Some(mode), out.params, out.curve, max_len)
}

pub fn run_seed(cfg: &ReferenceConfig, seed: u64) -> Result<SeedResult> {
    let cfg = cfg.with_seed(seed);
    let (task, base) = pretrained_base(&cfg)?;
    let max_len = cfg.train.max_len;
    let base_result = measure(&task, None, base.clone(), Vec::new(), max_len)?;
    let neat = train_mode(&task, &base, &cfg.train, Mode::Neat)?;
    let rrhf_like = train_mode(&task, &base, &cfg.train, Mode::RrhfLike)?;
    let sft_only = train_mode(&task, &base, &cfg.train, Mode::SftOnly)?;
    let neat_vs_sft = compare(
        neat.params.as_ref().expect("trained params"),
        sft_only.params.as_ref().expect("trained params"),
        &task.test,
        &task.spec,
        0.5,
    )?;
    Ok(SeedResult {
        seed,
        base: base_result,
        neat,
        rrhf_like,
        sft_only,
        neat_vs_sft,
    })
}
