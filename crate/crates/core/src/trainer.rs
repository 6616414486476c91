//! Online alignment loop and base-model pretraining.
//!
//! Each step fetches a mini-batch of records, draws one sample per prompt
//! template for every query from the step-start parameters, scores it
//! against the plain query, grows the dataset, and then takes one optimizer
//! step on the batch-mean loss over each record's response pool.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NeatError, Result};
use crate::lm::{
    backward_token_log_probs, sample_response, token_log_probs, write_atomic, GradVector, ModelParams,
    Transformer,
};
use crate::loss::{evaluate_pool, LossBreakdown, LossWeights, TermWeights};
use crate::optim::{Optimizer, OptimizerKind};
use crate::prefdata::{Dataset, PreferenceRecord};
use crate::reward::{exact_expected_reward, score, RewardSpec, ScoredResponse};
use crate::tokens::{query_context, TokenSeq};
use crate::sampler::{derive_seed, sample_prompt_driven, sample_seed, PromptSet};
use crate::synth::CorpusExample;

/// Seed tag of the unprompted per-query sample behind `mean_batch_reward`;
/// distinct from the prompt kinds' tags.
const POLICY_SAMPLE_TAG: u64 = 0x706f;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Neat,
    RrhfLike,
    SftOnly,
}

impl std::str::FromStr for Mode {
    type Err = NeatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neat" => Ok(Mode::Neat),
            "rrhf_like" => Ok(Mode::RrhfLike),
            "sft_only" => Ok(Mode::SftOnly),
            other => Err(NeatError::Domain(format!("unknown mode {other:?}"))),
        }
    }
}

/// Which stored responses enter a step's ranking pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// The record's capped stored list plus this step's fresh samples.
    KPlusTwo,
    /// Every response accumulated in the record.
    AllAccumulated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Sampling temperature for prompt-driven samples.
    pub lambda: f64,
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub seed: u64,
    pub mode: Mode,
    pub dedup: bool,
    pub optimizer: OptimizerKind,
    pub pool: PoolMode,
    /// Stored responses per record that enter a `KPlusTwo` pool.
    pub stored_cap: usize,
    /// Drawn-token budget of sampled responses.
    pub max_len: usize,
    /// Steps between exact expected-reward evaluations; 0 disables them.
    pub curve_every: usize,
    /// Training queries (from the front of the split) used for the exact
    /// expected reward on the curve.
    pub curve_queries: usize,
    /// Steps between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 0.1,
            lambda: 1.0,
            lr: 1e-3,
            iterations: 3000,
            batch_size: 4,
            tau: 8.0,
            seed: 0,
            mode: Mode::Neat,
            dedup: true,
            optimizer: OptimizerKind::Adam,
            pool: PoolMode::KPlusTwo,
            stored_cap: 8,
            max_len: crate::synth::REFERENCE_MAX_LEN,
            curve_every: 100,
            curve_queries: 16,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.raw_weights().validate()?;
        if !(self.lambda > 0.0) || !(self.lr > 0.0) {
            return Err(NeatError::Domain("lambda and lr must be positive".into()));
        }
        if self.batch_size == 0 || self.max_len == 0 || self.stored_cap < 2 {
            return Err(NeatError::Domain(
                "batch_size and max_len must be positive and stored_cap at least 2".into(),
            ));
        }
        Ok(())
    }

    fn raw_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            tau: self.tau,
        }
    }

    /// Loss weights after the mode's overrides: `sft_only` zeroes both α
    /// and β, `rrhf_like` zeroes β.
    pub fn loss_weights(&self) -> LossWeights {
        let mut w = self.raw_weights();
        match self.mode {
            Mode::Neat => {}
            Mode::RrhfLike => w.beta = 0.0,
            Mode::SftOnly => {
                w.alpha = 0.0;
                w.beta = 0.0;
            }
        }
        w
    }

    pub fn sampling_enabled(&self) -> bool {
        self.mode != Mode::SftOnly
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardCurvePoint {
    pub step: u64,
    /// Mean oracle reward of one unprompted sample per batch query.
    pub mean_batch_reward: f64,
    pub sft: f64,
    pub ranking: f64,
    pub penalty: f64,
    pub total: f64,
    pub clipped_frac: f64,
    pub exact_expected_reward: Option<f64>,
}

/// Seeded epoch-wise shuffling of record indices.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchOrder {
    seed: u64,
    n: usize,
    epoch: u64,
    perm: Vec<usize>,
    cursor: usize,
}

impl BatchOrder {
    pub fn new(seed: u64, n: usize) -> Self {
        let mut order = BatchOrder {
            seed,
            n,
            epoch: 0,
            perm: Vec::new(),
            cursor: 0,
        };
        order.reshuffle();
        order
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, 0xba7c, self.epoch]));
        self.perm = (0..self.n).collect();
        self.perm.shuffle(&mut rng);
        self.cursor = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.n {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.perm[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    pub dataset: Dataset,
    pub optimizer: Optimizer,
    pub order: BatchOrder,
    pub step: u64,
}

/// Everything produced by one training step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub point: RewardCurvePoint,
    pub breakdowns: Vec<LossBreakdown>,
    pub fresh: Vec<(usize, ScoredResponse)>,
    pub added: usize,
    pub grad: GradVector,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub curve: Vec<RewardCurvePoint>,
    pub dataset: Dataset,
}

/// Optional on-disk outputs of a training run.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub log: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub step: u64,
}

pub struct Trainer<'a> {
    pub spec: &'a RewardSpec,
    pub prompts: &'a PromptSet,
    pub config: TrainConfig,
}

impl<'a> Trainer<'a> {
    pub fn new(spec: &'a RewardSpec, prompts: &'a PromptSet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        prompts.validate()?;
        Ok(Trainer {
            spec,
            prompts,
            config,
        })
    }

    pub fn init_state(&self, params: ModelParams, dataset: Dataset) -> Result<TrainState> {
        if dataset.is_empty() {
            return Err(NeatError::Domain("training needs a non-empty dataset".into()));
        }
        params.check_finite()?;
        let n = params.len();
        let dataset = dataset.with_dedup(self.config.dedup);
        Ok(TrainState {
            order: BatchOrder::new(self.config.seed, dataset.len()),
            optimizer: Optimizer::new(self.config.optimizer, self.config.lr, n),
            params,
            dataset,
            step: 0,
        })
    }

    /// Response pool for one record after this step's expansion.
    pub fn pool(&self, record: &PreferenceRecord, fresh: &[&ScoredResponse]) -> Vec<ScoredResponse> {
        let mut pool = match self.config.pool {
            PoolMode::KPlusTwo => record.capped(self.config.stored_cap),
            PoolMode::AllAccumulated => record.responses.clone(),
        };
        for f in fresh {
            if !pool.iter().any(|p| p.response == f.response) {
                pool.push((*f).clone());
            }
        }
        pool
    }

    /// Draws the prompt-driven samples of one step from `params`.
    pub fn sample_batch(
        &self,
        params: &ModelParams,
        dataset: &Dataset,
        batch: &[usize],
        step: u64,
    ) -> Result<Vec<(usize, ScoredResponse)>> {
        let mut fresh = Vec::new();
        if !self.config.sampling_enabled() {
            return Ok(fresh);
        }
        for &idx in batch {
            let query = &dataset.records()[idx].query;
            for t in self.prompts.templates() {
                let seed = sample_seed(self.config.seed, step, idx as u64, t.kind);
                let s = sample_prompt_driven(
                    params,
                    t,
                    query,
                    self.spec,
                    self.config.lambda,
                    self.config.max_len,
                    seed,
                )?;
                fresh.push((idx, s));
            }
        }
        Ok(fresh)
    }

    /// Rewards of one unprompted sample per batch query from `params`: the
    /// model's own behavior, as opposed to the prompt-driven samples.
    pub fn policy_rewards(
        &self,
        params: &ModelParams,
        dataset: &Dataset,
        batch: &[usize],
        step: u64,
    ) -> Result<Vec<f64>> {
        batch
            .iter()
            .map(|&idx| {
                let query = &dataset.records()[idx].query;
                let seed = derive_seed(&[self.config.seed, step, idx as u64, POLICY_SAMPLE_TAG]);
                let context = TokenSeq::new(query_context(query));
                let y = sample_response(params, &context, self.config.lambda, self.config.max_len, seed)?;
                score(self.spec, query, &y)
            })
            .collect()
    }

    pub fn train_step(&self, state: &mut TrainState, batch: &[usize]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(NeatError::Domain("empty batch".into()));
        }
        let step = state.step + 1;
        let fresh = self.sample_batch(&state.params, &state.dataset, batch, step)?;
        let policy_rewards = self.policy_rewards(&state.params, &state.dataset, batch, step)?;
        let mut added = 0;
        for (idx, s) in &fresh {
            let query = state.dataset.records()[*idx].query.clone();
            if state.dataset.expand(&query, s.clone())? {
                added += 1;
            }
        }

        let weights = TermWeights::total(&self.config.loss_weights());
        let mut grad = GradVector::zeros(state.params.len());
        let mut breakdowns = Vec::with_capacity(batch.len());
        for &idx in batch {
            let record = &state.dataset.records()[idx];
            let mine: Vec<&ScoredResponse> =
                fresh.iter().filter(|(i, _)| *i == idx).map(|(_, s)| s).collect();
            let pool = self.pool(record, &mine);
            let eval = evaluate_pool(&state.params, &record.query, &pool, weights, true)?;
            let g = eval.grad.expect("gradient requested");
            if !eval.value.is_finite() || !g.is_finite() {
                return Err(NeatError::Numeric(format!(
                    "non-finite loss at step {step} on record {}: breakdown {:?}, pool {:?}",
                    record.query, eval.breakdown, pool
                )));
            }
            grad.add_scaled(&g, 1.0);
            breakdowns.push(eval.breakdown);
        }
        let n = batch.len() as f64;
        grad.scale(1.0 / n);
        state.optimizer.step(state.params.as_mut_slice(), grad.as_slice());
        state.params.check_finite()?;
        state.step = step;

        let mean = |f: &dyn Fn(&LossBreakdown) -> f64| breakdowns.iter().map(f).sum::<f64>() / n;
        let mean_batch_reward = policy_rewards.iter().sum::<f64>() / n;
        let point = RewardCurvePoint {
            step,
            mean_batch_reward,
            sft: mean(&|b| b.sft),
            ranking: mean(&|b| b.ranking),
            penalty: mean(&|b| b.penalty),
            total: mean(&|b| b.total),
            clipped_frac: mean(&|b| if b.clipped { 1.0 } else { 0.0 }),
            exact_expected_reward: None,
        };
        Ok(StepReport {
            point,
            breakdowns,
            fresh,
            added,
            grad,
        })
    }

    /// Mean exact expected reward over the first `curve_queries` records.
    pub fn curve_exact_reward(&self, params: &ModelParams, dataset: &Dataset) -> Result<f64> {
        mean_exact_reward(
            params,
            self.spec,
            dataset.records().iter().take(self.config.curve_queries.max(1)),
            self.config.max_len,
        )
    }

    pub fn train(&self, params: ModelParams, dataset: Dataset) -> Result<TrainOutcome> {
        self.train_with_outputs(params, dataset, &TrainOutputs::default())
    }

    /// Runs every iteration. Log rows are flushed as they are produced, so
    /// an aborted run leaves its partial curve on disk.
    pub fn train_with_outputs(
        &self,
        params: ModelParams,
        dataset: Dataset,
        outputs: &TrainOutputs,
    ) -> Result<TrainOutcome> {
        let mut state = self.init_state(params, dataset)?;
        let mut log = match &outputs.log {
            Some(path) => Some(CurveWriter::create(path)?),
            None => None,
        };
        if let Some(dir) = &outputs.checkpoint_dir {
            fs::create_dir_all(dir).map_err(|e| NeatError::io(dir, e))?;
        }
        let mut curve = Vec::with_capacity(self.config.iterations);
        for _ in 0..self.config.iterations {
            let batch = state.order.next_batch(self.config.batch_size);
            let mut report = self.train_step(&mut state, &batch)?;
            let every = self.config.curve_every;
            if every > 0 && state.step % every as u64 == 0 {
                report.point.exact_expected_reward =
                    Some(self.curve_exact_reward(&state.params, &state.dataset)?);
            }
            if let Some(w) = log.as_mut() {
                w.write(&report.point)?;
            }
            curve.push(report.point);
            let ck = self.config.checkpoint_every;
            if let (Some(dir), true) = (&outputs.checkpoint_dir, ck > 0 && state.step % ck as u64 == 0) {
                write_checkpoint(dir, &state.params, &self.config, state.step)?;
            }
        }
        Ok(TrainOutcome {
            params: state.params,
            curve,
            dataset: state.dataset,
        })
    }
}

pub fn mean_exact_reward<'r>(
    params: &ModelParams,
    spec: &RewardSpec,
    records: impl Iterator<Item = &'r PreferenceRecord>,
    max_len: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for r in records {
        total += exact_expected_reward(params, spec, &r.query, max_len)?;
        n += 1;
    }
    if n == 0 {
        return Err(NeatError::Domain("no queries to evaluate".into()));
    }
    Ok(total / n as f64)
}

/// Writes `step_NNNNNN.ckpt` and its JSON sidecar into `dir`.
pub fn write_checkpoint(dir: &Path, params: &ModelParams, config: &TrainConfig, step: u64) -> Result<PathBuf> {
    let path = dir.join(format!("step_{step:06}.ckpt"));
    params.save(&path)?;
    write_sidecar(&path, config, step)?;
    Ok(path)
}

pub fn write_sidecar(ckpt: &Path, config: &TrainConfig, step: u64) -> Result<()> {
    let meta = CheckpointMeta {
        config: config.clone(),
        step,
    };
    let side = sidecar_path(ckpt);
    write_atomic(&side, serde_json::to_string_pretty(&meta)?.as_bytes())
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub const LOG_HEADER: [&str; 8] = [
    "step",
    "mean_batch_reward",
    "sft",
    "ranking",
    "penalty",
    "total",
    "clipped_frac",
    "exact_expected_reward",
];

/// Line-flushed CSV writer for the training log.
pub struct CurveWriter {
    inner: csv::Writer<fs::File>,
    path: PathBuf,
}

impl CurveWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = fs::File::create(path).map_err(|e| NeatError::io(path, e))?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        inner
            .write_record(LOG_HEADER)
            .map_err(|e| NeatError::io(path, e.into()))?;
        let mut w = CurveWriter {
            inner,
            path: path.to_path_buf(),
        };
        w.flush()?;
        Ok(w)
    }

    pub fn write(&mut self, p: &RewardCurvePoint) -> Result<()> {
        let exact = p.exact_expected_reward.map(|x| x.to_string()).unwrap_or_default();
        self.inner
            .write_record([
                p.step.to_string(),
                p.mean_batch_reward.to_string(),
                p.sft.to_string(),
                p.ranking.to_string(),
                p.penalty.to_string(),
                p.total.to_string(),
                p.clipped_frac.to_string(),
                exact,
            ])
            .map_err(|e| NeatError::io(&self.path, e.into()))?;
        self.flush()
    }

    fn flush(&mut self) -> Result<()> {
        self.inner.flush().map_err(|e| NeatError::io(&self.path, e))
    }
}

pub fn write_curve_csv(path: &Path, curve: &[RewardCurvePoint]) -> Result<()> {
    let mut w = CurveWriter::create(path)?;
    for p in curve {
        w.write(p)?;
    }
    Ok(())
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<RewardCurvePoint>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| NeatError::Parse {
        line: 0,
        message: e.to_string(),
    })?;
    let headers = rdr
        .headers()
        .map_err(|e| NeatError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != LOG_HEADER {
        return Err(NeatError::Parse {
            line: 1,
            message: format!("unexpected header {headers:?}"),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<RewardCurvePoint>().enumerate() {
        out.push(rec.map_err(|e| NeatError::Parse {
            line: i + 2,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch_size: 16,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Maximum-likelihood training of response tokens given their contexts,
/// starting from a seeded initialization.
pub fn pretrain(corpus: &[CorpusExample], model: crate::lm::ModelConfig, cfg: &PretrainConfig) -> Result<ModelParams> {
    let params = ModelParams::init(model, derive_seed(&[cfg.seed, 0x1417]));
    continue_pretraining(params, corpus, cfg)
}

pub fn continue_pretraining(
    mut params: ModelParams,
    corpus: &[CorpusExample],
    cfg: &PretrainConfig,
) -> Result<ModelParams> {
    if corpus.is_empty() || cfg.batch_size == 0 {
        return Err(NeatError::Domain("pretraining needs examples and a positive batch size".into()));
    }
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.lr, params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0x9e7a]));
    for _ in 0..cfg.steps {
        let mut grad = vec![0.0; params.len()];
        {
            let tf = Transformer::new(&params);
            for _ in 0..cfg.batch_size {
                let ex = &corpus[rng.gen_range(0..corpus.len())];
                let mut tokens = ex.context.tokens().to_vec();
                let from = tokens.len();
                tokens.extend_from_slice(ex.response.tokens());
                let (trace, lp) = token_log_probs(&tf, &tokens, from)?;
                let w = vec![-1.0 / cfg.batch_size as f64; lp.len()];
                backward_token_log_probs(&tf, &trace, &tokens, from, &w, &mut grad);
            }
        }
        opt.step(params.as_mut_slice(), &grad);
    }
    params.check_finite()?;
    Ok(params)
}
