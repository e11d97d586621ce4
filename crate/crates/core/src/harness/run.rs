// SPDX-License-Identifier: Apache-2.0

//! Training and evaluation runs.

use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, Scenario};
use crate::adapter::AdapterParams;
use crate::checkpoint::Checkpoint;
use crate::embank::{ClassId, EmbeddingBank};
use crate::episodes::{self, Episode, SamplingConfig, SamplingMode};
use crate::error::{Result, SgvaError};
use crate::infer::{self, EpisodeEval, ModeValues, PredictMode, PredictionRecord};
use crate::losses::LossFlags;
use crate::model;
use crate::optim::{self, OptimConfig, ParamGrads, SgvaParams, Velocity};
use crate::rng::Purpose;
use crate::textpath::PromptSet;

pub const REPORT_FORMAT: &str = "sgva-run-report/1";

/// Fresh learnable state for `config` on `bank`.
pub fn init_params(config: &ExperimentConfig, bank: &EmbeddingBank) -> Result<SgvaParams> {
    config.check_bank(bank)?;
    let adapter = if config.adapter.enabled {
        Some(AdapterParams::init(bank.dims().d_v, config.adapter.hidden, config.adapter.wa_init, config.seed)?)
    } else {
        None
    };
    let prompts = if config.prompt.learnable {
        Some(PromptSet::init(config.prompt_blocks(), config.prompt.len, bank.dims().d_e, config.seed)?)
    } else {
        None
    };
    Ok(SgvaParams {
        adapter,
        prompts,
        step_count: 0,
    })
}

/// SHA-256 over every learnable tensor, names included.
pub fn params_digest(params: &SgvaParams) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.tensors() {
        h.update(name.as_bytes());
        h.update((t.len() as u64).to_le_bytes());
        for x in t {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub epoch: usize,
    pub lr: f64,
    pub l_i2t: f64,
    pub l_i2i: f64,
    pub l_kd: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub epoch: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub scenario: Scenario,
    pub epochs_done: u64,
    pub steps: u64,
    /// Per-epoch means; for per-episode fine-tuning, per-step means over
    /// test episodes.
    pub loss_curve: Vec<LossPoint>,
    pub validation: Vec<ValPoint>,
    /// Digest of the trained parameters; for per-episode fine-tuning, of the
    /// shared starting point.
    pub params_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub index: u64,
    pub class_ids: Vec<ClassId>,
    pub queries: usize,
    pub accuracy: ModeValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: Option<usize>,
    pub mode: PredictMode,
    /// Mean episode accuracy per mode.
    pub mean: ModeValues,
    /// `1.96 · s / √E` per mode, `s` the sample standard deviation.
    pub ci95: ModeValues,
    pub per_episode: Vec<EpisodeRecord>,
}

impl EvalSummary {
    pub fn accuracy(&self) -> f64 {
        self.mean.get(self.mode)
    }
}

/// Everything needed to reproduce a run given the bank. Wall time is kept
/// apart in [`Timing`] so identical runs yield identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub config: ExperimentConfig,
    pub bank_digest: String,
    pub config_hash: String,
    /// SHA-256 of the bank digest and config hash.
    pub content_hash: String,
    pub training: TrainSummary,
    pub evaluation: EvalSummary,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

/// `1.96 · s / √n` with `s` the sample standard deviation; 0 for `n < 2`.
pub fn ci95(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    1.96 * var.sqrt() / (n as f64).sqrt()
}

fn content_hash(bank_digest: &str, config_hash: &str) -> String {
    let mut h = Sha256::new();
    h.update(b"bank ");
    h.update(bank_digest.as_bytes());
    h.update(b"\nconfig ");
    h.update(config_hash.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub resume: Option<Checkpoint>,
    /// Where to write the last good state if training hits non-finite
    /// values.
    pub failure_dump: Option<PathBuf>,
    pub keep_predictions: bool,
    /// Run at most this many epochs in this call; resume later to finish.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    /// Absent for per-episode fine-tuning, which has no shared result.
    pub checkpoint: Option<Checkpoint>,
    pub predictions: Vec<PredictionRecord>,
    pub timing: Timing,
}

fn sampling(config: &ExperimentConfig, mode: SamplingMode, count: usize) -> SamplingConfig {
    SamplingConfig {
        mode,
        n_way: config.sampling.n_way,
        k_shot: config.sampling.k_shot,
        queries_per_class: config.sampling.queries_per_class,
        episode_count: count,
        seed: config.seed,
    }
}

#[derive(Default)]
struct LossAccumulator {
    sums: [f64; 4],
    count: usize,
}

impl LossAccumulator {
    fn add(&mut self, b: &crate::losses::LossBundle) {
        for (s, v) in self.sums.iter_mut().zip([b.l_i2t, b.l_i2i, b.l_kd, b.total]) {
            *s += v;
        }
        self.count += 1;
    }

    fn point(&self, epoch: usize, lr: f64) -> LossPoint {
        let n = self.count.max(1) as f64;
        LossPoint {
            epoch,
            lr,
            l_i2t: self.sums[0] / n,
            l_i2i: self.sums[1] / n,
            l_kd: self.sums[2] / n,
            total: self.sums[3] / n,
        }
    }
}

/// One optimizer step on `episode`, touching only groups the enabled losses
/// reach.
#[allow(clippy::too_many_arguments)]
fn train_step(
    params: &mut SgvaParams,
    velocity: &mut Velocity,
    bank: &EmbeddingBank,
    episode: &Episode,
    flags: &LossFlags,
    tau2: f64,
    optim_cfg: &OptimConfig,
    lr: f64,
) -> Result<crate::losses::LossBundle> {
    let mut bundle = model::episode_loss(params, bank, episode, flags, tau2)?;
    model::mask_unreached(&mut bundle.grads, flags);
    optim::step(params, &bundle.grads, optim_cfg, lr, velocity)?;
    if !params.is_finite() {
        return Err(SgvaError::Numerics(format!("parameters became non-finite at step {}", params.step_count)));
    }
    Ok(bundle)
}

fn eval_one(params: &SgvaParams, bank: &EmbeddingBank, episode: &Episode, index: u64, keep: bool) -> Result<(EpisodeRecord, EpisodeEval)> {
    let eval = infer::evaluate_episode(params, bank, episode, index, keep)?;
    let record = EpisodeRecord {
        index,
        class_ids: episode.class_ids.clone(),
        queries: episode.query.len(),
        accuracy: eval.accuracy,
    };
    Ok((record, eval))
}

fn summarize(config: &ExperimentConfig, results: Vec<(EpisodeRecord, EpisodeEval)>, queries_per_class: Option<usize>, n_way: usize, k_shot: usize) -> (EvalSummary, Vec<PredictionRecord>) {
    let mut mean = ModeValues::default();
    let mut ci = ModeValues::default();
    for m in PredictMode::ALL {
        let accs: Vec<f64> = results.iter().map(|(r, _)| r.accuracy.get(m)).collect();
        *mean.get_mut(m) = accs.iter().sum::<f64>() / accs.len() as f64;
        *ci.get_mut(m) = ci95(&accs);
    }
    let mut per_episode = Vec::with_capacity(results.len());
    let mut predictions = Vec::new();
    for (r, e) in results {
        per_episode.push(r);
        predictions.extend(e.records);
    }
    (
        EvalSummary {
            episodes: per_episode.len(),
            n_way,
            k_shot,
            queries_per_class,
            mode: config.eval.mode,
            mean,
            ci95: ci,
            per_episode,
        },
        predictions,
    )
}

/// Mean primary-mode accuracy over `count` episodes of `mode`.
fn episodic_eval(
    params: &SgvaParams,
    bank: &EmbeddingBank,
    config: &ExperimentConfig,
    mode: SamplingMode,
    purpose: Purpose,
    count: usize,
    keep: bool,
) -> Result<(EvalSummary, Vec<PredictionRecord>)> {
    let cfg = sampling(config, mode, count);
    let results = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let ep = episodes::nth_episode(bank, &cfg, purpose, i)?;
            eval_one(params, bank, &ep, i, keep)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(config, results, Some(cfg.queries_per_class), cfg.n_way, cfg.k_shot))
}

struct Trained {
    params: SgvaParams,
    velocity: Velocity,
    summary: TrainSummary,
}

fn dump_on_failure<T>(
    result: Result<T>,
    opts: &TrainOptions,
    params: &SgvaParams,
    velocity: &Velocity,
    bank: &EmbeddingBank,
    config: &ExperimentConfig,
    epochs_done: u64,
) -> Result<T> {
    if let (Err(SgvaError::Numerics(_)), Some(path)) = (&result, &opts.failure_dump) {
        let ck = Checkpoint {
            params: params.clone(),
            velocity: velocity.clone(),
            bank_digest: bank.frozen_digest(),
            epochs_done,
            config: serde_json::to_value(config).expect("config serializes"),
        };
        ck.save(path)?;
    }
    result
}

fn starting_state(config: &ExperimentConfig, bank: &EmbeddingBank, opts: &TrainOptions) -> Result<(SgvaParams, Velocity, u64)> {
    let fresh = init_params(config, bank)?;
    match &opts.resume {
        None => {
            let v = ParamGrads::zeros_like(&fresh);
            Ok((fresh, v, 0))
        }
        Some(ck) => {
            if ck.bank_digest != bank.frozen_digest() {
                return Err(SgvaError::Config("checkpoint was trained on a different bank".into()));
            }
            let shape = |p: &SgvaParams| p.tensors().iter().map(|(n, t)| (*n, t.len())).collect::<Vec<_>>();
            if shape(&ck.params) != shape(&fresh) {
                return Err(SgvaError::Config("checkpoint parameter shapes do not match the config".into()));
            }
            Ok((ck.params.clone(), ck.velocity.clone(), ck.epochs_done))
        }
    }
}

fn stop_epoch(opts: &TrainOptions, start: u64, epochs: u64) -> u64 {
    opts.stop_after.map_or(epochs, |n| start.saturating_add(n).min(epochs))
}

fn train_base(config: &ExperimentConfig, bank: &EmbeddingBank, opts: &TrainOptions) -> Result<Trained> {
    let (mut params, mut velocity, start) = starting_state(config, bank, opts)?;
    let flags = config.loss.flags();
    let epochs = config.optim.epochs as u64;
    let per_epoch = config.train.episodes_per_epoch as u64;
    let total = epochs * per_epoch;
    let cfg = sampling(config, SamplingMode::MetaTrainBase, per_epoch.max(1) as usize);
    let end = stop_epoch(opts, start, epochs);
    let mut loss_curve = Vec::new();
    let mut validation = Vec::new();
    for epoch in start..end {
        let mut acc = LossAccumulator::default();
        let lr0 = config.optim.lr_at(epoch * per_epoch, total);
        for i in 0..per_epoch {
            let t = epoch * per_epoch + i;
            let ep = episodes::nth_episode(bank, &cfg, Purpose::TrainEpisodes, t)?;
            let lr = config.optim.lr_at(t, total);
            let result = train_step(&mut params, &mut velocity, bank, &ep, &flags, config.loss.tau2, &config.optim, lr);
            acc.add(&dump_on_failure(result, opts, &params, &velocity, bank, config, epoch)?);
        }
        loss_curve.push(acc.point(epoch as usize, lr0));
        let every = config.train.validate_every as u64;
        if every > 0 && (epoch + 1) % every == 0 {
            let (s, _) = episodic_eval(&params, bank, config, SamplingMode::MetaValNovel, Purpose::ValEpisodes, config.train.val_episodes.max(1), false)?;
            validation.push(ValPoint {
                epoch: epoch as usize,
                accuracy: s.accuracy(),
            });
        }
    }
    Ok(Trained {
        summary: TrainSummary {
            scenario: config.scenario,
            epochs_done: end.max(start),
            steps: params.step_count,
            loss_curve,
            validation,
            params_digest: params_digest(&params),
        },
        params,
        velocity,
    })
}

fn train_all_class(config: &ExperimentConfig, bank: &EmbeddingBank, opts: &TrainOptions) -> Result<Trained> {
    let (mut params, mut velocity, start) = starting_state(config, bank, opts)?;
    let split = episodes::all_class_split(bank, config.sampling.k_shot, config.seed)?;
    let episode = split.train_episode();
    let flags = config.loss.flags();
    let epochs = config.optim.epochs as u64;
    let end = stop_epoch(opts, start, epochs);
    let mut loss_curve = Vec::new();
    for epoch in start..end {
        let lr = config.optim.lr_at(epoch, epochs);
        let result = train_step(&mut params, &mut velocity, bank, &episode, &flags, config.loss.tau2, &config.optim, lr);
        let bundle = dump_on_failure(result, opts, &params, &velocity, bank, config, epoch)?;
        let mut acc = LossAccumulator::default();
        acc.add(&bundle);
        loss_curve.push(acc.point(epoch as usize, lr));
    }
    Ok(Trained {
        summary: TrainSummary {
            scenario: config.scenario,
            epochs_done: end.max(start),
            steps: params.step_count,
            loss_curve,
            validation: Vec::new(),
            params_digest: params_digest(&params),
        },
        params,
        velocity,
    })
}

/// Fine-tunes a copy of `start` on each test episode's support set, then
/// classifies that episode's queries.
fn finetune_eval(
    start: &SgvaParams,
    bank: &EmbeddingBank,
    config: &ExperimentConfig,
    keep: bool,
) -> Result<(Vec<LossPoint>, EvalSummary, Vec<PredictionRecord>)> {
    let cfg = sampling(config, SamplingMode::MetaTestNovel, config.eval.episodes);
    let flags = config.loss.flags();
    let steps = config.optim.epochs as u64;
    let per_episode = (0..config.eval.episodes as u64)
        .into_par_iter()
        .map(|i| {
            let ep = episodes::nth_episode(bank, &cfg, Purpose::EvalEpisodes, i)?;
            let train_ep = ep.self_supported();
            let mut params = start.clone();
            let mut velocity = ParamGrads::zeros_like(&params);
            let mut curve = Vec::with_capacity(steps as usize);
            for t in 0..steps {
                let lr = config.optim.lr_at(t, steps);
                let b = train_step(&mut params, &mut velocity, bank, &train_ep, &flags, config.loss.tau2, &config.optim, lr)?;
                curve.push([b.l_i2t, b.l_i2i, b.l_kd, b.total]);
            }
            Ok((curve, eval_one(&params, bank, &ep, i, keep)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let e = per_episode.len() as f64;
    let loss_curve = (0..steps as usize)
        .map(|t| {
            let mut s = [0.0; 4];
            for (curve, _) in &per_episode {
                for (a, v) in s.iter_mut().zip(curve[t]) {
                    *a += v / e;
                }
            }
            LossPoint {
                epoch: t,
                lr: config.optim.lr_at(t as u64, steps),
                l_i2t: s[0],
                l_i2i: s[1],
                l_kd: s[2],
                total: s[3],
            }
        })
        .collect();
    let results = per_episode.into_iter().map(|(_, r)| r).collect();
    let (summary, preds) = summarize(config, results, Some(cfg.queries_per_class), cfg.n_way, cfg.k_shot);
    Ok((loss_curve, summary, preds))
}

fn evaluate_trained(
    params: &SgvaParams,
    bank: &EmbeddingBank,
    config: &ExperimentConfig,
    keep: bool,
) -> Result<(EvalSummary, Vec<PredictionRecord>)> {
    match config.scenario {
        Scenario::BaseClasses => episodic_eval(params, bank, config, SamplingMode::MetaTestNovel, Purpose::EvalEpisodes, config.eval.episodes, keep),
        Scenario::AllClass => {
            let split = episodes::all_class_split(bank, config.sampling.k_shot, config.seed)?;
            let ep = split.test_episode();
            let result = eval_one(params, bank, &ep, 0, keep)?;
            Ok(summarize(config, vec![result], None, ep.n_way, ep.k_shot))
        }
        Scenario::NoBaseClasses => unreachable!("fine-tuning scenario evaluates inside finetune_eval"),
    }
}

fn report(config: &ExperimentConfig, bank: &EmbeddingBank, training: TrainSummary, evaluation: EvalSummary) -> RunReport {
    let bank_digest = bank.frozen_digest();
    let config_hash = config.content_hash();
    RunReport {
        format: REPORT_FORMAT.to_string(),
        config: config.clone(),
        content_hash: content_hash(&bank_digest, &config_hash),
        bank_digest,
        config_hash,
        training,
        evaluation,
    }
}

/// Trains per the config's scenario, then evaluates.
pub fn run_train(config: &ExperimentConfig, bank: &EmbeddingBank, opts: &TrainOptions) -> Result<RunOutput> {
    config.validate()?;
    config.check_bank(bank)?;
    let t0 = Instant::now();
    if config.scenario == Scenario::NoBaseClasses {
        let (start, _, _) = starting_state(config, bank, opts)?;
        let (loss_curve, evaluation, predictions) = finetune_eval(&start, bank, config, opts.keep_predictions)?;
        let training = TrainSummary {
            scenario: config.scenario,
            epochs_done: config.optim.epochs as u64,
            steps: config.optim.epochs as u64,
            loss_curve,
            validation: Vec::new(),
            params_digest: params_digest(&start),
        };
        let elapsed = t0.elapsed().as_secs_f64();
        return Ok(RunOutput {
            report: report(config, bank, training, evaluation),
            checkpoint: None,
            predictions,
            timing: Timing {
                train_seconds: 0.0,
                eval_seconds: elapsed,
            },
        });
    }
    let trained = match config.scenario {
        Scenario::BaseClasses => train_base(config, bank, opts)?,
        Scenario::AllClass => train_all_class(config, bank, opts)?,
        Scenario::NoBaseClasses => unreachable!(),
    };
    let train_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let (evaluation, predictions) = evaluate_trained(&trained.params, bank, config, opts.keep_predictions)?;
    let checkpoint = Checkpoint {
        params: trained.params,
        velocity: trained.velocity,
        bank_digest: bank.frozen_digest(),
        epochs_done: trained.summary.epochs_done,
        config: serde_json::to_value(config).expect("config serializes"),
    };
    Ok(RunOutput {
        report: report(config, bank, trained.summary, evaluation),
        checkpoint: Some(checkpoint),
        predictions,
        timing: Timing {
            train_seconds,
            eval_seconds: t1.elapsed().as_secs_f64(),
        },
    })
}

/// Evaluates a checkpoint (or freshly initialized parameters) without
/// further shared training. In the fine-tuning scenario each test episode
/// is still fine-tuned, starting from these parameters.
pub fn run_eval(checkpoint: Option<&Checkpoint>, config: &ExperimentConfig, bank: &EmbeddingBank, keep_predictions: bool) -> Result<RunOutput> {
    config.validate()?;
    config.check_bank(bank)?;
    let opts = TrainOptions {
        resume: checkpoint.cloned(),
        ..TrainOptions::default()
    };
    let (params, _, epochs_done) = starting_state(config, bank, &opts)?;
    let t0 = Instant::now();
    let (loss_curve, evaluation, predictions) = match config.scenario {
        Scenario::NoBaseClasses => finetune_eval(&params, bank, config, keep_predictions)?,
        _ => {
            let (s, p) = evaluate_trained(&params, bank, config, keep_predictions)?;
            (Vec::new(), s, p)
        }
    };
    let training = TrainSummary {
        scenario: config.scenario,
        epochs_done,
        steps: params.step_count,
        loss_curve,
        validation: Vec::new(),
        params_digest: params_digest(&params),
    };
    Ok(RunOutput {
        report: report(config, bank, training, evaluation),
        checkpoint: None,
        predictions,
        timing: Timing {
            train_seconds: 0.0,
            eval_seconds: t0.elapsed().as_secs_f64(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_by_hand() {
        // mean 0.5, sample variance (0.01+0+0.01)/2 = 0.01.
        let ci = ci95(&[0.4, 0.5, 0.6]);
        assert!((ci - 1.96 * 0.1 / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(ci95(&[0.7]), 0.0);
    }
}
