//! Seeded multi-run training harness: transition-model pretraining, agent
//! training with scheduled augmentation, metric logging and summaries.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{Agent, DdpgAgent, DqnAgent};
use crate::cea::{AugmentRecord, Augmenter};
use crate::config::{AgentKind, ExperimentConfig};
use crate::envs::{make_env, EnvKind, Environment};
use crate::error::{Error, Result};
use crate::replay::{DumpRecord, PerBuffer, Transition};
use crate::rng::{stream, Stream};
use crate::sta::{collect_random_corpus, random_action, StaLoss, StaModel};

pub const EMA_FACTOR: f64 = 0.05;

/// `y₀ = x₀`, `yₜ = factor·xₜ + (1 − factor)·yₜ₋₁`.
pub fn ema_smooth(series: &[f64], factor: f64) -> Result<Vec<f64>> {
    let Some(&first) = series.first() else {
        return Err(Error::InvalidArgument("cannot smooth an empty series".into()));
    };
    let mut out = Vec::with_capacity(series.len());
    let mut y = first;
    out.push(y);
    for &x in &series[1..] {
        y += factor * (x - y);
        out.push(y);
    }
    Ok(out)
}

/// First episode (1-based) at which `smoothed` reaches `threshold`.
pub fn episodes_to_threshold(smoothed: &[f64], threshold: f64) -> Option<usize> {
    smoothed.iter().position(|v| *v >= threshold).map(|i| i + 1)
}

/// Per-episode record of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub ret: f64,
    pub steps: usize,
    pub real: usize,
    pub counterfactual: usize,
    pub epsilon: Option<f64>,
    pub mean_loss: Option<f64>,
    pub mean_q: Option<f64>,
}

/// Everything one seed produces.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub episodes: Vec<EpisodeLog>,
    pub augment_log: Vec<AugmentRecord>,
    pub sta_losses: Vec<StaLoss>,
    pub buffer: Vec<DumpRecord>,
}

impl SeedRun {
    pub fn returns(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.ret).collect()
    }
}

/// Aggregate statistics over seeds. `mean` and `std` pool every smoothed
/// point of every seed (population standard deviation); `final_value` is the
/// seed mean of each curve's last smoothed point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub seeds: Vec<u64>,
    pub returns: Vec<Vec<f64>>,
    pub smoothed: Vec<Vec<f64>>,
    pub mean: f64,
    pub std: f64,
    pub final_value: f64,
    pub band_min: Vec<f64>,
    pub band_max: Vec<f64>,
    pub counterfactual_counts: Vec<usize>,
    pub augment_calls: usize,
}

pub fn summarize(label: &str, runs: &[SeedRun]) -> Result<RunSummary> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("nothing to summarize".into()));
    }
    let returns: Vec<Vec<f64>> = runs.iter().map(|r| r.returns()).collect();
    summarize_returns(
        label,
        runs.iter().map(|r| r.seed).collect(),
        returns,
        runs.iter().map(|r| r.episodes.last().map_or(0, |e| e.counterfactual)).collect(),
        runs.iter().map(|r| r.augment_log.len()).sum(),
    )
}

/// Summary of raw per-seed return series.
pub fn summarize_returns(
    label: &str,
    seeds: Vec<u64>,
    returns: Vec<Vec<f64>>,
    counterfactual_counts: Vec<usize>,
    augment_calls: usize,
) -> Result<RunSummary> {
    if returns.is_empty() {
        return Err(Error::InvalidArgument("nothing to summarize".into()));
    }
    let smoothed: Vec<Vec<f64>> = returns.iter().map(|r| ema_smooth(r, EMA_FACTOR)).collect::<Result<_>>()?;
    let pooled: Vec<f64> = smoothed.iter().flatten().copied().collect();
    let n = pooled.len() as f64;
    let mean = pooled.iter().sum::<f64>() / n;
    let std = (pooled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let final_value = smoothed.iter().map(|s| *s.last().expect("non-empty")).sum::<f64>() / smoothed.len() as f64;
    let len = returns.iter().map(|r| r.len()).max().unwrap_or(0);
    let column = |t: usize| returns.iter().filter_map(move |r| r.get(t).copied());
    let band_min = (0..len).map(|t| column(t).fold(f64::INFINITY, f64::min)).collect();
    let band_max = (0..len).map(|t| column(t).fold(f64::NEG_INFINITY, f64::max)).collect();
    Ok(RunSummary {
        label: label.to_string(),
        seeds,
        returns,
        smoothed,
        mean,
        std,
        final_value,
        band_min,
        band_max,
        counterfactual_counts,
        augment_calls,
    })
}

fn load_or_pretrain_sta(cfg: &ExperimentConfig, env: &dyn Environment, seed: u64) -> Result<(StaModel, Vec<StaLoss>)> {
    if let Some(path) = &cfg.experiment.sta_checkpoint {
        let model = StaModel::load(path)?;
        if model.state_dim() != env.observation_dim() || model.action_space() != &env.action_space() {
            return Err(Error::Config(format!("checkpoint {} does not fit the {} environment", path.display(), env.name())));
        }
        if !model.is_trained() {
            return Err(Error::Config("checkpoint holds an untrained transition model".into()));
        }
        return Ok((model, Vec::new()));
    }
    let mut settings = cfg.env_settings();
    if cfg.experiment.sta_corpus_random_start {
        settings.gridworld.random_start = true;
    }
    pretrain_sta(&cfg.experiment.env, &settings, &cfg.sta, seed)
}

/// Pretrains a transition model on uniform-random transitions.
pub fn pretrain_sta(
    kind: &EnvKind,
    settings: &crate::envs::EnvSettings,
    sta_cfg: &crate::sta::StaConfig,
    seed: u64,
) -> Result<(StaModel, Vec<StaLoss>)> {
    let mut rng = stream(seed, Stream::Sta);
    let mut corpus_env = make_env(kind, settings)?;
    let corpus = collect_random_corpus(corpus_env.as_mut(), sta_cfg.corpus_size, &mut rng)?;
    let mut model = StaModel::new(corpus_env.observation_dim(), corpus_env.action_space(), sta_cfg, &mut rng)?;
    let losses = model.fit(&corpus, sta_cfg, &mut rng)?;
    Ok((model, losses))
}

fn make_agent(cfg: &ExperimentConfig, env: &dyn Environment, seed: u64) -> Result<Agent> {
    let mut init = stream(seed, Stream::Init);
    let space = env.action_space();
    match cfg.experiment.agent {
        AgentKind::Dqn => {
            let crate::space::ActionSpace::Discrete(k) = space else {
                return Err(Error::Config("DQN needs a discrete action space".into()));
            };
            let horizon = expected_steps(cfg);
            Ok(Agent::Dqn(DqnAgent::new(env.observation_dim(), k, cfg.dqn.clone(), horizon, &mut init)?))
        }
        AgentKind::Ddpg => Ok(Agent::Ddpg(DdpgAgent::new(env.observation_dim(), &space, cfg.ddpg.clone(), &mut init)?)),
    }
}

fn expected_steps(cfg: &ExperimentConfig) -> u64 {
    let per_episode = match cfg.experiment.env {
        EnvKind::Gridworld => cfg.gridworld.max_steps,
        EnvKind::Pendulum => cfg.pendulum.max_steps,
        EnvKind::Highway => cfg.highway.max_steps,
    };
    (per_episode * cfg.experiment.episodes) as u64
}

/// Trains one seed end to end.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    cfg.validate()?;
    let e = &cfg.experiment;
    let mut env = make_env(&e.env, &cfg.env_settings())?;
    let space = env.action_space();
    let mut env_rng = stream(seed, Stream::Env);
    let mut agent_rng = stream(seed, Stream::Agent);
    let mut replay_rng = stream(seed, Stream::Replay);
    let mut sampler_rng = stream(seed, Stream::Sampler);

    let (sta, sta_losses) = if e.cea {
        let (model, losses) = load_or_pretrain_sta(cfg, env.as_ref(), seed)?;
        (Some(model), losses)
    } else {
        (None, Vec::new())
    };
    let mut agent = make_agent(cfg, env.as_ref(), seed)?;
    let replay_cfg = cfg.replay_config();
    let mut buffer = PerBuffer::new(&replay_cfg)?;
    let mut augmenter = Augmenter::new(cfg.cea.clone())?;
    let sampler = cfg.sampler_config(&space);
    let batch_size = agent.batch_size();
    let learning_starts = e.learning_starts.max(batch_size);

    let mut episodes = Vec::with_capacity(e.episodes);
    let mut total_steps = 0usize;
    for ep in 0..e.episodes {
        if e.episodes > 1 {
            let frac = ep as f64 / (e.episodes - 1) as f64;
            buffer.set_beta(replay_cfg.beta + frac * (replay_cfg.beta_end - replay_cfg.beta));
        }
        let mut s = env.reset(env_rng.random());
        let (mut ret, mut steps) = (0.0, 0usize);
        let (mut loss_sum, mut q_sum, mut updates) = (0.0, 0.0, 0usize);
        loop {
            let a = if total_steps < e.random_steps {
                random_action(&space, &mut agent_rng)
            } else {
                agent.act(&s, true, &mut agent_rng)?
            };
            let step = env.step(&a)?;
            ret += step.reward;
            steps += 1;
            total_steps += 1;
            buffer.push(Transition::real(s, a, step.reward, step.state.clone(), step.terminated)?);
            if buffer.len() >= learning_starts {
                for _ in 0..e.updates_per_step {
                    let batch = buffer.sample(batch_size, &mut replay_rng)?;
                    let stats = agent.learn_step(&batch)?;
                    if e.per {
                        buffer.update_priorities(&batch.indices, &stats.td_abs)?;
                    }
                    loss_sum += stats.loss;
                    q_sum += stats.mean_q;
                    updates += 1;
                }
            }
            if step.done() {
                break;
            }
            s = step.state;
        }
        if let Some(sta) = &sta {
            let (real, _) = buffer.counts();
            if (ep + 1) % cfg.cea.augment_period == 0 && real >= cfg.cea.base_batch {
                let project_env = &env;
                let project = |x: &mut [f64]| project_env.project_state(x);
                augmenter.augment(&mut buffer, sta, &sampler, &project, ep + 1, &mut sampler_rng)?;
            }
        }
        let (real, counterfactual) = buffer.counts();
        episodes.push(EpisodeLog {
            episode: ep + 1,
            ret,
            steps,
            real,
            counterfactual,
            epsilon: agent.epsilon(),
            mean_loss: (updates > 0).then(|| loss_sum / updates as f64),
            mean_q: (updates > 0).then(|| q_sum / updates as f64),
        });
        log::debug!("seed {seed} episode {} return {ret:.3}", ep + 1);
    }
    Ok(SeedRun {
        seed,
        episodes,
        augment_log: augmenter.log().to_vec(),
        sta_losses,
        buffer: if e.dump_priorities { buffer.dump_records() } else { Vec::new() },
    })
}

/// Output of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct Experiment {
    pub runs: Vec<SeedRun>,
    pub summary: RunSummary,
}

/// Runs every seed (in parallel when threads are available), writes the
/// output files into `cfg.experiment.out_dir` and returns the summary.
pub fn run_experiment(cfg: &ExperimentConfig, label: &str) -> Result<Experiment> {
    let runs = run_seeds(cfg)?;
    let summary = summarize(label, &runs)?;
    write_outputs(&cfg.experiment.out_dir, &runs, &summary)?;
    Ok(Experiment { runs, summary })
}

/// Runs every seed without writing anything.
pub fn run_seeds(cfg: &ExperimentConfig) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    cfg.experiment.seeds.par_iter().map(|&seed| run_seed(cfg, seed)).collect()
}

pub const ABLATION_LABELS: [&str; 4] = ["backbone", "backbone+PER", "backbone+CEA", "backbone+CEA+PER"];

/// Backbone, +PER, +CEA and +CEA+PER variants of `base`, sharing its seeds.
pub fn ablation_configs(base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    ABLATION_LABELS
        .iter()
        .map(|label| {
            let mut cfg = base.clone();
            cfg.experiment.cea = label.contains("CEA");
            cfg.experiment.per = label.contains("PER");
            cfg.experiment.out_dir = base.experiment.out_dir.join(label.replace('+', "_"));
            (label.to_string(), cfg)
        })
        .collect()
}

pub fn ablation_grid(base: &ExperimentConfig) -> Result<Vec<RunSummary>> {
    base.validate()?;
    let mut out = Vec::with_capacity(4);
    for (label, cfg) in ablation_configs(base) {
        out.push(run_experiment(&cfg, &label)?.summary);
    }
    fs::create_dir_all(&base.experiment.out_dir)?;
    let file = BufWriter::new(File::create(base.experiment.out_dir.join("ablation.json"))?);
    serde_json::to_writer_pretty(file, &out)?;
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_returns_csv<W: Write>(run: &SeedRun, mut out: W) -> Result<()> {
    writeln!(out, "episode,return,steps,real,counterfactual,epsilon,mean_loss,mean_q")?;
    for e in &run.episodes {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            e.episode,
            e.ret,
            e.steps,
            e.real,
            e.counterfactual,
            fmt_opt(e.epsilon),
            fmt_opt(e.mean_loss),
            fmt_opt(e.mean_q)
        )?;
    }
    Ok(())
}

/// Reads the `return` column of a returns CSV.
pub fn read_returns_csv(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::InvalidArgument(format!("{} is empty", path.display())))?;
    let col = header
        .split(',')
        .position(|h| h == "return")
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no return column", path.display())))?;
    lines
        .map(|l| {
            l.split(',')
                .nth(col)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::InvalidArgument(format!("malformed row '{l}'")))
        })
        .collect()
}

/// Priority dump line, tagged with its seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeededDump {
    pub seed: u64,
    #[serde(flatten)]
    pub record: DumpRecord,
}

pub fn write_outputs(dir: &Path, runs: &[SeedRun], summary: &RunSummary) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for run in runs {
        let path = dir.join(format!("returns_{}.csv", run.seed));
        write_returns_csv(run, BufWriter::new(File::create(&path)?))?;
        written.push(path);
    }

    let path = dir.join("augment_log.csv");
    let mut out = BufWriter::new(File::create(&path)?);
    writeln!(out, "seed,call,episode,candidates,retained,added,real,counterfactual")?;
    for run in runs {
        for r in &run.augment_log {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                run.seed, r.call, r.episode, r.candidates, r.retained, r.added, r.real, r.counterfactual
            )?;
        }
    }
    out.flush()?;
    written.push(path);

    let path = dir.join("sta_loss.csv");
    let mut out = BufWriter::new(File::create(&path)?);
    writeln!(out, "seed,step,recon,kl,total")?;
    for run in runs {
        for (i, l) in run.sta_losses.iter().enumerate() {
            writeln!(out, "{},{i},{},{},{}", run.seed, l.recon, l.kl, l.total)?;
        }
    }
    out.flush()?;
    written.push(path);

    let path = dir.join("priorities_dump.jsonl");
    let mut out = BufWriter::new(File::create(&path)?);
    for run in runs {
        for rec in &run.buffer {
            serde_json::to_writer(&mut out, &SeededDump { seed: run.seed, record: rec.clone() })?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    written.push(path);

    let path = dir.join("summary.json");
    let mut out = BufWriter::new(File::create(&path)?);
    serde_json::to_writer_pretty(&mut out, summary)?;
    out.write_all(b"\n")?;
    out.flush()?;
    written.push(path);
    Ok(written)
}

/// Jensen–Shannon divergence (base 2) between two histograms over shared bins.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Shape(format!("histograms of {} and {} bins", p.len(), q.len())));
    }
    let (sp, sq) = (p.iter().sum::<f64>(), q.iter().sum::<f64>());
    if !(sp > 0.0 && sq > 0.0) {
        return Err(Error::InvalidArgument("histograms need positive mass".into()));
    }
    let kl = |a: &[f64], sa: f64, m: &[f64]| {
        a.iter().zip(m).filter(|(x, _)| **x > 0.0).map(|(x, m)| (x / sa) * ((x / sa) / m).log2()).sum::<f64>()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a / sp + b / sq)).collect();
    Ok(0.5 * kl(p, sp, &m) + 0.5 * kl(q, sq, &m))
}

/// Counts of `values` in `bins` equal-width bins spanning `[lo, hi]`.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    let width = (hi - lo) / bins as f64;
    for v in values {
        let i = if width > 0.0 { ((v - lo) / width).floor() as isize } else { 0 };
        h[i.clamp(0, bins as isize - 1) as usize] += 1.0;
    }
    h
}
