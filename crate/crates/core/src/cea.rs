//! Counterfactual experience augmentation.
//!
//! Each augmentation round draws real experiences that have not seeded a
//! round yet, proposes alternative actions, predicts where those actions lead
//! with the transition model, and labels the predicted transitions with the
//! reward of the closest real transition (the closest transition pair).

use std::io::Write;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kde::{enumerate_discrete_counterfactuals, optimize_candidates, SamplerConfig};
use crate::replay::{PerBuffer, Provenance, Transition};
use crate::space::{Action, ActionSpace};
use crate::sta::StaModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    Euclidean,
    Manhattan,
}

impl DistanceMetric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            DistanceMetric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            DistanceMetric::Manhattan => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CeaConfig {
    pub threshold_ratio: f64,
    pub distance_metric: DistanceMetric,
    /// Episodes between augmentation rounds.
    pub augment_period: usize,
    /// Real experiences drawn per round.
    pub base_batch: usize,
    /// Initial per-round injection cap; `None` means four times `base_batch`.
    pub injection_cap: Option<usize>,
    pub anneal_decay: f64,
    pub stop_at_fill_fraction: f64,
    /// Scale each state axis by the real pool's standard deviation before matching.
    pub normalize: bool,
    /// Snap generated states onto the environment's state manifold.
    pub project: bool,
}

impl Default for CeaConfig {
    fn default() -> Self {
        CeaConfig {
            threshold_ratio: 0.1,
            distance_metric: DistanceMetric::Euclidean,
            augment_period: 5,
            base_batch: 32,
            injection_cap: None,
            anneal_decay: 0.9,
            stop_at_fill_fraction: 0.9,
            normalize: false,
            project: true,
        }
    }
}

impl CeaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_ratio > 0.0 && self.threshold_ratio <= 1.0) {
            return Err(Error::Config(format!("threshold_ratio {} outside (0, 1]", self.threshold_ratio)));
        }
        if !(self.anneal_decay > 0.0 && self.anneal_decay < 1.0) {
            return Err(Error::Config(format!("anneal_decay {} outside (0, 1)", self.anneal_decay)));
        }
        if !(self.stop_at_fill_fraction > 0.0 && self.stop_at_fill_fraction <= 1.0) {
            return Err(Error::Config(format!("stop_at_fill_fraction {} outside (0, 1]", self.stop_at_fill_fraction)));
        }
        if self.base_batch == 0 || self.augment_period == 0 {
            return Err(Error::Config("base_batch and augment_period must be positive".into()));
        }
        Ok(())
    }

    pub fn initial_cap(&self) -> usize {
        self.injection_cap.unwrap_or(4 * self.base_batch)
    }
}

/// Counterfactual `counterfactual` paired with real transition `real`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtpMatch {
    pub counterfactual: usize,
    pub real: usize,
    pub distance: f64,
    pub reward: f64,
}

/// `⌈ratio × count⌉`, robust to representation error in the product.
pub fn retained_count(ratio: f64, count: usize) -> usize {
    ((ratio * count as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Nearest real next state for each counterfactual, closest first, keeping
/// the closest `⌈threshold_ratio × count⌉`. Ties resolve to the lowest index.
pub fn ctp_match(
    counterfactual_next: &[Vec<f64>],
    real_next: &[Vec<f64>],
    real_rewards: &[f64],
    cfg: &CeaConfig,
) -> Result<Vec<CtpMatch>> {
    ctp_match_scaled(counterfactual_next, real_next, real_rewards, cfg, None)
}

fn ctp_match_scaled(
    counterfactual_next: &[Vec<f64>],
    real_next: &[Vec<f64>],
    real_rewards: &[f64],
    cfg: &CeaConfig,
    scale: Option<&[f64]>,
) -> Result<Vec<CtpMatch>> {
    if real_next.is_empty() {
        return Err(Error::Match("real pool is empty".into()));
    }
    if real_next.len() != real_rewards.len() {
        return Err(Error::Shape(format!("{} real states but {} rewards", real_next.len(), real_rewards.len())));
    }
    if counterfactual_next.is_empty() {
        return Ok(Vec::new());
    }
    let dim = real_next[0].len();
    if let Some(bad) = real_next.iter().chain(counterfactual_next).find(|s| s.len() != dim) {
        return Err(Error::Shape(format!("state of length {} in a pool of dimension {dim}", bad.len())));
    }
    let rescale = |s: &[f64]| -> Vec<f64> {
        match scale {
            Some(k) => s.iter().zip(k).map(|(v, k)| v / k).collect(),
            None => s.to_vec(),
        }
    };
    let pool: Vec<Vec<f64>> = real_next.iter().map(|s| rescale(s)).collect();
    let mut matches: Vec<CtpMatch> = counterfactual_next
        .par_iter()
        .enumerate()
        .map(|(c, s)| {
            let q = rescale(s);
            let (real, distance) = pool
                .iter()
                .enumerate()
                .map(|(i, p)| (i, cfg.distance_metric.distance(&q, p)))
                .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
            CtpMatch { counterfactual: c, real, distance, reward: real_rewards[real] }
        })
        .collect();
    matches.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    matches.truncate(retained_count(cfg.threshold_ratio, counterfactual_next.len()));
    Ok(matches)
}

/// Done flag for a counterfactual matched to `real`.
pub fn done_flag_policy(real: &Transition) -> bool {
    real.done
}

/// One augmentation round, as written to the augment log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub call: usize,
    pub episode: usize,
    pub candidates: usize,
    pub retained: usize,
    pub added: usize,
    pub real: usize,
    pub counterfactual: usize,
}

/// Augmentation state carried across rounds.
#[derive(Debug, Clone)]
pub struct Augmenter {
    cfg: CeaConfig,
    cap: f64,
    calls: usize,
    log: Vec<AugmentRecord>,
}

impl Augmenter {
    pub fn new(cfg: CeaConfig) -> Result<Self> {
        cfg.validate()?;
        let cap = cfg.initial_cap() as f64;
        Ok(Augmenter { cfg, cap, calls: 0, log: Vec::new() })
    }

    pub fn config(&self) -> &CeaConfig {
        &self.cfg
    }

    /// Injection cap for the next round.
    pub fn current_cap(&self) -> usize {
        self.cap.floor() as usize
    }

    pub fn calls(&self) -> usize {
        self.calls
    }

    pub fn log(&self) -> &[AugmentRecord] {
        &self.log
    }

    /// Runs one round and returns the number of counterfactuals added.
    /// `project` maps generated states onto the environment's state manifold.
    pub fn augment<R: Rng + ?Sized>(
        &mut self,
        buffer: &mut PerBuffer,
        sta: &StaModel,
        sampler: &SamplerConfig,
        project: &dyn Fn(&mut [f64]),
        episode: usize,
        rng: &mut R,
    ) -> Result<usize> {
        if !sta.is_trained() {
            return Err(Error::Config("transition model must be pretrained before augmentation".into()));
        }
        let (real_count, _) = buffer.counts();
        if real_count < self.cfg.base_batch {
            return Err(Error::State(format!(
                "augmentation needs {} real transitions, buffer holds {real_count}",
                self.cfg.base_batch
            )));
        }
        let cap = self.current_cap();
        self.cap *= self.cfg.anneal_decay;
        let call = self.calls;
        self.calls += 1;

        let mut record = AugmentRecord { call, episode, candidates: 0, retained: 0, added: 0, real: 0, counterfactual: 0 };
        if buffer.fill_fraction() < self.cfg.stop_at_fill_fraction {
            let (candidates, matches) = self.propose(buffer, sta, sampler, project, rng)?;
            let added = matches.len().min(cap);
            record.candidates = candidates.len();
            record.retained = matches.len();
            record.added = added;
            let transitions: Vec<Transition> = matches[..added]
                .iter()
                .map(|m| {
                    let (s, a, s_next) = &candidates[m.counterfactual];
                    let real = buffer.get(m.real).expect("matched slot is occupied");
                    Transition::new(s.clone(), a.clone(), m.reward, s_next.clone(), done_flag_policy(real), Provenance::Counterfactual)
                })
                .collect::<Result<_>>()?;
            for t in transitions {
                buffer.push(t);
            }
        }
        let (real, counterfactual) = buffer.counts();
        record.real = real;
        record.counterfactual = counterfactual;
        self.log.push(record);
        Ok(record.added)
    }

    /// Counterfactual `(s, â, ŝ')` candidates and their retained matches, whose
    /// `real` fields are buffer slot indices.
    #[allow(clippy::type_complexity)]
    fn propose<R: Rng + ?Sized>(
        &self,
        buffer: &mut PerBuffer,
        sta: &StaModel,
        sampler: &SamplerConfig,
        project: &dyn Fn(&mut [f64]),
        rng: &mut R,
    ) -> Result<(Vec<(Vec<f64>, Action, Vec<f64>)>, Vec<CtpMatch>)> {
        let fresh = buffer.unaugmented_real();
        let take = self.cfg.base_batch.min(fresh.len());
        let mut seeds: Vec<usize> = sample_indices(rng, fresh.len(), take).into_iter().map(|i| fresh[i]).collect();
        seeds.sort_unstable();

        let space = sta.action_space().clone();
        let mut queries: Vec<(Vec<f64>, Action)> = Vec::new();
        for &idx in &seeds {
            let t = buffer.get(idx).expect("seed slot is occupied");
            for a in counterfactual_actions(&space, &t.a, sampler, rng)? {
                queries.push((t.s.clone(), a));
            }
            buffer.mark_augmented(idx);
        }
        let refs: Vec<(&[f64], &Action)> = queries.iter().map(|(s, a)| (s.as_slice(), a)).collect();
        let mut generated = sta.generate_batch(&refs, rng)?;
        if self.cfg.project {
            generated.iter_mut().for_each(|s| project(s));
        }
        let candidates: Vec<(Vec<f64>, Action, Vec<f64>)> =
            queries.into_iter().zip(generated).map(|((s, a), s_next)| (s, a, s_next)).collect();

        let mut slots = Vec::new();
        let mut real_next = Vec::new();
        let mut real_rewards = Vec::new();
        for (i, t) in buffer.iter() {
            if t.provenance == Provenance::Real {
                slots.push(i);
                real_next.push(t.s_next.clone());
                real_rewards.push(t.r);
            }
        }
        let scale = self.cfg.normalize.then(|| axis_scales(&real_next));
        let cf_next: Vec<Vec<f64>> = candidates.iter().map(|c| c.2.clone()).collect();
        let mut matches = ctp_match_scaled(&cf_next, &real_next, &real_rewards, &self.cfg, scale.as_deref())?;
        for m in &mut matches {
            m.real = slots[m.real];
        }
        Ok((candidates, matches))
    }
}

/// Alternative actions for one real experience: every other action in a
/// discrete space, entropy-maximizing candidates in a continuous one.
pub fn counterfactual_actions<R: Rng + ?Sized>(
    space: &ActionSpace,
    taken: &Action,
    sampler: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<Action>> {
    space.check(taken)?;
    match (space, taken) {
        (ActionSpace::Discrete(k), Action::Discrete(a)) => {
            Ok(enumerate_discrete_counterfactuals(*a, *k)?.into_iter().map(Action::Discrete).collect())
        }
        (ActionSpace::Continuous { .. }, Action::Continuous(a)) => {
            Ok(optimize_candidates(&[a.clone()], sampler, rng)?.into_iter().map(Action::Continuous).collect())
        }
        _ => Err(Error::InvalidArgument("action does not belong to the action space".into())),
    }
}

fn axis_scales(states: &[Vec<f64>]) -> Vec<f64> {
    let n = states.len() as f64;
    let dim = states.first().map_or(0, |s| s.len());
    (0..dim)
        .map(|k| {
            let mean = states.iter().map(|s| s[k]).sum::<f64>() / n;
            let var = states.iter().map(|s| (s[k] - mean).powi(2)).sum::<f64>() / n;
            if var > 0.0 { var.sqrt() } else { 1.0 }
        })
        .collect()
}

/// Writes `call,episode,candidates,retained,added,real,counterfactual` rows.
pub fn write_augment_log<W: Write>(log: &[AugmentRecord], mut out: W) -> Result<()> {
    writeln!(out, "call,episode,candidates,retained,added,real,counterfactual")?;
    for r in log {
        writeln!(out, "{},{},{},{},{},{},{}", r.call, r.episode, r.candidates, r.retained, r.added, r.real, r.counterfactual)?;
    }
    Ok(())
}
