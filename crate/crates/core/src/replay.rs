//! Prioritized experience replay over a ring buffer backed by a sum tree.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::Action;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Counterfactual,
}

/// One experience tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Action,
    pub r: f64,
    pub s_next: Vec<f64>,
    /// Terminal flag; time-limit truncation is not terminal.
    pub done: bool,
    pub provenance: Provenance,
}

impl Transition {
    pub fn new(s: Vec<f64>, a: Action, r: f64, s_next: Vec<f64>, done: bool, provenance: Provenance) -> Result<Self> {
        if s.len() != s_next.len() {
            return Err(Error::Shape(format!("state {} vs next state {}", s.len(), s_next.len())));
        }
        Ok(Transition { s, a, r, s_next, done, provenance })
    }

    pub fn real(s: Vec<f64>, a: Action, r: f64, s_next: Vec<f64>, done: bool) -> Result<Self> {
        Self::new(s, a, r, s_next, done, Provenance::Real)
    }
}

/// Binary sum tree over `capacity` leaves. Every internal node is recomputed
/// as the exact sum of its two children on each update.
#[derive(Debug, Clone)]
pub struct SumTree {
    leaves: usize,
    capacity: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let leaves = capacity.max(1).next_power_of_two();
        SumTree { leaves, capacity, nodes: vec![0.0; 2 * leaves] }
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.leaves + i]
    }

    pub fn set(&mut self, i: usize, value: f64) {
        debug_assert!(i < self.capacity);
        let mut k = self.leaves + i;
        self.nodes[k] = value;
        while k > 1 {
            k /= 2;
            self.nodes[k] = self.nodes[2 * k] + self.nodes[2 * k + 1];
        }
    }

    /// Leaf whose cumulative interval contains `mass ∈ [0, total)`.
    pub fn find(&self, mut mass: f64) -> usize {
        let mut k = 1;
        while k < self.leaves {
            let left = self.nodes[2 * k];
            if mass < left || self.nodes[2 * k + 1] <= 0.0 {
                k *= 2;
            } else {
                mass -= left;
                k = 2 * k + 1;
            }
        }
        let mut leaf = k - self.leaves;
        // Rounding can land on an empty leaf at the edge; walk back to mass.
        while leaf > 0 && self.get(leaf) <= 0.0 {
            leaf -= 1;
        }
        leaf
    }

    /// Recomputes every internal node bottom-up and compares exactly.
    pub fn audit(&self) -> bool {
        (1..self.leaves).rev().all(|k| self.nodes[k] == self.nodes[2 * k] + self.nodes[2 * k + 1])
            && (self.capacity..self.leaves).all(|i| self.get(i) == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerConfig {
    pub capacity: usize,
    /// Priority exponent: `P_i ∝ ω_i^alpha`. Zero gives uniform sampling.
    pub alpha: f64,
    /// Importance-weight exponent at the start of training.
    pub beta: f64,
    /// Importance-weight exponent reached at the end of training.
    pub beta_end: f64,
    pub prior_eps: f64,
}

impl Default for PerConfig {
    fn default() -> Self {
        PerConfig { capacity: 20_000, alpha: 0.2, beta: 0.6, beta_end: 1.0, prior_eps: 1e-6 }
    }
}

impl PerConfig {
    /// Settings that reduce the buffer to uniform replay with unit weights.
    pub fn uniform(capacity: usize) -> Self {
        PerConfig { capacity, alpha: 0.0, beta: 0.0, beta_end: 0.0, prior_eps: 1e-6 }
    }
}

#[derive(Debug, Clone)]
struct Slot {
    transition: Transition,
    raw_priority: f64,
    augmented: bool,
}

/// A sampled minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub transitions: Vec<Transition>,
    pub indices: Vec<usize>,
    /// Importance weights normalized by the batch maximum.
    pub weights: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Batch with unit weights, for callers that bypass the buffer.
    pub fn unweighted(transitions: Vec<Transition>) -> Self {
        let n = transitions.len();
        Batch { transitions, indices: (0..n).collect(), weights: vec![1.0; n] }
    }
}

/// Capacity-bounded prioritized pool with provenance tallies.
#[derive(Debug, Clone)]
pub struct PerBuffer {
    alpha: f64,
    beta: f64,
    prior_eps: f64,
    tree: SumTree,
    slots: Vec<Option<Slot>>,
    next: usize,
    len: usize,
    max_raw: f64,
    real: usize,
    counterfactual: usize,
}

/// Line of the experience dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DumpRecord {
    pub s: Vec<f64>,
    pub a: Action,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
    pub provenance: Provenance,
    pub priority: f64,
}

impl PerBuffer {
    pub fn new(cfg: &PerConfig) -> Result<Self> {
        if cfg.capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        if !(cfg.alpha >= 0.0) || !(0.0..=1.0).contains(&cfg.beta) || !(cfg.prior_eps > 0.0) {
            return Err(Error::Config(format!("invalid replay exponents {cfg:?}")));
        }
        Ok(PerBuffer {
            alpha: cfg.alpha,
            beta: cfg.beta,
            prior_eps: cfg.prior_eps,
            tree: SumTree::new(cfg.capacity),
            slots: vec![None; cfg.capacity],
            next: 0,
            len: 0,
            max_raw: 1.0,
            real: 0,
            counterfactual: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn fill_fraction(&self) -> f64 {
        self.len as f64 / self.capacity() as f64
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn set_beta(&mut self, beta: f64) {
        self.beta = beta.clamp(0.0, 1.0);
    }

    pub fn prior_eps(&self) -> f64 {
        self.prior_eps
    }

    /// Stores `t` at the running-max priority; evicts the oldest entry when full.
    pub fn push(&mut self, t: Transition) -> usize {
        let idx = self.next;
        if let Some(old) = self.slots[idx].take() {
            match old.transition.provenance {
                Provenance::Real => self.real -= 1,
                Provenance::Counterfactual => self.counterfactual -= 1,
            }
        } else {
            self.len += 1;
        }
        match t.provenance {
            Provenance::Real => self.real += 1,
            Provenance::Counterfactual => self.counterfactual += 1,
        }
        let raw = self.max_raw;
        self.slots[idx] = Some(Slot { transition: t, raw_priority: raw, augmented: false });
        self.tree.set(idx, raw.powf(self.alpha));
        self.next = (self.next + 1) % self.capacity();
        idx
    }

    pub fn get(&self, idx: usize) -> Option<&Transition> {
        self.slots.get(idx)?.as_ref().map(|s| &s.transition)
    }

    /// Sampling priority `ω_i^alpha` of slot `idx`.
    pub fn priority(&self, idx: usize) -> Option<f64> {
        self.slots.get(idx)?.as_ref().map(|_| self.tree.get(idx))
    }

    pub fn max_priority_seen(&self) -> f64 {
        self.max_raw
    }

    /// Probability that a single draw returns slot `idx`.
    pub fn probability(&self, idx: usize) -> Option<f64> {
        self.priority(idx).map(|p| p / self.tree.total())
    }

    /// Sets the raw priority `ω` of a slot directly.
    pub fn set_raw_priority(&mut self, idx: usize, raw: f64) -> Result<()> {
        if !(raw > 0.0) || !raw.is_finite() {
            return Err(Error::InvalidArgument(format!("priority {raw} must be positive and finite")));
        }
        let slot = self
            .slots
            .get_mut(idx)
            .and_then(Option::as_mut)
            .ok_or_else(|| Error::InvalidArgument(format!("replay index {idx} is empty or out of range")))?;
        slot.raw_priority = raw;
        self.max_raw = self.max_raw.max(raw);
        self.tree.set(idx, raw.powf(self.alpha));
        Ok(())
    }

    /// Draws `batch` indices independently with probability `ω_i^alpha / Σ ω^alpha`.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Batch> {
        if batch == 0 || self.len < batch {
            return Err(Error::Sampling(format!("cannot draw {batch} from a buffer holding {}", self.len)));
        }
        let total = self.tree.total();
        let mut indices = Vec::with_capacity(batch);
        let mut weights = Vec::with_capacity(batch);
        let mut transitions = Vec::with_capacity(batch);
        for _ in 0..batch {
            let idx = self.tree.find(rng.random::<f64>() * total);
            let p = self.tree.get(idx) / total;
            weights.push((1.0 / (self.len as f64 * p)).powf(self.beta));
            indices.push(idx);
            transitions.push(self.slots[idx].as_ref().expect("sampled slot is occupied").transition.clone());
        }
        let max = weights.iter().cloned().fold(f64::MIN, f64::max);
        weights.iter_mut().for_each(|w| *w /= max);
        Ok(Batch { transitions, indices, weights })
    }

    /// Sets `ω_i = |td_i| + prior_eps` for every sampled index.
    pub fn update_priorities(&mut self, indices: &[usize], td_errors: &[f64]) -> Result<()> {
        if indices.len() != td_errors.len() {
            return Err(Error::Shape(format!("{} indices vs {} errors", indices.len(), td_errors.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| self.slots.get(i).is_none_or(Option::is_none)) {
            return Err(Error::InvalidArgument(format!("replay index {bad} is empty or out of range")));
        }
        for (&i, td) in indices.iter().zip(td_errors) {
            if !td.is_finite() {
                return Err(Error::Numeric(format!("non-finite TD error {td}")));
            }
            self.set_raw_priority(i, td.abs() + self.prior_eps)?;
        }
        Ok(())
    }

    /// `(real, counterfactual)` tallies of stored transitions.
    pub fn counts(&self) -> (usize, usize) {
        (self.real, self.counterfactual)
    }

    pub fn audit(&self) -> bool {
        let leaves_match = self.slots.iter().enumerate().all(|(i, s)| match s {
            Some(slot) => self.tree.get(i) == slot.raw_priority.powf(self.alpha),
            None => self.tree.get(i) == 0.0,
        });
        leaves_match && self.tree.audit()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Transition)> {
        self.slots.iter().enumerate().filter_map(|(i, s)| s.as_ref().map(|s| (i, &s.transition)))
    }

    /// Real transitions that have not yet seeded an augmentation round.
    pub fn unaugmented_real(&self) -> Vec<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| match s {
                Some(s) if !s.augmented && s.transition.provenance == Provenance::Real => Some(i),
                _ => None,
            })
            .collect()
    }

    pub fn mark_augmented(&mut self, idx: usize) {
        if let Some(Some(slot)) = self.slots.get_mut(idx) {
            slot.augmented = true;
        }
    }

    pub fn dump_records(&self) -> Vec<DumpRecord> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| {
                s.as_ref().map(|s| {
                    let t = &s.transition;
                    DumpRecord {
                        s: t.s.clone(),
                        a: t.a.clone(),
                        r: t.r,
                        s_next: t.s_next.clone(),
                        done: t.done,
                        provenance: t.provenance,
                        priority: self.tree.get(i),
                    }
                })
            })
            .collect()
    }

    /// Writes one JSON object per stored transition.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for rec in self.dump_records() {
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn t(tag: f64, prov: Provenance) -> Transition {
        Transition::new(vec![tag], Action::Discrete(0), 0.0, vec![tag + 1.0], false, prov).unwrap()
    }

    fn buffer(capacity: usize, alpha: f64, beta: f64) -> PerBuffer {
        PerBuffer::new(&PerConfig { capacity, alpha, beta, beta_end: beta, prior_eps: 1e-6 }).unwrap()
    }

    #[test]
    fn push_and_evict() {
        let mut b = buffer(2, 0.2, 0.6);
        assert_eq!(b.counts(), (0, 0));
        b.push(t(0.0, Provenance::Real));
        assert_eq!(b.len(), 1);
        b.push(t(1.0, Provenance::Counterfactual));
        b.push(t(2.0, Provenance::Real));
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|(_, x)| x.s[0] != 0.0));
        assert_eq!(b.counts(), (1, 1));
        b.push(t(3.0, Provenance::Real));
        assert_eq!(b.counts(), (2, 0));
    }

    #[test]
    fn provenance_tallies() {
        let mut b = buffer(10, 0.2, 0.6);
        for k in 0..3 {
            b.push(t(k as f64, Provenance::Real));
        }
        for k in 0..2 {
            b.push(t(k as f64, Provenance::Counterfactual));
        }
        assert_eq!(b.counts(), (3, 2));
    }

    #[test]
    fn new_entries_take_running_max() {
        let mut b = buffer(4, 1.0, 0.6);
        let i = b.push(t(0.0, Provenance::Real));
        b.set_raw_priority(i, 5.0).unwrap();
        let j = b.push(t(1.0, Provenance::Real));
        assert_eq!(b.priority(j), Some(5.0));
        assert_eq!(b.max_priority_seen(), 5.0);
    }

    #[test]
    fn probabilities_and_weights() {
        let mut b = buffer(2, 1.0, 1.0);
        let i = b.push(t(0.0, Provenance::Real));
        let j = b.push(t(1.0, Provenance::Real));
        b.set_raw_priority(i, 3.0).unwrap();
        b.set_raw_priority(j, 1.0).unwrap();
        assert!((b.probability(i).unwrap() - 0.75).abs() < 1e-15);
        assert!((b.probability(j).unwrap() - 0.25).abs() < 1e-15);
        let mut rng = seeded(1);
        let batch = loop {
            let s = b.sample(2, &mut rng).unwrap();
            if s.indices.contains(&i) && s.indices.contains(&j) {
                break s;
            }
        };
        for (idx, w) in batch.indices.iter().zip(&batch.weights) {
            let want = if *idx == i { 1.0 / 3.0 } else { 1.0 };
            assert!((w - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_beta_gives_unit_weights_and_zero_alpha_is_uniform() {
        let mut b = buffer(8, 0.0, 0.0);
        for k in 0..8 {
            let i = b.push(t(k as f64, Provenance::Real));
            b.set_raw_priority(i, 1.0 + k as f64).unwrap();
        }
        for k in 0..8 {
            assert!((b.probability(k).unwrap() - 0.125).abs() < 1e-15);
        }
        let s = b.sample(8, &mut seeded(0)).unwrap();
        assert!(s.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn underfull_sample_fails() {
        let mut b = buffer(4, 0.2, 0.6);
        b.push(t(0.0, Provenance::Real));
        assert!(matches!(b.sample(2, &mut seeded(0)), Err(Error::Sampling(_))));
    }

    #[test]
    fn zero_td_keeps_positive_priority() {
        let mut b = buffer(4, 0.2, 0.6);
        let i = b.push(t(0.0, Provenance::Real));
        let j = b.push(t(1.0, Provenance::Real));
        b.update_priorities(&[i, j], &[0.0, 0.5]).unwrap();
        let pi = b.priority(i).unwrap();
        assert!((pi - 1e-6f64.powf(0.2)).abs() < 1e-15 && pi > 0.0);
        assert!(b.priority(j).unwrap() > pi);
        assert!(b.update_priorities(&[3], &[1.0]).is_err());
        assert!(b.update_priorities(&[99], &[1.0]).is_err());
    }

    #[test]
    fn audit_after_random_updates() {
        let mut b = buffer(37, 0.6, 0.4);
        let mut rng = seeded(77);
        for k in 0..10_000 {
            if k % 3 == 0 || b.len() < 2 {
                b.push(t(k as f64, Provenance::Real));
            } else {
                let i = rng.random_range(0..b.len());
                b.update_priorities(&[i], &[rng.random_range(-5.0..5.0)]).unwrap();
            }
        }
        assert!(b.audit());
    }

    #[test]
    fn jsonl_dump() {
        let mut b = buffer(4, 0.2, 0.6);
        b.push(t(0.0, Provenance::Real));
        b.push(t(1.0, Provenance::Counterfactual));
        let mut out = Vec::new();
        b.write_jsonl(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let rec: DumpRecord = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(rec.provenance, Provenance::Counterfactual);
        assert!(lines[0].contains("\"provenance\":\"real\""));
    }

    proptest! {
        #[test]
        fn root_equals_leaf_sum(ops in proptest::collection::vec((0usize..20, 0.0f64..10.0, any::<bool>()), 1..200)) {
            let mut b = buffer(16, 0.7, 0.5);
            for (i, v, push) in ops {
                if push || b.is_empty() {
                    b.push(t(v, Provenance::Real));
                } else {
                    let idx = i % b.len();
                    b.update_priorities(&[idx], &[v]).unwrap();
                }
            }
            let leaf_sum: f64 = (0..b.capacity()).filter_map(|i| b.priority(i)).sum();
            prop_assert!((b.tree.total() - leaf_sum).abs() <= 1e-9 * leaf_sum.max(1.0));
            prop_assert!(b.audit());
        }
    }
}
