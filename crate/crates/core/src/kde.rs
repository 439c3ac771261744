//! Counterfactual action sampling by entropy maximization of a Gaussian
//! kernel density.
//!
//! The density is built over the union of the known actions and a set of
//! movable candidates. Candidates climb the gradient of the density's
//! differential entropy, which pushes them into regions the known actions
//! leave empty. One- and two-dimensional spaces integrate the entropy with
//! the (tensor-product) trapezoid rule on a fixed grid; higher dimensions use
//! a Monte-Carlo estimate with frozen standard-normal draws so that the
//! objective stays a deterministic function of the candidate positions.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

const TINY: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientMode {
    /// Gradient of the integrated entropy estimate, with the true log-density.
    Exact,
    /// The closed-form expression in which `log p` is replaced by the sum of
    /// the individual kernel exponents and the kernel derivative carries a
    /// negative sign. Kept for comparison only.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Number of candidates placed per known action.
    pub n_samples: usize,
    pub lr: f64,
    pub iters: usize,
    /// Grid points per axis for the trapezoid rule.
    pub grid_m: usize,
    /// Per-axis `[low, high]` box the candidates live in.
    pub bounds: Vec<[f64; 2]>,
    pub gradient_mode: GradientMode,
    /// Halve rejected steps (up to five times) so entropy never decreases.
    pub backtracking: bool,
    /// Fixed bandwidth; `None` applies Silverman's rule with a floor to the known actions.
    pub bandwidth: Option<f64>,
    /// Monte-Carlo draws per kernel when the action space has more than two axes.
    pub mc_samples: usize,
    pub mc_seed: u64,
    /// Integration grid margin beyond `bounds`, in bandwidths.
    pub padding: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_samples: 3,
            lr: 0.5,
            iters: 100,
            grid_m: 128,
            bounds: vec![[-1.0, 1.0]],
            gradient_mode: GradientMode::Exact,
            backtracking: true,
            bandwidth: None,
            mc_samples: 64,
            mc_seed: 0,
            padding: 4.0,
        }
    }
}

impl SamplerConfig {
    /// Defaults for an action box: three candidates in 1-D, nine otherwise.
    pub fn for_bounds(bounds: Vec<[f64; 2]>) -> Self {
        let n_samples = if bounds.len() == 1 { 3 } else { 9 };
        let grid_m = if bounds.len() == 1 { 128 } else { 48 };
        SamplerConfig { n_samples, grid_m, bounds, ..Default::default() }
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bounds.is_empty() {
            return Err(Error::Config("sampler needs at least one axis".into()));
        }
        if let Some(b) = self.bounds.iter().find(|b| !(b[0] < b[1])) {
            return Err(Error::Config(format!("sampler bounds {b:?} need low < high")));
        }
        if self.dim() <= 2 && self.grid_m < 8 {
            return Err(Error::Config(format!("grid_m {} is below the minimum of 8", self.grid_m)));
        }
        if self.dim() > 2 && self.mc_samples == 0 {
            return Err(Error::Config("Monte-Carlo entropy needs mc_samples > 0".into()));
        }
        if !(self.padding >= 0.0) {
            return Err(Error::Config(format!("padding {} must be non-negative", self.padding)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("sampler lr {} must be positive", self.lr)));
        }
        if matches!(self.bandwidth, Some(h) if !(h > 0.0)) {
            return Err(Error::Config("bandwidth must be positive".into()));
        }
        Ok(())
    }

    fn clip(&self, x: &mut [f64]) {
        for (v, b) in x.iter_mut().zip(&self.bounds) {
            *v = v.clamp(b[0], b[1]);
        }
    }
}

/// Gaussian product-kernel density over known actions followed by candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeModel {
    centers: Vec<Vec<f64>>,
    n_known: usize,
    bandwidth: f64,
}

impl KdeModel {
    pub fn new(centers: Vec<Vec<f64>>, n_known: usize, bandwidth: f64) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::InvalidArgument("density needs at least one center".into()));
        }
        if !(bandwidth > 0.0) {
            return Err(Error::InvalidArgument(format!("bandwidth {bandwidth} must be positive")));
        }
        let dim = centers[0].len();
        if dim == 0 || centers.iter().any(|c| c.len() != dim) {
            return Err(Error::Shape("density centers must share one positive dimension".into()));
        }
        if n_known > centers.len() {
            return Err(Error::InvalidArgument("more known centers than centers".into()));
        }
        Ok(KdeModel { centers, n_known, bandwidth })
    }

    /// Density with every center fixed (no candidates).
    pub fn of_points(points: Vec<Vec<f64>>, bandwidth: f64) -> Result<Self> {
        let n = points.len();
        Self::new(points, n, bandwidth)
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    pub fn candidates(&self) -> &[Vec<f64>] {
        &self.centers[self.n_known..]
    }

    pub fn n_candidates(&self) -> usize {
        self.centers.len() - self.n_known
    }

    pub fn set_candidate(&mut self, which: usize, x: Vec<f64>) -> Result<()> {
        if which >= self.n_candidates() || x.len() != self.dim() {
            return Err(Error::InvalidArgument(format!("candidate {which} of {}", self.n_candidates())));
        }
        self.centers[self.n_known + which] = x;
        Ok(())
    }

    fn norm(&self) -> f64 {
        (self.bandwidth * (2.0 * PI).sqrt()).powi(self.dim() as i32)
    }

    /// Unnormalized kernel `exp(-|x-c|² / 2h²)` of center `i`.
    fn kernel(&self, i: usize, x: &[f64]) -> f64 {
        let h2 = self.bandwidth * self.bandwidth;
        let d2: f64 = x.iter().zip(&self.centers[i]).map(|(a, b)| (a - b) * (a - b)).sum();
        (-d2 / (2.0 * h2)).exp()
    }

    /// `p(x) = (1/|A|) Σ_i Π_k N(x_k; a_ik, h²)`.
    pub fn density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("point of dim {} for a {}-d density", x.len(), self.dim())));
        }
        Ok(self.density_unchecked(x))
    }

    fn density_unchecked(&self, x: &[f64]) -> f64 {
        let s: f64 = (0..self.centers.len()).map(|i| self.kernel(i, x)).sum();
        s / (self.centers.len() as f64 * self.norm())
    }
}

/// Silverman's rule on `points`, floored at a tenth of the narrowest box side.
pub fn silverman_bandwidth(points: &[Vec<f64>], bounds: &[[f64; 2]]) -> f64 {
    let d = bounds.len();
    let n = points.len();
    let floor = 0.1 * bounds.iter().map(|b| b[1] - b[0]).fold(f64::INFINITY, f64::min);
    if n < 2 {
        return floor;
    }
    let mut sigma = 0.0;
    for k in 0..d {
        let mean = points.iter().map(|p| p[k]).sum::<f64>() / n as f64;
        let var = points.iter().map(|p| (p[k] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        sigma += var.sqrt();
    }
    sigma /= d as f64;
    let h = sigma * (4.0 / ((d as f64 + 2.0) * n as f64)).powf(1.0 / (d as f64 + 4.0));
    h.max(floor)
}

/// Integration nodes along each axis: the box widened by four bandwidths.
fn axis_nodes(cfg: &SamplerConfig, h: f64) -> Vec<(Vec<f64>, Vec<f64>)> {
    cfg.bounds
        .iter()
        .map(|b| {
            let (lo, hi) = (b[0] - cfg.padding * h, b[1] + cfg.padding * h);
            let m = cfg.grid_m;
            let xs: Vec<f64> = (0..m).map(|j| lo + (hi - lo) * j as f64 / (m - 1) as f64).collect();
            // trapezoid weights: Σ_j (x_j - x_{j-1})/2 · (y_j + y_{j-1})
            let mut ws = vec![0.0; m];
            for j in 1..m {
                let half = 0.5 * (xs[j] - xs[j - 1]);
                ws[j] += half;
                ws[j - 1] += half;
            }
            (xs, ws)
        })
        .collect()
}

/// Calls `f(x, weight)` on every node of the tensor-product grid.
fn for_each_node(nodes: &[(Vec<f64>, Vec<f64>)], mut f: impl FnMut(&[f64], f64)) {
    match nodes.len() {
        1 => {
            for (x, w) in nodes[0].0.iter().zip(&nodes[0].1) {
                f(&[*x], *w);
            }
        }
        2 => {
            let mut pt = [0.0; 2];
            for (x, wx) in nodes[0].0.iter().zip(&nodes[0].1) {
                for (y, wy) in nodes[1].0.iter().zip(&nodes[1].1) {
                    pt[0] = *x;
                    pt[1] = *y;
                    f(&pt, wx * wy);
                }
            }
        }
        _ => unreachable!("grid integration is limited to two axes"),
    }
}

fn check_dims(model: &KdeModel, cfg: &SamplerConfig) -> Result<()> {
    cfg.validate()?;
    if model.dim() != cfg.dim() {
        return Err(Error::Shape(format!("density dim {} vs sampler dim {}", model.dim(), cfg.dim())));
    }
    Ok(())
}

/// Frozen standard-normal offsets, `mc_samples` per center.
fn mc_offsets(model: &KdeModel, cfg: &SamplerConfig) -> Vec<Vec<Vec<f64>>> {
    let mut rng = seeded(cfg.mc_seed);
    (0..model.centers.len())
        .map(|_| (0..cfg.mc_samples).map(|_| (0..model.dim()).map(|_| rng.sample(StandardNormal)).collect()).collect())
        .collect()
}

/// Differential entropy estimate `H = -∫ p log p`.
pub fn entropy(model: &KdeModel, cfg: &SamplerConfig) -> Result<f64> {
    check_dims(model, cfg)?;
    if model.dim() <= 2 {
        let nodes = axis_nodes(cfg, model.bandwidth);
        let mut h = 0.0;
        for_each_node(&nodes, |x, w| {
            let p = model.density_unchecked(x);
            if p > TINY {
                h -= w * p * p.ln();
            }
        });
        Ok(h)
    } else {
        let offsets = mc_offsets(model, cfg);
        let mut acc = 0.0;
        let mut n = 0usize;
        let mut x = vec![0.0; model.dim()];
        for (i, eps) in offsets.iter().enumerate() {
            for e in eps {
                for k in 0..x.len() {
                    x[k] = model.centers[i][k] + model.bandwidth * e[k];
                }
                acc -= model.density_unchecked(&x).max(TINY).ln();
                n += 1;
            }
        }
        Ok(acc / n as f64)
    }
}

/// Gradient of [`entropy`] with respect to candidate `which`.
pub fn grad_entropy(model: &KdeModel, cfg: &SamplerConfig, which: usize) -> Result<Vec<f64>> {
    check_dims(model, cfg)?;
    if which >= model.n_candidates() {
        return Err(Error::InvalidArgument(format!("candidate {which} of {}", model.n_candidates())));
    }
    let c = model.n_known + which;
    let d = model.dim();
    let h2 = model.bandwidth * model.bandwidth;
    let n = model.centers.len() as f64;
    let mut g = vec![0.0; d];
    if d <= 2 {
        let nodes = axis_nodes(cfg, model.bandwidth);
        let cand = &model.centers[c];
        match cfg.gradient_mode {
            GradientMode::Exact => for_each_node(&nodes, |x, w| {
                let p = model.density_unchecked(x);
                if p <= TINY {
                    return;
                }
                // ∂p/∂â_k = K_â(x) (x_k - â_k) / (|A| norm h²)
                let kc = model.kernel(c, x) / (n * model.norm() * h2);
                let factor = -w * (p.ln() + 1.0) * kc;
                for k in 0..d {
                    g[k] += factor * (x[k] - cand[k]);
                }
            }),
            GradientMode::Paper => {
                let log_norm = (n * model.norm()).ln();
                for_each_node(&nodes, |x, w| {
                    let exps: f64 = model
                        .centers
                        .iter()
                        .map(|a| -a.iter().zip(x).map(|(ai, xi)| (xi - ai).powi(2)).sum::<f64>() / (2.0 * h2))
                        .sum();
                    let log_p = -log_norm + exps;
                    let kc = model.kernel(c, x) / (n * model.norm() * h2);
                    let factor = -w * (log_p + 1.0) * kc;
                    for k in 0..d {
                        g[k] += factor * -(x[k] - cand[k]);
                    }
                });
            }
        }
        Ok(g)
    } else {
        if cfg.gradient_mode == GradientMode::Paper {
            return Err(Error::Config("gradient mode `paper` is only defined for grid integration".into()));
        }
        let offsets = mc_offsets(model, cfg);
        let mut total = 0usize;
        let mut x = vec![0.0; d];
        for (i, eps) in offsets.iter().enumerate() {
            for e in eps {
                for k in 0..d {
                    x[k] = model.centers[i][k] + model.bandwidth * e[k];
                }
                let p = model.density_unchecked(&x).max(TINY);
                let scale = 1.0 / (n * model.norm() * h2 * p);
                if i == c {
                    // sample moves with the candidate: only the other kernels contribute
                    for (j, a) in model.centers.iter().enumerate() {
                        if j == c {
                            continue;
                        }
                        let kj = model.kernel(j, &x) * scale;
                        for k in 0..d {
                            g[k] += kj * (x[k] - a[k]);
                        }
                    }
                } else {
                    let kc = model.kernel(c, &x) * scale;
                    for k in 0..d {
                        g[k] -= kc * (x[k] - model.centers[c][k]);
                    }
                }
                total += 1;
            }
        }
        g.iter_mut().for_each(|v| *v /= total as f64);
        Ok(g)
    }
}

/// One row of the optimization trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub entropy: f64,
    pub candidates: Vec<Vec<f64>>,
}

/// Result of [`optimize_candidates_traced`].
#[derive(Debug, Clone)]
pub struct Optimized {
    pub candidates: Vec<Vec<f64>>,
    pub bandwidth: f64,
    pub initial_entropy: f64,
    pub final_entropy: f64,
    pub trace: Vec<TraceRow>,
}

/// Places `cfg.n_samples` candidates that maximize the entropy of the
/// density over `known` plus the candidates.
pub fn optimize_candidates<R: Rng + ?Sized>(known: &[Vec<f64>], cfg: &SamplerConfig, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    Ok(optimize_candidates_traced(known, cfg, rng)?.candidates)
}

pub fn optimize_candidates_traced<R: Rng + ?Sized>(
    known: &[Vec<f64>],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Optimized> {
    cfg.validate()?;
    if known.is_empty() {
        return Err(Error::InvalidArgument("at least one known action is required".into()));
    }
    if cfg.n_samples == 0 {
        return Ok(Optimized { candidates: Vec::new(), bandwidth: 0.0, initial_entropy: 0.0, final_entropy: 0.0, trace: Vec::new() });
    }
    let init: Vec<Vec<f64>> =
        (0..cfg.n_samples).map(|_| cfg.bounds.iter().map(|b| rng.random_range(b[0]..b[1])).collect()).collect();
    let mut centers: Vec<Vec<f64>> = known.to_vec();
    centers.extend(init);
    let h = cfg.bandwidth.unwrap_or_else(|| silverman_bandwidth(known, &cfg.bounds));
    let mut model = KdeModel::new(centers, known.len(), h)?;
    check_dims(&model, cfg)?;

    let mut current = entropy(&model, cfg)?;
    let initial = current;
    let mut trace = vec![TraceRow { iter: 0, entropy: current, candidates: model.candidates().to_vec() }];
    for iter in 1..=cfg.iters {
        let grads = (0..model.n_candidates()).map(|j| grad_entropy(&model, cfg, j)).collect::<Result<Vec<_>>>()?;
        let mut step = cfg.lr;
        let attempts = if cfg.backtracking { 6 } else { 1 };
        for _ in 0..attempts {
            let mut trial = model.clone();
            for (j, g) in grads.iter().enumerate() {
                let mut x: Vec<f64> = trial.candidates()[j].iter().zip(g).map(|(a, gk)| a + step * gk).collect();
                cfg.clip(&mut x);
                trial.set_candidate(j, x)?;
            }
            let h_trial = entropy(&trial, cfg)?;
            if !cfg.backtracking || h_trial >= current {
                model = trial;
                current = h_trial;
                break;
            }
            step *= 0.5;
        }
        trace.push(TraceRow { iter, entropy: current, candidates: model.candidates().to_vec() });
    }
    Ok(Optimized { candidates: model.candidates().to_vec(), bandwidth: h, initial_entropy: initial, final_entropy: current, trace })
}

/// Writes `iter,entropy,c<j>_<k>...` rows.
pub fn write_trace_csv<W: Write>(trace: &[TraceRow], mut out: W) -> Result<()> {
    let Some(first) = trace.first() else {
        return Ok(());
    };
    let mut header = vec!["iter".to_string(), "entropy".to_string()];
    for (j, c) in first.candidates.iter().enumerate() {
        for k in 0..c.len() {
            header.push(format!("c{j}_{k}"));
        }
    }
    writeln!(out, "{}", header.join(","))?;
    for row in trace {
        let mut fields = vec![row.iter.to_string(), format!("{}", row.entropy)];
        fields.extend(row.candidates.iter().flatten().map(|v| format!("{v}")));
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Every action index except the one taken.
pub fn enumerate_discrete_counterfactuals(taken: usize, k: usize) -> Result<Vec<usize>> {
    if k < 2 {
        return Ok(Vec::new());
    }
    if taken >= k {
        return Err(Error::InvalidArgument(format!("action {taken} outside a space of {k}")));
    }
    Ok((0..k).filter(|&i| i != taken).collect())
}
