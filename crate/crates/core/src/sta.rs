//! State transition autoencoder: a conditional VAE over transition deltas
//! `d = s' - s`, conditioned on the action.
//!
//! The encoder maps `[d, enc(a)]` to `[μ, log σ²]`; the decoder maps
//! `[z, enc(a)]` back to a delta. The prior on `z` is the standard normal,
//! so the KL term has the usual closed form. Counterfactual next states are
//! produced by drawing `z ~ N(0, I)` and decoding under a different action.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envs::Environment;
use crate::error::{shape_err, Error, Result};
use crate::nn::{clip_global_norm, Activation, AdamState, ByteReader, DenseNet, GradientTape};
use crate::space::{Action, ActionSpace};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StaConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub batch_size: usize,
    pub train_steps: usize,
    /// Random-policy transitions collected for pretraining.
    pub corpus_size: usize,
    pub clip_norm: f64,
}

impl Default for StaConfig {
    fn default() -> Self {
        StaConfig {
            latent_dim: 8,
            hidden: vec![128, 128],
            activation: Activation::Relu,
            lr: 1e-3,
            batch_size: 128,
            train_steps: 2000,
            corpus_size: 5000,
            clip_norm: 10.0,
        }
    }
}

/// Batch-mean loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaLoss {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

/// `d = s_next - s`.
pub fn delta(s: &[f64], s_next: &[f64]) -> Result<Vec<f64>> {
    if s.len() != s_next.len() {
        return Err(shape_err("next state", s.len(), s_next.len()));
    }
    Ok(s_next.iter().zip(s).map(|(b, a)| b - a).collect())
}

/// `z = μ + sqrt(σ²) ⊙ noise`.
pub fn reparameterize(mu: &[f64], var: &[f64], noise: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != var.len() || mu.len() != noise.len() {
        return Err(Error::Shape(format!("μ {}, σ² {}, noise {}", mu.len(), var.len(), noise.len())));
    }
    if let Some(v) = var.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidArgument(format!("variance {v} is negative")));
    }
    Ok(mu.iter().zip(var).zip(noise).map(|((m, v), e)| m + v.sqrt() * e).collect())
}

/// Closed-form `KL(N(μ, σ²) || N(0, I)) = ½ Σ (μ² + σ² − log σ² − 1)`.
pub fn kl_loss(mu: &[f64], var: &[f64]) -> Result<f64> {
    if mu.len() != var.len() {
        return Err(shape_err("variance vector", mu.len(), var.len()));
    }
    if let Some(v) = var.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::InvalidArgument(format!("variance {v} must be positive")));
    }
    Ok(0.5 * mu.iter().zip(var).map(|(m, v)| m * m + v - v.ln() - 1.0).sum::<f64>())
}

/// `(1 / 2n) Σ (d'_i − d_i)²`.
pub fn recon_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(shape_err("reconstruction", target.len(), pred.len()));
    }
    let n = pred.len() as f64;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / (2.0 * n))
}

/// Adam states for both halves of the model.
#[derive(Debug, Clone)]
pub struct StaOptimizer {
    encoder: AdamState,
    decoder: AdamState,
    clip_norm: f64,
}

impl StaOptimizer {
    pub fn new(model: &StaModel, lr: f64, clip_norm: f64) -> Self {
        StaOptimizer {
            encoder: AdamState::new(&model.encoder, lr).without_clipping(),
            decoder: AdamState::new(&model.decoder, lr).without_clipping(),
            clip_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaModel {
    encoder: DenseNet,
    decoder: DenseNet,
    latent_dim: usize,
    state_dim: usize,
    action_space: ActionSpace,
    trained: bool,
}

/// Gradients of the batch loss for a fixed noise draw.
#[derive(Debug, Clone)]
pub struct StaGradients {
    pub loss: StaLoss,
    pub encoder: GradientTape,
    pub decoder: GradientTape,
}

impl StaModel {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_space: ActionSpace, cfg: &StaConfig, rng: &mut R) -> Result<Self> {
        if state_dim == 0 || cfg.latent_dim == 0 {
            return Err(Error::Config("state and latent dimensions must be positive".into()));
        }
        let a = action_space.encoded_dim();
        let mut enc_dims = vec![state_dim + a];
        enc_dims.extend(&cfg.hidden);
        enc_dims.push(2 * cfg.latent_dim);
        let mut dec_dims = vec![cfg.latent_dim + a];
        dec_dims.extend(&cfg.hidden);
        dec_dims.push(state_dim);
        Ok(StaModel {
            encoder: DenseNet::new(&enc_dims, cfg.activation, Activation::Identity, rng)?,
            decoder: DenseNet::new(&dec_dims, cfg.activation, Activation::Identity, rng)?,
            latent_dim: cfg.latent_dim,
            state_dim,
            action_space,
            trained: false,
        })
    }

    /// Assembles a model from explicit networks.
    pub fn from_parts(encoder: DenseNet, decoder: DenseNet, latent_dim: usize, action_space: ActionSpace) -> Result<Self> {
        let a = action_space.encoded_dim();
        let state_dim = decoder.output_dim();
        if encoder.output_dim() != 2 * latent_dim {
            return Err(shape_err("encoder output", 2 * latent_dim, encoder.output_dim()));
        }
        if encoder.input_dim() != state_dim + a {
            return Err(shape_err("encoder input", state_dim + a, encoder.input_dim()));
        }
        if decoder.input_dim() != latent_dim + a {
            return Err(shape_err("decoder input", latent_dim + a, decoder.input_dim()));
        }
        Ok(StaModel { encoder, decoder, latent_dim, state_dim, action_space, trained: false })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_space(&self) -> &ActionSpace {
        &self.action_space
    }

    pub fn encoder(&self) -> &DenseNet {
        &self.encoder
    }

    pub fn decoder(&self) -> &DenseNet {
        &self.decoder
    }

    pub fn encoder_mut(&mut self) -> &mut DenseNet {
        &mut self.encoder
    }

    pub fn decoder_mut(&mut self) -> &mut DenseNet {
        &mut self.decoder
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn set_trained(&mut self, trained: bool) {
        self.trained = trained;
    }

    fn encoder_input(&self, d: &[f64], a: &Action) -> Result<Vec<f64>> {
        if d.len() != self.state_dim {
            return Err(shape_err("transition delta", self.state_dim, d.len()));
        }
        let mut x = d.to_vec();
        x.extend(self.action_space.encode(a)?);
        Ok(x)
    }

    /// Posterior parameters `(μ, σ²)` with `log σ²` clamped to `[-10, 10]`.
    pub fn encode(&self, d: &[f64], a: &Action) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.encoder.forward(&self.encoder_input(d, a)?)?;
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("encoder produced a non-finite output".into()));
        }
        let (mu, raw) = out.split_at(self.latent_dim);
        let var = raw.iter().map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX).exp()).collect();
        Ok((mu.to_vec(), var))
    }

    pub fn decode(&self, z: &[f64], a: &Action) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim {
            return Err(shape_err("latent vector", self.latent_dim, z.len()));
        }
        let mut x = z.to_vec();
        x.extend(self.action_space.encode(a)?);
        self.decoder.forward(&x)
    }

    /// Loss and gradients for `batch` under the given `B × latent` noise.
    pub fn loss_and_grads(&self, batch: &[(Vec<f64>, Action)], noise: &Array2<f64>) -> Result<StaGradients> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let b = batch.len();
        let l = self.latent_dim;
        let n = self.state_dim;
        if noise.dim() != (b, l) {
            return Err(Error::Shape(format!("noise {:?} for batch {b} × latent {l}", noise.dim())));
        }
        let a_dim = self.action_space.encoded_dim();
        let mut enc_in = Array2::zeros((b, n + a_dim));
        let mut dec_actions = Array2::zeros((b, a_dim));
        let mut target = Array2::zeros((b, n));
        for (i, (d, a)) in batch.iter().enumerate() {
            let row = self.encoder_input(d, a)?;
            enc_in.row_mut(i).iter_mut().zip(&row).for_each(|(x, v)| *x = *v);
            dec_actions.row_mut(i).iter_mut().zip(&row[n..]).for_each(|(x, v)| *x = *v);
            target.row_mut(i).iter_mut().zip(d).for_each(|(x, v)| *x = *v);
        }
        let (enc_out, enc_cache) = self.encoder.forward_cached(enc_in.view())?;
        let mu = enc_out.slice(s![.., ..l]).to_owned();
        let raw = enc_out.slice(s![.., l..]).to_owned();
        let log_var = raw.mapv(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX));
        let var = log_var.mapv(f64::exp);
        let std = log_var.mapv(|v| (0.5 * v).exp());
        let z = &mu + &(&std * noise);

        let dec_in = ndarray::concatenate(Axis(1), &[z.view(), dec_actions.view()]).map_err(|e| Error::Shape(e.to_string()))?;
        let (pred, dec_cache) = self.decoder.forward_cached(dec_in.view())?;
        let resid = &pred - &target;
        let recon = resid.mapv(|v| v * v).sum() / (2.0 * n as f64 * b as f64);
        let kl_terms = &mu.mapv(|v| v * v) + &var - &log_var - 1.0;
        let kl = 0.5 * kl_terms.sum() / b as f64;
        let loss = StaLoss { recon, kl, total: recon + kl };
        if !loss.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite autoencoder loss {loss:?}")));
        }

        let grad_pred = resid / (n as f64 * b as f64);
        let (dec_tape, dec_in_grad) = self.decoder.backward(&dec_cache, grad_pred.view())?;
        let gz = dec_in_grad.slice(s![.., ..l]).to_owned();
        let inv_b = 1.0 / b as f64;
        let g_mu = &gz + &(&mu * inv_b);
        let mut g_logvar = &(&gz * noise) * &(&std * 0.5) + &((&var - 1.0) * (0.5 * inv_b));
        g_logvar.zip_mut_with(&raw, |g, &r| {
            if !(LOG_VAR_MIN..=LOG_VAR_MAX).contains(&r) {
                *g = 0.0;
            }
        });
        let enc_grad = ndarray::concatenate(Axis(1), &[g_mu.view(), g_logvar.view()]).map_err(|e| Error::Shape(e.to_string()))?;
        let (enc_tape, _) = self.encoder.backward(&enc_cache, enc_grad.view())?;
        Ok(StaGradients { loss, encoder: enc_tape, decoder: dec_tape })
    }

    /// Batch loss for fixed noise, without gradients.
    pub fn loss_with_noise(&self, batch: &[(Vec<f64>, Action)], noise: &Array2<f64>) -> Result<StaLoss> {
        Ok(self.loss_and_grads(batch, noise)?.loss)
    }

    /// One optimizer step on `recon + kl`; returns the pre-step batch losses.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        batch: &[(Vec<f64>, Action)],
        opt: &mut StaOptimizer,
        rng: &mut R,
    ) -> Result<StaLoss> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let noise = Array2::from_shape_fn((batch.len(), self.latent_dim), |_| rng.sample(StandardNormal));
        let mut g = self.loss_and_grads(batch, &noise)?;
        if !g.encoder.is_finite() || !g.decoder.is_finite() {
            return Err(Error::Numeric("non-finite autoencoder gradient".into()));
        }
        clip_global_norm(&mut [&mut g.encoder, &mut g.decoder], opt.clip_norm);
        opt.encoder.step(&mut self.encoder, &g.encoder)?;
        opt.decoder.step(&mut self.decoder, &g.decoder)?;
        Ok(g.loss)
    }

    /// Trains on `corpus` for `cfg.train_steps` minibatch steps and marks the model trained.
    pub fn fit<R: Rng + ?Sized>(&mut self, corpus: &[(Vec<f64>, Action)], cfg: &StaConfig, rng: &mut R) -> Result<Vec<StaLoss>> {
        if corpus.is_empty() {
            return Err(Error::InvalidArgument("empty pretraining corpus".into()));
        }
        let mut opt = StaOptimizer::new(self, cfg.lr, cfg.clip_norm);
        let bs = cfg.batch_size.min(corpus.len()).max(1);
        let mut losses = Vec::with_capacity(cfg.train_steps);
        let mut batch = Vec::with_capacity(bs);
        for _ in 0..cfg.train_steps {
            batch.clear();
            for _ in 0..bs {
                batch.push(corpus[rng.random_range(0..corpus.len())].clone());
            }
            losses.push(self.train_step(&batch, &mut opt, rng)?);
        }
        self.trained = true;
        Ok(losses)
    }

    /// `ŝ' = s + decode(z, â)` with `z ~ N(0, I)`.
    pub fn generate<R: Rng + ?Sized>(&self, s: &[f64], a: &Action, rng: &mut R) -> Result<Vec<f64>> {
        Ok(self.generate_batch(&[(s, a)], rng)?.pop().expect("one row"))
    }

    pub fn generate_batch<R: Rng + ?Sized>(&self, queries: &[(&[f64], &Action)], rng: &mut R) -> Result<Vec<Vec<f64>>> {
        if !self.trained {
            log::warn!("generating counterfactual states from an untrained transition model");
        }
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let a_dim = self.action_space.encoded_dim();
        let l = self.latent_dim;
        let mut x = Array2::zeros((queries.len(), l + a_dim));
        for (i, (s, a)) in queries.iter().enumerate() {
            if s.len() != self.state_dim {
                return Err(shape_err("state", self.state_dim, s.len()));
            }
            let enc = self.action_space.encode(a)?;
            let mut row = x.row_mut(i);
            for k in 0..l {
                row[k] = rng.sample(StandardNormal);
            }
            for (k, v) in enc.iter().enumerate() {
                row[l + k] = *v;
            }
        }
        let d = self.decoder.forward_batch(x.view())?;
        Ok(queries
            .iter()
            .zip(d.rows())
            .map(|((s, _), d)| s.iter().zip(d.iter()).map(|(a, b)| a + b).collect())
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(STA_MAGIC);
        buf.extend_from_slice(&(self.latent_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.state_dim as u32).to_le_bytes());
        match &self.action_space {
            ActionSpace::Discrete(k) => {
                buf.push(0);
                buf.extend_from_slice(&(*k as u32).to_le_bytes());
            }
            ActionSpace::Continuous { low, high } => {
                buf.push(1);
                buf.extend_from_slice(&(low.len() as u32).to_le_bytes());
                for (l, h) in low.iter().zip(high) {
                    buf.extend_from_slice(&l.to_le_bytes());
                    buf.extend_from_slice(&h.to_le_bytes());
                }
            }
        }
        buf.push(self.trained as u8);
        for net in [&self.encoder, &self.decoder] {
            let snap = net.to_snapshot();
            buf.extend_from_slice(&(snap.len() as u64).to_le_bytes());
            buf.extend_from_slice(&snap);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(STA_MAGIC.len())? != STA_MAGIC {
            return Err(Error::Snapshot("not a transition-model checkpoint".into()));
        }
        let latent_dim = r.u32()? as usize;
        let state_dim = r.u32()? as usize;
        let action_space = match r.u8()? {
            0 => ActionSpace::Discrete(r.u32()? as usize),
            1 => {
                let n = r.u32()? as usize;
                let (mut low, mut high) = (Vec::with_capacity(n), Vec::with_capacity(n));
                for _ in 0..n {
                    low.push(r.f64()?);
                    high.push(r.f64()?);
                }
                ActionSpace::Continuous { low, high }
            }
            t => return Err(Error::Snapshot(format!("unknown action-space tag {t}"))),
        };
        let trained = r.u8()? != 0;
        let mut nets = Vec::with_capacity(2);
        for _ in 0..2 {
            let len = r.u64()? as usize;
            let (net, used) = DenseNet::from_snapshot(r.take(len)?)?;
            if used != len {
                return Err(Error::Snapshot("trailing bytes in network snapshot".into()));
            }
            nets.push(net);
        }
        let decoder = nets.pop().expect("two nets");
        let encoder = nets.pop().expect("two nets");
        let mut model = StaModel::from_parts(encoder, decoder, latent_dim, action_space)?;
        if model.state_dim != state_dim {
            return Err(Error::Snapshot("state dimension disagrees with decoder".into()));
        }
        model.trained = trained;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

const STA_MAGIC: &[u8; 8] = b"CEASTA\x00\x01";

/// Uniformly random action from `space`.
pub fn random_action<R: Rng + ?Sized>(space: &ActionSpace, rng: &mut R) -> Action {
    match space {
        ActionSpace::Discrete(k) => Action::Discrete(rng.random_range(0..*k)),
        ActionSpace::Continuous { low, high } => {
            Action::Continuous(low.iter().zip(high).map(|(l, h)| rng.random_range(*l..=*h)).collect())
        }
    }
}

/// Rolls a uniform-random policy for `n` steps and returns `(d, a)` pairs.
pub fn collect_random_corpus<R: Rng + ?Sized>(env: &mut dyn Environment, n: usize, rng: &mut R) -> Result<Vec<(Vec<f64>, Action)>> {
    let space = env.action_space();
    let mut corpus = Vec::with_capacity(n);
    let mut s = env.reset(rng.random());
    while corpus.len() < n {
        let a = random_action(&space, rng);
        let step = env.step(&a)?;
        corpus.push((delta(&s, &step.state)?, a));
        s = if step.done() { env.reset(rng.random()) } else { step.state };
    }
    Ok(corpus)
}

/// Writes `step,recon,kl,total` rows.
pub fn write_loss_csv<W: Write>(losses: &[StaLoss], mut out: W) -> Result<()> {
    writeln!(out, "step,recon,kl,total")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(out, "{i},{},{},{}", l.recon, l.kl, l.total)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{GridAction, GridWorld, GridWorldConfig};
    use crate::rng::seeded;

    fn small_cfg() -> StaConfig {
        StaConfig { latent_dim: 2, hidden: vec![6], activation: Activation::Tanh, ..Default::default() }
    }

    #[test]
    fn delta_examples() {
        assert_eq!(delta(&[1.0, 1.0], &[2.0, 0.0]).unwrap(), vec![1.0, -1.0]);
        assert_eq!(delta(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), vec![0.0, 0.0]);
        assert!(delta(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn gridworld_right_moves_are_unit_deltas() {
        let g = GridWorld::new(GridWorldConfig::default()).unwrap();
        for cell in g.decision_cells() {
            if cell.0 + 1 < g.config().width {
                let (next, _, _) = g.dynamics(cell, GridAction::Right);
                let d = delta(&g.observe(cell), &g.observe(next)).unwrap();
                let cells: Vec<f64> = d.iter().map(|v| (v * 6.0).round()).collect();
                assert_eq!(cells, vec![1.0, 0.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn closed_forms() {
        assert_eq!(kl_loss(&[0.0], &[1.0]).unwrap(), 0.0);
        assert_eq!(kl_loss(&[1.0], &[1.0]).unwrap(), 0.5);
        assert!(kl_loss(&[0.0], &[0.0]).is_err());
        assert_eq!(recon_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(recon_loss(&[2.0], &[0.0]).unwrap(), 2.0);
        let base = recon_loss(&[1.0, -0.5], &[0.0, 0.0]).unwrap();
        assert_eq!(recon_loss(&[2.0, -1.0], &[0.0, 0.0]).unwrap(), 4.0 * base);
        assert!(recon_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn reparameterization() {
        assert_eq!(reparameterize(&[1.0, 2.0], &[4.0, 9.0], &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(reparameterize(&[0.0], &[1.0], &[0.7]).unwrap(), vec![0.7]);
        assert!(reparameterize(&[0.0], &[-1.0], &[0.7]).is_err());
        let mut rng = seeded(4);
        let (mu, var) = (0.8, 2.5);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| reparameterize(&[mu], &[var], &[rng.sample(StandardNormal)]).unwrap()[0])
            .sum::<f64>()
            / n as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - mu).abs() < 3.0 * se);
    }

    #[test]
    fn encode_contracts() {
        let mut rng = seeded(1);
        let mut m = StaModel::new(3, ActionSpace::Discrete(2), &small_cfg(), &mut rng).unwrap();
        let (mu, var) = m.encode(&[0.1, 0.2, 0.3], &Action::Discrete(1)).unwrap();
        assert_eq!((mu.len(), var.len()), (2, 2));
        assert_eq!(m.encode(&[0.1, 0.2, 0.3], &Action::Discrete(1)).unwrap(), (mu, var));
        // force the log-variance head to extremes
        let enc = m.encoder_mut();
        let mut p = enc.params();
        p.iter_mut().for_each(|v| *v *= 400.0);
        enc.set_params(&p).unwrap();
        let (_, var) = m.encode(&[0.1, 0.2, 0.3], &Action::Discrete(0)).unwrap();
        assert!(var.iter().all(|v| *v >= (-10f64).exp() && *v <= 10f64.exp()));
        assert!(m.encode(&[0.1], &Action::Discrete(0)).is_err());
    }

    #[test]
    fn decode_and_generate_contracts() {
        let mut rng = seeded(2);
        let m = StaModel::new(3, ActionSpace::Discrete(2), &small_cfg(), &mut rng).unwrap();
        let d = m.decode(&[0.5, -0.5], &Action::Discrete(0)).unwrap();
        assert_eq!(d.len(), 3);
        assert!(d.iter().all(|v| v.is_finite()));
        assert!(m.decode(&[0.5], &Action::Discrete(0)).is_err());
        let a = m.generate(&[0.0; 3], &Action::Discrete(1), &mut rng).unwrap();
        let b = m.generate(&[0.0; 3], &Action::Discrete(1), &mut rng).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn zeroed_decoder_generates_the_input_state() {
        let mut rng = seeded(3);
        let mut m = StaModel::new(2, ActionSpace::Discrete(3), &small_cfg(), &mut rng).unwrap();
        let dec = m.decoder_mut();
        let zeros = vec![0.0; dec.param_count()];
        dec.set_params(&zeros).unwrap();
        m.set_trained(true);
        assert_eq!(m.generate(&[0.4, -1.0], &Action::Discrete(2), &mut rng).unwrap(), vec![0.4, -1.0]);
    }

    /// Stratified Monte-Carlo estimate of `E_q[log q(z) − log p(z)]`.
    pub(crate) fn monte_carlo_kl(mu: f64, var: f64, n: usize, rng: &mut impl Rng) -> f64 {
        use statrs::distribution::{ContinuousCDF, Normal};
        let unit = Normal::standard();
        let sd = var.sqrt();
        let mut acc = 0.0;
        for i in 0..n {
            let u = (i as f64 + rng.random::<f64>()) / n as f64;
            let e = unit.inverse_cdf(u.clamp(1e-300, 1.0 - 1e-16));
            let z = mu + sd * e;
            acc += -0.5 * var.ln() - 0.5 * e * e + 0.5 * z * z;
        }
        acc / n as f64
    }

    #[test]
    fn monte_carlo_kl_agrees_with_closed_form() {
        let mut rng = seeded(9);
        for _ in 0..20 {
            let mu: f64 = rng.random_range(-2.0..=2.0);
            let var: f64 = rng.random_range(0.1..=4.0);
            let mc = monte_carlo_kl(mu, var, 100_000, &mut rng);
            let exact = kl_loss(&[mu], &[var]).unwrap();
            assert!((mc - exact).abs() < 0.01, "μ {mu} σ² {var}: {mc} vs {exact}");
        }
    }

    fn random_batch(rng: &mut impl Rng, n: usize, b: usize, k: usize) -> Vec<(Vec<f64>, Action)> {
        (0..b).map(|_| ((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), Action::Discrete(rng.random_range(0..k)))).collect()
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = seeded(12);
        let mut m = StaModel::new(3, ActionSpace::Discrete(2), &small_cfg(), &mut rng).unwrap();
        let batch = random_batch(&mut rng, 3, 5, 2);
        let noise = Array2::from_shape_fn((5, 2), |_| rng.sample(StandardNormal));
        let g = m.loss_and_grads(&batch, &noise).unwrap();
        for which in 0..2 {
            let analytic = if which == 0 { g.encoder.flat() } else { g.decoder.flat() };
            let base = if which == 0 { m.encoder().params() } else { m.decoder().params() };
            for i in 0..base.len() {
                let eval = |m: &mut StaModel, v: f64| {
                    let mut p = base.clone();
                    p[i] = v;
                    if which == 0 { m.encoder_mut() } else { m.decoder_mut() }.set_params(&p).unwrap();
                    m.loss_with_noise(&batch, &noise).unwrap().total
                };
                let up = eval(&mut m, base[i] + 1e-5);
                let down = eval(&mut m, base[i] - 1e-5);
                eval(&mut m, base[i]);
                let fd = (up - down) / 2e-5;
                let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-7);
                assert!(rel < 1e-4, "net {which} param {i}: fd {fd} vs {}", analytic[i]);
            }
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let mut rng = seeded(1);
        let mut m = StaModel::new(2, ActionSpace::Discrete(2), &small_cfg(), &mut rng).unwrap();
        let mut opt = StaOptimizer::new(&m, 1e-3, 10.0);
        assert!(m.train_step(&[], &mut opt, &mut rng).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = seeded(5);
        let mut m = StaModel::new(
            3,
            ActionSpace::Continuous { low: vec![-2.0], high: vec![2.0] },
            &small_cfg(),
            &mut rng,
        )
        .unwrap();
        m.set_trained(true);
        let back = StaModel::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        assert!(StaModel::from_bytes(b"CEASTA\x00\x01").is_err());
    }

    #[test]
    fn training_reduces_loss_and_keeps_components_nonnegative() {
        let mut env = GridWorld::new(GridWorldConfig { random_start: true, ..Default::default() }).unwrap();
        let mut rng = seeded(21);
        let corpus = collect_random_corpus(&mut env, 1000, &mut rng).unwrap();
        let cfg = StaConfig { hidden: vec![32, 32], train_steps: 400, batch_size: 64, ..Default::default() };
        let mut m = StaModel::new(4, ActionSpace::Discrete(4), &cfg, &mut rng).unwrap();
        let losses = m.fit(&corpus, &cfg, &mut rng).unwrap();
        assert!(losses.iter().all(|l| l.recon >= 0.0 && l.kl >= 0.0 && (l.total - l.recon - l.kl).abs() < 1e-12));
        let head: f64 = losses[..10].iter().map(|l| l.total).sum::<f64>() / 10.0;
        let tail: f64 = losses[losses.len() - 10..].iter().map(|l| l.total).sum::<f64>() / 10.0;
        assert!(tail < head);
        assert!(m.is_trained());
        let mut csv = Vec::new();
        write_loss_csv(&losses[..2], &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 3);
    }
}
