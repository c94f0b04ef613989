//! Behavior cloning: full-sequence losses, backpropagation through time, Adam and
//! a plateau learning-rate schedule.
//!
//! A batch is packed time-major with episodes sorted by decreasing length, so the
//! episodes still running at step `t` always form a prefix. Input projections and
//! all weight gradients then become single matrix products over every frame of the
//! batch; only the recurrent product is done step by step.

use std::io::Write;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{init_params, logistic, pressure, forward_step, HiddenState, PolicyConfig, PolicyError, PolicyParameters};
use crate::scenario::{Dataset, EpisodeRecord};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("episode has no frames")]
    EmptyEpisode,
    #[error("dataset has no episodes")]
    EmptyDataset,
    #[error("non-finite gradient at epoch {epoch}")]
    NonFiniteGradient { epoch: usize },
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub factor: f64,
    pub patience: usize,
    /// Absolute loss decrease that counts as progress.
    pub threshold: f64,
    pub lr_min: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self { factor: 0.5, patience: 10, threshold: 1e-4, lr_min: 1e-6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub batch_size: usize,
    pub speed_loss_weight: f64,
    pub mask_p: f64,
    pub scheduler: SchedulerConfig,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr0: 1e-3,
            batch_size: 16,
            speed_loss_weight: 0.05,
            mask_p: 0.1,
            scheduler: SchedulerConfig::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(0.0..=1.0).contains(&self.mask_p) {
            return bad("mask_p must lie in [0, 1]");
        }
        if !(self.lr0 > 0.0) || self.batch_size == 0 {
            return bad("lr0 must be positive and batch_size at least 1");
        }
        if !(self.scheduler.factor > 0.0 && self.scheduler.factor <= 1.0) || self.scheduler.patience == 0 {
            return bad("scheduler factor must lie in (0, 1] and patience be at least 1");
        }
        if !(self.speed_loss_weight >= 0.0) {
            return bad("speed_loss_weight must be non-negative");
        }
        Ok(())
    }
}

/// One episode prepared for training: pressure tokens, input speeds, labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainEpisode {
    pub tokens: Array2<f64>,
    pub speeds: Vec<f64>,
    /// `(v_cmd, δ_cmd)` per frame.
    pub labels: Vec<[f64; 2]>,
}

impl TrainEpisode {
    pub fn from_record(ep: &EpisodeRecord, cfg: &PolicyConfig) -> Result<Self, TrainError> {
        if ep.frames.is_empty() {
            return Err(TrainError::EmptyEpisode);
        }
        let mut tokens = Array2::zeros((ep.frames.len(), cfg.n_beams));
        for (t, f) in ep.frames.iter().enumerate() {
            if f.scan.len() != cfg.n_beams {
                return Err(PolicyError::ShapeMismatch { what: "scan", expected: cfg.n_beams, got: f.scan.len() }.into());
            }
            for (dst, &r) in tokens.row_mut(t).iter_mut().zip(&f.scan) {
                *dst = pressure(r as f64, cfg.sigmoid_k);
            }
        }
        Ok(Self {
            tokens,
            speeds: ep.frames.iter().map(|f| f.ego_v as f64).collect(),
            labels: ep.frames.iter().map(|f| [f.v_cmd as f64, f.delta_cmd as f64]).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.speeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speeds.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub loss: f64,
    pub l_speed: f64,
    pub l_steer: f64,
}

pub fn combine_loss(l_speed: f64, l_steer: f64, speed_weight: f64) -> LossBreakdown {
    LossBreakdown { loss: speed_weight * l_speed + l_steer, l_speed, l_steer }
}

/// Rolls the policy frame by frame over a recorded episode from a zero hidden
/// state and averages the squared errors. Works on raw ranges through the public
/// forward path.
pub fn sequence_loss(
    params: &PolicyParameters,
    cfg: &PolicyConfig,
    episode: &EpisodeRecord,
    masks: &[bool],
    speed_weight: f64,
) -> Result<LossBreakdown, TrainError> {
    if episode.frames.is_empty() {
        return Err(TrainError::EmptyEpisode);
    }
    let mut h = HiddenState::zeros(cfg);
    let (mut ls, mut ld) = (0.0, 0.0);
    for (t, f) in episode.frames.iter().enumerate() {
        let ranges: Vec<f64> = f.scan.iter().map(|&r| r as f64).collect();
        let masked = masks.get(t).copied().unwrap_or(false);
        let (a, h2) = forward_step(&ranges, f.ego_v as f64, &h, params, cfg, masked)?;
        h = h2;
        ls += (a.v - f.v_cmd as f64).powi(2);
        ld += (a.delta - f.delta_cmd as f64).powi(2);
    }
    let n = episode.frames.len() as f64;
    Ok(combine_loss(ls / n, ld / n, speed_weight))
}

fn add_bias(mut m: Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    m += &b.view().insert_axis(Axis(0));
    m
}

/// Loss and exact gradient for a batch. The batch loss is the mean over episodes
/// of each episode's frame-averaged loss.
pub struct BatchResult {
    pub loss: f64,
    pub episode_losses: Vec<LossBreakdown>,
    pub grads: PolicyParameters,
}

pub fn batch_loss_and_grad(
    params: &PolicyParameters,
    cfg: &PolicyConfig,
    episodes: &[&TrainEpisode],
    masks: &[&[bool]],
    speed_weight: f64,
) -> Result<BatchResult, TrainError> {
    if episodes.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if episodes.iter().any(|e| e.is_empty()) {
        return Err(TrainError::EmptyEpisode);
    }
    let (nb, hd, id) = (cfg.n_beams, cfg.hidden_dim(), cfg.input_dim());
    let bsz = episodes.len();
    let mut order: Vec<usize> = (0..bsz).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(episodes[i].len()));
    let tmax = episodes[order[0]].len();
    let n_at: Vec<usize> = (0..tmax).map(|t| order.iter().take_while(|&&i| episodes[i].len() > t).count()).collect();
    let mut off = vec![0usize; tmax + 1];
    for t in 0..tmax {
        off[t + 1] = off[t] + n_at[t];
    }
    let rows = off[tmax];

    // inputs
    let mut x = Array2::<f64>::zeros((rows, id));
    for t in 0..tmax {
        for j in 0..n_at[t] {
            let e = order[j];
            let mut row = x.row_mut(off[t] + j);
            row.slice_mut(s![..nb]).assign(&episodes[e].tokens.row(t));
            if cfg.use_speed_input {
                let mut emb = row.slice_mut(s![nb..]);
                if masks[e].get(t).copied().unwrap_or(false) {
                    emb.assign(&params.e_mask);
                } else {
                    let v = episodes[e].speeds[t];
                    emb.zip_mut_with(&params.psi_w, |d, &w| *d = w * v);
                    emb += &params.psi_b;
                }
            }
        }
    }

    // recurrence
    let xw = add_bias(x.dot(&params.w_ih.t()), &params.b_ih);
    let mut h_all = Array2::<f64>::zeros((rows, hd));
    let mut hprev_all = Array2::<f64>::zeros((rows, hd));
    let mut gates = Array2::<f64>::zeros((rows, 4 * hd)); // u, r, n, g
    for t in 0..tmax {
        let n = n_at[t];
        let (r0, r1) = (off[t], off[t] + n);
        if t > 0 {
            let prev = h_all.slice(s![off[t - 1]..off[t - 1] + n, ..]).to_owned();
            hprev_all.slice_mut(s![r0..r1, ..]).assign(&prev);
        }
        let hprev = hprev_all.slice(s![r0..r1, ..]);
        let hu = add_bias(hprev.dot(&params.w_hh.t()), &params.b_hh);
        for j in 0..n {
            let row = r0 + j;
            let xr = xw.row(row);
            let hr = hu.row(j);
            let hp = hprev.row(j);
            let mut g = gates.row_mut(row);
            let mut hout = h_all.row_mut(row);
            for k in 0..hd {
                let u = logistic(xr[k] + hr[k]);
                let r = logistic(xr[hd + k] + hr[hd + k]);
                let gn = hr[2 * hd + k];
                let nn = (xr[2 * hd + k] + r * gn).tanh();
                g[k] = u;
                g[hd + k] = r;
                g[2 * hd + k] = nn;
                g[3 * hd + k] = gn;
                hout[k] = (1.0 - u) * nn + u * hp[k];
            }
        }
    }

    // decoder and loss
    let z1 = add_bias(h_all.dot(&params.w1.t()), &params.b1);
    let a1 = z1.mapv(|z| z.max(0.0));
    let y = add_bias(a1.dot(&params.w2.t()), &params.b2);
    let mut dy = Array2::<f64>::zeros((rows, 2));
    let mut sums = vec![(0.0, 0.0); bsz];
    for t in 0..tmax {
        for j in 0..n_at[t] {
            let e = order[j];
            let row = off[t] + j;
            let [lv, ld] = episodes[e].labels[t];
            let (ev, ed) = (y[[row, 0]] - lv, y[[row, 1]] - ld);
            sums[e].0 += ev * ev;
            sums[e].1 += ed * ed;
            let scale = 1.0 / (bsz as f64 * episodes[e].len() as f64);
            dy[[row, 0]] = scale * speed_weight * 2.0 * ev;
            dy[[row, 1]] = scale * 2.0 * ed;
        }
    }
    let episode_losses: Vec<LossBreakdown> = sums
        .iter()
        .zip(episodes)
        .map(|(&(a, b), e)| combine_loss(a / e.len() as f64, b / e.len() as f64, speed_weight))
        .collect();
    let loss = episode_losses.iter().map(|l| l.loss).sum::<f64>() / bsz as f64;

    let mut grads = PolicyParameters::zeros(cfg);
    grads.w2 = dy.t().dot(&a1);
    grads.b2 = dy.sum_axis(Axis(0));
    let mut dz1 = dy.dot(&params.w2);
    dz1.zip_mut_with(&z1, |d, &z| {
        if z <= 0.0 {
            *d = 0.0
        }
    });
    grads.w1 = dz1.t().dot(&h_all);
    grads.b1 = dz1.sum_axis(Axis(0));
    let dh_out = dz1.dot(&params.w1);

    // backward through time
    let mut dxw = Array2::<f64>::zeros((rows, 3 * hd));
    let mut dhu = Array2::<f64>::zeros((rows, 3 * hd));
    let mut carry = Array2::<f64>::zeros((0, hd));
    for t in (0..tmax).rev() {
        let n = n_at[t];
        let r0 = off[t];
        let mut dh = dh_out.slice(s![r0..r0 + n, ..]).to_owned();
        let nc = carry.nrows();
        if nc > 0 {
            let mut top = dh.slice_mut(s![..nc, ..]);
            top += &carry;
        }
        let mut dhp = Array2::<f64>::zeros((n, hd));
        for j in 0..n {
            let row = r0 + j;
            let g = gates.row(row);
            let hp = hprev_all.row(row);
            let mut dxr = dxw.row_mut(row);
            let mut dhr = dhu.row_mut(row);
            for k in 0..hd {
                let (u, r, nn, gn) = (g[k], g[hd + k], g[2 * hd + k], g[3 * hd + k]);
                let d = dh[[j, k]];
                let dn = d * (1.0 - u);
                let du = d * (hp[k] - nn);
                dhp[[j, k]] = d * u;
                let dan = dn * (1.0 - nn * nn);
                let dr = dan * gn;
                let dar = dr * r * (1.0 - r);
                let dau = du * u * (1.0 - u);
                dxr[k] = dau;
                dxr[hd + k] = dar;
                dxr[2 * hd + k] = dan;
                dhr[k] = dau;
                dhr[hd + k] = dar;
                dhr[2 * hd + k] = dan * r;
            }
        }
        carry = dhp + dhu.slice(s![r0..r0 + n, ..]).dot(&params.w_hh);
    }
    grads.w_hh = dhu.t().dot(&hprev_all);
    grads.b_hh = dhu.sum_axis(Axis(0));
    grads.w_ih = dxw.t().dot(&x);
    grads.b_ih = dxw.sum_axis(Axis(0));

    if cfg.use_speed_input {
        let demb = dxw.dot(&params.w_ih.slice(s![.., nb..]));
        for t in 0..tmax {
            for j in 0..n_at[t] {
                let e = order[j];
                let d = demb.row(off[t] + j);
                if masks[e].get(t).copied().unwrap_or(false) {
                    grads.e_mask += &d;
                } else {
                    grads.psi_w.scaled_add(episodes[e].speeds[t], &d);
                    grads.psi_b += &d;
                }
            }
        }
    }
    Ok(BatchResult { loss, episode_losses, grads })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: PolicyParameters,
    pub m: PolicyParameters,
    pub v: PolicyParameters,
    pub step: u64,
    pub lr: f64,
    /// Best loss since the last learning-rate reduction.
    pub best_loss: f64,
    pub stall: usize,
    pub history: Vec<f64>,
}

impl TrainState {
    pub fn new(params: PolicyParameters, cfg: &PolicyConfig, lr0: f64) -> Self {
        Self {
            params,
            m: PolicyParameters::zeros(cfg),
            v: PolicyParameters::zeros(cfg),
            step: 0,
            lr: lr0,
            best_loss: f64::INFINITY,
            stall: 0,
            history: Vec::new(),
        }
    }
}

/// One bias-corrected Adam step at the state's current learning rate.
pub fn adam_update(state: &mut TrainState, grads: &PolicyParameters, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let lr = state.lr;
    let TrainState { params, m, v, .. } = state;
    for (((mut p, mut m), mut v), g) in params.tensors_mut().into_iter().zip(m.tensors_mut()).zip(v.tensors_mut()).zip(grads.tensors()) {
        ndarray::Zip::from(&mut p).and(&mut m).and(&mut v).and(&g).for_each(|p, m, v, &g| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        });
    }
}

/// Plateau schedule: after `patience` epochs without an improvement of at least
/// `threshold`, scale the rate by `factor` (floored at `lr_min`) and start a fresh
/// comparison window.
pub fn lr_schedule_step(state: &mut TrainState, epoch_loss: f64, cfg: &SchedulerConfig) {
    if epoch_loss < state.best_loss - cfg.threshold {
        state.best_loss = epoch_loss;
        state.stall = 0;
        return;
    }
    state.stall += 1;
    if state.stall >= cfg.patience {
        state.lr = (state.lr * cfg.factor).max(cfg.lr_min);
        state.stall = 0;
        state.best_loss = f64::INFINITY;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

pub fn write_loss_curve<W: Write>(curve: &[EpochRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "epoch,mean_loss,lr")?;
    for r in curve {
        writeln!(out, "{},{:e},{:e}", r.epoch, r.mean_loss, r.lr)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Parameters at the end of the epoch with the lowest mean loss.
    pub best_params: PolicyParameters,
    pub best_epoch: usize,
    pub curve: Vec<EpochRecord>,
    pub state: TrainState,
}

/// Per-frame Bernoulli mask draws for every episode.
pub fn draw_masks<R: Rng + ?Sized>(episodes: &[TrainEpisode], p: f64, rng: &mut R) -> Vec<Vec<bool>> {
    episodes.iter().map(|e| (0..e.len()).map(|_| rng.gen_bool(p)).collect()).collect()
}

pub fn prepare_dataset(dataset: &Dataset, cfg: &PolicyConfig) -> Result<Vec<TrainEpisode>, TrainError> {
    dataset.episodes.iter().map(|e| TrainEpisode::from_record(e, cfg)).collect()
}

/// Full training run. `on_epoch` sees every finished epoch.
pub fn train(
    dataset: &Dataset,
    pcfg: &PolicyConfig,
    tcfg: &TrainerConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutput, TrainError> {
    pcfg.validate()?;
    tcfg.validate()?;
    let episodes = prepare_dataset(dataset, pcfg)?;
    if episodes.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(tcfg.seed, "init", 0));
    let mut state = TrainState::new(init_params(pcfg, &mut init_rng), pcfg, tcfg.lr0);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tcfg.seed, "epochs", 0));
    let mut idx: Vec<usize> = (0..episodes.len()).collect();
    let mut curve = Vec::with_capacity(tcfg.epochs);
    let mut best = (f64::INFINITY, 0, state.params.clone());
    for epoch in 1..=tcfg.epochs {
        idx.shuffle(&mut rng);
        let masks = draw_masks(&episodes, tcfg.mask_p, &mut rng);
        let lr = state.lr;
        let mut total = 0.0;
        for batch in idx.chunks(tcfg.batch_size) {
            let eps: Vec<&TrainEpisode> = batch.iter().map(|&i| &episodes[i]).collect();
            let ms: Vec<&[bool]> = batch.iter().map(|&i| masks[i].as_slice()).collect();
            let res = batch_loss_and_grad(&state.params, pcfg, &eps, &ms, tcfg.speed_loss_weight)?;
            if !res.grads.is_finite() || !res.loss.is_finite() {
                return Err(TrainError::NonFiniteGradient { epoch });
            }
            total += res.loss * batch.len() as f64;
            adam_update(&mut state, &res.grads, &tcfg.adam);
        }
        let mean_loss = total / episodes.len() as f64;
        if mean_loss < best.0 {
            best = (mean_loss, epoch, state.params.clone());
        }
        state.history.push(mean_loss);
        lr_schedule_step(&mut state, mean_loss, &tcfg.scheduler);
        let rec = EpochRecord { epoch, mean_loss, lr };
        on_epoch(&rec);
        curve.push(rec);
    }
    Ok(TrainOutput { best_params: best.2, best_epoch: best.1, curve, state })
}

/// Reference gradient by central differences on [`sequence_loss`]; only for
/// tiny configurations.
pub fn finite_difference_grad(
    params: &PolicyParameters,
    cfg: &PolicyConfig,
    episodes: &[EpisodeRecord],
    masks: &[Vec<bool>],
    speed_weight: f64,
    step: f64,
) -> Result<PolicyParameters, TrainError> {
    let loss = |p: &PolicyParameters| -> Result<f64, TrainError> {
        let mut s = 0.0;
        for (e, m) in episodes.iter().zip(masks) {
            s += sequence_loss(p, cfg, e, m, speed_weight)?.loss;
        }
        Ok(s / episodes.len() as f64)
    };
    let mut grads = PolicyParameters::zeros(cfg);
    let mut work = params.clone();
    for ti in 0..11 {
        let n = work.tensors()[ti].len();
        for k in 0..n {
            let orig = work.tensors()[ti][k];
            work.tensors_mut()[ti][k] = orig + step;
            let up = loss(&work)?;
            work.tensors_mut()[ti][k] = orig - step;
            let down = loss(&work)?;
            work.tensors_mut()[ti][k] = orig;
            grads.tensors_mut()[ti][k] = (up - down) / (2.0 * step);
        }
    }
    Ok(grads)
}

/// Largest per-tensor relative error `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)` with its tensor.
pub fn max_relative_error(a: &PolicyParameters, b: &PolicyParameters) -> Vec<(&'static str, f64)> {
    crate::policy::TENSOR_NAMES
        .iter()
        .zip(a.tensors().iter().zip(b.tensors().iter()))
        .map(|(name, (x, y))| {
            let diff = x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            let scale = x.iter().chain(y.iter()).map(|v| v.abs()).fold(0.0, f64::max);
            (*name, if scale == 0.0 { 0.0 } else { diff / scale })
        })
        .collect()
}
