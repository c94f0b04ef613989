//! The recurrent driving policy.
//!
//! Each 10 Hz step maps a raw LiDAR scan and the ego speed to a speed and
//! steering command:
//!
//! 1. every range `x` becomes a pressure token `σ(x) = 2·(1 − 1/(1 + e^(−k·x)))`,
//!    which is 1 at contact and decays toward 0 with distance;
//! 2. the speed passes through a learned affine embedding `ψ(v)`, or is replaced
//!    by the learned mask token during training;
//! 3. a single GRU cell folds `tokens ∥ embedding` into the hidden state;
//! 4. a two-layer ReLU MLP decodes the hidden state into `(v, δ)`.
//!
//! Training happens in double precision; [`fast`] holds a single-precision copy
//! for latency measurements.

pub mod fast;

use std::io::{Read, Write};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayViewMut1, Zip};
use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch { what: &'static str, expected: usize, got: usize },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("invalid policy config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub n_beams: usize,
    pub embed_dim: usize,
    /// Hidden width as a multiple of the input width.
    pub hidden_multiplier: usize,
    /// Decoder width; `hidden_dim / 4` when unset.
    pub mlp_hidden: Option<usize>,
    /// Steepness of the pressure sigmoid, per meter.
    pub sigmoid_k: f64,
    /// When false the speed embedding is left out of the input entirely.
    pub use_speed_input: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { n_beams: 360, embed_dim: 16, hidden_multiplier: 4, mlp_hidden: None, sigmoid_k: 0.5, use_speed_input: true }
    }
}

impl PolicyConfig {
    pub fn input_dim(&self) -> usize {
        self.n_beams + if self.use_speed_input { self.embed_dim } else { 0 }
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_multiplier * self.input_dim()
    }

    pub fn mlp_dim(&self) -> usize {
        self.mlp_hidden.unwrap_or_else(|| (self.hidden_dim() / 4).max(1))
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::InvalidConfig(m.into()));
        if self.n_beams == 0 || self.hidden_multiplier == 0 || self.mlp_dim() == 0 {
            return bad("n_beams, hidden_multiplier and mlp_hidden must be positive");
        }
        if self.use_speed_input && self.embed_dim == 0 {
            return bad("embed_dim must be positive when the speed input is used");
        }
        if !(self.sigmoid_k > 0.0 && self.sigmoid_k.is_finite()) {
            return bad("sigmoid_k must be positive");
        }
        Ok(())
    }

    /// Multiply-accumulates per `forward_step`.
    pub fn macs_per_step(&self) -> usize {
        let (i, h, m) = (self.input_dim(), self.hidden_dim(), self.mlp_dim());
        3 * h * (i + h) + m * h + 2 * m
    }
}

/// All learnable tensors. Gate blocks inside the GRU matrices are stacked in the
/// order update, reset, candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParameters {
    /// `3H × I`
    pub w_ih: Array2<f64>,
    /// `3H × H`
    pub w_hh: Array2<f64>,
    pub b_ih: Array1<f64>,
    pub b_hh: Array1<f64>,
    pub psi_w: Array1<f64>,
    pub psi_b: Array1<f64>,
    pub e_mask: Array1<f64>,
    /// `M × H`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `2 × M`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Tensor names in checkpoint order.
pub const TENSOR_NAMES: [&str; 11] = ["w_ih", "w_hh", "b_ih", "b_hh", "psi_w", "psi_b", "e_mask", "w1", "b1", "w2", "b2"];

impl PolicyParameters {
    pub fn zeros(cfg: &PolicyConfig) -> Self {
        let (i, h, m, e) = (cfg.input_dim(), cfg.hidden_dim(), cfg.mlp_dim(), cfg.embed_dim);
        Self {
            w_ih: Array2::zeros((3 * h, i)),
            w_hh: Array2::zeros((3 * h, h)),
            b_ih: Array1::zeros(3 * h),
            b_hh: Array1::zeros(3 * h),
            psi_w: Array1::zeros(e),
            psi_b: Array1::zeros(e),
            e_mask: Array1::zeros(e),
            w1: Array2::zeros((m, h)),
            b1: Array1::zeros(m),
            w2: Array2::zeros((2, m)),
            b2: Array1::zeros(2),
        }
    }

    /// Flat views of every tensor in checkpoint order.
    pub fn tensors(&self) -> [ArrayView1<'_, f64>; 11] {
        fn flat(a: &Array2<f64>) -> ArrayView1<'_, f64> {
            a.view().into_shape_with_order(a.len()).expect("standard layout")
        }
        [
            flat(&self.w_ih),
            flat(&self.w_hh),
            self.b_ih.view(),
            self.b_hh.view(),
            self.psi_w.view(),
            self.psi_b.view(),
            self.e_mask.view(),
            flat(&self.w1),
            self.b1.view(),
            flat(&self.w2),
            self.b2.view(),
        ]
    }

    pub fn tensors_mut(&mut self) -> [ArrayViewMut1<'_, f64>; 11] {
        fn flat(a: &mut Array2<f64>) -> ArrayViewMut1<'_, f64> {
            let n = a.len();
            a.view_mut().into_shape_with_order(n).expect("standard layout")
        }
        [
            flat(&mut self.w_ih),
            flat(&mut self.w_hh),
            self.b_ih.view_mut(),
            self.b_hh.view_mut(),
            self.psi_w.view_mut(),
            self.psi_b.view_mut(),
            self.e_mask.view_mut(),
            flat(&mut self.w1),
            self.b1.view_mut(),
            flat(&mut self.w2),
            self.b2.view_mut(),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Checks every shape against `cfg`.
    pub fn check_shapes(&self, cfg: &PolicyConfig) -> Result<(), PolicyError> {
        let want = PolicyParameters::zeros(cfg);
        for (name, (a, b)) in TENSOR_NAMES.iter().zip(self.tensors().iter().zip(want.tensors().iter())) {
            if a.len() != b.len() {
                return Err(PolicyError::ShapeMismatch { what: name, expected: b.len(), got: a.len() });
            }
        }
        if self.w_ih.dim() != want.w_ih.dim() || self.w1.dim() != want.w1.dim() {
            return Err(PolicyError::ShapeMismatch { what: "matrix layout", expected: want.w_ih.ncols(), got: self.w_ih.ncols() });
        }
        Ok(())
    }
}

/// Uniform initialization in `±1/√hidden_dim`, drawn tensor by tensor in
/// checkpoint order.
pub fn init_params<R: Rng + ?Sized>(cfg: &PolicyConfig, rng: &mut R) -> PolicyParameters {
    let bound = 1.0 / (cfg.hidden_dim() as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let mut p = PolicyParameters::zeros(cfg);
    for mut t in p.tensors_mut() {
        t.iter_mut().for_each(|x| *x = dist.sample(rng));
    }
    p
}

/// Pressure token for one range reading.
pub fn pressure(x: f64, k: f64) -> f64 {
    let e = (-k * x).exp();
    2.0 * e / (1.0 + e)
}

pub fn normalize_scan(ranges: &[f64], k: f64) -> Vec<f64> {
    ranges.iter().map(|&x| pressure(x, k)).collect()
}

/// Speed embedding, or the mask token when `masked`.
pub fn embed_speed(v: f64, params: &PolicyParameters, masked: bool) -> Array1<f64> {
    if masked {
        params.e_mask.clone()
    } else {
        &params.psi_w * v + &params.psi_b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState(pub Array1<f64>);

impl HiddenState {
    pub fn zeros(cfg: &PolicyConfig) -> Self {
        Self(Array1::zeros(cfg.hidden_dim()))
    }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One GRU cell update.
pub fn gru_step(x: ArrayView1<'_, f64>, h: &HiddenState, params: &PolicyParameters) -> Result<HiddenState, PolicyError> {
    let hd = params.w_hh.ncols();
    if x.len() != params.w_ih.ncols() {
        return Err(PolicyError::ShapeMismatch { what: "gru input", expected: params.w_ih.ncols(), got: x.len() });
    }
    if h.0.len() != hd {
        return Err(PolicyError::ShapeMismatch { what: "hidden state", expected: hd, got: h.0.len() });
    }
    let gx = params.w_ih.dot(&x) + &params.b_ih;
    let gh = params.w_hh.dot(&h.0) + &params.b_hh;
    let mut out = Array1::zeros(hd);
    Zip::indexed(&mut out).for_each(|j, o| {
        let u = logistic(gx[j] + gh[j]);
        let r = logistic(gx[hd + j] + gh[hd + j]);
        let n = (gx[2 * hd + j] + r * gh[2 * hd + j]).tanh();
        *o = (1.0 - u) * n + u * h.0[j];
    });
    Ok(HiddenState(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub v: f64,
    pub delta: f64,
}

pub fn decode(h: &HiddenState, params: &PolicyParameters) -> Result<Action, PolicyError> {
    if h.0.len() != params.w1.ncols() {
        return Err(PolicyError::ShapeMismatch { what: "decoder input", expected: params.w1.ncols(), got: h.0.len() });
    }
    let a1 = (params.w1.dot(&h.0) + &params.b1).mapv(|z| z.max(0.0));
    let y = params.w2.dot(&a1) + &params.b2;
    Ok(Action { v: y[0], delta: y[1] })
}

/// GRU input for one frame: pressure tokens, then the speed embedding if enabled.
pub fn build_input(ranges: &[f64], v: f64, params: &PolicyParameters, cfg: &PolicyConfig, masked: bool) -> Array1<f64> {
    let mut x = Array1::zeros(cfg.input_dim());
    for (dst, &r) in x.iter_mut().zip(ranges) {
        *dst = pressure(r, cfg.sigmoid_k);
    }
    if cfg.use_speed_input {
        x.slice_mut(s![cfg.n_beams..]).assign(&embed_speed(v, params, masked));
    }
    x
}

pub fn forward_step(
    ranges: &[f64],
    v: f64,
    h: &HiddenState,
    params: &PolicyParameters,
    cfg: &PolicyConfig,
    masked: bool,
) -> Result<(Action, HiddenState), PolicyError> {
    if ranges.len() != cfg.n_beams {
        return Err(PolicyError::ShapeMismatch { what: "scan", expected: cfg.n_beams, got: ranges.len() });
    }
    let x = build_input(ranges, v, params, cfg, masked);
    let h = gru_step(x.view(), h, params)?;
    Ok((decode(&h, params)?, h))
}

const MAGIC: &[u8; 4] = b"E2R1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Magic, version, length-prefixed JSON config, then every tensor in
/// [`TENSOR_NAMES`] order as little-endian f64.
pub fn save_checkpoint<W: Write>(params: &PolicyParameters, cfg: &PolicyConfig, mut out: W) -> Result<(), PolicyError> {
    params.check_shapes(cfg)?;
    let json = serde_json::to_vec(cfg).expect("config serializes");
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::with_capacity(params.num_params() * 8);
    for t in params.tensors() {
        for &x in t.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint<R: Read>(mut input: R) -> Result<(PolicyParameters, PolicyConfig), PolicyError> {
    let corrupt = |m: &str| PolicyError::CorruptCheckpoint(m.into());
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(corrupt("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(PolicyError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes.get(12..12 + json_len).ok_or_else(|| corrupt("truncated config block"))?;
    let cfg: PolicyConfig = serde_json::from_slice(body).map_err(|e| corrupt(&format!("config block: {e}")))?;
    cfg.validate().map_err(|e| corrupt(&e.to_string()))?;
    let mut params = PolicyParameters::zeros(&cfg);
    let data = &bytes[12 + json_len..];
    if data.len() != params.num_params() * 8 {
        return Err(corrupt(&format!("expected {} tensor bytes, found {}", params.num_params() * 8, data.len())));
    }
    let mut chunks = data.chunks_exact(8);
    for mut t in params.tensors_mut() {
        for x in t.iter_mut() {
            *x = f64::from_le_bytes(chunks.next().unwrap().try_into().unwrap());
        }
    }
    Ok((params, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> PolicyConfig {
        PolicyConfig { n_beams: 8, embed_dim: 2, hidden_multiplier: 2, ..Default::default() }
    }

    #[test]
    fn pressure_reference_points() {
        assert_eq!(pressure(0.0, 0.5), 1.0);
        assert_abs_diff_eq!(pressure(2.0 * 3f64.ln(), 0.5), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(pressure(30.0, 0.5), 6.1e-7, epsilon = 1e-8);
    }

    #[test]
    fn dims() {
        let c = PolicyConfig::default();
        assert_eq!((c.input_dim(), c.hidden_dim(), c.mlp_dim()), (376, 1504, 376));
        let l = PolicyConfig { use_speed_input: false, ..c };
        assert_eq!(l.input_dim(), 360);
    }

    #[test]
    fn zero_params_halve_hidden() {
        let cfg = tiny();
        let p = PolicyParameters::zeros(&cfg);
        let h = HiddenState(Array1::linspace(-0.9, 0.9, cfg.hidden_dim()));
        let x = Array1::from_elem(cfg.input_dim(), 0.7);
        let out = gru_step(x.view(), &h, &p).unwrap();
        for (a, b) in out.0.iter().zip(h.0.iter()) {
            assert_eq!(*a, 0.5 * b);
        }
        let z = gru_step(x.view(), &HiddenState::zeros(&cfg), &p).unwrap();
        assert!(z.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decoder_hand_instance() {
        let cfg = PolicyConfig { n_beams: 1, embed_dim: 1, hidden_multiplier: 2, mlp_hidden: Some(2), ..Default::default() };
        let mut p = PolicyParameters::zeros(&cfg);
        p.w1 = ndarray::arr2(&[[1.0, -2.0, 0.5, 0.0], [0.3, 0.3, 0.3, 0.3]]);
        p.b1 = ndarray::arr1(&[0.1, -5.0]);
        p.w2 = ndarray::arr2(&[[2.0, 1.0], [-1.0, 4.0]]);
        p.b2 = ndarray::arr1(&[0.25, -0.5]);
        let h = HiddenState(ndarray::arr1(&[0.5, -0.25, 0.8, 0.1]));
        // z1 = [0.5 + 0.5 + 0.4 + 0.1, 0.345 - 5] -> relu [1.5, 0]
        let a = decode(&h, &p).unwrap();
        assert_abs_diff_eq!(a.v, 2.0 * 1.5 + 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(a.delta, -1.5 - 0.5, epsilon = 1e-12);
    }

    #[test]
    fn bias_passthrough() {
        let cfg = tiny();
        let mut p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        p.w2.fill(0.0);
        p.b2 = ndarray::arr1(&[3.0, 0.1]);
        let h = HiddenState(Array1::from_elem(cfg.hidden_dim(), 0.3));
        assert_eq!(decode(&h, &p).unwrap(), Action { v: 3.0, delta: 0.1 });
    }

    #[test]
    fn masked_embedding_is_token() {
        let cfg = tiny();
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(embed_speed(123.0, &p, true), p.e_mask);
        assert_eq!(embed_speed(0.0, &p, false), p.psi_b);
    }

    #[test]
    fn init_bounds_and_seeds() {
        let cfg = tiny();
        let a = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let b = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let c = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = 1.0 / (cfg.hidden_dim() as f64).sqrt();
        assert!(a.tensors().iter().all(|t| t.iter().all(|x| x.abs() <= bound)));
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let cfg = PolicyConfig { hidden_multiplier: 8, ..tiny() };
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let mut buf = Vec::new();
        save_checkpoint(&p, &cfg, &mut buf).unwrap();
        let (q, c2) = load_checkpoint(&buf[..]).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(q, p);
        assert!(matches!(load_checkpoint(&buf[..buf.len() - 1]), Err(PolicyError::CorruptCheckpoint(_))));
        let mut v2 = buf.clone();
        v2[4] = 2;
        assert!(matches!(load_checkpoint(&v2[..]), Err(PolicyError::VersionMismatch { found: 2, .. })));
    }

    #[test]
    fn lidar_only_ignores_speed() {
        let cfg = PolicyConfig { use_speed_input: false, ..tiny() };
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(6));
        let scan = [1.0, 2.0, 3.0, 0.5, 8.0, 2.0, 1.0, 4.0];
        let h = HiddenState::zeros(&cfg);
        let a = forward_step(&scan, 0.0, &h, &p, &cfg, false).unwrap();
        let b = forward_step(&scan, 7.5, &h, &p, &cfg, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_errors() {
        let cfg = tiny();
        let p = PolicyParameters::zeros(&cfg);
        let h = HiddenState::zeros(&cfg);
        assert!(matches!(forward_step(&[1.0; 5], 1.0, &h, &p, &cfg, false), Err(PolicyError::ShapeMismatch { .. })));
        let wrong = PolicyParameters::zeros(&PolicyConfig { hidden_multiplier: 3, ..cfg });
        assert!(wrong.check_shapes(&cfg).is_err());
    }
}
