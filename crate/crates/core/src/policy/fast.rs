//! Single-precision inference copy of a policy, used for latency measurements.

use super::{PolicyConfig, PolicyParameters};

/// f32 weights in row-major order plus scratch buffers; `step` allocates nothing.
pub struct FastPolicy {
    cfg: PolicyConfig,
    w_ih: Vec<f32>,
    w_hh: Vec<f32>,
    b_ih: Vec<f32>,
    b_hh: Vec<f32>,
    psi_w: Vec<f32>,
    psi_b: Vec<f32>,
    w1: Vec<f32>,
    b1: Vec<f32>,
    w2: Vec<f32>,
    b2: Vec<f32>,
    x: Vec<f32>,
    gx: Vec<f32>,
    gh: Vec<f32>,
    a1: Vec<f32>,
}

fn to_f32<'a>(it: impl IntoIterator<Item = &'a f64>) -> Vec<f32> {
    it.into_iter().map(|&x| x as f32).collect()
}

impl FastPolicy {
    pub fn new(params: &PolicyParameters, cfg: &PolicyConfig) -> Self {
        let (i, h, m) = (cfg.input_dim(), cfg.hidden_dim(), cfg.mlp_dim());
        Self {
            cfg: *cfg,
            w_ih: to_f32(params.w_ih.iter()),
            w_hh: to_f32(params.w_hh.iter()),
            b_ih: to_f32(params.b_ih.iter()),
            b_hh: to_f32(params.b_hh.iter()),
            psi_w: to_f32(params.psi_w.iter()),
            psi_b: to_f32(params.psi_b.iter()),
            w1: to_f32(params.w1.iter()),
            b1: to_f32(params.b1.iter()),
            w2: to_f32(params.w2.iter()),
            b2: to_f32(params.b2.iter()),
            x: vec![0.0; i],
            gx: vec![0.0; 3 * h],
            gh: vec![0.0; 3 * h],
            a1: vec![0.0; m],
        }
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    /// One forward step; updates `h` in place and returns `(v, δ)`.
    pub fn step(&mut self, ranges: &[f32], v: f32, h: &mut [f32]) -> (f32, f32) {
        let cfg = &self.cfg;
        let (nb, hd) = (cfg.n_beams, cfg.hidden_dim());
        let k = cfg.sigmoid_k as f32;
        for (dst, &r) in self.x[..nb].iter_mut().zip(ranges) {
            let e = (-k * r).exp();
            *dst = 2.0 * e / (1.0 + e);
        }
        if cfg.use_speed_input {
            for (j, dst) in self.x[nb..].iter_mut().enumerate() {
                *dst = self.psi_w[j] * v + self.psi_b[j];
            }
        }
        matvec(&self.w_ih, &self.x, &self.b_ih, &mut self.gx);
        matvec(&self.w_hh, h, &self.b_hh, &mut self.gh);
        for j in 0..hd {
            let u = 1.0 / (1.0 + (-(self.gx[j] + self.gh[j])).exp());
            let r = 1.0 / (1.0 + (-(self.gx[hd + j] + self.gh[hd + j])).exp());
            let n = (self.gx[2 * hd + j] + r * self.gh[2 * hd + j]).tanh();
            h[j] = (1.0 - u) * n + u * h[j];
        }
        matvec(&self.w1, h, &self.b1, &mut self.a1);
        self.a1.iter_mut().for_each(|z| *z = z.max(0.0));
        let mut y = [0f32; 2];
        matvec(&self.w2, &self.a1, &self.b2, &mut y);
        (y[0], y[1])
    }
}

/// `out = W·x + b` for row-major `W`.
pub fn matvec(w: &[f32], x: &[f32], b: &[f32], out: &mut [f32]) {
    debug_assert_eq!(w.len(), x.len() * out.len());
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { matvec_avx2(w, x, b, out) };
            return;
        }
    }
    matvec_scalar(w, x, b, out);
}

fn matvec_scalar(w: &[f32], x: &[f32], b: &[f32], out: &mut [f32]) {
    let n = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * n..(r + 1) * n];
        let mut acc = [0f32; 8];
        let mut chunks = row.chunks_exact(8).zip(x.chunks_exact(8));
        for (a, v) in &mut chunks {
            for l in 0..8 {
                acc[l] += a[l] * v[l];
            }
        }
        let tail: f32 = row[n / 8 * 8..].iter().zip(&x[n / 8 * 8..]).map(|(a, v)| a * v).sum();
        *o = acc.iter().sum::<f32>() + tail + b[r];
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matvec_avx2(w: &[f32], x: &[f32], b: &[f32], out: &mut [f32]) {
    use std::arch::x86_64::*;
    let n = x.len();
    let main = n / 32 * 32;
    for (r, o) in out.iter_mut().enumerate() {
        let row = w.as_ptr().add(r * n);
        let xp = x.as_ptr();
        let mut acc = [_mm256_setzero_ps(); 4];
        let mut c = 0;
        while c < main {
            for (l, a) in acc.iter_mut().enumerate() {
                let off = c + 8 * l;
                *a = _mm256_fmadd_ps(_mm256_loadu_ps(row.add(off)), _mm256_loadu_ps(xp.add(off)), *a);
            }
            c += 32;
        }
        let s = _mm256_add_ps(_mm256_add_ps(acc[0], acc[1]), _mm256_add_ps(acc[2], acc[3]));
        let mut lanes = [0f32; 8];
        _mm256_storeu_ps(lanes.as_mut_ptr(), s);
        let mut total: f32 = lanes.iter().sum();
        for j in main..n {
            total += *row.add(j) * x[j];
        }
        *o = total + b[r];
    }
}
