//! Kuramoto–Sivashinsky `u_t = −u u_y − u_yy − μ u_yyyy` on a periodic
//! domain, integrated pseudo-spectrally with ETDRK4.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::datagen::{split_series, Dataset, GroundTruth, TimeSeries};
use crate::error::{Error, Result};

const CONTOUR_POINTS: usize = 32;
const BLOW_UP: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KsInitial {
    /// `cos(2πy/L)(1 + sin(2πy/L))`.
    Default,
    /// The default plus `amplitude · Σ_{m ≤ modes} (a_m cos + b_m sin)(2πmy/L)`
    /// with standard-normal `a_m, b_m` drawn from `seed`.
    Perturbed { seed: u64, amplitude: f64, modes: usize },
    /// `amplitude · cos(2π·mode·y/L)`.
    Mode { mode: usize, amplitude: f64 },
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KsConfig {
    pub viscosity: f64,
    pub length: f64,
    pub grid: usize,
    pub step: f64,
    /// Solver steps per stored point.
    pub stride: usize,
    pub n_points: usize,
    pub n_series: usize,
    pub points_per_series: usize,
    pub initial: KsInitial,
}

impl Default for KsConfig {
    fn default() -> Self {
        Self {
            viscosity: 1.0,
            length: 22.0,
            grid: 64,
            step: 0.025,
            stride: 10,
            n_points: 1000,
            n_series: 40,
            points_per_series: 25,
            initial: KsInitial::Default,
        }
    }
}

impl KsConfig {
    pub fn output_dt(&self) -> f64 {
        self.step * self.stride as f64
    }

    fn validate(&self) -> Result<()> {
        if self.grid < 4 || self.grid % 2 != 0 {
            return Err(Error::Parameter(format!("grid must be even and ≥ 4, got {}", self.grid)));
        }
        if !(self.step > 0.0 && self.length > 0.0 && self.viscosity > 0.0) || self.stride == 0 {
            return Err(Error::Parameter("step, length, viscosity and stride must be positive".into()));
        }
        Ok(())
    }
}

pub fn ks_initial_state(config: &KsConfig) -> Vec<f64> {
    let n = config.grid;
    let y: Vec<f64> = (0..n).map(|j| config.length * j as f64 / n as f64).collect();
    let w = 2.0 * PI / config.length;
    let base = |y: f64| (w * y).cos() * (1.0 + (w * y).sin());
    match &config.initial {
        KsInitial::Default => y.iter().map(|&y| base(y)).collect(),
        KsInitial::Perturbed { seed, amplitude, modes } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let coef: Vec<(f64, f64)> = (0..*modes)
                .map(|_| (rng.sample(StandardNormal), rng.sample(StandardNormal)))
                .collect();
            y.iter()
                .map(|&y| {
                    let p: f64 = coef
                        .iter()
                        .enumerate()
                        .map(|(m, (a, b))| {
                            let k = w * (m + 1) as f64;
                            a * (k * y).cos() + b * (k * y).sin()
                        })
                        .sum();
                    base(y) + amplitude * p
                })
                .collect()
        }
        KsInitial::Mode { mode, amplitude } => y.iter().map(|&y| amplitude * (w * *mode as f64 * y).cos()).collect(),
        KsInitial::Zero => vec![0.0; n],
    }
}

/// Precomputed ETDRK4 operators for one grid and step.
pub struct KsSolver {
    n: usize,
    /// Linear symbol `k² − μk⁴`.
    linear: Vec<f64>,
    /// `−½ i k` on retained modes, zero on those removed by the 2/3 rule
    /// (and on the Nyquist mode).
    nonlinear: Vec<Complex64>,
    e: Vec<f64>,
    e2: Vec<f64>,
    q: Vec<f64>,
    f1: Vec<f64>,
    f2: Vec<f64>,
    f3: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
}

impl KsSolver {
    pub fn new(config: &KsConfig) -> Result<Self> {
        config.validate()?;
        let n = config.grid;
        let h = config.step;
        let mut linear = Vec::with_capacity(n);
        let mut nonlinear = Vec::with_capacity(n);
        let cutoff = n / 3;
        for j in 0..n {
            let m = if j <= n / 2 { j as i64 } else { j as i64 - n as i64 };
            let k = 2.0 * PI / config.length * m as f64;
            linear.push(k * k - config.viscosity * k.powi(4));
            let keep = m.unsigned_abs() as usize <= cutoff && j != n / 2;
            nonlinear.push(if keep { Complex64::new(0.0, -0.5 * k) } else { Complex64::new(0.0, 0.0) });
        }
        let e = linear.iter().map(|l| (h * l).exp()).collect();
        let e2 = linear.iter().map(|l| (h * l / 2.0).exp()).collect();
        let roots: Vec<Complex64> = (0..CONTOUR_POINTS)
            .map(|j| Complex64::from_polar(1.0, 2.0 * PI * (j as f64 + 0.5) / CONTOUR_POINTS as f64))
            .collect();
        let contour_mean = |l: f64, g: &dyn Fn(Complex64) -> Complex64| -> f64 {
            let s: Complex64 = roots.iter().map(|r| g(h * l + r)).sum();
            h * (s / CONTOUR_POINTS as f64).re
        };
        let q = linear.iter().map(|&l| contour_mean(l, &|z| ((z / 2.0).exp() - 1.0) / z)).collect();
        let f1 = linear
            .iter()
            .map(|&l| contour_mean(l, &|z| (-4.0 - z + z.exp() * (4.0 - 3.0 * z + z * z)) / z.powi(3)))
            .collect();
        let f2 = linear
            .iter()
            .map(|&l| contour_mean(l, &|z| (2.0 + z + z.exp() * (z - 2.0)) / z.powi(3)))
            .collect();
        let f3 = linear
            .iter()
            .map(|&l| contour_mean(l, &|z| (-4.0 - 3.0 * z - z * z + z.exp() * (4.0 - z)) / z.powi(3)))
            .collect();
        let mut planner = FftPlanner::new();
        Ok(Self {
            n,
            linear,
            nonlinear,
            e,
            e2,
            q,
            f1,
            f2,
            f3,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
            scratch: vec![Complex64::new(0.0, 0.0); n],
        })
    }

    pub fn to_spectral(&self, u: &[f64]) -> Vec<Complex64> {
        let mut v: Vec<Complex64> = u.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.fwd.process(&mut v);
        v
    }

    pub fn to_physical(&self, v: &[Complex64]) -> Vec<f64> {
        let mut w = v.to_vec();
        self.inv.process(&mut w);
        w.iter().map(|z| z.re / self.n as f64).collect()
    }

    /// Dealiased `−½ i k · FFT(u²)` for spectral state `v`.
    pub fn nonlinear_term(&mut self, v: &[Complex64], out: &mut [Complex64]) {
        let n = self.n as f64;
        self.scratch.copy_from_slice(v);
        self.inv.process(&mut self.scratch);
        for z in self.scratch.iter_mut() {
            let u = z.re / n;
            *z = Complex64::new(u * u, 0.0);
        }
        self.fwd.process(&mut self.scratch);
        for ((o, s), g) in out.iter_mut().zip(&self.scratch).zip(&self.nonlinear) {
            *o = g * s;
        }
    }

    /// Full right-hand side `L v + N(v)` of the semi-discrete system.
    pub fn rhs(&mut self, v: &[Complex64], out: &mut [Complex64]) {
        self.nonlinear_term(v, out);
        for ((o, x), l) in out.iter_mut().zip(v).zip(&self.linear) {
            *o += l * x;
        }
    }

    /// One ETDRK4 step in place.
    pub fn step(&mut self, v: &mut [Complex64]) {
        let n = self.n;
        let zero = Complex64::new(0.0, 0.0);
        let (mut nv, mut na, mut nb, mut nc) = (vec![zero; n], vec![zero; n], vec![zero; n], vec![zero; n]);
        self.nonlinear_term(v, &mut nv);
        let a: Vec<Complex64> = (0..n).map(|j| v[j] * self.e2[j] + nv[j] * self.q[j]).collect();
        self.nonlinear_term(&a, &mut na);
        let b: Vec<Complex64> = (0..n).map(|j| v[j] * self.e2[j] + na[j] * self.q[j]).collect();
        self.nonlinear_term(&b, &mut nb);
        let c: Vec<Complex64> = (0..n).map(|j| a[j] * self.e2[j] + (nb[j] * 2.0 - nv[j]) * self.q[j]).collect();
        self.nonlinear_term(&c, &mut nc);
        for j in 0..n {
            v[j] = v[j] * self.e[j] + nv[j] * self.f1[j] + (na[j] + nb[j]) * (2.0 * self.f2[j]) + nc[j] * self.f3[j];
        }
    }
}

/// Integrates from the configured initial condition and returns `n_points`
/// physical-space states spaced `step · stride` apart, starting at `t = 0`.
pub fn etdrk4_ks(config: &KsConfig) -> Result<TimeSeries> {
    let mut solver = KsSolver::new(config)?;
    let mut v = solver.to_spectral(&ks_initial_state(config));
    let dt = config.output_dt();
    let mut times = Vec::with_capacity(config.n_points);
    let mut states = Vec::with_capacity(config.n_points);
    for i in 0..config.n_points {
        if i > 0 {
            for s in 0..config.stride {
                solver.step(&mut v);
                if v.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                    return Err(Error::Divergence {
                        step: (i - 1) * config.stride + s + 1,
                        detail: "non-finite spectral state".into(),
                    });
                }
            }
        }
        let u = solver.to_physical(&v);
        if u.iter().any(|x| x.abs() > BLOW_UP) {
            return Err(Error::Divergence {
                step: i * config.stride,
                detail: format!("|u| exceeded {BLOW_UP:e}"),
            });
        }
        times.push(i as f64 * dt);
        states.push(u);
    }
    TimeSeries::new(times, states)
}

pub fn gen_ks(config: &KsConfig, seed: u64) -> Result<Dataset> {
    let traj = etdrk4_ks(config)?;
    let series = split_series(&traj, config.n_series, config.points_per_series)?;
    let ic = serde_json::to_string(&config.initial).expect("initial condition serializes");
    Dataset::new("ks", config, seed, GroundTruth::Ks { initial_condition: ic }, series)
}
