use num_complex::Complex64;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{rk4_integrate, Dataset, GroundTruth, TimeSeries};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearOdeConfig {
    pub matrix: [[f64; 2]; 2],
    pub y0: [f64; 2],
    pub t_max: f64,
    pub step: f64,
    pub n_series: usize,
    pub points_per_series: usize,
    /// Draw each series as a sorted random subset of solver steps instead
    /// of a regular stride.
    pub irregular: bool,
}

impl Default for LinearOdeConfig {
    fn default() -> Self {
        Self {
            matrix: [[-5.0, 2.0], [2.0, -5.0]],
            y0: [10.0, -3.0],
            t_max: 2.0,
            step: 2.5e-4,
            n_series: 40,
            points_per_series: 150,
            irregular: true,
        }
    }
}

impl LinearOdeConfig {
    fn n_steps(&self) -> Result<usize> {
        if !(self.step > 0.0) || !(self.t_max > 0.0) {
            return Err(Error::Parameter("step and t_max must be positive".into()));
        }
        Ok((self.t_max / self.step).round() as usize)
    }
}

/// `exp(A t) y0` through the 2×2 Cayley–Hamilton form
/// `e^{st}[cosh(qt) I + sinh(qt)/q (A − sI)]`, `s = tr A / 2`,
/// `q² = s² − det A`.
pub fn linear_ode_exact(matrix: &[[f64; 2]; 2], y0: &[f64; 2], t: f64) -> [f64; 2] {
    let [[a, b], [c, d]] = *matrix;
    let s = 0.5 * (a + d);
    let q = Complex64::new(s * s - (a * d - b * c), 0.0).sqrt();
    let ch = (q * t).cosh();
    let sh_q = if q.norm() < 1e-300 { Complex64::new(t, 0.0) } else { (q * t).sinh() / q };
    let e = (s * t).exp();
    let m = |diag: f64, off: f64| (e * (ch * diag + sh_q * off)).re;
    [
        m(1.0, a - s) * y0[0] + m(0.0, b) * y0[1],
        m(0.0, c) * y0[0] + m(1.0, d - s) * y0[1],
    ]
}

fn ground_truth(matrix: &[[f64; 2]; 2]) -> GroundTruth {
    let [[a, b], [c, d]] = *matrix;
    let s = 0.5 * (a + d);
    let disc = s * s - (a * d - b * c);
    if disc < 0.0 {
        return GroundTruth::LinearOde {
            rates: vec![],
            eigenvectors: vec![],
        };
    }
    let mut rates = Vec::new();
    let mut eigenvectors = Vec::new();
    for mu in [s + disc.sqrt(), s - disc.sqrt()] {
        // null vector of (A − μI)
        let v = if b.abs() > 1e-14 || (a - mu).abs() > 1e-14 { [b, mu - a] } else { [mu - d, c] };
        let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
        rates.push(-mu);
        eigenvectors.push(if n > 0.0 { [v[0] / n, v[1] / n] } else { [1.0, 0.0] });
    }
    GroundTruth::LinearOde { rates, eigenvectors }
}

/// Integrates once with RK4, then draws the series. Irregular series are
/// the initial state plus a sorted uniform subset of the remaining steps,
/// one generator stream per series; regular series take every `k`-th step
/// from offset `j`.
pub fn gen_linear_ode(config: &LinearOdeConfig, seed: u64) -> Result<Dataset> {
    let n_steps = config.n_steps()?;
    let m = config.matrix;
    let traj = rk4_integrate(
        |_, x, d| {
            d[0] = m[0][0] * x[0] + m[0][1] * x[1];
            d[1] = m[1][0] * x[0] + m[1][1] * x[1];
        },
        &config.y0,
        config.step,
        n_steps,
    )?;
    let stored = traj.len();
    let (n, p) = (config.n_series, config.points_per_series);
    if n == 0 || p == 0 || p > stored {
        return Err(Error::Parameter(format!(
            "{p} points per series from {stored} stored steps (series count {n})"
        )));
    }
    let pick = |idx: &[usize]| TimeSeries {
        times: idx.iter().map(|&i| traj.times[i]).collect(),
        states: idx.iter().map(|&i| traj.states[i].clone()).collect(),
    };
    let series: Vec<TimeSeries> = if config.irregular {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|j| {
                rng.set_stream(j as u64);
                let mut idx: Vec<usize> = index::sample(&mut rng, stored - 1, p - 1).into_iter().map(|i| i + 1).collect();
                idx.push(0);
                idx.sort_unstable();
                pick(&idx)
            })
            .collect()
    } else {
        let stride = if p == 1 { 1 } else { (stored - n) / (p - 1) };
        if stride == 0 || n - 1 + stride * (p - 1) >= stored {
            return Err(Error::Parameter(format!(
                "{n} regular series of {p} points do not fit in {stored} steps"
            )));
        }
        (0..n)
            .map(|j| pick(&(0..p).map(|k| j + k * stride).collect::<Vec<_>>()))
            .collect()
    };
    Dataset::new("linear-ode", config, seed, ground_truth(&config.matrix), series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_solution_matches_eigendecomposition() {
        let cfg = LinearOdeConfig::default();
        // y = α(1,1)e^{-3t} + β(1,-1)e^{-7t}, α = 3.5, β = 6.5
        for t in [0.0, 0.3, 1.0, 2.0] {
            let y = linear_ode_exact(&cfg.matrix, &cfg.y0, t);
            let (e3, e7) = ((-3.0 * t).exp(), (-7.0 * t).exp());
            assert!((y[0] - (3.5 * e3 + 6.5 * e7)).abs() < 1e-12);
            assert!((y[1] - (3.5 * e3 - 6.5 * e7)).abs() < 1e-12);
        }
        // rotation: complex eigenvalues
        let rot = [[0.0, 1.0], [-1.0, 0.0]];
        let y = linear_ode_exact(&rot, &[1.0, 0.0], 0.7);
        assert!((y[0] - 0.7f64.cos()).abs() < 1e-14 && (y[1] + 0.7f64.sin()).abs() < 1e-14);
    }

    #[test]
    fn rk4_matches_closed_form_at_t1() {
        let cfg = LinearOdeConfig::default();
        let m = cfg.matrix;
        let tr = rk4_integrate(
            |_, x, d| {
                d[0] = m[0][0] * x[0] + m[0][1] * x[1];
                d[1] = m[1][0] * x[0] + m[1][1] * x[1];
            },
            &cfg.y0,
            cfg.step,
            4000,
        )
        .unwrap();
        let exact = linear_ode_exact(&m, &cfg.y0, 1.0);
        let err = (0..2).map(|i| (tr.states[4000][i] - exact[i]).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-10, "err {err}");
    }

    #[test]
    fn default_dataset_shape_and_subset_property() {
        let cfg = LinearOdeConfig::default();
        let ds = gen_linear_ode(&cfg, 1).unwrap();
        assert_eq!(ds.series.len(), 40);
        assert!(ds.series.iter().all(|s| s.len() == 150));
        assert_eq!(ds.series[0].times[0], 0.0);
        assert_eq!(ds.series[0].states[0], vec![10.0, -3.0]);
        for s in &ds.series {
            for &t in &s.times {
                let k = (t / cfg.step).round();
                assert_eq!(k * cfg.step, t);
            }
            assert!(s.steps().iter().all(|&h| h > 0.0));
        }
        let steps: Vec<f64> = ds.series[3].steps();
        assert!(steps.iter().any(|&h| (h - steps[0]).abs() > 1e-9), "irregular spacing expected");
        match ds.manifest.ground_truth {
            GroundTruth::LinearOde { ref rates, ref eigenvectors } => {
                assert!((rates[0] - 3.0).abs() < 1e-12 && (rates[1] - 7.0).abs() < 1e-12);
                assert!((eigenvectors[0][0] - eigenvectors[0][1]).abs() < 1e-12);
            }
            _ => panic!("wrong ground truth"),
        }
    }

    #[test]
    fn full_trajectory_and_regular_mode() {
        let mut cfg = LinearOdeConfig {
            t_max: 0.1,
            n_series: 1,
            points_per_series: 401,
            ..Default::default()
        };
        let full = gen_linear_ode(&cfg, 0).unwrap();
        assert_eq!(full.series[0].len(), 401);
        cfg.irregular = false;
        assert_eq!(gen_linear_ode(&cfg, 0).unwrap().series, full.series);

        let reg = gen_linear_ode(&LinearOdeConfig { irregular: false, ..Default::default() }, 0).unwrap();
        assert!(reg.series.iter().all(|s| s.len() == 150));
        assert_eq!(reg.series[5].times[0], 5.0 * 2.5e-4);

        cfg.points_per_series = 402;
        assert!(matches!(gen_linear_ode(&cfg, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn seeded_reproducibility() {
        let cfg = LinearOdeConfig::default();
        let a = gen_linear_ode(&cfg, 4).unwrap();
        assert_eq!(a.to_binary(), gen_linear_ode(&cfg, 4).unwrap().to_binary());
        assert_ne!(a.series, gen_linear_ode(&cfg, 5).unwrap().series);
    }
}
