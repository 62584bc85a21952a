use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::{split_series, Dataset, GroundTruth, TimeSeries};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiscaleConfig {
    /// Coefficients `a_k` of `dp_k/dt = a_k p_k`.
    pub rates: Vec<Complex64>,
    pub p0: Vec<Complex64>,
    /// Number of observed channels.
    pub dim: usize,
    /// Explicit `dim × 2k` mixing map; drawn from the seed when absent.
    pub mixing: Option<Vec<Vec<f64>>>,
    pub t_max: f64,
    pub dt: f64,
    pub n_series: usize,
    pub points_per_series: usize,
}

impl Default for MultiscaleConfig {
    fn default() -> Self {
        Self {
            rates: vec![Complex64::new(-0.1, 1.0), Complex64::new(-0.9, 1.5)],
            p0: vec![Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0)],
            dim: 8,
            mixing: None,
            t_max: 15.0,
            dt: 0.0025,
            n_series: 40,
            points_per_series: 150,
        }
    }
}

/// Gram determinant via Gaussian elimination with partial pivoting on
/// `WᵀW`; zero (to tolerance) means the columns are dependent.
fn full_column_rank(w: &[Vec<f64>]) -> bool {
    let k = w[0].len();
    let mut g: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| w.iter().map(|r| r[i] * r[j]).sum()).collect())
        .collect();
    let scale = (0..k).map(|i| g[i][i]).fold(0.0, f64::max);
    for col in 0..k {
        let piv = (col..k).max_by(|&a, &b| g[a][col].abs().total_cmp(&g[b][col].abs())).unwrap();
        if g[piv][col].abs() <= 1e-10 * scale {
            return false;
        }
        g.swap(col, piv);
        for r in col + 1..k {
            let f = g[r][col] / g[col][col];
            for c in col..k {
                g[r][c] -= f * g[col][c];
            }
        }
    }
    true
}

/// Standard-normal `dim × cols` map, re-drawn until it has full column rank.
pub fn sample_mixing(dim: usize, cols: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if dim < cols {
        return Err(Error::Parameter(format!("{dim} channels cannot embed {cols} latent channels")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let w: Vec<Vec<f64>> = (0..dim)
            .map(|_| (0..cols).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        if full_column_rank(&w) {
            return Ok(w);
        }
    }
}

impl MultiscaleConfig {
    pub fn mixing_for(&self, seed: u64) -> Result<Vec<Vec<f64>>> {
        let cols = 2 * self.rates.len();
        match &self.mixing {
            Some(w) => {
                if w.len() != self.dim || w.iter().any(|r| r.len() != cols) {
                    return Err(Error::Dimension(format!("mixing must be {} × {cols}", self.dim)));
                }
                if !full_column_rank(w) {
                    return Err(Error::Parameter("mixing map is rank deficient".into()));
                }
                Ok(w.clone())
            }
            None => sample_mixing(self.dim, cols, seed),
        }
    }

    /// Exact observed state `W (Re p, Im p)` at time `t`.
    pub fn state_at(&self, mixing: &[Vec<f64>], t: f64) -> Vec<f64> {
        let ch: Vec<f64> = self
            .rates
            .iter()
            .zip(&self.p0)
            .flat_map(|(a, p)| {
                let v = p * (a * t).exp();
                [v.re, v.im]
            })
            .collect();
        mixing.iter().map(|r| r.iter().zip(&ch).map(|(w, c)| w * c).sum()).collect()
    }
}

/// Closed-form latent evolution mapped through `W`, sampled on a uniform
/// grid and split into contiguous series.
pub fn gen_hidden_multiscale(config: &MultiscaleConfig, seed: u64) -> Result<Dataset> {
    if config.rates.len() != config.p0.len() || config.rates.is_empty() {
        return Err(Error::Dimension("rates and p0 must have equal nonzero length".into()));
    }
    if !(config.dt > 0.0) || !(config.t_max > 0.0) {
        return Err(Error::Parameter("dt and t_max must be positive".into()));
    }
    let w = config.mixing_for(seed)?;
    let n = (config.t_max / config.dt).round() as usize + 1;
    let times: Vec<f64> = (0..n).map(|i| i as f64 * config.dt).collect();
    let states = times.iter().map(|&t| config.state_at(&w, t)).collect();
    let traj = TimeSeries::new(times, states)?;
    let series = split_series(&traj, config.n_series, config.points_per_series)?;
    let truth = GroundTruth::Multiscale {
        lambda: config.rates.iter().map(|a| -a).collect(),
        p0: config.p0.clone(),
        mixing: w,
    };
    Dataset::new("multiscale", config, seed, truth, series)
}
