//! Prediction from a trained model and the measurements used to compare
//! predictions with reference trajectories.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::TimeSeries;
use crate::error::{Error, Result};
use crate::latent::{propagate, tie_sfa, LatentState};
use crate::model::Model;
use crate::networks::{encode, encode_variational, DecoderParams};
use crate::tensor::DenseTensor;

/// Default number of latent draws per query time in probabilistic rollouts.
pub const DEFAULT_SAMPLES: usize = 256;

/// Latent and state-space moments of a probabilistic rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictive {
    /// Per-channel predictive variance, including decoder noise.
    pub variance: Vec<Vec<f64>>,
    pub latent_mean: Vec<LatentState>,
    /// Complex variance per latent component.
    pub latent_variance: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub times: Vec<f64>,
    /// Predicted states; the predictive mean in probabilistic mode.
    pub states: Vec<Vec<f64>>,
    pub predictive: Option<Predictive>,
}

impl Rollout {
    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn variance(&self) -> Option<&[Vec<f64>]> {
        self.predictive.as_ref().map(|p| p.variance.as_slice())
    }

    /// Table with columns `t, x0.., [var0..]`.
    pub fn to_csv(&self) -> Result<String> {
        let f = self.dim();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["t".to_string()];
        header.extend((0..f).map(|i| format!("x{i}")));
        if self.predictive.is_some() {
            header.extend((0..f).map(|i| format!("var{i}")));
        }
        w.write_record(&header).map_err(csv_err)?;
        for (k, (t, x)) in self.times.iter().zip(&self.states).enumerate() {
            let mut row = vec![format!("{t:e}")];
            row.extend(x.iter().map(|v| format!("{v:e}")));
            if let Some(var) = self.variance() {
                row.extend(var[k].iter().map(|v| format!("{v:e}")));
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Parameter(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Parses a table written by [`Rollout::to_csv`]. Latent moments are not
    /// stored in the table, so they come back empty.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        let col = |name: &str| header.iter().position(|h| h == name);
        let t_col = col("t").ok_or_else(|| schema("t"))?;
        let f = header.iter().filter(|h| is_indexed(h, "x")).count();
        if f == 0 {
            return Err(schema("x0"));
        }
        let x_cols = (0..f).map(|i| col(&format!("x{i}")).ok_or_else(|| schema(&format!("x{i}")))).collect::<Result<Vec<_>>>()?;
        let n_var = header.iter().filter(|h| is_indexed(h, "var")).count();
        let var_cols = if n_var == 0 {
            None
        } else {
            Some((0..f).map(|i| col(&format!("var{i}")).ok_or_else(|| schema(&format!("var{i}")))).collect::<Result<Vec<_>>>()?)
        };
        let (mut times, mut states, mut vars) = (Vec::new(), Vec::new(), Vec::new());
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let num = |c: usize| -> Result<f64> {
                rec.get(c)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::Parameter(format!("row {}: column {} is not a number", line + 1, header[c])))
            };
            times.push(num(t_col)?);
            states.push(x_cols.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?);
            if let Some(vc) = &var_cols {
                vars.push(vc.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?);
            }
        }
        let predictive = var_cols.map(|_| Predictive {
            variance: vars,
            latent_mean: Vec::new(),
            latent_variance: Vec::new(),
        });
        Ok(Self { times, states, predictive })
    }
}

fn is_indexed(h: &str, prefix: &str) -> bool {
    h.strip_prefix(prefix).is_some_and(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
}

fn schema(column: &str) -> Error {
    Error::Parameter(format!("table is missing column `{column}`"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parameter(format!("malformed table: {e}"))
}

fn check_query(anchor_time: f64, query_times: &[f64]) -> Result<()> {
    if query_times.is_empty() {
        return Err(Error::Parameter("no query times".into()));
    }
    if !anchor_time.is_finite() || query_times.iter().any(|t| !t.is_finite()) {
        return Err(Error::Numeric("query times must be finite".into()));
    }
    if query_times[0] < anchor_time {
        return Err(Error::Parameter(format!(
            "query time {} precedes the anchor time {anchor_time}",
            query_times[0]
        )));
    }
    if query_times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Parameter("query times must be strictly increasing".into()));
    }
    Ok(())
}

fn decode_rows(latents: &[LatentState], decoder: &DecoderParams) -> Result<Vec<Vec<f64>>> {
    let width = latents[0].dim() * 2;
    let data = latents.iter().flat_map(LatentState::to_channels).collect();
    let out = decoder.forward(&DenseTensor::matrix(latents.len(), width, data)?)?;
    Ok((0..out.rows()).map(|r| out.row_slice(r).to_vec()).collect())
}

/// Encodes the anchor, jumps the latent state straight to each query time
/// and decodes.
pub fn rollout_deterministic(model: &Model, x_anchor: &[f64], anchor_time: f64, query_times: &[f64]) -> Result<Rollout> {
    check_query(anchor_time, query_times)?;
    let lambda = model.lambda();
    let z0 = encode(x_anchor, &model.encoder)?;
    let latents = query_times
        .iter()
        .map(|t| propagate(&z0, &lambda, t - anchor_time))
        .collect::<Result<Vec<_>>>()?;
    let states = decode_rows(&latents, &model.decoder)?;
    Ok(Rollout {
        times: query_times.to_vec(),
        states,
        predictive: None,
    })
}

/// Complex variance after `dt` of a latent component that starts with
/// variance `v0`: `v0 e^{−2 Re λ Δt} + σ²/(2 Re λ) (1 − e^{−2 Re λ Δt})`.
/// Under the tied prior the second factor is one.
pub fn propagated_variance(v0: f64, lambda: Complex64, sigma_sq: f64, dt: f64) -> f64 {
    let keep = (-2.0 * lambda.re * dt).exp();
    v0 * keep + sigma_sq / (2.0 * lambda.re) * -(-2.0 * lambda.re * dt).exp_m1()
}

/// Gaussian latent rollout under the OU prior, pushed through the decoder by
/// sampling.
pub fn rollout_probabilistic<R: Rng + ?Sized>(
    model: &Model,
    x_anchor: &[f64],
    anchor_time: f64,
    query_times: &[f64],
    n_samples: usize,
    rng: &mut R,
) -> Result<Rollout> {
    check_query(anchor_time, query_times)?;
    if n_samples == 0 {
        return Err(Error::Parameter("n_samples must be at least 1".into()));
    }
    if !model.variant.is_probabilistic() {
        return Err(Error::Configuration("probabilistic rollout needs a probabilistic model".into()));
    }
    let lambda = model.lambda();
    let ou = tie_sfa(&lambda)?;
    if !ou.is_tied_to(&lambda) {
        return Err(Error::Configuration("latent prior is not tied to the spectrum".into()));
    }
    let noise = model.decoder.noise_variance().unwrap_or(0.0);
    let (m0, v0) = encode_variational(x_anchor, &model.encoder)?;
    let f = model.arch.input_dim;
    let mut out = Rollout {
        times: query_times.to_vec(),
        states: Vec::with_capacity(query_times.len()),
        predictive: Some(Predictive {
            variance: Vec::with_capacity(query_times.len()),
            latent_mean: Vec::with_capacity(query_times.len()),
            latent_variance: Vec::with_capacity(query_times.len()),
        }),
    };
    for &t in query_times {
        let dt = t - anchor_time;
        let mean = propagate(&m0, &lambda, dt)?;
        let var: Vec<f64> = (0..lambda.len())
            .map(|k| propagated_variance(v0[k], lambda[k], ou.sigma_sq[k], dt))
            .collect();
        let draws: Vec<LatentState> = (0..n_samples)
            .map(|_| {
                LatentState(
                    mean.0
                        .iter()
                        .zip(&var)
                        .map(|(m, v)| {
                            let s = (v / 2.0).sqrt();
                            let (er, ei): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                            Complex64::new(m.re + s * er, m.im + s * ei)
                        })
                        .collect(),
                )
            })
            .collect();
        let decoded = decode_rows(&draws, &model.decoder)?;
        let n = n_samples as f64;
        let mu: Vec<f64> = (0..f).map(|i| decoded.iter().map(|x| x[i]).sum::<f64>() / n).collect();
        let spread: Vec<f64> = (0..f)
            .map(|i| {
                if n_samples == 1 {
                    return 0.0;
                }
                decoded.iter().map(|x| (x[i] - mu[i]).powi(2)).sum::<f64>() / (n - 1.0)
            })
            .collect();
        let p = out.predictive.as_mut().expect("set above");
        p.variance.push(spread.iter().map(|s| s + noise).collect());
        p.latent_mean.push(mean);
        p.latent_variance.push(var);
        out.states.push(mu);
    }
    Ok(out)
}

/// Pooled `(u, du/dt)` pairs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseCloud {
    pub u: Vec<f64>,
    pub dudt: Vec<f64>,
}

impl PhaseCloud {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn extend(&mut self, other: &PhaseCloud) {
        self.u.extend_from_slice(&other.u);
        self.dudt.extend_from_slice(&other.dudt);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["u", "dudt"]).map_err(csv_err)?;
        for (u, d) in self.u.iter().zip(&self.dudt) {
            w.write_record([format!("{u:e}"), format!("{d:e}")]).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Parameter(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Central differences `(u_{n+1} − u_{n−1}) / 2Δt` at interior times, pooled
/// over all channels.
pub fn phase_cloud(times: &[f64], states: &[Vec<f64>]) -> Result<PhaseCloud> {
    if times.len() != states.len() {
        return Err(Error::Dimension(format!("{} times for {} states", times.len(), states.len())));
    }
    if times.len() < 3 {
        return Err(Error::Parameter("phase cloud needs at least 3 time points".into()));
    }
    let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    let tol = 1e-9 * dt.abs().max(times[0].abs());
    if !(dt > 0.0) || times.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() > tol) {
        return Err(Error::Parameter("phase cloud needs uniformly spaced times; resample first".into()));
    }
    let mut cloud = PhaseCloud::default();
    for n in 1..times.len() - 1 {
        for (j, &u) in states[n].iter().enumerate() {
            cloud.u.push(u);
            cloud.dudt.push((states[n + 1][j] - states[n - 1][j]) / (2.0 * dt));
        }
    }
    Ok(cloud)
}

/// Histogram grid for [`phase_overlap`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseGrid {
    pub u_range: (f64, f64),
    pub dudt_range: (f64, f64),
    pub bins: (usize, usize),
}

impl PhaseGrid {
    /// Smallest box containing every cloud.
    pub fn covering(clouds: &[&PhaseCloud], bins: (usize, usize)) -> Result<Self> {
        let mut u = (f64::INFINITY, f64::NEG_INFINITY);
        let mut d = u;
        for c in clouds {
            for (&a, &b) in c.u.iter().zip(&c.dudt) {
                u = (u.0.min(a), u.1.max(a));
                d = (d.0.min(b), d.1.max(b));
            }
        }
        if !(u.0.is_finite() && d.0.is_finite()) {
            return Err(Error::Parameter("cannot cover empty clouds".into()));
        }
        Ok(Self {
            u_range: u,
            dudt_range: d,
            bins,
        })
    }

    fn bin(&self, u: f64, d: f64) -> usize {
        let idx = |x: f64, (lo, hi): (f64, f64), n: usize| {
            if hi <= lo {
                return 0;
            }
            // points outside the box land in the edge bins
            (((x - lo) / (hi - lo) * n as f64).floor().max(0.0) as usize).min(n - 1)
        };
        idx(u, self.u_range, self.bins.0) * self.bins.1 + idx(d, self.dudt_range, self.bins.1)
    }

    fn histogram(&self, cloud: &PhaseCloud) -> Vec<f64> {
        let mut h = vec![0.0; self.bins.0 * self.bins.1];
        for (&u, &d) in cloud.u.iter().zip(&cloud.dudt) {
            h[self.bin(u, d)] += 1.0;
        }
        let mass = cloud.len() as f64;
        h.iter_mut().for_each(|x| *x /= mass);
        h
    }
}

/// Total-variation overlap `1 − ½ Σ |h_a − h_b|` of the normalized 2-D
/// histograms; 1 for identical clouds, 0 for disjoint ones.
pub fn phase_overlap(a: &PhaseCloud, b: &PhaseCloud, grid: &PhaseGrid) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Parameter("phase overlap of an empty cloud".into()));
    }
    if grid.bins.0 == 0 || grid.bins.1 == 0 {
        return Err(Error::Parameter("grid needs at least one bin per axis".into()));
    }
    if [a, b].iter().any(|c| c.u.iter().chain(&c.dudt).any(|x| !x.is_finite())) {
        return Err(Error::Numeric("phase cloud has non-finite entries".into()));
    }
    let (ha, hb) = (grid.histogram(a), grid.histogram(b));
    let tv: f64 = ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum::<f64>() / 2.0;
    Ok((1.0 - tv).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub times: Vec<f64>,
    /// `‖pred − ref‖ / ‖ref‖` per time (absolute where the reference is zero).
    pub relative_l2: Vec<f64>,
    pub horizon_average: f64,
    /// Fraction of reference values inside the ±2σ predictive band.
    pub coverage_2sigma: Option<f64>,
}

/// Compares a rollout with a reference sampled at the same times.
pub fn metrics(pred: &Rollout, reference: &TimeSeries) -> Result<MetricsReport> {
    if pred.times.len() != reference.times.len()
        || pred
            .times
            .iter()
            .zip(&reference.times)
            .any(|(a, b)| (a - b).abs() > 1e-9 * a.abs().max(1.0))
    {
        return Err(Error::Parameter("prediction and reference times differ".into()));
    }
    if pred.times.is_empty() {
        return Err(Error::Parameter("nothing to compare".into()));
    }
    if pred.dim() != reference.dim() {
        return Err(Error::Dimension(format!("prediction has {} channels, reference {}", pred.dim(), reference.dim())));
    }
    let relative_l2: Vec<f64> = pred
        .states
        .iter()
        .zip(&reference.states)
        .map(|(p, r)| {
            let err = p.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = r.iter().map(|b| b * b).sum::<f64>().sqrt();
            if scale > 0.0 {
                err / scale
            } else {
                err
            }
        })
        .collect();
    let horizon_average = relative_l2.iter().sum::<f64>() / relative_l2.len() as f64;
    let coverage_2sigma = pred.variance().map(|var| {
        let mut inside = 0usize;
        let mut total = 0usize;
        for ((p, v), r) in pred.states.iter().zip(var).zip(&reference.states) {
            for ((m, s2), x) in p.iter().zip(v).zip(r) {
                total += 1;
                inside += ((x - m).abs() <= 2.0 * s2.sqrt()) as usize;
            }
        }
        inside as f64 / total as f64
    });
    Ok(MetricsReport {
        times: pred.times.clone(),
        relative_l2,
        horizon_average,
        coverage_2sigma,
    })
}
