//! Training objectives: the deterministic reconstruction-plus-propagation
//! loss and the negated ELBO of the probabilistic model.
//!
//! Both are built on a [`Tape`] so the optimizer can backpropagate through
//! them; the plain functions ([`deterministic_loss`], [`elbo`]) evaluate the
//! same graphs and return only the numbers.

use std::f64::consts::PI;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::TimeSeries;
use crate::error::{Error, Result};
use crate::latent::{propagate_on_tape, tied_transition_variance_on_tape, LatentState, OUParams};
use crate::model::{BoundModel, Model};
use crate::tensor::{DenseTensor, Tape, Var};

/// Contiguous windows, each taken from a single series.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub windows: Vec<TimeSeries>,
}

/// A batch flattened into one state matrix plus transition indices.
#[derive(Clone, Debug)]
pub struct StackedBatch {
    /// `N × f` states of all windows, window after window.
    pub states: DenseTensor,
    /// Row of the first state of each window.
    pub first: Vec<usize>,
    /// Transition `src[k] → dst[k]` spans `dt[k]`; never crosses windows.
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub dt: Vec<f64>,
}

impl Batch {
    pub fn new(windows: Vec<TimeSeries>) -> Result<Self> {
        if windows.is_empty() || windows.iter().any(TimeSeries::is_empty) {
            return Err(Error::Parameter("a batch needs nonempty windows".into()));
        }
        let f = windows[0].dim();
        for w in &windows {
            w.validate()?;
            if w.dim() != f || f == 0 {
                return Err(Error::Dimension("windows differ in state dimension".into()));
            }
        }
        Ok(Self { windows })
    }

    pub fn n_states(&self) -> usize {
        self.windows.iter().map(TimeSeries::len).sum()
    }

    pub fn stack(&self) -> StackedBatch {
        let f = self.windows[0].dim();
        let mut data = Vec::with_capacity(self.n_states() * f);
        let (mut first, mut src, mut dst, mut dt) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut row = 0;
        for w in &self.windows {
            first.push(row);
            for (i, x) in w.states.iter().enumerate() {
                data.extend_from_slice(x);
                if i + 1 < w.len() {
                    src.push(row + i);
                    dst.push(row + i + 1);
                    dt.push(w.times[i + 1] - w.times[i]);
                }
            }
            row += w.len();
        }
        StackedBatch {
            states: DenseTensor::from_raw(row, f, data),
            first,
            src,
            dst,
            dt,
        }
    }
}

/// Loss value with its additive parts, `total = Σ parts`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub parts: Vec<(String, f64)>,
    /// Set when the batch had no transitions, so the propagation part is
    /// zero by definition rather than by fit.
    pub single_state: bool,
}

impl LossReport {
    pub fn part(&self, name: &str) -> Option<f64> {
        self.parts.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

/// Loss nodes on a tape; `total` is the left-to-right sum of `parts`.
pub struct LossGraph {
    pub total: Var,
    pub parts: Vec<(&'static str, Var)>,
    pub single_state: bool,
}

impl LossGraph {
    fn from_parts(tape: &mut Tape, parts: Vec<(&'static str, Var)>, single_state: bool) -> Result<Self> {
        let mut total = parts[0].1;
        for &(_, v) in &parts[1..] {
            total = tape.add(total, v)?;
        }
        Ok(Self {
            total,
            parts,
            single_state,
        })
    }

    /// Appends one more additive part.
    pub fn push(&mut self, tape: &mut Tape, name: &'static str, v: Var) -> Result<()> {
        self.total = tape.add(self.total, v)?;
        self.parts.push((name, v));
        Ok(())
    }

    pub fn report(&self, tape: &Tape) -> LossReport {
        LossReport {
            total: tape.value(self.total).item(),
            parts: self
                .parts
                .iter()
                .map(|&(n, v)| (n.to_string(), tape.value(v).item()))
                .collect(),
            single_state: self.single_state,
        }
    }
}

fn reborrow<'a>(r: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match r {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

/// Mean squared reconstruction error per state plus mean squared latent
/// propagation residual per transition.
///
/// Dropout is applied only when `dropout` carries a generator.
pub fn deterministic_graph(
    tape: &mut Tape,
    model: &Model,
    bound: &BoundModel,
    batch: &StackedBatch,
    mut dropout: Option<&mut dyn RngCore>,
) -> Result<LossGraph> {
    let x = tape.leaf(batch.states.clone());
    let z = model.encoder.net.forward_on_tape(tape, &bound.encoder, x, reborrow(&mut dropout))?;
    let xhat = model.decoder.net.forward_on_tape(tape, &bound.decoder, z, reborrow(&mut dropout))?;
    let diff = tape.sub(x, xhat)?;
    let sq = tape.sum_sq(diff);
    let recon = tape.scale(sq, 1.0 / batch.states.rows() as f64);

    let single_state = batch.src.is_empty();
    let prop = if single_state {
        tape.leaf(DenseTensor::scalar(0.0))
    } else {
        let zs = tape.gather_rows(z, &batch.src)?;
        let zd = tape.gather_rows(z, &batch.dst)?;
        let pred = propagate_on_tape(tape, zs, bound.decay, bound.freq, &batch.dt)?;
        let res = tape.sub(zd, pred)?;
        let sq = tape.sum_sq(res);
        tape.scale(sq, 1.0 / batch.src.len() as f64)
    };
    LossGraph::from_parts(tape, vec![("reconstruction", recon), ("propagation", prop)], single_state)
}

/// Evaluates [`deterministic_graph`] without dropout.
pub fn deterministic_loss(batch: &Batch, model: &Model) -> Result<LossReport> {
    check_batch(batch, model)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    Ok(deterministic_graph(&mut tape, model, &bound, &batch.stack(), None)?.report(&tape))
}

fn check_batch(batch: &Batch, model: &Model) -> Result<()> {
    if batch.windows[0].dim() != model.arch.input_dim {
        return Err(Error::Dimension(format!(
            "batch states have {} entries, model expects {}",
            batch.windows[0].dim(),
            model.arch.input_dim
        )));
    }
    Ok(())
}

/// `mean + sqrt(var/2)(ε_re + i ε_im)` per component; `noise` holds the
/// interleaved standard-normal draws.
pub fn reparam_sample(mean: &LatentState, var: &[f64], noise: &[f64]) -> Result<LatentState> {
    if var.len() != mean.dim() || noise.len() != 2 * mean.dim() {
        return Err(Error::Dimension("mean, variance and noise lengths disagree".into()));
    }
    if var.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::Parameter("variance must be nonnegative".into()));
    }
    Ok(LatentState(
        mean.0
            .iter()
            .zip(var)
            .zip(noise.chunks(2))
            .map(|((m, &v), e)| {
                let s = (0.5 * v).sqrt();
                m + num_complex::Complex64::new(s * e[0], s * e[1])
            })
            .collect(),
    ))
}

/// Negated ELBO, averaged over windows, estimated with `n_samples`
/// reparametrized draws from the factorized posterior.
///
/// Parts: `reconstruction` (−E log p(x|z)), `initial` (−E log p(z₀)),
/// `transition` (−E log p(z_{n+1}|z_n) under the tied OU prior) and
/// `neg_entropy` (−H[q], closed form). Draws come from `rng` in a fixed
/// order (dropout masks first when `training`), so a fixed seed gives common
/// random numbers.
pub fn elbo_graph(
    tape: &mut Tape,
    model: &Model,
    bound: &BoundModel,
    batch: &StackedBatch,
    rng: &mut dyn RngCore,
    n_samples: usize,
    training: bool,
) -> Result<LossGraph> {
    let log_noise = bound
        .log_noise_var
        .ok_or_else(|| Error::Configuration("the ELBO needs a probabilistic decoder".into()))?;
    if !model.encoder.variational {
        return Err(Error::Configuration("the ELBO needs a variational encoder".into()));
    }
    if n_samples == 0 {
        return Err(Error::Parameter("n_samples must be positive".into()));
    }
    let c = model.arch.latent_dim;
    let f = model.arch.input_dim as f64;
    let n = batch.states.rows();
    let windows = batch.first.len() as f64;
    let ln_pi = PI.ln();

    let x = tape.leaf(batch.states.clone());
    let head = {
        let r = if training { Some(&mut *rng as &mut dyn RngCore) } else { None };
        model.encoder.net.forward_on_tape(tape, &bound.encoder, x, r)?
    };
    let mean = tape.slice_cols(head, 0, 2 * c)?;
    let logv = tape.slice_cols(head, 2 * c, 3 * c)?;
    // per-channel standard deviation sqrt(v/2) = exp(logv/2)/√2
    let half = tape.scale(logv, 0.5);
    let sd = tape.exp(half);
    let sd = tape.scale(sd, std::f64::consts::FRAC_1_SQRT_2);
    let pairs: Vec<usize> = (0..2 * c).map(|j| j / 2).collect();
    let sd = tape.gather_cols(sd, &pairs)?;

    let mut pair_sum = DenseTensor::zeros(2 * c, c);
    for j in 0..2 * c {
        pair_sum.set(j, j / 2, 1.0);
    }
    let pair_sum = tape.leaf(pair_sum);
    let variance = if batch.src.is_empty() {
        None
    } else {
        Some(tied_transition_variance_on_tape(tape, bound.decay, &batch.dt)?)
    };

    let mut recon_sq: Option<Var> = None;
    let mut init_sq: Option<Var> = None;
    let mut trans_sq: Option<Var> = None;
    let acc = |tape: &mut Tape, slot: &mut Option<Var>, v: Var| -> Result<()> {
        *slot = Some(match *slot {
            Some(s) => tape.add(s, v)?,
            None => v,
        });
        Ok(())
    };
    for _ in 0..n_samples {
        let eps: Vec<f64> = (0..n * 2 * c).map(|_| rng.sample(StandardNormal)).collect();
        let noise = tape.mul_const(sd, DenseTensor::from_raw(n, 2 * c, eps))?;
        let z = tape.add(mean, noise)?;

        let r = if training { Some(&mut *rng as &mut dyn RngCore) } else { None };
        let xhat = model.decoder.net.forward_on_tape(tape, &bound.decoder, z, r)?;
        let diff = tape.sub(x, xhat)?;
        let sq = tape.sum_sq(diff);
        acc(tape, &mut recon_sq, sq)?;

        let z0 = tape.gather_rows(z, &batch.first)?;
        let sq = tape.sum_sq(z0);
        acc(tape, &mut init_sq, sq)?;

        if let Some(var) = variance {
            let zs = tape.gather_rows(z, &batch.src)?;
            let zd = tape.gather_rows(z, &batch.dst)?;
            let pred = propagate_on_tape(tape, zs, bound.decay, bound.freq, &batch.dt)?;
            let res = tape.sub(zd, pred)?;
            let res2 = tape.square(res);
            let mag = tape.matmul(res2, pair_sum)?;
            let scaled = tape.div(mag, var)?;
            let s = tape.sum(scaled);
            acc(tape, &mut trans_sq, s)?;
        }
    }
    let inv_s = 1.0 / n_samples as f64;

    // ½ N f (ln 2π + ℓ) + e^{−ℓ}/2 · mean_s Σ‖x − D(z)‖²
    let sq = tape.scale(recon_sq.unwrap(), inv_s);
    let neg_l = tape.scale(log_noise, -1.0);
    let prec = tape.exp(neg_l);
    let fit = tape.mul(prec, sq)?;
    let fit = tape.scale(fit, 0.5);
    let norm = tape.scale(log_noise, 0.5 * n as f64 * f);
    let norm = tape.shift(norm, 0.5 * n as f64 * f * (2.0 * PI).ln());
    let recon = tape.add(fit, norm)?;

    // Σ_windows Σ_i (ln π + |z₀|²)
    let init = tape.scale(init_sq.unwrap(), inv_s);
    let init = tape.shift(init, windows * c as f64 * ln_pi);

    // Σ_pairs Σ_i (ln π + ln V + |res|²/V)
    let trans = match (variance, trans_sq) {
        (Some(var), Some(sq)) => {
            let sq = tape.scale(sq, inv_s);
            let lv = tape.ln(var);
            let lv = tape.sum(lv);
            let t = tape.add(sq, lv)?;
            tape.shift(t, batch.src.len() as f64 * c as f64 * ln_pi)
        }
        _ => tape.leaf(DenseTensor::scalar(0.0)),
    };

    // −H[q] = −Σ (ln π + 1 + ln v)
    let slv = tape.sum(logv);
    let neg_h = tape.scale(slv, -1.0);
    let neg_h = tape.shift(neg_h, -(n as f64) * c as f64 * (ln_pi + 1.0));

    let per_window = 1.0 / windows;
    let parts = vec![
        ("reconstruction", tape.scale(recon, per_window)),
        ("initial", tape.scale(init, per_window)),
        ("transition", tape.scale(trans, per_window)),
        ("neg_entropy", tape.scale(neg_h, per_window)),
    ];
    LossGraph::from_parts(tape, parts, batch.src.is_empty())
}

/// Evaluates the negated ELBO in inference mode. `ou` must be the SFA tie
/// of the model's spectrum.
pub fn elbo(batch: &Batch, model: &Model, ou: &OUParams, rng: &mut dyn RngCore, n_samples: usize) -> Result<LossReport> {
    check_batch(batch, model)?;
    if !ou.is_tied_to(&model.lambda()) {
        return Err(Error::Configuration(
            "the latent prior must be tied to the spectrum (σ² = 2 Re λ, σ₀² = 1)".into(),
        ));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    Ok(elbo_graph(&mut tape, model, &bound, &batch.stack(), rng, n_samples, false)?.report(&tape))
}

/// Prior on the network parameters for MAP training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ParamPrior {
    /// Improper flat prior; contributes nothing.
    #[default]
    Uniform,
    Gaussian { precision: f64 },
}

/// `log p(θ)` up to a constant: zero for the flat prior, `−(τ/2)‖θ‖²` for a
/// Gaussian with precision `τ`.
pub fn map_regularizer(theta: &[DenseTensor], prior: ParamPrior) -> f64 {
    match prior {
        ParamPrior::Uniform => 0.0,
        ParamPrior::Gaussian { precision } => -0.5 * precision * theta.iter().map(DenseTensor::sum_sq).sum::<f64>(),
    }
}

/// The matching loss term `−log p(θ)` on the tape, if nonzero.
pub fn map_regularizer_on_tape(tape: &mut Tape, leaves: &[Var], prior: ParamPrior) -> Result<Option<Var>> {
    match prior {
        ParamPrior::Gaussian { precision } if precision != 0.0 => {
            let mut acc: Option<Var> = None;
            for &v in leaves {
                let s = tape.sum_sq(v);
                acc = Some(match acc {
                    Some(a) => tape.add(a, s)?,
                    None => s,
                });
            }
            Ok(acc.map(|a| tape.scale(a, 0.5 * precision)))
        }
        _ => Ok(None),
    }
}
