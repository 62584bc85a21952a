//! Complex linear latent dynamics.
//!
//! Each latent component obeys `dz/dt = -λ z` with `λ ∈ ℂ`: the real part is
//! a decay rate and the imaginary part an angular frequency. The
//! probabilistic variant adds white noise, turning every component into an
//! independent complex Ornstein–Uhlenbeck process
//! `dz = -λ z dt + σ dW`. Writing `k = (Re z, Im z)` this is the real 2-D OU
//! process with drift matrix `A = [[λR, -λI], [λI, λR]]` and diffusion
//! `B = (σ/√2) I`.
//!
//! Complex normals follow the circular convention: `CN(m, v)` has independent
//! real and imaginary parts, each with variance `v / 2`.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softplus, softplus_inv, DenseTensor, Primitive, Tape, Var};

/// Offset added after the softplus so `Re λ` stays strictly positive.
pub const POSITIVE_FLOOR: f64 = 1e-6;

/// A point in `ℂ^c`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState(pub Vec<Complex64>);

impl LatentState {
    pub fn zeros(c: usize) -> Self {
        Self(vec![Complex64::new(0.0, 0.0); c])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Interleaved `(re, im)` channels.
    pub fn to_channels(&self) -> Vec<f64> {
        self.0.iter().flat_map(|z| [z.re, z.im]).collect()
    }

    pub fn from_channels(ch: &[f64]) -> Result<Self> {
        if ch.len() % 2 != 0 {
            return Err(Error::Dimension(format!("{} channels is not an even count", ch.len())));
        }
        Ok(Self(ch.chunks(2).map(|p| Complex64::new(p[0], p[1])).collect()))
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// How the trainable reals map to `Re λ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecayParam {
    /// `Re λ` is the raw value.
    Raw,
    /// `Re λ = softplus(raw) + POSITIVE_FLOOR`.
    Softplus,
}

/// The latent spectrum, stored as `2c` trainable reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumParams {
    pub decay_raw: Vec<f64>,
    pub freq: Vec<f64>,
    pub param: DecayParam,
}

impl SpectrumParams {
    /// `Re λ ~ U[0.1, 1]`, `Im λ ~ U[-2, 2]`.
    pub fn init<R: Rng + ?Sized>(c: usize, param: DecayParam, rng: &mut R) -> Self {
        let lambda: Vec<Complex64> = (0..c)
            .map(|_| Complex64::new(rng.random_range(0.1..=1.0), rng.random_range(-2.0..=2.0)))
            .collect();
        Self::from_lambda(&lambda, param).expect("initial decay rates are positive")
    }

    pub fn from_lambda(lambda: &[Complex64], param: DecayParam) -> Result<Self> {
        let decay_raw = lambda
            .iter()
            .map(|l| match param {
                DecayParam::Raw => Ok(l.re),
                DecayParam::Softplus if l.re > POSITIVE_FLOOR => Ok(softplus_inv(l.re - POSITIVE_FLOOR)),
                DecayParam::Softplus => Err(Error::Stationarity(format!(
                    "Re λ = {} is not representable with a positive parameterization",
                    l.re
                ))),
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            decay_raw,
            freq: lambda.iter().map(|l| l.im).collect(),
            param,
        })
    }

    pub fn dim(&self) -> usize {
        self.freq.len()
    }

    pub fn decay(&self) -> Vec<f64> {
        self.decay_raw.iter().map(|&r| self.decay_of(r)).collect()
    }

    fn decay_of(&self, raw: f64) -> f64 {
        match self.param {
            DecayParam::Raw => raw,
            DecayParam::Softplus => softplus(raw) + POSITIVE_FLOOR,
        }
    }

    pub fn lambda(&self) -> Vec<Complex64> {
        self.decay_raw
            .iter()
            .zip(&self.freq)
            .map(|(&r, &i)| Complex64::new(self.decay_of(r), i))
            .collect()
    }
}

/// Noise intensities of the latent OU prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OUParams {
    pub sigma_sq: Vec<f64>,
    pub sigma0_sq: Vec<f64>,
    pub tied: bool,
}

impl OUParams {
    /// True when `σ² = 2 Re λ` and `σ0² = 1` hold exactly for `lambda`.
    pub fn is_tied_to(&self, lambda: &[Complex64]) -> bool {
        self.tied
            && self.sigma_sq.len() == lambda.len()
            && self.sigma_sq.iter().zip(lambda).all(|(s, l)| *s == 2.0 * l.re)
            && self.sigma0_sq.iter().all(|&s| s == 1.0)
    }
}

/// Gaussian law of `z(t + Δt)` given `z(t)`; `variance` is complex (total)
/// variance per component.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionDensity {
    pub mean: LatentState,
    pub variance: Vec<f64>,
}

/// `z · exp(-λ Δt)` as decay magnitude times rotation by `-Im λ · Δt`.
#[inline]
pub fn decay_component(z: Complex64, lambda: Complex64, dt: f64) -> Complex64 {
    let mag = (-lambda.re * dt).exp();
    let (s, c) = (lambda.im * dt).sin_cos();
    Complex64::new(mag * (z.re * c + z.im * s), mag * (z.im * c - z.re * s))
}

fn check_dims(z: &LatentState, lambda: &[Complex64]) -> Result<()> {
    if z.dim() != lambda.len() {
        return Err(Error::Dimension(format!(
            "latent has {} components, spectrum has {}",
            z.dim(),
            lambda.len()
        )));
    }
    Ok(())
}

/// Advances `z` by `dt ≥ 0` under the deterministic flow.
pub fn propagate(z: &LatentState, lambda: &[Complex64], dt: f64) -> Result<LatentState> {
    check_dims(z, lambda)?;
    if !(dt >= 0.0) {
        return Err(Error::Parameter(format!("propagation step must be >= 0, got {dt}")));
    }
    Ok(LatentState(
        z.0.iter()
            .zip(lambda)
            .map(|(&zi, &li)| decay_component(zi, li, dt))
            .collect(),
    ))
}

/// Relative residual `‖P(P(z, dt1), dt2) − P(z, dt1 + dt2)‖ / ‖P(z, dt1 + dt2)‖`
/// (absolute when the direct result is zero).
pub fn semigroup_check(z: &LatentState, lambda: &[Complex64], dt1: f64, dt2: f64) -> Result<f64> {
    let chained = propagate(&propagate(z, lambda, dt1)?, lambda, dt2)?;
    let direct = propagate(z, lambda, dt1 + dt2)?;
    let diff: f64 = chained
        .0
        .iter()
        .zip(&direct.0)
        .map(|(a, b)| (a - b).norm_sqr())
        .sum::<f64>()
        .sqrt();
    let scale = direct.norm();
    Ok(if scale > 0.0 { diff / scale } else { diff })
}

fn require_stationary(lambda: &[Complex64]) -> Result<()> {
    if let Some((i, l)) = lambda.iter().enumerate().find(|(_, l)| !(l.re > 0.0)) {
        return Err(Error::Stationarity(format!("Re λ_{i} = {} must be > 0", l.re)));
    }
    Ok(())
}

/// Slow-feature tying: `σ² = 2 Re λ`, `σ0² = 1`, which makes the prior
/// stationary with unit complex variance.
pub fn tie_sfa(lambda: &[Complex64]) -> Result<OUParams> {
    require_stationary(lambda)?;
    Ok(OUParams {
        sigma_sq: lambda.iter().map(|l| 2.0 * l.re).collect(),
        sigma0_sq: vec![1.0; lambda.len()],
        tied: true,
    })
}

/// Real 2×2 covariance of `(Re z, Im z)` in the stationary regime,
/// `σ² / (4 Re λ) · I` per component.
pub fn stationary_covariance(lambda: &[Complex64], ou: &OUParams) -> Result<Vec<[[f64; 2]; 2]>> {
    require_stationary(lambda)?;
    if ou.sigma_sq.len() != lambda.len() {
        return Err(Error::Dimension("noise intensities and spectrum differ in length".into()));
    }
    Ok(lambda
        .iter()
        .zip(&ou.sigma_sq)
        .map(|(l, s2)| {
            let v = s2 / (4.0 * l.re);
            [[v, 0.0], [0.0, v]]
        })
        .collect())
}

/// Exact OU transition over `dt > 0`.
pub fn transition_density(
    z: &LatentState,
    lambda: &[Complex64],
    ou: &OUParams,
    dt: f64,
) -> Result<TransitionDensity> {
    require_stationary(lambda)?;
    if !(dt > 0.0) {
        return Err(Error::Parameter(format!("transition step must be > 0, got {dt}")));
    }
    if ou.sigma_sq.len() != lambda.len() {
        return Err(Error::Dimension("noise intensities and spectrum differ in length".into()));
    }
    let mean = propagate(z, lambda, dt)?;
    let variance = lambda
        .iter()
        .zip(&ou.sigma_sq)
        .map(|(l, s2)| s2 / (2.0 * l.re) * -(-2.0 * l.re * dt).exp_m1())
        .collect();
    Ok(TransitionDensity { mean, variance })
}

/// One draw from `density`: each real channel gets variance `variance / 2`.
pub fn sample_transition<R: Rng + ?Sized>(density: &TransitionDensity, rng: &mut R) -> LatentState {
    LatentState(
        density
            .mean
            .0
            .iter()
            .zip(&density.variance)
            .map(|(m, v)| {
                let s = (v / 2.0).sqrt();
                let er: f64 = rng.sample(StandardNormal);
                let ei: f64 = rng.sample(StandardNormal);
                Complex64::new(m.re + s * er, m.im + s * ei)
            })
            .collect(),
    )
}

/// Per-row deterministic propagation on the tape.
///
/// `z` is `n × 2c` with interleaved `(re, im)` columns, `decay` and `freq`
/// are `1 × c`, and `dt` holds one step per row. The forward value goes
/// through [`decay_component`], so it agrees bit for bit with [`propagate`].
pub fn propagate_on_tape(tape: &mut Tape, z: Var, decay: Var, freq: Var, dt: &[f64]) -> Result<Var> {
    let (zv, dv, fv) = (tape.value(z), tape.value(decay), tape.value(freq));
    let c = dv.cols();
    if zv.cols() != 2 * c || fv.cols() != c || zv.rows() != dt.len() || dv.rows() != 1 || fv.rows() != 1 {
        return Err(Error::Dimension(format!(
            "propagate on tape: z {:?}, decay {:?}, freq {:?}, {} steps",
            zv.shape(),
            dv.shape(),
            fv.shape(),
            dt.len()
        )));
    }
    let mut out = Vec::with_capacity(zv.len());
    for (row, &h) in dt.iter().enumerate() {
        let zr = zv.row_slice(row);
        for i in 0..c {
            let w = decay_component(
                Complex64::new(zr[2 * i], zr[2 * i + 1]),
                Complex64::new(dv.data()[i], fv.data()[i]),
                h,
            );
            out.push(w.re);
            out.push(w.im);
        }
    }
    let value = DenseTensor::from_raw(dt.len(), 2 * c, out);
    Ok(tape.custom(DecayOp { dt: dt.to_vec() }, &[z, decay, freq], value))
}

struct DecayOp {
    dt: Vec<f64>,
}

impl Primitive for DecayOp {
    fn backward(&self, inputs: &[&DenseTensor], output: &DenseTensor, grad: &DenseTensor) -> Vec<DenseTensor> {
        let (decay, freq) = (inputs[1], inputs[2]);
        let c = decay.cols();
        let n = self.dt.len();
        let mut gz = vec![0.0; n * 2 * c];
        let mut gd = vec![0.0; c];
        let mut gf = vec![0.0; c];
        for (row, &h) in self.dt.iter().enumerate() {
            let g = grad.row_slice(row);
            let o = output.row_slice(row);
            for i in 0..c {
                let mag = (-decay.data()[i] * h).exp();
                let (s, co) = (freq.data()[i] * h).sin_cos();
                let (g_re, g_im) = (g[2 * i], g[2 * i + 1]);
                let (o_re, o_im) = (o[2 * i], o[2 * i + 1]);
                gz[row * 2 * c + 2 * i] = mag * (co * g_re - s * g_im);
                gz[row * 2 * c + 2 * i + 1] = mag * (s * g_re + co * g_im);
                gd[i] -= h * (g_re * o_re + g_im * o_im);
                gf[i] += h * (g_re * o_im - g_im * o_re);
            }
        }
        vec![
            DenseTensor::from_raw(n, 2 * c, gz),
            DenseTensor::row(gd),
            DenseTensor::row(gf),
        ]
    }
}

/// Complex transition variance `1 − exp(−2 Re λ Δt)` of the tied prior, one
/// row per step: an `n × c` tensor.
pub fn tied_transition_variance_on_tape(tape: &mut Tape, decay: Var, dt: &[f64]) -> Result<Var> {
    let dv = tape.value(decay);
    if dv.rows() != 1 {
        return Err(Error::Dimension(format!("decay must be a row, got {:?}", dv.shape())));
    }
    let c = dv.cols();
    let mut out = Vec::with_capacity(dt.len() * c);
    for &h in dt {
        out.extend(dv.data().iter().map(|&a| -(-2.0 * a * h).exp_m1()));
    }
    let value = DenseTensor::from_raw(dt.len(), c, out);
    Ok(tape.custom(TiedVarianceOp { dt: dt.to_vec() }, &[decay], value))
}

struct TiedVarianceOp {
    dt: Vec<f64>,
}

impl Primitive for TiedVarianceOp {
    fn backward(&self, inputs: &[&DenseTensor], _output: &DenseTensor, grad: &DenseTensor) -> Vec<DenseTensor> {
        let decay = inputs[0];
        let c = decay.cols();
        let mut gd = vec![0.0; c];
        for (row, &h) in self.dt.iter().enumerate() {
            let g = grad.row_slice(row);
            for i in 0..c {
                gd[i] += g[i] * 2.0 * h * (-2.0 * decay.data()[i] * h).exp();
            }
        }
        vec![DenseTensor::row(gd)]
    }
}

/// Records `Re λ` and `Im λ` as `1 × c` tensors derived from the trainable
/// leaves `decay_raw` and `freq`.
pub fn spectrum_on_tape(tape: &mut Tape, param: DecayParam, decay_raw: Var) -> Var {
    match param {
        DecayParam::Raw => decay_raw,
        DecayParam::Softplus => {
            let sp = tape.softplus(decay_raw);
            tape.shift(sp, POSITIVE_FLOOR)
        }
    }
}
