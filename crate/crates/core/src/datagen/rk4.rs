use crate::datagen::TimeSeries;
use crate::error::{Error, Result};

/// Classical fixed-step fourth-order Runge–Kutta from `t = 0`.
///
/// `field(t, x, dxdt)` writes the vector field into `dxdt`. Every step is
/// stored, so the result has `n_steps + 1` points.
pub fn rk4_integrate<F>(mut field: F, x0: &[f64], step: f64, n_steps: usize) -> Result<TimeSeries>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Parameter(format!("step must be positive, got {step}")));
    }
    let d = x0.len();
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut x = x0.to_vec();
    times.push(0.0);
    states.push(x.clone());
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for n in 0..n_steps {
        let t = n as f64 * step;
        field(t, &x, &mut k1);
        for i in 0..d {
            tmp[i] = x[i] + 0.5 * step * k1[i];
        }
        field(t + 0.5 * step, &tmp, &mut k2);
        for i in 0..d {
            tmp[i] = x[i] + 0.5 * step * k2[i];
        }
        field(t + 0.5 * step, &tmp, &mut k3);
        for i in 0..d {
            tmp[i] = x[i] + step * k3[i];
        }
        field(t + step, &tmp, &mut k4);
        for i in 0..d {
            x[i] += step / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: n + 1,
                detail: "non-finite state".into(),
            });
        }
        times.push((n + 1) as f64 * step);
        states.push(x.clone());
    }
    Ok(TimeSeries { times, states })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_field_is_constant() {
        let tr = rk4_integrate(|_, _, d| d.fill(0.0), &[1.5, -2.0], 0.1, 20).unwrap();
        assert_eq!(tr.len(), 21);
        assert!(tr.states.iter().all(|s| s == &[1.5, -2.0]));
    }

    #[test]
    fn order_four_self_convergence() {
        // x' = -x^2 + sin t: smooth, nonlinear, no closed form needed
        let field = |t: f64, x: &[f64], d: &mut [f64]| d[0] = -x[0] * x[0] + t.sin();
        let end = |h: f64| {
            let n = (2.0 / h).round() as usize;
            rk4_integrate(field, &[1.0], h, n).unwrap().states[n][0]
        };
        let (a, b, c) = (end(0.1), end(0.05), end(0.025));
        let ratio = (a - b).abs() / (b - c).abs();
        assert!((ratio - 16.0).abs() <= 4.0, "ratio {ratio}");
    }

    #[test]
    fn divergence_reports_step() {
        let err = rk4_integrate(|_, x, d| d[0] = x[0] * x[0], &[1.0], 0.5, 100).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
        assert!(rk4_integrate(|_, _, _| {}, &[1.0], 0.0, 1).is_err());
    }
}
