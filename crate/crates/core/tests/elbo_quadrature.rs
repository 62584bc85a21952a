//! The Monte Carlo negated ELBO against a deterministic quadrature of the
//! same expectation, for a single state and one complex latent with a
//! nonlinear decoder.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tsrom::latent::tie_sfa;
use tsrom::networks::encode_variational;
use tsrom::objectives::{elbo, Batch};
use tsrom::{ArchitectureSpec, DenseTensor, Model, TimeSeries, Variant};

const NODES: usize = 200;
const HALF_WIDTH: f64 = 8.0;

/// `E_q[−log p(x|z) − log p(z) + log q(z)]` on a `NODES × NODES` grid over
/// `mean ± HALF_WIDTH` standard deviations, weights normalized to sum to one.
fn quadrature(model: &Model, x: &[f64]) -> (f64, f64) {
    let (mean, var) = encode_variational(x, &model.encoder).unwrap();
    let (m, v) = (mean.0[0], var[0]);
    let sd = (v / 2.0).sqrt();
    let s2 = model.decoder.noise_variance().unwrap();
    let h = 2.0 * HALF_WIDTH / (NODES - 1) as f64;
    let offsets: Vec<f64> = (0..NODES).map(|i| -HALF_WIDTH + i as f64 * h).collect();

    let mut points = Vec::with_capacity(2 * NODES * NODES);
    let mut weights = Vec::with_capacity(NODES * NODES);
    for &a in &offsets {
        for &b in &offsets {
            points.extend([m.re + sd * a, m.im + sd * b]);
            weights.push((-(a * a + b * b) / 2.0).exp());
        }
    }
    let total: f64 = weights.iter().sum();
    let decoded = model
        .decoder
        .forward(&DenseTensor::matrix(NODES * NODES, 2, points.clone()).unwrap())
        .unwrap();

    let f = x.len() as f64;
    let mut neg_elbo = 0.0;
    let mut neg_entropy = 0.0;
    for (k, w) in weights.iter().enumerate() {
        let w = w / total;
        let (zr, zi) = (points[2 * k], points[2 * k + 1]);
        let sq: f64 = decoded.row_slice(k).iter().zip(x).map(|(d, xi)| (xi - d).powi(2)).sum();
        let log_lik = -0.5 * f * (2.0 * PI * s2).ln() - sq / (2.0 * s2);
        let log_prior = -PI.ln() - (zr * zr + zi * zi);
        let log_q = -(PI * v).ln() - ((zr - m.re).powi(2) + (zi - m.im).powi(2)) / v;
        neg_elbo += w * (log_q - log_lik - log_prior);
        neg_entropy += w * log_q;
    }
    (neg_elbo, neg_entropy)
}

#[test]
fn monte_carlo_elbo_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut model = Model::init(&ArchitectureSpec::mlp4(4, 1), Variant::Probabilistic, 5).unwrap();
    let mut blocks = model.blocks();
    for b in blocks.iter_mut() {
        for v in b.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    model.set_blocks(&blocks).unwrap();
    model.decoder.log_noise_var = Some(-1.0);

    let x = vec![0.4, -1.2, 0.7, 0.1];
    let (want, want_neg_entropy) = quadrature(&model, &x);

    let batch = Batch::new(vec![TimeSeries::new(vec![0.0], vec![x]).unwrap()]).unwrap();
    let ou = tie_sfa(&model.lambda()).unwrap();
    let runs: Vec<f64> = (0..8)
        .map(|s| elbo(&batch, &model, &ou, &mut ChaCha8Rng::seed_from_u64(s), 20_000).unwrap().total)
        .collect();
    let mean = runs.iter().sum::<f64>() / runs.len() as f64;
    let se = (runs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (runs.len() as f64 - 1.0)).sqrt()
        / (runs.len() as f64).sqrt();
    assert!((mean - want).abs() <= 4.0 * se, "Monte Carlo {mean} ± {se}, quadrature {want}");

    let r = elbo(&batch, &model, &ou, &mut ChaCha8Rng::seed_from_u64(0), 1).unwrap();
    let got = r.part("neg_entropy").unwrap();
    assert!((got - want_neg_entropy).abs() <= 1e-9, "closed form {got}, quadrature {want_neg_entropy}");
}
