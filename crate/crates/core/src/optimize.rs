//! Adam, minibatching and the training loop shared by both model variants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::TimeSeries;
use crate::error::{Error, Result};
use crate::latent::tie_sfa;
use crate::model::{Checkpoint, Model, Variant};
use crate::objectives::{
    deterministic_graph, elbo_graph, map_regularizer_on_tape, Batch, LossReport, ParamPrior, StackedBatch,
};
use crate::tensor::{DenseTensor, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<DenseTensor>,
    pub v: Vec<DenseTensor>,
}

impl AdamState {
    pub fn new(params: &[DenseTensor], lr: f64) -> Self {
        Self::with_hyper(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &[DenseTensor], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<DenseTensor> = params.iter().map(|p| DenseTensor::zeros(p.rows(), p.cols())).collect();
        Self {
            step: 0,
            lr,
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update in place. `names` labels the blocks for
/// diagnostics; a non-finite gradient aborts before anything is modified.
pub fn adam_step(params: &mut [DenseTensor], grads: &[DenseTensor], names: &[String], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "{} parameter blocks, {} gradients, {} moment blocks",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let name = names.get(i).map_or_else(|| format!("block {i}"), Clone::clone);
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Dimension(format!("{name}: gradient shape {:?} vs {:?}", g.shape(), p.shape())));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!("gradient of {name} is not finite")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (j, &gj) in g.data().iter().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p[j] -= state.lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Draws `batch_size` windows of `window_len` points: a series uniformly
/// among those long enough, then a start offset uniformly.
pub fn minibatch<R: Rng + ?Sized>(series: &[TimeSeries], window_len: usize, batch_size: usize, rng: &mut R) -> Result<Batch> {
    if window_len == 0 || batch_size == 0 {
        return Err(Error::Parameter("window length and batch size must be positive".into()));
    }
    let eligible: Vec<&TimeSeries> = series.iter().filter(|s| s.len() >= window_len).collect();
    if eligible.is_empty() {
        return Err(Error::Parameter(format!("window of {window_len} points is longer than every series")));
    }
    let windows = (0..batch_size)
        .map(|_| {
            let s = eligible[rng.random_range(0..eligible.len())];
            let start = rng.random_range(0..=s.len() - window_len);
            s.slice(start, start + window_len)
        })
        .collect();
    Batch::new(windows)
}

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_one() -> usize {
    1
}
fn default_log_every() -> usize {
    10
}
fn default_checkpoint_every() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    /// Window length for minibatching; whole series (full batch) if absent.
    #[serde(default)]
    pub window_len: Option<usize>,
    #[serde(default = "default_one")]
    pub batch_size: usize,
    /// Posterior draws per ELBO evaluation.
    #[serde(default = "default_one")]
    pub n_samples: usize,
    #[serde(default)]
    pub prior: ParamPrior,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn full_batch(iterations: usize, learning_rate: f64) -> Self {
        Self {
            iterations,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_eps(),
            window_len: None,
            batch_size: 1,
            n_samples: 1,
            prior: ParamPrior::Uniform,
            log_every: default_log_every(),
            checkpoint_every: default_checkpoint_every(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Configuration("learning rate must be positive and betas in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) || self.batch_size == 0 || self.n_samples == 0 || self.log_every == 0 {
            return Err(Error::Configuration(
                "epsilon, batch_size, n_samples and log_every must be positive".into(),
            ));
        }
        if self.checkpoint_every == 0 || self.window_len == Some(0) {
            return Err(Error::Configuration("checkpoint_every and window_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub seed: u64,
    pub config_digest: String,
    pub blocks: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iter: usize,
    pub total: f64,
    pub parts: Vec<(String, f64)>,
    /// `(Re λ, Im λ)` per component after the iteration's update.
    pub lambda: Vec<[f64; 2]>,
}

/// Training history. The JSON-lines form (header, then one entry per
/// logged iteration) is a pure function of the inputs; wall-clock offsets
/// are kept beside it in `elapsed_secs` and written separately.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub header: LogHeader,
    pub entries: Vec<LogEntry>,
    pub elapsed_secs: Vec<f64>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = serde_json::from_str(lines.next().ok_or("empty log")?).map_err(|e| e.to_string())?;
        let entries: Vec<LogEntry> = lines
            .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self {
            header,
            elapsed_secs: vec![0.0; entries.len()],
            entries,
        })
    }
}

/// Salt separating the training stream from the initialization streams.
const TRAIN_STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Resumable training state. Iteration `k` draws all its randomness from
/// stream `k` of a generator keyed by the seed, so stopping and resuming at
/// a checkpoint reproduces an uninterrupted run bit for bit.
pub struct Trainer<'a> {
    series: &'a [TimeSeries],
    full: Option<StackedBatch>,
    config: TrainConfig,
    seed: u64,
    digest: String,
    pub model: Model,
    pub adam: AdamState,
    pub iteration: usize,
    pub log: TrainLog,
    started: std::time::Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model, series: &'a [TimeSeries], config: TrainConfig, seed: u64, digest: &str) -> Result<Self> {
        let adam = AdamState::with_hyper(
            &model.blocks(),
            config.learning_rate,
            config.beta1,
            config.beta2,
            config.epsilon,
        );
        Self::resume(Checkpoint::new(digest, 0, model, Some(adam)), series, config, seed, Vec::new())
    }

    /// Continues from `checkpoint`; `entries` are the log entries already
    /// written up to that point.
    pub fn resume(
        checkpoint: Checkpoint,
        series: &'a [TimeSeries],
        config: TrainConfig,
        seed: u64,
        entries: Vec<LogEntry>,
    ) -> Result<Self> {
        config.validate()?;
        let model = checkpoint.model;
        if series.is_empty() || series.iter().any(|s| s.is_empty() || s.dim() != model.arch.input_dim) {
            return Err(Error::Dimension(format!(
                "dataset must be nonempty with {}-dimensional states",
                model.arch.input_dim
            )));
        }
        let adam = match checkpoint.adam {
            Some(a) => a,
            None => AdamState::with_hyper(&model.blocks(), config.learning_rate, config.beta1, config.beta2, config.epsilon),
        };
        let full = match config.window_len {
            None => Some(Batch::new(series.to_vec())?.stack()),
            Some(w) => {
                // surface a too-long window before the first step
                minibatch(series, w, 1, &mut ChaCha8Rng::seed_from_u64(0))?;
                None
            }
        };
        let n_logged = entries.len();
        Ok(Self {
            series,
            full,
            seed,
            digest: checkpoint.config_digest,
            log: TrainLog {
                header: LogHeader {
                    seed,
                    config_digest: String::new(),
                    blocks: model.block_names(),
                },
                entries,
                elapsed_secs: vec![0.0; n_logged],
            },
            config,
            model,
            adam,
            iteration: checkpoint.iteration,
            started: std::time::Instant::now(),
        })
        .map(|mut t| {
            t.log.header.config_digest = t.digest.clone();
            t
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.digest, self.iteration, self.model.clone(), Some(self.adam.clone()))
    }

    fn rng_for(&self, k: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ TRAIN_STREAM_SALT);
        rng.set_stream(k as u64);
        rng
    }

    /// Evaluates the objective and its gradients for iteration `k`.
    fn evaluate(&self, k: usize) -> Result<(LossReport, Vec<DenseTensor>)> {
        let mut rng = self.rng_for(k);
        let sampled;
        let batch = match &self.full {
            Some(b) => b,
            None => {
                let w = self.config.window_len.unwrap();
                sampled = minibatch(self.series, w, self.config.batch_size, &mut rng)?.stack();
                &sampled
            }
        };
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let mut graph = match self.model.variant {
            Variant::Deterministic => deterministic_graph(&mut tape, &self.model, &bound, batch, Some(&mut rng))?,
            Variant::Probabilistic => {
                // the tie is recomputed from the current spectrum every step
                tie_sfa(&self.model.lambda())?;
                elbo_graph(&mut tape, &self.model, &bound, batch, &mut rng, self.config.n_samples, true)?
            }
        };
        let leaves = bound.leaves();
        if let Some(p) = map_regularizer_on_tape(&mut tape, &leaves, self.config.prior)? {
            graph.push(&mut tape, "prior", p)?;
        }
        let report = graph.report(&tape);
        let mut adj = tape.gradients(graph.total)?;
        Ok((report, leaves.into_iter().map(|v| adj.take(v)).collect()))
    }

    /// One optimization step. A non-finite loss or gradient leaves the model
    /// untouched and returns a divergence error.
    pub fn step(&mut self) -> Result<LossReport> {
        let k = self.iteration + 1;
        let (report, grads) = self.evaluate(k)?;
        if !report.total.is_finite() {
            return Err(Error::Divergence {
                step: k,
                detail: format!("loss is {}", report.total),
            });
        }
        let mut blocks = self.model.blocks();
        let names = self.model.block_names();
        adam_step(&mut blocks, &grads, &names, &mut self.adam).map_err(|e| Error::Divergence {
            step: k,
            detail: e.to_string(),
        })?;
        let mut next = self.model.clone();
        next.set_blocks(&blocks)?;
        if self.model.variant == Variant::Probabilistic {
            tie_sfa(&next.lambda()).map_err(|e| Error::Divergence {
                step: k,
                detail: e.to_string(),
            })?;
        }
        self.model = next;
        self.iteration = k;
        if k % self.config.log_every == 0 || k == 1 || k == self.config.iterations {
            self.log.entries.push(LogEntry {
                iter: k,
                total: report.total,
                parts: report.parts.clone(),
                lambda: self.model.lambda().iter().map(|l| [l.re, l.im]).collect(),
            });
            self.log.elapsed_secs.push(self.started.elapsed().as_secs_f64());
        }
        Ok(report)
    }

    /// Runs to the configured iteration count, handing a checkpoint to
    /// `sink` every `checkpoint_every` iterations.
    pub fn run(&mut self, mut sink: impl FnMut(&Checkpoint, &TrainLog) -> Result<()>) -> Result<()> {
        while self.iteration < self.config.iterations {
            self.step()?;
            if self.iteration % self.config.checkpoint_every == 0 {
                sink(&self.checkpoint(), &self.log)?;
            }
        }
        Ok(())
    }
}

/// Trains a freshly initialized model; `seed` drives initialization and
/// every training draw.
pub fn train(
    series: &[TimeSeries],
    arch: &crate::networks::ArchitectureSpec,
    variant: Variant,
    config: &TrainConfig,
    seed: u64,
    digest: &str,
) -> Result<(Model, TrainLog)> {
    let model = Model::init(arch, variant, seed)?;
    let mut trainer = Trainer::new(model, series, config.clone(), seed, digest)?;
    trainer.run(|_, _| Ok(()))?;
    Ok((trainer.model, trainer.log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::ArchitectureSpec;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![DenseTensor::row(vec![1.0, -2.0])];
        let mut s = AdamState::new(&p, 0.1);
        let before = p.clone();
        adam_step(&mut p, &[DenseTensor::zeros(1, 2)], &names(1), &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_matches_hand_formula() {
        let g = [0.3, -2.0, 1e-3];
        let mut p = vec![DenseTensor::row(vec![0.0; 3])];
        let mut s = AdamState::new(&p, 0.01);
        adam_step(&mut p, &[DenseTensor::row(g.to_vec())], &names(1), &mut s).unwrap();
        for (x, gi) in p[0].data().iter().zip(g) {
            // m̂ = g, v̂ = g², so Δ = −lr g / (|g| + ε)
            let expect = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((x - expect).abs() < 1e-15, "{x} vs {expect}");
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = vec![DenseTensor::row(vec![0.8, -0.5, 0.3])];
        let mut s = AdamState::new(&p, 1e-2);
        for _ in 0..500 {
            let g = p[0].map(|x| 2.0 * x);
            adam_step(&mut p, &[g], &names(1), &mut s).unwrap();
        }
        let norm = p[0].sum_sq().sqrt();
        assert!(norm <= 1e-3, "norm {norm}");
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut p = vec![DenseTensor::scalar(1.0), DenseTensor::scalar(2.0)];
        let mut s = AdamState::new(&p, 0.1);
        let g = vec![DenseTensor::scalar(0.0), DenseTensor::from_raw(1, 1, vec![f64::NAN])];
        let err = adam_step(&mut p, &g, &["enc".into(), "spectrum.freq".into()], &mut s).unwrap_err();
        assert!(err.to_string().contains("spectrum.freq"));
        assert_eq!(s.step, 0);
    }

    fn series(n_series: usize, len: usize) -> Vec<TimeSeries> {
        (0..n_series)
            .map(|j| {
                TimeSeries::new(
                    (0..len).map(|i| i as f64 * 0.1).collect(),
                    (0..len).map(|i| vec![(i + j) as f64 * 0.01, 1.0]).collect(),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn minibatch_edge_cases() {
        let s = series(3, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let whole = minibatch(&s, 10, 5, &mut rng).unwrap();
        assert!(whole.windows.iter().all(|w| w.len() == 10 && w.times[0] == 0.0));
        assert!(matches!(minibatch(&s, 11, 1, &mut rng), Err(Error::Parameter(_))));
        let b = minibatch(&s, 4, 3, &mut rng).unwrap();
        for w in &b.windows {
            assert!(w.steps().iter().all(|&h| (h - 0.1).abs() < 1e-12));
        }
    }

    #[test]
    fn minibatch_offsets_are_uniform() {
        // 4 series × 7 offsets = 28 cells; χ² with 27 dof, p = 0.01 at 46.96
        let s = series(4, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = vec![0usize; 28];
        let draws = 10_000;
        for _ in 0..draws {
            let w = &minibatch(&s, 4, 1, &mut rng).unwrap().windows[0];
            let j = (w.states[0][0] * 100.0 - w.times[0] * 10.0).round() as usize;
            let off = (w.times[0] * 10.0).round() as usize;
            counts[j * 7 + off] += 1;
        }
        let e = draws as f64 / 28.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 46.96, "chi2 {chi2}");
    }

    #[test]
    fn zero_iterations_return_initial_model() {
        let s = series(2, 5);
        let arch = ArchitectureSpec::linear(2, 1);
        let (m, log) = train(&s, &arch, Variant::Deterministic, &TrainConfig::full_batch(0, 1e-3), 3, "d").unwrap();
        assert_eq!(m, Model::init(&arch, Variant::Deterministic, 3).unwrap());
        assert!(log.entries.is_empty());
    }

    #[test]
    fn training_is_reproducible_and_resumable() {
        let s = series(3, 12);
        let arch = ArchitectureSpec::mlp4(2, 1);
        let cfg = TrainConfig {
            window_len: Some(5),
            batch_size: 2,
            checkpoint_every: 7,
            log_every: 3,
            ..TrainConfig::full_batch(20, 1e-3)
        };
        for variant in [Variant::Deterministic, Variant::Probabilistic] {
            let (m1, l1) = train(&s, &arch, variant, &cfg, 9, "d").unwrap();
            let (m2, l2) = train(&s, &arch, variant, &cfg, 9, "d").unwrap();
            assert_eq!(m1, m2);
            assert_eq!(l1.to_jsonl(), l2.to_jsonl());

            let mut first = Trainer::new(Model::init(&arch, variant, 9).unwrap(), &s, cfg.clone(), 9, "d").unwrap();
            let mut saved = None;
            while first.iteration < 14 {
                first.step().unwrap();
                if first.iteration == 7 {
                    saved = Some((first.checkpoint(), first.log.entries.clone()));
                }
            }
            let (ck, entries) = saved.unwrap();
            let ck = Checkpoint::from_json(&ck.to_json(), std::path::Path::new("mem")).unwrap();
            let mut resumed = Trainer::resume(ck, &s, cfg.clone(), 9, entries).unwrap();
            resumed.run(|_, _| Ok(())).unwrap();
            assert_eq!(resumed.model, m1);
            assert_eq!(resumed.log.to_jsonl(), l1.to_jsonl());
        }
    }

    #[test]
    fn log_round_trips() {
        let s = series(2, 6);
        let (_, log) = train(
            &s,
            &ArchitectureSpec::linear(2, 1),
            Variant::Deterministic,
            &TrainConfig::full_batch(25, 1e-2),
            1,
            "abc",
        )
        .unwrap();
        assert_eq!(log.entries.len(), 4);
        let text = log.to_jsonl();
        assert_eq!(TrainLog::from_jsonl(&text).unwrap().to_jsonl(), text);
    }
}
