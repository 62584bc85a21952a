//! Training corpora: time series, datasets with manifests, and the three
//! generators (linear ODE, hidden multiscale process, Kuramoto–Sivashinsky).
//!
//! # On-disk layout
//!
//! A dataset directory holds `manifest.json`, `series.bin` and `series.txt`.
//! The manifest carries the generator config, its SHA-256 digest, the seed,
//! ground-truth parameters and the SHA-256 of `series.bin`.
//!
//! `series.bin` is little-endian:
//!
//! ```text
//! b"TSRD"            magic
//! u32                format version (1)
//! u64                series count S
//! u64                state dimension f
//! S × {
//!   u64              point count n
//!   n × { f64 t, f × f64 state }
//! }
//! ```
//!
//! `series.txt` is the same content as text: a `# tsrom dataset v1 <S> <f>`
//! header, then per series a `series <index> <n>` line followed by `n` lines
//! of whitespace-separated `t x_1 … x_f` in shortest round-trip notation.

mod ks;
mod linear_ode;
mod multiscale;
mod rk4;

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::write_atomic;

pub use ks::{etdrk4_ks, gen_ks, ks_initial_state, KsConfig, KsInitial, KsSolver};
pub use linear_ode::{gen_linear_ode, linear_ode_exact, LinearOdeConfig};
pub use multiscale::{gen_hidden_multiscale, sample_mixing, MultiscaleConfig};
pub use rk4::rk4_integrate;

/// Time stamps with one state vector each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl TimeSeries {
    pub fn new(times: Vec<f64>, states: Vec<Vec<f64>>) -> Result<Self> {
        let s = Self { times, states };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    /// Strictly increasing finite times, one equal-length finite state each.
    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.states.len() {
            return Err(Error::Dimension(format!(
                "{} time stamps for {} states",
                self.times.len(),
                self.states.len()
            )));
        }
        let f = self.dim();
        if self.states.iter().any(|s| s.len() != f) {
            return Err(Error::Dimension("states of differing length".into()));
        }
        if self.times.iter().chain(self.states.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("series contains non-finite values".into()));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Parameter("time stamps must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Points `start..end` as a new series.
    pub fn slice(&self, start: usize, end: usize) -> TimeSeries {
        TimeSeries {
            times: self.times[start..end].to_vec(),
            states: self.states[start..end].to_vec(),
        }
    }

    pub fn steps(&self) -> Vec<f64> {
        self.times.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Cuts the leading `n_series · len` points into contiguous windows.
pub fn split_series(trajectory: &TimeSeries, n_series: usize, len: usize) -> Result<Vec<TimeSeries>> {
    if n_series == 0 || len == 0 {
        return Err(Error::Parameter("series count and length must be positive".into()));
    }
    if n_series * len > trajectory.len() {
        return Err(Error::Parameter(format!(
            "{n_series} series of {len} points need {} points, trajectory has {}",
            n_series * len,
            trajectory.len()
        )));
    }
    Ok((0..n_series).map(|j| trajectory.slice(j * len, (j + 1) * len)).collect())
}

/// Known generative parameters, kept for oracle comparisons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GroundTruth {
    LinearOde {
        /// Decay rates `λ` with `dx/dt = −λ x` along each eigenvector.
        rates: Vec<f64>,
        eigenvectors: Vec<[f64; 2]>,
    },
    Multiscale {
        /// Latent rates with `dp/dt = −λ p`.
        lambda: Vec<Complex64>,
        p0: Vec<Complex64>,
        /// Row-major `f × 2k` map from `(re, im)` channels to states.
        mixing: Vec<Vec<f64>>,
    },
    Ks {
        initial_condition: String,
    },
}

pub const DATASET_FORMAT: &str = "tsrom-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub generator: String,
    pub config: serde_json::Value,
    pub config_digest: String,
    pub seed: u64,
    pub dim: usize,
    pub n_series: usize,
    pub points_per_series: Vec<usize>,
    pub ground_truth: GroundTruth,
    pub data_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub series: Vec<TimeSeries>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of a config's canonical JSON form.
pub fn config_digest<T: Serialize>(config: &T) -> String {
    sha256_hex(serde_json::to_string(config).expect("config serializes").as_bytes())
}

const MAGIC: &[u8; 4] = b"TSRD";

impl Dataset {
    pub fn new<C: Serialize>(
        generator: &str,
        config: &C,
        seed: u64,
        ground_truth: GroundTruth,
        series: Vec<TimeSeries>,
    ) -> Result<Self> {
        if series.is_empty() {
            return Err(Error::Parameter("a dataset needs at least one series".into()));
        }
        let dim = series[0].dim();
        for s in &series {
            s.validate()?;
            if s.is_empty() || s.dim() != dim {
                return Err(Error::Dimension("series are empty or differ in dimension".into()));
            }
        }
        let mut ds = Self {
            manifest: Manifest {
                format: DATASET_FORMAT.into(),
                version: DATASET_VERSION,
                generator: generator.into(),
                config: serde_json::to_value(config).expect("config serializes"),
                config_digest: config_digest(config),
                seed,
                dim,
                n_series: series.len(),
                points_per_series: series.iter().map(TimeSeries::len).collect(),
                ground_truth,
                data_sha256: String::new(),
            },
            series,
        };
        ds.manifest.data_sha256 = sha256_hex(&ds.to_binary());
        Ok(ds)
    }

    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.series.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        for s in &self.series {
            out.extend_from_slice(&(s.len() as u64).to_le_bytes());
            for (t, x) in s.times.iter().zip(&s.states) {
                out.extend_from_slice(&t.to_le_bytes());
                for v in x {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn series_from_binary(bytes: &[u8], path: &Path) -> Result<Vec<TimeSeries>> {
        let mut r = ByteReader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "bad magic"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != DATASET_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let n_series = r.u64()?;
        let f = r.u64()?;
        let mut series = Vec::new();
        for _ in 0..n_series {
            let n = r.u64()?;
            let mut times = Vec::with_capacity(n.min(1 << 20) as usize);
            let mut states = Vec::with_capacity(n.min(1 << 20) as usize);
            for _ in 0..n {
                times.push(r.f64()?);
                states.push((0..f).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
            }
            let s = TimeSeries { times, states };
            s.validate().map_err(|e| Error::format(path, e.to_string()))?;
            series.push(s);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes"));
        }
        Ok(series)
    }

    pub fn to_text(&self) -> String {
        use std::fmt::Write;
        let mut out = format!("# tsrom dataset v{} {} {}\n", DATASET_VERSION, self.series.len(), self.dim());
        for (i, s) in self.series.iter().enumerate() {
            writeln!(out, "series {i} {}", s.len()).unwrap();
            for (t, x) in s.times.iter().zip(&s.states) {
                write!(out, "{t:e}").unwrap();
                for v in x {
                    write!(out, " {v:e}").unwrap();
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn series_from_text(text: &str, path: &Path) -> Result<Vec<TimeSeries>> {
        let bad = |line: usize, what: &str| Error::format(path, format!("line {}: {what}", line + 1));
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| bad(0, "empty file"))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 6 || h[..3] != ["#", "tsrom", "dataset"] || h[3] != format!("v{DATASET_VERSION}") {
            return Err(bad(0, "bad header"));
        }
        let n_series: usize = h[4].parse().map_err(|_| bad(0, "bad series count"))?;
        let f: usize = h[5].parse().map_err(|_| bad(0, "bad dimension"))?;
        let mut series = Vec::with_capacity(n_series);
        for j in 0..n_series {
            let (ln, head) = lines.next().ok_or_else(|| bad(0, "missing series"))?;
            let parts: Vec<&str> = head.split_whitespace().collect();
            if parts.len() != 3 || parts[0] != "series" || parts[1] != j.to_string() {
                return Err(bad(ln, "expected series header"));
            }
            let n: usize = parts[2].parse().map_err(|_| bad(ln, "bad point count"))?;
            let mut times = Vec::with_capacity(n);
            let mut states = Vec::with_capacity(n);
            for _ in 0..n {
                let (ln, row) = lines.next().ok_or_else(|| bad(ln, "truncated series"))?;
                let vals = row
                    .split_whitespace()
                    .map(str::parse::<f64>)
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(ln, "unparsable number"))?;
                if vals.len() != f + 1 {
                    return Err(bad(ln, "wrong column count"));
                }
                times.push(vals[0]);
                states.push(vals[1..].to_vec());
            }
            let s = TimeSeries { times, states };
            s.validate().map_err(|e| Error::format(path, e.to_string()))?;
            series.push(s);
        }
        if lines.any(|(_, l)| !l.trim().is_empty()) {
            return Err(Error::format(path, "trailing content"));
        }
        Ok(series)
    }

    /// Writes `manifest.json`, `series.bin` and `series.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("series.bin"), &self.to_binary())?;
        write_atomic(&dir.join("series.txt"), self.to_text().as_bytes())?;
        let manifest = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write_atomic(&dir.join("manifest.json"), manifest.as_bytes())
    }

    /// Loads a dataset directory from its binary form, checking the data
    /// digest recorded in the manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        if manifest.format != DATASET_FORMAT || manifest.version != DATASET_VERSION {
            return Err(Error::format(&mpath, "unsupported dataset format"));
        }
        let bpath = dir.join("series.bin");
        let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let found = sha256_hex(&bytes);
        if found != manifest.data_sha256 {
            return Err(Error::format(
                &bpath,
                format!("content digest {found} does not match manifest {}", manifest.data_sha256),
            ));
        }
        let series = Self::series_from_binary(&bytes, &bpath)?;
        if series.len() != manifest.n_series || series.iter().any(|s| s.dim() != manifest.dim) {
            return Err(Error::format(&bpath, "series disagree with the manifest"));
        }
        Ok(Self { manifest, series })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl ByteReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "unexpected end of data"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
