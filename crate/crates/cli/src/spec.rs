//! Parsing of the `--anchor` and `--times` arguments.

use std::path::Path;

use tsrom::{Dataset, Error, Result};

pub enum Anchor {
    /// Point `point` of series `series` in the dataset.
    Series { series: usize, point: usize },
    /// Whitespace- or comma-separated state values in a file.
    File(String),
}

impl Anchor {
    /// `series:I`, `series:I:J`, or a path to a state file.
    pub fn parse(spec: &str) -> Result<Self> {
        if let Some(rest) = spec.strip_prefix("series:") {
            let parts: Vec<&str> = rest.split(':').collect();
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad_anchor(spec));
            return match parts.as_slice() {
                [i] => Ok(Anchor::Series { series: num(i)?, point: 0 }),
                [i, j] => Ok(Anchor::Series { series: num(i)?, point: num(j)? }),
                _ => Err(bad_anchor(spec)),
            };
        }
        Ok(Anchor::File(spec.strip_prefix("file:").unwrap_or(spec).to_string()))
    }

    /// The anchor state and its time.
    pub fn resolve(&self, dataset: Option<&Dataset>, anchor_time: Option<f64>) -> Result<(Vec<f64>, f64)> {
        match self {
            Anchor::Series { series, point } => {
                let ds = dataset.ok_or_else(|| Error::Parameter("a series anchor needs --dataset".into()))?;
                let s = ds
                    .series
                    .get(*series)
                    .ok_or_else(|| Error::Parameter(format!("dataset has no series {series}")))?;
                if *point >= s.len() {
                    return Err(Error::Parameter(format!("series {series} has no point {point}")));
                }
                Ok((s.states[*point].clone(), anchor_time.unwrap_or(s.times[*point])))
            }
            Anchor::File(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                    path: Path::new(path).to_path_buf(),
                    source: e,
                })?;
                let x = text
                    .split(|c: char| c.is_whitespace() || c == ',')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<f64>().map_err(|_| Error::Parameter(format!("{path}: `{s}` is not a number"))))
                    .collect::<Result<Vec<_>>>()?;
                Ok((x, anchor_time.unwrap_or(0.0)))
            }
        }
    }
}

fn bad_anchor(spec: &str) -> Error {
    Error::Parameter(format!("cannot read anchor `{spec}`; use series:I[:J] or a state file"))
}

/// `start:stop:step` (stop included when it lies on the grid) or a comma
/// list of times.
pub fn parse_times(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::Parameter(format!("cannot read times `{spec}`"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        let [a, b, h] = parts.as_slice() else { return Err(bad()) };
        let (a, b, h) = (num(a)?, num(b)?, num(h)?);
        if !(h > 0.0) || !(b >= a) {
            return Err(bad());
        }
        let n = ((b - a) / h + 1e-9).floor() as usize;
        return Ok((0..=n).map(|i| a + i as f64 * h).collect());
    }
    spec.split(',').map(num).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_ranges() {
        assert_eq!(parse_times("0:1:0.25").unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(parse_times("1.5, 2,4").unwrap(), vec![1.5, 2.0, 4.0]);
        assert!(parse_times("0:1").is_err());
        assert!(parse_times("1:0:0.1").is_err());
        assert!(parse_times("a,b").is_err());
    }

    #[test]
    fn anchors() {
        assert!(matches!(Anchor::parse("series:3").unwrap(), Anchor::Series { series: 3, point: 0 }));
        assert!(matches!(Anchor::parse("series:3:7").unwrap(), Anchor::Series { series: 3, point: 7 }));
        assert!(Anchor::parse("series:x").is_err());
        assert!(matches!(Anchor::parse("file:a.txt").unwrap(), Anchor::File(p) if p == "a.txt"));
    }
}
