//! Series datasets: synthetic signals, CSV ingestion, chronological splits,
//! z-score normalization and sliding windows.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Tensor;

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV file {0} has no data rows")]
    Empty(String),
    #[error("row {row} has {found} fields, expected {expected}")]
    Ragged { row: usize, expected: usize, found: usize },
    #[error("row {row}, column {column}: '{cell}' is not a number")]
    NonNumeric { row: usize, column: usize, cell: String },
    #[error("CSV parse error: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("{part} split has {len} rows, windows need at least {needed}")]
    TooShort { part: &'static str, len: usize, needed: usize },
    #[error("invalid data configuration: {0}")]
    Config(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Row-major `[rows, channels]` series.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesDataset {
    values: Vec<f32>,
    rows: usize,
    channels: usize,
    names: Vec<String>,
}

impl SeriesDataset {
    pub fn new(values: Vec<f32>, rows: usize, channels: usize, names: Vec<String>) -> Result<Self, DataError> {
        if rows * channels != values.len() || names.len() != channels || channels == 0 {
            return Err(DataError::Config(format!(
                "{} values and {} names for {rows} x {channels}",
                values.len(),
                names.len()
            )));
        }
        Ok(Self {
            values,
            rows,
            channels,
            names,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn at(&self, row: usize, channel: usize) -> f32 {
        self.values[row * self.channels + channel]
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.names)?;
        for row in self.values.chunks(self.channels) {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(io_err(path))?;
        Ok(())
    }
}

/// Reads a rectangular numeric CSV; rows are time steps, columns channels.
pub fn load_csv(path: &Path, has_header: bool) -> Result<SeriesDataset, DataError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut names: Option<Vec<String>> = None;
    let mut values = Vec::new();
    let mut width = 0;
    let mut rows = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i + 1;
        if has_header && i == 0 {
            names = Some(rec.iter().map(str::to_string).collect());
            width = rec.len();
            continue;
        }
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        if width == 0 {
            width = rec.len();
        }
        if rec.len() != width {
            return Err(DataError::Ragged {
                row: line,
                expected: width,
                found: rec.len(),
            });
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f32 = cell.parse().map_err(|_| DataError::NonNumeric {
                row: line,
                column: j + 1,
                cell: cell.to_string(),
            })?;
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(DataError::Empty(path.display().to_string()));
    }
    let names = names.unwrap_or_else(|| (0..width).map(|j| format!("ch{j}")).collect());
    SeriesDataset::new(values, rows, width, names)
}

/// A fixed value or a uniform range drawn once per dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sampled {
    Fixed(f64),
    Uniform([f64; 2]),
}

impl Sampled {
    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Sampled::Fixed(v) => v,
            Sampled::Uniform([lo, hi]) if lo < hi => rng.random_range(lo..hi),
            Sampled::Uniform([lo, _]) => lo,
        }
    }
}

/// `x(t) = a1 sin(omega1 t) + a2 sin(omega2 t + phi) + N(0, sigma)` at
/// integer `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub a1: Sampled,
    pub a2: Sampled,
    pub omega1: f64,
    pub omega2: f64,
    pub phi: Sampled,
    pub sigma: f64,
    pub length: usize,
    pub seed: u64,
}

/// Values actually drawn for one generated series.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthDraw {
    pub a1: f64,
    pub a2: f64,
    pub phi: f64,
}

impl SynthConfig {
    pub fn low(length: usize, seed: u64) -> Self {
        Self {
            a1: Sampled::Uniform([1.0, 5.0]),
            a2: Sampled::Uniform([1.0, 2.0]),
            omega1: 5e-3,
            omega2: 0.04 * std::f64::consts::PI,
            phi: Sampled::Fixed(0.0),
            sigma: 0.3,
            length,
            seed,
        }
    }

    pub fn high(length: usize, seed: u64) -> Self {
        Self {
            a1: Sampled::Fixed(9.0),
            a2: Sampled::Fixed(8.0),
            omega1: 5e-3,
            omega2: 0.1 * std::f64::consts::PI,
            phi: Sampled::Uniform([0.0, 10.0]),
            sigma: 0.5,
            length,
            seed,
        }
    }

    pub fn preset(name: &str, length: usize, seed: u64) -> Result<Self, DataError> {
        match name {
            "low" => Ok(Self::low(length, seed)),
            "high" => Ok(Self::high(length, seed)),
            _ => Err(DataError::Config(format!("unknown synthetic preset '{name}' (expected low or high)"))),
        }
    }
}

/// Samples the signal with a ChaCha8 stream seeded by `cfg.seed`: the three
/// parameter draws come first, then one standard normal per step.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(SeriesDataset, SynthDraw), DataError> {
    if cfg.length == 0 {
        return Err(DataError::Config("synthetic length must be at least 1".into()));
    }
    if !(cfg.sigma >= 0.0) {
        return Err(DataError::Config(format!("noise std {} must be non-negative", cfg.sigma)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draw = SynthDraw {
        a1: cfg.a1.draw(&mut rng),
        a2: cfg.a2.draw(&mut rng),
        phi: cfg.phi.draw(&mut rng),
    };
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let values = (0..cfg.length)
        .map(|t| {
            let t = t as f64;
            let clean = draw.a1 * (cfg.omega1 * t).sin() + draw.a2 * (cfg.omega2 * t + draw.phi).sin();
            let noise = if cfg.sigma > 0.0 {
                cfg.sigma * normal.sample(&mut rng)
            } else {
                0.0
            };
            (clean + noise) as f32
        })
        .collect();
    let ds = SeriesDataset::new(values, cfg.length, 1, vec!["x".into()])?;
    Ok((ds, draw))
}

/// Chronological row ranges.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub valid: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    pub fn part(&self, part: Part) -> Range<usize> {
        match part {
            Part::Train => self.train.clone(),
            Part::Valid => self.valid.clone(),
            Part::Test => self.test.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Valid,
    Test,
}

impl Part {
    pub fn name(self) -> &'static str {
        match self {
            Part::Train => "train",
            Part::Valid => "valid",
            Part::Test => "test",
        }
    }
}

/// Boundaries at `floor(n * train)` and `floor(n * (train + valid))`.
pub fn split(n: usize, ratios: (f64, f64, f64)) -> Result<Splits, DataError> {
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !(0.0..=1.0).contains(r)) || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(DataError::Split(format!("ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    // the small slack keeps e.g. 100 * (0.7 + 0.2) from flooring to 89
    let cut = |r: f64| ((n as f64 * r) + 1e-7).floor() as usize;
    let a = cut(tr).min(n);
    let b = cut(tr + va).clamp(a, n);
    if a == 0 || b == a || b == n {
        return Err(DataError::Split(format!(
            "ratios {ratios:?} leave an empty part of {n} rows ({a}/{}/{})",
            b - a,
            n - b
        )));
    }
    Ok(Splits {
        train: 0..a,
        valid: a..b,
        test: b..n,
    })
}

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Mean and population standard deviation of `rows`, std floored at
    /// [`STD_FLOOR`].
    pub fn fit(ds: &SeriesDataset, rows: Range<usize>) -> Result<Self, DataError> {
        if rows.is_empty() || rows.end > ds.rows() {
            return Err(DataError::Split(format!("cannot fit statistics on rows {rows:?}")));
        }
        let c = ds.channels();
        let n = rows.len() as f64;
        let mut mean = vec![0.0f64; c];
        for r in rows.clone() {
            for (j, m) in mean.iter_mut().enumerate() {
                *m += ds.at(r, j) as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; c];
        for r in rows {
            for (j, v) in var.iter_mut().enumerate() {
                let d = ds.at(r, j) as f64 - mean[j];
                *v += d * d;
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn normalize(&self, ds: &SeriesDataset) -> SeriesDataset {
        let c = ds.channels();
        let values = ds
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| ((v as f64 - self.mean[i % c]) / self.std[i % c]) as f32)
            .collect();
        SeriesDataset::new(values, ds.rows(), c, ds.names().to_vec()).expect("same shape")
    }

    /// Maps normalized values laid out with `channels` as the fastest axis
    /// back to the original scale.
    pub fn denormalize(&self, values: &mut [f32]) {
        let c = self.mean.len();
        for (i, v) in values.iter_mut().enumerate() {
            *v = (*v as f64 * self.std[i % c] + self.mean[i % c]) as f32;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub lookback: usize,
    pub horizon: usize,
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

impl WindowSpec {
    pub fn new(lookback: usize, horizon: usize) -> Self {
        Self {
            lookback,
            horizon,
            stride: 1,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.lookback == 0 || self.horizon == 0 || self.stride == 0 {
            return Err(DataError::Config(format!(
                "lookback, horizon and stride must be positive, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Number of windows fitting in `len` rows.
    pub fn count(&self, len: usize) -> usize {
        let span = self.lookback + self.horizon;
        if len < span {
            0
        } else {
            (len - span) / self.stride + 1
        }
    }
}

/// Sliding `(X, Y)` pairs inside one split.
#[derive(Clone, Debug)]
pub struct Windows<'a> {
    ds: &'a SeriesDataset,
    rows: Range<usize>,
    spec: WindowSpec,
    count: usize,
}

impl<'a> Windows<'a> {
    pub fn new(ds: &'a SeriesDataset, rows: Range<usize>, spec: WindowSpec, part: &'static str) -> Result<Self, DataError> {
        spec.validate()?;
        let count = spec.count(rows.len());
        if count == 0 {
            return Err(DataError::TooShort {
                part,
                len: rows.len(),
                needed: spec.lookback + spec.horizon,
            });
        }
        Ok(Self { ds, rows, spec, count })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn spec(&self) -> WindowSpec {
        self.spec
    }

    /// First dataset row of window `i`.
    pub fn start(&self, i: usize) -> usize {
        self.rows.start + i * self.spec.stride
    }

    fn copy_rows(&self, from: usize, n: usize, out: &mut Vec<f32>) {
        let c = self.ds.channels();
        out.extend_from_slice(&self.ds.values()[from * c..(from + n) * c]);
    }

    /// Window `i` as `([T, C], [L, C])`.
    pub fn get(&self, i: usize) -> (Tensor, Tensor) {
        let (x, y) = self.batch(&[i]);
        let c = self.ds.channels();
        (
            x.reshaped(vec![self.spec.lookback, c]).expect("window shape"),
            y.reshaped(vec![self.spec.horizon, c]).expect("window shape"),
        )
    }

    /// Stacked windows as `([B, T, C], [B, L, C])`.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let (t, l, c) = (self.spec.lookback, self.spec.horizon, self.ds.channels());
        let mut xs = Vec::with_capacity(idx.len() * t * c);
        let mut ys = Vec::with_capacity(idx.len() * l * c);
        for &i in idx {
            assert!(i < self.count, "window {i} out of range ({} windows)", self.count);
            let s = self.start(i);
            self.copy_rows(s, t, &mut xs);
            self.copy_rows(s + t, l, &mut ys);
        }
        (
            Tensor::new(vec![idx.len(), t, c], xs).expect("window shape"),
            Tensor::new(vec![idx.len(), l, c], ys).expect("window shape"),
        )
    }

    pub fn iter(&self) -> impl Iterator<Item = (Tensor, Tensor)> + '_ {
        (0..self.count).map(|i| self.get(i))
    }
}

/// A dataset split, normalized with train statistics.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub data: SeriesDataset,
    pub splits: Splits,
    pub stats: NormStats,
}

impl Prepared {
    pub fn new(raw: &SeriesDataset, ratios: (f64, f64, f64), normalize: bool) -> Result<Self, DataError> {
        let splits = split(raw.rows(), ratios)?;
        let stats = if normalize {
            NormStats::fit(raw, splits.train.clone())?
        } else {
            NormStats::identity(raw.channels())
        };
        Ok(Self {
            data: stats.normalize(raw),
            splits,
            stats,
        })
    }

    pub fn windows(&self, part: Part, spec: WindowSpec) -> Result<Windows<'_>, DataError> {
        Windows::new(&self.data, self.splits.part(part), spec, part.name())
    }
}

/// Writes `rows` of CSV text, used by small helpers and tests.
pub fn write_rows(path: &Path, rows: &[Vec<String>]) -> Result<(), DataError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    for r in rows {
        writeln!(f, "{}", r.join(",")).map_err(io_err(path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(rows: usize, channels: usize, f: impl Fn(usize, usize) -> f32) -> SeriesDataset {
        let v = (0..rows).flat_map(|r| (0..channels).map(move |c| (r, c))).map(|(r, c)| f(r, c)).collect();
        SeriesDataset::new(v, rows, channels, (0..channels).map(|c| format!("c{c}")).collect()).unwrap()
    }

    #[test]
    fn degenerate_synth_is_pure_sine() {
        let cfg = SynthConfig {
            a1: Sampled::Fixed(1.0),
            a2: Sampled::Fixed(0.0),
            omega1: 0.3,
            omega2: 1.0,
            phi: Sampled::Fixed(0.0),
            sigma: 0.0,
            length: 50,
            seed: 1,
        };
        let (d, _) = synth_generate(&cfg).unwrap();
        for t in 0..50 {
            assert_eq!(d.at(t, 0), (0.3 * t as f64).sin() as f32);
        }
    }

    #[test]
    fn presets_hold_listed_values() {
        let low = SynthConfig::low(10, 0);
        assert_eq!(low.a1, Sampled::Uniform([1.0, 5.0]));
        assert_eq!(low.a2, Sampled::Uniform([1.0, 2.0]));
        assert_eq!(low.omega2, 0.04 * std::f64::consts::PI);
        assert_eq!((low.sigma, low.omega1), (0.3, 5e-3));
        let high = SynthConfig::high(10, 0);
        assert_eq!((high.a1, high.a2), (Sampled::Fixed(9.0), Sampled::Fixed(8.0)));
        assert_eq!(high.omega2, 0.1 * std::f64::consts::PI);
        assert_eq!(high.phi, Sampled::Uniform([0.0, 10.0]));
        assert_eq!((high.sigma, high.omega1), (0.5, 5e-3));
        assert!(SynthConfig::preset("mid", 1, 0).is_err());
    }

    #[test]
    fn noiseless_synth_is_bounded_and_draws_in_range() {
        for seed in 0..20 {
            let mut cfg = SynthConfig::low(400, seed);
            cfg.sigma = 0.0;
            let (d, draw) = synth_generate(&cfg).unwrap();
            assert!((1.0..5.0).contains(&draw.a1) && (1.0..2.0).contains(&draw.a2));
            let bound = (draw.a1.abs() + draw.a2.abs()) as f32 + 1e-5;
            assert!(d.values().iter().all(|v| v.abs() <= bound));
            let (_, hd) = synth_generate(&SynthConfig::high(5, seed)).unwrap();
            assert!((0.0..10.0).contains(&hd.phi));
        }
    }

    #[test]
    fn synth_is_deterministic_and_noise_has_the_right_spread() {
        let cfg = SynthConfig::high(5000, 9);
        let (a, da) = synth_generate(&cfg).unwrap();
        let (b, db) = synth_generate(&cfg).unwrap();
        assert_eq!((a.clone(), da), (b, db));
        let clean = SynthConfig { sigma: 0.0, ..cfg };
        let (c, _) = synth_generate(&clean).unwrap();
        let resid: Vec<f64> = a.values().iter().zip(c.values()).map(|(x, y)| (x - y) as f64).collect();
        let m = resid.iter().sum::<f64>() / resid.len() as f64;
        let sd = (resid.iter().map(|r| (r - m).powi(2)).sum::<f64>() / resid.len() as f64).sqrt();
        assert!(m.abs() < 0.05 && (sd - 0.5).abs() < 0.03, "mean {m}, sd {sd}");
    }

    #[test]
    fn split_boundaries() {
        let s = split(100, (0.6, 0.2, 0.2)).unwrap();
        assert_eq!((s.train, s.valid, s.test), (0..60, 60..80, 80..100));
        let s = split(100, (0.7, 0.2, 0.1)).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (70, 20, 10));
        let s = split(34_272, (0.7, 0.2, 0.1)).unwrap();
        assert_eq!((s.train.end, s.valid.end), (23_990, 30_844));
        assert!(split(100, (0.5, 0.2, 0.2)).is_err());
        assert!(split(100, (1.0, 0.0, 0.0)).is_err());
        assert!(split(3, (0.34, 0.33, 0.33)).is_ok());
        assert!(split(2, (0.4, 0.3, 0.3)).is_err());
    }

    #[test]
    fn normalization_uses_train_rows_only() {
        let d = ds(10, 2, |r, c| if c == 0 { r as f32 } else { 7.0 });
        let st = NormStats::fit(&d, 0..6).unwrap();
        assert_eq!(st.mean, vec![2.5, 7.0]);
        assert_eq!(st.std[1], STD_FLOOR);
        let mut mutated = d.clone();
        mutated.values[15] = 1e6;
        assert_eq!(NormStats::fit(&mutated, 0..6).unwrap(), st);
        let n = st.normalize(&d);
        assert!((0..10).all(|r| n.at(r, 1) == 0.0));
        let m: f64 = (0..6).map(|r| n.at(r, 0) as f64).sum::<f64>() / 6.0;
        let v: f64 = (0..6).map(|r| (n.at(r, 0) as f64 - m).powi(2)).sum::<f64>() / 6.0;
        assert!(m.abs() < 1e-6 && (v.sqrt() - 1.0).abs() < 1e-6);
        let mut back = n.values().to_vec();
        st.denormalize(&mut back);
        for (a, b) in back.iter().zip(d.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn window_count_and_contents() {
        let d = ds(10, 1, |r, _| r as f32);
        let w = Windows::new(&d, 0..10, WindowSpec::new(3, 2), "train").unwrap();
        assert_eq!(w.len(), 6);
        let (x, y) = w.get(0);
        assert_eq!((x.data(), y.data()), (&[0.0, 1.0, 2.0][..], &[3.0, 4.0][..]));
        let (x, y) = w.get(5);
        assert_eq!((x.data(), y.data()), (&[5.0, 6.0, 7.0][..], &[8.0, 9.0][..]));
        let strided = Windows::new(&d, 0..10, WindowSpec { stride: 2, ..WindowSpec::new(3, 2) }, "train").unwrap();
        assert_eq!(strided.len(), 3);
        assert!(matches!(
            Windows::new(&d, 0..4, WindowSpec::new(3, 2), "valid"),
            Err(DataError::TooShort { part: "valid", .. })
        ));
    }

    #[test]
    fn windows_never_cross_split_boundaries() {
        for n in 8..30 {
            let d = ds(n, 1, |r, _| r as f32);
            let Ok(p) = Prepared::new(&d, (0.5, 0.25, 0.25), false) else { continue };
            for t in 1..4 {
                for l in 1..3 {
                    for part in [Part::Train, Part::Valid, Part::Test] {
                        let range = p.splits.part(part);
                        let Ok(w) = p.windows(part, WindowSpec::new(t, l)) else { continue };
                        assert_eq!(w.len(), range.len() - t - l + 1);
                        for (x, y) in w.iter() {
                            let rows: Vec<usize> = x.data().iter().chain(y.data()).map(|&v| v as usize).collect();
                            assert!(rows.iter().all(|r| range.contains(r)));
                            // targets strictly follow inputs
                            assert!(x.data().iter().all(|&a| y.data().iter().all(|&b| a < b)));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write_rows(&p, &[vec!["a".into(), "b".into()], vec!["1".into(), "2".into()], vec!["3".into(), "4.5".into()], vec!["5".into(), "-6".into()]]).unwrap();
        let d = load_csv(&p, true).unwrap();
        assert_eq!((d.rows(), d.channels()), (3, 2));
        assert_eq!(d.names(), &["a".to_string(), "b".to_string()]);
        assert_eq!(d.values(), &[1.0, 2.0, 3.0, 4.5, 5.0, -6.0]);
        let out = dir.path().join("b.csv");
        d.write_csv(&out).unwrap();
        assert_eq!(load_csv(&out, true).unwrap(), d);

        let ragged = dir.path().join("r.csv");
        write_rows(&ragged, &[vec!["1".into(), "2".into()], vec!["3".into()]]).unwrap();
        assert!(matches!(load_csv(&ragged, false), Err(DataError::Ragged { row: 2, expected: 2, found: 1 })));
        let bad = dir.path().join("n.csv");
        write_rows(&bad, &[vec!["1".into(), "x".into()]]).unwrap();
        assert!(matches!(load_csv(&bad, false), Err(DataError::NonNumeric { row: 1, column: 2, .. })));
        let empty = dir.path().join("e.csv");
        write_rows(&empty, &[vec!["a".into()]]).unwrap();
        assert!(matches!(load_csv(&empty, true), Err(DataError::Empty(_))));
        assert!(matches!(load_csv(&dir.path().join("missing.csv"), true), Err(DataError::Io { .. })));
    }
}
