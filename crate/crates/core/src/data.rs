//! Datasets: CSV ingestion, z-score normalisation and seeded synthetic
//! generators.
//!
//! The generators use [`SplitMix64`] rather than a platform RNG so that a
//! `(kind, n, seed, params)` tuple yields the same rows in any language:
//!
//! * uniform: `(next_u64() >> 11) * 2^-53`, in `[0, 1)`
//! * standard normal: Box-Muller on two uniforms `u1, u2`,
//!   `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)` (one normal per pair, no caching)

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Labeled or unlabeled feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Option<Vec<i8>>,
    pub name: String,
}

impl Dataset {
    pub fn new(x: Vec<Vec<f64>>, y: Option<Vec<i8>>, name: impl Into<String>) -> Result<Self> {
        let ds = Self {
            x,
            y,
            name: name.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.x.first() else {
            return Err(Error::Csv("dataset is empty".to_string()));
        };
        let d = first.len();
        if let Some(row) = self.x.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
        if let Some(y) = &self.y {
            if y.len() != self.x.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.x.len(),
                    got: y.len(),
                });
            }
            if y.iter().any(|&l| l != 1 && l != -1) {
                return Err(Error::InvalidParameter(
                    "labels must be +1 or -1".to_string(),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    /// Concatenates rows (and labels, which must be present on both or neither).
    pub fn concat(mut self, other: Dataset) -> Result<Self> {
        if !self.x.is_empty() && !other.x.is_empty() && self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        self.y = match (self.y, other.y) {
            (Some(mut a), Some(b)) => {
                a.extend(b);
                Some(a)
            }
            (None, None) => None,
            _ => {
                return Err(Error::InvalidParameter(
                    "cannot concatenate labeled and unlabeled datasets".to_string(),
                ))
            }
        };
        self.x.extend(other.x);
        self.name = format!("{}+{}", self.name, other.name);
        Ok(self)
    }
}

/// SplitMix64 stream.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * PI * u2).cos()
    }

    /// Uniform index in `0..n` by rejection-free multiply-shift.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle, last position first.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Gauss,
    Ring,
    BoxOutliers,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss" => Ok(Self::Gauss),
            "ring" => Ok(Self::Ring),
            "box_outliers" | "box" => Ok(Self::BoxOutliers),
            other => Err(Error::InvalidParameter(format!(
                "unknown synthetic kind `{other}` (expected gauss, ring or box_outliers)"
            ))),
        }
    }
}

impl SynthKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Gauss => "gauss",
            Self::Ring => "ring",
            Self::BoxOutliers => "box_outliers",
        }
    }
}

/// Generator parameters; each kind reads only its own fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    /// Gauss: standard deviation along the first (pre-rotation) axis.
    pub std1: f64,
    /// Gauss: standard deviation along the second axis.
    pub std2: f64,
    /// Gauss: rotation angle in radians.
    pub angle: f64,
    /// Gauss: center.
    pub mean: [f64; 2],
    pub r_min: f64,
    pub r_max: f64,
    /// Box half-width.
    pub half_width: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            std1: 1.0,
            std2: 0.5,
            angle: 0.0,
            mean: [0.0, 0.0],
            r_min: 1.0,
            r_max: 2.0,
            half_width: 4.0,
        }
    }
}

impl SynthParams {
    fn validate(&self, kind: SynthKind) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        match kind {
            SynthKind::Gauss if !(self.std1 >= 0.0 && self.std2 >= 0.0) => {
                bad("gauss standard deviations must be >= 0")
            }
            SynthKind::Ring if !(self.r_min >= 0.0 && self.r_max >= self.r_min) => {
                bad("ring radii must satisfy 0 <= r_min <= r_max")
            }
            SynthKind::BoxOutliers if self.half_width.is_nan() || self.half_width <= 0.0 => {
                bad("box half-width must be > 0")
            }
            _ => Ok(()),
        }
    }
}

/// Draws `n` 2D rows of `kind`. Gauss and ring rows are labeled +1, box rows -1.
pub fn gen_synthetic(
    kind: SynthKind,
    n: usize,
    seed: u64,
    params: &SynthParams,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidParameter("n must be >= 1".to_string()));
    }
    params.validate(kind)?;
    let mut rng = SplitMix64::new(seed);
    let x: Vec<Vec<f64>> = (0..n).map(|_| draw(kind, &mut rng, params)).collect();
    let label = if kind == SynthKind::BoxOutliers {
        -1
    } else {
        1
    };
    Ok(Dataset {
        x,
        y: Some(vec![label; n]),
        name: format!("{}-{n}-{seed}", kind.name()),
    })
}

/// `n` rows of `kind` followed by `n_outliers` box rows, drawn from one
/// seeded stream.
pub fn gen_mixture(
    kind: SynthKind,
    n: usize,
    n_outliers: usize,
    seed: u64,
    params: &SynthParams,
) -> Result<Dataset> {
    if n_outliers == 0 {
        return gen_synthetic(kind, n, seed, params);
    }
    if n == 0 {
        return Err(Error::InvalidParameter("n must be >= 1".to_string()));
    }
    params.validate(kind)?;
    params.validate(SynthKind::BoxOutliers)?;
    let mut rng = SplitMix64::new(seed);
    let mut x: Vec<Vec<f64>> = (0..n).map(|_| draw(kind, &mut rng, params)).collect();
    x.extend((0..n_outliers).map(|_| draw(SynthKind::BoxOutliers, &mut rng, params)));
    let label = if kind == SynthKind::BoxOutliers {
        -1
    } else {
        1
    };
    let mut y = vec![label; n];
    y.resize(n + n_outliers, -1);
    Ok(Dataset {
        x,
        y: Some(y),
        name: format!("{}+box-{n}+{n_outliers}-{seed}", kind.name()),
    })
}

fn draw(kind: SynthKind, rng: &mut SplitMix64, params: &SynthParams) -> Vec<f64> {
    match kind {
        SynthKind::Gauss => {
            let a = params.std1 * rng.normal();
            let b = params.std2 * rng.normal();
            let (sin, cos) = params.angle.sin_cos();
            vec![
                params.mean[0] + cos * a - sin * b,
                params.mean[1] + sin * a + cos * b,
            ]
        }
        SynthKind::Ring => {
            let r = rng.uniform_in(params.r_min, params.r_max);
            let t = rng.uniform_in(0.0, 2.0 * PI);
            vec![r * t.cos(), r * t.sin()]
        }
        SynthKind::BoxOutliers => {
            let b = params.half_width;
            vec![rng.uniform_in(-b, b), rng.uniform_in(-b, b)]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeaderMode {
    #[default]
    Auto,
    Yes,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelColumn {
    #[default]
    None,
    Last,
    /// Zero-based column index.
    Index(usize),
}

impl std::str::FromStr for LabelColumn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "last" => Ok(Self::Last),
            other => other.parse::<usize>().map(Self::Index).map_err(|_| {
                Error::InvalidParameter(format!(
                    "label column must be none, last or a zero-based index, got `{other}`"
                ))
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CsvOptions {
    pub header: HeaderMode,
    pub label_col: LabelColumn,
}

pub fn load_csv(path: impl AsRef<Path>, options: CsvOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_csv(&text, options, name)
}

/// Parses CSV text. Rows and columns in errors are 1-based.
pub fn parse_csv(text: &str, options: CsvOptions, name: impl Into<String>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::Csv("file is empty".to_string()));
    }
    let width = records[0].len();
    let label_idx = match options.label_col {
        LabelColumn::None => None,
        LabelColumn::Last => Some(width - 1),
        LabelColumn::Index(i) if i < width => Some(i),
        LabelColumn::Index(i) => {
            return Err(Error::Csv(format!(
                "label column {} out of range for {width} columns",
                i + 1
            )))
        }
    };
    let skip_header = match options.header {
        HeaderMode::Yes => true,
        HeaderMode::No => false,
        // only feature cells decide, so textual labels do not look like a header
        HeaderMode::Auto => records[0]
            .iter()
            .enumerate()
            .any(|(j, cell)| Some(j) != label_idx && cell.parse::<f64>().is_err()),
    };

    let mut x = Vec::new();
    let mut y = label_idx.map(|_| Vec::new());
    for (r, rec) in records.iter().enumerate().skip(usize::from(skip_header)) {
        let row_no = r + 1;
        if rec.len() != width {
            return Err(Error::CsvCell {
                row: row_no,
                col: rec.len().min(width) + 1,
                msg: format!("ragged row: expected {width} fields, found {}", rec.len()),
            });
        }
        let mut feats = Vec::with_capacity(width);
        for (j, cell) in rec.iter().enumerate() {
            if Some(j) == label_idx {
                let label = parse_label(cell).ok_or_else(|| Error::CsvCell {
                    row: row_no,
                    col: j + 1,
                    msg: format!("invalid label `{cell}`"),
                })?;
                if let Some(y) = y.as_mut() {
                    y.push(label);
                }
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::CsvCell {
                    row: row_no,
                    col: j + 1,
                    msg: format!("cannot parse `{cell}` as a number"),
                })?;
                feats.push(v);
            }
        }
        x.push(feats);
    }
    if x.is_empty() {
        return Err(Error::Csv("no data rows".to_string()));
    }
    Dataset::new(x, y, name)
}

fn parse_label(cell: &str) -> Option<i8> {
    match cell {
        "target" => return Some(1),
        "outlier" => return Some(-1),
        _ => {}
    }
    let v: f64 = cell.parse().ok()?;
    if v == 1.0 {
        Some(1)
    } else if v == -1.0 || v == 0.0 {
        Some(-1)
    } else {
        None
    }
}

/// Writes rows with shortest round-trip decimal formatting; labels, if any,
/// go in the last column.
pub fn write_csv<W: Write>(ds: &Dataset, mut out: W) -> Result<()> {
    for (i, row) in ds.x.iter().enumerate() {
        let mut line = row
            .iter()
            .map(|v| format!("{v:?}"))
            .collect::<Vec<_>>()
            .join(",");
        if let Some(y) = &ds.y {
            line.push(',');
            line.push_str(&y[i].to_string());
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// Per-dimension `(mean, std)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-12;

pub fn zscore_fit(x: &[Vec<f64>]) -> Result<Normalizer> {
    let Some(first) = x.first() else {
        return Err(Error::InvalidParameter(
            "cannot fit a normalizer on zero rows".to_string(),
        ));
    };
    let d = first.len();
    let n = x.len() as f64;
    let mut mean = vec![0.0; d];
    for row in x {
        if row.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for row in x {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd < STD_FLOOR {
                1.0
            } else {
                sd
            }
        })
        .collect();
    Ok(Normalizer { mean, std })
}

pub fn zscore_apply(norm: &Normalizer, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != norm.mean.len() {
        return Err(Error::DimensionMismatch {
            expected: norm.mean.len(),
            got: x.len(),
        });
    }
    Ok(x.iter()
        .zip(norm.mean.iter().zip(&norm.std))
        .map(|(v, (m, s))| (v - m) / s)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // reference stream for seed 0
        let mut r = SplitMix64::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(r.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn uniform_range() {
        let mut r = SplitMix64::new(3);
        for _ in 0..1000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn gauss_count_and_labels() {
        let ds = gen_synthetic(SynthKind::Gauss, 5, 1, &SynthParams::default()).unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.y.as_deref(), Some(&[1i8; 5][..]));
    }

    #[test]
    fn ring_radii() {
        let p = SynthParams {
            r_min: 1.0,
            r_max: 2.0,
            ..Default::default()
        };
        let ds = gen_synthetic(SynthKind::Ring, 500, 9, &p).unwrap();
        for row in &ds.x {
            let r = row[0].hypot(row[1]);
            assert!((1.0 - 1e-12..=2.0 + 1e-12).contains(&r), "{r}");
        }
    }

    #[test]
    fn box_outliers_are_negative_and_bounded() {
        let ds = gen_synthetic(SynthKind::BoxOutliers, 200, 2, &SynthParams::default()).unwrap();
        assert!(ds.y.unwrap().iter().all(|&l| l == -1));
        assert!(ds.x.iter().flatten().all(|v| v.abs() <= 4.0));
    }

    #[test]
    fn generator_is_deterministic() {
        let p = SynthParams::default();
        let a = gen_synthetic(SynthKind::Gauss, 50, 11, &p).unwrap();
        let b = gen_synthetic(SynthKind::Gauss, 50, 11, &p).unwrap();
        let (mut wa, mut wb) = (Vec::new(), Vec::new());
        write_csv(&a, &mut wa).unwrap();
        write_csv(&b, &mut wb).unwrap();
        assert_eq!(wa, wb);
    }

    #[test]
    fn mixture_appends_box_outliers() {
        let p = SynthParams::default();
        let ds = gen_mixture(SynthKind::Ring, 30, 10, 7, &p).unwrap();
        let y = ds.y.as_ref().unwrap();
        assert_eq!(ds.len(), 40);
        assert!(y[..30].iter().all(|&l| l == 1) && y[30..].iter().all(|&l| l == -1));
        let ring = gen_synthetic(SynthKind::Ring, 30, 7, &p).unwrap();
        assert_eq!(&ds.x[..30], &ring.x[..]);
        assert!(ds.x[30..].iter().all(|r| r.iter().all(|v| v.abs() <= 4.0)));
    }

    #[test]
    fn unknown_kind() {
        assert!("spiral".parse::<SynthKind>().is_err());
    }

    #[test]
    fn csv_plain() {
        let ds = parse_csv("1,2\n3,4", CsvOptions::default(), "t").unwrap();
        assert_eq!(ds.x, vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert!(ds.y.is_none());
    }

    #[test]
    fn csv_auto_header() {
        let ds = parse_csv("a,b\n1,2", CsvOptions::default(), "t").unwrap();
        assert_eq!(ds.x, vec![vec![1.0, 2.0]]);
    }

    #[test]
    fn csv_crlf_and_labels() {
        let opts = CsvOptions {
            label_col: LabelColumn::Last,
            ..Default::default()
        };
        let ds = parse_csv("1,2,target\r\n3,4,0\r\n5,6,-1\r\n7,8,+1\r\n", opts, "t").unwrap();
        assert_eq!(ds.y, Some(vec![1, -1, -1, 1]));
        assert_eq!(ds.x[3], vec![7.0, 8.0]);
    }

    #[test]
    fn csv_bad_label_names_cell() {
        let opts = CsvOptions {
            label_col: LabelColumn::Last,
            ..Default::default()
        };
        match parse_csv("1,2,x", opts, "t").unwrap_err() {
            Error::CsvCell { row, col, .. } => assert_eq!((row, col), (1, 3)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn csv_errors() {
        let opts = CsvOptions::default();
        assert!(matches!(parse_csv("", opts, "t"), Err(Error::Csv(_))));
        match parse_csv("1,2\n3,4,5", opts, "t").unwrap_err() {
            Error::CsvCell { row, .. } => assert_eq!(row, 2),
            e => panic!("unexpected {e}"),
        }
        match parse_csv("1,2\n3,zz", opts, "t").unwrap_err() {
            Error::CsvCell { row, col, .. } => assert_eq!((row, col), (2, 2)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn zscore_constant_column_and_single_row() {
        let x = vec![vec![1.0, 5.0], vec![3.0, 5.0]];
        let n = zscore_fit(&x).unwrap();
        assert_eq!(n.std[1], 1.0);
        assert_eq!(zscore_apply(&n, &[2.0, 5.0]).unwrap(), vec![0.0, 0.0]);
        let single = zscore_fit(&[vec![4.0, -2.0]]).unwrap();
        assert_eq!(zscore_apply(&single, &[4.0, -2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn zscore_centers_training_data() {
        let ds = gen_synthetic(SynthKind::Gauss, 100, 4, &SynthParams::default()).unwrap();
        let n = zscore_fit(&ds.x).unwrap();
        let z: Vec<Vec<f64>> = ds.x.iter().map(|r| zscore_apply(&n, r).unwrap()).collect();
        for d in 0..2 {
            let m: f64 = z.iter().map(|r| r[d]).sum::<f64>() / z.len() as f64;
            assert!(m.abs() < 1e-10);
        }
    }
}
