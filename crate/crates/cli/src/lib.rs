//! Command-line front end for the `occ` binary.

use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use icosvm::data::{
    gen_mixture, load_csv, write_csv, CsvOptions, Dataset, HeaderMode, LabelColumn, SynthKind,
    SynthParams,
};
use icosvm::eval::{bench, evaluate, BenchParams, Metrics};
use icosvm::{CovarianceMode, KernelFamily, KernelSpec, Model, ModelParams};

/// Exit code for runtime failures.
pub const EXIT_RUNTIME: i32 = 1;
/// Exit code for usage errors.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "occ",
    version,
    about = "Incremental covariance-guided one-class SVM"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic dataset as CSV (labels in the last column).
    Synth(SynthArgs),
    /// Fit a model on a CSV of training rows (rows labelled as outliers are skipped).
    Train(TrainArgs),
    /// Stream the rows of a CSV into an existing model, rewriting it in place.
    Update(UpdateArgs),
    /// Write one decision value per input row.
    Score(ScoreArgs),
    /// Score a labelled CSV and report AUC, precision, recall and F1.
    Eval(EvalArgs),
    /// Compare incremental updates against batch retraining.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Header {
    Auto,
    Yes,
    No,
}

impl From<Header> for HeaderMode {
    fn from(h: Header) -> Self {
        match h {
            Header::Auto => HeaderMode::Auto,
            Header::Yes => HeaderMode::Yes,
            Header::No => HeaderMode::No,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CsvArgs {
    /// Header row handling.
    #[arg(long, value_enum, default_value = "auto")]
    pub header: Header,
    /// Label column: none, last, or a zero-based index.
    #[arg(long = "label-col", value_parser = parse_label_col)]
    pub label_col: Option<LabelColumn>,
}

impl CsvArgs {
    fn options(&self, default_label: LabelColumn) -> CsvOptions {
        CsvOptions {
            header: self.header.into(),
            label_col: self.label_col.unwrap_or(default_label),
        }
    }
}

fn parse_label_col(s: &str) -> Result<LabelColumn, String> {
    s.parse().map_err(|e: icosvm::Error| e.to_string())
}

#[derive(Debug, Clone, Args)]
pub struct SynthFlags {
    /// Distribution of the target rows.
    #[arg(long, default_value = "gauss", value_parser = parse_kind)]
    pub kind: SynthKind,
    /// Number of rows of `--kind`.
    #[arg(short = 'n', long = "n", default_value_t = 200)]
    pub n: usize,
    /// Box outliers appended after the target rows.
    #[arg(long, default_value_t = 0)]
    pub outliers: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Gauss: standard deviation along the first axis.
    #[arg(long, default_value_t = 1.0)]
    pub std1: f64,
    /// Gauss: standard deviation along the second axis.
    #[arg(long, default_value_t = 0.5)]
    pub std2: f64,
    /// Gauss: rotation in radians.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub angle: f64,
    /// Gauss: center, as `x,y`.
    #[arg(long, default_value = "0,0", value_parser = parse_pair, allow_negative_numbers = true)]
    pub mean: [f64; 2],
    #[arg(long = "r-min", default_value_t = 1.0)]
    pub r_min: f64,
    #[arg(long = "r-max", default_value_t = 2.0)]
    pub r_max: f64,
    /// Box half-width for outliers.
    #[arg(long = "box", default_value_t = 4.0)]
    pub half_width: f64,
}

fn parse_kind(s: &str) -> Result<SynthKind, String> {
    s.parse().map_err(|e: icosvm::Error| e.to_string())
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    match parts.as_slice() {
        [a, b] => Ok([
            a.trim()
                .parse()
                .map_err(|_| format!("`{a}` is not a number"))?,
            b.trim()
                .parse()
                .map_err(|_| format!("`{b}` is not a number"))?,
        ]),
        _ => Err(format!("expected `x,y`, got `{s}`")),
    }
}

impl SynthFlags {
    fn params(&self) -> SynthParams {
        SynthParams {
            std1: self.std1,
            std2: self.std2,
            angle: self.angle,
            mean: self.mean,
            r_min: self.r_min,
            r_max: self.r_max,
            half_width: self.half_width,
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.n == 0 {
            return Err("-n must be >= 1".to_string());
        }
        for (flag, v) in [
            ("--std1", self.std1),
            ("--std2", self.std2),
            ("--r-min", self.r_min),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{flag} must be >= 0, got {v}"));
            }
        }
        if !(self.r_max >= self.r_min && self.r_max.is_finite()) {
            return Err(format!(
                "--r-max must be in [--r-min, inf), got {}",
                self.r_max
            ));
        }
        if !(self.half_width > 0.0 && self.half_width.is_finite()) {
            return Err(format!("--box must be > 0, got {}", self.half_width));
        }
        Ok(())
    }

    fn generate(&self) -> icosvm::Result<Dataset> {
        gen_mixture(self.kind, self.n, self.outliers, self.seed, &self.params())
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub synth: SynthFlags,
    /// Output CSV path; stdout when omitted.
    #[arg(short = 'o', long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelFlags {
    #[arg(long, default_value = "rbf", value_parser = parse_family)]
    pub kernel: KernelFamily,
    /// RBF and polynomial scale.
    #[arg(long, default_value_t = 0.5)]
    pub gamma: f64,
    /// Polynomial degree.
    #[arg(long, default_value_t = 3)]
    pub degree: u32,
    /// Polynomial offset.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub coef0: f64,
    /// Weight of the covariance term.
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    pub eta: f64,
    /// Box bound per dual coefficient.
    #[arg(
        long = "c",
        short = 'C',
        default_value_t = 0.1,
        allow_negative_numbers = true
    )]
    pub c: f64,
    #[arg(long, value_enum, default_value = "frozen")]
    pub mode: Mode,
    /// Warmup batch size (raised to ceil(1/C) if smaller).
    #[arg(long, default_value_t = 20)]
    pub warmup: usize,
    /// KKT tolerance.
    #[arg(long, default_value_t = 1e-6, allow_negative_numbers = true)]
    pub epsilon: f64,
    /// Z-score features with statistics of the warmup batch.
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Frozen,
    Full,
}

fn parse_family(s: &str) -> Result<KernelFamily, String> {
    s.parse().map_err(|e: icosvm::Error| e.to_string())
}

impl ModelFlags {
    fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(format!("--eta must be in [0,1], got {}", self.eta));
        }
        if !(self.c > 0.0 && self.c <= 1.0) {
            return Err(format!("--c must be in (0,1], got {}", self.c));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(format!("--epsilon must be > 0, got {}", self.epsilon));
        }
        let uses_gamma = matches!(self.kernel, KernelFamily::Rbf | KernelFamily::Poly);
        if uses_gamma && !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(format!("--gamma must be > 0, got {}", self.gamma));
        }
        if self.kernel == KernelFamily::Poly && self.degree == 0 {
            return Err("--degree must be >= 1, got 0".to_string());
        }
        if !self.coef0.is_finite() {
            return Err(format!("--coef0 must be finite, got {}", self.coef0));
        }
        Ok(())
    }

    pub fn params(&self) -> ModelParams {
        ModelParams {
            kernel: KernelSpec {
                family: self.kernel,
                gamma: self.gamma,
                degree: self.degree,
                coef0: self.coef0,
            },
            eta: self.eta,
            c: self.c,
            mode: match self.mode {
                Mode::Frozen => CovarianceMode::Frozen,
                Mode::Full => CovarianceMode::Full,
            },
            warmup: self.warmup,
            epsilon: self.epsilon,
            normalize: self.normalize,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Training CSV.
    #[arg(short = 'i', long)]
    pub input: PathBuf,
    /// Model output path.
    #[arg(short = 'o', long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub csv: CsvArgs,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Debug, Clone, Args)]
pub struct UpdateArgs {
    /// Model file, rewritten atomically.
    #[arg(short = 'm', long)]
    pub model: PathBuf,
    /// CSV of new rows, applied in order.
    #[arg(short = 'i', long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub csv: CsvArgs,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    #[arg(short = 'm', long)]
    pub model: PathBuf,
    #[arg(short = 'i', long)]
    pub input: PathBuf,
    /// Score CSV path; stdout when omitted.
    #[arg(short = 'o', long)]
    pub output: Option<PathBuf>,
    /// Append the input label to each score row.
    #[arg(long)]
    pub with_labels: bool,
    #[command(flatten)]
    pub csv: CsvArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(short = 'm', long)]
    pub model: PathBuf,
    /// Labelled CSV (label in the last column unless --label-col says otherwise).
    #[arg(short = 'i', long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub csv: CsvArgs,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Labelled CSV; a synthetic dataset from the synth flags when omitted.
    #[arg(short = 'i', long)]
    pub input: Option<PathBuf>,
    #[command(flatten)]
    pub csv: CsvArgs,
    #[command(flatten)]
    pub synth: SynthFlags,
    #[command(flatten)]
    pub model: ModelFlags,
    /// Share of the targets used for training.
    #[arg(long = "train-fraction", default_value_t = 0.5)]
    pub train_fraction: f64,
    /// Batch retrain every this many arrivals (0: final size only).
    #[arg(long = "batch-stride", default_value_t = 1)]
    pub batch_stride: usize,
    /// Seed of the train/test split.
    #[arg(long = "split-seed")]
    pub split_seed: Option<u64>,
    /// Leave wall-clock timings out of the report.
    #[arg(long = "no-timing")]
    pub no_timing: bool,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

/// A parse failure: the text to print and the exit code.
#[derive(Debug)]
pub struct ParseError {
    pub code: i32,
    pub message: String,
    /// Help and version output go to stdout.
    pub to_stdout: bool,
}

/// Parses and range-checks the command line (including the program name).
pub fn parse_args<I, T>(argv: I) -> Result<Cli, ParseError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| {
        use clap::error::ErrorKind;
        let info = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
        ParseError {
            code: if info { 0 } else { EXIT_USAGE },
            message: e.render().to_string(),
            to_stdout: info,
        }
    })?;
    cli.validate().map_err(|msg| ParseError {
        code: EXIT_USAGE,
        message: format!("error: {msg}\n"),
        to_stdout: false,
    })?;
    Ok(cli)
}

impl Cli {
    fn validate(&self) -> Result<(), String> {
        match &self.command {
            Command::Synth(a) => a.synth.validate(),
            Command::Train(a) => a.model.validate(),
            Command::Update(_) | Command::Score(_) | Command::Eval(_) => Ok(()),
            Command::Bench(a) => {
                a.model.validate()?;
                if a.input.is_none() {
                    a.synth.validate()?;
                }
                if !(a.train_fraction > 0.0 && a.train_fraction <= 1.0) {
                    return Err(format!(
                        "--train-fraction must be in (0,1], got {}",
                        a.train_fraction
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Runs a parsed command and returns the process exit code. Reports and
/// data go to stdout, diagnostics to stderr.
pub fn run(cli: Cli) -> i32 {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match execute(cli, &mut out).and_then(|()| out.flush().map_err(icosvm::Error::from)) {
        Ok(()) => 0,
        Err(icosvm::Error::Io(e)) if e.kind() == io::ErrorKind::BrokenPipe => 0,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn execute(cli: Cli, out: &mut dyn Write) -> icosvm::Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a, out),
        Command::Train(a) => train(a, out),
        Command::Update(a) => update(a, out),
        Command::Score(a) => score(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Bench(a) => run_bench(a, out),
    }
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> icosvm::Result<()> {
    let ds = a.synth.generate()?;
    match a.output {
        Some(path) => write_atomic(&path, |w| write_csv(&ds, w)),
        None => write_csv(&ds, out),
    }
}

fn train(a: TrainArgs, out: &mut dyn Write) -> icosvm::Result<()> {
    let ds = load_csv(&a.input, a.csv.options(LabelColumn::None))?;
    let points = targets_only(ds);
    let model = Model::fit(&points, a.model.params())?;
    write_atomic(&a.output, |w| Ok(w.write_all(model.save()?.as_bytes())?))?;
    let summary = serde_json::json!({
        "points": model.len(),
        "warmup": a.model.params().warmup_size(),
        "margin": model.state().margin().len(),
        "bound": model.state().bound().len(),
        "rho": model.state().rho(),
        "kkt_residual": model.kkt_residual(),
    });
    emit(out, a.format, &summary)
}

/// Drops rows labelled as outliers; one-class training sees targets only.
fn targets_only(ds: Dataset) -> Vec<Vec<f64>> {
    match ds.y {
        None => ds.x,
        Some(y) => {
            let before = ds.x.len();
            let kept: Vec<Vec<f64>> =
                ds.x.into_iter()
                    .zip(y)
                    .filter(|(_, l)| *l == 1)
                    .map(|(x, _)| x)
                    .collect();
            if kept.len() < before {
                log::info!("skipping {} outlier rows", before - kept.len());
            }
            kept
        }
    }
}

fn update(a: UpdateArgs, out: &mut dyn Write) -> icosvm::Result<()> {
    let mut model = Model::load_from(&a.model)?;
    let ds = load_csv(&a.input, a.csv.options(LabelColumn::None))?;
    let mut migrations = 0;
    let before = model.len();
    for x in targets_only(ds) {
        migrations += model.partial_fit(&x)?.len();
    }
    write_atomic(&a.model, |w| Ok(w.write_all(model.save()?.as_bytes())?))?;
    let summary = serde_json::json!({
        "inserted": model.len() - before,
        "points": model.len(),
        "migrations": migrations,
        "kkt_residual": model.kkt_residual(),
    });
    emit(out, a.format, &summary)
}

fn score(a: ScoreArgs, out: &mut dyn Write) -> icosvm::Result<()> {
    let model = Model::load_from(&a.model)?;
    let ds = load_csv(&a.input, a.csv.options(LabelColumn::None))?;
    let scores =
        ds.x.iter()
            .map(|x| model.score(x))
            .collect::<icosvm::Result<Vec<f64>>>()?;
    let labels = if a.with_labels {
        Some(ds.y.ok_or_else(|| {
            icosvm::Error::InvalidParameter("--with-labels needs --label-col".to_string())
        })?)
    } else {
        None
    };
    let write = |w: &mut dyn Write| -> icosvm::Result<()> {
        for (i, s) in scores.iter().enumerate() {
            match &labels {
                Some(y) => writeln!(w, "{s:?},{}", y[i])?,
                None => writeln!(w, "{s:?}")?,
            }
        }
        Ok(())
    };
    match a.output {
        Some(path) => write_atomic(&path, |w| write(w)),
        None => write(out),
    }
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> icosvm::Result<()> {
    let model = Model::load_from(&a.model)?;
    let ds = load_csv(&a.input, a.csv.options(LabelColumn::Last))?;
    let (_, m) = evaluate(&model, &ds)?;
    match a.format {
        Format::Json => emit(out, Format::Json, &m),
        Format::Table => Ok(out.write_all(metrics_table(&m).as_bytes())?),
    }
}

fn metrics_table(m: &Metrics) -> String {
    let c = m.prf.confusion;
    let rows = [
        ("auc", format!("{:.6}", m.auc)),
        ("precision", format!("{:.6}", m.prf.precision)),
        ("recall", format!("{:.6}", m.prf.recall)),
        ("f1", format!("{:.6}", m.prf.f1)),
        (
            "confusion",
            format!("[[{}, {}], [{}, {}]]", c[0][0], c[0][1], c[1][0], c[1][1]),
        ),
        ("n", m.n.to_string()),
    ];
    let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    rows.iter()
        .map(|(k, v)| format!("{k:<w$}  {v}\n"))
        .collect()
}

fn run_bench(a: BenchArgs, out: &mut dyn Write) -> icosvm::Result<()> {
    let ds = match &a.input {
        Some(path) => load_csv(path, a.csv.options(LabelColumn::Last))?,
        None => a.synth.generate()?,
    };
    let params = BenchParams {
        model: a.model.params(),
        train_fraction: a.train_fraction,
        seed: a.split_seed.unwrap_or(a.synth.seed),
        batch_stride: a.batch_stride,
    };
    let report = bench(&ds, &params)?;
    match a.format {
        Format::Json if a.no_timing => emit(out, Format::Json, &report.without_timing()),
        Format::Json => emit(out, Format::Json, &report),
        Format::Table => Ok(out.write_all(report.table(!a.no_timing).as_bytes())?),
    }
}

fn emit<T: serde::Serialize>(out: &mut dyn Write, format: Format, value: &T) -> icosvm::Result<()> {
    let v = serde_json::to_value(value)
        .map_err(|e| icosvm::Error::Internal(format!("cannot serialise report: {e}")))?;
    match format {
        Format::Json => {
            let text = serde_json::to_string_pretty(&v)
                .map_err(|e| icosvm::Error::Internal(format!("cannot serialise report: {e}")))?;
            writeln!(out, "{text}")?;
        }
        Format::Table => {
            let obj = v.as_object().cloned().unwrap_or_default();
            let w = obj.keys().map(String::len).max().unwrap_or(0);
            for (k, val) in obj {
                writeln!(out, "{k:<w$}  {val}")?;
            }
        }
    }
    Ok(())
}

/// Writes through a temporary file in the target directory and renames it
/// over `path`, so readers never see a partial file.
fn write_atomic(
    path: &Path,
    body: impl FnOnce(&mut dyn Write) -> icosvm::Result<()>,
) -> icosvm::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(&dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        body(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| icosvm::Error::Io(e.error))?;
    Ok(())
}
