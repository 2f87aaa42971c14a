//! File-level dereverberation pipeline behind the `dereverb` binary.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use dereverb_core::em::{EmConfig, IterationRecord};
use dereverb_core::prior::{heuristic_prior, load_prior, PriorVariance, DEFAULT_PRIOR_FLOOR};
use dereverb_core::stft::{analyze, join_segments, segment, synthesize, Segment};
use dereverb_core::wav::{read_wav, write_wav};
use dereverb_core::{metrics, run_em, Waveform};
use serde::{Deserialize, Serialize};

pub const EXIT_IO: i32 = 2;
pub const EXIT_FORMAT: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;
pub const EXIT_NUMERICAL: i32 = 5;

pub const DEFAULT_CTF_LEN: usize = 30;
pub const DEFAULT_ITERATIONS: usize = 100;
pub const DEFAULT_SEGMENT_FRAMES: usize = 320;
pub const DEFAULT_WINDOW_LEN: usize = 1024;
pub const DEFAULT_HOP: usize = 256;
pub const DEFAULT_SMOOTHING: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Engine(#[from] dereverb_core::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("prior file {path}: {reason}")]
    PriorFile { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot encode report: {0}")]
    Report(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use dereverb_core::Error as E;
        match self {
            CliError::Engine(e) => match e {
                E::Io { .. } => EXIT_IO,
                E::Format { .. } | E::Data { .. } => EXIT_FORMAT,
                E::Numerical { .. } => EXIT_NUMERICAL,
                E::InvalidInput(_) | E::Shape(_) | E::Domain(_) => EXIT_CONFIG,
            },
            CliError::PriorFile { .. } => EXIT_FORMAT,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io { .. } | CliError::Report(_) => EXIT_IO,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Where the clean-speech prior variance comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PriorSpec {
    /// Recursively smoothed periodogram of the input with this coefficient.
    Heuristic(f64),
    File(PathBuf),
    Constant(f64),
}

impl fmt::Display for PriorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PriorSpec::Heuristic(a) if *a == DEFAULT_SMOOTHING => write!(f, "heuristic"),
            PriorSpec::Heuristic(a) => write!(f, "heuristic:{a:?}"),
            PriorSpec::File(p) => write!(f, "file:{}", p.display()),
            PriorSpec::Constant(v) => write!(f, "constant:{v:?}"),
        }
    }
}

impl FromStr for PriorSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let number = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| format!("expected a number in prior spec, got {v:?}"))
        };
        match s.split_once(':') {
            None if s == "heuristic" => Ok(PriorSpec::Heuristic(DEFAULT_SMOOTHING)),
            Some(("heuristic", a)) => {
                let a = number(a)?;
                if a > 0.0 && a <= 1.0 {
                    Ok(PriorSpec::Heuristic(a))
                } else {
                    Err(format!("heuristic smoothing must lie in (0, 1], got {a}"))
                }
            }
            Some(("file", p)) if !p.is_empty() => Ok(PriorSpec::File(PathBuf::from(p))),
            Some(("constant", v)) => {
                let v = number(v)?;
                if v > 0.0 && v.is_finite() {
                    Ok(PriorSpec::Constant(v))
                } else {
                    Err(format!("constant prior must be positive, got {v}"))
                }
            }
            _ => Err(format!(
                "prior must be heuristic, file:<path> or constant:<value>, got {s:?}"
            )),
        }
    }
}

impl TryFrom<String> for PriorSpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<PriorSpec> for String {
    fn from(p: PriorSpec) -> String {
        p.to_string()
    }
}

/// One enhancement job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub input_path: PathBuf,
    pub output_path: PathBuf,
    pub prior: PriorSpec,
    /// CTF order `P`.
    pub ctf_len: usize,
    pub iterations: usize,
    pub segment_frames: usize,
    pub window_len: usize,
    pub hop: usize,
    /// Worker threads; `0` lets the runtime decide.
    pub jobs: usize,
    pub report_path: Option<PathBuf>,
    pub reference_path: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(input_path: impl Into<PathBuf>, output_path: impl Into<PathBuf>) -> Self {
        Self {
            input_path: input_path.into(),
            output_path: output_path.into(),
            prior: PriorSpec::Heuristic(DEFAULT_SMOOTHING),
            ctf_len: DEFAULT_CTF_LEN,
            iterations: DEFAULT_ITERATIONS,
            segment_frames: DEFAULT_SEGMENT_FRAMES,
            window_len: DEFAULT_WINDOW_LEN,
            hop: DEFAULT_HOP,
            jobs: 0,
            report_path: None,
            reference_path: None,
        }
    }

    pub fn em_config(&self) -> EmConfig<f64> {
        EmConfig {
            order: self.ctf_len,
            iterations: self.iterations,
            workers: self.jobs,
            ..EmConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(CliError::Config("iterations must be positive".into()));
        }
        if self.segment_frames <= self.ctf_len {
            return Err(CliError::Config(format!(
                "segment length {} must exceed the CTF length {}",
                self.segment_frames, self.ctf_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSummary {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl NoiseSummary {
    fn of(power: &[f64]) -> Self {
        let min = power.iter().copied().fold(f64::INFINITY, f64::min);
        let max = power.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = power.iter().sum::<f64>() / power.len().max(1) as f64;
        Self { min, mean, max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub start_frame: usize,
    pub frames: usize,
    pub likelihood_history: Vec<IterationRecord>,
    pub noise_summary: NoiseSummary,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub input_sisdr_db: Option<f64>,
    pub output_sisdr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub em_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: RunConfig,
    pub em_config: EmConfig<f64>,
    pub segments: Vec<SegmentReport>,
    pub metrics: MetricsReport,
    pub timing: Timing,
}

fn read_reference(path: &Path, len: usize) -> Result<Waveform<f64>> {
    let w = read_wav::<f64>(path)?;
    if w.len() != len {
        return Err(CliError::Config(format!(
            "reference {} has {} samples, input has {len}",
            path.display(),
            w.len()
        )));
    }
    Ok(w)
}

fn build_prior(
    spec: &PriorSpec,
    x: &dereverb_core::Spectrogram<f64>,
    floor: f64,
) -> Result<PriorVariance<f64>> {
    match spec {
        PriorSpec::Heuristic(a) => Ok(heuristic_prior(x, *a, floor)?),
        PriorSpec::Constant(v) => Ok(PriorVariance::constant(
            x.n_bands(),
            x.n_frames(),
            *v,
            floor,
        )?),
        PriorSpec::File(path) => {
            let p = load_prior(path, floor).map_err(|e| CliError::PriorFile {
                path: path.clone(),
                reason: match e {
                    dereverb_core::Error::Io { source, .. } => source.to_string(),
                    other => other.to_string(),
                },
            })?;
            if (p.n_bands(), p.n_frames()) != (x.n_bands(), x.n_frames()) {
                return Err(CliError::Config(format!(
                    "prior file {} is {} x {}, input spectrogram is {} x {}",
                    path.display(),
                    p.n_bands(),
                    p.n_frames(),
                    x.n_bands(),
                    x.n_frames()
                )));
            }
            Ok(p)
        }
    }
}

/// Enhances one file. Nothing is written unless every stage succeeds.
pub fn run(cfg: &RunConfig) -> Result<Report> {
    let started = Instant::now();
    cfg.validate()?;
    let input = read_wav::<f64>(&cfg.input_path)?;
    let reference = cfg
        .reference_path
        .as_deref()
        .map(|p| read_reference(p, input.len()))
        .transpose()?;

    let x = analyze(&input, cfg.window_len, cfg.hop)?;
    let mean_power = x.mean_power();
    let floor = if mean_power > 0.0 {
        DEFAULT_PRIOR_FLOOR * mean_power
    } else {
        DEFAULT_PRIOR_FLOOR
    };
    let prior = build_prior(&cfg.prior, &x, floor)?;

    let segments = segment(&x, cfg.segment_frames)?;
    let priors = prior.split_like(&segments, floor)?;
    let em_cfg = EmConfig {
        prior_floor: floor,
        ..cfg.em_config()
    };

    let em_started = Instant::now();
    let mut enhanced = Vec::with_capacity(segments.len());
    let mut reports = Vec::with_capacity(segments.len());
    let mut start_frame = 0;
    for (seg, prior) in segments.iter().zip(&priors) {
        let (est, state) = run_em(&seg.spec, prior, &em_cfg)?;
        reports.push(SegmentReport {
            start_frame,
            frames: seg.valid_frames,
            likelihood_history: state.history,
            noise_summary: NoiseSummary::of(&state.noise.power),
            warnings: state.warnings,
        });
        start_frame += seg.valid_frames;
        enhanced.push(Segment {
            spec: est,
            valid_frames: seg.valid_frames,
        });
    }
    let em_seconds = em_started.elapsed().as_secs_f64();

    let mut joined = join_segments(&x, &enhanced)?;
    joined.set_signal_len(input.len());
    let output = synthesize(&joined, input.sample_rate)?;

    let metrics = match &reference {
        Some(r) => MetricsReport {
            input_sisdr_db: Some(metrics::sisdr(&r.samples, &input.samples)?),
            output_sisdr_db: Some(metrics::sisdr(&r.samples, &output.samples)?),
        },
        None => MetricsReport {
            input_sisdr_db: None,
            output_sisdr_db: None,
        },
    };

    write_wav(&cfg.output_path, &output)?;
    let report = Report {
        config: cfg.clone(),
        em_config: em_cfg,
        segments: reports,
        metrics,
        timing: Timing {
            total_seconds: started.elapsed().as_secs_f64(),
            em_seconds,
        },
    };
    if let Some(path) = &cfg.report_path {
        let json = serde_json::to_string_pretty(&report)?;
        std::fs::write(path, json).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
    }
    Ok(report)
}

/// Lists the `.wav` files directly inside `dir`, sorted by name.
pub fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let io = |source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        let is_wav = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if is_wav && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
