use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dereverb_cli::{
    run, wav_files, CliError, PriorSpec, RunConfig, DEFAULT_CTF_LEN, DEFAULT_HOP,
    DEFAULT_ITERATIONS, DEFAULT_SEGMENT_FRAMES, DEFAULT_WINDOW_LEN, EXIT_CONFIG,
};
use dereverb_core::metrics::fixtures;

#[derive(Parser)]
#[command(
    name = "dereverb",
    version,
    about = "Single-channel speech dereverberation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enhance one WAV file, or every WAV file in a directory.
    Enhance(EnhanceArgs),
    /// Write the shared loss test vectors as JSON.
    LossFixtures {
        /// JSON file to write.
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 20_231_101)]
        seed: u64,
    },
}

#[derive(Args)]
struct EnhanceArgs {
    /// Input WAV (mono, PCM16 or float32).
    #[arg(
        long,
        required_unless_present = "input_dir",
        conflicts_with = "input_dir"
    )]
    input: Option<PathBuf>,
    /// Enhance every .wav file in this directory; --output is then a directory.
    #[arg(long)]
    input_dir: Option<PathBuf>,
    /// Enhanced WAV (float32), or a directory with --input-dir.
    #[arg(long)]
    output: PathBuf,
    /// heuristic[:smoothing] | file:<path> | constant:<value>
    #[arg(long, default_value = "heuristic")]
    prior: PriorSpec,
    #[arg(long, default_value_t = DEFAULT_CTF_LEN)]
    ctf_len: usize,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    iterations: usize,
    #[arg(long, default_value_t = DEFAULT_SEGMENT_FRAMES)]
    segment_frames: usize,
    #[arg(long, default_value_t = DEFAULT_WINDOW_LEN)]
    window_len: usize,
    #[arg(long, default_value_t = DEFAULT_HOP)]
    hop: usize,
    /// Worker threads; 0 uses all cores. Output does not depend on it.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// JSON run report (a directory when --input-dir is used).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Clean reference WAV for SI-SDR in the report.
    #[arg(long, conflicts_with = "input_dir")]
    reference: Option<PathBuf>,
}

impl EnhanceArgs {
    fn config(&self, input: PathBuf, output: PathBuf, report: Option<PathBuf>) -> RunConfig {
        RunConfig {
            input_path: input,
            output_path: output,
            prior: self.prior.clone(),
            ctf_len: self.ctf_len,
            iterations: self.iterations,
            segment_frames: self.segment_frames,
            window_len: self.window_len,
            hop: self.hop,
            jobs: self.jobs,
            report_path: report,
            reference_path: self.reference.clone(),
        }
    }

    fn configs(&self) -> Result<Vec<RunConfig>, CliError> {
        let Some(dir) = &self.input_dir else {
            let input = self.input.clone().expect("clap enforces --input");
            return Ok(vec![self.config(
                input,
                self.output.clone(),
                self.report.clone(),
            )]);
        };
        let mk = |path: &PathBuf| {
            std::fs::create_dir_all(path).map_err(|source| CliError::Io {
                path: path.clone(),
                source,
            })
        };
        let files = wav_files(dir)?;
        mk(&self.output)?;
        if let Some(r) = &self.report {
            mk(r)?;
        }
        Ok(files
            .into_iter()
            .map(|input| {
                let name = input.file_name().expect("listed file has a name");
                let report = self
                    .report
                    .as_ref()
                    .map(|r| r.join(name).with_extension("json"));
                let output = self.output.join(name);
                self.config(input, output, report)
            })
            .collect())
    }
}

fn enhance(args: &EnhanceArgs) -> Result<(), CliError> {
    for cfg in args.configs()? {
        let report = run(&cfg)?;
        log::info!(
            "{} -> {} in {:.2} s",
            cfg.input_path.display(),
            cfg.output_path.display(),
            report.timing.total_seconds
        );
    }
    Ok(())
}

fn write_fixtures(output: &PathBuf, seed: u64) -> Result<(), CliError> {
    let file = fixtures::generate(seed)?;
    let json = serde_json::to_string_pretty(&file)?;
    std::fs::write(output, json + "\n").map_err(|source| CliError::Io {
        path: output.clone(),
        source,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let result = match &cli.command {
        Command::Enhance(args) => enhance(args),
        Command::LossFixtures { output, seed } => write_fixtures(output, *seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dereverb: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
