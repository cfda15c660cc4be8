//! Command-line entry points. `run` never exits the process; it returns the
//! exit code so the binary and the tests share one path.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 selftest failure.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use crate::collector::{read_jsonl, run_sweep_with, synthetic_records, write_jsonl, CollectionRecord, HttpTransport, Secret, SystemClock, API_KEY_ENV};
use crate::config::{load_config, Config};
use crate::generators::{generate, GeneratorSpec};
use crate::predictor::{cross_validated_mse, gap_ratio};
use crate::baselines::FAIR_MSE_FLOOR;
use crate::report::{build_report, emit, from_json, NGramMode, OutputFormat, Report};
use crate::selftest::run_selftest;
use crate::sequence::{parse_letters, pool_windows, FlipSequence};
use crate::stats::CellKey;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_SELFTEST: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "flipbench", version, about = "Randomness battery for simulated coin flips")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GeneratorArg {
    Bernoulli,
    Markov,
    Fixed,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NGramModeArg {
    Windows,
    Whole,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the prompt × temperature sweep against a chat-completions endpoint.
    Collect {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        base_url: Option<String>,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        temperatures: Option<Vec<f64>>,
        /// Only these prompt ids from the plan.
        #[arg(long, value_delimiter = ',')]
        prompts: Option<Vec<String>>,
    },
    /// Write seeded synthetic records.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "bernoulli")]
        generator: GeneratorArg,
        #[arg(long, default_value_t = 0.5)]
        p_heads: f64,
        #[arg(long, default_value_t = 0.6)]
        p_alternate: f64,
        #[arg(long, default_value_t = 0.5)]
        p_first_heads: f64,
        /// Pattern for the fixed generator, e.g. HT.
        #[arg(long, default_value = "HT")]
        pattern: String,
        #[arg(long, default_value_t = 20)]
        length: usize,
        #[arg(long, default_value_t = 30)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        model: Option<String>,
        #[arg(long, default_value = "synthetic")]
        prompt_id: String,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
    },
    /// Build the report from collected records.
    Analyze {
        #[arg(long = "in")]
        input: PathBuf,
        /// JSON report destination.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the CSV bundle here.
        #[arg(long)]
        csv_dir: Option<PathBuf>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        run_window: Option<usize>,
        #[arg(long)]
        include_partial: bool,
        #[arg(long, value_enum)]
        ngram_mode: Option<NGramModeArg>,
    },
    /// Cross-validated next-flip MSE per cell.
    Predict {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        window: Option<usize>,
    },
    /// Re-render a JSON report as a CSV bundle or JSON document.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        csv_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check that the battery calls seeded fair data random.
    Selftest {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv_dir: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Data(String),
    Selftest,
}

fn data<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> Failure {
    move |e| Failure::Data(format!("{context}: {e}"))
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).target(env_logger::Target::Stderr).try_init();

    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            EXIT_DATA
        }
        Err(Failure::Selftest) => EXIT_SELFTEST,
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let config = load_config(cli.config.as_deref()).map_err(|e| Failure::Data(e.to_string()))?;
    match cli.command {
        Command::Collect { out, model, base_url, replicates, temperatures, prompts } => {
            collect(config, &out, model, base_url, replicates, temperatures, prompts)
        }
        Command::Simulate {
            out,
            generator,
            p_heads,
            p_alternate,
            p_first_heads,
            pattern,
            length,
            count,
            seed,
            model,
            prompt_id,
            temperature,
        } => {
            let spec = match generator {
                GeneratorArg::Bernoulli => GeneratorSpec::bernoulli(p_heads, length, count, seed),
                GeneratorArg::Markov => GeneratorSpec::markov(p_alternate, p_first_heads, length, count, seed),
                GeneratorArg::Fixed => GeneratorSpec::fixed(
                    parse_letters(&pattern).map_err(|e| Failure::Usage(format!("--pattern: {e}")))?,
                    length,
                    count,
                ),
            };
            let mut seqs = generate(&spec).map_err(|e| Failure::Usage(e.to_string()))?;
            for s in &mut seqs {
                if let Some(m) = &model {
                    s.meta.model = m.clone();
                }
                s.meta.prompt_id = prompt_id.clone();
                s.meta.temperature = temperature;
            }
            write_records(&out, &synthetic_records(&seqs, "1970-01-01T00:00:00Z"))?;
            println!("wrote {} records to {}", seqs.len(), out.display());
            Ok(())
        }
        Command::Analyze { input, out, csv_dir, window, run_window, include_partial, ngram_mode } => {
            let mut options = config.analysis;
            if let Some(k) = window {
                options.window = k;
                if run_window.is_none() {
                    options.run_window = options.run_window.min(k);
                }
            }
            if let Some(k) = run_window {
                options.run_window = k;
            }
            options.include_partial |= include_partial;
            if let Some(m) = ngram_mode {
                options.ngram_mode = match m {
                    NGramModeArg::Windows => NGramMode::Windows,
                    NGramModeArg::Whole => NGramMode::Whole,
                };
            }
            options.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let records = read_records(&input)?;
            let report = build_report(&records, &options).map_err(data("building report"))?;
            write_report(&report, out.as_deref(), csv_dir.as_deref())?;
            print_summary(&report);
            Ok(())
        }
        Command::Predict { input, out, window } => predict(&config, &input, out.as_deref(), window),
        Command::Report { input, csv_dir, out } => {
            let text = fs::read_to_string(&input).map_err(data(input.display()))?;
            let report = from_json(&text).map_err(data(input.display()))?;
            if csv_dir.is_none() && out.is_none() {
                return Err(Failure::Usage("report needs --csv-dir or --out".into()));
            }
            write_report(&report, out.as_deref(), csv_dir.as_deref())
        }
        Command::Selftest { seed, samples, out, csv_dir } => {
            if samples < 100 {
                return Err(Failure::Usage("--samples must be at least 100".into()));
            }
            let outcome = run_selftest(seed, samples).map_err(data("selftest"))?;
            for c in &outcome.checks {
                let mark = if c.passed { "PASS" } else { "FAIL" };
                if c.detail.is_empty() {
                    println!("{mark} {}", c.name);
                } else {
                    println!("{mark} {} ({})", c.name, c.detail);
                }
            }
            write_report(&outcome.report, out.as_deref(), csv_dir.as_deref())?;
            if outcome.passed() {
                Ok(())
            } else {
                Err(Failure::Selftest)
            }
        }
    }
}

fn read_records(path: &Path) -> Result<Vec<CollectionRecord>, Failure> {
    let file = File::open(path).map_err(data(path.display()))?;
    let records = read_jsonl(BufReader::new(file)).map_err(data(path.display()))?;
    if records.is_empty() {
        return Err(Failure::Data(format!("{}: no records", path.display())));
    }
    info!("read {} records from {}", records.len(), path.display());
    Ok(records)
}

fn write_records(path: &Path, records: &[CollectionRecord]) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(data(parent.display()))?;
    }
    let file = File::create(path).map_err(data(path.display()))?;
    write_jsonl(BufWriter::new(file), records).map_err(data(path.display()))
}

fn write_report(report: &Report, json: Option<&Path>, csv_dir: Option<&Path>) -> Result<(), Failure> {
    if let Some(p) = json {
        emit(report, OutputFormat::Json, p).map_err(data(p.display()))?;
        println!("report written to {}", p.display());
    }
    if let Some(d) = csv_dir {
        let files = emit(report, OutputFormat::CsvBundle, d).map_err(data(d.display()))?;
        println!("{} tables written to {}", files.len(), d.display());
    }
    Ok(())
}

fn print_summary(report: &Report) {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let _ = writeln!(out, "report digest {}", report.digest());
    for c in &report.cells {
        let flags = c.flags_set();
        let _ = writeln!(
            out,
            "{}: {} windows, flags [{}]",
            c.cell,
            c.yield_counts.windows,
            flags.join(", ")
        );
    }
}

fn collect(
    mut config: Config,
    out: &Path,
    model: Option<String>,
    base_url: Option<String>,
    replicates: Option<usize>,
    temperatures: Option<Vec<f64>>,
    prompts: Option<Vec<String>>,
) -> Result<(), Failure> {
    if let Some(m) = model {
        config.endpoint.model = m;
    }
    if let Some(u) = base_url {
        config.endpoint.base_url = u;
    }
    if let Some(r) = replicates {
        config.plan.replicates = r;
    }
    if let Some(t) = temperatures {
        config.plan.temperatures = t;
    }
    if let Some(ids) = prompts {
        if let Some(missing) = ids.iter().find(|id| config.plan.prompt(id).is_none()) {
            return Err(Failure::Usage(format!("unknown prompt id {missing:?}")));
        }
        config.plan.prompts.retain(|p| ids.contains(&p.id));
    }
    config.plan.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    config.endpoint.api_key = Some(
        Secret::from_env().ok_or_else(|| Failure::Data(format!("set {API_KEY_ENV} to the endpoint's API key")))?,
    );
    config.endpoint.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let transport = HttpTransport::new(&config.endpoint).map_err(data("endpoint"))?;
    let records = run_sweep_with(&config.plan, &config.endpoint, &transport, &SystemClock, &config.parser())
        .map_err(data("collection"))?;
    write_records(out, &records)?;
    println!("wrote {} records to {}", records.len(), out.display());
    Ok(())
}

fn predict(config: &Config, input: &Path, out: Option<&Path>, window: Option<usize>) -> Result<(), Failure> {
    let options = &config.analysis;
    let k = window.unwrap_or(options.window);
    if k < 2 {
        return Err(Failure::Usage("--window must be at least 2".into()));
    }
    let records = read_records(input)?;
    let mut cells: BTreeMap<CellKey, Vec<FlipSequence>> = BTreeMap::new();
    for r in &records {
        let usable = r.has_flips() && (options.include_partial || r.parse_kind == crate::collector::RecordKind::Parsed);
        let entry = cells.entry(r.cell_key()).or_default();
        if usable {
            entry.push(FlipSequence::unlabeled(r.flips.clone()));
        }
    }
    let needed = options.min_predictor_windows();
    let mut rows = Vec::new();
    for (key, seqs) in &cells {
        let windows = pool_windows(seqs, k).map_err(data(key))?;
        let row = if windows.len() < needed {
            serde_json::json!({
                "model": key.model, "prompt_id": key.prompt_id, "temperature": key.temperature,
                "windows": windows.len(),
                "insufficient_data": { "required": needed, "available": windows.len() },
            })
        } else {
            let cv = cross_validated_mse::<f64>(&windows, &options.cv).map_err(data(key))?;
            let gap = gap_ratio(cv.mse, options.human.min_mse.value, FAIR_MSE_FLOOR).ok();
            println!("{key}: mse {:.4} lambda {:.3e} gap {}", cv.mse, cv.best_lambda, gap.map_or("-".into(), |g| format!("{g:.3}")));
            serde_json::json!({
                "model": key.model, "prompt_id": key.prompt_id, "temperature": key.temperature,
                "windows": windows.len(), "lambda": cv.best_lambda, "mse": cv.mse,
                "fold_mses": cv.fold_mses, "gap_ratio": gap,
            })
        };
        rows.push(row);
    }
    if let Some(p) = out {
        let mut text = serde_json::to_string_pretty(&rows).expect("json values serialize");
        text.push('\n');
        fs::write(p, text).map_err(data(p.display()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["flipbench", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["flipbench"]), EXIT_USAGE);
        assert_eq!(run(["flipbench", "analyze"]), EXIT_USAGE);
        assert_eq!(run(["flipbench", "--help"]), EXIT_OK);
    }

    #[test]
    fn missing_input_is_a_data_error() {
        assert_eq!(run(["flipbench", "analyze", "--in", "/nonexistent/missing.jsonl"]), EXIT_DATA);
        assert_eq!(run(["flipbench", "analyze", "--in", "x.jsonl", "--config", "/nonexistent.toml"]), EXIT_DATA);
    }

    #[test]
    fn simulate_then_analyze() {
        let dir = tempfile::tempdir().unwrap();
        let runs = dir.path().join("runs.jsonl");
        let report = dir.path().join("report.json");
        let r = runs.to_str().unwrap();
        assert_eq!(run(["flipbench", "simulate", "--out", r, "--generator", "markov", "--count", "40", "--seed", "3"]), EXIT_OK);
        assert_eq!(run(["flipbench", "analyze", "--in", r, "--out", report.to_str().unwrap()]), EXIT_OK);
        let parsed = from_json(&fs::read_to_string(&report).unwrap()).unwrap();
        assert_eq!(parsed.cells.len(), 1);
        let csv = dir.path().join("csv");
        assert_eq!(
            run(["flipbench", "report", "--in", report.to_str().unwrap(), "--csv-dir", csv.to_str().unwrap()]),
            EXIT_OK
        );
        assert!(csv.join("mse_series.csv").exists());
        assert_eq!(run(["flipbench", "predict", "--in", r]), EXIT_OK);
    }
}
