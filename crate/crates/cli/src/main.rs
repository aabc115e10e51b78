use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use knit_core::bench::{self, BenchSpec, Study};
use knit_core::cooccur::{accumulate_cohort, merge, summarize};
use knit_core::inference::{ErrorControl, KnitOptions, RankChoice, Sidedness};
use knit_core::io;
use knit_core::pipeline;
use knit_core::simgen::SimConfig;
use knit_core::spectra::DEFAULT_PMI_FLOOR;
use knit_core::KnitError;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "knit", version, about = "Sparse dependency graphs from coded-event sequences")]
struct Cli {
    /// Master seed; overrides the seed of a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "KNIT_THREADS")]
    threads: Option<usize>,

    /// Repeat for more detail (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a synthetic cohort from a JSON simulation config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count windowed co-occurrences of a cohort.
    Cooccur {
        #[arg(long = "in")]
        input: PathBuf,
        /// Window size; defaults to the window stored with the cohort, or 30.
        #[arg(long)]
        q: Option<usize>,
        #[arg(long, value_enum, default_value_t = SummaryFormat::Binary)]
        format: SummaryFormat,
        /// Also write one summary per patient into this directory.
        #[arg(long)]
        patient_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Empirical PMI and its rank-p truncation.
    Estimate {
        #[arg(long)]
        summary: PathBuf,
        #[command(flatten)]
        rank: RankArgs,
        #[arg(long, default_value_t = DEFAULT_PMI_FLOOR)]
        pmi_floor: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Entrywise variances of the low-rank estimate.
    Variance {
        #[arg(long)]
        pmi: PathBuf,
        #[arg(long)]
        summary: PathBuf,
        /// Per-patient summaries; selects the patient-level path.
        #[arg(long)]
        patient_dir: Option<PathBuf>,
        /// CSV with columns w,w_prime; all off-diagonal pairs when absent.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Edge tests with FDR (or FWER) control.
    Infer(InferArgs),
    /// Run a simulation study and write its tables.
    Bench {
        #[arg(long, value_parser = parse_study)]
        study: Study,
        /// Full BenchSpec as JSON; replaces the built-in grid.
        #[arg(long, conflicts_with = "paper_scale")]
        config: Option<PathBuf>,
        /// Use the full-size grids instead of the desk-scale defaults.
        #[arg(long)]
        paper_scale: bool,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args, Debug)]
struct RankArgs {
    /// Truncation rank p.
    #[arg(long, conflicts_with = "auto_rank")]
    rank: Option<usize>,
    /// Choose the rank by thresholding the eigenvalues.
    #[arg(long)]
    auto_rank: bool,
    /// Threshold for --auto-rank; the default formula when absent.
    #[arg(long, requires = "auto_rank")]
    eta0: Option<f64>,
}

impl RankArgs {
    fn choice(&self) -> Option<RankChoice> {
        match (self.rank, self.auto_rank) {
            (Some(p), _) => Some(RankChoice::Fixed(p)),
            (None, true) => Some(RankChoice::Auto { eta0: self.eta0 }),
            (None, false) => None,
        }
    }
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long, required_unless_present = "from_config", conflicts_with = "from_config")]
    summary: Option<PathBuf>,
    /// Simulate, count and test in one run from a simulation config.
    #[arg(long)]
    from_config: Option<PathBuf>,
    /// Reuse an estimate written by `knit estimate`.
    #[arg(long, conflicts_with_all = ["from_config", "rank", "auto_rank"])]
    pmi: Option<PathBuf>,
    #[command(flatten)]
    rank: RankArgs,
    /// FDR level (Benjamini-Yekutieli).
    #[arg(long, default_value_t = 0.05)]
    fdr: f64,
    /// Control the FWER at this level with Bonferroni instead.
    #[arg(long)]
    fwer: Option<f64>,
    /// Report Φ(z) as the p-value instead of the two-sided value.
    #[arg(long)]
    paper_literal_p: bool,
    #[arg(long, default_value_t = DEFAULT_PMI_FLOOR)]
    pmi_floor: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SummaryFormat {
    Binary,
    Csv,
}

fn parse_study(s: &str) -> Result<Study, String> {
    s.parse().map_err(|e: KnitError| e.to_string())
}

const DEFAULT_WINDOW: usize = 30;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let file = File::open(path).map_err(KnitError::from).with_context(|| format!("opening {}", path.display()))?;
    let value = serde_json::from_reader(BufReader::new(file))
        .map_err(KnitError::from)
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(value)
}

fn sim_config(path: &Path, seed: Option<u64>) -> anyhow::Result<SimConfig> {
    let mut cfg: SimConfig = read_json(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate { config, out } => {
            let cfg = sim_config(&config, cli.seed)?;
            let cohort = pipeline::simulate(&cfg)?;
            io::write_cohort(&out, &cohort, cfg.q).with_context(|| format!("writing {}", out.display()))?;
            log::info!("wrote {} patients to {}", cohort.n(), out.display());
        }
        Command::Cooccur { input, q, format, patient_dir, out } => {
            let (cohort, stored_q) = io::read_cohort(&input).with_context(|| format!("reading {}", input.display()))?;
            let q = q.unwrap_or(if stored_q > 0 { stored_q } else { DEFAULT_WINDOW });
            log::info!("window q = {q}");
            let summary = match &patient_dir {
                Some(dir) => {
                    let patients = accumulate_cohort(&cohort, q)?;
                    pipeline::write_patient_dir(dir, &patients)?;
                    merge(&patients)?
                }
                None => summarize(&cohort, q, None)?,
            };
            match format {
                SummaryFormat::Binary => io::write_summary(&out, &summary)?,
                SummaryFormat::Csv => io::write_summary_csv(&out, &summary)?,
            }
        }
        Command::Estimate { summary, rank, pmi_floor, out } => {
            let Some(choice) = rank.choice() else { bail!(KnitError::InvalidInput("give --rank or --auto-rank".into())) };
            let summary = io::read_summary_any(&summary)?;
            let (meta, pmi) = pipeline::estimate(&summary, choice, pmi_floor)?;
            log::info!("rank {}", meta.p);
            io::write_pmi(&out, &meta, &pmi)?;
        }
        Command::Variance { pmi, summary, patient_dir, pairs, out } => {
            let (_, pmi) = io::read_pmi(&pmi)?;
            let summary = io::read_summary_any(&summary)?;
            let pairs = match pairs {
                Some(p) => io::read_pairs(&p)?,
                None => pipeline::all_pairs(summary.d()),
            };
            let patients = patient_dir.as_deref().map(pipeline::read_patient_dir).transpose()?;
            let rows = pipeline::variances(&summary, &pmi, &pairs, patients)?;
            io::write_variances(&out, &rows)?;
        }
        Command::Infer(args) => infer(args, cli.seed)?,
        Command::Bench { study, config, paper_scale, replicates, out_dir } => {
            let mut spec = match config {
                Some(path) => {
                    let spec: BenchSpec = read_json(&path)?;
                    if spec.study != study {
                        bail!(KnitError::InvalidInput(format!("config is for study {}, not {study}", spec.study)));
                    }
                    spec
                }
                None if paper_scale => BenchSpec::paper_scale(study, 0, &out_dir),
                None => BenchSpec::desk(study, 0, &out_dir),
            };
            spec.out_dir = out_dir;
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            if let Some(r) = replicates {
                spec.replicates = r;
            }
            let manifest = bench::run_bench(&spec)?;
            log::info!("{} finished in {:.1} s", study, manifest.wall_clock_seconds);
        }
    }
    Ok(())
}

fn infer(args: InferArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let control = if args.fwer.is_some() { ErrorControl::Fwer } else { ErrorControl::Fdr };
    let alpha = args.fwer.unwrap_or(args.fdr);
    let sidedness = if args.paper_literal_p { Sidedness::PaperLiteral } else { Sidedness::TwoSided };
    let choice = args.rank.choice();
    let mut options = KnitOptions {
        rank: choice.unwrap_or(RankChoice::Fixed(0)),
        alpha,
        pmi_floor: args.pmi_floor,
        sidedness,
        control,
    };

    let (result, source) = if let Some(path) = &args.from_config {
        let cfg = sim_config(path, seed)?;
        let Some(choice) = choice else { bail!(KnitError::InvalidInput("give --rank or --auto-rank".into())) };
        options.rank = choice;
        let (_, _, result) = pipeline::run_end_to_end(&cfg, &options)?;
        (result, json!({ "simulation": cfg }))
    } else {
        let path = args.summary.as_ref().expect("clap enforces --summary or --from-config");
        let summary = io::read_summary_any(path)?;
        let stored = args.pmi.as_deref().map(io::read_pmi).transpose()?;
        match (&stored, choice) {
            (Some((meta, _)), _) => options.rank = RankChoice::Fixed(meta.p),
            (None, Some(c)) => options.rank = c,
            (None, None) => bail!(KnitError::InvalidInput("give --rank, --auto-rank or --pmi".into())),
        }
        let (_, result) = pipeline::infer(&summary, stored.as_ref().map(|(m, e)| (m, e)), &options)?;
        (result, json!({ "summary": path, "pmi": args.pmi }))
    };
    let config = json!({ "options": options, "input": source });
    io::write_edges(&args.out, &result, &config)?;
    log::info!("{} of {} pairs selected", result.j_max, result.j);
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<KnitError>() {
            return e.exit_code() as u8;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
