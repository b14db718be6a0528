use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tpa_cli::bench::{self, BenchMechanism, BenchOverrides, BenchPlan};
use tpa_cli::verify::{self, Injection, VerifyOptions};
use tpa_cli::{calc, resolve_output, CliError};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "tpa",
    version,
    about = "Tensor product attention: invariant checks, cost tables, decode benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the randomized invariant suites.
    Verify(VerifyArgs),
    /// Tabulate parameters, cache size and decode cost for mechanism specs.
    Calc(CalcArgs),
    /// Time single-token decoding across cache lengths.
    Bench(Box<BenchArgs>),
}

#[derive(Args)]
struct VerifyArgs {
    /// Seed for every generated input.
    #[arg(long)]
    seed: u64,
    /// Run only suites whose name contains one of these fragments.
    #[arg(long, value_delimiter = ',')]
    filter: Vec<String>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Deliberately break a kernel input to exercise the failure path.
    #[arg(long, value_enum)]
    inject: Option<Injection>,
    /// List suites and properties, then exit.
    #[arg(long)]
    list: bool,
}

#[derive(Args)]
struct CalcArgs {
    /// JSON array of mechanism specs.
    specs: PathBuf,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON plan; flags below override its fields.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',')]
    mechanisms: Option<Vec<BenchMechanism>>,
    #[arg(long, value_delimiter = ',')]
    batch_sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    d_models: Option<Vec<usize>>,
    #[arg(long)]
    d_h: Option<usize>,
    /// `R_Q,R_K,R_V`.
    #[arg(long, value_parser = parse_ranks)]
    ranks: Option<(usize, usize, usize)>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seq_lens: Option<Vec<usize>>,
    /// Sweep `2^min..=2^max` (overrides --seq-lens).
    #[arg(long, value_parser = parse_log2_range)]
    log2_range: Option<(u32, u32)>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    byte_budget: Option<u64>,
    /// Also time an empty kernel and fail unless it is under 5% of the fastest point.
    #[arg(long)]
    dry_run: bool,
}

fn parse_ranks(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [q, k, v] => Ok((q, k, v)),
        _ => Err(format!("expected R_Q,R_K,R_V, got {s:?}")),
    }
}

fn parse_log2_range(s: &str) -> Result<(u32, u32), String> {
    let (lo, hi) = s
        .split_once("..")
        .ok_or_else(|| format!("expected MIN..MAX, got {s:?}"))?;
    let lo: u32 = lo.parse().map_err(|e| format!("{lo:?}: {e}"))?;
    let hi: u32 = hi.parse().map_err(|e| format!("{hi:?}: {e}"))?;
    if lo > hi || hi > 40 {
        return Err(format!("bad range {s:?}"));
    }
    Ok((lo, hi))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn cmd_verify(args: VerifyArgs) -> Result<u8, CliError> {
    if args.list {
        for name in verify::property_names() {
            println!("{name}");
        }
        return Ok(0);
    }
    if let Some(bad) = args
        .filter
        .iter()
        .find(|f| !verify::SUITES.iter().any(|s| s.contains(f.as_str())))
    {
        return Err(CliError::Usage(format!(
            "filter {bad:?} matches no suite (suites: {})",
            verify::SUITES.join(", ")
        )));
    }
    let report = verify::run(&VerifyOptions {
        seed: args.seed,
        filter: args.filter,
        inject: args.inject,
    });
    let json = serde_json::to_string_pretty(&report)?;
    match args.report {
        Some(path) => {
            let path = resolve_output(&path);
            let mut w = create(&path)?;
            writeln!(w, "{json}")
                .and_then(|_| w.flush())
                .map_err(|e| CliError::io(&path, e))?;
        }
        None => println!("{json}"),
    }
    for f in report.failures() {
        eprintln!(
            "FAILED {}/{}: {}",
            f.suite,
            f.property,
            f.detail.as_deref().unwrap_or("")
        );
    }
    eprintln!("{} passed, {} failed", report.passed, report.failed);
    Ok(if report.ok() { 0 } else { EXIT_FAILURE })
}

fn cmd_calc(args: CalcArgs) -> Result<u8, CliError> {
    match args.out {
        Some(path) => {
            let path = resolve_output(&path);
            calc::run(&args.specs, create(&path)?)?;
        }
        None => {
            calc::run(&args.specs, io::stdout().lock())?;
        }
    }
    Ok(0)
}

fn cmd_bench(args: BenchArgs) -> Result<u8, CliError> {
    let mut plan = match &args.plan {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            serde_json::from_str::<BenchPlan>(&text).map_err(|e| CliError::parse(path, &e))?
        }
        None => BenchPlan::default(),
    };
    let seq_lens = match args.log2_range {
        Some((lo, hi)) => Some((lo..=hi).map(|p| 1usize << p).collect()),
        None => args.seq_lens,
    };
    BenchOverrides {
        mechanisms: args.mechanisms,
        batch_sizes: args.batch_sizes,
        d_models: args.d_models,
        d_h: args.d_h,
        ranks: args.ranks,
        groups: args.groups,
        seq_lens,
        repetitions: args.repetitions,
        warmup: args.warmup,
        seed: args.seed,
        output: args.output,
        threads: args.threads,
        block_size: args.block_size,
        byte_budget: args.byte_budget,
    }
    .apply(&mut plan);
    plan.validate()?;
    let outcome = bench::run(&plan, args.dry_run, |row| match row.median_s {
        Some(t) => eprintln!(
            "{} B={} d={} M={}: median {:.3e} s",
            row.mechanism, row.batch, row.d_model, row.seq_len, t
        ),
        None => eprintln!(
            "{} B={} d={} M={}: skipped, {} cache bytes over budget",
            row.mechanism, row.batch, row.d_model, row.seq_len, row.cache_bytes
        ),
    })?;
    let path = resolve_output(&plan.output);
    bench::write_csv(create(&path)?, &outcome.rows)?;
    eprintln!("wrote {}", path.display());
    if let Some(d) = outcome.dry_run {
        eprintln!(
            "dry run: empty kernel {:.3e} s, fastest point {:.3e} s, ratio {:.4}",
            d.empty_median_s, d.smallest_median_s, d.ratio
        );
        if !d.ok {
            eprintln!(
                "FAILED dry-run: empty kernel is not under {}% of the fastest point",
                bench::DRY_RUN_LIMIT * 100.0
            );
            return Ok(EXIT_FAILURE);
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::Calc(a) => cmd_calc(a),
        Command::Bench(a) => cmd_bench(*a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
