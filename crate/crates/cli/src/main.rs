mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use qprdc::closed_form::european_prdc;
use qprdc::mc::mc_european;
use qprdc::payoff::ProductSpec;
use qprdc::pricer::{price_bermudan, PricerOptions};
use qprdc::quantizer::{save_grid, GridCache, CACHE_DIR_ENV};
use qprdc::tree::{allocate_sizes, build_tree, dump_tree, GridSizes, QuantTree};

use config::{ModeName, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] qprdc::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Engine(e) if e.is_numeric() => 3,
            CliError::Engine(qprdc::Error::Io(_)) | CliError::Io(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "qprdc",
    version,
    about = "Quantization-tree pricing of PRDC coupons"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeName>,
    /// Total number of tree nodes per date.
    #[arg(long = "N", global = true)]
    n: Option<usize>,
    /// Comma-separated node budgets for `convergence`.
    #[arg(long = "N-list", global = true, value_delimiter = ',')]
    n_list: Option<Vec<usize>>,
    #[arg(long, global = true)]
    mc_samples: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// CSV output path (grid file for `quantize`, directory for `dump-tree`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Caps the number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory of precomputed grids; overrides QPRDC_CACHE_DIR.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build (or load) the optimal Gaussian grid of size --N and write it.
    Quantize,
    /// Price the configured product.
    Price,
    /// Price over --N-list and report relative errors.
    Convergence,
    /// Monte-Carlo European price of the last coupon against the closed form.
    McCheck,
    /// Write tree layers and transitions as CSV into --out.
    DumpTree,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qprdc: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let cache = match &cli.cache_dir {
        Some(d) => GridCache::with_dir(d),
        None => GridCache::from_env(),
    };
    match cli.command {
        Command::Quantize => quantize(cli, &cache),
        Command::Price => price(cli, &cache),
        Command::Convergence => convergence(cli, &cache),
        Command::McCheck => mc_check(cli),
        Command::DumpTree => dump(cli, &cache),
    }
}

/// Loads the config and applies command-line overrides.
fn effective_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(m) = cli.mode {
        cfg.engine.mode = m;
    }
    if let Some(n) = cli.n {
        cfg.engine.n_total = Some(n);
        cfg.engine.levels = None;
    }
    if let Some(n) = cli.mc_samples {
        cfg.engine.mc_samples = Some(n);
    }
    if let Some(s) = cli.seed {
        cfg.engine.seed = s;
    }
    if let Some(out) = &cli.out {
        cfg.output.csv = Some(out.clone());
    }
    cfg.check()?;
    Ok(cfg)
}

/// Prints the CSV and, when an output path is configured, writes it along
/// with the effective config as `<path>.config.json`.
fn emit(cfg: &RunConfig, csv: &str) -> Result<(), CliError> {
    print!("{csv}");
    if let Some(path) = &cfg.output.csv {
        std::fs::write(path, csv)?;
        let mut echo = path.clone().into_os_string();
        echo.push(".config.json");
        std::fs::write(echo, cfg.to_json())?;
    }
    Ok(())
}

fn levels_label(sizes: &GridSizes) -> String {
    sizes
        .levels
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("x")
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

fn quantize(cli: &Cli, cache: &GridCache) -> Result<(), CliError> {
    let level = cli
        .n
        .ok_or_else(|| CliError::Config("quantize needs --N".into()))?;
    let target = match (&cli.out, cache.dir()) {
        (Some(p), _) => p.clone(),
        (None, Some(d)) => GridCache::file_for(d, level),
        (None, None) => {
            return Err(CliError::Config(format!(
                "quantize needs --out, --cache-dir or {CACHE_DIR_ENV}"
            )))
        }
    };
    let grid = cache.get(level)?;
    if !target.exists() || cli.out.is_some() {
        save_grid(&grid, &target)?;
    }
    println!("level,distortion,n_sqrt_distortion,path");
    println!(
        "{level},{},{},{}",
        grid.distortion(),
        level as f64 * grid.distortion().sqrt(),
        target.display()
    );
    Ok(())
}

struct Priced {
    v0: f64,
    grid_ms: f64,
    transition_ms: f64,
    induction_ms: f64,
    total_ms: f64,
}

fn build(
    cfg: &RunConfig,
    spec: &ProductSpec,
    sizes: &GridSizes,
    cache: &GridCache,
) -> Result<(QuantTree, f64), CliError> {
    let start = Instant::now();
    for &l in &sizes.levels {
        cache.get(l)?;
    }
    let grid_ms = ms(start);
    let tree = build_tree(
        &cfg.params()?,
        &spec.exercise_dates,
        sizes,
        cache,
        cfg.tree_options(),
    )?;
    Ok((tree, grid_ms))
}

fn run_price(
    cfg: &RunConfig,
    spec: &ProductSpec,
    sizes: &GridSizes,
    cache: &GridCache,
) -> Result<Priced, CliError> {
    let start = Instant::now();
    let (tree, grid_ms) = build(cfg, spec, sizes, cache)?;
    let opts = PricerOptions {
        retain_layers: cfg.output.retain_layers,
        exercise_at_t0: cfg.engine.exercise_at_t0,
    };
    let res = price_bermudan(&tree, spec, opts)?;
    Ok(Priced {
        v0: res.v0,
        grid_ms,
        transition_ms: res.meta.transition_ms,
        induction_ms: res.meta.induction_ms,
        total_ms: ms(start),
    })
}

fn closed_form_reference(cfg: &RunConfig, spec: &ProductSpec) -> Result<Option<f64>, CliError> {
    if spec.n_dates() != 1 || cfg.engine.exercise_at_t0 {
        return Ok(None);
    }
    Ok(Some(european_prdc(&cfg.params()?, spec, 0)?))
}

fn price(cli: &Cli, cache: &GridCache) -> Result<(), CliError> {
    let cfg = effective_config(cli)?;
    let spec = cfg.product()?;
    let sizes = cfg.sizes()?;
    let p = run_price(&cfg, &spec, &sizes, cache)?;
    let notional = cfg.output.notional;
    let reference = closed_form_reference(&cfg, &spec)?
        .map(|r| (notional * r).to_string())
        .unwrap_or_default();
    let mut csv = String::from(
        "mode,n_total,levels,n_dates,v0,price,closed_form,grid_ms,transition_ms,induction_ms,total_ms\n",
    );
    writeln!(
        csv,
        "{},{},{},{},{},{},{},{:.1},{:.1},{:.1},{:.1}",
        sizes.mode.label(),
        sizes.total(),
        levels_label(&sizes),
        spec.n_dates(),
        p.v0,
        notional * p.v0,
        reference,
        p.grid_ms,
        p.transition_ms,
        p.induction_ms,
        p.total_ms
    )
    .unwrap();
    emit(&cfg, &csv)
}

fn convergence(cli: &Cli, cache: &GridCache) -> Result<(), CliError> {
    let cfg = effective_config(cli)?;
    let list = cli
        .n_list
        .clone()
        .filter(|l| !l.is_empty())
        .ok_or_else(|| CliError::Config("convergence needs --N-list".into()))?;
    let spec = cfg.product()?;
    let mut rows = Vec::with_capacity(list.len());
    for &n in &list {
        let sizes = allocate_sizes(n, cfg.mode())?;
        let p = run_price(&cfg, &spec, &sizes, cache)?;
        rows.push((sizes, p));
    }
    let reference = match closed_form_reference(&cfg, &spec)? {
        Some(r) => r,
        None => {
            let (_, best) = rows
                .iter()
                .max_by_key(|(s, _)| s.total())
                .expect("nonempty list");
            best.v0
        }
    };
    let notional = cfg.output.notional;
    let mut csv = String::from("n_total,levels,v0,price,reference,rel_error,wall_ms\n");
    for (sizes, p) in &rows {
        writeln!(
            csv,
            "{},{},{},{},{},{},{:.1}",
            sizes.total(),
            levels_label(sizes),
            p.v0,
            notional * p.v0,
            notional * reference,
            (p.v0 / reference - 1.0).abs(),
            p.total_ms
        )
        .unwrap();
    }
    emit(&cfg, &csv)
}

fn mc_check(cli: &Cli) -> Result<(), CliError> {
    let cfg = effective_config(cli)?;
    let spec = cfg.product()?;
    let params = cfg.params()?;
    let last = spec.n_dates() - 1;
    let single = ProductSpec {
        exercise_dates: vec![spec.exercise_dates[last]],
        cd: vec![spec.cd[last]],
        cf: vec![spec.cf[last]],
        cap: vec![spec.cap[last]],
        floor: vec![spec.floor[last]],
        s0_ref: spec.s0_ref,
    };
    let n = cfg.engine.mc_samples.unwrap_or(1_000_000);
    let est = mc_european(&params, &single, n, cfg.engine.seed, true)?;
    let exact = european_prdc(&params, &single, 0)?;
    let z = if est.stderr > 0.0 {
        (est.value - exact) / est.stderr
    } else {
        0.0
    };
    let notional = cfg.output.notional;
    let mut csv =
        String::from("date,n_paths,seed,mc_price,stderr,closed_form,z_score,within_4_stderr\n");
    writeln!(
        csv,
        "{},{},{},{},{},{},{},{}",
        single.exercise_dates[0],
        est.n_paths,
        est.seed,
        notional * est.value,
        notional * est.stderr,
        notional * exact,
        z,
        z.abs() <= 4.0
    )
    .unwrap();
    emit(&cfg, &csv)
}

fn dump(cli: &Cli, cache: &GridCache) -> Result<(), CliError> {
    let dir: &Path = cli
        .out
        .as_deref()
        .ok_or_else(|| CliError::Config("dump-tree needs --out <dir>".into()))?;
    let mut cfg = effective_config(cli)?;
    cfg.output.csv = None;
    let spec = cfg.product()?;
    let (tree, _) = build(&cfg, &spec, &cfg.sizes()?, cache)?;
    std::fs::create_dir_all(dir)?;
    dump_tree(&tree, dir)?;
    std::fs::write(dir.join("config.json"), cfg.to_json())?;
    println!("wrote {} layers to {}", tree.layers.len(), dir.display());
    Ok(())
}
