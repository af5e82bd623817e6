//! Command line for the tiled QR laboratory: killer/step tables,
//! parallel factorization with verification, DAG analysis and export.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use hqrlab::hqr::{gen_hqr, HqrConfig};
use hqrlab::runtime::{
    build_q, execute, orthogonality_threshold, residual_threshold, trace_csv, verify,
};
use hqrlab::taskgraph::{
    build_dag, count_dataflow_messages, critical_path_weighted, migrating_pivot_comms,
    simulate_makespan, total_weight, CostModel,
};
use hqrlab::tile_store::{Distribution, TileMatrix};
use hqrlab::trees::{critical_path_unit, gen_tree, EliminationList, TreeKind};

const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "hqrlab", version, about = "Tiled QR factorization laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Emit the killer/step table of a tree or hierarchical config as CSV.
    Table(TableArgs),
    /// Factor a matrix in parallel, reconstruct Q, and verify.
    Factor(FactorArgs),
    /// Static analysis: weights, critical paths, communication, makespan.
    Analyze(AnalyzeArgs),
    /// Export the kernel-level task DAG as Graphviz DOT.
    Dag(DagArgs),
}

/// Hierarchy parameters, either inline or from a JSON config file.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON file with the full hierarchical config; overrides the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mt: Option<usize>,
    #[arg(long)]
    nt: Option<usize>,
    /// Virtual cluster grid rows.
    #[arg(long, default_value_t = 1)]
    p: usize,
    /// Virtual cluster grid columns.
    #[arg(long, default_value_t = 1)]
    q: usize,
    /// TS domain size in tiles.
    #[arg(long, default_value_t = 1)]
    a: usize,
    /// Intra-cluster tree: flat|binary|greedy|fibonacci.
    #[arg(long, default_value = "flat")]
    low: String,
    /// Inter-cluster tree: flat|binary|greedy|fibonacci.
    #[arg(long, default_value = "flat")]
    high: String,
    /// Turn the domino coupling on.
    #[arg(long)]
    domino: bool,
    /// Turn the domino coupling off (the default).
    #[arg(long, conflicts_with = "domino")]
    no_domino: bool,
    /// Data distribution: cyclic2d:P,Q | cyclic1d:R | block1d:R.
    #[arg(long)]
    dist: Option<String>,
}

fn parse_dist(s: &str) -> Result<Distribution, String> {
    let (kind, rest) = s.split_once(':').ok_or_else(|| format!("bad --dist '{s}'"))?;
    let nums: Vec<usize> = rest
        .split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|e| format!("bad --dist '{s}': {e}")))
        .collect::<Result<_, _>>()?;
    match (kind, nums.as_slice()) {
        ("cyclic2d", [p, q]) => Ok(Distribution::Cyclic2d { p: *p, q: *q }),
        ("cyclic1d", [r]) => Ok(Distribution::Cyclic1d { r: *r }),
        ("block1d", [r]) => Ok(Distribution::Block1d { r: *r }),
        _ => Err(format!("bad --dist '{s}', expected cyclic2d:P,Q | cyclic1d:R | block1d:R")),
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<HqrConfig, String> {
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            let cfg: HqrConfig =
                serde_json::from_str(&text).map_err(|e| format!("malformed config {}: {e}", path.display()))?;
            cfg.validate().map_err(|e| e.to_string())?;
            return Ok(cfg);
        }
        let mt = self.mt.ok_or("--mt is required (or use --config)")?;
        let nt = self.nt.ok_or("--nt is required (or use --config)")?;
        let low = TreeKind::from_str(&self.low).map_err(|e| e.to_string())?;
        let high = TreeKind::from_str(&self.high).map_err(|e| e.to_string())?;
        let dist = match &self.dist {
            Some(s) => parse_dist(s)?,
            None => Distribution::Cyclic2d { p: self.p, q: self.q },
        };
        let cfg = HqrConfig { mt, nt, p: self.p, q: self.q, a: self.a, low, high, domino: self.domino, dist };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TableArgs {
    /// Base tree kind; bypasses the hierarchy flags.
    #[arg(long)]
    tree: Option<String>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Output format: csv (default) or json.
    #[arg(long, default_value = "csv")]
    format: String,
    /// Write to a file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FactorArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Tile edge length (required with --random).
    #[arg(long)]
    b: Option<usize>,
    /// Deterministic random input with this seed.
    #[arg(long, visible_alias = "seed")]
    random: Option<u64>,
    /// Read the input matrix from a TQRM container.
    #[arg(long, conflicts_with = "random", value_name = "FILE")]
    r#in: Option<PathBuf>,
    /// Write the R factor as a TQRM container.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the execution trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Worker threads; the HQRLAB_THREADS env var overrides this.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Processes of the makespan simulation.
    #[arg(long)]
    procs: Option<usize>,
    /// Cores per process of the makespan simulation.
    #[arg(long, default_value_t = 1)]
    cores: usize,
    /// Additive latency per inter-process edge.
    #[arg(long, default_value_t = 0.0)]
    msg_cost: f64,
    /// Write the simulated schedule as CSV.
    #[arg(long)]
    sim_trace: Option<PathBuf>,
}

#[derive(Args)]
struct DagArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<(), String> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn generate_list(tree: &Option<String>, config: &ConfigArgs) -> Result<EliminationList, String> {
    match tree {
        Some(kind) => {
            let kind = TreeKind::from_str(kind).map_err(|e| e.to_string())?;
            let mt = config.mt.ok_or("--mt is required")?;
            let nt = config.nt.ok_or("--nt is required")?;
            gen_tree(kind, mt, nt).map_err(|e| e.to_string())
        }
        None => {
            let cfg = config.resolve()?;
            gen_hqr(&cfg).map_err(|e| e.to_string())
        }
    }
}

fn cmd_table(args: &TableArgs) -> Result<u8, String> {
    let list = generate_list(&args.tree, &args.config)?;
    let text = match args.format.as_str() {
        "csv" => list.table_csv(),
        "json" => {
            let mut rows: Vec<_> = list.iter().collect();
            rows.sort_by_key(|e| (e.victim, e.panel));
            let rows: Vec<serde_json::Value> = rows
                .iter()
                .map(|e| {
                    serde_json::json!({
                        "row": e.victim, "panel": e.panel, "killer": e.pivot, "step": e.step
                    })
                })
                .collect();
            let mut s = serde_json::to_string_pretty(
                &serde_json::json!({ "schema_version": SCHEMA_VERSION, "rows": rows }),
            )
            .unwrap();
            s.push('\n');
            s
        }
        other => return Err(format!("table supports --format csv|json, got '{other}'")),
    };
    emit(&args.out, &text)?;
    Ok(0)
}

fn cmd_factor(args: &FactorArgs) -> Result<u8, String> {
    let cfg = args.config.resolve()?;
    let mut a = match (&args.random, &args.r#in) {
        (Some(seed), None) => {
            let b = args.b.ok_or("--b is required with --random")?;
            TileMatrix::make_random(cfg.mt, cfg.nt, b, *seed).map_err(|e| e.to_string())?
        }
        (None, Some(path)) => {
            let mut file = fs::File::open(path).map_err(|e| format!("cannot open {}: {e}", path.display()))?;
            let m = TileMatrix::read_from(&mut file).map_err(|e| e.to_string())?;
            if m.mt() != cfg.mt || m.nt() != cfg.nt {
                return Err(format!(
                    "matrix in {} is {}x{} tiles, config says {}x{}",
                    path.display(),
                    m.mt(),
                    m.nt(),
                    cfg.mt,
                    cfg.nt
                ));
            }
            m
        }
        _ => return Err("exactly one of --random or --in is required".into()),
    };
    let workers = match std::env::var("HQRLAB_THREADS") {
        Ok(v) => v.parse::<usize>().map_err(|e| format!("bad HQRLAB_THREADS: {e}"))?,
        Err(_) => args.workers,
    };

    let a0 = a.clone();
    let list = gen_hqr(&cfg).map_err(|e| e.to_string())?;
    let dag = build_dag(&list, &cfg.dist).map_err(|e| e.to_string())?;
    let (store, mut report) = execute(&mut a, &dag, workers).map_err(|e| e.to_string())?;
    let q = build_q(&store, &list, a.b()).map_err(|e| e.to_string())?;
    let (orth, resid) = verify(&a0, &q, &a).map_err(|e| e.to_string())?;
    report.orth_err = Some(orth);
    report.resid = Some(resid);

    if let Some(path) = &args.out {
        let mut file = fs::File::create(path).map_err(|e| format!("cannot create {}: {e}", path.display()))?;
        a.write_to(&mut file).map_err(|e| e.to_string())?;
    }
    if let Some(path) = &args.trace {
        fs::write(path, trace_csv(&dag, &report)).map_err(|e| e.to_string())?;
    }

    let n = a0.scalar_cols();
    let (orth_thr, resid_thr) = (orthogonality_threshold(n), residual_threshold(n));
    let pass = orth <= orth_thr && resid <= resid_thr;
    let json = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "mt": cfg.mt,
        "nt": cfg.nt,
        "b": a.b(),
        "workers": workers,
        "elapsed_secs": report.elapsed_secs,
        "task_counts": report.task_counts,
        "orth_err": orth,
        "resid": resid,
        "thresholds": { "orth": orth_thr, "resid": resid_thr },
        "pass": pass,
    });
    println!("{}", serde_json::to_string_pretty(&json).unwrap());
    Ok(if pass { 0 } else { 1 })
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<u8, String> {
    let cfg = args.config.resolve()?;
    let list = gen_hqr(&cfg).map_err(|e| e.to_string())?;
    let dag = build_dag(&list, &cfg.dist).map_err(|e| e.to_string())?;
    let procs = args.procs.unwrap_or_else(|| cfg.dist.num_processes());
    let model = CostModel::with_message_cost(args.msg_cost);
    let sim = simulate_makespan(&dag, procs, args.cores, &model).map_err(|e| e.to_string())?;
    if let Some(path) = &args.sim_trace {
        fs::write(path, sim.trace_csv(&dag)).map_err(|e| e.to_string())?;
    }
    let pivot_comms: Vec<usize> = (0..list.panels())
        .map(|k| migrating_pivot_comms(&list, &cfg.dist, k).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    let json = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "total_weight": total_weight(&dag),
        "cp_unit": critical_path_unit(&list),
        "cp_weighted": critical_path_weighted(&dag),
        "messages": count_dataflow_messages(&dag),
        "pivot_comms": pivot_comms,
        "makespan": sim.makespan,
    });
    println!("{}", serde_json::to_string_pretty(&json).unwrap());
    Ok(0)
}

fn cmd_dag(args: &DagArgs) -> Result<u8, String> {
    let cfg = args.config.resolve()?;
    let list = gen_hqr(&cfg).map_err(|e| e.to_string())?;
    let dag = build_dag(&list, &cfg.dist).map_err(|e| e.to_string())?;
    emit(&args.out, &dag.to_dot())?;
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Table(args) => cmd_table(args),
        Cmd::Factor(args) => cmd_factor(args),
        Cmd::Analyze(args) => cmd_analyze(args),
        Cmd::Dag(args) => cmd_dag(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
