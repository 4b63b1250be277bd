//! Experiment harness: generate benchmark shards, train the configured
//! methods, aggregate finished runs into comparison tables, and emit cost
//! accounting as CSV.
//!
//! Commands never overwrite existing output unless `--force` is passed, and
//! files are written atomically (temp file + rename) so an interrupted run
//! leaves no half-written artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::costs::{method_client_flops, method_communication, ArchSpec, CostMethod};
use crate::data::{gen_benchmark, load_shard, save_shard, BenchmarkData, BenchmarkSpec, TargetPair};
use crate::error::{Error, Result};
use crate::federation::{run_method, Method, TrainConfig, TrainReport};

#[derive(Parser, Debug)]
#[command(name = "dualadapt", version, about = "Federated multi-target domain adaptation simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the benchmark shard CSVs described by an experiment config.
    Generate {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Directory that will hold the `{benchmark}/` shard folder.
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing benchmark folder.
        #[arg(long)]
        force: bool,
        /// Generation seed (independent of training seeds).
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train every configured method × seed on previously generated shards.
    Run {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Directory holding the shards (either the `{benchmark}/` folder
        /// itself or its parent).
        #[arg(long)]
        data: PathBuf,
        /// Directory that will receive one report JSON per (method, seed).
        #[arg(long)]
        out: PathBuf,
        /// Overwrite existing report files.
        #[arg(long)]
        force: bool,
    },
    /// Summarize a run directory into a comparison CSV with per-method
    /// mean/std aggregate rows.
    Report {
        /// Directory of report JSON files produced by `run`.
        #[arg(long)]
        run: PathBuf,
        /// Output CSV path; prints to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite an existing output file.
        #[arg(long)]
        force: bool,
    },
    /// Emit cost accounting: closed-form per-method formulas for an
    /// architecture (--config), or the measured ledger of a run (--run).
    Cost {
        /// Architecture spec (JSON with g_flops, f_flops, d_flops,
        /// g_params, f_params, w_params).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of report JSON files produced by `run`.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Output CSV path; prints to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite an existing output file.
        #[arg(long)]
        force: bool,
    },
}

/// Everything one experiment needs: the benchmark to generate, the methods
/// to compare, the shared training configuration, and the seeds to sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkSpec,
    pub methods: Vec<String>,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::json(format!("parsing {}", path.display()), e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark.validate()?;
        self.train.validate()?;
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        for name in &self.methods {
            Method::parse(name)?;
        }
        if self.train.n_clients != self.benchmark.shifts.len() {
            return Err(Error::Config(format!(
                "train.n_clients = {} but the benchmark defines {} target domains",
                self.train.n_clients,
                self.benchmark.shifts.len()
            )));
        }
        Ok(())
    }

    pub fn parsed_methods(&self) -> Vec<Method> {
        self.methods.iter().map(|m| Method::parse(m).expect("validated")).collect()
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out, force, seed } => cmd_generate(&config, &out, force, seed),
        Command::Run { config, data, out, force } => cmd_run(&config, &data, &out, force),
        Command::Report { run, out, force } => cmd_report(&run, out.as_deref(), force),
        Command::Cost { config, run, out, force } => {
            cmd_cost(config.as_deref(), run.as_deref(), out.as_deref(), force)
        }
    }
}

/// Writes `contents` to `path` via a temp file in the same directory, so the
/// final name only ever appears fully written.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp.{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(format!("renaming into {}", path.display()), e)
    })
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::WouldOverwrite(path.to_path_buf()));
    }
    Ok(())
}

pub fn cmd_generate(config_path: &Path, out: &Path, force: bool, seed: u64) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let bench_dir = out.join(&cfg.benchmark.name);
    refuse_overwrite(&bench_dir, force)?;

    let data = gen_benchmark(&cfg.benchmark, seed)?;
    fs::create_dir_all(&bench_dir)
        .map_err(|e| Error::io(format!("creating {}", bench_dir.display()), e))?;

    save_shard(&data.source, &bench_dir.join("source_train.csv"))?;
    for (t, pair) in data.targets.iter().enumerate() {
        save_shard(&pair.train, &bench_dir.join(format!("target{}_train.csv", t)))?;
        save_shard(&pair.test, &bench_dir.join(format!("target{}_test.csv", t)))?;
    }
    println!(
        "wrote {} domains ({} files) to {}",
        data.targets.len() + 1,
        1 + 2 * data.targets.len(),
        bench_dir.display()
    );
    Ok(())
}

/// Accepts either the `{benchmark}/` folder itself or its parent.
fn resolve_bench_dir(data: &Path, name: &str) -> Result<PathBuf> {
    let nested = data.join(name);
    if nested.join("source_train.csv").is_file() {
        return Ok(nested);
    }
    if data.join("source_train.csv").is_file() {
        return Ok(data.to_path_buf());
    }
    Err(Error::data(
        data,
        format!("no source_train.csv found here or under {}/ — run `generate` first", name),
    ))
}

fn load_benchmark(dir: &Path, n_targets: usize) -> Result<BenchmarkData> {
    let source = load_shard(&dir.join("source_train.csv"))?;
    let mut targets = Vec::with_capacity(n_targets);
    for t in 0..n_targets {
        targets.push(TargetPair {
            train: load_shard(&dir.join(format!("target{}_train.csv", t)))?,
            test: load_shard(&dir.join(format!("target{}_test.csv", t)))?,
        });
    }
    Ok(BenchmarkData { source, targets })
}

pub fn report_filename(method: Method, seed: u64) -> String {
    format!("{}_{}.json", method.name(), seed)
}

pub fn cmd_run(config_path: &Path, data: &Path, out: &Path, force: bool) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let methods = cfg.parsed_methods();

    // Refuse every collision up front so a partial run never clobbers files.
    let mut jobs = Vec::new();
    for &method in &methods {
        for &seed in &cfg.seeds {
            let path = out.join(report_filename(method, seed));
            refuse_overwrite(&path, force)?;
            jobs.push((method, seed, path));
        }
    }

    let bench_dir = resolve_bench_dir(data, &cfg.benchmark.name)?;
    let bench = load_benchmark(&bench_dir, cfg.benchmark.shifts.len())?;

    for (method, seed, path) in jobs {
        let outcome = run_method(method, &cfg.train, &bench, seed)?;
        let json = serde_json::to_string_pretty(&outcome.report)
            .map_err(|e| Error::json("serializing report", e))?;
        write_atomic(&path, &json)?;
        println!(
            "{} seed {}: mean accuracy {:.4} -> {}",
            method.name(),
            seed,
            outcome.report.final_mean_accuracy(),
            path.display()
        );
    }
    Ok(())
}

/// Reads every `*.json` report under `dir`, sorted by file name for a stable
/// output order.
fn load_reports(dir: &Path) -> Result<Vec<TrainReport>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::data(dir, "no report JSON files found"));
    }
    let mut reports = Vec::with_capacity(paths.len());
    for p in paths {
        let text =
            fs::read_to_string(&p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
        let report: TrainReport = serde_json::from_str(&text)
            .map_err(|e| Error::json(format!("parsing {}", p.display()), e))?;
        reports.push(report);
    }
    Ok(reports)
}

fn emit(text: &str, out: Option<&Path>, force: bool) -> Result<()> {
    match out {
        Some(path) => {
            refuse_overwrite(path, force)?;
            write_atomic(path, text)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        None => {
            print!("{}", text);
            Ok(())
        }
    }
}

/// One summary row per (method, seed): final per-target accuracy, the mean,
/// and whole-run computation/communication totals.
struct SummaryRow {
    method: String,
    seed: u64,
    per_target: Vec<f64>,
    mean: f64,
    client_flops: u64,
    server_flops: u64,
    upload: u64,
    broadcast: u64,
}

fn summarize(report: &TrainReport) -> SummaryRow {
    let last = report.final_record();
    let mut client_flops = 0;
    let mut server_flops = 0;
    let mut upload = 0;
    let mut broadcast = 0;
    for r in &report.rounds {
        client_flops += r.client_flops;
        server_flops += r.server_flops;
        upload += r.upload_params;
        broadcast += r.broadcast_params;
    }
    SummaryRow {
        method: report.method.clone(),
        seed: report.seed,
        per_target: last.per_target_accuracy.clone(),
        mean: last.mean_accuracy,
        client_flops,
        server_flops,
        upload,
        broadcast,
    }
}

pub fn render_report_csv(reports: &[TrainReport]) -> Result<String> {
    let n_targets = reports[0].final_record().per_target_accuracy.len();
    for r in reports {
        if r.final_record().per_target_accuracy.len() != n_targets {
            return Err(Error::Config(format!(
                "report {} (seed {}) covers a different number of targets",
                r.method, r.seed
            )));
        }
    }

    let mut rows: Vec<SummaryRow> = reports.iter().map(summarize).collect();
    rows.sort_by(|a, b| a.method.cmp(&b.method).then(a.seed.cmp(&b.seed)));

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["method".to_string(), "seed".to_string()];
    header.extend((0..n_targets).map(|t| format!("target{}", t)));
    header.extend(
        ["mean_accuracy", "client_flops", "server_flops", "upload_params", "broadcast_params"]
            .map(String::from),
    );
    w.write_record(&header).expect("in-memory csv");

    let write_row = |w: &mut csv::Writer<Vec<u8>>, method: &str, seed: &str, accs: &[f64], mean: f64, costs: [f64; 4], int_costs: bool| {
        let mut rec = vec![method.to_string(), seed.to_string()];
        rec.extend(accs.iter().map(|a| format!("{:.4}", a)));
        rec.push(format!("{:.4}", mean));
        for c in costs {
            if int_costs {
                rec.push(format!("{}", c as u64));
            } else {
                rec.push(format!("{:.1}", c));
            }
        }
        w.write_record(&rec).expect("in-memory csv");
    };

    for row in &rows {
        write_row(
            &mut w,
            &row.method,
            &row.seed.to_string(),
            &row.per_target,
            row.mean,
            [row.client_flops as f64, row.server_flops as f64, row.upload as f64, row.broadcast as f64],
            true,
        );
    }

    // Aggregate block per method: mean and (sample) standard deviation over
    // seeds, in method order of first appearance after sorting.
    let mut at = 0;
    while at < rows.len() {
        let method = rows[at].method.clone();
        let end = rows[at..].iter().take_while(|r| r.method == method).count() + at;
        let group = &rows[at..end];
        let n = group.len() as f64;

        let mut mean_row =
            vec![vec![0.0; n_targets], vec![0.0; 1], vec![0.0; 4]].concat();
        for r in group {
            for (t, a) in r.per_target.iter().enumerate() {
                mean_row[t] += a / n;
            }
            mean_row[n_targets] += r.mean / n;
            mean_row[n_targets + 1] += r.client_flops as f64 / n;
            mean_row[n_targets + 2] += r.server_flops as f64 / n;
            mean_row[n_targets + 3] += r.upload as f64 / n;
            mean_row[n_targets + 4] += r.broadcast as f64 / n;
        }
        let mut std_row = vec![0.0; n_targets + 5];
        if group.len() > 1 {
            for r in group {
                let mut vals = r.per_target.clone();
                vals.push(r.mean);
                vals.extend([
                    r.client_flops as f64,
                    r.server_flops as f64,
                    r.upload as f64,
                    r.broadcast as f64,
                ]);
                for (j, v) in vals.iter().enumerate() {
                    std_row[j] += (v - mean_row[j]).powi(2) / (n - 1.0);
                }
            }
            for v in &mut std_row {
                *v = v.sqrt();
            }
        }

        let (acc_mean, rest_mean) = mean_row.split_at(n_targets);
        let (acc_std, rest_std) = std_row.split_at(n_targets);
        write_row(
            &mut w,
            &method,
            "mean",
            acc_mean,
            rest_mean[0],
            [rest_mean[1], rest_mean[2], rest_mean[3], rest_mean[4]],
            false,
        );
        write_row(
            &mut w,
            &method,
            "std",
            acc_std,
            rest_std[0],
            [rest_std[1], rest_std[2], rest_std[3], rest_std[4]],
            false,
        );
        at = end;
    }

    let bytes = w.into_inner().expect("in-memory csv");
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn cmd_report(run: &Path, out: Option<&Path>, force: bool) -> Result<()> {
    let reports = load_reports(run)?;
    let csv_text = render_report_csv(&reports)?;
    emit(&csv_text, out, force)
}

pub fn render_formula_csv(arch: &ArchSpec) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "computation", "upload", "broadcast"]).expect("in-memory csv");
    for method in [CostMethod::FedDann, CostMethod::FedMcd, CostMethod::DualAdapt] {
        let flops = method_client_flops(method, arch);
        let (up, down) = method_communication(method, arch);
        w.write_record([
            method.name().to_string(),
            flops.to_string(),
            up.to_string(),
            down.to_string(),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}

pub fn render_ledger_csv(reports: &[TrainReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "participant", "round", "flops", "upload", "broadcast"])
        .expect("in-memory csv");
    for report in reports {
        for row in &report.ledger.rows {
            w.write_record([
                report.method.clone(),
                row.participant.clone(),
                row.round.to_string(),
                row.flops.to_string(),
                row.upload_params.to_string(),
                row.broadcast_params.to_string(),
            ])
            .expect("in-memory csv");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}

pub fn cmd_cost(
    config: Option<&Path>,
    run: Option<&Path>,
    out: Option<&Path>,
    force: bool,
) -> Result<()> {
    let text = match (config, run) {
        (Some(path), None) => {
            let raw = fs::read_to_string(path)
                .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            let arch: ArchSpec = serde_json::from_str(&raw)
                .map_err(|e| Error::json(format!("parsing {}", path.display()), e))?;
            render_formula_csv(&arch)
        }
        (None, Some(dir)) => render_ledger_csv(&load_reports(dir)?),
        _ => {
            return Err(Error::Config(
                "pass exactly one of --config (formula table) or --run (measured ledger)".into(),
            ))
        }
    };
    emit(&text, out, force)
}
