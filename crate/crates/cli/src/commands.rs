//! Argument definitions and subcommand bodies for the `ucfed` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use ucfed_autograd::Element;
use ucfed_core::audit::{audit_losses, check_network, random_exam, AUDIT_EXTENT};
use ucfed_core::fed::checkpoint::{checkpoint_path, latest_checkpoint, now_seconds};
use ucfed_core::fed::local::LocalTrainer;
use ucfed_core::fed::select::{append_metrics_csv, metrics_record};
use ucfed_core::fed::{load_checkpoint, persist_checkpoint, CheckpointRecord, TrainConfig, Validator};
use ucfed_core::losses::{LossBreakdown, TERM_NAMES};
use ucfed_core::rng::stream;
use ucfed_core::synth::{load_split, synth_dataset, SiteProfile, SplitCounts};
use ucfed_core::ucnet::ModelParams;
use ucfed_transport::session::{policy, site_loader, SetupError};
use ucfed_transport::{
    run_client, run_simulation, FedConfig, Precision, RoundRecord, Server, SimError, TransportError,
};

use crate::error::{fail, Categorize, Category, CliResult};
use crate::report::{load_any, write_eval_csv, write_grid_csv, write_plot_script, write_predictions_csv, write_series, EvalRow};

/// Largest relative error a loss gradient may show in `grad-check`.
pub const LOSS_TOLERANCE: f64 = 1e-4;
/// The end-to-end network check runs at a larger step and a looser bound.
pub const NETWORK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "ucfed", version, about = "Federated multi-site training of a weakly supervised lesion model")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic site dataset.
    GenData(GenDataArgs),
    /// Train one site alone (the non-federated baseline).
    TrainLocal(TrainLocalArgs),
    /// Run the aggregation server.
    Serve(ConfigArgs),
    /// Join a federation as a site.
    Join(JoinArgs),
    /// Run a whole federation in one process.
    Simulate(ConfigArgs),
    /// Evaluate checkpoints on site splits and write CSV reports.
    Evaluate(EvaluateArgs),
    /// Finite-difference audit of every loss gradient.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment config file (TOML).
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. --set rounds=20 (TOML value syntax).
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_key_value)]
    pub overrides: Vec<(String, String)>,
}

impl ConfigArgs {
    pub fn load(&self) -> CliResult<FedConfig> {
        let cfg = match &self.config {
            Some(path) => FedConfig::load_with_overrides(path, &self.overrides),
            None => FedConfig::with_overrides("", &self.overrides),
        };
        cfg.category(Category::Usage)
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// lesion-graded, exam-graded, or a profile TOML file.
    #[arg(long, default_value = "lesion-graded")]
    pub profile: String,
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    #[arg(long, default_value_t = 40)]
    pub val: usize,
    #[arg(long, default_value_t = 100)]
    pub test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Volume extent X,Y,Z.
    #[arg(long, value_delimiter = ',')]
    pub extent: Option<Vec<usize>>,
    /// Number of grade classes K.
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainLocalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Which entry of dataset_dir to train on (defaults to client_id).
    #[arg(long)]
    pub site: Option<u32>,
}

#[derive(Debug, Args)]
pub struct JoinArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub client_id: Option<u32>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// NAME=PATH; a checkpoint file, or a directory (latest checkpoint, plus a per-round series).
    #[arg(long = "model", required = true, value_parser = parse_named_path)]
    pub models: Vec<(String, PathBuf)>,
    /// NAME=DIR of a generated dataset.
    #[arg(long = "site", required = true, value_parser = parse_named_path)]
    pub sites: Vec<(String, PathBuf)>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss weights and policy for the reported loss terms.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Also write a gnuplot script for the metric series.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 17)]
    pub seed: u64,
    /// Random exams per loss and class count.
    #[arg(long, default_value_t = 20)]
    pub exams: usize,
    #[arg(long, value_delimiter = ',', default_value = "2,4")]
    pub classes: Vec<usize>,
    /// Also check the full network on this many exams per class count.
    #[arg(long, default_value_t = 2)]
    pub network_exams: usize,
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn parse_named_path(s: &str) -> Result<(String, PathBuf), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected NAME=PATH, got {s:?}"))?;
    if k.is_empty() || k.contains(['/', '\\']) {
        return Err(format!("invalid name {k:?}"));
    }
    Ok((k.to_string(), PathBuf::from(v)))
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::TrainLocal(a) => {
            let cfg = a.config.load()?;
            let site = a.site.unwrap_or(cfg.client_id);
            match cfg.precision {
                Precision::F32 => train_local::<f32>(&cfg, site),
                Precision::F64 => train_local::<f64>(&cfg, site),
            }
        }
        Command::Serve(a) => {
            let cfg = a.load()?;
            match cfg.precision {
                Precision::F32 => serve::<f32>(&cfg),
                Precision::F64 => serve::<f64>(&cfg),
            }
        }
        Command::Join(a) => {
            let mut cfg = a.config.load()?;
            if let Some(id) = a.client_id {
                cfg.client_id = id;
            }
            let report = match cfg.precision {
                Precision::F32 => run_client::<f32>(&cfg),
                Precision::F64 => run_client::<f64>(&cfg),
            }
            .map_err(transport_failure)?;
            println!(
                "client {}: trained {} rounds, {} validations, {} reconnects; log in {}",
                report.client_id,
                report.tasks.len(),
                report.validation.len(),
                report.reconnects,
                cfg.private_dir_for(report.client_id).display()
            );
            Ok(())
        }
        Command::Simulate(a) => {
            let cfg = a.load()?;
            match cfg.precision {
                Precision::F32 => simulate::<f32>(&cfg),
                Precision::F64 => simulate::<f64>(&cfg),
            }
        }
        Command::Evaluate(a) => evaluate_cmd(&a),
        Command::GradCheck(a) => grad_check(&a),
    }
}

fn transport_failure(e: TransportError) -> crate::error::Failure {
    let category = match &e {
        TransportError::Setup(SetupError::Config(_)) => Category::Usage,
        TransportError::Setup(_) => Category::Data,
        TransportError::Sharable(_) | TransportError::Server(_) | TransportError::Site(_) => Category::Training,
        _ => Category::Network,
    };
    crate::error::Failure {
        category,
        error: e.into(),
    }
}

fn sim_failure(e: SimError) -> crate::error::Failure {
    let category = match &e {
        SimError::Setup(SetupError::Config(_)) => Category::Usage,
        SimError::Setup(_) => Category::Data,
        _ => Category::Training,
    };
    crate::error::Failure {
        category,
        error: e.into(),
    }
}

fn resolve_profile(name: &str) -> CliResult<SiteProfile> {
    match name {
        "lesion-graded" | "ucsf" => Ok(SiteProfile::ucsf_like()),
        "exam-graded" | "ucla" => Ok(SiteProfile::ucla_like()),
        path if Path::new(path).is_file() => {
            let text = fs::read_to_string(path).category(Category::Usage)?;
            let profile: SiteProfile = toml::from_str(&text).category(Category::Usage)?;
            profile.validate().map_err(anyhow::Error::msg).category(Category::Usage)?;
            Ok(profile)
        }
        other => fail(
            Category::Usage,
            format!("unknown profile {other:?}; use lesion-graded, exam-graded or a TOML file"),
        ),
    }
}

fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let mut profile = resolve_profile(&a.profile)?;
    if let Some(e) = &a.extent {
        profile.extent = match e[..] {
            [x, y, z] => [x, y, z],
            _ => return fail(Category::Usage, format!("--extent needs three values X,Y,Z, got {}", e.len())),
        };
    }
    if let Some(k) = a.classes {
        profile.classes = k;
    }
    let counts = SplitCounts {
        train: a.train,
        val: a.val,
        test: a.test,
    };
    let files = synth_dataset(&profile, counts, a.seed, &a.out).category(Category::Data)?;
    println!("wrote {} files for profile {} to {}", files.len(), profile.name, a.out.display());
    Ok(())
}

fn breakdown_metrics(bd: &LossBreakdown) -> BTreeMap<String, f64> {
    let mut m: BTreeMap<String, f64> = TERM_NAMES.iter().map(|n| n.to_string()).zip(bd.terms()).collect();
    m.insert("total".into(), bd.total);
    m
}

fn train_local<T: Element>(cfg: &FedConfig, site: u32) -> CliResult<()> {
    let dir = cfg.dataset_for(site).category(Category::Usage)?;
    let train = load_split(dir, "train", policy(cfg)).category(Category::Data)?.exams;
    let val = if dir.join("val").exists() {
        load_split(dir, "val", policy(cfg)).category(Category::Data)?.exams
    } else {
        Vec::new()
    };
    let loader = site_loader(cfg, site, Arc::new(train));
    let private = cfg.private_dir_for(site);
    let validator = Validator::new(site, Arc::new(val), cfg.validate_every, cfg.train_config(), Some(private.clone()));
    let model = ModelParams::<T>::build(cfg.model_config()).category(Category::Usage)?;
    let mut trainer = LocalTrainer::new(model, cfg.hyper(), cfg.train_config(), loader, validator);
    if cfg.resume {
        if let Some((round, path)) = latest_checkpoint(&cfg.checkpoint_dir) {
            let rec = load_checkpoint::<T>(&path).category(Category::Data)?;
            trainer.model = rec.model;
            trainer = trainer.with_state(rec.optimizer, round);
            println!("resumed from {}", path.display());
        }
    }
    let log = cfg.checkpoint_dir.join("train_metrics.csv");
    while trainer.round < cfg.rounds {
        let round = trainer.round;
        let out = trainer.step().category(Category::Training)?;
        append_metrics_csv(&log, &[metrics_record(round, "train", &breakdown_metrics(&out.breakdown))])
            .category(Category::Data)?;
        let done = trainer.round;
        if done == cfg.rounds || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
            let rec = CheckpointRecord {
                round: done,
                model: trainer.model.clone(),
                optimizer: trainer.optimizer.clone(),
                created: now_seconds(),
            };
            persist_checkpoint(&rec, &checkpoint_path(&cfg.checkpoint_dir, done)).category(Category::Data)?;
        }
    }
    // Final validation of the last model.
    trainer.run(cfg.rounds).category(Category::Training)?;
    let v = trainer.validator();
    println!(
        "site {site}: {} steps; {} validations; selected round {}; checkpoints in {}",
        trainer.round,
        v.log().len(),
        v.selected_round().map_or("none".into(), |r| r.to_string()),
        cfg.checkpoint_dir.display()
    );
    Ok(())
}

fn serve<T: Element>(cfg: &FedConfig) -> CliResult<()> {
    let server = Server::bind(cfg.clone()).map_err(transport_failure)?;
    println!("listening on {} for {} clients", server.local_addr(), cfg.n_clients);
    let report = server.run::<T>().map_err(transport_failure)?;
    write_rounds_csv(&cfg.checkpoint_dir.join("rounds.csv"), &report.rounds)?;
    println!(
        "finished at round {} ({} retried rounds); {} checkpoints in {}",
        report.state.round,
        report.retries,
        report.checkpoints.len(),
        cfg.checkpoint_dir.display()
    );
    Ok(())
}

fn simulate<T: Element>(cfg: &FedConfig) -> CliResult<()> {
    let report = run_simulation::<T>(cfg, |_| {}).map_err(sim_failure)?;
    write_rounds_csv(&cfg.checkpoint_dir.join("rounds.csv"), &report.rounds)?;
    println!(
        "simulated {} rounds with {} sites; {} checkpoints in {}",
        report.rounds.len(),
        cfg.n_clients,
        report.checkpoints.len(),
        cfg.checkpoint_dir.display()
    );
    for (id, sel) in report.selected.iter().enumerate() {
        let id = id as u32;
        println!(
            "  site {id}: {} validations, selected round {}, private log {}",
            report.validation[id as usize].len(),
            sel.as_ref().map_or("none".into(), |(r, _)| r.to_string()),
            cfg.private_dir_for(id).join("validation.csv").display()
        );
    }
    Ok(())
}

/// One row per contribution: what each site sent each round and whether it counted.
pub fn write_rounds_csv(path: &Path, rounds: &[RoundRecord]) -> CliResult<()> {
    let run = || -> anyhow::Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["round", "task_digest", "client_id", "result_digest", "sample_count", "accepted"])?;
        for r in rounds {
            for c in &r.contributions {
                w.write_record([
                    r.round.to_string(),
                    r.task_digest.clone(),
                    c.client_id.to_string(),
                    c.digest.clone(),
                    c.sample_count.to_string(),
                    c.accepted.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    };
    run().category(Category::Data)
}

fn evaluate_cmd(a: &EvaluateArgs) -> CliResult<()> {
    let train_cfg = match &a.config {
        Some(p) => FedConfig::load(p).category(Category::Usage)?.train_config(),
        None => TrainConfig::default(),
    };
    let mut sites = Vec::new();
    for (name, dir) in &a.sites {
        let exams = load_split(dir, &a.split, Default::default())
            .category(Category::Data)?
            .exams;
        sites.push((name.clone(), exams));
    }
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for (model_name, path) in &a.models {
        let (round, model) = load_any(path).category(Category::Data)?;
        log::info!("{model_name}: round {round} from {}", path.display());
        for (site_name, exams) in &sites {
            let report = model.evaluate(exams, &train_cfg).category(Category::Training)?;
            rows.push(EvalRow {
                model: model_name.clone(),
                site: site_name.clone(),
                split: a.split.clone(),
                report,
            });
            let series_dir = if path.is_dir() { path.as_path() } else { path.parent().unwrap_or(Path::new(".")) };
            let file = a.out.join(format!("metrics_{model_name}_{site_name}.csv"));
            if path.is_dir() {
                write_series(&file, series_dir, exams, &a.split, &train_cfg).category(Category::Data)?;
            } else {
                write_single(&file, round, &a.split, &rows.last().expect("just pushed").report)?;
            }
            series.push(file);
        }
    }
    let models: Vec<String> = a.models.iter().map(|(n, _)| n.clone()).collect();
    let site_names: Vec<String> = a.sites.iter().map(|(n, _)| n.clone()).collect();
    write_eval_csv(&a.out.join("eval.csv"), &rows).category(Category::Data)?;
    write_grid_csv(&a.out.join("grid.csv"), &rows, &models, &site_names).category(Category::Data)?;
    write_predictions_csv(&a.out.join("predictions.csv"), &rows).category(Category::Data)?;
    if a.plot {
        write_plot_script(&a.out.join("metrics.gp"), &series).category(Category::Data)?;
    }
    print!("{}", render_grid(&rows, &models, &site_names));
    Ok(())
}

fn write_single(path: &Path, round: u32, split: &str, report: &ucfed_core::metrics::EvalReport) -> CliResult<()> {
    if path.exists() {
        fs::remove_file(path).category(Category::Data)?;
    }
    let rec = metrics_record(round, split, &ucfed_core::fed::select::report_metrics(report));
    append_metrics_csv(path, &[rec]).category(Category::Data)
}

fn render_grid(rows: &[EvalRow], models: &[String], sites: &[String]) -> String {
    let mut s = format!("{:<20}", "model \\ site");
    for site in sites {
        s.push_str(&format!("{site:>24}"));
    }
    s.push('\n');
    for m in models {
        s.push_str(&format!("{m:<20}"));
        for site in sites {
            let cell = rows
                .iter()
                .find(|r| &r.model == m && &r.site == site)
                .map_or_else(String::new, |r| r.report.confusion.to_string());
            s.push_str(&format!("{cell:>24}"));
        }
        s.push('\n');
    }
    s
}

fn grad_check(a: &GradCheckArgs) -> CliResult<()> {
    let rows = audit_losses(a.seed, a.exams, &a.classes).category(Category::Audit)?;
    println!(
        "{:<18} {:>2} {:>6} {:>8} {:>6} {:>6} {:>12}",
        "loss", "K", "exams", "checked", "zero", "kinks", "max_rel_err"
    );
    let mut worst: f64 = 0.0;
    for r in &rows {
        println!(
            "{:<18} {:>2} {:>6} {:>8} {:>6} {:>6} {:>12.3e}",
            r.loss, r.classes, r.exams, r.checked, r.zero_gradient, r.kinks, r.max_rel_error
        );
        worst = worst.max(r.max_rel_error);
    }
    let mut net_worst: f64 = 0.0;
    for &k in &a.classes {
        for i in 0..a.network_exams {
            let exam = random_exam(&mut stream(a.seed, &[k as u64, i as u64, 99]), AUDIT_EXTENT, k);
            let rep = check_network(&exam, &mut stream(a.seed, &[k as u64, i as u64, 100]))
                .category(Category::Audit)?;
            net_worst = net_worst.max(rep.max_rel_error);
        }
    }
    if a.network_exams > 0 {
        println!("{:<18} {:>2} {:>6} {:>8} {:>6} {:>6} {:>12.3e}", "network", "*", a.network_exams, "", "", "", net_worst);
    }
    if worst >= LOSS_TOLERANCE {
        return fail(Category::Audit, format!("loss gradient error {worst:.3e} exceeds {LOSS_TOLERANCE:e}"));
    }
    if net_worst >= NETWORK_TOLERANCE {
        return fail(
            Category::Audit,
            format!("network gradient error {net_worst:.3e} exceeds {NETWORK_TOLERANCE:e}"),
        );
    }
    println!("all losses within {LOSS_TOLERANCE:e}");
    Ok(())
}
