//! Command-line front end: data generation, training, attacks, defenses,
//! bound verification, and report plotting.
//!
//! Every command takes a `--seed` and is deterministic given its flags. A
//! `key=value` config file supplies defaults that flags override; the
//! effective configuration is echoed into `<out>/logs/`. Exit codes:
//! 0 success, 1 usage error, 2 runtime error, 3 invariant/bound violation.

use crate::attack::{AttackConfig, Method, Selector, Setting};
use crate::checkpoint::{load_model, save_model};
use crate::data::{
    chronological_split, generate_synthetic, load_graph_csv, load_speed_csv, make_windows,
    normalize, DatasetSplit, TrafficNetwork,
};
use crate::defense::{defend_train, DefenseConfig, DefenseStrategy};
use crate::error::StadvError;
use crate::experiment::evaluate_attack;
use crate::forecaster::{train_schedule, ModelConfig, StModel, TrainConfig};
use crate::metrics::{compare, MetricsReport};
use crate::plot::{render_line_chart, Series};
use crate::rng::SeedStream;
use crate::tape::Activation;
use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VIOLATION: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "stadv",
    about = "Adversarial-robustness toolkit for spatiotemporal traffic forecasting"
)]
struct Cli {
    /// Optional key=value config file; explicit flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (checkpoints/, reports/, plots/, logs/ inside).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker-thread cap for parallel sections.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic sensor network and speed series.
    GenData(GenDataArgs),
    /// Train a forecaster on speed + graph CSVs.
    Train(TrainArgs),
    /// Attack a trained forecaster and report attack-effect metrics.
    Attack(AttackArgs),
    /// Train a robust forecaster by adversarial training.
    Defend(DefendArgs),
    /// Numerically verify the worst-case embedding-gap bound.
    VerifyBound(VerifyBoundArgs),
    /// Render sweep curves from metric report CSVs.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Speed CSV (header of node ids, one row per step).
    #[arg(long)]
    speed: PathBuf,
    /// Graph CSV (from,to,weight rows).
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Fine-tuning phase length (0 disables the second phase).
    #[arg(long)]
    fine_epochs: Option<usize>,
    #[arg(long)]
    fine_lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    temporal_hidden: Option<usize>,
    #[arg(long)]
    temporal_layers: Option<usize>,
    #[arg(long)]
    conv_layers: Option<usize>,
    #[arg(long)]
    activation: Option<String>,
}

#[derive(Args, Debug)]
struct AttackArgs {
    /// Trained model checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    speed: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    /// grey | white | black
    #[arg(long)]
    setting: Option<String>,
    /// stpgd | stmim
    #[arg(long)]
    method: Option<String>,
    /// tdns | random | degree | betweenness | pagerank
    #[arg(long)]
    selector: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Absolute victim budget; overrides --eta-pct.
    #[arg(long)]
    eta: Option<usize>,
    /// Victim budget as a percentage of nodes (ceil).
    #[arg(long)]
    eta_pct: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also project adversarial inputs back into [0,1].
    #[arg(long)]
    domain_clip: bool,
    /// Average the saliency gradient across iterates.
    #[arg(long)]
    accumulate_saliency: bool,
    /// Cap on evaluated test windows.
    #[arg(long)]
    max_windows: Option<usize>,
    /// Saliency-fusion batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Surrogate checkpoint for the black-box setting. Trained on the spot
    /// (narrower, different seed) when omitted.
    #[arg(long)]
    surrogate: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DefendArgs {
    #[arg(long)]
    speed: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    /// at | mixup | at-tdns
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    mix_ratio: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    eta_pct: Option<f64>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    temporal_hidden: Option<usize>,
    #[arg(long)]
    temporal_layers: Option<usize>,
}

#[derive(Args, Debug)]
struct VerifyBoundArgs {
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_nodes: Option<usize>,
    #[arg(long)]
    max_layers: Option<usize>,
    #[arg(long)]
    activation: Option<String>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Metric report CSVs, one per sweep point, in sweep order.
    #[arg(long, required = true, num_args = 1..)]
    reports: Vec<PathBuf>,
    /// Comma-separated x coordinates (defaults to 0,1,2,...).
    #[arg(long)]
    x_values: Option<String>,
    #[arg(long, default_value = "sweep")]
    x_label: String,
}

/// Key=value config file, lowest-priority source of parameter values.
#[derive(Debug, Default)]
struct ConfigMap {
    values: BTreeMap<String, String>,
}

impl ConfigMap {
    fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {:?}: {}", path, e)))?;
            for (idx, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                match line.split_once('=') {
                    Some((k, v)) => {
                        values.insert(k.trim().to_string(), v.trim().to_string());
                    }
                    None => {
                        return Err(CliError::Usage(format!(
                            "config line {} is not key=value: {:?}",
                            idx + 1,
                            line
                        )))
                    }
                }
            }
        }
        Ok(ConfigMap { values })
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.values.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| CliError::Usage(format!("config value for {:?} is invalid: {:?}", key, raw))),
            None => Ok(None),
        }
    }
}

fn resolve<T: std::str::FromStr + Clone>(
    flag: Option<T>,
    cfg: &ConfigMap,
    key: &str,
    default: T,
) -> Result<T, CliError> {
    if let Some(v) = flag {
        return Ok(v);
    }
    Ok(cfg.get::<T>(key)?.unwrap_or(default))
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(StadvError),
}

impl From<StadvError> for CliError {
    fn from(e: StadvError) -> Self {
        CliError::Runtime(e)
    }
}

struct OutDirs {
    checkpoints: PathBuf,
    reports: PathBuf,
    plots: PathBuf,
    logs: PathBuf,
    root: PathBuf,
}

fn prepare_out(root: &Path) -> Result<OutDirs, StadvError> {
    let dirs = OutDirs {
        checkpoints: root.join("checkpoints"),
        reports: root.join("reports"),
        plots: root.join("plots"),
        logs: root.join("logs"),
        root: root.to_path_buf(),
    };
    for d in [&dirs.checkpoints, &dirs.reports, &dirs.plots, &dirs.logs] {
        std::fs::create_dir_all(d)?;
    }
    Ok(dirs)
}

fn echo_config(dirs: &OutDirs, command: &str, entries: &[(&str, String)]) -> Result<(), StadvError> {
    let mut text = format!("command={}\n", command);
    for (k, v) in entries {
        let _ = writeln!(text, "{}={}", k, v);
    }
    std::fs::write(dirs.logs.join(format!("{}-config.txt", command)), text)?;
    Ok(())
}

fn load_dataset(
    speed: &Path,
    graph: &Path,
) -> Result<(TrafficNetwork, crate::data::SpeedSeries), StadvError> {
    let series = load_speed_csv(speed)?;
    let network = load_graph_csv(graph, series.node_count())?;
    Ok((network, series))
}

fn build_split(
    series: &crate::data::SpeedSeries,
    graph: &TrafficNetwork,
    t: usize,
    tau: usize,
) -> Result<DatasetSplit, StadvError> {
    let (_, normalizer) = normalize(series)?;
    let windows = make_windows(series, graph, &normalizer, t, tau)?;
    chronological_split(windows, normalizer)
}

fn eta_from(n: usize, eta: Option<usize>, eta_pct: f64) -> usize {
    eta.unwrap_or_else(|| ((eta_pct / 100.0) * n as f64).ceil().max(1.0) as usize)
}

fn cmd_gen_data(args: GenDataArgs, cfg: &ConfigMap, dirs: &OutDirs) -> Result<(), CliError> {
    let nodes = resolve(args.nodes, cfg, "nodes", 30)?;
    let steps = resolve(args.steps, cfg, "steps", 2000)?;
    let seed = resolve(args.seed, cfg, "seed", 7)?;
    let (graph, series) = generate_synthetic(nodes, steps, seed)?;
    let speed_path = dirs.root.join("speed.csv");
    let graph_path = dirs.root.join("graph.csv");
    std::fs::write(&speed_path, series.to_csv()).map_err(StadvError::from)?;
    std::fs::write(&graph_path, graph.to_csv()).map_err(StadvError::from)?;
    echo_config(
        dirs,
        "gen-data",
        &[
            ("nodes", nodes.to_string()),
            ("steps", steps.to_string()),
            ("seed", seed.to_string()),
        ],
    )?;
    println!(
        "wrote {} ({} steps x {} nodes) and {} ({} edges, max degree {})",
        speed_path.display(),
        steps,
        nodes,
        graph_path.display(),
        graph.edges().len(),
        graph.max_degree()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs, cfg: &ConfigMap, dirs: &OutDirs) -> Result<(), CliError> {
    let epochs = resolve(args.epochs, cfg, "epochs", 40)?;
    let lr = resolve(args.lr, cfg, "lr", 0.1)?;
    let fine_epochs = resolve(args.fine_epochs, cfg, "fine_epochs", 40)?;
    let fine_lr = resolve(args.fine_lr, cfg, "fine_lr", 0.02)?;
    let batch = resolve(args.batch, cfg, "batch", 64)?;
    let seed = resolve(args.seed, cfg, "seed", 0)?;
    let t = resolve(args.t, cfg, "t", 12)?;
    let tau = resolve(args.tau, cfg, "tau", 12)?;
    let hidden = resolve(args.hidden, cfg, "hidden", 20)?;
    let temporal_hidden = resolve(args.temporal_hidden, cfg, "temporal_hidden", 10)?;
    let temporal_layers = resolve(args.temporal_layers, cfg, "temporal_layers", 3)?;
    let conv_layers = resolve(args.conv_layers, cfg, "conv_layers", 2)?;
    let activation_name: String = resolve(args.activation, cfg, "activation", "relu".to_string())?;
    let activation =
        Activation::parse(&activation_name).map_err(|e| CliError::Usage(e.to_string()))?;

    let (graph, series) = load_dataset(&args.speed, &args.graph)?;
    let split = build_split(&series, &graph, t, tau)?;
    let model_cfg = ModelConfig {
        nodes: graph.node_count(),
        t_in: t,
        horizon: tau,
        features: 1,
        temporal_layers,
        temporal_hidden,
        conv_layers,
        hidden,
        activation,
    };
    let streams = SeedStream::new(seed);
    let mut model = StModel::init(model_cfg, &graph, &mut streams.stream("init"))?;
    let mut phases = vec![TrainConfig {
        epochs,
        learning_rate: lr,
        batch_size: batch,
        seed,
    }];
    if fine_epochs > 0 {
        phases.push(TrainConfig {
            epochs: fine_epochs,
            learning_rate: fine_lr,
            batch_size: batch,
            seed,
        });
    }
    let report = train_schedule(&mut model, &split, &phases)?;
    let ckpt = dirs.checkpoints.join("model.stadv");
    save_model(&ckpt, &model, &split.normalizer, "none")?;

    let mut loss_csv = String::from("epoch,loss,smoothed\n");
    for (i, (l, s)) in report
        .epoch_loss
        .iter()
        .zip(&report.smoothed_loss)
        .enumerate()
    {
        let _ = writeln!(loss_csv, "{},{},{}", i, l, s);
    }
    std::fs::write(dirs.reports.join("train_loss.csv"), loss_csv).map_err(StadvError::from)?;
    let clean = crate::experiment::clean_g_mae(&model, &split, None)?;
    echo_config(
        dirs,
        "train",
        &[
            ("epochs", epochs.to_string()),
            ("lr", lr.to_string()),
            ("fine_epochs", fine_epochs.to_string()),
            ("fine_lr", fine_lr.to_string()),
            ("batch", batch.to_string()),
            ("seed", seed.to_string()),
            ("t", t.to_string()),
            ("tau", tau.to_string()),
            ("hidden", hidden.to_string()),
            ("temporal_hidden", temporal_hidden.to_string()),
            ("temporal_layers", temporal_layers.to_string()),
            ("conv_layers", conv_layers.to_string()),
            ("activation", activation_name.clone()),
        ],
    )?;
    println!(
        "trained {} epochs, final train MAE {:.6} (normalized), test G-MAE {:.4} (raw units)",
        epochs + fine_epochs,
        report.epoch_loss.last().unwrap(),
        clean
    );
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn cmd_attack(args: AttackArgs, cfg: &ConfigMap, dirs: &OutDirs) -> Result<(), CliError> {
    let setting_name: String = resolve(args.setting, cfg, "setting", "grey".to_string())?;
    let method_name: String = resolve(args.method, cfg, "method", "stpgd".to_string())?;
    let selector_name: String = resolve(args.selector, cfg, "selector", "tdns".to_string())?;
    let setting = Setting::parse(&setting_name).map_err(|e| CliError::Usage(e.to_string()))?;
    let method = Method::parse(&method_name).map_err(|e| CliError::Usage(e.to_string()))?;
    let selector = Selector::parse(&selector_name).map_err(|e| CliError::Usage(e.to_string()))?;
    let epsilon = resolve(args.epsilon, cfg, "epsilon", 0.5)?;
    let alpha = resolve(args.alpha, cfg, "alpha", 0.1)?;
    let iters = resolve(args.iters, cfg, "iters", 5)?;
    let eta_pct = resolve(args.eta_pct, cfg, "eta_pct", 10.0)?;
    let momentum = resolve(args.momentum, cfg, "momentum", 1.0)?;
    let seed = resolve(args.seed, cfg, "seed", 0)?;
    let batch = resolve(args.batch, cfg, "batch", 64)?;

    let (target, normalizer, _) = load_model(&args.model)?;
    let (graph, series) = load_dataset(&args.speed, &args.graph)?;
    if graph.node_count() != target.config().nodes {
        return Err(CliError::Usage(format!(
            "model expects {} nodes, data has {}",
            target.config().nodes,
            graph.node_count()
        )));
    }
    let windows = make_windows(
        &series,
        &graph,
        &normalizer,
        target.config().t_in,
        target.config().horizon,
    )?;
    let split = chronological_split(windows, normalizer)?;

    let attack_cfg = AttackConfig {
        eps: epsilon,
        alpha,
        iters,
        eta: eta_from(graph.node_count(), args.eta, eta_pct),
        selector,
        method,
        momentum,
        seed,
        domain_clip: args.domain_clip,
        accumulate_saliency: args.accumulate_saliency,
    };
    attack_cfg
        .validate(graph.node_count())
        .map_err(|e| CliError::Usage(e.to_string()))?;

    let surrogate = match (setting, &args.surrogate) {
        (Setting::Black, Some(path)) => Some(load_model(path)?.0),
        (Setting::Black, None) => {
            println!("no --surrogate given; training one (narrower widths, shifted seed)");
            let mut surrogate_cfg = *target.config();
            surrogate_cfg.hidden = (surrogate_cfg.hidden * 3 / 4).max(2);
            surrogate_cfg.temporal_hidden = (surrogate_cfg.temporal_hidden * 3 / 4).max(2);
            let streams = SeedStream::new(seed.wrapping_add(1));
            let mut model = StModel::init(surrogate_cfg, &graph, &mut streams.stream("init"))?;
            train_schedule(
                &mut model,
                &split,
                &crate::forecaster::default_phases(seed.wrapping_add(1)),
            )?;
            let path = dirs.checkpoints.join("surrogate.stadv");
            save_model(&path, &model, &split.normalizer, "none")?;
            println!("surrogate checkpoint: {}", path.display());
            Some(model)
        }
        _ => None,
    };

    let eval = evaluate_attack(
        &target,
        surrogate.as_ref(),
        &split,
        &graph,
        setting,
        &attack_cfg,
        batch,
        args.max_windows,
    )?;

    let label = format!("{}-{}", method.name(), selector.name());
    let mut reports = BTreeMap::new();
    reports.insert(label.clone(), eval.report);
    let table = compare(&reports)?;
    let report_path = dirs.reports.join(format!(
        "attack_{}_{}_{}.csv",
        setting.name(),
        method.name(),
        selector.name()
    ));
    std::fs::write(&report_path, table.to_csv()).map_err(StadvError::from)?;

    if let Some(sal) = &eval.saliency {
        std::fs::write(dirs.reports.join("saliency.csv"), sal.to_csv())
            .map_err(StadvError::from)?;
    }
    if let Some(first) = eval.results.first() {
        std::fs::write(
            dirs.reports.join("perturbation_first_window.csv"),
            first.perturbation_csv(),
        )
        .map_err(StadvError::from)?;
    }
    let summary = serde_json::json!({
        "setting": setting.name(),
        "method": method.name(),
        "selector": selector.name(),
        "epsilon": attack_cfg.eps,
        "alpha": attack_cfg.alpha,
        "iters": attack_cfg.iters,
        "eta": attack_cfg.eta,
        "momentum": attack_cfg.momentum,
        "seed": attack_cfg.seed,
        "windows_evaluated": eval.evaluated,
        "clean_g_mae": eval.clean_g_mae,
        "metrics": eval.report,
        "final_loss_first_window": eval.results.first().map(|r| r.iteration_log.last().copied()),
        "mask_first_batch": eval.results.first().map(|r| r.mask.selected_nodes()),
    });
    std::fs::write(
        dirs.reports.join("attack_summary.json"),
        serde_json::to_string_pretty(&summary).expect("serializable"),
    )
    .map_err(StadvError::from)?;

    echo_config(
        dirs,
        "attack",
        &[
            ("setting", setting.name().to_string()),
            ("method", method.name().to_string()),
            ("selector", selector.name().to_string()),
            ("epsilon", attack_cfg.eps.to_string()),
            ("alpha", attack_cfg.alpha.to_string()),
            ("iters", attack_cfg.iters.to_string()),
            ("eta", attack_cfg.eta.to_string()),
            ("momentum", attack_cfg.momentum.to_string()),
            ("seed", attack_cfg.seed.to_string()),
            ("batch", batch.to_string()),
        ],
    )?;
    println!(
        "clean G-MAE {:.4} | attacked over {} windows:",
        eval.clean_g_mae, eval.evaluated
    );
    print!("{}", table.to_text());
    println!("report: {}", report_path.display());
    Ok(())
}

fn cmd_defend(args: DefendArgs, cfg: &ConfigMap, dirs: &OutDirs) -> Result<(), CliError> {
    let strategy_name: String = resolve(args.strategy, cfg, "strategy", "at".to_string())?;
    let strategy =
        DefenseStrategy::parse(&strategy_name).map_err(|e| CliError::Usage(e.to_string()))?;
    let mix_ratio = resolve(args.mix_ratio, cfg, "mix_ratio", 0.5)?;
    let epochs = resolve(args.epochs, cfg, "epochs", 20)?;
    let lr = resolve(args.lr, cfg, "lr", 0.15)?;
    let batch = resolve(args.batch, cfg, "batch", 64)?;
    let seed = resolve(args.seed, cfg, "seed", 0)?;
    let epsilon = resolve(args.epsilon, cfg, "epsilon", 0.5)?;
    let alpha = resolve(args.alpha, cfg, "alpha", 0.1)?;
    let iters = resolve(args.iters, cfg, "iters", 5)?;
    let eta_pct = resolve(args.eta_pct, cfg, "eta_pct", 10.0)?;
    let t = resolve(args.t, cfg, "t", 12)?;
    let tau = resolve(args.tau, cfg, "tau", 12)?;
    let hidden = resolve(args.hidden, cfg, "hidden", 20)?;
    let temporal_hidden = resolve(args.temporal_hidden, cfg, "temporal_hidden", 10)?;
    let temporal_layers = resolve(args.temporal_layers, cfg, "temporal_layers", 3)?;
    if !(0.0..=1.0).contains(&mix_ratio) {
        return Err(CliError::Usage("mix ratio must lie in [0,1]".into()));
    }

    let (graph, series) = load_dataset(&args.speed, &args.graph)?;
    let split = build_split(&series, &graph, t, tau)?;
    let model_cfg = ModelConfig {
        nodes: graph.node_count(),
        t_in: t,
        horizon: tau,
        features: 1,
        temporal_layers,
        temporal_hidden,
        conv_layers: 2,
        hidden,
        activation: Activation::Relu,
    };
    let streams = SeedStream::new(seed);
    let mut model = StModel::init(model_cfg, &graph, &mut streams.stream("init"))?;
    let eta = eta_from(graph.node_count(), None, eta_pct);
    let mut defense_cfg = DefenseConfig::new(strategy, eta);
    defense_cfg.inner.eps = epsilon;
    defense_cfg.inner.alpha = alpha;
    defense_cfg.inner.iters = iters;
    defense_cfg.inner.seed = seed;
    defense_cfg.mix_ratio = mix_ratio;
    defense_cfg.epochs = epochs;
    defense_cfg.learning_rate = lr;
    defense_cfg.batch_size = batch;
    defense_cfg.seed = seed;

    let report = defend_train(&mut model, &split, &graph, &defense_cfg)?;
    let ckpt = dirs
        .checkpoints
        .join(format!("model_{}.stadv", strategy.name()));
    save_model(&ckpt, &model, &split.normalizer, strategy.name())?;

    let mut loss_csv = String::from("epoch,loss,smoothed\n");
    for (i, (l, s)) in report
        .epoch_loss
        .iter()
        .zip(&report.smoothed_loss)
        .enumerate()
    {
        let _ = writeln!(loss_csv, "{},{},{}", i, l, s);
    }
    std::fs::write(
        dirs.reports.join(format!("defend_{}_loss.csv", strategy.name())),
        loss_csv,
    )
    .map_err(StadvError::from)?;
    let clean = crate::experiment::clean_g_mae(&model, &split, None)?;
    echo_config(
        dirs,
        "defend",
        &[
            ("strategy", strategy.name().to_string()),
            ("mix_ratio", mix_ratio.to_string()),
            ("epochs", epochs.to_string()),
            ("lr", lr.to_string()),
            ("batch", batch.to_string()),
            ("seed", seed.to_string()),
            ("epsilon", epsilon.to_string()),
            ("alpha", alpha.to_string()),
            ("iters", iters.to_string()),
            ("eta", eta.to_string()),
        ],
    )?;
    println!(
        "defended ({}) over {} epochs, clean test G-MAE {:.4}",
        strategy.name(),
        epochs,
        clean
    );
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn cmd_verify_bound(args: VerifyBoundArgs, cfg: &ConfigMap, dirs: &OutDirs) -> Result<(), CliError> {
    let trials = resolve(args.trials, cfg, "trials", 200)?;
    if trials == 0 {
        return Err(CliError::Usage("trials must be >= 1".into()));
    }
    let seed = resolve(args.seed, cfg, "seed", 0)?;
    let max_nodes = resolve(args.max_nodes, cfg, "max_nodes", 10)?;
    let max_layers = resolve(args.max_layers, cfg, "max_layers", 3)?;
    let activation_name: String = resolve(args.activation, cfg, "activation", "relu".to_string())?;
    let activation =
        Activation::parse(&activation_name).map_err(|e| CliError::Usage(e.to_string()))?;
    let report =
        crate::bound::verify_bound_randomized(trials, seed, max_nodes, max_layers, activation)?;
    std::fs::write(
        dirs.reports.join("bound_report.json"),
        serde_json::to_string_pretty(&report).expect("serializable"),
    )
    .map_err(StadvError::from)?;
    echo_config(
        dirs,
        "verify-bound",
        &[
            ("trials", trials.to_string()),
            ("seed", seed.to_string()),
            ("max_nodes", max_nodes.to_string()),
            ("max_layers", max_layers.to_string()),
            ("activation", activation_name.clone()),
        ],
    )?;
    println!(
        "verify-bound: {} trials, {} violations, max gap/bound ratio {:.3e} (worst bound {:.6}, worst gap {:.6}) -> PASS",
        report.trials, report.violations, report.max_ratio, report.worst_bound, report.worst_gap
    );
    Ok(())
}

fn cmd_plot(args: PlotArgs, _cfg: &ConfigMap, dirs: &OutDirs) -> Result<(), CliError> {
    if args.reports.is_empty() {
        return Err(CliError::Usage("plot needs at least one report".into()));
    }
    let xs: Vec<f64> = match &args.x_values {
        Some(raw) => raw
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::Usage(format!("bad x value {:?}", v)))
            })
            .collect::<Result<Vec<_>, _>>()?,
        None => (0..args.reports.len()).map(|i| i as f64).collect(),
    };
    if xs.len() != args.reports.len() {
        return Err(CliError::Usage(format!(
            "{} x values for {} reports",
            xs.len(),
            args.reports.len()
        )));
    }
    // method -> metric -> points
    let metrics = ["g_mae", "l_mae", "g_rmse", "l_rmse"];
    let mut curves: BTreeMap<String, [Vec<(f64, f64)>; 4]> = BTreeMap::new();
    for (path, &x) in args.reports.iter().zip(&xs) {
        let text = std::fs::read_to_string(path).map_err(StadvError::from)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| {
            CliError::Usage(format!("empty report {:?}", path))
        })?;
        if !header.starts_with("method,g_mae") {
            return Err(CliError::Usage(format!(
                "{:?} is not a metrics report CSV",
                path
            )));
        }
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 5 {
                continue;
            }
            let entry = curves.entry(fields[0].to_string()).or_default();
            for (slot, field) in entry.iter_mut().zip(&fields[1..5]) {
                if let Ok(v) = field.parse::<f64>() {
                    slot.push((x, v));
                }
            }
        }
    }
    if curves.is_empty() {
        return Err(CliError::Usage("no data rows found in reports".into()));
    }
    for (mi, metric) in metrics.iter().enumerate() {
        let series: Vec<Series> = curves
            .iter()
            .map(|(name, per_metric)| Series {
                label: name.clone(),
                points: per_metric[mi].clone(),
            })
            .collect();
        let svg = render_line_chart(metric, &args.x_label, metric, &series)?;
        let path = dirs.plots.join(format!("{}.svg", metric));
        std::fs::write(&path, svg).map_err(StadvError::from)?;
        println!("plot: {}", path.display());
    }
    Ok(())
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    if let Some(jobs) = cli.jobs {
        // Ignore failure: the global pool may already exist in-process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global();
    }
    let cfg = match ConfigMap::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {}", msg);
            return EXIT_USAGE;
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {}", e);
            return EXIT_RUNTIME;
        }
    };
    let dirs = match prepare_out(&cli.out) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: {}", e);
            return EXIT_RUNTIME;
        }
    };
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a, &cfg, &dirs),
        Command::Train(a) => cmd_train(a, &cfg, &dirs),
        Command::Attack(a) => cmd_attack(a, &cfg, &dirs),
        Command::Defend(a) => cmd_defend(a, &cfg, &dirs),
        Command::VerifyBound(a) => cmd_verify_bound(a, &cfg, &dirs),
        Command::Plot(a) => cmd_plot(a, &cfg, &dirs),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {}", msg);
            EXIT_USAGE
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {}", e);
            match e {
                StadvError::BoundViolation { .. } => EXIT_VIOLATION,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

/// Summary row used by library callers that assemble multi-method tables.
pub fn method_label(method: Method, selector: Selector) -> String {
    format!("{}-{}", method.name(), selector.name())
}

/// Re-exported so integration tests can build tables the same way the CLI
/// does.
pub fn write_comparison_csv(
    path: &Path,
    reports: &BTreeMap<String, MetricsReport>,
) -> Result<(), StadvError> {
    let table = compare(reports)?;
    std::fs::write(path, table.to_csv())?;
    Ok(())
}
