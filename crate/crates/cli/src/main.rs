use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use clever::config::{parse_config, DataSpec, RunConfig, RunManifest};
use clever::data::Dataset;
use clever::eval::{
    equivariance_diagnostics, linear_probe, robustness_eval, rotation_sensitivity_task, rotational_invariance_eval,
    FeatureSource, ProbeConfig, RobustnessReport, TransformFamily, DIAGNOSTICS_HEADER, ROTATIONAL_INVARIANCE_HEADER,
};
use clever::model::Network;
use clever::report::{emit_report, ChartKind};
use clever::study::{collapse_study, collapse_study_csv, parse_grid, AblationParam, COLLAPSE_LAMBDAS};
use clever::train::{collapse_log_csv, fmt_f64, train_log_csv, Checkpoint, Trainer};
use clever::vision::Suite;
use clever::{Error, Result};

/// Equivariant contrastive pre-training with a split invariant/equivariant
/// representation, and the probes that evaluate it.
#[derive(Parser)]
#[command(name = "clever", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run config, or a manifest from an earlier run. Defaults apply
    /// when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training and evaluation seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train a student/teacher pair and write logs and checkpoints.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint instead of starting fresh.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Linear probe on frozen features, one row per feature source.
    LinearProbe {
        #[command(flatten)]
        common: Common,
        /// Checkpoint holding the encoder.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Probe accuracy under the perturbation suites.
    Robustness {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Suites to evaluate, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "Orig,CJ,CJ+Flip,CJ+Ro,CJ+Ro+ET")]
        suite: Vec<String>,
    },
    /// Invariance residuals and transformation predictability per branch.
    EquivDiag {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Four-way rotation prediction and accuracy under random rotations.
    RotationTask {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Paired runs without and with the projection regularizer.
    CollapseStudy {
        #[command(flatten)]
        common: Common,
    },
    /// Sweep one hyperparameter and probe each result.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// rho, K or lambda.
        #[arg(long)]
        param: String,
        /// Comma separated values.
        #[arg(long)]
        grid: String,
    },
    /// Render a CSV file as an SVG chart.
    Report {
        /// CSV file with a header row.
        csv: PathBuf,
        /// line or bar.
        #[arg(long, default_value = "line")]
        kind: String,
        /// SVG path; defaults to the CSV path with an .svg extension.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Setup {
    config: RunConfig,
    base_dir: PathBuf,
    hash: Option<String>,
    out: PathBuf,
}

fn setup(common: &Common) -> Result<Setup> {
    if common.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(common.workers)
            .build_global()
            .map_err(|e| Error::Input(format!("worker pool: {e}")))?;
    }
    let (mut config, base_dir, hash) = match &common.config {
        Some(path) => {
            let loaded = parse_config(path)?;
            (loaded.config, loaded.base_dir, Some(loaded.content_hash))
        }
        None => (
            RunConfig {
                data: DataSpec::default(),
                train: Default::default(),
                probe: Default::default(),
            },
            PathBuf::new(),
            None,
        ),
    };
    if let Some(seed) = common.seed {
        config.set_seed(seed);
    }
    fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    Ok(Setup {
        config,
        base_dir,
        hash,
        out: common.out.clone(),
    })
}

impl Setup {
    fn manifest(&self, command: &str, artifacts: &[&str]) -> RunManifest {
        let mut m = RunManifest::new(command, self.config.clone(), self.hash.as_deref());
        m.artifacts = artifacts.iter().map(|s| s.to_string()).collect();
        m
    }

    fn data(&self) -> Result<Dataset> {
        self.config.data.load(&self.base_dir)
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(path, e))
    }
}

fn load_network(path: &Path) -> Result<Network> {
    Ok(Checkpoint::load(path)?.pair.student)
}

fn sources(net: &Network) -> Vec<FeatureSource> {
    if net.dims().1 == 0 {
        vec![FeatureSource::Ir]
    } else {
        FeatureSource::ALL.to_vec()
    }
}

fn with_source(cfg: &ProbeConfig, source: FeatureSource) -> ProbeConfig {
    ProbeConfig { source, ..cfg.clone() }
}

fn pretrain(common: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let mut s = setup(common)?;
    let resume = checkpoint.map(Checkpoint::load).transpose()?;
    if let Some(c) = &resume {
        s.config.train = c.config.clone();
    }
    let mut m = s.manifest(
        "pretrain",
        &["train_log.csv", "collapse_log.csv", "checkpoint.clvr", "checkpoints/"],
    );
    if let Some(p) = checkpoint {
        m.parameters.push(("resume".into(), p.display().to_string()));
    }
    m.write(&s.out.join("manifest.toml"))?;
    let data = s.data()?;
    let mut trainer = match resume {
        Some(c) => Trainer::resume(c, &data)?,
        None => Trainer::new(s.config.train.clone(), &data)?,
    };
    let dir = s.out.join("checkpoints");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let output = trainer.run(Some(&dir))?;
    s.write("train_log.csv", &train_log_csv(&output.log))?;
    s.write("collapse_log.csv", &collapse_log_csv(&output.collapse))?;
    output.checkpoint.save(&s.out.join("checkpoint.clvr"))
}

fn probe_cmd(common: &Common, checkpoint: &Path) -> Result<()> {
    let s = setup(common)?;
    let mut m = s.manifest("linear-probe", &["linear_probe.csv"]);
    m.parameters.push(("checkpoint".into(), checkpoint.display().to_string()));
    m.write(&s.out.join("manifest.toml"))?;
    let net = load_network(checkpoint)?;
    let data = s.data()?;
    let mut csv = String::from("source,accuracy\n");
    for source in sources(&net) {
        let run = linear_probe(&net, &data, &with_source(&s.config.probe, source))?;
        csv.push_str(&format!("{source},{}\n", fmt_f64(run.accuracy)));
    }
    s.write("linear_probe.csv", &csv)
}

fn robustness_cmd(common: &Common, checkpoint: &Path, suites: &[String]) -> Result<()> {
    let s = setup(common)?;
    let suites: Vec<Suite> = suites.iter().map(|n| n.trim().parse()).collect::<Result<_>>()?;
    let mut m = s.manifest("robustness", &["robustness.csv", "robustness.svg"]);
    m.parameters.push(("checkpoint".into(), checkpoint.display().to_string()));
    m.parameters.push((
        "suite".into(),
        suites.iter().map(|x| x.name()).collect::<Vec<_>>().join(","),
    ));
    m.write(&s.out.join("manifest.toml"))?;
    let net = load_network(checkpoint)?;
    let data = s.data()?;
    let augment = s.config.train.augment.clone();
    let mut report = RobustnessReport::default();
    for source in sources(&net) {
        let cfg = with_source(&s.config.probe, source);
        report
            .rows
            .push(robustness_eval(&net, &data, &suites, &cfg, &augment, source.name())?);
    }
    s.write("robustness.csv", &report.to_csv()?)?;
    let table = clever::report::parse_csv(&report.to_csv()?)?;
    s.write(
        "robustness.svg",
        &transpose_for_bars(&table).and_then(|t| clever::report::render_svg(&t, ChartKind::Bar, "robustness"))?,
    )
}

/// Suites become the bar categories and feature sources the series.
fn transpose_for_bars(t: &clever::report::Table) -> Result<clever::report::Table> {
    let mut header = vec!["suite".to_string()];
    header.extend(t.rows.iter().map(|r| r[0].clone()));
    let rows: Vec<Vec<String>> = (1..t.header.len())
        .map(|c| {
            let mut row = vec![t.header[c].clone()];
            row.extend(t.rows.iter().map(|r| r[c].clone()));
            row
        })
        .collect();
    let lines = (0..rows.len() as u64).map(|i| i + 2).collect();
    Ok(clever::report::Table { header, rows, lines })
}

fn equiv_cmd(common: &Common, checkpoint: &Path) -> Result<()> {
    let s = setup(common)?;
    let mut m = s.manifest("equiv-diag", &["equivariance.csv"]);
    m.parameters.push(("checkpoint".into(), checkpoint.display().to_string()));
    m.write(&s.out.join("manifest.toml"))?;
    let net = load_network(checkpoint)?;
    let data = s.data()?;
    let mut csv = format!("{DIAGNOSTICS_HEADER}\n");
    for family in [TransformFamily::rotation(), TransformFamily::Elastic, TransformFamily::brightness()] {
        let d = equivariance_diagnostics(&net, &data, &family, &s.config.probe, &s.config.train.augment)?;
        csv.push_str(&d.csv_row());
        csv.push('\n');
    }
    s.write("equivariance.csv", &csv)
}

fn rotation_cmd(common: &Common, checkpoint: &Path) -> Result<()> {
    let s = setup(common)?;
    let mut m = s.manifest("rotation-task", &["rotation_task.csv", "rotational_invariance.csv"]);
    m.parameters.push(("checkpoint".into(), checkpoint.display().to_string()));
    m.write(&s.out.join("manifest.toml"))?;
    let net = load_network(checkpoint)?;
    let data = s.data()?;
    let mut task = String::from("source,accuracy\n");
    let mut inv = format!("{ROTATIONAL_INVARIANCE_HEADER}\n");
    for source in sources(&net) {
        let cfg = with_source(&s.config.probe, source);
        task.push_str(&format!("{source},{}\n", fmt_f64(rotation_sensitivity_task(&net, &data, &cfg)?)));
        let r = rotational_invariance_eval(&net, &data, &cfg)?;
        inv.push_str(&format!(
            "{source},{},{},{}\n",
            fmt_f64(r.orig),
            fmt_f64(r.ro90),
            fmt_f64(r.ro180)
        ));
    }
    s.write("rotation_task.csv", &task)?;
    s.write("rotational_invariance.csv", &inv)
}

fn collapse_cmd(common: &Common) -> Result<()> {
    let s = setup(common)?;
    let mut m = s.manifest("collapse-study", &["collapse_study.csv", "collapse_study.svg"]);
    m.parameters.push((
        "lambdas".into(),
        COLLAPSE_LAMBDAS.iter().map(|l| fmt_f64(*l)).collect::<Vec<_>>().join(","),
    ));
    m.write(&s.out.join("manifest.toml"))?;
    let data = s.data()?;
    let arms = collapse_study(&s.config.train, &data, &COLLAPSE_LAMBDAS)?;
    let csv = collapse_study_csv(&arms)?;
    s.write("collapse_study.csv", &csv)?;
    for arm in &arms {
        s.write(
            &format!("train_log_lambda_{}.csv", fmt_f64(arm.lambda)),
            &train_log_csv(&arm.output.log),
        )?;
    }
    let table = clever::report::parse_csv(&csv)?;
    s.write(
        "collapse_study.svg",
        &clever::report::render_svg(&table, ChartKind::Line, "collapse study")?,
    )
}

fn ablate_cmd(common: &Common, param: &str, grid: &str) -> Result<()> {
    let s = setup(common)?;
    let param: AblationParam = param.parse()?;
    let grid = parse_grid(grid)?;
    let mut runs = Vec::new();
    for &value in &grid {
        let mut cfg = s.config.clone();
        param.apply(&mut cfg, value)?;
        let dir = s.out.join(format!("{}={}", param.name(), fmt_f64(value)));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut m = RunManifest::new("ablate", cfg.clone(), s.hash.as_deref());
        m.parameters.push((param.name().into(), fmt_f64(value)));
        m.artifacts = vec!["train_log.csv".into(), "checkpoint.clvr".into()];
        m.write(&dir.join("manifest.toml"))?;
        runs.push((value, cfg, dir));
    }
    let data = s.data()?;
    let mut summary = format!("{},accuracy\n", param.name());
    for (value, cfg, dir) in runs {
        log::info!("ablate {} = {value}", param.name());
        let out = Trainer::new(cfg.train.clone(), &data)?.run(None)?;
        fs::write(dir.join("train_log.csv"), train_log_csv(&out.log)).map_err(|e| Error::io(&dir, e))?;
        out.checkpoint.save(&dir.join("checkpoint.clvr"))?;
        let probe = with_source(&cfg.probe, FeatureSource::Joint);
        let acc = linear_probe(&out.checkpoint.pair.student, &data, &probe)?.accuracy;
        summary.push_str(&format!("{},{}\n", fmt_f64(value), fmt_f64(acc)));
    }
    let name = format!("ablation_{}.csv", param.name());
    s.write(&name, &summary)?;
    emit_report(
        &s.out.join(&name),
        ChartKind::Line,
        &s.out.join(format!("ablation_{}.svg", param.name())),
    )
}

fn report_cmd(csv: &Path, kind: &str, out: Option<&Path>) -> Result<()> {
    let kind: ChartKind = kind.parse()?;
    let out = out.map_or_else(|| csv.with_extension("svg"), Path::to_path_buf);
    emit_report(csv, kind, &out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common, checkpoint } => pretrain(&common, checkpoint.as_deref()),
        Command::LinearProbe { common, checkpoint } => probe_cmd(&common, &checkpoint),
        Command::Robustness {
            common,
            checkpoint,
            suite,
        } => robustness_cmd(&common, &checkpoint, &suite),
        Command::EquivDiag { common, checkpoint } => equiv_cmd(&common, &checkpoint),
        Command::RotationTask { common, checkpoint } => rotation_cmd(&common, &checkpoint),
        Command::CollapseStudy { common } => collapse_cmd(&common),
        Command::Ablate { common, param, grid } => ablate_cmd(&common, &param, &grid),
        Command::Report { csv, kind, out } => report_cmd(&csv, &kind, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = std::env::var("CLEVER_LOG").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .format_target(false)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("clever: {e}");
            ExitCode::from(if matches!(e, Error::Config { .. }) { 2 } else { 1 })
        }
    }
}
