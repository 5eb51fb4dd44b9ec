//! Experiment pipeline behind the `biascorr` binary: configuration,
//! subcommands and artifact persistence.

mod config;
mod report;

pub use config::{ExperimentConfig, ModelSection};
pub use report::{ReportBundle, REPORT_MAGIC, REPORT_VERSION};

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::archs::{build_model, Preset};
use crate::checkpoint::Checkpoint;
use crate::coupler::{
    climatology_compare, run_controlled, run_corrected, run_nudged_record, truth_record, ClimateReport, Corrector,
    NeuralCorrector, RunRecord,
};
use crate::error::{Error, Result};
use crate::ranklab::injectivity_report;
use crate::toyclimate::{build_dataset, Dataset};
use crate::trainer::{baseline_ridge, evaluate_offline, train, EvalReport};

#[derive(Debug, Parser)]
#[command(name = "biascorr", version, about = "Learned bias correction for a nudged toy climate model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate the truth and nudged systems and write the train/test datasets.
    Generate(CommonArgs),
    /// Train the configured network on the training split.
    Train(TrainArgs),
    /// Score a checkpoint and the ridge baseline on the test split.
    EvalOffline(ModelArgs),
    /// Run truth, control, nudged and corrected simulations for every seed.
    RunOnline(ModelArgs),
    /// Check that every decoder upsampler of a checkpoint is injective.
    VerifyRank(RankArgs),
    /// Compare run records against a truth run.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Experiment configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `[output] dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replaces the global seed.
    #[arg(long)]
    pub seed_override: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Width preset replacing `[model] preset`.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint to use instead of `<out>/model.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RankArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Run records to compare; one must be a control run.
    #[arg(long, num_args = 1..)]
    pub runs: Vec<PathBuf>,
    /// Truth run the records are scored against.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

/// Lines to print and the process exit code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub lines: Vec<String>,
    pub code: i32,
}

impl Outcome {
    fn ok(summary: String) -> Self {
        Self {
            lines: vec![summary],
            code: 0,
        }
    }
}

/// The four persisted artifact kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArtifactKind {
    Dataset,
    Checkpoint,
    Run,
    Report,
}

impl ArtifactKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dataset" => Some(ArtifactKind::Dataset),
            "checkpoint" => Some(ArtifactKind::Checkpoint),
            "run" => Some(ArtifactKind::Run),
            "report" => Some(ArtifactKind::Report),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Artifact {
    Dataset(Dataset),
    Checkpoint(Box<Checkpoint>),
    Run(RunRecord),
    Report(ReportBundle),
}

impl Artifact {
    pub fn kind(&self) -> ArtifactKind {
        match self {
            Artifact::Dataset(_) => ArtifactKind::Dataset,
            Artifact::Checkpoint(_) => ArtifactKind::Checkpoint,
            Artifact::Run(_) => ArtifactKind::Run,
            Artifact::Report(_) => ArtifactKind::Report,
        }
    }

    pub fn config_digest(&self) -> &str {
        match self {
            Artifact::Dataset(d) => &d.config_digest,
            Artifact::Checkpoint(c) => &c.config_digest,
            Artifact::Run(r) => &r.config_digest,
            Artifact::Report(r) => &r.config_digest,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            Artifact::Dataset(d) => d.to_bytes(),
            Artifact::Checkpoint(c) => c.to_bytes(),
            Artifact::Run(r) => r.to_bytes(),
            Artifact::Report(r) => r.to_bytes(),
        }
    }
}

pub fn save_artifact(path: &Path, artifact: &Artifact) -> Result<()> {
    crate::artifact::write_file(path, &artifact.to_bytes())
}

/// Loads and verifies an artifact of the expected kind.
pub fn load_artifact(path: &Path, kind: ArtifactKind) -> Result<Artifact> {
    Ok(match kind {
        ArtifactKind::Dataset => Artifact::Dataset(Dataset::load(path)?),
        ArtifactKind::Checkpoint => Artifact::Checkpoint(Box::new(Checkpoint::load(path)?)),
        ArtifactKind::Run => Artifact::Run(RunRecord::load(path)?),
        ArtifactKind::Report => Artifact::Report(ReportBundle::load(path)?),
    })
}

struct Context {
    cfg: ExperimentConfig,
    digest: String,
    out: PathBuf,
    /// Whether loaded artifacts must carry this configuration's digest.
    enforce: bool,
}

impl Context {
    fn new(args: &CommonArgs, always_enforce: bool) -> Result<Self> {
        let mut cfg = match &args.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = args.seed_override {
            cfg.seed = s;
            cfg.training.seed = s;
        }
        let out = args.out.clone().unwrap_or_else(|| cfg.output.clone());
        Ok(Self {
            digest: cfg.digest(),
            out,
            enforce: always_enforce || args.config.is_some(),
            cfg,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn check(&self, path: &Path, found: &str) -> Result<()> {
        if self.enforce && found != self.digest {
            return Err(Error::Digest {
                expected: self.digest.clone(),
                found: format!("{found} (config digest of {})", path.display()),
            });
        }
        Ok(())
    }

    fn dataset(&self, name: &str) -> Result<Dataset> {
        let path = self.path(name);
        let d = Dataset::load(&path)?;
        self.check(&path, &d.config_digest)?;
        Ok(d)
    }

    fn checkpoint(&self, explicit: Option<&Path>) -> Result<Checkpoint> {
        let path = explicit.map_or_else(|| self.path("model.ckpt"), Path::to_path_buf);
        let c = Checkpoint::load(&path)?;
        self.check(&path, &c.config_digest)?;
        Ok(c)
    }

    fn run(&self, path: &Path) -> Result<RunRecord> {
        let r = RunRecord::load(path)?;
        self.check(path, &r.config_digest)?;
        Ok(r)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        crate::artifact::write_file(&self.path(name), text.as_bytes())
    }
}

fn run_path(out: &Path, kind: &str, seed: u64) -> PathBuf {
    out.join("runs").join(format!("{kind}_seed{seed}.run"))
}

fn r2_str(r: &EvalReport) -> String {
    r.tables[0].r2.map_or("undefined".to_string(), |v| format!("{v:.4}"))
}

fn generate(args: &CommonArgs) -> Result<Outcome> {
    let ctx = Context::new(args, true)?;
    let (train_ds, test_ds) = build_dataset(&ctx.cfg.system, &ctx.cfg.dataset, ctx.cfg.seed, &ctx.digest)?;
    train_ds.save(&ctx.path("train.nodc"))?;
    test_ds.save(&ctx.path("test.nodc"))?;
    let s = &train_ds.stats;
    let mut stats = String::from("channel,state_min,state_max,tendency_min,tendency_max\n");
    for (i, c) in s.channels.iter().enumerate() {
        let _ = writeln!(
            stats,
            "{c},{:e},{:e},{:e},{:e}",
            s.state_min[i], s.state_max[i], s.tendency_min[i], s.tendency_max[i]
        );
    }
    ctx.write("stats.csv", &stats)?;
    ctx.write("config.toml", &ctx.cfg.to_toml())?;
    Ok(Outcome::ok(format!(
        "generate ok samples={} train={} test={} config={} out={}",
        train_ds.len() + test_ds.len(),
        train_ds.len(),
        test_ds.len(),
        &ctx.digest[..12],
        ctx.out.display()
    )))
}

fn train_cmd(args: &TrainArgs) -> Result<Outcome> {
    let ctx = Context::new(&args.common, true)?;
    let data = ctx.dataset("train.nodc")?;
    let mut arch_cfg = ctx.cfg.clone();
    if let Some(p) = &args.preset {
        arch_cfg.model.preset = Preset::parse(p)
            .ok_or_else(|| Error::config(format!("unknown preset `{p}` (expected toy, small or large)")))?;
    }
    let arch = arch_cfg.architecture()?;
    arch.validate()?;
    let mut model = build_model(&arch, ctx.cfg.seed)?;
    let outcome = match train(&mut model, &data, &ctx.cfg.training) {
        Ok(o) => o,
        Err(Error::Diverged {
            step,
            detail,
            last_good,
        }) => {
            last_good.save(&ctx.path("model_last_good.ckpt"))?;
            return Err(Error::Diverged {
                step,
                detail,
                last_good,
            });
        }
        Err(e) => return Err(e),
    };
    outcome.checkpoint.save(&ctx.path("model.ckpt"))?;
    for snap in &outcome.snapshots {
        snap.save(&ctx.path(&format!("model_epoch{}.ckpt", snap.epoch)))?;
    }
    ctx.write("loss.csv", &outcome.loss_csv())?;
    Ok(Outcome::ok(format!(
        "train ok variant={} preset={} params={} epochs={} updates={} initial_loss={:e} final_loss={:e}",
        arch.variant,
        arch_cfg.model.preset.as_str(),
        model.param_count(),
        outcome.loss_curve.len(),
        outcome.updates,
        outcome.initial_loss,
        outcome.final_loss
    )))
}

fn eval_offline(args: &ModelArgs) -> Result<Outcome> {
    let ctx = Context::new(&args.common, true)?;
    let ck = ctx.checkpoint(args.checkpoint.as_deref())?;
    let train_ds = ctx.dataset("train.nodc")?;
    let test_ds = ctx.dataset("test.nodc")?;
    let report = evaluate_offline(&ck, &test_ds)?;
    let (_, ridge) = baseline_ridge(&train_ds, &test_ds, ctx.cfg.ridge_lambda)?;
    let label = ck.arch.variant.as_str();
    let mut csv = String::new();
    for (i, (name, r)) in [(label, &report), ("ridge", &ridge)].into_iter().enumerate() {
        for (j, line) in r.to_csv().lines().enumerate() {
            if j == 0 && i == 0 {
                let _ = writeln!(csv, "model,{line}");
            } else if j > 0 {
                let _ = writeln!(csv, "{name},{line}");
            }
        }
    }
    ctx.write("offline_metrics.csv", &csv)?;
    ctx.write("offline_tcc.csv", &report.tcc_csv())?;
    ctx.write("offline_spectra.csv", &report.spectra_csv())?;
    Ok(Outcome::ok(format!(
        "eval-offline ok model={label} r2={} ridge_r2={} samples={}",
        r2_str(&report),
        r2_str(&ridge),
        report.samples
    )))
}

fn run_online(args: &ModelArgs) -> Result<Outcome> {
    let ctx = Context::new(&args.common, true)?;
    let ck = ctx.checkpoint(args.checkpoint.as_deref())?;
    let sys = &ctx.cfg.system;
    let coupling = &ctx.cfg.coupling;
    let corrector = Corrector::Neural(Box::new(NeuralCorrector::from_checkpoint(&ck, sys, Some(&ck.stats.digest()))?));
    std::fs::create_dir_all(ctx.path("runs"))?;
    let horizon = coupling.horizon;
    let label = ck.arch.variant.as_str();
    for &seed in &coupling.seeds {
        let stamp = |mut r: RunRecord| {
            r.config_digest = ctx.digest.clone();
            r
        };
        let truth = stamp(truth_record(sys, horizon, seed)?);
        let control = stamp(run_controlled(sys, horizon, seed)?);
        let (nudged, _) = run_nudged_record(sys, horizon, seed)?;
        let corrected = stamp(run_corrected(sys, coupling, &corrector, horizon, seed, label)?.record);
        truth.save(&run_path(&ctx.out, "truth", seed))?;
        control.save(&run_path(&ctx.out, "control", seed))?;
        stamp(nudged).save(&run_path(&ctx.out, "nudged", seed))?;
        corrected.save(&run_path(&ctx.out, "corrected", seed))?;
    }
    Ok(Outcome::ok(format!(
        "run-online ok model={label} seeds={} horizon={horizon} cadence={} scaling={} out={}",
        coupling.seeds.len(),
        coupling.cadence.as_str(),
        coupling.scaling.as_str(),
        ctx.path("runs").display()
    )))
}

fn verify_rank(args: &RankArgs) -> Result<Outcome> {
    let ctx = Context::new(&args.common, false)?;
    let ck = ctx.checkpoint(Some(&args.checkpoint))?;
    let report = injectivity_report(&ck.to_model()?)?;
    let text = report.to_string();
    if args.common.out.is_some() {
        ctx.write("rank.txt", &text)?;
    }
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let passed = report.passed();
    let deficient: Vec<String> = report
        .levels
        .iter()
        .filter(|l| !l.report.injective)
        .map(|l| l.level.to_string())
        .collect();
    if passed {
        lines.push(format!("verify-rank ok variant={} levels={}", ck.arch.variant, report.levels.len()));
    } else {
        lines.push(error_line(&Error::Degenerate(format!(
            "decoder levels {} are not injective",
            deficient.join(",")
        ))));
    }
    Ok(Outcome {
        lines,
        code: if passed { 0 } else { 1 },
    })
}

fn with_seed_column(seed: u64, csv: &str, header: bool, into: &mut String) {
    for (j, line) in csv.lines().enumerate() {
        if j == 0 {
            if header {
                let _ = writeln!(into, "seed,{line}");
            }
        } else {
            let _ = writeln!(into, "{seed},{line}");
        }
    }
}

fn report_cmd(args: &ReportArgs) -> Result<Outcome> {
    let explicit = !args.runs.is_empty();
    let ctx = Context::new(&args.common, !explicit)?;
    let alpha = ctx.cfg.alpha;
    let mut reports: Vec<(u64, ClimateReport)> = Vec::new();
    if explicit {
        let truth_path = args
            .truth
            .as_deref()
            .ok_or_else(|| Error::config("--runs needs --truth"))?;
        let truth = ctx.run(truth_path)?;
        let runs = args.runs.iter().map(|p| ctx.run(p)).collect::<Result<Vec<_>>>()?;
        reports.push((truth.seed, climatology_compare(&runs, &truth, alpha)?));
    } else {
        for &seed in &ctx.cfg.coupling.seeds {
            let truth = ctx.run(&run_path(&ctx.out, "truth", seed))?;
            let runs = ["control", "nudged", "corrected"]
                .iter()
                .map(|k| ctx.run(&run_path(&ctx.out, k, seed)))
                .collect::<Result<Vec<_>>>()?;
            reports.push((seed, climatology_compare(&runs, &truth, alpha)?));
        }
    }
    let (mut table, mut pcc, mut bias) = (String::new(), String::new(), String::new());
    for (i, (seed, r)) in reports.iter().enumerate() {
        with_seed_column(*seed, &r.to_csv(), i == 0, &mut table);
        with_seed_column(*seed, &r.pcc_csv(), i == 0, &mut pcc);
        with_seed_column(*seed, &r.bias_csv(), i == 0, &mut bias);
    }
    let mut summary = String::from("label,provenance,mean_pct_change,mean_rmse,seeds\n");
    let mut text = format!("{:<12} {:<10} {:>12} {:>12}\n", "run", "kind", "rmse_pct", "rmse");
    let mut headline = Vec::new();
    for (k, row) in reports[0].1.rows.iter().enumerate() {
        let n = reports.len() as f64;
        let pct = reports.iter().map(|(_, r)| r.rows[k].pct_change).sum::<f64>() / n;
        let rmse = reports.iter().map(|(_, r)| r.rows[k].rmse).sum::<f64>() / n;
        let kind = row.provenance.as_str();
        let _ = writeln!(summary, "{},{kind},{pct:e},{rmse:e},{}", row.label, reports.len());
        let _ = writeln!(text, "{:<12} {kind:<10} {pct:>12.2} {rmse:>12.4}", row.label);
        if kind != "control" {
            headline.push(format!("{}_pct={pct:.2}", row.label));
        }
    }
    let bundle = ReportBundle {
        config_digest: ctx.digest.clone(),
        tables: vec![
            ("rmse".into(), table.clone()),
            ("pcc".into(), pcc.clone()),
            ("bias".into(), bias.clone()),
            ("summary".into(), summary.clone()),
        ],
    };
    std::fs::create_dir_all(&ctx.out)?;
    ctx.write("report_rmse.csv", &table)?;
    ctx.write("report_pcc.csv", &pcc)?;
    ctx.write("report_bias.csv", &bias)?;
    ctx.write("report_summary.csv", &summary)?;
    ctx.write("report.txt", &text)?;
    bundle.save(&ctx.path("report.bundle"))?;
    Ok(Outcome::ok(format!(
        "report ok seeds={} {} out={}",
        reports.len(),
        headline.join(" "),
        ctx.out.display()
    )))
}

/// Executes one parsed command.
pub fn execute(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::EvalOffline(a) => eval_offline(a),
        Command::RunOnline(a) => run_online(a),
        Command::VerifyRank(a) => verify_rank(a),
        Command::Report(a) => report_cmd(a),
    }
}

/// Single-line, `key=value` error description.
pub fn error_line(e: &Error) -> String {
    format!("error kind={} message={:?}", e.kind(), e.to_string())
}

/// Parses `argv`, runs the command and writes its lines; returns the exit
/// code.
pub fn dispatch<I, T>(argv: I, out: &mut impl Write, err: &mut impl Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("").trim_start_matches("error: ");
            let _ = writeln!(err, "error kind=usage message={first:?}");
            return 2;
        }
    };
    match execute(&cli) {
        Ok(o) => {
            let (last, body) = o.lines.split_last().map_or((None, &[][..]), |(l, b)| (Some(l), b));
            for line in body {
                let _ = writeln!(out, "{line}");
            }
            if let Some(l) = last {
                if o.code == 0 {
                    let _ = writeln!(out, "{l}");
                } else {
                    let _ = writeln!(err, "{l}");
                }
            }
            o.code
        }
        Err(e) => {
            let _ = writeln!(err, "{}", error_line(&e));
            1
        }
    }
}
