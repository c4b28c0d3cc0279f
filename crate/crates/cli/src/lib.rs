//! Command-line entry points: `train`, `eval`, `gradcheck`, `ablate` and `gen-data`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hero_core::config::HeroConfig;
use hero_core::diagnostics::gradient_suite;
use hero_core::eval::{table_header, table_row, EvalReport};
use hero_core::pipeline::{
    evaluate, fit, held_out, load_checkpoint, retrieval_report, save_checkpoint, training_pool, QueryMode,
};
use hero_core::world::{load_episodes, save_episodes};

/// Exit code for malformed invocations and configs.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for runtime failures, including a failed gradient check.
pub const EXIT_FAILURE: i32 = 1;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failure(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Failure(_) => EXIT_FAILURE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failure(m) => f.write_str(m),
        }
    }
}

fn fail(e: impl std::fmt::Display) -> CliError {
    CliError::Failure(e.to_string())
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "hero", version, about = "Video object grounding on a synthetic moving-shapes world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML config file; omitted sections keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.learning_rate=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Seed for model init, step order and the training pool.
    #[arg(long, env = "HERO_SEED")]
    seed: Option<u64>,
    /// Cap on training steps.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Per-step losses as JSON lines.
        #[arg(long)]
        loss_log: Option<PathBuf>,
        /// Evaluate on the held-out set every N steps.
        #[arg(long)]
        eval_every: Option<usize>,
    },
    /// Evaluate a checkpoint on an episode dump (or its configured held-out set).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory written by `gen-data`.
        #[arg(long)]
        episodes: Option<PathBuf>,
        /// Machine-readable report with per-frame IoUs.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace every query token with zeros.
        #[arg(long)]
        no_text: bool,
    },
    /// Finite-difference gradient checks of every op and the full loss.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate component ablations side by side.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_values = ["full", "no-retr", "no-pyr", "no-shi", "no-hier"])]
        variants: Vec<Variant>,
        /// Seeds to average over.
        #[arg(long, value_delimiter = ',', default_values = ["0"])]
        seeds: Vec<u64>,
        /// Machine-readable table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write an episode dump.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Eval)]
        split: Split,
        /// Number of episodes; defaults to the split's configured size.
        #[arg(long)]
        count: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Every component on.
    Full,
    NoRetr,
    NoPyr,
    NoShi,
    NoHier,
    /// Every component off.
    None,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRetr => "w/o retrieval",
            Variant::NoPyr => "w/o pyramid",
            Variant::NoShi => "w/o shifted",
            Variant::NoHier => "w/o hierarchy",
            Variant::None => "all off",
        }
    }

    pub fn apply(self, cfg: &mut HeroConfig) {
        let c = &mut cfg.model.encoder.components;
        match self {
            Variant::Full => {}
            Variant::NoRetr => c.retrieval = false,
            Variant::NoPyr => c.pyramid = false,
            Variant::NoShi => c.shifted = false,
            Variant::NoHier => c.hierarchy = false,
            Variant::None => {
                c.retrieval = false;
                c.pyramid = false;
                c.shifted = false;
                c.hierarchy = false;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Eval,
}

/// Parses `KEY=VALUE` where VALUE is a TOML value (bare words become strings).
fn apply_override(root: &mut toml::Table, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{assignment}`")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("`{p}` in `{key}` is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Reads the config file, applies `--set` overrides and seed/step flags, and validates.
pub fn load_config(path: Option<&Path>, sets: &[String], seed: Option<u64>, steps: Option<usize>) -> CliResult<HeroConfig> {
    let mut root = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for s in sets {
        apply_override(&mut root, s)?;
    }
    let mut cfg: HeroConfig = toml::Value::Table(root)
        .try_into()
        .map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.world.seed = s;
    }
    if let Some(n) = steps {
        cfg.train.max_steps = Some(n);
    }
    cfg.validate().map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
    Ok(cfg)
}

fn config_from(args: &ConfigArgs) -> CliResult<HeroConfig> {
    load_config(args.config.as_deref(), &args.sets, args.seed, args.steps)
}

fn create_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => fs::create_dir_all(d).map_err(fail),
        _ => Ok(()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(fail)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| fail(format!("{}: {e}", path.display())))
}

fn cmd_train(args: &ConfigArgs, out: &Path, loss_log: Option<&Path>, eval_every: Option<usize>, stdout: &mut dyn Write) -> CliResult<()> {
    let mut cfg = config_from(args)?;
    if eval_every.is_some() {
        cfg.eval.every = eval_every;
    }
    let mut log = match loss_log {
        Some(p) => {
            create_parent(p)?;
            Some(fs::File::create(p).map_err(|e| fail(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let eval_set = match cfg.eval.every {
        Some(_) => Some(held_out(&cfg).map_err(fail)?),
        None => None,
    };
    let hash = cfg.hash();
    writeln!(stdout, "training {} steps, config {}", cfg.train.total_steps(), &hash[..12]).map_err(fail)?;
    let (model, history) = fit(&cfg, |s, m| {
        if let Some(f) = log.as_mut() {
            let line = serde_json::to_string(s).map_err(|e| hero_core::tensor::TensorError::Invalid {
                op: "loss log",
                msg: e.to_string(),
            })?;
            writeln!(f, "{line}").map_err(|e| hero_core::tensor::TensorError::Invalid {
                op: "loss log",
                msg: e.to_string(),
            })?;
        }
        if let (Some(every), Some(set)) = (cfg.eval.every, eval_set.as_ref()) {
            if every > 0 && (s.step + 1) % every == 0 {
                let r = evaluate(m, set, QueryMode::Full, &hash)?;
                let _ = writeln!(stdout, "{}", table_row(&format!("step {}", s.step + 1), &r));
            }
        }
        Ok(())
    })
    .map_err(fail)?;
    save_checkpoint(out, &cfg, &model).map_err(fail)?;
    let last = history.last().map_or(f64::NAN, |s| s.loss);
    writeln!(stdout, "wrote {} after {} steps (final loss {last:.6})", out.display(), history.len()).map_err(fail)?;
    Ok(())
}

fn cmd_eval(checkpoint: &Path, episodes: Option<&Path>, out: Option<&Path>, no_text: bool, stdout: &mut dyn Write) -> CliResult<()> {
    let (cfg, model) = load_checkpoint::<f64>(checkpoint).map_err(fail)?;
    let eps = match episodes {
        Some(dir) => {
            let (world, eps) = load_episodes::<f64>(dir).map_err(fail)?;
            if (world.frames, world.grid, world.feature_dim) != (cfg.world.frames, cfg.world.grid, cfg.world.feature_dim) {
                return Err(CliError::Usage(format!(
                    "episode dump {} does not match the checkpoint's world shape",
                    dir.display()
                )));
            }
            eps
        }
        None => held_out(&cfg).map_err(fail)?,
    };
    let mode = if no_text { QueryMode::Zeroed } else { QueryMode::Full };
    let report = evaluate(&model, &eps, mode, &cfg.hash()).map_err(fail)?;
    let label = if no_text { "no text" } else { "HERO" };
    writeln!(stdout, "{}", table_header()).map_err(fail)?;
    writeln!(stdout, "{}", table_row(label, &report)).map_err(fail)?;
    writeln!(stdout, "episodes {}  mean IoU {:.4}", report.episodes, report.mean_iou).map_err(fail)?;
    if cfg.model.encoder.components.retrieval && !no_text {
        let r = retrieval_report(&model, &eps).map_err(fail)?;
        writeln!(
            stdout,
            "retrieval frame P {:.4}  R {:.4}  F1 {:.4}  clip overlap {:.4}",
            r.precision, r.recall, r.f1, r.clip_overlap
        )
        .map_err(fail)?;
    }
    if let Some(p) = out {
        write_json(p, &report)?;
    }
    Ok(())
}

fn cmd_gradcheck(tolerance: f64, seed: u64, stdout: &mut dyn Write) -> CliResult<()> {
    let entries = gradient_suite(seed).map_err(fail)?;
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for e in &entries {
        let ok = e.report.max_rel_error < tolerance;
        writeln!(stdout, "{:<24} {:>10.3e} {}", e.name, e.report.max_rel_error, if ok { "ok" } else { "FAIL" }).map_err(fail)?;
        worst = worst.max(e.report.max_rel_error);
        if !ok {
            failed.push(e.name.clone());
        }
    }
    writeln!(stdout, "max relative error {worst:.3e} over {} checks", entries.len()).map_err(fail)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failure(format!("gradient check failed for {}", failed.join(", "))))
    }
}

/// Averaged accuracies of one ablation variant.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub seeds: Vec<u64>,
    pub accuracy: [f64; 3],
    pub avg: f64,
    pub per_seed: Vec<EvalReportSummary>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReportSummary {
    pub seed: u64,
    pub accuracy: [f64; 3],
    pub avg: f64,
    pub mean_iou: f64,
}

/// Trains `variant` once per seed and averages the held-out accuracies.
pub fn run_ablation(base: &HeroConfig, variant: Variant, seeds: &[u64]) -> CliResult<AblationRow> {
    let mut per_seed = Vec::new();
    for &seed in seeds {
        let mut cfg = base.clone();
        variant.apply(&mut cfg);
        cfg.train.seed = seed;
        cfg.world.seed = seed;
        let (model, _) = fit(&cfg, |_, _| Ok(())).map_err(fail)?;
        let r: EvalReport = evaluate(&model, &held_out(&cfg).map_err(fail)?, QueryMode::Full, &cfg.hash()).map_err(fail)?;
        per_seed.push(EvalReportSummary {
            seed,
            accuracy: r.accuracy,
            avg: r.avg,
            mean_iou: r.mean_iou,
        });
    }
    let n = per_seed.len() as f64;
    let accuracy = [0, 1, 2].map(|k| per_seed.iter().map(|s| s.accuracy[k]).sum::<f64>() / n);
    Ok(AblationRow {
        variant,
        label: variant.label().to_string(),
        seeds: seeds.to_vec(),
        avg: accuracy.iter().sum::<f64>() / 3.0,
        accuracy,
        per_seed,
    })
}

/// Fixed-width row in percent, matching the eval table.
pub fn ablation_row_text(row: &AblationRow) -> String {
    format!(
        "{:<24} {:>6.1} {:>6.1} {:>6.1} {:>6.1}",
        row.label,
        100.0 * row.accuracy[0],
        100.0 * row.accuracy[1],
        100.0 * row.accuracy[2],
        100.0 * row.avg
    )
}

fn cmd_ablate(args: &ConfigArgs, variants: &[Variant], seeds: &[u64], out: Option<&Path>, stdout: &mut dyn Write) -> CliResult<()> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(CliError::Usage("ablate needs at least one variant and one seed".into()));
    }
    let base = config_from(args)?;
    writeln!(stdout, "{}", table_header()).map_err(fail)?;
    let mut rows = Vec::new();
    for &v in variants {
        let row = run_ablation(&base, v, seeds)?;
        writeln!(stdout, "{}", ablation_row_text(&row)).map_err(fail)?;
        rows.push(row);
    }
    if let Some(p) = out {
        write_json(p, &rows)?;
    }
    Ok(())
}

fn cmd_gen_data(args: &ConfigArgs, out: &Path, split: Split, count: Option<usize>, stdout: &mut dyn Write) -> CliResult<()> {
    let mut cfg = config_from(args)?;
    let eps = match split {
        Split::Train => {
            if let Some(n) = count {
                cfg.train.train_episodes = n;
            }
            training_pool(&cfg)
        }
        Split::Eval => {
            if let Some(n) = count {
                cfg.eval.episodes = n;
            }
            held_out(&cfg)
        }
    }
    .map_err(fail)?;
    save_episodes(out, &cfg.world, &eps).map_err(fail)?;
    writeln!(stdout, "wrote {} episodes to {}", eps.len(), out.display()).map_err(fail)?;
    Ok(())
}

/// Parses `argv` (program name first) and runs the command, writing
/// human-readable output to `stdout`. Returns the process exit code.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let target: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = write!(target, "{}", e.render());
            return code;
        }
    };
    let result = match &cli.command {
        Command::Train {
            cfg,
            out,
            loss_log,
            eval_every,
        } => cmd_train(cfg, out, loss_log.as_deref(), *eval_every, stdout),
        Command::Eval {
            checkpoint,
            episodes,
            out,
            no_text,
        } => cmd_eval(checkpoint, episodes.as_deref(), out.as_deref(), *no_text, stdout),
        Command::Gradcheck { tolerance, seed } => cmd_gradcheck(*tolerance, *seed, stdout),
        Command::Ablate {
            cfg,
            variants,
            seeds,
            out,
        } => cmd_ablate(cfg, variants, seeds, out.as_deref(), stdout),
        Command::GenData { cfg, out, split, count } => cmd_gen_data(cfg, out, *split, *count, stdout),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = load_config(
            None,
            &[
                "train.learning_rate=0.003".into(),
                "model.encoder.components.pyramid=false".into(),
                "train.optimizer=adam".into(),
                "model.proposal_scales=[3, 2]".into(),
            ],
            Some(9),
            Some(12),
        )
        .unwrap();
        assert_eq!(cfg.train.learning_rate, 0.003);
        assert!(!cfg.model.encoder.components.pyramid);
        assert_eq!(cfg.train.optimizer, hero_core::config::OptimizerKind::Adam);
        assert_eq!(cfg.model.proposal_scales, vec![3, 2]);
        assert_eq!((cfg.train.seed, cfg.world.seed, cfg.train.max_steps), (9, 9, Some(12)));
    }

    #[test]
    fn bad_overrides_are_usage_errors() {
        for bad in ["train.learning_rate", "train.nonsense=1", "train.learning_rate=-1.0", "world.frames=1"] {
            let e = load_config(None, &[bad.into()], None, None).unwrap_err();
            assert_eq!(e.code(), EXIT_USAGE, "{bad}");
        }
    }

    #[test]
    fn variants_toggle_single_components() {
        let base = HeroConfig::default();
        let mut c = base.clone();
        Variant::NoPyr.apply(&mut c);
        let comps = c.model.encoder.components;
        assert!(!comps.pyramid && comps.shifted && comps.retrieval && comps.hierarchy);
        let mut c = base;
        Variant::None.apply(&mut c);
        let comps = c.model.encoder.components;
        assert!(!comps.pyramid && !comps.shifted && !comps.retrieval && !comps.hierarchy);
    }
}
