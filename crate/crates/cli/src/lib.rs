//! Experiment driver for `promptlab`: pretraining, single runs, sweeps,
//! few-shot comparisons and parameter counting, each writing CSV with the
//! resolved settings as `#` header lines.

pub mod config;
pub mod count;
pub mod experiment;
pub mod output;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use promptlab::pretrain::{copy_token_accuracy, pretrain, PretrainConfig};
use promptlab::prompt::{PromptDims, PromptKind};
use promptlab::trainer::Method;
use promptlab::{Backbone, BackboneConfig, Error, Result};

use config::{ExperimentConfig, Settings};
use experiment::SweepParam;
use output::write_atomic;

#[derive(Debug, Parser)]
#[command(name = "promptlab", version, about = "Soft-prompt tuning experiments on a small frozen transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain a backbone on the synthetic task mixture and save it.
    Pretrain(PretrainArgs),
    /// Tune one method on one task.
    Train(TrainArgs),
    /// Vary prompt length or bottleneck over several seeds.
    Sweep(SweepArgs),
    /// Compare methods on shared few-shot subsets.
    Fewshot(FewShotArgs),
    /// Print trainable-parameter counts.
    CountParams(CountArgs),
}

/// Settings shared by every training command. Each maps to a config key.
#[derive(Debug, Default, Args)]
pub struct SettingArgs {
    /// Key-value settings file; flags take precedence.
    #[arg(long, conflicts_with = "from_log")]
    pub config: Option<PathBuf>,
    /// Reuse the settings header of an earlier output file.
    #[arg(long)]
    pub from_log: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub task: Option<String>,
    /// Embedding width.
    #[arg(long = "e")]
    pub embed_dim: Option<usize>,
    /// Prompt length.
    #[arg(long = "c")]
    pub prompt_length: Option<usize>,
    /// Bottleneck of the decomposed prompt.
    #[arg(long = "b")]
    pub bottleneck: Option<usize>,
    /// Hidden width of the residual prompt network.
    #[arg(long = "h")]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub dev_size: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub probe_every: Option<usize>,
    #[arg(long)]
    pub target_std: Option<f64>,
}

impl SettingArgs {
    fn flags(&self) -> Result<Settings> {
        let mut s = Settings::default();
        let pairs: [(&str, Option<String>); 15] = [
            ("method", self.method.clone()),
            ("task", self.task.clone()),
            ("embed_dim", self.embed_dim.map(|v| v.to_string())),
            ("prompt_length", self.prompt_length.map(|v| v.to_string())),
            ("bottleneck", self.bottleneck.map(|v| v.to_string())),
            ("hidden", self.hidden.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("weight_decay", self.weight_decay.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("train_size", self.train_size.map(|v| v.to_string())),
            ("dev_size", self.dev_size.map(|v| v.to_string())),
            ("eval_every", self.eval_every.map(|v| v.to_string())),
            ("probe_every", self.probe_every.map(|v| v.to_string())),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                s.set(k, v)?;
            }
        }
        if let Some(v) = self.target_std {
            s.set("target_std", v.to_string())?;
        }
        Ok(s)
    }

    /// Defaults, then the file or earlier header, then flags.
    pub fn settings(&self) -> Result<Settings> {
        let mut s = match (&self.config, &self.from_log) {
            (Some(path), _) => Settings::read(path, false)?,
            (None, Some(path)) => Settings::read(path, true)?,
            (None, None) => Settings::default(),
        };
        s.merge(&self.flags()?);
        Ok(s)
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Checkpoint path to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub corpus_size: Option<usize>,
    #[arg(long)]
    pub max_prefix: Option<usize>,
    #[arg(long = "e")]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn: Option<usize>,
    /// Also write the per-step loss here.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub settings: SettingArgs,
    /// Pretrained backbone checkpoint.
    #[arg(long, required_unless_present = "dry_run")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Resolve settings and print the trainable count without training.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub settings: SettingArgs,
    /// bottleneck, length, shortprompt or overparam.
    #[arg(long)]
    pub param: String,
    /// Comma-separated values replacing the preset.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<usize>>,
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FewShotArgs {
    #[command(flatten)]
    pub settings: SettingArgs,
    #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
    pub k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "vanilla,dpt")]
    pub methods: Vec<String>,
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    /// Large-model profile; all profiles when no dimensions are given.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long = "e")]
    pub embed_dim: Option<usize>,
    #[arg(long = "c")]
    pub prompt_length: Option<usize>,
    #[arg(long = "b")]
    pub bottleneck: Option<usize>,
    #[arg(long = "h")]
    pub hidden: Option<usize>,
    /// One method; otherwise vanilla, dpt and residual.
    #[arg(long)]
    pub method: Option<String>,
    /// Construct each parameterization and compare against the formula.
    #[arg(long)]
    pub verify: bool,
}

/// Process exit code for an error: 1 for usage and configuration
/// problems, 2 for everything that fails at run time.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Usage(_) | Error::Config(_) => 1,
        _ => 2,
    }
}

/// Parses `args` (including the program name) and runs the command,
/// writing human-readable results to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            return say(out, format_args!("{e}"));
        }
        Err(e) => {
            let msg = e.to_string();
            return Err(Error::Usage(msg.strip_prefix("error: ").unwrap_or(&msg).trim_end().to_string()));
        }
    };
    execute(cli.command, out)
}

fn say(out: &mut dyn Write, text: std::fmt::Arguments<'_>) -> Result<()> {
    out.write_fmt(text).map_err(|e| Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    })
}

fn load_checkpoint(path: &Path, cfg: &mut ExperimentConfig, settings: &Settings) -> Result<Backbone> {
    let backbone = Backbone::load(path)?;
    if !backbone.is_frozen() {
        return Err(Error::Config(format!("{} is not a frozen checkpoint", path.display())));
    }
    experiment::adopt_backbone(cfg, settings, &backbone)?;
    Ok(backbone)
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Pretrain(a) => cmd_pretrain(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
        Command::Fewshot(a) => cmd_fewshot(a, out),
        Command::CountParams(a) => cmd_count_params(a, out),
    }
}

fn cmd_pretrain(a: PretrainArgs, out: &mut dyn Write) -> Result<()> {
    let d = PretrainConfig::default();
    let config = PretrainConfig {
        backbone: BackboneConfig {
            embed_dim: a.embed_dim.unwrap_or(d.backbone.embed_dim),
            n_layers: a.layers.unwrap_or(d.backbone.n_layers),
            n_heads: a.heads.unwrap_or(d.backbone.n_heads),
            ffn_dim: a.ffn.unwrap_or(d.backbone.ffn_dim),
            ..d.backbone.clone()
        },
        steps: a.steps.unwrap_or(d.steps),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        lr: a.lr.unwrap_or(d.lr),
        seed: a.seed.unwrap_or(d.seed),
        corpus_size: a.corpus_size.unwrap_or(d.corpus_size),
        max_prefix: a.max_prefix.unwrap_or(d.max_prefix),
        ..d
    };
    config.backbone.validate()?;
    let mut losses = String::from("step,loss\n");
    let backbone = pretrain(&config, &config.corpus(), |step, loss| {
        losses.push_str(&format!("{step},{loss}\n"));
        if step % 100 == 0 {
            log::info!("pretrain step {step}: loss {loss:.4}");
        }
    })?;
    write_atomic(&a.out, &backbone.to_bytes())?;
    if let Some(path) = &a.log {
        let header: String = config.echo().iter().map(|(k, v)| format!("# {k} = {v}\n")).collect();
        write_atomic(path, format!("{header}{losses}").as_bytes())?;
    }
    let acc = copy_token_accuracy(&backbone, 200, config.seed + 1)?;
    say(
        out,
        format_args!(
            "wrote {} ({} weights, checksum {:016x}); copy token accuracy {acc}\n",
            a.out.display(),
            backbone.parameter_count(),
            backbone.checksum()
        ),
    )
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let settings = a.settings.settings()?;
    let mut cfg = ExperimentConfig::resolve(&settings)?;
    let backbone = match &a.checkpoint {
        Some(path) if !a.dry_run => Some(load_checkpoint(path, &mut cfg, &settings)?),
        _ => None,
    };
    let count = match (cfg.trainable_params(), &backbone) {
        (Some(n), _) => Some(n),
        (None, Some(b)) => Some(b.parameter_count()),
        (None, None) => None,
    };
    if let Some(n) = count {
        say(out, format_args!("trainable parameters: {n}\n"))?;
    }
    let Some(backbone) = backbone else {
        return Ok(());
    };
    let (train, dev) = experiment::datasets(&cfg)?;
    let outcome = experiment::run_one(&backbone, &cfg, &train, &dev)?;
    let written = experiment::write_run(&a.out_dir, &cfg, &outcome)?;
    say(
        out,
        format_args!(
            "final dev accuracy {}; log {}\n",
            outcome.log.final_accuracy,
            written.log.display()
        ),
    )?;
    if let Some(p) = written.probes {
        say(out, format_args!("probe records {}\n", p.display()))?;
    }
    if let Some(p) = written.prompt {
        say(out, format_args!("exported prompt {}\n", p.display()))?;
    }
    if outcome.log.aborted {
        return Err(Error::Numerical("loss became non-finite; run aborted".into()));
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs, out: &mut dyn Write) -> Result<()> {
    let param = SweepParam::parse(&a.param)?;
    let settings = a.settings.settings()?;
    let mut cfg = ExperimentConfig::resolve(&settings)?;
    let backbone = load_checkpoint(&a.checkpoint, &mut cfg, &settings)?;
    let values = a.values.unwrap_or_else(|| param.preset());
    let points = experiment::sweep(&backbone, &cfg, param, &values, a.seeds)?;
    let path = a.out.unwrap_or_else(|| PathBuf::from(format!("sweep-{}.csv", param.name())));
    let header = format!("{}# sweep = {}\n# seeds = {}\n", cfg.header(), param.name(), a.seeds);
    write_atomic(&path, format!("{header}{}", experiment::sweep_csv(param, &points)).as_bytes())?;
    for p in &points {
        say(
            out,
            format_args!(
                "{} = {}: mean {:.4} (min {:.4}, max {:.4}), {} trainable\n",
                param.name(),
                p.value,
                p.mean(),
                p.min(),
                p.max(),
                p.trainable_params
            ),
        )?;
    }
    say(out, format_args!("wrote {}\n", path.display()))
}

fn cmd_fewshot(a: FewShotArgs, out: &mut dyn Write) -> Result<()> {
    let settings = a.settings.settings()?;
    let mut cfg = ExperimentConfig::resolve(&settings)?;
    let backbone = load_checkpoint(&a.checkpoint, &mut cfg, &settings)?;
    let methods = a.methods.iter().map(|m| Method::parse(m)).collect::<Result<Vec<_>>>()?;
    let rows = experiment::few_shot(&backbone, &settings, &a.k, a.seeds, &methods)?;
    let path = a.out.unwrap_or_else(|| PathBuf::from("fewshot.csv"));
    let header = format!("{}# seeds = {}\n", cfg.header(), a.seeds);
    let csv = experiment::few_shot_csv(&rows);
    write_atomic(&path, format!("{header}{csv}").as_bytes())?;
    say(out, format_args!("{csv}wrote {}\n", path.display()))
}

fn cmd_count_params(a: CountArgs, out: &mut dyn Write) -> Result<()> {
    let explicit = a.embed_dim.is_some() || a.prompt_length.is_some() || a.bottleneck.is_some() || a.hidden.is_some();
    let bases: Vec<PromptDims> = match (&a.profile, explicit) {
        (Some(p), _) => vec![count::profile(p)?],
        (None, false) => count::PROFILES.iter().map(|p| count::profile(p.0)).collect::<Result<_>>()?,
        (None, true) => vec![count::profile("t5-large")?],
    };
    let kinds = match &a.method {
        Some(m) => vec![PromptKind::parse(m).map_err(|_| Error::Usage(format!("unknown method {m:?}")))?],
        None => vec![PromptKind::Vanilla, PromptKind::Decomposed, PromptKind::Residual],
    };
    let mut rows = Vec::new();
    for base in bases {
        let dims = PromptDims {
            embed_dim: a.embed_dim.unwrap_or(base.embed_dim),
            length: a.prompt_length.unwrap_or(base.length),
            bottleneck: a.bottleneck.unwrap_or(base.bottleneck),
            hidden: a.hidden.unwrap_or(base.hidden),
        };
        for &kind in &kinds {
            rows.push(count::count(kind, dims, a.verify)?);
        }
    }
    say(out, format_args!("{}", count::render(&rows)))
}
