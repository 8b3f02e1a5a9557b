//! Command-line entry points wiring the modules into reproducible runs.
//!
//! Every command is a pure function of its flags, config file, input
//! bytes and seed; artifacts land under `--out` together with a
//! `config.echo` provenance file listing the effective configuration.
//!
//! Exit codes: 0 success, 2 usage/config, 3 data, 4 failed numerical
//! check.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::autodiff::{check_gradients, GradCheckConfig};
use crate::data::{
    self, synth, Dataset, LogFormat, DEFAULT_MIN_ITEM_SUPPORT, DEFAULT_MIN_SESSION_LEN,
};
use crate::error::{FgnnError, Result};
use crate::eval::{
    evaluate, evaluate_grouped, render_table, EvalReport, ItemKnnRanker, ModelRanker, PopRanker,
    SPopRanker, DEFAULT_KS,
};
use crate::model::{forward_logits, loss_on_tape, Architecture, ModelParams};
use crate::readout::ReadoutKind;
use crate::session_graph::SessionGraph;
use crate::train::{checkpoint, train, TrainingConfig};

#[derive(Debug, Parser)]
#[command(
    name = "fgnn",
    about = "Session-based next-item recommendation on session graphs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic click corpus as canonical CSV.
    Synth(SynthArgs),
    /// Ingest a click log, filter, split and augment it.
    Preprocess(PreprocessArgs),
    /// Train a model on a preprocessed dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint against the classical baselines.
    Evaluate(EvaluateArgs),
    /// Train and compare readout variants under one seed.
    Ablate(AblateArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(&args),
        Command::Preprocess(args) => cmd_preprocess(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
    }
}

// ── Flat key=value config files ──────────────────────────────────────

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_flat_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (line_no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            FgnnError::Usage(format!(
                "config line {}: expected 'key = value', got '{raw}'",
                line_no + 1
            ))
        })?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| FgnnError::Usage(format!("config key '{key}': invalid value '{value}'")))
}

/// Apply config-file pairs onto a training configuration; unknown keys
/// are usage errors naming the key.
pub fn apply_config_pairs(config: &mut TrainingConfig, pairs: &[(String, String)]) -> Result<()> {
    for (key, value) in pairs {
        match key.as_str() {
            "lr" => config.lr = parse_value(key, value)?,
            "decay_factor" => config.decay_factor = parse_value(key, value)?,
            "decay_every_epochs" => config.decay_every_epochs = parse_value(key, value)?,
            "schedule" => config.schedule = value.parse()?,
            "l2" => config.l2 = parse_value(key, value)?,
            "batch_size" => config.batch_size = parse_value(key, value)?,
            "epochs" => config.epochs = parse_value(key, value)?,
            "seed" => config.seed = parse_value(key, value)?,
            "adam_beta1" => config.adam_beta1 = parse_value(key, value)?,
            "adam_beta2" => config.adam_beta2 = parse_value(key, value)?,
            "adam_eps" => config.adam_eps = parse_value(key, value)?,
            "eval_each_epoch" => config.eval_each_epoch = parse_value(key, value)?,
            "embed_dim" => config.arch.embed_dim = parse_value(key, value)?,
            "layers" => config.arch.layers = parse_value(key, value)?,
            "heads" => config.arch.heads = parse_value(key, value)?,
            "readout_steps" => config.arch.readout_steps = parse_value(key, value)?,
            "combine" => config.arch.combine = value.parse()?,
            "readout" => config.arch.readout = value.parse()?,
            "edge_weight_norm" => config.arch.edge_weight_norm = value.parse()?,
            "selfloop_clamp" => config.arch.selfloop_clamp = parse_value(key, value)?,
            unknown => {
                return Err(FgnnError::Usage(format!("unknown config key '{unknown}'")));
            }
        }
    }
    Ok(())
}

fn write_echo(out_dir: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (key, value) in pairs {
        text.push_str(&format!("{key} = {value}\n"));
    }
    std::fs::write(out_dir.join("config.echo"), text)?;
    Ok(())
}

fn ensure_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

// ── synth ────────────────────────────────────────────────────────────

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    pub items: usize,
    #[arg(long, default_value_t = 2000)]
    pub sessions: usize,
    #[arg(long, default_value_t = 4)]
    pub min_len: usize,
    #[arg(long, default_value_t = 12)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0.04)]
    pub concentration: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let config = synth::SynthConfig {
        n_items: args.items,
        n_sessions: args.sessions,
        min_len: args.min_len,
        max_len: args.max_len,
        transition_concentration: args.concentration,
        seed: args.seed,
    };
    let sessions = synth::generate(&config)?;
    ensure_out_dir(&args.out)?;
    std::fs::write(
        args.out.join("corpus.csv"),
        synth::to_canonical_csv(&sessions),
    )?;
    write_echo(
        &args.out,
        &[
            ("items".into(), format!("{}", args.items)),
            ("sessions".into(), format!("{}", args.sessions)),
            ("min_len".into(), format!("{}", args.min_len)),
            ("max_len".into(), format!("{}", args.max_len)),
            ("concentration".into(), format!("{}", args.concentration)),
            ("seed".into(), format!("{}", args.seed)),
        ],
    )?;
    println!(
        "wrote {} sessions over {} items to {}",
        sessions.len(),
        args.items,
        args.out.join("corpus.csv").display()
    );
    Ok(())
}

// ── preprocess ───────────────────────────────────────────────────────

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "canonical")]
    pub format: String,
    #[arg(long, default_value_t = 0.1)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 1.0)]
    pub train_recency_fraction: f64,
    #[arg(long, default_value_t = DEFAULT_MIN_ITEM_SUPPORT)]
    pub min_item_support: usize,
    #[arg(long, default_value_t = DEFAULT_MIN_SESSION_LEN)]
    pub min_session_len: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_preprocess(args: &PreprocessArgs) -> Result<()> {
    let format: LogFormat = args.format.parse()?;
    let file = std::fs::File::open(&args.input)
        .map_err(|e| FgnnError::Data(format!("cannot open {}: {e}", args.input.display())))?;
    let outcome = data::load_events(std::io::BufReader::new(file), format)?;
    let sessions = data::sessionize(&outcome.events);
    let (filtered, vocab) = data::filter(&sessions, args.min_item_support, args.min_session_len)?;
    let dataset = data::temporal_split(
        filtered,
        vocab,
        args.test_fraction,
        args.train_recency_fraction,
    )?;
    ensure_out_dir(&args.out)?;
    dataset.save(&args.out)?;
    write_echo(
        &args.out,
        &[
            ("input".into(), args.input.display().to_string()),
            ("format".into(), args.format.clone()),
            ("test_fraction".into(), format!("{}", args.test_fraction)),
            (
                "train_recency_fraction".into(),
                format!("{}", args.train_recency_fraction),
            ),
            (
                "min_item_support".into(),
                format!("{}", args.min_item_support),
            ),
            (
                "min_session_len".into(),
                format!("{}", args.min_session_len),
            ),
        ],
    )?;
    let stats = &dataset.stats;
    println!("skipped_rows: {}", outcome.skipped_rows);
    println!("clicks: {}", stats.clicks);
    println!("train_sessions: {}", stats.train_sessions);
    println!("test_sessions: {}", stats.test_sessions);
    println!("items: {}", stats.items);
    println!("avg_length: {:.4}", stats.avg_length);
    println!("train_examples: {}", stats.train_examples);
    println!("test_examples: {}", stats.test_examples);
    println!("dropped_test_examples: {}", dataset.dropped_test_examples);
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Flat key=value config file; flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub readout_steps: Option<usize>,
    #[arg(long)]
    pub readout: Option<String>,
    #[arg(long)]
    pub combine: Option<String>,
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub eval_each_epoch: bool,
}

impl TrainArgs {
    /// defaults < config file < flags.
    pub fn effective_config(&self) -> Result<TrainingConfig> {
        let mut config = TrainingConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| FgnnError::Usage(format!("cannot read {}: {e}", path.display())))?;
            let pairs = parse_flat_config(&text)?;
            apply_config_pairs(&mut config, &pairs)?;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            config.epochs = epochs;
        }
        if let Some(lr) = self.lr {
            config.lr = lr;
        }
        if let Some(batch_size) = self.batch_size {
            config.batch_size = batch_size;
        }
        if let Some(l2) = self.l2 {
            config.l2 = l2;
        }
        if let Some(embed_dim) = self.embed_dim {
            config.arch.embed_dim = embed_dim;
        }
        if let Some(layers) = self.layers {
            config.arch.layers = layers;
        }
        if let Some(heads) = self.heads {
            config.arch.heads = heads;
        }
        if let Some(steps) = self.readout_steps {
            config.arch.readout_steps = steps;
        }
        if let Some(readout) = &self.readout {
            config.arch.readout = readout.parse()?;
        }
        if let Some(combine) = &self.combine {
            config.arch.combine = combine.parse()?;
        }
        if let Some(schedule) = &self.schedule {
            config.schedule = schedule.parse()?;
        }
        if self.eval_each_epoch {
            config.eval_each_epoch = true;
        }
        config.validate()?;
        Ok(config)
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let config = args.effective_config()?;
    let dataset = Dataset::load(&args.data)?;
    ensure_out_dir(&args.out)?;
    write_echo(&args.out, &config.flat_pairs())?;

    if config.epochs == 0 {
        // Nothing to optimize; still write an initialized checkpoint.
        let params = crate::train::init_model(&config, dataset.vocab.len())?;
        checkpoint::save(&params, None, &args.out.join("checkpoint.fgnn"))?;
        std::fs::write(args.out.join("epochs.jsonl"), "")?;
        println!("epochs=0: wrote initialized checkpoint, no steps taken");
        return Ok(());
    }

    let run = train(&config, &dataset)?;
    let mut log = String::new();
    for epoch in &run.epoch_log {
        log.push_str(&serde_json::to_string(epoch)?);
        log.push('\n');
        println!(
            "epoch {} lr {:.2e} loss/ex {:.4}{}",
            epoch.epoch,
            epoch.lr,
            epoch.loss_mean,
            match (epoch.recall20, epoch.mrr20) {
                (Some(r), Some(m)) => format!(" R@20 {r:.4} MRR@20 {m:.4}"),
                _ => String::new(),
            }
        );
    }
    std::fs::write(args.out.join("epochs.jsonl"), log)?;
    checkpoint::save(
        &run.params,
        Some(&run.state),
        &args.out.join("checkpoint.fgnn"),
    )?;
    println!("checkpoint: {}", args.out.join("checkpoint.fgnn").display());
    Ok(())
}

// ── evaluate ─────────────────────────────────────────────────────────

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated K values.
    #[arg(long, default_value = "5,10,20")]
    pub ks: String,
    #[arg(long, default_value_t = crate::eval::baselines::DEFAULT_KNN_LAMBDA)]
    pub knn_lambda: f64,
    /// Keep prefix items out of Item-KNN recommendations.
    #[arg(long)]
    pub exclude_seen: bool,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_ks(text: &str) -> Result<Vec<usize>> {
    let ks: Vec<usize> = text
        .split(',')
        .map(|tok| parse_value::<usize>("ks", tok.trim()))
        .collect::<Result<_>>()?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(FgnnError::Usage(format!("invalid K list '{text}'")));
    }
    Ok(ks)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let ks = parse_ks(&args.ks)?;
    let (params, _) = checkpoint::load(&args.checkpoint)?;
    let dataset = Dataset::load(&args.data)?;
    if dataset.test_examples.is_empty() {
        return Err(FgnnError::EmptyInput("dataset has no test examples".into()));
    }
    let vocab_size = dataset.vocab.len();
    if params.vocab_size() != vocab_size {
        return Err(FgnnError::Data(format!(
            "checkpoint vocabulary {} does not match dataset {}",
            params.vocab_size(),
            vocab_size
        )));
    }

    let mut reports: Vec<EvalReport> = Vec::new();
    reports.push(evaluate(
        &ModelRanker { params: &params },
        &dataset.test_examples,
        &ks,
    )?);
    let pop = PopRanker::fit(&dataset.train_sessions, vocab_size)?;
    reports.push(evaluate(&pop, &dataset.test_examples, &ks)?);
    let spop = SPopRanker::fit(&dataset.train_sessions, vocab_size)?;
    reports.push(evaluate(&spop, &dataset.test_examples, &ks)?);
    let knn = ItemKnnRanker::fit(&dataset.train_sessions, vocab_size, args.knn_lambda)?
        .with_exclude_seen(args.exclude_seen);
    reports.push(evaluate(&knn, &dataset.test_examples, &ks)?);

    ensure_out_dir(&args.out)?;
    let mut jsonl = String::new();
    for report in &reports {
        jsonl.push_str(&report.to_json_lines());
    }
    std::fs::write(args.out.join("report.jsonl"), jsonl)?;
    let table = render_table(&reports);
    std::fs::write(args.out.join("report.txt"), &table)?;
    write_echo(
        &args.out,
        &[
            ("checkpoint".into(), args.checkpoint.display().to_string()),
            ("data".into(), args.data.display().to_string()),
            ("ks".into(), args.ks.clone()),
            ("knn_lambda".into(), format!("{}", args.knn_lambda)),
            ("exclude_seen".into(), format!("{}", args.exclude_seen)),
        ],
    )?;
    print!("{table}");
    Ok(())
}

// ── ablate ───────────────────────────────────────────────────────────

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated readout variants to train and compare.
    #[arg(long, default_value = "set2set,mean,sum,max")]
    pub variants: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let variants: Vec<ReadoutKind> = args
        .variants
        .split(',')
        .map(|tok| tok.trim().parse())
        .collect::<Result<_>>()?;
    if variants.is_empty() {
        return Err(FgnnError::Usage("no readout variants given".into()));
    }

    let mut base = TrainingConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FgnnError::Usage(format!("cannot read {}: {e}", path.display())))?;
        apply_config_pairs(&mut base, &parse_flat_config(&text)?)?;
    }
    if let Some(seed) = args.seed {
        base.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        base.epochs = epochs;
    }
    base.validate()?;

    let dataset = Dataset::load(&args.data)?;
    if dataset.test_examples.is_empty() {
        return Err(FgnnError::EmptyInput("dataset has no test examples".into()));
    }

    ensure_out_dir(&args.out)?;
    let mut echo = base.flat_pairs();
    echo.push(("variants".into(), args.variants.clone()));
    write_echo(&args.out, &echo)?;

    let mut jsonl = String::new();
    let mut table_reports = Vec::new();
    for variant in &variants {
        let config = TrainingConfig {
            arch: Architecture {
                readout: *variant,
                ..base.arch.clone()
            },
            ..base.clone()
        };
        let run = train(&config, &dataset)?;
        let grouped = evaluate_grouped(
            &ModelRanker {
                params: &run.params,
            },
            &dataset.test_examples,
            &DEFAULT_KS,
        )?;
        for (group, report) in [
            ("overall", Some(&grouped.overall)),
            ("short", grouped.short.as_ref()),
            ("long", grouped.long.as_ref()),
        ] {
            if let Some(report) = report {
                for km in &report.at_k {
                    let line = serde_json::json!({
                        "variant": variant.as_str(),
                        "group": group,
                        "k": km.k,
                        "recall": km.recall,
                        "mrr": km.mrr,
                        "n_test": report.n_test,
                    });
                    jsonl.push_str(&line.to_string());
                    jsonl.push('\n');
                }
            }
        }
        let mut overall = grouped.overall.clone();
        overall.method = variant.as_str().to_string();
        table_reports.push(overall);
        if let Some(short) = grouped.short {
            let mut renamed = short;
            renamed.method = format!("{}[short]", variant.as_str());
            table_reports.push(renamed);
        }
        if let Some(long) = grouped.long {
            let mut renamed = long;
            renamed.method = format!("{}[long]", variant.as_str());
            table_reports.push(renamed);
        }
    }

    std::fs::write(args.out.join("ablation.jsonl"), jsonl)?;
    let table = render_table(&table_reports);
    std::fs::write(args.out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

// ── gradcheck ────────────────────────────────────────────────────────

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 6)]
    pub vocab: usize,
    #[arg(long, default_value_t = 8)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub readout_steps: usize,
}

/// Finite-difference check of the full model loss on a toy
/// architecture; exits nonzero (code 4) when any parameter disagrees.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let report = gradcheck_model(args)?;
    let cfg = GradCheckConfig::default();
    if report.passed(cfg.tolerance) {
        println!(
            "PASS, max rel err {:.3e} <= {:.0e} over {} entries",
            report.max_rel_err, cfg.tolerance, report.checked
        );
        Ok(())
    } else {
        let (name, index, analytic, numeric) =
            report.worst.clone().unwrap_or(("?".into(), 0, 0.0, 0.0));
        Err(FgnnError::NumericalCheck(format!(
            "max rel err {:.3e} > {:.0e} at {name}[{index}] (analytic {analytic:.6e}, numeric {numeric:.6e})",
            report.max_rel_err, cfg.tolerance
        )))
    }
}

/// The underlying check, reusable from tests.
pub fn gradcheck_model(args: &GradcheckArgs) -> Result<crate::autodiff::GradCheckReport> {
    use rand::SeedableRng;
    let arch = Architecture {
        embed_dim: args.embed_dim,
        layers: args.layers,
        heads: args.heads,
        readout_steps: args.readout_steps,
        ..Architecture::default()
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
    let params = ModelParams::init(&arch, args.vocab, &mut rng)?;
    // A duplicate-bearing session touching a handful of items.
    let sequence: Vec<usize> = vec![0, 1, 2, 1, 4.min(args.vocab - 1)];
    let graph = SessionGraph::build(&sequence)?;
    let label = 3.min(args.vocab - 1);

    let named: Vec<(String, crate::autodiff::Tensor)> = params
        .named_parameters()
        .into_iter()
        .map(|(name, t)| (name, t.clone()))
        .collect();
    let cfg = GradCheckConfig::default();
    check_gradients(
        &named,
        |tape, ids| {
            let binding = params.binding_from_ids(ids);
            let logits = forward_logits(tape, &arch, &binding, &graph)?;
            loss_on_tape(tape, logits, label)
        },
        &cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_config_parses_and_rejects() {
        let pairs = parse_flat_config("lr = 0.01\n# comment\nbatch_size=5\n").unwrap();
        assert_eq!(pairs.len(), 2);
        let mut config = TrainingConfig::default();
        apply_config_pairs(&mut config, &pairs).unwrap();
        assert_eq!(config.lr, 0.01);
        assert_eq!(config.batch_size, 5);

        assert!(parse_flat_config("just words\n").is_err());
        let bad = vec![("no_such_key".to_string(), "1".to_string())];
        match apply_config_pairs(&mut config, &bad) {
            Err(FgnnError::Usage(message)) => assert!(message.contains("no_such_key")),
            other => panic!("expected usage error, got {other:?}"),
        }
        let bad = vec![("lr".to_string(), "fast".to_string())];
        match apply_config_pairs(&mut config, &bad) {
            Err(FgnnError::Usage(message)) => assert!(message.contains("lr")),
            other => panic!("expected usage error, got {other:?}"),
        }
    }

    #[test]
    fn ks_parser_validates() {
        assert_eq!(parse_ks("5,10,20").unwrap(), vec![5, 10, 20]);
        assert!(parse_ks("5,x").is_err());
        assert!(parse_ks("0").is_err());
    }

    #[test]
    fn gradcheck_defaults_pass() {
        let args = GradcheckArgs {
            seed: 0,
            vocab: 6,
            embed_dim: 4,
            layers: 1,
            heads: 2,
            readout_steps: 2,
        };
        let report = gradcheck_model(&args).unwrap();
        assert!(report.passed(1e-4), "{report:?}");
    }
}
