//! Command-line front end: `synth`, `train`, `eval`, `recommend`, `export`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::compat::StyleModel;
use crate::corpus::{
    load_items, load_pairs, load_pretrained_embeddings, sample_negatives, split_dataset, VocabMode,
};
use crate::error::Error;
use crate::metrics::roc_auc;
use crate::recommend::{export_index, hits_to_csv, topk_pruned, transform_query, StyleIndex};
use crate::rng::{self, tags};
use crate::sentmodel::{EncoderHyperParams, InitScales, LevelSpec};
use crate::synth::{generate, SynthConfig};
use crate::trainer::{evaluate_auc, predict, train_with, TrainConfig, TrainHooks};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_USAGE,
            Error::NonFinite { .. } => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn data_error(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_DATA,
        message: message.into(),
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "stylematch",
    version,
    about = "Style-compatibility matching of item titles"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic catalog and labelled pairs
    Synth(SynthArgs),
    /// Train a model and write the best checkpoint plus per-epoch metrics
    Train(TrainArgs),
    /// Report AUC of a checkpoint on labelled pairs
    Eval(EvalArgs),
    /// Rank the most compatible items for a query item
    Recommend(RecommendArgs),
    /// Export item vectors to an index file
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output items file
    #[arg(long)]
    pub items: PathBuf,
    /// Output pairs file
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub groups: usize,
    #[arg(long, default_value_t = 10)]
    pub tokens_per_group: usize,
    #[arg(long, default_value_t = 200)]
    pub noise_pool: usize,
    #[arg(long, default_value_t = 2000)]
    pub item_count: usize,
    #[arg(long, default_value_t = 20_000)]
    pub pair_count: usize,
    /// Group tokens per title
    #[arg(long, default_value_t = 3)]
    pub style_tokens: usize,
    /// Noise tokens per title
    #[arg(long, default_value_t = 3)]
    pub noise_tokens: usize,
    /// Probability that two distinct groups are compatible
    #[arg(long, default_value_t = 0.5)]
    pub relation_density: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_level(s: &str) -> Result<LevelSpec, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [m, k, maps] = parts[..] else {
        return Err(format!("expected \"m,k,K\", got {s:?}"));
    };
    let num = |v: &str| {
        v.parse::<usize>()
            .map_err(|_| format!("not a positive integer: {v:?}"))
    };
    Ok(LevelSpec::new(num(m)?, num(k)?, num(maps)?))
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Word embedding dimension d
    #[arg(long, default_value_t = 100)]
    pub embed_dim: usize,
    /// Representation dimension n
    #[arg(long, default_value_t = 100)]
    pub repr_dim: usize,
    /// Convolution level "m,k,K" (filter size, pool size, feature maps);
    /// repeat once per level [default: 3,5,100 then 2,3,100]
    #[arg(long = "level", value_parser = parse_level)]
    pub levels: Vec<LevelSpec>,
    /// Dropout rate on the flattened representation
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f64,
    /// Half-width of the uniform embedding initialisation
    #[arg(long, default_value_t = 0.05)]
    pub init_embed_range: f64,
    /// Multiplier on the Glorot limit of the filter banks
    #[arg(long, default_value_t = 1.0)]
    pub init_filter_gain: f64,
    /// Multiplier on the Glorot limit of the dense matrix H
    #[arg(long, default_value_t = 1.0)]
    pub init_dense_gain: f64,
}

impl ModelArgs {
    pub fn init_scales(&self) -> InitScales {
        InitScales {
            embedding_range: self.init_embed_range,
            filter_gain: self.init_filter_gain,
            dense_gain: self.init_dense_gain,
        }
    }

    pub fn hyper(&self) -> EncoderHyperParams {
        let levels = if self.levels.is_empty() {
            EncoderHyperParams::default().levels
        } else {
            self.levels.clone()
        };
        EncoderHyperParams {
            embed_dim: self.embed_dim,
            levels,
            repr_dim: self.repr_dim,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub items: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    /// Where to write the best checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Per-epoch metrics CSV [default: <checkpoint>.metrics.csv]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// Epochs without a new best validation loss before stopping
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    /// Adagrad learning rate
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub adagrad_eps: f64,
    /// Starting value of the Adagrad squared-gradient accumulators
    #[arg(long, default_value_t = 0.0)]
    pub adagrad_init: f64,
    /// Gradient worker threads per batch
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// word2vec-style text file used to initialise embeddings
    #[arg(long)]
    pub pretrained_embeddings: Option<PathBuf>,
    /// Write 0 in the seconds column so repeated runs produce identical files
    #[arg(long)]
    pub no_timing: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub items: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    /// Per-pair scores CSV
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RecommendArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub items: PathBuf,
    /// Query item id
    #[arg(long)]
    pub query: String,
    #[arg(long, short = 'k', default_value_t = 10)]
    pub k: usize,
    /// Prebuilt index from `export`; built from the items file when absent
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Output CSV [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub items: PathBuf,
    /// Index file to write
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => {
            let auc = cmd_eval(&a)?;
            println!("AUC {auc:.4}");
            Ok(())
        }
        Command::Recommend(a) => {
            let csv = cmd_recommend(&a)?;
            match &a.out {
                Some(p) => write(p, csv.as_bytes()),
                None => {
                    print!("{csv}");
                    Ok(())
                }
            }
        }
        Command::Export(a) => cmd_export(&a),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e).into())
}

pub fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    let config = SynthConfig {
        groups: a.groups,
        tokens_per_group: a.tokens_per_group,
        noise_pool: a.noise_pool,
        items: a.item_count,
        pairs: a.pair_count,
        style_tokens: a.style_tokens,
        noise_tokens: a.noise_tokens,
        relation_density: a.relation_density,
        seed: a.seed,
    };
    let data = generate(&config)?;
    write(&a.items, data.items_tsv().as_bytes())?;
    write(&a.pairs, data.pairs_tsv().as_bytes())
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub negatives_sampled: usize,
    pub split_sizes: (usize, usize, usize),
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub test_auc: Option<f64>,
}

pub fn cmd_train(a: &TrainArgs) -> Result<TrainSummary, CliError> {
    let hyper = a.model.hyper();
    hyper.validate()?;
    a.model.init_scales().validate()?;
    let config = TrainConfig {
        batch_size: a.batch_size,
        max_epochs: a.epochs,
        patience: a.patience,
        learning_rate: a.lr,
        adagrad_epsilon: a.adagrad_eps,
        adagrad_initial_accumulator: a.adagrad_init,
        seed: a.seed,
        workers: a.workers,
    };
    config.validate()?;

    let (catalog, vocab) = load_items(&a.items, VocabMode::Build, None)?;
    let mut examples = load_pairs(&a.pairs, &catalog)?;
    if examples.is_empty() {
        return Err(data_error(format!("{}: no pairs", a.pairs.display())));
    }
    let mut negatives_sampled = 0;
    if examples.iter().all(|e| e.is_positive()) {
        let negatives = sample_negatives(&examples, &catalog, a.seed)?;
        negatives_sampled = negatives.len();
        examples.extend(negatives);
    }
    let split = split_dataset(&examples, (0.8, 0.1, 0.1), a.seed)?;

    let pretrained = match &a.pretrained_embeddings {
        Some(p) => {
            let table = load_pretrained_embeddings(p, &vocab, hyper.embed_dim)?;
            eprintln!(
                "pretrained embeddings cover {:.1}% of the vocabulary",
                100.0 * table.coverage
            );
            Some(table)
        }
        None => None,
    };
    let model = StyleModel::<f32>::init_with(
        hyper,
        vocab.len(),
        &mut rng::stream(a.seed, &[tags::INIT]),
        pretrained.as_ref(),
        &a.model.init_scales(),
    )?;

    let hooks = TrainHooks {
        validator: None,
        on_epoch: Some(Box::new(|r: &crate::trainer::EpochRecord| {
            eprintln!(
                "epoch {:>3}  train {:.4}  val {:.4}  auc {:.4}  {:.1}s",
                r.epoch, r.train_loss, r.val_loss, r.val_auc, r.seconds
            );
        })),
    };
    let outcome = train_with(
        model,
        &catalog,
        &split.train,
        &split.validation,
        &config,
        hooks,
    )?;

    let checkpoint = Checkpoint::new(vocab, outcome.model)?;
    save_checkpoint(&a.checkpoint, &checkpoint)?;
    let metrics_path = a
        .out
        .clone()
        .unwrap_or_else(|| a.checkpoint.with_extension("metrics.csv"));
    write(
        &metrics_path,
        outcome.history.to_csv(!a.no_timing).as_bytes(),
    )?;

    let test_auc = evaluate_auc(&checkpoint.model, &catalog, &split.test).ok();
    if let Some(auc) = test_auc {
        eprintln!("best epoch {} ; test AUC {auc:.4}", outcome.best_epoch);
    }
    Ok(TrainSummary {
        negatives_sampled,
        split_sizes: (split.train.len(), split.validation.len(), split.test.len()),
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.epochs.len(),
        test_auc,
    })
}

fn load_model_and_items(
    checkpoint: &Path,
    items: &Path,
) -> Result<(Checkpoint, crate::corpus::ItemCatalog), CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let (catalog, _) = load_items(items, VocabMode::Frozen, Some(ckpt.vocab.clone()))?;
    Ok((ckpt, catalog))
}

/// Returns the AUC and writes per-pair probabilities when `--out` is given.
pub fn cmd_eval(a: &EvalArgs) -> Result<f64, CliError> {
    let (ckpt, catalog) = load_model_and_items(&a.checkpoint, &a.items)?;
    let pairs = load_pairs(&a.pairs, &catalog)?;
    let probs = predict(&ckpt.model, &catalog, &pairs)?;
    let labels: Vec<u8> = pairs.iter().map(|p| p.label).collect();
    let auc = roc_auc(&probs, &labels)?;
    if let Some(out) = &a.out {
        let mut csv = String::from("query_id,cand_id,label,probability\n");
        for (p, prob) in pairs.iter().zip(&probs) {
            let _ = writeln!(
                csv,
                "{},{},{},{:.9}",
                catalog.id(p.query),
                catalog.id(p.cand),
                p.label,
                prob
            );
        }
        write(out, csv.as_bytes())?;
    }
    Ok(auc)
}

/// Returns the ranked CSV for the query item, which is never among its own
/// recommendations.
pub fn cmd_recommend(a: &RecommendArgs) -> Result<String, CliError> {
    if a.k == 0 {
        return Err(CliError {
            code: EXIT_USAGE,
            message: "K must be >= 1".into(),
        });
    }
    let (ckpt, catalog) = load_model_and_items(&a.checkpoint, &a.items)?;
    let qpos = catalog.position(&a.query).ok_or_else(|| {
        data_error(format!(
            "unknown query item {:?} in {}",
            a.query,
            a.items.display()
        ))
    })?;
    let index = match &a.index {
        Some(p) => StyleIndex::load(p)?,
        None => export_index(&ckpt.model, &catalog)?,
    };
    if index.dim() != ckpt.model.repr_dim() {
        return Err(data_error(format!(
            "index dimension {} does not match checkpoint dimension {}",
            index.dim(),
            ckpt.model.repr_dim()
        )));
    }
    let x_q = ckpt.model.encode(catalog.title(qpos))?;
    let tq = transform_query(&ckpt.model.compat, &x_q)?;
    let self_in_index = index.position(&a.query).is_some();
    let mut hits = topk_pruned(&index, &tq, a.k + usize::from(self_in_index))?;
    hits.retain(|h| h.item_id != a.query);
    hits.truncate(a.k);
    Ok(hits_to_csv(&hits, ckpt.model.compat.bias as f64))
}

pub fn cmd_export(a: &ExportArgs) -> Result<(), CliError> {
    let (ckpt, catalog) = load_model_and_items(&a.checkpoint, &a.items)?;
    if a.out.exists() {
        if let Ok(existing) = StyleIndex::load(&a.out) {
            if existing.dim() != ckpt.model.repr_dim() {
                return Err(data_error(format!(
                    "{}: existing index has dimension {}, checkpoint has {}",
                    a.out.display(),
                    existing.dim(),
                    ckpt.model.repr_dim()
                )));
            }
        }
    }
    let index = export_index(&ckpt.model, &catalog)?;
    index.save(&a.out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_parsing() {
        assert_eq!(parse_level("3,5,100").unwrap(), LevelSpec::new(3, 5, 100));
        assert_eq!(parse_level(" 2, 3 ,8").unwrap(), LevelSpec::new(2, 3, 8));
        assert!(parse_level("3,5").is_err());
        assert!(parse_level("a,b,c").is_err());
    }

    #[test]
    fn defaults_match_documented_settings() {
        let cli = Cli::try_parse_from([
            "stylematch",
            "train",
            "--items",
            "i",
            "--pairs",
            "p",
            "--checkpoint",
            "c",
        ])
        .unwrap();
        let Command::Train(t) = cli.command else {
            panic!()
        };
        assert_eq!(t.model.hyper(), EncoderHyperParams::default());
        assert_eq!(
            (t.batch_size, t.epochs, t.patience, t.workers),
            (256, 20, 5, 1)
        );
        assert_eq!((t.lr, t.adagrad_eps), (0.01, 1e-6));
    }

    #[test]
    fn repeated_levels() {
        let cli = Cli::try_parse_from([
            "stylematch",
            "train",
            "--items",
            "i",
            "--pairs",
            "p",
            "--checkpoint",
            "c",
            "--level",
            "3,4,3",
            "--level",
            "2,2,3",
            "--embed-dim",
            "6",
        ])
        .unwrap();
        let Command::Train(t) = cli.command else {
            panic!()
        };
        let h = t.model.hyper();
        assert_eq!(
            h.levels,
            vec![LevelSpec::new(3, 4, 3), LevelSpec::new(2, 2, 3)]
        );
        assert_eq!(h.embed_dim, 6);
    }
}
