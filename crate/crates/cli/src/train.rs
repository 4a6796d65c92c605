use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use serde::Deserialize;
use sparseattn::data::{gen_synthetic, Corpus};
use sparseattn::model::{train, ModelConfig, ModelParams, SparsityPlan, TrainConfig};
use sparseattn::schedule::{build_schedule, SparsityConfig, SparsityMode, CONFIG_NAMES, DEFAULT_RAMP_WIDTH};
use sparseattn::{checkpoint, Exec};

use crate::artifacts::{self, RunManifest, RunSummary};
use crate::Failure;

#[derive(Args)]
pub struct TrainArgs {
    /// One of the built-in names, or a TOML file with `mode`, `target`,
    /// optional `ramp_width` and `layers`.
    #[arg(long)]
    config: String,
    /// `synthetic`, a TSV file, or a directory with train.tsv and
    /// validation.tsv (or dev.tsv).
    #[arg(long, default_value = "synthetic")]
    data: String,
    #[arg(long, env = "SPARSEATTN_SEED", default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long)]
    out: PathBuf,
    /// Synthetic corpus size.
    #[arg(long, default_value_t = 2000)]
    size: usize,
    /// Vocabulary cap, including the two reserved tokens.
    #[arg(long, default_value_t = 1000)]
    vocab_size: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    /// Run every batch-level loop on the calling thread.
    #[arg(long)]
    sequential: bool,
}

const DESK_LAYERS: usize = 2;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    mode: SparsityMode,
    #[serde(default)]
    target: f64,
    ramp_width: Option<f64>,
    layers: Option<usize>,
}

fn resolve_config(arg: &str) -> Result<(String, SparsityConfig), Failure> {
    if let Some(cfg) = SparsityConfig::named(arg, DESK_LAYERS) {
        return Ok((arg.to_string(), cfg));
    }
    let path = Path::new(arg);
    if !path.is_file() {
        return Err(Failure::usage(format!(
            "unknown config {arg:?}; expected one of {} or a TOML file",
            CONFIG_NAMES.join(", ")
        )));
    }
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{arg}: {e}")))?;
    let file: ConfigFile = toml::from_str(&text).map_err(|e| Failure::usage(format!("{arg}: {}", e.message())))?;
    let ramp_width = match file.mode {
        SparsityMode::Adaptive => file.ramp_width.unwrap_or(DEFAULT_RAMP_WIDTH),
        _ => file.ramp_width.unwrap_or(0.0),
    };
    let cfg = SparsityConfig {
        mode: file.mode,
        target: file.target,
        ramp_width,
        layers: file.layers.unwrap_or(DESK_LAYERS),
    };
    let name = path
        .file_stem()
        .map_or("custom".into(), |s| s.to_string_lossy().into_owned());
    Ok((name, cfg))
}

pub fn run(args: TrainArgs) -> Result<(), Failure> {
    let (config_name, sparsity) = resolve_config(&args.config)?;
    let schedule = build_schedule(&sparsity)?;
    if args.epochs == 0 {
        return Err(Failure::usage("--epochs must be at least 1"));
    }

    let corpus = if args.data == "synthetic" {
        gen_synthetic(args.seed, args.size, args.vocab_size, args.max_len)?
    } else {
        Corpus::load(Path::new(&args.data), args.seed)?
    };
    let vocab = corpus.build_vocab(args.vocab_size);
    let (train_set, val_set) = corpus.encode(&vocab, args.max_len);

    let model = ModelConfig {
        layers: sparsity.layers,
        max_len: args.max_len,
        ..ModelConfig::desk(vocab.len(), args.seed)
    };
    let training = TrainConfig::desk(args.epochs, args.seed);
    let manifest = RunManifest {
        config_name: config_name.clone(),
        model,
        sparsity,
        training,
        seed: args.seed,
        corpus_source: corpus.source.clone(),
        out_dir: args.out.display().to_string(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
    };

    fs::create_dir_all(&args.out).map_err(|e| Failure::data(format!("{}: {e}", args.out.display())))?;
    artifacts::write_json(&args.out.join(artifacts::MANIFEST), &manifest)?;

    let exec = if args.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    let params = ModelParams::init(model)?;
    let plan = SparsityPlan::from_config(&sparsity)?;
    let started = Instant::now();
    let outcome = train(params, &plan, &train_set, &val_set, &training, exec, |r| {
        eprintln!(
            "{config_name} step {:>4} epoch {} train_loss {:.4} val_loss {:.4} val_acc {:.4} sparsity {:.4}",
            r.step, r.epoch, r.train_loss, r.val_loss, r.val_accuracy, r.mean_sparsity
        );
    })?;

    artifacts::write_metrics(&args.out.join(artifacts::METRICS), &outcome.records)?;
    let last = outcome.records.last().expect("train emits an initial record");
    let stats = &outcome.final_eval.stats;
    let summary = RunSummary {
        config_name: config_name.clone(),
        seed: args.seed,
        epochs: args.epochs,
        steps: last.step,
        param_count: outcome.params.param_count(),
        final_val_accuracy: outcome.final_eval.accuracy,
        final_val_loss: outcome.final_eval.loss,
        final_train_loss: last.train_loss,
        target_per_layer: schedule.per_layer.clone(),
        target_mean: schedule.mean(),
        per_layer_sparsity: stats.per_layer_sparsity.clone(),
        per_layer_head_sparsity: stats.per_layer_head_sparsity.clone(),
        mean_sparsity: stats.mean_sparsity,
        per_layer_entropy: stats.per_layer_entropy.clone(),
        per_head_entropy: stats.per_head_entropy.clone(),
        mean_entropy: stats.mean_entropy,
        entropy_base: stats.entropy_base.clone(),
    };
    artifacts::write_json(&args.out.join(artifacts::SUMMARY), &summary)?;
    checkpoint::save(&outcome.params, args.out.join(artifacts::CHECKPOINT))?;

    println!(
        "{config_name}: val_accuracy {:.4}, achieved sparsity per layer {:?} (target {:?}), {:.1}s",
        summary.final_val_accuracy,
        summary.per_layer_sparsity,
        summary.target_per_layer,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
