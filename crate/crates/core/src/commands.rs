//! The work behind each CLI subcommand. Output goes to a caller-supplied
//! writer so the commands can be exercised without a process boundary.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::RunConfig;
use crate::dataset::{
    leave_one_out_split, load_interactions, sample_train_negatives, sample_train_triples, HoldoutSet, ItemId,
    SplitBundle, UserId,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport};
use crate::features::{load_feature_store, FeatureDims, FeatureStore};
use crate::linalg::logistic;
use crate::model::{read_checkpoint, write_checkpoint, Checkpoint, Hyperparams, ModelShape, Predictor};
use crate::training::{
    finite_difference_check, probe_parameters, train, Batch, GradCheckOptions, GradCheckReport, TrainOptions,
    TrainReport,
};

/// Batch size used by the `gradcheck` subcommand.
pub const GRADCHECK_BATCH: usize = 32;

/// Loaded data for one run.
pub struct Pipeline {
    pub split: SplitBundle,
    /// Present for the feature-based variants only.
    pub store: Option<FeatureStore>,
}

/// Loads interactions and (when the variant needs them) item features, and
/// performs the seeded leave-one-out split.
pub fn prepare(cfg: &RunConfig) -> Result<Pipeline> {
    cfg.validate()?;
    let min = cfg.effective_min_interactions();
    if min != cfg.min_user_interactions {
        log::warn!(
            "min_user_interactions raised from {} to {min}: leave-one-out needs a train, validation and test item",
            cfg.min_user_interactions
        );
    }
    let data = load_interactions(&cfg.interactions, min)?;
    let split = leave_one_out_split(&data, cfg.hp.seed)?;
    let store = if cfg.variant.uses_visual() {
        let textual = if cfg.variant.uses_textual() || cfg.textual_features.is_some() {
            cfg.textual_features.as_deref()
        } else {
            None
        };
        let fallback = FeatureDims {
            visual: 0,
            textual: cfg.hp.feature_hidden_dim,
        };
        Some(load_feature_store(
            cfg.visual_features.as_deref(),
            textual,
            &split.full,
            fallback,
        )?)
    } else {
        None
    };
    log::info!(
        "{} users, {} items, {} train interactions",
        split.num_users(),
        split.num_items(),
        split.train.num_interactions()
    );
    Ok(Pipeline { split, store })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn out_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

/// Trains, writes the best checkpoint and the per-epoch report.
pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<TrainReport> {
    let pipeline = prepare(cfg)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let options = TrainOptions {
        loss: cfg.loss,
        max_epochs: cfg.max_epochs,
        patience: cfg.patience,
        checkpoint: None,
    };
    let (params, report) = match train(&pipeline.split, pipeline.store.as_ref(), &cfg.hp, cfg.variant, &options) {
        Ok(done) => done,
        Err(Error::Diverged { epoch, report }) => {
            write_file(&cfg.report_path(), &report.to_csv())?;
            return Err(Error::Diverged { epoch, report });
        }
        Err(e) => return Err(e),
    };
    write_checkpoint(
        &cfg.checkpoint_path(),
        &Checkpoint {
            params,
            hp: cfg.hp.clone(),
            num_users: pipeline.split.num_users(),
            loss: cfg.loss.name().to_owned(),
            meta: Default::default(),
        },
    )?;
    write_file(&cfg.report_path(), &report.to_csv())?;
    let best = report.best_epoch.map_or_else(|| "none".to_owned(), |e| e.to_string());
    writeln!(
        out,
        "trained {} for {} epochs (best epoch {best}, {:?}); checkpoint {}",
        cfg.variant,
        report.epochs.len(),
        report.stop_reason,
        cfg.checkpoint_path().display()
    )
    .map_err(out_err)?;
    Ok(report)
}

/// Reads a checkpoint and checks it against the configured run and data.
fn load_model(cfg: &RunConfig, checkpoint: &Path, split: &SplitBundle) -> Result<(Checkpoint, Hyperparams)> {
    let ckpt = read_checkpoint(checkpoint)?;
    if ckpt.params.variant != cfg.variant {
        return Err(Error::Config(format!(
            "checkpoint holds {} but the config asks for {}",
            ckpt.params.variant, cfg.variant
        )));
    }
    if ckpt.params.num_items() != split.num_items() || ckpt.num_users != split.num_users() {
        return Err(Error::Config(format!(
            "checkpoint was trained on {} users / {} items, data has {} / {}",
            ckpt.num_users,
            ckpt.params.num_items(),
            split.num_users(),
            split.num_items()
        )));
    }
    let hp = Hyperparams {
        top_n: cfg.hp.top_n.clone(),
        seed: cfg.hp.seed,
        ..ckpt.hp.clone()
    };
    Ok((ckpt, hp))
}

/// Test-split metrics for every configured cut-off, written to
/// `metrics.csv` in the output directory and echoed to `out`.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, out: &mut dyn Write) -> Result<EvalReport> {
    let pipeline = prepare(cfg)?;
    let (ckpt, hp) = load_model(cfg, checkpoint, &pipeline.split)?;
    let report = evaluate(
        &pipeline.split,
        pipeline.store.as_ref(),
        &ckpt.params,
        &hp,
        HoldoutSet::Test,
    )?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let csv = report.to_csv();
    write_file(&cfg.metrics_path(), &csv)?;
    out.write_all(csv.as_bytes()).map_err(out_err)?;
    Ok(report)
}

fn lookup_user(split: &SplitBundle, token: &str) -> Result<UserId> {
    split
        .full
        .user_ids()
        .lookup(token)
        .ok_or_else(|| Error::UnknownUser(token.to_owned()))
}

fn lookup_item(split: &SplitBundle, token: &str) -> Result<ItemId> {
    split
        .full
        .item_ids()
        .lookup(token)
        .ok_or_else(|| Error::UnknownItem(token.to_owned()))
}

/// Ranks every item the user has not interacted with and prints the top
/// `n` as `rank,item_id,probability`.
pub fn cmd_recommend(cfg: &RunConfig, checkpoint: &Path, user: &str, n: usize, out: &mut dyn Write) -> Result<()> {
    let pipeline = prepare(cfg)?;
    let split = &pipeline.split;
    let (ckpt, hp) = load_model(cfg, checkpoint, split)?;
    let u = lookup_user(split, user)?;
    let predictor = Predictor::new(&ckpt.params, &hp, split, pipeline.store.as_ref())?;
    let mut scored: Vec<(ItemId, f64)> = (0..split.num_items())
        .filter(|&i| !split.full.contains(u, i))
        .map(|i| predictor.score(u, i).map(|s| (i, s)))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if n > scored.len() {
        log::warn!(
            "requested {n} items but only {} are unseen by user {user}",
            scored.len()
        );
    }
    for (rank, (item, score)) in scored.iter().take(n).enumerate() {
        writeln!(
            out,
            "{},{},{:.6}",
            rank + 1,
            split.full.item_token(*item),
            logistic(*score)
        )
        .map_err(out_err)?;
    }
    Ok(())
}

/// Prints the target's predicted probability and the `top_m` history items
/// with the largest attention weights.
pub fn cmd_explain(
    cfg: &RunConfig,
    checkpoint: &Path,
    user: &str,
    item: &str,
    top_m: usize,
    out: &mut dyn Write,
) -> Result<()> {
    let pipeline = prepare(cfg)?;
    let split = &pipeline.split;
    let (ckpt, hp) = load_model(cfg, checkpoint, split)?;
    if !ckpt.params.variant.has_attention() {
        return Err(Error::UnsupportedVariant {
            variant: ckpt.params.variant.to_string(),
            operation: "interest relevance (variant has no attention)",
        });
    }
    let u = lookup_user(split, user)?;
    let target = lookup_item(split, item)?;
    let predictor = Predictor::new(&ckpt.params, &hp, split, pipeline.store.as_ref())?;
    let probability = predictor.probability(u, target)?;
    let weights = predictor.attention(u, target)?.top(top_m);
    writeln!(out, "# user={user} target={item} probability={probability:.6}").map_err(out_err)?;
    writeln!(out, "history_item,alpha").map_err(out_err)?;
    for (h, w) in weights.history.iter().zip(&weights.weights) {
        writeln!(out, "{},{w:.6}", split.full.item_token(*h)).map_err(out_err)?;
    }
    Ok(())
}

/// Finite-difference check of every gradient tensor on one batch, in
/// softplus mode. Uses the checkpoint's parameters when given, otherwise a
/// seeded probe point.
pub fn cmd_gradcheck(cfg: &RunConfig, checkpoint: Option<&Path>, out: &mut dyn Write) -> Result<GradCheckReport> {
    let pipeline = prepare(cfg)?;
    let split = &pipeline.split;
    let store = pipeline.store.as_ref();
    let (params, hp) = match checkpoint {
        Some(path) => {
            let (ckpt, hp) = load_model(cfg, path, split)?;
            (ckpt.params, hp.smooth())
        }
        None => {
            let hp = cfg.hp.smooth();
            let shape = ModelShape::for_data(cfg.variant, &hp, split.num_users(), split.num_items(), store);
            (probe_parameters(shape, hp.seed, 0.3), hp)
        }
    };
    let options = GradCheckOptions {
        seed: hp.seed,
        ..GradCheckOptions::default()
    };
    let report = if cfg.loss.is_pairwise() {
        let mut triples = sample_train_triples(split, hp.neg_ratio, hp.seed, 1)?;
        triples.truncate(GRADCHECK_BATCH);
        finite_difference_check(
            &params,
            &hp,
            Batch::Pairwise(&triples),
            cfg.loss,
            split,
            store,
            &options,
        )?
    } else {
        let mut instances = sample_train_negatives(split, hp.neg_ratio, hp.seed, 1)?;
        instances.truncate(GRADCHECK_BATCH);
        finite_difference_check(
            &params,
            &hp,
            Batch::Pointwise(&instances),
            cfg.loss,
            split,
            store,
            &options,
        )?
    };
    write!(out, "{report}").map_err(out_err)?;
    report.into_result()
}
