use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::Rng;

use super::adadelta::{collect_grads, dropout_mask, AdaDelta, DEFAULT_CLIP, DEFAULT_EPS, DEFAULT_RHO};
use super::loss::{build_loss, evaluate_loss, LossBreakdown, Objective};
use crate::data::{make_batches, Batch, SentencePair, DEFAULT_BATCH_SIZE, DEFAULT_MAX_LEN};
use crate::error::{NmtError, Result};
use crate::model::{
    is_head_param, load_model, save_model, Init, Model, ModelDims, ModelVars, DEFAULT_EMB,
    DEFAULT_HID, DEFAULT_INIT_STD,
};
use crate::numerics::Tape;
use crate::rng::{stream_rng, Stream};

pub const LOSS_LOG: &str = "loss.tsv";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub objective: Objective,
    pub emb: usize,
    pub hid: usize,
    pub init_std: f64,
    pub batch_size: usize,
    pub max_len: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub dropout: f64,
    pub clip: f64,
    pub rho: f64,
    pub eps: f64,
    /// Epochs without validation L_T improvement before stopping.
    pub patience: usize,
    pub pretrain: Option<PathBuf>,
    /// Update every parameter when starting from a pretrained model;
    /// otherwise only the prediction heads.
    pub finetune_all: bool,
    pub out_dir: PathBuf,
    pub overwrite: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Base,
            emb: DEFAULT_EMB,
            hid: DEFAULT_HID,
            init_std: DEFAULT_INIT_STD,
            batch_size: DEFAULT_BATCH_SIZE,
            max_len: DEFAULT_MAX_LEN,
            max_epochs: 10,
            seed: 1234,
            dropout: 0.0,
            clip: DEFAULT_CLIP,
            rho: DEFAULT_RHO,
            eps: DEFAULT_EPS,
            patience: 3,
            pretrain: None,
            finetune_all: true,
            out_dir: PathBuf::from("run"),
            overwrite: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val_l_t: Option<f64>,
}

impl EpochLog {
    pub fn tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
        format!(
            "{}\t{:.6}\t{}\t{}\t{:.6}\t{}",
            self.epoch,
            self.train.l_t,
            opt(self.train.l_wpe),
            opt(self.train.l_wpd),
            self.train.composite,
            opt(self.val_l_t)
        )
    }
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation L_T (the last
    /// epoch when there is no validation data).
    pub model: Model<f32>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Builds the starting model: a pretrained checkpoint (heads re-initialized
/// fresh) or a fresh initialization.
pub fn initial_model(cfg: &TrainConfig, src_vocab: usize, tgt_vocab: usize) -> Result<Model<f32>> {
    let init = Init { std: cfg.init_std };
    let heads = cfg.objective.heads();
    let mut model = match &cfg.pretrain {
        Some(path) => {
            let loaded: Model<f32> = load_model(path)?;
            if loaded.dims.src_vocab != src_vocab || loaded.dims.tgt_vocab != tgt_vocab {
                return Err(NmtError::VocabMismatch(format!(
                    "{} has vocabularies {}/{}, data has {src_vocab}/{tgt_vocab}",
                    path.display(),
                    loaded.dims.src_vocab,
                    loaded.dims.tgt_vocab
                )));
            }
            info!("loaded pretrained parameters from {}", path.display());
            loaded.base_only()
        }
        None => Model::new(
            ModelDims::new(src_vocab, tgt_vocab, cfg.emb, cfg.hid),
            init,
            &mut stream_rng(cfg.seed, Stream::Init),
        ),
    };
    model.add_heads(heads, init, &mut stream_rng(cfg.seed, Stream::Heads));
    Ok(model)
}

/// Mean loss over batches, weighted by batch size.
pub fn corpus_loss(model: &Model<f32>, batches: &[Batch], objective: Objective) -> Result<LossBreakdown> {
    let total: usize = batches.iter().map(|b| b.size).sum();
    let mut acc = LossBreakdown::default();
    for b in batches {
        acc.accumulate(&evaluate_loss(model, b, objective)?, b.size as f64 / total as f64);
    }
    Ok(acc)
}

fn create_new(path: &Path, overwrite: bool) -> Result<File> {
    if path.exists() && !overwrite {
        return Err(NmtError::CheckpointExists(path.to_path_buf()));
    }
    File::create(path).map_err(|e| NmtError::file(path, e))
}

fn check_free(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(NmtError::CheckpointExists(path.to_path_buf()));
    }
    Ok(())
}

pub fn epoch_checkpoint(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch-{epoch:03}.ckpt"))
}

/// Runs the epoch loop. Writes one checkpoint per epoch, the loss log and
/// the best model to `cfg.out_dir`.
pub fn train(
    cfg: &TrainConfig,
    train_pairs: &[SentencePair],
    valid_pairs: &[SentencePair],
    src_vocab: usize,
    tgt_vocab: usize,
) -> Result<TrainOutcome> {
    if cfg.clip <= 0.0 {
        return Err(NmtError::Config(format!("clip norm must be positive, got {}", cfg.clip)));
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return Err(NmtError::Config(format!("dropout rate {} not in [0, 1)", cfg.dropout)));
    }
    fs::create_dir_all(&cfg.out_dir).map_err(|e| NmtError::file(&cfg.out_dir, e))?;
    let final_path = cfg.out_dir.join(FINAL_CHECKPOINT);
    check_free(&final_path, cfg.overwrite)?;
    for epoch in 1..=cfg.max_epochs {
        check_free(&epoch_checkpoint(&cfg.out_dir, epoch), cfg.overwrite)?;
    }
    let log_path = cfg.out_dir.join(LOSS_LOG);
    let mut log_file = create_new(&log_path, cfg.overwrite)?;
    writeln!(log_file, "epoch\tL_T\tL_WPE\tL_WPD\tcomposite\tval_L_T")?;

    let mut model = initial_model(cfg, src_vocab, tgt_vocab)?;
    let frozen_base = cfg.pretrain.is_some() && !cfg.finetune_all && cfg.objective != Objective::Base;
    info!(
        "training {} model: {} tensors, {} values{}",
        cfg.objective,
        model.params.len(),
        model.params.num_values(),
        if frozen_base { ", base parameters frozen" } else { "" }
    );

    let valid = make_batches(valid_pairs, cfg.batch_size, cfg.max_len, None)?;
    let mut shuffle_rng = stream_rng(cfg.seed, Stream::Shuffle);
    let mut dropout_rng = stream_rng(cfg.seed, Stream::Dropout);
    let mut opt = AdaDelta::new(cfg.rho, cfg.eps, cfg.clip);
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Model<f32>)> = None;
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        let batches = make_batches(train_pairs, cfg.batch_size, cfg.max_len, Some(shuffle_rng.gen()))?;
        if batches.is_empty() {
            return Err(NmtError::Empty("training data"));
        }
        let total: usize = batches.iter().map(|b| b.size).sum();
        let mut epoch_loss = LossBreakdown::default();
        for batch in &batches {
            let mut tape = Tape::new();
            let vars = ModelVars::bind(&mut tape, &model, |name| !frozen_base || is_head_param(name))?;
            let rate = cfg.dropout;
            let rng = &mut dropout_rng;
            let mut mask = |n: usize| dropout_mask::<f32, _>(n, rate, rng).expect("validated rate");
            let dropout: Option<&mut super::loss::DropoutFn<'_, f32>> =
                if rate > 0.0 { Some(&mut mask) } else { None };
            let graph = build_loss(&mut tape, &vars, batch, cfg.objective, dropout)?;
            let values = graph.values(&tape);
            if !values.composite.is_finite() {
                return Err(NmtError::NonFinite(format!("loss at epoch {epoch}")));
            }
            epoch_loss.accumulate(&values, batch.size as f64 / total as f64);
            let grads = collect_grads(&tape.backward(graph.composite)?);
            opt.step(&mut model.params, &grads)?;
        }

        let val_l_t = if valid.is_empty() {
            None
        } else {
            Some(corpus_loss(&model, &valid, Objective::Base)?.l_t)
        };
        let entry = EpochLog {
            epoch,
            train: epoch_loss,
            val_l_t,
        };
        info!("epoch {}", entry.tsv());
        writeln!(log_file, "{}", entry.tsv())?;
        save_model(&model, &epoch_checkpoint(&cfg.out_dir, epoch))?;
        log.push(entry);

        let score = val_l_t.unwrap_or(f64::NEG_INFINITY);
        match &best {
            Some((b, _, _)) if score >= *b && val_l_t.is_some() => {
                stale += 1;
                if stale >= cfg.patience {
                    info!("validation L_T stalled for {stale} epochs; stopping");
                    break;
                }
            }
            _ => {
                stale = 0;
                best = Some((score, epoch, model.clone()));
            }
        }
    }
    let (_, best_epoch, best_model) = match best {
        Some(b) => b,
        None => {
            warn!("no epochs were run");
            (0.0, 0, model)
        }
    };
    save_model(&best_model, &final_path)?;
    Ok(TrainOutcome {
        model: best_model,
        log,
        best_epoch,
    })
}
