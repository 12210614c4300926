use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};

use super::config::RunConfig;
use crate::data::{
    encode_pairs, gen_synthetic, read_parallel, read_tokenized, write_lines, SyntheticTask,
    TokenPair, Vocabulary, EOS,
};
use crate::decoding::{predicted_distribution, translate_corpus, DecodeOptions, TimingReport};
use crate::error::{NmtError, Result};
use crate::evaluation::{
    bleu, export_heatmap, rank_ids, token_accuracy, wp_precision_recall, EvalReport,
};
use crate::model::{load_model, Model};
use crate::training::{
    check_objectives, gradcheck_setup, train, Objective, TrainConfig, GRADCHECK_STEP,
    GRADCHECK_TOL,
};

pub const SRC_VOCAB_FILE: &str = "src.vocab";
pub const TGT_VOCAB_FILE: &str = "tgt.vocab";

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let (train_raw, valid_raw) = training_data(cfg)?;
    let out_dir = PathBuf::from(cfg.str("out-dir"));
    let pretrain = cfg.path("pretrain");
    let (src_vocab, tgt_vocab) = match &pretrain {
        Some(ckpt) => load_vocabs(cfg, ckpt)?,
        None => {
            let size = cfg.parse("vocab-size")?;
            (
                Vocabulary::build(train_raw.iter().map(|p| &p.0), size)?,
                Vocabulary::build(train_raw.iter().map(|p| &p.1), size)?,
            )
        }
    };
    let max_len = cfg.parse("max-len")?;
    let train_pairs = encode_pairs(&train_raw, &src_vocab, &tgt_vocab, max_len);
    let valid_pairs = encode_pairs(&valid_raw, &src_vocab, &tgt_vocab, max_len);
    info!(
        "{} training and {} validation pairs; vocabularies {}/{}",
        train_pairs.len(),
        valid_pairs.len(),
        src_vocab.len(),
        tgt_vocab.len()
    );
    let tc = TrainConfig {
        objective: cfg.parse("objective")?,
        emb: cfg.parse("emb")?,
        hid: cfg.parse("hid")?,
        init_std: cfg.parse("init-std")?,
        batch_size: cfg.parse("batch-size")?,
        max_len,
        max_epochs: cfg.parse("epochs")?,
        seed: cfg.parse("seed")?,
        dropout: cfg.parse("dropout")?,
        clip: cfg.parse("clip")?,
        rho: cfg.parse("rho")?,
        eps: cfg.parse("eps")?,
        patience: cfg.parse("patience")?,
        pretrain,
        finetune_all: cfg.bool("finetune-all")?,
        out_dir: out_dir.clone(),
        overwrite: cfg.bool("overwrite")?,
    };
    let outcome = train(&tc, &train_pairs, &valid_pairs, src_vocab.len(), tgt_vocab.len())?;
    src_vocab.save(&out_dir.join(SRC_VOCAB_FILE))?;
    tgt_vocab.save(&out_dir.join(TGT_VOCAB_FILE))?;
    let best = outcome.log.iter().find(|e| e.epoch == outcome.best_epoch);
    println!(
        "trained {} epochs; best epoch {} (validation L_T {}); model in {}",
        outcome.log.len(),
        outcome.best_epoch,
        best.and_then(|e| e.val_l_t).map_or("-".into(), |v| format!("{v:.4}")),
        out_dir.display()
    );
    Ok(())
}

fn training_data(cfg: &RunConfig) -> Result<(Vec<TokenPair>, Vec<TokenPair>)> {
    if !cfg.str("task").is_empty() {
        let task: SyntheticTask = cfg.str("task").parse()?;
        let n_train: usize = cfg.parse("task-train")?;
        let n_valid: usize = cfg.parse("task-valid")?;
        let mut all = gen_synthetic(
            task,
            n_train + n_valid,
            cfg.parse("task-vocab")?,
            cfg.parse("task-min-len")?..=cfg.parse("task-max-len")?,
            cfg.parse("seed")?,
        )?;
        let valid = all.split_off(n_train);
        return Ok((all, valid));
    }
    let train = read_parallel(&cfg.require_path("train-src")?, &cfg.require_path("train-tgt")?)?;
    let valid = match (cfg.path("valid-src"), cfg.path("valid-tgt")) {
        (Some(s), Some(t)) => read_parallel(&s, &t)?,
        (None, None) => Vec::new(),
        _ => {
            return Err(NmtError::Config(
                "`valid-src` and `valid-tgt` must be given together".into(),
            ))
        }
    };
    Ok((train, valid))
}

/// Vocabularies from explicit paths, or stored next to `checkpoint`.
fn load_vocabs(cfg: &RunConfig, checkpoint: &Path) -> Result<(Vocabulary, Vocabulary)> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let src = cfg.path("src-vocab").unwrap_or_else(|| dir.join(SRC_VOCAB_FILE));
    let tgt = cfg.path("tgt-vocab").unwrap_or_else(|| dir.join(TGT_VOCAB_FILE));
    Ok((Vocabulary::load(&src)?, Vocabulary::load(&tgt)?))
}

fn checkpoints(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let ensemble = cfg.list("ensemble");
    if !ensemble.is_empty() {
        return Ok(ensemble.into_iter().map(PathBuf::from).collect());
    }
    Ok(vec![cfg.require_path("checkpoint")?])
}

fn load_models(paths: &[PathBuf], src: &Vocabulary, tgt: &Vocabulary) -> Result<Vec<Model<f32>>> {
    paths
        .iter()
        .map(|p| {
            let m: Model<f32> = load_model(p)?;
            if m.dims.src_vocab != src.len() || m.dims.tgt_vocab != tgt.len() {
                return Err(NmtError::VocabMismatch(format!(
                    "{} expects vocabularies {}/{}, loaded {}/{}",
                    p.display(),
                    m.dims.src_vocab,
                    m.dims.tgt_vocab,
                    src.len(),
                    tgt.len()
                )));
            }
            Ok(m)
        })
        .collect()
}

/// Models and vocabularies for decoding-style commands.
fn decoding_setup(cfg: &RunConfig) -> Result<(Vec<Model<f32>>, Vocabulary, Vocabulary)> {
    let paths = checkpoints(cfg)?;
    let (src, tgt) = load_vocabs(cfg, &paths[0])?;
    let models = load_models(&paths, &src, &tgt)?;
    Ok((models, src, tgt))
}

fn emit(path: Option<PathBuf>, lines: &[String]) -> Result<()> {
    match path {
        Some(p) => write_lines(&p, lines),
        None => {
            let mut out = std::io::stdout().lock();
            for l in lines {
                writeln!(out, "{l}")?;
            }
            Ok(())
        }
    }
}

pub fn cmd_translate(cfg: &RunConfig) -> Result<()> {
    let (models, src_vocab, tgt_vocab) = decoding_setup(cfg)?;
    let refs: Vec<&Model<f32>> = models.iter().collect();
    let input = read_tokenized(&cfg.require_path("input")?)?;
    let beam: usize = cfg.parse("beam")?;
    let vocab_n: usize = cfg.parse("vocab-n")?;
    let max_len: usize = cfg.parse("decode-max-len")?;
    let opts = DecodeOptions {
        beam,
        max_len: (max_len > 0).then_some(max_len),
        vocab_n: (vocab_n > 0).then_some(vocab_n),
    };
    let nonempty: Vec<usize> = (0..input.len()).filter(|&i| !input[i].is_empty()).collect();
    let sources: Vec<Vec<usize>> = nonempty.iter().map(|&i| src_vocab.encode(&input[i])).collect();
    let (translations, timing) = translate_corpus(&refs, &sources, &opts)?;

    let mut lines = vec![String::new(); input.len()];
    for (&i, t) in nonempty.iter().zip(&translations) {
        lines[i] = tgt_vocab.detokenize(&t.tokens)?;
    }
    emit(cfg.path("output"), &lines)?;

    if let Some(dir) = cfg.path("heatmap") {
        fs::create_dir_all(&dir).map_err(|e| NmtError::file(&dir, e))?;
        for (&i, t) in nonempty.iter().zip(&translations) {
            let labels = t
                .tokens
                .iter()
                .map(|&id| tgt_vocab.token(id).map(str::to_string))
                .collect::<Result<Vec<_>>>()?;
            export_heatmap(&t.attention, &input[i], &labels, &dir.join(format!("{:05}.tsv", i + 1)))?;
        }
        info!("wrote {} heatmaps to {}", translations.len(), dir.display());
    }
    if let Some(path) = cfg.path("timing") {
        write_timing(&path, &timing)?;
    }
    Ok(())
}

fn write_timing(path: &Path, timing: &TimingReport) -> Result<()> {
    let lines = [TimingReport::HEADER.to_string(), timing.tsv()];
    if path == Path::new("-") {
        let mut err = std::io::stderr().lock();
        for l in &lines {
            writeln!(err, "{l}")?;
        }
        Ok(())
    } else {
        write_lines(path, lines)
    }
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let hyps = read_tokenized(&cfg.require_path("hyp")?)?;
    let ref_paths = cfg.list("ref");
    if ref_paths.is_empty() {
        return Err(NmtError::Config("`--ref` is required".into()));
    }
    let ref_files = ref_paths
        .iter()
        .map(|p| read_tokenized(Path::new(p)))
        .collect::<Result<Vec<_>>>()?;
    for (p, f) in ref_paths.iter().zip(&ref_files) {
        if f.len() != hyps.len() {
            return Err(NmtError::dim(
                "evaluate",
                format!("{p} has {} lines, hypotheses have {}", f.len(), hyps.len()),
            ));
        }
    }
    // references regrouped per sentence
    let refs: Vec<Vec<Vec<String>>> = (0..hyps.len())
        .map(|s| ref_files.iter().map(|f| f[s].clone()).collect())
        .collect();
    let score = bleu(&hyps, &refs)?;
    let accuracy = token_accuracy(&hyps, &ref_files[0])?;

    let mut prediction = Vec::new();
    let has_model = cfg.path("checkpoint").is_some() || !cfg.list("ensemble").is_empty();
    if let (true, Some(input)) = (has_model, cfg.path("input")) {
        let (models, src_vocab, tgt_vocab) = decoding_setup(cfg)?;
        let members: Vec<&Model<f32>> = models.iter().collect();
        let sources = read_tokenized(&input)?;
        if sources.len() != hyps.len() {
            return Err(NmtError::dim(
                "evaluate",
                format!("{} source lines vs {} hypotheses", sources.len(), hyps.len()),
            ));
        }
        // sentences with an empty source have no prediction and are skipped
        let kept: Vec<usize> = (0..sources.len()).filter(|&i| !sources[i].is_empty()).collect();
        if kept.len() < sources.len() {
            warn!("{} empty source lines left out of prediction metrics", sources.len() - kept.len());
        }
        let mut ranked = Vec::with_capacity(kept.len());
        for &i in &kept {
            let probs = predicted_distribution(&members, &src_vocab.encode(&sources[i]))?;
            ranked.push(rank_ids(&probs.iter().map(|&p| p as f64).collect::<Vec<_>>()));
        }
        let ref_ids: Vec<Vec<Vec<usize>>> = kept
            .iter()
            .map(|&i| refs[i].iter().map(|r| with_eos(tgt_vocab.encode(r))).collect())
            .collect();
        prediction = wp_precision_recall(
            &ranked,
            &ref_ids,
            &cfg.usize_list("top-n")?,
            cfg.bool("eval.include-eos")?,
        )?;
    }
    let report = EvalReport {
        bleu: score,
        token_accuracy: Some(accuracy),
        prediction,
    };
    print!("{}", report.tsv());
    Ok(())
}

fn with_eos(mut ids: Vec<usize>) -> Vec<usize> {
    ids.push(EOS);
    ids
}

pub fn cmd_predict_vocab(cfg: &RunConfig) -> Result<()> {
    let (models, src_vocab, _) = decoding_setup(cfg)?;
    let members: Vec<&Model<f32>> = models.iter().collect();
    let n = *cfg
        .usize_list("top-n")?
        .first()
        .ok_or_else(|| NmtError::Config("`top-n` is empty".into()))?;
    let mut lines = Vec::new();
    for s in read_tokenized(&cfg.require_path("input")?)? {
        if s.is_empty() {
            lines.push(String::new());
            continue;
        }
        let probs = predicted_distribution(&members, &src_vocab.encode(&s))?;
        let ranked = rank_ids(&probs.iter().map(|&p| p as f64).collect::<Vec<_>>());
        let ids: Vec<String> = ranked.iter().take(n).map(usize::to_string).collect();
        lines.push(ids.join(" "));
    }
    emit(cfg.path("output"), &lines)
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<()> {
    let (model, batch) = gradcheck_setup(cfg.parse("gradcheck-seed")?)?;
    let objectives = [Objective::Base, Objective::L1, Objective::L2, Objective::L3];
    let results = check_objectives(&model, &batch, &objectives, GRADCHECK_STEP)?;
    let mut failed = Vec::new();
    for (obj, checks) in objectives.into_iter().zip(results) {
        let worst = checks
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .ok_or(NmtError::Empty("parameter list"))?;
        for c in &checks {
            log::debug!("{obj}\t{}\t{:.3e}", c.name, c.max_rel_err);
        }
        let ok = worst.max_rel_err < GRADCHECK_TOL;
        println!(
            "{obj}\tmax_rel_err {:.3e}\t({})\t{}",
            worst.max_rel_err,
            worst.name,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(obj.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        warn!("gradient check failed for {}", failed.join(", "));
        Err(NmtError::CheckFailed(format!(
            "relative error ≥ {GRADCHECK_TOL:e} for {}",
            failed.join(", ")
        )))
    }
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let task: SyntheticTask = cfg.str("task").parse()?;
    let pairs = gen_synthetic(
        task,
        cfg.parse("n")?,
        cfg.parse("task-vocab")?,
        cfg.parse("task-min-len")?..=cfg.parse("task-max-len")?,
        cfg.parse("seed")?,
    )?;
    let prefix = cfg.require_path("output")?;
    let side = |ext: &str| PathBuf::from(format!("{}.{ext}", prefix.display()));
    write_lines(&side("src"), pairs.iter().map(|p| p.0.join(" ")))?;
    write_lines(&side("tgt"), pairs.iter().map(|p| p.1.join(" ")))?;
    println!("wrote {} pairs to {} and {}", pairs.len(), side("src").display(), side("tgt").display());
    Ok(())
}
