use crate::{CheckArgs, EvalArgs, GenArgs, TrainArgs, VocabArgs};
use aat_core::trace::{check_trace, read_trace, write_trace, TraceBounds};
use aat_core::{checkpoint, train as training, vocab as vocabulary};
use aat_core::{
    AttentionKind, Dataset, Decoding, Error as CoreError, Mode, Model, ModelConfig, SynthConfig,
    TrainConfig,
};
use anyhow::{bail, Context, Result};
use serde_json::json;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

/// Bad flags or flag combinations.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Usage>() || cause.is::<std::io::Error>() {
            return 2;
        }
        if let Some(core) = cause.downcast_ref::<CoreError>() {
            return match core {
                CoreError::Config(_) | CoreError::Io(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

/// Fails unless the directory that will hold `path` exists.
fn check_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            Err(usage(format!("directory {} does not exist", p.display())))
        }
        _ => Ok(()),
    }
}

pub fn gen(a: GenArgs) -> Result<()> {
    let cfg = SynthConfig {
        k: a.k,
        d_a: a.d_a,
        vocab_size: a.vocab_size,
        max_len: a.max_len,
        noise: a.noise,
        ..SynthConfig::default()
    };
    cfg.validate()?;
    if a.n_train == 0 {
        bail!(usage("--n-train must be at least 1"));
    }
    let data = Dataset::synthetic(&cfg, a.seed, a.n_train, a.n_val)?;
    data.save(&a.out)
        .with_context(|| format!("writing dataset to {}", a.out.display()))?;
    println!(
        "{}",
        json!({
            "out": a.out,
            "n_train": a.n_train,
            "n_val": a.n_val,
            "vocab_size": data.vocab.len(),
            "classes": cfg.classes(),
        })
    );
    Ok(())
}

fn model_config(a: &TrainArgs, data: &Dataset) -> Result<ModelConfig> {
    let mode: Mode = a.mode.parse().map_err(|e: CoreError| usage(e.to_string()))?;
    let kind: AttentionKind = a.attn_kind.parse().map_err(|e: CoreError| usage(e.to_string()))?;
    let mut cfg =
        ModelConfig::new(mode, a.d, data.meta.d_a, data.vocab.len()).with_attention(kind, a.heads);
    if let Some(m_r) = a.m_r {
        cfg.m_r = m_r;
    }
    cfg.m_min = a.m_min;
    cfg.m_max = a.m_max;
    cfg.epsilon = a.epsilon;
    cfg.lambda = a.lambda;
    cfg.init_range = a.init_range;
    cfg.layer_norm = !a.no_layer_norm;
    cfg.validate()?;
    Ok(cfg)
}

fn default_log(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".log.jsonl");
    out.with_file_name(name)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let data = Dataset::load(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let cfg = model_config(&a, &data)?;
    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        lr_decay: a.lr_decay,
        lr_every: a.lr_every,
        ss_step: a.ss_step,
        ss_every: a.ss_every,
        ss_cap: a.ss_cap,
        clip: a.clip,
        seed: a.seed,
        max_decode: a.max_decode,
    };
    tc.validate()?;
    let log_path = a.log.clone().unwrap_or_else(|| default_log(&a.out));
    check_parent(&a.out)?;
    check_parent(&log_path)?;

    let model = Model::new(cfg, a.seed)?;
    let mut log = BufWriter::new(
        File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    let mut write_error = None;
    let outcome = training::train(model, &data, &tc, |rec| {
        if !a.quiet {
            eprintln!(
                "epoch {:>3} {:<5} loss {:.4} acc {:.4} steps {:.3}{}",
                rec.epoch,
                rec.split,
                rec.loss,
                rec.acc,
                rec.mean_steps,
                rec.bleu4.map(|b| format!(" bleu4 {b:.4}")).unwrap_or_default()
            );
        }
        let line = serde_json::to_string(rec).expect("log record serializes");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            write_error.get_or_insert(e);
        }
    });
    if let Some(e) = write_error {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    let outcome = outcome?;
    let (model, epoch) = if a.keep_last {
        (&outcome.final_model, tc.epochs - 1)
    } else {
        (&outcome.best, outcome.best_epoch)
    };
    checkpoint::save(&a.out, model, &data.vocab)
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "{}",
        json!({ "checkpoint": a.out, "log": log_path, "epoch": epoch, "mode": model.config.mode })
    );
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    if let Some(p) = &a.trace_out {
        check_parent(p)?;
    }
    if a.max_decode == 0 {
        bail!(usage("--max-decode must be at least 1"));
    }
    let (model, vocab) = checkpoint::load(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let data = Dataset::load(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    if vocab != data.vocab {
        return Err(CoreError::Config(format!(
            "checkpoint vocabulary ({} tokens) differs from the dataset vocabulary ({} tokens)",
            vocab.len(),
            data.vocab.len()
        ))
        .into());
    }
    let split = match a.split.as_str() {
        "val" => &data.val,
        "train" => &data.train,
        other => bail!(usage(format!("unknown split {other:?}; use train or val"))),
    };
    if split.is_empty() {
        bail!(usage(format!("the {} split is empty", a.split)));
    }
    let report = training::evaluate(&model, split, a.max_decode)?;
    if let Some(path) = &a.trace_out {
        let mut out =
            BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        for (i, ex) in split.iter().enumerate() {
            let run = model.decode(&ex.features, Decoding::TeacherForcing(&ex.target))?;
            write_trace(&mut out, i, &run.trace)?;
        }
        out.flush()?;
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

pub fn check(a: CheckArgs) -> Result<()> {
    let (m_min, m_max) = match &a.checkpoint {
        Some(path) => {
            let (model, _) =
                checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            let c = &model.config;
            match c.mode {
                Mode::Adaptive => (c.m_min, c.m_max),
                Mode::Recurrent => (c.m_r, c.m_r),
                Mode::Base => (1, 1),
            }
        }
        None => (a.m_min.unwrap_or(0), a.m_max.unwrap_or(usize::MAX)),
    };
    if m_min > m_max {
        bail!(usage(format!("--m-min {m_min} exceeds --m-max {m_max}")));
    }
    if !(a.tolerance >= 0.0) {
        bail!(usage("--tolerance must be nonnegative"));
    }
    let file = File::open(&a.trace).with_context(|| format!("opening {}", a.trace.display()))?;
    let records = read_trace(BufReader::new(file))?;
    let n = check_trace(
        &records,
        TraceBounds {
            m_min,
            m_max,
            tolerance: a.tolerance,
        },
    )?;
    println!("ok: {n} records");
    Ok(())
}

pub fn vocab(a: VocabArgs) -> Result<()> {
    check_parent(&a.out)?;
    if let Some(p) = &a.captions_out {
        check_parent(p)?;
    }
    if a.max_len == 0 {
        bail!(usage("--max-len must be at least 1"));
    }
    let text = std::fs::read_to_string(&a.corpus)
        .with_context(|| format!("reading {}", a.corpus.display()))?;
    let corpus: Vec<String> = text.lines().map(str::to_string).collect();
    let truncated = corpus
        .iter()
        .filter(|c| vocabulary::tokenize(c).count() > a.max_len)
        .count();
    let pre = vocabulary::build_vocab(&corpus, a.min_count, a.max_len)?;
    pre.vocab.save(&a.out)?;
    if let Some(path) = &a.captions_out {
        let lines: String = pre.captions.iter().map(|c| c.join(" ") + "\n").collect();
        std::fs::write(path, lines).with_context(|| format!("writing {}", path.display()))?;
    }
    println!(
        "{}",
        json!({
            "tokens": pre.vocab.len(),
            "words": pre.vocab.len() - vocabulary::SPECIALS.len(),
            "captions": corpus.len(),
            "truncated": truncated,
        })
    );
    Ok(())
}
