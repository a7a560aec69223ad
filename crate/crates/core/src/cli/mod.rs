//! Command-line front end: `gen`, `pretrain`, `unlearn`, `eval`, `report`.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.

mod config;
mod report;
mod rundir;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use config::{CorpusSettings, ModelSettings, Paths, RunConfig};
pub use report::write_report;
pub use rundir::RunDir;

use crate::corpus::{generate_corpus, Corpus, Split, TokenSequence};
use crate::error::{Error, Result};
use crate::eval::{evaluate, export_heatmap, position_labels, EvalReport};
use crate::importance::{entropy_importance, lexical_importance, write_scores_csv, Estimator};
use crate::model::checkpoint::Checkpoint;
use crate::model::{forward, AdapterBank, Parameters};
use crate::unlearn::{
    ga_baseline, importance_masks, run_unlearning, train_to_memorization, AlphaMode, Method, PretrainEpoch,
    MEMORIZATION_TARGET,
};

#[derive(Debug, Parser)]
#[command(name = "shiftlab", version, about = "Attention-shifting unlearning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic fact corpus.
    Gen {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        entities: Option<usize>,
        #[arg(long)]
        attributes: Option<usize>,
        /// Config file; its [corpus] section supplies defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the base model until it memorizes every answer.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint's weights, epoch counter and RNG.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Unlearn the forget split with attention shifting or gradient ascent.
    Unlearn {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_parser = ["as", "ga"])]
        method: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        threshold_pct: Option<f64>,
        #[arg(long, value_parser = ["fixed", "dynamic"])]
        alpha_mode: Option<String>,
        #[arg(long)]
        alpha0: Option<f64>,
        #[arg(long, value_parser = ["entropy", "lexical"])]
        estimator: Option<String>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Run every epoch instead of stopping at the forget threshold.
        #[arg(long)]
        fixed_epochs: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on every split.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        el_n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare finished run directories.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse `args` (program name first), run the command, return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::UnknownWord(_) | Error::SequenceTooLong { .. } => 1,
        _ => 2,
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { seed, entities, attributes, config, out } => {
            let mut cfg = RunConfig::load_or_default(config.as_deref())?;
            if let Some(s) = seed {
                cfg.corpus.seed = s;
            }
            if let Some(n) = entities {
                cfg.corpus.entities = n;
            }
            if let Some(n) = attributes {
                cfg.corpus.attributes = n;
            }
            cmd_gen(&cfg.corpus, &out)
        }
        Command::Pretrain { config, corpus, out, resume, seed, epochs, lr } => {
            let mut cfg = RunConfig::load_or_default(config.as_deref())?;
            cfg.command = "pretrain".into();
            if let Some(s) = seed {
                cfg.pretrain.seed = s;
            }
            if let Some(e) = epochs {
                cfg.pretrain.max_epochs = e;
            }
            if let Some(l) = lr {
                cfg.pretrain.learning_rate = l;
            }
            cfg.paths = Paths { corpus: Some(corpus), checkpoint: None, resume, out: Some(out) };
            cmd_pretrain(&cfg)
        }
        Command::Unlearn {
            config,
            checkpoint,
            corpus,
            method,
            lambda,
            beta,
            threshold_pct,
            alpha_mode,
            alpha0,
            estimator,
            lr,
            epochs,
            fixed_epochs,
            seed,
            out,
        } => {
            let mut cfg = RunConfig::load_or_default(config.as_deref())?;
            cfg.command = "unlearn".into();
            let u = &mut cfg.unlearn;
            if let Some(m) = method {
                u.method = if m == "ga" { Method::Ga } else { Method::As };
            }
            if let Some(v) = lambda {
                u.lambda = v;
            }
            if let Some(v) = beta {
                u.beta = v;
            }
            if let Some(v) = threshold_pct {
                u.threshold_pct = v;
            }
            if let Some(m) = alpha_mode {
                u.alpha_mode = if m == "fixed" { AlphaMode::Fixed } else { AlphaMode::Dynamic };
            }
            if let Some(v) = alpha0 {
                u.alpha0 = v;
            }
            if let Some(e) = estimator {
                u.estimator = Estimator::parse(&e)?;
            }
            if let Some(v) = lr {
                u.learning_rate = v;
            }
            if let Some(v) = epochs {
                u.max_epochs = v;
            }
            if fixed_epochs {
                u.early_stop = false;
            }
            if let Some(v) = seed {
                u.seed = v;
            }
            cfg.paths = Paths { corpus: Some(corpus), checkpoint: Some(checkpoint), resume: None, out: Some(out) };
            cmd_unlearn(&cfg)
        }
        Command::Eval { config, checkpoint, corpus, k, el_n, out } => {
            let mut cfg = RunConfig::load_or_default(config.as_deref())?;
            cfg.command = "eval".into();
            if let Some(v) = k {
                cfg.eval.k = v;
            }
            if let Some(v) = el_n {
                cfg.eval.el_n = v;
            }
            cfg.paths = Paths { corpus: Some(corpus), checkpoint: Some(checkpoint), resume: None, out: Some(out) };
            cmd_eval(&cfg)
        }
        Command::Report { runs, out } => write_report(&runs, &out),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::invalid(format!("missing {what} path")))
}

pub fn cmd_gen(settings: &CorpusSettings, out: &Path) -> Result<()> {
    let corpus = generate_corpus(settings.seed, settings.entities, settings.attributes)?;
    corpus.save(out)?;
    eprintln!(
        "wrote {} records ({} entities, vocabulary {}) to {}",
        corpus.records.len(),
        corpus.n_entities,
        corpus.vocab.len(),
        out.display()
    );
    Ok(())
}

fn load_corpus_for(ckpt: &Checkpoint, corpus_path: &Path) -> Result<Corpus> {
    let corpus = Corpus::load(corpus_path)?;
    let hash = corpus.hash();
    if ckpt.corpus_hash != hash {
        return Err(Error::invalid(format!(
            "checkpoint was trained on corpus {} but {} hashes to {hash}",
            ckpt.corpus_hash,
            corpus_path.display()
        )));
    }
    Ok(corpus)
}

fn check_fits(corpus: &Corpus, params: &Parameters) -> Result<()> {
    if corpus.max_len() > params.config.max_seq {
        return Err(Error::SequenceTooLong { len: corpus.max_len(), max: params.config.max_seq });
    }
    if corpus.vocab.len() != params.config.vocab_size {
        return Err(Error::invalid(format!(
            "corpus vocabulary has {} words, model expects {}",
            corpus.vocab.len(),
            params.config.vocab_size
        )));
    }
    Ok(())
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    cfg.pretrain.validate()?;
    let corpus = Corpus::load(required(&cfg.paths.corpus, "corpus")?)?;
    let (params, start, rng) = match &cfg.paths.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let corpus_path = required(&cfg.paths.corpus, "corpus")?;
            load_corpus_for(&ck, corpus_path)?;
            (ck.params, ck.epoch, ck.rng)
        }
        None => {
            let mc = cfg.model.to_config(corpus.vocab.len())?;
            (Parameters::init(&mc, cfg.pretrain.seed)?, 0, None)
        }
    };
    check_fits(&corpus, &params)?;
    let dir = RunDir::create(required(&cfg.paths.out, "output")?)?;
    cfg.save(&dir.file("config.toml"))?;

    let mut log = dir.create_text("pretrain_log.csv")?;
    writeln!(log, "epoch,loss,recall").map_err(|e| Error::io(dir.file("pretrain_log.csv"), e))?;
    let log_path = dir.file("pretrain_log.csv");
    let mut write_err = None;
    let outcome = train_to_memorization(params, &corpus, &cfg.pretrain, start, rng, |row: &PretrainEpoch| {
        let recall = row.recall.map(|r| r.to_string()).unwrap_or_default();
        if let Some(r) = row.recall {
            eprintln!("pretrain epoch {:>4}  loss {:.5}  recall {:.4}", row.epoch, row.loss, r);
        }
        if let Err(e) = writeln!(log, "{},{},{}", row.epoch, row.loss, recall).and_then(|_| log.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::io(log_path, e));
    }

    let mut ck = Checkpoint::new(outcome.params, corpus.hash());
    ck.rng = Some(outcome.rng);
    ck.epoch = outcome.epoch;
    ck.notes.insert("stage".into(), "pretrain".into());
    ck.notes.insert("recall".into(), outcome.recall.to_string());
    ck.save(&dir.file("checkpoint.safetensors"))?;

    let report = evaluate(&ck.params, &ck.active_adapters(), &corpus, cfg.eval)?;
    report.save(dir.path())?;
    eprintln!("pretraining stopped at epoch {} with recall {:.4}", outcome.epoch, outcome.recall);
    if !outcome.reached {
        return Err(Error::NotMemorized { recall: outcome.recall, epochs: outcome.epoch, target: MEMORIZATION_TARGET });
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct UnlearnSummary<'a> {
    method: &'a str,
    status: crate::unlearn::RunStatus,
    epochs: usize,
    initial_forget_em: f64,
    initial_retain_em: f64,
    /// Mean attention mass on flagged key positions of forget examples.
    fact_mass_base: f64,
    fact_mass_unlearned: f64,
}

pub fn cmd_unlearn(cfg: &RunConfig) -> Result<()> {
    let u = &cfg.unlearn;
    u.validate()?;
    cfg.eval.validate()?;
    let mut ck = Checkpoint::load(required(&cfg.paths.checkpoint, "checkpoint")?)?;
    if ck.adapters.is_some() {
        return Err(Error::invalid("checkpoint already carries adapters; unlearn from a pretrained checkpoint"));
    }
    let corpus = load_corpus_for(&ck, required(&cfg.paths.corpus, "corpus")?)?;
    check_fits(&corpus, &ck.params)?;
    // the adapter shape belongs to this run, the rest of the model to the checkpoint
    ck.params.config.adapter_rank = cfg.model.adapter_rank;
    ck.params.config.adapter_sites = cfg.model.adapter_sites.clone();
    ck.params.config.validate()?;
    let params = &ck.params;
    let init = AdapterBank::init(&params.config, u.seed)?;

    let dir = RunDir::create(required(&cfg.paths.out, "output")?)?;
    let mut snapshot = cfg.clone();
    snapshot.model = ModelSettings::from_config(&params.config);
    snapshot.save(&dir.file("config.toml"))?;
    let base_report = evaluate(params, &init.disabled(), &corpus, cfg.eval)?;
    save_report(&base_report, &dir, "eval_base")?;

    let log_path = dir.file("log.csv");
    let mut log = dir.create_text("log.csv")?;
    writeln!(log, "{}", u.method.log_header()).map_err(|e| Error::io(&log_path, e))?;
    let method = u.method;
    let on_epoch = |r: &crate::unlearn::EpochRecord| -> Result<()> {
        match method {
            Method::As => eprintln!(
                "as epoch {:>3}  asp {:.5}  akl {:.5}  alpha {:.3}  cos {:+.3}  forget_em {:.3}  retain_em {:.3}",
                r.epoch, r.forget_loss, r.retain_loss, r.alpha, r.grad_cosine, r.forget_em, r.retain_em
            ),
            Method::Ga => eprintln!(
                "ga epoch {:>3}  forget_ce {:.5}  forget_em {:.3}  retain_em {:.3}",
                r.epoch, r.forget_loss, r.forget_em, r.retain_em
            ),
        }
        writeln!(log, "{}", r.csv_line(method)).and_then(|_| log.flush()).map_err(|e| Error::io(&log_path, e))
    };
    let outcome = match method {
        Method::As => run_unlearning(params, &init, &corpus, u, on_epoch)?,
        Method::Ga => ga_baseline(params, &init, &corpus, u, on_epoch)?,
    };
    let state_path = dir.file("state.json");
    let state_json = serde_json::to_string_pretty(&outcome.state).map_err(|e| Error::invalid(e.to_string()))?;
    std::fs::write(&state_path, state_json).map_err(|e| Error::io(&state_path, e))?;

    let mut out = Checkpoint::new(params.clone(), ck.corpus_hash.clone());
    out.adapters = Some(outcome.adapters.clone());
    out.rng = Some(outcome.rng.clone());
    out.epoch = outcome.state.epoch;
    out.notes.insert("stage".into(), "unlearn".into());
    out.notes.insert("method".into(), method.as_str().into());
    out.save(&dir.file("checkpoint.safetensors"))?;

    let report = evaluate(params, &outcome.adapters, &corpus, cfg.eval)?;
    report.save(dir.path())?;

    let (base_mass, new_mass) =
        export_attention(&dir, &corpus, params, &outcome.adapters, u.estimator, u.threshold_pct)?;
    let summary = UnlearnSummary {
        method: method.as_str(),
        status: outcome.state.status,
        epochs: outcome.state.epoch,
        initial_forget_em: outcome.state.initial_forget_em,
        initial_retain_em: outcome.state.initial_retain_em,
        fact_mass_base: base_mass,
        fact_mass_unlearned: new_mass,
    };
    let sum_path = dir.file("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::invalid(e.to_string()))?;
    std::fs::write(&sum_path, text).map_err(|e| Error::io(&sum_path, e))?;

    let f = &report.splits["forget"];
    eprintln!(
        "{} finished after {} epochs ({:?}): forget em {:.3}, rouge-l {:.3}, retain em {:.3}",
        method.as_str(),
        outcome.state.epoch,
        outcome.state.status,
        f.exact_match,
        f.rouge_l,
        report.retain_exact_match()
    );
    Ok(())
}

fn save_report(report: &EvalReport, dir: &RunDir, stem: &str) -> Result<()> {
    let json = dir.file(&format!("{stem}.json"));
    std::fs::write(&json, report.to_json()?).map_err(|e| Error::io(&json, e))?;
    let csv = dir.file(&format!("{stem}.csv"));
    std::fs::write(&csv, report.to_csv()?).map_err(|e| Error::io(&csv, e))
}

/// Per-example flagged-column attention mass before and after unlearning
/// (`attention_mass.csv`), plus the importance scores and every head of the
/// first forget example as base/unlearned heatmap pairs. Returns the two means.
fn export_attention(
    dir: &RunDir,
    corpus: &Corpus,
    params: &Parameters,
    adapters: &AdapterBank,
    estimator: Estimator,
    threshold_pct: f64,
) -> Result<(f64, f64)> {
    let examples = corpus.examples(Split::Forget)?;
    let seqs: Vec<&TokenSequence> = examples.iter().map(|e| &e.seq).collect();
    let masks = importance_masks(params, adapters, corpus, &seqs, estimator, threshold_pct)?;
    let base = adapters.disabled();
    let path = dir.file("attention_mass.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
    let io = |e: csv::Error| Error::io(&path, e.into());
    w.write_record(["record", "base_mass", "unlearned_mass"]).map_err(io)?;
    let (mut sb, mut su) = (0.0, 0.0);
    for (ex, mask) in examples.iter().zip(&masks) {
        let b = forward(params, &base, &ex.seq)?.attention.mean_mass_on(&mask.flagged);
        let u = forward(params, adapters, &ex.seq)?.attention.mean_mass_on(&mask.flagged);
        sb += b;
        su += u;
        w.write_record([ex.record.to_string(), b.to_string(), u.to_string()]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let heat = dir.subdir("heatmaps")?;
    if let (Some(ex), Some(mask)) = (examples.first(), masks.first()) {
        let scores = match estimator {
            Estimator::Entropy => entropy_importance(params, adapters, &ex.seq)?,
            Estimator::Lexical => lexical_importance(&ex.seq, &corpus.vocab),
        };
        write_scores_csv(&dir.file("importance.csv"), &ex.seq, &corpus.vocab, &scores, mask)?;
        let labels = position_labels(&ex.seq, &corpus.vocab);
        let tb = forward(params, &base, &ex.seq)?;
        let tu = forward(params, adapters, &ex.seq)?;
        for l in 0..params.config.n_layers {
            for h in 0..params.config.n_heads {
                let stem = format!("r{}_l{l}_h{h}", ex.record);
                export_heatmap(&tb.attention, &labels, l, h, &heat.join(format!("{stem}_base.csv")))?;
                export_heatmap(&tu.attention, &labels, l, h, &heat.join(format!("{stem}_unlearned.csv")))?;
            }
        }
    }
    let n = examples.len().max(1) as f64;
    Ok((sb / n, su / n))
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    cfg.eval.validate()?;
    let ck = Checkpoint::load(required(&cfg.paths.checkpoint, "checkpoint")?)?;
    let corpus = load_corpus_for(&ck, required(&cfg.paths.corpus, "corpus")?)?;
    check_fits(&corpus, &ck.params)?;
    let dir = RunDir::create(required(&cfg.paths.out, "output")?)?;
    cfg.save(&dir.file("config.toml"))?;
    let report = evaluate(&ck.params, &ck.active_adapters(), &corpus, cfg.eval)?;
    report.save(dir.path())?;
    for (name, m) in &report.splits {
        eprintln!(
            "{name:<17} em {:.3}  rouge-l {:.3}  tr@{} {:.3}  el_{} {:.3}",
            m.exact_match, m.rouge_l, report.k, m.tr_at_k, report.el_n, m.el_n
        );
    }
    Ok(())
}
