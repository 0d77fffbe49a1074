//! Command-line interface: corpus generation, training, evaluation,
//! feature export, and the ablation harness.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::aggregation::normalized_gates;
use crate::data::{generate_synthetic, load_records, save_records, split, write_atomic, FeatureRecord, Label, SyntheticSpec};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::training::{
    ablation_study, ambiguity_scores, evaluate_records, load_checkpoint, save_checkpoint, train, TrainConfig,
    VariantSummary,
};

#[derive(Debug, Parser)]
#[command(name = "coolant", version, about = "Multimodal fake news detection with cross-modal contrastive learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic image/text feature corpus.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3000)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        din: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.35)]
        fake_mismatched: f64,
        #[arg(long, default_value_t = 0.15)]
        fake_corrupted: f64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Train on the config's train split with early stopping on the validation split.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// `key = value` file; omitted keys keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_checkpoint: PathBuf,
        /// Per-epoch log, one JSON object per line.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split of a corpus.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report destination; stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Append one line per sample with normalized attention and ambiguity score.
        #[arg(long)]
        emit_attention: bool,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
    },
    /// Dump pre-classifier features, one JSON object per sample.
    Embed {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::All)]
        split: SplitName,
    },
    /// Train the full model and each single-component variant over several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// Per-run results as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

/// Process exit status for an error: 1 usage, 2 data or format, 3 numeric.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) => 1,
        Error::NonFinite(_) => 3,
        Error::Degenerate(_) | Error::Parse { .. } | Error::Format(_) | Error::Compatibility(_) | Error::Io { .. } => 2,
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenerateData {
            out: path,
            n,
            din,
            seed,
            fake_mismatched,
            fake_corrupted,
            noise,
        } => {
            let spec = SyntheticSpec {
                n_records: n,
                d_in: din,
                noise,
                fake_mismatched,
                fake_corrupted,
                seed,
                ..SyntheticSpec::default()
            };
            let records = generate_synthetic(&spec)?;
            save_records(&records, &path)?;
            emit(out, format_args!("wrote {} records to {}", records.len(), path.display()))
        }
        Command::Train {
            data,
            config,
            out_checkpoint,
            log,
        } => cmd_train(&data, config.as_deref(), &out_checkpoint, log.as_deref(), out),
        Command::Eval {
            data,
            checkpoint,
            report,
            emit_attention,
            split,
        } => cmd_eval(&data, &checkpoint, report.as_deref(), emit_attention, split, out),
        Command::Embed {
            data,
            checkpoint,
            out: path,
            split,
        } => cmd_embed(&data, &checkpoint, &path, split, out),
        Command::Ablate {
            data,
            config,
            seeds,
            out: path,
        } => cmd_ablate(&data, config.as_deref(), seeds, path.as_deref(), out),
    }
}

fn emit(out: &mut dyn Write, line: std::fmt::Arguments) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("writing output", e))
}

/// The config plus whether it set `d_in` explicitly.
fn load_config(path: Option<&Path>) -> Result<(TrainConfig, bool)> {
    let Some(path) = path else {
        return Ok((TrainConfig::default(), false));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
    let config = TrainConfig::parse(&text, &path.display().to_string())?;
    let sets_d_in = text.lines().any(|l| {
        let l = l.split('#').next().unwrap_or("");
        l.split_once('=').is_some_and(|(k, _)| k.trim() == "d_in")
    });
    Ok((config, sets_d_in))
}

/// Loads a corpus; `d_in` comes from the data unless `explicit`, in which case it must agree.
fn load_corpus(path: &Path, config: &mut TrainConfig, explicit: bool) -> Result<Vec<FeatureRecord>> {
    let records = load_records(path)?;
    let Some(first) = records.first() else {
        return Err(Error::Format(format!("{} holds no records", path.display())));
    };
    let d = first.img.len();
    if !explicit {
        config.arch.d_in = d;
    } else if d != config.arch.d_in {
        return Err(Error::Compatibility(format!(
            "corpus features have length {d} but the config expects d_in = {}",
            config.arch.d_in
        )));
    }
    Ok(records)
}

fn select(records: Vec<FeatureRecord>, config: &TrainConfig, which: SplitName) -> Result<Vec<FeatureRecord>> {
    if which == SplitName::All {
        return Ok(records);
    }
    let (train_set, val_set, test_set) = split(&records, config.split, config.seed)?;
    Ok(match which {
        SplitName::Train => train_set,
        SplitName::Val => val_set,
        _ => test_set,
    })
}

/// Table layout: accuracy, then precision, recall, F1 for fake and real news.
pub fn metrics_table(rows: &[(&str, &MetricsReport)]) -> String {
    let mut s = format!(
        "{:<10} {:>8} | {:>9} {:>9} {:>9} | {:>9} {:>9} {:>9}\n",
        "", "Accuracy", "Fake P", "Fake R", "Fake F1", "Real P", "Real R", "Real F1"
    );
    for (name, r) in rows {
        s += &format!(
            "{:<10} {:>8.4} | {:>9.4} {:>9.4} {:>9.4} | {:>9.4} {:>9.4} {:>9.4}\n",
            name, r.accuracy, r.fake.precision, r.fake.recall, r.fake.f1, r.real.precision, r.real.recall, r.real.f1
        );
    }
    s
}

fn json_line<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Format(e.to_string()))
}

fn cmd_train(
    data: &Path,
    config_path: Option<&Path>,
    checkpoint_path: &Path,
    log_path: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let (mut config, sets_d_in) = load_config(config_path)?;
    let records = load_corpus(data, &mut config, sets_d_in)?;
    config.validate()?;
    let (train_set, val_set, _) = split(&records, config.split, config.seed)?;
    let outcome = train(&train_set, &val_set, &config)?;
    let mut log = String::new();
    for record in &outcome.log {
        log += &json_line(record)?;
        log.push('\n');
    }
    if let Some(path) = log_path {
        write_atomic(path, log.as_bytes())?;
    }
    save_checkpoint(&outcome.checkpoint, checkpoint_path)?;
    let val = evaluate_records(&outcome.checkpoint.params, &config, &val_set)?;
    emit(
        out,
        format_args!(
            "trained {} epochs; best epoch {} (validation accuracy {:.4})",
            outcome.log.len(),
            outcome.checkpoint.epoch,
            outcome.checkpoint.best_val_acc
        ),
    )?;
    emit(out, format_args!("{}", metrics_table(&[("val", &val.report)]).trim_end()))
}

#[derive(Serialize)]
struct AttentionLine<'a> {
    id: &'a str,
    label: Label,
    attention: [f64; 3],
    ambiguity: f64,
}

fn cmd_eval(
    data: &Path,
    checkpoint_path: &Path,
    report_path: Option<&Path>,
    emit_attention: bool,
    which: SplitName,
    out: &mut dyn Write,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint_path)?;
    let mut config = ckpt.config.clone();
    let records = select(load_corpus(data, &mut config, true)?, &config, which)?;
    if records.is_empty() {
        return Err(Error::invalid("selected split is empty"));
    }
    let eval = evaluate_records(&ckpt.params, &config, &records)?;
    let mut text = json_line(&eval.report)?;
    text.push('\n');
    if emit_attention {
        let g = ambiguity_scores(&ckpt.params, &eval.outputs.m_img, &eval.outputs.m_txt, &ckpt.dataset)?;
        for (i, r) in records.iter().enumerate() {
            text += &json_line(&AttentionLine {
                id: &r.id,
                label: r.label,
                attention: normalized_gates(eval.outputs.gate_logits.row(i)),
                ambiguity: g[i],
            })?;
            text.push('\n');
        }
    }
    match report_path {
        Some(path) => {
            write_atomic(path, text.as_bytes())?;
            emit(out, format_args!("{}", metrics_table(&[("eval", &eval.report)]).trim_end()))
        }
        None => out.write_all(text.as_bytes()).map_err(|e| Error::io("writing report", e)),
    }
}

#[derive(Serialize)]
struct EmbedLine<'a> {
    id: &'a str,
    label: Label,
    features: &'a [f64],
}

fn cmd_embed(data: &Path, checkpoint_path: &Path, path: &Path, which: SplitName, out: &mut dyn Write) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint_path)?;
    let mut config = ckpt.config.clone();
    let records = select(load_corpus(data, &mut config, true)?, &config, which)?;
    let eval = evaluate_records(&ckpt.params, &config, &records)?;
    let mut text = String::new();
    for (i, r) in records.iter().enumerate() {
        text += &json_line(&EmbedLine {
            id: &r.id,
            label: r.label,
            features: eval.outputs.features.row(i),
        })?;
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())?;
    emit(
        out,
        format_args!("wrote {} feature vectors of length {} to {}", records.len(), eval.outputs.features.cols(), path.display()),
    )
}

/// Ablation table: mean and standard deviation of accuracy and per-class F1.
pub fn ablation_table(rows: &[VariantSummary]) -> String {
    let mut s = format!("{:<10} {:>17} {:>17} {:>17}\n", "Method", "Accuracy", "Fake F1", "Real F1");
    for r in rows {
        let cell = |m: crate::training::MeanSd| format!("{:.4} ± {:.4}", m.mean, m.sd);
        s += &format!("{:<10} {:>17} {:>17} {:>17}\n", r.name, cell(r.accuracy), cell(r.fake_f1), cell(r.real_f1));
    }
    s
}

fn cmd_ablate(
    data: &Path,
    config_path: Option<&Path>,
    seeds: usize,
    path: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let (mut config, sets_d_in) = load_config(config_path)?;
    let records = load_corpus(data, &mut config, sets_d_in)?;
    config.validate()?;
    let rows = ablation_study(&records, &config, seeds)?;
    if let Some(path) = path {
        let json = serde_json::to_vec_pretty(&rows).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(path, &json)?;
    }
    emit(out, format_args!("{}", ablation_table(&rows).trim_end()))
}
