//! Workflow entry point: ingest → split → train → evaluate → tag → report,
//! plus the synthetic corpus generator and the gradient check suite.

mod settings;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use settings::{Profile, Settings};
use tagtriad_core::corpus::{
    self, load_dataset, parse_stoplist, stratified_split, DataFormat, Dataset, SplitSpec,
    TURKISH_STOPWORDS,
};
use tagtriad_core::eval::{evaluate, render_report};
use tagtriad_core::pipelines::{
    BertPipeline, Doc2VecMnlrPipeline, LstmPipeline, PipelineKind, TrainedPipeline,
};
use tagtriad_core::rng::derive_seed;
use tagtriad_core::synthgen::{generate_corpus, TemplateSet};
use tagtriad_core::vocab::Vocabulary;
use tagtriad_core::{checkpoint, lstm, transformer};

#[derive(Parser)]
#[command(
    name = "tagtriad",
    about = "Train and compare three short-sentence auto-tagging pipelines",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Configuration profile: desk (minutes-scale) or paper (reported dims)
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Flat key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable): --set lstm.epochs=5
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Random seed recorded with every artifact
    #[arg(long)]
    seed: Option<u64>,
}

impl CommonOpts {
    fn resolve(&self) -> Result<Settings> {
        let mut s = Settings::new(Profile::parse(&self.profile)?);
        if let Some(path) = &self.config {
            s.load_file(path)?;
        }
        s.load_env()?;
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set {kv:?}: expected KEY=VALUE"))?;
            s.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            s.set("seed", &seed.to_string())?;
        }
        Ok(s)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate and normalize a dataset file
    Ingest {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        input: PathBuf,
        /// Input format: jsonl or csv
        #[arg(long, default_value = "jsonl")]
        format: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write stratified train/test JSONL splits
    Split {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "jsonl")]
        format: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a pipeline and write checkpoint, vocabulary, and curves
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Pipeline: doc2vec_mnlr, lstm, or bert
        #[arg(long)]
        pipeline: String,
        #[arg(long)]
        train: PathBuf,
        /// Validation split (defaults to the training file)
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Extra unlabeled pretraining text, one sentence per line (bert)
        #[arg(long)]
        pretrain_extra: Option<PathBuf>,
        /// Custom stopword list, one token per line (doc2vec_mnlr)
        #[arg(long)]
        stoplist: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a split and render the report files
    Evaluate {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Vocabulary file saved alongside the checkpoint
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Split tag recorded in the report file names: train or test
        #[arg(long, default_value = "test")]
        split_tag: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tag sentences from a file or standard input
    Tag {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Input file; standard input when omitted
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Merge evaluation outputs into the summary metrics table
    Report {
        #[command(flatten)]
        common: CommonOpts,
        /// Directories produced by `evaluate`
        #[arg(long, value_delimiter = ',', required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic labeled corpus
    Synth {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient verification suites
    Gradcheck {
        #[command(flatten)]
        common: CommonOpts,
    },
}

fn parse_format(s: &str) -> Result<DataFormat> {
    match s {
        "jsonl" => Ok(DataFormat::Jsonl),
        "csv" => Ok(DataFormat::Csv),
        other => bail!("unknown format {other:?} (expected jsonl or csv)"),
    }
}

fn load_and_normalize(path: &Path, format: DataFormat, classes: usize) -> Result<Dataset> {
    let mut ds = load_dataset(path, format, Some(classes))
        .with_context(|| format!("loading {}", path.display()))?;
    ds.normalize();
    Ok(ds)
}

fn histogram_summary(ds: &Dataset) -> String {
    let mut out = format!("records = {}\nclasses = {}\n", ds.len(), ds.class_count);
    for (c, n) in ds.class_histogram().iter().enumerate() {
        out.push_str(&format!("class_{c} = {n}\n"));
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn load_vocab_file(path: &Path) -> Result<Vocabulary> {
    let json =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    Vocabulary::from_json(&json).with_context(|| format!("parsing {}", path.display()))
}

/// The vocabulary path defaults to `vocab.json` next to the checkpoint.
fn vocab_path_for(checkpoint: &Path, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| {
        checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("vocab.json")
    })
}

fn load_pipeline(checkpoint_path: &Path, vocab_path: &Path) -> Result<TrainedPipeline> {
    let vocab = load_vocab_file(vocab_path)?;
    checkpoint::load(checkpoint_path, vocab).with_context(|| {
        format!(
            "loading checkpoint {} with vocabulary {}",
            checkpoint_path.display(),
            vocab_path.display()
        )
    })
}

fn cmd_ingest(common: &CommonOpts, input: &Path, format: &str, out: &Path) -> Result<()> {
    let settings = common.resolve()?;
    let ds = load_and_normalize(input, parse_format(format)?, settings.classes()?)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    // Normalized text becomes the canonical text field.
    let mut normalized = ds.clone();
    for r in &mut normalized.records {
        r.text = r.tokens.join(" ");
    }
    normalized.write_jsonl(&out.join("ingested.jsonl"))?;
    write_file(&out.join("summary.txt"), &histogram_summary(&ds))?;
    settings.write_resolved(out, &[("input".into(), input.display().to_string())])?;
    println!(
        "ingested {} records across {} classes -> {}",
        ds.len(),
        ds.class_count,
        out.display()
    );
    Ok(())
}

fn cmd_split(common: &CommonOpts, input: &Path, format: &str, out: &Path) -> Result<()> {
    let settings = common.resolve()?;
    let ds = load_and_normalize(input, parse_format(format)?, settings.classes()?)?;
    let spec = SplitSpec {
        test_fraction: settings.get_f64("split.test_fraction")?,
        seed: settings.seed()?,
        stratified: settings.get_bool("split.stratified")?,
    };
    let (train, test) = stratified_split(&ds, &spec)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    train.write_jsonl(&out.join("train.jsonl"))?;
    test.write_jsonl(&out.join("test.jsonl"))?;
    let summary = format!(
        "total = {}\ntrain = {}\ntest = {}\n",
        ds.len(),
        train.len(),
        test.len()
    );
    write_file(&out.join("summary.txt"), &summary)?;
    settings.write_resolved(out, &[("input".into(), input.display().to_string())])?;
    println!(
        "split {} -> {} train / {} test",
        ds.len(),
        train.len(),
        test.len()
    );
    Ok(())
}

fn read_stoplist(path: &Option<PathBuf>) -> Result<Vec<String>> {
    let set = match path {
        Some(p) => {
            let contents = fs::read_to_string(p)
                .with_context(|| format!("cannot read stoplist {}", p.display()))?;
            parse_stoplist(&contents)
        }
        None => parse_stoplist(TURKISH_STOPWORDS),
    };
    let mut list: Vec<String> = set.into_iter().collect();
    list.sort_unstable();
    Ok(list)
}

fn read_unlabeled_text(path: &Path) -> Result<Dataset> {
    let contents =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let records: Vec<corpus::LabeledSentence> = contents
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(id, line)| corpus::LabeledSentence {
            id,
            text: line.to_string(),
            label: 0,
            tokens: corpus::normalize(line),
        })
        .collect();
    if records.is_empty() {
        bail!("pretraining file {} has no sentences", path.display());
    }
    Ok(Dataset::new(records, 1))
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    common: &CommonOpts,
    pipeline: &str,
    train_path: &Path,
    valid_path: &Option<PathBuf>,
    pretrain_extra: &Option<PathBuf>,
    stoplist_path: &Option<PathBuf>,
    out: &Path,
) -> Result<()> {
    let settings = common.resolve()?;
    let kind: PipelineKind = pipeline.parse().map_err(anyhow::Error::msg)?;
    let classes = settings.classes()?;
    let train = load_and_normalize(train_path, DataFormat::Jsonl, classes)?;
    let valid = match valid_path {
        Some(p) => load_and_normalize(p, DataFormat::Jsonl, classes)?,
        None => train.clone(),
    };
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;

    let started = std::time::Instant::now();
    let trained = match kind {
        PipelineKind::Doc2VecMnlr => {
            let stoplist = read_stoplist(stoplist_path)?;
            let p = Doc2VecMnlrPipeline::train(
                &train,
                settings.doc2vec_config()?,
                &settings.mnlr_config()?,
                stoplist,
            )?;
            write_file(
                &out.join("mnlr_loss.csv"),
                &curve_csv("epoch,loss", &p.mnlr.loss_curve),
            )?;
            TrainedPipeline::Doc2VecMnlr(p)
        }
        PipelineKind::Lstm => {
            let vocab = Vocabulary::build(&train, settings.get_u64("vocab.min_count")?);
            let cfg = settings.lstm_config(vocab.size(), classes)?;
            let (p, curves) = LstmPipeline::train(&train, &valid, vocab, cfg)?;
            write_file(&out.join("curves.csv"), &curves.to_csv())?;
            TrainedPipeline::Lstm(p)
        }
        PipelineKind::Bert => {
            let vocab = Vocabulary::build(&train, settings.get_u64("vocab.min_count")?);
            let cfg = settings.encoder_config(vocab.size(), classes)?;
            let extra_file = match pretrain_extra {
                Some(p) => Some(read_unlabeled_text(p)?),
                None => None,
            };
            // The masked-LM phase sees all available unlabeled text: the
            // validation sentences plus any --pretrain-extra file.
            let mut extra: Vec<&Dataset> = vec![&valid];
            if let Some(e) = &extra_file {
                extra.push(e);
            }
            let (p, curves) = BertPipeline::train(&train, &valid, &extra, vocab, cfg)?;
            write_file(&out.join("curves.csv"), &curves.to_csv())?;
            write_file(
                &out.join("mlm_loss.csv"),
                &curve_csv("epoch,mlm_loss", &p.mlm_curve),
            )?;
            TrainedPipeline::Bert(p)
        }
    };

    checkpoint::save(&trained, &out.join("checkpoint.json"))?;
    write_file(&out.join("vocab.json"), &trained.vocabulary().to_json())?;
    settings.write_resolved(
        out,
        &[
            ("pipeline".into(), kind.name().into()),
            ("train".into(), train_path.display().to_string()),
        ],
    )?;
    println!(
        "trained {} on {} records in {:.1?} -> {}",
        kind,
        train.len(),
        started.elapsed(),
        out.display()
    );
    Ok(())
}

fn curve_csv(header: &str, values: &[f64]) -> String {
    let mut out = format!("{header}\n");
    for (i, v) in values.iter().enumerate() {
        out.push_str(&format!("{},{v:.6}\n", i + 1));
    }
    out
}

fn cmd_evaluate(
    common: &CommonOpts,
    checkpoint_path: &Path,
    vocab: &Option<PathBuf>,
    data: &Path,
    split_tag: &str,
    out: &Path,
) -> Result<()> {
    let settings = common.resolve()?;
    if split_tag != "train" && split_tag != "test" {
        bail!("--split-tag must be train or test, got {split_tag:?}");
    }
    let pipeline = load_pipeline(checkpoint_path, &vocab_path_for(checkpoint_path, vocab))?;
    let ds = load_and_normalize(data, DataFormat::Jsonl, pipeline.classes())?;
    let preds = pipeline.predict_dataset(&ds, settings.seed()?);
    let gold: Vec<usize> = ds.records.iter().map(|r| r.label).collect();
    let predicted: Vec<usize> = preds.iter().map(|p| p.label).collect();
    let report = evaluate(
        pipeline.kind().name(),
        split_tag,
        &gold,
        &predicted,
        pipeline.classes(),
    )?;
    let files = render_report(&report, out)?;
    settings.write_resolved(
        out,
        &[
            ("checkpoint".into(), checkpoint_path.display().to_string()),
            ("data".into(), data.display().to_string()),
            ("split_tag".into(), split_tag.into()),
        ],
    )?;
    println!(
        "{} {}: accuracy {:.4}, macro F1 {:.4}, weighted F1 {:.4} ({} files -> {})",
        report.method,
        split_tag,
        report.accuracy,
        report.macro_f1,
        report.weighted_f1,
        files.len(),
        out.display()
    );
    Ok(())
}

fn cmd_tag(
    common: &CommonOpts,
    checkpoint_path: &Path,
    vocab: &Option<PathBuf>,
    input: &Option<PathBuf>,
) -> Result<()> {
    let settings = common.resolve()?;
    let pipeline = load_pipeline(checkpoint_path, &vocab_path_for(checkpoint_path, vocab))?;
    let seed = settings.seed()?;
    let stdin = std::io::stdin();
    let reader: Box<dyn BufRead> = match input {
        Some(p) => Box::new(std::io::BufReader::new(
            fs::File::open(p).with_context(|| format!("cannot open {}", p.display()))?,
        )),
        None => Box::new(stdin.lock()),
    };
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    for (i, line) in reader.lines().enumerate() {
        let line = line.context("reading input")?;
        if line.trim().is_empty() {
            continue;
        }
        let pred = pipeline.predict_text(&line, derive_seed(seed, "tag.line", i as u64));
        writeln!(w, "{line}\t{}\t{:.4}", pred.label, pred.confidence)?;
    }
    Ok(())
}

/// One parsed metrics_<method>_<split>.csv data row.
struct MetricsRow {
    method: String,
    train_acc: Option<String>,
    test_acc: Option<String>,
    macro_f1: String,
    weighted_f1: String,
    split: String,
}

fn parse_metrics_file(path: &Path) -> Result<MetricsRow> {
    let contents =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut lines = contents.lines();
    let header = lines.next().unwrap_or_default();
    if header != "method,train_acc,test_acc,macro_f1,weighted_f1" {
        bail!("{}: unexpected header {header:?}", path.display());
    }
    let row = lines
        .next()
        .with_context(|| format!("{}: missing data row", path.display()))?;
    let cells: Vec<&str> = row.split(',').collect();
    if cells.len() != 5 {
        bail!(
            "{}: expected 5 columns, got {}",
            path.display(),
            cells.len()
        );
    }
    let name = path.file_name().unwrap().to_string_lossy();
    let split = if name.ends_with("_train.csv") {
        "train"
    } else {
        "test"
    };
    Ok(MetricsRow {
        method: cells[0].to_string(),
        train_acc: (!cells[1].is_empty()).then(|| cells[1].to_string()),
        test_acc: (!cells[2].is_empty()).then(|| cells[2].to_string()),
        macro_f1: cells[3].to_string(),
        weighted_f1: cells[4].to_string(),
        split: split.to_string(),
    })
}

fn cmd_report(common: &CommonOpts, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let settings = common.resolve()?;
    let mut rows: Vec<MetricsRow> = Vec::new();
    for dir in inputs {
        let entries =
            fs::read_dir(dir).with_context(|| format!("cannot read {}", dir.display()))?;
        for entry in entries {
            let path = entry?.path();
            let name = path.file_name().unwrap_or_default().to_string_lossy();
            if name.starts_with("metrics_") && name.ends_with(".csv") {
                rows.push(parse_metrics_file(&path)?);
            }
        }
    }
    if rows.is_empty() {
        bail!("no metrics_<method>_<split>.csv files found under the given inputs");
    }

    // Merge per method: train accuracy from the train row, everything else
    // from the test row (falling back to whichever split exists).
    let mut merged: BTreeMap<String, (Option<String>, Option<String>, String, String)> =
        BTreeMap::new();
    for row in rows {
        let slot =
            merged
                .entry(row.method.clone())
                .or_insert((None, None, String::new(), String::new()));
        match row.split.as_str() {
            "train" => {
                slot.0 = row.train_acc.clone();
                if slot.2.is_empty() {
                    slot.2 = row.macro_f1.clone();
                    slot.3 = row.weighted_f1.clone();
                }
            }
            _ => {
                slot.1 = row.test_acc.clone();
                slot.2 = row.macro_f1.clone();
                slot.3 = row.weighted_f1.clone();
            }
        }
    }
    let mut csv = String::from("method,train_acc,test_acc,macro_f1,weighted_f1\n");
    for (method, (train_acc, test_acc, macro_f1, weighted_f1)) in &merged {
        csv.push_str(&format!(
            "{method},{},{},{macro_f1},{weighted_f1}\n",
            train_acc.clone().unwrap_or_default(),
            test_acc.clone().unwrap_or_default()
        ));
    }
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    write_file(&out.join("metrics_summary.csv"), &csv)?;
    settings.write_resolved(out, &[])?;
    println!("merged {} methods -> {}", merged.len(), out.display());
    Ok(())
}

fn cmd_synth(common: &CommonOpts, out: &Path) -> Result<()> {
    let settings = common.resolve()?;
    let cfg = settings.generator_config()?;
    let ds = generate_corpus(&cfg, &TemplateSet::bundled())?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("cannot create {}", parent.display()))?;
        }
    }
    ds.write_jsonl(out)?;
    if let Some(parent) = out.parent() {
        let dir = if parent.as_os_str().is_empty() {
            Path::new(".")
        } else {
            parent
        };
        settings.write_resolved(dir, &[("synth_out".into(), out.display().to_string())])?;
    }
    println!(
        "generated {} sentences across {} classes -> {}",
        ds.len(),
        ds.class_count,
        out.display()
    );
    Ok(())
}

fn cmd_gradcheck(common: &CommonOpts) -> Result<()> {
    let settings = common.resolve()?;
    let seed = settings.seed()?;
    let mut worst: f64 = 0.0;
    for (name, err) in tagtriad_core::nncore::op_gradient_suite(seed) {
        println!("op {name:<22} max rel err {err:.3e}");
        worst = worst.max(err);
    }
    let lstm_err = lstm::gradient_check_cell_chain(5, seed);
    println!("lstm 5-step chain        max rel err {lstm_err:.3e}");
    worst = worst.max(lstm_err);
    let layer_err = transformer::gradient_check_encoder_layer(seed);
    println!("transformer layer        max rel err {layer_err:.3e}");
    worst = worst.max(layer_err);
    if worst >= 1e-4 {
        bail!("gradient check failed: worst relative error {worst:.3e} >= 1e-4");
    }
    println!("all gradient checks passed (worst {worst:.3e})");
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Ingest {
            common,
            input,
            format,
            out,
        } => cmd_ingest(common, input, format, out),
        Command::Split {
            common,
            input,
            format,
            out,
        } => cmd_split(common, input, format, out),
        Command::Train {
            common,
            pipeline,
            train,
            valid,
            pretrain_extra,
            stoplist,
            out,
        } => cmd_train(
            common,
            pipeline,
            train,
            valid,
            pretrain_extra,
            stoplist,
            out,
        ),
        Command::Evaluate {
            common,
            checkpoint,
            vocab,
            data,
            split_tag,
            out,
        } => cmd_evaluate(common, checkpoint, vocab, data, split_tag, out),
        Command::Tag {
            common,
            checkpoint,
            vocab,
            input,
        } => cmd_tag(common, checkpoint, vocab, input),
        Command::Report {
            common,
            inputs,
            out,
        } => cmd_report(common, inputs, out),
        Command::Synth { common, out } => cmd_synth(common, out),
        Command::Gradcheck { common } => cmd_gradcheck(common),
    }
}
