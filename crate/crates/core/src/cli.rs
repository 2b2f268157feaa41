//! Command-line front end: train, translate, evaluate, sweep, stats, synth.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::data::{
    load_alignments, make_synthetic, read_sentences, write_alignments, write_sentences, ParallelCorpus, Sentence,
    SyntheticTask, Vocabulary,
};
use crate::error::{Error, Result};
use crate::metrics::{
    aer, bleu, histogram_entries, latency_summary, monotonic_distance_histogram, predicted_alignment,
    step_size_histogram, within_g_fraction, LatencySummary, MetricsReport,
};
use crate::model::checkpoint::Checkpoint;
use crate::model::train::{stream_corpus, teacher_forced, train, EpochLog, TrainConfig, TrainData};
use crate::model::{Model, ModelConfig};
use crate::policy::{validate_trace, TraceRecord};

#[derive(Debug, Parser)]
#[command(name = "gma", version, about = "Simultaneous translation with Gaussian multi-head attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a JSON run configuration.
    Train(TrainArgs),
    /// Stream source sentences through a checkpoint.
    Translate(TranslateArgs),
    /// Score hypotheses and traces.
    Evaluate(EvaluateArgs),
    /// Latency and quality over a list of delta values.
    Sweep(SweepArgs),
    /// Step-size and gold distance histograms as CSV.
    Stats(StatsArgs),
    /// Write a synthetic parallel corpus with gold alignments.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Source sentences, one per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// JSON-lines trace file written by `translate`.
    #[arg(long)]
    pub trace: PathBuf,
    /// Gold alignments in Pharaoh format against the references.
    #[arg(long, requires = "layer")]
    pub gold: Option<PathBuf>,
    /// Decoder layer (1-based) whose aligned positions are scored.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// One or more checkpoints.
    #[arg(long, required = true)]
    pub ckpt: Vec<PathBuf>,
    /// Comma-separated delta values.
    #[arg(long, required = true, value_delimiter = ',')]
    pub delta: Vec<f64>,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Latency from teacher-forced references instead of streaming traces.
    #[arg(long)]
    pub teacher_forced: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, requires = "reference")]
    pub gold: Option<PathBuf>,
    /// References the gold alignments refer to.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TaskKind {
    Copy,
    ShiftedCopy,
    LocalReorder,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "copy")]
    pub task: TaskKind,
    /// Shift distance or reorder window.
    #[arg(long, default_value_t = 2)]
    pub param: usize,
    #[arg(long, default_value_t = 20)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 5)]
    pub min_len: usize,
    #[arg(long, default_value_t = 15)]
    pub max_len: usize,
    #[arg(long, default_value_t = 200)]
    pub pairs: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const HYP_FILE: &str = "hyp.txt";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const STEP_FILE: &str = "step_sizes.csv";
pub const DISTANCE_FILE: &str = "distances.csv";

/// Parses `args` (program name first) and runs the selected command.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            Ok(())
        }
        Err(e) => Err(Error::Usage(e.render().to_string())),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Translate(a) => cmd_translate(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Stats(a) => cmd_stats(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = Some(s);
    }
    if let Some(d) = args.delta {
        cfg.model.gma.delta = d;
    }
    if let Some(o) = &args.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    create_dir(&cfg.out)?;
    let mut csv = format!("{}\n", EpochLog::CSV_HEADER);
    let ckpt = train_run(&cfg, |e| {
        let dev = match (e.dev_bleu, e.dev_al) {
            (Some(b), Some(a)) => format!(" dev_bleu {b:.2} dev_al {a:.3}"),
            _ => String::new(),
        };
        eprintln!("epoch {} step {} loss {:.4}{dev}", e.epoch, e.step, e.loss);
        csv.push_str(&e.csv_row());
        csv.push('\n');
    })?;
    fs::write(cfg.out.join(LOG_FILE), csv)?;
    let path = cfg.out.join(CHECKPOINT_FILE);
    ckpt.save(&path)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

/// Builds vocabularies and a fresh model from `cfg` and trains it.
pub fn train_run(cfg: &RunConfig, on_epoch: impl FnMut(&EpochLog)) -> Result<Checkpoint> {
    cfg.validate()?;
    let data = cfg.load_data()?;
    let min_freq = cfg.data.min_freq.max(1);
    let source_vocab = Vocabulary::build(&data.train.source, min_freq)?;
    let target_vocab = Vocabulary::build(&data.train.target, min_freq)?;
    let (model_seed, train_seed) = cfg.seeds();
    let model_cfg = ModelConfig {
        source_vocab: source_vocab.len(),
        target_vocab: target_vocab.len(),
        seed: model_seed,
        ..cfg.model.clone()
    };
    let train_cfg = TrainConfig { seed: train_seed, ..cfg.train.clone() };
    let mut model = Model::new(model_cfg)?;
    let td = TrainData {
        corpus: &data.train,
        source_vocab: &source_vocab,
        target_vocab: &target_vocab,
        dev: data.dev.as_ref(),
    };
    train(&mut model, &td, &train_cfg, on_epoch)?;
    Checkpoint::new(model, source_vocab, target_vocab)
}

fn load_checkpoint(path: &Path, delta: Option<f64>) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::load(path)?;
    if let Some(d) = delta {
        ckpt.model.set_delta(d)?;
    }
    Ok(ckpt)
}

pub fn cmd_translate(args: &TranslateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt, args.delta)?;
    let sources = read_sentences(&args.input)?;
    let max = ckpt.model.config().max_positions;
    if let Some((k, s)) = sources.iter().enumerate().find(|(_, s)| s.len() > max) {
        return Err(Error::Contract(format!(
            "{}: line {} has {} words, the model supports {max}",
            args.input.display(),
            k + 1,
            s.len()
        )));
    }
    let corpus = ParallelCorpus::new(sources.clone(), sources, None)?;
    let delta = ckpt.model.delta();
    let eval = stream_corpus(&ckpt.model, &corpus, &ckpt.source_vocab, &ckpt.target_vocab, delta)?;
    create_dir(&args.out)?;
    let mut jsonl = String::new();
    let mut empty = 0;
    for (k, (hyp, out)) in eval.hypotheses.iter().zip(&eval.outputs).enumerate() {
        validate_trace(&out.trace).map_err(|v| Error::Contract(format!("sentence {}: {v}", k + 1)))?;
        let record = TraceRecord::new(hyp.join(" "), out);
        if record.empty {
            empty += 1;
            eprintln!("warning: sentence {} produced an empty hypothesis", k + 1);
        }
        jsonl.push_str(&serde_json::to_string(&record)?);
        jsonl.push('\n');
    }
    write_sentences(&args.out.join(HYP_FILE), &eval.hypotheses)?;
    fs::write(args.out.join(TRACE_FILE), jsonl)?;
    eprintln!(
        "translated {} sentences (delta {delta}, {empty} empty): AL {:.3}",
        eval.hypotheses.len(),
        eval.latency.al
    );
    Ok(())
}

/// Reads a JSON-lines trace file; errors name the offending line.
pub fn read_traces(path: &Path) -> Result<Vec<TraceRecord>> {
    let text = crate::data::read_text(path)?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let parse_err = |message: String| Error::Parse { path: path.display().to_string(), line: k + 1, message };
        let record: TraceRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let trace = record.to_trace().map_err(|e| parse_err(e.to_string()))?;
        validate_trace(&trace).map_err(|v| parse_err(v.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

fn check_counts(what: &[(&str, usize)]) -> Result<()> {
    let (first, n) = what[0];
    if let Some((name, m)) = what.iter().find(|(_, m)| *m != n) {
        return Err(Error::InvalidShape(format!("{first} has {n} lines but {name} has {m}")));
    }
    Ok(())
}

fn content_traces(records: &[TraceRecord]) -> Result<Vec<(Vec<usize>, usize)>> {
    records.iter().map(|r| Ok((r.to_trace()?.content_g().to_vec(), r.source_len))).collect()
}

/// Evaluation layer positions per written token, EOS dropped to match `g`.
fn layer_positions(record: &TraceRecord, layer: usize, len: usize) -> Result<Vec<f64>> {
    record.layer_p[..len]
        .iter()
        .map(|p| {
            p.get(layer - 1)
                .copied()
                .ok_or_else(|| Error::Config(format!("layer {layer} requested but traces have {} layers", p.len())))
        })
        .collect()
}

/// Output positions extended to cover `len` target tokens by repeating the
/// final value.
fn padded_g(g: &[usize], source_len: usize, len: usize) -> Vec<usize> {
    let last = g.last().copied().unwrap_or(source_len);
    let mut out = g.to_vec();
    out.resize(len.max(g.len()), last);
    out
}

pub fn evaluate(args: &EvaluateArgs) -> Result<MetricsReport> {
    let hyps = read_sentences(&args.hyp)?;
    let refs = read_sentences(&args.reference)?;
    let records = read_traces(&args.trace)?;
    check_counts(&[("hypotheses", hyps.len()), ("references", refs.len()), ("traces", records.len())])?;
    let traces = content_traces(&records)?;
    let lat = latency_summary(&traces)?;
    let mut report = MetricsReport {
        bleu: bleu(&hyps, &refs)?,
        al: lat.al,
        ap: lat.ap,
        cw: lat.cw,
        dal: lat.dal,
        ..MetricsReport::default()
    };
    if let Some(gold_path) = &args.gold {
        let layer = args.layer.ok_or_else(|| Error::Config("--gold needs --layer".into()))?;
        if layer == 0 {
            return Err(Error::Config("--layer is 1-based".into()));
        }
        let gold = load_alignments(gold_path)?;
        check_counts(&[("references", refs.len()), ("gold alignments", gold.len())])?;
        let mut predicted = Vec::with_capacity(records.len());
        let mut within = Vec::with_capacity(records.len());
        for (k, (r, (g, j))) in records.iter().zip(&traces).enumerate() {
            gold[k].check_bounds(*j, refs[k].len())?;
            predicted.push(predicted_alignment(&layer_positions(r, layer, g.len())?, *j));
            within.push(padded_g(g, *j, refs[k].len()));
        }
        report.aer = Some(aer(&predicted, &gold)?);
        report.within_g_fraction = Some(within_g_fraction(&gold, &within)?);
        let lens: Vec<usize> = refs.iter().map(Vec::len).collect();
        let dist = monotonic_distance_histogram(&gold, &lens)?;
        let steps: Vec<Vec<usize>> = traces.into_iter().map(|(g, _)| g).collect();
        let mut h = BTreeMap::new();
        h.insert("step_size".to_string(), histogram_entries(&step_size_histogram(&steps)));
        h.insert("non_monotonic".to_string(), histogram_entries(&to_f64(&dist.non_monotonic)));
        h.insert("monotonic".to_string(), histogram_entries(&to_f64(&dist.monotonic)));
        report.histograms = Some(h);
    }
    Ok(report)
}

fn to_f64(h: &BTreeMap<i64, usize>) -> BTreeMap<i64, f64> {
    h.iter().map(|(&k, &v)| (k, v as f64)).collect()
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let report = evaluate(args)?;
    let json = report.to_json()?;
    println!("{json}");
    eprint!("{}", report.to_key_value());
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        fs::write(dir.join(REPORT_FILE), format!("{json}\n"))?;
    }
    Ok(())
}

/// Column order follows the usual latency table: CW, AP, AL, DAL, BLEU.
pub fn sweep_csv(args: &SweepArgs) -> Result<String> {
    if args.delta.is_empty() {
        return Err(Error::Config("sweep needs at least one delta".into()));
    }
    let sources = read_sentences(&args.input)?;
    let refs = read_sentences(&args.reference)?;
    check_counts(&[("input", sources.len()), ("references", refs.len())])?;
    let corpus = ParallelCorpus::new(sources, refs, None)?;
    let many = args.ckpt.len() > 1;
    let mut csv = String::new();
    csv.push_str(if many { "checkpoint,delta,cw,ap,al,dal,bleu\n" } else { "delta,cw,ap,al,dal,bleu\n" });
    for path in &args.ckpt {
        let ckpt = load_checkpoint(path, None)?;
        for &delta in &args.delta {
            let (bleu, lat) = sweep_point(&ckpt, &corpus, delta, args.teacher_forced)?;
            if many {
                let _ = write!(csv, "{},", path.display());
            }
            let _ = writeln!(csv, "{delta},{:.6},{:.6},{:.6},{:.6},{:.4}", lat.cw, lat.ap, lat.al, lat.dal, bleu);
        }
    }
    Ok(csv)
}

fn sweep_point(ckpt: &Checkpoint, corpus: &ParallelCorpus, delta: f64, forced: bool) -> Result<(f64, LatencySummary)> {
    let mut model = ckpt.model.clone();
    model.set_delta(delta)?;
    let eval = stream_corpus(&model, corpus, &ckpt.source_vocab, &ckpt.target_vocab, delta)?;
    if !forced {
        return Ok((eval.bleu, eval.latency));
    }
    let tf = teacher_forced(&model, corpus, &ckpt.source_vocab, &ckpt.target_vocab, delta)?;
    let traces: Vec<(Vec<usize>, usize)> = tf.g.into_iter().zip(tf.source_lens).collect();
    Ok((eval.bleu, latency_summary(&traces)?))
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let csv = sweep_csv(args)?;
    print!("{csv}");
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        fs::write(dir.join(SWEEP_FILE), csv)?;
    }
    Ok(())
}

pub fn cmd_stats(args: &StatsArgs) -> Result<()> {
    let records = read_traces(&args.trace)?;
    let traces: Vec<Vec<usize>> = content_traces(&records)?.into_iter().map(|(g, _)| g).collect();
    create_dir(&args.out)?;
    let mut csv = String::from("step,proportion\n");
    for (k, v) in step_size_histogram(&traces) {
        let _ = writeln!(csv, "{k},{v:.6}");
    }
    fs::write(args.out.join(STEP_FILE), csv)?;
    if let (Some(gold_path), Some(ref_path)) = (&args.gold, &args.reference) {
        let gold = load_alignments(gold_path)?;
        let refs: Vec<Sentence> = read_sentences(ref_path)?;
        check_counts(&[("references", refs.len()), ("gold alignments", gold.len())])?;
        let lens: Vec<usize> = refs.iter().map(Vec::len).collect();
        let h = monotonic_distance_histogram(&gold, &lens)?;
        let mut csv = String::from("kind,distance,count\n");
        for (kind, map) in [("non_monotonic", &h.non_monotonic), ("monotonic", &h.monotonic)] {
            for (d, c) in map {
                let _ = writeln!(csv, "{kind},{d},{c}");
            }
        }
        let _ = writeln!(csv, "unaligned,,{}", h.unaligned);
        fs::write(args.out.join(DISTANCE_FILE), csv)?;
    }
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let task = match args.task {
        TaskKind::Copy => SyntheticTask::Copy,
        TaskKind::ShiftedCopy => SyntheticTask::ShiftedCopy { d: args.param },
        TaskKind::LocalReorder => SyntheticTask::LocalReorder { w: args.param },
    };
    let corpus = make_synthetic(task, args.vocab_size, (args.min_len, args.max_len), args.pairs, args.seed)?;
    create_dir(&args.out)?;
    write_sentences(&args.out.join("source.txt"), &corpus.source)?;
    write_sentences(&args.out.join("target.txt"), &corpus.target)?;
    if let Some(a) = &corpus.alignments {
        write_alignments(&args.out.join("gold.align"), a)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_repeats_last_position() {
        assert_eq!(padded_g(&[1, 3], 5, 4), vec![1, 3, 3, 3]);
        assert_eq!(padded_g(&[], 5, 2), vec![5, 5]);
        assert_eq!(padded_g(&[1, 2, 3], 5, 2), vec![1, 2, 3]);
    }

    #[test]
    fn count_mismatch_names_both_sides() {
        let err = check_counts(&[("hypotheses", 3), ("references", 2)]).unwrap_err().to_string();
        assert!(err.contains("hypotheses has 3") && err.contains("references has 2"), "{err}");
    }

    #[test]
    fn gold_requires_layer() {
        let r = Cli::try_parse_from(["gma", "evaluate", "--hyp", "h", "--ref", "r", "--trace", "t", "--gold", "g"]);
        assert!(r.is_err());
    }
}
