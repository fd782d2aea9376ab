use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use cgru::decoding::{
    format_nbest_line, pair_lines, parse_nbest_line, rescore_nbest, score_corpus, translate_corpus, BeamConfig,
    NbestEntry,
};
use cgru::io::{
    build_factor_vocabs, load_model, read_corpus, read_factored_corpus, read_lines, save_model, ArchiveMetadata, Vocab,
};
use cgru::metrics::MetricRegistry;
use cgru::model::{FactoredSentence, ModelParams};
use cgru::training::{train_loop, EvalOutcome, ParallelExample, TrainObserver, TrainSummary, UpdateLog};
use cgru::viz::{emit_attention, emit_search_graph};
use cgru::EOS;
use log::{info, warn};

use crate::config::RunConfig;

pub const BEST_MODEL: &str = "model.best.cgru";
pub const FINAL_MODEL: &str = "model.final.cgru";
pub const CONFIG_SNAPSHOT: &str = "config.json";
pub const TRAIN_LOG: &str = "train.log";

fn read_file_lines(path: &Path) -> Result<Vec<String>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_lines(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn read_vocab(path: &Path) -> Result<Vocab> {
    let f = File::open(path).with_context(|| format!("opening vocabulary {}", path.display()))?;
    Vocab::read(BufReader::new(f)).with_context(|| format!("reading vocabulary {}", path.display()))
}

fn write_vocab(path: &Path, v: &Vocab) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    v.write(&mut w)?;
    w.flush()?;
    Ok(())
}

/// A model archive together with the vocabularies it names.
pub struct LoadedModel {
    pub params: ModelParams,
    pub meta: ArchiveMetadata,
    pub source_vocabs: Vec<Vocab>,
    pub target_vocab: Vocab,
}

/// Loads an archive; vocabulary paths in its metadata are resolved
/// relative to the archive's directory.
pub fn load_with_vocabs(path: &Path) -> Result<LoadedModel> {
    let (params, meta) = load_model(path).with_context(|| format!("loading model {}", path.display()))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let source_vocabs = meta
        .source_vocabs
        .iter()
        .map(|p| read_vocab(&dir.join(p)))
        .collect::<Result<Vec<_>>>()?;
    let target_vocab = read_vocab(&dir.join(meta.target_vocab.as_deref().context("archive names no target vocabulary")?))?;
    let config = params.config();
    ensure!(
        source_vocabs.len() == config.factor_count(),
        "{}: {} source vocabularies for {} factors",
        path.display(),
        source_vocabs.len(),
        config.factor_count()
    );
    for (f, (v, fc)) in source_vocabs.iter().zip(&config.source_factors).enumerate() {
        ensure!(
            v.len() == fc.vocab_size,
            "{}: source vocabulary {f} has {} entries, model expects {}",
            path.display(),
            v.len(),
            fc.vocab_size
        );
    }
    ensure!(
        target_vocab.len() == config.target_vocab_size,
        "{}: target vocabulary has {} entries, model expects {}",
        path.display(),
        target_vocab.len(),
        config.target_vocab_size
    );
    Ok(LoadedModel {
        params,
        meta,
        source_vocabs,
        target_vocab,
    })
}

/// Loads ensemble members and checks they share their vocabularies.
pub fn load_ensemble(paths: &[PathBuf]) -> Result<(Vec<ModelParams>, Vec<Vocab>, Vocab)> {
    ensure!(!paths.is_empty(), "at least one model is required (--models)");
    let mut loaded = paths.iter().map(|p| load_with_vocabs(p)).collect::<Result<Vec<_>>>()?;
    let first = loaded.remove(0);
    for (m, path) in loaded.iter().zip(&paths[1..]) {
        if m.target_vocab != first.target_vocab {
            bail!(
                "vocabulary mismatch: {} has a different target vocabulary from {}",
                path.display(),
                paths[0].display()
            );
        }
        if m.source_vocabs != first.source_vocabs {
            bail!(
                "vocabulary mismatch: {} has different source vocabularies from {}",
                path.display(),
                paths[0].display()
            );
        }
    }
    let mut params = vec![first.params];
    params.extend(loaded.into_iter().map(|m| m.params));
    Ok((params, first.source_vocabs, first.target_vocab))
}

fn load_pairs(
    source: &Path,
    target: &Path,
    source_vocabs: &[Vocab],
    target_vocab: &Vocab,
) -> Result<Vec<ParallelExample>> {
    let src = read_factored_corpus(&read_file_lines(source)?, source_vocabs)
        .with_context(|| format!("in {}", source.display()))?;
    let tgt = read_corpus(&read_file_lines(target)?, target_vocab).with_context(|| format!("in {}", target.display()))?;
    pair_lines(&src, &tgt).with_context(|| format!("{} vs {}", source.display(), target.display()))
}

struct CheckpointWriter<'a> {
    dir: &'a Path,
    meta: ArchiveMetadata,
    config: &'a RunConfig,
    log: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl TrainObserver for CheckpointWriter<'_> {
    fn on_update(&mut self, log: &UpdateLog) {
        if let Err(e) = writeln!(self.log, "{}", log.line()) {
            self.error.get_or_insert(e);
        }
    }

    fn on_validation(&mut self, update: usize, loss: f64, outcome: EvalOutcome) {
        info!(
            "update {update}: validation loss {loss:.6}{}",
            if outcome.improved { " (best)" } else { "" }
        );
    }

    fn on_checkpoint(&mut self, params: &ModelParams, _update: usize, _loss: f64) -> Result<(), String> {
        save_model(self.dir.join(BEST_MODEL), params, &self.meta, self.config.dtype).map_err(|e| e.to_string())
    }
}

/// Builds or loads vocabularies, trains, and writes vocabularies, the
/// config snapshot, the update log and checkpoints into `output_dir`.
pub fn cmd_train(config: &RunConfig) -> Result<TrainSummary> {
    let data = &config.data;
    let (Some(train_src), Some(train_tgt)) = (&data.train_source, &data.train_target) else {
        bail!("missing training corpus path: set data.train_source and data.train_target");
    };
    ensure!(data.factors >= 1, "invalid config field `data.factors`: must be at least 1");
    let src_lines = read_file_lines(train_src)?;
    let tgt_lines = read_file_lines(train_tgt)?;
    ensure!(!src_lines.is_empty(), "training corpus {} is empty", train_src.display());

    let source_vocabs = if data.source_vocabs.is_empty() {
        build_factor_vocabs(&src_lines, data.factors, &[data.max_source_vocab])
            .with_context(|| format!("in {}", train_src.display()))?
    } else {
        ensure!(
            data.source_vocabs.len() == data.factors,
            "invalid config field `data.source_vocabs`: {} files for {} factors",
            data.source_vocabs.len(),
            data.factors
        );
        data.source_vocabs.iter().map(|p| read_vocab(p)).collect::<Result<_>>()?
    };
    let target_vocab = match &data.target_vocab {
        Some(p) => read_vocab(p)?,
        None => Vocab::build(tgt_lines.iter().map(|l| l.split_whitespace()), data.max_target_vocab),
    };

    let src = read_factored_corpus(&src_lines, &source_vocabs).with_context(|| format!("in {}", train_src.display()))?;
    let tgt = read_corpus(&tgt_lines, &target_vocab).with_context(|| format!("in {}", train_tgt.display()))?;
    let train = pair_lines(&src, &tgt).with_context(|| format!("{} vs {}", train_src.display(), train_tgt.display()))?;
    let valid = match (&data.valid_source, &data.valid_target) {
        (Some(s), Some(t)) => load_pairs(s, t, &source_vocabs, &target_vocab)?,
        (None, None) => Vec::new(),
        _ => bail!("invalid config: data.valid_source and data.valid_target must be given together"),
    };

    let model = config
        .model
        .model_config(&source_vocabs.iter().map(Vocab::len).collect::<Vec<_>>(), target_vocab.len())?;
    let training = config.training_config(model.clone());

    let dir = &config.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut source_names = Vec::new();
    for (f, v) in source_vocabs.iter().enumerate() {
        let name = format!("source.{f}.vocab");
        write_vocab(&dir.join(&name), v)?;
        source_names.push(name);
    }
    write_vocab(&dir.join("target.vocab"), &target_vocab)?;
    fs::write(dir.join(CONFIG_SNAPSHOT), config.to_json())?;

    let mut meta = ArchiveMetadata::new(model);
    meta.source_vocabs = source_names;
    meta.target_vocab = Some("target.vocab".into());
    meta.run = config.snapshot();

    let mut observer = CheckpointWriter {
        dir,
        meta: meta.clone(),
        config,
        log: BufWriter::new(File::create(dir.join(TRAIN_LOG))?),
        error: None,
    };
    let summary = train_loop(&train, &valid, &training, &MetricRegistry::default(), &mut observer)?;
    observer.log.flush()?;
    if let Some(e) = observer.error {
        return Err(e).context("writing the training log");
    }
    if summary.best_valid.is_none() {
        save_model(dir.join(BEST_MODEL), &summary.best_params, &meta, config.dtype)?;
    }
    save_model(dir.join(FINAL_MODEL), &summary.final_params, &meta, config.dtype)?;
    info!(
        "trained {} updates over {} epochs{}",
        summary.updates,
        summary.epochs,
        if summary.stopped_early { " (early stop)" } else { "" }
    );
    Ok(summary)
}

#[derive(Clone, Debug)]
pub struct TranslateOptions {
    pub models: Vec<PathBuf>,
    pub beam: BeamConfig,
    /// Emit `id ||| tokens ||| logprob normalised` lines for every
    /// hypothesis instead of the single best translation.
    pub nbest: bool,
    pub attention_out: Option<PathBuf>,
    pub graph_out: Option<PathBuf>,
    pub threads: usize,
}

fn tokens(v: &Vocab, ids: &[usize]) -> Vec<String> {
    ids.iter().map(|&i| v.token(i).to_string()).collect()
}

/// One output line per input line.
pub fn cmd_translate(opts: &TranslateOptions, input: impl BufRead, mut output: impl Write) -> Result<()> {
    let (models, source_vocabs, target_vocab) = load_ensemble(&opts.models)?;
    let lines = read_lines(input)?;
    let sources: Vec<FactoredSentence> = read_factored_corpus(&lines, &source_vocabs).context("in the input")?;
    let results = translate_corpus(&models, &sources, &opts.beam, opts.threads)?;

    let mut attention = String::new();
    let mut graphs = String::new();
    for (i, (out, line)) in results.iter().zip(&lines).enumerate() {
        if out.forced {
            warn!("sentence {i}: no hypothesis ended within {} tokens", opts.beam.max_len);
        }
        if opts.nbest {
            for h in &out.hypotheses {
                let e = NbestEntry {
                    sentence: i,
                    tokens: tokens(&target_vocab, h.output()),
                    features: vec![h.logprob, h.normalized_score(opts.beam.length_norm)],
                };
                writeln!(output, "{}", format_nbest_line(&e))?;
            }
        } else {
            writeln!(output, "{}", tokens(&target_vocab, out.best().output()).join(" "))?;
        }
        if opts.attention_out.is_some() {
            let best = out.best();
            let mut src: Vec<String> = line.split_whitespace().map(str::to_string).collect();
            src.push(cgru::io::EOS_TOKEN.to_string());
            let tgt = tokens(&target_vocab, &best.tokens);
            attention.push_str(&emit_attention(&src, &tgt, &best.attention)?);
            attention.push('\n');
        }
        if opts.graph_out.is_some() {
            graphs.push_str(&emit_search_graph(&out.graph, |t| target_vocab.token(t).to_string()));
        }
    }
    if let Some(p) = &opts.attention_out {
        fs::write(p, attention).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &opts.graph_out {
        fs::write(p, graphs).with_context(|| format!("writing {}", p.display()))?;
    }
    output.flush()?;
    Ok(())
}

/// One log-probability per sentence pair.
pub fn cmd_score(models: &[PathBuf], source: &Path, target: &Path, mut output: impl Write) -> Result<()> {
    let (params, source_vocabs, target_vocab) = load_ensemble(models)?;
    let pairs = load_pairs(source, target, &source_vocabs, &target_vocab)?;
    for s in score_corpus(&params, &pairs)? {
        writeln!(output, "{}", s.logprob)?;
    }
    output.flush()?;
    Ok(())
}

/// Appends one score per model to every n-best line.
pub fn cmd_rescore(
    models: &[PathBuf],
    source: &Path,
    nbest: impl BufRead,
    resort: bool,
    mut output: impl Write,
) -> Result<()> {
    let (params, source_vocabs, target_vocab) = load_ensemble(models)?;
    let sources = read_factored_corpus(&read_file_lines(source)?, &source_vocabs)?;
    let entries = read_lines(nbest)?
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_nbest_line(l, i + 1))
        .collect::<Result<Vec<_>, _>>()?;
    for e in rescore_nbest(&entries, &sources, &target_vocab, &params, resort)? {
        writeln!(output, "{}", format_nbest_line(&e))?;
    }
    output.flush()?;
    Ok(())
}

/// Target ids (with EOS) of a plain token line.
pub fn encode_target(vocab: &Vocab, line: &str) -> Vec<usize> {
    let mut ids: Vec<usize> = line.split_whitespace().map(|t| vocab.id(t)).collect();
    ids.push(EOS);
    ids
}
