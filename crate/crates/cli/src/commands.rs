//! The five pipeline commands. Each is a pure function of the config and its
//! input files; the returned string is what the binary prints.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sicot_core::attention::{semantic_forward, SemanticStreamConfig};
use sicot_core::eval::{evaluate, head_tail_split, EvalReport};
use sicot_core::gradcheck::{standard_suite, GradCheckOptions, NamedCheck};
use sicot_core::model::{train_epoch, EpochStats, SicotModel, TrainSample};
use sicot_core::shard::ShardSet;
use sicot_core::synth::{
    generate, pretrained_word_vectors, read_manifest, shared_vocab_fraction, write_manifest, DatasetManifest, GeneratorState, Split,
};
use sicot_core::text::{build_vocab, encode, load_embeddings, tokenize, write_word2vec, Vocab};
use sicot_core::VERSION;

use crate::config::RunConfig;
use crate::error::CliError;

pub type CliResult<T> = Result<T, CliError>;

/// Keeps the embedding initialisation stream apart from model initialisation.
const EMBEDDING_SEED_SALT: u64 = 0x5eed_e3b0;

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn synthesize(cfg: &RunConfig) -> CliResult<(DatasetManifest, GeneratorState)> {
    Ok(generate(&cfg.spec())?)
}

pub fn cmd_synth(cfg: &RunConfig) -> CliResult<String> {
    let (manifest, state) = synthesize(cfg)?;
    write_manifest(&manifest, &cfg.manifest)?;
    let mut wrote = cfg.manifest.display().to_string();
    if let Some(path) = cfg.embeddings_path() {
        let vectors = pretrained_word_vectors(
            &cfg.spec(),
            &state,
            cfg.dim,
            cfg.word_vector_scale,
            cfg.word_vector_spread,
        );
        let rows: Vec<(&str, &[f64])> = vectors.iter().map(|(w, v)| (w.as_str(), v.as_slice())).collect();
        write_word2vec(path, cfg.dim, &rows)?;
        wrote = format!("{wrote} and {}", path.display());
    }
    let shared = shared_vocab_fraction(&manifest, cfg.head_tail_threshold)?;
    let train = manifest.split(Split::Train).count();
    let test = manifest.split(Split::Test).count();
    Ok(format!(
        "wrote {wrote}: classes={} train={} test={} shared_vocab_fraction={:.4} signature_balance={:.3}\n",
        manifest.classes,
        train,
        test,
        shared,
        state.signature_balance(&manifest)
    ))
}

/// Training set as seen by the model: vocabulary built from training titles,
/// and the training records whose titles keep at least one word.
pub struct Prepared {
    pub vocab: Vocab,
    pub samples: Vec<TrainSample>,
    pub skipped: usize,
}

pub fn prepare(cfg: &RunConfig, manifest: &DatasetManifest) -> CliResult<Prepared> {
    let corpus: Vec<Vec<String>> = manifest.split(Split::Train).map(|r| tokenize(&r.title)).collect();
    let vocab = build_vocab(&corpus, cfg.drop_fraction)?;
    let mut samples = Vec::new();
    let mut skipped = 0;
    for r in manifest.split(Split::Train) {
        let rec = encode(&r.sample_id, &r.title, &vocab);
        if rec.droppable() {
            skipped += 1;
            continue;
        }
        samples.push(TrainSample {
            features: r.features.clone(),
            tokens: rec.tokens,
            label: r.label,
        });
    }
    Ok(Prepared {
        vocab,
        samples,
        skipped,
    })
}

pub struct TrainOutcome {
    pub model: SicotModel,
    pub vocab: Vocab,
    pub epochs: Vec<EpochStats>,
    pub log: String,
}

pub fn train_model(cfg: &RunConfig, manifest: &DatasetManifest) -> CliResult<TrainOutcome> {
    let prepared = prepare(cfg, manifest)?;
    let (mut table, stats) = load_embeddings(
        cfg.embeddings_path(),
        &prepared.vocab,
        cfg.dim,
        cfg.seed ^ EMBEDDING_SEED_SALT,
    )?;
    table.trainable = !cfg.freeze_embeddings;
    let mut model = SicotModel::init(cfg.model_config(manifest.dim, manifest.classes), table, cfg.seed)?;
    let opts = cfg.train_options();

    let mut log = format!("# {VERSION}\n");
    for line in cfg.echo().lines() {
        let _ = writeln!(log, "# {line}");
    }
    let _ = writeln!(
        log,
        "vocab={} dropped_frequent={} dropped_infrequent={} embeddings_copied={} embeddings_random={} \
         train_samples={} skipped_empty_titles={}",
        prepared.vocab.len(),
        prepared.vocab.dropped_frequent().len(),
        prepared.vocab.dropped_infrequent().len(),
        stats.copied,
        stats.random,
        prepared.samples.len(),
        prepared.skipped
    );
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        let s = train_epoch(&mut model, &prepared.samples, &opts, e, cfg.seed)?;
        let _ = writeln!(
            log,
            "epoch={} lr={} batches={} loss={:.6} visual={:.6} mixed={:.6}",
            s.epoch, s.learning_rate, s.batches, s.loss.total, s.loss.visual_term, s.loss.mixed_term
        );
        epochs.push(s);
    }
    Ok(TrainOutcome {
        model,
        vocab: prepared.vocab,
        epochs,
        log,
    })
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<String> {
    let manifest = read_manifest(&cfg.manifest)?;
    let out = train_model(cfg, &manifest)?;
    out.vocab.save(&cfg.vocab)?;
    out.model.save(&cfg.checkpoint, VERSION)?;
    write_file(&cfg.log, &out.log)?;
    let last = out.epochs.last().map_or(String::from("no epochs"), |s| {
        format!("final loss={:.6}", s.loss.total)
    });
    Ok(format!(
        "trained {} epochs ({last}); wrote {}, {}, {}\n",
        out.epochs.len(),
        cfg.checkpoint.display(),
        cfg.vocab.display(),
        cfg.log.display()
    ))
}

/// Scores the visual-only inference path on the test split. With more than
/// one shard the ranking comes from the sharded top-k merge.
pub fn evaluate_model(cfg: &RunConfig, model: &SicotModel, manifest: &DatasetManifest) -> CliResult<EvalReport> {
    let split = head_tail_split(&manifest.train_counts(), cfg.head_tail_threshold);
    let records = manifest.split(Split::Test).map(|r| (r.features.as_slice(), r.label));
    let report = if cfg.shards > 1 {
        let shards = ShardSet::from_dense(&model.classifier_weight, model.classifier_bias.data(), cfg.shards)?;
        let k = manifest.classes.min(3);
        evaluate(
            |x| {
                let v = model.visual_forward(x)?;
                Ok(shards.sharded_topk(&v, k)?.into_iter().map(|(c, _)| c).collect())
            },
            records,
            &split,
        )?
    } else {
        evaluate(|x| model.infer(x), records, &split)?
    };
    Ok(report)
}

pub fn render_report(cfg: &RunConfig, report: &EvalReport) -> String {
    let mut out = format!("version={VERSION}\n");
    for (k, v) in report.key_values() {
        let _ = writeln!(out, "{k}={v}");
    }
    let _ = writeln!(out, "test_records={}", report.records);
    out.push('\n');
    out.push_str(&report.table());
    out.push_str("\n# config\n");
    out.push_str(&cfg.echo());
    out
}

pub fn cmd_eval(cfg: &RunConfig) -> CliResult<String> {
    let model = SicotModel::load(&cfg.checkpoint)?;
    let manifest = read_manifest(&cfg.manifest)?;
    let report = evaluate_model(cfg, &model, &manifest)?;
    let text = render_report(cfg, &report);
    write_file(&cfg.report, &text)?;
    Ok(text)
}

pub fn gradcheck_suite(cfg: &RunConfig) -> CliResult<Vec<NamedCheck>> {
    Ok(standard_suite(cfg.seed, GradCheckOptions::with_tolerance(cfg.gradcheck_tolerance))?)
}

/// Fails (after printing every row) when any check exceeds the tolerance.
pub fn cmd_gradcheck(cfg: &RunConfig) -> CliResult<String> {
    let checks = gradcheck_suite(cfg)?;
    let mut out = String::new();
    for c in &checks {
        let _ = writeln!(out, "{:<20} {}", c.name, c.report);
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.report.passed()).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(out)
    } else {
        print!("{out}");
        Err(CliError::CheckFailed(format!("gradient check failed for {}", failed.join(", "))))
    }
}

/// Per-word attention for `title` under the trained embeddings, highest
/// weight first. Words outside the vocabulary are listed separately.
pub fn cmd_attn(cfg: &RunConfig, title: &str) -> CliResult<String> {
    let model = SicotModel::load(&cfg.checkpoint)?;
    let vocab = Vocab::load(&cfg.vocab)?;
    let words = tokenize(title);
    let (kept, oov): (Vec<&String>, Vec<&String>) = words.iter().partition(|w| vocab.get(w).is_some());
    let tokens: Vec<usize> = kept.iter().filter_map(|w| vocab.get(w)).collect();
    let stream = SemanticStreamConfig {
        dim: model.config.dim,
        mode: model.config.mode,
    };
    let att = semantic_forward(&tokens, &model.embeddings, &stream)?;
    let mut order: Vec<usize> = (0..tokens.len()).collect();
    order.sort_by(|&a, &b| att.alpha[b].total_cmp(&att.alpha[a]).then(a.cmp(&b)));
    let mut out = format!("# mode={}\nrank\tword\talpha\n", model.config.mode);
    for (rank, &j) in order.iter().enumerate() {
        let _ = writeln!(out, "{}\t{}\t{:.6}", rank + 1, kept[j], att.alpha[j]);
    }
    let _ = writeln!(out, "sum\t\t{:.6}", att.alpha.iter().sum::<f64>());
    if !oov.is_empty() {
        let list: Vec<&str> = oov.iter().map(|s| s.as_str()).collect();
        let _ = writeln!(out, "# out of vocabulary: {}", list.join(" "));
    }
    Ok(out)
}
