//! The co-training model: a visual extractor, the semantic stream, a mixed
//! stream built by coordinate-wise max, and one classifier shared by the
//! visual and mixed streams.
//!
//! Training minimises
//!
//! ```text
//! L = (1/N) Σ CE(W·x_v + b, y) + λ · (1/N) Σ CE(W·max(x_v, x_s) + b, y)
//! ```
//!
//! Inference only ever sees raw visual features.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{semantic_forward_graph, PoolingMode};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::{sgd_step, SgdConfig};
use crate::tensor::Tensor;
use crate::text::EmbeddingTable;

pub const CHECKPOINT_MAGIC: &str = "#sicot-checkpoint v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    /// Width shared by the visual feature and the semantic embedding.
    pub dim: usize,
    pub num_classes: usize,
    pub mode: PoolingMode,
    pub classifier_bias: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.dim == 0 || self.num_classes == 0 {
            return Err(Error::Spec("input_dim, dim and num_classes must be positive".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Spec("hidden layer widths must be positive".into()));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden_dims);
        widths.push(self.dim);
        widths.windows(2).map(|w| (w[1], w[0])).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SicotModel {
    pub config: ModelConfig,
    pub extractor: Vec<Layer>,
    pub embeddings: EmbeddingTable,
    pub classifier_weight: Tensor,
    pub classifier_bias: Tensor,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("consistent shape")
}

impl SicotModel {
    /// Xavier-uniform weights and zero biases from a seeded generator.
    pub fn init(config: ModelConfig, embeddings: EmbeddingTable, seed: u64) -> Result<Self> {
        config.validate()?;
        if embeddings.dim() != config.dim {
            return Err(Error::dim(format!(
                "embedding width {} must equal feature dim {}",
                embeddings.dim(),
                config.dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extractor = config
            .layer_dims()
            .into_iter()
            .map(|(out, inp)| Layer {
                weight: xavier(&mut rng, out, inp),
                bias: Tensor::zeros(vec![out]),
            })
            .collect();
        let classifier_weight = xavier(&mut rng, config.num_classes, config.dim);
        let classifier_bias = Tensor::zeros(vec![config.num_classes]);
        Ok(SicotModel {
            config,
            extractor,
            embeddings,
            classifier_weight,
            classifier_bias,
        })
    }

    /// Named parameter tensors in a fixed order: extractor layers, classifier,
    /// then the embedding table.
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.extractor.iter().enumerate() {
            out.push((format!("extractor.{i}.weight"), &l.weight));
            out.push((format!("extractor.{i}.bias"), &l.bias));
        }
        out.push(("classifier.weight".into(), &self.classifier_weight));
        out.push(("classifier.bias".into(), &self.classifier_bias));
        out.push(("embeddings".into(), &self.embeddings.matrix));
        out
    }

    /// Checks a raw feature vector and runs the visual stream on it.
    pub fn visual_forward(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.config.input_dim {
            return Err(Error::dim(format!(
                "raw features have width {}, extractor expects {}",
                raw.len(),
                self.config.input_dim
            )));
        }
        let mut g = Graph::new();
        let vars = bind(&mut g, self, &Trainable::none());
        let x = g.constant(Tensor::vector(raw.to_vec()));
        let xv = visual_stream(&mut g, &vars, x)?;
        Ok(g.value(xv).data().to_vec())
    }

    pub fn classify(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = bind(&mut g, self, &Trainable::none());
        let x = g.constant(Tensor::vector(x.to_vec()));
        let logits = g.linear(vars.classifier_weight, vars.classifier_bias, x)?;
        Ok(g.value(logits).data().to_vec())
    }

    /// Visual-only prediction: classes by descending logit, ties by index.
    pub fn infer(&self, raw: &[f64]) -> Result<Vec<usize>> {
        let xv = self.visual_forward(raw)?;
        Ok(rank_logits(&self.classify(&xv)?))
    }

    pub fn save(&self, path: &Path, version: &str) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write_to(&mut out, version).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_to<W: Write>(&self, mut out: W, version: &str) -> std::io::Result<()> {
        let c = &self.config;
        let hidden: Vec<String> = c.hidden_dims.iter().map(usize::to_string).collect();
        writeln!(out, "{CHECKPOINT_MAGIC}")?;
        writeln!(out, "version={version}")?;
        writeln!(out, "input_dim={}", c.input_dim)?;
        writeln!(out, "hidden_dims={}", hidden.join(","))?;
        writeln!(out, "dim={}", c.dim)?;
        writeln!(out, "num_classes={}", c.num_classes)?;
        writeln!(out, "mode={}", c.mode)?;
        writeln!(out, "classifier_bias={}", c.classifier_bias)?;
        writeln!(out, "trainable_embeddings={}", self.embeddings.trainable)?;
        for (name, t) in self.named_tensors() {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(out, "tensor {name} {}", shape.join(","))?;
            let values: Vec<String> = t.data().iter().map(f64::to_string).collect();
            writeln!(out, "{}", values.join(" "))?;
        }
        writeln!(out, "end")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file), &path.display().to_string())
    }

    pub fn read_from<R: BufRead>(reader: R, source: &str) -> Result<Self> {
        let lines: Vec<String> = reader
            .lines()
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::format(source, 0, e.to_string()))?;
        let err = |line: usize, msg: String| Error::format(source, line, msg);
        if lines.first().map(String::as_str) != Some(CHECKPOINT_MAGIC) {
            return Err(err(1, format!("expected `{CHECKPOINT_MAGIC}`")));
        }
        let mut fields = std::collections::HashMap::new();
        let mut idx = 1;
        while idx < lines.len() && !lines[idx].starts_with("tensor ") && lines[idx] != "end" {
            let (k, v) = lines[idx]
                .split_once('=')
                .ok_or_else(|| err(idx + 1, "expected key=value".into()))?;
            fields.insert(k.to_string(), v.to_string());
            idx += 1;
        }
        let get = |k: &str| {
            fields
                .get(k)
                .cloned()
                .ok_or_else(|| err(idx, format!("missing header field `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| err(idx, format!("bad value for `{k}`")))
        };
        let flag = |k: &str| -> Result<bool> {
            get(k)?.parse().map_err(|_| err(idx, format!("bad value for `{k}`")))
        };
        let hidden = get("hidden_dims")?;
        let hidden_dims = if hidden.is_empty() {
            Vec::new()
        } else {
            hidden
                .split(',')
                .map(|s| s.parse().map_err(|_| err(idx, format!("bad hidden width `{s}`"))))
                .collect::<Result<_>>()?
        };
        let config = ModelConfig {
            input_dim: num("input_dim")?,
            hidden_dims,
            dim: num("dim")?,
            num_classes: num("num_classes")?,
            mode: get("mode")?.parse()?,
            classifier_bias: flag("classifier_bias")?,
        };
        config.validate()?;
        let trainable = flag("trainable_embeddings")?;

        let mut tensors = std::collections::HashMap::new();
        while idx < lines.len() && lines[idx] != "end" {
            let header = &lines[idx];
            let parts: Vec<&str> = header.split(' ').collect();
            let (name, shape) = match parts.as_slice() {
                ["tensor", name, shape] => (name.to_string(), *shape),
                _ => return Err(err(idx + 1, format!("expected tensor header, got `{header}`"))),
            };
            let shape: Vec<usize> = shape
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| err(idx + 1, format!("bad shape `{s}`"))))
                .collect::<Result<_>>()?;
            let body = lines
                .get(idx + 1)
                .ok_or_else(|| err(idx + 2, "missing tensor values".into()))?;
            let data: Vec<f64> = body
                .split(' ')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| err(idx + 2, format!("bad value `{s}`"))))
                .collect::<Result<_>>()?;
            let t = Tensor::new(shape, data).map_err(|e| err(idx + 2, e.to_string()))?;
            tensors.insert(name, t);
            idx += 2;
        }
        if idx >= lines.len() {
            return Err(err(lines.len(), "truncated checkpoint (no `end`)".into()));
        }
        let mut take = |name: &str, shape: Vec<usize>| -> Result<Tensor> {
            let t = tensors
                .remove(name)
                .ok_or_else(|| err(idx, format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::dim(format!(
                    "tensor `{name}` has shape {:?}, config implies {:?}",
                    t.shape(),
                    shape
                )));
            }
            Ok(t)
        };
        let extractor = config
            .layer_dims()
            .into_iter()
            .enumerate()
            .map(|(i, (out, inp))| {
                Ok(Layer {
                    weight: take(&format!("extractor.{i}.weight"), vec![out, inp])?,
                    bias: take(&format!("extractor.{i}.bias"), vec![out])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let classifier_weight = take("classifier.weight", vec![config.num_classes, config.dim])?;
        let classifier_bias = take("classifier.bias", vec![config.num_classes])?;
        let emb = tensors
            .remove("embeddings")
            .ok_or_else(|| err(idx, "missing tensor `embeddings`".into()))?;
        if emb.rank() != 2 || emb.shape()[1] != config.dim {
            return Err(Error::dim(format!("embeddings of shape {:?}", emb.shape())));
        }
        Ok(SicotModel {
            config,
            extractor,
            embeddings: EmbeddingTable {
                matrix: emb,
                trainable,
            },
            classifier_weight,
            classifier_bias,
        })
    }
}

/// Classes sorted by descending logit; equal logits keep ascending index.
pub fn rank_logits(logits: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order
}

/// Which parameter groups are recorded as differentiable leaves.
#[derive(Clone, Copy, Debug)]
pub struct Trainable {
    pub network: bool,
    pub classifier_bias: bool,
    pub embeddings: bool,
}

impl Trainable {
    pub fn none() -> Self {
        Trainable {
            network: false,
            classifier_bias: false,
            embeddings: false,
        }
    }
}

/// Graph handles for every model tensor.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub extractor: Vec<(Var, Var)>,
    pub classifier_weight: Var,
    pub classifier_bias: Var,
    pub embeddings: Var,
}

pub fn bind(g: &mut Graph, model: &SicotModel, trainable: &Trainable) -> ModelVars {
    let leaf = |g: &mut Graph, t: &Tensor, on: bool| if on { g.param(t) } else { g.constant(t.clone()) };
    let extractor = model
        .extractor
        .iter()
        .map(|l| (leaf(g, &l.weight, trainable.network), leaf(g, &l.bias, trainable.network)))
        .collect();
    let classifier_weight = leaf(g, &model.classifier_weight, trainable.network);
    let classifier_bias = leaf(g, &model.classifier_bias, trainable.classifier_bias);
    let embeddings = leaf(g, &model.embeddings.matrix, trainable.embeddings);
    ModelVars {
        extractor,
        classifier_weight,
        classifier_bias,
        embeddings,
    }
}

/// Hidden layers use tanh; the output layer is affine so an identity-initialised
/// single layer passes features through unchanged.
pub fn visual_stream(g: &mut Graph, vars: &ModelVars, raw: Var) -> Result<Var> {
    let mut h = raw;
    let last = vars.extractor.len() - 1;
    for (i, (w, b)) in vars.extractor.iter().enumerate() {
        h = g.linear(*w, *b, h)?;
        if i != last {
            h = g.tanh(h);
        }
    }
    Ok(h)
}

pub fn mixed_feature(g: &mut Graph, visual: Var, semantic: Var) -> Result<Var> {
    g.elementwise_max(visual, semantic)
}

pub fn mixed_feature_values(visual: &[f64], semantic: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let v = g.constant(Tensor::vector(visual.to_vec()));
    let s = g.constant(Tensor::vector(semantic.to_vec()));
    let m = mixed_feature(&mut g, v, s)?;
    Ok(g.value(m).data().to_vec())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub visual_term: f64,
    pub mixed_term: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub visual: Var,
    pub mixed: Option<Var>,
}

/// Records the co-training objective for `[n, d]` visual features and,
/// optionally, `[n, d]` semantic embeddings. Each CE term is `scale · Σ_i`,
/// so a full batch uses `scale = 1/n`.
///
/// With `λ = 0` the mixed term is still recorded for reporting but is not
/// part of the differentiated total, so the semantic stream receives no
/// gradient and the classifier sees exactly the visual-only update.
pub fn cotrain_objective(
    g: &mut Graph,
    vars: &ModelVars,
    visual: Var,
    semantic: Option<Var>,
    labels: &[usize],
    lambda: f64,
    scale: f64,
) -> Result<LossVars> {
    let (w, b) = (vars.classifier_weight, vars.classifier_bias);
    let logits_v = g.linear(w, b, visual)?;
    let ce_v = g.cross_entropy_scaled(logits_v, labels, scale)?;
    let Some(semantic) = semantic else {
        return Ok(LossVars {
            total: ce_v,
            visual: ce_v,
            mixed: None,
        });
    };
    let mixed = mixed_feature(g, visual, semantic)?;
    let logits_m = g.linear(w, b, mixed)?;
    let ce_m = g.cross_entropy_scaled(logits_m, labels, scale)?;
    let total = if lambda == 0.0 {
        ce_v
    } else {
        let weighted = g.scale(ce_m, lambda);
        g.add(ce_v, weighted)?
    };
    Ok(LossVars {
        total,
        visual: ce_v,
        mixed: Some(ce_m),
    })
}

/// Evaluates the objective on precomputed per-sample features.
pub fn cotrain_loss(
    model: &SicotModel,
    visual: &[Vec<f64>],
    semantic: &[Vec<f64>],
    labels: &[usize],
    lambda: f64,
) -> Result<LossBreakdown> {
    if visual.is_empty() || visual.len() != semantic.len() || visual.len() != labels.len() {
        return Err(Error::dim("cotrain_loss: batch parts must be non-empty and of equal length"));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Spec(format!("lambda must be nonnegative, got {lambda}")));
    }
    let mut g = Graph::new();
    let vars = bind(&mut g, model, &Trainable::none());
    let xv = g.constant(Tensor::matrix(visual)?);
    let xs = g.constant(Tensor::matrix(semantic)?);
    let lv = cotrain_objective(&mut g, &vars, xv, Some(xs), labels, lambda, 1.0 / labels.len() as f64)?;
    Ok(breakdown(&g, &lv, lambda))
}

fn breakdown(g: &Graph, lv: &LossVars, lambda: f64) -> LossBreakdown {
    let visual_term = g.value(lv.visual).data()[0];
    let mixed_term = lv.mixed.map_or(0.0, |m| g.value(m).data()[0]);
    LossBreakdown {
        total: visual_term + lambda * mixed_term,
        visual_term,
        mixed_term,
    }
}

/// A training example whose title has at least one in-vocabulary word.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub features: Vec<f64>,
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub sgd: SgdConfig,
    pub lambda: f64,
    /// Baseline: no semantic or mixed stream at all.
    pub visual_only: bool,
    pub workers: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            sgd: SgdConfig::default(),
            lambda: 1.0,
            visual_only: false,
            workers: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub batches: usize,
    pub samples: usize,
    pub loss: LossBreakdown,
}

struct ChunkResult {
    grads: Vec<Vec<f64>>,
    loss: LossBreakdown,
}

fn trainable_for(model: &SicotModel, opts: &TrainOptions) -> Trainable {
    Trainable {
        network: true,
        classifier_bias: model.config.classifier_bias,
        embeddings: !opts.visual_only && model.embeddings.trainable,
    }
}

fn param_vars(vars: &ModelVars, t: &Trainable) -> Vec<Var> {
    let mut out = Vec::new();
    for (w, b) in &vars.extractor {
        out.push(*w);
        out.push(*b);
    }
    out.push(vars.classifier_weight);
    if t.classifier_bias {
        out.push(vars.classifier_bias);
    }
    if t.embeddings {
        out.push(vars.embeddings);
    }
    out
}

fn run_chunk(
    model: &SicotModel,
    samples: &[&TrainSample],
    opts: &TrainOptions,
    batch_len: usize,
) -> Result<ChunkResult> {
    let trainable = trainable_for(model, opts);
    let mut g = Graph::new();
    let vars = bind(&mut g, model, &trainable);
    let raw_rows: Vec<Vec<f64>> = samples.iter().map(|s| s.features.clone()).collect();
    let raw = g.constant(Tensor::matrix(&raw_rows)?);
    let visual = visual_stream(&mut g, &vars, raw)?;
    let semantic = if opts.visual_only {
        None
    } else {
        let mut parts = Vec::with_capacity(samples.len());
        for s in samples {
            let att = semantic_forward_graph(&mut g, vars.embeddings, &s.tokens, model.config.mode)?;
            parts.push(att.embedding);
        }
        Some(g.stack(&parts)?)
    };
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let scale = 1.0 / batch_len as f64;
    let lv = cotrain_objective(&mut g, &vars, visual, semantic, &labels, opts.lambda, scale)?;
    g.backward(lv.total)?;
    let grads = param_vars(&vars, &trainable)
        .into_iter()
        .map(|v| g.grad(v).expect("populated by backward").to_vec())
        .collect();
    Ok(ChunkResult {
        grads,
        loss: breakdown(&g, &lv, opts.lambda),
    })
}

fn split_even<T>(items: &[T], parts: usize) -> Vec<&[T]> {
    let parts = parts.clamp(1, items.len().max(1));
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(&items[start..start + len]);
        start += len;
    }
    out
}

/// Forward and backward for one mini-batch, split across workers. Worker
/// gradients are summed in worker-index order.
fn batch_gradients(model: &SicotModel, batch: &[&TrainSample], opts: &TrainOptions) -> Result<ChunkResult> {
    let chunks = split_even(batch, opts.workers);
    let results: Vec<Result<ChunkResult>> = if chunks.len() == 1 {
        vec![run_chunk(model, chunks[0], opts, batch.len())]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .iter()
                .map(|c| scope.spawn(move || run_chunk(model, c, opts, batch.len())))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        })
    };
    let mut iter = results.into_iter();
    let mut acc = iter.next().expect("at least one chunk")?;
    for r in iter {
        let r = r?;
        for (a, g) in acc.grads.iter_mut().zip(&r.grads) {
            a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
        }
        acc.loss.visual_term += r.loss.visual_term;
        acc.loss.mixed_term += r.loss.mixed_term;
    }
    acc.loss.total = acc.loss.visual_term + opts.lambda * acc.loss.mixed_term;
    Ok(acc)
}

fn apply_gradients(model: &mut SicotModel, grads: &[Vec<f64>], opts: &TrainOptions, epoch: usize) -> Result<()> {
    let trainable = trainable_for(model, opts);
    let mut params: Vec<(String, &mut Tensor)> = Vec::new();
    for (i, l) in model.extractor.iter_mut().enumerate() {
        params.push((format!("extractor.{i}.weight"), &mut l.weight));
        params.push((format!("extractor.{i}.bias"), &mut l.bias));
    }
    params.push(("classifier.weight".into(), &mut model.classifier_weight));
    if trainable.classifier_bias {
        params.push(("classifier.bias".into(), &mut model.classifier_bias));
    }
    if trainable.embeddings {
        params.push(("embeddings".into(), &mut model.embeddings.matrix));
    }
    for ((_, t), g) in params.iter_mut().zip(grads) {
        t.accumulate_grad(g)?;
    }
    let mut named: Vec<(&str, &mut Tensor)> = params.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
    sgd_step(&mut named, &opts.sgd, epoch)
}

/// One pass over `data` in a seeded shuffled order. The result is a pure
/// function of (model, data, options, epoch, seed).
pub fn train_epoch(
    model: &mut SicotModel,
    data: &[TrainSample],
    opts: &TrainOptions,
    epoch: usize,
    seed: u64,
) -> Result<EpochStats> {
    opts.sgd.validate()?;
    if !(opts.lambda >= 0.0) {
        return Err(Error::Spec(format!("lambda must be nonnegative, got {}", opts.lambda)));
    }
    if data.is_empty() {
        return Err(Error::Spec("empty training set".into()));
    }
    if let Some(s) = data.iter().find(|s| s.tokens.is_empty() && !opts.visual_only) {
        return Err(Error::EmptyTitle(format!(
            "training sample with label {} has an empty title",
            s.label
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);

    let mut stats = EpochStats {
        epoch,
        learning_rate: opts.sgd.effective_lr(epoch),
        ..EpochStats::default()
    };
    for idx in order.chunks(opts.sgd.batch_size) {
        let batch: Vec<&TrainSample> = idx.iter().map(|&i| &data[i]).collect();
        let result = batch_gradients(model, &batch, opts)?;
        apply_gradients(model, &result.grads, opts, epoch)?;
        let n = batch.len() as f64;
        stats.loss.visual_term += result.loss.visual_term * n;
        stats.loss.mixed_term += result.loss.mixed_term * n;
        stats.batches += 1;
        stats.samples += batch.len();
    }
    let n = stats.samples as f64;
    stats.loss.visual_term /= n;
    stats.loss.mixed_term /= n;
    stats.loss.total = stats.loss.visual_term + opts.lambda * stats.loss.mixed_term;
    Ok(stats)
}
