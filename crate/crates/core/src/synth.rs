//! Synthetic long-tailed multimodal datasets.
//!
//! Each class gets a unit-norm prototype; samples are the prototype plus
//! isotropic Gaussian noise. Tail classes are perturbations of a head
//! "parent" and share a pool of title words with it, so that knowledge
//! carried by the titles can flow from head to tail. Titles mix four word
//! kinds:
//!
//! * signature words, exclusive to one class and spread so that every one of
//!   them occurs about equally often in the training corpus;
//! * pool words, shared inside a parent/children family (these are what
//!   makes head and tail vocabularies overlap);
//! * promotion words, frequent across the whole corpus;
//! * one-off junk tokens on a fraction of titles.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::text::tokenize;

pub const MANIFEST_MAGIC: &str = "#sicot-manifest v1";

const PROMOTION_WORDS: [&str; 16] = [
    "sale", "free", "shipping", "new", "hot", "original", "genuine", "discount", "official",
    "store", "best", "quality", "cheap", "deal", "brand", "2024",
];

#[derive(Clone, Debug, PartialEq)]
pub struct LongTailSpec {
    pub num_classes: usize,
    pub n_max: usize,
    pub imbalance_factor: f64,
    pub head_tail_threshold: usize,
    pub feature_dim: usize,
    pub test_per_class: usize,
    pub noise_sigma: f64,
    /// Distance of a tail prototype from its parent before renormalizing.
    pub tail_offset: f64,
    pub signature_per_title: usize,
    pub pool_per_title: usize,
    pub promo_per_title: usize,
    /// Probability that a training title carries a one-off junk token.
    pub junk_rate: f64,
    pub shared_fraction: f64,
    /// Upper bound on max/min signature-word frequency in the training split.
    pub max_word_ratio: f64,
    pub seed: u64,
}

impl Default for LongTailSpec {
    fn default() -> Self {
        LongTailSpec {
            num_classes: 100,
            n_max: 500,
            imbalance_factor: 50.0,
            head_tail_threshold: 100,
            feature_dim: 32,
            test_per_class: 20,
            noise_sigma: 0.2,
            tail_offset: 0.6,
            signature_per_title: 2,
            pool_per_title: 2,
            promo_per_title: 2,
            junk_rate: 0.05,
            shared_fraction: 0.12,
            max_word_ratio: 2.0,
            seed: 0,
        }
    }
}

impl LongTailSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.n_max == 0 {
            return bad("n_max must be >= 1".into());
        }
        if !(self.imbalance_factor >= 1.0) || !self.imbalance_factor.is_finite() {
            return bad(format!("imbalance_factor must be >= 1, got {}", self.imbalance_factor));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1".into());
        }
        if !(self.noise_sigma >= 0.0) || !(self.tail_offset >= 0.0) {
            return bad("noise_sigma and tail_offset must be >= 0".into());
        }
        if self.signature_per_title == 0 {
            return bad("signature_per_title must be >= 1".into());
        }
        if self.promo_per_title > PROMOTION_WORDS.len() {
            return bad(format!("promo_per_title must be <= {}", PROMOTION_WORDS.len()));
        }
        if !(0.0..=1.0).contains(&self.junk_rate) {
            return bad(format!("junk_rate must be in [0, 1], got {}", self.junk_rate));
        }
        if !(0.0..1.0).contains(&self.shared_fraction) {
            return bad(format!("shared_fraction must be in [0, 1), got {}", self.shared_fraction));
        }
        if !(self.max_word_ratio >= 1.0) {
            return bad("max_word_ratio must be >= 1".into());
        }
        Ok(())
    }

    /// Single-line `key=value` echo, written into the manifest.
    pub fn describe(&self) -> String {
        format!(
            "num_classes={} n_max={} imbalance_factor={} head_tail_threshold={} feature_dim={} \
             test_per_class={} noise_sigma={} tail_offset={} signature_per_title={} \
             pool_per_title={} promo_per_title={} junk_rate={} shared_fraction={} \
             max_word_ratio={} seed={}",
            self.num_classes,
            self.n_max,
            self.imbalance_factor,
            self.head_tail_threshold,
            self.feature_dim,
            self.test_per_class,
            self.noise_sigma,
            self.tail_offset,
            self.signature_per_title,
            self.pool_per_title,
            self.promo_per_title,
            self.junk_rate,
            self.shared_fraction,
            self.max_word_ratio,
            self.seed
        )
    }
}

/// `n_c = max(1, round(n_max · IF^(−c/(C−1))))`.
pub fn class_counts(spec: &LongTailSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let c_last = (spec.num_classes - 1) as f64;
    Ok((0..spec.num_classes)
        .map(|c| {
            let n = spec.n_max as f64 * spec.imbalance_factor.powf(-(c as f64) / c_last);
            (n.round() as usize).max(1)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub sample_id: String,
    pub split: Split,
    pub label: usize,
    pub features: Vec<f64>,
    pub title: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub dim: usize,
    pub classes: usize,
    /// Extra `#` lines after the header, stored without the leading `#`.
    pub meta: Vec<String>,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn train_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for r in self.split(Split::Train) {
            counts[r.label] += 1;
        }
        counts
    }
}

/// Everything the generator decided, for tests and diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorState {
    pub class_counts: Vec<usize>,
    pub prototypes: Vec<Vec<f64>>,
    /// Parent head class of each tail class.
    pub parents: Vec<Option<usize>>,
    pub signature_words: Vec<Vec<String>>,
    /// Pool words keyed by the head class that owns the family.
    pub pool_words: BTreeMap<usize, Vec<String>>,
    pub junk_tokens: usize,
}

impl GeneratorState {
    /// Max/min training frequency over all signature words.
    pub fn signature_balance(&self, manifest: &DatasetManifest) -> f64 {
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for words in &self.signature_words {
            for w in words {
                freq.insert(w, 0);
            }
        }
        for r in manifest.split(Split::Train) {
            for tok in tokenize(&r.title) {
                if let Some(f) = freq.get_mut(tok.as_str()) {
                    *f += 1;
                }
            }
        }
        let max = freq.values().copied().max().unwrap_or(0);
        let min = freq.values().copied().min().unwrap_or(0);
        if min == 0 {
            f64::INFINITY
        } else {
            max as f64 / min as f64
        }
    }
}

struct WordMint {
    seen: HashSet<String>,
}

impl WordMint {
    const ONSETS: [&'static str; 16] = [
        "b", "c", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "tr",
    ];
    const VOWELS: [&'static str; 6] = ["a", "e", "i", "o", "u", "ai"];

    fn new() -> Self {
        WordMint {
            seen: PROMOTION_WORDS.iter().map(|w| w.to_string()).collect(),
        }
    }

    fn pseudo_word(&mut self, rng: &mut ChaCha8Rng) -> String {
        loop {
            let syllables = rng.random_range(2..=4);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(Self::ONSETS[rng.random_range(0..Self::ONSETS.len())]);
                w.push_str(Self::VOWELS[rng.random_range(0..Self::VOWELS.len())]);
            }
            if self.seen.insert(w.clone()) {
                return w;
            }
        }
    }

    fn junk(&mut self, rng: &mut ChaCha8Rng) -> String {
        loop {
            let w = format!("sku{:07}", rng.random_range(0..10_000_000u32));
            if self.seen.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Number of signature words for a class so that each is used about as often
/// as the words of the smallest class.
fn signature_count(n_c: usize, n_min: usize, per_title: usize) -> usize {
    let k = (n_c as f64 * per_title as f64 / n_min as f64).round() as usize;
    k.max(per_title)
}

/// Pool size that makes `(promo + pool) / (exclusive + promo + pool)` hit
/// `target`, or an error naming the smallest achievable fraction.
fn pool_size(target: f64, exclusive: usize, promo: usize, capacity: usize) -> Result<usize> {
    let floor = promo as f64 / (exclusive + promo) as f64;
    if target < floor {
        return Err(Error::Spec(format!(
            "shared_fraction {target} is infeasible: promotion words alone give {floor:.4}, \
             the smallest achievable value"
        )));
    }
    let p = ((target * exclusive as f64 - (1.0 - target) * promo as f64) / (1.0 - target)).round();
    let p = p.max(0.0) as usize;
    if p > capacity {
        let best = (promo + capacity) as f64 / (exclusive + promo + capacity) as f64;
        return Err(Error::Spec(format!(
            "shared_fraction {target} is infeasible: head/tail title slots allow at most {best:.4}"
        )));
    }
    Ok(p)
}

fn compose_title(rng: &mut ChaCha8Rng, mut words: Vec<String>) -> String {
    words.shuffle(rng);
    words.join(" ")
}

pub fn generate(spec: &LongTailSpec) -> Result<(DatasetManifest, GeneratorState)> {
    let counts = class_counts(spec)?;
    let classes = spec.num_classes;
    let n_min = *counts.iter().min().expect("at least two classes");
    let is_head: Vec<bool> = counts.iter().map(|&n| n > spec.head_tail_threshold).collect();
    let heads: Vec<usize> = (0..classes).filter(|&c| is_head[c]).collect();
    let tails: Vec<usize> = (0..classes).filter(|&c| !is_head[c]).collect();
    if heads.is_empty() || tails.is_empty() {
        return Err(Error::Spec(format!(
            "head_tail_threshold {} leaves {} head and {} tail classes; both must be nonempty",
            spec.head_tail_threshold,
            heads.len(),
            tails.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut mint = WordMint::new();

    // Geometry: head prototypes are free, tail ones hang off a parent.
    let mut parents = vec![None; classes];
    let mut prototypes = vec![Vec::new(); classes];
    for &h in &heads {
        prototypes[h] = unit_vector(&mut rng, spec.feature_dim);
    }
    for (i, &t) in tails.iter().enumerate() {
        let parent = heads[i % heads.len()];
        parents[t] = Some(parent);
        let u = unit_vector(&mut rng, spec.feature_dim);
        let p = &prototypes[parent];
        prototypes[t] = normalize(p.iter().zip(&u).map(|(a, b)| a + spec.tail_offset * b).collect());
    }

    let signature_words: Vec<Vec<String>> = counts
        .iter()
        .map(|&n| {
            (0..signature_count(n, n_min, spec.signature_per_title))
                .map(|_| mint.pseudo_word(&mut rng))
                .collect()
        })
        .collect();
    let exclusive_sig: usize = signature_words.iter().map(Vec::len).sum();

    let n_train: usize = counts.iter().sum();
    let junk_flags: Vec<bool> = (0..n_train).map(|_| rng.random_bool(spec.junk_rate)).collect();
    let junk_tokens = junk_flags.iter().filter(|&&j| j).count();

    // Families: a head class together with the tail classes attached to it.
    let mut children: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &t in &tails {
        children.entry(parents[t].expect("tail has parent")).or_default().push(t);
    }
    let mut room: Vec<(usize, usize)> = children
        .iter()
        .map(|(&h, kids)| {
            let tail_titles: usize = kids.iter().map(|&k| counts[k]).sum();
            (h, spec.pool_per_title * counts[h].min(tail_titles))
        })
        .collect();
    let capacity: usize = room.iter().map(|r| r.1).sum();
    let promo = if spec.promo_per_title > 0 { PROMOTION_WORDS.len() } else { 0 };
    let total_pool = pool_size(spec.shared_fraction, exclusive_sig + junk_tokens, promo, capacity)?;

    // Deal pool words across families, skipping those whose titles are full.
    let mut pool_words: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    let mut slot = 0;
    for _ in 0..total_pool {
        let families = room.len();
        while room[slot % families].1 == 0 {
            slot += 1;
        }
        let entry = &mut room[slot % families];
        entry.1 -= 1;
        pool_words.entry(entry.0).or_default().push(mint.pseudo_word(&mut rng));
        slot += 1;
    }

    // Training titles. Signature and pool words are dealt round-robin so
    // every word is used and usage is as even as the counts allow.
    let mut records = Vec::with_capacity(n_train + classes * spec.test_per_class);
    let mut pool_cursor: BTreeMap<usize, usize> = BTreeMap::new();
    let mut sample = 0usize;
    for c in 0..classes {
        let family = if is_head[c] { Some(c) } else { parents[c] };
        let pool = family.and_then(|f| pool_words.get(&f));
        let sig = &signature_words[c];
        for i in 0..counts[c] {
            let mut words: Vec<String> = (0..spec.signature_per_title)
                .map(|j| sig[(i * spec.signature_per_title + j) % sig.len()].clone())
                .collect();
            if let Some(pool) = pool {
                let cursor = pool_cursor.entry(family.expect("pool implies family")).or_default();
                for _ in 0..spec.pool_per_title.min(pool.len()) {
                    words.push(pool[*cursor % pool.len()].clone());
                    *cursor += 1;
                }
            }
            words.extend(
                PROMOTION_WORDS
                    .choose_multiple(&mut rng, spec.promo_per_title)
                    .map(|w| w.to_string()),
            );
            if junk_flags[sample] {
                words.push(mint.junk(&mut rng));
            }
            let features = noisy(&mut rng, &prototypes[c], spec.noise_sigma);
            let title = compose_title(&mut rng, dedup(words));
            records.push(Record {
                sample_id: format!("s{sample:07}"),
                split: Split::Train,
                label: c,
                features,
                title,
            });
            sample += 1;
        }
        if is_head[c] {
            // Heads precede their tails (counts are nonincreasing), so
            // resetting here makes the children's pass also cover the pool.
            pool_cursor.insert(c, 0);
        }
    }

    for c in 0..classes {
        let family = if is_head[c] { Some(c) } else { parents[c] };
        let pool = family.and_then(|f| pool_words.get(&f));
        for _ in 0..spec.test_per_class {
            let mut words: Vec<String> = signature_words[c]
                .choose_multiple(&mut rng, spec.signature_per_title)
                .cloned()
                .collect();
            if let Some(pool) = pool {
                words.extend(pool.choose_multiple(&mut rng, spec.pool_per_title).cloned());
            }
            words.extend(
                PROMOTION_WORDS
                    .choose_multiple(&mut rng, spec.promo_per_title)
                    .map(|w| w.to_string()),
            );
            let features = noisy(&mut rng, &prototypes[c], spec.noise_sigma);
            let title = compose_title(&mut rng, dedup(words));
            records.push(Record {
                sample_id: format!("s{sample:07}"),
                split: Split::Test,
                label: c,
                features,
                title,
            });
            sample += 1;
        }
    }

    let manifest = DatasetManifest {
        dim: spec.feature_dim,
        classes,
        meta: vec![format!("generator {}", spec.describe())],
        records,
    };
    let state = GeneratorState {
        class_counts: counts,
        prototypes,
        parents,
        signature_words,
        pool_words,
        junk_tokens,
    };
    let ratio = state.signature_balance(&manifest);
    if ratio > spec.max_word_ratio {
        return Err(Error::Spec(format!(
            "signature-word frequency ratio {ratio:.3} exceeds max_word_ratio {}",
            spec.max_word_ratio
        )));
    }
    Ok((manifest, state))
}

fn dedup(words: Vec<String>) -> Vec<String> {
    let mut seen = HashSet::new();
    words.into_iter().filter(|w| seen.insert(w.clone())).collect()
}

fn noisy(rng: &mut ChaCha8Rng, prototype: &[f64], sigma: f64) -> Vec<f64> {
    prototype
        .iter()
        .map(|p| {
            let z: f64 = rng.sample(StandardNormal);
            p + sigma * z
        })
        .collect()
}

/// Pretrained-style word vectors for the generated vocabulary: each class
/// has a semantic direction (a tail class's direction is a perturbation of
/// its parent's), signature words scatter around their class direction,
/// pool words around their family's, and promotion words are pure noise.
/// Junk tokens get no vector, like rare words missing from a real
/// pretrained file. Rows have expected norm close to `scale`.
pub fn pretrained_word_vectors(
    spec: &LongTailSpec,
    state: &GeneratorState,
    dim: usize,
    scale: f64,
    spread: f64,
) -> Vec<(String, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let classes = state.class_counts.len();
    let mut directions = vec![Vec::new(); classes];
    for c in (0..classes).filter(|&c| state.parents[c].is_none()) {
        directions[c] = unit_vector(&mut rng, dim);
    }
    for c in 0..classes {
        if let Some(p) = state.parents[c] {
            let u = unit_vector(&mut rng, dim);
            let base = &directions[p];
            directions[c] = normalize(base.iter().zip(&u).map(|(a, b)| a + spec.tail_offset * b).collect());
        }
    }
    let norm = 1.0 / (1.0 + spread * spread).sqrt();
    let word = |center: Option<&[f64]>, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..dim)
            .map(|k| {
                let z: f64 = rng.sample(StandardNormal);
                let noise = z / (dim as f64).sqrt();
                match center {
                    Some(c) => scale * norm * (c[k] + spread * noise),
                    None => scale * noise,
                }
            })
            .collect()
    };
    let mut out = Vec::new();
    for (c, words) in state.signature_words.iter().enumerate() {
        for w in words {
            out.push((w.clone(), word(Some(&directions[c]), &mut rng)));
        }
    }
    for (&h, words) in &state.pool_words {
        for w in words {
            out.push((w.clone(), word(Some(&directions[h]), &mut rng)));
        }
    }
    for w in PROMOTION_WORDS {
        out.push((w.to_string(), word(None, &mut rng)));
    }
    out
}

/// Share of distinct training-title words used by both head and tail classes.
pub fn shared_vocab_fraction(manifest: &DatasetManifest, head_tail_threshold: usize) -> Result<f64> {
    let counts = manifest.train_counts();
    if counts.iter().sum::<usize>() == 0 {
        return Err(Error::Spec("manifest has no training records".into()));
    }
    if !counts.iter().any(|&n| n <= head_tail_threshold) {
        return Err(Error::Spec(format!(
            "no tail classes at threshold {head_tail_threshold}"
        )));
    }
    let mut head = HashSet::new();
    let mut tail = HashSet::new();
    for r in manifest.split(Split::Train) {
        let side = if counts[r.label] > head_tail_threshold { &mut head } else { &mut tail };
        side.extend(tokenize(&r.title));
    }
    let all = head.union(&tail).count();
    if all == 0 {
        return Ok(0.0);
    }
    Ok(head.intersection(&tail).count() as f64 / all as f64)
}

pub fn write_manifest_to<W: Write>(manifest: &DatasetManifest, mut out: W) -> Result<()> {
    let mut buf = String::new();
    let _ = writeln!(buf, "{MANIFEST_MAGIC} dim={} classes={}", manifest.dim, manifest.classes);
    for m in &manifest.meta {
        let _ = writeln!(buf, "#{m}");
    }
    for r in &manifest.records {
        if r.title.contains(['\t', '\n', '\r']) || r.sample_id.contains(['\t', '\n', '\r']) {
            return Err(Error::Spec(format!(
                "record {} contains a tab or newline in a text field",
                r.sample_id
            )));
        }
        let _ = write!(buf, "{}\t{}\t{}\t", r.sample_id, r.split.as_str(), r.label);
        for (i, f) in r.features.iter().enumerate() {
            if i > 0 {
                buf.push(',');
            }
            let _ = write!(buf, "{f}");
        }
        let _ = writeln!(buf, "\t{}", r.title);
    }
    out.write_all(buf.as_bytes())
        .map_err(|e| Error::io("<manifest>", e))
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_manifest_to(manifest, &mut out).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    out.flush().map_err(|e| Error::io(path, e))
}

fn parse_header(line: &str, source: &str) -> Result<(usize, usize)> {
    let rest = line
        .strip_prefix(MANIFEST_MAGIC)
        .ok_or_else(|| Error::format(source, 1, format!("expected `{MANIFEST_MAGIC}` header")))?;
    let mut dim = None;
    let mut classes = None;
    for field in rest.split_whitespace() {
        let parsed = match field.split_once('=') {
            Some(("dim", v)) => v.parse().ok().map(|v| dim = Some(v)),
            Some(("classes", v)) => v.parse().ok().map(|v| classes = Some(v)),
            _ => None,
        };
        if parsed.is_none() {
            return Err(Error::format(source, 1, format!("bad header field `{field}`")));
        }
    }
    match (dim, classes) {
        (Some(d), Some(c)) => Ok((d, c)),
        _ => Err(Error::format(source, 1, "header needs dim= and classes=")),
    }
}

pub fn read_manifest_from<R: BufRead>(mut reader: R, source: &str) -> Result<DatasetManifest> {
    let mut line = String::new();
    let mut lineno = 0usize;
    let mut next = |line: &mut String, lineno: &mut usize| -> Result<bool> {
        line.clear();
        let n = reader
            .read_line(line)
            .map_err(|e| Error::format(source, *lineno + 1, e.to_string()))?;
        if n == 0 {
            return Ok(false);
        }
        *lineno += 1;
        if !line.ends_with('\n') {
            return Err(Error::format(source, *lineno, "truncated line (no trailing newline)"));
        }
        line.pop();
        Ok(true)
    };
    if !next(&mut line, &mut lineno)? {
        return Err(Error::format(source, 1, "empty manifest"));
    }
    let (dim, classes) = parse_header(&line, source)?;
    let mut manifest = DatasetManifest {
        dim,
        classes,
        meta: Vec::new(),
        records: Vec::new(),
    };
    while next(&mut line, &mut lineno)? {
        if let Some(m) = line.strip_prefix('#') {
            manifest.meta.push(m.to_string());
            continue;
        }
        let err = |msg: String| Error::format(source, lineno, msg);
        let fields: Vec<&str> = line.splitn(5, '\t').collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 tab-separated fields, found {}", fields.len())));
        }
        let split = fields[1].parse::<Split>().map_err(err)?;
        let label: usize = fields[2]
            .parse()
            .map_err(|_| err(format!("bad label `{}`", fields[2])))?;
        if label >= classes {
            return Err(err(format!("label {label} out of range for {classes} classes")));
        }
        let features = fields[3]
            .split(',')
            .map(|s| s.parse::<f64>().map_err(|_| err(format!("bad feature `{s}`"))))
            .collect::<Result<Vec<f64>>>()?;
        if features.len() != dim {
            return Err(err(format!("expected {dim} features, found {}", features.len())));
        }
        manifest.records.push(Record {
            sample_id: fields[0].to_string(),
            split,
            label,
            features,
            title: fields[4].to_string(),
        });
    }
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_manifest_from(BufReader::new(file), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> LongTailSpec {
        LongTailSpec {
            num_classes: 10,
            n_max: 60,
            imbalance_factor: 10.0,
            head_tail_threshold: 20,
            feature_dim: 4,
            test_per_class: 3,
            shared_fraction: 0.3,
            seed: 7,
            ..LongTailSpec::default()
        }
    }

    #[test]
    fn counts_formula() {
        let spec = LongTailSpec {
            num_classes: 3,
            n_max: 100,
            imbalance_factor: 100.0,
            ..LongTailSpec::default()
        };
        assert_eq!(class_counts(&spec).unwrap(), vec![100, 10, 1]);
        let flat = LongTailSpec {
            imbalance_factor: 1.0,
            ..spec.clone()
        };
        assert_eq!(class_counts(&flat).unwrap(), vec![100, 100, 100]);
        let bad = LongTailSpec {
            num_classes: 1,
            ..spec
        };
        assert!(matches!(class_counts(&bad), Err(Error::Spec(_))));
    }

    #[test]
    fn default_counts_respect_imbalance() {
        let counts = class_counts(&LongTailSpec::default()).unwrap();
        assert_eq!(counts[0], 500);
        assert_eq!(counts[99], 10);
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, _) = generate(&small_spec()).unwrap();
        let (b, _) = generate(&small_spec()).unwrap();
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        write_manifest_to(&a, &mut ba).unwrap();
        write_manifest_to(&b, &mut bb).unwrap();
        assert_eq!(ba, bb);
        let (c, _) = generate(&LongTailSpec { seed: 8, ..small_spec() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_sigma_gives_prototypes() {
        let spec = LongTailSpec {
            noise_sigma: 0.0,
            ..small_spec()
        };
        let (m, state) = generate(&spec).unwrap();
        for r in &m.records {
            assert_eq!(r.features, state.prototypes[r.label]);
        }
        for p in &state.prototypes {
            let n: f64 = p.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn test_split_is_balanced() {
        let (m, _) = generate(&small_spec()).unwrap();
        let mut per = vec![0; m.classes];
        for r in m.split(Split::Test) {
            per[r.label] += 1;
        }
        assert!(per.iter().all(|&n| n == 3));
    }

    #[test]
    fn default_spec_hits_shared_fraction_and_balance() {
        let spec = LongTailSpec::default();
        let (m, state) = generate(&spec).unwrap();
        let f = shared_vocab_fraction(&m, spec.head_tail_threshold).unwrap();
        assert!((f - 0.12).abs() <= 0.02, "shared fraction {f}");
        assert!(state.signature_balance(&m) <= spec.max_word_ratio);
    }

    #[test]
    fn infeasible_shared_fraction() {
        let spec = LongTailSpec {
            shared_fraction: 0.0001,
            ..small_spec()
        };
        let err = generate(&spec).unwrap_err().to_string();
        assert!(err.contains("smallest achievable"), "{err}");
        let spec = LongTailSpec {
            shared_fraction: 0.99,
            ..small_spec()
        };
        let err = generate(&spec).unwrap_err().to_string();
        assert!(err.contains("at most"), "{err}");
    }

    fn record(label: usize, title: &str) -> Record {
        Record {
            sample_id: format!("r{label}"),
            split: Split::Train,
            label,
            features: vec![0.0],
            title: title.into(),
        }
    }

    #[test]
    fn shared_fraction_extremes() {
        let mut m = DatasetManifest {
            dim: 1,
            classes: 2,
            meta: vec![],
            records: vec![record(0, "a b"), record(0, "a"), record(1, "c d")],
        };
        assert_eq!(shared_vocab_fraction(&m, 1).unwrap(), 0.0);
        m.records[2].title = "b a".into();
        assert_eq!(shared_vocab_fraction(&m, 1).unwrap(), 1.0);
        assert!(shared_vocab_fraction(&m, 0).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let (mut m, _) = generate(&small_spec()).unwrap();
        m.records[0].title.clear();
        let mut bytes = Vec::new();
        write_manifest_to(&m, &mut bytes).unwrap();
        let back = read_manifest_from(bytes.as_slice(), "mem").unwrap();
        assert_eq!(back, m);
        assert_eq!(back.records[0].title, "");
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with("#sicot-manifest v1 dim=4 classes=10\n"));
    }

    #[test]
    fn truncated_manifest_reports_line() {
        let (m, _) = generate(&small_spec()).unwrap();
        let mut bytes = Vec::new();
        write_manifest_to(&m, &mut bytes).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let cut = &text[..text.len() - 5];
        let lines = cut.lines().count();
        match read_manifest_from(cut.as_bytes(), "m.tsv") {
            Err(Error::Format { line, .. }) => assert_eq!(line, lines),
            other => panic!("expected format error, got {other:?}"),
        }
        let bad = "#sicot-manifest v1 dim=2 classes=2\ns0\ttrain\t0\t1.0\tt\n";
        match read_manifest_from(bad.as_bytes(), "m.tsv") {
            Err(Error::Format { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("expected 2 features"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
