//! Title side information: tokenization, frequency-filtered vocabulary, and
//! the word-embedding table.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF      // hiragana, katakana
        | 0x3400..=0x4DBF    // CJK ext A
        | 0x4E00..=0x9FFF    // CJK unified
        | 0xAC00..=0xD7AF    // hangul syllables
        | 0xF900..=0xFAFF    // compatibility ideographs
        | 0x20000..=0x2FA1F) // ext B and beyond
}

/// Lowercases, treats every non-alphanumeric character as a separator, and
/// splits on whitespace. A title with no whitespace at all falls back to one
/// token per CJK character (alphanumeric runs in other scripts stay whole).
pub fn tokenize(raw_title: &str) -> Vec<String> {
    let lowered = raw_title.to_lowercase();
    let has_whitespace = lowered.chars().any(char::is_whitespace);
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in lowered.chars() {
        if !c.is_alphanumeric() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            continue;
        }
        if !has_whitespace && is_cjk(c) {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(c.to_string());
            continue;
        }
        current.push(c);
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Vocabulary after frequency filtering. Indices are dense and follow the
/// frequency ranking (document frequency descending, then lexicographic).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    doc_frequency: Vec<usize>,
    index: HashMap<String, usize>,
    dropped_frequent: Vec<(String, usize)>,
    dropped_infrequent: Vec<(String, usize)>,
}

impl Vocab {
    fn from_parts(
        kept: Vec<(String, usize)>,
        dropped_frequent: Vec<(String, usize)>,
        dropped_infrequent: Vec<(String, usize)>,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(kept.len());
        for (i, (w, _)) in kept.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate word `{w}`")));
            }
        }
        let (words, doc_frequency) = kept.into_iter().unzip();
        Ok(Vocab {
            words,
            doc_frequency,
            index,
            dropped_frequent,
            dropped_infrequent,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, idx: usize) -> &str {
        &self.words[idx]
    }

    pub fn doc_frequency(&self, idx: usize) -> usize {
        self.doc_frequency[idx]
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn dropped_frequent(&self) -> &[(String, usize)] {
        &self.dropped_frequent
    }

    pub fn dropped_infrequent(&self) -> &[(String, usize)] {
        &self.dropped_infrequent
    }

    /// `<word>\t<doc_frequency>` per kept word in index order, followed by
    /// `#dropped_frequent` / `#dropped_infrequent` lines for the filtered words.
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (w, df) in self.words.iter().zip(&self.doc_frequency) {
            writeln!(out, "{w}\t{df}")?;
        }
        for (w, df) in &self.dropped_frequent {
            writeln!(out, "#dropped_frequent\t{w}\t{df}")?;
        }
        for (w, df) in &self.dropped_infrequent {
            writeln!(out, "#dropped_infrequent\t{w}\t{df}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write_to(&mut out).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_from<R: BufRead>(reader: R, source: &str) -> Result<Self> {
        let mut kept = Vec::new();
        let mut frequent = Vec::new();
        let mut infrequent = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let lineno = n + 1;
            let line = line.map_err(|e| Error::format(source, lineno, e.to_string()))?;
            let fields: Vec<&str> = line.split('\t').collect();
            let parse_df = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::format(source, lineno, format!("bad frequency `{s}`")))
            };
            match fields.as_slice() {
                ["#dropped_frequent", w, df] => frequent.push((w.to_string(), parse_df(df)?)),
                ["#dropped_infrequent", w, df] => infrequent.push((w.to_string(), parse_df(df)?)),
                [w, df] if !w.is_empty() && !w.starts_with('#') => {
                    kept.push((w.to_string(), parse_df(df)?))
                }
                _ => return Err(Error::format(source, lineno, "expected `<word>\\t<doc_frequency>`")),
            }
        }
        Vocab::from_parts(kept, frequent, infrequent)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Vocab::read_from(BufReader::new(file), &path.display().to_string())
    }
}

/// Ranks unique words by document frequency and drops `⌈f·V⌉` words from each
/// end of the ranking. At either cut, equal frequencies are broken
/// lexicographically: the earlier word is dropped first.
pub fn build_vocab<S: AsRef<str>>(corpus: &[Vec<S>], drop_fraction: f64) -> Result<Vocab> {
    if !(0.0..0.5).contains(&drop_fraction) {
        return Err(Error::Vocab(format!(
            "drop_fraction must be in [0, 0.5), got {drop_fraction}"
        )));
    }
    let mut df: HashMap<&str, usize> = HashMap::new();
    for doc in corpus {
        let unique: HashSet<&str> = doc.iter().map(AsRef::as_ref).collect();
        for w in unique {
            *df.entry(w).or_insert(0) += 1;
        }
    }
    if df.is_empty() {
        return Err(Error::Vocab("empty corpus".into()));
    }
    let total = df.len();
    let cut = (drop_fraction * total as f64).ceil() as usize;
    if 2 * cut >= total {
        return Err(Error::Vocab(format!(
            "drop_fraction {drop_fraction} would remove {} of {total} words",
            2 * cut
        )));
    }

    let mut ranked: Vec<(&str, usize)> = df.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let frequent: Vec<(String, usize)> = ranked[..cut].iter().map(|(w, c)| (w.to_string(), *c)).collect();
    let mut rest: Vec<(&str, usize)> = ranked[cut..].to_vec();

    let mut ascending = rest.clone();
    ascending.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    let infrequent: Vec<(String, usize)> = ascending[..cut].iter().map(|(w, c)| (w.to_string(), *c)).collect();
    let drop_low: HashSet<&str> = ascending[..cut].iter().map(|(w, _)| *w).collect();
    rest.retain(|(w, _)| !drop_low.contains(w));

    let kept = rest.into_iter().map(|(w, c)| (w.to_string(), c)).collect();
    Vocab::from_parts(kept, frequent, infrequent)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TitleRecord {
    pub sample_id: String,
    pub raw_title: String,
    pub tokens: Vec<usize>,
}

impl TitleRecord {
    /// A record whose title lost every word to filtering cannot feed the
    /// semantic stream and is skipped for training.
    pub fn droppable(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Maps a title to vocabulary indices, skipping out-of-vocabulary words.
pub fn encode(sample_id: &str, raw_title: &str, vocab: &Vocab) -> TitleRecord {
    let tokens = tokenize(raw_title)
        .iter()
        .filter_map(|w| vocab.get(w))
        .collect();
    TitleRecord {
        sample_id: sample_id.to_string(),
        raw_title: raw_title.to_string(),
        tokens,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub matrix: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingLoadStats {
    pub copied: usize,
    pub random: usize,
}

impl EmbeddingTable {
    pub fn rows(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn row(&self, idx: usize) -> &[f64] {
        self.matrix.row(idx)
    }

    /// Uniform `[−0.5/d, 0.5/d]` initialization from a seeded generator.
    pub fn random(vocab_len: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 0.5 / dim as f64;
        let data = (0..vocab_len * dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        EmbeddingTable {
            matrix: Tensor::new(vec![vocab_len, dim], data).expect("consistent shape"),
            trainable: true,
        }
    }

    /// Writes the table in word2vec text format using `vocab` for row names.
    pub fn save(&self, path: &Path, vocab: &Vocab) -> Result<()> {
        if vocab.len() != self.rows() {
            return Err(Error::dim(format!(
                "vocab has {} words but table has {} rows",
                vocab.len(),
                self.rows()
            )));
        }
        let rows: Vec<(&str, &[f64])> = vocab
            .words()
            .iter()
            .enumerate()
            .map(|(i, w)| (w.as_str(), self.row(i)))
            .collect();
        write_word2vec(path, self.dim(), &rows)
    }
}

/// Parses word2vec text (`V d` header, then `word f1 … fd` lines).
/// Writes word2vec text format: a `count dim` header, then one
/// `word v1 … vd` line per row. Values use the shortest round-trip decimal.
pub fn write_word2vec(path: &Path, dim: usize, rows: &[(&str, &[f64])]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "{} {dim}", rows.len()).map_err(io)?;
    for (w, row) in rows {
        if row.len() != dim {
            return Err(Error::dim(format!("row `{w}` has width {}, expected {dim}", row.len())));
        }
        write!(out, "{w}").map_err(io)?;
        for v in *row {
            write!(out, " {v}").map_err(io)?;
        }
        writeln!(out).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_word2vec<R: BufRead>(reader: R, source: &str, dim: usize) -> Result<Vec<(String, Vec<f64>)>> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(l) => l.map_err(|e| Error::format(source, 1, e.to_string()))?,
        None => return Err(Error::format(source, 1, "missing `<V> <d>` header")),
    };
    let parts: Vec<&str> = header.split_whitespace().collect();
    let (count, file_dim) = match parts.as_slice() {
        [v, d] => match (v.parse::<usize>(), d.parse::<usize>()) {
            (Ok(v), Ok(d)) => (v, d),
            _ => return Err(Error::format(source, 1, format!("bad header `{header}`"))),
        },
        _ => return Err(Error::format(source, 1, format!("bad header `{header}`"))),
    };
    if file_dim != dim {
        return Err(Error::format(
            source,
            1,
            format!("file dim {file_dim}, requested dim {dim}"),
        ));
    }
    let mut rows = Vec::with_capacity(count);
    for (n, line) in lines.enumerate() {
        let lineno = n + 2;
        let line = line.map_err(|e| Error::format(source, lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        if rows.len() == count {
            return Err(Error::format(source, lineno, format!("more than {count} rows")));
        }
        let mut fields = line.split(' ').filter(|s| !s.is_empty());
        let word = fields.next().unwrap_or_default().to_string();
        let values: Vec<f64> = fields
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::format(source, lineno, format!("bad value `{s}`")))
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(Error::format(
                source,
                lineno,
                format!("row has {} values, expected {dim}", values.len()),
            ));
        }
        rows.push((word, values));
    }
    if rows.len() != count {
        return Err(Error::format(
            source,
            rows.len() + 2,
            format!("header promises {count} rows, found {}", rows.len()),
        ));
    }
    Ok(rows)
}

/// Builds the `V×d` table for `vocab`. Words present in the file are copied;
/// the rest are drawn uniformly from `[−0.5/d, 0.5/d]` in index order.
pub fn load_embeddings(
    path: Option<&Path>,
    vocab: &Vocab,
    dim: usize,
    seed: u64,
) -> Result<(EmbeddingTable, EmbeddingLoadStats)> {
    let mut found: HashMap<String, Vec<f64>> = HashMap::new();
    if let Some(path) = path {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        for (w, v) in read_word2vec(BufReader::new(file), &path.display().to_string(), dim)? {
            found.entry(w).or_insert(v);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 0.5 / dim as f64;
    let mut data = Vec::with_capacity(vocab.len() * dim);
    let mut stats = EmbeddingLoadStats { copied: 0, random: 0 };
    for w in vocab.words() {
        match found.get(w) {
            Some(row) => {
                data.extend_from_slice(row);
                stats.copied += 1;
            }
            None => {
                data.extend((0..dim).map(|_| rng.random_range(-bound..=bound)));
                stats.random += 1;
            }
        }
    }
    let table = EmbeddingTable {
        matrix: Tensor::new(vec![vocab.len(), dim], data)?,
        trainable: true,
    };
    Ok((table, stats))
}
