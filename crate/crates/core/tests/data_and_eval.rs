use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sicot_core::eval::{evaluate_rankings, head_tail_split};
use sicot_core::synth::{
    class_counts, generate, read_manifest, shared_vocab_fraction, write_manifest, LongTailSpec, Split,
};
use sicot_core::text::{build_vocab, tokenize};

#[test]
fn evaluation_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let classes = 12;
    let counts: Vec<usize> = (0..classes).map(|_| rng.random_range(1..300)).collect();
    let split = head_tail_split(&counts, 100);
    let mut rows = Vec::new();
    for _ in 0..2000 {
        let mut ranked: Vec<usize> = (0..classes).collect();
        ranked.shuffle(&mut rng);
        let label = if rng.random_bool(0.4) { ranked[rng.random_range(0..3)] } else { rng.random_range(0..classes) };
        rows.push((ranked, label));
    }
    let rep = evaluate_rankings(rows.iter().map(|(r, l)| (r.as_slice(), *l)), &split).unwrap();

    // Independent tally with explicit position lookups.
    let mut hits: BTreeMap<usize, (f64, f64, f64)> = BTreeMap::new();
    for (ranked, label) in &rows {
        let pos = ranked.iter().position(|c| c == label).unwrap();
        let e = hits.entry(*label).or_default();
        e.0 += 1.0;
        e.1 += f64::from(pos == 0);
        e.2 += f64::from(pos < 3);
    }
    let n = rows.len() as f64;
    let micro1 = hits.values().map(|h| h.1).sum::<f64>() / n * 100.0;
    let micro3 = hits.values().map(|h| h.2).sum::<f64>() / n * 100.0;
    let macro_of = |keep: &dyn Fn(usize) -> bool, top3: bool| {
        let v: Vec<f64> = hits
            .iter()
            .filter(|(c, _)| keep(**c))
            .map(|(_, h)| if top3 { h.2 / h.0 } else { h.1 / h.0 })
            .collect();
        100.0 * v.iter().sum::<f64>() / v.len() as f64
    };
    let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
    assert!(close(rep.micro_top1, micro1));
    assert!(close(rep.micro_top3, micro3));
    assert!(close(rep.macro_top1, macro_of(&|_| true, false)));
    assert!(close(rep.macro_top3, macro_of(&|_| true, true)));
    assert!(close(rep.head_macro_top1.unwrap(), macro_of(&|c| counts[c] > 100, false)));
    assert!(close(rep.tail_macro_top3.unwrap(), macro_of(&|c| counts[c] <= 100, true)));
}

#[test]
fn default_dataset_shape() {
    let spec = LongTailSpec::default();
    let (manifest, state) = generate(&spec).unwrap();
    let counts = class_counts(&spec).unwrap();
    assert_eq!(manifest.train_counts(), counts);
    assert_eq!(counts[0], 500);
    assert_eq!(counts[99], 10);
    let ratio = counts[0] as f64 / counts[99] as f64;
    assert!((ratio - 50.0).abs() < 1e-9);
    let test = manifest.split(Split::Test).count();
    assert_eq!(test, 100 * spec.test_per_class);
    let shared = shared_vocab_fraction(&manifest, spec.head_tail_threshold).unwrap();
    assert!((shared - 0.12).abs() <= 0.02, "{shared}");
    assert!(state.signature_balance(&manifest) <= spec.max_word_ratio);
    let split = head_tail_split(&counts, spec.head_tail_threshold);
    assert!(!split.head_classes.is_empty() && !split.tail_classes.is_empty());
}

#[test]
fn manifest_file_round_trip() {
    let spec = LongTailSpec {
        num_classes: 8,
        n_max: 60,
        imbalance_factor: 6.0,
        head_tail_threshold: 20,
        test_per_class: 3,
        shared_fraction: 0.3,
        ..LongTailSpec::default()
    };
    let (manifest, _) = generate(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.tsv");
    write_manifest(&manifest, &path).unwrap();
    let back = read_manifest(&path).unwrap();
    assert_eq!(back, manifest);
    let missing = read_manifest(&dir.path().join("nope.tsv")).unwrap_err();
    assert!(missing.to_string().contains("nope.tsv"));
}

#[test]
fn vocabulary_cut_is_symmetric() {
    let spec = LongTailSpec::default();
    let (manifest, _) = generate(&spec).unwrap();
    let corpus: Vec<Vec<String>> = manifest.split(Split::Train).map(|r| tokenize(&r.title)).collect();
    let unique: BTreeSet<&String> = corpus.iter().flatten().collect();
    let vocab = build_vocab(&corpus, 0.05).unwrap();
    let cut = (0.05 * unique.len() as f64).ceil() as usize;
    assert_eq!(vocab.dropped_frequent().len(), cut);
    assert_eq!(vocab.dropped_infrequent().len(), cut);
    assert_eq!(vocab.len(), unique.len() - 2 * cut);
}
