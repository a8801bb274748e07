//! Top-1/top-3 accuracy with micro, macro, and head/tail breakdowns.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// True iff `label` is among the first `k` entries of `ranked`.
pub fn topk_hit(ranked: &[usize], label: usize, k: usize) -> bool {
    ranked.iter().take(k).any(|&c| c == label)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadTailSplit {
    pub threshold: usize,
    pub head_classes: Vec<usize>,
    pub tail_classes: Vec<usize>,
}

impl HeadTailSplit {
    pub fn classes(&self) -> usize {
        self.head_classes.len() + self.tail_classes.len()
    }

    pub fn is_head(&self, class: usize) -> bool {
        self.head_classes.binary_search(&class).is_ok()
    }
}

/// Class `c` is head iff `train_counts[c] > threshold`.
pub fn head_tail_split(train_counts: &[usize], threshold: usize) -> HeadTailSplit {
    let (head, tail): (Vec<usize>, Vec<usize>) =
        (0..train_counts.len()).partition(|&c| train_counts[c] > threshold);
    HeadTailSplit {
        threshold,
        head_classes: head,
        tail_classes: tail,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassTally {
    pub count: usize,
    pub top1: usize,
    pub top3: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub records: usize,
    pub micro_top1: f64,
    pub micro_top3: f64,
    pub macro_top1: f64,
    pub macro_top3: f64,
    /// `None` when no head (tail) class has test records.
    pub head_macro_top1: Option<f64>,
    pub head_macro_top3: Option<f64>,
    pub tail_macro_top1: Option<f64>,
    pub tail_macro_top3: Option<f64>,
    pub per_class: Vec<ClassTally>,
}

/// Renders a top-1/top-3 pair as `62.68 (79.02)`.
pub fn format_pair(top1: f64, top3: f64) -> String {
    format!("{top1:.2} ({top3:.2})")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn opt_pair(a: Option<f64>, b: Option<f64>) -> String {
    match (a, b) {
        (Some(a), Some(b)) => format_pair(a, b),
        _ => "n/a".into(),
    }
}

impl EvalReport {
    /// The eight accuracy keys, in a fixed order.
    pub fn key_values(&self) -> Vec<(&'static str, String)> {
        vec![
            ("micro_top1", format!("{:.4}", self.micro_top1)),
            ("micro_top3", format!("{:.4}", self.micro_top3)),
            ("macro_top1", format!("{:.4}", self.macro_top1)),
            ("macro_top3", format!("{:.4}", self.macro_top3)),
            ("head_macro_top1", opt(self.head_macro_top1)),
            ("head_macro_top3", opt(self.head_macro_top3)),
            ("tail_macro_top1", opt(self.tail_macro_top1)),
            ("tail_macro_top3", opt(self.tail_macro_top3)),
        ]
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<8} {:>16}", "subset", "top1 (top3)");
        let _ = writeln!(out, "{:<8} {:>16}", "micro", format_pair(self.micro_top1, self.micro_top3));
        let _ = writeln!(out, "{:<8} {:>16}", "macro", format_pair(self.macro_top1, self.macro_top3));
        let _ = writeln!(
            out,
            "{:<8} {:>16}",
            "head",
            opt_pair(self.head_macro_top1, self.head_macro_top3)
        );
        let _ = writeln!(
            out,
            "{:<8} {:>16}",
            "tail",
            opt_pair(self.tail_macro_top1, self.tail_macro_top3)
        );
        out
    }
}

fn mean_accuracy<'a>(tallies: impl Iterator<Item = &'a ClassTally>, top3: bool) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in tallies.filter(|t| t.count > 0) {
        let hits = if top3 { t.top3 } else { t.top1 };
        sum += hits as f64 / t.count as f64;
        n += 1;
    }
    (n > 0).then(|| 100.0 * sum / n as f64)
}

/// Scores precomputed rankings. Classes without test records are left out
/// of every macro average.
pub fn evaluate_rankings<'a, I>(rankings: I, split: &HeadTailSplit) -> Result<EvalReport>
where
    I: IntoIterator<Item = (&'a [usize], usize)>,
{
    let classes = split.classes();
    let mut per_class = vec![ClassTally::default(); classes];
    let mut total = ClassTally::default();
    for (ranked, label) in rankings {
        if label >= classes {
            return Err(Error::Eval(format!(
                "test label {label} is not covered by the head/tail split of {classes} classes"
            )));
        }
        let t = &mut per_class[label];
        let h1 = usize::from(topk_hit(ranked, label, 1));
        let h3 = usize::from(topk_hit(ranked, label, 3));
        t.count += 1;
        t.top1 += h1;
        t.top3 += h3;
        total.count += 1;
        total.top1 += h1;
        total.top3 += h3;
    }
    if total.count == 0 {
        return Err(Error::Eval("empty test set".into()));
    }
    let pick = |set: &[usize]| set.iter().map(|&c| &per_class[c]).collect::<Vec<_>>();
    let head = pick(&split.head_classes);
    let tail = pick(&split.tail_classes);
    Ok(EvalReport {
        records: total.count,
        micro_top1: 100.0 * total.top1 as f64 / total.count as f64,
        micro_top3: 100.0 * total.top3 as f64 / total.count as f64,
        macro_top1: mean_accuracy(per_class.iter(), false).expect("nonempty"),
        macro_top3: mean_accuracy(per_class.iter(), true).expect("nonempty"),
        head_macro_top1: mean_accuracy(head.iter().copied(), false),
        head_macro_top3: mean_accuracy(head.iter().copied(), true),
        tail_macro_top1: mean_accuracy(tail.iter().copied(), false),
        tail_macro_top3: mean_accuracy(tail.iter().copied(), true),
        per_class,
    })
}

/// Runs `infer` (visual features to class ranking) over every record.
pub fn evaluate<'a, F, I>(infer: F, records: I, split: &HeadTailSplit) -> Result<EvalReport>
where
    F: Fn(&[f64]) -> Result<Vec<usize>>,
    I: IntoIterator<Item = (&'a [f64], usize)>,
{
    let ranked = records
        .into_iter()
        .map(|(x, label)| infer(x).map(|r| (r, label)))
        .collect::<Result<Vec<_>>>()?;
    evaluate_rankings(ranked.iter().map(|(r, l)| (r.as_slice(), *l)), split)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UvStats {
    pub trading_uv: u64,
    pub visiting_uv: u64,
}

pub fn uv_conversion_rate(stats: UvStats) -> Result<f64> {
    if stats.visiting_uv == 0 {
        return Err(Error::Eval("visiting_uv is zero".into()));
    }
    if stats.trading_uv > stats.visiting_uv {
        return Err(Error::Eval(format!(
            "trading_uv {} exceeds visiting_uv {}",
            stats.trading_uv, stats.visiting_uv
        )));
    }
    Ok(stats.trading_uv as f64 / stats.visiting_uv as f64)
}

/// `(new − old) / old`.
pub fn relative_gain(old: f64, new: f64) -> Result<f64> {
    if old == 0.0 {
        return Err(Error::Eval("relative gain of a zero baseline".into()));
    }
    Ok((new - old) / old)
}
