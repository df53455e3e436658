//! ROUGE-1/2/L, BLEU-1..4 and source/target identification accuracy.
//!
//! All scores are computed per instance on the shared tokenizer and a
//! corpus score is the arithmetic mean over instances. One reference per
//! instance.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::tokenize;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Substitute for a zero n-gram precision when smoothing is on.
pub const BLEU_EPSILON: f64 = 1e-9;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped overlap and the two n-gram totals.
fn overlap(hyp: &[String], reference: &[String], n: usize) -> (usize, usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = h
        .iter()
        .map(|(g, c)| (*c).min(*r.get(g).unwrap_or(&0)))
        .sum();
    (
        matched,
        hyp.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    )
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn rouge_n_tokens(hyp: &[String], reference: &[String], n: usize) -> f64 {
    let (m, nh, nr) = overlap(hyp, reference, n);
    if m == 0 || nh == 0 || nr == 0 {
        return 0.0;
    }
    f1(m as f64 / nh as f64, m as f64 / nr as f64)
}

pub fn rouge_n(hyp: &str, reference: &str, n: usize) -> f64 {
    rouge_n_tokens(&tokenize(hyp), &tokenize(reference), n)
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_tokens(hyp: &[String], reference: &[String]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(hyp, reference) as f64;
    f1(l / hyp.len() as f64, l / reference.len() as f64)
}

pub fn rouge_l(hyp: &str, reference: &str) -> f64 {
    rouge_l_tokens(&tokenize(hyp), &tokenize(reference))
}

/// Geometric mean of clipped precisions for orders 1..=k times the brevity
/// penalty. Without smoothing any zero precision gives 0.
pub fn bleu_tokens(hyp: &[String], reference: &[String], k: usize, smoothing: bool) -> f64 {
    assert!((1..=4).contains(&k), "BLEU order must be 1..=4");
    if hyp.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=k {
        let (m, nh, _) = overlap(hyp, reference, n);
        let p = if nh == 0 { 0.0 } else { m as f64 / nh as f64 };
        let p = if p == 0.0 && smoothing {
            BLEU_EPSILON
        } else {
            p
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let (c, r) = (hyp.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / k as f64).exp()
}

pub fn bleu_k(hyp: &str, reference: &str, k: usize) -> f64 {
    bleu_tokens(&tokenize(hyp), &tokenize(reference), k, false)
}

pub fn bleu_k_smoothed(hyp: &str, reference: &str, k: usize) -> f64 {
    bleu_tokens(&tokenize(hyp), &tokenize(reference), k, true)
}

fn contains_tokens(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Whether the tokens of `name` occur contiguously in `hyp`, case-insensitively.
pub fn mentions(hyp: &str, name: &str) -> bool {
    contains_tokens(&tokenize(hyp), &tokenize(name))
}

/// Percent of hypotheses naming the gold source, and the gold target.
pub fn source_target_accuracy(hyps: &[String], golds: &[(String, String)]) -> Result<(f64, f64)> {
    if hyps.len() != golds.len() {
        return Err(MetricError::Contract(format!(
            "{} hypotheses for {} gold records",
            hyps.len(),
            golds.len()
        )));
    }
    if hyps.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (mut s, mut t) = (0usize, 0usize);
    for (h, (src, tgt)) in hyps.iter().zip(golds) {
        s += usize::from(mentions(h, src));
        t += usize::from(mentions(h, tgt));
    }
    let n = hyps.len() as f64;
    Ok((100.0 * s as f64 / n, 100.0 * t as f64 / n))
}

/// Corpus scores in percent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    pub source_acc: f64,
    pub target_acc: f64,
}

impl Scores {
    pub const COLUMNS: [&'static str; 9] =
        ["R1", "R2", "RL", "B1", "B2", "B3", "B4", "SrcAcc", "TgtAcc"];

    pub fn values(&self) -> [f64; 9] {
        [
            self.r1,
            self.r2,
            self.rl,
            self.b1,
            self.b2,
            self.b3,
            self.b4,
            self.source_acc,
            self.target_acc,
        ]
    }

    pub fn from_values(v: [f64; 9]) -> Self {
        Scores {
            r1: v[0],
            r2: v[1],
            rl: v[2],
            b1: v[3],
            b2: v[4],
            b3: v[5],
            b4: v[6],
            source_acc: v[7],
            target_acc: v[8],
        }
    }
}

/// Mean per-instance scores. `golds` holds (source, target) per instance.
pub fn score_corpus(
    hyps: &[String],
    refs: &[String],
    golds: &[(String, String)],
) -> Result<Scores> {
    if hyps.len() != refs.len() {
        return Err(MetricError::Contract(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let (source_acc, target_acc) = source_target_accuracy(hyps, golds)?;
    let mut sums = [0.0; 7];
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (tokenize(h), tokenize(r));
        let per = [
            rouge_n_tokens(&h, &r, 1),
            rouge_n_tokens(&h, &r, 2),
            rouge_l_tokens(&h, &r),
            bleu_tokens(&h, &r, 1, false),
            bleu_tokens(&h, &r, 2, false),
            bleu_tokens(&h, &r, 3, false),
            bleu_tokens(&h, &r, 4, false),
        ];
        for (s, x) in sums.iter_mut().zip(per) {
            *s += x;
        }
    }
    let n = hyps.len().max(1) as f64;
    let m = |i: usize| 100.0 * sums[i] / n;
    Ok(Scores {
        r1: m(0),
        r2: m(1),
        rl: m(2),
        b1: m(3),
        b2: m(4),
        b3: m(5),
        b4: m(6),
        source_acc,
        target_acc,
    })
}

/// Rows keyed by a label, laid out R1 R2 RL B1 B2 B3 B4 M BS, then the
/// source/target accuracies. METEOR and BERTScore are not computed and
/// render as dashes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<(String, Scores)>,
}

pub const REPORT_HEADER: [&str; 12] = [
    "variant", "R1", "R2", "RL", "B1", "B2", "B3", "B4", "M", "BS", "SrcAcc", "TgtAcc",
];

/// Row cells in report order from the nine score cells.
pub fn report_cells(label: &str, scores: [String; 9]) -> Vec<String> {
    let [r1, r2, rl, b1, b2, b3, b4, src, tgt] = scores;
    vec![
        label.to_string(),
        r1,
        r2,
        rl,
        b1,
        b2,
        b3,
        b4,
        "-".into(),
        "-".into(),
        src,
        tgt,
    ]
}

impl MetricReport {
    pub fn push(&mut self, label: impl Into<String>, scores: Scores) {
        self.rows.push((label.into(), scores));
    }

    fn cells(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|(label, s)| report_cells(label, s.values().map(|x| format!("{x:.2}"))))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        render_csv(&REPORT_HEADER, &self.cells())
    }

    pub fn to_text(&self) -> String {
        render_text(&REPORT_HEADER, &self.cells())
    }
}

fn csv_cell(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header
        .iter()
        .map(|h| csv_cell(h))
        .collect::<Vec<_>>()
        .join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.iter().map(|c| csv_cell(c)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

/// Space-aligned table; the first column is left-aligned, the rest right.
pub fn render_text(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| {
                let pad = w - c.chars().count();
                if i == 0 {
                    format!("{c}{}", " ".repeat(pad))
                } else {
                    format!("{}{c}", " ".repeat(pad))
                }
            })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}
