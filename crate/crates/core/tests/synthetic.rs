use std::collections::BTreeMap;

use maf_core::model::Variant;
use maf_core::synthetic::{
    action_class, evaluate_gap, generate, outcome, target_class, SyntheticSpec, ACTIONS, SPEAKERS,
    TARGETS,
};
use maf_core::text::tokenize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_instances: 700,
        seed,
        ..SyntheticSpec::default()
    }
}

fn pooled(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, x) in m.iter_mut().zip(r) {
            *a += x / rows.len() as f64;
        }
    }
    m
}

/// Multinomial logistic regression by full-batch gradient descent.
fn fit_probe(xs: &[Vec<f64>], ys: &[usize], classes: usize) -> Vec<Vec<f64>> {
    let dim = xs[0].len() + 1;
    let mut w = vec![vec![0.0; dim]; classes];
    for _ in 0..300 {
        let mut grad = vec![vec![0.0; dim]; classes];
        for (x, &y) in xs.iter().zip(ys) {
            let p = probs(&w, x);
            for c in 0..classes {
                let err = p[c] - f64::from(u8::from(c == y));
                for j in 0..dim - 1 {
                    grad[c][j] += err * x[j];
                }
                grad[c][dim - 1] += err;
            }
        }
        for c in 0..classes {
            for j in 0..dim {
                w[c][j] -= 1.0 * grad[c][j] / xs.len() as f64;
            }
        }
    }
    w
}

fn probs(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = w
        .iter()
        .map(|wc| wc[..x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + wc[x.len()])
        .collect();
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

#[test]
fn linear_probe_recovers_the_action_from_audio() {
    let s = SyntheticSpec {
        num_instances: 700,
        ..spec(1)
    };
    let corpus = generate(&s).unwrap();
    let xs: Vec<Vec<f64>> = corpus.iter().map(|i| pooled(&i.audio_features)).collect();
    let ys: Vec<usize> = corpus.iter().map(|i| action_class(i).unwrap()).collect();
    let w = fit_probe(&xs[..600], &ys[..600], s.actions);
    let hits = (600..700)
        .filter(|&i| argmax(&probs(&w, &xs[i])) == ys[i])
        .count();
    assert!(hits > 95, "probe accuracy {hits}/100");

    let xs: Vec<Vec<f64>> = corpus.iter().map(|i| pooled(&i.video_features)).collect();
    let ys: Vec<usize> = corpus.iter().map(|i| target_class(i).unwrap()).collect();
    let w = fit_probe(&xs[..600], &ys[..600], s.targets);
    let hits = (600..700)
        .filter(|&i| argmax(&probs(&w, &xs[i])) == ys[i])
        .count();
    assert!(hits > 95, "video probe accuracy {hits}/100");
}

#[test]
fn noiseless_patterns_are_exactly_recoverable() {
    let s = SyntheticSpec {
        num_instances: 200,
        actions: 2,
        noise: 0.0,
        ..spec(4)
    };
    for inst in generate(&s).unwrap() {
        let class = action_class(&inst).unwrap();
        for row in &inst.audio_features {
            assert_eq!(argmax(row), class);
            assert_eq!(row.iter().map(|x| x * x).sum::<f64>(), 1.0);
        }
    }
}

/// Pearson chi-square p-value for a table with rows of counts.
fn chi_square_p(table: &[Vec<f64>]) -> f64 {
    let table: Vec<&Vec<f64>> = table
        .iter()
        .filter(|r| r.iter().sum::<f64>() > 0.0)
        .collect();
    let cols = table[0].len();
    let total: f64 = table.iter().flat_map(|r| r.iter()).sum();
    let row_sums: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<f64> = (0..cols)
        .map(|j| table.iter().map(|r| r[j]).sum())
        .collect();
    let mut stat = 0.0;
    for (i, r) in table.iter().enumerate() {
        for j in 0..cols {
            let e = row_sums[i] * col_sums[j] / total;
            stat += (r[j] - e).powi(2) / e;
        }
    }
    let dof = ((table.len() - 1) * (cols - 1)) as f64;
    1.0 - ChiSquared::new(dof).unwrap().cdf(stat)
}

#[test]
fn text_carries_no_information_about_the_action() {
    for seed in 1..=5 {
        let s = spec(seed);
        let corpus = generate(&s).unwrap();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        let mut table: Vec<Vec<f64>> = Vec::new();
        for inst in &corpus {
            let a = action_class(inst).unwrap();
            let words: Vec<String> = inst
                .utterances
                .iter()
                .flat_map(|u| tokenize(&u.text))
                .collect();
            // presence per dialogue, so each instance adds at most one count per token
            let mut seen: Vec<&String> = words.iter().collect();
            seen.sort();
            seen.dedup();
            for w in seen {
                let next = index.len();
                let row = *index.entry(w.clone()).or_insert(next);
                if row == table.len() {
                    table.push(vec![0.0; s.actions]);
                }
                table[row][a] += 1.0;
            }
        }
        let p = chi_square_p(&table);
        assert!(p > 0.05, "seed {seed}: p = {p}");
    }
}

#[test]
fn instances_pass_validation_and_follow_the_template() {
    for seed in [1, 2] {
        let s = SyntheticSpec {
            rich_templates: seed == 2,
            ..spec(seed)
        };
        let corpus = generate(&s).unwrap();
        assert_eq!(corpus, generate(&s).unwrap());
        for inst in &corpus {
            inst.validate(None).unwrap();
            let toks = tokenize(&inst.explanation);
            assert_eq!(toks[0], inst.sarcasm_source.to_lowercase());
            assert!(SPEAKERS[..s.speakers].contains(&inst.sarcasm_source.as_str()));
            assert!(ACTIONS[..s.actions].contains(&inst.action_word.as_str()));
            assert!(TARGETS[..s.targets].contains(&inst.sarcasm_target.as_str()));
            assert_eq!(inst.audio_features.len(), s.frames);
            assert_eq!(inst.video_features.len(), s.windows);
            assert_eq!(toks.len() > 3, s.rich_templates);
        }
    }
    assert!(generate(&SyntheticSpec {
        actions: 1,
        ..spec(1)
    })
    .is_err());
    assert!(generate(&SyntheticSpec {
        noise: -0.1,
        ..spec(1)
    })
    .is_err());
}

#[test]
fn gap_report_orders_and_measures_margins() {
    let test = generate(&SyntheticSpec {
        num_instances: 20,
        ..spec(3)
    })
    .unwrap();
    let gold: Vec<String> = test.iter().map(|i| i.explanation.clone()).collect();
    let blind: Vec<String> = test
        .iter()
        .map(|i| format!("{} {} {}", i.sarcasm_source, ACTIONS[0], TARGETS[0]))
        .collect();
    let mut preds = BTreeMap::new();
    preds.insert(Variant::TextOnly, blind.clone());
    assert!(evaluate_gap(&preds, &test).is_err());
    preds.insert(Variant::Maf, gold.clone());
    preds.insert(Variant::Concat2, blind);
    let r = evaluate_gap(&preds, &test).unwrap();
    assert_eq!(r.ordering[0], Variant::Maf);
    assert_eq!(r.outcomes[&Variant::Maf].exact_match, 100.0);
    let base = outcome(&preds[&Variant::TextOnly], &test).unwrap();
    assert_eq!(r.action_margin[&Variant::Maf], 100.0 - base.action_acc);
    assert_eq!(r.exact_margin[&Variant::Concat2], 0.0);
}
