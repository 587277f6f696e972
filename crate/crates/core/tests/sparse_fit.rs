use std::collections::BTreeMap;

use probelab_core::probe::Dataset;
use probelab_core::sparse::{draw_per_class, fit_l1_logistic, token_report, SparseFitConfig};
use probelab_core::toy::planted_token_logits;

const VOCAB: usize = 1000;
const PLANTED: usize = 417;

fn subset(data: &Dataset, idx: &[usize]) -> Dataset {
    let mut out = Dataset::new(data.dim, data.classes);
    for &i in idx {
        out.push(data.row(i), data.labels[i]).unwrap();
    }
    out
}

fn planted() -> (Dataset, Dataset) {
    let all = planted_token_logits(VOCAB, PLANTED, 2.0, 224, 5).unwrap();
    let (train, held) = draw_per_class(&all.labels, 2, 24, 11).unwrap();
    (subset(&all, &train), subset(&all, &held))
}

fn fit(data: &Dataset, c: f64) -> probelab_core::sparse::SparseFit {
    fit_l1_logistic(data, &SparseFitConfig { c, ..Default::default() }).unwrap()
}

#[test]
fn recovers_planted_token() {
    let (train, held) = planted();
    let f = fit(&train, 0.3);
    let vocab: BTreeMap<usize, String> = (0..VOCAB).map(|t| (t, format!("tok{t}"))).collect();
    let report = token_report(&f, &vocab, 20, &train, Some(&held)).unwrap();
    assert!(report.entries.iter().any(|e| e.token_id == PLANTED), "{report:?}");
    assert!(report.nonzero <= 10, "{} nonzero", report.nonzero);
    assert!(report.heldout_accuracy.unwrap() >= 0.9, "{:?}", report.heldout_accuracy);
    let mut last = f64::INFINITY;
    for e in &report.entries {
        assert!(e.weight.abs() <= last);
        last = e.weight.abs();
    }
}

#[test]
fn near_zero_c_gives_up() {
    let (train, held) = planted();
    let f = fit(&train, 1e-8);
    assert!(f.gives_up());
    let report = token_report(&f, &BTreeMap::new(), 10, &train, Some(&held)).unwrap();
    assert!(report.entries.is_empty());
    assert!(report.gives_up);
    assert_eq!(report.heldout_accuracy, Some(0.5));
}

#[test]
fn sparsity_shrinks_with_c() {
    let (train, _) = planted();
    let counts: Vec<usize> = [3.0, 0.3, 0.03].iter().map(|&c| fit(&train, c).nonzero()).collect();
    assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
}

#[test]
fn objective_never_increases() {
    let (train, _) = planted();
    for c in [0.03, 0.3, 3.0] {
        let f = fit(&train, c);
        for w in f.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0].abs(), "C {c}: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn duplicated_data_matches_doubled_c() {
    let (train, _) = planted();
    let mut doubled = train.clone();
    for i in 0..train.len() {
        doubled.push(train.row(i), train.labels[i]).unwrap();
    }
    let a = fit(&train, 0.6);
    let b = fit(&doubled, 0.3);
    let ja = a.objective.last().unwrap();
    let jb = b.objective.last().unwrap();
    assert!((ja - jb).abs() <= 1e-6 * ja.abs().max(1.0), "{ja} vs {jb}");
    for (x, y) in a.weights.iter().zip(&b.weights) {
        assert!((x - y).abs() <= 1e-4, "{x} vs {y}");
    }
}
