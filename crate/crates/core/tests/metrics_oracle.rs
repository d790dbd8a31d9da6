use synthbalance::metrics::{confusion, metrics};
use synthbalance::tensor::Rng;

/// Per-sample tally, written independently of the library.
fn tally(truth: &[usize], pred: &[usize], positive: usize) -> (u64, u64, u64, u64) {
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for i in 0..truth.len() {
        let t = truth[i] == positive;
        let p = pred[i] == positive;
        if t && p {
            tp += 1;
        } else if !t && !p {
            tn += 1;
        } else if p {
            fp += 1;
        } else {
            fn_ += 1;
        }
    }
    (tp, tn, fp, fn_)
}

#[test]
fn metrics_equal_brute_force_tally() {
    let mut rng = Rng::new(2024);
    for round in 0..1000 {
        let n = 1 + rng.below(200);
        let truth: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
        let cm = confusion(&truth, &pred, 1, 2).unwrap();
        let (tp, tn, fp, fn_) = tally(&truth, &pred, 1);
        assert_eq!((cm.tp, cm.tn, cm.fp, cm.fn_), (tp, tn, fp, fn_), "round {round}");
        assert_eq!(cm.total(), n as u64);

        let m = metrics(&cm).unwrap();
        let correct = truth.iter().zip(&pred).filter(|(a, b)| a == b).count();
        assert_eq!(m.accuracy, correct as f64 / n as f64);
        if tp + fp > 0 {
            assert_eq!(m.precision, tp as f64 / (tp + fp) as f64);
        } else {
            assert!(m.precision_undefined && m.precision == 0.0);
        }
        if tp + fn_ > 0 {
            assert_eq!(m.recall, tp as f64 / (tp + fn_) as f64);
        } else {
            assert!(m.recall_undefined && m.recall == 0.0);
        }
        if m.precision + m.recall > 0.0 {
            let f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
            assert!((m.f1 - f1).abs() < 1e-9);
        }
        for row in &m.normalized_confusion {
            let s: f64 = row.iter().sum();
            assert!(s == 0.0 || (s - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn accuracy_is_mean_recall_on_balanced_sets() {
    let mut rng = Rng::new(7);
    for _ in 0..200 {
        let half = 1 + rng.below(50);
        let truth: Vec<usize> = (0..2 * half).map(|i| usize::from(i >= half)).collect();
        let pred: Vec<usize> = (0..2 * half).map(|_| rng.below(2)).collect();
        let m = metrics(&confusion(&truth, &pred, 1, 2).unwrap()).unwrap();
        let c = &m.confusion;
        let tpr = c.tp as f64 / (c.tp + c.fn_) as f64;
        let tnr = c.tn as f64 / (c.tn + c.fp) as f64;
        assert!((m.accuracy - 0.5 * (tpr + tnr)).abs() < 1e-12);
    }
}
