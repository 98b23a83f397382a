use exitnet::train::{
    cumulative_cost, cumulative_prediction, hard_composition, total_loss, CostRecursion, CumulativePrediction,
};
use proptest::prelude::*;

fn dist(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

/// `N` branch distributions, main, and interior gates.
fn exits() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..6, 2usize..8).prop_flat_map(|(n, k)| {
        (
            prop::collection::vec(0.0f64..=1.0, n),
            prop::collection::vec(dist(k), n),
            dist(k),
        )
    })
}

fn costs(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(|mut v| {
        v.sort_by(f64::total_cmp);
        v.dedup();
        // keep strictly below 1 and strictly increasing
        let mut c: Vec<f64> = v.iter().enumerate().map(|(i, x)| x * 0.99 + i as f64 * 1e-9).collect();
        c.push(1.0);
        c
    })
}

/// Unrolled form: sum over exits of (pass-through mass) * h_n * y_n.
fn expanded(h: &[f64], y: &[Vec<f64>], main: &[f64], from: usize) -> Vec<f64> {
    let mut out = vec![0.0; main.len()];
    let mut pass = 1.0;
    for n in from..h.len() {
        for (o, v) in out.iter_mut().zip(&y[n]) {
            *o += pass * h[n] * v;
        }
        pass *= 1.0 - h[n];
    }
    for (o, v) in out.iter_mut().zip(main) {
        *o += pass * v;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn cumulative_prediction_stays_in_simplex((h, y, main) in exits()) {
        let p = cumulative_prediction(&h, &y, &main).unwrap();
        for (n, row) in p.per_exit.iter().enumerate() {
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let oracle = expanded(&h, &y, &main, n);
            for (a, b) in row.iter().zip(&oracle) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hard_gates_reproduce_first_exit_composition((h, y, main) in exits()) {
        let hard: Vec<f64> = h.iter().map(|v| v.round()).collect();
        let fires: Vec<bool> = hard.iter().map(|v| *v == 1.0).collect();
        let p = cumulative_prediction(&hard, &y, &main).unwrap();
        prop_assert_eq!(&p.per_exit[0], &hard_composition(&fires, &y, &main));
    }

    #[test]
    fn cumulative_cost_is_bounded_by_own_cost_and_one(
        (h, c) in (1usize..6).prop_flat_map(|n| (prop::collection::vec(0.0f64..=1.0, n), costs(n)))
            .prop_filter("distinct costs", |(h, c)| c.len() == h.len() + 1)
    ) {
        let cc = cumulative_cost(&h, &c, CostRecursion::Recursive).unwrap();
        for (n, v) in cc.iter().enumerate() {
            prop_assert!(*v >= c[n] - 1e-12 && *v <= 1.0 + 1e-12, "C_{} = {} with c = {:?}", n, v, c);
        }
        let ones = cumulative_cost(&vec![1.0; h.len()], &c, CostRecursion::Recursive).unwrap();
        prop_assert_eq!(&ones[..], &c[..h.len()]);
        let zeros = cumulative_cost(&vec![0.0; h.len()], &c, CostRecursion::Recursive).unwrap();
        prop_assert!(zeros.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn gate_limits_match_closed_forms((h, y, main) in exits()) {
        let n = h.len();
        let all_on = cumulative_prediction(&vec![1.0; n], &y, &main).unwrap();
        prop_assert_eq!(&all_on.per_exit, &y);
        let all_off = cumulative_prediction(&vec![0.0; n], &y, &main).unwrap();
        prop_assert!(all_off.per_exit.iter().all(|row| row == &main));
    }

    #[test]
    fn zero_lambda_drops_the_cost_term((h, y, main) in exits(), label in 0usize..2) {
        let p = cumulative_prediction(&h, &y, &main).unwrap();
        let c = vec![vec![0.5; h.len()]];
        let l = total_loss(std::slice::from_ref(&p), &[label], &c, 0.0).unwrap();
        prop_assert_eq!(l.total, l.ce_sum());
        let expect: f64 = p.per_exit.iter().map(|row| -row[label].max(1e-12).ln()).sum();
        prop_assert!((l.total - expect).abs() < 1e-9);
    }
}

#[test]
fn literal_recursion_closes_on_next_segment() {
    let c = [0.1, 0.4, 1.0];
    let v = cumulative_cost(&[0.5, 0.25], &c, CostRecursion::Literal).unwrap();
    assert!((v[0] - (0.5 * 0.1 + 0.5 * 0.4)).abs() < 1e-12);
    assert!((v[1] - (0.25 * 0.4 + 0.75 * 1.0)).abs() < 1e-12);
}

#[test]
fn loss_is_batch_mean_of_per_sample_sums() {
    let a = CumulativePrediction {
        per_exit: vec![vec![0.5, 0.5]],
    };
    let b = CumulativePrediction {
        per_exit: vec![vec![0.9, 0.1]],
    };
    let l = total_loss(&[a, b], &[0, 0], &[vec![0.2], vec![0.6]], 1.0).unwrap();
    let expect = ((-(0.5f64).ln() + 0.2) + (-(0.9f64).ln() + 0.6)) / 2.0;
    assert!((l.total - expect).abs() < 1e-12);
}
