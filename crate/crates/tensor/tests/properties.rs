use proptest::prelude::*;
use synthbalance_tensor::{Padding, RmspropState, Tape, Tensor};

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, data).unwrap()
}

fn run(f: impl FnOnce(&mut Tape<f64>) -> synthbalance_tensor::Var) -> Tensor<f64> {
    let mut tape = Tape::new();
    let v = f(&mut tape);
    tape.value(v).unwrap().clone()
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-30.0f64..30.0, 12)) {
        let out = run(|tp| {
            let x = tp.constant(tensor(&[3, 4], data));
            tp.softmax(x).unwrap()
        });
        for row in out.data().chunks(4) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_in_unit_interval_and_monotone(mut data in prop::collection::vec(-50.0f64..50.0, 8)) {
        data.sort_by(f64::total_cmp);
        let out = run(|tp| {
            let x = tp.constant(tensor(&[8], data));
            tp.sigmoid(x).unwrap()
        });
        prop_assert!(out.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        prop_assert!(out.data().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn maxpool_dominates_its_window(data in prop::collection::vec(-5.0f64..5.0, 16)) {
        let out = run(|tp| {
            let x = tp.constant(tensor(&[1, 1, 4, 4], data.clone()));
            tp.maxpool2d(x, 2, 2).unwrap()
        });
        for oy in 0..2 {
            for ox in 0..2 {
                let m = out.data()[oy * 2 + ox];
                let window: Vec<f64> = (0..2)
                    .flat_map(|dy| (0..2).map(move |dx| (oy * 2 + dy) * 4 + ox * 2 + dx))
                    .map(|i| data[i])
                    .collect();
                prop_assert!(window.iter().all(|&v| v <= m));
                prop_assert!(window.contains(&m));
            }
        }
    }

    #[test]
    fn upsample_preserves_block_sums(data in prop::collection::vec(-5.0f64..5.0, 6), factor in 1usize..4) {
        let out = run(|tp| {
            let x = tp.constant(tensor(&[1, 1, 2, 3], data.clone()));
            tp.upsample_nearest(x, factor).unwrap()
        });
        let total: f64 = data.iter().sum::<f64>() * (factor * factor) as f64;
        prop_assert!((out.data().iter().sum::<f64>() - total).abs() < 1e-9);
    }

    #[test]
    fn conv_is_linear_in_its_input(
        a in prop::collection::vec(-1.0f64..1.0, 25),
        b in prop::collection::vec(-1.0f64..1.0, 25),
        w in prop::collection::vec(-1.0f64..1.0, 9),
    ) {
        let conv = |x: Vec<f64>| run(|tp| {
            let x = tp.constant(tensor(&[1, 1, 5, 5], x));
            let w = tp.constant(tensor(&[1, 1, 3, 3], w.clone()));
            let bias = tp.constant(tensor(&[1], vec![0.0]));
            tp.conv2d(x, w, bias, 1, Padding::Same).unwrap()
        });
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let (ca, cb, cs) = (conv(a), conv(b), conv(sum));
        for i in 0..25 {
            prop_assert!((ca.data()[i] + cb.data()[i] - cs.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_is_non_negative(
        mu in prop::collection::vec(-10.0f64..10.0, 6),
        lv in prop::collection::vec(-10.0f64..5.0, 6),
    ) {
        let out = run(|tp| {
            let m = tp.constant(tensor(&[2, 3], mu));
            let l = tp.constant(tensor(&[2, 3], lv));
            tp.kl_gaussian(m, l).unwrap()
        });
        prop_assert!(out.data()[0] >= 0.0);
    }

    #[test]
    fn reconstruction_loss_is_minimized_by_the_target(
        x in prop::collection::vec(0.01f64..0.99, 8),
        p in prop::collection::vec(0.01f64..0.99, 8),
    ) {
        let target = tensor(&[1, 8], x.clone());
        let loss = |probs: Vec<f64>| run(|tp| {
            let v = tp.constant(tensor(&[1, 8], probs));
            tp.reconstruction_loss(v, &target).unwrap()
        }).data()[0];
        prop_assert!(loss(x) <= loss(p) + 1e-12);
    }

    #[test]
    fn rmsprop_moves_against_the_gradient(g in prop::collection::vec(-3.0f64..3.0, 5)) {
        let mut w = tensor(&[5], vec![0.0; 5]);
        let grad = tensor(&[5], g.clone());
        let mut opt = RmspropState::<f64>::new(0.01);
        opt.step(&mut [&mut w], &[grad]).unwrap();
        for (wi, gi) in w.data().iter().zip(&g) {
            prop_assert!(wi * gi <= 0.0);
        }
    }
}
