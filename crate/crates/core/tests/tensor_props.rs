use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segfuse::tensor::{gradient_check, Optimizer, ParamStore, Tape, Tensor};

fn tensor_strategy(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in tensor_strategy(4, 7, 30.0), t in 0.05f64..4.0) {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax(v, 1, t).unwrap();
        for row in tape.value(s).data().chunks(7) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn softmax_entries_are_open_unit_interval(x in tensor_strategy(3, 5, 3.0)) {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax(v, 1, 1.0).unwrap();
        prop_assert!(tape.value(s).data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn l2_normalize_gives_unit_columns(x in tensor_strategy(6, 4, 5.0)) {
        prop_assume!((0..4).all(|c| (0..6).map(|r| x.data()[r * 4 + c].powi(2)).sum::<f64>() > 1e-6));
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let n = tape.l2_normalize(v, 0, 1e-12).unwrap();
        let d = tape.value(n).data();
        for c in 0..4 {
            let norm = (0..6).map(|r| d[r * 4 + c].powi(2)).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_gradient_step_is_identity(x in tensor_strategy(3, 3, 2.0), adam: bool, lr in 1e-5f64..1.0) {
        let mut store = ParamStore::new();
        store.add("w", x.clone());
        store.add("b", Tensor::full(&[3], 0.25));
        for p in store.iter_mut() {
            p.grad = Some(vec![0.0; p.value.numel()]);
        }
        let mut opt = if adam { Optimizer::adam(lr) } else { Optimizer::sgd(lr) }.unwrap();
        opt.step(&mut store).unwrap();
        let w = store.find("w").unwrap();
        prop_assert_eq!(store.value(w), &x);
    }

    #[test]
    fn composite_expression_gradients_match(seed in 0u64..10_000) {
        // attention-like chain: normalize, affinity, softmax, weighted read-out, BCE
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let q = store.add("q", Tensor::randn(&[4, 6], 1.0, &mut rng));
        let k = store.add("k", Tensor::randn(&[4, 5], 1.0, &mut rng));
        let v = store.add("v", Tensor::randn(&[5, 3], 1.0, &mut rng));
        let target = Tensor::new(vec![6, 3], (0..18).map(|i| f64::from(i % 2 == 0)).collect()).unwrap();
        let report = gradient_check(&mut store, 1e-5, |tape, store| {
            let (q, k, v) = (tape.param(store, q), tape.param(store, k), tape.param(store, v));
            let qn = tape.l2_normalize(q, 0, 1e-12)?;
            let kn = tape.l2_normalize(k, 0, 1e-12)?;
            let qt = tape.transpose(qn)?;
            let a = tape.matmul(qt, kn)?;
            let w = tape.softmax(a, 1, 0.3)?;
            let y = tape.matmul(w, v)?;
            let y = tape.layer_norm(y, 1e-5)?;
            tape.bce_with_logits(y, &target)
        })
        .unwrap();
        prop_assert!(report.max_relative_error < 1e-4, "{:?}", report);
    }
}

#[test]
fn forward_and_backward_are_bit_identical_across_runs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::randn(&[2, 3, 3, 3], 0.5, &mut rng));
        let x = Tensor::randn(&[3, 8, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let (wv, xv) = (tape.param(&store, w), tape.constant(x));
        let y = tape.conv2d(xv, wv, 1, 1).unwrap();
        let y = tape.relu(y);
        let loss = tape.mean(y);
        tape.backward(loss, &mut store).unwrap();
        (tape.value(loss).item().to_bits(), store.get(w).grad.clone().unwrap())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
}
