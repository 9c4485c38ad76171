//! Property tests for the invariants that hold across inputs.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lightst::autodiff::{ConvLayout, KlForm, Tape};
use lightst::data::{make_windows, SplitConfig, TrafficTensor, WindowConfig};
use lightst::distill::{joint_loss, kl_alignment_loss, spatial_contrastive_loss};
use lightst::eval::compute_metrics;
use lightst::graph::{Propagation, SpatialGraph};
use lightst::model::Forecaster;
use lightst::model::Mode;
use lightst::optim::{AdamConfig, AdamState};
use lightst::student::{Student, StudentConfig, StudentParams};
use lightst::teacher::{tcn_forward, Teacher, TeacherConfig, TeacherParams};
use lightst::Tensor;

fn graph_strategy() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (2usize..12).prop_flat_map(|n| {
        let pairs = proptest::collection::vec((0..n, 0..n), 0..3 * n);
        pairs.prop_map(move |p| {
            let edges = p.into_iter().filter(|(a, b)| a != b).collect();
            (n, edges)
        })
    })
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| Tensor::new([rows, cols], v).unwrap())
}

/// Largest eigenvalue magnitude of a symmetric matrix by power iteration.
fn spectral_radius(m: &Tensor) -> f64 {
    let n = m.shape()[0];
    let mut v = Tensor::new([n, 1], (0..n).map(|i| 1.0 + i as f64 * 0.37).collect()).unwrap();
    let mut lambda = 0.0;
    for _ in 0..500 {
        // Power iteration on M² avoids sign flips from negative eigenvalues.
        let w = m.matmul(&m.matmul(&v).unwrap()).unwrap();
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = (norm / v.norm()).sqrt();
        v = w.map(|x| x / norm);
    }
    lambda
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_adjacency_is_symmetric_and_contracting((n, edges) in graph_strategy()) {
        let g = SpatialGraph::from_pairs(n, &edges).unwrap();
        let a = g.normalized_adjacency();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(a.get(&[i, j]), a.get(&[j, i]));
                if g.is_adjacent(i, j) {
                    prop_assert_eq!(g.pair_weight(i, j).unwrap(), g.pair_weight(j, i).unwrap());
                }
            }
        }
        prop_assert!(spectral_radius(&a) <= 1.0 + 1e-6);
    }

    #[test]
    fn propagation_kernels_agree_and_are_linear(
        (n, edges) in graph_strategy(),
        seed in any::<u64>(),
        alpha in -2.0f64..2.0,
    ) {
        let g = SpatialGraph::from_pairs(n, &edges).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn([2 * n, 3], 1.0, &mut rng);
        let y = Tensor::randn([2 * n, 3], 1.0, &mut rng);
        let dense = g.with_propagation(Propagation::Dense).unwrap();
        let sparse = g.with_propagation(Propagation::Sparse).unwrap();
        let px = dense.propagate(&x).unwrap();
        prop_assert!(px.max_abs_diff(&sparse.propagate(&x).unwrap()) < 1e-12);
        let combo = x.zip_map(&y, |a, b| alpha * a + b).unwrap();
        let lhs = dense.propagate(&combo).unwrap();
        let py = dense.propagate(&y).unwrap();
        let rhs = px.zip_map(&py, |a, b| alpha * a + b).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        let zero = Tensor::zeros([n, 3]);
        prop_assert_eq!(dense.propagate(&zero).unwrap(), zero);
    }

    #[test]
    fn softmax_rows_are_positive_distributions(x in matrix(4, 6), axis in 0usize..2) {
        let s = x.softmax(axis).unwrap();
        prop_assert!(s.data().iter().all(|&p| p > 0.0));
        let (outer, len) = if axis == 1 { (4, 6) } else { (6, 4) };
        for o in 0..outer {
            let total: f64 = (0..len)
                .map(|k| if axis == 1 { s.get(&[o, k]) } else { s.get(&[k, o]) })
                .sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_linear(x in matrix(3, 4), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        // L1 = sum(relu(x)·x), L2 = mse(x, 0)
        let grads = |wa: f64, wb: f64| {
            let mut t = Tape::new();
            let v = t.param(x.clone());
            let r = t.relu(v);
            let p = t.mul(r, v).unwrap();
            let l1 = t.sum(p);
            let z = t.constant(Tensor::zeros([3, 4]));
            let l2 = t.mse(v, z, 3.0).unwrap();
            let l1 = t.scale(l1, wa);
            let l2 = t.scale(l2, wb);
            let l = t.add(l1, l2).unwrap();
            t.backward(l).unwrap().get(v).unwrap().clone()
        };
        let both = grads(a, b);
        let sep = grads(a, 0.0).zip_map(&grads(0.0, b), |p, q| p + q).unwrap();
        prop_assert!(both.max_abs_diff(&sep) < 1e-12);
    }

    #[test]
    fn conv_identity_kernel_is_identity(x in matrix(2 * 5 * 3, 2)) {
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let mut k = Tensor::zeros([3, 2, 2]);
        k.set(&[2, 0, 0], 1.0);
        k.set(&[2, 1, 1], 1.0);
        let kv = t.constant(k);
        let bv = t.constant(Tensor::zeros([2]));
        let layout = ConvLayout { outer: 2, time: 5, inner: 3 };
        let y = t.causal_conv(v, kv, bv, layout).unwrap();
        prop_assert_eq!(t.value(y), &x);
    }

    #[test]
    fn tcn_output_ignores_later_inputs(seed in any::<u64>(), at in 0usize..6) {
        let (b, time, n, d) = (2, 6, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn([b * time * n, d], 1.0, &mut rng);
        let kernels = [Tensor::randn([3, d, d], 0.5, &mut rng), Tensor::randn([3, d, d], 0.5, &mut rng)];
        let biases = [Tensor::randn([d], 0.5, &mut rng), Tensor::randn([d], 0.5, &mut rng)];
        let run = |input: &Tensor| {
            let mut t = Tape::new();
            let v = t.constant(input.clone());
            let k = [t.constant(kernels[0].clone()), t.constant(kernels[1].clone())];
            let c = [t.constant(biases[0].clone()), t.constant(biases[1].clone())];
            let layout = ConvLayout { outer: b, time, inner: n };
            let y = tcn_forward(&mut t, v, layout, k, c, 0.1, 0.01, Mode::Eval, &mut rng.clone()).unwrap();
            t.value(y).clone()
        };
        let mut bumped = x.clone();
        for w in 0..b {
            for node in 0..n {
                for c in 0..d {
                    let row = (w * time + at) * n + node;
                    bumped.set(&[row, c], bumped.get(&[row, c]) + 5.0);
                }
            }
        }
        let (y0, y1) = (run(&x), run(&bumped));
        for w in 0..b {
            for t in 0..at {
                for node in 0..n {
                    let row = (w * time + t) * n + node;
                    for c in 0..d {
                        prop_assert_eq!(y0.get(&[row, c]), y1.get(&[row, c]));
                    }
                }
            }
        }
    }

    #[test]
    fn adam_ignores_zero_gradients(x in matrix(2, 3), steps in 1usize..5) {
        let mut p = x.clone();
        let zero = Tensor::zeros([2, 3]);
        let mut adam = AdamState::new([&p], AdamConfig::with_lr(0.1));
        for _ in 0..steps {
            adam.step(&mut [&mut p], &[&zero]).unwrap();
        }
        prop_assert_eq!(p, x);
        prop_assert_eq!(adam.step_count(), steps as u64);
    }

    #[test]
    fn kl_is_a_divergence(t in matrix(3, 5), s in matrix(3, 5)) {
        prop_assert!(kl_alignment_loss(&t, &s, KlForm::Proper).unwrap() >= -1e-12);
        prop_assert!(kl_alignment_loss(&t, &t, KlForm::Proper).unwrap().abs() < 1e-12);
    }

    #[test]
    fn contrastive_ignores_single_vector_scale(
        s in matrix(8, 3),
        t in matrix(8, 3),
        row in 0usize..8,
        c in 0.01f64..100.0,
    ) {
        prop_assume!(s.data().chunks(3).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-3));
        prop_assume!(t.data().chunks(3).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-3));
        let base = spatial_contrastive_loss(&s, &t, 4, 0.5).unwrap();
        let mut scaled = s.clone();
        for k in 0..3 {
            scaled.set(&[row, k], s.get(&[row, k]) * c);
        }
        let got = spatial_contrastive_loss(&scaled, &t, 4, 0.5).unwrap();
        prop_assert!((got - base).abs() <= 1e-9 * base.abs().max(1.0));
    }

    #[test]
    fn contrastive_falls_as_positive_aligns(theta in 0.1f64..3.0, delta in 0.01f64..0.1) {
        // Student row 0 turns toward teacher row 0 in a plane orthogonal to
        // teacher row 1, so every negative cosine stays fixed.
        let build = |angle: f64| {
            Tensor::from_rows(&[vec![angle.cos(), angle.sin(), 0.0], vec![0.3, -0.8, 0.5]]).unwrap()
        };
        let teacher = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let near = spatial_contrastive_loss(&build(theta - delta), &teacher, 2, 0.5).unwrap();
        let far = spatial_contrastive_loss(&build(theta), &teacher, 2, 0.5).unwrap();
        prop_assert!(near < far);
    }

    #[test]
    fn joint_loss_is_affine_in_each_weight(
        terms in proptest::array::uniform4(-5.0f64..5.0),
        l1 in 0.0f64..3.0,
        l2 in 0.0f64..3.0,
    ) {
        let [ls, kl, lp, le] = terms;
        let f = |a: f64, b: f64| joint_loss(ls, kl, lp, le, a, b);
        prop_assert!((f(l1, l2) - (f(0.0, l2) + l1 * kl)).abs() < 1e-12);
        prop_assert!((f(l1, l2) - (f(l1, 0.0) + l2 * (lp + le))).abs() < 1e-12);
        prop_assert_eq!(f(0.0, 0.0), ls);
    }

    #[test]
    fn metrics_are_ordered_and_homogeneous(
        y in proptest::collection::vec(0.0f64..500.0, 12),
        e in proptest::collection::vec(-50.0f64..50.0, 12),
        c in 0.1f64..10.0,
    ) {
        let target = Tensor::new([3, 4], y.clone()).unwrap();
        let pred = Tensor::new([3, 4], y.iter().zip(&e).map(|(a, b)| a + b).collect()).unwrap();
        let m = compute_metrics(&pred, &target, 1.0).unwrap();
        prop_assert!(m.mae >= 0.0 && m.rmse >= 0.0);
        prop_assert!(m.mae <= m.rmse + 1e-12);
        if let Some(p) = m.mape {
            prop_assert!(p >= 0.0);
        }
        let scaled = Tensor::new([3, 4], y.iter().zip(&e).map(|(a, b)| a + c * b).collect()).unwrap();
        let ms = compute_metrics(&scaled, &target, 1.0).unwrap();
        prop_assert!((ms.mae - c * m.mae).abs() < 1e-9);
        prop_assert!((ms.rmse - c * m.rmse).abs() < 1e-9);
    }

    #[test]
    fn window_counts_and_chronology(
        total in 30usize..160,
        history in 1usize..8,
        horizon in 1usize..8,
        train in 50.0f64..80.0,
    ) {
        let val = (100.0 - train) / 2.0;
        let x = TrafficTensor::new(
            Tensor::new([2, total], (0..2 * total).map(|i| (i % 7) as f64).collect()).unwrap(),
            5,
            None,
        )
        .unwrap();
        let cfg = WindowConfig {
            history,
            horizon,
            split: SplitConfig { train, val, test: 100.0 - train - val },
            ..WindowConfig::default()
        };
        let need = history + horizon;
        let train_len = (total as f64 * train / 100.0).floor() as usize;
        match make_windows(&x, &cfg) {
            Err(_) => prop_assert!(train_len < need),
            Ok(data) => {
                use lightst::data::Split::*;
                let splits = [Train, Val, Test];
                for split in splits {
                    let (a, b) = data.segment(split);
                    let want = (b - a + 1).saturating_sub(need);
                    prop_assert_eq!(data.starts(split).len(), want);
                    // Every window, history and target, stays inside its segment.
                    for &s in data.starts(split) {
                        prop_assert!(s >= a && s + need <= b);
                    }
                }
                for k in 0..2 {
                    let (_, end) = data.segment(splits[k]);
                    if let (Some(&last), Some(&first)) =
                        (data.starts(splits[k]).last(), data.starts(splits[k + 1]).first())
                    {
                        prop_assert!(last + need - 1 < first + history);
                        prop_assert!(last + need <= end);
                    }
                }
            }
        }
    }

    #[test]
    fn denormalizing_normalized_targets_recovers_raw(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = TrafficTensor::new(Tensor::uniform([3, 80], 0.0, 300.0, &mut rng), 5, None).unwrap();
        let data = make_windows(&x, &WindowConfig { history: 6, horizon: 3, ..WindowConfig::default() }).unwrap();
        let batch = data.batch(&data.starts(lightst::data::Split::Train)[..5]).unwrap();
        let back = batch.denormalize(&batch.normalized_targets()).unwrap();
        prop_assert!(back.max_abs_diff(&batch.raw_targets()) < 1e-9);
    }

    #[test]
    fn inference_path_matches_the_recorded_forward(
        (n, edges) in graph_strategy(),
        seed in any::<u64>(),
        conv in prop::bool::ANY,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = SpatialGraph::from_pairs(n, &edges).unwrap();
        let x = TrafficTensor::new(Tensor::uniform([n, 60], 0.0, 300.0, &mut rng), 5, None).unwrap();
        let data = make_windows(&x, &WindowConfig { history: 6, horizon: 3, ..WindowConfig::default() }).unwrap();
        let batch = data.batch(&data.starts(lightst::data::Split::Train)[..4]).unwrap();

        let tcfg = TeacherConfig { layers: 2, dim: 5, history: 6, horizon: 3, ..TeacherConfig::default() };
        let teacher = Teacher::new(tcfg.clone(), TeacherParams::init(&tcfg, &mut rng).unwrap(), &g).unwrap();
        let recorded = teacher.activations(&batch, Mode::Eval, &mut rng).unwrap();
        prop_assert_eq!(teacher.predict_normalized(&batch).unwrap(), recorded.prediction_normalized);

        let scfg = StudentConfig { layers: 3, dim: 5, history: 6, horizon: 3, conv_kernel: if conv { 3 } else { 0 } };
        let student = Student::new(scfg.clone(), StudentParams::init(&scfg, &mut rng).unwrap()).unwrap();
        let recorded = student.activations(&batch).unwrap();
        prop_assert_eq!(student.predict_normalized(&batch).unwrap(), recorded.prediction_normalized);
    }
}
