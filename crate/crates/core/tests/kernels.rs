//! Convolution, TDC and tensor-core properties against brute-force oracles.

mod common;

use physformer::autodiff::Tape;
use physformer::model::{Model, ModelConfig, ModelKind};
use physformer::nn::Mode;
use physformer::tdc::{tdc, TdcSpec};
use physformer::{Rng, Tensor};
use proptest::prelude::*;

fn geometry() -> impl Strategy<Value = ([usize; 5], [usize; 5], [usize; 3], [usize; 3])> {
    (1usize..3, 1usize..4, 1usize..4, 2usize..6, 3usize..7, 3usize..7, 0usize..2, 0usize..2, 0usize..2, 1usize..3, 1usize..3)
        .prop_map(|(b, ci, co, t, h, w, kt, kh, kw, sh, sw)| {
            let k = [2 * kt + 1, 2 * kh + 1, 2 * kw + 1];
            let pad = [kt, kh, kw];
            ([b, ci, t, h, w], [co, ci, k[0], k[1], k[2]], [1, sh, sw], pad)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv3d_matches_direct_loops((xs, ws, stride, pad) in geometry(), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = rng.normal_tensor::<f64>(xs.to_vec(), 1.0);
        let w = rng.normal_tensor::<f64>(ws.to_vec(), 1.0);
        let b = rng.normal_tensor::<f64>(vec![ws[0]], 1.0);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv3d(xv, wv, Some(bv), stride, pad.map(|p| p as isize)).unwrap();
        let (want, shape) = common::conv3d(x.data(), xs, w.data(), ws, Some(b.data()), stride, pad);
        prop_assert_eq!(tape.shape(y), &shape[..]);
        let diff = tape.value(y).data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(diff <= 1e-5, "max |diff| {}", diff);
    }

    #[test]
    fn tdc_matches_its_literal_definition(seed in any::<u64>(), theta in 0.0f64..=1.0, ci in 1usize..3, co in 1usize..3, t in 3usize..6) {
        let mut rng = Rng::new(seed);
        let xs = [1, ci, t, 5, 5];
        let ws = [co, ci, 3, 3, 3];
        let x = rng.normal_tensor::<f64>(xs.to_vec(), 1.0);
        let w = rng.normal_tensor::<f64>(ws.to_vec(), 1.0);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let y = tdc(&mut tape, xv, wv, None, TdcSpec::same(theta).unwrap()).unwrap();
        let (want, _) = common::tdc(x.data(), xs, w.data(), ws, theta, [1; 3], [1; 3]);
        prop_assert!(common::rel_err(tape.value(y).data(), &want) <= 1e-10);
    }

    #[test]
    fn tdc_is_linear_in_its_input(seed in any::<u64>(), theta in 0.0f64..=1.0, alpha in -3.0f64..3.0) {
        let mut rng = Rng::new(seed);
        let x = rng.normal_tensor::<f64>(vec![1, 2, 4, 5, 5], 1.0);
        let w = rng.normal_tensor::<f64>(vec![3, 2, 3, 3, 3], 1.0);
        let mut tape = Tape::new();
        let wv = tape.constant(w);
        let xv = tape.constant(x.clone());
        let xa = tape.constant(x.map(|v| alpha * v));
        let spec = TdcSpec::same(theta).unwrap();
        let (y, ya) = (tdc(&mut tape, xv, wv, None, spec).unwrap(), tdc(&mut tape, xa, wv, None, spec).unwrap());
        let diff = tape.value(y).data().iter().zip(tape.value(ya).data()).map(|(a, b)| (alpha * a - b).abs()).fold(0.0, f64::max);
        prop_assert!(diff <= 1e-6);
    }

    #[test]
    fn softmax_rows_are_open_simplex_points(seed in any::<u64>(), n in 1usize..20, tau in 0.2f64..5.0) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Rng::new(seed).normal_tensor(vec![3, n], 4.0));
        let p = tape.softmax_temp(x, tau).unwrap();
        for row in tape.value(p).data().chunks_exact(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&v| v > 0.0 && (v < 1.0 || n == 1)));
        }
    }

    #[test]
    fn reshape_and_transpose_round_trip_bitwise(seed in any::<u64>(), a in 1usize..5, b in 1usize..5, c in 1usize..5) {
        let t = Rng::new(seed).normal_tensor::<f32>(vec![a, b, c], 1.0);
        prop_assert_eq!(&t.reshape(vec![a * b, c]).unwrap().reshape(vec![a, b, c]).unwrap(), &t);
        prop_assert_eq!(&t.transpose(0, 2).unwrap().transpose(0, 2).unwrap(), &t);
        prop_assert_eq!(&t.permute(&[1, 2, 0]).unwrap().permute(&[2, 0, 1]).unwrap(), &t);
    }
}

#[test]
fn forward_is_bitwise_identical_across_thread_counts() {
    for kind in [ModelKind::PhysFormer, ModelKind::PhysFormerPP] {
        let cfg = ModelConfig {
            frames: 16,
            height: 16,
            width: 16,
            dim: 8,
            ff_dim: 12,
            blocks: if kind == ModelKind::PhysFormer { 2 } else { 3 },
            slow_tube: [4, 1, 1],
            fast_tube: [2, 1, 1],
            ..ModelConfig::full(kind)
        };
        let model = Model::<f32>::new(cfg, 3).unwrap();
        let x: Tensor<f32> = Rng::new(4).uniform_tensor(vec![3, 3, 16, 16, 16], 0.0, 1.0);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| model.predict(&x, Mode::Train).unwrap())
        };
        let one = run(1);
        assert_eq!(one, run(4), "{kind}");
        assert_eq!(one, run(1), "{kind}");
    }
}
