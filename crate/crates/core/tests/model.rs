//! Tokenization arithmetic, output shape and gradient reach of both models.

use physformer::loss::{overall_loss, LossWeights, Targets};
use physformer::model::{forward, tube_grid, Model, ModelConfig, ModelKind};
use physformer::nn::{Mode, Session};
use physformer::{Rng, Tensor};
use proptest::prelude::*;

fn toy(kind: ModelKind, frames: usize) -> ModelConfig {
    ModelConfig {
        frames,
        height: 16,
        width: 16,
        dim: 8,
        ff_dim: 12,
        blocks: if kind == ModelKind::PhysFormer { 2 } else { 3 },
        slow_tube: [4, 1, 1],
        fast_tube: [2, 1, 1],
        ..ModelConfig::full(kind)
    }
}

proptest! {
    #[test]
    fn token_grid_is_floor_division(t in 1usize..400, h in 1usize..300, w in 1usize..300, ts in 1usize..9, hs in 1usize..33, ws in 1usize..33) {
        let g = tube_grid([t, h, w], [ts, hs, ws]);
        prop_assert_eq!(g, [t / ts, h / hs, w / ws]);
    }

    #[test]
    fn stem_then_tubes_follow_the_grid_formula(t in 1usize..50, h in 1usize..40, w in 1usize..40) {
        let mut cfg = ModelConfig::full(ModelKind::PhysFormer);
        (cfg.frames, cfg.height, cfg.width) = (4 * t, 8 * h, 8 * w);
        let [tt, hh, ww] = cfg.slow_grid();
        prop_assert_eq!([tt, hh, ww], [t, (8 * h / 8) / 4, (8 * w / 8) / 4]);
    }
}

#[test]
fn output_length_equals_input_frames() {
    for kind in [ModelKind::PhysFormer, ModelKind::PhysFormerPP] {
        for frames in [16, 32, 48] {
            let model = Model::<f32>::new(toy(kind, frames), 1).unwrap();
            let x: Tensor<f32> = Rng::new(2).uniform_tensor(vec![2, 3, frames, 16, 16], 0.0, 1.0);
            let y = model.predict(&x, Mode::Train).unwrap();
            assert_eq!(y.shape(), [2, frames], "{kind} at {frames} frames");
        }
    }
}

#[test]
fn every_parameter_receives_gradient() {
    for kind in [ModelKind::PhysFormer, ModelKind::PhysFormerPP] {
        let cfg = toy(kind, 32);
        let model = Model::<f64>::new(cfg.clone(), 4).unwrap();
        let mut rng = Rng::new(5);
        let x: Tensor<f64> = rng.uniform_tensor(vec![2, 3, 32, 16, 16], 0.0, 1.0);
        // 32 frames at 8 fps hold a full cycle of every class.
        let bvp = Tensor::<f64>::from_fn(vec![2, 32], |i| ((i % 32) as f64 * 0.9 + (i / 32) as f64).sin());
        let mut sess = Session::new(&model.params, Mode::Train, true);
        let xv = sess.tape.constant(x);
        let out = forward(&mut sess, &cfg, xv).unwrap();
        let maps = out.periodic_maps.clone();
        let terms = overall_loss(&mut sess.tape, out.signal, Targets { bvp: &bvp, hr: &[70.0, 95.0], fps: 8.0 }, &maps, &LossWeights::default(), 3, 25).unwrap();
        sess.tape.backward(terms.total).unwrap();
        let grads = sess.grads();
        let names: Vec<&String> = model.params.names().collect();
        let dead: Vec<&&String> = names.iter().filter(|n| grads.get(n.as_str()).is_none_or(|g| g.data().iter().all(|&v| v == 0.0))).collect();
        assert!(dead.is_empty(), "{kind}: parameters without gradient {dead:?}");
    }
}
