//! Properties of the three attention variants and the relative encoding.

use physformer::attention::{relative_logits, split_heads, td_mhcsa, td_mhpsa, td_mhsa, AttentionConfig, Projection};
use physformer::autodiff::{Tape, Var};
use physformer::{Rng, Tensor};
use proptest::prelude::*;

struct Setup {
    tape: Tape<f64>,
    rng: Rng,
    proj: Projection,
}

impl Setup {
    fn new(seed: u64, dim: usize) -> Self {
        let mut tape = Tape::new();
        let mut rng = Rng::new(seed);
        let weight = tape.constant(rng.normal_tensor(vec![dim, dim], 0.5));
        let bias = tape.constant(rng.normal_tensor(vec![dim], 0.5));
        Self { tape, rng, proj: Projection { weight, bias: Some(bias) } }
    }

    fn tokens(&mut self, b: usize, l: usize, dim: usize) -> Var {
        let t = self.rng.normal_tensor(vec![b, l, dim], 1.0);
        self.tape.constant(t)
    }

    fn values(&self, v: Var) -> Vec<f64> {
        self.tape.value(v).data().to_vec()
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn assert_rows_are_distributions(w: &Tensor<f64>) {
    let n = *w.shape().last().unwrap();
    for row in w.data().chunks_exact(n) {
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn every_variant_emits_row_stochastic_weights(
        seed in any::<u64>(), heads in 1usize..4, dh in 1usize..4, l in 1usize..9, ls in 1usize..6, tau in 0.3f64..5.0,
    ) {
        let dim = heads * dh;
        let mut s = Setup::new(seed, dim);
        let cfg = AttentionConfig::new(dim, heads, tau, 0.7, 0.5).unwrap();
        let (q, k, v) = (s.tokens(2, l, dim), s.tokens(2, l, dim), s.tokens(2, l, dim));
        let (ks, vs) = (s.tokens(2, ls, dim), s.tokens(2, ls, dim));
        let table = s.rng.normal_tensor(vec![2 * l - 1, dh], 1.0);
        let table = s.tape.constant(table);
        let outs = [
            td_mhsa(&mut s.tape, q, k, v, &s.proj, &cfg).unwrap(),
            td_mhcsa(&mut s.tape, q, k, v, ks, vs, &s.proj, &cfg).unwrap(),
            td_mhpsa(&mut s.tape, q, k, v, table, &s.proj, &cfg).unwrap(),
        ];
        for out in &outs {
            for &w in &out.weights {
                assert_rows_are_distributions(s.tape.value(w));
            }
        }
    }

    #[test]
    fn cross_self_attention_is_the_sum_of_its_terms(seed in any::<u64>(), heads in 1usize..3, l in 1usize..8) {
        let dim = 2 * heads;
        let mut s = Setup::new(seed, dim);
        let cfg = AttentionConfig::new(dim, heads, 2.0, 0.7, 0.5).unwrap();
        let (q, k, v) = (s.tokens(1, l, dim), s.tokens(1, l, dim), s.tokens(1, l, dim));
        let (ks, vs) = (s.tokens(1, l, dim), s.tokens(1, l, dim));
        let both = td_mhcsa(&mut s.tape, q, k, v, ks, vs, &s.proj, &cfg).unwrap();
        let cross = td_mhsa(&mut s.tape, q, ks, vs, &s.proj, &cfg).unwrap();
        let own = td_mhsa(&mut s.tape, q, k, v, &s.proj, &cfg).unwrap();
        let sum: Vec<f64> = s.values(cross.heads).iter().zip(s.values(own.heads)).map(|(a, b)| a + b).collect();
        prop_assert!(max_diff(&s.values(both.heads), &sum) <= 1e-6);
    }

    #[test]
    fn permuting_keys_with_values_leaves_output_unchanged(seed in any::<u64>(), l in 2usize..9) {
        let (dim, heads) = (4, 2);
        let mut s = Setup::new(seed, dim);
        let cfg = AttentionConfig::new(dim, heads, 2.0, 0.7, 0.5).unwrap();
        let q = s.tokens(1, l, dim);
        let (kt, vt) = (s.rng.normal_tensor::<f64>(vec![1, l, dim], 1.0), s.rng.normal_tensor::<f64>(vec![1, l, dim], 1.0));
        let mut perm: Vec<usize> = (0..l).collect();
        s.rng.shuffle(&mut perm);
        let permute = |t: &Tensor<f64>| {
            let d: Vec<f64> = perm.iter().flat_map(|&i| t.data()[i * dim..(i + 1) * dim].to_vec()).collect();
            Tensor::new(vec![1, l, dim], d).unwrap()
        };
        let (k, v) = (s.tape.constant(kt.clone()), s.tape.constant(vt.clone()));
        let (kp, vp) = (s.tape.constant(permute(&kt)), s.tape.constant(permute(&vt)));
        let a = td_mhsa(&mut s.tape, q, k, v, &s.proj, &cfg).unwrap();
        let b = td_mhsa(&mut s.tape, q, kp, vp, &s.proj, &cfg).unwrap();
        prop_assert!(max_diff(&s.values(a.out), &s.values(b.out)) <= 1e-6);
    }
}

#[test]
fn higher_temperature_never_sharpens_attention() {
    let entropy = |p: &[f64]| -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
    for seed in 0..20 {
        let mut tape = Tape::<f64>::new();
        let logits = Rng::new(seed).normal_tensor::<f64>(vec![1, 12], 3.0);
        let x = tape.constant(logits);
        let h: Vec<f64> = [0.5, 2.0, 4.9]
            .iter()
            .map(|&tau| {
                let p = tape.softmax_temp(x, tau).unwrap();
                entropy(tape.value(p).data())
            })
            .collect();
        assert!(h[0] <= h[1] && h[1] <= h[2], "seed {seed}: entropies {h:?}");
    }
}

#[test]
fn skewed_relative_logits_match_the_naive_product() {
    let mut rng = Rng::new(5);
    for l in (1..=64).step_by(7).chain([64]) {
        let (heads, dh) = (2, 3);
        let mut tape = Tape::<f64>::new();
        let qt = rng.normal_tensor::<f64>(vec![1, l, heads * dh], 1.0);
        let rows = 2 * l - 1;
        let table = rng.normal_tensor::<f64>(vec![rows, dh], 1.0);
        let q = tape.constant(qt.clone());
        let qh = split_heads(&mut tape, q, heads).unwrap();
        let tv = tape.constant(table.clone());
        let s = relative_logits(&mut tape, qh, tv).unwrap();
        let got = tape.value(s).data().to_vec();
        let mut worst = 0.0f64;
        for h in 0..heads {
            for i in 0..l {
                for j in 0..l {
                    let row = (l - 1) + j - i;
                    let naive: f64 = (0..dh).map(|d| qt.data()[i * heads * dh + h * dh + d] * table.data()[row * dh + d]).sum();
                    worst = worst.max((got[(h * l + i) * l + j] - naive).abs());
                }
            }
        }
        assert!(worst <= 1e-5, "L = {l}: {worst}");
    }
}
