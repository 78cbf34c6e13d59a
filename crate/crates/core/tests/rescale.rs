mod common;

use chanprune::graph::ParamSlot;
use chanprune::ops::Mode;
use chanprune::presets::mnist_small;
use chanprune::sparsify::rescale_gamma_w;
use chanprune::Tensor;
use common::{param_grads, random_valid_net, randomize, rel_err};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn forward_is_invariant(seed in any::<u64>(), alpha in prop::sample::select(vec![0.01, 0.1, 10.0, 3.7])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_valid_net(&mut rng);
        let r = rescale_gamma_w(&g, alpha).unwrap();
        let d = g.input_dims();
        let x = Tensor::randn(&[4, d.height, d.width, d.channels], 1.0, &mut rng);
        for mode in [Mode::Inference, Mode::Training] {
            let a = g.forward(&x, mode).unwrap();
            let b = r.forward(&x, mode).unwrap();
            prop_assert!(rel_err(a.data(), b.data()) <= 1e-6);
        }
    }

    #[test]
    fn round_trip_restores_parameters(seed in any::<u64>(), alpha in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_valid_net(&mut rng);
        let back = rescale_gamma_w(&rescale_gamma_w(&g, alpha).unwrap(), 1.0 / alpha).unwrap();
        for k in g.param_keys() {
            let (a, b) = (g.param(k).unwrap(), back.param(k).unwrap());
            prop_assert!(a.max_rel_diff(b, 1e-300) <= 1e-12);
        }
    }
}

#[test]
fn gradients_follow_the_scaling_laws() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut g = mnist_small(4, 6, &mut rng).unwrap();
    randomize(&mut g, &mut rng);
    let x = Tensor::randn(&[6, 28, 28, 1], 1.0, &mut rng);
    let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..10)).collect();
    let base = param_grads(&g, &x, &labels);
    for alpha in [0.01, 0.1, 10.0] {
        let r = rescale_gamma_w(&g, alpha).unwrap();
        let scaled = param_grads(&r, &x, &labels);
        for l in g.prunable_layers() {
            let key = |slot| chanprune::graph::ParamKey { layer: l, slot };
            let expect: Vec<f64> = base[&key(ParamSlot::Gamma)].data().iter().map(|v| v / alpha).collect();
            assert!(rel_err(scaled[&key(ParamSlot::Gamma)].data(), &expect) <= 1e-6);
            for c in g.consumers(l) {
                let wk = chanprune::graph::ParamKey { layer: c, slot: ParamSlot::Weight };
                let expect: Vec<f64> = base[&wk].data().iter().map(|v| v * alpha).collect();
                assert!(rel_err(scaled[&wk].data(), &expect) <= 1e-6, "layer {c} alpha {alpha}");
            }
        }
    }
}
