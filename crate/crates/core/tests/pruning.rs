mod common;

use chanprune::graph::{LayerKind, NetworkGraph};
use chanprune::ops::Mode;
use chanprune::prune::{bn_equivalent_wrap, detect_constant_channels, prune, rewrite, PruneMask};
use chanprune::Tensor;
use common::{random_valid_net, random_zero_mask};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_output_diff(a: &NetworkGraph, b: &NetworkGraph, inputs: &[Tensor]) -> f64 {
    inputs
        .iter()
        .map(|x| a.forward(x, Mode::Inference).unwrap().max_abs_diff(&b.forward(x, Mode::Inference).unwrap()))
        .fold(0.0, f64::max)
}

fn inputs(g: &NetworkGraph, count: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let d = g.input_dims();
    (0..count).map(|_| Tensor::randn(&[2, d.height, d.width, d.channels], 1.0, rng)).collect()
}

/// Parameter count after pruning, computed from layer shapes: each weighted
/// layer keeps `kh·kw·cin'·cout'` kernel entries plus a bias or four BN
/// entries per kept output channel.
fn expected_params_after(g: &NetworkGraph, mask: &PruneMask) -> u64 {
    let kept_out = |l| mask.layers.get(&l).map(|m| m.kept());
    let mut fed_by = std::collections::BTreeMap::new();
    for &l in mask.layers.keys() {
        for c in g.consumers(l) {
            fed_by.insert(c, l);
        }
    }
    (0..g.len())
        .filter_map(|l| g.params(l).map(|p| (l, p)))
        .map(|(l, p)| {
            let w = p.weight.shape();
            let cout = kept_out(l).unwrap_or(w[3]);
            let cin = fed_by.get(&l).and_then(|&src| kept_out(src)).unwrap_or(w[2]);
            let per_channel = if p.bn.is_some() { 4 } else { 1 };
            (w[0] * w[1] * cin * cout + per_channel * cout) as u64
        })
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn valid_padding_rewrite_is_exact(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = random_valid_net(&mut rng);
        random_zero_mask(&mut g, &mut rng);
        let (rw, report) = prune(&g).unwrap();
        prop_assert!(!rw.requires_finetune);
        let xs = inputs(&g, 5, &mut rng);
        let diff = max_output_diff(&g, &rw.graph, &xs);
        prop_assert!(diff <= 1e-9, "max diff {diff:e}");
        let mask = detect_constant_channels(&g);
        prop_assert_eq!(report.params_after, expected_params_after(&g, &mask));
        prop_assert_eq!(rw.graph.count_params(), report.params_after);
    }

    #[test]
    fn pruning_is_idempotent(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = random_valid_net(&mut rng);
        random_zero_mask(&mut g, &mut rng);
        let once = prune(&g).unwrap().0.graph;
        let twice = prune(&once).unwrap().0.graph;
        prop_assert_eq!(once.description(), twice.description());
        for k in once.param_keys() {
            prop_assert!(once.param(k).unwrap().bitwise_eq(twice.param(k).unwrap()));
        }
    }

    #[test]
    fn kept_channels_are_exactly_the_nonzero_gammas(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = random_valid_net(&mut rng);
        random_zero_mask(&mut g, &mut rng);
        let (rw, _) = prune(&g).unwrap();
        for l in g.prunable_layers() {
            let gamma = &g.layer(l).bn().unwrap().gamma;
            let nonzero: Vec<f64> = gamma.data().iter().copied().filter(|&v| v != 0.0).collect();
            prop_assert_eq!(rw.graph.layer(l).bn().unwrap().gamma.data(), &nonzero[..]);
        }
    }

    #[test]
    fn bn_wrap_preserves_inference_output(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_valid_net(&mut rng);
        let classifier = g.classifier().unwrap();
        let target = (0..g.len()).find(|&l| {
            matches!(g.layer(l).kind(), LayerKind::Conv { batchnorm: false, .. }) && l != classifier
        });
        prop_assume!(target.is_some());
        let target = target.unwrap();
        let calib = inputs(&g, 1, &mut rng);
        let wrapped = bn_equivalent_wrap(&g, target, &calib).unwrap();
        let diff = max_output_diff(&g, &wrapped, &calib);
        prop_assert!(diff <= 1e-10, "max diff {diff:e}");
        prop_assert!(wrapped.layer(target).bn().is_some());
    }
}

#[test]
fn all_zero_layer_is_rejected_with_its_name() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = random_valid_net(&mut rng);
    let l = g.prunable_layers()[0];
    let name = g.layer(l).name().to_string();
    let bn = g.params_mut(l).unwrap().bn.as_mut().unwrap();
    bn.gamma = Tensor::zeros(bn.gamma.shape());
    let err = prune(&g).unwrap_err().to_string();
    assert!(err.contains(&name), "{err}");
}

#[test]
fn rewrite_with_forced_mask_keeps_requested_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = random_valid_net(&mut rng);
    let keep: Vec<_> = g
        .prunable_layers()
        .into_iter()
        .map(|l| {
            let c = g.layer(l).dims().channels;
            let k = rng.gen_range(1..=c);
            (l, (0..c).map(|i| i < k).collect::<Vec<bool>>())
        })
        .collect();
    let mask = PruneMask::from_keep(&g, keep.clone()).unwrap();
    let rw = rewrite(&g, &mask).unwrap();
    for (l, k) in keep {
        assert_eq!(rw.graph.layer(l).dims().channels, k.iter().filter(|&&b| b).count());
    }
}
