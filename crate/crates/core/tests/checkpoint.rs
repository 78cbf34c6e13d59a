mod common;

use chanprune::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Stage};
use chanprune::ops::Mode;
use chanprune::{DType, Error, Tensor};
use common::{random_valid_net, random_zero_mask};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(30))]

    #[test]
    fn f64_round_trip_is_bitwise(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = random_valid_net(&mut rng);
        random_zero_mask(&mut g, &mut rng);
        let mut ck = Checkpoint::new(Stage::Sparsified, g, seed);
        ck.rescale_alpha = 0.1;
        let bytes = save_checkpoint(&ck).unwrap();
        let back = load_checkpoint(&bytes).unwrap();
        prop_assert_eq!(back.stage, Stage::Sparsified);
        prop_assert_eq!(back.seed, seed);
        prop_assert_eq!(back.rescale_alpha, 0.1);
        for k in ck.graph.param_keys() {
            prop_assert!(ck.graph.param(k).unwrap().bitwise_eq(back.graph.param(k).unwrap()));
        }
        prop_assert_eq!(save_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn f32_storage_is_stable_after_first_rounding(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_valid_net(&mut rng);
        let mut ck = Checkpoint::new(Stage::Baseline, g, seed);
        ck.dtype = DType::F32;
        let once = load_checkpoint(&save_checkpoint(&ck).unwrap()).unwrap();
        let bytes = save_checkpoint(&once).unwrap();
        let twice = load_checkpoint(&bytes).unwrap();
        prop_assert_eq!(save_checkpoint(&twice).unwrap(), bytes);
        let d = ck.graph.input_dims();
        let x = Tensor::randn(&[2, d.height, d.width, d.channels], 1.0, &mut rng);
        let a = ck.graph.forward(&x, Mode::Inference).unwrap();
        let b = once.graph.forward(&x, Mode::Inference).unwrap();
        prop_assert!(a.max_rel_diff(&b, 1.0) <= 1e-4);
    }
}

#[test]
fn any_flipped_blob_byte_fails_the_checksum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ck = Checkpoint::new(Stage::Pruned, random_valid_net(&mut rng), 2);
    let bytes = save_checkpoint(&ck).unwrap();
    let tail = bytes.len() - 16;
    let mut bad = bytes.clone();
    bad[tail] ^= 0x40;
    assert!(matches!(load_checkpoint(&bad), Err(Error::Checksum { .. })));
    assert!(matches!(load_checkpoint(&bytes[..tail]), Err(Error::Truncated { .. })));
}
