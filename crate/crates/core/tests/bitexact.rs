//! Simulator, engine and a float oracle agree exactly on random networks.

mod common;

use flatstream::engine::{dataset, evaluate, forward_quant, QuantizedModel};
use flatstream::model::zoo;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn two_hundred_random_nets_are_bit_exact() {
    let c = common::equivalence_campaign(200, 0x5eed);
    assert_eq!(c.nets, 200);
    assert!(c.failures.is_empty(), "{} mismatches, first: {}", c.failures.len(), c.failures[0]);
}

#[test]
fn depthwise_and_pool_agree_with_oracle() {
    let net = zoo::tiny_separable();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let params = common::random_params(&net, &mut rng);
        let q = common::random_config(&net, &mut rng);
        let model = QuantizedModel::quantize(&net, &params, &q).unwrap();
        let img = common::random_image(&net, &mut rng);
        let out = forward_quant(&model, &img).unwrap().output_stream();
        assert!(common::matches_oracle(&model, &out, &common::dyadic_forward(&model, &img)), "{q}");
    }
}

#[test]
fn evaluate_matches_naive_scalar_accuracy() {
    let net = zoo::tiny_separable();
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let params = common::random_params(&net, &mut rng);
    let q = common::random_config(&net, &mut rng);
    let model = QuantizedModel::quantize(&net, &params, &q).unwrap();
    let data = dataset::random(net.input_shape, net.class_count, 64, 9);
    let r = evaluate(&model, &data).unwrap();
    let (t1, t5) = common::naive_accuracy(&model, &data);
    assert_eq!((r.top1, r.top5), (t1, t5));
    assert_eq!(r.sample_count, 64);
}

#[test]
fn evaluation_is_thread_count_independent() {
    let net = zoo::tiny_separable();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = common::random_params(&net, &mut rng);
    let model = QuantizedModel::quantize(&net, &params, &common::random_config(&net, &mut rng)).unwrap();
    let data = dataset::random(net.input_shape, net.class_count, 48, 1);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| evaluate(&model, &data).unwrap())
    };
    assert_eq!(run(1), run(4));
}
