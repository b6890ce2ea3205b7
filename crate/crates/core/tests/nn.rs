#[path = "common/oracle.rs"]
mod oracle;

use geobdl::model::NetworkSpec;
use oracle::{gradient_check, random_inputs, random_weights, reference_forward, tiny_spec};
use geobdl::nn::{
    self, backward, forward, Checkpoint, DropoutMask, Dtype, GaussianPrediction, LayerSpec, Network,
    Tensor, WeightSet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn forward_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for variant in 0..5 {
        let spec = tiny_spec(variant);
        let net = Network::new(&spec).unwrap();
        let w = random_weights(&net, &mut rng);
        let (patches, locs, _) = random_inputs(&spec, 4, &mut rng);
        let masks: Vec<DropoutMask> = (0..4).map(|_| net.sample_mask(0.3, &mut rng).unwrap()).collect();
        for masks in [None, Some(masks.as_slice())] {
            let preds = forward(&spec, &w, masks, &patches, &locs).unwrap();
            for (i, pred) in preds.iter().enumerate() {
                let (mu, lv, _) = reference_forward(&spec, &w, masks.map(|m| &m[i]), patches.row(i), locs.row(i));
                assert!((pred.mu - mu).abs() < 1e-10 && (pred.log_var - lv).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for variant in 0..6 {
        let worst = gradient_check(variant, &mut rng, 1e-4);
        assert!(worst < 1e-4, "variant {variant}: max relative error {worst}");
    }
}

#[test]
fn zero_network_outputs_unit_variance() {
    let spec = tiny_spec(0);
    let net = Network::new(&spec).unwrap();
    let w = WeightSet::zeros_like(&random_weights(&net, &mut ChaCha8Rng::seed_from_u64(1)));
    let (patches, locs, _) = random_inputs(&spec, 3, &mut ChaCha8Rng::seed_from_u64(2));
    for p in forward(&spec, &w, None, &patches, &locs).unwrap() {
        assert_eq!(p.mu, 0.0);
        assert_eq!(p.sigma2, 1.0 + nn::VARIANCE_FLOOR);
    }
}

/// Location-only network: zero-weight conv branch, dense 3→3 identity, ReLU,
/// head summing into mu.
fn identity_spec() -> NetworkSpec {
    NetworkSpec {
        patch_channels: 1,
        patch_size: 3,
        location_inputs: 3,
        conv_branch: vec![LayerSpec::conv3x3(1, 1, 1), LayerSpec::Flatten],
        dense_branch: vec![LayerSpec::dense(3, 3), LayerSpec::Relu],
        head: vec![LayerSpec::Concat, LayerSpec::dense(4, 2)],
        dropout_rate: 0.0,
    }
}

#[test]
fn identity_dense_passes_positive_input() {
    let spec = identity_spec();
    let net = Network::new(&spec).unwrap();
    let mut w = WeightSet::zeros_like(&net.init_weights(0));
    for i in 0..3 {
        w.tensors[2].data[i * 3 + i] = 1.0;
    }
    let loc = [0.5, 1.5, 2.5];
    for k in 0..3 {
        let mut head = vec![0.0; 8];
        head[1 + k] = 1.0;
        w.tensors[4].data = head;
        let p = net.forward_sample(&w, None, &[0.0; 9], &loc).unwrap();
        assert_eq!(p.mu, loc[k]);
    }
}

#[test]
fn nll_values() {
    let p = GaussianPrediction::new(0.3, (1.0 / (2.0 * std::f64::consts::PI) - nn::VARIANCE_FLOOR).ln()).unwrap();
    assert!(p.nll(0.3).abs() < 1e-12);
    let q = GaussianPrediction::new(0.0, (1.0 - nn::VARIANCE_FLOOR).ln()).unwrap();
    assert!((q.nll(0.0) - 0.918_938_533_204_672_7).abs() < 1e-12);
    let r = GaussianPrediction::new(0.0, (2.0 - nn::VARIANCE_FLOOR).ln()).unwrap();
    assert!((r.nll(0.0) - q.nll(0.0) - 0.5 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn stationary_point_has_zero_gradient() {
    // single linear unit: mu = a * loc0 + b hits the target exactly; variance detached
    let spec = identity_spec();
    let net = Network::new(&spec).unwrap().with_detached_log_var(true);
    let mut w = WeightSet::zeros_like(&net.init_weights(0));
    w.tensors[2].data[0] = 1.0;
    w.tensors[4].data[1] = 2.0;
    w.tensors[5].data[0] = 0.5;
    let loc = [0.75, 0.0, 0.0];
    let target = 2.0 * 0.75 + 0.5;
    let mut grads = WeightSet::zeros_like(&w);
    let item = nn::BatchItem {
        patch: &[0.0; 9],
        location: &loc,
        target,
        mask: None,
    };
    net.accumulate_gradient(&w, &item, 1.0, &mut grads).unwrap();
    assert!(grads.values().all(|&g| g == 0.0));
}

#[test]
fn dropped_unit_gets_no_incoming_gradient() {
    let spec = tiny_spec(4);
    let net = Network::new(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let w = random_weights(&net, &mut rng);
    let (patches, locs, y) = random_inputs(&spec, 1, &mut rng);
    let mut mask = net.sample_mask(0.0, &mut rng).unwrap();
    mask.keep = 0.7;
    // dense-branch dropout is the second dropout layer; drop its unit 2
    mask.layers[1][2] = false;
    let g = backward(&spec, &w, Some(std::slice::from_ref(&mask)), &patches, &locs, &y).unwrap();
    // dense branch weights are layer 2 (after two convs): kernel [4, 3]
    let (gk, gb) = g.layer(2);
    assert!(gk[6..9].iter().all(|&v| v == 0.0));
    assert_eq!(gb[2], 0.0);
    assert!(gk[..6].iter().any(|&v| v != 0.0));
}

#[test]
fn mask_statistics() {
    let spec = tiny_spec(1);
    let net = Network::new(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let zero = net.sample_mask(0.0, &mut rng).unwrap();
    assert!(zero.layers.iter().flatten().all(|&k| k));

    let mut kept = 0usize;
    let mut total = 0usize;
    while total < 100_000 {
        let m = net.sample_mask(0.5, &mut rng).unwrap();
        kept += m.layers.iter().flatten().filter(|&&k| k).count();
        total += m.layers.iter().map(Vec::len).sum::<usize>();
    }
    let frac = kept as f64 / total as f64;
    assert!((frac - 0.5).abs() < 0.01, "{frac}");

    let a = net.sample_mask(0.2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = net.sample_mask(0.2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
    assert!(net.sample_mask(1.0, &mut rng).is_err());
}

#[test]
fn inverted_dropout_preserves_linear_mean() {
    // purely linear network: conv, dropout, flatten; dense, dropout; dense head
    let spec = NetworkSpec {
        patch_channels: 1,
        patch_size: 5,
        location_inputs: 3,
        conv_branch: vec![LayerSpec::conv3x3(1, 2, 1), LayerSpec::Dropout, LayerSpec::Flatten],
        dense_branch: vec![LayerSpec::dense(3, 4), LayerSpec::Dropout],
        head: vec![LayerSpec::Concat, LayerSpec::dense(22, 6), LayerSpec::Dropout, LayerSpec::dense(6, 2)],
        dropout_rate: 0.25,
    };
    let net = Network::new(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let w = random_weights(&net, &mut rng);
    let patch: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loc = [0.2, -0.4, 0.9];
    let exact = net.forward_sample(&w, None, &patch, &loc).unwrap().mu;
    let n = 10_000;
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            let m = net.sample_mask(0.25, &mut rng).unwrap();
            net.forward_sample(&w, Some(&m), &patch, &loc).unwrap().mu
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let se = sd / (n as f64).sqrt();
    assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
}

#[test]
fn whole_map_pool_is_mean() {
    let spec = NetworkSpec {
        patch_channels: 1,
        patch_size: 4,
        location_inputs: 3,
        conv_branch: vec![LayerSpec::AvgPool2d { pool: 4, stride: 1 }, LayerSpec::Flatten],
        dense_branch: vec![LayerSpec::dense(3, 1)],
        head: vec![LayerSpec::Concat, LayerSpec::dense(2, 2)],
        dropout_rate: 0.0,
    };
    let net = Network::new(&spec).unwrap();
    let mut w = WeightSet::zeros_like(&net.init_weights(0));
    w.tensors[2].data = vec![1.0, 0.0, 0.0, 0.0];
    let patch: Vec<f64> = (0..16).map(|i| (i * i) as f64 * 0.1).collect();
    let mu = net.forward_sample(&w, None, &patch, &[0.0; 3]).unwrap().mu;
    assert!((mu - patch.iter().sum::<f64>() / 16.0).abs() < 1e-12);
}

#[test]
fn non_finite_activations_are_errors() {
    let spec = tiny_spec(0);
    let net = Network::new(&spec).unwrap();
    let mut w = random_weights(&net, &mut ChaCha8Rng::seed_from_u64(2));
    w.tensors[0].data[0] = f64::MAX;
    w.tensors[0].data[1] = f64::MAX;
    let (patches, locs, _) = random_inputs(&spec, 1, &mut ChaCha8Rng::seed_from_u64(3));
    let mut p = patches.clone();
    p.data.iter_mut().for_each(|v| *v = 1e300);
    assert!(matches!(
        forward(&spec, &w, None, &p, &locs),
        Err(nn::NnError::NonFinite(_))
    ));
}

#[test]
fn shape_mismatch_is_reported() {
    let spec = tiny_spec(0);
    let (patches, _, _) = random_inputs(&spec, 2, &mut ChaCha8Rng::seed_from_u64(3));
    let bad_locs = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
    let w = Network::new(&spec).unwrap().init_weights(1);
    assert!(matches!(
        forward(&spec, &w, None, &patches, &bad_locs),
        Err(nn::NnError::ShapeMismatch { .. })
    ));
}

#[test]
fn checkpoint_round_trip() {
    let spec = tiny_spec(2);
    let net = Network::new(&spec).unwrap();
    let w = random_weights(&net, &mut ChaCha8Rng::seed_from_u64(8));
    let ck = Checkpoint::new(spec.clone(), w.clone(), 99, None, serde_json::json!({"note": "x"}));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert!(back.weights.values().zip(w.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(back.header.output_order, ["mu", "log_var"]);

    let mut narrow = ck.clone();
    narrow.header.dtype = Dtype::F32;
    let back32 = Checkpoint::decode(&narrow.encode().unwrap()).unwrap();
    for (a, b) in back32.weights.values().zip(w.values()) {
        assert_eq!(*a, *b as f32 as f64);
    }

    let mut bytes = ck.encode().unwrap();
    bytes[0] = b'X';
    assert!(Checkpoint::decode(&bytes).is_err());
    let bytes = ck.encode().unwrap();
    assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
}
