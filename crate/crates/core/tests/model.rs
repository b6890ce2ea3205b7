use geobdl::model::{build_network, build_paper_network, describe, ArchConfig};
use geobdl::nn::ops::{avgpool_forward, PoolGeom};
use geobdl::nn::{param_count, LayerSpec, Network, Shape};
use rand::{Rng, SeedableRng};

#[test]
fn paper_network_size() {
    let spec = build_paper_network(0.1).unwrap();
    assert_eq!(param_count(&spec), 741_634);
    assert_eq!(Network::new(&spec).unwrap().param_count(), 741_634);
    assert_eq!(LayerSpec::dense(3, 512).param_count(), 3 * 512 + 512);
    assert_eq!(LayerSpec::conv3x3(1, 128, 1).param_count(), 9 * 128 + 128);
}

#[test]
fn conv_shape_chain() {
    let spec = build_paper_network(0.0).unwrap();
    let net = Network::new(&spec).unwrap();
    let sides: Vec<usize> = net
        .steps()
        .filter(|s| matches!(s.layer, LayerSpec::Conv2d { .. } | LayerSpec::AvgPool2d { .. }))
        .map(|s| match s.output {
            Shape::Map { height, width, .. } => {
                assert_eq!(height, width);
                height
            }
            Shape::Flat(_) => panic!("map expected"),
        })
        .collect();
    assert_eq!(sides, [10, 8, 6, 4, 2]);
    let concat = net.steps().find(|s| s.layer == LayerSpec::Concat).unwrap();
    assert_eq!(concat.output, Shape::Flat(1024));
    let flat = net.steps().find(|s| s.layer == LayerSpec::Flatten).unwrap();
    assert_eq!(flat.output, Shape::Flat(512));
}

#[test]
fn dropout_follows_every_hidden_weight_layer() {
    let spec = build_paper_network(0.2).unwrap();
    for branch in [&spec.conv_branch, &spec.dense_branch, &spec.head] {
        for (i, l) in branch.iter().enumerate() {
            let is_output = std::ptr::eq(branch, &spec.head) && i + 1 == branch.len();
            if l.has_weights() && !is_output {
                assert_eq!(branch[i + 1], LayerSpec::Relu);
                assert_eq!(branch[i + 2], LayerSpec::Dropout);
            }
        }
    }
    let no_conv = build_network(&ArchConfig {
        dropout_in_conv: false,
        ..ArchConfig::paper(0.2)
    })
    .unwrap();
    assert!(!no_conv.conv_branch.contains(&LayerSpec::Dropout));
    assert_eq!(param_count(&no_conv), 741_634);
}

#[test]
fn description_table() {
    let spec = build_paper_network(0.1).unwrap();
    let d = describe(&spec).unwrap();
    assert_eq!(d.rows.iter().map(|r| r.params).sum::<usize>(), 741_634);
    assert_eq!(d.total_params, 741_634);
    assert!(d.rows.iter().any(|r| r.summary() == "dense 3→512, params 2048"));
    assert!(d.rows.iter().filter(|r| r.kind == "avgpool2d").all(|r| r.params == 0));
    let text = d.to_text();
    assert!(text.contains("741634"));
}

#[test]
fn reduced_width_keeps_topology() {
    let spec = build_network(&ArchConfig {
        patch_size: 32,
        conv_channels: 8,
        dense_width: 32,
        head_widths: vec![32, 16],
        dropout_rate: 0.1,
        dropout_in_conv: true,
    })
    .unwrap();
    // 8 * 2 * 2 conv features + 32 dense features
    let net = Network::new(&spec).unwrap();
    let concat = net.steps().find(|s| s.layer == LayerSpec::Concat).unwrap();
    assert_eq!(concat.output, Shape::Flat(64));
}

#[test]
fn pool_quadrants() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let x: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let g = PoolGeom {
        channels: 1,
        in_h: 4,
        in_w: 4,
        out_h: 2,
        out_w: 2,
        pool: 3,
        stride: 1,
    };
    let y = avgpool_forward(&x, &g);
    for (oy, ox) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let mut s = 0.0;
        for r in oy..oy + 3 {
            for c in ox..ox + 3 {
                s += x[r * 4 + c];
            }
        }
        assert!((y[oy * 2 + ox] - s / 9.0).abs() < 1e-15);
    }
}
