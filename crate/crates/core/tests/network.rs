use lmii_core::cost;
use lmii_core::engine::Tensor;
use lmii_core::network::{checkpoint, Lmiinet, NetworkConfig};
use lmii_core::nn::{Ctx, Mode};
use lmii_core::Error;

fn small(classes: usize) -> NetworkConfig {
    NetworkConfig {
        widths: vec![16, 32, 32],
        lfib_counts: vec![1; 6],
        ..NetworkConfig::default().with_classes(classes)
    }
}

#[test]
fn default_build_matches_its_cost_report() {
    let cfg = NetworkConfig::default();
    let net = Lmiinet::<f32>::build(&cfg).unwrap();
    let n = net.param_count();
    assert_eq!(n as u64, cost::count_params(&cfg).total_params());
    assert!((540_000..=900_000).contains(&n), "{n}");
    let bytes = checkpoint::encode(&net);
    assert!(bytes.len() < 8 << 20, "{} bytes", bytes.len());
}

#[test]
fn output_shapes_and_live_gradients() {
    let cfg = NetworkConfig::default().with_classes(11);
    let net = Lmiinet::<f32>::build(&cfg).unwrap();
    let x = Tensor::from_fn(&[2, 3, 64, 64], |i| ((i * 7919) % 255) as f32 / 127.5 - 1.0);
    let out = net.infer(&x, false).unwrap();
    assert_eq!(out.logits.shape(), &[2, 11, 64, 64]);
    assert_eq!(out.aux_logits.shape(), &[2, 11, 64, 64]);

    let mut cx = Ctx::new(&net.params, Mode::Train);
    let v = cx.input(x);
    let f = net.forward(&mut cx, v).unwrap();
    let loss =
        cx.g.cross_entropy(f.logits, &vec![3; 2 * 64 * 64], None)
            .unwrap();
    let (g, bindings, _) = cx.finish();
    let grads = g.backward(loss).unwrap();
    let mut params = net.params.clone();
    params.accumulate_grads(&bindings, &grads);
    let stem = params.find("stem.conv.weight").expect("stem weight");
    let norm = params.get(stem).grad.l2_norm();
    assert!(norm > 0.0 && norm.is_finite(), "stem gradient {norm}");
}

#[test]
fn lfib_count_ablations_differ() {
    let a = NetworkConfig {
        lfib_counts: vec![1, 2, 3, 3, 2, 1],
        ..NetworkConfig::default()
    };
    let b = NetworkConfig::default();
    let (pa, pb) = (
        Lmiinet::<f32>::build(&a).unwrap().param_count(),
        Lmiinet::<f32>::build(&b).unwrap().param_count(),
    );
    assert_ne!(pa, pb);
    assert_eq!(pa as u64, cost::count_params(&a).total_params());
}

#[test]
fn bad_inputs_are_rejected() {
    let net = Lmiinet::<f32>::build(&small(3)).unwrap();
    let e = net
        .infer(&Tensor::zeros(&[1, 3, 20, 16]), false)
        .unwrap_err();
    assert!(
        matches!(e, Error::Dimension { .. } | Error::InvalidConfig(_)),
        "{e}"
    );
    let e = net
        .infer(&Tensor::zeros(&[1, 4, 16, 16]), false)
        .unwrap_err();
    assert!(e.to_string().contains("channel"), "{e}");

    let bad = NetworkConfig {
        widths: vec![16, 30],
        cc_reduction: 0,
        ..NetworkConfig::default()
    };
    match Lmiinet::<f32>::build(&bad) {
        Err(Error::InvalidConfig(v)) => assert!(v.len() >= 2, "{v:?}"),
        Err(e) => panic!("{e}"),
        Ok(_) => panic!("invalid config built"),
    }
}

#[test]
fn corrupted_magic_is_a_format_error() {
    let mut bytes = checkpoint::encode(&Lmiinet::<f32>::build(&small(5)).unwrap());
    bytes[0] = b'X';
    assert!(matches!(checkpoint::decode(&bytes), Err(Error::Format(_))));
}

#[test]
fn config_json_round_trip() {
    let cfg = small(7);
    let text = cfg.to_canonical_json();
    assert_eq!(NetworkConfig::from_json(&text).unwrap(), cfg);
    assert!(NetworkConfig::from_json(r#"{"classes": 3, "bogus": 1}"#).is_err());
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let e = NetworkConfig::load(&missing).unwrap_err();
    assert!(e.to_string().contains("nope.json"));
}
