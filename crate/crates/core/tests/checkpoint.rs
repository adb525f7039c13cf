use lmii_core::engine::Tensor;
use lmii_core::network::{checkpoint, Lmiinet, NetworkConfig};
use lmii_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> NetworkConfig {
    NetworkConfig {
        widths: vec![16, 32, 32],
        lfib_counts: vec![1; 6],
        seed: 5,
        ..NetworkConfig::default().with_classes(4)
    }
}

/// A net whose every value differs from initialization, buffers included.
fn perturbed() -> Lmiinet<f32> {
    let mut net = Lmiinet::<f32>::build(&small()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for p in net.params.params_mut() {
        p.value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.gen_range(-0.1f32..0.1));
    }
    for b in net.params.buffers_mut() {
        b.value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = v.abs() + rng.gen_range(0.0f32..0.5));
    }
    net
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn assert_same(a: &Lmiinet<f32>, b: &Lmiinet<f32>) {
    assert_eq!(a.config, b.config);
    assert_eq!(a.params.params().len(), b.params.params().len());
    for (x, y) in a.params.params().iter().zip(b.params.params()) {
        assert_eq!(x.name, y.name);
        assert_eq!(x.value.shape(), y.value.shape());
        assert_eq!(bits(&x.value), bits(&y.value), "{}", x.name);
    }
    for (x, y) in a.params.buffers().iter().zip(b.params.buffers()) {
        assert_eq!(x.name, y.name);
        assert_eq!(bits(&x.value), bits(&y.value), "{}", x.name);
    }
}

fn input() -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    Tensor::from_fn(&[2, 3, 16, 24], |_| rng.gen_range(-1.0f32..1.0))
}

#[test]
fn round_trip_is_bitwise() {
    let net = perturbed();
    let bytes = checkpoint::encode(&net);
    let back = checkpoint::decode(&bytes).unwrap();
    assert_same(&net, &back);
    assert_eq!(checkpoint::encode(&back), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    checkpoint::save(&net, &path).unwrap();
    assert_same(&net, &checkpoint::load(&path).unwrap());
    assert_eq!(
        std::fs::read_dir(dir.path()).unwrap().count(),
        1,
        "temporary file left behind"
    );
}

#[test]
fn eval_forward_is_reproducible() {
    let net = perturbed();
    let x = input();
    let a = net.infer(&x, true).unwrap();
    let b = net.infer(&x, true).unwrap();
    assert_eq!(bits(&a.logits), bits(&b.logits));
    assert_eq!(bits(&a.aux_logits), bits(&b.aux_logits));
    let reloaded = checkpoint::decode(&checkpoint::encode(&net)).unwrap();
    assert_eq!(
        bits(&reloaded.infer(&x, false).unwrap().logits),
        bits(&a.logits)
    );
    // Rebuilding from the same seed reproduces initialization exactly.
    let (p, q) = (
        Lmiinet::<f32>::build(&small()).unwrap(),
        Lmiinet::<f32>::build(&small()).unwrap(),
    );
    assert_same(&p, &q);
}

#[test]
fn truncation_is_rejected() {
    let bytes = checkpoint::encode(&perturbed());
    for cut in [
        0,
        3,
        4,
        11,
        40,
        bytes.len() / 2,
        bytes.len() - 4,
        bytes.len() - 1,
    ] {
        assert!(checkpoint::decode(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(checkpoint::decode(&longer).is_err());
}

#[test]
fn failed_load_leaves_existing_state() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let net = perturbed();
    checkpoint::save(&net, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    let e = checkpoint::load(&path).unwrap_err();
    assert!(matches!(e, Error::Integrity(_)), "{e}");
    // A save into a missing directory fails without touching anything else.
    assert!(checkpoint::save(&net, &dir.path().join("missing/net.ckpt")).is_err());
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_flipped_bit_is_rejected(pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = checkpoint::encode(&Lmiinet::<f32>::build(&small()).unwrap());
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(checkpoint::decode(&bytes).is_err());
    }
}
