use lmii_core::cost::{self, CostReport, ReportFormat};
use lmii_core::engine::conv::{conv2d_forward, conv2d_reference, conv2d_reference_counted};
use lmii_core::engine::ops::{channel_shuffle, matmul, softmax};
use lmii_core::engine::{Conv2dOptions, Graph, Tensor};
use lmii_core::network::NetworkConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn matmul_is_associative() {
    let (a, b, c) = (random(&[8, 8], 1), random(&[8, 8], 2), random(&[8, 8], 3));
    let l = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
    let r = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
    for (x, y) in l.data().iter().zip(r.data()) {
        assert!((x - y).abs() <= 1e-6);
    }
}

#[test]
fn softmax_is_shift_invariant() {
    let x = random(&[3, 5], 4);
    let shifted = Tensor::from_fn(&[3, 5], |i| x.data()[i] + 123.0);
    let (a, b) = (softmax(&x, 1).unwrap(), softmax(&shifted, 1).unwrap());
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - q).abs() <= 1e-7);
    }
    let u = softmax(&Tensor::<f64>::full(&[1, 4], 2.0), 1).unwrap();
    assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn shuffle_matches_reshape_transpose_enumeration() {
    for (c, g) in [(4usize, 2usize), (6, 3), (12, 4), (6, 1)] {
        let x = Tensor::<f64>::from_fn(&[1, c, 1, 1], |i| i as f64);
        let y = channel_shuffle(&x, g).unwrap();
        // View channels as g×(c/g), transpose, flatten.
        let per = c / g;
        let want: Vec<f64> = (0..per)
            .flat_map(|j| (0..g).map(move |i| (i * per + j) as f64))
            .collect();
        assert_eq!(y.data(), want.as_slice(), "C={c}, g={g}");
    }
}

#[test]
fn gradient_identities() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::scalar(3.0));
    let sq = g.mul(x, x).unwrap();
    let grads = g.backward(sq).unwrap();
    assert_eq!(grads.get(x).data()[0], 6.0);
}

#[test]
fn cost_examples() {
    assert_eq!(cost::conv_params(16, 32, 3, 3, 1, true), 4640);
    assert_eq!(cost::conv_params(32, 32, 3, 3, 32, false), 288);
    assert_eq!(cost::conv_macs(1, 4, 4, 1, 1, 1, 2, 2), 64);
    let x = Tensor::<f64>::zeros(&[1, 8, 4, 4]);
    let w = Tensor::<f64>::zeros(&[8, 8, 3, 3]);
    let (_, counted) =
        conv2d_reference_counted(&x, &w, None, Conv2dOptions::default().padding(1, 1)).unwrap();
    assert_eq!(counted, 9216);
    assert_eq!(cost::conv_macs(1, 8, 8, 3, 3, 1, 4, 4), counted);

    let empty = CostReport {
        input: [1, 8, 8],
        rows: Vec::new(),
        buffers: 0,
    };
    assert_eq!(
        empty.total_params() + empty.total_macs() + empty.total_flops(),
        0
    );
    assert!(cost::render(&empty, ReportFormat::Text).contains("layer"));
}

#[test]
fn rendered_reports_agree_with_totals() {
    let r = cost::count_flops(&NetworkConfig::default(), 1, 512, 1024);
    let json: serde_json::Value =
        serde_json::from_str(&cost::render(&r, ReportFormat::Json)).unwrap();
    assert_eq!(json["total_params"].as_u64(), Some(r.total_params()));
    assert_eq!(json["total_macs"].as_u64(), Some(r.total_macs()));
    assert_eq!(json["total_2x_macs"].as_u64(), Some(2 * r.total_macs()));
    let rows = json["rows"].as_array().unwrap();
    let sum = |key: &str| {
        rows.iter()
            .map(|row| row[key].as_u64().unwrap())
            .sum::<u64>()
    };
    assert_eq!(sum("params"), r.total_params());
    assert_eq!(sum("macs"), r.total_macs());
    assert_eq!(sum("flops"), r.total_flops());

    let text = cost::render(&r, ReportFormat::Text);
    let parse = |s: &str| s.replace(',', "").parse::<u64>().unwrap();
    let (mut p, mut m) = (0, 0);
    let mut total = None;
    for line in text.lines().skip(2) {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 4 {
            continue;
        }
        if cols[0] == "total" {
            total = Some((parse(cols[1]), parse(cols[2])));
        } else {
            p += parse(cols[1]);
            m += parse(cols[2]);
        }
    }
    assert_eq!(total, Some((p, m)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fast_conv_matches_reference(
        cin_g in 1usize..4, cout_g in 1usize..4, groups in 1usize..4,
        kh in 1usize..4, kw in 1usize..4, sh in 1usize..3, sw in 1usize..3,
        ph in 0usize..3, pw in 0usize..3, dil in 1usize..4,
        h in 1usize..9, w in 1usize..9, seed in any::<u64>(),
    ) {
        let (cin, cout) = (cin_g * groups, cout_g * groups);
        let opts = Conv2dOptions { stride: (sh, sw), padding: (ph, pw), ..Conv2dOptions::default() }.dilation(dil).groups(groups);
        let x = random(&[2, cin, h, w], seed);
        let k = random(&[cout, cin_g, kh, kw], seed ^ 1);
        let b = random(&[cout], seed ^ 2);
        match (conv2d_reference(&x, &k, Some(&b), opts), conv2d_forward(&x, &k, Some(&b), opts)) {
            (Ok(r), Ok(f)) => {
                prop_assert_eq!(r.shape(), f.shape());
                for (p, q) in r.data().iter().zip(f.data()) {
                    prop_assert!((p - q).abs() <= 1e-12);
                }
            }
            (Err(_), Err(_)) => {}
            (r, f) => prop_assert!(false, "disagree: {:?} vs {:?}", r.map(|t| t.shape().to_vec()), f.map(|t| t.shape().to_vec())),
        }
    }
}
