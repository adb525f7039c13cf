use lmii_core::cost::{self, RowKind, REFERENCE_FLOPS_AT_512X1024, REFERENCE_PARAMS};
use lmii_core::engine::conv::conv2d_reference_counted;
use lmii_core::engine::{Conv2dOptions, Tensor};
use lmii_core::network::{Lmiinet, NetworkConfig};
use lmii_core::nn::{Ctx, Mode};
use proptest::prelude::*;

fn arb_config() -> impl Strategy<Value = NetworkConfig> {
    (
        prop::collection::vec(1usize..=4, 3),
        prop::collection::vec(1usize..=3, 6),
        (0usize..=2, prop::sample::select(vec![1usize, 2, 4])),
        (any::<bool>(), any::<bool>(), any::<bool>(), any::<bool>()),
        prop::sample::subsequence(vec![2usize, 4, 8], 1..=3),
        (
            prop::sample::select(vec![2usize, 4, 8]),
            2usize..=7,
            1usize..=24,
        ),
    )
        .prop_map(
            |(
                w,
                counts,
                (blocks, heads),
                (cc_lfib, cc_tr, asym, bn),
                taps,
                (aux, classes, head_w),
            )| {
                let mut c = NetworkConfig {
                    classes,
                    widths: w.iter().map(|k| 16 * k).collect(),
                    lfib_counts: counts,
                    cc_in_lfib: cc_lfib,
                    depthwise_asym: asym,
                    batch_norm: bn,
                    seghead_taps: taps,
                    seghead_width: head_w,
                    aux_tap: aux,
                    ..NetworkConfig::default()
                };
                c.transformer.blocks = blocks;
                c.transformer.heads = heads;
                c.transformer.cc = cc_tr;
                c
            },
        )
        .prop_filter("valid", |c| c.violations().is_empty())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn count_params_matches_allocation(cfg in arb_config()) {
        let net = Lmiinet::<f32>::build(&cfg).unwrap();
        let report = cost::count_params(&cfg);
        let allocated: usize = net.params.params().iter().map(|p| p.value.numel()).sum();
        let buffers: usize = net.params.buffers().iter().map(|b| b.value.numel()).sum();
        prop_assert_eq!(report.total_params(), allocated as u64);
        prop_assert_eq!(report.buffers, buffers as u64);
    }

    #[test]
    fn conv_macs_match_naive_counter(
        cin_g in 1usize..4, cout_g in 1usize..4, groups in 1usize..4,
        kh in 1usize..4, kw in 1usize..4, stride in 1usize..3, pad in 0usize..3, dil in 1usize..3,
        h in 3usize..9, w in 3usize..9,
    ) {
        let (cin, cout) = (cin_g * groups, cout_g * groups);
        let opts = Conv2dOptions::default().stride(stride).padding(pad, pad).dilation(dil).groups(groups);
        let x = Tensor::<f64>::full(&[1, cin, h, w], 1.0);
        let wt = Tensor::<f64>::full(&[cout, cin_g, kh, kw], 1.0);
        if let Ok((y, counted)) = conv2d_reference_counted(&x, &wt, None, opts) {
            let (oh, ow) = (y.shape()[2], y.shape()[3]);
            prop_assert_eq!(cost::conv_macs(1, cin, cout, kh, kw, groups, oh, ow), counted);
        }
    }
}

fn small(cfg: NetworkConfig) -> NetworkConfig {
    NetworkConfig {
        widths: vec![16, 32, 32],
        lfib_counts: vec![1; 6],
        ..cfg
    }
}

#[test]
fn analyzer_conv_rows_equal_executed_macs() {
    let mut ablated = small(NetworkConfig::default().with_classes(4));
    ablated.seghead_taps = vec![4, 8];
    ablated.aux_tap = 4;
    ablated.depthwise_asym = false;
    for cfg in [small(NetworkConfig::default()), ablated] {
        let (n, h, w) = (2, 24, 40);
        let net = Lmiinet::<f64>::build(&cfg).unwrap();
        let mut cx = Ctx::new(&net.params, Mode::Eval);
        let x = cx.input(Tensor::full(&[n, 3, h, w], 0.25));
        net.forward(&mut cx, x).unwrap();
        let report = cost::count_flops(&cfg, n, h, w);
        assert_eq!(report.macs_of(RowKind::Conv), cx.g.conv_macs());
    }
}

#[test]
fn default_config_against_reference_figures() {
    let cfg = NetworkConfig::default();
    let p = cost::count_params(&cfg).total_params() as f64;
    assert!((p / REFERENCE_PARAMS - 1.0).abs() <= 0.25, "params {p}");
    let r = cost::count_flops(&cfg, 1, 512, 1024);
    let macs = r.total_macs() as f64;
    // The reference figure is met by at least one counting convention.
    let near = |v: f64| (v / REFERENCE_FLOPS_AT_512X1024 - 1.0).abs() <= 0.30;
    assert!(near(macs) || near(2.0 * macs), "MACs {macs}");
    let text = cost::render(&r, cost::ReportFormat::Text);
    assert!(text.contains("2xMACs") && text.contains("MACs"));
}

#[test]
fn spatial_rows_scale_with_resolution() {
    let cfg = NetworkConfig::default();
    let big = cost::count_flops(&cfg, 1, 512, 1024);
    let tiny = cost::count_flops(&cfg, 1, 64, 64);
    let ratio = (64 * 64) as u64;
    let full = (512 * 1024) as u64;
    for (a, b) in big.rows.iter().zip(&tiny.rows) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.params, b.params);
        // Convs after a global pool (gates, channel attention) are resolution-free.
        if a.kind == RowKind::Conv && a.macs != b.macs {
            assert_eq!(a.macs * ratio, b.macs * full, "{}", a.name);
        }
    }
}

#[test]
fn cc_gate_adds_few_parameters() {
    let with = NetworkConfig::default();
    let without = NetworkConfig {
        cc_in_lfib: false,
        transformer: lmii_core::network::TransformerConfig {
            cc: false,
            ..Default::default()
        },
        ..NetworkConfig::default()
    };
    let (a, b) = (
        cost::count_params(&with).total_params(),
        cost::count_params(&without).total_params(),
    );
    assert!(a > b);
    assert!(((a - b) as f64) < 0.05 * b as f64, "{b} -> {a}");
}
