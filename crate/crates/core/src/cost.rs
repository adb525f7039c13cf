//! Closed-form parameter and multiply-accumulate accounting.
//!
//! Walks a [`NetworkConfig`] layer by layer without building anything.
//! Convolutions and matrix products count one MAC per multiply-add and two
//! FLOPs per MAC. Elementwise, normalization, pooling and resampling layers
//! perform no MACs and count one FLOP per output element.

use serde::{Deserialize, Serialize};

use crate::network::NetworkConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Conv,
    Linear,
    Matmul,
    Norm,
    Elementwise,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: String,
    pub kind: RowKind,
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    /// `[N, H, W]` of the input the MACs refer to.
    pub input: [usize; 3],
    pub rows: Vec<CostRow>,
    /// Non-trainable normalization statistics.
    pub buffers: u64,
}

/// Published reference figures the default configuration is compared against.
pub const REFERENCE_PARAMS: f64 = 0.72e6;
pub const REFERENCE_FLOPS_AT_512X1024: f64 = 11.74e9;

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    /// 2 × MACs plus elementwise FLOPs.
    pub fn total_flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    pub fn macs_of(&self, kind: RowKind) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.kind == kind)
            .map(|r| r.macs)
            .sum()
    }

    /// Rows whose name starts with `prefix` followed by `.` or end of name.
    pub fn params_under(&self, prefix: &str) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.name == prefix || r.name.starts_with(&format!("{prefix}.")))
            .map(|r| r.params)
            .sum()
    }
}

/// `Cout·(Cin/groups)·kh·kw` plus `Cout` for a bias.
pub fn conv_params(
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    groups: usize,
    bias: bool,
) -> u64 {
    (cout * (cin / groups) * kh * kw + if bias { cout } else { 0 }) as u64
}

/// `N·Cout·(Cin/groups)·kh·kw·H'·W'`.
#[allow(clippy::too_many_arguments)]
pub fn conv_macs(
    n: usize,
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    groups: usize,
    oh: usize,
    ow: usize,
) -> u64 {
    (n * cout * (cin / groups) * kh * kw * oh * ow) as u64
}

struct Walker<'a> {
    cfg: &'a NetworkConfig,
    n: usize,
    rows: Vec<CostRow>,
    buffers: u64,
}

impl Walker<'_> {
    fn row(&mut self, name: String, kind: RowKind, params: u64, macs: u64) {
        self.rows.push(CostRow {
            name,
            kind,
            params,
            macs,
            flops: 2 * macs,
        });
    }

    fn flop_row(&mut self, name: String, kind: RowKind, params: u64, flops: u64) {
        self.rows.push(CostRow {
            name,
            kind,
            params,
            macs: 0,
            flops,
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: (usize, usize),
        groups: usize,
        bias: bool,
        out: (usize, usize),
    ) {
        let p = conv_params(cin, cout, k.0, k.1, groups, bias);
        let m = conv_macs(self.n, cin, cout, k.0, k.1, groups, out.0, out.1);
        self.row(name.to_string(), RowKind::Conv, p, m);
    }

    fn elem(&mut self, name: &str, elements: usize) {
        let f = (self.n * elements) as u64;
        self.flop_row(name.to_string(), RowKind::Elementwise, 0, f);
    }

    fn batch_norm(&mut self, name: &str, c: usize, hw: usize) {
        self.buffers += 2 * c as u64;
        let f = (self.n * c * hw) as u64;
        self.flop_row(name.to_string(), RowKind::Norm, 2 * c as u64, f);
    }

    /// Convolution, optional batch norm, optional ReLU/GELU.
    #[allow(clippy::too_many_arguments)]
    fn conv_norm(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: (usize, usize),
        groups: usize,
        out: (usize, usize),
        act: bool,
    ) {
        let norm = self.cfg.batch_norm;
        self.conv(&format!("{name}.conv"), cin, cout, k, groups, !norm, out);
        if norm {
            self.batch_norm(&format!("{name}.bn"), cout, out.0 * out.1);
        }
        if act {
            self.elem(&format!("{name}.act"), cout * out.0 * out.1);
        }
    }

    /// Squeeze-excitation coefficients from a C×H×W source.
    fn gate(&mut self, name: &str, c: usize, r: usize, hw: usize) {
        let hidden = c / r;
        self.elem(&format!("{name}.pool"), c * hw);
        self.conv(
            &format!("{name}.reduce"),
            c,
            hidden,
            (1, 1),
            1,
            true,
            (1, 1),
        );
        self.elem(&format!("{name}.relu"), hidden);
        self.conv(
            &format!("{name}.expand"),
            hidden,
            c,
            (1, 1),
            1,
            true,
            (1, 1),
        );
        self.elem(&format!("{name}.sigmoid"), c);
    }

    fn cru(&mut self, name: &str, c: usize, h: usize, w: usize) {
        let rich = (self.cfg.cru_alpha * c as f64).round() as usize;
        let cheap = c - rich;
        let s = self.cfg.cru_squeeze;
        let (rs, cs) = (rich / s, cheap / s);
        let hw = h * w;
        self.conv(
            &format!("{name}.squeeze_rich"),
            rich,
            rs,
            (1, 1),
            1,
            false,
            (h, w),
        );
        self.conv(
            &format!("{name}.squeeze_cheap"),
            cheap,
            cs,
            (1, 1),
            1,
            false,
            (h, w),
        );
        self.conv(&format!("{name}.gwc"), rs, c, (3, 3), 2, true, (h, w));
        self.conv(&format!("{name}.pwc_rich"), rs, c, (1, 1), 1, false, (h, w));
        self.elem(&format!("{name}.rich_add"), c * hw);
        self.conv(
            &format!("{name}.pwc_cheap"),
            cs,
            c - cs,
            (1, 1),
            1,
            false,
            (h, w),
        );
        self.elem(&format!("{name}.pool"), 2 * c * hw);
        self.elem(&format!("{name}.softmax"), 2 * c);
        self.elem(&format!("{name}.fuse"), 3 * c * hw);
    }

    fn lfib(&mut self, name: &str, stage: usize, c: usize, h: usize, w: usize) {
        let o = self.cfg.lfib_options(stage, c);
        let half = c / 2;
        let hw = h * w;
        let asym = if o.depthwise_asym { half } else { 1 };
        self.conv_norm(&format!("{name}.entry"), c, c, (1, 1), 1, (h, w), true);
        if o.cc {
            for side in ["cc_left", "cc_right"] {
                let g = format!("{name}.{side}");
                self.gate(&g, half, o.cc_reduction, hw);
                self.elem(&format!("{g}.apply"), 2 * half * hw);
            }
        }
        self.conv_norm(
            &format!("{name}.left_3x1"),
            half,
            half,
            (3, 1),
            asym,
            (h, w),
            true,
        );
        self.conv_norm(
            &format!("{name}.left_1x3"),
            half,
            half,
            (1, 3),
            asym,
            (h, w),
            true,
        );
        self.conv_norm(
            &format!("{name}.right_dw"),
            half,
            half,
            (3, 3),
            half,
            (h, w),
            false,
        );
        self.conv_norm(
            &format!("{name}.right_pw"),
            half,
            half,
            (1, 1),
            1,
            (h, w),
            true,
        );
        self.cru(&format!("{name}.cru"), c, h, w);
        self.elem(&format!("{name}.residual"), 2 * c * hw);
        self.conv_norm(&format!("{name}.exit"), c, c, (3, 3), c, (h, w), false);
    }

    fn downsample(&mut self, name: &str, cin: usize, cout: usize, h: usize, w: usize) {
        let (oh, ow) = (h / 2, w / 2);
        let pool = cout > cin;
        let conv_out = if pool { cout - cin } else { cout };
        let norm = self.cfg.batch_norm;
        self.conv(
            &format!("{name}.conv"),
            cin,
            conv_out,
            (3, 3),
            1,
            !norm,
            (oh, ow),
        );
        if pool {
            self.elem(&format!("{name}.pool"), cin * oh * ow);
        }
        if norm {
            self.batch_norm(&format!("{name}.bn"), cout, oh * ow);
        }
        self.elem(&format!("{name}.act"), cout * oh * ow);
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize, tokens: usize) {
        let p = (din * dout + dout) as u64;
        let m = (self.n * tokens * din * dout) as u64;
        self.row(name.to_string(), RowKind::Linear, p, m);
        self.elem(&format!("{name}.bias"), tokens * dout);
    }

    fn layer_norm(&mut self, name: &str, d: usize, tokens: usize) {
        self.flop_row(
            name.to_string(),
            RowKind::Norm,
            2 * d as u64,
            (self.n * tokens * d) as u64,
        );
    }

    fn transformer(&mut self, name: &str, d: usize, h: usize, w: usize) {
        let t = &self.cfg.transformer;
        let l = h * w;
        let dh = d / t.heads;
        self.layer_norm(&format!("{name}.norm1"), d, l);
        for p in ["q", "k", "v"] {
            self.linear(&format!("{name}.flam.{p}"), d, d, l);
        }
        self.elem(&format!("{name}.flam.focus"), 2 * l * d);
        let n = self.n;
        let kv = (n * t.heads * dh * l * dh) as u64;
        let qkv = (n * t.heads * l * dh * dh) as u64;
        self.row(format!("{name}.flam.kv"), RowKind::Matmul, 0, kv);
        self.row(format!("{name}.flam.qkv"), RowKind::Matmul, 0, qkv);
        if t.normalized_attention {
            self.elem(&format!("{name}.flam.ksum"), l * d);
            self.row(
                format!("{name}.flam.z"),
                RowKind::Matmul,
                0,
                (n * t.heads * l * dh) as u64,
            );
            self.elem(&format!("{name}.flam.div"), l * d);
        }
        self.conv(&format!("{name}.flam.dwc"), d, d, (3, 3), d, true, (h, w));
        self.elem(&format!("{name}.flam.add"), l * d);
        if t.cc {
            self.gate(&format!("{name}.cc"), d, self.cfg.cc_reduction, l);
            let apply = match t.cc_mode {
                crate::nn::CcMode::Multiplicative => 2 * l * d,
                crate::nn::CcMode::Additive => l * d,
            };
            self.elem(&format!("{name}.cc.apply"), apply);
        }
        let mid = d / t.cab_compress;
        self.conv(
            &format!("{name}.cab.conv1"),
            d,
            mid,
            (3, 3),
            1,
            true,
            (h, w),
        );
        self.elem(&format!("{name}.cab.gelu"), mid * l);
        self.conv(
            &format!("{name}.cab.conv2"),
            mid,
            d,
            (3, 3),
            1,
            true,
            (h, w),
        );
        self.gate(&format!("{name}.cab.attention"), d, t.cab_reduction, l);
        self.elem(&format!("{name}.cab.apply"), l * d);
        self.elem(&format!("{name}.residual1"), 2 * l * d);
        self.layer_norm(&format!("{name}.norm2"), d, l);
        let hidden = d * t.mlp_ratio;
        self.linear(&format!("{name}.mlp.fc1"), d, hidden, l);
        self.elem(&format!("{name}.mlp.gelu"), hidden * l);
        self.linear(&format!("{name}.mlp.fc2"), hidden, d, l);
        self.elem(&format!("{name}.residual2"), l * d);
    }

    fn fe(&mut self, name: &str, c: usize, h: usize, w: usize) {
        let hw = h * w;
        self.gate(&format!("{name}.channel"), c, self.cfg.fe_reduction, hw);
        self.elem(&format!("{name}.channel_pool"), 2 * hw);
        self.conv(&format!("{name}.spatial"), 2, 1, (7, 7), 1, true, (h, w));
        self.elem(&format!("{name}.sigmoid"), hw);
        self.elem(&format!("{name}.modulate"), 3 * c * hw);
        self.conv_norm(&format!("{name}.fuse"), c, c, (1, 1), 1, (h, w), true);
    }

    fn stage(&mut self, index: usize, c: usize, h: usize, w: usize) {
        for i in 0..self.cfg.lfib_counts[index] {
            self.lfib(&format!("stage{}.{i}", index + 1), index, c, h, w);
        }
    }
}

/// Per-layer parameters and MACs of `cfg` for an `n`×3×`h`×`w` input.
///
/// The configuration must be valid and `h`, `w` divisible by 8.
pub fn analyze(cfg: &NetworkConfig, n: usize, h: usize, w: usize) -> CostReport {
    let mut wk = Walker {
        cfg,
        n,
        rows: Vec::new(),
        buffers: 0,
    };
    let [w1, w2, w3] = [cfg.widths[0], cfg.widths[1], cfg.widths[2]];
    let (h2, w2s) = (h / 2, w / 2);
    let (h4, w4) = (h / 4, w / 4);
    let (h8, w8) = (h / 8, w / 8);

    wk.downsample("stem", 3, w1, h, w);
    wk.stage(0, w1, h2, w2s);
    wk.downsample("down2", w1, w2, h2, w2s);
    wk.stage(1, w2, h4, w4);
    wk.downsample("down3", w2, w3, h4, w4);
    wk.stage(2, w3, h8, w8);
    for i in 0..cfg.transformer.blocks {
        wk.transformer(&format!("transformer.{i}"), w3, h8, w8);
    }
    wk.fe("fe4", w3, h8, w8);
    wk.stage(3, w3, h8, w8);
    wk.elem("up5.resize", w3 * h4 * w4);
    wk.conv_norm("up5", w3, w2, (1, 1), 1, (h4, w4), true);
    wk.fe("fe5", w2, h4, w4);
    wk.stage(4, w2, h4, w4);
    wk.elem("up6.resize", w2 * h2 * w2s);
    wk.conv_norm("up6", w2, w1, (1, 1), 1, (h2, w2s), true);
    wk.stage(5, w1, h2, w2s);

    let base = *cfg.seghead_taps.iter().min().expect("validated");
    let (bh, bw) = (h / base, w / base);
    let mut total = 0;
    for &s in &cfg.seghead_taps {
        let c = cfg.tap_width(s);
        total += c;
        if s != base {
            wk.elem(&format!("head.resize_{s}"), c * bh * bw);
        }
    }
    wk.conv_norm(
        "head.proj",
        total,
        cfg.seghead_width,
        (1, 1),
        1,
        (bh, bw),
        true,
    );
    wk.conv(
        "head.classifier",
        cfg.seghead_width,
        cfg.classes,
        (1, 1),
        1,
        true,
        (bh, bw),
    );
    if base > 1 {
        wk.elem("head.upsample", cfg.classes * h * w);
    }
    let a = cfg.aux_tap;
    wk.conv(
        "aux_head",
        cfg.tap_width(a),
        cfg.classes,
        (1, 1),
        1,
        true,
        (h / a, w / a),
    );
    wk.elem("aux_head.upsample", cfg.classes * h * w);

    CostReport {
        input: [n, h, w],
        rows: wk.rows,
        buffers: wk.buffers,
    }
}

/// Parameter rows only (MACs evaluated at a nominal 8×8 input).
pub fn count_params(cfg: &NetworkConfig) -> CostReport {
    analyze(cfg, 1, 8, 8)
}

pub fn count_flops(cfg: &NetworkConfig, n: usize, h: usize, w: usize) -> CostReport {
    analyze(cfg, n, h, w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
}

fn group(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

pub fn render(report: &CostReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => render_json(report),
        ReportFormat::Text => render_text(report),
    }
}

fn render_json(report: &CostReport) -> String {
    let rows: Vec<serde_json::Value> = report
        .rows
        .iter()
        .map(|r| serde_json::json!({"name": r.name, "kind": r.kind, "params": r.params, "macs": r.macs, "flops": r.flops}))
        .collect();
    let v = serde_json::json!({
        "input": report.input,
        "rows": rows,
        "total_params": report.total_params(),
        "total_buffers": report.buffers,
        "total_macs": report.total_macs(),
        "total_2x_macs": 2 * report.total_macs(),
        "total_flops": report.total_flops(),
    });
    serde_json::to_string_pretty(&v).expect("json value serializes")
}

fn render_text(report: &CostReport) -> String {
    let [n, h, w] = report.input;
    let name_w = report
        .rows
        .iter()
        .map(|r| r.name.len())
        .max()
        .unwrap_or(0)
        .max("layer".len())
        .max("total".len());
    let line = |name: &str, p: u64, m: u64, f: u64| {
        format!(
            "{name:<name_w$}  {:>12}  {:>16}  {:>16}\n",
            group(p),
            group(m),
            group(f)
        )
    };
    let mut out = String::new();
    out.push_str(&format!(
        "input {n}x3x{h}x{w}; FLOPs = 2 x MACs for conv/linear/matmul, 1 per element for elementwise and normalization\n"
    ));
    out.push_str(&format!(
        "{:<name_w$}  {:>12}  {:>16}  {:>16}\n",
        "layer", "params", "MACs", "FLOPs"
    ));
    for r in &report.rows {
        out.push_str(&line(&r.name, r.params, r.macs, r.flops));
    }
    out.push_str(&line(
        "total",
        report.total_params(),
        report.total_macs(),
        report.total_flops(),
    ));
    out.push_str(&format!(
        "params {:.4}M (reference 0.72M), non-trainable {}\nMACs {:.3}G | 2xMACs {:.3}G | FLOPs incl. elementwise {:.3}G (reference 11.74G at 512x1024)\n",
        report.total_params() as f64 / 1e6,
        group(report.buffers),
        report.total_macs() as f64 / 1e9,
        2.0 * report.total_macs() as f64 / 1e9,
        report.total_flops() as f64 / 1e9,
    ));
    out
}
