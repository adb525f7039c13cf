//! Registry of finite-difference gradient checks for every engine op and
//! network block, run in f64.
//!
//! Each case reduces its output to a scalar with a fixed random weighting so
//! every output entry contributes a distinct gradient. Inputs to kinked ops
//! (ReLU, max) are drawn away from their kinks.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{
    grad_check, Conv2dOptions, GradCheckConfig, GradCheckReport, Graph, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::network::{Lmiinet, NetworkConfig};
use crate::nn::{
    Cab, ChannelGate, Cru, Ctx, Downsample, Fe, Flam, Lfib, LfibOptions, Mode, ParamStore, SegHead,
    TransformerBlock, TransformerOptions,
};

pub const LINEAR_TOLERANCE: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaseKind {
    Op,
    Block,
}

/// One named check.
pub struct CheckCase {
    pub name: &'static str,
    pub kind: CaseKind,
    /// Linear in every checked input, so central differences are exact up to rounding.
    pub linear: bool,
    run: fn(&GradCheckConfig) -> Result<GradCheckReport>,
}

impl CheckCase {
    pub fn tolerance(&self) -> f64 {
        if self.linear {
            LINEAR_TOLERANCE
        } else {
            TOLERANCE
        }
    }

    pub fn run(&self, fault: Option<&str>) -> Result<GradCheckReport> {
        let cfg = GradCheckConfig::default()
            .tolerance(self.tolerance())
            .fault(fault.map(str::to_string));
        (self.run)(&cfg)
    }
}

pub struct CaseResult {
    pub name: &'static str,
    pub kind: CaseKind,
    pub report: GradCheckReport,
    pub seconds: f64,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

/// Uniform in ±[0.1, 1.1]: no entry near zero.
fn off_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| {
        let m = 0.1 + r.gen_range(0.0..1.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values in shuffled order, spaced 0.05 apart.
fn distinct(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng(seed);
    for i in (1..n).rev() {
        order.swap(i, r.gen_range(0..=i));
    }
    Tensor::from_fn(shape, |i| order[i] as f64 * 0.05 - n as f64 * 0.025)
}

/// `Σ r ⊙ y` with `r` fixed by the output shape.
fn weighted_sum(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let seed = shape
        .iter()
        .fold(17u64, |a, &d| a.wrapping_mul(31).wrapping_add(d as u64));
    let r = g.constant(uniform(&shape, seed));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn named(items: Vec<(&str, Tensor<f64>)>) -> Vec<(String, Tensor<f64>)> {
    items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

fn op_check(
    inputs: Vec<(&str, Tensor<f64>)>,
    cfg: &GradCheckConfig,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    grad_check(
        &named(inputs),
        |g, v| {
            let y = f(g, v)?;
            weighted_sum(g, y)
        },
        cfg,
    )
}

/// Checks `forward` against the extra inputs and every trainable parameter of `store`.
fn block_check(
    store: &ParamStore<f64>,
    extra: Vec<(&str, Tensor<f64>)>,
    cfg: &GradCheckConfig,
    forward: impl Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let n_extra = extra.len();
    let mut inputs = named(extra);
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).trainable).collect();
    for &id in &ids {
        let p = store.get(id);
        inputs.push((p.name.clone(), p.value.clone()));
    }
    grad_check(
        &inputs,
        |g, v| {
            let graph = std::mem::take(g);
            let mut cx = Ctx::with_graph(store, Mode::Train, graph);
            for (k, &id) in ids.iter().enumerate() {
                cx.bind(id, v[n_extra + k]);
            }
            let y = forward(&mut cx, &v[..n_extra]);
            let (graph, _, _) = cx.finish();
            *g = graph;
            weighted_sum(g, y?)
        },
        cfg,
    )
}

fn capped(cfg: &GradCheckConfig, n: usize) -> GradCheckConfig {
    let mut c = cfg.clone();
    c.max_entries = Some(n);
    c
}

// -- ops ---------------------------------------------------------------------

fn conv2d(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let opts = Conv2dOptions::default().padding(2, 2).dilation(2).groups(2);
    op_check(
        vec![
            ("x", uniform(&[2, 4, 5, 5], 1)),
            ("w", uniform(&[6, 2, 3, 3], 2)),
            ("b", uniform(&[6], 3)),
        ],
        cfg,
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), opts),
    )
}

fn conv2d_strided(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let opts = Conv2dOptions::default().stride(2).padding(1, 0);
    op_check(
        vec![
            ("x", uniform(&[1, 3, 6, 7], 4)),
            ("w", uniform(&[2, 3, 3, 1], 5)),
        ],
        cfg,
        |g, v| g.conv2d(v[0], v[1], None, opts),
    )
}

fn channel_shuffle(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    op_check(vec![("x", uniform(&[2, 6, 3, 3], 6))], cfg, |g, v| {
        g.channel_shuffle(v[0], 3)
    })
}

fn split(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    op_check(vec![("x", uniform(&[2, 6, 2, 3], 7))], cfg, |g, v| {
        let (a, b) = g.split_halves(v[0])?;
        let b = g.scale(b, 2.0);
        g.sub(a, b)
    })
}

fn concat(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    op_check(
        vec![
            ("a", uniform(&[1, 2, 3, 3], 8)),
            ("b", uniform(&[1, 3, 3, 3], 9)),
        ],
        cfg,
        |g, v| g.concat(&[v[0], v[1]], 1),
    )
}

fn add(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    op_check(
        vec![
            ("a", uniform(&[2, 3, 2, 2], 10)),
            ("b", uniform(&[1, 3, 1, 1], 11)),
        ],
        cfg,
        |g, v| g.add(v[0], v[1]),
    )
}

fn sub(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    op_check(
        vec![
            ("a", uniform(&[2, 3, 2, 2], 12)),
            ("b", uniform(&[2, 3, 1, 1], 13)),
        ],
        cfg,
        |g, v| g.sub(v[0], v[1]),
    )
}

fn mul(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    op_check(
        vec![
            ("a", uniform(&[2, 3, 2, 2], 14)),
            ("b", uniform(&[2, 3, 1, 1], 15)),
        ],
        cfg,
        |g, v| g.mul(v[0], v[1]),
    )
}

fn scale(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    op_check(vec![("x", uniform(&[3, 4], 16))], cfg, |g, v| {
        Ok(g.scale(v[0], -1.7))
    })
}

fn div_guarded(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(18);
    let den = Tensor::from_fn(&[2, 4, 1], |_| r.gen_range(0.5..2.0));
    op_check(
        vec![("a", uniform(&[2, 4, 3], 17)), ("b", den)],
        cfg,
        |g, v| g.div_guarded(v[0], v[1]),
    )
}

fn relu(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    op_check(vec![("x", off_zero(&[2, 3, 3, 3], 19))], cfg, |g, v| {
        Ok(g.relu(v[0]))
    })
}

fn gelu(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    op_check(
        vec![("x", uniform(&[2, 3, 3, 3], 20).map(|x| 3.0 * x))],
        cfg,
        |g, v| Ok(g.gelu(v[0])),
    )
}

fn sigmoid(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    op_check(
        vec![("x", uniform(&[2, 3, 3, 3], 21).map(|x| 3.0 * x))],
        cfg,
        |g, v| Ok(g.sigmoid(v[0])),
    )
}

fn batch_norm(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    op_check(
        vec![
            ("x", uniform(&[2, 3, 3, 3], 22)),
            ("gamma", uniform(&[3], 23).map(|x| 1.0 + 0.5 * x)),
            ("beta", uniform(&[3], 24)),
        ],
        cfg,
        |g, v| Ok(g.batch_norm(v[0], v[1], v[2], 1e-5)?.0),
    )
}

fn batch_norm_eval(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mean = uniform(&[3], 25);
    let var = uniform(&[3], 26).map(|x| 1.0 + 0.5 * x);
    op_check(
        vec![
            ("x", uniform(&[2, 3, 2, 2], 27)),
            ("gamma", uniform(&[3], 28)),
            ("beta", uniform(&[3], 29)),
        ],
        cfg,
        move |g, v| g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5),
    )
}

fn layer_norm(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    op_check(
        vec![
            ("x", uniform(&[2, 5, 6], 30)),
            ("gamma", uniform(&[6], 31).map(|x| 1.0 + 0.5 * x)),
            ("beta", uniform(&[6], 32)),
        ],
        cfg,
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
    )
}

fn matmul(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    op_check(
        vec![
            ("a", uniform(&[2, 3, 4], 33)),
            ("b", uniform(&[2, 4, 5], 34)),
        ],
        cfg,
        |g, v| g.matmul(v[0], v[1]),
    )
}

fn matmul_broadcast(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    op_check(
        vec![("a", uniform(&[2, 3, 4], 35)), ("b", uniform(&[4, 5], 36))],
        cfg,
        |g, v| g.matmul(v[0], v[1]),
    )
}

fn transpose(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    op_check(vec![("x", uniform(&[2, 3, 4], 37))], cfg, |g, v| {
        g.transpose(v[0])
    })
}

fn tokens(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    op_check(vec![("x", uniform(&[2, 3, 2, 4], 38))], cfg, |g, v| {
        let t = g.map_to_tokens(v[0])?;
        let t = g.scale(t, 0.5);
        let m = g.tokens_to_map(t, 4, 2)?;
        g.reshape(m, &[2, 24])
    })
}

fn global_avg_pool(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    op_check(vec![("x", uniform(&[2, 3, 4, 5], 39))], cfg, |g, v| {
        g.global_avg_pool(v[0])
    })
}

fn avg_pool(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    op_check(vec![("x", uniform(&[1, 2, 6, 6], 40))], cfg, |g, v| {
        g.avg_pool(v[0], 3, 2)
    })
}

fn max_pool(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    op_check(vec![("x", distinct(&[1, 2, 6, 6], 41))], cfg, |g, v| {
        g.max_pool(v[0], 2, 2)
    })
}

fn upsample_bilinear(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    op_check(vec![("x", uniform(&[1, 2, 3, 4], 42))], cfg, |g, v| {
        g.upsample_bilinear(v[0], 2)
    })
}

fn resize_bilinear(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    op_check(vec![("x", uniform(&[1, 2, 3, 4], 43))], cfg, |g, v| {
        g.resize_bilinear(v[0], 7, 5)
    })
}

fn upsample_nearest(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    op_check(vec![("x", uniform(&[1, 2, 3, 3], 44))], cfg, |g, v| {
        g.upsample_nearest(v[0], 2)
    })
}

fn sum_axis(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    op_check(vec![("x", uniform(&[2, 3, 4], 45))], cfg, |g, v| {
        let a = g.sum_axis(v[0], 1)?;
        let b = g.mean_axis(a, 2)?;
        g.reshape(b, &[2])
    })
}

fn max_axis(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    op_check(vec![("x", distinct(&[2, 3, 4], 46))], cfg, |g, v| {
        g.max_axis(v[0], 2)
    })
}

fn softmax(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    op_check(
        vec![("x", uniform(&[2, 3, 4], 47).map(|x| 2.0 * x))],
        cfg,
        |g, v| g.softmax(v[0], 1),
    )
}

fn focused_map(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    op_check(vec![("x", off_zero(&[2, 5, 6], 48))], cfg, |g, v| {
        g.focused_map(v[0], 3.0)
    })
}

fn cross_entropy(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let labels = [0, 2, 1, 3, 3, 0, 1, 255];
    grad_check(
        &named(vec![(
            "logits",
            uniform(&[2, 4, 2, 2], 49).map(|x| 2.0 * x),
        )]),
        |g, v| g.cross_entropy(v[0], &labels, Some(255)),
        cfg,
    )
}

// -- blocks ------------------------------------------------------------------

fn lfib(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut ps = ParamStore::new(60);
    let mut o = LfibOptions::new(8);
    o.dilation = 2;
    o.cc_reduction = 2;
    let block = Lfib::new(&mut ps, "lfib", &o)?;
    block_check(
        &ps,
        vec![("x", uniform(&[2, 8, 6, 6], 61))],
        &capped(cfg, 12),
        |cx, v| block.forward(cx, v[0]),
    )
}

fn cc(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut ps = ParamStore::new(62);
    let gate = ChannelGate::new(&mut ps, "cc", 6, 2)?;
    block_check(
        &ps,
        vec![
            ("target", uniform(&[2, 6, 3, 3], 63)),
            ("source", uniform(&[2, 6, 3, 3], 64)),
        ],
        cfg,
        |cx, v| {
            let w = gate.weigh(cx, v[1])?;
            cx.g.add(v[0], w)
        },
    )
}

fn cru(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut ps = ParamStore::new(65);
    let block = Cru::new(&mut ps, "cru", 8, 0.5, 2)?;
    block_check(
        &ps,
        vec![("x", uniform(&[2, 8, 4, 4], 66))],
        &capped(cfg, 16),
        |cx, v| block.forward(cx, v[0]),
    )
}

fn flam(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut ps = ParamStore::new(67);
    let block = Flam::new(&mut ps, "flam", 8, 2, 3.0, true)?;
    block_check(
        &ps,
        vec![("tokens", uniform(&[2, 12, 8], 68))],
        &capped(cfg, 24),
        |cx, v| block.forward(cx, v[0], 3, 4),
    )
}

fn transformer(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut ps = ParamStore::new(69);
    let mut o = TransformerOptions::new(8);
    o.heads = 2;
    o.mlp_ratio = 2;
    o.cab_compress = 2;
    o.cab_reduction = 2;
    o.cc_reduction = 2;
    let block = TransformerBlock::new(&mut ps, "transformer", &o)?;
    block_check(
        &ps,
        vec![("x", uniform(&[2, 8, 3, 4], 70))],
        &capped(cfg, 12),
        |cx, v| block.forward(cx, v[0]),
    )
}

fn cab(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut ps = ParamStore::new(71);
    let block = Cab::new(&mut ps, "cab", 8, 2, 2)?;
    block_check(
        &ps,
        vec![("x", uniform(&[2, 8, 4, 4], 72))],
        &capped(cfg, 24),
        |cx, v| block.forward(cx, v[0]),
    )
}

fn fe(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut ps = ParamStore::new(73);
    let block = Fe::new(&mut ps, "fe", 8, 2, true)?;
    block_check(
        &ps,
        vec![
            ("enc", uniform(&[2, 8, 4, 4], 74)),
            ("dec", uniform(&[2, 8, 4, 4], 75)),
        ],
        &capped(cfg, 24),
        |cx, v| block.forward(cx, v[0], v[1]),
    )
}

fn downsample(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut ps = ParamStore::new(76);
    let block = Downsample::new(&mut ps, "down", 3, 8, true)?;
    block_check(
        &ps,
        vec![("x", distinct(&[2, 3, 6, 6], 77))],
        &capped(cfg, 24),
        |cx, v| block.forward(cx, v[0]),
    )
}

fn seghead(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut ps = ParamStore::new(78);
    let block = SegHead::new(&mut ps, "head", &[2, 4, 8], &[4, 6, 8], 4, 3, true)?;
    block_check(
        &ps,
        vec![
            ("d2", uniform(&[2, 4, 8, 8], 79)),
            ("d4", uniform(&[2, 6, 4, 4], 80)),
            ("d8", uniform(&[2, 8, 2, 2], 81)),
        ],
        &capped(cfg, 16),
        |cx, v| block.forward(cx, &[v[0], v[1], v[2]]),
    )
}

/// Smallest configuration that satisfies every divisibility rule.
pub fn tiny_config() -> NetworkConfig {
    let mut c = NetworkConfig::default().with_classes(3);
    c.widths = vec![8, 16, 16];
    c.lfib_counts = vec![1; 6];
    c.cc_reduction = 2;
    c.cru_squeeze = 2;
    c.fe_reduction = 4;
    c.transformer.heads = 2;
    c.transformer.mlp_ratio = 2;
    c.transformer.cab_compress = 4;
    c.transformer.cab_reduction = 4;
    c.seghead_width = 4;
    c.seed = 7;
    c
}

fn network(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let net = Lmiinet::<f64>::build(&tiny_config())?;
    let labels: Vec<u32> = {
        let mut r = rng(82);
        (0..2 * 16 * 16).map(|_| r.gen_range(0..3)).collect()
    };
    let mut inputs = named(vec![("images", uniform(&[2, 3, 16, 16], 83))]);
    let ids: Vec<_> = net.params.ids().collect();
    for &id in &ids {
        let p = net.params.get(id);
        inputs.push((p.name.clone(), p.value.clone()));
    }
    grad_check(
        &inputs,
        |g, v| {
            let graph = std::mem::take(g);
            let mut cx = Ctx::with_graph(&net.params, Mode::Train, graph);
            for (k, &id) in ids.iter().enumerate() {
                cx.bind(id, v[1 + k]);
            }
            let out = net.forward(&mut cx, v[0]);
            let (graph, _, _) = cx.finish();
            *g = graph;
            let out = out?;
            let main = g.cross_entropy(out.logits, &labels, None)?;
            let aux = g.cross_entropy(out.aux_logits, &labels, None)?;
            let aux = g.scale(aux, 0.3);
            g.add(main, aux)
        },
        &capped(cfg, 3),
    )
}

macro_rules! case {
    ($name:ident, $kind:ident, $linear:expr) => {
        CheckCase {
            name: stringify!($name),
            kind: CaseKind::$kind,
            linear: $linear,
            run: $name,
        }
    };
}

/// Every registered check, ops first.
pub fn registry() -> Vec<CheckCase> {
    vec![
        case!(conv2d, Op, true),
        case!(conv2d_strided, Op, true),
        case!(channel_shuffle, Op, true),
        case!(split, Op, true),
        case!(concat, Op, true),
        case!(add, Op, true),
        case!(sub, Op, true),
        case!(mul, Op, true),
        case!(scale, Op, true),
        case!(div_guarded, Op, false),
        case!(relu, Op, false),
        case!(gelu, Op, false),
        case!(sigmoid, Op, false),
        case!(batch_norm, Op, false),
        case!(batch_norm_eval, Op, true),
        case!(layer_norm, Op, false),
        case!(matmul, Op, true),
        case!(matmul_broadcast, Op, true),
        case!(transpose, Op, true),
        case!(tokens, Op, true),
        case!(global_avg_pool, Op, true),
        case!(avg_pool, Op, true),
        case!(max_pool, Op, false),
        case!(upsample_bilinear, Op, true),
        case!(resize_bilinear, Op, true),
        case!(upsample_nearest, Op, true),
        case!(sum_axis, Op, true),
        case!(max_axis, Op, false),
        case!(softmax, Op, false),
        case!(focused_map, Op, false),
        case!(cross_entropy, Op, false),
        case!(lfib, Block, false),
        case!(cc, Block, false),
        case!(cru, Block, false),
        case!(flam, Block, false),
        case!(transformer, Block, false),
        case!(cab, Block, false),
        case!(fe, Block, false),
        case!(downsample, Block, false),
        case!(seghead, Block, false),
        case!(network, Block, false),
    ]
}

/// Cases selected by `scope`: `all`, `ops`, `blocks`, or a case name.
pub fn select(scope: &str) -> Result<Vec<CheckCase>> {
    let all = registry();
    let picked: Vec<CheckCase> = match scope {
        "all" => all,
        "ops" => all.into_iter().filter(|c| c.kind == CaseKind::Op).collect(),
        "blocks" => all
            .into_iter()
            .filter(|c| c.kind == CaseKind::Block)
            .collect(),
        name => all.into_iter().filter(|c| c.name == name).collect(),
    };
    if picked.is_empty() {
        let names: Vec<&str> = registry().iter().map(|c| c.name).collect();
        return Err(Error::InvalidConfig(vec![format!(
            "unknown grad-check scope {scope:?}; expected all, ops, blocks or one of: {}",
            names.join(", ")
        )]));
    }
    Ok(picked)
}

/// Runs the selected cases, optionally with a corrupted backward rule.
pub fn run_scope(scope: &str, fault: Option<&str>) -> Result<Vec<CaseResult>> {
    select(scope)?
        .into_iter()
        .map(|case| {
            let t = std::time::Instant::now();
            let report = case.run(fault)?;
            Ok(CaseResult {
                name: case.name,
                kind: case.kind,
                report,
                seconds: t.elapsed().as_secs_f64(),
            })
        })
        .collect()
}
