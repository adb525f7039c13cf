use std::fmt::Write as _;

use super::data::{generate_batch, SyntheticSpec};
use super::metrics::{argmax_classes, Confusion, MiouReport};
use super::schedule::TrainingSchedule;
use super::sgd::Sgd;
use crate::engine::{Graph, Scalar, Var};
use crate::error::{Error, Result};
use crate::network::Lmiinet;
use crate::nn::{Ctx, Mode};

/// `main + λ·aux` on the tape.
pub fn combined_loss<T: Scalar>(g: &mut Graph<T>, main: Var, aux: Var, lambda: f64) -> Result<Var> {
    let weighted = g.scale(aux, lambda);
    g.add(main, weighted)
}

pub fn combined_loss_value(main: f64, aux: f64, lambda: f64) -> f64 {
    main + lambda * aux
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub schedule: TrainingSchedule,
    pub data: SyntheticSpec,
    pub iterations: usize,
    /// Held-out mIoU every this many iterations and after the last one.
    pub eval_every: usize,
    pub eval_images: usize,
    #[doc(hidden)]
    pub inject_nan_at: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        let schedule = TrainingSchedule::default();
        Self {
            iterations: schedule.max_iteration,
            schedule,
            data: SyntheticSpec::default(),
            eval_every: 50,
            eval_images: 32,
            inject_nan_at: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub iter: usize,
    /// Main-head cross-entropy.
    pub loss: f64,
    /// Main plus weighted auxiliary loss, the optimized objective.
    pub total: f64,
    pub lr: f64,
    pub miou: Option<f64>,
}

pub const CSV_HEADER: &str = "iter,loss,lr,miou";

impl HistoryRow {
    /// `iter,loss,lr,miou` with 9 significant digits; mIoU blank when not evaluated.
    pub fn csv_line(&self) -> String {
        let mut s = format!("{},{:.8e},{:.8e},", self.iter, self.loss, self.lr);
        if let Some(m) = self.miou {
            let _ = write!(s, "{m:.8e}");
        }
        s
    }
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Eval-mode confusion over `count` held-out images.
pub fn evaluate(
    net: &Lmiinet<f32>,
    spec: &SyntheticSpec,
    count: usize,
    batch: usize,
) -> Result<Confusion> {
    let held = spec.held_out();
    let mut conf = Confusion::new(net.config.classes);
    let mut first = 0;
    while first < count {
        let n = batch.min(count - first);
        let (images, labels) = held.images(first as u64, n);
        let out = net.infer(&images, false)?;
        conf.add(&labels, &argmax_classes(&out.logits)?)?;
        first += n;
    }
    Ok(conf)
}

pub fn evaluate_miou(
    net: &Lmiinet<f32>,
    spec: &SyntheticSpec,
    count: usize,
    batch: usize,
) -> Result<MiouReport> {
    evaluate(net, spec, count, batch)?.miou()
}

fn gradient_dump(net: &Lmiinet<f32>) -> String {
    let mut rows: Vec<(f64, &str)> = net
        .params
        .params()
        .iter()
        .map(|p| (p.grad.l2_norm(), p.name.as_str()))
        .collect();
    // Non-finite first, then largest.
    rows.sort_by(|a, b| {
        let key = |x: f64| if x.is_finite() { x } else { f64::INFINITY };
        key(b.0).total_cmp(&key(a.0))
    });
    let mut s = String::new();
    for (norm, name) in rows.iter().take(12) {
        let _ = write!(s, "\n    {name}: {norm:.6e}");
    }
    if rows.len() > 12 {
        let _ = write!(s, "\n    ... {} more", rows.len() - 12);
    }
    s
}

/// Runs `opts.iterations` SGD steps on synthetic batches. Each finished row is
/// passed to `on_row` before the next iteration starts.
pub fn train_loop(
    net: &mut Lmiinet<f32>,
    opts: &TrainOptions,
    mut on_row: impl FnMut(&HistoryRow),
) -> Result<Vec<HistoryRow>> {
    opts.schedule.validate()?;
    opts.data.validate()?;
    if opts.data.classes != net.config.classes {
        return Err(Error::Config(format!(
            "synthetic data has {} classes, network has {}",
            opts.data.classes, net.config.classes
        )));
    }
    if opts.eval_every == 0 || opts.eval_images == 0 {
        return Err(Error::Config(
            "eval_every and eval_images must be >= 1".into(),
        ));
    }
    let s = &opts.schedule;
    let mut sgd = Sgd::new(&net.params, s.momentum, s.weight_decay);
    let mut history = Vec::with_capacity(opts.iterations);
    for it in 0..opts.iterations {
        let lr = s.poly_lr(it);
        let (mut images, labels) = generate_batch(&opts.data, s.batch_size, it as u64);
        if opts.inject_nan_at == Some(it) {
            images.data_mut()[0] = f32::NAN;
        }

        let mut cx = Ctx::new(&net.params, Mode::Train);
        let x = cx.input(images);
        let out = net.forward(&mut cx, x)?;
        let main = cx.g.cross_entropy(out.logits, &labels, None)?;
        let aux = cx.g.cross_entropy(out.aux_logits, &labels, None)?;
        let total = combined_loss(&mut cx.g, main, aux, s.aux_weight)?;
        let loss = cx.g.value(main).data()[0] as f64;
        let total_v = cx.g.value(total).data()[0] as f64;
        let (g, bindings, stats) = cx.finish();
        let grads = g.backward(total)?;
        net.params.accumulate_grads(&bindings, &grads);
        drop(grads);
        if !total_v.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {total_v} at iteration {it}; gradient norms:{}",
                gradient_dump(net)
            )));
        }
        net.apply_stats(stats);
        sgd.step(&mut net.params, lr)?;

        let last = it + 1 == opts.iterations;
        let miou = if (it + 1) % opts.eval_every == 0 || last {
            Some(evaluate_miou(net, &opts.data, opts.eval_images, s.batch_size)?.mean)
        } else {
            None
        };
        let row = HistoryRow {
            iter: it,
            loss,
            total: total_v,
            lr,
            miou,
        };
        on_row(&row);
        history.push(row);
    }
    Ok(history)
}

/// Least-squares slope of `y` against its index.
pub fn slope(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    if y.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = y.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, v) in y.iter().enumerate() {
        let dx = i as f64 - mx;
        num += dx * (v - my);
        den += dx * dx;
    }
    num / den
}
