use super::config::NetworkConfig;
use crate::engine::{Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{
    apply_stat_updates, Act, Conv2d, ConvNorm, Ctx, Downsample, Fe, Lfib, Mode, ParamStore,
    SegHead, TransformerBlock,
};

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    pub aux_logits: Var,
    /// Decoder features at 1/2, 1/4 and 1/8 resolution.
    pub taps: [Var; 3],
}

/// Materialized outputs of an inference pass.
#[derive(Clone, Debug)]
pub struct ForwardOutputs<T> {
    pub logits: Tensor<T>,
    pub aux_logits: Tensor<T>,
    pub taps: Option<[Tensor<T>; 3]>,
}

/// The realized network: blocks plus the parameter store they index.
#[derive(Clone, Debug)]
pub struct Lmiinet<T> {
    pub config: NetworkConfig,
    pub params: ParamStore<T>,
    pub stem: Downsample,
    pub stage1: Vec<Lfib>,
    pub down2: Downsample,
    pub stage2: Vec<Lfib>,
    pub down3: Downsample,
    pub stage3: Vec<Lfib>,
    pub transformer: Vec<TransformerBlock>,
    pub fe4: Fe,
    pub stage4: Vec<Lfib>,
    pub up5: ConvNorm,
    pub fe5: Fe,
    pub stage5: Vec<Lfib>,
    pub up6: ConvNorm,
    pub stage6: Vec<Lfib>,
    pub head: SegHead,
    pub aux_head: Conv2d,
}

fn stage<T: Scalar>(
    ps: &mut ParamStore<T>,
    cfg: &NetworkConfig,
    index: usize,
    width: usize,
) -> Result<Vec<Lfib>> {
    let opts = cfg.lfib_options(index, width);
    (0..cfg.lfib_counts[index])
        .map(|i| Lfib::new(ps, &format!("stage{}.{i}", index + 1), &opts))
        .collect()
}

fn run_stage<T: Scalar>(blocks: &[Lfib], cx: &mut Ctx<'_, T>, mut x: Var) -> Result<Var> {
    for b in blocks {
        x = b.forward(cx, x)?;
    }
    Ok(x)
}

impl<T: Scalar> Lmiinet<T> {
    /// Validates the config and initializes every parameter from its seed.
    pub fn build(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let cfg = config;
        let [w1, w2, w3] = [cfg.widths[0], cfg.widths[1], cfg.widths[2]];
        let n = cfg.batch_norm;
        let mut ps = ParamStore::new(cfg.seed);
        let stem = Downsample::new(&mut ps, "stem", 3, w1, n)?;
        let stage1 = stage(&mut ps, cfg, 0, w1)?;
        let down2 = Downsample::new(&mut ps, "down2", w1, w2, n)?;
        let stage2 = stage(&mut ps, cfg, 1, w2)?;
        let down3 = Downsample::new(&mut ps, "down3", w2, w3, n)?;
        let stage3 = stage(&mut ps, cfg, 2, w3)?;
        let topts = cfg.transformer_options();
        let transformer = (0..cfg.transformer.blocks)
            .map(|i| TransformerBlock::new(&mut ps, &format!("transformer.{i}"), &topts))
            .collect::<Result<Vec<_>>>()?;
        let fe4 = Fe::new(&mut ps, "fe4", w3, cfg.fe_reduction, n)?;
        let stage4 = stage(&mut ps, cfg, 3, w3)?;
        let up5 = ConvNorm::same(&mut ps, "up5", w3, w2, 1, 1, n, Act::Relu)?;
        let fe5 = Fe::new(&mut ps, "fe5", w2, cfg.fe_reduction, n)?;
        let stage5 = stage(&mut ps, cfg, 4, w2)?;
        let up6 = ConvNorm::same(&mut ps, "up6", w2, w1, 1, 1, n, Act::Relu)?;
        let stage6 = stage(&mut ps, cfg, 5, w1)?;
        let tap_widths: Vec<usize> = cfg.seghead_taps.iter().map(|&s| cfg.tap_width(s)).collect();
        let head = SegHead::new(
            &mut ps,
            "head",
            &cfg.seghead_taps,
            &tap_widths,
            cfg.seghead_width,
            cfg.classes,
            n,
        )?;
        let aux_head = Conv2d::same(
            &mut ps,
            "aux_head",
            cfg.tap_width(cfg.aux_tap),
            cfg.classes,
            1,
            1,
            true,
        )?;
        Ok(Self {
            config: cfg.clone(),
            params: ps,
            stem,
            stage1,
            down2,
            stage2,
            down3,
            stage3,
            transformer,
            fe4,
            stage4,
            up5,
            fe5,
            stage5,
            up6,
            stage6,
            head,
            aux_head,
        })
    }

    /// Checks an N×3×H×W batch with H and W divisible by 8.
    pub fn check_input(images: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = images.dims4("forward")?;
        if c != 3 {
            return Err(Error::dim(
                "forward",
                "channel",
                format!("expected 3 input channels, got {c}"),
            ));
        }
        if h % 8 != 0 {
            return Err(Error::dim(
                "forward",
                "height",
                format!("height {h} is not divisible by 8"),
            ));
        }
        if w % 8 != 0 {
            return Err(Error::dim(
                "forward",
                "width",
                format!("width {w} is not divisible by 8"),
            ));
        }
        Ok(())
    }

    /// Records the forward pass on `cx`.
    pub fn forward(&self, cx: &mut Ctx<'_, T>, images: Var) -> Result<ForwardVars> {
        Self::check_input(cx.g.value(images))?;
        let (_, _, h, w) = cx.g.value(images).dims4("forward")?;

        let x = self.stem.forward(cx, images)?;
        let e1 = run_stage(&self.stage1, cx, x)?;
        let x = self.down2.forward(cx, e1)?;
        let e2 = run_stage(&self.stage2, cx, x)?;
        let x = self.down3.forward(cx, e2)?;
        let e3 = run_stage(&self.stage3, cx, x)?;

        let mut t = e3;
        for block in &self.transformer {
            t = block.forward(cx, t)?;
        }
        let x = self.fe4.forward(cx, e3, t)?;
        let d4 = run_stage(&self.stage4, cx, x)?;

        let x = cx.g.upsample_bilinear(d4, 2)?;
        let x = self.up5.forward(cx, x)?;
        let x = self.fe5.forward(cx, e2, x)?;
        let d5 = run_stage(&self.stage5, cx, x)?;

        let x = cx.g.upsample_bilinear(d5, 2)?;
        let x = self.up6.forward(cx, x)?;
        let d6 = run_stage(&self.stage6, cx, x)?;

        let taps = [d6, d5, d4];
        let pick = |s: usize| {
            taps[match s {
                2 => 0,
                4 => 1,
                _ => 2,
            }]
        };
        let head_in: Vec<Var> = self.config.seghead_taps.iter().map(|&s| pick(s)).collect();
        let logits = self.head.forward(cx, &head_in)?;
        let a = self.aux_head.forward(cx, pick(self.config.aux_tap))?;
        let aux_logits = cx.g.resize_bilinear(a, h, w)?;
        Ok(ForwardVars {
            logits,
            aux_logits,
            taps,
        })
    }

    /// Eval-mode forward on running statistics; records no tape.
    pub fn infer(&self, images: &Tensor<T>, keep_taps: bool) -> Result<ForwardOutputs<T>> {
        Self::check_input(images)?;
        let mut cx = Ctx::new(&self.params, Mode::Eval);
        let x = cx.input(images.clone());
        let out = self.forward(&mut cx, x)?;
        let g = &cx.g;
        Ok(ForwardOutputs {
            logits: g.value(out.logits).clone(),
            aux_logits: g.value(out.aux_logits).clone(),
            taps: keep_taps.then(|| out.taps.map(|v| g.value(v).clone())),
        })
    }

    /// Trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    pub fn apply_stats(&mut self, updates: Vec<crate::nn::StatUpdate<T>>) {
        apply_stat_updates(&mut self.params, updates);
    }

    /// Same network in another precision.
    pub fn cast<U: Scalar>(&self) -> Lmiinet<U> {
        Lmiinet {
            config: self.config.clone(),
            params: self.params.cast(),
            stem: self.stem.clone(),
            stage1: self.stage1.clone(),
            down2: self.down2.clone(),
            stage2: self.stage2.clone(),
            down3: self.down3.clone(),
            stage3: self.stage3.clone(),
            transformer: self.transformer.clone(),
            fe4: self.fe4.clone(),
            stage4: self.stage4.clone(),
            up5: self.up5.clone(),
            fe5: self.fe5.clone(),
            stage5: self.stage5.clone(),
            up6: self.up6.clone(),
            stage6: self.stage6.clone(),
            head: self.head.clone(),
            aux_head: self.aux_head.clone(),
        }
    }
}
