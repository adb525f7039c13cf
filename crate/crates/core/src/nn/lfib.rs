use serde::{Deserialize, Serialize};

use super::cru::Cru;
use super::ctx::Ctx;
use super::gate::ChannelGate;
use super::layers::{Act, ConvNorm};
use super::params::ParamStore;
use crate::engine::{Conv2dOptions, Scalar, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LfibOptions {
    pub channels: usize,
    pub dilation: usize,
    pub cc: bool,
    pub cc_reduction: usize,
    pub cru_alpha: f64,
    pub cru_squeeze: usize,
    pub shuffle_groups: usize,
    /// Depth-wise 3×1 / 1×3 pair in the left branch instead of full convolutions.
    pub depthwise_asym: bool,
    pub norm: bool,
}

impl LfibOptions {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            dilation: 1,
            cc: true,
            cc_reduction: 4,
            cru_alpha: 0.5,
            cru_squeeze: 2,
            shuffle_groups: 2,
            depthwise_asym: true,
            norm: true,
        }
    }
}

/// Intermediate activations of one block.
#[derive(Clone, Debug)]
pub struct LfibTrace<T> {
    pub f1: Tensor<T>,
    pub f21: Tensor<T>,
    pub f22: Tensor<T>,
    pub f2: Tensor<T>,
}

/// Split dual-branch bottleneck with cross-branch gating, CRU refinement and
/// channel shuffle.
///
/// ```text
/// F1        = 1×1(x)
/// F21, F22  = split(F1)
/// F21'      = 1×3(3×1(F21 + CC(F22)))
/// F22'      = 1×1(DW3×3_R(F22 + CC(F21)))
/// F2        = concat(F21', F22') + CRU(F1)
/// y         = shuffle(BN(DW3×3(x + F2)))
/// ```
#[derive(Clone, Debug)]
pub struct Lfib {
    pub entry: ConvNorm,
    pub cc_left: Option<ChannelGate>,
    pub cc_right: Option<ChannelGate>,
    pub left_a: ConvNorm,
    pub left_b: ConvNorm,
    pub right_dw: ConvNorm,
    pub right_pw: ConvNorm,
    pub cru: Cru,
    pub exit: ConvNorm,
    pub channels: usize,
    pub shuffle_groups: usize,
}

impl Lfib {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, o: &LfibOptions) -> Result<Self> {
        let c = o.channels;
        if c == 0 || c % 2 != 0 {
            return Err(Error::Config(format!(
                "{name}: channel count {c} must be even"
            )));
        }
        if o.dilation == 0 {
            return Err(Error::Config(format!("{name}: dilation must be >= 1")));
        }
        if o.shuffle_groups == 0 || c % o.shuffle_groups != 0 {
            return Err(Error::Config(format!(
                "{name}: shuffle groups {} must divide {c}",
                o.shuffle_groups
            )));
        }
        let h = c / 2;
        let n = o.norm;
        let asym_groups = if o.depthwise_asym { h } else { 1 };
        let gate = |ps: &mut ParamStore<T>, side: &str| -> Result<Option<ChannelGate>> {
            o.cc.then(|| ChannelGate::new(ps, &format!("{name}.{side}"), h, o.cc_reduction))
                .transpose()
        };
        Ok(Self {
            entry: ConvNorm::same(ps, &format!("{name}.entry"), c, c, 1, 1, n, Act::Relu)?,
            cc_left: gate(ps, "cc_left")?,
            cc_right: gate(ps, "cc_right")?,
            left_a: ConvNorm::new(
                ps,
                &format!("{name}.left_3x1"),
                h,
                h,
                (3, 1),
                Conv2dOptions::default().padding(1, 0).groups(asym_groups),
                n,
                Act::Relu,
            )?,
            left_b: ConvNorm::new(
                ps,
                &format!("{name}.left_1x3"),
                h,
                h,
                (1, 3),
                Conv2dOptions::default().padding(0, 1).groups(asym_groups),
                n,
                Act::Relu,
            )?,
            right_dw: ConvNorm::new(
                ps,
                &format!("{name}.right_dw"),
                h,
                h,
                (3, 3),
                Conv2dOptions::default()
                    .padding(o.dilation, o.dilation)
                    .dilation(o.dilation)
                    .groups(h),
                n,
                Act::None,
            )?,
            right_pw: ConvNorm::same(ps, &format!("{name}.right_pw"), h, h, 1, 1, n, Act::Relu)?,
            cru: Cru::new(ps, &format!("{name}.cru"), c, o.cru_alpha, o.cru_squeeze)?,
            exit: ConvNorm::same(ps, &format!("{name}.exit"), c, c, 3, c, n, Act::None)?,
            channels: c,
            shuffle_groups: o.shuffle_groups,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(cx, x, false)?.0)
    }

    pub fn forward_traced<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        x: Var,
        trace: bool,
    ) -> Result<(Var, Option<LfibTrace<T>>)> {
        let (_, c, _, _) = cx.g.value(x).dims4("lfib")?;
        if c != self.channels {
            return Err(Error::dim(
                "lfib",
                "channel",
                format!("block expects {} channels, got {c}", self.channels),
            ));
        }
        let f1 = self.entry.forward(cx, x)?;
        let (f21, f22) = cx.g.split_halves(f1)?;

        let left_in = match &self.cc_left {
            Some(gate) => {
                let w = gate.weigh(cx, f22)?;
                cx.g.add(f21, w)?
            }
            None => f21,
        };
        let right_in = match &self.cc_right {
            Some(gate) => {
                let w = gate.weigh(cx, f21)?;
                cx.g.add(f22, w)?
            }
            None => f22,
        };
        let l = self.left_a.forward(cx, left_in)?;
        let l = self.left_b.forward(cx, l)?;
        let r = self.right_dw.forward(cx, right_in)?;
        let r = self.right_pw.forward(cx, r)?;
        let branches = cx.g.concat(&[l, r], 1)?;
        let refined = self.cru.forward(cx, f1)?;
        let f2 = cx.g.add(branches, refined)?;

        let s = cx.g.add(x, f2)?;
        let e = self.exit.forward(cx, s)?;
        let y = cx.g.channel_shuffle(e, self.shuffle_groups)?;

        let trace = trace.then(|| LfibTrace {
            f1: cx.g.value(f1).clone(),
            f21: cx.g.value(f21).clone(),
            f22: cx.g.value(f22).clone(),
            f2: cx.g.value(f2).clone(),
        });
        Ok((y, trace))
    }
}
