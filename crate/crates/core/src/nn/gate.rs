use super::ctx::Ctx;
use super::layers::Conv2d;
use super::params::ParamStore;
use crate::engine::{Conv2dOptions, Scalar, Var};
use crate::error::{Error, Result};

/// Squeeze-excitation gate: global average pool, 1×1 reduce, ReLU, 1×1
/// expand, sigmoid. Emits N×C×1×1 coefficients in (0, 1).
///
/// Serves as the combination-coefficient (CC) gate and as the channel
/// attention inside CAB and FE.
#[derive(Clone, Debug)]
pub struct ChannelGate {
    pub reduce: Conv2d,
    pub expand: Conv2d,
    pub channels: usize,
    /// Emit zeros instead of coefficients (degenerate-gate experiments).
    pub force_zero: bool,
}

impl ChannelGate {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "{name}: reduction {reduction} must divide channel count {channels}"
            )));
        }
        let hidden = channels / reduction;
        let opts = Conv2dOptions::default();
        Ok(Self {
            reduce: Conv2d::new(
                ps,
                &format!("{name}.reduce"),
                channels,
                hidden,
                (1, 1),
                opts,
                true,
            )?,
            expand: Conv2d::new(
                ps,
                &format!("{name}.expand"),
                hidden,
                channels,
                (1, 1),
                opts,
                true,
            )?,
            channels,
            force_zero: false,
        })
    }

    pub fn coefficients<T: Scalar>(&self, cx: &mut Ctx<'_, T>, source: Var) -> Result<Var> {
        let (_, c, _, _) = cx.g.value(source).dims4("channel_gate")?;
        if c != self.channels {
            return Err(Error::dim(
                "channel_gate",
                "channel",
                format!("gate expects {} channels, got {c}", self.channels),
            ));
        }
        let pooled = cx.g.global_avg_pool(source)?;
        let r = self.reduce.forward(cx, pooled)?;
        let r = cx.g.relu(r);
        let e = self.expand.forward(cx, r)?;
        let s = cx.g.sigmoid(e);
        Ok(if self.force_zero {
            cx.g.scale(s, 0.0)
        } else {
            s
        })
    }

    /// `coefficients(source) ⊙ source`.
    pub fn weigh<T: Scalar>(&self, cx: &mut Ctx<'_, T>, source: Var) -> Result<Var> {
        let c = self.coefficients(cx, source)?;
        cx.g.mul(source, c)
    }
}
