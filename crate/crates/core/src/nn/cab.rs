use super::ctx::Ctx;
use super::gate::ChannelGate;
use super::layers::Conv2d;
use super::params::ParamStore;
use crate::engine::{Scalar, Var};
use crate::error::{Error, Result};

/// conv3×3 → GELU → conv3×3 → channel attention.
#[derive(Clone, Debug)]
pub struct Cab {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub attention: ChannelGate,
}

impl Cab {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        compress: usize,
        reduction: usize,
    ) -> Result<Self> {
        if compress == 0 || channels % compress != 0 {
            return Err(Error::Config(format!(
                "{name}: compress ratio {compress} must divide {channels}"
            )));
        }
        let mid = channels / compress;
        Ok(Self {
            conv1: Conv2d::same(ps, &format!("{name}.conv1"), channels, mid, 3, 1, true)?,
            conv2: Conv2d::same(ps, &format!("{name}.conv2"), mid, channels, 3, 1, true)?,
            attention: ChannelGate::new(ps, &format!("{name}.attention"), channels, reduction)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(cx, x)?;
        let y = cx.g.gelu(y);
        let y = self.conv2.forward(cx, y)?;
        self.attention.weigh(cx, y)
    }
}
