use super::ctx::Ctx;
use super::gate::ChannelGate;
use super::layers::{Act, Conv2d, ConvNorm};
use super::params::ParamStore;
use crate::engine::{Scalar, Var};
use crate::error::{Error, Result};

/// Long-connection fusion of an encoder feature (spatial detail) with a
/// decoder feature (semantics) of the same shape:
///
/// ```text
/// ca  = gate(dec)                                  N×C×1×1
/// sa  = σ(conv7×7([mean_c(enc), max_c(enc)]))      N×1×H×W
/// out = 1×1(ca ⊙ sa ⊙ (enc + dec))
/// ```
#[derive(Clone, Debug)]
pub struct Fe {
    pub channel: ChannelGate,
    pub spatial: Conv2d,
    pub fuse: ConvNorm,
}

impl Fe {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        norm: bool,
    ) -> Result<Self> {
        Ok(Self {
            channel: ChannelGate::new(ps, &format!("{name}.channel"), channels, reduction)?,
            spatial: Conv2d::same(ps, &format!("{name}.spatial"), 2, 1, 7, 1, true)?,
            fuse: ConvNorm::same(
                ps,
                &format!("{name}.fuse"),
                channels,
                channels,
                1,
                1,
                norm,
                Act::Relu,
            )?,
        })
    }

    /// Channel weights (N×C×1×1) and spatial weights (N×1×H×W).
    pub fn attention<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        enc: Var,
        dec: Var,
    ) -> Result<(Var, Var)> {
        if cx.g.shape(enc) != cx.g.shape(dec) {
            let (a, b) = (cx.g.shape(enc).to_vec(), cx.g.shape(dec).to_vec());
            let axis = match a.iter().zip(&b).position(|(x, y)| x != y) {
                Some(0) => "batch",
                Some(1) => "channel",
                Some(2) => "height",
                Some(3) => "width",
                _ => "rank",
            };
            return Err(Error::dim(
                "fe",
                axis,
                format!("encoder {a:?} vs decoder {b:?}"),
            ));
        }
        let ca = self.channel.coefficients(cx, dec)?;
        let mean = cx.g.mean_axis(enc, 1)?;
        let max = cx.g.max_axis(enc, 1)?;
        let pooled = cx.g.concat(&[mean, max], 1)?;
        let s = self.spatial.forward(cx, pooled)?;
        let sa = cx.g.sigmoid(s);
        Ok((ca, sa))
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, enc: Var, dec: Var) -> Result<Var> {
        let (ca, sa) = self.attention(cx, enc, dec)?;
        let sum = cx.g.add(enc, dec)?;
        let m = cx.g.mul(sum, ca)?;
        let m = cx.g.mul(m, sa)?;
        self.fuse.forward(cx, m)
    }
}
