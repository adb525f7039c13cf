use super::ctx::Ctx;
use super::layers::{Act, Conv2d, ConvNorm};
use super::params::ParamStore;
use crate::engine::{Scalar, Var};
use crate::error::{Error, Result};

/// Multi-scale head. Taps at downsampling factors `scales` (for example
/// 2, 4, 8) are resized bilinearly to the finest tap, concatenated, passed
/// through a 1×1 projection (BN, ReLU) and a 1×1 classifier, then upsampled
/// bilinearly to the input resolution.
#[derive(Clone, Debug)]
pub struct SegHead {
    pub scales: Vec<usize>,
    pub proj: ConvNorm,
    pub classifier: Conv2d,
}

impl SegHead {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        scales: &[usize],
        channels: &[usize],
        width: usize,
        classes: usize,
        norm: bool,
    ) -> Result<Self> {
        if scales.is_empty() || scales.len() != channels.len() {
            return Err(Error::Config(format!(
                "{name}: need one channel count per tap"
            )));
        }
        let total: usize = channels.iter().sum();
        Ok(Self {
            scales: scales.to_vec(),
            proj: ConvNorm::same(
                ps,
                &format!("{name}.proj"),
                total,
                width,
                1,
                1,
                norm,
                Act::Relu,
            )?,
            classifier: Conv2d::same(
                ps,
                &format!("{name}.classifier"),
                width,
                classes,
                1,
                1,
                true,
            )?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, taps: &[Var]) -> Result<Var> {
        if taps.len() != self.scales.len() {
            return Err(Error::Usage(format!(
                "seghead: expected {} taps, got {}",
                self.scales.len(),
                taps.len()
            )));
        }
        let base = *self.scales.iter().min().expect("non-empty");
        let anchor = self
            .scales
            .iter()
            .position(|&s| s == base)
            .expect("present");
        let (_, _, bh, bw) = cx.g.value(taps[anchor]).dims4("seghead")?;
        let mut resized = Vec::with_capacity(taps.len());
        for (&tap, &scale) in taps.iter().zip(&self.scales) {
            let (_, _, h, w) = cx.g.value(tap).dims4("seghead")?;
            if h * scale != bh * base {
                return Err(Error::dim(
                    "seghead",
                    "height",
                    format!(
                        "tap at 1/{scale} has height {h}, expected {}",
                        bh * base / scale
                    ),
                ));
            }
            if w * scale != bw * base {
                return Err(Error::dim(
                    "seghead",
                    "width",
                    format!(
                        "tap at 1/{scale} has width {w}, expected {}",
                        bw * base / scale
                    ),
                ));
            }
            resized.push(if scale == base {
                tap
            } else {
                cx.g.resize_bilinear(tap, bh, bw)?
            });
        }
        let x = if resized.len() == 1 {
            resized[0]
        } else {
            cx.g.concat(&resized, 1)?
        };
        let y = self.proj.forward(cx, x)?;
        let y = self.classifier.forward(cx, y)?;
        if base == 1 {
            Ok(y)
        } else {
            cx.g.upsample_bilinear(y, base)
        }
    }
}
