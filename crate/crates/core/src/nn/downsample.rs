use super::ctx::Ctx;
use super::layers::{BatchNorm, Conv2d};
use super::params::ParamStore;
use crate::engine::{Conv2dOptions, Scalar, Var};
use crate::error::{Error, Result};

/// Halves the resolution. When widening, a stride-2 3×3 convolution supplies
/// the extra `cout − cin` channels and a 2×2 max-pool carries the input
/// through; otherwise a plain stride-2 convolution. Followed by batch norm
/// (when enabled) and ReLU.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv2d,
    pub pool: bool,
    pub bn: Option<BatchNorm>,
}

impl Downsample {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        norm: bool,
    ) -> Result<Self> {
        let pool = cout > cin;
        let conv_out = if pool { cout - cin } else { cout };
        let opts = Conv2dOptions::default().stride(2).padding(1, 1);
        Ok(Self {
            conv: Conv2d::new(
                ps,
                &format!("{name}.conv"),
                cin,
                conv_out,
                (3, 3),
                opts,
                !norm,
            )?,
            pool,
            bn: if norm {
                Some(BatchNorm::new(ps, &format!("{name}.bn"), cout)?)
            } else {
                None
            },
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (_, _, h, w) = cx.g.value(x).dims4("downsample")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!(
                "downsample: spatial extent {h}×{w} is not even"
            )));
        }
        let c = self.conv.forward(cx, x)?;
        let mut y = if self.pool {
            let p = cx.g.max_pool(x, 2, 2)?;
            cx.g.concat(&[c, p], 1)?
        } else {
            c
        };
        if let Some(bn) = &self.bn {
            y = bn.forward(cx, y)?;
        }
        Ok(cx.g.relu(y))
    }
}
