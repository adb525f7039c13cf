use super::ctx::Ctx;
use super::layers::Conv2d;
use super::params::ParamStore;
use crate::engine::{Conv2dOptions, Scalar, Var};
use crate::error::{Error, Result};

/// Split/transform/fuse channel refinement.
///
/// The first `alpha·C` channels take the rich path (squeeze, 3×3 group conv
/// plus pointwise conv), the rest the cheap path (squeeze, pointwise conv
/// concatenated with its own input). The two C-channel results are fused with
/// per-channel softmax weights computed from their global averages.
#[derive(Clone, Debug)]
pub struct Cru {
    pub squeeze_rich: Conv2d,
    pub squeeze_cheap: Conv2d,
    pub gwc: Conv2d,
    pub pwc_rich: Conv2d,
    pub pwc_cheap: Conv2d,
    pub rich: usize,
    pub cheap: usize,
}

pub const CRU_GROUPS: usize = 2;

impl Cru {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        alpha: f64,
        squeeze: usize,
    ) -> Result<Self> {
        let rich_f = alpha * channels as f64;
        if !(alpha > 0.0 && alpha < 1.0) || (rich_f - rich_f.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "{name}: split ratio {alpha} of {channels} channels is not integral"
            )));
        }
        let rich = rich_f.round() as usize;
        let cheap = channels - rich;
        if squeeze == 0 || rich % squeeze != 0 || cheap % squeeze != 0 {
            return Err(Error::Config(format!(
                "{name}: squeeze ratio {squeeze} must divide {rich} and {cheap}"
            )));
        }
        let (rs, cs) = (rich / squeeze, cheap / squeeze);
        if rs % CRU_GROUPS != 0 || channels % CRU_GROUPS != 0 {
            return Err(Error::Config(format!(
                "{name}: group conv needs {rs} and {channels} divisible by {CRU_GROUPS}"
            )));
        }
        let pw = Conv2dOptions::default();
        Ok(Self {
            squeeze_rich: Conv2d::new(
                ps,
                &format!("{name}.squeeze_rich"),
                rich,
                rs,
                (1, 1),
                pw,
                false,
            )?,
            squeeze_cheap: Conv2d::new(
                ps,
                &format!("{name}.squeeze_cheap"),
                cheap,
                cs,
                (1, 1),
                pw,
                false,
            )?,
            gwc: Conv2d::new(
                ps,
                &format!("{name}.gwc"),
                rs,
                channels,
                (3, 3),
                Conv2dOptions::default().padding(1, 1).groups(CRU_GROUPS),
                true,
            )?,
            pwc_rich: Conv2d::new(
                ps,
                &format!("{name}.pwc_rich"),
                rs,
                channels,
                (1, 1),
                pw,
                false,
            )?,
            pwc_cheap: Conv2d::new(
                ps,
                &format!("{name}.pwc_cheap"),
                cs,
                channels - cs,
                (1, 1),
                pw,
                false,
            )?,
            rich,
            cheap,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(cx, x)?.0)
    }

    /// Output plus the fusion weights of the rich and cheap paths (N×C×1×1 each).
    pub fn forward_with_weights<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        x: Var,
    ) -> Result<(Var, Var, Var)> {
        let parts = cx.g.split(x, 1, &[self.rich, self.cheap])?;
        let up = self.squeeze_rich.forward(cx, parts[0])?;
        let low = self.squeeze_cheap.forward(cx, parts[1])?;

        let g = self.gwc.forward(cx, up)?;
        let p = self.pwc_rich.forward(cx, up)?;
        let y1 = cx.g.add(g, p)?;
        let reuse = self.pwc_cheap.forward(cx, low)?;
        let y2 = cx.g.concat(&[reuse, low], 1)?;

        let (n, c, _, _) = cx.g.value(y1).dims4("cru")?;
        let s1 = cx.g.global_avg_pool(y1)?;
        let s2 = cx.g.global_avg_pool(y2)?;
        let s = cx.g.concat(&[s1, s2], 1)?;
        let s = cx.g.reshape(s, &[n, 2, c, 1])?;
        let w = cx.g.softmax(s, 1)?;
        let w = cx.g.reshape(w, &[n, 2 * c, 1, 1])?;
        let w1 = cx.g.narrow(w, 1, 0, c)?;
        let w2 = cx.g.narrow(w, 1, c, c)?;
        let a = cx.g.mul(y1, w1)?;
        let b = cx.g.mul(y2, w2)?;
        Ok((cx.g.add(a, b)?, w1, w2))
    }
}
