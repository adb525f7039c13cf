use super::ctx::Ctx;
use super::layers::{Conv2d, Linear};
use super::params::ParamStore;
use crate::engine::{Conv2dOptions, Scalar, Var};
use crate::error::{Error, Result};

/// Focused linear attention over N×L×d tokens.
///
/// Per head, with φ the focused map:
///
/// ```text
/// out = φ(Q)·(φ(K)ᵀ·V) / (φ(Q)·Σ_j φ(K)_j) + DWC(V)
/// ```
///
/// evaluated right to left so the cost is linear in L. Rows whose
/// denominator is zero produce zero attention output. With `normalized`
/// off the division is skipped.
#[derive(Clone, Debug)]
pub struct Flam {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub dwc: Conv2d,
    pub dim: usize,
    pub heads: usize,
    pub focus_power: f64,
    pub normalized: bool,
}

impl Flam {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        focus_power: f64,
        normalized: bool,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: {heads} heads do not divide dimension {dim}"
            )));
        }
        if focus_power < 1.0 || !focus_power.is_finite() {
            return Err(Error::Config(format!(
                "{name}: focusing power must be >= 1, got {focus_power}"
            )));
        }
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(ps, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(ps, &format!("{name}.v"), dim, dim)?,
            dwc: Conv2d::new(
                ps,
                &format!("{name}.dwc"),
                dim,
                dim,
                (3, 3),
                Conv2dOptions::default().padding(1, 1).groups(dim),
                true,
            )?,
            dim,
            heads,
            focus_power,
            normalized,
        })
    }

    /// `tokens` is N×L×d with L = h·w (row-major over the feature map).
    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        tokens: Var,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let (_, l, d) = cx.g.value(tokens).dims3("flam")?;
        if d != self.dim {
            return Err(Error::dim(
                "flam",
                "inner",
                format!("expected embedding {}, got {d}", self.dim),
            ));
        }
        if l != h * w {
            return Err(Error::Usage(format!(
                "flam: {l} tokens do not form a {h}×{w} map"
            )));
        }
        let q = self.q.forward(cx, tokens)?;
        let k = self.k.forward(cx, tokens)?;
        let v = self.v.forward(cx, tokens)?;

        let dh = d / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    cx.g.narrow(q, 2, head * dh, dh)?,
                    cx.g.narrow(k, 2, head * dh, dh)?,
                    cx.g.narrow(v, 2, head * dh, dh)?,
                )
            };
            let pq = cx.g.focused_map(qh, self.focus_power)?;
            let pk = cx.g.focused_map(kh, self.focus_power)?;
            let pkt = cx.g.transpose(pk)?;
            let kv = cx.g.matmul(pkt, vh)?;
            let num = cx.g.matmul(pq, kv)?;
            let out = if self.normalized {
                let ksum = cx.g.sum_axis(pk, 1)?;
                let ksum = cx.g.transpose(ksum)?;
                let z = cx.g.matmul(pq, ksum)?;
                cx.g.div_guarded(num, z)?
            } else {
                num
            };
            outs.push(out);
        }
        let attn = if self.heads == 1 {
            outs[0]
        } else {
            cx.g.concat(&outs, 2)?
        };

        let vmap = cx.g.tokens_to_map(v, h, w)?;
        let dv = self.dwc.forward(cx, vmap)?;
        let dv = cx.g.map_to_tokens(dv)?;
        cx.g.add(attn, dv)
    }
}
