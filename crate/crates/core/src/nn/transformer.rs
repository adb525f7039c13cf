use serde::{Deserialize, Serialize};

use super::cab::Cab;
use super::ctx::Ctx;
use super::flam::Flam;
use super::gate::ChannelGate;
use super::layers::{LayerNorm, Linear};
use super::params::ParamStore;
use crate::engine::{Scalar, Tensor, Var};
use crate::error::Result;

/// How the gate output enters `x + CC(F11)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CcMode {
    /// Coefficients weight F11: `x + gate(F11) ⊙ F11`.
    Multiplicative,
    /// Coefficients are added as a per-channel feature: `x + gate(F11)`.
    Additive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerOptions {
    pub dim: usize,
    pub heads: usize,
    pub focus_power: f64,
    pub mlp_ratio: usize,
    pub cab_compress: usize,
    pub cab_reduction: usize,
    pub cc: bool,
    pub cc_reduction: usize,
    pub cc_mode: CcMode,
    pub normalized_attention: bool,
}

impl TransformerOptions {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            heads: 1,
            focus_power: 3.0,
            mlp_ratio: 4,
            cab_compress: 4,
            cab_reduction: 16,
            cc: true,
            cc_reduction: 4,
            cc_mode: CcMode::Multiplicative,
            normalized_attention: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TransformerTrace<T> {
    pub f11: Tensor<T>,
    pub f12: Tensor<T>,
    pub f1: Tensor<T>,
}

/// Attention/convolution dual-branch block on an N×C×H×W map:
///
/// ```text
/// F11 = FLAM(LN(x))
/// F12 = CAB(x + CC(F11))
/// F1  = F11 + F12 + x
/// y   = F1 + MLP(LN(F1))
/// ```
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub flam: Flam,
    pub cc: Option<ChannelGate>,
    pub cc_mode: CcMode,
    pub cab: Cab,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        o: &TransformerOptions,
    ) -> Result<Self> {
        let d = o.dim;
        Ok(Self {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), d)?,
            flam: Flam::new(
                ps,
                &format!("{name}.flam"),
                d,
                o.heads,
                o.focus_power,
                o.normalized_attention,
            )?,
            cc: o
                .cc
                .then(|| ChannelGate::new(ps, &format!("{name}.cc"), d, o.cc_reduction))
                .transpose()?,
            cc_mode: o.cc_mode,
            cab: Cab::new(
                ps,
                &format!("{name}.cab"),
                d,
                o.cab_compress,
                o.cab_reduction,
            )?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), d)?,
            fc1: Linear::new(ps, &format!("{name}.mlp.fc1"), d, d * o.mlp_ratio)?,
            fc2: Linear::new(ps, &format!("{name}.mlp.fc2"), d * o.mlp_ratio, d)?,
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
    ) -> Result<(Var, Option<TransformerTrace<T>>)> {
        let (_, _, h, w) = cx.g.value(x).dims4("transformer")?;
        let tokens = cx.g.map_to_tokens(x)?;
        let t = self.norm1.forward(cx, tokens)?;
        let t = self.flam.forward(cx, t, h, w)?;
        let f11 = cx.g.tokens_to_map(t, h, w)?;

        let cab_in = match &self.cc {
            Some(gate) => {
                let extra = match self.cc_mode {
                    CcMode::Multiplicative => gate.weigh(cx, f11)?,
                    CcMode::Additive => gate.coefficients(cx, f11)?,
                };
                cx.g.add(x, extra)?
            }
            None => x,
        };
        let f12 = self.cab.forward(cx, cab_in)?;
        let s = cx.g.add(f11, f12)?;
        let f1 = cx.g.add(s, x)?;

        let t1 = cx.g.map_to_tokens(f1)?;
        let m = self.norm2.forward(cx, t1)?;
        let m = self.fc1.forward(cx, m)?;
        let m = cx.g.gelu(m);
        let m = self.fc2.forward(cx, m)?;
        let m = cx.g.tokens_to_map(m, h, w)?;
        let y = cx.g.add(f1, m)?;

        let trace = trace.then(|| TransformerTrace {
            f11: cx.g.value(f11).clone(),
            f12: cx.g.value(f12).clone(),
            f1: cx.g.value(f1).clone(),
        });
        Ok((y, trace))
    }
}
