use super::ctx::{Ctx, StatUpdate};
use super::params::{BufferId, ParamId, ParamKind, ParamStore};
use crate::engine::{Conv2dOptions, Scalar, Tensor, Var};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    None,
    Relu,
    Gelu,
}

impl Act {
    pub fn apply<T: Scalar>(self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        match self {
            Act::None => x,
            Act::Relu => cx.g.relu(x),
            Act::Gelu => cx.g.gelu(x),
        }
    }
}

/// Zero padding that keeps the spatial extent for odd kernels at stride 1.
pub fn same_padding(kh: usize, kw: usize, dilation: usize) -> (usize, usize) {
    ((kh - 1) / 2 * dilation, (kw - 1) / 2 * dilation)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub opts: Conv2dOptions,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        opts: Conv2dOptions,
        bias: bool,
    ) -> Result<Self> {
        let g = opts.groups;
        if g == 0 || cin % g != 0 || cout % g != 0 {
            return Err(Error::Config(format!(
                "{name}: groups {g} must divide input channels {cin} and output channels {cout}"
            )));
        }
        let fan_in = cin / g * kernel.0 * kernel.1;
        let weight = ps.weight(
            format!("{name}.weight"),
            &[cout, cin / g, kernel.0, kernel.1],
            fan_in,
        )?;
        let bias = if bias {
            Some(ps.constant(format!("{name}.bias"), &[cout], 0.0, ParamKind::Bias)?)
        } else {
            None
        };
        Ok(Self { weight, bias, opts })
    }

    /// Stride-1 convolution with "same" padding.
    pub fn same<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        let (ph, pw) = same_padding(k, k, 1);
        Self::new(
            ps,
            name,
            cin,
            cout,
            (k, k),
            Conv2dOptions::default().padding(ph, pw).groups(groups),
            bias,
        )
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        cx.g.conv2d(x, w, b, self.opts)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.constant(format!("{name}.gamma"), &[c], 1.0, ParamKind::NormScale)?,
            beta: ps.constant(format!("{name}.beta"), &[c], 0.0, ParamKind::NormShift)?,
            running_mean: ps.buffer(format!("{name}.running_mean"), Tensor::zeros(&[c]))?,
            running_var: ps.buffer(format!("{name}.running_var"), Tensor::full(&[c], T::one()))?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        if cx.training() {
            let (n, _, h, w) = cx.g.value(x).dims4("batch_norm")?;
            let count = n * h * w;
            let (y, mean, var) = cx.g.batch_norm(x, gamma, beta, BN_EPS)?;
            let unbias = if count > 1 {
                T::of(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            cx.push_stats(StatUpdate {
                mean: self.running_mean,
                var: self.running_var,
                batch_mean: mean,
                batch_var: var.into_iter().map(|v| v * unbias).collect(),
            });
            Ok(y)
        } else {
            let mean = cx.buffer(self.running_mean).clone();
            let var = cx.buffer(self.running_var).clone();
            cx.g.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)
        }
    }
}

/// Convolution, optional batch norm, activation. Without normalization the
/// convolution carries a bias instead.
#[derive(Clone, Debug)]
pub struct ConvNorm {
    pub conv: Conv2d,
    pub bn: Option<BatchNorm>,
    pub act: Act,
}

impl ConvNorm {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        opts: Conv2dOptions,
        norm: bool,
        act: Act,
    ) -> Result<Self> {
        let conv = Conv2d::new(ps, &format!("{name}.conv"), cin, cout, kernel, opts, !norm)?;
        let bn = if norm {
            Some(BatchNorm::new(ps, &format!("{name}.bn"), cout)?)
        } else {
            None
        };
        Ok(Self { conv, bn, act })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn same<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        groups: usize,
        norm: bool,
        act: Act,
    ) -> Result<Self> {
        let (ph, pw) = same_padding(k, k, 1);
        Self::new(
            ps,
            name,
            cin,
            cout,
            (k, k),
            Conv2dOptions::default().padding(ph, pw).groups(groups),
            norm,
            act,
        )
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut y = self.conv.forward(cx, x)?;
        if let Some(bn) = &self.bn {
            y = bn.forward(cx, y)?;
        }
        Ok(self.act.apply(cx, y))
    }
}

/// Layer normalization over the last (embedding) axis of N×L×d tokens.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.constant(format!("{name}.gamma"), &[d], 1.0, ParamKind::NormScale)?,
            beta: ps.constant(format!("{name}.beta"), &[d], 0.0, ParamKind::NormShift)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        cx.g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Token-wise affine map N×L×din → N×L×dout.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: ps.weight(format!("{name}.weight"), &[din, dout], din)?,
            bias: ps.constant(format!("{name}.bias"), &[1, 1, dout], 0.0, ParamKind::Bias)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = cx.param(self.bias);
        let y = cx.g.matmul(x, w)?;
        cx.g.add(y, b)
    }
}

/// Folds the statistics of a training forward into the running buffers.
pub fn apply_stat_updates<T: Scalar>(ps: &mut ParamStore<T>, updates: Vec<StatUpdate<T>>) {
    let m = T::of(BN_MOMENTUM);
    for u in updates {
        for (r, b) in ps
            .buffer_value_mut(u.mean)
            .data_mut()
            .iter_mut()
            .zip(&u.batch_mean)
        {
            *r = (T::one() - m) * *r + m * *b;
        }
        for (r, b) in ps
            .buffer_value_mut(u.var)
            .data_mut()
            .iter_mut()
            .zip(&u.batch_var)
        {
            *r = (T::one() - m) * *r + m * *b;
        }
    }
}
