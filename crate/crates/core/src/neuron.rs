//! Leaky integrate-and-fire neurons over discrete timesteps.
//!
//! One timestep is three recorded operations:
//!
//! ```text
//! u_pre[t] = tau * u[t-1] + c[t]          (charge, u[0] = 0)
//! o[t]     = 1 if u_pre[t] > v_th else 0  (fire, surrogate backward)
//! u[t]     = u_pre[t] * (1 - o[t])        (hard reset)
//! ```
//!
//! Because the reset multiplies by `1 - o[t]`, the backward pass through the
//! membrane recurrence picks up a `-u_pre * surrogate` term unless
//! [`NeuronConfig::reset_grad`] is off, in which case the spike is treated as
//! a constant inside the reset.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BackwardCtx, Graph, OpKind, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeuronConfig {
    /// Leak factor in `(0, 1]`; `1` gives an integrate-and-fire neuron.
    pub tau: f64,
    pub v_th: f64,
    pub reset_grad: bool,
    /// Cuts the `u[t-1] -> u_pre[t]` path in backward.
    pub detach_temporal: bool,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        NeuronConfig {
            tau: 0.5,
            v_th: 1.0,
            reset_grad: true,
            detach_temporal: false,
        }
    }
}

impl NeuronConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if !(self.v_th > 0.0) || !self.v_th.is_finite() {
            return Err(Error::Config(format!("v_th must be positive, got {}", self.v_th)));
        }
        Ok(())
    }
}

/// Which bounded stand-in derivative backs the firing step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SurrogateSpec {
    /// `gamma * max(0, 1 - |u/v_th - 1|)`
    Triangular {
        #[serde(default = "one")]
        gamma: f64,
    },
    /// `(1/a) * [|u - v_th| < a/2]`
    Rectangular {
        #[serde(default = "one")]
        a: f64,
    },
    /// `k * (1 - tanh(u - v_th))^2`
    TanhLike {
        #[serde(default = "one")]
        k: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        SurrogateSpec::Triangular { gamma: 1.0 }
    }
}

impl SurrogateSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SurrogateSpec::Rectangular { a } if !(a > 0.0) => {
                Err(Error::Config(format!("rectangular width a must be positive, got {a}")))
            }
            SurrogateSpec::Triangular { gamma: p } | SurrogateSpec::TanhLike { k: p }
                if !p.is_finite() =>
            {
                Err(Error::Config(format!("surrogate parameter must be finite, got {p}")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SurrogateSpec::Triangular { .. } => "triangular",
            SurrogateSpec::Rectangular { .. } => "rectangular",
            SurrogateSpec::TanhLike { .. } => "tanh_like",
        }
    }

    /// Surrogate derivative of the spike with respect to `u_pre`.
    pub fn grad(&self, u_pre: f64, v_th: f64) -> f64 {
        match *self {
            SurrogateSpec::Triangular { gamma } => {
                gamma * (1.0 - (u_pre / v_th - 1.0).abs()).max(0.0)
            }
            SurrogateSpec::Rectangular { a } => {
                if (u_pre - v_th).abs() < a / 2.0 {
                    1.0 / a
                } else {
                    0.0
                }
            }
            SurrogateSpec::TanhLike { k } => {
                let d = 1.0 - (u_pre - v_th).tanh();
                k * d * d
            }
        }
    }

    /// Antiderivative of [`SurrogateSpec::grad`].
    ///
    /// Triangular and rectangular are zero far below threshold. The tanh-like
    /// surrogate tends to `4k` below threshold, so its antiderivative has no
    /// finite lower limit; it is anchored at zero on the threshold instead.
    pub fn antiderivative(&self, u_pre: f64, v_th: f64) -> f64 {
        match *self {
            SurrogateSpec::Triangular { gamma } => {
                let r = u_pre / v_th;
                let unit = if r <= 0.0 {
                    0.0
                } else if r <= 1.0 {
                    0.5 * r * r
                } else if r < 2.0 {
                    1.0 - 0.5 * (2.0 - r) * (2.0 - r)
                } else {
                    1.0
                };
                gamma * v_th * unit
            }
            SurrogateSpec::Rectangular { a } => (u_pre - v_th + a / 2.0).clamp(0.0, a) / a,
            SurrogateSpec::TanhLike { k } => {
                let x = u_pre - v_th;
                let ln_cosh = x.abs() + (-2.0 * x.abs()).exp().ln_1p() - std::f64::consts::LN_2;
                k * (2.0 * x - 2.0 * ln_cosh - x.tanh())
            }
        }
    }
}

/// Forward behaviour of the firing step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FireMode {
    /// Binary Heaviside spikes with surrogate backward.
    #[default]
    Spike,
    /// Smooth antiderivative of the surrogate; makes the network a genuinely
    /// differentiable function for finite-difference validation.
    Proxy,
}

/// Membrane potentials of one layer at timestep `t` (1-based).
#[derive(Clone, Copy, Debug)]
pub struct MembraneState {
    pub u_pre: Var,
    pub u: Var,
    pub t: usize,
}

/// Elementwise surrogate derivative.
pub fn surrogate_grad(u_pre: &Tensor, cfg: &NeuronConfig, sg: &SurrogateSpec) -> Tensor {
    u_pre.map(|u| sg.grad(u, cfg.v_th))
}

/// `u_pre = tau * u + c`; `u = None` stands for the zero initial potential.
pub fn lif_charge(g: &mut Graph, u: Option<Var>, c: Var, cfg: &NeuronConfig) -> Result<Var> {
    let tau = cfg.tau;
    let Some(u) = u else {
        let value = g.value(c).clone();
        return Ok(g.push(
            OpKind::Charge,
            value,
            vec![c],
            Box::new(|ctx: &BackwardCtx<'_>| vec![Some(ctx.grad.to_vec())]),
        ));
    };
    g.value(u).check_same_shape(g.value(c), "lif_charge")?;
    let value = Tensor::from_parts(
        g.shape(c).to_vec(),
        g.value(u)
            .data()
            .iter()
            .zip(g.value(c).data())
            .map(|(u, c)| tau * u + c)
            .collect(),
    );
    Ok(g.push(
        OpKind::Charge,
        value,
        vec![u, c],
        Box::new(move |ctx: &BackwardCtx<'_>| {
            vec![
                ctx.needs[0].then(|| ctx.grad.iter().map(|d| tau * d).collect()),
                Some(ctx.grad.to_vec()),
            ]
        }),
    ))
}

/// Heaviside spike `u_pre > v_th` with the surrogate in backward.
pub fn fire(g: &mut Graph, u_pre: Var, cfg: &NeuronConfig, sg: &SurrogateSpec) -> Var {
    let sg = *sg;
    let v_th = cfg.v_th;
    fire_with(g, u_pre, v_th, Arc::new(move |u| sg.grad(u, v_th)))
}

/// [`fire`] with an arbitrary backward derivative.
pub(crate) fn fire_with(
    g: &mut Graph,
    u_pre: Var,
    v_th: f64,
    derivative: Arc<dyn Fn(f64) -> f64>,
) -> Var {
    let value = g.value(u_pre).map(|u| if u > v_th { 1.0 } else { 0.0 });
    g.push(
        OpKind::Fire,
        value,
        vec![u_pre],
        Box::new(move |ctx: &BackwardCtx<'_>| {
            vec![Some(
                ctx.grad
                    .iter()
                    .zip(ctx.inputs[0].data())
                    .map(|(d, &u)| d * derivative(u))
                    .collect(),
            )]
        }),
    )
}

/// Smooth stand-in for [`fire`] whose true derivative is the surrogate.
pub fn proxy_fire(g: &mut Graph, u_pre: Var, cfg: &NeuronConfig, sg: &SurrogateSpec) -> Var {
    let sg = *sg;
    let v_th = cfg.v_th;
    proxy_fire_with(
        g,
        u_pre,
        move |u| sg.antiderivative(u, v_th),
        Arc::new(move |u| sg.grad(u, v_th)),
    )
}

/// [`proxy_fire`] with an arbitrary forward and backward derivative.
pub(crate) fn proxy_fire_with(
    g: &mut Graph,
    u_pre: Var,
    forward: impl Fn(f64) -> f64,
    derivative: Arc<dyn Fn(f64) -> f64>,
) -> Var {
    let value = g.value(u_pre).map(forward);
    g.push(
        OpKind::ProxyFire,
        value,
        vec![u_pre],
        Box::new(move |ctx: &BackwardCtx<'_>| {
            vec![Some(
                ctx.grad
                    .iter()
                    .zip(ctx.inputs[0].data())
                    .map(|(d, &u)| d * derivative(u))
                    .collect(),
            )]
        }),
    )
}

/// `u = u_pre * (1 - o)`.
pub fn lif_reset(g: &mut Graph, u_pre: Var, o: Var, cfg: &NeuronConfig) -> Result<Var> {
    g.value(u_pre).check_same_shape(g.value(o), "lif_reset")?;
    let value = Tensor::from_parts(
        g.shape(u_pre).to_vec(),
        g.value(u_pre)
            .data()
            .iter()
            .zip(g.value(o).data())
            .map(|(u, o)| u * (1.0 - o))
            .collect(),
    );
    let through_spike = cfg.reset_grad;
    Ok(g.push(
        OpKind::Reset,
        value,
        vec![u_pre, o],
        Box::new(move |ctx: &BackwardCtx<'_>| {
            let (u, o) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let du = ctx
                .grad
                .iter()
                .zip(o)
                .map(|(d, o)| d * (1.0 - o))
                .collect();
            let dout = (through_spike && ctx.needs[1])
                .then(|| ctx.grad.iter().zip(u).map(|(d, u)| -d * u).collect());
            vec![Some(du), dout]
        }),
    ))
}

fn fire_by_mode(
    g: &mut Graph,
    u_pre: Var,
    cfg: &NeuronConfig,
    sg: &SurrogateSpec,
    mode: FireMode,
) -> Var {
    match mode {
        FireMode::Spike => fire(g, u_pre, cfg, sg),
        FireMode::Proxy => proxy_fire(g, u_pre, cfg, sg),
    }
}

/// Runs charge, fire and reset over `inputs` (one current per timestep) and
/// returns the membrane state and spike output of every step.
pub fn lif_unroll_states(
    g: &mut Graph,
    inputs: &[Var],
    cfg: &NeuronConfig,
    sg: &SurrogateSpec,
    mode: FireMode,
) -> Result<Vec<(MembraneState, Var)>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Input("lif_unroll needs at least one timestep".into()))?;
    let shape = g.shape(*first).to_vec();
    let mut u: Option<Var> = None;
    let mut out = Vec::with_capacity(inputs.len());
    for (t, &c) in inputs.iter().enumerate() {
        if g.shape(c) != shape.as_slice() {
            return Err(Error::Dimension {
                op: "lif_unroll",
                lhs: shape,
                rhs: g.shape(c).to_vec(),
            });
        }
        let carried = match u {
            Some(prev) if cfg.detach_temporal => Some(g.detach(prev)),
            other => other,
        };
        let u_pre = lif_charge(g, carried, c, cfg)?;
        let o = fire_by_mode(g, u_pre, cfg, sg, mode);
        let u_next = lif_reset(g, u_pre, o, cfg)?;
        out.push((
            MembraneState {
                u_pre,
                u: u_next,
                t: t + 1,
            },
            o,
        ));
        u = Some(u_next);
    }
    Ok(out)
}

/// Spike trains for a sequence of input currents.
pub fn lif_unroll(
    g: &mut Graph,
    inputs: &[Var],
    cfg: &NeuronConfig,
    sg: &SurrogateSpec,
    mode: FireMode,
) -> Result<Vec<Var>> {
    Ok(lif_unroll_states(g, inputs, cfg, sg, mode)?
        .into_iter()
        .map(|(_, o)| o)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;

    fn scalar(g: &mut Graph, v: f64) -> Var {
        g.leaf(Tensor::scalar(v))
    }

    const TRI: SurrogateSpec = SurrogateSpec::Triangular { gamma: 1.0 };

    #[test]
    fn charge_examples() {
        let cfg = NeuronConfig::default();
        let mut g = Graph::new();
        let (u, c) = (scalar(&mut g, 0.6), scalar(&mut g, 0.8));
        let up = lif_charge(&mut g, Some(u), c, &cfg).unwrap();
        assert!((g.value(up).data()[0] - 1.1).abs() < 1e-15);

        let (u, c) = (scalar(&mut g, 0.0), scalar(&mut g, 0.0));
        let up = lif_charge(&mut g, Some(u), c, &cfg).unwrap();
        assert_eq!(g.value(up).data()[0], 0.0);

        let if_cfg = NeuronConfig { tau: 1.0, ..cfg };
        let (u, c) = (scalar(&mut g, 0.3), scalar(&mut g, 0.3));
        let up = lif_charge(&mut g, Some(u), c, &if_cfg).unwrap();
        assert!((g.value(up).data()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn fire_uses_strict_threshold() {
        let cfg = NeuronConfig::default();
        let mut g = Graph::new();
        let u = g.leaf(Tensor::new(vec![3], vec![1.1, 1.0, -5.0]).unwrap());
        let o = fire(&mut g, u, &cfg, &TRI);
        assert_eq!(g.value(o).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn surrogate_peaks_and_supports() {
        let rect = SurrogateSpec::Rectangular { a: 1.0 };
        let tanh = SurrogateSpec::TanhLike { k: 1.0 };
        assert_eq!(TRI.grad(1.0, 1.0), 1.0);
        assert_eq!(rect.grad(1.0, 1.0), 1.0);
        assert_eq!(tanh.grad(1.0, 1.0), 1.0);
        assert_eq!(TRI.grad(-5.0, 1.0), 0.0);
        assert_eq!(rect.grad(-5.0, 1.0), 0.0);
        assert_eq!(TRI.grad(0.0, 1.0), 0.0);
        assert_eq!(TRI.grad(2.0, 1.0), 0.0);
        assert_eq!(rect.grad(1.5, 1.0), 0.0);
    }

    #[test]
    fn reset_examples() {
        let cfg = NeuronConfig::default();
        let mut g = Graph::new();
        let u = g.leaf(Tensor::new(vec![2], vec![1.1, 0.7]).unwrap());
        let o = g.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        let r = lif_reset(&mut g, u, o, &cfg).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.7]);
    }

    #[test]
    fn triangular_proxy_integrates_hat() {
        for (u, want) in [(0.0, 0.0), (1.0, 0.5), (2.0, 1.0), (-3.0, 0.0), (9.0, 1.0)] {
            assert_eq!(TRI.antiderivative(u, 1.0), want);
        }
    }

    #[test]
    fn proxy_derivative_is_surrogate() {
        let cfg = NeuronConfig::default();
        for sg in [
            TRI,
            SurrogateSpec::Triangular { gamma: 0.7 },
            SurrogateSpec::Rectangular { a: 1.3 },
            SurrogateSpec::TanhLike { k: 0.5 },
        ] {
            for &u in &[-0.7, 0.3, 0.95, 1.0, 1.2, 1.55, 2.6] {
                let h = 1e-6;
                let fd = (sg.antiderivative(u + h, cfg.v_th) - sg.antiderivative(u - h, cfg.v_th))
                    / (2.0 * h);
                assert!((fd - sg.grad(u, cfg.v_th)).abs() < 1e-6, "{sg:?} at {u}");
            }
        }
        let mut g = Graph::new();
        let u = g.leaf(Tensor::scalar(1.0));
        let p = proxy_fire(&mut g, u, &cfg, &TRI);
        let grads = g.backward(p, &mut ParamStore::new()).unwrap();
        assert_eq!(grads.wrt(u).unwrap(), &[1.0]);
    }

    #[test]
    fn single_step_is_fire_of_input() {
        let cfg = NeuronConfig::default();
        let mut g = Graph::new();
        let c = g.leaf(Tensor::new(vec![3], vec![0.4, 1.2, 1.0]).unwrap());
        let spikes = lif_unroll(&mut g, &[c], &cfg, &TRI, FireMode::Spike).unwrap();
        assert_eq!(g.value(spikes[0]).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn constant_current_hand_trace() {
        let cfg = NeuronConfig::default();
        let mut g = Graph::new();
        let c: Vec<Var> = (0..4).map(|_| g.constant(Tensor::scalar(0.6))).collect();
        let steps = lif_unroll_states(&mut g, &c, &cfg, &TRI, FireMode::Spike).unwrap();
        let u_pre: Vec<f64> = steps.iter().map(|(s, _)| g.value(s.u_pre).data()[0]).collect();
        let o: Vec<f64> = steps.iter().map(|(_, o)| g.value(*o).data()[0]).collect();
        let want = [0.6, 0.9, 1.05, 0.6];
        for (a, b) in u_pre.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{u_pre:?}");
        }
        assert_eq!(o, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn empty_unroll_is_an_error() {
        let mut g = Graph::new();
        let r = lif_unroll(&mut g, &[], &NeuronConfig::default(), &TRI, FireMode::Spike);
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn config_validation() {
        assert!(NeuronConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(NeuronConfig { tau: 1.0, ..Default::default() }.validate().is_ok());
        assert!(NeuronConfig { v_th: 0.0, ..Default::default() }.validate().is_err());
        assert!(SurrogateSpec::Rectangular { a: 0.0 }.validate().is_err());
    }

    #[test]
    fn surrogate_json_form() {
        let s: SurrogateSpec = serde_json::from_str(r#"{"kind":"rectangular","a":0.5}"#).unwrap();
        assert_eq!(s, SurrogateSpec::Rectangular { a: 0.5 });
        let s: SurrogateSpec = serde_json::from_str(r#"{"kind":"tanh_like"}"#).unwrap();
        assert_eq!(s, SurrogateSpec::TanhLike { k: 1.0 });
        assert!(serde_json::from_str::<SurrogateSpec>(r#"{"kind":"triangular","a":1}"#).is_err());
        assert_eq!(
            serde_json::to_string(&TRI).unwrap(),
            r#"{"kind":"triangular","gamma":1.0}"#
        );
    }
}
