//! Selective state-space (Mamba) block over a token sequence.
//!
//! ```text
//! u     = SiLU(causal_conv(x W_in + b_in))
//! delta = softplus(u W_dt_down W_dt_up + b_dt)
//! B, C  = u W_B, u W_C
//! y     = selective_scan(u, delta, -exp(A_log), B, C)
//! out   = x + (y * SiLU(x W_gate + b_gate)) W_out + b_out
//! ```

use alloc::format;
use alloc::string::String;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, uniform, Bindings, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaConfig {
    pub model_dim: usize,
    pub state_dim: usize,
    /// Inner width is `expand * model_dim`.
    pub expand: usize,
    /// Depthwise causal convolution width; `None` disables the convolution.
    pub conv_width: Option<usize>,
}

impl MambaConfig {
    pub fn inner_dim(&self) -> usize {
        self.expand * self.model_dim
    }

    /// Rank of the factored delta projection.
    pub fn dt_rank(&self) -> usize {
        self.model_dim.div_ceil(16).max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MambaBlockParams {
    pub config: MambaConfig,
    pub in_w: ParamId,
    pub in_b: ParamId,
    pub conv: Option<(ParamId, ParamId)>,
    pub dt_down: ParamId,
    pub dt_up: ParamId,
    pub dt_bias: ParamId,
    pub b_proj: ParamId,
    pub c_proj: ParamId,
    /// `A = -exp(A_log)`, `[inner, N]`.
    pub a_log: ParamId,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// Softplus inverse, for setting the delta bias from a target step size.
fn inv_softplus(y: f64) -> f64 {
    use num_traits::Float;
    y + Float::ln(-Float::exp_m1(-y))
}

impl MambaBlockParams {
    /// Registers a freshly initialized block under `prefix`.
    pub fn init<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, config: MambaConfig, rng: &mut R) -> Result<Self> {
        let (d, e, n, r) = (config.model_dim, config.inner_dim(), config.state_dim, config.dt_rank());
        if d == 0 || e == 0 || n == 0 {
            return Err(Error::invalid("mamba_block", "dimensions must be positive"));
        }
        let name = |s: &str| -> String { format!("{prefix}.{s}") };
        let in_w = store.add(name("in_proj.weight"), fan_in_uniform(rng, &[d, e], d));
        let in_b = store.add(name("in_proj.bias"), Tensor::zeros([e]));
        let conv = match config.conv_width {
            Some(0) => return Err(Error::invalid("mamba_block", "conv width must be positive")),
            Some(k) => Some((
                store.add(name("conv.weight"), fan_in_uniform(rng, &[e, k], k)),
                store.add(name("conv.bias"), Tensor::zeros([e])),
            )),
            None => None,
        };
        let dt_down = store.add(name("dt_proj.down"), fan_in_uniform(rng, &[e, r], e));
        let dt_up = store.add(name("dt_proj.up"), fan_in_uniform(rng, &[r, e], r));
        let (lo, hi) = (num_traits::Float::ln(0.01f64), num_traits::Float::ln(0.1f64));
        let dt_bias = store.add(
            name("dt_proj.bias"),
            Tensor::from_fn([e], |_| T::lit(inv_softplus(num_traits::Float::exp(rng.gen_range(lo..hi))))),
        );
        let b_proj = store.add(name("b_proj.weight"), fan_in_uniform(rng, &[e, n], e));
        let c_proj = store.add(name("c_proj.weight"), fan_in_uniform(rng, &[e, n], e));
        let a_log = store.add(name("a_log"), Tensor::from_fn([e, n], |i| T::lit(num_traits::Float::ln((i % n) as f64 + 1.0))));
        let gate_w = store.add(name("gate_proj.weight"), fan_in_uniform(rng, &[d, e], d));
        let gate_b = store.add(name("gate_proj.bias"), Tensor::zeros([e]));
        let out_w = store.add(name("out_proj.weight"), uniform(rng, &[e, d], 1.0 / num_traits::Float::sqrt(e as f64)));
        let out_b = store.add(name("out_proj.bias"), Tensor::zeros([d]));
        Ok(Self { config, in_w, in_b, conv, dt_down, dt_up, dt_bias, b_proj, c_proj, a_log, gate_w, gate_b, out_w, out_b })
    }
}

/// Applies the block to `x: [K, model_dim]`.
pub fn mamba_block<T: Real>(tape: &mut Tape<T>, p: &Bindings, params: &MambaBlockParams, x: Var) -> Result<Var> {
    let (k, d) = match *tape.shape(x) {
        [k, d] => (k, d),
        _ => return Err(Error::invalid("mamba_block", "expected [K, D] tokens")),
    };
    if k == 0 {
        return Err(Error::invalid("mamba_block", "empty sequence"));
    }
    if d != params.config.model_dim {
        return Err(Error::shape("mamba_block", &[k, d], &[k, params.config.model_dim]));
    }
    let mut u = tape.linear(x, p[params.in_w], Some(p[params.in_b]))?;
    if let Some((w, b)) = params.conv {
        u = tape.causal_conv1d(u, p[w], p[b])?;
    }
    let u = tape.silu(u);
    let low = tape.matmul(u, p[params.dt_down])?;
    let dt = tape.linear(low, p[params.dt_up], Some(p[params.dt_bias]))?;
    let delta = tape.softplus(dt);
    let b = tape.matmul(u, p[params.b_proj])?;
    let c = tape.matmul(u, p[params.c_proj])?;
    let a = tape.exp(p[params.a_log]);
    let a = tape.scale(a, -T::one());
    let y = tape.selective_scan(u, delta, a, b, c)?;
    let g = tape.linear(x, p[params.gate_w], Some(p[params.gate_b]))?;
    let g = tape.silu(g);
    let y = tape.mul(y, g)?;
    let out = tape.linear(y, p[params.out_w], Some(p[params.out_b]))?;
    tape.add(x, out)
}
