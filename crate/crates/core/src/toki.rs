//! State-space token interpolation (TOKI).
//!
//! Masked positions of a 1D token sequence are filled from the two visible
//! tokens that bracket them. For a gap of `Q` masked positions between `L`
//! and `R`, the blended inputs
//!
//! ```text
//! s_n = (Q+2-n)/(Q+2) * L + n/(Q+2) * R
//! ```
//!
//! are pushed through a diagonal state-space recurrence with
//! `A_bar = exp(a)`, `B_bar = exp(a) / a` and identity read-out:
//!
//! ```text
//! z_j = sum_{n=0..j} A_bar^(j-n) * B_bar * s_n,    j = 1..Q
//! ```
//!
//! `a` is the single learnable vector (one entry per channel, negative).
//! Visible tokens are never altered.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum TokiVariant {
    /// Blend varies inside the state-space sum.
    #[default]
    Eq8,
    /// One blend `V_j` per output position, summed against geometric powers
    /// of `A_bar` and scaled by `1/a`.
    Alg3,
}

impl TokiVariant {
    pub fn name(self) -> &'static str {
        match self {
            TokiVariant::Eq8 => "eq8",
            TokiVariant::Alg3 => "alg3",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "eq8" => Some(TokiVariant::Eq8),
            "alg3" => Some(TokiVariant::Alg3),
            _ => None,
        }
    }
}

pub const DEFAULT_INIT: f64 = -1.0;

/// Validated interpolation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TokiParams<T> {
    a_prime: Vec<T>,
    variant: TokiVariant,
}

pub(crate) fn check_negative<T: Real>(a: &[T]) -> Result<()> {
    match a.iter().enumerate().find(|(_, v)| !(**v < T::zero())) {
        Some((index, v)) => Err(Error::NonNegativeState { index, value: v.as_f64() }),
        None => Ok(()),
    }
}

impl<T: Real> TokiParams<T> {
    pub fn new(a_prime: Vec<T>, variant: TokiVariant) -> Result<Self> {
        if a_prime.is_empty() {
            return Err(Error::invalid("toki", "channel dimension must be at least 1"));
        }
        check_negative(&a_prime)?;
        Ok(Self { a_prime, variant })
    }

    pub fn constant(channels: usize, init: T, variant: TokiVariant) -> Result<Self> {
        Self::new(vec![init; channels], variant)
    }

    pub fn a_prime(&self) -> &[T] {
        &self.a_prime
    }

    pub fn channels(&self) -> usize {
        self.a_prime.len()
    }

    pub fn variant(&self) -> TokiVariant {
        self.variant
    }
}

/// Two visible endpoint tokens and the number of masked positions between.
#[derive(Clone, Copy, Debug)]
pub struct GapSpec<'a, T> {
    pub left: &'a [T],
    pub right: &'a [T],
    pub q: usize,
}

/// `((Q+2-n)/(Q+2), n/(Q+2))`.
pub fn blend_weights<T: Real>(q: usize, n: usize) -> (T, T) {
    let total = T::from_usize(q + 2);
    let right = T::from_usize(n) / total;
    (T::one() - right, right)
}

/// Per-position coefficients of one channel: `z_j = alpha_j L + beta_j R`,
/// with their derivatives in `a`.
#[derive(Clone, Copy, Debug, Default)]
struct Coef<T> {
    alpha: T,
    beta: T,
    d_alpha: T,
    d_beta: T,
}

/// Coefficients for `j = 1..=q`, computed with O(q) running sums.
fn gap_coefficients<T: Real>(q: usize, a: T, variant: TokiVariant, out: &mut Vec<Coef<T>>) {
    out.clear();
    let a_bar = a.exp();
    match variant {
        TokiVariant::Eq8 => {
            let b_bar = a_bar / a;
            let d_b_bar = b_bar * (T::one() - T::one() / a);
            // s: sum A^(j-n) w(n); m: sum (j-n) A^(j-n) w(n)
            let (w_l0, w_r0) = blend_weights::<T>(q, 0);
            let (mut s_l, mut s_r) = (w_l0, w_r0);
            let (mut m_l, mut m_r) = (T::zero(), T::zero());
            for j in 1..=q {
                let (w_l, w_r) = blend_weights::<T>(q, j);
                m_l = a_bar * (m_l + s_l);
                m_r = a_bar * (m_r + s_r);
                s_l = a_bar * s_l + w_l;
                s_r = a_bar * s_r + w_r;
                out.push(Coef {
                    alpha: b_bar * s_l,
                    beta: b_bar * s_r,
                    d_alpha: d_b_bar * s_l + b_bar * m_l,
                    d_beta: d_b_bar * s_r + b_bar * m_r,
                });
            }
        }
        TokiVariant::Alg3 => {
            // g = sum_{k=0..j} A^k, m = sum k A^k
            let (mut g, mut m) = (T::one(), T::zero());
            for j in 1..=q {
                m = a_bar * (m + g);
                g = a_bar * g + T::one();
                let c = g / a;
                let d_c = m / a - g / (a * a);
                let (w_l, w_r) = blend_weights::<T>(q, j);
                out.push(Coef {
                    alpha: c * w_l,
                    beta: c * w_r,
                    d_alpha: d_c * w_l,
                    d_beta: d_c * w_r,
                });
            }
        }
    }
}

/// Interpolated tokens `z_1..z_Q` for one gap (empty when `Q = 0`).
pub fn interpolate_gap<T: Real>(params: &TokiParams<T>, gap: GapSpec<'_, T>) -> Result<Vec<Vec<T>>> {
    let ch = params.channels();
    if gap.left.len() != ch || gap.right.len() != ch {
        return Err(Error::shape("interpolate_gap", &[ch], &[gap.left.len(), gap.right.len()]));
    }
    let mut out = vec![vec![T::zero(); ch]; gap.q];
    let mut coefs = Vec::with_capacity(gap.q);
    for c in 0..ch {
        gap_coefficients(gap.q, params.a_prime[c], params.variant, &mut coefs);
        for (row, k) in out.iter_mut().zip(&coefs) {
            row[c] = k.alpha * gap.left[c] + k.beta * gap.right[c];
        }
    }
    Ok(out)
}

/// One run of masked positions in a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Gap {
    /// Visible-token row supplying the left endpoint.
    pub left: usize,
    /// Visible-token row supplying the right endpoint.
    pub right: usize,
    /// First masked sequence position.
    pub start: usize,
    pub len: usize,
}

/// Where every visible token and every gap sits in the dense sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FillPlan {
    pub positions: Vec<usize>,
    pub gaps: Vec<Gap>,
    pub total_len: usize,
}

impl FillPlan {
    /// `positions` are the sequence indices of the visible tokens, strictly
    /// increasing. Leading and trailing masked runs use a duplicated endpoint.
    pub fn new(positions: &[usize], total_len: usize) -> Result<Self> {
        let (&first, &last) = match (positions.first(), positions.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(Error::NothingVisible("fill_sequence")),
        };
        if last >= total_len {
            return Err(Error::invalid("fill_sequence", "visible position outside the sequence"));
        }
        if positions.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("fill_sequence", "visible positions must be strictly increasing"));
        }
        let mut gaps = Vec::new();
        if first > 0 {
            gaps.push(Gap { left: 0, right: 0, start: 0, len: first });
        }
        for (k, w) in positions.windows(2).enumerate() {
            if w[1] > w[0] + 1 {
                gaps.push(Gap { left: k, right: k + 1, start: w[0] + 1, len: w[1] - w[0] - 1 });
            }
        }
        if last + 1 < total_len {
            let k = positions.len() - 1;
            gaps.push(Gap { left: k, right: k, start: last + 1, len: total_len - last - 1 });
        }
        Ok(Self { positions: positions.to_vec(), gaps, total_len })
    }
}

/// Dense `[total_len, C]` sequence from visible rows `[K, C]`.
pub fn fill_forward<T: Real>(tokens: &[T], a_prime: &[T], variant: TokiVariant, plan: &FillPlan) -> Vec<T> {
    let ch = a_prime.len();
    let mut out = vec![T::zero(); plan.total_len * ch];
    for (k, &p) in plan.positions.iter().enumerate() {
        out[p * ch..(p + 1) * ch].copy_from_slice(&tokens[k * ch..(k + 1) * ch]);
    }
    let mut coefs = Vec::new();
    for gap in &plan.gaps {
        for c in 0..ch {
            gap_coefficients(gap.len, a_prime[c], variant, &mut coefs);
            let l = tokens[gap.left * ch + c];
            let r = tokens[gap.right * ch + c];
            for (j, k) in coefs.iter().enumerate() {
                out[(gap.start + j) * ch + c] = k.alpha * l + k.beta * r;
            }
        }
    }
    out
}

/// Gradients with respect to the visible rows and `a_prime`.
pub fn fill_backward<T: Real>(
    grad: &[T],
    tokens: &[T],
    a_prime: &[T],
    variant: TokiVariant,
    plan: &FillPlan,
) -> (Vec<T>, Vec<T>) {
    let ch = a_prime.len();
    let mut g_tokens = vec![T::zero(); tokens.len()];
    let mut g_a = vec![T::zero(); ch];
    for (k, &p) in plan.positions.iter().enumerate() {
        for c in 0..ch {
            g_tokens[k * ch + c] += grad[p * ch + c];
        }
    }
    let mut coefs = Vec::new();
    for gap in &plan.gaps {
        for c in 0..ch {
            gap_coefficients(gap.len, a_prime[c], variant, &mut coefs);
            let l = tokens[gap.left * ch + c];
            let r = tokens[gap.right * ch + c];
            let (mut gl, mut gr, mut ga) = (T::zero(), T::zero(), T::zero());
            for (j, k) in coefs.iter().enumerate() {
                let g = grad[(gap.start + j) * ch + c];
                gl += k.alpha * g;
                gr += k.beta * g;
                ga += g * (k.d_alpha * l + k.d_beta * r);
            }
            g_tokens[gap.left * ch + c] += gl;
            g_tokens[gap.right * ch + c] += gr;
            g_a[c] += ga;
        }
    }
    (g_tokens, g_a)
}

/// Fills every masked position of a sequence of `total_len` tokens.
///
/// `tokens` holds the visible rows `[K, C]` in sequence order and
/// `positions` their sequence indices.
pub fn fill_sequence<T: Real>(
    params: &TokiParams<T>,
    tokens: &[T],
    positions: &[usize],
    total_len: usize,
) -> Result<Vec<T>> {
    let ch = params.channels();
    if tokens.len() != positions.len() * ch {
        return Err(Error::shape("fill_sequence", &[positions.len(), ch], &[tokens.len()]));
    }
    let plan = FillPlan::new(positions, total_len)?;
    Ok(fill_forward(tokens, &params.a_prime, params.variant, &plan))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn q1_scalar_fixture_eq8() {
        // hand evaluation: a = -1, L = 1, R = 2, Q = 1
        // s0 = 1, s1 = 4/3; A_bar = e^-1, B_bar = -e^-1
        // z1 = A_bar B_bar s0 + B_bar s1 = -e^-2 - (4/3) e^-1
        let p = TokiParams::new(vec![-1.0f64], TokiVariant::Eq8).unwrap();
        let z = interpolate_gap(&p, GapSpec { left: &[1.0], right: &[2.0], q: 1 }).unwrap();
        assert_eq!(z.len(), 1);
        assert!((z[0][0] - (-0.6258412047985358)).abs() < 1e-15, "{}", z[0][0]);
    }

    #[test]
    fn q1_scalar_fixture_alg3() {
        // V1 = (2/3) L + (1/3) R = 4/3; z1 = (1 + e^-1) / a * V1
        let p = TokiParams::new(vec![-1.0f64], TokiVariant::Alg3).unwrap();
        let z = interpolate_gap(&p, GapSpec { left: &[1.0], right: &[2.0], q: 1 }).unwrap();
        assert!((z[0][0] - (-1.8238392548952564)).abs() < 1e-15, "{}", z[0][0]);
    }

    #[test]
    fn q0_is_empty() {
        let p = TokiParams::constant(3, -1.0f64, TokiVariant::Eq8).unwrap();
        let z = interpolate_gap(&p, GapSpec { left: &[1.0; 3], right: &[2.0; 3], q: 0 }).unwrap();
        assert!(z.is_empty());
    }

    #[test]
    fn rejects_nonnegative_parameters() {
        assert!(TokiParams::new(vec![-1.0f64, 0.0], TokiVariant::Eq8).is_err());
        assert!(TokiParams::new(vec![0.5f64], TokiVariant::Alg3).is_err());
        assert!(TokiParams::<f64>::new(vec![], TokiVariant::Eq8).is_err());
    }

    #[test]
    fn blend_weights_partition_unity() {
        for q in 0..12 {
            for n in 0..=q + 2 {
                let (l, r) = blend_weights::<f64>(q, n);
                assert!((0.0..=1.0).contains(&l) && (0.0..=1.0).contains(&r));
                assert_eq!(l + r, 1.0);
            }
        }
    }

    #[test]
    fn strongly_negative_parameter_decays() {
        let p = TokiParams::new(vec![-20.0f64], TokiVariant::Eq8).unwrap();
        let z = interpolate_gap(&p, GapSpec { left: &[1.0], right: &[-3.0], q: 9 }).unwrap();
        assert!(z.iter().all(|v| v[0].abs() < 1e-6));
    }

    #[test]
    fn running_sums_match_direct_sum() {
        let q = 6;
        let a = -0.7f64;
        let (a_bar, b_bar) = (a.exp(), a.exp() / a);
        let p = TokiParams::new(vec![a], TokiVariant::Eq8).unwrap();
        let z = interpolate_gap(&p, GapSpec { left: &[0.3], right: &[1.9], q }).unwrap();
        for j in 1..=q {
            let direct: f64 = (0..=j)
                .map(|n| {
                    let (wl, wr) = blend_weights::<f64>(q, n);
                    a_bar.powi((j - n) as i32) * b_bar * (wl * 0.3 + wr * 1.9)
                })
                .sum();
            assert!((z[j - 1][0] - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn plan_covers_prefix_gaps_and_suffix() {
        let plan = FillPlan::new(&[2, 3, 6], 9).unwrap();
        assert_eq!(
            plan.gaps,
            vec![
                Gap { left: 0, right: 0, start: 0, len: 2 },
                Gap { left: 1, right: 2, start: 4, len: 2 },
                Gap { left: 2, right: 2, start: 7, len: 2 },
            ]
        );
        assert!(FillPlan::new(&[], 4).is_err());
        assert!(FillPlan::new(&[1, 1], 4).is_err());
        assert!(FillPlan::new(&[4], 4).is_err());
    }

    #[test]
    fn fully_visible_is_unchanged() {
        let p = TokiParams::constant(2, -1.0f64, TokiVariant::Eq8).unwrap();
        let toks = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        assert_eq!(fill_sequence(&p, &toks, &[0, 1, 2], 3).unwrap(), toks.to_vec());
    }

    #[test]
    fn gap_fill_matches_interpolate_gap() {
        let p = TokiParams::constant(1, -0.5f64, TokiVariant::Eq8).unwrap();
        let out = fill_sequence(&p, &[1.0, 4.0], &[0, 3], 4).unwrap();
        let z = interpolate_gap(&p, GapSpec { left: &[1.0], right: &[4.0], q: 2 }).unwrap();
        assert_eq!(out, vec![1.0, z[0][0], z[1][0], 4.0]);
    }
}
