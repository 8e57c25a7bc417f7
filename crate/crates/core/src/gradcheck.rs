//! Central finite-difference gradient checking.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::masking::MaskPyramid;
use crate::model::HybridModel;
use crate::params::ParamId;
use crate::tensor::Tensor;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Magnitudes below this are treated as absolute, so entries whose true
/// gradient is zero are not judged by the finite-difference noise floor.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Settings for [`check_model`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    /// Entries sampled per parameter tensor (all of them when smaller).
    pub entries_per_group: usize,
    pub h: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Negative control: perturb the analytic gradient of this group.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { entries_per_group: 4, h: 1e-5, tolerance: 1e-4, seed: 0, corrupt: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

impl GroupReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed(self.tolerance))
    }

    pub fn failures(&self) -> impl Iterator<Item = &GroupReport> {
        self.groups.iter().filter(move |g| !g.passed(self.tolerance))
    }
}

/// Compares the model's masked-MSE gradient against central differences for
/// a sample of entries of every named parameter tensor.
pub fn check_model(
    model: &mut HybridModel<f64>,
    volume: &Tensor<f64>,
    pyramid: &MaskPyramid,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let (_, mut grads) = model.loss_and_grads(volume, pyramid)?;
    let ids: Vec<ParamId> = model.params().ids().collect();
    if let Some(name) = &opts.corrupt {
        let id = model
            .params()
            .find(name)
            .ok_or_else(|| Error::invalid("gradcheck", format!("no parameter group {name:?}")))?;
        for g in &mut grads[id.index()] {
            *g = *g * 1.5 + 1e-3;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut groups = Vec::with_capacity(ids.len());
    for id in ids {
        let n = model.params().get(id).numel();
        let picks = sample(&mut rng, n, opts.entries_per_group.min(n)).into_vec();
        let mut max_err: f64 = 0.0;
        for &k in &picks {
            let orig = model.params().get(id).data()[k];
            let at = |v: f64, m: &mut HybridModel<f64>| -> Result<f64> {
                m.params_mut().get_mut(id).data_mut()[k] = v;
                m.loss(volume, pyramid)
            };
            let up = at(orig + opts.h, model)?;
            let down = at(orig - opts.h, model)?;
            model.params_mut().get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * opts.h);
            max_err = max_err.max(rel_err(grads[id.index()][k], numeric));
        }
        groups.push(GroupReport { name: model.params().name(id).into(), checked: picks.len(), max_rel_err: max_err });
    }
    Ok(GradcheckReport { groups, tolerance: opts.tolerance })
}
