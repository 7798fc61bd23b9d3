//! Central finite-difference check of the analytic gradients, block by block.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::PreparedSample;
use crate::loss::world_loss_tape;
use crate::network::{WorldModel, BLOCKS};
use crate::params::Grads;
use crate::pretrain::{mlm_loss, Encoder, MlmInput, DEFAULT_MASK_RATE};
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub coords_per_block: usize,
    pub eps: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            coords_per_block: 200,
            eps: 1e-4,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub block: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn min_coords(&self) -> usize {
        self.blocks.iter().map(|b| b.coords).min().unwrap_or(0)
    }
}

/// Objective touching every block: the world loss of each sample plus both
/// masked-token losses under fixed masks. Dropout is off.
fn objective(model: &WorldModel, t: &mut Tape, samples: &[PreparedSample], mlm: &[(Encoder, MlmInput)]) -> NodeId {
    let mut terms = Vec::new();
    for s in samples {
        terms.push((world_loss_tape(model, t, s).total, 1.0));
    }
    for (i, (enc, x)) in mlm.iter().enumerate() {
        let (l, ..) = mlm_loss(model, t, *enc, x, DEFAULT_MASK_RATE, i as u64).expect("maskable input");
        terms.push((l, 1.0));
    }
    t.weighted_sum(&terms)
}

fn value(model: &WorldModel, samples: &[PreparedSample], mlm: &[(Encoder, MlmInput)]) -> f64 {
    let mut t = Tape::new(&model.params);
    let n = objective(model, &mut t, samples, mlm);
    t.scalar(n)
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic and numeric gradients on `coords_per_block` random
/// coordinates of every block (all of them if the block is smaller).
pub fn gradient_check(
    model: &mut WorldModel,
    samples: &[PreparedSample],
    mlm: &[(Encoder, MlmInput)],
    opts: &GradCheckOptions,
) -> GradCheckReport {
    let mut grads = Grads::zeros_like(&model.params);
    {
        let mut t = Tape::new(&model.params);
        let n = objective(model, &mut t, samples, mlm);
        t.backward(n, &mut grads);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut blocks = Vec::new();
    for prefix in BLOCKS {
        let coords: Vec<(usize, usize)> = model
            .params
            .ids_with_prefix(prefix)
            .into_iter()
            .flat_map(|id| (0..model.params.get(id).len()).map(move |k| (id, k)))
            .collect();
        let n = opts.coords_per_block.min(coords.len());
        let mut check = BlockCheck {
            block: prefix.trim_end_matches('.').to_string(),
            coords: n,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for i in sample(&mut rng, coords.len(), n) {
            let (id, k) = coords[i];
            let x0 = model.params.get(id).data[k];
            model.params.get_mut(id).data[k] = x0 + opts.eps;
            let up = value(model, samples, mlm);
            model.params.get_mut(id).data[k] = x0 - opts.eps;
            let down = value(model, samples, mlm);
            model.params.get_mut(id).data[k] = x0;
            let numeric = (up - down) / (2.0 * opts.eps);
            let analytic = grads.tensors[id].data[k];
            check.max_abs_err = check.max_abs_err.max((analytic - numeric).abs());
            check.max_rel_err = check.max_rel_err.max(rel_err(analytic, numeric, opts.floor));
        }
        blocks.push(check);
    }
    GradCheckReport { blocks }
}
