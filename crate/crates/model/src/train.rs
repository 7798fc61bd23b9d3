//! Mini-batch training with Adam, clipping, early stopping and an NDJSON log.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::PreparedSample;
use crate::loss::{breakdown, world_loss_tape, LossBreakdown};
use crate::network::WorldModel;
use crate::optim::{clip_global_norm, Adam};
use crate::params::{Grads, Parameters};
use crate::tape::Tape;

pub const LOG_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_PATIENCE: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: &'static str },
    #[error("no training samples")]
    Empty,
    #[error("log write failed: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub max_steps: usize,
    /// Steps between validation passes (one "epoch" for early stopping).
    pub eval_every: usize,
    pub patience: usize,
    /// Wall-clock cap in seconds; training stops (successfully) when hit.
    pub budget_secs: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            max_steps: 1000,
            eval_every: 100,
            patience: DEFAULT_PATIENCE,
            budget_secs: None,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub graph_loss: f64,
    pub action_loss: f64,
    pub total: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub step: usize,
    pub val_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub steps: usize,
    pub stopped_early: bool,
    pub out_of_budget: bool,
    pub best_val: Option<f64>,
    pub history: Vec<LogRecord>,
    pub validation: Vec<ValRecord>,
}

/// Seed of the dropout stream for sample `i` of step `step`.
pub(crate) fn dropout_seed(seed: u64, step: usize, i: usize) -> u64 {
    let mut x = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [step as u64, i as u64] {
        x = (x ^ v).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x ^= x >> 31;
    }
    x
}

/// Mean loss and gradient over a batch. Samples run in parallel; their
/// gradients are summed in batch order so the result does not depend on
/// the thread count.
pub fn batch_gradients(model: &WorldModel, batch: &[&PreparedSample], step: usize, train: bool) -> (LossBreakdown, Grads) {
    let per_sample: Vec<(LossBreakdown, Grads)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut t = if train && model.config.dropout > 0.0 {
                let rng = ChaCha8Rng::seed_from_u64(dropout_seed(model.config.seed, step, i));
                Tape::training(&model.params, model.config.dropout, rng)
            } else {
                Tape::new(&model.params)
            };
            let nodes = world_loss_tape(model, &mut t, s);
            let mut g = Grads::zeros_like(&model.params);
            t.backward(nodes.total, &mut g);
            (breakdown(&t, &nodes), g)
        })
        .collect();
    let mut loss = LossBreakdown::default();
    let mut grads = Grads::zeros_like(&model.params);
    for (l, g) in &per_sample {
        loss.add(l);
        grads.add_assign(g);
    }
    let s = 1.0 / batch.len().max(1) as f64;
    grads.scale(s);
    (loss.scaled(s), grads)
}

/// Dropout-free mean loss over `samples`, summed in sample order.
pub fn evaluate_loss(model: &WorldModel, samples: &[PreparedSample]) -> LossBreakdown {
    let per: Vec<LossBreakdown> = samples.par_iter().map(|s| crate::loss::loss_world(model, s)).collect();
    let mut acc = LossBreakdown::default();
    per.iter().for_each(|l| acc.add(l));
    acc.scaled(1.0 / samples.len().max(1) as f64)
}

pub struct Trainer {
    pub model: WorldModel,
    pub adam: Adam,
    pub step: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: WorldModel) -> Self {
        let adam = Adam::new(&model.params, model.config.learning_rate);
        let rng = ChaCha8Rng::seed_from_u64(model.config.seed.wrapping_add(1));
        Self {
            model,
            adam,
            step: 0,
            order: Vec::new(),
            cursor: 0,
            rng,
        }
    }

    /// Backpropagates the batch loss, clips, and applies one Adam update.
    pub fn train_step(&mut self, batch: &[&PreparedSample]) -> Result<LossBreakdown, TrainError> {
        let (loss, mut grads) = batch_gradients(&self.model, batch, self.step, true);
        self.step += 1;
        if !loss.is_finite() {
            log::error!("loss became {:?} at step {}", loss, self.step);
            return Err(TrainError::NonFinite {
                step: self.step,
                what: "loss",
            });
        }
        if !grads.all_finite() {
            return Err(TrainError::NonFinite {
                step: self.step,
                what: "gradient",
            });
        }
        clip_global_norm(&mut grads, self.model.config.grad_clip);
        self.adam.update(&mut self.model.params, &grads);
        if !self.model.params.all_finite() {
            return Err(TrainError::NonFinite {
                step: self.step,
                what: "parameters",
            });
        }
        Ok(loss)
    }

    /// Next batch indices from a seeded per-epoch shuffle.
    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let b = self.model.config.batch_size.min(n);
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// Trains until `max_steps`, the budget, or `patience` validation passes
    /// without improvement. The best validation parameters are restored.
    pub fn fit(
        &mut self,
        train: &[PreparedSample],
        val: &[PreparedSample],
        opts: &TrainOptions,
        mut log: Option<&mut dyn Write>,
    ) -> Result<TrainOutcome, TrainError> {
        if train.is_empty() {
            return Err(TrainError::Empty);
        }
        let start = Instant::now();
        let budget = opts.budget_secs.map(Duration::from_secs_f64);
        let mut out = TrainOutcome {
            steps: 0,
            stopped_early: false,
            out_of_budget: false,
            best_val: None,
            history: Vec::new(),
            validation: Vec::new(),
        };
        let mut best: Option<Parameters> = None;
        let mut bad = 0;
        for _ in 0..opts.max_steps {
            if budget.is_some_and(|b| start.elapsed() >= b) {
                out.out_of_budget = true;
                break;
            }
            let idx = self.next_batch(train.len());
            let batch: Vec<&PreparedSample> = idx.iter().map(|&i| &train[i]).collect();
            let l = self.train_step(&batch)?;
            let rec = LogRecord {
                step: self.step,
                graph_loss: l.graph,
                action_loss: l.action,
                total: l.total,
                wall_time: start.elapsed().as_secs_f64(),
            };
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
            }
            out.history.push(rec);
            out.steps += 1;
            if !val.is_empty() && opts.eval_every > 0 && self.step.is_multiple_of(opts.eval_every) {
                let v = evaluate_loss(&self.model, val).total;
                log::info!("step {} train {:.4} val {:.4}", self.step, l.total, v);
                out.validation.push(ValRecord {
                    step: self.step,
                    val_total: v,
                });
                if out.best_val.is_none_or(|b| v < b) {
                    out.best_val = Some(v);
                    best = Some(self.model.params.clone());
                    bad = 0;
                } else {
                    bad += 1;
                    if bad >= opts.patience {
                        out.stopped_early = true;
                        break;
                    }
                }
            }
        }
        if let Some(p) = best {
            self.model.params = p;
        }
        Ok(out)
    }
}

/// Header line of a training log.
pub fn log_header(config: &crate::config::ModelConfig) -> String {
    serde_json::json!({
        "format_version": LOG_FORMAT_VERSION,
        "kind": "worldkit-train-log",
        "config": config,
    })
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::prepare;
    use crate::network::tests::tiny_setup;

    fn prepared(seed: u64) -> (WorldModel, Vec<PreparedSample>) {
        let (mut m, samples) = tiny_setup(seed);
        m.config.batch_size = 4;
        let p = samples.iter().map(|s| prepare(s, &m.vocabs, &m.config).unwrap()).collect();
        (m, p)
    }

    #[test]
    fn same_seed_same_curve() {
        let run = || {
            let (m, p) = prepared(21);
            let mut t = Trainer::new(m);
            let opts = TrainOptions {
                max_steps: 6,
                eval_every: 0,
                ..Default::default()
            };
            let o = t.fit(&p, &[], &opts, None).unwrap();
            let curve: Vec<u64> = o.history.iter().map(|r| r.total.to_bits()).collect();
            (curve, t.model.params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    #[test]
    fn thread_count_does_not_change_gradients() {
        let (m, p) = prepared(22);
        let batch: Vec<&PreparedSample> = p.iter().take(5).collect();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let (la, ga) = one.install(|| batch_gradients(&m, &batch, 3, true));
        let (lb, gb) = four.install(|| batch_gradients(&m, &batch, 3, true));
        assert_eq!(la, lb);
        assert_eq!(ga, gb);
    }

    #[test]
    fn loss_goes_down_on_a_small_set() {
        let (m, p) = prepared(23);
        let before = evaluate_loss(&m, &p).total;
        let mut t = Trainer::new(m);
        let opts = TrainOptions {
            max_steps: 40,
            eval_every: 0,
            ..Default::default()
        };
        t.fit(&p, &[], &opts, None).unwrap();
        let after = evaluate_loss(&t.model, &p).total;
        assert!(after < 0.7 * before, "{before} -> {after}");
    }

    #[test]
    fn patience_stops_a_plateau() {
        let (mut m, p) = prepared(24);
        // A zero learning rate gives a perfectly flat validation curve.
        m.config.learning_rate = 1e-300;
        let mut t = Trainer::new(m);
        let opts = TrainOptions {
            max_steps: 100,
            eval_every: 2,
            patience: 5,
            budget_secs: None,
        };
        let o = t.fit(&p, &p[..3], &opts, None).unwrap();
        assert!(o.stopped_early);
        assert_eq!(o.validation.len(), 6);
        assert_eq!(o.steps, 12);
    }

    #[test]
    fn nan_aborts() {
        let (mut m, p) = prepared(25);
        let id = m.layout.graph_decoder.out_b;
        m.params.get_mut(id).data[0] = f64::NAN;
        let mut t = Trainer::new(m);
        let batch: Vec<&PreparedSample> = p.iter().take(2).collect();
        assert!(matches!(t.train_step(&batch), Err(TrainError::NonFinite { .. })));
    }
}
