//! Component ablations: the graph-side 2×2×2 grid over target, multitask and
//! loss, and the action-side 2×2 grid over multitask and loss.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use worldkit_core::data::StateSample;
use worldkit_core::metrics::ScoreReport;
use worldkit_core::worldgen::{emit_corpus, generate_world_with, Policy, WorldGenError, WorldParams};
use worldkit_model::config::{LossMode, ModelConfig, TargetMode, Task};
use worldkit_model::eval::{evaluate, EvalError};
use worldkit_model::features::{prepare, PreparedSample, Vocabs};
use worldkit_model::network::{ModelError, WorldModel};
use worldkit_model::train::{TrainError, TrainOptions, Trainer};

pub const ABLATION_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum AblateError {
    #[error(transparent)]
    World(#[from] WorldGenError),
    #[error(transparent)]
    Sos(#[from] worldkit_core::sos::SosError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// One configuration of the three components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub diff: bool,
    pub multitask: bool,
    pub sos: bool,
    /// Task trained when `multitask` is off.
    pub task: Task,
}

impl Components {
    pub const FULL: Components = Components {
        diff: true,
        multitask: true,
        sos: true,
        task: Task::Graph,
    };

    pub fn name(&self) -> String {
        let flag = |on: bool, s: &str| if on { s.to_string() } else { format!("-{s}") };
        let mut parts = vec![flag(self.diff, "diff"), flag(self.multitask, "mt"), flag(self.sos, "sos")];
        if !self.multitask && self.task == Task::Action {
            parts.remove(0);
        }
        parts.join(" ")
    }

    pub fn apply(&self, cfg: &mut ModelConfig) {
        cfg.target = if self.diff { TargetMode::Diff } else { TargetMode::Full };
        cfg.multitask = self.multitask;
        cfg.single_task = self.task;
        cfg.loss = if self.sos { LossMode::Sos } else { LossMode::Seq };
    }
}

/// The eight graph-side rows, full configuration first and the plain
/// sequence-to-sequence row last.
pub fn graph_grid() -> Vec<Components> {
    let mut rows = Vec::new();
    for k in 0..8u8 {
        rows.push(Components {
            diff: k & 1 == 0,
            multitask: k & 2 == 0,
            sos: k & 4 == 0,
            task: Task::Graph,
        });
    }
    rows.sort_by_key(|c| std::cmp::Reverse(c.diff as u8 + c.multitask as u8 + c.sos as u8));
    rows
}

/// The four action-side rows. Multitask rows share their run with the
/// matching diff-target graph row.
pub fn action_grid() -> Vec<Components> {
    let mut rows = Vec::new();
    for (multitask, sos) in [(true, true), (true, false), (false, true), (false, false)] {
        rows.push(Components {
            diff: true,
            multitask,
            sos,
            task: if multitask { Task::Graph } else { Task::Action },
        });
    }
    rows
}

/// The rows compared by the ordering check: full, each single removal, none.
pub fn ordering_rows() -> Vec<Components> {
    let f = Components::FULL;
    vec![
        f,
        Components { diff: false, ..f },
        Components { multitask: false, ..f },
        Components { sos: false, ..f },
        Components {
            diff: false,
            multitask: false,
            sos: false,
            task: Task::Graph,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub worlds: usize,
    pub world_seed: u64,
    pub world: WorldParams,
    pub train_per_world: usize,
    pub test_per_world: usize,
    pub policy: Policy,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            worlds: 20,
            world_seed: 0,
            world: WorldParams::default(),
            train_per_world: 200,
            test_per_world: 50,
            policy: Policy::CoverageWalk,
        }
    }
}

/// Train and test trajectories from the same worlds under different
/// exploration seeds.
pub struct Benchmark {
    pub train: Vec<StateSample>,
    pub test: Vec<StateSample>,
}

pub fn build_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark, AblateError> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for w in 0..spec.worlds as u64 {
        let seed = spec.world_seed.wrapping_add(w);
        let world = generate_world_with(seed, &spec.world)?;
        train.extend(emit_corpus(&world, spec.policy, spec.train_per_world, seed.wrapping_mul(2))?);
        test.extend(emit_corpus(&world, spec.policy, spec.test_per_world, seed.wrapping_mul(2) + 1)?);
    }
    Ok(Benchmark { train, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationOptions {
    pub steps: usize,
    /// Wall-clock cap per row in seconds.
    pub budget_secs: Option<f64>,
    /// Test samples scored per row (a fixed prefix, all if `None`).
    pub eval_samples: Option<usize>,
    pub seeds: Vec<u64>,
    pub beam_width: usize,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self {
            steps: 1500,
            budget_secs: Some(600.0),
            eval_samples: None,
            seeds: vec![0, 1, 2],
            beam_width: worldkit_model::config::DEFAULT_BEAM_WIDTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub row: String,
    pub components: Components,
    pub seed: u64,
    pub steps: usize,
    pub out_of_budget: bool,
    pub final_loss: f64,
    pub train_secs: f64,
    pub eval_secs: f64,
    pub report: ScoreReport,
}

impl RowResult {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.report.overall_value(name)
    }
}

/// Trains one row from scratch for a fixed number of steps and scores it.
pub fn run_row(
    bench: &Benchmark,
    vocabs: &Vocabs,
    base: &ModelConfig,
    row: Components,
    seed: u64,
    opts: &AblationOptions,
) -> Result<RowResult, AblateError> {
    let mut cfg = base.clone();
    row.apply(&mut cfg);
    cfg.seed = seed;
    cfg.beam_width = opts.beam_width;
    let model = WorldModel::new(cfg.clone(), vocabs.clone())?;
    let train: Vec<PreparedSample> = bench
        .train
        .iter()
        .map(|s| prepare(s, vocabs, &cfg))
        .collect::<Result<_, _>>()?;
    let mut trainer = Trainer::new(model);
    let topts = TrainOptions {
        max_steps: opts.steps,
        eval_every: 0,
        patience: usize::MAX,
        budget_secs: opts.budget_secs,
    };
    let start = Instant::now();
    let outcome = trainer.fit(&train, &[], &topts, None)?;
    let train_secs = start.elapsed().as_secs_f64();
    let n = opts.eval_samples.unwrap_or(bench.test.len()).min(bench.test.len());
    let start = Instant::now();
    let eval = evaluate(&trainer.model, &bench.test[..n], opts.beam_width)?;
    let eval_secs = start.elapsed().as_secs_f64();
    let final_loss = outcome.history.last().map_or(f64::NAN, |r| r.total);
    log::info!(
        "row [{}] seed {seed}: {} steps, loss {final_loss:.4}, graph_em {:?}, {train_secs:.0}s + {eval_secs:.0}s",
        row.name(),
        outcome.steps,
        eval.report.overall_value("graph_em")
    );
    Ok(RowResult {
        row: row.name(),
        components: row,
        seed,
        steps: outcome.steps,
        out_of_budget: outcome.out_of_budget,
        final_loss,
        train_secs,
        eval_secs,
        report: eval.report,
    })
}

/// Summary of the ordering check over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ordering {
    pub full_mean: f64,
    pub none_mean: f64,
    /// Per single-removal row: (name, mean, seeds on which full wins).
    pub removals: Vec<(String, f64, usize)>,
    pub seeds: usize,
}

impl Ordering {
    pub fn margin(&self) -> f64 {
        self.full_mean - self.none_mean
    }

    pub fn holds(&self, min_margin: f64, min_wins: usize) -> bool {
        self.margin() >= min_margin && self.removals.iter().all(|r| r.2 >= min_wins)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Compares `metric` of the full row with the none row and each single
/// removal, seed by seed.
pub fn ordering(results: &[RowResult], metric: &str) -> Ordering {
    let rows = ordering_rows();
    let value = |c: &Components, seed: u64| {
        results
            .iter()
            .find(|r| r.components == *c && r.seed == seed)
            .and_then(|r| r.metric(metric))
    };
    let mut seeds: Vec<u64> = results.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let series = |c: &Components| -> Vec<f64> { seeds.iter().filter_map(|&s| value(c, s)).collect() };
    let full = &rows[0];
    let none = &rows[4];
    let removals = rows[1..4]
        .iter()
        .map(|c| {
            let wins = seeds
                .iter()
                .filter(|&&s| matches!((value(full, s), value(c, s)), (Some(a), Some(b)) if a > b))
                .count();
            (c.name(), mean(&series(c)), wins)
        })
        .collect();
    Ordering {
        full_mean: mean(&series(full)),
        none_mean: mean(&series(none)),
        removals,
        seeds: seeds.len(),
    }
}

/// Table of mean metrics per row over seeds.
pub fn render_table(results: &[RowResult], rows: &[Components], metrics: &[&str]) -> String {
    let mut out = format!("{:<20}", "row");
    for m in metrics {
        out.push_str(&format!("{m:>12}"));
    }
    out.push('\n');
    for c in rows {
        let mine: Vec<&RowResult> = results.iter().filter(|r| r.components == *c).collect();
        if mine.is_empty() {
            continue;
        }
        out.push_str(&format!("{:<20}", c.name()));
        for m in metrics {
            let v: Vec<f64> = mine.iter().filter_map(|r| r.metric(m)).collect();
            if v.is_empty() {
                out.push_str(&format!("{:>12}", "-"));
            } else {
                out.push_str(&format!("{:>12.2}", mean(&v)));
            }
        }
        out.push('\n');
    }
    out
}
