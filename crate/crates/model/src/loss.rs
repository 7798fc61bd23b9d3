//! Sequence and set-of-sequences likelihood losses.

use serde::{Deserialize, Serialize};
use worldkit_core::sos::{SegmentLayout, TokenId};

use crate::config::{Reduction, Task};
use crate::features::{DecoderInput, PreparedSample};
use crate::network::{TapeEncoding, WorldModel};
use crate::tape::{NodeId, Tape};
use crate::tensor::{log_sum_exp, Mat};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("{rows} logit rows for {targets} targets")]
    Rows { rows: usize, targets: usize },
    #[error("layout covers {layout} positions, logits have {rows}")]
    Layout { layout: usize, rows: usize },
}

/// `−log softmax(row)[target]`.
pub fn token_nll(row: &[f64], target: TokenId) -> f64 {
    log_sum_exp(row) - row[target]
}

fn check_rows(logits: &Mat, targets: &[TokenId]) -> Result<(), LossError> {
    if logits.rows != targets.len() {
        return Err(LossError::Rows {
            rows: logits.rows,
            targets: targets.len(),
        });
    }
    Ok(())
}

fn reduce(sum: f64, count: usize, reduction: Reduction) -> f64 {
    match reduction {
        Reduction::Sum => sum,
        Reduction::Mean if count == 0 => 0.0,
        Reduction::Mean => sum / count as f64,
    }
}

/// Cross entropy of the flat sequence: every row is scored against its
/// positional target.
pub fn loss_seq(logits: &Mat, targets: &[TokenId], reduction: Reduction) -> Result<f64, LossError> {
    check_rows(logits, targets)?;
    let sum: f64 = targets.iter().enumerate().map(|(p, &t)| token_nll(logits.row(p), t)).sum();
    Ok(reduce(sum, targets.len(), reduction))
}

/// Sum over elements of each element's within-element token NLL. Rows
/// outside every element are unsupervised.
pub fn loss_sos(logits: &Mat, targets: &[TokenId], layout: &SegmentLayout, reduction: Reduction) -> Result<f64, LossError> {
    check_rows(logits, targets)?;
    if layout.len() != logits.rows {
        return Err(LossError::Layout {
            layout: layout.len(),
            rows: logits.rows,
        });
    }
    let mut sum = 0.0;
    let mut count = 0;
    for sp in layout.spans() {
        let element: f64 = (sp.start..sp.start + sp.len).map(|p| token_nll(logits.row(p), targets[p])).sum();
        sum += element;
        count += sp.len;
    }
    Ok(reduce(sum, count, reduction))
}

/// Per-position weights realizing `reduction` over the supervised rows.
pub fn position_weights(layout: &SegmentLayout, reduction: Reduction) -> Vec<f64> {
    let supervised: usize = layout.spans().iter().map(|s| s.len).sum();
    let w = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / supervised.max(1) as f64,
    };
    let mut out = vec![0.0; layout.len()];
    for sp in layout.spans() {
        out[sp.start..sp.start + sp.len].iter_mut().for_each(|x| *x = w);
    }
    out
}

/// Graph term, action term and their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub graph: f64,
    pub action: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, o: &LossBreakdown) {
        self.graph += o.graph;
        self.action += o.action;
        self.total += o.total;
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            graph: self.graph * s,
            action: self.action * s,
            total: self.total * s,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.graph.is_finite() && self.action.is_finite() && self.total.is_finite()
    }
}

/// Tape nodes of the combined loss.
pub struct WorldLossNodes {
    pub enc: TapeEncoding,
    pub graph: Option<NodeId>,
    pub action: Option<NodeId>,
    pub total: NodeId,
}

fn decoder_loss(model: &WorldModel, t: &mut Tape, task: Task, enc: &TapeEncoding, target: &DecoderInput) -> NodeId {
    let mem = model.memory_tape(t, task, enc);
    let logits = model.decode_tape(t, task, mem, target);
    let w = position_weights(&target.layout, model.config.reduction);
    t.cross_entropy(logits, &target.targets, &w)
}

/// Records the combined world loss of one sample. Decoders whose task is
/// not trained are never run, so they receive no gradient.
pub fn world_loss_tape(model: &WorldModel, t: &mut Tape, sample: &PreparedSample) -> WorldLossNodes {
    let enc = model.encode_tape(t, &sample.inputs);
    let graph = sample.graph.as_ref().map(|g| decoder_loss(model, t, Task::Graph, &enc, g));
    let action = sample.action.as_ref().map(|a| decoder_loss(model, t, Task::Action, &enc, a));
    let terms: Vec<(NodeId, f64)> = graph.iter().chain(action.iter()).map(|&n| (n, 1.0)).collect();
    let total = t.weighted_sum(&terms);
    WorldLossNodes {
        enc,
        graph,
        action,
        total,
    }
}

pub fn breakdown(t: &Tape, n: &WorldLossNodes) -> LossBreakdown {
    LossBreakdown {
        graph: n.graph.map_or(0.0, |g| t.scalar(g)),
        action: n.action.map_or(0.0, |a| t.scalar(a)),
        total: t.scalar(n.total),
    }
}

/// Dropout-free loss of one sample.
pub fn loss_world(model: &WorldModel, sample: &PreparedSample) -> LossBreakdown {
    let mut t = Tape::new(&model.params);
    let n = world_loss_tape(model, &mut t, sample);
    breakdown(&t, &n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{prepare, sos_decoder_target, seq_decoder_target};
    use crate::network::tests::tiny_setup;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use worldkit_core::sos::{ElementSource, SosSerialization};

    fn random_logits(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-3.0..3.0)).collect())
    }

    #[test]
    fn uniform_logits_cost_ln_v() {
        let v = 17;
        let logits = Mat::zeros(5, v);
        let targets = [1, 2, 3, 4, 5];
        let l = loss_seq(&logits, &targets, Reduction::Mean).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);
        let layout = SegmentLayout::from_spans(vec![worldkit_core::sos::Span { start: 0, len: 5 }], 5).unwrap();
        let s = loss_sos(&logits, &targets, &layout, Reduction::Sum).unwrap();
        assert!((s - 5.0 * (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_cost_nothing() {
        let mut logits = Mat::zeros(2, 4);
        logits.set(0, 1, 100.0);
        logits.set(1, 3, 100.0);
        assert!(loss_seq(&logits, &[1, 3], Reduction::Mean).unwrap() < 1e-30);
    }

    #[test]
    fn seq_matches_hand_rolled_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let logits = random_logits(6, 9, &mut rng);
            let targets: Vec<usize> = (0..6).map(|_| rng.gen_range(0..9)).collect();
            let mut want = 0.0;
            for (p, &t) in targets.iter().enumerate() {
                let z: f64 = logits.row(p).iter().map(|x| x.exp()).sum();
                want -= (logits.get(p, t).exp() / z).ln();
            }
            let got = loss_seq(&logits, &targets, Reduction::Sum).unwrap();
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn shape_mismatches_are_errors() {
        let logits = Mat::zeros(3, 4);
        assert!(loss_seq(&logits, &[0, 1], Reduction::Mean).is_err());
        let layout = SegmentLayout::framed(&[1]);
        assert!(loss_sos(&logits, &[0, 1, 2], &layout, Reduction::Mean).is_err());
    }

    #[test]
    fn tape_loss_equals_value_losses() {
        let (m, samples) = tiny_setup(11);
        let prep = prepare(&samples[2], &m.vocabs, &m.config).unwrap();
        let enc = m.encode(&prep.inputs);
        let mem = m.memory(Task::Graph, &enc);
        let elems = vec![vec![8, 9, 10], vec![11, 12, 8]];
        let ser = SosSerialization::from_elements(&elems, ElementSource::Triple);
        for (target, sos) in [(sos_decoder_target(&ser), true), (seq_decoder_target(&ser), false)] {
            let logits = m.decode_logits(Task::Graph, &mem, &target);
            let want = if sos {
                loss_sos(&logits, &target.targets, &target.layout, Reduction::Mean).unwrap()
            } else {
                loss_seq(&logits, &target.targets, Reduction::Mean).unwrap()
            };
            let mut t = Tape::new(&m.params);
            let memn = t.leaf(mem.clone());
            let l = m.decode_tape(&mut t, Task::Graph, memn, &target);
            let w = position_weights(&target.layout, Reduction::Mean);
            let got = t.cross_entropy(l, &target.targets, &w);
            assert!((t.scalar(got) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn total_is_sum_of_terms() {
        let (m, samples) = tiny_setup(12);
        for s in &samples[..4] {
            let prep = prepare(s, &m.vocabs, &m.config).unwrap();
            let b = loss_world(&m, &prep);
            assert!(b.graph > 0.0 && b.action > 0.0);
            assert!((b.total - (b.graph + b.action)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_task_zeroes_the_other_term() {
        let (mut m, samples) = tiny_setup(13);
        m.config.multitask = false;
        m.config.single_task = Task::Graph;
        let prep = prepare(&samples[0], &m.vocabs, &m.config).unwrap();
        assert!(prep.action.is_none());
        let b = loss_world(&m, &prep);
        assert_eq!(b.action, 0.0);
        assert_eq!(b.total, b.graph);
    }

    proptest! {
        #[test]
        fn single_element_sos_equals_seq(len in 1usize..6, vocab in 3usize..12, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let elem: Vec<usize> = (0..len).map(|_| rng.gen_range(8..8 + vocab)).collect();
            let ser = SosSerialization::from_elements(&[elem], ElementSource::Triple);
            let target = sos_decoder_target(&ser);
            let logits = random_logits(target.len(), 8 + vocab, &mut rng);
            for r in [Reduction::Mean, Reduction::Sum] {
                let a = loss_sos(&logits, &target.targets, &target.layout, r).unwrap();
                let b = loss_seq(&logits, &target.targets, r).unwrap();
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
