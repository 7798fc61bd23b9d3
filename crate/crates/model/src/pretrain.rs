//! Masked-token pretraining of the two encoders.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use worldkit_core::sos::{mlm_mask, MaskScheme, SegmentLayout, SosError, Span, TokenId, RESERVED_TOKENS};

use crate::beam::argmax;
use crate::features::EncoderInputs;
use crate::network::WorldModel;
use crate::optim::{clip_global_norm, Adam};
use crate::params::{Grads, ParamId};
use crate::tape::{NodeId, Tape};
use crate::train::{dropout_seed, TrainError};

pub const DEFAULT_MASK_RATE: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoder {
    Text,
    Graph,
}

impl Encoder {
    fn prefixes(self) -> [&'static str; 2] {
        match self {
            Encoder::Text => ["text_encoder.", "text_mlm."],
            Encoder::Graph => ["graph_encoder.", "graph_mlm."],
        }
    }

    fn scheme(self) -> MaskScheme {
        match self {
            Encoder::Text => MaskScheme::Token,
            Encoder::Graph => MaskScheme::Phrase,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainOptions {
    pub steps: usize,
    pub mask_rate: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            steps: 200,
            mask_rate: DEFAULT_MASK_RATE,
            learning_rate: 1e-3,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub encoder: Encoder,
    pub losses: Vec<f64>,
    /// Fraction of held-out masked tokens predicted exactly.
    pub masked_accuracy: f64,
    /// Accuracy of a uniform guess over non-reserved tokens.
    pub chance: f64,
}

/// One encoder input ready for masking.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmInput {
    pub ids: Vec<TokenId>,
    pub positions: Vec<usize>,
    pub local: Vec<(usize, usize)>,
    pub layout: SegmentLayout,
}

/// Text or graph side of `inputs`. Graph elements are recovered from the
/// triple-local ranges.
pub fn mlm_input(inputs: &EncoderInputs, enc: Encoder) -> Result<MlmInput, SosError> {
    match enc {
        Encoder::Text => Ok(MlmInput {
            ids: inputs.text_ids.clone(),
            positions: (0..inputs.text_ids.len()).collect(),
            local: Vec::new(),
            layout: SegmentLayout::from_spans(Vec::new(), inputs.text_ids.len())?,
        }),
        Encoder::Graph => {
            let mut spans: Vec<Span> = Vec::new();
            for &(lo, hi) in &inputs.graph_local {
                if hi - lo > 1 && spans.last().is_none_or(|s| s.start != lo) {
                    spans.push(Span { start: lo, len: hi - lo });
                }
            }
            Ok(MlmInput {
                ids: inputs.graph_ids.clone(),
                positions: inputs.graph_positions.clone(),
                local: inputs.graph_local.clone(),
                layout: SegmentLayout::from_spans(spans, inputs.graph_ids.len())?,
            })
        }
    }
}

fn mlm_logits(model: &WorldModel, t: &mut Tape, enc: Encoder, x: &MlmInput, ids: &[TokenId]) -> NodeId {
    match enc {
        Encoder::Text => model.text_mlm_tape(t, ids),
        Encoder::Graph => model.graph_mlm_tape(t, ids, &x.positions, &x.local),
    }
}

fn mask_seed(seed: u64, step: usize, i: usize) -> u64 {
    dropout_seed(seed ^ 0x5EED_0F_4D5C, step, i)
}

/// Loss node over masked positions (mean) plus the masked positions and
/// labels.
pub(crate) fn mlm_loss(
    model: &WorldModel,
    t: &mut Tape,
    enc: Encoder,
    x: &MlmInput,
    rate: f64,
    seed: u64,
) -> Result<(NodeId, NodeId, Vec<usize>, Vec<TokenId>), SosError> {
    let m = mlm_mask(&x.ids, rate, enc.scheme(), &x.layout, seed)?;
    let logits = mlm_logits(model, t, enc, x, &m.inputs);
    let mut weights = vec![0.0; x.ids.len()];
    let w = 1.0 / m.positions.len() as f64;
    m.positions.iter().for_each(|&p| weights[p] = w);
    let loss = t.cross_entropy(logits, &x.ids, &weights);
    Ok((loss, logits, m.positions, m.labels))
}

#[derive(Debug, thiserror::Error)]
pub enum PretrainError {
    #[error(transparent)]
    Sos(#[from] SosError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Trains one encoder and its prediction head; every other parameter is
/// left untouched.
pub fn pretrain(
    model: &mut WorldModel,
    enc: Encoder,
    train: &[MlmInput],
    held_out: &[MlmInput],
    opts: &PretrainOptions,
) -> Result<PretrainReport, PretrainError> {
    if train.is_empty() {
        return Err(TrainError::Empty.into());
    }
    let keep: Vec<ParamId> = enc.prefixes().iter().flat_map(|p| model.params.ids_with_prefix(p)).collect();
    let mut adam = Adam::new(&model.params, opts.learning_rate);
    let mut order = ChaCha8Rng::seed_from_u64(model.config.seed.wrapping_add(7));
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let batch: Vec<&MlmInput> = (0..opts.batch_size.min(train.len()))
            .map(|_| &train[rand::Rng::gen_range(&mut order, 0..train.len())])
            .collect();
        let m: &WorldModel = model;
        let per: Vec<Result<(f64, Grads), SosError>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, x)| {
                let mut t = if m.config.dropout > 0.0 {
                    let rng = ChaCha8Rng::seed_from_u64(dropout_seed(m.config.seed, step, i));
                    Tape::training(&m.params, m.config.dropout, rng)
                } else {
                    Tape::new(&m.params)
                };
                let (loss, _, _, _) = mlm_loss(m, &mut t, enc, x, opts.mask_rate, mask_seed(m.config.seed, step, i))?;
                let mut g = Grads::zeros_like(&m.params);
                t.backward(loss, &mut g);
                Ok((t.scalar(loss), g))
            })
            .collect();
        let mut grads = Grads::zeros_like(&model.params);
        let mut loss = 0.0;
        for r in per {
            let (l, g) = r?;
            loss += l;
            grads.add_assign(&g);
        }
        let s = 1.0 / batch.len() as f64;
        loss *= s;
        grads.scale(s);
        grads.retain(&keep);
        if !loss.is_finite() || !grads.all_finite() {
            return Err(TrainError::NonFinite { step: step + 1, what: "loss" }.into());
        }
        clip_global_norm(&mut grads, model.config.grad_clip);
        adam.update(&mut model.params, &grads);
        losses.push(loss);
    }
    let masked_accuracy = masked_accuracy(model, enc, held_out, opts.mask_rate)?;
    let vocab = match enc {
        Encoder::Text => model.vocabs.text.len(),
        Encoder::Graph => model.vocabs.graph.len(),
    };
    Ok(PretrainReport {
        encoder: enc,
        losses,
        masked_accuracy,
        chance: 1.0 / (vocab - RESERVED_TOKENS.len()).max(1) as f64,
    })
}

/// Accuracy at masked positions under fixed per-sample masks.
pub fn masked_accuracy(model: &WorldModel, enc: Encoder, samples: &[MlmInput], rate: f64) -> Result<f64, SosError> {
    let per: Vec<Result<(usize, usize), SosError>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut t = Tape::new(&model.params);
            let (_, logits, positions, labels) = mlm_loss(model, &mut t, enc, x, rate, mask_seed(u64::MAX, 0, i))?;
            let l = t.value(logits);
            let hits = positions.iter().zip(&labels).filter(|(&p, &y)| argmax(l.row(p)) == y).count();
            Ok((hits, positions.len()))
        })
        .collect();
    let (mut hits, mut total) = (0, 0);
    for r in per {
        let (h, n) = r?;
        hits += h;
        total += n;
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::encoder_inputs;
    use crate::network::tests::tiny_setup;

    fn inputs(m: &WorldModel, samples: &[worldkit_core::data::StateSample], enc: Encoder) -> Vec<MlmInput> {
        samples
            .iter()
            .map(|s| mlm_input(&encoder_inputs(s, &m.vocabs, &m.config).unwrap(), enc).unwrap())
            .collect()
    }

    #[test]
    fn graph_layout_covers_whole_triples() {
        let (m, samples) = tiny_setup(51);
        for x in inputs(&m, &samples, Encoder::Graph) {
            assert!(!x.layout.spans().is_empty());
            assert!(x.layout.spans().iter().all(|s| s.len == 3));
        }
    }

    #[test]
    fn only_the_chosen_encoder_moves() {
        let (mut m, samples) = tiny_setup(52);
        let before = m.params.clone();
        let x = inputs(&m, &samples, Encoder::Graph);
        let opts = PretrainOptions {
            steps: 3,
            batch_size: 4,
            ..Default::default()
        };
        pretrain(&mut m, Encoder::Graph, &x, &x[..2], &opts).unwrap();
        for id in 0..m.params.len() {
            let name = m.params.name(id);
            let moved = m.params.get(id) != before.get(id);
            let own = name.starts_with("graph_encoder.") || name.starts_with("graph_mlm.");
            assert!(!moved || own, "{name} moved");
        }
        assert_ne!(m.params.get(m.layout.graph_mlm.w), before.get(m.layout.graph_mlm.w));
    }

    #[test]
    fn text_loss_falls_and_beats_chance() {
        let (mut m, samples) = tiny_setup(53);
        let x = inputs(&m, &samples, Encoder::Text);
        let opts = PretrainOptions {
            steps: 100,
            batch_size: 4,
            learning_rate: 3e-3,
            ..Default::default()
        };
        let r = pretrain(&mut m, Encoder::Text, &x, &x, &opts).unwrap();
        let head: f64 = r.losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = r.losses[90..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
        assert!(r.masked_accuracy >= 10.0 * r.chance, "{} vs chance {}", r.masked_accuracy, r.chance);
    }

    #[test]
    fn graph_mlm_beats_chance() {
        let (mut m, samples) = tiny_setup(54);
        let x = inputs(&m, &samples, Encoder::Graph);
        let opts = PretrainOptions {
            steps: 100,
            batch_size: 4,
            learning_rate: 3e-3,
            ..Default::default()
        };
        let r = pretrain(&mut m, Encoder::Graph, &x, &x, &opts).unwrap();
        assert!(r.losses[99] < r.losses[0]);
        assert!(r.masked_accuracy >= 10.0 * r.chance, "{} vs chance {}", r.masked_accuracy, r.chance);
    }
}
