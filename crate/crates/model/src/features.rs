//! Turns samples into encoder inputs and teacher-forced decoder targets.

use std::collections::BTreeSet;

use worldkit_core::data::StateSample;
use worldkit_core::kg::{diff, KnowledgeGraph};
use worldkit_core::sos::{
    build_text_vocab, build_vocab, encode_action_set, encode_graph_set, encode_rule_set, SegmentLayout, SosError,
    SosSerialization, Span, TokenId, VocabKind, Vocabulary, BOS, EOS, SEP,
};
use worldkit_core::text::tokenize;

use crate::config::{LossMode, ModelConfig, TargetMode, GRAPH_POSITIONS};
use crate::tape::KeyMask;

/// The three vocabularies a model is built over.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabs {
    pub text: Vocabulary,
    pub graph: Vocabulary,
    pub action: Vocabulary,
}

impl Vocabs {
    pub fn build(samples: &[StateSample], text_cap: usize) -> Result<Self, SosError> {
        Ok(Self {
            text: build_text_vocab(samples, text_cap)?,
            graph: build_vocab(samples, VocabKind::Graph)?,
            action: build_vocab(samples, VocabKind::Action)?,
        })
    }
}

/// Token ids and positions for both encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInputs {
    pub text_ids: Vec<TokenId>,
    pub graph_ids: Vec<TokenId>,
    pub graph_positions: Vec<usize>,
    /// Key range each graph token sees in the first graph-encoder layer:
    /// its own triple, or only itself for framing tokens.
    pub graph_local: Vec<(usize, usize)>,
}

/// A teacher-forced decoder sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderInput {
    pub ids: Vec<TokenId>,
    pub positions: Vec<usize>,
    pub targets: Vec<TokenId>,
    pub mask: KeyMask,
    /// Supervision groups: one span per element block (plus the closing
    /// `EOS` block) in SOS mode, one span over everything in seq mode.
    pub layout: SegmentLayout,
}

impl DecoderInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Text encoder input: `BOS`, the action taken, `SEP`, the observation
/// fields, `SEP`, the valid actions separated by `SEP`, `EOS`. Empty sections
/// are skipped. Long inputs lose their tail (before `EOS`).
pub fn text_input(sample: &StateSample, v: &Vocabulary, max_len: usize) -> Vec<TokenId> {
    let s = &sample.prev;
    let mut sections: Vec<Vec<TokenId>> = Vec::new();
    let action = v.encode_words(&tokenize(&sample.action));
    if !action.is_empty() {
        sections.push(action);
    }
    let obs = v.encode_words(&s.observation_tokens());
    if !obs.is_empty() {
        sections.push(obs);
    }
    let mut acts = Vec::new();
    for a in &s.valid_actions {
        if !acts.is_empty() {
            acts.push(SEP);
        }
        acts.extend(v.encode_words(&tokenize(a)));
    }
    if !acts.is_empty() {
        sections.push(acts);
    }
    let mut ids = vec![BOS];
    for (i, sec) in sections.iter().enumerate() {
        if i > 0 {
            ids.push(SEP);
        }
        ids.extend_from_slice(sec);
    }
    ids.push(EOS);
    let max_len = max_len.max(2);
    if ids.len() > max_len {
        log::debug!("text input of {} tokens truncated to {max_len}", ids.len());
        ids.truncate(max_len - 1);
        ids.push(EOS);
    }
    ids
}

/// Keeps leading elements while the framed length (elements, one separator
/// each, one closing token) stays within `max_len`.
fn fit_elements(ser: &SosSerialization, max_len: usize) -> SosSerialization {
    let elems = ser.elements();
    let mut total = 1;
    let mut keep = 0;
    for e in &elems {
        if total + e.len() + 1 > max_len {
            break;
        }
        total += e.len() + 1;
        keep += 1;
    }
    if keep == elems.len() {
        return ser.clone();
    }
    log::debug!("target set of {} elements cut to {keep}", elems.len());
    let kept: Vec<Vec<TokenId>> = elems[..keep].iter().map(|e| e.to_vec()).collect();
    SosSerialization::from_elements(&kept, ser.source)
}

/// Graph encoder input: `BOS` followed by the triple serialization of `g`.
/// Framing tokens take position 0 and element tokens take offset + 1.
pub fn graph_input(g: &KnowledgeGraph, v: &Vocabulary, max_len: usize) -> Result<(Vec<TokenId>, Vec<usize>, Vec<(usize, usize)>), SosError> {
    let ser = fit_elements(&encode_graph_set(g.iter(), v)?, max_len);
    let layout = ser.layout.shifted(1);
    let mut ids = vec![BOS];
    ids.extend_from_slice(&ser.token_ids);
    let mut positions = Vec::with_capacity(ids.len());
    let mut local = Vec::with_capacity(ids.len());
    for p in 0..ids.len() {
        match layout.element_of(p) {
            Some(e) => {
                let off = layout.offset_of(p).expect("offset inside element");
                positions.push((off + 1).min(GRAPH_POSITIONS - 1));
                let sp = layout.spans()[e];
                local.push((sp.start, sp.start + sp.len));
            }
            None => {
                positions.push(0);
                local.push((p, p + 1));
            }
        }
    }
    Ok((ids, positions, local))
}

pub fn encoder_inputs(sample: &StateSample, vocabs: &Vocabs, cfg: &ModelConfig) -> Result<EncoderInputs, SosError> {
    let text_ids = text_input(sample, &vocabs.text, cfg.text_encoder.input_len);
    let (graph_ids, graph_positions, graph_local) =
        graph_input(&sample.prev.graph, &vocabs.graph, cfg.graph_encoder.input_len)?;
    Ok(EncoderInputs {
        text_ids,
        graph_ids,
        graph_positions,
        graph_local,
    })
}

/// Block-structured target: input `[SEP e1 SEP e2 … SEP en SEP]`, targets
/// `[e1 SEP e2 SEP … en SEP EOS]`. Each block `[SEP, e_i]` predicts
/// `[e_i, SEP]` and the last block `[SEP]` predicts `EOS`. Positions restart
/// at 0 in every block and attention never leaves the block.
pub fn sos_decoder_target(ser: &SosSerialization) -> DecoderInput {
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    let mut spans = Vec::new();
    for e in ser.elements() {
        spans.push(Span {
            start: ids.len(),
            len: e.len() + 1,
        });
        ids.push(SEP);
        ids.extend_from_slice(e);
        targets.extend_from_slice(e);
        targets.push(SEP);
        positions.extend(0..=e.len());
    }
    spans.push(Span { start: ids.len(), len: 1 });
    ids.push(SEP);
    targets.push(EOS);
    positions.push(0);
    let n = ids.len();
    let layout = SegmentLayout::from_spans(spans, n).expect("blocks tile the target");
    let mask = KeyMask::Ranges(block_ranges(&layout));
    DecoderInput {
        ids,
        positions,
        targets,
        mask,
        layout,
    }
}

/// Key range `[block start, p + 1)` for every position of a tiled layout.
pub fn block_ranges(layout: &SegmentLayout) -> Vec<(usize, usize)> {
    (0..layout.len())
        .map(|p| {
            let e = layout.element_of(p).expect("layout tiles the sequence");
            (layout.spans()[e].start, p + 1)
        })
        .collect()
}

/// Plain shifted target: input `[BOS] + ser[..-1]`, targets `ser`, causal
/// mask, absolute positions.
pub fn seq_decoder_target(ser: &SosSerialization) -> DecoderInput {
    let n = ser.token_ids.len();
    let mut ids = vec![BOS];
    ids.extend_from_slice(&ser.token_ids[..n - 1]);
    DecoderInput {
        ids,
        positions: (0..n).collect(),
        targets: ser.token_ids.clone(),
        mask: KeyMask::causal(n),
        layout: SegmentLayout::from_spans(vec![Span { start: 0, len: n }], n).expect("single span"),
    }
}

pub fn decoder_target(ser: &SosSerialization, mode: LossMode) -> DecoderInput {
    match mode {
        LossMode::Sos => sos_decoder_target(ser),
        LossMode::Seq => seq_decoder_target(ser),
    }
}

/// Graph-side target set for a sample under `mode`.
pub fn graph_target_set(sample: &StateSample, mode: TargetMode, v: &Vocabulary) -> Result<SosSerialization, SosError> {
    match mode {
        TargetMode::Diff => {
            let adds: BTreeSet<_> = sample.graph_additions();
            encode_graph_set(adds.iter(), v)
        }
        TargetMode::Full => encode_graph_set(sample.next.graph.iter(), v),
        TargetMode::AddDel => encode_rule_set(&diff(&sample.prev.graph, &sample.next.graph), v),
    }
}

/// Valid actions of the next state.
pub fn action_target_set(sample: &StateSample, v: &Vocabulary) -> Result<SosSerialization, SosError> {
    encode_action_set(sample.next.valid_actions.iter(), v)
}

/// Everything one training step needs from a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub inputs: EncoderInputs,
    pub graph: Option<DecoderInput>,
    pub action: Option<DecoderInput>,
}

/// Decoder sequences longer than the block's input length lose trailing
/// elements (whole ones).
pub fn prepare(sample: &StateSample, vocabs: &Vocabs, cfg: &ModelConfig) -> Result<PreparedSample, SosError> {
    let inputs = encoder_inputs(sample, vocabs, cfg)?;
    let graph = if cfg.trains_graph() {
        let ser = graph_target_set(sample, cfg.target, &vocabs.graph)?;
        let ser = fit_elements(&ser, cfg.graph_decoder.input_len);
        Some(decoder_target(&ser, cfg.loss))
    } else {
        None
    };
    let action = if cfg.trains_action() {
        let ser = action_target_set(sample, &vocabs.action)?;
        let ser = fit_elements(&ser, cfg.action_decoder.input_len);
        Some(decoder_target(&ser, cfg.loss))
    } else {
        None
    };
    Ok(PreparedSample { inputs, graph, action })
}

#[cfg(test)]
mod tests {
    use super::*;
    use worldkit_core::sos::sos_attention_mask;

    fn ser(elems: &[&[TokenId]]) -> SosSerialization {
        let v: Vec<Vec<TokenId>> = elems.iter().map(|e| e.to_vec()).collect();
        SosSerialization::from_elements(&v, worldkit_core::sos::ElementSource::Triple)
    }

    #[test]
    fn sos_target_blocks() {
        let d = sos_decoder_target(&ser(&[&[10, 11, 12], &[20, 21, 22]]));
        assert_eq!(d.ids, vec![SEP, 10, 11, 12, SEP, 20, 21, 22, SEP]);
        assert_eq!(d.targets, vec![10, 11, 12, SEP, 20, 21, 22, SEP, EOS]);
        assert_eq!(d.positions, vec![0, 1, 2, 3, 0, 1, 2, 3, 0]);
        assert_eq!(d.layout.num_elements(), 3);
        assert_eq!(d.mask, KeyMask::from_spec(&sos_attention_mask(&d.layout)));
    }

    #[test]
    fn empty_set_targets() {
        let empty = ser(&[]);
        let d = sos_decoder_target(&empty);
        assert_eq!((d.ids, d.targets), (vec![SEP], vec![EOS]));
        let s = seq_decoder_target(&empty);
        assert_eq!((s.ids, s.targets), (vec![BOS], vec![EOS]));
    }

    #[test]
    fn seq_target_is_shifted() {
        let s = seq_decoder_target(&ser(&[&[10, 11], &[20]]));
        assert_eq!(s.ids, vec![BOS, 10, 11, SEP, 20]);
        assert_eq!(s.targets, vec![10, 11, SEP, 20, EOS]);
        assert_eq!(s.mask, KeyMask::causal(5));
    }

    #[test]
    fn fitting_drops_whole_elements() {
        let s = ser(&[&[10, 11, 12], &[20, 21, 22], &[30, 31, 32]]);
        let f = fit_elements(&s, 9);
        assert_eq!(f.layout.num_elements(), 2);
        assert!(sos_decoder_target(&f).len() <= 9);
    }
}
