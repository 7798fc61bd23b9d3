//! The encoder/aggregator/decoder network: parameter layout, tape forward
//! passes for training, and a cached incremental decoder for generation.

use worldkit_core::sos::TokenId;

use crate::config::{BlockConfig, ConfigError, ModelConfig, Task, GRAPH_POSITIONS};
use crate::features::{DecoderInput, EncoderInputs, Vocabs};
use crate::params::{Init, ParamBuilder, ParamId, Parameters};
use crate::tape::{affine, attend, KeyMask, NodeId, Tape};
use crate::tensor::{gelu, layer_norm, Mat};

const INIT_STD: f64 = 0.02;

pub type NormIds = (ParamId, ParamId);

#[derive(Debug, Clone)]
pub struct AttnIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Debug, Clone)]
pub struct LayerIds {
    pub ln1: NormIds,
    pub attn: AttnIds,
    pub cross: Option<(NormIds, AttnIds)>,
    pub ln2: NormIds,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct StackIds {
    pub heads: usize,
    pub layers: Vec<LayerIds>,
    pub ln_f: NormIds,
}

#[derive(Debug, Clone)]
pub struct EncoderIds {
    pub tok: ParamId,
    pub pos: ParamId,
    pub stack: StackIds,
}

#[derive(Debug, Clone)]
pub struct AggregatorIds {
    pub source: ParamId,
    pub stack: StackIds,
}

#[derive(Debug, Clone)]
pub struct DecoderIds {
    pub tok: ParamId,
    pub pos: ParamId,
    pub stack: StackIds,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct HeadIds {
    pub w: ParamId,
    pub b: ParamId,
}

/// Ids of every tensor, grouped by block. Tensor names carry the block
/// name as prefix (`text_encoder.`, `graph_decoder.`, ...).
#[derive(Debug, Clone)]
pub struct Layout {
    pub text_encoder: EncoderIds,
    pub graph_encoder: EncoderIds,
    pub aggregator: AggregatorIds,
    pub action_decoder: DecoderIds,
    pub graph_decoder: DecoderIds,
    pub text_mlm: HeadIds,
    pub graph_mlm: HeadIds,
}

/// Parameter-name prefixes of the trainable blocks, in declaration order.
pub const BLOCKS: [&str; 7] = [
    "text_encoder.",
    "graph_encoder.",
    "aggregator.",
    "action_decoder.",
    "graph_decoder.",
    "text_mlm.",
    "graph_mlm.",
];

fn norm(b: &mut ParamBuilder, name: &str, d: usize) -> NormIds {
    (
        b.add(&format!("{name}.g"), 1, d, Init::Ones),
        b.add(&format!("{name}.b"), 1, d, Init::Zeros),
    )
}

fn attn(b: &mut ParamBuilder, name: &str, d: usize) -> AttnIds {
    let mut lin = |n: &str| {
        (
            b.add(&format!("{name}.w{n}"), d, d, Init::Normal(INIT_STD)),
            b.add(&format!("{name}.b{n}"), 1, d, Init::Zeros),
        )
    };
    let (wq, bq) = lin("q");
    let (wk, bk) = lin("k");
    let (wv, bv) = lin("v");
    let (wo, bo) = lin("o");
    AttnIds {
        wq,
        bq,
        wk,
        bk,
        wv,
        bv,
        wo,
        bo,
    }
}

fn stack(b: &mut ParamBuilder, prefix: &str, d: usize, cfg: &BlockConfig, cross: bool) -> StackIds {
    let layers = (0..cfg.layers)
        .map(|i| {
            let p = format!("{prefix}.layer{i}");
            let ln1 = norm(b, &format!("{p}.ln1"), d);
            let a = attn(b, &format!("{p}.self"), d);
            let cross = cross.then(|| (norm(b, &format!("{p}.ln_cross"), d), attn(b, &format!("{p}.cross"), d)));
            let ln2 = norm(b, &format!("{p}.ln2"), d);
            LayerIds {
                ln1,
                attn: a,
                cross,
                ln2,
                w1: b.add(&format!("{p}.ffn.w1"), d, cfg.ffn, Init::Normal(INIT_STD)),
                b1: b.add(&format!("{p}.ffn.b1"), 1, cfg.ffn, Init::Zeros),
                w2: b.add(&format!("{p}.ffn.w2"), cfg.ffn, d, Init::Normal(INIT_STD)),
                b2: b.add(&format!("{p}.ffn.b2"), 1, d, Init::Zeros),
            }
        })
        .collect();
    StackIds {
        heads: cfg.heads,
        layers,
        ln_f: norm(b, &format!("{prefix}.ln_f"), d),
    }
}

fn declare(b: &mut ParamBuilder, cfg: &ModelConfig, text_v: usize, graph_v: usize, action_v: usize) -> Layout {
    let d = cfg.d_model;
    let n = |b: &mut ParamBuilder, name: &str, rows: usize, cols: usize| b.add(name, rows, cols, Init::Normal(INIT_STD));
    let text_encoder = EncoderIds {
        tok: n(b, "text_encoder.tok", text_v, d),
        pos: n(b, "text_encoder.pos", cfg.text_encoder.input_len, d),
        stack: stack(b, "text_encoder", d, &cfg.text_encoder, false),
    };
    let graph_encoder = EncoderIds {
        tok: n(b, "graph_encoder.tok", graph_v, d),
        pos: n(b, "graph_encoder.pos", GRAPH_POSITIONS, d),
        stack: stack(b, "graph_encoder", d, &cfg.graph_encoder, false),
    };
    let aggregator = AggregatorIds {
        source: n(b, "aggregator.source", 2, d),
        stack: stack(b, "aggregator", d, &cfg.aggregator, false),
    };
    let decoder = |b: &mut ParamBuilder, name: &str, block: &BlockConfig, v: usize| DecoderIds {
        tok: n(b, &format!("{name}.tok"), v, d),
        pos: n(b, &format!("{name}.pos"), block.input_len, d),
        stack: stack(b, name, d, block, true),
        out_w: n(b, &format!("{name}.out.w"), d, v),
        out_b: b.add(&format!("{name}.out.b"), 1, v, Init::Zeros),
    };
    let action_decoder = decoder(b, "action_decoder", &cfg.action_decoder, action_v);
    let graph_decoder = decoder(b, "graph_decoder", &cfg.graph_decoder, graph_v);
    let head = |b: &mut ParamBuilder, name: &str, v: usize| HeadIds {
        w: n(b, &format!("{name}.w"), d, v),
        b: b.add(&format!("{name}.b"), 1, v, Init::Zeros),
    };
    let text_mlm = head(b, "text_mlm", text_v);
    let graph_mlm = head(b, "graph_mlm", graph_v);
    Layout {
        text_encoder,
        graph_encoder,
        aggregator,
        action_decoder,
        graph_decoder,
        text_mlm,
        graph_mlm,
    }
}

/// Encoder outputs of one state (`O`, `G` and the aggregated `S`).
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedState {
    pub text: Mat,
    pub graph: Mat,
    pub state: Mat,
}

/// Tape nodes holding the three encodings.
#[derive(Debug, Clone, Copy)]
pub struct TapeEncoding {
    pub text: NodeId,
    pub graph: NodeId,
    pub state: NodeId,
}

#[derive(Debug, Clone)]
pub struct WorldModel {
    pub config: ModelConfig,
    pub vocabs: Vocabs,
    pub params: Parameters,
    pub layout: Layout,
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("parameter `{0}` missing or misshapen")]
    Tensor(String),
    #[error("expected {expected} tensors, found {found}")]
    TensorCount { expected: usize, found: usize },
}

impl WorldModel {
    /// Freshly initialized from `config.seed`.
    pub fn new(config: ModelConfig, vocabs: Vocabs) -> Result<Self, ModelError> {
        config.validate()?;
        let mut b = ParamBuilder::new(config.seed);
        let layout = declare(&mut b, &config, vocabs.text.len(), vocabs.graph.len(), vocabs.action.len());
        Ok(Self {
            config,
            vocabs,
            params: b.finish(),
            layout,
        })
    }

    /// Rebuilds a model around stored tensors, checking names and shapes.
    pub fn from_parts(config: ModelConfig, vocabs: Vocabs, params: Parameters) -> Result<Self, ModelError> {
        let mut m = Self::new(config, vocabs)?;
        if params.len() != m.params.len() {
            return Err(ModelError::TensorCount {
                expected: m.params.len(),
                found: params.len(),
            });
        }
        for id in 0..m.params.len() {
            let (want, got) = (m.params.get(id), params.get(id));
            if params.name(id) != m.params.name(id) || want.shape() != got.shape() {
                return Err(ModelError::Tensor(m.params.name(id).to_string()));
            }
        }
        m.params = params;
        Ok(m)
    }

    fn decoder_ids(&self, task: Task) -> &DecoderIds {
        match task {
            Task::Action => &self.layout.action_decoder,
            Task::Graph => &self.layout.graph_decoder,
        }
    }

    fn decoder_block(&self, task: Task) -> &BlockConfig {
        match task {
            Task::Action => &self.config.action_decoder,
            Task::Graph => &self.config.graph_decoder,
        }
    }

    pub fn vocab_size(&self, task: Task) -> usize {
        match task {
            Task::Action => self.vocabs.action.len(),
            Task::Graph => self.vocabs.graph.len(),
        }
    }

    // ---- tape forward ----

    fn attention_tape(t: &mut Tape, xq: NodeId, xkv: NodeId, a: &AttnIds, heads: usize, mask: &KeyMask) -> NodeId {
        let q = t.affine(xq, a.wq, a.bq);
        let k = t.affine(xkv, a.wk, a.bk);
        let v = t.affine(xkv, a.wv, a.bv);
        let o = t.attend(q, k, v, heads, mask);
        t.affine(o, a.wo, a.bo)
    }

    /// Pre-norm residual stack. `masks[i]` governs self-attention of layer
    /// `i` (the last mask repeats).
    fn stack_tape(t: &mut Tape, mut x: NodeId, s: &StackIds, masks: &[&KeyMask], memory: Option<NodeId>) -> NodeId {
        for (i, l) in s.layers.iter().enumerate() {
            let mask = masks[i.min(masks.len() - 1)];
            let h = t.layer_norm(x, l.ln1.0, l.ln1.1);
            let a = Self::attention_tape(t, h, h, &l.attn, s.heads, mask);
            let a = t.dropout(a);
            x = t.add(x, a);
            if let (Some((ln, ca)), Some(mem)) = (&l.cross, memory) {
                let h = t.layer_norm(x, ln.0, ln.1);
                let a = Self::attention_tape(t, h, mem, ca, s.heads, &KeyMask::Full);
                let a = t.dropout(a);
                x = t.add(x, a);
            }
            let h = t.layer_norm(x, l.ln2.0, l.ln2.1);
            let f = t.affine(h, l.w1, l.b1);
            let f = t.gelu(f);
            let f = t.affine(f, l.w2, l.b2);
            let f = t.dropout(f);
            x = t.add(x, f);
        }
        t.layer_norm(x, s.ln_f.0, s.ln_f.1)
    }

    fn embed_tape(t: &mut Tape, tok: ParamId, pos: ParamId, ids: &[TokenId], positions: &[usize]) -> NodeId {
        let e = t.embed(tok, ids);
        let p = t.embed(pos, positions);
        let x = t.add(e, p);
        t.dropout(x)
    }

    /// Bidirectional text encoder with absolute positions.
    pub fn encode_text_tape(&self, t: &mut Tape, ids: &[TokenId]) -> NodeId {
        let e = &self.layout.text_encoder;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let x = Self::embed_tape(t, e.tok, e.pos, ids, &positions);
        Self::stack_tape(t, x, &e.stack, &[&KeyMask::Full], None)
    }

    /// Graph encoder. The first layer attends within each triple, later
    /// layers attend everywhere, and positions are within-triple offsets, so
    /// reordering triples only reorders output rows.
    pub fn encode_graph_tape(&self, t: &mut Tape, ids: &[TokenId], positions: &[usize], local: &[(usize, usize)]) -> NodeId {
        let e = &self.layout.graph_encoder;
        let x = Self::embed_tape(t, e.tok, e.pos, ids, positions);
        let local = KeyMask::Ranges(local.to_vec());
        Self::stack_tape(t, x, &e.stack, &[&local, &KeyMask::Full], None)
    }

    /// Rows of each encoding kept by the aggregator (graph side cut first).
    pub fn aggregate_lengths(&self, n_text: usize, n_graph: usize) -> (usize, usize) {
        let cap = self.config.aggregator.input_len;
        let nt = n_text.min(cap);
        (nt, n_graph.min(cap - nt))
    }

    pub fn aggregate_tape(&self, t: &mut Tape, text: NodeId, graph: NodeId) -> NodeId {
        let a = &self.layout.aggregator;
        let (nt, ng) = self.aggregate_lengths(t.value(text).rows, t.value(graph).rows);
        if ng < t.value(graph).rows || nt < t.value(text).rows {
            log::debug!("aggregator input cut to {nt} text + {ng} graph rows");
        }
        let text = if nt < t.value(text).rows { t.slice_rows(text, 0, nt) } else { text };
        let graph = if ng < t.value(graph).rows { t.slice_rows(graph, 0, ng) } else { graph };
        let x = t.concat(&[text, graph]);
        let src: Vec<usize> = std::iter::repeat_n(0, nt).chain(std::iter::repeat_n(1, ng)).collect();
        let s = t.embed(a.source, &src);
        let x = t.add(x, s);
        Self::stack_tape(t, x, &a.stack, &[&KeyMask::Full], None)
    }

    pub fn encode_tape(&self, t: &mut Tape, inputs: &EncoderInputs) -> TapeEncoding {
        let text = self.encode_text_tape(t, &inputs.text_ids);
        let graph = self.encode_graph_tape(t, &inputs.graph_ids, &inputs.graph_positions, &inputs.graph_local);
        let state = self.aggregate_tape(t, text, graph);
        TapeEncoding { text, graph, state }
    }

    /// Cross-attention memory: `[S; O]` for actions, `[S; G]` for graphs.
    pub fn memory_tape(&self, t: &mut Tape, task: Task, enc: &TapeEncoding) -> NodeId {
        let side = match task {
            Task::Action => enc.text,
            Task::Graph => enc.graph,
        };
        t.concat(&[enc.state, side])
    }

    /// Teacher-forced logits `(target length × vocab)`.
    pub fn decode_tape(&self, t: &mut Tape, task: Task, memory: NodeId, target: &DecoderInput) -> NodeId {
        let d = self.decoder_ids(task);
        let x = Self::embed_tape(t, d.tok, d.pos, &target.ids, &target.positions);
        let h = Self::stack_tape(t, x, &d.stack, &[&target.mask], Some(memory));
        t.affine(h, d.out_w, d.out_b)
    }

    pub fn text_mlm_tape(&self, t: &mut Tape, ids: &[TokenId]) -> NodeId {
        let h = self.encode_text_tape(t, ids);
        t.affine(h, self.layout.text_mlm.w, self.layout.text_mlm.b)
    }

    pub fn graph_mlm_tape(&self, t: &mut Tape, ids: &[TokenId], positions: &[usize], local: &[(usize, usize)]) -> NodeId {
        let h = self.encode_graph_tape(t, ids, positions, local);
        t.affine(h, self.layout.graph_mlm.w, self.layout.graph_mlm.b)
    }

    // ---- inference ----

    /// Dropout-free encoding of one state.
    pub fn encode(&self, inputs: &EncoderInputs) -> EncodedState {
        let mut t = Tape::new(&self.params);
        let e = self.encode_tape(&mut t, inputs);
        EncodedState {
            text: t.value(e.text).clone(),
            graph: t.value(e.graph).clone(),
            state: t.value(e.state).clone(),
        }
    }

    pub fn memory(&self, task: Task, enc: &EncodedState) -> Mat {
        let side = match task {
            Task::Action => &enc.text,
            Task::Graph => &enc.graph,
        };
        Mat::concat_rows(&[&enc.state, side])
    }

    /// Dropout-free teacher-forced logits against a fixed memory.
    pub fn decode_logits(&self, task: Task, memory: &Mat, target: &DecoderInput) -> Mat {
        let mut t = Tape::new(&self.params);
        let m = t.leaf(memory.clone());
        let l = self.decode_tape(&mut t, task, m, target);
        t.value(l).clone()
    }

    /// Incremental decoder over a fixed memory.
    pub fn decoder(&self, task: Task, memory: &Mat) -> IncrementalDecoder<'_> {
        let d = self.decoder_ids(task);
        let p = &self.params;
        let cross = d
            .stack
            .layers
            .iter()
            .map(|l| {
                let (_, a) = l.cross.as_ref().expect("decoder layers have cross-attention");
                (affine(memory, p.get(a.wk), p.get(a.bk)), affine(memory, p.get(a.wv), p.get(a.bv)))
            })
            .collect();
        IncrementalDecoder {
            params: p,
            ids: d,
            max_positions: self.decoder_block(task).input_len,
            cross,
        }
    }
}

/// Self-attention keys and values of the tokens decoded so far.
#[derive(Debug, Clone)]
pub struct KvCache {
    k: Vec<Mat>,
    v: Vec<Mat>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.k.first().map_or(0, |m| m.rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Decodes one token at a time, reusing cached keys and values. Each
/// hypothesis owns its cache; cross-attention projections are shared.
pub struct IncrementalDecoder<'m> {
    params: &'m Parameters,
    ids: &'m DecoderIds,
    max_positions: usize,
    cross: Vec<(Mat, Mat)>,
}

impl IncrementalDecoder<'_> {
    pub fn empty_cache(&self) -> KvCache {
        let d = self.params.get(self.ids.tok).cols;
        let n = self.ids.stack.layers.len();
        KvCache {
            k: vec![Mat::zeros(0, d); n],
            v: vec![Mat::zeros(0, d); n],
        }
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions
    }

    /// Feeds `token` at `position`, attending to everything in `cache`, and
    /// returns next-token logits.
    pub fn step(&self, cache: &mut KvCache, token: TokenId, position: usize) -> Vec<f64> {
        let p = self.params;
        let s = &self.ids.stack;
        let mut x = Mat::from_vec(1, p.get(self.ids.tok).cols, p.get(self.ids.tok).row(token).to_vec());
        x.add_assign(&Mat::from_vec(1, x.cols, p.get(self.ids.pos).row(position).to_vec()));
        let ln = |x: &Mat, n: &NormIds| layer_norm(x, &p.get(n.0).data, &p.get(n.1).data).0;
        for (i, l) in s.layers.iter().enumerate() {
            let h = ln(&x, &l.ln1);
            let a = &l.attn;
            let q = affine(&h, p.get(a.wq), p.get(a.bq));
            cache.k[i].append_rows(&affine(&h, p.get(a.wk), p.get(a.bk)));
            cache.v[i].append_rows(&affine(&h, p.get(a.wv), p.get(a.bv)));
            let (o, _) = attend(&q, &cache.k[i], &cache.v[i], s.heads, &KeyMask::Full);
            x.add_assign(&affine(&o, p.get(a.wo), p.get(a.bo)));
            let (cln, ca) = l.cross.as_ref().expect("decoder layers have cross-attention");
            let h = ln(&x, cln);
            let q = affine(&h, p.get(ca.wq), p.get(ca.bq));
            let (o, _) = attend(&q, &self.cross[i].0, &self.cross[i].1, s.heads, &KeyMask::Full);
            x.add_assign(&affine(&o, p.get(ca.wo), p.get(ca.bo)));
            let h = ln(&x, &l.ln2);
            let mut f = affine(&h, p.get(l.w1), p.get(l.b1));
            f.data.iter_mut().for_each(|v| *v = gelu(*v));
            x.add_assign(&affine(&f, p.get(l.w2), p.get(l.b2)));
        }
        let h = ln(&x, &s.ln_f);
        affine(&h, p.get(self.ids.out_w), p.get(self.ids.out_b)).data
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::features::{prepare, sos_decoder_target, seq_decoder_target};
    use worldkit_core::sos::{ElementSource, SosSerialization};
    use worldkit_core::worldgen::{emit_corpus, generate_world, Policy};

    pub(crate) fn tiny_setup(seed: u64) -> (WorldModel, Vec<worldkit_core::data::StateSample>) {
        let spec = generate_world(seed, 3, 3, 2).unwrap();
        let samples = emit_corpus(&spec, Policy::Random, 12, seed).unwrap();
        let vocabs = Vocabs::build(&samples, 500).unwrap();
        let mut cfg = ModelConfig::tiny();
        cfg.seed = seed;
        (WorldModel::new(cfg, vocabs).unwrap(), samples)
    }

    #[test]
    fn parameter_count_matches_declaration() {
        let (m, _) = tiny_setup(1);
        let v = &m.vocabs;
        assert_eq!(
            m.params.num_scalars(),
            m.config.parameter_count(v.text.len(), v.graph.len(), v.action.len())
        );
        for id in 0..m.params.len() {
            assert!(BLOCKS.iter().any(|b| m.params.name(id).starts_with(b)), "{}", m.params.name(id));
        }
    }

    #[test]
    fn shapes_follow_inputs() {
        let (m, samples) = tiny_setup(2);
        let prep = prepare(&samples[0], &m.vocabs, &m.config).unwrap();
        let enc = m.encode(&prep.inputs);
        assert_eq!(enc.text.rows, prep.inputs.text_ids.len());
        assert_eq!(enc.graph.rows, prep.inputs.graph_ids.len());
        assert_eq!(enc.state.rows, enc.text.rows + enc.graph.rows);
        let g = prep.graph.unwrap();
        let logits = m.decode_logits(Task::Graph, &m.memory(Task::Graph, &enc), &g);
        assert_eq!(logits.shape(), (g.len(), m.vocabs.graph.len()));
    }

    #[test]
    fn aggregator_cuts_graph_side_first() {
        let (mut m, _) = tiny_setup(3);
        m.config.aggregator.input_len = 10;
        assert_eq!(m.aggregate_lengths(6, 8), (6, 4));
        assert_eq!(m.aggregate_lengths(12, 8), (10, 0));
        assert_eq!(m.aggregate_lengths(3, 4), (3, 4));
    }

    #[test]
    fn incremental_matches_teacher_forcing() {
        let (m, samples) = tiny_setup(4);
        let prep = prepare(&samples[3], &m.vocabs, &m.config).unwrap();
        let enc = m.encode(&prep.inputs);
        for task in [Task::Graph, Task::Action] {
            let mem = m.memory(task, &enc);
            let elems: Vec<Vec<usize>> = vec![vec![8, 9, 10], vec![11, 8]];
            let ser = SosSerialization::from_elements(&elems, ElementSource::Triple);
            for target in [sos_decoder_target(&ser), seq_decoder_target(&ser)] {
                let full = m.decode_logits(task, &mem, &target);
                let dec = m.decoder(task, &mem);
                let mut cache = dec.empty_cache();
                for p in 0..target.len() {
                    let (lo, _) = match &target.mask {
                        KeyMask::Ranges(r) => r[p],
                        _ => unreachable!(),
                    };
                    if p == lo {
                        cache = dec.empty_cache();
                    }
                    let step = dec.step(&mut cache, target.ids[p], target.positions[p]);
                    let diff = step.iter().zip(full.row(p)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    assert!(diff < 1e-10, "{task:?} position {p}: {diff}");
                }
            }
        }
    }

    #[test]
    fn graph_encoding_is_row_equivariant() {
        let (m, samples) = tiny_setup(5);
        let prep = prepare(&samples[0], &m.vocabs, &m.config).unwrap();
        let inp = &prep.inputs;
        // Swap the first two triples (positions 1..4 and 5..8).
        assert!(inp.graph_ids.len() >= 9);
        let perm: Vec<usize> = (0..inp.graph_ids.len())
            .map(|p| match p {
                1..=4 => p + 4,
                5..=8 => p - 4,
                _ => p,
            })
            .collect();
        let ids: Vec<usize> = perm.iter().map(|&p| inp.graph_ids[p]).collect();
        let positions: Vec<usize> = perm.iter().map(|&p| inp.graph_positions[p]).collect();
        let local: Vec<(usize, usize)> = inp
            .graph_local
            .iter()
            .enumerate()
            .map(|(p, &orig)| match p {
                1..=3 => (1, 4),
                5..=7 => (5, 8),
                0..=8 => (p, p + 1),
                _ => orig,
            })
            .collect();
        let mut t = Tape::new(&m.params);
        let a = m.encode_graph_tape(&mut t, &inp.graph_ids, &inp.graph_positions, &inp.graph_local);
        let b = m.encode_graph_tape(&mut t, &ids, &positions, &local);
        let (a, b) = (t.value(a), t.value(b));
        for (p, &src) in perm.iter().enumerate() {
            let d = a.row(src).iter().zip(b.row(p)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(d < 1e-12, "row {p}: {d}");
        }
    }

    #[test]
    fn empty_inputs_have_frame_shapes() {
        let (m, _) = tiny_setup(6);
        let mut t = Tape::new(&m.params);
        let x = m.encode_text_tape(&mut t, &[2, 3]);
        assert_eq!(t.value(x).shape(), (2, m.config.d_model));
    }
}
