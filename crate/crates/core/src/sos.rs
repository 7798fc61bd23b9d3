//! Set-of-sequences codec.
//!
//! A set of triples or actions is serialized as its elements in canonical
//! order, joined by `SEP` and terminated by `EOS`:
//!
//! ```text
//! e1_0 e1_1 e1_2 SEP e2_0 e2_1 e2_2 EOS
//! ```
//!
//! A [`SegmentLayout`] records where each element lives so the decoder can
//! restrict attention to within-element causal windows ([`sos_attention_mask`]).

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::StateSample;
use crate::kg::{GraphDiff, Triple};
use crate::text::{action_tokens, tokenize};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const SEP: TokenId = 4;
pub const MASK: TokenId = 5;
pub const ADD: TokenId = 6;
pub const DEL: TokenId = 7;

/// Reserved tokens, in id order. Every vocabulary starts with these.
pub const RESERVED_TOKENS: [&str; 8] = [
    "<pad>", "<unk>", "<bos>", "<eos>", "<sep>", "<mask>", "<add>", "<del>",
];

/// Longest action element kept by [`encode_action_set`].
pub const MAX_ACTION_TOKENS: usize = 5;

const VOCAB_HEADER: &str = "# worldkit-vocab v1";

#[derive(Debug, Error)]
pub enum SosError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("vocabulary kind mismatch: expected {expected}, got {actual}")]
    KindMismatch { expected: VocabKind, actual: VocabKind },
    #[error("masking rate must be in (0, 1), got {0}")]
    BadRate(f64),
    #[error("phrase masking needs a layout of 3-token triple elements (element {0} has length {1})")]
    NotTripleLayout(usize, usize),
    #[error("no maskable positions")]
    NothingToMask,
    #[error("invalid layout: {0}")]
    BadLayout(String),
    #[error("vocabulary file: {0}")]
    VocabFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabKind {
    Graph,
    Action,
    Text,
}

impl fmt::Display for VocabKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VocabKind::Graph => "graph",
            VocabKind::Action => "action",
            VocabKind::Text => "text",
        })
    }
}

impl std::str::FromStr for VocabKind {
    type Err = SosError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "graph" => Ok(VocabKind::Graph),
            "action" => Ok(VocabKind::Action),
            "text" => Ok(VocabKind::Text),
            other => Err(SosError::VocabFile(format!("unknown vocabulary kind `{other}`"))),
        }
    }
}

/// Dense token ↔ id mapping. Reserved tokens occupy ids `0..8`; the rest are
/// sorted by token string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    kind: VocabKind,
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn from_tokens<I, S>(kind: VocabKind, tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = tokens
            .into_iter()
            .map(Into::into)
            .filter(|t| !t.is_empty() && !RESERVED_TOKENS.contains(&t.as_str()))
            .collect();
        let tokens: Vec<String> = RESERVED_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(set)
            .collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            kind,
            tokens,
            index,
        }
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED_TOKENS.len()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED_TOKENS[UNK])
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_reserved(id: TokenId) -> bool {
        id < RESERVED_TOKENS.len()
    }

    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Vec<TokenId> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    fn expect_kind(&self, kind: VocabKind) -> Result<(), SosError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(SosError::KindMismatch {
                expected: kind,
                actual: self.kind,
            })
        }
    }

    /// File form: a header line, then one token per line (reserved first).
    pub fn to_file_string(&self) -> String {
        let mut s = format!("{VOCAB_HEADER} kind={}\n", self.kind);
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_str(text: &str) -> Result<Self, SosError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| SosError::VocabFile("empty file".into()))?;
        let kind = header
            .strip_prefix(VOCAB_HEADER)
            .and_then(|rest| rest.trim().strip_prefix("kind="))
            .ok_or_else(|| SosError::VocabFile(format!("bad header `{header}`")))?
            .parse()?;
        let tokens: Vec<String> = lines.map(str::to_string).collect();
        if tokens.len() < RESERVED_TOKENS.len()
            || tokens.iter().zip(RESERVED_TOKENS).any(|(a, b)| a != b)
        {
            return Err(SosError::VocabFile("reserved tokens missing or out of order".into()));
        }
        let rest = &tokens[RESERVED_TOKENS.len()..];
        if rest.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SosError::VocabFile("tokens are not strictly sorted".into()));
        }
        Ok(Self::from_tokens(kind, rest.iter().cloned()))
    }

    pub fn save(&self, path: &Path) -> Result<(), SosError> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SosError> {
        Self::from_file_str(&fs::read_to_string(path)?)
    }
}

/// Every token the given kind of model sees in `samples`.
pub fn build_vocab<'a, I>(samples: I, kind: VocabKind) -> Result<Vocabulary, SosError>
where
    I: IntoIterator<Item = &'a StateSample>,
{
    let mut tokens: BTreeSet<String> = BTreeSet::new();
    let mut any = false;
    for s in samples {
        any = true;
        match kind {
            VocabKind::Graph => {
                for t in s.prev.graph.iter().chain(s.next.graph.iter()) {
                    tokens.extend(t.components().iter().map(|c| c.to_string()));
                }
            }
            VocabKind::Action => {
                for a in s
                    .prev
                    .valid_actions
                    .iter()
                    .chain(&s.next.valid_actions)
                    .chain(std::iter::once(&s.action))
                {
                    tokens.extend(action_tokens(a));
                }
            }
            VocabKind::Text => {
                tokens.extend(text_tokens_of(s));
            }
        }
    }
    if !any {
        return Err(SosError::EmptyCorpus);
    }
    Ok(Vocabulary::from_tokens(kind, tokens))
}

fn text_tokens_of(s: &StateSample) -> impl Iterator<Item = String> + '_ {
    s.prev
        .observation_tokens()
        .into_iter()
        .chain(s.next.observation_tokens())
        .chain(tokenize(&s.action))
        .chain(s.prev.valid_actions.iter().flat_map(|a| tokenize(a)))
}

/// Text vocabulary capped at the `max_size` most frequent tokens (ties broken
/// by token string), ids then assigned in sorted order.
pub fn build_text_vocab<'a, I>(samples: I, max_size: usize) -> Result<Vocabulary, SosError>
where
    I: IntoIterator<Item = &'a StateSample>,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut any = false;
    for s in samples {
        any = true;
        for t in text_tokens_of(s) {
            *counts.entry(t).or_default() += 1;
        }
    }
    if !any {
        return Err(SosError::EmptyCorpus);
    }
    let mut by_freq: Vec<(String, usize)> = counts.into_iter().collect();
    by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    by_freq.truncate(max_size);
    Ok(Vocabulary::from_tokens(
        VocabKind::Text,
        by_freq.into_iter().map(|(t, _)| t),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ElementSource {
    Triple,
    Action,
    Rule,
}

/// One element of a set, as token ids (no framing tokens).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ElementSequence {
    pub tokens: Vec<TokenId>,
    pub source: ElementSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

/// Element boundaries of a token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentLayout {
    spans: Vec<Span>,
    len: usize,
    element_of: Vec<Option<usize>>,
    offset_of: Vec<Option<usize>>,
}

impl SegmentLayout {
    /// Spans must be non-empty, ordered, disjoint and inside `0..len`.
    pub fn from_spans(spans: Vec<Span>, len: usize) -> Result<Self, SosError> {
        let mut element_of = vec![None; len];
        let mut offset_of = vec![None; len];
        let mut next_free = 0;
        for (e, sp) in spans.iter().enumerate() {
            if sp.len == 0 {
                return Err(SosError::BadLayout(format!("element {e} is empty")));
            }
            if sp.start < next_free {
                return Err(SosError::BadLayout(format!("element {e} overlaps or is out of order")));
            }
            if sp.start + sp.len > len {
                return Err(SosError::BadLayout(format!("element {e} runs past position {len}")));
            }
            for k in 0..sp.len {
                element_of[sp.start + k] = Some(e);
                offset_of[sp.start + k] = Some(k);
            }
            next_free = sp.start + sp.len;
        }
        Ok(Self {
            spans,
            len,
            element_of,
            offset_of,
        })
    }

    /// Layout of the `SEP`/`EOS` framing for elements of the given lengths.
    pub fn framed(lengths: &[usize]) -> Self {
        let mut spans = Vec::with_capacity(lengths.len());
        let mut pos = 0;
        for &l in lengths {
            spans.push(Span { start: pos, len: l });
            pos += l + 1;
        }
        let len = pos.max(1);
        Self::from_spans(spans, len).expect("framed layout is valid")
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_elements(&self) -> usize {
        self.spans.len()
    }

    pub fn element_of(&self, pos: usize) -> Option<usize> {
        self.element_of[pos]
    }

    pub fn offset_of(&self, pos: usize) -> Option<usize> {
        self.offset_of[pos]
    }

    /// The same layout with every position moved right by `by` (e.g. after
    /// prefixing a `BOS`).
    pub fn shifted(&self, by: usize) -> Self {
        let spans = self
            .spans
            .iter()
            .map(|s| Span {
                start: s.start + by,
                len: s.len,
            })
            .collect();
        Self::from_spans(spans, self.len + by).expect("shift preserves validity")
    }
}

/// A flat token sequence plus its element layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SosSerialization {
    pub token_ids: Vec<TokenId>,
    pub layout: SegmentLayout,
    pub source: ElementSource,
}

impl SosSerialization {
    pub fn from_elements(elements: &[Vec<TokenId>], source: ElementSource) -> Self {
        let mut token_ids = Vec::new();
        for (i, e) in elements.iter().enumerate() {
            if i > 0 {
                token_ids.push(SEP);
            }
            token_ids.extend_from_slice(e);
        }
        token_ids.push(EOS);
        let lengths: Vec<usize> = elements.iter().map(Vec::len).collect();
        Self {
            token_ids,
            layout: SegmentLayout::framed(&lengths),
            source,
        }
    }

    pub fn elements(&self) -> Vec<&[TokenId]> {
        self.layout
            .spans()
            .iter()
            .map(|s| &self.token_ids[s.start..s.start + s.len])
            .collect()
    }

    pub fn element_sequences(&self) -> Vec<ElementSequence> {
        self.elements()
            .into_iter()
            .map(|t| ElementSequence {
                tokens: t.to_vec(),
                source: self.source,
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.num_elements() == 0
    }
}

/// Triple-tokenized serialization: one token per component, canonical order.
pub fn encode_graph_set<'a, I>(triples: I, v: &Vocabulary) -> Result<SosSerialization, SosError>
where
    I: IntoIterator<Item = &'a Triple>,
{
    v.expect_kind(VocabKind::Graph)?;
    let sorted: BTreeSet<&Triple> = triples.into_iter().collect();
    let elements: Vec<Vec<TokenId>> = sorted
        .into_iter()
        .map(|t| t.components().iter().map(|c| v.id(c)).collect())
        .collect();
    Ok(SosSerialization::from_elements(&elements, ElementSource::Triple))
}

/// Whitespace-tokenized actions in lexicographic order, each cut to
/// [`MAX_ACTION_TOKENS`].
pub fn encode_action_set<'a, I>(actions: I, v: &Vocabulary) -> Result<SosSerialization, SosError>
where
    I: IntoIterator<Item = &'a String>,
{
    v.expect_kind(VocabKind::Action)?;
    let sorted: BTreeSet<&String> = actions.into_iter().collect();
    let elements: Vec<Vec<TokenId>> = sorted
        .into_iter()
        .filter_map(|a| {
            let mut toks = action_tokens(a);
            if toks.len() > MAX_ACTION_TOKENS {
                log::warn!("action `{a}` has {} tokens; truncated to {MAX_ACTION_TOKENS}", toks.len());
                toks.truncate(MAX_ACTION_TOKENS);
            }
            (!toks.is_empty()).then(|| v.encode_words(&toks))
        })
        .collect();
    Ok(SosSerialization::from_elements(&elements, ElementSource::Action))
}

/// Add/delete rules `⟨ADD|DEL, s, r, o⟩` covering both sides of a diff.
pub fn encode_rule_set(d: &GraphDiff, v: &Vocabulary) -> Result<SosSerialization, SosError> {
    v.expect_kind(VocabKind::Graph)?;
    let rule = |marker: TokenId, t: &Triple| -> Vec<TokenId> {
        std::iter::once(marker)
            .chain(t.components().iter().map(|c| v.id(c)))
            .collect()
    };
    let elements: Vec<Vec<TokenId>> = d
        .additions()
        .iter()
        .map(|t| rule(ADD, t))
        .chain(d.deletions().iter().map(|t| rule(DEL, t)))
        .collect();
    Ok(SosSerialization::from_elements(&elements, ElementSource::Rule))
}

/// Output of [`decode_set`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DecodedSet {
    pub items: BTreeSet<String>,
    /// Elements dropped because they had the wrong shape.
    pub malformed: usize,
}

/// Splits raw output into elements: stops at the first `EOS`, splits on
/// `SEP`, drops empty elements, ignores `PAD`/`BOS`.
pub fn split_elements(tokens: &[TokenId]) -> Vec<Vec<TokenId>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for &t in tokens {
        match t {
            EOS => break,
            SEP => {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
            }
            PAD | BOS => {}
            _ => cur.push(t),
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn plain_element(e: &[TokenId]) -> bool {
    e.iter().all(|&t| !Vocabulary::is_reserved(t) || t == UNK)
}

/// Lenient inverse of the encoders. Graph-kind elements must be exactly three
/// non-framing tokens and come back in canonical `"s | r | o"` form; action
/// elements are space-joined.
pub fn decode_set(tokens: &[TokenId], v: &Vocabulary) -> DecodedSet {
    let mut out = DecodedSet::default();
    for e in split_elements(tokens) {
        match v.kind() {
            VocabKind::Graph => {
                if e.len() != 3 || !plain_element(&e) {
                    out.malformed += 1;
                    continue;
                }
                match Triple::new(v.token(e[0]), v.token(e[1]), v.token(e[2])) {
                    Ok(t) => {
                        out.items.insert(t.canonical());
                    }
                    Err(_) => out.malformed += 1,
                }
            }
            VocabKind::Action | VocabKind::Text => {
                if !plain_element(&e) {
                    out.malformed += 1;
                    continue;
                }
                let words: Vec<&str> = e.iter().map(|&t| v.token(t)).collect();
                out.items.insert(words.join(" "));
            }
        }
    }
    out
}

/// Graph-kind decode straight to triples. Returns `(triples, malformed)`.
pub fn decode_triples(tokens: &[TokenId], v: &Vocabulary) -> (BTreeSet<Triple>, usize) {
    let mut malformed = 0;
    let mut set = BTreeSet::new();
    for e in split_elements(tokens) {
        if e.len() != 3 || !plain_element(&e) {
            malformed += 1;
            continue;
        }
        match Triple::new(v.token(e[0]), v.token(e[1]), v.token(e[2])) {
            Ok(t) => {
                set.insert(t);
            }
            Err(_) => malformed += 1,
        }
    }
    (set, malformed)
}

/// Decoded add/delete rules.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DecodedRules {
    pub additions: BTreeSet<Triple>,
    pub deletions: BTreeSet<Triple>,
    pub malformed: usize,
}

pub fn decode_rules(tokens: &[TokenId], v: &Vocabulary) -> DecodedRules {
    let mut out = DecodedRules::default();
    for e in split_elements(tokens) {
        let ok = e.len() == 4 && (e[0] == ADD || e[0] == DEL) && plain_element(&e[1..]);
        let t = ok
            .then(|| Triple::new(v.token(e[1]), v.token(e[2]), v.token(e[3])).ok())
            .flatten();
        match t {
            Some(t) if e[0] == ADD => {
                out.additions.insert(t);
            }
            Some(t) => {
                out.deletions.insert(t);
            }
            None => out.malformed += 1,
        }
    }
    // A rule that both adds and deletes the same triple carries no information.
    let both: Vec<Triple> = out.additions.intersection(&out.deletions).cloned().collect();
    for t in both {
        out.additions.remove(&t);
        out.deletions.remove(&t);
    }
    out
}

/// Square boolean attention mask; `true` means query `p` may attend to key `q`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    size: usize,
    allowed: Vec<bool>,
}

impl MaskSpec {
    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(size * size);
        for p in 0..size {
            for q in 0..size {
                allowed.push(f(p, q));
            }
        }
        Self { size, allowed }
    }

    /// Plain left-to-right causal mask.
    pub fn causal(size: usize) -> Self {
        Self::from_fn(size, |p, q| q <= p)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allows(&self, p: usize, q: usize) -> bool {
        self.allowed[p * self.size + q]
    }

    pub fn set(&mut self, p: usize, q: usize, value: bool) {
        self.allowed[p * self.size + q] = value;
    }

    pub fn row(&self, p: usize) -> &[bool] {
        &self.allowed[p * self.size..(p + 1) * self.size]
    }
}

/// Block-diagonal causal mask: `p` attends to `q` iff both lie in the same
/// element and `q ≤ p`. Positions outside every element attend only to
/// themselves.
pub fn sos_attention_mask(layout: &SegmentLayout) -> MaskSpec {
    MaskSpec::from_fn(layout.len(), |p, q| match (layout.element_of(p), layout.element_of(q)) {
        (Some(a), Some(b)) => a == b && q <= p,
        _ => p == q,
    })
}

/// Reorders elements by `perm` (element `i` of the output is element
/// `perm[i]` of the input).
pub fn permute_elements(s: &SosSerialization, perm: &[usize]) -> SosSerialization {
    let elems = s.elements();
    assert_eq!(perm.len(), elems.len(), "permutation length must match element count");
    let reordered: Vec<Vec<TokenId>> = perm.iter().map(|&i| elems[i].to_vec()).collect();
    SosSerialization::from_elements(&reordered, s.source)
}

/// Seeded random element permutation.
pub fn shuffle_elements(s: &SosSerialization, seed: u64) -> SosSerialization {
    let mut perm: Vec<usize> = (0..s.layout.num_elements()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    permute_elements(s, &perm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskScheme {
    /// Independent per-token masking.
    Token,
    /// Whole triple components masked as units.
    Phrase,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlmMasked {
    pub inputs: Vec<TokenId>,
    /// Masked positions, ascending.
    pub positions: Vec<usize>,
    /// Original token at each masked position.
    pub labels: Vec<TokenId>,
}

/// Component spans of a triple layout: each component of each element.
fn triple_components(layout: &SegmentLayout) -> Result<Vec<Span>, SosError> {
    let mut comps = Vec::new();
    for (e, sp) in layout.spans().iter().enumerate() {
        if sp.len != 3 {
            return Err(SosError::NotTripleLayout(e, sp.len));
        }
        // One token per component under the triple tokenizer.
        for k in 0..3 {
            comps.push(Span {
                start: sp.start + k,
                len: 1,
            });
        }
    }
    Ok(comps)
}

/// Masked-language-model corruption. Masked tokens are replaced by `MASK`;
/// at least one unit is always masked.
pub fn mlm_mask(
    tokens: &[TokenId],
    rate: f64,
    scheme: MaskScheme,
    layout: &SegmentLayout,
    seed: u64,
) -> Result<MlmMasked, SosError> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(SosError::BadRate(rate));
    }
    let units: Vec<Span> = match scheme {
        MaskScheme::Token => tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| !Vocabulary::is_reserved(t))
            .map(|(i, _)| Span { start: i, len: 1 })
            .collect(),
        MaskScheme::Phrase => {
            if layout.len() != tokens.len() {
                return Err(SosError::BadLayout(format!(
                    "layout covers {} positions, sequence has {}",
                    layout.len(),
                    tokens.len()
                )));
            }
            triple_components(layout)?
        }
    };
    if units.is_empty() {
        return Err(SosError::NothingToMask);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<bool> = units.iter().map(|_| rng.gen_bool(rate)).collect();
    if !chosen.iter().any(|&c| c) {
        let k = rng.gen_range(0..units.len());
        chosen[k] = true;
    }
    let mut inputs = tokens.to_vec();
    let mut positions = Vec::new();
    let mut labels = Vec::new();
    for (u, _) in units.iter().zip(&chosen).filter(|(_, &c)| c) {
        for p in u.start..u.start + u.len {
            positions.push(p);
            labels.push(tokens[p]);
            inputs[p] = MASK;
        }
    }
    Ok(MlmMasked {
        inputs,
        positions,
        labels,
    })
}
