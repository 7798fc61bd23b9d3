//! Dataset records: parsing, validation, writing, splitting and statistics.
//!
//! Records follow the public state-transition corpus layout: one `⟨S_t, A, S_{t+1}, R⟩` tuple
//! per JSON object. Files may be a JSON array or newline-delimited JSON. All
//! accepted key spellings live in [`SCHEMA`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::kg::{diff, KnowledgeGraph, Triple};
use crate::text::{normalize_action, tokenize};

pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}: no parseable records")]
    NoRecords(PathBuf),
    #[error("{path}: malformed JSON array: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("empty sample set")]
    Empty,
    #[error("split fraction must be in (0, 1), got {0}")]
    BadFraction(f64),
}

/// Key spellings for each logical field, first entry is what the writer emits.
pub struct Schema {
    pub game: &'static [&'static str],
    pub state: &'static [&'static str],
    pub next_state: &'static [&'static str],
    pub action: &'static [&'static str],
    pub reward: &'static [&'static str],
    pub location: &'static [&'static str],
    pub location_text: &'static [&'static str],
    pub observation: &'static [&'static str],
    pub inventory_text: &'static [&'static str],
    pub inventory_objects: &'static [&'static str],
    pub inventory_attributes: &'static [&'static str],
    pub surrounding_objects: &'static [&'static str],
    pub surrounding_attributes: &'static [&'static str],
    pub graph: &'static [&'static str],
    pub valid_actions: &'static [&'static str],
}

pub const SCHEMA: Schema = Schema {
    game: &["rom", "game"],
    state: &["state"],
    next_state: &["next_state", "next"],
    action: &["action", "act"],
    reward: &["reward"],
    location: &["location"],
    location_text: &["loc_desc", "location_text"],
    observation: &["obs", "observation"],
    inventory_text: &["inv_desc", "inventory"],
    inventory_objects: &["inv_objs", "inventory_objects"],
    inventory_attributes: &["inv_attrs", "inventory_attributes"],
    surrounding_objects: &["surrounding_objs", "surrounding_objects"],
    surrounding_attributes: &["surrounding_attrs", "surrounding_attributes"],
    graph: &["graph"],
    valid_actions: &["valid_acts", "valid_actions"],
};

/// One observed game state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub game: String,
    pub location: String,
    pub location_text: String,
    pub observation: String,
    pub inventory_text: String,
    pub inventory_objects: Value,
    pub inventory_attributes: Value,
    pub surrounding_objects: Value,
    pub surrounding_attributes: Value,
    pub graph: KnowledgeGraph,
    pub valid_actions: BTreeSet<String>,
}

impl StateSnapshot {
    pub fn new(game: &str, location: &str, graph: KnowledgeGraph, valid_actions: BTreeSet<String>) -> Self {
        Self {
            game: game.to_string(),
            location: location.to_string(),
            location_text: String::new(),
            observation: String::new(),
            inventory_text: String::new(),
            inventory_objects: Value::Object(Map::new()),
            inventory_attributes: Value::Object(Map::new()),
            surrounding_objects: Value::Object(Map::new()),
            surrounding_attributes: Value::Object(Map::new()),
            graph,
            valid_actions,
        }
    }

    /// Observation fields in encoder order: location text, observation,
    /// inventory text.
    pub fn observation_fields(&self) -> [&str; 3] {
        [&self.location_text, &self.observation, &self.inventory_text]
    }

    pub fn observation_tokens(&self) -> Vec<String> {
        self.observation_fields()
            .iter()
            .flat_map(|f| tokenize(f))
            .collect()
    }
}

/// One `⟨S_t, A, S_{t+1}, R⟩` transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSample {
    pub prev: StateSnapshot,
    pub action: String,
    pub next: StateSnapshot,
    pub reward: f64,
}

impl StateSample {
    pub fn game(&self) -> &str {
        &self.prev.game
    }

    /// Triples added between the two states.
    pub fn graph_additions(&self) -> BTreeSet<Triple> {
        diff(&self.prev.graph, &self.next.graph).additions().clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub file: PathBuf,
    pub index: usize,
    pub reason: String,
}

/// What happened to every record seen by [`load_corpus`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub total: usize,
    pub parsed: usize,
    pub skipped: Vec<SkippedRecord>,
}

fn lookup<'a>(obj: &'a Map<String, Value>, keys: &[&str]) -> Option<&'a Value> {
    keys.iter().find_map(|k| obj.get(*k))
}

fn text_field(obj: &Map<String, Value>, keys: &[&str]) -> Result<String, String> {
    match lookup(obj, keys) {
        None | Some(Value::Null) => Ok(String::new()),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(format!("field `{}` is not a string: {other}", keys[0])),
    }
}

fn free_form(obj: &Map<String, Value>, keys: &[&str]) -> Value {
    lookup(obj, keys)
        .cloned()
        .unwrap_or_else(|| Value::Object(Map::new()))
}

fn parse_location(obj: &Map<String, Value>) -> Result<String, String> {
    match lookup(obj, SCHEMA.location) {
        None | Some(Value::Null) => Ok(String::new()),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Object(m)) => match m.get("name") {
            Some(Value::String(s)) => Ok(s.clone()),
            _ => Ok(String::new()),
        },
        Some(other) => Err(format!("field `location` has unexpected shape: {other}")),
    }
}

fn parse_graph(obj: &Map<String, Value>) -> Result<KnowledgeGraph, String> {
    let Some(raw) = lookup(obj, SCHEMA.graph) else {
        return Err("missing field `graph`".into());
    };
    let items = raw.as_array().ok_or("field `graph` is not an array")?;
    let mut g = KnowledgeGraph::new();
    for (i, item) in items.iter().enumerate() {
        let parts = item
            .as_array()
            .ok_or_else(|| format!("graph entry {i} is not an array"))?;
        let strs: Vec<&str> = parts
            .iter()
            .map(|p| p.as_str().ok_or_else(|| format!("graph entry {i} has a non-string component")))
            .collect::<Result<_, _>>()?;
        let t = Triple::from_parts(&strs).map_err(|e| format!("graph entry {i}: {e}"))?;
        g.insert(t);
    }
    Ok(g)
}

fn parse_actions(obj: &Map<String, Value>) -> Result<BTreeSet<String>, String> {
    let Some(raw) = lookup(obj, SCHEMA.valid_actions) else {
        return Err("missing field `valid_acts`".into());
    };
    let strings: Vec<&Value> = match raw {
        Value::Array(a) => a.iter().collect(),
        // The public release keys actions by state hash.
        Value::Object(m) => m.values().collect(),
        _ => return Err("field `valid_acts` is neither array nor object".into()),
    };
    let mut out = BTreeSet::new();
    for v in strings {
        let s = v.as_str().ok_or("valid action is not a string")?;
        let a = normalize_action(s);
        if a.is_empty() {
            return Err("empty valid action".into());
        }
        out.insert(a);
    }
    Ok(out)
}

fn parse_snapshot(game: &str, v: &Value) -> Result<StateSnapshot, String> {
    let obj = v.as_object().ok_or("state is not an object")?;
    Ok(StateSnapshot {
        game: game.to_string(),
        location: parse_location(obj)?,
        location_text: text_field(obj, SCHEMA.location_text)?,
        observation: text_field(obj, SCHEMA.observation)?,
        inventory_text: text_field(obj, SCHEMA.inventory_text)?,
        inventory_objects: free_form(obj, SCHEMA.inventory_objects),
        inventory_attributes: free_form(obj, SCHEMA.inventory_attributes),
        surrounding_objects: free_form(obj, SCHEMA.surrounding_objects),
        surrounding_attributes: free_form(obj, SCHEMA.surrounding_attributes),
        graph: parse_graph(obj)?,
        valid_actions: parse_actions(obj)?,
    })
}

/// Parses one record. Errors are human-readable reasons.
pub fn parse_record(v: &Value) -> Result<StateSample, String> {
    let obj = v.as_object().ok_or("record is not an object")?;
    let game = match lookup(obj, SCHEMA.game) {
        Some(Value::String(s)) => s.clone(),
        _ => return Err("missing field `rom`".into()),
    };
    let prev = parse_snapshot(&game, lookup(obj, SCHEMA.state).ok_or("missing field `state`")?)?;
    let next = parse_snapshot(
        &game,
        lookup(obj, SCHEMA.next_state).ok_or("missing field `next_state`")?,
    )?;
    let action = match lookup(obj, SCHEMA.action) {
        Some(Value::String(s)) if !s.trim().is_empty() => normalize_action(s),
        _ => return Err("missing or empty field `action`".into()),
    };
    let reward = match lookup(obj, SCHEMA.reward) {
        Some(Value::Number(n)) => n.as_f64().unwrap_or(0.0),
        None | Some(Value::Null) => 0.0,
        Some(other) => return Err(format!("field `reward` is not numeric: {other}")),
    };
    Ok(StateSample {
        prev,
        action,
        next,
        reward,
    })
}

fn snapshot_json(s: &StateSnapshot) -> Value {
    let graph: Vec<Value> = s
        .graph
        .iter()
        .map(|t| json!([t.subject(), t.relation(), t.object()]))
        .collect();
    json!({
        SCHEMA.location[0]: s.location,
        SCHEMA.location_text[0]: s.location_text,
        SCHEMA.observation[0]: s.observation,
        SCHEMA.inventory_text[0]: s.inventory_text,
        SCHEMA.inventory_objects[0]: s.inventory_objects,
        SCHEMA.inventory_attributes[0]: s.inventory_attributes,
        SCHEMA.surrounding_objects[0]: s.surrounding_objects,
        SCHEMA.surrounding_attributes[0]: s.surrounding_attributes,
        SCHEMA.graph[0]: graph,
        SCHEMA.valid_actions[0]: s.valid_actions,
    })
}

/// Serializes a sample in the record layout [`parse_record`] reads.
pub fn record_json(sample: &StateSample) -> Value {
    json!({
        SCHEMA.game[0]: sample.game(),
        SCHEMA.state[0]: snapshot_json(&sample.prev),
        SCHEMA.action[0]: sample.action,
        SCHEMA.next_state[0]: snapshot_json(&sample.next),
        SCHEMA.reward[0]: sample.reward,
    })
}

fn is_header(v: &Value) -> bool {
    v.as_object()
        .is_some_and(|o| o.contains_key("format_version") && lookup(o, SCHEMA.state).is_none())
}

fn corpus_files(path: &Path) -> Result<Vec<PathBuf>, DataError> {
    if path.is_dir() {
        let entries = fs::read_dir(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .is_some_and(|x| x == "json" || x == "jsonl")
            })
            .collect();
        files.sort();
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

fn load_file(
    file: &Path,
    samples: &mut Vec<StateSample>,
    report: &mut ValidationReport,
) -> Result<(), DataError> {
    let text = fs::read_to_string(file).map_err(|source| DataError::Io {
        path: file.to_path_buf(),
        source,
    })?;
    let mut records: Vec<Result<Value, String>> = Vec::new();
    if text.trim_start().starts_with('[') {
        let arr: Vec<Value> = serde_json::from_str(&text).map_err(|source| DataError::Json {
            path: file.to_path_buf(),
            source,
        })?;
        records.extend(arr.into_iter().map(Ok));
    } else {
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            records.push(serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}")));
        }
    }
    let mut index = 0;
    for rec in records {
        if rec.as_ref().is_ok_and(is_header) {
            continue;
        }
        report.total += 1;
        match rec.and_then(|v| parse_record(&v)) {
            Ok(s) => {
                report.parsed += 1;
                samples.push(s);
            }
            Err(reason) => {
                log::warn!("{}: record {index} skipped: {reason}", file.display());
                report.skipped.push(SkippedRecord {
                    file: file.to_path_buf(),
                    index,
                    reason,
                });
            }
        }
        index += 1;
    }
    Ok(())
}

/// Loads every record under `path` (a file, or a directory of `.json`/`.jsonl`
/// files). Malformed records are skipped and itemized in the report.
pub fn load_corpus(path: &Path) -> Result<(Vec<StateSample>, ValidationReport), DataError> {
    let mut samples = Vec::new();
    let mut report = ValidationReport::default();
    for file in corpus_files(path)? {
        load_file(&file, &mut samples, &mut report)?;
    }
    if samples.is_empty() {
        return Err(DataError::NoRecords(path.to_path_buf()));
    }
    Ok((samples, report))
}

/// Writes newline-delimited records preceded by a format-version header line.
pub fn write_corpus(path: &Path, samples: &[StateSample]) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let header = json!({"format_version": CORPUS_FORMAT_VERSION, "kind": "worldkit-corpus"});
    writeln!(w, "{header}").map_err(io_err)?;
    for s in samples {
        writeln!(w, "{}", record_json(s)).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Seeded uniform split; returns `(train, validation)` in input order.
pub fn split_train_val(
    samples: &[StateSample],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<StateSample>, Vec<StateSample>), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::BadFraction(fraction));
    }
    let (train_idx, val_idx) = split_indices(samples.len(), fraction, seed);
    Ok((
        train_idx.iter().map(|&i| samples[i].clone()).collect(),
        val_idx.iter().map(|&i| samples[i].clone()).collect(),
    ))
}

/// Index form of [`split_train_val`].
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_val = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; n];
    for &i in &order[..n_val.min(n)] {
        is_val[i] = true;
    }
    (0..n).partition(|&i| !is_val[i])
}

/// Per-game corpus statistics. Graph and diff sizes describe the prediction
/// targets: `|G_{t+1}|` and `|G_{t+1} − G_t|`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GameStats {
    pub samples: usize,
    pub input_vocab_size: usize,
    pub avg_observation_tokens: f64,
    pub avg_valid_actions: f64,
    pub avg_graph_triples: f64,
    pub avg_diff_triples: f64,
    pub avg_deletion_triples: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub per_game: BTreeMap<String, GameStats>,
    pub overall: GameStats,
}

#[derive(Default)]
struct Accum {
    n: usize,
    vocab: BTreeSet<String>,
    obs: usize,
    actions: usize,
    graph: usize,
    adds: usize,
    dels: usize,
}

impl Accum {
    fn add(&mut self, s: &StateSample) {
        let toks = s.prev.observation_tokens();
        self.obs += toks.len();
        self.vocab.extend(toks);
        self.n += 1;
        self.actions += s.next.valid_actions.len();
        self.graph += s.next.graph.len();
        let d = diff(&s.prev.graph, &s.next.graph);
        self.adds += d.additions().len();
        self.dels += d.deletions().len();
    }

    fn finish(&self) -> GameStats {
        let n = self.n.max(1) as f64;
        GameStats {
            samples: self.n,
            input_vocab_size: self.vocab.len(),
            avg_observation_tokens: self.obs as f64 / n,
            avg_valid_actions: self.actions as f64 / n,
            avg_graph_triples: self.graph as f64 / n,
            avg_diff_triples: self.adds as f64 / n,
            avg_deletion_triples: self.dels as f64 / n,
        }
    }
}

pub fn compute_stats(samples: &[StateSample]) -> Result<CorpusStats, DataError> {
    if samples.is_empty() {
        return Err(DataError::Empty);
    }
    let mut games: BTreeMap<&str, Accum> = BTreeMap::new();
    let mut all = Accum::default();
    for s in samples {
        games.entry(s.game()).or_default().add(s);
        all.add(s);
    }
    Ok(CorpusStats {
        per_game: games
            .into_iter()
            .map(|(g, a)| (g.to_string(), a.finish()))
            .collect(),
        overall: all.finish(),
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    /// A ztuu state in the public corpus layout, as a JSON snapshot.
    pub const ZTUU_STATE: &str = r#"{
        "location": {"name": "Cultural Complex"},
        "loc_desc": "Cultural Complex This imposing ante-room, the center of what was apparently the cultural center of the GUE, is adorned in the ghastly style of the GUE's \"Grotesque Period.\" You can see a pair of razor-like gloves here.",
        "obs": "You put on the razor-like gloves.",
        "inv_desc": "You are carrying: a brass lantern (providing light) a pair of glasses four candy bars: a ZM$100000 a Multi-Implementeers a Forever Gores a Baby Rune a cheaply-made sword",
        "inv_objs": {"sword": "This is a cheaply made sword of no antiquity whatsoever."},
        "inv_attrs": {"glasses": ["clothing"], "gloves": ["clothing"], "sword": ["animate", "equip"], "lantern": ["animate", "equip"]},
        "surrounding_objs": {"gloves": "The razor like gloves would be very attractive for an axe murderer."},
        "surrounding_attrs": {"gloves": ["clothing"], "tunnel": ["animate"], "sign": ["animate"]},
        "graph": [["sign", "in", "Cultural Complex"], ["you", "have", "Forever Gores"], ["you", "have", "ZM$100000"], ["you", "have", "Baby Rune"], ["tunnel", "in", "Cultural Complex"], ["you", "in", "Cultural Complex"], ["you", "have", "brass lantern"], ["you", "have", "glasses"], ["decoration", "in", "Cultural Complex"], ["you", "have", "cheaply-made sword"], ["you", "have", "Multi-Implementeers"], ["you", "have", "razor-like gloves"], ["glasses", "is", "clothing"], ["gloves", "is", "clothing"], ["sword", "is", "animate"], ["tunnel", "is", "animate"], ["sign", "is", "animate"], ["lantern", "is", "animate"], ["sword", "is", "equip"], ["lantern", "is", "equip"]],
        "valid_acts": {"a1": "west", "a2": "turn lantern off", "a3": "east", "a4": "south", "a5": "put multi down", "a6": "put forever down", "a7": "put lantern down", "a8": "put rune down", "a9": "put glasses down", "a10": "put sword down", "a11": "take razor off", "a12": "put on glasses", "a13": "examine glasses", "a14": "lower razor", "a15": "throw multi", "a16": "throw lantern", "a17": "put multi in glasses", "a18": "north"}
    }"#;

    pub fn ztuu_record() -> String {
        format!(
            r#"{{"rom": "ztuu", "state": {ZTUU_STATE}, "action": "put on gloves", "next_state": {ZTUU_STATE}, "reward": 0}}"#
        )
    }
}
