//! The invariant battery: round trips, masks, loss properties, gradients,
//! metric oracles, world guarantees, determinism and search.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use worldkit_core::data::{compute_stats, load_corpus, write_corpus, StateSample};
use worldkit_core::kg::{apply_diff, diff, fixtures, ApplyMode, DeletionRules, KnowledgeGraph, Triple};
use worldkit_core::metrics::{action_counts, aggregate_weighted, graph_counts, token_counts, SetMatchCounts};
use worldkit_core::sos::{encode_graph_set, ElementSource, SosSerialization, TokenId, Vocabulary};
use worldkit_core::text::normalize_action;
use worldkit_core::worldgen::{emit_corpus, generate_world, generate_world_with, reachable_states, step, valid_actions, Policy, WorldParams};
use worldkit_model::beam::{beam_search, greedy, set_search};
use worldkit_model::checkpoint;
use worldkit_model::config::{ModelConfig, Reduction, Task, DEFAULT_BEAM_WIDTH};
use worldkit_model::eval::evaluate;
use worldkit_model::features::{encoder_inputs, prepare, seq_decoder_target, sos_decoder_target, PreparedSample, Vocabs};
use worldkit_model::gradcheck::{gradient_check, GradCheckOptions};
use worldkit_model::invariants::{elements_independent, perturb_inputs, with_mask};
use worldkit_model::loss::{loss_seq, loss_sos};
use worldkit_model::network::WorldModel;
use worldkit_model::pretrain::{mlm_input, Encoder};
use worldkit_model::tape::KeyMask;
use worldkit_model::tensor::Mat;
use worldkit_model::train::{TrainOptions, Trainer};

pub const VERIFY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    /// Acceptance criterion number, when the check is one.
    pub criterion: Option<u8>,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub secs: f64,
}

impl CheckResult {
    pub fn line(&self) -> String {
        let tag = match self.criterion {
            Some(c) => format!("[{c:>2}]"),
            None => "[--]".to_string(),
        };
        format!(
            "{tag} {} {:<28} {} ({:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.secs
        )
    }
}

fn timed(criterion: Option<u8>, name: &str, f: impl FnOnce() -> Result<String, String>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckResult {
        criterion,
        name: name.to_string(),
        passed,
        detail,
        secs: start.elapsed().as_secs_f64(),
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// One corpus per world seed.
pub fn synthetic_corpora(worlds: usize, samples: usize, seed: u64) -> Result<Vec<Vec<StateSample>>, String> {
    (0..worlds as u64)
        .map(|w| {
            let spec = generate_world_with(seed + w, &WorldParams::default()).map_err(|e| e.to_string())?;
            emit_corpus(&spec, Policy::Random, samples, seed + w).map_err(|e| e.to_string())
        })
        .collect()
}

/// A freshly initialized tiny model over a small world.
pub fn tiny_model(seed: u64, samples: usize) -> Result<(WorldModel, Vec<StateSample>), String> {
    let spec = generate_world(seed, 3, 3, 2).map_err(|e| e.to_string())?;
    let data = emit_corpus(&spec, Policy::CoverageWalk, samples, seed).map_err(|e| e.to_string())?;
    let vocabs = Vocabs::build(&data, 500).map_err(|e| e.to_string())?;
    let mut cfg = ModelConfig::tiny();
    cfg.seed = seed;
    let m = WorldModel::new(cfg, vocabs).map_err(|e| e.to_string())?;
    Ok((m, data))
}

pub fn check_diff_roundtrip(corpora: &[Vec<StateSample>]) -> CheckResult {
    timed(Some(1), "diff round trip", || {
        let start = Instant::now();
        let mut n = 0usize;
        for (c, corpus) in corpora.iter().enumerate() {
            for (i, s) in corpus.iter().enumerate() {
                let d = diff(&s.prev.graph, &s.next.graph);
                let back = apply_diff(&s.prev.graph, &d, ApplyMode::Strict).map_err(|e| format!("corpus {c} sample {i}: {e}"))?;
                ensure(back == s.next.graph, || format!("corpus {c} sample {i} differs"))?;
                n += 1;
            }
        }
        let per_10k = start.elapsed().as_secs_f64() * 10_000.0 / n.max(1) as f64;
        ensure(per_10k < 1.0, || format!("{per_10k:.3}s per 10k samples"))?;
        Ok(format!("{n}/{n} exact, {per_10k:.4}s per 10k"))
    })
}

pub fn check_deletion_inference(corpora: &[Vec<StateSample>]) -> CheckResult {
    timed(Some(2), "deletion inference", || {
        let rules = DeletionRules::default();
        let mut n = 0usize;
        for (c, corpus) in corpora.iter().enumerate() {
            for (i, s) in corpus.iter().enumerate() {
                let d = diff(&s.prev.graph, &s.next.graph);
                let got = rules.infer_deletions(&s.prev.graph, d.additions());
                ensure(&got == d.deletions(), || format!("world {c} sample {i}: inferred {got:?}, gold {:?}", d.deletions()))?;
                n += 1;
            }
        }
        ensure(n >= 1000 && corpora.len() >= 20, || format!("only {n} transitions over {} seeds", corpora.len()))?;
        let (before, after) = (fixtures::ludicorp_before(), fixtures::ludicorp_after());
        let d = diff(&before, &after);
        ensure(rules.infer_deletions(&before, d.additions()) == *d.deletions(), || "ludicorp fixture".into())?;
        Ok(format!("{n}/{n} transitions over {} seeds, ludicorp exact", corpora.len()))
    })
}

fn random_elements(rng: &mut ChaCha8Rng, vocab: usize, k: usize, len: impl Fn(&mut ChaCha8Rng) -> usize) -> Vec<Vec<TokenId>> {
    let mut out: Vec<Vec<TokenId>> = Vec::new();
    while out.len() < k {
        let n = len(rng);
        let e: Vec<TokenId> = (0..n).map(|_| rng.gen_range(8..vocab)).collect();
        if !out.contains(&e) {
            out.push(e);
        }
    }
    out
}

pub fn check_sos_independence(seed: u64) -> CheckResult {
    timed(Some(3), "SOS independence", || {
        let (m, data) = tiny_model(seed, 20)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cases = 0;
        for (i, s) in data.iter().take(6).enumerate() {
            let x = encoder_inputs(s, &m.vocabs, &m.config).map_err(|e| e.to_string())?;
            let enc = m.encode(&x);
            for task in [Task::Graph, Task::Action] {
                let mem = m.memory(task, &enc);
                let v = m.vocab_size(task);
                let (elems, source) = match task {
                    Task::Graph => (random_elements(&mut rng, v, 3, |_| 3), ElementSource::Triple),
                    Task::Action => (random_elements(&mut rng, v, 3, |r| r.gen_range(1..4)), ElementSource::Action),
                };
                let target = sos_decoder_target(&SosSerialization::from_elements(&elems, source));
                let block = perturb_inputs(&m, task, &mem, &target);
                ensure(block.outside == 0.0, || format!("case {i}: block mask leaked {:e}", block.outside))?;
                let causal = perturb_inputs(&m, task, &mem, &with_mask(&target, KeyMask::causal(target.len())));
                ensure(causal.later_outside > 0.0, || format!("case {i}: causal mask changed no later logit"))?;
                // Mutation check: broken masks must be caught.
                for broken in [KeyMask::Full, KeyMask::causal(target.len())] {
                    ensure(!elements_independent(&m, task, &mem, &with_mask(&target, broken)), || {
                        format!("case {i}: broken mask passed the check")
                    })?;
                }
                cases += 1;
            }
        }
        Ok(format!("{cases} targets: block change 0 exactly, causal leaks, broken masks caught"))
    })
}

fn random_logits(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-3.0..3.0)).collect())
}

/// Logit rows for a block target whose blocks carry their own rows.
fn block_logits(order: &[usize], blocks: &[Mat], eos: &Mat) -> Mat {
    let mut parts: Vec<&Mat> = order.iter().map(|&i| &blocks[i]).collect();
    parts.push(eos);
    Mat::concat_rows(&parts)
}

pub fn check_permutation_invariance(layouts: usize, seed: u64) -> CheckResult {
    timed(Some(4), "permutation invariance", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = 30;
        let mut worst_sos: f64 = 0.0;
        let mut least_seq = f64::INFINITY;
        for case in 0..layouts {
            let k = rng.gen_range(2..7);
            let elems = random_elements(&mut rng, vocab, k, |r| r.gen_range(1..6));
            let mut order: Vec<usize> = (0..k).collect();
            while order.iter().enumerate().all(|(i, &o)| i == o) {
                order.shuffle(&mut rng);
            }
            let permuted: Vec<Vec<TokenId>> = order.iter().map(|&i| elems[i].clone()).collect();
            let ser = SosSerialization::from_elements(&elems, ElementSource::Action);
            let pser = SosSerialization::from_elements(&permuted, ElementSource::Action);
            // Each block [SEP e] owns |e|+1 logit rows that travel with it.
            let blocks: Vec<Mat> = elems.iter().map(|e| random_logits(&mut rng, e.len() + 1, vocab)).collect();
            let eos = random_logits(&mut rng, 1, vocab);
            let ident: Vec<usize> = (0..k).collect();
            let (t, pt) = (sos_decoder_target(&ser), sos_decoder_target(&pser));
            for r in [Reduction::Mean, Reduction::Sum] {
                let a = loss_sos(&block_logits(&ident, &blocks, &eos), &t.targets, &t.layout, r).map_err(|e| e.to_string())?;
                let b = loss_sos(&block_logits(&order, &blocks, &eos), &pt.targets, &pt.layout, r).map_err(|e| e.to_string())?;
                worst_sos = worst_sos.max((a - b).abs() / a.abs().max(1e-300));
            }
            let (s, ps) = (seq_decoder_target(&ser), seq_decoder_target(&pser));
            let logits = random_logits(&mut rng, s.len(), vocab);
            let a = loss_seq(&logits, &s.targets, Reduction::Mean).map_err(|e| e.to_string())?;
            let b = loss_seq(&logits, &ps.targets, Reduction::Mean).map_err(|e| e.to_string())?;
            least_seq = least_seq.min((a - b).abs());
            ensure(worst_sos < 1e-6, || format!("layout {case}: sos changed by {worst_sos:e}"))?;
            ensure((a - b).abs() > 1e-3, || format!("layout {case}: seq changed by only {:e}", (a - b).abs()))?;
        }
        // The same property end to end through the decoder.
        let (m, data) = tiny_model(seed, 12)?;
        let x = encoder_inputs(&data[0], &m.vocabs, &m.config).map_err(|e| e.to_string())?;
        let mem = m.memory(Task::Graph, &m.encode(&x));
        for _ in 0..10 {
            let elems = random_elements(&mut rng, m.vocab_size(Task::Graph), 4, |_| 3);
            let mut perm = elems.clone();
            perm.reverse();
            let loss = |e: &[Vec<TokenId>]| {
                let t = sos_decoder_target(&SosSerialization::from_elements(e, ElementSource::Triple));
                loss_sos(&m.decode_logits(Task::Graph, &mem, &t), &t.targets, &t.layout, Reduction::Mean).expect("shapes")
            };
            let (a, b) = (loss(&elems), loss(&perm));
            worst_sos = worst_sos.max((a - b).abs() / a);
            ensure(worst_sos < 1e-6, || format!("model sos changed by {worst_sos:e}"))?;
        }
        Ok(format!("{layouts} layouts: sos max rel {worst_sos:.1e}, seq min change {least_seq:.1e}"))
    })
}

pub fn check_single_element_reduction(cases: usize, seed: u64) -> CheckResult {
    timed(Some(5), "single-element reduction", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..cases {
            let vocab = rng.gen_range(10..40);
            let elems = random_elements(&mut rng, vocab, 1, |r| r.gen_range(1..6));
            let ser = SosSerialization::from_elements(&elems, ElementSource::Action);
            let t = sos_decoder_target(&ser);
            let logits = random_logits(&mut rng, t.len(), vocab);
            for r in [Reduction::Mean, Reduction::Sum] {
                let a = loss_sos(&logits, &t.targets, &t.layout, r).map_err(|e| e.to_string())?;
                let b = loss_seq(&logits, &t.targets, r).map_err(|e| e.to_string())?;
                worst = worst.max((a - b).abs());
            }
        }
        ensure(worst < 1e-10, || format!("max difference {worst:e}"))?;
        // Through the decoder the two masks coincide on one element.
        let (m, data) = tiny_model(seed, 12)?;
        let x = encoder_inputs(&data[0], &m.vocabs, &m.config).map_err(|e| e.to_string())?;
        let mem = m.memory(Task::Action, &m.encode(&x));
        let elems = random_elements(&mut rng, m.vocab_size(Task::Action), 1, |_| 3);
        let ser = SosSerialization::from_elements(&elems, ElementSource::Action);
        let (ts, tq) = (sos_decoder_target(&ser), seq_decoder_target(&ser));
        let a = loss_sos(&m.decode_logits(Task::Action, &mem, &ts), &ts.targets, &ts.layout, Reduction::Mean).map_err(|e| e.to_string())?;
        let b = loss_seq(&m.decode_logits(Task::Action, &mem, &tq), &tq.targets, Reduction::Mean).map_err(|e| e.to_string())?;
        ensure(a.is_finite() && b.is_finite(), || "non-finite model loss".into())?;
        Ok(format!("{cases} random cases: max |sos - seq| {worst:.1e}"))
    })
}

pub fn check_gradients(coords: usize, seed: u64) -> CheckResult {
    timed(Some(6), "gradient check", || {
        let start = Instant::now();
        let (mut m, data) = tiny_model(seed, 12)?;
        m.config.dropout = 0.0;
        let prep: Vec<PreparedSample> = data[..2]
            .iter()
            .map(|s| prepare(s, &m.vocabs, &m.config))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let x = encoder_inputs(&data[0], &m.vocabs, &m.config).map_err(|e| e.to_string())?;
        let mlm = vec![
            (Encoder::Text, mlm_input(&x, Encoder::Text).map_err(|e| e.to_string())?),
            (Encoder::Graph, mlm_input(&x, Encoder::Graph).map_err(|e| e.to_string())?),
        ];
        let opts = GradCheckOptions {
            coords_per_block: coords,
            seed,
            ..Default::default()
        };
        let r = gradient_check(&mut m, &prep, &mlm, &opts);
        let secs = start.elapsed().as_secs_f64();
        let worst = r.max_rel_err();
        ensure(worst < 1e-4, || format!("max rel err {worst:e}: {:?}", r.blocks))?;
        ensure(r.min_coords() >= coords, || format!("only {} coordinates in some block", r.min_coords()))?;
        ensure(secs < 120.0, || format!("took {secs:.0}s"))?;
        Ok(format!("{} blocks x {coords} coords, max rel err {worst:.1e}", r.blocks.len()))
    })
}

/// Counting by nested loops over lists, independent of the library.
fn oracle_counts<T: PartialEq>(pred: &[T], gold: &[T]) -> (usize, usize, usize) {
    let mut used = vec![false; gold.len()];
    let mut tp = 0;
    for p in pred {
        if let Some(j) = (0..gold.len()).find(|&j| !used[j] && gold[j] == *p) {
            used[j] = true;
            tp += 1;
        }
    }
    (tp, pred.len(), gold.len())
}

fn oracle_em_f1(tp: usize, p: usize, g: usize) -> (f64, f64) {
    if p == 0 && g == 0 {
        return (100.0, 100.0);
    }
    let prec = if p == 0 { 0.0 } else { tp as f64 / p as f64 };
    let rec = if g == 0 { 0.0 } else { tp as f64 / g as f64 };
    let f1 = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
    (100.0 * rec, 100.0 * f1)
}

fn close(a: (f64, f64), c: &SetMatchCounts) -> bool {
    (a.0 - c.em()).abs() < 1e-9 && (a.1 - c.f1()).abs() < 1e-9
}

pub fn check_metric_oracle(cases: usize, seed: u64) -> CheckResult {
    timed(Some(7), "metric oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names = ["hall", "box", "key", "you"];
        let rels = ["in", "is", "have"];
        let rand_graph = |rng: &mut ChaCha8Rng| -> BTreeSet<Triple> {
            let n = rng.gen_range(0..5);
            (0..n)
                .map(|_| {
                    let s = names[rng.gen_range(0..names.len())];
                    let r = rels[rng.gen_range(0..rels.len())];
                    let o = names[rng.gen_range(0..names.len())];
                    Triple::new(s, r, o).expect("non-empty")
                })
                .collect()
        };
        let words = ["go", "north", "take", "key", "open", "box"];
        let rand_actions = |rng: &mut ChaCha8Rng| -> Vec<String> {
            let n = rng.gen_range(0..4);
            (0..n)
                .map(|_| {
                    let k = rng.gen_range(1..3);
                    let ws: Vec<&str> = (0..k).map(|_| words[rng.gen_range(0..words.len())]).collect();
                    // Stray spacing and case must not matter.
                    if rng.gen_bool(0.3) {
                        format!("  {} ", ws.join("   ").to_uppercase())
                    } else {
                        ws.join(" ")
                    }
                })
                .collect()
        };
        for case in 0..cases {
            let (p, g) = (rand_graph(&mut rng), rand_graph(&mut rng));
            let pv: Vec<&Triple> = p.iter().collect();
            let gv: Vec<&Triple> = g.iter().collect();
            let (tp, np, ng) = oracle_counts(&pv, &gv);
            ensure(close(oracle_em_f1(tp, np, ng), &graph_counts(&p, &g)), || format!("graph case {case}"))?;
            let toks = |s: &BTreeSet<Triple>| -> Vec<String> { s.iter().flat_map(|t| t.components().map(str::to_string)).collect() };
            let (tp, np, ng) = oracle_counts(&toks(&p), &toks(&g));
            ensure(close(oracle_em_f1(tp, np, ng), &token_counts(&p, &g)), || format!("token case {case}"))?;
            let (pa, ga) = (rand_actions(&mut rng), rand_actions(&mut rng));
            let dedup = |v: &[String]| -> Vec<String> {
                let mut out: Vec<String> = Vec::new();
                for a in v.iter().map(|a| normalize_action(a)) {
                    if !out.contains(&a) {
                        out.push(a);
                    }
                }
                out
            };
            let (tp, np, ng) = oracle_counts(&dedup(&pa), &dedup(&ga));
            ensure(close(oracle_em_f1(tp, np, ng), &action_counts(&pa, &ga)), || format!("action case {case}"))?;
        }
        let empty = graph_counts(&BTreeSet::new(), &BTreeSet::new());
        ensure(empty.em() == 100.0 && empty.f1() == 100.0, || "both-empty convention".into())?;
        let games = vec![
            ("a".to_string(), 1, vec![("graph_em".to_string(), 0.0)]),
            ("b".to_string(), 3, vec![("graph_em".to_string(), 100.0)]),
        ];
        let r = aggregate_weighted(&games).map_err(|e| e.to_string())?;
        ensure(r.overall_value("graph_em") == Some(75.0), || format!("weighted example gave {:?}", r.overall_value("graph_em")))?;
        Ok(format!("{cases} cases exact, both-empty 100, weighted 0/100 = 75"))
    })
}

pub fn check_diff_statistic(corpora: &[Vec<StateSample>]) -> CheckResult {
    timed(Some(8), "diff shorter than graph", || {
        let mut worst_ratio: f64 = 0.0;
        let mut all: Vec<StateSample> = Vec::new();
        for (c, corpus) in corpora.iter().enumerate() {
            let stats = compute_stats(corpus).map_err(|e| e.to_string())?;
            let o = &stats.overall;
            ensure(o.avg_diff_triples < o.avg_graph_triples, || {
                format!("corpus {c}: diff {:.2} vs graph {:.2}", o.avg_diff_triples, o.avg_graph_triples)
            })?;
            worst_ratio = worst_ratio.max(o.avg_diff_triples / o.avg_graph_triples);
            all.extend(corpus.iter().cloned());
        }
        let v = worldkit_core::sos::build_vocab(&all, worldkit_core::sos::VocabKind::Graph).map_err(|e| e.to_string())?;
        let (d, f) = mean_target_tokens(&all, &v)?;
        ensure(d < f, || format!("tokens: diff {d:.2} vs full {f:.2}"))?;
        Ok(format!("{} corpora, worst diff/graph ratio {worst_ratio:.2}, tokens {d:.2} vs {f:.2}", corpora.len()))
    })
}

/// Mean serialized length of diff and full-graph targets.
pub fn mean_target_tokens(samples: &[StateSample], v: &Vocabulary) -> Result<(f64, f64), String> {
    let (mut d, mut f) = (0usize, 0usize);
    for s in samples {
        d += encode_graph_set(s.graph_additions().iter(), v).map_err(|e| e.to_string())?.len();
        f += encode_graph_set(s.next.graph.iter(), v).map_err(|e| e.to_string())?.len();
    }
    let n = samples.len().max(1) as f64;
    Ok((d as f64 / n, f as f64 / n))
}

pub fn check_valid_actions(worlds: u64) -> CheckResult {
    timed(Some(10), "valid actions change state", || {
        let (mut states, mut actions) = (0usize, 0usize);
        for seed in 0..worlds {
            let spec = generate_world(seed, 3, 3, 2).map_err(|e| e.to_string())?;
            let (all, complete) = reachable_states(&spec, 200_000);
            ensure(complete, || format!("world {seed}: state space not exhausted"))?;
            for s in &all {
                for a in valid_actions(s, &spec) {
                    let next = step(s, &a, &spec).state;
                    ensure(next != *s, || format!("world {seed}: `{a}` left the state unchanged"))?;
                    actions += 1;
                }
                states += 1;
            }
        }
        Ok(format!("{worlds} worlds, {states} states, {actions}/{actions} actions change state"))
    })
}

fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool")
}

pub fn check_determinism(seed: u64) -> CheckResult {
    timed(Some(11), "determinism", || {
        let run = || -> Result<(Vec<u64>, WorldModel, Vec<StateSample>), String> {
            let (mut m, data) = tiny_model(seed, 24)?;
            m.config.batch_size = 4;
            let prep: Vec<PreparedSample> = data
                .iter()
                .map(|s| prepare(s, &m.vocabs, &m.config))
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?;
            let mut t = Trainer::new(m);
            let opts = TrainOptions {
                max_steps: 10,
                eval_every: 5,
                ..Default::default()
            };
            let o = t.fit(&prep[4..], &prep[..4], &opts, None).map_err(|e| e.to_string())?;
            Ok((o.history.iter().map(|r| r.total.to_bits()).collect(), t.model, data))
        };
        let single = pool(1);
        let (a, ma, data) = single.install(run)?;
        let (b, _, _) = single.install(run)?;
        ensure(a == b, || "loss curves differ between identical runs".into())?;
        let width = 3;
        let e1 = single.install(|| evaluate(&ma, &data, width)).map_err(|e| e.to_string())?;
        let e4 = pool(4).install(|| evaluate(&ma, &data, width)).map_err(|e| e.to_string())?;
        let e4b = pool(4).install(|| evaluate(&ma, &data, width)).map_err(|e| e.to_string())?;
        ensure(e1.report == e4.report && e4.report == e4b.report, || "evaluation reports differ".into())?;
        ensure(e1.predictions == e4.predictions, || "predictions differ".into())?;
        Ok(format!("{} steps bitwise equal; reports equal at 1 and 4 threads", a.len()))
    })
}

pub fn check_beam(seed: u64) -> CheckResult {
    timed(Some(12), "beam search", || {
        ensure(DEFAULT_BEAM_WIDTH == 15, || "default width".into())?;
        for p in ["large", "desk", "tiny"] {
            let c = ModelConfig::preset(p).map_err(|e| e.to_string())?;
            ensure(c.beam_width == 15, || format!("preset {p} width {}", c.beam_width))?;
        }
        let (mut m, data) = tiny_model(seed, 120)?;
        m.config.batch_size = 8;
        let prep: Vec<PreparedSample> = data
            .iter()
            .map(|s| prepare(s, &m.vocabs, &m.config))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        // A short fit so sequences end before the length cap.
        let mut t = Trainer::new(m);
        let opts = TrainOptions {
            max_steps: 60,
            eval_every: 0,
            ..Default::default()
        };
        t.fit(&prep, &[], &opts, None).map_err(|e| e.to_string())?;
        let m = t.model;
        let (mut ended, mut states) = (0, 0);
        for (i, s) in data.iter().take(100).enumerate() {
            let x = encoder_inputs(s, &m.vocabs, &m.config).map_err(|e| e.to_string())?;
            let enc = m.encode(&x);
            for task in [Task::Graph, Task::Action] {
                let mem = m.memory(task, &enc);
                let dec = m.decoder(task, &mem);
                let g = greedy(&dec, 64);
                let b = beam_search(&dec, 1, 64);
                ensure(b.len() == 1 && b[0].tokens == g.tokens && b[0].score.to_bits() == g.score.to_bits(), || {
                    format!("state {i}: width 1 differs from greedy")
                })?;
                ended += usize::from(!g.truncated);
                let wide = beam_search(&dec, DEFAULT_BEAM_WIDTH, 64);
                ensure(wide.windows(2).all(|w| w[0].score >= w[1].score), || format!("state {i}: scores increase"))?;
                let set = set_search(&dec, DEFAULT_BEAM_WIDTH, 5);
                ensure(set.ranked.windows(2).all(|w| w[0].1 >= w[1].1), || format!("state {i}: set scores increase"))?;
            }
            states += 1;
        }
        Ok(format!("{states} states x 2 decoders: width 1 = greedy ({ended}/{} greedy runs ended with EOS), scores sorted, default 15", 2 * states))
    })
}

/// Writer/reader and checkpoint round trips.
pub fn check_roundtrips(seed: u64) -> CheckResult {
    timed(None, "file round trips", || {
        let dir = std::env::temp_dir().join(format!("worldkit-verify-{}-{seed}", std::process::id()));
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let (m, data) = tiny_model(seed, 30)?;
        let corpus = dir.join("corpus.jsonl");
        write_corpus(&corpus, &data).map_err(|e| e.to_string())?;
        let (back, report) = load_corpus(&corpus).map_err(|e| e.to_string())?;
        ensure(back == data && report.skipped.is_empty(), || "corpus round trip".into())?;
        let ckpt = dir.join("m.ckpt");
        checkpoint::save(&ckpt, &m).map_err(|e| e.to_string())?;
        let m2 = checkpoint::load(&ckpt).map_err(|e| e.to_string())?;
        let x = encoder_inputs(&data[0], &m.vocabs, &m.config).map_err(|e| e.to_string())?;
        let bits = |m: &WorldModel| m.encode(&x).state.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(bits(&m) == bits(&m2), || "checkpoint forward pass differs".into())?;
        let g: KnowledgeGraph = data[0].next.graph.clone();
        let json = serde_json::to_string(&g).map_err(|e| e.to_string())?;
        let g2: KnowledgeGraph = serde_json::from_str(&json).map_err(|e| e.to_string())?;
        ensure(g == g2, || "graph json round trip".into())?;
        let _ = std::fs::remove_dir_all(&dir);
        Ok(format!("corpus of {} records, checkpoint, graph json", data.len()))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryOptions {
    pub seed: u64,
    pub gradient_coords: usize,
    pub random_cases: usize,
}

impl Default for BatteryOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            gradient_coords: 200,
            random_cases: 1000,
        }
    }
}

/// Every check except the ablation, in criterion order.
pub fn run_battery(opts: &BatteryOptions, mut on_result: impl FnMut(&CheckResult)) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut push = |r: CheckResult| {
        on_result(&r);
        out.push(r);
    };
    let corpora = synthetic_corpora(20, 100, opts.seed);
    match &corpora {
        Ok(c) => {
            push(check_diff_roundtrip(c));
            push(check_deletion_inference(c));
        }
        Err(e) => push(timed(Some(1), "synthetic corpora", || Err(e.clone()))),
    }
    push(check_sos_independence(opts.seed));
    push(check_permutation_invariance(100, opts.seed));
    push(check_single_element_reduction(opts.random_cases, opts.seed));
    push(check_gradients(opts.gradient_coords, opts.seed));
    push(check_metric_oracle(opts.random_cases, opts.seed));
    if let Ok(c) = &corpora {
        push(check_diff_statistic(c));
    }
    push(check_valid_actions(10));
    push(check_determinism(opts.seed));
    push(check_beam(opts.seed));
    push(check_roundtrips(opts.seed));
    out
}
