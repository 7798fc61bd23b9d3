//! Subcommand bodies. Each takes a resolved config and writes its outputs
//! under `cfg.out`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use worldkit_core::data::{compute_stats, load_corpus, split_train_val, write_corpus, StateSample};
use worldkit_core::kg::{canonicalize, diff, KnowledgeGraph, Triple};
use worldkit_core::metrics::ScoreReport;
use worldkit_core::sos::Vocabulary;
use worldkit_core::worldgen::{emit_corpus_with, generate_world_with};
use worldkit_model::checkpoint;
use worldkit_model::eval::{evaluate, REPORT_FORMAT_VERSION};
use worldkit_model::features::{encoder_inputs, prepare, PreparedSample, Vocabs};
use worldkit_model::network::WorldModel;
use worldkit_model::pretrain::{mlm_input, pretrain, Encoder, MlmInput, PretrainReport};
use worldkit_model::train::{log_header, Trainer};

use crate::ablate::{
    action_grid, build_benchmark, graph_grid, ordering, render_table, run_row, Components, RowResult,
    ABLATION_FORMAT_VERSION,
};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::verify::{run_battery, BatteryOptions, CheckResult, VERIFY_FORMAT_VERSION};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const MODEL_FILE: &str = "model.ckpt";
pub const PRETRAINED_FILE: &str = "pretrained.ckpt";
pub const VOCAB_DIR: &str = "vocab";
pub const OUTPUT_FORMAT_VERSION: u32 = 1;

/// Writes `body` as pretty JSON wrapped in a version header.
pub fn write_versioned<T: Serialize>(path: &Path, kind: &str, version: u32, body: &T) -> Result<(), CliError> {
    let doc = serde_json::json!({
        "format_version": version,
        "kind": kind,
        "body": body,
    });
    let text = serde_json::to_string_pretty(&doc).expect("output serializes");
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn corpus_path(cfg: &RunConfig, given: &Option<PathBuf>, default: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| cfg.out.join(default))
}

fn load(path: &Path) -> Result<Vec<StateSample>, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("corpus not found: {}", path.display())));
    }
    let (samples, report) = load_corpus(path)?;
    if !report.skipped.is_empty() {
        log::warn!("{}: skipped {} of {} records", path.display(), report.skipped.len(), report.total);
    }
    Ok(samples)
}

/// Generates train and test corpora from the configured worlds. Both come
/// from the same worlds under different exploration seeds.
pub fn gen_world(cfg: &RunConfig) -> Result<(PathBuf, PathBuf), CliError> {
    let w = &cfg.world;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for i in 0..w.worlds as u64 {
        let seed = w.world_seed.wrapping_add(i);
        let spec = generate_world_with(seed, &w.params)?;
        train.extend(emit_corpus_with(&spec, w.policy, w.samples_per_world, seed.wrapping_mul(2), w.episode_len)?);
        test.extend(emit_corpus_with(&spec, w.policy, w.test_per_world, seed.wrapping_mul(2) + 1, w.episode_len)?);
    }
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    let (tp, sp) = (cfg.out.join(TRAIN_FILE), cfg.out.join(TEST_FILE));
    write_corpus(&tp, &train)?;
    write_corpus(&sp, &test)?;
    let stats = compute_stats(&train)?;
    write_versioned(&cfg.out.join("stats.json"), "worldkit-stats", OUTPUT_FORMAT_VERSION, &stats)?;
    println!("{}", render_stats_line("train", &stats.overall));
    println!("{}", render_stats_line("test", &compute_stats(&test)?.overall));
    Ok((tp, sp))
}

fn render_stats_line(name: &str, s: &worldkit_core::data::GameStats) -> String {
    format!(
        "{name}: {} samples, obs tokens {:.1}, valid actions {:.2}, graph {:.2} triples, diff {:.2} triples, deletions {:.2}",
        s.samples, s.avg_observation_tokens, s.avg_valid_actions, s.avg_graph_triples, s.avg_diff_triples, s.avg_deletion_triples
    )
}

/// Corpus statistics, per game and overall.
pub fn stats(cfg: &RunConfig) -> Result<(), CliError> {
    let path = corpus_path(cfg, &cfg.data.train, TRAIN_FILE);
    let samples = load(&path)?;
    let s = compute_stats(&samples)?;
    println!("{:<24}{:>8}{:>8}{:>10}{:>10}{:>10}{:>10}", "game", "samples", "vocab", "obs", "actions", "graph", "diff");
    for (g, r) in s.per_game.iter().chain(std::iter::once((&"overall".to_string(), &s.overall))) {
        println!(
            "{g:<24}{:>8}{:>8}{:>10.2}{:>10.2}{:>10.2}{:>10.2}",
            r.samples, r.input_vocab_size, r.avg_observation_tokens, r.avg_valid_actions, r.avg_graph_triples, r.avg_diff_triples
        );
    }
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    write_versioned(&cfg.out.join("stats.json"), "worldkit-stats", OUTPUT_FORMAT_VERSION, &s)
}

pub fn save_vocabs(dir: &Path, v: &Vocabs) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for (name, voc) in [("text", &v.text), ("graph", &v.graph), ("action", &v.action)] {
        voc.save(&dir.join(format!("{name}.vocab")))?;
    }
    Ok(())
}

pub fn load_vocabs(dir: &Path) -> Result<Vocabs, CliError> {
    let one = |name: &str| -> Result<Vocabulary, CliError> {
        let p = dir.join(format!("{name}.vocab"));
        Vocabulary::load(&p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
    };
    Ok(Vocabs {
        text: one("text")?,
        graph: one("graph")?,
        action: one("action")?,
    })
}

/// Fails when the vocabulary files in `cfg.data.vocab` differ from the
/// vocabularies stored in the checkpoint.
fn check_vocab(cfg: &RunConfig, model: &WorldModel) -> Result<(), CliError> {
    let Some(dir) = &cfg.data.vocab else {
        return Ok(());
    };
    let v = load_vocabs(dir)?;
    for (name, a, b) in [
        ("text", &v.text, &model.vocabs.text),
        ("graph", &v.graph, &model.vocabs.graph),
        ("action", &v.action, &model.vocabs.action),
    ] {
        if a != b {
            return Err(CliError::Data(format!(
                "{name} vocabulary in {} does not match the checkpoint ({} vs {} tokens)",
                dir.display(),
                a.len(),
                b.len()
            )));
        }
    }
    Ok(())
}

/// A checkpointed model when one is configured, else a fresh one over
/// vocabularies built from `samples`.
fn model_for(cfg: &RunConfig, samples: &[StateSample]) -> Result<WorldModel, CliError> {
    match &cfg.data.checkpoint {
        Some(p) => {
            let mut m = checkpoint::load(p)?;
            check_vocab(cfg, &m)?;
            let want = cfg.model_config();
            if m.config.d_model != want.d_model || m.config.blocks() != want.blocks() {
                return Err(CliError::Config(format!("{} has a different architecture than the config", p.display())));
            }
            m.config = want.clone();
            Ok(m)
        }
        None => {
            let c = cfg.model_config().clone();
            let vocabs = match &cfg.data.vocab {
                Some(dir) => load_vocabs(dir)?,
                None => Vocabs::build(samples, c.text_vocab_cap)?,
            };
            Ok(WorldModel::new(c, vocabs)?)
        }
    }
}

fn mlm_inputs(model: &WorldModel, samples: &[StateSample], enc: Encoder) -> Result<Vec<MlmInput>, CliError> {
    samples
        .iter()
        .map(|s| {
            let x = encoder_inputs(s, &model.vocabs, &model.config)?;
            Ok(mlm_input(&x, enc)?)
        })
        .collect()
}

/// MLM pretraining of the text and/or graph encoder.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<Vec<PretrainReport>, CliError> {
    let samples = load(&corpus_path(cfg, &cfg.data.train, TRAIN_FILE))?;
    let (train, held) = split_train_val(&samples, cfg.data.val_fraction.unwrap_or(0.1), cfg.seed)?;
    let mut model = model_for(cfg, &samples)?;
    let mut reports = Vec::new();
    for (on, enc) in [(cfg.pretrain.text, Encoder::Text), (cfg.pretrain.graph, Encoder::Graph)] {
        if !on {
            continue;
        }
        let (tr, ho) = (mlm_inputs(&model, &train, enc)?, mlm_inputs(&model, &held, enc)?);
        let r = pretrain(&mut model, enc, &tr, &ho, &cfg.pretrain.options)?;
        println!(
            "{enc:?} encoder: loss {:.4} -> {:.4}, masked accuracy {:.4} (chance {:.4})",
            r.losses.first().copied().unwrap_or(f64::NAN),
            r.losses.last().copied().unwrap_or(f64::NAN),
            r.masked_accuracy,
            r.chance
        );
        reports.push(r);
    }
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    checkpoint::save(&cfg.out.join(PRETRAINED_FILE), &model)?;
    save_vocabs(&cfg.out.join(VOCAB_DIR), &model.vocabs)?;
    write_versioned(&cfg.out.join("pretrain_report.json"), "worldkit-pretrain-report", OUTPUT_FORMAT_VERSION, &reports)?;
    Ok(reports)
}

fn prepare_all(model: &WorldModel, samples: &[StateSample]) -> Result<Vec<PreparedSample>, CliError> {
    Ok(samples
        .iter()
        .map(|s| prepare(s, &model.vocabs, &model.config))
        .collect::<Result<_, _>>()?)
}

/// World-model training with early stopping on validation loss.
pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let samples = load(&corpus_path(cfg, &cfg.data.train, TRAIN_FILE))?;
    let (train, val) = split_train_val(&samples, cfg.data.val_fraction.unwrap_or(0.1), cfg.seed)?;
    let model = model_for(cfg, &samples)?;
    let (tr, va) = (prepare_all(&model, &train)?, prepare_all(&model, &val)?);
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    let log_path = cfg.out.join("train_log.jsonl");
    let file = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    writeln!(log, "{}", log_header(&model.config)).map_err(|e| CliError::io(&log_path, e))?;
    let mut trainer = Trainer::new(model);
    let outcome = trainer.fit(&tr, &va, &cfg.train, Some(&mut log))?;
    log.flush().map_err(|e| CliError::io(&log_path, e))?;
    let path = cfg.out.join(MODEL_FILE);
    checkpoint::save(&path, &trainer.model)?;
    save_vocabs(&cfg.out.join(VOCAB_DIR), &trainer.model.vocabs)?;
    write_versioned(&cfg.out.join("train_outcome.json"), "worldkit-train-outcome", OUTPUT_FORMAT_VERSION, &outcome)?;
    println!(
        "{} steps{}{}, final loss {:.4}, best val {:?}",
        outcome.steps,
        if outcome.stopped_early { ", stopped early" } else { "" },
        if outcome.out_of_budget { ", out of budget" } else { "" },
        outcome.history.last().map_or(f64::NAN, |r| r.total),
        outcome.best_val
    );
    Ok(path)
}

/// Per-game and overall table in the shape of the headline results.
pub fn render_report(r: &ScoreReport) -> String {
    let mut out = format!("{:<24}{:>8}", "game", "n");
    for m in &r.metrics {
        out.push_str(&format!("{m:>15}"));
    }
    out.push('\n');
    for g in r.games.iter().chain(std::iter::once(&r.overall)) {
        out.push_str(&format!("{:<24}{:>8}", g.game, g.samples));
        for v in &g.values {
            out.push_str(&format!("{v:>15.2}"));
        }
        out.push('\n');
    }
    out
}

/// Beam-search evaluation of a checkpoint on a test corpus.
pub fn cmd_eval(cfg: &RunConfig) -> Result<ScoreReport, CliError> {
    let ckpt = cfg.data.checkpoint.clone().unwrap_or_else(|| cfg.out.join(MODEL_FILE));
    let model = checkpoint::load(&ckpt)?;
    check_vocab(cfg, &model)?;
    let mut test = load(&corpus_path(cfg, &cfg.data.test, TEST_FILE))?;
    if let Some(n) = cfg.eval.limit {
        test.truncate(n.max(1));
    }
    let width = cfg.model_config().beam_width;
    let e = evaluate(&model, &test, width)?;
    print!("{}", render_report(&e.report));
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    write_versioned(&cfg.out.join("eval_report.json"), "worldkit-eval-report", REPORT_FORMAT_VERSION, &e.report)?;
    write_versioned(&cfg.out.join("predictions.json"), "worldkit-predictions", REPORT_FORMAT_VERSION, &e.predictions)?;
    Ok(e.report)
}

/// Trains and scores the ablation grids over the configured seeds.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<RowResult>, CliError> {
    let a = &cfg.ablate;
    let bench = build_benchmark(&a.benchmark)?;
    let base = cfg.model_config();
    let vocabs = Vocabs::build(&bench.train, base.text_vocab_cap)?;
    let mut rows: Vec<Components> = graph_grid();
    if a.action_grid {
        rows.extend(action_grid().into_iter().filter(|c| !c.multitask));
    }
    let mut results = Vec::new();
    for &seed in &a.options.seeds {
        for &row in &rows {
            results.push(run_row(&bench, &vocabs, base, row, seed, &a.options)?);
        }
    }
    let graph_metrics = ["graph_em", "graph_f1", "token_em", "token_f1"];
    println!("{}", render_table(&results, &graph_grid(), &graph_metrics));
    let mut action_rows = action_grid();
    action_rows.retain(|c| results.iter().any(|r| r.components == *c));
    println!("{}", render_table(&results, &action_rows, &["action_em", "action_f1"]));
    let ord = ordering(&results, "graph_em");
    println!(
        "full {:.2} vs none {:.2} (margin {:.2}); {}",
        ord.full_mean,
        ord.none_mean,
        ord.margin(),
        ord.removals
            .iter()
            .map(|(n, m, w)| format!("[{n}] {m:.2}, full wins {w}/{}", ord.seeds))
            .collect::<Vec<_>>()
            .join("; ")
    );
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    let body = serde_json::json!({"results": results, "ordering": ord});
    write_versioned(&cfg.out.join("ablation.json"), "worldkit-ablation", ABLATION_FORMAT_VERSION, &body)?;
    let over: Vec<String> = results
        .iter()
        .filter(|r| r.out_of_budget)
        .map(|r| format!("[{}] seed {} after {} steps", r.row, r.seed, r.steps))
        .collect();
    if !over.is_empty() {
        return Err(CliError::Budget(over.join(", ")));
    }
    Ok(results)
}

/// Reads a graph file: a JSON array of `[subject, relation, object]`.
pub fn read_graph(path: &Path) -> Result<KnowledgeGraph, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let raw: Vec<Vec<String>> =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut g = KnowledgeGraph::new();
    for (i, parts) in raw.iter().enumerate() {
        let t = Triple::from_parts(parts).map_err(|e| CliError::Data(format!("{} triple {i}: {e}", path.display())))?;
        g.insert(t);
    }
    Ok(g)
}

/// `+`/`-` lines for the difference of two graphs, additions first, each in
/// canonical order.
pub fn diff_lines(a: &KnowledgeGraph, b: &KnowledgeGraph) -> Vec<String> {
    let d = diff(a, b);
    let line = |sign: char, ts: &std::collections::BTreeSet<Triple>| -> Vec<String> {
        let g: KnowledgeGraph = ts.iter().cloned().collect();
        canonicalize(&g).iter().map(|t| format!("{sign} {}", t.canonical())).collect()
    };
    let mut out = line('+', d.additions());
    out.extend(line('-', d.deletions()));
    out
}

pub fn cmd_verify(cfg: &RunConfig) -> Result<Vec<CheckResult>, CliError> {
    let opts = BatteryOptions {
        seed: cfg.seed,
        gradient_coords: cfg.verify.gradient_coords,
        random_cases: cfg.verify.random_cases,
    };
    let results = run_battery(&opts, |r| println!("{}", r.line()));
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    write_versioned(&cfg.out.join("verify.json"), "worldkit-verify", VERIFY_FORMAT_VERSION, &results)?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(results)
    } else {
        Err(CliError::Verify(failed.join(", ")))
    }
}
