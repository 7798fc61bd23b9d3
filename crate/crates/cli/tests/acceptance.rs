//! One pass/fail line per acceptance criterion.

use std::io::Write;
use std::time::Instant;

use worldkit_cli::ablate::{build_benchmark, ordering, ordering_rows, run_row, AblationOptions, BenchmarkSpec};
use worldkit_cli::verify::{self, CheckResult};
use worldkit_model::config::ModelConfig;
use worldkit_model::features::Vocabs;

const SEED: u64 = 0;
const ABLATION_LIMIT_SECS: f64 = 90.0 * 60.0;

/// Bypasses the harness capture so the lines show in plain `cargo test` runs.
fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn ablation_ordering() -> CheckResult {
    let start = Instant::now();
    let run = || -> Result<String, String> {
        let spec = BenchmarkSpec::default();
        let bench = build_benchmark(&spec).map_err(|e| e.to_string())?;
        let base = ModelConfig::tiny();
        let vocabs = Vocabs::build(&bench.train, base.text_vocab_cap).map_err(|e| e.to_string())?;
        let opts = AblationOptions::default();
        let mut results = Vec::new();
        for &seed in &opts.seeds {
            for row in ordering_rows() {
                let r = run_row(&bench, &vocabs, &base, row, seed, &opts).map_err(|e| e.to_string())?;
                say(&format!(
                    "      [{}] seed {seed}: graph_em {:.2}, {} steps, {:.0}s",
                    r.row,
                    r.metric("graph_em").unwrap_or(f64::NAN),
                    r.steps,
                    r.train_secs + r.eval_secs
                ));
                if r.out_of_budget {
                    return Err(format!("[{}] seed {seed} ran out of its row budget", r.row));
                }
                results.push(r);
            }
        }
        let o = ordering(&results, "graph_em");
        let secs = start.elapsed().as_secs_f64();
        let summary = format!(
            "{} train / {} test samples; full {:.2} vs none {:.2} (margin {:.2}); {}; {:.0}s",
            bench.train.len(),
            bench.test.len(),
            o.full_mean,
            o.none_mean,
            o.margin(),
            o.removals
                .iter()
                .map(|(n, m, w)| format!("[{n}] {m:.2} full wins {w}/{}", o.seeds))
                .collect::<Vec<_>>()
                .join(", "),
            secs
        );
        if !o.holds(5.0, 2) {
            return Err(summary);
        }
        if secs > ABLATION_LIMIT_SECS {
            return Err(format!("over the time limit: {summary}"));
        }
        Ok(summary)
    };
    let (passed, detail) = match run() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckResult {
        criterion: Some(9),
        name: "ablation ordering".into(),
        passed,
        detail,
        secs: start.elapsed().as_secs_f64(),
    }
}

#[test]
fn acceptance() {
    let mut results: Vec<CheckResult> = Vec::new();
    let mut report = |r: CheckResult| {
        say(&r.line());
        results.push(r);
    };
    let corpora = verify::synthetic_corpora(20, 100, SEED).expect("synthetic corpora");
    report(verify::check_diff_roundtrip(&corpora));
    report(verify::check_deletion_inference(&corpora));
    report(verify::check_sos_independence(SEED));
    report(verify::check_permutation_invariance(100, SEED));
    report(verify::check_single_element_reduction(1000, SEED));
    report(verify::check_gradients(200, SEED));
    report(verify::check_metric_oracle(1000, SEED));
    report(verify::check_diff_statistic(&corpora));
    report(ablation_ordering());
    report(verify::check_valid_actions(10));
    report(verify::check_determinism(SEED));
    report(verify::check_beam(SEED));
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{:?} {}", r.criterion, r.name))
        .collect();
    say(&format!("{} of {} criteria passed", results.len() - failed.len(), results.len()));
    assert!(failed.is_empty(), "failed: {failed:?}");
}
