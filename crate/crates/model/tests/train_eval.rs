use worldkit_core::data::StateSample;
use worldkit_core::metrics::ScoreReport;
use worldkit_core::worldgen::{emit_corpus, generate_world, Policy};
use worldkit_model::checkpoint;
use worldkit_model::config::{LossMode, ModelConfig, TargetMode};
use worldkit_model::eval::{evaluate, oracle_prediction, score_all};
use worldkit_model::features::{prepare, PreparedSample, Vocabs};
use worldkit_model::network::WorldModel;
use worldkit_model::train::{TrainOptions, Trainer};

fn corpus() -> Vec<StateSample> {
    let spec = generate_world(5, 3, 3, 2).unwrap();
    emit_corpus(&spec, Policy::CoverageWalk, 60, 5).unwrap()
}

fn trained(samples: &[StateSample], loss: LossMode, target: TargetMode) -> (WorldModel, Vec<f64>) {
    let vocabs = Vocabs::build(samples, 500).unwrap();
    let mut cfg = ModelConfig::tiny();
    cfg.loss = loss;
    cfg.target = target;
    cfg.batch_size = 8;
    let m = WorldModel::new(cfg, vocabs).unwrap();
    let prep: Vec<PreparedSample> = samples.iter().map(|s| prepare(s, &m.vocabs, &m.config).unwrap()).collect();
    let mut t = Trainer::new(m);
    let opts = TrainOptions {
        max_steps: 40,
        eval_every: 0,
        ..Default::default()
    };
    let out = t.fit(&prep, &[], &opts, None).unwrap();
    (t.model, out.history.iter().map(|r| r.total).collect())
}

fn in_range(r: &ScoreReport) -> bool {
    r.overall.values.iter().all(|v| (0.0..=100.0).contains(v))
}

#[test]
fn every_target_and_loss_trains_and_scores() {
    let samples = corpus();
    for loss in [LossMode::Sos, LossMode::Seq] {
        for target in [TargetMode::Diff, TargetMode::Full, TargetMode::AddDel] {
            let (m, curve) = trained(&samples, loss, target);
            let head: f64 = curve[..5].iter().sum();
            let tail: f64 = curve[curve.len() - 5..].iter().sum();
            assert!(tail < head, "{loss:?} {target:?}: {head} -> {tail}");
            let e = evaluate(&m, &samples[..6], 3).unwrap();
            assert!(in_range(&e.report), "{loss:?} {target:?}");
            assert_eq!(e.predictions.len(), 6);
        }
    }
}

#[test]
fn checkpoint_reload_reproduces_evaluation() {
    let samples = corpus();
    let (m, _) = trained(&samples, LossMode::Sos, TargetMode::Diff);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    checkpoint::save(&p, &m).unwrap();
    let back = checkpoint::load(&p).unwrap();
    assert_eq!(evaluate(&m, &samples[..8], 4).unwrap(), evaluate(&back, &samples[..8], 4).unwrap());
}

#[test]
fn gold_predictions_score_one_hundred() {
    let samples = corpus();
    let preds: Vec<_> = samples.iter().map(|s| oracle_prediction(s, true, true)).collect();
    let r = score_all(&samples, &preds).unwrap();
    assert!(r.overall.values.iter().all(|&v| v == 100.0), "{:?}", r.overall);
}
