//! Stage functions over a temporary data directory with a tiny model.

use mcar::corpus::SplitName;
use mcar::feedback::read_ledger;
use mcar::pipeline::{
    eval_stage, feedback_stage, generate, load_model, load_splits, pretrain_stage, refine_stage, split_songs,
    load_corpus, train_stage, CorpusPlan, MetricsFile, ModelOverrides, PipelineConfig, PipelineError,
};
use mcar::store::DataDir;
use mcar::training::TrainRunConfig;

fn tiny(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        model: ModelOverrides {
            d_model: Some(16),
            n_heads: Some(2),
            d_ff: Some(32),
            n_layers: Some(1),
            max_seq_len: Some(64),
            dropout_rate: None,
        },
        corpus: CorpusPlan {
            n_explicit: 30,
            n_clean: 30,
            train: 30,
            eval_pre: 10,
            eval_post: 10,
            comparison: 6,
            marker_rate_explicit: 0.3,
            marker_rate_clean: 0.3,
        },
        pretrain: TrainRunConfig {
            max_epochs: 1,
            ..TrainRunConfig::pretrain()
        },
        train: TrainRunConfig {
            max_epochs: 3,
            ..TrainRunConfig::fine_tune()
        },
        refine: TrainRunConfig {
            max_epochs: 2,
            ..TrainRunConfig::refine()
        },
        ..PipelineConfig::default()
    };
    cfg = cfg.with_seed(seed);
    cfg
}

#[test]
fn splits_are_disjoint_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let data = DataDir::new(dir.path());
    let cfg = tiny(3);
    generate(&data, &cfg.corpus, cfg.seed).unwrap();
    let splits = load_splits(&data).unwrap();
    let mut seen = std::collections::BTreeSet::new();
    for s in &splits {
        for id in &s.members {
            assert!(seen.insert(id.clone()), "{id} in two splits");
        }
    }
    let corpus = load_corpus(&data).unwrap();
    assert_eq!(split_songs(&corpus, &splits, SplitName::Train).unwrap().len(), 30);
    assert_eq!(split_songs(&corpus, &splits, SplitName::Comparison).unwrap().len(), 6);
}

#[test]
fn stages_need_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = DataDir::new(dir.path());
    let cfg = tiny(1);
    assert!(matches!(train_stage(&data, &cfg), Err(PipelineError::Missing(_))));
    assert!(load_model(&data).is_err());
    assert_eq!(MetricsFile::load(&data.metrics()).unwrap(), MetricsFile::default());
}

#[test]
fn feedback_records_pre_and_post_and_grows_the_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let data = DataDir::new(dir.path());
    let cfg = tiny(5);
    generate(&data, &cfg.corpus, cfg.seed).unwrap();
    pretrain_stage(&data, &cfg).unwrap();
    let trained = train_stage(&data, &cfg).unwrap();
    let (_, hash) = load_model(&data).unwrap();
    assert_eq!(hash, trained.hash);

    let pre = eval_stage(&data, SplitName::EvalPre, cfg.threshold).unwrap();
    let out = feedback_stage(&data, &cfg).unwrap();
    assert_eq!(out.pre.cm, pre.cm);
    assert_eq!(out.harvested as u64, pre.cm.fp + pre.cm.fn_);
    assert_eq!(read_ledger(&data.feedback_ledger()).unwrap().len(), out.harvested);
    assert_eq!(out.post.split, "eval_post");
    assert_eq!(out.post.cm.total(), 10);

    let metrics = MetricsFile::load(&data.metrics()).unwrap();
    assert_eq!(metrics.post.unwrap().snapshot, out.stage.hash);
    assert!(out.stage.run_dir.join("report.json").exists());

    // Refining again replays the same ledger without harvesting more.
    let again = refine_stage(&data, &cfg).unwrap();
    assert_eq!(again.harvested, 0);
    assert_eq!(read_ledger(&data.feedback_ledger()).unwrap().len(), out.harvested);
}
