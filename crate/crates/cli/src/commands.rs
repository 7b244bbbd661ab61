use std::io::Read as _;
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use mcar::corpus::{Label, SplitName};
use mcar::evaluation::{
    compare_predictions, confusion_from_predictions, hypothesis_test, metrics_from_cm, predict_all,
    read_predictions_csv, render_report, write_predictions_csv, ComparisonSection, EvalSection, Prediction,
    ReportInput, TransformerClassifier,
};
use mcar::gateway::{Gateway, HttpTransport, MockTransport, RemoteClassifierConfig, Transport};
use mcar::pipeline::{self, EvalRecord, MetricsFile, PipelineConfig};
use mcar::rating::{rate, score_dimensions, DimensionSuite, ThresholdTable};
use mcar::store::DataDir;
use mcar::training::TrainRunConfig;
use mcar_service::{AppState, PipelineTrainer, ServiceConfig};

use crate::args::*;

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let data = DataDir::new(&cli.data_dir);
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(&data, cfg, a),
        Command::Pretrain(a) => pretrain(&data, cfg, a),
        Command::Train(a) => train(&data, cfg, a),
        Command::Eval(a) => eval(&data, cfg, a),
        Command::FeedbackRun(a) => feedback_run(&data, cfg, a),
        Command::Compare(a) => compare(&data, cfg, a),
        Command::Rate(a) => rate_cmd(&data, a),
        Command::Classify(a) => classify(&data, cfg, a),
        Command::Serve(a) => serve(&data, cfg, a),
        Command::Report(a) => report(&data, a),
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig> {
    let cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str::<PipelineConfig>(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    let seed = seed.unwrap_or(cfg.seed);
    Ok(cfg.with_seed(seed))
}

fn apply_train(run: &mut TrainRunConfig, a: &TrainArgs) {
    if let Some(v) = a.epochs {
        run.max_epochs = v;
    }
    if let Some(v) = a.lr {
        run.lr = v;
    }
    if let Some(v) = a.batch_size {
        run.batch_size = v;
    }
    if let Some(v) = a.patience {
        run.patience = v;
    }
}

fn gen_corpus(data: &DataDir, mut cfg: PipelineConfig, a: GenCorpusArgs) -> Result<()> {
    let plan = &mut cfg.corpus;
    let overrides = [
        (&mut plan.n_explicit, a.explicit),
        (&mut plan.n_clean, a.clean),
        (&mut plan.train, a.train),
        (&mut plan.eval_pre, a.eval_pre),
        (&mut plan.eval_post, a.eval_post),
        (&mut plan.comparison, a.comparison),
    ];
    for (slot, v) in overrides {
        if let Some(v) = v {
            *slot = v;
        }
    }
    if let Some(v) = a.marker_rate_explicit {
        plan.marker_rate_explicit = v;
    }
    if let Some(v) = a.marker_rate_clean {
        plan.marker_rate_clean = v;
    }
    let splits = pipeline::generate(data, &cfg.corpus, cfg.seed)?;
    if !data.thresholds().exists() {
        ThresholdTable::default().save(&data.thresholds())?;
    }
    println!(
        "wrote {} songs to {}",
        cfg.corpus.n_explicit + cfg.corpus.n_clean,
        data.corpus().display()
    );
    for s in &splits {
        println!(
            "{:<11} {:>4} songs ({} explicit, {} non-explicit)",
            s.name.as_str(),
            s.members.len(),
            s.class_counts.explicit,
            s.class_counts.non_explicit
        );
    }
    Ok(())
}

fn print_stage(label: &str, stage: &pipeline::StageOutcome) {
    println!("{label} finished after {} epochs", stage.report.epochs.len());
    if let Some(best) = stage.report.best() {
        println!(
            "best epoch {}: train loss {:.4}, val loss {:.4}, val accuracy {:.3}",
            best.epoch, best.train_loss, best.val_loss, best.val_accuracy
        );
    } else if let Some(last) = stage.report.epochs.last() {
        println!("last epoch {}: train loss {:.4}", last.epoch, last.train_loss);
    }
    println!("snapshot {}", stage.hash);
    println!("run {}", stage.run_dir.display());
}

fn pretrain(data: &DataDir, mut cfg: PipelineConfig, a: TrainArgs) -> Result<()> {
    apply_train(&mut cfg.pretrain, &a);
    let stage = pipeline::pretrain_stage(data, &cfg)?;
    print_stage("pretraining", &stage);
    Ok(())
}

fn train(data: &DataDir, mut cfg: PipelineConfig, a: TrainArgs) -> Result<()> {
    apply_train(&mut cfg.train, &a);
    let stage = pipeline::train_stage(data, &cfg)?;
    print_stage("fine-tuning", &stage);
    Ok(())
}

fn section_name(split: SplitName) -> &'static str {
    match split {
        SplitName::EvalPre => "before",
        SplitName::EvalPost => "after",
        other => other.as_str(),
    }
}

fn eval(data: &DataDir, cfg: PipelineConfig, a: EvalArgs) -> Result<()> {
    let threshold = a.threshold.unwrap_or(cfg.threshold);
    let split: SplitName = a.split.into();
    let (preds, snapshot, name) = match &a.predictions {
        Some(path) => {
            let preds = read_predictions_csv(path)?;
            let name = path.file_stem().map_or("predictions".into(), |s| s.to_string_lossy().into_owned());
            (preds, format!("file:{}", path.display()), name)
        }
        None => {
            let (model, hash) = match &a.model {
                Some(ckpt) => pipeline::load_model_from(ckpt, a.vocab.as_deref().unwrap_or(&data.vocab()))?,
                None => pipeline::load_model(data)?,
            };
            let corpus = pipeline::load_corpus(data)?;
            let splits = pipeline::load_splits(data)?;
            let songs = pipeline::split_songs(&corpus, &splits, split)?;
            (predict_all(&model, &songs)?, hash, section_name(split).to_string())
        }
    };
    if let Some(out) = &a.write_predictions {
        write_predictions_csv(out, &preds)?;
    }
    let cm = confusion_from_predictions(&preds, threshold);
    let metrics = metrics_from_cm(&cm)?;
    let record = EvalRecord {
        split: split.as_str().to_string(),
        snapshot,
        cm,
        metrics,
    };
    if let Some(slot) = a.record {
        let mut m = MetricsFile::load(&data.metrics())?;
        match slot {
            RecordSlot::Pre => m.pre = Some(record.clone()),
            RecordSlot::Post => m.post = Some(record.clone()),
        }
        data.ensure()?;
        m.save(&data.metrics())?;
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&record)?);
    } else {
        let input = ReportInput {
            sections: vec![EvalSection { name, cm }],
            comparison: None,
        };
        print!("{}", render_report(&input));
        println!("snapshot {}", record.snapshot);
    }
    Ok(())
}

fn feedback_run(data: &DataDir, mut cfg: PipelineConfig, a: FeedbackArgs) -> Result<()> {
    if let Some(v) = a.fp_weight {
        cfg.fp_weight = v;
    }
    if let Some(v) = a.fn_weight {
        cfg.fn_weight = v;
    }
    if let Some(v) = a.epochs {
        cfg.refine.max_epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.refine.lr = v;
    }
    if let Some(v) = a.threshold {
        cfg.threshold = v;
    }
    let out = pipeline::feedback_stage(data, &cfg)?;
    println!("harvested {} misclassified songs into {}", out.harvested, data.feedback_ledger().display());
    let input = ReportInput {
        sections: vec![
            EvalSection {
                name: "before".into(),
                cm: out.pre.cm,
            },
            EvalSection {
                name: "after".into(),
                cm: out.post.cm,
            },
        ],
        comparison: None,
    };
    print!("{}", render_report(&input));
    println!("snapshot {} -> {}", out.pre.snapshot, out.post.snapshot);
    println!("run {}", out.stage.run_dir.display());
    Ok(())
}

fn gateway(data: &DataDir, a: &CompareArgs) -> Result<Gateway> {
    let mut cfg = if a.remote {
        RemoteClassifierConfig::from_env()
    } else {
        RemoteClassifierConfig {
            endpoint: "mock://local".into(),
            ..RemoteClassifierConfig::default()
        }
    };
    if a.log_remote {
        cfg.audit_log = Some(data.audit_log());
    }
    let transport: Box<dyn Transport> = if a.remote {
        Box::new(HttpTransport)
    } else {
        Box::new(MockTransport::keywords(&a.mock_keywords))
    };
    Ok(Gateway::new(cfg, transport)?)
}

fn compare(data: &DataDir, cfg: PipelineConfig, a: CompareArgs) -> Result<()> {
    let threshold = a.threshold.unwrap_or(cfg.threshold);
    let (preds_a, preds_b, name_a, name_b): (Vec<Prediction>, Vec<Prediction>, String, String) =
        match (&a.predictions_a, &a.predictions_b) {
            (Some(pa), Some(pb)) => (
                read_predictions_csv(pa)?,
                read_predictions_csv(pb)?,
                stem(pa),
                stem(pb),
            ),
            _ => {
                let (model, _) = pipeline::load_model(data)?;
                let corpus = pipeline::load_corpus(data)?;
                let splits = pipeline::load_splits(data)?;
                let songs = pipeline::split_songs(&corpus, &splits, a.split.into())?;
                let gw = gateway(data, &a)?;
                let baseline = if a.remote { "remote baseline" } else { "mock baseline" };
                (
                    predict_all(&model, &songs)?,
                    predict_all(&gw, &songs).context("baseline classifier failed")?,
                    "customized model".to_string(),
                    baseline.to_string(),
                )
            }
        };
    let stats = compare_predictions(&preds_a, &preds_b, threshold)?;
    let test = hypothesis_test(&stats, a.alpha);
    let section = ComparisonSection {
        model_a: name_a,
        model_b: name_b,
        stats,
        test,
    };
    let mut m = MetricsFile::load(&data.metrics())?;
    m.comparison = Some(section.clone());
    data.ensure()?;
    m.save(&data.metrics())?;
    print!(
        "{}",
        render_report(&ReportInput {
            sections: Vec::new(),
            comparison: Some(section),
        })
    );
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn read_lyrics(data: &DataDir, input: &LyricsInput) -> Result<(String, String)> {
    if let Some(l) = &input.lyrics {
        return Ok((String::new(), l.clone()));
    }
    if let Some(f) = &input.file {
        let text = std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        return Ok((String::new(), text));
    }
    if let Some(id) = &input.song_id {
        let corpus = pipeline::load_corpus(data)?;
        let song = corpus.get(id).ok_or_else(|| anyhow!("unknown song {id}"))?;
        return Ok((id.clone(), song.song.lyrics.clone()));
    }
    let mut text = String::new();
    std::io::stdin().read_to_string(&mut text)?;
    if text.trim().is_empty() {
        bail!("no lyrics given: use --lyrics, --file, --song-id or standard input");
    }
    Ok((String::new(), text))
}

fn load_classifier(data: &DataDir) -> Result<(TransformerClassifier, String)> {
    Ok(pipeline::load_model(data)?)
}

fn rate_cmd(data: &DataDir, a: RateArgs) -> Result<()> {
    let (song_id, lyrics) = read_lyrics(data, &a.input)?;
    let (model, _) = load_classifier(data)?;
    let thresholds = match &a.thresholds {
        Some(p) => ThresholdTable::load(p)?,
        None => pipeline::load_thresholds(data)?,
    };
    let (scores, _warnings) = score_dimensions(&lyrics, &DimensionSuite::sexual_only(&model))?;
    let record = rate(song_id, &scores, &thresholds);
    println!("{}", serde_json::to_string_pretty(&record)?);
    Ok(())
}

fn classify(data: &DataDir, cfg: PipelineConfig, a: ClassifyArgs) -> Result<()> {
    let threshold = a.threshold.unwrap_or(cfg.threshold);
    let (song_id, lyrics) = read_lyrics(data, &a.input)?;
    let (model, hash) = load_classifier(data)?;
    let p = mcar::evaluation::Classifier::probability(&model, &lyrics).map_err(|e| anyhow!(e))?;
    let out = serde_json::json!({
        "song_id": (!song_id.is_empty()).then_some(song_id),
        "probability": p,
        "label": Label::from_explicit(p >= threshold),
        "snapshot": hash,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn serve(data: &DataDir, cfg: PipelineConfig, a: ServeArgs) -> Result<()> {
    data.ensure()?;
    let mut scfg = ServiceConfig::new(data.clone());
    scfg.token = a.token.clone();
    scfg.threshold = a.threshold.unwrap_or(cfg.threshold);
    scfg.static_dir = a.static_dir.clone();
    let trainer = Arc::new(PipelineTrainer {
        data: data.clone(),
        config: cfg,
    });
    let state = AppState::open(&scfg, trainer)?;
    if scfg.token.is_none() {
        tracing::warn!("no moderator token set; decision and retrain endpoints are disabled");
    }
    let app = mcar_service::router(state, scfg.static_dir.as_deref());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port)).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        mcar_service::serve(listener, app).await?;
        Ok(())
    })
}

fn report(data: &DataDir, a: ReportArgs) -> Result<()> {
    let m = MetricsFile::load(&data.metrics())?;
    let mut sections = Vec::new();
    if let Some(pre) = &m.pre {
        sections.push(EvalSection {
            name: "before".into(),
            cm: pre.cm,
        });
    }
    if let Some(post) = &m.post {
        sections.push(EvalSection {
            name: "after".into(),
            cm: post.cm,
        });
    }
    if sections.is_empty() && m.comparison.is_none() {
        bail!("{} holds no results yet; run eval --record, feedback-run or compare first", data.metrics().display());
    }
    let input = ReportInput {
        sections,
        comparison: m.comparison,
    };
    let out = a.out.unwrap_or_else(|| data.reports());
    let written = mcar::evaluation::emit_report(&input, &out)?;
    print!("{}", render_report(&input));
    for p in written {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}
