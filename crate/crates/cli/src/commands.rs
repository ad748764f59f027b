use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use anyhow::{bail, Context, Result};
use prefalign_core::adapter::{self, AdapterParams, EmbeddingSources, TrainerConfig};
use prefalign_core::chat_ingest::{self, AnonymizationKey};
use prefalign_core::curation::{self, CurationConfig};
use prefalign_core::dataset::{self, Dataset, DatasetStats, SplitStrategy};
use prefalign_core::embedding::{load_emb, EmbeddingMatrix, EmbeddingProvider};
use prefalign_core::gen_metrics::{self, FeatureMatrix, ProbMatrix, SplitMetricInputs};
use prefalign_core::scoring::{self, ChoiceVector, MlpWeights};
use serde::Serialize;
use serde_json::json;

use crate::output::{print_json, to_rounded_value, write_jsonl};
use crate::*;

pub fn run(command: Command) -> Result<Outcome> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Validate(a) => validate(a),
        Command::Stats(a) => stats(a),
        Command::Split(a) => split(a),
        Command::Score(a) => score(a),
        Command::EvalAccuracy(a) => eval_accuracy(a),
        Command::Agreement(a) => agreement(a),
        Command::Is(a) => inception(a),
        Command::Fid(a) => fid(a),
        Command::SplitMetrics(a) => split_metrics(a),
        Command::TrainAdapter(a) => train_adapter(a),
        Command::Curate(a) => curate(a),
        Command::Serve(a) => serve(a),
    }
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Dataset::read_jsonl(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    ds.write_jsonl(BufWriter::new(f))?;
    Ok(())
}

fn read_emb(path: &Path) -> Result<EmbeddingMatrix> {
    load_emb(path).with_context(|| format!("loading {}", path.display()))
}

fn open_reader(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// Refuses to go on with a dataset that breaks its invariants.
fn require_valid(ds: &Dataset) -> Result<()> {
    let report = dataset::validate(ds);
    if !report.is_clean() {
        bail!("dataset has {} violations; run `prefalign validate` for details", report.violations.len());
    }
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<Outcome> {
    let raw = std::fs::read(&a.export).with_context(|| format!("reading {}", a.export.display()))?;
    let log = chat_ingest::parse_export(&raw)?;
    let extraction = chat_ingest::extract_sessions(&log);
    let key = match &a.key {
        Some(hex) => AnonymizationKey::from_hex(hex)?,
        None => {
            tracing::warn!("no anonymization key given; user ids will not be linkable across runs");
            AnonymizationKey::random()
        }
    };
    let instances = chat_ingest::sessions_to_instances(&extraction.sessions, &key)?;
    let ds = Dataset::new(instances);
    let summary = json!({ "instances": ds.len(), "diagnostics": extraction.diagnostics });
    match &a.out {
        Some(path) => {
            write_dataset(&ds, path)?;
            print_json(&summary)?;
        }
        None => {
            ds.write_jsonl(std::io::stdout().lock())?;
            eprintln!("{}", serde_json::to_string(&summary)?);
        }
    }
    Ok(Outcome::Ok)
}

fn validate(a: DatasetArg) -> Result<Outcome> {
    let ds = read_dataset(&a.dataset)?;
    let report = dataset::validate(&ds);
    print_json(&report)?;
    Ok(if report.is_clean() { Outcome::Ok } else { Outcome::Violations })
}

fn stats(a: StatsArgs) -> Result<Outcome> {
    let s = match (&a.dataset, &a.composition) {
        (Some(path), _) => dataset::stats(&read_dataset(path)?),
        (None, Some(c)) => DatasetStats::from_composition(c),
        (None, None) => unreachable!("clap requires one of --dataset and --composition"),
    };
    let baseline = dataset::random_guess_accuracy(&s).ok();
    let mut out = to_rounded_value(&s)?;
    out["random_guess_accuracy"] = to_rounded_value(&baseline)?;
    print_json(&out)?;
    Ok(Outcome::Ok)
}

fn split(a: SplitArgs) -> Result<Outcome> {
    let ds = read_dataset(&a.dataset)?;
    let strategy = match a.strategy {
        Strategy::Uniform => SplitStrategy::Uniform,
        Strategy::Stratified => SplitStrategy::StratifiedByN,
    };
    let (train, val) = dataset::split(&ds, a.seed, a.val_size, strategy)?;
    write_dataset(&train, &a.out_train)?;
    write_dataset(&val, &a.out_val)?;
    print_json(&json!({
        "train": dataset::stats(&train),
        "val": dataset::stats(&val),
        "seed": a.seed,
    }))?;
    Ok(Outcome::Ok)
}

fn lookup(m: &EmbeddingMatrix, id: &str, what: &str) -> Result<Vec<f64>> {
    m.lookup(id).with_context(|| format!("no {what} embedding for {id:?}"))
}

#[derive(Serialize)]
struct ScoredImage<'a> {
    prompt_id: &'a str,
    prompt: &'a str,
    image_id: &'a str,
    hps: f64,
    clip_score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    aesthetic: Option<f64>,
}

fn score(a: ScoreArgs) -> Result<Outcome> {
    let ds = read_dataset(&a.dataset)?;
    let images = read_emb(&a.emb.emb_images)?;
    let texts = read_emb(&a.emb.emb_texts)?;
    let weights = a.weights.as_deref().map(MlpWeights::<f64>::load).transpose()?;
    let mut rows = Vec::new();
    for inst in &ds.instances {
        let t = lookup(&texts, &inst.prompt_id, "text")?;
        for id in &inst.image_ids {
            let e = lookup(&images, id, "image")?;
            rows.push(ScoredImage {
                prompt_id: &inst.prompt_id,
                prompt: &inst.prompt,
                image_id: id,
                hps: scoring::hps(&e, &t)?,
                clip_score: scoring::clip_score(&e, &t)?,
                aesthetic: weights.as_ref().map(|w| scoring::aesthetic_score(&e, w)).transpose()?,
            });
        }
    }
    match &a.out {
        Some(path) => {
            write_jsonl(create(path)?, &rows)?;
            print_json(&json!({ "images": rows.len(), "prompts": ds.len() }))?;
        }
        None => write_jsonl(std::io::stdout().lock(), &rows)?,
    }
    Ok(Outcome::Ok)
}

fn scorer_choices(a: &EvalArgs, ds: &Dataset, scorer: Scorer) -> Result<ChoiceVector> {
    let (Some(img_path), Some(txt_path)) = (&a.emb_images, &a.emb_texts) else {
        bail!("--scorer needs --emb-images and --emb-texts");
    };
    let images = read_emb(img_path)?;
    let texts = read_emb(txt_path)?;
    let mut out = ChoiceVector::new(format!("{scorer:?}").to_lowercase());
    match scorer {
        Scorer::Adapter => {
            let path = a.adapter.as_deref().context("--scorer adapter needs --adapter")?;
            let params = AdapterParams::<f64>::load(path)?;
            let sources = EmbeddingSources { images: &images, texts: &texts };
            for inst in &ds.instances {
                let logits = adapter::forward_loss(inst, &sources, &params)?.logits;
                out.choices.insert(inst.prompt_id.clone(), scoring::argmax(&logits).map_or(0, |c| c.index));
            }
        }
        _ => {
            let weights = match scorer {
                Scorer::Aesthetic => Some(MlpWeights::<f64>::load(a.weights.as_deref().context("--scorer aesthetic needs --weights")?)?),
                _ => None,
            };
            for inst in &ds.instances {
                let t = lookup(&texts, &inst.prompt_id, "text")?;
                let mut scores = Vec::with_capacity(inst.n());
                for id in &inst.image_ids {
                    let e = lookup(&images, id, "image")?;
                    scores.push(match (&weights, scorer) {
                        (Some(w), _) => scoring::aesthetic_score(&e, w)?,
                        (None, Scorer::Clip) => scoring::clip_score(&e, &t)?,
                        _ => scoring::hps(&e, &t)?,
                    });
                }
                out.choices.insert(inst.prompt_id.clone(), scoring::argmax(&scores).map_or(0, |c| c.index));
            }
        }
    }
    Ok(out)
}

fn eval_accuracy(a: EvalArgs) -> Result<Outcome> {
    let ds = read_dataset(&a.dataset)?;
    require_valid(&ds)?;
    let predicted = match (&a.predictions, a.scorer) {
        (Some(path), _) => {
            let all = ChoiceVector::read_jsonl(open_reader(path)?)?;
            match &a.rater {
                Some(r) => all.into_iter().find(|v| &v.rater_id == r).with_context(|| format!("rater {r:?} not in {}", path.display()))?,
                None => all.into_iter().next().context("prediction file is empty")?,
            }
        }
        (None, scorer) => scorer_choices(&a, &ds, scorer.unwrap_or(Scorer::Hps))?,
    };
    if let Some(path) = &a.out {
        std::fs::write(path, predicted.to_jsonl())?;
    }
    let accuracy = scoring::preference_accuracy(&predicted, &ds)?;
    print_json(&json!({
        "rater": predicted.rater_id,
        "instances": ds.len(),
        "accuracy": accuracy,
        "random_guess_accuracy": dataset::random_guess_accuracy(&dataset::stats(&ds))?,
    }))?;
    Ok(Outcome::Ok)
}

fn agreement(a: AgreementArgs) -> Result<Outcome> {
    let mut panel = ChoiceVector::read_jsonl(open_reader(&a.choices)?)?;
    let model = match (&a.model_rater, &a.model) {
        (Some(id), _) => {
            let pos = panel.iter().position(|v| &v.rater_id == id).with_context(|| format!("rater {id:?} not found"))?;
            Some(panel.remove(pos))
        }
        (None, Some(path)) => Some(ChoiceVector::read_jsonl(open_reader(path)?)?.into_iter().next().context("model file is empty")?),
        (None, None) => None,
    };
    let human = if panel.len() >= 2 { Some(scoring::human_agreement(&panel)?) } else { None };
    let model_stats = model.as_ref().map(|m| scoring::panel_agreement(m, &panel)).transpose()?;
    print_json(&json!({
        "raters": panel.len(),
        "human_agreement": human,
        "model": model.as_ref().map(|m| &m.rater_id),
        "model_agreement": model_stats,
    }))?;
    Ok(Outcome::Ok)
}

fn inception(a: IsArgs) -> Result<Outcome> {
    let m = read_emb(&a.probs)?;
    let probs = ProbMatrix::<f64>::from_f32_rows(m.iter().map(|(_, v)| v), m.dim())?;
    let s = gen_metrics::inception_score(&probs, a.splits, a.seed)?;
    print_json(&json!({ "mean": s.mean, "std": s.std, "rows": probs.rows(), "splits": a.splits, "seed": a.seed }))?;
    Ok(Outcome::Ok)
}

fn features(path: &Path) -> Result<FeatureMatrix<f64>> {
    let m = read_emb(path)?;
    Ok(FeatureMatrix::from_f32_rows(m.iter().map(|(_, v)| v), m.dim())?)
}

fn fid(a: FidArgs) -> Result<Outcome> {
    let fa = features(&a.a)?;
    let fb = features(&a.b)?;
    let d = gen_metrics::fid(&fa, &fb)?;
    print_json(&json!({ "fid": d, "rows_a": fa.rows(), "rows_b": fb.rows(), "dim": fa.dim() }))?;
    Ok(Outcome::Ok)
}

fn split_metrics(a: SplitMetricsArgs) -> Result<Outcome> {
    let ds = read_dataset(&a.dataset)?;
    require_valid(&ds)?;
    let probs = read_emb(&a.probs)?;
    let feats = read_emb(&a.features)?;
    let reference = read_emb(&a.reference)?;
    let report = gen_metrics::split_metric_report(
        &ds,
        &SplitMetricInputs { probs: &probs, features: &feats, reference: &reference, n_splits: a.splits, seed: a.seed },
    )?;
    for w in &report.warnings {
        tracing::warn!("{w}");
    }
    print_json(&report)?;
    Ok(Outcome::Ok)
}

fn train_adapter(a: TrainArgs) -> Result<Outcome> {
    let ds = read_dataset(&a.dataset)?;
    require_valid(&ds)?;
    let images = read_emb(&a.emb.emb_images)?;
    let texts = read_emb(&a.emb.emb_texts)?;
    let (train_set, val_set) = match (&a.val, a.val_size) {
        (Some(path), _) => {
            let val = read_dataset(path)?;
            require_valid(&val)?;
            (ds, Some(val))
        }
        (None, Some(n)) if n > 0 => {
            let (t, v) = dataset::split(&ds, a.seed, n, SplitStrategy::Uniform)?;
            (t, Some(v))
        }
        _ => (ds, None),
    };
    let config = TrainerConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        weight_decay: a.weight_decay,
        rank: a.rank,
        logit_scale: a.logit_scale,
        seed: a.seed,
        stop_at_val_accuracy: a.stop_at,
    };
    let sources = EmbeddingSources { images: &images, texts: &texts };
    let (params, history) = adapter::train::<f64>(&train_set, val_set.as_ref(), &sources, &config)?;
    params.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(path) = &a.history_csv {
        std::fs::write(path, history.steps_csv())?;
    }
    let final_train_loss = adapter::mean_loss(&train_set, &sources, &params)?;
    print_json(&json!({
        "config": config,
        "train_prompts": train_set.len(),
        "val_prompts": val_set.as_ref().map(Dataset::len),
        "initial_train_loss": history.initial_train_loss,
        "final_train_loss": final_train_loss,
        "initial_val_accuracy": history.initial_val_accuracy,
        "final_val_accuracy": history.epochs.last().and_then(|e| e.val_accuracy),
        "steps": history.steps.len(),
        "epochs": history.epochs,
    }))?;
    Ok(Outcome::Ok)
}

fn curate(a: CurateArgs) -> Result<Outcome> {
    let items = curation::read_scored_items(open_reader(&a.scored)?)?;
    let regularization = match &a.regularization {
        Some(p) => curation::read_regularization(open_reader(p)?)?,
        None => Vec::new(),
    };
    let triples: Vec<(String, String, f64)> = items.into_iter().map(|i| (i.prompt, i.image_id, i.hps)).collect();
    let (groups, grouping) = curation::group_by_prompt(&triples);
    let config = CurationConfig { alpha: a.alpha, identifier: a.identifier };
    let manifest = curation::build_manifest(&groups, &config, &regularization)?;
    for w in &manifest.summary.warnings {
        tracing::warn!("{w}");
    }
    let summary = json!({ "grouping": grouping, "manifest": manifest.summary });
    match &a.out {
        Some(path) => {
            write_jsonl(create(path)?, &manifest.entries)?;
            print_json(&summary)?;
        }
        None => {
            write_jsonl(std::io::stdout().lock(), &manifest.entries)?;
            eprintln!("{}", serde_json::to_string(&summary)?);
        }
    }
    Ok(Outcome::Ok)
}

fn serve(a: ServeArgs) -> Result<Outcome> {
    let config = prefalign_study::ServerConfig { host: a.host, port: a.port, data_dir: a.data_dir, image_dir: a.image_dir };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let server = prefalign_study::Server::bind(&config).await?;
        let addr = server.local_addr()?;
        // The bound address is the one machine-readable line this command prints.
        println!("{}", json!({ "listening": addr.to_string() }));
        tracing::info!(%addr, data_dir = %config.data_dir.display(), "study service ready");
        server
            .run(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        anyhow::Ok(())
    })?;
    Ok(Outcome::Ok)
}
