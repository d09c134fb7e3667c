use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use mpgat_core::checkpoint::Checkpoint;
use mpgat_core::features::{
    format_timestamp, ingest_csv, input_at, parse_timestamp, prepare as prepare_data, synth_generate,
    MultivariateSample, PreparedCache, PreparedData, RawSeries, CACHE_VERSION,
};
use mpgat_core::graph::{load_graph, IntersectionGraph, DEFAULT_SIX_INTERSECTION_GRAPH};
use mpgat_core::model::{AttentionMasks, Mpgat};
use mpgat_core::train::{
    compare_reports, comparison_csv, comparison_table, evaluate, format_mean_std, horizon_minutes,
    multi_run, read_reports_jsonl, summarize, train as train_model, write_reports_jsonl, Forecaster,
    HorizonScores, Persistence, RunReport, TrainedModel,
};

use crate::rundir::RunDir;
use crate::settings::Settings;
use crate::Failure;

pub const DATA_CSV: &str = "data.csv";
pub const GRAPH_JSON: &str = "graph.json";
pub const PREPARED: &str = "prepared.json";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const HISTORY: &str = "history.json";
pub const REPORT: &str = "report.json";
pub const REPORTS: &str = "reports.jsonl";
pub const SUMMARY: &str = "summary.txt";
pub const EVAL: &str = "eval.json";
pub const PREDICTIONS: &str = "predictions.csv";
pub const COMPARISON_TXT: &str = "comparison.txt";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const FORECAST: &str = "forecast.csv";
pub const MAPE_CURVE: &str = "mape_vs_horizon.csv";
pub const TRUTH_CURVE: &str = "prediction_vs_truth.csv";

fn json_pretty<T: Serialize>(value: &T) -> Result<Vec<u8>, Failure> {
    Ok(serde_json::to_vec_pretty(value).context("serialize")?)
}

fn is_prepared_cache(path: &Path) -> bool {
    std::fs::read(path)
        .ok()
        .and_then(|bytes| {
            let head = &bytes[..bytes.len().min(256)];
            std::str::from_utf8(head).ok().map(|s| s.contains(CACHE_VERSION))
        })
        .unwrap_or(false)
}

/// A raw series plus its split, from either a CSV or a prepared cache.
fn load_data(settings: &Settings, t_in: usize, t_out: usize) -> Result<(RawSeries, PreparedData), Failure> {
    let path = Settings::require(&settings.data, "data")?;
    if !path.exists() {
        return Err(Failure::Validation(format!("data file {} does not exist", path.display())));
    }
    if is_prepared_cache(path) {
        let cache = PreparedCache::load(path)?;
        if (cache.t_in, cache.t_out) != (t_in, t_out) {
            return Err(Failure::Validation(format!(
                "prepared cache has tin={} tout={}, run wants tin={t_in} tout={t_out}",
                cache.t_in, cache.t_out
            )));
        }
        let data = cache.restore()?;
        return Ok((cache.series, data));
    }
    let series = ingest_csv(path, None)?;
    let data = prepare_data(&series, t_in, t_out, settings.split)?;
    Ok((series, data))
}

fn load_graph_for(settings: &Settings, n_nodes: usize, stored: Option<&str>) -> Result<IntersectionGraph, Failure> {
    let graph = match (&settings.graph, stored) {
        (Some(path), _) => load_graph(path)?,
        (None, Some(json)) => IntersectionGraph::from_json(json)?,
        (None, None) if n_nodes == 6 => IntersectionGraph::from_json(DEFAULT_SIX_INTERSECTION_GRAPH)?,
        (None, None) => {
            return Err(Failure::Usage(format!(
                "--graph is required for a {n_nodes}-node dataset"
            )))
        }
    };
    if graph.n() != n_nodes {
        return Err(Failure::Validation(format!(
            "graph has {} nodes, dataset has {n_nodes}",
            graph.n()
        )));
    }
    Ok(graph)
}

fn load_checkpoint(settings: &Settings) -> Result<Checkpoint, Failure> {
    let path = Settings::require(&settings.checkpoint, "checkpoint")?;
    Checkpoint::load(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

pub fn synth(settings: &Settings) -> Result<(), Failure> {
    let (series, graph) = synth_generate(&settings.synth_config())?;
    let mut dir = RunDir::create(settings, "synth")?;
    let csv = dir.file(DATA_CSV);
    series.save_csv(&csv)?;
    dir.write(GRAPH_JSON, graph.to_json().as_bytes())?;
    println!(
        "{} nodes x {} steps -> {}",
        series.n_nodes(),
        series.n_steps(),
        csv.display()
    );
    dir.finish()?;
    Ok(())
}

pub fn prepare(settings: &Settings) -> Result<(), Failure> {
    let (series, data) = load_data(settings, settings.tin, settings.tout)?;
    let mut dir = RunDir::create(settings, "prepare")?;
    let cache = PreparedCache::new(&series, &data, settings.tin, settings.tout, settings.split);
    let path = match &settings.cache_out {
        Some(p) => p.clone(),
        None => dir.file(PREPARED),
    };
    cache.save(&path)?;
    println!(
        "samples train/val/test = {}/{}/{} -> {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        path.display()
    );
    dir.finish()?;
    Ok(())
}

pub fn train(settings: &Settings) -> Result<(), Failure> {
    settings.check_horizons(settings.tout)?;
    settings.train_config(settings.seed).validate()?;
    if settings.runs == 0 {
        return Err(Failure::Validation("--runs must be at least 1".into()));
    }
    let (series, data) = load_data(settings, settings.tin, settings.tout)?;
    let graph = load_graph_for(settings, series.n_nodes(), None)?;
    let model_cfg = settings.model_config(series.n_nodes());
    model_cfg.validate()?;
    let masks = AttentionMasks::from_graph(&graph);
    let mut dir = RunDir::create(settings, "train")?;
    let graph_json = graph.to_json();

    let run_one = |seed: u64| -> Result<(RunReport, TrainedModel, mpgat_core::train::TrainHistory), Failure> {
        let start = std::time::Instant::now();
        let model = Mpgat::new(model_cfg.clone(), seed)?;
        let mut tm = TrainedModel::new(model, masks.clone(), data.normalizer.clone());
        let history = train_model(&mut tm, &data.train, &data.val, &settings.train_config(seed))?;
        let mape = evaluate(&tm, &data.test, &settings.horizons)?;
        let report = RunReport {
            seed,
            mape,
            epochs: history.epochs.len(),
            seconds: start.elapsed().as_secs_f64(),
        };
        Ok((report, tm, history))
    };

    if settings.runs == 1 {
        let (report, tm, history) = run_one(settings.seed)?;
        let ck = Checkpoint::from_model(&tm.model, Some(&tm.normalizer), Some(graph_json));
        ck.save(dir.file(CHECKPOINT))?;
        dir.write(HISTORY, &json_pretty(&history)?)?;
        dir.write(REPORT, &json_pretty(&report)?)?;
        let mut lines = Vec::new();
        write_reports_jsonl(&mut lines, std::slice::from_ref(&report))?;
        dir.write(REPORTS, &lines)?;
        print_scores("MPGAT", &report.mape);
        println!("epochs {} ({:.1}s)", report.epochs, report.seconds);
    } else {
        let outcome = multi_run(settings.runs, settings.seed, settings.workers, |seed| {
            run_one(seed)
                .map(|(report, _, _)| report)
                .map_err(|e| mpgat_core::MpgatError::Data(e.to_string()))
        })?;
        for (seed, err) in &outcome.failures {
            eprintln!("warning: run with seed {seed} failed and is excluded: {err}");
        }
        let mut lines = Vec::new();
        write_reports_jsonl(&mut lines, &outcome.reports)?;
        dir.write(REPORTS, &lines)?;
        let mut text = String::new();
        for s in summarize(&outcome.reports)? {
            text.push_str(&format!(
                "{}min {}\n",
                horizon_minutes(s.horizon),
                format_mean_std(s.mean, s.std)
            ));
        }
        print!("{text}");
        dir.write(SUMMARY, text.as_bytes())?;
    }
    dir.finish()?;
    Ok(())
}

fn print_scores(name: &str, scores: &HorizonScores) {
    let cells: Vec<String> = scores
        .0
        .iter()
        .map(|(h, m)| format!("{}min {m:.4}", horizon_minutes(*h)))
        .collect();
    println!("{name:<12} {}", cells.join("  "));
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MethodScores {
    pub method: String,
    pub mape: HorizonScores,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalRecord {
    pub checkpoint: String,
    pub test_samples: usize,
    pub methods: Vec<MethodScores>,
}

pub fn eval(settings: &Settings) -> Result<(), Failure> {
    let ck = load_checkpoint(settings)?;
    let cfg = ck.config.clone();
    settings.check_horizons(cfg.t_out)?;
    let (series, data) = load_data(settings, cfg.t_in, cfg.t_out)?;
    let graph = load_graph_for(settings, series.n_nodes(), ck.graph.as_deref())?;
    let normalizer = ck.normalizer.clone().unwrap_or(data.normalizer.clone());
    let tm = TrainedModel::new(ck.to_model()?, AttentionMasks::from_graph(&graph), normalizer);
    let mut dir = RunDir::create(settings, "eval")?;

    let preds = tm.forecast(&data.test)?;
    let model_scores = mpgat_core::train::score_forecasts(&preds, &data.test, &settings.horizons)?;
    let base_scores = evaluate(&Persistence, &data.test, &settings.horizons)?;
    print_scores(tm.name(), &model_scores);
    print_scores(Persistence.name(), &base_scores);
    let record = EvalRecord {
        checkpoint: settings.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        test_samples: data.test.len(),
        methods: vec![
            MethodScores {
                method: tm.name().to_string(),
                mape: model_scores,
            },
            MethodScores {
                method: Persistence.name().to_string(),
                mape: base_scores,
            },
        ],
    };
    dir.write(EVAL, &json_pretty(&record)?)?;
    write_predictions(&dir.file(PREDICTIONS), &series, &data.test, &preds)?;
    dir.finish()?;
    Ok(())
}

/// Long format: one row per (sample, node, horizon).
fn write_predictions(
    path: &Path,
    series: &RawSeries,
    samples: &[MultivariateSample],
    preds: &[mpgat_core::autodiff::Tensor],
) -> Result<(), Failure> {
    let file = File::create(path).with_context(|| path.display().to_string())?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["node", "origin", "timestamp", "horizon", "truth", "prediction"])
        .context("predictions")?;
    for (s, p) in samples.iter().zip(preds) {
        let (n, t_out) = (s.y.shape()[0], s.y.shape()[1]);
        let origin = format_timestamp(series.timestamp(s.t0));
        for node in 0..n {
            for h in 1..=t_out {
                let i = node * t_out + h - 1;
                w.write_record([
                    series.node_ids()[node].as_str(),
                    &origin,
                    &format_timestamp(series.timestamp(s.t0 + h)),
                    &h.to_string(),
                    &s.y.values()[i].to_string(),
                    &p.values()[i].to_string(),
                ])
                .context("predictions")?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_reports(path: &Path) -> Result<Vec<RunReport>, Failure> {
    let file = File::open(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    read_reports_jsonl(BufReader::new(file)).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

pub fn compare(settings: &Settings) -> Result<(), Failure> {
    let a = read_reports(Settings::require(&settings.a, "a")?)?;
    let b = read_reports(Settings::require(&settings.b, "b")?)?;
    if !(settings.alpha > 0.0 && settings.alpha < 1.0) {
        return Err(Failure::Validation(format!("alpha must lie in (0, 1), got {}", settings.alpha)));
    }
    let rows = compare_reports(&a, &b, settings.alpha)?;
    let mut dir = RunDir::create(settings, "compare")?;
    let table = comparison_table(&rows, &settings.a_name, &settings.b_name);
    print!("{table}");
    dir.write(COMPARISON_TXT, table.as_bytes())?;
    let file = File::create(dir.file(COMPARISON_CSV))?;
    comparison_csv(BufWriter::new(file), &rows)?;
    dir.finish()?;
    Ok(())
}

pub fn predict(settings: &Settings) -> Result<(), Failure> {
    let ck = load_checkpoint(settings)?;
    let at = settings
        .at
        .as_deref()
        .ok_or_else(|| Failure::Usage("missing required --at".into()))?;
    let ts = parse_timestamp(at)?;
    let path = Settings::require(&settings.data, "data")?;
    let series = if is_prepared_cache(path) {
        PreparedCache::load(path)?.series
    } else {
        ingest_csv(path, None)?
    };
    let t0 = series.index_of(ts).ok_or_else(|| {
        Failure::Validation(format!(
            "{at} is not a step of the dataset ({} ..= {})",
            format_timestamp(series.start()),
            format_timestamp(series.timestamp(series.n_steps() - 1))
        ))
    })?;
    let cfg = ck.config.clone();
    let x = input_at(&series, t0, cfg.t_in)?;
    let graph = load_graph_for(settings, series.n_nodes(), ck.graph.as_deref())?;
    let normalizer = ck
        .normalizer
        .clone()
        .ok_or_else(|| Failure::Validation("checkpoint has no normalizer".into()))?;
    let tm = TrainedModel::new(ck.to_model()?, AttentionMasks::from_graph(&graph), normalizer);
    let sample = MultivariateSample {
        y: mpgat_core::autodiff::Tensor::zeros([cfg.n_nodes, cfg.t_out]),
        x,
        t0,
    };
    let forecast = tm.forecast(std::slice::from_ref(&sample))?.remove(0);

    let mut dir = RunDir::create(settings, "predict")?;
    let path = dir.file(FORECAST);
    let file = File::create(&path)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["node", "timestamp", "horizon_minutes", "prediction"])
        .context("forecast")?;
    for node in 0..cfg.n_nodes {
        for h in 1..=cfg.t_out {
            let mut v = forecast.values()[node * cfg.t_out + h - 1];
            if settings.clamp_zero {
                v = v.max(0.0);
            }
            w.write_record([
                series.node_ids()[node].as_str(),
                &format_timestamp(series.timestamp(t0) + chrono::Duration::minutes(5 * h as i64)),
                &horizon_minutes(h).to_string(),
                &v.to_string(),
            ])
            .context("forecast")?;
        }
    }
    w.flush()?;
    drop(w);
    print!("{}", std::fs::read_to_string(&path)?);
    dir.finish()?;
    Ok(())
}

pub fn export_plot(settings: &Settings) -> Result<(), Failure> {
    let from = Settings::require(&settings.from, "from")?;
    let eval_path = from.join(EVAL);
    let pred_path = from.join(PREDICTIONS);
    for p in [&eval_path, &pred_path] {
        if !p.exists() {
            return Err(Failure::Validation(format!(
                "{} is missing; point --from at an eval run directory",
                p.display()
            )));
        }
    }
    let record: EvalRecord = serde_json::from_reader(BufReader::new(File::open(&eval_path)?))
        .map_err(|e| Failure::Validation(format!("{}: {e}", eval_path.display())))?;
    let mut dir = RunDir::create(settings, "export-plot")?;

    let mut curve = csv::Writer::from_writer(BufWriter::new(File::create(dir.file(MAPE_CURVE))?));
    curve.write_record(["method", "horizon_minutes", "mape"]).context("curve")?;
    for m in &record.methods {
        for (h, v) in &m.mape.0 {
            curve
                .write_record([m.method.as_str(), &horizon_minutes(*h).to_string(), &v.to_string()])
                .context("curve")?;
        }
    }
    curve.flush()?;

    let wanted = settings.plot_horizon.to_string();
    let mut reader = csv::Reader::from_path(&pred_path).context("predictions")?;
    let mut out = csv::Writer::from_writer(BufWriter::new(File::create(dir.file(TRUTH_CURVE))?));
    out.write_record(["node", "timestamp", "truth", "prediction"]).context("truth curve")?;
    let mut rows = 0usize;
    for rec in reader.records() {
        let rec = rec.context("predictions")?;
        if rec.get(3) == Some(wanted.as_str()) {
            out.write_record([&rec[0], &rec[2], &rec[4], &rec[5]]).context("truth curve")?;
            rows += 1;
        }
    }
    out.flush()?;
    if rows == 0 {
        return Err(Failure::Validation(format!(
            "no predictions at horizon {} in {}",
            settings.plot_horizon,
            pred_path.display()
        )));
    }
    std::io::stdout().flush()?;
    dir.finish()?;
    Ok(())
}
