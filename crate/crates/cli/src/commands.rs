use std::fs;
use std::path::{Path, PathBuf};

use kgcp::baselines::{fit_temperature, naive_select, select_topk, topk_select, Temperature, TopKChoice};
use kgcp::checkpoint::{load_checkpoint, save_checkpoint, Metadata};
use kgcp::conformal::{calibrate, check_epsilon, predict_set, CalibrationProfile, NonconformityKind};
use kgcp::eval::harness::{calibration_subset, SweepRow};
use kgcp::eval::report::{adaptiveness_csv, records_csv, sweep_csv, to_json};
use kgcp::eval::{
    adaptiveness, calibration_size_sweep, epsilon_sweep, evaluate_all, ranking_metrics, AdaptivenessProfile,
    FittedPredictor, Measure, PredictorSpec, TrialConfig,
};
use kgcp::kg::{build_filter_index, make_query_examples, Dictionary, FilterIndex, Query, QueryExample};
use kgcp::trainer::train;
use kgcp::{KnowledgeGraph, ModelParams};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{unknown, CliError, CliResult};

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn filter_for(cfg: &RunConfig, kg: &KnowledgeGraph) -> CliResult<Option<FilterIndex>> {
    if !cfg.eval.filtered {
        return Ok(None);
    }
    Ok(Some(build_filter_index(kg, &cfg.eval.filter_splits)?))
}

fn calibration_examples(kg: &KnowledgeGraph) -> CliResult<Vec<QueryExample>> {
    if kg.valid.is_empty() {
        return Err(CliError::EmptyCalibration("the validation split has no triples".into()));
    }
    Ok(make_query_examples(&kg.valid))
}

/// Loads the configured checkpoint and checks it belongs to this graph and model.
fn load_model(cfg: &RunConfig, kg: &KnowledgeGraph, path: &Path) -> CliResult<ModelParams> {
    let ckpt = load_checkpoint(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
    let kind = cfg.model_kind()?;
    if ckpt.model.kind != kind {
        return Err(CliError::config(
            "model.kind",
            format!("checkpoint {} holds a {} model, config asks for {kind}", path.display(), ckpt.model.kind),
        ));
    }
    if ckpt.meta.dictionary()? != kg.dict {
        return Err(CliError::config(
            "dataset",
            format!("checkpoint {} was trained on a different dictionary", path.display()),
        ));
    }
    Ok(ckpt.model)
}

fn train_and_save(cfg: &RunConfig, kg: &KnowledgeGraph) -> CliResult<ModelParams> {
    let tc = &cfg.model.train;
    tc.validate(kg.num_entities()).map_err(|e| CliError::config("model.train", e))?;
    let out = train(kg, cfg.model_kind()?, cfg.dim()?, tc)?;
    let meta = Metadata::new(&kg.dict, Some(tc.clone()), out.loss_trace.last().copied());
    let path = cfg.checkpoint_path();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(&out.model, &meta, &path)?;
    eprintln!("wrote {}", path.display());
    let mut csv = String::from("epoch,loss\n");
    for (i, loss) in out.loss_trace.iter().enumerate() {
        csv += &format!("{},{loss}\n", i + 1);
    }
    write(&cfg.output_dir.join("loss.csv"), csv.as_bytes())?;
    Ok(out.model)
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<()> {
    let kg = cfg.load_graph()?;
    train_and_save(cfg, &kg)?;
    Ok(())
}

/// Model for experiments: the saved checkpoint, or a freshly trained one.
fn obtain_model(cfg: &RunConfig, kg: &KnowledgeGraph, checkpoint: Option<&Path>) -> CliResult<ModelParams> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.checkpoint_path());
    if path.is_file() {
        load_model(cfg, kg, &path)
    } else if checkpoint.is_some() {
        Err(CliError::Other(format!("checkpoint not found: {}", path.display())))
    } else {
        eprintln!("no checkpoint at {}, training one", path.display());
        train_and_save(cfg, kg)
    }
}

/// Everything fitted on the calibration split, for reuse by `predict`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub epsilon: f64,
    pub filtered: bool,
    pub n_cal: usize,
    pub profiles: Vec<CalibrationProfile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<Temperature>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topk: Option<TopKChoice>,
}

fn nonconformity_for(kind: Measure, temperature: Option<f64>, model: &ModelParams, cal: &[QueryExample]) -> CliResult<NonconformityKind> {
    Ok(match kind {
        Measure::Negscore => NonconformityKind::NegScore,
        Measure::Minmax => NonconformityKind::Minmax,
        Measure::Softmax => NonconformityKind::Softmax,
        Measure::Rank => NonconformityKind::Rank,
        Measure::CalibratedSoftmax => NonconformityKind::CalibratedSoftmax {
            temperature: match temperature {
                Some(t) => t,
                None => fit_temperature(model, cal)?.temperature,
            },
        },
    })
}

pub fn cmd_calibrate(cfg: &RunConfig, checkpoint: Option<&Path>) -> CliResult<()> {
    let kg = cfg.load_graph()?;
    let cal = calibration_examples(&kg)?;
    let model = obtain_model(cfg, &kg, checkpoint)?;
    let filter = filter_for(cfg, &kg)?;
    let mut file = CalibrationFile {
        epsilon: cfg.eval.epsilon,
        filtered: filter.is_some(),
        n_cal: cal.len(),
        profiles: Vec::new(),
        temperature: None,
        topk: None,
    };
    for spec in &cfg.predictors {
        match *spec {
            PredictorSpec::Conformal { kind, temperature } => {
                let measure = nonconformity_for(kind, temperature, &model, &cal)?;
                file.profiles.push(calibrate(&model, &cal, measure)?);
            }
            PredictorSpec::Platt => file.temperature = Some(fit_temperature(&model, &cal)?),
            PredictorSpec::Topk => file.topk = Some(select_topk(&model, &cal, cfg.eval.epsilon, filter.as_ref())?),
            PredictorSpec::Naive | PredictorSpec::Fixed { .. } => {}
        }
    }
    write(&cfg.calibration_path(), &to_json(&file)?)
}

pub struct PredictArgs {
    pub checkpoint: PathBuf,
    pub calibration: PathBuf,
    pub query: String,
    pub predictor: Option<String>,
    pub epsilon: Option<f64>,
    /// Known answers to drop from the set, when filtering.
    pub filter: Option<(RunConfig, KnowledgeGraph)>,
}

/// Splits `"h r ?"` or `"? r t"`; tab-separated when the text has tabs, so
/// names may contain spaces.
pub fn parse_query(text: &str, dict: &Dictionary) -> CliResult<Query> {
    let parts: Vec<&str> = if text.contains('\t') {
        text.split('\t').map(str::trim).collect()
    } else {
        text.split_whitespace().collect()
    };
    let [a, r, b] = parts[..] else {
        return Err(CliError::config("--query", format!("expected \"h r ?\" or \"? r t\", got {text:?}")));
    };
    let relation = dict
        .relations
        .id(r)
        .ok_or_else(|| unknown("relation", r, dict.relations.names().iter().map(String::as_str).collect()))?;
    let entity = |name: &str| {
        dict.entities
            .id(name)
            .ok_or_else(|| unknown("entity", name, dict.entities.names().iter().map(String::as_str).collect()))
    };
    match (a, b) {
        (h, "?") if h != "?" => Ok(Query::tail(entity(h)?, relation)),
        ("?", t) if t != "?" => Ok(Query::head(entity(t)?, relation)),
        _ => Err(CliError::config("--query", "exactly one side must be \"?\"")),
    }
}

fn read_calibration(path: &Path) -> CliResult<CalibrationFile> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

pub fn cmd_predict(args: &PredictArgs) -> CliResult<()> {
    let ckpt = load_checkpoint(&args.checkpoint).map_err(|e| CliError::Other(format!("{}: {e}", args.checkpoint.display())))?;
    let dict = ckpt.meta.dictionary()?;
    let model = &ckpt.model;
    let query = parse_query(&args.query, &dict)?;
    let calibration = if args.calibration.is_file() {
        Some(read_calibration(&args.calibration)?)
    } else {
        None
    };

    let mut available: Vec<String> = calibration
        .iter()
        .flat_map(|c| c.profiles.iter().map(|p| p.kind.name().to_string()))
        .collect();
    if calibration.as_ref().is_some_and(|c| c.temperature.is_some()) {
        available.push("platt".into());
    }
    if calibration.as_ref().is_some_and(|c| c.topk.is_some()) {
        available.push("topk".into());
    }
    available.push("naive".into());
    let name = args.predictor.clone().unwrap_or_else(|| available[0].clone());
    let epsilon = args.epsilon.or(calibration.as_ref().map(|c| c.epsilon)).unwrap_or(0.1);
    check_epsilon(epsilon).map_err(|e| CliError::config("--epsilon", e))?;

    let candidates = match &args.filter {
        Some((cfg, kg)) => {
            if kg.dict != dict {
                return Err(CliError::config("dataset", "checkpoint was trained on a different dictionary"));
            }
            let index = build_filter_index(kg, &cfg.eval.filter_splits)?;
            index.candidate_mask(&query, model.num_entities, None)
        }
        None => vec![true; model.num_entities],
    };
    let scores = model.score_all(&query);

    let fixed_k = name.strip_prefix("top").and_then(|k| k.parse::<usize>().ok());
    let entities = if let Some(profile) = calibration.as_ref().and_then(|c| c.profiles.iter().find(|p| p.kind.name() == name)) {
        predict_set(model, &query, profile, epsilon, &candidates)?.entities
    } else if name == "naive" {
        naive_select(&scores, epsilon, None, &candidates)
    } else if let (Some(t), "platt") = (calibration.as_ref().and_then(|c| c.temperature), name.as_str()) {
        naive_select(&scores, epsilon, Some(t.temperature), &candidates)
    } else if let (Some(c), "topk") = (calibration.as_ref().filter(|c| c.topk.is_some()), name.as_str()) {
        if epsilon != c.epsilon {
            return Err(CliError::config(
                "--epsilon",
                format!("topk was fitted at epsilon={}, rerun calibrate to change it", c.epsilon),
            ));
        }
        topk_select(&scores, c.topk.expect("checked").k, &candidates)
    } else if let Some(k) = fixed_k.filter(|&k| k > 0) {
        topk_select(&scores, k, &candidates)
    } else {
        available.push("top<k>".into());
        return Err(unknown("predictor", &name, available.iter().map(String::as_str).collect()));
    };

    let mut names: Vec<&str> = entities
        .iter()
        .map(|&e| dict.entities.name(e).expect("entity id from this dictionary"))
        .collect();
    names.sort_unstable();
    let mut out = String::new();
    for n in &names {
        out += n;
        out.push('\n');
    }
    out += &format!("size={} epsilon={epsilon} predictor={name}\n", names.len());
    print!("{out}");
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: Option<&Path>) -> CliResult<()> {
    let kg = cfg.load_graph()?;
    let model = obtain_model(cfg, &kg, checkpoint)?;
    let filter = filter_for(cfg, &kg)?;
    let metrics = ranking_metrics(&model, &make_query_examples(&kg.test), filter.as_ref())?;
    let json = to_json(&metrics)?;
    write(&cfg.output_dir.join("metrics.json"), &json)?;
    print!("{}", String::from_utf8_lossy(&json));
    Ok(())
}

#[derive(Serialize)]
struct AdaptivenessEntry<'a> {
    predictor: String,
    spearman: Option<f64>,
    profile: &'a AdaptivenessProfile,
}

pub fn cmd_experiment(cfg: &RunConfig, which: u8, checkpoint: Option<&Path>) -> CliResult<()> {
    let kg = cfg.load_graph()?;
    let model = obtain_model(cfg, &kg, checkpoint)?;
    let filter = filter_for(cfg, &kg)?;
    let pool = calibration_examples(&kg)?;
    let test = make_query_examples(&kg.test);
    let e = &cfg.eval;
    if let Some(size) = e.calibration_size.filter(|&s| s > pool.len()) {
        return Err(CliError::config(
            "eval.calibration_size",
            format!("{size} exceeds the {} validation examples", pool.len()),
        ));
    }
    let trials = TrialConfig {
        epsilon: e.epsilon,
        trials: e.trials,
        seed: e.seed,
        calibration_size: e.calibration_size,
    };
    let out = &cfg.output_dir;
    match which {
        1 => {
            let report = evaluate_all(&cfg.predictors, &model, &pool, &test, &trials, filter.as_ref())?;
            write(&out.join("experiment1.csv"), &records_csv(&report.records)?)?;
            write(&out.join("experiment1.json"), &to_json(&report)?)?;
        }
        2 => {
            let size = e.calibration_size.unwrap_or((pool.len() * 4).div_ceil(5));
            let cal = calibration_subset(&pool, size, e.seed, 0)?;
            let mut profiles = Vec::new();
            for spec in &cfg.predictors {
                let p = FittedPredictor::fit(spec, &model, &cal, e.epsilon, filter.as_ref())?;
                let profile = adaptiveness(&p, &model, &test, e.bin_width, e.max_rank, filter.as_ref())?;
                write(&out.join(format!("adaptiveness_{spec}.csv")), &adaptiveness_csv(&profile)?)?;
                profiles.push((spec.to_string(), profile));
            }
            let entries: Vec<AdaptivenessEntry> = profiles
                .iter()
                .map(|(name, p)| AdaptivenessEntry {
                    predictor: name.clone(),
                    spearman: p.size_trend(),
                    profile: p,
                })
                .collect();
            write(&out.join("experiment2.json"), &to_json(&entries)?)?;
        }
        3 => {
            if let Some((i, &s)) = e.calibration_sizes.iter().enumerate().find(|(_, &s)| s == 0 || s > pool.len()) {
                return Err(CliError::config(
                    &format!("eval.calibration_sizes[{i}]"),
                    format!("{s} is outside 1..={}", pool.len()),
                ));
            }
            let mut rows: Vec<SweepRow> = Vec::new();
            for spec in cfg.predictors.iter().filter(|p| p.is_conformal()) {
                rows.extend(calibration_size_sweep(
                    spec,
                    &model,
                    &pool,
                    &e.calibration_sizes,
                    e.calibration_trials,
                    e.epsilon,
                    &test,
                    e.seed,
                    filter.as_ref(),
                )?);
            }
            if rows.is_empty() {
                return Err(CliError::config("predictors", "experiment 3 needs at least one conformal predictor"));
            }
            write(&out.join("experiment3.csv"), &sweep_csv(&rows)?)?;
            write(&out.join("experiment3.json"), &to_json(&rows)?)?;
        }
        4 => {
            if e.epsilon_grid.is_empty() {
                return Err(CliError::config("eval.epsilon_grid", "must not be empty"));
            }
            let rows = epsilon_sweep(&cfg.predictors, &model, &pool, &test, &e.epsilon_grid, &trials, filter.as_ref())?;
            write(&out.join("experiment4.csv"), &records_csv(&rows)?)?;
            write(&out.join("experiment4.json"), &to_json(&rows)?)?;
        }
        other => return Err(CliError::Other(format!("unknown experiment {other}; expected 1, 2, 3 or 4"))),
    }
    Ok(())
}
