use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ordstab::evaluation::{cross_validate, make_folds};
use ordstab::events::{ingest_events, read_labels, CodeHierarchy};
use ordstab::filterbank::{read_feature_manifest, write_feature_manifest};
use ordstab::lbfgs::Termination;
use ordstab::network::{build_network, DEFAULT_PREFIX_LEN};
use ordstab::pipeline::{extract, read_table, write_rows, Corpus, CorpusSource, ExtractConfig, Preprocessor};
use ordstab::stability::{resample_and_fit, ResamplePlan, Snapshots, StabilityReport};
use ordstab::synthetic::{generate, GeneratorSpec};
use ordstab::trainer::{Stage, ALPHA_GRID};
use ordstab::{
    fit, select_features, FeatureNetwork, ModelFile, OrdinalModel, RegularizerKind,
    RegularizerMatrix, Result, TrainingConfig, Variant,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::manifest::{io, OutDir, Run};
use crate::{argument, Cli, Command, ModelArgs};

pub fn run(cli: &Cli) -> Result<()> {
    let out = cli
        .out
        .as_deref()
        .ok_or_else(|| argument("--out is required"))?;
    match &cli.command {
        Command::Extract(a) => cmd_extract(a, cli.seed, out),
        Command::Network(a) => cmd_network(a, cli.seed, out),
        Command::Train(a) => cmd_train(a, cli.seed, out),
        Command::Stability(a) => cmd_stability(a, cli.seed.unwrap_or(0), out),
        Command::Cv(a) => cmd_cv(a, cli.seed.unwrap_or(0), out),
        Command::Predict(a) => cmd_predict(a, cli.seed, out),
        Command::Synth(a) => cmd_synth(a, cli.seed, out),
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn cmd_extract(a: &crate::ExtractArgs, seed: Option<u64>, out: &Path) -> Result<()> {
    let config = match &a.config {
        Some(p) => ExtractConfig::read_json(p)?,
        None => ExtractConfig::default(),
    };
    let mut run = Run::new(
        "extract",
        seed,
        json!({ "extract": config, "classes": a.classes }),
    );
    run.input(&a.events)?;
    run.input(&a.labels)?;
    if let Some(p) = &a.config {
        run.input(p)?;
    }
    let (log, report) = ingest_events(&a.events)?;
    let hierarchy = match &a.hierarchy {
        Some(p) => {
            run.input(p)?;
            Some(CodeHierarchy::read_csv(p)?)
        }
        None => None,
    };
    let points = read_labels(&a.labels, a.classes)?;
    let corpus = extract(log, points, hierarchy.as_ref(), &config, a.classes)?;
    let (data, pre) = corpus.full_dataset::<f64>(None)?;

    let mut dir = OutDir::create(out)?;
    dir.files.extend(corpus.save(&dir.dir)?);
    let ids: Vec<&str> = data.feature_ids.iter().map(String::as_str).collect();
    let rows: Vec<usize> = (0..data.n()).collect();
    let x = data.x();
    write_rows(dir.writer("dataset.csv")?, &corpus.points, &rows, &ids, |i, j| x[[i, j]])?;
    write_feature_manifest(corpus.features(), &dir.file("features.csv"))?;
    dir.json(
        "normalizer.json",
        &json!({
            "feature_ids": data.feature_ids,
            "max": pre.normalizer.max,
        }),
    )?;
    let mut w = csv::Writer::from_writer(dir.writer("ingest_errors.csv")?);
    w.write_record(["line", "message"])?;
    for e in &report.errors {
        w.write_record([e.line.to_string(), e.message.clone()])?;
    }
    w.flush().map_err(|e| io(out, e))?;
    drop(w);
    dir.finish(run)
}

fn cmd_network(a: &crate::NetworkArgs, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut run = Run::new(
        "network",
        seed,
        json!({ "regularizer": a.regularizer, "prefix_len": a.prefix_len }),
    );
    run.input(&a.features)?;
    let features = read_feature_manifest(&a.features)?;
    let net = build_network(&features, a.prefix_len);
    let s = RegularizerMatrix::<f64>::build(a.regularizer, &net);

    let mut dir = OutDir::create(out)?;
    net.write_edges(&features, &dir.file("edges.csv"))?;
    if let Some(s) = s {
        let mut w = csv::Writer::from_writer(dir.writer("regularizer.csv")?);
        w.write_record(["feature_id_a", "feature_id_b", "value"])?;
        for (i, j, v) in s.matrix().triplets() {
            w.write_record([features[i].id.as_str(), features[j].id.as_str(), &v.to_string()])?;
        }
        w.flush().map_err(|e| io(out, e))?;
    }
    dir.finish(run)
}

/// Training settings read by `train`, `stability` and `cv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    #[serde(flatten)]
    training: TrainingConfig,
    variant: Variant,
    regularizer: RegularizerKind,
    min_occurrences: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            training: TrainingConfig::default(),
            variant: Variant::Cumulative,
            regularizer: RegularizerKind::Laplacian,
            min_occurrences: None,
        }
    }
}

impl RunConfig {
    fn resolve(a: &ModelArgs) -> Result<Self> {
        let mut cfg = match &a.config {
            Some(p) => {
                let s = std::fs::read_to_string(p).map_err(|e| io(p, e))?;
                serde_json::from_str(&s)?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = a.variant {
            cfg.variant = v;
        }
        if let Some(v) = a.alpha {
            cfg.training.alpha = v;
        }
        if let Some(v) = a.beta {
            cfg.training.beta = v;
        }
        if let Some(v) = a.epsilon {
            cfg.training.epsilon = v;
        }
        if let Some(v) = a.regularizer {
            cfg.regularizer = v;
        }
        if a.min_occurrences.is_some() {
            cfg.min_occurrences = a.min_occurrences;
        }
        cfg.training.validate()?;
        if cfg.training.beta > 0.0 && cfg.regularizer == RegularizerKind::None {
            return Err(argument("beta > 0 needs a regularizer"));
        }
        Ok(cfg)
    }
}

fn corpus_inputs(run: &mut Run, a: &ModelArgs) -> Result<Corpus> {
    if let Some(p) = &a.config {
        run.input(p)?;
    }
    for f in ["corpus.json", "raw.csv", "code_counts.csv"] {
        run.input(&a.data.join(f))?;
    }
    Corpus::load(&a.data)
}

/// The penalty matrix over the kept features, or `None` when `beta` is 0.
fn regularizer(
    corpus: &Corpus,
    pre: &Preprocessor,
    cfg: &RunConfig,
    network: Option<&Path>,
) -> Result<Option<RegularizerMatrix<f64>>> {
    if cfg.training.beta == 0.0 {
        return Ok(None);
    }
    let net = match network {
        Some(p) => FeatureNetwork::read_edges(corpus.features(), p)?.restrict(&pre.keep),
        None => build_network(&corpus.kept_features(pre), DEFAULT_PREFIX_LEN),
    };
    Ok(RegularizerMatrix::build(cfg.regularizer, &net))
}

#[derive(Serialize)]
struct FitSummary<'a> {
    initial_objective: f64,
    objective: f64,
    iterations: usize,
    termination: Termination,
    degraded: bool,
    stages: &'a [Stage],
    selected: Vec<&'a str>,
}

fn cmd_train(a: &crate::TrainArgs, seed: Option<u64>, out: &Path) -> Result<()> {
    let cfg = RunConfig::resolve(&a.model)?;
    let grid: Option<Vec<f64>> = a
        .alpha_grid
        .as_ref()
        .map(|g| if g.is_empty() { ALPHA_GRID.to_vec() } else { g.clone() });
    let mut run = Run::new(
        "train",
        seed,
        json!({ "run": cfg, "alpha_grid": grid, "network": a.network.as_deref().map(path_str) }),
    );
    let corpus = corpus_inputs(&mut run, &a.model)?;
    if let Some(p) = &a.network {
        run.input(p)?;
    }
    let (data, pre) = corpus.full_dataset::<f64>(cfg.min_occurrences)?;
    let reg = regularizer(&corpus, &pre, &cfg, a.network.as_deref())?;
    let res = fit(&data, &cfg.training, cfg.variant, reg.as_ref(), None)?;
    let (model, selected) = select_features(&res.model, cfg.training.selection_threshold);
    let grid_rows = match &grid {
        Some(g) => g
            .par_iter()
            .map(|&alpha| {
                let c = TrainingConfig {
                    alpha,
                    ..cfg.training.clone()
                };
                let r = fit(&data, &c, cfg.variant, reg.as_ref(), None)?;
                let (_, sel) = select_features(&r.model, c.selection_threshold);
                Ok((alpha, sel.len(), r))
            })
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };

    let mut dir = OutDir::create(out)?;
    let file = ModelFile::from_model(&model, &data.feature_ids, run.config_hash())?;
    dir.json("model.json", &file)?;
    res.write_trace(dir.writer("trace.csv")?)?;
    dir.json(
        "fit.json",
        &FitSummary {
            initial_objective: res.initial_objective,
            objective: res.objective,
            iterations: res.iterations,
            termination: res.termination,
            degraded: res.degraded(),
            stages: &res.stages,
            selected: selected.iter().map(|&j| data.feature_ids[j].as_str()).collect(),
        },
    )?;
    if grid.is_some() {
        let mut w = csv::Writer::from_writer(dir.writer("grid.csv")?);
        w.write_record(["alpha", "n_selected", "objective", "iterations", "termination"])?;
        for (alpha, n, r) in &grid_rows {
            w.write_record([
                alpha.to_string(),
                n.to_string(),
                r.objective.to_string(),
                r.iterations.to_string(),
                serde_json::to_value(r.termination)?
                    .as_str()
                    .unwrap_or_default()
                    .to_string(),
            ])?;
        }
        w.flush().map_err(|e| io(out, e))?;
    }
    dir.finish(run)
}

fn cmd_stability(a: &crate::StabilityArgs, seed: u64, out: &Path) -> Result<()> {
    let cfg = RunConfig::resolve(&a.model)?;
    let mut run = Run::new(
        "stability",
        Some(seed),
        json!({
            "run": cfg,
            "b": a.b,
            "mode": a.mode,
            "criterion": a.criterion,
            "folds": a.folds,
            "network": a.network.as_deref().map(path_str),
        }),
    );
    let corpus = corpus_inputs(&mut run, &a.model)?;
    if let Some(p) = &a.network {
        run.input(p)?;
    }
    let (data, pre) = corpus.full_dataset::<f64>(cfg.min_occurrences)?;
    let reg = regularizer(&corpus, &pre, &cfg, a.network.as_deref())?;
    let snapshots = match a.folds {
        None => resample_and_fit(
            &data,
            &ResamplePlan::new(a.mode, a.b, seed),
            &cfg.training,
            cfg.variant,
            reg.as_ref(),
        )?,
        Some(k) => {
            let plan = make_folds(data.patient_ids.iter().map(String::as_str), k, seed)?;
            let parts = (0..k)
                .map(|f| {
                    let (train, _) = plan.split(&data.patient_ids, f)?;
                    let fold_seed = seed.wrapping_add((f as u64 + 1) << 32);
                    resample_and_fit(
                        &data.subset(&train),
                        &ResamplePlan::new(a.mode, a.b, fold_seed),
                        &cfg.training,
                        cfg.variant,
                        reg.as_ref(),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Snapshots::pool(parts)?
        }
    };
    let reports = StabilityReport::build(&snapshots, &data, a.criterion)?;

    let mut dir = OutDir::create(out)?;
    for r in &reports {
        let suffix = if reports.len() == 1 {
            String::new()
        } else {
            format!("_stage{}", r.block + 1)
        };
        r.write_csv(dir.writer(&format!("stability{suffix}.csv"))?)?;
        r.write_curves(dir.writer(&format!("curves{suffix}.csv"))?)?;
    }
    dir.json(
        "summary.json",
        &json!({
            "fits": snapshots.len(),
            "degraded_fits": snapshots.degraded,
            "dim": data.dim(),
        }),
    )?;
    dir.finish(run)
}

fn cmd_cv(a: &crate::CvArgs, seed: u64, out: &Path) -> Result<()> {
    let cfg = RunConfig::resolve(&a.model)?;
    let mut run = Run::new("cv", Some(seed), json!({ "run": cfg, "folds": a.folds }));
    let corpus = corpus_inputs(&mut run, &a.model)?;
    let source = CorpusSource::new(&corpus, cfg.min_occurrences, cfg.regularizer);
    let ids = corpus.patient_ids();
    let plan = make_folds(ids.iter().map(String::as_str), a.folds, seed)?;
    let res = cross_validate::<f64, _>(&source, &plan, &cfg.training, cfg.variant)?;

    let mut by_row: Vec<Option<(usize, usize)>> = vec![None; corpus.n()];
    for f in &res.folds {
        for (&i, &p) in f.test_rows.iter().zip(&f.predictions) {
            by_row[i] = Some((f.fold + 1, p));
        }
    }
    let mut dir = OutDir::create(out)?;
    res.write_csv(dir.writer("metrics.csv")?)?;
    let mut w = csv::Writer::from_writer(dir.writer("predictions.csv")?);
    w.write_record(["patient_id", "anchor_time", "fold", "label", "predicted"])?;
    for (p, r) in corpus.points.iter().zip(&by_row) {
        let (fold, pred) = r.ok_or_else(|| argument("row missing from every test fold"))?;
        w.write_record([
            p.patient_id.clone(),
            p.anchor_time.to_string(),
            fold.to_string(),
            p.label.to_string(),
            pred.to_string(),
        ])?;
    }
    w.flush().map_err(|e| io(out, e))?;
    drop(w);
    dir.finish(run)
}

/// Columns of `table` in the order of the model's features; features the
/// table lacks read as zero and are only allowed when their weight is zero.
fn align(model: &OrdinalModel<f64>, file: &ModelFile, table_ids: &[String]) -> Result<Vec<Option<usize>>> {
    let index: BTreeMap<&str, usize> = table_ids
        .iter()
        .enumerate()
        .map(|(j, id)| (id.as_str(), j))
        .collect();
    let blocks = model.layout().n_blocks();
    file.feature_ids
        .iter()
        .enumerate()
        .map(|(j, id)| match index.get(id.as_str()) {
            Some(&c) => Ok(Some(c)),
            None if (0..blocks).all(|b| model.weights(b)[j] == 0.0) => Ok(None),
            None => Err(argument(format!("dataset lacks model feature {id}"))),
        })
        .collect()
}

fn cmd_predict(a: &crate::PredictArgs, seed: Option<u64>, out: &Path) -> Result<()> {
    let data: PathBuf = if a.data.is_dir() {
        a.data.join("dataset.csv")
    } else {
        a.data.clone()
    };
    let mut run = Run::new(
        "predict",
        seed,
        json!({ "model": path_str(&a.model), "data": path_str(&data) }),
    );
    run.input(&a.model)?;
    run.input(&data)?;
    let file = ModelFile::read_json(&a.model)?;
    let model: OrdinalModel<f64> = file.to_model()?;
    let table = read_table(&data, None)?;
    let cols = align(&model, &file, &table.feature_ids)?;
    let mut x = vec![0.0; model.dim()];
    let rows = table
        .points
        .iter()
        .enumerate()
        .map(|(i, _)| {
            for (v, c) in x.iter_mut().zip(&cols) {
                *v = c.map_or(0.0, |c| table.values[[i, c]]);
            }
            let p = model.probs(&x)?;
            Ok((ordstab::model::argmax_class(&p), p))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut dir = OutDir::create(out)?;
    let mut w = csv::Writer::from_writer(dir.writer("predictions.csv")?);
    let mut header = vec!["patient_id".to_string(), "anchor_time".to_string()];
    header.extend((1..=model.n_classes()).map(|l| format!("p{l}")));
    header.push("predicted".into());
    w.write_record(&header)?;
    for (pt, (pred, p)) in table.points.iter().zip(&rows) {
        let mut rec = vec![pt.patient_id.clone(), pt.anchor_time.to_string()];
        rec.extend(p.iter().map(|v| v.to_string()));
        rec.push(pred.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| io(out, e))?;
    drop(w);
    dir.finish(run)
}

fn cmd_synth(a: &crate::SynthArgs, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => GeneratorSpec::read_json(p)?,
        None => GeneratorSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let mut run = Run::new("synth", Some(spec.seed), json!({ "spec": spec }));
    if let Some(p) = &a.spec {
        run.input(p)?;
    }
    let cohort = generate(&spec)?;
    let mut dir = OutDir::create(out)?;
    dir.files.extend(cohort.write(&dir.dir)?);
    dir.finish(run)
}
