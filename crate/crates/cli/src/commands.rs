use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use halt_core::baselines::{self, StatDetector, Statistic};
use halt_core::features::{self, featurize_all, D_STATS};
use halt_core::metrics::{self, EvalReport, ScoredResponse};
use halt_core::model::{self, Attribution, Batch};
use halt_core::synth::{self, EmulatorSpec, SuiteConfig};
use halt_core::trace::{self, validate_manifest, ClusterStats, Diagnostic, SPLITS};
use halt_core::training;
use halt_core::{seeds, ColumnMask, DatasetManifest, FeatureSequence, HaltError, HaltModel, ResponseTrace};
use serde::Serialize;

use crate::config::{self, Overrides, RunConfig};
use crate::error::{CliError, CliResult};

/// Sequences per inference or attribution batch.
const CHUNK: usize = 64;

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(trace::write_atomic(path, text.as_bytes())?)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    Ok(trace::write_atomic(path, text.as_bytes())?)
}

/// Writes command output to stdout; a closed pipe ends output quietly.
fn emit(text: &str) -> CliResult<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
            Err(CliError::Usage(format!("cannot write to standard output: {e}")))
        }
        _ => Ok(()),
    }
}

fn echo(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    write_text(&dir.join("resolved_config.json"), &cfg.to_json())
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("--{flag} is required (flag or config file)")))
}

/// Loads and validates a manifest. Absent `needed` splits are usage errors;
/// other absent splits are tolerated.
fn open_manifest(path: &Path, needed: &[&str]) -> CliResult<DatasetManifest> {
    let manifest = DatasetManifest::load(path)?;
    for s in needed {
        if !manifest.has_split(s) {
            return Err(CliError::Usage(format!("manifest {} has no `{s}` split", path.display())));
        }
    }
    let diags: Vec<Diagnostic> = validate_manifest(&manifest)
        .into_iter()
        .filter(|d| !matches!(d, Diagnostic::MissingSplit(_)))
        .collect();
    if !diags.is_empty() {
        for d in &diags {
            eprintln!("halt: {}: {d}", path.display());
        }
        return Err(CliError::Data(format!("{} manifest problem(s) in {}", diags.len(), path.display())));
    }
    Ok(manifest)
}

fn load_split(manifest: &DatasetManifest, split: &str) -> CliResult<Vec<ResponseTrace>> {
    let traces = manifest.load_split(split)?;
    if traces.is_empty() {
        return Err(HaltError::Precondition(format!("split `{split}` holds no traces")).into());
    }
    Ok(traces)
}

fn clusters_of(traces: &[ResponseTrace]) -> BTreeSet<String> {
    traces.iter().map(|t| t.cluster.clone()).collect()
}

pub fn featurize(manifest_path: &Path, out: &Path) -> CliResult<()> {
    let cfg = config::resolve(
        "featurize",
        None,
        Overrides {
            manifest: Some(manifest_path.to_path_buf()),
            out: Some(out.to_path_buf()),
            ..Overrides::default()
        },
    )?;
    let manifest = open_manifest(manifest_path, &[])?;
    let mut written = 0;
    for split in manifest.splits.keys() {
        let mut seen = BTreeSet::new();
        for path in manifest.split_paths(split) {
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .ok_or_else(|| CliError::Usage(format!("{}: no file name", path.display())))?;
            if !seen.insert(stem.clone()) {
                return Err(CliError::Usage(format!(
                    "split `{split}` lists two files named `{stem}`; cache names would collide"
                )));
            }
            let seqs = featurize_all(&trace::load_traces(&path)?);
            let target = out.join(split).join(format!("{stem}.features.jsonl"));
            features::write_feature_cache(&target, &seqs, &ColumnMask::default())?;
            written += 1;
        }
    }
    echo(&cfg, out)?;
    eprintln!("halt: wrote {written} feature cache(s) to {}", out.display());
    Ok(())
}

pub fn train(file: Option<&Path>, flags: Overrides) -> CliResult<()> {
    let cfg = config::resolve("train", file, flags)?;
    let manifest_path = required(&cfg.manifest, "manifest")?;
    let out = required(&cfg.out, "out")?.to_path_buf();
    let manifest = open_manifest(manifest_path, &["train", "validation"])?;
    let train_traces = load_split(&manifest, "train")?;
    let val_traces = load_split(&manifest, "validation")?;
    echo(&cfg, &out)?;

    let model = HaltModel::new(cfg.model.clone(), seeds::derive(cfg.seed, "init"))?;
    eprintln!(
        "halt: training {} parameters on {} traces ({} validation)",
        model.param_count(),
        train_traces.len(),
        val_traces.len()
    );
    let outcome = training::train(model, &featurize_all(&train_traces), &featurize_all(&val_traces), &cfg.train)?;
    let mut best = outcome.best_model;
    let clusters: Vec<String> = clusters_of(&train_traces).into_iter().collect();
    best.metadata.insert("train_clusters".into(), clusters.join(","));
    best.metadata.insert("seed".into(), cfg.seed.to_string());

    model::save_model(&best, out.join("model.halt"))?;
    write_text(&out.join("train_log.jsonl"), &training::format_log(&outcome.log))?;
    if let Some(fault) = outcome.fault {
        eprintln!("halt: {fault}; kept the last good checkpoint");
        return Err(HaltError::Numeric { stage: "training".into() }.into());
    }
    eprintln!(
        "halt: best validation macro-F1 {:.4} at epoch {} of {}",
        outcome.best_metric,
        outcome.best_epoch,
        outcome.log.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct MethodReport {
    method: String,
    report: EvalReport,
}

fn scored(traces: &[ResponseTrace], scores: &[f64], predictions: &[u8]) -> Vec<ScoredResponse> {
    traces
        .iter()
        .zip(scores.iter().zip(predictions))
        .map(|(t, (&score, &prediction))| ScoredResponse {
            cluster: t.cluster.clone(),
            label: t.label,
            score,
            prediction,
        })
        .collect()
}

fn load_detector(path: &Path) -> CliResult<StatDetector> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read detector {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("detector {}: {e}", path.display())))
}

fn warn_unknown_clusters(model: &HaltModel, traces: &[ResponseTrace]) {
    let Some(known) = model.metadata.get("train_clusters") else {
        return;
    };
    let known: BTreeSet<&str> = known.split(',').filter(|s| !s.is_empty()).collect();
    for c in clusters_of(traces) {
        if !known.contains(c.as_str()) {
            eprintln!("halt: warning: cluster `{c}` was not seen in training");
        }
    }
}

pub fn eval(file: Option<&Path>, flags: Overrides, detectors: &[PathBuf], split: &str, trivial: bool) -> CliResult<()> {
    let cfg = config::resolve("eval", file, flags)?;
    let manifest_path = required(&cfg.manifest, "manifest")?;
    let out = required(&cfg.out, "out")?.to_path_buf();
    if cfg.model_path.is_none() && detectors.is_empty() && !trivial {
        return Err(CliError::Usage("nothing to evaluate: pass --model, --detector or --trivial".into()));
    }
    let manifest = open_manifest(manifest_path, &[split])?;
    let traces = load_split(&manifest, split)?;
    echo(&cfg, &out)?;

    let mut methods: Vec<(String, EvalReport)> = Vec::new();
    if let Some(path) = &cfg.model_path {
        let model = model::load_model(path)?;
        warn_unknown_clusters(&model, &traces);
        let preds = model::predict(&model, &featurize_all(&traces), cfg.threshold)?;
        let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
        let labels: Vec<u8> = preds.iter().map(|p| p.label).collect();
        methods.push(("HALT".into(), metrics::aggregate(&scored(&traces, &scores, &labels))?));
    }
    for path in detectors {
        let det = load_detector(path)?;
        let scores = baselines::score_all(det.statistic, &traces);
        let preds: Vec<u8> = scores.iter().map(|&s| det.predict_score(s)).collect();
        let mut name = det.statistic.to_string();
        if methods.iter().any(|(n, _)| *n == name) {
            name = format!("{name}#{}", methods.len());
        }
        methods.push((name, metrics::aggregate(&scored(&traces, &scores, &preds))?));
    }
    if trivial {
        let prevalence = if manifest.has_split("train") && split != "train" {
            let tr = load_split(&manifest, "train")?;
            tr.iter().map(|t| t.label as f64).sum::<f64>() / tr.len() as f64
        } else {
            traces.iter().map(|t| t.label as f64).sum::<f64>() / traces.len() as f64
        };
        for b in baselines::trivial_baselines(traces.len(), prevalence, seeds::derive(cfg.seed, "baseline"))? {
            let report = metrics::aggregate(&scored(&traces, &b.scores(), &b.predictions))?;
            methods.push((b.name.to_string(), report));
        }
    }

    let table = metrics::render_table(&methods);
    let reports: Vec<MethodReport> = methods
        .into_iter()
        .map(|(method, report)| MethodReport { method, report })
        .collect();
    write_json(&out.join("eval.json"), &reports)?;
    write_text(&out.join("eval_table.txt"), &table)?;
    emit(&table)?;
    Ok(())
}

pub fn tune(file: Option<&Path>, flags: Overrides, statistic: &str) -> CliResult<()> {
    let cfg = config::resolve("tune", file, flags)?;
    let manifest_path = required(&cfg.manifest, "manifest")?;
    let out = required(&cfg.out, "out")?.to_path_buf();
    let stats: Vec<Statistic> = if statistic == "all" {
        Statistic::ALL.to_vec()
    } else {
        statistic
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<Result<_, HaltError>>()?
    };
    let manifest = open_manifest(manifest_path, &["validation"])?;
    let val = load_split(&manifest, "validation")?;
    let labels: Vec<u8> = val.iter().map(|t| t.label).collect();
    echo(&cfg, &out)?;
    let mut summary = String::new();
    for st in stats {
        let tuned = baselines::tune_threshold(st, &labels, &baselines::score_all(st, &val))?;
        write_json(&out.join(format!("{st}.detector.json")), &tuned)?;
        summary.push_str(&format!(
            "{st}: threshold {} ({:?}), validation macro-F1 {:.4}\n",
            tuned.detector.threshold, tuned.detector.direction, tuned.val_macro_f1
        ));
    }
    emit(&summary)
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    id: &'a str,
    score: f64,
    label: u8,
}

pub fn predict(model_path: &Path, traces_path: &Path, threshold: f64, out: Option<&Path>) -> CliResult<()> {
    let cfg = config::resolve(
        "predict",
        None,
        Overrides {
            model_path: Some(model_path.to_path_buf()),
            threshold: Some(threshold),
            out: out.map(Path::to_path_buf),
            ..Overrides::default()
        },
    )?;
    let model = model::load_model(model_path)?;
    let traces = trace::load_traces(traces_path)?;
    let preds = model::predict(&model, &featurize_all(&traces), cfg.threshold)?;
    let mut text = String::new();
    for (t, p) in traces.iter().zip(&preds) {
        let line = PredictionLine {
            id: &t.id,
            score: p.score,
            label: p.label,
        };
        text.push_str(&serde_json::to_string(&line)?);
        text.push('\n');
    }
    match out {
        Some(path) => {
            write_text(path, &text)?;
            let mut echo_path = path.as_os_str().to_owned();
            echo_path.push(".config.json");
            write_text(Path::new(&echo_path), &cfg.to_json())?;
        }
        None => emit(&text)?,
    }
    Ok(())
}

#[derive(Serialize)]
struct SynthSettings<'a> {
    command: &'a str,
    seed: u64,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    families: &'a [String],
    spec: &'a EmulatorSpec,
}

fn load_spec(path: Option<&Path>, fallback: fn() -> EmulatorSpec) -> CliResult<EmulatorSpec> {
    match path {
        Some(p) => Ok(EmulatorSpec::load(p)?),
        None => Ok(fallback()),
    }
}

pub fn synth(spec_path: Option<&Path>, out: &Path, seed: u64, sizes: [usize; 3], families: Option<&str>) -> CliResult<()> {
    let spec = load_spec(spec_path, synth::fixture_a)?;
    spec.validate()?;
    let families: Vec<String> = match families {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None => spec.task_families.iter().map(|f| f.name.clone()).collect(),
    };
    for f in &families {
        spec.family(f).map_err(|e| CliError::Usage(e.to_string()))?;
    }

    let mut splits: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    let mut inventory: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (split, n) in SPLITS.iter().zip(sizes) {
        let files = splits.entry(split.to_string()).or_default();
        if n == 0 {
            continue;
        }
        for fam in &families {
            let split_seed = seeds::derive(seed, split);
            let detailed = synth::generate_detailed(&spec, fam, n, split_seed)?;
            let car = synth::sidecar(&spec, fam, split_seed, &detailed);
            let traces: Vec<ResponseTrace> = detailed.into_iter().map(|d| d.trace).collect();
            let e = inventory.entry(fam.clone()).or_default();
            e.0 += traces.len();
            e.1 += traces.iter().map(|t| t.label as usize).sum::<usize>();
            let name = format!("{fam}_{split}.jsonl");
            trace::write_traces(out.join(&name), &traces)?;
            write_json(&out.join(format!("{fam}_{split}.sidecar.json")), &car)?;
            files.push(PathBuf::from(name));
        }
    }
    let manifest = DatasetManifest {
        splits,
        clusters: inventory
            .into_iter()
            .map(|(c, (n, pos))| {
                (
                    c,
                    ClusterStats {
                        count: n,
                        hallucination_ratio: pos as f64 / n as f64,
                    },
                )
            })
            .collect(),
        base_dir: PathBuf::new(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    write_json(
        &out.join("resolved_config.json"),
        &SynthSettings {
            command: "synth",
            seed,
            n_train: sizes[0],
            n_val: sizes[1],
            n_test: sizes[2],
            families: &families,
            spec: &spec,
        },
    )?;
    eprintln!("halt: wrote {} families of `{}` to {}", families.len(), spec.id, out.display());
    Ok(())
}

#[derive(Serialize)]
struct SuiteSettings<'a> {
    command: &'a str,
    suite: &'a SuiteConfig,
    spec_a: &'a EmulatorSpec,
    spec_b: &'a EmulatorSpec,
}

pub fn hypothesis(
    spec_a: Option<&Path>,
    spec_b: Option<&Path>,
    file: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> CliResult<()> {
    let a = load_spec(spec_a, synth::fixture_a)?;
    let b = load_spec(spec_b, synth::fixture_b)?;
    let mut suite: SuiteConfig = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
        }
        None => SuiteConfig::default(),
    };
    if let Some(s) = seed {
        suite.seed = s;
    }
    write_json(
        &out.join("resolved_config.json"),
        &SuiteSettings {
            command: "hypothesis",
            suite: &suite,
            spec_a: &a,
            spec_b: &b,
        },
    )?;
    let report = synth::hypothesis_suite(&a, &b, &suite)?;
    write_json(&out.join("hypothesis.json"), &report)?;
    let r = &report;
    let (a, b) = (&r.emulator_a, &r.emulator_b);
    emit(&format!(
        "trained on {} + {}, held out {}\n{a} on {a}: {:.4}\n{a} on {b}: {:.4}\n{b} on {b}: {:.4}\n{b} on {a}: {:.4}\ngaps: {:.4} / {:.4}\n",
        r.train_families[0], r.train_families[1], r.held_out_family, r.a_on_a, r.a_on_b, r.b_on_b, r.b_on_a, r.gap_a, r.gap_b
    ))
}

pub fn attribute(file: Option<&Path>, flags: Overrides, split: &str) -> CliResult<()> {
    let cfg = config::resolve("attribute", file, flags)?;
    let manifest_path = required(&cfg.manifest, "manifest")?;
    let model_path = required(&cfg.model_path, "model")?;
    let out = required(&cfg.out, "out")?.to_path_buf();
    let manifest = open_manifest(manifest_path, &[split])?;
    let seqs = featurize_all(&load_split(&manifest, split)?);
    let model = model::load_model(model_path)?;
    for s in &seqs {
        model::check_compatible(&model, s)?;
    }
    echo(&cfg, &out)?;
    let mut total = Attribution::empty();
    for chunk in seqs.chunks(CHUNK) {
        let refs: Vec<&FeatureSequence> = chunk.iter().collect();
        total.merge(&model::attribute(&model, &Batch::from_sequences(&refs))?);
    }
    let report = total.to_report();
    write_json(&out.join("attribution.json"), &report)?;
    let mut ranked: Vec<(&String, &f64)> = report.per_feature.iter().collect();
    ranked.sort_by(|x, y| y.1.total_cmp(x.1).then(x.0.cmp(y.0)));
    let lines: String = ranked.into_iter().map(|(name, v)| format!("{name:<20} {v:.6}\n")).collect();
    emit(&lines)
}

fn parse_column_sets(spec: Option<&str>) -> CliResult<Vec<Vec<usize>>> {
    let Some(spec) = spec else {
        return Ok((0..D_STATS).map(|c| vec![c]).collect());
    };
    let mut sets = Vec::new();
    for group in spec.split(';').map(str::trim).filter(|g| !g.is_empty()) {
        let mut cols = Vec::new();
        for name in group.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            cols.push(
                features::column_index(name)
                    .ok_or_else(|| CliError::Usage(format!("unknown feature column `{name}`")))?,
            );
        }
        sets.push(cols);
    }
    if sets.is_empty() {
        return Err(CliError::Usage("--columns lists no columns".into()));
    }
    Ok(sets)
}

pub fn ablate(file: Option<&Path>, flags: Overrides, columns: Option<&str>) -> CliResult<()> {
    let cfg = config::resolve("ablate", file, flags)?;
    let manifest_path = required(&cfg.manifest, "manifest")?;
    let out = required(&cfg.out, "out")?.to_path_buf();
    let sets = parse_column_sets(columns)?;
    let manifest = open_manifest(manifest_path, &["train", "validation", "test"])?;
    let [tr, va, te] = ["train", "validation", "test"].map(|s| load_split(&manifest, s).map(|t| featurize_all(&t)));
    let (tr, va, te) = (tr?, va?, te?);
    echo(&cfg, &out)?;
    let report = training::ablate(&cfg.model, &cfg.train, seeds::derive(cfg.seed, "init"), [&tr, &va, &te], &sets)?;
    let table = report.render();
    write_json(&out.join("ablation.json"), &report)?;
    write_text(&out.join("ablation.txt"), &table)?;
    emit(&table)?;
    Ok(())
}

pub fn topk(file: Option<&Path>, flags: Overrides, split: Option<&str>) -> CliResult<()> {
    let cfg = config::resolve("topk", file, flags)?;
    let manifest_path = required(&cfg.manifest, "manifest")?;
    let needed: Vec<&str> = split.into_iter().collect();
    let manifest = open_manifest(manifest_path, &needed)?;
    let mut traces = Vec::new();
    for s in SPLITS.iter().filter(|s| split.is_none_or(|want| want == **s)) {
        if manifest.has_split(s) {
            traces.extend(manifest.load_split(s)?);
        }
    }
    if traces.is_empty() {
        return Err(HaltError::Precondition("no traces to analyse".into()).into());
    }
    let masses = synth::mean_topk_mass(&traces, &cfg.k)?;
    let text = format!("{}\n", serde_json::to_string_pretty(&masses)?);
    match &cfg.out {
        Some(dir) => {
            echo(&cfg, dir)?;
            write_text(&dir.join("topk.json"), &text)?;
        }
        None => emit(&text)?,
    }
    Ok(())
}
