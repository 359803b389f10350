//! Experiment grid: leave-one-domain-out, ablations, alignment strategies and
//! limited-source runs, plus result aggregation and rendering.

use crate::eval::{roc_curve, MetricsError, MetricsReport, ThresholdPolicy};
use crate::losses::TripletMining;
use crate::models::Networks;
use crate::synth::{load_corpus, Corpus, SynthError};
use crate::trainer::{run_training, score_canvases, SaStrategy, TrainConfig, TrainError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Record { path: String, msg: String },
    #[error("no run reports found under {0}")]
    EmptyResults(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Lodo,
    Ablation,
    Stages,
    Limited,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lodo" => Ok(Mode::Lodo),
            "ablation" => Ok(Mode::Ablation),
            "stages" => Ok(Mode::Stages),
            "limited" => Ok(Mode::Limited),
            other => Err(format!("unknown mode '{other}' (lodo|ablation|stages|limited)")),
        }
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(format!("expected a boolean, found '{v}'")),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse '{v}'"))
}

/// Sets one training option by name.
pub fn apply_setting(cfg: &mut TrainConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    match key {
        "lr" => cfg.lr = parse_num(value)?,
        "steps" => cfg.steps = parse_num(value)?,
        "lambda1" => cfg.weights.lambda1 = parse_num(value)?,
        "lambda2" => cfg.weights.lambda2 = parse_num(value)?,
        "lambda3" => cfg.weights.lambda3 = parse_num(value)?,
        "margin" => cfg.weights.margin = parse_num(value)?,
        "sa_strategy" => cfg.sa_strategy = value.parse()?,
        "no_ad" => cfg.no_ad = parse_bool(value)?,
        "no_trip" => cfg.no_trip = parse_bool(value)?,
        "no_sa" => cfg.no_sa = parse_bool(value)?,
        "grl" => cfg.grl = value.parse()?,
        "seed" => cfg.seed = parse_num(value)?,
        "batch" => cfg.sampler.per_domain = parse_num(value)?,
        "count_images" => cfg.sampler.count_images = parse_bool(value)?,
        "crop" => {
            cfg.sampler.crop = parse_num(value)?;
            cfg.backbone.input_size = cfg.sampler.crop;
        }
        "scale_factor" => cfg.sampler.scale_factor = parse_num(value)?,
        "mining" => cfg.mining = value.parse::<TripletMining>()?,
        "channels" => {
            cfg.backbone.channels = value
                .split(',')
                .map(|c| parse_num(c.trim()))
                .collect::<std::result::Result<_, _>>()?
        }
        "embed_dim" => cfg.backbone.embed_dim = parse_num(value)?,
        "disc_hidden" => cfg.disc_hidden = parse_num(value)?,
        "val_fraction" => cfg.val_fraction = parse_num(value)?,
        "val_every" => cfg.val_every = parse_num(value)?,
        _ => return Err(format!("unknown setting '{key}'")),
    }
    Ok(())
}

/// Parses `key=value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ExperimentError::Parse {
            line: i + 1,
            msg: format!("expected key=value, found '{line}'"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_seeds(s: &str) -> std::result::Result<Vec<u64>, String> {
    let seeds: Vec<u64> = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| parse_num(t.trim()))
        .collect::<std::result::Result<_, _>>()?;
    if seeds.is_empty() {
        return Err("seed list is empty".into());
    }
    Ok(seeds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub mode: Mode,
    /// Restricts the grid to one target domain.
    pub target: Option<String>,
    pub seeds: Vec<u64>,
    pub base: TrainConfig,
    pub threshold_policy: ThresholdPolicy,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            mode: Mode::Lodo,
            target: None,
            seeds: vec![1, 2, 3],
            base: TrainConfig::default(),
            threshold_policy: ThresholdPolicy::SourceValidation,
        }
    }
}

impl ExperimentPlan {
    /// Applies one plan or training key.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "mode" => self.mode = value.parse()?,
            "target" => self.target = Some(value.to_string()),
            "seeds" => self.seeds = parse_seeds(value)?,
            "threshold" => self.threshold_policy = value.parse()?,
            _ => apply_setting(&mut self.base, key, value)?,
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut plan = ExperimentPlan::default();
        for (k, v) in parse_key_values(&text)? {
            plan.set(&k, &v).map_err(ExperimentError::Plan)?;
        }
        Ok(plan)
    }

    /// Every `(method, sources, target, seed)` run of the plan, in order.
    pub fn expand(&self, domains: &[String]) -> Result<Vec<RunSpec>> {
        if self.seeds.is_empty() {
            return Err(ExperimentError::Plan("seed list is empty".into()));
        }
        let targets: Vec<&String> = match &self.target {
            Some(t) => {
                if !domains.contains(t) {
                    return Err(ExperimentError::Plan(format!(
                        "target '{t}' is not a corpus domain ({})",
                        domains.join(",")
                    )));
                }
                vec![t]
            }
            None => domains.iter().collect(),
        };
        let need = if self.mode == Mode::Limited { 3 } else { 2 };
        if domains.len() < need {
            return Err(ExperimentError::Plan(format!(
                "mode needs at least {need} domains, corpus has {}",
                domains.len()
            )));
        }
        let mut runs = Vec::new();
        for target in targets {
            let rest: Vec<String> = domains.iter().filter(|d| *d != target).cloned().collect();
            let mut rows: Vec<(String, Vec<String>, TrainConfig)> = Vec::new();
            let base = &self.base;
            let variant = |f: &dyn Fn(&mut TrainConfig)| {
                let mut c = base.clone();
                f(&mut c);
                c
            };
            match self.mode {
                Mode::Lodo => {
                    rows.push(("baseline".into(), rest.clone(), variant(&|c| c.weights = crate::losses::LossWeights {
                        margin: c.weights.margin,
                        ..crate::losses::LossWeights::zero()
                    })));
                    rows.push(("SADG".into(), rest.clone(), base.clone()));
                }
                Mode::Ablation => {
                    rows.push(("SADG".into(), rest.clone(), base.clone()));
                    rows.push(("SADG wo/ad".into(), rest.clone(), variant(&|c| c.no_ad = true)));
                    rows.push(("SADG wo/trip".into(), rest.clone(), variant(&|c| c.no_trip = true)));
                    rows.push(("SADG wo/sa".into(), rest.clone(), variant(&|c| c.no_sa = true)));
                }
                Mode::Stages => {
                    rows.push(("feature-SADG".into(), rest.clone(), variant(&|c| c.sa_strategy = SaStrategy::Feature)));
                    rows.push(("task-SADG".into(), rest.clone(), variant(&|c| c.sa_strategy = SaStrategy::AvgScore)));
                    rows.push(("SADG".into(), rest.clone(), variant(&|c| c.sa_strategy = SaStrategy::Pairwise)));
                }
                Mode::Limited => {
                    for i in 0..rest.len() {
                        for j in i + 1..rest.len() {
                            let pair = vec![rest[i].clone(), rest[j].clone()];
                            rows.push((format!("SADG {}&{}", rest[i], rest[j]), pair, base.clone()));
                        }
                    }
                }
            }
            for (method, sources, cfg) in rows {
                for &seed in &self.seeds {
                    let mut config = cfg.clone();
                    config.seed = seed;
                    config.validate()?;
                    runs.push(RunSpec {
                        method: method.clone(),
                        sources: sources.clone(),
                        target: target.clone(),
                        seed,
                        config,
                        threshold_policy: self.threshold_policy,
                    });
                }
            }
        }
        Ok(runs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub method: String,
    pub sources: Vec<String>,
    pub target: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub threshold_policy: ThresholdPolicy,
}

impl RunSpec {
    pub fn run_id(&self) -> String {
        format!("{}/{}/seed{}", slug(&self.method), self.target, self.seed)
    }
}

/// Lower-case, with every run of non-alphanumerics collapsed to `_`.
pub fn slug(s: &str) -> String {
    let mut out = String::new();
    for ch in s.chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch.to_ascii_lowercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}

/// Persisted outcome of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub seed: u64,
    pub sources: Vec<String>,
    #[serde(flatten)]
    pub report: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: RunRecord,
    pub target_scores: Vec<f64>,
    pub target_labels: Vec<usize>,
    pub trace_csv: String,
    /// Networks selected on source validation.
    pub networks: Networks,
}

/// Trains on the run's sources and evaluates on every target canvas.
pub fn execute_run(corpus: &Corpus, spec: &RunSpec) -> Result<RunOutput> {
    let mut sources = Vec::new();
    for id in &spec.sources {
        sources.push(
            corpus
                .domain(id)
                .ok_or_else(|| ExperimentError::Plan(format!("unknown source domain '{id}'")))?,
        );
    }
    let target = corpus
        .domain(&spec.target)
        .ok_or_else(|| ExperimentError::Plan(format!("unknown target domain '{}'", spec.target)))?;
    let outcome = run_training(&sources, &spec.config)?;
    let canvases: Vec<_> = target.images.iter().collect();
    let scores = score_canvases(&outcome.networks, &canvases, spec.config.sampler.crop)?;
    let report = MetricsReport::compute(
        &scores,
        &target.labels,
        &outcome.validation.scores,
        &outcome.validation.labels,
        spec.threshold_policy,
        &spec.run_id(),
        &spec.target,
    )?;
    Ok(RunOutput {
        record: RunRecord {
            method: spec.method.clone(),
            seed: spec.seed,
            sources: spec.sources.clone(),
            report,
        },
        target_scores: scores,
        target_labels: target.labels.clone(),
        trace_csv: outcome.trace.to_csv(),
        networks: outcome.networks,
    })
}

pub const RECORD_FILE: &str = "report.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const RESULTS_FILE: &str = "results.csv";

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

/// Writes `report.json`, `scores.csv`, `roc.csv` and `trace.csv` of one run
/// into `<out>/runs/<run id>/`.
pub fn write_run(out: &Path, run: &RunOutput) -> Result<PathBuf> {
    let dir = out.join("runs").join(&run.record.report.run_id);
    let mut json = serde_json::to_string(&run.record).expect("record serialises");
    json.push('\n');
    write_file(&dir.join(RECORD_FILE), &json)?;
    let mut scores = String::from("score,label\n");
    for (s, l) in run.target_scores.iter().zip(&run.target_labels) {
        let _ = writeln!(scores, "{s},{l}");
    }
    write_file(&dir.join(SCORES_FILE), &scores)?;
    write_file(&dir.join("roc.csv"), &run.record.report.roc_csv())?;
    write_file(&dir.join("trace.csv"), &run.trace_csv)?;
    Ok(dir)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub hter: (f64, f64),
    pub auc: (f64, f64),
    pub runs: usize,
}

/// Methods as rows, targets as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsTable {
    pub methods: Vec<String>,
    pub targets: Vec<String>,
    pub cells: BTreeMap<(usize, usize), Cell>,
}

impl ResultsTable {
    /// Rows keep first-appearance order of the records; targets are sorted.
    pub fn from_records(records: &[RunRecord]) -> Self {
        let mut methods: Vec<String> = Vec::new();
        let mut targets: Vec<String> = Vec::new();
        for r in records {
            if !methods.contains(&r.method) {
                methods.push(r.method.clone());
            }
            if !targets.contains(&r.report.target) {
                targets.push(r.report.target.clone());
            }
        }
        targets.sort();
        let mut cells = BTreeMap::new();
        for (mi, m) in methods.iter().enumerate() {
            for (ti, t) in targets.iter().enumerate() {
                let group: Vec<&RunRecord> = records
                    .iter()
                    .filter(|r| &r.method == m && &r.report.target == t)
                    .collect();
                if group.is_empty() {
                    continue;
                }
                let h: Vec<f64> = group.iter().map(|r| r.report.hter).collect();
                let a: Vec<f64> = group.iter().map(|r| r.report.auc).collect();
                cells.insert(
                    (mi, ti),
                    Cell {
                        hter: mean_std(&h),
                        auc: mean_std(&a),
                        runs: group.len(),
                    },
                );
            }
        }
        ResultsTable {
            methods,
            targets,
            cells,
        }
    }

    pub fn cell(&self, method: &str, target: &str) -> Option<&Cell> {
        let mi = self.methods.iter().position(|m| m == method)?;
        let ti = self.targets.iter().position(|t| t == target)?;
        self.cells.get(&(mi, ti))
    }

    /// `method,<T>_hter,<T>_auc,...` with `mean±std` cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method");
        for t in &self.targets {
            let _ = write!(out, ",{t}_hter,{t}_auc");
        }
        out.push('\n');
        for (mi, m) in self.methods.iter().enumerate() {
            out.push_str(m);
            for ti in 0..self.targets.len() {
                match self.cells.get(&(mi, ti)) {
                    Some(c) => {
                        let _ = write!(
                            out,
                            ",{:.2}±{:.2},{:.2}±{:.2}",
                            c.hter.0, c.hter.1, c.auc.0, c.auc.1
                        );
                    }
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Row index of the method whose AUC leads the column by more than one
    /// standard deviation of both leaders; `None` when the top is within noise.
    pub fn clear_best(&self, target: usize) -> Option<usize> {
        let mut col: Vec<(usize, &Cell)> = self
            .cells
            .iter()
            .filter(|((_, t), _)| *t == target)
            .map(|((m, _), c)| (*m, c))
            .collect();
        if col.len() < 2 {
            return None;
        }
        col.sort_by(|a, b| b.1.auc.0.total_cmp(&a.1.auc.0).then(a.0.cmp(&b.0)));
        let (best, second) = (col[0].1, col[1].1);
        let margin = best.auc.1.max(second.auc.1);
        (best.auc.0 - second.auc.0 > margin).then_some(col[0].0)
    }

    /// Plain-text table; a clear AUC leader is marked with `*`.
    pub fn render(&self) -> String {
        let best: Vec<Option<usize>> = (0..self.targets.len()).map(|t| self.clear_best(t)).collect();
        let width = self.methods.iter().map(|m| m.len()).max().unwrap_or(6).max(6);
        let mut out = format!("{:<width$}", "method");
        for t in &self.targets {
            let _ = write!(out, " | {:^14} {:^15}", format!("{t} HTER%"), format!("{t} AUC%"));
        }
        out.push('\n');
        for (mi, m) in self.methods.iter().enumerate() {
            let _ = write!(out, "{m:<width$}");
            for (ti, b) in best.iter().enumerate() {
                match self.cells.get(&(mi, ti)) {
                    Some(c) => {
                        let mark = if *b == Some(mi) { "*" } else { " " };
                        let _ = write!(
                            out,
                            " | {:>14} {:>14}{mark}",
                            format!("{:.2}±{:.2}", c.hter.0, c.hter.1),
                            format!("{:.2}±{:.2}", c.auc.0, c.auc.1)
                        );
                    }
                    None => {
                        let _ = write!(out, " | {:>14} {:>15}", "-", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Runs every run of `plan` against the corpus at `corpus_dir`, writing
/// per-run artefacts and `results.csv` under `out`.
pub fn run_plan(plan: &ExperimentPlan, corpus_dir: &Path, out: &Path) -> Result<ResultsTable> {
    let corpus = load_corpus(corpus_dir)?;
    run_plan_on(plan, &corpus, out)
}

pub fn run_plan_on(plan: &ExperimentPlan, corpus: &Corpus, out: &Path) -> Result<ResultsTable> {
    let ids: Vec<String> = corpus.domains.iter().map(|d| d.id.clone()).collect();
    let runs = plan.expand(&ids)?;
    let mut records = Vec::with_capacity(runs.len());
    for (i, spec) in runs.iter().enumerate() {
        log::info!("run {}/{}: {}", i + 1, runs.len(), spec.run_id());
        let output = execute_run(corpus, spec)?;
        write_run(out, &output)?;
        records.push(output.record);
    }
    let table = ResultsTable::from_records(&records);
    write_file(&out.join(RESULTS_FILE), &table.to_csv())?;
    Ok(table)
}

/// Loads every `report.json` below `<dir>/runs`, sorted by run id.
pub fn load_records(dir: &Path) -> Result<Vec<(PathBuf, RunRecord)>> {
    let mut files = Vec::new();
    let mut stack = vec![dir.join("runs")];
    while let Some(d) = stack.pop() {
        let Ok(entries) = fs::read_dir(&d) else {
            continue;
        };
        for e in entries {
            let path = e.map_err(io_err(&d))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == RECORD_FILE) {
                files.push(path);
            }
        }
    }
    if files.is_empty() {
        return Err(ExperimentError::EmptyResults(dir.display().to_string()));
    }
    let mut out = Vec::with_capacity(files.len());
    for path in files {
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let rec: RunRecord = serde_json::from_str(text.trim()).map_err(|e| ExperimentError::Record {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        out.push((path, rec));
    }
    out.sort_by(|a, b| {
        method_rank(&a.1.method)
            .cmp(&method_rank(&b.1.method))
            .then_with(|| a.1.method.cmp(&b.1.method))
            .then_with(|| a.1.report.target.cmp(&b.1.report.target))
            .then(a.1.seed.cmp(&b.1.seed))
    });
    Ok(out)
}

fn method_rank(m: &str) -> usize {
    const ORDER: [&str; 7] = [
        "baseline",
        "feature-SADG",
        "task-SADG",
        "SADG",
        "SADG wo/ad",
        "SADG wo/trip",
        "SADG wo/sa",
    ];
    ORDER.iter().position(|o| *o == m).unwrap_or(ORDER.len())
}

fn read_scores(path: &Path) -> Result<(Vec<f64>, Vec<usize>)> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |msg: String| ExperimentError::Record {
        path: path.display().to_string(),
        msg,
    };
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let (s, l) = line.split_once(',').ok_or_else(|| bad(format!("bad row '{line}'")))?;
        scores.push(s.parse().map_err(|_| bad(format!("bad score '{s}'")))?);
        labels.push(l.parse().map_err(|_| bad(format!("bad label '{l}'")))?);
    }
    Ok((scores, labels))
}

/// Renders the comparison table of a results directory and writes one pooled
/// ROC CSV per (method, target) into `<dir>/roc/`. Returns the table text.
pub fn report(dir: &Path) -> Result<String> {
    let loaded = load_records(dir)?;
    let records: Vec<RunRecord> = loaded.iter().map(|(_, r)| r.clone()).collect();
    let table = ResultsTable::from_records(&records);
    let mut pooled: BTreeMap<(String, String), (Vec<f64>, Vec<usize>)> = BTreeMap::new();
    for (path, rec) in &loaded {
        let scores_path = path.with_file_name(SCORES_FILE);
        let (s, l) = read_scores(&scores_path)?;
        let entry = pooled
            .entry((slug(&rec.method), rec.report.target.clone()))
            .or_default();
        entry.0.extend(s);
        entry.1.extend(l);
    }
    for ((method, target), (s, l)) in &pooled {
        let mut csv = String::from("fpr,tpr,threshold\n");
        for p in roc_curve(s, l)? {
            let _ = writeln!(csv, "{},{},{}", p.fpr, p.tpr, p.threshold);
        }
        write_file(&dir.join("roc").join(format!("{method}_{target}.csv")), &csv)?;
    }
    Ok(table.render())
}
