//! End-to-end evaluation: partition, score, select, compose, query, judge.

use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Answerer, BackendError, Query, View};
use crate::config::{answers_match, derive_seed, string_key, SeedPurpose};
use crate::dataset::{write_jsonl, DatasetError, VqaInstance};
use crate::imaging::{partition, GridSpec, SubImage};
use crate::scoring::{score_subimages, RelevanceScore, RelevanceScorer, ScorerKind, ScoringError};
use crate::selection::{
    compose_prompt, majority_vote, overview_view, select_optimal, select_random, select_topk, subimage_views,
    InstanceQuery, SelectionResult, SelectionStrategy,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("{0}")]
    Dataset(#[from] DatasetError),
    #[error("writing outputs: {0}")]
    Io(#[from] std::io::Error),
}

/// Visual tokens for a composition: the exact product.
pub fn token_count(composition_size: u64, tokens_per_image: u64) -> u64 {
    composition_size
        .checked_mul(tokens_per_image)
        .expect("token count overflows u64")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBudget {
    pub tokens_per_image: u64,
    pub composition_size: u64,
    pub total: u64,
}

impl TokenBudget {
    pub fn new(tokens_per_image: u64, composition_size: u64) -> Self {
        Self {
            tokens_per_image,
            composition_size,
            total: token_count(composition_size, tokens_per_image),
        }
    }
}

/// Scores the sub-images of one instance. Unlike [`RelevanceScorer`] it
/// sees the whole instance, which lets label-based scorers plug in.
pub trait InstanceScorer: Send + Sync {
    fn kind(&self) -> ScorerKind;
    fn scores(&self, instance: &VqaInstance, subimages: &[SubImage]) -> Result<Vec<RelevanceScore>, ScoringError>;
}

/// Adapts a question/image scorer.
pub struct QuestionScorer<S>(pub S);

impl<S: RelevanceScorer + Send + Sync> InstanceScorer for QuestionScorer<S> {
    fn kind(&self) -> ScorerKind {
        self.0.kind()
    }

    fn scores(&self, instance: &VqaInstance, subimages: &[SubImage]) -> Result<Vec<RelevanceScore>, ScoringError> {
        score_subimages(&instance.question, subimages, &self.0)
    }
}

/// Scores 1 for the labeled cell and 0 elsewhere.
pub struct GroundTruthScorer;

impl InstanceScorer for GroundTruthScorer {
    fn kind(&self) -> ScorerKind {
        ScorerKind::GroundTruth
    }

    fn scores(&self, instance: &VqaInstance, subimages: &[SubImage]) -> Result<Vec<RelevanceScore>, ScoringError> {
        let gt = instance
            .gt_cell
            .ok_or_else(|| ScoringError::Provider(format!("{} has no gt_cell", instance.instance_id)))?;
        Ok((0..subimages.len())
            .map(|i| RelevanceScore(if i == gt { 1.0 } else { 0.0 }))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub strategy: SelectionStrategy,
    pub grid_n: u32,
    pub include_overview: bool,
    pub seed: u64,
    pub repeats: u32,
    pub parallelism: usize,
    pub tokens_per_image: u64,
    pub temperature: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: SelectionStrategy::TopK {
                k: 1,
                scorer: ScorerKind::TrainedBiencoder,
            },
            grid_n: 3,
            include_overview: true,
            seed: 0,
            repeats: 32,
            parallelism: 4,
            tokens_per_image: 576,
            temperature: 0.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.grid_n < 1 {
            return bad("grid_n must be >= 1".into());
        }
        if self.repeats < 1 {
            return bad("repeats must be >= 1".into());
        }
        if self.tokens_per_image < 1 {
            return bad("tokens_per_image must be >= 1".into());
        }
        let cells = (self.grid_n as usize) * (self.grid_n as usize);
        if let Some(k) = self.strategy.k() {
            if k < 1 || k > cells {
                return bad(format!("k={k} must be in 1..={cells}"));
            }
        }
        if !self.include_overview && matches!(self.strategy, SelectionStrategy::NoSelection) {
            return bad("strategy none without the overview sends no images".into());
        }
        Ok(())
    }
}

/// Outcome for one instance. Wall time is kept out of the serialized form
/// so that record streams are byte-identical across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub instance_id: String,
    pub strategy: String,
    pub chosen: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<RelevanceScore>>,
    pub predicted: Option<String>,
    pub gold: String,
    pub correct: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub visual_token_count: u64,
    pub queries: usize,
    #[serde(skip)]
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub strategy: String,
    pub instances: usize,
    /// `None` when there were no instances.
    pub accuracy: Option<f64>,
    pub correct: usize,
    pub errors: usize,
    pub mean_visual_tokens: Option<f64>,
    pub tokens_per_image: u64,
    pub total_queries: usize,
    pub wall_time_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_repeat_accuracy: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Metrics {
    fn from_records(strategy: String, records: &[EvalRecord], tokens_per_image: u64, wall: f64) -> Self {
        let n = records.len();
        let correct = records.iter().filter(|r| r.correct).count();
        let tokens: u64 = records.iter().map(|r| r.visual_token_count).sum();
        Self {
            strategy,
            instances: n,
            accuracy: (n > 0).then(|| correct as f64 / n as f64),
            correct,
            errors: records.iter().filter(|r| r.error.is_some()).count(),
            mean_visual_tokens: (n > 0).then(|| tokens as f64 / n as f64),
            tokens_per_image,
            total_queries: records.iter().map(|r| r.queries).sum(),
            wall_time_seconds: wall,
            per_repeat_accuracy: None,
            note: (n == 0).then(|| "no instances".to_string()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Metrics,
    pub records: Vec<EvalRecord>,
}

struct Outcome {
    chosen: Vec<usize>,
    scores: Option<Vec<RelevanceScore>>,
    predicted: Option<String>,
    correct: bool,
    error: Option<String>,
    images_sent: u64,
    queries: usize,
}

impl Outcome {
    fn failed(error: String, images_sent: u64, queries: usize) -> Self {
        Self {
            chosen: Vec::new(),
            scores: None,
            predicted: None,
            correct: false,
            error: Some(error),
            images_sent,
            queries,
        }
    }
}

fn run_instance(
    instance: &VqaInstance,
    answerer: &dyn Answerer,
    scorer: Option<&dyn InstanceScorer>,
    config: &RunConfig,
    grid: &GridSpec,
) -> Outcome {
    let image = match instance.load_image() {
        Ok(img) => img,
        Err(e) => return Outcome::failed(e.to_string(), 0, 0),
    };
    let subs = match partition(&image, grid) {
        Ok(s) => s,
        Err(e) => return Outcome::failed(e.to_string(), 0, 0),
    };
    let id = instance.instance_id.as_str();
    let overview = overview_view(id, image);
    let judge = |a: &str| answers_match(a, &instance.answer, instance.options.as_deref());

    let chosen_scores: (Vec<usize>, Option<Vec<RelevanceScore>>) = match config.strategy {
        SelectionStrategy::Optimal | SelectionStrategy::MajorityVote => {
            let views = subimage_views(id, subs);
            let query = InstanceQuery {
                instance_id: id,
                question: &instance.question,
                gold: &instance.answer,
                options: instance.options.as_deref(),
                overview: &overview,
                subimages: &views,
                temperature: config.temperature,
            };
            let queries = views.len();
            let images_sent = 2 * queries as u64;
            if config.strategy == SelectionStrategy::Optimal {
                return match select_optimal(&query, answerer, false) {
                    Ok(o) => Outcome {
                        chosen: o.best_index.into_iter().collect(),
                        scores: None,
                        predicted: Some(o.responses[o.best_index.unwrap_or(0)].clone()),
                        correct: o.answerable,
                        error: None,
                        images_sent,
                        queries,
                    },
                    Err(e) => Outcome::failed(e.to_string(), images_sent, queries),
                };
            }
            let responses: Result<Vec<String>, BackendError> =
                query.ask_each(answerer, "maj", false).into_iter().collect();
            return match responses
                .map_err(|e| e.to_string())
                .and_then(|r| majority_vote(&r).map_err(|e| e.to_string()))
            {
                Ok(winner) => Outcome {
                    chosen: Vec::new(),
                    scores: None,
                    correct: judge(&winner),
                    predicted: Some(winner),
                    error: None,
                    images_sent,
                    queries,
                },
                Err(e) => Outcome::failed(e, images_sent, queries),
            };
        }
        SelectionStrategy::NoSelection => (Vec::new(), None),
        SelectionStrategy::Random { k } => {
            let seed = derive_seed(config.seed, SeedPurpose::RandomSelection, string_key(id));
            match select_random(subs.len(), k, seed) {
                Ok(c) => (c, None),
                Err(e) => return Outcome::failed(e.to_string(), 0, 0),
            }
        }
        SelectionStrategy::TopK { k, .. } => {
            let Some(scorer) = scorer else {
                return Outcome::failed("topk needs a scorer".into(), 0, 0);
            };
            let scored = scorer
                .scores(instance, &subs)
                .map_err(|e| e.to_string())
                .and_then(|s| select_topk(&s, k).map(|c| (c, s)).map_err(|e| e.to_string()));
            match scored {
                Ok((c, s)) => (c, Some(s)),
                Err(e) => return Outcome::failed(e, 0, 0),
            }
        }
    };

    let (chosen, scores) = chosen_scores;
    let selection = SelectionResult {
        strategy: config.strategy,
        chosen,
        scores,
    };
    let views = subimage_views(id, subs);
    let include_overview = config.include_overview || selection.chosen.is_empty();
    let composition = match compose_prompt(&overview, &selection, &views, include_overview) {
        Ok(c) => c,
        Err(e) => return Outcome::failed(e.to_string(), 0, 0),
    };
    let images_sent = composition.len() as u64;
    let answer = answerer.answer(&Query {
        request_id: format!("{id}:eval:0"),
        question: &instance.question,
        options: instance.options.as_deref(),
        views: &composition.views,
        temperature: config.temperature,
    });
    match answer {
        Ok(a) => Outcome {
            chosen: selection.chosen,
            scores: selection.scores,
            correct: judge(&a),
            predicted: Some(a),
            error: None,
            images_sent,
            queries: 1,
        },
        Err(e) => Outcome {
            chosen: selection.chosen,
            scores: selection.scores,
            ..Outcome::failed(e.to_string(), images_sent, 1)
        },
    }
}

/// Evaluates one strategy over a dataset. Per-instance failures count as
/// incorrect and are flagged in the record. Records are sorted by
/// instance id.
pub fn evaluate(
    instances: &[VqaInstance],
    answerer: &dyn Answerer,
    scorer: Option<&dyn InstanceScorer>,
    config: &RunConfig,
) -> Result<RunOutput, HarnessError> {
    config.validate()?;
    if matches!(config.strategy, SelectionStrategy::TopK { .. }) && scorer.is_none() {
        return Err(HarnessError::Config("topk needs a scorer".into()));
    }
    let grid = GridSpec::new(config.grid_n).map_err(|e| HarnessError::Config(e.to_string()))?;
    let strategy = config.strategy.to_string();
    let started = Instant::now();
    let one = |inst: &VqaInstance| {
        let t = Instant::now();
        let o = run_instance(inst, answerer, scorer, config, &grid);
        EvalRecord {
            instance_id: inst.instance_id.clone(),
            strategy: strategy.clone(),
            chosen: o.chosen,
            scores: o.scores,
            predicted: o.predicted,
            gold: inst.answer.clone(),
            correct: o.correct,
            error: o.error,
            visual_token_count: token_count(o.images_sent, config.tokens_per_image),
            queries: o.queries,
            wall_time: t.elapsed().as_secs_f64(),
        }
    };
    let mut records: Vec<EvalRecord> = if config.parallelism > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallelism)
            .build()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        pool.install(|| instances.par_iter().map(one).collect())
    } else {
        instances.iter().map(one).collect()
    };
    records.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    let metrics = Metrics::from_records(
        strategy,
        &records,
        config.tokens_per_image,
        started.elapsed().as_secs_f64(),
    );
    Ok(RunOutput { metrics, records })
}

#[derive(Debug, Clone)]
pub struct RepeatOutput {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub runs: Vec<RunOutput>,
}

impl RepeatOutput {
    /// Metrics of the first repeat with the mean accuracy and every
    /// per-repeat accuracy attached.
    pub fn summary(&self) -> Metrics {
        let mut m = self.runs[0].metrics.clone();
        m.accuracy = Some(self.mean);
        m.correct = self.runs.iter().map(|r| r.metrics.correct).sum();
        m.errors = self.runs.iter().map(|r| r.metrics.errors).sum();
        m.total_queries = self.runs.iter().map(|r| r.metrics.total_queries).sum();
        m.wall_time_seconds = self.runs.iter().map(|r| r.metrics.wall_time_seconds).sum();
        m.per_repeat_accuracy = Some(self.accuracies.clone());
        m
    }
}

/// Random selection repeated `config.repeats` times; repeat `r` uses seed
/// `config.seed + r`.
pub fn run_random_repeats(
    instances: &[VqaInstance],
    answerer: &dyn Answerer,
    config: &RunConfig,
) -> Result<RepeatOutput, HarnessError> {
    config.validate()?;
    if !matches!(config.strategy, SelectionStrategy::Random { .. }) {
        return Err(HarnessError::Config("repeats apply to the random strategy".into()));
    }
    if instances.is_empty() {
        return Err(HarnessError::Config("no instances".into()));
    }
    let runs = (0..config.repeats as u64)
        .map(|r| {
            let cfg = RunConfig {
                seed: config.seed.wrapping_add(r),
                ..config.clone()
            };
            evaluate(instances, answerer, None, &cfg)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let accuracies: Vec<f64> = runs.iter().map(|r| r.metrics.accuracy.unwrap_or(0.0)).collect();
    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    Ok(RepeatOutput { accuracies, mean, runs })
}

/// Majority vote over the n² overview + sub-image answers.
pub fn run_majority(
    instances: &[VqaInstance],
    answerer: &dyn Answerer,
    config: &RunConfig,
) -> Result<RunOutput, HarnessError> {
    evaluate(
        instances,
        answerer,
        None,
        &RunConfig {
            strategy: SelectionStrategy::MajorityVote,
            ..config.clone()
        },
    )
}

/// Answerer wrapper that logs every request id and image count it sees.
pub struct AuditingAnswerer<A> {
    inner: A,
    log: Mutex<Vec<(String, usize)>>,
}

impl<A: Answerer> AuditingAnswerer<A> {
    pub fn new(inner: A) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Logged `(request_id, image count)` pairs, sorted by request id.
    pub fn requests(&self) -> Vec<(String, usize)> {
        let mut log = self.log.lock().expect("audit log").clone();
        log.sort();
        log
    }

    /// Images sent for one instance, from request ids `"{id}:…"`.
    pub fn images_for(&self, instance_id: &str) -> usize {
        let prefix = format!("{instance_id}:");
        self.log
            .lock()
            .expect("audit log")
            .iter()
            .filter(|(r, _)| r.starts_with(&prefix))
            .map(|(_, n)| n)
            .sum()
    }
}

impl<A: Answerer> Answerer for AuditingAnswerer<A> {
    fn answer(&self, query: &Query<'_>) -> Result<String, BackendError> {
        self.log
            .lock()
            .expect("audit log")
            .push((query.request_id.clone(), query.views.len()));
        self.inner.answer(query)
    }
}

/// Rendered comparison table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub csv: String,
    pub markdown: String,
}

struct Row {
    strategy: String,
    accuracy: String,
    tokens: String,
    queries: String,
    wall: String,
}

fn rows(metrics: &[Metrics]) -> Vec<Row> {
    let mut sorted: Vec<&Metrics> = metrics.iter().collect();
    sorted.sort_by(|a, b| a.strategy.cmp(&b.strategy));
    sorted
        .into_iter()
        .map(|m| Row {
            strategy: m.strategy.clone(),
            accuracy: m.accuracy.map_or("n/a".into(), |a| format!("{a:.4}")),
            tokens: m.mean_visual_tokens.map_or("n/a".into(), |t| format!("{t:.1}")),
            queries: m.total_queries.to_string(),
            wall: format!("{:.3}", m.wall_time_seconds),
        })
        .collect()
}

pub const REPORT_COLUMNS: [&str; 5] = ["strategy", "accuracy", "img_tokens", "answerer_queries", "wall_time_s"];

/// CSV and Markdown tables with one row per metrics set, ordered by
/// strategy. Both render from the same formatted values.
pub fn report(metrics: &[Metrics]) -> Report {
    let rows = rows(metrics);
    let mut csv = REPORT_COLUMNS.join(",") + "\n";
    let mut markdown = format!(
        "| strategy | accuracy | #img tokens | #answerer queries | wall time (s) |\n|---|---:|---:|---:|---:|\n"
    );
    for r in &rows {
        let quoted = if r.strategy.contains(',') {
            format!("\"{}\"", r.strategy.replace('"', "\"\""))
        } else {
            r.strategy.clone()
        };
        csv += &format!("{quoted},{},{},{},{}\n", r.accuracy, r.tokens, r.queries, r.wall);
        markdown += &format!(
            "| {} | {} | {} | {} | {} |\n",
            r.strategy, r.accuracy, r.tokens, r.queries, r.wall
        );
    }
    Report { csv, markdown }
}

/// Accuracy against mean visual tokens, one labeled point per strategy.
pub fn scatter_svg(metrics: &[Metrics]) -> String {
    let points: Vec<(&str, f64, f64)> = metrics
        .iter()
        .filter_map(|m| Some((m.strategy.as_str(), m.mean_visual_tokens?, m.accuracy?)))
        .collect();
    let (w, h, pad) = (640.0, 400.0, 60.0);
    let max_tokens = points.iter().map(|p| p.1).fold(1.0_f64, f64::max) * 1.1;
    let x = |t: f64| pad + t / max_tokens * (w - 2.0 * pad);
    let y = |a: f64| h - pad - a * (h - 2.0 * pad);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ty}\" text-anchor=\"middle\">visual tokens per instance</text>\n\
         <text x=\"15\" y=\"{cy}\" transform=\"rotate(-90 15 {cy})\" text-anchor=\"middle\">accuracy</text>\n",
        b = h - pad,
        r = w - pad,
        cx = w / 2.0,
        ty = h - 20.0,
        cy = h / 2.0,
    );
    for (label, t, a) in points {
        svg += &format!(
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"4\"/><text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            x(t),
            y(a),
            x(t) + 6.0,
            y(a) - 6.0,
            label.replace('&', "&amp;").replace('<', "&lt;")
        );
    }
    svg + "</svg>\n"
}

/// Writes `records.jsonl`, `metrics.json` (with the config echoed),
/// `report.csv` and `report.md` into `dir`.
pub fn write_outputs(
    dir: &Path,
    records: &[EvalRecord],
    metrics: &[Metrics],
    config_echo: &serde_json::Value,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("records.jsonl"), records)?;
    let doc = serde_json::json!({ "config": config_echo, "metrics": metrics });
    std::fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(&doc).expect("metrics serialize"),
    )?;
    let r = report(metrics);
    std::fs::write(dir.join("report.csv"), r.csv)?;
    std::fs::write(dir.join("report.md"), r.markdown)?;
    Ok(())
}

/// Reads the metrics sets back from a `metrics.json`.
pub fn read_metrics(path: &Path) -> Result<Vec<Metrics>, HarnessError> {
    #[derive(Deserialize)]
    struct Doc {
        metrics: Vec<Metrics>,
    }
    let text = std::fs::read_to_string(path)?;
    let doc: Doc = serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    Ok(doc.metrics)
}

/// Overview-only view, exposed for callers that build compositions by hand.
pub fn overview_for(instance: &VqaInstance) -> Result<View, DatasetError> {
    Ok(overview_view(&instance.instance_id, instance.load_image()?))
}

/// Shared handle for scorers used across threads.
pub type SharedScorer = Arc<dyn InstanceScorer>;
