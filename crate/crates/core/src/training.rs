//! Distant supervision and margin-ranking training of the tiny bi-encoder.
//!
//! Labels come from the answerer itself: a sub-image is positive for a
//! question when the overview plus that sub-image yields the gold answer.
//! Positive/negative pairs then train the scorer with
//! `max(0, m + ψ(q, v⁻) − ψ(q, v⁺))`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{index::sample, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::Answerer;
use crate::config::{answers_match, derive_seed, string_key, EventLog, SeedPurpose};
use crate::dataset::VqaInstance;
use crate::imaging::{partition, GridSpec, SubImage};
use crate::scoring::{
    cosine_slices, tiny_image_features, tokenize, RelevanceScore, ScoringError, TinyBiEncoder, TINY_FEATURE_LEN,
};
use crate::selection::{grid_views, InstanceQuery};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no contrastive pairs to train on")]
    NoPairs,
    #[error("scoring pair {pair}: {source}")]
    Scoring {
        pair: usize,
        #[source]
        source: ScoringError,
    },
    #[error("non-finite {what} at epoch {epoch}, batch {batch}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        batch: usize,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("preparing instance {instance_id}: {message}")]
    Instance { instance_id: String, message: String },
    #[error("encoder file: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub pair_cap_per_instance: usize,
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            learning_rate: 5e-6,
            batch_size: 64,
            epochs: 32,
            seed: 0,
            pair_cap_per_instance: 16,
            embed_dim: 32,
        }
    }
}

/// Standard deviation of the Gaussian parameter initialization.
pub const INIT_STD: f64 = 0.02;

impl TrainConfig {
    /// Returns the offending key on failure.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(("margin", "must be finite and > 0".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(("learning_rate", "must be finite and > 0".into()));
        }
        if self.batch_size < 1 {
            return Err(("batch_size", "must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(("epochs", "must be >= 1".into()));
        }
        if self.pair_cap_per_instance < 1 {
            return Err(("pair_cap_per_instance", "must be >= 1".into()));
        }
        if self.embed_dim < 2 {
            return Err(("embed_dim", "must be >= 2".into()));
        }
        Ok(())
    }
}

/// Distant labels for one instance, as persisted in `supervision.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisionExample {
    pub instance_id: String,
    pub question: String,
    pub grid_n: u32,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    /// Both label sets are non-empty, so pairs can be formed.
    pub usable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedInstance {
    pub instance_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct SupervisionReport {
    pub examples: Vec<SupervisionExample>,
    pub skipped: Vec<SkippedInstance>,
}

impl SupervisionReport {
    pub fn usable(&self) -> impl Iterator<Item = &SupervisionExample> {
        self.examples.iter().filter(|e| e.usable)
    }
}

fn label_instance(
    instance: &VqaInstance,
    answerer: &dyn Answerer,
    grid: &GridSpec,
    temperature: f64,
) -> Result<SupervisionExample, String> {
    let image = instance.load_image().map_err(|e| e.to_string())?;
    let (overview, subs) = grid_views(&instance.instance_id, image, grid).map_err(|e| e.to_string())?;
    let query = InstanceQuery {
        instance_id: &instance.instance_id,
        question: &instance.question,
        gold: &instance.answer,
        options: instance.options.as_deref(),
        overview: &overview,
        subimages: &subs,
        temperature,
    };
    let (mut positives, mut negatives) = (Vec::new(), Vec::new());
    for (i, r) in query.ask_each(answerer, "sup", false).into_iter().enumerate() {
        let answer = r.map_err(|e| format!("answerer failed on sub-image {i}: {e}"))?;
        if answers_match(&answer, &instance.answer, instance.options.as_deref()) {
            positives.push(i);
        } else {
            negatives.push(i);
        }
    }
    Ok(SupervisionExample {
        instance_id: instance.instance_id.clone(),
        question: instance.question.clone(),
        grid_n: grid.n(),
        usable: !positives.is_empty() && !negatives.is_empty(),
        positives,
        negatives,
    })
}

/// Labels every sub-image of every instance by querying the answerer with
/// the overview plus that sub-image. Instances whose queries fail are
/// reported in `skipped` and logged.
pub fn build_supervision(
    instances: &[VqaInstance],
    answerer: &dyn Answerer,
    grid: &GridSpec,
    parallelism: usize,
    log: &EventLog,
) -> SupervisionReport {
    fn label<'a>(
        inst: &'a VqaInstance,
        answerer: &dyn Answerer,
        grid: &GridSpec,
    ) -> (&'a VqaInstance, Result<SupervisionExample, String>) {
        (inst, label_instance(inst, answerer, grid, 0.0))
    }
    let results: Vec<_> = match rayon::ThreadPoolBuilder::new().num_threads(parallelism.max(1)).build() {
        Ok(pool) => pool.install(|| instances.par_iter().map(|i| label(i, answerer, grid)).collect()),
        Err(_) => instances.iter().map(|i| label(i, answerer, grid)).collect(),
    };
    let mut report = SupervisionReport::default();
    for (inst, r) in results {
        match r {
            Ok(ex) => report.examples.push(ex),
            Err(reason) => {
                log.emit(
                    "supervision.skip",
                    serde_json::json!({"instance_id": inst.instance_id, "reason": reason}),
                );
                report.skipped.push(SkippedInstance {
                    instance_id: inst.instance_id.clone(),
                    reason,
                });
            }
        }
    }
    log.emit(
        "supervision.done",
        serde_json::json!({
            "instances": instances.len(),
            "labeled": report.examples.len(),
            "usable": report.usable().count(),
            "skipped": report.skipped.len(),
        }),
    );
    report
}

/// A question with one positive and one negative sub-image of the same
/// instance, by cell index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub instance_id: String,
    pub question: String,
    pub positive: usize,
    pub negative: usize,
}

/// Positives × negatives, down-sampled without replacement to `cap` when
/// larger. Unusable examples give no pairs.
pub fn make_pairs(example: &SupervisionExample, cap: usize, seed: u64) -> Vec<ContrastivePair> {
    if !example.usable || example.positives.is_empty() || example.negatives.is_empty() {
        return Vec::new();
    }
    let all: Vec<(usize, usize)> = example
        .positives
        .iter()
        .flat_map(|&p| example.negatives.iter().map(move |&n| (p, n)))
        .collect();
    let kept: Vec<(usize, usize)> = if all.len() > cap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, all.len(), cap).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| all[i]).collect()
    } else {
        all
    };
    kept.into_iter()
        .map(|(positive, negative)| ContrastivePair {
            instance_id: example.instance_id.clone(),
            question: example.question.clone(),
            positive,
            negative,
        })
        .collect()
}

/// One hinge term. Zero exactly when `positive − negative ≥ m`.
pub fn hinge(m: f64, positive: f64, negative: f64) -> f64 {
    let gap = positive - negative;
    if gap >= m {
        0.0
    } else {
        m - gap
    }
}

/// Sum of hinge terms over `(ψ⁺, ψ⁻)` score pairs.
pub fn margin_loss(scored: &[(RelevanceScore, RelevanceScore)], m: f64) -> f64 {
    scored.iter().map(|(p, n)| hinge(m, p.0, n.0)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PairIndex {
    question: usize,
    positive: usize,
    negative: usize,
}

/// Training corpus: questions, thumbnail features for every sub-image that
/// appears in a pair, and the pairs as indices into both.
#[derive(Debug, Clone, Default)]
pub struct PairSet {
    questions: Vec<String>,
    features: Vec<Vec<f64>>,
    pairs: Vec<PairIndex>,
}

impl PairSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn questions(&self) -> &[String] {
        &self.questions
    }

    /// Adds one instance's pairs. `subimages` is the instance's full grid.
    pub fn add_instance(
        &mut self,
        question: &str,
        subimages: &[SubImage],
        pairs: &[ContrastivePair],
    ) -> Result<(), ScoringError> {
        if pairs.is_empty() {
            return Ok(());
        }
        let q = self.questions.len();
        self.questions.push(question.to_string());
        let mut slots: BTreeMap<usize, usize> = BTreeMap::new();
        for p in pairs {
            for cell in [p.positive, p.negative] {
                if let std::collections::btree_map::Entry::Vacant(e) = slots.entry(cell) {
                    let sub = subimages.get(cell).ok_or(ScoringError::NoSubImages)?;
                    e.insert(self.features.len());
                    self.features.push(tiny_image_features(&sub.image)?);
                }
            }
            self.pairs.push(PairIndex {
                question: q,
                positive: slots[&p.positive],
                negative: slots[&p.negative],
            });
        }
        Ok(())
    }

    /// Adds a pair from raw images; mostly useful for tests and small
    /// hand-built corpora.
    pub fn push_raw(
        &mut self,
        question: &str,
        positive: &crate::imaging::RasterImage,
        negative: &crate::imaging::RasterImage,
    ) -> Result<(), ScoringError> {
        let q = self.questions.len();
        self.questions.push(question.to_string());
        let pos = self.features.len();
        self.features.push(tiny_image_features(positive)?);
        self.features.push(tiny_image_features(negative)?);
        self.pairs.push(PairIndex {
            question: q,
            positive: pos,
            negative: pos + 1,
        });
        Ok(())
    }

    /// Sorted unique tokens over all questions.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut words: Vec<String> = self.questions.iter().flat_map(|q| tokenize(q)).collect();
        words.sort();
        words.dedup();
        words
    }

    fn forward(&self, enc: &TinyBiEncoder) -> Forward {
        let rows: Vec<Vec<usize>> = self.questions.iter().map(|q| enc.token_rows(q)).collect();
        let texts = rows
            .iter()
            .map(|r| {
                if r.is_empty() {
                    vec![0.0; enc.dim()]
                } else {
                    enc.mean_rows(r)
                }
            })
            .collect();
        let images = self.features.iter().map(|f| enc.project_features(f)).collect();
        Forward { rows, texts, images }
    }

    /// `(ψ⁺, ψ⁻)` for every pair.
    pub fn scores(&self, enc: &TinyBiEncoder) -> Result<Vec<(RelevanceScore, RelevanceScore)>, TrainError> {
        let fwd = self.forward(enc);
        self.pairs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let t = &fwd.texts[p.question];
                let wrap = |source| TrainError::Scoring { pair: i, source };
                let pos = cosine_slices(t, &fwd.images[p.positive]).map_err(wrap)?;
                let neg = cosine_slices(t, &fwd.images[p.negative]).map_err(wrap)?;
                Ok((RelevanceScore(pos), RelevanceScore(neg)))
            })
            .collect()
    }

    /// Summed margin loss under `enc`.
    pub fn margin_loss(&self, enc: &TinyBiEncoder, m: f64) -> Result<f64, TrainError> {
        Ok(margin_loss(&self.scores(enc)?, m))
    }
}

struct Forward {
    rows: Vec<Vec<usize>>,
    texts: Vec<Vec<f64>>,
    images: Vec<Vec<f64>>,
}

/// Gradient of a loss with respect to the encoder's two parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub text_embed: Vec<f64>,
    pub image_proj: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `∂ cos(t, v) / ∂t` scaled by `weight`, accumulated into `out`.
fn accumulate_cos_grad(out: &mut [f64], a: &[f64], b: &[f64], cos: f64, weight: f64) {
    let (na, nb) = (norm(a), norm(b));
    for ((o, ai), bi) in out.iter_mut().zip(a).zip(b) {
        *o += weight * (bi / (na * nb) - cos * ai / (na * na));
    }
}

/// Summed hinge loss over `batch` and its analytic gradient.
pub(crate) fn loss_and_grad(
    set: &PairSet,
    enc: &TinyBiEncoder,
    batch: &[usize],
    m: f64,
) -> Result<(f64, Gradient), TrainError> {
    let dim = enc.dim();
    let mut text_grads: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut image_grads: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut texts: BTreeMap<usize, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    let mut images: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut loss = 0.0;
    for &pi in batch {
        let p = set.pairs[pi];
        let (_, t) = texts.entry(p.question).or_insert_with(|| {
            let rows = enc.token_rows(&set.questions[p.question]);
            let t = if rows.is_empty() {
                vec![0.0; dim]
            } else {
                enc.mean_rows(&rows)
            };
            (rows, t)
        });
        let t = t.clone();
        for idx in [p.positive, p.negative] {
            images
                .entry(idx)
                .or_insert_with(|| enc.project_features(&set.features[idx]));
        }
        let (vp, vn) = (&images[&p.positive], &images[&p.negative]);
        let wrap = |source| TrainError::Scoring { pair: pi, source };
        let pos = cosine_slices(&t, vp).map_err(wrap)?;
        let neg = cosine_slices(&t, vn).map_err(wrap)?;
        let h = hinge(m, pos, neg);
        loss += h;
        if h == 0.0 {
            continue;
        }
        // dL/dψ⁺ = −1, dL/dψ⁻ = +1
        let tg = text_grads.entry(p.question).or_insert_with(|| vec![0.0; dim]);
        accumulate_cos_grad(tg, &t, vp, pos, -1.0);
        accumulate_cos_grad(tg, &t, vn, neg, 1.0);
        accumulate_cos_grad(
            image_grads.entry(p.positive).or_insert_with(|| vec![0.0; dim]),
            vp,
            &t,
            pos,
            -1.0,
        );
        accumulate_cos_grad(
            image_grads.entry(p.negative).or_insert_with(|| vec![0.0; dim]),
            vn,
            &t,
            neg,
            1.0,
        );
    }

    let mut grad = Gradient {
        text_embed: vec![0.0; enc.text_embed().len()],
        image_proj: vec![0.0; enc.image_proj().len()],
    };
    for (q, g) in &text_grads {
        let rows = &texts[q].0;
        let share = 1.0 / rows.len() as f64;
        for &r in rows {
            for (o, gj) in grad.text_embed[r * dim..(r + 1) * dim].iter_mut().zip(g) {
                *o += share * gj;
            }
        }
    }
    for (idx, g) in &image_grads {
        for (i, x) in set.features[*idx].iter().enumerate() {
            if *x == 0.0 {
                continue;
            }
            for (o, gj) in grad.image_proj[i * dim..(i + 1) * dim].iter_mut().zip(g) {
                *o += x * gj;
            }
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub margin: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub embed_dim: usize,
    pub pair_count: usize,
    /// Mean per-pair loss before the first update.
    pub initial_loss: f64,
    /// Mean per-pair loss over the full corpus after each epoch.
    pub epoch_losses: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub selected_epoch: usize,
    pub selected_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedEncoder {
    pub encoder: TinyBiEncoder,
    pub log: TrainingLog,
}

/// Mini-batch gradient descent on the mean hinge loss. Keeps the snapshot
/// with the lowest full-corpus loss among all epochs.
pub fn train_scorer(set: &PairSet, config: &TrainConfig) -> Result<TrainedEncoder, TrainError> {
    config
        .validate()
        .map_err(|(k, m)| TrainError::Config(format!("{k}: {m}")))?;
    if set.is_empty() {
        return Err(TrainError::NoPairs);
    }
    let init_seed = derive_seed(config.seed, SeedPurpose::EncoderInit, 0);
    let mut enc = TinyBiEncoder::init(set.vocabulary(), config.embed_dim, INIT_STD, init_seed)
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let n = set.len() as f64;
    let initial_loss = set.margin_loss(&enc, config.margin)? / n;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, TinyBiEncoder)> = None;
    let mut order: Vec<usize> = (0..set.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SeedPurpose::BatchShuffle, epoch as u64));
        order.shuffle(&mut rng);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let (loss, grad) = loss_and_grad(set, &enc, batch, config.margin)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    what: "loss",
                    epoch,
                    batch: b,
                });
            }
            let step = config.learning_rate / batch.len() as f64;
            for (p, g) in enc.text_embed_mut().iter_mut().zip(&grad.text_embed) {
                *p -= step * g;
            }
            for (p, g) in enc.image_proj_mut().iter_mut().zip(&grad.image_proj) {
                *p -= step * g;
            }
            if grad.text_embed.iter().chain(&grad.image_proj).any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite {
                    what: "gradient",
                    epoch,
                    batch: b,
                });
            }
        }
        let loss = set.margin_loss(&enc, config.margin)? / n;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                what: "epoch loss",
                epoch,
                batch: 0,
            });
        }
        epoch_losses.push(loss);
        if best.as_ref().is_none_or(|(_, l, _)| loss < *l) {
            best = Some((epoch + 1, loss, enc.clone()));
        }
    }
    let (selected_epoch, selected_loss, encoder) = best.expect("epochs >= 1");
    Ok(TrainedEncoder {
        encoder,
        log: TrainingLog {
            margin: config.margin,
            learning_rate: config.learning_rate,
            batch_size: config.batch_size,
            epochs: config.epochs,
            seed: config.seed,
            embed_dim: config.embed_dim,
            pair_count: set.len(),
            initial_loss,
            epoch_losses,
            selected_epoch,
            selected_loss,
        },
    })
}

/// Which parameter a gradient-check entry refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ParamRef {
    TextEmbed { row: usize, col: usize },
    ImageProj { row: usize, col: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<ParamRef>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked_parameters: usize,
    /// Pairs dropped because their hinge sat within `10·ε` of its kink.
    pub excluded_pairs: usize,
}

/// Compares the analytic gradient of the summed margin loss with central
/// finite differences over every parameter. Returns the largest
/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn grad_check(enc: &TinyBiEncoder, set: &PairSet, m: f64, epsilon: f64) -> Result<GradCheckReport, TrainError> {
    let scores = set.scores(enc)?;
    let kept: Vec<usize> = scores
        .iter()
        .enumerate()
        .filter(|(_, (p, n))| (m + n.0 - p.0).abs() > 10.0 * epsilon)
        .map(|(i, _)| i)
        .collect();
    let excluded_pairs = set.len() - kept.len();
    let (_, grad) = loss_and_grad(set, enc, &kept, m)?;

    // Numeric side: t and v are linear in their parameters, so a ±ε step
    // in one parameter moves one coordinate of the affected embeddings by
    // ±ε times that parameter's coefficient.
    let fwd = set.forward(enc);
    let dim = enc.dim();
    let pairs: Vec<PairIndex> = kept.iter().map(|&i| set.pairs[i]).collect();
    let hinge_at = |t: &[f64], vp: &[f64], vn: &[f64]| -> Result<f64, TrainError> {
        let wrap = |source| TrainError::Scoring { pair: 0, source };
        Ok(hinge(
            m,
            cosine_slices(t, vp).map_err(wrap)?,
            cosine_slices(t, vn).map_err(wrap)?,
        ))
    };
    let bump = |v: &[f64], j: usize, delta: f64| {
        let mut out = v.to_vec();
        out[j] += delta;
        out
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked_parameters: 0,
        excluded_pairs,
    };
    let mut record = |param: ParamRef, analytic: f64, numeric: f64| {
        let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
        report.checked_parameters += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(param);
            report.analytic_at_worst = analytic;
            report.numeric_at_worst = numeric;
        }
    };

    let vocab_len = enc.vocab().len();
    for row in 0..vocab_len {
        for col in 0..dim {
            let mut diff = 0.0;
            for p in &pairs {
                let rows = &fwd.rows[p.question];
                let count = rows.iter().filter(|&&r| r == row).count();
                if count == 0 {
                    continue;
                }
                let coef = count as f64 / rows.len() as f64;
                let t = &fwd.texts[p.question];
                let (vp, vn) = (&fwd.images[p.positive], &fwd.images[p.negative]);
                let up = hinge_at(&bump(t, col, epsilon * coef), vp, vn)?;
                let down = hinge_at(&bump(t, col, -epsilon * coef), vp, vn)?;
                diff += up - down;
            }
            record(
                ParamRef::TextEmbed { row, col },
                grad.text_embed[row * dim + col],
                diff / (2.0 * epsilon),
            );
        }
    }
    for row in 0..TINY_FEATURE_LEN {
        for col in 0..dim {
            let mut diff = 0.0;
            for p in &pairs {
                let (xp, xn) = (set.features[p.positive][row], set.features[p.negative][row]);
                if xp == 0.0 && xn == 0.0 {
                    continue;
                }
                let t = &fwd.texts[p.question];
                let (vp, vn) = (&fwd.images[p.positive], &fwd.images[p.negative]);
                let same = p.positive == p.negative;
                let up = hinge_at(
                    t,
                    &bump(vp, col, epsilon * xp),
                    &bump(vn, col, if same { epsilon * xp } else { epsilon * xn }),
                )?;
                let down = hinge_at(
                    t,
                    &bump(vp, col, -epsilon * xp),
                    &bump(vn, col, if same { -epsilon * xp } else { -epsilon * xn }),
                )?;
                diff += up - down;
            }
            record(
                ParamRef::ImageProj { row, col },
                grad.image_proj[row * dim + col],
                diff / (2.0 * epsilon),
            );
        }
    }
    Ok(report)
}

/// Builds the training corpus: for each usable example, re-partition the
/// instance image and sample its pairs with a per-instance seed.
pub fn assemble_pairs(
    instances: &[VqaInstance],
    examples: &[SupervisionExample],
    cap: usize,
    seed: u64,
) -> Result<(PairSet, Vec<ContrastivePair>), TrainError> {
    let by_id: std::collections::HashMap<&str, &VqaInstance> =
        instances.iter().map(|i| (i.instance_id.as_str(), i)).collect();
    let prepared: Vec<Result<(String, Vec<SubImage>, Vec<ContrastivePair>), TrainError>> = examples
        .par_iter()
        .filter(|e| e.usable)
        .map(|ex| {
            let fail = |message: String| TrainError::Instance {
                instance_id: ex.instance_id.clone(),
                message,
            };
            let inst = by_id
                .get(ex.instance_id.as_str())
                .ok_or_else(|| fail("not in dataset".into()))?;
            let pairs = make_pairs(
                ex,
                cap,
                derive_seed(seed, SeedPurpose::PairSampling, string_key(&ex.instance_id)),
            );
            let image = inst.load_image().map_err(|e| fail(e.to_string()))?;
            let grid = GridSpec::new(ex.grid_n).map_err(|e| fail(e.to_string()))?;
            let subs = partition(&image, &grid).map_err(|e| fail(e.to_string()))?;
            // keep only the cells the pairs touch
            let subs = subs
                .into_iter()
                .map(|s| {
                    let used = pairs
                        .iter()
                        .any(|p| p.positive == s.region.linear_index || p.negative == s.region.linear_index);
                    if used {
                        s
                    } else {
                        SubImage {
                            region: s.region,
                            image: crate::imaging::RasterImage::filled(1, 1, [0, 0, 0]).expect("1x1"),
                        }
                    }
                })
                .collect();
            Ok((ex.question.clone(), subs, pairs))
        })
        .collect();
    let mut set = PairSet::new();
    let mut all_pairs = Vec::new();
    for item in prepared {
        let (question, subs, pairs) = item?;
        set.add_instance(&question, &subs, &pairs)
            .map_err(|e| TrainError::Instance {
                instance_id: pairs.first().map(|p| p.instance_id.clone()).unwrap_or_default(),
                message: e.to_string(),
            })?;
        all_pairs.extend(pairs);
    }
    Ok((set, all_pairs))
}

pub const ENCODER_FORMAT: &str = "semclip-tiny-encoder/1";

/// Flat JSON form of a trained encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedEncoder {
    pub format: String,
    pub dim: usize,
    pub input_side: u32,
    pub feature_len: usize,
    pub vocab: Vec<String>,
    pub text_embed: Vec<f64>,
    pub image_proj: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log: Option<TrainingLog>,
}

impl SavedEncoder {
    pub fn new(enc: &TinyBiEncoder, config: Option<TrainConfig>, log: Option<TrainingLog>) -> Self {
        Self {
            format: ENCODER_FORMAT.into(),
            dim: enc.dim(),
            input_side: crate::scoring::TINY_INPUT_SIDE,
            feature_len: TINY_FEATURE_LEN,
            vocab: enc.vocab().to_vec(),
            text_embed: enc.text_embed().to_vec(),
            image_proj: enc.image_proj().to_vec(),
            config,
            log,
        }
    }

    pub fn encoder(&self) -> Result<TinyBiEncoder, TrainError> {
        if self.format != ENCODER_FORMAT
            || self.input_side != crate::scoring::TINY_INPUT_SIDE
            || self.feature_len != TINY_FEATURE_LEN
        {
            return Err(TrainError::Io(format!("unsupported encoder format {}", self.format)));
        }
        TinyBiEncoder::from_parts(
            self.vocab.clone(),
            self.dim,
            self.text_embed.clone(),
            self.image_proj.clone(),
        )
        .map_err(|e| TrainError::Io(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let text = serde_json::to_string(self).expect("encoder serializes");
        std::fs::write(path, text).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
    }
}
