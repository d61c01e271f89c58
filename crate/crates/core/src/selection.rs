//! Sub-image selection strategies and prompt composition.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use std::sync::Arc;

use crate::backends::{Answerer, BackendError, Query, View, ViewSource};
use crate::config::{answers_match, normalize_answer};
use crate::imaging::{partition, GridSpec, ImagingError, RasterImage, SubImage};
use crate::scoring::{RelevanceScore, ScorerKind};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("k={k} is out of range for {available} candidates")]
    KOutOfRange { k: usize, available: usize },
    #[error("score {index} is not finite")]
    NonFiniteScore { index: usize },
    #[error("selected index {index} is out of range for {available} sub-images")]
    BadIndex { index: usize, available: usize },
    #[error("composition would contain no images")]
    EmptyComposition,
    #[error("no responses to vote over")]
    NoResponses,
    #[error("answerer failed on sub-image {index}: {source}")]
    Answerer {
        index: usize,
        #[source]
        source: BackendError,
        /// Correctness of every query that did complete.
        partial: Vec<Option<bool>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum SelectionStrategy {
    #[serde(rename = "topk")]
    TopK {
        k: usize,
        scorer: ScorerKind,
    },
    Random {
        k: usize,
    },
    Optimal,
    #[serde(rename = "majority")]
    MajorityVote,
    #[serde(rename = "none")]
    NoSelection,
}

impl SelectionStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            SelectionStrategy::TopK { .. } => "topk",
            SelectionStrategy::Random { .. } => "random",
            SelectionStrategy::Optimal => "optimal",
            SelectionStrategy::MajorityVote => "majority",
            SelectionStrategy::NoSelection => "none",
        }
    }

    pub fn k(&self) -> Option<usize> {
        match self {
            SelectionStrategy::TopK { k, .. } | SelectionStrategy::Random { k } => Some(*k),
            _ => None,
        }
    }
}

impl std::fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SelectionStrategy::TopK { k, scorer } => write!(f, "topk(k={k},{scorer})"),
            SelectionStrategy::Random { k } => write!(f, "random(k={k})"),
            other => f.write_str(other.name()),
        }
    }
}

/// Audit record of one selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    #[serde(flatten)]
    pub strategy: SelectionStrategy,
    pub chosen: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<RelevanceScore>>,
}

/// Indices of the `k` highest scores, best first; equal scores keep the
/// lower index first.
pub fn select_topk(scores: &[RelevanceScore], k: usize) -> Result<Vec<usize>, SelectionError> {
    if k < 1 || k > scores.len() {
        return Err(SelectionError::KOutOfRange {
            k,
            available: scores.len(),
        });
    }
    if let Some(index) = scores.iter().position(|s| !s.0.is_finite()) {
        return Err(SelectionError::NonFiniteScore { index });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].0.total_cmp(&scores[a].0).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// `k` distinct indices drawn uniformly from `0..count` with a seeded
/// generator.
pub fn select_random(count: usize, k: usize, seed: u64) -> Result<Vec<usize>, SelectionError> {
    if k > count {
        return Err(SelectionError::KOutOfRange { k, available: count });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, count, k).into_vec())
}

/// The overview and the grid cells of one instance as views.
pub fn grid_views(
    instance_id: &str,
    image: Arc<RasterImage>,
    grid: &GridSpec,
) -> Result<(View, Vec<View>), ImagingError> {
    let subs = partition(&image, grid)?;
    Ok((overview_view(instance_id, image), subimage_views(instance_id, subs)))
}

pub fn overview_view(instance_id: &str, image: Arc<RasterImage>) -> View {
    let source = ViewSource {
        instance_id: instance_id.to_string(),
        bbox: image.full_bbox(),
    };
    View::new(image, source)
}

pub fn subimage_views(instance_id: &str, subs: Vec<SubImage>) -> Vec<View> {
    subs.into_iter()
        .map(|s| {
            View::new(
                Arc::new(s.image),
                ViewSource {
                    instance_id: instance_id.to_string(),
                    bbox: s.region.bbox,
                },
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalOutcome {
    /// Lowest index whose composition answered correctly.
    pub best_index: Option<usize>,
    pub answerable: bool,
    pub per_index_correct: Vec<bool>,
    pub responses: Vec<String>,
}

/// Inputs shared by every per-sub-image query of one instance.
pub struct InstanceQuery<'a> {
    pub instance_id: &'a str,
    pub question: &'a str,
    pub gold: &'a str,
    pub options: Option<&'a [String]>,
    pub overview: &'a View,
    pub subimages: &'a [View],
    pub temperature: f64,
}

impl InstanceQuery<'_> {
    /// Overview plus sub-image `i`, answered. Request ids encode the
    /// protocol tag and the sub-image index.
    fn ask_with(&self, answerer: &dyn Answerer, tag: &str, index: usize) -> Result<String, BackendError> {
        let views = [self.overview.clone(), self.subimages[index].clone()];
        answerer.answer(&Query {
            request_id: format!("{}:{tag}:{index}", self.instance_id),
            question: self.question,
            options: self.options,
            views: &views,
            temperature: self.temperature,
        })
    }

    /// One response per sub-image, each paired with the overview. Queries
    /// may run concurrently; results are index-ordered.
    pub fn ask_each(&self, answerer: &dyn Answerer, tag: &str, parallel: bool) -> Vec<Result<String, BackendError>> {
        let run = |i| self.ask_with(answerer, tag, i);
        if parallel {
            (0..self.subimages.len()).into_par_iter().map(run).collect()
        } else {
            (0..self.subimages.len()).map(run).collect()
        }
    }
}

/// Queries every overview + sub-image composition; the instance is
/// answerable when any of them is correct.
pub fn select_optimal(
    query: &InstanceQuery<'_>,
    answerer: &dyn Answerer,
    parallel: bool,
) -> Result<OptimalOutcome, SelectionError> {
    let results = query.ask_each(answerer, "opt", parallel);
    let partial: Vec<Option<bool>> = results
        .iter()
        .map(|r| r.as_ref().ok().map(|a| answers_match(a, query.gold, query.options)))
        .collect();
    let mut responses = Vec::with_capacity(results.len());
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(a) => responses.push(a),
            Err(source) => return Err(SelectionError::Answerer { index, source, partial }),
        }
    }
    let per_index_correct: Vec<bool> = partial.into_iter().map(|c| c.unwrap_or(false)).collect();
    let best_index = per_index_correct.iter().position(|&c| c);
    Ok(OptimalOutcome {
        best_index,
        answerable: best_index.is_some(),
        per_index_correct,
        responses,
    })
}

/// Modal response after normalization; ties go to the response seen first.
/// Returns the normalized text.
pub fn majority_vote<S: AsRef<str>>(responses: &[S]) -> Result<String, SelectionError> {
    if responses.is_empty() {
        return Err(SelectionError::NoResponses);
    }
    let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
    for (i, r) in responses.iter().enumerate() {
        let key = normalize_answer(r.as_ref(), None).text;
        counts.entry(key).or_insert((0, i)).0 += 1;
    }
    let (winner, _) = counts
        .into_iter()
        .max_by(|(_, (ca, fa)), (_, (cb, fb))| ca.cmp(cb).then(fb.cmp(fa)))
        .expect("non-empty");
    Ok(winner)
}

/// What the answerer will see, in order.
#[derive(Debug, Clone)]
pub struct PromptComposition {
    pub include_overview: bool,
    /// Sub-image indices in selection order.
    pub selected: Vec<usize>,
    pub views: Vec<View>,
}

impl PromptComposition {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// Overview first (when included), then the selected sub-images in the
/// order the selection ranked them.
pub fn compose_prompt(
    overview: &View,
    selection: &SelectionResult,
    subimages: &[View],
    include_overview: bool,
) -> Result<PromptComposition, SelectionError> {
    let mut views = Vec::with_capacity(selection.chosen.len() + 1);
    if include_overview {
        views.push(overview.clone());
    }
    for &index in &selection.chosen {
        let view = subimages.get(index).ok_or(SelectionError::BadIndex {
            index,
            available: subimages.len(),
        })?;
        views.push(view.clone());
    }
    if views.is_empty() {
        return Err(SelectionError::EmptyComposition);
    }
    Ok(PromptComposition {
        include_overview,
        selected: selection.chosen.clone(),
        views,
    })
}
