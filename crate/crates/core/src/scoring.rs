//! Question-to-sub-image relevance scoring.
//!
//! Every scorer reduces to cosine similarity between a text embedding and an
//! image embedding. Embeddings come from an [`EncoderProvider`]: either an
//! external model reached over the wire protocol, or the built-in
//! [`TinyBiEncoder`] trained with distant supervision.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{self, RasterImage, SubImage};

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("zero-norm embedding")]
    ZeroVector,
    #[error("embedding must have at least one finite component")]
    InvalidEmbedding,
    #[error("question has no tokens")]
    EmptyQuestion,
    #[error("no sub-images to score")]
    NoSubImages,
    #[error("scoring sub-image {index}: {source}")]
    SubImage {
        index: usize,
        #[source]
        source: Box<ScoringError>,
    },
    #[error("encoder provider: {0}")]
    Provider(String),
    #[error("imaging: {0}")]
    Imaging(#[from] imaging::ImagingError),
    #[error("encoder parameters: {0}")]
    Parameters(String),
}

pub type Result<T, E = ScoringError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(ScoringError::InvalidEmbedding);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|v| v * c).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelevanceScore(pub f64);

impl RelevanceScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    /// Cosine over VLM-internal features supplied by an external provider.
    FeatureCosine,
    /// Cosine over a pretrained dual encoder's embeddings.
    PretrainedCosine,
    /// Cosine over the distantly supervised tiny bi-encoder.
    TrainedBiencoder,
    /// Scores taken from ground-truth cell labels; only for synthetic data.
    GroundTruth,
}

impl std::fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScorerKind::FeatureCosine => "feature_cosine",
            ScorerKind::PretrainedCosine => "pretrained_cosine",
            ScorerKind::TrainedBiencoder => "trained_biencoder",
            ScorerKind::GroundTruth => "ground_truth",
        })
    }
}

/// Cosine similarity on raw slices. Callers guarantee equal length.
pub(crate) fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(ScoringError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

pub fn cosine(a: &Embedding, b: &Embedding) -> Result<RelevanceScore> {
    if a.dim() != b.dim() {
        return Err(ScoringError::DimMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    cosine_slices(a.values(), b.values()).map(RelevanceScore)
}

/// Produces text and image embeddings in a shared space. Implementations
/// must be deterministic: the same input always yields the same vector.
pub trait EncoderProvider: Send + Sync {
    fn embed_text(&self, question: &str) -> Result<Embedding>;
    fn embed_image(&self, image: &RasterImage) -> Result<Embedding>;
}

/// Scores each image against a question. Output order matches input order.
pub trait RelevanceScorer: Send + Sync {
    fn kind(&self) -> ScorerKind;
    fn score_images(&self, question: &str, images: &[&RasterImage]) -> Result<Vec<RelevanceScore>>;
}

/// Cosine scorer over any encoder provider.
pub struct CosineScorer<P> {
    kind: ScorerKind,
    provider: P,
    input_resolution: Option<(u32, u32)>,
}

impl<P: EncoderProvider> CosineScorer<P> {
    /// `input_resolution`, when set, resizes every sub-image before it is
    /// handed to the provider.
    pub fn new(kind: ScorerKind, provider: P, input_resolution: Option<(u32, u32)>) -> Self {
        Self {
            kind,
            provider,
            input_resolution,
        }
    }

    pub fn provider(&self) -> &P {
        &self.provider
    }
}

impl<P: EncoderProvider> RelevanceScorer for CosineScorer<P> {
    fn kind(&self) -> ScorerKind {
        self.kind
    }

    fn score_images(&self, question: &str, images: &[&RasterImage]) -> Result<Vec<RelevanceScore>> {
        if images.is_empty() {
            return Err(ScoringError::NoSubImages);
        }
        let text = self.provider.embed_text(question)?;
        images
            .iter()
            .enumerate()
            .map(|(index, img)| {
                let wrap = |e: ScoringError| ScoringError::SubImage {
                    index,
                    source: Box::new(e),
                };
                let emb = match self.input_resolution {
                    Some((w, h)) => {
                        let small = imaging::resize(img, w, h).map_err(|e| wrap(e.into()))?;
                        self.provider.embed_image(&small)
                    }
                    None => self.provider.embed_image(img),
                }
                .map_err(wrap)?;
                cosine(&text, &emb).map_err(wrap)
            })
            .collect()
    }
}

/// One relevance score per sub-image, in the given order.
pub fn score_subimages(
    question: &str,
    subimages: &[SubImage],
    scorer: &dyn RelevanceScorer,
) -> Result<Vec<RelevanceScore>> {
    let images: Vec<&RasterImage> = subimages.iter().map(|s| &s.image).collect();
    scorer.score_images(question, &images)
}

/// Lowercase and split on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

pub const UNK_TOKEN: &str = "<unk>";
/// Side of the square thumbnail the image tower sees.
pub const TINY_INPUT_SIDE: u32 = 16;
/// Flattened thumbnail length: 16 × 16 × RGB.
pub const TINY_FEATURE_LEN: usize = (TINY_INPUT_SIDE * TINY_INPUT_SIDE) as usize * RasterImage::CHANNELS;

/// Image tower input: a 16×16 bilinear thumbnail, bytes scaled to [0, 1],
/// flattened row-major RGB.
pub fn tiny_image_features(image: &RasterImage) -> Result<Vec<f64>> {
    let thumb = imaging::resize(image, TINY_INPUT_SIDE, TINY_INPUT_SIDE)?;
    Ok(thumb.pixels().iter().map(|&b| b as f64 / 255.0).collect())
}

/// Bag-of-tokens text tower plus a linear image projection, sharing a
/// `dim`-dimensional space.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyBiEncoder {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    /// `vocab.len() × dim`, row-major. Row 0 is the UNK row.
    text_embed: Vec<f64>,
    /// `TINY_FEATURE_LEN × dim`, row-major.
    image_proj: Vec<f64>,
}

impl TinyBiEncoder {
    /// Gaussian(0, std²) initialization. `words` need not be unique; UNK is
    /// always row 0.
    pub fn init<I, S>(words: I, dim: usize, std: f64, seed: u64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let vocab = Self::build_vocab(words);
        let normal = Normal::new(0.0, std).map_err(|e| ScoringError::Parameters(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text_embed = (0..vocab.len() * dim).map(|_| normal.sample(&mut rng)).collect();
        let image_proj = (0..TINY_FEATURE_LEN * dim).map(|_| normal.sample(&mut rng)).collect();
        Self::from_parts(vocab, dim, text_embed, image_proj)
    }

    fn build_vocab<I, S>(words: I) -> Vec<String>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut words: Vec<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| w != UNK_TOKEN)
            .collect();
        words.sort();
        words.dedup();
        std::iter::once(UNK_TOKEN.to_string()).chain(words).collect()
    }

    /// Builds an encoder from explicit parameters. `vocab[0]` must be UNK.
    pub fn from_parts(vocab: Vec<String>, dim: usize, text_embed: Vec<f64>, image_proj: Vec<f64>) -> Result<Self> {
        if dim < 2 {
            return Err(ScoringError::Parameters(format!("dim must be >= 2, got {dim}")));
        }
        if vocab.first().map(String::as_str) != Some(UNK_TOKEN) {
            return Err(ScoringError::Parameters("vocab[0] must be <unk>".into()));
        }
        if text_embed.len() != vocab.len() * dim || image_proj.len() != TINY_FEATURE_LEN * dim {
            return Err(ScoringError::Parameters("parameter shape mismatch".into()));
        }
        if text_embed.iter().chain(&image_proj).any(|v| !v.is_finite()) {
            return Err(ScoringError::Parameters("non-finite parameter".into()));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, w) in vocab.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(ScoringError::Parameters(format!("duplicate vocab entry {w}")));
            }
        }
        Ok(Self {
            vocab,
            index,
            dim,
            text_embed,
            image_proj,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn text_embed(&self) -> &[f64] {
        &self.text_embed
    }

    pub fn image_proj(&self) -> &[f64] {
        &self.image_proj
    }

    pub(crate) fn text_embed_mut(&mut self) -> &mut [f64] {
        &mut self.text_embed
    }

    pub(crate) fn image_proj_mut(&mut self) -> &mut [f64] {
        &mut self.image_proj
    }

    pub fn parameter_count(&self) -> usize {
        self.text_embed.len() + self.image_proj.len()
    }

    pub fn text_row(&self, row: usize) -> &[f64] {
        &self.text_embed[row * self.dim..(row + 1) * self.dim]
    }

    /// Vocabulary rows for each token, UNK (row 0) for unknown tokens.
    pub fn token_rows(&self, question: &str) -> Vec<usize> {
        tokenize(question)
            .iter()
            .map(|t| self.index.get(t).copied().unwrap_or(0))
            .collect()
    }

    /// Mean of the token rows.
    pub fn encode_text(&self, question: &str) -> Result<Embedding> {
        let rows = self.token_rows(question);
        if rows.is_empty() {
            return Err(ScoringError::EmptyQuestion);
        }
        Embedding::new(self.mean_rows(&rows))
    }

    pub(crate) fn mean_rows(&self, rows: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &r in rows {
            for (o, v) in out.iter_mut().zip(self.text_row(r)) {
                *o += v;
            }
        }
        let n = rows.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    /// Projection of an already-extracted feature vector.
    pub fn project_features(&self, features: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (x, row) in features.iter().zip(self.image_proj.chunks_exact(self.dim)) {
            if *x == 0.0 {
                continue;
            }
            for (o, p) in out.iter_mut().zip(row) {
                *o += x * p;
            }
        }
        out
    }

    /// Thumbnail features projected into the shared space. May be the zero
    /// vector (e.g. for an all-black image); cosine rejects that later.
    pub fn encode_image(&self, image: &RasterImage) -> Result<Embedding> {
        let features = tiny_image_features(image)?;
        Embedding::new(self.project_features(&features))
    }
}

impl EncoderProvider for TinyBiEncoder {
    fn embed_text(&self, question: &str) -> Result<Embedding> {
        self.encode_text(question)
    }

    fn embed_image(&self, image: &RasterImage) -> Result<Embedding> {
        self.encode_image(image)
    }
}

/// The trained-bi-encoder scorer. The encoder resizes internally.
pub fn tiny_scorer(encoder: TinyBiEncoder) -> CosineScorer<TinyBiEncoder> {
    CosineScorer::new(ScorerKind::TrainedBiencoder, encoder, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_cases() {
        let v = emb(&[0.3, -2.0, 5.0]);
        assert!((cosine(&v, &v).unwrap().0 - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&emb(&[1.0, 0.0]), &emb(&[0.0, 1.0])).unwrap().0, 0.0);
        // 32 / (sqrt(14) * sqrt(77))
        let expected = 32.0 / (14f64.sqrt() * 77f64.sqrt());
        let got = cosine(&emb(&[1.0, 2.0, 3.0]), &emb(&[4.0, 5.0, 6.0])).unwrap().0;
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.974_631_846).abs() < 1e-9);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine(&emb(&[1.0]), &emb(&[1.0, 2.0])),
            Err(ScoringError::DimMismatch { left: 1, right: 2 })
        ));
        assert!(matches!(
            cosine(&emb(&[0.0, 0.0]), &emb(&[1.0, 2.0])),
            Err(ScoringError::ZeroVector)
        ));
        assert!(Embedding::new(vec![]).is_err());
        assert!(Embedding::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn tokenizer_splits_on_non_alphanumerics() {
        assert_eq!(
            tokenize("What color is the Star ?"),
            vec!["what", "color", "is", "the", "star"]
        );
        assert!(tokenize(" ?! ").is_empty());
    }

    fn small_encoder() -> TinyBiEncoder {
        TinyBiEncoder::init(["red", "circle", "what"], 4, 0.5, 11).unwrap()
    }

    #[test]
    fn text_tower_means_rows() {
        let enc = small_encoder();
        let red = enc.text_row(enc.token_rows("red")[0]).to_vec();
        let circle = enc.text_row(enc.token_rows("circle")[0]).to_vec();
        assert_eq!(enc.encode_text("red").unwrap().values(), red.as_slice());
        let twice = enc.encode_text("red red").unwrap();
        for (a, b) in twice.values().iter().zip(&red) {
            assert!((a - b).abs() < 1e-15);
        }
        let both = enc.encode_text("Red, circle").unwrap();
        for ((v, a), b) in both.values().iter().zip(&red).zip(&circle) {
            assert!((v - (a + b) / 2.0).abs() < 1e-15);
        }
        // unknown tokens hit the UNK row
        assert_eq!(enc.token_rows("zebra"), vec![0]);
        assert!(matches!(enc.encode_text("?? "), Err(ScoringError::EmptyQuestion)));
    }

    #[test]
    fn image_tower_cases() {
        let enc = small_encoder();
        let black = RasterImage::filled(40, 30, [0, 0, 0]).unwrap();
        let e = enc.encode_image(&black).unwrap();
        assert!(e.values().iter().all(|v| *v == 0.0));

        let img = RasterImage::filled(33, 33, [10, 200, 77]).unwrap();
        assert_eq!(enc.encode_image(&img).unwrap(), enc.encode_image(&img).unwrap());
    }

    #[test]
    fn image_tower_hand_multiplied_projection() {
        // 2-dim projection: column 0 all ones, column 1 alternating 1, 0.
        let dim = 2;
        let mut proj = vec![0.0; TINY_FEATURE_LEN * dim];
        for i in 0..TINY_FEATURE_LEN {
            proj[i * dim] = 1.0;
            proj[i * dim + 1] = if i % 2 == 0 { 1.0 } else { 0.0 };
        }
        let enc = TinyBiEncoder::from_parts(vec![UNK_TOKEN.into()], dim, vec![0.1, 0.2], proj).unwrap();
        let img = RasterImage::filled(50, 20, [51, 51, 51]).unwrap();
        let x = 51.0 / 255.0;
        let e = enc.encode_image(&img).unwrap();
        assert!((e.values()[0] - x * 768.0).abs() < 1e-9);
        assert!((e.values()[1] - x * 384.0).abs() < 1e-9);
    }

    #[test]
    fn duplicate_subimages_score_equally() {
        let scorer = tiny_scorer(small_encoder());
        let img = RasterImage::filled(20, 20, [90, 10, 240]).unwrap();
        let s = scorer.score_images("what is red", &[&img, &img]).unwrap();
        assert_eq!(s[0], s[1]);
        assert!(matches!(
            scorer.score_images("red", &[]),
            Err(ScoringError::NoSubImages)
        ));
    }

    #[test]
    fn zero_projection_is_rejected_with_index() {
        let enc = small_encoder();
        let zeroed = TinyBiEncoder::from_parts(
            enc.vocab().to_vec(),
            enc.dim(),
            enc.text_embed().to_vec(),
            vec![0.0; TINY_FEATURE_LEN * enc.dim()],
        )
        .unwrap();
        let img = RasterImage::filled(20, 20, [90, 10, 240]).unwrap();
        let err = tiny_scorer(zeroed).score_images("red", &[&img]).unwrap_err();
        match err {
            ScoringError::SubImage { index, source } => {
                assert_eq!(index, 0);
                assert!(matches!(*source, ScoringError::ZeroVector));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(TinyBiEncoder::init(["a"], 1, 0.02, 0).is_err());
        assert!(TinyBiEncoder::from_parts(vec!["a".into()], 2, vec![0.0; 2], vec![0.0; 1536]).is_err());
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 5)
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_bounded(a in vec_strategy(), b in vec_strategy()) {
            prop_assume!(a.iter().any(|v| *v != 0.0) && b.iter().any(|v| *v != 0.0));
            let (a, b) = (emb(&a), emb(&b));
            let ab = cosine(&a, &b).unwrap().0;
            let ba = cosine(&b, &a).unwrap().0;
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&ab));
        }

        #[test]
        fn ranking_invariant_under_positive_scaling(
            q in vec_strategy(),
            imgs in prop::collection::vec(vec_strategy(), 2..8),
            scales in prop::collection::vec(0.01f64..100.0, 8),
        ) {
            prop_assume!(q.iter().any(|v| v.abs() > 1e-3));
            prop_assume!(imgs.iter().all(|v| v.iter().any(|x| x.abs() > 1e-3)));
            let q = emb(&q);
            let plain: Vec<f64> = imgs.iter().map(|v| cosine(&q, &emb(v)).unwrap().0).collect();
            let scaled: Vec<f64> = imgs
                .iter()
                .zip(&scales)
                .map(|(v, c)| cosine(&q, &emb(v).scaled(*c).unwrap()).unwrap().0)
                .collect();
            let argsort = |s: &[f64]| {
                let mut idx: Vec<usize> = (0..s.len()).collect();
                idx.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));
                idx
            };
            // near-ties can legitimately swap under rounding
            let mut sorted = plain.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|w| w[1] - w[0] > 1e-9));
            prop_assert_eq!(argsort(&plain), argsort(&scaled));
        }
    }
}
