//! Deterministic oracle answerer for synthetic scenes.
//!
//! The oracle never looks at pixels. It resolves each image in a
//! composition to its provenance (instance + bounding box), counts the
//! target shape's pixels inside that box, scales the count to the model's
//! fixed input resolution, and treats the shape as readable when the
//! scaled count reaches `min_visible_pixels` in at least one image.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::external::decode_png_base64;
use super::wire::{AnswerRequest, AnswerResponse, Outcome};
use super::{Answerer, BackendError, Query, ViewSource};
use crate::imaging::{crop, partition, BBox, GridSpec};
use crate::synthbench::{render, Placement, SynthInstance, SynthQuestion, SynthScene};

/// The oracle's fixed wrong answer.
pub const UNKNOWN_ANSWER: &str = "unknown";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyOracleConfig {
    pub min_visible_pixels: u64,
    /// Side of the square the model resizes every image to.
    pub input_resolution: u32,
}

impl Default for ToyOracleConfig {
    fn default() -> Self {
        Self {
            min_visible_pixels: 64,
            input_resolution: 224,
        }
    }
}

/// Pixels a shape occupies after its view is resized to
/// `resolution × resolution`: `⌊count · resolution² / area(view)⌋`.
pub fn visible_pixels(count: u64, view: &BBox, resolution: u32) -> u64 {
    let area = view.area();
    if area == 0 {
        return 0;
    }
    let scaled = count as u128 * (resolution as u128).pow(2) / area as u128;
    scaled as u64
}

/// Scene geometry by instance id, plus image fingerprints for requests that
/// arrive as encoded pixels.
#[derive(Debug, Default, Clone)]
pub struct SceneRegistry {
    scenes: HashMap<String, Arc<SynthScene>>,
    /// Pixel-identical views (blank cells, say) share a fingerprint.
    fingerprints: HashMap<String, Vec<ViewSource>>,
}

impl SceneRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_scene(&mut self, instance_id: impl Into<String>, scene: Arc<SynthScene>) {
        self.scenes.insert(instance_id.into(), scene);
    }

    pub fn register_instances<'a>(&mut self, instances: impl IntoIterator<Item = &'a SynthInstance>) {
        for inst in instances {
            self.register_scene(inst.instance_id.clone(), inst.scene.clone());
        }
    }

    /// Makes a specific view resolvable from its pixels alone.
    pub fn register_view(&mut self, fingerprint: String, source: ViewSource) {
        let views = self.fingerprints.entry(fingerprint).or_default();
        if !views.contains(&source) {
            views.push(source);
        }
    }

    /// Registers the full render and every cell of an `n × n` grid so that
    /// wire requests built from them can be resolved.
    pub fn register_renders(&mut self, instance_id: &str, grid: &GridSpec) -> Result<(), BackendError> {
        let scene = self
            .scenes
            .get(instance_id)
            .cloned()
            .ok_or_else(|| BackendError::UnregisteredImage(instance_id.to_string()))?;
        let image = render(&scene);
        let full = image.full_bbox();
        let source = |bbox| ViewSource {
            instance_id: instance_id.to_string(),
            bbox,
        };
        self.register_view(image.fingerprint(), source(full));
        for sub in partition(&image, grid).map_err(|e| BackendError::InvalidRequest(e.to_string()))? {
            self.register_view(sub.image.fingerprint(), source(sub.region.bbox));
        }
        Ok(())
    }

    /// Registers an arbitrary crop of a registered scene.
    pub fn register_crop(&mut self, instance_id: &str, bbox: BBox) -> Result<(), BackendError> {
        let scene = self
            .scenes
            .get(instance_id)
            .ok_or_else(|| BackendError::UnregisteredImage(instance_id.to_string()))?;
        let image = crop(&render(scene), &bbox).map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        self.register_view(
            image.fingerprint(),
            ViewSource {
                instance_id: instance_id.to_string(),
                bbox,
            },
        );
        Ok(())
    }

    pub fn scene(&self, instance_id: &str) -> Option<&Arc<SynthScene>> {
        self.scenes.get(instance_id)
    }

    pub fn resolve(&self, fingerprint: &str) -> &[ViewSource] {
        self.fingerprints
            .get(fingerprint)
            .map(Vec::as_slice)
            .unwrap_or_default()
    }

    /// Resolves every image of one request, preferring an instance that all
    /// of them can belong to.
    pub fn resolve_all(&self, fingerprints: &[String]) -> Result<Vec<ViewSource>, BackendError> {
        let candidates = fingerprints
            .iter()
            .map(|fp| match self.resolve(fp) {
                [] => Err(BackendError::UnregisteredImage(fp.clone())),
                views => Ok(views),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let shared = candidates.first().and_then(|first| {
            first.iter().map(|v| &v.instance_id).find(|id| {
                candidates
                    .iter()
                    .all(|views| views.iter().any(|v| &v.instance_id == *id))
            })
        });
        Ok(candidates
            .iter()
            .map(|views| {
                shared
                    .and_then(|id| views.iter().find(|v| &v.instance_id == id))
                    .unwrap_or(&views[0])
                    .clone()
            })
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct ToyOracle {
    config: ToyOracleConfig,
    registry: SceneRegistry,
}

impl ToyOracle {
    pub fn new(config: ToyOracleConfig, registry: SceneRegistry) -> Self {
        Self { config, registry }
    }

    pub fn config(&self) -> &ToyOracleConfig {
        &self.config
    }

    pub fn registry(&self) -> &SceneRegistry {
        &self.registry
    }

    fn readable(&self, placement: &Placement, view: &BBox) -> bool {
        let count = placement.pixel_count_in(view);
        visible_pixels(count, view, self.config.input_resolution) >= self.config.min_visible_pixels
    }

    /// Answers from provenance alone. All sources must belong to one
    /// registered instance.
    pub fn answer_sources(&self, question: &str, sources: &[ViewSource]) -> Result<String, BackendError> {
        let first = sources
            .first()
            .ok_or_else(|| BackendError::InvalidRequest("composition is empty".into()))?;
        if sources.iter().any(|s| s.instance_id != first.instance_id) {
            return Err(BackendError::InvalidRequest(
                "composition mixes images from different instances".into(),
            ));
        }
        let scene = self
            .registry
            .scene(&first.instance_id)
            .ok_or_else(|| BackendError::UnregisteredImage(first.instance_id.clone()))?;
        let parsed =
            SynthQuestion::parse(question).ok_or_else(|| BackendError::UnsupportedQuestion(question.to_string()))?;
        let seen = |p: &Placement| sources.iter().any(|s| self.readable(p, &s.bbox));
        let answer = match parsed {
            SynthQuestion::CountShapes => scene.placements.iter().filter(|p| seen(p)).count().to_string(),
            q => match q.subject(scene) {
                Some(p) if seen(p) => match q {
                    SynthQuestion::ColorOf { .. } => p.color.name().to_string(),
                    _ => p.shape.name().to_string(),
                },
                _ => UNKNOWN_ANSWER.to_string(),
            },
        };
        Ok(answer)
    }

    /// Wire-level entry point: images are resolved through their
    /// fingerprints. Failures become error responses.
    pub fn answer_request(&self, request: &AnswerRequest) -> AnswerResponse {
        let outcome = request.validate().map_err(BackendError::InvalidRequest).and_then(|()| {
            let fingerprints = request
                .images
                .iter()
                .map(|payload| decode_png_base64(payload).map(|image| image.fingerprint()))
                .collect::<Result<Vec<_>, _>>()?;
            let sources = self.registry.resolve_all(&fingerprints)?;
            self.answer_sources(&request.question, &sources)
        });
        AnswerResponse {
            request_id: request.request_id.clone(),
            outcome: match outcome {
                Ok(a) => Outcome::Ok(a),
                Err(e) => Outcome::Error(e.to_string()),
            },
        }
    }

    /// Handles one line of the stdio protocol.
    pub fn handle_line(&self, line: &str) -> String {
        let response = match serde_json::from_str::<AnswerRequest>(line) {
            Ok(req) => self.answer_request(&req),
            Err(e) => AnswerResponse {
                request_id: serde_json::from_str::<serde_json::Value>(line)
                    .ok()
                    .and_then(|v| v.get("request_id").and_then(|id| id.as_str()).map(str::to_string))
                    .unwrap_or_default(),
                outcome: Outcome::Error(format!("bad request: {e}")),
            },
        };
        serde_json::to_string(&response).expect("response serializes")
    }
}

impl Answerer for ToyOracle {
    fn answer(&self, query: &Query<'_>) -> Result<String, BackendError> {
        let sources: Vec<ViewSource> = query.views.iter().map(|v| v.source.clone()).collect();
        self.answer_sources(query.question, &sources)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthbench::{NamedColor, Shape, BACKGROUND};

    fn scene_with(target: Placement, others: Vec<Placement>) -> Arc<SynthScene> {
        let mut placements = vec![target];
        placements.extend(others);
        Arc::new(SynthScene {
            width: 1344,
            height: 1344,
            grid_n: 3,
            background: BACKGROUND,
            placements,
        })
    }

    fn square(cell: usize, size: u32, x: u32, y: u32, color: NamedColor, target: bool) -> Placement {
        Placement {
            cell,
            shape: Shape::Square,
            color,
            size,
            x,
            y,
            target,
        }
    }

    fn oracle(scene: Arc<SynthScene>) -> ToyOracle {
        let mut reg = SceneRegistry::new();
        reg.register_scene("i", scene);
        ToyOracle::new(ToyOracleConfig::default(), reg)
    }

    fn src(bbox: BBox) -> ViewSource {
        ViewSource {
            instance_id: "i".into(),
            bbox,
        }
    }

    const FULL: BBox = BBox::new(0, 0, 1344, 1344);
    const CENTER: BBox = BBox::new(448, 448, 896, 896);
    const CORNER: BBox = BBox::new(0, 0, 448, 448);

    #[test]
    fn visibility_arithmetic() {
        // 40x40 square = 1600 px. Overview: 1600/36 = 44 < 64. Cell: 1600/4 = 400.
        assert_eq!(visible_pixels(1600, &FULL, 224), 44);
        assert_eq!(visible_pixels(1600, &CENTER, 224), 400);
        assert_eq!(visible_pixels(2304, &FULL, 224), 64);
        assert_eq!(visible_pixels(5, &BBox::new(0, 0, 0, 3), 224), 0);
    }

    #[test]
    fn small_target_needs_the_crop() {
        let o = oracle(scene_with(square(4, 40, 600, 600, NamedColor::Red, true), vec![]));
        let q = "What color is the square ?";
        assert_eq!(o.answer_sources(q, &[src(FULL), src(CENTER)]).unwrap(), "red");
        assert_eq!(o.answer_sources(q, &[src(FULL)]).unwrap(), UNKNOWN_ANSWER);
        assert_eq!(o.answer_sources(q, &[src(CORNER)]).unwrap(), UNKNOWN_ANSWER);
        assert_eq!(o.answer_sources(q, &[src(CENTER)]).unwrap(), "red");
    }

    #[test]
    fn large_target_reads_from_overview() {
        let o = oracle(scene_with(square(4, 60, 600, 600, NamedColor::Blue, true), vec![]));
        assert_eq!(
            o.answer_sources("What shape is the blue object?", &[src(FULL)])
                .unwrap(),
            "square"
        );
    }

    #[test]
    fn counting_needs_every_shape_visible() {
        let o = oracle(scene_with(
            square(0, 150, 50, 50, NamedColor::Red, false),
            vec![square(8, 150, 1000, 1000, NamedColor::Blue, false)],
        ));
        let q = "How many shapes are in the image?";
        assert_eq!(o.answer_sources(q, &[src(FULL)]).unwrap(), "2");
        assert_eq!(o.answer_sources(q, &[src(CORNER)]).unwrap(), "1");
    }

    #[test]
    fn rejects_unknown_inputs() {
        let o = oracle(scene_with(square(4, 40, 600, 600, NamedColor::Red, true), vec![]));
        let other = ViewSource {
            instance_id: "nope".into(),
            bbox: FULL,
        };
        assert!(matches!(
            o.answer_sources("What color is the square ?", &[other.clone()]),
            Err(BackendError::UnregisteredImage(_))
        ));
        assert!(matches!(
            o.answer_sources("What color is the square ?", &[src(FULL), other]),
            Err(BackendError::InvalidRequest(_))
        ));
        assert!(matches!(
            o.answer_sources("Is it raining?", &[src(FULL)]),
            Err(BackendError::UnsupportedQuestion(_))
        ));
    }

    #[test]
    fn wire_requests_resolve_through_fingerprints() {
        use base64::Engine;
        let scene = scene_with(square(4, 40, 600, 600, NamedColor::Red, true), vec![]);
        let mut reg = SceneRegistry::new();
        reg.register_scene("i", scene.clone());
        reg.register_renders("i", &GridSpec::new(3).unwrap()).unwrap();
        let o = ToyOracle::new(ToyOracleConfig::default(), reg);
        let image = render(&scene);
        let cells = partition(&image, &GridSpec::new(3).unwrap()).unwrap();
        let b64 = |img: &crate::imaging::RasterImage| {
            base64::engine::general_purpose::STANDARD.encode(img.to_png_bytes().unwrap())
        };
        let req = AnswerRequest {
            request_id: "x".into(),
            question: "What color is the square ?".into(),
            images: vec![b64(&image), b64(&cells[4].image)],
            options: None,
            decode: Default::default(),
        };
        let resp = o.answer_request(&req);
        assert_eq!(resp.request_id, "x");
        assert_eq!(resp.outcome, Outcome::Ok("red".into()));

        let stray = crate::imaging::RasterImage::filled(5, 5, [1, 1, 1]).unwrap();
        let req = AnswerRequest {
            images: vec![b64(&stray)],
            ..req
        };
        assert!(matches!(o.answer_request(&req).outcome, Outcome::Error(_)));

        let line = o.handle_line(r#"{"request_id":"z","question":3}"#);
        assert!(line.contains(r#""request_id":"z""#) && line.contains("error"));
    }

    #[test]
    fn shared_fingerprints_follow_the_other_images() {
        let mut reg = SceneRegistry::new();
        let blank = |id: &str| ViewSource {
            instance_id: id.into(),
            bbox: CORNER,
        };
        reg.register_view("blank".into(), blank("a"));
        reg.register_view("blank".into(), blank("b"));
        reg.register_view(
            "full-b".into(),
            ViewSource {
                instance_id: "b".into(),
                bbox: FULL,
            },
        );
        let got = reg.resolve_all(&["full-b".into(), "blank".into()]).unwrap();
        assert_eq!(got[1], blank("b"));
        assert_eq!(reg.resolve("blank").len(), 2);
        assert!(reg.resolve_all(&["nope".into()]).is_err());
    }
}
