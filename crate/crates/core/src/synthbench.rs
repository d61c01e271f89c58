//! Deterministic synthetic VQA benchmark.
//!
//! Scenes are flat-colored shapes on a plain background, one shape per grid
//! cell at most. Rasterization uses integer geometry only, so the pixel
//! count of every shape is exact and reproducible, which is what the toy
//! oracle's visibility rule is built on.

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{visible_pixels, ToyOracleConfig};
use crate::config::{derive_seed, SeedPurpose};
use crate::dataset::{ImageSource, VqaInstance};
use crate::imaging::{BBox, GridSpec, RasterImage};
use crate::scoring::tokenize;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("instance {index}: no {what} size in range satisfies the visibility constraints")]
    Unsatisfiable { index: usize, what: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Star,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Star];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Star => "star",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NamedColor {
    Red,
    Green,
    Blue,
    Yellow,
    Orange,
    Purple,
    Cyan,
    White,
}

impl NamedColor {
    pub const ALL: [NamedColor; 8] = [
        NamedColor::Red,
        NamedColor::Green,
        NamedColor::Blue,
        NamedColor::Yellow,
        NamedColor::Orange,
        NamedColor::Purple,
        NamedColor::Cyan,
        NamedColor::White,
    ];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            NamedColor::Red => [220, 30, 30],
            NamedColor::Green => [30, 170, 50],
            NamedColor::Blue => [30, 60, 220],
            NamedColor::Yellow => [240, 220, 30],
            NamedColor::Orange => [245, 135, 20],
            NamedColor::Purple => [130, 40, 170],
            NamedColor::Cyan => [30, 210, 220],
            NamedColor::White => [250, 250, 250],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NamedColor::Red => "red",
            NamedColor::Green => "green",
            NamedColor::Blue => "blue",
            NamedColor::Yellow => "yellow",
            NamedColor::Orange => "orange",
            NamedColor::Purple => "purple",
            NamedColor::Cyan => "cyan",
            NamedColor::White => "white",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

pub const BACKGROUND: [u8; 3] = [110, 110, 110];

/// Unit star outline: (cos, sin) of the ten vertex angles starting at the
/// top, alternating outer and inner points.
const STAR_DIRECTIONS: [(f64, f64); 10] = [
    (0.0, -1.0),
    (0.587_785, -0.809_017),
    (0.951_057, -0.309_017),
    (0.951_057, 0.309_017),
    (0.587_785, 0.809_017),
    (0.0, 1.0),
    (-0.587_785, 0.809_017),
    (-0.951_057, 0.309_017),
    (-0.951_057, -0.309_017),
    (-0.587_785, -0.809_017),
];
const STAR_INNER_RATIO: f64 = 0.381_966;
/// Fixed-point scale for star vertices in doubled box coordinates.
const STAR_FIXED: i64 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub cell: usize,
    pub shape: Shape,
    pub color: NamedColor,
    /// Side of the shape's square bounding box, in pixels.
    pub size: u32,
    /// Top-left corner of the bounding box.
    pub x: u32,
    pub y: u32,
    #[serde(default)]
    pub target: bool,
}

impl Placement {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.x, self.y, self.x + self.size, self.y + self.size)
    }

    /// Whether pixel `(px, py)` is painted. Pixel centers are tested in
    /// doubled coordinates so every comparison is an integer comparison.
    pub fn contains(&self, px: u32, py: u32) -> bool {
        if !self.bbox().contains(px, py) {
            return false;
        }
        let s = self.size as i64;
        let dx = 2 * (px - self.x) as i64 + 1;
        let dy = 2 * (py - self.y) as i64 + 1;
        match self.shape {
            Shape::Square => true,
            Shape::Circle => (dx - s).pow(2) + (dy - s).pow(2) <= s * s,
            Shape::Triangle => 2 * (dx - s).abs() <= dy,
            Shape::Star => star_contains(s, dx, dy),
        }
    }

    /// Exact number of painted pixels inside `view`.
    pub fn pixel_count_in(&self, view: &BBox) -> u64 {
        let Some(area) = self.bbox().intersect(view) else {
            return 0;
        };
        let mut n = 0;
        for y in area.y0..area.y1 {
            for x in area.x0..area.x1 {
                n += self.contains(x, y) as u64;
            }
        }
        n
    }

    pub fn pixel_count(&self) -> u64 {
        self.pixel_count_in(&self.bbox())
    }
}

fn star_vertices(s: i64) -> [(i64, i64); 10] {
    let outer = (s * STAR_FIXED) as f64;
    let mut out = [(0, 0); 10];
    for (i, (c, si)) in STAR_DIRECTIONS.iter().enumerate() {
        let r = if i % 2 == 0 { outer } else { outer * STAR_INNER_RATIO };
        out[i] = (
            s * STAR_FIXED + (r * c).round() as i64,
            s * STAR_FIXED + (r * si).round() as i64,
        );
    }
    out
}

/// Even-odd point-in-polygon on fixed-point integer vertices.
fn star_contains(s: i64, dx: i64, dy: i64) -> bool {
    let verts = star_vertices(s);
    let (px, py) = (dx * STAR_FIXED, dy * STAR_FIXED);
    let mut inside = false;
    let mut j = verts.len() - 1;
    for i in 0..verts.len() {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > py) != (yj > py) {
            // px < xi + (py - yi) * (xj - xi) / (yj - yi), sign-corrected
            let lhs = (px - xi) as i128 * (yj - yi) as i128;
            let rhs = (py - yi) as i128 * (xj - xi) as i128;
            let crosses = if yj > yi { lhs < rhs } else { lhs > rhs };
            if crosses {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthScene {
    pub width: u32,
    pub height: u32,
    pub grid_n: u32,
    pub background: [u8; 3],
    pub placements: Vec<Placement>,
}

impl SynthScene {
    pub fn target(&self) -> Option<&Placement> {
        self.placements.iter().find(|p| p.target)
    }
}

/// Paints the scene. No anti-aliasing: each pixel is either background or
/// exactly one shape color.
pub fn render(scene: &SynthScene) -> RasterImage {
    let mut img = RasterImage::filled(scene.width, scene.height, scene.background)
        .expect("scene dimensions are validated at generation");
    for p in &scene.placements {
        let Some(area) = p.bbox().intersect(&img.full_bbox()) else {
            continue;
        };
        let rgb = p.color.rgb();
        for y in area.y0..area.y1 {
            for x in area.x0..area.x1 {
                if p.contains(x, y) {
                    img.set_pixel(x, y, rgb);
                }
            }
        }
    }
    img
}

/// The question templates, parsed back into structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthQuestion {
    /// Asks the color of the unique shape of this kind.
    ColorOf { shape: Shape },
    /// Asks the shape of the unique object of this color.
    ShapeOf { color: NamedColor },
    /// Asks how many shapes the whole image contains.
    CountShapes,
}

impl SynthQuestion {
    pub fn text(&self) -> String {
        match self {
            SynthQuestion::ColorOf { shape } => format!("What color is the {} ?", shape.name()),
            SynthQuestion::ShapeOf { color } => format!("What shape is the {} object?", color.name()),
            SynthQuestion::CountShapes => "How many shapes are in the image?".to_string(),
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        let tokens = tokenize(text);
        let t: Vec<&str> = tokens.iter().map(String::as_str).collect();
        match t.as_slice() {
            ["what", "color", "is", "the", shape] => {
                Shape::from_name(shape).map(|shape| SynthQuestion::ColorOf { shape })
            }
            ["what", "shape", "is", "the", color, "object"] => {
                NamedColor::from_name(color).map(|color| SynthQuestion::ShapeOf { color })
            }
            ["how", "many", "shapes", "are", "in", "the", "image"] => Some(SynthQuestion::CountShapes),
            _ => None,
        }
    }

    /// The placement the question is about, if it names one.
    pub fn subject<'a>(&self, scene: &'a SynthScene) -> Option<&'a Placement> {
        match *self {
            SynthQuestion::ColorOf { shape } => scene.placements.iter().find(|p| p.shape == shape),
            SynthQuestion::ShapeOf { color } => scene.placements.iter().find(|p| p.color == color),
            SynthQuestion::CountShapes => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionMode {
    /// Color-of-shape and shape-of-color questions about one target.
    #[default]
    Attribute,
    /// "How many shapes" questions; every shape is readable from the
    /// overview and no instance has a target cell.
    Count,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub seed: u64,
    pub canvas_width: u32,
    pub canvas_height: u32,
    pub grid_n: u32,
    /// Target sizes for instances that need a sub-image.
    pub size_range: (u32, u32),
    /// Target sizes for overview-solvable instances.
    pub overview_size_range: (u32, u32),
    pub distractor_size_range: (u32, u32),
    pub distractor_count_range: (usize, usize),
    pub fraction_overview_solvable: f64,
    pub question_mode: QuestionMode,
    /// Share of attribute questions asking a color (the rest ask a shape).
    pub color_question_fraction: f64,
    /// Maximum offset of a shape from its cell-centered position; `None`
    /// places shapes anywhere in the cell.
    pub placement_jitter: Option<u32>,
    pub oracle: ToyOracleConfig,
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 100,
            seed: 0,
            canvas_width: 1344,
            canvas_height: 1344,
            grid_n: 3,
            size_range: (36, 64),
            overview_size_range: (150, 220),
            distractor_size_range: (36, 120),
            distractor_count_range: (2, 4),
            fraction_overview_solvable: 0.0,
            question_mode: QuestionMode::Attribute,
            color_question_fraction: 0.5,
            placement_jitter: None,
            oracle: ToyOracleConfig::default(),
            id_prefix: "synth".into(),
        }
    }
}

/// Pixels kept clear between a shape and its cell border.
const CELL_MARGIN: u32 = 4;

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.grid_n < 1 || self.grid_n > self.canvas_width.min(self.canvas_height) {
            return bad("grid_n must be in [1, min(canvas dims)]");
        }
        if !(0.0..=1.0).contains(&self.fraction_overview_solvable) {
            return bad("fraction_overview_solvable must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.color_question_fraction) {
            return bad("color_question_fraction must be in [0, 1]");
        }
        for (name, (lo, hi)) in [
            ("size_range", self.size_range),
            ("overview_size_range", self.overview_size_range),
            ("distractor_size_range", self.distractor_size_range),
        ] {
            if lo < 1 || lo > hi {
                return Err(SynthError::Config(format!("{name} must satisfy 1 <= min <= max")));
            }
        }
        let (dlo, dhi) = self.distractor_count_range;
        if dlo > dhi {
            return bad("distractor_count_range must satisfy min <= max");
        }
        let cells = (self.grid_n as usize).pow(2);
        if dhi + 1 > cells {
            return Err(SynthError::Config(format!(
                "up to {} shapes do not fit in {cells} cells",
                dhi + 1
            )));
        }
        if self.question_mode == QuestionMode::Count && dlo < 1 {
            return bad("count questions need at least one distractor");
        }
        let min_cell = self.canvas_width / self.grid_n;
        let min_cell = min_cell.min(self.canvas_height / self.grid_n);
        if self.distractor_size_range.0 + 2 * CELL_MARGIN > min_cell {
            return bad("distractor_size_range does not fit in a grid cell");
        }
        if self.oracle.min_visible_pixels < 1 || self.oracle.input_resolution < 1 {
            return bad("oracle config must be positive");
        }
        Ok(())
    }

    fn grid(&self) -> GridSpec {
        GridSpec::new(self.grid_n).expect("validated")
    }

    fn canvas(&self) -> BBox {
        BBox::new(0, 0, self.canvas_width, self.canvas_height)
    }
}

/// A generated instance. The image is rendered on demand from the scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthInstance {
    pub instance_id: String,
    pub scene: Arc<SynthScene>,
    pub question: String,
    pub answer: String,
    pub gt_cell: Option<usize>,
    pub overview_solvable: bool,
}

impl SynthInstance {
    pub fn render(&self) -> RasterImage {
        render(&self.scene)
    }

    pub fn to_vqa(&self) -> VqaInstance {
        VqaInstance {
            instance_id: self.instance_id.clone(),
            image: ImageSource::Synth(self.scene.clone()),
            question: self.question.clone(),
            answer: self.answer.clone(),
            options: None,
            gt_cell: self.gt_cell,
            grid_n: Some(self.scene.grid_n),
        }
    }
}

/// Generates `config.count` instances, deterministically in the seed.
pub fn generate(config: &SynthConfig) -> Result<Vec<SynthInstance>, SynthError> {
    config.validate()?;
    let solvable: HashSet<usize> = if config.question_mode == QuestionMode::Count {
        (0..config.count).collect()
    } else {
        let wanted = (config.fraction_overview_solvable * config.count as f64).floor() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SeedPurpose::Synth, u64::MAX));
        sample(&mut rng, config.count, wanted.min(config.count))
            .into_iter()
            .collect()
    };
    (0..config.count)
        .map(|i| generate_one(config, i, solvable.contains(&i)))
        .collect()
}

fn pick_size(rng: &mut ChaCha8Rng, (lo, hi): (u32, u32), fits: u32, accept: impl Fn(u32) -> bool) -> Option<u32> {
    let hi = hi.min(fits);
    if lo > hi {
        return None;
    }
    for _ in 0..64 {
        let s = rng.random_range(lo..=hi);
        if accept(s) {
            return Some(s);
        }
    }
    // fall back to an exhaustive scan so rare bands are still found
    let candidates: Vec<u32> = (lo..=hi).filter(|&s| accept(s)).collect();
    (!candidates.is_empty()).then(|| candidates[rng.random_range(0..candidates.len())])
}

/// Top-left corner for a shape inside `cell`. With a jitter bound the shape
/// stays within that many pixels of the centered position.
fn place(rng: &mut ChaCha8Rng, cell: &BBox, size: u32, jitter: Option<u32>) -> (u32, u32) {
    let axis = |rng: &mut ChaCha8Rng, lo: u32, hi: u32| {
        let (min, max) = (lo + CELL_MARGIN, hi - CELL_MARGIN - size);
        match jitter {
            None => rng.random_range(min..=max),
            Some(j) => {
                let center = (min + max) / 2;
                rng.random_range(center.saturating_sub(j).max(min)..=(center + j).min(max))
            }
        }
    };
    let x = axis(rng, cell.x0, cell.x1);
    let y = axis(rng, cell.y0, cell.y1);
    (x, y)
}

fn shape_area(shape: Shape, size: u32) -> u64 {
    Placement {
        cell: 0,
        shape,
        color: NamedColor::Red,
        size,
        x: 0,
        y: 0,
        target: false,
    }
    .pixel_count()
}

fn generate_one(config: &SynthConfig, index: usize, overview_solvable: bool) -> Result<SynthInstance, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SeedPurpose::Synth, index as u64));
    let grid = config.grid();
    let regions = grid
        .regions(config.canvas_width, config.canvas_height)
        .map_err(|e| SynthError::Config(e.to_string()))?;
    let cells = regions.len();
    let canvas = config.canvas();
    let oracle = config.oracle;
    let visible =
        |count: u64, view: &BBox| visible_pixels(count, view, oracle.input_resolution) >= oracle.min_visible_pixels;
    let fits = |cell: &BBox| cell.width().min(cell.height()).saturating_sub(2 * CELL_MARGIN);

    let distractors = rng.random_range(config.distractor_count_range.0..=config.distractor_count_range.1);
    let target_cell = rng.random_range(0..cells);
    let target_shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
    let target_color = NamedColor::ALL[rng.random_range(0..NamedColor::ALL.len())];
    let others: Vec<usize> = (0..cells).filter(|&c| c != target_cell).collect();
    let distractor_cells: Vec<usize> = sample(&mut rng, others.len(), distractors)
        .into_iter()
        .map(|i| others[i])
        .collect();

    let (question, count_mode) = match config.question_mode {
        QuestionMode::Count => (SynthQuestion::CountShapes, true),
        QuestionMode::Attribute => {
            if rng.random_bool(config.color_question_fraction) {
                (SynthQuestion::ColorOf { shape: target_shape }, false)
            } else {
                (SynthQuestion::ShapeOf { color: target_color }, false)
            }
        }
    };

    let target_region = &regions[target_cell].bbox;
    let size = if count_mode || overview_solvable {
        pick_size(&mut rng, config.overview_size_range, fits(target_region), |s| {
            visible(shape_area(target_shape, s), &canvas)
        })
        .ok_or(SynthError::Unsatisfiable {
            index,
            what: "overview-readable target",
        })?
    } else {
        pick_size(&mut rng, config.size_range, fits(target_region), |s| {
            let area = shape_area(target_shape, s);
            visible(area, target_region) && !visible(area, &canvas)
        })
        .ok_or(SynthError::Unsatisfiable { index, what: "target" })?
    };
    let (x, y) = place(&mut rng, target_region, size, config.placement_jitter);
    let mut placements = vec![Placement {
        cell: target_cell,
        shape: target_shape,
        color: target_color,
        size,
        x,
        y,
        target: !count_mode,
    }];

    for cell in distractor_cells {
        let (shape, color) = match question {
            SynthQuestion::ColorOf { shape: avoid } => {
                let pool: Vec<Shape> = Shape::ALL.into_iter().filter(|s| *s != avoid).collect();
                (
                    pool[rng.random_range(0..pool.len())],
                    NamedColor::ALL[rng.random_range(0..NamedColor::ALL.len())],
                )
            }
            SynthQuestion::ShapeOf { color: avoid } => {
                let pool: Vec<NamedColor> = NamedColor::ALL.into_iter().filter(|c| *c != avoid).collect();
                (
                    Shape::ALL[rng.random_range(0..Shape::ALL.len())],
                    pool[rng.random_range(0..pool.len())],
                )
            }
            SynthQuestion::CountShapes => (
                Shape::ALL[rng.random_range(0..Shape::ALL.len())],
                NamedColor::ALL[rng.random_range(0..NamedColor::ALL.len())],
            ),
        };
        let region = &regions[cell].bbox;
        let size = if count_mode {
            pick_size(&mut rng, config.overview_size_range, fits(region), |s| {
                visible(shape_area(shape, s), &canvas)
            })
            .ok_or(SynthError::Unsatisfiable {
                index,
                what: "overview-readable distractor",
            })?
        } else {
            let (lo, hi) = config.distractor_size_range;
            rng.random_range(lo..=hi.min(fits(region)))
        };
        let (x, y) = place(&mut rng, region, size, config.placement_jitter);
        placements.push(Placement {
            cell,
            shape,
            color,
            size,
            x,
            y,
            target: false,
        });
    }
    placements.sort_by_key(|p| p.cell);

    let answer = match question {
        SynthQuestion::ColorOf { .. } => target_color.name().to_string(),
        SynthQuestion::ShapeOf { .. } => target_shape.name().to_string(),
        SynthQuestion::CountShapes => placements.len().to_string(),
    };
    Ok(SynthInstance {
        instance_id: format!("{}-{index:05}", config.id_prefix),
        scene: Arc::new(SynthScene {
            width: config.canvas_width,
            height: config.canvas_height,
            grid_n: config.grid_n,
            background: BACKGROUND,
            placements,
        }),
        question: question.text(),
        answer,
        gt_cell: (!count_mode).then_some(target_cell),
        overview_solvable: count_mode || overview_solvable,
    })
}
