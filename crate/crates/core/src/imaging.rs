//! Pixel-level image model: RGB rasters, n×n grid partitioning, cropping and
//! bilinear resizing.
//!
//! All coordinates are half-open (`[x0, x1)`), so grid cells tile an image
//! with no gaps and no overlap.

use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    EmptyImage { width: u32, height: u32 },
    #[error("pixel buffer has {actual} bytes, expected {expected}")]
    BufferLength { expected: usize, actual: usize },
    #[error("invalid grid: n={n} for a {width}x{height} image")]
    InvalidGrid { n: u32, width: u32, height: u32 },
    #[error("bounding box {bbox:?} is outside a {width}x{height} image")]
    OutOfBounds { bbox: BBox, width: u32, height: u32 },
    #[error("resize target must be at least 1x1, got {width}x{height}")]
    ZeroTarget { width: u32, height: u32 },
    #[error("png codec: {0}")]
    Codec(#[from] image::ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ImagingError> = std::result::Result<T, E>;

/// 8-bit RGB raster stored row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RasterImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl RasterImage {
    pub const CHANNELS: usize = 3;

    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(ImagingError::EmptyImage { width, height });
        }
        let expected = width as usize * height as usize * Self::CHANNELS;
        if pixels.len() != expected {
            return Err(ImagingError::BufferLength {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    /// A constant-color image.
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(ImagingError::EmptyImage { width, height });
        }
        Self::new(width, height, rgb.repeat(width as usize * height as usize))
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn full_bbox(&self) -> BBox {
        BBox::new(0, 0, self.width, self.height)
    }

    #[inline]
    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * Self::CHANNELS
    }

    /// Panics if `(x, y)` lies outside the image.
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        assert!(x < self.width && y < self.height, "pixel out of range");
        let o = self.offset(x, y);
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    /// Panics if `(x, y)` lies outside the image.
    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        assert!(x < self.width && y < self.height, "pixel out of range");
        let o = self.offset(x, y);
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }

    /// Hex SHA-256 over the dimensions and pixel buffer. Two images share a
    /// fingerprint iff they are pixel-identical.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.width.to_le_bytes());
        hasher.update(self.height.to_le_bytes());
        hasher.update(&self.pixels);
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let buffer = image::RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("buffer length checked at construction");
        let mut out = Cursor::new(Vec::new());
        buffer.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
        let rgb = decoded.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::new(w, h, rgb.into_raw())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_png_bytes(&bytes)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub const fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// Non-empty and inside a `width × height` image.
    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }

    pub fn intersect(&self, other: &BBox) -> Option<BBox> {
        let b = BBox::new(
            self.x0.max(other.x0),
            self.y0.max(other.y0),
            self.x1.min(other.x1),
            self.y1.min(other.y1),
        );
        (b.x0 < b.x1 && b.y0 < b.y1).then_some(b)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemainderPolicy {
    /// The last row and column absorb `dim mod n` extra pixels.
    #[default]
    AbsorbLast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    n: u32,
    #[serde(default)]
    remainder_policy: RemainderPolicy,
}

impl GridSpec {
    pub fn new(n: u32) -> Result<Self> {
        if n == 0 {
            return Err(ImagingError::InvalidGrid { n, width: 0, height: 0 });
        }
        Ok(Self {
            n,
            remainder_policy: RemainderPolicy::AbsorbLast,
        })
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn remainder_policy(&self) -> RemainderPolicy {
        self.remainder_policy
    }

    /// Number of cells, `n²`.
    pub fn cells(&self) -> usize {
        (self.n as usize).pow(2)
    }

    fn check(&self, width: u32, height: u32) -> Result<()> {
        if self.n == 0 || self.n > width.min(height) {
            return Err(ImagingError::InvalidGrid {
                n: self.n,
                width,
                height,
            });
        }
        Ok(())
    }

    fn span(&self, extent: u32, i: u32) -> (u32, u32) {
        let base = extent / self.n;
        let start = i * base;
        let end = if i + 1 == self.n { extent } else { start + base };
        (start, end)
    }

    /// Cell regions in raster order for a `width × height` image.
    pub fn regions(&self, width: u32, height: u32) -> Result<Vec<CropRegion>> {
        self.check(width, height)?;
        let mut out = Vec::with_capacity(self.cells());
        for row in 0..self.n {
            let (y0, y1) = self.span(height, row);
            for col in 0..self.n {
                let (x0, x1) = self.span(width, col);
                out.push(CropRegion {
                    row,
                    col,
                    linear_index: (row * self.n + col) as usize,
                    bbox: BBox::new(x0, y0, x1, y1),
                });
            }
        }
        Ok(out)
    }

    /// Region of a single cell by linear index.
    pub fn region(&self, width: u32, height: u32, linear_index: usize) -> Result<CropRegion> {
        self.check(width, height)?;
        let n = self.n as usize;
        if linear_index >= n * n {
            return Err(ImagingError::InvalidGrid {
                n: self.n,
                width,
                height,
            });
        }
        let (row, col) = ((linear_index / n) as u32, (linear_index % n) as u32);
        let (x0, x1) = self.span(width, col);
        let (y0, y1) = self.span(height, row);
        Ok(CropRegion {
            row,
            col,
            linear_index,
            bbox: BBox::new(x0, y0, x1, y1),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRegion {
    pub row: u32,
    pub col: u32,
    pub linear_index: usize,
    pub bbox: BBox,
}

/// One grid cell together with its cropped pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubImage {
    pub region: CropRegion,
    pub image: RasterImage,
}

/// Splits `image` into `n²` disjoint cells in row-major order.
pub fn partition(image: &RasterImage, grid: &GridSpec) -> Result<Vec<SubImage>> {
    grid.regions(image.width(), image.height())?
        .into_iter()
        .map(|region| {
            Ok(SubImage {
                image: crop(image, &region.bbox)?,
                region,
            })
        })
        .collect()
}

/// Bit-exact copy of the pixels inside `bbox`.
pub fn crop(image: &RasterImage, bbox: &BBox) -> Result<RasterImage> {
    if !bbox.fits(image.width(), image.height()) {
        return Err(ImagingError::OutOfBounds {
            bbox: *bbox,
            width: image.width(),
            height: image.height(),
        });
    }
    let row_bytes = bbox.width() as usize * RasterImage::CHANNELS;
    let mut pixels = Vec::with_capacity(row_bytes * bbox.height() as usize);
    for y in bbox.y0..bbox.y1 {
        let start = image.offset(bbox.x0, y);
        pixels.extend_from_slice(&image.pixels[start..start + row_bytes]);
    }
    RasterImage::new(bbox.width(), bbox.height(), pixels)
}

/// Per-output filter taps along one axis: first source index and weights.
///
/// Upscaling interpolates the two nearest source samples (half-pixel
/// centers, edge clamped). Downscaling widens the triangle to the scale
/// factor so every source pixel contributes, as Pillow does; plain
/// two-tap sampling would skip most of the source.
fn axis_taps(src: u32, dst: u32) -> Vec<(usize, Vec<f64>)> {
    let scale = src as f64 / dst as f64;
    if scale <= 1.0 {
        let last = (src - 1) as f64;
        return (0..dst)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
                let lo = pos.floor();
                let w = pos - lo;
                if lo as u32 + 1 < src {
                    (lo as usize, vec![1.0 - w, w])
                } else {
                    (lo as usize, vec![1.0])
                }
            })
            .collect();
    }
    (0..dst)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = ((center - scale).floor().max(0.0)) as usize;
            let hi = ((center + scale).ceil() as usize).min(src as usize);
            let mut weights: Vec<f64> = (lo..hi)
                .map(|j| (1.0 - ((j as f64 + 0.5 - center) / scale).abs()).max(0.0))
                .collect();
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            (lo, weights)
        })
        .collect()
}

/// Bilinear resize with half-pixel-center sampling. Downscaling uses the
/// scale-widened triangle filter. Channel values round half away from zero.
pub fn resize(image: &RasterImage, target_w: u32, target_h: u32) -> Result<RasterImage> {
    if target_w == 0 || target_h == 0 {
        return Err(ImagingError::ZeroTarget {
            width: target_w,
            height: target_h,
        });
    }
    if target_w == image.width() && target_h == image.height() {
        return Ok(image.clone());
    }
    const C: usize = RasterImage::CHANNELS;
    let (w, tw, th) = (image.width() as usize, target_w as usize, target_h as usize);
    let xs = axis_taps(image.width(), target_w);
    let ys = axis_taps(image.height(), target_h);
    let src = image.pixels();

    // horizontal pass over every source row
    let mut rows = vec![0.0f64; image.height() as usize * tw * C];
    for (y, row) in rows.chunks_exact_mut(tw * C).enumerate() {
        let line = &src[y * w * C..(y + 1) * w * C];
        for (x, (start, weights)) in xs.iter().enumerate() {
            for (k, wt) in weights.iter().enumerate() {
                let px = &line[(start + k) * C..(start + k + 1) * C];
                for c in 0..C {
                    row[x * C + c] += wt * px[c] as f64;
                }
            }
        }
    }

    let mut out = Vec::with_capacity(tw * th * C);
    let mut acc = vec![0.0f64; tw * C];
    for (start, weights) in &ys {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (k, wt) in weights.iter().enumerate() {
            let row = &rows[(start + k) * tw * C..(start + k + 1) * tw * C];
            for (a, v) in acc.iter_mut().zip(row) {
                *a += wt * v;
            }
        }
        out.extend(acc.iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
    }
    RasterImage::new(target_w, target_h, out)
}

/// File name used when exporting a grid crop.
pub fn crop_file_name(instance_id: &str, region: &CropRegion) -> String {
    format!("{instance_id}_r{}c{}.png", region.row, region.col)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient(w: u32, h: u32) -> RasterImage {
        let mut pixels = Vec::new();
        for y in 0..h {
            for x in 0..w {
                pixels.extend_from_slice(&[(x % 256) as u8, (y % 256) as u8, ((x * 7 + y * 13) % 256) as u8]);
            }
        }
        RasterImage::new(w, h, pixels).unwrap()
    }

    #[test]
    fn rejects_bad_buffers() {
        assert!(matches!(
            RasterImage::new(2, 2, vec![0; 11]),
            Err(ImagingError::BufferLength {
                expected: 12,
                actual: 11
            })
        ));
        assert!(RasterImage::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn partition_exact_division() {
        let img = gradient(90, 90);
        let cells = partition(&img, &GridSpec::new(3).unwrap()).unwrap();
        assert_eq!(cells.len(), 9);
        for cell in &cells {
            assert_eq!((cell.image.width(), cell.image.height()), (30, 30));
        }
        assert_eq!(cells[4].region.bbox, BBox::new(30, 30, 60, 60));
        assert_eq!((cells[4].region.row, cells[4].region.col), (1, 1));
    }

    #[test]
    fn partition_n1_is_identity() {
        let img = gradient(17, 5);
        let cells = partition(&img, &GridSpec::new(1).unwrap()).unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].image, img);
    }

    #[test]
    fn partition_uneven_absorbs_remainder() {
        let img = gradient(100, 90);
        let cells = partition(&img, &GridSpec::new(3).unwrap()).unwrap();
        let widths: Vec<u32> = cells[..3].iter().map(|c| c.image.width()).collect();
        let heights: Vec<u32> = cells.iter().step_by(3).map(|c| c.image.height()).collect();
        assert_eq!(widths, vec![33, 33, 34]);
        assert_eq!(heights, vec![30, 30, 30]);
        // brute-force coverage count
        let mut hits = vec![0u8; 100 * 90];
        for c in &cells {
            for y in 0..90 {
                for x in 0..100 {
                    if c.region.bbox.contains(x, y) {
                        hits[(y * 100 + x) as usize] += 1;
                    }
                }
            }
        }
        assert!(hits.iter().all(|&h| h == 1));
        let area: u64 = cells.iter().map(|c| c.region.bbox.area()).sum();
        assert_eq!(area, 9000);
    }

    #[test]
    fn partition_rejects_oversized_grid() {
        let img = gradient(4, 10);
        assert!(matches!(
            partition(&img, &GridSpec::new(5).unwrap()),
            Err(ImagingError::InvalidGrid { n: 5, .. })
        ));
        assert!(GridSpec::new(0).is_err());
    }

    #[test]
    fn crop_cases() {
        let img = gradient(12, 7);
        assert_eq!(crop(&img, &img.full_bbox()).unwrap(), img);

        let flat = RasterImage::filled(20, 20, [9, 8, 7]).unwrap();
        let c = crop(&flat, &BBox::new(3, 4, 11, 6)).unwrap();
        assert_eq!(c, RasterImage::filled(8, 2, [9, 8, 7]).unwrap());

        let mut checker = RasterImage::filled(2, 2, [0, 0, 0]).unwrap();
        checker.set_pixel(0, 0, [255, 255, 255]);
        checker.set_pixel(1, 1, [255, 255, 255]);
        let tl = crop(&checker, &BBox::new(0, 0, 1, 1)).unwrap();
        assert_eq!((tl.width(), tl.height()), (1, 1));
        assert_eq!(tl.pixel(0, 0), [255, 255, 255]);

        assert!(matches!(
            crop(&img, &BBox::new(0, 0, 13, 2)),
            Err(ImagingError::OutOfBounds { .. })
        ));
        assert!(crop(&img, &BBox::new(3, 3, 3, 5)).is_err());
    }

    #[test]
    fn downscale_uses_the_full_footprint() {
        // taps at source centers 0.5, 1.5, 2.5 around output center 1.0
        // weigh 0.75, 0.75, 0.25; 0.25 * 255 / 1.75 = 36.43
        let four = RasterImage::new(4, 1, [0, 0, 255, 255].iter().flat_map(|&v| [v; 3]).collect()).unwrap();
        let two = resize(&four, 2, 1).unwrap();
        assert_eq!(two.pixel(0, 0), [36; 3]);
        assert_eq!(two.pixel(1, 0), [219; 3]);
    }

    #[test]
    fn resize_cases() {
        let img = gradient(9, 4);
        assert_eq!(resize(&img, 9, 4).unwrap(), img);

        let flat = RasterImage::filled(13, 7, [200, 17, 64]).unwrap();
        assert_eq!(
            resize(&flat, 5, 31).unwrap(),
            RasterImage::filled(5, 31, [200, 17, 64]).unwrap()
        );

        // middle output pixel samples x=0.5 in source space: 127.5 rounds up.
        let two = RasterImage::new(2, 1, vec![0, 0, 0, 255, 255, 255]).unwrap();
        let three = resize(&two, 3, 1).unwrap();
        assert_eq!(three.pixel(1, 0), [128, 128, 128]);
        assert_eq!(three.pixel(0, 0), [0, 0, 0]);
        assert_eq!(three.pixel(2, 0), [255, 255, 255]);

        assert!(matches!(resize(&img, 0, 3), Err(ImagingError::ZeroTarget { .. })));
    }

    #[test]
    fn png_round_trip() {
        let img = gradient(23, 11);
        let back = RasterImage::from_png_bytes(&img.to_png_bytes().unwrap()).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.fingerprint(), img.fingerprint());
    }

    #[test]
    fn crop_names() {
        let region = GridSpec::new(3).unwrap().region(90, 90, 5).unwrap();
        assert_eq!(crop_file_name("q17", &region), "q17_r1c2.png");
    }

    proptest! {
        #[test]
        fn downscale_sees_small_patches_anywhere(x in 0u32..443, y in 0u32..443) {
            let mut img = RasterImage::filled(448, 448, [0, 0, 0]).unwrap();
            for dy in 0..6 {
                for dx in 0..6 {
                    img.set_pixel(x + dx, y + dy, [255, 255, 255]);
                }
            }
            let thumb = resize(&img, 16, 16).unwrap();
            prop_assert!(thumb.pixels().iter().any(|&v| v > 0));
        }

        #[test]
        fn resize_is_deterministic_and_sized(w in 1u32..40, h in 1u32..40, tw in 1u32..40, th in 1u32..40) {
            let img = gradient(w, h);
            let a = resize(&img, tw, th).unwrap();
            let b = resize(&img, tw, th).unwrap();
            prop_assert_eq!((a.width(), a.height()), (tw, th));
            prop_assert_eq!(a, b);
        }
    }
}
