//! Images, semantic masks and sliding-window patch extraction.
//!
//! Patch vectors are laid out row-major with interleaved RGB channels, so the
//! element for pixel `(dx, dy)` and channel `ch` of a patch sits at
//! `(dy * size + dx) * 3 + ch`.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use image::{DynamicImage, ImageReader};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Class id reserved for pixels and patches not covered by any mask.
pub const BACKGROUND: u32 = 0;

/// Default fraction of a patch that must lie inside a mask for the patch to
/// carry that mask's class.
pub const DEFAULT_COVERAGE: f64 = 0.20;

/// An RGB raster with `f64` samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != width * height * 3 {
            return Err(Error::DimensionMismatch {
                expected: width * height * 3,
                actual: data.len(),
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// A uniformly colored image.
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self::new(width, height, data)
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            width,
            height,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, ch: usize) -> usize {
        (y * self.width + x) * 3 + ch
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, ch: usize) -> f64 {
        self.data[self.index(x, y, ch)]
    }

    /// Mutable access for optimizers. Callers are responsible for keeping
    /// values inside `[0, 1]`.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Quantizes to 8 bits per channel (round to nearest).
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    /// Writes an 8-bit RGB file; the format follows the extension (PNG or PPM).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer length matches dimensions");
        buf.save(path).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Loads an 8-bit RGB PNG or binary PPM. Grayscale and alpha images are
/// rejected.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let img = decode(path)?;
    match img {
        DynamicImage::ImageRgb8(buf) => {
            let (w, h) = buf.dimensions();
            Image::from_rgb8(w as usize, h as usize, buf.as_raw())
        }
        other => Err(Error::Decode {
            path: path.to_path_buf(),
            message: format!("expected 8-bit RGB, found {:?}", other.color()),
        }),
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            message: "zero dimension".into(),
        });
    }
    Ok(img)
}

/// Binary membership raster for one semantic class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMask {
    pub class_id: u32,
    pub bitmap: Vec<bool>,
}

/// Per-class masks over an image. Masks may overlap; pixels covered by no
/// mask belong to [`BACKGROUND`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMaskSet {
    width: usize,
    height: usize,
    masks: Vec<ClassMask>,
}

impl LabelMaskSet {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            masks: Vec::new(),
        }
    }

    /// Adds a mask, keeping masks ordered by class id.
    pub fn insert(&mut self, class_id: u32, bitmap: Vec<bool>) -> Result<()> {
        if class_id == BACKGROUND {
            return Err(Error::invalid("class id 0 is reserved for the background"));
        }
        if bitmap.len() != self.width * self.height {
            return Err(Error::DimensionMismatch {
                expected: self.width * self.height,
                actual: bitmap.len(),
            });
        }
        match self.masks.binary_search_by_key(&class_id, |m| m.class_id) {
            Ok(_) => Err(Error::invalid(format!("duplicate class id {class_id}"))),
            Err(pos) => {
                self.masks.insert(pos, ClassMask { class_id, bitmap });
                Ok(())
            }
        }
    }

    pub fn with_mask(mut self, class_id: u32, bitmap: Vec<bool>) -> Result<Self> {
        self.insert(class_id, bitmap)?;
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn masks(&self) -> &[ClassMask] {
        &self.masks
    }

    pub fn class_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.masks.iter().map(|m| m.class_id)
    }

    /// Pixels covered by no mask.
    pub fn background(&self) -> Vec<bool> {
        (0..self.width * self.height)
            .map(|i| !self.masks.iter().any(|m| m.bitmap[i]))
            .collect()
    }
}

/// Loads a directory of `<class_id>.png` single-channel masks. Nonzero pixels
/// are members. A missing or empty directory yields an empty set.
pub fn load_masks(dir: impl AsRef<Path>, dims: (usize, usize)) -> Result<LabelMaskSet> {
    let dir = dir.as_ref();
    let (width, height) = dims;
    let mut set = LabelMaskSet::empty(width, height);
    if !dir.exists() {
        return Ok(set);
    }
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    paths.sort();

    for path in paths {
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let class_id: u32 = stem
            .parse()
            .map_err(|_| Error::invalid(format!("mask file name {stem:?} is not a class id")))?;
        let img = match decode(&path)? {
            DynamicImage::ImageLuma8(buf) => buf,
            other => {
                return Err(Error::Decode {
                    path,
                    message: format!("expected 8-bit grayscale mask, found {:?}", other.color()),
                })
            }
        };
        if (img.width() as usize, img.height() as usize) != dims {
            return Err(Error::invalid(format!(
                "mask {} is {}x{}, image is {width}x{height}",
                path.display(),
                img.width(),
                img.height()
            )));
        }
        set.insert(class_id, img.as_raw().iter().map(|&p| p > 0).collect())?;
    }
    Ok(set)
}

/// Square patch size and sliding-window stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScaleSpec {
    pub patch_size: usize,
    pub stride: usize,
}

impl ScaleSpec {
    pub fn new(patch_size: usize, stride: usize) -> Result<Self> {
        if patch_size == 0 || stride == 0 {
            return Err(Error::invalid("patch size and stride must be at least 1"));
        }
        Ok(Self { patch_size, stride })
    }

    /// 4x4 every 4, 8x8 every 5, 16x16 every 6.
    pub fn defaults() -> Vec<ScaleSpec> {
        vec![
            ScaleSpec {
                patch_size: 4,
                stride: 4,
            },
            ScaleSpec {
                patch_size: 8,
                stride: 5,
            },
            ScaleSpec {
                patch_size: 16,
                stride: 6,
            },
        ]
    }

    pub fn dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// Number of window positions along an axis of length `len`.
    pub fn positions(&self, len: usize) -> usize {
        if self.patch_size > len {
            0
        } else {
            (len - self.patch_size) / self.stride + 1
        }
    }

    pub fn grid(&self, width: usize, height: usize) -> (usize, usize) {
        (self.positions(width), self.positions(height))
    }
}

impl fmt::Display for ScaleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{0}x{0}:{1}", self.patch_size, self.stride)
    }
}

impl FromStr for ScaleSpec {
    type Err = Error;

    /// Parses `WxH:stride` with `W == H`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("bad scale {s:?}, expected WxH:stride"));
        let (size, stride) = s.trim().split_once(':').ok_or_else(bad)?;
        let (w, h) = size.split_once(['x', 'X']).ok_or_else(bad)?;
        let w: usize = w.parse().map_err(|_| bad())?;
        let h: usize = h.parse().map_err(|_| bad())?;
        let stride: usize = stride.parse().map_err(|_| bad())?;
        if w != h {
            return Err(Error::invalid(format!(
                "patches must be square, got {w}x{h}"
            )));
        }
        ScaleSpec::new(w, stride)
    }
}

/// Parses a comma-separated scale list such as `4x4:4,8x8:5,16x16:6`.
pub fn parse_scales(s: &str) -> Result<Vec<ScaleSpec>> {
    let scales = s
        .split(',')
        .filter(|part| !part.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<ScaleSpec>>>()?;
    if scales.is_empty() {
        return Err(Error::invalid("empty scale list"));
    }
    let sizes: BTreeSet<_> = scales.iter().map(|s| s.patch_size).collect();
    if sizes.len() != scales.len() {
        return Err(Error::invalid(
            "patch sizes in a scale list must be distinct",
        ));
    }
    Ok(scales)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub x: usize,
    pub y: usize,
    pub vector: Vec<f64>,
    /// Sorted, nonempty.
    pub classes: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub scale: ScaleSpec,
    pub dim: usize,
    pub entries: Vec<Patch>,
}

impl PatchSet {
    /// Indices of the patches carrying `class_id`, in grid order.
    pub fn indices_of(&self, class_id: u32) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, p)| p.classes.binary_search(&class_id).is_ok())
            .map(|(i, _)| i)
            .collect()
    }

    /// All classes carried by at least one patch, ascending.
    pub fn classes(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self
            .entries
            .iter()
            .flat_map(|p| p.classes.iter().copied())
            .collect();
        set.into_iter().collect()
    }
}

/// Copies the `size`×`size` patch at `(x, y)` into a flat vector.
pub fn patch_at(img: &Image, x: usize, y: usize, size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * size * size);
    for dy in 0..size {
        let start = img.index(x, y + dy, 0);
        out.extend_from_slice(&img.data[start..start + 3 * size]);
    }
    out
}

/// Summed-area table of a boolean raster, `(w + 1) × (h + 1)`.
struct Integral {
    stride: usize,
    sums: Vec<u32>,
}

impl Integral {
    fn new(bitmap: &[bool], width: usize, height: usize) -> Self {
        let stride = width + 1;
        let mut sums = vec![0u32; stride * (height + 1)];
        for y in 0..height {
            let mut row = 0u32;
            for x in 0..width {
                row += u32::from(bitmap[y * width + x]);
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Self { stride, sums }
    }

    fn count(&self, x: usize, y: usize, size: usize) -> u32 {
        let s = self.stride;
        let (x1, y1) = (x + size, y + size);
        self.sums[y1 * s + x1] + self.sums[y * s + x]
            - self.sums[y * s + x1]
            - self.sums[y1 * s + x]
    }
}

/// Minimum member-pixel count for a patch of `total` pixels to reach
/// `threshold` coverage (inclusive).
pub fn min_member_pixels(threshold: f64, total: usize) -> u32 {
    (threshold * total as f64 - 1e-9).ceil().max(0.0) as u32
}

/// Extracts every sliding-window patch at `scale` and labels it with the
/// classes whose masks cover at least `coverage_threshold` of it. Patches
/// reaching no threshold are labeled [`BACKGROUND`]. Output is in row-major
/// grid order.
pub fn extract_patches(
    img: &Image,
    masks: &LabelMaskSet,
    scale: ScaleSpec,
    coverage_threshold: f64,
) -> Result<PatchSet> {
    if !(coverage_threshold > 0.0 && coverage_threshold <= 1.0) {
        return Err(Error::invalid(format!(
            "coverage threshold {coverage_threshold} outside (0, 1]"
        )));
    }
    if (masks.width, masks.height) != (img.width, img.height) {
        return Err(Error::invalid(format!(
            "masks are {}x{}, image is {}x{}",
            masks.width, masks.height, img.width, img.height
        )));
    }
    if scale.patch_size > img.width.min(img.height) {
        return Err(Error::invalid(format!(
            "scale {scale} does not fit a {}x{} image",
            img.width, img.height
        )));
    }

    let size = scale.patch_size;
    let min_count = min_member_pixels(coverage_threshold, size * size);
    let integrals: Vec<(u32, Integral)> = masks
        .masks
        .iter()
        .map(|m| (m.class_id, Integral::new(&m.bitmap, img.width, img.height)))
        .collect();
    let (nx, ny) = scale.grid(img.width, img.height);

    let entries: Vec<Patch> = (0..ny)
        .into_par_iter()
        .flat_map_iter(|gy| {
            let integrals = &integrals;
            (0..nx).map(move |gx| {
                let (x, y) = (gx * scale.stride, gy * scale.stride);
                let mut classes: Vec<u32> = integrals
                    .iter()
                    .filter(|(_, integral)| integral.count(x, y, size) >= min_count)
                    .map(|(c, _)| *c)
                    .collect();
                if classes.is_empty() {
                    classes.push(BACKGROUND);
                }
                Patch {
                    x,
                    y,
                    vector: patch_at(img, x, y, size),
                    classes,
                }
            })
        })
        .collect();

    Ok(PatchSet {
        scale,
        dim: scale.dim(),
        entries,
    })
}
