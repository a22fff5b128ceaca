//! Core rasters, masks, and pose encodings.
//!
//! Everything downstream consumes the types defined here: RGB images in
//! `[0,1]`, 20-label parsing maps, 18-keypoint sets and their disc-shaped
//! heatmap encoding, and the hair/face/body-shape conditioning masks.
//! All operations are pure and deterministic.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};
use std::path::Path;

/// Number of semantic labels in a parsing map.
pub const NUM_LABELS: usize = 20;
/// Number of keypoints in a pose.
pub const NUM_KEYPOINTS: usize = 18;
/// Default disc radius for pose heatmap encoding, in pixels.
pub const DEFAULT_POSE_RADIUS: f64 = 4.0;
/// Resolution the body shape is averaged down to before resizing back.
pub const BODY_SHAPE_DOWN: (usize, usize) = (16, 12);
/// Fill value written over removed clothes pixels.
pub const CLOTHES_FILL: f64 = 0.5;

/// Parsing label vocabulary. Labels 10..19 are reserved and unused by the
/// synthetic generator but kept so the channel count stays at 20.
pub mod label {
    pub const BACKGROUND: u8 = 0;
    pub const HAIR: u8 = 1;
    pub const FACE: u8 = 2;
    pub const UPPER_CLOTHES: u8 = 3;
    pub const LOWER_CLOTHES: u8 = 4;
    pub const LEFT_ARM: u8 = 5;
    pub const RIGHT_ARM: u8 = 6;
    pub const LEFT_LEG: u8 = 7;
    pub const RIGHT_LEG: u8 = 8;
    pub const TORSO_SKIN: u8 = 9;
}

/// Labels treated as clothes by `remove_clothes` and
/// `clothes_mask_from_parsing`.
pub const CLOTHES_LABELS: [u8; 1] = [label::UPPER_CLOTHES];

/// Labels whose union forms the body shape mask: torso, arms, legs, and
/// both clothes regions. Hair, face, and background are excluded.
pub const BODY_SHAPE_LABELS: [u8; 7] = [
    label::UPPER_CLOTHES,
    label::LOWER_CLOTHES,
    label::LEFT_ARM,
    label::RIGHT_ARM,
    label::LEFT_LEG,
    label::RIGHT_LEG,
    label::TORSO_SKIN,
];

/// RGB raster with values in `[0,1]`, stored channel-first as `(3, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub data: Array3<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((3, height, width)),
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            data: Array3::from_elem((3, height, width), value),
        }
    }

    pub fn from_array(data: Array3<f64>) -> Result<Self> {
        if data.shape()[0] != 3 {
            return Err(Error::shape(format!(
                "image must have 3 channels, got {}",
                data.shape()[0]
            )));
        }
        Ok(Self { data })
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Decode an 8-bit RGB PNG; values map to `[0,1]` by division by 255.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = Array3::zeros((3, h, w));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
            }
        }
        Ok(Self { data })
    }

    /// Encode as 8-bit RGB PNG, rounding `v * 255` to the nearest integer.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    quantize(self.data[[0, y, x]]),
                    quantize(self.data[[1, y, x]]),
                    quantize(self.data[[2, y, x]]),
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
        Ok(())
    }
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Per-pixel semantic label map over the 20-label vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsingMap {
    pub labels: Array2<u8>,
}

impl ParsingMap {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            labels: Array2::zeros((height, width)),
        }
    }

    pub fn from_array(labels: Array2<u8>) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_LABELS) {
            return Err(Error::invalid(format!(
                "parsing label {bad} outside the {NUM_LABELS}-label vocabulary"
            )));
        }
        Ok(Self { labels })
    }

    pub fn height(&self) -> usize {
        self.labels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.labels.shape()[1]
    }

    /// Binary indicator of one label.
    pub fn indicator(&self, lbl: u8) -> Array2<f64> {
        self.labels.mapv(|l| if l == lbl { 1.0 } else { 0.0 })
    }

    /// Binary indicator of any label in `set`.
    pub fn indicator_of(&self, set: &[u8]) -> Array2<f64> {
        self.labels
            .mapv(|l| if set.contains(&l) { 1.0 } else { 0.0 })
    }

    /// One-hot encoding, channel per label: `(NUM_LABELS, H, W)`.
    pub fn one_hot(&self) -> Array3<f64> {
        let (h, w) = (self.height(), self.width());
        let mut out = Array3::zeros((NUM_LABELS, h, w));
        for y in 0..h {
            for x in 0..w {
                out[[self.labels[[y, x]] as usize, y, x]] = 1.0;
            }
        }
        out
    }

    /// Load from a single-channel 8-bit PNG whose pixel value is the label.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut labels = Array2::zeros((h, w));
        for (x, y, px) in img.enumerate_pixels() {
            labels[[y as usize, x as usize]] = px.0[0];
        }
        Self::from_array(labels)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                img.put_pixel(x as u32, y as u32, image::Luma([self.labels[[y, x]]]));
            }
        }
        img.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
        Ok(())
    }
}

/// One keypoint; invisible slots carry the sentinel `x = y = -1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl Keypoint {
    pub fn invisible() -> Self {
        Self {
            x: -1.0,
            y: -1.0,
            visible: false,
        }
    }

    pub fn at(x: f64, y: f64) -> Self {
        Self {
            x,
            y,
            visible: true,
        }
    }
}

/// Fixed-order set of 18 keypoints (OpenPose COCO ordering).
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub points: [Keypoint; NUM_KEYPOINTS],
}

impl KeypointSet {
    pub fn all_invisible() -> Self {
        Self {
            points: [Keypoint::invisible(); NUM_KEYPOINTS],
        }
    }

    /// Parse the text record format: 18 lines of `index x y visible`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut set = Self::all_invisible();
        let mut seen = [false; NUM_KEYPOINTS];
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(Error::invalid(format!("malformed keypoint line: {line:?}")));
            }
            let idx: usize = parts[0]
                .parse()
                .map_err(|_| Error::invalid(format!("bad keypoint index in {line:?}")))?;
            if idx >= NUM_KEYPOINTS {
                return Err(Error::invalid(format!("keypoint index {idx} out of range")));
            }
            let x: f64 = parts[1]
                .parse()
                .map_err(|_| Error::invalid(format!("bad x in {line:?}")))?;
            let y: f64 = parts[2]
                .parse()
                .map_err(|_| Error::invalid(format!("bad y in {line:?}")))?;
            let visible = match parts[3] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::invalid(format!("bad visibility flag {other:?}")));
                }
            };
            set.points[idx] = if visible {
                Keypoint::at(x, y)
            } else {
                Keypoint::invisible()
            };
            seen[idx] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("keypoint record must carry all 18 slots"));
        }
        Ok(set)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, kp) in self.points.iter().enumerate() {
            if kp.visible {
                out.push_str(&format!("{} {} {} 1\n", i, kp.x, kp.y));
            } else {
                out.push_str(&format!("{} -1 -1 0\n", i));
            }
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// 18 binary channels encoding keypoints as filled discs.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseHeatmap {
    pub channels: Array3<f64>,
}

impl PoseHeatmap {
    pub fn height(&self) -> usize {
        self.channels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.channels.shape()[2]
    }
}

/// Conditioning masks extracted from a parsing map.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyMasks {
    /// Exact hair-label indicator.
    pub hair: Array2<f64>,
    /// Exact face-label indicator.
    pub face: Array2<f64>,
    /// Body-label union, area-averaged to 16x12 and resized back; values
    /// may be fractional after interpolation.
    pub body_shape: Array2<f64>,
}

/// Encode keypoints as 18 binary disc channels. Channel `k` is 1 exactly at
/// pixels within Euclidean distance `radius` (inclusive) of keypoint `k`,
/// clipped at the image border; invisible keypoints yield all-zero channels.
pub fn encode_pose_heatmap(
    keypoints: &KeypointSet,
    height: usize,
    width: usize,
    radius: f64,
) -> Result<PoseHeatmap> {
    if height as f64 <= 2.0 * radius || width as f64 <= 2.0 * radius {
        return Err(Error::invalid(format!(
            "resolution {height}x{width} too small for pose radius {radius}"
        )));
    }
    for (i, kp) in keypoints.points.iter().enumerate() {
        if kp.visible && (!kp.x.is_finite() || !kp.y.is_finite()) {
            return Err(Error::invalid(format!(
                "keypoint {i} has non-finite coordinates ({}, {})",
                kp.x, kp.y
            )));
        }
    }
    let mut channels = Array3::zeros((NUM_KEYPOINTS, height, width));
    let r2 = radius * radius;
    for (k, kp) in keypoints.points.iter().enumerate() {
        if !kp.visible {
            continue;
        }
        // Only the bounding box of the disc needs scanning.
        let y_lo = ((kp.y - radius).floor().max(0.0)) as usize;
        let y_hi = ((kp.y + radius).ceil().min(height as f64 - 1.0)).max(0.0) as usize;
        let x_lo = ((kp.x - radius).floor().max(0.0)) as usize;
        let x_hi = ((kp.x + radius).ceil().min(width as f64 - 1.0)).max(0.0) as usize;
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let dx = x as f64 - kp.x;
                let dy = y as f64 - kp.y;
                if dx * dx + dy * dy <= r2 {
                    channels[[k, y, x]] = 1.0;
                }
            }
        }
    }
    Ok(PoseHeatmap { channels })
}

/// Extract the hair mask, face mask, and smoothed body shape from a parsing.
/// Missing labels simply yield zero masks.
pub fn extract_body_masks(parsing: &ParsingMap) -> BodyMasks {
    let hair = parsing.indicator(label::HAIR);
    let face = parsing.indicator(label::FACE);
    let union = parsing.indicator_of(&BODY_SHAPE_LABELS);
    let (dh, dw) = BODY_SHAPE_DOWN;
    let down = area_downsample(&union, dh, dw);
    let body_shape = bilinear_resize(&down, parsing.height(), parsing.width());
    BodyMasks {
        hair,
        face,
        body_shape,
    }
}

/// Replace pixels under clothes labels with the neutral mid-gray fill; all
/// other pixels pass through unchanged.
pub fn remove_clothes(person: &Image, parsing: &ParsingMap) -> Image {
    debug_assert_eq!(person.height(), parsing.height());
    debug_assert_eq!(person.width(), parsing.width());
    let mut out = person.clone();
    for y in 0..parsing.height() {
        for x in 0..parsing.width() {
            if CLOTHES_LABELS.contains(&parsing.labels[[y, x]]) {
                for c in 0..3 {
                    out.data[[c, y, x]] = CLOTHES_FILL;
                }
            }
        }
    }
    out
}

/// Binary indicator of the clothes labels.
pub fn clothes_mask_from_parsing(parsing: &ParsingMap) -> Array2<f64> {
    parsing.indicator_of(&CLOTHES_LABELS)
}

/// Exact area-average resampling to `(oh, ow)`, handling fractional pixel
/// overlap so non-divisible resolutions stay correct.
pub fn area_downsample(src: &Array2<f64>, oh: usize, ow: usize) -> Array2<f64> {
    let (sh, sw) = (src.shape()[0], src.shape()[1]);
    let sy = sh as f64 / oh as f64;
    let sx = sw as f64 / ow as f64;
    let mut out = Array2::zeros((oh, ow));
    for oy in 0..oh {
        let y0 = oy as f64 * sy;
        let y1 = (oy + 1) as f64 * sy;
        for ox in 0..ow {
            let x0 = ox as f64 * sx;
            let x1 = (ox + 1) as f64 * sx;
            let mut acc = 0.0;
            let mut area = 0.0;
            let ry0 = y0.floor() as usize;
            let ry1 = (y1.ceil() as usize).min(sh);
            let rx0 = x0.floor() as usize;
            let rx1 = (x1.ceil() as usize).min(sw);
            for r in ry0..ry1 {
                let wy = overlap(r as f64, r as f64 + 1.0, y0, y1);
                if wy == 0.0 {
                    continue;
                }
                for c in rx0..rx1 {
                    let wx = overlap(c as f64, c as f64 + 1.0, x0, x1);
                    if wx == 0.0 {
                        continue;
                    }
                    acc += src[[r, c]] * wy * wx;
                    area += wy * wx;
                }
            }
            out[[oy, ox]] = acc / area;
        }
    }
    out
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Bilinear resize with half-pixel-center sampling, clamped at borders.
pub fn bilinear_resize(src: &Array2<f64>, oh: usize, ow: usize) -> Array2<f64> {
    let (sh, sw) = (src.shape()[0], src.shape()[1]);
    let sy = sh as f64 / oh as f64;
    let sx = sw as f64 / ow as f64;
    let mut out = Array2::zeros((oh, ow));
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, sh as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = fy - y0 as f64;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, sw as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = fx - x0 as f64;
            let top = src[[y0, x0]] * (1.0 - tx) + src[[y0, x1]] * tx;
            let bot = src[[y1, x0]] * (1.0 - tx) + src[[y1, x1]] * tx;
            out[[oy, ox]] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force disc indicator used as the oracle for heatmap tests.
    fn brute_force_disc(cx: f64, cy: f64, h: usize, w: usize, radius: f64) -> Array2<f64> {
        let mut m = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                if dx * dx + dy * dy <= radius * radius {
                    m[[y, x]] = 1.0;
                }
            }
        }
        m
    }

    fn one_visible(idx: usize, x: f64, y: f64) -> KeypointSet {
        let mut set = KeypointSet::all_invisible();
        set.points[idx] = Keypoint::at(x, y);
        set
    }

    #[test]
    fn heatmap_center_disc_matches_brute_force_count() {
        let (h, w) = (64, 48);
        let kps = one_visible(0, 24.0, 32.0);
        let hm = encode_pose_heatmap(&kps, h, w, 4.0).unwrap();
        let oracle = brute_force_disc(24.0, 32.0, h, w, 4.0);
        assert_eq!(hm.channels.index_axis(ndarray::Axis(0), 0), oracle);
        // The discrete radius-4 disc under <= has 49 pixels.
        assert_eq!(oracle.sum() as usize, 49);
    }

    #[test]
    fn heatmap_invisible_keypoint_is_zero_channel() {
        let kps = KeypointSet::all_invisible();
        let hm = encode_pose_heatmap(&kps, 32, 24, 4.0).unwrap();
        assert_eq!(hm.channels.sum(), 0.0);
    }

    #[test]
    fn heatmap_corner_keypoint_clips_to_quarter_disc() {
        let (h, w) = (32, 24);
        let kps = one_visible(5, 0.0, 0.0);
        let hm = encode_pose_heatmap(&kps, h, w, 4.0).unwrap();
        let oracle = brute_force_disc(0.0, 0.0, h, w, 4.0);
        assert_eq!(hm.channels.index_axis(ndarray::Axis(0), 5), oracle);
        // Quarter disc: rows/cols 0..=4 only.
        for y in 0..h {
            for x in 0..w {
                if y > 4 || x > 4 {
                    assert_eq!(hm.channels[[5, y, x]], 0.0);
                }
            }
        }
    }

    #[test]
    fn heatmap_rejects_non_finite_coordinates() {
        let kps = one_visible(3, f64::NAN, 10.0);
        assert!(encode_pose_heatmap(&kps, 32, 24, 4.0).is_err());
    }

    #[test]
    fn heatmap_rejects_too_small_canvas() {
        let kps = one_visible(0, 2.0, 2.0);
        assert!(encode_pose_heatmap(&kps, 8, 24, 4.0).is_err());
    }

    #[test]
    fn body_masks_all_background_is_zero() {
        let parsing = ParsingMap::new(32, 24);
        let m = extract_body_masks(&parsing);
        assert_eq!(m.hair.sum(), 0.0);
        assert_eq!(m.face.sum(), 0.0);
        assert_eq!(m.body_shape.sum(), 0.0);
    }

    #[test]
    fn body_masks_hair_only() {
        let mut parsing = ParsingMap::new(32, 24);
        parsing.labels[[4, 5]] = label::HAIR;
        parsing.labels[[4, 6]] = label::HAIR;
        let m = extract_body_masks(&parsing);
        assert_eq!(m.hair.sum(), 2.0);
        assert_eq!(m.hair[[4, 5]], 1.0);
        assert_eq!(m.face.sum(), 0.0);
    }

    #[test]
    fn body_shape_block_constant_matches_independent_oracle() {
        // Independent oracle: direct block mean + separate bilinear resize.
        let (h, w) = (64, 48);
        let mut parsing = ParsingMap::new(h, w);
        // Paint torso-skin on some aligned 4x4 blocks (64x48 -> 16x12 uses 4x4 cells).
        for by in 3..9 {
            for bx in 2..7 {
                if (by + bx) % 2 == 0 {
                    for y in by * 4..(by + 1) * 4 {
                        for x in bx * 4..(bx + 1) * 4 {
                            parsing.labels[[y, x]] = label::TORSO_SKIN;
                        }
                    }
                }
            }
        }
        let union = parsing.indicator_of(&BODY_SHAPE_LABELS);
        // Oracle downsample: plain block mean.
        let mut down = Array2::zeros((16, 12));
        for oy in 0..16 {
            for ox in 0..12 {
                let mut s = 0.0;
                for y in oy * 4..(oy + 1) * 4 {
                    for x in ox * 4..(ox + 1) * 4 {
                        s += union[[y, x]];
                    }
                }
                down[[oy, ox]] = s / 16.0;
            }
        }
        let oracle = bilinear_resize(&down, h, w);
        let got = extract_body_masks(&parsing).body_shape;
        for (a, b) in got.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn remove_clothes_no_clothes_is_identity() {
        let mut img = Image::new(16, 12);
        img.data.fill(0.25);
        let parsing = ParsingMap::new(16, 12);
        let out = remove_clothes(&img, &parsing);
        assert_eq!(out, img);
    }

    #[test]
    fn remove_clothes_all_clothes_is_constant_fill() {
        let mut img = Image::new(16, 12);
        img.data.fill(0.9);
        let mut parsing = ParsingMap::new(16, 12);
        parsing.labels.fill(label::UPPER_CLOTHES);
        let out = remove_clothes(&img, &parsing);
        assert!(out.data.iter().all(|&v| v == CLOTHES_FILL));
    }

    #[test]
    fn remove_clothes_changes_exactly_the_masked_region() {
        let mut img = Image::new(16, 12);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 97) as f64 / 97.0;
        }
        let mut parsing = ParsingMap::new(16, 12);
        for y in 0..8 {
            for x in 0..12 {
                parsing.labels[[y, x]] = label::UPPER_CLOTHES;
            }
        }
        let out = remove_clothes(&img, &parsing);
        for y in 0..16 {
            for x in 0..12 {
                for c in 0..3 {
                    if y < 8 {
                        assert_eq!(out.data[[c, y, x]], CLOTHES_FILL);
                    } else {
                        // Complement must be bit-identical.
                        assert_eq!(out.data[[c, y, x]].to_bits(), img.data[[c, y, x]].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn clothes_mask_trivial_cases() {
        let parsing = ParsingMap::new(8, 6);
        assert_eq!(clothes_mask_from_parsing(&parsing).sum(), 0.0);
        let mut parsing = ParsingMap::new(8, 6);
        parsing.labels.fill(label::UPPER_CLOTHES);
        assert_eq!(clothes_mask_from_parsing(&parsing).sum(), 48.0);
    }

    #[test]
    fn clothes_mask_matches_argmax_oracle() {
        // Build fake per-pixel probabilities, argmax them into a parsing,
        // and check the mask support equals pixels whose argmax is a
        // clothes label.
        use ndarray::Array3;
        let (h, w) = (10, 8);
        let mut probs = Array3::<f64>::zeros((NUM_LABELS, h, w));
        for y in 0..h {
            for x in 0..w {
                let winner = ((y * w + x) * 7) % NUM_LABELS;
                for l in 0..NUM_LABELS {
                    probs[[l, y, x]] = if l == winner { 0.9 } else { 0.1 / 19.0 };
                }
            }
        }
        let mut labels = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let mut best = 0;
                for l in 1..NUM_LABELS {
                    if probs[[l, y, x]] > probs[[best, y, x]] {
                        best = l;
                    }
                }
                labels[[y, x]] = best as u8;
            }
        }
        let parsing = ParsingMap::from_array(labels).unwrap();
        let mask = clothes_mask_from_parsing(&parsing);
        for y in 0..h {
            for x in 0..w {
                let winner = (((y * w + x) * 7) % NUM_LABELS) as u8;
                let expect = if CLOTHES_LABELS.contains(&winner) {
                    1.0
                } else {
                    0.0
                };
                assert_eq!(mask[[y, x]], expect);
            }
        }
    }

    #[test]
    fn mask_extraction_is_idempotent_on_indicator_parsings() {
        let mut parsing = ParsingMap::new(20, 16);
        for y in 2..5 {
            for x in 3..9 {
                parsing.labels[[y, x]] = label::HAIR;
            }
        }
        for y in 6..9 {
            for x in 4..8 {
                parsing.labels[[y, x]] = label::FACE;
            }
        }
        let m = extract_body_masks(&parsing);
        // Rebuild a parsing from the masks and re-extract.
        let mut rebuilt = ParsingMap::new(20, 16);
        for y in 0..20 {
            for x in 0..16 {
                if m.hair[[y, x]] == 1.0 {
                    rebuilt.labels[[y, x]] = label::HAIR;
                } else if m.face[[y, x]] == 1.0 {
                    rebuilt.labels[[y, x]] = label::FACE;
                }
            }
        }
        let m2 = extract_body_masks(&rebuilt);
        assert_eq!(m.hair, m2.hair);
        assert_eq!(m.face, m2.face);
    }

    #[test]
    fn keypoint_text_roundtrip() {
        let mut set = KeypointSet::all_invisible();
        set.points[0] = Keypoint::at(10.5, 20.25);
        set.points[17] = Keypoint::at(3.0, 4.0);
        let text = set.to_text();
        let back = KeypointSet::from_text(&text).unwrap();
        assert_eq!(set, back);
        assert_eq!(text.lines().count(), NUM_KEYPOINTS);
    }

    #[test]
    fn png_roundtrip_is_lossless_for_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(9, 7);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 13) % 256) as f64 / 255.0;
        }
        let path = dir.path().join("img.png");
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(img, back);

        let mut parsing = ParsingMap::new(9, 7);
        parsing.labels[[2, 3]] = 19;
        let ppath = dir.path().join("parsing.png");
        parsing.save_png(&ppath).unwrap();
        assert_eq!(ParsingMap::load_png(&ppath).unwrap(), parsing);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn heatmap_channel_sum_equals_brute_force(
                x in 0.0f64..47.0,
                y in 0.0f64..63.0,
                idx in 0usize..NUM_KEYPOINTS,
            ) {
                let kps = one_visible(idx, x, y);
                let hm = encode_pose_heatmap(&kps, 64, 48, 4.0).unwrap();
                let oracle = brute_force_disc(x, y, 64, 48, 4.0);
                prop_assert_eq!(
                    hm.channels.index_axis(ndarray::Axis(0), idx).sum(),
                    oracle.sum()
                );
            }

            #[test]
            fn remove_clothes_changes_pixel_iff_clothes_label(
                seed in 0u64..1000,
            ) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let (h, w) = (12, 10);
                let mut img = Image::new(h, w);
                for v in img.data.iter_mut() {
                    *v = rng.gen::<f64>();
                }
                let mut parsing = ParsingMap::new(h, w);
                for l in parsing.labels.iter_mut() {
                    *l = rng.gen_range(0..NUM_LABELS as u8);
                }
                let out = remove_clothes(&img, &parsing);
                for yx in 0..h * w {
                    let (y, x) = (yx / w, yx % w);
                    let is_clothes = CLOTHES_LABELS.contains(&parsing.labels[[y, x]]);
                    for c in 0..3 {
                        let changed = out.data[[c, y, x]] != img.data[[c, y, x]];
                        if is_clothes {
                            prop_assert_eq!(out.data[[c, y, x]], CLOTHES_FILL);
                        } else {
                            prop_assert!(!changed);
                        }
                    }
                }
            }
        }
    }
}
