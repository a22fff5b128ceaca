//! Deterministic procedural triplet generator.
//!
//! Renders an articulated 2D stick figure (10 joint angles) wearing a
//! procedurally patterned garment, at two poses per triplet, with exact
//! per-pixel parsing labels and analytically known keypoints. No
//! anti-aliasing: every pixel is classified by an exact predicate in f64,
//! so label maps carry no mixed pixels and the raster is reproducible
//! across platforms.
//!
//! The 18-keypoint set maps onto the 10-joint skeleton with fixed rules:
//! nose/eyes/ears are offsets from the head disc, the neck keypoint is the
//! torso top, shoulders/hips sit at fixed half-width offsets, and
//! elbows/wrists/knees/ankles come from two-segment forward kinematics per
//! limb.

use crate::error::{Error, Result};
use crate::image::{label, Image, Keypoint, KeypointSet, ParsingMap, NUM_KEYPOINTS};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// Keypoints must keep this distance from every canvas edge so radius-4
/// heatmap discs never clip.
pub const KEYPOINT_MARGIN: f64 = 6.0;

pub const KP_NOSE: usize = 0;
pub const KP_NECK: usize = 1;
pub const KP_R_SHOULDER: usize = 2;
pub const KP_R_ELBOW: usize = 3;
pub const KP_R_WRIST: usize = 4;
pub const KP_L_SHOULDER: usize = 5;
pub const KP_L_ELBOW: usize = 6;
pub const KP_L_WRIST: usize = 7;
pub const KP_R_HIP: usize = 8;
pub const KP_R_KNEE: usize = 9;
pub const KP_R_ANKLE: usize = 10;
pub const KP_L_HIP: usize = 11;
pub const KP_L_KNEE: usize = 12;
pub const KP_L_ANKLE: usize = 13;
pub const KP_R_EYE: usize = 14;
pub const KP_L_EYE: usize = 15;
pub const KP_R_EAR: usize = 16;
pub const KP_L_EAR: usize = 17;

/// Garment texture catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Solid,
    Stripes,
    Dots,
}

impl Pattern {
    pub const COUNT: usize = 3;

    pub fn from_id(id: usize) -> Result<Self> {
        match id {
            0 => Ok(Pattern::Solid),
            1 => Ok(Pattern::Stripes),
            2 => Ok(Pattern::Dots),
            _ => Err(Error::invalid(format!("pattern id {id} outside catalog"))),
        }
    }

    pub fn id(&self) -> usize {
        match self {
            Pattern::Solid => 0,
            Pattern::Stripes => 1,
            Pattern::Dots => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sleeve {
    Short,
    Long,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HairStyle {
    Cap,
    Long,
}

type Color = [f64; 3];

/// Body proportions in pixels (already scaled to the canvas).
#[derive(Debug, Clone, Copy)]
pub struct Proportions {
    pub head_r: f64,
    pub neck_len: f64,
    pub torso_len: f64,
    pub torso_r: f64,
    pub shoulder_half: f64,
    pub hip_half: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub arm_r: f64,
    pub thigh: f64,
    pub shin: f64,
    pub leg_r: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct PersonSpec {
    pub identity_seed: u64,
    pub skin: Color,
    pub hair_color: Color,
    pub hair_style: HairStyle,
    pub lower_color: Color,
    pub proportions: Proportions,
}

#[derive(Debug, Clone, Copy)]
pub struct ClothesSpec {
    pub base_color: Color,
    pub pattern: Pattern,
    pub sleeve: Sleeve,
}

/// Articulated pose: ten joint angles plus global placement.
/// Angle order: torso lean, head tilt, right/left shoulder, right/left
/// elbow, right/left hip, right/left knee. Limb angles measure outward
/// deviation from straight down.
#[derive(Debug, Clone, Copy)]
pub struct PoseSpec {
    pub angles: [f64; 10],
    pub center: (f64, f64),
    pub scale: f64,
}

const A_LEAN: usize = 0;
const A_TILT: usize = 1;
const A_R_SHOULDER: usize = 2;
const A_L_SHOULDER: usize = 3;
const A_R_ELBOW: usize = 4;
const A_L_ELBOW: usize = 5;
const A_R_HIP: usize = 6;
const A_L_HIP: usize = 7;
const A_R_KNEE: usize = 8;
const A_L_KNEE: usize = 9;

fn sample_color(rng: &mut ChaCha8Rng) -> Color {
    [
        rng.gen_range(0.15..0.80),
        rng.gen_range(0.15..0.80),
        rng.gen_range(0.15..0.80),
    ]
}

impl PersonSpec {
    pub fn sample(rng: &mut ChaCha8Rng, identity_seed: u64, height: usize) -> Self {
        // proportions scale with the canvas minus the fixed keypoint
        // margin, so small canvases still fit the whole figure
        let s = (height as f64 - 2.0 * (KEYPOINT_MARGIN + 1.0)) / 50.0;
        let j = |rng: &mut ChaCha8Rng| rng.gen_range(0.92..1.08);
        let proportions = Proportions {
            head_r: 4.4 * s * j(rng),
            neck_len: 1.6 * s * j(rng),
            torso_len: 15.0 * s * j(rng),
            torso_r: 6.0 * s * j(rng),
            shoulder_half: 6.2 * s * j(rng),
            hip_half: 3.4 * s * j(rng),
            upper_arm: 7.0 * s * j(rng),
            forearm: 6.0 * s * j(rng),
            arm_r: 1.7 * s * j(rng),
            thigh: 8.5 * s * j(rng),
            shin: 8.0 * s * j(rng),
            leg_r: 2.1 * s * j(rng),
        };
        let skin_base = rng.gen_range(0.45..0.85);
        Self {
            identity_seed,
            skin: [skin_base, skin_base * 0.82, skin_base * 0.70],
            hair_color: sample_color(rng),
            hair_style: if rng.gen_bool(0.5) {
                HairStyle::Cap
            } else {
                HairStyle::Long
            },
            lower_color: sample_color(rng),
            proportions,
        }
    }
}

impl ClothesSpec {
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            base_color: sample_color(rng),
            pattern: Pattern::from_id(rng.gen_range(0..Pattern::COUNT)).unwrap(),
            sleeve: if rng.gen_bool(0.5) {
                Sleeve::Short
            } else {
                Sleeve::Long
            },
        }
    }

    fn color_at(&self, x: f64, y: f64, scale: f64) -> Color {
        let accent = [
            (self.base_color[0] * 0.5 + 0.38).min(0.9),
            (self.base_color[1] * 0.5 + 0.38).min(0.9),
            (self.base_color[2] * 0.5 + 0.38).min(0.9),
        ];
        match self.pattern {
            Pattern::Solid => self.base_color,
            Pattern::Stripes => {
                let period = (3.0 * scale).max(2.0);
                if ((y / period).floor() as i64).rem_euclid(2) == 0 {
                    self.base_color
                } else {
                    accent
                }
            }
            Pattern::Dots => {
                let cell = (5.0 * scale).max(3.0);
                let fx = x - (x / cell).floor() * cell - cell / 2.0;
                let fy = y - (y / cell).floor() * cell - cell / 2.0;
                let r = (1.3 * scale).max(1.0);
                if fx * fx + fy * fy <= r * r {
                    accent
                } else {
                    self.base_color
                }
            }
        }
    }
}

impl PoseSpec {
    pub fn sample(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Self {
        Self {
            angles: [
                rng.gen_range(-0.10..0.10),
                rng.gen_range(-0.12..0.12),
                rng.gen_range(-0.10..1.35),
                rng.gen_range(-0.10..1.35),
                rng.gen_range(0.0..1.1),
                rng.gen_range(0.0..1.1),
                rng.gen_range(-0.06..0.35),
                rng.gen_range(-0.06..0.35),
                rng.gen_range(0.0..0.40),
                rng.gen_range(0.0..0.40),
            ],
            center: (
                width as f64 * rng.gen_range(0.47..0.53),
                height as f64 * rng.gen_range(0.55..0.60),
            ),
            scale: rng.gen_range(0.95..1.05),
        }
    }

    /// Total joint-angle distance to another pose.
    pub fn angle_distance(&self, other: &PoseSpec) -> f64 {
        self.angles
            .iter()
            .zip(other.angles.iter())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

type Point = (f64, f64);

/// All joint positions derived from a pose (pixel coordinates).
#[derive(Debug, Clone)]
pub struct Skeleton {
    pub pelvis: Point,
    pub neck: Point,
    pub head_center: Point,
    pub keypoints: [Point; NUM_KEYPOINTS],
}

fn rot(v: Point, angle: f64) -> Point {
    let (c, s) = (angle.cos(), angle.sin());
    (v.0 * c - v.1 * s, v.0 * s + v.1 * c)
}

/// Forward kinematics: joint angles to pixel positions. The figure faces
/// the viewer, so its right side sits at smaller x.
pub fn forward_kinematics(person: &PersonSpec, pose: &PoseSpec) -> Skeleton {
    let p = &person.proportions;
    let sc = pose.scale;
    let a = &pose.angles;
    let pelvis = pose.center;
    // torso up direction
    let up = (a[A_LEAN].sin(), -a[A_LEAN].cos());
    let right = (-up.1, up.0); // viewer-right perpendicular
    let add = |o: Point, d: Point, len: f64| (o.0 + d.0 * len, o.1 + d.1 * len);

    let neck = add(pelvis, up, p.torso_len * sc);
    let head_dir = rot(up, a[A_TILT]);
    let head_center = add(neck, head_dir, (p.neck_len + p.head_r) * sc);

    // limb direction: straight down, rotated outward by the joint angle
    // (mirrored for the figure's right side)
    let limb = |angle: f64, side: f64| -> Point { ((side * angle).sin(), (side * angle).cos()) };

    let r_sh = add(neck, right, -p.shoulder_half * sc);
    let l_sh = add(neck, right, p.shoulder_half * sc);
    let r_el = add(r_sh, limb(a[A_R_SHOULDER], -1.0), p.upper_arm * sc);
    let l_el = add(l_sh, limb(a[A_L_SHOULDER], 1.0), p.upper_arm * sc);
    let r_wr = add(
        r_el,
        limb(a[A_R_SHOULDER] + a[A_R_ELBOW], -1.0),
        p.forearm * sc,
    );
    let l_wr = add(
        l_el,
        limb(a[A_L_SHOULDER] + a[A_L_ELBOW], 1.0),
        p.forearm * sc,
    );

    let r_hip = add(pelvis, right, -p.hip_half * sc);
    let l_hip = add(pelvis, right, p.hip_half * sc);
    let r_kn = add(r_hip, limb(a[A_R_HIP], -1.0), p.thigh * sc);
    let l_kn = add(l_hip, limb(a[A_L_HIP], 1.0), p.thigh * sc);
    let r_an = add(r_kn, limb(a[A_R_HIP] + a[A_R_KNEE], -1.0), p.shin * sc);
    let l_an = add(l_kn, limb(a[A_L_HIP] + a[A_L_KNEE], 1.0), p.shin * sc);

    // fixed face-feature offsets from the head disc
    let hr = p.head_r * sc;
    let hright = (-head_dir.1, head_dir.0);
    let nose = add(head_center, head_dir, 0.15 * hr);
    let r_eye = add(add(head_center, head_dir, 0.35 * hr), hright, -0.38 * hr);
    let l_eye = add(add(head_center, head_dir, 0.35 * hr), hright, 0.38 * hr);
    let r_ear = add(head_center, hright, -0.85 * hr);
    let l_ear = add(head_center, hright, 0.85 * hr);

    let mut keypoints = [(0.0, 0.0); NUM_KEYPOINTS];
    keypoints[KP_NOSE] = nose;
    keypoints[KP_NECK] = neck;
    keypoints[KP_R_SHOULDER] = r_sh;
    keypoints[KP_R_ELBOW] = r_el;
    keypoints[KP_R_WRIST] = r_wr;
    keypoints[KP_L_SHOULDER] = l_sh;
    keypoints[KP_L_ELBOW] = l_el;
    keypoints[KP_L_WRIST] = l_wr;
    keypoints[KP_R_HIP] = r_hip;
    keypoints[KP_R_KNEE] = r_kn;
    keypoints[KP_R_ANKLE] = r_an;
    keypoints[KP_L_HIP] = l_hip;
    keypoints[KP_L_KNEE] = l_kn;
    keypoints[KP_L_ANKLE] = l_an;
    keypoints[KP_R_EYE] = r_eye;
    keypoints[KP_L_EYE] = l_eye;
    keypoints[KP_R_EAR] = r_ear;
    keypoints[KP_L_EAR] = l_ear;
    Skeleton {
        pelvis,
        neck,
        head_center,
        keypoints,
    }
}

fn keypoints_in_bounds(skel: &Skeleton, height: usize, width: usize) -> bool {
    skel.keypoints.iter().all(|&(x, y)| {
        x >= KEYPOINT_MARGIN
            && y >= KEYPOINT_MARGIN
            && x <= width as f64 - 1.0 - KEYPOINT_MARGIN
            && y <= height as f64 - 1.0 - KEYPOINT_MARGIN
    })
}

/// Sample a pose whose keypoints all stay inside the heatmap margin.
pub fn sample_pose_on_canvas(
    rng: &mut ChaCha8Rng,
    person: &PersonSpec,
    height: usize,
    width: usize,
) -> Result<PoseSpec> {
    for _ in 0..200 {
        let pose = PoseSpec::sample(rng, height, width);
        if keypoints_in_bounds(&forward_kinematics(person, &pose), height, width) {
            return Ok(pose);
        }
    }
    Err(Error::Dataset(
        "could not sample an on-canvas pose (canvas too small for the figure)".into(),
    ))
}

/// Raster painter that keeps image and parsing exactly aligned and tracks
/// which pixels each label painted last.
struct Painter {
    img: Image,
    parsing: ParsingMap,
}

impl Painter {
    fn new(height: usize, width: usize, background: Color) -> Self {
        let mut img = Image::new(height, width);
        for c in 0..3 {
            img.data
                .index_axis_mut(ndarray::Axis(0), c)
                .fill(background[c]);
        }
        Self {
            img,
            parsing: ParsingMap::new(height, width),
        }
    }

    fn paint_capsule(
        &mut self,
        a: Point,
        b: Point,
        radius: f64,
        lbl: u8,
        mut color: impl FnMut(f64, f64) -> Color,
    ) {
        let (h, w) = (self.img.height(), self.img.width());
        let x_lo = ((a.0.min(b.0) - radius).floor().max(0.0)) as usize;
        let x_hi = ((a.0.max(b.0) + radius).ceil().min(w as f64 - 1.0)).max(0.0) as usize;
        let y_lo = ((a.1.min(b.1) - radius).floor().max(0.0)) as usize;
        let y_hi = ((a.1.max(b.1) + radius).ceil().min(h as f64 - 1.0)).max(0.0) as usize;
        let ab = (b.0 - a.0, b.1 - a.1);
        let len2 = ab.0 * ab.0 + ab.1 * ab.1;
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let p = (x as f64, y as f64);
                let t = if len2 == 0.0 {
                    0.0
                } else {
                    ((p.0 - a.0) * ab.0 + (p.1 - a.1) * ab.1) / len2
                };
                let t = t.clamp(0.0, 1.0);
                let q = (a.0 + t * ab.0, a.1 + t * ab.1);
                let d2 = (p.0 - q.0) * (p.0 - q.0) + (p.1 - q.1) * (p.1 - q.1);
                if d2 <= radius * radius {
                    let c = color(p.0, p.1);
                    for ch in 0..3 {
                        self.img.data[[ch, y, x]] = c[ch];
                    }
                    self.parsing.labels[[y, x]] = lbl;
                }
            }
        }
    }

    fn paint_disc(&mut self, center: Point, radius: f64, lbl: u8, color: Color) {
        self.paint_capsule(center, center, radius, lbl, |_, _| color);
    }

    fn paint_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, lbl: u8, mut color: impl FnMut(f64, f64) -> Color) {
        let (h, w) = (self.img.height(), self.img.width());
        let xs = x0.max(0.0).ceil() as usize;
        let xe = x1.min(w as f64 - 1.0).floor() as usize;
        let ys = y0.max(0.0).ceil() as usize;
        let ye = y1.min(h as f64 - 1.0).floor() as usize;
        for y in ys..=ye {
            for x in xs..=xe {
                let c = color(x as f64, y as f64);
                for ch in 0..3 {
                    self.img.data[[ch, y, x]] = c[ch];
                }
                self.parsing.labels[[y, x]] = lbl;
            }
        }
    }
}

/// Render a person at a pose. Returns the raster, the exactly aligned
/// parsing map, and all 18 keypoints (all visible by construction).
pub fn render_person(
    person: &PersonSpec,
    clothes: &ClothesSpec,
    pose: &PoseSpec,
    height: usize,
    width: usize,
) -> Result<(Image, ParsingMap, KeypointSet)> {
    let skel = forward_kinematics(person, pose);
    if !keypoints_in_bounds(&skel, height, width) {
        return Err(Error::Dataset(
            "pose keypoints leave the canvas margins".into(),
        ));
    }
    let p = &person.proportions;
    let sc = pose.scale;
    let scale_px = height as f64 / 64.0;
    let mut painter = Painter::new(height, width, [0.96, 0.96, 0.98]);
    let kp = &skel.keypoints;

    // legs: shorts (lower clothes) on thighs, skin on shins
    painter.paint_capsule(kp[KP_R_HIP], kp[KP_R_KNEE], p.leg_r * sc, label::LOWER_CLOTHES, |_, _| {
        person.lower_color
    });
    painter.paint_capsule(kp[KP_L_HIP], kp[KP_L_KNEE], p.leg_r * sc, label::LOWER_CLOTHES, |_, _| {
        person.lower_color
    });
    painter.paint_capsule(kp[KP_R_KNEE], kp[KP_R_ANKLE], p.leg_r * 0.9 * sc, label::RIGHT_LEG, |_, _| {
        person.skin
    });
    painter.paint_capsule(kp[KP_L_KNEE], kp[KP_L_ANKLE], p.leg_r * 0.9 * sc, label::LEFT_LEG, |_, _| {
        person.skin
    });

    // torso garment
    painter.paint_capsule(skel.pelvis, skel.neck, p.torso_r * sc, label::UPPER_CLOTHES, |x, y| {
        clothes.color_at(x, y, scale_px)
    });

    // arms over torso; sleeves follow the garment
    let arm = |painter: &mut Painter, a: Point, b: Point, covered: bool, side_lbl: u8| {
        if covered {
            painter.paint_capsule(a, b, p.arm_r * 1.15 * sc, label::UPPER_CLOTHES, |x, y| {
                clothes.color_at(x, y, scale_px)
            });
        } else {
            painter.paint_capsule(a, b, p.arm_r * sc, side_lbl, |_, _| person.skin);
        }
    };
    // upper arms are always sleeved; forearms only for long sleeves
    arm(&mut painter, kp[KP_R_SHOULDER], kp[KP_R_ELBOW], true, label::RIGHT_ARM);
    arm(&mut painter, kp[KP_L_SHOULDER], kp[KP_L_ELBOW], true, label::LEFT_ARM);
    let long = clothes.sleeve == Sleeve::Long;
    arm(&mut painter, kp[KP_R_ELBOW], kp[KP_R_WRIST], long, label::RIGHT_ARM);
    arm(&mut painter, kp[KP_L_ELBOW], kp[KP_L_WRIST], long, label::LEFT_ARM);

    // neck skin
    let up = (
        (skel.head_center.0 - skel.neck.0),
        (skel.head_center.1 - skel.neck.1),
    );
    let un = (up.0 * up.0 + up.1 * up.1).sqrt().max(1e-9);
    let neck_top = (
        skel.neck.0 + up.0 / un * p.neck_len * sc * 1.2,
        skel.neck.1 + up.1 / un * p.neck_len * sc * 1.2,
    );
    painter.paint_capsule(skel.neck, neck_top, p.head_r * 0.35 * sc, label::TORSO_SKIN, |_, _| {
        person.skin
    });

    // hair behind, face in front
    let hr = p.head_r * sc;
    if person.hair_style == HairStyle::Long {
        let hright = (-up.1 / un, up.0 / un);
        for side in [-1.0, 1.0] {
            let from = (
                skel.head_center.0 + hright.0 * side * hr * 0.9,
                skel.head_center.1 + hright.1 * side * hr * 0.9,
            );
            let to = (
                skel.neck.0 + hright.0 * side * hr * 1.0,
                skel.neck.1 + hright.1 * side * hr * 1.0,
            );
            painter.paint_capsule(from, to, hr * 0.35, label::HAIR, |_, _| person.hair_color);
        }
    }
    let hair_center = (
        skel.head_center.0 + up.0 / un * hr * 0.18,
        skel.head_center.1 + up.1 / un * hr * 0.18,
    );
    painter.paint_disc(hair_center, hr * 1.18, label::HAIR, person.hair_color);
    let face_center = (
        skel.head_center.0 - up.0 / un * hr * 0.12,
        skel.head_center.1 - up.1 / un * hr * 0.12,
    );
    painter.paint_disc(face_center, hr * 0.92, label::FACE, person.skin);

    let mut keypoints = KeypointSet::all_invisible();
    for (i, &(x, y)) in kp.iter().enumerate() {
        keypoints.points[i] = Keypoint::at(x, y);
    }
    Ok((painter.img, painter.parsing, keypoints))
}

/// Flat product shot of the garment on a white background. The mask is
/// the exact painted support (garment colors never reach white).
pub fn render_clothes_product(
    clothes: &ClothesSpec,
    height: usize,
    width: usize,
) -> (Image, Array2<f64>) {
    let mut painter = Painter::new(height, width, [1.0, 1.0, 1.0]);
    let (hf, wf) = (height as f64, width as f64);
    let scale_px = hf / 64.0;
    // torso panel
    painter.paint_rect(
        wf * 0.32,
        hf * 0.22,
        wf * 0.68,
        hf * 0.66,
        label::UPPER_CLOTHES,
        |x, y| clothes.color_at(x, y, scale_px),
    );
    // sleeves
    let sleeve_len = match clothes.sleeve {
        Sleeve::Short => 0.16,
        Sleeve::Long => 0.34,
    };
    for side in [-1.0, 1.0] {
        let sx = wf * 0.5 + side * wf * 0.17;
        let sy = hf * 0.25;
        let ex = sx + side * wf * 0.30 * sleeve_len / 0.34;
        let ey = sy + hf * sleeve_len;
        painter.paint_capsule(
            (sx, sy),
            (ex, ey),
            hf * 0.05,
            label::UPPER_CLOTHES,
            |x, y| clothes.color_at(x, y, scale_px),
        );
    }
    let mask = painter.parsing.indicator(label::UPPER_CLOTHES);
    (painter.img, mask)
}

/// Everything one triplet carries, including generator-side metadata used
/// by evaluation (pattern id, pose buckets).
#[derive(Debug, Clone)]
pub struct Triplet {
    pub source_image: Image,
    pub source_parsing: ParsingMap,
    pub source_pose: KeypointSet,
    pub target_image: Image,
    pub target_parsing: ParsingMap,
    pub target_pose: KeypointSet,
    pub clothes_image: Image,
    pub clothes_mask: Array2<f64>,
    pub pattern_id: usize,
    pub target_pose_bucket: usize,
}

/// Arms-raised bucket: either wrist above the neck.
pub fn pose_bucket(kps: &KeypointSet) -> usize {
    let neck_y = kps.points[KP_NECK].y;
    if kps.points[KP_R_WRIST].y < neck_y || kps.points[KP_L_WRIST].y < neck_y {
        1
    } else {
        0
    }
}

/// Number of target classes the evaluation classifier distinguishes:
/// pattern x pose bucket.
pub const NUM_CLASSES: usize = Pattern::COUNT * 2;

pub fn class_of(pattern_id: usize, bucket: usize) -> usize {
    pattern_id * 2 + bucket
}

/// Deterministic per-triplet specs: seed selects the dataset, the index
/// selects the ChaCha stream, so triplets are independent and reproducible.
pub fn triplet_specs(
    seed: u64,
    index: u64,
    height: usize,
    width: usize,
) -> Result<(PersonSpec, ClothesSpec, PoseSpec, PoseSpec)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    let person = PersonSpec::sample(&mut rng, seed ^ index, height);
    let clothes = ClothesSpec::sample(&mut rng);
    let pose_a = sample_pose_on_canvas(&mut rng, &person, height, width)?;
    // target pose must differ noticeably (diverse poses per triplet)
    let mut pose_b = sample_pose_on_canvas(&mut rng, &person, height, width)?;
    for _ in 0..100 {
        if pose_a.angle_distance(&pose_b) >= 1.0 {
            break;
        }
        pose_b = sample_pose_on_canvas(&mut rng, &person, height, width)?;
    }
    Ok((person, clothes, pose_a, pose_b))
}

pub fn make_triplet(seed: u64, index: u64, height: usize, width: usize) -> Result<Triplet> {
    let (person, clothes, pose_a, pose_b) = triplet_specs(seed, index, height, width)?;
    let (source_image, source_parsing, source_pose) =
        render_person(&person, &clothes, &pose_a, height, width)?;
    let (target_image, target_parsing, target_pose) =
        render_person(&person, &clothes, &pose_b, height, width)?;
    let (clothes_image, clothes_mask) = render_clothes_product(&clothes, height, width);
    let bucket = pose_bucket(&target_pose);
    Ok(Triplet {
        source_image,
        source_parsing,
        source_pose,
        target_image,
        target_parsing,
        target_pose,
        clothes_image,
        clothes_mask,
        pattern_id: clothes.pattern.id(),
        target_pose_bucket: bucket,
    })
}

/// Split assignment rule: the test split takes floor(count / 6) triplets
/// (a 5:1 train/test ratio), assigned to the highest indices.
pub fn split_counts(count: usize) -> (usize, usize) {
    let n_test = count / 6;
    (count - n_test, n_test)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: String,
    pub seed: u64,
    pub index: u64,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub height: usize,
    pub width: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn triplet_dir(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.split).join(&entry.id)
    }

    pub fn split(&self, split: &str) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let text = std::fs::read_to_string(root.join("manifest.tsv"))
            .map_err(|e| Error::Dataset(format!("cannot read manifest: {e}")))?;
        let mut entries = Vec::new();
        let mut dims = None;
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# resolution\t") {
                let parts: Vec<&str> = rest.split('x').collect();
                if parts.len() == 2 {
                    dims = Some((
                        parts[0].parse().map_err(|_| Error::Dataset("bad resolution".into()))?,
                        parts[1].parse().map_err(|_| Error::Dataset("bad resolution".into()))?,
                    ));
                }
                continue;
            }
            if line.starts_with('#') || line.starts_with("triplet\t") || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::Dataset(format!("malformed manifest row: {line:?}")));
            }
            let id = cols[0].to_string();
            let index: u64 = id
                .strip_prefix('t')
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Dataset(format!("bad triplet id {id:?}")))?;
            entries.push(ManifestEntry {
                id,
                split: cols[1].to_string(),
                seed: cols[2]
                    .parse()
                    .map_err(|_| Error::Dataset("bad seed column".into()))?,
                index,
            });
        }
        let (height, width) =
            dims.ok_or_else(|| Error::Dataset("manifest missing resolution header".into()))?;
        Ok(Self {
            root,
            height,
            width,
            entries,
        })
    }
}

/// Generate `count` triplets under `out_root` and write the manifest.
/// Identical `(count, seed, resolution)` produce byte-identical trees.
pub fn make_dataset(
    count: usize,
    seed: u64,
    height: usize,
    width: usize,
    out_root: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(Error::invalid("dataset needs at least one triplet"));
    }
    let root = out_root.as_ref().to_path_buf();
    let (n_train, _n_test) = split_counts(count);
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let split = if i < n_train { "train" } else { "test" };
        let id = format!("t{i:05}");
        let dir = root.join(split).join(&id);
        std::fs::create_dir_all(&dir)?;
        let t = make_triplet(seed, i as u64, height, width)?;
        t.source_image.save_png(dir.join("source.png"))?;
        t.target_image.save_png(dir.join("target.png"))?;
        t.clothes_image.save_png(dir.join("clothes.png"))?;
        save_mask_png(&t.clothes_mask, dir.join("clothes_mask.png"))?;
        t.source_parsing.save_png(dir.join("source_parsing.png"))?;
        t.target_parsing.save_png(dir.join("target_parsing.png"))?;
        t.source_pose.save(dir.join("source_pose.txt"))?;
        t.target_pose.save(dir.join("target_pose.txt"))?;
        entries.push(ManifestEntry {
            id,
            split: split.to_string(),
            seed,
            index: i as u64,
        });
    }
    let mut manifest = String::new();
    manifest.push_str("# split rule: n_test = floor(count/6), n_train = count - n_test (5:1); test takes the highest indices\n");
    manifest.push_str(&format!("# resolution\t{height}x{width}\n"));
    manifest.push_str("triplet\tsplit\tseed\n");
    for e in &entries {
        manifest.push_str(&format!("{}\t{}\t{}\n", e.id, e.split, e.seed));
    }
    std::fs::write(root.join("manifest.tsv"), manifest)?;
    Ok(DatasetManifest {
        root,
        height,
        width,
        entries,
    })
}

pub fn save_mask_png(mask: &Array2<f64>, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (mask[[y, x]] * 255.0).round().clamp(0.0, 255.0) as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_mask_png(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let img = image::open(path.as_ref())?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut mask = Array2::zeros((h, w));
    for (x, y, px) in img.enumerate_pixels() {
        mask[[y as usize, x as usize]] = px.0[0] as f64 / 255.0;
    }
    Ok(mask)
}

/// A triplet read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedTriplet {
    pub source_image: Image,
    pub source_parsing: ParsingMap,
    pub source_pose: KeypointSet,
    pub target_image: Image,
    pub target_parsing: ParsingMap,
    pub target_pose: KeypointSet,
    pub clothes_image: Image,
    pub clothes_mask: Array2<f64>,
}

pub fn load_triplet(dir: impl AsRef<Path>) -> Result<LoadedTriplet> {
    let dir = dir.as_ref();
    Ok(LoadedTriplet {
        source_image: Image::load_png(dir.join("source.png"))?,
        source_parsing: ParsingMap::load_png(dir.join("source_parsing.png"))?,
        source_pose: KeypointSet::load(dir.join("source_pose.txt"))?,
        target_image: Image::load_png(dir.join("target.png"))?,
        target_parsing: ParsingMap::load_png(dir.join("target_parsing.png"))?,
        target_pose: KeypointSet::load(dir.join("target_pose.txt"))?,
        clothes_image: Image::load_png(dir.join("clothes.png"))?,
        clothes_mask: load_mask_png(dir.join("clothes_mask.png"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::clothes_mask_from_parsing;

    const H: usize = 64;
    const W: usize = 48;

    #[test]
    fn rendering_is_deterministic() {
        let a = make_triplet(7, 0, H, W).unwrap();
        let b = make_triplet(7, 0, H, W).unwrap();
        assert_eq!(a.source_image, b.source_image);
        assert_eq!(a.source_parsing, b.source_parsing);
        assert_eq!(a.target_image, b.target_image);
        assert_eq!(a.clothes_mask, b.clothes_mask);
        let c = make_triplet(8, 0, H, W).unwrap();
        assert_ne!(a.source_image, c.source_image);
    }

    #[test]
    fn hair_region_matches_parsing() {
        // the hair pixels are exactly those the hair primitives painted
        // last; re-rendering with a sentinel hair color locates them
        let (person, clothes, pose, _) = triplet_specs(3, 1, H, W).unwrap();
        let (img, parsing, _) = render_person(&person, &clothes, &pose, H, W).unwrap();
        let mut sentinel = person;
        sentinel.hair_color = [0.123, 0.456, 0.789];
        let (img2, parsing2, _) = render_person(&sentinel, &clothes, &pose, H, W).unwrap();
        assert_eq!(parsing, parsing2);
        for y in 0..H {
            for x in 0..W {
                let changed = (0..3).any(|c| img.data[[c, y, x]] != img2.data[[c, y, x]]);
                let is_hair = parsing.labels[[y, x]] == label::HAIR;
                assert_eq!(changed, is_hair, "pixel ({y},{x})");
            }
        }
        assert!(parsing.indicator(label::HAIR).sum() > 0.0);
    }

    #[test]
    fn wrist_matches_independent_forward_kinematics() {
        let (person, clothes, pose, _) = triplet_specs(11, 2, H, W).unwrap();
        let (_, _, kps) = render_person(&person, &clothes, &pose, H, W).unwrap();
        // independent recomputation of the right wrist: shoulder ->
        // elbow -> wrist with the same angle convention
        let p = &person.proportions;
        let a = &pose.angles;
        let up = (a[0].sin(), -a[0].cos());
        let right = (-up.1, up.0);
        let neck = (
            pose.center.0 + up.0 * p.torso_len * pose.scale,
            pose.center.1 + up.1 * p.torso_len * pose.scale,
        );
        let sh = (
            neck.0 - right.0 * p.shoulder_half * pose.scale,
            neck.1 - right.1 * p.shoulder_half * pose.scale,
        );
        let dir1 = ((-a[2]).sin(), (-a[2]).cos());
        let el = (
            sh.0 + dir1.0 * p.upper_arm * pose.scale,
            sh.1 + dir1.1 * p.upper_arm * pose.scale,
        );
        let dir2 = ((-(a[2] + a[4])).sin(), (-(a[2] + a[4])).cos());
        let wr = (
            el.0 + dir2.0 * p.forearm * pose.scale,
            el.1 + dir2.1 * p.forearm * pose.scale,
        );
        let got = kps.points[KP_R_WRIST];
        let d = ((got.x - wr.0).powi(2) + (got.y - wr.1).powi(2)).sqrt();
        assert!(d < 0.5, "wrist off by {d} px");
    }

    #[test]
    fn product_shot_solid_color_and_mask_support() {
        let clothes = ClothesSpec {
            base_color: [0.2, 0.4, 0.6],
            pattern: Pattern::Solid,
            sleeve: Sleeve::Long,
        };
        let (img, mask) = render_clothes_product(&clothes, H, W);
        assert!(mask.sum() > 0.0);
        for y in 0..H {
            for x in 0..W {
                let px = [img.data[[0, y, x]], img.data[[1, y, x]], img.data[[2, y, x]]];
                if mask[[y, x]] == 1.0 {
                    assert_eq!(px, [0.2, 0.4, 0.6]);
                } else {
                    assert_eq!(px, [1.0, 1.0, 1.0]);
                }
            }
        }
    }

    #[test]
    fn different_patterns_give_different_products() {
        let base = ClothesSpec {
            base_color: [0.3, 0.3, 0.5],
            pattern: Pattern::Solid,
            sleeve: Sleeve::Short,
        };
        let (solid, _) = render_clothes_product(&base, H, W);
        for pattern in [Pattern::Stripes, Pattern::Dots] {
            let spec = ClothesSpec { pattern, ..base };
            let (img, _) = render_clothes_product(&spec, H, W);
            assert_ne!(solid, img, "{pattern:?} should differ from solid");
        }
    }

    #[test]
    fn clothes_coverage_consistent_with_parsing_mask() {
        for idx in 0..4 {
            // sentinel garment color marks painted-last clothes pixels
            let (person, mut clothes, pose, _) = triplet_specs(21, idx, H, W).unwrap();
            clothes.base_color = [0.111, 0.222, 0.333];
            clothes.pattern = Pattern::Solid;
            let (img2, _, _) = render_person(&person, &clothes, &pose, H, W).unwrap();
            let (img1, parsing, _) = render_person(
                &person,
                &ClothesSpec {
                    base_color: [0.4, 0.5, 0.6],
                    pattern: Pattern::Solid,
                    sleeve: clothes.sleeve,
                },
                &pose,
                H,
                W,
            )
            .unwrap();
            let derived = clothes_mask_from_parsing(&parsing);
            for y in 0..H {
                for x in 0..W {
                    let changed = (0..3).any(|c| img1.data[[c, y, x]] != img2.data[[c, y, x]]);
                    assert_eq!(changed, derived[[y, x]] == 1.0);
                }
            }
        }
    }

    #[test]
    fn keypoints_encode_without_clipping() {
        // channel sums must equal the unclipped disc count (computed on an
        // unbounded canvas), proving no disc touches the border
        let unclipped = |cx: f64, cy: f64| -> f64 {
            let mut n = 0.0;
            for y in (cy as i64 - 6)..=(cy as i64 + 6) {
                for x in (cx as i64 - 6)..=(cx as i64 + 6) {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    if dx * dx + dy * dy <= 16.0 {
                        n += 1.0;
                    }
                }
            }
            n
        };
        for idx in 0..6 {
            let t = make_triplet(5, idx, H, W).unwrap();
            for kps in [&t.source_pose, &t.target_pose] {
                let hm = crate::image::encode_pose_heatmap(kps, H, W, 4.0).unwrap();
                for k in 0..NUM_KEYPOINTS {
                    let sum = hm.channels.index_axis(ndarray::Axis(0), k).sum();
                    let expect = unclipped(kps.points[k].x, kps.points[k].y);
                    assert_eq!(sum, expect, "keypoint {k} clipped");
                }
            }
        }
    }

    #[test]
    fn triplet_poses_are_distinct() {
        for idx in 0..6 {
            let (_, _, a, b) = triplet_specs(9, idx, H, W).unwrap();
            assert!(a.angle_distance(&b) >= 1.0);
        }
    }

    #[test]
    fn dataset_tree_layout_and_split() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = make_dataset(6, 3, 32, 24, dir.path()).unwrap();
        assert_eq!(manifest.split("train").len(), 5);
        assert_eq!(manifest.split("test").len(), 1);
        let entry = &manifest.entries[0];
        let tdir = manifest.triplet_dir(entry);
        let files = [
            "source.png",
            "target.png",
            "clothes.png",
            "clothes_mask.png",
            "source_parsing.png",
            "target_parsing.png",
            "source_pose.txt",
            "target_pose.txt",
        ];
        for f in files {
            assert!(tdir.join(f).exists(), "{f} missing");
        }
        assert_eq!(std::fs::read_dir(&tdir).unwrap().count(), files.len());
        // reload and spot-check content equality
        let loaded = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(loaded.entries, manifest.entries);
        assert_eq!((loaded.height, loaded.width), (32, 24));
        let t = load_triplet(&tdir).unwrap();
        assert_eq!(t.source_image.height(), 32);
    }

    #[test]
    fn split_arithmetic_60_gives_50_10() {
        assert_eq!(split_counts(60), (50, 10));
        assert_eq!(split_counts(1), (1, 0));
        assert_eq!(split_counts(7), (6, 1));
    }

    #[test]
    fn same_seed_gives_byte_identical_trees() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        make_dataset(3, 11, 32, 24, dir_a.path()).unwrap();
        make_dataset(3, 11, 32, 24, dir_b.path()).unwrap();
        let walk = |root: &Path| -> Vec<(String, Vec<u8>)> {
            let mut out = Vec::new();
            let mut stack = vec![root.to_path_buf()];
            while let Some(d) = stack.pop() {
                let mut items: Vec<_> = std::fs::read_dir(&d).unwrap().map(|e| e.unwrap()).collect();
                items.sort_by_key(|e| e.path());
                for e in items {
                    if e.path().is_dir() {
                        stack.push(e.path());
                    } else {
                        let rel = e
                            .path()
                            .strip_prefix(root)
                            .unwrap()
                            .to_string_lossy()
                            .into_owned();
                        out.push((rel, std::fs::read(e.path()).unwrap()));
                    }
                }
            }
            out.sort();
            out
        };
        assert_eq!(walk(dir_a.path()), walk(dir_b.path()));
    }

    #[test]
    fn roundtrip_through_disk_is_lossless_for_parsing_and_pose() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = make_dataset(1, 5, H, W, dir.path()).unwrap();
        let t_mem = make_triplet(5, 0, H, W).unwrap();
        let t_disk = load_triplet(manifest.triplet_dir(&manifest.entries[0])).unwrap();
        assert_eq!(t_mem.source_parsing, t_disk.source_parsing);
        assert_eq!(t_mem.target_parsing, t_disk.target_parsing);
        assert_eq!(t_mem.source_pose, t_disk.source_pose);
        assert_eq!(t_mem.clothes_mask, t_disk.clothes_mask);
        let _ = dir;
    }
}
