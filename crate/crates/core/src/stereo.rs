//! Simulated robot-mounted stereo rig and SAD block matching.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::GrayImage;
use crate::rng;
use crate::world::{cast_ray, FaceAxis, MazeSpec, Occupancy, Point, Pose, RayHit};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StereoError {
    #[error("pose ({x:.3}, {y:.3}) is inside a wall")]
    PoseInWall { x: f64, y: f64 },
    #[error("left image is {lw}x{lh} but right image is {rw}x{rh}")]
    ShapeMismatch {
        lw: usize,
        lh: usize,
        rw: usize,
        rh: usize,
    },
    #[error("window {window} must be odd and fit inside the image")]
    BadWindow { window: usize },
    #[error("disparity {0} is negative")]
    InvalidDisparity(f64),
    #[error("invalid stereo rig: {0}")]
    InvalidRig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StereoRig {
    pub focal_px: f64,
    pub baseline_m: f64,
    pub width_px: usize,
    pub height_px: usize,
    pub d_max: usize,
    pub hfov_deg: f64,
    /// SAD window side length (odd).
    pub window: usize,
    /// Std-dev of additive image noise.
    pub noise_sigma: f64,
}

impl Default for StereoRig {
    fn default() -> Self {
        Self {
            focal_px: 90.0,
            baseline_m: 0.06,
            width_px: 96,
            height_px: 64,
            d_max: 48,
            hfov_deg: 60.0,
            window: 5,
            noise_sigma: 2.0,
        }
    }
}

impl StereoRig {
    pub fn validate(&self) -> Result<(), StereoError> {
        let bad = |m: &str| Err(StereoError::InvalidRig(m.to_string()));
        if !(self.focal_px > 0.0 && self.baseline_m > 0.0) {
            return bad("focal length and baseline must be positive");
        }
        if self.width_px == 0 || self.height_px == 0 {
            return bad("image size must be positive");
        }
        if self.d_max == 0 || self.d_max >= self.width_px {
            return bad("d_max must be in 1..width_px");
        }
        if self.window % 2 == 0 || self.window > self.width_px.min(self.height_px) {
            return bad("window must be odd and fit inside the image");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0");
        }
        Ok(())
    }

    pub fn min_depth(&self) -> f64 {
        self.focal_px * self.baseline_m / self.d_max as f64
    }

    pub fn principal_x(&self) -> f64 {
        (self.width_px as f64 - 1.0) / 2.0
    }

    /// Bearing of an image column relative to the optical axis; positive is left.
    pub fn column_bearing(&self, x: f64) -> f64 {
        ((self.principal_x() - x) / self.focal_px).atan()
    }

    fn eye(&self, pose: &Pose, side: f64) -> Point {
        let half = side * self.baseline_m / 2.0;
        Point::new(
            pose.x - half * pose.theta.sin(),
            pose.y + half * pose.theta.cos(),
        )
    }

    pub fn left_eye(&self, pose: &Pose) -> Point {
        self.eye(pose, 1.0)
    }

    pub fn right_eye(&self, pose: &Pose) -> Point {
        self.eye(pose, -1.0)
    }
}

/// Sub-rays per column where a pixel straddles two wall faces.
const SUPERSAMPLE: usize = 8;
/// Wall texture octaves: (lattice spacing along the wall in metres, amplitude).
const TEXTURE_OCTAVES: [(f64, f64); 5] = [
    (0.024, 40.0),
    (0.048, 40.0),
    (0.096, 36.0),
    (0.192, 30.0),
    (0.384, 24.0),
];
/// Above this many lattice cells per pixel an octave is treated as its mean.
const MAX_CELLS_PER_PIXEL: f64 = 32.0;

fn face_key(hit: &RayHit) -> (u8, i64, i8) {
    let axis = match hit.axis {
        FaceAxis::Vertical => 1u8,
        FaceAxis::Horizontal => 2,
    };
    (axis, hit.line, hit.facing)
}

fn face_seed(hit: &RayHit) -> u64 {
    let (axis, line, facing) = face_key(hit);
    rng::mix(axis as u64 ^ rng::mix(line as u64 ^ rng::mix(facing as i64 as u64)))
}

/// Lattice value in [-1, 1].
#[inline]
fn lattice(seed: u64, i: i64) -> f64 {
    let bits = rng::mix(seed ^ (i as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93));
    (bits >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

/// Mean of the linearly interpolated lattice over `[t0, t1]` (lattice units).
fn lattice_mean(seed: u64, t0: f64, t1: f64) -> f64 {
    let (a, b) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
    let value = |t: f64| {
        let i = t.floor();
        let f = t - i;
        let i = i as i64;
        lattice(seed, i) * (1.0 - f) + lattice(seed, i + 1) * f
    };
    if b - a < 1e-9 {
        return value(a);
    }
    if b - a > MAX_CELLS_PER_PIXEL {
        return 0.0;
    }
    let mut total = 0.0;
    let mut lo = a;
    while lo < b {
        let hi = (lo.floor() + 1.0).min(b);
        total += (value(lo) + value(hi)) * 0.5 * (hi - lo);
        lo = hi;
    }
    total / (b - a)
}

/// Texture over the wall interval `[u0, u1]` at image row `row`, box-filtered.
fn texture(hit: &RayHit, row: usize, u0: f64, u1: f64) -> f64 {
    let face = face_seed(hit);
    TEXTURE_OCTAVES
        .iter()
        .enumerate()
        .map(|(k, (spacing, amp))| {
            let seed = rng::mix(face ^ rng::mix(((k as u64) << 32) | row as u64));
            amp * lattice_mean(seed, u0 / spacing, u1 / spacing)
        })
        .sum()
}

fn render_eye(maze: &MazeSpec, pose: &Pose, rig: &StereoRig, eye: Point) -> Vec<f64> {
    let (w, h) = (rig.width_px, rig.height_px);
    let ray = |x: f64| cast_ray(maze, maze.cell_size(), eye, pose.theta + rig.column_bearing(x));
    let edges: Vec<RayHit> = (0..=w).map(|e| ray(e as f64 - 0.5)).collect();

    let mut img = vec![0.0; w * h];
    for x in 0..w {
        let (a, b) = (&edges[x], &edges[x + 1]);
        // (hit, u0, u1) pieces contributing equally to the pixel
        let pieces: Vec<(RayHit, f64, f64)> = if face_key(a) == face_key(b) {
            vec![(*a, a.offset_along(), b.offset_along())]
        } else {
            let step = 1.0 / SUPERSAMPLE as f64;
            (0..SUPERSAMPLE)
                .map(|s| {
                    let lo = ray(x as f64 - 0.5 + s as f64 * step);
                    let hi = ray(x as f64 - 0.5 + (s + 1) as f64 * step);
                    if face_key(&lo) == face_key(&hi) {
                        (lo, lo.offset_along(), hi.offset_along())
                    } else {
                        let mid = ray(x as f64 - 0.5 + (s as f64 + 0.5) * step);
                        (mid, mid.offset_along(), mid.offset_along())
                    }
                })
                .collect()
        };
        let weight = 1.0 / pieces.len() as f64;
        for row in 0..h {
            let v: f64 = pieces
                .iter()
                .map(|(hit, u0, u1)| texture(hit, row, *u0, *u1))
                .sum();
            img[row * w + x] = 128.0 + v * weight;
        }
    }
    img
}

fn quantise(values: &[f64], rig: &StereoRig, seed: u64) -> GrayImage {
    let mut rng = rng::seeded(seed);
    let pixels = values
        .iter()
        .map(|&v| {
            let n = if rig.noise_sigma > 0.0 {
                rig.noise_sigma * rng::gaussian(&mut rng)
            } else {
                0.0
            };
            (v + n).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    GrayImage::new(rig.width_px, rig.height_px, pixels).expect("rig dimensions are positive")
}

fn check_pose(maze: &MazeSpec, pose: &Pose) -> Result<(), StereoError> {
    match maze.world_to_grid(pose.x, pose.y) {
        Ok(g) if maze.is_free(g) => Ok(()),
        _ => Err(StereoError::PoseInWall {
            x: pose.x,
            y: pose.y,
        }),
    }
}

/// Renders a rectified left/right pair by casting one set of rays per eye.
pub fn render_stereo(
    maze: &MazeSpec,
    pose: &Pose,
    rig: &StereoRig,
    seed: u64,
) -> Result<(GrayImage, GrayImage), StereoError> {
    rig.validate()?;
    check_pose(maze, pose)?;
    let left = render_eye(maze, pose, rig, rig.left_eye(pose));
    let right = render_eye(maze, pose, rig, rig.right_eye(pose));
    Ok((
        quantise(&left, rig, rng::derive_seed(seed, 1, 0)),
        quantise(&right, rig, rng::derive_seed(seed, 2, 0)),
    ))
}

/// Per-pixel disparities of the left image. `None` marks invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    width: usize,
    height: usize,
    integer: Vec<Option<u32>>,
    refined: Vec<Option<f64>>,
}

impl DisparityMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        self.refined[y * self.width + x]
    }

    /// Integer-stage SAD argmin, before refinement.
    pub fn integer(&self, x: usize, y: usize) -> Option<u32> {
        self.integer[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.refined.iter().filter(|d| d.is_some()).count()
    }
}

/// SAD cost volume indexed by left-image pixel and disparity.
struct CostVolume {
    width: usize,
    depth: usize,
    costs: Vec<u32>,
}

impl CostVolume {
    fn build(left: &GrayImage, right: &GrayImage, radius: usize, d_max: usize) -> Self {
        let (w, h) = (left.width(), left.height());
        let depth = d_max + 1;
        let mut costs = vec![u32::MAX; w * h * depth];
        let mut diff = vec![0u32; w * h];
        let mut colsum = vec![0u32; w * h];
        let win = 2 * radius + 1;
        for d in 0..depth {
            if d >= w {
                break;
            }
            for y in 0..h {
                for x in d..w {
                    diff[y * w + x] =
                        (left.get(x, y) as i32 - right.get(x - d, y) as i32).unsigned_abs();
                }
            }
            // Vertical window sums centred on each row.
            for x in d..w {
                let mut acc: u32 = (0..win.min(h)).map(|j| diff[j * w + x]).sum();
                for y in radius..h.saturating_sub(radius) {
                    colsum[y * w + x] = acc;
                    if y + radius + 1 < h {
                        acc += diff[(y + radius + 1) * w + x];
                        acc -= diff[(y - radius) * w + x];
                    }
                }
            }
            for y in radius..h.saturating_sub(radius) {
                let first = d + radius;
                if first + radius >= w {
                    continue;
                }
                let mut acc: u32 = (first - radius..=first + radius)
                    .map(|i| colsum[y * w + i])
                    .sum();
                for x in first..w - radius {
                    costs[(y * w + x) * depth + d] = acc;
                    if x + radius + 1 < w {
                        acc += colsum[y * w + x + radius + 1];
                        acc -= colsum[y * w + x - radius];
                    }
                }
            }
        }
        Self {
            width: w,
            depth,
            costs,
        }
    }

    #[inline]
    fn at(&self, x: usize, y: usize, d: usize) -> u32 {
        self.costs[(y * self.width + x) * self.depth + d]
    }
}

fn parabolic_offset(prev: u32, best: u32, next: u32) -> f64 {
    let (a, b, c) = (prev as f64, best as f64, next as f64);
    let denom = a - 2.0 * b + c;
    if denom <= 0.0 {
        return 0.0;
    }
    ((a - c) / (2.0 * denom)).clamp(-0.5, 0.5)
}

/// Argmin over `costs(d)` for `d` in `0..=limit`, ties to the smaller `d`,
/// with parabolic refinement when both neighbours exist.
fn best_disparity(limit: usize, cost: impl Fn(usize) -> u32) -> (u32, f64) {
    let mut best_d = 0;
    let mut best_c = cost(0);
    for d in 1..=limit {
        let c = cost(d);
        if c < best_c {
            best_c = c;
            best_d = d;
        }
    }
    let refined = if best_d > 0 && best_d < limit {
        best_d as f64 + parabolic_offset(cost(best_d - 1), best_c, cost(best_d + 1))
    } else {
        best_d as f64
    };
    (best_d as u32, refined)
}

/// Mean absolute horizontal gradient a window needs before it is matched.
const TEXTURE_THRESHOLD: f64 = 6.0;
/// The best cost must beat every cost outside `d ± 1` by this fraction.
const UNIQUENESS_RATIO: f64 = 0.1;

fn texture_mask(img: &GrayImage, radius: usize) -> Vec<bool> {
    let (w, h) = (img.width(), img.height());
    let mut grad = vec![0u32; w * h];
    for y in 0..h {
        for x in 1..w.saturating_sub(1) {
            grad[y * w + x] = (img.get(x + 1, y) as i32 - img.get(x - 1, y) as i32).unsigned_abs();
        }
    }
    let area = ((2 * radius + 1) * (2 * radius + 1)) as f64;
    let mut mask = vec![false; w * h];
    for y in radius..h - radius {
        for x in radius..w - radius {
            let mut sum = 0u32;
            for j in y - radius..=y + radius {
                for i in x - radius..=x + radius {
                    sum += grad[j * w + i];
                }
            }
            mask[y * w + x] = sum as f64 / area >= TEXTURE_THRESHOLD;
        }
    }
    mask
}

fn is_unique(limit: usize, best: usize, cost: impl Fn(usize) -> u32) -> bool {
    let floor = cost(best) as f64 * (1.0 + UNIQUENESS_RATIO);
    (0..=limit)
        .filter(|d| d.abs_diff(best) > 1)
        .all(|d| cost(d) as f64 > floor)
}

/// Block matching with SAD costs, parabolic sub-pixel refinement and a
/// left-right consistency check (tolerance 1 px) and a speckle filter.
pub fn block_match(
    left: &GrayImage,
    right: &GrayImage,
    window: usize,
    d_max: usize,
) -> Result<DisparityMap, StereoError> {
    let (w, h) = (left.width(), left.height());
    if (w, h) != (right.width(), right.height()) {
        return Err(StereoError::ShapeMismatch {
            lw: w,
            lh: h,
            rw: right.width(),
            rh: right.height(),
        });
    }
    if window % 2 == 0 || window > w.min(h) {
        return Err(StereoError::BadWindow { window });
    }
    let r = window / 2;
    let d_max = d_max.min(w - 1);
    let volume = CostVolume::build(left, right, r, d_max);

    let mut left_int = vec![None; w * h];
    let mut left_ref = vec![None; w * h];
    let mut right_ref = vec![None; w * h];
    let textured = texture_mask(left, r);
    for y in r..h - r {
        for x in r..w - r {
            let limit = d_max.min(x - r);
            let cost = |d| volume.at(x, y, d);
            let (di, dr) = best_disparity(limit, cost);
            if textured[y * w + x] && is_unique(limit, di as usize, cost) {
                left_int[y * w + x] = Some(di);
                left_ref[y * w + x] = Some(dr);
            }

            // Right-image pixel x matched against left pixel x + d.
            let limit = d_max.min(w - 1 - r - x);
            let (_, dr) = best_disparity(limit, |d| volume.at(x + d, y, d));
            right_ref[y * w + x] = Some(dr);
        }
    }

    let mut integer = vec![None; w * h];
    let mut refined = vec![None; w * h];
    for y in r..h - r {
        for x in r..w - r {
            let i = y * w + x;
            let (Some(dl), Some(di)) = (left_ref[i], left_int[i]) else {
                continue;
            };
            let xr = x as f64 - dl.round();
            if xr < r as f64 {
                continue;
            }
            if let Some(dr) = right_ref[y * w + xr as usize] {
                if (dl - dr).abs() <= 1.0 {
                    integer[i] = Some(di);
                    refined[i] = Some(dl);
                }
            }
        }
    }
    // Speckle filter: a match with no 4-neighbour within 1 px is dropped.
    let isolated: Vec<usize> = (0..w * h)
        .filter(|&i| {
            let Some(d) = refined[i] else { return false };
            let (x, y) = (i % w, i / w);
            let near = |j: usize| refined[j].is_some_and(|n: f64| (n - d).abs() <= 1.0);
            !((x > 0 && near(i - 1)) || (x + 1 < w && near(i + 1)) || (y > 0 && near(i - w)) || (y + 1 < h && near(i + w)))
        })
        .collect();
    for i in isolated {
        integer[i] = None;
        refined[i] = None;
    }
    Ok(DisparityMap {
        width: w,
        height: h,
        integer,
        refined,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Depth {
    Meters(f64),
    OutOfRange,
}

impl Depth {
    pub fn meters(self) -> Option<f64> {
        match self {
            Depth::Meters(m) => Some(m),
            Depth::OutOfRange => None,
        }
    }
}

pub fn depth_from_disparity(d: f64, rig: &StereoRig) -> Result<Depth, StereoError> {
    if d.is_nan() || d < 0.0 {
        return Err(StereoError::InvalidDisparity(d));
    }
    if d <= 0.5 {
        return Ok(Depth::OutOfRange);
    }
    Ok(Depth::Meters(rig.focal_px * rig.baseline_m / d))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnDepth {
    pub bearing_deg: f64,
    /// Median depth over the column's valid in-range rows; `None` when fewer
    /// than a quarter of the rows qualify.
    /// Walls are vertical, so every row of a column sees the same depth and the
    /// median only discards matching outliers.
    pub depth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthProfile {
    pub columns: Vec<ColumnDepth>,
}

pub fn depth_profile(disparity: &DisparityMap, rig: &StereoRig) -> DepthProfile {
    let columns = (0..disparity.width())
        .map(|x| {
            let mut depths: Vec<f64> = (0..disparity.height())
                .filter_map(|y| disparity.get(x, y))
                .filter_map(|d| depth_from_disparity(d, rig).ok().and_then(Depth::meters))
                .collect();
            depths.sort_by(f64::total_cmp);
            // Half-occluded strips keep a few stray matches; too few rows is no reading.
            let supported = depths.len() * 4 >= disparity.height();
            ColumnDepth {
                bearing_deg: rig.column_bearing(x as f64).to_degrees(),
                depth: depths.get(depths.len() / 2).copied().filter(|_| supported),
            }
        })
        .collect();
    DepthProfile { columns }
}

/// Half-width of the forward cone used for clearance.
pub const CLEARANCE_HALF_ANGLE_DEG: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clearance {
    pub meters: f64,
    /// Set when stereo produced no valid depth and the ray-cast fallback was used.
    pub degraded: bool,
}

fn clearance_columns(rig: &StereoRig) -> impl Iterator<Item = usize> + '_ {
    (0..rig.width_px)
        .filter(|&x| rig.column_bearing(x as f64).to_degrees().abs() <= CLEARANCE_HALF_ANGLE_DEG)
}

/// Ray-cast depth (along the optical axis) of the nearest wall seen by the
/// left eye inside the forward cone.
pub fn ray_cast_clearance(maze: &MazeSpec, pose: &Pose, rig: &StereoRig) -> f64 {
    let eye = rig.left_eye(pose);
    clearance_columns(rig)
        .map(|x| {
            let bearing = rig.column_bearing(x as f64);
            let hit = cast_ray(maze, maze.cell_size(), eye, pose.theta + bearing);
            hit.distance * bearing.cos()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Stereo-measured distance to the nearest obstacle ahead.
pub fn front_clearance(
    maze: &MazeSpec,
    pose: &Pose,
    rig: &StereoRig,
    seed: u64,
) -> Result<Clearance, StereoError> {
    let (left, right) = render_stereo(maze, pose, rig, seed)?;
    let disparity = block_match(&left, &right, rig.window, rig.d_max)?;
    let profile = depth_profile(&disparity, rig);
    let measured = clearance_columns(rig)
        .filter_map(|x| profile.columns[x].depth)
        .fold(None, |acc: Option<f64>, z| Some(acc.map_or(z, |a| a.min(z))));
    Ok(match measured {
        Some(meters) => Clearance {
            meters,
            degraded: false,
        },
        None => Clearance {
            meters: ray_cast_clearance(maze, pose, rig),
            degraded: true,
        },
    })
}
