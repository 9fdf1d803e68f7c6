//! Simulated overhead camera: rendering, Otsu segmentation, Sobel edges and
//! two-disk fiducial localisation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::GrayImage;
use crate::rng;
use crate::world::{
    wrap_angle, CellState, GridIndex, MazeSpec, Occupancy, OccupancyGrid, Point, Pose,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VisionError {
    #[error("overhead resolution {px_per_cell:.2} px per cell is below the minimum of 8")]
    ResolutionTooLow { px_per_cell: f64 },
    #[error("histogram is degenerate (constant image)")]
    DegenerateHistogram,
    #[error("image {width}x{height} is too small (needs at least 3x3)")]
    ImageTooSmall { width: usize, height: usize },
    #[error("{0} marker not found")]
    MarkerNotFound(MarkerKind),
    #[error("image size {image_w}x{image_h} px does not match a {cells_w}x{cells_h} grid")]
    DimensionMismatch {
        image_w: usize,
        image_h: usize,
        cells_w: usize,
        cells_h: usize,
    },
    #[error("invalid camera configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarkerKind {
    Front,
    Rear,
}

impl std::fmt::Display for MarkerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MarkerKind::Front => "front",
            MarkerKind::Rear => "rear",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverheadCamera {
    pub px_per_m: f64,
    pub noise_sigma: f64,
    pub floor_level: u8,
    pub wall_level: u8,
}

impl Default for OverheadCamera {
    fn default() -> Self {
        Self {
            px_per_m: 50.0,
            noise_sigma: 2.0,
            floor_level: 200,
            wall_level: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarkerSpec {
    pub front_intensity: u8,
    pub rear_intensity: u8,
    pub disk_radius: f64,
    /// Front-to-rear centre distance along the heading.
    pub marker_separation: f64,
}

impl Default for MarkerSpec {
    fn default() -> Self {
        Self {
            front_intensity: 250,
            rear_intensity: 10,
            disk_radius: 0.06,
            marker_separation: 0.24,
        }
    }
}

impl MarkerSpec {
    /// Front and rear disk centres for a robot pose.
    pub fn disk_centers(&self, pose: &Pose) -> (Point, Point) {
        let half = self.marker_separation / 2.0;
        (pose.ahead(half), pose.ahead(-half))
    }
}

/// Checks the intensity-separation invariants between camera levels and markers.
pub fn validate_setup(cam: &OverheadCamera, marker: &MarkerSpec) -> Result<(), VisionError> {
    check_geometry(cam, marker)?;
    for m in [marker.front_intensity, marker.rear_intensity] {
        for l in [cam.wall_level, cam.floor_level] {
            if (m as f64 - l as f64).abs() <= 3.0 * cam.noise_sigma {
                return Err(VisionError::InvalidConfig(format!(
                    "marker intensity {m} is within 3 sigma of level {l}"
                )));
            }
        }
    }
    Ok(())
}

fn check_geometry(cam: &OverheadCamera, marker: &MarkerSpec) -> Result<(), VisionError> {
    let bad = |m: String| Err(VisionError::InvalidConfig(m));
    if !(cam.px_per_m.is_finite() && cam.px_per_m > 0.0) {
        return bad(format!("px_per_m {} must be positive", cam.px_per_m));
    }
    if !(cam.noise_sigma.is_finite() && cam.noise_sigma >= 0.0) {
        return bad(format!("noise_sigma {} must be >= 0", cam.noise_sigma));
    }
    if cam.wall_level >= cam.floor_level {
        return bad("wall_level must be darker than floor_level".into());
    }
    for m in [marker.front_intensity, marker.rear_intensity] {
        if (cam.wall_level..=cam.floor_level).contains(&m) {
            return bad(format!("marker intensity {m} lies between wall and floor levels"));
        }
    }
    if !(marker.disk_radius > 0.0 && marker.marker_separation > 2.0 * marker.disk_radius) {
        return bad("marker disks must have positive radius and not overlap".into());
    }
    Ok(())
}

/// Renders the top-down view. Image row 0 covers `y` in `[0, 1/px_per_m)`.
pub fn render_overhead(
    maze: &MazeSpec,
    robot: &Pose,
    cam: &OverheadCamera,
    marker: &MarkerSpec,
    seed: u64,
) -> Result<GrayImage, VisionError> {
    check_geometry(cam, marker)?;
    let px_per_cell = cam.px_per_m * maze.cell_size();
    if px_per_cell < 8.0 {
        return Err(VisionError::ResolutionTooLow { px_per_cell });
    }
    let width = (maze.width_m() * cam.px_per_m).round() as usize;
    let height = (maze.height_m() * cam.px_per_m).round() as usize;
    let cs = maze.cell_size();
    let ppm = cam.px_per_m;

    let (front, rear) = marker.disk_centers(robot);
    let r_px = marker.disk_radius * ppm;
    let r2 = r_px * r_px;
    let in_disk = |c: &Point, px: f64, py: f64| {
        let dx = px - c.x * ppm;
        let dy = py - c.y * ppm;
        dx * dx + dy * dy <= r2
    };

    let mut rng = rng::seeded(seed);
    let mut img = GrayImage::filled(width, height, 0);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let cell = GridIndex::new(
                ((px / ppm) / cs).floor() as usize,
                ((py / ppm) / cs).floor() as usize,
            );
            let mut value = if maze.is_free(cell) {
                if in_disk(&front, px, py) {
                    marker.front_intensity
                } else if in_disk(&rear, px, py) {
                    marker.rear_intensity
                } else {
                    cam.floor_level
                }
            } else {
                cam.wall_level
            } as f64;
            if cam.noise_sigma > 0.0 {
                value += cam.noise_sigma * rng::gaussian(&mut rng);
            }
            img.set(x, y, value.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(img)
}

/// Otsu's threshold: pixels `<= t` form the dark class. Ties go to the lower `t`.
pub fn otsu_threshold(img: &GrayImage) -> Result<u8, VisionError> {
    let hist = img.histogram();
    let total: i128 = hist.iter().map(|&c| c as i128).sum();
    let sum_all: i128 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as i128 * c as i128)
        .sum();
    let mut n0: i128 = 0;
    let mut s0: i128 = 0;
    let mut best: Option<(u8, f64)> = None;
    for t in 0..255usize {
        n0 += hist[t] as i128;
        s0 += t as i128 * hist[t] as i128;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        // Between-class variance up to the constant factor 1/N^2.
        let num = (sum_all * n0 - total * s0) as f64;
        let score = num * num / (n0 as f64 * n1 as f64);
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((t as u8, score));
        }
    }
    best.map(|(t, _)| t).ok_or(VisionError::DegenerateHistogram)
}

/// Sobel gradient magnitude scaled so the strongest response is 255.
pub fn detect_edges(img: &GrayImage) -> Result<GrayImage, VisionError> {
    let (w, h) = (img.width(), img.height());
    if w < 3 || h < 3 {
        return Err(VisionError::ImageTooSmall {
            width: w,
            height: h,
        });
    }
    let mut mag = vec![0.0f64; w * h];
    let mut max = 0.0f64;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let p = |dx: isize, dy: isize| {
                img.get((x as isize + dx) as usize, (y as isize + dy) as usize) as f64
            };
            let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            let m = gx.hypot(gy);
            mag[y * w + x] = m;
            max = max.max(m);
        }
    }
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    Ok(GrayImage::from_fn(w, h, |x, y| {
        (mag[y * w + x] * scale).round().clamp(0.0, 255.0) as u8
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridDims {
    pub width_cells: usize,
    pub height_cells: usize,
    pub cell_size: f64,
}

impl From<&MazeSpec> for GridDims {
    fn from(m: &MazeSpec) -> Self {
        Self {
            width_cells: m.width_cells(),
            height_cells: m.height_cells(),
            cell_size: m.cell_size(),
        }
    }
}

/// Occupancy grid recovered from an overhead image.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredMap {
    pub grid: OccupancyGrid,
    /// Fraction of counted pixels at or below the threshold, per cell (row-major).
    pub occupied_fraction: Vec<f64>,
    pub threshold: u8,
}

impl RecoveredMap {
    /// Fraction of cells whose state agrees with `truth`.
    pub fn agreement<O: Occupancy>(&self, truth: &O) -> f64 {
        let total = self.grid.width_cells() * self.grid.height_cells();
        let same = (0..self.grid.height_cells())
            .flat_map(|r| (0..self.grid.width_cells()).map(move |c| GridIndex::new(c, r)))
            .filter(|g| self.grid.cell(*g) == truth.cell(*g))
            .count();
        same as f64 / total as f64
    }
}

/// Segments the image into a cell grid. Pixels close to the detected
/// robot markers are ignored so the dark rear disk is not read as a wall.
pub fn segment_grid(
    img: &GrayImage,
    cam: &OverheadCamera,
    marker: &MarkerSpec,
    dims: GridDims,
) -> Result<RecoveredMap, VisionError> {
    let px_per_cell = cam.px_per_m * dims.cell_size;
    let expect_w = px_per_cell * dims.width_cells as f64;
    let expect_h = px_per_cell * dims.height_cells as f64;
    if (img.width() as f64 - expect_w).abs() > px_per_cell
        || (img.height() as f64 - expect_h).abs() > px_per_cell
    {
        return Err(VisionError::DimensionMismatch {
            image_w: img.width(),
            image_h: img.height(),
            cells_w: dims.width_cells,
            cells_h: dims.height_cells,
        });
    }
    let threshold = otsu_threshold(img)?;

    let exclusion_px = marker.disk_radius * cam.px_per_m + 2.0;
    let centroids: Vec<(f64, f64)> = [
        (marker.front_intensity, MarkerKind::Front),
        (marker.rear_intensity, MarkerKind::Rear),
    ]
    .into_iter()
    .filter_map(|(level, kind)| marker_centroid_px(img, level, kind).ok())
    .collect();

    let n = dims.width_cells * dims.height_cells;
    let mut dark = vec![0u32; n];
    let mut counted = vec![0u32; n];
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if centroids
                .iter()
                .any(|(cx, cy)| (px - cx).hypot(py - cy) <= exclusion_px)
            {
                continue;
            }
            let col = (px / px_per_cell).floor() as usize;
            let row = (py / px_per_cell).floor() as usize;
            if col >= dims.width_cells || row >= dims.height_cells {
                continue;
            }
            let i = row * dims.width_cells + col;
            counted[i] += 1;
            if img.get(x, y) <= threshold {
                dark[i] += 1;
            }
        }
    }
    let occupied_fraction: Vec<f64> = dark
        .iter()
        .zip(&counted)
        .map(|(&d, &c)| if c == 0 { 0.0 } else { d as f64 / c as f64 })
        .collect();
    let cells = occupied_fraction
        .iter()
        .map(|&f| if f > 0.5 { CellState::Wall } else { CellState::Free })
        .collect();
    let grid = OccupancyGrid::new(dims.width_cells, dims.height_cells, dims.cell_size, cells)
        .map_err(|e| VisionError::InvalidConfig(e.to_string()))?;
    Ok(RecoveredMap {
        grid,
        occupied_fraction,
        threshold,
    })
}

const MARKER_TOLERANCE: i32 = 20;
const MIN_BLOB_PIXELS: usize = 5;

/// Weighted centroid (pixel units) of the largest 8-connected blob of
/// pixels within the marker tolerance of `level`.
fn marker_centroid_px(
    img: &GrayImage,
    level: u8,
    kind: MarkerKind,
) -> Result<(f64, f64), VisionError> {
    let (w, h) = (img.width(), img.height());
    let candidate =
        |x: usize, y: usize| (img.get(x, y) as i32 - level as i32).abs() <= MARKER_TOLERANCE;
    let mut label = vec![0u32; w * h];
    let mut next_label = 0u32;
    let mut best: Option<(usize, Vec<usize>)> = None;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if label[start] != 0 || !candidate(start % w, start / w) {
            continue;
        }
        next_label += 1;
        label[start] = next_label;
        stack.push(start);
        let mut members = Vec::new();
        while let Some(i) = stack.pop() {
            members.push(i);
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if label[j] == 0 && candidate(nx as usize, ny as usize) {
                        label[j] = next_label;
                        stack.push(j);
                    }
                }
            }
        }
        if best.as_ref().is_none_or(|(n, _)| members.len() > *n) {
            best = Some((members.len(), members));
        }
    }
    let (count, mut members) = best.ok_or(VisionError::MarkerNotFound(kind))?;
    if count < MIN_BLOB_PIXELS {
        return Err(VisionError::MarkerNotFound(kind));
    }
    // Sum in raster order so the result does not depend on traversal order.
    members.sort_unstable();
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for i in members {
        let v = img.pixels()[i] as i32;
        let weight = (MARKER_TOLERANCE + 1 - (v - level as i32).abs()) as f64;
        sx += weight * ((i % w) as f64 + 0.5);
        sy += weight * ((i / w) as f64 + 0.5);
        sw += weight;
    }
    Ok((sx / sw, sy / sw))
}

/// Recovers the robot pose from the two marker disks.
pub fn locate_robot(
    img: &GrayImage,
    cam: &OverheadCamera,
    marker: &MarkerSpec,
) -> Result<Pose, VisionError> {
    let (fx, fy) = marker_centroid_px(img, marker.front_intensity, MarkerKind::Front)?;
    let (rx, ry) = marker_centroid_px(img, marker.rear_intensity, MarkerKind::Rear)?;
    let ppm = cam.px_per_m;
    let front = Point::new(fx / ppm, fy / ppm);
    let rear = Point::new(rx / ppm, ry / ppm);
    Ok(Pose::new(
        (front.x + rear.x) / 2.0,
        (front.y + rear.y) / 2.0,
        wrap_angle((front.y - rear.y).atan2(front.x - rear.x)),
    ))
}

/// True when both marker disks (plus a one-pixel margin) lie over free cells,
/// i.e. the overhead camera can see the whole fiducial.
pub fn markers_visible(maze: &MazeSpec, pose: &Pose, cam: &OverheadCamera, marker: &MarkerSpec) -> bool {
    let (front, rear) = marker.disk_centers(pose);
    let reach = marker.disk_radius + 1.0 / cam.px_per_m;
    [front, rear].iter().all(|c| {
        (0..16).all(|k| {
            let a = k as f64 * std::f64::consts::PI / 8.0;
            let p = Point::new(c.x + reach * a.cos(), c.y + reach * a.sin());
            maze.world_to_grid(p.x, p.y)
                .map(|g| maze.is_free(g))
                .unwrap_or(false)
        })
    })
}
