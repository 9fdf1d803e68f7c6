//! Template scene narration and spatial audio cue parameters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::{wrap_angle, CellState, Direction, GridIndex, MazeSpec, Occupancy, Point, Pose};

pub const WALL_CUE_MS: u32 = 120;
pub const OPENING_CUE_MS: u32 = 180;
pub const GOAL_CUE_MS: u32 = 400;
/// Speech cue length per word of narration.
pub const SPEECH_MS_PER_WORD: u32 = 300;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NarratorError {
    #[error("pose ({x:.3}, {y:.3}) is not in a free cell")]
    PoseInWall { x: f64, y: f64 },
    #[error("bearing to a coincident point is undefined")]
    Undefined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Wall,
    Opening,
    Goal,
    RobotSelf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneEntity {
    pub kind: EntityKind,
    /// Degrees in (-180, 180]; 0 is dead ahead, positive is to the left.
    pub bearing_deg: f64,
    pub distance_m: f64,
    pub cell_dir: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseReport {
    pub x: f64,
    pub y: f64,
    pub heading: Direction,
    pub cells_east: i64,
    pub cells_north: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub text: String,
    pub entities: Vec<SceneEntity>,
    pub pose_report: PoseReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioCue {
    pub azimuth_deg: f64,
    pub gain: f64,
    pub duration_ms: u32,
    pub text: String,
}

/// Square window of cells around the robot, absolute orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalPatch {
    pub center: GridIndex,
    pub radius: usize,
    pub cell_size: f64,
    cells: Vec<CellState>,
}

impl LocalPatch {
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Cell at offset (dc, dr) from the centre; outside the window reads as Wall.
    pub fn at(&self, dc: isize, dr: isize) -> CellState {
        let r = self.radius as isize;
        if dc.abs() > r || dr.abs() > r {
            return CellState::Wall;
        }
        let side = self.side() as isize;
        self.cells[((dr + r) * side + (dc + r)) as usize]
    }

    fn cell_center(&self, dc: isize, dr: isize) -> Point {
        Point::new(
            ((self.center.col as isize + dc) as f64 + 0.5) * self.cell_size,
            ((self.center.row as isize + dr) as f64 + 0.5) * self.cell_size,
        )
    }

    /// Sensing radius in meters.
    pub fn radius_m(&self) -> f64 {
        self.radius as f64 * self.cell_size
    }
}

pub fn sense_local(maze: &MazeSpec, pose: &Pose, radius_cells: usize) -> Result<LocalPatch, NarratorError> {
    let center = maze
        .world_to_grid(pose.x, pose.y)
        .ok()
        .filter(|g| maze.is_free(*g))
        .ok_or(NarratorError::PoseInWall { x: pose.x, y: pose.y })?;
    let r = radius_cells as isize;
    let mut cells = Vec::with_capacity((2 * radius_cells + 1).pow(2));
    for dr in -r..=r {
        for dc in -r..=r {
            let state = match (center.col.checked_add_signed(dc), center.row.checked_add_signed(dr)) {
                (Some(col), Some(row)) => maze.cell(GridIndex::new(col, row)),
                _ => CellState::Wall,
            };
            cells.push(state);
        }
    }
    Ok(LocalPatch {
        center,
        radius: radius_cells,
        cell_size: maze.cell_size(),
        cells,
    })
}

/// Bearing of `target` from `pose` in degrees, positive to the left.
pub fn relative_bearing(pose: &Pose, target: Point) -> Result<f64, NarratorError> {
    let (dx, dy) = (target.x - pose.x, target.y - pose.y);
    if dx == 0.0 && dy == 0.0 {
        return Err(NarratorError::Undefined);
    }
    let deg = wrap_angle(dy.atan2(dx) - pose.theta).to_degrees();
    // Cell centres carry float noise; a target on the heading line is exactly ahead.
    Ok(if deg.abs() < 1e-9 { 0.0 } else { deg })
}

/// Robot-relative word for a bearing: within 45 degrees is ahead, beyond 135 is behind.
pub fn direction_word(bearing_deg: f64) -> &'static str {
    if bearing_deg.abs() <= 45.0 {
        "ahead"
    } else if bearing_deg.abs() >= 135.0 {
        "behind"
    } else if bearing_deg > 0.0 {
        "left"
    } else {
        "right"
    }
}

fn placement(word: &str) -> &'static str {
    match word {
        "ahead" => "ahead",
        "behind" => "behind you",
        "left" => "to your left",
        _ => "to your right",
    }
}

pub fn plural(n: i64, unit: &str) -> String {
    if n == 1 {
        format!("1 {unit}")
    } else {
        format!("{n} {unit}s")
    }
}

/// Sentence describing one entity.
pub fn entity_clause(e: &SceneEntity) -> String {
    let word = direction_word(e.bearing_deg);
    match e.kind {
        EntityKind::Wall => format!("Wall {}.", placement(word)),
        EntityKind::Opening => format!("Opening {}.", placement(word)),
        EntityKind::Goal if e.distance_m == 0.0 => "You are at the goal.".to_string(),
        EntityKind::Goal => format!("The goal is {}, {:.1} meters away.", placement(word), e.distance_m),
        EntityKind::RobotSelf => "You are here.".to_string(),
    }
}

pub fn pose_report(est: &Pose, start: &Pose, cell_size: f64) -> PoseReport {
    PoseReport {
        x: est.x,
        y: est.y,
        heading: Direction::from_heading(est.theta),
        cells_east: ((est.x - start.x) / cell_size).round() as i64,
        cells_north: ((est.y - start.y) / cell_size).round() as i64,
    }
}

/// "You are N cells east and M cells north of start, facing <compass>."
pub fn pose_sentence(report: &PoseReport) -> String {
    let ew = if report.cells_east < 0 { "west" } else { "east" };
    let ns = if report.cells_north < 0 { "south" } else { "north" };
    format!(
        "You are {} {ew} and {} {ns} of start, facing {}.",
        plural(report.cells_east.abs(), "cell"),
        plural(report.cells_north.abs(), "cell"),
        report.heading.compass_word()
    )
}

/// Sort key: |bearing| then distance, left before right. Quantised so that
/// rounding noise in cell centres cannot reorder symmetric entities.
fn by_bearing(a: &SceneEntity, b: &SceneEntity) -> std::cmp::Ordering {
    let q = |v: f64, scale: f64| (v * scale).round() as i64;
    q(a.bearing_deg.abs(), 1e6)
        .cmp(&q(b.bearing_deg.abs(), 1e6))
        .then(q(a.distance_m, 1e9).cmp(&q(b.distance_m, 1e9)))
        .then(b.bearing_deg.total_cmp(&a.bearing_deg))
}

/// Adjacent cells and (if within the patch radius) the goal, seen from `est`.
pub fn scene_entities(patch: &LocalPatch, est: &Pose, goal: Option<Point>) -> Vec<SceneEntity> {
    let mut out = Vec::with_capacity(5);
    for dir in Direction::ALL {
        let (dc, dr) = dir.delta();
        let target = patch.cell_center(dc, dr);
        let kind = match patch.at(dc, dr) {
            CellState::Wall => EntityKind::Wall,
            CellState::Free => EntityKind::Opening,
        };
        out.push(SceneEntity {
            kind,
            bearing_deg: relative_bearing(est, target).unwrap_or(0.0),
            distance_m: est.position().distance(&target),
            cell_dir: dir,
        });
    }
    if let Some(g) = goal {
        let d = est.position().distance(&g);
        if d <= patch.radius_m() + 1e-9 {
            out.push(SceneEntity {
                kind: EntityKind::Goal,
                bearing_deg: relative_bearing(est, g).unwrap_or(0.0),
                distance_m: d,
                cell_dir: Direction::from_heading((g.y - est.y).atan2(g.x - est.x)),
            });
        }
    }
    out.sort_by(by_bearing);
    out
}

pub fn describe_scene(
    patch: &LocalPatch,
    est: &Pose,
    start: &Pose,
    goal: Option<Point>,
) -> SceneDescription {
    let entities = scene_entities(patch, est, goal);
    let report = pose_report(est, start, patch.cell_size);
    let mut clauses: Vec<String> = entities
        .iter()
        .filter(|e| e.kind != EntityKind::Goal)
        .map(entity_clause)
        .collect();
    clauses.extend(entities.iter().filter(|e| e.kind == EntityKind::Goal).map(entity_clause));
    clauses.push(pose_sentence(&report));
    SceneDescription {
        text: clauses.join(" "),
        entities,
        pose_report: report,
    }
}

pub fn gain_for_distance(distance_m: f64) -> f64 {
    1.0 / (1.0 + distance_m.max(0.0))
}

/// Cue for speaking `text` straight ahead at full gain.
pub fn speech_cue(text: &str) -> AudioCue {
    let words = text.split_whitespace().count().max(1) as u32;
    AudioCue {
        azimuth_deg: 0.0,
        gain: 1.0,
        duration_ms: words * SPEECH_MS_PER_WORD,
        text: text.to_string(),
    }
}

/// One cue per entity, then a speech cue carrying the full text.
pub fn to_audio_cues(desc: &SceneDescription) -> Vec<AudioCue> {
    let mut cues: Vec<AudioCue> = desc
        .entities
        .iter()
        .map(|e| AudioCue {
            azimuth_deg: e.bearing_deg,
            gain: gain_for_distance(e.distance_m),
            duration_ms: match e.kind {
                EntityKind::Wall => WALL_CUE_MS,
                EntityKind::Opening => OPENING_CUE_MS,
                EntityKind::Goal => GOAL_CUE_MS,
                EntityKind::RobotSelf => OPENING_CUE_MS,
            },
            text: entity_clause(e),
        })
        .collect();
    cues.push(speech_cue(&desc.text));
    cues
}
