//! Scenario files: maze layout plus camera, rig, session and anomaly settings.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::overhead::{MarkerSpec, OverheadCamera};
use crate::session::SessionConfig;
use crate::slam::NoiseParams;
use crate::stereo::StereoRig;
use crate::world::{maze_area_m2, CellState, GridIndex, MazeSpec, Occupancy, OccupancyGrid, Pose};

/// Area band for bundled tracks, square meters.
pub const AREA_BAND_M2: (f64, f64) = (25.0, 50.0);

const DEFAULT_JSON: &str = include_str!("../data/scenarios/default.json");
const ANOMALY_JSON: &str = include_str!("../data/scenarios/anomaly.json");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("malformed scenario JSON: {0}")]
    Json(String),
    #[error("maze row {row}: {detail}")]
    Grid { row: usize, detail: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("unknown bundled scenario {0:?}")]
    UnknownBundled(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MazeFile {
    pub width_cells: usize,
    pub height_cells: usize,
    pub cell_size: f64,
    /// One string per row, row 0 (y = 0) first; `#` wall, `.` free.
    pub cells: Vec<String>,
    pub start: Pose,
    pub goal: GridIndex,
}

impl MazeFile {
    pub fn from_maze(maze: &MazeSpec) -> Self {
        Self {
            width_cells: maze.grid().width_cells(),
            height_cells: maze.grid().height_cells(),
            cell_size: maze.cell_size(),
            cells: maze.grid().to_rows(),
            start: maze.start(),
            goal: maze.goal(),
        }
    }

    pub fn to_maze(&self) -> Result<MazeSpec, ScenarioError> {
        if self.cells.len() != self.height_cells {
            return Err(ScenarioError::Grid {
                row: self.cells.len().min(self.height_cells),
                detail: format!("expected {} rows, found {}", self.height_cells, self.cells.len()),
            });
        }
        let mut cells = Vec::with_capacity(self.width_cells * self.height_cells);
        for (row, text) in self.cells.iter().enumerate() {
            let n = text.chars().count();
            if n != self.width_cells {
                return Err(ScenarioError::Grid {
                    row,
                    detail: format!("expected {} cells, found {n}", self.width_cells),
                });
            }
            for (col, ch) in text.chars().enumerate() {
                cells.push(match ch {
                    '#' => CellState::Wall,
                    '.' => CellState::Free,
                    other => {
                        return Err(ScenarioError::Grid {
                            row,
                            detail: format!("column {col}: unexpected character {other:?}"),
                        })
                    }
                });
            }
        }
        let grid = OccupancyGrid::new(self.width_cells, self.height_cells, self.cell_size, cells)
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        let start = Pose::new(self.start.x, self.start.y, self.start.theta);
        MazeSpec::new(grid, start, self.goal).map_err(|e| ScenarioError::Invalid(e.to_string()))
    }
}

/// An obstacle that appears once `after_step` primitives have executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObstacleSpec {
    pub after_step: u64,
    pub cell: GridIndex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    #[serde(default)]
    pub name: String,
    pub maze: MazeFile,
    #[serde(default)]
    pub camera: OverheadCamera,
    #[serde(default)]
    pub marker: MarkerSpec,
    #[serde(default)]
    pub stereo: StereoRig,
    #[serde(default)]
    pub session: SessionConfig,
    #[serde(default)]
    pub obstacles: Vec<ObstacleSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub maze: MazeSpec,
    pub camera: OverheadCamera,
    pub marker: MarkerSpec,
    pub stereo: StereoRig,
    pub config: SessionConfig,
    pub obstacles: Vec<ObstacleSpec>,
}

impl Scenario {
    pub fn new(name: &str, maze: MazeSpec) -> Self {
        Self {
            name: name.to_string(),
            maze,
            camera: OverheadCamera::default(),
            marker: MarkerSpec::default(),
            stereo: StereoRig::default(),
            config: SessionConfig::default(),
            obstacles: Vec::new(),
        }
    }

    pub fn from_file(file: ScenarioFile) -> Result<Self, ScenarioError> {
        let maze = file.maze.to_maze()?;
        for o in &file.obstacles {
            if !maze.grid().contains(o.cell) || !maze.grid().is_free(o.cell) {
                return Err(ScenarioError::Invalid(format!(
                    "obstacle cell ({}, {}) is not a free cell",
                    o.cell.col, o.cell.row
                )));
            }
        }
        file.stereo.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        file.session.validate()?;
        Ok(Self {
            name: file.name,
            maze,
            camera: file.camera,
            marker: file.marker,
            stereo: file.stereo,
            config: file.session,
            obstacles: file.obstacles,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let file: ScenarioFile = serde_json::from_str(text).map_err(|e| ScenarioError::Json(e.to_string()))?;
        Self::from_file(file)
    }

    pub fn to_file(&self) -> ScenarioFile {
        ScenarioFile {
            name: self.name.clone(),
            maze: MazeFile::from_maze(&self.maze),
            camera: self.camera,
            marker: self.marker,
            stereo: self.stereo,
            session: self.config.clone(),
            obstacles: self.obstacles.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_file()).expect("scenario serializes");
        s.push('\n');
        s
    }

    pub fn bundled_names() -> &'static [&'static str] {
        &["default", "anomaly"]
    }

    pub fn bundled(name: &str) -> Result<Self, ScenarioError> {
        match name {
            "default" => Self::from_json(DEFAULT_JSON),
            "anomaly" => Self::from_json(ANOMALY_JSON),
            other => Err(ScenarioError::UnknownBundled(other.to_string())),
        }
    }

    pub fn area_m2(&self) -> f64 {
        maze_area_m2(&self.maze)
    }

    /// Noiseless sensors and actuators. The filter assumes a tiny noise
    /// floor instead of zero so its covariances stay invertible.
    pub fn zero_noise(mut self) -> Self {
        const FLOOR: f64 = 1e-4;
        self.camera.noise_sigma = 0.0;
        self.stereo.noise_sigma = 0.0;
        self.config.world_noise = NoiseParams::zero();
        self.config.filter_noise = NoiseParams {
            sigma_v: FLOOR,
            sigma_omega: FLOOR,
            sigma_r: FLOOR,
            sigma_phi: FLOOR,
            ..self.config.filter_noise
        };
        self.config.initial_sigma_xy = FLOOR;
        self.config.initial_sigma_theta = FLOOR;
        self
    }
}

/// Warning text when an area falls outside the bundled-track band.
pub fn area_warning(area_m2: f64) -> Option<String> {
    let (lo, hi) = AREA_BAND_M2;
    (!(lo..=hi).contains(&area_m2)).then(|| format!("area {area_m2:.1} m\u{b2} outside {lo}\u{2013}{hi} m\u{b2}"))
}
