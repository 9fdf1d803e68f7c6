//! Maze solvers and compilation of cell paths into movement primitives.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::slam::MotionInput;
use crate::world::{Direction, GridIndex, Occupancy};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlannerError {
    #[error("no path from {from:?} to {to:?}")]
    NoPath { from: GridIndex, to: GridIndex },
    #[error("cell {0:?} is not free")]
    BlockedCell(GridIndex),
    #[error("wall follower exceeded {0} steps")]
    StepCapExceeded(usize),
    #[error("step cap {cap} is below the minimum {min}")]
    StepCapTooSmall { cap: usize, min: usize },
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("plan enters wall cell {0:?}")]
    EntersWall(GridIndex),
    #[error("cannot parse plan token {0:?}")]
    BadToken(String),
    #[error("cruise speeds must be positive")]
    InvalidSpeed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hand {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "cells", rename_all = "snake_case")]
pub enum MovePrimitive {
    Forward(u32),
    TurnLeft,
    TurnRight,
}

impl fmt::Display for MovePrimitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MovePrimitive::Forward(n) => write!(f, "F{n}"),
            MovePrimitive::TurnLeft => f.write_str("L"),
            MovePrimitive::TurnRight => f.write_str("R"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Bfs,
    WallFollower,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub steps: Vec<MovePrimitive>,
    pub provenance: Provenance,
}

impl Plan {
    pub fn new(steps: Vec<MovePrimitive>, provenance: Provenance) -> Self {
        Self { steps, provenance }
    }

    /// Whitespace separated text form, e.g. `F2 L F1 R F3`.
    pub fn to_text(&self) -> String {
        self.steps
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn parse_text(text: &str, provenance: Provenance) -> Result<Self, PlannerError> {
        let steps = text
            .split_whitespace()
            .map(|t| t.parse())
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { steps, provenance })
    }

    pub fn forward_cells(&self) -> u64 {
        self.steps
            .iter()
            .map(|s| match s {
                MovePrimitive::Forward(n) => *n as u64,
                _ => 0,
            })
            .sum()
    }
}

impl FromStr for MovePrimitive {
    type Err = PlannerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "L" => Ok(MovePrimitive::TurnLeft),
            "R" => Ok(MovePrimitive::TurnRight),
            _ => {
                let n = s
                    .strip_prefix('F')
                    .filter(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
                    .and_then(|d| d.parse::<u32>().ok())
                    .filter(|n| *n >= 1)
                    .ok_or_else(|| PlannerError::BadToken(s.to_string()))?;
                Ok(MovePrimitive::Forward(n))
            }
        }
    }
}

fn require_free<O: Occupancy + ?Sized>(grid: &O, g: GridIndex) -> Result<(), PlannerError> {
    if grid.is_free(g) {
        Ok(())
    } else {
        Err(PlannerError::BlockedCell(g))
    }
}

/// Shortest 4-connected path, endpoints included. Neighbours are expanded
/// N, E, S, W so ties resolve deterministically.
pub fn solve_bfs<O: Occupancy + ?Sized>(
    grid: &O,
    start: GridIndex,
    goal: GridIndex,
) -> Result<Vec<GridIndex>, PlannerError> {
    require_free(grid, start)?;
    require_free(grid, goal)?;
    let w = grid.width_cells();
    let idx = |g: GridIndex| g.row * w + g.col;
    let mut parent: Vec<Option<GridIndex>> = vec![None; w * grid.height_cells()];
    let mut seen = vec![false; parent.len()];
    let mut queue = VecDeque::from([start]);
    seen[idx(start)] = true;
    while let Some(cur) = queue.pop_front() {
        if cur == goal {
            let mut path = vec![cur];
            let mut at = cur;
            while let Some(p) = parent[idx(at)] {
                path.push(p);
                at = p;
            }
            path.reverse();
            return Ok(path);
        }
        for (_, next) in grid.free_neighbors(cur) {
            if !seen[idx(next)] {
                seen[idx(next)] = true;
                parent[idx(next)] = Some(cur);
                queue.push_back(next);
            }
        }
    }
    Err(PlannerError::NoPath { from: start, to: goal })
}

pub fn free_cell_count<O: Occupancy + ?Sized>(grid: &O) -> usize {
    (0..grid.height_cells())
        .flat_map(|r| (0..grid.width_cells()).map(move |c| GridIndex::new(c, r)))
        .filter(|g| grid.is_free(*g))
        .count()
}

/// Default wall-follower budget: four steps per free cell.
pub fn default_step_cap<O: Occupancy + ?Sized>(grid: &O) -> usize {
    4 * free_cell_count(grid)
}

/// Hand-on-wall walk: prefer the hand side, then straight, then the other
/// side, then back. Returns every visited cell, revisits included.
pub fn wall_follower<O: Occupancy + ?Sized>(
    grid: &O,
    start: GridIndex,
    heading: Direction,
    goal: GridIndex,
    hand: Hand,
    step_cap: usize,
) -> Result<Vec<GridIndex>, PlannerError> {
    require_free(grid, start)?;
    require_free(grid, goal)?;
    let min = default_step_cap(grid);
    if step_cap < min {
        return Err(PlannerError::StepCapTooSmall { cap: step_cap, min });
    }
    let mut path = vec![start];
    let (mut at, mut facing) = (start, heading);
    for _ in 0..step_cap {
        if at == goal {
            return Ok(path);
        }
        let order = match hand {
            Hand::Left => [facing.left(), facing, facing.right(), facing.opposite()],
            Hand::Right => [facing.right(), facing, facing.left(), facing.opposite()],
        };
        let Some((dir, next)) = order
            .iter()
            .find_map(|d| at.step(*d).filter(|n| grid.is_free(*n)).map(|n| (*d, n)))
        else {
            // Isolated start cell.
            return Err(PlannerError::NoPath { from: start, to: goal });
        };
        at = next;
        facing = dir;
        path.push(at);
    }
    if at == goal {
        Ok(path)
    } else {
        Err(PlannerError::StepCapExceeded(step_cap))
    }
}

/// Greedy compilation of a cell path: minimal turns, then merged forwards.
pub fn path_to_plan(
    path: &[GridIndex],
    start_heading: Direction,
    provenance: Provenance,
) -> Result<Plan, PlannerError> {
    if path.is_empty() {
        return Err(PlannerError::InvalidPath("empty path".into()));
    }
    let mut steps = Vec::new();
    let mut heading = start_heading;
    for pair in path.windows(2) {
        let dir = pair[0].direction_to(&pair[1]).ok_or_else(|| {
            PlannerError::InvalidPath(format!("{:?} -> {:?} are not 4-adjacent", pair[0], pair[1]))
        })?;
        match heading.quarter_turns_to(dir) {
            0 => {}
            1 => steps.push(MovePrimitive::TurnLeft),
            2 => steps.extend([MovePrimitive::TurnLeft, MovePrimitive::TurnLeft]),
            _ => steps.push(MovePrimitive::TurnRight),
        }
        heading = dir;
        match steps.last_mut() {
            Some(MovePrimitive::Forward(n)) => *n += 1,
            _ => steps.push(MovePrimitive::Forward(1)),
        }
    }
    Ok(Plan::new(steps, provenance))
}

/// Interprets a plan on the grid, returning the visited cells (start included)
/// and the final heading.
pub fn trace_plan<O: Occupancy + ?Sized>(
    grid: &O,
    plan: &Plan,
    start: GridIndex,
    heading: Direction,
) -> Result<(Vec<GridIndex>, Direction), PlannerError> {
    let mut cells = vec![start];
    let (mut at, mut facing) = (start, heading);
    for step in &plan.steps {
        match step {
            MovePrimitive::TurnLeft => facing = facing.left(),
            MovePrimitive::TurnRight => facing = facing.right(),
            MovePrimitive::Forward(n) => {
                for _ in 0..*n {
                    let next = at.step(facing).ok_or_else(|| {
                        PlannerError::InvalidPath(format!("plan leaves the grid at {at:?}"))
                    })?;
                    if !grid.is_free(next) {
                        return Err(PlannerError::EntersWall(next));
                    }
                    at = next;
                    cells.push(at);
                }
            }
        }
    }
    Ok((cells, facing))
}

pub fn plan_to_motions(
    plan: &Plan,
    v_cruise: f64,
    omega_cruise: f64,
    cell_size: f64,
) -> Result<Vec<MotionInput>, PlannerError> {
    if !(v_cruise > 0.0 && omega_cruise > 0.0 && cell_size > 0.0)
        || !(v_cruise.is_finite() && omega_cruise.is_finite() && cell_size.is_finite())
    {
        return Err(PlannerError::InvalidSpeed);
    }
    let turn_dt = std::f64::consts::FRAC_PI_2 / omega_cruise;
    Ok(plan
        .steps
        .iter()
        .map(|s| match s {
            MovePrimitive::Forward(n) => MotionInput::new(v_cruise, 0.0, *n as f64 * cell_size / v_cruise),
            MovePrimitive::TurnLeft => MotionInput::new(0.0, omega_cruise, turn_dt),
            MovePrimitive::TurnRight => MotionInput::new(0.0, -omega_cruise, turn_dt),
        })
        .collect())
}
