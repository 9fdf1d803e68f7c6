//! wasm-bindgen exports for the static demo page in `www/`.
//!
//! Every export takes and returns plain strings and numbers. Results are JSON
//! objects; failures come back as `{"error": "..."}` rather than exceptions.

use echomaze_core::command::{parse_text, render, CommandError};
use echomaze_core::planner::{path_to_plan, solve_bfs, Provenance};
use echomaze_core::scenario::MazeFile;
use echomaze_core::stereo::{front_clearance, ray_cast_clearance, StereoRig};
use echomaze_core::world::{generate_maze, maze_area_m2, Direction, MazeSpec, Pose};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn reply(result: Result<Value, String>) -> String {
    result.unwrap_or_else(|e| json!({ "error": e })).to_string()
}

fn load(maze_json: &str) -> Result<MazeSpec, String> {
    let file: MazeFile = serde_json::from_str(maze_json).map_err(|e| e.to_string())?;
    file.to_maze().map_err(|e| e.to_string())
}

/// Generates a perfect maze; the reply is a maze file plus its area in m².
#[wasm_bindgen]
pub fn generate(width_cells: usize, height_cells: usize, cell_size: f64, seed: u64) -> String {
    reply(
        generate_maze(width_cells, height_cells, cell_size, seed)
            .map_err(|e| e.to_string())
            .map(|maze| json!({ "maze": MazeFile::from_maze(&maze), "area_m2": maze_area_m2(&maze) })),
    )
}

/// Shortest route from the start cell to the goal, as cells and as a move plan.
#[wasm_bindgen]
pub fn solve(maze_json: &str) -> String {
    reply(load(maze_json).and_then(|maze| {
        let path = solve_bfs(&maze, maze.start_cell(), maze.goal()).map_err(|e| e.to_string())?;
        let plan = path_to_plan(&path, Direction::from_heading(maze.start().theta), Provenance::Bfs)
            .map_err(|e| e.to_string())?;
        Ok(json!({
            "path": path.iter().map(|g| [g.col, g.row]).collect::<Vec<_>>(),
            "plan": plan.to_text(),
            "forward_cells": plan.forward_cells(),
        }))
    }))
}

/// Stereo clearance straight ahead of a pose, next to the exact ray-cast value.
#[wasm_bindgen]
pub fn clearance(maze_json: &str, x: f64, y: f64, theta: f64, seed: u64) -> String {
    reply(load(maze_json).and_then(|maze| {
        let pose = Pose::new(x, y, theta);
        let rig = StereoRig::default();
        let c = front_clearance(&maze, &pose, &rig, seed).map_err(|e| e.to_string())?;
        Ok(json!({
            "meters": c.meters,
            "degraded": c.degraded,
            "ray_cast_m": ray_cast_clearance(&maze, &pose, &rig),
        }))
    }))
}

/// Parses one utterance; on success also returns the canonical re-rendering.
#[wasm_bindgen]
pub fn parse_command(text: &str) -> String {
    reply(match parse_text(text) {
        Ok(program) => Ok(json!({ "program": program, "canonical": render(&program) })),
        Err(CommandError::Parse(e)) => Ok(json!({ "error": e.to_string(), "index": e.index })),
        Err(e) => Err(e.to_string()),
    })
}
