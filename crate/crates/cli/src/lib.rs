//! Subcommand implementations behind the `echomaze` binary.
//!
//! Exit codes: 0 success, 1 unreadable input or other error, 2 script
//! exhausted before the goal, 3 run ended in an unresolved safety halt,
//! 4 replay diverged from the recorded log.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use echomaze_core::command::parse_script;
use echomaze_core::event::canonicalize;
use echomaze_core::scenario::{area_warning, Scenario};
use echomaze_core::planner::{path_to_plan, solve_bfs, MovePrimitive, Provenance};
use echomaze_core::session::{log_text, run_script, Metrics, RunOutcome, ScriptRun};
use echomaze_core::world::{generate_maze, Direction, MazeSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_DIVERGED: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {detail}")]
    Unreadable { path: PathBuf, detail: String },
    #[error("cannot write {path}: {detail}")]
    Unwritable { path: PathBuf, detail: String },
    #[error("{0}")]
    Invalid(String),
}

/// Metrics plus run identity; matches the session's final metrics snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub outcome: RunOutcome,
    pub exit_code: i32,
    pub event_count: usize,
    /// Wall-clock seconds; the only field that varies between identical runs.
    pub runtime_s: f64,
    /// Script line numbers whose `@expect-error` marker disagreed with the result.
    pub expectation_mismatches: Vec<usize>,
    pub metrics: Metrics,
}

impl RunReport {
    pub fn from_run(run: &ScriptRun, runtime_s: f64) -> Self {
        Self {
            scenario: run.session.scenario().name.clone(),
            seed: run.session.seed(),
            outcome: run.outcome,
            exit_code: run.outcome.exit_code(),
            event_count: run.session.log().len(),
            runtime_s,
            expectation_mismatches: run.expectation_mismatches.clone(),
            metrics: run.session.metrics(),
        }
    }

    /// Pretty JSON with canonical numbers and a trailing newline.
    pub fn to_json(&self) -> String {
        let v = canonicalize(serde_json::to_value(self).expect("report serializes"));
        let mut s = serde_json::to_string_pretty(&v).expect("value serializes");
        s.push('\n');
        s
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Unreadable {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Unwritable {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// A scenario file, or a bundled scenario name when no such file exists.
pub fn load_scenario(arg: &Path) -> Result<Scenario, CliError> {
    if !arg.exists() {
        if let Some(name) = arg.to_str().filter(|n| Scenario::bundled_names().contains(n)) {
            return Scenario::bundled(name).map_err(|e| CliError::Invalid(e.to_string()));
        }
    }
    let text = read(arg)?;
    Scenario::from_json(&text).map_err(|e| CliError::Unreadable {
        path: arg.to_path_buf(),
        detail: e.to_string(),
    })
}

fn load_run(scenario: &Path, script: &Path, seed: u64, debug_truth: bool) -> Result<(ScriptRun, f64), CliError> {
    let mut scenario = load_scenario(scenario)?;
    scenario.config.debug_truth |= debug_truth;
    let lines = parse_script(&read(script)?).map_err(|e| CliError::Unreadable {
        path: script.to_path_buf(),
        detail: e.to_string(),
    })?;
    let started = Instant::now();
    let run = run_script(scenario, seed, &lines).map_err(|e| CliError::Invalid(e.to_string()))?;
    Ok((run, started.elapsed().as_secs_f64()))
}

pub struct RunArgs<'a> {
    pub scenario: &'a Path,
    pub script: &'a Path,
    pub seed: u64,
    pub debug_truth: bool,
    pub out: Option<&'a Path>,
    pub log: Option<&'a Path>,
}

/// Runs a script; returns the report and the exit code it implies.
pub fn run(args: &RunArgs) -> Result<(RunReport, String), CliError> {
    let (run, runtime) = load_run(args.scenario, args.script, args.seed, args.debug_truth)?;
    let report = RunReport::from_run(&run, runtime);
    let json = report.to_json();
    if let Some(out) = args.out {
        write(out, &json)?;
    }
    if let Some(log) = args.log {
        write(log, &log_text(run.session.log()))?;
    }
    Ok((report, json))
}

/// Parses `WxH`.
pub fn parse_cells(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Invalid(format!("expected WxH cell counts, got {s:?}"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((w.trim().parse().map_err(|_| bad())?, h.trim().parse().map_err(|_| bad())?))
}

/// Writes a generated scenario; returns the area warning, if any.
pub fn gen_maze(cells: (usize, usize), cell_size: f64, seed: u64, out: &Path) -> Result<Option<String>, CliError> {
    let maze = generate_maze(cells.0, cells.1, cell_size, seed).map_err(|e| CliError::Invalid(e.to_string()))?;
    let scenario = Scenario::new(&format!("generated-{}x{}-{seed}", cells.0, cells.1), maze);
    write(out, &scenario.to_json())?;
    Ok(area_warning(scenario.area_m2()))
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReplayResult {
    Identical { events: usize },
    Diverged { seq: u64, detail: String },
}

/// Regenerates a log and compares it line by line with the recorded one.
/// A divergence is named by the seq the regenerated log has at that line.
pub fn replay(log: &Path, scenario: &Path, script: &Path, seed: u64) -> Result<ReplayResult, CliError> {
    let recorded = read(log)?;
    let (run, _) = load_run(scenario, script, seed, false)?;
    let fresh = log_text(run.session.log());
    let mut old = recorded.lines();
    let mut new = fresh.lines();
    let seq_of = |line: &str| serde_json::from_str::<Value>(line).ok().and_then(|v| v["seq"].as_u64());
    let mut index = 0u64;
    loop {
        index += 1;
        match (old.next(), new.next()) {
            (None, None) => {
                return Ok(ReplayResult::Identical {
                    events: run.session.log().len(),
                })
            }
            (Some(a), Some(b)) if a == b => continue,
            (Some(_), Some(b)) => {
                return Ok(ReplayResult::Diverged {
                    seq: seq_of(b).unwrap_or(index),
                    detail: "event differs from the regenerated log".into(),
                })
            }
            (Some(a), None) => {
                return Ok(ReplayResult::Diverged {
                    seq: seq_of(a).unwrap_or(index),
                    detail: "recorded log has extra events".into(),
                })
            }
            (None, Some(b)) => {
                return Ok(ReplayResult::Diverged {
                    seq: seq_of(b).unwrap_or(index),
                    detail: "recorded log ends early".into(),
                })
            }
        }
    }
}

/// Script that drives the BFS-optimal route from the start to the goal, ending in "go".
pub fn bfs_script(maze: &MazeSpec) -> Option<String> {
    let path = solve_bfs(maze.grid(), maze.start_cell(), maze.goal()).ok()?;
    let plan = path_to_plan(&path, Direction::from_heading(maze.start().theta), Provenance::Bfs).ok()?;
    let mut out = String::new();
    for step in &plan.steps {
        match step {
            MovePrimitive::Forward(n) => out.push_str(&format!("move forward {n}\n")),
            MovePrimitive::TurnLeft => out.push_str("turn left\n"),
            MovePrimitive::TurnRight => out.push_str("turn right\n"),
        }
    }
    out.push_str("go\n");
    Some(out)
}
