//! One student's run: plan queue, safety rule, guidance dialogue, deviation
//! monitoring, EKF updates, narration and metrics.

use std::collections::{BTreeSet, VecDeque};
use std::f64::consts::PI;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::command::{self, Answer, CommandAst, CommandError, ScriptLine, TurnDir};
use crate::event::*;
use crate::narrator::{self, AudioCue, EntityKind, SceneEntity};
use crate::overhead::{locate_robot, render_overhead, segment_grid, GridDims, RecoveredMap};
use crate::planner::{path_to_plan, solve_bfs, MovePrimitive, Plan, PlannerError, Provenance};
use crate::rng::derive_seed;
use crate::scenario::{Scenario, ScenarioError};
use crate::slam::{self, BeliefState, MotionInput, NoiseParams, SensorConfig};
use crate::stereo::front_clearance;
use crate::world::{wrap_angle, CellState, Direction, GridIndex, MazeSpec, Occupancy, OccupancyGrid, Point, Pose};

/// Longest primitive queue a session accepts.
pub const MAX_QUEUE: usize = 2000;

pub const GUIDANCE_QUESTION: &str = "What should I do? Should I move";

const STREAM_INIT_CAMERA: u64 = 1;
const STREAM_STEREO: u64 = 2;
const STREAM_ACTUATION: u64 = 3;
const STREAM_RANGE_SENSOR: u64 = 4;
const STREAM_MONITOR_CAMERA: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub safety_threshold_m: f64,
    /// `None` means half a cell.
    pub deviation_pos_tol_m: Option<f64>,
    pub deviation_heading_tol_deg: f64,
    pub narrate_every_move: bool,
    pub halt_on_deviation: bool,
    pub v_cruise: f64,
    pub omega_cruise: f64,
    /// Noise the EKF assumes.
    pub filter_noise: NoiseParams,
    /// Noise applied to the simulated robot and range sensor.
    pub world_noise: NoiseParams,
    pub initial_sigma_xy: f64,
    pub initial_sigma_theta: f64,
    pub sensor: SensorConfig,
    pub sense_radius_cells: usize,
    /// Adds the true pose to step events and narrates from it.
    pub debug_truth: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            safety_threshold_m: 0.25,
            deviation_pos_tol_m: None,
            deviation_heading_tol_deg: 30.0,
            narrate_every_move: true,
            halt_on_deviation: false,
            v_cruise: 0.4,
            omega_cruise: PI / 2.0,
            filter_noise: NoiseParams::default(),
            world_noise: NoiseParams::default(),
            initial_sigma_xy: 0.02,
            initial_sigma_theta: 0.02,
            sensor: SensorConfig::default(),
            sense_radius_cells: 2,
            debug_truth: false,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |what: &str| Err(ScenarioError::Invalid(format!("session config: {what}")));
        let pos = |x: f64| x.is_finite() && x > 0.0;
        if !(self.safety_threshold_m.is_finite() && self.safety_threshold_m >= 0.0) {
            return bad("safety_threshold_m must be >= 0");
        }
        if self.deviation_pos_tol_m.is_some_and(|t| !pos(t)) || !pos(self.deviation_heading_tol_deg) {
            return bad("deviation tolerances must be > 0");
        }
        if !pos(self.v_cruise) || !pos(self.omega_cruise) {
            return bad("cruise speeds must be > 0");
        }
        if !pos(self.initial_sigma_xy) || !pos(self.initial_sigma_theta) {
            return bad("initial sigmas must be > 0");
        }
        if self.filter_noise.validate().is_err() {
            return bad("filter_noise sigmas must be > 0");
        }
        let w = &self.world_noise;
        if [w.sigma_v, w.sigma_omega, w.sigma_r, w.sigma_phi].iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("world_noise sigmas must be >= 0");
        }
        if !pos(self.sensor.max_range) || !pos(self.sensor.fov) {
            return bad("sensor range and field of view must be > 0");
        }
        if self.sense_radius_cells == 0 || self.sense_radius_cells > 8 {
            return bad("sense_radius_cells must be in 1..=8");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SessionError {
    #[error("session could not start: {0}")]
    InitFailure(String),
    #[error("session is over")]
    SessionOver,
    #[error("no question is pending")]
    NoPendingQuery,
    #[error("nothing to execute")]
    NothingToExecute,
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("simulation failure: {0}")]
    Simulation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Idle,
    Executing,
    AwaitingGuidance,
    SafetyHalt,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    /// Position RMSE of the estimate against the true pose over all steps.
    pub localization_rmse_m: Option<f64>,
    pub command_recognition_rate: Option<f64>,
    pub task_completion_steps: Option<u64>,
    pub task_completion_sim_time_s: Option<f64>,
    /// Forward cells driven over the shortest route on the initial maze.
    pub path_efficiency: Option<f64>,
    pub safety_violations: u64,
    pub guidance_requests: u64,
    pub safety_halts: u64,
    pub deviations: u64,
    pub steps: u64,
    pub forward_cells: u64,
    pub utterances: u64,
    pub recognized: u64,
}

#[derive(Debug, Clone, PartialEq)]
struct PendingQuery {
    proposed: Direction,
    word: &'static str,
    blocked_cell: GridIndex,
}

#[derive(Debug, Clone)]
pub struct Session {
    scenario: Scenario,
    seed: u64,
    /// Physical world: scenario maze plus active obstacles.
    world: MazeSpec,
    recovered: RecoveredMap,
    active: BTreeSet<GridIndex>,
    /// Obstacles already reported to the student; part of the plan map.
    known: BTreeSet<GridIndex>,
    landmarks: Vec<Point>,
    truth: Pose,
    belief: BeliefState,
    /// Last overhead fix, used by the controller.
    fix: Pose,
    planned_cell: GridIndex,
    planned_heading: Direction,
    mode: Mode,
    queue: VecDeque<MovePrimitive>,
    pending: Option<PendingQuery>,
    log: Vec<SessionEvent>,
    sim_time: f64,
    sq_err_sum: f64,
    optimal_cells: Option<u64>,
    metrics: Metrics,
}

impl Session {
    /// Renders the overhead view, recovers the map and the start pose, and
    /// starts the filter there.
    pub fn create(scenario: Scenario, seed: u64) -> Result<Self, SessionError> {
        scenario.config.validate()?;
        let maze = scenario.maze.clone();
        let truth = maze.start();
        let img = render_overhead(
            &maze,
            &truth,
            &scenario.camera,
            &scenario.marker,
            derive_seed(seed, STREAM_INIT_CAMERA, 0),
        )
        .map_err(|e| SessionError::InitFailure(e.to_string()))?;
        let recovered = segment_grid(&img, &scenario.camera, &scenario.marker, GridDims::from(&maze))
            .map_err(|e| SessionError::InitFailure(e.to_string()))?;
        let fix = locate_robot(&img, &scenario.camera, &scenario.marker)
            .map_err(|e| SessionError::InitFailure(e.to_string()))?;
        let fix_cell = maze
            .world_to_grid(fix.x, fix.y)
            .map_err(|e| SessionError::InitFailure(format!("recovered start is off the map: {e}")))?;
        if !recovered.grid.is_free(fix_cell) {
            return Err(SessionError::InitFailure(format!(
                "recovered start cell ({}, {}) is a wall on the recovered map",
                fix_cell.col, fix_cell.row
            )));
        }
        let cfg = &scenario.config;
        let p0 = Matrix3::from_diagonal(&nalgebra::Vector3::new(
            cfg.initial_sigma_xy.powi(2),
            cfg.initial_sigma_xy.powi(2),
            cfg.initial_sigma_theta.powi(2),
        ));
        let belief = BeliefState::new(fix, p0);
        let optimal_cells = solve_bfs(maze.grid(), maze.start_cell(), maze.goal())
            .ok()
            .map(|p| p.len() as u64 - 1);
        let mut s = Self {
            landmarks: slam::extract_landmarks(&maze),
            world: maze,
            recovered,
            active: BTreeSet::new(),
            known: BTreeSet::new(),
            truth,
            belief,
            fix,
            planned_cell: fix_cell,
            planned_heading: Direction::from_heading(fix.theta),
            mode: Mode::Idle,
            queue: VecDeque::new(),
            pending: None,
            log: Vec::new(),
            sim_time: 0.0,
            sq_err_sum: 0.0,
            optimal_cells,
            metrics: Metrics::default(),
            scenario,
            seed,
        };
        s.initial_narration();
        Ok(s)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    /// Every event emitted so far, seq 1 first.
    pub fn log(&self) -> &[SessionEvent] {
        &self.log
    }

    /// Events with seq greater than `after`.
    pub fn events_after(&self, after: u64) -> &[SessionEvent] {
        let start = (after as usize).min(self.log.len());
        &self.log[start..]
    }

    pub fn recovered_map(&self) -> &RecoveredMap {
        &self.recovered
    }

    pub fn belief(&self) -> &BeliefState {
        &self.belief
    }

    pub fn estimate(&self) -> (Pose, Matrix3<f64>) {
        slam::estimate_pose(&self.belief)
    }

    /// Ground truth; never exposed over the wire outside debug mode.
    pub fn true_pose(&self) -> Pose {
        self.truth
    }

    pub fn world(&self) -> &MazeSpec {
        &self.world
    }

    pub fn active_obstacles(&self) -> impl Iterator<Item = GridIndex> + '_ {
        self.active.iter().copied()
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    /// The proposal of the open guidance question, if any.
    pub fn pending_direction(&self) -> Option<Direction> {
        self.pending.as_ref().map(|p| p.proposed)
    }

    pub fn metrics(&self) -> Metrics {
        let mut m = self.metrics.clone();
        if m.steps > 0 {
            m.localization_rmse_m = Some((self.sq_err_sum / m.steps as f64).sqrt());
        }
        if m.utterances > 0 {
            m.command_recognition_rate = Some(m.recognized as f64 / m.utterances as f64);
        }
        m
    }

    /// Parses one utterance and acts on it; runs the robot if it was told to go.
    pub fn submit_utterance(&mut self, text: &str) -> Result<Vec<SessionEvent>, SessionError> {
        if self.mode == Mode::Completed {
            return Err(SessionError::SessionOver);
        }
        let mark = self.log.len();
        self.metrics.utterances += 1;
        let program = match command::parse_text(text) {
            Ok(p) => p,
            Err(e) => {
                self.reject_parse(text, &e);
                if self.mode == Mode::AwaitingGuidance {
                    self.ask(true);
                }
                return Ok(self.log[mark..].to_vec());
            }
        };
        if self.mode == Mode::AwaitingGuidance {
            self.metrics.recognized += 1;
            self.emit_parsed(text, &program);
            match program.as_slice() {
                [CommandAst::Answer { answer }] => self.resolve(text, *answer)?,
                _ => {
                    self.reject(
                        text,
                        RejectReason::NotAnAnswer,
                        None,
                        "Please answer yes, no, left, right or forward.",
                    );
                    self.ask(true);
                }
            }
            self.run_inner()?;
            return Ok(self.log[mark..].to_vec());
        }

        let mut expanded = Vec::new();
        if let Err(detail) = expand(&program, &mut expanded, MAX_QUEUE - self.queue.len()) {
            self.reject(text, RejectReason::PlanTooLong, None, &detail);
            return Ok(self.log[mark..].to_vec());
        }
        self.metrics.recognized += 1;
        self.emit_parsed(text, &program);
        if self.mode == Mode::SafetyHalt {
            self.queue.clear();
            self.mode = Mode::Idle;
        }
        let mut go = false;
        for item in expanded {
            match item {
                Item::Primitive(p) => self.queue.push_back(p),
                Item::Position => self.narrate_position(),
                Item::Surroundings => self.narrate_surroundings(NarrationContext::Surroundings)?,
                Item::Answer => self.notice("There is no question to answer."),
                Item::Go => go = true,
                Item::Stop => {
                    self.queue.clear();
                    go = false;
                }
            }
        }
        if go {
            if self.queue.is_empty() {
                self.notice("There is nothing to do. Give me some moves first.");
            } else {
                self.start_executing();
                self.run_inner()?;
            }
        }
        Ok(self.log[mark..].to_vec())
    }

    /// Answers the open guidance question directly.
    pub fn answer_guidance(&mut self, answer: Answer) -> Result<Vec<SessionEvent>, SessionError> {
        if self.mode == Mode::Completed {
            return Err(SessionError::SessionOver);
        }
        if self.mode != Mode::AwaitingGuidance {
            return Err(SessionError::NoPendingQuery);
        }
        let mark = self.log.len();
        self.resolve(answer.word(), answer)?;
        self.run_inner()?;
        Ok(self.log[mark..].to_vec())
    }

    /// Switches to executing the queued moves without running them.
    pub fn begin(&mut self) -> Result<(), SessionError> {
        match self.mode {
            Mode::Completed => Err(SessionError::SessionOver),
            Mode::Idle if !self.queue.is_empty() => {
                self.start_executing();
                Ok(())
            }
            _ => Err(SessionError::NothingToExecute),
        }
    }

    /// Steps until the robot stops executing.
    pub fn run(&mut self) -> Result<Vec<SessionEvent>, SessionError> {
        let mark = self.log.len();
        self.run_inner()?;
        Ok(self.log[mark..].to_vec())
    }

    fn run_inner(&mut self) -> Result<(), SessionError> {
        while self.mode == Mode::Executing {
            if self.queue.is_empty() {
                self.mode = Mode::Idle;
                break;
            }
            self.step_inner()?;
        }
        Ok(())
    }

    /// Executes the head of the queue.
    pub fn step(&mut self) -> Result<Vec<SessionEvent>, SessionError> {
        if self.mode == Mode::Completed {
            return Err(SessionError::SessionOver);
        }
        if self.mode != Mode::Executing || self.queue.is_empty() {
            return Err(SessionError::NothingToExecute);
        }
        let mark = self.log.len();
        self.step_inner()?;
        Ok(self.log[mark..].to_vec())
    }

    fn step_inner(&mut self) -> Result<(), SessionError> {
        let step_no = self.metrics.steps;
        self.activate_obstacles(step_no);
        let head = *self.queue.front().expect("caller checked the queue");
        let cs = self.world.cell_size();

        let mut clearance_m = None;
        let (target_cell, target_heading) = match head {
            MovePrimitive::Forward(_) => {
                let Some(target) = self.planned_cell.step(self.planned_heading) else {
                    return self.halt(HaltReason::WallOnMap, 0.0, self.planned_cell);
                };
                if self.active.contains(&target) && !self.known.contains(&target) {
                    self.known.insert(target);
                    self.raise_anomaly(target);
                    return Ok(());
                }
                let clearance = front_clearance(
                    &self.world,
                    &self.truth,
                    &self.scenario.stereo,
                    derive_seed(self.seed, STREAM_STEREO, step_no),
                )
                .map_err(|e| SessionError::Simulation(e.to_string()))?;
                let threshold = self.scenario.config.safety_threshold_m;
                if clearance.meters < threshold {
                    return self.halt(HaltReason::Clearance, clearance.meters, target);
                }
                if !self.plan_map_free(target) {
                    return self.halt(HaltReason::WallOnMap, clearance.meters, target);
                }
                clearance_m = Some(clearance.meters);
                (target, self.planned_heading)
            }
            MovePrimitive::TurnLeft => (self.planned_cell, self.planned_heading.left()),
            MovePrimitive::TurnRight => (self.planned_cell, self.planned_heading.right()),
        };
        self.queue.pop_front();

        let centre = cell_centre(target_cell, cs);
        let goal_pose = Pose::new(centre.x, centre.y, target_heading.heading());
        let motions = self.control(&goal_pose, matches!(head, MovePrimitive::Forward(_)));
        self.planned_cell = target_cell;
        self.planned_heading = target_heading;

        // Move the true robot with actuation noise, then filter.
        let cfg = self.scenario.config.clone();
        let mut act = crate::rng::seeded(derive_seed(self.seed, STREAM_ACTUATION, step_no));
        for u in &motions {
            let noisy = MotionInput::new(
                u.v + cfg.world_noise.sigma_v * crate::rng::gaussian(&mut act),
                u.omega + cfg.world_noise.sigma_omega * crate::rng::gaussian(&mut act),
                u.dt,
            );
            let next = slam::motion_model(&nalgebra::Vector3::new(self.truth.x, self.truth.y, self.truth.theta), &noisy);
            self.truth = Pose::new(next[0], next[1], next[2]);
            self.belief = slam::predict(&self.belief, u, &cfg.filter_noise).map_err(sim_err)?;
            self.sim_time += u.dt;
        }
        let observations = slam::observe(
            &self.truth,
            &self.landmarks,
            &cfg.world_noise,
            &cfg.sensor,
            &self.world,
            derive_seed(self.seed, STREAM_RANGE_SENSOR, step_no),
        )
        .map_err(sim_err)?;
        let zs: Vec<_> = observations.iter().map(|o| o.z).collect();
        self.belief = slam::incorporate(&self.belief, &zs, &cfg.filter_noise).map_err(sim_err)?.0;

        let (est, _) = slam::estimate_pose(&self.belief);
        self.metrics.steps += 1;
        if clearance_m.is_some() {
            self.metrics.forward_cells += 1;
        }
        self.sq_err_sum += (est.x - self.truth.x).powi(2) + (est.y - self.truth.y).powi(2);
        if !self.truth_cell().is_some_and(|g| self.world.is_free(g)) {
            self.metrics.safety_violations += 1;
        }

        self.emit(EventBody::Step(StepPayload {
            step: self.metrics.steps,
            primitive: Plan::new(vec![head], Provenance::Manual).to_text(),
            motions,
            clearance_m,
            estimated_pose: est,
            planned_cell: target_cell,
            planned_heading: target_heading,
            true_pose: cfg.debug_truth.then_some(self.truth),
        }));

        self.monitor(&goal_pose, step_no);
        if cfg.narrate_every_move {
            self.narrate_surroundings(NarrationContext::Step)?;
        }
        if self.truth_cell() == Some(self.world.goal()) {
            self.complete();
        } else if self.mode == Mode::Executing && self.queue.is_empty() {
            self.mode = Mode::Idle;
        }
        Ok(())
    }

    fn activate_obstacles(&mut self, steps_done: u64) {
        let here = self.truth_cell();
        let mut changed = false;
        for o in &self.scenario.obstacles {
            if o.after_step <= steps_done && Some(o.cell) != here && self.active.insert(o.cell) {
                changed = true;
            }
        }
        if changed {
            let cells: Vec<GridIndex> = self.active.iter().copied().collect();
            self.world = self.scenario.maze.with_blocked(&cells);
        }
    }

    /// Rotate toward the target centre, drive there, rotate to its heading.
    /// Plans from the last overhead fix.
    fn control(&self, target: &Pose, translate: bool) -> Vec<MotionInput> {
        let cfg = &self.scenario.config;
        let mut out = Vec::new();
        let mut theta = self.fix.theta;
        let rotate = |to: f64, theta: &mut f64, out: &mut Vec<MotionInput>| {
            let d = wrap_angle(to - *theta);
            if d.abs() > 1e-12 {
                out.push(MotionInput::new(0.0, cfg.omega_cruise * d.signum(), d.abs() / cfg.omega_cruise));
            }
            *theta = to;
        };
        if translate {
            let (dx, dy) = (target.x - self.fix.x, target.y - self.fix.y);
            let dist = dx.hypot(dy);
            if dist > 1e-12 {
                rotate(dy.atan2(dx), &mut theta, &mut out);
                out.push(MotionInput::new(cfg.v_cruise, 0.0, dist / cfg.v_cruise));
            }
        }
        rotate(target.theta, &mut theta, &mut out);
        out
    }

    fn monitor(&mut self, planned: &Pose, step_no: u64) {
        let cfg = &self.scenario.config;
        let img = render_overhead(
            &self.world,
            &self.truth,
            &self.scenario.camera,
            &self.scenario.marker,
            derive_seed(self.seed, STREAM_MONITOR_CAMERA, step_no),
        );
        let fix = img.and_then(|img| locate_robot(&img, &self.scenario.camera, &self.scenario.marker));
        let observed = match fix {
            Ok(p) => p,
            Err(_) => {
                self.fix = slam::estimate_pose(&self.belief).0;
                return;
            }
        };
        self.fix = observed;
        let pos_err = observed.position().distance(&planned.position());
        let head_err = wrap_angle(observed.theta - planned.theta).abs().to_degrees();
        let pos_tol = cfg.deviation_pos_tol_m.unwrap_or(0.5 * self.world.cell_size());
        if pos_err > pos_tol || head_err > cfg.deviation_heading_tol_deg {
            self.metrics.deviations += 1;
            let halt = cfg.halt_on_deviation;
            self.emit(EventBody::Deviation(DeviationPayload {
                observed,
                planned: *planned,
                position_error_m: pos_err,
                heading_error_deg: head_err,
            }));
            if halt {
                self.queue.clear();
                self.mode = Mode::Idle;
            }
        }
    }

    fn halt(&mut self, reason: HaltReason, clearance_m: f64, target_cell: GridIndex) -> Result<(), SessionError> {
        self.metrics.safety_halts += 1;
        self.queue.clear();
        self.mode = Mode::SafetyHalt;
        let threshold_m = self.scenario.config.safety_threshold_m;
        self.emit(EventBody::SafetyHalt(SafetyHaltPayload {
            reason,
            clearance_m,
            threshold_m,
            target_cell,
        }));
        let text = match reason {
            HaltReason::Clearance => "Stopping. Something is too close in front of me.",
            HaltReason::WallOnMap => "Stopping. There is a wall in front of me.",
        };
        self.emit(EventBody::Cue(narrator::speech_cue(text)));
        Ok(())
    }

    fn raise_anomaly(&mut self, blocked: GridIndex) {
        let h = self.planned_heading;
        let options = [(h.right(), "right"), (h.left(), "left"), (h.opposite(), "back")];
        let (proposed, word) = options
            .iter()
            .copied()
            .find(|(d, _)| self.planned_cell.step(*d).is_some_and(|n| self.plan_map_free(n)))
            .unwrap_or((h.opposite(), "back"));
        self.metrics.guidance_requests += 1;
        self.pending = Some(PendingQuery {
            proposed,
            word,
            blocked_cell: blocked,
        });
        self.mode = Mode::AwaitingGuidance;
        self.ask(false);
    }

    fn ask(&mut self, repeated: bool) {
        let Some(p) = self.pending.clone() else { return };
        let text = format!("{GUIDANCE_QUESTION} {}?", p.word);
        self.emit(EventBody::GuidanceRequest(GuidanceRequestPayload {
            text: text.clone(),
            proposed: p.word.to_string(),
            blocked_cell: p.blocked_cell,
            repeated,
        }));
        self.emit(EventBody::Cue(narrator::speech_cue(&text)));
    }

    /// Re-plans from the current cell after a guidance answer.
    fn resolve(&mut self, utterance: &str, answer: Answer) -> Result<(), SessionError> {
        let pending = self.pending.clone().ok_or(SessionError::NoPendingQuery)?;
        let here = self.planned_cell;
        let h = self.planned_heading;
        let first = match answer {
            Answer::Yes => Some(pending.proposed),
            Answer::No => None,
            Answer::Left => Some(h.left()),
            Answer::Right => Some(h.right()),
            Answer::Forward => Some(h),
        };
        let map = self.plan_map();
        let goal = self.world.goal();
        let path = match first {
            Some(d) => {
                let Some(next) = here.step(d).filter(|n| map.is_free(*n)) else {
                    self.reject(utterance, RejectReason::DirectionBlocked, None, "That way is blocked.");
                    self.ask(true);
                    return Ok(());
                };
                solve_bfs(&map, next, goal).map(|rest| std::iter::once(here).chain(rest).collect::<Vec<_>>())
            }
            None => solve_bfs(&map, here, goal),
        };
        let path = match path {
            Ok(p) => p,
            Err(PlannerError::NoPath { .. }) => {
                self.reject(utterance, RejectReason::NoRoute, None, "I cannot find a way to the goal from there.");
                self.ask(true);
                return Ok(());
            }
            Err(e) => return Err(SessionError::Simulation(e.to_string())),
        };
        let plan = path_to_plan(&path, h, Provenance::Bfs).map_err(|e| SessionError::Simulation(e.to_string()))?;
        self.queue.clear();
        for p in &plan.steps {
            match *p {
                MovePrimitive::Forward(n) => self.queue.extend((0..n).map(|_| MovePrimitive::Forward(1))),
                other => self.queue.push_back(other),
            }
        }
        self.pending = None;
        self.mode = Mode::Executing;
        self.emit(EventBody::GuidanceResolved(GuidanceResolvedPayload {
            answer,
            first_move: first,
            plan: plan.to_text(),
        }));
        self.emit(EventBody::Cue(narrator::speech_cue("Okay. Finding a new way to the goal.")));
        Ok(())
    }

    fn complete(&mut self) {
        self.mode = Mode::Completed;
        self.queue.clear();
        self.metrics.task_completion_steps = Some(self.metrics.steps);
        self.metrics.task_completion_sim_time_s = Some(self.sim_time);
        self.metrics.path_efficiency = self
            .optimal_cells
            .filter(|&c| c > 0)
            .map(|c| self.metrics.forward_cells as f64 / c as f64);
        self.emit(EventBody::Completed(CompletedPayload {
            steps: self.metrics.steps,
            forward_cells: self.metrics.forward_cells,
            sim_time_s: self.sim_time,
        }));
        self.emit(EventBody::Cue(narrator::speech_cue("You reached the goal.")));
        let m = self.metrics();
        self.emit(EventBody::MetricsSnapshot(m));
    }

    fn start_executing(&mut self) {
        // Re-anchor the plan frame on the robot's observed cell.
        if let Ok(g) = self.world.world_to_grid(self.fix.x, self.fix.y) {
            self.planned_cell = g;
        }
        self.planned_heading = Direction::from_heading(self.fix.theta);
        self.mode = Mode::Executing;
    }

    fn truth_cell(&self) -> Option<GridIndex> {
        self.world.world_to_grid(self.truth.x, self.truth.y).ok()
    }

    /// Recovered map plus reported obstacles.
    fn plan_map(&self) -> OccupancyGrid {
        let mut g = self.recovered.grid.clone();
        for &c in &self.known {
            g.set(c, CellState::Wall);
        }
        g
    }

    fn plan_map_free(&self, g: GridIndex) -> bool {
        self.recovered.grid.contains(g) && self.recovered.grid.is_free(g) && !self.known.contains(&g)
    }

    fn narration_pose(&self) -> Pose {
        if self.scenario.config.debug_truth {
            self.truth
        } else {
            slam::estimate_pose(&self.belief).0
        }
    }

    fn narrate_surroundings(&mut self, context: NarrationContext) -> Result<(), SessionError> {
        let cfg = &self.scenario.config;
        let patch = narrator::sense_local(&self.world, &self.truth, cfg.sense_radius_cells).map_err(|e| {
            self.metrics.safety_violations += 1;
            SessionError::Simulation(e.to_string())
        })?;
        let est = self.narration_pose();
        let goal = cell_centre(self.world.goal(), self.world.cell_size());
        let desc = narrator::describe_scene(&patch, &est, &self.world.start(), Some(goal));
        let cues = narrator::to_audio_cues(&desc);
        self.emit(EventBody::Narration(NarrationPayload {
            context,
            text: desc.text,
            entities: desc.entities,
            pose_report: Some(desc.pose_report),
        }));
        for c in cues {
            self.emit(EventBody::Cue(c));
        }
        Ok(())
    }

    fn narrate_position(&mut self) {
        let est = self.narration_pose();
        let report = narrator::pose_report(&est, &self.world.start(), self.world.cell_size());
        let text = narrator::pose_sentence(&report);
        self.emit(EventBody::Narration(NarrationPayload {
            context: NarrationContext::Position,
            text: text.clone(),
            entities: Vec::new(),
            pose_report: Some(report),
        }));
        self.emit(EventBody::Cue(narrator::speech_cue(&text)));
    }

    fn notice(&mut self, text: &str) {
        self.emit(EventBody::Narration(NarrationPayload {
            context: NarrationContext::Notice,
            text: text.to_string(),
            entities: Vec::new(),
            pose_report: None,
        }));
        self.emit(EventBody::Cue(narrator::speech_cue(text)));
    }

    fn initial_narration(&mut self) {
        let grid = &self.recovered.grid;
        let cs = self.world.cell_size();
        let start = self.planned_cell;
        let goal = self.world.goal();
        let (de, dn) = (goal.col as i64 - start.col as i64, goal.row as i64 - start.row as i64);
        let text = format!(
            "The maze is {} by {} cells, {:.1} by {:.1} meters. You are at the start, facing {}. \
             The goal is {} {} and {} {} of you.",
            grid.width_cells(),
            grid.height_cells(),
            grid.width_cells() as f64 * cs,
            grid.height_cells() as f64 * cs,
            self.planned_heading.compass_word(),
            narrator::plural(de.abs(), "cell"),
            if de < 0 { "west" } else { "east" },
            narrator::plural(dn.abs(), "cell"),
            if dn < 0 { "south" } else { "north" },
        );
        let goal_pt = cell_centre(goal, cs);
        let dist = self.fix.position().distance(&goal_pt);
        let bearing = narrator::relative_bearing(&self.fix, goal_pt).unwrap_or(0.0);
        let goal_entity = SceneEntity {
            kind: EntityKind::Goal,
            bearing_deg: bearing,
            distance_m: dist,
            cell_dir: Direction::from_heading((goal_pt.y - self.fix.y).atan2(goal_pt.x - self.fix.x)),
        };
        let goal_cue = AudioCue {
            azimuth_deg: bearing,
            gain: narrator::gain_for_distance(dist),
            duration_ms: narrator::GOAL_CUE_MS,
            text: narrator::entity_clause(&goal_entity),
        };
        self.emit(EventBody::Narration(NarrationPayload {
            context: NarrationContext::Initial,
            text: text.clone(),
            entities: vec![goal_entity],
            pose_report: None,
        }));
        self.emit(EventBody::Cue(goal_cue));
        self.emit(EventBody::Cue(narrator::speech_cue(&text)));
    }

    fn emit_parsed(&mut self, text: &str, program: &[CommandAst]) {
        self.emit(EventBody::Parsed(ParsedPayload {
            utterance: text.to_string(),
            canonical: command::render(program),
            commands: program.to_vec(),
        }));
    }

    fn reject_parse(&mut self, text: &str, e: &CommandError) {
        let (reason, error, explanation) = match e {
            CommandError::EmptyUtterance => (
                RejectReason::EmptyUtterance,
                None,
                "I did not hear a command.".to_string(),
            ),
            CommandError::Parse(p) => (
                RejectReason::ParseError,
                Some(p.clone()),
                if p.lexeme == "<end>" {
                    format!("The command stopped early. I expected {}.", p.expected)
                } else {
                    format!("I did not understand \"{}\" at word {}. I expected {}.", p.lexeme, p.index + 1, p.expected)
                },
            ),
            CommandError::LimitExceeded { detail, .. } => (
                RejectReason::LimitExceeded,
                None,
                format!("That command is too big: {detail}."),
            ),
            other => (RejectReason::ParseError, None, other.to_string()),
        };
        self.reject(text, reason, error, &explanation);
    }

    fn reject(&mut self, text: &str, reason: RejectReason, error: Option<command::ParseError>, explanation: &str) {
        self.emit(EventBody::Rejected(RejectedPayload {
            utterance: text.to_string(),
            reason,
            error,
            explanation: explanation.to_string(),
        }));
        self.emit(EventBody::Cue(narrator::speech_cue(explanation)));
    }

    fn emit(&mut self, body: EventBody) {
        let ev = SessionEvent {
            seq: self.log.len() as u64 + 1,
            t: self.sim_time,
            body,
        };
        self.log.push(ev);
    }
}

fn sim_err(e: slam::SlamError) -> SessionError {
    SessionError::Simulation(e.to_string())
}

fn cell_centre(g: GridIndex, cs: f64) -> Point {
    Point::new((g.col as f64 + 0.5) * cs, (g.row as f64 + 0.5) * cs)
}

enum Item {
    Primitive(MovePrimitive),
    Position,
    Surroundings,
    Answer,
    Go,
    Stop,
}

/// Flattens a program into queue items, refusing more than `room` primitives.
fn expand(program: &[CommandAst], out: &mut Vec<Item>, room: usize) -> Result<(), String> {
    fn go(program: &[CommandAst], out: &mut Vec<Item>, room: usize, used: &mut usize) -> Result<(), String> {
        let push = |p: MovePrimitive, out: &mut Vec<Item>, used: &mut usize| {
            *used += 1;
            if *used > room {
                return Err(format!("the plan is too long; at most {room} more moves fit"));
            }
            out.push(Item::Primitive(p));
            Ok(())
        };
        for stmt in program {
            match stmt {
                CommandAst::Move { cells } => {
                    for _ in 0..*cells {
                        push(MovePrimitive::Forward(1), out, used)?;
                    }
                }
                CommandAst::Turn { dir } => match dir {
                    TurnDir::Left => push(MovePrimitive::TurnLeft, out, used)?,
                    TurnDir::Right => push(MovePrimitive::TurnRight, out, used)?,
                    TurnDir::Around => {
                        push(MovePrimitive::TurnLeft, out, used)?;
                        push(MovePrimitive::TurnLeft, out, used)?;
                    }
                },
                CommandAst::Repeat { count, body } => {
                    for _ in 0..*count {
                        go(body, out, room, used)?;
                    }
                }
                CommandAst::QueryPosition => out.push(Item::Position),
                CommandAst::QuerySurroundings => out.push(Item::Surroundings),
                CommandAst::Answer { .. } => out.push(Item::Answer),
                CommandAst::Go => out.push(Item::Go),
                CommandAst::Stop => out.push(Item::Stop),
            }
            if out.len() > 4 * MAX_QUEUE {
                return Err("the command expands to too many actions".into());
            }
        }
        Ok(())
    }
    go(program, out, room, &mut 0)
}

/// How a scripted run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    Completed,
    /// The script ran out before the goal was reached.
    Exhausted,
    /// The last thing that happened was an unresolved safety halt.
    Halted,
}

impl RunOutcome {
    pub fn exit_code(self) -> i32 {
        match self {
            RunOutcome::Completed => 0,
            RunOutcome::Exhausted => 2,
            RunOutcome::Halted => 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScriptRun {
    pub session: Session,
    pub outcome: RunOutcome,
    /// Script lines whose `@expect-error` marker disagreed with the result.
    pub expectation_mismatches: Vec<usize>,
}

/// Runs every script line through a fresh session; stops at completion.
pub fn run_script(scenario: Scenario, seed: u64, lines: &[ScriptLine]) -> Result<ScriptRun, SessionError> {
    let mut session = Session::create(scenario, seed)?;
    let mut mismatches = Vec::new();
    for line in lines {
        if session.mode() == Mode::Completed {
            break;
        }
        let events = session.submit_utterance(&line.text)?;
        let rejected = events
            .iter()
            .any(|e| matches!(&e.body, EventBody::Rejected(r) if r.utterance == line.text));
        if rejected != line.expect_error {
            mismatches.push(line.line);
        }
    }
    let outcome = match session.mode() {
        Mode::Completed => RunOutcome::Completed,
        Mode::SafetyHalt => RunOutcome::Halted,
        _ => RunOutcome::Exhausted,
    };
    Ok(ScriptRun {
        session,
        outcome,
        expectation_mismatches: mismatches,
    })
}

/// Log file text: one wire event per line.
pub fn log_text(events: &[SessionEvent]) -> String {
    let mut s = String::new();
    for e in events {
        s.push_str(&e.to_line());
        s.push('\n');
    }
    s
}
