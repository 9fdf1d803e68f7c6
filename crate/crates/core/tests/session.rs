use std::collections::BTreeSet;

use echomaze_core::command::{self, parse_script, Answer};
use echomaze_core::event::{EventBody, HaltReason, NarrationContext, RejectReason, SessionEvent};
use echomaze_core::planner::{path_to_plan, solve_bfs, trace_plan, MovePrimitive, Plan, Provenance};
use echomaze_core::rng;
use echomaze_core::scenario::{ObstacleSpec, Scenario};
use echomaze_core::session::*;
use echomaze_core::stereo::ray_cast_clearance;
use echomaze_core::world::{generate_maze, Direction, GridIndex, MazeSpec, Occupancy, Pose};
use rand::seq::IndexedRandom;
use rand::Rng;

const CORPUS: &str = include_str!("../data/scripts/corpus.txt");
const ANOMALY_SCRIPT: &str = include_str!("../data/scripts/anomaly.txt");

fn kinds(events: &[SessionEvent]) -> Vec<&'static str> {
    events.iter().map(|e| e.body.kind()).collect()
}

/// Utterances that drive the shortest route from start to goal.
fn optimal_script(maze: &MazeSpec) -> Vec<String> {
    let path = solve_bfs(maze.grid(), maze.start_cell(), maze.goal()).unwrap();
    let plan = path_to_plan(&path, Direction::from_heading(maze.start().theta), Provenance::Bfs).unwrap();
    let mut lines: Vec<String> = plan
        .steps
        .iter()
        .map(|s| match s {
            MovePrimitive::Forward(n) => format!("move forward {n}"),
            MovePrimitive::TurnLeft => "turn left".to_string(),
            MovePrimitive::TurnRight => "turn right".to_string(),
        })
        .collect();
    lines.push("go".into());
    lines
}

fn run_lines(session: &mut Session, lines: &[String]) {
    for l in lines {
        if session.mode() == Mode::Completed {
            break;
        }
        session.submit_utterance(l).unwrap();
    }
}

fn cell_of(maze: &MazeSpec, p: &Pose) -> GridIndex {
    maze.world_to_grid(p.x, p.y).unwrap()
}

#[test]
fn fresh_session_is_idle_after_initial_narration() {
    let s = Session::create(Scenario::bundled("default").unwrap(), 7).unwrap();
    let first = &s.log()[0];
    assert_eq!(first.seq, 1);
    assert!(matches!(&first.body, EventBody::Narration(n) if n.context == NarrationContext::Initial));
    assert_eq!(s.mode(), Mode::Idle);
    assert_eq!(kinds(s.log()), ["narration", "cue", "cue"]);
}

#[test]
fn same_inputs_give_byte_identical_logs() {
    let sc = Scenario::bundled("default").unwrap();
    let script = optimal_script(&sc.maze);
    let text = |seed| {
        let mut s = Session::create(sc.clone(), seed).unwrap();
        run_lines(&mut s, &script);
        log_text(s.log())
    };
    let a = text(11);
    assert_eq!(a, text(11));
    assert_ne!(a, text(12));
}

#[test]
fn hidden_marker_fails_to_start() {
    let sc = Scenario::bundled("anomaly").unwrap();
    // Just inside the west wall and facing it: the front disk lies in the wall.
    let mut file = sc.to_file();
    file.maze.start = Pose::new(0.42, 1.0, std::f64::consts::PI);
    let hidden = Scenario::from_file(file).unwrap();
    assert!(matches!(Session::create(hidden, 1), Err(SessionError::InitFailure(_))));
}

#[test]
fn unknown_words_are_rejected_with_position() {
    let mut s = Session::create(Scenario::bundled("default").unwrap(), 3).unwrap();
    let events = s.submit_utterance("move backward").unwrap();
    assert_eq!(kinds(&events), ["rejected", "cue"]);
    let EventBody::Rejected(r) = &events[0].body else { unreachable!() };
    assert_eq!(r.reason, RejectReason::ParseError);
    assert_eq!(r.error.as_ref().unwrap().index, 1);
    assert_eq!(s.mode(), Mode::Idle);
}

#[test]
fn recognition_rate_matches_the_command_module() {
    let mut sc = Scenario::bundled("default").unwrap();
    sc.config.narrate_every_move = false;
    let lines = parse_script(CORPUS).unwrap();
    let mut s = Session::create(sc, 5).unwrap();
    for l in &lines {
        s.submit_utterance(&l.text).unwrap();
    }
    let expected = command::recognition_rate(&command::evaluate_script(&lines)).unwrap();
    assert_eq!(s.metrics().command_recognition_rate, Some(expected));
    assert_eq!(expected, 0.5);
}

#[test]
fn move_then_go_starts_stepping() {
    let mut s = Session::create(Scenario::bundled("anomaly").unwrap(), 4).unwrap();
    let a = s.submit_utterance("move forward 2").unwrap();
    let b = s.submit_utterance("go").unwrap();
    assert_eq!(kinds(&a), ["parsed"]);
    assert_eq!(kinds(&b)[..2], ["parsed", "step"]);
    assert_eq!(s.mode(), Mode::Idle);
}

#[test]
fn single_step_in_open_corridor() {
    let mut s = Session::create(Scenario::bundled("anomaly").unwrap(), 4).unwrap();
    s.submit_utterance("move forward 2").unwrap();
    assert_eq!(s.step(), Err(SessionError::NothingToExecute));
    s.begin().unwrap();
    let events = s.step().unwrap();
    let k = kinds(&events);
    assert_eq!(k[..2], ["step", "narration"]);
    assert!(k[2..].iter().all(|k| *k == "cue"));
    assert_eq!(s.mode(), Mode::Executing);
    assert_eq!(cell_of(s.world(), &s.true_pose()), GridIndex::new(2, 2));
}

#[test]
fn anomaly_asks_the_exact_question_once_before_moving() {
    let sc = Scenario::bundled("anomaly").unwrap();
    let lines = parse_script(ANOMALY_SCRIPT).unwrap();
    let mut s = Session::create(sc, 7).unwrap();
    s.submit_utterance(&lines[0].text).unwrap();
    let events = s.submit_utterance(&lines[1].text).unwrap();
    let requests: Vec<_> = events
        .iter()
        .filter_map(|e| match &e.body {
            EventBody::GuidanceRequest(g) => Some(g),
            _ => None,
        })
        .collect();
    assert_eq!(requests.len(), 1);
    assert_eq!(requests[0].text, "What should I do? Should I move right?");
    assert_eq!(requests[0].blocked_cell, GridIndex::new(4, 2));
    assert_eq!(s.mode(), Mode::AwaitingGuidance);
    let here = s.true_pose();
    assert_eq!(cell_of(s.world(), &here), GridIndex::new(3, 2));

    let events = s.submit_utterance(&lines[2].text).unwrap();
    let resolved = events
        .iter()
        .position(|e| matches!(e.body, EventBody::GuidanceResolved(_)))
        .unwrap();
    // The first forward step after resolution lands in the cell to the right.
    let first_forward = events[resolved..]
        .iter()
        .find_map(|e| match &e.body {
            EventBody::Step(st) if st.primitive == "F1" => Some(st.planned_cell),
            _ => None,
        })
        .unwrap();
    assert_eq!(first_forward, GridIndex::new(3, 1));
    assert_eq!(s.mode(), Mode::Completed);
    let m = s.metrics();
    assert_eq!(m.guidance_requests, 1);
    assert_eq!(m.safety_violations, 0);
}

#[test]
fn resolved_plan_reaches_goal_around_the_obstacle() {
    let sc = Scenario::bundled("anomaly").unwrap();
    let mut s = Session::create(sc, 9).unwrap();
    s.submit_utterance("move forward 5").unwrap();
    s.submit_utterance("go").unwrap();
    let mut blocked = s.scenario().maze.grid().clone();
    for g in s.active_obstacles() {
        blocked.set(g, echomaze_core::world::CellState::Wall);
    }
    let events = s.answer_guidance(Answer::Yes).unwrap();
    let EventBody::GuidanceResolved(r) = &events[0].body else { panic!("{:?}", events[0]) };
    let plan = Plan::parse_text(&r.plan, Provenance::Bfs).unwrap();
    let (cells, _) = trace_plan(&blocked, &plan, GridIndex::new(3, 2), Direction::East).unwrap();
    assert_eq!(*cells.last().unwrap(), s.scenario().maze.goal());
}

#[test]
fn blocked_answer_is_rejected_and_reasked() {
    let mut s = Session::create(Scenario::bundled("anomaly").unwrap(), 2).unwrap();
    s.submit_utterance("move forward 5").unwrap();
    s.submit_utterance("go").unwrap();
    let events = s.submit_utterance("forward").unwrap();
    assert_eq!(kinds(&events), ["parsed", "rejected", "cue", "guidance_request", "cue"]);
    let EventBody::GuidanceRequest(g) = &events[3].body else { unreachable!() };
    assert!(g.repeated);
    assert_eq!(g.text, "What should I do? Should I move right?");
    assert_eq!(s.mode(), Mode::AwaitingGuidance);

    let events = s.submit_utterance("turn left").unwrap();
    assert!(matches!(&events[1].body, EventBody::Rejected(r) if r.reason == RejectReason::NotAnAnswer));
    assert_eq!(s.mode(), Mode::AwaitingGuidance);
    // "left" is north of (3,2), a wall.
    s.submit_utterance("left").unwrap();
    assert_eq!(s.mode(), Mode::AwaitingGuidance);
    s.submit_utterance("no").unwrap();
    assert_eq!(s.mode(), Mode::Completed);
}

#[test]
fn wall_close_ahead_halts_without_moving() {
    let sc = Scenario::bundled("anomaly").unwrap();
    let mut s = Session::create(sc, 6).unwrap();
    s.submit_utterance("turn left").unwrap();
    s.begin().unwrap();
    s.step().unwrap();
    let before = s.true_pose();
    assert!(ray_cast_clearance(s.world(), &before, &s.scenario().stereo) < 0.25);
    s.submit_utterance("move forward 1").unwrap();
    s.begin().unwrap();
    let events = s.step().unwrap();
    let EventBody::SafetyHalt(h) = &events[0].body else { panic!("{events:?}") };
    assert_eq!(h.reason, HaltReason::Clearance);
    assert!(h.clearance_m < 0.25);
    assert_eq!(s.true_pose(), before);
    assert_eq!(s.mode(), Mode::SafetyHalt);
    assert_eq!(s.queue_len(), 0);

    s.submit_utterance("turn right").unwrap();
    assert_eq!(s.mode(), Mode::Idle);
    assert_eq!(s.queue_len(), 1);
}

#[test]
fn lifecycle_errors() {
    let mut s = Session::create(Scenario::bundled("anomaly").unwrap().zero_noise(), 1).unwrap();
    assert_eq!(s.answer_guidance(Answer::Yes), Err(SessionError::NoPendingQuery));
    let events = s.submit_utterance("yes").unwrap();
    assert!(matches!(&events[1].body, EventBody::Narration(n) if n.context == NarrationContext::Notice));
    s.submit_utterance("move forward 5 go").unwrap();
    s.submit_utterance("yes").unwrap();
    assert_eq!(s.mode(), Mode::Completed);
    assert_eq!(s.submit_utterance("go"), Err(SessionError::SessionOver));
    assert_eq!(s.answer_guidance(Answer::No), Err(SessionError::SessionOver));
}

#[test]
fn queries_narrate_immediately() {
    let mut s = Session::create(Scenario::bundled("default").unwrap(), 1).unwrap();
    let events = s.submit_utterance("where am i").unwrap();
    let EventBody::Narration(n) = &events[1].body else { unreachable!() };
    assert_eq!(n.text, "You are 0 cells east and 0 cells north of start, facing north.");
    let events = s.submit_utterance("what is around me").unwrap();
    assert!(matches!(&events[1].body, EventBody::Narration(n) if n.context == NarrationContext::Surroundings));
    let events = s.submit_utterance("repeat 100 (repeat 50 (move forward 50))").unwrap();
    assert!(matches!(&events[0].body, EventBody::Rejected(r) if r.reason == RejectReason::PlanTooLong));
    assert_eq!(s.queue_len(), 0);
}

#[test]
fn zero_noise_tracks_exactly() {
    for name in Scenario::bundled_names() {
        let sc = Scenario::bundled(name).unwrap().zero_noise();
        let script = match *name {
            "anomaly" => parse_script(ANOMALY_SCRIPT).unwrap().into_iter().map(|l| l.text).collect(),
            _ => optimal_script(&sc.maze),
        };
        let mut s = Session::create(sc, 3).unwrap();
        run_lines(&mut s, &script);
        assert_eq!(s.mode(), Mode::Completed, "{name}");
        let rmse = s.metrics().localization_rmse_m.unwrap();
        assert!(rmse <= 1e-6, "{name}: {rmse}");
    }
}

#[test]
fn optimal_script_is_fully_efficient() {
    let sc = Scenario::bundled("default").unwrap();
    let script = optimal_script(&sc.maze);
    let mut s = Session::create(sc, 21).unwrap();
    run_lines(&mut s, &script);
    assert_eq!(s.mode(), Mode::Completed);
    let m = s.metrics();
    assert_eq!(m.path_efficiency, Some(1.0));
    assert_eq!(m.safety_violations, 0);
    let last = s.log().last().unwrap();
    assert!(matches!(&last.body, EventBody::MetricsSnapshot(snap) if *snap == m));
}

#[test]
fn wire_lines_round_trip() {
    let sc = Scenario::bundled("anomaly").unwrap();
    let run = run_script(sc, 8, &parse_script(ANOMALY_SCRIPT).unwrap()).unwrap();
    assert_eq!(run.outcome, RunOutcome::Completed);
    for e in run.session.log() {
        let line = e.to_line();
        let back = SessionEvent::from_wire(&serde_json::from_str(&line).unwrap()).unwrap();
        assert_eq!(back.to_line(), line);
    }
}

#[test]
fn script_outcomes() {
    let sc = Scenario::bundled("anomaly").unwrap();
    assert_eq!(run_script(sc.clone(), 1, &[]).unwrap().outcome, RunOutcome::Exhausted);
    let halt = parse_script("turn left\nmove forward 1\ngo\n").unwrap();
    assert_eq!(run_script(sc.clone(), 1, &halt).unwrap().outcome, RunOutcome::Halted);
    let wrong = parse_script("@expect-error\ngo forward fast\nturn sideways\n").unwrap();
    let run = run_script(sc, 1, &wrong).unwrap();
    assert_eq!(run.expectation_mismatches, vec![3]);
}

/// Small random maze with a scripted obstacle somewhere free.
fn fuzz_scenario(seed: u64) -> Scenario {
    let maze = generate_maze(7, 7, 0.4, seed).unwrap();
    let mut r = rng::seeded(seed ^ 0xabc);
    let candidates: Vec<GridIndex> = maze
        .grid()
        .free_cells()
        .filter(|g| *g != maze.goal() && *g != maze.start_cell())
        .collect();
    let mut sc = Scenario::new("fuzz", maze);
    sc.config.debug_truth = true;
    sc.config.narrate_every_move = r.random_bool(0.5);
    if let Some(&cell) = candidates.choose(&mut r) {
        sc.obstacles.push(ObstacleSpec {
            after_step: r.random_range(0..4),
            cell,
        });
    }
    sc
}

const FUZZ_UTTERANCES: &[&str] = &[
    "move forward 1",
    "move forward 2",
    "move forward 3",
    "turn left",
    "turn right",
    "turn around",
    "go",
    "go",
    "go",
    "stop",
    "yes",
    "no",
    "left",
    "right",
    "forward",
    "where am i",
    "repeat 2 (move forward 1 turn left)",
    "blah",
];

#[test]
fn fuzzed_sessions_never_break_safety() {
    let mut r = rng::seeded(2024);
    for k in 0..1000u64 {
        let sc = fuzz_scenario(k);
        let threshold = sc.config.safety_threshold_m;
        let mut s = Session::create(sc, k).unwrap();
        for _ in 0..r.random_range(2..7) {
            let u = FUZZ_UTTERANCES.choose(&mut r).unwrap();
            match s.submit_utterance(u) {
                Ok(_) => {}
                Err(SessionError::SessionOver) => break,
                Err(e) => panic!("session {k}: {e}"),
            }
            assert_ne!(s.mode(), Mode::Executing);
            let here = cell_of(s.world(), &s.true_pose());
            assert!(s.world().is_free(here), "session {k}: robot in blocked cell {here:?}");
        }
        let log = s.log();
        let mut awaiting = false;
        let mut asked = BTreeSet::new();
        for (i, e) in log.iter().enumerate() {
            assert_eq!(e.seq, i as u64 + 1);
            match &e.body {
                EventBody::Step(st) => {
                    assert!(!awaiting, "session {k}: moved while a question was open");
                    if st.primitive == "F1" {
                        assert!(st.clearance_m.unwrap() >= threshold);
                    }
                    let t = st.true_pose.unwrap();
                    let c = cell_of(&s.scenario().maze, &t);
                    assert!(s.scenario().maze.is_free(c), "session {k}: step into wall {c:?}");
                }
                EventBody::GuidanceRequest(g) => {
                    if !g.repeated {
                        assert!(asked.insert(g.blocked_cell), "session {k}: asked twice");
                    }
                    awaiting = true;
                }
                EventBody::GuidanceResolved(_) => awaiting = false,
                _ => {}
            }
        }
        assert_eq!(s.metrics().safety_violations, 0);
    }
}
