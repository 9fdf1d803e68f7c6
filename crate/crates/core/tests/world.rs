use echomaze_core::rng;
use echomaze_core::world::*;
use proptest::prelude::*;
use rand::Rng;
use std::f64::consts::{FRAC_PI_2, PI};

fn free_edges(grid: &OccupancyGrid) -> usize {
    grid.free_cells()
        .map(|g| {
            [Direction::East, Direction::North]
                .into_iter()
                .filter(|d| g.step(*d).is_some_and(|n| grid.is_free(n)))
                .count()
        })
        .sum()
}

/// Relaxes `d(n) = min(d(n), d(m) + 1)` over every free adjacency until nothing changes.
fn relaxed_distances(grid: &OccupancyGrid, goal: GridIndex) -> Vec<Option<u32>> {
    let (w, h) = (grid.width_cells(), grid.height_cells());
    let mut dist = vec![None; w * h];
    dist[goal.row * w + goal.col] = Some(0u32);
    loop {
        let mut changed = false;
        for g in grid.free_cells() {
            for d in Direction::ALL {
                let Some(n) = g.step(d).filter(|n| grid.contains(*n) && grid.is_free(*n)) else { continue };
                if let Some(dn) = dist[n.row * w + n.col] {
                    let slot = &mut dist[g.row * w + g.col];
                    if slot.is_none_or(|cur| dn + 1 < cur) {
                        *slot = Some(dn + 1);
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            return dist;
        }
    }
}

fn open_room(w: usize, h: usize, cell_size: f64) -> MazeSpec {
    let mut g = OccupancyGrid::filled(w, h, cell_size, CellState::Wall);
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            g.set(GridIndex::new(c, r), CellState::Free);
        }
    }
    let start = Pose::new(1.5 * cell_size, 1.5 * cell_size, 0.0);
    MazeSpec::new(g, start, GridIndex::new(w - 2, h - 2)).unwrap()
}

#[test]
fn generated_mazes_are_perfect() {
    for seed in 0..120 {
        for (w, h) in [(5, 5), (7, 9), (15, 15), (21, 11)] {
            let maze = generate_maze(w, h, 0.4, seed).unwrap();
            let grid = maze.grid();
            let free = grid.free_cells().count();
            // A connected graph with |V| - 1 edges is a tree: no cycles.
            assert_eq!(free_edges(grid), free - 1, "seed {seed} {w}x{h}");
            let field = distance_field(grid, maze.goal()).unwrap();
            assert!(grid.free_cells().all(|g| field.get(g).is_some()));
            assert!(maze.is_free(maze.start_cell()));
        }
    }
}

#[test]
fn generation_is_a_pure_function() {
    let a = generate_maze(15, 15, 0.4, 77).unwrap();
    let b = generate_maze(15, 15, 0.4, 77).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.grid().to_rows(), b.grid().to_rows());
    assert_ne!(a.grid().to_rows(), generate_maze(15, 15, 0.4, 78).unwrap().grid().to_rows());
}

#[test]
fn invalid_dimensions_are_rejected() {
    for (w, h) in [(4, 5), (5, 6), (3, 3), (6, 6)] {
        assert!(matches!(generate_maze(w, h, 0.4, 0), Err(WorldError::InvalidDimensions { .. })));
    }
    assert!(generate_maze(5, 5, 0.0, 0).is_err());
}

#[test]
fn distance_field_matches_relaxation_oracle() {
    let mut r = rng::seeded(5);
    for seed in 0..40 {
        for w in [5, 7, 9] {
            for h in [5, 7, 9] {
                let mut grid = generate_maze(w, h, 1.0, seed).unwrap().grid().clone();
                // Knock out some interior walls so cycles and ties appear too.
                if seed % 2 == 1 {
                    for row in 1..h - 1 {
                        for col in 1..w - 1 {
                            if r.random_bool(0.2) {
                                grid.set(GridIndex::new(col, row), CellState::Free);
                            }
                        }
                    }
                }
                let cells: Vec<GridIndex> = grid.free_cells().collect();
                let goal = cells[r.random_range(0..cells.len())];
                let field = distance_field(&grid, goal).unwrap();
                let oracle = relaxed_distances(&grid, goal);
                for row in 0..h {
                    for col in 0..w {
                        let g = GridIndex::new(col, row);
                        let expect = if grid.is_free(g) { oracle[row * w + col] } else { None };
                        assert_eq!(field.get(g), expect, "seed {seed} {w}x{h} at {g:?}");
                    }
                }
                assert_eq!(field.get(goal), Some(0));
            }
        }
    }
}

#[test]
fn distance_field_examples() {
    let room = open_room(5, 5, 1.0);
    let field = distance_field(room.grid(), GridIndex::new(1, 1)).unwrap();
    assert_eq!(field.get(GridIndex::new(3, 3)), Some(4));
    assert_eq!(field.get(GridIndex::new(0, 0)), None);
    assert!(matches!(
        distance_field(room.grid(), GridIndex::new(0, 2)),
        Err(WorldError::InvalidGoal { col: 0, row: 2 })
    ));
}

#[test]
fn coordinate_examples() {
    let maze = open_room(9, 9, 0.5);
    assert_eq!(maze.world_to_grid(0.0, 0.0).unwrap(), GridIndex::new(0, 0));
    assert_eq!(maze.world_to_grid(0.74, 1.25).unwrap(), GridIndex::new(1, 2));
    assert!(matches!(maze.world_to_grid(-0.1, 1.0), Err(WorldError::OutOfBounds { .. })));
    assert!(maze.world_to_grid(4.5, 1.0).is_err());
    assert_eq!(grid_to_world(GridIndex::new(0, 0), &maze).unwrap(), Point::new(0.25, 0.25));
    assert_eq!(grid_to_world(GridIndex::new(3, 1), &maze).unwrap(), Point::new(1.75, 0.75));
    assert!(matches!(
        maze.grid_to_world(GridIndex::new(9, 0)),
        Err(WorldError::IndexOutOfBounds { .. })
    ));
}

#[test]
fn grid_round_trip_over_every_cell() {
    let maze = generate_maze(7, 7, 0.4, 1).unwrap();
    for row in 0..7 {
        for col in 0..7 {
            let g = GridIndex::new(col, row);
            let p = grid_to_world(g, &maze).unwrap();
            assert_eq!(world_to_grid(p, &maze).unwrap(), g);
        }
    }
}

proptest! {
    #[test]
    fn world_to_grid_floors(x in 0.0f64..3.6, y in 0.0f64..3.6) {
        let maze = open_room(9, 9, 0.4);
        let g = maze.world_to_grid(x, y).unwrap();
        prop_assert_eq!(g, GridIndex::new((x / 0.4).floor() as usize, (y / 0.4).floor() as usize));
        let c = maze.grid_to_world(g).unwrap();
        prop_assert!((c.x - x).abs() <= 0.2 + 1e-12 && (c.y - y).abs() <= 0.2 + 1e-12);
    }

    #[test]
    fn wrapped_angles_stay_in_half_open_interval(a in -100.0f64..100.0) {
        let w = wrap_angle(a);
        prop_assert!(w > -PI && w <= PI);
        prop_assert!(((a - w) / (2.0 * PI) - ((a - w) / (2.0 * PI)).round()).abs() < 1e-9);
    }
}

#[test]
fn area_examples() {
    assert!((maze_area_m2(&generate_maze(15, 15, 0.4, 0).unwrap()) - 36.0).abs() < 1e-9);
    assert!((maze_area_m2(&open_room(5, 5, 1.0)) - 25.0).abs() < 1e-12);
}

#[test]
fn rays_in_an_open_room_hit_the_inner_faces() {
    // Interior spans [0.4, 2.4] in both axes.
    let room = open_room(7, 7, 0.4);
    let o = Point::new(1.0, 1.3);
    let cases = [(0.0, 1.4), (FRAC_PI_2, 1.1), (PI, 0.6), (-FRAC_PI_2, 0.9)];
    for (angle, expect) in cases {
        let hit = cast_ray(&room, 0.4, o, angle);
        assert!((hit.distance - expect).abs() < 1e-9, "{angle}: {}", hit.distance);
    }
    // A diagonal ray to the far corner region.
    let hit = cast_ray(&room, 0.4, Point::new(0.6, 0.6), PI / 4.0);
    assert!((hit.distance - 1.8 * 2f64.sqrt()).abs() < 1e-9);
    assert_eq!(cast_ray(&room, 0.4, Point::new(0.1, 0.1), 0.0).distance, 0.0);
}

#[test]
fn direction_helpers_agree() {
    for d in Direction::ALL {
        assert_eq!(d.left().right(), d);
        assert_eq!(d.opposite().opposite(), d);
        assert_eq!(Direction::from_heading(d.heading()), d);
        assert_eq!(d.quarter_turns_to(d.left()), 1);
    }
}
