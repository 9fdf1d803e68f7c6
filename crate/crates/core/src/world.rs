//! Ground-truth maze model.
//!
//! Frame convention used everywhere in the crate: `x` grows east along
//! columns, `y` grows north along rows, headings are counter-clockwise
//! from `+x`. Row 0 sits at `y = 0`.

use std::collections::VecDeque;
use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorldError {
    #[error("invalid maze dimensions {width}x{height}: both must be odd and at least 5")]
    InvalidDimensions { width: usize, height: usize },
    #[error("point ({x}, {y}) lies outside the maze")]
    OutOfBounds { x: f64, y: f64 },
    #[error("cell ({col}, {row}) lies outside the maze")]
    IndexOutOfBounds { col: usize, row: usize },
    #[error("goal cell ({col}, {row}) is not free")]
    InvalidGoal { col: usize, row: usize },
    #[error("invalid maze: {0}")]
    InvalidMaze(String),
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let r = angle.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }

    /// Point `distance` meters ahead along the heading (negative is behind).
    pub fn ahead(&self, distance: f64) -> Point {
        Point::new(
            self.x + distance * self.theta.cos(),
            self.y + distance * self.theta.sin(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridIndex {
    pub col: usize,
    pub row: usize,
}

impl GridIndex {
    pub fn new(col: usize, row: usize) -> Self {
        Self { col, row }
    }

    pub fn step(&self, dir: Direction) -> Option<GridIndex> {
        let (dc, dr) = dir.delta();
        let col = self.col.checked_add_signed(dc)?;
        let row = self.row.checked_add_signed(dr)?;
        Some(GridIndex { col, row })
    }

    /// Direction of a 4-adjacent cell, if `other` is one.
    pub fn direction_to(&self, other: &GridIndex) -> Option<Direction> {
        Direction::ALL
            .into_iter()
            .find(|d| self.step(*d) == Some(*other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellState {
    Wall,
    Free,
}

impl CellState {
    pub fn symbol(self) -> char {
        match self {
            CellState::Wall => '#',
            CellState::Free => '.',
        }
    }
}

/// Absolute compass direction on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    North,
    East,
    South,
    West,
}

impl Direction {
    /// Expansion order used for deterministic tie-breaking.
    pub const ALL: [Direction; 4] = [
        Direction::North,
        Direction::East,
        Direction::South,
        Direction::West,
    ];

    pub fn delta(self) -> (isize, isize) {
        match self {
            Direction::North => (0, 1),
            Direction::East => (1, 0),
            Direction::South => (0, -1),
            Direction::West => (-1, 0),
        }
    }

    pub fn heading(self) -> f64 {
        match self {
            Direction::East => 0.0,
            Direction::North => FRAC_PI_2,
            Direction::West => PI,
            Direction::South => -FRAC_PI_2,
        }
    }

    /// Nearest cardinal direction to a heading.
    pub fn from_heading(theta: f64) -> Direction {
        let quarter = (wrap_angle(theta) / FRAC_PI_2).round() as i64;
        match quarter.rem_euclid(4) {
            0 => Direction::East,
            1 => Direction::North,
            2 => Direction::West,
            _ => Direction::South,
        }
    }

    pub fn left(self) -> Direction {
        match self {
            Direction::North => Direction::West,
            Direction::West => Direction::South,
            Direction::South => Direction::East,
            Direction::East => Direction::North,
        }
    }

    pub fn right(self) -> Direction {
        self.left().opposite()
    }

    pub fn opposite(self) -> Direction {
        self.left().left()
    }

    /// Counter-clockwise quarter turns needed to go from `self` to `to`, in `0..4`.
    pub fn quarter_turns_to(self, to: Direction) -> u8 {
        let idx = |d: Direction| match d {
            Direction::East => 0u8,
            Direction::North => 1,
            Direction::West => 2,
            Direction::South => 3,
        };
        (idx(to) + 4 - idx(self)) % 4
    }

    pub fn compass_word(self) -> &'static str {
        match self {
            Direction::North => "north",
            Direction::East => "east",
            Direction::South => "south",
            Direction::West => "west",
        }
    }
}

/// Read access to a cell grid. Cells outside the grid read as `Wall`.
pub trait Occupancy {
    fn width_cells(&self) -> usize;
    fn height_cells(&self) -> usize;
    fn cell(&self, g: GridIndex) -> CellState;

    fn contains(&self, g: GridIndex) -> bool {
        g.col < self.width_cells() && g.row < self.height_cells()
    }

    fn is_free(&self, g: GridIndex) -> bool {
        self.cell(g) == CellState::Free
    }

    /// Free 4-neighbours in N, E, S, W order.
    fn free_neighbors(&self, g: GridIndex) -> Vec<(Direction, GridIndex)> {
        Direction::ALL
            .into_iter()
            .filter_map(|d| g.step(d).map(|n| (d, n)))
            .filter(|(_, n)| self.is_free(*n))
            .collect()
    }
}

/// A row-major rectangular grid of cell states.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    width: usize,
    height: usize,
    cell_size: f64,
    cells: Vec<CellState>,
}

impl OccupancyGrid {
    pub fn new(
        width: usize,
        height: usize,
        cell_size: f64,
        cells: Vec<CellState>,
    ) -> Result<Self, WorldError> {
        if width == 0 || height == 0 || cells.len() != width * height {
            return Err(WorldError::InvalidMaze(format!(
                "{width}x{height} grid needs {} cells, got {}",
                width * height,
                cells.len()
            )));
        }
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(WorldError::InvalidMaze(format!(
                "cell size {cell_size} must be positive"
            )));
        }
        Ok(Self {
            width,
            height,
            cell_size,
            cells,
        })
    }

    pub fn filled(width: usize, height: usize, cell_size: f64, state: CellState) -> Self {
        Self {
            width,
            height,
            cell_size,
            cells: vec![state; width * height],
        }
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn cells(&self) -> &[CellState] {
        &self.cells
    }

    pub fn set(&mut self, g: GridIndex, state: CellState) {
        if self.contains(g) {
            self.cells[g.row * self.width + g.col] = state;
        }
    }

    /// One string per row, row 0 first, `#` for walls and `.` for free cells.
    pub fn to_rows(&self) -> Vec<String> {
        (0..self.height)
            .map(|r| {
                self.cells[r * self.width..(r + 1) * self.width]
                    .iter()
                    .map(|c| c.symbol())
                    .collect()
            })
            .collect()
    }

    pub fn free_cells(&self) -> impl Iterator<Item = GridIndex> + '_ {
        (0..self.height).flat_map(move |row| {
            (0..self.width)
                .map(move |col| GridIndex { col, row })
                .filter(|g| self.is_free(*g))
        })
    }
}

impl Occupancy for OccupancyGrid {
    fn width_cells(&self) -> usize {
        self.width
    }

    fn height_cells(&self) -> usize {
        self.height
    }

    fn cell(&self, g: GridIndex) -> CellState {
        if self.contains(g) {
            self.cells[g.row * self.width + g.col]
        } else {
            CellState::Wall
        }
    }
}

/// The ground-truth maze: a grid plus the robot's start pose and the goal cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MazeSpec {
    grid: OccupancyGrid,
    start: Pose,
    goal: GridIndex,
}

impl MazeSpec {
    pub fn new(grid: OccupancyGrid, start: Pose, goal: GridIndex) -> Result<Self, WorldError> {
        let (w, h) = (grid.width, grid.height);
        for row in 0..h {
            for col in 0..w {
                let border = row == 0 || col == 0 || row == h - 1 || col == w - 1;
                if border && grid.is_free(GridIndex { col, row }) {
                    return Err(WorldError::InvalidMaze(format!(
                        "border cell ({col}, {row}) must be a wall"
                    )));
                }
            }
        }
        let area = w as f64 * h as f64 * grid.cell_size * grid.cell_size;
        if !(area.is_finite() && area > 0.0) {
            return Err(WorldError::InvalidMaze(format!("area {area} is not positive")));
        }
        if !grid.contains(goal) || !grid.is_free(goal) {
            return Err(WorldError::InvalidGoal {
                col: goal.col,
                row: goal.row,
            });
        }
        let start_cell = locate_cell(&grid, start.x, start.y).map_err(|_| {
            WorldError::InvalidMaze(format!("start ({}, {}) is outside the maze", start.x, start.y))
        })?;
        if !grid.is_free(start_cell) {
            return Err(WorldError::InvalidMaze(format!(
                "start cell ({}, {}) is a wall",
                start_cell.col, start_cell.row
            )));
        }
        let field = flood(&grid, goal);
        if field[start_cell.row * w + start_cell.col].is_none() {
            return Err(WorldError::InvalidMaze(
                "no free path connects start and goal".into(),
            ));
        }
        Ok(Self {
            grid,
            start: Pose::new(start.x, start.y, start.theta),
            goal,
        })
    }

    pub fn grid(&self) -> &OccupancyGrid {
        &self.grid
    }

    /// Copy with the given cells turned to Wall. Used for the physical world
    /// once obstacles appear, so start/goal connectivity is not rechecked.
    pub fn with_blocked(&self, cells: &[GridIndex]) -> MazeSpec {
        let mut out = self.clone();
        for &g in cells {
            if out.grid.contains(g) {
                out.grid.set(g, CellState::Wall);
            }
        }
        out
    }

    pub fn cell_size(&self) -> f64 {
        self.grid.cell_size
    }

    pub fn start(&self) -> Pose {
        self.start
    }

    pub fn goal(&self) -> GridIndex {
        self.goal
    }

    pub fn start_cell(&self) -> GridIndex {
        locate_cell(&self.grid, self.start.x, self.start.y).expect("validated on construction")
    }

    pub fn width_m(&self) -> f64 {
        self.grid.width as f64 * self.grid.cell_size
    }

    pub fn height_m(&self) -> f64 {
        self.grid.height as f64 * self.grid.cell_size
    }

    pub fn world_to_grid(&self, x: f64, y: f64) -> Result<GridIndex, WorldError> {
        locate_cell(&self.grid, x, y)
    }

    pub fn grid_to_world(&self, g: GridIndex) -> Result<Point, WorldError> {
        cell_center(&self.grid, g)
    }
}

impl Occupancy for MazeSpec {
    fn width_cells(&self) -> usize {
        self.grid.width
    }

    fn height_cells(&self) -> usize {
        self.grid.height
    }

    fn cell(&self, g: GridIndex) -> CellState {
        self.grid.cell(g)
    }
}

pub(crate) fn locate_cell(grid: &OccupancyGrid, x: f64, y: f64) -> Result<GridIndex, WorldError> {
    let cs = grid.cell_size;
    if !(x.is_finite() && y.is_finite()) || x < 0.0 || y < 0.0 {
        return Err(WorldError::OutOfBounds { x, y });
    }
    let col = (x / cs).floor() as usize;
    let row = (y / cs).floor() as usize;
    if col >= grid.width || row >= grid.height {
        return Err(WorldError::OutOfBounds { x, y });
    }
    Ok(GridIndex { col, row })
}

pub(crate) fn cell_center(grid: &OccupancyGrid, g: GridIndex) -> Result<Point, WorldError> {
    if !grid.contains(g) {
        return Err(WorldError::IndexOutOfBounds {
            col: g.col,
            row: g.row,
        });
    }
    let cs = grid.cell_size;
    Ok(Point::new(
        (g.col as f64 + 0.5) * cs,
        (g.row as f64 + 0.5) * cs,
    ))
}

pub fn world_to_grid(p: Point, maze: &MazeSpec) -> Result<GridIndex, WorldError> {
    maze.world_to_grid(p.x, p.y)
}

pub fn grid_to_world(g: GridIndex, maze: &MazeSpec) -> Result<Point, WorldError> {
    maze.grid_to_world(g)
}

pub fn maze_area_m2(maze: &MazeSpec) -> f64 {
    let cs = maze.cell_size();
    maze.width_cells() as f64 * maze.height_cells() as f64 * cs * cs
}

/// Generates a perfect maze by seeded depth-first carving on the odd lattice.
pub fn generate_maze(
    width_cells: usize,
    height_cells: usize,
    cell_size: f64,
    seed: u64,
) -> Result<MazeSpec, WorldError> {
    let dims_ok = |n: usize| n >= 5 && n % 2 == 1;
    if !dims_ok(width_cells) || !dims_ok(height_cells) {
        return Err(WorldError::InvalidDimensions {
            width: width_cells,
            height: height_cells,
        });
    }
    if !(cell_size.is_finite() && cell_size > 0.0) {
        return Err(WorldError::InvalidMaze(format!(
            "cell size {cell_size} must be positive"
        )));
    }

    let mut grid = OccupancyGrid::filled(width_cells, height_cells, cell_size, CellState::Wall);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = GridIndex::new(1, 1);
    grid.set(first, CellState::Free);
    let mut stack = vec![first];
    let mut first_carve: Option<Direction> = None;

    while let Some(&current) = stack.last() {
        let candidates: Vec<(Direction, GridIndex)> = Direction::ALL
            .into_iter()
            .filter_map(|d| {
                let (dc, dr) = d.delta();
                let col = current.col.checked_add_signed(2 * dc)?;
                let row = current.row.checked_add_signed(2 * dr)?;
                let next = GridIndex { col, row };
                (col < width_cells - 1 && row < height_cells - 1 && !grid.is_free(next))
                    .then_some((d, next))
            })
            .collect();
        if candidates.is_empty() {
            stack.pop();
            continue;
        }
        let (dir, next) = candidates[rng.random_range(0..candidates.len())];
        let between = current.step(dir).expect("lattice neighbour is in range");
        grid.set(between, CellState::Free);
        grid.set(next, CellState::Free);
        first_carve.get_or_insert(dir);
        stack.push(next);
    }

    let field = flood(&grid, first);
    let goal = field
        .iter()
        .enumerate()
        .filter_map(|(i, d)| d.map(|d| (i, d)))
        .fold(None, |best: Option<(usize, u32)>, (i, d)| match best {
            Some((_, bd)) if bd >= d => best,
            _ => Some((i, d)),
        })
        .map(|(i, _)| GridIndex::new(i % width_cells, i / width_cells))
        .expect("start cell is always reachable");

    let centre = cell_center(&grid, first)?;
    let heading = first_carve.unwrap_or(Direction::East).heading();
    MazeSpec::new(grid, Pose::new(centre.x, centre.y, heading), goal)
}

/// Per-cell BFS distance (in cells) to a target; `None` marks unreachable cells.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    width: usize,
    height: usize,
    distances: Vec<Option<u32>>,
}

impl DistanceField {
    pub fn get(&self, g: GridIndex) -> Option<u32> {
        if g.col < self.width && g.row < self.height {
            self.distances[g.row * self.width + g.col]
        } else {
            None
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }
}

fn flood<O: Occupancy + ?Sized>(grid: &O, goal: GridIndex) -> Vec<Option<u32>> {
    let (w, h) = (grid.width_cells(), grid.height_cells());
    let mut dist = vec![None; w * h];
    let mut queue = VecDeque::new();
    dist[goal.row * w + goal.col] = Some(0);
    queue.push_back(goal);
    while let Some(g) = queue.pop_front() {
        let d = dist[g.row * w + g.col].expect("queued cells have distances");
        for (_, n) in grid.free_neighbors(g) {
            let slot = &mut dist[n.row * w + n.col];
            if slot.is_none() {
                *slot = Some(d + 1);
                queue.push_back(n);
            }
        }
    }
    dist
}

/// Flood-fill distances over 4-connected free cells.
pub fn distance_field<O: Occupancy + ?Sized>(
    grid: &O,
    goal: GridIndex,
) -> Result<DistanceField, WorldError> {
    if !grid.contains(goal) || !grid.is_free(goal) {
        return Err(WorldError::InvalidGoal {
            col: goal.col,
            row: goal.row,
        });
    }
    Ok(DistanceField {
        width: grid.width_cells(),
        height: grid.height_cells(),
        distances: flood(grid, goal),
    })
}

/// Which grid line a wall face lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaceAxis {
    /// Face on the line `x = line * cell_size`.
    Vertical,
    /// Face on the line `y = line * cell_size`.
    Horizontal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub distance: f64,
    pub point: Point,
    pub axis: FaceAxis,
    pub line: i64,
    /// +1 when the face looks toward increasing coordinates, -1 otherwise.
    pub facing: i8,
    pub cell: GridIndex,
}

impl RayHit {
    /// Position along the face's grid line, in meters.
    pub fn offset_along(&self) -> f64 {
        match self.axis {
            FaceAxis::Vertical => self.point.y,
            FaceAxis::Horizontal => self.point.x,
        }
    }
}

/// Casts a ray through the grid and returns the first wall face it meets.
///
/// An origin already inside a wall (or outside the grid) hits at distance 0.
pub fn cast_ray<O: Occupancy + ?Sized>(
    grid: &O,
    cell_size: f64,
    origin: Point,
    angle: f64,
) -> RayHit {
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut col = (origin.x / cell_size).floor() as i64;
    let mut row = (origin.y / cell_size).floor() as i64;
    let blocked = |c: i64, r: i64| {
        c < 0
            || r < 0
            || !grid.is_free(GridIndex {
                col: c as usize,
                row: r as usize,
            })
    };
    if blocked(col, row) {
        return RayHit {
            distance: 0.0,
            point: origin,
            axis: FaceAxis::Vertical,
            line: col,
            facing: 1,
            cell: GridIndex::new(col.max(0) as usize, row.max(0) as usize),
        };
    }

    let step_c: i64 = if dx > 0.0 { 1 } else { -1 };
    let step_r: i64 = if dy > 0.0 { 1 } else { -1 };
    let next_line = |cell: i64, step: i64| (cell + if step > 0 { 1 } else { 0 }) as f64 * cell_size;
    let mut t_max_x = if dx.abs() < 1e-15 {
        f64::INFINITY
    } else {
        (next_line(col, step_c) - origin.x) / dx
    };
    let mut t_max_y = if dy.abs() < 1e-15 {
        f64::INFINITY
    } else {
        (next_line(row, step_r) - origin.y) / dy
    };
    let t_delta_x = if dx.abs() < 1e-15 { f64::INFINITY } else { cell_size / dx.abs() };
    let t_delta_y = if dy.abs() < 1e-15 { f64::INFINITY } else { cell_size / dy.abs() };

    let limit = 2 * (grid.width_cells() + grid.height_cells()) + 4;
    for _ in 0..limit {
        let (t, axis) = if t_max_x <= t_max_y {
            col += step_c;
            let t = t_max_x;
            t_max_x += t_delta_x;
            (t, FaceAxis::Vertical)
        } else {
            row += step_r;
            let t = t_max_y;
            t_max_y += t_delta_y;
            (t, FaceAxis::Horizontal)
        };
        if blocked(col, row) {
            let point = Point::new(origin.x + t * dx, origin.y + t * dy);
            let (line, facing) = match axis {
                FaceAxis::Vertical => (if step_c > 0 { col } else { col + 1 }, -step_c as i8),
                FaceAxis::Horizontal => (if step_r > 0 { row } else { row + 1 }, -step_r as i8),
            };
            return RayHit {
                distance: t,
                point,
                axis,
                line,
                facing,
                cell: GridIndex::new(col.max(0) as usize, row.max(0) as usize),
            };
        }
    }
    unreachable!("grid borders stop every ray")
}
