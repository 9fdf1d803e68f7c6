//! EKF-SLAM over range-bearing observations of wall corners.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, Matrix3x2, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::world::{cast_ray, wrap_angle, CellState, GridIndex, MazeSpec, Occupancy, Point, Pose};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SlamError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("landmark {0} is not in the map")]
    UnknownLandmark(usize),
    #[error("pose ({x:.3}, {y:.3}) is inside a wall")]
    PoseInWall { x: f64, y: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseParams {
    pub sigma_v: f64,
    pub sigma_omega: f64,
    pub sigma_r: f64,
    pub sigma_phi: f64,
    pub gate_chi2: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            sigma_v: 0.01,
            sigma_omega: 0.01,
            sigma_r: 0.02,
            sigma_phi: 0.017,
            gate_chi2: 9.21,
        }
    }
}

impl NoiseParams {
    /// All sigmas zero; only meaningful for simulating sensors and actuators.
    pub fn zero() -> Self {
        Self {
            sigma_v: 0.0,
            sigma_omega: 0.0,
            sigma_r: 0.0,
            sigma_phi: 0.0,
            ..Self::default()
        }
    }

    /// Filter noise must be strictly positive.
    pub fn validate(&self) -> Result<(), SlamError> {
        let sigmas = [self.sigma_v, self.sigma_omega, self.sigma_r, self.sigma_phi];
        if sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(SlamError::InvalidInput(format!("noise sigmas must be > 0: {sigmas:?}")));
        }
        if !(self.gate_chi2.is_finite() && self.gate_chi2 > 0.0) {
            return Err(SlamError::InvalidInput(format!("gate {} must be > 0", self.gate_chi2)));
        }
        Ok(())
    }

    fn validate_simulation(&self) -> Result<(), SlamError> {
        let sigmas = [self.sigma_v, self.sigma_omega, self.sigma_r, self.sigma_phi];
        if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(SlamError::InvalidInput(format!("noise sigmas must be >= 0: {sigmas:?}")));
        }
        Ok(())
    }

    fn motion_cov(&self) -> Matrix2<f64> {
        Matrix2::new(self.sigma_v.powi(2), 0.0, 0.0, self.sigma_omega.powi(2))
    }

    fn measurement_cov(&self) -> Matrix2<f64> {
        Matrix2::new(self.sigma_r.powi(2), 0.0, 0.0, self.sigma_phi.powi(2))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorConfig {
    pub max_range: f64,
    pub fov: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            max_range: 2.0,
            fov: std::f64::consts::FRAC_PI_2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionLimits {
    pub v_max: f64,
    pub omega_max: f64,
}

impl Default for MotionLimits {
    fn default() -> Self {
        Self {
            v_max: 1.0,
            omega_max: std::f64::consts::PI,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionInput {
    pub v: f64,
    pub omega: f64,
    pub dt: f64,
}

impl MotionInput {
    pub fn new(v: f64, omega: f64, dt: f64) -> Self {
        Self { v, omega, dt }
    }

    pub fn check(&self, limits: &MotionLimits) -> Result<(), SlamError> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(SlamError::InvalidInput(format!("dt = {} must be > 0", self.dt)));
        }
        if !self.v.is_finite() || self.v.abs() > limits.v_max {
            return Err(SlamError::InvalidInput(format!("|v| = {} exceeds {}", self.v, limits.v_max)));
        }
        if !self.omega.is_finite() || self.omega.abs() > limits.omega_max {
            return Err(SlamError::InvalidInput(format!(
                "|omega| = {} exceeds {}",
                self.omega, limits.omega_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeBearing {
    pub r: f64,
    pub phi: f64,
}

/// A simulated measurement together with the true landmark it came from.
/// The id is for test oracles only; the filter never sees it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub z: RangeBearing,
    pub hidden_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Association {
    Match(usize),
    NewLandmark,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeliefState {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl BeliefState {
    pub fn new(pose: Pose, pose_cov: Matrix3<f64>) -> Self {
        let mut cov = DMatrix::zeros(3, 3);
        cov.copy_from(&pose_cov);
        Self {
            mean: DVector::from_column_slice(&[pose.x, pose.y, wrap_angle(pose.theta)]),
            cov,
        }
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn landmark_count(&self) -> usize {
        (self.mean.len() - 3) / 2
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn pose(&self) -> Pose {
        Pose {
            x: self.mean[0],
            y: self.mean[1],
            theta: self.mean[2],
        }
    }

    pub fn landmark(&self, j: usize) -> Option<Point> {
        (j < self.landmark_count()).then(|| Point::new(self.mean[3 + 2 * j], self.mean[4 + 2 * j]))
    }

    /// Smallest covariance eigenvalue and the largest asymmetry |P - P^T|.
    pub fn health(&self) -> (f64, f64) {
        let asym = (&self.cov - self.cov.transpose()).abs().max();
        let eig = self.cov.clone().symmetric_eigenvalues();
        (eig.min(), asym)
    }

    fn pose_vec(&self) -> Vector3<f64> {
        Vector3::new(self.mean[0], self.mean[1], self.mean[2])
    }
}

fn check_finite(b: &BeliefState) -> Result<(), SlamError> {
    if b.mean.iter().chain(b.cov.iter()).all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SlamError::NumericalFailure("belief contains non-finite values".into()))
    }
}

/// Unicycle motion: advance along the current heading, then turn.
pub fn motion_model(pose: &Vector3<f64>, u: &MotionInput) -> Vector3<f64> {
    let th = pose[2];
    Vector3::new(
        pose[0] + u.v * u.dt * th.cos(),
        pose[1] + u.v * u.dt * th.sin(),
        wrap_angle(th + u.omega * u.dt),
    )
}

/// Jacobians of [`motion_model`] w.r.t. the pose (F) and w.r.t. (v, omega) (G).
pub fn motion_jacobians(pose: &Vector3<f64>, u: &MotionInput) -> (Matrix3<f64>, Matrix3x2<f64>) {
    let (s, c) = pose[2].sin_cos();
    let f = Matrix3::new(
        1.0, 0.0, -u.v * u.dt * s, //
        0.0, 1.0, u.v * u.dt * c, //
        0.0, 0.0, 1.0,
    );
    let g = Matrix3x2::new(
        u.dt * c, 0.0, //
        u.dt * s, 0.0, //
        0.0, u.dt,
    );
    (f, g)
}

/// Expected range and bearing of `landmark` from `pose`.
pub fn measurement_model(pose: &Vector3<f64>, landmark: &Vector2<f64>) -> Vector2<f64> {
    let dx = landmark[0] - pose[0];
    let dy = landmark[1] - pose[1];
    Vector2::new(dx.hypot(dy), wrap_angle(dy.atan2(dx) - pose[2]))
}

/// Jacobians of [`measurement_model`] w.r.t. the pose and the landmark.
pub fn measurement_jacobians(
    pose: &Vector3<f64>,
    landmark: &Vector2<f64>,
) -> Result<(Matrix2x3<f64>, Matrix2<f64>), SlamError> {
    let dx = landmark[0] - pose[0];
    let dy = landmark[1] - pose[1];
    let q = dx * dx + dy * dy;
    if !(q > 1e-18) {
        return Err(SlamError::NumericalFailure("landmark coincides with the robot".into()));
    }
    let r = q.sqrt();
    let hr = Matrix2x3::new(
        -dx / r, -dy / r, 0.0, //
        dy / q, -dx / q, -1.0,
    );
    let hl = Matrix2::new(
        dx / r, dy / r, //
        -dy / q, dx / q,
    );
    Ok((hr, hl))
}

pub fn predict(b: &BeliefState, u: &MotionInput, q: &NoiseParams) -> Result<BeliefState, SlamError> {
    if !(u.dt.is_finite() && u.dt > 0.0) {
        return Err(SlamError::InvalidInput(format!("dt = {} must be > 0", u.dt)));
    }
    if !(u.v.is_finite() && u.omega.is_finite()) {
        return Err(SlamError::InvalidInput("non-finite motion input".into()));
    }
    q.validate()?;
    let x = b.pose_vec();
    let (f, g) = motion_jacobians(&x, u);
    let new_pose = motion_model(&x, u);

    let n = b.dim();
    let mut out = b.clone();
    out.mean.fixed_rows_mut::<3>(0).copy_from(&new_pose);

    let ppp = b.cov.fixed_view::<3, 3>(0, 0).into_owned();
    let new_ppp = f * ppp * f.transpose() + g * q.motion_cov() * g.transpose();
    out.cov.fixed_view_mut::<3, 3>(0, 0).copy_from(&new_ppp);
    if n > 3 {
        let ppm = b.cov.view((0, 3), (3, n - 3));
        let new_ppm = f * ppm;
        out.cov.view_mut((0, 3), (3, n - 3)).copy_from(&new_ppm);
        out.cov.view_mut((3, 0), (n - 3, 3)).copy_from(&new_ppm.transpose());
    }
    symmetrize(&mut out.cov);
    check_finite(&out)?;
    Ok(out)
}

fn symmetrize(p: &mut DMatrix<f64>) {
    let n = p.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let m = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = m;
            p[(j, i)] = m;
        }
    }
}

/// Grid vertices whose four incident cells are mixed Wall/Free, row-major.
/// Cells outside the grid count as Wall.
pub fn extract_landmarks(maze: &MazeSpec) -> Vec<Point> {
    let (w, h) = (maze.width_cells() as i64, maze.height_cells() as i64);
    let cs = maze.cell_size();
    let free = |c: i64, r: i64| {
        c >= 0
            && r >= 0
            && c < w
            && r < h
            && maze.cell(GridIndex::new(c as usize, r as usize)) == CellState::Free
    };
    let mut out = Vec::new();
    for j in 0..=h {
        for i in 0..=w {
            let n = [free(i - 1, j - 1), free(i, j - 1), free(i - 1, j), free(i, j)]
                .iter()
                .filter(|f| **f)
                .count();
            if n != 0 && n != 4 {
                out.push(Point::new(i as f64 * cs, j as f64 * cs));
            }
        }
    }
    out
}

/// Simulated range-bearing sensor. Noise sigmas may be zero.
pub fn observe(
    true_pose: &Pose,
    landmarks: &[Point],
    noise: &NoiseParams,
    sensor: &SensorConfig,
    maze: &MazeSpec,
    seed: u64,
) -> Result<Vec<Observation>, SlamError> {
    noise.validate_simulation()?;
    let free = maze
        .world_to_grid(true_pose.x, true_pose.y)
        .is_ok_and(|g| maze.is_free(g));
    if !free {
        return Err(SlamError::PoseInWall {
            x: true_pose.x,
            y: true_pose.y,
        });
    }
    let mut rng = rng::seeded(seed);
    let origin = true_pose.position();
    let mut out = Vec::new();
    for (id, lm) in landmarks.iter().enumerate() {
        let (dx, dy) = (lm.x - origin.x, lm.y - origin.y);
        let r = dx.hypot(dy);
        if r > sensor.max_range || r < 1e-9 {
            continue;
        }
        let angle = dy.atan2(dx);
        let phi = wrap_angle(angle - true_pose.theta);
        if phi.abs() > sensor.fov / 2.0 {
            continue;
        }
        let hit = cast_ray(maze, maze.cell_size(), origin, angle);
        if hit.distance < r - 1e-6 {
            continue;
        }
        let nr = rng::gaussian(&mut rng);
        let nphi = rng::gaussian(&mut rng);
        out.push(Observation {
            z: RangeBearing {
                r: (r + noise.sigma_r * nr).max(1e-6),
                phi: wrap_angle(phi + noise.sigma_phi * nphi),
            },
            hidden_id: id,
        });
    }
    Ok(out)
}

struct Innovation {
    nu: Vector2<f64>,
    /// P * H^T, dimension n x 2.
    pht: nalgebra::OMatrix<f64, nalgebra::Dyn, nalgebra::U2>,
    s: Matrix2<f64>,
}

fn innovation(b: &BeliefState, z: &RangeBearing, j: usize, noise: &NoiseParams) -> Result<Innovation, SlamError> {
    if j >= b.landmark_count() {
        return Err(SlamError::UnknownLandmark(j));
    }
    let x = b.pose_vec();
    let li = 3 + 2 * j;
    let lm = Vector2::new(b.mean[li], b.mean[li + 1]);
    let zhat = measurement_model(&x, &lm);
    let (hr, hl) = measurement_jacobians(&x, &lm)?;
    let nu = Vector2::new(z.r - zhat[0], wrap_angle(z.phi - zhat[1]));

    let n = b.dim();
    // P H^T touches only the pose columns and the landmark's two columns.
    let pht = b.cov.columns(0, 3) * hr.transpose() + b.cov.columns(li, 2) * hl.transpose();
    debug_assert_eq!(pht.nrows(), n);
    let s_top = hr * pht.rows(0, 3) + hl * pht.rows(li, 2);
    let s = Matrix2::new(s_top[(0, 0)], s_top[(0, 1)], s_top[(1, 0)], s_top[(1, 1)]) + noise.measurement_cov();
    Ok(Innovation { nu, pht, s })
}

fn invert(s: &Matrix2<f64>) -> Result<Matrix2<f64>, SlamError> {
    let det = s.determinant();
    if !(det.is_finite() && det > f64::EPSILON * s.norm_squared()) {
        return Err(SlamError::NumericalFailure(format!("innovation covariance is singular (det {det:e})")));
    }
    s.try_inverse()
        .ok_or_else(|| SlamError::NumericalFailure("innovation covariance is singular".into()))
}

/// Squared Mahalanobis distance of `z` against mapped landmark `j`.
pub fn mahalanobis(b: &BeliefState, z: &RangeBearing, j: usize, noise: &NoiseParams) -> Result<f64, SlamError> {
    let inn = innovation(b, z, j, noise)?;
    let s_inv = invert(&inn.s)?;
    Ok((inn.nu.transpose() * s_inv * inn.nu)[(0, 0)])
}

/// Nearest mapped landmark by Mahalanobis distance, gated; ties go to the lowest index.
pub fn associate(b: &BeliefState, z: &RangeBearing, noise: &NoiseParams) -> Result<Association, SlamError> {
    noise.validate()?;
    let mut best: Option<(usize, f64)> = None;
    for j in 0..b.landmark_count() {
        let m = mahalanobis(b, z, j, noise)?;
        if best.is_none_or(|(_, bm)| m < bm) {
            best = Some((j, m));
        }
    }
    Ok(match best {
        Some((j, m)) if m <= noise.gate_chi2 => Association::Match(j),
        _ => Association::NewLandmark,
    })
}

pub fn update(b: &BeliefState, z: &RangeBearing, j: usize, noise: &NoiseParams) -> Result<BeliefState, SlamError> {
    noise.validate()?;
    let inn = innovation(b, z, j, noise)?;
    let s_inv = invert(&inn.s)?;
    let k = &inn.pht * s_inv;
    let mut out = b.clone();
    out.mean += &k * inn.nu;
    out.mean[2] = wrap_angle(out.mean[2]);
    // (I - K H) P = P - K (P H^T)^T
    out.cov -= &k * inn.pht.transpose();
    symmetrize(&mut out.cov);
    check_finite(&out)?;
    Ok(out)
}

/// Initialise a new landmark from a measurement.
pub fn augment(b: &BeliefState, z: &RangeBearing, noise: &NoiseParams) -> Result<BeliefState, SlamError> {
    noise.validate()?;
    if !(z.r.is_finite() && z.phi.is_finite() && z.r > 0.0) {
        return Err(SlamError::InvalidInput(format!("bad measurement {z:?}")));
    }
    let x = b.pose_vec();
    let a = x[2] + z.phi;
    let (s, c) = a.sin_cos();
    let lm = Vector2::new(x[0] + z.r * c, x[1] + z.r * s);
    let gx = Matrix2x3::new(
        1.0, 0.0, -z.r * s, //
        0.0, 1.0, z.r * c,
    );
    let gz = Matrix2::new(
        c, -z.r * s, //
        s, z.r * c,
    );
    let n = b.dim();
    let mut mean = DVector::zeros(n + 2);
    mean.rows_mut(0, n).copy_from(&b.mean);
    mean.rows_mut(n, 2).copy_from(&lm);

    let mut cov = DMatrix::zeros(n + 2, n + 2);
    cov.view_mut((0, 0), (n, n)).copy_from(&b.cov);
    // Cross terms: Gx * P[pose rows, :]
    let cross = gx * b.cov.rows(0, 3);
    cov.view_mut((n, 0), (2, n)).copy_from(&cross);
    cov.view_mut((0, n), (n, 2)).copy_from(&cross.transpose());
    let ppp = b.cov.fixed_view::<3, 3>(0, 0).into_owned();
    let pll = gx * ppp * gx.transpose() + gz * noise.measurement_cov() * gz.transpose();
    cov.view_mut((n, n), (2, 2)).copy_from(&pll);

    let mut out = BeliefState { mean, cov };
    symmetrize(&mut out.cov);
    check_finite(&out)?;
    Ok(out)
}

pub fn estimate_pose(b: &BeliefState) -> (Pose, Matrix3<f64>) {
    (b.pose(), b.cov.fixed_view::<3, 3>(0, 0).into_owned())
}

/// Pose NEES: e^T P^-1 e with the heading error wrapped.
pub fn pose_nees(b: &BeliefState, truth: &Pose) -> Result<f64, SlamError> {
    let (est, p) = estimate_pose(b);
    let e = Vector3::new(est.x - truth.x, est.y - truth.y, wrap_angle(est.theta - truth.theta));
    let inv = p
        .try_inverse()
        .ok_or_else(|| SlamError::NumericalFailure("pose covariance is singular".into()))?;
    Ok((e.transpose() * inv * e)[(0, 0)])
}

/// Squared Mahalanobis distance below which an unmatched measurement is
/// considered too close to an existing landmark to start a new one
/// (0.9999 quantile at 2 dof).
pub const NEW_LANDMARK_CHI2: f64 = 18.42;

/// What [`incorporate`] did with one measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "landmark", rename_all = "snake_case")]
pub enum Decision {
    Updated(usize),
    Added(usize),
    /// Two landmarks inside the gate, or too close to one to be new.
    Discarded,
}

/// Filters a batch of measurements into the belief. Uses nearest-neighbour
/// gating like [`associate`], but discards ambiguous measurements instead of
/// guessing, which keeps a lattice of similar corners from being confused.
pub fn incorporate(
    b: &BeliefState,
    measurements: &[RangeBearing],
    noise: &NoiseParams,
) -> Result<(BeliefState, Vec<Decision>), SlamError> {
    noise.validate()?;
    let mut belief = b.clone();
    let mut decisions = Vec::with_capacity(measurements.len());
    for z in measurements {
        let mut scores = (0..belief.landmark_count())
            .map(|j| mahalanobis(&belief, z, j, noise).map(|m| (m, j)))
            .collect::<Result<Vec<_>, _>>()?;
        scores.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let best = scores.first().copied();
        let second = scores.get(1).map(|s| s.0);
        let decision = match best {
            Some((m, j)) if m <= noise.gate_chi2 => {
                if second.is_some_and(|m2| m2 <= noise.gate_chi2) {
                    Decision::Discarded
                } else {
                    belief = update(&belief, z, j, noise)?;
                    Decision::Updated(j)
                }
            }
            Some((m, _)) if m <= NEW_LANDMARK_CHI2 => Decision::Discarded,
            _ => {
                let j = belief.landmark_count();
                belief = augment(&belief, z, noise)?;
                Decision::Added(j)
            }
        };
        decisions.push(decision);
    }
    Ok((belief, decisions))
}

/// How measurements are matched to map entries during [`simulate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssociationMode {
    /// Mahalanobis gating via [`incorporate`].
    Gated,
    /// Ground-truth ids (test oracle).
    Known,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    /// Noise the filter assumes.
    pub filter_noise: NoiseParams,
    /// Noise actually applied to motion and measurements.
    pub true_noise: NoiseParams,
    pub sensor: SensorConfig,
    /// Initial pose covariance; the true start is drawn from it.
    pub initial_cov: Matrix3<f64>,
    pub association: AssociationMode,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            filter_noise: NoiseParams::default(),
            true_noise: NoiseParams::default(),
            sensor: SensorConfig::default(),
            initial_cov: Matrix3::zeros(),
            association: AssociationMode::Gated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub truth: Pose,
    pub estimate: Pose,
    pub nees: Option<f64>,
    pub landmarks: usize,
}

/// Runs the filter against a simulated robot executing `motions` in `maze`.
/// Row 0 is the initial state; row k follows the k-th motion and its observations.
pub fn simulate(
    maze: &MazeSpec,
    start: Pose,
    motions: &[MotionInput],
    cfg: &SimConfig,
    seed: u64,
) -> Result<Vec<TraceRow>, SlamError> {
    let landmarks = extract_landmarks(maze);
    let chol = cfg.initial_cov.cholesky();
    let mut rng = rng::seeded(rng::derive_seed(seed, 10, 0));
    let mut truth = Vector3::new(start.x, start.y, start.theta);
    if let Some(ch) = chol {
        let n = Vector3::new(rng::gaussian(&mut rng), rng::gaussian(&mut rng), rng::gaussian(&mut rng));
        truth += ch.l() * n;
        truth[2] = wrap_angle(truth[2]);
    }
    let mut belief = BeliefState::new(start, cfg.initial_cov);
    let mut ids: Vec<Option<usize>> = vec![None; landmarks.len()];
    let as_pose = |v: &Vector3<f64>| Pose {
        x: v[0],
        y: v[1],
        theta: v[2],
    };
    let mut rows = vec![TraceRow {
        step: 0,
        truth: as_pose(&truth),
        estimate: belief.pose(),
        nees: pose_nees(&belief, &as_pose(&truth)).ok(),
        landmarks: 0,
    }];
    for (k, u) in motions.iter().enumerate() {
        let noisy = MotionInput {
            v: u.v + cfg.true_noise.sigma_v * rng::gaussian(&mut rng),
            omega: u.omega + cfg.true_noise.sigma_omega * rng::gaussian(&mut rng),
            dt: u.dt,
        };
        truth = motion_model(&truth, &noisy);
        belief = predict(&belief, u, &cfg.filter_noise)?;
        let pose = as_pose(&truth);
        // Walls do not stop the simulated robot; it is simply blind inside one.
        let obs = match observe(
            &pose,
            &landmarks,
            &cfg.true_noise,
            &cfg.sensor,
            maze,
            rng::derive_seed(seed, 11, k as u64),
        ) {
            Err(SlamError::PoseInWall { .. }) => Vec::new(),
            other => other?,
        };
        match cfg.association {
            AssociationMode::Gated => {
                let zs: Vec<RangeBearing> = obs.iter().map(|o| o.z).collect();
                belief = incorporate(&belief, &zs, &cfg.filter_noise)?.0;
            }
            AssociationMode::Known => {
                for o in obs {
                    belief = match ids[o.hidden_id] {
                        Some(j) => update(&belief, &o.z, j, &cfg.filter_noise)?,
                        None => {
                            ids[o.hidden_id] = Some(belief.landmark_count());
                            augment(&belief, &o.z, &cfg.filter_noise)?
                        }
                    };
                }
            }
        }
        rows.push(TraceRow {
            step: k + 1,
            truth: pose,
            estimate: belief.pose(),
            nees: pose_nees(&belief, &pose).ok(),
            landmarks: belief.landmark_count(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::OccupancyGrid;

    fn origin_belief() -> BeliefState {
        BeliefState::new(Pose::new(0.0, 0.0, 0.0), Matrix3::identity() * 1e-4)
    }

    #[test]
    fn predict_examples() {
        let q = NoiseParams::default();
        let b = origin_belief();
        let s = predict(&b, &MotionInput::new(0.0, 0.0, 1.0), &q).unwrap();
        assert_eq!(s.mean(), b.mean());
        // G M G^T with theta = 0, dt = 1 adds sigma_v^2 to xx and sigma_omega^2 to theta.
        assert!((s.covariance()[(0, 0)] - (1e-4 + 1e-4)).abs() < 1e-15);
        assert!((s.covariance()[(2, 2)] - (1e-4 + 1e-4)).abs() < 1e-15);
        assert_eq!(s.covariance()[(1, 1)], 1e-4);

        let m = predict(&b, &MotionInput::new(1.0, 0.0, 1.0), &q).unwrap();
        let (pose, _) = estimate_pose(&m);
        assert_eq!((pose.x, pose.y, pose.theta), (1.0, 0.0, 0.0));
        assert!(matches!(
            predict(&b, &MotionInput::new(1.0, 0.0, 0.0), &q),
            Err(SlamError::InvalidInput(_))
        ));
    }

    #[test]
    fn augment_examples() {
        let q = NoiseParams::default();
        let b = augment(&origin_belief(), &RangeBearing { r: 2.0, phi: 0.0 }, &q).unwrap();
        assert_eq!(b.landmark_count(), 1);
        let lm = b.landmark(0).unwrap();
        assert!((lm.x - 2.0).abs() < 1e-12 && lm.y.abs() < 1e-12);

        let b = BeliefState::new(Pose::new(1.0, 1.0, std::f64::consts::FRAC_PI_2), Matrix3::zeros());
        let b = augment(&b, &RangeBearing { r: 1.0, phi: 0.0 }, &q).unwrap();
        let lm = b.landmark(0).unwrap();
        assert!((lm.x - 1.0).abs() < 1e-12 && (lm.y - 2.0).abs() < 1e-12);
    }

    #[test]
    fn association_basics() {
        let q = NoiseParams::default();
        let b = origin_belief();
        let z = RangeBearing { r: 1.5, phi: 0.3 };
        assert_eq!(associate(&b, &z, &q).unwrap(), Association::NewLandmark);
        let b = augment(&b, &z, &q).unwrap();
        assert_eq!(associate(&b, &z, &q).unwrap(), Association::Match(0));
        assert!(matches!(update(&b, &z, 3, &q), Err(SlamError::UnknownLandmark(3))));
    }

    #[test]
    fn zero_innovation_update_keeps_mean() {
        let q = NoiseParams::default();
        let z = RangeBearing { r: 1.5, phi: 0.3 };
        let b = augment(&origin_belief(), &z, &q).unwrap();
        let u = update(&b, &z, 0, &q).unwrap();
        assert!((u.mean() - b.mean()).amax() < 1e-12);
        assert!(u.covariance().trace() <= b.covariance().trace());
    }

    #[test]
    fn landmarks_of_single_free_cell() {
        let mut g = OccupancyGrid::filled(3, 3, 0.5, CellState::Wall);
        g.set(GridIndex::new(1, 1), CellState::Free);
        let maze = MazeSpec::new(g, Pose::new(0.75, 0.75, 0.0), GridIndex::new(1, 1)).unwrap();
        let lms = extract_landmarks(&maze);
        let expect = [(0.5, 0.5), (1.0, 0.5), (0.5, 1.0), (1.0, 1.0)];
        assert_eq!(lms.len(), 4);
        for (p, (x, y)) in lms.iter().zip(expect) {
            assert_eq!((p.x, p.y), (x, y));
        }
    }

    #[test]
    fn observe_examples() {
        let mut g = OccupancyGrid::filled(7, 3, 1.0, CellState::Wall);
        for c in 1..6 {
            g.set(GridIndex::new(c, 1), CellState::Free);
        }
        let maze = MazeSpec::new(g, Pose::new(1.5, 1.5, 0.0), GridIndex::new(5, 1)).unwrap();
        let pose = Pose::new(2.5, 1.5, 0.0);
        let lms = [
            Point::new(3.5, 1.5),
            Point::new(1.5, 1.5),
            Point::new(4.0, 1.0),
            Point::new(3.5, 0.5),
        ];
        let sensor = SensorConfig {
            max_range: 5.0,
            ..SensorConfig::default()
        };
        let obs = observe(&pose, &lms, &NoiseParams::zero(), &sensor, &maze, 1).unwrap();
        let ids: Vec<usize> = obs.iter().map(|o| o.hidden_id).collect();
        assert_eq!(ids, vec![0, 2]);
        assert!((obs[0].z.r - 1.0).abs() < 1e-12 && obs[0].z.phi.abs() < 1e-12);
        assert!(matches!(
            observe(&Pose::new(0.5, 0.5, 0.0), &lms, &NoiseParams::zero(), &sensor, &maze, 1),
            Err(SlamError::PoseInWall { .. })
        ));
    }
}
