//! Benchmark plants: a linear double integrator with friction, a unicycle and a
//! quadrotor, all discretized by forward Euler.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub enum SystemError {
    DimensionMismatch(String),
    /// The step produced NaN or infinite entries.
    NonFiniteState,
    UnknownKind(String),
}

impl fmt::Display for SystemError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SystemError::DimensionMismatch(what) => write!(f, "dimension mismatch: {what}"),
            SystemError::NonFiniteState => write!(f, "step produced a non-finite state"),
            SystemError::UnknownKind(k) => write!(f, "unknown reference kind `{k}`"),
        }
    }
}

impl std::error::Error for SystemError {}

/// Discrete-time dynamics `x⁺ = f(x, u)`.
///
/// Implementations must be reentrant: every method may be called concurrently.
pub trait Dynamics<T: Scalar>: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    fn step(&self, x: &DVector<T>, u: &DVector<T>) -> Result<DVector<T>, SystemError>;

    /// `(∂f/∂x, ∂f/∂u)` of the discrete step map.
    fn jacobians(&self, x: &DVector<T>, u: &DVector<T>) -> (DMatrix<T>, DMatrix<T>);

    /// `Σ_i w_i ∇²f_i` over the composite `τ = [x; u]`, an (n+m)×(n+m) matrix.
    ///
    /// The default differentiates [`Dynamics::jacobians`] by central differences.
    fn weighted_hessian(&self, x: &DVector<T>, u: &DVector<T>, w: &DVector<T>) -> DMatrix<T> {
        let (n, m) = (self.state_dim(), self.control_dim());
        let nm = n + m;
        let mut hess = DMatrix::zeros(nm, nm);
        let h = T::tol(1e-6);
        let wrow = |tau: &DVector<T>| -> DVector<T> {
            let (fx, fu) = self.jacobians(&tau.rows(0, n).into_owned(), &tau.rows(n, m).into_owned());
            let mut g = DVector::zeros(nm);
            g.rows_mut(0, n).copy_from(&(fx.transpose() * w));
            g.rows_mut(n, m).copy_from(&(fu.transpose() * w));
            g
        };
        let mut tau = DVector::zeros(nm);
        tau.rows_mut(0, n).copy_from(x);
        tau.rows_mut(n, m).copy_from(u);
        for k in 0..nm {
            let mut tp = tau.clone();
            tp[k] += h;
            let mut tm = tau.clone();
            tm[k] -= h;
            hess.set_column(k, &((wrow(&tp) - wrow(&tm)) / (h + h)));
        }
        (&hess + hess.transpose()) * T::lit(0.5)
    }

    /// Stage inequality rows `G τ ≤ l` native to the system.
    fn constraints(&self) -> (DMatrix<T>, DVector<T>) {
        let nm = self.state_dim() + self.control_dim();
        (DMatrix::zeros(0, nm), DVector::zeros(0))
    }
}

fn check_dims<T: Scalar>(x: &DVector<T>, u: &DVector<T>, n: usize, m: usize) -> Result<(), SystemError> {
    if x.len() != n || u.len() != m {
        return Err(SystemError::DimensionMismatch(format!(
            "expected x in R^{n}, u in R^{m}, got {} and {}",
            x.len(),
            u.len()
        )));
    }
    Ok(())
}

fn finite<T: Scalar>(x: DVector<T>) -> Result<DVector<T>, SystemError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(SystemError::NonFiniteState)
    }
}

/// Box rows `±u_i ≤ u_bd` on the control block, zero on the state columns.
pub fn box_constraints<T: Scalar>(n: usize, m: usize, u_bd: T) -> (DMatrix<T>, DVector<T>) {
    let mut g = DMatrix::zeros(2 * m, n + m);
    for i in 0..m {
        g[(2 * i, n + i)] = T::one();
        g[(2 * i + 1, n + i)] = -T::one();
    }
    (g, DVector::from_element(2 * m, u_bd))
}

/// Continuous-time `ẋ = A x + B u` sampled with forward Euler.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem<T: Scalar> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
    pub dt: T,
    /// Optional symmetric box on every control.
    pub u_bd: Option<T>,
}

impl<T: Scalar> LinearSystem<T> {
    pub fn new(a: DMatrix<T>, b: DMatrix<T>, dt: T) -> Self {
        LinearSystem { a, b, dt, u_bd: None }
    }

    /// Position/velocity double integrator with viscous friction coefficient 0.05.
    pub fn double_integrator(dt: T) -> Self {
        let a = DMatrix::from_row_slice(2, 2, &[T::zero(), T::one(), T::zero(), T::lit(-0.05)]);
        let b = DMatrix::from_row_slice(2, 1, &[T::zero(), T::one()]);
        Self::new(a, b, dt)
    }

    pub fn with_bound(mut self, u_bd: Option<T>) -> Self {
        self.u_bd = u_bd;
        self
    }

    /// `(I + dt·A, dt·B)`.
    pub fn discrete(&self) -> (DMatrix<T>, DMatrix<T>) {
        let n = self.a.nrows();
        (DMatrix::identity(n, n) + &self.a * self.dt, &self.b * self.dt)
    }
}

impl<T: Scalar> Dynamics<T> for LinearSystem<T> {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    fn step(&self, x: &DVector<T>, u: &DVector<T>) -> Result<DVector<T>, SystemError> {
        check_dims(x, u, self.state_dim(), self.control_dim())?;
        finite(x + (&self.a * x + &self.b * u) * self.dt)
    }

    fn jacobians(&self, _x: &DVector<T>, _u: &DVector<T>) -> (DMatrix<T>, DMatrix<T>) {
        self.discrete()
    }

    fn weighted_hessian(&self, _x: &DVector<T>, _u: &DVector<T>, _w: &DVector<T>) -> DMatrix<T> {
        let nm = self.state_dim() + self.control_dim();
        DMatrix::zeros(nm, nm)
    }

    fn constraints(&self) -> (DMatrix<T>, DVector<T>) {
        match self.u_bd {
            Some(bd) => box_constraints(self.state_dim(), self.control_dim(), bd),
            None => (DMatrix::zeros(0, self.state_dim() + self.control_dim()), DVector::zeros(0)),
        }
    }
}

/// Differential-drive unicycle with state `(p_x, p_y, heading)` and controls
/// `(speed, turn rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Unicycle<T: Scalar> {
    pub wheel_radius: T,
    pub wheel_separation: T,
    /// Wheel angular speed limit (rad/s).
    pub wheel_speed_limit: T,
    pub dt: T,
}

impl<T: Scalar> Default for Unicycle<T> {
    fn default() -> Self {
        Unicycle {
            wheel_radius: T::lit(0.1),
            wheel_separation: T::lit(0.5),
            wheel_speed_limit: T::two_pi(),
            dt: T::lit(0.05),
        }
    }
}

impl<T: Scalar> Dynamics<T> for Unicycle<T> {
    fn state_dim(&self) -> usize {
        3
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn step(&self, x: &DVector<T>, u: &DVector<T>) -> Result<DVector<T>, SystemError> {
        check_dims(x, u, 3, 2)?;
        let (s, c) = x[2].sin_cos();
        let dt = self.dt;
        finite(DVector::from_vec(vec![x[0] + dt * u[0] * c, x[1] + dt * u[0] * s, x[2] + dt * u[1]]))
    }

    fn jacobians(&self, x: &DVector<T>, u: &DVector<T>) -> (DMatrix<T>, DMatrix<T>) {
        let (s, c) = x[2].sin_cos();
        let dt = self.dt;
        let mut fx = DMatrix::identity(3, 3);
        fx[(0, 2)] = -dt * s * u[0];
        fx[(1, 2)] = dt * c * u[0];
        let mut fu = DMatrix::zeros(3, 2);
        fu[(0, 0)] = dt * c;
        fu[(1, 0)] = dt * s;
        fu[(2, 1)] = dt;
        (fx, fu)
    }

    fn weighted_hessian(&self, x: &DVector<T>, u: &DVector<T>, w: &DVector<T>) -> DMatrix<T> {
        // only the heading/speed block is curved
        let (s, c) = x[2].sin_cos();
        let dt = self.dt;
        let mut h = DMatrix::zeros(5, 5);
        h[(2, 2)] = dt * u[0] * (-c * w[0] - s * w[1]);
        let cross = dt * (-s * w[0] + c * w[1]);
        h[(2, 3)] = cross;
        h[(3, 2)] = cross;
        h
    }

    /// `±(2 u_s + d u_ω) ≤ 2 ω_m r` and `±(2 u_s − d u_ω) ≤ 2 ω_m r`.
    fn constraints(&self) -> (DMatrix<T>, DVector<T>) {
        let two = T::lit(2.0);
        let d = self.wheel_separation;
        let mut g = DMatrix::zeros(4, 5);
        let rows = [(two, d), (-two, -d), (two, -d), (-two, d)];
        for (r, (a, b)) in rows.into_iter().enumerate() {
            g[(r, 3)] = a;
            g[(r, 4)] = b;
        }
        (g, DVector::from_element(4, two * self.wheel_speed_limit * self.wheel_radius))
    }
}

/// Rigid-body quadrotor with state `(p, v, q, ω)` (q as `w, x, y, z`) and four
/// rotor thrusts as controls.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadrotor<T: Scalar> {
    pub mass: T,
    /// Body inertia diagonal.
    pub inertia: Vector3<T>,
    pub gravity: T,
    pub dt: T,
    /// Maps rotor thrusts to `(total thrust, M_x, M_y, M_z)`.
    pub mixer: DMatrix<T>,
}

impl<T: Scalar> Default for Quadrotor<T> {
    fn default() -> Self {
        let inertia = Vector3::new(T::lit(1.43e-5), T::lit(1.43e-5), T::lit(2.89e-5));
        Quadrotor {
            mass: T::lit(0.03),
            inertia,
            gravity: T::lit(9.81),
            dt: T::lit(0.05),
            mixer: Self::x_mixer(T::lit(0.046), T::lit(0.005944)),
        }
    }
}

impl<T: Scalar> Quadrotor<T> {
    /// X-configuration mixer for arm length `arm` and yaw-torque coefficient `yaw`.
    pub fn x_mixer(arm: T, yaw: T) -> DMatrix<T> {
        let a = arm / T::lit(2.0).sqrt();
        let one = T::one();
        // rotor (x, y, spin sign)
        let rotors = [(a, -a, -one), (-a, -a, one), (-a, a, -one), (a, a, one)];
        let mut mix = DMatrix::zeros(4, 4);
        for (i, (x, y, s)) in rotors.into_iter().enumerate() {
            mix[(0, i)] = one;
            mix[(1, i)] = y;
            mix[(2, i)] = -x;
            mix[(3, i)] = yaw * s;
        }
        mix
    }

    /// Per-rotor thrust that balances gravity.
    pub fn hover_thrust(&self) -> T {
        self.mass * self.gravity / T::lit(4.0)
    }

    pub fn hover_control(&self) -> DVector<T> {
        DVector::from_element(4, self.hover_thrust())
    }

    /// State at rest at `p` with identity attitude.
    pub fn rest_state(p: Vector3<T>) -> DVector<T> {
        let mut x = DVector::zeros(13);
        x.rows_mut(0, 3).copy_from(&p);
        x[6] = T::one();
        x
    }

    fn unpack(x: &DVector<T>) -> (Vector3<T>, Vector3<T>, Quaternion<T>, Vector3<T>) {
        let p = Vector3::new(x[0], x[1], x[2]);
        let v = Vector3::new(x[3], x[4], x[5]);
        let q = Quaternion::new(x[6], x[7], x[8], x[9]);
        let w = Vector3::new(x[10], x[11], x[12]);
        (p, v, q, w)
    }

    /// Body z axis `R(q) e_z` for a (not necessarily unit) quaternion.
    fn body_z(q: &Quaternion<T>) -> Vector3<T> {
        let (w, x, y, z) = (q.w, q.i, q.j, q.k);
        let two = T::lit(2.0);
        Vector3::new(two * (x * z + w * y), two * (y * z - w * x), T::one() - two * (x * x + y * y))
    }

    fn body_z_jacobian(q: &Quaternion<T>) -> DMatrix<T> {
        let (w, x, y, z) = (q.w, q.i, q.j, q.k);
        let two = T::lit(2.0);
        let four = T::lit(4.0);
        DMatrix::from_row_slice(
            3,
            4,
            &[
                two * y,
                two * z,
                two * w,
                two * x,
                -two * x,
                -two * w,
                two * z,
                two * y,
                T::zero(),
                -four * x,
                -four * y,
                T::zero(),
            ],
        )
    }

    fn inertia_matrix(&self) -> Matrix3<T> {
        Matrix3::from_diagonal(&self.inertia)
    }

    /// Unnormalized Euler update of the quaternion block.
    fn quat_update(q: &Quaternion<T>, w: &Vector3<T>, dt: T) -> Quaternion<T> {
        let half = T::lit(0.5) * dt;
        *q + (*q * Quaternion::from_imag(*w)) * half
    }
}

impl<T: Scalar> Dynamics<T> for Quadrotor<T> {
    fn state_dim(&self) -> usize {
        13
    }

    fn control_dim(&self) -> usize {
        4
    }

    fn step(&self, x: &DVector<T>, u: &DVector<T>) -> Result<DVector<T>, SystemError> {
        check_dims(x, u, 13, 4)?;
        let dt = self.dt;
        let (p, v, q, w) = Self::unpack(x);
        let wrench = &self.mixer * u;
        let thrust = wrench[0];
        let moment = Vector3::new(wrench[1], wrench[2], wrench[3]);
        let acc = Self::body_z(&q) * (thrust / self.mass) - Vector3::z() * self.gravity;
        let j = self.inertia_matrix();
        let wdot = (moment - w.cross(&(j * w))).component_div(&self.inertia);
        let qn = Self::quat_update(&q, &w, dt);
        let norm = qn.norm();
        if !(norm > T::zero()) {
            return Err(SystemError::NonFiniteState);
        }
        let qn = qn / norm;
        let mut out = DVector::zeros(13);
        out.rows_mut(0, 3).copy_from(&(p + v * dt));
        out.rows_mut(3, 3).copy_from(&(v + acc * dt));
        out[6] = qn.w;
        out[7] = qn.i;
        out[8] = qn.j;
        out[9] = qn.k;
        out.rows_mut(10, 3).copy_from(&(w + wdot * dt));
        finite(out)
    }

    fn jacobians(&self, x: &DVector<T>, u: &DVector<T>) -> (DMatrix<T>, DMatrix<T>) {
        let dt = self.dt;
        let (_, _, q, w) = Self::unpack(x);
        let wrench = &self.mixer * u;
        let thrust = wrench[0];
        let one = T::one();
        let half = T::lit(0.5);
        let mut fx = DMatrix::identity(13, 13);
        let mut fu = DMatrix::zeros(13, 4);
        for i in 0..3 {
            fx[(i, 3 + i)] = dt;
        }
        // velocity
        let dz = Self::body_z_jacobian(&q);
        fx.view_mut((3, 6), (3, 4)).copy_from(&(&dz * (dt * thrust / self.mass)));
        let z = Self::body_z(&q);
        for r in 0..3 {
            for c in 0..4 {
                fu[(3 + r, c)] = dt * z[r] * self.mixer[(0, c)] / self.mass;
            }
        }
        // quaternion: q̃ = (I + dt/2 Ω(ω)) q + ..., then normalization
        let (w1, w2, w3) = (w[0], w[1], w[2]);
        let z0 = T::zero();
        let omega = DMatrix::from_row_slice(4, 4, &[z0, -w1, -w2, -w3, w1, z0, w3, -w2, w2, -w3, z0, w1, w3, w2, -w1, z0]);
        let (qw, qx, qy, qz) = (q.w, q.i, q.j, q.k);
        let xi = DMatrix::from_row_slice(4, 3, &[-qx, -qy, -qz, qw, -qz, qy, qz, qw, -qx, -qy, qx, qw]);
        let dq_dq = DMatrix::identity(4, 4) + omega * (half * dt);
        let dq_dw = xi * (half * dt);
        let qt = Self::quat_update(&q, &w, dt);
        let qv = DVector::from_vec(vec![qt.w, qt.i, qt.j, qt.k]);
        let norm = qv.norm();
        let qhat = &qv / norm;
        let proj = (DMatrix::identity(4, 4) - &qhat * qhat.transpose()) / norm;
        fx.view_mut((6, 6), (4, 4)).copy_from(&(&proj * dq_dq));
        fx.view_mut((6, 10), (4, 3)).copy_from(&(&proj * dq_dw));
        // angular rate: ω + dt J⁻¹(M − ω × Jω)
        let j = self.inertia_matrix();
        let jw = j * w;
        let d_gyro = w.cross_matrix() * j - jw.cross_matrix();
        let jinv = Matrix3::from_diagonal(&self.inertia.map(|v| one / v));
        let dw = Matrix3::identity() - jinv * d_gyro * dt;
        for r in 0..3 {
            for c in 0..3 {
                fx[(10 + r, 10 + c)] = dw[(r, c)];
            }
            for c in 0..4 {
                fu[(10 + r, c)] = dt * self.mixer[(1 + r, c)] / self.inertia[r];
            }
        }
        (fx, fu)
    }
}

/// Unit quaternion of the state's attitude block.
pub fn attitude<T: Scalar>(x: &DVector<T>) -> UnitQuaternion<T> {
    UnitQuaternion::from_quaternion(Quaternion::new(x[6], x[7], x[8], x[9]))
}

/// Named analytic reference trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// `(1 − cos 0.5t, 0.5t, heading)` with heading the direction of travel.
    UnicycleCircle,
    /// Lissajous figure eight with zero attitude and body rates.
    Figure8,
    /// `(1 + t − cos t, 1 + sin t)`.
    DiSine,
}

impl FromStr for ReferenceKind {
    type Err = SystemError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unicycle_circle" => Ok(ReferenceKind::UnicycleCircle),
            "figure8" | "figure8_3d" => Ok(ReferenceKind::Figure8),
            "di_sine" => Ok(ReferenceKind::DiSine),
            other => Err(SystemError::UnknownKind(other.to_string())),
        }
    }
}

/// Angular frequency of the figure eight: one lap every 10 s.
pub const FIGURE8_RATE: f64 = std::f64::consts::TAU / 10.0;

impl ReferenceKind {
    pub fn state_dim(self) -> usize {
        match self {
            ReferenceKind::UnicycleCircle => 3,
            ReferenceKind::Figure8 => 13,
            ReferenceKind::DiSine => 2,
        }
    }

    /// Reference state at `t` seconds.
    pub fn at_time<T: Scalar>(self, t: T) -> DVector<T> {
        let half = T::lit(0.5);
        match self {
            ReferenceKind::DiSine => DVector::from_vec(vec![T::one() + t - t.cos(), T::one() + t.sin()]),
            ReferenceKind::UnicycleCircle => {
                // heading is atan2 of the velocity (0.5 sin 0.5t, 0.5)
                let s = (half * t).sin();
                DVector::from_vec(vec![T::one() - (half * t).cos(), half * t, T::one().atan2(s)])
            }
            ReferenceKind::Figure8 => {
                let w = T::lit(FIGURE8_RATE);
                let two = T::lit(2.0);
                let (ax, ay, az) = (T::one(), half, T::lit(0.2));
                let p = Vector3::new(ax * (w * t).sin(), ay * (two * w * t).sin(), az * (T::one() - (w * t).cos()));
                let v = Vector3::new(
                    ax * w * (w * t).cos(),
                    ay * two * w * (two * w * t).cos(),
                    az * w * (w * t).sin(),
                );
                let mut x = Quadrotor::rest_state(p);
                x.rows_mut(3, 3).copy_from(&v);
                x
            }
        }
    }

    /// Reference state at sample `k` with period `dt`.
    pub fn sample<T: Scalar>(self, k: usize, dt: T) -> DVector<T> {
        self.at_time(T::from_usize(k).unwrap_or_else(T::zero) * dt)
    }
}

/// Free-function form of [`ReferenceKind::sample`] taking the kind by name.
pub fn reference<T: Scalar>(kind: &str, k: usize, dt: T) -> Result<DVector<T>, SystemError> {
    Ok(kind.parse::<ReferenceKind>()?.sample(k, dt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_jacobians(sys: &dyn Dynamics<f64>, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let (n, m) = (sys.state_dim(), sys.control_dim());
        let h = 1e-6;
        let mut fx = DMatrix::zeros(n, n);
        let mut fu = DMatrix::zeros(n, m);
        for k in 0..n {
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            fx.set_column(k, &((sys.step(&xp, u).unwrap() - sys.step(&xm, u).unwrap()) / (2.0 * h)));
        }
        for k in 0..m {
            let mut up = u.clone();
            up[k] += h;
            let mut um = u.clone();
            um[k] -= h;
            fu.set_column(k, &((sys.step(x, &up).unwrap() - sys.step(x, &um).unwrap()) / (2.0 * h)));
        }
        (fx, fu)
    }

    fn random_quadrotor_state(rng: &mut ChaCha8Rng) -> DVector<f64> {
        let mut x = DVector::from_fn(13, |_, _| rng.gen_range(-1.0..1.0));
        let q = x.rows(6, 4).normalize();
        x.rows_mut(6, 4).copy_from(&q);
        x
    }

    #[test]
    fn double_integrator_step() {
        let sys = LinearSystem::double_integrator(0.01);
        let x = sys.step(&DVector::from_vec(vec![0.0, 1.0]), &DVector::from_vec(vec![0.0])).unwrap();
        assert_relative_eq!(x[0], 0.01, epsilon = 1e-15);
        assert_relative_eq!(x[1], 0.9995, epsilon = 1e-15);
    }

    #[test]
    fn unicycle_straight_step() {
        let sys = Unicycle::default();
        let x = sys.step(&DVector::zeros(3), &DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert_relative_eq!(x[0], 0.05, epsilon = 1e-15);
        assert_eq!(x[1], 0.0);
        assert_eq!(x[2], 0.0);
        let (fx, fu) = sys.jacobians(&DVector::zeros(3), &DVector::from_vec(vec![1.0, 0.0]));
        assert_relative_eq!(fx[(0, 2)], 0.0);
        assert_relative_eq!(fu[(0, 0)], 0.05);
    }

    #[test]
    fn unicycle_heading_jacobian_entry() {
        let sys = Unicycle::default();
        let x = DVector::from_vec(vec![0.0, 0.0, 0.7]);
        let (fx, _) = sys.jacobians(&x, &DVector::from_vec(vec![0.4, 0.1]));
        assert_relative_eq!(fx[(0, 2)], -0.05 * 0.7f64.sin() * 0.4, epsilon = 1e-15);
    }

    #[test]
    fn unicycle_polytope() {
        let (g, l) = Dynamics::<f64>::constraints(&Unicycle::default());
        assert_eq!(g.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 0.0, 2.0, 0.5]);
        assert_relative_eq!(l[0], 0.4 * std::f64::consts::PI, epsilon = 1e-15);
        // symmetric under u ↦ −u
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let tau = DVector::from_vec(vec![0.0, 0.0, 0.0, rng.gen_range(-1.0..1.0), rng.gen_range(-3.0..3.0)]);
            let inside = |t: &DVector<f64>| (&g * t - &l).max() <= 0.0;
            assert_eq!(inside(&tau), inside(&(-&tau)));
        }
    }

    #[test]
    fn box_rows() {
        let (g, l) = box_constraints::<f64>(2, 1, 1.0);
        assert_eq!(g, DMatrix::from_row_slice(2, 3, &[0.0, 0.0, 1.0, 0.0, 0.0, -1.0]));
        assert_eq!(l, DVector::from_vec(vec![1.0, 1.0]));
        assert_eq!(Dynamics::<f64>::constraints(&Quadrotor::default()).0.nrows(), 0);
    }

    #[test]
    fn hover_is_equilibrium() {
        let sys = Quadrotor::<f64>::default();
        let x = Quadrotor::rest_state(Vector3::new(0.3, -0.2, 1.0));
        let next = sys.step(&x, &sys.hover_control()).unwrap();
        assert!((next - x).amax() <= 1e-12);
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let di = LinearSystem::double_integrator(0.01);
        let uni = Unicycle::default();
        let quad = Quadrotor::default();
        for _ in 0..100 {
            let x = DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0));
            let u = DVector::from_fn(1, |_, _| rng.gen_range(-2.0..2.0));
            let (a, b) = di.jacobians(&x, &u);
            let (fa, fb) = fd_jacobians(&di, &x, &u);
            assert!((a - fa).amax() < 1e-6 && (b - fb).amax() < 1e-6);

            let x = DVector::from_fn(3, |_, _| rng.gen_range(-3.0..3.0));
            let u = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
            let (a, b) = uni.jacobians(&x, &u);
            let (fa, fb) = fd_jacobians(&uni, &x, &u);
            assert!((a - fa).amax() < 1e-6 && (b - fb).amax() < 1e-6);

            let x = random_quadrotor_state(&mut rng);
            let u = DVector::from_fn(4, |_, _| rng.gen_range(0.0..0.15));
            let (a, b) = quad.jacobians(&x, &u);
            let (fa, fb) = fd_jacobians(&quad, &x, &u);
            let scale = 1.0 + fa.amax().max(fb.amax());
            assert!((&a - &fa).amax() < 1e-6 * scale, "{}", (&a - &fa).amax());
            assert!((&b - &fb).amax() < 1e-6 * scale, "{}", (&b - &fb).amax());
        }
    }

    #[test]
    fn unicycle_hessian_matches_default() {
        struct Plain(Unicycle<f64>);
        impl Dynamics<f64> for Plain {
            fn state_dim(&self) -> usize {
                3
            }
            fn control_dim(&self) -> usize {
                2
            }
            fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, SystemError> {
                self.0.step(x, u)
            }
            fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
                self.0.jacobians(x, u)
            }
        }
        let x = DVector::from_vec(vec![0.1, 0.2, 0.9]);
        let u = DVector::from_vec(vec![0.5, -0.3]);
        let w = DVector::from_vec(vec![1.5, -0.7, 2.0]);
        let uni = Unicycle::default();
        let diff = uni.weighted_hessian(&x, &u, &w) - Plain(uni.clone()).weighted_hessian(&x, &u, &w);
        assert!(diff.amax() < 1e-8);
    }

    #[test]
    fn quaternion_norm_preserved() {
        let sys = Quadrotor::<f64>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let x = random_quadrotor_state(&mut rng);
            let u = DVector::from_fn(4, |_, _| rng.gen_range(0.0..0.2));
            let next = sys.step(&x, &u).unwrap();
            assert!((next.rows(6, 4).norm() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn reference_samples() {
        let x = ReferenceKind::DiSine.at_time(0.0);
        assert_eq!(x, DVector::from_vec(vec![0.0, 1.0]));
        let x = ReferenceKind::UnicycleCircle.at_time(std::f64::consts::PI);
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-15);
        assert!(matches!("loop".parse::<ReferenceKind>(), Err(SystemError::UnknownKind(_))));
    }

    #[test]
    fn reference_positions_consistent_with_velocities() {
        let dt: f64 = 1e-3;
        for k in 0..2000 {
            let (a, b): (DVector<f64>, DVector<f64>) = (ReferenceKind::DiSine.sample(k, dt), ReferenceKind::DiSine.sample(k + 1, dt));
            assert!(((b[0] - a[0]) / dt - 0.5 * (a[1] + b[1])).abs() < 1e-2 * dt);
            let (a, b): (DVector<f64>, DVector<f64>) = (ReferenceKind::Figure8.sample(k, dt), ReferenceKind::Figure8.sample(k + 1, dt));
            for i in 0..3 {
                assert!(((b[i] - a[i]) / dt - 0.5 * (a[3 + i] + b[3 + i])).abs() < 1e-2 * dt);
            }
            // unicycle heading points along the direction of travel
            let (a, b): (DVector<f64>, DVector<f64>) = (ReferenceKind::UnicycleCircle.sample(k, dt), ReferenceKind::UnicycleCircle.sample(k + 1, dt));
            let dir = (b[1] - a[1]).atan2(b[0] - a[0]);
            assert!((dir - 0.5 * (a[2] + b[2])).abs() < 1e-2);
        }
    }
}
