use std::ops::{Add, AddAssign, Mul, Neg, Sub};

/// Planar vector in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z component of the 3-D cross product.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn rotate(self, theta: f64) -> Vec2 {
        let (s, c) = theta.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    /// Left-hand normal.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Position and heading of a rigid body in some planar frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub position: Vec2,
    pub heading: f64,
}

impl Pose {
    pub fn new(position: Vec2, heading: f64) -> Self {
        Self { position, heading }
    }

    /// Expresses a point given in the parent frame in this pose's local frame
    /// (x forward, y left).
    pub fn to_local(&self, p: Vec2) -> Vec2 {
        (p - self.position).rotate(-self.heading)
    }

    pub fn to_parent(&self, local: Vec2) -> Vec2 {
        self.position + local.rotate(self.heading)
    }

    /// This pose expressed in the frame of `frame`.
    pub fn relative_to(&self, frame: &Pose) -> Pose {
        Pose::new(
            frame.to_local(self.position),
            wrap_angle(self.heading - frame.heading),
        )
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a % two_pi;
    if r > std::f64::consts::PI {
        r -= two_pi;
    } else if r < -std::f64::consts::PI {
        r += two_pi;
    }
    r
}

/// Least-squares polynomial `y = c0 + c1 x + ... + c_deg x^deg` through the
/// given samples, solved through the normal equations.
pub fn polyfit(xs: &[f64], ys: &[f64], degree: usize) -> Option<Vec<f64>> {
    let cols = degree + 1;
    if xs.len() != ys.len() || xs.len() < cols {
        return None;
    }
    // Column scaling keeps the Gram matrix well conditioned for x up to ~100 m.
    let xscale = xs.iter().fold(0.0_f64, |m, x| m.max(x.abs())).max(1.0);
    let a = nalgebra::DMatrix::from_fn(xs.len(), cols, |r, c| (xs[r] / xscale).powi(c as i32));
    let b = nalgebra::DVector::from_column_slice(ys);
    let ata = a.transpose() * &a;
    let atb = a.transpose() * b;
    let sol = ata.cholesky()?.solve(&atb);
    Some((0..cols).map(|c| sol[c] / xscale.powi(c as i32)).collect())
}

pub fn polyval(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Signed curvature of the circle through three points, positive when the
/// turn from `a` through `b` to `c` is to the left. Zero for collinear points.
pub fn three_point_curvature(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    let denom = (b - a).norm() * (c - b).norm() * (c - a).norm();
    if denom == 0.0 {
        return 0.0;
    }
    2.0 * (b - a).cross(c - b) / denom
}
