//! Clamped B-splines over normalized time, used as the planned trajectory.
//!
//! A plan is a degree-`d` spline `s(tau) = sum_i alpha_i B_i(tau)` with 2-D
//! control points in the ego frame at planning time (x forward, y left).
//! `tau` in `[0, 1]` maps linearly onto `[0, horizon_s]` seconds.

use crate::error::{Error, Result};
use crate::geom::Vec2;

/// Ridge added to the fitting normal equations.
const FIT_RIDGE: f64 = 1e-9;
/// Tolerance of the convex hull containment test, meters.
const HULL_TOL: f64 = 1e-9;

/// Non-decreasing knots on `[0, 1]` with `degree + 1` repeated end knots.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector {
    knots: Vec<f64>,
    degree: usize,
}

impl KnotVector {
    pub fn new(knots: Vec<f64>, degree: usize) -> Result<Self> {
        let m = knots.len();
        if m < 2 * (degree + 1) {
            return Err(Error::InvalidKnots(format!(
                "{m} knots leave no coefficient for degree {degree}"
            )));
        }
        if knots.iter().any(|k| !(0.0..=1.0).contains(k)) {
            return Err(Error::InvalidKnots("knots must lie in [0, 1]".into()));
        }
        if knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidKnots("knots must be non-decreasing".into()));
        }
        if knots[..=degree].iter().any(|&k| k != 0.0)
            || knots[m - degree - 1..].iter().any(|&k| k != 1.0)
        {
            return Err(Error::InvalidKnots(format!(
                "first and last {} knots must be 0 and 1",
                degree + 1
            )));
        }
        Ok(Self { knots, degree })
    }

    /// Open uniform knot vector with `n` coefficients.
    pub fn open_uniform(degree: usize, n: usize) -> Result<Self> {
        if n < degree + 1 {
            return Err(Error::InvalidKnots(format!(
                "degree {degree} needs at least {} coefficients",
                degree + 1
            )));
        }
        let interior = n - degree - 1;
        let mut knots = vec![0.0; degree + 1];
        knots.extend((1..=interior).map(|k| k as f64 / (interior + 1) as f64));
        knots.extend(std::iter::repeat(1.0).take(degree + 1));
        Self::new(knots, degree)
    }

    /// `[0, 0, 0, 0, 1, 1, 1, 1]`: the cubic with four coefficients used by
    /// the planner.
    pub fn cubic_bezier() -> Self {
        Self::open_uniform(3, 4).expect("valid cubic knot vector")
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// `n = m - d - 1`.
    pub fn num_coeffs(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    /// `B_i(tau)` by the Cox-de Boor recursion.
    pub fn basis(&self, i: usize, tau: f64) -> Result<f64> {
        let n = self.num_coeffs();
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, count: n });
        }
        check_tau(tau)?;
        Ok(self.basis_all(tau)[i])
    }

    /// All `n` basis values at `tau`, which must already be in range.
    ///
    /// At `tau = 1` the last non-empty span is used (left limit), otherwise the
    /// half-open spans would make every basis function vanish there.
    pub fn basis_all(&self, tau: f64) -> Vec<f64> {
        let k = &self.knots;
        let m = k.len();
        let last_span = (0..m - 1).rev().find(|&j| k[j] < k[j + 1]).unwrap_or(0);
        let mut vals: Vec<f64> = (0..m - 1)
            .map(|j| {
                let inside = k[j] <= tau && tau < k[j + 1];
                let at_end = tau >= 1.0 && j == last_span;
                if inside || at_end {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        for p in 1..=self.degree {
            for j in 0..m - 1 - p {
                let left_den = k[j + p] - k[j];
                let right_den = k[j + p + 1] - k[j + 1];
                let left = if left_den > 0.0 {
                    (tau - k[j]) / left_den * vals[j]
                } else {
                    0.0
                };
                let right = if right_den > 0.0 {
                    (k[j + p + 1] - tau) / right_den * vals[j + 1]
                } else {
                    0.0
                };
                vals[j] = left + right;
            }
        }
        vals.truncate(self.num_coeffs());
        vals
    }

    /// Time associated with each control point: the Greville abscissa
    /// (mean of the `d` knots following knot `i`) scaled by the horizon.
    pub fn greville_times(&self, horizon_s: f64) -> Vec<f64> {
        let d = self.degree;
        (0..self.num_coeffs())
            .map(|i| {
                let g = if d == 0 {
                    0.5 * (self.knots[i] + self.knots[i + 1])
                } else {
                    self.knots[i + 1..=i + d].iter().sum::<f64>() / d as f64
                };
                horizon_s * g
            })
            .collect()
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if (0.0..=1.0).contains(&tau) {
        Ok(())
    } else {
        Err(Error::ParameterOutOfRange(tau))
    }
}

/// Planned trajectory. The first control point is the origin of the
/// planning frame and is stored explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct BSpline2D {
    knots: KnotVector,
    control_points: Vec<Vec2>,
    horizon_s: f64,
}

impl BSpline2D {
    pub fn new(knots: KnotVector, control_points: Vec<Vec2>, horizon_s: f64) -> Result<Self> {
        let n = knots.num_coeffs();
        if control_points.len() != n {
            return Err(Error::InvalidSpline(format!(
                "{} control points for {n} basis functions",
                control_points.len()
            )));
        }
        if control_points[0] != Vec2::ZERO {
            return Err(Error::InvalidSpline(
                "first control point must be the origin".into(),
            ));
        }
        if !(horizon_s > 0.0 && horizon_s.is_finite()) {
            return Err(Error::InvalidSpline(format!("horizon {horizon_s} s")));
        }
        if control_points.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("control point".into()));
        }
        Ok(Self {
            knots,
            control_points,
            horizon_s,
        })
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    pub fn control_points(&self) -> &[Vec2] {
        &self.control_points
    }

    pub fn horizon_s(&self) -> f64 {
        self.horizon_s
    }

    pub fn eval(&self, tau: f64) -> Result<Vec2> {
        check_tau(tau)?;
        Ok(self.eval_unchecked(tau))
    }

    pub(crate) fn eval_unchecked(&self, tau: f64) -> Vec2 {
        self.knots
            .basis_all(tau.clamp(0.0, 1.0))
            .iter()
            .zip(&self.control_points)
            .fold(Vec2::ZERO, |acc, (b, p)| acc + *p * *b)
    }

    /// Position at `t` seconds into the plan, clamped to the horizon.
    pub fn at_time(&self, t: f64) -> Vec2 {
        self.eval_unchecked(t / self.horizon_s)
    }

    /// Root-mean-square distance between the plan and timed samples.
    pub fn rms_residual(&self, points: &[TimedPoint]) -> f64 {
        if points.is_empty() {
            return 0.0;
        }
        let ss: f64 = points
            .iter()
            .map(|p| {
                let d = self.at_time(p.t) - p.position;
                d.dot(d)
            })
            .sum();
        (ss / points.len() as f64).sqrt()
    }

    /// True iff `samples` uniformly spaced curve points all lie in the convex
    /// hull of the control points.
    pub fn in_convex_hull(&self, samples: usize) -> bool {
        let hull = convex_hull(&self.control_points);
        let samples = samples.max(2);
        (0..samples).all(|k| {
            let tau = k as f64 / (samples - 1) as f64;
            hull_contains(&hull, self.eval_unchecked(tau), HULL_TOL)
        })
    }
}

/// Trajectory sample: time since the planning instant and ego-frame position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPoint {
    pub t: f64,
    pub position: Vec2,
}

impl TimedPoint {
    pub fn new(t: f64, x: f64, y: f64) -> Self {
        Self {
            t,
            position: Vec2::new(x, y),
        }
    }
}

/// Least-squares control points for timed samples with the first control
/// point pinned to the origin.
pub fn fit_spline(points: &[TimedPoint], horizon_s: f64, knots: &KnotVector) -> Result<BSpline2D> {
    let free = knots.num_coeffs() - 1;
    if points.len() < free {
        return Err(Error::Underdetermined {
            points: points.len(),
            free,
        });
    }
    if !(horizon_s > 0.0) {
        return Err(Error::InvalidSpline(format!("horizon {horizon_s} s")));
    }
    let mut design = nalgebra::DMatrix::<f64>::zeros(points.len(), free);
    let mut rhs = nalgebra::DMatrix::<f64>::zeros(points.len(), 2);
    for (r, p) in points.iter().enumerate() {
        let tau = p.t / horizon_s;
        if !(0.0..=1.0 + 1e-12).contains(&tau) || !p.position.is_finite() {
            return Err(Error::InvalidSpline(format!(
                "sample at t = {} s outside the horizon",
                p.t
            )));
        }
        let b = knots.basis_all(tau.min(1.0));
        for c in 0..free {
            design[(r, c)] = b[c + 1];
        }
        rhs[(r, 0)] = p.position.x;
        rhs[(r, 1)] = p.position.y;
    }
    let mut gram = design.transpose() * &design;
    for c in 0..free {
        gram[(c, c)] += FIT_RIDGE;
    }
    let chol = gram.cholesky().ok_or(Error::Singular)?;
    let sol = chol.solve(&(design.transpose() * rhs));
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular);
    }
    let mut cps = vec![Vec2::ZERO];
    cps.extend((0..free).map(|c| Vec2::new(sol[(c, 0)], sol[(c, 1)])));
    BSpline2D::new(knots.clone(), cps, horizon_s)
}

/// Convex hull by Andrew's monotone chain, counter-clockwise, without
/// repeated or collinear vertices. Degenerate inputs give one or two points.
pub fn convex_hull(points: &[Vec2]) -> Vec<Vec2> {
    let mut pts: Vec<Vec2> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<Vec2> = Vec::with_capacity(pts.len());
    for &p in &pts {
        while lower.len() >= 2 && turn(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Vec2> = Vec::with_capacity(pts.len());
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && turn(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn turn(o: Vec2, a: Vec2, b: Vec2) -> f64 {
    (a - o).cross(b - o)
}

fn segment_distance(a: Vec2, b: Vec2, p: Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Containment in a hull from [`convex_hull`], within `tol` meters.
pub fn hull_contains(hull: &[Vec2], p: Vec2, tol: f64) -> bool {
    match hull.len() {
        0 => false,
        1 => (p - hull[0]).norm() <= tol,
        2 => segment_distance(hull[0], hull[1], p) <= tol,
        n => (0..n).all(|i| {
            let a = hull[i];
            let b = hull[(i + 1) % n];
            let edge = b - a;
            // signed distance to the left of the edge
            edge.cross(p - a) / edge.norm() >= -tol
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bernstein3(i: usize, t: f64) -> f64 {
        let binom = [1.0, 3.0, 3.0, 1.0][i];
        binom * t.powi(i as i32) * (1.0 - t).powi(3 - i as i32)
    }

    fn sample_spline() -> BSpline2D {
        let cps = vec![
            Vec2::ZERO,
            Vec2::new(10.0, 0.0),
            Vec2::new(20.0, 1.0),
            Vec2::new(30.0, 2.0),
        ];
        BSpline2D::new(KnotVector::cubic_bezier(), cps, 20.0).unwrap()
    }

    #[test]
    fn basis_matches_bernstein() {
        let kv = KnotVector::cubic_bezier();
        assert_eq!(kv.basis(0, 0.0).unwrap(), 1.0);
        assert!((kv.basis(1, 0.5).unwrap() - 0.375).abs() < 1e-15);
        for k in 0..=20 {
            let t = k as f64 / 20.0;
            for i in 0..4 {
                assert!((kv.basis(i, t).unwrap() - bernstein3(i, t)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn basis_rejects_bad_inputs() {
        let kv = KnotVector::cubic_bezier();
        assert!(matches!(
            kv.basis(4, 0.5),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            kv.basis(0, 1.01),
            Err(Error::ParameterOutOfRange(_))
        ));
        assert!(matches!(
            kv.basis(0, -0.1),
            Err(Error::ParameterOutOfRange(_))
        ));
    }

    #[test]
    fn knot_vector_validation() {
        assert!(KnotVector::new(vec![0.0, 0.0, 1.0, 1.0], 1).is_ok());
        // n = m - d - 1 = 0
        assert!(KnotVector::new(vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0], 3).is_err());
        assert!(
            KnotVector::new(vec![0.0, 0.0, 0.0, 0.0, 0.6, 0.4, 1.0, 1.0, 1.0, 1.0], 3).is_err()
        );
        assert!(KnotVector::new(vec![0.0, 0.0, 0.0, 0.1, 1.0, 1.0, 1.0, 1.0], 3).is_err());
        assert!(KnotVector::new(vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.2], 3).is_err());
        let kv = KnotVector::open_uniform(3, 6).unwrap();
        assert_eq!(kv.num_coeffs(), 6);
        assert_eq!(kv.knots().len(), 10);
    }

    #[test]
    fn eval_endpoints_and_midpoint() {
        let s = sample_spline();
        assert_eq!(s.eval(0.0).unwrap(), Vec2::ZERO);
        assert_eq!(s.eval(1.0).unwrap(), Vec2::new(30.0, 2.0));
        let mid = s.eval(0.5).unwrap();
        assert!((mid.x - 15.0).abs() < 1e-12 && (mid.y - 0.625).abs() < 1e-12);
        assert!(s.eval(1.5).is_err());
    }

    #[test]
    fn greville_of_cubic_bezier() {
        let t = KnotVector::cubic_bezier().greville_times(20.0);
        let expect = [0.0, 20.0 / 3.0, 40.0 / 3.0, 20.0];
        for (a, b) in t.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let t = KnotVector::open_uniform(3, 7).unwrap().greville_times(4.0);
        assert_eq!(t[0], 0.0);
        assert!((t[6] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn fit_recovers_sampled_spline() {
        let s = sample_spline();
        let pts: Vec<TimedPoint> = (1..=20)
            .map(|k| {
                let t = k as f64;
                TimedPoint {
                    t,
                    position: s.at_time(t),
                }
            })
            .collect();
        let fit = fit_spline(&pts, 20.0, s.knots()).unwrap();
        for (a, b) in fit.control_points().iter().zip(s.control_points()) {
            assert!((*a - *b).norm() < 1e-6);
        }
        assert!(fit.rms_residual(&pts) < 1e-6);
    }

    #[test]
    fn fit_straight_line_has_zero_lateral() {
        let pts: Vec<TimedPoint> = (1..=20)
            .map(|k| TimedPoint::new(k as f64, 30.0 * k as f64 / 20.0, 0.0))
            .collect();
        let fit = fit_spline(&pts, 20.0, &KnotVector::cubic_bezier()).unwrap();
        // x(t) = 1.5 t is linear, so the Bernstein coefficients are 0, 10, 20, 30.
        let cps = fit.control_points();
        for (i, p) in cps.iter().enumerate() {
            assert!(p.y.abs() < 1e-6);
            assert!((p.x - 10.0 * i as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn fit_rejects_underdetermined() {
        let pts = [
            TimedPoint::new(5.0, 1.0, 0.0),
            TimedPoint::new(10.0, 2.0, 0.0),
        ];
        assert!(matches!(
            fit_spline(&pts, 20.0, &KnotVector::cubic_bezier()),
            Err(Error::Underdetermined { points: 2, free: 3 })
        ));
    }

    #[test]
    fn degenerate_hulls() {
        let kv = KnotVector::cubic_bezier();
        let s = BSpline2D::new(kv.clone(), vec![Vec2::ZERO; 4], 2.0).unwrap();
        assert!(s.in_convex_hull(50));
        let line = BSpline2D::new(
            kv,
            vec![
                Vec2::ZERO,
                Vec2::new(1.0, 1.0),
                Vec2::new(2.0, 2.0),
                Vec2::new(3.0, 3.0),
            ],
            2.0,
        )
        .unwrap();
        assert!(line.in_convex_hull(50));
        assert!(!hull_contains(
            &convex_hull(line.control_points()),
            Vec2::new(1.0, 0.0),
            1e-9
        ));
    }

    #[test]
    fn spline_requires_origin_start() {
        let cps = vec![Vec2::new(1.0, 0.0), Vec2::ZERO, Vec2::ZERO, Vec2::ZERO];
        assert!(BSpline2D::new(KnotVector::cubic_bezier(), cps, 2.0).is_err());
    }

    fn knot_vector_strategy() -> impl Strategy<Value = KnotVector> {
        (
            1usize..=4,
            0usize..=4,
            prop::collection::vec(0.0f64..1.0, 4),
        )
            .prop_map(|(d, interior, mut inner)| {
                inner.truncate(interior);
                inner.sort_by(f64::total_cmp);
                let mut k = vec![0.0; d + 1];
                k.extend(inner);
                k.extend(std::iter::repeat(1.0).take(d + 1));
                KnotVector::new(k, d).unwrap()
            })
    }

    proptest! {
        #[test]
        fn partition_of_unity(kv in knot_vector_strategy(), tau in 0.0f64..=1.0) {
            let sum: f64 = kv.basis_all(tau).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn fit_inverts_sampling(cps in prop::collection::vec((-200.0f64..200.0, -50.0f64..50.0), 3)) {
            let kv = KnotVector::cubic_bezier();
            let mut points = vec![Vec2::ZERO];
            points.extend(cps.iter().map(|&(x, y)| Vec2::new(x, y)));
            let s = BSpline2D::new(kv.clone(), points, 2.0).unwrap();
            let samples: Vec<TimedPoint> = (1..=20).map(|k| {
                let t = 0.1 * k as f64;
                TimedPoint { t, position: s.at_time(t) }
            }).collect();
            let fit = fit_spline(&samples, 2.0, &kv).unwrap();
            for (a, b) in fit.control_points().iter().zip(s.control_points()) {
                prop_assert!((*a - *b).norm() < 1e-6);
            }
        }
    }
}
