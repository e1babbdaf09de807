//! Low-level tracking of a planned spline: PID on speed, Pure Pursuit on
//! steering.

use crate::geom::{Pose, Vec2};
use crate::splines::BSpline2D;

pub const MAX_STEER: f64 = 0.6;
pub const MIN_ACCEL: f64 = -6.0;
pub const MAX_ACCEL: f64 = 3.0;
const INTEGRAL_LIMIT: f64 = 5.0;
const SPEED_DTAU: f64 = 1e-3;
const ARC_SAMPLES: usize = 400;

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Lookahead gain, seconds: `l_d = max(kv * v, l_min)`.
    pub kv: f64,
    pub l_min: f64,
    pub wheelbase: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            kp: 0.8,
            ki: 0.1,
            kd: 0.0,
            kv: 0.8,
            l_min: 5.0,
            wheelbase: 2.7,
        }
    }
}

impl TrackerConfig {
    pub fn lookahead(&self, speed: f64) -> f64 {
        (self.kv * speed).max(self.l_min)
    }
}

/// Where to steer and how fast to go, from the current plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    /// Pure Pursuit goal in the planning frame.
    pub target: Vec2,
    pub speed: f64,
}

/// Dense polyline of a spline with cumulative arc length.
#[derive(Debug, Clone)]
struct ArcTable {
    points: Vec<Vec2>,
    cumulative: Vec<f64>,
}

impl ArcTable {
    fn new(spline: &BSpline2D) -> Self {
        let points: Vec<Vec2> = (0..=ARC_SAMPLES)
            .map(|k| spline.eval_unchecked(k as f64 / ARC_SAMPLES as f64))
            .collect();
        let mut cumulative = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        cumulative.push(0.0);
        for w in points.windows(2) {
            acc += (w[1] - w[0]).norm();
            cumulative.push(acc);
        }
        Self { points, cumulative }
    }

    fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Arc length of the polyline point closest to `p`.
    fn project(&self, p: Vec2) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for (i, w) in self.points.windows(2).enumerate() {
            let seg = w[1] - w[0];
            let len2 = seg.dot(seg);
            let t = if len2 > 0.0 {
                ((p - w[0]).dot(seg) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let d = (p - (w[0] + seg * t)).norm();
            if d < best.0 {
                best = (d, self.cumulative[i] + t * len2.sqrt());
            }
        }
        best.1
    }

    /// Point at arc length `s`, extrapolated along the end tangent.
    fn point_at(&self, s: f64) -> Vec2 {
        let n = self.points.len();
        if s >= self.length() {
            let dir = self.points[n - 1] - self.points[n - 2];
            let len = dir.norm();
            let dir = if len > 0.0 {
                dir * (1.0 / len)
            } else {
                Vec2::new(1.0, 0.0)
            };
            return self.points[n - 1] + dir * (s - self.length());
        }
        let i = self.cumulative.partition_point(|c| *c <= s).clamp(1, n - 1);
        let (c0, c1) = (self.cumulative[i - 1], self.cumulative[i]);
        let t = if c1 > c0 { (s - c0) / (c1 - c0) } else { 0.0 };
        self.points[i - 1] + (self.points[i] - self.points[i - 1]) * t
    }
}

/// Plan speed at `t_since_plan` (chord-length central difference) and the
/// point `lookahead` meters of arc beyond the plan point closest to `ego`.
/// Both `ego` and the returned target are in the planning frame.
pub fn reference_from_spline(
    spline: &BSpline2D,
    ego: Vec2,
    t_since_plan: f64,
    lookahead: f64,
) -> Reference {
    reference_with_table(spline, &ArcTable::new(spline), ego, t_since_plan, lookahead)
}

fn reference_with_table(
    spline: &BSpline2D,
    table: &ArcTable,
    ego: Vec2,
    t_since_plan: f64,
    lookahead: f64,
) -> Reference {
    if table.length() < 1e-9 {
        return Reference {
            target: ego + Vec2::new(lookahead.max(1.0), 0.0),
            speed: 0.0,
        };
    }
    let tau = (t_since_plan / spline.horizon_s()).clamp(0.0, 1.0);
    let lo = (tau - SPEED_DTAU).max(0.0);
    let hi = (tau + SPEED_DTAU).min(1.0);
    let chord = (spline.eval_unchecked(hi) - spline.eval_unchecked(lo)).norm();
    let speed = chord / ((hi - lo) * spline.horizon_s());
    let s = table.project(ego) + lookahead;
    Reference {
        target: table.point_at(s),
        speed,
    }
}

/// Steering angle toward a goal in the vehicle frame, or `None` if the goal
/// is not ahead of the vehicle.
pub fn pure_pursuit(target: Vec2, wheelbase: f64) -> Option<f64> {
    if target.x <= 0.0 {
        return None;
    }
    let alpha = target.y.atan2(target.x);
    let ld = target.norm();
    Some(
        (2.0 * wheelbase * alpha.sin() / ld)
            .atan()
            .clamp(-MAX_STEER, MAX_STEER),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PidState {
    pub integral: f64,
    pub prev_error: Option<f64>,
}

/// Speed PID with integral clamp and actuator saturation.
pub fn pid_accel(
    v_target: f64,
    v_actual: f64,
    state: &mut PidState,
    dt: f64,
    cfg: &TrackerConfig,
) -> f64 {
    let e = v_target - v_actual;
    state.integral = (state.integral + e * dt).clamp(-INTEGRAL_LIMIT, INTEGRAL_LIMIT);
    let de = state.prev_error.map_or(0.0, |p| (e - p) / dt);
    state.prev_error = Some(e);
    (cfg.kp * e + cfg.ki * state.integral + cfg.kd * de).clamp(MIN_ACCEL, MAX_ACCEL)
}

/// Per-run tracker holding controller memory.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub cfg: TrackerConfig,
    pid: PidState,
    last_steer: f64,
    plan: Option<(BSpline2D, ArcTable)>,
    /// Number of control steps where the goal fell behind the vehicle.
    pub behind_events: usize,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig) -> Self {
        Self {
            cfg,
            pid: PidState::default(),
            last_steer: 0.0,
            plan: None,
            behind_events: 0,
        }
    }

    /// Replaces the plan being tracked.
    pub fn set_plan(&mut self, plan: BSpline2D) {
        let table = ArcTable::new(&plan);
        self.plan = Some((plan, table));
    }

    pub fn plan(&self) -> Option<&BSpline2D> {
        self.plan.as_ref().map(|(p, _)| p)
    }

    /// `(steer, accel)` for a vehicle at `ego` (pose in the planning frame)
    /// moving at `speed`. Without a plan the vehicle coasts straight.
    pub fn command(&mut self, ego: &Pose, speed: f64, t_since_plan: f64, dt: f64) -> (f64, f64) {
        let Some((plan, table)) = &self.plan else {
            return (0.0, 0.0);
        };
        let reference = reference_with_table(
            plan,
            table,
            ego.position,
            t_since_plan,
            self.cfg.lookahead(speed),
        );
        let local = ego.to_local(reference.target);
        let steer = match pure_pursuit(local, self.cfg.wheelbase) {
            Some(s) => s,
            None => {
                self.behind_events += 1;
                self.last_steer
            }
        };
        self.last_steer = steer;
        (
            steer,
            pid_accel(reference.speed, speed, &mut self.pid, dt, &self.cfg),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splines::{KnotVector, TimedPoint};

    fn straight(speed: f64, horizon: f64) -> BSpline2D {
        let l = speed * horizon;
        let cps = (0..4).map(|i| Vec2::new(l * i as f64 / 3.0, 0.0)).collect();
        BSpline2D::new(KnotVector::cubic_bezier(), cps, horizon).unwrap()
    }

    #[test]
    fn straight_spline_reference() {
        let s = straight(30.0, 2.0);
        for t in [0.0, 0.5, 1.0, 1.9] {
            let r = reference_from_spline(&s, Vec2::ZERO, t, 10.0);
            assert!((r.speed - 30.0).abs() < 1e-9);
        }
        let r = reference_from_spline(&s, Vec2::ZERO, 0.0, 10.0);
        assert!((r.target - Vec2::new(10.0, 0.0)).norm() < 1e-9);
        // past the end: extrapolated along the tangent
        let r = reference_from_spline(&s, Vec2::new(55.0, 0.0), 1.5, 10.0);
        assert!((r.target - Vec2::new(65.0, 0.0)).norm() < 1e-6);
    }

    #[test]
    fn curved_spline_speed_matches_dense_arc_length() {
        let kv = KnotVector::cubic_bezier();
        let pts: Vec<TimedPoint> = (1..=20)
            .map(|k| {
                let t = 0.1 * k as f64;
                // quarter of a 60 m radius circle at accelerating pace
                let s = 25.0 * t + 1.5 * t * t;
                TimedPoint::new(t, 60.0 * (s / 60.0).sin(), 60.0 * (1.0 - (s / 60.0).cos()))
            })
            .collect();
        let spline = crate::splines::fit_spline(&pts, 2.0, &kv).unwrap();
        for t in [0.2, 0.7, 1.3] {
            let r = reference_from_spline(&spline, Vec2::ZERO, t, 10.0);
            // oracle: arc length over a small window from 2001 dense samples
            let dense = |a: f64, b: f64| {
                let n = 2000;
                (0..n)
                    .map(|k| {
                        let t0 = a + (b - a) * k as f64 / n as f64;
                        let t1 = a + (b - a) * (k + 1) as f64 / n as f64;
                        (spline.at_time(t1) - spline.at_time(t0)).norm()
                    })
                    .sum::<f64>()
                    / (b - a)
            };
            let oracle = dense(t - 0.01, t + 0.01);
            assert!(
                (r.speed - oracle).abs() / oracle < 0.01,
                "{} vs {oracle}",
                r.speed
            );
        }
    }

    #[test]
    fn degenerate_spline_reference() {
        let s = BSpline2D::new(KnotVector::cubic_bezier(), vec![Vec2::ZERO; 4], 2.0).unwrap();
        let r = reference_from_spline(&s, Vec2::ZERO, 0.3, 8.0);
        assert_eq!(r.speed, 0.0);
        assert_eq!(r.target.y, 0.0);
        assert!(r.target.x > 0.0);
    }

    #[test]
    fn pure_pursuit_examples() {
        assert_eq!(pure_pursuit(Vec2::new(10.0, 0.0), 2.7), Some(0.0));
        let target = Vec2::from_angle(0.1) * 10.0;
        let d = pure_pursuit(target, 2.7).unwrap();
        assert!((d - (2.0 * 2.7 * 0.1f64.sin() / 10.0).atan()).abs() < 1e-12);
        assert!((d - 0.0539).abs() < 1e-4);
        let m = pure_pursuit(Vec2::new(target.x, -target.y), 2.7).unwrap();
        assert_eq!(m, -d);
        assert_eq!(pure_pursuit(Vec2::new(-1.0, 0.5), 2.7), None);
        assert_eq!(pure_pursuit(Vec2::new(0.5, 5.0), 2.7), Some(MAX_STEER));
    }

    #[test]
    fn pid_examples() {
        let cfg = TrackerConfig::default();
        let mut st = PidState::default();
        assert_eq!(pid_accel(30.0, 30.0, &mut st, 0.01, &cfg), 0.0);
        let p_only = TrackerConfig {
            kp: 0.8,
            ki: 0.0,
            kd: 0.0,
            ..cfg.clone()
        };
        let mut st = PidState::default();
        assert!((pid_accel(32.0, 30.0, &mut st, 0.01, &p_only) - 1.6).abs() < 1e-12);
        let mut st = PidState::default();
        for _ in 0..10_000 {
            let a = pid_accel(40.0, 30.0, &mut st, 0.01, &cfg);
            assert_eq!(a, MAX_ACCEL);
            assert!(st.integral.abs() <= 5.0);
        }
        assert_eq!(st.integral, 5.0);
    }
}
