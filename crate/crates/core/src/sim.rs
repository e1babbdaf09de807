//! Deterministic closed-loop world: road, kinematic ego vehicle, a lead
//! vehicle on the lane centerline, perfect virtual sensors and the safety
//! monitor.

use std::fmt::{self, Write as _};

use crate::datapipe::{record_headings, Maneuver, LOG_DT};
use crate::error::{Error, Result};
use crate::geom::{polyfit, polyval, three_point_curvature, Pose, Vec2};
use crate::policy::{CoefficientVector, FeatureVector, PolicyNetwork};
use crate::splines::{fit_spline, KnotVector, TimedPoint};
use crate::tracker::{Tracker, TrackerConfig, MAX_ACCEL, MAX_STEER, MIN_ACCEL};

/// Dynamics step, seconds.
pub const SIM_DT: f64 = 0.01;
/// Steps between two plans (1 Hz replanning).
pub const STEPS_PER_PLAN: usize = 100;
/// Steps between two trace rows (5 Hz).
pub const STEPS_PER_TRACE: usize = 20;
/// Lane boundaries are sampled this far ahead for sensing, meters.
pub const SENSE_RANGE: f64 = 60.0;
pub const SENSE_STEP: f64 = 5.0;
/// Number of future samples fitted by the oracle policies.
const ORACLE_SAMPLES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Turn {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RoadKind {
    Straight,
    Arc { radius: f64, turn: Turn },
}

/// A single road with parallel lanes. Lane 0 is centered on the reference
/// line, which starts at the origin heading along +X. Lane `k` is offset by
/// `k * lane_width` to the left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoadGeometry {
    pub kind: RoadKind,
    pub length: f64,
    pub lane_width: f64,
}

impl RoadGeometry {
    pub fn straight(length: f64, lane_width: f64) -> Self {
        Self {
            kind: RoadKind::Straight,
            length,
            lane_width,
        }
    }

    pub fn arc(radius: f64, turn: Turn, length: f64, lane_width: f64) -> Self {
        Self {
            kind: RoadKind::Arc { radius, turn },
            length,
            lane_width,
        }
    }

    /// Signed curvature of the reference line, positive to the left.
    pub fn curvature(&self) -> f64 {
        match self.kind {
            RoadKind::Straight => 0.0,
            RoadKind::Arc {
                radius,
                turn: Turn::Left,
            } => 1.0 / radius,
            RoadKind::Arc {
                radius,
                turn: Turn::Right,
            } => -1.0 / radius,
        }
    }

    pub fn validate(&self, track_width: f64) -> Result<()> {
        if let RoadKind::Arc { radius, .. } = self.kind {
            if !(radius >= 100.0) {
                return Err(Error::InvalidScenario(format!(
                    "arc radius {radius} m below 100 m"
                )));
            }
        }
        if !(self.length > 0.0) {
            return Err(Error::InvalidScenario(format!(
                "road length {} m",
                self.length
            )));
        }
        if !(self.lane_width > track_width) {
            return Err(Error::InvalidScenario(format!(
                "lane width {} m must exceed the vehicle track {track_width} m",
                self.lane_width
            )));
        }
        Ok(())
    }

    /// Pose of the reference line at station `s` (defined beyond the road
    /// ends by continuing the same geometry).
    pub fn reference_pose(&self, s: f64) -> Pose {
        let k = self.curvature();
        if k == 0.0 {
            return Pose::new(Vec2::new(s, 0.0), 0.0);
        }
        let th = k * s;
        Pose::new(Vec2::new(th.sin() / k, (1.0 - th.cos()) / k), th)
    }

    /// Point at station `s` and lateral offset `lateral` (left positive).
    pub fn point(&self, s: f64, lateral: f64) -> Vec2 {
        let p = self.reference_pose(s);
        p.position + Vec2::from_angle(p.heading).perp() * lateral
    }

    /// `(station, lateral offset)` of `p`, choosing the station closest to
    /// `s_hint` on closed arcs.
    pub fn project(&self, p: Vec2, s_hint: f64) -> (f64, f64) {
        let k = self.curvature();
        if k == 0.0 {
            return (p.x, p.y);
        }
        let r = 1.0 / k;
        let v = p - Vec2::new(0.0, r);
        let th = (v.x / r).atan2(-v.y / r);
        let circumference = std::f64::consts::TAU * r.abs();
        let mut s = th / k;
        s += ((s_hint - s) / circumference).round() * circumference;
        (s, k.signum() * (r.abs() - v.norm()))
    }

    /// Least-squares polynomial of a line at `lateral` offset, in the frame
    /// of `ego`, sampled every 5 m over 60 m ahead of station `s0`.
    pub fn boundary_fit(
        &self,
        ego: &Pose,
        s0: f64,
        lateral: f64,
        degree: usize,
    ) -> Option<Vec<f64>> {
        let n = (SENSE_RANGE / SENSE_STEP).round() as usize;
        let (xs, ys): (Vec<f64>, Vec<f64>) = (0..=n)
            .map(|k| {
                let local = ego.to_local(self.point(s0 + SENSE_STEP * k as f64, lateral));
                (local.x, local.y)
            })
            .unzip();
        polyfit(&xs, &ys, degree)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub pose: Pose,
    pub speed: f64,
}

/// Which actuator commands were saturated in a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Clamps {
    pub steer: bool,
    pub accel: bool,
}

/// One forward-Euler step of the kinematic bicycle.
pub fn step_vehicle(
    state: &VehicleState,
    steer: f64,
    accel: f64,
    dt: f64,
    wheelbase: f64,
) -> (VehicleState, Clamps) {
    debug_assert!(dt > 0.0 && dt <= 0.05, "dt {dt} outside (0, 0.05]");
    let clamps = Clamps {
        steer: steer.abs() > MAX_STEER,
        accel: !(MIN_ACCEL..=MAX_ACCEL).contains(&accel),
    };
    let steer = steer.clamp(-MAX_STEER, MAX_STEER);
    let accel = accel.clamp(MIN_ACCEL, MAX_ACCEL);
    let v = state.speed;
    let th = state.pose.heading;
    let next = VehicleState {
        pose: Pose::new(
            state.pose.position + Vec2::new(v * th.cos(), v * th.sin()) * dt,
            th + v * steer.tan() / wheelbase * dt,
        ),
        speed: (v + accel * dt).max(0.0),
    };
    (next, clamps)
}

/// Lead vehicle speed over time.
#[derive(Debug, Clone, PartialEq)]
pub enum SpeedLaw {
    Constant(f64),
    /// `(t, v)` knots, linearly interpolated and held beyond the ends.
    Profile(Vec<(f64, f64)>),
}

impl SpeedLaw {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            SpeedLaw::Constant(v) => *v,
            SpeedLaw::Profile(knots) => {
                let i = knots.partition_point(|(kt, _)| *kt <= t);
                if i == 0 {
                    knots[0].1
                } else if i == knots.len() {
                    knots[i - 1].1
                } else {
                    let (t0, v0) = knots[i - 1];
                    let (t1, v1) = knots[i];
                    v0 + (v1 - v0) * (t - t0) / (t1 - t0)
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            SpeedLaw::Constant(v) if *v >= 0.0 => Ok(()),
            SpeedLaw::Profile(k)
                if !k.is_empty()
                    && k.windows(2).all(|w| w[1].0 > w[0].0)
                    && k.iter().all(|p| p.1 >= 0.0) =>
            {
                Ok(())
            }
            _ => Err(Error::InvalidScenario(
                "lead speed law must be non-negative with increasing times".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub road: RoadGeometry,
    pub ego_speed: f64,
    pub ego_station: f64,
    /// Initial lateral offset from the lane 0 center, left positive.
    pub ego_offset: f64,
    /// Initial heading relative to the lane direction.
    pub ego_heading: f64,
    /// Initial distance from ego to lead along the road.
    pub lead_gap: f64,
    pub lead_speed: SpeedLaw,
    pub seed: u64,
    pub duration: f64,
    pub track_width: f64,
    pub horizon_s: f64,
    pub tracker: TrackerConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            road: RoadGeometry::straight(1000.0, 3.5),
            ego_speed: 30.0,
            ego_station: 0.0,
            ego_offset: 0.0,
            ego_heading: 0.0,
            lead_gap: 50.0,
            lead_speed: SpeedLaw::Constant(30.0),
            seed: 0,
            duration: 60.0,
            track_width: crate::losses::BarrierConfig::DEFAULT_TRACK,
            horizon_s: DEFAULT_HORIZON_S,
            tracker: TrackerConfig::default(),
        }
    }
}

/// Planning horizon used throughout the experiments, seconds.
pub const DEFAULT_HORIZON_S: f64 = 2.0;

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.road.validate(self.track_width)?;
        self.lead_speed.validate()?;
        if !(self.lead_gap > 0.0) {
            return Err(Error::InvalidScenario(format!(
                "lead gap {} m must be positive",
                self.lead_gap
            )));
        }
        if !(self.ego_speed >= 0.0) {
            return Err(Error::InvalidScenario(format!(
                "ego speed {}",
                self.ego_speed
            )));
        }
        if !(self.duration > 0.0) || !(self.horizon_s > 0.0) {
            return Err(Error::InvalidScenario(
                "duration and horizon must be positive".into(),
            ));
        }
        if !(self.track_width > 0.0) {
            return Err(Error::InvalidScenario(
                "track width must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn initial_ego(&self) -> VehicleState {
        let reference = self.road.reference_pose(self.ego_station);
        VehicleState {
            pose: Pose::new(
                self.road.point(self.ego_station, self.ego_offset),
                reference.heading + self.ego_heading,
            ),
            speed: self.ego_speed,
        }
    }
}

/// Lead vehicle on the centerline of some lane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeadState {
    pub station: f64,
    pub speed: f64,
    pub lateral: f64,
}

/// Complete world state of a closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub ego: VehicleState,
    pub ego_station: f64,
    pub lead: LeadState,
    pub time: f64,
    pub flag: Option<FlagKind>,
}

/// Features seen by the ego in the lane centered at `lane_center`.
pub fn sense_lane(
    ego: &VehicleState,
    s_ego: f64,
    road: &RoadGeometry,
    lane_center: f64,
    lead: &LeadState,
) -> Result<FeatureVector> {
    let half = 0.5 * road.lane_width;
    let (_, lateral) = road.project(ego.pose.position, s_ego);
    if (lateral - lane_center).abs() > 3.0 * road.lane_width {
        return Err(Error::InvalidScenario("ego left the road".into()));
    }
    let left = road
        .boundary_fit(&ego.pose, s_ego, lane_center + half, 2)
        .ok_or(Error::Singular)?;
    let right = road
        .boundary_fit(&ego.pose, s_ego, lane_center - half, 2)
        .ok_or(Error::Singular)?;
    let lead_local = ego.pose.to_local(road.point(lead.station, lead.lateral));
    Ok(FeatureVector {
        c0l: left[0],
        c1l: left[1],
        c2l: left[2],
        c0r: right[0],
        c1r: right[1],
        c2r: right[2],
        v_x: ego.speed,
        v_lead: lead.speed,
        d_lead: lead_local.x,
    })
}

/// Virtual lane camera and radar for lane 0.
pub fn sense(state: &SimState, road: &RoadGeometry) -> Result<FeatureVector> {
    sense_lane(&state.ego, state.ego_station, road, 0.0, &state.lead)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlagKind {
    Lane,
    Collision,
    /// The policy produced an unusable plan.
    Abort,
}

impl fmt::Display for FlagKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlagKind::Lane => "lane",
            FlagKind::Collision => "collision",
            FlagKind::Abort => "abort",
        })
    }
}

pub fn flag_name(flag: Option<FlagKind>) -> String {
    flag.map_or_else(|| "none".to_string(), |f| f.to_string())
}

/// Lateral offset from the lane center and time to collision checks.
pub fn monitor(
    lateral_offset: f64,
    lane_width: f64,
    track_width: f64,
    gap: f64,
    v_ego: f64,
    v_lead: f64,
) -> Option<FlagKind> {
    if lateral_offset.abs() + 0.5 * track_width > 0.5 * lane_width {
        return Some(FlagKind::Lane);
    }
    let closing = v_ego - v_lead;
    if closing > 0.0 {
        let ttc = gap / closing;
        if ttc > 0.0 && ttc <= 1.0 {
            return Some(FlagKind::Collision);
        }
    }
    None
}

/// Inputs available to a planning policy at a replanning instant.
pub struct PlanContext<'a> {
    pub time: f64,
    pub features: &'a FeatureVector,
    pub ego: &'a VehicleState,
    pub ego_station: f64,
    pub road: &'a RoadGeometry,
    pub horizon_s: f64,
    pub knots: &'a KnotVector,
}

/// Something that maps the current situation to the six free control points.
pub trait Policy {
    fn plan(&mut self, ctx: &PlanContext<'_>) -> Result<CoefficientVector>;
}

impl Policy for PolicyNetwork {
    fn plan(&mut self, ctx: &PlanContext<'_>) -> Result<CoefficientVector> {
        self.forward(ctx.features)
    }
}

/// Plans a constant-speed run along the lane 0 centerline.
#[derive(Debug, Clone, Default)]
pub struct CenterlinePolicy;

impl Policy for CenterlinePolicy {
    fn plan(&mut self, ctx: &PlanContext<'_>) -> Result<CoefficientVector> {
        let v = ctx.ego.speed;
        let pts: Vec<TimedPoint> = (1..=ORACLE_SAMPLES)
            .map(|j| {
                let t = ctx.horizon_s * j as f64 / ORACLE_SAMPLES as f64;
                let p = ctx
                    .ego
                    .pose
                    .to_local(ctx.road.point(ctx.ego_station + v * t, 0.0));
                TimedPoint { t, position: p }
            })
            .collect();
        CoefficientVector::from_spline(&fit_spline(&pts, ctx.horizon_s, ctx.knots)?)
    }
}

/// Always returns the same coefficients.
#[derive(Debug, Clone)]
pub struct ConstantPolicy(pub CoefficientVector);

impl Policy for ConstantPolicy {
    fn plan(&mut self, _ctx: &PlanContext<'_>) -> Result<CoefficientVector> {
        Ok(self.0)
    }
}

/// Replays a timed path given in the simulation frame.
#[derive(Debug, Clone)]
pub struct PathReplayPolicy {
    path: Vec<(f64, Vec2)>,
}

impl PathReplayPolicy {
    pub fn new(path: Vec<(f64, Vec2)>) -> Self {
        Self { path }
    }

    fn at(&self, t: f64) -> Vec2 {
        let i = self
            .path
            .partition_point(|(pt, _)| *pt <= t)
            .clamp(1, self.path.len() - 1);
        let (t0, p0) = self.path[i - 1];
        let (t1, p1) = self.path[i];
        p0 + (p1 - p0) * ((t - t0) / (t1 - t0))
    }
}

impl Policy for PathReplayPolicy {
    fn plan(&mut self, ctx: &PlanContext<'_>) -> Result<CoefficientVector> {
        if self.path.len() < 2 {
            return Err(Error::Empty("replay path"));
        }
        let pts: Vec<TimedPoint> = (1..=ORACLE_SAMPLES)
            .map(|j| {
                let t = ctx.horizon_s * j as f64 / ORACLE_SAMPLES as f64;
                TimedPoint {
                    t,
                    position: ctx.ego.pose.to_local(self.at(ctx.time + t)),
                }
            })
            .collect();
        CoefficientVector::from_spline(&fit_spline(&pts, ctx.horizon_s, ctx.knots)?)
    }
}

/// One row of a closed-loop trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub vx: f64,
    pub offset: f64,
    pub gap: f64,
    pub vlead: f64,
    /// Distance traveled along the road since the start.
    pub progress: f64,
    pub flag: Option<FlagKind>,
}

pub const TRACE_HEADER: &str = "t,X,Y,heading,vx,offset,gap,vlead,flag";

impl TraceRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.t,
            self.x,
            self.y,
            self.heading,
            self.vx,
            self.offset,
            self.gap,
            self.vlead,
            flag_name(self.flag)
        )
    }
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

/// Outcome of one closed-loop scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Fraction of the road driven before the first flag; 1 without flags.
    pub completion: f64,
    pub flag: Option<FlagKind>,
    pub flag_time: Option<f64>,
    pub trace: Vec<TraceRow>,
    pub diagnostics: Vec<String>,
}

/// Runs `policy` on `scenario` with 1 Hz replanning and 100 Hz dynamics until
/// the first safety flag, the road end or the scenario duration.
pub fn run_closed_loop(
    scenario: &ScenarioConfig,
    policy: &mut dyn Policy,
    tracker_cfg: &TrackerConfig,
) -> Result<EvalReport> {
    simulate(scenario, policy, tracker_cfg, true)
}

/// Like [`run_closed_loop`] but keeps driving after a lane or collision flag
/// (the first flag is still the one reported).
pub fn run_full_duration(
    scenario: &ScenarioConfig,
    policy: &mut dyn Policy,
    tracker_cfg: &TrackerConfig,
) -> Result<EvalReport> {
    simulate(scenario, policy, tracker_cfg, false)
}

fn simulate(
    scenario: &ScenarioConfig,
    policy: &mut dyn Policy,
    tracker_cfg: &TrackerConfig,
    stop_on_flag: bool,
) -> Result<EvalReport> {
    scenario.validate()?;
    let road = &scenario.road;
    let knots = KnotVector::cubic_bezier();
    let mut tracker = Tracker::new(tracker_cfg.clone());
    let mut state = SimState {
        ego: scenario.initial_ego(),
        ego_station: scenario.ego_station,
        lead: LeadState {
            station: scenario.ego_station + scenario.lead_gap,
            speed: scenario.lead_speed.at(0.0),
            lateral: 0.0,
        },
        time: 0.0,
        flag: None,
    };
    let mut plan_pose = state.ego.pose;
    let mut plan_time = 0.0;
    let mut diagnostics = Vec::new();
    let mut trace = Vec::new();
    let max_steps = (scenario.duration / SIM_DT).round() as usize;
    let mut step = 0usize;
    let mut flag_time = None;
    let mut flag_station = scenario.ego_station;
    let mut last_row;

    loop {
        let (s, lat) = road.project(state.ego.pose.position, state.ego_station);
        state.ego_station = s;
        let gap = state
            .ego
            .pose
            .to_local(road.point(state.lead.station, state.lead.lateral))
            .x;

        if state.flag.is_none() {
            state.flag = monitor(
                lat,
                road.lane_width,
                scenario.track_width,
                gap,
                state.ego.speed,
                state.lead.speed,
            );
            if state.flag.is_some() {
                flag_time = Some(state.time);
                flag_station = state.ego_station;
            }
        }
        last_row = row(&state, lat, gap, scenario.ego_station);
        if step % STEPS_PER_TRACE == 0 {
            trace.push(last_row);
        }
        let reached_end = state.ego_station - scenario.ego_station >= road.length;
        if (stop_on_flag && state.flag.is_some()) || reached_end || step >= max_steps {
            break;
        }

        if step % STEPS_PER_PLAN == 0 {
            let plan = sense(&state, road).and_then(|features| {
                let ctx = PlanContext {
                    time: state.time,
                    features: &features,
                    ego: &state.ego,
                    ego_station: state.ego_station,
                    road,
                    horizon_s: scenario.horizon_s,
                    knots: &knots,
                };
                policy.plan(&ctx)
            });
            let failure = match plan {
                Ok(a) if a.is_finite() => {
                    tracker.set_plan(a.to_spline(scenario.horizon_s, &knots)?);
                    plan_pose = state.ego.pose;
                    plan_time = state.time;
                    None
                }
                Ok(a) => Some((FlagKind::Abort, format!("non-finite plan {:?}", a.0))),
                Err(Error::InvalidScenario(msg)) => Some((FlagKind::Lane, msg)),
                Err(e) => Some((FlagKind::Abort, format!("planning failed: {e}"))),
            };
            if let Some((kind, msg)) = failure {
                diagnostics.push(format!("t={:.2}: {msg}", state.time));
                if state.flag.is_none() {
                    state.flag = Some(kind);
                    flag_time = Some(state.time);
                    flag_station = state.ego_station;
                }
                last_row.flag = state.flag;
                break;
            }
        }

        let ego_in_plan = state.ego.pose.relative_to(&plan_pose);
        let (steer, accel) = tracker.command(
            &ego_in_plan,
            state.ego.speed,
            state.time - plan_time,
            SIM_DT,
        );
        let (next, _) = step_vehicle(&state.ego, steer, accel, SIM_DT, tracker_cfg.wheelbase);
        state.ego = next;
        step += 1;
        state.time = step as f64 * SIM_DT;
        state.lead.speed = scenario.lead_speed.at(state.time);
        state.lead.station += state.lead.speed * SIM_DT;
    }

    if tracker.behind_events > 0 {
        diagnostics.push(format!(
            "plan target behind the vehicle on {} steps",
            tracker.behind_events
        ));
    }
    match trace.last_mut() {
        Some(r) if r.t == last_row.t => *r = last_row,
        _ => trace.push(last_row),
    }
    let completion = match state.flag {
        None => 1.0,
        Some(_) => ((flag_station - scenario.ego_station) / road.length).clamp(0.0, 1.0),
    };
    Ok(EvalReport {
        completion,
        flag: state.flag,
        flag_time,
        trace,
        diagnostics,
    })
}

fn row(state: &SimState, offset: f64, gap: f64, start: f64) -> TraceRow {
    TraceRow {
        t: state.time,
        x: state.ego.pose.position.x,
        y: state.ego.pose.position.y,
        heading: state.ego.pose.heading,
        vx: state.ego.speed,
        offset,
        gap,
        vlead: state.lead.speed,
        progress: state.ego_station - start,
        flag: state.flag,
    }
}

// ------------------------------------------------------- held-out replay

/// Rows in a held-out comparison (10 s at 5 Hz).
pub const REPLAY_ROWS: usize = 50;

/// A scenario rebuilt from logged lane fits and lead estimates, with the map
/// from the log's global frame into the simulation frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub scenario: ScenarioConfig,
    log_origin: Pose,
    sim_origin: Pose,
}

impl Reconstruction {
    pub fn to_sim(&self, p: Vec2) -> Vec2 {
        self.sim_origin.to_parent(self.log_origin.to_local(p))
    }
}

/// Rebuilds road, lead speed profile and initial state from the first
/// `rows` records of a maneuver.
pub fn reconstruct_heldout(held: &Maneuver, rows: usize, horizon_s: f64) -> Result<Reconstruction> {
    let recs = &held.records;
    if recs.len() < rows || rows < 3 {
        return Err(Error::Reconstruction(format!(
            "{} records, need {rows}",
            recs.len()
        )));
    }
    let window = &recs[..rows];
    if let Some(w) = window
        .windows(2)
        .find(|w| (w[1].t - w[0].t - LOG_DT).abs() > 1e-6)
    {
        return Err(Error::Reconstruction(format!(
            "gap between t={} and t={}",
            w[0].t, w[1].t
        )));
    }
    let n = rows as f64;
    let lane_width = window
        .iter()
        .map(|r| r.lane_l[0] - r.lane_r[0])
        .sum::<f64>()
        / n;
    // curvature of the circle through the lane center at 0, 30 and 60 m
    let kappa = window
        .iter()
        .map(|r| {
            let center =
                |x: f64| Vec2::new(x, 0.5 * (polyval(&r.lane_l, x) + polyval(&r.lane_r, x)));
            three_point_curvature(center(0.0), center(30.0), center(60.0))
        })
        .sum::<f64>()
        / n;
    let first = &window[0];
    let distance: f64 = window
        .windows(2)
        .map(|w| (w[1].position() - w[0].position()).norm())
        .sum();
    let length = 2.0 * distance + 200.0;
    let road = if kappa.abs() < 5e-5 {
        RoadGeometry::straight(length, lane_width)
    } else {
        let turn = if kappa > 0.0 { Turn::Left } else { Turn::Right };
        RoadGeometry::arc(1.0 / kappa.abs(), turn, length, lane_width)
    };
    let t0 = first.t;
    let mut profile: Vec<(f64, f64)> = window
        .iter()
        .zip(&held.kinematics)
        .map(|(r, k)| (r.t - t0, k.v_lead))
        .collect();
    let (t_last, v_last) = *profile.last().expect("non-empty window");
    profile.push((t_last + LOG_DT, v_last));

    let scenario = ScenarioConfig {
        road,
        ego_speed: first.vx,
        ego_station: 0.0,
        ego_offset: first.lane_offset(),
        ego_heading: -(0.5 * (first.lane_l[1] + first.lane_r[1])).atan(),
        lead_gap: held.kinematics[0].d_lead,
        lead_speed: SpeedLaw::Profile(profile),
        seed: 0,
        duration: n * LOG_DT,
        horizon_s,
        ..ScenarioConfig::default()
    };
    scenario
        .validate()
        .map_err(|e| Error::Reconstruction(e.to_string()))?;
    let log_origin = Pose::new(first.position(), record_headings(window)[0]);
    let sim_origin = scenario.initial_ego().pose;
    Ok(Reconstruction {
        scenario,
        log_origin,
        sim_origin,
    })
}

/// The expert's own path, in the simulation frame, as a replay policy.
pub fn expert_replayer(held: &Maneuver, rec: &Reconstruction) -> PathReplayPolicy {
    let t0 = held.records[0].t;
    PathReplayPolicy::new(
        held.records
            .iter()
            .map(|r| (r.t - t0, rec.to_sim(r.position())))
            .collect(),
    )
}

/// Time-aligned expert and closed-loop states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedRow {
    pub t: f64,
    pub expert_x: f64,
    pub expert_v: f64,
    pub expert_offset: f64,
    pub policy_x: f64,
    pub policy_v: f64,
    pub policy_offset: f64,
    pub policy_flag: Option<FlagKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeldoutReplay {
    pub rows: Vec<PairedRow>,
    pub report: EvalReport,
    pub speed_rmse: f64,
    pub offset_rmse: f64,
}

impl HeldoutReplay {
    /// True when the policy finished the window without any flag.
    pub fn stayed_in_lane(&self) -> bool {
        self.report.flag.is_none()
    }
}

pub const PAIRED_HEADER: &str =
    "t,expert_x,expert_v,expert_offset,policy_x,policy_v,policy_offset,policy_flag";

/// Paired rows followed by an `rmse` summary row (speed and offset columns).
pub fn paired_csv(replay: &HeldoutReplay) -> String {
    let mut s = format!("{PAIRED_HEADER}\n");
    for r in &replay.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.t,
            r.expert_x,
            r.expert_v,
            r.expert_offset,
            r.policy_x,
            r.policy_v,
            r.policy_offset,
            flag_name(r.policy_flag)
        );
    }
    let _ = writeln!(s, "rmse,,{},{},,,,", replay.speed_rmse, replay.offset_rmse);
    s
}

/// Replays the first 10 s of a held-out maneuver with `policy` in control
/// and pairs the closed-loop trace with the logged expert states.
pub fn replay_heldout(
    held: &Maneuver,
    policy: &mut dyn Policy,
    tracker_cfg: &TrackerConfig,
    horizon_s: f64,
) -> Result<HeldoutReplay> {
    let rec = reconstruct_heldout(held, REPLAY_ROWS, horizon_s)?;
    let report = run_full_duration(&rec.scenario, policy, tracker_cfg)?;
    let t0 = held.records[0].t;
    let mut expert_x = 0.0;
    let mut rows = Vec::with_capacity(REPLAY_ROWS);
    for (i, r) in held.records[..REPLAY_ROWS].iter().enumerate() {
        if i > 0 {
            expert_x += (r.position() - held.records[i - 1].position()).norm();
        }
        let p = report
            .trace
            .get(i)
            .or(report.trace.last())
            .expect("trace has a first row");
        rows.push(PairedRow {
            t: r.t - t0,
            expert_x,
            expert_v: r.vx,
            expert_offset: r.lane_offset(),
            policy_x: p.progress,
            policy_v: p.vx,
            policy_offset: p.offset,
            policy_flag: p.flag,
        });
    }
    let rmse = |f: &dyn Fn(&PairedRow) -> f64| {
        (rows.iter().map(|r| f(r).powi(2)).sum::<f64>() / rows.len() as f64).sqrt()
    };
    let speed_rmse = rmse(&|r| r.policy_v - r.expert_v);
    let offset_rmse = rmse(&|r| r.policy_offset - r.expert_offset);
    Ok(HeldoutReplay {
        rows,
        report,
        speed_rmse,
        offset_rmse,
    })
}
