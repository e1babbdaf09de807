//! Expert driving logs and the processing pipeline that turns them into
//! training tuples.
//!
//! Logs are produced by a scripted expert (pure pursuit toward a wandering
//! lane-center target, IDM spacing law) driven through [`crate::sim`], then
//! cleaned of lane changes, cut-ins and lead-less records, split into
//! car-following maneuvers and cut into `(features, target, future)` tuples.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geom::{polyfit, polyval, Pose, Vec2};
use crate::policy::{CoefficientVector, FeatureVector};
use crate::sim::{step_vehicle, LeadState, ScenarioConfig, SpeedLaw, SIM_DT, STEPS_PER_TRACE};
use crate::splines::{fit_spline, KnotVector, TimedPoint};
use crate::tracker::pure_pursuit;

/// Log period, seconds (5 Hz).
pub const LOG_DT: f64 = 0.2;
/// Lane re-anchoring shows up as a `c0` jump above this, meters.
pub const LANE_JUMP_M: f64 = 1.5;
pub const LANE_CHANGE_MARGIN_S: f64 = 5.0;
/// Implied lead acceleration above this is a target switch, m/s^2.
pub const CUTIN_ACCEL: f64 = 8.0;
pub const CUTIN_MARGIN_S: f64 = 3.0;
pub const MIN_MANEUVER_S: f64 = 30.0;
/// Number of future samples per tuple.
pub const FUTURE_POINTS: usize = 20;

const TIME_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    /// Cubic `c0 + c1 x + c2 x^2 + c3 x^3` of the left boundary, ego frame.
    pub lane_l: [f64; 4],
    pub lane_r: [f64; 4],
    /// Lead position in the ego frame.
    pub lead: Option<Vec2>,
}

impl LogRecord {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    /// Lateral offset of the ego from the lane center, left positive.
    pub fn lane_offset(&self) -> f64 {
        -0.5 * (self.lane_l[0] + self.lane_r[0])
    }
}

// ---------------------------------------------------------------- expert

/// Scripted driver used to synthesize logs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertConfig {
    pub time_gap: f64,
    pub max_accel: f64,
    pub comfort_decel: f64,
    pub min_gap: f64,
    /// Desired speed sits this far above the scenario's ego speed so the
    /// driver is in spacing control behind the lead.
    pub desired_margin: f64,
    /// Stationary std of the desired-speed noise, m/s.
    pub speed_noise_std: f64,
    pub speed_noise_cutoff_hz: f64,
    /// Stationary std of the lateral aim-point wander, m.
    pub wander_std: f64,
    pub wander_tau: f64,
    pub lookahead_gain: f64,
    pub lookahead_min: f64,
    pub lane_change_duration: f64,
    pub wheelbase: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            time_gap: 1.5,
            max_accel: 1.5,
            comfort_decel: 2.0,
            min_gap: 2.0,
            desired_margin: 5.0,
            speed_noise_std: 1.0,
            speed_noise_cutoff_hz: 0.1,
            wander_std: 0.25,
            wander_tau: 8.0,
            lookahead_gain: 1.0,
            lookahead_min: 8.0,
            lane_change_duration: 4.0,
            wheelbase: 2.7,
        }
    }
}

impl ExpertConfig {
    /// A perfectly centered, constant-preference driver.
    pub fn calm() -> Self {
        Self {
            speed_noise_std: 0.0,
            wander_std: 0.0,
            ..Self::default()
        }
    }

    /// Steady following distance behind a lead at speed `v`.
    pub fn equilibrium_gap(&self, v: f64, v_desired: f64) -> f64 {
        let free = 1.0 - (v / v_desired).powi(4);
        (self.min_gap + v * self.time_gap) / free.max(1e-3).sqrt()
    }

    /// Intelligent Driver Model acceleration.
    pub fn idm_accel(&self, v: f64, v_desired: f64, gap: f64, v_lead: f64) -> f64 {
        let s_star = self.min_gap
            + (v * self.time_gap
                + v * (v - v_lead) / (2.0 * (self.max_accel * self.comfort_decel).sqrt()))
            .max(0.0);
        let free = 1.0 - (v / v_desired.max(0.1)).powi(4);
        self.max_accel * (free - (s_star / gap.max(0.1)).powi(2))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Injections {
    pub cutins: usize,
    pub lane_changes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    CutIn,
    LaneChange,
}

/// A labeled disturbance. For lane changes `t` is the requested crossing
/// time when planned and the observed crossing time when reported.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InjectedEvent {
    pub kind: EventKind,
    pub t: f64,
}

impl Injections {
    /// Spreads the events evenly over the log with a little seeded jitter,
    /// lane changes first.
    pub fn plan(&self, duration: f64, seed: u64) -> Vec<InjectedEvent> {
        let n = self.cutins + self.lane_changes;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1e55);
        (0..n)
            .map(|j| {
                let base = duration * (j + 1) as f64 / (n + 1) as f64 + rng.gen_range(-1.0..1.0);
                let t = (base / LOG_DT).round() * LOG_DT;
                InjectedEvent {
                    kind: interleaved_kind(j, self.lane_changes, self.cutins),
                    t,
                }
            })
            .collect()
    }
}

/// Alternates kinds while both remain, then fills with the leftover kind.
fn interleaved_kind(j: usize, lane_changes: usize, cutins: usize) -> EventKind {
    let paired = 2 * lane_changes.min(cutins);
    if j < paired {
        if j % 2 == 0 {
            EventKind::LaneChange
        } else {
            EventKind::CutIn
        }
    } else if lane_changes > cutins {
        EventKind::LaneChange
    } else {
        EventKind::CutIn
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertLog {
    pub records: Vec<LogRecord>,
    pub events: Vec<InjectedEvent>,
}

/// One-dimensional Ornstein-Uhlenbeck process with stationary std `std`.
#[derive(Debug, Clone)]
struct Ou {
    value: f64,
    std: f64,
    tau: f64,
}

impl Ou {
    fn new(std: f64, tau: f64, rng: &mut ChaCha8Rng) -> Self {
        let z: f64 = rng.sample(StandardNormal);
        Self {
            value: std * z,
            std,
            tau,
        }
    }

    fn step(&mut self, dt: f64, rng: &mut ChaCha8Rng) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        let decay = (-dt / self.tau).exp();
        self.value = self.value * decay + self.std * (1.0 - decay * decay).sqrt() * z;
        self.value
    }
}

/// Smooth seeded lead speed profile around `base` with 1 s knots.
pub fn smooth_speed_profile(base: f64, amplitude: f64, duration: f64, seed: u64) -> SpeedLaw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1ead_5eed);
    let mut ou = Ou::new(amplitude, 10.0, &mut rng);
    let n = duration.ceil().max(1.0) as usize + 1;
    let knots = (0..=n)
        .map(|k| {
            let v = if k == 0 {
                ou.value
            } else {
                ou.step(1.0, &mut rng)
            };
            (k as f64, (base + v).max(0.0))
        })
        .collect();
    SpeedLaw::Profile(knots)
}

/// Drives the scripted expert through `scenario` and logs at 5 Hz.
pub fn generate_expert_log(
    scenario: &ScenarioConfig,
    duration: f64,
    seed: u64,
    expert: &ExpertConfig,
    events: &[InjectedEvent],
) -> Result<ExpertLog> {
    scenario.validate()?;
    if !(duration > 0.0) {
        return Err(Error::InvalidScenario(format!("duration {duration} s")));
    }
    let road = &scenario.road;
    let w = road.lane_width;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut speed_noise = Ou::new(
        expert.speed_noise_std,
        1.0 / (std::f64::consts::TAU * expert.speed_noise_cutoff_hz),
        &mut rng,
    );
    let mut wander = Ou::new(expert.wander_std, expert.wander_tau, &mut rng);

    let mut ego = scenario.initial_ego();
    let mut s_ego = scenario.ego_station;
    let mut lead = LeadState {
        station: s_ego + scenario.lead_gap,
        speed: scenario.lead_speed.at(0.0),
        lateral: 0.0,
    };
    let mut lane = (scenario.ego_offset / w).round() as i64;
    lead.lateral = lane as f64 * w;

    let mut pending: Vec<InjectedEvent> = events.to_vec();
    pending.sort_by(|a, b| a.t.total_cmp(&b.t));
    let mut pending = pending.into_iter().peekable();
    // (start time, from lateral, to lateral)
    let mut lane_shift: Option<(f64, f64, f64)> = None;
    let mut aim_lane = lane as f64 * w;
    let mut out_events = Vec::new();
    let mut records = Vec::new();

    let n_records = (duration / LOG_DT - TIME_EPS).ceil() as usize;
    let n_steps = n_records.saturating_sub(1) * STEPS_PER_TRACE;
    for step in 0..=n_steps {
        let t = step as f64 * SIM_DT;
        let (s, lateral) = road.project(ego.pose.position, s_ego);
        s_ego = s;

        while let Some(e) = pending.peek() {
            let start = match e.kind {
                EventKind::CutIn => e.t,
                EventKind::LaneChange => e.t - 0.5 * expert.lane_change_duration,
            };
            if t + 0.5 * SIM_DT < start {
                break;
            }
            match e.kind {
                EventKind::CutIn => {
                    lead.station = s_ego + 0.4 * (lead.station - s_ego);
                    out_events.push(*e);
                }
                EventKind::LaneChange => {
                    let dir = if lane == 0 { 1.0 } else { -1.0 };
                    lane_shift = Some((start, aim_lane, aim_lane + dir * w));
                }
            }
            pending.next();
        }

        if let Some((start, from, to)) = lane_shift {
            let u = ((t - start) / expert.lane_change_duration).clamp(0.0, 1.0);
            aim_lane = from + (to - from) * 0.5 * (1.0 - (std::f64::consts::PI * u).cos());
            if u >= 1.0 {
                lane_shift = None;
            }
        }

        let now_lane = (lateral / w).round() as i64;
        let record_due = step % STEPS_PER_TRACE == 0;
        if now_lane != lane {
            lane = now_lane;
            lead.lateral = lane as f64 * w;
            // reported at the record where the boundaries jump
            out_events.push(InjectedEvent {
                kind: EventKind::LaneChange,
                t: (t / LOG_DT).ceil() * LOG_DT,
            });
        }

        if record_due {
            let center = lane as f64 * w;
            let fit = |lat: f64| -> Result<[f64; 4]> {
                let c = road
                    .boundary_fit(&ego.pose, s_ego, lat, 3)
                    .ok_or(Error::Singular)?;
                Ok([c[0], c[1], c[2], c[3]])
            };
            let lead_local = ego.pose.to_local(road.point(lead.station, lead.lateral));
            records.push(LogRecord {
                t,
                x: ego.pose.position.x,
                y: ego.pose.position.y,
                vx: ego.speed,
                lane_l: fit(center + 0.5 * w)?,
                lane_r: fit(center - 0.5 * w)?,
                lead: Some(lead_local),
            });
        }
        if step == n_steps {
            break;
        }

        let lookahead = (expert.lookahead_gain * ego.speed).max(expert.lookahead_min);
        let aim = road.point(s_ego + lookahead, aim_lane + wander.step(SIM_DT, &mut rng));
        let steer = pure_pursuit(ego.pose.to_local(aim), expert.wheelbase).unwrap_or(0.0);
        let v_desired =
            scenario.ego_speed + expert.desired_margin + speed_noise.step(SIM_DT, &mut rng);
        let lead_local = ego.pose.to_local(road.point(lead.station, lead.lateral));
        let accel = expert.idm_accel(ego.speed, v_desired, lead_local.x, lead.speed);
        ego = step_vehicle(&ego, steer, accel, SIM_DT, expert.wheelbase).0;
        lead.speed = scenario.lead_speed.at(t + SIM_DT);
        lead.station += lead.speed * SIM_DT;
    }
    out_events.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(ExpertLog {
        records,
        events: out_events,
    })
}

// ------------------------------------------------------------- log CSV

pub const LOG_HEADER: [&str; 15] = [
    "t",
    "X",
    "Y",
    "vx",
    "c0l",
    "c1l",
    "c2l",
    "c3l",
    "c0r",
    "c1r",
    "c2r",
    "c3r",
    "lead_x",
    "lead_y",
    "lead_valid",
];

pub fn write_log<W: Write>(out: W, records: &[LogRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LOG_HEADER)?;
    for r in records {
        let (lx, ly, valid) = match r.lead {
            Some(p) => (p.x, p.y, 1),
            None => (0.0, 0.0, 0),
        };
        let mut row: Vec<String> = [r.t, r.x, r.y, r.vx].iter().map(f64::to_string).collect();
        row.extend(r.lane_l.iter().chain(&r.lane_r).map(f64::to_string));
        row.extend([lx.to_string(), ly.to_string(), valid.to_string()]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log<R: Read>(input: R) -> Result<Vec<LogRecord>> {
    let mut rd = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != LOG_HEADER {
        return Err(Error::format(
            "log",
            format!("header `{}`", header.join(",")),
        ));
    }
    let mut records: Vec<LogRecord> = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let v: Vec<f64> = row
            .iter()
            .map(|s| s.parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::format("log", format!("line {line}: non-numeric field")))?;
        if v.len() != LOG_HEADER.len() {
            return Err(Error::format(
                "log",
                format!("line {line}: {} fields", v.len()),
            ));
        }
        let lead = match v[14] {
            x if x == 1.0 => Some(Vec2::new(v[12], v[13])),
            x if x == 0.0 => None,
            _ => {
                return Err(Error::format(
                    "log",
                    format!("line {line}: lead_valid must be 0 or 1"),
                ))
            }
        };
        let r = LogRecord {
            t: v[0],
            x: v[1],
            y: v[2],
            vx: v[3],
            lane_l: [v[4], v[5], v[6], v[7]],
            lane_r: [v[8], v[9], v[10], v[11]],
            lead,
        };
        if let Some(prev) = records.last() {
            if !(r.t > prev.t) {
                return Err(Error::format(
                    "log",
                    format!("line {line}: time not increasing"),
                ));
            }
        }
        if !(r.lane_l[0] > r.lane_r[0]) {
            return Err(Error::format(
                "log",
                format!("line {line}: left boundary not left of right"),
            ));
        }
        records.push(r);
    }
    if records.is_empty() {
        return Err(Error::Empty("log"));
    }
    Ok(records)
}

// -------------------------------------------------------------- filters

/// Closed time interval `[start, end]`, seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.start - TIME_EPS && t <= self.end + TIME_EPS
    }
}

/// Union of possibly overlapping intervals, sorted.
pub fn merge_intervals(mut xs: Vec<Interval>) -> Vec<Interval> {
    xs.sort_by(|a, b| a.start.total_cmp(&b.start));
    let mut out: Vec<Interval> = Vec::new();
    for iv in xs {
        match out.last_mut() {
            Some(last) if iv.start <= last.end + TIME_EPS => last.end = last.end.max(iv.end),
            _ => out.push(iv),
        }
    }
    out
}

fn drop_in(records: &[LogRecord], intervals: &[Interval]) -> Vec<bool> {
    records
        .iter()
        .map(|r| !intervals.iter().any(|iv| iv.contains(r.t)))
        .collect()
}

/// Removes `±5 s` around every lane re-anchoring.
pub fn remove_lane_changes(records: &[LogRecord]) -> (Vec<LogRecord>, Vec<Interval>) {
    let raw = records
        .windows(2)
        .filter(|w| {
            (w[1].lane_l[0] - w[0].lane_l[0]).abs() > LANE_JUMP_M
                || (w[1].lane_r[0] - w[0].lane_r[0]).abs() > LANE_JUMP_M
        })
        .map(|w| Interval {
            start: w[0].t - LANE_CHANGE_MARGIN_S,
            end: w[1].t + LANE_CHANGE_MARGIN_S,
        })
        .collect();
    let intervals = merge_intervals(raw);
    let keep = drop_in(records, &intervals);
    let kept = records
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(r, _)| r.clone())
        .collect();
    (kept, intervals)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VleadSource {
    Differenced,
    /// First record of a track, copied from the next estimate.
    CopiedNext,
    /// Lone record; `v_lead` set to the ego speed.
    Isolated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeadKinematics {
    pub d_lead: f64,
    pub v_lead: f64,
    pub source: VleadSource,
}

fn consecutive(a: &LogRecord, b: &LogRecord) -> bool {
    b.t - a.t <= 1.5 * LOG_DT
}

/// Lead distance and speed by differencing relative positions. `None` where
/// the lead is absent.
pub fn lead_kinematics(records: &[LogRecord]) -> Vec<Option<LeadKinematics>> {
    let n = records.len();
    let mut out: Vec<Option<LeadKinematics>> = vec![None; n];
    for i in 0..n {
        let Some(p) = records[i].lead else { continue };
        let prev = (i > 0 && consecutive(&records[i - 1], &records[i]))
            .then(|| records[i - 1].lead)
            .flatten();
        if let Some(q) = prev {
            let dt = records[i].t - records[i - 1].t;
            out[i] = Some(LeadKinematics {
                d_lead: p.x,
                v_lead: records[i].vx + (p.x - q.x) / dt,
                source: VleadSource::Differenced,
            });
        }
    }
    for i in 0..n {
        let Some(p) = records[i].lead else { continue };
        if out[i].is_some() {
            continue;
        }
        let next = (i + 1 < n && consecutive(&records[i], &records[i + 1]))
            .then(|| out[i + 1])
            .flatten();
        out[i] = Some(match next {
            Some(k) => LeadKinematics {
                d_lead: p.x,
                v_lead: k.v_lead,
                source: VleadSource::CopiedNext,
            },
            None => LeadKinematics {
                d_lead: p.x,
                v_lead: records[i].vx,
                source: VleadSource::Isolated,
            },
        });
    }
    out
}

/// `Δv_lead / Δt` at each record with a differenced predecessor.
pub fn implied_lead_accel(
    records: &[LogRecord],
    kin: &[Option<LeadKinematics>],
) -> Vec<Option<f64>> {
    let mut out = vec![None; records.len()];
    for i in 1..records.len() {
        if let (Some(a), Some(b)) = (kin[i - 1], kin[i]) {
            if consecutive(&records[i - 1], &records[i]) {
                out[i] = Some((b.v_lead - a.v_lead) / (records[i].t - records[i - 1].t));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CutinFilter {
    pub records: Vec<LogRecord>,
    pub kinematics: Vec<LeadKinematics>,
    pub intervals: Vec<Interval>,
    pub removed_cutin: usize,
    pub removed_no_lead: usize,
}

/// Removes `±3 s` around infeasible lead accelerations and every record
/// without a lead.
pub fn filter_cutins(records: &[LogRecord], kin: &[Option<LeadKinematics>]) -> CutinFilter {
    let raw = implied_lead_accel(records, kin)
        .iter()
        .zip(records)
        .filter(|(a, _)| a.is_some_and(|a| a.abs() > CUTIN_ACCEL))
        .map(|(_, r)| Interval {
            start: r.t - CUTIN_MARGIN_S,
            end: r.t + CUTIN_MARGIN_S,
        })
        .collect();
    let intervals = merge_intervals(raw);
    let keep = drop_in(records, &intervals);
    let mut out = CutinFilter {
        records: Vec::new(),
        kinematics: Vec::new(),
        intervals,
        removed_cutin: 0,
        removed_no_lead: 0,
    };
    for ((r, k), keep) in records.iter().zip(kin).zip(keep) {
        match (keep, k) {
            (false, _) => out.removed_cutin += 1,
            (true, None) => out.removed_no_lead += 1,
            (true, Some(k)) => {
                out.records.push(r.clone());
                out.kinematics.push(*k);
            }
        }
    }
    out
}

// ------------------------------------------------------------ maneuvers

#[derive(Debug, Clone, PartialEq)]
pub struct Maneuver {
    pub id: usize,
    pub source: String,
    pub records: Vec<LogRecord>,
    pub kinematics: Vec<LeadKinematics>,
}

impl Maneuver {
    pub fn duration(&self) -> f64 {
        self.records.len() as f64 * LOG_DT
    }
}

/// Maximal contiguous runs of at least 30 s; returns the kept maneuvers and
/// the number of runs discarded as too short.
pub fn segment_maneuvers(
    records: &[LogRecord],
    kin: &[LeadKinematics],
    source: &str,
    first_id: usize,
) -> (Vec<Maneuver>, usize) {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for i in 1..=records.len() {
        if i == records.len() || !consecutive(&records[i - 1], &records[i]) {
            if i > start {
                runs.push((start, i));
            }
            start = i;
        }
    }
    let mut out = Vec::new();
    let mut discarded = 0;
    for (a, b) in runs {
        if ((b - a) as f64 * LOG_DT) < MIN_MANEUVER_S - TIME_EPS {
            discarded += 1;
            continue;
        }
        out.push(Maneuver {
            id: first_id + out.len(),
            source: source.to_string(),
            records: records[a..b].to_vec(),
            kinematics: kin[a..b].to_vec(),
        });
    }
    (out, discarded)
}

/// Travel direction at each record from neighboring positions.
pub fn record_headings(records: &[LogRecord]) -> Vec<f64> {
    let p: Vec<Vec2> = records.iter().map(LogRecord::position).collect();
    let n = p.len();
    (0..n)
        .map(|i| {
            let d = if n < 2 {
                Vec2::new(1.0, 0.0)
            } else if n == 2 {
                p[1] - p[0]
            } else if i == 0 {
                p[0] * -3.0 + p[1] * 4.0 - p[2]
            } else if i == n - 1 {
                p[n - 1] * 3.0 - p[n - 2] * 4.0 + p[n - 3]
            } else {
                p[i + 1] - p[i - 1]
            };
            d.y.atan2(d.x)
        })
        .collect()
}

/// Least-squares quadratic through a cubic sampled every 5 m over 0-60 m.
pub fn quadratic_refit(cubic: &[f64; 4]) -> [f64; 3] {
    let xs: Vec<f64> = (0..=12).map(|k| 5.0 * k as f64).collect();
    let ys: Vec<f64> = xs.iter().map(|x| polyval(cubic, *x)).collect();
    let c = polyfit(&xs, &ys, 2).expect("fixed well-posed design");
    [c[0], c[1], c[2]]
}

pub fn record_features(r: &LogRecord, k: &LeadKinematics) -> FeatureVector {
    let l = quadratic_refit(&r.lane_l);
    let rr = quadratic_refit(&r.lane_r);
    FeatureVector {
        c0l: l[0],
        c1l: l[1],
        c2l: l[2],
        c0r: rr[0],
        c1r: rr[1],
        c2r: rr[2],
        v_x: r.vx,
        v_lead: k.v_lead,
        d_lead: k.d_lead,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperienceTuple {
    pub features: FeatureVector,
    pub target: CoefficientVector,
    /// Positions at `j * horizon / 20`, `j = 1..=20`, anchor ego frame.
    pub future: Vec<TimedPoint>,
}

fn interpolate(records: &[LogRecord], t: f64) -> Vec2 {
    let i = records
        .partition_point(|r| r.t <= t)
        .clamp(1, records.len() - 1);
    let (a, b) = (&records[i - 1], &records[i]);
    let u = (t - a.t) / (b.t - a.t);
    a.position() + (b.position() - a.position()) * u
}

/// One tuple per record with a full horizon of future inside the maneuver.
pub fn extract_tuples(m: &Maneuver, horizon_s: f64) -> Result<Vec<ExperienceTuple>> {
    let knots = KnotVector::cubic_bezier();
    let recs = &m.records;
    let Some(last) = recs.last() else {
        return Ok(Vec::new());
    };
    let headings = record_headings(recs);
    let mut out = Vec::new();
    for (i, r) in recs.iter().enumerate() {
        if r.t + horizon_s > last.t + TIME_EPS {
            break;
        }
        let frame = Pose::new(r.position(), headings[i]);
        let future: Vec<TimedPoint> = (1..=FUTURE_POINTS)
            .map(|j| {
                let dt = horizon_s * j as f64 / FUTURE_POINTS as f64;
                TimedPoint {
                    t: dt,
                    position: frame.to_local(interpolate(recs, r.t + dt)),
                }
            })
            .collect();
        let target = CoefficientVector::from_spline(&fit_spline(&future, horizon_s, &knots)?)?;
        out.push(ExperienceTuple {
            features: record_features(r, &m.kinematics[i]),
            target,
            future,
        });
    }
    Ok(out)
}

// ------------------------------------------------------------ tuple CSV

pub fn tuple_header() -> Vec<String> {
    let mut h: Vec<String> = [
        "c0l", "c1l", "c2l", "c0r", "c1r", "c2r", "vx", "vlead", "dlead", "a1x", "a1y", "a2x",
        "a2y", "a3x", "a3y",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for j in 1..=FUTURE_POINTS {
        h.push(format!("x{j}"));
        h.push(format!("y{j}"));
    }
    h
}

/// Writes tuples after a `# horizon_s = H` comment line.
pub fn write_tuples<W: Write>(
    mut out: W,
    tuples: &[ExperienceTuple],
    horizon_s: f64,
) -> Result<()> {
    writeln!(out, "# horizon_s = {horizon_s}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(tuple_header())?;
    for tp in tuples {
        let mut row: Vec<String> = tp
            .features
            .to_array()
            .iter()
            .chain(&tp.target.0)
            .map(f64::to_string)
            .collect();
        for p in &tp.future {
            row.push(p.position.x.to_string());
            row.push(p.position.y.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Returns the tuples and the horizon they were cut with.
pub fn read_tuples<R: Read>(mut input: R) -> Result<(Vec<ExperienceTuple>, f64)> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    let horizon_s = text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix('#'))
        .and_then(|l| l.split_once('='))
        .filter(|(k, _)| k.trim() == "horizon_s")
        .map(|(_, v)| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::format("tuples", format!("horizon `{}`", v.trim())))
        })
        .transpose()?
        .unwrap_or(crate::sim::DEFAULT_HORIZON_S);
    let mut rd = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != tuple_header() {
        return Err(Error::format("tuples", "unexpected header"));
    }
    let mut out = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let row = row?;
        let v: Vec<f64> = row
            .iter()
            .map(|s| s.parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::format("tuples", format!("row {}: non-numeric field", i + 1)))?;
        if v.len() != 15 + 2 * FUTURE_POINTS {
            return Err(Error::format(
                "tuples",
                format!("row {}: {} fields", i + 1, v.len()),
            ));
        }
        let features = FeatureVector::from_array(std::array::from_fn(|k| v[k]));
        let target = CoefficientVector(std::array::from_fn(|k| v[9 + k]));
        let future = (0..FUTURE_POINTS)
            .map(|j| {
                TimedPoint::new(
                    horizon_s * (j + 1) as f64 / FUTURE_POINTS as f64,
                    v[15 + 2 * j],
                    v[16 + 2 * j],
                )
            })
            .collect();
        out.push(ExperienceTuple {
            features,
            target,
            future,
        });
    }
    Ok((out, horizon_s))
}

// ------------------------------------------------------------- pipeline

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineReport {
    pub records_in: usize,
    pub lane_change_intervals: Vec<Interval>,
    pub removed_lane_change: usize,
    pub cutin_intervals: Vec<Interval>,
    pub removed_cutin: usize,
    pub removed_no_lead: usize,
    pub maneuvers: usize,
    pub discarded_short: usize,
    pub tuples: usize,
}

impl PipelineReport {
    pub fn removed_total(&self) -> usize {
        self.removed_lane_change + self.removed_cutin + self.removed_no_lead
    }

    pub fn to_text(&self) -> String {
        let ivs = |xs: &[Interval]| {
            xs.iter()
                .map(|iv| format!("[{:.1}, {:.1}]", iv.start, iv.end))
                .collect::<Vec<_>>()
                .join(" ")
        };
        format!(
            "records_in = {}\nlane_change_intervals = {}\nlane_change_removed = {}\n\
             cutin_intervals = {}\ncutin_removed = {}\nno_lead_removed = {}\n\
             maneuvers = {}\nshort_discarded = {}\ntuples = {}\nintervals_lane_change = {}\nintervals_cutin = {}\n",
            self.records_in,
            self.lane_change_intervals.len(),
            self.removed_lane_change,
            self.cutin_intervals.len(),
            self.removed_cutin,
            self.removed_no_lead,
            self.maneuvers,
            self.discarded_short,
            self.tuples,
            ivs(&self.lane_change_intervals),
            ivs(&self.cutin_intervals),
        )
    }
}

/// Filtering and segmentation; maneuver ids start at `first_id`.
pub fn process_records(
    records: &[LogRecord],
    source: &str,
    first_id: usize,
) -> (Vec<Maneuver>, PipelineReport) {
    let (no_lc, lc) = remove_lane_changes(records);
    let kin = lead_kinematics(&no_lc);
    let cut = filter_cutins(&no_lc, &kin);
    let (maneuvers, discarded) = segment_maneuvers(&cut.records, &cut.kinematics, source, first_id);
    let report = PipelineReport {
        records_in: records.len(),
        removed_lane_change: records.len() - no_lc.len(),
        lane_change_intervals: lc,
        cutin_intervals: cut.intervals,
        removed_cutin: cut.removed_cutin,
        removed_no_lead: cut.removed_no_lead,
        maneuvers: maneuvers.len(),
        discarded_short: discarded,
        tuples: 0,
    };
    (maneuvers, report)
}

/// Full pipeline from raw records to tuples.
pub fn process_log(
    records: &[LogRecord],
    horizon_s: f64,
) -> Result<(Vec<Maneuver>, Vec<ExperienceTuple>, PipelineReport)> {
    if records.is_empty() {
        return Err(Error::Empty("log"));
    }
    let (maneuvers, mut report) = process_records(records, "log", 0);
    let mut tuples = Vec::new();
    for m in &maneuvers {
        tuples.extend(extract_tuples(m, horizon_s)?);
    }
    report.tuples = tuples.len();
    Ok((maneuvers, tuples, report))
}

/// Tuples from every maneuver except `held_id`, plus the held one.
pub fn leave_one_out_split(
    maneuvers: &[Maneuver],
    held_id: usize,
    horizon_s: f64,
) -> Result<(Vec<ExperienceTuple>, Maneuver)> {
    let held = maneuvers
        .iter()
        .find(|m| m.id == held_id)
        .ok_or(Error::UnknownManeuver(held_id))?
        .clone();
    let mut train = Vec::new();
    for m in maneuvers.iter().filter(|m| m.id != held_id) {
        train.extend(extract_tuples(m, horizon_s)?);
    }
    Ok((train, held))
}
