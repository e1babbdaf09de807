//! Browser bindings: a barrier explorer for hand-placed plans and a small
//! BC vs SAFE lab that trains both policies and drives them on an arc.

use safeil::experiment::{build_corpus, train_pair, training_set, ExperimentConfig};
use safeil::losses::{barrier_terms, BarrierArguments, BarrierConfig};
use safeil::policy::{CoefficientVector, FeatureVector, PolicyNetwork};
use safeil::sim::{
    flag_name, run_closed_loop, RoadGeometry, ScenarioConfig, SpeedLaw, Turn, DEFAULT_HORIZON_S,
};
use safeil::splines::KnotVector;
use safeil::tracker::TrackerConfig;
use wasm_bindgen::prelude::*;

const LANE_WIDTH: f64 = 3.5;
const SAMPLES: usize = 40;

fn js_err(e: safeil::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Barrier values of a plan in the ego frame.
#[wasm_bindgen]
pub struct PlanView {
    left: f64,
    right: f64,
    collision: f64,
    lane_ok: bool,
    curve: Vec<f64>,
    left_line: Vec<f64>,
    right_line: Vec<f64>,
    lead_x: Vec<f64>,
}

#[wasm_bindgen]
impl PlanView {
    pub fn left(&self) -> f64 {
        self.left
    }
    pub fn right(&self) -> f64 {
        self.right
    }
    pub fn collision(&self) -> f64 {
        self.collision
    }
    pub fn total(&self) -> f64 {
        self.left + self.right + self.collision
    }
    #[wasm_bindgen(js_name = laneOk)]
    pub fn lane_ok(&self) -> bool {
        self.lane_ok
    }
    /// Interleaved x, y samples of the plan.
    pub fn curve(&self) -> Vec<f64> {
        self.curve.clone()
    }
    #[wasm_bindgen(js_name = leftLine)]
    pub fn left_line(&self) -> Vec<f64> {
        self.left_line.clone()
    }
    #[wasm_bindgen(js_name = rightLine)]
    pub fn right_line(&self) -> Vec<f64> {
        self.right_line.clone()
    }
    /// Extrapolated lead position at the three control point times.
    #[wasm_bindgen(js_name = leadX)]
    pub fn lead_x(&self) -> Vec<f64> {
        self.lead_x.clone()
    }
}

/// Evaluates the barrier for control points `points = [x1, y1, x2, y2, x3, y3]`
/// on a lane of the given curvature, with the ego `offset` meters left of its
/// center.
#[wasm_bindgen(js_name = evaluatePlan)]
pub fn evaluate_plan(
    points: &[f64],
    curvature: f64,
    offset: f64,
    v_ego: f64,
    v_lead: f64,
    gap: f64,
) -> Result<PlanView, JsError> {
    let a: [f64; 6] = points
        .try_into()
        .map_err(|_| JsError::new("expected six coordinates"))?;
    let a = CoefficientVector(a);
    let half = 0.5 * LANE_WIDTH;
    let f = FeatureVector {
        c0l: half - offset,
        c1l: 0.0,
        c2l: 0.5 * curvature,
        c0r: -half - offset,
        c1r: 0.0,
        c2r: 0.5 * curvature,
        v_x: v_ego,
        v_lead,
        d_lead: gap,
    };
    let cfg = BarrierConfig::new(DEFAULT_HORIZON_S);
    let terms = barrier_terms(&f, &a, &cfg);
    let spline = a
        .to_spline(cfg.horizon_s, &KnotVector::cubic_bezier())
        .map_err(js_err)?;
    let mut curve = Vec::with_capacity(2 * (SAMPLES + 1));
    for k in 0..=SAMPLES {
        let p = spline.at_time(cfg.horizon_s * k as f64 / SAMPLES as f64);
        curve.extend([p.x, p.y]);
    }
    let reach = curve.iter().step_by(2).fold(gap, |m, x| m.max(*x)) + 10.0;
    let line = |side: fn(&FeatureVector, f64) -> f64| -> Vec<f64> {
        (0..=SAMPLES)
            .flat_map(|k| {
                let x = reach * k as f64 / SAMPLES as f64;
                [x, side(&f, x)]
            })
            .collect()
    };
    Ok(PlanView {
        left: terms.left,
        right: terms.right,
        collision: terms.collision,
        lane_ok: BarrierArguments::new(&f, &a, &cfg).lane_satisfied(),
        curve,
        left_line: line(FeatureVector::left_boundary),
        right_line: line(FeatureVector::right_boundary),
        lead_x: cfg
            .control_times()
            .iter()
            .map(|t| gap + v_lead * t)
            .collect(),
    })
}

/// Closed-loop run of one policy.
#[wasm_bindgen]
pub struct Drive {
    completion: f64,
    flag: String,
    flag_time: f64,
    xy: Vec<f64>,
    offset: Vec<f64>,
    speed: Vec<f64>,
}

#[wasm_bindgen]
impl Drive {
    pub fn completion(&self) -> f64 {
        self.completion
    }
    pub fn flag(&self) -> String {
        self.flag.clone()
    }
    /// NaN when the drive was not flagged.
    #[wasm_bindgen(js_name = flagTime)]
    pub fn flag_time(&self) -> f64 {
        self.flag_time
    }
    /// Interleaved X, Y world positions at 5 Hz.
    pub fn xy(&self) -> Vec<f64> {
        self.xy.clone()
    }
    pub fn offset(&self) -> Vec<f64> {
        self.offset.clone()
    }
    pub fn speed(&self) -> Vec<f64> {
        self.speed.clone()
    }
}

/// A BC and a SAFE policy trained on the same synthetic corpus.
#[wasm_bindgen]
pub struct Lab {
    bc: PolicyNetwork,
    safe: PolicyNetwork,
    tuples: usize,
    expert: safeil::datapipe::ExpertConfig,
    tracker: TrackerConfig,
}

#[wasm_bindgen]
impl Lab {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, drives: u32, epochs: u32) -> Result<Lab, JsError> {
        let cfg = ExperimentConfig {
            seed: seed.into(),
            drives: drives as usize,
            epochs: epochs as usize,
            ..ExperimentConfig::default()
        };
        let corpus = build_corpus(&cfg).map_err(js_err)?;
        let (tuples, _) = training_set(&corpus, &cfg).map_err(js_err)?;
        let pair = train_pair(&tuples, &cfg).map_err(js_err)?;
        Ok(Lab {
            bc: pair.bc.net,
            safe: pair.safe.net,
            tuples: tuples.len(),
            expert: cfg.expert,
            tracker: cfg.tracker,
        })
    }

    pub fn tuples(&self) -> usize {
        self.tuples
    }

    /// Drives `policy` ("bc" or "safe") for up to 1 km on an arc behind a
    /// lead at constant `lead_speed`, starting in steady following.
    pub fn drive(
        &self,
        policy: &str,
        radius: f64,
        left: bool,
        lead_speed: f64,
    ) -> Result<Drive, JsError> {
        let net = match policy {
            "bc" => &self.bc,
            "safe" => &self.safe,
            _ => return Err(JsError::new("policy must be bc or safe")),
        };
        let scenario = ScenarioConfig {
            road: RoadGeometry::arc(
                radius,
                if left { Turn::Left } else { Turn::Right },
                1000.0,
                LANE_WIDTH,
            ),
            ego_speed: lead_speed,
            lead_gap: self
                .expert
                .equilibrium_gap(lead_speed, lead_speed + self.expert.desired_margin),
            lead_speed: SpeedLaw::Constant(lead_speed),
            duration: 120.0,
            ..ScenarioConfig::default()
        };
        let report = run_closed_loop(&scenario, &mut net.clone(), &self.tracker).map_err(js_err)?;
        Ok(Drive {
            completion: report.completion,
            flag: flag_name(report.flag),
            flag_time: report.flag_time.unwrap_or(f64::NAN),
            xy: report.trace.iter().flat_map(|r| [r.x, r.y]).collect(),
            offset: report.trace.iter().map(|r| r.offset).collect(),
            speed: report.trace.iter().map(|r| r.vx).collect(),
        })
    }
}
