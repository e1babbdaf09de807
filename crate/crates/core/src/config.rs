//! Plain `key = value` scenario files.
//!
//! ```text
//! # 500 m arc with a slowly varying lead
//! road.kind = arc
//! road.radius = 500
//! road.turn = left
//! lead.speed = 28
//! lead.variation = 1.5
//! inject.cutins = 3
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::datapipe::{smooth_speed_profile, Injections};
use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::sim::{RoadGeometry, RoadKind, ScenarioConfig, SpeedLaw, Turn};

/// A scenario plus the generator-only settings that ride along in the file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioFile {
    pub scenario: ScenarioConfig,
    pub inject: Injections,
}

const KEYS: &[&str] = &[
    "road.kind",
    "road.radius",
    "road.turn",
    "road.length",
    "road.lane_width",
    "ego.speed",
    "ego.station",
    "ego.offset",
    "ego.heading",
    "lead.gap",
    "lead.speed",
    "lead.variation",
    "lead.profile",
    "seed",
    "duration",
    "horizon",
    "vehicle.track",
    "vehicle.wheelbase",
    "pid.kp",
    "pid.ki",
    "pid.kd",
    "pp.kv",
    "pp.lmin",
    "inject.cutins",
    "inject.lane_changes",
];

const EXPERIMENT_KEYS: &[&str] = &[
    "seed",
    "horizon",
    "train.max_tuples",
    "train.epochs",
    "train.batch_size",
    "train.learning_rate",
    "corpus.drives",
    "corpus.drive_s",
    "corpus.lead_variation",
    "safety.scenarios",
];

/// Raw `key -> (line, value)` pairs for scenario files.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, (usize, String)>> {
    parse_pairs_with(text, KEYS)
}

fn parse_pairs_with(text: &str, keys: &[&str]) -> Result<BTreeMap<String, (usize, String)>> {
    let mut out = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(line, format!("line {}: expected `key = value`", idx + 1))
        })?;
        let key = k.trim().to_string();
        if !keys.contains(&key.as_str()) {
            return Err(Error::config(key, format!("line {}: unknown key", idx + 1)));
        }
        if out
            .insert(key.clone(), (idx + 1, v.trim().to_string()))
            .is_some()
        {
            return Err(Error::config(
                key,
                format!("line {}: duplicate key", idx + 1),
            ));
        }
    }
    Ok(out)
}

struct Pairs(BTreeMap<String, (usize, String)>);

impl Pairs {
    fn str(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(|(_, v)| v.as_str())
    }

    fn num(&self, key: &str, default: f64) -> Result<f64> {
        match self.0.get(key) {
            None => Ok(default),
            Some((line, v)) => match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(Error::config(
                    key,
                    format!("line {line}: `{v}` is not a finite number"),
                )),
            },
        }
    }

    fn int(&self, key: &str, default: u64) -> Result<u64> {
        match self.0.get(key) {
            None => Ok(default),
            Some((line, v)) => v.parse::<u64>().map_err(|_| {
                Error::config(
                    key,
                    format!("line {line}: `{v}` is not a non-negative integer"),
                )
            }),
        }
    }
}

pub fn parse_scenario(text: &str) -> Result<ScenarioFile> {
    let p = Pairs(parse_pairs(text)?);
    let d = ScenarioConfig::default();

    let lane_width = p.num("road.lane_width", d.road.lane_width)?;
    let length = p.num("road.length", d.road.length)?;
    let kind = match p.str("road.kind").unwrap_or("straight") {
        "straight" => RoadKind::Straight,
        "arc" => {
            let turn = match p.str("road.turn").unwrap_or("left") {
                "left" => Turn::Left,
                "right" => Turn::Right,
                other => {
                    return Err(Error::config(
                        "road.turn",
                        format!("`{other}` is not left or right"),
                    ))
                }
            };
            RoadKind::Arc {
                radius: p.num("road.radius", 500.0)?,
                turn,
            }
        }
        other => {
            return Err(Error::config(
                "road.kind",
                format!("`{other}` is not straight or arc"),
            ))
        }
    };
    let road = RoadGeometry {
        kind,
        length,
        lane_width,
    };

    let seed = p.int("seed", d.seed)?;
    let duration = p.num("duration", d.duration)?;
    let lead_base = p.num("lead.speed", 30.0)?;
    let lead_speed = match (p.str("lead.profile"), p.num("lead.variation", 0.0)?) {
        (Some(_), v) if v != 0.0 => {
            return Err(Error::config(
                "lead.profile",
                "cannot be combined with lead.variation",
            ));
        }
        (Some(text), _) => SpeedLaw::Profile(parse_profile(text)?),
        (None, v) if v < 0.0 => {
            return Err(Error::config("lead.variation", "must be non-negative"))
        }
        (None, v) if v > 0.0 => smooth_speed_profile(lead_base, v, duration, seed),
        (None, _) => SpeedLaw::Constant(lead_base),
    };

    let mut tracker = d.tracker.clone();
    tracker.kp = p.num("pid.kp", tracker.kp)?;
    tracker.ki = p.num("pid.ki", tracker.ki)?;
    tracker.kd = p.num("pid.kd", tracker.kd)?;
    tracker.kv = p.num("pp.kv", tracker.kv)?;
    tracker.l_min = p.num("pp.lmin", tracker.l_min)?;
    tracker.wheelbase = p.num("vehicle.wheelbase", tracker.wheelbase)?;
    for (key, v) in [
        ("pid.kp", tracker.kp),
        ("pid.ki", tracker.ki),
        ("pid.kd", tracker.kd),
        ("pp.kv", tracker.kv),
    ] {
        if v < 0.0 {
            return Err(Error::config(key, "gain must be non-negative"));
        }
    }
    if !(tracker.l_min > 0.0) {
        return Err(Error::config("pp.lmin", "must be positive"));
    }
    if !(tracker.wheelbase > 0.0) {
        return Err(Error::config("vehicle.wheelbase", "must be positive"));
    }

    let scenario = ScenarioConfig {
        road,
        ego_speed: p.num("ego.speed", d.ego_speed)?,
        ego_station: p.num("ego.station", d.ego_station)?,
        ego_offset: p.num("ego.offset", d.ego_offset)?,
        ego_heading: p.num("ego.heading", d.ego_heading)?,
        lead_gap: p.num("lead.gap", d.lead_gap)?,
        lead_speed,
        seed,
        duration,
        track_width: p.num("vehicle.track", d.track_width)?,
        horizon_s: p.num("horizon", d.horizon_s)?,
        tracker,
    };
    scenario.validate().map_err(|e| match e {
        Error::InvalidScenario(msg) => Error::config(blame(&msg), msg),
        other => other,
    })?;

    let inject = Injections {
        cutins: p.int("inject.cutins", 0)? as usize,
        lane_changes: p.int("inject.lane_changes", 0)? as usize,
    };
    Ok(ScenarioFile { scenario, inject })
}

/// Best guess at which key a validation message is about.
fn blame(msg: &str) -> &'static str {
    if msg.contains("radius") {
        "road.radius"
    } else if msg.contains("lane width") {
        "road.lane_width"
    } else if msg.contains("road length") {
        "road.length"
    } else if msg.contains("gap") {
        "lead.gap"
    } else if msg.contains("lead speed") {
        "lead.speed"
    } else if msg.contains("ego speed") {
        "ego.speed"
    } else if msg.contains("track") {
        "vehicle.track"
    } else {
        "duration"
    }
}

/// `t:v, t:v, ...`
fn parse_profile(text: &str) -> Result<Vec<(f64, f64)>> {
    text.split(',')
        .map(|item| {
            let (t, v) = item.split_once(':').ok_or_else(|| {
                Error::config("lead.profile", format!("`{}` is not `t:v`", item.trim()))
            })?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| {
                        Error::config("lead.profile", format!("`{}` is not a number", s.trim()))
                    })
            };
            Ok((parse(t)?, parse(v)?))
        })
        .collect()
}

pub fn load_scenario(path: &Path) -> Result<ScenarioFile> {
    parse_scenario(&std::fs::read_to_string(path)?)
}

/// Experiment settings; absent keys keep the defaults.
///
/// ```text
/// seed = 4
/// train.max_tuples = 150
/// safety.scenarios = 10
/// ```
pub fn parse_experiment(text: &str) -> Result<ExperimentConfig> {
    let p = Pairs(parse_pairs_with(text, EXPERIMENT_KEYS)?);
    let d = ExperimentConfig::default();
    let cfg = ExperimentConfig {
        seed: p.int("seed", d.seed)?,
        horizon_s: p.num("horizon", d.horizon_s)?,
        max_train_tuples: p.int("train.max_tuples", d.max_train_tuples as u64)? as usize,
        epochs: p.int("train.epochs", d.epochs as u64)? as usize,
        batch_size: p.int("train.batch_size", d.batch_size as u64)? as usize,
        learning_rate: p.num("train.learning_rate", d.learning_rate)?,
        drives: p.int("corpus.drives", d.drives as u64)? as usize,
        drive_s: p.num("corpus.drive_s", d.drive_s)?,
        lead_variation: p.num("corpus.lead_variation", d.lead_variation)?,
        safety_scenarios: p.int("safety.scenarios", d.safety_scenarios as u64)? as usize,
        ..d
    };
    let positive = [
        ("horizon", cfg.horizon_s),
        ("train.max_tuples", cfg.max_train_tuples as f64),
        ("train.epochs", cfg.epochs as f64),
        ("train.batch_size", cfg.batch_size as f64),
        ("train.learning_rate", cfg.learning_rate),
        ("safety.scenarios", cfg.safety_scenarios as f64),
    ];
    if let Some((key, _)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
        return Err(Error::config(*key, "must be positive"));
    }
    // maneuvers shorter than 30 s are discarded by the pipeline
    if cfg.drive_s < 30.0 {
        return Err(Error::config("corpus.drive_s", "must be at least 30"));
    }
    if cfg.lead_variation < 0.0 {
        return Err(Error::config(
            "corpus.lead_variation",
            "must be non-negative",
        ));
    }
    Ok(cfg)
}

pub fn load_experiment(path: &Path) -> Result<ExperimentConfig> {
    parse_experiment(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        let f = parse_scenario("# nothing\n\n").unwrap();
        assert_eq!(
            f.scenario,
            ScenarioConfig {
                lead_speed: SpeedLaw::Constant(30.0),
                ..Default::default()
            }
        );
        assert_eq!(f.inject, Injections::default());
    }

    #[test]
    fn full_file() {
        let text = "road.kind = arc\nroad.radius = 500 # m\nroad.turn = right\nroad.length=1000\n\
                    lead.profile = 0:25, 10:28\nseed = 7\npid.kp = 1.2\ninject.cutins = 3\n";
        let f = parse_scenario(text).unwrap();
        assert_eq!(
            f.scenario.road.kind,
            RoadKind::Arc {
                radius: 500.0,
                turn: Turn::Right
            }
        );
        assert_eq!(
            f.scenario.lead_speed,
            SpeedLaw::Profile(vec![(0.0, 25.0), (10.0, 28.0)])
        );
        assert_eq!(f.scenario.seed, 7);
        assert_eq!(f.scenario.tracker.kp, 1.2);
        assert_eq!(f.inject.cutins, 3);
    }

    fn key_of(text: &str) -> String {
        match parse_scenario(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(key_of("road.wobble = 3"), "road.wobble");
        assert_eq!(key_of("ego.speed = fast"), "ego.speed");
        assert_eq!(key_of("road.kind = arc\nroad.radius = 40"), "road.radius");
        assert_eq!(key_of("lead.gap = -5"), "lead.gap");
        assert_eq!(key_of("seed = 1\nseed = 2"), "seed");
        assert_eq!(key_of("road.kind = spiral"), "road.kind");
        assert_eq!(key_of("lead.profile = 0:25, 10"), "lead.profile");
        assert_eq!(key_of("pid.kp = -1"), "pid.kp");
    }

    #[test]
    fn experiment_file() {
        let cfg =
            parse_experiment("seed = 4\ntrain.epochs = 10\ncorpus.lead_variation = 0").unwrap();
        assert_eq!(
            cfg,
            ExperimentConfig {
                seed: 4,
                epochs: 10,
                lead_variation: 0.0,
                ..Default::default()
            }
        );
        assert_eq!(parse_experiment("").unwrap(), ExperimentConfig::default());
        for (text, key) in [
            ("train.epochs = 0", "train.epochs"),
            ("road.kind = arc", "road.kind"),
            ("corpus.drive_s = 10", "corpus.drive_s"),
            ("train.learning_rate = -1", "train.learning_rate"),
        ] {
            match parse_experiment(text) {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn variation_builds_seeded_profile() {
        let a = parse_scenario("lead.variation = 2\nseed = 3").unwrap();
        let b = parse_scenario("lead.variation = 2\nseed = 3").unwrap();
        let c = parse_scenario("lead.variation = 2\nseed = 4").unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(matches!(a.scenario.lead_speed, SpeedLaw::Profile(_)));
    }
}
