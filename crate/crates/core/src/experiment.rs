//! End-to-end experiments: expert corpus, leave-one-out training of both
//! modes, held-out replay and the arc safety benchmark.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datapipe::{
    generate_expert_log, leave_one_out_split, process_records, smooth_speed_profile,
    ExperienceTuple, ExpertConfig, Maneuver, PipelineReport,
};
use crate::error::{Error, Result};
use crate::policy::PolicyNetwork;
use crate::sim::{
    flag_name, paired_csv, replay_heldout, run_closed_loop, EvalReport, FlagKind, HeldoutReplay,
    PairedRow, RoadGeometry, ScenarioConfig, SpeedLaw, Turn, DEFAULT_HORIZON_S,
};
use crate::svg;
use crate::tracker::TrackerConfig;
use crate::training::{
    checkpoint_meta, evaluate_offline, history_csv, train, Mode, OfflineMetrics, TrainConfig,
    TrainOutcome,
};

/// Speed of the held-out maneuver, m/s (115 km/h).
pub const HELD_SPEED: f64 = 115.0 / 3.6;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub horizon_s: f64,
    /// Upper bound on the training set size after leave-one-out.
    pub max_train_tuples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub expert: ExpertConfig,
    /// Length of each logged drive, seconds.
    pub drive_s: f64,
    /// Number of training drives besides the held-out one.
    pub drives: usize,
    /// Amplitude of the lead speed variation in training drives, m/s.
    pub lead_variation: f64,
    pub safety_scenarios: usize,
    pub tracker: TrackerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            horizon_s: DEFAULT_HORIZON_S,
            max_train_tuples: 150,
            epochs: 2000,
            batch_size: 32,
            learning_rate: 1e-3,
            expert: ExpertConfig::default(),
            drive_s: 40.0,
            drives: 30,
            lead_variation: 1.5,
            safety_scenarios: 10,
            tracker: TrackerConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn train_config(&self, mode: Mode) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            ..TrainConfig::new(mode, self.horizon_s, self.seed)
        }
    }
}

/// One logged drive of the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct DriveSpec {
    pub road: RoadGeometry,
    pub ego_speed: f64,
    pub lead_speed: f64,
    pub lead_gap: f64,
}

/// The held-out maneuver: steady following at 115 km/h on a 500 m left arc.
pub fn held_drive(expert: &ExpertConfig) -> DriveSpec {
    DriveSpec {
        road: RoadGeometry::arc(500.0, Turn::Left, 5000.0, 3.5),
        ego_speed: HELD_SPEED,
        lead_speed: HELD_SPEED,
        lead_gap: expert.equilibrium_gap(HELD_SPEED, HELD_SPEED + expert.desired_margin),
    }
}

/// Seeded training drives on straights and arcs of 500-1500 m either way,
/// each starting near steady following behind a lead at 25-36 m/s.
pub fn training_drives(n: usize, seed: u64, expert: &ExpertConfig) -> Vec<DriveSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd21e_5eed);
    (0..n)
        .map(|k| {
            let road = if k % 4 == 0 {
                RoadGeometry::straight(5000.0, 3.5)
            } else {
                let turn = if rng.gen_bool(0.5) {
                    Turn::Left
                } else {
                    Turn::Right
                };
                RoadGeometry::arc(rng.gen_range(500.0..1500.0), turn, 5000.0, 3.5)
            };
            let v = rng.gen_range(25.0..36.0);
            let ego = v + rng.gen_range(-3.0..3.0);
            let gap =
                expert.equilibrium_gap(v, v + expert.desired_margin) * rng.gen_range(0.7..1.3);
            DriveSpec {
                road,
                ego_speed: ego,
                lead_speed: v,
                lead_gap: gap,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub maneuvers: Vec<Maneuver>,
    pub held_id: usize,
    pub reports: Vec<PipelineReport>,
}

/// Logs the training drives and the held-out drive with the scripted expert
/// and runs the pipeline on each log.
pub fn build_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let mut drives = training_drives(cfg.drives, cfg.seed, &cfg.expert);
    drives.push(held_drive(&cfg.expert));
    let mut maneuvers = Vec::new();
    let mut reports = Vec::new();
    let mut held_id = None;
    for (k, d) in drives.iter().enumerate() {
        let seed = cfg.seed.wrapping_mul(1000).wrapping_add(k as u64);
        let held = k == drives.len() - 1;
        let variation = if held { 0.5 } else { cfg.lead_variation };
        let scenario = ScenarioConfig {
            road: d.road,
            ego_speed: d.ego_speed,
            lead_gap: d.lead_gap,
            lead_speed: smooth_speed_profile(d.lead_speed, variation, cfg.drive_s, seed),
            seed,
            duration: cfg.drive_s,
            horizon_s: cfg.horizon_s,
            ..ScenarioConfig::default()
        };
        let log = generate_expert_log(&scenario, cfg.drive_s, seed, &cfg.expert, &[])?;
        let (ms, report) = process_records(&log.records, &format!("drive{k}"), maneuvers.len());
        if held {
            held_id = ms.first().map(|m| m.id);
        }
        maneuvers.extend(ms);
        reports.push(report);
    }
    let held_id = held_id.ok_or(Error::Empty("held-out maneuver"))?;
    Ok(Corpus {
        maneuvers,
        held_id,
        reports,
    })
}

/// Leave-one-out training tuples, subsampled to the configured cap.
pub fn training_set(
    corpus: &Corpus,
    cfg: &ExperimentConfig,
) -> Result<(Vec<ExperienceTuple>, Maneuver)> {
    let (mut tuples, held) = leave_one_out_split(&corpus.maneuvers, corpus.held_id, cfg.horizon_s)?;
    if tuples.len() > cfg.max_train_tuples {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5a4d_91e5);
        tuples.shuffle(&mut rng);
        tuples.truncate(cfg.max_train_tuples);
    }
    Ok((tuples, held))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedPair {
    pub bc: TrainOutcome,
    pub safe: TrainOutcome,
}

pub fn train_pair(tuples: &[ExperienceTuple], cfg: &ExperimentConfig) -> Result<TrainedPair> {
    Ok(TrainedPair {
        bc: train(tuples, &cfg.train_config(Mode::Bc))?,
        safe: train(tuples, &cfg.train_config(Mode::Safe))?,
    })
}

// ---------------------------------------------------------- safety bench

/// Arc scenarios: 500 m radius, 1 km, lead at a constant speed drawn
/// uniformly from 25-32 m/s with the ego in steady following behind it.
pub fn safety_scenarios(
    n: usize,
    seed: u64,
    horizon_s: f64,
    expert: &ExpertConfig,
) -> Vec<ScenarioConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0afe_7e57);
    (0..n)
        .map(|_| {
            let turn = if rng.gen_bool(0.5) {
                Turn::Left
            } else {
                Turn::Right
            };
            let lead = rng.gen_range(25.0..32.0);
            ScenarioConfig {
                road: RoadGeometry::arc(500.0, turn, 1000.0, 3.5),
                ego_speed: lead,
                lead_gap: expert.equilibrium_gap(lead, lead + expert.desired_margin),
                lead_speed: SpeedLaw::Constant(lead),
                seed,
                duration: 120.0,
                horizon_s,
                ..ScenarioConfig::default()
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafetyRow {
    pub scenario: usize,
    pub policy: Mode,
    pub completion: f64,
    pub flag: Option<FlagKind>,
    pub flag_time: Option<f64>,
}

pub const SAFETY_HEADER: &str = "scenario,policy,completion,flag,flag_time";

pub fn safety_csv(rows: &[SafetyRow]) -> String {
    let mut s = format!("{SAFETY_HEADER}\n");
    for r in rows {
        let ft = r.flag_time.map_or(String::new(), |t| t.to_string());
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.scenario,
            r.policy,
            r.completion,
            flag_name(r.flag),
            ft
        );
    }
    s
}

/// Runs both policies on every scenario, one thread per scenario. Rows are
/// scenario-major whatever the scheduling.
pub fn eval_safety(
    bc: &PolicyNetwork,
    safe: &PolicyNetwork,
    scenarios: &[ScenarioConfig],
    tracker: &TrackerConfig,
) -> Result<(Vec<SafetyRow>, Vec<(EvalReport, EvalReport)>)> {
    let results: Vec<Result<(EvalReport, EvalReport)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = scenarios
            .iter()
            .map(|sc| {
                scope.spawn(move || -> Result<(EvalReport, EvalReport)> {
                    Ok((
                        run_closed_loop(sc, &mut bc.clone(), tracker)?,
                        run_closed_loop(sc, &mut safe.clone(), tracker)?,
                    ))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scenario thread panicked"))
            .collect()
    });
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (i, res) in results.into_iter().enumerate() {
        let (rb, rs) = res?;
        for (mode, r) in [(Mode::Bc, &rb), (Mode::Safe, &rs)] {
            rows.push(SafetyRow {
                scenario: i,
                policy: mode,
                completion: r.completion,
                flag: r.flag,
                flag_time: r.flag_time,
            });
        }
        reports.push((rb, rs));
    }
    Ok((rows, reports))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafetySummary {
    pub bc_mean: f64,
    pub safe_mean: f64,
    pub bc_full: usize,
    pub safe_full: usize,
}

pub fn summarize_safety(rows: &[SafetyRow]) -> SafetySummary {
    let stats = |mode| {
        let xs: Vec<f64> = rows
            .iter()
            .filter(|r| r.policy == mode)
            .map(|r| r.completion)
            .collect();
        let mean = if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        (mean, xs.iter().filter(|c| **c == 1.0).count())
    };
    let (bc_mean, bc_full) = stats(Mode::Bc);
    let (safe_mean, safe_full) = stats(Mode::Safe);
    SafetySummary {
        bc_mean,
        safe_mean,
        bc_full,
        safe_full,
    }
}

/// Grouped bar chart of per-scenario completion.
pub fn safety_chart(rows: &[SafetyRow]) -> String {
    let n = rows.iter().map(|r| r.scenario + 1).max().unwrap_or(0);
    let series = |mode| {
        let mut v = vec![0.0; n];
        for r in rows.iter().filter(|r| r.policy == mode) {
            v[r.scenario] = 100.0 * r.completion;
        }
        v
    };
    let cats: Vec<String> = (0..n).map(|i| i.to_string()).collect();
    svg::grouped_bars(
        "Path completed before a flag",
        &cats,
        &["BC", "SAFE"],
        &[series(Mode::Bc), series(Mode::Safe)],
        "completion %",
    )
}

// ---------------------------------------------------------- human-likeness

/// Speed and lateral offset plots of the expert against each replayed
/// policy. All replays must come from the same held-out maneuver.
pub fn human_charts(replays: &[(&str, &HeldoutReplay)]) -> (String, String) {
    let chart =
        |title: &str, unit: &str, expert: fn(&PairedRow) -> f64, policy: fn(&PairedRow) -> f64| {
            let mut series: Vec<(&str, Vec<(f64, f64)>)> = Vec::new();
            if let Some((_, first)) = replays.first() {
                series.push((
                    "expert",
                    first.rows.iter().map(|r| (r.t, expert(r))).collect(),
                ));
            }
            for (name, rep) in replays {
                series.push((name, rep.rows.iter().map(|r| (r.t, policy(r))).collect()));
            }
            svg::line_plot(title, "t [s]", unit, &series)
        };
    (
        chart("Held-out speed", "v [m/s]", |r| r.expert_v, |r| r.policy_v),
        chart(
            "Held-out lateral offset",
            "offset [m]",
            |r| r.expert_offset,
            |r| r.policy_offset,
        ),
    )
}

/// Population variance.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
}

/// Policy over expert variance of the lateral offset on a paired replay.
pub fn offset_variance_ratio(replay: &HeldoutReplay) -> f64 {
    let e: Vec<f64> = replay.rows.iter().map(|r| r.expert_offset).collect();
    let p: Vec<f64> = replay.rows.iter().map(|r| r.policy_offset).collect();
    variance(&p) / variance(&e)
}

/// Policy over expert variance of the 5 Hz speed increments.
pub fn speed_increment_variance_ratio(replay: &HeldoutReplay) -> f64 {
    let inc = |f: &dyn Fn(usize) -> f64| {
        (1..replay.rows.len())
            .map(|i| f(i) - f(i - 1))
            .collect::<Vec<_>>()
    };
    let e = inc(&|i| replay.rows[i].expert_v);
    let p = inc(&|i| replay.rows[i].policy_v);
    variance(&p) / variance(&e)
}

// ----------------------------------------------------------------- report

/// Everything one seeded run of the full pipeline produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRun {
    pub corpus: Corpus,
    pub train_tuples: usize,
    pub pair: TrainedPair,
    pub offline_bc: OfflineMetrics,
    pub offline_safe: OfflineMetrics,
    pub human_bc: HeldoutReplay,
    pub human_safe: HeldoutReplay,
    pub safety: Vec<SafetyRow>,
    pub safety_reports: Vec<(EvalReport, EvalReport)>,
}

/// Corpus, leave-one-out training of both modes, held-out replay and the
/// safety benchmark.
pub fn run_report(cfg: &ExperimentConfig) -> Result<ReportRun> {
    let corpus = build_corpus(cfg)?;
    let (tuples, held) = training_set(&corpus, cfg)?;
    let pair = train_pair(&tuples, cfg)?;
    let barrier = cfg.train_config(Mode::Safe).barrier;
    let offline_bc = evaluate_offline(&pair.bc.net, &tuples, &barrier)?;
    let offline_safe = evaluate_offline(&pair.safe.net, &tuples, &barrier)?;
    let human_bc = replay_heldout(&held, &mut pair.bc.net.clone(), &cfg.tracker, cfg.horizon_s)?;
    let human_safe = replay_heldout(
        &held,
        &mut pair.safe.net.clone(),
        &cfg.tracker,
        cfg.horizon_s,
    )?;
    let scenarios = safety_scenarios(cfg.safety_scenarios, cfg.seed, cfg.horizon_s, &cfg.expert);
    let (safety, safety_reports) =
        eval_safety(&pair.bc.net, &pair.safe.net, &scenarios, &cfg.tracker)?;
    Ok(ReportRun {
        train_tuples: tuples.len(),
        corpus,
        pair,
        offline_bc,
        offline_safe,
        human_bc,
        human_safe,
        safety,
        safety_reports,
    })
}

impl ReportRun {
    /// Every report output as `(file name, contents)`.
    pub fn files(&self, cfg: &ExperimentConfig) -> Vec<(String, String)> {
        let ckpt = |out: &TrainOutcome, mode| {
            out.net
                .to_checkpoint(&checkpoint_meta(&cfg.train_config(mode)))
        };
        let (speed, offset) = human_charts(&[("BC", &self.human_bc), ("SAFE", &self.human_safe)]);
        let pipeline: String = self
            .corpus
            .reports
            .iter()
            .enumerate()
            .map(|(k, r)| format!("[drive{k}]\n{}", r.to_text()))
            .collect::<Vec<_>>()
            .join("\n");
        [
            ("metrics.csv", self.metrics_csv()),
            ("pipeline.txt", pipeline),
            ("bc.ckpt", ckpt(&self.pair.bc, Mode::Bc)),
            ("safe.ckpt", ckpt(&self.pair.safe, Mode::Safe)),
            ("bc_loss.csv", history_csv(&self.pair.bc.history)),
            ("safe_loss.csv", history_csv(&self.pair.safe.history)),
            ("safety.csv", safety_csv(&self.safety)),
            ("safety.svg", safety_chart(&self.safety)),
            ("human_bc.csv", paired_csv(&self.human_bc)),
            ("human_safe.csv", paired_csv(&self.human_safe)),
            ("human_speed.svg", speed),
            ("human_offset.svg", offset),
        ]
        .into_iter()
        .map(|(n, c)| (n.to_string(), c))
        .collect()
    }

    /// `metric,value` lines summarizing the run.
    pub fn metrics_csv(&self) -> String {
        let s = summarize_safety(&self.safety);
        let mut out = String::from("metric,value\n");
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k},{v}");
        };
        put("maneuvers", self.corpus.maneuvers.len().to_string());
        put("train_tuples", self.train_tuples.to_string());
        put(
            "bc_final_loss",
            self.pair
                .bc
                .history
                .last()
                .map_or(0.0, |e| e.loss)
                .to_string(),
        );
        put(
            "safe_final_loss",
            self.pair
                .safe
                .history
                .last()
                .map_or(0.0, |e| e.loss)
                .to_string(),
        );
        put(
            "bc_offline_imitation",
            self.offline_bc.mean_imitation.to_string(),
        );
        put(
            "safe_offline_imitation",
            self.offline_safe.mean_imitation.to_string(),
        );
        put(
            "bc_bound_satisfaction",
            self.offline_bc.bound_satisfaction.to_string(),
        );
        put(
            "safe_bound_satisfaction",
            self.offline_safe.bound_satisfaction.to_string(),
        );
        for (name, r) in [("bc", &self.human_bc), ("safe", &self.human_safe)] {
            put(&format!("{name}_heldout_flag"), flag_name(r.report.flag));
            put(
                &format!("{name}_heldout_speed_rmse"),
                r.speed_rmse.to_string(),
            );
            put(
                &format!("{name}_heldout_offset_rmse"),
                r.offset_rmse.to_string(),
            );
            put(
                &format!("{name}_heldout_offset_variance_ratio"),
                offset_variance_ratio(r).to_string(),
            );
        }
        put("bc_mean_completion", s.bc_mean.to_string());
        put("safe_mean_completion", s.safe_mean.to_string());
        put("bc_full_completions", s.bc_full.to_string());
        put("safe_full_completions", s.safe_full.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::RoadKind;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            drives: 3,
            epochs: 3,
            ..Default::default()
        }
    }

    #[test]
    fn safety_scenarios_follow_the_benchmark() {
        let a = safety_scenarios(10, 4, 2.0, &ExpertConfig::default());
        assert_eq!(a, safety_scenarios(10, 4, 2.0, &ExpertConfig::default()));
        assert_ne!(a, safety_scenarios(10, 5, 2.0, &ExpertConfig::default()));
        for s in &a {
            assert!(matches!(s.road.kind, RoadKind::Arc { radius, .. } if radius == 500.0));
            assert_eq!(s.road.length, 1000.0);
            let SpeedLaw::Constant(v) = s.lead_speed else {
                panic!("lead speed law {:?}", s.lead_speed)
            };
            assert!((25.0..32.0).contains(&v));
            assert_eq!(s.ego_speed, v);
        }
    }

    #[test]
    fn corpus_holds_out_the_115_kmh_drive() {
        let cfg = small();
        let corpus = build_corpus(&cfg).unwrap();
        let held = corpus
            .maneuvers
            .iter()
            .find(|m| m.id == corpus.held_id)
            .unwrap();
        assert!((held.records[0].vx - 31.94).abs() < 0.01);
        assert!(held.duration() >= 10.0);
        assert_eq!(corpus.reports.len(), cfg.drives + 1);
    }

    #[test]
    fn training_set_is_capped_and_excludes_held() {
        let cfg = ExperimentConfig {
            max_train_tuples: 40,
            ..small()
        };
        let corpus = build_corpus(&cfg).unwrap();
        let (tuples, held) = training_set(&corpus, &cfg).unwrap();
        assert_eq!(tuples.len(), 40);
        assert_eq!(held.id, corpus.held_id);
        let held_speeds: Vec<f64> = held.records.iter().map(|r| r.vx).collect();
        assert!(tuples
            .iter()
            .all(|t| !held_speeds.contains(&t.features.v_x)));
    }

    fn row(scenario: usize, policy: Mode, completion: f64, flag: Option<FlagKind>) -> SafetyRow {
        SafetyRow {
            scenario,
            policy,
            completion,
            flag,
            flag_time: flag.map(|_| 3.5),
        }
    }

    #[test]
    fn safety_csv_layout() {
        let csv = safety_csv(&[
            row(0, Mode::Bc, 0.25, Some(FlagKind::Lane)),
            row(0, Mode::Safe, 1.0, None),
        ]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], SAFETY_HEADER);
        assert_eq!(lines[1], "0,bc,0.25,lane,3.5");
        assert_eq!(lines[2], "0,safe,1,none,");
    }

    #[test]
    fn summary_counts_full_runs() {
        let rows = [
            row(0, Mode::Bc, 0.2, Some(FlagKind::Lane)),
            row(0, Mode::Safe, 1.0, None),
            row(1, Mode::Bc, 1.0, None),
            row(1, Mode::Safe, 1.0, None),
        ];
        let s = summarize_safety(&rows);
        assert!((s.bc_mean - 0.6).abs() < 1e-12);
        assert_eq!(s.safe_mean, 1.0);
        assert_eq!((s.bc_full, s.safe_full), (1, 2));
        assert!(safety_chart(&rows).contains("completion %"));
    }

    #[test]
    fn variance_oracle() {
        assert_eq!(variance(&[]), 0.0);
        assert!((variance(&[1.0, 2.0, 3.0, 4.0]) - 1.25).abs() < 1e-12);
    }
}
