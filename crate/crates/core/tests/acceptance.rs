//! Acceptance suite. Every test prints one `criterion N ... PASS|FAIL` line
//! straight to stdout (bypassing the test harness capture) and then asserts.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use safeil::datapipe::{
    generate_expert_log, process_log, EventKind, ExpertConfig, Injections, CUTIN_MARGIN_S,
    LANE_CHANGE_MARGIN_S, LOG_DT,
};
use safeil::experiment::{
    build_corpus, offset_variance_ratio, run_report, summarize_safety, train_pair, training_set,
    ExperimentConfig, ReportRun,
};
use safeil::geom::Vec2;
use safeil::losses::{barrier_terms, safe_loss, BarrierConfig};
use safeil::policy::{
    CoefficientVector, FeatureVector, Normalization, PolicyNetwork, N_FEATURES, N_OUTPUTS, N_PARAMS,
};
use safeil::sim::{replay_heldout, RoadGeometry, ScenarioConfig, SpeedLaw, Turn};
use safeil::splines::{BSpline2D, KnotVector};
use safeil::training::{train, Mode, TrainConfig};

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n} {name}: {verdict} ({detail})");
}

fn seed_run() -> &'static ReportRun {
    static RUN: OnceLock<ReportRun> = OnceLock::new();
    RUN.get_or_init(|| run_report(&ExperimentConfig::default()).expect("report run"))
}

// ------------------------------------------------------------------ 1

fn random_spline(rng: &mut ChaCha8Rng) -> BSpline2D {
    let degree = rng.gen_range(1..=5);
    let n = rng.gen_range(degree + 1..=degree + 8);
    let mut interior: Vec<f64> = (0..n - degree - 1)
        .map(|_| rng.gen_range(0.0..1.0))
        .collect();
    interior.sort_by(f64::total_cmp);
    let mut knots = vec![0.0; degree + 1];
    knots.extend(interior);
    knots.extend(vec![1.0; degree + 1]);
    let kv = KnotVector::new(knots, degree).unwrap();
    let mut pts = vec![Vec2::ZERO];
    pts.extend((1..n).map(|_| Vec2::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0))));
    BSpline2D::new(kv, pts, rng.gen_range(0.5..30.0)).unwrap()
}

#[test]
fn criterion_1_spline_suite() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut unity, mut ends, mut count, mut hull) = (0.0_f64, 0.0_f64, true, true);
    for _ in 0..1000 {
        let s = random_spline(&mut rng);
        let kv = s.knots().clone();
        let m = kv.knots().len();
        let d = kv.degree();
        count &= kv.num_coeffs() == m - d - 1;
        for _ in 0..20 {
            let tau: f64 = rng.gen_range(0.0..=1.0);
            unity = unity.max((kv.basis_all(tau).iter().sum::<f64>() - 1.0).abs());
        }
        let cps = s.control_points();
        ends = ends
            .max((s.eval(0.0).unwrap() - cps[0]).norm())
            .max((s.eval(1.0).unwrap() - cps[cps.len() - 1]).norm());
        let mut more = cps.to_vec();
        more.push(Vec2::new(1.0, 1.0));
        count &= BSpline2D::new(kv.clone(), more, 1.0).is_err();
        count &= BSpline2D::new(kv.clone(), cps[..cps.len() - 1].to_vec(), 1.0).is_err();
        hull &= s.in_convex_hull(200);
    }
    let elapsed = start.elapsed();
    let pass = unity <= 1e-12 && ends <= 1e-12 && count && hull && elapsed < Duration::from_secs(5);
    report(
        1,
        "spline suite",
        pass,
        &format!("max |sum B - 1| = {unity:.1e}, endpoint error {ends:.1e}, n = m - d - 1 enforced {count}, hull {hull}, {elapsed:.2?}"),
    );
    assert!(pass);
}

// ------------------------------------------------------------------ 2

fn random_instance(rng: &mut ChaCha8Rng) -> (FeatureVector, CoefficientVector, CoefficientVector) {
    let f = FeatureVector {
        c0l: rng.gen_range(0.5..2.5),
        c1l: rng.gen_range(-0.05..0.05),
        c2l: rng.gen_range(-2e-3..2e-3),
        c0r: rng.gen_range(-2.5..-0.5),
        c1r: rng.gen_range(-0.05..0.05),
        c2r: rng.gen_range(-2e-3..2e-3),
        v_x: rng.gen_range(20.0..35.0),
        v_lead: rng.gen_range(20.0..35.0),
        d_lead: rng.gen_range(5.0..60.0),
    };
    let a = CoefficientVector(std::array::from_fn(|k| {
        if k % 2 == 0 {
            rng.gen_range(2.0..40.0)
        } else {
            rng.gen_range(-2.5..2.5)
        }
    }));
    let s = CoefficientVector(std::array::from_fn(|k| a.0[k] + rng.gen_range(-2.0..2.0)));
    (f, a, s)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

#[test]
fn criterion_2_gradient_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = BarrierConfig::new(2.0);
    let (mut loss_worst, mut net_worst) = (0.0_f64, 0.0_f64);
    for _ in 0..20 {
        let (f, a, s) = random_instance(&mut rng);
        let g = safe_loss(&f, &a, &s, Some(&cfg)).grad;
        for k in 0..N_OUTPUTS {
            let h = 1e-5;
            let (mut p, mut m) = (a, a);
            p.0[k] += h;
            m.0[k] -= h;
            let fd = (safe_loss(&f, &p, &s, Some(&cfg)).value
                - safe_loss(&f, &m, &s, Some(&cfg)).value)
                / (2.0 * h);
            loss_worst = loss_worst.max(rel_err(g[k], fd));
        }

        // network composed with the loss, all parameters
        let mut net = PolicyNetwork::init(rng.gen());
        let mean: [f64; N_FEATURES] = f.to_array();
        let norm = Normalization {
            input_mean: mean.map(|v| v + rng.gen_range(-1.0..1.0)),
            input_scale: [0.0; N_FEATURES].map(|_| rng.gen_range(0.5..3.0)),
            output_scale: [0.0; N_OUTPUTS].map(|_| rng.gen_range(1.0..20.0)),
        };
        net.set_normalization(norm);
        let total = |n: &PolicyNetwork| {
            let out = n.forward(&f).unwrap();
            safe_loss(&f, &out, &s, Some(&cfg))
        };
        let grads = net.backward(&f, &total(&net).grad).unwrap();
        for j in 0..N_PARAMS {
            // the loss is O(1e3), so smaller steps drown in rounding
            let h = 1e-4;
            let (mut p, mut m) = (net.clone(), net.clone());
            p.params_mut()[j] += h;
            m.params_mut()[j] -= h;
            let fd = (total(&p).value - total(&m).value) / (2.0 * h);
            net_worst = net_worst.max(rel_err(grads.params[j], fd));
        }
    }
    let pass = loss_worst < 1e-4 && net_worst < 1e-4;
    report(
        2,
        "gradient oracle",
        pass,
        &format!("worst relative error: loss {loss_worst:.2e}, network {net_worst:.2e}"),
    );
    assert!(pass);
}

// ------------------------------------------------------------------ 3

#[test]
fn criterion_3_barrier_arithmetic() {
    let centered = FeatureVector {
        c0l: 1.75,
        c1l: 0.0,
        c2l: 0.0,
        c0r: -1.75,
        c1r: 0.0,
        c2r: 0.0,
        v_x: 25.0,
        v_lead: 25.0,
        d_lead: 50.0,
    };
    let plan = CoefficientVector([5.0, 0.0, 10.0, 0.0, 15.0, 0.0]);
    let terms = barrier_terms(&centered, &plan, &BarrierConfig::new(20.0));
    let lane = terms.left + terms.right;

    let s = ScenarioConfig {
        road: RoadGeometry::arc(600.0, Turn::Left, 5000.0, 3.5),
        lead_speed: SpeedLaw::Constant(28.0),
        ..Default::default()
    };
    let log = generate_expert_log(&s, 40.0, 3, &ExpertConfig::default(), &[]).unwrap();
    let (_, tuples, _) = process_log(&log.records, 2.0).unwrap();
    let bc = train(
        &tuples,
        &TrainConfig {
            epochs: 20,
            ..TrainConfig::new(Mode::Bc, 2.0, 9)
        },
    )
    .unwrap();
    let mut k0 = TrainConfig {
        epochs: 20,
        ..TrainConfig::new(Mode::Safe, 2.0, 9)
    };
    k0.barrier.k = 0.0;
    let safe = train(&tuples, &k0).unwrap();
    let identical = bc
        .net
        .params()
        .iter()
        .zip(safe.net.params())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    let pass = (lane - 2135.2).abs() <= 0.1 && identical;
    report(
        3,
        "barrier arithmetic",
        pass,
        &format!("centered lane terms {lane:.3}, K=0 SAFE equals BC bit for bit {identical}"),
    );
    assert!(pass);
}

// ------------------------------------------------------------------ 4

#[test]
fn criterion_4_pipeline_fidelity() {
    let scenario = ScenarioConfig {
        lead_speed: SpeedLaw::Constant(30.0),
        ..Default::default()
    };
    let expert = ExpertConfig::default();
    let (mut events, mut found, mut clean, mut falsely) = (0usize, 0usize, 0usize, 0usize);
    for seed in 0..5u64 {
        let plan = Injections {
            cutins: 3,
            lane_changes: 2,
        }
        .plan(300.0, seed);
        let log = generate_expert_log(&scenario, 300.0, seed, &expert, &plan).unwrap();
        let (ms, _, rep) = process_log(&log.records, 2.0).unwrap();
        let kept: Vec<f64> = ms
            .iter()
            .flat_map(|m| m.records.iter().map(|r| r.t))
            .collect();
        let removed = |t: f64| !kept.iter().any(|k| (k - t).abs() < 1e-9);
        let windows: Vec<(f64, f64)> = log
            .events
            .iter()
            .map(|e| match e.kind {
                EventKind::LaneChange => (
                    e.t - LANE_CHANGE_MARGIN_S - 2.0 * LOG_DT,
                    e.t + LANE_CHANGE_MARGIN_S + LOG_DT,
                ),
                EventKind::CutIn => (
                    e.t - CUTIN_MARGIN_S - 2.0 * LOG_DT,
                    e.t + CUTIN_MARGIN_S + LOG_DT,
                ),
            })
            .collect();
        for e in &log.events {
            events += 1;
            let ivs = match e.kind {
                EventKind::LaneChange => &rep.lane_change_intervals,
                EventKind::CutIn => &rep.cutin_intervals,
            };
            if ivs.iter().any(|iv| iv.contains(e.t)) {
                found += 1;
            }
        }
        // samples outside every event window; short remnants are counted as
        // removed too
        for r in log
            .records
            .iter()
            .filter(|r| windows.iter().all(|(a, b)| r.t < *a || r.t > *b))
        {
            clean += 1;
            if removed(r.t) {
                falsely += 1;
            }
        }
    }
    let recall = found as f64 / events as f64;
    let false_rate = falsely as f64 / clean as f64;

    let log = generate_expert_log(&scenario, 600.0, 7, &expert, &[]).unwrap();
    let (_, tuples, _) = process_log(&log.records, 2.0).unwrap();
    let knots = KnotVector::cubic_bezier();
    let ss: f64 = tuples
        .iter()
        .map(|t| {
            t.target
                .to_spline(2.0, &knots)
                .unwrap()
                .rms_residual(&t.future)
                .powi(2)
        })
        .sum();
    let rms = (ss / tuples.len() as f64).sqrt();

    let pass = recall == 1.0 && false_rate <= 0.05 && tuples.len() >= 2800 && rms < 0.2;
    report(
        4,
        "pipeline fidelity",
        pass,
        &format!(
            "recall {found}/{events}, clean false removal {:.2}%, 600 s log {} tuples, fit residual RMS {rms:.4} m",
            100.0 * false_rate,
            tuples.len()
        ),
    );
    assert!(pass);
}

// ------------------------------------------------------------------ 5

#[test]
fn criterion_5_compounding_errors() {
    let start = Instant::now();
    let (mut bc_flags, mut safe_ok, mut sizes) = (0, 0, Vec::new());
    for seed in 0..10 {
        let cfg = ExperimentConfig {
            seed,
            ..Default::default()
        };
        let corpus = build_corpus(&cfg).unwrap();
        let (tuples, held) = training_set(&corpus, &cfg).unwrap();
        sizes.push(tuples.len());
        let pair = train_pair(&tuples, &cfg).unwrap();
        let bc =
            replay_heldout(&held, &mut pair.bc.net.clone(), &cfg.tracker, cfg.horizon_s).unwrap();
        let safe = replay_heldout(
            &held,
            &mut pair.safe.net.clone(),
            &cfg.tracker,
            cfg.horizon_s,
        )
        .unwrap();
        if bc.report.flag.is_some() {
            bc_flags += 1;
        }
        if safe.stayed_in_lane() {
            safe_ok += 1;
        }
    }
    let elapsed = start.elapsed();
    let max_size = *sizes.iter().max().unwrap();
    let pass =
        max_size <= 300 && bc_flags >= 7 && safe_ok >= 9 && elapsed < Duration::from_secs(300);
    report(
        5,
        "compounding errors",
        pass,
        &format!("{max_size} training tuples, BC flagged in {bc_flags}/10, SAFE completed in lane {safe_ok}/10, {elapsed:.1?}"),
    );
    assert!(pass);
}

// ------------------------------------------------------------------ 6

#[test]
fn criterion_6_safety_benchmark() {
    let start = Instant::now();
    let run = seed_run();
    let elapsed = start.elapsed();
    let s = summarize_safety(&run.safety);
    let n = run.safety.len() / 2;
    let pass = n == 10
        && s.safe_mean - s.bc_mean >= 0.20
        && s.safe_full >= 5
        && s.bc_full < s.safe_full
        && elapsed < Duration::from_secs(600);
    report(
        6,
        "safety benchmark",
        pass,
        &format!(
            "mean completion BC {:.1}% SAFE {:.1}%, full runs BC {}/{n} SAFE {}/{n}, {elapsed:.1?}",
            100.0 * s.bc_mean,
            100.0 * s.safe_mean,
            s.bc_full,
            s.safe_full
        ),
    );
    assert!(pass);
}

// ------------------------------------------------------------------ 7

#[test]
fn criterion_7_human_likeness() {
    let r = &seed_run().human_safe;
    let ratio = offset_variance_ratio(r);
    let pass = r.speed_rmse < 2.0 && r.offset_rmse < 0.5 && ratio < 1.0;
    report(
        7,
        "human likeness",
        pass,
        &format!(
            "SAFE speed RMSE {:.3} m/s, offset RMSE {:.3} m, offset variance ratio {ratio:.3}",
            r.speed_rmse, r.offset_rmse
        ),
    );
    assert!(pass);
}

// ------------------------------------------------------------------ 8

#[test]
fn criterion_8_determinism() {
    let cfg = ExperimentConfig {
        seed: 3,
        ..Default::default()
    };
    let a = run_report(&cfg).unwrap().metrics_csv();
    let b = run_report(&cfg).unwrap().metrics_csv();
    let pass = a == b;
    report(
        8,
        "determinism",
        pass,
        &format!("two runs, {} byte metrics CSV, identical {pass}", a.len()),
    );
    assert!(pass);
}
