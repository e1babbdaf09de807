use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use safeil::config::{load_experiment, load_scenario};
use safeil::datapipe::{
    extract_tuples, generate_expert_log, process_records, read_log, read_tuples, write_log,
    write_tuples, EventKind, ExpertConfig, Maneuver, PipelineReport,
};
use safeil::experiment::{
    eval_safety, human_charts, offset_variance_ratio, run_report, safety_chart, safety_csv,
    safety_scenarios, summarize_safety, ExperimentConfig,
};
use safeil::policy::PolicyNetwork;
use safeil::sim::{flag_name, paired_csv, replay_heldout};
use safeil::training::{checkpoint_meta, history_csv, meta_value, train, Mode};
use safeil::Error;

#[derive(Parser)]
#[command(
    name = "safeil",
    version,
    about = "Safe imitation learning of spline driving plans"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Drive a scenario with the scripted expert and write the 5 Hz log.
    Gen(GenArgs),
    /// Filter and segment logs into training tuples.
    Process(ProcessArgs),
    /// Train a policy network on a tuple file.
    Train(TrainArgs),
    /// Run both policies on the seeded 500 m arc scenarios.
    EvalSafety(EvalSafetyArgs),
    /// Replay a held-out maneuver with both policies in closed loop.
    EvalHuman(EvalHumanArgs),
    /// Full pipeline: corpus, leave-one-out training, both evaluations.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// Overrides the seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// Log length in seconds; defaults to the scenario duration.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args)]
struct ProcessArgs {
    #[command(flatten)]
    common: Common,
    /// Log CSV files; maneuver ids run on across files.
    #[arg(required = true)]
    logs: Vec<PathBuf>,
    /// Keep this maneuver out of the tuple file.
    #[arg(long)]
    hold_out: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    tuples: PathBuf,
    #[arg(long)]
    mode: Mode,
    /// Barrier weight (SAFE only).
    #[arg(long)]
    k: Option<f64>,
}

#[derive(Args)]
struct EvalSafetyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    bc: PathBuf,
    #[arg(long)]
    safe: PathBuf,
    #[arg(long)]
    scenarios: Option<usize>,
}

#[derive(Args)]
struct EvalHumanArgs {
    #[command(flatten)]
    common: Common,
    #[arg(required = true)]
    logs: Vec<PathBuf>,
    /// Id of the held-out maneuver, as numbered by `process`.
    #[arg(long)]
    maneuver: usize,
    #[arg(long)]
    bc: PathBuf,
    #[arg(long)]
    safe: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
}

/// Exit code 1 for failures of the experiment itself, 2 for bad input.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let code = match err.downcast_ref::<Error>() {
            Some(Error::Diverged { .. } | Error::NonFinite(_) | Error::Singular) => 1,
            _ => 2,
        };
        Failure { code, err }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        anyhow::Error::from(err).into()
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Process(a) => process(a),
        Command::Train(a) => train_cmd(a),
        Command::EvalSafety(a) => eval_safety_cmd(a),
        Command::EvalHuman(a) => eval_human(a),
        Command::Report(a) => report(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

/// Writes next to the target and renames, so a failed run leaves nothing
/// half written.
fn write_atomic(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn write_all(dir: &Path, files: &[(String, String)]) -> anyhow::Result<()> {
    for (name, contents) in files {
        write_atomic(&dir.join(name), contents)?;
    }
    Ok(())
}

/// `dir/name.ckpt` -> `dir/name.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn experiment_config(c: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => load_experiment(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn gen(a: GenArgs) -> CmdResult {
    let path = a
        .common
        .config
        .as_ref()
        .ok_or_else(|| anyhow!("gen needs --config <scenario file>"))?;
    let mut file = load_scenario(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(seed) = a.common.seed {
        file.scenario.seed = seed;
    }
    let duration = a.duration.unwrap_or(file.scenario.duration);
    let seed = file.scenario.seed;
    let plan = file.inject.plan(duration, seed);
    let log = generate_expert_log(
        &file.scenario,
        duration,
        seed,
        &ExpertConfig::default(),
        &plan,
    )?;
    let mut csv = Vec::new();
    write_log(&mut csv, &log.records)?;
    let mut events = String::from("kind,t\n");
    for e in &log.events {
        let kind = match e.kind {
            EventKind::CutIn => "cutin",
            EventKind::LaneChange => "lane_change",
        };
        events.push_str(&format!("{kind},{}\n", e.t));
    }
    write_atomic(
        &a.common.out,
        &String::from_utf8(csv).expect("csv is utf-8"),
    )?;
    write_atomic(&sibling(&a.common.out, "events.csv"), &events)?;
    eprintln!("{} records, {} events", log.records.len(), log.events.len());
    Ok(())
}

fn load_maneuvers(logs: &[PathBuf]) -> Result<(Vec<Maneuver>, Vec<PipelineReport>), Failure> {
    let mut maneuvers = Vec::new();
    let mut reports = Vec::new();
    for path in logs {
        let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let records = read_log(f).with_context(|| format!("reading {}", path.display()))?;
        let source = path.display().to_string();
        let (ms, rep) = process_records(&records, &source, maneuvers.len());
        maneuvers.extend(ms);
        reports.push(rep);
    }
    Ok((maneuvers, reports))
}

fn process(a: ProcessArgs) -> CmdResult {
    let cfg = experiment_config(&a.common)?;
    let (maneuvers, mut reports) = load_maneuvers(&a.logs)?;
    if let Some(id) = a.hold_out {
        if !maneuvers.iter().any(|m| m.id == id) {
            return Err(Error::UnknownManeuver(id).into());
        }
    }
    let mut tuples = Vec::new();
    let mut text = String::new();
    let mut next = 0;
    for (path, rep) in a.logs.iter().zip(reports.iter_mut()) {
        let mine = &maneuvers[next..next + rep.maneuvers];
        next += rep.maneuvers;
        for m in mine.iter().filter(|m| Some(m.id) != a.hold_out) {
            let t = extract_tuples(m, cfg.horizon_s)?;
            rep.tuples += t.len();
            tuples.extend(t);
        }
        text.push_str(&format!("[{}]\n{}", path.display(), rep.to_text()));
        for m in mine {
            let held = if Some(m.id) == a.hold_out {
                " held out"
            } else {
                ""
            };
            text.push_str(&format!(
                "maneuver {} = {:.1} s from t={:.1}{held}\n",
                m.id,
                m.duration(),
                m.records[0].t
            ));
        }
    }
    if tuples.is_empty() {
        return Err(Error::Empty("tuples after processing").into());
    }
    let mut csv = Vec::new();
    write_tuples(&mut csv, &tuples, cfg.horizon_s)?;
    write_atomic(
        &a.common.out,
        &String::from_utf8(csv).expect("csv is utf-8"),
    )?;
    write_atomic(&sibling(&a.common.out, "report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let cfg = experiment_config(&a.common)?;
    let f = fs::File::open(&a.tuples).with_context(|| format!("opening {}", a.tuples.display()))?;
    let (tuples, horizon_s) =
        read_tuples(f).with_context(|| format!("reading {}", a.tuples.display()))?;
    let cfg = ExperimentConfig { horizon_s, ..cfg };
    let mut tc = cfg.train_config(a.mode);
    if let Some(k) = a.k {
        if a.mode != Mode::Safe {
            return Err(anyhow!("--k only applies to --mode safe").into());
        }
        if !(k >= 0.0) {
            return Err(anyhow!("--k must be non-negative").into());
        }
        tc.barrier.k = k;
    }
    let out = train(&tuples, &tc)?;
    write_atomic(&a.common.out, &out.net.to_checkpoint(&checkpoint_meta(&tc)))?;
    write_atomic(
        &sibling(&a.common.out, "loss.csv"),
        &history_csv(&out.history),
    )?;
    if let Some(last) = out.history.last() {
        eprintln!(
            "{} tuples, final loss {} (imitation {})",
            tuples.len(),
            last.loss,
            last.imitation
        );
    }
    Ok(())
}

/// Both checkpoints, checked to share one planning horizon.
fn load_pair(bc: &Path, safe: &Path) -> Result<(PolicyNetwork, PolicyNetwork, f64), Failure> {
    let load = |p: &Path| -> Result<(PolicyNetwork, f64), Failure> {
        let (net, meta) =
            PolicyNetwork::load(p).with_context(|| format!("loading {}", p.display()))?;
        let h = meta_value(&meta, "horizon_s")
            .ok_or_else(|| anyhow!("{}: no horizon_s entry", p.display()))?
            .parse::<f64>()
            .map_err(|_| anyhow!("{}: bad horizon_s entry", p.display()))?;
        Ok((net, h))
    };
    let (b, hb) = load(bc)?;
    let (s, hs) = load(safe)?;
    if hb != hs {
        return Err(anyhow!("checkpoints disagree on the horizon ({hb} s vs {hs} s)").into());
    }
    Ok((b, s, hb))
}

fn eval_safety_cmd(a: EvalSafetyArgs) -> CmdResult {
    let cfg = experiment_config(&a.common)?;
    let (bc, safe, horizon_s) = load_pair(&a.bc, &a.safe)?;
    let n = a.scenarios.unwrap_or(cfg.safety_scenarios);
    if n == 0 {
        return Err(anyhow!("--scenarios must be at least 1").into());
    }
    let scenarios = safety_scenarios(n, cfg.seed, horizon_s, &cfg.expert);
    let (rows, _) = eval_safety(&bc, &safe, &scenarios, &cfg.tracker)?;
    write_all(
        &a.common.out,
        &[
            ("safety.csv".into(), safety_csv(&rows)),
            ("safety.svg".into(), safety_chart(&rows)),
        ],
    )?;
    let s = summarize_safety(&rows);
    println!(
        "mean completion bc {:.3} safe {:.3}; full runs bc {}/{n} safe {}/{n}",
        s.bc_mean, s.safe_mean, s.bc_full, s.safe_full
    );
    Ok(())
}

fn eval_human(a: EvalHumanArgs) -> CmdResult {
    let cfg = experiment_config(&a.common)?;
    let (bc, safe, horizon_s) = load_pair(&a.bc, &a.safe)?;
    let (maneuvers, _) = load_maneuvers(&a.logs)?;
    let held = maneuvers
        .iter()
        .find(|m| m.id == a.maneuver)
        .ok_or(Error::UnknownManeuver(a.maneuver))?;
    let rb = replay_heldout(held, &mut bc.clone(), &cfg.tracker, horizon_s)?;
    let rs = replay_heldout(held, &mut safe.clone(), &cfg.tracker, horizon_s)?;
    let (speed, offset) = human_charts(&[("BC", &rb), ("SAFE", &rs)]);
    write_all(
        &a.common.out,
        &[
            ("human_bc.csv".into(), paired_csv(&rb)),
            ("human_safe.csv".into(), paired_csv(&rs)),
            ("human_speed.svg".into(), speed),
            ("human_offset.svg".into(), offset),
        ],
    )?;
    for (name, r) in [("bc", &rb), ("safe", &rs)] {
        println!(
            "{name}: flag {}, speed rmse {:.3}, offset rmse {:.3}, offset variance ratio {:.3}",
            flag_name(r.report.flag),
            r.speed_rmse,
            r.offset_rmse,
            offset_variance_ratio(r)
        );
    }
    Ok(())
}

fn report(a: ReportArgs) -> CmdResult {
    let cfg = experiment_config(&a.common)?;
    let run = run_report(&cfg)?;
    write_all(&a.common.out, &run.files(&cfg))?;
    print!("{}", run.metrics_csv());
    Ok(())
}
