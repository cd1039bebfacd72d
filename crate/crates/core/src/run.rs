//! Running scenarios end to end and writing their artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{NodeId, Pose2, Vec2};
use crate::map::{write_map, LogOddsParams, OccupancyGrid};
use crate::metrics::{compute_metrics, MetricsReport, PoseRecord, TimingSummary, DEFAULT_SKIP_STEPS};
use crate::par::{self, Execution};
use crate::pipeline::{Ablation, SessionConfig, SlamSession, StepReport};
use crate::sim::{step_scenario, Scenario, SimStep, Simulation};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Builtin scenario name or path to a scenario file.
    pub scenario: String,
    /// Overrides the default range weight.
    pub gamma: Option<f64>,
    pub ablation: Ablation,
    pub output_dir: Option<PathBuf>,
    pub seed_override: Option<u64>,
    pub execution: Execution,
    pub skip_steps: usize,
}

impl RunConfig {
    pub fn new(scenario: impl Into<String>) -> Self {
        Self {
            scenario: scenario.into(),
            gamma: None,
            ablation: Ablation::Full,
            output_dir: None,
            seed_override: None,
            execution: Execution::default(),
            skip_steps: DEFAULT_SKIP_STEPS,
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed_override = Some(seed);
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = Some(gamma);
        self
    }

    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Self {
        self.output_dir = Some(dir.into());
        self
    }

    /// Loads the scenario with the seed override applied.
    pub fn scenario(&self) -> Result<Scenario> {
        let sc = Scenario::resolve(&self.scenario)?;
        Ok(match self.seed_override {
            Some(seed) => sc.with_seed(seed),
            None => sc,
        })
    }

    /// Session settings for `scenario`: its noise and step length, plus the
    /// overrides held here.
    pub fn session_config(&self, scenario: &Scenario) -> Result<SessionConfig> {
        let mut cfg = SessionConfig::default();
        cfg.ablation = self.ablation;
        cfg.noise.sigma_n = scenario.sensors.uwb_sigma_n;
        cfg.motion.delta = scenario.delta;
        cfg.fusion.execution = self.execution;
        if let Some(g) = self.gamma {
            cfg.fusion.gamma = g;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One row of `trajectory.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    pub time: f64,
    pub truth: Pose2,
    pub estimate: Pose2,
}

/// One row of `beacons.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeaconRow {
    pub step: usize,
    pub time: f64,
    pub id: NodeId,
    pub estimate: Vec2,
    pub truth: Vec2,
}

pub const TRAJECTORY_HEADER: &str = "step,t,true_x,true_y,true_theta,est_x,est_y,est_theta";
pub const BEACONS_HEADER: &str = "step,t,id,est_x,est_y,true_x,true_y";

/// Everything a run produced, in memory.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub scenario: String,
    pub seed: u64,
    pub ablation: Ablation,
    pub gamma: f64,
    pub metrics: MetricsReport,
    pub timing: Option<TimingSummary>,
    pub step_times_ms: Vec<f64>,
    pub trajectory: Vec<TrajectoryRow>,
    pub beacons: Vec<BeaconRow>,
    pub estimates: Vec<PoseRecord>,
    pub truth: Vec<PoseRecord>,
    pub map: Option<OccupancyGrid>,
}

/// Runs a scenario, calling `observe` after every step.
pub fn run_session<F>(cfg: &RunConfig, mut observe: F) -> Result<RunOutput>
where
    F: FnMut(&SimStep, &StepReport, &SlamSession),
{
    let scenario = cfg.scenario()?;
    let session_cfg = cfg.session_config(&scenario)?;
    let mut sim: Simulation = scenario.build()?;
    sim.execution = cfg.execution;
    if sim.horizon == 0 {
        return Err(Error::Scenario(format!("scenario '{}' has an empty horizon", sim.name)));
    }
    let mut session = SlamSession::new(session_cfg)?;
    let mut out = RunOutput {
        scenario: sim.name.clone(),
        seed: scenario.effective_seed(),
        ablation: cfg.ablation,
        gamma: session_cfg.fusion.gamma,
        metrics: MetricsReport {
            beacon_err_mean: 0.0,
            beacon_err_std: 0.0,
            robot_ate_rmse: 0.0,
            final_pose_err: 0.0,
            corridor_length_est: 0.0,
            steps: 0,
            timing: None,
        },
        timing: None,
        step_times_ms: Vec::with_capacity(sim.horizon),
        trajectory: Vec::new(),
        beacons: Vec::new(),
        estimates: Vec::new(),
        truth: Vec::new(),
        map: None,
    };

    for t in 0..sim.horizon {
        let st = step_scenario(&sim, t)?;
        let report = session.step(&st.ranges, &st.scan)?;
        observe(&st, &report, &session);
        out.step_times_ms.push(report.timing.total);

        let truth_beacons: Vec<(NodeId, Vec2)> = st.truth.beacon_ids.iter().copied().zip(st.truth.positions[1..].iter().copied()).collect();
        out.truth.push(PoseRecord {
            step: t,
            time: st.time,
            robot: st.robot_pose,
            beacons: truth_beacons.clone(),
        });
        let Some(est) = report.estimate else {
            continue;
        };
        let est_pose = round_pose(&est.robot);
        out.trajectory.push(TrajectoryRow {
            step: t,
            time: round_sig(st.time),
            truth: round_pose(&st.robot_pose),
            estimate: est_pose,
        });
        for (id, p) in &est.beacons {
            if let Some(q) = truth_beacons.iter().find(|b| b.0 == *id) {
                out.beacons.push(BeaconRow {
                    step: t,
                    time: round_sig(st.time),
                    id: *id,
                    estimate: round_vec(p),
                    truth: round_vec(&q.1),
                });
            }
        }
        out.estimates.push(PoseRecord {
            step: t,
            time: st.time,
            robot: est.robot,
            beacons: est.beacons,
        });
    }

    out.metrics = compute_metrics(&out.estimates, &out.truth, cfg.skip_steps).map_err(|e| match e {
        Error::EmptyStream => Error::Scenario(format!(
            "no estimates after step {} in '{}' (horizon {})",
            cfg.skip_steps, sim.name, sim.horizon
        )),
        other => other,
    })?;
    out.timing = TimingSummary::from_samples(&out.step_times_ms);
    out.map = session.pyramid().map(|p| p.finest().clone());
    Ok(out)
}

/// Runs a scenario and writes its artifacts when an output directory is set.
pub fn run_scenario(cfg: &RunConfig) -> Result<RunOutput> {
    let out = run_session(cfg, |_, _, _| {})?;
    if let Some(dir) = &cfg.output_dir {
        write_artifacts(&out, dir)?;
    }
    Ok(out)
}

/// Runs the same configuration once per seed.
pub fn run_seeds(cfg: &RunConfig, seeds: &[u64], exec: Execution) -> Vec<Result<RunOutput>> {
    par::map(exec, seeds, |&seed| {
        let mut c = cfg.clone().with_seed(seed);
        c.output_dir = None;
        run_scenario(&c)
    })
}

/// `map.pgm`, `map.yaml`, `trajectory.csv`, `beacons.csv`, `metrics.json`
/// and `timing.json`.
pub fn write_artifacts(out: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    match &out.map {
        Some(grid) => write_map(grid, dir, "map")?,
        None => write_map(&OccupancyGrid::new(0.05, Vec2::zeros(), 2, 2, LogOddsParams::default())?, dir, "map")?,
    }
    fs::write(dir.join("trajectory.csv"), trajectory_csv(&out.trajectory))?;
    fs::write(dir.join("beacons.csv"), beacons_csv(&out.beacons))?;
    fs::write(dir.join("metrics.json"), metrics_json(&out.metrics)?)?;
    fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&out.timing)? + "\n")?;
    Ok(())
}

pub fn metrics_json(m: &MetricsReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(m)? + "\n")
}

/// Formats with six significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{}", if x == 0.0 { 0.0 } else { x });
    }
    let sci = format!("{x:.5e}");
    let exp: i32 = sci.split_once('e').and_then(|(_, e)| e.parse().ok()).unwrap_or(0);
    if (-5..6).contains(&exp) {
        let rounded: f64 = sci.parse().unwrap_or(x);
        format!("{rounded:.prec$}", prec = (5 - exp) as usize)
    } else {
        sci
    }
}

/// The value `sig6` writes, read back.
pub fn round_sig(x: f64) -> f64 {
    sig6(x).parse().unwrap_or(x)
}

fn round_vec(v: &Vec2) -> Vec2 {
    Vec2::new(round_sig(v.x), round_sig(v.y))
}

fn round_pose(p: &Pose2) -> Pose2 {
    Pose2 {
        x: round_sig(p.x),
        y: round_sig(p.y),
        theta: round_sig(p.theta),
    }
}

pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut s = String::from(TRAJECTORY_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.step,
            sig6(r.time),
            sig6(r.truth.x),
            sig6(r.truth.y),
            sig6(r.truth.theta),
            sig6(r.estimate.x),
            sig6(r.estimate.y),
            sig6(r.estimate.theta)
        );
    }
    s
}

pub fn beacons_csv(rows: &[BeaconRow]) -> String {
    let mut s = String::from(BEACONS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.step,
            sig6(r.time),
            r.id,
            sig6(r.estimate.x),
            sig6(r.estimate.y),
            sig6(r.truth.x),
            sig6(r.truth.y)
        );
    }
    s
}

fn csv_rows<'a>(text: &'a str, header: &str, cols: usize) -> Result<Vec<Vec<&'a str>>> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(Error::Config("unexpected CSV header".into()));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() == cols {
                Ok(f)
            } else {
                Err(Error::Config(format!("expected {cols} CSV fields, got {}", f.len())))
            }
        })
        .collect()
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Config(format!("bad CSV number '{s}'")))
}

pub fn parse_trajectory_csv(text: &str) -> Result<Vec<TrajectoryRow>> {
    csv_rows(text, TRAJECTORY_HEADER, 8)?
        .into_iter()
        .map(|f| {
            Ok(TrajectoryRow {
                step: num(f[0])?,
                time: num(f[1])?,
                truth: Pose2 {
                    x: num(f[2])?,
                    y: num(f[3])?,
                    theta: num(f[4])?,
                },
                estimate: Pose2 {
                    x: num(f[5])?,
                    y: num(f[6])?,
                    theta: num(f[7])?,
                },
            })
        })
        .collect()
}

pub fn parse_beacons_csv(text: &str) -> Result<Vec<BeaconRow>> {
    csv_rows(text, BEACONS_HEADER, 7)?
        .into_iter()
        .map(|f| {
            Ok(BeaconRow {
                step: num(f[0])?,
                time: num(f[1])?,
                id: num(f[2])?,
                estimate: Vec2::new(num(f[3])?, num(f[4])?),
                truth: Vec2::new(num(f[5])?, num(f[6])?),
            })
        })
        .collect()
}

/// One row of a range-weight sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub beacon_err_mean: Option<f64>,
    pub robot_ate_rmse: Option<f64>,
    pub timing_mean_ms: Option<f64>,
    pub error: Option<String>,
    /// Exit code of the failure, for the command line.
    #[serde(skip)]
    pub exit_code: Option<i32>,
}

impl SweepRow {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

pub const SWEEP_HEADER: &str = "gamma,beacon_err_mean,robot_ate_rmse,timing_mean_ms,error";

/// Runs `cfg` once per range weight. A failing run becomes an error row and
/// the sweep goes on.
pub fn gamma_sweep(cfg: &RunConfig, gammas: &[f64], exec: Execution) -> Result<Vec<SweepRow>> {
    if gammas.is_empty() {
        return Err(Error::Config("gamma sweep needs at least one value".into()));
    }
    Ok(par::map(exec, gammas, |&g| {
        let mut c = cfg.clone().with_gamma(g);
        c.output_dir = None;
        match run_scenario(&c) {
            Ok(out) => SweepRow {
                gamma: g,
                beacon_err_mean: Some(out.metrics.beacon_err_mean),
                robot_ate_rmse: Some(out.metrics.robot_ate_rmse),
                timing_mean_ms: out.timing.map(|t| t.mean_ms),
                error: None,
                exit_code: None,
            },
            Err(e) => SweepRow {
                gamma: g,
                beacon_err_mean: None,
                robot_ate_rmse: None,
                timing_mean_ms: None,
                error: Some(e.to_string()),
                exit_code: Some(e.exit_code()),
            },
        }
    }))
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let opt = |v: Option<f64>| v.map(sig6).unwrap_or_default();
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            sig6(r.gamma),
            opt(r.beacon_err_mean),
            opt(r.robot_ate_rmse),
            opt(r.timing_mean_ms),
            err
        );
    }
    s
}
