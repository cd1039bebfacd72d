use std::path::Path;

use serde::{Deserialize, Serialize};

use super::script::{BeaconAction, BeaconEvent, BeaconScript, BeaconTruth, TrajectoryScript};
use super::{raycast_with, sample_uwb_ranges_with, step_rng, Extent, Purpose, Segment, SensorSpec, World};
use crate::ekf::RangeSet;
use crate::error::{Error, Result};
use crate::geometry::{NodeId, Pose2, StateVector, Vec2, ROBOT_ID};
use crate::map::Scan;
use crate::par::Execution;

/// Where the walls come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WorldSpec {
    Builtin {
        builtin: String,
    },
    /// Segments as `[x0, y0, x1, y1]`, extent as `[xmin, ymin, xmax, ymax]`.
    Custom {
        segments: Vec<[f64; 4]>,
        extent: [f64; 4],
    },
}

/// Robot motion: explicit timed waypoints or a path at constant speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TrajectorySpec {
    /// Waypoints as `[t, x, y]`.
    Waypoints {
        waypoints: Vec<[f64; 3]>,
        #[serde(default)]
        speed: f64,
    },
    Path {
        path: Vec<[f64; 2]>,
        speed: f64,
        #[serde(default)]
        closed: bool,
        #[serde(default = "one")]
        loops: usize,
        #[serde(default)]
        corner_radius: f64,
        #[serde(default)]
        start_delay: f64,
    },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialBeacon {
    pub id: NodeId,
    pub x: f64,
    pub y: f64,
}

/// Beacons powered at time 0 plus later events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeaconSpec {
    pub initial: Vec<InitialBeacon>,
    #[serde(default)]
    pub events: Vec<BeaconEvent>,
}

fn default_delta() -> f64 {
    0.1
}

/// Scenario file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub world: WorldSpec,
    pub trajectory: TrajectorySpec,
    pub beacons: BeaconSpec,
    #[serde(default)]
    pub sensors: SensorSpec,
    /// Overrides `sensors.rng_seed` when present.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Number of simulated steps.
    pub horizon: usize,
    /// Step length in seconds.
    #[serde(default = "default_delta")]
    pub delta: f64,
}

const BUILTINS: &[(&str, &str)] = &[
    ("workshop", include_str!("../../scenarios/workshop.json")),
    ("workshop_fast_turn", include_str!("../../scenarios/workshop_fast_turn.json")),
    ("corridor", include_str!("../../scenarios/corridor.json")),
    ("dynamic", include_str!("../../scenarios/dynamic.json")),
];

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn builtin_names() -> Vec<&'static str> {
        BUILTINS.iter().map(|b| b.0).collect()
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let text = BUILTINS
            .iter()
            .find(|b| b.0 == name)
            .ok_or_else(|| Error::Config(format!("unknown builtin scenario '{name}'")))?
            .1;
        Self::from_json(text)
    }

    /// A builtin name or a path to a scenario file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if BUILTINS.iter().any(|b| b.0 == name_or_path) && !Path::new(name_or_path).exists() {
            Self::builtin(name_or_path)
        } else {
            Self::load(Path::new(name_or_path))
        }
    }

    pub fn effective_seed(&self) -> u64 {
        self.seed.unwrap_or(self.sensors.rng_seed)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Checks the file and prepares it for stepping.
    pub fn build(&self) -> Result<Simulation> {
        if !(self.delta > 0.0) {
            return Err(Error::Config("delta must be positive".into()));
        }
        self.sensors.validate()?;
        let world = match &self.world {
            WorldSpec::Builtin { builtin } => World::builtin(builtin)?,
            WorldSpec::Custom { segments, extent } => World::new(
                segments
                    .iter()
                    .map(|s| Segment::new(Vec2::new(s[0], s[1]), Vec2::new(s[2], s[3])))
                    .collect(),
                Extent {
                    min: Vec2::new(extent[0], extent[1]),
                    max: Vec2::new(extent[2], extent[3]),
                },
            )?,
        };
        let trajectory = match &self.trajectory {
            TrajectorySpec::Waypoints { waypoints, speed } => {
                TrajectoryScript::new(waypoints.iter().map(|w| (w[0], Vec2::new(w[1], w[2]))).collect(), *speed)?
            }
            TrajectorySpec::Path {
                path,
                speed,
                closed,
                loops,
                corner_radius,
                start_delay,
            } => {
                let pts: Vec<Vec2> = path.iter().map(|p| Vec2::new(p[0], p[1])).collect();
                TrajectoryScript::from_path(&pts, *closed, *loops, *speed, *corner_radius, *start_delay)?
            }
        };
        let mut events = Vec::new();
        for b in &self.beacons.initial {
            events.push(BeaconEvent {
                time: 0.0,
                id: b.id,
                action: BeaconAction::Place { x: b.x, y: b.y },
            });
            events.push(BeaconEvent {
                time: 0.0,
                id: b.id,
                action: BeaconAction::PowerOn,
            });
        }
        events.extend(self.beacons.events.iter().cloned());
        let mut ids: Vec<NodeId> = self.beacons.initial.iter().map(|b| b.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate initial beacon id".into()));
        }
        let sensors = SensorSpec {
            rng_seed: self.effective_seed(),
            ..self.sensors
        };
        Ok(Simulation {
            name: self.name.clone(),
            world,
            trajectory,
            beacons: BeaconScript::new(events)?,
            sensors,
            horizon: self.horizon,
            delta: self.delta,
            execution: Execution::default(),
        })
    }
}

/// A scenario ready to be stepped.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub name: String,
    pub world: World,
    pub trajectory: TrajectoryScript,
    pub beacons: BeaconScript,
    pub sensors: SensorSpec,
    pub horizon: usize,
    pub delta: f64,
    pub execution: Execution,
}

impl Simulation {
    pub fn time_of(&self, step: usize) -> f64 {
        step as f64 * self.delta
    }

    /// Ground truth without sensor sampling.
    pub fn truth_at(&self, step: usize) -> (Pose2, Vec2, Vec<BeaconTruth>) {
        let t = self.time_of(step);
        let (pose, v) = self.trajectory.sample(t);
        (pose, v, self.beacons.state_at(t))
    }
}

/// Everything the simulator produces for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct SimStep {
    pub step: usize,
    pub time: f64,
    pub robot_pose: Pose2,
    /// Robot and powered beacons, beacons by ascending id.
    pub truth: StateVector,
    /// Every placed beacon, powered or not.
    pub beacons: Vec<BeaconTruth>,
    pub scan: Scan,
    pub ranges: RangeSet,
    /// Beacon script events that fired since the previous step.
    pub events: Vec<BeaconEvent>,
}

/// Samples step `t`; a pure function of the scenario and its seed.
pub fn step_scenario(sim: &Simulation, t: usize) -> Result<SimStep> {
    if t >= sim.horizon {
        return Err(Error::Scenario(format!("step {t} beyond horizon {}", sim.horizon)));
    }
    let time = sim.time_of(t);
    let (robot_pose, robot_vel, beacons) = sim.truth_at(t);
    let powered: Vec<&BeaconTruth> = beacons.iter().filter(|b| b.powered).collect();

    let mut positions = vec![robot_pose.position()];
    let mut velocities = vec![robot_vel];
    let mut ids = Vec::new();
    for b in &powered {
        positions.push(b.position);
        velocities.push(b.velocity);
        ids.push(b.id);
    }
    let truth = StateVector::new(positions, velocities, ids)?;

    let seed = sim.sensors.rng_seed;
    let step = t as u64;
    let scan = raycast_with(&sim.world, &robot_pose, &sim.sensors, sim.execution, &mut step_rng(seed, step, Purpose::Lidar));
    let nodes: Vec<(NodeId, Vec2)> = std::iter::once((ROBOT_ID, robot_pose.position()))
        .chain(powered.iter().map(|b| (b.id, b.position)))
        .collect();
    let ranges = sample_uwb_ranges_with(&nodes, &sim.world, &sim.sensors, time, &mut step_rng(seed, step, Purpose::Uwb));
    let events = if t == 0 {
        sim.beacons.events.iter().filter(|e| e.time <= 0.0).cloned().collect()
    } else {
        sim.beacons.events_between(sim.time_of(t - 1), time)
    };
    Ok(SimStep {
        step: t,
        time,
        robot_pose,
        truth,
        beacons,
        scan,
        ranges,
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse_and_build() {
        for name in Scenario::builtin_names() {
            let s = Scenario::builtin(name).unwrap();
            let sim = s.build().unwrap();
            assert!(sim.horizon > 0, "{name}");
            let first = step_scenario(&sim, 0).unwrap();
            assert!(first.truth.n_beacons() >= 3, "{name}");
        }
    }

    #[test]
    fn first_step_at_first_waypoint() {
        let sim = Scenario::builtin("workshop").unwrap().build().unwrap();
        let s = step_scenario(&sim, 0).unwrap();
        assert!((s.robot_pose.position() - sim.trajectory.sample(0.0).0.position()).norm() < 1e-12);
        // after the start delay the robot cruises at the scripted speed
        let moving = step_scenario(&sim, 100).unwrap();
        assert!((moving.truth.velocities[0].norm() - 0.8).abs() < 1e-9);
    }

    #[test]
    fn reproducible_per_seed() {
        let sim = Scenario::builtin("workshop").unwrap().build().unwrap();
        assert_eq!(step_scenario(&sim, 42).unwrap(), step_scenario(&sim, 42).unwrap());
        let other = Scenario::builtin("workshop").unwrap().with_seed(99).build().unwrap();
        assert_ne!(step_scenario(&sim, 42).unwrap().ranges, step_scenario(&other, 42).unwrap().ranges);
    }

    #[test]
    fn powered_off_beacon_has_no_ranges() {
        let sim = Scenario::builtin("dynamic").unwrap().build().unwrap();
        let off = sim.beacons.events.iter().find(|e| e.action == BeaconAction::PowerOff).unwrap().clone();
        let on_again = sim
            .beacons
            .events
            .iter()
            .find(|e| e.id == off.id && e.action == BeaconAction::PowerOn && e.time > off.time)
            .unwrap()
            .time;
        let first = (off.time / sim.delta).round() as usize;
        let back = (on_again / sim.delta).round() as usize;
        assert!(step_scenario(&sim, first - 1).unwrap().ranges.measurements.iter().any(|m| m.involves(off.id)));
        for t in first..back {
            let s = step_scenario(&sim, t).unwrap();
            assert!(!s.ranges.measurements.iter().any(|m| m.involves(off.id)), "step {t}");
            assert!(s.truth.index_of(off.id).is_none());
        }
        assert!(step_scenario(&sim, back).unwrap().ranges.measurements.iter().any(|m| m.involves(off.id)));
    }

    #[test]
    fn events_reported_once() {
        let sim = Scenario::builtin("dynamic").unwrap().build().unwrap();
        let total: usize = (0..sim.horizon).map(|t| step_scenario(&sim, t).unwrap().events.len()).sum();
        let in_horizon = sim.beacons.events.iter().filter(|e| e.time <= sim.time_of(sim.horizon - 1)).count();
        assert_eq!(total, in_horizon);
    }

    #[test]
    fn beyond_horizon_is_an_error() {
        let sim = Scenario::builtin("corridor").unwrap().build().unwrap();
        assert!(step_scenario(&sim, sim.horizon).is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&Scenario::builtin("corridor").unwrap().to_json()).unwrap();
        v["colour"] = serde_json::json!("red");
        assert!(Scenario::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn json_round_trip() {
        let s = Scenario::builtin("dynamic").unwrap();
        assert_eq!(Scenario::from_json(&s.to_json()).unwrap(), s);
    }

    #[test]
    fn custom_world_and_waypoints() {
        let text = r#"{
            "world": {"segments": [[-3,-3,3,-3],[3,-3,3,3],[3,3,-3,3],[-3,3,-3,-3]], "extent": [-3,-3,3,3]},
            "trajectory": {"waypoints": [[0,0,0],[10,2,0]]},
            "beacons": {"initial": [{"id": 1, "x": -2.5, "y": -2.5}, {"id": 2, "x": 2.5, "y": -2.5}, {"id": 3, "x": 0, "y": 2.5}]},
            "sensors": {"lidar_noise_std": 0.0},
            "seed": 4,
            "horizon": 20
        }"#;
        let sim = Scenario::from_json(text).unwrap().build().unwrap();
        let s = step_scenario(&sim, 5).unwrap();
        assert!((s.robot_pose.position() - Vec2::new(0.1, 0.0)).norm() < 1e-12);
        assert_eq!(s.ranges.measurements.len(), 6);
        assert!(s.scan.valid.iter().all(|v| *v));
    }
}
