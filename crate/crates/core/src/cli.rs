//! Command-line front-end. Every subcommand reads its inputs, validates them,
//! and writes outputs atomically.
//!
//! Exit codes: 0 success, 1 malformed input or runtime error, 2 `match`
//! produced no surviving hypothesis.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::kv::{Key, Value, VisitSource};
use log::warn;
use nalgebra::Vector3;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::alignment::{match_maps, AlignmentHypothesis};
use crate::error::{Error, Result};
use crate::evaluation::{precision_recall, score_run, timing};
use crate::io::{
    parse_json, read_config, read_map, read_tracks, read_transform, rotation_row_major, tracks_to_json, transform_to_json,
    write_atomic, write_map, PoseTable, TrackSet,
};
use crate::model::{CameraIntrinsics, Hyperparameters, Pose, RigidTransform};
use crate::simulation::{default_intrinsics, generate_scene, render_tracks, RenderOptions, SceneSpec, TrajectorySpec};
use crate::submap::{generate_submaps, mahalanobis_filter};
use crate::triangulation::build_map;

#[derive(Debug, Parser)]
#[command(name = "vista-align", version, about = "Object-map triangulation, submap matching and frame alignment")]
pub struct Cli {
    /// Seed for all randomness (overrides the seed in a scene file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Emit log records as JSON lines on stderr.
    #[arg(long, global = true)]
    pub log_json: bool,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true, env = "VISTA_ALIGN_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ParamArgs {
    /// Hyperparameter file with `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one hyperparameter, e.g. `--set theta_rp=6` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ParamArgs {
    fn load(&self) -> Result<Hyperparameters> {
        let mut p = match &self.config {
            Some(path) => read_config(path)?,
            None => Hyperparameters::default(),
        };
        for item in &self.overrides {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::invalid("--set", format!("expected KEY=VALUE, got `{item}`")))?;
            p.set(k.trim(), v.trim())?;
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic scene into a track file.
    Simulate {
        /// Scene description (JSON: n_objects, extent [m], n_dynamic, dynamic_velocity [m/frame], seed).
        #[arg(long)]
        scene: PathBuf,
        /// Trajectory description (JSON: waypoints [m], frames, camera_pitch [deg from nadir], altitude [m]).
        #[arg(long)]
        trajectory: PathBuf,
        /// Camera intrinsics (JSON: fx, fy, cx, cy, width, height in pixels). Default 640x480, f = 400 px.
        #[arg(long)]
        intrinsics: Option<PathBuf>,
        /// Detection noise standard deviation [px].
        #[arg(long, default_value_t = 1.0)]
        noise_px: f64,
        /// Probability of dropping each detection.
        #[arg(long, default_value_t = 0.0)]
        dropout: f64,
        /// Probability of splitting an object's track into two ids.
        #[arg(long, default_value_t = 0.0)]
        duplicate_rate: f64,
        /// Yaw of the odometry frame relative to the world [deg].
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        frame_yaw: f64,
        /// Translation of the odometry frame relative to the world, `x,y,z` [m].
        #[arg(long, value_delimiter = ',', num_args = 1, allow_negative_numbers = true, default_value = "0,0,0")]
        frame_translation: Vec<f64>,
        /// Output track file.
        #[arg(long)]
        out: PathBuf,
        /// Optional ground-truth file: objects and track-to-object assignment.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Optional transform file receiving the world-to-odometry transform.
        #[arg(long)]
        frame_out: Option<PathBuf>,
    },
    /// Triangulate a track file into an object map.
    BuildMap {
        #[arg(long)]
        tracks: PathBuf,
        /// Agent identifier stored in the map.
        #[arg(long, default_value = "agent")]
        agent: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        params: ParamArgs,
    },
    /// Filter a map and split it into submaps.
    Submaps {
        #[arg(long)]
        map: PathBuf,
        /// Directory receiving one JSON file per submap plus index.json.
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        params: ParamArgs,
    },
    /// Match two maps and emit the surviving alignment hypotheses.
    Match {
        #[arg(long)]
        map_a: PathBuf,
        #[arg(long)]
        map_b: PathBuf,
        /// Keep only the best K hypotheses.
        #[arg(long)]
        top_k: Option<usize>,
        /// Output JSON (stdout when absent). Angles in degrees, translation in m.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        params: ParamArgs,
    },
    /// Precision/recall of a map pair against a known frame transform.
    Evaluate {
        #[arg(long)]
        map_a: PathBuf,
        #[arg(long)]
        map_b: PathBuf,
        /// Transform file mapping map-A coordinates into map-B coordinates.
        #[arg(long, conflicts_with_all = ["frame_a", "frame_b"])]
        truth: Option<PathBuf>,
        /// World-to-odometry transform of map A (as written by `simulate --frame-out`).
        #[arg(long, requires = "frame_b")]
        frame_a: Option<PathBuf>,
        /// World-to-odometry transform of map B.
        #[arg(long, requires = "frame_a")]
        frame_b: Option<PathBuf>,
        /// Cardinality thresholds `lo:hi` (inclusive) or a comma list.
        #[arg(long, default_value = "3:15")]
        sweep: String,
        /// Timed repetitions per submap pair (at least 3).
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Output CSV (stdout when absent). Runtimes in seconds.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        params: ParamArgs,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntrinsicsFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: f64,
    height: f64,
}

#[derive(Debug, Serialize)]
struct HypothesisRecord {
    rotation: [f64; 9],
    translation: [f64; 3],
    cardinality: usize,
    source_submap: usize,
    target_submap: usize,
    roll: f64,
    pitch: f64,
    yaw: f64,
}

impl From<&AlignmentHypothesis> for HypothesisRecord {
    fn from(h: &AlignmentHypothesis) -> Self {
        Self {
            rotation: rotation_row_major(&h.transform.rotation),
            translation: h.transform.translation.into(),
            cardinality: h.cardinality,
            source_submap: h.source_submap,
            target_submap: h.target_submap,
            roll: h.attitude.roll,
            pitch: h.attitude.pitch,
            yaw: h.attitude.yaw,
        }
    }
}

fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_json(&text, &format!("{what} {}", path.display()))
}

/// Logs the end of a pipeline stage with its counts and wall time. Under
/// `--log-json` the counts become fields of the JSON record.
fn stage(name: &str, started: Instant, counts: &[(&str, usize)]) {
    let elapsed = started.elapsed().as_secs_f64();
    let mut fields: Vec<(&str, Value)> = vec![("stage", Value::from(name)), ("elapsed_s", Value::from(elapsed))];
    fields.extend(counts.iter().map(|(k, v)| (*k, Value::from(*v))));
    let mut text = format!("{name}:");
    for (k, v) in counts {
        let _ = write!(text, " {k}={v}");
    }
    let _ = write!(text, " ({elapsed:.3} s)");
    let target = "vista_align::stage";
    if log::log_enabled!(target: target, log::Level::Info) {
        log::logger().log(
            &log::Record::builder()
                .args(format_args!("{text}"))
                .level(log::Level::Info)
                .target(target)
                .module_path_static(Some(module_path!()))
                .key_values(&fields.as_slice())
                .build(),
        );
    }
}

struct JsonFields<'a>(&'a mut serde_json::Map<String, serde_json::Value>);

impl<'kvs> VisitSource<'kvs> for JsonFields<'_> {
    fn visit_pair(&mut self, key: Key<'kvs>, value: Value<'kvs>) -> std::result::Result<(), log::kv::Error> {
        let v = if let Some(n) = value.to_u64() {
            json!(n)
        } else if let Some(x) = value.to_f64() {
            json!(x)
        } else {
            json!(value.to_string())
        };
        self.0.insert(key.as_str().to_owned(), v);
        Ok(())
    }
}

fn pretty(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

/// Parses `lo:hi` (inclusive) or `a,b,c`.
pub fn parse_sweep(text: &str) -> Result<Vec<usize>> {
    let bad = || Error::invalid("--sweep", format!("expected `lo:hi` or a comma list, got `{text}`"));
    let values: Vec<usize> = if let Some((lo, hi)) = text.split_once(':') {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        (lo..=hi).collect()
    } else {
        text.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?
    };
    if values.is_empty() {
        return Err(bad());
    }
    Ok(values)
}

fn reframe(poses: &PoseTable, frame: &RigidTransform) -> Result<PoseTable> {
    poses
        .iter()
        .map(|(&f, p)| {
            let pose = Pose::new(frame.rotation * p.rotation, frame.apply(&p.translation), f)?;
            Ok((f, pose))
        })
        .collect()
}

fn simulate(cli: &Cli, cmd: &Command) -> Result<()> {
    let Command::Simulate {
        scene,
        trajectory,
        intrinsics,
        noise_px,
        dropout,
        duplicate_rate,
        frame_yaw,
        frame_translation,
        out,
        truth,
        frame_out,
    } = cmd
    else {
        unreachable!()
    };
    let started = Instant::now();
    let mut spec: SceneSpec = read_json(scene, "scene file")?;
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let traj: TrajectorySpec = read_json(trajectory, "trajectory file")?;
    let k = match intrinsics {
        Some(path) => {
            let f: IntrinsicsFile = read_json(path, "intrinsics file")?;
            CameraIntrinsics::new(f.fx, f.fy, f.cx, f.cy, f.width, f.height)?
        }
        None => default_intrinsics(),
    };
    if frame_translation.len() != 3 {
        return Err(Error::invalid("--frame-translation", "expected three comma-separated values"));
    }
    let objects = generate_scene(&spec)?;
    let options = RenderOptions {
        noise_px: *noise_px,
        dropout: *dropout,
        duplicate_rate: *duplicate_rate,
        seed: spec.seed ^ 0x005e_ed0f_7ac4_5e75,
    };
    let rendered = render_tracks(&objects, &traj, &k, &options)?;
    let frame = RigidTransform::from_euler_deg(
        0.0,
        0.0,
        *frame_yaw,
        Vector3::new(frame_translation[0], frame_translation[1], frame_translation[2]),
    );
    let set = TrackSet {
        poses: reframe(&rendered.tracks.poses, &frame)?,
        ..rendered.tracks
    };
    write_atomic(out, tracks_to_json(&set).as_bytes())?;
    if let Some(path) = truth {
        let doc = json!({
            "objects": objects,
            "track_objects": rendered.track_objects,
            "odom_from_world": {
                "rotation": rotation_row_major(&frame.rotation),
                "translation": <[f64; 3]>::from(frame.translation),
            },
        });
        write_atomic(path, pretty(&doc).as_bytes())?;
    }
    if let Some(path) = frame_out {
        write_atomic(path, transform_to_json(&frame).as_bytes())?;
    }
    stage(
        "simulate",
        started,
        &[
            ("objects", objects.len()),
            ("frames", set.poses.len()),
            ("tracks", set.tracks.len()),
        ],
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let started = Instant::now();
    match &cli.command {
        Command::Simulate { .. } => simulate(cli, &cli.command)?,
        Command::BuildMap {
            tracks,
            agent,
            out,
            params,
        } => {
            let params = params.load()?;
            let set = read_tracks(tracks)?;
            let (map, report) = build_map(&set.tracks, &set.poses, &set.intrinsics, &params, agent)?;
            write_map(out, &map)?;
            stage(
                "build_map",
                started,
                &[
                    ("tracks", set.tracks.len()),
                    ("landmarks", report.landmarks),
                    ("discarded_short", report.discarded_short),
                    ("discarded_diverged", report.discarded_diverged),
                    ("discarded_degenerate", report.discarded_degenerate),
                ],
            );
            // degenerate tracks are reported together with diverged ones
            println!(
                "landmarks={} discarded_diverged={} discarded_short={}",
                report.landmarks,
                report.discarded_diverged + report.discarded_degenerate,
                report.discarded_short
            );
        }
        Command::Submaps { map, out_dir, params } => {
            let params = params.load()?;
            let map = read_map(map)?;
            let filter = mahalanobis_filter(&map, params.omega_percentile);
            let submaps = generate_submaps(&filter.map, &params);
            std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
            let mut index = Vec::with_capacity(submaps.len());
            for s in &submaps {
                let file = format!("submap_{:04}.json", s.id);
                let points: Vec<[f64; 3]> = s.points.iter().map(|p| (*p).into()).collect();
                let doc = json!({
                    "id": s.id,
                    "center": [s.center.x, s.center.y],
                    "landmark_ids": s.landmark_ids,
                    "points": points,
                });
                write_atomic(out_dir.join(&file), pretty(&doc).as_bytes())?;
                index.push(json!({"id": s.id, "file": file, "center": [s.center.x, s.center.y], "size": s.len()}));
            }
            let doc = json!({
                "agent_id": map.agent_id,
                "landmarks_in": map.len(),
                "landmarks_kept": filter.map.len(),
                "threshold": filter.threshold,
                "singular_fallback": filter.singular_fallback,
                "submaps": index,
            });
            write_atomic(out_dir.join("index.json"), pretty(&doc).as_bytes())?;
            stage(
                "submaps",
                started,
                &[
                    ("landmarks_in", map.len()),
                    ("landmarks_kept", filter.map.len()),
                    ("submaps", submaps.len()),
                ],
            );
            println!("submaps={} landmarks_kept={}", submaps.len(), filter.map.len());
        }
        Command::Match {
            map_a,
            map_b,
            top_k,
            out,
            params,
        } => {
            let params = params.load()?;
            let a = read_map(map_a)?;
            let b = read_map(map_b)?;
            let run = match_maps(&a, &b, &params)?;
            let mut kept = run.kept_hypotheses();
            if let Some(k) = top_k {
                kept.truncate(*k);
            }
            let records: Vec<HypothesisRecord> = kept.iter().map(HypothesisRecord::from).collect();
            emit(out.as_deref(), &pretty(&records))?;
            stage(
                "match",
                started,
                &[
                    ("submap_pairs", run.outcomes.len()),
                    ("unique_pairs", run.unique_pairs),
                    ("hypotheses", records.len()),
                ],
            );
            if records.is_empty() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Evaluate {
            map_a,
            map_b,
            truth,
            frame_a,
            frame_b,
            sweep,
            repeats,
            out,
            params,
        } => {
            let params = params.load()?;
            let sweep = parse_sweep(sweep)?;
            let truth = match (truth, frame_a, frame_b) {
                (Some(t), _, _) => read_transform(t)?,
                (None, Some(fa), Some(fb)) => read_transform(fb)?.compose(&read_transform(fa)?.inverse()),
                _ => return Err(Error::invalid("--truth", "give --truth or both --frame-a and --frame-b")),
            };
            let a = read_map(map_a)?;
            let b = read_map(map_b)?;
            let run = match_maps(&a, &b, &params)?;
            let records = score_run(&run, &truth, &params);
            let rows = precision_recall(&records, &params, &sweep);
            stage(
                "match",
                started,
                &[
                    ("submap_pairs", run.outcomes.len()),
                    ("unique_pairs", run.unique_pairs),
                    ("overlapping_pairs", rows.first().map_or(0, |r| r.overlapping_pairs)),
                ],
            );
            let timed = Instant::now();
            let t = timing(&a, &b, &params, *repeats)?;
            stage("timing", timed, &[("repeats", *repeats), ("samples", t.samples)]);
            let mut csv = String::from("s_max,precision,recall,hypothesized,overlapping_pairs,mean_runtime_s,std_runtime_s\n");
            for r in &rows {
                if r.precision_undefined {
                    warn!("no hypotheses at s_max={}; precision reported as 1", r.s_max);
                }
                let _ = writeln!(
                    csv,
                    "{},{:.6},{:.6},{},{},{:.6},{:.6}",
                    r.s_max, r.precision, r.recall, r.hypothesized, r.overlapping_pairs, t.mean_s, t.std_s
                );
            }
            emit(out.as_deref(), &csv)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn init_logging(json_lines: bool) {
    let mut builder = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    if json_lines {
        builder.format(|buf, record| {
            let mut line = serde_json::Map::new();
            line.insert("ts".into(), json!(buf.timestamp().to_string()));
            line.insert("level".into(), json!(record.level().as_str()));
            line.insert("target".into(), json!(record.target()));
            line.insert("message".into(), json!(record.args().to_string()));
            let _ = record.key_values().visit(&mut JsonFields(&mut line));
            writeln!(buf, "{}", serde_json::Value::Object(line))
        });
    }
    let _ = builder.try_init();
}

/// Entry point of the `vista-align` binary.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.log_json);
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            warn!("thread pool already initialized: {e}");
        }
    }
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn sweep_forms() {
        assert_eq!(parse_sweep("3:6").unwrap(), vec![3, 4, 5, 6]);
        assert_eq!(parse_sweep("4,8").unwrap(), vec![4, 8]);
        assert!(parse_sweep("6:3").is_err());
        assert!(parse_sweep("x").is_err());
    }

    #[test]
    fn overrides_are_applied_and_checked() {
        let args = ParamArgs {
            config: None,
            overrides: vec!["theta_rp=6".into(), "gamma = 0.2".into()],
        };
        let p = args.load().unwrap();
        assert_eq!(p.theta_rp, 6.0);
        assert_eq!(p.gamma, 0.2);
        let bad = ParamArgs {
            config: None,
            overrides: vec!["nope=1".into()],
        };
        assert!(bad.load().unwrap_err().to_string().contains("nope"));
    }
}
