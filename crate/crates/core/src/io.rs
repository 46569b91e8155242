//! File formats: map, track, transform and config files, plus atomic writes.
//!
//! Maps are written by a canonical writer (fixed field order, positions with
//! six decimals, covariance entries in six-digit scientific notation), so
//! `write(read(write(m)))` is byte-identical to `write(m)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CameraIntrinsics, Detection, Hyperparameters, Landmark, ObjectMap, Pose, RigidTransform, Track};

pub type PoseTable = BTreeMap<usize, Pose>;

fn mat_from_row_major(v: &[f64; 9]) -> Matrix3<f64> {
    Matrix3::from_row_slice(v)
}

fn mat_to_row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = m[(r, c)];
        }
    }
    out
}

/// Deserializes `text`, reporting the path of the first offending value.
pub fn parse_json<T: DeserializeOwned>(text: &str, context: &str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        Error::Json {
            context: context.to_string(),
            field: if path == "." { String::new() } else { path },
            source: e.into_inner(),
        }
    })?;
    de.end().map_err(|source| Error::Json {
        context: context.to_string(),
        field: String::new(),
        source,
    })?;
    Ok(value)
}

// ---------------------------------------------------------------- map files

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapFile {
    agent_id: String,
    frame_label: String,
    landmarks: Vec<LandmarkRecord>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LandmarkRecord {
    id: u64,
    position: [f64; 3],
    covariance: [f64; 9],
}

pub fn map_from_json(text: &str) -> Result<ObjectMap> {
    let file: MapFile = parse_json(text, "map file")?;
    let landmarks = file
        .landmarks
        .into_iter()
        .map(|r| Landmark {
            landmark_id: r.id,
            position: Vector3::from(r.position),
            covariance: mat_from_row_major(&r.covariance),
        })
        .collect();
    ObjectMap::new(file.agent_id, file.frame_label, landmarks)
}

fn push_fixed(out: &mut String, v: f64) {
    let _ = write!(out, "{v:.6}");
}

fn push_sci(out: &mut String, v: f64) {
    let _ = write!(out, "{v:.6e}");
}

/// Canonical JSON encoding of a map.
pub fn map_to_json(map: &ObjectMap) -> String {
    let mut out = String::with_capacity(64 + 200 * map.landmarks.len());
    out.push_str("{\"agent_id\":");
    out.push_str(&serde_json::to_string(&map.agent_id).expect("string serializes"));
    out.push_str(",\"frame_label\":");
    out.push_str(&serde_json::to_string(&map.frame_label).expect("string serializes"));
    out.push_str(",\"landmarks\":[");
    for (i, lm) in map.landmarks.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "\n{{\"id\":{},\"position\":[", lm.landmark_id);
        for (k, v) in lm.position.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            push_fixed(&mut out, *v);
        }
        out.push_str("],\"covariance\":[");
        for (k, v) in mat_to_row_major(&lm.covariance).iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            push_sci(&mut out, *v);
        }
        out.push_str("]}");
    }
    out.push_str("\n]}\n");
    out
}

pub fn read_map(path: impl AsRef<Path>) -> Result<ObjectMap> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    map_from_json(&text).map_err(|e| with_context(e, path))
}

pub fn write_map(path: impl AsRef<Path>, map: &ObjectMap) -> Result<()> {
    write_atomic(path, map_to_json(map).as_bytes())
}

fn with_context(e: Error, path: &Path) -> Error {
    match e {
        Error::Json { field, source, .. } => Error::Json {
            context: path.display().to_string(),
            field,
            source,
        },
        other => other,
    }
}

// -------------------------------------------------------------- track files

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntrinsicsRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: f64,
    height: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRecord {
    frame: usize,
    rotation: [f64; 9],
    translation: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRecord {
    frame: usize,
    u: f64,
    v: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackRecord {
    id: u64,
    detections: Vec<DetectionRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackFile {
    intrinsics: IntrinsicsRecord,
    poses: Vec<PoseRecord>,
    tracks: Vec<TrackRecord>,
}

/// Contents of a track file: calibration, poses and 2D tracks of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet {
    pub intrinsics: CameraIntrinsics,
    pub poses: PoseTable,
    pub tracks: Vec<Track>,
}

impl TrackSet {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        for track in &self.tracks {
            track.validate()?;
            for (k, d) in track.detections.iter().enumerate() {
                if !self.intrinsics.contains(&d.centroid) {
                    return Err(Error::invalid(
                        format!("tracks[id={}].detections[{k}]", track.track_id),
                        format!("centroid ({}, {}) outside the image", d.centroid.x, d.centroid.y),
                    ));
                }
                if !self.poses.contains_key(&d.frame_index) {
                    return Err(Error::invalid(
                        format!("tracks[id={}].detections[{k}].frame", track.track_id),
                        format!("no pose for frame {}", d.frame_index),
                    ));
                }
            }
        }
        Ok(())
    }
}

pub fn tracks_from_json(text: &str) -> Result<TrackSet> {
    let file: TrackFile = parse_json(text, "track file")?;
    let i = file.intrinsics;
    let intrinsics = CameraIntrinsics {
        fx: i.fx,
        fy: i.fy,
        cx: i.cx,
        cy: i.cy,
        width: i.width,
        height: i.height,
    };
    let mut poses = PoseTable::new();
    for (k, p) in file.poses.into_iter().enumerate() {
        let pose = Pose::new(mat_from_row_major(&p.rotation), Vector3::from(p.translation), p.frame)
            .map_err(|e| match e {
                Error::InvalidField { field, reason } => Error::invalid(format!("poses[{k}].{field}"), reason),
                other => other,
            })?;
        if poses.insert(p.frame, pose).is_some() {
            return Err(Error::invalid(format!("poses[{k}].frame"), format!("duplicate frame {}", p.frame)));
        }
    }
    let tracks = file
        .tracks
        .into_iter()
        .map(|t| Track {
            track_id: t.id,
            detections: t
                .detections
                .into_iter()
                .map(|d| Detection {
                    frame_index: d.frame,
                    centroid: Vector2::new(d.u, d.v),
                })
                .collect(),
        })
        .collect();
    let set = TrackSet {
        intrinsics,
        poses,
        tracks,
    };
    set.validate()?;
    Ok(set)
}

pub fn tracks_to_json(set: &TrackSet) -> String {
    let k = &set.intrinsics;
    let file = TrackFile {
        intrinsics: IntrinsicsRecord {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
        },
        poses: set
            .poses
            .values()
            .map(|p| PoseRecord {
                frame: p.frame_index,
                rotation: mat_to_row_major(&p.rotation),
                translation: p.translation.into(),
            })
            .collect(),
        tracks: set
            .tracks
            .iter()
            .map(|t| TrackRecord {
                id: t.track_id,
                detections: t
                    .detections
                    .iter()
                    .map(|d| DetectionRecord {
                        frame: d.frame_index,
                        u: d.centroid.x,
                        v: d.centroid.y,
                    })
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_string(&file).expect("track file serializes")
}

pub fn read_tracks(path: impl AsRef<Path>) -> Result<TrackSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    tracks_from_json(&text).map_err(|e| with_context(e, path))
}

// ---------------------------------------------------------- transform files

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransformRecord {
    rotation: [f64; 9],
    translation: [f64; 3],
}

pub fn transform_from_json(text: &str) -> Result<RigidTransform> {
    let rec: TransformRecord = parse_json(text, "transform file")?;
    RigidTransform::new(mat_from_row_major(&rec.rotation), Vector3::from(rec.translation))
}

pub fn transform_to_json(t: &RigidTransform) -> String {
    serde_json::to_string(&TransformRecord {
        rotation: mat_to_row_major(&t.rotation),
        translation: t.translation.into(),
    })
    .expect("transform serializes")
}

pub fn read_transform(path: impl AsRef<Path>) -> Result<RigidTransform> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    transform_from_json(&text).map_err(|e| with_context(e, path))
}

pub fn rotation_row_major(m: &Matrix3<f64>) -> [f64; 9] {
    mat_to_row_major(m)
}

// ------------------------------------------------------------- config files

/// Parses `key = value` lines on top of the defaults. `#` starts a comment.
pub fn config_from_str(text: &str) -> Result<Hyperparameters> {
    let mut params = Hyperparameters::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .or_else(|| line.split_once(':'))
            .ok_or_else(|| Error::invalid(format!("line {}", lineno + 1), format!("expected `key = value`, got `{line}`")))?;
        params.set(key.trim(), value.trim())?;
    }
    params.validate()?;
    Ok(params)
}

pub fn config_to_string(p: &Hyperparameters) -> String {
    format!(
        "n_min = {}\nomega_percentile = {}\nwindow = {}\noverlap = {}\nn_max = {}\nsigma = {}\nepsilon = {}\ngamma = {}\ns_max = {}\ntheta_overlap = {}\ntheta_rp = {}\ntheta_yaw = {}\nt_max = {}\niou_voxel = {}\nmax_candidates = {}\nprune_yaw = {}\n",
        p.n_min,
        p.omega_percentile,
        p.window,
        p.overlap,
        p.n_max,
        p.sigma,
        p.epsilon,
        p.gamma,
        p.s_max,
        p.theta_overlap,
        p.theta_rp,
        p.theta_yaw,
        p.t_max,
        p.iou_voxel,
        p.max_candidates,
        p.prune_yaw
    )
}

pub fn read_config(path: impl AsRef<Path>) -> Result<Hyperparameters> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    config_from_str(&text)
}

/// Writes through a temporary file in the destination directory, then renames.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_map() -> ObjectMap {
        ObjectMap::new(
            "uav-1",
            "odom",
            vec![
                Landmark::new(3, Vector3::new(1.0, -2.5, 0.25), Matrix3::identity() * 1e-4).unwrap(),
                Landmark::new(7, Vector3::new(100.123456789, 0.0, -0.0), Matrix3::zeros()).unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn map_file_shape() {
        let text = map_to_json(&sample_map());
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["agent_id"], "uav-1");
        assert_eq!(v["landmarks"][0]["id"], 3);
        assert_eq!(v["landmarks"][0]["covariance"].as_array().unwrap().len(), 9);
        assert_eq!(v["landmarks"][1]["position"][0].as_f64().unwrap(), 100.123457);
    }

    #[test]
    fn map_rejects_duplicate_ids_and_unknown_fields() {
        let dup = r#"{"agent_id":"a","frame_label":"f","landmarks":[
            {"id":1,"position":[0,0,0],"covariance":[0,0,0,0,0,0,0,0,0]},
            {"id":1,"position":[1,0,0],"covariance":[0,0,0,0,0,0,0,0,0]}]}"#;
        assert!(map_from_json(dup).is_err());
        let extra = r#"{"agent_id":"a","frame_label":"f","landmarks":[],"color":1}"#;
        assert!(map_from_json(extra).is_err());
        let missing = r#"{"agent_id":"a","landmarks":[]}"#;
        let msg = map_from_json(missing).unwrap_err().to_string();
        assert!(msg.contains("frame_label"), "{msg}");
    }

    #[test]
    fn track_file_round_trip() {
        let text = r#"{"intrinsics":{"fx":400,"fy":400,"cx":320,"cy":240,"width":640,"height":480},
            "poses":[{"frame":0,"rotation":[1,0,0,0,1,0,0,0,1],"translation":[0,0,0]},
                     {"frame":1,"rotation":[1,0,0,0,1,0,0,0,1],"translation":[1,0,0]}],
            "tracks":[{"id":5,"detections":[{"frame":0,"u":10,"v":20},{"frame":1,"u":11,"v":21}]}]}"#;
        let set = tracks_from_json(text).unwrap();
        assert_eq!(set.tracks[0].track_id, 5);
        assert_eq!(set.poses.len(), 2);
        let again = tracks_from_json(&tracks_to_json(&set)).unwrap();
        assert_eq!(again, set);
    }

    #[test]
    fn track_file_errors_name_the_field() {
        let bad_pixel = r#"{"intrinsics":{"fx":400,"fy":400,"cx":320,"cy":240,"width":640,"height":480},
            "poses":[{"frame":0,"rotation":[1,0,0,0,1,0,0,0,1],"translation":[0,0,0]}],
            "tracks":[{"id":5,"detections":[{"frame":0,"u":700,"v":20}]}]}"#;
        let msg = tracks_from_json(bad_pixel).unwrap_err().to_string();
        assert!(msg.contains("tracks[id=5].detections[0]"), "{msg}");

        let bad_rot = r#"{"intrinsics":{"fx":400,"fy":400,"cx":320,"cy":240,"width":640,"height":480},
            "poses":[{"frame":0,"rotation":[2,0,0,0,1,0,0,0,1],"translation":[0,0,0]}],
            "tracks":[]}"#;
        let msg = tracks_from_json(bad_rot).unwrap_err().to_string();
        assert!(msg.contains("poses[0].rotation"), "{msg}");

        let unordered = r#"{"intrinsics":{"fx":400,"fy":400,"cx":320,"cy":240,"width":640,"height":480},
            "poses":[{"frame":0,"rotation":[1,0,0,0,1,0,0,0,1],"translation":[0,0,0]},
                     {"frame":1,"rotation":[1,0,0,0,1,0,0,0,1],"translation":[0,0,0]}],
            "tracks":[{"id":2,"detections":[{"frame":1,"u":1,"v":1},{"frame":0,"u":1,"v":1}]}]}"#;
        assert!(tracks_from_json(unordered).is_err());

        let wrong_type = r#"{"intrinsics":{"fx":400,"fy":400,"cx":320,"cy":240,"width":640,"height":480},
            "poses":[],"tracks":[{"id":1,"detections":[{"frame":0,"u":"x","v":1}]}]}"#;
        let msg = tracks_from_json(wrong_type).unwrap_err().to_string();
        assert!(msg.contains("tracks[0].detections[0].u"), "{msg}");
        let msg = map_from_json(r#"{"agent_id":"a","frame_label":"o","landmarks":[{"id":1,"position":[0,0]}]}"#)
            .unwrap_err()
            .to_string();
        assert!(msg.contains("landmarks[0].position"), "{msg}");
        assert!(map_from_json("{").unwrap_err().to_string().starts_with("map file: "));
    }

    #[test]
    fn config_parsing() {
        let p = config_from_str("# comment\ngamma = 0.2\ntheta_rp=6 # oblique\n\nprune_yaw = true\n").unwrap();
        assert_eq!(p.gamma, 0.2);
        assert_eq!(p.theta_rp, 6.0);
        assert!(p.prune_yaw);
        assert_eq!(p.n_max, 50);
        let err = config_from_str("window = 2\nbanana = 3\n").unwrap_err();
        assert!(err.to_string().contains("banana"));
        let err = config_from_str("sigma = abc\n").unwrap_err();
        assert!(err.to_string().contains("sigma"));
        let p = Hyperparameters {
            gamma: 0.2,
            theta_rp: 6.0,
            ..Default::default()
        };
        assert_eq!(config_from_str(&config_to_string(&p)).unwrap(), p);
    }

    #[test]
    fn transform_round_trip() {
        let t = RigidTransform::from_euler_deg(1.0, 2.0, 3.0, Vector3::new(4.0, 5.0, 6.0));
        let back = transform_from_json(&transform_to_json(&t)).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    fn arb_landmark() -> impl Strategy<Value = (Vector3<f64>, Matrix3<f64>)> {
        (
            prop::array::uniform3(-1e4..1e4f64),
            prop::array::uniform9(-1.0..1.0f64),
            prop::array::uniform3(1e-3..1e2f64),
        )
            .prop_map(|(p, a, d)| {
                let a = Matrix3::from_row_slice(&a);
                let c = a * a.transpose() * 1e-3 + Matrix3::from_diagonal(&Vector3::from(d));
                let c = (c + c.transpose()) * 0.5;
                (Vector3::from(p), c)
            })
    }

    proptest! {
        #[test]
        fn map_serialization_is_canonical(
            lms in prop::collection::vec(arb_landmark(), 0..20),
            agent in "[a-z0-9 \"\\\\-]{0,12}",
        ) {
            let landmarks = lms
                .into_iter()
                .enumerate()
                .map(|(i, (p, c))| Landmark { landmark_id: i as u64 * 3, position: p, covariance: c })
                .collect();
            let map = ObjectMap { agent_id: agent, frame_label: "odom".into(), landmarks };
            let first = map_to_json(&map);
            let parsed = map_from_json(&first).unwrap();
            prop_assert_eq!(&parsed.agent_id, &map.agent_id);
            prop_assert_eq!(map_to_json(&parsed), first);
        }
    }
}
