//! File formats: TUM and KITTI trajectories, IMU CSV, raster binaries,
//! graph and checkpoint JSON, and the on-disk dataset layout.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{LoopEdge, RawMeasurements, RawVoEdge};
use crate::graph::{ConstraintWeights, EdgeSet, GraphNodes, ImuEdge, PoseVelocityGraph, VoEdge};
use crate::imperative::{moving_average, TrainingTrace};
use crate::imu::{ImuPreintegration, ImuSample, Matrix9};
use crate::manifold::{Pose, Rotation};
use crate::metrics::AlignedComparison;
use crate::par::{self, Execution};
use crate::scale::{observations_from_rasters, CameraIntrinsics, Image, PixelSelection, ScaleRasters};
use crate::sim::{render_pair, NoiseSpec, SceneSpec, SimulatedSequence, TrajectorySpec};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GROUND_TRUTH_FILE: &str = "groundtruth.tum";
pub const ATTITUDE_FILE: &str = "attitudes.tum";
pub const IMU_FILE: &str = "imu.csv";
pub const VO_EDGES_FILE: &str = "vo_edges.json";
pub const SCALE_DIR: &str = "scale";

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| parse_error(path, e.line(), e.to_string()))
}

/// `[tx, ty, tz, qx, qy, qz, qw]`, the TUM pose ordering.
pub fn pose_to_array(pose: &Pose) -> [f64; 7] {
    let t = pose.translation;
    let [w, x, y, z] = pose.rotation.wxyz();
    [t.x, t.y, t.z, x, y, z, w]
}

pub fn pose_from_array(a: &[f64; 7]) -> Result<Pose> {
    let rotation = Rotation::from_wxyz(a[6], a[3], a[4], a[5])?;
    Ok(Pose::new(rotation, Vector3::new(a[0], a[1], a[2])))
}

fn quaternion_to_array(r: &Rotation) -> [f64; 4] {
    let [w, x, y, z] = r.wxyz();
    [x, y, z, w]
}

fn quaternion_from_array(q: &[f64; 4]) -> Result<Rotation> {
    Rotation::from_wxyz(q[3], q[0], q[1], q[2])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryFormat {
    Tum,
    Kitti,
}

impl FromStr for TrajectoryFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tum" => Ok(TrajectoryFormat::Tum),
            "kitti" => Ok(TrajectoryFormat::Kitti),
            other => Err(Error::InvalidArgument(format!("unknown trajectory format '{other}'"))),
        }
    }
}

/// Poses with one timestamp each. KITTI files carry no timestamps, so
/// their frames are stamped with the line index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StampedTrajectory {
    pub times: Vec<f64>,
    pub poses: Vec<Pose>,
}

impl StampedTrajectory {
    pub fn new(times: Vec<f64>, poses: Vec<Pose>) -> Result<Self> {
        if times.len() != poses.len() {
            return Err(Error::InvalidArgument(format!(
                "{} timestamps for {} poses",
                times.len(),
                poses.len()
            )));
        }
        Ok(StampedTrajectory { times, poses })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Splits a line into exactly `n` floats.
fn parse_floats(path: &Path, line_no: usize, line: &str, n: usize) -> Result<Vec<f64>> {
    let values = line
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_error(path, line_no, format!("'{tok}' is not a finite number")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.len() != n {
        return Err(parse_error(path, line_no, format!("expected {n} values, found {}", values.len())));
    }
    Ok(values)
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn format_tum(trajectory: &StampedTrajectory) -> String {
    let mut out = String::new();
    for (t, pose) in trajectory.times.iter().zip(&trajectory.poses) {
        let a = pose_to_array(pose);
        out.push_str(&format!("{t} {} {} {} {} {} {} {}\n", a[0], a[1], a[2], a[3], a[4], a[5], a[6]));
    }
    out
}

pub fn parse_tum(path: &Path, text: &str) -> Result<StampedTrajectory> {
    let mut trajectory = StampedTrajectory::default();
    for (line_no, line) in data_lines(text) {
        let v = parse_floats(path, line_no, line, 8)?;
        let pose = pose_from_array(&[v[1], v[2], v[3], v[4], v[5], v[6], v[7]])
            .map_err(|e| parse_error(path, line_no, e.to_string()))?;
        trajectory.times.push(v[0]);
        trajectory.poses.push(pose);
    }
    Ok(trajectory)
}

pub fn format_kitti(poses: &[Pose]) -> String {
    let mut out = String::new();
    for pose in poses {
        let m = pose.matrix();
        let row: Vec<String> = (0..3).flat_map(|r| (0..4).map(move |c| (r, c))).map(|(r, c)| m[(r, c)].to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_kitti(path: &Path, text: &str) -> Result<StampedTrajectory> {
    let mut trajectory = StampedTrajectory::default();
    for (line_no, line) in data_lines(text) {
        let v = parse_floats(path, line_no, line, 12)?;
        let mut m = Matrix4::identity();
        for r in 0..3 {
            for c in 0..4 {
                m[(r, c)] = v[4 * r + c];
            }
        }
        let rot: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let orthonormality = (rot.transpose() * rot - Matrix3::identity()).abs().max();
        if orthonormality > 1e-6 || rot.determinant() <= 0.0 {
            return Err(parse_error(path, line_no, "rotation block is not a proper rotation"));
        }
        trajectory.times.push(trajectory.poses.len() as f64);
        trajectory.poses.push(Pose::from_matrix(&m));
    }
    Ok(trajectory)
}

pub fn read_trajectory(path: &Path, format: TrajectoryFormat) -> Result<StampedTrajectory> {
    let text = read_text(path)?;
    match format {
        TrajectoryFormat::Tum => parse_tum(path, &text),
        TrajectoryFormat::Kitti => parse_kitti(path, &text),
    }
}

pub fn write_trajectory(path: &Path, trajectory: &StampedTrajectory, format: TrajectoryFormat) -> Result<()> {
    let text = match format {
        TrajectoryFormat::Tum => format_tum(trajectory),
        TrajectoryFormat::Kitti => format_kitti(&trajectory.poses),
    };
    write_bytes(path, text.as_bytes())
}

#[derive(Debug, Serialize, Deserialize)]
struct ImuRow {
    t: f64,
    ax: f64,
    ay: f64,
    az: f64,
    wx: f64,
    wy: f64,
    wz: f64,
}

pub fn write_imu_csv(path: &Path, samples: &[ImuSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in samples {
        let row = ImuRow {
            t: s.t,
            ax: s.accel.x,
            ay: s.accel.y,
            az: s.accel.z,
            wx: s.gyro.x,
            wy: s.gyro.y,
            wz: s.gyro.z,
        };
        w.serialize(row).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    write_bytes(path, &bytes)
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>> {
    let text = read_text(path)?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| parse_error(path, 1, e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != ["t", "ax", "ay", "az", "wx", "wy", "wz"] {
        return Err(parse_error(path, 1, "header must be t,ax,ay,az,wx,wy,wz"));
    }
    let mut samples = Vec::new();
    for row in reader.deserialize::<ImuRow>() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_error(path, line, e.to_string())
        })?;
        let line = samples.len() + 2;
        let values = [row.t, row.ax, row.ay, row.az, row.wx, row.wy, row.wz];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_error(path, line, "non-finite value"));
        }
        if samples.last().is_some_and(|s: &ImuSample| row.t <= s.t) {
            return Err(parse_error(path, line, "timestamps must increase"));
        }
        samples.push(ImuSample::new(
            row.t,
            Vector3::new(row.ax, row.ay, row.az),
            Vector3::new(row.wx, row.wy, row.wz),
        ));
    }
    Ok(samples)
}

/// Height and width as little-endian `u32`, then row-major little-endian `f32`.
pub fn encode_raster(image: &Image) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(8 + 4 * image.data.len());
    bytes.extend_from_slice(&(image.height as u32).to_le_bytes());
    bytes.extend_from_slice(&(image.width as u32).to_le_bytes());
    for v in &image.data {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    bytes
}

pub fn decode_raster(path: &Path, bytes: &[u8]) -> Result<Image> {
    let bad = |m: String| Error::InvalidArgument(format!("{}: {m}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("raster header truncated".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (height, width) = (word(0), word(4));
    let expected = 8 + 4 * width * height;
    if bytes.len() != expected {
        return Err(bad(format!("{width}x{height} raster needs {expected} bytes, found {}", bytes.len())));
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Image { width, height, data })
}

pub fn write_raster(path: &Path, image: &Image) -> Result<()> {
    write_bytes(path, &encode_raster(image))
}

pub fn read_raster(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raster(path, &bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDocument {
    pub t: f64,
    pub pose: [f64; 7],
    pub velocity: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum EdgeDocument {
    Vo {
        i: usize,
        j: usize,
        measurement: [f64; 7],
    },
    Imu {
        k: usize,
        delta_rotation: [f64; 4],
        delta_velocity: [f64; 3],
        delta_position: [f64; 3],
        duration: f64,
        /// Row-major 9x9.
        covariance: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDocument {
    pub nodes: Vec<NodeDocument>,
    pub edges: Vec<EdgeDocument>,
    pub weights: ConstraintWeights,
    #[serde(default)]
    pub fixed_poses: Vec<usize>,
    #[serde(default)]
    pub fixed_velocities: Vec<usize>,
}

impl GraphDocument {
    pub fn from_graph(graph: &PoseVelocityGraph) -> Self {
        let n = &graph.nodes;
        let nodes = (0..n.len())
            .map(|k| NodeDocument {
                t: n.frame_times[k],
                pose: pose_to_array(&n.poses[k]),
                velocity: n.velocities[k].into(),
            })
            .collect();
        let vo = graph.edges.vo_edges.iter().map(|e| EdgeDocument::Vo {
            i: e.i,
            j: e.j,
            measurement: pose_to_array(&e.measurement),
        });
        let imu = graph.edges.imu_edges.iter().map(|e| {
            let p = &e.preintegration;
            EdgeDocument::Imu {
                k: e.k,
                delta_rotation: quaternion_to_array(&p.delta_rotation),
                delta_velocity: p.delta_velocity.into(),
                delta_position: p.delta_position.into(),
                duration: p.duration,
                covariance: p.covariance.transpose().iter().copied().collect(),
            }
        });
        GraphDocument {
            nodes,
            edges: vo.chain(imu).collect(),
            weights: graph.weights,
            fixed_poses: graph.fixed_poses.clone(),
            fixed_velocities: graph.fixed_velocities.clone(),
        }
    }

    pub fn to_graph(&self) -> Result<PoseVelocityGraph> {
        let poses = self.nodes.iter().map(|n| pose_from_array(&n.pose)).collect::<Result<Vec<_>>>()?;
        let velocities = self.nodes.iter().map(|n| Vector3::from(n.velocity)).collect();
        let times = self.nodes.iter().map(|n| n.t).collect();
        let nodes = GraphNodes::new(poses, velocities, times)?;
        let mut edges = EdgeSet::default();
        for edge in &self.edges {
            match edge {
                EdgeDocument::Vo { i, j, measurement } => edges.vo_edges.push(VoEdge {
                    i: *i,
                    j: *j,
                    measurement: pose_from_array(measurement)?,
                }),
                EdgeDocument::Imu {
                    k,
                    delta_rotation,
                    delta_velocity,
                    delta_position,
                    duration,
                    covariance,
                } => {
                    if covariance.len() != 81 {
                        return Err(Error::InvalidArgument(format!(
                            "IMU edge {k}: covariance needs 81 entries, found {}",
                            covariance.len()
                        )));
                    }
                    edges.imu_edges.push(ImuEdge {
                        k: *k,
                        preintegration: ImuPreintegration {
                            delta_rotation: quaternion_from_array(delta_rotation)?,
                            delta_velocity: Vector3::from(*delta_velocity),
                            delta_position: Vector3::from(*delta_position),
                            duration: *duration,
                            covariance: Matrix9::from_row_slice(covariance),
                        },
                    })
                }
            }
        }
        let mut graph = PoseVelocityGraph::new(nodes, edges, self.weights)?;
        graph.fixed_poses = self.fixed_poses.clone();
        graph.fixed_velocities = self.fixed_velocities.clone();
        graph.validate()?;
        Ok(graph)
    }
}

pub fn write_graph(path: &Path, graph: &PoseVelocityGraph) -> Result<()> {
    write_json(path, &GraphDocument::from_graph(graph))
}

pub fn read_graph(path: &Path) -> Result<PoseVelocityGraph> {
    read_json::<GraphDocument>(path)?.to_graph().map_err(|e| e.context(path.display().to_string()))
}

/// Everything about a dataset that is not a per-frame or per-sample stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub frame_count: usize,
    pub intrinsics: CameraIntrinsics,
    pub gravity: [f64; 3],
    pub initial_pose: [f64; 7],
    pub initial_velocity: [f64; 3],
    pub selection: PixelSelection,
    /// Generator settings, present for simulated data.
    #[serde(default)]
    pub trajectory: Option<TrajectorySpec>,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    #[serde(default)]
    pub scene: Option<SceneSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum RawEdgeDocument {
    /// Consecutive-frame odometry; the rasters live at `<rasters>_{depth,flow_x,flow_y,intensity}.bin`.
    Vo {
        i: usize,
        j: usize,
        rotation: [f64; 4],
        unit_translation: [f64; 3],
        rasters: String,
    },
    Loop {
        i: usize,
        j: usize,
        measurement: [f64; 7],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawEdgesDocument {
    pub edges: Vec<RawEdgeDocument>,
}

const RASTER_CHANNELS: [&str; 4] = ["depth", "flow_x", "flow_y", "intensity"];

fn raster_path(dir: &Path, stem: &str, channel: &str) -> PathBuf {
    dir.join(format!("{stem}_{channel}.bin"))
}

/// A dataset loaded from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub raw: RawMeasurements,
    pub ground_truth: Option<StampedTrajectory>,
}

/// Writes a simulated sequence, re-rendering the flow and depth rasters.
pub fn write_dataset(
    dir: &Path,
    sequence: &SimulatedSequence,
    trajectory: &TrajectorySpec,
    scene: &SceneSpec,
) -> Result<()> {
    let raw = &sequence.raw;
    let gt = &sequence.ground_truth;
    fs::create_dir_all(dir.join(SCALE_DIR)).map_err(|e| Error::io(dir.join(SCALE_DIR), e))?;
    let manifest = DatasetManifest {
        seed: sequence.seed,
        frame_count: raw.frame_times.len(),
        intrinsics: raw.intrinsics,
        gravity: raw.gravity.into(),
        initial_pose: pose_to_array(&raw.initial_pose),
        initial_velocity: raw.initial_velocity.into(),
        selection: scene.selection,
        trajectory: Some(*trajectory),
        noise: Some(sequence.noise.clone()),
        scene: Some(*scene),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    write_trajectory(
        &dir.join(GROUND_TRUTH_FILE),
        &StampedTrajectory::new(gt.nodes.frame_times.clone(), gt.nodes.poses.clone())?,
        TrajectoryFormat::Tum,
    )?;
    let attitudes = raw.attitudes.iter().map(|r| Pose::new(*r, Vector3::zeros())).collect();
    write_trajectory(
        &dir.join(ATTITUDE_FILE),
        &StampedTrajectory::new(raw.frame_times.clone(), attitudes)?,
        TrajectoryFormat::Tum,
    )?;
    write_imu_csv(&dir.join(IMU_FILE), &raw.imu)?;

    let mut edges = Vec::with_capacity(raw.vo_edges.len() + raw.loop_edges.len());
    for e in &raw.vo_edges {
        let stem = format!("{SCALE_DIR}/{:06}", e.i);
        let rasters = render_pair(gt, &sequence.noise, scene, &raw.intrinsics, sequence.seed, e.i)?;
        for (channel, image) in RASTER_CHANNELS.iter().zip([&rasters.depth, &rasters.flow_x, &rasters.flow_y, &rasters.intensity]) {
            write_raster(&raster_path(dir, &stem, channel), image)?;
        }
        edges.push(RawEdgeDocument::Vo {
            i: e.i,
            j: e.j,
            rotation: quaternion_to_array(&e.rotation),
            unit_translation: e.unit_translation.into(),
            rasters: stem,
        });
    }
    edges.extend(raw.loop_edges.iter().map(|l| RawEdgeDocument::Loop {
        i: l.i,
        j: l.j,
        measurement: pose_to_array(&l.measurement),
    }));
    write_json(&dir.join(VO_EDGES_FILE), &RawEdgesDocument { edges })
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    read_dataset_with(Execution::default(), dir)
}

pub fn read_dataset_with(mode: Execution, dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = read_json(&dir.join(MANIFEST_FILE))?;
    let attitude_track = read_trajectory(&dir.join(ATTITUDE_FILE), TrajectoryFormat::Tum)?;
    if attitude_track.len() != manifest.frame_count {
        return Err(Error::InvalidArgument(format!(
            "{}: {} frames but the manifest says {}",
            dir.join(ATTITUDE_FILE).display(),
            attitude_track.len(),
            manifest.frame_count
        )));
    }
    let imu = read_imu_csv(&dir.join(IMU_FILE))?;
    let edges_path = dir.join(VO_EDGES_FILE);
    let doc: RawEdgesDocument = read_json(&edges_path)?;
    let mut vo_docs = Vec::new();
    let mut loop_edges = Vec::new();
    for edge in doc.edges {
        match edge {
            RawEdgeDocument::Vo { .. } => vo_docs.push(edge),
            RawEdgeDocument::Loop { i, j, measurement } => loop_edges.push(LoopEdge {
                i,
                j,
                measurement: pose_from_array(&measurement).map_err(|e| e.context(edges_path.display().to_string()))?,
            }),
        }
    }
    let vo_edges = par::try_map_range(mode, vo_docs.len(), |n| {
        let RawEdgeDocument::Vo {
            i,
            j,
            rotation,
            unit_translation,
            rasters,
        } = &vo_docs[n]
        else {
            unreachable!("only odometry edges were collected")
        };
        let [depth, flow_x, flow_y, intensity] =
            RASTER_CHANNELS.map(|channel| read_raster(&raster_path(dir, rasters, channel)));
        let rasters_in = ScaleRasters {
            depth: depth?,
            flow_x: flow_x?,
            flow_y: flow_y?,
            intensity: intensity?,
        };
        let observations = observations_from_rasters(&rasters_in, &manifest.intrinsics, &manifest.selection)
            .map_err(|e| e.context(format!("{}: edge {i}-{j}", edges_path.display())))?;
        Ok::<_, Error>(RawVoEdge {
            i: *i,
            j: *j,
            rotation: quaternion_from_array(rotation)?,
            unit_translation: Vector3::from(*unit_translation),
            observations,
        })
    })?;
    let gt_path = dir.join(GROUND_TRUTH_FILE);
    let ground_truth = if gt_path.exists() {
        Some(read_trajectory(&gt_path, TrajectoryFormat::Tum)?)
    } else {
        None
    };
    let raw = RawMeasurements {
        frame_times: attitude_track.times,
        intrinsics: manifest.intrinsics,
        gravity: Vector3::from(manifest.gravity),
        imu,
        vo_edges,
        loop_edges,
        attitudes: attitude_track.poses.iter().map(|p| p.rotation).collect(),
        initial_pose: pose_from_array(&manifest.initial_pose)?,
        initial_velocity: Vector3::from(manifest.initial_velocity),
    };
    raw.validate().map_err(|e| e.context(dir.display().to_string()))?;
    Ok(Dataset {
        dir: dir.to_path_buf(),
        manifest,
        raw,
        ground_truth,
    })
}

fn optional(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `iter,vo_ate,pvgo_ate,objective`; ATE columns are empty without ground truth.
pub fn format_trace_csv(trace: &TrainingTrace) -> String {
    let mut out = String::from("iter,vo_ate,pvgo_ate,objective\n");
    for r in trace.records.iter().chain(trace.final_record.as_ref()) {
        out.push_str(&format!("{},{},{},{}\n", r.iteration, optional(r.vo_ate), optional(r.pvgo_ate), r.objective));
    }
    out
}

/// Raw and moving-average ATE curves for plotting.
pub fn format_curves_csv(trace: &TrainingTrace, window: usize) -> String {
    let vo = trace.vo_curve();
    let pvgo = trace.pvgo_curve();
    let vo_ma = moving_average(&vo, window);
    let pvgo_ma = moving_average(&pvgo, window);
    let lag = window.saturating_sub(1);
    let mut out = format!("iter,vo_ate,pvgo_ate,vo_ate_ma{window},pvgo_ate_ma{window}\n");
    for k in 0..vo.len().min(pvgo.len()) {
        let ma = |xs: &[f64]| optional(k.checked_sub(lag).and_then(|i| xs.get(i)).copied());
        out.push_str(&format!("{k},{},{},{},{}\n", vo[k], pvgo[k], ma(&vo_ma), ma(&pvgo_ma)));
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

/// `frame,t,position_error,rotation_error` after alignment.
pub fn write_frame_errors_csv(path: &Path, times: &[f64], comparison: &AlignedComparison) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "frame,t,position_error,rotation_error")?;
        for (k, (p, r)) in comparison.position_errors.iter().zip(&comparison.rotation_errors).enumerate() {
            writeln!(w, "{k},{},{p},{r}", times.get(k).copied().unwrap_or(k as f64))?;
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}
