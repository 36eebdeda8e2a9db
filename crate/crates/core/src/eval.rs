//! Shape and pose metrics: voxel IOU at 32^3, median azimuth error and the
//! fraction of poses within 30 degrees, over 24 evenly spaced test azimuths.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, io_err, Error, Result};
use crate::image::Image;
use crate::mesh::{azimuth_rotation, compose_azimuth, compose_light_azimuth, CameraRig, Mesh, Vec3};
use crate::nets::{Mode, Model};
use crate::render::{render, LightRig};

pub const DEFAULT_RESOLUTION: usize = 32;
pub const TEST_POSES: usize = 24;

/// Axis-aligned cube `[origin, origin + side]^3`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub origin: [f64; 3],
    pub side: f64,
}

impl Bounds {
    /// The cube around the mesh's bounding box, enlarged by `margin` (0.05 = 5%).
    pub fn around(mesh: &Mesh, margin: f64) -> Option<Bounds> {
        let (lo, hi) = mesh.bounds()?;
        let centre = (lo + hi) / 2.0;
        let side = (hi - lo).max() * (1.0 + margin);
        let side = if side > 0.0 { side } else { 1.0 };
        Some(Bounds {
            origin: [centre.x - side / 2.0, centre.y - side / 2.0, centre.z - side / 2.0],
            side,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub resolution: usize,
    pub bounds: Bounds,
    /// Occupancy in x-fastest order: index `(z * r + y) * r + x`.
    pub cells: Vec<bool>,
}

impl VoxelGrid {
    pub fn empty(resolution: usize, bounds: Bounds) -> Self {
        VoxelGrid {
            resolution,
            bounds,
            cells: vec![false; resolution.pow(3)],
        }
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.resolution + y) * self.resolution + x
    }

    pub fn occupied(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    fn cell_size(&self) -> f64 {
        self.bounds.side / self.resolution as f64
    }

    /// Writes the occupancy as a packed bitmask (LSB-first, x-fastest) with a
    /// JSON header next to it (`<path>.json`).
    pub fn export(&self, path: &Path) -> Result<()> {
        let mut bytes = vec![0u8; self.cells.len().div_ceil(8)];
        for (i, &c) in self.cells.iter().enumerate() {
            if c {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        std::fs::write(path, bytes).map_err(io_err(format!("writing {}", path.display())))?;
        let header = serde_json::json!({
            "resolution": self.resolution,
            "origin": self.bounds.origin,
            "side": self.bounds.side,
            "order": "x-fastest",
            "bit_order": "lsb-first",
            "occupied": self.occupied(),
        });
        let header_path = path.with_extension("json");
        std::fs::write(&header_path, serde_json::to_string_pretty(&header)?)
            .map_err(io_err(format!("writing {}", header_path.display())))
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Separating-axis test between a triangle and an axis-aligned box given by
/// its centre and half extent.
fn triangle_box_overlap(tri: [[f64; 3]; 3], centre: [f64; 3], half: f64) -> bool {
    let v = tri.map(|p| sub(p, centre));
    let axes_overlap = |axis: [f64; 3]| {
        let p = v.map(|q| dot(q, axis));
        let r = half * (axis[0].abs() + axis[1].abs() + axis[2].abs());
        let (lo, hi) = (p[0].min(p[1]).min(p[2]), p[0].max(p[1]).max(p[2]));
        !(lo > r || hi < -r)
    };
    let e = [sub(v[1], v[0]), sub(v[2], v[1]), sub(v[0], v[2])];
    let units = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for u in units {
        if !axes_overlap(u) {
            return false;
        }
    }
    let n = cross(e[0], e[1]);
    if !axes_overlap(n) {
        return false;
    }
    for edge in e {
        for u in units {
            let axis = cross(u, edge);
            if dot(axis, axis) > 0.0 && !axes_overlap(axis) {
                return false;
            }
        }
    }
    true
}

fn mark_surface(mesh: &Mesh, grid: &mut VoxelGrid) {
    let r = grid.resolution;
    let s = grid.cell_size();
    let o = grid.bounds.origin;
    let cell_of = |v: f64, axis: usize| ((v - o[axis]) / s).floor();
    for t in &mesh.triangles {
        let tri = t.map(|i| {
            let p = mesh.vertices[i];
            [p.x, p.y, p.z]
        });
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut outside = false;
        for axis in 0..3 {
            let a = tri.iter().map(|p| p[axis]).fold(f64::INFINITY, f64::min);
            let b = tri.iter().map(|p| p[axis]).fold(f64::NEG_INFINITY, f64::max);
            let (ca, cb) = (cell_of(a, axis), cell_of(b, axis));
            if cb < 0.0 || ca >= r as f64 {
                outside = true;
                break;
            }
            lo[axis] = ca.max(0.0) as usize;
            hi[axis] = (cb.min(r as f64 - 1.0)) as usize;
        }
        if outside {
            continue;
        }
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let centre = [
                        o[0] + (x as f64 + 0.5) * s,
                        o[1] + (y as f64 + 0.5) * s,
                        o[2] + (z as f64 + 0.5) * s,
                    ];
                    // shrunk a hair so faces lying on cell boundaries mark neither side
                    if triangle_box_overlap(tri, centre, 0.5 * s * (1.0 - 1e-9)) {
                        let i = grid.index(x, y, z);
                        grid.cells[i] = true;
                    }
                }
            }
        }
    }
}

/// Marks cell centres inside `component`: for each axis, a line through the
/// centre must cross the surface an odd number of times on both sides. Lines
/// are nudged off the cell-centre lattice so they do not graze edges of
/// grid-aligned faces. Requiring all three axes keeps open cavities empty.
fn fill_interior(component: &Mesh, grid: &mut VoxelGrid) {
    let r = grid.resolution;
    let s = grid.cell_size();
    let o = grid.bounds.origin;
    let nudge = [1e-7 * PI * s, 1e-7 * std::f64::consts::E * s];
    let mut votes = vec![0u8; r * r * r];
    let mut hits = Vec::new();
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        let tris: Vec<[[f64; 3]; 3]> = component
            .triangles
            .iter()
            .map(|t| t.map(|i| {
                let p = component.vertices[i];
                [p[u], p[v], p[axis]]
            }))
            .collect();
        for j in 0..r {
            for i in 0..r {
                let pu = o[u] + (i as f64 + 0.5) * s + nudge[0];
                let pv = o[v] + (j as f64 + 0.5) * s + nudge[1];
                hits.clear();
                for [a, b, c] in &tris {
                    let area = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
                    if area == 0.0 {
                        continue;
                    }
                    let w0 = ((b[0] - pu) * (c[1] - pv) - (c[0] - pu) * (b[1] - pv)) / area;
                    let w1 = ((c[0] - pu) * (a[1] - pv) - (a[0] - pu) * (c[1] - pv)) / area;
                    let w2 = 1.0 - w0 - w1;
                    if w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0 {
                        hits.push(w0 * a[2] + w1 * b[2] + w2 * c[2]);
                    }
                }
                if hits.len() < 2 {
                    continue;
                }
                hits.sort_by(f64::total_cmp);
                for k in 0..r {
                    let p = o[axis] + (k as f64 + 0.5) * s;
                    let below = hits.partition_point(|&h| h < p);
                    let above = hits.len() - hits.partition_point(|&h| h <= p);
                    if below % 2 == 1 && above % 2 == 1 {
                        let mut cell = [0usize; 3];
                        cell[axis] = k;
                        cell[u] = i;
                        cell[v] = j;
                        votes[grid.index(cell[0], cell[1], cell[2])] += 1;
                    }
                }
            }
        }
    }
    for (c, &n) in grid.cells.iter_mut().zip(&votes) {
        if n == 3 {
            *c = true;
        }
    }
}

/// Occupancy of `mesh` in the cube `bounds`: surface cells from a
/// triangle-box overlap test, interior cells from parity counts of each
/// connected component separately (so overlapping primitives union).
pub fn voxelize(mesh: &Mesh, resolution: usize, bounds: Bounds) -> Result<VoxelGrid> {
    if resolution == 0 || !(bounds.side > 0.0) {
        return contract("voxel grid needs a positive resolution and side");
    }
    let mut grid = VoxelGrid::empty(resolution, bounds);
    if mesh.triangles.is_empty() {
        return Ok(grid);
    }
    mark_surface(mesh, &mut grid);
    for component in mesh.components() {
        fill_interior(&component, &mut grid);
    }
    Ok(grid)
}

/// Intersection over union; 1 when both grids are empty.
pub fn iou(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    if a.resolution != b.resolution || a.bounds != b.bounds {
        return contract("iou needs grids over the same cells");
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.cells.iter().zip(&b.cells) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Angular distance between two azimuths, in degrees within [0, 180].
pub fn pose_error(predicted: f64, truth: f64) -> f64 {
    let d = (predicted - truth).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d).to_degrees()
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iou: f64,
    /// Median pose error in degrees; absent for models that are given the pose.
    pub err: Option<f64>,
    pub acc: Option<f64>,
    pub iou_given_pose: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub poses: usize,
    pub resolution: usize,
    pub margin: f64,
    pub rig: LightRig,
    pub camera: CameraRig,
    /// Lighting angle used when the model does not infer lighting.
    pub fixed_lambda: f64,
    /// Seed for the lighting angles drawn when the model infers lighting.
    pub seed: u64,
    /// Remove the single global azimuth offset between the model's canonical
    /// frame and the ground truth before scoring (unsupervised pose only).
    pub align: bool,
}

impl EvalSettings {
    pub fn new(rig: LightRig, camera: CameraRig) -> Self {
        EvalSettings {
            poses: TEST_POSES,
            resolution: DEFAULT_RESOLUTION,
            margin: 0.05,
            rig,
            camera,
            fixed_lambda: 0.0,
            seed: 0,
            align: true,
        }
    }
}

/// One scored (instance, pose) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ViewResult {
    pub instance: usize,
    pub truth: f64,
    pub predicted: Option<f64>,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    /// Global azimuth offset removed before scoring (radians).
    pub offset: f64,
    pub views: Vec<ViewResult>,
}

/// Test azimuths: `poses` evenly spaced angles starting at -pi.
pub fn test_azimuths(poses: usize) -> Vec<f64> {
    (0..poses)
        .map(|k| -PI + (k as f64 + 0.5) * 2.0 * PI / poses as f64)
        .collect()
}

/// MAP readout of the pose posterior: most probable bin plus its fine mean.
pub fn map_azimuth(probs: &[f64], fine_mean: f64) -> Result<f64> {
    let best = probs
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
    compose_azimuth(best.0, fine_mean, probs.len())
}

/// MAP readout of the lighting posterior.
pub fn map_light_azimuth(probs: &[f64], fine_mean: f64) -> Result<f64> {
    let best = probs
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
    compose_light_azimuth(best.0, fine_mean, probs.len())
}

/// Offset `delta` minimising the median of `pose_error(pred - delta, truth)`.
pub fn best_offset(pairs: &[(f64, f64)]) -> f64 {
    let score = |delta: f64| {
        let mut errs: Vec<f64> = pairs.iter().map(|&(p, t)| pose_error(p - delta, t)).collect();
        median(&mut errs).unwrap_or(0.0)
    };
    let mut best = (0.0, score(0.0));
    for k in 1..720 {
        let delta = k as f64 * PI / 360.0;
        let s = score(delta);
        if s < best.1 {
            best = (delta, s);
        }
    }
    let mut step = PI / 720.0;
    while step > 1e-6 {
        for cand in [best.0 - step, best.0 + step] {
            let s = score(cand);
            if s < best.1 {
                best = (cand, s);
            }
        }
        step /= 2.0;
    }
    best.0
}

struct Prediction {
    truth: f64,
    azimuth: Option<f64>,
    mesh: Mesh,
}

fn predict_views(model: &Model, test: &[Mesh], settings: &EvalSettings) -> Result<Vec<Vec<Prediction>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut out = Vec::with_capacity(test.len());
    for gt in test {
        let mut preds = Vec::with_capacity(settings.poses);
        for theta in test_azimuths(settings.poses) {
            let lambda = if model.config.infer_light {
                rng.random_range(0.0..PI)
            } else {
                settings.fixed_lambda
            };
            let img = render(gt, theta, lambda, &settings.rig, &settings.camera, [0.0; 3])?;
            let post = model.encode(&[&img], Mode::Eval)?.remove(0);
            let azimuth = match post.theta_fine {
                Some((mean, _)) => Some(map_azimuth(&post.theta_probs, mean)?),
                None => None,
            };
            let mesh = model.decode(&post.z_mean)?.build()?;
            preds.push(Prediction {
                truth: theta,
                azimuth,
                mesh,
            });
        }
        out.push(preds);
    }
    Ok(out)
}

fn score(
    test: &[Mesh],
    preds: &[Vec<Prediction>],
    settings: &EvalSettings,
) -> Result<(f64, Vec<ViewResult>, f64)> {
    let pairs: Vec<(f64, f64)> = preds
        .iter()
        .flatten()
        .filter_map(|p| p.azimuth.map(|a| (a, p.truth)))
        .collect();
    let offset = if settings.align && !pairs.is_empty() {
        best_offset(&pairs)
    } else {
        0.0
    };
    // predicted shape = ground truth turned by -offset about the vertical
    let undo = azimuth_rotation(offset);
    let mut views = Vec::new();
    let mut total = 0.0;
    for (i, (gt, ps)) in test.iter().zip(preds).enumerate() {
        let bounds = Bounds::around(gt, settings.margin)
            .ok_or_else(|| Error::Contract(format!("test mesh {i} has no vertices")))?;
        let truth_grid = voxelize(gt, settings.resolution, bounds)?;
        for p in ps {
            let aligned = p.mesh.transformed(|v: &Vec3| undo * v);
            let grid = voxelize(&aligned, settings.resolution, bounds)?;
            let v = iou(&grid, &truth_grid)?;
            total += v;
            views.push(ViewResult {
                instance: i,
                truth: p.truth,
                predicted: p.azimuth.map(|a| a - offset),
                iou: v,
            });
        }
    }
    Ok((total / views.len().max(1) as f64, views, offset))
}

/// Runs the test protocol. `pose_given`, when provided, is a model trained
/// with pose supervision whose IOU is reported as `iou_given_pose`.
pub fn evaluate(
    model: &Model,
    pose_given: Option<&Model>,
    test: &[Mesh],
    settings: &EvalSettings,
) -> Result<Evaluation> {
    if test.is_empty() {
        return contract("evaluation needs at least one test mesh");
    }
    let preds = predict_views(model, test, settings)?;
    let (mean_iou, views, offset) = score(test, &preds, settings)?;
    let mut errs: Vec<f64> = views
        .iter()
        .filter_map(|v| v.predicted.map(|p| pose_error(p, v.truth)))
        .collect();
    let acc = (!errs.is_empty()).then(|| errs.iter().filter(|&&e| e <= 30.0).count() as f64 / errs.len() as f64);
    let err = median(&mut errs);
    let iou_given_pose = match pose_given {
        Some(m) => {
            let preds = predict_views(m, test, settings)?;
            Some(score(test, &preds, &EvalSettings { align: false, ..settings.clone() })?.0)
        }
        None if !model.config.infer_pose => Some(mean_iou),
        None => None,
    };
    Ok(Evaluation {
        metrics: Metrics {
            iou: mean_iou,
            err,
            acc,
            iou_given_pose,
        },
        offset,
        views,
    })
}

/// Writes per-view rows and a one-line metrics summary as CSV.
pub fn write_metrics(eval: &Evaluation, views_csv: &Path, summary_csv: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(views_csv)?;
    w.write_record(["instance", "truth_deg", "predicted_deg", "iou"])?;
    for v in &eval.views {
        w.write_record([
            v.instance.to_string(),
            v.truth.to_degrees().to_string(),
            v.predicted.map(|p| p.to_degrees().to_string()).unwrap_or_default(),
            v.iou.to_string(),
        ])?;
    }
    w.flush().map_err(io_err("flushing view metrics"))?;
    let mut s = csv::Writer::from_path(summary_csv)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    s.write_record(["iou", "err", "acc", "iou_given_pose", "offset_deg"])?;
    s.write_record([
        eval.metrics.iou.to_string(),
        opt(eval.metrics.err),
        opt(eval.metrics.acc),
        opt(eval.metrics.iou_given_pose),
        eval.offset.to_degrees().to_string(),
    ])?;
    s.flush().map_err(io_err("flushing metrics summary"))
}

pub fn summary(m: &Metrics) -> String {
    let opt = |v: Option<f64>, unit: &str| match v {
        Some(x) => format!("{x:.3}{unit}"),
        None => "n/a".to_string(),
    };
    format!(
        "iou {:.3}  err {}  acc {}  iou|theta {}",
        m.iou,
        opt(m.err, " deg"),
        opt(m.acc, ""),
        opt(m.iou_given_pose, "")
    )
}

/// Renders `mesh` as seen at each test azimuth; a convenience for inspection.
pub fn render_turntable(mesh: &Mesh, settings: &EvalSettings) -> Result<Vec<Image>> {
    test_azimuths(settings.poses)
        .into_iter()
        .map(|t| render(mesh, t, settings.fixed_lambda, &settings.rig, &settings.camera, [0.0; 3]))
        .collect()
}

pub fn write_summary(path: &Path, m: &Metrics) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(io_err(format!("creating {}", path.display())))?;
    writeln!(f, "{}", summary(m)).map_err(io_err(format!("writing {}", path.display())))
}
