//! Triangle meshes, the three block/subdivision parameterisations that turn a
//! flat parameter vector into a mesh, and the pose transform into camera space.
//!
//! Object frame: y is up, azimuth rotates about y. Camera frame follows the
//! OpenGL convention (x right, y up, camera looking down -z), so the pose
//! transform is a proper rotation and preserves triangle winding.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = Mesh { vertices, triangles };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&i| i >= n) {
                return contract(format!("triangle {t} indexes past {n} vertices"));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return contract(format!("triangle {t} repeats a vertex"));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Axis-aligned bounds `(min, max)`; `None` for a mesh without vertices.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (lo.inf(v), hi.sup(v))
        }))
    }

    /// Disjoint union: indices of `other` are offset past this mesh's vertices.
    pub fn append(&mut self, other: &Mesh) {
        let offset = self.vertices.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles.extend(
            other
                .triangles
                .iter()
                .map(|t| [t[0] + offset, t[1] + offset, t[2] + offset]),
        );
    }

    pub fn transformed(&self, f: impl Fn(&Vec3) -> Vec3) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(f).collect(),
            triangles: self.triangles.clone(),
        }
    }

    /// Splits the mesh into vertex-connected components, each re-indexed.
    pub fn components(&self) -> Vec<Mesh> {
        let n = self.vertices.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for t in &self.triangles {
            for k in 1..3 {
                let a = find(&mut parent, t[0]);
                let b = find(&mut parent, t[k]);
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        let mut root_slot = vec![usize::MAX; n];
        let mut parts: Vec<(Vec<usize>, Vec<[usize; 3]>)> = Vec::new();
        for t in &self.triangles {
            let root = find(&mut parent, t[0]);
            if root_slot[root] == usize::MAX {
                root_slot[root] = parts.len();
                parts.push((Vec::new(), Vec::new()));
            }
            parts[root_slot[root]].1.push(*t);
        }
        parts
            .into_iter()
            .map(|(_, tris)| {
                let mut remap = std::collections::BTreeMap::new();
                let mut vertices = Vec::new();
                let triangles = tris
                    .iter()
                    .map(|t| {
                        t.map(|i| {
                            *remap.entry(i).or_insert_with(|| {
                                vertices.push(self.vertices[i]);
                                vertices.len() - 1
                            })
                        })
                    })
                    .collect();
                Mesh { vertices, triangles }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeshKind {
    /// Axis-aligned cuboids: location(3) + scale(3) per block.
    OrthoBlock { blocks: usize },
    /// Rotated cuboids: location(3) + scale(3) + Euler angles(3) per block.
    FullBlock { blocks: usize },
    /// Per-vertex displacements of a cube subdivided into `segments` per edge.
    Subdivision { segments: usize },
}

impl MeshKind {
    pub fn param_len(&self) -> usize {
        match *self {
            MeshKind::OrthoBlock { blocks } => 6 * blocks,
            MeshKind::FullBlock { blocks } => 9 * blocks,
            MeshKind::Subdivision { segments } => 3 * subdivided_vertex_count(segments),
        }
    }

    /// Indices of entries that are primitive scales (softplus in the decoder).
    pub fn scale_indices(&self) -> Vec<usize> {
        match *self {
            MeshKind::OrthoBlock { blocks } => (0..blocks)
                .flat_map(|b| (3..6).map(move |k| 6 * b + k))
                .collect(),
            MeshKind::FullBlock { blocks } => (0..blocks)
                .flat_map(|b| (3..6).map(move |k| 9 * b + k))
                .collect(),
            MeshKind::Subdivision { .. } => Vec::new(),
        }
    }

    /// Indices of Euler-angle entries (full-block only).
    pub fn rotation_indices(&self) -> Vec<usize> {
        match *self {
            MeshKind::FullBlock { blocks } => (0..blocks)
                .flat_map(|b| (6..9).map(move |k| 9 * b + k))
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MeshKind::OrthoBlock { .. } => "ortho-block",
            MeshKind::FullBlock { .. } => "full-block",
            MeshKind::Subdivision { .. } => "subdivision",
        }
    }

    /// Parses `ortho-block`, `full-block` or `subdivision` with the given count.
    pub fn parse(name: &str, count: usize) -> Option<MeshKind> {
        match name {
            "ortho-block" => Some(MeshKind::OrthoBlock { blocks: count }),
            "full-block" => Some(MeshKind::FullBlock { blocks: count }),
            "subdivision" => Some(MeshKind::Subdivision { segments: count }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshParams {
    pub kind: MeshKind,
    pub values: Vec<f64>,
}

impl MeshParams {
    pub fn new(kind: MeshKind, values: Vec<f64>) -> Result<Self> {
        if values.len() != kind.param_len() {
            return contract(format!(
                "{} expects {} parameters, got {}",
                kind.name(),
                kind.param_len(),
                values.len()
            ));
        }
        Ok(MeshParams { kind, values })
    }

    pub fn build(&self) -> Result<Mesh> {
        match self.kind {
            MeshKind::OrthoBlock { .. } => build_ortho_block(self),
            MeshKind::FullBlock { .. } => build_full_block(self),
            MeshKind::Subdivision { .. } => build_subdivision(self),
        }
    }

    /// Pulls a gradient on the built mesh's vertices back onto the parameters.
    pub fn backward(&self, vertex_grads: &[Vec3]) -> Vec<f64> {
        let mut out = vec![0.0; self.values.len()];
        match self.kind {
            MeshKind::OrthoBlock { blocks } => {
                for b in 0..blocks {
                    for (c, corner) in CUBE_CORNERS.iter().enumerate() {
                        let g = vertex_grads[8 * b + c];
                        for k in 0..3 {
                            out[6 * b + k] += g[k];
                            out[6 * b + 3 + k] += g[k] * corner[k];
                        }
                    }
                }
            }
            MeshKind::FullBlock { blocks } => {
                for b in 0..blocks {
                    let p = &self.values[9 * b..9 * b + 9];
                    let scale = Vec3::new(p[3], p[4], p[5]);
                    let (rot, d_rot) = euler_zyx_with_derivatives(p[6], p[7], p[8]);
                    for (c, corner) in CUBE_CORNERS.iter().enumerate() {
                        let g = vertex_grads[8 * b + c];
                        let local = Vec3::from(*corner);
                        let scaled = scale.component_mul(&local);
                        for k in 0..3 {
                            out[9 * b + k] += g[k];
                        }
                        let g_local = rot.transpose() * g;
                        for k in 0..3 {
                            out[9 * b + 3 + k] += g_local[k] * local[k];
                            out[9 * b + 6 + k] += g.dot(&(d_rot[k] * scaled));
                        }
                    }
                }
            }
            MeshKind::Subdivision { .. } => {
                for (i, g) in vertex_grads.iter().enumerate() {
                    for k in 0..3 {
                        out[3 * i + k] += g[k];
                    }
                }
            }
        }
        out
    }
}

/// Corner `i` of the unit cube has sign bits x = bit 0, y = bit 1, z = bit 2.
pub const CUBE_CORNERS: [[f64; 3]; 8] = [
    [-0.5, -0.5, -0.5],
    [0.5, -0.5, -0.5],
    [-0.5, 0.5, -0.5],
    [0.5, 0.5, -0.5],
    [-0.5, -0.5, 0.5],
    [0.5, -0.5, 0.5],
    [-0.5, 0.5, 0.5],
    [0.5, 0.5, 0.5],
];

/// Counter-clockwise seen from outside.
pub const CUBE_TRIANGLES: [[usize; 3]; 12] = [
    [1, 3, 7],
    [1, 7, 5],
    [0, 4, 6],
    [0, 6, 2],
    [2, 6, 7],
    [2, 7, 3],
    [0, 1, 5],
    [0, 5, 4],
    [4, 5, 7],
    [4, 7, 6],
    [0, 2, 3],
    [0, 3, 1],
];

/// Axis-aligned cuboid spanning `center ± size / 2`.
pub fn cuboid(center: Vec3, size: Vec3) -> Mesh {
    Mesh {
        vertices: CUBE_CORNERS
            .iter()
            .map(|c| center + size.component_mul(&Vec3::from(*c)))
            .collect(),
        triangles: CUBE_TRIANGLES.to_vec(),
    }
}

fn check_block_params(params: &MeshParams, stride: usize) -> Result<usize> {
    if params.values.len() % stride != 0 {
        return contract(format!(
            "block parameter length {} is not a multiple of {stride}",
            params.values.len()
        ));
    }
    let blocks = params.values.len() / stride;
    for b in 0..blocks {
        let s = &params.values[stride * b + 3..stride * b + 6];
        if s.iter().any(|&v| !(v > 0.0)) {
            return contract(format!("block {b} has non-positive scale {s:?}"));
        }
    }
    Ok(blocks)
}

pub fn build_ortho_block(params: &MeshParams) -> Result<Mesh> {
    if !matches!(params.kind, MeshKind::OrthoBlock { .. }) {
        return contract("build_ortho_block needs ortho-block parameters");
    }
    let blocks = check_block_params(params, 6)?;
    let mut mesh = Mesh::default();
    for b in 0..blocks {
        let p = &params.values[6 * b..6 * b + 6];
        mesh.append(&cuboid(
            Vec3::new(p[0], p[1], p[2]),
            Vec3::new(p[3], p[4], p[5]),
        ));
    }
    Ok(mesh)
}

/// Intrinsic Z-Y-X Euler rotation `Rz(a) * Ry(b) * Rx(c)`.
pub fn euler_zyx(a: f64, b: f64, c: f64) -> Matrix3<f64> {
    let rz = Rotation3::from_axis_angle(&Vec3::z_axis(), a);
    let ry = Rotation3::from_axis_angle(&Vec3::y_axis(), b);
    let rx = Rotation3::from_axis_angle(&Vec3::x_axis(), c);
    (rz * ry * rx).into_inner()
}

fn euler_zyx_with_derivatives(a: f64, b: f64, c: f64) -> (Matrix3<f64>, [Matrix3<f64>; 3]) {
    let rz = Rotation3::from_axis_angle(&Vec3::z_axis(), a).into_inner();
    let ry = Rotation3::from_axis_angle(&Vec3::y_axis(), b).into_inner();
    let rx = Rotation3::from_axis_angle(&Vec3::x_axis(), c).into_inner();
    let hat = |v: Vec3| v.cross_matrix();
    let dz = hat(Vec3::z()) * rz;
    let dy = hat(Vec3::y()) * ry;
    let dx = hat(Vec3::x()) * rx;
    (rz * ry * rx, [dz * ry * rx, rz * dy * rx, rz * ry * dx])
}

pub fn build_full_block(params: &MeshParams) -> Result<Mesh> {
    if !matches!(params.kind, MeshKind::FullBlock { .. }) {
        return contract("build_full_block needs full-block parameters");
    }
    let blocks = check_block_params(params, 9)?;
    let mut mesh = Mesh::default();
    for b in 0..blocks {
        let p = &params.values[9 * b..9 * b + 9];
        let loc = Vec3::new(p[0], p[1], p[2]);
        let scale = Vec3::new(p[3], p[4], p[5]);
        let rot = euler_zyx(p[6], p[7], p[8]);
        let block = cuboid(Vec3::zeros(), scale).transformed(|v| loc + rot * v);
        mesh.append(&block);
    }
    Ok(mesh)
}

/// Vertex count of a cube surface subdivided into `n` segments per edge.
pub fn subdivided_vertex_count(n: usize) -> usize {
    let outer = (n + 1).pow(3);
    let inner = n.saturating_sub(1).pow(3);
    outer - inner
}

/// The undeformed subdivided cube of side 1 centred at the origin.
pub fn subdivided_cube(n: usize) -> Mesh {
    assert!(n >= 1, "subdivided cube needs at least one segment");
    let side = n + 1;
    let mut index = vec![usize::MAX; side * side * side];
    let mut vertices = Vec::with_capacity(subdivided_vertex_count(n));
    let at = |i: usize, j: usize, k: usize| (i * side + j) * side + k;
    for i in 0..=n {
        for j in 0..=n {
            for k in 0..=n {
                let on_surface = [i, j, k].iter().any(|&c| c == 0 || c == n);
                if on_surface {
                    index[at(i, j, k)] = vertices.len();
                    vertices.push(Vec3::new(
                        -0.5 + i as f64 / n as f64,
                        -0.5 + j as f64 / n as f64,
                        -0.5 + k as f64 / n as f64,
                    ));
                }
            }
        }
    }
    let mut triangles = Vec::with_capacity(12 * n * n);
    for axis in 0..3 {
        // (u, v) chosen so that u x v is +axis.
        let (u_axis, v_axis) = ((axis + 1) % 3, (axis + 2) % 3);
        for &fixed in &[0, n] {
            let outward = fixed == n;
            for a in 0..n {
                for b in 0..n {
                    let corner = |da: usize, db: usize| {
                        let mut c = [0usize; 3];
                        c[axis] = fixed;
                        c[u_axis] = a + da;
                        c[v_axis] = b + db;
                        index[at(c[0], c[1], c[2])]
                    };
                    let (p00, p10, p11, p01) = (corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1));
                    if outward {
                        triangles.push([p00, p10, p11]);
                        triangles.push([p00, p11, p01]);
                    } else {
                        triangles.push([p00, p11, p10]);
                        triangles.push([p00, p01, p11]);
                    }
                }
            }
        }
    }
    Mesh { vertices, triangles }
}

pub fn build_subdivision(params: &MeshParams) -> Result<Mesh> {
    let MeshKind::Subdivision { segments } = params.kind else {
        return contract("build_subdivision needs subdivision parameters");
    };
    let expected = 3 * subdivided_vertex_count(segments);
    if params.values.len() != expected {
        return contract(format!(
            "subdivision with {segments} segments needs {expected} parameters, got {}",
            params.values.len()
        ));
    }
    let mut mesh = subdivided_cube(segments);
    for (i, v) in mesh.vertices.iter_mut().enumerate() {
        *v += Vec3::new(
            params.values[3 * i],
            params.values[3 * i + 1],
            params.values[3 * i + 2],
        );
    }
    Ok(mesh)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub distance: f64,
    /// Radians above the horizontal plane.
    pub elevation: f64,
    /// Vertical field of view, radians.
    pub fov: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraRig {
    fn default() -> Self {
        CameraRig {
            distance: 2.0,
            elevation: 20f64.to_radians(),
            fov: 45f64.to_radians(),
            width: 128,
            height: 96,
        }
    }
}

impl CameraRig {
    pub fn with_size(width: usize, height: usize) -> Self {
        CameraRig {
            width,
            height,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.distance > 0.0) {
            return contract("camera distance must be positive");
        }
        if !(self.fov > 0.0 && self.fov < PI) {
            return contract("camera fov must lie in (0, pi)");
        }
        if self.width == 0 || self.height == 0 {
            return contract("camera image size must be positive");
        }
        Ok(())
    }

    /// World-to-camera rotation (rows: right, up, backward) and translation.
    pub fn view(&self) -> (Matrix3<f64>, Vec3) {
        let eye = self.distance
            * Vec3::new(0.0, self.elevation.sin(), self.elevation.cos());
        let forward = (-eye).normalize();
        let right = forward.cross(&Vec3::y()).normalize();
        let up = right.cross(&forward);
        let rot = Matrix3::from_rows(&[
            right.transpose(),
            up.transpose(),
            (-forward).transpose(),
        ]);
        (rot, -(rot * eye))
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        0.5 * self.height as f64 / (0.5 * self.fov).tan()
    }
}

/// Rotation about the vertical axis by azimuth `theta`.
pub fn azimuth_rotation(theta: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Vec3::y_axis(), theta).into_inner()
}

/// The full object-to-camera affine map `v -> linear * v + offset`.
pub fn pose_transform(theta: f64, camera: &CameraRig) -> (Matrix3<f64>, Vec3) {
    let (view, offset) = camera.view();
    (view * azimuth_rotation(theta), offset)
}

/// Derivative of the linear part of [`pose_transform`] with respect to theta.
pub fn pose_transform_dtheta(theta: f64, camera: &CameraRig) -> Matrix3<f64> {
    let (view, _) = camera.view();
    view * Vec3::y().cross_matrix() * azimuth_rotation(theta)
}

pub fn apply_pose(mesh: &Mesh, theta: f64, camera: &CameraRig) -> Mesh {
    let (linear, offset) = pose_transform(theta, camera);
    mesh.transformed(|v| linear * v + offset)
}

/// Reduces an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Composes a coarse bin and a fine offset into an azimuth in (-pi, pi].
pub fn compose_azimuth(coarse: usize, fine: f64, bins: usize) -> Result<f64> {
    if coarse >= bins {
        return contract(format!("coarse bin {coarse} out of range for {bins} bins"));
    }
    Ok(wrap_angle(
        -PI + coarse as f64 * 2.0 * PI / bins as f64 + fine,
    ))
}

/// Nearest coarse bin of `theta` and the residual fine offset.
pub fn decompose_azimuth(theta: f64, bins: usize) -> (usize, f64) {
    let width = 2.0 * PI / bins as f64;
    let coarse = ((wrap_angle(theta) + PI) / width).round() as usize % bins;
    let fine = wrap_angle(theta - (-PI + coarse as f64 * width));
    (coarse, fine)
}

/// Lighting bins cover the half turn [0, pi); bin centres sit at `(r + 1/2) pi / R`.
pub fn compose_light_azimuth(coarse: usize, fine: f64, bins: usize) -> Result<f64> {
    if coarse >= bins {
        return contract(format!("lighting bin {coarse} out of range for {bins} bins"));
    }
    Ok((coarse as f64 + 0.5) * PI / bins as f64 + fine)
}

pub fn decompose_light_azimuth(lambda: f64, bins: usize) -> (usize, f64) {
    let width = PI / bins as f64;
    let coarse = ((lambda / width).floor().max(0.0) as usize).min(bins - 1);
    (coarse, lambda - (coarse as f64 + 0.5) * width)
}
