//! Lambertian vertex shading with double-sided lights and area-weighted normals.

use serde::{Deserialize, Serialize};

use crate::mesh::{CameraRig, Mesh, Vec3};

pub type Rgb = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalLight {
    pub colour: Rgb,
    /// Radians above the horizontal plane.
    pub elevation: f64,
    /// Radians about the vertical axis, relative to the rig's zero (the camera side).
    pub azimuth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LightRig {
    pub lights: Vec<DirectionalLight>,
    pub ambient: Rgb,
    pub albedo: Rgb,
}

impl LightRig {
    /// Three coloured lights at 30 degrees elevation, spaced by 120 degrees.
    pub fn colour() -> Self {
        let colours = [[1.0, 0.25, 0.25], [0.25, 1.0, 0.25], [0.25, 0.25, 1.0]];
        LightRig {
            lights: colours
                .iter()
                .enumerate()
                .map(|(i, &colour)| DirectionalLight {
                    colour,
                    elevation: 30f64.to_radians(),
                    azimuth: (120.0 * i as f64).to_radians(),
                })
                .collect(),
            ambient: [0.0; 3],
            albedo: [1.0; 3],
        }
    }

    /// One white light at 40 degrees elevation plus a white ambient term.
    pub fn white() -> Self {
        LightRig {
            lights: vec![DirectionalLight {
                colour: [0.8; 3],
                elevation: 40f64.to_radians(),
                azimuth: 0.0,
            }],
            ambient: [0.2; 3],
            albedo: [1.0; 3],
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let channels = self
            .lights
            .iter()
            .flat_map(|l| l.colour)
            .chain(self.ambient)
            .chain(self.albedo);
        for v in channels {
            if !(v.is_finite() && v >= 0.0) {
                return crate::error::contract("light rig channels must be finite and non-negative");
            }
        }
        Ok(())
    }

    /// Unit directions towards each light in camera space after rotating the
    /// rig by `lambda`, with their derivatives in `lambda`.
    pub fn directions(&self, lambda: f64, camera: &CameraRig) -> Vec<(Vec3, Vec3)> {
        let (view, _) = camera.view();
        self.lights
            .iter()
            .map(|l| {
                let a = l.azimuth + lambda;
                let (ce, se) = (l.elevation.cos(), l.elevation.sin());
                let d = Vec3::new(ce * a.sin(), se, ce * a.cos());
                let dd = Vec3::new(ce * a.cos(), 0.0, -ce * a.sin());
                (view * d, view * dd)
            })
            .collect()
    }
}

/// Per-vertex normals: `sums` are the unnormalised sums of triangle cross
/// products (twice the area-weighted normal), `unit` their normalisation.
/// Vertices without incident triangles get the zero vector.
#[derive(Debug, Clone)]
pub struct VertexNormals {
    pub sums: Vec<Vec3>,
    pub unit: Vec<Vec3>,
}

pub fn vertex_normals(mesh: &Mesh) -> VertexNormals {
    let mut sums = vec![Vec3::zeros(); mesh.vertices.len()];
    for t in &mesh.triangles {
        let [a, b, c] = t.map(|i| mesh.vertices[i]);
        let n = (b - a).cross(&(c - a));
        for &i in t {
            sums[i] += n;
        }
    }
    let unit = sums
        .iter()
        .map(|s| {
            let len = s.norm();
            if len > 0.0 {
                s / len
            } else {
                Vec3::zeros()
            }
        })
        .collect();
    VertexNormals { sums, unit }
}

pub(crate) fn shade_with(normals: &VertexNormals, rig: &LightRig, dirs: &[(Vec3, Vec3)]) -> Vec<Rgb> {
    normals
        .unit
        .iter()
        .map(|n| {
            let mut rgb = rig.ambient;
            for (light, (d, _)) in rig.lights.iter().zip(dirs) {
                let cos = n.dot(d).abs();
                for c in 0..3 {
                    rgb[c] += light.colour[c] * cos;
                }
            }
            std::array::from_fn(|c| (rig.albedo[c] * rgb[c]).max(0.0))
        })
        .collect()
}

/// Gouraud vertex colours for a camera-space mesh lit by `rig` rotated by `lambda`.
pub fn shade_vertices(mesh: &Mesh, rig: &LightRig, lambda: f64, camera: &CameraRig) -> Vec<Rgb> {
    let dirs = rig.directions(lambda, camera);
    shade_with(&vertex_normals(mesh), rig, &dirs)
}

/// Back-propagates vertex-colour gradients to vertex positions (through the
/// normals) and to `lambda`. Returns `(position grads, d/d lambda)`.
pub(crate) fn shade_backward(
    mesh: &Mesh,
    normals: &VertexNormals,
    rig: &LightRig,
    dirs: &[(Vec3, Vec3)],
    colour_grads: &[Rgb],
) -> (Vec<Vec3>, f64) {
    let mut d_lambda = 0.0;
    let mut d_sums = vec![Vec3::zeros(); mesh.vertices.len()];
    for (v, n) in normals.unit.iter().enumerate() {
        let g = colour_grads[v];
        if g == [0.0; 3] || n.norm_squared() == 0.0 {
            continue;
        }
        let mut d_n = Vec3::zeros();
        for (light, (d, dd)) in rig.lights.iter().zip(dirs) {
            let dot = n.dot(d);
            let sign = if dot > 0.0 {
                1.0
            } else if dot < 0.0 {
                -1.0
            } else {
                0.0
            };
            // the zero clamp never binds for a validated (non-negative) rig
            let s = sign * (0..3).map(|c| g[c] * rig.albedo[c] * light.colour[c]).sum::<f64>();
            d_n += s * d;
            d_lambda += s * n.dot(dd);
        }
        let len = normals.sums[v].norm();
        d_sums[v] = (d_n - n * n.dot(&d_n)) / len;
    }
    let mut d_pos = vec![Vec3::zeros(); mesh.vertices.len()];
    for t in &mesh.triangles {
        let g = d_sums[t[0]] + d_sums[t[1]] + d_sums[t[2]];
        if g == Vec3::zeros() {
            continue;
        }
        let [a, b, c] = t.map(|i| mesh.vertices[i]);
        d_pos[t[0]] += (b - c).cross(&g);
        d_pos[t[1]] += (c - a).cross(&g);
        d_pos[t[2]] += (a - b).cross(&g);
    }
    (d_pos, d_lambda)
}
