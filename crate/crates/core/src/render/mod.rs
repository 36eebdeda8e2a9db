//! Differentiable mesh renderer: pose, Lambertian/Gouraud shading, perspective
//! projection and z-buffered rasterisation, plus the backward pass.
//!
//! The backward pass is exact for vertex colours and the lighting angle. For
//! vertex positions it uses the chain rule through barycentrics and shading at
//! interior pixels, and at pixels next to a visibility discontinuity it
//! replaces the barycentric term with the screen-space image gradient, which
//! accounts for silhouette and occlusion edges sweeping across pixel centres.

mod raster;
mod shade;

use std::collections::HashMap;

pub use raster::{
    barycentric, project_vertices, rasterize, RasterState, ScreenVertex, BACKGROUND_ID, NEAR,
};
pub use shade::{shade_vertices, vertex_normals, DirectionalLight, LightRig, Rgb, VertexNormals};

use crate::error::{contract, Result};
use crate::image::Image;
use crate::mesh::{apply_pose, pose_transform, pose_transform_dtheta, CameraRig, Mesh, Vec3};

/// Everything the backward pass needs from one forward render.
#[derive(Debug, Clone)]
pub struct RenderState {
    pub theta: f64,
    pub lambda: f64,
    pub camera: CameraRig,
    pub rig: LightRig,
    pub object: Mesh,
    pub posed: Mesh,
    pub normals: VertexNormals,
    dirs: Vec<(Vec3, Vec3)>,
    pub colours: Vec<Rgb>,
    pub screen: Vec<ScreenVertex>,
    pub raster: RasterState,
    pub image: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrads {
    pub camera_vertices: Vec<Vec3>,
    pub object_vertices: Vec<Vec3>,
    pub colours: Vec<Rgb>,
    pub theta: f64,
    pub lambda: f64,
}

pub fn render_with_state(
    mesh: &Mesh,
    theta: f64,
    lambda: f64,
    rig: &LightRig,
    camera: &CameraRig,
    background: Rgb,
) -> Result<RenderState> {
    camera.validate()?;
    if !theta.is_finite() || !lambda.is_finite() {
        return contract("pose and lighting angles must be finite");
    }
    let posed = apply_pose(mesh, theta, camera);
    let normals = vertex_normals(&posed);
    let dirs = rig.directions(lambda, camera);
    let colours = shade::shade_with(&normals, rig, &dirs);
    let screen = project_vertices(&posed, camera);
    let (image, raster) = rasterize(
        &screen,
        &posed.triangles,
        &colours,
        background,
        camera.width,
        camera.height,
    );
    Ok(RenderState {
        theta,
        lambda,
        camera: *camera,
        rig: rig.clone(),
        object: mesh.clone(),
        posed,
        normals,
        dirs,
        colours,
        screen,
        raster,
        image,
    })
}

/// Renders an object-space mesh at azimuth `theta` under `rig` rotated by `lambda`.
pub fn render(
    mesh: &Mesh,
    theta: f64,
    lambda: f64,
    rig: &LightRig,
    camera: &CameraRig,
    background: Rgb,
) -> Result<Image> {
    Ok(render_with_state(mesh, theta, lambda, rig, camera, background)?.image)
}

/// Gradient of `sum_k q_k b_k(p)` with respect to the three screen positions,
/// where `b` are the barycentrics of `p` in triangle `(a, b, c)`.
fn weighted_barycentric_grad(
    a: (f64, f64),
    b: (f64, f64),
    c: (f64, f64),
    p: (f64, f64),
    q: [f64; 3],
) -> [[f64; 2]; 3] {
    let edge = |u: (f64, f64), v: (f64, f64), w: (f64, f64)| {
        (v.0 - u.0) * (w.1 - u.1) - (v.1 - u.1) * (w.0 - u.0)
    };
    let area = edge(a, b, c);
    let num = q[0] * edge(b, c, p) + q[1] * edge(c, a, p) + q[2] * edge(a, b, p);
    let value = num / area;
    let d_num = [
        [
            q[1] * (p.1 - c.1) + q[2] * (b.1 - p.1),
            q[1] * (c.0 - p.0) + q[2] * (p.0 - b.0),
        ],
        [
            q[0] * (c.1 - p.1) + q[2] * (p.1 - a.1),
            q[0] * (p.0 - c.0) + q[2] * (a.0 - p.0),
        ],
        [
            q[0] * (p.1 - b.1) + q[1] * (a.1 - p.1),
            q[0] * (b.0 - p.0) + q[1] * (p.0 - a.0),
        ],
    ];
    let d_area = [
        [b.1 - c.1, c.0 - b.0],
        [c.1 - a.1, a.0 - c.0],
        [a.1 - b.1, b.0 - a.0],
    ];
    std::array::from_fn(|j| {
        [
            (d_num[j][0] - value * d_area[j][0]) / area,
            (d_num[j][1] - value * d_area[j][1]) / area,
        ]
    })
}

/// Triangles sharing an edge with each triangle.
fn edge_adjacency(triangles: &[[usize; 3]]) -> Vec<Vec<u32>> {
    let mut by_edge: HashMap<(usize, usize), Vec<u32>> = HashMap::new();
    for (t, tri) in triangles.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            by_edge.entry((a.min(b), a.max(b))).or_default().push(t as u32);
        }
    }
    let mut adjacent = vec![Vec::new(); triangles.len()];
    for tris in by_edge.values() {
        for &t in tris {
            for &u in tris {
                if t != u && !adjacent[t as usize].contains(&u) {
                    adjacent[t as usize].push(u);
                }
            }
        }
    }
    adjacent
}

fn pixel_centre(p: usize, width: usize) -> (f64, f64) {
    ((p % width) as f64 + 0.5, (p / width) as f64 + 0.5)
}

/// Where segment `p0 -> p1` crosses segment `a -> b`, as the fractions
/// `(s, u)` along each; `None` if they miss or are parallel.
fn segment_crossing(p0: (f64, f64), p1: (f64, f64), a: (f64, f64), b: (f64, f64)) -> Option<(f64, f64)> {
    let r = (p1.0 - p0.0, p1.1 - p0.1);
    let e = (b.0 - a.0, b.1 - a.1);
    let denom = r.0 * e.1 - r.1 * e.0;
    if denom.abs() < 1e-12 {
        return None;
    }
    let d = (a.0 - p0.0, a.1 - p0.1);
    let s = (d.0 * e.1 - d.1 * e.0) / denom;
    let u = (d.0 * r.1 - d.1 * r.0) / denom;
    ((0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&u)).then_some((s, u))
}

/// Central-difference image gradient at `(x, y)` (one-sided at the border).
fn image_gradient(img: &Image, x: usize, y: usize) -> ([f64; 3], [f64; 3]) {
    let diff = |lo: [f64; 3], hi: [f64; 3], span: f64| -> [f64; 3] {
        std::array::from_fn(|c| (hi[c] - lo[c]) / span)
    };
    let gx = match (x > 0, x + 1 < img.width) {
        (true, true) => diff(img.pixel(x - 1, y), img.pixel(x + 1, y), 2.0),
        (false, true) => diff(img.pixel(x, y), img.pixel(x + 1, y), 1.0),
        (true, false) => diff(img.pixel(x - 1, y), img.pixel(x, y), 1.0),
        (false, false) => [0.0; 3],
    };
    let gy = match (y > 0, y + 1 < img.height) {
        (true, true) => diff(img.pixel(x, y - 1), img.pixel(x, y + 1), 2.0),
        (false, true) => diff(img.pixel(x, y), img.pixel(x, y + 1), 1.0),
        (true, false) => diff(img.pixel(x, y - 1), img.pixel(x, y), 1.0),
        (false, false) => [0.0; 3],
    };
    (gx, gy)
}

/// How pixels on a silhouette or occlusion edge contribute to vertex-position
/// gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EdgeGradients {
    /// Edge pixels use the image-gradient boundary estimate.
    #[default]
    Boundary,
    /// Every covered pixel uses only its own triangle's interpolation, the
    /// exact derivative of the point-sampled image wherever no edge crosses
    /// a pixel centre.
    Interior,
}

/// Back-propagates a per-pixel RGB gradient through a forward render.
pub fn render_backward(state: &RenderState, upstream: &Image) -> Result<RenderGrads> {
    render_backward_with(state, upstream, EdgeGradients::Boundary)
}

pub fn render_backward_with(state: &RenderState, upstream: &Image, edges: EdgeGradients) -> Result<RenderGrads> {
    let raster = &state.raster;
    let (w, h) = (raster.width, raster.height);
    if upstream.width != w || upstream.height != h {
        return contract(format!(
            "upstream gradient is {}x{}, forward render was {w}x{h}",
            upstream.width, upstream.height
        ));
    }
    let triangles = &state.posed.triangles;
    let nv = state.posed.vertices.len();
    let mut d_colours = vec![[0.0; 3]; nv];
    let mut d_screen = vec![[0.0f64; 2]; nv];
    let adjacency = edge_adjacency(triangles);

    let discontinuous = |p: usize, q: usize| {
        let (tp, tq) = (raster.triangle[p], raster.triangle[q]);
        if tp == tq {
            return false;
        }
        if tp == BACKGROUND_ID || tq == BACKGROUND_ID {
            return true;
        }
        !adjacency[tp as usize].contains(&tq)
    };
    let screen_xy = |i: usize| (state.screen[i].x, state.screen[i].y);

    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let g = upstream.pixel(x, y);
            if g == [0.0; 3] {
                continue;
            }
            let centre = (x as f64 + 0.5, y as f64 + 0.5);
            if raster.covered(p) {
                let tri = triangles[raster.triangle[p] as usize];
                let bary = raster.barycentric[p];
                for k in 0..3 {
                    for c in 0..3 {
                        d_colours[tri[k]][c] += bary[k] * g[c];
                    }
                }
            }

            let mut neighbours = [usize::MAX; 4];
            let mut boundary = false;
            let candidates = [
                (x > 0).then(|| p - 1),
                (x + 1 < w).then(|| p + 1),
                (y > 0).then(|| p - w),
                (y + 1 < h).then(|| p + w),
            ];
            for (slot, q) in candidates.into_iter().enumerate() {
                if let Some(q) = q {
                    if edges == EdgeGradients::Boundary && discontinuous(p, q) {
                        neighbours[slot] = q;
                        boundary = true;
                    }
                }
            }

            if !boundary {
                if raster.covered(p) {
                    let tri = triangles[raster.triangle[p] as usize];
                    let q: [f64; 3] = std::array::from_fn(|k| {
                        let c = state.colours[tri[k]];
                        g[0] * c[0] + g[1] * c[1] + g[2] * c[2]
                    });
                    let grads = weighted_barycentric_grad(
                        screen_xy(tri[0]),
                        screen_xy(tri[1]),
                        screen_xy(tri[2]),
                        centre,
                        q,
                    );
                    for k in 0..3 {
                        d_screen[tri[k]][0] += grads[k][0];
                        d_screen[tri[k]][1] += grads[k][1];
                    }
                }
                continue;
            }

            // the edge belongs to the nearest surface among p and its discontinuous neighbours
            let mut owner = raster.covered(p).then_some((raster.inv_depth[p], p));
            for &q in neighbours.iter().filter(|&&q| q != usize::MAX) {
                if raster.covered(q) && owner.is_none_or(|(z, _)| raster.inv_depth[q] > z) {
                    owner = Some((raster.inv_depth[q], q));
                }
            }
            let Some((_, owner)) = owner else { continue };
            let (gx, gy) = image_gradient(&state.image, x, y);
            let dx = g[0] * gx[0] + g[1] * gx[1] + g[2] * gx[2];
            let dy = g[0] * gy[0] + g[1] * gy[1] + g[2] * gy[2];

            // the moving edge is the outermost mesh edge between the owner's
            // centre and the uncovered (or farther) side, searched over the
            // owner triangle and its neighbours so that thin, nearly edge-on
            // faces at a silhouette get their share
            let owner_tri = raster.triangle[owner] as usize;
            let from = pixel_centre(owner, w);
            let far: Vec<usize> = if owner == p {
                neighbours.iter().copied().filter(|&q| q != usize::MAX).collect()
            } else {
                vec![p]
            };
            let mut crossing: Option<(f64, usize, usize, f64)> = None;
            for t in std::iter::once(owner_tri).chain(adjacency[owner_tri].iter().map(|&t| t as usize)) {
                let tri = triangles[t];
                for k in 0..3 {
                    let (a, b) = (tri[k], tri[(k + 1) % 3]);
                    for &q in &far {
                        if let Some((s, u)) = segment_crossing(from, pixel_centre(q, w), screen_xy(a), screen_xy(b)) {
                            if crossing.is_none_or(|c| s > c.0) {
                                crossing = Some((s, a, b, u));
                            }
                        }
                    }
                }
            }
            if let Some((_, a, b, u)) = crossing {
                for (v, wt) in [(a, 1.0 - u), (b, u)] {
                    d_screen[v][0] -= wt * dx;
                    d_screen[v][1] -= wt * dy;
                }
                continue;
            }

            let tri = triangles[owner_tri];
            let Some(bary) = barycentric(
                screen_xy(tri[0]),
                screen_xy(tri[1]),
                screen_xy(tri[2]),
                centre,
            ) else {
                continue;
            };
            let clamped = bary.map(|b| b.max(0.0));
            let total: f64 = clamped.iter().sum();
            if total <= 0.0 {
                continue;
            }
            for k in 0..3 {
                let b = clamped[k] / total;
                d_screen[tri[k]][0] -= b * dx;
                d_screen[tri[k]][1] -= b * dy;
            }
        }
    }

    let (mut d_cam, d_lambda) = shade::shade_backward(
        &state.posed,
        &state.normals,
        &state.rig,
        &state.dirs,
        &d_colours,
    );
    for (v, ds) in d_screen.iter().enumerate() {
        if ds[0] == 0.0 && ds[1] == 0.0 {
            continue;
        }
        let (jx, jy) = raster::projection_jacobian(&state.posed.vertices[v], &state.camera);
        d_cam[v] += ds[0] * jx + ds[1] * jy;
    }

    let (linear, _) = pose_transform(state.theta, &state.camera);
    let d_linear = pose_transform_dtheta(state.theta, &state.camera);
    let object_vertices = d_cam.iter().map(|g| linear.transpose() * g).collect();
    let theta = d_cam
        .iter()
        .zip(&state.object.vertices)
        .map(|(g, v)| g.dot(&(d_linear * v)))
        .sum();
    Ok(RenderGrads {
        camera_vertices: d_cam,
        object_vertices,
        colours: d_colours,
        theta,
        lambda: d_lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::cuboid;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn weighted_barycentric_grad_matches_finite_differences() {
        let pts = [(1.0, 2.0), (7.5, 3.0), (2.5, 8.0)];
        let p = (3.5, 4.5);
        let q = [0.7, -0.3, 1.1];
        let value = |pts: &[(f64, f64); 3]| {
            let b = barycentric(pts[0], pts[1], pts[2], p).unwrap();
            b[0] * q[0] + b[1] * q[1] + b[2] * q[2]
        };
        let g = weighted_barycentric_grad(pts[0], pts[1], pts[2], p, q);
        let h = 1e-6;
        for j in 0..3 {
            for axis in 0..2 {
                let mut up = pts;
                let mut down = pts;
                if axis == 0 {
                    up[j].0 += h;
                    down[j].0 -= h;
                } else {
                    up[j].1 += h;
                    down[j].1 -= h;
                }
                let fd = (value(&up) - value(&down)) / (2.0 * h);
                assert_relative_eq!(g[j][axis], fd, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn empty_mesh_renders_background() {
        let cam = CameraRig::with_size(8, 6);
        let img = render(&Mesh::default(), 0.3, 0.0, &LightRig::white(), &cam, [0.2, 0.3, 0.4]).unwrap();
        assert_eq!(img, Image::filled(8, 6, [0.2, 0.3, 0.4]));
    }

    #[test]
    fn full_turn_renders_identically() {
        let cam = CameraRig::with_size(32, 24);
        let mesh = cuboid(Vec3::new(0.1, 0.0, 0.0), Vec3::new(0.8, 0.5, 0.3));
        let rig = LightRig::colour();
        let a = render(&mesh, 0.4, 0.2, &rig, &cam, [0.0; 3]).unwrap();
        let b = render(&mesh, 0.4 + 2.0 * PI, 0.2, &rig, &cam, [0.0; 3]).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_relative_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let cam = CameraRig::with_size(32, 24);
        let mesh = cuboid(Vec3::zeros(), Vec3::new(0.8, 0.5, 0.3));
        let rig = LightRig::colour();
        let a = render(&mesh, 0.4, 0.2, &rig, &cam, [0.0; 3]).unwrap();
        let b = render(&mesh, 0.4, 0.2, &rig, &cam, [0.0; 3]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cam = CameraRig::with_size(16, 12);
        let mesh = cuboid(Vec3::zeros(), Vec3::new(0.8, 0.5, 0.3));
        let state = render_with_state(&mesh, 0.4, 0.2, &LightRig::colour(), &cam, [0.0; 3]).unwrap();
        let grads = render_backward(&state, &Image::zeros(16, 12)).unwrap();
        assert!(grads.camera_vertices.iter().all(|g| *g == Vec3::zeros()));
        assert!(grads.colours.iter().all(|g| *g == [0.0; 3]));
        assert_eq!(grads.theta, 0.0);
        assert_eq!(grads.lambda, 0.0);
        assert!(render_backward(&state, &Image::zeros(15, 12)).is_err());
    }

    #[test]
    fn single_pixel_colour_gradient_is_barycentric() {
        let cam = CameraRig::with_size(32, 24);
        let mesh = cuboid(Vec3::zeros(), Vec3::new(0.8, 0.8, 0.8));
        let state = render_with_state(&mesh, 0.3, 0.0, &LightRig::white(), &cam, [0.0; 3]).unwrap();
        let p = 12 * 32 + 16;
        assert!(state.raster.covered(p));
        let mut up = Image::zeros(32, 24);
        up.data[3 * p + 1] = 1.0;
        let grads = render_backward(&state, &up).unwrap();
        let tri = mesh.triangles[state.raster.triangle[p] as usize];
        let bary = state.raster.barycentric[p];
        for k in 0..3 {
            assert_relative_eq!(grads.colours[tri[k]][1], bary[k], epsilon = 1e-15);
            assert_eq!(grads.colours[tri[k]][0], 0.0);
        }
    }
}
