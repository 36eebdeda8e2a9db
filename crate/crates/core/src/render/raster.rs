//! Perspective projection and z-buffered, point-sampled triangle rasterisation.

use crate::image::Image;
use crate::mesh::{CameraRig, Mesh, Vec3};

use super::shade::Rgb;

/// Vertices closer to the eye than this are treated as clipped.
pub const NEAR: f64 = 1e-3;

pub const BACKGROUND_ID: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScreenVertex {
    pub x: f64,
    pub y: f64,
    /// Distance along the viewing axis; positive in front of the eye.
    pub depth: f64,
}

impl ScreenVertex {
    pub fn clipped(&self) -> bool {
        !(self.depth > NEAR)
    }
}

/// Projects camera-space vertices onto the pixel grid. Pixel `(i, j)` has its
/// centre at `(i + 0.5, j + 0.5)`; y grows downwards.
pub fn project_vertices(mesh: &Mesh, camera: &CameraRig) -> Vec<ScreenVertex> {
    let f = camera.focal();
    let (cx, cy) = (0.5 * camera.width as f64, 0.5 * camera.height as f64);
    mesh.vertices
        .iter()
        .map(|v| {
            let depth = -v.z;
            if depth > NEAR {
                ScreenVertex {
                    x: cx + f * v.x / depth,
                    y: cy - f * v.y / depth,
                    depth,
                }
            } else {
                ScreenVertex {
                    x: f64::NAN,
                    y: f64::NAN,
                    depth,
                }
            }
        })
        .collect()
}

/// Jacobian rows `(d screen x, d screen y)` with respect to a camera-space vertex.
pub(crate) fn projection_jacobian(v: &Vec3, camera: &CameraRig) -> (Vec3, Vec3) {
    let f = camera.focal();
    let depth = -v.z;
    let inv = 1.0 / depth;
    (
        Vec3::new(f * inv, 0.0, f * v.x * inv * inv),
        Vec3::new(0.0, -f * inv, -f * v.y * inv * inv),
    )
}

/// Per-pixel visibility left by the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterState {
    pub width: usize,
    pub height: usize,
    /// Front-most triangle at each pixel centre, or [`BACKGROUND_ID`].
    pub triangle: Vec<u32>,
    pub barycentric: Vec<[f64; 3]>,
    /// Interpolated inverse depth of the visible surface (0 for background).
    pub inv_depth: Vec<f64>,
}

impl RasterState {
    pub fn covered(&self, p: usize) -> bool {
        self.triangle[p] != BACKGROUND_ID
    }
}

#[inline]
fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Screen-space barycentric coordinates of `p` in triangle `(a, b, c)`, or
/// `None` for a degenerate triangle.
pub fn barycentric(a: (f64, f64), b: (f64, f64), c: (f64, f64), p: (f64, f64)) -> Option<[f64; 3]> {
    let area = edge(a, b, c);
    if area.abs() < 1e-12 {
        return None;
    }
    Some([edge(b, c, p) / area, edge(c, a, p) / area, edge(a, b, p) / area])
}

/// Rasterises the triangles of a projected mesh. Both windings are drawn; a
/// pixel takes the colour of the nearest triangle covering its centre, with
/// the lower triangle index winning exact depth ties.
pub fn rasterize(
    screen: &[ScreenVertex],
    triangles: &[[usize; 3]],
    colours: &[Rgb],
    background: Rgb,
    width: usize,
    height: usize,
) -> (Image, RasterState) {
    let mut image = Image::filled(width, height, background);
    let mut state = RasterState {
        width,
        height,
        triangle: vec![BACKGROUND_ID; width * height],
        barycentric: vec![[0.0; 3]; width * height],
        inv_depth: vec![0.0; width * height],
    };
    for (t, tri) in triangles.iter().enumerate() {
        let [a, b, c] = tri.map(|i| screen[i]);
        if a.clipped() || b.clipped() || c.clipped() {
            continue;
        }
        let (pa, pb, pc) = ((a.x, a.y), (b.x, b.y), (c.x, c.y));
        if edge(pa, pb, pc).abs() < 1e-12 {
            continue;
        }
        let x0 = (a.x.min(b.x).min(c.x) - 0.5).ceil().max(0.0) as usize;
        let y0 = (a.y.min(b.y).min(c.y) - 0.5).ceil().max(0.0) as usize;
        let x1 = (a.x.max(b.x).max(c.x) - 0.5).floor();
        let y1 = (a.y.max(b.y).max(c.y) - 0.5).floor();
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let x1 = (x1 as usize).min(width - 1);
        let y1 = (y1 as usize).min(height - 1);
        let inv = [1.0 / a.depth, 1.0 / b.depth, 1.0 / c.depth];
        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = (x as f64 + 0.5, y as f64 + 0.5);
                let Some(bary) = barycentric(pa, pb, pc, p) else {
                    continue;
                };
                if bary.iter().any(|&w| w < 0.0) {
                    continue;
                }
                let z = bary[0] * inv[0] + bary[1] * inv[1] + bary[2] * inv[2];
                let idx = y * width + x;
                if state.triangle[idx] != BACKGROUND_ID && z <= state.inv_depth[idx] {
                    continue;
                }
                state.triangle[idx] = t as u32;
                state.barycentric[idx] = bary;
                state.inv_depth[idx] = z;
            }
        }
    }
    for idx in 0..width * height {
        let t = state.triangle[idx];
        if t == BACKGROUND_ID {
            continue;
        }
        let tri = triangles[t as usize];
        let bary = state.barycentric[idx];
        let mut rgb = [0.0; 3];
        for k in 0..3 {
            for ch in 0..3 {
                rgb[ch] += bary[k] * colours[tri[k]][ch];
            }
        }
        image.data[3 * idx..3 * idx + 3].copy_from_slice(&rgb);
    }
    (image, state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sv(x: f64, y: f64, depth: f64) -> ScreenVertex {
        ScreenVertex { x, y, depth }
    }

    #[test]
    fn on_axis_vertex_projects_to_centre() {
        let camera = CameraRig::with_size(32, 24);
        let mesh = Mesh {
            vertices: vec![Vec3::new(0.0, 0.0, -3.0)],
            triangles: vec![],
        };
        let s = project_vertices(&mesh, &camera)[0];
        assert_eq!((s.x, s.y, s.depth), (16.0, 12.0, 3.0));
    }

    #[test]
    fn mirrored_vertices_project_mirrored() {
        let camera = CameraRig::with_size(33, 24);
        let mesh = Mesh {
            vertices: vec![Vec3::new(0.4, 0.1, -2.0), Vec3::new(-0.4, 0.1, -2.0)],
            triangles: vec![],
        };
        let s = project_vertices(&mesh, &camera);
        assert_relative_eq!(s[0].x - 16.5, 16.5 - s[1].x, epsilon = 1e-12);
        assert_eq!(s[0].y, s[1].y);
    }

    #[test]
    fn doubling_depth_halves_offset() {
        let camera = CameraRig::with_size(32, 24);
        let mesh = Mesh {
            vertices: vec![Vec3::new(0.3, -0.2, -1.5), Vec3::new(0.6, -0.4, -3.0)],
            triangles: vec![],
        };
        let s = project_vertices(&mesh, &camera);
        // (0.6, -0.4, -3) lies on the same ray: same position
        assert_relative_eq!(s[0].x, s[1].x, epsilon = 1e-12);
        let far = project_vertices(
            &Mesh {
                vertices: vec![Vec3::new(0.3, -0.2, -3.0)],
                triangles: vec![],
            },
            &camera,
        )[0];
        assert_relative_eq!(far.x - 16.0, 0.5 * (s[0].x - 16.0), epsilon = 1e-12);
        assert_relative_eq!(far.y - 12.0, 0.5 * (s[0].y - 12.0), epsilon = 1e-12);
    }

    #[test]
    fn vertex_behind_eye_is_clipped() {
        let camera = CameraRig::with_size(8, 8);
        let mesh = Mesh {
            vertices: vec![Vec3::new(0.0, 0.0, 1.0)],
            triangles: vec![],
        };
        assert!(project_vertices(&mesh, &camera)[0].clipped());
    }

    #[test]
    fn projection_jacobian_matches_finite_differences() {
        let camera = CameraRig::with_size(32, 24);
        let v = Vec3::new(0.3, -0.2, -1.7);
        let (jx, jy) = projection_jacobian(&v, &camera);
        let h = 1e-6;
        for k in 0..3 {
            let mut up = v;
            up[k] += h;
            let mut down = v;
            down[k] -= h;
            let p = |q: Vec3| project_vertices(&Mesh { vertices: vec![q], triangles: vec![] }, &camera)[0];
            let (a, b) = (p(up), p(down));
            assert_relative_eq!(jx[k], (a.x - b.x) / (2.0 * h), epsilon = 1e-5);
            assert_relative_eq!(jy[k], (a.y - b.y) / (2.0 * h), epsilon = 1e-5);
        }
    }

    #[test]
    fn empty_mesh_gives_background() {
        let (img, state) = rasterize(&[], &[], &[], [0.1, 0.2, 0.3], 4, 3);
        assert_eq!(img, Image::filled(4, 3, [0.1, 0.2, 0.3]));
        assert!(state.triangle.iter().all(|&t| t == BACKGROUND_ID));
    }

    #[test]
    fn constant_colour_triangle() {
        let screen = [sv(0.0, 0.0, 1.0), sv(8.0, 0.0, 1.0), sv(0.0, 8.0, 1.0)];
        let c = [0.3, 0.6, 0.9];
        let (img, _) = rasterize(&screen, &[[0, 1, 2]], &[c, c, c], [0.0; 3], 8, 8);
        for (got, want) in img.pixel(1, 1).iter().zip(c) {
            assert_relative_eq!(*got, want, epsilon = 1e-15);
        }
        assert_eq!(img.pixel(7, 7), [0.0; 3]);
    }

    #[test]
    fn interpolates_at_known_barycentric() {
        // pixel centre (2.5, 2.5): choose vertices so that it sits at (0.5, 0.25, 0.25)
        let p = (2.5, 2.5);
        let b = (6.5, 2.5);
        let c = (2.5, 6.5);
        // p = 0.5 a + 0.25 b + 0.25 c  =>  a = 2 p - 0.5 (b + c)
        let a = (2.0 * p.0 - 0.5 * (b.0 + c.0), 2.0 * p.1 - 0.5 * (b.1 + c.1));
        let bary = barycentric(a, b, c, p).unwrap();
        assert_relative_eq!(bary[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(bary[1], 0.25, epsilon = 1e-12);
        let screen = [sv(a.0, a.1, 1.0), sv(b.0, b.1, 1.0), sv(c.0, c.1, 1.0)];
        let colours = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let (img, _) = rasterize(&screen, &[[0, 1, 2]], &colours, [0.0; 3], 8, 8);
        let px = img.pixel(2, 2);
        assert_relative_eq!(px[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(px[1], 0.25, epsilon = 1e-12);
        assert_relative_eq!(px[2], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn nearer_triangle_wins_and_ties_go_to_lower_index() {
        let big = |d: f64| [sv(-1.0, -1.0, d), sv(20.0, -1.0, d), sv(-1.0, 20.0, d)];
        let mut screen = big(2.0).to_vec();
        screen.extend(big(1.0));
        let red = [1.0, 0.0, 0.0];
        let blue = [0.0, 0.0, 1.0];
        let colours = [red, red, red, blue, blue, blue];
        let (img, state) = rasterize(&screen, &[[0, 1, 2], [3, 4, 5]], &colours, [0.0; 3], 4, 4);
        assert_eq!(img.pixel(1, 1), blue);
        assert_eq!(state.triangle[5], 1);
        // equal depth: triangle 0 keeps the pixel
        let mut tie = big(1.0).to_vec();
        tie.extend(big(1.0));
        let (img, _) = rasterize(&tie, &[[0, 1, 2], [3, 4, 5]], &colours, [0.0; 3], 4, 4);
        assert_eq!(img.pixel(1, 1), red);
    }
}
