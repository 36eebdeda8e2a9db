//! Synthetic shape families, OBJ meshes, dataset manifests and pre-rendered
//! image sets with pose and lighting sidecars.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, io_err, Error, Result};
use crate::image::Image;
use crate::mesh::{cuboid, subdivided_cube, CameraRig, Mesh, Vec3};
use crate::render::{render, LightRig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    /// Bench-like compositions of 2-4 axis-aligned blocks with a back on one side.
    Blocks,
    /// Subdivided boxes under smooth random deformations.
    DeformedBoxes,
    /// A floor slab and four walls around an open cavity.
    OpenBox,
}

impl FamilyKind {
    pub fn parse(name: &str) -> Option<FamilyKind> {
        match name {
            "blocks" => Some(FamilyKind::Blocks),
            "deformed-boxes" => Some(FamilyKind::DeformedBoxes),
            "open-box" => Some(FamilyKind::OpenBox),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FamilyKind::Blocks => "blocks",
            FamilyKind::DeformedBoxes => "deformed-boxes",
            FamilyKind::OpenBox => "open-box",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFamily {
    pub kind: FamilyKind,
    /// Scales every sampling range around its midpoint; 0 gives one fixed shape.
    pub variation: f64,
}

impl SyntheticFamily {
    pub fn new(kind: FamilyKind) -> Self {
        SyntheticFamily { kind, variation: 1.0 }
    }

    fn range<R: Rng>(&self, rng: &mut R, lo: f64, hi: f64) -> f64 {
        let mid = 0.5 * (lo + hi);
        let half = 0.5 * (hi - lo) * self.variation.clamp(0.0, 1.0);
        if half == 0.0 {
            mid
        } else {
            rng.random_range(mid - half..mid + half)
        }
    }

    /// Draws one shape, centred at the origin with its longest side 1.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Mesh {
        let mesh = match self.kind {
            FamilyKind::Blocks => self.sample_blocks(rng),
            FamilyKind::DeformedBoxes => self.sample_deformed(rng),
            FamilyKind::OpenBox => self.sample_open_box(rng),
        };
        normalise(&mesh)
    }

    fn sample_blocks<R: Rng>(&self, rng: &mut R) -> Mesh {
        // a wide, shallow seat with a back along one long side: no half- or
        // quarter-turn symmetry
        let (w, h, d) = (
            self.range(rng, 0.85, 1.0),
            self.range(rng, 0.12, 0.25),
            self.range(rng, 0.45, 0.6),
        );
        let mut mesh = cuboid(Vec3::zeros(), Vec3::new(w, h, d));
        let (hb, tb) = (self.range(rng, 0.45, 0.8), self.range(rng, 0.1, 0.18));
        mesh.append(&cuboid(
            Vec3::new(0.0, h / 2.0 + hb / 2.0, -d / 2.0 + tb / 2.0),
            Vec3::new(w, hb, tb),
        ));
        if rng.random_bool(0.5) {
            let (ta, ha) = (self.range(rng, 0.1, 0.2), self.range(rng, 0.2, 0.35));
            mesh.append(&cuboid(
                Vec3::new(w / 2.0 - ta / 2.0, h / 2.0 + ha / 2.0, tb / 2.0),
                Vec3::new(ta, ha, d - tb),
            ));
        }
        if rng.random_bool(0.5) {
            let hs = self.range(rng, 0.25, 0.45);
            mesh.append(&cuboid(
                Vec3::new(0.0, -h / 2.0 - hs / 2.0, 0.0),
                Vec3::new(0.6 * w, hs, 0.6 * d),
            ));
        }
        mesh
    }

    fn sample_deformed<R: Rng>(&self, rng: &mut R) -> Mesh {
        let base = subdivided_cube(4);
        let scale = Vec3::new(
            self.range(rng, 0.5, 1.0),
            self.range(rng, 0.4, 1.0),
            self.range(rng, 0.5, 1.0),
        );
        let taper = self.range(rng, -0.4, 0.4);
        let bend = self.range(rng, -0.25, 0.25);
        let mut waves = [(0.0, 0.0); 3];
        for w in &mut waves {
            *w = (self.range(rng, -0.08, 0.08), rng.random_range(0.0..2.0 * PI));
        }
        base.transformed(|v| {
            let mut p = v.component_mul(&scale);
            let t = 1.0 + taper * v.y;
            p.x *= t;
            p.z *= t;
            p.x += bend * v.y * v.y;
            for (k, &(amp, phase)) in waves.iter().enumerate() {
                let n = v.normalize();
                p += n * amp * (PI * v[(k + 1) % 3] + phase).sin();
            }
            p
        })
    }

    /// A shallow tray: floor plus four walls. The walls stay low enough that
    /// the floor shows over the near wall from the fixed camera elevation.
    fn sample_open_box<R: Rng>(&self, rng: &mut R) -> Mesh {
        let (w, d) = (self.range(rng, 0.85, 1.0), self.range(rng, 0.8, 1.0));
        let h = self.range(rng, 0.26, 0.32);
        let t = self.range(rng, 0.08, 0.12);
        let floor = self.range(rng, 0.06, 0.09);
        let wall_h = h - floor;
        let y_wall = -h / 2.0 + floor + wall_h / 2.0;
        let mut mesh = cuboid(Vec3::new(0.0, -h / 2.0 + floor / 2.0, 0.0), Vec3::new(w, floor, d));
        for side in [-1.0, 1.0] {
            mesh.append(&cuboid(
                Vec3::new(side * (w - t) / 2.0, y_wall, 0.0),
                Vec3::new(t, wall_h, d),
            ));
            mesh.append(&cuboid(
                Vec3::new(0.0, y_wall, side * (d - t) / 2.0),
                Vec3::new(w - 2.0 * t, wall_h, t),
            ));
        }
        mesh
    }
}

/// Centres the bounding box at the origin and scales its longest side to 1.
pub fn normalise(mesh: &Mesh) -> Mesh {
    let Some((lo, hi)) = mesh.bounds() else {
        return mesh.clone();
    };
    let centre = (lo + hi) / 2.0;
    let extent = (hi - lo).max();
    let s = if extent > 0.0 { 1.0 / extent } else { 1.0 };
    mesh.transformed(|v| (v - centre) * s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    /// Path of the OBJ file, relative to the manifest.
    pub mesh: String,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Lighting {
    Colour,
    White,
}

impl Lighting {
    pub fn rig(&self) -> LightRig {
        match self {
            Lighting::Colour => LightRig::colour(),
            Lighting::White => LightRig::white(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LightRotation {
    Fixed,
    Varying,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub width: usize,
    pub height: usize,
    pub camera_distance: f64,
    pub camera_elevation_deg: f64,
    pub fov_deg: f64,
    pub lighting: Lighting,
    pub light_rotation: LightRotation,
    /// Lighting angle for fixed-lighting datasets.
    pub fixed_lambda: f64,
    pub views: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        let c = CameraRig::default();
        RenderSettings {
            width: 32,
            height: 24,
            camera_distance: c.distance,
            camera_elevation_deg: c.elevation.to_degrees(),
            fov_deg: c.fov.to_degrees(),
            lighting: Lighting::Colour,
            light_rotation: LightRotation::Fixed,
            fixed_lambda: 0.0,
            views: 1,
        }
    }
}

impl RenderSettings {
    pub fn camera(&self) -> CameraRig {
        CameraRig {
            distance: self.camera_distance,
            elevation: self.camera_elevation_deg.to_radians(),
            fov: self.fov_deg.to_radians(),
            width: self.width,
            height: self.height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.camera().validate()?;
        if self.views == 0 {
            return Err(Error::Config("views must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class: String,
    pub family: Option<SyntheticFamily>,
    pub seed: u64,
    pub instances: Vec<InstanceRecord>,
    pub render: RenderSettings,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        self.render.validate()?;
        let mut ids: Vec<&str> = self.instances.iter().map(|i| i.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return contract("instance ids must be unique");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &InstanceRecord> {
        self.instances.iter().filter(move |i| i.split == split)
    }
}

/// Writes through a temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    std::fs::write(&tmp, bytes).map_err(io_err(format!("writing {}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(io_err(format!("renaming into {}", path.display())))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(format!("creating {}", path.display())))
}

/// Number of training instances for an 80/20 split of `n`.
pub fn train_count(n: usize) -> usize {
    (0.8 * n as f64).round() as usize
}

/// Samples `n` shapes, writes them as OBJ files under `out/meshes`, and
/// writes `out/manifest.json` with a seeded 80/20 train/test split.
pub fn generate_synthetic_dataset(
    family: SyntheticFamily,
    n: usize,
    seed: u64,
    render: RenderSettings,
    out: &Path,
) -> Result<DatasetManifest> {
    if n < 2 {
        return contract("a dataset needs at least two instances");
    }
    let meshes_dir = out.join("meshes");
    create_dir(&meshes_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = Vec::with_capacity(n);
    for i in 0..n {
        let mesh = family.sample(&mut rng);
        let id = format!("{}_{i:04}", family.kind.name());
        let rel = format!("meshes/{id}.obj");
        write_atomic(&out.join(&rel), to_obj(&mesh).as_bytes())?;
        instances.push(InstanceRecord {
            id,
            mesh: rel,
            split: Split::Train,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for &i in &order[train_count(n)..] {
        instances[i].split = Split::Test;
    }
    let manifest = DatasetManifest {
        class: family.kind.name().to_string(),
        family: Some(family),
        seed,
        instances,
        render,
    };
    manifest.validate()?;
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Meshes of one split, in manifest order.
pub fn load_split(manifest: &DatasetManifest, root: &Path, split: Split) -> Result<Vec<(String, Mesh)>> {
    manifest
        .split(split)
        .map(|rec| Ok((rec.id.clone(), load_obj(&root.join(&rec.mesh))?)))
        .collect()
}

pub fn to_obj(mesh: &Mesh) -> String {
    let mut s = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
    }
    for t in &mesh.triangles {
        let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    s
}

pub fn save_obj(mesh: &Mesh, path: &Path) -> Result<()> {
    write_atomic(path, to_obj(mesh).as_bytes())
}

/// Parses vertices and faces of an OBJ file. Polygons are fan-triangulated;
/// texture and normal references are ignored; negative indices count back
/// from the latest vertex.
pub fn parse_obj(text: &str, path: &Path) -> Result<Mesh> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        let mut parts = content.split_whitespace();
        match parts.next() {
            Some("v") => {
                let coords: Vec<f64> = parts
                    .take(3)
                    .map(|p| p.parse::<f64>().map_err(|e| err(line, format!("bad coordinate {p:?}: {e}"))))
                    .collect::<Result<_>>()?;
                if coords.len() != 3 {
                    return Err(err(line, "vertex needs three coordinates".into()));
                }
                vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = parts
                    .map(|p| {
                        let first = p.split('/').next().unwrap_or("");
                        let k: i64 = first.parse().map_err(|e| err(line, format!("bad index {p:?}: {e}")))?;
                        let n = vertices.len() as i64;
                        let resolved = if k > 0 { k - 1 } else { n + k };
                        if k == 0 || resolved < 0 || resolved >= n {
                            return Err(err(line, format!("index {k} out of range for {n} vertices")));
                        }
                        Ok(resolved as usize)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(err(line, "face needs at least three vertices".into()));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Mesh::new(vertices, triangles)
}

pub fn load_obj(path: &Path) -> Result<Mesh> {
    let text = std::fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
    parse_obj(&text, path)
}

/// Ground truth of one rendered view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub theta: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub instance: String,
    pub view: usize,
    pub image: String,
    #[serde(flatten)]
    pub annotation: Annotation,
}

pub const RENDER_INDEX: &str = "renders.json";

/// Samples a pose (and a lighting angle when lighting varies) for every
/// instance and view, and writes `renders/<id>_<view>.png` plus a JSON
/// sidecar with the sampled angles. Returns the sidecars in write order.
pub fn render_dataset<R: Rng>(manifest: &DatasetManifest, root: &Path, rng: &mut R) -> Result<Vec<Sidecar>> {
    manifest.validate()?;
    let settings = &manifest.render;
    let camera = settings.camera();
    let rig = settings.lighting.rig();
    let dir = root.join("renders");
    create_dir(&dir)?;
    let mut out = Vec::new();
    for rec in &manifest.instances {
        let mesh = load_obj(&root.join(&rec.mesh))?;
        for view in 0..settings.views {
            let theta = rng.random_range(-PI..PI);
            let lambda = match settings.light_rotation {
                LightRotation::Fixed => settings.fixed_lambda,
                LightRotation::Varying => rng.random_range(0.0..PI),
            };
            let img = render(&mesh, theta, lambda, &rig, &camera, [0.0; 3])?;
            let name = format!("{}_{view}", rec.id);
            let png = dir.join(format!("{name}.png"));
            let tmp = dir.join(format!("{name}.png.tmp"));
            img.save_png(&tmp)?;
            std::fs::rename(&tmp, &png).map_err(io_err(format!("renaming into {}", png.display())))?;
            let sidecar = Sidecar {
                instance: rec.id.clone(),
                view,
                image: format!("renders/{name}.png"),
                annotation: Annotation { theta, lambda },
            };
            write_atomic(
                &dir.join(format!("{name}.json")),
                serde_json::to_string_pretty(&sidecar)?.as_bytes(),
            )?;
            out.push(sidecar);
        }
    }
    write_atomic(&root.join(RENDER_INDEX), serde_json::to_string_pretty(&out)?.as_bytes())?;
    Ok(out)
}

/// Loads pre-rendered views of one split, grouped per instance in manifest
/// order: `(id, [(image, sidecar)])`.
pub fn load_rendered(
    manifest: &DatasetManifest,
    root: &Path,
    split: Split,
) -> Result<Vec<(String, Vec<(Image, Sidecar)>)>> {
    let index_path = root.join(RENDER_INDEX);
    let text = std::fs::read_to_string(&index_path).map_err(io_err(format!(
        "reading {} (run render-data first)",
        index_path.display()
    )))?;
    let sidecars: Vec<Sidecar> = serde_json::from_str(&text)?;
    manifest
        .split(split)
        .map(|rec| {
            let views = sidecars
                .iter()
                .filter(|s| s.instance == rec.id)
                .map(|s| Ok((Image::load_png(&root.join(&s.image))?, s.clone())))
                .collect::<Result<Vec<_>>>()?;
            if views.is_empty() {
                return contract(format!("no rendered views for {}", rec.id));
            }
            Ok((rec.id.clone(), views))
        })
        .collect()
}

/// Resolves `path` against `root` unless it is absolute.
pub fn resolve(root: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{voxelize, Bounds};

    const CUBE_OBJ: &str = "\
# cube
v -0.5 -0.5 -0.5
v 0.5 -0.5 -0.5
v 0.5 0.5 -0.5
v -0.5 0.5 -0.5
v -0.5 -0.5 0.5
v 0.5 -0.5 0.5
v 0.5 0.5 0.5
v -0.5 0.5 0.5
vn 0 0 1
f 1 3 2
f 1 4 3
f 5 6 7
f 5 7 8
f 1 2 6
f 1 6 5
f 4 8 7
f 4 7 3
f 1 5 8
f 1 8 4
f 2 3 7
f 2 7 6
";

    #[test]
    fn parses_a_cube() {
        let m = parse_obj(CUBE_OBJ, Path::new("cube.obj")).unwrap();
        assert_eq!(m.vertices.len(), 8);
        assert_eq!(m.triangles.len(), 12);
    }

    #[test]
    fn quads_fan_and_negative_indices() {
        let text = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1/1 2//1 3 4\nf -1 -2 -3\n";
        let m = parse_obj(text, Path::new("q.obj")).unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3], [3, 2, 1]]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse_obj("v 0 0 0\nv 1 x 0\n", Path::new("bad.obj")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        let e = parse_obj("v 0 0 0\nf 1 2 3\n", Path::new("bad.obj")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        assert!(parse_obj("v 0 0\n", Path::new("bad.obj")).is_err());
    }

    #[test]
    fn obj_round_trip() {
        let m = SyntheticFamily::new(FamilyKind::Blocks).sample(&mut ChaCha8Rng::seed_from_u64(1));
        let back = parse_obj(&to_obj(&m), Path::new("m.obj")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn families_fit_the_unit_cube() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in [FamilyKind::Blocks, FamilyKind::DeformedBoxes, FamilyKind::OpenBox] {
            for _ in 0..20 {
                let m = SyntheticFamily::new(kind).sample(&mut rng);
                let (lo, hi) = m.bounds().unwrap();
                assert!(((hi - lo).max() - 1.0).abs() < 1e-12);
                assert!(((lo + hi) / 2.0).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn block_family_is_closed_cuboids() {
        let m = SyntheticFamily::new(FamilyKind::Blocks).sample(&mut ChaCha8Rng::seed_from_u64(3));
        let parts = m.components();
        assert!((2..=4).contains(&parts.len()));
        for p in parts {
            assert_eq!((p.vertices.len(), p.triangles.len()), (8, 12));
        }
    }

    #[test]
    fn open_box_is_concave() {
        let m = SyntheticFamily::new(FamilyKind::OpenBox).sample(&mut ChaCha8Rng::seed_from_u64(4));
        let b = Bounds::around(&m, 0.05).unwrap();
        let grid = voxelize(&m, 32, b).unwrap();
        let (lo, hi) = m.bounds().unwrap();
        let s = b.side / 32.0;
        let cell = |p: f64, axis: usize| ((p - b.origin[axis]) / s) as usize;
        // a point just above the floor in the middle of the box
        let y = lo.y + 0.75 * (hi.y - lo.y);
        let i = grid.index(cell(0.0, 0), cell(y, 1), cell(0.0, 2));
        assert!(!grid.cells[i]);
        let solid = voxelize(&crate::mesh::cuboid((lo + hi) / 2.0, hi - lo), 32, b).unwrap();
        assert!(grid.occupied() < solid.occupied());
    }

    #[test]
    fn generation_is_reproducible_and_split() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let fam = SyntheticFamily::new(FamilyKind::Blocks);
        let ma = generate_synthetic_dataset(fam, 10, 7, RenderSettings::default(), a.path()).unwrap();
        let mb = generate_synthetic_dataset(fam, 10, 7, RenderSettings::default(), b.path()).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(ma.split(Split::Train).count(), 8);
        assert_eq!(ma.split(Split::Test).count(), 2);
        for rec in &ma.instances {
            assert_eq!(
                std::fs::read(a.path().join(&rec.mesh)).unwrap(),
                std::fs::read(b.path().join(&rec.mesh)).unwrap()
            );
        }
        assert_eq!(
            std::fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
            std::fs::read(b.path().join(MANIFEST_FILE)).unwrap()
        );
        assert_eq!(DatasetManifest::load(&a.path().join(MANIFEST_FILE)).unwrap(), ma);
        assert!(generate_synthetic_dataset(fam, 1, 7, RenderSettings::default(), a.path()).is_err());
    }

    #[test]
    fn rendering_writes_images_and_sidecars() {
        let dir = tempfile::tempdir().unwrap();
        let settings = RenderSettings {
            views: 2,
            fixed_lambda: 0.3,
            ..RenderSettings::default()
        };
        let m = generate_synthetic_dataset(SyntheticFamily::new(FamilyKind::OpenBox), 5, 1, settings, dir.path())
            .unwrap();
        let sidecars = render_dataset(&m, dir.path(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(sidecars.len(), 10);
        assert!(sidecars.iter().all(|s| s.annotation.lambda == 0.3));
        let train = load_rendered(&m, dir.path(), Split::Train).unwrap();
        assert_eq!(train.len(), 4);
        assert_eq!(train[0].1.len(), 2);
        let img = &train[0].1[0].0;
        assert_eq!((img.width, img.height), (32, 24));
        assert!(img.data.iter().any(|&v| v > 0.0));
        let back: Sidecar =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("renders").join(format!("{}_0.json", m.instances[0].id))).unwrap())
                .unwrap();
        assert_eq!(back, sidecars[0]);
    }

    #[test]
    fn varying_lighting_samples_lambda() {
        let dir = tempfile::tempdir().unwrap();
        let settings = RenderSettings {
            light_rotation: LightRotation::Varying,
            ..RenderSettings::default()
        };
        let m = generate_synthetic_dataset(SyntheticFamily::new(FamilyKind::Blocks), 4, 1, settings, dir.path())
            .unwrap();
        let s = render_dataset(&m, dir.path(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(s.iter().all(|x| (0.0..PI).contains(&x.annotation.lambda)));
        assert!(s[0].annotation.lambda != s[1].annotation.lambda);
    }

    #[test]
    fn rigs_per_lighting_mode() {
        let c = Lighting::Colour.rig();
        assert_eq!(c.lights.len(), 3);
        assert!(c.lights[0].colour != c.lights[1].colour && c.lights[1].colour != c.lights[2].colour);
        let w = Lighting::White.rig();
        assert_eq!(w.lights.len(), 1);
        assert_eq!(w.ambient, [0.2; 3]);
    }
}
