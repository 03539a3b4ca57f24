//! Procedural box-city scenes with an exact ray-cast renderer, plus the
//! on-disk dataset format (JSON manifest + 8-bit PNGs).

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Aabb, Vec3};
use crate::metrics::Image;
use crate::render::Camera;

/// Padding applied to the scene box before mapping it onto `[0,1]³`.
pub const AABB_PADDING: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub bounds: Aabb,
    pub color: [f64; 3],
}

/// Colored boxes standing on a finite ground rectangle at `extents.min.z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub extents: Aabb,
    pub ground_color: [f64; 3],
    pub background: [f64; 3],
    pub boxes: Vec<SceneBox>,
    pub seed: u64,
}

const PLACEMENT_RETRIES: usize = 2000;

/// Places `n_boxes` non-overlapping boxes on the ground of `extents`.
pub fn generate_synthetic_scene(n_boxes: usize, seed: u64, extents: Aabb) -> Result<SyntheticScene> {
    if !extents.is_valid() {
        return Err(Error::SceneGeneration("invalid scene extents".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = extents.extent();
    let ground_z = extents.min[2];
    let mut boxes: Vec<SceneBox> = Vec::with_capacity(n_boxes);
    for b in 0..n_boxes {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let sx = rng.gen_range(0.08..0.2) * e[0];
            let sy = rng.gen_range(0.08..0.2) * e[1];
            let sz = rng.gen_range(0.2..0.9) * e[2];
            let x0 = extents.min[0] + rng.gen_range(0.05..(0.95 - sx / e[0])) * e[0];
            let y0 = extents.min[1] + rng.gen_range(0.05..(0.95 - sy / e[1])) * e[1];
            let bounds = Aabb::new([x0, y0, ground_z], [x0 + sx, y0 + sy, ground_z + sz]);
            // keep a small gap so no two boxes touch
            let gap = 0.02 * e[0].min(e[1]);
            let grown = Aabb::new(
                [bounds.min[0] - gap, bounds.min[1] - gap, bounds.min[2]],
                [bounds.max[0] + gap, bounds.max[1] + gap, bounds.max[2]],
            );
            if boxes.iter().any(|o| o.bounds.overlaps(&grown)) {
                continue;
            }
            let color = [
                rng.gen_range(0.1..0.95),
                rng.gen_range(0.1..0.95),
                rng.gen_range(0.1..0.95),
            ];
            boxes.push(SceneBox { bounds, color });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::SceneGeneration(format!(
                "could not place box {b} of {n_boxes} after {PLACEMENT_RETRIES} attempts"
            )));
        }
    }
    Ok(SyntheticScene {
        extents,
        ground_color: [0.55, 0.55, 0.5],
        background: [0.0; 3],
        boxes,
        seed,
    })
}

impl SyntheticScene {
    /// Default benchmark scene: 12 boxes on a 2×2 block, 0.6 tall.
    pub fn benchmark(seed: u64) -> Result<Self> {
        generate_synthetic_scene(12, seed, Self::default_extents())
    }

    pub fn default_extents() -> Aabb {
        Aabb::new([-1.0, -1.0, 0.0], [1.0, 1.0, 0.6])
    }

    /// Color of the first surface hit within `[near, far]`, or the background.
    pub fn trace(&self, origin: Vec3, dir: Vec3, near: f64, far: f64) -> [f64; 3] {
        let mut best = far;
        let mut color = self.background;
        if dir[2].abs() > 1e-15 {
            let t = (self.extents.min[2] - origin[2]) / dir[2];
            if t >= near && t <= best {
                let p = geometry::add(origin, geometry::scale(dir, t));
                let inside = (0..2).all(|a| p[a] >= self.extents.min[a] && p[a] <= self.extents.max[a]);
                if inside {
                    best = t;
                    color = self.ground_color;
                }
            }
        }
        for b in &self.boxes {
            if let Some((t0, t1)) = b.bounds.intersect(origin, dir) {
                let t = if t0 >= near { t0 } else { t1 };
                if t >= near && t < best {
                    best = t;
                    color = b.color;
                }
            }
        }
        color
    }
}

/// Exact first-hit render, one ray through each pixel center, no antialiasing.
pub fn oracle_render(scene: &SyntheticScene, camera: &Camera) -> Image {
    let mut img = Image::new(camera.width, camera.height);
    for j in 0..camera.height {
        for i in 0..camera.width {
            let (o, d) = camera.pixel_ray(i, j);
            img.set_pixel(i, j, scene.trace(o, d, camera.near, camera.far));
        }
    }
    img
}

/// Cameras on a hemisphere around the scene, looking at its center.
/// Positions follow a golden-angle spiral in azimuth with elevations between
/// 35° and 65°; every `stride`-th view is a test view.
pub fn orbit_cameras(
    extents: &Aabb,
    count: usize,
    width: usize,
    height: usize,
    test_stride: usize,
) -> Vec<(Camera, Split)> {
    let e = extents.extent();
    let center = [
        0.5 * (extents.min[0] + extents.max[0]),
        0.5 * (extents.min[1] + extents.max[1]),
        extents.min[2] + 0.25 * e[2],
    ];
    let radius = 1.6 * e[0].max(e[1]);
    let focal = 0.5 * width as f64 / (25.0f64).to_radians().tan();
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    (0..count)
        .map(|k| {
            let az = k as f64 * golden;
            let frac = if count > 1 { k as f64 / (count - 1) as f64 } else { 0.5 };
            let el = (35.0 + 30.0 * frac).to_radians();
            let eye = [
                center[0] + radius * el.cos() * az.cos(),
                center[1] + radius * el.cos() * az.sin(),
                center[2] + radius * el.sin(),
            ];
            let cam = Camera::look_at(eye, center, [0.0, 0.0, 1.0], focal, width, height, 0.05, 4.0 * radius);
            let split = if test_stride > 0 && k % test_stride == test_stride - 1 {
                Split::Test
            } else {
                Split::Train
            };
            (cam, split)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One frame entry of the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub file: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: usize,
    pub h: usize,
    pub c2w: Vec<f64>,
    pub near: f64,
    pub far: f64,
    pub split: Split,
}

impl FrameEntry {
    pub fn from_camera(file: String, cam: &Camera, split: Split) -> Self {
        FrameEntry {
            file,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            w: cam.width,
            h: cam.height,
            c2w: cam.c2w.to_vec(),
            near: cam.near,
            far: cam.far,
            split,
        }
    }

    pub fn camera(&self) -> Result<Camera> {
        let c2w: [f64; 16] = self.c2w.as_slice().try_into().map_err(|_| {
            Error::Dataset(format!("{}: c2w needs 16 numbers, got {}", self.file, self.c2w.len()))
        })?;
        let cam = Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.w,
            height: self.h,
            c2w,
            near: self.near,
            far: self.far,
        };
        cam.validate()
            .map_err(|e| Error::Dataset(format!("{}: {e}", self.file)))?;
        Ok(cam)
    }
}

/// Dataset manifest: `{"aabb": [[min],[max]], "frames": [...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub aabb: [[f64; 3]; 2],
    pub frames: Vec<FrameEntry>,
}

impl SceneManifest {
    pub fn scene_aabb(&self) -> Aabb {
        Aabb::new(self.aabb[0], self.aabb[1])
    }

    /// Canonical serialization: pretty-printed, fields in declaration order,
    /// trailing newline.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub file: PathBuf,
    pub camera: Camera,
    pub image: Image,
    pub split: Split,
}

/// Decoded dataset ready for training.
#[derive(Clone, Debug)]
pub struct SceneDataset {
    /// Scene box as declared in the manifest.
    pub aabb: Aabb,
    /// Padded box that maps onto the unit cube.
    pub normalized_box: Aabb,
    pub frames: Vec<Frame>,
}

impl SceneDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Frame> {
        self.frames.iter().filter(move |f| f.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

/// Parses a manifest, decodes every image and validates every camera.
pub fn load_dataset(manifest_path: &Path) -> Result<SceneDataset> {
    let manifest = SceneManifest::read(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let aabb = manifest.scene_aabb();
    if !aabb.is_valid() {
        return Err(Error::Dataset("manifest aabb must have min < max on every axis".into()));
    }
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for entry in &manifest.frames {
        let camera = entry.camera()?;
        let file = root.join(&entry.file);
        if !file.exists() {
            return Err(Error::Dataset(format!("missing image {}", file.display())));
        }
        let image = Image::load_png(&file)?;
        if image.width != entry.w || image.height != entry.h {
            return Err(Error::Dataset(format!(
                "{}: image is {}x{}, manifest says {}x{}",
                entry.file, image.width, image.height, entry.w, entry.h
            )));
        }
        frames.push(Frame {
            file,
            camera,
            image,
            split: entry.split,
        });
    }
    Ok(SceneDataset {
        aabb,
        normalized_box: aabb.padded(AABB_PADDING),
        frames,
    })
}

/// Renders every view of `scene` with the oracle and writes PNGs plus
/// `manifest.json` into `dir`. Returns the manifest path.
pub fn write_synthetic_dataset(
    dir: &Path,
    scene: &SyntheticScene,
    views: &[(Camera, Split)],
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::with_capacity(views.len());
    for (k, (cam, split)) in views.iter().enumerate() {
        let name = format!("{}_{k:03}.png", match split {
            Split::Train => "train",
            Split::Test => "test",
        });
        oracle_render(scene, cam).save_png(&dir.join(&name))?;
        frames.push(FrameEntry::from_camera(name, cam, *split));
    }
    let manifest = SceneManifest {
        aabb: [scene.extents.min, scene.extents.max],
        frames,
    };
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}
