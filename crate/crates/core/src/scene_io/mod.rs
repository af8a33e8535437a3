//! Dataset loading, synthetic scene generation, and checkpoint serialization.
//!
//! On-disk formats (full byte layouts in docs/formats.md):
//! - datasets: a directory holding `cameras.json` plus an `images/` folder of
//!   PNG or PFM files paired with the cameras in lexicographic filename order;
//! - checkpoints: little-endian binary, magic `SPTX`, version 1; parameters
//!   are stored as f32 so the file size is an exact function of the counts.

mod synthetic;

pub use synthetic::{
    make_synthetic, oracle_render, to_scene, GroundTruth, GtSurfel, GtTexture, SyntheticSpec,
};

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geometry::Primitive;
use crate::img::Image;
use crate::math::{mat_to_quat, quat_to_mat, Vec3};
use crate::scene::Scene;
use crate::texture::{TextureGrid, TexturePool};

/// A colored 3D point used to seed primitives.
#[derive(Clone, Copy, Debug)]
pub struct ScenePoint {
    pub xyz: Vec3,
    pub rgb: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub points: Vec<ScenePoint>,
}

#[derive(Serialize, Deserialize)]
struct CameraJson {
    id: u64,
    /// World-to-camera rotation quaternion (w, x, y, z).
    rotation: [f64; 4],
    translation: [f64; 3],
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
struct PointJson {
    xyz: [f64; 3],
    rgb: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct DatasetJson {
    cameras: Vec<CameraJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    test: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    points: Option<Vec<PointJson>>,
}

fn camera_from_json(c: &CameraJson) -> Camera {
    Camera {
        rotation: quat_to_mat(c.rotation),
        translation: Vec3::new(c.translation[0], c.translation[1], c.translation[2]),
        fx: c.fx,
        fy: c.fy,
        cx: c.cx,
        cy: c.cy,
        width: c.width,
        height: c.height,
    }
}

fn camera_to_json(id: u64, c: &Camera) -> CameraJson {
    CameraJson {
        id,
        rotation: mat_to_quat(&c.rotation),
        translation: [c.translation.x, c.translation.y, c.translation.z],
        fx: c.fx,
        fy: c.fy,
        cx: c.cx,
        cy: c.cy,
        width: c.width,
        height: c.height,
    }
}

fn listed_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| {
        Error::dataset(format!("cannot read images directory {}: {e}", dir.display()))
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("pfm")
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Default hold-out rule when the dataset does not name a split.
fn default_split(n: usize) -> (Vec<usize>, Vec<usize>) {
    let test: Vec<usize> = (0..n).filter(|i| i % 8 == 0).collect();
    let train: Vec<usize> = (0..n).filter(|i| i % 8 != 0).collect();
    (train, test)
}

fn validate_split(train: &[usize], test: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![0u8; n];
    for &i in train.iter().chain(test) {
        if i >= n {
            return Err(Error::dataset(format!("split index {i} out of range ({n} cameras)")));
        }
        seen[i] += 1;
    }
    if seen.iter().any(|&c| c != 1) {
        return Err(Error::dataset("train/test split must be disjoint and cover every camera"));
    }
    Ok(())
}

/// Load a dataset directory: `cameras.json` plus `images/` (PNG or PFM),
/// paired with the cameras in lexicographic filename order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let json_path = dir.join("cameras.json");
    let text = fs::read_to_string(&json_path).map_err(|e| {
        Error::dataset(format!("cannot read {}: {e}", json_path.display()))
    })?;
    let parsed: DatasetJson = serde_json::from_str(&text)
        .map_err(|e| Error::dataset(format!("ill-formed {}: {e}", json_path.display())))?;

    let image_paths = listed_images(&dir.join("images"))?;
    if image_paths.len() != parsed.cameras.len() {
        return Err(Error::dataset(format!(
            "camera/image count mismatch: {} cameras, {} images",
            parsed.cameras.len(),
            image_paths.len()
        )));
    }

    let cameras: Vec<Camera> = parsed.cameras.iter().map(camera_from_json).collect();
    for (c, j) in cameras.iter().zip(&parsed.cameras) {
        if c.cx < 0.0 || c.cx > c.width as f64 || c.cy < 0.0 || c.cy > c.height as f64 {
            log::warn!(
                "camera {}: principal point ({}, {}) outside the {}x{} image",
                j.id,
                c.cx,
                c.cy,
                c.width,
                c.height
            );
        }
    }

    let mut images = Vec::with_capacity(image_paths.len());
    for p in &image_paths {
        images.push(Image::load(p)?);
    }

    let (train, test) = match (parsed.train, parsed.test) {
        (Some(train), Some(test)) => {
            validate_split(&train, &test, cameras.len())?;
            (train, test)
        }
        (None, None) => default_split(cameras.len()),
        _ => {
            return Err(Error::dataset(
                "cameras.json must provide both train and test or neither",
            ))
        }
    };

    let points = parsed
        .points
        .unwrap_or_default()
        .iter()
        .map(|p| ScenePoint {
            xyz: Vec3::new(p.xyz[0], p.xyz[1], p.xyz[2]),
            rgb: p.rgb,
        })
        .collect();

    Ok(Dataset { cameras, images, train, test, points })
}

/// Load just the camera list from a `cameras.json` file (or a dataset
/// directory containing one), keyed by the declared camera ids. Reference
/// images are not required, so this also serves novel-view camera specs.
pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<(u64, Camera)>> {
    let path = path.as_ref();
    let json_path = if path.is_dir() { path.join("cameras.json") } else { path.to_path_buf() };
    let text = fs::read_to_string(&json_path)
        .map_err(|e| Error::dataset(format!("cannot read {}: {e}", json_path.display())))?;
    let parsed: DatasetJson = serde_json::from_str(&text)
        .map_err(|e| Error::dataset(format!("ill-formed {}: {e}", json_path.display())))?;
    Ok(parsed
        .cameras
        .iter()
        .map(|j| (j.id, camera_from_json(j)))
        .collect())
}

/// Write a dataset directory in the layout `load_dataset` expects; images go
/// out as PFM so references stay quantization-free.
pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    let json = DatasetJson {
        cameras: ds
            .cameras
            .iter()
            .enumerate()
            .map(|(i, c)| camera_to_json(i as u64, c))
            .collect(),
        train: Some(ds.train.clone()),
        test: Some(ds.test.clone()),
        points: if ds.points.is_empty() {
            None
        } else {
            Some(
                ds.points
                    .iter()
                    .map(|p| PointJson { xyz: [p.xyz.x, p.xyz.y, p.xyz.z], rgb: p.rgb })
                    .collect(),
            )
        },
    };
    let file = fs::File::create(dir.join("cameras.json"))?;
    serde_json::to_writer_pretty(file, &json)
        .map_err(|e| Error::format(format!("cannot write cameras.json: {e}")))?;
    for (i, img) in ds.images.iter().enumerate() {
        img.save_pfm(&dir.join("images").join(format!("view_{i:03}.pfm")))?;
    }
    Ok(())
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SPTX";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Scalars stored per primitive (positions 3, log-scales 2, rotation 4,
/// opacity 1, SH 48, exponent 1).
pub const PRIM_SCALARS: usize = 59;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub scene: Scene,
    pub iteration: u64,
    pub seed: u64,
    /// Fixed-slot configuration echo (see docs/formats.md for the slot map).
    pub echo: [f64; 16],
}

/// Exact file size for a scene with these counts.
pub fn checkpoint_size(n_prims: usize, n_texels: usize) -> u64 {
    160 + 256 * n_prims as u64 + 12 * n_texels as u64
}

struct ByteWriter<W: Write>(W);

impl<W: Write> ByteWriter<W> {
    fn u32(&mut self, v: u32) -> Result<()> {
        self.0.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.0.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f32(&mut self, v: f32) -> Result<()> {
        self.0.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.0.write_all(&v.to_le_bytes())?;
        Ok(())
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let file = fs::File::create(path.as_ref())?;
    let mut w = ByteWriter(std::io::BufWriter::new(file));
    w.0.write_all(&CHECKPOINT_MAGIC)?;
    w.u32(CHECKPOINT_VERSION)?;
    w.u64(ck.iteration)?;
    w.u64(ck.seed)?;
    w.u64(ck.scene.n_prims() as u64)?;
    for v in ck.echo {
        w.f64(v)?;
    }
    for (i, p) in ck.scene.prims.iter().enumerate() {
        for k in 0..3 {
            w.f32(p.center[k] as f32)?;
        }
        for k in 0..2 {
            w.f32(p.log_scales[k] as f32)?;
        }
        for k in 0..4 {
            w.f32(p.rotation[k] as f32)?;
        }
        w.f32(p.opacity_logit as f32)?;
        for k in 0..48 {
            w.f32(p.sh[k] as f32)?;
        }
        w.f32(p.t2p_exponent as f32)?;

        let entry = ck.scene.textures.entry(i);
        w.u32(entry.res.0)?;
        w.u32(entry.res.1)?;
        w.f32(entry.texel_size as f32)?;
        w.f32(entry.offset.0 as f32)?;
        w.f32(entry.offset.1 as f32)?;
        for t in &ck.scene.textures.data()[ck.scene.textures.range(i)] {
            for c in 0..3 {
                w.f32(t[c] as f32)?;
            }
        }
    }
    w.0.flush()?;
    Ok(())
}

struct ByteReader<R: Read> {
    inner: R,
}

impl<R: Read> ByteReader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::format("checkpoint truncated"))?;
        Ok(buf)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.bytes()?) as f64)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let file = fs::File::open(path.as_ref())?;
    let mut r = ByteReader { inner: std::io::BufReader::new(file) };
    let magic: [u8; 4] = r.bytes()?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format("not a SPTX checkpoint"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}; supported: {CHECKPOINT_VERSION}"
        )));
    }
    let iteration = r.u64()?;
    let seed = r.u64()?;
    let n_prims = r.u64()? as usize;
    let mut echo = [0.0; 16];
    for v in &mut echo {
        *v = r.f64()?;
    }
    let mut prims = Vec::with_capacity(n_prims);
    let mut grids = Vec::with_capacity(n_prims);
    for _ in 0..n_prims {
        let mut center = [0.0; 3];
        for v in &mut center {
            *v = r.f32()?;
        }
        let mut log_scales = [0.0; 2];
        for v in &mut log_scales {
            *v = r.f32()?;
        }
        let mut rotation = [0.0; 4];
        for v in &mut rotation {
            *v = r.f32()?;
        }
        let opacity_logit = r.f32()?;
        let mut sh = [0.0; 48];
        for v in &mut sh {
            *v = r.f32()?;
        }
        let t2p_exponent = r.f32()?.round() as u32;
        prims.push(Primitive {
            center: Vec3::new(center[0], center[1], center[2]),
            log_scales,
            rotation,
            opacity_logit,
            sh,
            t2p_exponent,
        });

        let res = (r.u32()?, r.u32()?);
        let texel_size = r.f32()?;
        let offset = (r.f32()?, r.f32()?);
        if res.0 == 0 || res.1 == 0 {
            grids.push(None);
        } else {
            let count = (res.0 as usize) * (res.1 as usize);
            let mut texels = Vec::with_capacity(count);
            for _ in 0..count {
                texels.push([r.f32()?, r.f32()?, r.f32()?]);
            }
            grids.push(Some(TextureGrid { res, texel_size, offset, texels }));
        }
    }
    // Trailing garbage would mean the counts lied.
    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe)? != 0 {
        return Err(Error::format("checkpoint has trailing bytes"));
    }
    Ok(Checkpoint {
        scene: Scene::new(prims, TexturePool::from_grids(grids)),
        iteration,
        seed,
        echo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use tempfile::tempdir;

    fn sample_scene() -> Scene {
        let mut sh = [0.0; 48];
        sh[0] = 1.25;
        sh[16] = -0.5;
        let p0 = Primitive {
            center: Vec3::new(0.125, -0.5, 2.0),
            log_scales: [0.25, -0.125],
            rotation: [0.875, 0.125, -0.25, 0.0625],
            opacity_logit: 0.75,
            sh,
            t2p_exponent: 3,
        };
        let p1 = Primitive {
            center: Vec3::new(-1.0, 0.5, 0.25),
            log_scales: [0.0, 0.5],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: -0.5,
            sh: [0.0; 48],
            t2p_exponent: 0,
        };
        let grid = TextureGrid {
            res: (3, 2),
            texel_size: 0.5,
            offset: (1.0, 0.5),
            texels: vec![
                [0.125, 0.25, 0.375],
                [-0.125, 0.0, 0.5],
                [0.25, -0.25, 0.125],
                [0.0, 0.0, 0.0],
                [1.0, -1.0, 0.5],
                [0.75, 0.5, -0.5],
            ],
        };
        Scene::new(vec![p0, p1], TexturePool::from_grids(vec![Some(grid), None]))
    }

    fn sample_checkpoint() -> Checkpoint {
        let mut echo = [0.0; 16];
        echo[0] = 2000.0;
        echo[1] = 0.2;
        Checkpoint { scene: sample_scene(), iteration: 1234, seed: 42, echo }
    }

    #[test]
    fn checkpoint_round_trips_and_resaves_identically() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.sptx");
        let ck = sample_checkpoint();
        save_checkpoint(&ck, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.iteration, 1234);
        assert_eq!(loaded.seed, 42);
        assert_eq!(loaded.echo[0], 2000.0);
        assert_eq!(loaded.scene.n_prims(), 2);
        assert_eq!(loaded.scene.prims[0].t2p_exponent, 3);
        assert_eq!(loaded.scene.textures.entry(0).res, (3, 2));
        // Parameters chosen f32-exact above, so values survive unchanged.
        assert_eq!(loaded.scene.prims[0].center, ck.scene.prims[0].center);
        assert_eq!(loaded.scene.textures.data(), ck.scene.textures.data());

        // Save-of-load must reproduce the file bit for bit.
        let path2 = dir.path().join("model2.sptx");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_file_size_matches_the_formula() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.sptx");
        let ck = sample_checkpoint();
        save_checkpoint(&ck, &path).unwrap();
        let n = ck.scene.n_prims();
        let t = ck.scene.total_texels();
        assert_eq!(fs::metadata(&path).unwrap().len(), checkpoint_size(n, t));
        assert_eq!(checkpoint_size(n, t), 160 + 256 * 2 + 12 * 6);
    }

    #[test]
    fn bad_magic_version_and_truncation_are_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.sptx");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();

        let mut bytes = fs::read(&path).unwrap();
        let good = bytes.clone();

        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("not a SPTX checkpoint"), "{err}");

        bytes = good.clone();
        bytes[4] = 2;
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("version 2") && err.contains("1"), "{err}");

        bytes = good.clone();
        bytes.truncate(bytes.len() - 7);
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");

        bytes = good;
        bytes.push(0);
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("trailing"), "{err}");
    }

    fn tiny_dataset() -> Dataset {
        let cam = Camera::look_at(
            Vec3::new(0.0, 0.0, -2.0),
            Vec3::zeros(),
            Vec3::new(0.0, 1.0, 0.0),
            50.0,
            55.0,
            6,
            4,
        );
        let img = Image::from_fn(6, 4, |x, y| [x as f64 * 0.125, y as f64 * 0.25, 0.5]);
        Dataset {
            cameras: vec![cam.clone(), cam],
            images: vec![img.clone(), img],
            train: vec![1],
            test: vec![0],
            points: vec![ScenePoint { xyz: Vec3::new(0.5, -0.25, 0.0), rgb: [0.9, 0.1, 0.2] }],
        }
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset();
        write_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.cameras.len(), 2);
        assert_eq!(loaded.train, vec![1]);
        assert_eq!(loaded.test, vec![0]);
        assert_eq!(loaded.points.len(), 1);
        assert_relative_eq!(loaded.points[0].xyz.x, 0.5);
        let a = &loaded.cameras[0];
        let b = &ds.cameras[0];
        assert_relative_eq!((a.rotation - b.rotation).norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!((a.translation - b.translation).norm(), 0.0, epsilon = 1e-12);
        assert_eq!((a.fx, a.fy, a.cx, a.cy), (b.fx, b.fy, b.cx, b.cy));
        // PFM references survive bit-exactly at f32 precision.
        assert_eq!(loaded.images[0].data, ds.images[0].data);
    }

    #[test]
    fn count_mismatch_is_a_clear_error() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset();
        write_dataset(&ds, dir.path()).unwrap();
        fs::remove_file(dir.path().join("images/view_001.pfm")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("camera/image count mismatch"), "{err}");
    }

    #[test]
    fn odd_principal_point_is_accepted() {
        let dir = tempdir().unwrap();
        let mut ds = tiny_dataset();
        ds.cameras[0].cx = -5.0;
        write_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.cameras[0].cx, -5.0);
    }

    #[test]
    fn default_split_holds_out_every_eighth_view() {
        let (train, test) = default_split(10);
        assert_eq!(test, vec![0, 8]);
        assert_eq!(train, vec![1, 2, 3, 4, 5, 6, 7, 9]);
        validate_split(&train, &test, 10).unwrap();
    }

    #[test]
    fn bad_explicit_splits_are_rejected() {
        assert!(validate_split(&[0, 1], &[1], 3).is_err()); // overlap
        assert!(validate_split(&[0], &[1], 3).is_err()); // not covering
        assert!(validate_split(&[0, 5], &[1], 3).is_err()); // out of range
    }
}
