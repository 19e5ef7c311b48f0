//! Synthetic datasets rendered from analytic scenes.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use snerf_core::scene::{builtin_scene, default_cameras, gt_depth, oracle_render, CameraSpec, SceneSpec};
use snerf_core::trainer::RaySet;
use snerf_core::Vec3;

use crate::io::{read_json, read_pfm, read_ppm, write_json, write_pfm, write_ppm};
use crate::pool;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePair {
    pub rgb: String,
    pub depth: String,
}

/// Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub scene_file: String,
    pub cameras: Vec<CameraSpec>,
    pub images: Vec<ImagePair>,
    /// Quadrature samples per ray used for the ground-truth colors.
    pub n_fine: usize,
    pub seed: u64,
}

/// A manifest with its scene and images loaded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub scene: SceneSpec,
    pub colors: Vec<Vec<Vec3>>,
    pub depths: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSettings {
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub n_fine: usize,
    pub seed: u64,
}

impl Default for GenSettings {
    fn default() -> Self {
        GenSettings {
            views: 16,
            width: 64,
            height: 64,
            n_fine: 2048,
            seed: 0,
        }
    }
}

/// A builtin scene name or a path to a scene JSON file.
pub fn resolve_scene(name_or_path: &str) -> Result<SceneSpec> {
    let scene = match builtin_scene(name_or_path) {
        Some(s) => s,
        None => {
            let p = Path::new(name_or_path);
            ensure!(p.exists(), "unknown scene '{name_or_path}' (not builtin, no such file)");
            read_json(p)?
        }
    };
    scene.validate()?;
    Ok(scene)
}

/// The rig's views, rotated about the vertical axis through the target by a
/// seed-dependent angle.
pub fn seeded_cameras(scene: &SceneSpec, s: &GenSettings) -> Vec<CameraSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let turn: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (sin, cos) = turn.sin_cos();
    default_cameras(&scene.rig, s.views, s.width, s.height)
        .into_iter()
        .map(|mut c| {
            let rel = [c.position[0] - c.look_at[0], c.position[1] - c.look_at[1]];
            c.position[0] = c.look_at[0] + cos * rel[0] - sin * rel[1];
            c.position[1] = c.look_at[1] + sin * rel[0] + cos * rel[1];
            c
        })
        .collect()
}

/// Ground-truth color and depth of one view.
pub fn render_gt(scene: &SceneSpec, cam: &CameraSpec, n_fine: usize) -> Result<(Vec<Vec3>, Vec<Option<f64>>)> {
    let mut rgb = Vec::with_capacity(cam.width * cam.height);
    let mut depth = Vec::with_capacity(cam.width * cam.height);
    for ray in cam.rays() {
        rgb.push(oracle_render(scene, &ray, n_fine)?.0);
        depth.push(gt_depth(scene, &ray));
    }
    Ok((rgb, depth))
}

pub fn generate_dataset(
    scene: &SceneSpec,
    cameras: &[CameraSpec],
    n_fine: usize,
    seed: u64,
    out_dir: &Path,
    workers: usize,
) -> Result<DatasetManifest> {
    ensure!(!cameras.is_empty(), "no cameras");
    for c in cameras {
        c.validate()?;
    }
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_json(&out_dir.join("scene.json"), scene)?;
    let images: Vec<ImagePair> = pool(workers)?.install(|| {
        cameras
            .par_iter()
            .enumerate()
            .map(|(i, cam)| {
                let (rgb, depth) = render_gt(scene, cam, n_fine)?;
                let pair = ImagePair {
                    rgb: format!("view_{i:03}.ppm"),
                    depth: format!("view_{i:03}_depth.pfm"),
                };
                write_ppm(&out_dir.join(&pair.rgb), cam.width, cam.height, &rgb)?;
                write_pfm(&out_dir.join(&pair.depth), cam.width, cam.height, &depth)?;
                Ok(pair)
            })
            .collect::<Result<_>>()
    })?;
    let manifest = DatasetManifest {
        scene_file: "scene.json".into(),
        cameras: cameras.to_vec(),
        images,
        n_fine,
        seed,
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest: DatasetManifest = read_json(manifest_path)?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        ensure!(manifest.cameras.len() == manifest.images.len(), "one image pair per camera required");
        let scene: SceneSpec = read_json(&root.join(&manifest.scene_file))?;
        let mut colors = Vec::new();
        let mut depths = Vec::new();
        for (cam, pair) in manifest.cameras.iter().zip(&manifest.images) {
            let (w, h, rgb) = read_ppm(&root.join(&pair.rgb))?;
            let (dw, dh, d) = read_pfm(&root.join(&pair.depth))?;
            if (w, h) != (cam.width, cam.height) || (dw, dh) != (w, h) {
                bail!("{}: image size does not match its camera", pair.rgb);
            }
            colors.push(rgb);
            depths.push(d);
        }
        Ok(Dataset {
            root,
            manifest,
            scene,
            colors,
            depths,
        })
    }

    /// Every pixel ray of every view with its observed color.
    pub fn ray_set(&self) -> Result<RaySet> {
        let mut rays = Vec::new();
        let mut colors = Vec::new();
        for (cam, rgb) in self.manifest.cameras.iter().zip(&self.colors) {
            rays.extend(cam.rays());
            colors.extend_from_slice(rgb);
        }
        Ok(RaySet::new(rays, colors, self.scene.background)?)
    }
}
