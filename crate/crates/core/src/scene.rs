//! Analytic scenes: ground-truth density, radiance and surface depth.
//!
//! Overlapping primitives combine by maximum density. Sheets and slabs are
//! infinite in-plane and clipped to the scene bounds; nothing has density
//! outside the bounds.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math::{self, add, cross, dot, normalize, scale, sub, tan};
use crate::render::{composite, sample_ray, Ray, RaySampleBatch};
use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn contains(&self, x: Vec3) -> bool {
        (0..3).all(|k| x[k] >= self.min[k] && x[k] <= self.max[k])
    }

    /// Parameter interval `[t0, t1]` where the line `o + t d` is inside.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            if dir[k] == 0.0 {
                if origin[k] < self.min[k] || origin[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let a = (self.min[k] - origin[k]) / dir[k];
            let b = (self.max[k] - origin[k]) / dir[k];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t0 <= t1).then_some((t0, t1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Primitive {
    Sphere {
        center: Vec3,
        radius: f64,
        density: f64,
        rgb: Vec3,
    },
    Box {
        min: Vec3,
        max: Vec3,
        density: f64,
        rgb: Vec3,
    },
    /// Thin layer `|(x − point)·n| ≤ thickness/2`.
    Sheet {
        point: Vec3,
        normal: Vec3,
        thickness: f64,
        density: f64,
        rgb: Vec3,
    },
    /// Like a sheet, typically thicker and optionally semi-transparent.
    Slab {
        point: Vec3,
        normal: Vec3,
        thickness: f64,
        density: f64,
        rgb: Vec3,
        semi_transparent: bool,
    },
}

impl Primitive {
    pub fn density(&self) -> f64 {
        match self {
            Primitive::Sphere { density, .. }
            | Primitive::Box { density, .. }
            | Primitive::Sheet { density, .. }
            | Primitive::Slab { density, .. } => *density,
        }
    }

    pub fn rgb(&self) -> Vec3 {
        match self {
            Primitive::Sphere { rgb, .. }
            | Primitive::Box { rgb, .. }
            | Primitive::Sheet { rgb, .. }
            | Primitive::Slab { rgb, .. } => *rgb,
        }
    }

    fn contains(&self, x: Vec3) -> bool {
        match self {
            Primitive::Sphere { center, radius, .. } => {
                let d = sub(x, *center);
                dot(d, d) <= radius * radius
            }
            Primitive::Box { min, max, .. } => Aabb { min: *min, max: *max }.contains(x),
            Primitive::Sheet {
                point,
                normal,
                thickness,
                ..
            }
            | Primitive::Slab {
                point,
                normal,
                thickness,
                ..
            } => dot(sub(x, *point), normalize(*normal)).abs() <= 0.5 * thickness,
        }
    }

    /// Parameter interval along the line where it is inside the primitive
    /// (unclipped).
    fn interval(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        match self {
            Primitive::Sphere { center, radius, .. } => {
                let oc = sub(origin, *center);
                let b = dot(oc, dir);
                let c = dot(oc, oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = math::sqrt(disc);
                Some((-b - s, -b + s))
            }
            Primitive::Box { min, max, .. } => Aabb { min: *min, max: *max }.intersect(origin, dir),
            Primitive::Sheet {
                point,
                normal,
                thickness,
                ..
            }
            | Primitive::Slab {
                point,
                normal,
                thickness,
                ..
            } => {
                let n = normalize(*normal);
                let h = 0.5 * thickness;
                let s0 = dot(sub(origin, *point), n);
                let dn = dot(dir, n);
                if dn == 0.0 {
                    return (s0.abs() <= h).then_some((f64::NEG_INFINITY, f64::INFINITY));
                }
                let a = (-h - s0) / dn;
                let b = (h - s0) / dn;
                Some((a.min(b), a.max(b)))
            }
        }
    }

    fn validate(&self, bounds: &Aabb) -> Result<()> {
        if !(self.density() > 0.0) {
            return Err(Error::contract("SceneSpec", "primitive density must be positive"));
        }
        match self {
            Primitive::Sphere { center, radius, .. } => {
                let lo = sub(*center, [*radius; 3]);
                let hi = add(*center, [*radius; 3]);
                if !(*radius > 0.0) || !bounds.contains(lo) || !bounds.contains(hi) {
                    return Err(Error::contract("SceneSpec", "sphere outside bounds"));
                }
            }
            Primitive::Box { min, max, .. } => {
                if !bounds.contains(*min) || !bounds.contains(*max) || (0..3).any(|k| min[k] >= max[k]) {
                    return Err(Error::contract("SceneSpec", "box outside bounds or empty"));
                }
            }
            Primitive::Sheet { thickness, normal, .. } | Primitive::Slab { thickness, normal, .. } => {
                if !(*thickness > 0.0) || math::norm(*normal) == 0.0 {
                    return Err(Error::contract("SceneSpec", "sheet needs positive thickness and a normal"));
                }
            }
        }
        Ok(())
    }
}

/// Where [`default_cameras`] puts the views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub radius: f64,
    pub look_at: Vec3,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub fov_deg: f64,
    pub near: f64,
    pub far: f64,
}

impl Default for CameraRig {
    fn default() -> Self {
        CameraRig {
            radius: 2.0,
            look_at: [0.0; 3],
            elevation_min_deg: -60.0,
            elevation_max_deg: 60.0,
            fov_deg: 40.0,
            near: 1.0,
            far: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(default)]
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub background: Vec3,
    pub bounds: Aabb,
    #[serde(default)]
    pub rig: CameraRig,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.primitives.iter().try_for_each(|p| p.validate(&self.bounds))
    }

    /// Density and color at `x`, treating everything outside the bounds as
    /// empty.
    pub fn sample(&self, x: Vec3) -> (f64, Vec3) {
        if !self.bounds.contains(x) {
            return (0.0, self.background);
        }
        let mut best: Option<&Primitive> = None;
        for p in &self.primitives {
            if p.contains(x) && best.map_or(true, |b| p.density() > b.density()) {
                best = Some(p);
            }
        }
        match best {
            Some(p) => (p.density(), p.rgb()),
            None => (0.0, self.background),
        }
    }
}

/// Ground-truth density and color at a point inside the bounds. Color comes
/// from the densest containing primitive (first listed on ties).
pub fn eval_scene(scene: &SceneSpec, x: Vec3) -> Result<(f64, Vec3)> {
    if !scene.bounds.contains(x) {
        return Err(Error::contract("eval_scene", "point outside scene bounds"));
    }
    Ok(scene.sample(x))
}

/// Distance along the ray to the first entry into any positive-density
/// region within `[near, far]`.
pub fn gt_depth(scene: &SceneSpec, ray: &Ray) -> Option<f64> {
    let (b0, b1) = scene.bounds.intersect(ray.origin, ray.dir)?;
    let lo = b0.max(ray.near);
    let hi = b1.min(ray.far);
    scene
        .primitives
        .iter()
        .filter_map(|p| {
            let (t0, t1) = p.interval(ray.origin, ray.dir)?;
            let entry = t0.max(lo);
            (entry <= t1.min(hi)).then_some(entry)
        })
        .min_by(|a, b| a.total_cmp(b))
}

/// Brute-force quadrature of the analytic field along a ray with `n_fine`
/// centre samples. Returns the color over the background and the integrated
/// depth (absent when nothing absorbs).
pub fn oracle_render(scene: &SceneSpec, ray: &Ray, n_fine: usize) -> Result<(Vec3, Option<f64>)> {
    if n_fine < 1024 {
        return Err(Error::contract("oracle_render", "n_fine must be at least 1024"));
    }
    let batch = sample_scene(scene, ray, n_fine)?;
    let c = composite(&batch);
    let depth = (c.weight_sum > 0.0).then_some(c.depth);
    Ok((c.over(scene.background), depth))
}

/// Samples the analytic field at centre positions along a ray.
pub fn sample_scene(scene: &SceneSpec, ray: &Ray, n: usize) -> Result<RaySampleBatch> {
    let (t, dt) = sample_ray(ray, n, None)?;
    let (sigma, color): (Vec<f64>, Vec<Vec3>) = t.iter().map(|&ti| scene.sample(ray.at(ti))).unzip();
    RaySampleBatch::new(ray.near, ray.far, t, dt, sigma, color)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl CameraSpec {
    pub fn validate(&self) -> Result<()> {
        if self.position == self.look_at {
            return Err(Error::contract("CameraSpec", "position equals look_at"));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::contract("CameraSpec", "field of view must be in (0, 180)"));
        }
        if self.width == 0 || self.height == 0 || !(self.near < self.far) {
            return Err(Error::contract("CameraSpec", "empty image or near >= far"));
        }
        let fwd = normalize(sub(self.look_at, self.position));
        if math::norm(cross(fwd, self.up)) < 1e-9 {
            return Err(Error::contract("CameraSpec", "up is parallel to the view direction"));
        }
        Ok(())
    }

    /// Ray through the centre of pixel `(px, py)`; row 0 is the top.
    pub fn ray(&self, px: usize, py: usize) -> Ray {
        let fwd = normalize(sub(self.look_at, self.position));
        let right = normalize(cross(fwd, self.up));
        let up = cross(right, fwd);
        let half = tan(self.fov_deg.to_radians() * 0.5);
        let aspect = self.width as f64 / self.height as f64;
        let x = (2.0 * (px as f64 + 0.5) / self.width as f64 - 1.0) * half * aspect;
        let y = (1.0 - 2.0 * (py as f64 + 0.5) / self.height as f64) * half;
        let dir = normalize(add(fwd, add(scale(right, x), scale(up, y))));
        Ray {
            origin: self.position,
            dir,
            near: self.near,
            far: self.far,
        }
    }

    /// All pixel rays in row-major order.
    pub fn rays(&self) -> Vec<Ray> {
        let mut out = Vec::with_capacity(self.width * self.height);
        for py in 0..self.height {
            for px in 0..self.width {
                out.push(self.ray(px, py));
            }
        }
        out
    }
}

/// `count` views on a sphere around the rig's target, spread by the golden
/// angle in azimuth and evenly in elevation.
pub fn default_cameras(rig: &CameraRig, count: usize, width: usize, height: usize) -> Vec<CameraSpec> {
    let golden = core::f64::consts::PI * (3.0 - math::sqrt(5.0));
    (0..count)
        .map(|i| {
            let frac = if count == 1 { 0.5 } else { i as f64 / (count - 1) as f64 };
            let elev = (rig.elevation_min_deg + frac * (rig.elevation_max_deg - rig.elevation_min_deg)).to_radians();
            let az = i as f64 * golden;
            let dir = [
                math::cos(elev) * math::cos(az),
                math::cos(elev) * math::sin(az),
                math::sin(elev),
            ];
            CameraSpec {
                position: add(rig.look_at, scale(dir, rig.radius)),
                look_at: rig.look_at,
                up: [0.0, 0.0, 1.0],
                fov_deg: rig.fov_deg,
                width,
                height,
                near: rig.near,
                far: rig.far,
            }
        })
        .collect()
}

/// Samples per ray assumed by the shipped scenes.
pub const DEFAULT_SAMPLES: usize = 64;

/// Names accepted by [`builtin_scene`].
pub const BUILTIN_SCENES: [&str; 5] = ["sphere", "box", "thin-sheet", "semi-slab", "slanted-slab"];

fn named(name: &str, primitives: Vec<Primitive>, background: Vec3, rig: CameraRig) -> SceneSpec {
    SceneSpec {
        name: String::from(name),
        primitives,
        background,
        bounds: Aabb {
            min: [-0.75; 3],
            max: [0.75; 3],
        },
        rig,
    }
}

/// Rig for the layered scenes: views from above the layer.
fn layer_rig() -> CameraRig {
    CameraRig {
        elevation_min_deg: 35.0,
        elevation_max_deg: 75.0,
        ..CameraRig::default()
    }
}

/// Sampling interval of the default rig at [`DEFAULT_SAMPLES`].
pub fn default_dt() -> f64 {
    let rig = CameraRig::default();
    (rig.far - rig.near) / DEFAULT_SAMPLES as f64
}

/// One of the shipped scenes, by name.
pub fn builtin_scene(name: &str) -> Option<SceneSpec> {
    let scene = match name {
        "sphere" => named(
            name,
            alloc::vec![Primitive::Sphere {
                center: [0.0; 3],
                radius: 0.5,
                density: 500.0,
                rgb: [0.9, 0.4, 0.1],
            }],
            [1.0; 3],
            CameraRig::default(),
        ),
        "box" => named(
            name,
            alloc::vec![Primitive::Box {
                min: [-0.4; 3],
                max: [0.4; 3],
                density: 500.0,
                rgb: [0.2, 0.5, 0.9],
            }],
            [1.0; 3],
            CameraRig::default(),
        ),
        "thin-sheet" => named(
            name,
            alloc::vec![Primitive::Sheet {
                point: [0.0; 3],
                normal: [0.0, 0.0, 1.0],
                thickness: 2.0 * default_dt(),
                density: 500.0,
                rgb: [0.1, 0.6, 0.2],
            }],
            [1.0; 3],
            layer_rig(),
        ),
        "semi-slab" => named(
            name,
            alloc::vec![Primitive::Slab {
                point: [0.0; 3],
                normal: [0.0, 0.0, 1.0],
                thickness: 0.5,
                density: 2.0,
                rgb: [0.1, 0.1, 0.8],
                semi_transparent: true,
            }],
            [1.0; 3],
            layer_rig(),
        ),
        "slanted-slab" => named(
            name,
            alloc::vec![Primitive::Slab {
                point: [0.0; 3],
                normal: [0.5, 0.0, 0.866_025_403_784_438_6],
                thickness: 0.3,
                density: 8.0,
                rgb: [0.8, 0.2, 0.2],
                semi_transparent: true,
            }],
            [1.0; 3],
            layer_rig(),
        ),
        _ => return None,
    };
    Some(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_scene(density: f64) -> SceneSpec {
        let mut s = builtin_scene("sphere").unwrap();
        if let Primitive::Sphere { density: d, .. } = &mut s.primitives[0] {
            *d = density;
        }
        s
    }

    fn axial_ray() -> Ray {
        Ray::new([0.0, 0.0, 2.0], [0.0, 0.0, -1.0], 0.0, 4.0).unwrap()
    }

    #[test]
    fn builtins_validate() {
        for name in BUILTIN_SCENES {
            builtin_scene(name).unwrap().validate().unwrap();
        }
        assert!(builtin_scene("teapot").is_none());
    }

    #[test]
    fn eval_scene_cases() {
        let s = sphere_scene(50.0);
        assert_eq!(eval_scene(&s, [0.7, 0.7, 0.7]).unwrap(), (0.0, s.background));
        assert_eq!(eval_scene(&s, [0.0, 0.1, 0.0]).unwrap(), (50.0, [0.9, 0.4, 0.1]));
        assert!(eval_scene(&s, [2.0, 0.0, 0.0]).is_err());

        let mut overlap = builtin_scene("semi-slab").unwrap();
        if let Primitive::Slab { density, .. } = &mut overlap.primitives[0] {
            *density = 5.0;
        }
        overlap.primitives.push(Primitive::Box {
            min: [-0.1; 3],
            max: [0.1; 3],
            density: 50.0,
            rgb: [1.0, 0.0, 0.0],
        });
        assert_eq!(eval_scene(&overlap, [0.0; 3]).unwrap(), (50.0, [1.0, 0.0, 0.0]));
        assert_eq!(eval_scene(&overlap, [0.5, 0.5, 0.0]).unwrap().0, 5.0);
    }

    #[test]
    fn gt_depth_cases() {
        let s = sphere_scene(500.0);
        assert_eq!(gt_depth(&s, &axial_ray()), Some(1.5));
        let miss = Ray::new([0.0, 0.7, 2.0], [0.0, 0.0, -1.0], 0.0, 4.0).unwrap();
        assert_eq!(gt_depth(&s, &miss), None);

        let mut sheet = builtin_scene("thin-sheet").unwrap();
        if let Primitive::Sheet { thickness, .. } = &mut sheet.primitives[0] {
            *thickness = 1e-3;
        }
        let d = gt_depth(&sheet, &axial_ray()).unwrap();
        assert!((d - (2.0 - 5e-4)).abs() < 1e-12);
    }

    #[test]
    fn gt_depth_translates_with_scene() {
        let s = sphere_scene(500.0);
        let mut moved = s.clone();
        let shift = [0.1, -0.05, 0.2];
        if let Primitive::Sphere { center, .. } = &mut moved.primitives[0] {
            *center = add(*center, shift);
        }
        moved.bounds.min = add(moved.bounds.min, shift);
        moved.bounds.max = add(moved.bounds.max, shift);
        let ray = Ray::new([0.1, 0.2, 2.0], normalize([0.0, -0.1, -1.0]), 0.0, 4.0).unwrap();
        let moved_ray = Ray { origin: add(ray.origin, shift), ..ray };
        let a = gt_depth(&s, &ray).unwrap();
        let b = gt_depth(&moved, &moved_ray).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn oracle_empty_scene() {
        let mut s = sphere_scene(500.0);
        s.primitives.clear();
        let (rgb, d) = oracle_render(&s, &axial_ray(), 1024).unwrap();
        assert_eq!(rgb, s.background);
        assert_eq!(d, None);
        assert!(oracle_render(&s, &axial_ray(), 100).is_err());
    }

    #[test]
    fn oracle_opaque_sphere_depth() {
        let s = sphere_scene(500.0);
        let (_, d) = oracle_render(&s, &axial_ray(), 4096).unwrap();
        let d = d.unwrap();
        assert!((d - 1.5).abs() < 2.0 / 500.0, "{d}");
    }

    #[test]
    fn oracle_semi_transparent_blend() {
        let s = builtin_scene("semi-slab").unwrap();
        let ray = Ray::new([0.0, 0.0, 2.0], [0.0, 0.0, -1.0], 1.0, 3.0).unwrap();
        let (rgb, _) = oracle_render(&s, &ray, 8192).unwrap();
        let tr = math::exp(-1.0);
        for k in 0..3 {
            let expected = [0.1, 0.1, 0.8][k] * (1.0 - tr) + 1.0 * tr;
            assert!((rgb[k] - expected).abs() < 2e-3, "{k}: {} vs {expected}", rgb[k]);
        }
    }

    #[test]
    fn camera_centre_pixel_looks_at_target() {
        let cam = CameraSpec {
            position: [0.0, 0.0, 2.0],
            look_at: [0.0; 3],
            up: [0.0, 1.0, 0.0],
            fov_deg: 40.0,
            width: 5,
            height: 5,
            near: 0.5,
            far: 3.5,
        };
        cam.validate().unwrap();
        let r = cam.ray(2, 2);
        assert!((r.dir[2] + 1.0).abs() < 1e-12);
        // Row 0 looks up (+y), column 0 looks left (-x).
        assert!(cam.ray(2, 0).dir[1] > 0.0);
        assert!(cam.ray(0, 2).dir[0] < 0.0);
        assert!(CameraSpec { fov_deg: 180.0, ..cam }.validate().is_err());
        assert!(CameraSpec { look_at: cam.position, ..cam }.validate().is_err());
    }

    #[test]
    fn rig_views_face_target() {
        let rig = CameraRig::default();
        let cams = default_cameras(&rig, 16, 8, 8);
        assert_eq!(cams.len(), 16);
        for c in &cams {
            c.validate().unwrap();
            assert!((math::norm(c.position) - rig.radius).abs() < 1e-12);
        }
    }
}
