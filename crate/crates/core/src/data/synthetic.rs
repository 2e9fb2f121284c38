//! Synthetic multi-view dataset generator.
//!
//! Each instance is a parametric textured primitive (cuboid, ellipsoid or
//! cylinder) ray-traced from camera poses spanning the full azimuth circle
//! at varying elevation, under a light fixed in world space. Rotating the
//! camera around the object changes silhouette, visible texture region and
//! shading together — appearance variation a 2D augmentation of a single
//! view cannot produce. Instances of one class share a shape family and
//! differ in proportions, colors and surface pattern.

use super::{DataError, MultiViewDataset, ObservationImage};
use crate::util::mix_seed;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

type Vec3 = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn norm(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    if n == 0.0 {
        a
    } else {
        scale(a, 1.0 / n)
    }
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Cuboid { half: Vec3 },
    Ellipsoid { radii: Vec3 },
    Cylinder { radius: f64, half_height: f64 },
}

impl Shape {
    fn max_extent(&self) -> f64 {
        match *self {
            Shape::Cuboid { half } => half[0].max(half[1]).max(half[2]),
            Shape::Ellipsoid { radii } => radii[0].max(radii[1]).max(radii[2]),
            Shape::Cylinder {
                radius,
                half_height,
            } => radius.max(half_height),
        }
    }

    /// First intersection of `origin + t*dir` with the surface, `t > 0`.
    /// Returns `(t, outward normal)`.
    fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, Vec3)> {
        match *self {
            Shape::Ellipsoid { radii } => {
                // Scale space so the ellipsoid becomes a unit sphere.
                let o = [origin[0] / radii[0], origin[1] / radii[1], origin[2] / radii[2]];
                let d = [dir[0] / radii[0], dir[1] / radii[1], dir[2] / radii[2]];
                let a = dot(d, d);
                let b = 2.0 * dot(o, d);
                let c = dot(o, o) - 1.0;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / (2.0 * a);
                if t <= 1e-9 {
                    return None;
                }
                let p = add(origin, scale(dir, t));
                let n = norm([
                    p[0] / (radii[0] * radii[0]),
                    p[1] / (radii[1] * radii[1]),
                    p[2] / (radii[2] * radii[2]),
                ]);
                Some((t, n))
            }
            Shape::Cuboid { half } => {
                // Slab test, tracking which axis provides the entry plane.
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut axis = 0usize;
                let mut sign = 1.0;
                for i in 0..3 {
                    if dir[i].abs() < 1e-12 {
                        if origin[i].abs() > half[i] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / dir[i];
                    let mut t0 = (-half[i] - origin[i]) * inv;
                    let mut t1 = (half[i] - origin[i]) * inv;
                    let mut s = -1.0;
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                        s = 1.0;
                    }
                    if t0 > t_near {
                        t_near = t0;
                        axis = i;
                        sign = s;
                    }
                    t_far = t_far.min(t1);
                    if t_near > t_far {
                        return None;
                    }
                }
                if t_near <= 1e-9 {
                    return None;
                }
                let mut n = [0.0, 0.0, 0.0];
                n[axis] = sign;
                Some((t_near, n))
            }
            Shape::Cylinder {
                radius,
                half_height,
            } => {
                let mut best: Option<(f64, Vec3)> = None;
                // Lateral surface.
                let a = dir[0] * dir[0] + dir[1] * dir[1];
                if a > 1e-12 {
                    let b = 2.0 * (origin[0] * dir[0] + origin[1] * dir[1]);
                    let c = origin[0] * origin[0] + origin[1] * origin[1] - radius * radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 {
                        let t = (-b - disc.sqrt()) / (2.0 * a);
                        if t > 1e-9 {
                            let p = add(origin, scale(dir, t));
                            if p[2].abs() <= half_height {
                                best = Some((t, norm([p[0], p[1], 0.0])));
                            }
                        }
                    }
                }
                // Caps.
                for z in [half_height, -half_height] {
                    if dir[2].abs() < 1e-12 {
                        continue;
                    }
                    let t = (z - origin[2]) / dir[2];
                    if t <= 1e-9 {
                        continue;
                    }
                    let p = add(origin, scale(dir, t));
                    if p[0] * p[0] + p[1] * p[1] <= radius * radius
                        && best.map_or(true, |(bt, _)| t < bt)
                    {
                        best = Some((t, [0.0, 0.0, z.signum()]));
                    }
                }
                best
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Pattern {
    Stripes { axis: usize, freq: f64, phase: f64 },
    Checker { freq: f64 },
    Rings { freq: f64, phase: f64 },
}

#[derive(Debug, Clone)]
struct InstanceParams {
    shape: Shape,
    base: Vec3,
    secondary: Vec3,
    pattern: Pattern,
}

fn hsv(h: f64, s: f64, v: f64) -> Vec3 {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn instance_params(class_index: usize, rng: &mut ChaCha8Rng) -> InstanceParams {
    let shape = match class_index % 3 {
        0 => Shape::Cuboid {
            half: [
                rng.random_range(0.45..0.95),
                rng.random_range(0.45..0.95),
                rng.random_range(0.45..0.95),
            ],
        },
        1 => Shape::Ellipsoid {
            radii: [
                rng.random_range(0.5..1.0),
                rng.random_range(0.5..1.0),
                rng.random_range(0.5..1.0),
            ],
        },
        _ => Shape::Cylinder {
            radius: rng.random_range(0.4..0.8),
            half_height: rng.random_range(0.55..1.0),
        },
    };
    let hue = rng.random_range(0.0..1.0);
    let base = hsv(
        hue,
        rng.random_range(0.55..0.95),
        rng.random_range(0.55..0.95),
    );
    let secondary = hsv(
        hue + rng.random_range(0.2..0.8),
        rng.random_range(0.5..0.9),
        rng.random_range(0.4..0.9),
    );
    let pattern = match rng.random_range(0..3u32) {
        0 => Pattern::Stripes {
            axis: rng.random_range(0..3u32) as usize,
            freq: rng.random_range(1.5..4.5),
            phase: rng.random_range(0.0..1.0),
        },
        1 => Pattern::Checker {
            freq: rng.random_range(1.0..3.0),
        },
        _ => Pattern::Rings {
            freq: rng.random_range(1.5..4.0),
            phase: rng.random_range(0.0..1.0),
        },
    };
    InstanceParams {
        shape,
        base,
        secondary,
        pattern,
    }
}

fn surface_color(params: &InstanceParams, p: Vec3) -> Vec3 {
    let mixv = match params.pattern {
        Pattern::Stripes { axis, freq, phase } => {
            let t = (p[axis] * freq + phase) * std::f64::consts::PI;
            if t.sin() > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Pattern::Checker { freq } => {
            let c = (p[0] * freq).floor() + (p[1] * freq).floor() + (p[2] * freq).floor();
            (c.rem_euclid(2.0)).round()
        }
        Pattern::Rings { freq, phase } => {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let t = (r * freq + phase) * std::f64::consts::PI * 2.0;
            if t.sin() > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    };
    [
        params.base[0] * (1.0 - mixv) + params.secondary[0] * mixv,
        params.base[1] * (1.0 - mixv) + params.secondary[1] * mixv,
        params.base[2] * (1.0 - mixv) + params.secondary[2] * mixv,
    ]
}

const BACKGROUND: [u8; 3] = [26, 26, 30];
const LIGHT_DIR: Vec3 = [0.37, -0.61, 0.70];

fn render_view(params: &InstanceParams, azimuth: f64, elevation: f64, size: u32) -> (RgbImage, Vec3) {
    let dist = params.shape.max_extent() * 2.7;
    let eye = [
        dist * elevation.cos() * azimuth.cos(),
        dist * elevation.cos() * azimuth.sin(),
        dist * elevation.sin(),
    ];
    let forward = norm(sub([0.0, 0.0, 0.0], eye));
    let right = norm(cross(forward, [0.0, 0.0, 1.0]));
    let up = cross(right, forward);
    let fov_scale = (0.45f64).tan();
    let light = norm(LIGHT_DIR);

    let mut img = RgbImage::new(size, size);
    for py in 0..size {
        for px in 0..size {
            let ndc_x = (2.0 * (px as f64 + 0.5) / size as f64 - 1.0) * fov_scale;
            let ndc_y = (1.0 - 2.0 * (py as f64 + 0.5) / size as f64) * fov_scale;
            let dir = norm(add(
                forward,
                add(scale(right, ndc_x), scale(up, ndc_y)),
            ));
            let pixel = match params.shape.intersect(eye, dir) {
                Some((t, n)) => {
                    let p = add(eye, scale(dir, t));
                    let albedo = surface_color(params, p);
                    let diffuse = dot(n, light).max(0.0);
                    let shade = 0.25 + 0.75 * diffuse;
                    Rgb([
                        ((albedo[0] * shade).clamp(0.0, 1.0) * 255.0).round() as u8,
                        ((albedo[1] * shade).clamp(0.0, 1.0) * 255.0).round() as u8,
                        ((albedo[2] * shade).clamp(0.0, 1.0) * 255.0).round() as u8,
                    ])
                }
                None => Rgb(BACKGROUND),
            };
            img.put_pixel(px, py, pixel);
        }
    }
    (img, eye)
}

/// Renders `num_instances x views_per_instance` labeled observations.
///
/// Pure function of its arguments: identical calls produce bit-identical
/// pixel data. Instance `i` belongs to `classes[i % classes.len()]`; camera
/// azimuths cover the full circle, elevations cycle through three bands.
pub fn generate_synthetic_multiview(
    num_instances: usize,
    classes: &[String],
    views_per_instance: usize,
    image_size: u32,
    seed: u64,
) -> Result<MultiViewDataset, DataError> {
    if num_instances < 2 {
        return Err(DataError::InvalidParameter(format!(
            "num_instances must be >= 2, got {num_instances}"
        )));
    }
    if views_per_instance < 2 {
        return Err(DataError::InvalidParameter(format!(
            "views_per_instance must be >= 2, got {views_per_instance}"
        )));
    }
    if image_size < 32 {
        return Err(DataError::InvalidParameter(format!(
            "image_size must be >= 32, got {image_size}"
        )));
    }
    if classes.is_empty() {
        return Err(DataError::InvalidParameter("classes must be nonempty".into()));
    }

    let mut items = Vec::with_capacity(num_instances * views_per_instance);
    let mut class_of = BTreeMap::new();
    let mut positions = BTreeMap::new();
    let elevations = [0.22, 0.45, 0.68];

    for inst in 0..num_instances {
        let id = inst as u32;
        let class_index = inst % classes.len();
        let class = classes[class_index].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x17ce, id as u64]));
        let params = instance_params(class_index, &mut rng);
        class_of.insert(id, class.clone());
        // Semantic-map position: a deterministic floor grid.
        positions.insert(
            id,
            [1.5 * (inst % 4) as f64, 1.5 * (inst / 4) as f64, 0.4],
        );

        for v in 0..views_per_instance {
            let azimuth = 2.0 * std::f64::consts::PI * v as f64 / views_per_instance as f64;
            let elevation = elevations[v % elevations.len()];
            let (pixels, eye) = render_view(&params, azimuth, elevation, image_size);
            items.push(ObservationImage {
                pixels,
                instance_id: id,
                class_label: class.clone(),
                view_index: v as u32,
                camera_position: Some(eye),
            });
        }
    }

    Ok(MultiViewDataset {
        items,
        class_of,
        positions,
    })
}
