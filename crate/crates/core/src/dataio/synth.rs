//! Synthetic stand-in for rendered shape datasets: area-uniform samples of
//! simple primitives, half-space occlusion, and binary silhouettes.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::ImageInput;
use crate::error::{Error, Result};
use crate::geometry::PointSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere,
    Box,
    Cylinder,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Sphere, ShapeKind::Box, ShapeKind::Cylinder];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Box => "box",
            ShapeKind::Cylinder => "cylinder",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid("shape kind", format!("unknown primitive {s:?}")))
    }
}

/// The 24 fixed viewing directions: elevations +30°, 0° and −30°, each with
/// eight azimuths 45° apart.
pub fn viewpoints() -> [[f64; 3]; 24] {
    let mut out = [[0.0; 3]; 24];
    for (e, elev) in [30.0f64, 0.0, -30.0].into_iter().enumerate() {
        let (se, ce) = elev.to_radians().sin_cos();
        for a in 0..8 {
            let (sa, ca) = (a as f64 * PI / 4.0).sin_cos();
            out[e * 8 + a] = [ce * ca, ce * sa, se];
        }
    }
    out
}

fn unit(v: [f64; 3], op: &'static str) -> Result<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if !(n > 1e-12) || !n.is_finite() {
        return Err(Error::invalid(op, format!("degenerate viewpoint {v:?}")));
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// `n` surface samples of a randomly proportioned primitive, scaled so its
/// bounding sphere (centered at the origin) has radius 1.
pub fn gen_primitive<R: Rng + ?Sized>(kind: ShapeKind, n: usize, rng: &mut R) -> Result<PointSet> {
    if n == 0 {
        return Err(Error::invalid("gen_primitive", "n must be positive"));
    }
    let mut pts = Vec::with_capacity(n);
    match kind {
        ShapeKind::Sphere => {
            // Archimedes: z uniform on [-1, 1] is area-uniform on the sphere
            for _ in 0..n {
                let z: f64 = rng.gen_range(-1.0..=1.0);
                let phi = rng.gen_range(0.0..2.0 * PI);
                let r = (1.0 - z * z).max(0.0).sqrt();
                pts.push([r * phi.cos(), r * phi.sin(), z]);
            }
        }
        ShapeKind::Box => {
            let e: [f64; 3] = [0, 1, 2].map(|_| rng.gen_range(0.3..1.0));
            let s = (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
            // face pair perpendicular to axis a has area proportional to the other two extents
            let areas = [e[1] * e[2], e[0] * e[2], e[0] * e[1]];
            let total: f64 = areas.iter().sum();
            for _ in 0..n {
                let mut u = rng.gen_range(0.0..total);
                let mut axis = 0;
                while axis < 2 && u >= areas[axis] {
                    u -= areas[axis];
                    axis += 1;
                }
                let mut p = [0.0; 3];
                for (d, v) in p.iter_mut().enumerate() {
                    *v = if d == axis {
                        if rng.gen_bool(0.5) {
                            e[d]
                        } else {
                            -e[d]
                        }
                    } else {
                        rng.gen_range(-e[d]..e[d])
                    };
                }
                pts.push(p.map(|v| v / s));
            }
        }
        ShapeKind::Cylinder => {
            let rho: f64 = rng.gen_range(0.3..1.0);
            let h: f64 = rng.gen_range(0.3..1.0);
            let s = (rho * rho + h * h).sqrt();
            let side = 2.0 * PI * rho * 2.0 * h;
            let caps = 2.0 * PI * rho * rho;
            for _ in 0..n {
                let phi = rng.gen_range(0.0..2.0 * PI);
                let p = if rng.gen_range(0.0..side + caps) < side {
                    [rho * phi.cos(), rho * phi.sin(), rng.gen_range(-h..h)]
                } else {
                    let r = rho * rng.gen_range(0.0f64..1.0).sqrt();
                    let z = if rng.gen_bool(0.5) { h } else { -h };
                    [r * phi.cos(), r * phi.sin(), z]
                };
                pts.push(p.map(|v| v / s));
            }
        }
    }
    PointSet::from_points(&pts)
}

/// Removes the `round(fraction·N)` points that reach farthest toward
/// `viewpoint` and refills the cloud to `N` by drawing survivors with
/// replacement. Survivors keep their order and come first.
pub fn occlude<R: Rng + ?Sized>(gt: &PointSet, viewpoint: [f64; 3], fraction: f64, rng: &mut R) -> Result<PointSet> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid("occlude", format!("fraction {fraction} outside (0, 1)")));
    }
    let v = unit(viewpoint, "occlude")?;
    let n = gt.len();
    let remove = ((fraction * n as f64).round() as usize).min(n - 1);
    let proj: Vec<f64> = gt.points().map(|p| dot(p, v)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| proj[b].total_cmp(&proj[a]).then(a.cmp(&b)));
    let mut keep = vec![true; n];
    for &i in &order[..remove] {
        keep[i] = false;
    }
    let survivors: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
    let mut idx = survivors.clone();
    while idx.len() < n {
        idx.push(survivors[rng.gen_range(0..survivors.len())]);
    }
    gt.select(&idx)
}

/// Pixels per unit length in the orthographic projection of an `h×w` image.
pub fn silhouette_scale(h: usize, w: usize) -> f64 {
    h.min(w) as f64 / 2.0 - 2.0
}

/// Radius in pixels of the disc splatted for every point.
pub const SPLAT_RADIUS: f64 = 1.5;

/// Orthographic binary silhouette seen from `viewpoint`, replicated to three
/// channels. World +z projects to image up whenever the view is not vertical.
pub fn render_silhouette(cloud: &PointSet, viewpoint: [f64; 3], h: usize, w: usize) -> Result<ImageInput> {
    if h < 8 || w < 8 {
        return Err(Error::invalid("render_silhouette", format!("image {h}x{w} below 8x8")));
    }
    let v = unit(viewpoint, "render_silhouette")?;
    let mut right = cross([0.0, 0.0, 1.0], v);
    if dot(right, right) < 1e-12 {
        right = cross([0.0, 1.0, 0.0], v);
    }
    let right = unit(right, "render_silhouette")?;
    let up = cross(v, right);

    let s = silhouette_scale(h, w);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut mask = vec![false; h * w];
    let r2 = SPLAT_RADIUS * SPLAT_RADIUS;
    for p in cloud.points() {
        let px = cx + s * dot(p, right);
        let py = cy - s * dot(p, up);
        let (x0, x1) = ((px - SPLAT_RADIUS).ceil().max(0.0), (px + SPLAT_RADIUS).floor());
        let (y0, y1) = ((py - SPLAT_RADIUS).ceil().max(0.0), (py + SPLAT_RADIUS).floor());
        let (x1, y1) = (x1.min(w as f64 - 1.0), y1.min(h as f64 - 1.0));
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                let (dx, dy) = (x as f64 - px, y as f64 - py);
                if dx * dx + dy * dy <= r2 {
                    mask[y * w + x] = true;
                }
            }
        }
    }
    let data = mask
        .iter()
        .flat_map(|&m| [f64::from(u8::from(m)); 3])
        .collect();
    ImageInput::new(Tensor::new(vec![h, w, 3], data)?)
}
