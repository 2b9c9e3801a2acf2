//! Rigid objects the sensor can touch. Every object is described in its own
//! frame with the outward surface normal pointing towards +z at the contact
//! face; the material occupies the region below the surface.

use serde::{Deserialize, Serialize};

use crate::geom::{self, Vec3};

/// Rectangular grid of surface heights `z = h(x, y)` in mm, bilinearly
/// interpolated. Queries outside the footprint clamp to the border.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heightfield {
    pub origin: [f64; 2],
    pub spacing: f64,
    pub nx: usize,
    pub ny: usize,
    /// Row-major heights, `heights[iy * nx + ix]`.
    pub heights: Vec<f64>,
}

impl Heightfield {
    pub fn from_fn(
        origin: [f64; 2],
        spacing: f64,
        nx: usize,
        ny: usize,
        f: impl Fn(f64, f64) -> f64,
    ) -> Self {
        let mut heights = Vec::with_capacity(nx * ny);
        for iy in 0..ny {
            for ix in 0..nx {
                heights.push(f(
                    origin[0] + ix as f64 * spacing,
                    origin[1] + iy as f64 * spacing,
                ));
            }
        }
        Self {
            origin,
            spacing,
            nx,
            ny,
            heights,
        }
    }

    /// Smooth radial bump `amplitude * exp(-r^2 / (2 sigma^2))` on a flat
    /// base at z = 0, sampled on a square grid of half-width `extent`.
    pub fn radial_bump(amplitude: f64, sigma: f64, extent: f64, spacing: f64) -> Self {
        let n = (2.0 * extent / spacing).round() as usize + 1;
        Self::from_fn([-extent, -extent], spacing, n, n, |x, y| {
            amplitude * (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.nx < 2 || self.ny < 2 {
            return Err("heightfield needs at least 2x2 samples".into());
        }
        if self.heights.len() != self.nx * self.ny {
            return Err(format!(
                "heightfield has {} samples, expected {}x{}",
                self.heights.len(),
                self.nx,
                self.ny
            ));
        }
        if !(self.spacing > 0.0) || !self.spacing.is_finite() {
            return Err("heightfield spacing must be positive".into());
        }
        if self.heights.iter().any(|h| !h.is_finite()) {
            return Err("heightfield contains non-finite heights".into());
        }
        Ok(())
    }

    /// Height and gradient `(h, dh/dx, dh/dy)` at `(x, y)`.
    pub fn sample(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let fx = ((x - self.origin[0]) / self.spacing).clamp(0.0, (self.nx - 1) as f64);
        let fy = ((y - self.origin[1]) / self.spacing).clamp(0.0, (self.ny - 1) as f64);
        let ix = (fx.floor() as usize).min(self.nx - 2);
        let iy = (fy.floor() as usize).min(self.ny - 2);
        let tx = fx - ix as f64;
        let ty = fy - iy as f64;
        let h = |i: usize, j: usize| self.heights[j * self.nx + i];
        let (h00, h10, h01, h11) = (h(ix, iy), h(ix + 1, iy), h(ix, iy + 1), h(ix + 1, iy + 1));
        let z = h00 * (1.0 - tx) * (1.0 - ty) + h10 * tx * (1.0 - ty) + h01 * (1.0 - tx) * ty + h11 * tx * ty;
        let dx = ((h10 - h00) * (1.0 - ty) + (h11 - h01) * ty) / self.spacing;
        let dy = ((h01 - h00) * (1.0 - tx) + (h11 - h10) * tx) / self.spacing;
        (z, dx, dy)
    }

    fn normal(&self, x: f64, y: f64) -> Vec3 {
        let (_, gx, gy) = self.sample(x, y);
        geom::normalize([-gx, -gy, 1.0]).expect("finite gradient")
    }
}

/// Plate bounded by a rounded rectangle in the xy-plane, top face at z = 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundedRect {
    pub half_width: f64,
    pub half_height: f64,
    pub corner_radius: f64,
}

impl RoundedRect {
    /// Signed 2D distance to the outline and its unit gradient.
    fn sdf(&self, x: f64, y: f64) -> (f64, [f64; 2]) {
        let r = self.corner_radius;
        let qx = x.abs() - (self.half_width - r);
        let qy = y.abs() - (self.half_height - r);
        let (sx, sy) = (x.signum_or_one(), y.signum_or_one());
        if qx > 0.0 && qy > 0.0 {
            let l = (qx * qx + qy * qy).sqrt();
            (l - r, [sx * qx / l, sy * qy / l])
        } else if qx > qy {
            (qx - r, [sx, 0.0])
        } else {
            (qy - r, [0.0, sy])
        }
    }

    /// Point on the outline nearest to `(x, y)` with the outward 2D normal.
    pub fn nearest_outline_point(&self, x: f64, y: f64) -> ([f64; 2], [f64; 2]) {
        let (d, g) = self.sdf(x, y);
        ([x - d * g[0], y - d * g[1]], g)
    }
}

trait SignumOrOne {
    fn signum_or_one(self) -> f64;
}

impl SignumOrOne for f64 {
    fn signum_or_one(self) -> f64 {
        if self < 0.0 {
            -1.0
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContactObject {
    /// Infinite plane z = 0.
    Plane,
    /// The plane z = 0 truncated at the straight line x = 0; material
    /// occupies x <= 0, z <= 0.
    HalfPlaneEdge,
    Heightfield(Heightfield),
    /// Sphere resting with its top at the origin.
    Sphere { radius: f64 },
    /// Plate with a rounded-rectangle outline; its rim is a closed edge.
    Contour(RoundedRect),
}

/// Local contact geometry at a surface point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub point: Vec3,
    /// Outward unit normal.
    pub normal: Vec3,
}

/// Local frame used to express sensor poses relative to an object:
/// z along the outward face normal, x across an edge (pointing off the
/// object) when the object has one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFrame {
    pub origin: Vec3,
    pub x_axis: Vec3,
    pub y_axis: Vec3,
    pub z_axis: Vec3,
}

impl ContactObject {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            ContactObject::Heightfield(h) => h.validate(),
            ContactObject::Sphere { radius } if !(*radius > 0.0) => {
                Err("sphere radius must be positive".into())
            }
            ContactObject::Contour(r)
                if !(r.corner_radius >= 0.0
                    && r.corner_radius <= r.half_width.min(r.half_height)) =>
            {
                Err("contour corner radius must lie in [0, min half-size]".into())
            }
            _ => Ok(()),
        }
    }

    /// True when the object has an edge whose pose includes a horizontal
    /// offset and yaw.
    pub fn has_edge(&self) -> bool {
        matches!(self, ContactObject::HalfPlaneEdge | ContactObject::Contour(_))
    }

    /// Signed distance (mm), negative inside the material. For heightfields
    /// this is the vertical gap `z - h(x, y)`.
    pub fn signed_distance(&self, p: Vec3) -> f64 {
        match self {
            ContactObject::Plane => p[2],
            ContactObject::HalfPlaneEdge => prism_distance(p[0], p[2]),
            ContactObject::Heightfield(h) => p[2] - h.sample(p[0], p[1]).0,
            ContactObject::Sphere { radius } => {
                geom::norm(geom::sub(p, [0.0, 0.0, -radius])) - radius
            }
            ContactObject::Contour(r) => prism_distance(r.sdf(p[0], p[1]).0, p[2]),
        }
    }

    /// Move a point that lies inside the material onto the surface along the
    /// local contact normal.
    pub fn project(&self, p: Vec3) -> SurfacePoint {
        match self {
            ContactObject::Plane => SurfacePoint {
                point: [p[0], p[1], 0.0],
                normal: [0.0, 0.0, 1.0],
            },
            ContactObject::HalfPlaneEdge => {
                if p[2] >= p[0] {
                    SurfacePoint {
                        point: [p[0], p[1], 0.0],
                        normal: [0.0, 0.0, 1.0],
                    }
                } else {
                    SurfacePoint {
                        point: [0.0, p[1], p[2]],
                        normal: [1.0, 0.0, 0.0],
                    }
                }
            }
            ContactObject::Sphere { radius } => {
                let c = [0.0, 0.0, -radius];
                let n = geom::normalize(geom::sub(p, c)).unwrap_or([0.0, 0.0, 1.0]);
                SurfacePoint {
                    point: geom::add(c, geom::scale(n, *radius)),
                    normal: n,
                }
            }
            ContactObject::Contour(r) => {
                let (d, g) = r.sdf(p[0], p[1]);
                if p[2] >= d {
                    SurfacePoint {
                        point: [p[0], p[1], 0.0],
                        normal: [0.0, 0.0, 1.0],
                    }
                } else {
                    SurfacePoint {
                        point: [p[0] - d * g[0], p[1] - d * g[1], p[2]],
                        normal: [g[0], g[1], 0.0],
                    }
                }
            }
            ContactObject::Heightfield(h) => project_heightfield(h, p),
        }
    }

    /// Surface point nearest to `p` (approximate for heightfields).
    pub fn nearest_surface_point(&self, p: Vec3) -> SurfacePoint {
        match self {
            ContactObject::Plane => self.project(p),
            ContactObject::Sphere { .. } => self.project(p),
            ContactObject::Heightfield(h) => nearest_on_heightfield(h, p),
            ContactObject::HalfPlaneEdge | ContactObject::Contour(_) => {
                // Nearest point on the top face (clamped to the outline).
                let (d, g) = match self {
                    ContactObject::Contour(r) => r.sdf(p[0], p[1]),
                    _ => (p[0], [1.0, 0.0]),
                };
                let (x, y) = if d > 0.0 {
                    (p[0] - d * g[0], p[1] - d * g[1])
                } else {
                    (p[0], p[1])
                };
                SurfacePoint {
                    point: [x, y, 0.0],
                    normal: [0.0, 0.0, 1.0],
                }
            }
        }
    }

    /// Local frame at the surface point nearest `p`. For edge objects the
    /// origin lies on the edge line and x points off the object.
    pub fn local_frame(&self, p: Vec3) -> LocalFrame {
        let sp = self.nearest_surface_point(p);
        match self {
            ContactObject::HalfPlaneEdge => LocalFrame {
                origin: [0.0, p[1], 0.0],
                x_axis: [1.0, 0.0, 0.0],
                y_axis: [0.0, 1.0, 0.0],
                z_axis: [0.0, 0.0, 1.0],
            },
            ContactObject::Contour(r) => {
                let (q, g) = r.nearest_outline_point(p[0], p[1]);
                let x_axis = [g[0], g[1], 0.0];
                let z_axis = [0.0, 0.0, 1.0];
                LocalFrame {
                    origin: [q[0], q[1], 0.0],
                    x_axis,
                    y_axis: geom::cross(z_axis, x_axis),
                    z_axis,
                }
            }
            _ => {
                let z_axis = sp.normal;
                // x follows the world x direction projected onto the tangent plane.
                let seed = if z_axis[0].abs() < 0.9 {
                    [1.0, 0.0, 0.0]
                } else {
                    [0.0, 1.0, 0.0]
                };
                let x_axis = geom::normalize(geom::sub(
                    seed,
                    geom::scale(z_axis, geom::dot(seed, z_axis)),
                ))
                .expect("seed not parallel to normal");
                LocalFrame {
                    origin: sp.point,
                    x_axis,
                    y_axis: geom::cross(z_axis, x_axis),
                    z_axis,
                }
            }
        }
    }
}

/// Signed distance to the quarter space `{u <= 0, z <= 0}`.
fn prism_distance(u: f64, z: f64) -> f64 {
    if u <= 0.0 && z <= 0.0 {
        u.max(z)
    } else {
        let du = u.max(0.0);
        let dz = z.max(0.0);
        (du * du + dz * dz).sqrt()
    }
}

fn project_heightfield(h: &Heightfield, p: Vec3) -> SurfacePoint {
    let mut q = p;
    for _ in 0..20 {
        let (z, _, _) = h.sample(q[0], q[1]);
        let gap = z - q[2];
        if gap.abs() < 1e-12 {
            break;
        }
        let n = h.normal(q[0], q[1]);
        // Step along the normal by the distance to the tangent plane.
        q = geom::add(q, geom::scale(n, gap * n[2]));
    }
    let (z, _, _) = h.sample(q[0], q[1]);
    if (q[2] - z).abs() > 1e-9 {
        q = [p[0], p[1], h.sample(p[0], p[1]).0];
    } else {
        q[2] = z;
    }
    SurfacePoint {
        point: q,
        normal: h.normal(q[0], q[1]),
    }
}

fn nearest_on_heightfield(h: &Heightfield, p: Vec3) -> SurfacePoint {
    // Fixed-point iteration: the nearest point q satisfies p = q + d n(q).
    let mut q = [p[0], p[1], h.sample(p[0], p[1]).0];
    for _ in 0..50 {
        let n = h.normal(q[0], q[1]);
        let d = geom::dot(geom::sub(p, q), n);
        let foot = geom::sub(p, geom::scale(n, d));
        let next = [foot[0], foot[1], h.sample(foot[0], foot[1]).0];
        let step = geom::norm(geom::sub(next, q));
        q = next;
        if step < 1e-12 {
            break;
        }
    }
    SurfacePoint {
        point: q,
        normal: h.normal(q[0], q[1]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_projection_picks_nearest_face() {
        let e = ContactObject::HalfPlaneEdge;
        let sp = e.project([-3.0, 1.0, -0.5]);
        assert_eq!(sp.point, [-3.0, 1.0, 0.0]);
        let sp = e.project([-0.2, 1.0, -2.0]);
        assert_eq!(sp.point, [0.0, 1.0, -2.0]);
        assert_eq!(sp.normal, [1.0, 0.0, 0.0]);
        assert!(e.signed_distance([1.0, 0.0, -1.0]) > 0.0);
    }

    #[test]
    fn heightfield_projection_lands_on_surface() {
        let h = Heightfield::radial_bump(15.0, 30.0, 100.0, 0.5);
        let obj = ContactObject::Heightfield(h);
        for p in [[10.0, -5.0, 5.0], [-40.0, 20.0, 1.0], [0.0, 0.0, 13.0]] {
            let sp = obj.project(p);
            assert!(obj.signed_distance(sp.point).abs() < 1e-9);
        }
    }

    #[test]
    fn sphere_frame_normal_is_radial() {
        let obj = ContactObject::Sphere { radius: 60.0 };
        let f = obj.local_frame([30.0, 0.0, 10.0]);
        let radial = geom::normalize([30.0, 0.0, 70.0]).unwrap();
        assert!(geom::norm(geom::sub(f.z_axis, radial)) < 1e-12);
        assert!(geom::dot(f.x_axis, f.z_axis).abs() < 1e-12);
    }

    #[test]
    fn heightfield_nearest_point_matches_sphere_cap() {
        let r = 60.0;
        let h = Heightfield::from_fn([-50.0, -50.0], 0.25, 401, 401, |x, y| {
            (r * r - x * x - y * y).sqrt() - r
        });
        let obj = ContactObject::Heightfield(h);
        let p = [20.0, 10.0, 5.0];
        let sp = obj.nearest_surface_point(p);
        let exact = ContactObject::Sphere { radius: r }.nearest_surface_point(p);
        assert!(geom::norm(geom::sub(sp.point, exact.point)) < 0.05);
    }

    #[test]
    fn contour_outline_normal() {
        let rr = RoundedRect {
            half_width: 50.0,
            half_height: 30.0,
            corner_radius: 10.0,
        };
        let (q, g) = rr.nearest_outline_point(48.0, 0.0);
        assert!((q[0] - 50.0).abs() < 1e-12 && g == [1.0, 0.0]);
        let (q, _) = rr.nearest_outline_point(45.0, 25.0);
        let c = [40.0, 20.0];
        let d = ((q[0] - c[0]).powi(2) + (q[1] - c[1]).powi(2)).sqrt();
        assert!((d - 10.0).abs() < 1e-12);
    }
}
