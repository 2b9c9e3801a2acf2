//! Synthetic optical tactile sensor.
//!
//! The sensor is a compliant dome carrying a hexagonal array of pins. Each
//! pin has a marker on its inner tip; a camera looking along the sensor axis
//! sees the markers as discs. Pressing the dome against an object flattens
//! the skin onto the object, which tilts the pins and moves their tips in the
//! image. Sliding or twisting the sensor while in contact drags the stuck
//! skin sideways (shear), which also moves the markers.
//!
//! Sensor frame: the dome apex is the origin, the dome bulges towards -z and
//! its centre of curvature sits at `(0, 0, dome_radius)`. A pose with depth
//! `d < 0` places the apex `|d|` mm below the object's surface.

mod image;
pub mod object;

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use self::image::{ImageError, TactileImage};
pub use self::object::{ContactObject, Heightfield, LocalFrame, RoundedRect};

use crate::geom::{self, Vec3};
use crate::pose::{pre_contact_components, Perturbation, Pose, RigidTransform};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("contact depth {depth} mm exceeds the sensor compliance limit of {limit} mm")]
    BeyondCompliance { depth: f64, limit: f64 },
    #[error("invalid sensor geometry: {0}")]
    Geometry(String),
    #[error("invalid contact object: {0}")]
    Object(String),
    #[error("{path}: {reason}")]
    Config { path: String, reason: String },
}

/// Physical and imaging parameters of the sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorGeometry {
    /// Diameter of the pin-carrying footprint, mm.
    pub tip_diameter: f64,
    /// Centre-to-centre pin spacing on the hexagonal grid, mm.
    pub pin_spacing: f64,
    /// Radius of curvature of the dome, mm.
    pub dome_radius: f64,
    /// Distance from the skin to the marker on the pin tip, mm.
    pub pin_length: f64,
    /// Half-width of the square region imaged by the camera, mm.
    pub view_half_width: f64,
    /// Image side length, pixels.
    pub image_size: usize,
    /// Marker disc radius, pixels.
    pub marker_radius: f64,
}

impl Default for SensorGeometry {
    fn default() -> Self {
        Self {
            tip_diameter: 40.0,
            pin_spacing: 4.0,
            dome_radius: 22.0,
            pin_length: 4.0,
            view_half_width: 25.0,
            image_size: 128,
            marker_radius: 3.0,
        }
    }
}

impl SensorGeometry {
    /// Same sensor imaged at a different resolution; the marker radius
    /// scales with it.
    pub fn with_image_size(mut self, size: usize) -> Self {
        self.marker_radius *= size as f64 / self.image_size as f64;
        self.image_size = size;
        self
    }

    pub fn pixels_per_mm(&self) -> f64 {
        self.image_size as f64 / (2.0 * self.view_half_width)
    }

    /// Rest positions of the pins on the skin: hexagonal lattice points
    /// within the footprint, lifted onto the dome.
    pub fn pin_rest_positions(&self) -> Vec<Vec3> {
        let s = self.pin_spacing;
        let radius = self.tip_diameter / 2.0;
        let n = (radius / s).ceil() as i64 + 2;
        let mut pins = Vec::new();
        for j in -n..=n {
            for i in -n..=n {
                let x = s * (i as f64 + 0.5 * j as f64);
                let y = s * (3f64.sqrt() / 2.0) * j as f64;
                if (x * x + y * y).sqrt() <= radius + 1e-9 {
                    pins.push([x, y, self.dome_height(x, y)]);
                }
            }
        }
        pins.sort_by(|a, b| (a[1], a[0]).partial_cmp(&(b[1], b[0])).expect("finite"));
        pins
    }

    fn dome_height(&self, x: f64, y: f64) -> f64 {
        let r = self.dome_radius;
        r - (r * r - x * x - y * y).max(0.0).sqrt()
    }

    fn dome_normal(&self, p: Vec3) -> Vec3 {
        geom::normalize(geom::sub(p, [0.0, 0.0, self.dome_radius])).expect("pin off centre")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Geometry(m));
        let positive = [
            ("tip_diameter", self.tip_diameter),
            ("pin_spacing", self.pin_spacing),
            ("dome_radius", self.dome_radius),
            ("view_half_width", self.view_half_width),
            ("marker_radius", self.marker_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.pin_length >= 0.0) {
            return bad("pin_length must be non-negative".into());
        }
        if self.image_size < 8 {
            return bad(format!("image_size {} is too small", self.image_size));
        }
        if self.dome_radius < self.tip_diameter / 2.0 {
            return bad("dome_radius must be at least half the tip diameter".into());
        }
        if self.view_half_width <= self.tip_diameter / 2.0 {
            return bad("the camera view must contain the whole footprint".into());
        }
        let pins = self.pin_rest_positions();
        if pins.len() <= 30 {
            return bad(format!("only {} pins fit the footprint", pins.len()));
        }
        if 2.0 * self.marker_radius >= self.pin_spacing * self.pixels_per_mm() * 0.8 {
            return bad("marker discs at rest would overlap".into());
        }
        Ok(())
    }
}

/// Parameters of the quasi-static skin model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContactModel {
    /// Fraction of the tangential sensor motion transferred to stuck skin.
    pub stick_coefficient: f64,
    /// Decay length of shear transfer away from the contact centroid, mm.
    pub shear_decay_length: f64,
    /// Decay length of the membrane coupling onto non-contacting pins, mm.
    pub membrane_length: f64,
    /// Largest labelled depth magnitude the sensor accepts, mm.
    pub compliance_limit: f64,
    /// Largest pin penetration accepted for arbitrary contact transforms, mm.
    pub penetration_limit: f64,
}

impl Default for ContactModel {
    fn default() -> Self {
        Self {
            stick_coefficient: 0.7,
            shear_decay_length: 10.0,
            membrane_length: 3.0,
            compliance_limit: 6.0,
            penetration_limit: 9.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub geometry: SensorGeometry,
    pub contact: ContactModel,
}

impl SimConfig {
    pub fn small() -> Self {
        Self {
            geometry: SensorGeometry::default().with_image_size(64),
            contact: ContactModel::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let err = |reason: String| SimError::Config {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Skin state after a contact: positions in the sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PinState {
    pub rest: Vec<Vec3>,
    pub rest_normals: Vec<Vec3>,
    pub displaced: Vec<Vec3>,
    /// Outward skin normal at each displaced pin.
    pub normals: Vec<Vec3>,
    pub in_contact: Vec<bool>,
}

impl PinState {
    pub fn contact_count(&self) -> usize {
        self.in_contact.iter().filter(|&&c| c).count()
    }

    /// Marker positions as seen by the camera. A pin tip sits `pin_length`
    /// inside the skin along the skin normal; the camera is calibrated so
    /// that the undeformed tips image onto the rest lattice, so only the
    /// change of skin position and normal moves a marker.
    pub fn tips(&self, pin_length: f64) -> Vec<Vec3> {
        (0..self.rest.len())
            .map(|i| {
                let tilt = geom::sub(self.normals[i], self.rest_normals[i]);
                geom::sub(self.displaced[i], geom::scale(tilt, pin_length))
            })
            .collect()
    }
}

/// A configured sensor with its precomputed rest state.
#[derive(Debug, Clone)]
pub struct Simulator {
    config: SimConfig,
    rest: Vec<Vec3>,
    rest_normals: Vec<Vec3>,
    rest_image: TactileImage,
}

impl Simulator {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        config.geometry.validate()?;
        let m = &config.contact;
        if !(m.stick_coefficient >= 0.0 && m.shear_decay_length > 0.0 && m.membrane_length > 0.0)
        {
            return Err(SimError::Geometry("contact model coefficients out of range".into()));
        }
        let rest = config.geometry.pin_rest_positions();
        let rest_normals = rest.iter().map(|&p| config.geometry.dome_normal(p)).collect();
        let mut sim = Self {
            config,
            rest,
            rest_normals,
            rest_image: TactileImage::blank(1),
        };
        sim.rest_image = sim.render(&sim.rest_state());
        Ok(sim)
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn geometry(&self) -> &SensorGeometry {
        &self.config.geometry
    }

    pub fn pin_count(&self) -> usize {
        self.rest.len()
    }

    pub fn rest_state(&self) -> PinState {
        PinState {
            rest: self.rest.clone(),
            rest_normals: self.rest_normals.clone(),
            displaced: self.rest.clone(),
            normals: self.rest_normals.clone(),
            in_contact: vec![false; self.rest.len()],
        }
    }

    /// Image of the undeformed sensor.
    pub fn rest_image(&self) -> &TactileImage {
        &self.rest_image
    }

    /// Contact at a labelled pose after the sensor was first brought into
    /// contact at `pose - perturbation` and then moved to `pose`.
    pub fn contact(
        &self,
        object: &ContactObject,
        pose: &Pose,
        perturbation: &Perturbation,
    ) -> Result<PinState, SimError> {
        let depth = pose.full()[2];
        let limit = self.config.contact.compliance_limit;
        if depth.abs() > limit {
            return Err(SimError::BeyondCompliance { depth, limit });
        }
        let start = RigidTransform::from_components(pre_contact_components(pose, perturbation));
        self.contact_between(object, &start, &pose.to_transform())
    }

    /// Contact at the sensor-to-object transform `pose`, with shear memory
    /// of the motion from `start`.
    pub fn contact_between(
        &self,
        object: &ContactObject,
        start: &RigidTransform,
        pose: &RigidTransform,
    ) -> Result<PinState, SimError> {
        object.validate().map_err(SimError::Object)?;
        let model = &self.config.contact;
        let rot = pose.rotation();
        let to_sensor = |w: Vec3| geom::mat_t_vec(&rot, geom::sub(w, pose.translation));
        let n = self.rest.len();

        let mut state = self.rest_state();
        let mut max_penetration: f64 = 0.0;
        for i in 0..n {
            let w = pose.apply(self.rest[i]);
            let sd = object.signed_distance(w);
            if sd < 0.0 {
                max_penetration = max_penetration.max(-sd);
                let sp = object.project(w);
                state.in_contact[i] = true;
                state.displaced[i] = to_sensor(sp.point);
                state.normals[i] = geom::scale(geom::mat_t_vec(&rot, sp.normal), -1.0);
            }
        }
        if max_penetration > model.penetration_limit {
            return Err(SimError::BeyondCompliance {
                depth: -max_penetration,
                limit: model.penetration_limit,
            });
        }
        let contacts: Vec<usize> = (0..n).filter(|&i| state.in_contact[i]).collect();
        if contacts.is_empty() {
            return Ok(state);
        }

        // Stick shear: stuck skin follows the tangential motion of its pin.
        let centroid = geom::scale(
            contacts.iter().fold([0.0; 3], |acc, &i| geom::add(acc, self.rest[i])),
            1.0 / contacts.len() as f64,
        );
        for &i in &contacts {
            let motion_world = geom::sub(pose.apply(self.rest[i]), start.apply(self.rest[i]));
            let motion = geom::mat_t_vec(&rot, motion_world);
            let normal = state.normals[i];
            let tangential = geom::sub(motion, geom::scale(normal, geom::dot(motion, normal)));
            let r = geom::norm(geom::sub(self.rest[i], centroid));
            let gain = model.stick_coefficient * (-r / model.shear_decay_length).exp();
            let shifted = geom::add(state.displaced[i], geom::scale(tangential, gain));
            let w = pose.apply(shifted);
            state.displaced[i] = if object.signed_distance(w) < 0.0 {
                to_sensor(object.project(w).point)
            } else {
                shifted
            };
        }

        // Membrane coupling: free pins inherit a decaying share of the
        // displacement and skin tilt of nearby stuck pins.
        let mut free = Vec::new();
        for i in (0..n).filter(|&i| !state.in_contact[i]) {
            let mut wsum = 0.0;
            let mut dmin = f64::INFINITY;
            let mut disp = [0.0; 3];
            let mut tilt = [0.0; 3];
            for &j in &contacts {
                let d = geom::norm(geom::sub(self.rest[i], self.rest[j]));
                let k = (-d / model.membrane_length).exp();
                wsum += k;
                dmin = dmin.min(d);
                disp = geom::add(disp, geom::scale(geom::sub(state.displaced[j], self.rest[j]), k));
                tilt = geom::add(tilt, geom::scale(geom::sub(state.normals[j], state.rest_normals[j]), k));
            }
            let falloff = (-dmin / model.membrane_length).exp() / wsum;
            let p = geom::add(self.rest[i], geom::scale(disp, falloff));
            let nrm = geom::normalize(geom::add(self.rest_normals[i], geom::scale(tilt, falloff)))
                .unwrap_or(self.rest_normals[i]);
            free.push((i, p, nrm));
        }
        for (i, p, nrm) in free {
            let w = pose.apply(p);
            if object.signed_distance(w) < 0.0 {
                let sp = object.project(w);
                state.displaced[i] = to_sensor(sp.point);
                state.normals[i] = geom::scale(geom::mat_t_vec(&rot, sp.normal), -1.0);
            } else {
                state.displaced[i] = p;
                state.normals[i] = nrm;
            }
        }
        Ok(state)
    }

    /// Orthographic view along the sensor axis: one filled disc per pin tip.
    pub fn render(&self, pins: &PinState) -> TactileImage {
        let g = &self.config.geometry;
        let size = g.image_size;
        let scale = g.pixels_per_mm();
        let r = g.marker_radius;
        let r2 = r * r;
        let mut img = TactileImage::blank(size);
        for tip in pins.tips(g.pin_length) {
            let cx = (tip[0] + g.view_half_width) * scale - 0.5;
            let cy = (tip[1] + g.view_half_width) * scale - 0.5;
            let c0 = (cx - r).floor().max(0.0) as usize;
            let c1 = ((cx + r).ceil().max(0.0) as usize).min(size - 1);
            let r0 = (cy - r).floor().max(0.0) as usize;
            let r1 = ((cy + r).ceil().max(0.0) as usize).min(size - 1);
            for row in r0..=r1 {
                for col in c0..=c1 {
                    let dx = col as f64 - cx;
                    let dy = row as f64 - cy;
                    if dx * dx + dy * dy <= r2 {
                        img.set(row, col);
                    }
                }
            }
        }
        img
    }

    /// `render(contact(..))`.
    pub fn capture(
        &self,
        object: &ContactObject,
        pose: &Pose,
        perturbation: &Perturbation,
    ) -> Result<TactileImage, SimError> {
        Ok(self.render(&self.contact(object, pose, perturbation)?))
    }
}
