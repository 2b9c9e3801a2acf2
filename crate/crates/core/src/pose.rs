//! Contact poses, unlabelled shear perturbations and rigid transforms.
//!
//! Translations are in millimetres and angles in degrees everywhere outside
//! of trigonometric calls. Orientation follows the roll (x), pitch (y),
//! yaw (z) intrinsic order: `R = Rx(roll) * Ry(pitch) * Rz(yaw)`.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, Mat3, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseError {
    #[error("pose ranges are missing component `{0}`")]
    MissingComponent(Component),
    #[error("pose ranges contain component `{0}` which is not a {1} label")]
    UnexpectedComponent(Component, ObjectType),
    #[error("interval for `{component}` has lower bound {lo} above upper bound {hi}")]
    InvertedInterval { component: Component, lo: f64, hi: f64 },
    #[error("component `{0}` has a zero maximum bound; its loss weight is undefined")]
    ZeroBound(Component),
    #[error("unknown pose component `{0}`")]
    UnknownComponent(String),
    #[error("expected {expected} label values, got {got}")]
    LabelLength { expected: usize, got: usize },
}

/// One of the six rigid-body pose components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    X,
    Y,
    Depth,
    Roll,
    Pitch,
    Yaw,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::X,
        Component::Y,
        Component::Depth,
        Component::Roll,
        Component::Pitch,
        Component::Yaw,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::X => "x",
            Component::Y => "y",
            Component::Depth => "depth",
            Component::Roll => "roll",
            Component::Pitch => "pitch",
            Component::Yaw => "yaw",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Component::X | Component::Y | Component::Depth => "mm",
            _ => "deg",
        }
    }

    pub fn is_angle(self) -> bool {
        matches!(self, Component::Roll | Component::Pitch | Component::Yaw)
    }

    pub fn parse(s: &str) -> Result<Self, PoseError> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| PoseError::UnknownComponent(s.to_string()))
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which contact geometry a pose label refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectType {
    Surface,
    Edge,
}

impl ObjectType {
    /// Labelled components, in label-vector order.
    pub fn components(self) -> &'static [Component] {
        match self {
            ObjectType::Surface => &[Component::Depth, Component::Roll, Component::Pitch],
            ObjectType::Edge => &[
                Component::X,
                Component::Depth,
                Component::Roll,
                Component::Pitch,
                Component::Yaw,
            ],
        }
    }

    pub fn n_out(self) -> usize {
        self.components().len()
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectType::Surface => "surface",
            ObjectType::Edge => "edge",
        }
    }
}

impl fmt::Display for ObjectType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ObjectType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "surface" => Ok(ObjectType::Surface),
            "edge" => Ok(ObjectType::Edge),
            other => Err(format!("unknown object type `{other}` (expected surface or edge)")),
        }
    }
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn max_abs(&self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // Draw unconditionally so zero-width intervals consume the same
        // randomness as wide ones.
        let u: f64 = rng.gen();
        self.lo + (self.hi - self.lo) * u
    }
}

/// Per-component closed intervals; absent components are not sampled.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, [f64; 2]>", into = "BTreeMap<String, [f64; 2]>")]
pub struct PoseRanges {
    intervals: [Option<Interval>; 6],
}

impl PoseRanges {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, component: Component, lo: f64, hi: f64) -> Self {
        self.intervals[component.index()] = Some(Interval::new(lo, hi));
        self
    }

    pub fn get(&self, component: Component) -> Option<Interval> {
        self.intervals[component.index()]
    }

    pub fn components(&self) -> impl Iterator<Item = (Component, Interval)> + '_ {
        Component::ALL
            .into_iter()
            .filter_map(|c| self.get(c).map(|i| (c, i)))
    }

    /// Labelled 3D surface ranges: depth [-5,-1] mm, roll and pitch [-15,15] deg.
    pub fn surface_labels() -> Self {
        Self::new()
            .with(Component::Depth, -5.0, -1.0)
            .with(Component::Roll, -15.0, 15.0)
            .with(Component::Pitch, -15.0, 15.0)
    }

    /// Labelled 3D edge ranges: surface ranges plus x [-5,5] mm and yaw [-45,45] deg.
    pub fn edge_labels() -> Self {
        Self::surface_labels()
            .with(Component::X, -5.0, 5.0)
            .with(Component::Yaw, -45.0, 45.0)
    }

    pub fn labels(object: ObjectType) -> Self {
        match object {
            ObjectType::Surface => Self::surface_labels(),
            ObjectType::Edge => Self::edge_labels(),
        }
    }

    /// Unlabelled shear perturbation ranges: 5 mm / 5 deg in every component
    /// except depth, which is held at zero.
    pub fn perturbation() -> Self {
        Self::new()
            .with(Component::X, -5.0, 5.0)
            .with(Component::Y, -5.0, 5.0)
            .with(Component::Depth, 0.0, 0.0)
            .with(Component::Roll, -5.0, 5.0)
            .with(Component::Pitch, -5.0, 5.0)
            .with(Component::Yaw, -5.0, 5.0)
    }

    /// All six components pinned at zero.
    pub fn zero() -> Self {
        Component::ALL
            .into_iter()
            .fold(Self::new(), |r, c| r.with(c, 0.0, 0.0))
    }

    fn check_ordered(&self) -> Result<(), PoseError> {
        for (component, iv) in self.components() {
            if !(iv.lo <= iv.hi) {
                return Err(PoseError::InvertedInterval {
                    component,
                    lo: iv.lo,
                    hi: iv.hi,
                });
            }
        }
        Ok(())
    }

    /// Label ranges must contain exactly the components of `object`.
    pub fn validate_labels(&self, object: ObjectType) -> Result<(), PoseError> {
        self.check_ordered()?;
        let wanted = object.components();
        for &c in wanted {
            if self.get(c).is_none() {
                return Err(PoseError::MissingComponent(c));
            }
        }
        for (c, _) in self.components() {
            if !wanted.contains(&c) {
                return Err(PoseError::UnexpectedComponent(c, object));
            }
        }
        Ok(())
    }

    pub fn validate_perturbation(&self) -> Result<(), PoseError> {
        self.check_ordered()?;
        for c in Component::ALL {
            if self.get(c).is_none() {
                return Err(PoseError::MissingComponent(c));
            }
        }
        Ok(())
    }

    /// Largest absolute bound of each labelled component.
    pub fn label_scales(&self, object: ObjectType) -> Result<Vec<f64>, PoseError> {
        self.validate_labels(object)?;
        object
            .components()
            .iter()
            .map(|&c| {
                let m = self.get(c).map(|i| i.max_abs()).unwrap_or(0.0);
                if m > 0.0 {
                    Ok(m)
                } else {
                    Err(PoseError::ZeroBound(c))
                }
            })
            .collect()
    }
}

impl TryFrom<BTreeMap<String, [f64; 2]>> for PoseRanges {
    type Error = PoseError;

    fn try_from(map: BTreeMap<String, [f64; 2]>) -> Result<Self, Self::Error> {
        let mut out = PoseRanges::new();
        for (name, [lo, hi]) in map {
            out = out.with(Component::parse(&name)?, lo, hi);
        }
        out.check_ordered()?;
        Ok(out)
    }
}

impl From<PoseRanges> for BTreeMap<String, [f64; 2]> {
    fn from(r: PoseRanges) -> Self {
        r.components()
            .map(|(c, i)| (c.name().to_string(), [i.lo, i.hi]))
            .collect()
    }
}

/// Pose of the sensor relative to a flat surface.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SurfacePose {
    pub depth: f64,
    pub roll: f64,
    pub pitch: f64,
}

/// Pose of the sensor relative to a straight edge.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EdgePose {
    pub x_horizontal: f64,
    pub depth: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

/// A labelled contact pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "object", rename_all = "snake_case")]
pub enum Pose {
    Surface(SurfacePose),
    Edge(EdgePose),
}

impl Pose {
    pub fn object_type(&self) -> ObjectType {
        match self {
            Pose::Surface(_) => ObjectType::Surface,
            Pose::Edge(_) => ObjectType::Edge,
        }
    }

    /// Label vector in [`ObjectType::components`] order.
    pub fn to_vec(&self) -> Vec<f64> {
        match *self {
            Pose::Surface(p) => vec![p.depth, p.roll, p.pitch],
            Pose::Edge(p) => vec![p.x_horizontal, p.depth, p.roll, p.pitch, p.yaw],
        }
    }

    pub fn from_slice(object: ObjectType, v: &[f64]) -> Result<Self, PoseError> {
        if v.len() != object.n_out() {
            return Err(PoseError::LabelLength {
                expected: object.n_out(),
                got: v.len(),
            });
        }
        Ok(match object {
            ObjectType::Surface => Pose::Surface(SurfacePose {
                depth: v[0],
                roll: v[1],
                pitch: v[2],
            }),
            ObjectType::Edge => Pose::Edge(EdgePose {
                x_horizontal: v[0],
                depth: v[1],
                roll: v[2],
                pitch: v[3],
                yaw: v[4],
            }),
        })
    }

    /// All six components `[x, y, depth, roll, pitch, yaw]`, zero where unlabelled.
    pub fn full(&self) -> [f64; 6] {
        match *self {
            Pose::Surface(p) => [0.0, 0.0, p.depth, p.roll, p.pitch, 0.0],
            Pose::Edge(p) => [p.x_horizontal, 0.0, p.depth, p.roll, p.pitch, p.yaw],
        }
    }

    pub fn get(&self, c: Component) -> f64 {
        self.full()[c.index()]
    }

    /// Sensor-to-object transform for this pose.
    pub fn to_transform(&self) -> RigidTransform {
        RigidTransform::from_components(self.full())
    }
}

/// Unlabelled shear motion applied before the image is captured.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Perturbation {
    pub dx: f64,
    pub dy: f64,
    pub d_depth: f64,
    pub d_roll: f64,
    pub d_pitch: f64,
    pub d_yaw: f64,
}

impl Perturbation {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.dx, self.dy, self.d_depth, self.d_roll, self.d_pitch, self.d_yaw]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            dx: a[0],
            dy: a[1],
            d_depth: a[2],
            d_roll: a[3],
            d_pitch: a[4],
            d_yaw: a[5],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.to_array().iter().all(|v| *v == 0.0)
    }
}

/// Draw a labelled pose with every component independently uniform over its
/// interval.
pub fn sample_pose<R: Rng + ?Sized>(
    object: ObjectType,
    ranges: &PoseRanges,
    rng: &mut R,
) -> Result<Pose, PoseError> {
    ranges.validate_labels(object)?;
    let values: Vec<f64> = object
        .components()
        .iter()
        .map(|&c| ranges.get(c).expect("validated").sample(rng))
        .collect();
    Pose::from_slice(object, &values)
}

/// Draw a perturbation. Depth is forced to zero whatever the depth interval says.
pub fn sample_perturbation<R: Rng + ?Sized>(
    ranges: &PoseRanges,
    rng: &mut R,
) -> Result<Perturbation, PoseError> {
    ranges.validate_perturbation()?;
    let mut a = [0.0; 6];
    for c in Component::ALL {
        let v = ranges.get(c).expect("validated").sample(rng);
        if c != Component::Depth {
            a[c.index()] = v;
        }
    }
    Ok(Perturbation::from_array(a))
}

/// Per-component loss weights `1 / max|bound|^2` in label order.
pub fn loss_weights(object: ObjectType, ranges: &PoseRanges) -> Result<Vec<f64>, PoseError> {
    Ok(ranges
        .label_scales(object)?
        .into_iter()
        .map(|m| 1.0 / (m * m))
        .collect())
}

/// Rigid transform `p -> R p + t` with the rotation stored as axis-angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    /// Translation in mm.
    pub translation: Vec3,
    /// Unit rotation axis; `(0, 0, 1)` when the angle is zero.
    pub axis: Vec3,
    /// Rotation angle in degrees, in [0, 180].
    pub angle: f64,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            translation: [0.0; 3],
            axis: [0.0, 0.0, 1.0],
            angle: 0.0,
        }
    }

    /// Build from an axis (any nonzero length) and angle in degrees.
    pub fn from_axis_angle(translation: Vec3, axis: Vec3, angle_deg: f64) -> Self {
        match geom::normalize(axis) {
            Some(n) if angle_deg != 0.0 => {
                let m = geom::axis_angle_to_matrix(n, angle_deg.to_radians());
                Self::from_matrix(translation, &m)
            }
            _ => Self {
                translation,
                ..Self::identity()
            },
        }
    }

    pub fn from_matrix(translation: Vec3, rotation: &Mat3) -> Self {
        let (axis, angle) = geom::matrix_to_axis_angle(rotation);
        Self {
            translation,
            axis,
            angle: angle.to_degrees(),
        }
    }

    /// From `[x, y, z, roll, pitch, yaw]` (mm, deg).
    pub fn from_components(c: [f64; 6]) -> Self {
        let m = geom::euler_to_matrix(c[3].to_radians(), c[4].to_radians(), c[5].to_radians());
        Self::from_matrix([c[0], c[1], c[2]], &m)
    }

    /// `[x, y, z, roll, pitch, yaw]` (mm, deg).
    pub fn to_components(&self) -> [f64; 6] {
        let (r, p, y) = geom::matrix_to_euler(&self.rotation());
        let t = self.translation;
        [t[0], t[1], t[2], r.to_degrees(), p.to_degrees(), y.to_degrees()]
    }

    pub fn rotation(&self) -> Mat3 {
        if self.angle == 0.0 {
            geom::IDENTITY3
        } else {
            geom::axis_angle_to_matrix(self.axis, self.angle.to_radians())
        }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        geom::add(geom::mat_vec(&self.rotation(), p), self.translation)
    }

    pub fn apply_vector(&self, v: Vec3) -> Vec3 {
        geom::mat_vec(&self.rotation(), v)
    }

    pub fn inverse(&self) -> Self {
        let rt = geom::transpose(&self.rotation());
        let t = geom::scale(geom::mat_vec(&rt, self.translation), -1.0);
        Self::from_matrix(t, &rt)
    }

    /// `self ∘ delta`: apply `delta` first, then `self`. When `self` is a
    /// sensor pose, `delta` is a motion expressed in the sensor frame.
    pub fn compose(&self, delta: &RigidTransform) -> Self {
        let r1 = self.rotation();
        let r = geom::mat_mul(&r1, &delta.rotation());
        let t = geom::add(geom::mat_vec(&r1, delta.translation), self.translation);
        Self::from_matrix(t, &r)
    }

    /// 4x4 homogeneous matrix, row major.
    pub fn to_homogeneous(&self) -> [[f64; 4]; 4] {
        let r = self.rotation();
        let t = self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    /// Largest translation difference (mm) and rotation difference (deg)
    /// between two transforms.
    pub fn distance(&self, other: &RigidTransform) -> (f64, f64) {
        let dt = geom::norm(geom::sub(self.translation, other.translation));
        let rel = geom::mat_mul(&geom::transpose(&self.rotation()), &other.rotation());
        let (_, angle) = geom::matrix_to_axis_angle(&rel);
        (dt, angle.to_degrees())
    }
}

/// Pose minus perturbation, component-wise over `[x, y, depth, roll, pitch, yaw]`.
pub fn pre_contact_components(pose: &Pose, perturbation: &Perturbation) -> [f64; 6] {
    let mut c = pose.full();
    for (v, d) in c.iter_mut().zip(perturbation.to_array()) {
        *v -= d;
    }
    c
}
