//! Small fixed-size vector and matrix helpers used by the pose, simulator and
//! servo code. Angles here are radians.

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Unit vector along `a`, or `None` for a (numerically) zero vector.
pub fn normalize(a: Vec3) -> Option<Vec3> {
    let n = norm(a);
    if n > 1e-300 && n.is_finite() {
        Some(scale(a, 1.0 / n))
    } else {
        None
    }
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[j][i] = *v;
        }
    }
    out
}

pub fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

pub fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Rotation `Rx(roll) * Ry(pitch) * Rz(yaw)`: roll about x, then pitch about
/// the rotated y, then yaw about the rotated z.
pub fn euler_to_matrix(roll: f64, pitch: f64, yaw: f64) -> Mat3 {
    mat_mul(&mat_mul(&rot_x(roll), &rot_y(pitch)), &rot_z(yaw))
}

/// Inverse of [`euler_to_matrix`]; pitch is returned in [-pi/2, pi/2].
pub fn matrix_to_euler(m: &Mat3) -> (f64, f64, f64) {
    let pitch = m[0][2].clamp(-1.0, 1.0).asin();
    let roll = (-m[1][2]).atan2(m[2][2]);
    let yaw = (-m[0][1]).atan2(m[0][0]);
    (roll, pitch, yaw)
}

/// Rodrigues formula for a unit axis.
pub fn axis_angle_to_matrix(axis: Vec3, angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    let [x, y, z] = axis;
    [
        [c + t * x * x, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, c + t * y * y, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, c + t * z * z],
    ]
}

/// Axis and angle (radians, in [0, pi]) of a rotation matrix. The axis of
/// the identity rotation is reported as +z.
pub fn matrix_to_axis_angle(m: &Mat3) -> (Vec3, f64) {
    let v = [m[2][1] - m[1][2], m[0][2] - m[2][0], m[1][0] - m[0][1]];
    let sin2 = norm(v);
    let cos2 = m[0][0] + m[1][1] + m[2][2] - 1.0;
    let angle = sin2.atan2(cos2);
    if angle < 1e-15 {
        return ([0.0, 0.0, 1.0], 0.0);
    }
    if cos2 > -1.8 {
        return (scale(v, 1.0 / sin2), angle);
    }
    // Near pi the antisymmetric part vanishes; read the axis off the
    // symmetric part instead.
    let c = cos2 / 2.0;
    let denom = 1.0 - c;
    let mut nn = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let s = 0.5 * (m[i][j] + m[j][i]);
            nn[i][j] = (s - if i == j { c } else { 0.0 }) / denom;
        }
    }
    let k = (0..3)
        .max_by(|&a, &b| nn[a][a].total_cmp(&nn[b][b]))
        .unwrap_or(2);
    let mut axis = normalize(nn[k]).unwrap_or([0.0, 0.0, 1.0]);
    if dot(axis, v) < 0.0 {
        axis = scale(axis, -1.0);
    }
    (axis, angle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs_diff(a: &Mat3, b: &Mat3) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                m = m.max((a[i][j] - b[i][j]).abs());
            }
        }
        m
    }

    #[test]
    fn euler_round_trip() {
        let (r, p, y) = (0.3, -0.2, 1.1);
        let m = euler_to_matrix(r, p, y);
        let (r2, p2, y2) = matrix_to_euler(&m);
        assert!((r - r2).abs() < 1e-12 && (p - p2).abs() < 1e-12 && (y - y2).abs() < 1e-12);
    }

    #[test]
    fn axis_angle_near_pi() {
        let axis = normalize([0.2, -0.7, 0.4]).unwrap();
        for angle in [3.0, 3.1, 3.14159, std::f64::consts::PI - 1e-9] {
            let m = axis_angle_to_matrix(axis, angle);
            let (a2, t2) = matrix_to_axis_angle(&m);
            let m2 = axis_angle_to_matrix(a2, t2);
            assert!(max_abs_diff(&m, &m2) < 1e-9, "angle {angle}");
        }
    }
}
