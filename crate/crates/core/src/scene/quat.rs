//! Small quaternion / 3-vector helpers (w,x,y,z convention, unit
//! quaternions represent rotations).

use crate::tensor::scalar::{sc, Scalar};

pub type Vec3<S> = [S; 3];
pub type Quat<S> = [S; 4];
pub type Mat3<S> = [[S; 3]; 3];

pub fn quat_normalize<S: Scalar>(q: Quat<S>) -> Quat<S> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

pub fn quat_norm<S: Scalar>(q: Quat<S>) -> S {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn quat_mul<S: Scalar>(a: Quat<S>, b: Quat<S>) -> Quat<S> {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub fn quat_to_mat<S: Scalar>(q: Quat<S>) -> Mat3<S> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let two = sc::<S>(2.0);
    let one = S::one();
    [
        [
            one - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            one - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            one - two * (x * x + y * y),
        ],
    ]
}

pub fn quat_from_axis_angle<S: Scalar>(axis_angle: Vec3<S>) -> Quat<S> {
    let angle = (axis_angle[0] * axis_angle[0]
        + axis_angle[1] * axis_angle[1]
        + axis_angle[2] * axis_angle[2])
        .sqrt();
    if angle < sc::<S>(1e-12) {
        // first-order expansion keeps tiny increments exact enough
        let half = sc::<S>(0.5);
        return quat_normalize([
            S::one(),
            axis_angle[0] * half,
            axis_angle[1] * half,
            axis_angle[2] * half,
        ]);
    }
    let half = angle * sc::<S>(0.5);
    let k = half.sin() / angle;
    [half.cos(), axis_angle[0] * k, axis_angle[1] * k, axis_angle[2] * k]
}

/// Spherical linear interpolation between unit quaternions.
pub fn quat_slerp<S: Scalar>(a: Quat<S>, b: Quat<S>, t: S) -> Quat<S> {
    let mut dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3];
    let mut b = b;
    if dot < S::zero() {
        for v in b.iter_mut() {
            *v = -*v;
        }
        dot = -dot;
    }
    if dot > sc::<S>(0.9995) {
        let mut out = [S::zero(); 4];
        for i in 0..4 {
            out[i] = a[i] + (b[i] - a[i]) * t;
        }
        return quat_normalize(out);
    }
    let theta = dot.min(S::one()).acos();
    let sin_theta = theta.sin();
    let wa = ((S::one() - t) * theta).sin() / sin_theta;
    let wb = (t * theta).sin() / sin_theta;
    let mut out = [S::zero(); 4];
    for i in 0..4 {
        out[i] = a[i] * wa + b[i] * wb;
    }
    quat_normalize(out)
}

pub fn mat_vec<S: Scalar>(m: &Mat3<S>, v: Vec3<S>) -> Vec3<S> {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Multiply by the transpose (inverse rotation for orthonormal matrices).
pub fn mat_tvec<S: Scalar>(m: &Mat3<S>, v: Vec3<S>) -> Vec3<S> {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn cross<S: Scalar>(a: Vec3<S>, b: Vec3<S>) -> Vec3<S> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn dot<S: Scalar>(a: Vec3<S>, b: Vec3<S>) -> S {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn normalize<S: Scalar>(v: Vec3<S>) -> Vec3<S> {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_roundtrip_via_matrix() {
        let q = quat_normalize([0.8f64, 0.1, -0.3, 0.5]);
        let m = quat_to_mat(q);
        let v = [0.3, -1.2, 2.0];
        let r = mat_vec(&m, v);
        let back = mat_tvec(&m, r);
        for i in 0..3 {
            assert!((back[i] - v[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn axis_angle_small_angle_matches_exact() {
        let w = [1e-4f64, -2e-4, 0.5e-4];
        let q = quat_from_axis_angle(w);
        let m = quat_to_mat(q);
        // R v = v + w x v to first order
        let v = [1.0, 2.0, 3.0];
        let rv = mat_vec(&m, v);
        let wxv = cross(w, v);
        for i in 0..3 {
            assert!((rv[i] - (v[i] + wxv[i])).abs() < 1e-7);
        }
    }

    #[test]
    fn slerp_endpoints() {
        let a = quat_normalize([1.0f64, 0.2, 0.0, 0.0]);
        let b = quat_normalize([0.7, 0.0, 0.7, 0.1]);
        let s0 = quat_slerp(a, b, 0.0);
        let s1 = quat_slerp(a, b, 1.0);
        for i in 0..4 {
            assert!((s0[i] - a[i]).abs() < 1e-12);
            assert!((s1[i] - b[i]).abs() < 1e-12);
        }
    }
}
