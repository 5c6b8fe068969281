//! Direction-of-arrival geometry in degrees.
//!
//! Azimuth is measured counter-clockwise from +x in the horizontal plane and
//! lies in `[-180, 180)`; elevation is measured up from the horizontal plane
//! and lies in `[-90, 90]`.

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub fn sph_to_cart(azimuth_deg: f64, elevation_deg: f64) -> Vec3 {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
}

/// Inverse of [`sph_to_cart`] for any nonzero vector. Azimuth is undefined at
/// the poles and reported as 0.
pub fn cart_to_sph(v: Vec3) -> (f64, f64) {
    let n = norm(v);
    if n == 0.0 {
        return (0.0, 0.0);
    }
    let horiz = v[0].hypot(v[1]);
    let el = v[2].atan2(horiz).to_degrees();
    let az = if horiz <= 1e-12 * n {
        0.0
    } else {
        wrap_azimuth(v[1].atan2(v[0]).to_degrees())
    };
    (az, el)
}

/// Maps any angle into `[-180, 180)`.
pub fn wrap_azimuth(deg: f64) -> f64 {
    let w = (deg + 180.0).rem_euclid(360.0) - 180.0;
    if w >= 180.0 {
        w - 360.0
    } else {
        w
    }
}

pub fn norm(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn normalize(v: Vec3) -> Option<Vec3> {
    let n = norm(v);
    (n > 0.0 && n.is_finite()).then(|| [v[0] / n, v[1] / n, v[2] / n])
}

/// Great-circle angle between two directions in degrees, `[0, 180]`.
/// Inputs are normalized first; zero vectors are rejected.
pub fn angular_distance(a: Vec3, b: Vec3) -> Result<f64> {
    let a = normalize(a).ok_or_else(|| Error::InvalidArgument("zero-length DOA vector".into()))?;
    let b = normalize(b).ok_or_else(|| Error::InvalidArgument("zero-length DOA vector".into()))?;
    // atan2 of |a x b| and a.b keeps precision near 0 and 180 degrees.
    Ok(norm(cross(a, b)).atan2(dot(a, b)).to_degrees())
}
