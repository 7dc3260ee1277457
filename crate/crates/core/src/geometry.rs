//! Small 3D vector type used for atomic coordinates, plus rigid motions.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use nalgebra::{Matrix3, Vector3};

/// A point or displacement in Ångström.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Coord3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Coord3 {
    pub const ZERO: Coord3 = Coord3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Coord3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Coord3) -> Coord3 {
        Coord3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn dist(self, o: Coord3) -> f64 {
        (self - o).norm()
    }

    /// Unit vector in the same direction; `None` for the zero vector.
    pub fn unit(self) -> Option<Coord3> {
        let n = self.norm();
        (n > 0.0).then(|| self * (1.0 / n))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub(crate) fn to_na(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub(crate) fn from_na(v: &Vector3<f64>) -> Self {
        Coord3::new(v[0], v[1], v[2])
    }
}

impl From<[f64; 3]> for Coord3 {
    fn from(a: [f64; 3]) -> Self {
        Coord3::new(a[0], a[1], a[2])
    }
}

impl Add for Coord3 {
    type Output = Coord3;
    fn add(self, o: Coord3) -> Coord3 {
        Coord3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Coord3 {
    fn add_assign(&mut self, o: Coord3) {
        *self = *self + o;
    }
}

impl Sub for Coord3 {
    type Output = Coord3;
    fn sub(self, o: Coord3) -> Coord3 {
        Coord3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Coord3 {
    type Output = Coord3;
    fn neg(self) -> Coord3 {
        Coord3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Coord3 {
    type Output = Coord3;
    fn mul(self, s: f64) -> Coord3 {
        Coord3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// A rotation followed by a translation: `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidMotion {
    pub rotation: [[f64; 3]; 3],
    pub translation: Coord3,
}

impl RigidMotion {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: Coord3::ZERO,
        }
    }

    /// Rotation from a (not necessarily normalized) quaternion `(w, x, y, z)`.
    pub fn from_quaternion(q: [f64; 4], translation: Coord3) -> Self {
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        let rotation = [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ];
        Self { rotation, translation }
    }

    /// Uniformly random rotation plus a translation with components in `[-span, span]`.
    pub fn random<R: rand::Rng + ?Sized>(rng: &mut R, span: f64) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let t = Coord3::new(
            rng.random_range(-span..=span),
            rng.random_range(-span..=span),
            rng.random_range(-span..=span),
        );
        Self::from_quaternion(q, t)
    }

    pub fn apply(&self, p: Coord3) -> Coord3 {
        let r = &self.rotation;
        Coord3::new(
            r[0][0] * p.x + r[0][1] * p.y + r[0][2] * p.z,
            r[1][0] * p.x + r[1][1] * p.y + r[1][2] * p.z,
            r[2][0] * p.x + r[2][1] * p.y + r[2][2] * p.z,
        ) + self.translation
    }

    pub fn rotate(&self, p: Coord3) -> Coord3 {
        self.apply(p) - self.translation
    }

    pub(crate) fn from_na(r: &Matrix3<f64>, t: Coord3) -> Self {
        Self {
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
            translation: t,
        }
    }
}

/// Angle in radians at `b` formed by `a-b-c`. `None` if either bond has zero length.
pub fn bond_angle(a: Coord3, b: Coord3, c: Coord3) -> Option<f64> {
    let u = (a - b).unit()?;
    let v = (c - b).unit()?;
    Some(u.dot(v).clamp(-1.0, 1.0).acos())
}

/// Signed dihedral of `p0-p1-p2-p3` in `(-pi, pi]`, right-handed atan2 convention.
/// `None` when three consecutive points are collinear.
pub fn dihedral(p0: Coord3, p1: Coord3, p2: Coord3, p3: Coord3) -> Option<f64> {
    let b1 = p1 - p0;
    let b2 = p2 - p1;
    let b3 = p3 - p2;
    let n1 = b1.cross(b2);
    let n2 = b2.cross(b3);
    let b2n = b2.norm();
    let scale = b1.norm() * b2n * b2n * b3.norm();
    if scale == 0.0 || n1.norm() <= 1e-12 * b1.norm() * b2n || n2.norm() <= 1e-12 * b2n * b3.norm()
    {
        return None;
    }
    let y = b1.dot(n2) * b2n;
    let x = n1.dot(n2);
    let a = y.atan2(x);
    Some(if a <= -std::f64::consts::PI { std::f64::consts::PI } else { a })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn quaternion_rotation_is_orthonormal() {
        let m = RigidMotion::from_quaternion([0.3, -1.2, 0.4, 2.0], Coord3::ZERO);
        let r = Matrix3::from_fn(|i, j| m.rotation[i][j]);
        let rrt = r * r.transpose();
        assert!((rrt - Matrix3::identity()).abs().max() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dihedral_planar_cases() {
        let trans = dihedral(
            Coord3::new(1.0, 1.0, 0.0),
            Coord3::new(0.0, 0.0, 0.0),
            Coord3::new(1.0, 0.0, 0.0),
            Coord3::new(0.0, -1.0, 0.0),
        )
        .unwrap();
        assert!((trans - PI).abs() < 1e-12);
        let cis = dihedral(
            Coord3::new(0.0, 1.0, 0.0),
            Coord3::new(0.0, 0.0, 0.0),
            Coord3::new(1.0, 0.0, 0.0),
            Coord3::new(1.0, 1.0, 0.0),
        )
        .unwrap();
        assert!(cis.abs() < 1e-12);
    }

    #[test]
    fn collinear_dihedral_is_none() {
        let d = dihedral(
            Coord3::new(0.0, 0.0, 0.0),
            Coord3::new(1.0, 0.0, 0.0),
            Coord3::new(2.0, 0.0, 0.0),
            Coord3::new(2.0, 1.0, 0.0),
        );
        assert!(d.is_none());
    }
}
