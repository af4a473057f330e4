//! Points and vectors of the meridian half-plane.
//!
//! Coordinates are ordered `(z, r)`: `e_z = (1, 0)`, `e_r = (0, 1)`, and the
//! rotation by +π/2 is `a⊥ = (-a_r, a_z)`. Every formula in the crate is
//! written against this convention.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// A 2-vector in `(z, r)` coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[T; 2]", into = "[T; 2]")]
pub struct Vec2<T: Copy> {
    pub z: T,
    pub r: T,
}

/// A point `x = (x_z, x_r)` of the half-plane. Kernels require `r > 0`.
pub type HalfPlanePoint<T> = Vec2<T>;

impl<T: Copy> From<[T; 2]> for Vec2<T> {
    fn from(a: [T; 2]) -> Self {
        Vec2 { z: a[0], r: a[1] }
    }
}

impl<T: Copy> From<Vec2<T>> for [T; 2] {
    fn from(v: Vec2<T>) -> Self {
        [v.z, v.r]
    }
}

impl<T: Real> Vec2<T> {
    #[inline]
    pub fn new(z: T, r: T) -> Self {
        Vec2 { z, r }
    }

    #[inline]
    pub fn zero() -> Self {
        Vec2 {
            z: T::zero(),
            r: T::zero(),
        }
    }

    /// Unit axial vector `e_z`.
    #[inline]
    pub fn e_z() -> Self {
        Vec2::new(T::one(), T::zero())
    }

    /// Unit radial vector `e_r`.
    #[inline]
    pub fn e_r() -> Self {
        Vec2::new(T::zero(), T::one())
    }

    /// `a⊥ = (-a_r, a_z)`.
    #[inline]
    pub fn perp(self) -> Self {
        Vec2::new(-self.r, self.z)
    }

    #[inline]
    pub fn dot(self, other: Self) -> T {
        self.z * other.z + self.r * other.r
    }

    #[inline]
    pub fn norm_sq(self) -> T {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> T {
        self.z.hypot(self.r)
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.z.is_finite() && self.r.is_finite()
    }

    pub fn cast<U: Real>(self) -> Vec2<U> {
        Vec2::new(U::lit(self.z.to_f64_lossy()), U::lit(self.r.to_f64_lossy()))
    }
}

impl<T: Real> Add for Vec2<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Vec2::new(self.z + o.z, self.r + o.r)
    }
}

impl<T: Real> AddAssign for Vec2<T> {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        self.z += o.z;
        self.r += o.r;
    }
}

impl<T: Real> Sub for Vec2<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Vec2::new(self.z - o.z, self.r - o.r)
    }
}

impl<T: Real> SubAssign for Vec2<T> {
    #[inline]
    fn sub_assign(&mut self, o: Self) {
        self.z -= o.z;
        self.r -= o.r;
    }
}

impl<T: Real> Neg for Vec2<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Vec2::new(-self.z, -self.r)
    }
}

impl<T: Real> Mul<T> for Vec2<T> {
    type Output = Self;
    #[inline]
    fn mul(self, s: T) -> Self {
        Vec2::new(self.z * s, self.r * s)
    }
}

impl<T: Real> Div<T> for Vec2<T> {
    type Output = Self;
    #[inline]
    fn div(self, s: T) -> Self {
        Vec2::new(self.z / s, self.r / s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perp_is_counterclockwise_rotation() {
        let a = Vec2::new(1.0_f64, 0.0);
        assert_eq!(a.perp(), Vec2::new(0.0, 1.0));
        assert_eq!(Vec2::<f64>::e_r().perp(), -Vec2::e_z());
        let b = Vec2::new(0.3_f64, -1.7);
        assert_eq!(b.perp().dot(b), 0.0);
    }

    #[test]
    fn serializes_as_pair() {
        let v = Vec2::new(0.0_f64, 1.2);
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(s, "[0.0,1.2]");
        let back: Vec2<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
    }
}
