//! Compensated (Neumaier) accumulation.
//!
//! Particle sums are always reduced in a fixed source order, one accumulator per
//! target, so results do not depend on how targets are split across workers.

use crate::geom::Vec2;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum<T> {
    sum: T,
    carry: T,
}

impl<T: Real> CompensatedSum<T> {
    pub fn new() -> Self {
        CompensatedSum {
            sum: T::zero(),
            carry: T::zero(),
        }
    }

    #[inline]
    pub fn add(&mut self, x: T) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> T {
        self.sum + self.carry
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum2<T> {
    z: CompensatedSum<T>,
    r: CompensatedSum<T>,
}

impl<T: Real> CompensatedSum2<T> {
    pub fn new() -> Self {
        CompensatedSum2 {
            z: CompensatedSum::new(),
            r: CompensatedSum::new(),
        }
    }

    #[inline]
    pub fn add(&mut self, v: Vec2<T>) {
        self.z.add(v.z);
        self.r.add(v.r);
    }

    #[inline]
    pub fn value(&self) -> Vec2<T> {
        Vec2::new(self.z.value(), self.r.value())
    }
}

/// Compensated sum of an iterator.
pub fn sum<T: Real, I: IntoIterator<Item = T>>(items: I) -> T {
    let mut acc = CompensatedSum::new();
    for x in items {
        acc.add(x);
    }
    acc.value()
}
