//! Adaptive Gauss–Kronrod (7/15) quadrature with user breakpoints.

use thiserror::Error;

use crate::scalar::Real;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
// Gauss weights for the odd-indexed Kronrod nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuadratureError {
    #[error("quadrature did not converge: achieved error {achieved:e} > requested {requested:e} after {intervals} intervals")]
    NotConverged {
        value: f64,
        achieved: f64,
        requested: f64,
        intervals: usize,
    },
    #[error("integrand returned a non-finite value at {at}")]
    NonFinite { at: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct QuadOptions<T> {
    pub rel_tol: T,
    pub abs_tol: T,
    pub max_intervals: usize,
}

impl<T: Real> QuadOptions<T> {
    pub fn relative(rel_tol: T) -> Self {
        QuadOptions {
            rel_tol,
            abs_tol: T::zero(),
            max_intervals: 4000,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Quad<T> {
    pub value: T,
    pub error: T,
    pub intervals: usize,
}

struct Segment<T> {
    a: T,
    b: T,
    value: T,
    error: T,
}

fn kronrod<T: Real, F: Fn(T) -> T>(f: &F, a: T, b: T) -> Result<Segment<T>, QuadratureError> {
    let center = (a + b) * T::half();
    let half = (b - a) * T::half();
    let mut res_k = T::zero();
    let mut res_g = T::zero();
    for (j, (&x, &w)) in XGK.iter().zip(WGK.iter()).enumerate() {
        let dx = half * T::lit(x);
        let (f1, f2) = if j == 7 {
            let fc = f(center);
            (fc, T::zero())
        } else {
            (f(center - dx), f(center + dx))
        };
        if !f1.is_finite() || !f2.is_finite() {
            return Err(QuadratureError::NonFinite {
                at: center.to_f64_lossy(),
            });
        }
        res_k += T::lit(w) * (f1 + f2);
        if j % 2 == 1 {
            res_g += T::lit(WG[j / 2]) * (f1 + f2);
        }
    }
    let value = res_k * half;
    let error = ((res_k - res_g) * half).abs();
    Ok(Segment { a, b, value, error })
}

/// Integrates `f` over `[points[0], points[last]]`, seeding the subdivision with
/// every interior breakpoint. Refines the interval with the largest error estimate
/// until the total estimate is below `max(abs_tol, rel_tol·|value|)`.
pub fn integrate<T: Real, F: Fn(T) -> T>(f: F, points: &[T], opts: QuadOptions<T>) -> Result<Quad<T>, QuadratureError> {
    assert!(points.len() >= 2, "need at least the two endpoints");
    let mut segs = Vec::with_capacity(points.len() + 64);
    for w in points.windows(2) {
        if w[1] > w[0] {
            segs.push(kronrod(&f, w[0], w[1])?);
        }
    }
    let total = |segs: &[Segment<T>]| -> (T, T) {
        let mut v = crate::summation::CompensatedSum::new();
        let mut e = T::zero();
        for s in segs {
            v.add(s.value);
            e += s.error;
        }
        (v.value(), e)
    };
    loop {
        let (value, error) = total(&segs);
        let target = opts.abs_tol.max(opts.rel_tol * value.abs());
        if error <= target {
            return Ok(Quad {
                value,
                error,
                intervals: segs.len(),
            });
        }
        let (worst, _) =
            segs.iter().enumerate().fold(
                (0, T::neg_infinity()),
                |acc, (i, s)| {
                    if s.error > acc.1 {
                        (i, s.error)
                    } else {
                        acc
                    }
                },
            );
        let s = segs.swap_remove(worst);
        let mid = (s.a + s.b) * T::half();
        // Interval cannot be split further in this precision.
        if segs.len() + 2 > opts.max_intervals || mid <= s.a || mid >= s.b {
            segs.push(s);
            let (value, error) = total(&segs);
            return Err(QuadratureError::NotConverged {
                value: value.to_f64_lossy(),
                achieved: error.to_f64_lossy(),
                requested: target.to_f64_lossy(),
                intervals: segs.len(),
            });
        }
        segs.push(kronrod(&f, s.a, mid)?);
        segs.push(kronrod(&f, mid, s.b)?);
    }
}
