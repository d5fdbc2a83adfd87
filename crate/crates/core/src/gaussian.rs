//! Scalar and bivariate standard normal distribution functions.
//!
//! Infinite bounds are accepted everywhere: any argument with magnitude at or
//! above [`INFINITE_BOUND`] is treated as ±∞ and short-circuited analytically.
//! Half-infinite Voronoi cells at the edges of a grid rely on this.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};

/// Magnitude from which a bound is considered infinite.
pub const INFINITE_BOUND: f64 = 1e300;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const SQRT_2PI: f64 = 2.506_628_274_631_000_2;

#[inline]
fn is_pos_inf(x: f64) -> bool {
    x >= INFINITE_BOUND
}

#[inline]
fn is_neg_inf(x: f64) -> bool {
    x <= -INFINITE_BOUND
}

/// Standard normal density.
#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    if x.abs() >= INFINITE_BOUND {
        return 0.0;
    }
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal cumulative distribution function.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    if is_pos_inf(x) {
        1.0
    } else if is_neg_inf(x) {
        0.0
    } else {
        0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
    }
}

/// Inverse of [`norm_cdf`] on the open unit interval.
///
/// Rational initial guess (Acklam) polished by one Halley step on the exact
/// cdf.
pub fn norm_inv_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!(
            "inverse normal cdf needs 0 < p < 1, got {p}"
        )));
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;

    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let mut x = if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    };

    // Halley refinement; the residual is taken on the smaller tail to keep
    // relative precision.
    for _ in 0..2 {
        let e = if x <= 0.0 {
            norm_cdf(x) - p
        } else {
            (1.0 - p) - norm_cdf(-x)
        };
        let u = e * SQRT_2PI * (0.5 * x * x).exp();
        if !u.is_finite() {
            break;
        }
        x -= u / (1.0 + 0.5 * x * u);
    }
    Ok(x)
}

/// Mass and first two partial moments of N(0,1) restricted to `[a, b]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartialMoments {
    /// `P(a < Z < b)`
    pub m0: f64,
    /// `E[Z; a < Z < b]`
    pub m1: f64,
    /// `E[Z^2; a < Z < b]`
    pub m2: f64,
}

/// Probability that a standard normal falls in `(a, b)`, computed on the
/// tail that avoids cancellation.
#[inline]
pub fn norm_interval_mass(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        norm_cdf(-a) - norm_cdf(-b)
    } else {
        norm_cdf(b) - norm_cdf(a)
    }
}

pub fn partial_moments(a: f64, b: f64) -> PartialMoments {
    let (pa, pb) = (norm_pdf(a), norm_pdf(b));
    let m0 = norm_interval_mass(a, b);
    let m1 = pa - pb;
    let a_pa = if a.abs() >= INFINITE_BOUND {
        0.0
    } else {
        a * pa
    };
    let b_pb = if b.abs() >= INFINITE_BOUND {
        0.0
    } else {
        b * pb
    };
    PartialMoments {
        m0,
        m1,
        m2: m0 + a_pa - b_pb,
    }
}

/// Mass of a Voronoi-type cell of N(0,1) and its conditional mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellMoments {
    pub mass: f64,
    /// `None` when the mass underflows below `1e-300`.
    pub centroid: Option<f64>,
}

pub const EMPTY_CELL_MASS: f64 = 1e-300;

pub fn gauss_cell_moments(a: f64, b: f64) -> CellMoments {
    let pm = partial_moments(a, b);
    let centroid = (pm.m0 >= EMPTY_CELL_MASS).then(|| pm.m1 / pm.m0);
    CellMoments {
        mass: pm.m0,
        centroid,
    }
}

/// Like [`gauss_cell_moments`] but treating an underflowing cell as an error.
pub fn gauss_cell_centroid(a: f64, b: f64) -> Result<(f64, f64)> {
    let cm = gauss_cell_moments(a, b);
    match cm.centroid {
        Some(c) => Ok((cm.mass, c)),
        None => Err(Error::EmptyCell { lower: a, upper: b }),
    }
}

/// Validated correlation coefficient in `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Correlation(f64);

impl Correlation {
    pub fn new(rho: f64) -> Result<Self> {
        if rho.is_nan() || rho.abs() > 1.0 {
            return Err(Error::Domain(format!("correlation {rho} outside [-1, 1]")));
        }
        Ok(Self(rho))
    }

    pub const ZERO: Correlation = Correlation(0.0);

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }
}

// Gauss-Legendre half-rules (nodes on [-1, 0), weights) with 6, 12 and 20
// points.
const GL6_X: [f64; 3] = [
    -0.932_469_514_203_152_2,
    -0.661_209_386_466_264_7,
    -0.238_619_186_083_197,
];
const GL6_W: [f64; 3] = [
    0.171_324_492_379_170_5,
    0.360_761_573_048_138_4,
    0.467_913_934_572_690_4,
];
const GL12_X: [f64; 6] = [
    -0.981_560_634_246_719_1,
    -0.904_117_256_370_475,
    -0.769_902_674_194_305,
    -0.587_317_954_286_617_1,
    -0.367_831_498_998_180_2,
    -0.125_233_408_511_469_2,
];
const GL12_W: [f64; 6] = [
    0.047_175_336_386_511_77,
    0.106_939_325_995_318_3,
    0.160_078_328_543_346_4,
    0.203_167_426_723_065_9,
    0.233_492_536_538_354_7,
    0.249_147_045_813_402_9,
];
const GL20_X: [f64; 10] = [
    -0.993_128_599_185_094_9,
    -0.963_971_927_277_913_8,
    -0.912_234_428_251_326,
    -0.839_116_971_822_218_8,
    -0.746_331_906_460_150_8,
    -0.636_053_680_726_515,
    -0.510_867_001_950_827_1,
    -0.373_706_088_715_419_6,
    -0.227_785_851_141_645_1,
    -0.076_526_521_133_497_33,
];
const GL20_W: [f64; 10] = [
    0.017_614_007_139_152_12,
    0.040_601_429_800_386_94,
    0.062_672_048_334_109_06,
    0.083_276_741_576_704_75,
    0.101_930_119_817_240_4,
    0.118_194_531_961_518_4,
    0.131_688_638_449_176_6,
    0.142_096_109_318_382_1,
    0.149_172_986_472_603_7,
    0.152_753_387_130_725_9,
];

/// Upper orthant probability `P(U > h, V > k)` for standard normals with
/// correlation `r` (Genz's BVND, Drezner-Wesolowsky with the split at
/// `|r| = 0.925`). Arguments must be finite.
fn bvn_upper(h: f64, k: f64, r: f64) -> f64 {
    let (xs, ws): (&[f64], &[f64]) = if r.abs() < 0.3 {
        (&GL6_X, &GL6_W)
    } else if r.abs() < 0.75 {
        (&GL12_X, &GL12_W)
    } else {
        (&GL20_X, &GL20_W)
    };

    let mut hk = h * k;
    if r.abs() < 0.925 {
        let hs = 0.5 * (h * h + k * k);
        let asr = r.asin();
        let mut bvn = 0.0;
        for (&x, &w) in xs.iter().zip(ws) {
            let sn = (0.5 * asr * (1.0 + x)).sin();
            bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
            let sn = (0.5 * asr * (1.0 - x)).sin();
            bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
        }
        return bvn * asr / (4.0 * PI) + norm_cdf(-h) * norm_cdf(-k);
    }

    let mut k = k;
    if r < 0.0 {
        k = -k;
        hk = -hk;
    }
    let mut bvn = 0.0;
    if r.abs() < 1.0 {
        let as_ = (1.0 - r) * (1.0 + r);
        let mut a = as_.sqrt();
        let bs = (h - k) * (h - k);
        let c = (4.0 - hk) / 8.0;
        let d = (12.0 - hk) / 16.0;
        bvn = a
            * (-0.5 * (bs / as_ + hk)).exp()
            * (1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0);
        if -hk < 100.0 {
            let b = bs.sqrt();
            bvn -= (-0.5 * hk).exp()
                * SQRT_2PI
                * norm_cdf(-b / a)
                * b
                * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
        }
        a *= 0.5;
        for (&x, &w) in xs.iter().zip(ws) {
            for xi in [x, -x] {
                let t = a * (xi + 1.0);
                let xs2 = t * t;
                let rs = (1.0 - xs2).sqrt();
                bvn += a
                    * w
                    * (-0.5 * (bs / xs2 + hk)).exp()
                    * ((-hk * (1.0 - rs) / (2.0 * (1.0 + rs))).exp() / rs
                        - (1.0 + c * xs2 * (1.0 + d * xs2)));
            }
        }
        bvn = -bvn / (2.0 * PI);
    }
    if r > 0.0 {
        bvn + norm_cdf(-h.max(k))
    } else {
        -bvn + (norm_cdf(-h) - norm_cdf(-k)).max(0.0)
    }
}

/// Bivariate standard normal cdf `P(U <= u, V <= v)` with correlation `rho`.
pub fn bivar_cdf(u: f64, v: f64, rho: Correlation) -> f64 {
    if is_neg_inf(u) || is_neg_inf(v) {
        return 0.0;
    }
    if is_pos_inf(u) {
        return norm_cdf(v);
    }
    if is_pos_inf(v) {
        return norm_cdf(u);
    }
    let r = rho.value();
    if r == 0.0 {
        return norm_cdf(u) * norm_cdf(v);
    }
    bvn_upper(-u, -v, r).clamp(0.0, 1.0)
}

/// `P(u1 < U < u2, v1 < V < v2)` by inclusion-exclusion on [`bivar_cdf`].
pub fn bivar_rect_prob(u1: f64, u2: f64, v1: f64, v2: f64, rho: Correlation) -> f64 {
    if u1 >= u2 || v1 >= v2 {
        return 0.0;
    }
    if rho.value() == 0.0 {
        return norm_interval_mass(u1, u2) * norm_interval_mass(v1, v2);
    }
    let p = bivar_cdf(u2, v2, rho) - bivar_cdf(u1, v2, rho) - bivar_cdf(u2, v1, rho)
        + bivar_cdf(u1, v1, rho);
    p.clamp(0.0, 1.0)
}

/// Density of a bivariate standard normal pair with correlation `rho`
/// (|rho| < 1).
pub fn bivar_pdf(u: f64, v: f64, rho: f64) -> f64 {
    let one_m = 1.0 - rho * rho;
    (-(u * u - 2.0 * rho * u * v + v * v) / (2.0 * one_m)).exp() / (2.0 * PI * one_m.sqrt())
}
