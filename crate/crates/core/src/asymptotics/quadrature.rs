//! Globally adaptive Gauss–Kronrod (7/15) quadrature on a finite interval.
//!
//! The interval is first cut into equal panels no wider than a caller-supplied
//! width (used to keep every panel inside half an oscillation period), then the
//! panel with the largest error is bisected until the summed error meets the
//! tolerance. The integrand may report its own error (e.g. from a nested
//! integral); that error is integrated alongside the value and counted in the
//! total.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// Kronrod abscissae on `[-1, 1]`, descending; odd indices are the Gauss nodes.
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

/// Gauss weights for `XGK[1], XGK[3], XGK[5], XGK[7]`.
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// Tolerances and budget for one adaptive integral.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tolerance {
    pub rel: f64,
    pub abs: f64,
    pub max_panels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Integral {
    pub value: f64,
    /// Discretization error of this integral plus the integrated error
    /// reported by the integrand.
    pub error: f64,
    pub panels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Failure<E> {
    Integrand(E),
    Budget { value: f64, error: f64, panels: usize },
}

impl<E> From<E> for Failure<E> {
    fn from(e: E) -> Self {
        Failure::Integrand(e)
    }
}

#[derive(Debug, Clone, Copy)]
struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
    nested_error: f64,
}

impl Panel {
    fn total_error(&self) -> f64 {
        self.error + self.nested_error
    }
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Panel {}

impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        // Ties broken on position so the bisection order is fully determined.
        self.error
            .total_cmp(&other.error)
            .then_with(|| other.a.total_cmp(&self.a))
    }
}

/// One 15-point Kronrod evaluation with the QUADPACK error heuristic.
fn kronrod_panel<E, F>(f: &mut F, a: f64, b: f64) -> Result<Panel, E>
where
    F: FnMut(f64) -> Result<(f64, f64), E>,
{
    let centre = 0.5 * (a + b);
    let half = 0.5 * (b - a);

    let mut fv = [0.0f64; 15];
    let mut nested = 0.0;
    let (fc, ec) = f(centre)?;
    fv[7] = fc;
    nested += WGK[7] * ec.abs();
    for j in 0..7 {
        let dx = half * XGK[j];
        let (f1, e1) = f(centre - dx)?;
        let (f2, e2) = f(centre + dx)?;
        fv[j] = f1;
        fv[14 - j] = f2;
        nested += WGK[j] * (e1.abs() + e2.abs());
    }

    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    let mut abs_sum = WGK[7] * fc.abs();
    for j in 0..7 {
        let pair = fv[j] + fv[14 - j];
        kronrod += WGK[j] * pair;
        abs_sum += WGK[j] * (fv[j].abs() + fv[14 - j].abs());
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    let mean = 0.5 * kronrod;
    let mut asc = WGK[7] * (fc - mean).abs();
    for j in 0..7 {
        asc += WGK[j] * ((fv[j] - mean).abs() + (fv[14 - j] - mean).abs());
    }

    let value = kronrod * half;
    let abs_sum = abs_sum * half.abs();
    let asc = asc * half.abs();
    let mut error = ((kronrod - gauss) * half).abs();
    if asc != 0.0 && error != 0.0 {
        error = asc * (200.0 * error / asc).powf(1.5).min(1.0);
    }
    if abs_sum > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        error = error.max(50.0 * f64::EPSILON * abs_sum);
    }

    Ok(Panel {
        a,
        b,
        value,
        error,
        nested_error: nested * half.abs(),
    })
}

/// Integrate `f` over `[a, b]` with panels no wider than `max_width`.
///
/// `f` returns `(value, error)`; the error part is integrated with the
/// Kronrod weights and reported as part of the total.
pub(crate) fn integrate<E, F>(
    mut f: F,
    a: f64,
    b: f64,
    max_width: f64,
    tol: Tolerance,
) -> Result<Integral, Failure<E>>
where
    F: FnMut(f64) -> Result<(f64, f64), E>,
{
    if b <= a {
        return Ok(Integral {
            value: 0.0,
            error: 0.0,
            panels: 0,
        });
    }
    let initial = if max_width.is_finite() && max_width > 0.0 {
        ((b - a) / max_width).ceil().max(1.0) as usize
    } else {
        1
    };
    let initial = initial.min(tol.max_panels.max(1));

    let mut heap = BinaryHeap::with_capacity(initial * 2);
    let width = (b - a) / initial as f64;
    for i in 0..initial {
        let lo = a + width * i as f64;
        let hi = if i + 1 == initial { b } else { a + width * (i + 1) as f64 };
        heap.push(kronrod_panel(&mut f, lo, hi)?);
    }

    loop {
        let (value, error) = totals(&heap);
        let target = tol.abs.max(tol.rel * value.abs());
        if error <= target {
            return Ok(Integral {
                value,
                error,
                panels: heap.len(),
            });
        }
        if heap.len() >= tol.max_panels {
            return Err(Failure::Budget {
                value,
                error,
                panels: heap.len(),
            });
        }
        let worst = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // Panel cannot be split further in floating point.
            heap.push(worst);
            let (value, error) = totals(&heap);
            return Err(Failure::Budget {
                value,
                error,
                panels: heap.len(),
            });
        }
        heap.push(kronrod_panel(&mut f, worst.a, mid)?);
        heap.push(kronrod_panel(&mut f, mid, worst.b)?);
    }
}

/// Sum over panels in interval order, so the result does not depend on the
/// heap layout.
fn totals(heap: &BinaryHeap<Panel>) -> (f64, f64) {
    let mut panels: Vec<&Panel> = heap.iter().collect();
    panels.sort_by(|p, q| p.a.total_cmp(&q.a));
    panels
        .iter()
        .fold((0.0, 0.0), |(v, e), p| (v + p.value, e + p.total_error()))
}
