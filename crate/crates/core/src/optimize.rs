//! Derivative-free scalar minimization on a bounded interval.
//!
//! Brent's method: golden-section steps, accelerated by successive parabolic
//! interpolation when the interpolating parabola is trustworthy. Follows the
//! classic `localmin` routine (Brent 1973, ch. 5), the same algorithm behind
//! R's `optimize`.

/// Result of a scalar minimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minimum {
    pub x: f64,
    pub value: f64,
    pub evaluations: usize,
}

/// Minimize `f` on `[a, b]` to absolute tolerance `tol` in `x`.
pub fn minimize<F: FnMut(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Minimum {
    minimize_to_floor(f, a, b, tol, f64::NEG_INFINITY)
}

/// As [`minimize`], but return as soon as a value at or below `floor` is seen.
pub fn minimize_to_floor<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    tol: f64,
    floor: f64,
) -> Minimum {
    let golden = 0.5 * (3.0 - 5f64.sqrt());
    let eps = f64::EPSILON.sqrt();

    let (mut a, mut b) = if a <= b { (a, b) } else { (b, a) };
    let mut v = a + golden * (b - a);
    let mut w = v;
    let mut x = v;
    let mut d = 0.0f64;
    let mut e = 0.0f64;
    let mut fx = f(x);
    let mut evaluations = 1;
    let mut fv = fx;
    let mut fw = fx;
    let tol3 = tol / 3.0;

    loop {
        if fx <= floor {
            break;
        }
        let xm = 0.5 * (a + b);
        let tol1 = eps * x.abs() + tol3;
        let t2 = 2.0 * tol1;
        if (x - xm).abs() <= t2 - 0.5 * (b - a) {
            break;
        }
        let mut p = 0.0;
        let mut q = 0.0;
        let mut r = 0.0;
        if e.abs() > tol1 {
            r = (x - w) * (fx - fv);
            q = (x - v) * (fx - fw);
            p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            } else {
                q = -q;
            }
            r = e;
            e = d;
        }
        if p.abs() >= (0.5 * q * r).abs() || p <= q * (a - x) || p >= q * (b - x) {
            // golden-section step
            e = if x < xm { b - x } else { a - x };
            d = golden * e;
        } else {
            // parabolic step
            d = p / q;
            let u = x + d;
            if u - a < t2 || b - u < t2 {
                d = if x < xm { tol1 } else { -tol1 };
            }
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d > 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = f(u);
        evaluations += 1;

        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    Minimum {
        x,
        value: fx,
        evaluations,
    }
}

/// Maximize `f` on `[a, b]`; the returned `value` is the maximum.
pub fn maximize<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64) -> Minimum {
    let m = minimize(|x| -f(x), a, b, tol);
    Minimum {
        value: -m.value,
        ..m
    }
}
