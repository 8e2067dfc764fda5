use super::{bs_price, price_bounds, OptionQuote};
use crate::error::{domain, Error, PriceBound, Result};

pub const VOL_MIN: f64 = 1e-6;
pub const VOL_MAX: f64 = 5.0;

const VOL_TOLERANCE: f64 = 1e-15;
const MAX_ITERATIONS: usize = 200;

/// Brent's bracketed root finder.
///
/// `f(lo)` and `f(hi)` must have opposite signs (or one of them be zero).
/// Terminates when the bracket is narrower than `xtol` (plus a relative
/// machine-precision term) or an exact root is hit.
pub fn brent<F: FnMut(f64) -> f64>(
    mut f: F,
    lo: f64,
    hi: f64,
    xtol: f64,
    max_iter: usize,
) -> Result<f64> {
    let (mut a, mut b) = (lo, hi);
    let (mut fa, mut fb) = (f(a), f(b));
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(domain(format!("brent: root not bracketed by [{lo}, {hi}]")));
    }
    let (mut c, mut fc) = (a, fa);
    let (mut d, mut e) = (b - a, b - a);
    for _ in 0..max_iter {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = 2.0 * f64::EPSILON * b.abs() + 0.5 * xtol;
        let xm = 0.5 * (c - b);
        if xm.abs() <= tol1 || fb == 0.0 {
            return Ok(b);
        }
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * xm * s;
                q = 1.0 - s;
            } else {
                let qa = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * xm * qa * (qa - r) - (b - a) * (r - 1.0));
                q = (qa - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            }
            p = p.abs();
            let min1 = 3.0 * xm * q - (tol1 * q).abs();
            let min2 = (e * q).abs();
            if 2.0 * p < min1.min(min2) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol1 { d } else { tol1.copysign(xm) };
        fb = f(b);
    }
    Err(Error::Convergence {
        iterations: max_iter,
        lo: b.min(c),
        hi: b.max(c),
    })
}

/// Black-Scholes implied volatility of a quote, solved by Brent's method on
/// `[VOL_MIN, VOL_MAX]`.
pub fn implied_vol(quote: &OptionQuote) -> Result<f64> {
    let OptionQuote {
        spot,
        strike,
        expiry,
        right,
        mid_price,
        rate,
        ..
    } = *quote;
    if ![spot, strike, expiry, mid_price, rate].iter().all(|x| x.is_finite()) {
        return Err(domain("implied_vol: non-finite quote field"));
    }
    if spot <= 0.0 || strike <= 0.0 || expiry <= 0.0 {
        return Err(domain("implied_vol: spot, strike and expiry must be positive"));
    }
    let (lower, upper) = price_bounds(spot, strike, rate, expiry, right);
    if mid_price <= lower {
        return Err(Error::NoSolution {
            bound: PriceBound::Lower,
            price: mid_price,
            limit: lower,
        });
    }
    if mid_price >= upper {
        return Err(Error::NoSolution {
            bound: PriceBound::Upper,
            price: mid_price,
            limit: upper,
        });
    }
    let objective = |vol: f64| bs_price(spot, strike, rate, expiry, vol, right).map(|p| p - mid_price);
    // The price range reachable inside the volatility bracket is narrower than
    // the static bounds; report which end the quote fell off.
    let f_lo = objective(VOL_MIN)?;
    if f_lo > 0.0 {
        return Err(Error::NoSolution {
            bound: PriceBound::Lower,
            price: mid_price,
            limit: f_lo + mid_price,
        });
    }
    let f_hi = objective(VOL_MAX)?;
    if f_hi < 0.0 {
        return Err(Error::NoSolution {
            bound: PriceBound::Upper,
            price: mid_price,
            limit: f_hi + mid_price,
        });
    }
    brent(
        |v| objective(v).unwrap_or(f64::NAN),
        VOL_MIN,
        VOL_MAX,
        VOL_TOLERANCE,
        MAX_ITERATIONS,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::OptionRight;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn quote(strike: f64, rate: f64, expiry: f64, right: OptionRight, mid_price: f64) -> OptionQuote {
        OptionQuote {
            quote_date: NaiveDate::from_ymd_opt(2021, 6, 1).unwrap(),
            spot: 1.0,
            strike,
            expiry,
            right,
            mid_price,
            rate,
        }
    }

    #[test]
    fn brent_finds_cubic_root() {
        let root = brent(|x| x * x * x - 2.0, 0.0, 2.0, 1e-15, 100).unwrap();
        assert!((root - 2f64.cbrt()).abs() < 1e-14);
        assert!(brent(|x| x * x + 1.0, -1.0, 1.0, 1e-12, 100).is_err());
    }

    #[test]
    fn brent_reports_last_bracket_on_exhaustion() {
        match brent(|x| x - 0.123456789, 0.0, 1.0, 0.0, 0) {
            Err(Error::Convergence { iterations, lo, hi }) => {
                assert_eq!(iterations, 0);
                assert_eq!((lo, hi), (0.0, 1.0));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn atm_round_trip() {
        let p = bs_price(1.0, 1.0, 0.0, 1.0, 0.2, OptionRight::Call).unwrap();
        let v = implied_vol(&quote(1.0, 0.0, 1.0, OptionRight::Call, p)).unwrap();
        assert!((v - 0.2).abs() < 1e-8);
    }

    #[test]
    fn otm_put_round_trip() {
        let p = bs_price(1.0, 1.1, 0.02, 0.5, 0.35, OptionRight::Put).unwrap();
        let q = quote(1.1, 0.02, 0.5, OptionRight::Put, p);
        let v = implied_vol(&q).unwrap();
        assert!((v - 0.35).abs() < 1e-8);
        let repriced = bs_price(1.0, 1.1, 0.02, 0.5, v, OptionRight::Put).unwrap();
        assert!((repriced - p).abs() < 1e-10);
    }

    #[test]
    fn below_intrinsic_has_no_solution() {
        // Intrinsic of a 0.8-strike call at zero rate is 0.2.
        let err = implied_vol(&quote(0.8, 0.0, 1.0, OptionRight::Call, 0.15)).unwrap_err();
        assert!(matches!(err, Error::NoSolution { bound: PriceBound::Lower, .. }), "{err}");
        let err = implied_vol(&quote(1.0, 0.0, 1.0, OptionRight::Call, 1.0)).unwrap_err();
        assert!(matches!(err, Error::NoSolution { bound: PriceBound::Upper, .. }), "{err}");
    }

    proptest! {
        #[test]
        fn round_trip_identity(vol in 0.05f64..2.0, k in -0.5f64..0.5, t in 0.05f64..1.0, r in 0.0f64..0.05) {
            let right = if k < 0.0 { OptionRight::Put } else { OptionRight::Call };
            let p = bs_price(1.0, k.exp(), r, t, vol, right).unwrap();
            let v = implied_vol(&quote(k.exp(), r, t, right, p)).unwrap();
            prop_assert!((v - vol).abs() < 1e-8, "vol {} recovered {}", vol, v);
            prop_assert!(v > VOL_MIN && v < VOL_MAX);
        }
    }
}
