use std::f64::consts::{FRAC_PI_2, PI, TAU};

use super::{Grid, PhaseSpectrum};
use crate::error::Result;

/// Wraps radians into (-pi, pi].
pub fn wrap_to_pi(x: f64) -> f64 {
    let y = x.rem_euclid(TAU);
    if y > PI {
        y - TAU
    } else {
        y
    }
}

fn sgn(t: f64) -> f64 {
    if t >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Phase from a pseudo-real / pseudo-imaginary pair:
/// `atan(i / r) - pi/2 * sgn(i) * (sgn(r) - 1)` with `sgn(0) = 1`.
/// On the `r = 0` axis the limit is taken: `±pi/2`, or 0 at the origin.
pub fn pseudo_phase(r: f64, i: f64) -> f64 {
    let p = if r == 0.0 {
        if i == 0.0 {
            0.0
        } else {
            FRAC_PI_2 * sgn(i)
        }
    } else {
        (i / r).atan() - FRAC_PI_2 * sgn(i) * (sgn(r) - 1.0)
    };
    if p <= -PI {
        PI
    } else {
        p
    }
}

/// Partial derivatives of [`pseudo_phase`] with respect to `(r, i)`; zero at the origin.
pub fn pseudo_phase_grad(r: f64, i: f64) -> (f64, f64) {
    let d = r * r + i * i;
    if d == 0.0 {
        (0.0, 0.0)
    } else {
        (-i / d, r / d)
    }
}

pub fn phase_from_pseudo(r: &Grid, i: &Grid) -> Result<PhaseSpectrum> {
    Ok(PhaseSpectrum {
        values: r.zip_map(i, pseudo_phase)?,
    })
}

/// `|x - 2pi * round(x / 2pi)|`, in [0, pi].
pub fn anti_wrap(x: f64) -> f64 {
    (x - TAU * (x / TAU).round()).abs()
}

/// Subgradient of [`anti_wrap`]: the sign of the wrapped residual, 0 where it vanishes.
pub fn anti_wrap_grad(x: f64) -> f64 {
    let w = x - TAU * (x / TAU).round();
    if w > 0.0 {
        1.0
    } else if w < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// First difference along the frequency (column) axis; column 0 is zero.
pub fn diff_freq(p: &Grid) -> Grid {
    Grid::from_fn(p.rows(), p.cols(), |t, f| {
        if f == 0 {
            0.0
        } else {
            p.get(t, f) - p.get(t, f - 1)
        }
    })
}

/// First difference along the time (row) axis; row 0 is zero.
pub fn diff_time(p: &Grid) -> Grid {
    Grid::from_fn(p.rows(), p.cols(), |t, f| {
        if t == 0 {
            0.0
        } else {
            p.get(t, f) - p.get(t - 1, f)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pseudo_phase_cases() {
        assert_eq!(pseudo_phase(1.0, 0.0), 0.0);
        assert_eq!(pseudo_phase(-1.0, 0.0), PI);
        assert_eq!(pseudo_phase(-1.0, -0.0), PI);
        assert_eq!(pseudo_phase(0.0, -1.0), -FRAC_PI_2);
        assert_eq!(pseudo_phase(0.0, 1.0), FRAC_PI_2);
        assert_eq!(pseudo_phase(0.0, 0.0), 0.0);
        assert_eq!(pseudo_phase(-1.0, 0.0), (0.0f64).atan2(-1.0));
    }

    #[test]
    fn anti_wrap_cases() {
        assert_eq!(anti_wrap(0.0), 0.0);
        assert!(anti_wrap(TAU).abs() < 1e-15);
        assert!((anti_wrap(1.5 * PI) - FRAC_PI_2).abs() < 1e-15);
        assert!((anti_wrap(PI) - PI).abs() < 1e-15);
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_to_pi(-PI), PI);
        assert_eq!(wrap_to_pi(PI), PI);
        assert!((wrap_to_pi(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_to_pi(0.5 - TAU) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn differentials() {
        let c = Grid::filled(3, 4, 1.3);
        assert!(diff_freq(&c).data().iter().all(|&v| v == 0.0));
        assert!(diff_time(&c).data().iter().all(|&v| v == 0.0));
        let lin = Grid::from_fn(2, 5, |_, f| 0.25 * f as f64);
        let d = diff_freq(&lin);
        for t in 0..2 {
            assert_eq!(d.get(t, 0), 0.0);
            for f in 1..5 {
                assert!((d.get(t, f) - 0.25).abs() < 1e-15);
            }
        }
        let single = Grid::from_fn(1, 6, |_, f| f as f64);
        assert!(diff_time(&single).data().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn pseudo_phase_matches_atan2(r in -1e3f64..1e3, i in -1e3f64..1e3) {
            prop_assume!(r.abs() >= 1e-9 && i.abs() >= 1e-9);
            let d = wrap_to_pi(pseudo_phase(r, i) - i.atan2(r)).abs();
            prop_assert!(d < 1e-12);
            let p = pseudo_phase(r, i);
            prop_assert!(p > -PI && p <= PI);
        }

        #[test]
        fn anti_wrap_properties(x in -100.0f64..100.0, k in -5i32..5) {
            let a = anti_wrap(x);
            prop_assert!((0.0..=PI).contains(&a));
            prop_assert!((a - anti_wrap(x + TAU * k as f64)).abs() < 1e-12);
            prop_assert!((a - anti_wrap(-x)).abs() < 1e-12);
        }

        #[test]
        fn diff_commutes_with_offset(c in -10.0f64..10.0, seed in 0u64..100) {
            let g = Grid::from_fn(4, 5, |t, f| ((t * 7 + f * 3) as f64 + seed as f64).sin());
            let shifted = g.map(|v| v + c);
            for (a, b) in diff_freq(&g).data().iter().zip(diff_freq(&shifted).data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in diff_time(&g).data().iter().zip(diff_time(&shifted).data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
