//! Shared fixtures for unit tests.

use crate::field::{Mode, ModeSet, Profile};

/// Two modes with y-dependent rates and amplitudes, ranges well inside the
/// admissible bounds for gamma0 = sigma_star = 0.5.
pub(crate) fn varied_modes_2() -> ModeSet {
    ModeSet::new(
        0.5,
        0.5,
        vec![
            Mode {
                k: [1.0, 0.0],
                alpha: Profile::Logistic {
                    lo: 0.6,
                    hi: 1.8,
                    v: [0.7, -0.3],
                    c: 0.2,
                },
                sigma: Profile::Bump {
                    base: 0.8,
                    amplitude: 0.5,
                    center: [0.3, -0.2],
                    width: 1.1,
                },
            },
            Mode {
                k: [0.0, 1.0],
                alpha: Profile::Bump {
                    base: 1.5,
                    amplitude: -0.7,
                    center: [-0.4, 0.5],
                    width: 1.3,
                },
                sigma: Profile::Logistic {
                    lo: 0.7,
                    hi: 1.6,
                    v: [-0.4, 0.8],
                    c: -0.1,
                },
            },
        ],
    )
    .unwrap()
}
