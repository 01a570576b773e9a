//! Benchmark fixtures for mosc-core.

use mosc_core::simgen::{generate, FactorModelSpec};
use mosc_core::Panel;

/// Panel shaped like a small regional study: 6 donors, 19 pre and 6 post
/// periods, 7 outcomes.
pub fn study_panel(seed: u64) -> Panel {
    sized_panel(7, 19, 7, seed)
}

pub fn sized_panel(n_units: usize, t0: usize, k: usize, seed: u64) -> Panel {
    let spec = FactorModelSpec {
        n_units,
        t_periods: t0 + 6,
        t0,
        k_outcomes: k,
        rank: 3.min(n_units - 2),
        seed,
        ..Default::default()
    };
    generate(&spec).expect("valid benchmark spec").0
}
