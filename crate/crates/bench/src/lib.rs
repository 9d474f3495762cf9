//! Shared helpers for the criterion benchmarks: bundled-scenario loading and
//! ready-to-solve planning contexts.

use std::path::Path;

use ccmpc_core::scenario::{parse_scenario, Scenario};

/// Loads one of the bundled scenario presets by file name.
pub fn bundled_scenario(name: &str) -> Scenario {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name);
    parse_scenario(&path).expect("bundled scenario parses")
}
