//! Bisects `click_offset` so the popularity logging policy has a 1% CTR.
//!
//! Usage: cargo run --release --example calibrate [click_scale] [seed]

use crmkit_core::policy::PopularityPolicy;
use crmkit_core::sim::{calibrate_click_offset, SimConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let mut config = SimConfig::default();
    if let Some(scale) = args.next() {
        config.click_scale = scale.parse().expect("click_scale");
    }
    if let Some(seed) = args.next() {
        config.seed = seed.parse().expect("seed");
    }
    let policy = PopularityPolicy::new(config.n_items, 1.0).unwrap();
    let offset = calibrate_click_offset(&config, &policy, 0.01, 20_000, 12345).unwrap();
    println!(
        "click_scale={} click_offset={offset:.6}",
        config.click_scale
    );
}
