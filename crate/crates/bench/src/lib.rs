//! Shared inputs for the benchmarks.

use ipa_core::imaging::generate_phantom;
use ipa_core::metrics::signed_to_255;

/// Two different phantoms of side `size` on the `[0, 255]` scale.
pub fn phantom_pair(size: usize) -> (Vec<f64>, Vec<f64>) {
    let a = generate_phantom(1, size, size).expect("valid size");
    let b = generate_phantom(2, size, size).expect("valid size");
    (signed_to_255(a.pixels()), signed_to_255(b.pixels()))
}
