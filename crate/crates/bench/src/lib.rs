//! Shared fixtures for the benchmarks.

use nowcast_xai::datagen::{make_dataset, Scenario};
use nowcast_xai::model::{segmentation_architecture, SegmentationShape};
use nowcast_xai::NetworkParams;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// An untrained default-shape network and one scenario per rain type on an
/// `n × n` grid. Timings do not depend on the weights.
pub fn fixture(n: usize) -> (NetworkParams, Vec<Scenario>) {
    let arch = segmentation_architecture(SegmentationShape::default());
    let net = NetworkParams::init(arch, &mut ChaCha8Rng::seed_from_u64(0));
    let data = make_dataset(&[1; 6], 0, (n, n)).expect("valid dataset profile");
    (net, data)
}
