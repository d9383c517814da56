//! Shared fixtures for the benchmarks.

use dirdp_core::data::SynthSpec;
use dirdp_core::nn::{Architecture, LabeledExample, NetworkParams};
use dirdp_core::RngStream;

/// An 8x8 ten-class MLP with hidden width 32 and a matching synthetic batch.
pub fn mlp_fixture(batch: usize) -> (NetworkParams, Vec<LabeledExample>) {
    let arch = Architecture::mlp(8, 8, 1, 32, 10);
    let params = NetworkParams::init(arch, RngStream::new(1)).expect("valid architecture");
    let data = SynthSpec::new(batch, 10, 8, 2).generate().expect("valid spec");
    (params, data)
}
