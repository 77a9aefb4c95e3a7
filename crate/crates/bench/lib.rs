//! Shared fixtures for the benchmarks.

use tailsgd::harness::sweep::{standard_distribution, Family};
use tailsgd::DistributionSpec;

/// The sweep's well-specified instance in dimension `d`.
pub fn instance(d: usize) -> DistributionSpec {
    DistributionSpec::from_config(&standard_distribution(Family::WellSpecified, d, 1.0))
        .expect("valid fixture")
}
