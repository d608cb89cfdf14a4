//! Tree-structured multi-party PSI, cluster coresets and split training for
//! vertically partitioned data, run over an in-process accounted message bus.

pub mod clock;
pub mod coreset;
pub mod crypto;
pub mod data;
pub mod harness;
pub mod mpsi;
pub mod tpsi;
pub mod train;
pub mod transport;
