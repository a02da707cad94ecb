//! Benchmark-only crate. The measurements live in `benches/calibration.rs`;
//! this library target is intentionally empty.
