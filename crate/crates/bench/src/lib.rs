//! Criterion benchmarks for the simulation, kinematics and learning hot
//! loops. See `benches/`.
