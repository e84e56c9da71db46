//! Hierarchical cooperation graph learning: an extensible cooperation graph
//! steered by four graph operators, trained with MAPPO on the cooperative
//! swarm interception task.

pub mod coop;
pub mod csi;
pub mod ecg;
pub mod experiment;
pub mod mappo;
pub mod policy;
