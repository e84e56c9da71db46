#![allow(dead_code)]

use hcgl::ecg::{EcgTopology, OperatorAction};

/// Straight transcription of the transition rule, written without the
/// library's helpers.
pub fn reference_apply(t: &EcgTopology, a: &OperatorAction) -> (Vec<usize>, Vec<usize>, [bool; 2]) {
    let mut a2c = t.agent_to_cluster.clone();
    let mut c2t = t.cluster_to_target.clone();
    let mut flags = [false; 2];
    if a.src_cluster != a.dst_cluster {
        if let Some(i) = a2c.iter().position(|&c| c == a.src_cluster) {
            a2c[i] = a.dst_cluster;
            flags[0] = true;
        }
    }
    if a.src_target != a.dst_target {
        if let Some(c) = c2t.iter().position(|&x| x == a.src_target) {
            c2t[c] = a.dst_target;
            flags[1] = true;
        }
    }
    (a2c, c2t, flags)
}
