//! Test-time limb dropout: each frame, with probability `p`, one arm or leg
//! loses its keypoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pose::{LimbGroup, SkeletonSequence};

/// Returns a copy of `seq` where, per frame with probability `p`, one limb
/// group chosen uniformly among the arms and legs has the confidences of its
/// exclusive joints set to zero. Coordinates are never touched.
pub fn drop_limbs(seq: &SkeletonSequence, p: f64, seed: u64) -> Result<SkeletonSequence> {
    Ok(drop_limbs_traced(seq, p, seed)?.0)
}

/// Like [`drop_limbs`], also reporting which group (if any) each frame lost.
pub fn drop_limbs_traced(
    seq: &SkeletonSequence,
    p: f64,
    seed: u64,
) -> Result<(SkeletonSequence, Vec<Option<LimbGroup>>)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Validation(format!(
            "drop probability {p} outside [0,1]"
        )));
    }
    let groups: Vec<(LimbGroup, Vec<usize>)> = LimbGroup::EXTREMITIES
        .iter()
        .map(|&g| (g, seq.topology.exclusive_joints(g)))
        .filter(|(_, joints)| !joints.is_empty())
        .collect();
    if groups.is_empty() {
        return Err(Error::Validation(
            "topology has no arm or leg groups with droppable joints".into(),
        ));
    }
    let mut out = seq.clone();
    let mut trace = vec![None; seq.len()];
    if p == 0.0 {
        return Ok((out, trace));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (frame, dropped) in out.frames.iter_mut().zip(&mut trace) {
        if !rng.random_bool(p) {
            continue;
        }
        let (group, joints) = &groups[rng.random_range(0..groups.len())];
        for &j in joints {
            frame[j].c = 0.0;
        }
        *dropped = Some(*group);
    }
    Ok((out, trace))
}
