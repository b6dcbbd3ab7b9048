//! Consistent-hash ring mapping keys to replica sets ("key-shards").

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};

use super::ReplicaId;

#[derive(Debug, Clone)]
pub struct Ring {
    points: Vec<(u64, ReplicaId)>,
    members: BTreeSet<ReplicaId>,
    vnodes: u32,
}

impl Ring {
    pub fn new(members: impl IntoIterator<Item = ReplicaId>, vnodes: u32) -> Self {
        let members: BTreeSet<ReplicaId> = members.into_iter().collect();
        let vnodes = vnodes.max(1);
        let mut points = Vec::with_capacity(members.len() * vnodes as usize);
        for &m in &members {
            for v in 0..vnodes {
                points.push((point_hash(m, v), m));
            }
        }
        points.sort_unstable();
        Self {
            points,
            members,
            vnodes,
        }
    }

    pub fn members(&self) -> &BTreeSet<ReplicaId> {
        &self.members
    }

    pub fn vnodes(&self) -> u32 {
        self.vnodes
    }

    /// Hand every point of `old` to `new`; nothing else moves.
    pub fn substitute(&mut self, old: ReplicaId, new: ReplicaId) {
        if !self.members.remove(&old) {
            return;
        }
        self.members.insert(new);
        for p in &mut self.points {
            if p.1 == old {
                p.1 = new;
            }
        }
    }

    /// The first `n` distinct replicas clockwise from `position`.
    pub fn owners(&self, position: u64, n: usize) -> Vec<ReplicaId> {
        let want = n.min(self.members.len());
        let mut out = Vec::with_capacity(want);
        if want == 0 {
            return out;
        }
        let start = self.points.partition_point(|(p, _)| *p < position);
        for i in 0..self.points.len() {
            let (_, r) = self.points[(start + i) % self.points.len()];
            if !out.contains(&r) {
                out.push(r);
                if out.len() == want {
                    break;
                }
            }
        }
        out
    }
}

fn point_hash(r: ReplicaId, v: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(r.0.to_le_bytes());
    h.update(v.to_le_bytes());
    let d = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    u64::from_be_bytes(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn owners_are_distinct_and_sized() {
        let ring = Ring::new((0..9).map(ReplicaId), 16);
        for pos in [0u64, 1 << 40, u64::MAX / 3, u64::MAX] {
            let o = ring.owners(pos, 3);
            assert_eq!(o.len(), 3);
            let set: BTreeSet<_> = o.iter().collect();
            assert_eq!(set.len(), 3);
        }
    }

    #[test]
    fn fewer_members_than_replication() {
        let ring = Ring::new([ReplicaId(4), ReplicaId(7)], 8);
        assert_eq!(ring.owners(123, 3).len(), 2);
    }

    #[test]
    fn adding_a_member_moves_a_minority_of_keys() {
        let before = Ring::new((0..9).map(ReplicaId), 32);
        let after = Ring::new((0..10).map(ReplicaId), 32);
        let positions: Vec<u64> = (0..2000u64)
            .map(|i| i.wrapping_mul(0x9E37_79B9_7F4A_7C15))
            .collect();
        let moved = positions
            .iter()
            .filter(|&&p| before.owners(p, 3) != after.owners(p, 3))
            .count();
        assert!(moved > 0 && moved < positions.len() / 2, "moved {moved}");
    }
}
