//! Master-node resolution: a file is managed by the storage node whose id
//! is closest to the file id.

use crate::tree::Hash256;

/// Absolute difference of two 256-bit ids interpreted as big-endian
/// integers.
fn distance(a: &Hash256, b: &Hash256) -> Hash256 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    let mut out = [0u8; 32];
    let mut borrow = 0i16;
    for i in (0..32).rev() {
        let d = hi[i] as i16 - lo[i] as i16 - borrow;
        if d < 0 {
            out[i] = (d + 256) as u8;
            borrow = 1;
        } else {
            out[i] = d as u8;
            borrow = 0;
        }
    }
    out
}

/// The node minimizing |node_id − file_id|; equidistant candidates resolve
/// to the numerically smaller id. Returns None for an empty node set.
pub fn resolve_master(file_id: &Hash256, node_ids: &[Hash256]) -> Option<Hash256> {
    node_ids
        .iter()
        .min_by(|a, b| {
            distance(a, file_id)
                .cmp(&distance(b, file_id))
                .then(a.cmp(b))
        })
        .copied()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(v: u64) -> Hash256 {
        let mut out = [0u8; 32];
        out[24..].copy_from_slice(&v.to_be_bytes());
        out
    }

    /// Brute-force oracle over small integer ids.
    fn oracle(file: u64, nodes: &[u64]) -> u64 {
        *nodes
            .iter()
            .min_by_key(|&&n| (n.abs_diff(file), n))
            .unwrap()
    }

    #[test]
    fn nearest_node_wins() {
        let nodes = [id(10), id(50), id(90)];
        assert_eq!(resolve_master(&id(48), &nodes), Some(id(50)));
    }

    #[test]
    fn exact_match_wins() {
        let nodes = [id(10), id(50), id(90)];
        assert_eq!(resolve_master(&id(90), &nodes), Some(id(90)));
    }

    #[test]
    fn tie_goes_to_the_smaller_id() {
        let nodes = [id(60), id(40)];
        assert_eq!(resolve_master(&id(50), &nodes), Some(id(40)));
    }

    #[test]
    fn empty_node_set_is_an_error() {
        assert_eq!(resolve_master(&id(1), &[]), None);
    }

    #[test]
    fn matches_brute_force_oracle() {
        let nodes: Vec<u64> = vec![3, 17, 17, 40, 99, 250, 251];
        let node_ids: Vec<Hash256> = nodes.iter().map(|&n| id(n)).collect();
        for file in 0..260 {
            let got = resolve_master(&id(file), &node_ids).unwrap();
            assert_eq!(got, id(oracle(file, &nodes)), "file {file}");
        }
    }
}
