//! Fill-reducing ordering for the KKT factorization.
//!
//! Plain minimum-degree on the elimination graph with lazy heap updates.
//! Ties break on the lowest node index, so the ordering is deterministic.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

/// Compute a minimum-degree permutation for a symmetric pattern given as
/// (row, col) pairs (either triangle, diagonal ignored). Returns `perm` where
/// `perm[k]` is the original index eliminated at step k.
pub fn min_degree(n: usize, edges: impl Iterator<Item = (usize, usize)>) -> Vec<usize> {
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, j) in edges {
        if i != j {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for list in adj.iter_mut() {
        list.sort_unstable();
        list.dedup();
    }

    let mut alive = vec![true; n];
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> = (0..n).map(|v| Reverse((adj[v].len(), v))).collect();
    let mut perm = Vec::with_capacity(n);

    while let Some(Reverse((deg, v))) = heap.pop() {
        if !alive[v] || adj[v].len() != deg {
            continue; // stale heap entry
        }
        alive[v] = false;
        perm.push(v);
        let neighbors: Vec<usize> = std::mem::take(&mut adj[v])
            .into_iter()
            .filter(|&u| alive[u])
            .collect();
        // drop v from its neighbors, then connect them into a clique
        for &u in &neighbors {
            if let Ok(pos) = adj[u].binary_search(&v) {
                adj[u].remove(pos);
            }
        }
        for (a, &u) in neighbors.iter().enumerate() {
            for &w in &neighbors[a + 1..] {
                if let Err(pos) = adj[u].binary_search(&w) {
                    adj[u].insert(pos, w);
                }
                if let Err(pos) = adj[w].binary_search(&u) {
                    adj[w].insert(pos, u);
                }
            }
        }
        for &u in &neighbors {
            heap.push(Reverse((adj[u].len(), u)));
        }
    }
    perm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutation_is_valid() {
        // star graph: center should be eliminated last
        let edges = (1..6).map(|i| (0usize, i));
        let perm = min_degree(6, edges);
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());
        // the hub is never eliminated while two or more spokes remain
        let hub_pos = perm.iter().position(|&v| v == 0).unwrap();
        assert!(hub_pos >= 4);
    }

    #[test]
    fn deterministic() {
        let edges = vec![(0, 1), (1, 2), (2, 3), (3, 0), (1, 3)];
        let p1 = min_degree(4, edges.iter().copied());
        let p2 = min_degree(4, edges.iter().copied());
        assert_eq!(p1, p2);
    }
}
