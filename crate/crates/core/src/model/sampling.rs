//! Fixed-size neighbor sampling.

use rand::seq::index;
use rand::Rng;

/// Draw `s` neighbors of `node` from its sorted neighbor list.
///
/// * more than `s` neighbors: `s` distinct neighbors, uniformly without
///   replacement;
/// * exactly `s`: the whole neighborhood;
/// * fewer than `s`: every neighbor once, padded to `s` with uniform draws
///   with replacement, so the distinct members always cover the neighborhood;
/// * no neighbors: `[node]`.
///
/// The result is sorted.
pub fn sample_neighbors<R: Rng + ?Sized>(neighbors: &[usize], node: usize, s: usize, rng: &mut R) -> Vec<usize> {
    let deg = neighbors.len();
    if deg == 0 {
        return vec![node];
    }
    let mut out: Vec<usize> = if deg > s {
        index::sample(rng, deg, s).into_iter().map(|i| neighbors[i]).collect()
    } else {
        let mut v = neighbors.to_vec();
        v.extend((deg..s).map(|_| neighbors[rng.gen_range(0..deg)]));
        v
    };
    out.sort_unstable();
    out
}

/// `node` followed by the distinct sampled neighbors in ascending order;
/// the set a mean aggregator averages over.
pub fn aggregation_set<R: Rng + ?Sized>(neighbors: &[usize], node: usize, s: usize, rng: &mut R) -> Vec<usize> {
    let mut sampled = sample_neighbors(neighbors, node, s, rng);
    sampled.dedup();
    let mut set = Vec::with_capacity(sampled.len() + 1);
    set.push(node);
    set.extend(sampled.into_iter().filter(|&u| u != node));
    set
}
