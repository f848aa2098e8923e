//! Spectral partitions against exhaustive normalized-cut search and planted
//! block graphs.

use cbsa_core::context::{normalized_cut, partition_from_embedding, spectral_embed};
use cbsa_core::rng::substream;
use cbsa_core::Tensor;
use rand::Rng;

/// Random connected graph: a shuffled spanning path plus sparse extra edges.
fn random_connected(c: usize, rng: &mut cbsa_core::rng::Rng) -> Tensor {
    let mut p = Tensor::zeros(&[c, c]);
    let mut order: Vec<usize> = (0..c).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
    for w in order.windows(2) {
        let v = rng.random_range(0.05..1.0);
        p.set(w[0], w[1], v);
        p.set(w[1], w[0], v);
    }
    for i in 0..c {
        for j in 0..i {
            if p.at(i, j) == 0.0 && rng.random::<f64>() < 0.4 {
                let v = rng.random_range(0.0..1.0);
                p.set(i, j, v);
                p.set(j, i, v);
            }
        }
    }
    p
}

fn exhaustive_min_ncut(p: &Tensor) -> f64 {
    let c = p.rows();
    let mut best = f64::INFINITY;
    // Label 0 fixed in cluster 0; every non-trivial split.
    for mask in 1..(1u32 << (c - 1)) {
        let assignment: Vec<usize> = (0..c).map(|i| if i == 0 { 0 } else { ((mask >> (i - 1)) & 1) as usize }).collect();
        best = best.min(normalized_cut(p, &assignment));
    }
    best
}

/// Worst ratio of the spectral bipartition's cut to the exhaustive optimum
/// over `n` connected graphs with 3 to 8 nodes.
pub fn connected_graphs(seed: u64, n: u64) -> Result<f64, String> {
    let mut rng = substream(seed, "graphs");
    let mut worst: f64 = 0.0;
    for g in 0..n {
        let c = rng.random_range(3..=8);
        let p = random_connected(c, &mut rng);
        let emb = spectral_embed(&p, 2).map_err(|e| e.to_string())?;
        let part = partition_from_embedding(&p, &emb, 2, &mut substream(g, "kmeans")).map_err(|e| e.to_string())?;
        let got = normalized_cut(&p, &part.assignment);
        let best = exhaustive_min_ncut(&p);
        worst = worst.max(got / best);
        if got > 1.10 * best {
            return Err(format!("graph {g} (C={c}): spectral {got} vs optimum {best}"));
        }
    }
    Ok(worst)
}

/// Graphs made of `k` disconnected blocks come back exactly.
pub fn planted_blocks(seed: u64, trials: u64, k_range: std::ops::RangeInclusive<usize>) -> Result<(), String> {
    let mut rng = substream(seed, "blocks");
    for trial in 0..trials {
        let k = rng.random_range(k_range.clone());
        let c = rng.random_range(k * 2..=32);
        let blocks: Vec<usize> = (0..c).map(|i| i % k).collect();
        let mut p = Tensor::zeros(&[c, c]);
        for i in 0..c {
            for j in 0..i {
                if blocks[i] == blocks[j] {
                    let v = rng.random_range(0.5..1.0);
                    p.set(i, j, v);
                    p.set(j, i, v);
                }
            }
        }
        let emb = spectral_embed(&p, k).map_err(|e| e.to_string())?;
        let part = partition_from_embedding(&p, &emb, k, &mut substream(trial, "kmeans")).map_err(|e| e.to_string())?;
        for i in 0..c {
            for j in 0..c {
                if (blocks[i] == blocks[j]) != (part.assignment[i] == part.assignment[j]) {
                    return Err(format!("trial {trial} (K={k}, C={c}): labels {i} and {j} misassigned"));
                }
            }
        }
        let cut = normalized_cut(&p, &part.assignment);
        if cut != 0.0 {
            return Err(format!("trial {trial}: cut {cut} on a disconnected graph"));
        }
    }
    Ok(())
}
