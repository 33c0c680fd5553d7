use std::collections::VecDeque;

use super::{Interaction, InteractionLog};
use crate::error::{Error, Result};

/// Repeatedly drops users and items with fewer than `k` interactions until
/// every survivor has at least `k`, then re-densifies the indices in their
/// previous order.
pub fn k_core_filter(log: &InteractionLog, k: usize) -> Result<InteractionLog> {
    if k == 0 {
        return Err(Error::invalid("k_core_filter", "k must be at least 1"));
    }
    let (n_users, n_items) = (log.num_users(), log.num_items());
    let mut user_edges: Vec<Vec<usize>> = vec![Vec::new(); n_users];
    let mut item_edges: Vec<Vec<usize>> = vec![Vec::new(); n_items];
    for (e, x) in log.interactions().iter().enumerate() {
        user_edges[x.user].push(e);
        item_edges[x.item].push(e);
    }
    let mut user_deg: Vec<usize> = user_edges.iter().map(Vec::len).collect();
    let mut item_deg: Vec<usize> = item_edges.iter().map(Vec::len).collect();
    let mut alive = vec![true; log.len()];
    let mut user_gone = vec![false; n_users];
    let mut item_gone = vec![false; n_items];

    #[derive(Clone, Copy)]
    enum Side {
        User(usize),
        Item(usize),
    }
    let mut queue: VecDeque<Side> = (0..n_users)
        .filter(|&u| user_deg[u] < k)
        .map(Side::User)
        .chain((0..n_items).filter(|&i| item_deg[i] < k).map(Side::Item))
        .collect();

    while let Some(node) = queue.pop_front() {
        let edges = match node {
            Side::User(u) if !user_gone[u] => {
                user_gone[u] = true;
                &user_edges[u]
            }
            Side::Item(i) if !item_gone[i] => {
                item_gone[i] = true;
                &item_edges[i]
            }
            _ => continue,
        };
        for &e in edges {
            if !alive[e] {
                continue;
            }
            alive[e] = false;
            let x = log.interactions()[e];
            user_deg[x.user] -= 1;
            item_deg[x.item] -= 1;
            if !user_gone[x.user] && user_deg[x.user] + 1 == k {
                queue.push_back(Side::User(x.user));
            }
            if !item_gone[x.item] && item_deg[x.item] + 1 == k {
                queue.push_back(Side::Item(x.item));
            }
        }
    }

    let remap = |gone: &[bool]| -> Vec<Option<usize>> {
        let mut next = 0;
        gone.iter()
            .map(|&g| {
                (!g).then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    };
    let user_map = remap(&user_gone);
    let item_map = remap(&item_gone);

    let interactions: Vec<Interaction> = log
        .interactions()
        .iter()
        .zip(&alive)
        .filter(|(_, &a)| a)
        .map(|(x, _)| Interaction {
            user: user_map[x.user].expect("alive edge has live user"),
            item: item_map[x.item].expect("alive edge has live item"),
            weight: x.weight,
        })
        .collect();
    if interactions.is_empty() {
        return Err(Error::EmptyAfterFilter(k));
    }
    let keep = |ids: &[String], map: &[Option<usize>]| -> Vec<String> {
        ids.iter()
            .zip(map)
            .filter(|(_, m)| m.is_some())
            .map(|(id, _)| id.clone())
            .collect()
    };
    Ok(InteractionLog::from_parts(
        interactions,
        keep(log.user_ids(), &user_map),
        keep(log.item_ids(), &item_map),
    ))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Deletes any node with degree below k, one sweep at a time, until no
    /// sweep deletes anything.
    fn pruning_oracle(pairs: &[(usize, usize)], k: usize) -> Vec<(usize, usize)> {
        let mut edges = pairs.to_vec();
        loop {
            let mut ud = std::collections::HashMap::new();
            let mut id = std::collections::HashMap::new();
            for &(u, i) in &edges {
                *ud.entry(u).or_insert(0) += 1;
                *id.entry(i).or_insert(0) += 1;
            }
            let before = edges.len();
            edges.retain(|(u, i)| ud[u] >= k && id[i] >= k);
            if edges.len() == before {
                return edges;
            }
        }
    }

    #[test]
    fn fixed_point_is_unchanged() {
        let pairs = [(0, 0), (0, 1), (1, 0), (1, 1)];
        let log = InteractionLog::from_dense_pairs(pairs).unwrap();
        assert_eq!(k_core_filter(&log, 2).unwrap(), log);
    }

    #[test]
    fn star_cascades_to_empty() {
        let log = InteractionLog::from_dense_pairs((0..5).map(|i| (0, i))).unwrap();
        assert!(matches!(k_core_filter(&log, 2), Err(Error::EmptyAfterFilter(2))));
    }

    #[test]
    fn rejects_zero_k() {
        let log = InteractionLog::from_dense_pairs([(0, 0)]).unwrap();
        assert!(k_core_filter(&log, 0).is_err());
    }

    #[test]
    fn matches_repeated_pruning_oracle() {
        for seed in 0..30 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pairs = Vec::new();
            for u in 0..25 {
                for i in 0..25 {
                    if rng.random_bool(0.15) {
                        pairs.push((u, i));
                    }
                }
            }
            let log = InteractionLog::from_dense_pairs(pairs.iter().copied()).unwrap();
            let expected = pruning_oracle(&pairs, 3);
            match k_core_filter(&log, 3) {
                Ok(filtered) => {
                    let mut got: Vec<(usize, usize)> = filtered
                        .interactions()
                        .iter()
                        .map(|x| {
                            (
                                filtered.user_id(x.user).parse().unwrap(),
                                filtered.item_id(x.item).parse().unwrap(),
                            )
                        })
                        .collect();
                    got.sort_unstable();
                    let mut want = expected.clone();
                    want.sort_unstable();
                    assert_eq!(got, want, "seed {seed}");
                    let g = filtered.to_graph();
                    assert!(g.user_degrees().iter().all(|&d| d >= 3));
                    assert!(g.item_degrees().iter().all(|&d| d >= 3));
                }
                Err(Error::EmptyAfterFilter(3)) => assert!(expected.is_empty(), "seed {seed}"),
                Err(e) => panic!("{e}"),
            }
        }
    }
}
