//! A small seeded graph where descriptions reveal an entity's family while
//! links follow random pairings, so textual and structural signals answer
//! different queries.
//!
//! Entities form 8 families of 8. The first of each family is its leader and
//! every other member is linked to its own leader by `member of`.
//! Descriptions name only the family and whether the entity leads it, so
//! text tells members of one family apart from other families but not from
//! each other. The remaining relations are random matchings, a random cycle
//! and a random permutation (each with a reverse relation) and carry no
//! family information.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kg_store::{GraphBuilder, KnowledgeGraph, Split};

const FAMILIES: [&str; 8] = ["amber", "basalt", "cobalt", "dune", "ember", "fjord", "glacier", "harbor"];
const ROLES: [&str; 8] = ["leader", "scout", "smith", "healer", "archer", "weaver", "miner", "scribe"];
pub const FAMILY_RELATION: &str = "member of";
const MATCHINGS: [&str; 3] = ["partnered with", "allied with", "rivals"];
/// `(forward, reverse)`: the forward relation is always fully observed.
const ORDERED: [(&str, &str, bool); 2] = [("precedes", "follows", true), ("mentors", "mentored by", false)];

#[derive(Clone, Copy, Debug)]
pub struct SyntheticConfig {
    pub seed: u64,
    /// Share of `member of` links held out for valid + test.
    pub family_holdout: f64,
    /// Share of reverse links (matching partners, reverse relations) held out
    /// for valid + test.
    pub pair_holdout: f64,
    /// Of the held-out triples, the share sent to valid.
    pub valid_share: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            family_holdout: 0.5,
            pair_holdout: 0.2,
            valid_share: 0.25,
        }
    }
}

pub fn entity_name(family: usize, role: usize) -> String {
    format!("{}_{}", FAMILIES[family], ROLES[role])
}

pub fn description(family: usize, role: usize) -> String {
    if role == 0 {
        format!("leader of the {} family", FAMILIES[family])
    } else {
        format!("member of the {} family", FAMILIES[family])
    }
}

type Named = (String, &'static str, String);

/// The 64-entity / 8-relation graph (not yet inverse-augmented).
pub fn synthetic_kg(config: &SyntheticConfig) -> Result<KnowledgeGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let all: Vec<String> = (0..FAMILIES.len())
        .flat_map(|f| (0..ROLES.len()).map(move |r| entity_name(f, r)))
        .collect();

    let mut train: Vec<Named> = Vec::new();
    let mut held: Vec<Named> = Vec::new();
    let mut hold = |t: Named, share: f64, rng: &mut ChaCha8Rng, train: &mut Vec<Named>| {
        if rng.gen::<f64>() < share {
            held.push(t);
        } else {
            train.push(t);
        }
    };

    for rel in MATCHINGS {
        let mut order = all.clone();
        order.shuffle(&mut rng);
        for pair in order.chunks(2) {
            train.push((pair[0].clone(), rel, pair[1].clone()));
            hold((pair[1].clone(), rel, pair[0].clone()), config.pair_holdout, &mut rng, &mut train);
        }
    }
    for (fwd, rev, cycle) in ORDERED {
        let mut order = all.clone();
        order.shuffle(&mut rng);
        let n = order.len();
        for i in 0..n {
            let (a, b) = if cycle {
                (order[i].clone(), order[(i + 1) % n].clone())
            } else {
                (all[i].clone(), order[i].clone())
            };
            train.push((a.clone(), fwd, b.clone()));
            hold((b, rev, a), config.pair_holdout, &mut rng, &mut train);
        }
    }
    for f in 0..FAMILIES.len() {
        for r in 1..ROLES.len() {
            let t = (entity_name(f, r), FAMILY_RELATION, entity_name(f, 0));
            hold(t, config.family_holdout, &mut rng, &mut train);
        }
    }

    let mut b = GraphBuilder::new();
    train.shuffle(&mut rng);
    for (h, r, t) in &train {
        b.push(Split::Train, h, r, t);
    }
    held.shuffle(&mut rng);
    let n_valid = (held.len() as f64 * config.valid_share).round() as usize;
    for (i, (h, r, t)) in held.iter().enumerate() {
        let split = if i < n_valid { Split::Valid } else { Split::Test };
        b.push(split, h, r, t);
    }
    for f in 0..FAMILIES.len() {
        for r in 0..ROLES.len() {
            b.describe(&entity_name(f, r), &description(f, r));
        }
    }
    b.build()
}
