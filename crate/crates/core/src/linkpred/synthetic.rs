//! Seeded synthetic graphs for tests and benchmarks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kgdata::{Dataset, Entity, Qid, Triple};

const FILLER: [&str; 12] =
    ["old", "large", "small", "river", "north", "stone", "green", "quiet", "place", "site", "famous", "local"];

pub const MEMBER_RELATION: &str = "belongs_to";
pub const NEAR_RELATION: &str = "near";

/// Groups of entities attached to one hub each. Every description in a group
/// carries the group's marker word. Cold members appear only in test triples,
/// so their hub can be inferred from text alone.
#[derive(Clone, Debug)]
pub struct TextInformativeSpec {
    pub groups: usize,
    pub warm_per_group: usize,
    pub cold_per_group: usize,
    pub seed: u64,
}

impl Default for TextInformativeSpec {
    fn default() -> Self {
        Self { groups: 4, warm_per_group: 8, cold_per_group: 2, seed: 7 }
    }
}

fn marker(rng: &mut ChaCha8Rng) -> String {
    (0..7).map(|_| char::from(b'a' + rng.gen_range(0..26u8))).collect()
}

pub fn text_informative_kg(spec: &TextInformativeSpec) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut entities = Vec::new();
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let mut next_qid = 1u64;
    let mut entity = |id: String, description: String| {
        let e = Entity {
            qid: Qid::parse(&format!("Q{next_qid}")).unwrap(),
            name: id.clone(),
            id,
            description: Some(description),
        };
        next_qid += 1;
        e
    };

    for g in 0..spec.groups {
        let word = marker(&mut rng);
        let describe = |rng: &mut ChaCha8Rng| {
            let fill: Vec<&str> = FILLER.choose_multiple(rng, 2).copied().collect();
            format!("{} {word} {}", fill[0], fill[1])
        };
        let hub = format!("hub{g}");
        entities.push(entity(hub.clone(), describe(&mut rng)));
        let warm: Vec<String> = (0..spec.warm_per_group).map(|i| format!("m{g}_{i}")).collect();
        for w in &warm {
            entities.push(entity(w.clone(), describe(&mut rng)));
            train.push(Triple::new(w.as_str(), MEMBER_RELATION, hub.as_str()));
        }
        for pair in warm.windows(2) {
            let t = Triple::new(pair[0].as_str(), NEAR_RELATION, pair[1].as_str());
            if valid.len() < spec.groups && pair[0].ends_with("_0") {
                valid.push(t);
            } else {
                train.push(t);
            }
        }
        for i in 0..spec.cold_per_group {
            let c = format!("c{g}_{i}");
            entities.push(entity(c.clone(), describe(&mut rng)));
            test.push(Triple::new(c.as_str(), MEMBER_RELATION, hub.as_str()));
        }
    }
    Dataset::new(entities, train, valid, test, Vec::new()).expect("synthetic graph is well formed")
}

/// Six entities, two relations: a ring under `next` and a few `pair` links.
pub fn toy_kg() -> Dataset {
    let entities = (0..6)
        .map(|i| Entity {
            id: format!("e{i}"),
            qid: Qid::parse(&format!("Q{}", i + 1)).unwrap(),
            name: format!("entity {i}"),
            description: Some(format!("entity number {i} {}", FILLER[i])),
        })
        .collect();
    let mut train: Vec<Triple> =
        (0..6).map(|i| Triple::new(format!("e{i}"), "next", format!("e{}", (i + 1) % 6))).collect();
    train.extend([Triple::new("e0", "pair", "e3"), Triple::new("e1", "pair", "e4")]);
    let test = vec![Triple::new("e2", "pair", "e5")];
    Dataset::new(entities, train, Vec::new(), test, Vec::new()).expect("toy graph is well formed")
}
