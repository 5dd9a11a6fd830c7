//! Synthetic few-shot benchmark generator.
//!
//! Every few-shot relation is the composition of two background relations:
//! r(h, t) holds iff p(h, m) and q(m, t) for some mediator m, so a two-hop
//! path in the background graph fully determines the task relation. Entities
//! live on a square lattice and every background relation is a fixed lattice
//! offset, so relations compose as vector sums. Evaluation relations reuse
//! composite sums that training relations cover, as fresh decompositions, so
//! an encoder never has to extrapolate to unseen translations. Heads
//! of designated one-to-many relations receive several distinct tails.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kgdata::{KgError, KnowledgeGraph, TaskSplit};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error("invalid generator config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SynthConfig {
    pub num_entities: usize,
    pub train_relations: usize,
    pub valid_relations: usize,
    pub test_relations: usize,
    /// Shared pool of background relations the compositions draw from.
    pub background_relations: usize,
    /// Distinct heads per few-shot relation.
    pub heads_per_relation: usize,
    /// Tails per head on one-to-many relations.
    pub arity: usize,
    /// Leading fraction of each split's relations made one-to-many.
    pub one_to_many_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_entities: 100,
            train_relations: 8,
            valid_relations: 2,
            test_relations: 4,
            background_relations: 8,
            heads_per_relation: 24,
            arity: 2,
            one_to_many_fraction: 0.0,
            seed: 0,
        }
    }
}

/// Generated dataset: named triples in file order plus the relation-name
/// split. Support sets are the first K triples of each relation in this
/// order.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub triples: Vec<(String, String, String)>,
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

fn relation_names(prefix: &str, count: usize) -> Vec<String> {
    (0..count).map(|i| format!("{prefix}{i}")).collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset, SynthError> {
    if cfg.num_entities < 4 {
        return Err(SynthError::BadConfig("need at least 4 entities".into()));
    }
    if cfg.background_relations == 0 || cfg.background_relations > 24 {
        return Err(SynthError::BadConfig(
            "background relations must be in 1..=24".into(),
        ));
    }
    if cfg.arity == 0 {
        return Err(SynthError::BadConfig("arity must be positive".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let entity = |i: usize| format!("e{i}");
    let bg = relation_names("bg", cfg.background_relations);
    let train = relation_names("train_r", cfg.train_relations);
    let valid = relation_names("valid_r", cfg.valid_relations);
    let test = relation_names("test_r", cfg.test_relations);

    // entities sit on a square lattice; entity i is the point
    // (i % side, i / side)
    let side = (cfg.num_entities as f64).sqrt().ceil() as i64;
    let n = cfg.num_entities;
    let coords = |i: usize| -> (i64, i64) { (i as i64 % side, i as i64 / side) };
    let at = |x: i64, y: i64| -> Option<usize> {
        if x < 0 || y < 0 || x >= side || y >= side {
            return None;
        }
        let i = (y * side + x) as usize;
        (i < n).then_some(i)
    };
    let shifted = |h: usize, (dx, dy): (i64, i64)| -> Option<usize> {
        let (x, y) = coords(h);
        at(x + dx, y + dy)
    };

    // each background relation is one fixed lattice offset
    let mut pool: Vec<(i64, i64)> = (-2..=2i64)
        .flat_map(|dx| (-2..=2i64).map(move |dy| (dx, dy)))
        .filter(|&(dx, dy)| (dx, dy) != (0, 0))
        .collect();
    pool.shuffle(&mut rng);
    let offsets: Vec<(i64, i64)> = pool[..cfg.background_relations].to_vec();

    let mut triples: Vec<(String, String, String)> = Vec::new();
    let mut seen: std::collections::HashSet<(String, String, String)> =
        std::collections::HashSet::new();
    let mut push = |triples: &mut Vec<(String, String, String)>,
                    h: String,
                    r: String,
                    t: String| {
        let key = (h.clone(), r.clone(), t.clone());
        if seen.insert(key) {
            triples.push((h, r, t));
        }
    };

    for (k, &off) in offsets.iter().enumerate() {
        for h in 0..n {
            if let Some(t) = shifted(h, off) {
                push(&mut triples, entity(h), bg[k].clone(), entity(t));
            }
        }
    }

    // each task relation composes `arity` offset pairs (p, q); its tails
    // are exactly the two-hop images of the head, so the support set fully
    // determines the relation.
    //
    // pairs are grouped by their composite sum and handed out round-robin
    // over the groups, train split first, so every composite translation an
    // evaluation relation needs has already appeared under some training
    // relation — unseen relations are new decompositions of known
    // translations, not new translations entirely
    let mut grouped: std::collections::BTreeMap<(i64, i64), Vec<(usize, usize)>> =
        std::collections::BTreeMap::new();
    for p in 0..offsets.len() {
        for q in 0..offsets.len() {
            let s = (offsets[p].0 + offsets[q].0, offsets[p].1 + offsets[q].1);
            if s != (0, 0) {
                grouped.entry(s).or_default().push((p, q));
            }
        }
    }
    let mut groups: Vec<Vec<(usize, usize)>> = grouped.into_values().collect();
    // favor sums with many decompositions, cap the sum vocabulary at the
    // training-relation count so training can cover it
    groups.sort_by_key(|g| std::cmp::Reverse(g.len()));
    groups.truncate(groups.len().min(cfg.train_relations.max(cfg.arity).max(2)));
    for g in &mut groups {
        g.shuffle(&mut rng);
    }
    groups.shuffle(&mut rng);
    // per-group cursors; a group cycles through its pairs when exhausted
    let mut next_pair = vec![0usize; groups.len()];
    let mut cursor = 0usize;

    for split in [&train, &valid, &test] {
        let one_to_many_count =
            (split.len() as f64 * cfg.one_to_many_fraction).ceil() as usize;
        for (i, rel) in split.iter().enumerate() {
            let arity = if i < one_to_many_count { cfg.arity } else { 1 };
            let (pairs, heads) = 'search: {
                for start in 0..groups.len() {
                    // walk groups round-robin, taking at most one pair per
                    // group so the composed sums stay distinct
                    let mut chosen: Vec<(usize, (usize, usize))> = Vec::new();
                    let mut gi = cursor + start;
                    for _ in 0..groups.len() {
                        if chosen.len() == arity {
                            break;
                        }
                        let g = gi % groups.len();
                        gi += 1;
                        let pair = groups[g][next_pair[g] % groups[g].len()];
                        chosen.push((g, pair));
                    }
                    if chosen.len() < arity {
                        continue;
                    }
                    // heads whose mediator and tail stay on the lattice for
                    // every composed pair
                    let mut eligible: Vec<usize> = (0..n)
                        .filter(|&h| {
                            chosen.iter().all(|&(_, (p, q))| {
                                shifted(h, offsets[p])
                                    .and_then(|m| shifted(m, offsets[q]))
                                    .is_some()
                            })
                        })
                        .collect();
                    if eligible.len() < cfg.heads_per_relation {
                        continue;
                    }
                    eligible.shuffle(&mut rng);
                    eligible.truncate(cfg.heads_per_relation);
                    for &(g, _) in &chosen {
                        next_pair[g] += 1;
                    }
                    cursor = gi % groups.len();
                    break 'search (
                        chosen.into_iter().map(|(_, pq)| pq).collect::<Vec<_>>(),
                        eligible,
                    );
                }
                return Err(SynthError::BadConfig(format!(
                    "cannot place relation {rel}: lattice too small for \
                     {} heads at arity {arity}",
                    cfg.heads_per_relation
                )));
            };
            for h in heads {
                for &(p, q) in &pairs {
                    let m = shifted(h, offsets[p]).expect("eligible head");
                    let t = shifted(m, offsets[q]).expect("eligible mediator");
                    push(&mut triples, entity(h), rel.clone(), entity(t));
                }
            }
        }
    }

    Ok(SynthDataset {
        triples,
        train,
        valid,
        test,
    })
}

/// Write `triples.tsv` and `split.json` into `dir`, creating it if needed.
pub fn write_dataset(dir: impl AsRef<Path>, data: &SynthDataset) -> Result<(), SynthError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut f = fs::File::create(dir.join("triples.tsv"))?;
    for (h, r, t) in &data.triples {
        writeln!(f, "{h}\t{r}\t{t}")?;
    }
    #[derive(Serialize)]
    struct NamedSplit<'a> {
        train: &'a [String],
        valid: &'a [String],
        test: &'a [String],
    }
    let split = NamedSplit {
        train: &data.train,
        valid: &data.valid,
        test: &data.test,
    };
    fs::write(
        dir.join("split.json"),
        serde_json::to_string_pretty(&split).map_err(std::io::Error::other)?,
    )?;
    Ok(())
}

/// Build the in-memory graph and index split from a generated dataset.
pub fn to_graph(data: &SynthDataset) -> Result<(KnowledgeGraph, TaskSplit), SynthError> {
    let (kg, _) = KnowledgeGraph::from_triples(&data.triples);
    let ids = |names: &[String]| -> Result<Vec<usize>, SynthError> {
        names
            .iter()
            .map(|n| {
                kg.relation_id(n).ok_or_else(|| {
                    SynthError::BadConfig(format!("relation {n} missing from graph"))
                })
            })
            .collect()
    };
    let split = TaskSplit {
        train: ids(&data.train)?,
        valid: ids(&data.valid)?,
        test: ids(&data.test)?,
    };
    split.check_disjoint(&kg)?;
    Ok((kg, split))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kgdata::{categorize_relation, RelationCategory};

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.triples, b.triples);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate(&SynthConfig::default()).unwrap();
        let b = generate(&SynthConfig {
            seed: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        assert_ne!(a.triples, b.triples);
    }

    #[test]
    fn split_sizes_match_config() {
        let cfg = SynthConfig::default();
        let data = generate(&cfg).unwrap();
        assert_eq!(data.train.len(), cfg.train_relations);
        assert_eq!(data.valid.len(), cfg.valid_relations);
        assert_eq!(data.test.len(), cfg.test_relations);
    }

    #[test]
    fn every_task_triple_has_a_two_hop_background_path() {
        let cfg = SynthConfig::default();
        let data = generate(&cfg).unwrap();
        let (kg, split) = to_graph(&data).unwrap();
        let task_rels: std::collections::HashSet<usize> = split
            .train
            .iter()
            .chain(&split.valid)
            .chain(&split.test)
            .copied()
            .collect();
        for &rel in &task_rels {
            for &(h, t) in kg.relation_triples(rel) {
                let reachable = kg.adjacency[h].iter().any(|&(r1, m)| {
                    !task_rels.contains(&r1)
                        && kg.adjacency[m]
                            .iter()
                            .any(|&(r2, u)| !task_rels.contains(&r2) && u == t)
                });
                assert!(reachable, "no background path for a task triple");
            }
        }
    }

    #[test]
    fn leading_relations_are_one_to_many() {
        let cfg = SynthConfig {
            arity: 3,
            one_to_many_fraction: 0.5,
            heads_per_relation: 12,
            ..SynthConfig::default()
        };
        let data = generate(&cfg).unwrap();
        let (kg, split) = to_graph(&data).unwrap();
        // fraction 0.5 over 4 test relations: first 2 one-to-many
        assert_eq!(
            categorize_relation(&kg, split.test[0]),
            RelationCategory::OneToMany
        );
        assert_eq!(
            categorize_relation(&kg, split.test[1]),
            RelationCategory::OneToMany
        );
        assert_eq!(
            categorize_relation(&kg, split.test[3]),
            RelationCategory::OneToOne
        );
    }

    #[test]
    fn relations_have_enough_triples_for_five_shot() {
        let cfg = SynthConfig::default();
        let data = generate(&cfg).unwrap();
        let (kg, split) = to_graph(&data).unwrap();
        for &rel in split.train.iter().chain(&split.valid).chain(&split.test) {
            assert!(kg.relation_triples(rel).len() > 5);
        }
    }

    #[test]
    fn written_dataset_round_trips() {
        let cfg = SynthConfig {
            num_entities: 49,
            train_relations: 2,
            valid_relations: 1,
            test_relations: 1,
            heads_per_relation: 6,
            arity: 2,
            ..SynthConfig::default()
        };
        let data = generate(&cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("synth-{}", std::process::id()));
        write_dataset(&dir, &data).unwrap();
        let (kg, _) = crate::kgdata::load_triples(dir.join("triples.tsv")).unwrap();
        let split = TaskSplit::load(dir.join("split.json"), &kg).unwrap();
        fs::remove_dir_all(&dir).ok();
        assert_eq!(kg.triples.len(), data.triples.len());
        assert_eq!(split.train.len(), 2);
        assert_eq!(split.test.len(), 1);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let err = generate(&SynthConfig {
            num_entities: 2,
            ..SynthConfig::default()
        })
        .unwrap_err();
        assert!(matches!(err, SynthError::BadConfig(_)));
        // a nonzero offset always disqualifies at least one lattice row or
        // column, so no relation can use every entity as a head
        let err = generate(&SynthConfig {
            heads_per_relation: 100,
            arity: 3,
            ..SynthConfig::default()
        })
        .unwrap_err();
        assert!(matches!(err, SynthError::BadConfig(_)));
    }
}
