//! Knowledge-graph loading, episodic task construction, and embeddings.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::Tensor;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("empty triple file")]
    EmptyFile,
    #[error("relation {relation} has {have} triples, needs more than {need}")]
    InsufficientData {
        relation: String,
        have: usize,
        need: usize,
    },
    #[error("no valid negative tail exists for head {head} under relation {relation}")]
    NoNegativeTail { head: String, relation: String },
    #[error("embedding file missing names: {0:?}")]
    MissingNames(Vec<String>),
    #[error("unknown relation name in split: {0}")]
    UnknownRelation(String),
    #[error("split sets overlap on relation {0}")]
    SplitOverlap(String),
}

/// Entity/relation vocabularies, triple store, and per-entity adjacency.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    pub entities: Vec<String>,
    pub relations: Vec<String>,
    entity_index: HashMap<String, usize>,
    relation_index: HashMap<String, usize>,
    /// (head, relation, tail) triples, deduplicated, in first-appearance order.
    pub triples: Vec<(usize, usize, usize)>,
    /// Outgoing (relation, neighbor) pairs per entity; excludes any
    /// relations passed to [`KnowledgeGraph::rebuild_adjacency`].
    pub adjacency: Vec<Vec<(usize, usize)>>,
    /// Triples grouped per relation, in file order.
    rel_triples: Vec<Vec<(usize, usize)>>,
    triple_set: HashSet<(usize, usize, usize)>,
}

impl KnowledgeGraph {
    pub fn from_triples(named: &[(String, String, String)]) -> (Self, usize) {
        let mut kg = KnowledgeGraph {
            entities: Vec::new(),
            relations: Vec::new(),
            entity_index: HashMap::new(),
            relation_index: HashMap::new(),
            triples: Vec::new(),
            adjacency: Vec::new(),
            rel_triples: Vec::new(),
            triple_set: HashSet::new(),
        };
        let mut duplicates = 0usize;
        for (h, r, t) in named {
            let hi = kg.intern_entity(h);
            let ri = kg.intern_relation(r);
            let ti = kg.intern_entity(t);
            if !kg.triple_set.insert((hi, ri, ti)) {
                duplicates += 1;
                continue;
            }
            kg.triples.push((hi, ri, ti));
            kg.rel_triples[ri].push((hi, ti));
        }
        kg.rebuild_adjacency(&HashSet::new());
        (kg, duplicates)
    }

    fn intern_entity(&mut self, name: &str) -> usize {
        if let Some(&i) = self.entity_index.get(name) {
            return i;
        }
        let i = self.entities.len();
        self.entities.push(name.to_string());
        self.entity_index.insert(name.to_string(), i);
        i
    }

    fn intern_relation(&mut self, name: &str) -> usize {
        if let Some(&i) = self.relation_index.get(name) {
            return i;
        }
        let i = self.relations.len();
        self.relations.push(name.to_string());
        self.relation_index.insert(name.to_string(), i);
        self.rel_triples.push(Vec::new());
        i
    }

    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.entity_index.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relation_index.get(name).copied()
    }

    /// Triples of one relation, file order.
    pub fn relation_triples(&self, relation: usize) -> &[(usize, usize)] {
        &self.rel_triples[relation]
    }

    pub fn contains(&self, h: usize, r: usize, t: usize) -> bool {
        self.triple_set.contains(&(h, r, t))
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    /// Rebuild adjacency from the background-graph direction, dropping
    /// triples of `excluded` relations (leakage rule for eval relations).
    pub fn rebuild_adjacency(&mut self, excluded: &HashSet<usize>) {
        self.adjacency = vec![Vec::new(); self.entities.len()];
        for &(h, r, t) in &self.triples {
            if excluded.contains(&r) {
                continue;
            }
            self.adjacency[h].push((r, t));
        }
    }
}

/// Parse a tab-separated triple file ("head\trelation\ttail" per line).
/// Duplicate triples are dropped; the count of drops is returned.
pub fn load_triples(path: impl AsRef<Path>) -> Result<(KnowledgeGraph, usize), KgError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| KgError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut named = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(KgError::Parse {
                line: lineno + 1,
                message: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        named.push((
            fields[0].to_string(),
            fields[1].to_string(),
            fields[2].to_string(),
        ));
    }
    if named.is_empty() {
        return Err(KgError::EmptyFile);
    }
    Ok(KnowledgeGraph::from_triples(&named))
}

/// One relation's episode: labeled context plus query positives/negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotTask {
    pub relation: usize,
    /// (head, tail, label); exactly K label-1 entries followed by n*K label-0.
    pub context: Vec<(usize, usize, f64)>,
    pub target_pos: Vec<(usize, usize)>,
    pub target_neg: Vec<(usize, usize)>,
    pub k: usize,
}

/// Sample a corrupted tail for (head, relation): uniform over entities,
/// rejecting any tail that forms a true triple of this relation.
fn sample_negative_tail<R: Rng>(
    kg: &KnowledgeGraph,
    relation: usize,
    head: usize,
    rng: &mut R,
) -> Result<usize, KgError> {
    let n = kg.num_entities();
    for _ in 0..64 * n {
        let t = rng.random_range(0..n);
        if !kg.contains(head, relation, t) {
            return Ok(t);
        }
    }
    // rejection failed; scan deterministically
    (0..n)
        .find(|&t| !kg.contains(head, relation, t))
        .ok_or_else(|| KgError::NoNegativeTail {
            head: kg.entities[head].clone(),
            relation: kg.relations[relation].clone(),
        })
}

/// Build a few-shot episode: the first K triples (file order) are the
/// support, the rest are query positives; negatives corrupt tails.
pub fn build_task<R: Rng>(
    kg: &KnowledgeGraph,
    relation: usize,
    k: usize,
    n: usize,
    query_neg_per_pos: usize,
    rng: &mut R,
) -> Result<FewShotTask, KgError> {
    let triples = kg.relation_triples(relation).to_vec();
    build_task_from(kg, relation, triples, k, n, query_neg_per_pos, rng)
}

/// Training-time episode: the support is a fresh random K-subset each call,
/// so the relation encoder sees many distinct supports per relation instead
/// of one fixed sequence.
pub fn build_task_resampled<R: Rng>(
    kg: &KnowledgeGraph,
    relation: usize,
    k: usize,
    n: usize,
    query_neg_per_pos: usize,
    rng: &mut R,
) -> Result<FewShotTask, KgError> {
    let mut triples = kg.relation_triples(relation).to_vec();
    triples.shuffle(rng);
    build_task_from(kg, relation, triples, k, n, query_neg_per_pos, rng)
}

fn build_task_from<R: Rng>(
    kg: &KnowledgeGraph,
    relation: usize,
    triples: Vec<(usize, usize)>,
    k: usize,
    n: usize,
    query_neg_per_pos: usize,
    rng: &mut R,
) -> Result<FewShotTask, KgError> {
    if triples.len() <= k {
        return Err(KgError::InsufficientData {
            relation: kg.relations[relation].clone(),
            have: triples.len(),
            need: k,
        });
    }
    let support = &triples[..k];
    let queries = &triples[k..];

    let mut context: Vec<(usize, usize, f64)> =
        support.iter().map(|&(h, t)| (h, t, 1.0)).collect();
    for &(h, _) in support {
        for _ in 0..n {
            let t_neg = sample_negative_tail(kg, relation, h, rng)?;
            context.push((h, t_neg, 0.0));
        }
    }
    let target_pos: Vec<(usize, usize)> = queries.to_vec();
    let mut target_neg = Vec::new();
    for &(h, _) in queries {
        for _ in 0..query_neg_per_pos {
            target_neg.push((h, sample_negative_tail(kg, relation, h, rng)?));
        }
    }
    Ok(FewShotTask {
        relation,
        context,
        target_pos,
        target_neg,
        k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RelationCategory {
    OneToOne,
    OneToMany,
}

/// One-to-many iff the mean number of distinct tails per head exceeds 1.5.
pub fn categorize_relation(kg: &KnowledgeGraph, relation: usize) -> RelationCategory {
    let mut tails_per_head: HashMap<usize, HashSet<usize>> = HashMap::new();
    for &(h, t) in kg.relation_triples(relation) {
        tails_per_head.entry(h).or_default().insert(t);
    }
    if tails_per_head.is_empty() {
        return RelationCategory::OneToOne;
    }
    let total: usize = tails_per_head.values().map(|s| s.len()).sum();
    let mean = total as f64 / tails_per_head.len() as f64;
    if mean > 1.5 {
        RelationCategory::OneToMany
    } else {
        RelationCategory::OneToOne
    }
}

/// Train/valid/test relation split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NamedSplit {
    train: Vec<String>,
    valid: Vec<String>,
    test: Vec<String>,
}

impl TaskSplit {
    /// Load a JSON split file {"train": [names], "valid": [...], "test": [...]}.
    pub fn load(path: impl AsRef<Path>, kg: &KnowledgeGraph) -> Result<Self, KgError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| KgError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let named: NamedSplit = serde_json::from_str(&text).map_err(|e| KgError::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        let resolve = |names: &[String]| -> Result<Vec<usize>, KgError> {
            names
                .iter()
                .map(|n| {
                    kg.relation_id(n)
                        .ok_or_else(|| KgError::UnknownRelation(n.clone()))
                })
                .collect()
        };
        let split = TaskSplit {
            train: resolve(&named.train)?,
            valid: resolve(&named.valid)?,
            test: resolve(&named.test)?,
        };
        split.check_disjoint(kg)?;
        Ok(split)
    }

    pub fn save(&self, path: impl AsRef<Path>, kg: &KnowledgeGraph) -> Result<(), KgError> {
        let named = NamedSplit {
            train: self.train.iter().map(|&r| kg.relations[r].clone()).collect(),
            valid: self.valid.iter().map(|&r| kg.relations[r].clone()).collect(),
            test: self.test.iter().map(|&r| kg.relations[r].clone()).collect(),
        };
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(&named).unwrap()).map_err(|source| {
            KgError::Io {
                path: path.display().to_string(),
                source,
            }
        })
    }

    pub fn check_disjoint(&self, kg: &KnowledgeGraph) -> Result<(), KgError> {
        let mut seen = HashSet::new();
        for &r in self.train.iter().chain(&self.valid).chain(&self.test) {
            if !seen.insert(r) {
                return Err(KgError::SplitOverlap(kg.relations[r].clone()));
            }
        }
        Ok(())
    }

    /// Relations whose triples must not appear in background adjacency.
    pub fn eval_relations(&self) -> HashSet<usize> {
        self.valid.iter().chain(&self.test).copied().collect()
    }
}

/// Pretrained entity and relation embedding matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub entities: Tensor,
    pub relations: Tensor,
    pub dim: usize,
}

/// Uniform(-6/sqrt(d), 6/sqrt(d)) initialization.
pub fn init_embeddings<R: Rng>(kg: &KnowledgeGraph, d: usize, rng: &mut R) -> EmbeddingTable {
    assert!(d >= 1);
    let bound = 6.0 / (d as f64).sqrt();
    let mut draw = |rows: usize| {
        let data = (0..rows * d).map(|_| rng.random_range(-bound..bound)).collect();
        Tensor::matrix(rows, d, data)
    };
    EmbeddingTable {
        entities: draw(kg.num_entities()),
        relations: draw(kg.num_relations()),
        dim: d,
    }
}

/// Text format: header "count dim", then "name v1 v2 ... vd" per line.
/// Entities first, then relations.
pub fn save_embeddings(
    table: &EmbeddingTable,
    kg: &KnowledgeGraph,
    path: impl AsRef<Path>,
) -> Result<(), KgError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|source| KgError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    let count = kg.num_entities() + kg.num_relations();
    let io = |source| KgError::Io {
        path: path.display().to_string(),
        source,
    };
    writeln!(w, "{} {}", count, table.dim).map_err(io)?;
    for (i, name) in kg.entities.iter().enumerate() {
        write!(w, "{name}").map_err(io)?;
        for v in table.entities.row(i) {
            write!(w, " {v}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    for (i, name) in kg.relations.iter().enumerate() {
        write!(w, "{name}").map_err(io)?;
        for v in table.relations.row(i) {
            write!(w, " {v}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    Ok(())
}

/// Load the text format written by [`save_embeddings`]. Every entity and
/// relation in the vocabulary must be covered.
pub fn load_embeddings(
    path: impl AsRef<Path>,
    kg: &KnowledgeGraph,
) -> Result<EmbeddingTable, KgError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| KgError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(KgError::EmptyFile)?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 2 {
        return Err(KgError::Parse {
            line: 1,
            message: "expected header \"count dim\"".into(),
        });
    }
    let dim: usize = parts[1].parse().map_err(|_| KgError::Parse {
        line: 1,
        message: "bad dim in header".into(),
    })?;
    let mut entities = Tensor::zeros(vec![kg.num_entities(), dim]);
    let mut relations = Tensor::zeros(vec![kg.num_relations(), dim]);
    let mut seen_e = vec![false; kg.num_entities()];
    let mut seen_r = vec![false; kg.num_relations()];
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let name = it.next().ok_or(KgError::Parse {
            line: lineno + 1,
            message: "missing name".into(),
        })?;
        let values: Vec<f64> = it
            .map(|v| {
                v.parse().map_err(|_| KgError::Parse {
                    line: lineno + 1,
                    message: format!("bad float {v:?}"),
                })
            })
            .collect::<Result<_, _>>()?;
        if values.len() != dim {
            return Err(KgError::Parse {
                line: lineno + 1,
                message: format!("expected {dim} values, got {}", values.len()),
            });
        }
        if let Some(i) = kg.entity_id(name) {
            entities.row_mut(i).copy_from_slice(&values);
            seen_e[i] = true;
        }
        if let Some(i) = kg.relation_id(name) {
            relations.row_mut(i).copy_from_slice(&values);
            seen_r[i] = true;
        }
    }
    let mut missing: Vec<String> = seen_e
        .iter()
        .enumerate()
        .filter(|(_, s)| !**s)
        .map(|(i, _)| kg.entities[i].clone())
        .collect();
    missing.extend(
        seen_r
            .iter()
            .enumerate()
            .filter(|(_, s)| !**s)
            .map(|(i, _)| kg.relations[i].clone()),
    );
    if !missing.is_empty() {
        return Err(KgError::MissingNames(missing));
    }
    Ok(EmbeddingTable {
        entities,
        relations,
        dim,
    })
}

/// Margin-ranking TransE pretraining on ||h + r - t||^2 vs corrupted tails.
pub fn pretrain_transe<R: Rng>(
    kg: &KnowledgeGraph,
    d: usize,
    epochs: usize,
    margin: f64,
    lr: f64,
    rng: &mut R,
) -> Result<EmbeddingTable, KgError> {
    let mut table = init_embeddings(kg, d, rng);
    for epoch in 0..epochs {
        // harmonic step-size decay so edge residuals keep shrinking
        // instead of hovering at an SGD noise floor
        let lr = lr * 100.0 / (100.0 + epoch as f64);
        for &(h, r, t) in &kg.triples {
            let t_neg = sample_negative_tail(kg, r, h, rng)?;
            let score = |tail: usize| -> f64 {
                (0..d)
                    .map(|j| {
                        let v = table.entities.row(h)[j] + table.relations.row(r)[j]
                            - table.entities.row(tail)[j];
                        v * v
                    })
                    .sum()
            };
            let hinge_active = score(t) - score(t_neg) + margin > 0.0;
            // hinge gradient plus a small pull of the positive distance
            // toward zero; the pull keeps shrinking edge residuals after
            // the margin is met, which matters when relations compose
            const POS_PULL: f64 = 0.3;
            for j in 0..d {
                let pos_diff = table.entities.row(h)[j] + table.relations.row(r)[j]
                    - table.entities.row(t)[j];
                let neg_diff = table.entities.row(h)[j] + table.relations.row(r)[j]
                    - table.entities.row(t_neg)[j];
                let w = if hinge_active { 1.0 + POS_PULL } else { POS_PULL };
                let g_pos = 2.0 * pos_diff * w;
                let g_neg = if hinge_active { -2.0 * neg_diff } else { 0.0 };
                table.entities.row_mut(h)[j] -= lr * (g_pos + g_neg);
                table.relations.row_mut(r)[j] -= lr * (g_pos + g_neg);
                table.entities.row_mut(t)[j] -= lr * (-g_pos);
                table.entities.row_mut(t_neg)[j] -= lr * (-g_neg);
            }
        }
    }
    Ok(table)
}
