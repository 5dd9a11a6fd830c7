//! Assembled few-shot completion model: GNN entity encoder, Bi-LSTM
//! relation encoder, latent encoder with a flow posterior, and the
//! manifold decoder, all sharing one parameter store.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::arpgnn::{capped_neighbors, entity_forward, ArpGnn, ArpGnnLayerVars};
use crate::decoder::Decoder;
use crate::diffcore::{DiffError, ParamId, ParamStore, Tape, Var};
use crate::kgdata::{EmbeddingTable, KnowledgeGraph};
use crate::npflow::{FlowChain, FlowKind, NpEncoder};
use crate::relenc::BiLstm;

/// Architecture hyperparameters; everything needed to rebuild the
/// parameter layout deterministically.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    /// Embedding width shared by entities and relations.
    pub d: usize,
    /// Latent width.
    pub d_z: usize,
    pub gnn_layers: usize,
    pub neighbor_cap: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    /// Hidden width of the latent-encoder MLPs.
    pub np_hidden: usize,
    /// Aggregated context width.
    pub d_c: usize,
    pub flow_kind: FlowKind,
    /// Number of flow layers; 0 leaves the base Gaussian untouched.
    pub flow_depth: usize,
    /// Keep the pretrained embeddings fixed during training.
    pub freeze_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            d_z: 32,
            gnn_layers: 1,
            neighbor_cap: 64,
            lstm_hidden: 32,
            lstm_layers: 1,
            np_hidden: 64,
            d_c: 32,
            flow_kind: FlowKind::Planar,
            flow_depth: 10,
            freeze_embeddings: true,
        }
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub gnn: ArpGnn,
    pub relenc: BiLstm,
    pub np: NpEncoder,
    pub flow: FlowChain,
    pub decoder: Decoder,
    pub entity_emb: ParamId,
    pub relation_emb: ParamId,
    /// Triple encodings performed since the last reset; one per
    /// (head, tail) pair pushed through the GNN for a task.
    encode_count: AtomicU64,
}

impl Model {
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        cfg: ModelConfig,
        embeddings: &EmbeddingTable,
        rng: &mut R,
    ) -> Self {
        let num_relations = embeddings.relations.shape[0];
        let gnn = ArpGnn::new(
            params,
            num_relations,
            cfg.d,
            cfg.gnn_layers,
            cfg.neighbor_cap,
            rng,
        );
        let relenc = BiLstm::new(
            params,
            2 * cfg.d,
            cfg.lstm_hidden,
            cfg.lstm_layers,
            cfg.d,
            rng,
        );
        let np = NpEncoder::new(params, cfg.d, cfg.np_hidden, cfg.d_c, cfg.d_z, rng);
        let flow = FlowChain::new(params, cfg.flow_kind, cfg.flow_depth, cfg.d_z, rng);
        let decoder = Decoder::new(params, cfg.d, cfg.d_z, rng);
        let entity_emb = params.register("emb.entities", embeddings.entities.clone());
        let relation_emb = params.register("emb.relations", embeddings.relations.clone());
        Model {
            cfg,
            gnn,
            relenc,
            np,
            flow,
            decoder,
            entity_emb,
            relation_emb,
            encode_count: AtomicU64::new(0),
        }
    }

    pub fn reset_encode_count(&self) {
        self.encode_count.store(0, Ordering::Relaxed);
    }

    pub fn encode_count(&self) -> u64 {
        self.encode_count.load(Ordering::Relaxed)
    }

    /// Ids of every trainable parameter, honoring the embedding freeze.
    pub fn trainable_ids(&self, params: &ParamStore) -> Vec<ParamId> {
        params
            .iter()
            .map(|(id, _)| id)
            .filter(|&id| {
                !(self.cfg.freeze_embeddings
                    && (id == self.entity_emb || id == self.relation_emb))
            })
            .collect()
    }
}

/// One task's worth of encoding work on a single tape. Entity
/// representations are memoized per (entity, layer); neighbor subsampling
/// happens once per memo entry from the episode seed.
pub struct Episode<'m, 't> {
    pub model: &'m Model,
    pub tape: &'t Tape,
    pub kg: &'m KnowledgeGraph,
    layer_vars: Vec<ArpGnnLayerVars<'t>>,
    entity_table: Var<'t>,
    relation_table: Var<'t>,
    memo: RefCell<HashMap<(usize, usize), Var<'t>>>,
    rel_memo: RefCell<HashMap<usize, Var<'t>>>,
    rng: RefCell<ChaCha12Rng>,
}

impl<'m, 't> Episode<'m, 't> {
    pub fn new(
        model: &'m Model,
        tape: &'t Tape,
        params: &ParamStore,
        kg: &'m KnowledgeGraph,
        seed: u64,
    ) -> Self {
        let layer_vars = model
            .gnn
            .layers
            .iter()
            .map(|l| l.vars(tape, params))
            .collect();
        let (entity_table, relation_table) = if model.cfg.freeze_embeddings {
            (
                tape.constant(&params.get(model.entity_emb).value),
                tape.constant(&params.get(model.relation_emb).value),
            )
        } else {
            (
                tape.param(params, model.entity_emb),
                tape.param(params, model.relation_emb),
            )
        };
        Episode {
            model,
            tape,
            kg,
            layer_vars,
            entity_table,
            relation_table,
            memo: RefCell::new(HashMap::new()),
            rel_memo: RefCell::new(HashMap::new()),
            rng: RefCell::new(ChaCha12Rng::seed_from_u64(seed)),
        }
    }

    /// Relation embedding row; relations are not propagated by the GNN.
    pub fn relation_rep(&self, r: usize) -> Result<Var<'t>, DiffError> {
        if let Some(&v) = self.rel_memo.borrow().get(&r) {
            return Ok(v);
        }
        let row = self.relation_table.row(r)?;
        self.rel_memo.borrow_mut().insert(r, row);
        Ok(row)
    }

    fn rep(&self, v: usize, level: usize) -> Result<Var<'t>, DiffError> {
        if level == 0 {
            // base rows are also memoized so that each row-gather node is
            // pushed once per episode
            if let Some(&cached) = self.memo.borrow().get(&(v, 0)) {
                return Ok(cached);
            }
            let row = self.entity_table.row(v)?;
            self.memo.borrow_mut().insert((v, 0), row);
            return Ok(row);
        }
        if let Some(&cached) = self.memo.borrow().get(&(v, level)) {
            return Ok(cached);
        }
        let picked: Vec<(usize, usize)> = {
            let mut rng = self.rng.borrow_mut();
            capped_neighbors(&self.kg.adjacency[v], self.model.gnn.neighbor_cap, &mut *rng)
                .into_iter()
                .copied()
                .collect()
        };
        let mut neighbors = Vec::with_capacity(picked.len());
        for (r, u) in picked {
            neighbors.push((r, self.relation_rep(r)?, self.rep(u, level - 1)?));
        }
        let e_v = self.rep(v, level - 1)?;
        let out = entity_forward(&self.layer_vars[level - 1], e_v, &neighbors)?;
        self.memo.borrow_mut().insert((v, level), out);
        Ok(out)
    }

    /// Full-depth entity representation. Does not count as a triple
    /// encoding; candidate scoring during ranking goes through here.
    pub fn entity_rep(&self, v: usize) -> Result<Var<'t>, DiffError> {
        self.rep(v, self.model.cfg.gnn_layers)
    }

    /// Encode one (head, tail) pair; the unit the complexity counter
    /// tracks.
    pub fn encode_triple(&self, h: usize, t: usize) -> Result<(Var<'t>, Var<'t>), DiffError> {
        self.model.encode_count.fetch_add(1, Ordering::Relaxed);
        Ok((self.entity_rep(h)?, self.entity_rep(t)?))
    }

    /// Relation representation from encoded support pairs (in support
    /// order), via the Bi-LSTM attention encoder.
    pub fn relation_from_support(
        &self,
        params: &ParamStore,
        support: &[(Var<'t>, Var<'t>)],
    ) -> Result<Var<'t>, DiffError> {
        let seqs: Vec<Var<'t>> = support
            .iter()
            .map(|&(h, t)| crate::arpgnn::triple_representation(h, t))
            .collect::<Result<_, _>>()?;
        self.model.relenc.encode_support(self.tape, params, &seqs)
    }
}
