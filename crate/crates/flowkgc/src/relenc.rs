//! Attentive Bi-LSTM relation encoder.
//!
//! Support-triple representations are run through a stacked bidirectional
//! LSTM (sequence presented in reverse support order), the hidden states
//! are combined by softmax attention over scalar Tanh logits, and the
//! result is projected into embedding space.

use rand::Rng;

use crate::diffcore::{concat, DiffError, ParamId, ParamStore, Tape, Var};

/// Weights of a single LSTM direction. Gate order: input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct LstmDirection {
    pub w: [ParamId; 4],
    pub u: [ParamId; 4],
    pub b: [ParamId; 4],
}

impl LstmDirection {
    fn new<R: Rng>(
        params: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let wb = 1.0 / (input_dim as f64).sqrt();
        let ub = 1.0 / (hidden as f64).sqrt();
        let names = ["i", "f", "g", "o"];
        let mut w = Vec::new();
        let mut u = Vec::new();
        let mut b = Vec::new();
        for g in names {
            w.push(params.register_uniform(
                format!("{prefix}.w_{g}"),
                vec![hidden, input_dim],
                wb,
                rng,
            ));
            u.push(params.register_uniform(
                format!("{prefix}.u_{g}"),
                vec![hidden, hidden],
                ub,
                rng,
            ));
            b.push(params.register_zeros(format!("{prefix}.b_{g}"), vec![hidden]));
        }
        LstmDirection {
            w: w.try_into().unwrap(),
            u: u.try_into().unwrap(),
            b: b.try_into().unwrap(),
        }
    }

    /// Run the recurrence over `inputs`, returning hidden states per step.
    /// Initial hidden/cell states are zero.
    fn run<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamStore,
        hidden: usize,
        inputs: &[Var<'t>],
    ) -> Result<Vec<Var<'t>>, DiffError> {
        let w: Vec<Var<'t>> = self.w.iter().map(|&id| tape.param(params, id)).collect();
        let u: Vec<Var<'t>> = self.u.iter().map(|&id| tape.param(params, id)).collect();
        let b: Vec<Var<'t>> = self.b.iter().map(|&id| tape.param(params, id)).collect();
        let mut h = tape.vector(&vec![0.0; hidden]);
        let mut c = tape.vector(&vec![0.0; hidden]);
        let mut out = Vec::with_capacity(inputs.len());
        for &x in inputs {
            let gate = |k: usize| -> Result<Var<'t>, DiffError> {
                w[k].matmul(x)?.add(u[k].matmul(h)?)?.add(b[k])
            };
            let i = gate(0)?.sigmoid();
            let f = gate(1)?.sigmoid();
            let g = gate(2)?.tanh();
            let o = gate(3)?.sigmoid();
            c = f.mul(c)?.add(i.mul(g)?)?;
            h = o.mul(c.tanh())?;
            out.push(h);
        }
        Ok(out)
    }
}

/// One bidirectional layer.
#[derive(Debug, Clone)]
pub struct BiLstmLayer {
    pub fwd: LstmDirection,
    pub bwd: LstmDirection,
}

/// Stacked Bi-LSTM with scalar-logit attention and a final projection
/// into d-dimensional embedding space.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub layers: Vec<BiLstmLayer>,
    pub hidden: usize,
    pub input_dim: usize,
    /// Attention row vector over a 2H hidden state.
    pub att_w: ParamId,
    /// Scalar attention bias.
    pub att_b: ParamId,
    /// Projection 2H -> d.
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

impl BiLstm {
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        input_dim: usize,
        hidden: usize,
        num_layers: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        assert!(hidden > 0 && num_layers > 0);
        let layers = (0..num_layers)
            .map(|l| {
                let dim = if l == 0 { input_dim } else { 2 * hidden };
                BiLstmLayer {
                    fwd: LstmDirection::new(
                        params,
                        &format!("bilstm.{l}.fwd"),
                        dim,
                        hidden,
                        rng,
                    ),
                    bwd: LstmDirection::new(
                        params,
                        &format!("bilstm.{l}.bwd"),
                        dim,
                        hidden,
                        rng,
                    ),
                }
            })
            .collect();
        let ab = 1.0 / (2.0 * hidden as f64).sqrt();
        BiLstm {
            layers,
            hidden,
            input_dim,
            att_w: params.register_uniform("bilstm.att_w", vec![2 * hidden], ab, rng),
            att_b: params.register_zeros("bilstm.att_b", vec![1]),
            proj_w: params.register_uniform(
                "bilstm.proj_w",
                vec![out_dim, 2 * hidden],
                ab,
                rng,
            ),
            proj_b: params.register_zeros("bilstm.proj_b", vec![out_dim]),
        }
    }

    /// Per-step outputs (forward || backward hidden state, dimension 2H)
    /// for the sequence exactly as given.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamStore,
        sequence: &[Var<'t>],
    ) -> Result<Vec<Var<'t>>, DiffError> {
        assert!(!sequence.is_empty(), "empty sequence");
        let mut inputs: Vec<Var<'t>> = sequence.to_vec();
        for layer in &self.layers {
            let f = layer.fwd.run(tape, params, self.hidden, &inputs)?;
            let reversed: Vec<Var<'t>> = inputs.iter().rev().copied().collect();
            let mut bwd = layer.bwd.run(tape, params, self.hidden, &reversed)?;
            bwd.reverse();
            inputs = f
                .iter()
                .zip(&bwd)
                .map(|(&a, &b)| concat(&[a, b], 0))
                .collect::<Result<_, _>>()?;
        }
        Ok(inputs)
    }

    /// Attention over hidden states: o_i = Tanh(w s'_i + b) as a scalar
    /// logit, beta = softmax(o), output = sum_i beta_i s'_i.
    pub fn attention_combine<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamStore,
        hidden_states: &[Var<'t>],
    ) -> Result<Var<'t>, DiffError> {
        assert!(!hidden_states.is_empty());
        let w = tape.param(params, self.att_w);
        let b = tape.param(params, self.att_b);
        let logits: Vec<Var<'t>> = hidden_states
            .iter()
            .map(|&s| Ok(w.dot(s)?.add(b)?.tanh()))
            .collect::<Result<_, DiffError>>()?;
        let beta = concat(&logits, 0)?.softmax()?;
        let stacked = crate::diffcore::stack_rows(hidden_states)?;
        beta.matmul(stacked)
    }

    /// Project a 2H vector into embedding space.
    pub fn project<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamStore,
        combined: Var<'t>,
    ) -> Result<Var<'t>, DiffError> {
        tape.param(params, self.proj_w)
            .matmul(combined)?
            .add(tape.param(params, self.proj_b))
    }

    /// Full relation representation from support-triple representations
    /// (given in support order s_1..s_K; consumed in reverse, s_K first).
    pub fn encode_support<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamStore,
        supports: &[Var<'t>],
    ) -> Result<Var<'t>, DiffError> {
        let reversed: Vec<Var<'t>> = supports.iter().rev().copied().collect();
        let hidden = self.forward(tape, params, &reversed)?;
        let combined = self.attention_combine(tape, params, &hidden)?;
        self.project(tape, params, combined)
    }
}
