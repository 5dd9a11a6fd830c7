//! Stochastic manifold decoder.
//!
//! A triple is scored by how far its translation residual lies from a
//! latent-dependent sphere: score = (|h'' + r' - t''|^2 - D_z^2)^2, where
//! h'' and t'' are the encoded endpoints shifted by latent projections and
//! D_z is a latent-dependent radius. Lower scores are better.

use rand::Rng;

use crate::diffcore::{DiffError, ParamStore, Tape, Var};
use crate::npflow::Mlp;

#[derive(Debug, Clone)]
pub struct Decoder {
    /// Latent shift applied to the head embedding, d_z -> d.
    pub head_proj: Mlp,
    /// Latent shift applied to the tail embedding, d_z -> d.
    pub tail_proj: Mlp,
    /// Latent-dependent manifold radius, d_z -> 1.
    pub radius: Mlp,
    pub d: usize,
    pub d_z: usize,
}

impl Decoder {
    pub fn new<R: Rng>(params: &mut ParamStore, d: usize, d_z: usize, rng: &mut R) -> Self {
        Decoder {
            head_proj: Mlp::new(params, "dec.head", d_z, d_z, d, false, rng),
            tail_proj: Mlp::new(params, "dec.tail", d_z, d_z, d, false, rng),
            radius: Mlp::new(params, "dec.radius", d_z, d_z, 1, false, rng),
            d,
            d_z,
        }
    }

    /// Squared translation residual |h + r - t|^2.
    pub fn manifold_fn<'t>(
        h: Var<'t>,
        r: Var<'t>,
        t: Var<'t>,
    ) -> Result<Var<'t>, DiffError> {
        h.add(r)?.sub(t)?.norm_sq()
    }

    /// Latent projections: (head shift, tail shift, radius scalar).
    pub fn project_latent<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamStore,
        z: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>), DiffError> {
        let zh = self.head_proj.forward(tape, params, z)?;
        let zt = self.tail_proj.forward(tape, params, z)?;
        let dz = self.radius.forward(tape, params, z)?;
        Ok((zh, zt, dz))
    }

    /// Score of a candidate triple given encoded endpoints, the encoded
    /// relation, and a latent sample. Differentiable scalar.
    pub fn score<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamStore,
        h: Var<'t>,
        r: Var<'t>,
        t: Var<'t>,
        z: Var<'t>,
    ) -> Result<Var<'t>, DiffError> {
        let (zh, zt, dz) = self.project_latent(tape, params, z)?;
        let m = Self::manifold_fn(h.add(zh)?, r, t.add(zt)?)?;
        m.sub(dz.square())?.square().sum()
    }

    /// Tape-free score for ranking over large candidate sets. The latent
    /// projections depend only on z, so callers precompute them once.
    pub fn latent_parts_f64(&self, params: &ParamStore, z: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let zh = self.head_proj.forward_f64(params, z);
        let zt = self.tail_proj.forward_f64(params, z);
        let dz = self.radius.forward_f64(params, z)[0];
        (zh, zt, dz)
    }

    pub fn score_f64(
        h: &[f64],
        r: &[f64],
        t: &[f64],
        zh: &[f64],
        zt: &[f64],
        dz: f64,
    ) -> f64 {
        let m: f64 = (0..h.len())
            .map(|j| {
                let v = (h[j] + zh[j]) + r[j] - (t[j] + zt[j]);
                v * v
            })
            .sum();
        let s = m - dz * dz;
        s * s
    }
}

/// Candidate indices ordered best (lowest score) first; ties broken by
/// ascending entity index.
pub fn rank_candidates(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}
