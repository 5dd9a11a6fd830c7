//! Neural-process latent encoder with a normalizing-flow posterior.
//!
//! Context triples are embedded pointwise, mean-aggregated, and mapped to a
//! diagonal Gaussian base distribution. A chain of invertible flow layers
//! (planar, radial, or coupling) transports base samples to the latent used
//! by the decoder; log densities follow by change of variables.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::diffcore::{concat, DiffError, ParamId, ParamStore, Tape, Tensor, Var};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("empty context set")]
    EmptyContext,
    #[error("non-finite value after flow stage {stage}")]
    NonFinite { stage: usize },
    #[error("{0:?} flow has no analytic inverse")]
    NoInverse(FlowKind),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    Planar,
    Radial,
    RealNvp,
}

impl std::str::FromStr for FlowKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "planar" => Ok(FlowKind::Planar),
            "radial" => Ok(FlowKind::Radial),
            "realnvp" => Ok(FlowKind::RealNvp),
            other => Err(format!("unknown flow kind `{other}`")),
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Two-layer perceptron with a ReLU hidden layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        zero_output: bool,
        rng: &mut R,
    ) -> Self {
        let b1 = 1.0 / (d_in as f64).sqrt();
        let b2 = 1.0 / (d_hidden as f64).sqrt();
        let w2 = if zero_output {
            params.register_zeros(format!("{prefix}.w2"), vec![d_out, d_hidden])
        } else {
            params.register_uniform(format!("{prefix}.w2"), vec![d_out, d_hidden], b2, rng)
        };
        Mlp {
            w1: params.register_uniform(format!("{prefix}.w1"), vec![d_hidden, d_in], b1, rng),
            b1: params.register_zeros(format!("{prefix}.b1"), vec![d_hidden]),
            w2,
            b2: params.register_zeros(format!("{prefix}.b2"), vec![d_out]),
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamStore,
        x: Var<'t>,
    ) -> Result<Var<'t>, DiffError> {
        let h = tape
            .param(params, self.w1)
            .matmul(x)?
            .add(tape.param(params, self.b1))?
            .relu();
        tape.param(params, self.w2)
            .matmul(h)?
            .add(tape.param(params, self.b2))
    }

    /// Tape-free evaluation, used on hot read-only paths.
    pub fn forward_f64(&self, params: &ParamStore, x: &[f64]) -> Vec<f64> {
        let matvec = |id: ParamId, v: &[f64]| -> Vec<f64> {
            let w = &params.get(id).value;
            (0..w.shape[0])
                .map(|i| w.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
                .collect()
        };
        let b1 = &params.get(self.b1).value.data;
        let h: Vec<f64> = matvec(self.w1, x)
            .iter()
            .zip(b1)
            .map(|(a, b)| (a + b).max(0.0))
            .collect();
        let b2 = &params.get(self.b2).value.data;
        matvec(self.w2, &h).iter().zip(b2).map(|(a, b)| a + b).collect()
    }
}

/// Maps an aggregated context vector to the base Gaussian.
#[derive(Debug, Clone)]
pub struct NpEncoder {
    /// Pointwise context embedding, input h' || t' || y (2d + 1 wide).
    pub context_mlp: Mlp,
    pub trunk_w: ParamId,
    pub trunk_b: ParamId,
    pub mu_w: ParamId,
    pub mu_b: ParamId,
    pub sigma_w: ParamId,
    pub sigma_b: ParamId,
    pub d: usize,
    pub d_c: usize,
    pub d_z: usize,
}

impl NpEncoder {
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        d: usize,
        d_hidden: usize,
        d_c: usize,
        d_z: usize,
        rng: &mut R,
    ) -> Self {
        let tb = 1.0 / (d_c as f64).sqrt();
        let hb = 1.0 / (d_hidden as f64).sqrt();
        NpEncoder {
            context_mlp: Mlp::new(params, "np.ctx", 2 * d + 1, d_hidden, d_c, false, rng),
            trunk_w: params.register_uniform("np.trunk_w", vec![d_hidden, d_c], tb, rng),
            trunk_b: params.register_zeros("np.trunk_b", vec![d_hidden]),
            mu_w: params.register_uniform("np.mu_w", vec![d_z, d_hidden], hb, rng),
            mu_b: params.register_zeros("np.mu_b", vec![d_z]),
            sigma_w: params.register_uniform("np.sigma_w", vec![d_z, d_hidden], hb, rng),
            sigma_b: params.register_zeros("np.sigma_b", vec![d_z]),
            d,
            d_c,
            d_z,
        }
    }

    /// Mean-aggregated context representation. Each point is the pair of
    /// projected endpoint embeddings plus a scalar truth label.
    pub fn encode_context<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamStore,
        points: &[(Var<'t>, Var<'t>, f64)],
    ) -> Result<Var<'t>, FlowError> {
        if points.is_empty() {
            return Err(FlowError::EmptyContext);
        }
        let mut acc: Option<Var<'t>> = None;
        for &(h, t, y) in points {
            let x = concat(&[h, t, tape.scalar(y)], 0)?;
            let c = self.context_mlp.forward(tape, params, x)?;
            acc = Some(match acc {
                None => c,
                Some(a) => a.add(c)?,
            });
        }
        Ok(acc.unwrap().mul_scalar(1.0 / points.len() as f64))
    }

    /// Base distribution parameters; sigma = 0.1 + 0.9 * sigmoid(raw) keeps
    /// the scale bounded away from zero.
    pub fn base_distribution<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamStore,
        aggregated: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>), DiffError> {
        let h = tape
            .param(params, self.trunk_w)
            .matmul(aggregated)?
            .add(tape.param(params, self.trunk_b))?
            .relu();
        let mu = tape
            .param(params, self.mu_w)
            .matmul(h)?
            .add(tape.param(params, self.mu_b))?;
        let sigma = tape
            .param(params, self.sigma_w)
            .matmul(h)?
            .add(tape.param(params, self.sigma_b))?
            .sigmoid()
            .mul_scalar(0.9)
            .add_scalar(0.1);
        Ok((mu, sigma))
    }
}

/// Reparameterized draw z0 = mu + sigma * eps with eps ~ N(0, I).
pub fn sample_base<'t, R: Rng>(
    tape: &'t Tape,
    mu: Var<'t>,
    sigma: Var<'t>,
    rng: &mut R,
) -> Result<Var<'t>, DiffError> {
    let eps: Vec<f64> = (0..mu.len()).map(|_| StandardNormal.sample(rng)).collect();
    mu.add(sigma.mul(tape.vector(&eps))?)
}

/// Diagonal Gaussian log density of z0 under (mu, sigma), as a scalar node.
pub fn base_log_density<'t>(
    z0: Var<'t>,
    mu: Var<'t>,
    sigma: Var<'t>,
) -> Result<Var<'t>, DiffError> {
    let std = z0.sub(mu)?.div(sigma)?;
    let quad = std.square().sum()?.mul_scalar(-0.5);
    let logdet = sigma.ln()?.sum()?;
    Ok(quad
        .sub(logdet)?
        .add_scalar(-0.5 * LN_2PI * z0.len() as f64))
}

fn base_log_density_f64(z0: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    z0.iter()
        .zip(mu)
        .zip(sigma)
        .map(|((z, m), s)| {
            let u = (z - m) / s;
            -0.5 * LN_2PI - s.ln() - 0.5 * u * u
        })
        .sum()
}

/// z' = z + u_hat * Tanh(w.z + b), with u_hat constrained so that
/// u_hat.w >= -1 and the map stays invertible.
#[derive(Debug, Clone)]
pub struct PlanarLayer {
    pub u: ParamId,
    pub w: ParamId,
    pub b: ParamId,
}

impl PlanarLayer {
    fn new<R: Rng>(params: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Self {
        let wb = 0.5 / (d as f64).sqrt();
        PlanarLayer {
            u: params.register_uniform(format!("{prefix}.u"), vec![d], 0.01, rng),
            w: params.register_uniform(format!("{prefix}.w"), vec![d], wb, rng),
            b: params.register_zeros(format!("{prefix}.b"), vec![1]),
        }
    }

    /// Constrained u_hat such that u_hat.w = softplus(w.u) - 1 > -1.
    pub fn u_hat<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamStore,
    ) -> Result<(Var<'t>, Var<'t>), DiffError> {
        let u = tape.param(params, self.u);
        let w = tape.param(params, self.w);
        let wu = w.dot(u)?;
        // softplus built from primitives: ln(1 + exp(x))
        let sp = wu.exp().add_scalar(1.0).ln()?;
        let shift = sp.add_scalar(-1.0).sub(wu)?;
        let wnorm = w.norm_sq()?;
        let u_hat = u.add(w.mul(shift.div(wnorm)?)?)?;
        Ok((u_hat, w))
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamStore,
        z: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>), DiffError> {
        let (u_hat, w) = self.u_hat(tape, params)?;
        let b = tape.param(params, self.b);
        let a = w.dot(z)?.add(b)?.tanh();
        let out = z.add(u_hat.mul(a)?)?;
        // d/dz = I + u_hat psi^T with psi = (1 - a^2) w, so
        // det = 1 + (1 - a^2) u_hat.w, strictly positive under the constraint
        let one_m_a2 = a.square().neg().add_scalar(1.0);
        let det = u_hat.dot(w)?.mul(one_m_a2)?.add_scalar(1.0);
        Ok((out, det.ln()?))
    }

    pub fn forward_f64(&self, params: &ParamStore, z: &[f64]) -> (Vec<f64>, f64) {
        let u = &params.get(self.u).value.data;
        let w = &params.get(self.w).value.data;
        let b = params.get(self.b).value.data[0];
        let wu: f64 = w.iter().zip(u).map(|(a, b)| a * b).sum();
        let wnorm: f64 = w.iter().map(|x| x * x).sum();
        let shift = (softplus(wu) - 1.0 - wu) / wnorm;
        let u_hat: Vec<f64> = u.iter().zip(w).map(|(ui, wi)| ui + shift * wi).collect();
        let a = (w.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + b).tanh();
        let out: Vec<f64> = z.iter().zip(&u_hat).map(|(zi, ui)| zi + ui * a).collect();
        let uw: f64 = u_hat.iter().zip(w).map(|(a, b)| a * b).sum();
        let det = 1.0 + (1.0 - a * a) * uw;
        (out, det.ln())
    }
}

/// z' = z + beta * h(r) * (z - c) with h(r) = 1 / (alpha + r),
/// r = |z - c|; beta is reparameterized to beta > -alpha.
#[derive(Debug, Clone)]
pub struct RadialLayer {
    pub center: ParamId,
    pub alpha_raw: ParamId,
    pub beta_raw: ParamId,
    pub d: usize,
}

impl RadialLayer {
    fn new<R: Rng>(params: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Self {
        // softplus(0.5413) = 1, so alpha starts at 1 and beta at 0
        let raw = (std::f64::consts::E - 1.0).ln();
        let center = params.register_uniform(format!("{prefix}.center"), vec![d], 0.1, rng);
        let alpha_raw = params.register(format!("{prefix}.alpha_raw"), Tensor::scalar(raw));
        let beta_raw = params.register(format!("{prefix}.beta_raw"), Tensor::scalar(raw));
        RadialLayer { center, alpha_raw, beta_raw, d }
    }

    fn coeffs(&self, params: &ParamStore) -> (f64, f64) {
        let alpha = softplus(params.get(self.alpha_raw).value.data[0]);
        let beta = -alpha + softplus(params.get(self.beta_raw).value.data[0]);
        (alpha, beta)
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamStore,
        z: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>), DiffError> {
        let center = tape.param(params, self.center);
        let alpha = tape
            .param(params, self.alpha_raw)
            .exp()
            .add_scalar(1.0)
            .ln()?;
        let beta = tape
            .param(params, self.beta_raw)
            .exp()
            .add_scalar(1.0)
            .ln()?
            .sub(alpha)?;
        let diff = z.sub(center)?;
        let r = diff.norm_sq()?.add_scalar(1e-12).sqrt()?;
        let h = alpha.add(r)?; // reciprocal below
        let bh = beta.div(h)?;
        let out = z.add(diff.mul(bh)?)?;
        // det = (1 + beta h)^(d-1) (1 + beta h - beta r h^2)
        let one_bh = bh.add_scalar(1.0);
        let tail = one_bh.sub(beta.mul(r)?.div(h.square())?)?;
        let logdet = one_bh
            .ln()?
            .mul_scalar((self.d - 1) as f64)
            .add(tail.ln()?)?;
        Ok((out, logdet))
    }

    pub fn forward_f64(&self, params: &ParamStore, z: &[f64]) -> (Vec<f64>, f64) {
        let c = &params.get(self.center).value.data;
        let (alpha, beta) = self.coeffs(params);
        let diff: Vec<f64> = z.iter().zip(c).map(|(a, b)| a - b).collect();
        let r = (diff.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
        let h = 1.0 / (alpha + r);
        let out: Vec<f64> = z.iter().zip(&diff).map(|(zi, d)| zi + beta * h * d).collect();
        let logdet = ((self.d - 1) as f64) * (1.0 + beta * h).ln()
            + (1.0 + beta * h - beta * r * h * h).ln();
        (out, logdet)
    }

    /// Analytic inverse: with R = |y - c|, solve r (alpha + beta + r) =
    /// R (alpha + r), i.e. r^2 + (alpha + beta - R) r - R alpha = 0.
    pub fn inverse_f64(&self, params: &ParamStore, y: &[f64]) -> Vec<f64> {
        let c = &params.get(self.center).value.data;
        let (alpha, beta) = self.coeffs(params);
        let diff: Vec<f64> = y.iter().zip(c).map(|(a, b)| a - b).collect();
        let big_r = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
        if big_r == 0.0 {
            return c.clone();
        }
        let b = alpha + beta - big_r;
        let r = (-b + (b * b + 4.0 * big_r * alpha).sqrt()) / 2.0;
        let scale = r / big_r;
        c.iter().zip(&diff).map(|(ci, d)| ci + scale * d).collect()
    }
}

/// Affine coupling layer. Coordinates selected by the mask pass through;
/// the rest are scaled and shifted conditioned on the masked part. Scale
/// and shift networks start at zero, so the layer starts as the identity.
#[derive(Debug, Clone)]
pub struct RealNvpLayer {
    pub scale: Mlp,
    pub shift: Mlp,
    /// mask[j] == 1.0 marks a pass-through coordinate.
    pub mask: Vec<f64>,
}

impl RealNvpLayer {
    fn new<R: Rng>(
        params: &mut ParamStore,
        prefix: &str,
        d: usize,
        parity: usize,
        rng: &mut R,
    ) -> Self {
        let hidden = (2 * d).max(8);
        let mask: Vec<f64> = (0..d)
            .map(|j| if j % 2 == parity % 2 { 1.0 } else { 0.0 })
            .collect();
        RealNvpLayer {
            scale: Mlp::new(params, &format!("{prefix}.s"), d, hidden, d, true, rng),
            shift: Mlp::new(params, &format!("{prefix}.t"), d, hidden, d, true, rng),
            mask,
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamStore,
        z: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>), DiffError> {
        let m = tape.vector(&self.mask);
        let inv: Vec<f64> = self.mask.iter().map(|v| 1.0 - v).collect();
        let minv = tape.vector(&inv);
        let kept = z.mul(m)?;
        let s = self.scale.forward(tape, params, kept)?.mul(minv)?;
        let t = self.shift.forward(tape, params, kept)?.mul(minv)?;
        let out = kept.add(z.mul(s.exp())?.add(t)?.mul(minv)?)?;
        Ok((out, s.sum()?))
    }

    pub fn forward_f64(&self, params: &ParamStore, z: &[f64]) -> (Vec<f64>, f64) {
        let kept: Vec<f64> = z.iter().zip(&self.mask).map(|(v, m)| v * m).collect();
        let s = self.scale.forward_f64(params, &kept);
        let t = self.shift.forward_f64(params, &kept);
        let mut out = vec![0.0; z.len()];
        let mut logdet = 0.0;
        for j in 0..z.len() {
            if self.mask[j] == 1.0 {
                out[j] = z[j];
            } else {
                out[j] = z[j] * s[j].exp() + t[j];
                logdet += s[j];
            }
        }
        (out, logdet)
    }

    pub fn inverse_f64(&self, params: &ParamStore, y: &[f64]) -> Vec<f64> {
        let kept: Vec<f64> = y.iter().zip(&self.mask).map(|(v, m)| v * m).collect();
        let s = self.scale.forward_f64(params, &kept);
        let t = self.shift.forward_f64(params, &kept);
        (0..y.len())
            .map(|j| {
                if self.mask[j] == 1.0 {
                    y[j]
                } else {
                    (y[j] - t[j]) * (-s[j]).exp()
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub enum FlowLayer {
    Planar(PlanarLayer),
    Radial(RadialLayer),
    RealNvp(RealNvpLayer),
}

impl FlowLayer {
    fn forward_f64(&self, params: &ParamStore, z: &[f64]) -> (Vec<f64>, f64) {
        match self {
            FlowLayer::Planar(l) => l.forward_f64(params, z),
            FlowLayer::Radial(l) => l.forward_f64(params, z),
            FlowLayer::RealNvp(l) => l.forward_f64(params, z),
        }
    }
}

/// Chain of T flow layers of one kind over a d_z latent.
#[derive(Debug, Clone)]
pub struct FlowChain {
    pub kind: FlowKind,
    pub layers: Vec<FlowLayer>,
    pub d_z: usize,
}

impl FlowChain {
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        kind: FlowKind,
        depth: usize,
        d_z: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..depth)
            .map(|i| {
                let prefix = format!("flow.{i}");
                match kind {
                    FlowKind::Planar => {
                        FlowLayer::Planar(PlanarLayer::new(params, &prefix, d_z, rng))
                    }
                    FlowKind::Radial => {
                        FlowLayer::Radial(RadialLayer::new(params, &prefix, d_z, rng))
                    }
                    FlowKind::RealNvp => {
                        FlowLayer::RealNvp(RealNvpLayer::new(params, &prefix, d_z, i, rng))
                    }
                }
            })
            .collect();
        FlowChain { kind, layers, d_z }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Push z0 through every layer; returns (z_T, sum of log|det|).
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamStore,
        z0: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>), FlowError> {
        let mut z = z0;
        let mut logdet = tape.scalar(0.0);
        for (stage, layer) in self.layers.iter().enumerate() {
            let (next, ld) = match layer {
                FlowLayer::Planar(l) => l.forward(tape, params, z)?,
                FlowLayer::Radial(l) => l.forward(tape, params, z)?,
                FlowLayer::RealNvp(l) => l.forward(tape, params, z)?,
            };
            if !next.data().iter().all(|v| v.is_finite())
                || !ld.data().iter().all(|v| v.is_finite())
            {
                return Err(FlowError::NonFinite { stage });
            }
            z = next;
            logdet = logdet.add(ld)?;
        }
        Ok((z, logdet))
    }

    pub fn forward_f64(&self, params: &ParamStore, z0: &[f64]) -> (Vec<f64>, f64) {
        let mut z = z0.to_vec();
        let mut logdet = 0.0;
        for layer in &self.layers {
            let (next, ld) = layer.forward_f64(params, &z);
            z = next;
            logdet += ld;
        }
        (z, logdet)
    }

    /// Exact inverse, available for radial and coupling chains.
    pub fn inverse_f64(&self, params: &ParamStore, y: &[f64]) -> Result<Vec<f64>, FlowError> {
        let mut z = y.to_vec();
        for layer in self.layers.iter().rev() {
            z = match layer {
                FlowLayer::Planar(_) => return Err(FlowError::NoInverse(FlowKind::Planar)),
                FlowLayer::Radial(l) => l.inverse_f64(params, &z),
                FlowLayer::RealNvp(l) => l.inverse_f64(params, &z),
            };
        }
        Ok(z)
    }

    /// log q(z_T) for a sample that originated at z0: base density minus
    /// accumulated log-determinants, as a differentiable scalar.
    pub fn log_density<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamStore,
        z0: Var<'t>,
        mu: Var<'t>,
        sigma: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>), FlowError> {
        let (z_t, logdet) = self.forward(tape, params, z0)?;
        let logq = base_log_density(z0, mu, sigma)?.sub(logdet)?;
        Ok((z_t, logq))
    }

    /// Density of the pushforward at an arbitrary point, via the inverse.
    pub fn log_density_at(
        &self,
        params: &ParamStore,
        y: &[f64],
        mu: &[f64],
        sigma: &[f64],
    ) -> Result<f64, FlowError> {
        let z0 = self.inverse_f64(params, y)?;
        let (_, logdet) = self.forward_f64(params, &z0);
        Ok(base_log_density_f64(&z0, mu, sigma) - logdet)
    }

    /// Monte Carlo entropy estimate -E[log q(z_T)] of the pushforward.
    pub fn latent_entropy<R: Rng>(
        &self,
        params: &ParamStore,
        mu: &[f64],
        sigma: &[f64],
        samples: usize,
        rng: &mut R,
    ) -> f64 {
        assert!(samples > 0);
        let mut total = 0.0;
        for _ in 0..samples {
            let z0: Vec<f64> = mu
                .iter()
                .zip(sigma)
                .map(|(m, s)| {
                    let e: f64 = StandardNormal.sample(rng);
                    m + s * e
                })
                .collect();
            let (_, logdet) = self.forward_f64(params, &z0);
            total += -(base_log_density_f64(&z0, mu, sigma) - logdet);
        }
        total / samples as f64
    }
}
