//! The four Bi-ACL losses, the perturbation constructors and the composite objective.
//!
//! With `X_t` a real target-language sentence and `X_s` its generated
//! pseudo-source (both ending in the end token):
//!
//! ```text
//! H_t   = Encoder(X_t, ℓt)
//! Z_bkd = Decoder(H_t, ℓs) teacher-forced on X_s        L_AE_bkd = CE(·, X_s)
//! H_s   = Encoder(Z_bkd, ℓs); Decoder(H_s, ℓt) on X_t   L_AE_fwd = CE(·, X_t)
//!
//! H⁻_t  = H_t + δ_bkd;  C_bkd = Decoder(H⁻_t, ℓs) on X_s
//! E_s   = Encoder(C_bkd, ℓs);  H⁺_s = E_s + ζ_bkd       L_CL_bkd(H_t; H⁺_s; H⁻_t)
//! H⁻_s  = E_s + δ_fwd;  C_fwd = Decoder(H⁻_s, ℓt) on X_t
//! H⁺_t  = Encoder(C_fwd, ℓt) + ζ_fwd                    L_CL_fwd(E_s; H⁺_t; H⁻_s)
//! ```
//!
//! δ and ζ are computed in side graphs from current values and enter the
//! main graph as constants.

use std::ops::{Add, Mul, Sub};

use num_traits::One;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use super::config::SoftFeed;
use crate::autodiff::{Graph, Var};
use crate::decoding::PseudoParallelPair;
use crate::model::{HiddenSeq, ModelError, Seq2Seq, TokenId};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("loss batch is empty")]
    EmptyBatch,
    #[error("loss component {0} is not finite")]
    NonFinite(&'static str),
    #[error("perturbation tape exhausted during replay")]
    TapeExhausted,
}

impl From<TensorError> for LossError {
    fn from(e: TensorError) -> Self {
        Self::Model(e.into())
    }
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

/// The four loss values: AE backward, AE forward, CL backward, CL forward.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Components<N> {
    pub ae_bkd: N,
    pub ae_fwd: N,
    pub cl_bkd: N,
    pub cl_fwd: N,
}

impl<N: Copy> Components<N> {
    pub fn named(&self) -> [(&'static str, N); 4] {
        [
            ("ae_bkd", self.ae_bkd),
            ("ae_fwd", self.ae_fwd),
            ("cl_bkd", self.cl_bkd),
            ("cl_fwd", self.cl_fwd),
        ]
    }
}

/// `λ·(ae_bkd + ae_fwd) + (1 − λ)·(cl_bkd + cl_fwd)` in any number type.
pub fn combine<N>(c: &Components<N>, lambda: N) -> N
where
    N: Copy + One + Add<Output = N> + Sub<Output = N> + Mul<Output = N>,
{
    lambda * (c.ae_bkd + c.ae_fwd) + (N::one() - lambda) * (c.cl_bkd + c.cl_fwd)
}

/// [`combine`] with every component required to be finite.
pub fn composite_loss<T: Scalar>(c: &Components<T>, lambda: T) -> Result<T> {
    if let Some((name, _)) = c.named().iter().find(|(_, v)| !v.is_finite()) {
        return Err(LossError::NonFinite(name));
    }
    Ok(combine(c, lambda))
}

/// Graph form of [`combine`]; performs the same floating-point operations in
/// the same order, so the value matches bit for bit.
pub fn composite_var<T: Scalar>(g: &mut Graph<'_, T>, c: &Components<Var>, lambda: T) -> Result<Var> {
    let ae = g.add(c.ae_bkd, c.ae_fwd)?;
    let cl = g.add(c.cl_bkd, c.cl_fwd)?;
    let ae = g.scale(ae, lambda)?;
    let cl = g.scale(cl, T::one() - lambda)?;
    Ok(g.add(ae, cl)?)
}

/// Which of the four losses take part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AblationMask {
    pub ae_bkd: bool,
    pub ae_fwd: bool,
    pub cl_bkd: bool,
    pub cl_fwd: bool,
}

impl AblationMask {
    pub const ALL: Self = Self {
        ae_bkd: true,
        ae_fwd: true,
        cl_bkd: true,
        cl_fwd: true,
    };
    pub const NONE: Self = Self {
        ae_bkd: false,
        ae_fwd: false,
        cl_bkd: false,
        cl_fwd: false,
    };
    pub const AE_ONLY: Self = Self {
        ae_bkd: true,
        ae_fwd: true,
        cl_bkd: false,
        cl_fwd: false,
    };

    pub fn is_empty(&self) -> bool {
        *self == Self::NONE
    }

    /// Four characters, `1` for on, in component order, e.g. `1100`.
    pub fn label(&self) -> String {
        [self.ae_bkd, self.ae_fwd, self.cl_bkd, self.cl_fwd]
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect()
    }

    pub fn parse(s: &str) -> Option<Self> {
        let b: Vec<bool> = s
            .chars()
            .map(|c| match c {
                '1' => Some(true),
                '0' => Some(false),
                _ => None,
            })
            .collect::<Option<_>>()?;
        (b.len() == 4).then(|| Self {
            ae_bkd: b[0],
            ae_fwd: b[1],
            cl_bkd: b[2],
            cl_fwd: b[3],
        })
    }

    /// The fifteen masks with at least one loss on, full mask last.
    pub fn all_nonempty() -> Vec<Self> {
        let mut out: Vec<Self> = (1u8..16)
            .map(|b| Self {
                ae_bkd: b & 8 != 0,
                ae_fwd: b & 4 != 0,
                cl_bkd: b & 2 != 0,
                cl_fwd: b & 1 != 0,
            })
            .collect();
        out.sort_by_key(|m| (m.label().matches('1').count(), std::cmp::Reverse(m.label())));
        out
    }

    pub fn needs_contrastive(&self) -> bool {
        self.cl_bkd || self.cl_fwd
    }
}

/// Loss values of one step (or an average over steps).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport<T> {
    pub components: Components<T>,
    pub star: T,
    pub skipped: usize,
}

impl<T: Scalar> LossReport<T> {
    /// True when `star` is exactly what [`combine`] gives for the components.
    pub fn identity_holds(&self, lambda: T) -> bool {
        combine(&self.components, lambda) == self.star
    }

    /// `step, ae_bkd, ae_fwd, cl_bkd, cl_fwd, star, skipped`, tab-separated.
    pub fn log_line(&self, step: usize) -> String {
        let c = &self.components;
        format!(
            "{step}\t{}\t{}\t{}\t{}\t{}\t{}",
            c.ae_bkd, c.ae_fwd, c.cl_bkd, c.cl_fwd, self.star, self.skipped
        )
    }
}

/// Perturbations recorded on first evaluation and replayed verbatim later, so
/// a loss can be re-evaluated at shifted parameters with δ and ζ held fixed.
#[derive(Debug, Clone, Default)]
pub struct PerturbationTape<T> {
    entries: Vec<Tensor<T>>,
    cursor: usize,
    replay: bool,
}

impl<T: Scalar> PerturbationTape<T> {
    pub fn recording() -> Self {
        Self {
            entries: Vec::new(),
            cursor: 0,
            replay: false,
        }
    }

    /// Switches to replay from the first recorded entry.
    pub fn rewind(&mut self) {
        self.cursor = 0;
        self.replay = true;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn next(&mut self, compute: impl FnOnce() -> Result<Tensor<T>>) -> Result<Tensor<T>> {
        if self.replay {
            let t = self.entries.get(self.cursor).cloned().ok_or(LossError::TapeExhausted)?;
            self.cursor += 1;
            Ok(t)
        } else {
            let t = compute()?;
            self.entries.push(t.clone());
            Ok(t)
        }
    }
}

fn memory_seq<T: Scalar>(g: &Graph<'_, T>, value: Var, lang: TokenId) -> HiddenSeq {
    HiddenSeq {
        vectors: value,
        len: g.shape(value)[0],
        lang,
    }
}

/// Token-mean teacher-forced log-likelihood of `teacher` (in `lang`) given
/// memory `h`, and its gradient with respect to `h`.
pub fn log_likelihood_grad<T: Scalar>(
    model: &Seq2Seq<T>,
    h: &Tensor<T>,
    lang: TokenId,
    teacher: &[TokenId],
) -> Result<(T, Tensor<T>)> {
    let mut g = Graph::new();
    let hv = g.input(h.clone())?;
    let mem = memory_seq(&g, hv, lang);
    let (_, logits) = model.decode(&mut g, &mem, lang, teacher)?;
    let ce = g.cross_entropy(logits, teacher)?;
    let ll = g.scale(ce, -T::one())?;
    let grads = g.backward(ll)?;
    let grad = grads.wrt(hv).cloned().unwrap_or_else(|| Tensor::zeros(h.shape()));
    Ok((g.value(ll).item(), grad))
}

fn random_like<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        *x = T::lit(rng.sample::<f64, _>(StandardNormal));
    }
    t
}

/// `δ = −ε·g/‖g‖₂`; a seeded random direction of norm ε when ‖g‖₂ < 1e-12.
pub fn negative_delta<T: Scalar>(grad: &Tensor<T>, eps: T, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = grad.l2_norm();
    let (dir, n) = if n < T::lit(1e-12) {
        let r = random_like(grad.shape(), rng);
        let rn = r.l2_norm();
        (r, rn)
    } else {
        (grad.clone(), n)
    };
    let s = -eps / n;
    dir.map(|x| x * s)
}

/// `H + δ` with δ from [`negative_delta`].
pub fn make_negative<T: Scalar>(h: &Tensor<T>, grad: &Tensor<T>, eps: T, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let d = negative_delta(grad, eps, rng);
    Ok(h.zip_map(&d, |a, b| a + b)?)
}

/// `KL(p_ref ‖ p(· | h + ζ))` averaged over teacher positions, and its gradient in ζ.
pub fn kl_grad<T: Scalar>(
    model: &Seq2Seq<T>,
    reference_logits: &Tensor<T>,
    h: &Tensor<T>,
    zeta: &Tensor<T>,
    lang: TokenId,
    teacher: &[TokenId],
) -> Result<(T, Tensor<T>)> {
    let mut g = Graph::new();
    let z = g.input(zeta.clone())?;
    let hc = g.constant(h.clone())?;
    let m = g.add(hc, z)?;
    let mem = memory_seq(&g, m, lang);
    let (_, logits) = model.decode(&mut g, &mem, lang, teacher)?;
    let p = g.constant(reference_logits.clone())?;
    let kl = g.kl_div(p, logits)?;
    let grads = g.backward(kl)?;
    let grad = grads.wrt(z).cloned().unwrap_or_else(|| Tensor::zeros(zeta.shape()));
    Ok((g.value(kl).item(), grad))
}

fn kl_value<T: Scalar>(
    model: &Seq2Seq<T>,
    reference_logits: &Tensor<T>,
    h: &Tensor<T>,
    zeta: &Tensor<T>,
    lang: TokenId,
    teacher: &[TokenId],
) -> Result<T> {
    let m = h.zip_map(zeta, |a, b| a + b)?;
    let (_, logits) = model.decode_value(&m, lang, teacher)?;
    let mut g = Graph::new();
    let p = g.constant(reference_logits.clone())?;
    let q = g.constant(logits)?;
    let kl = g.kl_div(p, q)?;
    Ok(g.value(kl).item())
}

/// Scales every row to Euclidean norm `eps`; rows that vanish fall back to `fallback`.
fn renorm_rows<T: Scalar>(t: &Tensor<T>, eps: T, fallback: &Tensor<T>) -> Tensor<T> {
    let d = t.cols();
    let mut out = t.clone();
    for (i, row) in out.data_mut().chunks_mut(d).enumerate() {
        let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
        if n > T::lit(1e-12) {
            row.iter_mut().for_each(|x| *x *= eps / n);
        } else {
            row.copy_from_slice(fallback.row(i));
        }
    }
    out
}

/// A positive perturbation and the KL it was chosen by.
#[derive(Debug, Clone, PartialEq)]
pub struct Positive<T> {
    pub zeta: Tensor<T>,
    pub kl_init: T,
    pub kl_final: T,
}

/// Random ζ with rows of norm ε, improved by one normalized descent step on
/// `KL(p_θ*(·|h) ‖ p_θ(·|h+ζ))` and renormalized. The step is halved until
/// the KL does not increase; if no halving helps, the initial ζ is kept.
pub fn make_positive<T: Scalar>(
    model: &Seq2Seq<T>,
    h: &Tensor<T>,
    lang: TokenId,
    teacher: &[TokenId],
    eps: T,
    rng: &mut ChaCha8Rng,
) -> Result<Positive<T>> {
    if eps == T::zero() {
        return Ok(Positive {
            zeta: Tensor::zeros(h.shape()),
            kl_init: T::zero(),
            kl_final: T::zero(),
        });
    }
    // θ* is a frozen copy: its logits are plain values here
    let (_, reference) = model.decode_value(h, lang, teacher)?;
    let raw = random_like(h.shape(), rng);
    let zeta0 = renorm_rows(&raw, eps, &Tensor::full(h.shape(), eps / T::from_usize_lossy(h.cols()).sqrt()));
    let (kl0, grad) = kl_grad(model, &reference, h, &zeta0, lang, teacher)?;
    let gn = grad.l2_norm();
    let mut best = Positive {
        zeta: zeta0.clone(),
        kl_init: kl0,
        kl_final: kl0,
    };
    if gn < T::lit(1e-12) {
        return Ok(best);
    }
    let mut step = T::lit(0.5) * zeta0.l2_norm() / gn;
    for _ in 0..8 {
        let s = step;
        let moved = zeta0.zip_map(&grad, |z, g| z - s * g)?;
        let cand = renorm_rows(&moved, eps, &zeta0);
        let kl = kl_value(model, &reference, h, &cand, lang, teacher)?;
        if kl <= kl0 {
            best.zeta = cand;
            best.kl_final = kl;
            break;
        }
        step *= T::lit(0.5);
    }
    Ok(best)
}

/// Mean-pooled views entering one contrastive term.
#[derive(Debug, Clone, Copy)]
pub struct ClViews {
    pub anchor: Var,
    pub positive: Var,
    pub negative: Var,
}

/// `−sim⁺/τ + log Σ_neg exp(sim⁻/τ)`; the positive is not in the denominator.
pub fn contrastive_objective<T: Scalar>(sim_pos: T, sim_negs: &[T], tau: T) -> T {
    let inv = T::one() / tau;
    let scaled: Vec<T> = sim_negs.iter().map(|&s| s * inv).collect();
    let max = scaled.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + scaled.iter().map(|&s| (s - max).exp()).sum::<T>().ln();
    lse - sim_pos * inv
}

/// Batch mean of [`contrastive_objective`]: each anchor is scored against its
/// own positive and against every member's negative.
pub fn contrastive_loss<T: Scalar>(g: &mut Graph<'_, T>, views: &[ClViews], tau: T) -> Result<Var> {
    if views.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let inv = T::one() / tau;
    let mut terms = Vec::with_capacity(views.len());
    for v in views {
        let pos = g.cosine(v.anchor, v.positive)?;
        let pos = g.scale(pos, inv)?;
        let negs = views
            .iter()
            .map(|n| g.cosine(v.anchor, n.negative))
            .collect::<Result<Vec<_>, _>>()?;
        let negs = g.stack(&negs)?;
        let negs = g.scale(negs, inv)?;
        let lse = g.log_sum_exp(negs)?;
        terms.push(g.sub(lse, pos)?);
    }
    mean_of(g, &terms)
}

fn mean_of<T: Scalar>(g: &mut Graph<'_, T>, scalars: &[Var]) -> Result<Var> {
    let s = g.stack(scalars)?;
    let s = g.sum(s)?;
    Ok(g.scale(s, T::one() / T::from_usize_lossy(scalars.len()))?)
}

/// `Encoder(states, ℓ)` under the configured soft feed.
pub fn soft_encode<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    model: &'a Seq2Seq<T>,
    states: Var,
    lang: TokenId,
    feed: SoftFeed,
) -> Result<HiddenSeq> {
    let input = match feed {
        SoftFeed::States => states,
        SoftFeed::ExpectedEmbedding => model.expected_embedding(g, states)?,
    };
    Ok(model.encode_soft(g, input, lang)?)
}

/// Backward autoencoder: decode `xs` from `h_t`. Returns the loss and `Z_bkd`.
pub fn backward_ae_loss<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    model: &'a Seq2Seq<T>,
    h_t: &HiddenSeq,
    xs: &[TokenId],
    source_lang: TokenId,
) -> Result<(Var, HiddenSeq)> {
    let (z, logits) = model.decode(g, h_t, source_lang, xs)?;
    Ok((g.cross_entropy(logits, xs)?, z))
}

/// Forward autoencoder: re-encode `Z_bkd` in ℓs and decode `xt`.
pub fn forward_ae_loss<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    model: &'a Seq2Seq<T>,
    z_bkd: &HiddenSeq,
    xt: &[TokenId],
    langs: Langs,
    feed: SoftFeed,
) -> Result<Var> {
    let h_s = soft_encode(g, model, z_bkd.vectors, langs.source, feed)?;
    let (_, logits) = model.decode(g, &h_s, langs.target, xt)?;
    Ok(g.cross_entropy(logits, xt)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Langs {
    /// ℓt, the monolingual side.
    pub target: TokenId,
    /// ℓs, the generated side.
    pub source: TokenId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings<T> {
    pub lambda: T,
    pub tau: T,
    pub eps_neg: T,
    pub eps_pos: T,
    pub soft_feed: SoftFeed,
}

/// Graph nodes of the backward contrastive chain.
pub struct BackwardChain {
    /// Present when the backward contrastive loss is enabled.
    pub views: Option<ClViews>,
    pub c_bkd: HiddenSeq,
    /// `Encoder(C_bkd, ℓs)`, the anchor of the forward chain.
    pub h_s: HiddenSeq,
}

fn add_const<T: Scalar>(g: &mut Graph<'_, T>, x: &HiddenSeq, t: Tensor<T>) -> Result<HiddenSeq> {
    let c = g.constant(t)?;
    let v = g.add(x.vectors, c)?;
    Ok(HiddenSeq { vectors: v, ..*x })
}

#[allow(clippy::too_many_arguments)]
pub fn backward_cl_chain<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    model: &'a Seq2Seq<T>,
    h_t: &HiddenSeq,
    xt: &[TokenId],
    xs: &[TokenId],
    langs: Langs,
    settings: &LossSettings<T>,
    with_views: bool,
    tape: &mut PerturbationTape<T>,
    rng: &mut ChaCha8Rng,
) -> Result<BackwardChain> {
    let ht_val = g.value(h_t.vectors).clone();
    let delta = tape.next(|| {
        let (_, grad) = log_likelihood_grad(model, &ht_val, langs.source, xs)?;
        Ok(negative_delta(&grad, settings.eps_neg, rng))
    })?;
    let neg = add_const(g, h_t, delta)?;
    let (c_bkd, _) = model.decode(g, &neg, langs.source, xs)?;
    let h_s = soft_encode(g, model, c_bkd.vectors, langs.source, settings.soft_feed)?;
    let views = if with_views {
        let hs_val = g.value(h_s.vectors).clone();
        let zeta = tape.next(|| Ok(make_positive(model, &hs_val, langs.target, xt, settings.eps_pos, rng)?.zeta))?;
        let pos = add_const(g, &h_s, zeta)?;
        Some(ClViews {
            anchor: g.mean_rows(h_t.vectors)?,
            positive: g.mean_rows(pos.vectors)?,
            negative: g.mean_rows(neg.vectors)?,
        })
    } else {
        None
    };
    Ok(BackwardChain { views, c_bkd, h_s })
}

#[allow(clippy::too_many_arguments)]
pub fn forward_cl_views<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    model: &'a Seq2Seq<T>,
    h_s: &HiddenSeq,
    xt: &[TokenId],
    xs: &[TokenId],
    langs: Langs,
    settings: &LossSettings<T>,
    tape: &mut PerturbationTape<T>,
    rng: &mut ChaCha8Rng,
) -> Result<ClViews> {
    let hs_val = g.value(h_s.vectors).clone();
    let delta = tape.next(|| {
        let (_, grad) = log_likelihood_grad(model, &hs_val, langs.target, xt)?;
        Ok(negative_delta(&grad, settings.eps_neg, rng))
    })?;
    let neg = add_const(g, h_s, delta)?;
    let (c_fwd, _) = model.decode(g, &neg, langs.target, xt)?;
    let e_t = soft_encode(g, model, c_fwd.vectors, langs.target, settings.soft_feed)?;
    let et_val = g.value(e_t.vectors).clone();
    let zeta = tape.next(|| Ok(make_positive(model, &et_val, langs.source, xs, settings.eps_pos, rng)?.zeta))?;
    let pos = add_const(g, &e_t, zeta)?;
    Ok(ClViews {
        anchor: g.mean_rows(h_s.vectors)?,
        positive: g.mean_rows(pos.vectors)?,
        negative: g.mean_rows(neg.vectors)?,
    })
}

/// Loss nodes of one batch. Disabled components are constant zeros.
pub struct BatchLosses {
    pub components: Components<Var>,
    pub star: Var,
}

/// Builds every enabled loss for `pairs` in `g` and combines them.
#[allow(clippy::too_many_arguments)]
pub fn batch_losses<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    model: &'a Seq2Seq<T>,
    pairs: &[PseudoParallelPair],
    eos: TokenId,
    langs: Langs,
    settings: &LossSettings<T>,
    mask: AblationMask,
    tape: &mut PerturbationTape<T>,
    rng: &mut ChaCha8Rng,
) -> Result<BatchLosses> {
    if pairs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut ae_b = Vec::new();
    let mut ae_f = Vec::new();
    let mut views_b = Vec::new();
    let mut views_f = Vec::new();
    for p in pairs {
        let mut xt = p.target.clone();
        xt.push(eos);
        let mut xs = p.source.clone();
        xs.push(eos);
        let h_t = model.encode(g, &xt, langs.target)?;
        if mask.ae_bkd || mask.ae_fwd {
            let (l, z) = backward_ae_loss(g, model, &h_t, &xs, langs.source)?;
            if mask.ae_bkd {
                ae_b.push(l);
            }
            if mask.ae_fwd {
                ae_f.push(forward_ae_loss(g, model, &z, &xt, langs, settings.soft_feed)?);
            }
        }
        if mask.needs_contrastive() {
            let chain = backward_cl_chain(g, model, &h_t, &xt, &xs, langs, settings, mask.cl_bkd, tape, rng)?;
            if let Some(v) = chain.views {
                views_b.push(v);
            }
            if mask.cl_fwd {
                views_f.push(forward_cl_views(g, model, &chain.h_s, &xt, &xs, langs, settings, tape, rng)?);
            }
        }
    }
    let zero = g.constant(Tensor::scalar(T::zero()))?;
    let components = Components {
        ae_bkd: if ae_b.is_empty() { zero } else { mean_of(g, &ae_b)? },
        ae_fwd: if ae_f.is_empty() { zero } else { mean_of(g, &ae_f)? },
        cl_bkd: if views_b.is_empty() {
            zero
        } else {
            contrastive_loss(g, &views_b, settings.tau)?
        },
        cl_fwd: if views_f.is_empty() {
            zero
        } else {
            contrastive_loss(g, &views_f, settings.tau)?
        },
    };
    let star = composite_var(g, &components, settings.lambda)?;
    Ok(BatchLosses { components, star })
}

impl BatchLosses {
    pub fn report<T: Scalar>(&self, g: &Graph<'_, T>, skipped: usize) -> LossReport<T> {
        let c = &self.components;
        LossReport {
            components: Components {
                ae_bkd: g.value(c.ae_bkd).item(),
                ae_fwd: g.value(c.ae_fwd).item(),
                cl_bkd: g.value(c.cl_bkd).item(),
                cl_fwd: g.value(c.cl_fwd).item(),
            },
            star: g.value(self.star).item(),
            skipped,
        }
    }
}
