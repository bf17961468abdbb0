//! Scoring, fusion of clicked and unclicked representations, triplet metric
//! losses, log-uniform negative sampling and sampled-softmax cross-entropy.
//!
//! Every loss comes with a hand-derived gradient. Hinges use a zero
//! subgradient at the kink.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{ItemEmbeddings, ItemGrads};
use crate::error::{Error, Result};
use crate::numcore::{axpy, dot, l2sq, l2sq_unchecked, sigmoid};
use crate::rng::Rng64;

pub use crate::model::FusionParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    None,
    Asym,
    Sym,
    PairLabClk,
    PairUnclkLab,
    PairUnclkClk,
}

impl MetricMode {
    pub const ALL: [MetricMode; 6] = [
        MetricMode::None,
        MetricMode::Asym,
        MetricMode::Sym,
        MetricMode::PairLabClk,
        MetricMode::PairUnclkLab,
        MetricMode::PairUnclkClk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricMode::None => "none",
            MetricMode::Asym => "asym",
            MetricMode::Sym => "sym",
            MetricMode::PairLabClk => "pair_lab_clk",
            MetricMode::PairUnclkLab => "pair_unclk_lab",
            MetricMode::PairUnclkClk => "pair_unclk_clk",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    None,
    Simple,
    Gated,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::None, FusionMode::Simple, FusionMode::Gated];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::Simple => "simple",
            FusionMode::Gated => "gated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Margin of the asymmetric and pairwise hinges.
    pub margin: f64,
    /// Combined margin of the symmetric loss.
    pub margin_star: f64,
    pub lambda: f64,
    pub metric_mode: MetricMode,
    pub fusion_mode: FusionMode,
    pub num_negatives: usize,
    pub correction: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 5.0,
            margin_star: 5.0,
            lambda: 10.0,
            metric_mode: MetricMode::Sym,
            fusion_mode: FusionMode::Gated,
            num_negatives: 200,
            correction: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("loss.margin must be > 0, got {}", self.margin)));
        }
        if !(self.margin_star > 0.0 && self.margin_star.is_finite()) {
            return Err(Error::Config(format!(
                "loss.margin_star must be > 0, got {}",
                self.margin_star
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("loss.lambda must be >= 0, got {}", self.lambda)));
        }
        if self.num_negatives == 0 {
            return Err(Error::Config("loss.num_negatives must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn score(z: &[f64], q: &[f64]) -> Result<f64> {
    if z.len() != q.len() {
        return Err(Error::shape("score", z.len(), q.len()));
    }
    Ok(dot(z, q))
}

fn check_fusion(h: &[f64], n: &[f64], params: &FusionParams) -> Result<()> {
    let l = params.b_g.len();
    if h.len() != l {
        return Err(Error::shape("fuse", l, h.len()));
    }
    if n.len() != l {
        return Err(Error::shape("fuse", l, n.len()));
    }
    Ok(())
}

fn gate(h: &[f64], n: &[f64], params: &FusionParams) -> Vec<f64> {
    let mut pre = params.b_g.clone();
    let l = h.len();
    for (i, out) in pre.iter_mut().enumerate() {
        let row = params.w_g.row(i);
        *out += dot(&row[..l], h) + dot(&row[l..], n);
    }
    pre.into_iter().map(sigmoid).collect()
}

/// Returns `ẑ` and, for the gated mode, the gate `G`.
pub fn fuse(
    h: &[f64],
    n: &[f64],
    params: &FusionParams,
    mode: FusionMode,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    check_fusion(h, n, params)?;
    Ok(match mode {
        FusionMode::None => (h.to_vec(), None),
        FusionMode::Simple => (h.iter().zip(n).map(|(a, b)| a - b).collect(), None),
        FusionMode::Gated => {
            let g = gate(h, n, params);
            let z = (0..h.len()).map(|k| h[k] - g[k] * n[k]).collect();
            (z, Some(g))
        }
    })
}

/// Backward of [`fuse`]. Accumulates gate weight gradients into `grads`
/// and returns `(dh, dn)`.
pub fn fuse_backward(
    h: &[f64],
    n: &[f64],
    gate_values: Option<&[f64]>,
    d_z: &[f64],
    params: &FusionParams,
    mode: FusionMode,
    grads: &mut FusionParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let l = h.len();
    match (mode, gate_values) {
        (FusionMode::None, _) => Ok((d_z.to_vec(), vec![0.0; l])),
        (FusionMode::Simple, _) => Ok((d_z.to_vec(), d_z.iter().map(|v| -v).collect())),
        (FusionMode::Gated, Some(g)) => {
            let da: Vec<f64> = (0..l).map(|k| -d_z[k] * n[k] * g[k] * (1.0 - g[k])).collect();
            let mut input = h.to_vec();
            input.extend_from_slice(n);
            grads.w_g.add_outer(&da, &input);
            axpy(1.0, &da, &mut grads.b_g);
            let mut d_in = vec![0.0; 2 * l];
            params.w_g.tr_matvec_acc(&da, &mut d_in);
            let dh = (0..l).map(|k| d_z[k] + d_in[k]).collect();
            let dn = (0..l).map(|k| -d_z[k] * g[k] + d_in[l + k]).collect();
            Ok((dh, dn))
        }
        (FusionMode::Gated, None) => Err(Error::Precondition(
            "gated fusion backward requires the cached gate".into(),
        )),
    }
}

fn check_triple(h: &[f64], n: &[f64], c: &[f64]) -> Result<()> {
    l2sq(h, n)?;
    l2sq(h, c)?;
    Ok(())
}

pub fn triplet_loss(h: &[f64], n: &[f64], c: &[f64], cfg: &LossConfig) -> Result<f64> {
    Ok(triplet_with_grad(h, n, c, cfg)?.0)
}

/// Returns `(loss, dh, dn, dc)`.
pub fn triplet_with_grad(
    h: &[f64],
    n: &[f64],
    c: &[f64],
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> {
    check_triple(h, n, c)?;
    let l = h.len();
    let hc = l2sq_unchecked(h, c);
    let hn = l2sq_unchecked(h, n);
    let cn = l2sq_unchecked(c, n);
    let diff = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x - y).collect() };
    let (d_hc, d_hn, d_cn) = (diff(h, c), diff(h, n), diff(c, n));
    let mut dh = vec![0.0; l];
    let mut dn = vec![0.0; l];
    let mut dc = vec![0.0; l];
    // each term w·‖a−b‖² contributes 2w(a−b) to a and −2w(a−b) to b
    let mut add = |w: f64, which: u8| {
        let (d, da, db): (&[f64], &mut Vec<f64>, &mut Vec<f64>) = match which {
            0 => (&d_hc, &mut dh, &mut dc),
            1 => (&d_hn, &mut dh, &mut dn),
            _ => (&d_cn, &mut dc, &mut dn),
        };
        axpy(2.0 * w, d, da);
        axpy(-2.0 * w, d, db);
    };
    let loss = match cfg.metric_mode {
        MetricMode::None => {
            return Err(Error::Precondition("triplet loss requested with metric_mode none".into()))
        }
        MetricMode::Asym => {
            let v = hc - hn + cfg.margin;
            if v > 0.0 {
                add(1.0, 0);
                add(-1.0, 1);
            }
            v.max(0.0)
        }
        MetricMode::Sym => {
            // compared as two sums so that the zero condition and the h/c swap are exact
            let (lhs, rhs) = (2.0 * hc + cfg.margin_star, hn + cn);
            let v = if lhs > rhs { lhs - rhs } else { 0.0 };
            if v > 0.0 {
                add(2.0, 0);
                add(-1.0, 1);
                add(-1.0, 2);
            }
            v.max(0.0)
        }
        MetricMode::PairLabClk => {
            add(1.0, 0);
            hc
        }
        MetricMode::PairUnclkLab => {
            let v = cfg.margin - cn;
            if v > 0.0 {
                add(-1.0, 2);
            }
            v.max(0.0)
        }
        MetricMode::PairUnclkClk => {
            let v = cfg.margin - hn;
            if v > 0.0 {
                add(-1.0, 1);
            }
            v.max(0.0)
        }
    };
    Ok((loss, dh, dn, dc))
}

/// Log-uniform proposal over items ranked by descending training click count.
#[derive(Debug, Clone)]
pub struct LogUniformSampler {
    rank_to_item: Vec<usize>,
    item_to_rank: Vec<usize>,
    log_range: f64,
}

impl LogUniformSampler {
    /// `counts[i]` is the click count of item index `i`. Ties keep index order.
    pub fn from_frequencies(counts: &[u64]) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Precondition("sampler needs a non-empty catalog".into()));
        }
        let mut rank_to_item: Vec<usize> = (0..counts.len()).collect();
        rank_to_item.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        let mut item_to_rank = vec![0; counts.len()];
        for (r, &i) in rank_to_item.iter().enumerate() {
            item_to_rank[i] = r;
        }
        Ok(LogUniformSampler {
            rank_to_item,
            item_to_rank,
            log_range: ((counts.len() + 1) as f64).ln(),
        })
    }

    pub fn len(&self) -> usize {
        self.rank_to_item.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rank_to_item.is_empty()
    }

    pub fn item_at_rank(&self, rank: usize) -> usize {
        self.rank_to_item[rank]
    }

    pub fn rank_probability(&self, rank: usize) -> f64 {
        let r = rank as f64;
        ((r + 2.0).ln() - (r + 1.0).ln()) / self.log_range
    }

    pub fn probability(&self, item: usize) -> f64 {
        self.rank_probability(self.item_to_rank[item])
    }

    /// Inverse-CDF draw of a rank.
    pub fn sample_rank(&self, rng: &mut Rng64) -> usize {
        let u: f64 = rng.random();
        let r = (u * self.log_range).exp().floor() as usize;
        r.saturating_sub(1).min(self.len() - 1)
    }
}

/// Sampled negatives with their log proposal probabilities.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Negatives {
    pub items: Vec<usize>,
    pub log_prob: Vec<f64>,
}

/// Draws `j` negatives, rejecting members of `positives`. Accepted draws may
/// repeat.
pub fn sample_negatives(
    sampler: &LogUniformSampler,
    positives: &[usize],
    j: usize,
    rng: &mut Rng64,
) -> Result<Negatives> {
    let mut blocked = positives.to_vec();
    blocked.sort_unstable();
    blocked.dedup();
    if blocked.len() >= sampler.len() {
        return Err(Error::Precondition(format!(
            "cannot sample negatives: {} positives cover a catalog of {}",
            blocked.len(),
            sampler.len()
        )));
    }
    let mut out = Negatives {
        items: Vec::with_capacity(j),
        log_prob: Vec::with_capacity(j),
    };
    while out.items.len() < j {
        let rank = sampler.sample_rank(rng);
        let item = sampler.item_at_rank(rank);
        if blocked.binary_search(&item).is_ok() {
            continue;
        }
        out.items.push(item);
        out.log_prob.push(sampler.rank_probability(rank).ln());
    }
    Ok(out)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Mean over labels of `-log softmax(positive)` over `{label} ∪ negatives`.
pub fn sampled_softmax_ce(
    z: &[f64],
    labels: &[usize],
    negatives: &Negatives,
    q: &ItemEmbeddings,
    correction: bool,
) -> Result<f64> {
    ce_core(z, labels, negatives, q, correction, None)
}

struct CeGrads<'a> {
    scale: f64,
    dz: &'a mut [f64],
    dq: &'a mut ItemGrads,
}

fn ce_core(
    z: &[f64],
    labels: &[usize],
    negatives: &Negatives,
    q: &ItemEmbeddings,
    correction: bool,
    mut grads: Option<CeGrads<'_>>,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Precondition("sampled softmax needs at least one label".into()));
    }
    if z.len() != q.q.cols() {
        return Err(Error::shape("sampled_softmax_ce", q.q.cols(), z.len()));
    }
    let neg_logits: Vec<f64> = negatives
        .items
        .iter()
        .zip(&negatives.log_prob)
        .map(|(&i, &lp)| dot(z, q.get(i)) - if correction { lp } else { 0.0 })
        .collect();
    let inv = 1.0 / labels.len() as f64;
    let mut total = 0.0;
    let mut logits = Vec::with_capacity(neg_logits.len() + 1);
    let mut d_neg = vec![0.0; neg_logits.len()];
    for &c in labels {
        logits.clear();
        logits.push(dot(z, q.get(c)));
        logits.extend_from_slice(&neg_logits);
        let lse = log_sum_exp(&logits);
        total += lse - logits[0];
        if let Some(g) = grads.as_mut() {
            let w = g.scale * inv;
            let d_pos = w * ((logits[0] - lse).exp() - 1.0);
            axpy(d_pos, q.get(c), g.dz);
            g.dq.add(c, d_pos, z);
            for (d, &lg) in d_neg.iter_mut().zip(&logits[1..]) {
                *d += w * (lg - lse).exp();
            }
        }
    }
    if let Some(g) = grads {
        for (&i, &d) in negatives.items.iter().zip(&d_neg) {
            axpy(d, q.get(i), g.dz);
            g.dq.add(i, d, z);
        }
    }
    Ok(total * inv)
}

/// Full-catalog softmax cross-entropy, averaged over labels.
pub fn full_softmax_ce(z: &[f64], labels: &[usize], q: &ItemEmbeddings) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Precondition("softmax needs at least one label".into()));
    }
    let logits: Vec<f64> = (0..q.q.rows()).map(|i| dot(z, q.get(i))).collect();
    let lse = log_sum_exp(&logits);
    Ok(labels.iter().map(|&c| lse - logits[c]).sum::<f64>() / labels.len() as f64)
}

/// Loss components and gradients for one example.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    pub ce: f64,
    pub triplet: f64,
    pub d_h: Vec<f64>,
    pub d_n: Vec<f64>,
    pub d_c: Vec<f64>,
}

/// `L = CE(ẑ) + λ·L_tri(h, n, c)` scaled by `scale`. Gradients w.r.t. the
/// fusion weights and candidate item vectors are accumulated into `fusion`
/// and `dq`; gradients w.r.t. `h`, `n`, `c` are returned.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    h: &[f64],
    n: &[f64],
    c: &[f64],
    labels: &[usize],
    negatives: &Negatives,
    q: &ItemEmbeddings,
    params: &FusionParams,
    cfg: &LossConfig,
    scale: f64,
    fusion: &mut FusionParams,
    dq: &mut ItemGrads,
) -> Result<LossOutput> {
    let (z, g) = fuse(h, n, params, cfg.fusion_mode)?;
    let mut dz = vec![0.0; z.len()];
    let ce = ce_core(
        &z,
        labels,
        negatives,
        q,
        cfg.correction,
        Some(CeGrads {
            scale,
            dz: &mut dz,
            dq,
        }),
    )?;
    let (mut d_h, mut d_n) = fuse_backward(h, n, g.as_deref(), &dz, params, cfg.fusion_mode, fusion)?;
    let mut d_c = vec![0.0; c.len()];
    let mut triplet = 0.0;
    if cfg.metric_mode != MetricMode::None {
        let (t, th, tn, tc) = triplet_with_grad(h, n, c, cfg)?;
        triplet = t;
        let w = scale * cfg.lambda;
        axpy(w, &th, &mut d_h);
        axpy(w, &tn, &mut d_n);
        axpy(w, &tc, &mut d_c);
    }
    Ok(LossOutput {
        total: ce + cfg.lambda * triplet,
        ce,
        triplet,
        d_h,
        d_n,
        d_c,
    })
}
