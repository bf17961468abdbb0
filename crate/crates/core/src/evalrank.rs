//! Full-catalog top-k retrieval, ranking metrics, and the ablation and
//! hyperparameter sweep harnesses.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{embed_all, encode_clicked, encode_unclicked, ItemEmbeddings};
use crate::error::{Error, Result};
use crate::model::{IndexedExample, ModelConfig, ModelParams, Vocab};
use crate::numcore::dot;
use crate::objective::{fuse, FusionMode, LossConfig, MetricMode};
use crate::trainer::{TrainConfig, Trainer};

/// The `k` highest-scoring item indices, ties broken by ascending item id.
pub fn topk(z: &[f64], q: &ItemEmbeddings, k: usize, id_rank: &[usize]) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Precondition("top-k needs k >= 1".into()));
    }
    if z.len() != q.q.cols() {
        return Err(Error::shape("topk", q.q.cols(), z.len()));
    }
    let scores: Vec<f64> = (0..q.q.rows()).map(|i| dot(z, q.get(i))).collect();
    let cmp = |a: &usize, b: &usize| -> Ordering {
        scores[*b]
            .total_cmp(&scores[*a])
            .then(id_rank[*a].cmp(&id_rank[*b]))
    };
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let k = k.min(idx.len());
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    Ok(idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub hr: f64,
    pub mrr: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

/// Metrics of `ranked[..k]` against the label set (duplicates in `labels`
/// count once).
pub fn compute_metrics(ranked: &[usize], labels: &[usize], k: usize) -> Result<Metrics> {
    if labels.is_empty() {
        return Err(Error::Precondition("metrics need a non-empty label set".into()));
    }
    if k == 0 {
        return Err(Error::Precondition("metrics need k >= 1".into()));
    }
    let set: HashSet<usize> = labels.iter().copied().collect();
    let list = &ranked[..k.min(ranked.len())];
    let hits = list.iter().filter(|i| set.contains(i)).count();
    let first = list.iter().position(|i| set.contains(i));
    let recall = hits as f64 / set.len() as f64;
    let precision = hits as f64 / k as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Metrics {
        hr: if hits > 0 { 1.0 } else { 0.0 },
        mrr: first.map_or(0.0, |r| 1.0 / (r + 1) as f64),
        recall,
        precision,
        f1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffMetrics {
    pub k: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cutoffs: Vec<CutoffMetrics>,
    pub n_cases: usize,
    pub fingerprint: String,
}

impl MetricsReport {
    pub fn at(&self, k: usize) -> Option<&Metrics> {
        self.cutoffs.iter().find(|c| c.k == k).map(|c| &c.metrics)
    }
}

/// Short hex digest identifying a model/loss configuration and cutoff list.
pub fn fingerprint(model: &ModelConfig, loss: &LossConfig, cutoffs: &[usize]) -> String {
    let mut h = Sha256::new();
    h.update(toml::to_string(model).unwrap_or_default());
    h.update(toml::to_string(loss).unwrap_or_default());
    h.update(format!("{cutoffs:?}"));
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// The fused user representation `ẑ` used for retrieval.
pub fn represent(
    ex: &IndexedExample,
    q: &ItemEmbeddings,
    params: &ModelParams,
    fusion: FusionMode,
) -> Result<Vec<f64>> {
    let (h, _) = encode_clicked(&ex.clicked, ex.user, q, params)?;
    let (n, _) = encode_unclicked(&ex.unclicked, q, params);
    Ok(fuse(&h, &n, &params.fusion, fusion)?.0)
}

pub fn evaluate(
    params: &ModelParams,
    vocab: &Vocab,
    test: &[IndexedExample],
    loss: &LossConfig,
    cutoffs: &[usize],
) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::Precondition("test split is empty".into()));
    }
    let k_max = *cutoffs
        .iter()
        .max()
        .ok_or_else(|| Error::Precondition("no cutoffs requested".into()))?;
    params.check_vocab(vocab)?;
    let q = embed_all(vocab, params);
    let mut sums = vec![Metrics::default(); cutoffs.len()];
    for ex in test {
        let z = represent(ex, &q, params, loss.fusion_mode)?;
        let ranked = topk(&z, &q, k_max, vocab.id_rank())?;
        for (s, &k) in sums.iter_mut().zip(cutoffs) {
            let m = compute_metrics(&ranked, &ex.labels, k)?;
            s.hr += m.hr;
            s.mrr += m.mrr;
            s.recall += m.recall;
            s.precision += m.precision;
            s.f1 += m.f1;
        }
    }
    let n = test.len() as f64;
    let cutoffs_out = sums
        .into_iter()
        .zip(cutoffs)
        .map(|(s, &k)| CutoffMetrics {
            k,
            metrics: Metrics {
                hr: s.hr / n,
                mrr: s.mrr / n,
                recall: s.recall / n,
                precision: s.precision / n,
                f1: s.f1 / n,
            },
        })
        .collect();
    Ok(MetricsReport {
        cutoffs: cutoffs_out,
        n_cases: test.len(),
        fingerprint: fingerprint(&params.config, loss, cutoffs),
    })
}

/// Ablation rows: the base model, the partial variants, the full model, and
/// the pairwise-only metric structures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    WoConfMetric,
    WoMetric,
    WoFusionSym,
    WoSym,
    Sru2b,
    PairLabClk,
    PairUnclkLab,
    PairUnclkClk,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Base,
        Variant::WoConfMetric,
        Variant::WoMetric,
        Variant::WoFusionSym,
        Variant::WoSym,
        Variant::Sru2b,
        Variant::PairLabClk,
        Variant::PairUnclkLab,
        Variant::PairUnclkClk,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::WoConfMetric => "w/o conf+metric",
            Variant::WoMetric => "w/o metric",
            Variant::WoFusionSym => "w/o fusion+sym",
            Variant::WoSym => "w/o sym",
            Variant::Sru2b => "SRU2B",
            Variant::PairLabClk => "SRU2B-lab&clk",
            Variant::PairUnclkLab => "SRU2B-unclk&lab",
            Variant::PairUnclkClk => "SRU2B-unclk&clk",
        }
    }

    pub fn modes(self) -> (FusionMode, MetricMode) {
        use FusionMode as F;
        use MetricMode as M;
        match self {
            Variant::Base => (F::None, M::None),
            Variant::WoConfMetric => (F::Simple, M::None),
            Variant::WoMetric => (F::Gated, M::None),
            Variant::WoFusionSym => (F::None, M::Asym),
            Variant::WoSym => (F::Gated, M::Asym),
            Variant::Sru2b => (F::Gated, M::Sym),
            Variant::PairLabClk => (F::Gated, M::PairLabClk),
            Variant::PairUnclkLab => (F::Gated, M::PairUnclkLab),
            Variant::PairUnclkClk => (F::Gated, M::PairUnclkClk),
        }
    }

    /// `base` with this variant's fusion and metric modes.
    pub fn loss_config(self, base: &LossConfig) -> LossConfig {
        let (fusion_mode, metric_mode) = self.modes();
        LossConfig {
            fusion_mode,
            metric_mode,
            ..base.clone()
        }
    }

    /// Checks that `cfg` implements this variant.
    pub fn audit(self, cfg: &LossConfig) -> Result<()> {
        let (f, m) = self.modes();
        if cfg.fusion_mode != f || cfg.metric_mode != m {
            return Err(Error::Verification(format!(
                "variant {} expects ({}, {}) but is configured as ({}, {})",
                self.label(),
                f.name(),
                m.name(),
                cfg.fusion_mode.name(),
                cfg.metric_mode.name()
            )));
        }
        Ok(())
    }
}

/// Everything needed to train and evaluate one configuration.
pub struct Experiment<'a> {
    pub vocab: &'a Vocab,
    pub train: &'a [IndexedExample],
    pub test: &'a [IndexedExample],
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train_cfg: TrainConfig,
    pub cutoffs: Vec<usize>,
}

pub struct RunResult {
    pub params: ModelParams,
    pub trace: Vec<f64>,
    pub report: MetricsReport,
}

impl Experiment<'_> {
    /// Trains from the configured initialization under `loss` and evaluates.
    pub fn run(&self, loss: &LossConfig) -> Result<RunResult> {
        let init = ModelParams::init(&self.model, self.vocab);
        let mut trainer = Trainer::new(self.vocab, self.train, init, loss.clone(), self.train_cfg.clone())?;
        let trace = trainer.train()?;
        let report = evaluate(&trainer.params, self.vocab, self.test, loss, &self.cutoffs)?;
        Ok(RunResult {
            params: trainer.params,
            trace,
            report,
        })
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub loss: LossConfig,
    pub trace: Vec<f64>,
    pub report: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn rel_delta(v: f64, base: f64) -> f64 {
    if base == 0.0 {
        0.0
    } else {
        (v - base) / base
    }
}

impl AblationTable {
    pub fn base(&self) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == Variant::Base)
    }

    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Relative change of every metric at `k` versus the base row.
    pub fn deltas(&self, row: &AblationRow, k: usize) -> Option<Metrics> {
        let b = self.base()?.report.at(k)?;
        let m = row.report.at(k)?;
        Some(Metrics {
            hr: rel_delta(m.hr, b.hr),
            mrr: rel_delta(m.mrr, b.mrr),
            recall: rel_delta(m.recall, b.recall),
            precision: rel_delta(m.precision, b.precision),
            f1: rel_delta(m.f1, b.f1),
        })
    }

    /// Columns `variant,k,hr,mrr,recall,f1,delta_vs_base,fusion_mode,metric_mode`;
    /// `delta_vs_base` is the relative HR change, empty without a base row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,k,hr,mrr,recall,f1,delta_vs_base,fusion_mode,metric_mode\n");
        for row in &self.rows {
            for c in &row.report.cutoffs {
                let m = &c.metrics;
                let delta = self
                    .deltas(row, c.k)
                    .map(|d| format!("{:.6}", d.hr))
                    .unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{},{},{:.6},{:.6},{:.6},{:.6},{},{},{}",
                    row.variant.label(),
                    c.k,
                    m.hr,
                    m.mrr,
                    m.recall,
                    m.f1,
                    delta,
                    row.loss.fusion_mode.name(),
                    row.loss.metric_mode.name()
                );
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<17} {:<15} {:>4} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "variant", "(fusion,metric)", "k", "HR", "MRR", "Recall", "F1", "dHR", "dMRR"
        );
        for row in &self.rows {
            let tag = format!("({},{})", row.loss.fusion_mode.name(), row.loss.metric_mode.name());
            for c in &row.report.cutoffs {
                let m = &c.metrics;
                let (dh, dm) = self
                    .deltas(row, c.k)
                    .map(|d| (format!("{:+.2}%", 100.0 * d.hr), format!("{:+.2}%", 100.0 * d.mrr)))
                    .unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{:<17} {:<15} {:>4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8} {:>8}",
                    row.variant.label(),
                    tag,
                    c.k,
                    m.hr,
                    m.mrr,
                    m.recall,
                    m.f1,
                    dh,
                    dm
                );
            }
        }
        out
    }
}

/// Trains and evaluates every variant from the same initialization.
pub fn run_ablation(exp: &Experiment<'_>, variants: &[Variant]) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let loss = v.loss_config(&exp.loss);
        v.audit(&loss)?;
        log::info!("ablation: training {}", v.label());
        let r = exp.run(&loss)?;
        rows.push(AblationRow {
            variant: v,
            loss,
            trace: r.trace,
            report: r.report,
        });
    }
    Ok(AblationTable { rows })
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub parameter: &'static str,
    pub value: f64,
    pub report: MetricsReport,
}

/// One-at-a-time sweep of `lambda` and `margin_star` around the experiment's
/// loss configuration.
pub fn run_sweep(exp: &Experiment<'_>, lambdas: &[f64], margins: &[f64]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &value in lambdas {
        let loss = LossConfig {
            lambda: value,
            ..exp.loss.clone()
        };
        loss.validate()?;
        rows.push(SweepRow {
            parameter: "lambda",
            value,
            report: exp.run(&loss)?.report,
        });
    }
    for &value in margins {
        let loss = LossConfig {
            margin_star: value,
            ..exp.loss.clone()
        };
        loss.validate()?;
        rows.push(SweepRow {
            parameter: "margin_star",
            value,
            report: exp.run(&loss)?.report,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("parameter,value,k,hr,mrr,recall,f1\n");
    for r in rows {
        for c in &r.report.cutoffs {
            let m = &c.metrics;
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{:.6}",
                r.parameter, r.value, c.k, m.hr, m.mrr, m.recall, m.f1
            );
        }
    }
    out
}

pub fn report_csv(report: &MetricsReport) -> String {
    let mut out = String::from("k,hr,mrr,recall,precision,f1,n_cases,fingerprint\n");
    for c in &report.cutoffs {
        let m = &c.metrics;
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
            c.k, m.hr, m.mrr, m.recall, m.precision, m.f1, report.n_cases, report.fingerprint
        );
    }
    out
}

pub fn report_text(report: &MetricsReport) -> String {
    let mut out = format!("cases: {}  config: {}\n", report.n_cases, report.fingerprint);
    for c in &report.cutoffs {
        let m = &c.metrics;
        let _ = writeln!(
            out,
            "@{:<4} HR {:.4}  MRR {:.4}  Recall {:.4}  Precision {:.4}  F1 {:.4}",
            c.k, m.hr, m.mrr, m.recall, m.precision, m.f1
        );
    }
    out
}
