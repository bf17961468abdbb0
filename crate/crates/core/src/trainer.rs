//! Mini-batch training: length-bucketed batches, AdaGrad with global-norm
//! clipping, and a versioned binary checkpoint.
//!
//! Every random draw is keyed by the global step, so a run restored from a
//! checkpoint continues exactly as an uninterrupted one would.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoders::{backward_encoders, backward_items, embed_all, forward, ItemGrads};
use crate::error::{Error, Result};
use crate::model::{IndexedExample, ModelConfig, ModelParams, Vocab};
use crate::objective::{sample_negatives, total_loss, LogUniformSampler, LossConfig, Negatives};
use crate::rng::stream;

const TAG_BATCHES: u64 = 0xBA7C;
const TAG_NEGATIVES: u64 = 0x5EED;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 10,
            seed: 1,
            learning_rate: 0.1,
            epsilon: 1e-8,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be >= 0".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("train.epsilon must be > 0".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("train.clip_norm must be > 0".into()));
        }
        Ok(())
    }
}

/// Scales all slices by `clip_norm / norm` when their joint L2 norm exceeds
/// `clip_norm`. Returns the norm before clipping.
pub fn clip_global(grads: &mut [&mut [f64]], clip_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > clip_norm {
        let s = clip_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One AdaGrad update: `acc += g²; θ -= lr·g/√(acc + ε)`.
pub fn adagrad_step(theta: &mut [f64], grad: &[f64], acc: &mut [f64], lr: f64, eps: f64) {
    for ((t, &g), a) in theta.iter_mut().zip(grad).zip(acc.iter_mut()) {
        if g == 0.0 {
            continue;
        }
        *a += g * g;
        *t -= lr * g / (*a + eps).sqrt();
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub accum: ModelParams,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, cfg: &TrainConfig) -> Self {
        OptimizerState {
            accum: params.zeros_like(),
            learning_rate: cfg.learning_rate,
            epsilon: cfg.epsilon,
            clip_norm: cfg.clip_norm,
        }
    }

    /// Clips `grads` in place and applies the update. Returns the pre-clip norm.
    pub fn step(&mut self, params: &mut ModelParams, grads: &mut ModelParams) -> f64 {
        let norm = {
            let mut views: Vec<&mut [f64]> = grads.tensors_mut().into_iter().map(|(_, d)| d).collect();
            clip_global(&mut views, self.clip_norm)
        };
        let g = grads.tensors();
        for (((_, theta), (_, acc)), gv) in params
            .tensors_mut()
            .into_iter()
            .zip(self.accum.tensors_mut())
            .zip(g)
        {
            adagrad_step(theta, gv.data, acc, self.learning_rate, self.epsilon);
        }
        norm
    }
}

/// Sorts example indices by clicked length (stable), chunks them into
/// buckets of `batch_size`, and shuffles bucket order with a generator keyed
/// by `(seed, epoch)`.
pub fn make_batches(examples: &[IndexedExample], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| examples[i].clicked.len());
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    batches.shuffle(&mut stream(seed, &[TAG_BATCHES, epoch]));
    batches
}

/// Click frequency per item, counted over training labels.
pub fn label_frequencies(examples: &[IndexedExample], n_items: usize) -> Vec<u64> {
    let mut counts = vec![0u64; n_items];
    for ex in examples {
        for &i in &ex.labels {
            counts[i] += 1;
        }
    }
    counts
}

/// Mean loss over `batch` and its gradient for every parameter.
pub fn batch_loss_and_grads(
    params: &ModelParams,
    vocab: &Vocab,
    batch: &[&IndexedExample],
    negatives: &[Negatives],
    loss: &LossConfig,
) -> Result<(f64, ModelParams)> {
    let mut grads = params.zeros_like();
    let mut dq = ItemGrads::new(vocab.n_items(), params.embedding_dim());
    let l = accumulate_batch(params, vocab, batch, negatives, loss, &mut grads, &mut dq)?;
    Ok((l, grads))
}

fn accumulate_batch(
    params: &ModelParams,
    vocab: &Vocab,
    batch: &[&IndexedExample],
    negatives: &[Negatives],
    loss: &LossConfig,
    grads: &mut ModelParams,
    dq: &mut ItemGrads,
) -> Result<f64> {
    if batch.is_empty() || batch.len() != negatives.len() {
        return Err(Error::Precondition(format!(
            "batch of {} examples with {} negative sets",
            batch.len(),
            negatives.len()
        )));
    }
    let q = embed_all(vocab, params);
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (ex, neg) in batch.iter().zip(negatives) {
        let state = forward(ex, &q, params)?;
        let out = total_loss(
            &state.h,
            &state.n,
            &state.c,
            &ex.labels,
            neg,
            &q,
            &params.fusion,
            loss,
            scale,
            &mut grads.fusion,
            dq,
        )?;
        backward_encoders(&state, &out.d_h, &out.d_n, &out.d_c, params, grads, dq)?;
        total += out.total;
    }
    backward_items(dq, &q, vocab, params, grads);
    Ok(total * scale)
}

/// Checkpointed configuration and progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub step: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

pub struct Trainer<'a> {
    vocab: &'a Vocab,
    examples: &'a [IndexedExample],
    sampler: LogUniformSampler,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub step: u64,
    grads: ModelParams,
    dq: ItemGrads,
    batches: Option<(u64, Vec<Vec<usize>>)>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        vocab: &'a Vocab,
        examples: &'a [IndexedExample],
        params: ModelParams,
        loss: LossConfig,
        train: TrainConfig,
    ) -> Result<Self> {
        let optimizer = OptimizerState::new(&params, &train);
        Self::resume(vocab, examples, params, optimizer, loss, train, 0)
    }

    pub fn resume(
        vocab: &'a Vocab,
        examples: &'a [IndexedExample],
        params: ModelParams,
        optimizer: OptimizerState,
        loss: LossConfig,
        train: TrainConfig,
        step: u64,
    ) -> Result<Self> {
        loss.validate()?;
        train.validate()?;
        params.config.validate()?;
        params.check_vocab(vocab)?;
        if examples.is_empty() {
            return Err(Error::Precondition("training split is empty".into()));
        }
        let sampler = LogUniformSampler::from_frequencies(&label_frequencies(examples, vocab.n_items()))?;
        let grads = params.zeros_like();
        let dq = ItemGrads::new(vocab.n_items(), params.embedding_dim());
        Ok(Trainer {
            vocab,
            examples,
            sampler,
            params,
            optimizer,
            loss,
            train,
            step,
            grads,
            dq,
            batches: None,
        })
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.examples.len().div_ceil(self.train.batch_size) as u64
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.batches_per_epoch()
    }

    pub fn run_state(&self) -> RunState {
        RunState {
            step: self.step,
            model: self.params.config.clone(),
            loss: self.loss.clone(),
            train: self.train.clone(),
        }
    }

    /// Runs one optimizer step on the batch at the current global step and
    /// returns its mean loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let per_epoch = self.batches_per_epoch();
        let (epoch, b) = (self.step / per_epoch, self.step % per_epoch);
        if self.batches.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let order = make_batches(self.examples, self.train.batch_size, self.train.seed, epoch);
            self.batches = Some((epoch, order));
        }
        let examples = self.examples;
        let batch: Vec<&IndexedExample> = self.batches.as_ref().expect("batches cached").1[b as usize]
            .iter()
            .map(|&i| &examples[i])
            .collect();
        let mut negatives = Vec::with_capacity(batch.len());
        for (k, ex) in batch.iter().enumerate() {
            let mut rng = stream(self.train.seed, &[TAG_NEGATIVES, self.step, k as u64]);
            negatives.push(sample_negatives(&self.sampler, &ex.labels, self.loss.num_negatives, &mut rng)?);
        }

        self.grads.fill(0.0);
        self.dq.clear();
        let loss = accumulate_batch(
            &self.params,
            self.vocab,
            &batch,
            &negatives,
            &self.loss,
            &mut self.grads,
            &mut self.dq,
        )?;
        if !loss.is_finite() || !self.grads.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch: b,
                norms: self.params.norms_summary(),
            });
        }
        self.optimizer.step(&mut self.params, &mut self.grads);
        if !self.params.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch: b,
                norms: self.params.norms_summary(),
            });
        }
        self.step += 1;
        Ok(loss)
    }

    /// Finishes the current epoch and returns the mean batch loss over the
    /// batches run.
    pub fn train_epoch(&mut self) -> Result<f64> {
        let per_epoch = self.batches_per_epoch();
        let mut sum = 0.0;
        let mut n = 0;
        loop {
            sum += self.train_step()?;
            n += 1;
            if self.step % per_epoch == 0 {
                break;
            }
        }
        let mean = sum / n as f64;
        log::info!("epoch {} mean loss {mean:.6}", self.epoch());
        Ok(mean)
    }

    /// Runs `train.epochs` epochs and returns the per-epoch mean loss trace.
    pub fn train(&mut self) -> Result<Vec<f64>> {
        (0..self.train.epochs).map(|_| self.train_epoch()).collect()
    }
}

const MAGIC: &[u8; 6] = b"SRU2B1";
const FORMAT_VERSION: u8 = 1;

pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub state: RunState,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensors(out: &mut Vec<u8>, p: &ModelParams) {
    let tensors = p.tensors();
    put_u64(out, tensors.len() as u64);
    for t in tensors {
        put_u64(out, t.name.len() as u64);
        out.extend_from_slice(t.name.as_bytes());
        put_u64(out, t.dims.len() as u64);
        for &d in &t.dims {
            put_u64(out, d as u64);
        }
        for v in t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn checkpoint_bytes(params: &ModelParams, optimizer: &OptimizerState, state: &RunState) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    put_tensors(&mut out, params);
    put_tensors(&mut out, &optimizer.accum);
    let text = toml::to_string(state).map_err(|e| Error::Config(format!("cannot serialize run state: {e}")))?;
    put_u64(&mut out, text.len() as u64);
    out.extend_from_slice(text.as_bytes());
    Ok(out)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, optimizer: &OptimizerState, state: &RunState) -> Result<()> {
    fs::write(path, checkpoint_bytes(params, optimizer, state)?)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Checkpoint {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated: needed {n} more bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if v > remaining.max(64) {
            return Err(self.err(format!("length {v} exceeds remaining {remaining} bytes")));
        }
        Ok(v as usize)
    }

    fn tensors(&mut self) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
        let count = self.len()?;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let n = self.len()?;
            let name = std::str::from_utf8(self.take(n)?)
                .map_err(|_| self.err("tensor name is not valid text"))?
                .to_string();
            let rank = self.len()?;
            let dims = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
            let size = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|s| s.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos))
                .ok_or_else(|| self.err(format!("truncated: tensor {name} payload {dims:?}")))?;
            let data = self
                .take(size * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            out.push((name, dims, data));
        }
        Ok(out)
    }
}

pub fn parse_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint {
            offset: 0,
            message: "bad magic: not a checkpoint".into(),
        });
    }
    let version = r.take(1)?[0];
    if version != FORMAT_VERSION {
        return Err(r.err(format!("unsupported format version {version}")));
    }
    let params = r.tensors()?;
    let accum = r.tensors()?;
    let n = r.len()?;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| r.err("config dump is not valid text"))?;
    let state: RunState = toml::from_str(text).map_err(|e| r.err(format!("config dump: {e}")))?;
    if r.pos != buf.len() {
        return Err(r.err("trailing bytes after config dump"));
    }
    let params = ModelParams::from_tensors(&state.model, &params)?;
    let accum = ModelParams::from_tensors(&state.model, &accum)?;
    if accum.tensors().iter().map(|t| &t.dims).ne(params.tensors().iter().map(|t| &t.dims)) {
        return Err(Error::Mismatch("optimizer accumulators do not mirror parameters".into()));
    }
    let optimizer = OptimizerState {
        accum,
        learning_rate: state.train.learning_rate,
        epsilon: state.train.epsilon,
        clip_norm: state.train.clip_norm,
    };
    Ok(Checkpoint {
        params,
        optimizer,
        state,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    parse_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::ItemMeta;
    use crate::model::ClickedEncoder;
    use crate::objective::{FusionMode, MetricMode};
    use proptest::prelude::*;

    #[test]
    fn clip_examples() {
        let mut z = vec![0.0, 0.0];
        clip_global(&mut [&mut z[..]], 5.0);
        assert_eq!(z, vec![0.0, 0.0]);
        let mut v = vec![6.0, 8.0];
        assert_eq!(clip_global(&mut [&mut v[..]], 5.0), 10.0);
        assert_eq!(v, vec![3.0, 4.0]);
        let mut v = vec![3.0, 4.0];
        clip_global(&mut [&mut v[..]], 5.0);
        assert_eq!(v, vec![3.0, 4.0]);
    }

    #[test]
    fn adagrad_examples() {
        let (mut t, mut a) = (vec![1.0], vec![0.0]);
        adagrad_step(&mut t, &[0.0], &mut a, 0.1, 1e-8);
        assert_eq!((t[0], a[0]), (1.0, 0.0));
        adagrad_step(&mut t, &[2.0], &mut a, 0.1, 1e-8);
        assert!((t[0] - 0.9).abs() < 1e-9);
        let before = t[0];
        adagrad_step(&mut t, &[2.0], &mut a, 0.1, 1e-8);
        assert_eq!(a[0], 8.0);
        assert!((before - t[0] - 0.2 / (8.0f64 + 1e-8).sqrt()).abs() < 1e-12);
        assert!((before - t[0] - 0.07071).abs() < 1e-5);
    }

    fn ex(len: usize) -> IndexedExample {
        IndexedExample {
            user: 0,
            clicked: vec![0; len],
            unclicked: vec![],
            labels: vec![1],
        }
    }

    #[test]
    fn batching_examples() {
        let few = vec![ex(3), ex(1)];
        assert_eq!(make_batches(&few, 8, 1, 0), vec![vec![1, 0]]);
        let exs = vec![ex(1), ex(9), ex(1), ex(9)];
        let mut b = make_batches(&exs, 2, 5, 0);
        b.sort();
        assert_eq!(b, vec![vec![0, 2], vec![1, 3]]);
        assert_eq!(make_batches(&exs, 2, 5, 3), make_batches(&exs, 2, 5, 3));
    }

    pub(crate) fn toy() -> (Vocab, Vec<IndexedExample>) {
        let catalog: Vec<ItemMeta> = (0..30)
            .map(|i| ItemMeta {
                item_id: format!("i{i:02}"),
                leaf_category: format!("leaf{}", i % 6),
                first_level_category: format!("cat{}", i % 3),
                brand: format!("b{}", i % 5),
                shop: format!("s{}", i % 7),
            })
            .collect();
        let vocab = Vocab::new(&catalog, ["u0", "u1", "u2"]).unwrap();
        let exs = (0..40)
            .map(|k| {
                let base = (k % 3) * 10;
                IndexedExample {
                    user: k % 3,
                    clicked: (0..(2 + k % 5)).map(|j| base + (j + k) % 10).collect(),
                    unclicked: (0..(k % 3)).map(|j| (base + 15 + j) % 30).collect(),
                    labels: (0..3).map(|j| base + (k + j * 3) % 10).collect(),
                }
            })
            .collect();
        (vocab, exs)
    }

    fn configs(enc: ClickedEncoder) -> (ModelConfig, LossConfig, TrainConfig) {
        (
            ModelConfig {
                embedding_dim: 6,
                clicked_encoder: enc,
                init_scale: 0.1,
                ..ModelConfig::default()
            },
            LossConfig {
                num_negatives: 8,
                ..LossConfig::default()
            },
            TrainConfig {
                batch_size: 8,
                epochs: 3,
                ..TrainConfig::default()
            },
        )
    }

    #[test]
    fn zero_epochs_and_zero_rate_leave_params_unchanged() {
        let (vocab, exs) = toy();
        let (m, l, mut t) = configs(ClickedEncoder::MeanPool);
        let init = ModelParams::init(&m, &vocab);
        t.epochs = 0;
        let mut tr = Trainer::new(&vocab, &exs, init.clone(), l.clone(), t.clone()).unwrap();
        assert!(tr.train().unwrap().is_empty());
        assert_eq!(tr.params, init);
        t.epochs = 2;
        t.learning_rate = 0.0;
        let mut tr = Trainer::new(&vocab, &exs, init.clone(), l, t).unwrap();
        assert_eq!(tr.train().unwrap().len(), 2);
        assert_eq!(tr.params, init);
    }

    #[test]
    fn loss_decreases_on_toy_data() {
        let (vocab, exs) = toy();
        for enc in [ClickedEncoder::MeanPool, ClickedEncoder::Recurrent] {
            let (m, l, mut t) = configs(enc);
            t.epochs = 6;
            let mut tr = Trainer::new(&vocab, &exs, ModelParams::init(&m, &vocab), l, t).unwrap();
            let trace = tr.train().unwrap();
            assert!(trace.last().unwrap() < &trace[0], "{enc:?}: {trace:?}");
        }
    }

    #[test]
    fn empty_split_is_rejected() {
        let (vocab, _) = toy();
        let (m, l, t) = configs(ClickedEncoder::MeanPool);
        assert!(Trainer::new(&vocab, &[], ModelParams::init(&m, &vocab), l, t).is_err());
    }

    #[test]
    fn non_finite_loss_reports_position() {
        let (vocab, exs) = toy();
        let (m, l, t) = configs(ClickedEncoder::MeanPool);
        let mut p = ModelParams::init(&m, &vocab);
        p.encoder.b_h[0] = f64::NAN;
        let mut tr = Trainer::new(&vocab, &exs, p, l, t).unwrap();
        match tr.train_step() {
            Err(Error::NonFinite { epoch: 0, batch: 0, norms }) => assert!(norms.contains("enc.b_h")),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let (vocab, exs) = toy();
        for enc in [ClickedEncoder::MeanPool, ClickedEncoder::Recurrent] {
            let (m, mut l, t) = configs(enc);
            l.metric_mode = MetricMode::Asym;
            l.fusion_mode = FusionMode::Simple;
            let init = ModelParams::init(&m, &vocab);

            let mut straight = Trainer::new(&vocab, &exs, init.clone(), l.clone(), t.clone()).unwrap();
            for _ in 0..7 {
                straight.train_step().unwrap();
            }

            let mut first = Trainer::new(&vocab, &exs, init, l, t).unwrap();
            for _ in 0..4 {
                first.train_step().unwrap();
            }
            let bytes = checkpoint_bytes(&first.params, &first.optimizer, &first.run_state()).unwrap();
            let ck = parse_checkpoint(&bytes).unwrap();
            assert_eq!(ck.params, first.params);
            assert_eq!(ck.optimizer.accum, first.optimizer.accum);
            assert_eq!(ck.state.step, 4);
            let again = checkpoint_bytes(&ck.params, &ck.optimizer, &ck.state).unwrap();
            assert_eq!(again, bytes);

            let mut resumed = Trainer::resume(
                &vocab,
                &exs,
                ck.params,
                ck.optimizer,
                ck.state.loss,
                ck.state.train,
                ck.state.step,
            )
            .unwrap();
            for _ in 0..3 {
                resumed.train_step().unwrap();
            }
            assert_eq!(resumed.params, straight.params);
            assert_eq!(resumed.optimizer.accum, straight.optimizer.accum);
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let (vocab, _) = toy();
        let (m, l, t) = configs(ClickedEncoder::MeanPool);
        let p = ModelParams::init(&m, &vocab);
        let opt = OptimizerState::new(&p, &t);
        let state = RunState {
            step: 0,
            model: m,
            loss: l,
            train: t,
        };
        let bytes = checkpoint_bytes(&p, &opt, &state).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(parse_checkpoint(&bad), Err(Error::Checkpoint { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[6] = 9;
        assert!(matches!(parse_checkpoint(&bad), Err(Error::Checkpoint { .. })));
        for cut in [3, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            match parse_checkpoint(&bytes[..cut]) {
                Err(Error::Checkpoint { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: {:?}", other.map(|_| ())),
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn clipped_norm_is_bounded(v in prop::collection::vec(-100.0f64..100.0, 1..20), w in prop::collection::vec(-100.0f64..100.0, 1..20), c in 0.01f64..50.0) {
            let (mut a, mut b) = (v, w);
            clip_global(&mut [&mut a[..], &mut b[..]], c);
            let n = a.iter().chain(&b).map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(n <= c + 1e-9);
        }

        #[test]
        fn accumulators_never_decrease(gs in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 1..10)) {
            let mut t = vec![0.5; 4];
            let mut acc = vec![0.0; 4];
            for g in gs {
                let before = acc.clone();
                adagrad_step(&mut t, &g, &mut acc, 0.1, 1e-8);
                prop_assert!(acc.iter().zip(&before).all(|(a, b)| a >= b));
            }
        }
    }
}
