//! Item embedding and the clicked / unclicked / label sequence encoders.
//!
//! * item:      `q_i = tanh(W_q [e_item; e_leaf; e_cat; e_brand; e_shop] + b_q)`
//! * clicked:   `h = tanh(W_h [pool(S⁺); e_u] + b_h)` where `pool` is a mean
//!   or the last state of a gated recurrent cell
//! * unclicked: `n = tanh(W_n mean(q over S⁻) + b_n)`, zero mean when empty
//! * labels:    `c = tanh(W_c mean(q over C) + b_c)`
//!
//! Backward passes are hand-derived. Item-level gradients are collected in an
//! [`ItemGrads`] buffer and pushed through the item projection once per batch
//! by [`backward_items`].

use crate::error::{Error, Result};
use crate::model::{ClickedEncoder, GruParams, IndexedExample, ModelParams, Vocab};
use crate::numcore::{axpy, sigmoid, Matrix};

/// Projected embeddings `q_i` for every catalog item.
#[derive(Debug, Clone)]
pub struct ItemEmbeddings {
    pub q: Matrix,
}

impl ItemEmbeddings {
    #[inline]
    pub fn get(&self, item: usize) -> &[f64] {
        self.q.row(item)
    }
}

fn item_input(item: usize, vocab: &Vocab, params: &ModelParams) -> Vec<f64> {
    let t = &params.tables;
    let f = vocab.item_features(item);
    let mut x = Vec::with_capacity(params.encoder.w_q.cols());
    x.extend_from_slice(t.item.row(item));
    x.extend_from_slice(t.leaf.row(f[0]));
    x.extend_from_slice(t.first_level.row(f[1]));
    x.extend_from_slice(t.brand.row(f[2]));
    x.extend_from_slice(t.shop.row(f[3]));
    x
}

fn project(x: &[f64], params: &ModelParams, out: &mut [f64]) {
    out.copy_from_slice(&params.encoder.b_q);
    params.encoder.w_q.matvec_acc(x, out);
    out.iter_mut().for_each(|v| *v = v.tanh());
}

pub fn embed_item(item_id: &str, vocab: &Vocab, params: &ModelParams) -> Result<Vec<f64>> {
    let idx = vocab.item(item_id)?;
    let mut q = vec![0.0; params.embedding_dim()];
    project(&item_input(idx, vocab, params), params, &mut q);
    Ok(q)
}

pub fn embed_all(vocab: &Vocab, params: &ModelParams) -> ItemEmbeddings {
    let l = params.embedding_dim();
    let mut q = Matrix::zeros(vocab.n_items(), l);
    for i in 0..vocab.n_items() {
        let x = item_input(i, vocab, params);
        project(&x, params, q.row_mut(i));
    }
    ItemEmbeddings { q }
}

fn mean_of(items: &[usize], q: &ItemEmbeddings, dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    if items.is_empty() {
        return m;
    }
    for &i in items {
        axpy(1.0, q.get(i), &mut m);
    }
    let inv = 1.0 / items.len() as f64;
    m.iter_mut().for_each(|v| *v *= inv);
    m
}

fn tanh_layer(w: &Matrix, b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = b.to_vec();
    w.matvec_acc(x, &mut out);
    out.iter_mut().for_each(|v| *v = v.tanh());
    out
}

/// Backprop through `y = tanh(W x + b)`: accumulates dW, db and returns dx.
fn tanh_layer_backward(
    w: &Matrix,
    x: &[f64],
    y: &[f64],
    dy: &[f64],
    dw: &mut Matrix,
    db: &mut [f64],
) -> Vec<f64> {
    let dpre: Vec<f64> = dy.iter().zip(y).map(|(g, v)| g * (1.0 - v * v)).collect();
    dw.add_outer(&dpre, x);
    axpy(1.0, &dpre, db);
    let mut dx = vec![0.0; x.len()];
    w.tr_matvec_acc(&dpre, &mut dx);
    dx
}

/// Cached activations of one recurrent step.
#[derive(Debug, Clone)]
pub struct GruStep {
    pub item: usize,
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub candidate: Vec<f64>,
    pub h: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum ClickedCache {
    MeanPool { input: Vec<f64> },
    Recurrent { steps: Vec<GruStep>, input: Vec<f64> },
}

fn gate(w: &Matrix, u: &Matrix, b: &[f64], x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut pre = b.to_vec();
    w.matvec_acc(x, &mut pre);
    u.matvec_acc(h, &mut pre);
    pre
}

/// Runs the gated recurrent cell over the sequence from `h_0 = 0`.
pub fn gru_forward(seq: &[usize], q: &ItemEmbeddings, gru: &GruParams, dim: usize) -> Vec<GruStep> {
    let mut h = vec![0.0; dim];
    let mut steps = Vec::with_capacity(seq.len());
    for &item in seq {
        let x = q.get(item);
        let z: Vec<f64> = gate(&gru.w_z, &gru.u_z, &gru.b_z, x, &h).into_iter().map(sigmoid).collect();
        let r: Vec<f64> = gate(&gru.w_r, &gru.u_r, &gru.b_r, x, &h).into_iter().map(sigmoid).collect();
        let rh: Vec<f64> = r.iter().zip(&h).map(|(a, b)| a * b).collect();
        let candidate: Vec<f64> = gate(&gru.w_o, &gru.u_o, &gru.b_o, x, &rh)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let h_next: Vec<f64> = (0..dim)
            .map(|k| (1.0 - z[k]) * h[k] + z[k] * candidate[k])
            .collect();
        steps.push(GruStep {
            item,
            x: x.to_vec(),
            h_prev: std::mem::replace(&mut h, h_next.clone()),
            z,
            r,
            candidate,
            h: h_next,
        });
    }
    steps
}

pub fn encode_clicked(
    seq: &[usize],
    user: usize,
    q: &ItemEmbeddings,
    params: &ModelParams,
) -> Result<(Vec<f64>, ClickedCache)> {
    if seq.is_empty() {
        return Err(Error::Precondition("clicked sequence is empty".into()));
    }
    let l = params.embedding_dim();
    let e_u = params.tables.user.row(user);
    let enc = &params.encoder;
    match (params.config.clicked_encoder, &enc.gru) {
        (ClickedEncoder::MeanPool, _) => {
            let mut input = mean_of(seq, q, l);
            input.extend_from_slice(e_u);
            let h = tanh_layer(&enc.w_h, &enc.b_h, &input);
            Ok((h, ClickedCache::MeanPool { input }))
        }
        (ClickedEncoder::Recurrent, Some(gru)) => {
            let steps = gru_forward(seq, q, gru, l);
            let mut input = steps.last().map(|s| s.h.clone()).unwrap_or_default();
            input.extend_from_slice(e_u);
            let h = tanh_layer(&enc.w_h, &enc.b_h, &input);
            Ok((h, ClickedCache::Recurrent { steps, input }))
        }
        (ClickedEncoder::Recurrent, None) => Err(Error::Precondition(
            "recurrent encoder selected but no recurrent weights present".into(),
        )),
    }
}

/// Returns `(n, mean)`.
pub fn encode_unclicked(seq: &[usize], q: &ItemEmbeddings, params: &ModelParams) -> (Vec<f64>, Vec<f64>) {
    let mean = mean_of(seq, q, params.embedding_dim());
    let n = tanh_layer(&params.encoder.w_n, &params.encoder.b_n, &mean);
    (n, mean)
}

fn label_ffn(params: &ModelParams) -> (&Matrix, &[f64]) {
    let e = &params.encoder;
    if params.config.share_label_ffn {
        (&e.w_n, &e.b_n)
    } else {
        (&e.w_c, &e.b_c)
    }
}

/// Returns `(c, mean)`.
pub fn encode_labels(labels: &[usize], q: &ItemEmbeddings, params: &ModelParams) -> Result<(Vec<f64>, Vec<f64>)> {
    if labels.is_empty() {
        return Err(Error::Precondition("label set is empty".into()));
    }
    let mean = mean_of(labels, q, params.embedding_dim());
    let (w, b) = label_ffn(params);
    Ok((tanh_layer(w, b, &mean), mean))
}

/// Intermediate vectors of one example's encoder pass.
#[derive(Debug, Clone)]
pub struct ForwardState {
    pub example: IndexedExample,
    pub h: Vec<f64>,
    pub n: Vec<f64>,
    pub c: Vec<f64>,
    clicked: ClickedCache,
    unclicked_mean: Vec<f64>,
    label_mean: Vec<f64>,
}

pub fn forward(example: &IndexedExample, q: &ItemEmbeddings, params: &ModelParams) -> Result<ForwardState> {
    let (h, clicked) = encode_clicked(&example.clicked, example.user, q, params)?;
    let (n, unclicked_mean) = encode_unclicked(&example.unclicked, q, params);
    let (c, label_mean) = encode_labels(&example.labels, q, params)?;
    Ok(ForwardState {
        example: example.clone(),
        h,
        n,
        c,
        clicked,
        unclicked_mean,
        label_mean,
    })
}

/// Dense per-item gradient buffer with a touched-row list.
#[derive(Debug, Clone)]
pub struct ItemGrads {
    dq: Matrix,
    touched: Vec<bool>,
    rows: Vec<usize>,
}

impl ItemGrads {
    pub fn new(n_items: usize, dim: usize) -> Self {
        ItemGrads {
            dq: Matrix::zeros(n_items, dim),
            touched: vec![false; n_items],
            rows: Vec::new(),
        }
    }

    /// `dq[item] += scale * g`
    #[inline]
    pub fn add(&mut self, item: usize, scale: f64, g: &[f64]) {
        if !self.touched[item] {
            self.touched[item] = true;
            self.rows.push(item);
        }
        axpy(scale, g, self.dq.row_mut(item));
    }

    pub fn get(&self, item: usize) -> &[f64] {
        self.dq.row(item)
    }

    pub fn touched_rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn clear(&mut self) {
        for &i in &self.rows {
            self.dq.row_mut(i).fill(0.0);
            self.touched[i] = false;
        }
        self.rows.clear();
    }
}

fn spread_mean(items: &[usize], d_mean: &[f64], dq: &mut ItemGrads) {
    if items.is_empty() {
        return;
    }
    let inv = 1.0 / items.len() as f64;
    for &i in items {
        dq.add(i, inv, d_mean);
    }
}

fn gru_backward(
    steps: &[GruStep],
    mut dh: Vec<f64>,
    gru: &GruParams,
    grads: &mut GruParams,
    dq: &mut ItemGrads,
) {
    let l = dh.len();
    for s in steps.iter().rev() {
        let x = &s.x;
        let mut dh_prev: Vec<f64> = (0..l).map(|k| dh[k] * (1.0 - s.z[k])).collect();
        let mut dx = vec![0.0; l];

        // candidate = tanh(W_o x + U_o (r ⊙ h_prev) + b_o)
        let dpre_o: Vec<f64> = (0..l)
            .map(|k| dh[k] * s.z[k] * (1.0 - s.candidate[k] * s.candidate[k]))
            .collect();
        let rh: Vec<f64> = s.r.iter().zip(&s.h_prev).map(|(a, b)| a * b).collect();
        grads.w_o.add_outer(&dpre_o, x);
        grads.u_o.add_outer(&dpre_o, &rh);
        axpy(1.0, &dpre_o, &mut grads.b_o);
        gru.w_o.tr_matvec_acc(&dpre_o, &mut dx);
        let mut d_rh = vec![0.0; l];
        gru.u_o.tr_matvec_acc(&dpre_o, &mut d_rh);
        for k in 0..l {
            dh_prev[k] += d_rh[k] * s.r[k];
        }

        // z = σ(W_z x + U_z h_prev + b_z)
        let dpre_z: Vec<f64> = (0..l)
            .map(|k| dh[k] * (s.candidate[k] - s.h_prev[k]) * s.z[k] * (1.0 - s.z[k]))
            .collect();
        grads.w_z.add_outer(&dpre_z, x);
        grads.u_z.add_outer(&dpre_z, &s.h_prev);
        axpy(1.0, &dpre_z, &mut grads.b_z);
        gru.w_z.tr_matvec_acc(&dpre_z, &mut dx);
        gru.u_z.tr_matvec_acc(&dpre_z, &mut dh_prev);

        // r = σ(W_r x + U_r h_prev + b_r)
        let dpre_r: Vec<f64> = (0..l)
            .map(|k| d_rh[k] * s.h_prev[k] * s.r[k] * (1.0 - s.r[k]))
            .collect();
        grads.w_r.add_outer(&dpre_r, x);
        grads.u_r.add_outer(&dpre_r, &s.h_prev);
        axpy(1.0, &dpre_r, &mut grads.b_r);
        gru.w_r.tr_matvec_acc(&dpre_r, &mut dx);
        gru.u_r.tr_matvec_acc(&dpre_r, &mut dh_prev);

        dq.add(s.item, 1.0, &dx);
        dh = dh_prev;
    }
}

/// Backpropagates upstream gradients for `h`, `n` and `c` into encoder
/// weights and the user table, leaving item-level gradients in `dq`.
pub fn backward_encoders(
    state: &ForwardState,
    d_h: &[f64],
    d_n: &[f64],
    d_c: &[f64],
    params: &ModelParams,
    grads: &mut ModelParams,
    dq: &mut ItemGrads,
) -> Result<()> {
    let l = params.embedding_dim();
    let enc = &params.encoder;
    let ex = &state.example;

    let input = match &state.clicked {
        ClickedCache::MeanPool { input } | ClickedCache::Recurrent { input, .. } => input,
    };
    let d_input = tanh_layer_backward(
        &enc.w_h,
        input,
        &state.h,
        d_h,
        &mut grads.encoder.w_h,
        &mut grads.encoder.b_h,
    );
    axpy(1.0, &d_input[l..], grads.tables.user.row_mut(ex.user));
    match (&state.clicked, &enc.gru) {
        (ClickedCache::MeanPool { .. }, _) => spread_mean(&ex.clicked, &d_input[..l], dq),
        (ClickedCache::Recurrent { steps, .. }, Some(gru)) => {
            let g = grads.encoder.gru.as_mut().ok_or_else(|| {
                Error::Precondition("gradient buffer lacks recurrent weights".into())
            })?;
            gru_backward(steps, d_input[..l].to_vec(), gru, g, dq);
        }
        (ClickedCache::Recurrent { .. }, None) => {
            return Err(Error::Precondition(
                "cached recurrent activations but the model has no recurrent weights".into(),
            ))
        }
    }

    let d_mean = tanh_layer_backward(
        &enc.w_n,
        &state.unclicked_mean,
        &state.n,
        d_n,
        &mut grads.encoder.w_n,
        &mut grads.encoder.b_n,
    );
    spread_mean(&ex.unclicked, &d_mean, dq);

    if !params.config.stop_label_gradient {
        let (w, _) = label_ffn(params);
        let (dw, db) = if params.config.share_label_ffn {
            (&mut grads.encoder.w_n, &mut grads.encoder.b_n)
        } else {
            (&mut grads.encoder.w_c, &mut grads.encoder.b_c)
        };
        let d_mean = tanh_layer_backward(w, &state.label_mean, &state.c, d_c, dw, db);
        spread_mean(&ex.labels, &d_mean, dq);
    }
    Ok(())
}

/// Pushes the accumulated item gradients through the item projection into
/// `W_q`, `b_q` and the five embedding tables.
pub fn backward_items(
    dq: &ItemGrads,
    q: &ItemEmbeddings,
    vocab: &Vocab,
    params: &ModelParams,
    grads: &mut ModelParams,
) {
    let dims = params.config.feature_dims();
    for &item in dq.touched_rows() {
        let x = item_input(item, vocab, params);
        let dx = tanh_layer_backward(
            &params.encoder.w_q,
            &x,
            q.get(item),
            dq.get(item),
            &mut grads.encoder.w_q,
            &mut grads.encoder.b_q,
        );
        let f = vocab.item_features(item);
        let t = &mut grads.tables;
        let rows: [&mut [f64]; 5] = [
            t.item.row_mut(item),
            t.leaf.row_mut(f[0]),
            t.first_level.row_mut(f[1]),
            t.brand.row_mut(f[2]),
            t.shop.row_mut(f[3]),
        ];
        let mut off = 0;
        for (row, d) in rows.into_iter().zip(dims) {
            axpy(1.0, &dx[off..off + d], row);
            off += d;
        }
    }
}
