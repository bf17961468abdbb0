//! Learnable parameters, their shapes, and the id ↔ index vocabulary.
//!
//! [`ModelParams`] doubles as the gradient and AdaGrad-accumulator container:
//! `ModelParams::zeros_like` gives a structure of identical shape.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Event, ItemMeta, TrainingExample};
use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::rng::stream;

const TAG_INIT: u64 = 0x1417;

/// Base per-feature embedding widths (item id, leaf, first-level, brand, shop)
/// at a 128-wide representation; scaled proportionally for other widths.
const BASE_FEATURE_DIMS: [usize; 5] = [64, 24, 16, 12, 12];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClickedEncoder {
    MeanPool,
    Recurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Representation width shared by every behavior type.
    pub embedding_dim: usize,
    pub clicked_encoder: ClickedEncoder,
    /// Label encoder reuses the unclicked encoder's FFN weights.
    pub share_label_ffn: bool,
    /// Treat the pooled label representation as a constant target.
    pub stop_label_gradient: bool,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: 32,
            clicked_encoder: ClickedEncoder::MeanPool,
            share_label_ffn: false,
            stop_label_gradient: false,
            init_scale: 0.05,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn feature_dims(&self) -> [usize; 5] {
        feature_dims(self.embedding_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if !(self.init_scale >= 0.0) {
            return Err(Error::Config("init_scale must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn feature_dims(embedding_dim: usize) -> [usize; 5] {
    BASE_FEATURE_DIMS.map(|d| ((d * embedding_dim) as f64 / 128.0).round().max(1.0) as usize)
}

/// Maps string ids to dense indices.
#[derive(Debug, Clone)]
pub struct Vocab {
    item_ids: Vec<String>,
    item_index: HashMap<String, usize>,
    /// leaf, first-level, brand, shop index per item.
    item_features: Vec<[usize; 4]>,
    feature_sizes: [usize; 4],
    user_ids: Vec<String>,
    user_index: HashMap<String, usize>,
    /// Position of each item id in lexicographic order, used for tie-breaks.
    id_rank: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexedExample {
    pub user: usize,
    pub clicked: Vec<usize>,
    pub unclicked: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Vocab {
    /// Feature values are indexed in order of first appearance in the catalog;
    /// users are indexed in sorted order.
    pub fn new<I, S>(catalog: &[ItemMeta], users: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut item_index = HashMap::with_capacity(catalog.len());
        let mut feature_maps: [HashMap<&str, usize>; 4] = Default::default();
        let mut item_features = Vec::with_capacity(catalog.len());
        for (i, item) in catalog.iter().enumerate() {
            if item_index.insert(item.item_id.clone(), i).is_some() {
                return Err(Error::Precondition(format!(
                    "duplicate item id {:?}",
                    item.item_id
                )));
            }
            let values = [
                item.leaf_category.as_str(),
                item.first_level_category.as_str(),
                item.brand.as_str(),
                item.shop.as_str(),
            ];
            let mut idx = [0; 4];
            for (k, v) in values.into_iter().enumerate() {
                let next = feature_maps[k].len();
                idx[k] = *feature_maps[k].entry(v).or_insert(next);
            }
            item_features.push(idx);
        }
        let feature_sizes = [0, 1, 2, 3].map(|k| feature_maps[k].len().max(1));

        let mut user_ids: Vec<String> = users.into_iter().map(Into::into).collect();
        user_ids.sort();
        user_ids.dedup();
        let user_index = user_ids
            .iter()
            .enumerate()
            .map(|(i, u)| (u.clone(), i))
            .collect();

        let item_ids: Vec<String> = catalog.iter().map(|m| m.item_id.clone()).collect();
        let mut order: Vec<usize> = (0..item_ids.len()).collect();
        order.sort_by(|&a, &b| item_ids[a].cmp(&item_ids[b]));
        let mut id_rank = vec![0; item_ids.len()];
        for (rank, &i) in order.iter().enumerate() {
            id_rank[i] = rank;
        }

        Ok(Vocab {
            item_ids,
            item_index,
            item_features,
            feature_sizes,
            user_ids,
            user_index,
            id_rank,
        })
    }

    /// Builds the vocabulary from a catalog and every user seen in `events`.
    /// Fails if an event references an item missing from the catalog.
    pub fn from_events(catalog: &[ItemMeta], events: &[Event]) -> Result<Self> {
        let vocab = Vocab::new(catalog, events.iter().map(|e| e.user_id.as_str()))?;
        for e in events {
            vocab.item(&e.item_id)?;
        }
        Ok(vocab)
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn feature_sizes(&self) -> [usize; 4] {
        self.feature_sizes
    }

    pub fn item(&self, id: &str) -> Result<usize> {
        self.item_index.get(id).copied().ok_or_else(|| Error::UnknownId {
            kind: "item",
            id: id.to_string(),
        })
    }

    pub fn user(&self, id: &str) -> Result<usize> {
        self.user_index.get(id).copied().ok_or_else(|| Error::UnknownId {
            kind: "user",
            id: id.to_string(),
        })
    }

    pub fn item_id(&self, idx: usize) -> &str {
        &self.item_ids[idx]
    }

    pub fn user_id(&self, idx: usize) -> &str {
        &self.user_ids[idx]
    }

    pub fn item_features(&self, idx: usize) -> [usize; 4] {
        self.item_features[idx]
    }

    pub fn id_rank(&self) -> &[usize] {
        &self.id_rank
    }

    pub fn index_example(&self, ex: &TrainingExample) -> Result<IndexedExample> {
        let items = |ids: &[String]| ids.iter().map(|i| self.item(i)).collect::<Result<Vec<_>>>();
        Ok(IndexedExample {
            user: self.user(&ex.user_id)?,
            clicked: items(&ex.clicked_seq)?,
            unclicked: items(&ex.unclicked_seq)?,
            labels: items(&ex.labels)?,
        })
    }

    pub fn index_examples(&self, exs: &[TrainingExample]) -> Result<Vec<IndexedExample>> {
        exs.iter().map(|e| self.index_example(e)).collect()
    }
}

/// One table per feature scale plus the user-profile table.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables {
    pub item: Matrix,
    pub leaf: Matrix,
    pub first_level: Matrix,
    pub brand: Matrix,
    pub shop: Matrix,
    pub user: Matrix,
}

/// Gated recurrent cell weights (update, reset, candidate).
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_z: Matrix,
    pub u_z: Matrix,
    pub b_z: Vec<f64>,
    pub w_r: Matrix,
    pub u_r: Matrix,
    pub b_r: Vec<f64>,
    pub w_o: Matrix,
    pub u_o: Matrix,
    pub b_o: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// Item projection from concatenated feature embeddings.
    pub w_q: Matrix,
    pub b_q: Vec<f64>,
    /// Clicked-sequence head over `[pooled ; e_u]`.
    pub w_h: Matrix,
    pub b_h: Vec<f64>,
    pub gru: Option<GruParams>,
    pub w_n: Matrix,
    pub b_n: Vec<f64>,
    pub w_c: Matrix,
    pub b_c: Vec<f64>,
}

/// Confidence-gate weights over `[h ; n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub w_g: Matrix,
    pub b_g: Vec<f64>,
}

impl FusionParams {
    pub fn zeros(dim: usize) -> Self {
        FusionParams {
            w_g: Matrix::zeros(dim, 2 * dim),
            b_g: vec![0.0; dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tables: EmbeddingTables,
    pub encoder: EncoderParams,
    pub fusion: FusionParams,
}

/// Read-only view of one named tensor.
#[derive(Debug)]
pub struct TensorView<'a> {
    pub name: &'static str,
    pub dims: Vec<usize>,
    pub data: &'a [f64],
}

fn mat<'a>(name: &'static str, m: &'a Matrix) -> TensorView<'a> {
    TensorView {
        name,
        dims: vec![m.rows(), m.cols()],
        data: m.as_slice(),
    }
}

fn vector<'a>(name: &'static str, v: &'a [f64]) -> TensorView<'a> {
    TensorView {
        name,
        dims: vec![v.len()],
        data: v,
    }
}

impl ModelParams {
    /// All-zero parameters with shapes implied by the config and vocabulary.
    pub fn zeros(config: &ModelConfig, n_items: usize, feature_sizes: [usize; 4], n_users: usize) -> Self {
        let l = config.embedding_dim;
        let dims = config.feature_dims();
        let in_width: usize = dims.iter().sum();
        let sq = || Matrix::zeros(l, l);
        let gru = match config.clicked_encoder {
            ClickedEncoder::MeanPool => None,
            ClickedEncoder::Recurrent => Some(GruParams {
                w_z: sq(),
                u_z: sq(),
                b_z: vec![0.0; l],
                w_r: sq(),
                u_r: sq(),
                b_r: vec![0.0; l],
                w_o: sq(),
                u_o: sq(),
                b_o: vec![0.0; l],
            }),
        };
        ModelParams {
            config: config.clone(),
            tables: EmbeddingTables {
                item: Matrix::zeros(n_items, dims[0]),
                leaf: Matrix::zeros(feature_sizes[0], dims[1]),
                first_level: Matrix::zeros(feature_sizes[1], dims[2]),
                brand: Matrix::zeros(feature_sizes[2], dims[3]),
                shop: Matrix::zeros(feature_sizes[3], dims[4]),
                user: Matrix::zeros(n_users, l),
            },
            encoder: EncoderParams {
                w_q: Matrix::zeros(l, in_width),
                b_q: vec![0.0; l],
                w_h: Matrix::zeros(l, 2 * l),
                b_h: vec![0.0; l],
                gru,
                w_n: sq(),
                b_n: vec![0.0; l],
                w_c: sq(),
                b_c: vec![0.0; l],
            },
            fusion: FusionParams::zeros(l),
        }
    }

    /// Uniform initialization in `[-init_scale, init_scale]`.
    pub fn init(config: &ModelConfig, vocab: &Vocab) -> Self {
        let mut p = ModelParams::zeros(config, vocab.n_items(), vocab.feature_sizes(), vocab.n_users());
        let mut rng = stream(config.seed, &[TAG_INIT]);
        let s = config.init_scale;
        for (_, data) in p.tensors_mut() {
            for x in data.iter_mut() {
                *x = if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 };
            }
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn fill(&mut self, v: f64) {
        for (_, data) in self.tensors_mut() {
            data.iter_mut().for_each(|x| *x = v);
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn n_items(&self) -> usize {
        self.tables.item.rows()
    }

    pub fn n_users(&self) -> usize {
        self.tables.user.rows()
    }

    /// Every tensor, in a fixed order shared with [`ModelParams::tensors_mut`].
    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        let t = &self.tables;
        let e = &self.encoder;
        let mut out = vec![
            mat("emb.item", &t.item),
            mat("emb.leaf", &t.leaf),
            mat("emb.first_level", &t.first_level),
            mat("emb.brand", &t.brand),
            mat("emb.shop", &t.shop),
            mat("emb.user", &t.user),
            mat("enc.w_q", &e.w_q),
            vector("enc.b_q", &e.b_q),
            mat("enc.w_h", &e.w_h),
            vector("enc.b_h", &e.b_h),
        ];
        if let Some(g) = &e.gru {
            out.extend([
                mat("gru.w_z", &g.w_z),
                mat("gru.u_z", &g.u_z),
                vector("gru.b_z", &g.b_z),
                mat("gru.w_r", &g.w_r),
                mat("gru.u_r", &g.u_r),
                vector("gru.b_r", &g.b_r),
                mat("gru.w_o", &g.w_o),
                mat("gru.u_o", &g.u_o),
                vector("gru.b_o", &g.b_o),
            ]);
        }
        out.extend([
            mat("enc.w_n", &e.w_n),
            vector("enc.b_n", &e.b_n),
            mat("enc.w_c", &e.w_c),
            vector("enc.b_c", &e.b_c),
            mat("fusion.w_g", &self.fusion.w_g),
            vector("fusion.b_g", &self.fusion.b_g),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let t = &mut self.tables;
        let e = &mut self.encoder;
        let mut out: Vec<(&'static str, &mut [f64])> = vec![
            ("emb.item", t.item.as_mut_slice()),
            ("emb.leaf", t.leaf.as_mut_slice()),
            ("emb.first_level", t.first_level.as_mut_slice()),
            ("emb.brand", t.brand.as_mut_slice()),
            ("emb.shop", t.shop.as_mut_slice()),
            ("emb.user", t.user.as_mut_slice()),
            ("enc.w_q", e.w_q.as_mut_slice()),
            ("enc.b_q", &mut e.b_q),
            ("enc.w_h", e.w_h.as_mut_slice()),
            ("enc.b_h", &mut e.b_h),
        ];
        if let Some(g) = &mut e.gru {
            out.extend([
                ("gru.w_z", g.w_z.as_mut_slice()),
                ("gru.u_z", g.u_z.as_mut_slice()),
                ("gru.b_z", &mut g.b_z[..]),
                ("gru.w_r", g.w_r.as_mut_slice()),
                ("gru.u_r", g.u_r.as_mut_slice()),
                ("gru.b_r", &mut g.b_r[..]),
                ("gru.w_o", g.w_o.as_mut_slice()),
                ("gru.u_o", g.u_o.as_mut_slice()),
                ("gru.b_o", &mut g.b_o[..]),
            ]);
        }
        out.extend([
            ("enc.w_n", e.w_n.as_mut_slice()),
            ("enc.b_n", &mut e.b_n[..]),
            ("enc.w_c", e.w_c.as_mut_slice()),
            ("enc.b_c", &mut e.b_c[..]),
            ("fusion.w_g", self.fusion.w_g.as_mut_slice()),
            ("fusion.b_g", &mut self.fusion.b_g[..]),
        ]);
        out
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Per-tensor L2 norms, for diagnostics.
    pub fn norms_summary(&self) -> String {
        self.tensors()
            .iter()
            .map(|t| {
                let n = t.data.iter().map(|x| x * x).sum::<f64>().sqrt();
                format!("{}={:.4e}", t.name, n)
            })
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Rebuilds parameters from named tensors; names, order and shapes must
    /// match what `config` implies.
    pub fn from_tensors(config: &ModelConfig, tensors: &[(String, Vec<usize>, Vec<f64>)]) -> Result<Self> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|t| t.0 == name)
                .ok_or_else(|| Error::Mismatch(format!("missing tensor {name}")))
        };
        let rows = |name: &str| -> Result<usize> {
            let t = find(name)?;
            t.1.first()
                .copied()
                .ok_or_else(|| Error::Mismatch(format!("tensor {name} has rank 0")))
        };
        let feature_sizes = [
            rows("emb.leaf")?,
            rows("emb.first_level")?,
            rows("emb.brand")?,
            rows("emb.shop")?,
        ];
        let mut p = ModelParams::zeros(config, rows("emb.item")?, feature_sizes, rows("emb.user")?);
        let expected: Vec<(&'static str, Vec<usize>)> =
            p.tensors().iter().map(|t| (t.name, t.dims.clone())).collect();
        if expected.len() != tensors.len() {
            return Err(Error::Mismatch(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, dims), (got_name, got_dims, data)) in expected.iter().zip(tensors) {
            if name != got_name || dims != got_dims || data.len() != dims.iter().product::<usize>() {
                return Err(Error::Mismatch(format!(
                    "tensor {got_name} {got_dims:?} does not match expected {name} {dims:?}"
                )));
            }
        }
        for ((_, slot), (_, _, data)) in p.tensors_mut().into_iter().zip(tensors) {
            slot.copy_from_slice(data);
        }
        Ok(p)
    }

    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        let fs = vocab.feature_sizes();
        let got = [
            self.n_items(),
            self.tables.leaf.rows(),
            self.tables.first_level.rows(),
            self.tables.brand.rows(),
            self.tables.shop.rows(),
            self.n_users(),
        ];
        let want = [vocab.n_items(), fs[0], fs[1], fs[2], fs[3], vocab.n_users()];
        if got != want {
            return Err(Error::Mismatch(format!(
                "parameter table sizes {got:?} do not match data vocabulary {want:?}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog() -> Vec<ItemMeta> {
        ["b", "a", "c"]
            .iter()
            .map(|id| ItemMeta {
                item_id: id.to_string(),
                leaf_category: format!("leaf-{id}"),
                first_level_category: "cat".into(),
                brand: "UNK".into(),
                shop: "s".into(),
            })
            .collect()
    }

    #[test]
    fn feature_dims_scale_with_width() {
        assert_eq!(feature_dims(128), [64, 24, 16, 12, 12]);
        assert_eq!(feature_dims(32), [16, 6, 4, 3, 3]);
        assert!(feature_dims(2).iter().all(|&d| d >= 1));
    }

    #[test]
    fn vocab_indexing() {
        let v = Vocab::new(&catalog(), ["u2", "u1", "u2"]).unwrap();
        assert_eq!(v.n_items(), 3);
        assert_eq!(v.n_users(), 2);
        assert_eq!(v.user("u1").unwrap(), 0);
        assert_eq!(v.feature_sizes(), [3, 1, 1, 1]);
        // "a" sorts first even though it is second in the catalog
        assert_eq!(v.id_rank(), &[1, 0, 2]);
        assert!(matches!(v.item("zz"), Err(Error::UnknownId { .. })));
    }

    #[test]
    fn tensor_views_line_up() {
        for enc in [ClickedEncoder::MeanPool, ClickedEncoder::Recurrent] {
            let cfg = ModelConfig {
                embedding_dim: 3,
                clicked_encoder: enc,
                ..ModelConfig::default()
            };
            let vocab = Vocab::new(&catalog(), ["u"]).unwrap();
            let mut p = ModelParams::init(&cfg, &vocab);
            let names: Vec<_> = p.tensors().iter().map(|t| (t.name, t.data.len())).collect();
            let names_mut: Vec<_> = p.tensors_mut().iter().map(|(n, d)| (*n, d.len())).collect();
            assert_eq!(names, names_mut);
            for t in p.tensors() {
                assert_eq!(t.dims.iter().product::<usize>(), t.data.len());
                assert!(t.data.iter().all(|x| x.abs() <= 0.05));
            }

            let owned: Vec<_> = p
                .tensors()
                .iter()
                .map(|t| (t.name.to_string(), t.dims.clone(), t.data.to_vec()))
                .collect();
            assert_eq!(ModelParams::from_tensors(&cfg, &owned).unwrap(), p);
        }
    }

    #[test]
    fn init_is_seeded() {
        let vocab = Vocab::new(&catalog(), ["u"]).unwrap();
        let cfg = ModelConfig::default();
        assert_eq!(ModelParams::init(&cfg, &vocab), ModelParams::init(&cfg, &vocab));
        let other = ModelConfig {
            seed: 99,
            ..cfg.clone()
        };
        assert_ne!(ModelParams::init(&cfg, &vocab), ModelParams::init(&other, &vocab));
    }
}
