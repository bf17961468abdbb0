//! Synthetic catalogs and impression/click logs.
//!
//! Items live in a hidden latent space: first-level category centroid, plus a
//! leaf offset, plus a small per-item offset. Each user has a long-term taste
//! and a short-term intent that drifts between sessions; the session latent
//! mixes the two. Every session an impression policy shows the items with the
//! highest noisy affinity, and each impression is clicked with probability
//! `sigmoid(affinity + click_bias + noise)`. Impressed-but-skipped items thus
//! sit between clicked items and random items in affinity.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Event, EventType, ItemMeta};
use crate::error::{Error, Result};
use crate::numcore::dot;
use crate::rng::{stream, Rng64};

const FIRST_LEVEL_SCALE: f64 = 1.0;
const LEAF_SCALE: f64 = 0.5;
const ITEM_SCALE: f64 = 0.25;
const USER_NOISE: f64 = 0.3;
/// Norm of the taste part (coordinates 1..) of every session latent.
const TASTE_NORM: f64 = 1.0;
/// Share of the session latent taken by the current short-term intent.
const INTENT_WEIGHT: f64 = 0.9;
/// Chance that a session starts a new intent.
const INTENT_SWITCH: f64 = 0.3;
/// Coordinate 0 of every item latent is this constant; users weigh it
/// negatively, which shifts affinities so impressed items sit near zero.
const SHARED_AXIS: f64 = 1.0;
const USER_RELUCTANCE: f64 = 3.5;

const EPOCH_START: i64 = 1_577_404_800;
const SESSION_GAP: i64 = 18 * 3600;
const IMPRESSION_GAP: i64 = 30;
const CLICK_DELAY: i64 = 5;

const TAG_CATALOG: u64 = 1;
const TAG_USER: u64 = 2;
const TAG_SESSION: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_leaf_categories: usize,
    pub n_brands: usize,
    pub n_shops: usize,
    pub latent_dim: usize,
    pub sessions_per_user: usize,
    pub impressions_per_session: usize,
    pub click_bias: f64,
    pub policy_noise: f64,
    pub click_noise: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_users: 500,
            n_items: 2000,
            n_leaf_categories: 100,
            n_brands: 200,
            n_shops: 400,
            latent_dim: 8,
            sessions_per_user: 12,
            impressions_per_session: 20,
            click_bias: -1.0,
            policy_noise: 0.5,
            click_noise: 0.5,
            seed: 42,
        }
    }
}

impl GenConfig {
    /// Checks the fields the catalog depends on.
    pub fn validate_catalog(&self) -> Result<()> {
        let positive = [
            ("n_users", self.n_users),
            ("n_items", self.n_items),
            ("n_leaf_categories", self.n_leaf_categories),
            ("n_brands", self.n_brands),
            ("n_shops", self.n_shops),
            ("latent_dim", self.latent_dim),
            ("sessions_per_user", self.sessions_per_user),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_catalog()?;
        if self.impressions_per_session < 2 {
            return Err(Error::Config("impressions_per_session must be >= 2".into()));
        }
        if self.n_items < self.impressions_per_session {
            return Err(Error::Config(format!(
                "n_items ({}) must be >= impressions_per_session ({})",
                self.n_items, self.impressions_per_session
            )));
        }
        if !(self.policy_noise >= 0.0 && self.click_noise >= 0.0) || !self.click_bias.is_finite() {
            return Err(Error::Config(
                "noise levels must be non-negative and click_bias finite".into(),
            ));
        }
        Ok(())
    }

    pub fn n_first_level(&self) -> usize {
        self.n_leaf_categories.div_ceil(5)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCatalog {
    pub items: Vec<ItemMeta>,
    /// Hidden latent vector per item, aligned with `items`.
    pub latents: Vec<Vec<f64>>,
    pub leaf_of: Vec<usize>,
    pub first_level_of: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLog {
    pub events: Vec<Event>,
    pub user_ids: Vec<String>,
    pub user_latents: Vec<Vec<f64>>,
}

fn gaussian_vec(rng: &mut Rng64, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn id_width(n: usize) -> usize {
    n.saturating_sub(1).to_string().len()
}

pub fn item_id(idx: usize, n_items: usize) -> String {
    format!("i{:0w$}", idx, w = id_width(n_items))
}

pub fn user_id(idx: usize, n_users: usize) -> String {
    format!("u{:0w$}", idx, w = id_width(n_users))
}

pub fn generate_catalog(cfg: &GenConfig) -> Result<SyntheticCatalog> {
    cfg.validate_catalog()?;
    let mut rng = stream(cfg.seed, &[TAG_CATALOG]);
    let dim = cfg.latent_dim;
    let n_first = cfg.n_first_level();

    let first_centroids: Vec<Vec<f64>> = (0..n_first)
        .map(|_| gaussian_vec(&mut rng, dim, FIRST_LEVEL_SCALE))
        .collect();
    let leaf_parent: Vec<usize> = (0..cfg.n_leaf_categories).map(|l| l / 5).collect();
    let leaf_centroids: Vec<Vec<f64>> = leaf_parent
        .iter()
        .map(|&f| {
            let off = gaussian_vec(&mut rng, dim, LEAF_SCALE);
            first_centroids[f].iter().zip(off).map(|(c, o)| c + o).collect()
        })
        .collect();

    let mut catalog = SyntheticCatalog {
        items: Vec::with_capacity(cfg.n_items),
        latents: Vec::with_capacity(cfg.n_items),
        leaf_of: Vec::with_capacity(cfg.n_items),
        first_level_of: Vec::with_capacity(cfg.n_items),
    };
    for idx in 0..cfg.n_items {
        let leaf = rng.random_range(0..cfg.n_leaf_categories);
        let first = leaf_parent[leaf];
        // brands stay within a first-level category when there are enough of them
        let brand = if cfg.n_brands >= n_first {
            let per = (cfg.n_brands - first).div_ceil(n_first);
            first + n_first * rng.random_range(0..per)
        } else {
            rng.random_range(0..cfg.n_brands)
        };
        let shop = rng.random_range(0..cfg.n_shops);
        let off = gaussian_vec(&mut rng, dim, ITEM_SCALE);
        let mut latent: Vec<f64> = leaf_centroids[leaf].iter().zip(off).map(|(c, o)| c + o).collect();
        latent[0] = SHARED_AXIS;

        catalog.items.push(ItemMeta {
            item_id: item_id(idx, cfg.n_items),
            leaf_category: format!("leaf{leaf}"),
            first_level_category: format!("cat{first}"),
            brand: format!("brand{brand}"),
            shop: format!("shop{shop}"),
        });
        catalog.latents.push(latent);
        catalog.leaf_of.push(leaf);
        catalog.first_level_of.push(first);
    }
    Ok(catalog)
}

/// Copy of `v` with coordinate 0 cleared and the rest scaled to unit norm.
fn unit_taste(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    out[0] = 0.0;
    let norm = crate::numcore::norm_sq(&out).sqrt();
    if norm > 0.0 {
        out.iter_mut().for_each(|x| *x /= norm);
    }
    out
}

fn user_latent(cfg: &GenConfig, u: usize, catalog: &SyntheticCatalog) -> Vec<f64> {
    let mut rng = stream(cfg.seed, &[TAG_USER, u as u64]);
    // taste anchored on two items' neighbourhoods
    let a = rng.random_range(0..catalog.latents.len());
    let b = rng.random_range(0..catalog.latents.len());
    let noise = gaussian_vec(&mut rng, cfg.latent_dim, USER_NOISE);
    let raw: Vec<f64> = catalog.latents[a]
        .iter()
        .zip(&catalog.latents[b])
        .zip(noise)
        .map(|((x, y), n)| 0.5 * (x + y) + n)
        .collect();
    let mut taste = unit_taste(&raw);
    taste[0] = -USER_RELUCTANCE / SHARED_AXIS;
    taste
}

/// Per-session latents of user `u`: a short-term intent (some item's
/// direction, re-drawn at random session boundaries) blended with the
/// long-term taste, keeping the reluctance coordinate.
fn session_latents(cfg: &GenConfig, u: usize, taste: &[f64], catalog: &SyntheticCatalog) -> Vec<Vec<f64>> {
    let mut rng = stream(cfg.seed, &[TAG_USER, u as u64, 2]);
    let mut intent: Vec<f64> = Vec::new();
    let mut out = Vec::with_capacity(cfg.sessions_per_user);
    for s in 0..cfg.sessions_per_user {
        if s == 0 || rng.random::<f64>() < INTENT_SWITCH {
            intent = unit_taste(&catalog.latents[rng.random_range(0..catalog.latents.len())]);
        }
        let blend: Vec<f64> = taste
            .iter()
            .zip(&intent)
            .map(|(t, i)| (1.0 - INTENT_WEIGHT) * t + INTENT_WEIGHT * i)
            .collect();
        let mut session = unit_taste(&blend);
        session.iter_mut().for_each(|t| *t *= TASTE_NORM);
        session[0] = taste[0];
        out.push(session);
    }
    out
}

pub fn generate_events(cfg: &GenConfig, catalog: &SyntheticCatalog) -> Result<SyntheticLog> {
    cfg.validate()?;
    if catalog.latents.len() != cfg.n_items {
        return Err(Error::Config(format!(
            "catalog has {} items, config expects {}",
            catalog.latents.len(),
            cfg.n_items
        )));
    }
    let n_imp = cfg.impressions_per_session;
    let mut log = SyntheticLog {
        events: Vec::new(),
        user_ids: Vec::with_capacity(cfg.n_users),
        user_latents: Vec::with_capacity(cfg.n_users),
    };
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(cfg.n_items);

    for u in 0..cfg.n_users {
        let uid = user_id(u, cfg.n_users);
        let taste = user_latent(cfg, u, catalog);
        let sessions = session_latents(cfg, u, &taste, catalog);
        let start = EPOCH_START + stream(cfg.seed, &[TAG_USER, u as u64, 1]).random_range(0..86_400);

        for (s, session) in sessions.iter().enumerate() {
            let affinity: Vec<f64> = catalog.latents.iter().map(|q| dot(session, q)).collect();
            let mut rng = stream(cfg.seed, &[TAG_SESSION, u as u64, s as u64]);
            scored.clear();
            for (i, &a) in affinity.iter().enumerate() {
                let noise: f64 = StandardNormal.sample(&mut rng);
                scored.push((a + cfg.policy_noise * noise, i));
            }
            let by_score = |x: &(f64, usize), y: &(f64, usize)| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1));
            if n_imp < scored.len() {
                scored.select_nth_unstable_by(n_imp - 1, by_score);
                scored.truncate(n_imp);
            }
            scored.sort_by(by_score);

            let session_start = start + s as i64 * SESSION_GAP;
            for (k, &(_, item)) in scored.iter().enumerate() {
                let t = session_start + k as i64 * IMPRESSION_GAP;
                log.events.push(Event {
                    user_id: uid.clone(),
                    item_id: catalog.items[item].item_id.clone(),
                    timestamp: t,
                    event_type: EventType::Impression,
                });
                let noise: f64 = StandardNormal.sample(&mut rng);
                let logit = affinity[item] + cfg.click_bias + cfg.click_noise * noise;
                let p = crate::numcore::sigmoid(logit);
                if rng.random::<f64>() < p {
                    log.events.push(Event {
                        user_id: uid.clone(),
                        item_id: catalog.items[item].item_id.clone(),
                        timestamp: t + CLICK_DELAY,
                        event_type: EventType::Click,
                    });
                }
            }
        }
        log.user_ids.push(uid);
        log.user_latents.push(taste);
    }
    Ok(log)
}

#[derive(Serialize)]
struct LatentRecord<'a> {
    kind: &'a str,
    id: &'a str,
    v: &'a [f64],
}

/// One JSON object per line: `{"kind":"item"|"user","id":...,"v":[...]}`.
pub fn write_latents<W: Write>(
    mut w: W,
    catalog: &SyntheticCatalog,
    log: &SyntheticLog,
) -> Result<()> {
    let items = catalog
        .items
        .iter()
        .zip(&catalog.latents)
        .map(|(m, v)| ("item", m.item_id.as_str(), v));
    let users = log
        .user_ids
        .iter()
        .zip(&log.user_latents)
        .map(|(id, v)| ("user", id.as_str(), v));
    for (kind, id, v) in items.chain(users) {
        serde_json::to_writer(&mut w, &LatentRecord { kind, id, v }).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> GenConfig {
        GenConfig {
            n_users: 30,
            n_items: 300,
            n_leaf_categories: 20,
            n_brands: 15,
            n_shops: 40,
            ..GenConfig::default()
        }
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
    }

    #[test]
    fn single_item_catalog() {
        let cfg = GenConfig {
            n_items: 1,
            ..small()
        };
        let cat = generate_catalog(&cfg).unwrap();
        assert_eq!(cat.items.len(), 1);
        // the event generator still needs enough items to fill a session
        assert!(generate_events(&cfg, &cat).is_err());
        for it in &cat.items {
            assert!(!it.item_id.is_empty() && !it.brand.is_empty() && !it.shop.is_empty());
        }
    }

    #[test]
    fn catalog_is_deterministic() {
        assert_eq!(
            generate_catalog(&small()).unwrap(),
            generate_catalog(&small()).unwrap()
        );
        let other = GenConfig {
            seed: 43,
            ..small()
        };
        assert_ne!(
            generate_catalog(&small()).unwrap().latents,
            generate_catalog(&other).unwrap().latents
        );
    }

    #[test]
    fn leaf_neighbours_are_closer_than_cross_category_pairs() {
        let mut wins = 0;
        for seed in 0..100u64 {
            let cfg = GenConfig {
                seed,
                ..GenConfig::default()
            };
            let cat = generate_catalog(&cfg).unwrap();
            let a = 0;
            let same = (1..cat.items.len())
                .find(|&j| cat.leaf_of[j] == cat.leaf_of[a])
                .unwrap();
            let diff = (1..cat.items.len())
                .find(|&j| cat.first_level_of[j] != cat.first_level_of[a])
                .unwrap();
            let other = (0..cat.items.len())
                .find(|&j| j != diff && cat.first_level_of[j] != cat.first_level_of[diff] && cat.first_level_of[j] != cat.first_level_of[a])
                .unwrap();
            if cosine(&cat.latents[a], &cat.latents[same]) > cosine(&cat.latents[diff], &cat.latents[other]) {
                wins += 1;
            }
        }
        assert!(wins >= 95, "only {wins}/100 seeds");
    }

    #[test]
    fn click_bias_limits() {
        let cfg = GenConfig {
            click_bias: -1e6,
            ..small()
        };
        let cat = generate_catalog(&cfg).unwrap();
        let log = generate_events(&cfg, &cat).unwrap();
        assert!(log.events.iter().all(|e| e.event_type == EventType::Impression));
        assert_eq!(
            log.events.len(),
            cfg.n_users * cfg.sessions_per_user * cfg.impressions_per_session
        );

        let cfg = GenConfig {
            click_bias: 1e6,
            ..small()
        };
        let log = generate_events(&cfg, &cat).unwrap();
        let clicks = log.events.iter().filter(|e| e.event_type == EventType::Click).count();
        assert_eq!(clicks, cfg.n_users * cfg.sessions_per_user * cfg.impressions_per_session);
    }

    #[test]
    fn every_click_follows_its_impression() {
        let cfg = small();
        let cat = generate_catalog(&cfg).unwrap();
        let log = generate_events(&cfg, &cat).unwrap();
        let imps: HashSet<(&str, &str, i64)> = log
            .events
            .iter()
            .filter(|e| e.event_type == EventType::Impression)
            .map(|e| (e.user_id.as_str(), e.item_id.as_str(), e.timestamp))
            .collect();
        for e in log.events.iter().filter(|e| e.event_type == EventType::Click) {
            assert!(imps.contains(&(e.user_id.as_str(), e.item_id.as_str(), e.timestamp - CLICK_DELAY)));
        }
        // timestamps strictly increase within a user
        for w in log.events.windows(2) {
            if w[0].user_id == w[1].user_id {
                assert!(w[1].timestamp > w[0].timestamp);
            }
        }
    }

    /// Per session: latent, impressed items, and which of them were clicked.
    fn sessions(cfg: &GenConfig, cat: &SyntheticCatalog, log: &SyntheticLog) -> Vec<(Vec<f64>, Vec<(usize, bool)>)> {
        let index: std::collections::HashMap<&str, usize> = cat
            .items
            .iter()
            .enumerate()
            .map(|(i, m)| (m.item_id.as_str(), i))
            .collect();
        let mut out = Vec::new();
        for (u, uid) in log.user_ids.iter().enumerate() {
            let evs: Vec<&Event> = log.events.iter().filter(|e| &e.user_id == uid).collect();
            let clicked_times: HashSet<i64> = evs
                .iter()
                .filter(|e| e.event_type == EventType::Click)
                .map(|e| e.timestamp - CLICK_DELAY)
                .collect();
            let shown: Vec<(usize, bool)> = evs
                .iter()
                .filter(|e| e.event_type == EventType::Impression)
                .map(|e| (index[e.item_id.as_str()], clicked_times.contains(&e.timestamp)))
                .collect();
            let latents = session_latents(cfg, u, &log.user_latents[u], cat);
            for (latent, chunk) in latents.into_iter().zip(shown.chunks(cfg.impressions_per_session)) {
                out.push((latent, chunk.to_vec()));
            }
        }
        out
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn noiseless_policy_shows_top_items_of_the_session() {
        let cfg = GenConfig {
            policy_noise: 0.0,
            click_noise: 0.0,
            click_bias: 0.0,
            ..small()
        };
        let cat = generate_catalog(&cfg).unwrap();
        let log = generate_events(&cfg, &cat).unwrap();
        let all = sessions(&cfg, &cat, &log);
        assert_eq!(all.len(), cfg.n_users * cfg.sessions_per_user);
        for (latent, shown) in all {
            let aff: Vec<f64> = cat.latents.iter().map(|q| dot(&latent, q)).collect();
            let mut order: Vec<usize> = (0..aff.len()).collect();
            order.sort_by(|&a, &b| aff[b].total_cmp(&aff[a]));
            let top: HashSet<usize> = order[..cfg.impressions_per_session].iter().copied().collect();
            assert_eq!(shown.len(), cfg.impressions_per_session);
            let (mut clicked, mut skipped) = (Vec::new(), Vec::new());
            for (i, c) in shown {
                assert!(top.contains(&i));
                if c {
                    clicked.push(aff[i]);
                } else {
                    skipped.push(aff[i]);
                }
            }
            let impressed_floor = if skipped.is_empty() { mean(&clicked) } else { mean(&skipped) };
            assert!(impressed_floor >= mean(&aff));
        }
    }

    #[test]
    fn intermediate_feedback_ordering_on_aggregate() {
        let cfg = GenConfig {
            n_users: 100,
            ..GenConfig::default()
        };
        let cat = generate_catalog(&cfg).unwrap();
        let log = generate_events(&cfg, &cat).unwrap();
        let (mut c, mut s, mut r) = (Vec::new(), Vec::new(), Vec::new());
        for (latent, shown) in sessions(&cfg, &cat, &log) {
            for (i, clicked) in shown {
                let a = dot(&latent, &cat.latents[i]);
                if clicked {
                    c.push(a);
                } else {
                    s.push(a);
                }
            }
            r.push(cat.latents.iter().map(|q| dot(&latent, q)).sum::<f64>() / cat.latents.len() as f64);
        }
        let (c, s, r) = (mean(&c), mean(&s), mean(&r));
        assert!(c > s && s > r, "clicked {c} skipped {s} random {r}");
    }
}
