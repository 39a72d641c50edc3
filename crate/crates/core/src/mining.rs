//! Modular hard-negative sampling and the hinge losses.
//!
//! For each pair m and module md the sampler draws a same-category peer n
//! with probability exp(cos(q_m, q_n)) / Z_m, Z_m summing over all peers of
//! m. Only the normalizers are stored; row entries are recomputed on
//! demand, so memory stays linear in the number of pairs.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Read, Write};
use std::sync::{Arc, RwLock};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::eval::Module;

pub const DEFAULT_MARGIN: f64 = 0.1;
pub const DEFAULT_REFRESH_INTERVAL: u64 = 50;

const BINARY_MAGIC: &[u8; 8] = b"RGEMB\x00\x01\x00";

#[derive(Debug, Error)]
pub enum MiningError {
    #[error("vector has zero norm")]
    ZeroNorm,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("embedding {0} has an empty vector")]
    EmptyVector(String),
    #[error("duplicate pair id {0}")]
    DuplicateId(String),
    #[error("unknown pair id {0}")]
    UnknownPair(String),
    #[error("pair {0} has no same-category peer")]
    NoPeers(String),
    #[error("negatives must cover exactly sub, loc and rel")]
    KeyMismatch,
    #[error("embeddings line {line}: {detail}")]
    Format { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModularEmbedding {
    pub pair_id: String,
    pub category: String,
    pub sub: Vec<f32>,
    pub loc: Vec<f32>,
    pub rel: Vec<f32>,
}

impl ModularEmbedding {
    pub fn module(&self, md: Module) -> &[f32] {
        match md {
            Module::Sub => &self.sub,
            Module::Loc => &self.loc,
            Module::Rel => &self.rel,
        }
    }
}

/// Cosine similarity of two non-zero vectors of equal length.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, MiningError> {
    if a.len() != b.len() {
        return Err(MiningError::DimensionMismatch(a.len(), b.len()));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(MiningError::ZeroNorm);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Eight independent lanes so the loop vectorizes; the summation order is
/// fixed, which makes `dot(a, b) == dot(b, a)` bit for bit.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut tail = 0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    lanes.iter().sum::<f32>() + tail
}

/// Scaled to unit length; zero vectors stay zero and so score 0 against
/// everything.
fn unit(v: &[f32]) -> impl Iterator<Item = f32> + '_ {
    let norm = v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
    let scale = if norm > 0.0 { (1.0 / norm) as f32 } else { 0.0 };
    v.iter().map(move |x| x * scale)
}

/// Per-module sampling distributions over same-category peers.
#[derive(Debug, Clone)]
pub struct SamplingTable {
    epoch: u64,
    dim: usize,
    /// Pair ids and categories in input order.
    ids: Vec<String>,
    categories: Vec<String>,
    index: HashMap<String, usize>,
    /// Input index to position in the category-grouped layout, and back.
    pos: Vec<usize>,
    at: Vec<usize>,
    /// Position range of each position's category group.
    group: Vec<(usize, usize)>,
    /// Unit vectors in grouped layout, `dim` floats per position.
    units: [Vec<f32>; 3],
    /// Z_m per module, indexed by position.
    normalizers: [Vec<f64>; 3],
}

impl SamplingTable {
    pub fn build(embeddings: &[ModularEmbedding]) -> Result<Self, MiningError> {
        let dim = embeddings.first().map_or(0, |e| e.sub.len());
        let mut index = HashMap::with_capacity(embeddings.len());
        for (i, e) in embeddings.iter().enumerate() {
            for md in Module::ALL {
                let len = e.module(md).len();
                if len == 0 {
                    return Err(MiningError::EmptyVector(e.pair_id.clone()));
                }
                if len != dim {
                    return Err(MiningError::DimensionMismatch(dim, len));
                }
            }
            if index.insert(e.pair_id.clone(), i).is_some() {
                return Err(MiningError::DuplicateId(e.pair_id.clone()));
            }
        }

        let mut at: Vec<usize> = (0..embeddings.len()).collect();
        at.sort_by(|&a, &b| embeddings[a].category.cmp(&embeddings[b].category).then(a.cmp(&b)));
        let mut pos = vec![0; at.len()];
        for (p, &i) in at.iter().enumerate() {
            pos[i] = p;
        }
        let mut ranges = Vec::new();
        let mut group = vec![(0, 0); at.len()];
        let mut start = 0;
        for p in 1..=at.len() {
            if p == at.len() || embeddings[at[p]].category != embeddings[at[start]].category {
                ranges.push((start, p));
                group[start..p].fill((start, p));
                start = p;
            }
        }

        let units = Module::ALL.map(|md| {
            let mut flat = Vec::with_capacity(at.len() * dim);
            for &i in &at {
                flat.extend(unit(embeddings[i].module(md)));
            }
            flat
        });
        let normalizers = [0, 1, 2].map(|k| {
            let flat = &units[k];
            let parts: Vec<Vec<f64>> = ranges
                .par_iter()
                .map(|&(s, e)| group_normalizers(flat, dim, s, e))
                .collect();
            parts.concat()
        });

        Ok(Self {
            epoch: 0,
            dim,
            ids: embeddings.iter().map(|e| e.pair_id.clone()).collect(),
            categories: embeddings.iter().map(|e| e.category.clone()).collect(),
            index,
            pos,
            at,
            group,
            units,
            normalizers,
        })
    }

    pub fn with_epoch(mut self, epoch: u64) -> Self {
        self.epoch = epoch;
        self
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, pair_id: &str) -> Option<usize> {
        self.index.get(pair_id).copied()
    }

    pub fn pair_id(&self, m: usize) -> &str {
        &self.ids[m]
    }

    pub fn category(&self, m: usize) -> &str {
        &self.categories[m]
    }

    fn vector(&self, k: usize, p: usize) -> &[f32] {
        &self.units[k][p * self.dim..(p + 1) * self.dim]
    }

    fn similarity(&self, k: usize, p: usize, q: usize) -> f64 {
        f64::from(dot(self.vector(k, p), self.vector(k, q))).clamp(-1.0, 1.0)
    }

    fn module_slot(md: Module) -> usize {
        match md {
            Module::Sub => 0,
            Module::Loc => 1,
            Module::Rel => 2,
        }
    }

    /// Cosine similarity s^md_{m,n} as used by the table.
    pub fn score(&self, m: usize, n: usize, md: Module) -> f64 {
        self.similarity(Self::module_slot(md), self.pos[m], self.pos[n])
    }

    /// Number of same-category peers of `m`.
    pub fn peer_count(&self, m: usize) -> usize {
        let (s, e) = self.group[self.pos[m]];
        e - s - 1
    }

    /// The full row p^md_{m,·} as (peer index, probability), peers in input
    /// order. Empty when `m` has no peer.
    pub fn row(&self, m: usize, md: Module) -> Vec<(usize, f64)> {
        let k = Self::module_slot(md);
        let p = self.pos[m];
        let z = self.normalizers[k][p];
        let (s, e) = self.group[p];
        let mut row: Vec<(usize, f64)> = (s..e)
            .filter(|&q| q != p)
            .map(|q| (self.at[q], self.similarity(k, p, q).exp() / z))
            .collect();
        row.sort_by_key(|&(n, _)| n);
        row
    }

    pub fn probability(&self, m: usize, n: usize, md: Module) -> f64 {
        let k = Self::module_slot(md);
        let (p, q) = (self.pos[m], self.pos[n]);
        if p == q || self.group[p] != self.group[q] {
            return 0.0;
        }
        self.similarity(k, p, q).exp() / self.normalizers[k][p]
    }

    /// One draw from p^md_{m,·} by inverting the cumulative sum.
    pub fn sample_index<R: Rng + ?Sized>(&self, m: usize, md: Module, rng: &mut R) -> Option<usize> {
        let k = Self::module_slot(md);
        let p = self.pos[m];
        let (s, e) = self.group[p];
        if e - s < 2 {
            return None;
        }
        let target = rng.random::<f64>() * self.normalizers[k][p];
        let mut acc = 0.0;
        let mut last = None;
        for q in (s..e).filter(|&q| q != p) {
            acc += self.similarity(k, p, q).exp();
            last = Some(q);
            if target < acc {
                return Some(self.at[q]);
            }
        }
        // Rounding can leave the target a hair above the running sum.
        last.map(|q| self.at[q])
    }

    /// One negative pair per module for `pair_id`.
    pub fn sample_negatives<R: Rng + ?Sized>(
        &self,
        pair_id: &str,
        rng: &mut R,
    ) -> Result<BTreeMap<Module, String>, MiningError> {
        let m = self
            .index_of(pair_id)
            .ok_or_else(|| MiningError::UnknownPair(pair_id.to_string()))?;
        Module::ALL
            .into_iter()
            .map(|md| {
                self.sample_index(m, md, rng)
                    .map(|n| (md, self.ids[n].clone()))
                    .ok_or_else(|| MiningError::NoPeers(pair_id.to_string()))
            })
            .collect()
    }
}

/// Z for every position of one category group, visiting each unordered
/// pair once.
fn group_normalizers(flat: &[f32], dim: usize, start: usize, end: usize) -> Vec<f64> {
    let n = end - start;
    let mut z = vec![0f64; n];
    for i in 0..n {
        let a = &flat[(start + i) * dim..(start + i + 1) * dim];
        for j in i + 1..n {
            let b = &flat[(start + j) * dim..(start + j + 1) * dim];
            let e = f64::from(dot(a, b)).clamp(-1.0, 1.0).exp();
            z[i] += e;
            z[j] += e;
        }
    }
    z
}

fn hinge(x: f64) -> f64 {
    x.max(0.0)
}

/// Within-image ranking loss for one positive pair.
pub fn rank_loss(s_pos: f64, s_neg_expr: f64, s_neg_region: f64, margin: f64) -> f64 {
    hinge(margin - s_pos + s_neg_expr) + hinge(margin - s_pos + s_neg_region)
}

/// Cross-image loss; `negatives[md]` holds the score of the positive region
/// against the mined expression and of the mined region against the
/// positive expression.
pub fn mine_loss(
    s_pos: f64,
    negatives: &BTreeMap<Module, (f64, f64)>,
    margin: f64,
) -> Result<f64, MiningError> {
    if negatives.len() != Module::ALL.len() {
        return Err(MiningError::KeyMismatch);
    }
    Ok(Module::ALL
        .iter()
        .map(|md| {
            let (expr, region) = negatives[md];
            hinge(margin - s_pos + expr) + hinge(margin - s_pos + region)
        })
        .sum())
}

pub fn total_loss(rank: f64, mine: f64) -> f64 {
    rank + mine
}

/// Whether the table is rebuilt at `iteration`.
pub fn refresh_policy(iteration: u64, interval: u64) -> bool {
    interval > 0 && iteration.is_multiple_of(interval)
}

/// Holds the current table; readers clone an `Arc` and never see a
/// half-built epoch.
#[derive(Debug)]
pub struct MiningSampler {
    table: RwLock<Arc<SamplingTable>>,
    interval: u64,
}

impl MiningSampler {
    pub fn new(embeddings: &[ModularEmbedding], interval: u64) -> Result<Self, MiningError> {
        Ok(Self {
            table: RwLock::new(Arc::new(SamplingTable::build(embeddings)?)),
            interval,
        })
    }

    pub fn current(&self) -> Arc<SamplingTable> {
        self.table.read().expect("sampler lock").clone()
    }

    /// Rebuilds from `embeddings` and swaps the new table in.
    pub fn refresh(&self, embeddings: &[ModularEmbedding]) -> Result<u64, MiningError> {
        let epoch = self.current().epoch() + 1;
        let fresh = Arc::new(SamplingTable::build(embeddings)?.with_epoch(epoch));
        *self.table.write().expect("sampler lock") = fresh;
        Ok(epoch)
    }

    /// Refreshes when the policy fires for `iteration`; returns whether it did.
    pub fn step(&self, iteration: u64, embeddings: &[ModularEmbedding]) -> Result<bool, MiningError> {
        if iteration > 0 && refresh_policy(iteration, self.interval) {
            self.refresh(embeddings)?;
            return Ok(true);
        }
        Ok(false)
    }
}

pub fn read_embeddings_jsonl(reader: impl BufRead) -> Result<Vec<ModularEmbedding>, MiningError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| MiningError::Format {
            line: i + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Binary layout, little endian: 8-byte magic, u32 dim, u64 count, then per
/// record u32-length-prefixed pair id and category followed by sub, loc and
/// rel as `dim` f32 each.
pub fn write_embeddings_binary(mut w: impl Write, embeddings: &[ModularEmbedding]) -> Result<(), MiningError> {
    let dim = embeddings.first().map_or(0, |e| e.sub.len());
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&(embeddings.len() as u64).to_le_bytes())?;
    for e in embeddings {
        for s in [&e.pair_id, &e.category] {
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            w.write_all(s.as_bytes())?;
        }
        for md in Module::ALL {
            let v = e.module(md);
            if v.len() != dim {
                return Err(MiningError::DimensionMismatch(dim, v.len()));
            }
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_embeddings_binary(mut r: impl Read) -> Result<Vec<ModularEmbedding>, MiningError> {
    let bad = |detail: &str| MiningError::Format {
        line: 0,
        detail: detail.to_string(),
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != BINARY_MAGIC {
        return Err(bad("not an embeddings file"));
    }
    let mut u32b = [0u8; 4];
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u32b)?;
    let dim = u32::from_le_bytes(u32b) as usize;
    r.read_exact(&mut u64b)?;
    let count = u64::from_le_bytes(u64b) as usize;
    let mut read_string = |r: &mut dyn Read| -> Result<String, MiningError> {
        r.read_exact(&mut u32b)?;
        let mut buf = vec![0u8; u32::from_le_bytes(u32b) as usize];
        r.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|_| bad("invalid utf-8"))
    };
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let pair_id = read_string(&mut r)?;
        let category = read_string(&mut r)?;
        let mut vecs = [Vec::new(), Vec::new(), Vec::new()];
        for v in &mut vecs {
            let mut raw = vec![0u8; dim * 4];
            r.read_exact(&mut raw)?;
            *v = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
        }
        let [sub, loc, rel] = vecs;
        out.push(ModularEmbedding {
            pair_id,
            category,
            sub,
            loc,
            rel,
        });
    }
    Ok(out)
}

/// Random embeddings with Zipf-distributed categories (exponent 1), the
/// heavy-tailed shape of real object-category counts.
pub fn synthetic_embeddings(count: usize, dim: usize, categories: usize, seed: u64) -> Vec<ModularEmbedding> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let categories = categories.max(1);
    let mut cdf: Vec<f64> = (1..=categories).map(|k| 1.0 / k as f64).collect();
    let total: f64 = cdf.iter().sum();
    let mut acc = 0.0;
    for c in &mut cdf {
        acc += *c / total;
        *c = acc;
    }
    (0..count)
        .map(|i| {
            let u: f64 = rng.random();
            let c = cdf.partition_point(|&x| x < u).min(categories - 1);
            let mut v = || (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
            ModularEmbedding {
                pair_id: format!("p{i}"),
                category: format!("c{c}"),
                sub: v(),
                loc: v(),
                rel: v(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(id: &str, cat: &str, v: &[f32]) -> ModularEmbedding {
        ModularEmbedding {
            pair_id: id.into(),
            category: cat.into(),
            sub: v.to_vec(),
            loc: v.to_vec(),
            rel: v.to_vec(),
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 0.0], &[0.6, 0.8]).unwrap() - 0.6).abs() < 1e-12);
        assert!(matches!(cosine_similarity(&[0.0], &[1.0]), Err(MiningError::ZeroNorm)));
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 0.0]),
            Err(MiningError::DimensionMismatch(1, 2))
        ));
    }

    #[test]
    fn two_peers_sample_each_other() {
        let t = SamplingTable::build(&[emb("a", "cat", &[1.0, 0.0]), emb("b", "cat", &[0.0, 1.0])]).unwrap();
        assert_eq!(t.row(0, Module::Sub), vec![(1, 1.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let neg = t.sample_negatives("a", &mut rng).unwrap();
        assert!(neg.values().all(|n| n == "b"));
    }

    #[test]
    fn lonely_pair_has_no_row() {
        let t = SamplingTable::build(&[emb("a", "cat", &[1.0]), emb("b", "dog", &[1.0])]).unwrap();
        assert!(t.row(0, Module::Sub).is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(t.sample_negatives("a", &mut rng), Err(MiningError::NoPeers(_))));
    }

    #[test]
    fn zero_vectors_are_neutral() {
        let t = SamplingTable::build(&[
            emb("a", "cat", &[0.0, 0.0]),
            emb("b", "cat", &[1.0, 0.0]),
            emb("c", "cat", &[0.0, 1.0]),
        ])
        .unwrap();
        let row = t.row(0, Module::Rel);
        assert!((row[0].1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn hinge_identities() {
        assert_eq!(rank_loss(0.9, 0.5, 0.5, 0.1), 0.0);
        assert!((rank_loss(0.4, 0.4, 0.4, 0.1) - 0.2).abs() < 1e-12);
        let eq: BTreeMap<Module, (f64, f64)> = Module::ALL.iter().map(|m| (*m, (0.3, 0.3))).collect();
        assert!((mine_loss(0.3, &eq, 0.1).unwrap() - 0.6).abs() < 1e-12);
        let mut short = eq.clone();
        short.remove(&Module::Loc);
        assert!(mine_loss(0.3, &short, 0.1).is_err());
        assert!((total_loss(0.2, 0.6) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn refresh_every_interval() {
        assert!(refresh_policy(50, 50));
        assert!(!refresh_policy(1, 50));
        assert_eq!((1..=1000).filter(|&i| refresh_policy(i, 50)).count(), 20);
    }

    #[test]
    fn sampler_swaps_epochs() {
        let e = vec![emb("a", "cat", &[1.0]), emb("b", "cat", &[1.0])];
        let s = MiningSampler::new(&e, 50).unwrap();
        let before = s.current();
        assert!(!s.step(49, &e).unwrap());
        assert!(s.step(50, &e).unwrap());
        assert_eq!(before.epoch(), 0);
        assert_eq!(s.current().epoch(), 1);
    }

    #[test]
    fn binary_round_trip() {
        let e = synthetic_embeddings(20, 5, 3, 9);
        let mut buf = Vec::new();
        write_embeddings_binary(&mut buf, &e).unwrap();
        assert_eq!(read_embeddings_binary(buf.as_slice()).unwrap(), e);
    }
}
