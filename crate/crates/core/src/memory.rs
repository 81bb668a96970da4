//! Wavelet memory: unit-norm spatial keys paired with wavelet style codes.
//!
//! Retrieval is exhaustive cosine nearest neighbour. Training pulls the query
//! toward the most similar key whose stored code agrees with the current
//! image (wavelet KL below `eta`) and away from the most similar key whose
//! code disagrees. Updates merge into the top-1 slot when its code agrees,
//! otherwise write a new slot, evicting the least recently used one when full.

use std::cmp::Ordering;
use std::fmt;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{read_u32, read_u64, Tensor};
use crate::wavelet::WaveletCode;

pub const BANK_MAGIC: &[u8; 8] = b"MMBANK01";
pub const DEFAULT_CAPACITY: usize = 982;
pub const DEFAULT_MARGIN: f64 = 0.1;
pub const DEFAULT_ETA: f64 = 0.7;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

const NORM_TOL: f64 = 1e-12;

/// A unit-norm embedding of a low-quality image.
#[derive(Clone, Debug, PartialEq)]
pub struct Query(Vec<f64>);

impl Query {
    /// Normalizes `v` to unit length.
    pub fn new(v: Vec<f64>) -> Result<Self> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > NORM_TOL) || !n.is_finite() {
            return Err(Error::contract("query vector has zero or non-finite norm"));
        }
        Ok(Query(v.into_iter().map(|x| x / n).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Fixed-capacity key/value store.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    key_dim: usize,
    value_dim: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
    last_access: Vec<u64>,
    occupied: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateKind {
    Merged,
    Written { evicted: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpdateReport {
    pub kind: UpdateKind,
    pub slot: usize,
}

/// Result of the KL-gated triplet selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletOutcome {
    pub loss: f64,
    pub positive: Option<usize>,
    pub negative: Option<usize>,
    pub positive_sim: Option<f64>,
    pub negative_sim: Option<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_softmax(x: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = x.iter().map(|v| v / temperature).collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scaled.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    scaled.iter().map(|v| v - lse).collect()
}

/// `KL(softmax(v / t) || softmax(z / t))`.
pub fn wavelet_kl(v: &WaveletCode, z: &WaveletCode, temperature: f64) -> Result<f64> {
    kl_slices(&v.values, &z.values, temperature)
}

fn kl_slices(v: &[f64], z: &[f64], temperature: f64) -> Result<f64> {
    if v.len() != z.len() {
        return Err(Error::shape(
            "wavelet_kl",
            format!("code lengths {} vs {}", v.len(), z.len()),
        ));
    }
    if !(temperature > 0.0) {
        return Err(Error::contract("wavelet_kl temperature must be positive"));
    }
    if v.is_empty() {
        return Ok(0.0);
    }
    let lp = log_softmax(v, temperature);
    let lq = log_softmax(z, temperature);
    let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
    Ok(kl.max(0.0))
}

impl MemoryBank {
    pub fn new(capacity: usize, key_dim: usize, value_dim: usize) -> Result<Self> {
        if capacity == 0 || key_dim == 0 {
            return Err(Error::contract("memory bank needs positive capacity and key dimension"));
        }
        Ok(MemoryBank {
            capacity,
            key_dim,
            value_dim,
            keys: vec![0.0; capacity * key_dim],
            values: vec![0.0; capacity * value_dim],
            last_access: vec![0; capacity],
            occupied: vec![false; capacity],
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn key_dim(&self) -> usize {
        self.key_dim
    }

    pub fn value_dim(&self) -> usize {
        self.value_dim
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied_count() == 0
    }

    pub fn is_occupied(&self, slot: usize) -> bool {
        self.occupied[slot]
    }

    pub fn key(&self, slot: usize) -> &[f64] {
        &self.keys[slot * self.key_dim..(slot + 1) * self.key_dim]
    }

    pub fn value(&self, slot: usize) -> &[f64] {
        &self.values[slot * self.value_dim..(slot + 1) * self.value_dim]
    }

    pub fn value_code(&self, slot: usize) -> WaveletCode {
        WaveletCode::new(self.value(slot).to_vec())
    }

    pub fn last_access(&self, slot: usize) -> u64 {
        self.last_access[slot]
    }

    fn check_query(&self, q: &Query) -> Result<()> {
        if q.dim() != self.key_dim {
            return Err(Error::shape(
                "memory",
                format!("query dimension {} vs key dimension {}", q.dim(), self.key_dim),
            ));
        }
        Ok(())
    }

    fn check_code(&self, z: &WaveletCode) -> Result<()> {
        if z.len() != self.value_dim {
            return Err(Error::shape(
                "memory",
                format!("code length {} vs value dimension {}", z.len(), self.value_dim),
            ));
        }
        Ok(())
    }

    /// Occupied slots sorted by descending cosine similarity, ties by index.
    fn ranked(&self, q: &Query) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = (0..self.capacity)
            .filter(|&i| self.occupied[i])
            .map(|i| (i, dot(q.as_slice(), self.key(i))))
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        all
    }

    /// The `k` occupied slots most similar to `q`.
    pub fn knn_retrieve(&self, q: &Query, k: usize) -> Result<Vec<(usize, f64)>> {
        self.check_query(q)?;
        if k == 0 {
            return Err(Error::contract("k must be at least 1"));
        }
        let occ = self.occupied_count();
        if occ == 0 {
            return Err(Error::Retrieval("memory bank is empty".into()));
        }
        if occ < k {
            return Err(Error::Retrieval(format!("asked for {k} neighbours but only {occ} slots are occupied")));
        }
        // Partial selection keeps the exact ranking of the winners.
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        for i in (0..self.capacity).filter(|&i| self.occupied[i]) {
            let s = dot(q.as_slice(), self.key(i));
            let cmp = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
            let cand = (i, s);
            if best.len() == k && cmp(&cand, &best[k - 1]) != Ordering::Less {
                continue;
            }
            let pos = best.partition_point(|e| cmp(e, &cand) == Ordering::Less);
            best.insert(pos, cand);
            best.truncate(k);
        }
        Ok(best)
    }

    /// Selects the positive and negative keys and evaluates the hinge in
    /// cosine-distance form, `max((1 - s_p) - (1 - s_n) + margin, 0)`.
    pub fn triplet(&self, q: &Query, z_w: &WaveletCode, margin: f64, eta: f64) -> Result<TripletOutcome> {
        self.check_query(q)?;
        self.check_code(z_w)?;
        if margin < 0.0 {
            return Err(Error::contract("margin must be non-negative"));
        }
        let mut positive = None;
        let mut negative = None;
        for (i, s) in self.ranked(q) {
            if positive.is_some() && negative.is_some() {
                break;
            }
            let kl = kl_slices(self.value(i), &z_w.values, DEFAULT_TEMPERATURE)?;
            if kl < eta && positive.is_none() {
                positive = Some((i, s));
            } else if kl > eta && negative.is_none() {
                negative = Some((i, s));
            }
        }
        let loss = match (positive, negative) {
            (Some((_, sp)), Some((_, sn))) => ((1.0 - sp) - (1.0 - sn) + margin).max(0.0),
            _ => 0.0,
        };
        Ok(TripletOutcome {
            loss,
            positive: positive.map(|p| p.0),
            negative: negative.map(|n| n.0),
            positive_sim: positive.map(|p| p.1),
            negative_sim: negative.map(|n| n.1),
        })
    }

    /// Records the triplet hinge on a graph where `q` is the (already
    /// normalized) query node. Keys enter as constants, so gradient reaches
    /// only the query.
    pub fn triplet_on_graph(
        &self,
        g: &mut Graph,
        q: Var,
        z_w: &WaveletCode,
        margin: f64,
        eta: f64,
    ) -> Result<(Var, TripletOutcome)> {
        let query = Query::new(g.value(q).data().to_vec())?;
        let outcome = self.triplet(&query, z_w, margin, eta)?;
        let loss = match (outcome.positive, outcome.negative) {
            (Some(p), Some(n)) if outcome.loss > 0.0 => {
                let kp = g.constant(Tensor::new(&[self.key_dim], self.key(p).to_vec())?);
                let kn = g.constant(Tensor::new(&[self.key_dim], self.key(n).to_vec())?);
                let diff = g.sub(kn, kp)?;
                let prod = g.mul(q, diff)?;
                let s = g.sum(prod);
                g.affine(s, 1.0, margin)
            }
            _ => {
                let zero = g.constant(Tensor::zeros(&[self.key_dim]));
                let prod = g.mul(q, zero)?;
                g.sum(prod)
            }
        };
        Ok((loss, outcome))
    }

    /// Merge into the top-1 slot when its code agrees with `z_w`, otherwise
    /// write `(q, z_w)` into a free or least recently used slot.
    pub fn update(&mut self, q: &Query, z_w: &WaveletCode, eta: f64, step: u64) -> Result<UpdateReport> {
        self.check_query(q)?;
        self.check_code(z_w)?;
        if !self.is_empty() {
            let (t1, _) = self.knn_retrieve(q, 1)?[0];
            let kl = kl_slices(self.value(t1), &z_w.values, DEFAULT_TEMPERATURE)?;
            if kl < eta {
                let d = self.key_dim;
                let merged: Vec<f64> = self
                    .key(t1)
                    .iter()
                    .zip(q.as_slice())
                    .map(|(k, q)| (k + q) / 2.0)
                    .collect();
                // Antipodal query and key cancel; keep the old key then.
                if let Ok(unit) = Query::new(merged) {
                    self.keys[t1 * d..(t1 + 1) * d].copy_from_slice(unit.as_slice());
                }
                self.last_access[t1] = step;
                return Ok(UpdateReport {
                    kind: UpdateKind::Merged,
                    slot: t1,
                });
            }
        }
        let (slot, evicted) = match self.occupied.iter().position(|&o| !o) {
            Some(free) => (free, false),
            None => {
                let lru = (0..self.capacity)
                    .min_by(|&a, &b| self.last_access[a].cmp(&self.last_access[b]).then(a.cmp(&b)))
                    .expect("non-empty bank");
                (lru, true)
            }
        };
        self.write(slot, q, z_w, step);
        Ok(UpdateReport {
            kind: UpdateKind::Written { evicted },
            slot,
        })
    }

    /// Unconditionally stores `(q, z_w)` at `slot`.
    pub fn write(&mut self, slot: usize, q: &Query, z_w: &WaveletCode, step: u64) {
        let (dk, dv) = (self.key_dim, self.value_dim);
        self.keys[slot * dk..(slot + 1) * dk].copy_from_slice(q.as_slice());
        self.values[slot * dv..(slot + 1) * dv].copy_from_slice(&z_w.values);
        self.last_access[slot] = step;
        self.occupied[slot] = true;
    }

    /// Snapshot: magic, `u32` capacity, `u32` key dim, `u32` value dim, then
    /// per slot `u8` occupied, `u64` last access, keys and values as
    /// little-endian `f64`.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BANK_MAGIC)?;
        for v in [self.capacity, self.key_dim, self.value_dim] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for slot in 0..self.capacity {
            w.write_all(&[self.occupied[slot] as u8])?;
            w.write_all(&self.last_access[slot].to_le_bytes())?;
            for v in self.key(slot).iter().chain(self.value(slot)) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != BANK_MAGIC {
            return Err(Error::format("bank", "bad magic"));
        }
        let capacity = read_u32(&mut r)? as usize;
        let key_dim = read_u32(&mut r)? as usize;
        let value_dim = read_u32(&mut r)? as usize;
        let mut bank = MemoryBank::new(capacity, key_dim, value_dim)?;
        let mut f = [0u8; 8];
        for slot in 0..capacity {
            let mut o = [0u8; 1];
            r.read_exact(&mut o)?;
            bank.occupied[slot] = match o[0] {
                0 => false,
                1 => true,
                b => return Err(Error::format("bank", format!("occupied flag {b} at slot {slot}"))),
            };
            bank.last_access[slot] = read_u64(&mut r)?;
            for i in 0..key_dim {
                r.read_exact(&mut f)?;
                bank.keys[slot * key_dim + i] = f64::from_le_bytes(f);
            }
            for i in 0..value_dim {
                r.read_exact(&mut f)?;
                bank.values[slot * value_dim + i] = f64::from_le_bytes(f);
            }
        }
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_snapshot(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_snapshot(&bytes[..])
    }

    pub fn stats(&self, bins: usize) -> MemoryStats {
        let bins = bins.max(1);
        let occ: Vec<usize> = (0..self.capacity).filter(|&i| self.occupied[i]).collect();
        let mut access_hist = vec![0usize; bins];
        let mut centroid_hist = vec![0usize; bins];
        let (mut sim_min, mut sim_mean, mut sim_max) = (f64::NAN, f64::NAN, f64::NAN);
        if !occ.is_empty() {
            let lo = occ.iter().map(|&i| self.last_access[i]).min().unwrap_or(0);
            let hi = occ.iter().map(|&i| self.last_access[i]).max().unwrap_or(0);
            let span = (hi - lo).max(1) as f64;
            for &i in &occ {
                let b = (((self.last_access[i] - lo) as f64 / span) * bins as f64) as usize;
                access_hist[b.min(bins - 1)] += 1;
            }
            let mut centroid = vec![0.0; self.key_dim];
            for &i in &occ {
                for (c, k) in centroid.iter_mut().zip(self.key(i)) {
                    *c += k;
                }
            }
            let sims: Vec<f64> = match Query::new(centroid) {
                Ok(c) => occ.iter().map(|&i| dot(c.as_slice(), self.key(i))).collect(),
                Err(_) => vec![0.0; occ.len()],
            };
            sim_min = sims.iter().copied().fold(f64::INFINITY, f64::min);
            sim_max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            sim_mean = sims.iter().sum::<f64>() / sims.len() as f64;
            for s in sims {
                let b = (((s + 1.0) / 2.0) * bins as f64) as usize;
                centroid_hist[b.min(bins - 1)] += 1;
            }
        }
        MemoryStats {
            capacity: self.capacity,
            occupied: occ.len(),
            access_hist,
            centroid_hist,
            sim_min,
            sim_mean,
            sim_max,
        }
    }
}

/// Occupancy and distribution summary for `memory stats`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryStats {
    pub capacity: usize,
    pub occupied: usize,
    /// Last-access counters bucketed between the oldest and newest occupied slot.
    pub access_hist: Vec<usize>,
    /// Cosine to the key centroid, bucketed over `[-1, 1]`.
    pub centroid_hist: Vec<usize>,
    pub sim_min: f64,
    pub sim_mean: f64,
    pub sim_max: f64,
}

impl fmt::Display for MemoryStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "occupancy {}/{}", self.occupied, self.capacity)?;
        writeln!(f, "access_histogram {:?}", self.access_hist)?;
        writeln!(
            f,
            "centroid_similarity min={:.6} mean={:.6} max={:.6}",
            self.sim_min, self.sim_mean, self.sim_max
        )?;
        write!(f, "centroid_histogram {:?}", self.centroid_hist)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(v: &[f64]) -> Query {
        Query::new(v.to_vec()).unwrap()
    }

    fn code(v: &[f64]) -> WaveletCode {
        WaveletCode::new(v.to_vec())
    }

    #[test]
    fn retrieve_self_similarity_one() {
        let mut bank = MemoryBank::new(4, 3, 2).unwrap();
        bank.write(2, &q(&[1.0, 2.0, 3.0]), &code(&[0.0, 0.0]), 0);
        bank.write(0, &q(&[-1.0, 0.5, 0.0]), &code(&[0.0, 0.0]), 0);
        let top = bank.knn_retrieve(&q(&[1.0, 2.0, 3.0]), 1).unwrap();
        assert_eq!(top[0].0, 2);
        assert!((top[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn retrieve_orthogonal_order() {
        let mut bank = MemoryBank::new(2, 2, 1).unwrap();
        bank.write(0, &q(&[1.0, 0.0]), &code(&[0.0]), 0);
        bank.write(1, &q(&[0.0, 1.0]), &code(&[0.0]), 0);
        let r = bank.knn_retrieve(&q(&[1.0, 0.0]), 2).unwrap();
        assert_eq!(r, vec![(0, 1.0), (1, 0.0)]);
    }

    #[test]
    fn retrieve_empty_and_short() {
        let mut bank = MemoryBank::new(3, 2, 1).unwrap();
        assert!(matches!(bank.knn_retrieve(&q(&[1.0, 0.0]), 1), Err(Error::Retrieval(_))));
        bank.write(1, &q(&[1.0, 1.0]), &code(&[0.0]), 0);
        assert!(matches!(bank.knn_retrieve(&q(&[1.0, 0.0]), 2), Err(Error::Retrieval(_))));
    }

    #[test]
    fn ties_prefer_lower_index() {
        let mut bank = MemoryBank::new(3, 2, 1).unwrap();
        for s in [2, 0, 1] {
            bank.write(s, &q(&[1.0, 1.0]), &code(&[0.0]), 0);
        }
        let r = bank.knn_retrieve(&q(&[1.0, 1.0]), 3).unwrap();
        assert_eq!(r.iter().map(|e| e.0).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(wavelet_kl(&code(&[0.3, -1.0]), &code(&[0.3, -1.0]), 1.0).unwrap(), 0.0);
        let shifted = wavelet_kl(&code(&[1.3, 0.0, 2.5]), &code(&[0.3, -1.0, 1.5]), 1.0).unwrap();
        assert!(shifted.abs() < 1e-15);
        // p = (e/(1+e), 1/(1+e)), q = reversed: KL = (e-1)/(e+1) * 1.
        let e = std::f64::consts::E;
        let want = (e - 1.0) / (e + 1.0);
        let got = wavelet_kl(&code(&[1.0, 0.0]), &code(&[0.0, 1.0]), 1.0).unwrap();
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        assert!(wavelet_kl(&code(&[1.0]), &code(&[0.0, 1.0]), 1.0).is_err());
        assert!(wavelet_kl(&code(&[1.0]), &code(&[0.0]), 0.0).is_err());
    }

    #[test]
    fn triplet_examples() {
        let close = code(&[5.0, -5.0]);
        let far = code(&[-5.0, 5.0]);
        let mut bank = MemoryBank::new(2, 2, 2).unwrap();
        bank.write(0, &q(&[1.0, 0.0]), &close, 0);
        bank.write(1, &q(&[0.0, 1.0]), &far, 0);
        let out = bank.triplet(&q(&[1.0, 0.0]), &close, 0.1, 0.7).unwrap();
        assert_eq!((out.positive, out.negative), (Some(0), Some(1)));
        assert_eq!(out.loss, 0.0);
        let out = bank.triplet(&q(&[0.0, 1.0]), &close, 0.1, 0.7).unwrap();
        assert!((out.loss - 1.1).abs() < 1e-12);
    }

    #[test]
    fn triplet_missing_side_is_zero() {
        let z = code(&[0.0, 0.0]);
        let mut bank = MemoryBank::new(2, 2, 2).unwrap();
        bank.write(0, &q(&[1.0, 0.0]), &z, 0);
        bank.write(1, &q(&[0.0, 1.0]), &z, 0);
        let out = bank.triplet(&q(&[0.0, 1.0]), &z, 0.1, 0.7).unwrap();
        assert_eq!((out.loss, out.negative), (0.0, None));
        assert_eq!(out.positive, Some(1));
    }

    #[test]
    fn update_empty_writes_slot_zero() {
        let mut bank = MemoryBank::new(3, 2, 1).unwrap();
        let r = bank.update(&q(&[0.2, 1.0]), &code(&[1.0]), 0.7, 5).unwrap();
        assert_eq!(r, UpdateReport { kind: UpdateKind::Written { evicted: false }, slot: 0 });
        assert_eq!(bank.last_access(0), 5);
    }

    #[test]
    fn update_identical_entry_merges() {
        let mut bank = MemoryBank::new(3, 2, 1).unwrap();
        let (qq, z) = (q(&[0.6, 0.8]), code(&[1.0]));
        bank.write(1, &qq, &z, 0);
        let r = bank.update(&qq, &z, 0.7, 9).unwrap();
        assert_eq!(r, UpdateReport { kind: UpdateKind::Merged, slot: 1 });
        assert!((bank.key(1)[0] - 0.6).abs() < 1e-15 && (bank.key(1)[1] - 0.8).abs() < 1e-15);
        assert_eq!(bank.occupied_count(), 1);
        assert_eq!(bank.last_access(1), 9);
    }

    #[test]
    fn snapshot_round_trip_and_layout() {
        let mut bank = MemoryBank::new(3, 2, 2).unwrap();
        bank.write(1, &q(&[3.0, 4.0]), &code(&[0.5, -0.25]), 77);
        let mut buf = Vec::new();
        bank.write_snapshot(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"MMBANK01");
        assert_eq!(buf.len(), 8 + 12 + 3 * (1 + 8 + 4 * 8));
        assert_eq!(MemoryBank::read_snapshot(&buf[..]).unwrap(), bank);
        buf[0] = b'X';
        assert!(MemoryBank::read_snapshot(&buf[..]).is_err());
    }

    #[test]
    fn stats_report_occupancy() {
        let mut bank = MemoryBank::new(5, 2, 1).unwrap();
        bank.write(0, &q(&[1.0, 0.0]), &code(&[0.0]), 1);
        bank.write(3, &q(&[1.0, 0.1]), &code(&[0.0]), 10);
        let s = bank.stats(4);
        assert_eq!((s.capacity, s.occupied), (5, 2));
        assert_eq!(s.access_hist.iter().sum::<usize>(), 2);
        assert!(s.sim_max <= 1.0 + 1e-12 && s.sim_min > 0.9);
        assert!(s.to_string().starts_with("occupancy 2/5"));
    }
}
