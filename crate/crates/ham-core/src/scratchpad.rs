//! Sparse KV scratchpad and masked softmax attention over it.
//!
//! An entry is admissible for a query at position `t` in document `d` when
//! `orig_pos ≤ t`, its document is `d` and it is not padding. An empty
//! admissible set yields the zero vector.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, HamError, Result};
use crate::math::dot;

/// One stored token: per-head keys (already rotated at `orig_pos`) and values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvEntry {
    pub orig_pos: usize,
    pub doc_id: i64,
    pub padding: bool,
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

/// Append-only cache with strictly increasing positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvCache {
    heads: usize,
    d_k: usize,
    d_v: usize,
    entries: Vec<KvEntry>,
}

impl KvCache {
    pub fn new(heads: usize, d_k: usize, d_v: usize) -> Self {
        Self {
            heads,
            d_k,
            d_v,
            entries: Vec::new(),
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn d_k(&self) -> usize {
        self.d_k
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn entries(&self) -> &[KvEntry] {
        &self.entries
    }

    /// `T_KV`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn check_entry(&self, e: &KvEntry) -> Result<()> {
        check_len("entry key heads", self.heads, e.keys.len())?;
        check_len("entry value heads", self.heads, e.values.len())?;
        for (k, v) in e.keys.iter().zip(&e.values) {
            check_len("entry key", self.d_k, k.len())?;
            check_len("entry value", self.d_v, v.len())?;
        }
        if let Some(last) = self.entries.last() {
            if e.orig_pos <= last.orig_pos {
                return Err(HamError::NonMonotonePosition {
                    last: last.orig_pos,
                    got: e.orig_pos,
                });
            }
        }
        Ok(())
    }

    /// Stores `entry` iff `selected`.
    pub fn append_if_selected(&mut self, entry: KvEntry, selected: bool) -> Result<()> {
        self.check_entry(&entry)?;
        if selected {
            self.entries.push(entry);
        }
        Ok(())
    }

    fn admissible<'a>(&'a self, pos: usize, doc_id: i64) -> impl Iterator<Item = &'a KvEntry> + 'a {
        self.entries
            .iter()
            .take_while(move |e| e.orig_pos <= pos)
            .filter(move |e| e.doc_id == doc_id && !e.padding)
    }

    /// Number of admissible entries for a query at (`pos`, `doc_id`).
    pub fn admissible_count(&self, pos: usize, doc_id: i64) -> usize {
        self.admissible(pos, doc_id).count()
    }

    /// Writes the cache as CSV: `orig_pos,doc_id,padding,k{h}_{i}…,v{h}_{j}…`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["orig_pos".to_string(), "doc_id".into(), "padding".into()];
        for h in 0..self.heads {
            header.extend((0..self.d_k).map(|i| format!("k{h}_{i}")));
        }
        for h in 0..self.heads {
            header.extend((0..self.d_v).map(|i| format!("v{h}_{i}")));
        }
        out.write_record(&header)?;
        for e in &self.entries {
            let mut row = vec![e.orig_pos.to_string(), e.doc_id.to_string(), u8::from(e.padding).to_string()];
            row.extend(e.keys.iter().flatten().map(f64::to_string));
            row.extend(e.values.iter().flatten().map(f64::to_string));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a file produced by [`write_csv`](Self::write_csv).
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        if header.len() < 3 || &header[0] != "orig_pos" || &header[1] != "doc_id" || &header[2] != "padding" {
            return Err(HamError::Format("cache header must start with orig_pos,doc_id,padding".into()));
        }
        let parse_col = |name: &str, prefix: char| -> Option<(usize, usize)> {
            let rest = name.strip_prefix(prefix)?;
            let (h, i) = rest.split_once('_')?;
            Some((h.parse().ok()?, i.parse().ok()?))
        };
        let (mut k_cols, mut v_cols) = (Vec::new(), Vec::new());
        for name in header.iter().skip(3) {
            if let Some(hi) = parse_col(name, 'k') {
                k_cols.push(hi);
            } else if let Some(hi) = parse_col(name, 'v') {
                v_cols.push(hi);
            } else {
                return Err(HamError::Format(format!("unknown cache column {name}")));
            }
        }
        let heads = k_cols.iter().map(|c| c.0 + 1).max().unwrap_or(0);
        let d_k = k_cols.iter().map(|c| c.1 + 1).max().unwrap_or(0);
        let d_v = v_cols.iter().map(|c| c.1 + 1).max().unwrap_or(0);
        if k_cols.len() != heads * d_k || v_cols.len() != heads * d_v {
            return Err(HamError::Format("ragged key/value columns".into()));
        }
        let mut cache = KvCache::new(heads, d_k, d_v);
        for rec in rdr.records() {
            let rec = rec?;
            let field = |i: usize| -> Result<&str> {
                rec.get(i).ok_or_else(|| HamError::Format(format!("missing column {i}")))
            };
            let num = |i: usize| -> Result<f64> {
                field(i)?
                    .parse::<f64>()
                    .map_err(|e| HamError::Format(format!("column {i}: {e}")))
            };
            let orig_pos = field(0)?
                .parse()
                .map_err(|e| HamError::Format(format!("orig_pos: {e}")))?;
            let doc_id = field(1)?
                .parse()
                .map_err(|e| HamError::Format(format!("doc_id: {e}")))?;
            let padding = field(2)? == "1";
            let mut col = 3;
            let mut take = |n: usize| -> Result<Vec<Vec<f64>>> {
                (0..heads)
                    .map(|_| {
                        let v = (col..col + n).map(&num).collect::<Result<Vec<_>>>();
                        col += n;
                        v
                    })
                    .collect()
            };
            let keys = take(d_k)?;
            let values = take(d_v)?;
            cache.append_if_selected(
                KvEntry {
                    orig_pos,
                    doc_id,
                    padding,
                    keys,
                    values,
                },
                true,
            )?;
        }
        Ok(cache)
    }
}

/// Softmax attention of per-head queries over the admissible entries, with
/// logits `(q·k)/sqrt(d_k)`.
pub fn sparse_attend(queries: &[Vec<f64>], pos: usize, doc_id: i64, cache: &KvCache) -> Result<Vec<Vec<f64>>> {
    check_len("query heads", cache.heads, queries.len())?;
    for q in queries {
        check_len("query", cache.d_k, q.len())?;
    }
    let scale = 1.0 / (cache.d_k as f64).sqrt();
    let admissible: Vec<&KvEntry> = cache.admissible(pos, doc_id).collect();
    let mut out = Vec::with_capacity(cache.heads);
    for (h, q) in queries.iter().enumerate() {
        let mut o = vec![0.0; cache.d_v];
        if admissible.is_empty() {
            out.push(o);
            continue;
        }
        let logits: Vec<f64> = admissible.iter().map(|e| dot(q, &e.keys[h]) * scale).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        for (w, e) in weights.iter().zip(&admissible) {
            let p = w / total;
            for (oi, vi) in o.iter_mut().zip(&e.values[h]) {
                *oi += p * vi;
            }
        }
        out.push(o);
    }
    Ok(out)
}

/// `ρ_KV = T_KV / T`.
pub fn usage(cache: &KvCache, total: usize) -> Result<f64> {
    if total < cache.len() {
        return Err(HamError::UsageExceedsLength {
            selected: cache.len(),
            total,
        });
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(cache.len() as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::max_abs_diff;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn entry(pos: usize, doc: i64, k: Vec<f64>, v: Vec<f64>) -> KvEntry {
        KvEntry {
            orig_pos: pos,
            doc_id: doc,
            padding: false,
            keys: vec![k],
            values: vec![v],
        }
    }

    fn rvec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn append_cases() {
        let mut c = KvCache::new(1, 2, 2);
        c.append_if_selected(entry(0, 0, vec![1.0, 0.0], vec![1.0, 1.0]), false).unwrap();
        assert!(c.is_empty());
        c.append_if_selected(entry(1, 0, vec![1.0, 0.0], vec![1.0, 1.0]), true).unwrap();
        assert_eq!(c.len(), 1);
        let err = c.append_if_selected(entry(1, 0, vec![1.0, 0.0], vec![1.0, 1.0]), true);
        assert!(matches!(err, Err(HamError::NonMonotonePosition { last: 1, got: 1 })));
        assert!(c
            .append_if_selected(entry(5, 0, vec![1.0], vec![1.0, 1.0]), true)
            .is_err());
    }

    #[test]
    fn mask_pattern_usage() {
        let mut c = KvCache::new(1, 2, 2);
        for (t, m) in [true, false, true, true].into_iter().enumerate() {
            c.append_if_selected(entry(t, 0, vec![0.0, 1.0], vec![1.0, 0.0]), m).unwrap();
        }
        assert_eq!(c.len(), 3);
        assert_eq!(usage(&c, 4).unwrap(), 0.75);
    }

    #[test]
    fn usage_cases() {
        let mut c = KvCache::new(1, 2, 2);
        assert_eq!(usage(&c, 16).unwrap(), 0.0);
        for t in 0..8 {
            c.append_if_selected(entry(t, 0, vec![0.0, 1.0], vec![1.0, 0.0]), true).unwrap();
        }
        assert_eq!(usage(&c, 16).unwrap(), 0.5);
        assert_eq!(usage(&c, 8).unwrap(), 1.0);
        assert!(usage(&c, 7).is_err());
    }

    #[test]
    fn empty_and_singleton() {
        let mut c = KvCache::new(1, 2, 3);
        assert_eq!(sparse_attend(&[vec![1.0, 2.0]], 4, 0, &c).unwrap(), vec![vec![0.0; 3]]);
        c.append_if_selected(entry(2, 0, vec![0.3, -0.2], vec![1.5, -2.0, 0.25]), true).unwrap();
        assert_eq!(sparse_attend(&[vec![1.0, 2.0]], 1, 0, &c).unwrap(), vec![vec![0.0; 3]]);
        assert_eq!(sparse_attend(&[vec![1.0, 2.0]], 2, 1, &c).unwrap(), vec![vec![0.0; 3]]);
        assert_eq!(
            sparse_attend(&[vec![1.0, 2.0]], 2, 0, &c).unwrap(),
            vec![vec![1.5, -2.0, 0.25]]
        );
        assert!(sparse_attend(&[vec![1.0, 2.0], vec![0.0, 0.0]], 2, 0, &c).is_err());
    }

    #[test]
    fn padding_is_excluded() {
        let mut c = KvCache::new(1, 2, 1);
        c.append_if_selected(entry(0, 0, vec![1.0, 0.0], vec![7.0]), true).unwrap();
        let mut pad = entry(1, 0, vec![5.0, 0.0], vec![-100.0]);
        pad.padding = true;
        c.append_if_selected(pad, true).unwrap();
        assert_eq!(sparse_attend(&[vec![1.0, 0.0]], 1, 0, &c).unwrap(), vec![vec![7.0]]);
    }

    #[test]
    fn full_selection_equals_dense_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (t_len, heads, dk, dv) = (12, 3, 4, 5);
        let keys: Vec<Vec<Vec<f64>>> = (0..t_len).map(|_| (0..heads).map(|_| rvec(&mut rng, dk)).collect()).collect();
        let vals: Vec<Vec<Vec<f64>>> = (0..t_len).map(|_| (0..heads).map(|_| rvec(&mut rng, dv)).collect()).collect();
        let qs: Vec<Vec<Vec<f64>>> = (0..t_len).map(|_| (0..heads).map(|_| rvec(&mut rng, dk)).collect()).collect();
        let mut c = KvCache::new(heads, dk, dv);
        for t in 0..t_len {
            c.append_if_selected(
                KvEntry {
                    orig_pos: t,
                    doc_id: 0,
                    padding: false,
                    keys: keys[t].clone(),
                    values: vals[t].clone(),
                },
                true,
            )
            .unwrap();
        }
        for t in 0..t_len {
            let got = sparse_attend(&qs[t], t, 0, &c).unwrap();
            for h in 0..heads {
                // dense causal softmax, no max shift
                let w: Vec<f64> = (0..=t)
                    .map(|i| (dot(&qs[t][h], &keys[i][h]) / (dk as f64).sqrt()).exp())
                    .collect();
                let z: f64 = w.iter().sum();
                let want: Vec<f64> = (0..dv)
                    .map(|j| (0..=t).map(|i| w[i] / z * vals[i][h][j]).sum())
                    .collect();
                assert!(max_abs_diff(&got[h], &want) < 1e-10);
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut c = KvCache::new(2, 2, 3);
        for t in [0, 3, 4, 9] {
            c.append_if_selected(
                KvEntry {
                    orig_pos: t,
                    doc_id: (t / 4) as i64,
                    padding: t == 9,
                    keys: vec![rvec(&mut rng, 2), rvec(&mut rng, 2)],
                    values: vec![rvec(&mut rng, 3), rvec(&mut rng, 3)],
                },
                true,
            )
            .unwrap();
        }
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let back = KvCache::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, c);
        assert!(KvCache::read_csv("a,b,c\n".as_bytes()).is_err());
    }
}
