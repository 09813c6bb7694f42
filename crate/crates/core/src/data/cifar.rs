//! CIFAR-100 binary format.
//!
//! Each record is 3074 bytes: coarse label, fine label, then 3072 pixel bytes
//! as three 32×32 row-major planes (R, G, B).

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetRecord;
use crate::error::{Error, Result};
use crate::taxonomy::Taxonomy;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const PIXEL_BYTES: usize = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;
pub const RECORD_BYTES: usize = 2 + PIXEL_BYTES;
pub const NUM_FINE: usize = 100;
pub const NUM_COARSE: usize = 20;
/// Images per fine class in the canonical training file.
pub const TRAIN_PER_CLASS: usize = 500;
pub const TRAIN_RECORDS: usize = 50_000;

pub fn parse_cifar100(bytes: &[u8]) -> Result<Vec<DatasetRecord>> {
    let whole = bytes.len() - bytes.len() % RECORD_BYTES;
    if whole != bytes.len() {
        return Err(Error::Format {
            offset: whole as u64,
            message: format!(
                "truncated record: file length {} is not a multiple of {RECORD_BYTES}",
                bytes.len()
            ),
        });
    }
    bytes
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            let base = (i * RECORD_BYTES) as u64;
            let (coarse, fine) = (rec[0] as usize, rec[1] as usize);
            if coarse >= NUM_COARSE {
                return Err(Error::Format {
                    offset: base,
                    message: format!("coarse label {coarse} out of range"),
                });
            }
            if fine >= NUM_FINE {
                return Err(Error::Format {
                    offset: base + 1,
                    message: format!("fine label {fine} out of range"),
                });
            }
            Ok(DatasetRecord {
                image: rec[2..].to_vec(),
                size: IMAGE_SIZE,
                finer_label: fine,
                coarse_label: Some(coarse),
            })
        })
        .collect()
}

pub fn read_cifar100_bin(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar100(&bytes)
}

/// Serializes records in the same layout. Missing coarse labels are taken
/// from `taxonomy` when given.
pub fn encode_cifar100(records: &[DatasetRecord], taxonomy: Option<&Taxonomy>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(records.len() * RECORD_BYTES);
    for (i, r) in records.iter().enumerate() {
        if r.size != IMAGE_SIZE || r.image.len() != PIXEL_BYTES {
            return Err(Error::validation(format!(
                "record {i} is {0}×{0}; the binary layout needs 32×32",
                r.size
            )));
        }
        let coarse = match (r.coarse_label, taxonomy) {
            (Some(c), _) => c,
            (None, Some(t)) => t.finer_to_super(r.finer_label)?,
            (None, None) => {
                return Err(Error::validation(format!("record {i} has no coarse label")))
            }
        };
        if coarse > u8::MAX as usize || r.finer_label > u8::MAX as usize {
            return Err(Error::validation(format!("record {i} labels do not fit in a byte")));
        }
        out.push(coarse as u8);
        out.push(r.finer_label as u8);
        out.extend_from_slice(&r.image);
    }
    Ok(out)
}

pub fn write_cifar100_bin(
    path: impl AsRef<Path>,
    records: &[DatasetRecord],
    taxonomy: Option<&Taxonomy>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_cifar100(records, taxonomy)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub total: usize,
    pub consistent: usize,
    /// Fraction of records whose file coarse label equals the taxonomy parent
    /// of their fine label; 1.0 for an empty list.
    pub consistency: f64,
    /// Record indices that disagree or carry no coarse label.
    pub offending: Vec<usize>,
}

pub fn check_coarse_consistency(records: &[DatasetRecord], t: &Taxonomy) -> ConsistencyReport {
    let offending: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| match r.coarse_label {
            Some(c) => t.finer_to_super(r.finer_label).map_or(true, |s| s != c),
            None => true,
        })
        .map(|(i, _)| i)
        .collect();
    let total = records.len();
    let consistent = total - offending.len();
    ConsistencyReport {
        total,
        consistent,
        consistency: if total == 0 { 1.0 } else { consistent as f64 / total as f64 },
        offending,
    }
}

/// Seeded sample of `per_finer` records for every finer class under `supers`,
/// re-indexed densely against the returned sub-taxonomy.
pub fn subset(
    records: &[DatasetRecord],
    t: &Taxonomy,
    supers: &[&str],
    per_finer: usize,
    seed: u64,
) -> Result<(Vec<DatasetRecord>, Taxonomy)> {
    let (sub, remap) = t.restrict(supers)?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); sub.num_finer()];
    for (i, r) in records.iter().enumerate() {
        if let Some(&new) = remap.get(&r.finer_label) {
            by_class[new].push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(per_finer * sub.num_finer());
    for (new, pool) in by_class.iter().enumerate() {
        if per_finer > pool.len() {
            return Err(Error::validation(format!(
                "per_finer = {per_finer} but class \"{}\" has only {} records",
                sub.finer_name(new).unwrap_or_default(),
                pool.len()
            )));
        }
        chosen.extend(sample(&mut rng, pool.len(), per_finer).into_iter().map(|k| pool[k]));
    }
    chosen.sort_unstable();
    let out = chosen
        .into_iter()
        .map(|i| {
            let r = &records[i];
            let finer = remap[&r.finer_label];
            DatasetRecord {
                image: r.image.clone(),
                size: r.size,
                finer_label: finer,
                coarse_label: Some(sub.finer_to_super(finer).expect("dense remap")),
            }
        })
        .collect();
    Ok((out, sub))
}
