use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetRecord;
use crate::tensor::{Real, Tensor};

/// Per-channel statistics applied as `(pixel / 255 − mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    /// Published per-channel statistics of the CIFAR-100 training split.
    pub const CIFAR100_TRAIN: Normalization = Normalization {
        mean: [0.5071, 0.4865, 0.4409],
        std: [0.2673, 0.2564, 0.2762],
    };

    /// Computes the statistics from records (population std, floored at 1e-3).
    pub fn from_records(records: &[DatasetRecord]) -> Self {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut count = 0usize;
        for r in records {
            let plane = r.size * r.size;
            for c in 0..3 {
                for &p in &r.image[c * plane..(c + 1) * plane] {
                    let v = p as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += plane;
        }
        if count == 0 {
            return Self {
                mean: [0.0; 3],
                std: [1.0; 3],
            };
        }
        let n = count as f64;
        let mean = sum.map(|s| s / n);
        let mut std = [0.0; 3];
        for c in 0..3 {
            std[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt().max(1e-3);
        }
        Self { mean, std }
    }
}

/// Pads by 4 with zeros, crops back at offset `(dy, dx)` in `[0, 8]`, and
/// optionally mirrors columns. Operates on one normalized `[3, size, size]` image.
pub fn augment_image<T: Real>(img: &[T], size: usize, dy: usize, dx: usize, flip: bool) -> Vec<T> {
    const PAD: isize = 4;
    let mut out = vec![T::zero(); img.len()];
    for c in 0..3 {
        for y in 0..size {
            let sy = y as isize + dy as isize - PAD;
            if sy < 0 || sy >= size as isize {
                continue;
            }
            for x in 0..size {
                let sx0 = x as isize + dx as isize - PAD;
                if sx0 < 0 || sx0 >= size as isize {
                    continue;
                }
                let ox = if flip { size - 1 - x } else { x };
                out[(c * size + y) * size + ox] = img[(c * size + sy as usize) * size + sx0 as usize];
            }
        }
    }
    out
}

/// One mini-batch: `[N, 3, S, S]` images, finer labels and source record indices.
#[derive(Debug, Clone)]
pub struct Batch<T: Real> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Seeded epoch ordering and preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStream {
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Pad-4 random crop plus horizontal flip; training only.
    pub augment: bool,
    pub normalization: Normalization,
}

impl BatchStream {
    pub fn training(batch_size: usize, seed: u64, augment: bool, normalization: Normalization) -> Self {
        Self {
            batch_size,
            seed,
            shuffle: true,
            augment,
            normalization,
        }
    }

    pub fn evaluation(batch_size: usize, normalization: Normalization) -> Self {
        Self {
            batch_size,
            seed: 0,
            shuffle: false,
            augment: false,
            normalization,
        }
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64 + 1);
        rng
    }

    /// Record visiting order for `epoch`; a permutation of `0..n`.
    pub fn order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        if self.shuffle {
            idx.shuffle(&mut self.epoch_rng(epoch));
        }
        idx
    }

    pub fn normalize<T: Real>(&self, r: &DatasetRecord) -> Vec<T> {
        let plane = r.size * r.size;
        let nm = &self.normalization;
        r.image
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let c = i / plane;
                T::from_f64_lossy((p as f64 / 255.0 - nm.mean[c]) / nm.std[c])
            })
            .collect()
    }

    /// All batches of one epoch. The last short batch is kept.
    pub fn batches<T: Real>(&self, records: &[DatasetRecord], epoch: usize) -> Vec<Batch<T>> {
        assert!(self.batch_size > 0, "batch size must be positive");
        let order = self.order(records.len(), epoch);
        let mut aug_rng = self.epoch_rng(epoch);
        aug_rng.set_word_pos(1 << 40);
        order
            .chunks(self.batch_size)
            .map(|chunk| {
                let size = records[chunk[0]].size;
                let mut data = Vec::with_capacity(chunk.len() * 3 * size * size);
                for &i in chunk {
                    let img = self.normalize::<T>(&records[i]);
                    if self.augment {
                        let dy = aug_rng.random_range(0..=8);
                        let dx = aug_rng.random_range(0..=8);
                        let flip = aug_rng.random_bool(0.5);
                        data.extend(augment_image(&img, size, dy, dx, flip));
                    } else {
                        data.extend(img);
                    }
                }
                Batch {
                    images: Tensor::from_vec(&[chunk.len(), 3, size, size], data)
                        .expect("uniform record sizes"),
                    labels: chunk.iter().map(|&i| records[i].finer_label).collect(),
                    indices: chunk.to_vec(),
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(n: usize) -> Vec<DatasetRecord> {
        (0..n)
            .map(|i| DatasetRecord {
                image: (0..3 * 4 * 4).map(|p| ((p + i) % 256) as u8).collect(),
                size: 4,
                finer_label: i % 7,
                coarse_label: None,
            })
            .collect()
    }

    #[test]
    fn short_final_batch_is_kept() {
        let recs = records(300);
        let s = BatchStream::training(128, 1, false, Normalization::CIFAR100_TRAIN);
        let sizes: Vec<usize> = s.batches::<f32>(&recs, 0).iter().map(|b| b.labels.len()).collect();
        assert_eq!(sizes, vec![128, 128, 44]);
    }

    #[test]
    fn epochs_are_permutations_and_reproducible() {
        let recs = records(50);
        let s = BatchStream::training(8, 5, true, Normalization::CIFAR100_TRAIN);
        let mut seen: Vec<usize> = s.batches::<f32>(&recs, 3).iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..50).collect::<Vec<_>>());
        assert_ne!(s.order(50, 0), s.order(50, 1));
        let a = s.batches::<f32>(&recs, 2);
        let b = s.batches::<f32>(&recs, 2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.images, y.images);
        }
    }

    #[test]
    fn flip_reverses_columns() {
        let img: Vec<f64> = (0..3 * 5 * 5).map(|v| v as f64).collect();
        let flipped = augment_image(&img, 5, 4, 4, true);
        for c in 0..3 {
            for y in 0..5 {
                for x in 0..5 {
                    assert_eq!(flipped[(c * 5 + y) * 5 + x], img[(c * 5 + y) * 5 + (4 - x)]);
                }
            }
        }
        assert_eq!(augment_image(&img, 5, 4, 4, false), img);
    }

    #[test]
    fn crop_shifts_with_zero_fill() {
        let img = vec![1.0f64; 3 * 4 * 4];
        let shifted = augment_image(&img, 4, 0, 4, false);
        // rows 0..4 shifted down by 4 → entirely zero padding
        assert!(shifted.iter().all(|&v| v == 0.0));
        let shifted = augment_image(&img, 4, 5, 4, false);
        assert_eq!(shifted[(0 * 4 + 3) * 4], 0.0);
        assert_eq!(shifted[0], 1.0);
    }

    #[test]
    fn normalization_from_constant_records() {
        let recs = vec![DatasetRecord {
            image: vec![255; 3 * 2 * 2],
            size: 2,
            finer_label: 0,
            coarse_label: None,
        }];
        let n = Normalization::from_records(&recs);
        assert_eq!(n.mean, [1.0; 3]);
        assert_eq!(n.std, [1e-3; 3]);
    }
}
