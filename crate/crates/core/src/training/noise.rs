//! Range-proportional Gaussian input noise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::features::{FeatureBundle, Modality, Sequence};
use crate::tensor::Tensor;

fn column_std(rows: impl Iterator<Item = impl AsRef<[f64]>>, cols: usize, r: f64) -> Vec<f64> {
    let mut lo = vec![f64::INFINITY; cols];
    let mut hi = vec![f64::NEG_INFINITY; cols];
    for row in rows {
        for (c, &v) in row.as_ref().iter().enumerate() {
            lo[c] = lo[c].min(v);
            hi[c] = hi[c].max(v);
        }
    }
    lo.iter()
        .zip(&hi)
        .map(|(l, h)| if h > l { (h - l) * r } else { 0.0 })
        .collect()
}

fn perturb(values: &mut [f64], std: &[f64], rng: &mut ChaCha8Rng) {
    for chunk in values.chunks_mut(std.len().max(1)) {
        for (v, &s) in chunk.iter_mut().zip(std) {
            if s > 0.0 {
                *v += s * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
}

/// Adds `N(0, s_j)` to column `j`, `s_j = (max_j − min_j)·r` over the rows of `f`.
pub fn inject_noise(f: &Tensor, r: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut out = f.clone();
    if r <= 0.0 || f.numel() == 0 {
        return out;
    }
    let cols = f.cols();
    let std = column_std((0..f.rows()).map(|i| f.row(i)), cols, r);
    perturb(out.values_mut(), &std, rng);
    out
}

/// Batch form: for each modality, column ranges are taken over the real rows
/// of every bundle in the batch, and each row gets its own draw.
pub fn inject_noise_batch(batch: &mut [FeatureBundle], r: f64, rng: &mut ChaCha8Rng) {
    if r <= 0.0 {
        return;
    }
    for m in Modality::ALL {
        let seqs: Vec<&Sequence> = batch.iter().filter_map(|b| b.get(m)).collect();
        let Some(first) = seqs.first() else { continue };
        let cols = first.values.cols();
        let live_rows = seqs.iter().flat_map(|s| {
            (0..s.len()).filter(|&i| s.mask[i]).map(move |i| s.values.row(i))
        });
        let std = column_std(live_rows, cols, r);
        for b in batch.iter_mut() {
            if let Some(seq) = b.get_mut(m) {
                let mask = seq.mask.clone();
                for (i, row) in seq.values.values_mut().chunks_mut(cols.max(1)).enumerate() {
                    if mask[i] {
                        perturb(row, &std, rng);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_ratio_and_constant_columns_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Tensor::from_rows(&[[1.0, 5.0], [3.0, 5.0], [2.0, 5.0]]).unwrap();
        assert_eq!(inject_noise(&f, 0.0, &mut rng), f);
        let noisy = inject_noise(&f, 0.5, &mut rng);
        for i in 0..3 {
            assert_eq!(noisy.get2(i, 1), 5.0);
        }
        assert_ne!(noisy.get2(0, 0), 1.0);
    }

    #[test]
    fn empirical_std_matches_range_times_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let v: Vec<f64> = (0..n).map(|i| if i == 0 { 0.0 } else if i == 1 { 10.0 } else { 5.0 }).collect();
        let f = Tensor::new(vec![n, 1], v.clone()).unwrap();
        let noisy = inject_noise(&f, 0.1, &mut rng);
        let d: Vec<f64> = noisy.values().iter().zip(&v).map(|(a, b)| a - b).collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((sd - 1.0).abs() < 0.02, "sd {sd}");
    }
}
