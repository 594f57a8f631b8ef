use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::FeatureMatrix;
use crate::numerics::Tensor;

/// Snippet indices for a training crop of length `t_train` from `t` snippets.
///
/// Longer videos keep a sorted uniform sample without replacement; shorter ones
/// keep every snippet and pad with uniformly resampled repeats. Output is
/// always ascending.
pub fn subsample_indices(t: usize, t_train: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = if t <= t_train {
        let mut v: Vec<usize> = (0..t).collect();
        v.extend((t..t_train).map(|_| rng.random_range(0..t)));
        v
    } else {
        sample(&mut rng, t, t_train).into_vec()
    };
    idx.sort_unstable();
    idx
}

fn gather(fm: &FeatureMatrix, idx: &[usize]) -> FeatureMatrix {
    let d = fm.dim();
    let data = idx.iter().flat_map(|&i| fm.values.row(i).iter().copied()).collect();
    FeatureMatrix {
        video_id: fm.video_id.clone(),
        modality: fm.modality,
        values: Tensor::new(vec![idx.len(), d], data).expect("gathered shape"),
    }
}

/// Applies one shared index set to both modalities.
pub fn subsample_snippets(
    rgb: &FeatureMatrix,
    flow: &FeatureMatrix,
    t_train: usize,
    seed: u64,
) -> (FeatureMatrix, FeatureMatrix, Vec<usize>) {
    let idx = subsample_indices(rgb.snippets(), t_train.max(1), seed);
    (gather(rgb, &idx), gather(flow, &idx), idx)
}
