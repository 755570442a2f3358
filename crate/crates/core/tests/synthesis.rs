mod common;

use common::*;
use idsynth::synthesis::*;
use idsynth::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn one(d: &idsynth::datasets::LabeledDataset, i: usize) -> Tensor<f32> {
    d.batch(&[i])
}

#[test]
fn morph_endpoints_equal_recombination() {
    let data = mini_dataset(50);
    let state = trained_mini(&data, 40);
    let (xs, a1, a2) = (one(&data, 0), one(&data, 7), one(&data, 13));
    let m = morph_attributes(&state, &xs, &a1, &a2, 5).unwrap();
    assert_eq!(m.alphas, [0.0, 0.25, 0.5, 0.75, 1.0]);
    assert_eq!(m.frames[0], recombine(&state, &xs, &a2, None).unwrap());
    assert_eq!(m.frames[4], recombine(&state, &xs, &a1, None).unwrap());
    let fi = m.codes[0].identity();
    for c in &m.codes {
        assert_eq!(c.identity(), fi);
    }
    assert!(matches!(morph_attributes(&state, &xs, &a1, &a2, 1), Err(Error::Validation(_))));
}

#[test]
fn unseen_identities_recombine_without_labels() {
    let train = mini_dataset(50);
    let state = trained_mini(&train, 40);
    let unseen = mini_dataset(999);
    let xs = unseen.batch(&[0, 6, 12]);
    let xa = train.batch(&[1, 2, 3]);
    let out = recombine(&state, &xs, &xa, None).unwrap();
    assert_eq!(out.shape(), xs.shape());
    assert!(out.data().iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
}

#[test]
fn grid_cells_match_single_recombinations() {
    let data = mini_dataset(50);
    let state = trained_mini(&data, 40);
    let subjects = data.batch(&[0, 6]);
    let attrs = data.batch(&[12, 18, 20]);
    let grid = recombination_grid(&state, &subjects, &attrs).unwrap();
    assert_eq!((grid.len(), grid[0].len()), (2, 3));
    let single = recombine(&state, &one(&data, 6), &one(&data, 18), None).unwrap();
    for (a, b) in grid[1][1].iter().zip(single.data()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn sampled_codes_differ_from_the_mean() {
    let data = mini_dataset(50);
    let state = trained_mini(&data, 40);
    let (xs, xa) = (one(&data, 0), one(&data, 9));
    let mean = latent_code(&state, &xs, &xa, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let drawn = latent_code(&state, &xs, &xa, Some(&mut rng)).unwrap();
    assert_eq!(mean.identity(), drawn.identity());
    assert_ne!(mean.attribute(), drawn.attribute());
    assert_eq!(reconstruct(&state, &xs).unwrap(), recombine(&state, &xs, &xs, None).unwrap());
}
