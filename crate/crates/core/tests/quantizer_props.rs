mod common;

use common::{gaussian_matrix, random_stack, rng};
use proptest::prelude::*;
use vqkv_core::matrix::{norm, squared_distance};
use vqkv_core::{CacheKind, Codebook, CodebookStack, Matrix};

fn stack_strategy() -> impl Strategy<Value = (u64, usize, Vec<usize>)> {
    (
        any::<u64>(),
        1usize..12,
        prop::collection::vec(1usize..24, 1..5),
    )
}

/// Same stack with every stage's entry `pick % S` appended again at the end.
fn with_duplicates(stack: &CodebookStack, pick: usize) -> CodebookStack {
    let stages = stack
        .stages()
        .iter()
        .map(|book| {
            let mut entries = book.entries().clone();
            let dup = entries.row(pick % book.size()).to_vec();
            entries.push_row(&dup).unwrap();
            Codebook::new(entries, book.projection().clone()).unwrap()
        })
        .collect();
    CodebookStack::new(stages, stack.kind()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reconstruction_plus_residual_is_input(
        (seed, dim, sizes) in stack_strategy(),
        scale in 0.01f64..100.0,
    ) {
        let mut r = rng(seed);
        let stack = random_stack(&mut r, dim, &sizes, CacheKind::Key);
        let xs = gaussian_matrix(&mut r, 8, dim, scale);
        for x in xs.iter_rows() {
            let (codes, residual) = stack.quantize(x).unwrap();
            let recon = stack.reconstruct(&codes).unwrap();
            let sum: Vec<f64> = recon.iter().zip(&residual).map(|(a, b)| a + b).collect();
            prop_assert!(squared_distance(&sum, x).sqrt() <= 1e-5 * norm(x).max(1e-300));
            // final residual norm is the reconstruction error
            let err = squared_distance(x, &recon).sqrt();
            prop_assert!((norm(&residual) - err).abs() <= 1e-6 * err.max(1e-12));
        }
    }

    #[test]
    fn quantize_is_deterministic((seed, dim, sizes) in stack_strategy()) {
        let mut r = rng(seed);
        let stack = random_stack(&mut r, dim, &sizes, CacheKind::Value);
        let x = gaussian_matrix(&mut r, 1, dim, 1.0);
        let first = stack.quantize(x.row(0)).unwrap();
        let second = stack.quantize(x.row(0)).unwrap();
        prop_assert_eq!(first, second);
    }

    #[test]
    fn duplicated_entries_do_not_change_codes(
        (seed, dim, sizes) in stack_strategy(),
        pick in any::<usize>(),
    ) {
        let mut r = rng(seed);
        let stack = random_stack(&mut r, dim, &sizes, CacheKind::Key);
        let doubled = with_duplicates(&stack, pick);
        let xs = gaussian_matrix(&mut r, 6, dim, 1.0);
        for x in xs.iter_rows() {
            prop_assert_eq!(stack.quantize(x).unwrap().0, doubled.quantize(x).unwrap().0);
        }
        // a vector equal to the duplicated entry resolves to the original index
        let target = stack.stages()[0].effective_entry(pick % sizes[0]).to_vec();
        let (index, _) = doubled.stages()[0].nearest_entry(&target).unwrap();
        prop_assert!(index <= pick % sizes[0]);
    }

    #[test]
    fn batch_matches_per_row(
        (seed, dim, sizes) in stack_strategy(),
        rows in 0usize..40,
        block in 1usize..9,
    ) {
        let mut r = rng(seed);
        let stack = random_stack(&mut r, dim, &sizes, CacheKind::Key).with_block_entries(block);
        let xs = gaussian_matrix(&mut r, rows, dim, 1.5);
        let (codes, norms) = stack.quantize_batch(&xs).unwrap();
        prop_assert_eq!(codes.rows(), rows);
        for (i, x) in xs.iter_rows().enumerate() {
            let (single, residual) = stack.quantize(x).unwrap();
            prop_assert_eq!(&codes.row(i), &single);
            prop_assert_eq!(norms[i], norm(&residual));
            for (s, &index) in single.indices().iter().enumerate() {
                prop_assert!((index as usize) < sizes[s]);
            }
        }
    }

    #[test]
    fn blockwise_reconstruction_matches_full(
        (seed, dim, sizes) in stack_strategy(),
        rows in 0usize..30,
        cuts in prop::collection::vec(any::<prop::sample::Index>(), 0..6),
    ) {
        let mut r = rng(seed);
        let stack = random_stack(&mut r, dim, &sizes, CacheKind::Value);
        let xs = gaussian_matrix(&mut r, rows, dim, 1.0);
        let (codes, _) = stack.quantize_batch(&xs).unwrap();
        let full = stack.reconstruct_block(&codes, 0..rows).unwrap();

        let mut bounds: Vec<usize> = cuts.iter().map(|c| c.index(rows + 1)).collect();
        bounds.extend([0, rows]);
        bounds.sort_unstable();
        let mut joined = Matrix::empty(dim);
        for w in bounds.windows(2) {
            joined.extend(&stack.reconstruct_block(&codes, w[0]..w[1]).unwrap()).unwrap();
        }
        prop_assert_eq!(&joined, &full);
        for (i, row) in full.iter_rows().enumerate() {
            let single = stack.reconstruct(&codes.row(i)).unwrap();
            prop_assert_eq!(row, single.as_slice());
        }
    }
}

#[test]
fn blocks_of_four_over_ten_rows() {
    let mut r = rng(10);
    let stack = random_stack(&mut r, 5, &[7, 3, 9], CacheKind::Key);
    let xs = gaussian_matrix(&mut r, 10, 5, 1.0);
    let (codes, _) = stack.quantize_batch(&xs).unwrap();
    let full = stack.reconstruct_block(&codes, 0..10).unwrap();
    let mut joined = Matrix::empty(5);
    for start in (0..10).step_by(4) {
        joined
            .extend(
                &stack
                    .reconstruct_block(&codes, start..(start + 4).min(10))
                    .unwrap(),
            )
            .unwrap();
    }
    assert_eq!(joined, full);
    assert!(stack.reconstruct_block(&codes, 3..3).unwrap().is_empty());
    assert!(stack.reconstruct_block(&codes, 8..11).is_err());
}

#[test]
fn sixteen_by_eight_batch() {
    let mut r = rng(3);
    let stack = random_stack(&mut r, 8, &[4, 4, 4], CacheKind::Value);
    let xs = gaussian_matrix(&mut r, 16, 8, 1.0);
    let (codes, _) = stack.quantize_batch(&xs).unwrap();
    for (i, x) in xs.iter_rows().enumerate() {
        assert_eq!(codes.row(i), stack.quantize(x).unwrap().0);
    }
}

#[test]
fn file_round_trip_preserves_codes() {
    let mut r = rng(4);
    let stack = random_stack(&mut r, 6, &[5, 5], CacheKind::Key)
        .rounded_to_f32()
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stack.rsvq");
    stack.save(&path).unwrap();
    let loaded = CodebookStack::load(&path).unwrap();
    assert_eq!(loaded.content_hash(), stack.content_hash());
    let xs = gaussian_matrix(&mut r, 20, 6, 1.0);
    assert_eq!(
        stack.quantize_batch(&xs).unwrap(),
        loaded.quantize_batch(&xs).unwrap()
    );
}
