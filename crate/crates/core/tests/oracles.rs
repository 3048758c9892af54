mod common;

use common::*;
use condaformer::attention::{rpe_bin, window_attention, DisassembledAttention, Merge, RpeTables};
use condaformer::conv::{sparse_conv, NeighborMap};
use condaformer::geometry::{assign_windows, SparseGrid, WindowMode, WindowSpec};
use condaformer::harness::suite::random_grid;
use condaformer::nn::ParamStore;
use condaformer::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn attention_matches_naive_reference() {
    let rep = attention_oracle(50, 11);
    assert_eq!(rep.windows, 50);
    assert!(rep.largest_window <= 12);
    assert!(rep.max_err <= 1e-12, "{rep:?}");
}

#[test]
fn sparse_convs_match_dense_reference() {
    let err = conv_oracle(30, 5);
    assert!(err <= 1e-12, "{err}");
}

fn tables(w: u32, width: usize, seed: u64) -> (ParamStore<f64>, RpeTables) {
    let mut store = ParamStore::new(0);
    let t = RpeTables::new(&mut store, "rpe", w, width).unwrap();
    randomize(&mut store, seed);
    (store, t)
}

#[test]
fn single_voxel_attends_to_itself() {
    let grid = SparseGrid::new(vec![[3, -2, 5]], 1.0, [0.0; 3]).unwrap();
    let wm = assign_windows(&grid, WindowSpec::cubic(4));
    let (store, t) = tables(4, 6, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (q, k, v) = (normal_matrix(1, 6, &mut rng), normal_matrix(1, 6, &mut rng), normal_matrix(1, 6, &mut rng));
    let (out, cache) = window_attention(&q, &k, &v, grid.coords(), &wm, 2, 3f64.sqrt(), &t.view(&store)).unwrap();
    assert_eq!(cache.row(0, 0, 0), &[1.0]);
    assert_eq!(cache.row(0, 1, 0), &[1.0]);
    let zero = rpe_bin(0, 4);
    for ch in 0..6 {
        let want = v[(0, ch)] + (0..3).map(|a| store.value(t.v[a])[(zero, ch)]).sum::<f64>();
        assert!((out[(0, ch)] - want).abs() <= 1e-15);
    }
}

#[test]
fn identical_keys_split_attention_evenly() {
    let grid = SparseGrid::new(vec![[0, 0, 0], [1, 0, 0]], 1.0, [0.0; 3]).unwrap();
    let wm = assign_windows(&grid, WindowSpec::cubic(2));
    let mut store = ParamStore::<f64>::new(0);
    let t = RpeTables::new(&mut store, "rpe", 2, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = normal_matrix(2, 4, &mut rng);
    let k = Matrix::from_fn(2, 4, |_, j| j as f64 - 1.5);
    let v = normal_matrix(2, 4, &mut rng);
    let (out, cache) = window_attention(&q, &k, &v, grid.coords(), &wm, 1, 2.0, &t.view(&store)).unwrap();
    for i in 0..2 {
        assert_eq!(cache.row(0, 0, i), &[0.5, 0.5]);
        for ch in 0..4 {
            assert!((out[(i, ch)] - 0.5 * (v[(0, ch)] + v[(1, ch)])).abs() <= 1e-15);
        }
    }
}

#[test]
fn attention_is_invariant_to_window_aligned_translation() {
    let w = 3;
    let grid = random_grid(40, 9, 4);
    let moved = grid.translated([3 * w, -2 * w, 5 * w]);
    let (store, t) = tables(w as u32, 6, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (q, k, v) = (normal_matrix(40, 6, &mut rng), normal_matrix(40, 6, &mut rng), normal_matrix(40, 6, &mut rng));
    for mode in [WindowMode::Cubic, WindowMode::PlaneXY, WindowMode::PlaneYZ, WindowMode::PlaneXZ] {
        for shifted in [false, true] {
            let spec = WindowSpec::new(mode, w as u32, 1, shifted).unwrap();
            let run = |g: &SparseGrid| {
                window_attention(&q, &k, &v, g.coords(), &assign_windows(g, spec), 2, 3f64.sqrt(), &t.view(&store)).unwrap().0
            };
            assert_eq!(run(&grid), run(&moved), "{mode:?} shifted={shifted}");
        }
    }
}

#[test]
fn convs_are_translation_invariant() {
    for seed in 0..5 {
        assert_eq!(conv_translation_err(seed), 0.0);
    }
}

#[test]
fn separate_tables_add_twice_the_shared_table_count() {
    for merge in [Merge::Split, Merge::NoSplit] {
        let mut store = ParamStore::<f64>::new(0);
        let shared = DisassembledAttention::new(&mut store, "a", 48, 3, 8, merge, true, false).unwrap();
        let separate = DisassembledAttention::new(&mut store, "b", 48, 3, 8, merge, false, false).unwrap();
        assert_eq!(separate.param_count(), shared.param_count() + 2 * shared.rpe_param_count());
        let width = if merge == Merge::Split { 16 } else { 48 };
        assert_eq!(shared.rpe_param_count(), rpe_count(8, width));
    }
}

#[test]
fn split_planes_use_a_third_of_channels_and_heads() {
    let mut store = ParamStore::<f64>::new(0);
    let a = DisassembledAttention::new(&mut store, "a", 96, 6, 8, Merge::Split, true, true).unwrap();
    for p in &a.planes {
        assert_eq!((p.width, p.heads), (32, 2));
        assert_eq!(store.value(p.q.weight).shape(), (96, 32));
    }
    assert!(DisassembledAttention::new(&mut store, "b", 48, 4, 8, Merge::Split, true, true).is_err());
}

#[test]
fn dense_references_agree_on_a_hand_case() {
    // One channel, center tap 2 and +x tap 1: each voxel gets 2·self + right neighbor.
    let grid = SparseGrid::new(vec![[0, 0, 0], [1, 0, 0], [3, 0, 0]], 1.0, [0.0; 3]).unwrap();
    let x = Matrix::from_rows(&[vec![1.0], vec![10.0], vec![100.0]]).unwrap();
    let mut w = Matrix::zeros(27, 1);
    w[(tap_of([0, 0, 0]), 0)] = 2.0;
    w[(tap_of([1, 0, 0]), 0)] = 1.0;
    let want = [12.0, 20.0, 200.0];
    assert_eq!(dense_conv(&grid, &x, &w, None).as_slice(), &want);
    assert_eq!(dense_depthwise(&grid, &x, &w).as_slice(), &want);
    assert_eq!(sparse_conv(&NeighborMap::new(&grid), &x, &w, None).unwrap().as_slice(), &want);
}
