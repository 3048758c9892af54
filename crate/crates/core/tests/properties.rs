mod common;

use std::collections::BTreeMap;

use common::*;
use condaformer::attention::{rpe_bin, window_attention, RpeTables};
use condaformer::geometry::{
    assign_windows, format_scene, parse_scene, pool_grid, unpool, voxelize, Coord, PointCloud, SparseGrid,
    WindowSpec,
};
use condaformer::harness::{miou, rel_err};
use condaformer::nn::functional::{cross_entropy, gelu, softmax_in_place};
use condaformer::nn::{checkpoint, ParamKind, ParamStore};
use condaformer::Matrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid_strategy(max_extent: i32, max_voxels: usize) -> impl Strategy<Value = SparseGrid> {
    prop::collection::btree_set((-max_extent..max_extent, -max_extent..max_extent, -max_extent..max_extent), 1..max_voxels)
        .prop_map(|s| {
            let mut c: Vec<Coord> = s.into_iter().map(|(x, y, z)| [x, y, z]).collect();
            c.sort_by_key(|c| (c[2], c[1], c[0]));
            SparseGrid::new(c, 1.0, [0.0; 3]).unwrap()
        })
}

#[test]
fn window_maps_partition_dense_grids_exhaustively() {
    // Extents 1..=8, windows 1..=n+1, two slabs, two shifts, four modes.
    let checked = dense_window_check(8).unwrap();
    assert_eq!(checked, (1..=8).map(|n| (n + 1) * 2 * 2 * 4).sum::<usize>());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn window_maps_partition_sparse_grids(
        grid in grid_strategy(9, 80),
        w in 1u32..6,
        t in 1u32..3,
        shifted in any::<bool>(),
    ) {
        for mode in MODES {
            let spec = WindowSpec::new(mode, w, t, shifted).unwrap();
            prop_assert!(check_partition(&grid, &assign_windows(&grid, spec), &spec).is_ok());
        }
    }

    #[test]
    fn pooling_maps_children_to_halved_coordinates(grid in grid_strategy(9, 80)) {
        let (coarse, map) = pool_grid(&grid).unwrap();
        prop_assert_eq!(map.child_rows(), grid.len());
        prop_assert_eq!(map.parent_rows(), coarse.len());
        let mut children = vec![0; coarse.len()];
        for r in 0..grid.len() {
            let c = grid.coord(r);
            let p = map.parent_of(r);
            prop_assert_eq!(coarse.coord(p), [c[0].div_euclid(2), c[1].div_euclid(2), c[2].div_euclid(2)]);
            children[p] += 1;
        }
        prop_assert!(children.iter().all(|&n| (1..=8).contains(&n)));
        let x = Matrix::from_fn(coarse.len(), 2, |i, j| (i * 2 + j) as f64);
        let up = unpool(&x, &map).unwrap();
        for r in 0..grid.len() {
            prop_assert_eq!(up.row(r), x.row(map.parent_of(r)));
        }
    }

    #[test]
    fn voxelization_matches_direct_flooring(
        pts in prop::collection::vec((0.0f64..3.0, 0.0f64..3.0, 0.0f64..3.0, -1i64..3), 1..120),
        voxel in 0.2f64..1.0,
    ) {
        let positions: Vec<[f64; 3]> = pts.iter().map(|p| [p.0, p.1, p.2]).collect();
        let labels: Vec<i64> = pts.iter().map(|p| p.3).collect();
        let feats = Matrix::from_fn(pts.len(), 1, |i, _| i as f64);
        let cloud = PointCloud::new(positions.clone(), feats, Some(labels.clone())).unwrap();
        let v = voxelize(&cloud, voxel).unwrap();
        let lo: Vec<f64> = (0..3).map(|a| positions.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min)).collect();
        let mut members: BTreeMap<Coord, Vec<usize>> = BTreeMap::new();
        for (i, p) in positions.iter().enumerate() {
            let c: Coord = [0, 1, 2].map(|a| ((p[a] - lo[a]) / voxel).floor() as i32);
            prop_assert_eq!(v.grid.coord(v.point_to_voxel[i]), c);
            members.entry(c).or_default().push(i);
        }
        prop_assert_eq!(v.grid.len(), members.len());
        for (c, m) in &members {
            let r = v.grid.row_of(c).unwrap();
            let mean = m.iter().map(|&i| i as f64).sum::<f64>() / m.len() as f64;
            prop_assert!((v.features[(r, 0)] - mean).abs() <= 1e-12);
            let mut votes = BTreeMap::new();
            for &i in m {
                if labels[i] >= 0 {
                    *votes.entry(labels[i]).or_insert(0) += 1;
                }
            }
            let best = votes.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map_or(-1, |(l, _)| *l);
            prop_assert_eq!(v.labels[r], best);
        }
    }

    #[test]
    fn attention_rows_are_distributions(grid in grid_strategy(6, 40), w in 1u32..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = grid.len();
        let mut store = ParamStore::<f64>::new(0);
        let t = RpeTables::new(&mut store, "rpe", w, 4).unwrap();
        randomize(&mut store, seed);
        let (q, k, v) = (normal_matrix(n, 4, &mut rng), normal_matrix(n, 4, &mut rng), normal_matrix(n, 4, &mut rng));
        let wm = assign_windows(&grid, WindowSpec::cubic(w));
        let (_, cache) = window_attention(&q, &k, &v, grid.coords(), &wm, 2, 2f64.sqrt(), &t.view(&store)).unwrap();
        for (gi, g) in wm.groups().iter().enumerate() {
            for h in 0..2 {
                for i in 0..g.rows.len() {
                    let row = cache.row(gi, h, i);
                    prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn rpe_bins_stay_in_range(rel in -100i32..100, w in 1i32..20) {
        let b = rpe_bin(rel, w);
        prop_assert!(b <= 2 * w as usize);
        if rel.abs() <= w {
            prop_assert_eq!(b as i32, rel + w);
        }
    }

    #[test]
    fn softmax_is_shift_invariant_distribution(xs in prop::collection::vec(-50.0f64..50.0, 1..20), c in -100.0f64..100.0) {
        let mut a = xs.clone();
        let mut b: Vec<f64> = xs.iter().map(|x| x + c).collect();
        softmax_in_place(&mut a);
        softmax_in_place(&mut b);
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn gelu_is_bounded_by_relu(x in -20.0f64..20.0) {
        let g = gelu(&Matrix::from_vec(1, 1, vec![x]).unwrap())[(0, 0)];
        prop_assert!(g <= x.max(0.0) + 1e-15);
        prop_assert!(g >= x.min(0.0) - 0.17);
    }

    #[test]
    fn cross_entropy_is_non_negative(logits in prop::collection::vec(-10.0f64..10.0, 12), labels in prop::collection::vec(-1i64..4, 3)) {
        let m = Matrix::from_vec(3, 4, logits).unwrap();
        match cross_entropy(&m, &labels) {
            Ok((l, g)) => {
                prop_assert!(l >= 0.0);
                for r in 0..3 {
                    prop_assert!(g.row(r).iter().sum::<f64>().abs() <= 1e-12);
                }
            }
            Err(_) => prop_assert!(labels.iter().all(|&l| l < 0)),
        }
    }

    #[test]
    fn miou_matches_confusion_counting(pairs in prop::collection::vec((0i64..5, -1i64..5), 1..300)) {
        let pred: Vec<i64> = pairs.iter().map(|p| p.0).collect();
        let gt: Vec<i64> = pairs.iter().map(|p| p.1).collect();
        match miou(&pred, &gt, 5) {
            Err(_) => prop_assert!(gt.iter().all(|&g| g < 0)),
            Ok(m) => {
                let mut ious = Vec::new();
                for c in 0..5 {
                    let (mut tp, mut fp, mut fnn) = (0, 0, 0);
                    for (&p, &g) in pred.iter().zip(&gt) {
                        if g < 0 {
                            continue;
                        }
                        match (p == c, g == c) {
                            (true, true) => tp += 1,
                            (true, false) => fp += 1,
                            (false, true) => fnn += 1,
                            _ => {}
                        }
                    }
                    if tp + fp + fnn > 0 {
                        ious.push(tp as f64 / (tp + fp + fnn) as f64);
                    }
                }
                let want = ious.iter().sum::<f64>() / ious.len() as f64;
                prop_assert!((m.miou - want).abs() <= 1e-12);
                let labeled = gt.iter().filter(|&&g| g >= 0).count();
                let correct = pred.iter().zip(&gt).filter(|(p, g)| p == g).count();
                prop_assert!((m.overall_accuracy - correct as f64 / labeled as f64).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn rel_err_is_symmetric_and_bounded(a in -1e3f64..1e3, b in -1e3f64..1e3) {
        prop_assert_eq!(rel_err(a, b), rel_err(b, a));
        prop_assert!(rel_err(a, b) <= 2.0);
    }

    #[test]
    fn checkpoints_round_trip(vals in prop::collection::vec(-1e6f64..1e6, 7)) {
        let mut store = ParamStore::<f64>::new(0);
        let a = store.register("a.weight", &[2, 2], ParamKind::Weight).unwrap();
        let b = store.register("a.bias", &[3], ParamKind::Bias).unwrap();
        store.value_mut(a).as_mut_slice().copy_from_slice(&vals[..4]);
        store.value_mut(b).as_mut_slice().copy_from_slice(&vals[4..]);
        let bytes = checkpoint::encode(&store);
        let mut other = ParamStore::<f64>::new(1);
        other.register("a.weight", &[2, 2], ParamKind::Weight).unwrap();
        other.register("a.bias", &[3], ParamKind::Bias).unwrap();
        checkpoint::decode_into(&bytes, &mut other).unwrap();
        prop_assert_eq!(checkpoint::encode(&other), bytes);
    }

    #[test]
    fn scene_text_round_trips(pts in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0, 0.0f64..1.0, -1i64..3), 1..40)) {
        let cloud = PointCloud::new(
            pts.iter().map(|p| [p.0, p.1, p.2]).collect(),
            Matrix::from_fn(pts.len(), 1, |i, _| pts[i].3),
            Some(pts.iter().map(|p| p.4).collect()),
        )
        .unwrap();
        let text = format_scene(&cloud, 3);
        let (back, k) = parse_scene::<f64>(&text).unwrap();
        prop_assert_eq!(k, 3);
        prop_assert_eq!(format_scene(&back, 3), text);
        prop_assert_eq!(back.positions(), cloud.positions());
    }
}
