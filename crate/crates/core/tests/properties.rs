//! Randomized invariants of the network blocks, losses and post-processing.

use depthlane_core::geometry::BevGridSpec;
use depthlane_core::losses::{self, LaneTarget, LossParts, LossWeights, OffsetLoss};
use depthlane_core::network::{
    column_max, depth_head, fuse, DepthFeature, FvFeature, PrimeDepthFeature, PrimeFvFeature, Tensor,
};
use depthlane_core::postprocess::{extract_lanes, ClusterParams};
use depthlane_core::scene::DepthTruth;
use depthlane_core::{LanePrediction, Point3};
use proptest::prelude::*;

fn tensor(c: usize, h: usize, w: usize, scale: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0..1.0f64, c * h * w)
        .prop_map(move |v| Tensor::from_vec(c, h, w, v.into_iter().map(|x| x * scale).collect()))
}

fn grid() -> BevGridSpec {
    BevGridSpec::new(-4.0, 4.0, 0.0, 12.0, 8, 6).unwrap()
}

/// Random lanes spanning the grid's rows, each with its own slope and height.
fn lanes() -> impl Strategy<Value = Vec<Vec<Point3>>> {
    prop::collection::vec((-3.5..3.5f64, -0.1..0.1f64, -0.5..0.5f64), 1..4).prop_map(|ls| {
        let g = grid();
        ls.into_iter()
            .map(|(x0, dx, z)| {
                (0..g.rows)
                    .map(|r| {
                        let y = g.row_center(r);
                        Point3::new(x0 + dx * y, y, z)
                    })
                    .collect()
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn depth_distribution_sums_to_one(logits in tensor(7, 3, 5, 300.0)) {
        let p = depth_head(&DepthFeature(logits));
        let (d, h, w) = p.0.shape();
        for y in 0..h {
            for x in 0..w {
                let s: f64 = (0..d).map(|k| p.at(y, x, k)).sum();
                prop_assert!((s - 1.0).abs() <= 1e-6);
                prop_assert!((0..d).all(|k| p.at(y, x, k) >= 0.0));
            }
        }
    }

    #[test]
    fn height_collapse_ignores_row_order(fv in tensor(3, 6, 4, 1.0), perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        let (c, h, w) = fv.shape();
        let mut shuffled = Tensor::zeros(c, h, w);
        for ch in 0..c {
            for (to, &from) in perm.iter().enumerate() {
                for x in 0..w {
                    *shuffled.at_mut(ch, to, x) = fv.at(ch, from, x);
                }
            }
        }
        prop_assert_eq!(column_max(&FvFeature(fv)), column_max(&FvFeature(shuffled)));
    }

    #[test]
    fn fusion_is_the_outer_product_per_column(x in tensor(1, 5, 4, 1.0), f in tensor(3, 1, 4, 2.0)) {
        let b = fuse(&PrimeDepthFeature(x.clone()), &PrimeFvFeature(f.clone())).unwrap();
        for d in 0..5 {
            for w in 0..4 {
                for c in 0..3 {
                    prop_assert!((b.at(d, w, c) - x.at(0, d, w) * f.at(c, 0, w)).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn depth_loss_is_a_fraction(logits in tensor(4, 2, 3, 5.0), bins in prop::collection::vec(prop::option::of(0u16..4), 6)) {
        let p = depth_head(&DepthFeature(logits));
        let truth = DepthTruth { height: 2, width: 3, bins };
        let l = losses::depth_loss(&p, &truth).unwrap();
        prop_assert!((0.0..=1.0).contains(&l.value));
    }

    #[test]
    fn depth_loss_vanishes_on_exact_one_hot(bins in prop::collection::vec(prop::option::of(0u16..4), 6)) {
        let mut t = Tensor::zeros(4, 2, 3);
        for (i, b) in bins.iter().enumerate() {
            *t.at_mut(b.unwrap_or(0) as usize, i / 3, i % 3) = 1.0;
        }
        let truth = DepthTruth { height: 2, width: 3, bins };
        let l = losses::depth_loss(&depthlane_core::network::DepthDistribution(t), &truth).unwrap();
        prop_assert_eq!(l.value, 0.0);
    }

    #[test]
    fn confidence_loss_is_nonnegative_and_falls_with_p(p in 0.0..1.0f64, q in 0.0..1.0f64, gt in prop::bool::ANY) {
        let g = [if gt { 1.0 } else { 0.0 }];
        let lp = losses::conf_loss(&[p], &g).unwrap();
        prop_assert!(lp >= 0.0);
        if gt && p < q {
            prop_assert!(losses::conf_loss(&[q], &g).unwrap() <= lp);
        }
    }

    #[test]
    fn instance_loss_ignores_translation(
        emb in prop::collection::vec(-2.0..2.0f64, 12 * 3),
        ids in prop::collection::vec(0u32..4, 12),
        shift in prop::collection::vec(-5.0..5.0f64, 3),
    ) {
        prop_assume!(ids.iter().any(|&i| i > 0));
        let moved: Vec<f64> = emb.iter().enumerate().map(|(i, v)| v + shift[i % 3]).collect();
        let a = losses::instance_loss(&emb, 3, &ids).unwrap();
        let b = losses::instance_loss(&moved, 3, &ids).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn offset_losses_ignore_unmasked_cells(
        lanes in lanes(),
        px in prop::collection::vec(0.0..1.0f64, 48),
        pz in prop::collection::vec(-1.0..1.0f64, 48),
        noise in prop::collection::vec(-3.0..3.0f64, 48),
        l2 in prop::bool::ANY,
    ) {
        let t = LaneTarget::from_lanes(&lanes, &grid());
        let mode = if l2 { OffsetLoss::L2 } else { OffsetLoss::L1 };
        let base = losses::offset_losses(&px, &pz, &t, 0.5, mode).unwrap();
        let perturb = |v: &[f64]| -> Vec<f64> {
            v.iter().zip(&noise).zip(&t.confidence).map(|((x, n), c)| if *c > 0.5 { *x } else { x + n }).collect()
        };
        prop_assert_eq!(losses::offset_losses(&perturb(&px), &perturb(&pz), &t, 0.5, mode).unwrap(), base);
    }

    #[test]
    fn total_is_linear_in_each_weight(
        parts in prop::array::uniform5(0.0..10.0f64),
        weights in prop::array::uniform5(0.0..5.0f64),
        which in 0usize..5,
        bump in 0.1..2.0f64,
    ) {
        let [depth, confidence, instance, offset_x, offset_z] = parts;
        let p = LossParts { depth, confidence, instance, offset_x, offset_z };
        let mk = |w: [f64; 5]| LossWeights { depth: w[0], confidence: w[1], instance: w[2], offset_x: w[3], offset_z: w[4] };
        let mut bumped = weights;
        bumped[which] += bump;
        let a = losses::total_loss(p, &mk(weights)).unwrap().total;
        let b = losses::total_loss(p, &mk(bumped)).unwrap().total;
        prop_assert!(((b - a) / bump - parts[which]).abs() <= 1e-9 * parts[which].max(1.0));
    }

    #[test]
    fn every_output_point_falls_back_into_a_lane_cell(
        conf in prop::collection::vec(0.0..1.0f64, 48),
        emb in prop::collection::vec(-3.0..3.0f64, 48 * 2),
        xo in prop::collection::vec(0.0..1.0f64, 48),
        zo in prop::collection::vec(-1.0..1.0f64, 48),
    ) {
        let g = grid();
        let pred = LanePrediction {
            rows: g.rows,
            cols: g.cols,
            embed_dim: 2,
            confidence: conf,
            embedding: emb,
            x_offset: xo,
            z_offset: zo,
        };
        let params = ClusterParams::default();
        let a = extract_lanes(&pred, &params, &g);
        prop_assert_eq!(&a, &extract_lanes(&pred, &params, &g));
        for lane in &a {
            for p in &lane.points {
                let cell = g.cell_of(*p).expect("point inside the grid");
                let i = cell.row * g.cols + cell.col;
                prop_assert!(pred.confidence[i] > params.sigma);
                prop_assert_eq!(p.z, pred.z_offset[i]);
                prop_assert_eq!(p.y, g.row_center(cell.row));
            }
        }
    }
}
