use proptest::prelude::*;

use bimspu::config::TrainConfig;
use bimspu::geometry::{farthest_point_sample, knn, Point3, PointCloud};
use bimspu::losses::{chamfer_distance, hausdorff_distance};
use bimspu::model::Model;
use bimspu::optim::lr_at;
use bimspu::tensor::{Tape, Tensor};

fn cloud(max: usize) -> impl Strategy<Value = Vec<Point3>> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..max)
}

fn rotate(p: Point3, angles: [f64; 3], shift: Point3) -> Point3 {
    let [a, b, c] = angles;
    let rx = |p: Point3| [p[0], a.cos() * p[1] - a.sin() * p[2], a.sin() * p[1] + a.cos() * p[2]];
    let ry = |p: Point3| [b.cos() * p[0] + b.sin() * p[2], p[1], -b.sin() * p[0] + b.cos() * p[2]];
    let rz = |p: Point3| [c.cos() * p[0] - c.sin() * p[1], c.sin() * p[0] + c.cos() * p[1], p[2]];
    let q = rz(ry(rx(p)));
    [q[0] + shift[0], q[1] + shift[1], q[2] + shift[2]]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chamfer_is_symmetric_and_zero_on_itself(a in cloud(40), b in cloud(40)) {
        prop_assert_eq!(chamfer_distance(&a, &b).unwrap(), chamfer_distance(&b, &a).unwrap());
        prop_assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(hausdorff_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn metrics_are_rigid_motion_invariant(
        a in cloud(40),
        b in cloud(40),
        angles in prop::array::uniform3(0.0f64..std::f64::consts::TAU),
        shift in prop::array::uniform3(-3.0f64..3.0),
    ) {
        let ma: Vec<_> = a.iter().map(|&p| rotate(p, angles, shift)).collect();
        let mb: Vec<_> = b.iter().map(|&p| rotate(p, angles, shift)).collect();
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1e-12);
        prop_assert!(close(chamfer_distance(&a, &b).unwrap(), chamfer_distance(&ma, &mb).unwrap()));
        prop_assert!(close(hausdorff_distance(&a, &b).unwrap(), hausdorff_distance(&ma, &mb).unwrap()));
    }

    #[test]
    fn knn_rows_are_sorted_and_self_first(pts in cloud(128), k in 1usize..16) {
        let k = k.min(pts.len());
        let rows = knn(&pts, &pts, k).unwrap();
        for (i, row) in rows.iter().enumerate() {
            prop_assert_eq!(row.len(), k);
            let d: Vec<f64> = row.iter().map(|&j| bimspu::geometry::sq_dist(pts[i], pts[j])).collect();
            prop_assert!(d.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(d[0], 0.0);
        }
    }

    #[test]
    fn fps_prefix_property(pts in cloud(100), frac in 0.0f64..1.0, start_frac in 0.0f64..1.0) {
        let n = pts.len();
        let start = ((n as f64 * start_frac) as usize).min(n - 1);
        let m = 1 + ((n - 1) as f64 * frac) as usize;
        let full = farthest_point_sample(&pts, n, start).unwrap();
        let part = farthest_point_sample(&pts, m, start).unwrap();
        prop_assert_eq!(&full[..m], &part[..]);
        let mut sorted = full.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn lr_schedule_steps_at_multiples(lr0 in 1e-5f64..1e-2, factor in 0.1f64..1.0, every in 1usize..50) {
        for e in 0..200 {
            let (a, b) = (lr_at(e, lr0, factor, every), lr_at(e + 1, lr0, factor, every));
            prop_assert!(b <= a);
            if (e + 1) % every != 0 {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn fusion_with_epsilon_stays_in_scaled_hull(
        xs in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 2..4),
        w in prop::collection::vec(-1.0f64..2.0, 3),
    ) {
        let mut tape = Tape::new();
        let inputs: Vec<_> = xs.iter().map(|x| tape.constant(Tensor::new(vec![2, 3], x.clone()).unwrap())).collect();
        let wv = tape.constant(Tensor::vector(w[..xs.len()].to_vec()));
        let out = tape.fuse(&inputs, wv, 1e-4).unwrap();
        let out = tape.value(out).data().to_vec();
        for (e, y) in out.iter().enumerate() {
            prop_assert!(y.is_finite());
            let lo = xs.iter().map(|x| x[e]).fold(0.0, f64::min);
            let hi = xs.iter().map(|x| x[e]).fold(0.0, f64::max);
            prop_assert!(*y >= lo - 1e-12 && *y <= hi + 1e-12);
        }
    }
}

#[test]
fn forward_is_bitwise_repeatable() {
    let cfg = TrainConfig::desk(4, 1);
    let (model, params) = Model::new(&cfg).unwrap();
    let pts: Vec<Point3> = (0..cfg.patch_size)
        .map(|i| {
            let t = i as f64 * 0.37;
            [t.sin(), (2.0 * t).cos(), (0.5 * t).sin() * 0.3]
        })
        .collect();
    let patch = PointCloud::new(pts).unwrap();
    let a = model.predict(&params, &patch).unwrap();
    let b = model.predict(&params, &patch).unwrap();
    let bits = |c: &PointCloud| c.points().iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}
