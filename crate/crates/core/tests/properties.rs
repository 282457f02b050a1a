use proptest::prelude::*;
use unisoma_core::decoder::decode_points;
use unisoma_core::metrics::{relative_l2, rmse_all, TrajectoryMetrics};
use unisoma_core::nn::{attention, ffn, Activation, FfnParams};
use unisoma_core::rng::{stream, Stream};
use unisoma_core::scene::{build_knn_edges, edge_attributes, ChannelStats};
use unisoma_core::{ModelParams, Tape, Tensor};

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::new([rows, cols], d).unwrap())
}

fn cloud() -> impl Strategy<Value = Tensor> {
    (4usize..12).prop_flat_map(|n| tensor(n, 3))
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

fn rotation(a: f64, b: f64, c: f64) -> [[f64; 3]; 3] {
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let (sc, cc) = c.sin_cos();
    let rz = [[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]];
    let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cc, -sc], [0.0, sc, cc]];
    let mul = |x: [[f64; 3]; 3], y: [[f64; 3]; 3]| {
        let mut o = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                o[i][j] = (0..3).map(|k| x[i][k] * y[k][j]).sum();
            }
        }
        o
    };
    mul(mul(rz, ry), rx)
}

fn rotate(t: &Tensor, r: &[[f64; 3]; 3]) -> Tensor {
    let mut out = t.clone();
    for i in 0..t.rows() {
        let p = t.row(i);
        for (d, row) in r.iter().enumerate() {
            out.set(i, d, (0..3).map(|k| row[k] * p[k]).sum());
        }
    }
    out
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(x in tensor(4, 5), c in -50.0f64..50.0) {
        let s = x.softmax(1).unwrap();
        for i in 0..4 {
            prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let shifted = x.map(|v| v + c).softmax(1).unwrap();
        prop_assert!(s.max_abs_diff(&shifted) <= 1e-12);
    }

    #[test]
    fn attention_over_one_token_returns_values(q in tensor(1, 4), k in tensor(1, 4), v in tensor(1, 4)) {
        let mut t = Tape::new();
        let (qv, kv, vv) = (t.constant(q).unwrap(), t.constant(k).unwrap(), t.constant(v.clone()).unwrap());
        let out = attention(&mut t, qv, kv, vv, 1).unwrap();
        prop_assert!(t.value(out).max_abs_diff(&v) <= 1e-15);
    }

    #[test]
    fn knn_has_k_edges_per_point(points in cloud(), k in 1usize..4) {
        let e = build_knn_edges(&points, k).unwrap();
        prop_assert_eq!(e.len(), k * points.rows());
        for p in 0..points.rows() {
            prop_assert_eq!(e.edges.iter().filter(|&&(s, _)| s == p).count(), k);
        }
    }

    #[test]
    fn knn_is_permutation_consistent((points, perm) in cloud().prop_flat_map(|p| { let n = p.rows(); (Just(p), permutation(n)) }), k in 1usize..4) {
        // Random coordinates have no distance ties, so the result is unique.
        let n = points.rows();
        let mut moved = points.clone();
        for (old, &new) in perm.iter().enumerate() {
            moved.row_mut(new).copy_from_slice(points.row(old));
        }
        let mut expected = build_knn_edges(&points, k).unwrap().relabel(&perm).edges;
        let mut rebuilt = build_knn_edges(&moved, k).unwrap().edges;
        expected.sort_unstable();
        rebuilt.sort_unstable();
        prop_assert_eq!(expected, rebuilt);
        prop_assert_eq!(n * k, build_knn_edges(&moved, k).unwrap().len());
    }

    #[test]
    fn edge_attributes_ignore_translation_and_follow_rotation(
        points in cloud(),
        shift in prop::array::uniform3(-10.0f64..10.0),
        angles in prop::array::uniform3(-3.2f64..3.2),
    ) {
        let e = build_knn_edges(&points, 2).unwrap();
        let moved = Tensor::new(points.shape().to_vec(), points.data().iter().enumerate().map(|(i, v)| v + shift[i % 3]).collect()).unwrap();
        prop_assert!(edge_attributes(&moved, &e.edges).unwrap().max_abs_diff(&e.attributes) <= 1e-10);
        let r = rotation(angles[0], angles[1], angles[2]);
        let turned = edge_attributes(&rotate(&points, &r), &e.edges).unwrap();
        prop_assert!(turned.max_abs_diff(&rotate(&e.attributes, &r)) <= 1e-10);
    }

    #[test]
    fn decoding_is_linear_in_tokens(t1 in tensor(3, 4), t2 in tensor(3, 4), w in tensor(5, 3), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let w = w.softmax(1).unwrap();
        let decode = |tokens: Tensor| {
            let mut t = Tape::new();
            let (tv, wv) = (t.constant(tokens).unwrap(), t.constant(w.clone()).unwrap());
            let y = decode_points(&mut t, tv, wv).unwrap();
            t.value(y).clone()
        };
        let mixed = decode(t1.scale(a).add(&t2.scale(b)).unwrap());
        let separate = decode(t1.clone()).scale(a).add(&decode(t2.clone()).scale(b)).unwrap();
        prop_assert!(mixed.max_abs_diff(&separate) <= 1e-12);
    }

    #[test]
    fn decoded_row_depends_only_on_its_weight_row(tokens in tensor(3, 4), w in tensor(5, 3), zeroed in 0usize..5) {
        let decode = |weights: Tensor| {
            let mut t = Tape::new();
            let (tv, wv) = (t.constant(tokens.clone()).unwrap(), t.constant(weights).unwrap());
            let y = decode_points(&mut t, tv, wv).unwrap();
            t.value(y).clone()
        };
        let base = decode(w.clone());
        let mut cut = w.clone();
        cut.row_mut(zeroed).fill(0.0);
        let other = decode(cut);
        for i in (0..5).filter(|&i| i != zeroed) {
            prop_assert_eq!(base.row(i), other.row(i));
        }
    }

    #[test]
    fn relative_l2_scales_with_the_error(u in tensor(6, 3), dir in tensor(6, 3), s in 0.01f64..10.0) {
        prop_assume!(u.data().iter().any(|v| v.abs() > 1e-3));
        let e1 = relative_l2(&u, &u.add(&dir).unwrap()).unwrap();
        let es = relative_l2(&u, &u.add(&dir.scale(s)).unwrap()).unwrap();
        prop_assert!((es - s * e1).abs() <= 1e-12 * es.max(1.0));
    }

    #[test]
    fn rmse_all_of_constant_steps_is_that_step(r in 0.0f64..5.0, steps in 1usize..20) {
        let m = TrajectoryMetrics {
            per_step_rmse: vec![r; steps],
            rmse_all: r,
            quantities: Vec::new(),
            wall_clock_secs: None,
        };
        prop_assert!((rmse_all(&[m]) - r).abs() <= 1e-15 * r.max(1.0));
    }

    #[test]
    fn normalization_round_trips(rows in tensor(8, 3), x in tensor(5, 3)) {
        let stats = ChannelStats::from_rows(&[&rows]).unwrap();
        let back = stats.denormalize(&stats.normalize(&x).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&x) <= 1e-12);
    }
}

#[test]
fn replayed_forward_and_backward_are_bitwise_identical() {
    let run = || {
        let mut rng = stream(7, Stream::Test);
        let mut params = ModelParams::new();
        FfnParams::init(4, 8, 4, &mut rng).insert_into(&mut params, "ffn");
        let x = Tensor::new([3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let mut t = Tape::new();
        let xv = t.variable(x).unwrap();
        let y = ffn(&mut t, &params, "ffn", xv, Activation::Gelu).unwrap();
        let sq = t.square(y).unwrap();
        let loss = t.sum(sq).unwrap();
        let value = t.value(loss).clone();
        let grads = t.backward(loss).unwrap();
        let gx = grads.wrt(xv).unwrap().clone();
        (value, gx, grads.into_params())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
    for (k, g) in a.2.iter() {
        assert_eq!(g.data(), b.2.get(k).unwrap().data(), "{k}");
    }
}
