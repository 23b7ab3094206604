use gccn_core::fewshot::{matching_predict, proto_predict, prototypes, Metric};
use gccn_core::gc::{extract_gc, frobenius_norm, fuse, partition, Collapse, FusionMode, GcConfig};
use gccn_core::{ops, oracle, Tensor};
use proptest::collection::vec;
use proptest::prelude::*;

fn map(h: usize, w: usize, c: usize) -> impl Strategy<Value = Tensor> {
    vec(-5.0f64..5.0, h * w * c).prop_map(move |d| Tensor::new(vec![h, w, c], d).unwrap())
}

fn sized_map() -> impl Strategy<Value = Tensor> {
    (2usize..9, 2usize..9, 1usize..4).prop_flat_map(|(h, w, c)| map(h, w, c))
}

fn grid_for(t: &Tensor) -> impl Strategy<Value = (usize, usize)> {
    (1..=t.shape()[0], 1..=t.shape()[1])
}

fn gc_config(rows: usize, cols: usize, collapse: Collapse) -> GcConfig {
    GcConfig {
        grid_rows: rows,
        grid_cols: cols,
        collapse,
        layers: 1,
        mode: FusionMode::AugNorm,
    }
}

fn collapse() -> impl Strategy<Value = Collapse> {
    prop_oneof![Just(Collapse::Max), Just(Collapse::Mean)]
}

proptest! {
    #[test]
    fn conv_matches_direct_loops(
        (input, kernel, stride) in (3usize..8, 3usize..8, 1usize..3, 1usize..3, 1usize..4, 1usize..3)
            .prop_flat_map(|(h, w, cin, cout, k, s)| {
                let k = k.min(h).min(w);
                (map(h, w, cin), vec(-1.0f64..1.0, k * k * cin * cout)
                    .prop_map(move |d| Tensor::new(vec![k, k, cin, cout], d).unwrap()), Just(s))
            })
    ) {
        let fast = ops::conv2d(&input, &kernel, stride).unwrap();
        let slow = oracle::conv2d(&input, &kernel, stride);
        prop_assert_eq!(fast.shape(), slow.shape());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn maxpool_matches_direct_loops(
        input in (1usize..5, 1usize..5, 1usize..3).prop_flat_map(|(h, w, c)| {
            // coarse values so ties are common
            vec(0u8..4, 4 * h * w * c)
                .prop_map(move |d| Tensor::new(vec![2 * h, 2 * w, c], d.into_iter().map(f64::from).collect()).unwrap())
        })
    ) {
        let (fast, fast_arg) = ops::maxpool2d(&input).unwrap();
        let (slow, slow_arg) = oracle::maxpool2x2(&input);
        prop_assert_eq!(fast.data(), slow.data());
        prop_assert_eq!(fast_arg, slow_arg);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        z in vec(-50.0f64..50.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let t = Tensor::from_vec(z.clone()).unwrap();
        let p = ops::softmax(&t);
        prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.data().iter().all(|&v| v > 0.0 && v <= 1.0));
        let shifted = ops::softmax(&Tensor::from_vec(z.iter().map(|v| v + shift).collect()).unwrap());
        for (a, b) in p.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn partition_tiles_the_map(h in 1usize..40, w in 1usize..40, r in 1usize..6, c in 1usize..6) {
        prop_assume!(r <= h && c <= w);
        let boxes = partition(h, w, r, c).unwrap();
        prop_assert_eq!(boxes.len(), r * c);
        let mut hits = vec![0u8; h * w];
        for b in &boxes {
            prop_assert!(b.height() >= 1 && b.width() >= 1);
            for y in b.row0..b.row1 {
                for x in b.col0..b.col1 {
                    hits[y * w + x] += 1;
                }
            }
        }
        prop_assert!(hits.iter().all(|&n| n == 1));
    }

    #[test]
    fn gc_matches_exhaustive_scan(
        (m, (r, c)) in sized_map().prop_flat_map(|m| { let g = grid_for(&m); (Just(m), g) }),
        method in collapse(),
    ) {
        let got = extract_gc(std::slice::from_ref(&m), &gc_config(r, c, method)).unwrap();
        let want = oracle::extract_gc(std::slice::from_ref(&m), r, c, 1, method);
        prop_assert_eq!(got.values, want);
    }

    #[test]
    fn gc_ignores_shuffles_inside_a_patch(
        (m, (r, c)) in sized_map().prop_flat_map(|m| { let g = grid_for(&m); (Just(m), g) }),
        seed in any::<u64>(),
    ) {
        let cfg = gc_config(r, c, Collapse::Max);
        let before = extract_gc(std::slice::from_ref(&m), &cfg).unwrap().values;
        let (h, w, ch) = (m.shape()[0], m.shape()[1], m.shape()[2]);
        let patch = partition(h, w, r, c).unwrap()[(seed % (r * c) as u64) as usize];
        let cells: Vec<(usize, usize)> = (patch.row0..patch.row1)
            .flat_map(|y| (patch.col0..patch.col1).map(move |x| (y, x)))
            .collect();
        // rotate the cells of the patch by a seed-dependent offset
        let k = (seed as usize / 7) % cells.len();
        let mut data = m.data().to_vec();
        for (i, &(y, x)) in cells.iter().enumerate() {
            let (sy, sx) = cells[(i + k) % cells.len()];
            for z in 0..ch {
                data[(y * w + x) * ch + z] = m.data()[(sy * w + sx) * ch + z];
            }
        }
        let shuffled = Tensor::new(vec![h, w, ch], data).unwrap();
        let after = extract_gc(&[shuffled], &cfg).unwrap().values;
        prop_assert_eq!(before, after);
    }

    #[test]
    fn gc_is_monotone(
        (m, (r, c)) in sized_map().prop_flat_map(|m| { let g = grid_for(&m); (Just(m), g) }),
        bumps in vec(0.0f64..2.0, 64),
        method in collapse(),
    ) {
        let cfg = gc_config(r, c, method);
        let raised: Vec<f64> = m.data().iter().enumerate().map(|(i, v)| v + bumps[i % bumps.len()]).collect();
        let raised = Tensor::new(m.shape().to_vec(), raised).unwrap();
        let lo = extract_gc(&[m], &cfg).unwrap().values;
        let hi = extract_gc(&[raised], &cfg).unwrap().values;
        prop_assert!(lo.iter().zip(&hi).all(|(a, b)| a <= b));
    }

    #[test]
    fn augnorm_is_scale_free(
        cnn in vec(-3.0f64..3.0, 1..10),
        gc in vec(0.1f64..3.0, 1..10),
        scale in 0.01f64..100.0,
    ) {
        let a = fuse(&cnn, &gc, FusionMode::AugNorm);
        let scaled_cnn: Vec<f64> = cnn.iter().map(|v| v * scale).collect();
        let scaled_gc: Vec<f64> = gc.iter().map(|v| v * scale).collect();
        let b = fuse(&scaled_cnn, &scaled_gc, FusionMode::AugNorm);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
        let ratio = frobenius_norm(&a) / (frobenius_norm(&cnn).powi(2) + frobenius_norm(&gc).powi(2)).sqrt();
        prop_assert!((ratio * frobenius_norm(&gc) - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn distance_matches_norm_identity(
        (p, q) in (1usize..16).prop_flat_map(|d| (vec(-10.0f64..10.0, d), vec(-10.0f64..10.0, d)))
    ) {
        let direct = gccn_core::fewshot::euclidean(&p, &q).unwrap().powi(2);
        let by_norms = oracle::squared_distance_by_norms(&p, &q);
        prop_assert!((direct - by_norms).abs() <= 1e-9 * (1.0 + direct.abs()));
    }
}

fn episode() -> impl Strategy<Value = (Tensor, Vec<usize>, Vec<f64>, usize)> {
    (2usize..5, 1usize..4, 1usize..6).prop_flat_map(|(ways, shots, d)| {
        let n = ways * shots;
        (
            vec(-2.0f64..2.0, n * d).prop_map(move |v| Tensor::new(vec![n, d], v).unwrap()),
            Just((0..n).map(|i| i % ways).collect::<Vec<_>>()),
            vec(-2.0f64..2.0, d),
            Just(ways),
        )
    })
}

fn metric() -> impl Strategy<Value = Metric> {
    prop_oneof![Just(Metric::Euclidean), Just(Metric::Cosine)]
}

fn reversed(support: &Tensor, labels: &[usize]) -> (Tensor, Vec<usize>) {
    let n = labels.len();
    let rows: Vec<f64> = (0..n).rev().flat_map(|i| support.row(i).to_vec()).collect();
    (
        Tensor::new(support.shape().to_vec(), rows).unwrap(),
        labels.iter().rev().copied().collect(),
    )
}

proptest! {
    #[test]
    fn heads_give_distributions_and_ignore_support_order(
        (support, labels, query, ways) in episode(),
        m in metric(),
    ) {
        let protos = prototypes(&support, &labels, ways).unwrap();
        let p = proto_predict(&query, &protos, m).unwrap();
        let a = matching_predict(&query, &support, &labels, ways, m).unwrap();
        for dist in [&p, &a] {
            prop_assert!((dist.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(dist.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let (rs, rl) = reversed(&support, &labels);
        let p2 = proto_predict(&query, &prototypes(&rs, &rl, ways).unwrap(), m).unwrap();
        let a2 = matching_predict(&query, &rs, &rl, ways, m).unwrap();
        for (x, y) in p.iter().zip(&p2).chain(a.iter().zip(&a2)) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn proto_argmax_is_the_nearest_prototype((support, labels, query, ways) in episode()) {
        let protos = prototypes(&support, &labels, ways).unwrap();
        let p = proto_predict(&query, &protos, Metric::Euclidean).unwrap();
        let dists: Vec<f64> = protos.mu.iter().map(|mu| gccn_core::fewshot::euclidean(&query, mu).unwrap()).collect();
        let nearest = ops::argmax(&dists.iter().map(|d| -d).collect::<Vec<_>>());
        prop_assert_eq!(ops::argmax(&p), nearest);
    }

    #[test]
    fn prototypes_match_class_means((support, labels, _q, ways) in episode()) {
        let protos = prototypes(&support, &labels, ways).unwrap();
        let rows: Vec<Vec<f64>> = (0..labels.len()).map(|i| support.row(i).to_vec()).collect();
        let want = oracle::class_means(&rows, &labels, ways);
        for (a, b) in protos.mu.iter().flatten().zip(want.iter().flatten()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
