//! Property tests for the structural invariants: row-stochastic adjacency,
//! normalized probability heads, loss identities, query isolation, and the
//! permutation/shift symmetries of the classifier.

use hgnn_core::diffcore::Tape;
use hgnn_core::episodes::Episode;
use hgnn_core::graph::{
    build_full_mask, build_ignn_mask, compute_adjacency, residual_update, GraphMode, OperatorKind,
};
use hgnn_core::models::{
    classify_by_prototypes, extract_losses, extract_pairs, loss_total, Consistency, DistanceKind,
    ModelConfig, ModelParams, PredictionPair, Variant,
};
use hgnn_core::trainer::init_model;
use proptest::prelude::*;

fn operator_strategy() -> impl Strategy<Value = OperatorKind> {
    prop_oneof![
        Just(OperatorKind::InnerProduct),
        Just(OperatorKind::ConcatMlp),
        Just(OperatorKind::SubtractMlp),
    ]
}

fn feat(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, len)
}

fn model(variant: Variant, operator: OperatorKind, d: usize, n_way: usize, seed: u64) -> ModelParams {
    init_model(
        ModelConfig {
            d_in: d,
            d,
            variant,
            operator,
            baseline_n_way: n_way,
            ..ModelConfig::default()
        },
        seed,
    )
    .unwrap()
}

fn episode(n: usize, k: usize, q: usize, d: usize, support: Vec<f64>, queries: Vec<f64>) -> Episode {
    let support_labels: Vec<usize> = (0..n * k).map(|i| i / k).collect();
    let query_labels: Vec<usize> = (0..n * q).map(|i| i / q).collect();
    Episode::from_parts(n, k, q, d, support, support_labels, queries, query_labels).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn adjacency_rows_are_stochastic_over_allowed_entries(
        seed in 0u64..1000,
        operator in operator_strategy(),
        n in 2usize..4,
        k in 1usize..3,
        q in 1usize..3,
        vals in feat(4 * 9),
    ) {
        let m = n * k + q;
        let d = 4usize;
        let model = model(Variant::Hgnn, operator, d, n, seed);
        let layer = &model.arch.ignn[0];
        let mut tape = Tape::new();
        let f = tape.constant_from(m, d, vals[..m * d].to_vec()).unwrap();
        for mask in [
            build_full_mask(m).unwrap(),
            build_ignn_mask(n, k, q, GraphMode::Transductive).unwrap(),
        ] {
            let a = compute_adjacency(&mut tape, &model.set, f, layer, Some(&mask)).unwrap();
            let av = tape.value(a);
            for i in 0..m {
                let mut row_sum = 0.0;
                for j in 0..m {
                    let v = av[i * m + j];
                    if mask.allows(i, j) {
                        prop_assert!(v >= 0.0);
                        row_sum += v;
                    } else {
                        prop_assert_eq!(v, 0.0);
                    }
                }
                prop_assert!((row_sum - 1.0).abs() < 1e-9, "row {} sums to {}", i, row_sum);
            }
        }
    }

    #[test]
    fn probability_heads_are_normalized_and_losses_consistent(
        seed in 0u64..1000,
        operator in operator_strategy(),
        variant_idx in 0usize..5,
        support in feat(3 * 2 * 3),
        queries in feat(3 * 2 * 3),
    ) {
        let variant = [
            Variant::ProtoNet,
            Variant::PgnnOnly,
            Variant::IgnnOnly,
            Variant::Hgnn,
            Variant::LabelProp,
        ][variant_idx];
        let (n, k, q, d) = (3, 2, 2, 3);
        let model = model(variant, operator, d, n, seed);
        let ep = episode(n, k, q, d, support, queries);
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &ep, GraphMode::Inductive).unwrap();
        let pairs = extract_pairs(&tape, &fwd);
        prop_assert_eq!(pairs.len(), n * q);
        for pair in &pairs {
            for p in [&pair.p_pgnn, &pair.p_ignn, &pair.p_combined] {
                prop_assert_eq!(p.len(), n);
                let s: f64 = p.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9, "head sums to {}", s);
                prop_assert!(p.iter().all(|v| *v >= 0.0));
            }
        }
        let lb = extract_losses(&tape, &fwd);
        prop_assert!(lb.l1 >= 0.0);
        prop_assert!(lb.l2 >= 0.0);
        prop_assert!(lb.l3 >= 0.0);
        prop_assert_eq!(lb.total, (lb.l1 + lb.l2) + lb.l3);
    }

    #[test]
    fn consistency_loss_is_symmetric_and_zero_iff_equal(
        raw_a in prop::collection::vec(0.01..1.0f64, 4),
        raw_b in prop::collection::vec(0.01..1.0f64, 4),
    ) {
        let norm = |v: &[f64]| -> Vec<f64> {
            let s: f64 = v.iter().sum();
            v.iter().map(|x| x / s).collect()
        };
        let (pa, pb) = (norm(&raw_a), norm(&raw_b));
        let labels = vec![0usize];
        let mk = |p: &[f64], i: &[f64]| vec![PredictionPair {
            p_pgnn: p.to_vec(),
            p_ignn: i.to_vec(),
            p_combined: p.iter().zip(i).map(|(a, b)| 0.5 * (a + b)).collect(),
        }];
        let ab = loss_total(&mk(&pa, &pb), &labels, Consistency::Kl).unwrap();
        let ba = loss_total(&mk(&pb, &pa), &labels, Consistency::Kl).unwrap();
        prop_assert!((ab.l3 - ba.l3).abs() < 1e-12);
        prop_assert!(ab.l3 >= 0.0);

        let same = loss_total(&mk(&pa, &pa), &labels, Consistency::Kl).unwrap();
        prop_assert_eq!(same.l3, 0.0);

        let max_diff = pa.iter().zip(&pb).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if max_diff > 1e-6 {
            prop_assert!(ab.l3 > 0.0);
        }
    }

    #[test]
    fn inductive_queries_are_isolated(
        seed in 0u64..1000,
        operator in operator_strategy(),
        support in feat(2 * 2 * 3),
        queries_a in feat(2 * 2 * 3),
        queries_b in feat(2 * 2 * 3),
        keep in 0usize..4,
    ) {
        let (n, k, q, d) = (2, 2, 2, 3);
        let model = model(Variant::Hgnn, operator, d, n, seed);
        let mut queries_c = queries_b;
        queries_c[keep * d..(keep + 1) * d].copy_from_slice(&queries_a[keep * d..(keep + 1) * d]);

        let pairs_a = {
            let ep = episode(n, k, q, d, support.clone(), queries_a);
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &ep, GraphMode::Inductive).unwrap();
            extract_pairs(&tape, &fwd)
        };
        let pairs_c = {
            let ep = episode(n, k, q, d, support, queries_c);
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &ep, GraphMode::Inductive).unwrap();
            extract_pairs(&tape, &fwd)
        };
        prop_assert_eq!(&pairs_a[keep].p_pgnn, &pairs_c[keep].p_pgnn);
        prop_assert_eq!(&pairs_a[keep].p_ignn, &pairs_c[keep].p_ignn);
        prop_assert_eq!(&pairs_a[keep].p_combined, &pairs_c[keep].p_combined);
    }

    #[test]
    fn class_relabeling_permutes_probabilities(
        seed in 0u64..1000,
        operator in operator_strategy(),
        support in feat(3 * 2 * 3),
        queries in feat(3 * 1 * 3),
        pi_pick in 0usize..6,
    ) {
        let (n, k, q, d) = (3usize, 2usize, 1usize, 3usize);
        let perms = [
            [0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0],
        ];
        // New class j holds old class pi[j]'s instances.
        let pi = perms[pi_pick];
        let model = model(Variant::Hgnn, operator, d, n, seed);

        let block = |src: &[f64], c: usize, rows: usize| -> Vec<f64> {
            src[c * rows * d..(c + 1) * rows * d].to_vec()
        };
        let mut support_p = Vec::new();
        let mut queries_p = Vec::new();
        for &c in &pi {
            support_p.extend(block(&support, c, k));
            queries_p.extend(block(&queries, c, q));
        }

        let run = |s: Vec<f64>, qs: Vec<f64>| {
            let ep = episode(n, k, q, d, s, qs);
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &ep, GraphMode::Inductive).unwrap();
            (extract_pairs(&tape, &fwd), extract_losses(&tape, &fwd))
        };
        let (pairs, losses) = run(support, queries);
        let (pairs_p, losses_p) = run(support_p, queries_p);

        for new_class in 0..n {
            let old_class = pi[new_class];
            for r in 0..q {
                let pair_p = &pairs_p[new_class * q + r];
                let pair = &pairs[old_class * q + r];
                for j in 0..n {
                    prop_assert!((pair_p.p_pgnn[j] - pair.p_pgnn[pi[j]]).abs() < 1e-10);
                    prop_assert!((pair_p.p_ignn[j] - pair.p_ignn[pi[j]]).abs() < 1e-10);
                    prop_assert!((pair_p.p_combined[j] - pair.p_combined[pi[j]]).abs() < 1e-10);
                }
            }
        }
        prop_assert!((losses.l1 - losses_p.l1).abs() < 1e-9);
        prop_assert!((losses.l2 - losses_p.l2).abs() < 1e-9);
        prop_assert!((losses.l3 - losses_p.l3).abs() < 1e-9);
        prop_assert!((losses.total - losses_p.total).abs() < 1e-9);
    }

    #[test]
    fn classifier_ignores_uniform_distance_offsets(
        queries in feat(4 * 3),
        protos in feat(2 * 3),
        offset in 0.1..4.0f64,
    ) {
        // An extra coordinate worth `offset` on every prototype and 0 on
        // every query adds offset^2 to each squared distance uniformly.
        let (nq, n, d) = (4usize, 2usize, 3usize);
        let pad = |src: &[f64], rows: usize, extra: f64| -> Vec<f64> {
            let mut out = Vec::with_capacity(rows * (d + 1));
            for r in 0..rows {
                out.extend_from_slice(&src[r * d..(r + 1) * d]);
                out.push(extra);
            }
            out
        };
        let mut tape = Tape::new();
        let q0 = tape.constant_from(nq, d, queries.clone()).unwrap();
        let p0 = tape.constant_from(n, d, protos.clone()).unwrap();
        let base = classify_by_prototypes(&mut tape, q0, p0, DistanceKind::Squared).unwrap();
        let q1 = tape.constant_from(nq, d + 1, pad(&queries, nq, 0.0)).unwrap();
        let p1 = tape.constant_from(n, d + 1, pad(&protos, n, offset)).unwrap();
        let shifted = classify_by_prototypes(&mut tape, q1, p1, DistanceKind::Squared).unwrap();
        let (bv, sv) = (tape.value(base).to_vec(), tape.value(shifted).to_vec());
        for (a, b) in bv.iter().zip(&sv) {
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
    }

    #[test]
    fn residual_update_is_permutation_equivariant(
        seed in 0u64..1000,
        operator in operator_strategy(),
        vals in feat(5 * 4),
        rot in 1usize..5,
    ) {
        let (m, d) = (5usize, 4usize);
        let model = model(Variant::Hgnn, operator, d, 2, seed);
        let layer = &model.arch.pgnn[0];
        let perm: Vec<usize> = (0..m).map(|i| (i + rot) % m).collect();
        let mut vals_p = vec![0.0; m * d];
        for (new_row, &old_row) in perm.iter().enumerate() {
            vals_p[new_row * d..(new_row + 1) * d]
                .copy_from_slice(&vals[old_row * d..(old_row + 1) * d]);
        }
        let mask = build_full_mask(m).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant_from(m, d, vals).unwrap();
        let out = residual_update(&mut tape, &model.set, f, layer, Some(&mask)).unwrap();
        let f_p = tape.constant_from(m, d, vals_p).unwrap();
        let out_p = residual_update(&mut tape, &model.set, f_p, layer, Some(&mask)).unwrap();
        let (ov, opv) = (tape.value(out).to_vec(), tape.value(out_p).to_vec());
        for (new_row, &old_row) in perm.iter().enumerate() {
            for j in 0..d {
                let a = opv[new_row * d + j];
                let b = ov[old_row * d + j];
                prop_assert!((a - b).abs() < 1e-10, "row {} col {}: {} vs {}", new_row, j, a, b);
            }
        }
    }

    #[test]
    fn support_updates_never_see_the_query(
        seed in 0u64..1000,
        operator in operator_strategy(),
        support in feat(4 * 3),
        query_a in feat(3),
        query_b in feat(3),
    ) {
        let (n, k, d) = (2usize, 2usize, 3usize);
        let m = n * k + 1;
        let model = model(Variant::Hgnn, operator, d, n, seed);
        let layer = &model.arch.ignn[0];
        let mask = build_ignn_mask(n, k, 1, GraphMode::Inductive).unwrap();
        let run = |tape: &mut Tape, query: &[f64]| {
            let mut vals = support.clone();
            vals.extend_from_slice(query);
            let f = tape.constant_from(m, d, vals).unwrap();
            let out = residual_update(tape, &model.set, f, layer, Some(&mask)).unwrap();
            tape.value(out)[..n * k * d].to_vec()
        };
        let mut tape = Tape::new();
        let sup_a = run(&mut tape, &query_a);
        let sup_b = run(&mut tape, &query_b);
        prop_assert_eq!(sup_a, sup_b);
    }
}
