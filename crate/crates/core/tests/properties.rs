use std::collections::HashSet;

use proptest::prelude::*;
use vflbus_core::broker::{Broker, ChannelMessage, MessageKind};
use vflbus_core::data::{make_batch_plan, num_batches};
use vflbus_core::planner::{brute_force_search, dp_search, SearchSpace};
use vflbus_core::profiler::{fit_power_law, memory_bound, predict_times, CommScaling, DelayModelConstants};
use vflbus_core::runtime::{schedule_interval, weighted_mean_loss, Assignment, SyncSchedule, WorkQueue};
use vflbus_core::{auc, DenseMatrix};

fn constants() -> impl Strategy<Value = DelayModelConstants> {
    (
        prop::array::uniform6(1e-4f64..2.0),
        prop::array::uniform6(-1.5f64..1.2),
        (1u32..=64, 1u32..=64),
        (0.0f64..1e6, 0.0f64..1e6, 1e6f64..1e9, any::<bool>()),
    )
        .prop_map(|(coefs, exps, (ca, cp), (e, g, bw, per_sample))| {
            let mut c = DelayModelConstants::reference();
            [c.lambda_a, c.lambda_p, c.phi_a, c.phi_p, c.lambda_a_top, c.phi_a_top] = coefs;
            [c.gamma_a, c.gamma_p, c.beta_a, c.beta_p, c.gamma_a_top, c.beta_a_top] = exps;
            c.cores_a = ca as f64;
            c.cores_p = cp as f64;
            c.emb_bytes = e;
            c.grad_bytes = g;
            c.bandwidth = bw;
            c.comm_scaling = if per_sample { CommScaling::PerSample } else { CommScaling::Fixed };
            c
        })
}

fn space() -> impl Strategy<Value = SearchSpace> {
    (
        1usize..20,
        0usize..10,
        1usize..20,
        0usize..10,
        prop::sample::subsequence((0..12).map(|k| 1usize << k).collect::<Vec<_>>(), 1..=7),
        any::<bool>(),
        1.0f64..4096.0,
    )
        .prop_map(|(a0, da, p0, dp, mut batches, reverse, ceiling)| {
            if reverse {
                batches.reverse();
            }
            let mut s = SearchSpace::new(a0..=a0 + da, p0..=p0 + dp, batches);
            s.b_max = Some(ceiling);
            s
        })
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn schedule_is_bounded_and_monotone(d in 1usize..=50, t in 1usize..=500) {
        let v = schedule_interval(d, t);
        prop_assert!((1..=d).contains(&v));
        prop_assert!(schedule_interval(d, t + 1) >= v);
        let s = SyncSchedule::SemiAsync { delta_t0: d };
        prop_assert_eq!(s.syncs_at(t), t % v == 0);
    }

    #[test]
    fn power_law_fit_recovers_exact_data(coef in 1e-3f64..10.0, exp in -2.0f64..2.0) {
        let pts: Vec<(f64, f64)> = (1..=10).map(|k| {
            let b = (1u32 << k) as f64;
            (b, coef * b.powf(exp))
        }).collect();
        let fit = fit_power_law(&pts).unwrap();
        prop_assert!(((fit.coef - coef) / coef).abs() < 1e-9);
        prop_assert!((fit.exponent - exp).abs() < 1e-9);
        prop_assert!(fit.r_squared > 1.0 - 1e-9);
    }

    #[test]
    fn per_worker_times_are_homogeneous(c in constants(), b in 1usize..2048, w_a in 1usize..32, w_p in 1usize..32) {
        let t = predict_times(&c, b, w_a, w_p).unwrap();
        let mut doubled = c.clone();
        doubled.cores_a *= 2.0;
        doubled.cores_p *= 2.0;
        let t2 = predict_times(&doubled, b, 2 * w_a, 2 * w_p).unwrap();
        for (x, y) in [
            (t.t_f_a, t2.t_f_a), (t.t_b_a, t2.t_b_a), (t.t_top_a, t2.t_top_a),
            (t.t_f_p, t2.t_f_p), (t.t_b_p, t2.t_b_p),
        ] {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300));
        }
        prop_assert_eq!(t.t_emb, t2.t_emb);
    }

    #[test]
    fn memory_bound_grows_with_budget(extra in 1.0f64..1e9, more in 0.0f64..1e9, chi in 0.5f64..3.0) {
        let mut c = DelayModelConstants::reference();
        c.chi = chi;
        c.mem_bar_a = c.mem_a0 + extra;
        c.mem_bar_p = c.mem_p0 + extra;
        let small = memory_bound(&c).unwrap();
        c.mem_bar_a += more;
        let bigger_a = memory_bound(&c).unwrap();
        c.mem_bar_p += more;
        let bigger = memory_bound(&c).unwrap();
        prop_assert!(small <= bigger_a && bigger_a <= bigger);
        prop_assert_eq!(small, bigger_a, "the unchanged passive branch still binds");
    }

    #[test]
    fn dp_matches_brute_force(c in constants(), s in space()) {
        match (dp_search(&c, &s), brute_force_search(&c, &s)) {
            (Ok(dp), Ok(bf)) => {
                prop_assert_eq!(dp.cost.to_bits(), bf.cost.to_bits());
                prop_assert_eq!(dp, bf);
                prop_assert!(dp.batch_size as f64 <= s.ceiling(&c).unwrap());
            }
            (Err(_), Err(_)) => prop_assert!(s.batch_sizes.iter().all(|&b| b as f64 > s.ceiling(&c).unwrap())),
            (a, b) => prop_assert!(false, "dp {:?} vs brute force {:?}", a, b),
        }
    }

    #[test]
    fn larger_grid_never_costs_more(c in constants(), s in space()) {
        let mut sub = s.clone();
        sub.w_a = *s.w_a.start()..=*s.w_a.start();
        sub.w_p = *s.w_p.start()..=*s.w_p.start();
        if let (Ok(full), Ok(part)) = (dp_search(&c, &s), dp_search(&c, &sub)) {
            prop_assert!(full.cost <= part.cost);
        }
    }

    #[test]
    fn broker_conserves_messages(ops in prop::collection::vec((any::<bool>(), 0usize..4, any::<bool>()), 1..200), cap in 1usize..6) {
        let broker = Broker::new(4, cap, cap).unwrap();
        let mut next = 0usize;
        let mut seen = HashSet::new();
        for (publish, ch, gradient) in ops {
            let kind = if gradient { MessageKind::Gradient } else { MessageKind::Embedding };
            if publish {
                let msg = ChannelMessage::new(kind, ch, 1, DenseMatrix::column(vec![next as f64]), 0..1, 0, 0);
                broker.publish(msg).unwrap();
                next += 1;
            } else if let Some(m) = broker.try_subscribe(kind, ch, 0).unwrap() {
                prop_assert_eq!(m.batch_id, ch);
                prop_assert_eq!(m.kind, kind);
                prop_assert!(seen.insert(m.payload.as_slice()[0] as usize));
            }
            prop_assert!(broker.queue_len(kind, ch).unwrap() <= cap);
            let times = broker.buffered_times(kind, ch).unwrap();
            prop_assert!(times.windows(2).all(|w| w[0] <= w[1]));
        }
        let s = broker.stats();
        prop_assert_eq!(s.published, next as u64);
        prop_assert_eq!(s.published, s.delivered + s.evicted + s.residual);
        prop_assert!(seen.iter().all(|&id| id < next));
    }

    #[test]
    fn auc_equals_pair_count(pairs in prop::collection::vec((0u8..6, any::<bool>()), 2..60)) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let labels: Vec<f64> = pairs.iter().map(|p| if p.1 { 1.0 } else { 0.0 }).collect();
        let got = auc(&scores, &labels).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1.0 && labels[j] == 0.0 {
                    den += 1.0;
                    num += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        if den == 0.0 {
            prop_assert!(got.is_nan());
        } else {
            prop_assert!((got - num / den).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_plan_partitions_samples((n, b) in (1usize..2000).prop_flat_map(|n| (Just(n), 1..=n.min(300))), seed in any::<u64>()) {
        let plan = make_batch_plan(n, b, seed).unwrap();
        prop_assert_eq!(plan.len(), num_batches(n, b).unwrap());
        let mut all = Vec::with_capacity(n);
        for (k, batch) in plan.batches.iter().enumerate() {
            prop_assert_eq!(batch.batch_id, k);
            all.extend_from_slice(plan.indices(k));
        }
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn work_queue_hands_out_each_batch_once(nb in 1usize..100, workers in 1usize..8, dynamic in any::<bool>()) {
        let assignment = if dynamic { Assignment::Dynamic } else { Assignment::Static };
        let q = WorkQueue::new(nb, workers, assignment);
        let mut got = Vec::new();
        for w in 0..workers {
            while let Some(item) = q.pop(w) {
                got.push(item.batch_id);
            }
        }
        got.sort_unstable();
        prop_assert_eq!(got, (0..nb).collect::<Vec<_>>());
        prop_assert_eq!(q.remaining(), 0);
    }

    #[test]
    fn mean_loss_ignores_arrival_order(mut items in prop::collection::vec((0.0f64..5.0, 1usize..300), 1..40), seed in any::<u64>()) {
        let tagged: Vec<(usize, f64, usize)> = items.drain(..).enumerate().map(|(k, (l, n))| (k, l, n)).collect();
        let mut shuffled = tagged.clone();
        let len = shuffled.len();
        for k in 0..len {
            shuffled.swap(k, (seed as usize).wrapping_add(k * 7) % len);
        }
        prop_assert_eq!(weighted_mean_loss(&tagged).to_bits(), weighted_mean_loss(&shuffled).to_bits());
    }

    #[test]
    fn wire_encoding_round_trips(rows in 1usize..10, cols in 1usize..10, seed in any::<u64>()) {
        let data: Vec<f64> = (0..rows * cols).map(|k| ((seed as f64) * 1e-9 + k as f64).sin()).collect();
        let m = DenseMatrix::from_vec(rows, cols, data).unwrap();
        let bytes = m.to_wire();
        prop_assert_eq!(bytes.len(), m.wire_len());
        prop_assert_eq!(DenseMatrix::from_wire(&bytes).unwrap(), m);
    }
}
