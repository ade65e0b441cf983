use std::collections::{BTreeMap, HashSet};

use fairpareto_core::asha::{Asha, RungLadder};
use fairpareto_core::configspace::{Configuration, SearchSpace};
use fairpareto_core::fairmetrics::{compute_ranks, fairness_metric, EmbeddingRecord, EmbeddingSet, FairnessMetric};
use fairpareto_core::objectives::{MetricValue, ObjectiveVector, Objectives};
use fairpareto_core::paretostats::{
    dominates_values, hypervolume2d, non_dominated, read_front_csv, write_front_csv, AggregatedPoint, FrontRow,
};
use fairpareto_core::scalarize::{parego, WeightVector};
use fairpareto_core::store::{RunLog, RunLogWriter, TrialRecord};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Rank by definition: count of other-identity images strictly closer than the nearest mate.
fn brute_rank(records: &[EmbeddingRecord], i: usize) -> Option<usize> {
    let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let p = &records[i];
    let mate = records
        .iter()
        .enumerate()
        .filter(|(j, r)| *j != i && r.identity == p.identity)
        .map(|(_, r)| d(&p.vector, &r.vector))
        .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.min(x))))?;
    Some(
        records
            .iter()
            .filter(|r| r.identity != p.identity && d(&p.vector, &r.vector) < mate)
            .count(),
    )
}

fn embedding_set() -> impl Strategy<Value = EmbeddingSet> {
    (2usize..40, 1usize..5, 2usize..4).prop_flat_map(|(n, dim, groups)| {
        prop::collection::vec(
            (0usize..8, 0usize..groups, prop::collection::vec(-2i32..3, dim)),
            n,
        )
        .prop_map(move |rows| {
            let records = rows
                .into_iter()
                .enumerate()
                .map(|(i, (id, g, v))| EmbeddingRecord {
                    image_id: format!("img{i}"),
                    // identities stay within one group
                    identity: format!("g{g}-p{id}"),
                    group: format!("g{g}"),
                    // coarse integer grid to force distance ties
                    vector: v.into_iter().map(|x| f64::from(x) * 0.5).collect(),
                })
                .collect();
            EmbeddingSet::new(records).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ranks_match_definition(set in embedding_set()) {
        let report = compute_ranks(&set).unwrap();
        for (i, p) in report.per_image.iter().enumerate() {
            prop_assert_eq!(&p.image_id, &set.records()[i].image_id);
            prop_assert_eq!(p.rank, brute_rank(set.records(), i));
        }
    }

    #[test]
    fn difference_metrics_are_symmetric(set in embedding_set()) {
        let report = compute_ranks(&set).unwrap();
        let groups = report.group_names();
        prop_assume!(groups.len() >= 2);
        for m in [FairnessMetric::Disparity, FairnessMetric::RankDisparity] {
            let ab = fairness_metric(&report, m, &groups[0], &groups[1]).unwrap().value;
            let ba = fairness_metric(&report, m, &groups[1], &groups[0]).unwrap().value;
            prop_assert_eq!(ab, ba);
            prop_assert!(ab.value().unwrap() >= 0.0);
        }
    }

    #[test]
    fn parego_is_monotone(
        f in prop::collection::vec(0.0f64..1.0, 2..5),
        bumps in prop::collection::vec(0.0f64..0.5, 5),
        raw in prop::collection::vec(0.0f64..1.0, 5),
    ) {
        let k = f.len();
        let total: f64 = raw[..k].iter().sum::<f64>() + 1e-9;
        let mut lambda: Vec<f64> = raw[..k].iter().map(|r| (r + 1e-9 / k as f64) / total).collect();
        let s: f64 = lambda.iter().sum();
        lambda[k - 1] += 1.0 - s;
        let w = WeightVector::new(lambda).unwrap();
        let g: Vec<f64> = f.iter().zip(&bumps).map(|(a, b)| a + b).collect();
        prop_assert!(parego(&f, &w, 0.05).unwrap() <= parego(&g, &w, 0.05).unwrap());
    }

    #[test]
    fn front_matches_pairwise_dominance(rows in prop::collection::vec(prop::collection::vec(0u8..6, 2..4), 1..60)) {
        let dims = rows[0].len();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|r| {
            let mut r: Vec<f64> = r.into_iter().map(f64::from).collect();
            r.resize(dims, 0.0);
            r
        }).collect();
        let mut got = non_dominated(&rows);
        got.sort_unstable();
        let want: Vec<usize> = (0..rows.len())
            .filter(|&i| !rows.iter().any(|o| dominates_values(o, &rows[i])))
            .collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn dominated_points_leave_hypervolume_unchanged(
        pts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..30),
        extra in (0.0f64..1.0, 0.0f64..1.0),
    ) {
        let base = hypervolume2d(&pts, (1.0, 1.0)).unwrap();
        prop_assert!((0.0..=1.0).contains(&base));
        let (a, b) = pts[0];
        let dominated = (a + (1.0 - a) * extra.0, b + (1.0 - b) * extra.1);
        let mut more = pts.clone();
        more.push(dominated);
        prop_assert!((hypervolume2d(&more, (1.0, 1.0)).unwrap() - base).abs() < 1e-12);
        more.push(extra);
        prop_assert!(hypervolume2d(&more, (1.0, 1.0)).unwrap() >= base - 1e-12);
    }

    #[test]
    fn run_log_round_trip(
        entries in prop::collection::vec(
            (prop::collection::btree_map("[a-z_]{1,8}", prop_oneof![
                any::<f64>().prop_filter("finite", |v| v.is_finite()).prop_map(MetricValue::Defined),
                Just(MetricValue::Undefined),
            ], 0..4), any::<u64>(), 1u32..500, -1e6f64..1e6, any::<bool>()),
            1..20,
        )
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let mut w = RunLogWriter::create(&path).unwrap();
        let mut written = Vec::new();
        for (i, (obj, seed, fidelity, lr, ok)) in entries.into_iter().enumerate() {
            let config = Configuration::new().with("head", "ArcFace").with("lr", lr);
            let r = if ok {
                TrialRecord::reported(format!("t{i}"), config, seed, fidelity, obj, 0.5)
            } else {
                TrialRecord::failed(format!("t{i}"), config, seed, fidelity, 0.0)
            };
            w.append(&r).unwrap();
            written.push(r);
        }
        prop_assert_eq!(RunLog::load(&path).unwrap().records, written);
    }

    #[test]
    fn front_csv_round_trip(rows in prop::collection::vec((any::<f64>(), any::<f64>(), 0.0f64..10.0, 1usize..9, any::<bool>()), 0..20)) {
        let names = vec!["error".to_string(), "rank_disparity".to_string()];
        let rows: Vec<FrontRow> = rows
            .into_iter()
            .filter(|(a, b, ..)| a.is_finite() && b.is_finite())
            .enumerate()
            .map(|(i, (a, b, se, n, on))| FrontRow {
                point: AggregatedPoint {
                    config_key: format!("head=CosFace|lr={i}"),
                    mean: ObjectiveVector::from_pairs([("error", a), ("rank_disparity", b)]).unwrap(),
                    standard_error: ObjectiveVector::from_pairs([("error", se), ("rank_disparity", se / 2.0)]).unwrap(),
                    n_seeds: n,
                },
                on_front: on,
            })
            .collect();
        let mut buf = Vec::new();
        write_front_csv(&mut buf, &names, &rows).unwrap();
        let (got_names, got) = read_front_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(got_names, names);
        prop_assert_eq!(got, rows);
    }
}

#[test]
fn asha_random_simulation_keeps_invariants() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ladder = RungLadder::new(1, 27, 3).unwrap();
        let mut asha: Asha<u32> = Asha::new(ladder);
        let mut running: Vec<(String, usize)> = Vec::new();
        let mut next = 0;
        let mut started = 0;
        while started < 400 || !running.is_empty() {
            if started < 400 && (running.is_empty() || rng.random_bool(0.5)) {
                let job = asha.next_job(|| {
                    next += 1;
                    next
                });
                running.push((job.trial_id, job.rung));
                started += 1;
            } else {
                running.shuffle(&mut rng);
                let (id, rung) = running.pop().unwrap();
                let quality = f64::from(*asha.config(&id).unwrap() % 17);
                asha.report(&id, rung, quality + rng.random::<f64>()).unwrap();
                asha.check_invariants().unwrap();
            }
        }
        assert_eq!(asha.pending(), 0);
        let total: usize = (0..4).map(|r| asha.completed(r)).sum();
        assert_eq!(total, 400);
    }
}

#[test]
fn space_samples_validate_and_encode_round_trip() {
    let space = SearchSpace::dpn_fair_v1();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut keys = HashSet::new();
    for _ in 0..2000 {
        let c = space.sample(&mut rng);
        space.validate(&c).unwrap();
        let enc = space.encode(&c).unwrap();
        assert_eq!(enc.len(), space.encoded_width());
        let back = space.decode(&enc).unwrap();
        assert_eq!(back.key().split('|').count(), c.key().split('|').count());
        for (name, v) in c.iter() {
            match (v.as_real(), back.get(name).and_then(|b| b.as_real())) {
                (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-9 * a.abs()),
                _ => assert_eq!(Some(v), back.get(name)),
            }
        }
        let p = space.perturb(&c, &mut rng);
        space.validate(&p).unwrap();
        assert_ne!(p, c);
        keys.insert(c.key());
    }
    assert!(keys.len() > 1900);
}

#[test]
fn objectives_with_undefined_survive_json() {
    let mut o: Objectives = BTreeMap::new();
    o.insert("ratio".into(), MetricValue::Undefined);
    o.insert("error".into(), MetricValue::Defined(0.0));
    let text = serde_json::to_string(&o).unwrap();
    assert_eq!(text, r#"{"error":0.0,"ratio":"undefined"}"#);
    assert_eq!(serde_json::from_str::<Objectives>(&text).unwrap(), o);
}
