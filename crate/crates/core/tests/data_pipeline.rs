use cyclefit::data::{decouple_pairs, gen_synthetic, normalize, split_shuffle, Dataset, Pairing, SplitSpec, Task};
use cyclefit::Tensor;
use proptest::prelude::*;

fn dataset(rows: Vec<(Vec<f64>, f64)>) -> Dataset {
    let n = rows.len();
    let w = rows[0].0.len();
    let x: Vec<f64> = rows.iter().flat_map(|r| r.0.clone()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.1).collect();
    Dataset::new(
        Tensor::matrix(n, w, x).unwrap(),
        Tensor::matrix(n, 1, y).unwrap(),
        (0..w).map(|i| format!("x{i}")).collect(),
        vec!["y".into()],
    )
    .unwrap()
}

fn rows_strategy() -> impl Strategy<Value = Vec<(Vec<f64>, f64)>> {
    (1usize..4).prop_flat_map(|w| {
        prop::collection::vec((prop::collection::vec(-1e3f64..1e3, w), -1e3f64..1e3), 3..60)
    })
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn row_keys(d: &Dataset) -> Vec<Vec<u64>> {
    let mut keys: Vec<Vec<u64>> = (0..d.len())
        .map(|r| d.x.row(r).iter().chain(d.y.row(r)).map(|v| v.to_bits()).collect())
        .collect();
    keys.sort();
    keys
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn normalization_round_trips(rows in rows_strategy()) {
        let d = dataset(rows);
        let (n, stats) = normalize(&d, None).unwrap();
        let back_x = stats.x.denormalize(&n.x);
        let back_y = stats.y.denormalize(&n.y);
        for (a, b) in back_x.data().iter().zip(d.x.data()).chain(back_y.data().iter().zip(d.y.data())) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
        for v in n.x.data().iter().chain(n.y.data()) {
            prop_assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn stats_survive_json(rows in rows_strategy()) {
        let (_, stats) = normalize(&dataset(rows), None).unwrap();
        let back = cyclefit::data::NormalizationStats::from_json(&stats.to_json()).unwrap();
        prop_assert_eq!(back, stats);
    }

    #[test]
    fn splits_are_exhaustive_and_disjoint(n in 3usize..300, seed in any::<u64>(), a in 0.1f64..0.8) {
        let rest = 1.0 - a;
        let spec = SplitSpec { train: a, validation: rest / 2.0, test: rest / 2.0, seed };
        prop_assume!(spec.sizes(n).is_ok());
        // Row i carries the label i, so identities are easy to track.
        let ids: Vec<(Vec<f64>, f64)> = (0..n).map(|i| (vec![i as f64], i as f64)).collect();
        let d = dataset(ids);
        let s = split_shuffle(&d, &spec).unwrap();
        let mut seen: Vec<usize> = [&s.train, &s.validation, &s.test]
            .iter()
            .flat_map(|p| p.y.data().iter().map(|v| *v as usize))
            .collect();
        prop_assert_eq!(seen.len(), n);
        seen.sort();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        let again = split_shuffle(&d, &spec).unwrap();
        prop_assert_eq!(again.test.y, s.test.y);
    }

    #[test]
    fn decoupling_keeps_marginals(rows in rows_strategy(), seed in any::<u64>()) {
        let d = dataset(rows);
        let u = decouple_pairs(&d, seed);
        prop_assert_eq!(u.pairing, Pairing::Decoupled);
        prop_assert_eq!(u.len(), d.len());
        prop_assert_eq!(sorted(u.y.data()), sorted(d.y.data()));
        let xs = |t: &Tensor| {
            let mut r: Vec<Vec<u64>> = (0..t.rows()).map(|i| t.row(i).iter().map(|v| v.to_bits()).collect()).collect();
            r.sort();
            r
        };
        prop_assert_eq!(xs(&u.x), xs(&d.x));
    }

    #[test]
    fn generation_is_seed_deterministic(seed in any::<u64>(), n in 3usize..200) {
        for task in [Task::XSquared, Task::Spring] {
            let a = gen_synthetic(task, n, &task.default_ranges(), seed).unwrap();
            let b = gen_synthetic(task, n, &task.default_ranges(), seed).unwrap();
            prop_assert_eq!(row_keys(&a), row_keys(&b));
            for r in 0..n {
                prop_assert_eq!(task.evaluate(a.x.row(r)), a.y.row(r).to_vec());
            }
        }
    }
}

#[test]
fn decoupling_actually_breaks_pairs() {
    let rows: Vec<(Vec<f64>, f64)> = (0..200).map(|i| (vec![i as f64], i as f64)).collect();
    let u = decouple_pairs(&dataset(rows), 3);
    let kept = (0..u.len()).filter(|&r| u.x.get(r, 0) == u.y.get(r, 0)).count();
    assert!(kept < 10, "{kept} of 200 pairs survived");
}
