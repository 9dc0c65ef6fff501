mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ucoassoc_core::associate::{ucs_triplets, unique_combinations, PairScores, ScoreMatrix, SearchConfig};
use ucoassoc_core::featurize::{base_params, pair_features, FeatureStats, FeatureTable, N_FEATURES};
use ucoassoc_core::neuralnet::{read_model, write_model, MlpModel, Mode};
use ucoassoc_core::orbitsim::{
    build_scenario, elements_to_state, solve_kepler, KeplerianElements, ObsId, Observation, RsoId, ScenarioConfig,
    Vec3, GM_EARTH,
};
use ucoassoc_core::pipeline::{select_subset, ScoreHistogram};

fn unit_vec() -> impl Strategy<Value = Vec3> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
        .prop_filter("non-zero", |(x, y, z)| x * x + y * y + z * z > 1e-6)
        .prop_map(|(x, y, z)| Vec3::new(x, y, z).normalize())
}

fn observation(id: u64) -> impl Strategy<Value = Observation> {
    (
        prop_oneof![Just(0.0), Just(120.0), 0.0..43_200.0f64],
        unit_vec(),
        6_000.0..7_000.0f64,
        unit_vec(),
        unit_vec(),
        prop_oneof![Just(0.0), 0.0..1e-3f64],
    )
        .prop_map(move |(epoch, obs_dir, obs_mag, los, rate_dir, rate_mag)| Observation {
            obs_id: ObsId(id),
            rso_id: Some(RsoId(id % 3)),
            epoch,
            observer_pos: obs_dir * obs_mag,
            los,
            los_rate: rate_dir * rate_mag,
            streak_duration: 120.0,
        })
}

fn elements() -> impl Strategy<Value = KeplerianElements> {
    (41_164.0..43_164.0f64, 0.0..0.1f64, 0.0..20.0f64, 0.0..360.0f64, 0.0..360.0f64, 0.0..360.0f64).prop_map(
        |(a, e, i, raan, argp, m)| KeplerianElements {
            semi_major_axis_km: a,
            eccentricity: e,
            inclination_deg: i,
            raan_deg: raan,
            arg_perigee_deg: argp,
            mean_anomaly_deg: m,
            epoch_ref_s: 0.0,
        },
    )
}

fn score_matrix(max_n: usize) -> impl Strategy<Value = ScoreMatrix> {
    (3..=max_n).prop_flat_map(|n| {
        prop::collection::vec(prop_oneof![0.0..1.0f64, Just(0.25), Just(0.5)], n * (n - 1) / 2).prop_map(move |v| {
            let idx = |i: usize, j: usize| {
                let (i, j) = if i < j { (i, j) } else { (j, i) };
                i * n - i * (i + 1) / 2 + (j - i - 1)
            };
            ScoreMatrix::from_fn(n, |i, j| v[idx(i, j)])
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn kepler_solution_satisfies_equation(m in -100.0..100.0f64, e in 0.0..0.999f64) {
        let ea = solve_kepler(m, e).unwrap();
        prop_assert!(common::kepler_residual(ea, e, m).abs() < 1e-12);
    }

    #[test]
    fn states_stay_on_the_conic(el in elements(), t in 0.0..200_000.0f64) {
        let (r, v) = elements_to_state(&el, t).unwrap();
        let a = el.semi_major_axis_km;
        let e = el.eccentricity;
        prop_assert!(r.norm() >= a * (1.0 - e) * (1.0 - 1e-12));
        prop_assert!(r.norm() <= a * (1.0 + e) * (1.0 + 1e-12));
        let vis_viva = GM_EARTH * (2.0 / r.norm() - 1.0 / a);
        prop_assert!((v.norm_squared() - vis_viva).abs() / vis_viva < 1e-12);
        let h = r.cross(&v).norm();
        prop_assert!((h - (GM_EARTH * a * (1.0 - e * e)).sqrt()).abs() / h < 1e-12);
    }

    #[test]
    fn pair_features_are_finite_and_order_free(a in observation(1), b in observation(2)) {
        let table = FeatureTable::default();
        let (pa, pb) = (base_params(&a).unwrap(), base_params(&b).unwrap());
        let ab = pair_features(&pa, &pb, &table);
        prop_assert_eq!(ab.len(), N_FEATURES);
        prop_assert!(ab.iter().all(|x| x.is_finite() && x.abs() <= table.overflow_cap));
        if a.epoch != b.epoch {
            prop_assert_eq!(&ab, &pair_features(&pb, &pa, &table));
        }
        let earlier = if b.epoch < a.epoch { &pb } else { &pa };
        prop_assert_eq!(&ab[..12], &earlier.0[..]);
    }

    #[test]
    fn standardization_inverts(rows in prop::collection::vec(prop::collection::vec(-1e6..1e6f64, 5), 2..20)) {
        let stats = FeatureStats::from_rows(rows.iter().map(|r| r.as_slice()), 5).unwrap();
        for r in &rows {
            let mut x = r.clone();
            stats.apply(&mut x).unwrap();
            prop_assert!(x.iter().all(|v| v.is_finite()));
            stats.invert(&mut x).unwrap();
            for (u, v) in x.iter().zip(r) {
                prop_assert!((u - v).abs() <= 1e-9 * v.abs().max(1.0));
            }
        }
    }

    #[test]
    fn search_matches_filtered_brute_force(m in score_matrix(12), d in 0.0..1.0f64, s in 1usize..60) {
        let cfg = SearchConfig { prune_threshold: d, solutions_per_base: s, chain_length: 3 };
        for base in 0..m.n() {
            let got = ucs_triplets(base, &m, &cfg).unwrap();
            let want: Vec<_> = common::brute_force_triplets(base, &m)
                .into_iter()
                .filter(|t| t.members.iter().all(|&x| x == base || m.get(base, x) <= d))
                .take(s)
                .collect();
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn combinations_follow_pascal(n in 1u64..2_000, r in 1u64..5) {
        prop_assume!(r <= n);
        let c = unique_combinations(n, r).unwrap();
        prop_assert_eq!(c, unique_combinations(n, n - r).unwrap());
        prop_assert_eq!(c, unique_combinations(n - 1, r - 1).unwrap() + unique_combinations(n - 1, r).unwrap_or(0));
    }

    #[test]
    fn histogram_counts_every_score(scores in prop::collection::vec((0.0..=1.0f64, any::<bool>()), 1..200), bins in 1usize..40) {
        let mut h = ScoreHistogram::new(bins);
        for &(s, m) in &scores {
            h.add(s, m);
        }
        prop_assert_eq!(h.total(), scores.len() as u64);
        let matches = scores.iter().filter(|(_, m)| *m).count();
        prop_assert_eq!(h.base_rate(), matches as f64 / scores.len() as f64);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn model_files_round_trip_bit_exact(widths in prop::collection::vec(1usize..12, 6), input in 1usize..30, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = MlpModel::new(input, &widths, &mut rng).unwrap();
        m.set_mode(Mode::Eval);
        let mut buf = Vec::new();
        write_model(&mut buf, &m).unwrap();
        let back = read_model(buf.as_slice()).unwrap();
        let mut again = Vec::new();
        write_model(&mut again, &back).unwrap();
        prop_assert_eq!(buf, again);
        prop_assert_eq!(back, m);
    }

    #[test]
    fn subsets_take_whole_objects(size in 3usize..400, seed in any::<u64>()) {
        let obs = build_scenario(&ScenarioConfig { n_observations: 600, seed: 11, ..ScenarioConfig::default() }).unwrap();
        let sub = select_subset(&obs, size, seed).unwrap();
        prop_assert_eq!(sub.len(), size);
        prop_assert_eq!(&sub, &select_subset(&obs, size, seed).unwrap());
        prop_assert!(sub.windows(2).all(|w| w[0].epoch <= w[1].epoch));
        let count = |rso, set: &[Observation]| set.iter().filter(|o| o.rso_id == Some(rso)).count();
        let mut partial = 0;
        let mut seen: Vec<RsoId> = sub.iter().filter_map(|o| o.rso_id).collect();
        seen.sort_unstable();
        seen.dedup();
        for rso in seen {
            if count(rso, &sub) != count(rso, &obs) {
                partial += 1;
            }
        }
        prop_assert!(partial <= 1);
    }
}
