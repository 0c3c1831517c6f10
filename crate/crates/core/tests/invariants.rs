use clonesim::kernel::{CohortSelector, ModelParams, NaiveSupplySpec};
use clonesim::scenarios::*;
use proptest::prelude::*;

fn params() -> impl Strategy<Value = ModelParams> {
    (1.0..2.0f64, 0.02..0.08f64, 0.08..0.0999f64, 0.0..0.002f64, 0.0..0.002f64, 3.0..5.0f64).prop_map(
        |(r_e, r_n, g, d, s, tau)| ModelParams { r_e, r_n, g, d, s, tau, ..ModelParams::default() },
    )
}

fn labelled_recruitment(spec: &ScenarioSpec) -> f64 {
    let res = run(spec).unwrap();
    recruitment_fraction(&res, CohortSelector::One(0), Denominator::SuppliedDose).unwrap()
}

fn with_competitor_dose(mut spec: ScenarioSpec, dose: f64) -> ScenarioSpec {
    let competitor = spec.cohorts[1].source;
    if let CohortSource::Supply(s) = competitor {
        spec.cohorts[1].source = CohortSource::Supply(NaiveSupplySpec { dose, ..s });
    }
    spec
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn profiles_are_percentages(p in params(), exp3 in any::<bool>(), gi in 0usize..3) {
        let group = Group::ALL[gi];
        let spec = if exp3 { build_experiment3(group) } else { build_experiment2(group) }.with_params(p);
        let res = run(&spec).unwrap();
        let profile = division_profile(&res, res.horizon(), CohortSelector::One(0)).unwrap();
        prop_assert!(profile.iter().all(|&v| v >= 0.0));
        prop_assert!((profile.iter().sum::<f64>() - 100.0).abs() < 1e-9);
        let pct = recruitment_fraction(&res, CohortSelector::One(0), Denominator::SuppliedDose).unwrap();
        prop_assert!((0.0..=100.0).contains(&pct));
    }

    #[test]
    fn more_competitors_recruit_fewer_labelled_cells(p in params(), low in 1.0..10.0f64, extra in 5.0..40.0f64) {
        let base = build_experiment2(Group::III).with_params(p);
        let few = labelled_recruitment(&with_competitor_dose(base.clone(), low));
        let many = labelled_recruitment(&with_competitor_dose(base, low + extra));
        prop_assert!(many <= few + 1e-9, "{many} > {few}");
    }

    #[test]
    fn larger_precursor_pool_leaves_less_antigen(p in params(), n0 in 0.1..50.0f64, factor in 1.5..10.0f64) {
        let small = run(&build_experiment1(n0).unwrap().with_params(p)).unwrap();
        let large = run(&build_experiment1(n0 * factor).unwrap().with_params(p)).unwrap();
        for t in [96.0, 168.0, 336.0] {
            prop_assert!(large.antigen_at(t).unwrap() <= small.antigen_at(t).unwrap() + 1e-12);
        }
    }

    #[test]
    fn dropping_the_competitor_recovers_the_solo_arm(p in params()) {
        let mut paired = build_experiment2(Group::II).with_params(p);
        paired.cohorts.truncate(1);
        let solo = build_experiment2(Group::I).with_params(p);
        let a = run(&paired).unwrap();
        let b = run(&solo).unwrap();
        for &t in &solo.observation_times {
            let (sa, sb) = (a.state_at(t).unwrap(), b.state_at(t).unwrap());
            prop_assert_eq!(sa.values(), sb.values());
        }
    }

    #[test]
    fn without_feedback_competition_is_invisible(p in params()) {
        let p = ModelParams { s: 0.0, ..p };
        let reference = labelled_recruitment(&build_experiment2(Group::I).with_params(p));
        for g in [Group::II, Group::III] {
            let other = labelled_recruitment(&build_experiment2(g).with_params(p));
            prop_assert!((other - reference).abs() <= 1e-9 * reference.max(1.0));
        }
    }
}
