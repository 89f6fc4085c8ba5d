use fmpc_core::*;
use proptest::prelude::*;

fn jet_strategy(
    max_r: usize,
    max_m: usize,
    integral: bool,
) -> impl Strategy<Value = (JetVector, Vec<f64>)> {
    (1..=max_r, 1..=max_m).prop_flat_map(move |(r, m)| {
        let entry = if integral {
            (-20i32..=20).prop_map(f64::from).boxed()
        } else {
            (-10.0f64..10.0).boxed()
        };
        let gain = if integral {
            (1i32..=20).prop_map(f64::from).boxed()
        } else {
            (0.1f64..50.0).boxed()
        };
        (
            proptest::collection::vec(entry, r * m),
            proptest::collection::vec(gain, r - 1),
        )
            .prop_map(move |(data, gains)| (JetVector::new(r, m, data).unwrap(), gains))
    })
}

proptest! {
    #[test]
    fn recursion_matches_chain_matrix_exactly_on_integers((xi, gains) in jet_strategy(5, 3, true)) {
        let direct = error_variables(&xi, &gains).unwrap();
        let via_matrix = chain_matrix(&gains, xi.r(), xi.m()).unwrap().apply(&xi).unwrap();
        prop_assert_eq!(direct.as_slice(), via_matrix.as_slice());
    }

    #[test]
    fn recursion_matches_chain_matrix_on_reals((xi, gains) in jet_strategy(5, 3, false)) {
        let direct = error_variables(&xi, &gains).unwrap();
        let via_matrix = chain_matrix(&gains, xi.r(), xi.m()).unwrap().apply(&xi).unwrap();
        for (a, b) in direct.as_slice().iter().zip(via_matrix.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs())), "{} vs {}", a, b);
        }
    }

    #[test]
    fn chain_matrix_is_unit_triangular(gains in proptest::collection::vec(0.1f64..30.0, 0..5), m in 1usize..=3) {
        let cm = chain_matrix(&gains, gains.len() + 1, m).unwrap();
        prop_assert!(cm.is_unit_block_lower_triangular());
        prop_assert!((cm.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn shifted_errors_are_time_derivatives(
        amps in proptest::collection::vec(-2.0f64..2.0, 3),
        freqs in proptest::collection::vec(0.2f64..2.0, 3),
        phases in proptest::collection::vec(0.0f64..std::f64::consts::TAU, 3),
        gains in proptest::collection::vec(0.5f64..5.0, 3),
        t in 0.0f64..5.0,
    ) {
        // χ(y) of y = Σ a sin(ω t + φ), r = 4
        let r = 4;
        let jet = |t: f64| {
            let data: Vec<f64> = (0..r)
                .map(|k| {
                    (0..3)
                        .map(|j| {
                            let arg = freqs[j] * t + phases[j] + k as f64 * std::f64::consts::FRAC_PI_2;
                            amps[j] * freqs[j].powi(k as i32) * arg.sin()
                        })
                        .sum()
                })
                .collect();
            JetVector::new(r, 1, data).unwrap()
        };
        let h = 1e-4;
        let (ep, em, e0) = (
            error_variables(&jet(t + h), &gains).unwrap(),
            error_variables(&jet(t - h), &gains).unwrap(),
            error_variables(&jet(t), &gains).unwrap(),
        );
        for i in 0..r - 1 {
            let fd = (ep.block(i)[0] - em.block(i)[0]) / (2.0 * h);
            let rhs = e0.block(i + 1)[0] - gains[i] * e0.block(i)[0];
            prop_assert!((fd - rhs).abs() < 1e-6, "i = {}: {} vs {}", i + 1, fd, rhs);
            // algebraic derivative agrees as well
            let alg = error_derivative(&jet(t), &gains, i + 1, 1).unwrap();
            prop_assert!((alg[0] - rhs).abs() < 1e-9);
        }
    }
}

fn random_class_g() -> impl Strategy<Value = FunnelFunction> {
    (
        0.05f64..2.0,
        0.3f64..3.0,
        proptest::collection::vec((0.0f64..10.0, 0.05f64..1.0), 0..3),
        0.05f64..1.0,
    )
        .prop_map(|(c, alpha, terms, beta_frac)| {
            // rates below α and nonnegative weights keep ψ̇ + αψ ≥ αc
            let terms = terms
                .into_iter()
                .map(|(a, frac)| ExpTerm {
                    coefficient: a,
                    rate: frac * alpha,
                })
                .collect();
            FunnelFunction::exp_sum(0.0, c, terms, alpha, beta_frac * alpha * c).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lower_bound_from_differential_inequality(psi in random_class_g()) {
        let grid = uniform_grid(0.0, 10.0, 1e-2).unwrap();
        let report = class_g_check(&psi, &grid, 1e-9).unwrap();
        prop_assert!(report.pass);
        let (a, b, p0) = (psi.alpha(), psi.beta(), psi.value(0.0));
        for &t in &grid {
            let lower = p0 * (-a * t).exp() + b / a * (1.0 - (-a * t).exp());
            prop_assert!(psi.value(t) >= lower - 1e-9, "t = {}", t);
        }
    }

    #[test]
    fn chain_members_are_certified_and_contain_the_start(
        psi in random_class_g(),
        r in 1usize..=4,
        frac in 0.0f64..0.95,
        raw in proptest::collection::vec(-1.0f64..1.0, 4),
    ) {
        let radius = psi.value(0.0);
        let mut y0 = raw[..r].to_vec();
        y0[0] *= frac * radius;
        let data = InitialJetData::new(0.0, JetVector::scalar(&y0).unwrap(), JetVector::zeros(r, 1)).unwrap();
        let gmin = gamma_margin(&data, &psi).unwrap();
        let gamma = default_gamma(gmin);
        let sel = select_gains(&data, &psi, gamma, &[], 1e-3).unwrap();
        let grid = uniform_grid(0.0, 10.0, 1e-2).unwrap();
        let chain = build_funnel_chain(&psi, &data, &sel.gains, gamma, &grid).unwrap();
        for (i, member) in chain.members().iter().enumerate().skip(1) {
            prop_assert!((member.alpha() - psi.alpha()).abs() == 0.0);
            let floor = psi.beta() / gamma.powi(r as i32 - 1);
            prop_assert!((member.beta() - floor).abs() <= 1e-12 * floor);
            let rep = class_g_check(member, &grid, 1e-9).unwrap();
            prop_assert!(rep.pass, "member {} fails at {:?}", i + 1, rep.first_violation);
        }
        prop_assert!(funnel_membership(0.0, &data.error_jet(), &chain, &sel.gains).unwrap());
    }

    #[test]
    fn saturation_bound_is_monotone(
        f in 0.1f64..10.0,
        g in 0.1f64..10.0,
        yr in 0.0f64..5.0,
        gains in proptest::collection::vec(0.5f64..20.0, 2),
        sups in proptest::collection::vec((0.1f64..10.0, 0.0f64..10.0), 3),
        which in 0usize..8,
        bump in 0.0f64..3.0,
    ) {
        let s: Vec<SupNorms> = sups.iter().map(|&(value, derivative)| SupNorms { value, derivative }).collect();
        let base = saturation_bound_from_sups(f, g, &gains, &s, yr).unwrap();
        let (mut f2, mut g2, mut yr2, mut k2, mut s2) = (f, g, yr, gains.clone(), s.clone());
        match which {
            0 => f2 += bump,
            1 => g2 += bump,
            2 => yr2 += bump,
            3 | 4 => k2[which - 3] += bump,
            5..=7 => s2[which - 5].value += bump,
            _ => unreachable!(),
        }
        let bumped = saturation_bound_from_sups(f2, g2, &k2, &s2, yr2).unwrap();
        prop_assert!(bumped >= base, "{} < {}", bumped, base);
    }

    #[test]
    fn zero_jet_gain_bounds_reduce(alpha in 0.1f64..3.0, beta_frac in 0.01f64..1.0, gamma in 0.05f64..0.95, r in 2usize..=5) {
        let psi = FunnelFunction::constant(1.0, alpha, beta_frac * alpha).unwrap();
        let data = InitialJetData::new(0.0, JetVector::zeros(r, 1), JetVector::zeros(r, 1)).unwrap();
        let gains = vec![1.0; r - 1];
        let bounds = gain_lower_bounds(&data, alpha, psi.beta(), gamma, 1.0, &gains).unwrap();
        let first = 2.0 * (alpha + gamma.powi(1 - r as i32)) / (1.0 - gamma);
        prop_assert!((bounds[0] - first).abs() <= 1e-12 * first);
        for b in &bounds[1..] {
            let rest = 2.0 * (1.0 + alpha) / (1.0 - gamma);
            prop_assert!((b - rest).abs() <= 1e-12 * rest);
        }
    }
}

#[test]
fn identity_check_on_analytic_signal() {
    // e(t) = sin t + t³/10, r = 4
    let r = 4;
    let gains = [3.0, 2.0, 5.0];
    let h = 1e-3;
    let jets: Vec<JetVector> = (0..200)
        .map(|n| {
            let t = n as f64 * h;
            JetVector::scalar(&[
                t.sin() + t.powi(3) / 10.0,
                t.cos() + 0.3 * t * t,
                -t.sin() + 0.6 * t,
                -t.cos() + 0.6,
            ])
            .unwrap()
        })
        .collect();
    let residual = highest_error_identity_check(&gains, &jets, h).unwrap();
    assert!(residual <= 1e-6, "residual {residual}");
    assert_eq!(jets[0].r(), r);
}

#[test]
fn reference_funnel_is_class_g_with_closed_form_residual() {
    let psi = scenario::default_funnel();
    let grid = uniform_grid(0.0, 10.0, 1e-3).unwrap();
    assert!(class_g_check(&psi, &grid, 1e-9).unwrap().pass);
    for &t in &grid {
        let (v, d) = psi.value_and_derivative(t);
        let residual = d + 1.5 * v - 0.15;
        assert!((residual - 1.65 * (-1.35 * t).exp()).abs() <= 1e-9);
    }
    // non-members
    let decaying = FunnelFunction::exp_sum(
        0.0,
        0.0,
        vec![ExpTerm {
            coefficient: 1.0,
            rate: 2.0,
        }],
        1.0,
        0.1,
    )
    .unwrap();
    assert!(!class_g_check(&decaying, &grid, 1e-9).unwrap().pass);
}
