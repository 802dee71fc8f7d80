use std::sync::Arc;

use dosefind::designs::*;
use dosefind::losses::{ewoc_loss, expected_design_loss, inverted_loss, Criterion, DesignMeasure, LossSpec};
use dosefind::model::{DoseSpace, NaturalParams};
use dosefind::posterior::{GridPosterior, History, Observation, PosteriorView, Prior, QuadratureGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const P: f64 = 1.0 / 3.0;

fn space() -> DoseSpace {
    DoseSpace::new(140.0, 425.0).unwrap()
}

fn context(res: usize) -> DesignContext {
    let grid = Arc::new(QuadratureGrid::new(&Prior::Uniform, P, space(), (res, res)).unwrap());
    DesignContext::new(grid, Prior::Uniform, DEFAULT_DOSE_GRID_POINTS).unwrap()
}

fn random_history(rng: &mut ChaCha8Rng, max_len: usize) -> History {
    let len = rng.gen_range(0..=max_len);
    let pairs: Vec<(f64, bool)> = (0..len)
        .map(|_| (140.0 + 285.0 * rng.gen::<f64>(), rng.gen::<f64>() < 0.35))
        .collect();
    History::from_pairs(&pairs)
}

fn decide(ctx: &DesignContext, rule: Rule, h: &History) -> DoseDecision {
    let post = GridPosterior::build(ctx.grid().clone(), h).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    next_dose(&DesignPolicy::new(rule), ctx, &post, &DesignState::from_history(h), &mut rng).unwrap()
}

const EWOC: Rule = Rule::Ewoc { omega: 0.25 };
const EWOC_PLUS: Rule = Rule::Lookahead {
    h: LossSpec::Ewoc { omega: 0.25 },
    lambda: 0.4,
    backend: LookaheadBackend::Quadrature,
};

#[test]
fn prior_doses() {
    let ctx = context(128);
    let h = History::new();
    assert!((decide(&ctx, Rule::Crm, &h).dose - 282.5).abs() < 1e-9);
    assert!((decide(&ctx, EWOC, &h).dose - 211.25).abs() < 1e-9);
    assert!((decide(&ctx, Rule::Ewoc { omega: 0.5 }, &h).dose - 282.5).abs() < 1e-9);
}

#[test]
fn ewoc_star_schedule() {
    assert_eq!(ewoc_star_bound(1, 0.25, 0.5, 24), 0.25);
    assert_eq!(ewoc_star_bound(24, 0.25, 0.5, 24), 0.5);
    assert!((ewoc_star_bound(13, 0.25, 0.5, 25) - 0.375).abs() < 1e-15);
    let ctx = context(64);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = random_history(&mut rng, 8);
    let post = GridPosterior::build(ctx.grid().clone(), &h).unwrap();
    let star = Rule::EwocStar {
        omega_start: 0.25,
        omega_end: 0.5,
        n: 24,
    };
    let mut state = DesignState::from_history(&h);
    state.patient_index = 24;
    let d = next_dose(&DesignPolicy::new(star), &ctx, &post, &state, &mut rng).unwrap();
    assert_eq!(d.dose, ewoc_dose(&post, 0.5));
}

#[test]
fn zero_lambda_is_the_myopic_dose_bit_for_bit() {
    let ctx = context(64);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let h = random_history(&mut rng, 8);
        for (h_loss, myopic) in [
            (LossSpec::Ewoc { omega: 0.25 }, EWOC),
            (LossSpec::SquaredError, Rule::Crm),
            (LossSpec::Inverted { gamma: 0.25 }, Rule::Ivoc { gamma: 0.25 }),
        ] {
            let la = Rule::Lookahead {
                h: h_loss,
                lambda: 0.0,
                backend: LookaheadBackend::ImportanceSampling { draws: 1000 },
            };
            assert_eq!(decide(&ctx, la, &h).dose, decide(&ctx, myopic, &h).dose);
        }
    }
}

#[test]
fn small_lambda_approaches_the_myopic_dose() {
    let ctx = context(128);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        let h = random_history(&mut rng, 6);
        let myopic = decide(&ctx, EWOC, &h).dose;
        let mut prev = f64::INFINITY;
        for lambda in [1e-3, 1e-4] {
            let rule = Rule::Lookahead {
                h: LossSpec::Ewoc { omega: 0.25 },
                lambda,
                backend: LookaheadBackend::Quadrature,
            };
            let gap = (decide(&ctx, rule, &h).dose - myopic).abs();
            assert!(gap < 0.05, "lambda {lambda}: gap {gap}");
            assert!(gap <= prev + 1e-3);
            prev = gap;
        }
    }
}

/// Brute force over the dose grid with directly evaluated toxicity curves.
fn ivoc_oracle(post: &GridPosterior, doses: &[f64], gamma: f64) -> (f64, f64) {
    let atoms = post.atoms();
    let w = post.weights();
    let mut best = (doses[0], f64::INFINITY);
    for &x in doses {
        let e: f64 = (0..w.len())
            .map(|j| w[j] * inverted_loss(atoms.toxicity_prob(j, x), P, gamma))
            .sum();
        if e < best.1 {
            best = (x, e);
        }
    }
    best
}

#[test]
fn ivoc_matches_brute_force_grid_search() {
    let ctx = context(64);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let h = random_history(&mut rng, 8);
        let post = GridPosterior::build(ctx.grid().clone(), &h).unwrap();
        let got = ivoc_dose(&ctx, &post, 0.25).unwrap();
        let (want, best) = ivoc_oracle(&post, ctx.dose_grid(), 0.25);
        if got != want {
            // single-precision tables may reorder near-ties
            let at_got: f64 = (0..post.weights().len())
                .map(|j| post.weights()[j] * inverted_loss(post.atoms().toxicity_prob(j, got), P, 0.25))
                .sum();
            assert!((at_got - best).abs() < 1e-6 * best.max(1e-3), "{got} vs {want}");
        }
    }
}

#[test]
fn ivoc_with_concentrated_posterior_targets_the_mtd() {
    let s = space();
    let truth = NaturalParams::new(0.1, 300.0, P, &s).unwrap();
    let cp = truth.to_canonical(&s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut h = History::new();
    for _ in 0..3000 {
        let x = 140.0 + 285.0 * rng.gen::<f64>();
        h.push(Observation::new(x, rng.gen::<f64>() < dosefind::model::logistic(cp.linear_predictor(x))));
    }
    let ctx = context(128);
    let d = decide(&ctx, Rule::Ivoc { gamma: 0.25 }, &h).dose;
    assert!((d - 300.0).abs() < 10.0, "{d}");
}

fn skewness(post: &GridPosterior) -> f64 {
    let atoms = post.atoms();
    let w = post.weights();
    let m = post.mean_eta();
    let (mut v, mut t) = (0.0, 0.0);
    for j in 0..w.len() {
        let d = atoms.eta[j] - m;
        v += w[j] * d * d;
        t += w[j] * d * d * d;
    }
    t / v.powf(1.5)
}

#[test]
fn ivoc_sits_below_crm_for_right_skewed_posteriors() {
    let ctx = context(64);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut checked = 0;
    while checked < 100 {
        let h = random_history(&mut rng, 8);
        let post = GridPosterior::build(ctx.grid().clone(), &h).unwrap();
        if skewness(&post) <= 0.0 {
            continue;
        }
        checked += 1;
        let ivoc = ivoc_dose(&ctx, &post, 0.25).unwrap();
        assert!(ivoc <= crm_dose(&post) + 1e-9, "{h:?}: {ivoc} > {}", crm_dose(&post));
    }
}

#[test]
fn ewoc_doses_are_bayesian_feasible() {
    let ctx = context(64);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..200 {
        let h = random_history(&mut rng, 8);
        let post = GridPosterior::build(ctx.grid().clone(), &h).unwrap();
        for omega in [0.1, 0.25, 0.4] {
            let x = decide(&ctx, Rule::Ewoc { omega }, &h).dose;
            assert!(1.0 - post.eta_marginal().cdf(x) >= 1.0 - omega - 1e-6);
        }
    }
}

#[test]
fn crm_and_ewoc_respond_monotonically_to_outcomes() {
    let ctx = context(64);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..200 {
        let h = random_history(&mut rng, 8);
        let x = 140.0 + 285.0 * rng.gen::<f64>();
        for rule in [Rule::Crm, EWOC] {
            let base = decide(&ctx, rule, &h).dose;
            let mut up = h.clone();
            up.push(Observation::new(x, false));
            let mut down = h.clone();
            down.push(Observation::new(x, true));
            assert!(decide(&ctx, rule, &up).dose >= base - 1e-9);
            assert!(decide(&ctx, rule, &down).dose <= base + 1e-9);
        }
    }
}

#[test]
fn enforced_coherence_holds_for_every_rule() {
    let ctx = context(64);
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let rules = [
        Rule::Crm,
        EWOC,
        Rule::EwocStar {
            omega_start: 0.25,
            omega_end: 0.5,
            n: 9,
        },
        Rule::Ivoc { gamma: 0.25 },
        Rule::ConstrainedOptimal {
            criterion: Criterion::D,
            q: P,
            omega: 0.25,
            initial_k: 2,
        },
        EWOC_PLUS,
    ];
    for _ in 0..15 {
        let mut h = random_history(&mut rng, 7);
        h.push(Observation::new(140.0 + 285.0 * rng.gen::<f64>(), rng.gen::<bool>()));
        let post = GridPosterior::build(ctx.grid().clone(), &h).unwrap();
        let state = DesignState::from_history(&h);
        let last = *h.last().unwrap();
        for rule in rules {
            let free = next_dose(&DesignPolicy::new(rule), &ctx, &post, &state, &mut rng).unwrap();
            let d = next_dose(&DesignPolicy::coherent(rule), &ctx, &post, &state, &mut rng).unwrap();
            assert!(is_coherent(&last, d.dose), "{rule:?}: {last:?} -> {}", d.dose);
            assert_eq!(d.unrestricted_dose, free.dose);
            if is_coherent(&last, free.dose) {
                assert_eq!(d.dose, free.dose);
                assert!(!d.coherence_restricted);
            }
        }
    }
}

#[test]
fn quantile_rules_project_onto_the_last_dose() {
    let ctx = context(64);
    let h = History::from_pairs(&[(211.25, false), (300.0, true)]);
    let free = decide(&ctx, EWOC, &h).dose;
    assert!(free < 300.0);
    let h = History::from_pairs(&[(211.25, false), (150.0, false)]);
    let post = GridPosterior::build(ctx.grid().clone(), &h).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = next_dose(
        &DesignPolicy::coherent(Rule::Ewoc { omega: 0.05 }),
        &ctx,
        &post,
        &DesignState::from_history(&h),
        &mut rng,
    )
    .unwrap();
    let free = ewoc_dose(&post, 0.05);
    assert_eq!(d.dose, free.max(150.0));
}

fn constrained_oracle(post: &GridPosterior, doses: &[f64], xi: &DesignMeasure, x_omega: f64) -> (f64, f64) {
    let psi = Criterion::D;
    let mut cands: Vec<f64> = doses.iter().copied().filter(|&d| d <= x_omega).collect();
    if cands.last() != Some(&x_omega) {
        cands.push(x_omega);
    }
    let mut best = (cands[0], f64::INFINITY);
    for x in cands {
        let v = expected_design_loss(post, &psi, x, xi).unwrap();
        if v < best.1 {
            best = (x, v);
        }
    }
    best
}

#[test]
fn constrained_optimal_matches_brute_force() {
    let ctx = context(64);
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut binding = 0;
    for _ in 0..12 {
        let mut h = random_history(&mut rng, 6);
        h.push(Observation::new(200.0, false));
        h.push(Observation::new(260.0, false));
        let post = GridPosterior::build(ctx.grid().clone(), &h).unwrap();
        let state = DesignState::from_history(&h);
        for omega in [0.25, 1.0] {
            let rule = Rule::ConstrainedOptimal {
                criterion: Criterion::D,
                q: P,
                omega,
                initial_k: 2,
            };
            let d = next_dose(&DesignPolicy::new(rule), &ctx, &post, &state, &mut rng).unwrap();
            let x_omega = if omega < 1.0 { ewoc_dose(&post, omega) } else { 425.0 };
            assert!(d.dose <= x_omega);
            let (want, best) = constrained_oracle(&post, ctx.dose_grid(), &state.xi, x_omega);
            let got = expected_design_loss(&post, &Criterion::D, d.dose, &state.xi).unwrap();
            assert!(got <= best + 1e-6 * best.abs().max(1.0), "{} vs {want}", d.dose);
            if omega < 1.0 {
                let (free, _) = constrained_oracle(&post, ctx.dose_grid(), &state.xi, 425.0);
                if free > x_omega {
                    binding += 1;
                }
            }
        }
    }
    assert!(binding > 0, "no binding case exercised");
}

#[test]
fn constrained_optimal_burn_in_uses_ewoc() {
    let ctx = context(64);
    let rule = Rule::ConstrainedOptimal {
        criterion: Criterion::D,
        q: P,
        omega: 0.25,
        initial_k: 3,
    };
    let h = History::from_pairs(&[(211.25, false), (230.0, false)]);
    assert_eq!(decide(&ctx, rule, &h).dose, decide(&ctx, EWOC, &h).dose);
}

/// Independent lookahead objective on a midpoint grid under the uniform prior.
fn lookahead_oracle(n: usize, lambda: f64, omega: f64, doses: &[f64]) -> f64 {
    let s = space();
    let lp = (1.0 / P - 1.0).ln();
    let etas: Vec<f64> = (0..n).map(|k| 140.0 + (k as f64 + 0.5) * 285.0 / n as f64).collect();
    let rhos: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) * P / n as f64).collect();
    let w = 1.0 / (n * n) as f64;
    let de = 285.0 / n as f64;
    let quantile = |masses: &[f64]| -> f64 {
        let total: f64 = masses.iter().sum();
        let mut cum = 0.0;
        for (k, m) in masses.iter().enumerate() {
            let next = cum + m / total;
            if next >= omega {
                return etas[k] - 0.5 * de + de * (omega - cum) / (next - cum);
            }
            cum = next;
        }
        s.x_max()
    };
    let mut best = (doses[0], f64::INFINITY);
    for &x in doses {
        let mut m0 = vec![0.0; n];
        let mut m1 = vec![0.0; n];
        let mut myopic = 0.0;
        for (k, &eta) in etas.iter().enumerate() {
            myopic += n as f64 * w * ewoc_loss(eta, x, omega);
            for &rho in &rhos {
                let lr = (1.0 / rho - 1.0).ln();
                let g = ((x - eta) * lr - (x - 140.0) * lp) / (eta - 140.0);
                let f = 1.0 / (1.0 + (-g).exp());
                m1[k] += w * f;
                m0[k] += w * (1.0 - f);
            }
        }
        let q: f64 = m1.iter().sum();
        let h = |m: &[f64]| {
            let xp = quantile(m);
            let tot: f64 = m.iter().sum();
            etas.iter().zip(m).map(|(&e, mk)| mk * ewoc_loss(e, xp, omega)).sum::<f64>() / tot
        };
        let j = myopic + lambda * ((1.0 - q) * h(&m0) + q * h(&m1));
        if j < best.1 {
            best = (x, j);
        }
    }
    best.0
}

#[test]
fn lookahead_start_dose_matches_brute_force() {
    let ctx = context(128);
    let got = decide(&ctx, EWOC_PLUS, &History::new()).dose;
    let doses: Vec<f64> = (0..200).map(|i| 140.0 + 285.0 * i as f64 / 199.0).collect();
    let want = lookahead_oracle(400, 0.4, 0.25, &doses);
    assert!(got > 211.25 + 1.0, "{got}");
    assert!((got - want).abs() <= 285.0 / 199.0, "{got} vs {want}");
}

#[test]
fn lookahead_backends_agree() {
    let ctx = context(128);
    let h = History::from_pairs(&[(211.25, false), (240.0, false), (270.0, true)]);
    let quad = decide(&ctx, EWOC_PLUS, &h).dose;
    let is = Rule::Lookahead {
        h: LossSpec::Ewoc { omega: 0.25 },
        lambda: 0.4,
        backend: LookaheadBackend::ImportanceSampling { draws: 100_000 },
    };
    let post = GridPosterior::build(ctx.grid().clone(), &h).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = next_dose(&DesignPolicy::new(is), &ctx, &post, &DesignState::from_history(&h), &mut rng).unwrap();
    assert!(!d.low_ess);
    assert!((d.dose - quad).abs() < 2.0, "{} vs {quad}", d.dose);
}

#[test]
fn importance_lookahead_is_reproducible_per_seed() {
    let ctx = context(64);
    let h = History::from_pairs(&[(211.25, false)]);
    let post = GridPosterior::build(ctx.grid().clone(), &h).unwrap();
    let rule = Rule::Lookahead {
        h: LossSpec::Ewoc { omega: 0.25 },
        lambda: 0.4,
        backend: LookaheadBackend::ImportanceSampling { draws: 2000 },
    };
    let policy = DesignPolicy::new(rule);
    assert!(policy.is_stochastic());
    let state = DesignState::from_history(&h);
    let a = next_dose(&policy, &ctx, &post, &state, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = next_dose(&policy, &ctx, &post, &state, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn rule_validation() {
    assert!(Rule::Ewoc { omega: 0.7 }.validate(P).is_err());
    assert!(Rule::Ewoc { omega: 0.0 }.validate(P).is_err());
    assert!(Rule::Ewoc { omega: 0.5 }.validate(P).is_ok());
    assert!(Rule::Ivoc { gamma: 0.5 }.validate(P).is_err());
    let la = |lambda| Rule::Lookahead {
        h: LossSpec::Ewoc { omega: 0.25 },
        lambda,
        backend: LookaheadBackend::Quadrature,
    };
    assert!(la(-0.1).validate(P).is_err());
    assert!(la(3.0).validate(P).is_ok());
    let co = |q, initial_k| Rule::ConstrainedOptimal {
        criterion: Criterion::D,
        q,
        omega: 0.25,
        initial_k,
    };
    assert!(co(0.2, 2).validate(P).is_err());
    assert!(co(P, 1).validate(P).is_err());
    assert!(co(0.4, 2).validate(P).is_ok());
    let bad_h = Rule::Lookahead {
        h: LossSpec::DesignCriterion { criterion: Criterion::D },
        lambda: 0.4,
        backend: LookaheadBackend::Quadrature,
    };
    assert!(bad_h.validate(P).is_err());
}

#[test]
fn policies_round_trip_through_json() {
    let policy = DesignPolicy::coherent(EWOC_PLUS);
    let text = serde_json::to_string(&policy).unwrap();
    let back: DesignPolicy = serde_json::from_str(&text).unwrap();
    assert_eq!(back, policy);
    let bad = r#"{"rule":{"kind":"ewoc","omega":0.25,"extra":1}}"#;
    assert!(serde_json::from_str::<DesignPolicy>(bad).is_err());
}

#[test]
fn mismatched_grid_is_rejected() {
    let ctx = context(32);
    let other = context(32);
    let post = GridPosterior::prior(other.grid().clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(next_dose(&DesignPolicy::new(Rule::Crm), &ctx, &post, &DesignState::initial(), &mut rng).is_err());
}
