mod common;

use ndarray::{s, Array1, Array2};
use pns::autodiff::Tape;
use pns::epsim::Observation;
use pns::metainfer::{
    aggregate, condition_from_noise, embed_sequence, kl_gaussian, loss, posterior, sample_condition, ContextSet,
    LossWeights, SetEmbedding,
};
use pns::training::{Adam, AdamConfig, Episode};
use proptest::prelude::*;

fn rel_close(a: &Array1<f64>, b: &Array1<f64>, tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

#[test]
fn embedding_is_deterministic_and_bias_only_at_zero() {
    let (hier, model, ops) = common::micro_model(0);
    let bank = common::micro_bank(&hier);
    let obs = &bank.subjects[0].observations[2];
    assert_eq!(embed_sequence(&model, &ops, obs).unwrap(), embed_sequence(&model, &ops, obs).unwrap());
    let zero = |sensors: Vec<usize>| Observation { y: Array2::zeros((3, sensors.len())), sensor_nodes: sensors, noise_std: 0.0 };
    let a = embed_sequence(&model, &ops, &zero(vec![0, 2, 4])).unwrap();
    let b = embed_sequence(&model, &ops, &zero(vec![0, 2, 4])).unwrap();
    assert_eq!(a, b);
}

#[test]
fn time_reversal_changes_the_embedding() {
    let (hier, model, ops) = common::micro_model(1);
    let bank = common::micro_bank(&hier);
    let obs = bank.subjects[0].observations[0].clone();
    let mut reversed = obs.clone();
    reversed.y = obs.y.slice(s![..;-1, ..]).to_owned();
    assert_ne!(obs.y, reversed.y);
    assert_ne!(embed_sequence(&model, &ops, &obs).unwrap(), embed_sequence(&model, &ops, &reversed).unwrap());
}

#[test]
fn wrong_length_is_rejected() {
    let (hier, model, ops) = common::micro_model(1);
    let bank = common::micro_bank(&hier);
    let mut obs = bank.subjects[0].observations[0].clone();
    obs.y = obs.y.slice(s![..2, ..]).to_owned();
    assert!(embed_sequence(&model, &ops, &obs).is_err());
}

#[test]
fn aggregation_is_a_symmetric_mean() {
    let (hier, model, ops) = common::micro_model(2);
    let bank = common::micro_bank(&hier);
    let items = &bank.subjects[1].observations;
    let single = ContextSet::new("s", vec![items[0].clone()]).unwrap();
    assert!(rel_close(&aggregate(&model, &ops, &single).unwrap(), &embed_sequence(&model, &ops, &items[0]).unwrap(), 1e-12));
    let doubled = ContextSet::new("s", vec![items[0].clone(), items[0].clone()]).unwrap();
    assert!(rel_close(&aggregate(&model, &ops, &doubled).unwrap(), &aggregate(&model, &ops, &single).unwrap(), 1e-12));
    let fwd = ContextSet::new("s", items[..4].to_vec()).unwrap();
    let rev = ContextSet::new("s", items[..4].iter().rev().cloned().collect()).unwrap();
    assert!(rel_close(&aggregate(&model, &ops, &fwd).unwrap(), &aggregate(&model, &ops, &rev).unwrap(), 1e-6));
    let mean = items[..4]
        .iter()
        .map(|o| embed_sequence(&model, &ops, o).unwrap())
        .fold(Array1::zeros(2), |acc, e| acc + e / 4.0);
    assert!(rel_close(&aggregate(&model, &ops, &fwd).unwrap(), &mean, 1e-12));
    assert!(ContextSet::new("s", Vec::new()).is_err());
}

#[test]
fn extra_sample_joins_the_mean() {
    let (hier, model, ops) = common::micro_model(3);
    let bank = common::micro_bank(&hier);
    let subject = &bank.subjects[0];
    let ctx = ContextSet::new("h", subject.observations[..2].to_vec()).unwrap();
    let prior = posterior(&model, &ops, &ctx, None).unwrap();
    let q = posterior(&model, &ops, &ctx, Some(&subject.records[4])).unwrap();
    assert_ne!(q, prior);
    let full = Observation::full(&subject.records[4]);
    let mean = (embed_sequence(&model, &ops, &ctx.items[0]).unwrap()
        + embed_sequence(&model, &ops, &ctx.items[1]).unwrap()
        + embed_sequence(&model, &ops, &full).unwrap())
        / 3.0;
    let mut tape = Tape::new(&model.params);
    let m = tape.constant(mean.insert_axis(ndarray::Axis(0)));
    let (mu, sigma) = model.meta.heads(&mut tape, m);
    assert!(rel_close(&q.mu, &tape.value(mu).row(0).to_owned(), 1e-12));
    assert!(rel_close(&q.sigma, &tape.value(sigma).row(0).to_owned(), 1e-12));
}

#[test]
fn extra_equal_to_the_context_gives_zero_kl() {
    let (hier, model, ops) = common::micro_model(4);
    let bank = common::micro_bank(&hier);
    let rec = &bank.subjects[0].records[1];
    let ctx = ContextSet::new("h", vec![Observation::full(rec)]).unwrap();
    let p = posterior(&model, &ops, &ctx, None).unwrap();
    let q = posterior(&model, &ops, &ctx, Some(rec)).unwrap();
    assert!(kl_gaussian(&q, &p).unwrap().abs() < 1e-12);
}

#[test]
fn scale_head_respects_the_floor() {
    let (hier, mut model, ops) = common::micro_model(5);
    let bank = common::micro_bank(&hier);
    let head = model.meta.sigma_head.clone();
    model.params.get_mut(head.weight).fill(0.0);
    model.params.get_mut(head.bias.unwrap()).fill(-1e3);
    let ctx = ContextSet::new("h", bank.subjects[0].observations[..2].to_vec()).unwrap();
    let e = posterior(&model, &ops, &ctx, None).unwrap();
    assert!(e.sigma.iter().all(|&s| s > 0.0 && (s - model.arch.sigma_floor).abs() < 1e-15));
}

#[test]
fn reparameterization_is_exact() {
    let e = SetEmbedding { mu: Array1::from(vec![1.0, -2.0, 0.5]), sigma: Array1::from(vec![0.3, 2.0, 1e-3]) };
    assert_eq!(condition_from_noise(&e, &Array1::zeros(3)), e.mu);
    let eps = Array1::from(vec![0.5, -1.0, 2.0]);
    assert_eq!(condition_from_noise(&e, &eps), Array1::from(vec![1.0 + 0.5 * 0.3, -2.0 - 2.0, 0.5 + 2.0 * 1e-3]));
    let flat = SetEmbedding { mu: e.mu.clone(), sigma: Array1::zeros(3) };
    assert_eq!(sample_condition(&flat, 77), e.mu);
    assert_eq!(sample_condition(&e, 9), sample_condition(&e, 9));
}

#[test]
fn sample_mean_matches_mu() {
    let e = SetEmbedding { mu: Array1::from(vec![0.7, -1.2]), sigma: Array1::from(vec![0.4, 1.5]) };
    let n = 100_000;
    let mut mean = Array1::<f64>::zeros(2);
    for i in 0..n {
        mean += &(sample_condition(&e, pns::seed::derive_index(3, i)) / n as f64);
    }
    for k in 0..2 {
        assert!((mean[k] - e.mu[k]).abs() <= 3.0 * e.sigma[k] / (n as f64).sqrt(), "coordinate {k}: {}", mean[k]);
    }
}

#[test]
fn gaussian_kl_closed_forms() {
    let p = SetEmbedding { mu: Array1::from(vec![0.3, -0.1]), sigma: Array1::from(vec![0.5, 2.0]) };
    assert_eq!(kl_gaussian(&p, &p).unwrap(), 0.0);
    let q = SetEmbedding { mu: Array1::from(vec![1.0, 2.0, -2.0]), sigma: Array1::ones(3) };
    assert!((kl_gaussian(&q, &SetEmbedding::standard(3)).unwrap() - 4.5).abs() < 1e-12);
    let bad = SetEmbedding { mu: Array1::zeros(2), sigma: Array1::from(vec![1.0, 0.0]) };
    assert!(kl_gaussian(&bad, &p).is_err());
    assert!(kl_gaussian(&q, &p).is_err());
}

/// `∫ q log(q/p)` by the trapezoid rule on a wide grid.
fn kl_by_quadrature(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    let log_pdf = |x: f64, m: f64, s: f64| -(x - m).powi(2) / (2.0 * s * s) - (s * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let (lo, hi, n) = (-40.0, 40.0, 400_000);
    let h = (hi - lo) / n as f64;
    (0..=n)
        .map(|i| {
            let x = lo + i as f64 * h;
            let lq = log_pdf(x, mq, sq);
            let f = lq.exp() * (lq - log_pdf(x, mp, sp));
            if i == 0 || i == n { 0.5 * f * h } else { f * h }
        })
        .sum()
}

#[test]
fn wide_against_standard_matches_quadrature() {
    let q = SetEmbedding { mu: Array1::zeros(1), sigma: Array1::from(vec![2.0]) };
    let kl = kl_gaussian(&q, &SetEmbedding::standard(1)).unwrap();
    assert!((kl - 0.5 * (4.0 - 1.0 - 4f64.ln())).abs() < 1e-12);
    assert!((kl - 0.806_852_819_440_054_7).abs() < 1e-6);
    assert!((kl - kl_by_quadrature(0.0, 2.0, 0.0, 1.0)).abs() < 1e-6);
    assert!((kl_gaussian(
        &SetEmbedding { mu: Array1::from(vec![0.4]), sigma: Array1::from(vec![0.7]) },
        &SetEmbedding { mu: Array1::from(vec![-0.2]), sigma: Array1::from(vec![1.3]) }
    )
    .unwrap()
        - kl_by_quadrature(0.4, 0.7, -0.2, 1.3))
    .abs()
        < 1e-6);
}

proptest! {
    #[test]
    fn kl_is_nonnegative(mq in -5.0f64..5.0, mp in -5.0f64..5.0, sq in 1e-3f64..5.0, sp in 1e-3f64..5.0) {
        let q = SetEmbedding { mu: Array1::from(vec![mq]), sigma: Array1::from(vec![sq]) };
        let p = SetEmbedding { mu: Array1::from(vec![mp]), sigma: Array1::from(vec![sp]) };
        prop_assert!(kl_gaussian(&q, &p).unwrap() >= 0.0);
    }
}

fn weights(a: f64, b: f64) -> LossWeights {
    LossWeights { lambda_ct: a, lambda_prior: b }
}

#[test]
fn loss_terms_follow_their_definition() {
    let (hier, model, ops) = common::micro_model(6);
    let bank = common::micro_bank(&hier);
    let ep = common::micro_episode(&bank);
    let l = loss(&model, &ops, &ep, weights(0.3, 0.2), 5).unwrap();
    assert!(l.kl_ct >= 0.0 && l.kl_prior >= 0.0 && l.recon <= 0.0);
    assert!((l.total - (-l.recon + 0.3 * l.kl_ct + 0.2 * l.kl_prior)).abs() < 1e-12 * l.total.abs().max(1.0));
    let plain = loss(&model, &ops, &ep, weights(0.0, 0.0), 5).unwrap();
    assert_eq!(plain.total, -plain.recon);
    assert_eq!(plain.recon, l.recon);
    assert_eq!(loss(&model, &ops, &ep, weights(0.3, 0.2), 5).unwrap(), l);
}

#[test]
fn kl_terms_are_nonnegative_across_random_models() {
    let (hier, _, _) = common::micro_model(0);
    let bank = common::micro_bank(&hier);
    let ep = common::micro_episode(&bank);
    for seed in 0..8 {
        let (_, model, ops) = common::micro_model(100 + seed);
        let l = loss(&model, &ops, &ep, weights(1.0, 1.0), seed).unwrap();
        assert!(l.kl_ct >= 0.0 && l.kl_prior >= 0.0, "seed {seed}: {l:?}");
    }
}

#[test]
fn fitted_model_reconstructs_better_than_untrained() {
    let (hier, model, ops) = common::micro_model(7);
    let bank = common::micro_bank(&hier);
    let ep = Episode::paired(&bank.subjects[0], 2).unwrap();
    let w = weights(1e-4, 0.1);
    let before = loss(&model, &ops, &ep, w, 0).unwrap();
    let mut fitted = model.clone();
    let mut adam = Adam::new(AdamConfig::default(), &fitted.params);
    for _ in 0..300 {
        let (_, g) = pns::metainfer::loss_and_grad(&fitted, &ops, &ep, w, 0).unwrap();
        adam.update(&mut fitted.params, &g, 1e-2);
    }
    let after = loss(&fitted, &ops, &ep, w, 0).unwrap();
    assert!(after.recon > before.recon, "{before:?} → {after:?}");
}

#[test]
fn gradient_matches_central_differences() {
    let (hier, model, ops) = common::micro_model(8);
    let bank = common::micro_bank(&hier);
    let ep = common::micro_episode(&bank);
    let errors = common::finite_difference_errors(&model, &ops, &ep, weights(0.5, 0.3), 21, 1e-5);
    let worst = errors.iter().cloned().fold(("".to_string(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    assert!(worst.1 <= 1e-4, "worst parameter {} relative error {}", worst.0, worst.1);
}
