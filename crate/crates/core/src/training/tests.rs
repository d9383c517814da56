use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::tensor::ImageTensor;

fn vec_of(v: &[f64]) -> FlatVector {
    FlatVector::new(v.to_vec()).unwrap()
}

fn cosine(a: &FlatVector, b: &FlatVector) -> f64 {
    a.dot(b).unwrap() / (a.l2_norm() * b.l2_norm())
}

fn cfg(mechanism: Mechanism) -> TrainingConfig {
    TrainingConfig {
        mechanism,
        clip_norm: 1.0,
        expected_batch: 4.0,
        learning_rate: 0.1,
        epochs: 1,
        seed: 7,
        sampling: Sampling::Poisson,
        vmf_scope: VmfScope::Concatenated,
    }
}

/// Two classes split by the sign of the mean pixel: left half bright vs right half bright.
fn toy_set(n: usize, seed: u64) -> Vec<LabeledExample> {
    let mut r = RngStream::new(seed).rng();
    (0..n)
        .map(|i| {
            let y = i % 2;
            let data = (0..16)
                .map(|p| {
                    let bright = (p % 4 < 2) == (y == 0);
                    let base = if bright { 0.8 } else { 0.2 };
                    base + r.random_range(-0.1..0.1)
                })
                .collect();
            LabeledExample::new(ImageTensor::new(4, 4, 1, data).unwrap(), y)
        })
        .collect()
}

fn toy_arch() -> Architecture {
    Architecture::mlp(4, 4, 1, 6, 2)
}

#[test]
fn clip_examples() {
    assert_eq!(clip_gradient(&vec_of(&[0.3, 0.4]), 1.0), vec_of(&[0.3, 0.4]));
    let c = clip_gradient(&vec_of(&[3.0, 4.0]), 1.0);
    assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);
}

#[test]
fn scale_examples() {
    let s = scale_gradient(&vec_of(&[3.0, 4.0]), 1.0).unwrap();
    assert!((s[0] - 0.6).abs() < 1e-15 && (s[1] - 0.8).abs() < 1e-15);
    let up = scale_gradient(&vec_of(&[0.3, 0.4]), 1.0).unwrap();
    assert!((up[0] - 0.6).abs() < 1e-15 && (up[1] - 0.8).abs() < 1e-15);
    assert!(matches!(scale_gradient(&FlatVector::zeros(3), 1.0), Err(Error::ZeroVector)));
}

#[test]
fn zero_gradient_gets_random_direction_of_norm_c() {
    let a = scale_gradient_or_random(&FlatVector::zeros(5), 2.0, RngStream::new(1));
    let b = scale_gradient_or_random(&FlatVector::zeros(5), 2.0, RngStream::new(1));
    assert_eq!(a, b);
    assert!((a.l2_norm() - 2.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn clip_and_scale_contracts(v in prop::collection::vec(-100.0f64..100.0, 1..40), c in 0.01f64..10.0) {
        let g = FlatVector::new(v).unwrap();
        prop_assume!(g.l2_norm() > 1e-6);
        let clipped = clip_gradient(&g, c);
        prop_assert!(clipped.l2_norm() <= c * (1.0 + 1e-12));
        prop_assert!(clipped.l2_norm() <= g.l2_norm() * (1.0 + 1e-12));
        prop_assert!((cosine(&clipped, &g) - 1.0).abs() < 1e-12);
        let scaled = scale_gradient(&g, c).unwrap();
        prop_assert!((scaled.l2_norm() - c).abs() <= 1e-12 * c);
        prop_assert!((cosine(&scaled, &g) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn sensitivity_examples() {
    assert_eq!(batch_sensitivity(1.0, 1.0), 2.0);
    assert!((batch_sensitivity(1.0, 200.0) - 0.01).abs() < 1e-18);
}

#[test]
fn poisson_edge_cases() {
    assert_eq!(poisson_batch(7, 7.0, RngStream::new(3)), (0..7).collect::<Vec<_>>());
    let empties = (0..100).filter(|&s| poisson_batch(50, 1e-9, RngStream::new(s)).is_empty()).count();
    assert_eq!(empties, 100);
}

#[test]
fn poisson_mean_batch_size_is_binomial() {
    let draws = 10_000;
    let total: usize = (0..draws).map(|s| poisson_batch(1000, 100.0, RngStream::new(s)).len()).sum();
    let mean = total as f64 / draws as f64;
    // std of the mean of 10^4 Binomial(1000, 0.1) draws
    let sd = (1000.0 * 0.1 * 0.9 / draws as f64).sqrt();
    assert!((mean - 100.0).abs() < 3.0 * sd, "mean batch size {mean}");
}

#[test]
fn fixed_batch_is_distinct_and_sized() {
    let b = fixed_batch(20, 5.0, RngStream::new(4));
    assert_eq!(b.len(), 5);
    assert!(b.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn gaussian_sigma_zero_is_plain_sgd() {
    let arch = toy_arch();
    let params = NetworkParams::init(arch, RngStream::new(1)).unwrap();
    let batch = toy_set(1, 2);
    let mut c = cfg(Mechanism::Gaussian { sigma: 0.0 });
    c.clip_norm = 1e12;
    c.expected_batch = 1.0;
    let next = dpsgd_step_gaussian(&params, &batch, &c, RngStream::new(5)).unwrap();
    let (_, g) = loss_and_grad(&params, &batch[0]).unwrap();
    for ((n, p), gi) in next.as_slice().iter().zip(params.as_slice()).zip(g.as_slice()) {
        assert_eq!(*n, p - 0.1 * gi);
    }
    let other = dpsgd_step_gaussian(&params, &batch, &c, RngStream::new(99)).unwrap();
    assert_eq!(next, other);
}

#[test]
fn noisy_steps_are_reproducible_across_thread_counts() {
    let arch = toy_arch();
    let params = NetworkParams::init(arch, RngStream::new(1)).unwrap();
    let batch = toy_set(8, 2);
    for mech in [Mechanism::Gaussian { sigma: 0.7 }, Mechanism::Vmf { epsilon_v: 5.0, halve_epsilon: false }] {
        let c = cfg(mech);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| step(&params, &batch, &c, RngStream::new(11), 0).unwrap().params)
        };
        let a = run(1);
        let b = run(4);
        assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn vmf_contributions_have_norm_c() {
    let arch = toy_arch();
    let params = NetworkParams::init(arch, RngStream::new(1)).unwrap();
    for scope in [VmfScope::Concatenated, VmfScope::PerLayer] {
        let mut c = cfg(Mechanism::Vmf { epsilon_v: 3.0, halve_epsilon: false });
        c.clip_norm = 2.5;
        c.vmf_scope = scope;
        for (i, ex) in toy_set(10, 3).iter().enumerate() {
            let (_, pre, post) = private_contribution(&params, ex, &c, RngStream::new(i as u64)).unwrap();
            assert!((pre.l2_norm() - 2.5).abs() < 1e-9 * 2.5);
            assert!((post.l2_norm() - 2.5).abs() < 1e-9 * 2.5);
        }
    }
}

fn vmf_step_distance(epsilon_v: f64) -> (f64, TrainingConfig, usize) {
    let arch = toy_arch();
    let params = NetworkParams::init(arch, RngStream::new(1)).unwrap();
    let batch = toy_set(6, 4);
    let noisy = dirdpsgd_step_vmf(
        &params,
        &batch,
        &cfg(Mechanism::Vmf { epsilon_v, halve_epsilon: false }),
        RngStream::new(8),
    )
    .unwrap();
    let c = cfg(Mechanism::None);
    let mut exact = params.clone();
    let mut sum = FlatVector::zeros(params.len());
    for ex in &batch {
        let (_, g) = loss_and_grad(&params, ex).unwrap();
        sum.axpy(1.0, &scale_gradient(&g, c.clip_norm).unwrap()).unwrap();
    }
    exact.descend(c.learning_rate / c.expected_batch, &sum).unwrap();
    (noisy.flatten().sub(&exact.flatten()).unwrap().l2_norm(), c, params.len())
}

#[test]
fn vmf_huge_epsilon_approaches_scaled_step() {
    // Each noisy direction sits about sqrt((K - 1) / eps) from its mean, so the
    // summed deviation over B examples is about eta C / L sqrt(B (K - 1) / eps).
    let (dist, c, k) = vmf_step_distance(1e6);
    let expected = c.learning_rate * c.clip_norm / c.expected_batch * (6.0 * (k - 1) as f64 / 1e6).sqrt();
    assert!(dist <= 3.0 * expected, "distance {dist}, expected about {expected}");
    let (dist, c, _) = vmf_step_distance(1e10);
    assert!(dist <= 1e-3 * c.learning_rate * c.clip_norm, "distance {dist}");
}

#[test]
fn vmf_single_example_update_has_norm_eta_over_l() {
    let arch = toy_arch();
    let params = NetworkParams::init(arch, RngStream::new(1)).unwrap();
    let c = cfg(Mechanism::Vmf { epsilon_v: 2.0, halve_epsilon: false });
    let next = dirdpsgd_step_vmf(&params, &toy_set(1, 5), &c, RngStream::new(2)).unwrap();
    let moved = next.flatten().sub(&params.flatten()).unwrap().l2_norm();
    assert!((moved - c.learning_rate / c.expected_batch).abs() < 1e-9);
}

#[test]
fn halve_epsilon_halves_concentration() {
    let m = Mechanism::Vmf { epsilon_v: 10.0, halve_epsilon: true };
    assert_eq!(m.vmf_concentration(), Some(5.0));
    assert_eq!(Mechanism::Vmf { epsilon_v: 10.0, halve_epsilon: false }.vmf_concentration(), Some(10.0));
}

#[test]
fn step_functions_check_mechanism() {
    let params = NetworkParams::init(toy_arch(), RngStream::new(1)).unwrap();
    let batch = toy_set(2, 1);
    assert!(dpsgd_step_gaussian(&params, &batch, &cfg(Mechanism::None), RngStream::new(0)).is_err());
    assert!(dirdpsgd_step_vmf(&params, &batch, &cfg(Mechanism::None), RngStream::new(0)).is_err());
    assert!(matches!(sgd_step(&params, &[], &cfg(Mechanism::None)), Err(Error::Empty(_))));
}

#[test]
fn none_mechanism_steps_agree() {
    let params = NetworkParams::init(toy_arch(), RngStream::new(1)).unwrap();
    let batch = toy_set(5, 9);
    let c = cfg(Mechanism::None);
    let a = sgd_step(&params, &batch, &c).unwrap();
    let b = step(&params, &batch, &c, RngStream::new(123), 0).unwrap().params;
    assert_eq!(a, b);
}

#[test]
fn train_separates_toy_set() {
    let data = toy_set(40, 1);
    let mut c = cfg(Mechanism::None);
    c.epochs = 50;
    c.learning_rate = 0.5;
    let (params, trace) = train(toy_arch(), &data, &data, &c).unwrap();
    let (acc, top) = evaluate(&params, &data).unwrap();
    assert!(acc >= 0.95, "train accuracy {acc}");
    assert_eq!(top, vec![(1, acc)]);
    assert_eq!(trace.epochs.len(), 50);
    assert_eq!(trace.steps.len(), 50 * c.steps_per_epoch(40));
    assert!(trace.steps.windows(2).all(|w| w[0].step + 1 == w[1].step));
}

#[test]
fn vmf_large_epsilon_tracks_noise_free_training() {
    let train_set = toy_set(40, 1);
    let test_set = toy_set(40, 2);
    let mut base = cfg(Mechanism::None);
    base.epochs = 30;
    base.learning_rate = 0.5;
    let (_, none) = train(toy_arch(), &train_set, &test_set, &base).unwrap();
    let vmf_cfg = TrainingConfig { mechanism: Mechanism::Vmf { epsilon_v: 300_000.0, halve_epsilon: false }, ..base };
    let (_, vmf) = train(toy_arch(), &train_set, &test_set, &vmf_cfg).unwrap();
    let gap = none.final_accuracy().unwrap() - vmf.final_accuracy().unwrap();
    assert!(gap <= 0.03, "gap {gap}");
}

#[test]
fn training_is_deterministic() {
    let data = toy_set(20, 3);
    let c = TrainingConfig { epochs: 3, ..cfg(Mechanism::Gaussian { sigma: 0.5 }) };
    let a = train(toy_arch(), &data, &data, &c).unwrap();
    let b = train(toy_arch(), &data, &data, &c).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.1.to_jsonl().unwrap(), b.1.to_jsonl().unwrap());
}

#[test]
fn trace_jsonl_shape() {
    let data = toy_set(8, 3);
    let c = TrainingConfig { epochs: 2, ..cfg(Mechanism::None) };
    let (_, trace) = train(toy_arch(), &data, &data, &c).unwrap();
    let text = trace.to_jsonl().unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), trace.steps.len() + 2);
    assert_eq!(lines[0]["kind"], "step");
    assert_eq!(lines.last().unwrap()["kind"], "epoch");
}

#[test]
fn config_validation() {
    let mut c = cfg(Mechanism::None);
    c.clip_norm = 0.0;
    assert!(c.validate().unwrap_err().is_config());
    let mut c = cfg(Mechanism::None);
    c.expected_batch = 0.5;
    assert!(c.validate().is_err());
    assert!(cfg(Mechanism::Vmf { epsilon_v: -1.0, halve_epsilon: false }).validate().is_err());
    assert!(cfg(Mechanism::Gaussian { sigma: f64::NAN }).validate().is_err());
    let mut c = cfg(Mechanism::None);
    c.epochs = 0;
    assert!(c.validate().is_err());
}

#[test]
fn config_toml_round_trip() {
    let text = "mechanism = \"vmf\"\nepsilon_v = 500.0\nclip_norm = 1.0\nexpected_batch = 64.0\nlearning_rate = 0.1\nepochs = 2\nseed = 3\nvmf_scope = \"per_layer\"\n";
    let c: TrainingConfig = toml::from_str(text).unwrap();
    assert_eq!(c.mechanism, Mechanism::Vmf { epsilon_v: 500.0, halve_epsilon: false });
    assert_eq!(c.vmf_scope, VmfScope::PerLayer);
    assert_eq!(c.sampling, Sampling::Poisson);
    let back: TrainingConfig = toml::from_str(&toml::to_string(&c).unwrap()).unwrap();
    assert_eq!(back, c);
}
