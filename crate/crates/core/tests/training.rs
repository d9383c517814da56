//! End-to-end training checks and moment oracles for single noisy steps.

use dirdp_core::data::{DatasetSpec, SynthSpec};
use dirdp_core::nn::{checkpoint, per_example_grads, Architecture, LabeledExample, NetworkParams};
use dirdp_core::training::{
    clip_gradient, dirdpsgd_step_vmf, dpsgd_step_gaussian, evaluate, train, Mechanism, Sampling, TrainingConfig,
    VmfScope,
};
use dirdp_core::RngStream;
use statrs::function::gamma::ln_gamma;

fn config(mechanism: Mechanism, seed: u64) -> TrainingConfig {
    TrainingConfig {
        mechanism,
        clip_norm: 1.0,
        expected_batch: 8.0,
        learning_rate: 0.5,
        epochs: 6,
        seed,
        sampling: Sampling::Poisson,
        vmf_scope: VmfScope::Concatenated,
    }
}

fn blobs(seed: u64) -> (Vec<LabeledExample>, Vec<LabeledExample>) {
    let spec = SynthSpec { contrast: 0.9, n_test: 40, ..SynthSpec::new(80, 4, 8, seed) };
    DatasetSpec::Synthetic(spec).load().map(|d| (d.train, d.test)).unwrap()
}

#[test]
fn both_architectures_learn_separable_blobs() {
    let (tr, te) = blobs(1);
    // Sigmoid LeNet sits on a long plateau before it separates the classes.
    let lenet = TrainingConfig { learning_rate: 2.0, epochs: 60, ..config(Mechanism::None, 3) };
    for (arch, cfg) in [
        (Architecture::mlp(8, 8, 1, 16, 4), config(Mechanism::None, 3)),
        (Architecture::lenet_small(8, 8, 1, 4), lenet),
    ] {
        let (_, trace) = train(arch, &tr, &te, &cfg).unwrap();
        assert!(trace.final_accuracy().unwrap() >= 0.9, "{arch}: {:?}", trace.final_accuracy());
    }
}

#[test]
fn trace_shape_and_checkpoint_round_trip() {
    let (tr, te) = blobs(2);
    let cfg = TrainingConfig {
        vmf_scope: VmfScope::PerLayer,
        ..config(Mechanism::Vmf { epsilon_v: 500.0, halve_epsilon: false }, 4)
    };
    let (params, trace) = train(Architecture::lenet_small(8, 8, 1, 4), &tr, &te, &cfg).unwrap();
    assert_eq!(trace.steps.len(), cfg.epochs * cfg.steps_per_epoch(tr.len()));
    assert_eq!(trace.epochs.len(), cfg.epochs);
    let jsonl = trace.to_jsonl().unwrap();
    assert_eq!(jsonl.lines().count(), trace.steps.len() + trace.epochs.len());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.bin");
    checkpoint::save(&params, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back, params);
    assert_eq!(evaluate(&back, &te).unwrap().0, trace.final_accuracy().unwrap());
}

#[test]
fn heavy_noise_costs_accuracy() {
    let (tr, te) = blobs(5);
    let arch = Architecture::mlp(8, 8, 1, 16, 4);
    let acc = |m| train(arch, &tr, &te, &config(m, 6)).unwrap().1.final_accuracy().unwrap();
    let clean = acc(Mechanism::None);
    let noisy = acc(Mechanism::Gaussian { sigma: 30.0 });
    let scrambled = acc(Mechanism::Vmf { epsilon_v: 0.01, halve_epsilon: false });
    assert!(clean > noisy + 0.2 && clean > scrambled + 0.2, "{clean} {noisy} {scrambled}");
}

fn small_batch() -> (NetworkParams, Vec<LabeledExample>) {
    let arch = Architecture::mlp(4, 4, 1, 3, 3);
    let params = NetworkParams::init(arch, RngStream::new(8)).unwrap();
    let batch = SynthSpec::new(5, 3, 4, 9).generate().unwrap();
    (params, batch)
}

#[test]
fn gaussian_step_moments() {
    let (params, batch) = small_batch();
    let sigma = 0.7;
    let cfg = TrainingConfig { learning_rate: 0.2, ..config(Mechanism::Gaussian { sigma }, 0) };
    let (eta, l) = (cfg.learning_rate, cfg.expected_batch);
    // E[update] = -eta / L sum_i clip(g_i);  Var = (eta / L)^2 B sigma^2 per coordinate.
    let grads = per_example_grads(&params, &batch).unwrap();
    let d = params.len();
    let mut expected = vec![0.0; d];
    for g in &grads.grads {
        for (e, v) in expected.iter_mut().zip(clip_gradient(g, cfg.clip_norm).as_slice()) {
            *e -= eta / l * v;
        }
    }
    let var = (eta / l).powi(2) * batch.len() as f64 * sigma * sigma;
    let n = 4000;
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for s in 0..n {
        let next = dpsgd_step_gaussian(&params, &batch, &cfg, RngStream::new(s)).unwrap();
        for k in 0..d {
            let u = next.as_slice()[k] - params.as_slice()[k];
            sum[k] += u;
            sq[k] += (u - expected[k]).powi(2);
        }
    }
    let se = (var / n as f64).sqrt();
    for k in 0..d {
        assert!((sum[k] / n as f64 - expected[k]).abs() < 5.0 * se, "coordinate {k}");
        assert!((sq[k] / n as f64 / var - 1.0).abs() < 0.15, "coordinate {k}");
    }
}

fn mean_resultant(dim: usize, kappa: f64) -> f64 {
    let series = |nu: f64| {
        let half = kappa / 2.0;
        let mut log_term = nu * half.ln() - ln_gamma(nu + 1.0) - kappa;
        let mut sum = 0.0;
        for k in 0..20_000 {
            let t = log_term.exp();
            sum += t;
            if k > 5 && t < sum * 1e-17 {
                break;
            }
            let k = k as f64;
            log_term += 2.0 * half.ln() - ((k + 1.0) * (k + 1.0 + nu)).ln();
        }
        sum
    };
    series(dim as f64 / 2.0) / series(dim as f64 / 2.0 - 1.0)
}

#[test]
fn vmf_step_mean_follows_the_bessel_ratio() {
    // One example: E[update] = -(eta C / L) A_K(k) g / |g|.
    let (params, batch) = small_batch();
    let one = &batch[..1];
    let kappa = 30.0;
    let cfg = TrainingConfig { learning_rate: 0.2, ..config(Mechanism::Vmf { epsilon_v: kappa, halve_epsilon: false }, 0) };
    let g = &per_example_grads(&params, one).unwrap().grads[0];
    let gn = g.l2_norm();
    let d = params.len();
    let scale = cfg.learning_rate * cfg.clip_norm / cfg.expected_batch;
    let n = 6000;
    let mut mean = vec![0.0; d];
    for s in 0..n {
        let next = dirdpsgd_step_vmf(&params, one, &cfg, RngStream::new(s)).unwrap();
        for k in 0..d {
            mean[k] += (next.as_slice()[k] - params.as_slice()[k]) / n as f64;
        }
    }
    let along: f64 = -mean.iter().zip(g.as_slice()).map(|(m, v)| m * v / gn).sum::<f64>() / scale;
    let oracle = mean_resultant(d, kappa);
    assert!((along - oracle).abs() < 0.02, "{along} vs {oracle} (K={d})");
}
