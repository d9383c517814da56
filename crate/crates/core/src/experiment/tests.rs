use super::*;
use crate::attack::HvpMode;
use proptest::prelude::*;

const SMALL: &str = r#"
name = "small"
replicates = 2
attack_images = 2

[dataset]
kind = "synthetic"
n = 30
classes = 3
image_size = 6
seed = 4

[model]
kind = "mlp"
hidden = 8

[training]
expected_batch = 10
learning_rate = 0.3
epochs = 2

[[mechanisms]]
mechanism = "none"

[[mechanisms]]
mechanism = "vmf"
epsilon_v = 50.0

[[attacks]]
method = "dlg"
iterations = 15
eta = 0.3
hvp_mode = "analytic_mlp"
"#;

fn small(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(SMALL).unwrap();
    cfg.seed = Some(7);
    cfg.output_dir = out.to_path_buf();
    cfg
}

#[test]
fn defaults_and_cells() {
    let cfg = small(Path::new("out"));
    assert_eq!(cfg.replicate_seeds().unwrap(), vec![7, 8]);
    assert!(cfg.attack_trained);
    assert_eq!(cfg.training.clip_norm, 1.0);
    assert_eq!(cfg.attacks[0].hvp_mode, HvpMode::AnalyticMlp);
    assert_eq!(cfg.attacks[0].iterations, 15);
    assert_eq!(cfg.mechanisms[1], Mechanism::Vmf { epsilon_v: 50.0, halve_epsilon: false });
    cfg.validate().unwrap();
}

#[test]
fn invalid_settings_are_config_errors() {
    let base = small(Path::new("out"));
    let mut no_seed = base.clone();
    no_seed.seed = None;
    let mut too_many = base.clone();
    too_many.attack_images = MAX_ATTACK_IMAGES + 1;
    let mut none = base.clone();
    none.mechanisms.clear();
    let mut bad_attack = base.clone();
    bad_attack.attacks[0].iterations = 0;
    let mut bad_lr = base.clone();
    bad_lr.training.learning_rate = -1.0;
    for cfg in [no_seed, too_many, none, bad_attack, bad_lr] {
        assert!(cfg.validate().unwrap_err().is_config());
    }
    assert!(ExperimentConfig::from_toml_str("model = 3").unwrap_err().is_config());
}

#[test]
fn missing_mnist_directory_is_a_data_error() {
    let mut cfg = small(Path::new("out"));
    cfg.dataset = crate::data::DatasetSpec::MnistSubset {
        path: PathBuf::from("/definitely/not/here"),
        n_train: 10,
        n_test: 10,
        image_size: None,
    };
    assert!(cfg.validate().unwrap_err().is_data());
}

#[test]
fn hash_tracks_content() {
    let a = small(Path::new("out"));
    let mut b = a.clone();
    assert_eq!(a.hash().unwrap(), b.hash().unwrap());
    assert_eq!(a.hash().unwrap().len(), 64);
    b.training.epochs += 1;
    assert_ne!(a.hash().unwrap(), b.hash().unwrap());
}

#[test]
fn toml_round_trip() {
    let a = small(Path::new("out"));
    let back = ExperimentConfig::from_toml_str(&a.to_toml_string().unwrap()).unwrap();
    assert_eq!(a, back);
}

#[test]
fn load_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("exp.toml");
    fs::write(&p, SMALL).unwrap();
    let cfg = ExperimentConfig::load(&p).unwrap();
    assert_eq!(cfg.output_dir, dir.path().join("results"));
}

#[test]
fn experiment_is_deterministic_and_self_verifying() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let first = run_experiment(&cfg).unwrap();
    assert_eq!(first.len(), 4);
    assert_eq!(
        first.iter().map(|r| (r.mechanism.name(), r.seed)).collect::<Vec<_>>(),
        vec![("none", 7), ("none", 8), ("vmf", 7), ("vmf", 8)]
    );
    for r in &first {
        assert_eq!(r.epochs.len(), 2);
        assert_eq!(r.attacks.len(), 2);
        assert_eq!(r.attacks[0].weights, Weights::Dummy);
        assert_eq!(r.attacks[1].weights, Weights::Trained);
        assert_eq!(r.attacks[0].images.len(), 2);
        let s = &r.attacks[0].summary;
        let pairs: Vec<(f64, f64)> = r.attacks[0].images.iter().map(|o| (o.ssim, o.mse)).collect();
        assert_eq!(s.per_image, pairs);
        assert_eq!(r.config_hash, cfg.hash().unwrap());
    }

    let again = run_cells(&cfg).unwrap();
    for (a, b) in first.iter().zip(&again) {
        assert_eq!(a.numeric_json().unwrap(), b.record.numeric_json().unwrap());
    }

    let stored = read_records(&dir.path().join(RESULTS_FILE)).unwrap();
    assert_eq!(stored, first);
    assert_eq!(fs::read_dir(dir.path().join(TRACES_DIR)).unwrap().count(), 4);

    let outcomes = verify_records(&stored[..1]).unwrap();
    assert!(outcomes[0].matches);

    let mut tampered = stored[0].clone();
    tampered.final_accuracy += 1e-9;
    let outcomes = verify_records(&[tampered]).unwrap();
    assert!(!outcomes[0].matches);
    assert_eq!(outcomes[0].first_difference.as_deref(), Some("final_accuracy"));

    // Appending keeps earlier lines.
    append_record(&dir.path().join(RESULTS_FILE), &stored[0]).unwrap();
    assert_eq!(read_records(&dir.path().join(RESULTS_FILE)).unwrap().len(), 5);
}

#[test]
fn report_rows_round_trip_and_strip_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.replicates = 1;
    cfg.mechanisms.truncate(1);
    let records = run_experiment(&cfg).unwrap();
    let files = emit_report(&records, dir.path()).unwrap();

    let mut acc = csv::Reader::from_path(&files.accuracy_csv).unwrap();
    let rows: Vec<csv::StringRecord> = acc.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][0], "mlp");
    assert_eq!(&rows[0][1], "none");
    assert_eq!(&rows[0][2], "");
    assert_eq!(rows[0][4].parse::<f64>().unwrap(), records[0].final_accuracy);
    assert_eq!(&rows[0][7], "", "top-10 is undefined for 3 classes");

    let mut att = csv::Reader::from_path(&files.attacks_csv).unwrap();
    let rows: Vec<csv::StringRecord> = att.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    for (row, outcome) in rows.iter().zip(&records[0].attacks) {
        assert_eq!(&row[5], outcome.weights.name());
        assert_eq!(row[7].parse::<f64>().unwrap(), outcome.summary.mean_ssim);
        assert_eq!(row[8].parse::<f64>().unwrap(), outcome.summary.median_mse);
    }

    let settings = records[0].attacks.len();
    assert_eq!(files.strips.len(), cfg.attack_images * settings);
    assert_eq!(fs::read_dir(dir.path().join(STRIPS_DIR)).unwrap().count(), files.strips.len());
    assert!(dir.path().join(ACCURACY_CSV).exists() && dir.path().join(ATTACKS_CSV).exists());
}

#[test]
fn report_groups_replicates() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.attacks.clear();
    let records = run_cells(&cfg).unwrap().into_iter().map(|r| r.record).collect::<Vec<_>>();
    let files = emit_report(&records, dir.path()).unwrap();
    let rows: Vec<csv::StringRecord> =
        csv::Reader::from_path(&files.accuracy_csv).unwrap().records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[1][1], "vmf");
    assert_eq!(rows[1][2].parse::<f64>().unwrap(), 50.0);
    assert_eq!(&rows[1][3], "2");
    let mean = (records[2].final_accuracy + records[3].final_accuracy) / 2.0;
    assert_eq!(rows[1][4].parse::<f64>().unwrap(), mean);
    assert!(files.strips.is_empty());
    assert!(emit_report(&[], dir.path()).is_err());
}

#[test]
fn pgm_strip_layout() {
    let truth = ImageTensor::new(2, 2, 1, vec![0.0, 1.0, 0.5, 2.0]).unwrap();
    let recon = ImageTensor::new(2, 2, 1, vec![-1.0, 0.2, 0.8, 1.0]).unwrap();
    let bytes = pgm_strip_bytes(&truth, &recon).unwrap();
    let header = b"P5\n5 2\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(&bytes[header.len()..], &[0, 255, 255, 0, 51, 128, 255, 255, 204, 255]);

    let rgb = ImageTensor::filled(3, 4, 3, 0.0);
    let bytes = pgm_strip_bytes(&rgb, &rgb).unwrap();
    assert!(bytes.starts_with(b"P5\n9 9\n255\n"));
    assert_eq!(bytes.len(), b"P5\n9 9\n255\n".len() + 81);
    assert!(pgm_strip_bytes(&truth, &rgb).is_err());

    let one = pgm_channel_bytes(&truth, 0).unwrap();
    assert_eq!(one, [b"P5\n2 2\n255\n".as_slice(), &[0, 255, 128, 255]].concat());
    assert!(pgm_channel_bytes(&truth, 1).is_err());
}

#[test]
fn attack_seeds_differ_across_images_and_weights() {
    let a = attack_seed(1, 0, Weights::Dummy, 0);
    assert_ne!(a, attack_seed(1, 0, Weights::Dummy, 1));
    assert_ne!(a, attack_seed(1, 0, Weights::Trained, 0));
    assert_ne!(a, attack_seed(1, 1, Weights::Dummy, 0));
    assert_ne!(a, attack_seed(2, 0, Weights::Dummy, 0));
    assert_eq!(a, attack_seed(1, 0, Weights::Dummy, 0));
}

proptest! {
    #[test]
    fn reals_round_trip_through_text(bits in any::<u64>()) {
        let v = f64::from_bits(bits);
        prop_assume!(v.is_finite());
        let back: f64 = format_real(v).parse().unwrap();
        prop_assert_eq!(back.to_bits(), v.to_bits());
    }
}
