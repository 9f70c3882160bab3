use std::fs;
use std::path::PathBuf;

use tcsm::checkpoint::{self, Checkpoint};
use tcsm::data::{self, generate_dataset};
use tcsm::experiment::{self, DataSource, ExperimentConfig, Variant, RESULTS_FILE};
use tcsm::trainer::{self, stream_rng};
use tcsm::{Error, ModelConfig, TrainConfig};

fn tiny_experiment(out: PathBuf) -> ExperimentConfig {
    ExperimentConfig {
        data: DataSource::Synthetic {
            n_train: 12,
            n_test: 4,
            artifact_level: 0.3,
            data_seed: 7,
        },
        labeled: vec![4],
        variants: vec![Variant::SupervisedOnly, Variant::Full],
        model: ModelConfig {
            depth: 2,
            base_channels: 2,
            size: 16,
            ..ModelConfig::default()
        },
        train: TrainConfig::for_epochs(2),
        seeds: vec![0, 1],
        out_dir: out,
        overwrite: false,
        match_iterations: true,
        gap_images: 3,
    }
}

#[test]
fn directory_round_trip_preserves_samples() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_dataset(&mut stream_rng(3, 0, 0), 5, 32, 0.5).unwrap();
    let mut written = samples.clone();
    written[4] = written[4].without_mask();
    data::write_directory(&written, dir.path()).unwrap();
    let back = data::load_directory(&dir.path().join("images"), Some(&dir.path().join("masks")), 32).unwrap();
    assert_eq!(back.len(), 5);
    for (a, b) in written.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.image, b.image, "quantized synthetic images survive PNG exactly");
        assert_eq!(a.mask, b.mask);
    }
    assert!(back[4].mask.is_none());
}

#[test]
fn isic_sized_files_are_resized() {
    let dir = tempfile::tempdir().unwrap();
    let (images, masks) = (dir.path().join("images"), dir.path().join("masks"));
    fs::create_dir_all(&images).unwrap();
    fs::create_dir_all(&masks).unwrap();
    let (w, h) = (1022u32, 767u32);
    let img = image::RgbImage::from_fn(w, h, |x, y| {
        let inside = (x as f64 - 511.0).powi(2) / 300.0f64.powi(2) + (y as f64 - 383.0).powi(2) / 200.0f64.powi(2) <= 1.0;
        if inside {
            image::Rgb([90, 50, 40])
        } else {
            image::Rgb([220, 170, 140])
        }
    });
    img.save(images.join("ISIC_0000000.jpg")).unwrap();
    let mask = image::GrayImage::from_fn(w, h, |x, y| {
        let inside = (x as f64 - 511.0).powi(2) / 300.0f64.powi(2) + (y as f64 - 383.0).powi(2) / 200.0f64.powi(2) <= 1.0;
        image::Luma([if inside { 255 } else { 0 }])
    });
    mask.save(masks.join("ISIC_0000000.png")).unwrap();

    let loaded = data::load_directory(&images, Some(&masks), 64).unwrap();
    assert_eq!(loaded.len(), 1);
    let s = &loaded[0];
    assert_eq!(s.id, "ISIC_0000000");
    assert_eq!((s.image.channels(), s.image.height(), s.image.width()), (3, 64, 64));
    let m = s.mask.as_ref().unwrap();
    assert!(m.data().iter().all(|&v| v <= 1));
    let area = m.data().iter().filter(|&&v| v == 1).count() as f64 / 4096.0;
    let expected = std::f64::consts::PI * 300.0 * 200.0 / (w as f64 * h as f64);
    assert!((area - expected).abs() < 0.03, "area {area} vs {expected}");
    assert_eq!(m.get(0, 32, 32), 1);
    assert_eq!(m.get(0, 0, 0), 0);
    assert!(s.image.get(0, 32, 32) < 0.5 && s.image.get(0, 1, 1) > 0.8);
}

#[test]
fn orphan_mask_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_dataset(&mut stream_rng(1, 0, 0), 2, 16, 0.0).unwrap();
    data::write_directory(&samples, dir.path()).unwrap();
    fs::remove_file(dir.path().join("images").join("synth-0001.png")).unwrap();
    let err = data::load_directory(&dir.path().join("images"), Some(&dir.path().join("masks")), 16).unwrap_err();
    assert!(matches!(err, Error::Parameter(_)));
}

#[test]
fn corrupt_checkpoint_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let model = trainer::init_model(&ModelConfig { depth: 1, base_channels: 2, size: 8, ..ModelConfig::default() }, 0).unwrap();
    let ckpt = Checkpoint {
        velocity: vec![0.0; model.param_count()],
        model,
        epoch: 0,
        train_config: TrainConfig::for_epochs(1),
    };
    let path = dir.path().join("m.ckpt");
    checkpoint::save_checkpoint(&ckpt, &path).unwrap();
    assert_eq!(checkpoint::load_checkpoint(&path).unwrap(), ckpt);
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 9;
    bytes[last] ^= 0x40;
    fs::write(&path, &bytes).unwrap();
    assert_eq!(checkpoint::load_checkpoint(&path).unwrap_err().code(), "E_INTEGRITY");
}

#[test]
fn experiment_rows_report_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_experiment(dir.path().join("a"));
    let rows = experiment::run_experiment(&cfg).unwrap();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r.labeled, 4);
        assert_eq!(r.n_images, 4);
        assert_eq!(r.unlabeled, if r.variant == Variant::Full { 8 } else { 0 });
        assert!((0.0..=1.0).contains(&r.ja) && r.equivariance_gap >= 0.0);
    }
    let on_disk = experiment::read_results(&cfg.out_dir.join(RESULTS_FILE)).unwrap();
    assert_eq!(on_disk, rows);

    // a second run refuses to clobber, then reproduces the rows exactly
    assert_eq!(experiment::run_experiment(&cfg).unwrap_err().code(), "E_EXISTS");
    let again = experiment::run_experiment(&ExperimentConfig { overwrite: true, ..cfg.clone() }).unwrap();
    let strip = |rs: &[experiment::ResultRow]| {
        rs.iter().map(|r| experiment::ResultRow { wall_seconds: 0.0, ..r.clone() }).collect::<Vec<_>>()
    };
    assert_eq!(strip(&rows), strip(&again));

    let report = experiment::report(&cfg.out_dir).unwrap();
    assert_eq!(report.groups.len(), 2);
    assert!(report.markdown.contains("| full | 4 | 2 |"));
    let out = dir.path().join("report");
    report.write_to(&out).unwrap();
    let series = fs::read_to_string(out.join("series_full.txt")).unwrap();
    assert_eq!(series.lines().count(), 1);
    assert_eq!(series.split_whitespace().count(), 2);
}

#[test]
fn sweep_writes_series() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_experiment(dir.path().join("s"));
    cfg.labeled = vec![2, 6];
    cfg.seeds = vec![0];
    cfg.train = TrainConfig::for_epochs(1);
    let points = experiment::sweep_labeled_budget(&cfg).unwrap();
    assert_eq!(points.len(), 4);
    assert!(cfg.out_dir.join(experiment::SWEEP_FILE).exists());
    let series = fs::read_to_string(cfg.out_dir.join("series_supervised_only.txt")).unwrap();
    let budgets: Vec<usize> = series
        .lines()
        .map(|l| l.split_whitespace().next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(budgets, vec![2, 6]);
}
