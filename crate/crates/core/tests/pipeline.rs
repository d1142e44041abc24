use std::path::Path;

use vici_core::config::{ExperimentConfig, Method, SweepConfig};
use vici_core::data::idx_bytes;
use vici_core::nn::RngStream;
use vici_core::pipeline::{run_sweep, sweep_cells, Pipeline, Stage, StageOutcome};
use vici_core::{Error, Image};

fn blobs(n: usize, size: usize, seed: u64) -> Vec<Image> {
    let mut rng = RngStream::new(seed, 0);
    (0..n)
        .map(|_| {
            let (cy, cx) = (rng.uniform() * size as f64, rng.uniform() * size as f64);
            let r = 1.0 + 2.0 * rng.uniform();
            let mut img = Image::zeros(size, size);
            for y in 0..size {
                for x in 0..size {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    img.set(y, x, (-d2 / (r * r)).exp());
                }
            }
            img
        })
        .collect()
}

fn tiny_config(dir: &Path) -> ExperimentConfig {
    let data = dir.join("toy.idx");
    std::fs::write(&data, idx_bytes(&blobs(60, 8, 3)).unwrap()).unwrap();
    let mut c = ExperimentConfig::mnist_blur(data, dir.join("out"));
    c.truth.sigma_psf = Some(1.0);
    c.lowfid.sigma_psf = Some(0.8);
    c.dataset.paired = 8;
    c.dataset.unpaired = 30;
    c.dataset.test = 6;
    for net in [&mut c.forward.net, &mut c.inverse.net] {
        net.hidden = vec![12];
        net.latent_dim = 3;
    }
    for t in [&mut c.forward.train, &mut c.inverse.train] {
        t.iterations = 15;
        t.batch_size = 4;
    }
    c.eval.posterior_samples = 3;
    c.eval.export_examples = 2;
    c
}

#[test]
fn full_run_then_skip_then_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = cfg.out_dir.clone();
    let p = Pipeline::new(cfg.clone(), false, 1).unwrap();
    let first = p.run_all().unwrap();
    assert!(first.iter().all(|(_, o)| *o == StageOutcome::Ran));
    for f in [
        "report/report.csv",
        "report/report.json",
        "recon/proposed.pgm",
        "checkpoints/paired_only.bin",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let csv = std::fs::read_to_string(out.join("report/report.csv")).unwrap();
    assert!(csv.starts_with("method,task,K,severity,seed,psnr_mean,elbo_mean,elbo_std,wall_time_s"));
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.contains(",all,"));

    let again = Pipeline::new(cfg.clone(), false, 1)
        .unwrap()
        .run_all()
        .unwrap();
    assert!(again.iter().all(|(_, o)| *o == StageOutcome::Skipped));

    let m1 = Pipeline::read_manifest(&out).unwrap();
    let forced = Pipeline::new(cfg, true, 1).unwrap().run_all().unwrap();
    assert!(forced.iter().all(|(_, o)| *o == StageOutcome::Ran));
    assert_eq!(
        m1.stable_checksums(),
        Pipeline::read_manifest(&out).unwrap().stable_checksums()
    );
}

#[test]
fn changed_config_reruns_and_corrupt_output_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    let out = cfg.out_dir.clone();
    Pipeline::new(cfg.clone(), false, 1)
        .unwrap()
        .run(Stage::TrainForward)
        .unwrap();
    std::fs::write(out.join("checkpoints/forward.bin"), b"junk").unwrap();
    let r = Pipeline::new(cfg.clone(), false, 1)
        .unwrap()
        .run(Stage::TrainForward)
        .unwrap();
    assert_eq!(
        r,
        vec![
            (Stage::Simulate, StageOutcome::Skipped),
            (Stage::TrainForward, StageOutcome::Ran)
        ]
    );
    cfg.seed = 9;
    let r = Pipeline::new(cfg, false, 1)
        .unwrap()
        .run(Stage::Simulate)
        .unwrap();
    assert_eq!(r, vec![(Stage::Simulate, StageOutcome::Ran)]);
}

#[test]
fn missing_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.dataset.path = dir.path().join("nope.idx");
    let e = Pipeline::new(cfg, false, 1)
        .unwrap()
        .run(Stage::Simulate)
        .unwrap_err();
    assert!(matches!(e, Error::Config(_)), "{e}");
}

#[test]
fn too_many_examples_requested() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.dataset.unpaired = 1000;
    let e = Pipeline::new(cfg, false, 1)
        .unwrap()
        .run(Stage::Simulate)
        .unwrap_err();
    assert!(matches!(e, Error::Config(_)), "{e}");
}

#[test]
fn sweep_is_independent_of_cell_order_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.sweep = Some(SweepConfig {
        paired: vec![4, 8],
        severities: vec![0.8, 1.2],
        methods: vec![Method::Proposed, Method::PairedOnly],
        seeds: vec![1],
    });
    let data = vici_core::pipeline::load_dataset(&cfg).unwrap();
    let cells = sweep_cells(&cfg).unwrap();
    assert_eq!(cells.len(), 4);
    let a = run_sweep(&cfg, &data, &cells, 1).unwrap();
    let mut rev = cells.clone();
    rev.reverse();
    let b = run_sweep(&cfg, &data, &rev, 3).unwrap();
    assert_eq!(a.rows.len(), 8);
    for r in a.rows.iter().chain(&b.rows) {
        assert!(r.psnr_mean.is_finite());
    }
    let strip = |r: &vici_core::metrics::EvalReport| {
        r.rows
            .iter()
            .map(|x| {
                (
                    x.method.clone(),
                    x.k,
                    x.severity.to_bits(),
                    x.psnr_mean.to_bits(),
                    x.elbo_mean.to_bits(),
                )
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&a), strip(&b));
}
