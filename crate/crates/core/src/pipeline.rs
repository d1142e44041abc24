//! End-to-end experiment runner: simulate, train the forward model, train
//! the inverse model and baselines, reconstruct, evaluate.
//!
//! Every stage writes a record under `stages/` holding the stage
//! fingerprint and checksums of its outputs; a stage whose record matches
//! the current config and whose outputs are intact is skipped unless forced.
//! `manifest.json` lists every output file with its checksum.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{hio_retrieve, train_baseline_cvae, HioConfig};
use crate::config::{with_severity, ExperimentConfig, Method};
use crate::cvae::Trace;
use crate::data::{
    load_idx_dataset, make_splits, sha256_hex, DatasetHandle, PairedDataset, SplitIndices, Splits,
};
use crate::degrade::output_shape;
use crate::error::{ensure, Error, Result};
use crate::export::{grid, normalize_max, pgm_bytes};
use crate::forward::{train_forward, ForwardModel};
use crate::image::{Image, Measurement, MeasurementShape};
use crate::inverse::{train_inverse, InverseModel};
use crate::metrics::{
    align_up_to_ambiguity, pseudo_max_psnr, psnr, test_elbo_values, EvalReport, EvalRow,
};
use crate::nn::rng::tag;
use crate::nn::{Checkpoint, RngStream};

/// Element type of every network the pipeline trains.
pub type Net = f32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Simulate,
    TrainForward,
    TrainInverse,
    TrainBaseline,
    Reconstruct,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Simulate,
        Stage::TrainForward,
        Stage::TrainInverse,
        Stage::TrainBaseline,
        Stage::Reconstruct,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::TrainForward => "train-forward",
            Stage::TrainInverse => "train-inverse",
            Stage::TrainBaseline => "train-baseline",
            Stage::Reconstruct => "reconstruct",
            Stage::Evaluate => "evaluate",
        }
    }

    fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Simulate => &[],
            Stage::TrainForward => &[Stage::Simulate],
            Stage::TrainInverse => &[Stage::Simulate, Stage::TrainForward],
            Stage::TrainBaseline => &[Stage::Simulate],
            Stage::Reconstruct | Stage::Evaluate => &[
                Stage::Simulate,
                Stage::TrainForward,
                Stage::TrainInverse,
                Stage::TrainBaseline,
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
    /// Contents include wall-clock timings and so differ between runs.
    pub volatile: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub fingerprint: String,
    pub outputs: Vec<FileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputManifest {
    pub schema_version: u32,
    pub config_fingerprint: String,
    pub files: Vec<FileEntry>,
}

impl OutputManifest {
    /// `(path, checksum)` of files expected to be identical across reruns.
    pub fn stable_checksums(&self) -> Vec<(String, String)> {
        self.files
            .iter()
            .filter(|f| !f.volatile)
            .map(|f| (f.path.clone(), f.sha256.clone()))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplitsFile {
    dataset_checksum: String,
    image_shape: (usize, usize),
    measurement_shape: MeasurementShape,
    indices: SplitIndices,
}

/// Loads the configured dataset and applies its preprocessing.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<DatasetHandle> {
    let path = &cfg.dataset.path;
    ensure!(
        path.exists(),
        Config,
        "dataset {} does not exist",
        path.display()
    );
    let mut d = load_idx_dataset(path)?;
    if let Some(want) = &cfg.dataset.checksum {
        ensure!(
            *want == d.checksum,
            Config,
            "dataset checksum {} does not match the expected {want}",
            d.checksum
        );
    }
    d.images = d
        .images
        .iter()
        .map(|i| cfg.dataset.preprocess(i))
        .collect::<Result<_>>()?;
    Ok(d)
}

/// Splits for `cfg`, with true-process measurements.
pub fn prepare_splits(cfg: &ExperimentConfig, data: &DatasetHandle) -> Result<Splits> {
    let (h, w) = data
        .image_shape()
        .ok_or_else(|| Error::Config("dataset is empty".into()))?;
    cfg.validate_for_images(h, w, data.len())?;
    let d = &cfg.dataset;
    let s = make_splits(
        data,
        d.paired,
        d.unpaired,
        d.test,
        &cfg.truth,
        &RngStream::new(cfg.seed, 0),
    )?;
    s.indices.check_disjoint()?;
    Ok(s)
}

pub fn train_forward_model(
    cfg: &ExperimentConfig,
    splits: &Splits,
) -> Result<(ForwardModel<Net>, Trace)> {
    ensure!(
        !splits.paired.is_empty(),
        Config,
        "the proposed method needs paired data (K = 0)"
    );
    train_forward(&splits.paired, &cfg.lowfid, &cfg.forward, cfg.seed)
}

/// Trains the inverse model of `method` (not HIO).
pub fn train_method(
    cfg: &ExperimentConfig,
    method: Method,
    splits: &Splits,
    forward: Option<&ForwardModel<Net>>,
) -> Result<(InverseModel<Net>, Trace)> {
    match method.baseline() {
        None => {
            let fm = forward
                .ok_or_else(|| Error::Config("the proposed method needs a forward model".into()))?;
            train_inverse(&splits.unpaired, fm, &cfg.lowfid, &cfg.inverse, cfg.seed)
        }
        Some(kind) => train_baseline_cvae(
            kind,
            &splits.paired,
            &splits.unpaired,
            &cfg.lowfid,
            cfg.mix,
            &cfg.inverse,
            cfg.seed,
        ),
    }
}

/// The configured HIO settings, or defaults with the image as support and
/// the modulus/intensity choice taken from the true process.
pub fn hio_config(cfg: &ExperimentConfig, image_shape: (usize, usize)) -> HioConfig {
    cfg.hio.clone().unwrap_or_else(|| HioConfig {
        intensity: !cfg.truth.modulus,
        ..HioConfig::new(image_shape)
    })
}

/// HIO reconstructions of the test measurements, aligned to the targets
/// over the shift and rotation ambiguities. Test example `i` uses the
/// stream `(seed, HIO, i)`.
pub fn hio_reconstruct(
    cfg: &ExperimentConfig,
    test: &PairedDataset,
    threads: usize,
) -> Result<Vec<Image>> {
    ensure!(!test.is_empty(), InvalidInput, "empty test set");
    let shape = (test.x[0].height(), test.x[0].width());
    let hc = hio_config(cfg, shape);
    parallel_map(test.len(), threads, |i| {
        let est = hio_retrieve(
            &test.y[i],
            &hc,
            &RngStream::derive(cfg.seed, &[tag::HIO, i as u64]),
        )?;
        Ok(align_up_to_ambiguity(&test.x[i], &est)?.1)
    })
}

/// Runs `f(0..n)` on up to `threads` scoped threads; results keep index
/// order.
pub fn parallel_map<T: Send, G>(n: usize, threads: usize, f: G) -> Result<Vec<T>>
where
    G: Fn(usize) -> Result<T> + Sync,
{
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunks: Vec<_> = slots.chunks_mut(n.div_ceil(threads)).enumerate().collect();
        let size = n.div_ceil(threads);
        for (c, chunk) in chunks {
            let f = &f;
            s.spawn(move || {
                for (j, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(f(c * size + j));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every slot filled"))
        .collect()
}

/// Evaluates one trained inverse model on the test pairs.
pub fn evaluate_model(
    cfg: &ExperimentConfig,
    method: Method,
    model: &InverseModel<Net>,
    test: &PairedDataset,
    severity: f64,
    wall_time_s: f64,
) -> Result<EvalRow> {
    let (_, p) = pseudo_max_psnr(model, test)?;
    let elbos = test_elbo_values(
        model,
        test,
        &RngStream::derive(cfg.seed, &[tag::EVAL]),
        cfg.eval.elbo_samples,
    )?;
    Ok(EvalRow::new(
        method.name(),
        &cfg.task,
        cfg.dataset.paired,
        severity,
        cfg.seed,
        p,
        &elbos,
        wall_time_s,
    ))
}

pub fn evaluate_hio(
    cfg: &ExperimentConfig,
    test: &PairedDataset,
    recon: &[Image],
    severity: f64,
    wall_time_s: f64,
) -> Result<EvalRow> {
    let p = recon
        .iter()
        .zip(&test.x)
        .map(|(r, x)| psnr(x, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalRow::new(
        Method::Hio.name(),
        &cfg.task,
        cfg.dataset.paired,
        severity,
        cfg.seed,
        p,
        &[f64::NAN],
        wall_time_s,
    ))
}

/// Severity label of a config: the quantity [`with_severity`] varies.
pub fn severity_of(cfg: &ExperimentConfig) -> f64 {
    use crate::degrade::DegradationKind::*;
    match cfg.truth.kind {
        Blur => cfg.truth.sigma_psf.unwrap_or(0.0),
        Downsample => cfg.truth.factor.unwrap_or(1) as f64,
        FourierIntensity => cfg.truth.saturation_frac.unwrap_or(1.0),
        _ => 0.0,
    }
}

/// Trains and evaluates `methods` for one config, entirely in memory.
pub fn run_cell(
    cfg: &ExperimentConfig,
    data: &DatasetHandle,
    methods: &[Method],
    threads: usize,
) -> Result<Vec<EvalRow>> {
    let splits = prepare_splits(cfg, data)?;
    let severity = severity_of(cfg);
    let mut forward: Option<(ForwardModel<Net>, f64)> = None;
    let mut rows = Vec::new();
    for &m in methods {
        let t = Instant::now();
        if m == Method::Hio {
            let recon = hio_reconstruct(cfg, &splits.test, threads)?;
            rows.push(evaluate_hio(
                cfg,
                &splits.test,
                &recon,
                severity,
                t.elapsed().as_secs_f64(),
            )?);
            continue;
        }
        let mut extra = 0.0;
        if m == Method::Proposed && forward.is_none() {
            let (fm, _) = train_forward_model(cfg, &splits)?;
            forward = Some((fm, t.elapsed().as_secs_f64()));
        }
        if m == Method::Proposed {
            extra = forward.as_ref().map_or(0.0, |f| f.1);
        }
        let t = Instant::now();
        let (model, _) = train_method(cfg, m, &splits, forward.as_ref().map(|f| &f.0))?;
        rows.push(evaluate_model(
            cfg,
            m,
            &model,
            &splits.test,
            severity,
            extra + t.elapsed().as_secs_f64(),
        )?);
    }
    Ok(rows)
}

/// One sweep cell: paired-set size, severity and seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub paired: usize,
    pub severity: Option<f64>,
    pub seed: u64,
}

impl SweepCell {
    pub fn config(&self, base: &ExperimentConfig) -> Result<ExperimentConfig> {
        let mut c = base.clone();
        c.dataset.paired = self.paired;
        c.seed = self.seed;
        if let Some(s) = self.severity {
            let (t, l) = with_severity(&base.truth, &base.lowfid, s)?;
            c.truth = t;
            c.lowfid = l;
        }
        Ok(c)
    }
}

pub fn sweep_cells(cfg: &ExperimentConfig) -> Result<Vec<SweepCell>> {
    let s = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("config has no sweep section".into()))?;
    let ks = if s.paired.is_empty() {
        vec![cfg.dataset.paired]
    } else {
        s.paired.clone()
    };
    let sev: Vec<Option<f64>> = if s.severities.is_empty() {
        vec![None]
    } else {
        s.severities.iter().map(|&v| Some(v)).collect()
    };
    let mut cells = Vec::new();
    for &k in &ks {
        for &v in &sev {
            for &seed in &s.seeds {
                cells.push(SweepCell {
                    paired: k,
                    severity: v,
                    seed,
                });
            }
        }
    }
    Ok(cells)
}

/// Runs the given cells (in any order) and assembles a sorted report.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    data: &DatasetHandle,
    cells: &[SweepCell],
    threads: usize,
) -> Result<EvalReport> {
    let methods = cfg
        .sweep
        .as_ref()
        .map(|s| s.methods.clone())
        .ok_or_else(|| Error::Config("config has no sweep section".into()))?;
    let per_cell = parallel_map(cells.len(), threads, |i| {
        let c = cells[i].config(cfg)?;
        c.validate()?;
        run_cell(&c, data, &methods, 1)
    })?;
    Ok(EvalReport {
        fingerprint: cfg.fingerprint(),
        rows: per_cell.into_iter().flatten().collect(),
    }
    .sorted())
}

/// Writes `sweep/report.{csv,json,txt}` under `out`; the JSON copy has
/// wall times zeroed.
pub fn write_sweep(out: &Path, report: &EvalReport) -> Result<()> {
    let dir = out.join("sweep");
    write_file(&dir.join("report.csv"), report.to_csv().as_bytes())?;
    write_file(&dir.join("report.txt"), report.to_table().as_bytes())?;
    let mut stable = report.clone();
    stable.rows.iter_mut().for_each(|r| r.wall_time_s = 0.0);
    write_file(
        &dir.join("report.json"),
        &serde_json::to_vec_pretty(&stable)?,
    )
}

/// Pipeline over one output directory.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub force: bool,
    pub threads: usize,
    dataset: std::cell::OnceCell<DatasetHandle>,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, force: bool, threads: usize) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.out_dir.clone();
        Ok(Pipeline {
            cfg,
            out,
            force,
            threads: threads.max(1),
            dataset: std::cell::OnceCell::new(),
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn stage_fingerprint(&self, stage: Stage) -> String {
        sha256_hex(format!("{}:{}", stage.name(), self.cfg.fingerprint()).as_bytes())
    }

    fn record_path(&self, stage: Stage) -> PathBuf {
        self.path(&format!("stages/{}.json", stage.name()))
    }

    fn up_to_date(&self, stage: Stage) -> bool {
        let Ok(text) = std::fs::read_to_string(self.record_path(stage)) else {
            return false;
        };
        let Ok(rec) = serde_json::from_str::<StageRecord>(&text) else {
            return false;
        };
        rec.fingerprint == self.stage_fingerprint(stage)
            && rec.outputs.iter().all(|f| {
                f.volatile
                    || std::fs::read(self.path(&f.path))
                        .map(|b| sha256_hex(&b) == f.sha256)
                        .unwrap_or(false)
            })
    }

    fn dataset(&self) -> Result<&DatasetHandle> {
        if let Some(d) = self.dataset.get() {
            return Ok(d);
        }
        let d = load_dataset(&self.cfg)?;
        Ok(self.dataset.get_or_init(|| d))
    }

    /// Runs `stage` and any stages it needs, skipping up-to-date ones.
    pub fn run(&self, stage: Stage) -> Result<Vec<(Stage, StageOutcome)>> {
        let mut done = Vec::new();
        for &s in stage.deps().iter().chain(std::iter::once(&stage)) {
            done.push((s, self.run_one(s)?));
        }
        self.write_manifest()?;
        Ok(done)
    }

    pub fn run_all(&self) -> Result<Vec<(Stage, StageOutcome)>> {
        let mut done = Vec::new();
        for s in Stage::ALL {
            done.push((s, self.run_one(s)?));
        }
        self.write_manifest()?;
        Ok(done)
    }

    fn run_one(&self, stage: Stage) -> Result<StageOutcome> {
        if !self.force && self.up_to_date(stage) {
            log::info!("stage {} is up to date", stage.name());
            return Ok(StageOutcome::Skipped);
        }
        log::info!("running stage {}", stage.name());
        let mut w = Writer::new(&self.out);
        let t = Instant::now();
        let r = match stage {
            Stage::Simulate => self.simulate(&mut w),
            Stage::TrainForward => self.stage_forward(&mut w),
            Stage::TrainInverse => self.stage_inverse(&mut w),
            Stage::TrainBaseline => self.stage_baselines(&mut w),
            Stage::Reconstruct => self.stage_reconstruct(&mut w),
            Stage::Evaluate => self.stage_evaluate(&mut w),
        };
        r.map_err(|e| match e {
            Error::Numerical {
                context,
                step,
                detail,
            } => Error::Numerical {
                context: format!("stage {}: {context}", stage.name()),
                step,
                detail,
            },
            other => other,
        })?;
        let secs = t.elapsed().as_secs_f64();
        w.put(
            &format!("timings/{}.json", stage.name()),
            serde_json::to_vec(&serde_json::json!({ "seconds": secs }))?,
            true,
        )?;
        let rec = StageRecord {
            stage,
            fingerprint: self.stage_fingerprint(stage),
            outputs: w.entries,
        };
        let p = self.record_path(stage);
        write_file(&p, serde_json::to_string_pretty(&rec)?.as_bytes())?;
        Ok(StageOutcome::Ran)
    }

    fn write_manifest(&self) -> Result<()> {
        let mut files = vec![];
        for s in Stage::ALL {
            if let Ok(text) = std::fs::read_to_string(self.record_path(s)) {
                let rec: StageRecord = serde_json::from_str(&text)?;
                files.extend(rec.outputs);
            }
        }
        files.sort_by(|a, b| a.path.cmp(&b.path));
        let m = OutputManifest {
            schema_version: crate::config::SCHEMA_VERSION,
            config_fingerprint: self.cfg.fingerprint(),
            files,
        };
        write_file(
            &self.path("manifest.json"),
            serde_json::to_string_pretty(&m)?.as_bytes(),
        )
    }

    pub fn read_manifest(out: &Path) -> Result<OutputManifest> {
        let p = out.join("manifest.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn simulate(&self, w: &mut Writer) -> Result<()> {
        let data = self.dataset()?;
        let s = prepare_splits(&self.cfg, data)?;
        let (h, wd) = data.image_shape().expect("validated non-empty");
        let f = SplitsFile {
            dataset_checksum: data.checksum.clone(),
            image_shape: (h, wd),
            measurement_shape: output_shape(&self.cfg.truth, h, wd)?,
            indices: s.indices.clone(),
        };
        w.put("config.json", self.cfg.to_json().into_bytes(), false)?;
        w.put("data/splits.json", serde_json::to_vec_pretty(&f)?, false)?;
        w.put(
            "data/paired_y.bin",
            measurements_to_bytes(&s.paired.y),
            false,
        )?;
        w.put("data/test_y.bin", measurements_to_bytes(&s.test.y), false)?;
        let rows: Vec<Vec<Image>> = s
            .test
            .x
            .iter()
            .zip(&s.test.y)
            .take(self.cfg.eval.export_examples)
            .map(|(x, y)| {
                let mut r = vec![x.clone()];
                r.extend(measurement_panels(y));
                r
            })
            .collect();
        if !rows.is_empty() {
            w.put("data/examples.pgm", pgm_bytes(&grid(&rows, 1)), false)?;
        }
        Ok(())
    }

    /// Splits rebuilt from the simulate stage's files.
    pub fn load_splits(&self) -> Result<Splits> {
        let p = self.path("data/splits.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let f: SplitsFile = serde_json::from_str(&text)?;
        let data = self.dataset()?;
        ensure!(
            f.dataset_checksum == data.checksum,
            Config,
            "dataset changed since the simulate stage"
        );
        let pick =
            |ix: &[usize]| -> Vec<Image> { ix.iter().map(|&i| data.images[i].clone()).collect() };
        let paired_y = self.read_measurements(
            "data/paired_y.bin",
            f.measurement_shape,
            f.indices.paired.len(),
        )?;
        let test_y =
            self.read_measurements("data/test_y.bin", f.measurement_shape, f.indices.test.len())?;
        Ok(Splits {
            paired: PairedDataset::new(pick(&f.indices.paired), paired_y)?,
            unpaired: pick(&f.indices.unpaired),
            test: PairedDataset::new(pick(&f.indices.test), test_y)?,
            indices: f.indices,
        })
    }

    fn read_measurements(
        &self,
        rel: &str,
        shape: MeasurementShape,
        n: usize,
    ) -> Result<Vec<Measurement>> {
        let p = self.path(rel);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let need = n * shape.len() * 8;
        if bytes.len() != need {
            return Err(Error::Format {
                path: p,
                offset: bytes.len().min(need),
                detail: format!(
                    "expected {need} bytes of measurements, found {}",
                    bytes.len()
                ),
            });
        }
        bytes
            .chunks_exact((shape.len() * 8).max(1))
            .take(n)
            .map(|c| {
                Measurement::new(
                    shape,
                    c.chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                )
            })
            .collect()
    }

    fn stage_forward(&self, w: &mut Writer) -> Result<()> {
        let s = self.load_splits()?;
        let (fm, trace) = train_forward_model(&self.cfg, &s)?;
        put_checkpoint(
            w,
            "checkpoints/forward",
            &fm.to_checkpoint(self.cfg.seed, &self.cfg.lowfid)?,
        )?;
        w.put("traces/forward.csv", trace.to_csv().into_bytes(), false)
    }

    pub fn load_forward(&self) -> Result<ForwardModel<Net>> {
        let ck = Checkpoint::<Net>::read(&self.path("checkpoints/forward"))?;
        Ok(ForwardModel::from_checkpoint(&ck)?.0)
    }

    pub fn load_inverse(&self, method: Method) -> Result<InverseModel<Net>> {
        let ck = Checkpoint::<Net>::read(&self.path(&format!("checkpoints/{}", method.name())))?;
        Ok(InverseModel::from_checkpoint(&ck)?.0)
    }

    fn stage_inverse(&self, w: &mut Writer) -> Result<()> {
        let s = self.load_splits()?;
        let fm = self.load_forward()?;
        let (m, trace) = train_method(&self.cfg, Method::Proposed, &s, Some(&fm))?;
        put_checkpoint(
            w,
            "checkpoints/proposed",
            &m.to_checkpoint(self.cfg.seed, "forward_model")?,
        )?;
        w.put("traces/proposed.csv", trace.to_csv().into_bytes(), false)
    }

    fn cvae_baselines(&self) -> Vec<Method> {
        self.cfg
            .baselines
            .iter()
            .copied()
            .filter(|m| *m != Method::Hio)
            .collect()
    }

    fn stage_baselines(&self, w: &mut Writer) -> Result<()> {
        let s = self.load_splits()?;
        for m in self.cvae_baselines() {
            let (model, trace) = train_method(&self.cfg, m, &s, None)?;
            put_checkpoint(
                w,
                &format!("checkpoints/{}", m.name()),
                &model.to_checkpoint(self.cfg.seed, m.name())?,
            )?;
            w.put(
                &format!("traces/{}.csv", m.name()),
                trace.to_csv().into_bytes(),
                false,
            )?;
        }
        if self.cfg.baselines.contains(&Method::Hio) {
            let recon = hio_reconstruct(&self.cfg, &s.test, self.threads)?;
            let mut bytes = Vec::new();
            for r in &recon {
                for v in r.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
            w.put("recon/hio_test.bin", bytes, false)?;
        }
        Ok(())
    }

    fn load_hio(&self, test: &PairedDataset) -> Result<Vec<Image>> {
        let p = self.path("recon/hio_test.bin");
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let (h, w) = (test.x[0].height(), test.x[0].width());
        ensure!(
            bytes.len() == test.len() * h * w * 8,
            InvalidInput,
            "HIO reconstructions do not match the test set"
        );
        bytes
            .chunks_exact(h * w * 8)
            .map(|c| {
                Image::new(
                    h,
                    w,
                    c.chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                )
            })
            .collect()
    }

    fn methods(&self) -> Vec<Method> {
        let mut m = vec![Method::Proposed];
        m.extend(self.cfg.baselines.iter().copied());
        m
    }

    fn stage_reconstruct(&self, w: &mut Writer) -> Result<()> {
        let s = self.load_splits()?;
        let n = self.cfg.eval.export_examples.min(s.test.len());
        for m in self.methods() {
            let mut rows = Vec::new();
            let mut stats = Vec::new();
            if m == Method::Hio {
                let recon = self.load_hio(&s.test)?;
                for i in 0..n {
                    let mut r = vec![s.test.x[i].clone()];
                    r.extend(measurement_panels(&s.test.y[i]));
                    r.push(recon[i].clone());
                    rows.push(r);
                }
            } else {
                let model = self.load_inverse(m)?;
                for i in 0..n {
                    let y = &s.test.y[i];
                    let pm = model.pseudo_max(y)?;
                    let mut rng = RngStream::derive(self.cfg.seed, &[tag::POSTERIOR, i as u64]);
                    let post =
                        model.posterior_sample(y, self.cfg.eval.posterior_samples, &mut rng)?;
                    stats.push(serde_json::json!({
                        "example": i,
                        "psnr_pseudo_max": psnr(&s.test.x[i], &pm)?,
                        "mean_posterior_std": post.mean_std(),
                    }));
                    let mut r = vec![s.test.x[i].clone()];
                    r.extend(measurement_panels(y));
                    r.extend([pm, post.mean.clone(), normalize_max(&post.std)]);
                    r.extend(
                        post.samples
                            .iter()
                            .take(self.cfg.eval.export_draws)
                            .cloned(),
                    );
                    rows.push(r);
                }
                w.put(
                    &format!("recon/{}_posterior.json", m.name()),
                    serde_json::to_vec_pretty(&stats)?,
                    false,
                )?;
            }
            if !rows.is_empty() {
                w.put(
                    &format!("recon/{}.pgm", m.name()),
                    pgm_bytes(&grid(&rows, 1)),
                    false,
                )?;
            }
        }
        Ok(())
    }

    fn stage_seconds(&self, stage: Stage) -> f64 {
        std::fs::read_to_string(self.path(&format!("timings/{}.json", stage.name())))
            .ok()
            .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
            .and_then(|v| v["seconds"].as_f64())
            .unwrap_or(0.0)
    }

    fn stage_evaluate(&self, w: &mut Writer) -> Result<()> {
        let s = self.load_splits()?;
        let sev = severity_of(&self.cfg);
        let mut rows = Vec::new();
        for m in self.methods() {
            let t = Instant::now();
            let train_s = match m {
                Method::Proposed => {
                    self.stage_seconds(Stage::TrainForward)
                        + self.stage_seconds(Stage::TrainInverse)
                }
                _ => self.stage_seconds(Stage::TrainBaseline),
            };
            let row = if m == Method::Hio {
                evaluate_hio(&self.cfg, &s.test, &self.load_hio(&s.test)?, sev, train_s)?
            } else {
                let model = self.load_inverse(m)?;
                evaluate_model(
                    &self.cfg,
                    m,
                    &model,
                    &s.test,
                    sev,
                    train_s + t.elapsed().as_secs_f64(),
                )?
            };
            rows.push(row);
        }
        let report = EvalReport {
            fingerprint: self.cfg.fingerprint(),
            rows,
        };
        w.put("report/report.csv", report.to_csv().into_bytes(), true)?;
        w.put("report/report.txt", report.to_table().into_bytes(), false)?;
        let mut stable = report.clone();
        stable.rows.iter_mut().for_each(|r| r.wall_time_s = 0.0);
        w.put(
            "report/report.json",
            serde_json::to_vec_pretty(&stable)?,
            false,
        )
    }
}

/// Panels for a measurement: one per frame.
fn measurement_panels(y: &Measurement) -> Vec<Image> {
    (0..y.shape().frames)
        .filter_map(|f| y.frame(f).ok())
        .map(|f| {
            let (lo, hi) = f
                .data()
                .iter()
                .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            if lo >= 0.0 && hi <= 1.0 {
                f
            } else {
                normalize_max(
                    &Image::new(
                        f.height(),
                        f.width(),
                        f.data().iter().map(|v| v.max(0.0)).collect(),
                    )
                    .unwrap(),
                )
            }
        })
        .collect()
}

fn measurements_to_bytes(ms: &[Measurement]) -> Vec<u8> {
    let mut out = Vec::new();
    for m in ms {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes stage outputs and remembers their checksums.
struct Writer {
    root: PathBuf,
    entries: Vec<FileEntry>,
}

impl Writer {
    fn new(root: &Path) -> Self {
        Writer {
            root: root.to_path_buf(),
            entries: Vec::new(),
        }
    }

    fn put(&mut self, rel: &str, bytes: Vec<u8>, volatile: bool) -> Result<()> {
        write_file(&self.root.join(rel), &bytes)?;
        self.entries.push(FileEntry {
            path: rel.to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
            volatile,
        });
        Ok(())
    }
}

fn put_checkpoint(w: &mut Writer, stem: &str, ck: &Checkpoint<Net>) -> Result<()> {
    w.put(
        &format!("{stem}.json"),
        serde_json::to_string_pretty(&ck.manifest)?.into_bytes(),
        false,
    )?;
    w.put(&format!("{stem}.bin"), ck.blob(), false)
}
