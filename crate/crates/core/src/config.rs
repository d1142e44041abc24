//! Experiment configuration: JSON with a schema version, environment
//! overrides and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::{BaselineKind, HioConfig};
use crate::cvae::{NetConfig, TrainConfig};
use crate::data::sha256_hex;
use crate::degrade::{DegradationKind, DegradationSpec};
use crate::error::{ensure, Error, Result};
use crate::forward::ForwardTrainConfig;
use crate::image::Image;
use crate::inverse::{InverseTrainConfig, MixRatio};
use crate::nn::{Activation, AdamConfig};

pub const SCHEMA_VERSION: u32 = 1;
pub const ENV_PREFIX: &str = "VICI_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// IDX3 image file.
    pub path: PathBuf,
    /// Expected hex SHA-256 of the file, checked when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
    /// Paired examples `K`.
    pub paired: usize,
    /// Unpaired targets `L`.
    pub unpaired: usize,
    pub test: usize,
    /// Block-mean reduction applied to every image after loading.
    #[serde(default = "one")]
    pub reduce: usize,
    /// Pixels at or above the threshold become 1, the rest 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binarize: Option<f64>,
}

fn one() -> usize {
    1
}

impl DatasetConfig {
    /// Applies the configured reduction and binarization.
    pub fn preprocess(&self, img: &Image) -> Result<Image> {
        let mut out = if self.reduce > 1 {
            crate::degrade::downsample(img, self.reduce)?
        } else {
            img.clone()
        };
        if let Some(t) = self.binarize {
            out.data_mut()
                .iter_mut()
                .for_each(|v| *v = if *v >= t { 1.0 } else { 0.0 });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Latent samples averaged per test ELBO estimate.
    #[serde(default = "one")]
    pub elbo_samples: usize,
    /// Posterior draws per exported test example.
    #[serde(default = "sixteen")]
    pub posterior_samples: usize,
    /// Test examples written as image grids.
    #[serde(default = "four")]
    pub export_examples: usize,
    /// Draws shown per grid.
    #[serde(default = "four")]
    pub export_draws: usize,
}

fn sixteen() -> usize {
    16
}

fn four() -> usize {
    4
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            elbo_samples: 1,
            posterior_samples: 16,
            export_examples: 4,
            export_draws: 4,
        }
    }
}

/// Methods compared by `evaluate` and `sweep`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Proposed,
    PairedOnly,
    SimulatedOnly,
    PairedPlusSimulated,
    Hio,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::PairedOnly => "paired_only",
            Method::SimulatedOnly => "simulated_only",
            Method::PairedPlusSimulated => "paired_plus_simulated",
            Method::Hio => "hio",
        }
    }

    pub fn baseline(self) -> Option<BaselineKind> {
        match self {
            Method::Proposed => None,
            Method::PairedOnly => Some(BaselineKind::PairedOnly),
            Method::SimulatedOnly => Some(BaselineKind::SimulatedOnly),
            Method::PairedPlusSimulated => Some(BaselineKind::PairedPlusSimulated),
            Method::Hio => Some(BaselineKind::Hio),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Paired-set sizes; empty means the dataset's `paired` value only.
    #[serde(default)]
    pub paired: Vec<usize>,
    /// Degradation severities (see [`with_severity`]); empty means the
    /// configured processes unchanged.
    #[serde(default)]
    pub severities: Vec<f64>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub task: String,
    pub dataset: DatasetConfig,
    /// The process that produced the real measurements.
    pub truth: DegradationSpec,
    /// Analytic approximation available to the forward model.
    pub lowfid: DegradationSpec,
    pub forward: ForwardTrainConfig,
    pub inverse: InverseTrainConfig,
    /// Methods trained and evaluated besides the proposed one.
    #[serde(default)]
    pub baselines: Vec<Method>,
    #[serde(default)]
    pub mix: MixRatio,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hio: Option<HioConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// Desk-scale MNIST deblurring: true blur sigma 2 px with 16 dB noise,
    /// low-fidelity blur sigma 1.5 px without noise.
    pub fn mnist_blur(path: PathBuf, out_dir: PathBuf) -> Self {
        let adam = AdamConfig::default();
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            task: "blur".into(),
            dataset: DatasetConfig {
                path,
                checksum: None,
                paired: 200,
                unpaired: 10_000,
                test: 200,
                reduce: 1,
                binarize: None,
            },
            truth: DegradationSpec::blur(2.0, Some(16.0)),
            lowfid: DegradationSpec::blur(1.5, None),
            forward: ForwardTrainConfig {
                net: NetConfig {
                    hidden: vec![256],
                    activation: Activation::Relu,
                    latent_dim: 20,
                },
                train: TrainConfig {
                    iterations: 2000,
                    batch_size: 64,
                    adam,
                },
                lowfid_samples: 1,
            },
            inverse: InverseTrainConfig {
                net: NetConfig {
                    hidden: vec![256],
                    activation: Activation::Relu,
                    latent_dim: 32,
                },
                train: TrainConfig {
                    iterations: 3000,
                    batch_size: 64,
                    adam,
                },
            },
            baselines: vec![Method::PairedOnly],
            mix: MixRatio::Proportional,
            hio: None,
            eval: EvalConfig::default(),
            sweep: None,
            seed: 0,
            out_dir,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        Self::from_value(v)
    }

    fn from_value(v: Value) -> Result<Self> {
        let version = v.get("schema_version").and_then(Value::as_u64);
        ensure!(
            version == Some(SCHEMA_VERSION as u64),
            Config,
            "schema_version {version:?} is not supported (expected {SCHEMA_VERSION})"
        );
        serde_json::from_value(v).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    /// Reads a config file, applying `VICI_*` overrides from `env`.
    pub fn load(path: &Path, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut v: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        apply_env_overrides(&mut v, env)?;
        let cfg = Self::from_value(v)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `base` (or, without a file, [`Self::mnist_blur`] reading
    /// `default_data`) with `VICI_*` overrides from `env`, validated.
    pub fn resolve(
        base: Option<&Path>,
        default_data: &Path,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        match base {
            Some(p) => Self::load(p, env),
            None => {
                let mut v = serde_json::to_value(Self::mnist_blur(
                    default_data.into(),
                    "runs/blur".into(),
                ))?;
                apply_env_overrides(&mut v, env)?;
                let cfg = Self::from_value(v)?;
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks everything that does not need the dataset file.
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.schema_version == SCHEMA_VERSION,
            Config,
            "schema_version {} is not supported",
            self.schema_version
        );
        ensure!(!self.task.is_empty(), Config, "task name is empty");
        ensure!(
            self.truth.kind.family() == self.lowfid.kind.family(),
            Config,
            "true process {:?} and low-fidelity process {:?} are different kinds",
            self.truth.kind,
            self.lowfid.kind
        );
        ensure!(
            self.dataset.reduce >= 1,
            Config,
            "dataset.reduce must be >= 1"
        );
        ensure!(self.dataset.test >= 1, Config, "dataset.test must be >= 1");
        self.forward.net.validate()?;
        self.forward.train.validate()?;
        self.inverse.net.validate()?;
        self.inverse.train.validate()?;
        ensure!(
            self.eval.posterior_samples >= 1,
            Config,
            "eval.posterior_samples must be >= 1"
        );
        ensure!(
            self.eval.elbo_samples >= 1,
            Config,
            "eval.elbo_samples must be >= 1"
        );
        let needs_paired = self.dataset.paired > 0;
        ensure!(
            !needs_paired || self.dataset.paired >= self.forward.train.batch_size,
            Config,
            "K = {} paired examples is fewer than the forward batch size {}",
            self.dataset.paired,
            self.forward.train.batch_size
        );
        if self.baselines.contains(&Method::Hio) {
            ensure!(
                self.truth.kind == DegradationKind::FourierIntensity,
                Config,
                "hio needs a Fourier intensity task"
            );
        }
        ensure!(
            !self.baselines.contains(&Method::Proposed),
            Config,
            "the proposed method is always run; list only baselines"
        );
        if let Some(s) = &self.sweep {
            ensure!(
                !s.methods.is_empty() && !s.seeds.is_empty(),
                Config,
                "sweep needs methods and seeds"
            );
        }
        Ok(())
    }

    /// Checks shapes against the actual images.
    pub fn validate_for_images(&self, height: usize, width: usize, available: usize) -> Result<()> {
        let d = &self.dataset;
        ensure!(
            d.paired + d.unpaired + d.test <= available,
            Config,
            "K + L + test = {} exceeds the {available} images in the dataset",
            d.paired + d.unpaired + d.test
        );
        self.truth.validate(height, width)?;
        self.lowfid.validate(height, width)?;
        Ok(())
    }

    /// Hash of everything that affects results (the output directory is
    /// excluded).
    pub fn fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("out_dir");
        }
        sha256_hex(canonical(&v).as_bytes())
    }
}

/// JSON with object keys sorted, for hashing.
pub fn canonical(v: &Value) -> String {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical(&m[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(a) => format!(
            "[{}]",
            a.iter().map(canonical).collect::<Vec<_>>().join(",")
        ),
        other => other.to_string(),
    }
}

/// Applies `VICI_A__B__C=value` as an override of key path `a.b.c`. Values
/// are parsed as JSON when possible and kept as strings otherwise.
pub fn apply_env_overrides(
    v: &mut Value,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<()> {
    let mut pairs: Vec<(String, String)> = env
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    pairs.sort();
    for (key, raw) in pairs {
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .split("__")
            .map(|s| s.to_ascii_lowercase())
            .collect();
        ensure!(
            path.iter().all(|p| !p.is_empty()),
            Config,
            "malformed override variable {key}"
        );
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw.clone()));
        let mut cur = &mut *v;
        for (i, part) in path.iter().enumerate() {
            let Value::Object(map) = cur else {
                return Err(Error::Config(format!(
                    "{key}: {} is not an object",
                    path[..i].join(".")
                )));
            };
            if i + 1 == path.len() {
                map.insert(part.clone(), value);
                break;
            }
            cur = map
                .entry(part.clone())
                .or_insert_with(|| Value::Object(Default::default()));
        }
    }
    Ok(())
}

/// Rescales a degradation to severity `s`: the blur width for blur tasks
/// (with the low-fidelity width scaled by the same ratio), the reduction
/// factor for downsampling, the saturation fraction for Fourier tasks.
pub fn with_severity(
    truth: &DegradationSpec,
    lowfid: &DegradationSpec,
    s: f64,
) -> Result<(DegradationSpec, DegradationSpec)> {
    let (mut t, mut l) = (truth.clone(), lowfid.clone());
    match truth.kind {
        DegradationKind::Blur => {
            let base = truth.sigma_psf.unwrap_or(1.0);
            t.sigma_psf = Some(s);
            l.sigma_psf = lowfid.sigma_psf.map(|v| v * s / base);
        }
        DegradationKind::Downsample => {
            ensure!(
                s >= 1.0 && s.fract() == 0.0,
                Config,
                "downsample severity must be a whole factor"
            );
            t.factor = Some(s as usize);
            l.factor = Some(s as usize);
        }
        DegradationKind::FourierIntensity => {
            t.saturation_frac = Some(s);
            l.saturation_frac = Some(s);
        }
        other => {
            return Err(Error::Config(format!("no severity axis for {other:?}")));
        }
    }
    Ok((t, l))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig::mnist_blur("data/mnist/train-images-idx3-ubyte".into(), "runs/x".into())
    }

    #[test]
    fn json_roundtrip() {
        let c = cfg();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn wrong_version_and_unknown_fields_are_config_errors() {
        let mut v = serde_json::to_value(cfg()).unwrap();
        v["schema_version"] = 7.into();
        assert!(matches!(
            ExperimentConfig::from_value(v),
            Err(Error::Config(_))
        ));
        let mut v = serde_json::to_value(cfg()).unwrap();
        v["bogus"] = 1.into();
        assert!(matches!(
            ExperimentConfig::from_value(v),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mixed_kinds_are_rejected() {
        let mut c = cfg();
        c.lowfid = DegradationSpec::downsample(2, None, None);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert!(cfg().validate().is_ok());
    }

    #[test]
    fn env_overrides() {
        let mut v = serde_json::to_value(cfg()).unwrap();
        apply_env_overrides(
            &mut v,
            [
                ("VICI_DATASET__PAIRED".to_string(), "64".to_string()),
                ("VICI_TASK".to_string(), "deblur".to_string()),
                ("OTHER".to_string(), "1".to_string()),
            ],
        )
        .unwrap();
        let c = ExperimentConfig::from_value(v).unwrap();
        assert_eq!(c.dataset.paired, 64);
        assert_eq!(c.task, "deblur");
        let mut v = serde_json::to_value(cfg()).unwrap();
        assert!(apply_env_overrides(&mut v, [("VICI_TASK__X".into(), "1".into())]).is_err());
    }

    #[test]
    fn fingerprint_ignores_output_dir() {
        let a = cfg();
        let mut b = cfg();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seed = 9;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn severity_scales_both_blurs() {
        let c = cfg();
        let (t, l) = with_severity(&c.truth, &c.lowfid, 4.0).unwrap();
        assert_eq!(t.sigma_psf, Some(4.0));
        assert_eq!(l.sigma_psf, Some(3.0));
        assert_eq!(t.snr_db, Some(16.0));
    }
}
