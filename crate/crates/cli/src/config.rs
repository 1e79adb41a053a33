//! Experiment configuration: JSON schema types and their validated form.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use spdelab::dirichlet::{DomainSpec, KillingConfig, Monitoring};
use spdelab::drift::{DriftSpec, DriftVariant, KernelSpec};
use spdelab::engine::IntegratorConfig;
use spdelab::invariant::{PcnConfig, PotentialSpec};
use spdelab::io::read_spectrum_csv;
use spdelab::observables::CylFunc;
use spdelab::spectral::{ModelSpec, SpectralModel};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub drift: Option<DriftSection>,
    /// Gradient-system potential; supplies the drift when `drift` is absent.
    #[serde(default)]
    pub potential: Option<PotentialSpec>,
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub mc: McSection,
    #[serde(default)]
    pub domain: Option<DomainSection>,
    #[serde(default)]
    pub observables: Vec<String>,
    #[serde(default)]
    pub semigroup: SemigroupSection,
    #[serde(default)]
    pub invariant: InvariantSection,
    #[serde(default)]
    pub yosida: YosidaSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_modes: usize,
    pub grid_size: usize,
    /// Preset parameters; exactly one of `spec` and `spectrum_csv` is required.
    #[serde(default)]
    pub spec: Option<ModelSpec>,
    /// Two-column `a_k,c_k` file, relative to the config file.
    #[serde(default)]
    pub spectrum_csv: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSection {
    #[serde(default)]
    pub variant: Option<DriftVariant>,
    /// Dense kernel tensor file for the `KernelCubic` variant.
    #[serde(default)]
    pub tensor_file: Option<PathBuf>,
    #[serde(default)]
    pub zeta2: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub master_seed: u64,
    /// Initial state; zero when omitted.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
}

fn default_paths() -> usize {
    1000
}

impl Default for McSection {
    fn default() -> Self {
        Self {
            n_paths: default_paths(),
            master_seed: 0,
            x0: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub spec: DomainSpec,
    #[serde(default = "default_eps_ladder")]
    pub eps_ladder: Vec<f64>,
}

fn default_eps_ladder() -> Vec<f64> {
    vec![0.2, 0.1, 0.05, 0.025]
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemigroupSection {
    /// Evaluation times; `[integrator.t_final]` when empty.
    #[serde(default)]
    pub times: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvariantMethod {
    #[default]
    Longrun,
    Ensemble,
    Pcn,
    Gaussian,
    WeightedGaussian,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantSection {
    #[serde(default)]
    pub method: InvariantMethod,
    /// Sample count for `longrun` (cap), `gaussian` and `weighted_gaussian`.
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: f64,
    #[serde(default = "default_thin")]
    pub thin: usize,
    /// Horizon for `ensemble`; `8/|ζ|` when omitted.
    #[serde(default)]
    pub t_large: Option<f64>,
    #[serde(default)]
    pub pcn: Option<PcnConfig>,
    #[serde(default = "default_p_list")]
    pub p_list: Vec<f64>,
    /// Time at which the invariance identity is tested.
    #[serde(default = "default_identity_t")]
    pub identity_t: f64,
}

fn default_samples() -> usize {
    2000
}
fn default_burn_in() -> f64 {
    1.0
}
fn default_thin() -> usize {
    10
}
fn default_p_list() -> Vec<f64> {
    vec![1.0, 2.0, 4.0]
}
fn default_identity_t() -> f64 {
    1.0
}

impl Default for InvariantSection {
    fn default() -> Self {
        Self {
            method: InvariantMethod::default(),
            n_samples: default_samples(),
            burn_in: default_burn_in(),
            thin: default_thin(),
            t_large: None,
            pcn: None,
            p_list: default_p_list(),
            identity_t: default_identity_t(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct YosidaSection {
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    #[serde(default = "default_pairs")]
    pub n_pairs: usize,
}

fn default_deltas() -> Vec<f64> {
    vec![1.0, 0.1, 0.01]
}
fn default_pairs() -> usize {
    1000
}

impl Default for YosidaSection {
    fn default() -> Self {
        Self {
            deltas: default_deltas(),
            n_pairs: default_pairs(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub directory: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: default_dir(),
            formats: default_formats(),
        }
    }
}

/// A fully validated experiment.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: SpectralModel,
    pub drift: DriftSpec,
    /// Set when the drift failed its structural checks; only `verify` runs
    /// such an experiment.
    pub drift_error: Option<String>,
    pub potential: Option<PotentialSpec>,
    pub integrator: IntegratorConfig,
    pub x0: Vec<f64>,
    pub observables: Vec<CylFunc>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Experiment {
    pub fn wants(&self, f: Format) -> bool {
        self.config.output.formats.contains(&f)
    }

    /// Observables, or `φ ≡ 1` when none are configured.
    pub fn observables_or_one(&self) -> Vec<CylFunc> {
        if self.observables.is_empty() {
            vec![CylFunc::constant(1.0).expect("finite amplitude")]
        } else {
            self.observables.clone()
        }
    }

    pub fn domain(&self) -> Result<&DomainSection> {
        self.config
            .domain
            .as_ref()
            .ok_or_else(|| anyhow!("config: this command needs a `domain` section"))
    }
}

/// Parses a config file, reporting the JSON path, line and column of any
/// schema violation.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let file = fs::File::open(path).with_context(|| format!("cannot open config {}", path.display()))?;
    let de = &mut serde_json::Deserializer::from_reader(BufReader::new(file));
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        anyhow!("config {}: at `{}`: {}", path.display(), field, e.into_inner())
    })
}

/// Validates every section and builds the model objects.
pub fn load(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<Experiment> {
    let config = parse_config(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    build(config, base, seed, out)
}

pub fn build(config: ExperimentConfig, base: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<Experiment> {
    let model = build_model(&config.model, base).context("config: `model`")?;
    let n = model.n_modes();

    let (drift, drift_error) = build_drift(&config, &model, base)?;
    if let Some(p) = &config.potential {
        p.to_drift(&model).context("config: `potential`")?;
    }

    let integrator = config.integrator;
    integrator.validate().context("config: `integrator`")?;

    if config.mc.n_paths == 0 {
        bail!("config: `mc.n_paths`: need at least one path");
    }
    let x0 = match &config.mc.x0 {
        Some(v) => {
            model.check_state(v).context("config: `mc.x0`")?;
            v.clone()
        }
        None => vec![0.0; n],
    };

    let observables = config
        .observables
        .iter()
        .enumerate()
        .map(|(i, s)| CylFunc::parse(s, n).with_context(|| format!("config: `observables[{i}]`")))
        .collect::<Result<Vec<_>>>()?;

    if let Some(d) = &config.domain {
        d.spec.validate().context("config: `domain.spec`")?;
        d.spec.check_model(&model).context("config: `domain.spec`")?;
        for &eps in &d.eps_ladder {
            KillingConfig {
                epsilon: eps,
                monitoring: Monitoring::FeynmanKac,
            }
            .validate(&d.spec)
            .context("config: `domain.eps_ladder`")?;
        }
    }

    for &t in &config.semigroup.times {
        if !(t.is_finite() && t >= 0.0) {
            bail!("config: `semigroup.times`: times must be finite and nonnegative, got {t}");
        }
    }
    if config.yosida.deltas.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
        bail!("config: `yosida.deltas`: every delta must be positive");
    }
    if config.invariant.p_list.iter().any(|p| !(1.0..=8.0).contains(p)) {
        bail!("config: `invariant.p_list`: moments are supported for 1 <= p <= 8");
    }

    Ok(Experiment {
        seed: seed.unwrap_or(config.mc.master_seed),
        out_dir: out.unwrap_or_else(|| config.output.directory.clone()),
        potential: config.potential.clone(),
        model,
        drift,
        drift_error,
        integrator,
        x0,
        observables,
        config,
    })
}

fn build_model(section: &ModelSection, base: &Path) -> Result<SpectralModel> {
    match (&section.spec, &section.spectrum_csv) {
        (Some(spec), None) => Ok(SpectralModel::build(spec, section.n_modes, section.grid_size)?),
        (None, Some(csv)) => {
            let path = base.join(csv);
            let file = fs::File::open(&path).with_context(|| format!("cannot open spectrum {}", path.display()))?;
            let (a, c) = read_spectrum_csv(BufReader::new(file))?;
            if a.len() != section.n_modes {
                bail!("spectrum file has {} modes but `n_modes` is {}", a.len(), section.n_modes);
            }
            Ok(SpectralModel::custom(a, c, section.grid_size)?)
        }
        _ => bail!("exactly one of `spec` and `spectrum_csv` must be given"),
    }
}

/// A Nemytskii drift with finite data whose only defect is a decreasing `φ′`
/// can still be evaluated, so `verify` can exhibit the violation.
fn recoverable(variant: &DriftVariant, zeta2: f64) -> bool {
    match variant {
        DriftVariant::NemytskiiGradient { phi_prime } => zeta2.is_finite() && phi_prime.iter().all(|c| c.is_finite()),
        _ => false,
    }
}

/// The checked drift, or the unchecked one together with the reason it was
/// rejected.
fn build_drift(config: &ExperimentConfig, model: &SpectralModel, base: &Path) -> Result<(DriftSpec, Option<String>)> {
    let section = match (&config.drift, &config.potential) {
        (Some(_), Some(_)) => bail!("config: give either `drift` or `potential`, not both"),
        (None, Some(p)) => return Ok((p.to_drift(model).context("config: `potential`")?, None)),
        (None, None) => return Ok((DriftSpec::zero(model), None)),
        (Some(d), None) => d,
    };
    let variant = match (&section.variant, &section.tensor_file) {
        (Some(v), None) => v.clone(),
        (None, Some(f)) => DriftVariant::KernelCubic {
            kernel: KernelSpec::read_tensor_file(&base.join(f)).context("config: `drift.tensor_file`")?,
        },
        (None, None) => DriftVariant::Zero,
        (Some(_), Some(_)) => bail!("config: `drift`: give either `variant` or `tensor_file`, not both"),
    };
    let zeta2 = section.zeta2;
    let checked = match &variant {
        DriftVariant::Zero if zeta2 == 0.0 => Ok(DriftSpec::zero(model)),
        DriftVariant::Zero => Err(anyhow!("the zero drift has zeta2 = 0; use the linear variant")),
        DriftVariant::Linear => DriftSpec::linear(model, zeta2).map_err(Into::into),
        DriftVariant::NemytskiiGradient { phi_prime } => {
            DriftSpec::nemytskii(model, phi_prime.clone(), zeta2).map_err(Into::into)
        }
        DriftVariant::KernelCubic { kernel } => DriftSpec::kernel_cubic(model, kernel.clone(), zeta2).map_err(Into::into),
    };
    match checked {
        Ok(d) => Ok((d, None)),
        Err(e) if recoverable(&variant, zeta2) => Ok((
            DriftSpec::unchecked(model, variant, zeta2),
            Some(format!("config: `drift`: {e:#}")),
        )),
        Err(e) => Err(e.context("config: `drift`")),
    }
}
