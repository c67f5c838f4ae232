//! The three-stage pipeline: full-model fine-tuning, compression and optional
//! further fine-tuning, plus the pre-training surrogate that precedes them.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage};
use crate::data::{generate, generate_unbiased, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::{aggregate, evaluate, AuditSummary, MetricsRecord, RecipeResult};
use crate::losses::{BiasPrior, DEFAULT_ENTROPY_WEIGHT};
use crate::model::{build_model, ModelConfig};
use crate::pruning::{
    audit_sparsity, init_real_mask, omp, random_init_real_mask, AuditReport, MaskHyper, MaskSet, ThresholdScheme,
};
use crate::sparsity::SparsityConfig;
use crate::train::{probe_loss, train_masks, train_weights, LossKind, LossSetup, ModelState, OptimConfig, TrainLog};

/// Split name of the shifted-prior test set.
pub const OOD_SPLIT: &str = "ood";
/// Split name of the training-set sample.
pub const TRAIN_SPLIT: &str = "train";
/// Probe-loss interval of [`pretrain_surrogate`].
pub const PROBE_INTERVAL: usize = 25;
const PROBE_BATCH: usize = 256;
/// Add-one smoothing of the fitted bias prior.
pub const PRIOR_SMOOTHING: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Omp,
    MaskTrain,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskInit {
    #[default]
    Magnitude,
    Random,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FineTune {
    #[default]
    None,
    BceFt,
    LmhFt,
}

impl FineTune {
    pub fn loss(self) -> Option<LossKind> {
        match self {
            FineTune::None => None,
            FineTune::BceFt => Some(LossKind::Bce),
            FineTune::LmhFt => Some(LossKind::Lmh),
        }
    }

    pub fn with(loss: Option<LossKind>) -> Self {
        match loss {
            None => FineTune::None,
            Some(LossKind::Bce) => FineTune::BceFt,
            Some(LossKind::Lmh) => FineTune::LmhFt,
        }
    }
}

/// One pipeline, named like `lxmert(bce) + mask train(lmh) + lmh ft`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Recipe {
    pub stage1: LossKind,
    pub method: Method,
    /// Mask-training loss; absent for OMP.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2_loss: Option<LossKind>,
    #[serde(default)]
    pub stage3: FineTune,
    #[serde(default)]
    pub mask_init: MaskInit,
}

impl Recipe {
    pub fn mask_train(stage1: LossKind, stage2: LossKind, stage3: Option<LossKind>) -> Self {
        Self {
            stage1,
            method: Method::MaskTrain,
            stage2_loss: Some(stage2),
            stage3: FineTune::with(stage3),
            mask_init: MaskInit::Magnitude,
        }
    }

    pub fn omp(stage1: LossKind, stage3: LossKind) -> Self {
        Self {
            stage1,
            method: Method::Omp,
            stage2_loss: None,
            stage3: FineTune::with(Some(stage3)),
            mask_init: MaskInit::Magnitude,
        }
    }

    pub fn random_init(self) -> Self {
        Self {
            mask_init: MaskInit::Random,
            ..self
        }
    }

    /// OMP needs a Stage3 to yield a trained subnetwork and takes neither a
    /// loss nor an initialization; mask training needs a loss.
    pub fn validate(&self) -> Result<()> {
        let ok = match self.method {
            Method::Omp => {
                self.stage2_loss.is_none() && self.stage3 != FineTune::None && self.mask_init == MaskInit::Magnitude
            }
            Method::MaskTrain => self.stage2_loss.is_some(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidExperiment(format!("inconsistent recipe {self:?}")))
        }
    }

    /// The eight Stage1/Stage2/Stage3 combinations compared side by side.
    pub fn canonical() -> [Recipe; 8] {
        use LossKind::{Bce, Lmh};
        [
            Recipe::mask_train(Lmh, Lmh, None),
            Recipe::mask_train(Lmh, Lmh, Some(Lmh)),
            Recipe::mask_train(Lmh, Bce, None),
            Recipe::mask_train(Bce, Lmh, None),
            Recipe::mask_train(Bce, Lmh, Some(Lmh)),
            Recipe::mask_train(Bce, Bce, None),
            Recipe::mask_train(Bce, Bce, Some(Bce)),
            Recipe::mask_train(Bce, Bce, Some(Lmh)),
        ]
    }

    pub fn full_model_name(&self) -> String {
        format!("lxmert({})", self.stage1.as_str())
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "lxmert({}) + ", self.stage1.as_str())?;
        match (self.method, self.stage2_loss) {
            (Method::Omp, _) => write!(f, "OMP")?,
            (Method::MaskTrain, loss) => {
                if self.mask_init == MaskInit::Random {
                    write!(f, "rand-init ")?;
                }
                write!(f, "mask train({})", loss.map_or("?", LossKind::as_str))?;
            }
        }
        if let Some(l) = self.stage3.loss() {
            write!(f, " + {} ft", l.as_str())?;
        }
        Ok(())
    }
}

fn parse_loss(s: &str) -> Result<LossKind> {
    match s {
        "bce" => Ok(LossKind::Bce),
        "lmh" => Ok(LossKind::Lmh),
        _ => Err(Error::InvalidExperiment(format!("unknown loss `{s}`"))),
    }
}

fn parenthesized<'a>(s: &'a str, head: &str) -> Option<&'a str> {
    s.strip_prefix(head)?.strip_prefix('(')?.strip_suffix(')')
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidExperiment(format!("cannot parse recipe `{s}`"));
        let parts: Vec<&str> = s.split(" + ").map(str::trim).collect();
        if !(2..=3).contains(&parts.len()) {
            return Err(bad());
        }
        let stage1 = parse_loss(parenthesized(parts[0], "lxmert").ok_or_else(bad)?)?;
        let (method, stage2_loss, mask_init) = if parts[1] == "OMP" {
            (Method::Omp, None, MaskInit::Magnitude)
        } else if let Some(l) = parenthesized(parts[1], "mask train") {
            (Method::MaskTrain, Some(parse_loss(l)?), MaskInit::Magnitude)
        } else if let Some(l) = parenthesized(parts[1], "rand-init mask train") {
            (Method::MaskTrain, Some(parse_loss(l)?), MaskInit::Random)
        } else {
            return Err(bad());
        };
        let stage3 = match parts.get(2) {
            None => FineTune::None,
            Some(p) => FineTune::with(Some(parse_loss(p.strip_suffix(" ft").ok_or_else(bad)?)?)),
        };
        let recipe = Recipe {
            stage1,
            method,
            stage2_loss,
            stage3,
            mask_init,
        };
        recipe.validate()?;
        Ok(recipe)
    }
}

/// Where the examples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synth(SynthSpec),
    Files { train: PathBuf, test: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth(SynthSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Size of the unbiased corpus.
    pub examples: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Initialization seed; shared by every run seed.
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            examples: 20_000,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageOptim {
    pub stage1: OptimConfig,
    pub stage2: OptimConfig,
    pub stage3: OptimConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Training examples scored alongside the test split; `0` skips it.
    pub train_examples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { train_examples: 2000 }
    }
}

/// Full-size training settings, kept for reference and never used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FullScale {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for FullScale {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            learning_rate: 5e-5,
        }
    }
}

/// Everything shared by runs on the same data and pre-trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Setup {
    pub data: DataSource,
    /// Input-facing fields are overwritten from the data.
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub optim: StageOptim,
    /// `z`
    pub entropy_weight: f64,
    pub mask: MaskHyper,
    pub eval: EvalConfig,
    pub full_scale: FullScale,
}

impl Default for Setup {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            optim: StageOptim::default(),
            entropy_weight: DEFAULT_ENTROPY_WEIGHT,
            mask: MaskHyper::default(),
            eval: EvalConfig::default(),
            full_scale: FullScale::default(),
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3]
}

/// A recipe at one sparsity configuration over a list of seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub recipe: Recipe,
    pub sparsity: SparsityConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub setup: Setup,
}

impl ExperimentSpec {
    pub fn new(recipe: Recipe, sparsity: SparsityConfig) -> Self {
        Self {
            recipe,
            sparsity,
            seeds: default_seeds(),
            output_dir: None,
            setup: Setup::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.recipe.validate()?;
        self.sparsity.validate()?;
        self.setup.mask.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidExperiment("no seeds".into()));
        }
        if !(self.setup.entropy_weight >= 0.0) {
            return Err(Error::InvalidExperiment(format!(
                "entropy weight {} is negative",
                self.setup.entropy_weight
            )));
        }
        for o in [&self.setup.optim.stage1, &self.setup.optim.stage2, &self.setup.optim.stage3] {
            o.validate()?;
        }
        Ok(())
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let spec: Self = toml::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }
}

/// Probe losses of the surrogate pre-training, every [`PROBE_INTERVAL`]
/// steps and at the end.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub probe: Vec<(usize, f64)>,
    pub train: TrainLog,
}

/// Fits the freshly initialized model with BCE on unbiased data, so weight
/// magnitudes carry information before any biased training.
pub fn pretrain_surrogate(state: &mut ModelState, unbiased: &Dataset, cfg: &PretrainConfig) -> Result<PretrainLog> {
    if unbiased.is_empty() {
        return Err(Error::EmptySplit("unbiased".into()));
    }
    if cfg.steps == 0 {
        return Ok(PretrainLog::default());
    }
    let per_epoch = unbiased.len().div_ceil(cfg.batch_size.max(1));
    let opt = OptimConfig {
        epochs: cfg.steps.div_ceil(per_epoch),
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        max_steps: Some(cfg.steps),
    };
    let probe: Vec<usize> = (0..unbiased.len().min(PROBE_BATCH)).collect();
    let bce = LossSetup::bce();
    let mut curve = Vec::new();
    let train = train_weights(state, unbiased, &bce, &opt, None, cfg.seed, |step, s| {
        if step % PROBE_INTERVAL == 0 {
            curve.push((step, probe_loss(s, unbiased, &probe, &bce)?));
        }
        Ok(())
    })?;
    curve.push((train.steps, probe_loss(state, unbiased, &probe, &bce)?));
    for (name, p) in state.registry.prunable() {
        let d = p.value.data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        if !d.iter().any(|&v| v != mean) {
            return Err(Error::InvalidExperiment(format!("`{name}` has zero variance after pre-training")));
        }
    }
    Ok(PretrainLog { probe: curve, train })
}

/// Add-one smoothed question-only prior of the training split.
pub fn fit_prior(train: &Dataset) -> Result<BiasPrior> {
    BiasPrior::fit(
        train.examples.iter().map(|e| (e.prototype, e.answer())),
        train.spec.answer_count,
        PRIOR_SMOOTHING,
    )
}

fn loss_setup(kind: LossKind, prior: &BiasPrior, z: f64) -> LossSetup<'_> {
    match kind {
        LossKind::Bce => LossSetup::bce(),
        LossKind::Lmh => LossSetup::lmh(prior, z),
    }
}

/// Stage1: every parameter trains on the training split.
pub fn stage1_finetune(
    state: &mut ModelState,
    train: &Dataset,
    loss: &LossSetup,
    opt: &OptimConfig,
    seed: u64,
) -> Result<TrainLog> {
    train_weights(state, train, loss, opt, None, seed, |_, _| Ok(()))
}

/// Stage2 settings.
#[derive(Clone, Debug)]
pub struct Compression<'a> {
    pub method: Method,
    pub loss: Option<LossSetup<'a>>,
    pub sparsity: &'a SparsityConfig,
    pub init: MaskInit,
    pub hyper: &'a MaskHyper,
    pub opt: &'a OptimConfig,
}

/// Stage2 outcome. The audit has passed by construction.
#[derive(Clone, Debug)]
pub struct Compressed {
    pub masks: MaskSet,
    pub audit: AuditReport,
    pub log: TrainLog,
    pub checksum_before: u64,
    pub checksum_after: u64,
}

/// Stage2: OMP, or mask training with frozen prunable weights. Fails if the
/// resulting masks miss their targets or if any prunable weight moved.
pub fn stage2_compress(state: &mut ModelState, train: &Dataset, c: &Compression, seed: u64) -> Result<Compressed> {
    let registry = &state.registry;
    let scheme = if c.sparsity.is_matrix_specific() {
        ThresholdScheme::Global {
            sparsity: c.sparsity.overall,
        }
    } else {
        ThresholdScheme::PerMatrix
    };
    let targets = c.sparsity.targets(registry, None)?;
    let checksum_before = registry.weight_checksum();
    let (masks, log) = match c.method {
        Method::Omp => (omp(registry, &targets)?, TrainLog::default()),
        Method::MaskTrain => {
            let loss = c
                .loss
                .as_ref()
                .ok_or_else(|| Error::InvalidExperiment("mask training needs a loss".into()))?;
            let mut masks = match c.init {
                MaskInit::Magnitude => init_real_mask(registry, &targets, c.hyper, scheme)?,
                MaskInit::Random => random_init_real_mask(registry, &targets, c.hyper, scheme, seed)?,
            };
            let log = train_masks(state, &mut masks, train, loss, c.opt, seed)?;
            (masks, log)
        }
    };
    let checksum_after = state.registry.weight_checksum();
    if checksum_after != checksum_before {
        return Err(Error::InvalidExperiment("prunable weights changed during compression".into()));
    }
    let audit = audit_sparsity(&masks, &state.registry, c.sparsity)?;
    if !audit.passed {
        return Err(Error::AuditFailed(audit.failures.join("; ")));
    }
    Ok(Compressed {
        masks,
        audit,
        log,
        checksum_before,
        checksum_after,
    })
}

/// Stage3: surviving weights train with the masks fixed.
pub fn stage3_finetune(
    state: &mut ModelState,
    masks: &MaskSet,
    train: &Dataset,
    loss: &LossSetup,
    opt: &OptimConfig,
    seed: u64,
) -> Result<TrainLog> {
    train_weights(state, train, loss, opt, Some(masks), seed, |_, _| Ok(()))
}

/// Per-seed outcome. Fields fill in stage by stage, so a failure keeps
/// whatever finished before it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub full: Vec<MetricsRecord>,
    pub compressed: Vec<MetricsRecord>,
    pub refined: Vec<MetricsRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<AuditSummary>,
    /// Prunable-weight checksums before and after Stage2.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksums: Option<(u64, u64)>,
    pub checkpoints: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SeedRun {
    /// Records of the final subnetwork: after Stage3 if it ran.
    pub fn subnetwork(&self) -> &[MetricsRecord] {
        if self.refined.is_empty() {
            &self.compressed
        } else {
            &self.refined
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub recipe: String,
    pub sparsity: SparsityConfig,
    pub seeds: Vec<SeedRun>,
}

fn pick(records: &[MetricsRecord], split: &str) -> Option<f64> {
    records.iter().find(|r| r.split == split).map(|r| r.overall)
}

impl RunRecord {
    pub fn failures(&self) -> Vec<(u64, &str)> {
        self.seeds
            .iter()
            .filter_map(|s| s.error.as_deref().map(|e| (s.seed, e)))
            .collect()
    }

    /// Overall accuracy of the final subnetwork on `split`, one per seed.
    pub fn subnetwork_overall(&self, split: &str) -> Vec<f64> {
        self.seeds.iter().filter_map(|s| pick(s.subnetwork(), split)).collect()
    }

    /// Overall accuracy of the Stage1 model on `split`, one per seed.
    pub fn full_overall(&self, split: &str) -> Vec<f64> {
        self.seeds.iter().filter_map(|s| pick(&s.full, split)).collect()
    }

    pub fn subnetwork_result(&self) -> RecipeResult {
        RecipeResult {
            recipe: self.recipe.clone(),
            sparsity: self.sparsity.label(),
            overall_sparsity: self.sparsity.overall,
            records: self.seeds.iter().flat_map(|s| s.subnetwork().iter().cloned()).collect(),
        }
    }

    pub fn full_result(&self) -> Result<RecipeResult> {
        let recipe: Recipe = self.recipe.parse()?;
        Ok(RecipeResult {
            recipe: recipe.full_model_name(),
            sparsity: "dense".into(),
            overall_sparsity: 0.0,
            records: self.seeds.iter().flat_map(|s| s.full.iter().cloned()).collect(),
        })
    }

    /// Mean and std of the subnetwork's OOD overall accuracy.
    pub fn ood_summary(&self) -> Result<(f64, f64)> {
        let recs: Vec<MetricsRecord> = self
            .seeds
            .iter()
            .flat_map(|s| s.subnetwork().iter().filter(|r| r.split == OOD_SPLIT).cloned())
            .collect();
        let agg = aggregate(&recs)?;
        let m = agg
            .metrics
            .get("overall")
            .ok_or_else(|| Error::InconsistentRecords("no overall metric".into()))?;
        Ok((m.mean, m.std))
    }
}

/// Lower-case, alphanumerics kept, everything else collapsed to `-`.
pub fn slug(s: &str) -> String {
    let mut out = String::new();
    for c in s.chars() {
        if c.is_ascii_alphanumeric() || c == '.' {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn mix(seed: u64, stage: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stage
}

/// Data, bias prior, and cached pre-trained and Stage1 models for one
/// [`Setup`]. Runs that share a setup reuse the cached stages.
pub struct Pipeline {
    pub setup: Setup,
    pub config: ModelConfig,
    pub train: Dataset,
    pub test: Dataset,
    pub prior: BiasPrior,
    pretrained: Option<(ModelState, PretrainLog)>,
    finetuned: HashMap<(LossKind, u64), (ModelState, Vec<MetricsRecord>)>,
}

impl Pipeline {
    pub fn new(setup: Setup) -> Result<Self> {
        let (train, test) = match &setup.data {
            DataSource::Synth(spec) => {
                let s = generate(spec)?;
                (s.train, s.test)
            }
            DataSource::Files { train, test } => (Dataset::load(train)?, Dataset::load(test)?),
        };
        Self::with_data(setup, train, test)
    }

    pub fn with_data(setup: Setup, train: Dataset, test: Dataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptySplit(train.name));
        }
        if test.is_empty() {
            return Err(Error::EmptySplit(test.name));
        }
        if train.spec.answer_count != test.spec.answer_count {
            return Err(Error::InvalidExperiment("train and test disagree on the answer count".into()));
        }
        let config = train.spec.model_config(&setup.model);
        config.validate()?;
        let prior = fit_prior(&train)?;
        Ok(Self {
            setup,
            config,
            train,
            test,
            prior,
            pretrained: None,
            finetuned: HashMap::new(),
        })
    }

    /// The pre-trained model, computed on first use.
    pub fn pretrained(&mut self) -> Result<&(ModelState, PretrainLog)> {
        if self.pretrained.is_none() {
            let cfg = &self.setup.pretrain;
            let mut state = ModelState::new(build_model(&self.config, cfg.seed)?);
            let unbiased = generate_unbiased(&self.train.spec, cfg.examples)?;
            let log = pretrain_surrogate(&mut state, &unbiased, cfg)?;
            self.pretrained = Some((state, log));
        }
        Ok(self.pretrained.as_ref().expect("just set"))
    }

    /// Replaces the pre-trained model, e.g. with one loaded from disk.
    pub fn set_pretrained(&mut self, state: ModelState) -> Result<()> {
        if state.registry.config() != &self.config {
            return Err(Error::InvalidExperiment("pre-trained model does not match the data".into()));
        }
        self.pretrained = Some((state, PretrainLog::default()));
        self.finetuned.clear();
        Ok(())
    }

    fn train_sample(&self) -> Option<Dataset> {
        let n = self.setup.eval.train_examples.min(self.train.len());
        (n > 0).then(|| Dataset {
            name: TRAIN_SPLIT.into(),
            spec: self.train.spec.clone(),
            examples: self.train.examples[..n].to_vec(),
        })
    }

    /// Test-split and training-sample records of a (sub)network.
    pub fn evaluate(&self, state: &ModelState, masks: Option<&MaskSet>, seed: u64) -> Result<Vec<MetricsRecord>> {
        let mut out = Vec::new();
        let mut test = evaluate(&state.registry, masks, &self.test, seed)?;
        test.split = OOD_SPLIT.into();
        out.push(test);
        if let Some(sample) = self.train_sample() {
            out.push(evaluate(&state.registry, masks, &sample, seed)?);
        }
        Ok(out)
    }

    /// The Stage1 model for `(loss, seed)`, computed on first use.
    pub fn finetuned(&mut self, loss: LossKind, seed: u64) -> Result<(ModelState, Vec<MetricsRecord>)> {
        if let Some(hit) = self.finetuned.get(&(loss, seed)) {
            return Ok(hit.clone());
        }
        let mut state = self.pretrained()?.0.clone();
        let setup = loss_setup(loss, &self.prior, self.setup.entropy_weight);
        stage1_finetune(&mut state, &self.train, &setup, &self.setup.optim.stage1, mix(seed, 1))?;
        let records = self.evaluate(&state, None, seed)?;
        self.finetuned.insert((loss, seed), (state.clone(), records.clone()));
        Ok((state, records))
    }

    /// Runs `recipe` at `sparsity` for every seed. Stage failures are kept in
    /// the per-seed record; only invalid input fails the call.
    pub fn run(
        &mut self,
        recipe: &Recipe,
        sparsity: &SparsityConfig,
        seeds: &[u64],
        output_dir: Option<&Path>,
    ) -> Result<RunRecord> {
        recipe.validate()?;
        sparsity.validate()?;
        let name = recipe.to_string();
        let dir = output_dir.map(|d| d.join(slug(&name)).join(slug(&sparsity.label())));
        let mut runs = Vec::new();
        for &seed in seeds {
            let mut run = SeedRun {
                seed,
                ..SeedRun::default()
            };
            let seed_dir = dir.as_ref().map(|d| d.join(format!("seed-{seed}")));
            if let Err(e) = self.run_seed(recipe, sparsity, seed, seed_dir.as_deref(), &mut run) {
                run.error = Some(e.to_string());
            }
            if let Some(d) = &seed_dir {
                fs::create_dir_all(d)?;
                write_atomic(&d.join("metrics.json"), &serde_json::to_vec_pretty(&run)?)?;
            }
            runs.push(run);
        }
        let record = RunRecord {
            recipe: name,
            sparsity: sparsity.clone(),
            seeds: runs,
        };
        if let Some(d) = &dir {
            fs::create_dir_all(d)?;
            write_atomic(&d.join("run.json"), &serde_json::to_vec_pretty(&record)?)?;
        }
        Ok(record)
    }

    fn run_seed(
        &mut self,
        recipe: &Recipe,
        sparsity: &SparsityConfig,
        seed: u64,
        dir: Option<&Path>,
        run: &mut SeedRun,
    ) -> Result<()> {
        if let Some(d) = dir {
            fs::create_dir_all(d)?;
        }
        let save = |run: &mut SeedRun, file: &str, ck: Checkpoint| -> Result<()> {
            if let Some(d) = dir {
                let path = d.join(file);
                ck.save(&path)?;
                run.checkpoints.push(path);
            }
            Ok(())
        };
        let (mut state, full) = self.finetuned(recipe.stage1, seed)?;
        run.full = full;
        save(run, "full.ckpt", Checkpoint::new(Stage::Finetuned, state.clone(), None))?;

        let z = self.setup.entropy_weight;
        let compression = Compression {
            method: recipe.method,
            loss: recipe.stage2_loss.map(|l| loss_setup(l, &self.prior, z)),
            sparsity,
            init: recipe.mask_init,
            hyper: &self.setup.mask,
            opt: &self.setup.optim.stage2,
        };
        let c = stage2_compress(&mut state, &self.train, &compression, mix(seed, 2))?;
        run.checksums = Some((c.checksum_before, c.checksum_after));
        let summary = AuditSummary::from(&c.audit);
        run.audit = Some(summary.clone());
        run.compressed = self.evaluate(&state, Some(&c.masks), seed)?;
        for r in &mut run.compressed {
            r.audit = Some(summary.clone());
        }
        save(run, "compressed.ckpt", Checkpoint::new(Stage::Compressed, state.clone(), Some(c.masks.clone())))?;

        if let Some(l) = recipe.stage3.loss() {
            let setup = loss_setup(l, &self.prior, z);
            stage3_finetune(&mut state, &c.masks, &self.train, &setup, &self.setup.optim.stage3, mix(seed, 3))?;
            let after = audit_sparsity(&c.masks, &state.registry, sparsity)?;
            if !after.passed {
                return Err(Error::AuditFailed(after.failures.join("; ")));
            }
            run.refined = self.evaluate(&state, Some(&c.masks), seed)?;
            for r in &mut run.refined {
                r.audit = Some(summary.clone());
            }
            save(run, "refined.ckpt", Checkpoint::new(Stage::Refined, state, Some(c.masks)))?;
        }
        Ok(())
    }
}

/// Runs one experiment end to end.
pub fn run_recipe(spec: &ExperimentSpec) -> Result<RunRecord> {
    spec.validate()?;
    let mut pipeline = Pipeline::new(spec.setup.clone())?;
    if let Some(d) = &spec.output_dir {
        fs::create_dir_all(d)?;
        write_atomic(&d.join("experiment.toml"), spec.to_toml()?.as_bytes())?;
    }
    pipeline.run(&spec.recipe, &spec.sparsity, &spec.seeds, spec.output_dir.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recipe_names_follow_the_convention() {
        use LossKind::{Bce, Lmh};
        let cases = [
            (Recipe::mask_train(Bce, Lmh, None), "lxmert(bce) + mask train(lmh)"),
            (Recipe::mask_train(Bce, Bce, Some(Lmh)), "lxmert(bce) + mask train(bce) + lmh ft"),
            (Recipe::omp(Lmh, Bce), "lxmert(lmh) + OMP + bce ft"),
            (
                Recipe::mask_train(Lmh, Bce, None).random_init(),
                "lxmert(lmh) + rand-init mask train(bce)",
            ),
        ];
        for (recipe, name) in cases {
            assert_eq!(recipe.to_string(), name);
            assert_eq!(name.parse::<Recipe>().unwrap(), recipe);
        }
    }

    #[test]
    fn omp_without_finetuning_is_rejected() {
        assert!("lxmert(bce) + OMP".parse::<Recipe>().is_err());
        let r = Recipe {
            stage3: FineTune::None,
            ..Recipe::omp(LossKind::Bce, LossKind::Bce)
        };
        assert!(r.validate().is_err());
        assert!("lxmert(bce) + mask train(xyz)".parse::<Recipe>().is_err());
        assert!("bert(bce) + mask train(bce)".parse::<Recipe>().is_err());
    }

    #[test]
    fn canonical_recipes_are_distinct() {
        let names: std::collections::BTreeSet<String> = Recipe::canonical().iter().map(|r| r.to_string()).collect();
        assert_eq!(names.len(), 8);
    }

    #[test]
    fn spec_roundtrips_through_toml() {
        let mut spec = ExperimentSpec::new(
            Recipe::mask_train(LossKind::Bce, LossKind::Lmh, Some(LossKind::Lmh)),
            SparsityConfig::uniform(0.5),
        );
        spec.output_dir = Some(PathBuf::from("runs/a"));
        let text = spec.to_toml().unwrap();
        assert_eq!(ExperimentSpec::from_toml(&text).unwrap(), spec);
    }

    #[test]
    fn minimal_toml_takes_defaults() {
        let spec = ExperimentSpec::from_toml(
            r#"
            [recipe]
            stage1 = "lmh"
            method = "mask-train"
            stage2_loss = "lmh"

            [sparsity]
            overall = 0.7
            scheme = "uniform"
            "#,
        )
        .unwrap();
        assert_eq!(spec.seeds, vec![0, 1, 2, 3]);
        assert_eq!(spec.setup, Setup::default());
        assert_eq!(spec.recipe.stage3, FineTune::None);
        assert_eq!(spec.setup.full_scale.learning_rate, 5e-5);
    }

    #[test]
    fn slugs_are_path_safe() {
        assert_eq!(slug("lxmert(bce) + mask train(lmh)"), "lxmert-bce-mask-train-lmh");
        assert_eq!(slug("modality 0.50/0.70/0.41"), "modality-0.50-0.70-0.41");
    }
}
