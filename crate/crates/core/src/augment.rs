//! Synthetic image banks and per-epoch composition of real and synthetic
//! training data.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::rng::{derive_seed, keyed_rng};
use crate::sampler::{sample_batch, sample_seeds, SampleRequest, SamplerConfig, UncondForm};
use crate::schedule::{encode_steps, NoiseSchedule};
use crate::shapesworld::Dataset;

/// Images per synthesis work unit. Fixed so results do not depend on the
/// number of workers.
pub const SYNTHESIS_CHUNK: usize = 16;

/// Settings a bank was produced with; compared on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankProvenance {
    pub w: f64,
    pub steps: usize,
    pub eta: f64,
    pub seed: u64,
    pub uncond: UncondForm,
    pub denoiser_hash: String,
}

/// One synthetic image per `(image_id, λ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBank {
    lambdas: Vec<f64>,
    num_images: usize,
    /// `entries[k][i]` is image `i` at `lambdas[k]`.
    entries: Vec<Vec<ImageGrid>>,
    provenance: BankProvenance,
}

impl SyntheticBank {
    /// Assembles a bank, rejecting incomplete or ragged entry tables.
    pub fn from_parts(lambdas: Vec<f64>, entries: Vec<Vec<ImageGrid>>, provenance: BankProvenance) -> Result<Self> {
        validate_lambdas(&lambdas)?;
        if entries.len() != lambdas.len() {
            return Err(Error::shape(lambdas.len(), entries.len()));
        }
        let num_images = entries.first().map_or(0, Vec::len);
        for (k, col) in entries.iter().enumerate() {
            if col.len() != num_images {
                return Err(Error::MissingBankEntry {
                    image_id: col.len().min(num_images),
                    lambda: lambdas[k],
                });
            }
        }
        if let Some(first) = entries.first().and_then(|c| c.first()) {
            for col in &entries {
                for g in col {
                    first.ensure_same_shape(g)?;
                }
            }
        }
        Ok(Self {
            lambdas,
            num_images,
            entries,
            provenance,
        })
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn num_images(&self) -> usize {
        self.num_images
    }

    pub fn len(&self) -> usize {
        self.num_images * self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn provenance(&self) -> &BankProvenance {
        &self.provenance
    }

    pub fn column(&self, lambda: f64) -> Option<&[ImageGrid]> {
        self.lambda_index(lambda).map(|k| self.entries[k].as_slice())
    }

    pub fn columns(&self) -> &[Vec<ImageGrid>] {
        &self.entries
    }

    fn lambda_index(&self, lambda: f64) -> Option<usize> {
        self.lambdas.iter().position(|&l| l == lambda)
    }

    pub fn contains_lambda(&self, lambda: f64) -> bool {
        self.lambda_index(lambda).is_some()
    }

    pub fn get(&self, image_id: usize, lambda: f64) -> Result<&ImageGrid> {
        self.lambda_index(lambda)
            .and_then(|k| self.entries[k].get(image_id))
            .ok_or(Error::MissingBankEntry { image_id, lambda })
    }
}

fn validate_lambdas(lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() {
        return Err(Error::InvalidArgument("encode-ratio set is empty".into()));
    }
    for (i, &l) in lambdas.iter().enumerate() {
        if !(l > 0.0 && l <= 1.0) {
            return Err(Error::InvalidArgument(format!("encode ratio {l} outside (0, 1]")));
        }
        if lambdas[..i].contains(&l) {
            return Err(Error::InvalidArgument(format!("encode ratio {l} listed twice")));
        }
    }
    Ok(())
}

/// Sampler settings shared by every entry of a bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankConfig {
    pub w: f64,
    /// Requested reverse steps; capped at `⌊λT⌋` for small `λ`.
    pub steps: usize,
    pub eta: f64,
    pub uncond: UncondForm,
}

impl Default for BankConfig {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            w: s.w,
            steps: s.steps,
            eta: s.eta,
            uncond: s.uncond,
        }
    }
}

impl BankConfig {
    /// Sampler configuration used for encode ratio `lambda` at `T` steps.
    pub fn sampler(&self, timesteps: usize, lambda: f64) -> SamplerConfig {
        SamplerConfig {
            w: self.w,
            lambda,
            steps: self.steps.min(encode_steps(timesteps, lambda)).max(1),
            eta: self.eta,
            seed: 0,
            uncond: self.uncond,
            clamp_output: true,
        }
    }
}

/// Per-image noise seeds of a bank entry, keyed by `(seed, image_id, λ)`.
pub fn entry_seeds(seed: u64, image_id: usize, lambda: f64) -> (u64, u64) {
    sample_seeds(derive_seed(seed, "bank-image", image_id as u64), lambda)
}

/// Synthesises `x̂_{i,λ}` for every item of `dataset` and every `λ`.
/// Work is split into fixed chunks and run on the current rayon pool.
pub fn synthesize_bank(
    d: &Denoiser,
    s: &NoiseSchedule,
    dataset: &Dataset,
    lambdas: &[f64],
    cfg: &BankConfig,
    seed: u64,
    denoiser_hash: &str,
) -> Result<SyntheticBank> {
    validate_lambdas(lambdas)?;
    let n = dataset.len();
    let units: Vec<(usize, usize)> = (0..lambdas.len())
        .flat_map(|k| (0..n.div_ceil(SYNTHESIS_CHUNK)).map(move |c| (k, c)))
        .collect();
    let results: Vec<Vec<ImageGrid>> = units
        .par_iter()
        .map(|&(k, c)| {
            let lambda = lambdas[k];
            let sc = cfg.sampler(s.timesteps(), lambda);
            let lo = c * SYNTHESIS_CHUNK;
            let hi = (lo + SYNTHESIS_CHUNK).min(n);
            let reqs: Vec<SampleRequest<'_>> = (lo..hi)
                .map(|i| {
                    let (encode_seed, loop_seed) = entry_seeds(seed, i, lambda);
                    SampleRequest {
                        x_ref: &dataset.items[i].scene.image,
                        cond: &dataset.items[i].condition,
                        encode_seed,
                        loop_seed,
                    }
                })
                .collect();
            sample_batch(d, s, &reqs, &sc)
        })
        .collect::<Result<_>>()?;
    let mut entries: Vec<Vec<ImageGrid>> = vec![Vec::with_capacity(n); lambdas.len()];
    for ((k, _), chunk) in units.iter().zip(results) {
        entries[*k].extend(chunk);
    }
    SyntheticBank::from_parts(
        lambdas.to_vec(),
        entries,
        BankProvenance {
            w: cfg.w,
            steps: cfg.steps,
            eta: cfg.eta,
            seed,
            uncond: cfg.uncond,
            denoiser_hash: denoiser_hash.to_string(),
        },
    )
}

/// How synthetic images are mixed into segmentor training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentationScheme {
    /// Real data only.
    None,
    /// Every label once real, once synthetic at `lambda`.
    Fixed { lambda: f64 },
    /// Synthetic slots draw `λ` uniformly from `lambdas`.
    Uniform {
        lambdas: Vec<f64>,
        /// Draw once for the whole run instead of every epoch.
        #[serde(default)]
        once: bool,
    },
    /// Synthetic slots use `schedule[epoch - 1]`.
    Adaptive { schedule: Vec<f64> },
    /// Synthetic images at `lambda` only, no real images.
    SyntheticOnly { lambda: f64 },
}

impl AugmentationScheme {
    /// Short stable name used in reports.
    pub fn label(&self) -> String {
        match self {
            AugmentationScheme::None => "none".into(),
            AugmentationScheme::Fixed { lambda } => format!("fixed({lambda})"),
            AugmentationScheme::Uniform { .. } => "uniform".into(),
            AugmentationScheme::Adaptive { .. } => "adaptive".into(),
            AugmentationScheme::SyntheticOnly { lambda } => format!("synthetic_only({lambda})"),
        }
    }

    /// Encode ratios the scheme reads from the bank.
    pub fn required_lambdas(&self) -> Vec<f64> {
        let mut v = match self {
            AugmentationScheme::None => vec![],
            AugmentationScheme::Fixed { lambda } | AugmentationScheme::SyntheticOnly { lambda } => vec![*lambda],
            AugmentationScheme::Uniform { lambdas, .. } => lambdas.clone(),
            AugmentationScheme::Adaptive { schedule } => schedule.clone(),
        };
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    /// Checks the scheme against the bank it will draw from.
    pub fn validate(&self, bank: Option<&SyntheticBank>) -> Result<()> {
        if let AugmentationScheme::Adaptive { schedule } = self {
            if schedule.is_empty() {
                return Err(Error::InvalidConfig("adaptive schedule is empty".into()));
            }
            if schedule.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::InvalidConfig("adaptive schedule must be non-decreasing".into()));
            }
        }
        if let AugmentationScheme::Uniform { lambdas, .. } = self {
            validate_lambdas(lambdas)?;
        }
        let need = self.required_lambdas();
        if need.is_empty() {
            return Ok(());
        }
        let bank = bank.ok_or_else(|| Error::InvalidConfig(format!("scheme {} needs a synthetic bank", self.label())))?;
        for l in need {
            if !bank.contains_lambda(l) {
                return Err(Error::MissingBankEntry { image_id: 0, lambda: l });
            }
        }
        Ok(())
    }
}

/// Where an epoch item's image comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Source {
    Real,
    Synthetic(f64),
}

/// One training example of a composed epoch; the label is always that of
/// real item `image_id`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochItem {
    pub image_id: usize,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochDataset {
    pub items: Vec<EpochItem>,
}

impl EpochDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Image of an epoch item.
    pub fn image<'a>(item: &EpochItem, dataset: &'a Dataset, bank: Option<&'a SyntheticBank>) -> Result<&'a ImageGrid> {
        match item.source {
            Source::Real => dataset
                .items
                .get(item.image_id)
                .map(|it| &it.scene.image)
                .ok_or_else(|| Error::InvalidArgument(format!("image id {} out of range", item.image_id))),
            Source::Synthetic(l) => bank
                .ok_or(Error::MissingBankEntry {
                    image_id: item.image_id,
                    lambda: l,
                })?
                .get(item.image_id, l),
        }
    }
}

/// Builds the training list of one epoch (1-based). Pure in its inputs.
pub fn compose_epoch(
    dataset: &Dataset,
    bank: Option<&SyntheticBank>,
    scheme: &AugmentationScheme,
    epoch: usize,
    seed: u64,
) -> Result<EpochDataset> {
    let n = dataset.len();
    let real = |i| EpochItem {
        image_id: i,
        source: Source::Real,
    };
    let synth = |i, l| EpochItem {
        image_id: i,
        source: Source::Synthetic(l),
    };
    let check = |l: f64| -> Result<()> {
        let b = bank.ok_or(Error::MissingBankEntry { image_id: 0, lambda: l })?;
        if !b.contains_lambda(l) {
            return Err(Error::MissingBankEntry { image_id: 0, lambda: l });
        }
        if b.num_images() < n {
            return Err(Error::MissingBankEntry {
                image_id: b.num_images(),
                lambda: l,
            });
        }
        Ok(())
    };
    let mut items: Vec<EpochItem> = match scheme {
        AugmentationScheme::None => return Ok(EpochDataset { items: (0..n).map(real).collect() }),
        AugmentationScheme::SyntheticOnly { lambda } => {
            check(*lambda)?;
            return Ok(EpochDataset {
                items: (0..n).map(|i| synth(i, *lambda)).collect(),
            });
        }
        AugmentationScheme::Fixed { lambda } => {
            check(*lambda)?;
            (0..n).map(real).chain((0..n).map(|i| synth(i, *lambda))).collect()
        }
        AugmentationScheme::Uniform { lambdas, once } => {
            validate_lambdas(lambdas)?;
            for &l in lambdas {
                check(l)?;
            }
            let draw_epoch = if *once { 0 } else { epoch as u64 };
            let mut rng = keyed_rng(seed, "uniform-lambda", &[draw_epoch]);
            let draws: Vec<f64> = (0..n).map(|_| lambdas[rng.random_range(0..lambdas.len())]).collect();
            (0..n).map(real).chain((0..n).map(|i| synth(i, draws[i]))).collect()
        }
        AugmentationScheme::Adaptive { schedule } => {
            if epoch == 0 || epoch > schedule.len() {
                return Err(Error::InvalidArgument(format!(
                    "epoch {epoch} outside adaptive schedule of length {}",
                    schedule.len()
                )));
            }
            let l = schedule[epoch - 1];
            check(l)?;
            (0..n).map(real).chain((0..n).map(|i| synth(i, l))).collect()
        }
    };
    items.shuffle(&mut keyed_rng(seed, "compose", &[epoch as u64]));
    Ok(EpochDataset { items })
}

/// Construction of the adaptive encode-ratio schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptiveForm {
    /// Equal-length epoch blocks ascending through `Λ`; leftover epochs keep
    /// the final value.
    #[default]
    Blocks,
    /// Linear interpolation from `min Λ` to `max Λ`, snapped to the nearest
    /// member of `Λ`.
    Linear,
}

pub fn make_adaptive_schedule(lambdas: &[f64], epochs: usize) -> Result<Vec<f64>> {
    make_adaptive_schedule_with(lambdas, epochs, AdaptiveForm::Blocks)
}

pub fn make_adaptive_schedule_with(lambdas: &[f64], epochs: usize, form: AdaptiveForm) -> Result<Vec<f64>> {
    validate_lambdas(lambdas)?;
    if epochs == 0 {
        return Err(Error::InvalidArgument("adaptive schedule needs at least one epoch".into()));
    }
    if lambdas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("encode ratios must be sorted ascending".into()));
    }
    let k = lambdas.len();
    let sched = match form {
        AdaptiveForm::Blocks if epochs >= k => {
            let block = epochs / k;
            (0..epochs).map(|e| lambdas[(e / block).min(k - 1)]).collect()
        }
        // Fewer epochs than values: spread the epochs across Λ evenly.
        AdaptiveForm::Blocks => (0..epochs)
            .map(|e| {
                let pos = if epochs == 1 { 0 } else { (e * (k - 1) + (epochs - 1) / 2) / (epochs - 1) };
                lambdas[pos]
            })
            .collect(),
        AdaptiveForm::Linear => {
            let (lo, hi) = (lambdas[0], lambdas[k - 1]);
            (0..epochs)
                .map(|e| {
                    let f = if epochs == 1 { 0.0 } else { e as f64 / (epochs - 1) as f64 };
                    let target = lo + (hi - lo) * f;
                    *lambdas
                        .iter()
                        .min_by(|a, b| (*a - target).abs().total_cmp(&(*b - target).abs()))
                        .expect("non-empty")
                })
                .collect()
        }
    };
    Ok(sched)
}
