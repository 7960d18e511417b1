//! Bag records, the synthetic witness-bag generator, and stratified
//! splits.
//!
//! A bag is a set of per-source instance matrices plus one label. For
//! synthetic data the per-instance ground truth ("witness" flags) is kept
//! so localization can be scored; a bag's label is positive exactly when
//! at least one of its instances is a witness.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::dme::SourceEmbeddingSet;
use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BagRecord<F: Scalar> {
    pub id: String,
    pub label: usize,
    pub embeddings: SourceEmbeddingSet<F>,
    /// Per-instance positive flags; only synthetic data carries them.
    pub witness: Option<Vec<bool>>,
}

impl<F: Scalar> BagRecord<F> {
    pub fn new(
        id: impl Into<String>,
        label: usize,
        embeddings: SourceEmbeddingSet<F>,
        witness: Option<Vec<bool>>,
    ) -> Result<Self> {
        if let Some(flags) = &witness {
            if flags.len() != embeddings.instances() {
                return Err(CoreError::Alignment(format!(
                    "{} witness flags for {} instances",
                    flags.len(),
                    embeddings.instances()
                )));
            }
        }
        Ok(BagRecord {
            id: id.into(),
            label,
            embeddings,
            witness,
        })
    }

    pub fn instances(&self) -> usize {
        self.embeddings.instances()
    }
}

/// Synthetic dataset geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub bags: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub source_widths: Vec<usize>,
    /// Fraction of instances per positive bag replaced by witness draws.
    pub witness_rate: f64,
    /// Shift of the witness distribution away from background, in feature
    /// units along a fixed random direction per class and source.
    pub separation: f64,
    pub noise: f64,
    pub classes: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            bags: 200,
            n_min: 30,
            n_max: 80,
            source_widths: vec![32],
            witness_rate: 0.1,
            separation: 2.0,
            noise: 1.0,
            classes: 2,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    /// Widths used when exercising the three-source fusion path.
    pub fn fusion_widths() -> Vec<usize> {
        vec![32, 32, 16]
    }

    pub fn validate(&self) -> Result<()> {
        if self.bags == 0 {
            return Err(CoreError::Config("bag count must be >= 1".into()));
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return Err(CoreError::Config(format!(
                "instance range [{}, {}] is invalid",
                self.n_min, self.n_max
            )));
        }
        if self.source_widths.is_empty() || self.source_widths.iter().any(|&w| w == 0) {
            return Err(CoreError::Config("source widths must all be >= 1".into()));
        }
        if !(self.witness_rate > 0.0 && self.witness_rate <= 1.0) {
            return Err(CoreError::Config(format!(
                "witness rate must lie in (0, 1], got {}",
                self.witness_rate
            )));
        }
        if self.separation < 0.0 {
            return Err(CoreError::Config(format!(
                "separation must be >= 0, got {}",
                self.separation
            )));
        }
        if self.noise <= 0.0 {
            return Err(CoreError::Config(format!(
                "noise scale must be positive, got {}",
                self.noise
            )));
        }
        if self.classes < 2 {
            return Err(CoreError::Config(format!(
                "class count must be >= 2, got {}",
                self.classes
            )));
        }
        Ok(())
    }
}

const BACKGROUND_COMPONENTS: usize = 3;

/// Generate a balanced synthetic dataset.
///
/// Instances of every bag are drawn from a per-source background Gaussian
/// mixture. A bag of class c >= 1 replaces ceil(rate * N) instances with
/// draws shifted by `separation` along class c's direction and flags
/// them; class-0 bags are pure background. With separation 0 the witness
/// distribution coincides with the background, so nothing is learnable.
pub fn generate_synthetic<F: Scalar>(config: &SyntheticConfig) -> Result<Vec<BagRecord<F>>> {
    config.validate()?;
    let mut rng = Rng::new(config.seed);
    let sources = config.source_widths.len();

    // Fixed dataset-level structure: background component means and one
    // witness direction per (class, source).
    let mut component_means = Vec::with_capacity(sources);
    for &width in &config.source_widths {
        let mut comps = Vec::with_capacity(BACKGROUND_COMPONENTS);
        for _ in 0..BACKGROUND_COMPONENTS {
            let mean: Vec<f64> = (0..width).map(|_| rng.next_standard_normal()).collect();
            comps.push(mean);
        }
        component_means.push(comps);
    }
    let mut witness_dirs = Vec::with_capacity(config.classes.saturating_sub(1));
    for _ in 1..config.classes {
        let mut per_source = Vec::with_capacity(sources);
        for &width in &config.source_widths {
            let raw: Vec<f64> = (0..width).map(|_| rng.next_standard_normal()).collect();
            let norm = libm::sqrt(raw.iter().map(|v| v * v).sum::<f64>());
            per_source.push(raw.into_iter().map(|v| v / norm).collect::<Vec<f64>>());
        }
        witness_dirs.push(per_source);
    }

    let mut bags = Vec::with_capacity(config.bags);
    for b in 0..config.bags {
        let label = b % config.classes;
        let n = config.n_min + rng.next_below(config.n_max - config.n_min + 1);

        let witness_count = if label == 0 {
            0
        } else {
            ceil_mul(config.witness_rate, n)
        };
        if witness_count > n {
            return Err(CoreError::Config(format!(
                "witness count {witness_count} exceeds bag size {n}"
            )));
        }
        let mut positions: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut positions);
        let mut flags = vec![false; n];
        for &p in positions.iter().take(witness_count) {
            flags[p] = true;
        }

        let mut per_source: Vec<Vec<F>> = config
            .source_widths
            .iter()
            .map(|&w| Vec::with_capacity(n * w))
            .collect();
        for (i, &flagged) in flags.iter().enumerate().take(n) {
            let _ = i;
            for (s, &width) in config.source_widths.iter().enumerate() {
                let comp = rng.next_below(BACKGROUND_COMPONENTS);
                for j in 0..width {
                    let mut x = component_means[s][comp][j]
                        + config.noise * rng.next_standard_normal();
                    if flagged {
                        x += config.separation * witness_dirs[label - 1][s][j];
                    }
                    per_source[s].push(F::from_f64(x));
                }
            }
        }

        let tensors: Result<Vec<Tensor<F>>> = per_source
            .into_iter()
            .zip(&config.source_widths)
            .map(|(data, &w)| Tensor::from_vec(&[n, w], data))
            .collect();
        let embeddings = SourceEmbeddingSet::new(tensors?)?;
        bags.push(BagRecord::new(
            format!("bag_{b:04}"),
            label,
            embeddings,
            Some(flags),
        )?);
    }
    Ok(bags)
}

fn ceil_mul(rate: f64, n: usize) -> usize {
    libm::ceil(rate * n as f64) as usize
}

/// Named split slots. The CLI writes these into manifests as strings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(CoreError::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// Stratified assignment of bags to `ratios.len()` splits.
///
/// Per class: deterministic shuffle, then largest-remainder allocation at
/// the given ratios, so every class lands within one bag of its quota.
pub fn stratified_split(labels: &[usize], ratios: &[f64], seed: u64) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(CoreError::EmptyInput("split of an empty dataset"));
    }
    if ratios.is_empty() {
        return Err(CoreError::Parameter("at least one split ratio required".into()));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
        return Err(CoreError::Parameter(format!(
            "ratios must lie in [0, 1] and sum to 1, got {ratios:?}"
        )));
    }

    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let mut rng = Rng::new(seed);
    let mut assignment = vec![0usize; labels.len()];

    for class in 0..classes {
        let mut members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            continue;
        }
        rng.shuffle(&mut members);
        let counts = largest_remainder(members.len(), ratios);
        for (split, &count) in counts.iter().enumerate() {
            if ratios[split] > 0.0 && count == 0 {
                return Err(CoreError::Stratification(format!(
                    "class {class} has only {} bags; cannot fill split {split} at ratio {}",
                    members.len(),
                    ratios[split]
                )));
            }
        }
        let mut cursor = 0;
        for (split, &count) in counts.iter().enumerate() {
            for &bag in members.iter().skip(cursor).take(count) {
                assignment[bag] = split;
            }
            cursor += count;
        }
    }
    Ok(assignment)
}

fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = ratios.iter().map(|r| (r * n as f64) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, f64)> = ratios
        .iter()
        .enumerate()
        .map(|(i, r)| (i, r * n as f64 - counts[i] as f64))
        .collect();
    // Stable by descending remainder, index breaking ties.
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..(n - assigned) {
        counts[remainders[k].0] += 1;
    }
    counts
}
