//! Categorical softmax over architecture logits, Gumbel-Softmax sampling and
//! temperature annealing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search_space::{ArchPath, MacroArch, NUM_CANDIDATES};

/// Uniform draws are clamped to `[EPS, 1 - EPS]` so the noise stays finite.
pub const UNIFORM_EPS: f64 = 1e-10;

/// Architecture logits with a per-entry activity mask.
///
/// Rows are superblocks, columns are the 13 candidates. Inactive entries are
/// either structurally inadmissible or pruned; they are excluded from every
/// softmax and keep their logit unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaMatrix {
    logits: Vec<Vec<f64>>,
    active: Vec<Vec<bool>>,
}

impl ThetaMatrix {
    /// Zero logits with the admissibility mask of `arch`.
    pub fn for_arch(arch: &MacroArch) -> Self {
        let active: Vec<Vec<bool>> = arch.superblocks.iter().map(|s| s.admissible_mask()).collect();
        let logits = vec![vec![0.0; NUM_CANDIDATES]; active.len()];
        ThetaMatrix { logits, active }
    }

    pub fn new(logits: Vec<Vec<f64>>, active: Vec<Vec<bool>>) -> Result<Self> {
        if logits.len() != active.len() {
            return Err(Error::Dimension(format!(
                "{} logit rows vs {} mask rows",
                logits.len(),
                active.len()
            )));
        }
        for (i, (row, mask)) in logits.iter().zip(&active).enumerate() {
            if row.len() != mask.len() {
                return Err(Error::Dimension(format!(
                    "row {i}: {} logits vs {} mask entries",
                    row.len(),
                    mask.len()
                )));
            }
            if !mask.iter().any(|&m| m) {
                return Err(Error::InvalidArgument(format!("row {i} has no active candidate")));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("row {i} has a non-finite logit")));
            }
        }
        Ok(ThetaMatrix { logits, active })
    }

    /// All entries active.
    pub fn from_logits(logits: Vec<Vec<f64>>) -> Result<Self> {
        let active = logits.iter().map(|r| vec![true; r.len()]).collect();
        Self::new(logits, active)
    }

    pub fn rows(&self) -> usize {
        self.logits.len()
    }

    pub fn cols(&self) -> usize {
        self.logits.first().map_or(0, Vec::len)
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.logits[i]
    }

    pub fn mask(&self, i: usize) -> &[bool] {
        &self.active[i]
    }

    pub fn masks(&self) -> &[Vec<bool>] {
        &self.active
    }

    pub fn is_active(&self, i: usize, j: usize) -> bool {
        self.active[i][j]
    }

    pub fn active_count(&self, i: usize) -> usize {
        self.active[i].iter().filter(|&&a| a).count()
    }

    /// Overwrites one logit; callers keep values finite.
    pub fn set_logit(&mut self, i: usize, j: usize, value: f64) {
        debug_assert!(value.is_finite());
        self.logits[i][j] = value;
    }

    /// Deactivates one entry. Refuses (returns false) if it would empty the row.
    pub fn deactivate(&mut self, i: usize, j: usize) -> bool {
        if !self.active[i][j] {
            return true;
        }
        if self.active_count(i) <= 1 {
            return false;
        }
        self.active[i][j] = false;
        true
    }

    pub fn probs_row(&self, i: usize) -> Vec<f64> {
        probs(&self.logits[i], &self.active[i]).expect("invariants guarantee an active entry")
    }

    pub fn probs(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|i| self.probs_row(i)).collect()
    }

    /// Most probable active candidate per row; ties go to the lowest index.
    pub fn argmax_path(&self) -> ArchPath {
        let choices = (0..self.rows())
            .map(|i| {
                let mut best = None::<(usize, f64)>;
                for (j, (&v, &a)) in self.logits[i].iter().zip(&self.active[i]).enumerate() {
                    if a && best.is_none_or(|(_, b)| v > b) {
                        best = Some((j, v));
                    }
                }
                best.expect("row has an active entry").0
            })
            .collect();
        ArchPath::new(choices)
    }
}

/// Masked, max-stabilized softmax.
pub fn probs(row: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    softmax_scaled(row, None, mask, 1.0)
}

/// `softmax((row + noise) / t)` over active entries, zero elsewhere.
fn softmax_scaled(row: &[f64], noise: Option<&[f64]>, mask: &[bool], t: f64) -> Result<Vec<f64>> {
    if row.len() != mask.len() || noise.is_some_and(|n| n.len() != row.len()) {
        return Err(Error::Dimension(format!(
            "logits {} vs mask {}",
            row.len(),
            mask.len()
        )));
    }
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")));
    }
    let z: Vec<f64> = (0..row.len())
        .map(|j| (row[j] + noise.map_or(0.0, |n| n[j])) / t)
        .collect();
    let max = z
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::InvalidArgument("all candidates are masked".into()));
    }
    if !max.is_finite() {
        return Err(Error::InvalidArgument("non-finite logits".into()));
    }
    let mut out: Vec<f64> = z
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { (v - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// One standard Gumbel draw from a clamped uniform.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen::<f64>().clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
    -(-u.ln()).ln()
}

/// Gumbel noise for every column (masked columns still consume a draw so the
/// stream does not depend on the mask).
pub fn gumbel_noise<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| gumbel(rng)).collect()
}

/// Soft selection for fixed noise.
pub fn gumbel_softmax_with_noise(row: &[f64], mask: &[bool], noise: &[f64], t: f64) -> Result<Vec<f64>> {
    softmax_scaled(row, Some(noise), mask, t)
}

pub fn sample_gumbel_softmax<R: Rng + ?Sized>(row: &[f64], mask: &[bool], t: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")));
    }
    let noise = gumbel_noise(row.len(), rng);
    gumbel_softmax_with_noise(row, mask, &noise, t)
}

/// Draws one active index from `p` by inverse CDF.
pub fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &pj) in p.iter().enumerate() {
        if pj > 0.0 {
            acc += pj;
            last = j;
            if u < acc {
                return j;
            }
        }
    }
    last
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AnnealShape {
    #[default]
    Linear,
    Exponential,
}

/// Temperature schedule from `start` down to `end` over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: usize,
    #[serde(default)]
    pub shape: AnnealShape,
}

impl TemperatureSchedule {
    pub fn new(total_steps: usize) -> Self {
        TemperatureSchedule {
            start: 5.0,
            end: 1.0,
            total_steps,
            shape: AnnealShape::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.end > 0.0 && self.start >= self.end && self.start.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature schedule needs start >= end > 0, got {} -> {}",
                self.start, self.end
            )));
        }
        Ok(())
    }

    pub fn anneal(&self, step: usize) -> Result<f64> {
        anneal(step, self)
    }
}

/// Temperature at `step`; linear by default, geometric when configured.
pub fn anneal(step: usize, schedule: &TemperatureSchedule) -> Result<f64> {
    schedule.validate()?;
    if step > schedule.total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond schedule length {}",
            schedule.total_steps
        )));
    }
    if schedule.total_steps == 0 {
        return Ok(schedule.start);
    }
    let frac = step as f64 / schedule.total_steps as f64;
    Ok(match schedule.shape {
        AnnealShape::Linear => schedule.start + (schedule.end - schedule.start) * frac,
        AnnealShape::Exponential => schedule.start * (schedule.end / schedule.start).powf(frac),
    })
}

/// Mixes `(seed, a, b)` into an independent 64-bit seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ a) ^ b.rotate_left(32))
}

/// Generator owned by one (superblock, step) pair.
pub fn derive_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, a, b))
}
