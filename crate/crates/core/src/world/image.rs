//! Structured synthetic images: an 8×8 grid of findings plus a modality.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GenError, Result};
use crate::seeding::rng_for;

pub const GRID: usize = 8;
pub const MAX_FINDINGS: usize = 6;

const MODALITY_STREAM: u64 = 0x6d6f64;
const FINDING_STREAM: u64 = 0x66696e64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Round,
    Spiculated,
    Linear,
    Diffuse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intensity {
    Low,
    Mid,
    High,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Size {
    Small,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    CT,
    MRI,
    XRay,
    US,
    Der,
    FP,
    OCT,
    Micro,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Round, Shape::Spiculated, Shape::Linear, Shape::Diffuse];
    pub fn word(self) -> &'static str {
        ["round", "spiculated", "linear", "diffuse"][self as usize]
    }
}

impl Intensity {
    pub const ALL: [Intensity; 3] = [Intensity::Low, Intensity::Mid, Intensity::High];
    pub fn word(self) -> &'static str {
        ["low", "mid", "high"][self as usize]
    }
}

impl Size {
    pub fn word(self) -> &'static str {
        ["small", "large"][self as usize]
    }
}

impl Modality {
    pub const ALL: [Modality; 8] = [
        Modality::CT,
        Modality::MRI,
        Modality::XRay,
        Modality::US,
        Modality::Der,
        Modality::FP,
        Modality::OCT,
        Modality::Micro,
    ];

    pub fn word(self) -> &'static str {
        ["CT", "MRI", "XRay", "US", "Der", "FP", "OCT", "Micro"][self as usize]
    }

    pub fn parse(s: &str) -> Option<Modality> {
        Modality::ALL.into_iter().find(|m| m.word() == s)
    }

    fn shape_prior(self) -> [f64; 4] {
        match self {
            Modality::CT => [0.4, 0.2, 0.2, 0.2],
            Modality::MRI => [0.3, 0.1, 0.2, 0.4],
            Modality::XRay => [0.2, 0.4, 0.3, 0.1],
            Modality::US => [0.3, 0.1, 0.1, 0.5],
            Modality::Der => [0.5, 0.2, 0.1, 0.2],
            Modality::FP => [0.2, 0.1, 0.5, 0.2],
            Modality::OCT => [0.1, 0.2, 0.5, 0.2],
            Modality::Micro => [0.25; 4],
        }
    }

    fn intensity_prior(self) -> [f64; 3] {
        match self {
            Modality::CT => [0.3, 0.4, 0.3],
            Modality::MRI => [0.2, 0.3, 0.5],
            Modality::XRay => [0.3, 0.3, 0.4],
            Modality::US => [0.5, 0.3, 0.2],
            Modality::Der => [0.2, 0.5, 0.3],
            Modality::FP => [0.4, 0.4, 0.2],
            Modality::OCT => [0.3, 0.5, 0.2],
            Modality::Micro => [1.0 / 3.0; 3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Finding {
    pub shape: Shape,
    pub intensity: Intensity,
    pub size: Size,
    pub row: u8,
    pub col: u8,
}

/// Categorical distribution over the eight modalities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityMixture(pub [f64; 8]);

impl ModalityMixture {
    pub fn new(weights: [f64; 8]) -> Result<Self> {
        let m = ModalityMixture(weights);
        m.validate()?;
        Ok(m)
    }

    pub fn only(m: Modality) -> Self {
        let mut w = [0.0; 8];
        w[m as usize] = 1.0;
        ModalityMixture(w)
    }

    pub fn uniform() -> Self {
        ModalityMixture([0.125; 8])
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(GenError::Config("modality mixture has a negative or non-finite weight".into()));
        }
        let s: f64 = self.0.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(GenError::Config(format!("modality mixture sums to {s}, expected 1")));
        }
        Ok(())
    }

    pub fn weight(&self, m: Modality) -> f64 {
        self.0[m as usize]
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Modality {
        Modality::ALL[draw(&self.0, rng)]
    }
}

impl Default for ModalityMixture {
    /// Skewed training distribution: MRI 42.8%, CT 20.6%, Micro 3.86%, the rest split evenly.
    fn default() -> Self {
        let rest = (1.0 - 0.428 - 0.206 - 0.0386) / 5.0;
        ModalityMixture([0.206, 0.428, rest, rest, rest, rest, rest, 0.0386])
    }
}

pub(crate) fn draw<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SynthImage {
    pub seed: u64,
    pub modality: Modality,
    /// Findings in raster order; exactly one is large.
    pub findings: Vec<Finding>,
}

impl SynthImage {
    pub fn cell(&self, row: usize, col: usize) -> Option<&Finding> {
        self.findings.iter().find(|f| f.row as usize == row && f.col as usize == col)
    }

    pub fn largest(&self) -> &Finding {
        self.findings
            .iter()
            .find(|f| f.size == Size::Large)
            .unwrap_or(&self.findings[0])
    }
}

pub fn sample_image(seed: u64, mixture: &ModalityMixture) -> Result<SynthImage> {
    mixture.validate()?;
    let modality = mixture.sample(&mut rng_for(seed, &[MODALITY_STREAM]));
    Ok(render_image(seed, modality))
}

/// Draws the findings of an image whose modality is already known.
pub fn render_image(seed: u64, modality: Modality) -> SynthImage {
    let mut rng = rng_for(seed, &[FINDING_STREAM, modality as u64]);
    let k = rng.gen_range(1..=MAX_FINDINGS);
    let mut cells: Vec<usize> = sample_indices(&mut rng, GRID * GRID, k).into_vec();
    let large = rng.gen_range(0..k);
    let sp = modality.shape_prior();
    let ip = modality.intensity_prior();
    let mut findings: Vec<Finding> = cells
        .drain(..)
        .enumerate()
        .map(|(i, c)| Finding {
            shape: Shape::ALL[draw(&sp, &mut rng)],
            intensity: Intensity::ALL[draw(&ip, &mut rng)],
            size: if i == large { Size::Large } else { Size::Small },
            row: (c / GRID) as u8,
            col: (c % GRID) as u8,
        })
        .collect();
    findings.sort_by_key(|f| (f.row, f.col));
    SynthImage { seed, modality, findings }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_mixture_fixes_modality() {
        let m = ModalityMixture::only(Modality::CT);
        for s in 0..200 {
            assert_eq!(sample_image(s, &m).unwrap().modality, Modality::CT);
        }
    }

    #[test]
    fn invalid_mixture_is_config_error() {
        assert!(matches!(ModalityMixture::new([0.2; 8]), Err(GenError::Config(_))));
        let mut w = [0.0; 8];
        w[0] = 1.5;
        w[1] = -0.5;
        assert!(ModalityMixture::new(w).is_err());
    }

    #[test]
    fn images_are_well_formed_and_reproducible() {
        let mix = ModalityMixture::default();
        for s in 0..500 {
            let a = sample_image(s, &mix).unwrap();
            assert_eq!(a, sample_image(s, &mix).unwrap());
            assert!((1..=MAX_FINDINGS).contains(&a.findings.len()));
            assert_eq!(a.findings.iter().filter(|f| f.size == Size::Large).count(), 1);
            let mut cells: Vec<_> = a.findings.iter().map(|f| (f.row, f.col)).collect();
            cells.dedup();
            assert_eq!(cells.len(), a.findings.len());
            assert!(a.findings.iter().all(|f| (f.row as usize) < GRID && (f.col as usize) < GRID));
            assert_eq!(render_image(s, a.modality), a);
        }
    }

    #[test]
    fn default_mixture_sums_to_one() {
        ModalityMixture::default().validate().unwrap();
    }
}
