//! The seeded Gaussian benchmark used for end-to-end checks.
//!
//! Ten classes in 64 dimensions with spread 0.3; text prototypes are offset
//! from the class means by a unit random direction (shift 1.0). Each class
//! contributes 32 training and 100 test samples.

use crate::dataio::{EmbeddingSet, SynthGenerator, SynthParams};
use crate::error::Result;
use crate::eval::{Mode, ProtocolConfig, ProtocolData, TextMode};

pub const CLASSES: usize = 10;
pub const DIM: usize = 64;
pub const SPREAD: f64 = 0.3;
pub const SHIFT: f64 = 1.0;
pub const TRAIN_PER_CLASS: usize = 32;
pub const TEST_PER_CLASS: usize = 100;
pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const LEARNING_RATE: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub generator: SynthGenerator,
    pub train: EmbeddingSet,
    pub test: EmbeddingSet,
    pub text: EmbeddingSet,
}

impl Benchmark {
    pub fn new(seed: u64) -> Result<Self> {
        let generator = SynthGenerator::new(SynthParams {
            classes: CLASSES,
            dim: DIM,
            shift: SHIFT,
            spread: SPREAD,
            seed,
        })?;
        Ok(Self {
            train: generator.sample(TRAIN_PER_CLASS, 0)?,
            test: generator.sample(TEST_PER_CLASS, 1)?,
            text: generator.text()?,
            generator,
        })
    }

    pub fn data(&self) -> ProtocolData<'_> {
        ProtocolData {
            train: &self.train,
            test: &self.test,
            text: self.text.features(),
            anchors: None,
            split: None,
        }
    }
}

/// 16-shot few-shot protocol over [`SEEDS`] with frozen text prototypes, so
/// the CoAdapter is the only trained component.
pub fn config() -> ProtocolConfig {
    let mut cfg = ProtocolConfig::defaults(Mode::FewShot);
    cfg.seeds = SEEDS.to_vec();
    cfg.text = TextMode::Frozen;
    cfg.train.base_lr = LEARNING_RATE;
    cfg
}
