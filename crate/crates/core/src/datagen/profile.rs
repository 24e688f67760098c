use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class names, label marginals, and per-class per-modality separability
/// (text, audio, visual) used to scale each class anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub class_names: Vec<String>,
    pub proportions: Vec<f64>,
    pub separability: Vec<[f64; 3]>,
}

pub const MELD_CLASSES: [&str; 7] = ["anger", "disgust", "fear", "joy", "neutral", "sadness", "surprise"];
pub const MELD_COUNTS: [u32; 7] = [1109, 271, 268, 1743, 4710, 683, 1205];

pub const IEMOCAP_CLASSES: [&str; 6] = ["happy", "sad", "neutral", "angry", "excited", "frustrated"];
pub const IEMOCAP_COUNTS: [u32; 6] = [392, 739, 1167, 711, 620, 1149];

impl ClassProfile {
    pub fn from_counts(names: &[&str], counts: &[u32]) -> Result<Self> {
        if names.len() != counts.len() || names.is_empty() {
            return Err(Error::Input(format!("{} class names for {} counts", names.len(), counts.len())));
        }
        let total: u64 = counts.iter().map(|&c| u64::from(c)).sum();
        if total == 0 {
            return Err(Error::Input("class counts sum to zero".into()));
        }
        let profile = Self {
            class_names: names.iter().map(|s| s.to_string()).collect(),
            proportions: counts.iter().map(|&c| f64::from(c) / total as f64).collect(),
            separability: vec![[1.0; 3]; names.len()],
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.class_names.len();
        if self.proportions.len() != c || self.separability.len() != c {
            return Err(Error::Input(format!(
                "profile lengths disagree: {} names, {} proportions, {} separability rows",
                c,
                self.proportions.len(),
                self.separability.len()
            )));
        }
        let sum: f64 = self.proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.proportions.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Input(format!("proportions must be a distribution, sum = {sum}")));
        }
        if self.separability.iter().flatten().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return Err(Error::Input("separability must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "meld" => Some(meld_profile()),
            "iemocap" => Some(iemocap_profile()),
            _ => None,
        }
    }
}

pub fn meld_profile() -> ClassProfile {
    ClassProfile::from_counts(&MELD_CLASSES, &MELD_COUNTS).expect("static profile")
}

pub fn iemocap_profile() -> ClassProfile {
    ClassProfile::from_counts(&IEMOCAP_CLASSES, &IEMOCAP_COUNTS).expect("static profile")
}
