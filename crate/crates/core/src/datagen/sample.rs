use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Audio,
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Visual];

    pub fn index(self) -> usize {
        match self {
            Modality::Text => 0,
            Modality::Audio => 1,
            Modality::Visual => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "audio" => Ok(Modality::Audio),
            "visual" => Ok(Modality::Visual),
            other => Err(Error::Input(format!("unknown modality `{other}`"))),
        }
    }
}

/// Feature widths `(d_t, d_a, d_v)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub text: usize,
    pub audio: usize,
    pub visual: usize,
}

impl Dims {
    pub fn new(text: usize, audio: usize, visual: usize) -> Self {
        Self { text, audio, visual }
    }

    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text,
            Modality::Audio => self.audio,
            Modality::Visual => self.visual,
        }
    }
}

impl Default for Dims {
    fn default() -> Self {
        Self::new(768, 1024, 768)
    }
}

/// One utterance: pooled per-modality features plus bookkeeping ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ConversationSample {
    pub conversation_id: u32,
    pub utterance_index: u32,
    pub speaker_id: u32,
    pub label: usize,
    pub feat_text: Vec<f64>,
    pub feat_audio: Vec<f64>,
    pub feat_visual: Vec<f64>,
}

impl ConversationSample {
    pub fn features(&self, m: Modality) -> &[f64] {
        match m {
            Modality::Text => &self.feat_text,
            Modality::Audio => &self.feat_audio,
            Modality::Visual => &self.feat_visual,
        }
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.feat_text.len(), self.feat_audio.len(), self.feat_visual.len())
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        let bits = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        self.conversation_id == other.conversation_id
            && self.utterance_index == other.utterance_index
            && self.speaker_id == other.speaker_id
            && self.label == other.label
            && bits(&self.feat_text, &other.feat_text)
            && bits(&self.feat_audio, &other.feat_audio)
            && bits(&self.feat_visual, &other.feat_visual)
    }
}

/// Frame-level features for one utterance (`T × d`).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBlock {
    pub frames: Tensor2,
    pub modality: Modality,
}

/// Mean over the time axis.
pub fn temporal_pool(block: &FrameBlock) -> Result<Vec<f64>> {
    let (t, d) = block.frames.shape();
    if t == 0 {
        return Err(Error::dim("temporal_pool", (t, d), (1, d)));
    }
    let mut out = vec![0.0; d];
    for r in 0..t {
        for (o, v) in out.iter_mut().zip(block.frames.row(r)) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= t as f64;
    }
    Ok(out)
}

/// Groups samples by conversation, preserving first-seen conversation order,
/// and sorts each group by utterance index.
pub fn group_conversations(samples: &[ConversationSample]) -> Vec<Vec<usize>> {
    let mut order: Vec<u32> = Vec::new();
    let mut groups: std::collections::HashMap<u32, Vec<usize>> = std::collections::HashMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups
            .entry(s.conversation_id)
            .or_insert_with(|| {
                order.push(s.conversation_id);
                Vec::new()
            })
            .push(i);
    }
    order
        .into_iter()
        .map(|c| {
            let mut g = groups.remove(&c).expect("group exists");
            g.sort_by_key(|&i| samples[i].utterance_index);
            g
        })
        .collect()
}

/// Held-out rule shared by the generator and ingested containers: every
/// fifth conversation id (`id % 5 == 4`) is test data.
pub fn is_held_out(conversation_id: u32) -> bool {
    conversation_id % 5 == 4
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(rows: &[&[f64]]) -> FrameBlock {
        FrameBlock {
            frames: Tensor2::from_rows(rows).unwrap(),
            modality: Modality::Audio,
        }
    }

    #[test]
    fn pooling_examples() {
        assert_eq!(temporal_pool(&block(&[&[1.5, -2.0]])).unwrap(), vec![1.5, -2.0]);
        assert_eq!(temporal_pool(&block(&[&[1.0, 1.0], &[3.0, 3.0]])).unwrap(), vec![2.0, 2.0]);
        assert_eq!(temporal_pool(&block(&[&[0.25; 3], &[0.25; 3], &[0.25; 3]])).unwrap(), vec![0.25; 3]);
        let empty = FrameBlock {
            frames: Tensor2::zeros(0, 4),
            modality: Modality::Visual,
        };
        assert!(matches!(temporal_pool(&empty), Err(Error::Dimension { .. })));
    }
}
