//! Binary feature container.
//!
//! Little-endian layout:
//!
//! ```text
//! "EMOF" 0x01
//! u32 N, u32 d_t, u32 d_a, u32 d_v, u32 class_count
//! N × { u32 conversation_id, u32 utterance_index, u32 speaker_id, u8 label,
//!       f32[d_t], f32[d_a], f32[d_v] }
//! ```

use std::path::Path;

use crate::datagen::sample::{ConversationSample, Dims};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EMOF";
pub const VERSION: u8 = 0x01;
const HEADER_LEN: usize = 5 + 5 * 4;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub class_count: usize,
    pub dims: Dims,
    pub samples: Vec<ConversationSample>,
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Input(format!("{what} = {v} does not fit in u32")))
}

pub fn encode_feature_container(samples: &[ConversationSample], dims: Dims, class_count: usize) -> Result<Vec<u8>> {
    if class_count > 256 {
        return Err(Error::Input(format!("class count {class_count} exceeds u8 labels")));
    }
    let record = 13 + 4 * (dims.text + dims.audio + dims.visual);
    let mut out = Vec::with_capacity(HEADER_LEN + record * samples.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    for v in [samples.len(), dims.text, dims.audio, dims.visual, class_count] {
        out.extend_from_slice(&u32_field(v, "header field")?.to_le_bytes());
    }
    for (i, s) in samples.iter().enumerate() {
        if s.dims() != dims {
            return Err(Error::Format {
                offset: out.len() as u64,
                message: format!("sample {i} has dims {:?}, expected {dims:?}", s.dims()),
            });
        }
        if s.label >= class_count {
            return Err(Error::Input(format!("sample {i} label {} >= class count {class_count}", s.label)));
        }
        out.extend_from_slice(&s.conversation_id.to_le_bytes());
        out.extend_from_slice(&s.utterance_index.to_le_bytes());
        out.extend_from_slice(&s.speaker_id.to_le_bytes());
        out.push(s.label as u8);
        for v in s.feat_text.iter().chain(&s.feat_audio).chain(&s.feat_visual) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(4 * n, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect())
    }
}

pub fn decode_feature_container(bytes: &[u8]) -> Result<FeatureSet> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected \"EMOF\"".into(),
        });
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version:#04x}"),
        });
    }
    let n = r.u32("sample count")? as usize;
    let dims = Dims::new(r.u32("d_t")? as usize, r.u32("d_a")? as usize, r.u32("d_v")? as usize);
    let class_count = r.u32("class count")? as usize;
    let record = 13 + 4 * (dims.text + dims.audio + dims.visual);
    if (bytes.len() - r.pos) / record.max(1) < n {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("truncated: {n} records of {record} bytes declared"),
        });
    }
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let conversation_id = r.u32("conversation_id")?;
        let utterance_index = r.u32("utterance_index")?;
        let speaker_id = r.u32("speaker_id")?;
        let label_at = r.pos;
        let label = r.take(1, "label")?[0] as usize;
        if label >= class_count {
            return Err(Error::Format {
                offset: label_at as u64,
                message: format!("label {label} >= class count {class_count}"),
            });
        }
        samples.push(ConversationSample {
            conversation_id,
            utterance_index,
            speaker_id,
            label,
            feat_text: r.f32s(dims.text, "text features")?,
            feat_audio: r.f32s(dims.audio, "audio features")?,
            feat_visual: r.f32s(dims.visual, "visual features")?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(FeatureSet { class_count, dims, samples })
}

pub fn write_feature_container(path: &Path, samples: &[ConversationSample], dims: Dims, class_count: usize) -> Result<()> {
    let bytes = encode_feature_container(samples, dims, class_count)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_feature_container(path: &Path) -> Result<FeatureSet> {
    let bytes = std::fs::read(path)?;
    decode_feature_container(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(i: u32) -> ConversationSample {
        ConversationSample {
            conversation_id: i / 3,
            utterance_index: i % 3,
            speaker_id: i % 2,
            label: (i % 4) as usize,
            feat_text: vec![0.5, -0.0],
            feat_audio: vec![1.25],
            feat_visual: vec![-3.0, 2.0, f64::from(f32::MIN_POSITIVE)],
        }
    }

    #[test]
    fn round_trip() {
        let samples: Vec<_> = (0..7).map(sample).collect();
        let bytes = encode_feature_container(&samples, Dims::new(2, 1, 3), 4).unwrap();
        let set = decode_feature_container(&bytes).unwrap();
        assert_eq!(set.class_count, 4);
        assert!(set.samples.iter().zip(&samples).all(|(a, b)| a.bit_eq(b)));
    }

    #[test]
    fn corrupted_magic_at_offset_zero() {
        let mut bytes = encode_feature_container(&[sample(0)], Dims::new(2, 1, 3), 4).unwrap();
        bytes[0] = b'X';
        match decode_feature_container(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn empty_container() {
        let bytes = encode_feature_container(&[], Dims::new(4, 4, 4), 7).unwrap();
        let set = decode_feature_container(&bytes).unwrap();
        assert!(set.samples.is_empty());
        assert_eq!(set.dims, Dims::new(4, 4, 4));
    }

    #[test]
    fn truncation_and_dim_mismatch() {
        let bytes = encode_feature_container(&[sample(0), sample(1)], Dims::new(2, 1, 3), 4).unwrap();
        assert!(matches!(decode_feature_container(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        let mut bad = sample(2);
        bad.feat_audio.push(1.0);
        assert!(matches!(
            encode_feature_container(&[sample(0), bad], Dims::new(2, 1, 3), 4),
            Err(Error::Format { offset: 62, .. })
        ));
    }
}
