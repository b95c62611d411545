//! Segmentation of utterances into spans and encoding of each span into a
//! fixed-size acoustic token.
//!
//! The segment encoder is a deterministic surrogate: mean-pool the span's
//! frames, apply a seeded random linear map, and normalise to unit length.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::{self, RecordBuf, RecordCursor};
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentBoundaries {
    pub cuts: Vec<u32>,
}

impl SegmentBoundaries {
    pub fn spans(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.cuts.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn n_segments(&self) -> usize {
        self.cuts.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segmentation {
    Fixed { window_frames: usize },
    Gold,
}

impl Segmentation {
    pub fn segment(&self, utt: &Utterance) -> Result<SegmentBoundaries> {
        match *self {
            Segmentation::Fixed { window_frames } => segment_fixed(utt, window_frames),
            Segmentation::Gold => segment_gold(utt),
        }
    }
}

/// Fixed-length windows. A final partial window shorter than half a window
/// is merged into the previous segment.
pub fn segment_fixed(utt: &Utterance, window_frames: usize) -> Result<SegmentBoundaries> {
    if window_frames == 0 {
        return Err(Error::config("window_frames must be >= 1"));
    }
    let n = utt.n_frames();
    if n == 0 {
        return Err(Error::invalid(format!(
            "utterance {} has no frames",
            utt.utt_id
        )));
    }
    let mut cuts: Vec<u32> = (0..n).step_by(window_frames).map(|c| c as u32).collect();
    let tail = n - *cuts.last().unwrap() as usize;
    // tail < window/2, compared without rounding
    if cuts.len() > 1 && 2 * tail < window_frames {
        cuts.pop();
    }
    cuts.push(n as u32);
    Ok(SegmentBoundaries { cuts })
}

pub fn segment_gold(utt: &Utterance) -> Result<SegmentBoundaries> {
    let cuts = utt
        .gold_boundaries
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("utterance {} lacks gold boundaries", utt.utt_id)))?;
    Ok(SegmentBoundaries { cuts: cuts.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub seed: u64,
    pub out_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            out_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcousticToken {
    pub vector: Vec<f32>,
    pub utt_id: u32,
    pub span: (u32, u32),
    pub speaker_id: u32,
}

/// Mean-pool + fixed random projection + L2 normalisation.
#[derive(Debug, Clone)]
pub struct SegmentEncoder {
    config: EncoderConfig,
    frame_dim: usize,
    /// `out_dim` rows of length `frame_dim`.
    projection: Vec<Vec<f64>>,
}

impl SegmentEncoder {
    pub fn new(config: EncoderConfig, frame_dim: usize) -> Result<Self> {
        if config.out_dim == 0 || frame_dim == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        let mut r = rng::stream(config.seed, 0);
        let scale = 1.0 / (frame_dim as f64).sqrt();
        let projection = (0..config.out_dim)
            .map(|_| {
                (0..frame_dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        scale * z
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            config,
            frame_dim,
            projection,
        })
    }

    pub fn config(&self) -> EncoderConfig {
        self.config
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim
    }

    /// Encodes a bag of frames. Errors on an empty set or a zero projection.
    pub fn encode_frames<'a, I>(&self, frames: I) -> Result<Vec<f32>>
    where
        I: IntoIterator<Item = &'a [f32]>,
    {
        let mut mean = vec![0.0f64; self.frame_dim];
        let mut count = 0usize;
        for f in frames {
            if f.len() != self.frame_dim {
                return Err(Error::Shape {
                    expected: self.frame_dim,
                    got: f.len(),
                });
            }
            for (m, &x) in mean.iter_mut().zip(f) {
                *m += x as f64;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::invalid("cannot encode an empty span"));
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        self.project(&mean)
    }

    /// Projects and normalises an already pooled frame vector.
    pub fn project(&self, pooled: &[f64]) -> Result<Vec<f32>> {
        let out: Vec<f64> = self
            .projection
            .iter()
            .map(|row| row.iter().zip(pooled).map(|(a, b)| a * b).sum())
            .collect();
        let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::invalid(
                "segment encodes to a zero or non-finite vector",
            ));
        }
        Ok(out.iter().map(|x| (x / norm) as f32).collect())
    }
}

pub fn encode_segment(
    utt: &Utterance,
    span: (u32, u32),
    encoder: &SegmentEncoder,
) -> Result<AcousticToken> {
    let (start, end) = span;
    if start >= end {
        return Err(Error::invalid(format!("empty span ({start}, {end})")));
    }
    if end as usize > utt.n_frames() {
        return Err(Error::invalid(format!(
            "span end {end} beyond {} frames",
            utt.n_frames()
        )));
    }
    let vector = encoder.encode_frames(
        utt.frames[start as usize..end as usize]
            .iter()
            .map(Vec::as_slice),
    )?;
    Ok(AcousticToken {
        vector,
        utt_id: utt.utt_id,
        span,
        speaker_id: utt.speaker_id,
    })
}

pub fn tokenize_utterance(
    utt: &Utterance,
    segmentation: Segmentation,
    encoder: &SegmentEncoder,
) -> Result<Vec<AcousticToken>> {
    segmentation
        .segment(utt)?
        .spans()
        .map(|span| encode_segment(utt, span, encoder))
        .collect()
}

/// Gold types overlapped by a span, in order.
pub fn span_types(utt: &Utterance, span: (u32, u32)) -> Vec<u32> {
    let (Some(types), Some(cuts)) = (&utt.gold_types, &utt.gold_boundaries) else {
        return Vec::new();
    };
    types
        .iter()
        .zip(cuts.windows(2))
        .filter(|(_, w)| w[0] < span.1 && w[1] > span.0)
        .map(|(&t, _)| t)
        .collect()
}

/// Gold type covering most frames of the span; ties go to the earlier type.
pub fn span_majority_type(utt: &Utterance, span: (u32, u32)) -> Option<u32> {
    let (types, cuts) = (utt.gold_types.as_ref()?, utt.gold_boundaries.as_ref()?);
    let mut best: Option<(u32, u32)> = None;
    for (&t, w) in types.iter().zip(cuts.windows(2)) {
        let overlap = w[1].min(span.1).saturating_sub(w[0].max(span.0));
        if overlap > 0 && best.is_none_or(|(_, o)| overlap > o) {
            best = Some((t, overlap));
        }
    }
    best.map(|(t, _)| t)
}

#[derive(Debug, Serialize, Deserialize)]
struct TokenHeader {
    kind: String,
    count: usize,
    dim: usize,
    encoder: Option<EncoderConfig>,
    segmentation: Option<Segmentation>,
}

/// Token file with the same framing as corpus files.
pub fn write_tokens(
    path: &Path,
    tokens: &[AcousticToken],
    encoder: Option<EncoderConfig>,
    segmentation: Option<Segmentation>,
) -> Result<()> {
    let header = TokenHeader {
        kind: "tokens".into(),
        count: tokens.len(),
        dim: tokens.first().map_or(0, |t| t.vector.len()),
        encoder,
        segmentation,
    };
    let records = tokens.iter().map(|t| {
        let mut rec = RecordBuf::new();
        rec.u32(t.utt_id)
            .u32(t.span.0)
            .u32(t.span.1)
            .u32(t.speaker_id)
            .f32s(&t.vector);
        rec
    });
    container::write_container(path, &header, records)
}

pub struct TokenFile {
    pub tokens: Vec<AcousticToken>,
    pub encoder: Option<EncoderConfig>,
    pub segmentation: Option<Segmentation>,
}

pub fn read_tokens(path: &Path) -> Result<TokenFile> {
    let (header, records): (TokenHeader, _) = container::read_container(path)?;
    container::check_kind(&header.kind, "tokens", header.count, records.len())?;
    let tokens = records
        .iter()
        .enumerate()
        .map(|(i, bytes)| {
            let mut c = RecordCursor::new(bytes, i);
            let utt_id = c.u32()?;
            let span = (c.u32()?, c.u32()?);
            let speaker_id = c.u32()?;
            let vector = c.f32s()?;
            c.finish()?;
            if vector.len() != header.dim || span.0 >= span.1 {
                return Err(Error::parse(
                    format!("record {i}"),
                    "bad token dimension or span",
                ));
            }
            Ok(AcousticToken {
                vector,
                utt_id,
                span,
                speaker_id,
            })
        })
        .collect::<Result<_>>()?;
    Ok(TokenFile {
        tokens,
        encoder: header.encoder,
        segmentation: header.segmentation,
    })
}
