//! Feature bundles: the per-video segment feature matrices every stage consumes,
//! their binary file format, and the per-video magnitude summaries used for
//! video-level clustering.
//!
//! Binary layout (all little-endian):
//!
//! ```text
//! "C2FB" | version u32 = 1 | d u32 | n u32
//! n × { id_len u16 | id utf-8 | m u32 | r u32 | m·d × f32 (row-major) }
//! [optional trailer: tag_len u16 | tag utf-8]
//! ```
//!
//! The trailer carries `source_tag` and is only written when the tag is
//! non-empty, so untagged bundles are exactly the base layout.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BUNDLE_MAGIC: &[u8; 4] = b"C2FB";
pub const BUNDLE_VERSION: u32 = 1;

/// One video: an ordered run of segment feature vectors stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    id: String,
    dim: usize,
    frames_per_segment: u32,
    features: Vec<f32>,
}

impl VideoRecord {
    /// Build a record from row-major features (`m × dim`).
    pub fn new(
        id: impl Into<String>,
        dim: usize,
        frames_per_segment: u32,
        features: Vec<f32>,
    ) -> Result<Self> {
        let id = id.into();
        if dim == 0 {
            return Err(Error::InvalidVideo {
                video: id,
                reason: "feature dimension must be positive".into(),
            });
        }
        if !features.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: features.len() % dim,
                context: format!("trailing values in video {id}"),
            });
        }
        if features.is_empty() {
            return Err(Error::InvalidVideo {
                video: id,
                reason: "video has no segments".into(),
            });
        }
        if frames_per_segment == 0 {
            return Err(Error::InvalidVideo {
                video: id,
                reason: "frames per segment must be positive".into(),
            });
        }
        if id.len() > usize::from(u16::MAX) {
            return Err(Error::InvalidVideo {
                video: id,
                reason: "id longer than 65535 bytes".into(),
            });
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                video: id,
                segment: pos / dim,
            });
        }
        Ok(Self {
            id,
            dim,
            frames_per_segment,
            features,
        })
    }

    /// Build a record from a list of segment vectors.
    pub fn from_segments(
        id: impl Into<String>,
        frames_per_segment: u32,
        segments: &[Vec<f32>],
    ) -> Result<Self> {
        let id = id.into();
        let dim = segments.first().map_or(0, Vec::len);
        for (j, s) in segments.iter().enumerate() {
            if s.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: s.len(),
                    context: format!("video {id} segment {j}"),
                });
            }
        }
        let flat = segments.iter().flatten().copied().collect();
        Self::new(id, dim, frames_per_segment, flat)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frames_per_segment(&self) -> u32 {
        self.frames_per_segment
    }

    pub fn num_segments(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn num_frames(&self) -> usize {
        self.num_segments() * self.frames_per_segment as usize
    }

    pub fn segment(&self, j: usize) -> &[f32] {
        &self.features[j * self.dim..(j + 1) * self.dim]
    }

    /// Segments in temporal order.
    pub fn segments(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.features.chunks_exact(self.dim)
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }
}

/// All videos of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    dim: usize,
    videos: Vec<VideoRecord>,
    source_tag: String,
}

impl FeatureBundle {
    pub fn new(
        dim: usize,
        videos: Vec<VideoRecord>,
        source_tag: impl Into<String>,
    ) -> Result<Self> {
        let source_tag = source_tag.into();
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "bundle dimension must be positive".into(),
            ));
        }
        if source_tag.len() > usize::from(u16::MAX) {
            return Err(Error::InvalidArgument(
                "source tag longer than 65535 bytes".into(),
            ));
        }
        let mut seen = HashSet::with_capacity(videos.len());
        for v in &videos {
            if v.dim != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.dim,
                    context: format!("video {}", v.id),
                });
            }
            if !seen.insert(v.id.as_str()) {
                return Err(Error::DuplicateId(v.id.clone()));
            }
        }
        Ok(Self {
            dim,
            videos,
            source_tag,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn videos(&self) -> &[VideoRecord] {
        &self.videos
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn total_segments(&self) -> usize {
        self.videos.iter().map(VideoRecord::num_segments).sum()
    }

    pub fn video(&self, id: &str) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.id == id)
    }

    /// Serialize to the binary bundle layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self
            .videos
            .iter()
            .map(|v| 2 + v.id.len() + 8 + 4 * v.features.len())
            .sum();
        let mut out = Vec::with_capacity(16 + payload + 2 + self.source_tag.len());
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.videos.len() as u32).to_le_bytes());
        for v in &self.videos {
            out.extend_from_slice(&(v.id.len() as u16).to_le_bytes());
            out.extend_from_slice(v.id.as_bytes());
            out.extend_from_slice(&(v.num_segments() as u32).to_le_bytes());
            out.extend_from_slice(&v.frames_per_segment.to_le_bytes());
            for x in &v.features {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        if !self.source_tag.is_empty() {
            out.extend_from_slice(&(self.source_tag.len() as u16).to_le_bytes());
            out.extend_from_slice(self.source_tag.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4, "magic")?;
        if magic != BUNDLE_MAGIC {
            return Err(Error::MalformedHeader(format!("bad magic {magic:02x?}")));
        }
        let version = cur.u32("version")?;
        if version != BUNDLE_VERSION {
            return Err(Error::MalformedHeader(format!(
                "unsupported version {version}"
            )));
        }
        let dim = cur.u32("dimension")? as usize;
        if dim == 0 {
            return Err(Error::MalformedHeader("zero feature dimension".into()));
        }
        let n = cur.u32("video count")? as usize;
        let mut videos = Vec::with_capacity(n.min(1 << 16));
        for i in 0..n {
            let id_len = cur.u16("id length")? as usize;
            let id = std::str::from_utf8(cur.take(id_len, "id")?)
                .map_err(|_| Error::MalformedHeader(format!("video {i} id is not utf-8")))?
                .to_owned();
            let m = cur.u32("segment count")? as usize;
            let r = cur.u32("frames per segment")?;
            let count = m
                .checked_mul(dim)
                .ok_or_else(|| Error::MalformedHeader(format!("video {id} too large")))?;
            let raw = cur.take(
                count
                    .checked_mul(4)
                    .ok_or_else(|| Error::MalformedHeader(format!("video {id} too large")))?,
                "features",
            )?;
            let features = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            videos.push(VideoRecord::new(id, dim, r, features)?);
        }
        let source_tag = if cur.remaining() > 0 {
            let len = cur.u16("tag length")? as usize;
            let tag = std::str::from_utf8(cur.take(len, "tag")?)
                .map_err(|_| Error::MalformedHeader("source tag is not utf-8".into()))?
                .to_owned();
            if cur.remaining() > 0 {
                return Err(Error::MalformedHeader(format!(
                    "{} trailing bytes after source tag",
                    cur.remaining()
                )));
            }
            tag
        } else {
            String::new()
        };
        Self::new(dim, videos, source_tag)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < len {
            return Err(Error::Truncated(format!(
                "needed {len} bytes for {what} at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<FeatureBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureBundle::from_bytes(&bytes)
}

pub fn write_bundle(bundle: &FeatureBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bundle.to_bytes())
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(path, e))
}

/// ℓ2 norm of a segment feature, accumulated in f64.
pub fn segment_norm(f: &[f32]) -> f64 {
    f.iter()
        .map(|&x| {
            let x = f64::from(x);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// The 2D point `[mu, sigma]` summarizing a video's feature magnitudes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoSummary {
    pub video_id: String,
    pub mu: f64,
    pub sigma: f64,
}

impl VideoSummary {
    pub fn point(&self) -> [f64; 2] {
        [self.mu, self.sigma]
    }
}

/// Mean and sample standard deviation (`m - 1` denominator) of the segment
/// norms. A single-segment video gets `sigma = 0`.
pub fn summarize_video(v: &VideoRecord) -> VideoSummary {
    let norms: Vec<f64> = v.segments().map(segment_norm).collect();
    let m = norms.len() as f64;
    let mu = norms.iter().sum::<f64>() / m;
    let sigma = if norms.len() > 1 {
        (norms.iter().map(|z| (z - mu) * (z - mu)).sum::<f64>() / (m - 1.0)).sqrt()
    } else {
        0.0
    };
    VideoSummary {
        video_id: v.id.clone(),
        mu,
        sigma,
    }
}

pub fn summarize_bundle(b: &FeatureBundle) -> Result<Vec<VideoSummary>> {
    if b.is_empty() {
        return Err(Error::InsufficientData(
            "cannot summarize an empty bundle".into(),
        ));
    }
    Ok(b.videos.par_iter().map(summarize_video).collect())
}

/// Ground-truth sidecar: per-video frame labels, used for evaluation and by
/// the supervised ablation modes. Video labels default to "any frame is
/// anomalous".
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TruthManifest {
    pub frame_labels: BTreeMap<String, Vec<u8>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub video_labels: BTreeMap<String, u8>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub segment_labels: BTreeMap<String, Vec<u8>>,
}

impl TruthManifest {
    pub fn video_label(&self, id: &str) -> Option<u8> {
        self.video_labels.get(id).copied().or_else(|| {
            self.frame_labels
                .get(id)
                .map(|f| u8::from(f.iter().any(|&l| l != 0)))
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let truth: Self = serde_json::from_str(&text)?;
        for (id, labels) in truth.frame_labels.iter().chain(&truth.segment_labels) {
            if labels.iter().any(|&l| l > 1) {
                return Err(Error::LabelMismatch(format!(
                    "non-binary label for video {id}"
                )));
            }
        }
        Ok(truth)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path)
    }
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn video(id: &str, segs: &[Vec<f32>]) -> VideoRecord {
        VideoRecord::from_segments(id, 16, segs).unwrap()
    }

    fn sample_bundle() -> FeatureBundle {
        FeatureBundle::new(
            2,
            vec![
                video("a", &[vec![3.0, 4.0], vec![0.0, 1.0]]),
                video("b", &[vec![-1.5, 2.25]]),
            ],
            "unit",
        )
        .unwrap()
    }

    #[test]
    fn norms() {
        assert_eq!(segment_norm(&[0.0; 8]), 0.0);
        assert_eq!(segment_norm(&[0.0, 1.0, 0.0]), 1.0);
        assert_eq!(segment_norm(&[3.0, 4.0]), 5.0);
    }

    #[test]
    fn summary_hand_values() {
        let s = summarize_video(&video("v", &[vec![2.0, 0.0], vec![0.0, 4.0]]));
        assert!((s.mu - 3.0).abs() < 1e-12);
        assert!((s.sigma - 2f64.sqrt()).abs() < 1e-12);

        let s = summarize_video(&video("v", &[vec![7.0, 0.0]]));
        assert_eq!((s.mu, s.sigma), (7.0, 0.0));
    }

    #[test]
    fn bundle_summaries_follow_order() {
        let b = sample_bundle();
        let s = summarize_bundle(&b).unwrap();
        assert_eq!(s[0], summarize_video(&b.videos()[0]));
        assert_eq!(s[1].video_id, "b");

        let rev = FeatureBundle::new(2, b.videos().iter().rev().cloned().collect(), "").unwrap();
        let s2 = summarize_bundle(&rev).unwrap();
        assert_eq!(s2[0], s[1]);
        assert_eq!(s2[1], s[0]);

        let empty = FeatureBundle::new(2, vec![], "").unwrap();
        assert!(matches!(
            summarize_bundle(&empty),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let b = sample_bundle();
        let p1 = dir.path().join("one.c2fb");
        let p2 = dir.path().join("two.c2fb");
        write_bundle(&b, &p1).unwrap();
        write_bundle(&b, &p2).unwrap();
        assert_eq!(read_bundle(&p1).unwrap(), b);
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn empty_bundle_round_trip() {
        let b = FeatureBundle::new(4, vec![], "").unwrap();
        let bytes = b.to_bytes();
        assert_eq!(bytes.len(), 16);
        assert_eq!(&bytes[12..16], &0u32.to_le_bytes());
        assert_eq!(FeatureBundle::from_bytes(&bytes).unwrap(), b);
    }

    #[test]
    fn untagged_bundle_is_base_layout() {
        let b = FeatureBundle::new(1, vec![video("x", &[vec![1.0]])], "").unwrap();
        let bytes = b.to_bytes();
        // header 16 + id_len 2 + "x" 1 + m 4 + r 4 + one f32
        assert_eq!(bytes.len(), 16 + 2 + 1 + 4 + 4 + 4);
        assert_eq!(&bytes[..4], b"C2FB");
        assert_eq!(&bytes[27..31], &1.0f32.to_le_bytes());
    }

    #[test]
    fn read_errors_are_distinct() {
        let good = sample_bundle().to_bytes();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            FeatureBundle::from_bytes(&bad),
            Err(Error::MalformedHeader(_))
        ));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(
            FeatureBundle::from_bytes(&bad),
            Err(Error::MalformedHeader(_))
        ));

        assert!(matches!(
            FeatureBundle::from_bytes(&good[..good.len() - 9]),
            Err(Error::Truncated(_))
        ));

        // first feature value of video "a" -> NaN
        let mut bad = good.clone();
        let off = 16 + 2 + 1 + 8;
        bad[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            FeatureBundle::from_bytes(&bad),
            Err(Error::NonFinite { segment: 0, .. })
        ));

        // rename "b" to "a"
        let mut bad = good.clone();
        let off = 16 + 2 + 1 + 8 + 16 + 2;
        assert_eq!(bad[off], b'b');
        bad[off] = b'a';
        assert!(matches!(
            FeatureBundle::from_bytes(&bad),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn constructor_rejects_mixed_dims() {
        let err = FeatureBundle::new(
            2,
            vec![
                video("a", &[vec![1.0, 2.0]]),
                video("b", &[vec![1.0, 2.0, 3.0]]),
            ],
            "",
        );
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
        assert!(VideoRecord::from_segments("e", 16, &[]).is_err());
    }

    #[test]
    fn truth_video_label_falls_back_to_frames() {
        let mut t = TruthManifest::default();
        t.frame_labels.insert("a".into(), vec![0, 0, 1]);
        t.frame_labels.insert("b".into(), vec![0, 0]);
        assert_eq!(t.video_label("a"), Some(1));
        assert_eq!(t.video_label("b"), Some(0));
        assert_eq!(t.video_label("c"), None);
    }

    fn arb_video(dim: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
        prop::collection::vec(prop::collection::vec(-100f32..100.0, dim), 1..12)
    }

    proptest! {
        #[test]
        fn bytes_round_trip((dim, vids, tag) in (1usize..6).prop_flat_map(|dim| {
            (Just(dim), prop::collection::vec(arb_video(dim), 0..5), "[a-z]{0,8}")
        })) {
            let videos = vids
                .iter()
                .enumerate()
                .map(|(i, segs)| VideoRecord::from_segments(format!("v{i}"), 1 + i as u32, segs).unwrap())
                .collect();
            let b = FeatureBundle::new(dim, videos, tag).unwrap();
            prop_assert_eq!(FeatureBundle::from_bytes(&b.to_bytes()).unwrap(), b);
        }

        #[test]
        fn summary_scales_linearly(segs in arb_video(3), c in 0.1f64..20.0) {
            let v = VideoRecord::from_segments("v", 16, &segs).unwrap();
            let scaled: Vec<Vec<f32>> = segs
                .iter()
                .map(|s| s.iter().map(|&x| (f64::from(x) * c) as f32).collect())
                .collect();
            let w = VideoRecord::from_segments("v", 16, &scaled).unwrap();
            let (a, b) = (summarize_video(&v), summarize_video(&w));
            // f32 storage of the scaled features bounds the agreement.
            let tol = 1e-5 * (1.0 + b.mu);
            prop_assert!((a.mu * c - b.mu).abs() <= tol);
            prop_assert!((a.sigma * c - b.sigma).abs() <= tol);
        }

        #[test]
        fn summary_invariant_under_rotation(segs in arb_video(2), theta in 0f64..std::f64::consts::TAU) {
            let (s, co) = theta.sin_cos();
            let rotated: Vec<Vec<f32>> = segs
                .iter()
                .map(|f| {
                    let (x, y) = (f64::from(f[0]), f64::from(f[1]));
                    vec![(co * x - s * y) as f32, (s * x + co * y) as f32]
                })
                .collect();
            let a = summarize_video(&VideoRecord::from_segments("v", 16, &segs).unwrap());
            let b = summarize_video(&VideoRecord::from_segments("v", 16, &rotated).unwrap());
            let tol = 1e-4 * (1.0 + a.mu);
            prop_assert!((a.mu - b.mu).abs() <= tol);
            prop_assert!((a.sigma - b.sigma).abs() <= tol);
        }
    }
}
