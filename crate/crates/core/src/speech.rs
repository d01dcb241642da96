//! Frozen frame-level speech features: the `PLFF` file format, utterance
//! mean-pooling and the linear projector into model space.

use std::fs;
use std::path::Path;

use thiserror::Error;

pub const PLFF_MAGIC: [u8; 4] = *b"PLFF";
const HEADER_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected \"PLFF\"")]
    BadMagic { found: [u8; 4] },
    #[error("header too short: {0} bytes")]
    ShortHeader(usize),
    #[error("payload is {found} bytes, header declares {frames}x{dim} f32 ({expected} bytes)")]
    PayloadSize {
        frames: usize,
        dim: usize,
        expected: usize,
        found: usize,
    },
    #[error("frame matrix must have at least one frame and one dimension, got {frames}x{dim}")]
    EmptyMatrix { frames: usize, dim: usize },
    #[error("non-finite value at frame {frame}, dim {dim}")]
    NonFinite { frame: usize, dim: usize },
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
}

/// A frames x feature_dim matrix of frozen features, stored row-major in f32.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FrameMatrix {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self, FeatureError> {
        if frames == 0 || dim == 0 {
            return Err(FeatureError::EmptyMatrix { frames, dim });
        }
        if data.len() != frames * dim {
            return Err(FeatureError::PayloadSize {
                frames,
                dim,
                expected: frames * dim * 4,
                found: data.len() * 4,
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite {
                frame: i / dim,
                dim: i % dim,
            });
        }
        Ok(Self { frames, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, FeatureError> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(FeatureError::DimMismatch {
                expected: dim,
                found: bad.len(),
            });
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(&PLFF_MAGIC);
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FeatureError> {
        if bytes.len() < HEADER_LEN {
            return Err(FeatureError::ShortHeader(bytes.len()));
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != PLFF_MAGIC {
            return Err(FeatureError::BadMagic { found: magic });
        }
        let frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let payload = &bytes[HEADER_LEN..];
        let expected = frames * dim * 4;
        if payload.len() != expected {
            return Err(FeatureError::PayloadSize {
                frames,
                dim,
                expected,
                found: payload.len(),
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(frames, dim, data)
    }
}

/// Reads one `PLFF` file.
pub fn load_frame_features(path: impl AsRef<Path>) -> Result<FrameMatrix, FeatureError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    })?;
    FrameMatrix::from_bytes(&bytes)
}

pub fn save_frame_features(path: impl AsRef<Path>, m: &FrameMatrix) -> Result<(), FeatureError> {
    let path = path.as_ref();
    fs::write(path, m.to_bytes()).map_err(|source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Column means over frames, accumulated in f64.
pub fn mean_pool(m: &FrameMatrix) -> Vec<f64> {
    let mut acc = vec![0.0f64; m.dim];
    for row in m.rows() {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    let n = m.frames as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Affine map from pooled features into model space: `weight * v + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub model_dim: usize,
    pub feature_dim: usize,
    /// model_dim x feature_dim, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Projector {
    pub fn zeros(model_dim: usize, feature_dim: usize) -> Self {
        Self {
            model_dim,
            feature_dim,
            weight: vec![0.0; model_dim * feature_dim],
            bias: vec![0.0; model_dim],
        }
    }
}

pub fn project(v: &[f64], p: &Projector) -> Result<Vec<f64>, FeatureError> {
    if v.len() != p.feature_dim {
        return Err(FeatureError::DimMismatch {
            expected: p.feature_dim,
            found: v.len(),
        });
    }
    let mut out = vec![0.0; p.model_dim];
    project_into(&p.weight, &p.bias, v, &mut out);
    Ok(out)
}

/// Unchecked kernel shared with the model's forward pass.
pub(crate) fn project_into(weight: &[f64], bias: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    for (o, (row, b)) in out.iter_mut().zip(weight.chunks_exact(d).zip(bias)) {
        *o = b + row.iter().zip(v).map(|(w, x)| w * x).sum::<f64>();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_by_two() -> FrameMatrix {
        FrameMatrix::from_rows(&[vec![1.0, 3.0], vec![3.0, 1.0]]).unwrap()
    }

    #[test]
    fn decodes_hand_built_file() {
        let mut bytes = b"PLFF".to_vec();
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        for v in [1.0f32, 3.0, 3.0, 1.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let m = FrameMatrix::from_bytes(&bytes).unwrap();
        assert_eq!(m, two_by_two());
        assert_eq!(m.to_bytes(), bytes);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut bytes = two_by_two().to_bytes();
        bytes.pop();
        assert!(matches!(
            FrameMatrix::from_bytes(&bytes),
            Err(FeatureError::PayloadSize { .. })
        ));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = two_by_two().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            FrameMatrix::from_bytes(&bytes),
            Err(FeatureError::BadMagic { .. })
        ));
    }

    #[test]
    fn pooling_examples() {
        assert_eq!(mean_pool(&two_by_two()), vec![2.0, 2.0]);
        let single = FrameMatrix::from_rows(&[vec![0.5, -1.25, 7.0]]).unwrap();
        assert_eq!(mean_pool(&single), vec![0.5, -1.25, 7.0]);
    }

    #[test]
    fn pooling_matches_column_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f32> = (0..40).map(|_| rng.random_range(-3.0..3.0)).collect();
        let m = FrameMatrix::new(5, 8, data.clone()).unwrap();
        let pooled = mean_pool(&m);
        for c in 0..8 {
            let mut s = 0.0f64;
            for r in 0..5 {
                s += data[r * 8 + c] as f64;
            }
            assert!((pooled[c] - s / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn projector_examples() {
        let mut p = Projector::zeros(3, 2);
        p.bias = vec![1.0, -2.0, 0.5];
        assert_eq!(project(&[9.0, -4.0], &p).unwrap(), p.bias);

        let mut id = Projector::zeros(3, 3);
        for i in 0..3 {
            id.weight[i * 3 + i] = 1.0;
        }
        assert_eq!(project(&[0.1, 0.2, 0.3], &id).unwrap(), vec![0.1, 0.2, 0.3]);

        assert!(project(&[1.0], &id).is_err());
    }

    #[test]
    fn projector_matches_dot_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, d) = (6, 4);
        let p = Projector {
            model_dim: m,
            feature_dim: d,
            weight: (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            bias: (0..m).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = project(&v, &p).unwrap();
        for i in 0..m {
            let mut s = p.bias[i];
            for j in 0..d {
                s += p.weight[i * d + j] * v[j];
            }
            assert!((got[i] - s).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn pooling_ignores_frame_order(
            rows in prop::collection::vec(prop::collection::vec(-100.0f32..100.0, 3), 1..9),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let m = FrameMatrix::from_rows(&rows).unwrap();
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let p = FrameMatrix::from_rows(&shuffled).unwrap();
            // f32 -> f64 sums of at most 8 terms are exact, so order cannot matter.
            prop_assert_eq!(mean_pool(&m), mean_pool(&p));
        }

        #[test]
        fn projection_is_affine(
            w in prop::collection::vec(-2.0f64..2.0, 12),
            b in prop::collection::vec(-2.0f64..2.0, 4),
            x in prop::collection::vec(-5.0f64..5.0, 3),
            y in prop::collection::vec(-5.0f64..5.0, 3),
        ) {
            let p = Projector { model_dim: 4, feature_dim: 3, weight: w, bias: b };
            let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
            let px = project(&x, &p).unwrap();
            let py = project(&y, &p).unwrap();
            let p0 = project(&[0.0; 3], &p).unwrap();
            let pxy = project(&xy, &p).unwrap();
            for i in 0..4 {
                prop_assert!((px[i] + py[i] - p0[i] - pxy[i]).abs() < 1e-9);
            }
        }
    }
}
