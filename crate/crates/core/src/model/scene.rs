use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::ttt::FastWeights;

pub const MAGIC: &[u8; 4] = b"VGT3";
pub const FORMAT_VERSION: u32 = 1;
/// magic, version, layer count, d, m, config hash, seed, frame count
pub const HEADER_BYTES: usize = 4 + 4 + 4 + 4 + 4 + 8 + 8 + 4;

/// Fast weights of every global layer after mapping a scene, plus the
/// fingerprint of the model that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneState {
    pub config_hash: u64,
    pub seed: u64,
    pub n_frames: u32,
    pub layers: Vec<FastWeights>,
}

impl SceneState {
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.layers.first().map(|l| (l.dim(), l.hidden()))
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// `HEADER_BYTES + layers · 3 · d · m · 4`
    pub fn encoded_len(layers: usize, d: usize, m: usize) -> usize {
        HEADER_BYTES + layers * 3 * d * m * 4
    }

    /// Little-endian encoding; weights are stored as f32 in row-major order,
    /// w1, w3, w2 for each layer.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (d, m) = self.dims().unwrap_or((0, 0));
        if self.layers.iter().any(|l| l.dim() != d || l.hidden() != m) {
            return Err(Error::Contract("scene layers disagree on (d, m)".into()));
        }
        let mut out = Vec::with_capacity(Self::encoded_len(self.layers.len(), d, m));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [self.layers.len(), d, m] {
            let v = u32::try_from(v).map_err(|_| Error::Contract(format!("{v} does not fit in u32")))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.n_frames.to_le_bytes());
        for layer in &self.layers {
            for w in layer.matrices() {
                for &x in w.data() {
                    out.extend_from_slice(&(x as f32).to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Format(format!(
                "{} bytes is shorter than the {HEADER_BYTES}-byte header",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let version = u32_at(4);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let (layers, d, m) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
        let config_hash = u64_at(20);
        let seed = u64_at(28);
        let n_frames = u32_at(36);

        let expected = (|| {
            let per = 3usize.checked_mul(d)?.checked_mul(m)?.checked_mul(4)?;
            layers.checked_mul(per)?.checked_add(HEADER_BYTES)
        })()
        .ok_or_else(|| Error::Format("declared dimensions overflow".into()))?;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "expected {expected} bytes for {layers} layers of d={d}, m={m}, found {}",
                bytes.len()
            )));
        }
        if layers > 0 && (d == 0 || m == 0) {
            return Err(Error::Format("zero-sized fast weights".into()));
        }

        let mut floats = bytes[HEADER_BYTES..]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))));
        let mut take = |rows: usize, cols: usize| -> Result<Matrix> {
            Matrix::new(rows, cols, floats.by_ref().take(rows * cols).collect())
        };
        let mut out = Vec::with_capacity(layers);
        for _ in 0..layers {
            let w1 = take(d, m)?;
            let w3 = take(d, m)?;
            let w2 = take(m, d)?;
            out.push(FastWeights::new(w1, w3, w2)?);
        }
        Ok(Self {
            config_hash,
            seed,
            n_frames,
            layers: out,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rounds every weight to f32, the precision the file stores.
    pub fn quantized(&self) -> Self {
        let q = |w: &Matrix| w.map(|x| f64::from(x as f32));
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| FastWeights {
                    w1: q(&l.w1),
                    w3: q(&l.w3),
                    w2: q(&l.w2),
                })
                .collect(),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn scene(layers: usize) -> SceneState {
        let mut rng = Rng::new(5);
        SceneState {
            config_hash: 0x0123_4567_89ab_cdef,
            seed: 42,
            n_frames: 8,
            layers: (0..layers).map(|_| FastWeights::seeded(4, 2, &mut rng)).collect(),
        }
    }

    #[test]
    fn header_layout() {
        let bytes = scene(2).to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"VGT3");
        assert_eq!(bytes[4..8], 1u32.to_le_bytes());
        assert_eq!(bytes[8..12], 2u32.to_le_bytes());
        assert_eq!(bytes[12..16], 4u32.to_le_bytes());
        assert_eq!(bytes[16..20], 8u32.to_le_bytes());
        assert_eq!(bytes[20..28], 0x0123_4567_89ab_cdefu64.to_le_bytes());
        assert_eq!(bytes[28..36], 42u64.to_le_bytes());
        assert_eq!(bytes[36..40], 8u32.to_le_bytes());
        assert_eq!(bytes.len(), 40 + 2 * (4 * 4 * 8 * 3));
        assert_eq!(bytes.len(), SceneState::encoded_len(2, 4, 8));
    }

    #[test]
    fn first_weight_is_w1_row_major() {
        let s = scene(1);
        let bytes = s.to_bytes().unwrap();
        let first = f32::from_le_bytes(bytes[40..44].try_into().unwrap());
        let second = f32::from_le_bytes(bytes[44..48].try_into().unwrap());
        assert_eq!(first, s.layers[0].w1.get(0, 0) as f32);
        assert_eq!(second, s.layers[0].w1.get(0, 1) as f32);
    }

    #[test]
    fn round_trips() {
        let s = scene(3);
        let bytes = s.to_bytes().unwrap();
        let back = SceneState::from_bytes(&bytes).unwrap();
        assert_eq!(back, s.quantized());
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let empty = scene(0);
        assert_eq!(SceneState::from_bytes(&empty.to_bytes().unwrap()).unwrap(), empty);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = scene(1).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(SceneState::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&2u32.to_le_bytes());
        let err = SceneState::from_bytes(&bad).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
        assert!(SceneState::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(SceneState::from_bytes(&long).is_err());
        assert!(SceneState::from_bytes(&bytes[..10]).is_err());
        let mut huge = bytes;
        huge[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[16..20].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(SceneState::from_bytes(&huge).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.vgt3");
        let s = scene(2).quantized();
        s.write(&path).unwrap();
        assert_eq!(SceneState::read(&path).unwrap(), s);
    }
}
