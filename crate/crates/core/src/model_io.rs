//! Binary model files.
//!
//! Layout, all integers and floats little-endian, `f64` as IEEE-754 bits:
//!
//! ```text
//! offset  size  field
//! 0       8     magic "CADISMDL"
//! 8       4     format version (u32, currently 1)
//! 12      4     reserved (u32, 0)
//! 16      4     cluster count M (u32)
//! 20      4     patch side (u32)
//! 24      4     patch dim p = side^2 (u32)
//! 28      8     beta (f64)
//! 36      8     patch count N (u64)
//! 44      8     dataset hash (u64, CRC-64/XZ of the patch matrix bytes)
//! 52      4     outer iterations (u32)
//! 56      4     reseed events (u32)
//! 60      8     created timestamp, unix seconds (u64)
//! 68      4     log-likelihood trace length T (u32)
//! 72      8T    trace values (f64 each)
//! ...           M cluster blocks:
//!                 8           member count (u64)
//!                 8 each      member indices (u64, ascending)
//!                 8p          gg mu
//!                 8p^2        gg sigma, row-major
//!                 8p          gauss mean
//!                 8p^2        gauss cov, row-major
//! ...     8Np   patch store, row-major
//! end-8   8     CRC-64/XZ of every preceding byte (u64)
//! ```

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;

use crate::density::{GaussianParams, GgParams};
use crate::error::Result;
use crate::prior::{Cluster, ClusterModel, TrainingMeta};

const MAGIC: &[u8; 8] = b"CADISMDL";
const FORMAT_VERSION: u32 = 1;

const CRC64: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_XZ);

/// CRC-64/XZ checksum, also used for dataset hashes.
pub fn crc64(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

#[derive(Debug, thiserror::Error)]
pub enum ModelIoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("not a model file (bad magic)")]
    BadMagic,

    #[error("unsupported model format version {found} (supported: {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },

    #[error("truncated model file: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },

    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },

    #[error("corrupt model file: {0}")]
    Corrupt(String),
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], ModelIoError> {
        if self.bytes.len() - self.pos < n {
            return Err(ModelIoError::Truncated {
                offset: self.pos,
                needed: n - (self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, ModelIoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, ModelIoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> std::result::Result<f64, ModelIoError> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn f64_vec(&mut self, n: usize) -> std::result::Result<Vec<f64>, ModelIoError> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect())
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(out: &mut Vec<u8>, v: f64) {
    push_u64(out, v.to_bits());
}

/// Serializes a model; byte-for-byte deterministic for equal models.
pub fn save_model(model: &ClusterModel, path: &Path) -> Result<()> {
    let p = model.patch_dim();
    let store = model.patch_store();
    let (n, _) = store.dim();
    let meta = model.meta();

    let mut out = Vec::with_capacity(72 + n * p * 8 + model.num_clusters() * (2 * p * p + 2 * p) * 8);
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, FORMAT_VERSION);
    push_u32(&mut out, 0);
    push_u32(&mut out, model.num_clusters() as u32);
    push_u32(&mut out, model.patch_side() as u32);
    push_u32(&mut out, p as u32);
    push_f64(&mut out, model.beta());
    push_u64(&mut out, n as u64);
    push_u64(&mut out, meta.dataset_hash);
    push_u32(&mut out, meta.outer_iterations);
    push_u32(&mut out, meta.reseed_events);
    push_u64(&mut out, meta.created_unix);
    push_u32(&mut out, meta.ll_trace.len() as u32);
    for &v in &meta.ll_trace {
        push_f64(&mut out, v);
    }

    for cluster in model.clusters() {
        push_u64(&mut out, cluster.members().len() as u64);
        for &i in cluster.members() {
            push_u64(&mut out, i as u64);
        }
        for v in cluster.gg().mu().iter() {
            push_f64(&mut out, *v);
        }
        for v in cluster.gg().sigma().row_iter() {
            for x in v.iter() {
                push_f64(&mut out, *x);
            }
        }
        for v in cluster.gauss().mean().iter() {
            push_f64(&mut out, *v);
        }
        for v in cluster.gauss().cov().row_iter() {
            for x in v.iter() {
                push_f64(&mut out, *x);
            }
        }
    }

    for v in store.iter() {
        push_f64(&mut out, *v);
    }

    let checksum = crc64(&out);
    push_u64(&mut out, checksum);
    fs::write(path, out).map_err(ModelIoError::from)?;
    Ok(())
}

/// Loads and re-validates a model file.
pub fn load_model(path: &Path) -> Result<ClusterModel> {
    let bytes = fs::read(path).map_err(ModelIoError::from)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };

    if r.take(8).map_err(|_| ModelIoError::BadMagic)? != MAGIC {
        return Err(ModelIoError::BadMagic.into());
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(ModelIoError::UnsupportedVersion { found: version }.into());
    }
    r.u32()?; // reserved

    let m = r.u32()? as usize;
    let patch_side = r.u32()? as usize;
    let p = r.u32()? as usize;
    let beta = r.f64()?;
    let n = r.u64()? as usize;
    let dataset_hash = r.u64()?;
    let outer_iterations = r.u32()?;
    let reseed_events = r.u32()?;
    let created_unix = r.u64()?;
    let trace_len = r.u32()? as usize;
    let ll_trace = r.f64_vec(trace_len)?;

    let mut clusters = Vec::with_capacity(m);
    for _ in 0..m {
        let count = r.u64()? as usize;
        let mut members = Vec::with_capacity(count.min(n));
        for _ in 0..count {
            members.push(r.u64()? as usize);
        }
        let mu = DVector::from_vec(r.f64_vec(p)?);
        let sigma = DMatrix::from_row_slice(p, p, &r.f64_vec(p * p)?);
        let mean = DVector::from_vec(r.f64_vec(p)?);
        let cov = DMatrix::from_row_slice(p, p, &r.f64_vec(p * p)?);
        let gg = GgParams::new(mu, sigma, beta)?;
        let gauss = GaussianParams::new(mean, cov)?;
        clusters.push(Cluster::new(gg, gauss, members)?);
    }

    let store_flat = r.f64_vec(n * p)?;
    let stored_crc = r.u64()?;
    if r.pos != bytes.len() {
        return Err(ModelIoError::Corrupt(format!(
            "{} trailing bytes after checksum",
            bytes.len() - r.pos
        ))
        .into());
    }
    let computed = crc64(&bytes[..bytes.len() - 8]);
    if stored_crc != computed {
        return Err(ModelIoError::ChecksumMismatch {
            stored: stored_crc,
            computed,
        }
        .into());
    }

    let patch_store = Array2::from_shape_vec((n, p), store_flat)
        .map_err(|e| ModelIoError::Corrupt(format!("patch store shape: {e}")))?;

    ClusterModel::new(
        clusters,
        patch_store,
        patch_side,
        beta,
        TrainingMeta {
            dataset_hash,
            outer_iterations,
            reseed_events,
            created_unix,
            ll_trace,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::{learn_prior, LearnOptions};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn small_model() -> ClusterModel {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut patches = Array2::zeros((120, 4));
        for i in 0..120 {
            let base = if i < 60 { 50.0 } else { 190.0 };
            for j in 0..4 {
                patches[(i, j)] = base + 3.0 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        learn_prior(patches, 2, 2, 0.9, 5, &LearnOptions::default()).unwrap()
    }

    #[test]
    fn round_trip_preserves_everything_bitwise() {
        let model = small_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();

        assert_eq!(model.meta(), back.meta());
        assert_eq!(model.patch_side(), back.patch_side());
        assert_eq!(model.beta().to_bits(), back.beta().to_bits());
        assert_eq!(model.patch_store(), back.patch_store());
        for (a, b) in model.clusters().iter().zip(back.clusters().iter()) {
            assert_eq!(a.members(), b.members());
            assert_eq!(a.gg().mu(), b.gg().mu());
            assert_eq!(a.gg().sigma(), b.gg().sigma());
            assert_eq!(a.gauss().mean(), b.gauss().mean());
            assert_eq!(a.gauss().cov(), b.gauss().cov());
        }
    }

    #[test]
    fn save_is_bytewise_deterministic() {
        let model = small_model();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        save_model(&model, &p1).unwrap();
        save_model(&model, &p2).unwrap();
        assert_eq!(fs::read(p1).unwrap(), fs::read(p2).unwrap());
    }

    #[test]
    fn load_rejects_foreign_and_old_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");

        fs::write(&path, b"NOTAMODELFILE AT ALL").unwrap();
        assert!(matches!(
            load_model(&path),
            Err(crate::CoreError::ModelIo(ModelIoError::BadMagic))
        ));

        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&9u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(crate::CoreError::ModelIo(ModelIoError::UnsupportedVersion { found: 9 }))
        ));
    }

    #[test]
    fn load_reports_truncation_and_corruption_distinctly() {
        let model = small_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_model(&model, &path).unwrap();
        let full = fs::read(&path).unwrap();

        let cut = dir.path().join("cut.bin");
        fs::write(&cut, &full[..full.len() / 2]).unwrap();
        assert!(matches!(
            load_model(&cut),
            Err(crate::CoreError::ModelIo(ModelIoError::Truncated { .. }))
        ));

        let flipped = dir.path().join("flip.bin");
        let mut bad = full.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0xff;
        fs::write(&flipped, bad).unwrap();
        match load_model(&flipped) {
            Err(crate::CoreError::ModelIo(ModelIoError::ChecksumMismatch { stored, computed })) => {
                assert_ne!(stored, computed);
            }
            other => panic!("expected checksum mismatch, got {other:?}"),
        }
    }
}
