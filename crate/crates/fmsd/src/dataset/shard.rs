//! Binary trajectory shards with a JSON manifest sidecar.
//!
//! Layout: 4-byte magic `FMSD`, little-endian `u32` version, then fixed-size
//! records of `f32` payload. The manifest carries dimensions, seed material,
//! per-record byte offsets, normalization statistics, and a SHA-256 checksum
//! of the record region.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::GeneratedSet;
use crate::error::{Error, Result};
use crate::sde::SystemId;

pub const SHARD_MAGIC: &[u8; 4] = b"FMSD";
pub const SHARD_VERSION: u32 = 1;

/// One trajectory's stored arrays (`f32`, unpadded dims).
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub param_idx: u32,
    pub ic_idx: u32,
    pub noise_idx: u32,
    /// Parameter values in sorted-name order.
    pub params: Vec<f32>,
    /// Coarse states, `(n_coarse + 1) * state_dim` row-major.
    pub coarse: Vec<f32>,
    /// Error series, same shape as `coarse`.
    pub err: Vec<f32>,
    /// Aggregated increments, `n_coarse * noise_dim` row-major.
    pub agg_noise: Vec<f32>,
}

/// Affine standardization statistics computed over a training shard. Stored
/// in the manifest and inverted at inference time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub value_mean: [f64; 3],
    pub value_std: [f64; 3],
    pub err_mean: [f64; 3],
    pub err_std: [f64; 3],
    /// RMS of aggregated increments per demo row.
    pub noise_std: [f64; 3],
    /// Time horizon used to scale timestamps into [0, 1].
    pub t_scale: f64,
}

impl NormStats {
    pub fn identity(t_scale: f64) -> Self {
        NormStats {
            value_mean: [0.0; 3],
            value_std: [1.0; 3],
            err_mean: [0.0; 3],
            err_std: [1.0; 3],
            noise_std: [1.0; 3],
            t_scale,
        }
    }

    fn from_records(
        system: SystemId,
        records: &[TrajectoryRecord],
        state_dim: usize,
        noise_dim: usize,
        t_scale: f64,
    ) -> Self {
        let mut stats = NormStats::identity(t_scale);
        if records.is_empty() {
            return stats;
        }
        let channels = crate::dataset::demo_channel_map(system, noise_dim);
        let mut vsum = [0.0f64; 3];
        let mut vsq = [0.0f64; 3];
        let mut esum = [0.0f64; 3];
        let mut esq = [0.0f64; 3];
        let mut nsq = [0.0f64; 3];
        let mut n_state = 0usize;
        let mut n_noise = 0usize;
        for rec in records {
            let cols = rec.coarse.len() / state_dim;
            for c in 0..cols {
                for d in 0..state_dim {
                    let v = rec.coarse[c * state_dim + d] as f64;
                    let e = rec.err[c * state_dim + d] as f64;
                    vsum[d] += v;
                    vsq[d] += v * v;
                    esum[d] += e;
                    esq[d] += e * e;
                }
            }
            n_state += cols;
            let rows = rec.agg_noise.len() / noise_dim;
            for r in 0..rows {
                for (row, &ch) in channels.iter().enumerate() {
                    let w = rec.agg_noise[r * noise_dim + ch] as f64;
                    nsq[row] += w * w;
                }
            }
            n_noise += rows;
        }
        for d in 0..state_dim {
            let mean = vsum[d] / n_state as f64;
            let var = (vsq[d] / n_state as f64 - mean * mean).max(0.0);
            stats.value_mean[d] = mean;
            stats.value_std[d] = var.sqrt().max(1e-12);
            let emean = esum[d] / n_state as f64;
            let evar = (esq[d] / n_state as f64 - emean * emean).max(0.0);
            stats.err_mean[d] = emean;
            stats.err_std[d] = evar.sqrt().max(1e-12);
        }
        for row in 0..channels.len() {
            stats.noise_std[row] = (nsq[row] / n_noise.max(1) as f64).sqrt().max(1e-12);
        }
        stats
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShardManifest {
    pub version: u32,
    pub system: SystemId,
    pub n_params: usize,
    pub n_ics: usize,
    pub n_noises: usize,
    pub n_coarse: usize,
    pub stride_k: usize,
    pub dt_fine: f64,
    pub base_seed: u64,
    pub state_dim: usize,
    pub noise_dim: usize,
    pub param_names: Vec<String>,
    pub rejections: u64,
    /// Absolute byte offset of each record in the shard file.
    pub offsets: Vec<u64>,
    /// SHA-256 of the record region, hex.
    pub checksum: String,
    pub norm: NormStats,
}

impl ShardManifest {
    pub fn record_floats(&self) -> usize {
        self.param_names.len()
            + 2 * (self.n_coarse + 1) * self.state_dim
            + self.n_coarse * self.noise_dim
    }

    pub fn record_bytes(&self) -> usize {
        12 + 4 * self.record_floats()
    }
}

#[derive(Debug)]
pub struct ShardData {
    pub manifest: ShardManifest,
    pub records: Vec<TrajectoryRecord>,
}

impl ShardData {
    /// Record indices grouped by parameter index, keys ascending.
    pub fn param_groups(&self) -> Vec<(u32, Vec<usize>)> {
        let mut map: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
        for (i, r) in self.records.iter().enumerate() {
            map.entry(r.param_idx).or_default().push(i);
        }
        map.into_iter().collect()
    }
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    std::path::PathBuf::from(s)
}

fn push_f32s(buf: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Write records and manifest sidecar; returns the manifest.
pub fn write_shard(path: &Path, set: &GeneratedSet) -> Result<ShardManifest> {
    let mut payload = Vec::new();
    let mut offsets = Vec::with_capacity(set.records.len());
    let header_len = 8u64;
    for rec in &set.records {
        offsets.push(header_len + payload.len() as u64);
        payload.extend_from_slice(&rec.param_idx.to_le_bytes());
        payload.extend_from_slice(&rec.ic_idx.to_le_bytes());
        payload.extend_from_slice(&rec.noise_idx.to_le_bytes());
        push_f32s(&mut payload, &rec.params);
        push_f32s(&mut payload, &rec.coarse);
        push_f32s(&mut payload, &rec.err);
        push_f32s(&mut payload, &rec.agg_noise);
    }
    let checksum = hex_digest(&payload);

    let t_scale = set.n_coarse as f64 * set.stride_k as f64 * set.dt_fine;
    let manifest = ShardManifest {
        version: SHARD_VERSION,
        system: set.system,
        n_params: set.counts.0,
        n_ics: set.counts.1,
        n_noises: set.counts.2,
        n_coarse: set.n_coarse,
        stride_k: set.stride_k,
        dt_fine: set.dt_fine,
        base_seed: set.base_seed,
        state_dim: set.state_dim,
        noise_dim: set.noise_dim,
        param_names: set.param_names.clone(),
        rejections: set.rejections,
        offsets,
        checksum,
        norm: NormStats::from_records(set.system, &set.records, set.state_dim, set.noise_dim, t_scale),
    };

    let mut file = fs::File::create(path)?;
    file.write_all(SHARD_MAGIC)?;
    file.write_all(&SHARD_VERSION.to_le_bytes())?;
    file.write_all(&payload)?;
    file.flush()?;

    fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn read_f32s(bytes: &[u8], pos: &mut usize, count: usize) -> Result<Vec<f32>> {
    let need = count * 4;
    if *pos + need > bytes.len() {
        return Err(Error::Format("record truncated".into()));
    }
    let out = bytes[*pos..*pos + need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    *pos += need;
    Ok(out)
}

/// Read a shard and validate magic, version, checksum, and offsets.
pub fn read_shard(path: &Path) -> Result<ShardData> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[0..4] != SHARD_MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != SHARD_VERSION {
        return Err(Error::Version {
            found: version,
            supported: SHARD_VERSION,
        });
    }
    let manifest_text = fs::read_to_string(manifest_path(path))?;
    let manifest: ShardManifest = serde_json::from_str(&manifest_text)?;
    if manifest.version != SHARD_VERSION {
        return Err(Error::Version {
            found: manifest.version,
            supported: SHARD_VERSION,
        });
    }

    let payload = &bytes[8..];
    let actual = hex_digest(payload);
    if actual != manifest.checksum {
        return Err(Error::Checksum {
            expected: manifest.checksum.clone(),
            actual,
        });
    }

    let mut prev = 0u64;
    for (i, &off) in manifest.offsets.iter().enumerate() {
        if i > 0 && off <= prev {
            return Err(Error::Format(format!("offsets not strictly increasing at {i}")));
        }
        prev = off;
    }

    let d = manifest.state_dim;
    let q = manifest.noise_dim;
    let n = manifest.n_coarse;
    let p_len = manifest.param_names.len();
    let mut records = Vec::with_capacity(manifest.offsets.len());
    for &off in &manifest.offsets {
        let mut pos = (off - 8) as usize;
        if pos + 12 > payload.len() {
            return Err(Error::Format("record header out of bounds".into()));
        }
        let read_u32 = |payload: &[u8], pos: &mut usize| {
            let v = u32::from_le_bytes([
                payload[*pos],
                payload[*pos + 1],
                payload[*pos + 2],
                payload[*pos + 3],
            ]);
            *pos += 4;
            v
        };
        let param_idx = read_u32(payload, &mut pos);
        let ic_idx = read_u32(payload, &mut pos);
        let noise_idx = read_u32(payload, &mut pos);
        let params = read_f32s(payload, &mut pos, p_len)?;
        let coarse = read_f32s(payload, &mut pos, (n + 1) * d)?;
        let err = read_f32s(payload, &mut pos, (n + 1) * d)?;
        let agg_noise = read_f32s(payload, &mut pos, n * q)?;
        records.push(TrajectoryRecord {
            param_idx,
            ic_idx,
            noise_idx,
            params,
            coarse,
            err,
            agg_noise,
        });
    }
    Ok(ShardData { manifest, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, ProtocolConfig};
    use crate::sde;

    fn small_set() -> GeneratedSet {
        let sys = sde::get(SystemId::Ou);
        generate_dataset(
            sys,
            &ProtocolConfig {
                n_params: 2,
                n_ics: 2,
                n_noises: 3,
                n_coarse: Some(8),
                base_seed: 17,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn shard_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ou.fmsd");
        let set = small_set();
        let manifest = write_shard(&path, &set).unwrap();
        assert_eq!(manifest.offsets.len(), 12);
        assert_eq!(manifest.record_bytes(), 12 + 4 * manifest.record_floats());

        let data = read_shard(&path).unwrap();
        assert_eq!(data.records, set.records);
        assert_eq!(data.manifest.checksum, manifest.checksum);
        assert_eq!(data.manifest.norm, manifest.norm);

        let groups = data.param_groups();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].1.len(), 6);
    }

    #[test]
    fn truncated_shard_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ou.fmsd");
        let set = small_set();
        write_shard(&path, &set).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        match read_shard(&path) {
            Err(Error::Checksum { .. }) => {}
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ou.fmsd");
        write_shard(&path, &small_set()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_shard(&path), Err(Error::Checksum { .. })));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ou.fmsd");
        write_shard(&path, &small_set()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_shard(&path), Err(Error::Version { .. })));
    }

    #[test]
    fn empty_shard_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.fmsd");
        let sys = sde::get(SystemId::Gbm);
        let set = generate_dataset(
            sys,
            &ProtocolConfig {
                n_params: 0,
                n_ics: 0,
                n_noises: 0,
                ..Default::default()
            },
        )
        .unwrap();
        let manifest = write_shard(&path, &set).unwrap();
        assert!(manifest.offsets.is_empty());
        let data = read_shard(&path).unwrap();
        assert!(data.records.is_empty());
    }

    #[test]
    fn norm_stats_standardize_values() {
        let set = small_set();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ou.fmsd");
        let manifest = write_shard(&path, &set).unwrap();
        let n = manifest.norm.clone();
        // OU values start in [50, 100]; the mean must be in that ballpark.
        assert!(n.value_mean[0] > 10.0 && n.value_mean[0] < 110.0);
        assert!(n.value_std[0] > 0.0);
        assert!(n.err_std[0] > 0.0);
        assert!(n.noise_std[0] > 0.0);
        // Padded dims stay identity.
        assert_eq!(n.value_std[1], 1.0);
        assert_eq!(n.err_std[2], 1.0);
        assert!((n.t_scale - 8.0 * 100.0 * 1e-3).abs() < 1e-12);
    }
}
