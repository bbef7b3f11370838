//! Reader and writer for the SPV volume container.
//!
//! SPV is a little-endian binary format with a fixed 76-byte header followed
//! by a raw payload. The byte offsets below are frozen; `docs/formats.md`
//! carries the same table for consumers outside this crate.
//!
//! Labels are stored as one `u8` per voxel, scalars as one IEEE-754 `f64`
//! per voxel per channel. The payload is channel-major, then x-fastest,
//! matching the in-memory layout of [`ScalarVolume`].

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, ScalarVolume, Volume, MAX_CLASSES};

/// Frozen byte offsets of the header fields. Version 1 is the only version.
pub mod offsets_v1 {
    /// `b"SPV1"`.
    pub const MAGIC: usize = 0;
    /// `u32`, must be 1.
    pub const VERSION: usize = 4;
    /// `u8`: 0 = u8 labels, 1 = f64 scalars.
    pub const DTYPE: usize = 8;
    /// `u8`: 3 = single channel, 4 = channel stack.
    pub const RANK: usize = 9;
    /// `u16`, must be 0.
    pub const RESERVED: usize = 10;
    /// Three `u64` voxel counts.
    pub const NX: usize = 12;
    pub const NY: usize = 20;
    pub const NZ: usize = 28;
    /// `u64` channel count; 1 when rank = 3.
    pub const CHANNELS: usize = 36;
    /// `u64` class count for label volumes; 0 for scalar volumes.
    pub const NUM_CLASSES: usize = 44;
    /// Three `f64` spacings in millimetres.
    pub const SX: usize = 52;
    pub const SY: usize = 60;
    pub const SZ: usize = 68;
    /// First payload byte.
    pub const PAYLOAD: usize = 76;

    pub const HEADER_LEN: usize = PAYLOAD;
}

const MAGIC: &[u8; 4] = b"SPV1";
const VERSION: u32 = 1;

const DTYPE_LABELS: u8 = 0;
const DTYPE_SCALARS: u8 = 1;

fn header_bytes(
    dtype: u8,
    rank: u8,
    dims: [usize; 3],
    channels: usize,
    num_classes: usize,
    spacing: [f64; 3],
) -> Vec<u8> {
    let mut h = Vec::with_capacity(offsets_v1::HEADER_LEN);
    h.extend_from_slice(MAGIC);
    h.extend_from_slice(&VERSION.to_le_bytes());
    h.push(dtype);
    h.push(rank);
    h.extend_from_slice(&0u16.to_le_bytes());
    for n in dims {
        h.extend_from_slice(&(n as u64).to_le_bytes());
    }
    h.extend_from_slice(&(channels as u64).to_le_bytes());
    h.extend_from_slice(&(num_classes as u64).to_le_bytes());
    for s in spacing {
        h.extend_from_slice(&s.to_le_bytes());
    }
    debug_assert_eq!(h.len(), offsets_v1::HEADER_LEN);
    h
}

/// Serializes a volume to SPV bytes. Output is a deterministic function of
/// the volume contents: equal volumes produce byte-identical files.
pub fn spv_bytes(volume: &Volume) -> Result<Vec<u8>> {
    match volume {
        Volume::Labels(v) => {
            let mut out = header_bytes(
                DTYPE_LABELS,
                3,
                v.dims(),
                1,
                v.num_classes(),
                v.spacing(),
            );
            out.extend_from_slice(v.labels());
            Ok(out)
        }
        Volume::Scalars(v) => {
            if !v.values().iter().all(|x| x.is_finite()) {
                return Err(Error::validation(
                    "scalar volume holds non-finite values; refusing to write".to_string(),
                ));
            }
            let rank = if v.channels() == 1 { 3 } else { 4 };
            let mut out = header_bytes(DTYPE_SCALARS, rank, v.dims(), v.channels(), 0, v.spacing());
            out.reserve(v.values().len() * 8);
            for x in v.values() {
                out.extend_from_slice(&x.to_le_bytes());
            }
            Ok(out)
        }
    }
}

/// Writes a volume to `path` in SPV format.
pub fn write_spv(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let bytes = spv_bytes(volume)?;
    fs::write(path, bytes)?;
    Ok(())
}

fn read_u64(bytes: &[u8], offset: usize) -> u64 {
    u64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap())
}

fn read_f64(bytes: &[u8], offset: usize) -> f64 {
    f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap())
}

fn to_usize(v: u64, what: &str) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::size(format!("{what} {v} exceeds the addressable size")))
}

/// Parses a volume from SPV bytes.
pub fn parse_spv(bytes: &[u8]) -> Result<Volume> {
    use offsets_v1::*;
    if bytes.len() < HEADER_LEN {
        return Err(Error::corruption(format!(
            "file holds {} bytes, header needs {HEADER_LEN}",
            bytes.len()
        )));
    }
    if &bytes[MAGIC..MAGIC + 4] != crate::spv::MAGIC {
        return Err(Error::format("bad magic, not an SPV file".to_string()));
    }
    let version = u32::from_le_bytes(bytes[VERSION..VERSION + 4].try_into().unwrap());
    if version != crate::spv::VERSION {
        return Err(Error::format(format!("unsupported SPV version {version}")));
    }
    let dtype = bytes[DTYPE];
    let rank = bytes[RANK];
    let reserved = u16::from_le_bytes(bytes[RESERVED..RESERVED + 2].try_into().unwrap());
    if reserved != 0 {
        return Err(Error::format(format!(
            "reserved header field must be 0, got {reserved}"
        )));
    }
    let dims = [
        to_usize(read_u64(bytes, NX), "nx")?,
        to_usize(read_u64(bytes, NY), "ny")?,
        to_usize(read_u64(bytes, NZ), "nz")?,
    ];
    let channels = to_usize(read_u64(bytes, CHANNELS), "channel count")?;
    let num_classes = to_usize(read_u64(bytes, NUM_CLASSES), "class count")?;
    let spacing = [
        read_f64(bytes, SX),
        read_f64(bytes, SY),
        read_f64(bytes, SZ),
    ];
    match rank {
        3 if channels != 1 => {
            return Err(Error::format(format!(
                "rank 3 requires exactly one channel, got {channels}"
            )));
        }
        4 if channels < 2 => {
            return Err(Error::format(format!(
                "rank 4 marks a channel stack, got {channels} channel(s)"
            )));
        }
        3 | 4 => {}
        other => return Err(Error::format(format!("unknown rank {other}"))),
    }
    let voxels = dims[0]
        .checked_mul(dims[1])
        .and_then(|p| p.checked_mul(dims[2]))
        .ok_or_else(|| Error::size(format!("dims {dims:?} overflow the addressable size")))?;
    let payload = &bytes[PAYLOAD..];
    match dtype {
        DTYPE_LABELS => {
            if rank != 3 {
                return Err(Error::format(
                    "label volumes are rank 3 with one channel".to_string(),
                ));
            }
            if num_classes == 0 || num_classes > MAX_CLASSES {
                return Err(Error::format(format!(
                    "label volume class count must be in 1..={MAX_CLASSES}, got {num_classes}"
                )));
            }
            if payload.len() != voxels {
                return Err(Error::corruption(format!(
                    "label payload holds {} bytes for {voxels} voxels",
                    payload.len()
                )));
            }
            let volume = LabelVolume::new(dims, spacing, num_classes, payload.to_vec())?;
            Ok(Volume::Labels(volume))
        }
        DTYPE_SCALARS => {
            if num_classes != 0 {
                return Err(Error::format(format!(
                    "scalar volumes carry class count 0, got {num_classes}"
                )));
            }
            let expect = voxels
                .checked_mul(channels)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| {
                    Error::size("payload size overflows the addressable size".to_string())
                })?;
            if payload.len() != expect {
                return Err(Error::corruption(format!(
                    "scalar payload holds {} bytes, header implies {expect}",
                    payload.len()
                )));
            }
            let values = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let volume = ScalarVolume::new(dims, spacing, channels, values)?;
            Ok(Volume::Scalars(volume))
        }
        other => Err(Error::format(format!("unknown dtype {other}"))),
    }
}

/// Reads a volume from an SPV file.
pub fn read_spv(path: impl AsRef<Path>) -> Result<Volume> {
    let bytes = fs::read(path)?;
    parse_spv(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_labels() -> LabelVolume {
        LabelVolume::new([1, 1, 1], [1.0, 1.0, 1.0], 1, vec![0]).unwrap()
    }

    #[test]
    fn header_field_sizes_sum_to_payload_offset() {
        use offsets_v1::*;
        let field_sizes = [4, 4, 1, 1, 2, 8, 8, 8, 8, 8, 8, 8, 8];
        assert_eq!(field_sizes.iter().sum::<usize>(), HEADER_LEN);
        assert_eq!(
            [
                MAGIC, VERSION, DTYPE, RANK, RESERVED, NX, NY, NZ, CHANNELS, NUM_CLASSES, SX, SY,
                SZ
            ],
            [0, 4, 8, 9, 10, 12, 20, 28, 36, 44, 52, 60, 68]
        );
    }

    #[test]
    fn single_voxel_label_file_is_header_plus_one_byte() {
        let bytes = spv_bytes(&Volume::Labels(tiny_labels())).unwrap();
        assert_eq!(bytes.len(), offsets_v1::HEADER_LEN + 1);
        assert_eq!(&bytes[..4], b"SPV1");
    }

    #[test]
    fn label_round_trip_is_bit_exact() {
        let v = LabelVolume::new(
            [3, 2, 2],
            [0.5, 1.25, 2.0],
            4,
            vec![0, 1, 2, 3, 3, 2, 1, 0, 0, 0, 1, 2],
        )
        .unwrap();
        let bytes = spv_bytes(&Volume::Labels(v.clone())).unwrap();
        let back = parse_spv(&bytes).unwrap().into_labels().unwrap();
        assert_eq!(back, v);
        assert_eq!(spv_bytes(&Volume::Labels(back)).unwrap(), bytes);
    }

    #[test]
    fn scalar_round_trip_is_bit_exact() {
        let values: Vec<f64> = (0..24).map(|i| (i as f64) * 0.1 - 1.0).collect();
        let v = ScalarVolume::new([2, 2, 3], [1.0, 2.0, 0.75], 2, values).unwrap();
        let bytes = spv_bytes(&Volume::Scalars(v.clone())).unwrap();
        assert_eq!(bytes[offsets_v1::RANK], 4);
        let back = parse_spv(&bytes).unwrap().into_scalars().unwrap();
        assert_eq!(back, v);
        assert_eq!(spv_bytes(&Volume::Scalars(back)).unwrap(), bytes);
    }

    #[test]
    fn write_is_deterministic_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.spv");
        let b = dir.path().join("b.spv");
        let v = Volume::Labels(tiny_labels());
        write_spv(&v, &a).unwrap();
        write_spv(&v, &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = spv_bytes(&Volume::Labels(tiny_labels())).unwrap();
        bytes[0] = b'X';
        assert!(matches!(parse_spv(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_unsupported_version() {
        let mut bytes = spv_bytes(&Volume::Labels(tiny_labels())).unwrap();
        bytes[offsets_v1::VERSION] = 2;
        assert!(matches!(parse_spv(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut bytes = spv_bytes(&Volume::Labels(tiny_labels())).unwrap();
        bytes.pop();
        assert!(matches!(parse_spv(&bytes), Err(Error::Corruption(_))));
    }

    #[test]
    fn rejects_trailing_bytes() {
        let mut bytes = spv_bytes(&Volume::Labels(tiny_labels())).unwrap();
        bytes.push(0);
        assert!(matches!(parse_spv(&bytes), Err(Error::Corruption(_))));
    }

    #[test]
    fn rejects_label_at_or_above_class_count() {
        let v = LabelVolume::new([2, 1, 1], [1.0, 1.0, 1.0], 3, vec![0, 2]).unwrap();
        let mut bytes = spv_bytes(&Volume::Labels(v)).unwrap();
        bytes[offsets_v1::NUM_CLASSES] = 2;
        assert!(matches!(parse_spv(&bytes), Err(Error::Validation(_))));
    }

    #[test]
    fn refuses_to_write_nonfinite_scalars() {
        let mut v = ScalarVolume::zeros([2, 1, 1], [1.0, 1.0, 1.0], 1).unwrap();
        v.values_mut()[1] = f64::NAN;
        let err = spv_bytes(&Volume::Scalars(v));
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn rejects_noncanonical_rank_channel_pairs() {
        let values: Vec<f64> = (0..8).map(f64::from).collect();
        let v = ScalarVolume::new([2, 2, 2], [1.0, 1.0, 1.0], 1, values).unwrap();
        let mut bytes = spv_bytes(&Volume::Scalars(v)).unwrap();
        assert_eq!(bytes[offsets_v1::RANK], 3);
        bytes[offsets_v1::RANK] = 4;
        assert!(matches!(parse_spv(&bytes), Err(Error::Format(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn random_volumes_round_trip_bit_exactly(
            nx in 1usize..6,
            ny in 1usize..6,
            nz in 1usize..6,
            channels in 1usize..4,
            num_classes in 1usize..6,
            as_labels in proptest::bool::ANY,
            seed in proptest::num::u64::ANY,
        ) {
            use rand::{RngExt, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let spacing = [
                rng.random_range(0.25..4.0),
                rng.random_range(0.25..4.0),
                rng.random_range(0.25..4.0),
            ];
            let n = nx * ny * nz;
            let volume = if as_labels {
                let labels = (0..n).map(|_| rng.random_range(0..num_classes) as u8).collect();
                Volume::Labels(LabelVolume::new([nx, ny, nz], spacing, num_classes, labels).unwrap())
            } else {
                let values = (0..n * channels).map(|_| rng.random_range(-1e6..1e6)).collect();
                Volume::Scalars(ScalarVolume::new([nx, ny, nz], spacing, channels, values).unwrap())
            };
            let bytes = spv_bytes(&volume).unwrap();
            let back = parse_spv(&bytes).unwrap();
            prop_assert_eq!(&back, &volume);
            prop_assert_eq!(spv_bytes(&back).unwrap(), bytes);
        }
    }
}
