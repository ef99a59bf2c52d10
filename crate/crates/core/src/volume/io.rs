//! `.vvol` container and JSON-lines manifests.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field                                   |
//! |-------:|-----:|-----------------------------------------|
//! | 0      | 8    | magic `VITAEVOL`                        |
//! | 8      | 4    | u32 version (1)                         |
//! | 12     | 4    | u32 channels                            |
//! | 16     | 12   | u32 × 3 dims D, H, W                    |
//! | 28     | 12   | f32 × 3 spacing (mm)                    |
//! | 40     | 1    | u8 dtype (0 = f32, 1 = f64)             |
//! | 41     | 19   | reserved, zero                          |
//! | 60     | 4    | u32 metadata length `m`                 |
//! | 64     | m    | UTF-8 JSON `{id, label, provenance}`    |
//! | 64+m   | p    | voxels, channel-major, d/h/w raster     |
//! | 64+m+p | 4    | u32 CRC-32 (IEEE) of the voxel payload  |

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Result, Volume, VolumeError};
use crate::tensor::{DType, Real};

pub const MAGIC: &[u8; 8] = b"VITAEVOL";
pub const HEADER_LEN: usize = 64;
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Metadata {
    id: String,
    label: Option<u32>,
    #[serde(default)]
    provenance: String,
}

fn io_err(path: &Path, source: std::io::Error) -> VolumeError {
    VolumeError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(offset: usize, msg: impl Into<String>) -> VolumeError {
    VolumeError::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

pub fn encode_volume<T: Real>(v: &Volume<T>) -> Vec<u8> {
    let meta = serde_json::to_vec(&Metadata {
        id: v.id.clone(),
        label: v.label,
        provenance: v.provenance.clone(),
    })
    .expect("metadata serializes");
    let dtype = T::DTYPE;
    let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + v.voxels.len() * dtype.size() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(v.channels as u32).to_le_bytes());
    for d in v.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in v.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.push(dtype.code());
    out.resize(60, 0);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    let payload_start = out.len();
    for &x in &v.voxels {
        x.write_le(&mut out);
    }
    let crc = crc32fast::hash(&out[payload_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| format_err(bytes.len(), format!("truncated: need 4 bytes at offset {at}")))
}

/// Parses a `.vvol` image. Voxels stored in the other precision are
/// converted to `T`.
pub fn decode_volume<T: Real>(bytes: &[u8]) -> Result<Volume<T>> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(bytes.len(), format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(format_err(0, "bad magic, expected VITAEVOL"));
    }
    let version = read_u32(bytes, 8)?;
    if version != VERSION {
        return Err(format_err(8, format!("unsupported version {version}")));
    }
    let channels = read_u32(bytes, 12)? as usize;
    let dims = [
        read_u32(bytes, 16)? as usize,
        read_u32(bytes, 20)? as usize,
        read_u32(bytes, 24)? as usize,
    ];
    let mut spacing = [0f32; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        *s = f32::from_le_bytes(bytes[28 + 4 * i..32 + 4 * i].try_into().unwrap());
    }
    let dtype = DType::from_code(bytes[40]).ok_or_else(|| format_err(40, format!("unknown dtype code {}", bytes[40])))?;
    let meta_len = read_u32(bytes, 60)? as usize;
    let meta_end = HEADER_LEN + meta_len;
    let meta_bytes = bytes
        .get(HEADER_LEN..meta_end)
        .ok_or_else(|| format_err(bytes.len(), format!("truncated metadata: need {meta_len} bytes at offset {HEADER_LEN}")))?;
    let meta: Metadata = serde_json::from_slice(meta_bytes).map_err(|e| format_err(HEADER_LEN, format!("metadata JSON: {e}")))?;
    let count = channels * dims.iter().product::<usize>();
    let payload_len = count * dtype.size();
    let payload = bytes
        .get(meta_end..meta_end + payload_len)
        .ok_or_else(|| format_err(bytes.len(), format!("truncated payload: need {payload_len} bytes at offset {meta_end}")))?;
    let crc_at = meta_end + payload_len;
    let stored = read_u32(bytes, crc_at)?;
    if crc32fast::hash(payload) != stored {
        return Err(format_err(crc_at, "payload checksum mismatch"));
    }
    if bytes.len() != crc_at + 4 {
        return Err(format_err(crc_at + 4, format!("{} trailing bytes", bytes.len() - crc_at - 4)));
    }
    let voxels: Vec<T> = match dtype {
        DType::F32 => payload.chunks_exact(4).map(|b| T::from_f64c(f32::read_le(b) as f64)).collect(),
        DType::F64 => payload.chunks_exact(8).map(|b| T::from_f64c(f64::read_le(b))).collect(),
    };
    let mut v = Volume::new(channels, dims, voxels).map_err(|e| format_err(12, e.to_string()))?;
    v.spacing = spacing;
    v.id = meta.id;
    v.label = meta.label;
    v.provenance = meta.provenance;
    Ok(v)
}

pub fn write_volume<T: Real>(path: &Path, v: &Volume<T>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
    }
    fs::write(path, encode_volume(v)).map_err(|e| io_err(path, e))
}

pub fn read_volume<T: Real>(path: &Path) -> Result<Volume<T>> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode_volume(&bytes)
}

/// One line of a dataset manifest. Paths are relative to the manifest's
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub label: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_manifest(path: &Path) -> Result<(Vec<ManifestEntry>, u32)> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut entries = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let e: ManifestEntry = serde_json::from_str(trimmed).map_err(|err| format_err(offset, format!("manifest line: {err}")))?;
            entries.push(e);
        }
        offset += line.len();
    }
    Ok((entries, crc32fast::hash(text.as_bytes())))
}

/// An on-disk collection of volumes listed by `manifest.jsonl`.
#[derive(Clone, Debug)]
pub struct VolumeDataset {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    /// CRC-32 of the manifest bytes.
    pub checksum: u32,
}

impl VolumeDataset {
    pub const MANIFEST: &'static str = "manifest.jsonl";

    /// Opens `root/manifest.jsonl` (or a manifest file path directly) and
    /// checks that every entry resolves and that labels are all-or-none.
    pub fn open(path: &Path) -> Result<Self> {
        let (root, manifest) = if path.is_dir() {
            (path.to_path_buf(), path.join(Self::MANIFEST))
        } else {
            (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
        };
        let (entries, checksum) = read_manifest(&manifest)?;
        for e in &entries {
            for p in std::iter::once(&e.path).chain(e.mask.as_ref()) {
                let full = root.join(p);
                if !full.is_file() {
                    return Err(io_err(&full, std::io::Error::new(std::io::ErrorKind::NotFound, "manifest entry not found")));
                }
            }
        }
        let labeled = entries.iter().filter(|e| e.label.is_some()).count();
        if labeled != 0 && labeled != entries.len() {
            return Err(VolumeError::Domain(format!(
                "{labeled} of {} records are labeled; labels must be present for all or none",
                entries.len()
            )));
        }
        Ok(Self { root, entries, checksum })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load<T: Real>(&self, i: usize) -> Result<Volume<T>> {
        let e = &self.entries[i];
        let mut v: Volume<T> = read_volume(&self.root.join(&e.path))?;
        v.id = e.id.clone();
        v.label = e.label;
        Ok(v)
    }

    pub fn load_all<T: Real>(&self) -> Result<Vec<Volume<T>>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }

    pub fn load_mask(&self, i: usize) -> Result<Option<super::SegmentationMask>> {
        match &self.entries[i].mask {
            None => Ok(None),
            Some(p) => {
                let v: Volume<f64> = read_volume(&self.root.join(p))?;
                super::SegmentationMask::from_volume(&v).map(Some)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample<T: Real>(channels: usize, dims: [usize; 3]) -> Volume<T> {
        let n = channels * dims.iter().product::<usize>();
        let mut v = Volume::new(channels, dims, (0..n).map(|i| T::from_f64c((i as f64 * 0.37).sin() * 100.0)).collect()).unwrap();
        v.id = "case-007".into();
        v.label = Some(1);
        v.spacing = [1.0, 0.5, 2.0];
        v.provenance = "unit test".into();
        v
    }

    #[test]
    fn file_size_follows_layout() {
        let v = sample::<f32>(4, [96, 96, 96]);
        let bytes = encode_volume(&v);
        let meta_len = u32::from_le_bytes(bytes[60..64].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 64 + meta_len + 4 * 96 * 96 * 96 * 4 + 4);
        assert_eq!(decode_volume::<f32>(&bytes).unwrap(), v);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = encode_volume(&sample::<f64>(1, [2, 3, 4]));
        bytes[3] ^= 0xff;
        match decode_volume::<f64>(&bytes) {
            Err(VolumeError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_and_checksum_are_detected() {
        let bytes = encode_volume(&sample::<f64>(1, [2, 3, 4]));
        let cut = &bytes[..bytes.len() - 10];
        assert!(matches!(decode_volume::<f64>(cut), Err(VolumeError::Format { .. })));
        let mut flipped = bytes.clone();
        let at = bytes.len() - 12;
        flipped[at] ^= 1;
        match decode_volume::<f64>(&flipped) {
            Err(VolumeError::Format { offset, msg }) => {
                assert_eq!(offset as usize, bytes.len() - 4);
                assert!(msg.contains("checksum"));
            }
            other => panic!("expected checksum error, got {other:?}"),
        }
        let mut bad_dtype = bytes;
        bad_dtype[40] = 9;
        assert!(matches!(decode_volume::<f64>(&bad_dtype), Err(VolumeError::Format { offset: 40, .. })));
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/v.vvol");
        let v = sample::<f64>(2, [3, 4, 5]);
        write_volume(&p, &v).unwrap();
        assert_eq!(read_volume::<f64>(&p).unwrap(), v);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(vals in proptest::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 1..64), label in proptest::option::of(0u32..5)) {
            let n = vals.len();
            let mut v = Volume::<f64>::new(1, [1, 1, n], vals).unwrap();
            v.label = label;
            v.id = format!("p{n}");
            let back = decode_volume::<f64>(&encode_volume(&v)).unwrap();
            prop_assert_eq!(back.voxels.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), v.voxels.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back, v);
        }
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample::<f32>(1, [2, 2, 2]);
        write_volume(&dir.path().join("a.vvol"), &v).unwrap();
        write_volume(&dir.path().join("b.vvol"), &v).unwrap();
        let entries = vec![
            ManifestEntry { id: "a".into(), path: "a.vvol".into(), label: Some(0), mask: None },
            ManifestEntry { id: "b".into(), path: "b.vvol".into(), label: Some(1), mask: None },
        ];
        write_manifest(&dir.path().join(VolumeDataset::MANIFEST), &entries).unwrap();
        let ds = VolumeDataset::open(dir.path()).unwrap();
        assert_eq!(ds.entries, entries);
        assert_eq!(ds.load::<f32>(1).unwrap().id, "b");

        let partial = vec![entries[0].clone(), ManifestEntry { label: None, ..entries[1].clone() }];
        write_manifest(&dir.path().join(VolumeDataset::MANIFEST), &partial).unwrap();
        assert!(matches!(VolumeDataset::open(dir.path()), Err(VolumeError::Domain(_))));

        let missing = vec![ManifestEntry { path: "nope.vvol".into(), ..entries[0].clone() }];
        write_manifest(&dir.path().join(VolumeDataset::MANIFEST), &missing).unwrap();
        assert!(matches!(VolumeDataset::open(dir.path()), Err(VolumeError::Io { .. })));
    }
}
