//! Weights container: a named-tensor manifest over one contiguous f32 blob.
//!
//! On disk: magic `LSMW`, u32 version, u64 blob byte length, u64 FNV-1a
//! checksum of the blob, a length-prefixed UTF-8 JSON manifest, then the
//! blob as little-endian f32. Offsets are byte offsets into the blob,
//! ascending and non-overlapping.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::MatchConfig;
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"LSMW";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct WeightEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

impl WeightEntry {
    pub fn value_count(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    entries: Vec<WeightEntry>,
}

#[derive(Clone, Debug)]
pub struct WeightsContainer {
    entries: Vec<WeightEntry>,
    index: HashMap<String, usize>,
    blob: Vec<f32>,
}

impl WeightsContainer {
    pub fn from_parts(entries: Vec<WeightEntry>, blob: Vec<f32>) -> Result<Self> {
        let mut cursor = 0u64;
        for e in &entries {
            if e.offset % 4 != 0 {
                return Err(Error::Weights(format!(
                    "entry {} offset {} not 4-byte aligned",
                    e.name, e.offset
                )));
            }
            if e.offset < cursor {
                return Err(Error::Weights(format!(
                    "entry {} overlaps or is out of order (offset {}, expected >= {})",
                    e.name, e.offset, cursor
                )));
            }
            cursor = e.offset + 4 * e.value_count() as u64;
        }
        if cursor > 4 * blob.len() as u64 {
            return Err(Error::Weights(format!(
                "manifest wants {cursor} bytes, blob has {}",
                4 * blob.len()
            )));
        }
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
        Ok(WeightsContainer {
            entries,
            index,
            blob,
        })
    }

    pub fn entries(&self) -> &[WeightEntry] {
        &self.entries
    }

    pub fn blob(&self) -> &[f32] {
        &self.blob
    }

    fn entry(&self, name: &str) -> Result<&WeightEntry> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::Weights(format!("missing entry `{name}`")))
    }

    pub fn values(&self, name: &str) -> Result<&[f32]> {
        let e = self.entry(name)?;
        let start = (e.offset / 4) as usize;
        Ok(&self.blob[start..start + e.value_count()])
    }

    /// Entry as a tensor with its declared shape.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let e = self.entry(name)?;
        Tensor::new(&e.shape, self.values(name)?.to_vec())
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f32>> {
        Ok(self.values(name)?.to_vec())
    }

    pub fn shape_of(&self, name: &str) -> Result<&[usize]> {
        Ok(&self.entry(name)?.shape)
    }

    pub fn checksum(&self) -> u64 {
        fnv1a64(&blob_bytes(&self.blob))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let manifest = serde_json::to_vec(&Manifest {
            entries: self.entries.clone(),
        })
        .map_err(|e| Error::Weights(format!("manifest encode: {e}")))?;
        let blob = blob_bytes(&self.blob);

        let mut io = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        io(MAGIC)?;
        io(&VERSION.to_le_bytes())?;
        io(&(blob.len() as u64).to_le_bytes())?;
        io(&fnv1a64(&blob).to_le_bytes())?;
        io(&(manifest.len() as u64).to_le_bytes())?;
        io(&manifest)?;
        io(&blob)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, path, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Weights(format!(
                "{}: bad magic {magic:?}",
                path.display()
            )));
        }
        let version = read_u32(&mut r, path)?;
        if version != VERSION {
            return Err(Error::Weights(format!(
                "{}: unsupported version {version}",
                path.display()
            )));
        }
        let blob_len = read_u64(&mut r, path)? as usize;
        if blob_len % 4 != 0 {
            return Err(Error::Weights(format!(
                "{}: blob length {blob_len} not a multiple of 4",
                path.display()
            )));
        }
        let checksum = read_u64(&mut r, path)?;
        let manifest_len = read_u64(&mut r, path)? as usize;
        let mut manifest_bytes = vec![0u8; manifest_len];
        read_exact(&mut r, &mut manifest_bytes, path, "manifest")?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
            .map_err(|e| Error::Weights(format!("{}: manifest decode: {e}", path.display())))?;

        let mut blob_raw = vec![0u8; blob_len];
        read_exact(&mut r, &mut blob_raw, path, "blob (file truncated?)")?;
        if fnv1a64(&blob_raw) != checksum {
            return Err(Error::Weights(format!(
                "{}: blob checksum mismatch",
                path.display()
            )));
        }
        let blob = blob_raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        WeightsContainer::from_parts(manifest.entries, blob)
    }
}

fn blob_bytes(blob: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * blob.len());
    for v in blob {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Weights(format!("{}: reading {what}: {e}", path.display())))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path, "header")?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path, "header")?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// One tensor the model expects: its name, shape and (for weights that get
/// random init) the fan-in that scales the draw.
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: Option<usize>,
}

fn conv_specs(out: &mut Vec<ParamSpec>, name: &str, k: usize, c: usize, kh: usize, kw: usize) {
    out.push(ParamSpec {
        name: format!("{name}.weight"),
        shape: vec![k, c, kh, kw],
        fan_in: Some(c * kh * kw),
    });
    out.push(ParamSpec {
        name: format!("{name}.bias"),
        shape: vec![k],
        fan_in: None,
    });
}

fn aic_specs(out: &mut Vec<ParamSpec>, name: &str, c_in: usize, c_out: usize) {
    for (axis, horizontal) in [("width", true), ("height", false)] {
        let cin = if axis == "width" { c_in } else { c_out };
        for size in crate::aic::KERNEL_SIZES {
            let (kh, kw) = if horizontal { (1, size) } else { (size, 1) };
            out.push(ParamSpec {
                name: format!("{name}.{axis}.k{size}.weight"),
                shape: vec![c_out, cin, kh, kw],
                fan_in: Some(cin * kh * kw),
            });
        }
        out.push(ParamSpec {
            name: format!("{name}.{axis}.bias"),
            shape: vec![c_out],
            fan_in: None,
        });
        out.push(ParamSpec {
            name: format!("{name}.{axis}.select.weight"),
            shape: vec![3, cin, 1, 1],
            fan_in: Some(cin),
        });
        out.push(ParamSpec {
            name: format!("{name}.{axis}.select.bias"),
            shape: vec![3],
            fan_in: None,
        });
    }
}

/// Every tensor of the fixed architecture, in container order.
pub fn schema() -> Vec<ParamSpec> {
    let [c2, c4, c8] = crate::encoder::CHANNELS;
    let n = MatchConfig::default().n;
    let fuse_in = 4 * n + 1 + c8;
    let mut out = Vec::new();

    conv_specs(&mut out, "encoder.down2", c2, 3, 3, 3);
    conv_specs(&mut out, "encoder.down4", c4, c2, 3, 3);
    conv_specs(&mut out, "encoder.res4a", c4, c4, 3, 3);
    conv_specs(&mut out, "encoder.res4b", c4, c4, 3, 3);
    conv_specs(&mut out, "encoder.down8", c8, c4, 3, 3);
    conv_specs(&mut out, "encoder.res8a", c8, c8, 3, 3);
    conv_specs(&mut out, "encoder.res8b", c8, c8, 3, 3);

    aic_specs(&mut out, "branch.global", c8, c8);
    aic_specs(&mut out, "branch.local", c8, c8);

    conv_specs(&mut out, "decoder.fuse.proj", c8, fuse_in, 1, 1);
    aic_specs(&mut out, "decoder.fuse.aic", c8, c8);
    aic_specs(&mut out, "decoder.refine4.aic", c4, c4);
    conv_specs(&mut out, "decoder.refine4.proj", c4, c8, 1, 1);
    aic_specs(&mut out, "decoder.refine2.aic", c2, c2);
    conv_specs(&mut out, "decoder.refine2.proj", c2, c4, 1, 1);
    conv_specs(&mut out, "decoder.head", 1, c2, 3, 3);
    out
}

fn container_from_filler(mut fill: impl FnMut(&ParamSpec, &mut [f32])) -> Result<WeightsContainer> {
    let specs = schema();
    let total: usize = specs.iter().map(|s| s.shape.iter().product::<usize>()).sum();
    let mut blob = vec![0.0f32; total];
    let mut entries = Vec::with_capacity(specs.len());
    let mut cursor = 0usize;
    for spec in &specs {
        let count: usize = spec.shape.iter().product();
        fill(spec, &mut blob[cursor..cursor + count]);
        entries.push(WeightEntry {
            name: spec.name.clone(),
            shape: spec.shape.clone(),
            offset: 4 * cursor as u64,
        });
        cursor += count;
    }
    WeightsContainer::from_parts(entries, blob)
}

/// Deterministic pseudo-random weights: one ChaCha8 stream in schema order,
/// kernels drawn from N(0, 1/√fan_in), biases zero.
pub fn seeded_init(seed: u64) -> Result<WeightsContainer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    container_from_filler(|spec, slot| {
        if let Some(fan_in) = spec.fan_in {
            let std = 1.0 / (fan_in as f32).sqrt();
            let dist = Normal::new(0.0f32, std).expect("positive std");
            for v in slot.iter_mut() {
                *v = dist.sample(&mut rng);
            }
        }
    })
}

/// All-zero weights; handy for linearity tests.
pub fn zero_init() -> Result<WeightsContainer> {
    container_from_filler(|_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Seek;

    #[test]
    fn save_then_load_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.lsmw");
        let c = seeded_init(7).unwrap();
        c.save(&path).unwrap();
        let back = WeightsContainer::load(&path).unwrap();
        assert_eq!(c.entries(), back.entries());
        assert_eq!(c.blob(), back.blob());
        assert_eq!(c.checksum(), back.checksum());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.lsmw");
        seeded_init(7).unwrap().save(&path).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        let f = std::fs::OpenOptions::new()
            .write(true)
            .open(&path)
            .unwrap();
        f.set_len(len - 64).unwrap();
        drop(f);
        let err = WeightsContainer::load(&path).unwrap_err();
        assert!(matches!(err, Error::Weights(_)), "{err}");
    }

    #[test]
    fn corrupted_blob_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.lsmw");
        seeded_init(7).unwrap().save(&path).unwrap();
        let mut f = std::fs::OpenOptions::new()
            .read(true)
            .write(true)
            .open(&path)
            .unwrap();
        f.seek(std::io::SeekFrom::End(-4)).unwrap();
        f.write_all(&[0xde, 0xad, 0xbe, 0xef]).unwrap();
        drop(f);
        let err = WeightsContainer::load(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn lookup_returns_declared_shape() {
        let c = seeded_init(1).unwrap();
        assert_eq!(
            c.shape_of("encoder.down2.weight").unwrap(),
            &[32, 3, 3, 3]
        );
        let t = c.tensor("decoder.head.weight").unwrap();
        assert_eq!(t.shape(), &[1, 32, 3, 3]);
        assert!(c.tensor("no.such.entry").is_err());
    }

    #[test]
    fn seeded_init_is_deterministic_and_seed_sensitive() {
        let a = seeded_init(42).unwrap();
        let b = seeded_init(42).unwrap();
        let c = seeded_init(43).unwrap();
        assert_eq!(a.blob(), b.blob());
        assert_ne!(a.blob(), c.blob());
    }

    #[test]
    fn seeded_init_scales_by_fan_in() {
        let c = seeded_init(11).unwrap();
        for spec in schema() {
            let Some(fan_in) = spec.fan_in else { continue };
            let values = c.values(&spec.name).unwrap();
            if values.len() < 512 {
                continue;
            }
            assert!(values.iter().all(|v| v.is_finite()));
            let mean: f64 = values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64;
            let var: f64 = values
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / values.len() as f64;
            let std = var.sqrt();
            let want = 1.0 / (fan_in as f64).sqrt();
            assert!(
                (std - want).abs() / want < 0.2,
                "{}: std {std} vs 1/sqrt(fan_in) {want}",
                spec.name
            );
        }
    }

    #[test]
    fn rejects_overlapping_entries() {
        let entries = vec![
            WeightEntry {
                name: "a".into(),
                shape: vec![4],
                offset: 0,
            },
            WeightEntry {
                name: "b".into(),
                shape: vec![4],
                offset: 8, // overlaps a's 16 bytes
            },
        ];
        assert!(WeightsContainer::from_parts(entries, vec![0.0; 8]).is_err());
    }
}
