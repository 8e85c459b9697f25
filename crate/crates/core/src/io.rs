//! On-disk formats.
//!
//! * Tensors (`.sunt`): `SUNT`, u32 rank (= 4), four u32 extents, then the
//!   payload as f32, all little-endian.
//! * Panoptic maps (`.pano`): `PANO`, u32 height, u32 width, then one packed
//!   u32 label per pixel, little-endian; the category table lives in a JSON
//!   sidecar next to it (`<file>.json`).
//! * Instance lists, pyramid manifests and reports are JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::convectional::FeaturePyramid;
use crate::error::{Error, Result};
use crate::heads::InstancePrediction;
use crate::panoptic::{CategoryTable, PanopticMap};
use crate::scalar::Scalar;
use crate::tensor::{checked_volume, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"SUNT";
pub const MAP_MAGIC: &[u8; 4] = b"PANO";

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Little-endian reader that reports the byte offset of any failure.
struct Reader<'a> {
    format: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(format: &'static str, bytes: &'a [u8]) -> Self {
        Reader { format, bytes, pos: 0 }
    }

    fn fail(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Format {
            format: self.format,
            offset,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(
                self.bytes.len(),
                format!("truncated while reading {what} ({n} bytes needed)"),
            )),
        }
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(self.fail(
                0,
                format!(
                    "expected magic \"{}\", found {:?}",
                    String::from_utf8_lossy(expected),
                    String::from_utf8_lossy(got)
                ),
            ));
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail(
                self.pos,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

/// Serialises a tensor; values are stored as f32.
pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(24 + 4 * t.data().len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&4u32.to_le_bytes());
    for d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::invalid(format!("extent {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader::new("SUNT", bytes);
    r.magic(TENSOR_MAGIC)?;
    let rank_at = r.pos;
    let rank = r.u32("rank")?;
    if rank != 4 {
        return Err(r.fail(rank_at, format!("rank {rank}, expected 4")));
    }
    let mut shape = [0usize; 4];
    for (i, s) in shape.iter_mut().enumerate() {
        *s = r.u32(&format!("extent {i}"))? as usize;
    }
    let volume = checked_volume(shape)
        .filter(|v| v.checked_mul(4).is_some())
        .ok_or_else(|| r.fail(8, format!("extents {shape:?} overflow")))?;
    let payload = r.take(volume * 4, "payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    r.finish()?;
    Tensor::from_vec(shape, data)
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write_file(path, &encode_tensor(t)?)
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    decode_tensor(&read_file(path)?)
}

pub fn encode_map(map: &PanopticMap) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + 4 * map.len());
    out.extend_from_slice(MAP_MAGIC);
    for d in [map.height(), map.width()] {
        let d = u32::try_from(d).map_err(|_| Error::invalid(format!("extent {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for id in map.ids() {
        out.extend_from_slice(&id.to_le_bytes());
    }
    Ok(out)
}

/// Decodes label data against a category table and validates every label.
pub fn decode_map(bytes: &[u8], categories: CategoryTable) -> Result<PanopticMap> {
    let mut r = Reader::new("PANO", bytes);
    r.magic(MAP_MAGIC)?;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let n = h
        .checked_mul(w)
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| r.fail(4, format!("extents {h}x{w} overflow")))?;
    let ids = r
        .take(n * 4, "labels")?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    r.finish()?;
    let map = PanopticMap::from_ids(h, w, ids, categories)?;
    map.validate()?;
    Ok(map)
}

/// `gt.pano` → `gt.pano.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_map(path: &Path, map: &PanopticMap) -> Result<()> {
    write_file(path, &encode_map(map)?)?;
    write_json(&sidecar_path(path), map.categories())
}

pub fn read_map(path: &Path) -> Result<PanopticMap> {
    let categories: CategoryTable = read_json(&sidecar_path(path))?;
    categories.validate()?;
    decode_map(&read_file(path)?, categories)
}

pub fn write_json<S: Serialize + ?Sized>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    #[serde(rename = "box")]
    pub bbox: [usize; 4],
    pub class_id: u32,
    pub score: f64,
    /// Path of the mask-logit tensor, relative to the JSON file.
    pub mask_file: String,
}

/// Writes `<stem>.json` plus one `<stem>_mask<i>.sunt` per instance into `dir`.
pub fn write_instances<T: Scalar>(dir: &Path, stem: &str, instances: &[InstancePrediction<T>]) -> Result<PathBuf> {
    let mut records = Vec::with_capacity(instances.len());
    for (i, inst) in instances.iter().enumerate() {
        let mask_file = format!("{stem}_mask{i}.sunt");
        write_tensor(&dir.join(&mask_file), &inst.mask_logits)?;
        records.push(InstanceRecord {
            bbox: inst.bbox,
            class_id: inst.class_id,
            score: inst.score,
            mask_file,
        });
    }
    let path = dir.join(format!("{stem}.json"));
    write_json(&path, &records)?;
    Ok(path)
}

pub fn read_instances<T: Scalar>(path: &Path) -> Result<Vec<InstancePrediction<T>>> {
    let records: Vec<InstanceRecord> = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    records
        .into_iter()
        .map(|r| {
            Ok(InstancePrediction {
                mask_logits: read_tensor(&base.join(&r.mask_file))?.cast(),
                bbox: r.bbox,
                class_id: r.class_id,
                score: r.score,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidEntry {
    pub level: String,
    pub stride: usize,
    pub file: String,
}

/// One tensor file per level plus `pyramid.json` listing them.
pub fn write_pyramid<T: Scalar>(dir: &Path, pyramid: &FeaturePyramid<T>) -> Result<Vec<PyramidEntry>> {
    let mut manifest = Vec::with_capacity(pyramid.len());
    for level in pyramid.levels() {
        let name = level.name();
        let file = format!("{name}.sunt");
        write_tensor(&dir.join(&file), &level.features)?;
        manifest.push(PyramidEntry {
            level: name,
            stride: level.stride,
            file,
        });
    }
    write_json(&dir.join("pyramid.json"), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::ParamRng;

    #[test]
    fn tensor_round_trip_is_bit_exact() {
        let mut t: Tensor<f32> = ParamRng::new(1).tensor([2, 3, 4, 5], -1e6, 1e6);
        t.data_mut()[0] = f32::MIN_POSITIVE / 2.0;
        t.data_mut()[1] = -0.0;
        let back = decode_tensor(&encode_tensor(&t).unwrap()).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn tensor_errors_carry_position() {
        let t = Tensor::<f32>::zeros([1, 1, 2, 2]);
        let bytes = encode_tensor(&t).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        let e = decode_tensor(&bad).unwrap_err().to_string();
        assert!(e.contains("\"SUNT\""), "{e}");

        let e = decode_tensor(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(e, Error::Format { offset, .. } if offset == bytes.len() - 3));

        let mut rank = bytes.clone();
        rank[4] = 3;
        assert!(matches!(decode_tensor(&rank), Err(Error::Format { offset: 4, .. })));

        let mut huge = bytes.clone();
        for b in &mut huge[8..24] {
            *b = 0xFF;
        }
        assert!(decode_tensor(&huge).unwrap_err().to_string().contains("overflow"));

        let mut long = bytes;
        long.push(0);
        assert!(decode_tensor(&long).unwrap_err().to_string().contains("trailing"));
    }

    #[test]
    fn map_round_trip_with_extreme_ids() {
        let cats = CategoryTable::new(
            vec![crate::panoptic::Category {
                id: 65535,
                name: "edge".into(),
                isthing: true,
            }],
            0,
        )
        .unwrap();
        let mut m = PanopticMap::new(2, 3, cats.clone());
        m.set(1, 2, 65535, 65535);
        let bytes = encode_map(&m).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &u32::MAX.to_le_bytes());
        let back = decode_map(&bytes, cats.clone()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.label(1, 2), (65535, 65535));

        let mut bad = bytes;
        bad[3] = b'X';
        assert!(decode_map(&bad, cats).unwrap_err().to_string().contains("\"PANO\""));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = PanopticMap::new(4, 4, CategoryTable::cityscapes());
        m.set(0, 0, 13, 1);
        let p = dir.path().join("sub/gt.pano");
        write_map(&p, &m).unwrap();
        assert_eq!(read_map(&p).unwrap(), m);

        let inst = InstancePrediction::<f32> {
            mask_logits: Tensor::full([1, 1, 2, 2], 3.5),
            bbox: [0, 0, 2, 2],
            class_id: 13,
            score: 0.5,
        };
        let j = write_instances(dir.path(), "inst", std::slice::from_ref(&inst)).unwrap();
        let back: Vec<InstancePrediction<f32>> = read_instances(&j).unwrap();
        assert_eq!(back, vec![inst]);

        let missing = read_tensor(&dir.path().join("nope.sunt")).unwrap_err();
        assert!(missing.is_io());
    }
}
