//! On-disk formats: segment containers, montage files, dataset directories,
//! checkpoints and loss traces.
//!
//! Everything binary is little-endian with fixed-width fields.
//!
//! Segment container: one header line
//! `LUNASEG version=1 channels=C samples=T rate=R montage=ID label=L preprocessed=B`
//! followed by exactly `C·T` 32-bit floats, channel-major. `label` is a
//! non-negative integer or `none`.
//!
//! Montage file:
//! ```text
//! LUNAMONTAGE version=1
//! id=standard_1020
//! kind=unipolar
//! label,x,y,z
//! Fp1,-0.30901699437494734,0.9510565162951536,0
//! ```
//!
//! Checkpoint: magic `LUNACKPT`, `u32` version, `u32` length and JSON
//! metadata (`config`, `n_classes`), `u32` parameter count, then per
//! parameter `u32` name length, UTF-8 name, `u32` depth, `u32` rank, one
//! `u64` per dimension and the values as 64-bit floats.

use crate::config::ModelConfig;
use crate::error::{LunaError, Result};
use crate::model::Luna;
use crate::params::ParamStore;
use crate::signal::{EegSegment, Electrode, MontageKind, MontageLayout};
use crate::synth::Dataset;
use crate::tensor::Tensor;
use crate::train::LossRecord;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use std::sync::Arc;

pub const SEGMENT_MAGIC: &str = "LUNASEG";
pub const SEGMENT_VERSION: u32 = 1;
pub const MONTAGE_MAGIC: &str = "LUNAMONTAGE";
pub const MONTAGE_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LUNACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
/// File name of the montage inside a dataset directory.
pub const DATASET_MONTAGE: &str = "montage.txt";
pub const SEGMENT_EXT: &str = "seg";

fn parse_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(LunaError::Parse {
        offset: offset as u64,
        message: message.into(),
    })
}

fn check_token(what: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace() || c == ',' || c == '=') {
        return Err(LunaError::Config(format!(
            "{what} '{s}' must be non-empty without whitespace, commas or '='"
        )));
    }
    Ok(())
}

/// Serialize a segment. Samples are stored as 32-bit floats, so values are
/// rounded to single precision.
pub fn segment_bytes(seg: &EegSegment) -> Result<Vec<u8>> {
    check_token("montage id", &seg.montage.id)?;
    let label = seg.label.map_or("none".to_string(), |l| l.to_string());
    let header = format!(
        "{SEGMENT_MAGIC} version={SEGMENT_VERSION} channels={} samples={} rate={} montage={} label={label} preprocessed={}\n",
        seg.channels(),
        seg.samples(),
        seg.rate,
        seg.montage.id,
        seg.preprocessed
    );
    let mut out = Vec::with_capacity(header.len() + seg.data().len() * 4);
    out.extend_from_slice(header.as_bytes());
    for &v in seg.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Header fields of a segment container.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentHeader {
    pub channels: usize,
    pub samples: usize,
    pub rate: f64,
    pub montage: String,
    pub label: Option<u32>,
    pub preprocessed: bool,
    /// Byte length of the header line including its newline.
    pub len: usize,
}

pub fn parse_segment_header(bytes: &[u8]) -> Result<SegmentHeader> {
    let Some(end) = bytes.iter().position(|&b| b == b'\n') else {
        return parse_err(bytes.len(), "segment header has no terminating newline");
    };
    let Ok(line) = std::str::from_utf8(&bytes[..end]) else {
        return parse_err(0, "segment header is not UTF-8");
    };
    let mut fields: Vec<(usize, &str)> = Vec::new();
    let mut pos = 0;
    for tok in line.split(' ') {
        fields.push((pos, tok));
        pos += tok.len() + 1;
    }
    if fields[0].1 != SEGMENT_MAGIC {
        return parse_err(0, format!("expected '{SEGMENT_MAGIC}'"));
    }
    let get = |key: &str| -> Result<(usize, &str)> {
        fields[1..]
            .iter()
            .find_map(|&(off, t)| {
                t.strip_prefix(key)
                    .and_then(|r| r.strip_prefix('='))
                    .map(|v| (off + key.len() + 1, v))
            })
            .ok_or_else(|| LunaError::Parse {
                offset: end as u64,
                message: format!("segment header lacks '{key}'"),
            })
    };
    let num = |key: &str| -> Result<usize> {
        let (off, v) = get(key)?;
        v.parse()
            .or_else(|_| parse_err(off, format!("'{key}' is not a count: '{v}'")))
    };
    let (voff, version) = get("version")?;
    if version != SEGMENT_VERSION.to_string() {
        return Err(LunaError::Version {
            offset: voff as u64,
            expected: SEGMENT_VERSION,
            found: version.to_string(),
        });
    }
    let (roff, rate) = get("rate")?;
    let rate: f64 = rate
        .parse()
        .ok()
        .filter(|r: &f64| r.is_finite() && *r > 0.0)
        .map_or_else(|| parse_err(roff, format!("invalid rate '{rate}'")), Ok)?;
    let (loff, label) = get("label")?;
    let label = match label {
        "none" => None,
        l => Some(l.parse().or_else(|_| parse_err(loff, format!("invalid label '{l}'")))?),
    };
    let (poff, pre) = get("preprocessed")?;
    let preprocessed = match pre {
        "true" => true,
        "false" => false,
        p => return parse_err(poff, format!("invalid preprocessed flag '{p}'")),
    };
    Ok(SegmentHeader {
        channels: num("channels")?,
        samples: num("samples")?,
        rate,
        montage: get("montage")?.1.to_string(),
        label,
        preprocessed,
        len: end + 1,
    })
}

/// Parse a segment container against its montage.
pub fn parse_segment(bytes: &[u8], montage: Arc<MontageLayout>) -> Result<EegSegment> {
    let h = parse_segment_header(bytes)?;
    let expected = (h.channels * h.samples * 4) as u64;
    let actual = (bytes.len() - h.len) as u64;
    if expected != actual {
        return Err(LunaError::Size {
            offset: h.len as u64,
            expected,
            actual,
        });
    }
    if h.montage != montage.id {
        return parse_err(
            0,
            format!("segment montage '{}' differs from '{}'", h.montage, montage.id),
        );
    }
    let mut data = Vec::with_capacity(h.channels * h.samples);
    for (i, chunk) in bytes[h.len..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        if !v.is_finite() {
            return Err(LunaError::NonFinite {
                offset: (h.len + 4 * i) as u64,
            });
        }
        data.push(v as f64);
    }
    let mut seg = EegSegment::new(data, h.channels, h.rate, montage)?.with_label(h.label);
    seg.preprocessed = h.preprocessed;
    Ok(seg)
}

pub fn write_segment(path: impl AsRef<Path>, seg: &EegSegment) -> Result<()> {
    fs::write(path, segment_bytes(seg)?)?;
    Ok(())
}

pub fn read_segment(path: impl AsRef<Path>, montage: Arc<MontageLayout>) -> Result<EegSegment> {
    parse_segment(&fs::read(path)?, montage)
}

/// Canonical text form of a montage.
pub fn montage_text(m: &MontageLayout) -> Result<String> {
    check_token("montage id", &m.id)?;
    let mut out = format!(
        "{MONTAGE_MAGIC} version={MONTAGE_VERSION}\nid={}\nkind={}\nlabel,x,y,z\n",
        m.id,
        m.kind.as_str()
    );
    for e in m.channels() {
        check_token("electrode label", &e.label)?;
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.label, e.position[0], e.position[1], e.position[2]
        ));
    }
    Ok(out)
}

pub fn parse_montage(text: &str) -> Result<MontageLayout> {
    let mut offset = 0;
    let mut lines = Vec::new();
    for line in text.split_inclusive('\n') {
        lines.push((offset, line.trim_end_matches('\n').trim_end_matches('\r')));
        offset += line.len();
    }
    let expect = |i: usize| -> Result<(usize, &str)> {
        lines.get(i).copied().ok_or_else(|| LunaError::Parse {
            offset: text.len() as u64,
            message: "montage file ends early".into(),
        })
    };
    let (_, head) = expect(0)?;
    let Some(version) = head
        .strip_prefix(MONTAGE_MAGIC)
        .and_then(|r| r.strip_prefix(" version="))
    else {
        return parse_err(0, format!("expected '{MONTAGE_MAGIC} version=N'"));
    };
    if version != MONTAGE_VERSION.to_string() {
        return Err(LunaError::Version {
            offset: (MONTAGE_MAGIC.len() + 9) as u64,
            expected: MONTAGE_VERSION,
            found: version.to_string(),
        });
    }
    let (ioff, id) = expect(1)?;
    let Some(id) = id.strip_prefix("id=") else {
        return parse_err(ioff, "expected 'id='");
    };
    let (koff, kind) = expect(2)?;
    let kind: MontageKind = match kind.strip_prefix("kind=") {
        Some(k) => k
            .parse()
            .or_else(|_| parse_err(koff + 5, format!("unknown montage kind '{k}'")))?,
        None => return parse_err(koff, "expected 'kind='"),
    };
    let (hoff, cols) = expect(3)?;
    if cols != "label,x,y,z" {
        return parse_err(hoff, "expected column header 'label,x,y,z'");
    }
    let mut channels = Vec::new();
    for &(off, line) in &lines[4..] {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return parse_err(off, format!("expected 4 fields, found {}", parts.len()));
        }
        let mut position = [0.0; 3];
        let mut col = off + parts[0].len() + 1;
        for (k, p) in parts[1..].iter().enumerate() {
            position[k] = p
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .map_or_else(|| parse_err(col, format!("invalid coordinate '{p}'")), Ok)?;
            col += p.len() + 1;
        }
        channels.push(Electrode {
            label: parts[0].to_string(),
            position,
        });
    }
    MontageLayout::new(id, kind, channels)
}

pub fn write_montage(path: impl AsRef<Path>, m: &MontageLayout) -> Result<()> {
    fs::write(path, montage_text(m)?)?;
    Ok(())
}

pub fn read_montage(path: impl AsRef<Path>) -> Result<MontageLayout> {
    let bytes = fs::read(path)?;
    let Ok(text) = String::from_utf8(bytes) else {
        return parse_err(0, "montage file is not UTF-8");
    };
    parse_montage(&text)
}

/// Write `montage.txt` and one numbered `.seg` file per segment.
pub fn write_dataset(dir: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_montage(dir.join(DATASET_MONTAGE), &data.montage)?;
    for (i, seg) in data.segments.iter().enumerate() {
        write_segment(dir.join(format!("{i:06}.{SEGMENT_EXT}")), seg)?;
    }
    Ok(())
}

/// Read a dataset directory; segments are taken in file-name order.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let montage = Arc::new(read_montage(dir.join(DATASET_MONTAGE))?);
    let mut files: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == SEGMENT_EXT))
        .collect();
    files.sort();
    let segments = files
        .iter()
        .map(|p| read_segment(p, montage.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { montage, segments })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub n_classes: Option<usize>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| LunaError::Contract(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn checkpoint_bytes(model: &Luna) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        config: model.config.clone(),
        n_classes: model.classifier.as_ref().map(|c| c.n_classes),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| LunaError::Contract(e.to_string()))?;
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    put_u32(&mut out, model.store.len())?;
    for (name, entry) in model.store.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, entry.depth)?;
        put_u32(&mut out, entry.tensor.rank())?;
        for &d in entry.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in entry.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Cursor over a byte buffer that reports absolute offsets.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(LunaError::Size {
                offset: self.pos as u64,
                expected: n as u64,
                actual: (self.bytes.len() - self.pos) as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Luna> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return parse_err(0, "missing LUNACKPT magic");
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(LunaError::Version {
            offset: 8,
            expected: CHECKPOINT_VERSION,
            found: version.to_string(),
        });
    }
    let len = r.u32()?;
    let at = r.pos;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(len)?).or_else(|e| parse_err(at, format!("checkpoint metadata: {e}")))?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = r.pos;
        let n = r.u32()?;
        let Ok(name) = std::str::from_utf8(r.take(n)?) else {
            return parse_err(at + 4, "parameter name is not UTF-8");
        };
        let depth = r.u32()?;
        let rank = r.u32()?;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let start = r.pos;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| LunaError::Parse {
            offset: start as u64,
            message: "parameter too large".into(),
        })?)?;
        let mut data = Vec::with_capacity(numel);
        for (i, c) in raw.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(c.try_into().expect("8 bytes"));
            if !v.is_finite() {
                return Err(LunaError::NonFinite {
                    offset: (start + 8 * i) as u64,
                });
            }
            data.push(v);
        }
        store
            .add(name, Tensor::new(shape, data)?, depth)
            .or_else(|e| parse_err(at, e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(LunaError::Size {
            offset: r.pos as u64,
            expected: r.pos as u64,
            actual: bytes.len() as u64,
        });
    }
    Luna::from_store(meta.config, meta.n_classes, store)
}

pub fn write_checkpoint(path: impl AsRef<Path>, model: &Luna) -> Result<()> {
    fs::write(path, checkpoint_bytes(model)?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Luna> {
    parse_checkpoint(&fs::read(path)?)
}

pub const LOSS_TRACE_HEADER: &str = "step,l_rec_masked,l_rec_visible,l_spec,lr";

/// Loss trace as CSV; values use the shortest exact decimal form.
pub fn loss_trace_csv(trace: &[LossRecord]) -> String {
    let mut out = format!("{LOSS_TRACE_HEADER}\n");
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.l_rec_masked, r.l_rec_visible, r.l_spec, r.lr
        ));
    }
    out
}

pub fn parse_loss_trace(text: &str) -> Result<Vec<LossRecord>> {
    let mut offset = 0;
    let mut out = Vec::new();
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let body = line.trim_end();
        if i == 0 {
            if body != LOSS_TRACE_HEADER {
                return parse_err(0, format!("expected header '{LOSS_TRACE_HEADER}'"));
            }
        } else if !body.is_empty() {
            let f: Vec<&str> = body.split(',').collect();
            let bad = || LunaError::Parse {
                offset: offset as u64,
                message: format!("malformed loss record '{body}'"),
            };
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            out.push(LossRecord {
                step: f[0].parse().map_err(|_| bad())?,
                l_rec_masked: num(f[1])?,
                l_rec_visible: num(f[2])?,
                l_spec: num(f[3])?,
                lr: num(f[4])?,
            });
        }
        offset += line.len();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_header_fields() {
        let m = Arc::new(MontageLayout::double_banana());
        let seg = EegSegment::new(vec![0.5; 40], 20, 256.0, m)
            .unwrap()
            .with_label(Some(2));
        let bytes = segment_bytes(&seg).unwrap();
        let h = parse_segment_header(&bytes).unwrap();
        assert_eq!((h.channels, h.samples, h.label), (20, 2, Some(2)));
        assert_eq!(bytes.len(), h.len + 160);
    }

    #[test]
    fn version_mismatch_names_offset() {
        let text = "LUNASEG version=9 channels=1 samples=1 rate=1 montage=a label=none preprocessed=false\n";
        match parse_segment_header(text.as_bytes()) {
            Err(LunaError::Version { offset, found, .. }) => {
                assert_eq!(offset, 16);
                assert_eq!(found, "9");
            }
            other => panic!("{other:?}"),
        }
    }
}
