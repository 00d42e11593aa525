//! Byte-level codecs for the two on-disk formats.
//!
//! Checkpoints ("ILCK1"): magic, u32 version, config block, stage
//! provenance, the parameter list, then an optional EWC block (reference
//! parameters and the Fisher diagonal) behind a presence flag.
//!
//! Datasets ("ILAD1"): magic, u32 version, header (F, M, N), then per
//! sample: S and U as u32, `S*F` feature values, U label ids.
//!
//! Everything is little-endian; f64 values are raw IEEE-754 bits. Decode
//! errors carry the byte offset where parsing stopped. Parameter lists
//! are written in name order, so encoding is deterministic.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::model::{Checkpoint, ConvSpec, EwcState, ModelConfig, ParamData, ParamMap, StageMeta};
use crate::synth::{Dataset, Sample};

const CHECKPOINT_MAGIC: &[u8; 5] = b"ILCK1";
const DATASET_MAGIC: &[u8; 5] = b"ILAD1";
const FORMAT_VERSION: u32 = 1;

// Sanity bounds; anything beyond these is a corrupt or hostile file.
const MAX_DIM: u64 = 1 << 24;
const MAX_COUNT: u64 = 1 << 26;
const MAX_ELEMENTS: u64 = 1 << 28;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CodecError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: Vec<u8> },
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("unexpected end of file at offset {offset}: needed {needed} more bytes")]
    UnexpectedEof { offset: usize, needed: usize },
    #[error("dimension overflow at offset {offset}: {field} = {value} exceeds {max}")]
    DimensionOverflow {
        offset: usize,
        field: &'static str,
        value: u64,
        max: u64,
    },
    #[error("invalid value at offset {offset}: {what}")]
    Invalid { offset: usize, what: String },
    #[error("trailing garbage: {extra} unread bytes at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, offset: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.offset + n > self.bytes.len() {
            return Err(CodecError::UnexpectedEof {
                offset: self.offset,
                needed: self.offset + n - self.bytes.len(),
            });
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_bits(self.u64()?))
    }

    /// u32 with an upper bound, for counts and dimensions.
    fn bounded(&mut self, field: &'static str, max: u64) -> Result<usize, CodecError> {
        let at = self.offset;
        let v = self.u32()? as u64;
        if v > max {
            return Err(CodecError::DimensionOverflow {
                offset: at,
                field,
                value: v,
                max,
            });
        }
        Ok(v as usize)
    }

    fn string(&mut self) -> Result<String, CodecError> {
        let len = self.bounded("string length", 4096)?;
        let at = self.offset;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| CodecError::Invalid {
            offset: at,
            what: "string is not valid UTF-8".into(),
        })
    }

    fn magic(&mut self, expected: &[u8; 5]) -> Result<(), CodecError> {
        let found = self.take(5)?;
        if found != expected {
            return Err(CodecError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: found.to_vec(),
            });
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(CodecError::BadVersion(version));
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), CodecError> {
        if self.offset != self.bytes.len() {
            return Err(CodecError::TrailingBytes {
                offset: self.offset,
                extra: self.bytes.len() - self.offset,
            });
        }
        Ok(())
    }
}

struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 5]) -> Self {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(magic);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        Writer { bytes }
    }

    fn u8(&mut self, v: u8) {
        self.bytes.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.bytes.extend_from_slice(&v.to_bits().to_le_bytes());
    }

    fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes.extend_from_slice(s.as_bytes());
    }
}

fn write_param_list(w: &mut Writer, params: &ParamMap) {
    w.u32(params.len() as u32);
    for (name, p) in params {
        w.string(name);
        w.u32(p.shape.len() as u32);
        for &d in &p.shape {
            w.u32(d as u32);
        }
        for &v in &p.data {
            w.f64(v);
        }
    }
}

fn read_param_list(r: &mut Reader) -> Result<ParamMap, CodecError> {
    let count = r.bounded("parameter count", MAX_COUNT)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.bounded("parameter rank", 8)?;
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        let at = r.offset;
        for _ in 0..rank {
            let d = r.bounded("parameter dim", MAX_DIM)? as u64;
            numel = numel.saturating_mul(d);
            shape.push(d as usize);
        }
        if numel > MAX_ELEMENTS {
            return Err(CodecError::DimensionOverflow {
                offset: at,
                field: "parameter elements",
                value: numel,
                max: MAX_ELEMENTS,
            });
        }
        let mut data = Vec::with_capacity(numel as usize);
        for _ in 0..numel {
            data.push(r.f64()?);
        }
        out.insert(name, ParamData { shape, data });
    }
    Ok(out)
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::new(CHECKPOINT_MAGIC);
    let cfg = &ckpt.config;
    w.u32(cfg.input_dim as u32);
    w.u32(cfg.conv_layers.len() as u32);
    for c in &cfg.conv_layers {
        w.u32(c.channels as u32);
        w.u32(c.kernel as u32);
        w.u32(c.stride as u32);
    }
    w.u32(cfg.num_sabs as u32);
    w.u32(cfg.d_h as u32);
    w.u32(cfg.num_heads as u32);
    w.u32(cfg.fc_dims.len() as u32);
    for &d in &cfg.fc_dims {
        w.u32(d as u32);
    }
    w.u32(ckpt.meta.stage);
    w.string(&ckpt.meta.method);
    write_param_list(&mut w, &ckpt.params);
    match &ckpt.ewc {
        None => w.u8(0),
        Some(state) => {
            w.u8(1);
            write_param_list(&mut w, &state.reference);
            write_param_list(&mut w, &state.fisher);
        }
    }
    w.bytes
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CodecError> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let input_dim = r.bounded("input_dim", MAX_DIM)?;
    let n_conv = r.bounded("conv layer count", 64)?;
    let mut conv_layers = Vec::with_capacity(n_conv);
    for _ in 0..n_conv {
        conv_layers.push(ConvSpec {
            channels: r.bounded("conv channels", MAX_DIM)?,
            kernel: r.bounded("conv kernel", MAX_DIM)?,
            stride: r.bounded("conv stride", MAX_DIM)?,
        });
    }
    let num_sabs = r.bounded("num_sabs", 1024)?;
    let d_h = r.bounded("d_h", MAX_DIM)?;
    let num_heads = r.bounded("num_heads", MAX_DIM)?;
    let n_fc = r.bounded("fc count", 64)?;
    let mut fc_dims = Vec::with_capacity(n_fc);
    for _ in 0..n_fc {
        fc_dims.push(r.bounded("fc dim", MAX_DIM)?);
    }
    let stage = r.u32()?;
    let method = r.string()?;
    let params = read_param_list(&mut r)?;
    let flag_at = r.offset;
    let ewc = match r.u8()? {
        0 => None,
        1 => Some(EwcState {
            reference: read_param_list(&mut r)?,
            fisher: read_param_list(&mut r)?,
        }),
        other => {
            return Err(CodecError::Invalid {
                offset: flag_at,
                what: alloc::format!("EWC presence flag must be 0 or 1, got {other}"),
            })
        }
    };
    r.finish()?;
    Ok(Checkpoint {
        config: ModelConfig {
            input_dim,
            conv_layers,
            num_sabs,
            d_h,
            num_heads,
            fc_dims,
        },
        params,
        meta: StageMeta { stage, method },
        ewc,
    })
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut w = Writer::new(DATASET_MAGIC);
    w.u32(ds.input_dim as u32);
    w.u32(ds.alphabet_size as u32);
    w.u32(ds.samples.len() as u32);
    for s in &ds.samples {
        w.u32(s.frames as u32);
        w.u32(s.labels.len() as u32);
        for &v in &s.features {
            w.f64(v);
        }
        for &l in &s.labels {
            w.u32(l as u32);
        }
    }
    w.bytes
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, CodecError> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let input_dim = r.bounded("input_dim F", MAX_DIM)?;
    let alphabet_size = r.bounded("alphabet M", MAX_DIM)?;
    let n = r.bounded("sample count N", MAX_COUNT)?;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.offset;
        let frames = r.bounded("frames S", MAX_DIM)?;
        let labels_len = r.bounded("labels U", MAX_DIM)?;
        let elements = (frames as u64) * (input_dim as u64);
        if elements > MAX_ELEMENTS {
            return Err(CodecError::DimensionOverflow {
                offset: at,
                field: "sample elements S*F",
                value: elements,
                max: MAX_ELEMENTS,
            });
        }
        let mut features = Vec::with_capacity(elements as usize);
        for _ in 0..elements {
            features.push(r.f64()?);
        }
        let mut labels = Vec::with_capacity(labels_len);
        for _ in 0..labels_len {
            labels.push(r.u32()? as usize);
        }
        samples.push(Sample {
            features,
            frames,
            labels,
            provenance: None,
        });
    }
    r.finish()?;
    Ok(Dataset {
        input_dim,
        alphabet_size,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::synth::{generate_task, TaskSpec};

    #[test]
    fn checkpoint_roundtrip_with_and_without_ewc() {
        let cfg = ModelConfig::tiny(4);
        let mut ckpt = init_model(&cfg, 9).unwrap();
        ckpt.meta = StageMeta { stage: 2, method: "rbkd".into() };
        let bytes = encode_checkpoint(&ckpt);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ckpt, back);
        assert_eq!(bytes, encode_checkpoint(&back)); // byte-stable

        ckpt.ewc = Some(EwcState {
            reference: ckpt.params.clone(),
            fisher: ckpt.params.clone(),
        });
        let bytes = encode_checkpoint(&ckpt);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), ckpt);
    }

    #[test]
    fn dataset_roundtrip_is_bit_exact() {
        let spec = TaskSpec::seeded_base(1, 3, 4, 6, alloc::vec![1, 2], 0.2, (1, 3), 5, 11).unwrap();
        let ds = generate_task(&spec).unwrap();
        let bytes = encode_dataset(&ds);
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(ds, back);
        assert_eq!(bytes, encode_dataset(&back));
    }

    #[test]
    fn bad_magic_is_reported() {
        let spec = TaskSpec::seeded_base(1, 3, 4, 6, alloc::vec![1], 0.0, (1, 1), 1, 1).unwrap();
        let mut bytes = encode_dataset(&generate_task(&spec).unwrap());
        bytes[0] = b'X';
        assert!(matches!(decode_dataset(&bytes), Err(CodecError::BadMagic { .. })));
        // a checkpoint is not a dataset
        let ckpt = init_model(&ModelConfig::tiny(4), 1).unwrap();
        let cbytes = encode_checkpoint(&ckpt);
        assert!(matches!(decode_dataset(&cbytes), Err(CodecError::BadMagic { .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let spec = TaskSpec::seeded_base(1, 3, 4, 6, alloc::vec![1, 2], 0.1, (2, 2), 3, 7).unwrap();
        let bytes = encode_dataset(&generate_task(&spec).unwrap());
        let cut = &bytes[..bytes.len() - 5];
        match decode_dataset(cut) {
            Err(CodecError::UnexpectedEof { offset, .. }) => assert!(offset <= cut.len()),
            other => panic!("expected UnexpectedEof, got {other:?}"),
        }
    }

    #[test]
    fn dimension_overflow_is_rejected() {
        // header claiming a gigantic S*F
        let mut w = Writer::new(DATASET_MAGIC);
        w.u32(1 << 20); // F
        w.u32(4);
        w.u32(1);
        w.u32(1 << 20); // S
        w.u32(1);
        match decode_dataset(&w.bytes) {
            Err(CodecError::DimensionOverflow { field, .. }) => {
                assert_eq!(field, "sample elements S*F");
            }
            other => panic!("expected DimensionOverflow, got {other:?}"),
        }
    }
}
