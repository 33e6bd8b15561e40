//! Binary containers for weights and embedding corpora.
//!
//! Checkpoint layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "HAMCKPT\0"
//! version    u32      1
//! meta_len   u32
//! meta       meta_len bytes of UTF-8 (JSON; may be empty)
//! count      u32
//! count × {
//!     name_len u32, name (UTF-8)
//!     ndim     u32, dims u64 × ndim
//!     data     f64 × prod(dims), row-major
//! }
//! ```
//!
//! Corpus layout:
//!
//! ```text
//! magic      8 bytes  "HAMCORP\0"
//! version    u32      1
//! d          u64      embedding width
//! n_seq      u64
//! n_seq × {
//!     len      u64
//!     doc_ids  i64 × len
//!     padding  u8 × len   (0 or 1)
//!     x        f64 × len·d, row-major
//! }
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{HamError, Result};
use crate::layer::{init_weights, Block, FfnWeights, LayerConfig, LayerWeights, SequenceInput};
use crate::math::Matrix;
use crate::router::RouterWeights;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HAMCKPT\0";
pub const CORPUS_MAGIC: &[u8; 8] = b"HAMCORP\0";
pub const FORMAT_VERSION: u32 = 1;

/// Refuse absurd headers before allocating.
const MAX_ELEMENTS: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(HamError::Format(format!("tensor {name}: shape {shape:?} holds {n} values, got {}", data.len())));
        }
        Ok(Self { name, shape, data })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: String,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LE>(FORMAT_VERSION)?;
        write_str(w, &self.meta)?;
        w.write_u32::<LE>(u32::try_from(self.tensors.len()).map_err(|_| HamError::Format("too many tensors".into()))?)?;
        for t in &self.tensors {
            write_str(w, &t.name)?;
            w.write_u32::<LE>(t.shape.len() as u32)?;
            for &s in &t.shape {
                w.write_u64::<LE>(s as u64)?;
            }
            for &x in &t.data {
                w.write_f64::<LE>(x)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        check_magic(r, CHECKPOINT_MAGIC, "checkpoint")?;
        let meta = read_str(r)?;
        let count = r.read_u32::<LE>()?;
        let mut tensors = Vec::with_capacity(count.min(1024) as usize);
        for _ in 0..count {
            let name = read_str(r)?;
            let ndim = r.read_u32::<LE>()?;
            if ndim > 8 {
                return Err(HamError::Format(format!("tensor {name}: {ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim as usize);
            let mut n: u64 = 1;
            for _ in 0..ndim {
                let s = r.read_u64::<LE>()?;
                n = n.saturating_mul(s);
                shape.push(s as usize);
            }
            if n > MAX_ELEMENTS {
                return Err(HamError::Format(format!("tensor {name}: {n} elements")));
            }
            let mut data = vec![0.0; n as usize];
            r.read_f64_into::<LE>(&mut data)?;
            tensors.push(Tensor { name, shape, data });
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LE>(u32::try_from(s.len()).map_err(|_| HamError::Format("string too long".into()))?)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = r.read_u32::<LE>()? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| HamError::Format("invalid UTF-8".into()))
}

fn check_magic<R: Read>(r: &mut R, magic: &[u8; 8], what: &str) -> Result<()> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(HamError::Format(format!("not a {what} file")));
    }
    let v = r.read_u32::<LE>()?;
    if v != FORMAT_VERSION {
        return Err(HamError::Format(format!("{what} version {v} unsupported")));
    }
    Ok(())
}

type Visitor<'a> = dyn FnMut(&str, Vec<usize>, &mut [f64]) -> Result<()> + 'a;

fn visit_mat(prefix: &str, name: &str, m: &mut Matrix, f: &mut Visitor<'_>) -> Result<()> {
    let shape = vec![m.rows(), m.cols()];
    f(&format!("{prefix}{name}"), shape, m.as_mut_slice())
}

fn visit_vec(prefix: &str, name: &str, v: &mut [f64], f: &mut Visitor<'_>) -> Result<()> {
    f(&format!("{prefix}{name}"), vec![v.len()], v)
}

/// Every tensor of a layer in a fixed order.
fn visit_layer(prefix: &str, w: &mut LayerWeights, f: &mut Visitor<'_>) -> Result<()> {
    visit_vec(prefix, "pre_norm", &mut w.pre_norm, f)?;
    visit_mat(prefix, "w_q", &mut w.w_q, f)?;
    visit_mat(prefix, "w_k", &mut w.w_k, f)?;
    visit_mat(prefix, "w_v", &mut w.w_v, f)?;
    for (path, conv, norm) in [("rnn", &mut w.conv_rnn, &mut w.norm_rnn), ("kv", &mut w.conv_kv, &mut w.norm_kv)] {
        visit_mat(prefix, &format!("conv_{path}.q"), &mut conv.q, f)?;
        visit_mat(prefix, &format!("conv_{path}.k"), &mut conv.k, f)?;
        visit_mat(prefix, &format!("conv_{path}.v"), &mut conv.v, f)?;
        visit_vec(prefix, &format!("norm_{path}.q"), &mut norm.q, f)?;
        visit_vec(prefix, &format!("norm_{path}.k"), &mut norm.k, f)?;
        visit_vec(prefix, &format!("norm_{path}.v"), &mut norm.v, f)?;
    }
    visit_mat(prefix, "scalars.a_proj", &mut w.scalars.a_proj, f)?;
    visit_mat(prefix, "scalars.b_proj", &mut w.scalars.b_proj, f)?;
    visit_vec(prefix, "scalars.a_log", &mut w.scalars.a_log, f)?;
    visit_vec(prefix, "scalars.dt_bias", &mut w.scalars.dt_bias, f)?;
    visit_mat(prefix, "w_norm_gate", &mut w.w_norm_gate, f)?;
    visit_vec(prefix, "rnn_out_norm", &mut w.rnn_out_norm, f)?;
    visit_vec(prefix, "kv_out_norm", &mut w.kv_out_norm, f)?;
    visit_mat(prefix, "w_gate_rnn", &mut w.w_gate_rnn, f)?;
    visit_mat(prefix, "w_gate_kv", &mut w.w_gate_kv, f)?;
    visit_mat(prefix, "w_o", &mut w.w_o, f)?;
    match &mut w.router {
        RouterWeights::None => {}
        RouterWeights::Linear(v) => visit_vec(prefix, "router.w", v, f)?,
        RouterWeights::Mlp(m) => {
            visit_mat(prefix, "router.w1", &mut m.w1, f)?;
            visit_vec(prefix, "router.b1", &mut m.b1, f)?;
            visit_mat(prefix, "router.w2", &mut m.w2, f)?;
            visit_vec(prefix, "router.b2", &mut m.b2, f)?;
            visit_mat(prefix, "router.w3", &mut m.w3, f)?;
            visit_vec(prefix, "router.b3", &mut m.b3, f)?;
        }
    }
    f(&format!("{prefix}eda_gamma"), vec![], std::slice::from_mut(&mut w.eda_gamma))
}

fn visit_ffn(prefix: &str, w: &mut FfnWeights, f: &mut Visitor<'_>) -> Result<()> {
    visit_vec(prefix, "pre_norm", &mut w.pre_norm, f)?;
    visit_mat(prefix, "w_gate", &mut w.w_gate, f)?;
    visit_mat(prefix, "w_up", &mut w.w_up, f)?;
    visit_mat(prefix, "w_down", &mut w.w_down, f)
}

fn visit_block(i: usize, b: &mut Block, f: &mut Visitor<'_>) -> Result<()> {
    visit_layer(&format!("layers.{i}.ham."), &mut b.ham, f)?;
    visit_ffn(&format!("layers.{i}.ffn."), &mut b.ffn, f)
}

/// Tensor names and shapes of one layer, in storage order.
pub fn layer_tensors(prefix: &str, w: &LayerWeights) -> Vec<Tensor> {
    let mut w = w.clone();
    let mut out = Vec::new();
    visit_layer(prefix, &mut w, &mut |name, shape, data| {
        out.push(Tensor {
            name: name.to_string(),
            shape,
            data: data.to_vec(),
        });
        Ok(())
    })
    .expect("collecting tensors cannot fail");
    out
}

/// Stores block configurations as JSON metadata and all weights as tensors.
pub fn stack_to_checkpoint(blocks: &[Block]) -> Result<Checkpoint> {
    let cfgs: Vec<&LayerConfig> = blocks.iter().map(|b| &b.cfg).collect();
    let meta = serde_json::to_string(&cfgs)?;
    let mut tensors = Vec::new();
    for (i, b) in blocks.iter().enumerate() {
        let mut b = b.clone();
        visit_block(i, &mut b, &mut |name, shape, data| {
            tensors.push(Tensor {
                name: name.to_string(),
                shape,
                data: data.to_vec(),
            });
            Ok(())
        })?;
    }
    Ok(Checkpoint { meta, tensors })
}

/// Inverse of [`stack_to_checkpoint`]; every expected tensor must be present
/// with its exact shape.
pub fn stack_from_checkpoint(ck: &Checkpoint) -> Result<Vec<Block>> {
    let cfgs: Vec<LayerConfig> = serde_json::from_str(&ck.meta)?;
    let by_name: BTreeMap<&str, &Tensor> = ck.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut used = 0usize;
    let mut blocks = Vec::with_capacity(cfgs.len());
    for (i, cfg) in cfgs.into_iter().enumerate() {
        cfg.validate()?;
        let mut b = Block {
            ham: init_weights(&cfg, 0)?,
            ffn: FfnWeights::init(cfg.d_hidden, cfg.ffn_int, 0),
            cfg,
        };
        visit_block(i, &mut b, &mut |name, shape, data| {
            let t = by_name
                .get(name)
                .ok_or_else(|| HamError::Format(format!("missing tensor {name}")))?;
            if t.shape != shape {
                return Err(HamError::Format(format!("tensor {name}: expected shape {shape:?}, got {:?}", t.shape)));
            }
            data.copy_from_slice(&t.data);
            used += 1;
            Ok(())
        })?;
        blocks.push(b);
    }
    if used != ck.tensors.len() {
        return Err(HamError::Format(format!("{} unrecognised tensors", ck.tensors.len() - used)));
    }
    Ok(blocks)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub d: usize,
    pub sequences: Vec<SequenceInput>,
}

impl Corpus {
    pub fn new(d: usize, sequences: Vec<SequenceInput>) -> Result<Self> {
        for s in &sequences {
            s.validate(d)?;
        }
        Ok(Self { d, sequences })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CORPUS_MAGIC)?;
        w.write_u32::<LE>(FORMAT_VERSION)?;
        w.write_u64::<LE>(self.d as u64)?;
        w.write_u64::<LE>(self.sequences.len() as u64)?;
        for s in &self.sequences {
            w.write_u64::<LE>(s.len() as u64)?;
            for &id in &s.doc_ids {
                w.write_i64::<LE>(id)?;
            }
            for &p in &s.padding {
                w.write_u8(u8::from(p))?;
            }
            for row in &s.x {
                for &v in row {
                    w.write_f64::<LE>(v)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        check_magic(r, CORPUS_MAGIC, "corpus")?;
        let d = r.read_u64::<LE>()?;
        let n = r.read_u64::<LE>()?;
        if d > MAX_ELEMENTS || n > MAX_ELEMENTS {
            return Err(HamError::Format("corpus header out of range".into()));
        }
        let d = d as usize;
        let mut sequences = Vec::with_capacity((n as usize).min(1024));
        for _ in 0..n {
            let len = r.read_u64::<LE>()?;
            if len.saturating_mul(d as u64) > MAX_ELEMENTS {
                return Err(HamError::Format(format!("sequence of length {len} too large")));
            }
            let len = len as usize;
            let mut doc_ids = vec![0i64; len];
            r.read_i64_into::<LE>(&mut doc_ids)?;
            let mut pad = vec![0u8; len];
            r.read_exact(&mut pad)?;
            let padding = pad
                .into_iter()
                .map(|b| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    b => Err(HamError::Format(format!("padding flag {b}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            let mut flat = vec![0.0; len * d];
            r.read_f64_into::<LE>(&mut flat)?;
            let x = if d == 0 {
                vec![Vec::new(); len]
            } else {
                flat.chunks(d).map(<[f64]>::to_vec).collect()
            };
            sequences.push(SequenceInput { x, doc_ids, padding });
        }
        Self::new(d, sequences)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::RouterKind;

    fn blocks() -> Vec<Block> {
        let mut mlp = LayerConfig::small(16);
        mlp.router.kind = RouterKind::InputMlp;
        vec![Block::init(LayerConfig::small(16), 1).unwrap(), Block::init(mlp, 2).unwrap()]
    }

    #[test]
    fn checkpoint_round_trip() {
        let b = blocks();
        let ck = stack_to_checkpoint(&b).unwrap();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(stack_from_checkpoint(&back).unwrap(), b);
    }

    #[test]
    fn tensor_scalars_match_param_count() {
        let b = blocks();
        let n: usize = layer_tensors("", &b[0].ham).iter().map(|t| t.data.len()).sum();
        // eda_gamma is stored even when EDA is off
        let stored_extra = usize::from(!b[0].cfg.router.eda_enabled);
        assert_eq!(n, b[0].ham.param_count(&b[0].cfg) + stored_extra);
    }

    #[test]
    fn rejects_bad_magic_and_shapes() {
        let mut buf = b"NOTACKPT".to_vec();
        buf.extend_from_slice(&[1, 0, 0, 0]);
        assert!(matches!(Checkpoint::read_from(&mut buf.as_slice()), Err(HamError::Format(_))));
        let mut ck = stack_to_checkpoint(&blocks()).unwrap();
        ck.tensors[1].shape.reverse();
        assert!(stack_from_checkpoint(&ck).is_err());
        let mut ck = stack_to_checkpoint(&blocks()).unwrap();
        ck.tensors.pop();
        assert!(stack_from_checkpoint(&ck).is_err());
        assert!(Tensor::new("x", vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn truncated_checkpoint_is_io_error() {
        let ck = stack_to_checkpoint(&blocks()).unwrap();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(Checkpoint::read_from(&mut buf.as_slice()), Err(HamError::Io(_))));
    }

    #[test]
    fn corpus_round_trip() {
        let s1 = SequenceInput {
            x: vec![vec![1.0, 2.0], vec![3.0, -4.5], vec![0.0, 1e-300]],
            doc_ids: vec![7, 7, 9],
            padding: vec![false, false, true],
        };
        let s2 = SequenceInput::single(vec![vec![f64::MIN_POSITIVE, 0.5]]);
        let c = Corpus::new(2, vec![s1, s2]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        c.save(&p).unwrap();
        assert_eq!(Corpus::load(&p).unwrap(), c);
    }

    #[test]
    fn corpus_rejects_ragged_rows() {
        let s = SequenceInput::single(vec![vec![1.0, 2.0], vec![3.0]]);
        assert!(Corpus::new(2, vec![s]).is_err());
    }
}
