//! Versioned binary checkpoint container.
//!
//! Stores named f64 parameter blocks with shapes, optimizer moments, a
//! stage tag, the step count, and a config snapshot. Values round-trip
//! bit-exactly (little-endian IEEE-754 bits), so a reloaded model
//! reproduces forward outputs exactly.

use super::{Adam, Param};
use crate::error::{Error, Result};
use ndarray::ArrayD;
use std::path::Path;

const MAGIC: &[u8; 8] = b"VTONCKP\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Block {
    pub name: String,
    pub trainable: bool,
    pub value: ArrayD<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub stage: String,
    pub step: u64,
    pub config_text: String,
    pub blocks: Vec<Block>,
    pub optimizers: Vec<(String, Adam)>,
}

/// Snapshot every parameter reachable from `visit` into named blocks.
pub fn collect_blocks(mut visit: impl FnMut(&mut dyn FnMut(&mut Param))) -> Vec<Block> {
    let mut out = Vec::new();
    visit(&mut |p: &mut Param| {
        out.push(Block {
            name: p.name.clone(),
            trainable: p.trainable,
            value: p.value.clone(),
        })
    });
    out
}

/// Write blocks back into parameters, matching by name and shape. Every
/// visited parameter must be present and every block must be consumed.
pub fn apply_blocks(
    blocks: &[Block],
    mut visit: impl FnMut(&mut dyn FnMut(&mut Param)),
) -> Result<()> {
    use std::collections::HashMap;
    let index: HashMap<&str, &Block> = blocks.iter().map(|b| (b.name.as_str(), b)).collect();
    let mut used = 0usize;
    let mut missing = Vec::new();
    let mut bad_shape = Vec::new();
    visit(&mut |p: &mut Param| match index.get(p.name.as_str()) {
        Some(b) if b.value.shape() == p.value.shape() => {
            p.value.assign(&b.value);
            used += 1;
        }
        Some(_) => bad_shape.push(p.name.clone()),
        None => missing.push(p.name.clone()),
    });
    if !missing.is_empty() || !bad_shape.is_empty() {
        return Err(Error::invalid(format!(
            "checkpoint does not match model: missing blocks {missing:?}, shape mismatches {bad_shape:?}"
        )));
    }
    if used != blocks.len() {
        return Err(Error::invalid(format!(
            "checkpoint holds {} blocks but the model consumed {used}",
            blocks.len()
        )));
    }
    Ok(())
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn array(&mut self, a: &ArrayD<f64>) {
        self.u32(a.ndim() as u32);
        for d in a.shape() {
            self.u64(*d as u64);
        }
        for v in a.iter() {
            self.f64(*v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::CorruptCheckpoint {
            path: self.path.clone(),
            reason: reason.into(),
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.corrupt("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        if n > 1 << 20 {
            return Err(self.corrupt("implausible string length"));
        }
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.corrupt("non-utf8 string"))
    }
    fn array(&mut self) -> Result<ArrayD<f64>> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(self.corrupt("implausible array rank"));
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut len = 1usize;
        for _ in 0..ndim {
            let d = self.u64()? as usize;
            len = len
                .checked_mul(d)
                .ok_or_else(|| self.corrupt("array size overflow"))?;
            dims.push(d);
        }
        if len > (1 << 28) {
            return Err(self.corrupt("implausible array size"));
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(self.f64()?);
        }
        ArrayD::from_shape_vec(ndarray::IxDyn(&dims), data)
            .map_err(|_| self.corrupt("array shape/data mismatch"))
    }
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = Writer::new();
        w.buf.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.string(&self.stage);
        w.u64(self.step);
        w.string(&self.config_text);
        w.u32(self.blocks.len() as u32);
        for b in &self.blocks {
            w.string(&b.name);
            w.buf.push(b.trainable as u8);
            w.array(&b.value);
        }
        w.u32(self.optimizers.len() as u32);
        for (name, opt) in &self.optimizers {
            w.string(name);
            w.f64(opt.lr);
            w.f64(opt.beta1);
            w.f64(opt.beta2);
            w.u64(opt.t);
            w.u32(opt.m.len() as u32);
            for (pname, m) in &opt.m {
                let v = opt
                    .v
                    .get(pname)
                    .expect("optimizer moment maps out of sync");
                w.string(pname);
                w.array(m);
                w.array(v);
            }
        }
        std::fs::write(path, w.buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let buf = std::fs::read(path.as_ref())?;
        let mut r = Reader {
            buf: &buf,
            pos: 0,
            path: path.as_ref().display().to_string(),
        };
        if r.take(8)? != MAGIC {
            return Err(r.corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.corrupt(format!("unsupported version {version}")));
        }
        let stage = r.string()?;
        let step = r.u64()?;
        let config_text = r.string()?;
        let n_blocks = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            let name = r.string()?;
            let trainable = r.take(1)?[0] != 0;
            let value = r.array()?;
            blocks.push(Block {
                name,
                trainable,
                value,
            });
        }
        let n_opt = r.u32()? as usize;
        let mut optimizers = Vec::with_capacity(n_opt);
        for _ in 0..n_opt {
            let name = r.string()?;
            let lr = r.f64()?;
            let beta1 = r.f64()?;
            let beta2 = r.f64()?;
            let t = r.u64()?;
            let mut opt = Adam::new(lr, beta1, beta2);
            opt.t = t;
            let n_entries = r.u32()? as usize;
            for _ in 0..n_entries {
                let pname = r.string()?;
                let m = r.array()?;
                let v = r.array()?;
                opt.m.insert(pname.clone(), m);
                opt.v.insert(pname, v);
            }
            optimizers.push((name, opt));
        }
        if r.pos != r.buf.len() {
            return Err(r.corrupt("trailing bytes after container"));
        }
        Ok(Self {
            stage,
            step,
            config_text,
            blocks,
            optimizers,
        })
    }

    pub fn optimizer(&self, name: &str) -> Option<&Adam> {
        self.optimizers
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, o)| o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn container_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        let mut opt = Adam::new(2e-4, 0.5, 0.999);
        opt.t = 7;
        opt.m.insert(
            "a.w".into(),
            ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![0.1, -0.2, 0.3, 1e-300]).unwrap(),
        );
        opt.v.insert(
            "a.w".into(),
            ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![0.5, 0.6, 0.7, f64::MIN_POSITIVE]).unwrap(),
        );
        let ckpt = Checkpoint {
            stage: "parsing".into(),
            step: 42,
            config_text: "lr=0.0002\nseed=7\n".into(),
            blocks: vec![
                Block {
                    name: "a.w".into(),
                    trainable: true,
                    value: ArrayD::from_shape_vec(
                        IxDyn(&[2, 2]),
                        vec![1.0, 2.5, -3.25, 0.1 + 0.2],
                    )
                    .unwrap(),
                },
                Block {
                    name: "bn.running_mean".into(),
                    trainable: false,
                    value: ArrayD::from_elem(IxDyn(&[3]), 0.125),
                },
            ],
            optimizers: vec![("gen".into(), opt)],
        };
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.stage, "parsing");
        assert_eq!(back.step, 42);
        assert_eq!(back.config_text, ckpt.config_text);
        assert_eq!(back.blocks.len(), 2);
        for (a, b) in back.blocks.iter().zip(ckpt.blocks.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            for (x, y) in a.value.iter().zip(b.value.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let opt = back.optimizer("gen").unwrap();
        assert_eq!(opt.t, 7);
        assert_eq!(
            opt.m["a.w"][[1, 1]].to_bits(),
            1e-300f64.to_bits()
        );
    }

    #[test]
    fn apply_blocks_rejects_mismatch() {
        let blocks = vec![Block {
            name: "x".into(),
            trainable: true,
            value: ArrayD::zeros(IxDyn(&[2])),
        }];
        let mut p = Param::new("y", ArrayD::zeros(IxDyn(&[2])));
        assert!(apply_blocks(&blocks, |f| f(&mut p)).is_err());
        let mut p2 = Param::new("x", ArrayD::zeros(IxDyn(&[3])));
        assert!(apply_blocks(&blocks, |f| f(&mut p2)).is_err());
        let mut p3 = Param::new("x", ArrayD::zeros(IxDyn(&[2])));
        assert!(apply_blocks(&blocks, |f| f(&mut p3)).is_ok());
    }

    #[test]
    fn load_rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"garbage").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::CorruptCheckpoint { .. })
        ));
        let ckpt = Checkpoint {
            stage: "geo".into(),
            ..Default::default()
        };
        let good = dir.path().join("good.ckpt");
        ckpt.save(&good).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 2);
        std::fs::write(&good, bytes).unwrap();
        assert!(Checkpoint::load(&good).is_err());
    }
}
