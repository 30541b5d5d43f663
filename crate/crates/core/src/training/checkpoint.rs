//! Versioned little-endian checkpoint container.
//!
//! Layout: magic `JGRP2O\0`, `u32` version, length-prefixed resolved config
//! (TOML), counters, parameter records (name, kind tag, four `u32` dims,
//! `f32` values), optimizer moment records, and a trailing FNV-1a checksum of
//! everything before it.

use std::fs;
use std::path::Path;

use super::adam::AdamState;
use super::fit::TrainState;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamKind, ParamStore, Tensor4};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"JGRP2O\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn tensor(&mut self, t: &Tensor4<f32>) {
        for d in t.dims() {
            self.u32(d as u32);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("unexpected end of file reading {n} bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format {
            offset: at as u64,
            message: "string is not UTF-8".into(),
        })
    }

    fn tensor(&mut self) -> Result<Tensor4<f32>> {
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = self.u32()? as usize;
        }
        let len = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&l| l <= (self.buf.len() - self.pos) / 4)
            .ok_or_else(|| self.err(format!("tensor of shape {dims:?} exceeds the file")))?;
        let raw = self.take(len * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor4::from_vec(dims, data).map_err(|e| self.err(e.to_string()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.bytes(self.config.to_toml().as_bytes());
        let s = &self.state;
        w.u64(s.epoch as u64);
        w.u64(s.epoch_step as u64);
        w.u64(s.step);
        w.u64(s.adam.t);
        w.u32(s.params.len() as u32);
        for (name, p) in s.params.iter() {
            w.bytes(name.as_bytes());
            w.u8(p.kind.tag());
            w.tensor(&p.value);
        }
        w.u32(s.adam.moments.len() as u32);
        for (name, (m, v)) in &s.adam.moments {
            w.bytes(name.as_bytes());
            w.tensor(m);
            w.tensor(v);
        }
        let sum = fnv1a(&w.0);
        w.u64(sum);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "missing JGRP2O magic".into(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if buf.len() < r.pos + 8 {
            return Err(r.err("unexpected end of file before checksum"));
        }
        let body_end = buf.len() - 8;
        let stored = u64::from_le_bytes(buf[body_end..].try_into().expect("8 bytes"));
        if fnv1a(&buf[..body_end]) != stored {
            return Err(Error::Format {
                offset: body_end as u64,
                message: "checksum mismatch (file is truncated or corrupt)".into(),
            });
        }
        let mut r = Reader {
            buf: &buf[..body_end],
            pos: r.pos,
        };
        let config_at = r.pos;
        let text = r.string()?;
        let config = RunConfig::resolve(Some(&text), &[]).map_err(|e| Error::Format {
            offset: config_at as u64,
            message: format!("embedded config: {e}"),
        })?;
        let epoch = r.u64()? as usize;
        let epoch_step = r.u64()? as usize;
        let step = r.u64()?;
        let t = r.u64()?;
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let tag = r.u8()?;
            let kind = ParamKind::from_tag(tag).ok_or_else(|| r.err(format!("unknown entry kind {tag}")))?;
            let value = r.tensor()?;
            params
                .insert(name, kind, value)
                .map_err(|e| r.err(e.to_string()))?;
        }
        let mut adam = AdamState { t, ..Default::default() };
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let m = r.tensor()?;
            let v = r.tensor()?;
            adam.moments.insert(name, (m, v));
        }
        if r.pos != r.buf.len() {
            return Err(r.err("trailing bytes after optimizer state"));
        }
        Ok(Self {
            config,
            state: TrainState {
                params,
                adam,
                epoch,
                epoch_step,
                step,
            },
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Rejects use with data annotated for a different joint count.
    pub fn check_joints(&self, joints: usize) -> Result<()> {
        let own = self.config.jgr.joints;
        if own != joints {
            return Err(Error::Validation(format!(
                "checkpoint was trained for {own} joints but the data has {joints}"
            )));
        }
        Ok(())
    }
}
