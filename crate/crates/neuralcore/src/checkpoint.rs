//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      b"NCKP"
//! version    u32 = 1
//! arch       u32 length + UTF-8 architecture descriptor
//! step       u64 optimizer step counter
//! count      u32 number of arrays
//! array*     u32 name length + UTF-8 name, u32 rank, u32 dims..., f32 values...
//! digest     32-byte SHA-256 of every preceding byte
//! ```
//!
//! Each parameter `p` is stored as `p`, followed by its Adam moments as
//! `adam.m/p` and `adam.v/p`.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::{Error, ParamSet, Result, Tensor};

const MAGIC: &[u8; 4] = b"NCKP";
const VERSION: u32 = 1;

/// A decoded checkpoint: architecture descriptor plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: String,
    pub params: ParamSet<f32>,
}

pub fn encode_checkpoint(arch: &str, params: &ParamSet<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, arch);
    out.extend_from_slice(&params.step().to_le_bytes());
    out.extend_from_slice(&((params.len() * 3) as u32).to_le_bytes());
    for idx in 0..params.len() {
        let name = params.name(idx);
        let (m, v) = params.moments(idx);
        put_array(&mut out, name, params.value(idx));
        put_array(&mut out, &format!("adam.m/{name}"), m);
        put_array(&mut out, &format!("adam.v/{name}"), v);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(Error::Integrity("checkpoint truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Integrity("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Integrity(format!("unsupported checkpoint version {version}")));
    }
    let arch = r.string()?;
    let step = r.u64()?;
    let count = r.u32()? as usize;
    if !count.is_multiple_of(3) {
        return Err(Error::Integrity("array count is not a multiple of three".into()));
    }
    let mut params = ParamSet::new();
    for _ in 0..count / 3 {
        let (name, value) = r.array()?;
        let (mname, m) = r.array()?;
        let (vname, v) = r.array()?;
        if mname != format!("adam.m/{name}") || vname != format!("adam.v/{name}") {
            return Err(Error::Integrity(format!("moment arrays out of order for {name}")));
        }
        let idx = params.insert(name, value);
        params.set_state(idx, m, v);
    }
    params.set_step(step);
    if r.pos != body.len() {
        return Err(Error::Integrity("trailing bytes after arrays".into()));
    }
    Ok(Checkpoint { arch, params })
}

pub fn save_checkpoint(path: &Path, arch: &str, params: &ParamSet<f32>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(arch, params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_array(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_str(out, name);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Integrity("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Integrity("name is not UTF-8".into()))
    }

    fn array(&mut self) -> Result<(String, Tensor<f32>)> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Integrity(e.to_string()))?;
        Ok((name, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{AdamConfig, Graph};

    fn trained_set() -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.25]));
        p.insert("b", Tensor::vector(vec![0.125]));
        let mut g = Graph::for_params(&p);
        let a = g.param(&p, "a").unwrap();
        let sq = g.square(a);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        p.adam_step(&grads, &AdamConfig::default()).unwrap();
        p
    }

    #[test]
    fn round_trip_preserves_values_moments_and_step() {
        let p = trained_set();
        let bytes = encode_checkpoint("toy", &p);
        let ck = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck.arch, "toy");
        assert_eq!(ck.params, p);
        assert_eq!(ck.params.step(), 1);
    }

    #[test]
    fn flipped_byte_is_detected() {
        let mut bytes = encode_checkpoint("toy", &trained_set());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Integrity(_))));
    }
}
