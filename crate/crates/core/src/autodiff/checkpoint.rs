//! Binary parameter archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"DGRCKPT\0"
//! version u32
//! count   u32
//! count x { name_len u32, name utf-8, trainable u8, ndim u32, dims u64 x ndim, values f64 x prod(dims) }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::param::ParamStore;
use super::tensor::Tensor;
use crate::error::{DgrError, Result};

pub const MAGIC: &[u8; 8] = b"DGRCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

fn io_err(e: std::io::Error) -> DgrError {
    DgrError::Format(format!("checkpoint i/o: {e}"))
}

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(u8::from(p.trainable));
        buf.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(io_err)?;
    w.flush().map_err(io_err)
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r)?))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
    let magic: [u8; 8] = read_exact(&mut r)?;
    if &magic != MAGIC {
        return Err(DgrError::Format("not a parameter checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(DgrError::Format(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name).map_err(|_| DgrError::Format("parameter id is not utf-8".into()))?;
        let [trainable] = read_exact::<_, 1>(&mut r)?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(read_exact(&mut r)?) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_le_bytes(read_exact(&mut r)?));
        }
        store.add(name, Tensor::new(shape, data)?, trainable != 0)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(io_err)? != 0 {
        return Err(DgrError::Format("trailing bytes after checkpoint".into()));
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| DgrError::io(path, e))?;
    write_checkpoint(store, BufWriter::new(f))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let f = File::open(path).map_err(|e| DgrError::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}

/// Copies values from `loaded` into `target`, requiring identical ids and shapes.
pub fn restore_into(target: &mut ParamStore, loaded: &ParamStore) -> Result<()> {
    if target.len() != loaded.len() {
        return Err(DgrError::Format(format!(
            "checkpoint has {} parameters, model expects {}",
            loaded.len(),
            target.len()
        )));
    }
    for (id, p) in loaded.iter() {
        let t = target.get_mut(id);
        if t.name != p.name || t.tensor.shape() != p.tensor.shape() {
            return Err(DgrError::Format(format!(
                "checkpoint parameter `{}` {:?} does not match model parameter `{}` {:?}",
                p.name,
                p.tensor.shape(),
                t.name,
                t.tensor.shape()
            )));
        }
        t.tensor = p.tensor.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(vals in prop::collection::vec(any::<f64>(), 1..40), trainable: bool) {
            let mut store = ParamStore::new();
            let n = vals.len();
            store.add("a.w", Tensor::new(vec![n], vals.clone()).unwrap(), trainable).unwrap();
            store.add("b", Tensor::matrix(1, n, vals).unwrap(), !trainable).unwrap();
            let mut bytes = Vec::new();
            write_checkpoint(&store, &mut bytes).unwrap();
            let back = read_checkpoint(bytes.as_slice()).unwrap();
            let mut again = Vec::new();
            write_checkpoint(&back, &mut again).unwrap();
            prop_assert_eq!(bytes, again);
            for ((_, a), (_, b)) in store.iter().zip(back.iter()) {
                prop_assert_eq!(&a.name, &b.name);
                prop_assert_eq!(a.trainable, b.trainable);
                let bits_a: Vec<u64> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = b.tensor.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        assert!(read_checkpoint(&b"NOPE\0\0\0\0\x01\0\0\0\0\0\0\0"[..]).is_err());
        let mut bytes = Vec::new();
        write_checkpoint(&ParamStore::new(), &mut bytes).unwrap();
        bytes[8] = 9;
        assert!(matches!(read_checkpoint(bytes.as_slice()), Err(DgrError::Format(_))));
    }
}
