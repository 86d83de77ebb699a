//! Binary model checkpoints.
//!
//! Layout, all integers little-endian `u64`:
//!
//! ```text
//! "BIACL1"                                   6 magic bytes
//! vocab_size d_model layers heads ff_dim max_len
//! n_tags  tag₀ … tagₖ
//! n_tensors
//! for each tensor: rank dim₀ … dimᵣ
//! every tensor's values as little-endian f64, in registration order
//! ```
//!
//! Registration order is: embedding table; per encoder layer norm1, attention
//! (q, k, v, o as weight then bias), norm2, feed-forward (up, down); the
//! encoder's final norm; per decoder layer norm1, self attention, norm2, cross
//! attention, norm3, feed-forward; the decoder's final norm. Norms store gain
//! then bias.

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::model::{ModelConfig, ModelError, Seq2Seq};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"BIACL1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn put(w: &mut impl Write, v: usize) -> io::Result<()> {
    w.write_all(&(v as u64).to_le_bytes())
}

fn get(r: &mut impl Read) -> Result<usize, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    usize::try_from(u64::from_le_bytes(b)).map_err(|_| CheckpointError::Corrupt("integer overflow".into()))
}

pub fn write_model<T: Scalar>(w: &mut impl Write, model: &Seq2Seq<T>) -> io::Result<()> {
    let c = model.config();
    w.write_all(MAGIC)?;
    for v in [c.vocab_size, c.d_model, c.layers, c.heads, c.ff_dim, c.max_len] {
        put(w, v)?;
    }
    put(w, c.language_tags.len())?;
    for &t in &c.language_tags {
        put(w, t)?;
    }
    let tensors = model.params().tensors();
    put(w, tensors.len())?;
    for t in tensors {
        put(w, t.rank())?;
        for &d in t.shape() {
            put(w, d)?;
        }
    }
    for t in tensors {
        for x in t.data() {
            w.write_all(&x.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_model<T: Scalar>(r: &mut impl Read) -> Result<Seq2Seq<T>, CheckpointError> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = get(r)?;
    }
    let n_tags = get(r)?;
    if n_tags > 1 << 20 {
        return Err(CheckpointError::Corrupt(format!("{n_tags} language tags")));
    }
    let tags = (0..n_tags).map(|_| get(r)).collect::<Result<Vec<_>, _>>()?;
    let config = ModelConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        layers: dims[2],
        heads: dims[3],
        ff_dim: dims[4],
        max_len: dims[5],
        language_tags: tags,
    };
    config.validate()?;
    let n = get(r)?;
    if n > 1 << 20 {
        return Err(CheckpointError::Corrupt(format!("{n} tensors")));
    }
    let mut shapes = Vec::with_capacity(n);
    for _ in 0..n {
        let rank = get(r)?;
        if rank > 8 {
            return Err(CheckpointError::Corrupt(format!("rank {rank}")));
        }
        shapes.push((0..rank).map(|_| get(r)).collect::<Result<Vec<_>, _>>()?);
    }
    let mut tensors = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for shape in shapes {
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            data.push(T::lit(f64::from_le_bytes(buf)));
        }
        tensors.push(Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?);
    }
    Ok(Seq2Seq::from_params(config, tensors)?)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, model: &Seq2Seq<T>) -> Result<(), CheckpointError> {
    let mut f = io::BufWriter::new(std::fs::File::create(path)?);
    write_model(&mut f, model)?;
    f.flush()?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Seq2Seq<T>, CheckpointError> {
    let mut f = io::BufReader::new(std::fs::File::open(path)?);
    read_model(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut cfg = ModelConfig::new(30, vec![3, 4]);
        cfg.d_model = 8;
        cfg.ff_dim = 16;
        let m = Seq2Seq::<f64>::new(cfg, 11).unwrap();
        let mut buf = Vec::new();
        write_model(&mut buf, &m).unwrap();
        assert_eq!(&buf[..6], MAGIC);
        assert_eq!(u64::from_le_bytes(buf[6..14].try_into().unwrap()), 30);
        let back: Seq2Seq<f64> = read_model(&mut buf.as_slice()).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.params(), m.params());
        let mut again = Vec::new();
        write_model(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(
            read_model::<f64>(&mut &b"NOTCKPT-------"[..]),
            Err(CheckpointError::BadMagic)
        ));
        assert!(matches!(read_model::<f64>(&mut &b"BIACL1\x01"[..]), Err(CheckpointError::Io(_))));
    }
}
