//! Versioned binary checkpoints: model config, every parameter, batch-norm
//! running statistics, Adam moments, epoch counter and RNG state. Tensor
//! data is stored as raw little-endian bits, so a save/load round trip
//! reproduces eval-mode predictions exactly.
//!
//! Layout (all integers little-endian):
//! ```text
//! "MPVCKPT" | u32 version | u8 dtype | u64 epoch | u64 adam_step
//! f64 lr | f64 beta1 | f64 beta2 | f64 eps
//! [u8;32] rng seed | u128 rng word position
//! u32 config_len | config (key=value utf-8)
//! u32 n_records | records: u32 name_len, name, u32 rank, u64 dims.., data
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Adam, Mpvcnn, MpvcnnConfig};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: [u8; 7] = *b"MPVCKPT";
pub const FORMAT_VERSION: u32 = 1;

pub struct LoadedCheckpoint<T> {
    pub model: Mpvcnn<T>,
    pub adam: Adam<T>,
    pub epoch: u64,
    pub rng: ChaCha8Rng,
}

fn dtype_tag(dtype: DType) -> u8 {
    match dtype {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

fn push_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, tensor: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &dim in tensor.shape() {
        out.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(out);
    }
}

pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    model: &mut Mpvcnn<T>,
    adam: &Adam<T>,
    epoch: u64,
    rng: &ChaCha8Rng,
) -> Result<()> {
    let path = path.as_ref();
    let mut records: Vec<(String, Tensor<T>)> = Vec::new();
    let mut param_names: Vec<String> = Vec::new();
    model.visit_params(&mut |p| {
        param_names.push(p.name.clone());
        records.push((format!("p.{}", p.name), p.value.clone()));
    });
    model.visit_buffers(&mut |name, tensor| {
        records.push((format!("b.{name}"), tensor.clone()));
    });
    for (name, (m, v)) in param_names.iter().zip(adam.moments()) {
        records.push((format!("am.{name}"), m.clone()));
        records.push((format!("av.{name}"), v.clone()));
    }

    let config = model.config().to_kv();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(dtype_tag(T::DTYPE));
    out.extend_from_slice(&epoch.to_le_bytes());
    out.extend_from_slice(&adam.step_count.to_le_bytes());
    out.extend_from_slice(&adam.learning_rate.to_le_bytes());
    out.extend_from_slice(&adam.beta1.to_le_bytes());
    out.extend_from_slice(&adam.beta2.to_le_bytes());
    out.extend_from_slice(&adam.eps.to_le_bytes());
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, tensor) in &records {
        push_tensor(&mut out, name, tensor);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<LoadedCheckpoint<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };

    if cur.take(7)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let dtype = cur.u8()?;
    if dtype != dtype_tag(T::DTYPE) {
        return Err(Error::Checkpoint(format!(
            "checkpoint dtype tag {dtype} does not match requested {}",
            T::DTYPE.name()
        )));
    }
    let epoch = cur.u64()?;
    let adam_step = cur.u64()?;
    let lr = cur.f64()?;
    let beta1 = cur.f64()?;
    let beta2 = cur.f64()?;
    let eps = cur.f64()?;
    let seed: [u8; 32] = cur.take(32)?.try_into().unwrap();
    let word_pos = cur.u128()?;
    let config_len = cur.u32()? as usize;
    let config_text = cur.string(config_len)?;
    let config = MpvcnnConfig::from_kv(&config_text)?;

    let n_records = cur.u32()? as usize;
    let mut records: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for _ in 0..n_records {
        let name_len = cur.u32()? as usize;
        let name = cur.string(name_len)?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * T::BYTES)?;
        let data = raw.chunks(T::BYTES).map(T::read_le).collect();
        records.insert(name, Tensor::new(&shape, data)?);
    }

    // Rebuild the model and fill it from the records.
    let mut model = Mpvcnn::<T>::build_unchecked(config, 0)?;
    let mut missing: Vec<String> = Vec::new();
    let mut param_names = Vec::new();
    model.visit_params(&mut |p| {
        param_names.push(p.name.clone());
        match records.remove(&format!("p.{}", p.name)) {
            Some(tensor) if tensor.shape() == p.value.shape() => p.value = tensor,
            Some(tensor) => missing.push(format!(
                "shape mismatch for {}: {:?} vs {:?}",
                p.name,
                tensor.shape(),
                p.value.shape()
            )),
            None => missing.push(format!("missing parameter {}", p.name)),
        }
    });
    model.visit_buffers(&mut |name, tensor| {
        match records.remove(&format!("b.{name}")) {
            Some(stored) if stored.shape() == tensor.shape() => *tensor = stored,
            Some(_) => missing.push(format!("shape mismatch for buffer {name}")),
            None => missing.push(format!("missing buffer {name}")),
        }
    });

    let mut adam = Adam::<T>::new(lr);
    adam.beta1 = beta1;
    adam.beta2 = beta2;
    adam.eps = eps;
    adam.step_count = adam_step;
    if adam_step > 0 {
        let mut moments = Vec::with_capacity(param_names.len());
        for name in &param_names {
            let m = records.remove(&format!("am.{name}"));
            let v = records.remove(&format!("av.{name}"));
            match (m, v) {
                (Some(m), Some(v)) => moments.push((m, v)),
                _ => missing.push(format!("missing optimizer moments for {name}")),
            }
        }
        adam.set_moments(moments);
    }

    if let Some(msg) = missing.first() {
        return Err(Error::Checkpoint(msg.clone()));
    }
    if let Some(extra) = records.keys().next() {
        return Err(Error::Checkpoint(format!(
            "checkpoint contains unknown tensor `{extra}`"
        )));
    }

    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(word_pos);
    Ok(LoadedCheckpoint {
        model,
        adam,
        epoch,
        rng,
    })
}
