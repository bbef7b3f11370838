//! Named-array checkpoint files.
//!
//! A checkpoint is a flat map from names to dense f64 arrays, stored as
//! the entries concatenated in ascending name order with no file header:
//!
//! ```text
//! entry := name_len: u32 LE
//!          name:     name_len bytes of UTF-8
//!          rank:     u8
//!          dims:     rank x u64 LE
//!          data:     prod(dims) x f64 LE
//! ```
//!
//! Rank 0 is a scalar (one payload value). The sorted order makes the
//! encoding canonical: equal checkpoints produce identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::activation::Activation;
use crate::nn::adapter::AdapterParams;
use crate::nn::tensor::Mat;

/// One dense array; `data.len()` always equals the product of `dims`.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    dims: Vec<u64>,
    data: Vec<f64>,
}

impl NamedArray {
    pub fn new(dims: Vec<u64>, data: Vec<f64>) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(Error::validation(format!(
                "array rank {} exceeds the format limit",
                dims.len()
            )));
        }
        let want = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::validation("array dims overflow".to_string()))?;
        if data.len() as u64 != want {
            return Err(Error::validation(format!(
                "array has {} values for dims {dims:?} (expected {want})",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::validation(
                "checkpoint arrays must hold finite values only".to_string(),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![], vec![value])
    }

    pub fn from_mat(m: &Mat) -> Self {
        Self {
            dims: vec![m.rows() as u64, m.cols() as u64],
            data: m.data().to_vec(),
        }
    }

    pub fn dims(&self) -> &[u64] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn to_mat(&self) -> Result<Mat> {
        if self.dims.len() != 2 {
            return Err(Error::validation(format!(
                "expected a rank-2 array, got rank {}",
                self.dims.len()
            )));
        }
        let rows = usize::try_from(self.dims[0])
            .map_err(|_| Error::validation("array dim overflows usize".to_string()))?;
        let cols = usize::try_from(self.dims[1])
            .map_err(|_| Error::validation("array dim overflows usize".to_string()))?;
        Mat::new(rows, cols, self.data.clone())
    }
}

/// Checkpoints iterate in name order, which fixes the byte layout.
pub type Checkpoint = BTreeMap<String, NamedArray>;

/// Serializes a checkpoint into its canonical byte string.
pub fn checkpoint_bytes(cp: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (name, array) in cp {
        let len = u32::try_from(name.len())
            .map_err(|_| Error::validation(format!("name '{name}' is too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(array.dims.len() as u8);
        for &d in &array.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &array.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::corruption(format!(
                "checkpoint truncated while reading {what} at offset {}",
                self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses checkpoint bytes, enforcing the canonical sorted layout.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { bytes, pos: 0 };
    let mut cp = Checkpoint::new();
    let mut prev_name: Option<String> = None;
    while cur.pos < bytes.len() {
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::format("checkpoint name is not UTF-8".to_string()))?
            .to_string();
        if let Some(prev) = &prev_name {
            if *prev >= name {
                return Err(Error::format(format!(
                    "checkpoint entries out of order: '{prev}' then '{name}'"
                )));
            }
        }
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u64("dims")?);
        }
        let count = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::corruption("checkpoint dims overflow".to_string()))?;
        let count = usize::try_from(count)
            .map_err(|_| Error::corruption("checkpoint dims overflow".to_string()))?;
        if count > bytes.len() / 8 {
            // Cheap upper bound; catches absurd sizes before allocating.
            return Err(Error::corruption(format!(
                "checkpoint claims {count} values for '{name}' but the file is too small"
            )));
        }
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(cur.f64("values")?);
        }
        let array = NamedArray::new(dims, data)?;
        prev_name = Some(name.clone());
        cp.insert(name, array);
    }
    Ok(cp)
}

pub fn write_checkpoint(cp: &Checkpoint, path: &Path) -> Result<()> {
    Ok(fs::write(path, checkpoint_bytes(cp)?)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    parse_checkpoint(&fs::read(path)?)
}

const ADAPTER_ARRAYS: [&str; 4] = ["w_dn", "w_up", "w_dup", "w_ddn"];

/// Stores adapter weights plus an `activation` scalar (0 identity,
/// 1 GELU).
pub fn adapter_to_checkpoint(p: &AdapterParams) -> Checkpoint {
    let mut cp = Checkpoint::new();
    cp.insert("w_dn".to_string(), NamedArray::from_mat(&p.w_dn));
    cp.insert("w_up".to_string(), NamedArray::from_mat(&p.w_up));
    cp.insert("w_dup".to_string(), NamedArray::from_mat(&p.w_dup));
    cp.insert("w_ddn".to_string(), NamedArray::from_mat(&p.w_ddn));
    let act = match p.activation {
        Activation::Identity => 0.0,
        Activation::Gelu => 1.0,
    };
    cp.insert("activation".to_string(), NamedArray::scalar(act).unwrap());
    cp
}

/// Rebuilds adapter weights, checking that the four matrices form a
/// consistent bottleneck.
pub fn adapter_from_checkpoint(cp: &Checkpoint) -> Result<AdapterParams> {
    let fetch = |name: &str| -> Result<Mat> {
        cp.get(name)
            .ok_or_else(|| Error::validation(format!("checkpoint is missing '{name}'")))?
            .to_mat()
    };
    let w_dn = fetch(ADAPTER_ARRAYS[0])?;
    let w_up = fetch(ADAPTER_ARRAYS[1])?;
    let w_dup = fetch(ADAPTER_ARRAYS[2])?;
    let w_ddn = fetch(ADAPTER_ARRAYS[3])?;

    let activation = match cp.get("activation") {
        Some(a) if a.dims().is_empty() && a.data() == [0.0] => Activation::Identity,
        Some(a) if a.dims().is_empty() && a.data() == [1.0] => Activation::Gelu,
        Some(_) => {
            return Err(Error::validation(
                "checkpoint 'activation' must be a scalar 0 or 1".to_string(),
            ))
        }
        None => return Err(Error::validation("checkpoint is missing 'activation'".to_string())),
    };

    let c = w_dn.rows();
    let k = w_dn.cols();
    let d = w_dup.rows();
    let shapes_ok = c == 4 * k
        && (w_up.rows(), w_up.cols()) == (k, c)
        && w_dup.cols() == 4 * d
        && (w_ddn.rows(), w_ddn.cols()) == (4 * d, d);
    if !shapes_ok {
        return Err(Error::validation(format!(
            "checkpoint arrays do not form a consistent adapter: \
             w_dn {} x {}, w_up {} x {}, w_dup {} x {}, w_ddn {} x {}",
            w_dn.rows(),
            w_dn.cols(),
            w_up.rows(),
            w_up.cols(),
            w_dup.rows(),
            w_dup.cols(),
            w_ddn.rows(),
            w_ddn.cols()
        )));
    }
    Ok(AdapterParams {
        w_dn,
        w_up,
        w_dup,
        w_ddn,
        activation,
    })
}
