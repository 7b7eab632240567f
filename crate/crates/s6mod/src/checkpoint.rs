//! Versioned binary snapshot of a full model: magic string, config
//! blob, named parameter sections, the fixed ETF matrix, and the
//! prototype store.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::routing::PrototypeStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"S6MODCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Opaque caller-provided blob (the CLI stores its resolved config).
    pub config_blob: Vec<u8>,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub etf: Option<(Vec<usize>, Vec<f64>)>,
    pub prototypes: Prototypes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub means: Vec<Vec<f64>>,
    pub seen: Vec<bool>,
    pub momentum: f64,
    pub lambda0: f64,
}

impl Checkpoint {
    pub fn capture(model: &Model, config_blob: Vec<u8>) -> Checkpoint {
        let params = model
            .params
            .iter()
            .map(|(name, t)| (name.to_string(), t.shape().to_vec(), t.data().to_vec()))
            .collect();
        let etf = model.branch.as_ref().map(|b| {
            let w = b.etf.weights();
            (w.shape().to_vec(), w.data().to_vec())
        });
        let (means, seen, momentum, lambda0) = model.prototypes.raw();
        Checkpoint {
            config_blob,
            params,
            etf,
            prototypes: Prototypes {
                means: means.to_vec(),
                seen: seen.to_vec(),
                momentum,
                lambda0,
            },
        }
    }

    /// Writes parameters and prototypes back into a structurally
    /// matching model. The ETF matrix is fixed, so it is verified
    /// rather than overwritten.
    pub fn apply(&self, model: &mut Model) -> Result<()> {
        for (name, shape, data) in &self.params {
            let tensor = model
                .params
                .by_name_mut(name)
                .ok_or_else(|| Error::Contract(format!("checkpoint has unknown parameter {name:?}")))?;
            if tensor.shape() != shape.as_slice() {
                return Err(Error::Contract(format!(
                    "parameter {name:?} shape mismatch: {:?} vs {:?}",
                    tensor.shape(),
                    shape
                )));
            }
            *tensor = Tensor::new(shape.clone(), data.clone())?.with_grad();
        }
        if let (Some((shape, data)), Some(branch)) = (&self.etf, &model.branch) {
            let w = branch.etf.weights();
            if w.shape() != shape.as_slice() || w.data() != data.as_slice() {
                return Err(Error::Contract(
                    "checkpoint ETF matrix disagrees with the rebuilt model".into(),
                ));
            }
        }
        model.prototypes = PrototypeStore::from_raw(
            self.prototypes.means.clone(),
            self.prototypes.seen.clone(),
            self.prototypes.momentum,
            self.prototypes.lambda0,
        )?;
        Ok(())
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    write_bytes(&mut buf, &ckpt.config_blob);
    buf.extend_from_slice(&(ckpt.params.len() as u64).to_le_bytes());
    for (name, shape, data) in &ckpt.params {
        write_bytes(&mut buf, name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    match &ckpt.etf {
        Some((shape, data)) => {
            buf.push(1);
            buf.extend_from_slice(&(shape[0] as u64).to_le_bytes());
            buf.extend_from_slice(&(shape[1] as u64).to_le_bytes());
            for &v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        None => buf.push(0),
    }
    let p = &ckpt.prototypes;
    buf.extend_from_slice(&(p.means.len() as u64).to_le_bytes());
    let dim = p.means.first().map(|m| m.len()).unwrap_or(0);
    buf.extend_from_slice(&(dim as u64).to_le_bytes());
    buf.extend_from_slice(&p.momentum.to_le_bytes());
    buf.extend_from_slice(&p.lambda0.to_le_bytes());
    for &s in &p.seen {
        buf.push(s as u8);
    }
    for m in &p.means {
        for &v in m {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::Format { offset: 0, detail: "bad magic string".into() });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 8,
            detail: format!("unsupported checkpoint version {version}"),
        });
    }
    let config_blob = r.bytes_field()?.to_vec();
    let n_params = r.u64()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = String::from_utf8(r.bytes_field()?.to_vec())
            .map_err(|_| Error::Format { offset: r.pos as u64, detail: "non-utf8 name".into() })?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f64()?);
        }
        params.push((name, shape, data));
    }
    let etf = match r.u8()? {
        0 => None,
        1 => {
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(r.f64()?);
            }
            Some((vec![rows, cols], data))
        }
        other => {
            return Err(Error::Format {
                offset: r.pos as u64 - 1,
                detail: format!("bad ETF presence flag {other}"),
            })
        }
    };
    let classes = r.u64()? as usize;
    let dim = r.u64()? as usize;
    let momentum = r.f64()?;
    let lambda0 = r.f64()?;
    let mut seen = Vec::with_capacity(classes);
    for _ in 0..classes {
        seen.push(r.u8()? != 0);
    }
    let mut means = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut m = Vec::with_capacity(dim);
        for _ in 0..dim {
            m.push(r.f64()?);
        }
        means.push(m);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            detail: "trailing bytes after checkpoint payload".into(),
        });
    }
    Ok(Checkpoint { config_blob, params, etf, prototypes: Prototypes { means, seen, momentum, lambda0 } })
}

fn write_bytes(buf: &mut Vec<u8>, data: &[u8]) {
    buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
    buf.extend_from_slice(data);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: "unexpected end of checkpoint".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn bytes_field(&mut self) -> Result<&'a [u8]> {
        let len = self.u64()? as usize;
        self.take(len)
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
