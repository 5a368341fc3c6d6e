//! Checkpoint format: magic, version, config JSON, ordered raw parameter
//! arrays, running batchnorm statistics, optional optimizer state.
//!
//! Values are stored as little-endian f64 regardless of the training scalar
//! type, so an f32 model reloads bit-identically (f64 is a superset).

use super::{build_model, BnRunning, DcaeConfig, DcaeError, DcaeModel};
use crate::nn::{AdamState, Scalar, Tensor};
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 8] = b"DCAECKPT";
const VERSION: u16 = 1;

pub struct LoadedCheckpoint<S: Scalar> {
    pub model: DcaeModel<S>,
    pub adam: Option<AdamState<S>>,
    pub epoch: u64,
}

pub fn save_checkpoint<S: Scalar>(
    model: &DcaeModel<S>,
    adam: Option<&AdamState<S>>,
    epoch: u64,
    path: &Path,
) -> Result<(), DcaeError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&epoch.to_le_bytes());
    buf.extend_from_slice(&model.init_seed.to_le_bytes());

    let config =
        serde_json::to_vec(&model.cfg).map_err(|e| DcaeError::Checkpoint(e.to_string()))?;
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);

    buf.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(p.shape.len() as u8);
        for &d in &p.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &p.data {
            buf.extend_from_slice(&v.into_f64().to_le_bytes());
        }
    }

    buf.extend_from_slice(&(model.bn_running().len() as u32).to_le_bytes());
    for bn in model.bn_running() {
        buf.extend_from_slice(&(bn.mean.len() as u64).to_le_bytes());
        for &v in &bn.mean {
            buf.extend_from_slice(&v.into_f64().to_le_bytes());
        }
        for &v in &bn.var {
            buf.extend_from_slice(&v.into_f64().to_le_bytes());
        }
    }

    match adam {
        Some(state) => {
            buf.push(1);
            buf.extend_from_slice(&state.t.to_le_bytes());
            for (m, v) in state.m.iter().zip(&state.v) {
                for &x in m {
                    buf.extend_from_slice(&x.into_f64().to_le_bytes());
                }
                for &x in v {
                    buf.extend_from_slice(&x.into_f64().to_le_bytes());
                }
            }
        }
        None => buf.push(0),
    }

    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DcaeError> {
        if self.pos + n > self.bytes.len() {
            return Err(DcaeError::Checkpoint(format!(
                "truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16, DcaeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DcaeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DcaeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, DcaeError> {
        Ok(self.take(1)?[0])
    }

    fn f64_vec<S: Scalar>(&mut self, n: usize) -> Result<Vec<S>, DcaeError> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| S::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<LoadedCheckpoint<S>, DcaeError> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(8)? != MAGIC {
        return Err(DcaeError::Checkpoint("bad magic".to_string()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(DcaeError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let epoch = r.u64()?;
    let init_seed = r.u64()?;
    let config_len = r.u32()? as usize;
    let cfg: DcaeConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| DcaeError::Checkpoint(format!("config block: {e}")))?;

    let param_count = r.u32()? as usize;
    let mut params = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| DcaeError::Checkpoint("non-utf8 parameter name".to_string()))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let data = r.f64_vec::<S>(count)?;
        params.push(Tensor::new(name, shape, data));
    }

    let bn_count = r.u32()? as usize;
    let mut bn_running = Vec::with_capacity(bn_count);
    for _ in 0..bn_count {
        let width = r.u64()? as usize;
        bn_running.push(BnRunning {
            mean: r.f64_vec::<S>(width)?,
            var: r.f64_vec::<S>(width)?,
        });
    }

    // Rebuild through the regular constructor so shapes are validated, then
    // overwrite the freshly initialized state with the stored one.
    let mut model = build_model::<S>(&cfg, init_seed)?;
    if model.params().len() != params.len()
        || model
            .params()
            .iter()
            .zip(&params)
            .any(|(a, b)| a.name != b.name || a.shape != b.shape)
    {
        return Err(DcaeError::Checkpoint(
            "stored parameters do not match the configured architecture".to_string(),
        ));
    }
    if model.bn_running().len() != bn_running.len() {
        return Err(DcaeError::Checkpoint(
            "stored batchnorm buffers do not match the architecture".to_string(),
        ));
    }
    let sizes: Vec<usize> = params.iter().map(|p| p.data.len()).collect();
    model.set_state(params, bn_running);

    let adam = match r.u8()? {
        0 => None,
        1 => {
            let t = r.u64()?;
            let mut state = AdamState::new(&sizes);
            state.t = t;
            for i in 0..sizes.len() {
                state.m[i] = r.f64_vec::<S>(sizes[i])?;
                state.v[i] = r.f64_vec::<S>(sizes[i])?;
            }
            Some(state)
        }
        other => {
            return Err(DcaeError::Checkpoint(format!(
                "bad optimizer-state flag {other}"
            )))
        }
    };

    Ok(LoadedCheckpoint { model, adam, epoch })
}
