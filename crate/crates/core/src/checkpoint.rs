//! Binary checkpoint container: magic "CDYS1", then little-endian
//! length-prefixed records for configs, counters, parameters, optimizer
//! moments, per-step parameter history, and the loss log.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelConfig;
use crate::tensor::Tensor;
use crate::training::{EpochRecord, MomentMap, TrainConfig};

pub const MAGIC: &[u8; 5] = b"CDYS1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("config echo: {0}")]
    Json(#[from] serde_json::Error),
}

/// Everything needed to resume training bit-exactly. Randomness is derived
/// statelessly from the seed in the config echo, so no generator state is
/// stored, only counters.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub current_step: usize,
    pub epoch_in_step: usize,
    pub total_epochs: usize,
    pub adam_step_count: u64,
    pub params: BTreeMap<String, Tensor>,
    pub moments: MomentMap,
    pub history: Vec<(usize, BTreeMap<String, Tensor>)>,
    pub records: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct ConfigEcho {
    model: ModelConfig,
    train: TrainConfig,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }

    fn floats(&mut self, xs: &[f64]) {
        self.u64(xs.len() as u64);
        for &x in xs {
            self.f64(x);
        }
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u64(t.shape().len() as u64);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        self.floats(t.data());
    }

    fn params(&mut self, params: &BTreeMap<String, Tensor>) {
        self.u64(params.len() as u64);
        for (name, tensor) in params {
            self.bytes(name.as_bytes());
            self.tensor(tensor);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Corrupt(format!(
                "truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize, CheckpointError> {
        Ok(self.u64()? as usize)
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8], CheckpointError> {
        let len = self.usize()?;
        self.take(len)
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("non-utf8 name".into()))
    }

    fn floats(&mut self) -> Result<Vec<f64>, CheckpointError> {
        let len = self.usize()?;
        (0..len).map(|_| self.f64()).collect()
    }

    fn tensor(&mut self) -> Result<Tensor, CheckpointError> {
        let ndim = self.usize()?;
        let shape: Vec<usize> = (0..ndim)
            .map(|_| self.usize())
            .collect::<Result<_, _>>()?;
        let data = self.floats()?;
        Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Corrupt(format!("bad tensor record: {e}")))
    }

    fn params(&mut self) -> Result<BTreeMap<String, Tensor>, CheckpointError> {
        let count = self.usize()?;
        let mut out = BTreeMap::new();
        for _ in 0..count {
            let name = self.string()?;
            let tensor = self.tensor()?;
            out.insert(name, tensor);
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.buf.extend_from_slice(MAGIC);
        w.buf.extend_from_slice(&VERSION.to_le_bytes());
        let echo = ConfigEcho {
            model: self.model_cfg.clone(),
            train: self.train_cfg.clone(),
        };
        w.bytes(&serde_json::to_vec(&echo).expect("configs serialize"));
        w.u64(self.current_step as u64);
        w.u64(self.epoch_in_step as u64);
        w.u64(self.total_epochs as u64);
        w.u64(self.adam_step_count);
        w.params(&self.params);
        w.u64(self.moments.len() as u64);
        for (name, (m, v)) in &self.moments {
            w.bytes(name.as_bytes());
            w.floats(m);
            w.floats(v);
        }
        w.u64(self.history.len() as u64);
        for (step, params) in &self.history {
            w.u64(*step as u64);
            w.params(params);
        }
        w.u64(self.records.len() as u64);
        for r in &self.records {
            w.u64(r.time_step as u64);
            w.u64(r.epoch as u64);
            w.f64(r.loss);
        }
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader::new(bytes);
        if r.take(5)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let echo: ConfigEcho = serde_json::from_slice(r.bytes()?)?;
        let current_step = r.usize()?;
        let epoch_in_step = r.usize()?;
        let total_epochs = r.usize()?;
        let adam_step_count = r.u64()?;
        let params = r.params()?;
        let moment_count = r.usize()?;
        let mut moments = BTreeMap::new();
        for _ in 0..moment_count {
            let name = r.string()?;
            let m = r.floats()?;
            let v = r.floats()?;
            if m.len() != v.len() {
                return Err(CheckpointError::Corrupt(format!(
                    "moment vectors for '{name}' disagree in length"
                )));
            }
            moments.insert(name, (m, v));
        }
        let history_count = r.usize()?;
        let mut history = Vec::with_capacity(history_count);
        for _ in 0..history_count {
            let step = r.usize()?;
            let params = r.params()?;
            history.push((step, params));
        }
        let record_count = r.usize()?;
        let mut records = Vec::with_capacity(record_count);
        for _ in 0..record_count {
            records.push(EpochRecord {
                time_step: r.usize()?,
                epoch: r.usize()?,
                loss: r.f64()?,
            });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            model_cfg: echo.model,
            train_cfg: echo.train,
            current_step,
            epoch_in_step,
            total_epochs,
            adam_step_count,
            params,
            moments,
            history,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        Ok(std::fs::write(path, self.encode())?)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::decode(&std::fs::read(path)?)
    }
}
