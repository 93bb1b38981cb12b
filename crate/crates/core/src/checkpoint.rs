//! Versioned binary checkpoints (`BPUC`).
//!
//! Layout, little-endian: magic, u32 version, u32-length-prefixed config
//! text, u32 tensor count, tensors (name, u32 rank, u64 extents, f32 data),
//! the optimizer section (u64 step, u32 count, first moments then second
//! moments in the tensor layout) and finally the u32-length-prefixed trainer
//! state: seed, epoch, batch cursor and the running epoch sums.

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::optim::AdamState;

pub const MAGIC: &[u8; 4] = b"BPUC";
pub const VERSION: u32 = 1;

/// Where training resumes: everything random is derived from the seed and
/// the position within the schedule.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainerState {
    pub seed: u64,
    pub epoch: u64,
    /// Next batch within `epoch`.
    pub batch: u64,
    /// Sums over the finished batches of the current epoch.
    pub batches_done: u64,
    pub joint_sum: f64,
    pub cd_sums: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamSet,
    pub adam: AdamState,
    pub state: TrainerState,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        self.adam.check_matches(&self.params)?;
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.str(&self.config.to_text())?;
        w.len_u32(self.params.len())?;
        for (name, t) in self.params.iter() {
            w.tensor(name, t)?;
        }
        w.u64(self.adam.step);
        w.len_u32(2 * self.params.len())?;
        for (name, t) in self.params.names().iter().zip(&self.adam.m) {
            w.tensor(&format!("adam.m.{name}"), t)?;
        }
        for (name, t) in self.params.names().iter().zip(&self.adam.v) {
            w.tensor(&format!("adam.v.{name}"), t)?;
        }
        let mut s = Writer::default();
        let st = &self.state;
        for v in [st.seed, st.epoch, st.batch, st.batches_done, st.joint_sum.to_bits()] {
            s.u64(v);
        }
        s.len_u32(st.cd_sums.len())?;
        for v in &st.cd_sums {
            s.u64(v.to_bits());
        }
        w.len_u32(s.buf.len())?;
        w.bytes(&s.buf);
        Ok(w.buf)
    }

    pub fn decode(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data, "checkpoint");
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let text = r.str()?;
        let config = TrainConfig::parse(&text, Path::new("<checkpoint config>"))?;
        let count = r.u32()? as usize;
        let mut params = ParamSet::default();
        for _ in 0..count {
            let (name, t) = r.tensor()?;
            params.push(name, t);
        }
        let step = r.u64()?;
        let moments = r.u32()? as usize;
        if moments != 2 * count {
            return Err(r.err(format!("{moments} optimizer tensors for {count} parameters")));
        }
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for i in 0..moments {
            let (name, t) = r.tensor()?;
            let (prefix, out) = if i < count { ("adam.m.", &mut m) } else { ("adam.v.", &mut v) };
            let expect = format!("{prefix}{}", params.names()[i % count]);
            if name != expect {
                return Err(r.err(format!("expected tensor {expect:?}, found {name:?}")));
            }
            out.push(t);
        }
        let adam = AdamState { m, v, step };
        adam.check_matches(&params)?;

        let len = r.u32()? as usize;
        let mut s = Reader::new(r.take(len)?, "trainer state");
        let (seed, epoch, batch, batches_done) = (s.u64()?, s.u64()?, s.u64()?, s.u64()?);
        let joint_sum = f64::from_bits(s.u64()?);
        let n = s.u32()? as usize;
        if n != config.levels() {
            return Err(s.err(format!("{n} scale sums for {} scales", config.levels())));
        }
        let cd_sums = (0..n).map(|_| s.u64().map(f64::from_bits)).collect::<Result<_>>()?;
        s.finish()?;
        r.finish()?;
        Ok(Checkpoint {
            config,
            params,
            adam,
            state: TrainerState {
                seed,
                epoch,
                batch,
                batches_done,
                joint_sum,
                cd_sums,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&data)
    }
}
