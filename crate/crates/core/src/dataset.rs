//! Ground-truth patch container (`BPUP`).
//!
//! Little-endian: magic, u32 version, u32 patch count, u32 points per patch,
//! f32 coordinate triples patch by patch, then one length-prefixed object id
//! per patch.

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;

pub const MAGIC: &[u8; 4] = b"BPUP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchDataset {
    points_per_patch: usize,
    patches: Vec<PointCloud>,
    object_ids: Vec<String>,
}

impl PatchDataset {
    pub fn new(points_per_patch: usize) -> Self {
        PatchDataset {
            points_per_patch,
            patches: Vec::new(),
            object_ids: Vec::new(),
        }
    }

    pub fn push(&mut self, patch: PointCloud, object_id: impl Into<String>) -> Result<()> {
        if patch.len() != self.points_per_patch {
            return Err(Error::Mismatch(format!(
                "patch has {} points, container holds {}",
                patch.len(),
                self.points_per_patch
            )));
        }
        self.patches.push(patch);
        self.object_ids.push(object_id.into());
        Ok(())
    }

    pub fn points_per_patch(&self) -> usize {
        self.points_per_patch
    }

    pub fn patches(&self) -> &[PointCloud] {
        &self.patches
    }

    pub fn object_ids(&self) -> &[String] {
        &self.object_ids
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Rounds coordinates to f32, the stored precision.
    pub fn quantize_f32(&mut self) -> Result<()> {
        for p in &mut self.patches {
            let q = p.points().iter().map(|v| v.map(|c| c as f32 as f64)).collect();
            *p = PointCloud::new(q)?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.len_u32(self.patches.len())?;
        w.len_u32(self.points_per_patch)?;
        for p in &self.patches {
            for v in p.points() {
                for &c in v {
                    w.f32(c as f32);
                }
            }
        }
        for id in &self.object_ids {
            w.str(id)?;
        }
        Ok(w.buf)
    }

    pub fn decode(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data, "patch container");
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a patch container (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported patch container version {version}")));
        }
        let count = r.u32()? as usize;
        let per = r.u32()? as usize;
        if per == 0 {
            return Err(r.err("zero points per patch"));
        }
        let need = count.saturating_mul(per).saturating_mul(12);
        if need > data.len() {
            return Err(r.err(format!("count field says {count} patches of {per} points but the data is shorter")));
        }
        let mut out = PatchDataset::new(per);
        let mut clouds = Vec::with_capacity(count);
        for _ in 0..count {
            let mut pts = Vec::with_capacity(per);
            for _ in 0..per {
                let p = [r.f32()?, r.f32()?, r.f32()?];
                if p.iter().any(|c| !c.is_finite()) {
                    return Err(r.err("non-finite coordinate"));
                }
                pts.push(p.map(f64::from));
            }
            clouds.push(PointCloud::new(pts)?);
        }
        for cloud in clouds {
            let id = r.str()?;
            out.push(cloud, id)?;
        }
        r.finish()?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&data).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
