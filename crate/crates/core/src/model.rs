//! The full network: feature extractor, expansion module and one coordinate
//! head per output scale.

use crate::bims::{expand, BimsParams};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::extractor::{extract_features, ExtractorParams};
use crate::geometry::PointCloud;
use crate::losses::{reconstruct, HeadParams};
use crate::nn::{ParamBuilder, ParamSet};
use crate::rng::{stream, tag};
use crate::tensor::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub extractor: ExtractorParams,
    pub bims: BimsParams,
    /// Coarsest scale first.
    pub heads: Vec<HeadParams>,
}

impl Model {
    /// Builds the architecture and freshly initialised parameters. The
    /// initial values depend only on the config's seed.
    pub fn new(cfg: &TrainConfig) -> Result<(Model, ParamSet)> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, &[tag::INIT]);
        let mut b = ParamBuilder::new(&mut rng);
        let extractor = ExtractorParams::new(&mut b, cfg.extractor)?;
        let bims = BimsParams::new(&mut b, cfg.bims())?;
        let heads = (1..=cfg.levels())
            .map(|l| HeadParams::new(&mut b, &format!("head{l}"), cfg.channels, cfg.head_hidden))
            .collect();
        Ok((
            Model {
                extractor,
                bims,
                heads,
            },
            b.finish(),
        ))
    }

    pub fn levels(&self) -> usize {
        self.heads.len()
    }

    /// `[N, 3]` input patch to `[2^l·N, 3]` predictions for `l = 1..=L`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], points: Var) -> Result<Vec<Var>> {
        let f = extract_features(tape, vars, points, &self.extractor)?;
        let scales = expand(tape, vars, f, &self.bims)?;
        scales
            .into_iter()
            .zip(&self.heads)
            .map(|(s, h)| reconstruct(tape, vars, s, h))
            .collect()
    }

    /// Finest-scale prediction for one (already normalised) patch.
    pub fn predict(&self, params: &ParamSet, patch: &PointCloud) -> Result<PointCloud> {
        let mut tape = Tape::new();
        let vars = params.bind_constant(&mut tape);
        let x = tape.constant(patch.to_tensor());
        let preds = self.forward(&mut tape, &vars, x)?;
        let top = preds.last().ok_or_else(|| Error::invalid("model has no output scales"))?;
        let out = tape.value(*top);
        if !out.is_finite() {
            return Err(Error::Numeric("prediction contains non-finite values".into()));
        }
        PointCloud::from_tensor(out)
    }
}
