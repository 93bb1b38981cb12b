//! Dense dynamic edge-convolution feature extractor: `[N, 3] -> [N, C1]`.
//!
//! An entry shared MLP lifts coordinates to `c0` channels. Each of the `U`
//! dense units then builds a kNN graph, forms edge features
//! `(F_j - F_i, F_i)`, runs two per-edge MLP layers with dense concatenation
//! and max-pools over neighbours to emit `g` channels. Every unit sees the
//! concatenation of all earlier outputs; the result is
//! `[entry, unit_1, .., unit_U]` with `c0 + U·g = C1` channels.
//!
//! The first unit's graph is built on raw coordinates, later units rebuild it
//! in their own input feature space.

use crate::error::{Error, Result};
use crate::geometry::knn_rows;
use crate::nn::{Linear, ParamBuilder};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExtractorConfig {
    pub entry_width: usize,
    pub growth: usize,
    pub units: usize,
    pub k: usize,
}

impl ExtractorConfig {
    /// `24 + 3·208 = 648` channels.
    pub fn full() -> Self {
        ExtractorConfig {
            entry_width: 24,
            growth: 208,
            units: 3,
            k: 16,
        }
    }

    /// `8 + 3·24 = 80` channels.
    pub fn desk() -> Self {
        ExtractorConfig {
            entry_width: 8,
            growth: 24,
            units: 3,
            k: 16,
        }
    }

    pub fn output_channels(&self) -> usize {
        self.entry_width + self.units * self.growth
    }

    pub fn validate(&self) -> Result<()> {
        if self.entry_width == 0 || self.growth == 0 || !self.growth.is_multiple_of(2) || self.k == 0 {
            return Err(Error::Config(format!(
                "extractor needs c0 > 0, even g > 0 and k > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Two per-edge layers; the second sees the edge features and the first
/// layer's output, and both outputs are pooled.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseUnitParams {
    pub edge_mlp1: Linear,
    pub edge_mlp2: Linear,
    pub in_channels: usize,
    pub growth: usize,
}

impl DenseUnitParams {
    pub fn new(b: &mut ParamBuilder<'_>, in_channels: usize, growth: usize) -> Self {
        let half = growth / 2;
        DenseUnitParams {
            edge_mlp1: Linear::new(b, "edge_mlp1", 2 * in_channels, half, true),
            edge_mlp2: Linear::new(b, "edge_mlp2", 2 * in_channels + half, half, true),
            in_channels,
            growth,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorParams {
    pub config: ExtractorConfig,
    pub entry: Linear,
    pub units: Vec<DenseUnitParams>,
}

impl ExtractorParams {
    pub fn new(b: &mut ParamBuilder<'_>, config: ExtractorConfig) -> Result<Self> {
        config.validate()?;
        b.scoped("extractor", |b| {
            let entry = Linear::new(b, "entry", 3, config.entry_width, true);
            let units = (0..config.units)
                .map(|u| {
                    let cin = config.entry_width + u * config.growth;
                    b.scoped(format!("unit{u}"), |b| DenseUnitParams::new(b, cin, config.growth))
                })
                .collect();
            Ok(ExtractorParams {
                config,
                entry,
                units,
            })
        })
    }

    pub fn output_channels(&self) -> usize {
        self.config.entry_width + self.units.iter().map(|u| u.growth).sum::<usize>()
    }
}

/// `out[i, j, :] = (F[idx[i][j]] - F[i], F[i])`, shape `[N, k, 2C]`.
pub fn edge_features(tape: &mut Tape, f: Var, idx: &[Vec<usize>]) -> Result<Var> {
    let n = tape.shape(f)[0];
    if idx.len() != n {
        return Err(Error::ShapeMismatch {
            op: "edge_features",
            left: tape.shape(f).to_vec(),
            right: vec![idx.len()],
        });
    }
    let k = idx.first().map_or(0, Vec::len);
    let centers_idx: Vec<Vec<usize>> = (0..n).map(|i| vec![i; k]).collect();
    let neighbours = tape.gather_rows(f, idx)?;
    let centers = tape.gather_rows(f, &centers_idx)?;
    let diff = tape.sub(neighbours, centers)?;
    tape.concat_channels(diff, centers)
}

/// Self-kNN graph over the rows of `x`; the row itself comes first.
pub fn feature_graph(tape: &mut Tape, x: Var, k: usize) -> Result<Vec<Vec<usize>>> {
    let v = tape.value(x);
    let c = v.channels();
    let idx = knn_rows(v.data(), v.data(), c, k)?;
    tape.record_decision(&idx);
    Ok(idx)
}

/// One dense edge-conv unit with its graph built in `f_in`'s feature space.
pub fn dense_edge_conv_unit(
    tape: &mut Tape,
    vars: &[Var],
    f_in: Var,
    k: usize,
    params: &DenseUnitParams,
) -> Result<Var> {
    let idx = feature_graph(tape, f_in, k)?;
    dense_edge_conv_unit_on_graph(tape, vars, f_in, &idx, params)
}

pub fn dense_edge_conv_unit_on_graph(
    tape: &mut Tape,
    vars: &[Var],
    f_in: Var,
    idx: &[Vec<usize>],
    params: &DenseUnitParams,
) -> Result<Var> {
    let edges = edge_features(tape, f_in, idx)?;
    let h1 = params.edge_mlp1.forward(tape, vars, edges)?;
    let h1 = tape.relu(h1);
    let dense_in = tape.concat_channels(edges, h1)?;
    let h2 = params.edge_mlp2.forward(tape, vars, dense_in)?;
    let h2 = tape.relu(h2);
    let both = tape.concat_channels(h1, h2)?;
    tape.reduce_max_axis1(both)
}

/// `[N, 3]` coordinates to `[N, C1]` features.
pub fn extract_features(tape: &mut Tape, vars: &[Var], points: Var, params: &ExtractorParams) -> Result<Var> {
    let shape = tape.shape(points).to_vec();
    if shape.len() != 2 || shape[1] != 3 {
        return Err(Error::ShapeMismatch {
            op: "extract_features",
            left: shape,
            right: vec![0, 3],
        });
    }
    let k = params.config.k;
    if shape[0] < k {
        return Err(Error::invalid(format!(
            "feature extraction needs at least k={k} points, got {}",
            shape[0]
        )));
    }
    let entry = params.entry.forward(tape, vars, points)?;
    let entry = tape.relu(entry);
    let mut features = entry;
    for (u, unit) in params.units.iter().enumerate() {
        let idx = if u == 0 {
            feature_graph(tape, points, k)?
        } else {
            feature_graph(tape, features, k)?
        };
        let out = dense_edge_conv_unit_on_graph(tape, vars, features, &idx, unit)?;
        features = tape.concat_channels(features, out)?;
    }
    Ok(features)
}
