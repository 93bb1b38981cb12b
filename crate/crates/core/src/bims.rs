//! Bi-directional multi-scale feature expansion.
//!
//! Starting from extractor features `F: [N, C1]`, an entry block maps to
//! `F_0: [N, C2]`. Three operator sets of size `L = log2(r)` then run:
//!
//! * left pathway, upsampling: `F_l^l = Up(F_{l-1}^l)`, `F_0^l = F_0`;
//! * middle pathway, top-down: `F_{L-1}^m = fuse(F_{L-1}^l, Down(F_L^l))`,
//!   `F_l^m = fuse(F_l^l, Down(F_{l+1}^m))` down to `l = 0`;
//! * right pathway, bottom-up: `F_0^r = F_0^m`,
//!   `F_l^r = fuse(F_l^l, F_l^m, Up(F_{l-1}^r))` for `0 < l < L`, and
//!   `F_L^r = fuse(F_L^l, Up(F_{L-1}^r))`.
//!
//! The outputs are `[F_1^r, .., F_L^r]`, with `F_l^r: [2^l·N, C2]`. An up
//! operator places the children of parent row `m` at rows `2m` and `2m+1`;
//! the down operator pairs the same rows back up.

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamBuilder, ParamId};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_FUSION_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BimsConfig {
    pub levels: usize,
    pub in_channels: usize,
    pub channels: usize,
    pub eps: f64,
    /// Residual blocks; when off every block is a plain two-layer MLP.
    pub residual: bool,
    /// Middle and right pathways; when off the outputs are the left pathway.
    pub fusion: bool,
}

impl BimsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::Config("expansion needs at least one level".into()));
        }
        if self.in_channels == 0 || self.channels == 0 {
            return Err(Error::Config("expansion channel counts must be positive".into()));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::Config("fusion epsilon must be >= 0".into()));
        }
        Ok(())
    }
}

/// `y = fc2(relu(fc1(x))) + proj(x)`; `proj` is the identity when the widths
/// match and a bias-free linear map otherwise. With `residual == false` the
/// projection path is absent.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlockParams {
    pub fc1: Linear,
    pub fc2: Linear,
    pub proj: Option<Linear>,
    pub residual: bool,
}

impl ResidualBlockParams {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, cin: usize, cout: usize, residual: bool) -> Self {
        b.scoped(name, |b| ResidualBlockParams {
            fc1: Linear::new(b, "fc1", cin, cout, true),
            fc2: Linear::new(b, "fc2", cout, cout, true),
            proj: (residual && cin != cout).then(|| Linear::new(b, "proj", cin, cout, false)),
            residual,
        })
    }

    pub fn in_features(&self) -> usize {
        self.fc1.in_features
    }

    pub fn out_features(&self) -> usize {
        self.fc2.out_features
    }
}

pub fn residual_block(tape: &mut Tape, vars: &[Var], x: Var, p: &ResidualBlockParams) -> Result<Var> {
    let h = p.fc1.forward(tape, vars, x)?;
    let h = tape.relu(h);
    let h = p.fc2.forward(tape, vars, h)?;
    if !p.residual {
        return Ok(h);
    }
    let skip = match &p.proj {
        Some(proj) => proj.forward(tape, vars, x)?,
        None => x,
    };
    tape.add(h, skip)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpOpParams {
    pub block: ResidualBlockParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DownOpParams {
    pub block: ResidualBlockParams,
}

/// One learnable scalar per fused input.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights {
    pub weights: ParamId,
    pub inputs: usize,
}

impl FusionWeights {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, inputs: usize) -> Self {
        FusionWeights {
            weights: b.constant(name, &[inputs], 1.0),
            inputs,
        }
    }
}

/// Duplicates every row, appends a `-1/+1` child code and mixes with a block
/// `(C2+1) -> C2`.
pub fn up_operator(tape: &mut Tape, vars: &[Var], f: Var, p: &UpOpParams) -> Result<Var> {
    let rows = tape.shape(f)[0];
    let dup = tape.repeat_rows(f, 2)?;
    let code: Vec<f64> = (0..2 * rows).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
    let code = tape.constant(Tensor::new(vec![2 * rows, 1], code)?);
    let x = tape.concat_channels(dup, code)?;
    residual_block(tape, vars, x, &p.block)
}

/// Pairs rows `(2m, 2m+1)` into one `2·C2` row and mixes back to `C2`.
pub fn down_operator(tape: &mut Tape, vars: &[Var], f: Var, p: &DownOpParams) -> Result<Var> {
    let rows = tape.shape(f)[0];
    if !rows.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "down operator needs an even row count, got {rows}"
        )));
    }
    let grouped = tape.group_channels(f, 2)?;
    residual_block(tape, vars, grouped, &p.block)
}

pub fn fuse(tape: &mut Tape, vars: &[Var], inputs: &[Var], w: &FusionWeights, eps: f64) -> Result<Var> {
    if inputs.len() != w.inputs {
        return Err(Error::invalid(format!(
            "fusion node expects {} inputs, got {}",
            w.inputs,
            inputs.len()
        )));
    }
    tape.fuse(inputs, vars[w.weights.0], eps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BimsParams {
    pub config: BimsConfig,
    pub entry: ResidualBlockParams,
    pub left_up: Vec<UpOpParams>,
    pub down: Vec<DownOpParams>,
    /// `right_up[l-1]` produces the upsampled input of right node `l`; the
    /// last one is the lateral Up inside the top fusion node.
    pub right_up: Vec<UpOpParams>,
    /// Middle nodes, indexed by level `0..L`.
    pub middle_fusion: Vec<FusionWeights>,
    /// Right nodes, `right_fusion[l-1]` for level `l` in `1..=L`.
    pub right_fusion: Vec<FusionWeights>,
}

/// Operator instances per set: left ups, downs, right (incl. lateral) ups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OperatorCounts {
    pub left_up: usize,
    pub down: usize,
    pub right_up: usize,
}

impl BimsParams {
    pub fn new(b: &mut ParamBuilder<'_>, config: BimsConfig) -> Result<Self> {
        config.validate()?;
        let (l, c2, res) = (config.levels, config.channels, config.residual);
        let up = |b: &mut ParamBuilder<'_>, name: String| UpOpParams {
            block: ResidualBlockParams::new(b, &name, c2 + 1, c2, res),
        };
        let params = b.scoped("bims", |b| {
            let entry = ResidualBlockParams::new(b, "entry", config.in_channels, c2, res);
            let left_up = (0..l).map(|i| up(b, format!("left_up{}", i + 1))).collect();
            let (mut down, mut right_up, mut middle_fusion, mut right_fusion) =
                (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            if config.fusion {
                for i in 0..l {
                    down.push(DownOpParams {
                        block: ResidualBlockParams::new(b, &format!("down{i}"), 2 * c2, c2, res),
                    });
                    middle_fusion.push(FusionWeights::new(b, &format!("fuse_mid{i}"), 2));
                }
                for i in 1..=l {
                    right_up.push(up(b, format!("right_up{i}")));
                    let inputs = if i < l { 3 } else { 2 };
                    right_fusion.push(FusionWeights::new(b, &format!("fuse_right{i}"), inputs));
                }
            }
            BimsParams {
                config,
                entry,
                left_up,
                down,
                right_up,
                middle_fusion,
                right_fusion,
            }
        });
        let counts = params.operator_counts();
        if counts.left_up != l || (config.fusion && (counts.down != l || counts.right_up != l)) {
            return Err(Error::Config(format!(
                "operator counts {counts:?} do not match L={l}"
            )));
        }
        Ok(params)
    }

    pub fn operator_counts(&self) -> OperatorCounts {
        OperatorCounts {
            left_up: self.left_up.len(),
            down: self.down.len(),
            right_up: self.right_up.len(),
        }
    }
}

/// Returns `[F_1^up, .., F_L^up]`.
pub fn expand(tape: &mut Tape, vars: &[Var], f: Var, p: &BimsParams) -> Result<Vec<Var>> {
    let l = p.config.levels;
    if l < 1 {
        return Err(Error::invalid("expansion needs L >= 1"));
    }
    let f0 = residual_block(tape, vars, f, &p.entry)?;

    let mut left = Vec::with_capacity(l + 1);
    left.push(f0);
    for up in &p.left_up {
        let next = up_operator(tape, vars, *left.last().unwrap(), up)?;
        left.push(next);
    }
    if !p.config.fusion {
        return Ok(left[1..].to_vec());
    }
    let eps = p.config.eps;

    let mut middle: Vec<Option<Var>> = vec![None; l];
    let mut above = left[l];
    for lvl in (0..l).rev() {
        let down = down_operator(tape, vars, above, &p.down[lvl])?;
        let m = fuse(tape, vars, &[left[lvl], down], &p.middle_fusion[lvl], eps)?;
        middle[lvl] = Some(m);
        above = m;
    }
    let middle: Vec<Var> = middle.into_iter().map(Option::unwrap).collect();

    let mut outputs = Vec::with_capacity(l);
    let mut prev = middle[0];
    for lvl in 1..=l {
        let up = up_operator(tape, vars, prev, &p.right_up[lvl - 1])?;
        let inputs = if lvl < l {
            vec![left[lvl], middle[lvl], up]
        } else {
            vec![left[lvl], up]
        };
        let r = fuse(tape, vars, &inputs, &p.right_fusion[lvl - 1], eps)?;
        outputs.push(r);
        prev = r;
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamSet;
    use crate::rng::rng_from;
    use rand::Rng;

    fn cfg(levels: usize, cin: usize, c2: usize) -> BimsConfig {
        BimsConfig {
            levels,
            in_channels: cin,
            channels: c2,
            eps: DEFAULT_FUSION_EPS,
            residual: true,
            fusion: true,
        }
    }

    fn build(c: BimsConfig, seed: u64) -> (BimsParams, ParamSet) {
        let mut rng = rng_from(seed);
        let mut b = ParamBuilder::new(&mut rng);
        let p = BimsParams::new(&mut b, c).unwrap();
        (p, b.finish())
    }

    fn random(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = rng_from(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn zero_block(params: &mut ParamSet, block: &ResidualBlockParams) {
        for l in [&block.fc1, &block.fc2] {
            params.get_mut(l.weight).data_mut().fill(0.0);
            params.get_mut(l.bias.unwrap()).data_mut().fill(0.0);
        }
    }

    #[test]
    fn residual_block_identity_and_zero() {
        let mut rng = rng_from(0);
        let mut b = ParamBuilder::new(&mut rng);
        let same = ResidualBlockParams::new(&mut b, "same", 4, 4, true);
        let proj = ResidualBlockParams::new(&mut b, "proj", 4, 3, true);
        let mut params = b.finish();
        assert!(same.proj.is_none());
        assert!(proj.proj.as_ref().unwrap().bias.is_none());
        zero_block(&mut params, &same);
        zero_block(&mut params, &proj);
        params.get_mut(proj.proj.as_ref().unwrap().weight).data_mut().fill(0.0);

        let mut t = Tape::new();
        let vars = params.bind(&mut t);
        let x = t.constant(random(1, &[8, 4]));
        let y = residual_block(&mut t, &vars, x, &same).unwrap();
        assert_eq!(t.value(y), t.value(x));
        let z = residual_block(&mut t, &vars, x, &proj).unwrap();
        assert_eq!(t.shape(z), &[8, 3]);
        assert!(t.value(z).data().iter().all(|&v| v == 0.0));
        let bad = t.constant(random(1, &[8, 5]));
        assert!(residual_block(&mut t, &vars, bad, &same).is_err());
    }

    #[test]
    fn up_operator_children_layout() {
        let (p, mut params) = build(cfg(1, 4, 3), 2);
        let up = &p.left_up[0];
        let mut t = Tape::new();
        let vars = params.bind(&mut t);
        let f = t.constant(random(3, &[5, 3]));
        let y = up_operator(&mut t, &vars, f, up).unwrap();
        assert_eq!(t.shape(y), &[10, 3]);
        let v = t.value(y);
        let max_diff = (0..5)
            .map(|m| v.row(2 * m).iter().zip(v.row(2 * m + 1)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        assert!(max_diff > 0.0);

        // zeroed inner path, projection copying the first C2 channels
        zero_block(&mut params, &up.block);
        let proj = up.block.proj.as_ref().unwrap();
        let w = params.get_mut(proj.weight);
        w.data_mut().fill(0.0);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let mut t = Tape::new();
        let vars = params.bind(&mut t);
        let f = t.constant(random(3, &[5, 3]));
        let y = up_operator(&mut t, &vars, f, up).unwrap();
        let v = t.value(y);
        for m in 0..5 {
            assert_eq!(v.row(2 * m), v.row(2 * m + 1));
            assert_eq!(v.row(2 * m), t.value(f).row(m));
        }
    }

    #[test]
    fn down_operator_grouping_and_shapes() {
        let (p, mut params) = build(cfg(1, 4, 1), 4);
        let down = &p.down[0];
        let mut t = Tape::new();
        let vars = params.bind(&mut t);
        let f = t.constant(random(5, &[6, 1]));
        let y = down_operator(&mut t, &vars, f, down).unwrap();
        assert_eq!(t.shape(y), &[3, 1]);
        let odd = t.constant(random(5, &[5, 1]));
        assert!(down_operator(&mut t, &vars, odd, down).is_err());

        // zero the inner path; proj picks a + 10·b, exposing the pairing
        zero_block(&mut params, &down.block);
        let proj = down.block.proj.as_ref().unwrap();
        params.get_mut(proj.weight).data_mut().copy_from_slice(&[1.0, 10.0]);
        let mut t = Tape::new();
        let vars = params.bind(&mut t);
        let f = t.constant(Tensor::from_rows(&[[1.0], [2.0], [3.0], [4.0]]));
        let y = down_operator(&mut t, &vars, f, down).unwrap();
        assert_eq!(t.value(y).data(), &[21.0, 43.0]);

        let (p, params) = build(cfg(1, 4, 3), 4);
        let mut t = Tape::new();
        let vars = params.bind(&mut t);
        let f = t.constant(random(5, &[7, 3]));
        let u = up_operator(&mut t, &vars, f, &p.left_up[0]).unwrap();
        let d = down_operator(&mut t, &vars, u, &p.down[0]).unwrap();
        assert_eq!(t.shape(d), t.shape(f));
    }

    #[test]
    fn fuse_equal_weights_is_mean() {
        let mut rng = rng_from(0);
        let mut b = ParamBuilder::new(&mut rng);
        let w = FusionWeights::new(&mut b, "w", 2);
        let params = b.finish();
        let mut t = Tape::new();
        let vars = params.bind(&mut t);
        let a = t.constant(random(1, &[3, 2]));
        let c = t.constant(random(2, &[3, 2]));
        let f = fuse(&mut t, &vars, &[a, c], &w, 0.0).unwrap();
        for ((o, x), y) in t.value(f).data().iter().zip(t.value(a).data()).zip(t.value(c).data()) {
            assert!((o - (x + y) / 2.0).abs() < 1e-15);
        }
        assert!(fuse(&mut t, &vars, &[a], &w, 0.0).is_err());
    }

    #[test]
    fn expand_shapes_for_various_ratios() {
        for (levels, n) in [(1usize, 6usize), (2, 8), (4, 4)] {
            let (p, params) = build(cfg(levels, 10, 5), 7);
            let counts = p.operator_counts();
            assert_eq!((counts.left_up, counts.down, counts.right_up), (levels, levels, levels));
            let mut t = Tape::new();
            let vars = params.bind(&mut t);
            let f = t.constant(random(8, &[n, 10]));
            let outs = expand(&mut t, &vars, f, &p).unwrap();
            assert_eq!(outs.len(), levels);
            for (i, o) in outs.iter().enumerate() {
                assert_eq!(t.shape(*o), &[n << (i + 1), 5]);
            }
        }
    }

    #[test]
    fn expand_full_width_shapes() {
        let (p, params) = build(cfg(2, 648, 128), 1);
        let mut t = Tape::new();
        let vars = params.bind(&mut t);
        let f = t.constant(random(2, &[256, 648]));
        let outs = expand(&mut t, &vars, f, &p).unwrap();
        assert_eq!(t.shape(outs[0]), &[512, 128]);
        assert_eq!(t.shape(outs[1]), &[1024, 128]);
    }

    #[test]
    fn single_level_reduces_to_hand_graph() {
        let (p, params) = build(cfg(1, 4, 3), 9);
        let mut t = Tape::new();
        let vars = params.bind(&mut t);
        let f = t.constant(random(10, &[5, 4]));
        let out = expand(&mut t, &vars, f, &p).unwrap()[0];

        let f0 = residual_block(&mut t, &vars, f, &p.entry).unwrap();
        let f1l = up_operator(&mut t, &vars, f0, &p.left_up[0]).unwrap();
        let d = down_operator(&mut t, &vars, f1l, &p.down[0]).unwrap();
        let m0 = fuse(&mut t, &vars, &[f0, d], &p.middle_fusion[0], p.config.eps).unwrap();
        let u = up_operator(&mut t, &vars, m0, &p.right_up[0]).unwrap();
        let hand = fuse(&mut t, &vars, &[f1l, u], &p.right_fusion[0], p.config.eps).unwrap();
        assert_eq!(t.value(out), t.value(hand));
        assert_eq!(t.shape(out), &[10, 3]);
    }

    #[test]
    fn ablations_change_graph() {
        let mut c = cfg(2, 6, 4);
        c.fusion = false;
        let (p, params) = build(c, 3);
        assert_eq!(p.operator_counts(), OperatorCounts { left_up: 2, down: 0, right_up: 0 });
        let mut t = Tape::new();
        let vars = params.bind(&mut t);
        let f = t.constant(random(1, &[4, 6]));
        let outs = expand(&mut t, &vars, f, &p).unwrap();
        assert_eq!(t.shape(outs[1]), &[16, 4]);

        let mut c = cfg(2, 6, 4);
        c.residual = false;
        let (p, _) = build(c, 3);
        assert!(p.entry.proj.is_none() && !p.entry.residual);
    }
}
