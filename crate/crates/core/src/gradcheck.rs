//! Central finite-difference checks of every differentiable operation and of
//! the composed training loss.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng as _;

use crate::bims::{down_operator, expand, residual_block, up_operator, BimsConfig, BimsParams,
    DownOpParams, ResidualBlockParams, UpOpParams, DEFAULT_FUSION_EPS};
use crate::config::TrainConfig;
use crate::error::Result;
use crate::extractor::{dense_edge_conv_unit, extract_features, DenseUnitParams, ExtractorConfig, ExtractorParams};
use crate::losses::{joint_loss, reconstruct, HeadParams};
use crate::model::Model;
use crate::nn::{ParamBuilder, ParamSet};
use crate::rng::{rng_from, stream, Rng};
use crate::tensor::{Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-7;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// A scalar function of some leaf tensors.
pub struct Case {
    pub name: &'static str,
    pub leaves: Vec<Tensor>,
    build: Build,
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seeds: Vec<u64>,
    /// Elements probed per leaf tensor; smaller tensors are probed fully.
    pub samples_per_tensor: usize,
    /// Test hook: perturbs the analytic gradient of the named case.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seeds: (0..5).collect(),
            samples_per_tensor: 6,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Probes whose `±h` evaluations took different discrete branches.
    pub skipped: usize,
    pub passed: bool,
}

fn random(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output element matters.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let r = tape.constant(random(&mut rng_from(seed ^ 0x9e37), &shape, 1.0));
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

fn case(name: &'static str, leaves: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        leaves,
        build: Box::new(build),
    }
}

/// Leaves are the module's parameters followed by `extra` inputs.
fn module_case<M: 'static>(
    name: &'static str,
    seed: u64,
    make: impl FnOnce(&mut ParamBuilder<'_>) -> M,
    extra: Vec<Tensor>,
    run: impl Fn(&mut Tape, &[Var], &M, &[Var]) -> Result<Var> + 'static,
) -> Case {
    let mut rng = stream(seed, &[7, name.len() as u64]);
    let mut b = ParamBuilder::new(&mut rng);
    let module = make(&mut b);
    let params: ParamSet = b.finish();
    let np = params.len();
    // Random biases so relu patterns are generic.
    let mut leaves: Vec<Tensor> = params.tensors().to_vec();
    let mut brng = rng_from(seed ^ 0x51);
    for (t, n) in leaves.iter_mut().zip(params.names()) {
        if n.ends_with("bias") {
            *t = random(&mut brng, t.shape(), 0.3);
        }
    }
    leaves.extend(extra);
    case(name, leaves, move |t, v| {
        let out = run(t, &v[..np], &module, &v[np..])?;
        project(t, out, seed)
    })
}

/// Every registered check, each differentiable operation exactly once.
pub fn registry(seed: u64) -> Vec<Case> {
    let mut rng = stream(seed, &[0x6772]);
    let r = &mut rng;
    let mut cases = vec![
        case("linear", vec![random(r, &[5, 4], 1.0), random(r, &[4, 3], 1.0), random(r, &[3], 1.0)], move |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            project(t, y, seed)
        }),
        case("relu", vec![random(r, &[6, 4], 1.0)], move |t, v| {
            let y = t.relu(v[0]);
            project(t, y, seed)
        }),
        case("add", vec![random(r, &[4, 3], 1.0), random(r, &[4, 3], 1.0)], move |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, seed)
        }),
        case("sub", vec![random(r, &[4, 3], 1.0), random(r, &[4, 3], 1.0)], move |t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y, seed)
        }),
        case("mul", vec![random(r, &[4, 3], 1.0), random(r, &[4, 3], 1.0)], move |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, seed)
        }),
        case("scale", vec![random(r, &[4, 3], 1.0)], move |t, v| {
            let y = t.scale(v[0], -1.7);
            project(t, y, seed)
        }),
        case("sum", vec![random(r, &[4, 3], 1.0)], move |t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.sum(y))
        }),
        case("concat_channels", vec![random(r, &[4, 2], 1.0), random(r, &[4, 3], 1.0)], move |t, v| {
            let y = t.concat_channels(v[0], v[1])?;
            project(t, y, seed)
        }),
        case("gather_rows", vec![random(r, &[5, 3], 1.0)], move |t, v| {
            let idx = vec![vec![0, 2, 2], vec![4, 1, 0]];
            let y = t.gather_rows(v[0], &idx)?;
            project(t, y, seed)
        }),
        case("reduce_max_axis1", vec![random(r, &[4, 5, 3], 1.0)], move |t, v| {
            let y = t.reduce_max_axis1(v[0])?;
            project(t, y, seed)
        }),
        case("repeat_rows", vec![random(r, &[3, 4], 1.0)], move |t, v| {
            let y = t.repeat_rows(v[0], 2)?;
            project(t, y, seed)
        }),
        case("group_channels", vec![random(r, &[6, 2], 1.0)], move |t, v| {
            let y = t.group_channels(v[0], 2)?;
            project(t, y, seed)
        }),
        case(
            "fuse",
            vec![random(r, &[4, 3], 1.0), random(r, &[4, 3], 1.0), random(r, &[4, 3], 1.0), Tensor::vector(vec![0.7, 1.3, 0.4])],
            move |t, v| {
                let y = t.fuse(&v[..3], v[3], DEFAULT_FUSION_EPS)?;
                project(t, y, seed)
            },
        ),
        case("chamfer", vec![random(r, &[7, 3], 1.0), random(r, &[9, 3], 1.0)], |t, v| t.chamfer(v[0], v[1])),
        case("repulsion", vec![random(r, &[10, 3], 0.5)], |t, v| t.repulsion(v[0], 3, 0.5)),
    ];

    let x = random(r, &[6, 5], 1.0);
    cases.push(module_case(
        "residual_block",
        seed,
        |b| ResidualBlockParams::new(b, "block", 5, 4, true),
        vec![x],
        |t, v, m, x| residual_block(t, v, x[0], m),
    ));
    let x = random(r, &[4, 4], 1.0);
    cases.push(module_case(
        "up_operator",
        seed,
        |b| UpOpParams {
            block: ResidualBlockParams::new(b, "up", 5, 4, true),
        },
        vec![x],
        |t, v, m, x| up_operator(t, v, x[0], m),
    ));
    let x = random(r, &[6, 4], 1.0);
    cases.push(module_case(
        "down_operator",
        seed,
        |b| DownOpParams {
            block: ResidualBlockParams::new(b, "down", 8, 4, true),
        },
        vec![x],
        |t, v, m, x| down_operator(t, v, x[0], m),
    ));
    let x = random(r, &[9, 3], 1.0);
    cases.push(module_case(
        "dense_edge_conv_unit",
        seed,
        |b| DenseUnitParams::new(b, 3, 6),
        vec![x],
        |t, v, m, x| dense_edge_conv_unit(t, v, x[0], 4, m),
    ));
    let x = random(r, &[10, 3], 1.0);
    cases.push(module_case(
        "extract_features",
        seed,
        |b| {
            ExtractorParams::new(
                b,
                ExtractorConfig {
                    entry_width: 4,
                    growth: 6,
                    units: 2,
                    k: 4,
                },
            )
            .unwrap()
        },
        vec![x],
        |t, v, m, x| extract_features(t, v, x[0], m),
    ));
    let x = random(r, &[3, 5], 1.0);
    cases.push(module_case(
        "expand",
        seed,
        |b| {
            BimsParams::new(
                b,
                BimsConfig {
                    levels: 2,
                    in_channels: 5,
                    channels: 4,
                    eps: DEFAULT_FUSION_EPS,
                    residual: true,
                    fusion: true,
                },
            )
            .unwrap()
        },
        vec![x],
        |t, v, m, x| {
            let outs = expand(t, v, x[0], m)?;
            let mut acc = project(t, outs[0], 1)?;
            for (i, &o) in outs.iter().enumerate().skip(1) {
                let p = project(t, o, 1 + i as u64)?;
                acc = t.add(acc, p)?;
            }
            Ok(acc)
        },
    ));
    let x = random(r, &[6, 5], 1.0);
    cases.push(module_case(
        "reconstruct",
        seed,
        |b| HeadParams::new(b, "head", 5, 4),
        vec![x],
        |t, v, m, x| reconstruct(t, v, x[0], m),
    ));
    cases.push(joint_loss_case(seed));
    cases
}

/// The full network and training loss at desk widths on an 8-point patch.
fn joint_loss_case(seed: u64) -> Case {
    let mut cfg = TrainConfig::desk(4, 1);
    cfg.patch_size = 8;
    cfg.extractor.k = 4;
    cfg.seed = seed;
    let (model, params) = Model::new(&cfg).expect("desk config is valid");
    let np = params.len();
    let mut rng = stream(seed, &[0x6a6c]);
    let mut leaves = params.tensors().to_vec();
    for (t, n) in leaves.iter_mut().zip(params.names()) {
        if n.ends_with("bias") {
            *t = random(&mut rng, t.shape(), 0.1);
        }
    }
    leaves.push(random(&mut rng, &[8, 3], 1.0));
    let gt = random(&mut rng, &[32, 3], 1.0);
    let loss = cfg.loss();
    case("joint_loss", leaves, move |t, v| {
        let preds = model.forward(t, &v[..np], v[np])?;
        let q = t.constant(gt.clone());
        Ok(joint_loss(t, q, &preds, &loss)?.total)
    })
}

/// `|a - n| / max(|a|, |n|, ABS_TOL / REL_TOL)`: below the floor the
/// absolute tolerance governs, so `rel <= REL_TOL` is the whole pass rule.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(ABS_TOL / REL_TOL);
    (analytic - numeric).abs() / scale
}

fn evaluate(c: &Case, leaves: &[Tensor]) -> Result<(f64, Option<u64>)> {
    let mut t = Tape::with_fingerprint();
    let vars: Vec<Var> = leaves.iter().map(|l| t.param(l.clone())).collect();
    let out = (c.build)(&mut t, &vars)?;
    Ok((t.value(out).item(), t.fingerprint()))
}

/// Compares analytic gradients with central differences on sampled elements.
pub fn check_case(c: &Case, samples: usize, seed: u64, corrupt: bool) -> Result<OpReport> {
    let mut t = Tape::with_fingerprint();
    let vars: Vec<Var> = c.leaves.iter().map(|l| t.param(l.clone())).collect();
    let out = (c.build)(&mut t, &vars)?;
    let base_fp = t.fingerprint();
    let grads = t.backward(out)?;
    let mut rng = stream(seed, &[0x7072, c.name.len() as u64]);
    let (mut max_rel, mut checked, mut skipped, mut passed) = (0.0f64, 0, 0, true);
    let mut leaves = c.leaves.clone();
    for (li, &v) in vars.iter().enumerate() {
        let n = leaves[li].numel();
        let g = grads.get_or_zeros(v, leaves[li].shape());
        let picks: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            sample(&mut rng, n, samples).into_vec()
        };
        for j in picks {
            let x0 = leaves[li].data()[j];
            leaves[li].data_mut()[j] = x0 + STEP;
            let (fp, fp_plus) = evaluate(c, &leaves)?;
            leaves[li].data_mut()[j] = x0 - STEP;
            let (fm, fp_minus) = evaluate(c, &leaves)?;
            leaves[li].data_mut()[j] = x0;
            if fp_plus != base_fp || fp_minus != base_fp {
                skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * STEP);
            let mut analytic = g.data()[j];
            if corrupt {
                analytic = analytic * 1.01 + 1e-3;
            }
            checked += 1;
            let rel = relative_error(analytic, numeric);
            max_rel = max_rel.max(rel);
            if rel > REL_TOL {
                passed = false;
            }
        }
    }
    Ok(OpReport {
        name: c.name,
        max_rel_error: max_rel,
        checked,
        skipped,
        passed: passed && checked > 0,
    })
}

/// Runs every registered case for every seed; one merged report per case.
pub fn run(opts: &GradcheckOptions) -> Result<Vec<OpReport>> {
    let mut merged: Vec<OpReport> = Vec::new();
    for &seed in &opts.seeds {
        for (i, c) in registry(seed).iter().enumerate() {
            let corrupt = opts.corrupt.as_deref() == Some(c.name);
            let r = check_case(c, opts.samples_per_tensor, seed, corrupt)?;
            match merged.get_mut(i) {
                Some(m) => {
                    m.max_rel_error = m.max_rel_error.max(r.max_rel_error);
                    m.checked += r.checked;
                    m.skipped += r.skipped;
                    m.passed &= r.passed;
                }
                None => merged.push(r),
            }
        }
    }
    Ok(merged)
}

pub fn format_report(reports: &[OpReport]) -> String {
    let mut s = String::from("op\tmax_rel_error\tchecked\tskipped\tstatus\n");
    for r in reports {
        writeln!(
            s,
            "{}\t{:.2e}\t{}\t{}\t{}",
            r.name,
            r.max_rel_error,
            r.checked,
            r.skipped,
            if r.passed { "ok" } else { "FAIL" }
        )
        .unwrap();
    }
    s
}
