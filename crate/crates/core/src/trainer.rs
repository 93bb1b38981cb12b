//! Training loop: on-the-fly pair generation, batched gradients, Adam and
//! resumable state.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, TrainerState};
use crate::config::TrainConfig;
use crate::dataset::PatchDataset;
use crate::error::{Error, Result};
use crate::geometry::{augment, normalize_to_unit_sphere, random_subsample, NormRecord, PointCloud};
use crate::losses::joint_loss;
use crate::model::Model;
use crate::nn::ParamSet;
use crate::optim::{adam_step, AdamState};
use crate::rng::{stream, tag, Rng};
use crate::tensor::{Tape, Tensor};

/// A sparse input and its dense ground truth in one normalised frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub input: PointCloud,
    pub gt: PointCloud,
    pub record: NormRecord,
}

/// Subsamples `N` of the `r·N` ground-truth points, applies one shared
/// augmentation when enabled and normalises both clouds with the ground
/// truth's record.
pub fn make_training_pair(gt_patch: &PointCloud, rng: &mut Rng, cfg: &TrainConfig) -> Result<TrainingPair> {
    if gt_patch.len() != cfg.gt_patch_size() {
        return Err(Error::Mismatch(format!(
            "ground-truth patch has {} points, config expects {}",
            gt_patch.len(),
            cfg.gt_patch_size()
        )));
    }
    let idx = random_subsample(gt_patch.len(), cfg.patch_size, rng)?;
    let mut input = gt_patch.select(&idx);
    let mut gt = gt_patch.clone();
    if cfg.augment {
        (input, gt) = augment(&input, &gt, rng, &cfg.augmentation)?;
    }
    let (gt, record) = normalize_to_unit_sphere(&gt);
    Ok(TrainingPair {
        input: record.apply(&input),
        gt,
        record,
    })
}

/// Mean losses over one epoch; `cd` holds one value per scale, coarsest first.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub joint: f64,
    pub cd: Vec<f64>,
}

pub fn loss_csv_header(levels: usize) -> String {
    let mut s = String::from("epoch,lr,joint");
    for l in 1..=levels {
        write!(s, ",cd_scale{l}").unwrap();
    }
    s
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let mut s = format!("{},{},{}", self.epoch, self.lr, self.joint);
        for c in &self.cd {
            write!(s, ",{c}").unwrap();
        }
        s
    }
}

pub fn format_loss_csv(logs: &[EpochLog], levels: usize) -> String {
    let mut s = loss_csv_header(levels);
    s.push('\n');
    for l in logs {
        s.push_str(&l.csv_row());
        s.push('\n');
    }
    s
}

struct PatchResult {
    joint: f64,
    cd: Vec<f64>,
    grads: Vec<Tensor>,
}

fn patch_step(model: &Model, params: &ParamSet, pair: &TrainingPair, cfg: &TrainConfig) -> Result<PatchResult> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let x = tape.constant(pair.input.to_tensor());
    let q = tape.constant(pair.gt.to_tensor());
    let preds = model.forward(&mut tape, &vars, x)?;
    let loss = joint_loss(&mut tape, q, &preds, &cfg.loss())?;
    let joint = tape.value(loss.total).item();
    let cd = loss.chamfer.iter().map(|&c| tape.value(c).item()).collect();
    if !joint.is_finite() {
        return Ok(PatchResult {
            joint,
            cd,
            grads: Vec::new(),
        });
    }
    let mut g = tape.backward(loss.total)?;
    let grads = vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| g.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok(PatchResult { joint, cd, grads })
}

pub struct Trainer {
    config: TrainConfig,
    model: Model,
    params: ParamSet,
    adam: AdamState,
    state: TrainerState,
    data: Vec<PointCloud>,
    pool: Option<rayon::ThreadPool>,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: &PatchDataset) -> Result<Self> {
        let (model, mut params) = Model::new(&config)?;
        params.quantize_f32();
        let adam = AdamState::new(&params);
        let state = TrainerState {
            seed: config.seed,
            cd_sums: vec![0.0; config.levels()],
            ..TrainerState::default()
        };
        Self::assemble(config, model, params, adam, state, data)
    }

    pub fn from_checkpoint(ckpt: Checkpoint, data: &PatchDataset) -> Result<Self> {
        let Checkpoint {
            config,
            params: saved,
            adam,
            state,
        } = ckpt;
        let (model, mut params) = Model::new(&config)?;
        params.load_from(&saved)?;
        Self::assemble(config, model, params, adam, state, data)
    }

    fn assemble(
        config: TrainConfig,
        model: Model,
        params: ParamSet,
        adam: AdamState,
        state: TrainerState,
        data: &PatchDataset,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::invalid("training needs at least one patch"));
        }
        if data.points_per_patch() != config.gt_patch_size() {
            return Err(Error::Mismatch(format!(
                "dataset patches hold {} points but ratio {} and patch size {} need {}",
                data.points_per_patch(),
                config.ratio,
                config.patch_size,
                config.gt_patch_size()
            )));
        }
        adam.check_matches(&params)?;
        if state.cd_sums.len() != config.levels() {
            return Err(Error::Mismatch("trainer state does not match the config".into()));
        }
        Ok(Trainer {
            config,
            model,
            params,
            adam,
            state,
            data: data.patches().to_vec(),
            pool: None,
        })
    }

    /// Runs per-patch work on `threads` workers; gradients are still reduced
    /// in patch order so results do not depend on the thread count.
    pub fn with_threads(mut self, threads: usize) -> Result<Self> {
        self.pool = if threads > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::invalid(format!("cannot start {threads} worker threads: {e}")))?;
            Some(pool)
        } else {
            None
        };
        Ok(self)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn epoch(&self) -> usize {
        self.state.epoch as usize
    }

    pub fn steps(&self) -> u64 {
        self.adam.step
    }

    pub fn finished(&self) -> bool {
        self.epoch() >= self.config.epochs
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.config.batch_size)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            state: self.state.clone(),
        }
    }

    fn pair_rng(&self, epoch: u64, patch: usize) -> Rng {
        let draw = if self.config.resample { epoch } else { u64::MAX };
        stream(self.state.seed, &[tag::PAIR, draw, patch as u64])
    }

    fn order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut stream(self.state.seed, &[tag::SHUFFLE, epoch]));
        order
    }

    /// One optimisation step on the next batch. Returns the epoch's log when
    /// this batch completes it.
    pub fn step(&mut self) -> Result<Option<EpochLog>> {
        let (epoch, batch) = (self.state.epoch, self.state.batch as usize);
        let order = self.order(epoch);
        let bs = self.config.batch_size;
        let members = &order[batch * bs..((batch + 1) * bs).min(order.len())];
        let pairs = members
            .iter()
            .map(|&i| make_training_pair(&self.data[i], &mut self.pair_rng(epoch, i), &self.config))
            .collect::<Result<Vec<_>>>()?;

        let (model, params, cfg) = (&self.model, &self.params, &self.config);
        let run = |p: &TrainingPair| patch_step(model, params, p, cfg);
        let results: Vec<PatchResult> = match &self.pool {
            Some(pool) => pool.install(|| pairs.par_iter().map(run).collect::<Result<_>>())?,
            None => pairs.iter().map(run).collect::<Result<_>>()?,
        };

        let non_finite = Error::NonFiniteLoss {
            epoch: epoch as usize,
            batch,
        };
        let n = results.len() as f64;
        let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut joint = 0.0;
        let mut cd = vec![0.0; cfg.levels()];
        for r in &results {
            if !r.joint.is_finite() {
                return Err(non_finite);
            }
            joint += r.joint;
            for (a, b) in cd.iter_mut().zip(&r.cd) {
                *a += b;
            }
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
        for g in &mut grads {
            for v in g.data_mut() {
                *v /= n;
            }
            if !g.is_finite() {
                return Err(non_finite);
            }
        }

        let lr = cfg.lr_at(epoch as usize);
        adam_step(&mut self.params, &grads, &mut self.adam, lr)?;
        // Checkpoints store f32, so the live state is kept at that precision
        // to make resuming from disk exact.
        self.params.quantize_f32();
        self.adam.quantize_f32();
        if !self.params.tensors().iter().all(Tensor::is_finite) {
            return Err(non_finite);
        }

        let st = &mut self.state;
        st.batches_done += 1;
        st.joint_sum += joint / n;
        for (s, c) in st.cd_sums.iter_mut().zip(&cd) {
            *s += c / n;
        }
        st.batch += 1;
        if st.batch as usize == self.data.len().div_ceil(bs) {
            let done = st.batches_done as f64;
            let log = EpochLog {
                epoch: epoch as usize,
                lr,
                joint: st.joint_sum / done,
                cd: st.cd_sums.iter().map(|s| s / done).collect(),
            };
            st.epoch += 1;
            st.batch = 0;
            st.batches_done = 0;
            st.joint_sum = 0.0;
            st.cd_sums.iter_mut().for_each(|s| *s = 0.0);
            return Ok(Some(log));
        }
        Ok(None)
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        loop {
            if let Some(log) = self.step()? {
                return Ok(log);
            }
        }
    }

    /// Trains until `epochs` is reached, calling `on_epoch` after each epoch.
    pub fn train(&mut self, mut on_epoch: impl FnMut(&Trainer, &EpochLog) -> Result<()>) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while !self.finished() {
            let log = self.run_epoch()?;
            on_epoch(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }
}
