//! End-to-end steps behind the command-line tool: dataset generation,
//! training, patch-based upsampling and evaluation.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::dataset::PatchDataset;
use crate::error::{Error, Result};
use crate::geometry::io::{read_off, read_xyz, write_xyz};
use crate::geometry::{
    default_num_seeds, extract_patches, merge_patches, normalize_to_unit_sphere, poisson_like_sample,
    random_subsample, Mesh, PointCloud, DEFAULT_OVERSAMPLE,
};
use crate::losses::{chamfer_distance, hausdorff_distance, point_to_surface};
use crate::model::Model;
use crate::nn::ParamSet;
use crate::report::MetricRow;
use crate::rng::{stream, tag};
use crate::trainer::{format_loss_csv, loss_csv_header, EpochLog, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOptions {
    pub ratio: usize,
    /// Training input patch size `N`; ground-truth patches hold `ratio·N`.
    pub patch_size: usize,
    /// Sparse test-input size; the dense clouds hold `ratio` times as many.
    pub input_points: usize,
    /// Patches per mesh; `None` picks `ceil(3·dense / (ratio·N))`.
    pub patches_per_mesh: Option<usize>,
    pub seed: u64,
}

impl GenerateOptions {
    pub fn new(ratio: usize, patch_size: usize) -> Self {
        GenerateOptions {
            ratio,
            patch_size,
            input_points: 2048,
            patches_per_mesh: None,
            seed: 0,
        }
    }

    pub fn dense_points(&self) -> usize {
        self.ratio * self.input_points
    }

    fn validate(&self) -> Result<()> {
        if crate::config::levels_of(self.ratio).is_none() {
            return Err(Error::invalid(format!("ratio must be a power of two >= 2, got {}", self.ratio)));
        }
        if self.patch_size == 0 || self.input_points < self.patch_size {
            return Err(Error::invalid(format!(
                "need 0 < patch size ({}) <= input points ({})",
                self.patch_size, self.input_points
            )));
        }
        if self.patches_per_mesh == Some(0) {
            return Err(Error::invalid("patches per mesh must be positive"));
        }
        Ok(())
    }
}

/// A held-out object: dense ground truth and a random sparse subset of it.
#[derive(Clone, Debug, PartialEq)]
pub struct TestPair {
    pub id: String,
    pub input: PointCloud,
    pub gt: PointCloud,
    /// Indices of the input points within `gt`.
    pub input_indices: Vec<usize>,
}

/// Builds normalised ground-truth training patches and one test pair per
/// mesh. Training and test clouds are independent surface samples.
pub fn generate_data(meshes: &[(String, Mesh)], opts: &GenerateOptions) -> Result<(PatchDataset, Vec<TestPair>)> {
    opts.validate()?;
    if meshes.is_empty() {
        return Err(Error::invalid("no meshes to sample"));
    }
    let gt_size = opts.ratio * opts.patch_size;
    let dense = opts.dense_points();
    let mut data = PatchDataset::new(gt_size);
    let mut tests = Vec::with_capacity(meshes.len());
    for (m, (id, mesh)) in meshes.iter().enumerate() {
        let m = m as u64;
        let cloud = poisson_like_sample(mesh, dense, DEFAULT_OVERSAMPLE, &mut stream(opts.seed, &[tag::DATA, m, 0]))?;
        let seeds = opts.patches_per_mesh.unwrap_or_else(|| default_num_seeds(dense, gt_size));
        for patch in extract_patches(&cloud, gt_size, seeds)? {
            let (normalized, _) = normalize_to_unit_sphere(&patch.cloud);
            data.push(normalized, id.clone())?;
        }
        let gt = poisson_like_sample(mesh, dense, DEFAULT_OVERSAMPLE, &mut stream(opts.seed, &[tag::DATA, m, 1]))?;
        let idx = random_subsample(gt.len(), opts.input_points, &mut stream(opts.seed, &[tag::DATA, m, 2]))?;
        tests.push(TestPair {
            id: id.clone(),
            input: gt.select(&idx),
            gt,
            input_indices: idx,
        });
    }
    data.quantize_f32()?;
    Ok((data, tests))
}

/// Every `*.off` file in `dir`, sorted by name; ids are the file stems.
pub fn load_meshes(dir: &Path) -> Result<Vec<(String, Mesh)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("off")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid(format!("{} contains no .off meshes", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            Ok((id, read_off(p)?))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct GenerateSummary {
    pub dataset_path: PathBuf,
    pub patches: usize,
    pub test_files: Vec<(PathBuf, PathBuf)>,
}

/// Writes `train.bpup` and `test/<id>_input.xyz`, `test/<id>_gt.xyz`.
pub fn cmd_generate_data(mesh_dir: &Path, out_dir: &Path, opts: &GenerateOptions) -> Result<GenerateSummary> {
    let meshes = load_meshes(mesh_dir)?;
    let (data, tests) = generate_data(&meshes, opts)?;
    let test_dir = out_dir.join("test");
    std::fs::create_dir_all(&test_dir).map_err(|e| Error::io(&test_dir, e))?;
    let dataset_path = out_dir.join("train.bpup");
    data.save(&dataset_path)?;
    let mut test_files = Vec::new();
    for t in &tests {
        let input = test_dir.join(format!("{}_input.xyz", t.id));
        let gt = test_dir.join(format!("{}_gt.xyz", t.id));
        write_xyz(&input, &t.input)?;
        write_xyz(&gt, &t.gt)?;
        test_files.push((input, gt));
    }
    Ok(GenerateSummary {
        dataset_path,
        patches: data.len(),
        test_files,
    })
}

/// Loss log path next to a checkpoint: `run.bpuc` → `run.csv`.
pub fn default_log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("csv")
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub threads: usize,
    pub log: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            threads: 1,
            log: None,
            resume: None,
        }
    }
}

/// Trains on a patch container, writing the final checkpoint, periodic
/// checkpoints (`<out>.epoch<N>`) and the loss CSV.
pub fn cmd_train(data_path: &Path, cfg: TrainConfig, out: &Path, opts: &TrainOptions) -> Result<Vec<EpochLog>> {
    let data = PatchDataset::load(data_path)?;
    let trainer = match &opts.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if ckpt.config != cfg {
                return Err(Error::Mismatch(format!(
                    "{} was trained with a different configuration",
                    p.display()
                )));
            }
            Trainer::from_checkpoint(ckpt, &data)?
        }
        None => Trainer::new(cfg, &data)?,
    };
    let mut trainer = trainer.with_threads(opts.threads)?;
    let log_path = opts.log.clone().unwrap_or_else(|| default_log_path(out));
    let levels = trainer.config().levels();
    let every = trainer.config().checkpoint_every;
    let mut csv = if opts.resume.is_some() && log_path.exists() {
        std::fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?
    } else {
        format!("{}\n", loss_csv_header(levels))
    };
    let logs = trainer.train(|t, log| {
        csv.push_str(&log.csv_row());
        csv.push('\n');
        std::fs::write(&log_path, &csv).map_err(|e| Error::io(&log_path, e))?;
        if every > 0 && (log.epoch + 1) % every == 0 && !t.finished() {
            let mut p = out.as_os_str().to_owned();
            p.push(format!(".epoch{}", log.epoch + 1));
            t.checkpoint().save(Path::new(&p))?;
        }
        Ok(())
    })?;
    trainer.checkpoint().save(out)?;
    if logs.is_empty() && !log_path.exists() {
        std::fs::write(&log_path, format_loss_csv(&[], levels)).map_err(|e| Error::io(&log_path, e))?;
    }
    Ok(logs)
}

/// Upsamples a whole object: overlapping kNN patches of the training patch
/// size, each normalised, upsampled and mapped back, then merged with FPS
/// to exactly `ratio · M` points.
pub fn upsample_cloud(
    model: &Model,
    params: &ParamSet,
    cfg: &TrainConfig,
    cloud: &PointCloud,
    threads: usize,
) -> Result<PointCloud> {
    let n = cfg.patch_size;
    if cloud.len() < n {
        return Err(Error::invalid(format!(
            "input has {} points, at least the patch size {n} is needed",
            cloud.len()
        )));
    }
    let patches = extract_patches(cloud, n, default_num_seeds(cloud.len(), n))?;
    let run = |p: &crate::geometry::Patch| -> Result<PointCloud> {
        let (local, record) = normalize_to_unit_sphere(&p.cloud);
        let out = model.predict(params, &local)?;
        Ok(record.invert(&out))
    };
    let outputs: Vec<PointCloud> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::invalid(format!("cannot start {threads} worker threads: {e}")))?;
        pool.install(|| patches.par_iter().map(run).collect::<Result<_>>())?
    } else {
        patches.iter().map(run).collect::<Result<_>>()?
    };
    merge_patches(&outputs, cfg.ratio * cloud.len())
}

/// Loads a checkpoint's model, checking the requested ratio if one is given.
pub fn load_model(checkpoint: &Path, ratio: Option<usize>) -> Result<(Model, ParamSet, TrainConfig)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    if let Some(r) = ratio {
        if r != ckpt.config.ratio {
            return Err(Error::Mismatch(format!(
                "checkpoint was trained for ratio {}, not {r}",
                ckpt.config.ratio
            )));
        }
    }
    let (model, mut params) = Model::new(&ckpt.config)?;
    params.load_from(&ckpt.params)?;
    Ok((model, params, ckpt.config))
}

pub fn cmd_upsample(checkpoint: &Path, input: &Path, out: &Path, ratio: Option<usize>, threads: usize) -> Result<PointCloud> {
    let (model, params, cfg) = load_model(checkpoint, ratio)?;
    let cloud = read_xyz(input)?;
    let up = upsample_cloud(&model, &params, &cfg, &cloud, threads)?;
    write_xyz(out, &up)?;
    Ok(up)
}

pub fn evaluate_pair(id: &str, pred: &PointCloud, gt: &PointCloud, mesh: Option<&Mesh>) -> Result<MetricRow> {
    Ok(MetricRow {
        id: id.to_string(),
        cd: chamfer_distance(pred.points(), gt.points())?,
        hd: hausdorff_distance(pred.points(), gt.points())?,
        p2f: mesh.map(|m| point_to_surface(pred.points(), m)).transpose()?,
    })
}

/// Upsamples every test input with the model and scores it against its
/// ground truth (and mesh, when given).
pub fn evaluate_model(
    model: &Model,
    params: &ParamSet,
    cfg: &TrainConfig,
    tests: &[TestPair],
    meshes: Option<&[Mesh]>,
    threads: usize,
) -> Result<Vec<MetricRow>> {
    if let Some(m) = meshes {
        if m.len() != tests.len() {
            return Err(Error::invalid(format!("{} meshes for {} test objects", m.len(), tests.len())));
        }
    }
    tests
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let pred = upsample_cloud(model, params, cfg, &t.input, threads)?;
            evaluate_pair(&t.id, &pred, &t.gt, meshes.map(|m| &m[i]))
        })
        .collect()
}

/// Scores prediction files against ground-truth files. Row ids are the
/// prediction file stems.
pub fn cmd_evaluate(preds: &[PathBuf], gts: &[PathBuf], meshes: &[PathBuf]) -> Result<Vec<MetricRow>> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::invalid(format!(
            "need matching prediction and ground-truth lists, got {} and {}",
            preds.len(),
            gts.len()
        )));
    }
    if !meshes.is_empty() && meshes.len() != preds.len() {
        return Err(Error::invalid(format!("{} meshes for {} predictions", meshes.len(), preds.len())));
    }
    let jobs: Vec<(String, PointCloud, PointCloud, Option<Mesh>)> = preds
        .iter()
        .zip(gts)
        .enumerate()
        .map(|(i, (p, g))| {
            let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let mesh = meshes.get(i).map(|m| read_off(m)).transpose()?;
            Ok((id, read_xyz(p)?, read_xyz(g)?, mesh))
        })
        .collect::<Result<_>>()?;
    jobs.par_iter()
        .map(|(id, p, g, m)| evaluate_pair(id, p, g, m.as_ref()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::norm;

    #[test]
    fn generated_patches_fit_the_unit_ball() {
        let mut opts = GenerateOptions::new(4, 256);
        opts.input_points = 1024;
        opts.patches_per_mesh = Some(8);
        let meshes = vec![("sphere".to_string(), Mesh::icosphere(3))];
        let (data, tests) = generate_data(&meshes, &opts).unwrap();
        assert_eq!(data.len(), 8);
        assert_eq!(data.points_per_patch(), 1024);
        for p in data.patches() {
            assert!(p.points().iter().all(|q| norm(*q) <= 1.0 + 1e-6));
        }
        let t = &tests[0];
        assert_eq!((t.input.len(), t.gt.len()), (1024, 4096));
        for (k, &i) in t.input_indices.iter().enumerate() {
            assert_eq!(t.input.points()[k], t.gt.points()[i]);
        }
        assert_eq!(generate_data(&meshes, &opts).unwrap().0, data);
    }

    #[test]
    fn upsample_output_size_is_exact() {
        let mut cfg = TrainConfig::desk(4, 1);
        cfg.patch_size = 16;
        cfg.extractor.k = 4;
        let (model, params) = Model::new(&cfg).unwrap();
        let cloud = crate::geometry::sample_mesh_uniform(&Mesh::icosphere(2), 50, &mut crate::rng::rng_from(0)).unwrap();
        let up = upsample_cloud(&model, &params, &cfg, &cloud, 1).unwrap();
        assert_eq!(up.len(), 200);
        assert_eq!(upsample_cloud(&model, &params, &cfg, &cloud, 3).unwrap(), up);
        let few = PointCloud::new(cloud.points()[..10].to_vec()).unwrap();
        assert!(upsample_cloud(&model, &params, &cfg, &few, 1).is_err());
    }

    #[test]
    fn evaluate_identity_is_zero() {
        let c = PointCloud::new(vec![[0.0; 3], [1.0, 2.0, 3.0]]).unwrap();
        let r = evaluate_pair("x", &c, &c, None).unwrap();
        assert_eq!((r.cd, r.hd, r.p2f), (0.0, 0.0, None));
    }
}
