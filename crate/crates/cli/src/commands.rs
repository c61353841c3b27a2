use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dgae_core::config::{ExperimentConfig, Stage};
use dgae_core::dataset::{self, AttributeTuple, LatentStore, DATASET_LEN};
use dgae_core::error::Error;
use dgae_core::eval::{evaluate, EvalPlan, EvalReport, Model, NoiseSource};
use dgae_core::nn::{ParamStore, Tensor};
use dgae_core::training::{self, Pipeline, RunDirObserver, StageData};

use crate::args::{Common, NoiseArg, StageArg};
use crate::images;

/// Loads the configuration and applies command-line overrides.
pub fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(n) = common.t_sample {
        cfg.eval.sample_steps = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &ExperimentConfig, default: &str) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| cfg.run_dir.join(default));
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(dir)
}

/// Renders `f(i)` for `0..n` on up to `threads` workers, in index order.
pub fn par_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let threads = threads.clamp(1, n.max(1));
    let chunk = n.div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|k| {
                let f = &f;
                s.spawn(move || (k * chunk..((k + 1) * chunk).min(n)).map(f).collect::<Vec<T>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

pub fn dataset_file_name(t: &AttributeTuple) -> String {
    format!("{:03}_id{}_bg{}_pose{}.png", t.index(), t.identity, t.background, t.pose)
}

pub fn cmd_dataset(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common, &cfg, "dataset")?;
    let res = cfg.resolution;
    let written = par_map(DATASET_LEN, crate::worker_threads(), |i| -> Result<()> {
        let t = AttributeTuple::from_index(i)?;
        images::save_png(&dir.join(dataset_file_name(&t)), &dataset::render(&t, res))
    });
    written.into_iter().collect::<Result<Vec<()>>>()?;
    let mut manifest = String::from("index,identity,background,pose,file\n");
    for i in 0..DATASET_LEN {
        let t = AttributeTuple::from_index(i)?;
        manifest += &format!("{i},{},{},{},{}\n", t.identity, t.background, t.pose, dataset_file_name(&t));
    }
    std::fs::write(dir.join("manifest.csv"), manifest)?;
    println!("wrote {DATASET_LEN} images and manifest.csv to {}", dir.display());
    Ok(())
}

fn stage_of(s: StageArg) -> Stage {
    match s {
        StageArg::Pretrain => Stage::Pretrain,
        StageArg::Refine => Stage::Refine,
        StageArg::Joint => Stage::Joint,
    }
}

/// Encodes the grid with the pretrained encoder and stores the codes.
pub fn build_latents(cfg: &ExperimentConfig, pipe: &Pipeline) -> Result<LatentStore> {
    let pre = training::load_prerequisite(&cfg.checkpoint_path(Stage::Pretrain), "pretrain")?;
    let store = LatentStore::build(&pipe.encoder, &pre.all_params(), &dataset::enumerate_dataset(cfg.resolution), 32)?;
    store.save(&cfg.latent_store_path())?;
    Ok(store)
}

pub fn cmd_train(common: &Common, stage: StageArg, resume: bool, from_scratch: bool) -> Result<()> {
    let stage = stage_of(stage);
    let mut cfg = load_config(common)?;
    if from_scratch && stage != Stage::Joint {
        bail!(Error::InvalidArgument("--from-scratch applies to the joint stage only".into()));
    }
    if let Some(n) = common.steps {
        cfg.stage_mut(stage).steps = n;
    }
    std::fs::create_dir_all(&cfg.run_dir)?;
    let pipe = Pipeline::new(&cfg)?;
    let mut state = training::prepare_stage(&pipe, &cfg, stage, resume, from_scratch)?;
    let images = pipe.images::<f32>();
    let latents = match stage {
        Stage::Refine if resume && cfg.latent_store_path().exists() => Some(LatentStore::load(&cfg.latent_store_path())?),
        Stage::Refine => Some(build_latents(&cfg, &pipe)?),
        _ => None,
    };
    let data = StageData { images: &images, latents: latents.as_ref() };
    let resumed = state.step > 0;
    let mut obs = RunDirObserver::new(&cfg.log_path(stage), &cfg.checkpoint_path(stage), &pipe.schedule, resumed)?;
    obs.echo = true;
    let scfg = *cfg.stage(stage);
    eprintln!("{}: steps {}..{} (seed {})", stage.name(), state.step, scfg.steps, cfg.seed);
    training::run_stage(&pipe, &scfg, cfg.seed, &mut state, &data, &mut obs)?;
    if state.step == scfg.steps && !cfg.checkpoint_path(stage).exists() {
        // nothing ran (already complete) but the checkpoint must exist
        obs_checkpoint(&state, &pipe, &cfg.checkpoint_path(stage))?;
    }
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(cfg.run_dir.join("timing.csv"))?;
    writeln!(f, "{},{},{:.1},{:.1}", stage.name(), state.step, state.wall_seconds, state.cpu_seconds)?;
    println!(
        "{} done at step {} ({:.0} s wall, {:.0} s cpu); checkpoint {}",
        stage.name(),
        state.step,
        state.wall_seconds,
        state.cpu_seconds,
        cfg.checkpoint_path(stage).display()
    );
    Ok(())
}

fn obs_checkpoint(state: &training::TrainState, pipe: &Pipeline, path: &Path) -> Result<()> {
    state.to_checkpoint(&pipe.schedule).save(path)?;
    Ok(())
}

/// Parameters of the finished (joint) stage.
pub fn load_trained(cfg: &ExperimentConfig) -> Result<ParamStore<f32>> {
    Ok(training::load_prerequisite(&cfg.checkpoint_path(Stage::Joint), "joint")?.all_params())
}

/// An image argument: a PNG path or `tuple:ID,BG,POSE`.
pub fn load_image(spec: &str, resolution: usize) -> Result<Tensor<f32>> {
    let img = if let Some(t) = spec.strip_prefix("tuple:") {
        let v: Vec<usize> = t
            .split(',')
            .map(|x| x.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidArgument(format!("bad tuple `{spec}`")))?;
        if v.len() != 3 {
            bail!(Error::InvalidArgument(format!("tuple `{spec}` needs three indices")));
        }
        dataset::render(&AttributeTuple::new(v[0], v[1], v[2])?, resolution)
    } else {
        images::load_png(Path::new(spec))?
    };
    if img.shape() != [3, resolution, resolution] {
        bail!(Error::InvalidArgument(format!("{spec}: expected a {resolution}x{resolution} image")));
    }
    Ok(img)
}

fn batch1(img: &Tensor<f32>) -> Result<Tensor<f32>> {
    Ok(Tensor::stack(std::slice::from_ref(img))?)
}

fn unbatch(x: &Tensor<f32>, i: usize) -> Tensor<f32> {
    x.narrow_batch(i, i + 1).reshape(&x.shape()[1..]).expect("same size")
}

struct Loaded {
    cfg: ExperimentConfig,
    pipe: Pipeline,
    params: ParamStore<f32>,
}

fn load_model(common: &Common) -> Result<Loaded> {
    let cfg = load_config(common)?;
    let pipe = Pipeline::new(&cfg)?;
    let params = load_trained(&cfg)?;
    Ok(Loaded { cfg, pipe, params })
}

/// Rows per attribute: `a`, `b`, `a` with `b`'s attribute, `b` with `a`'s.
pub fn cmd_swap(common: &Common, a: &str, b: &str, attr: Option<&str>) -> Result<PathBuf> {
    let l = load_model(common)?;
    let model = Model::new(&l.pipe, &l.params, l.cfg.eval.sample_steps)?;
    let layout = &l.pipe.gae.config.layout;
    let names: Vec<String> = match attr {
        Some(n) => {
            layout.index_of(n)?;
            vec![n.to_string()]
        }
        None => layout.attributes().iter().map(|a| a.name.clone()).collect(),
    };
    let (ia, ib) = (load_image(a, l.cfg.resolution)?, load_image(b, l.cfg.resolution)?);
    let mut rows = Vec::new();
    for name in &names {
        // batch row 0: a receives b's slice; row 1: b receives a's
        let xa = Tensor::stack(&[ia.clone(), ib.clone()])?;
        let xb = Tensor::stack(&[ib.clone(), ia.clone()])?;
        let donors: BTreeMap<String, Tensor<f32>> = layout
            .attributes()
            .iter()
            .map(|at| (at.name.clone(), if &at.name == name { xb.clone() } else { xa.clone() }))
            .collect();
        let out = model.manipulate(&donors, NoiseSource::Inferred)?;
        rows.push(vec![Some(ia.clone()), Some(ib.clone()), Some(unbatch(&out, 0)), Some(unbatch(&out, 1))]);
    }
    let path = out_dir(common, &l.cfg, "swap")?.join("swap.png");
    images::save_grid(&path, &rows)?;
    println!("{}", path.display());
    Ok(path)
}

/// One row: each donor in layout order, then the recombined image.
pub fn cmd_recombine(common: &Common, donor_args: &[String], noise: NoiseArg) -> Result<PathBuf> {
    let l = load_model(common)?;
    let model = Model::new(&l.pipe, &l.params, l.cfg.eval.sample_steps)?;
    let mut donors = BTreeMap::new();
    for d in donor_args {
        let (name, spec) = d
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("donor `{d}` is not NAME=IMAGE")))?;
        l.pipe.gae.config.layout.index_of(name)?;
        donors.insert(name.to_string(), batch1(&load_image(spec, l.cfg.resolution)?)?);
    }
    let source = match noise {
        NoiseArg::Inferred => NoiseSource::Inferred,
        NoiseArg::Random => NoiseSource::Random(l.cfg.seed),
    };
    let out = model.manipulate(&donors, source)?;
    let mut row: Vec<Option<Tensor<f32>>> = l
        .pipe
        .gae
        .config
        .layout
        .attributes()
        .iter()
        .map(|a| donors.get(&a.name).map(|x| unbatch(x, 0)))
        .collect();
    row.push(Some(unbatch(&out, 0)));
    let path = out_dir(common, &l.cfg, "recombine")?.join("recombine.png");
    images::save_grid(&path, &[row])?;
    println!("{}", path.display());
    Ok(path)
}

/// `a`, the `frames` interior frames, then `b`, in one row.
pub fn cmd_interpolate(common: &Common, a: &str, b: &str, frames: usize, attr: Option<&str>) -> Result<PathBuf> {
    let l = load_model(common)?;
    let model = Model::new(&l.pipe, &l.params, l.cfg.eval.sample_steps)?;
    let (ia, ib) = (load_image(a, l.cfg.resolution)?, load_image(b, l.cfg.resolution)?);
    let alphas: Vec<f64> = (1..=frames).map(|i| i as f64 / (frames + 1) as f64).collect();
    let seq = model.interpolate(&ia, &ib, &alphas, attr)?;
    let mut row = vec![Some(ia)];
    row.extend(seq.into_iter().map(Some));
    row.push(Some(ib));
    let path = out_dir(common, &l.cfg, "interpolate")?.join("interpolate.png");
    images::save_grid(&path, &[row])?;
    println!("{}", path.display());
    Ok(path)
}

/// Writes `metrics.csv` and `perplexity.csv`.
pub fn cmd_eval(common: &Common) -> Result<EvalReport> {
    let l = load_model(common)?;
    let model = Model::new(&l.pipe, &l.params, l.cfg.eval.sample_steps)?;
    let ladders: Vec<usize> = [10, 50, 100].into_iter().filter(|&t| t <= l.pipe.schedule.steps()).collect();
    let plan = EvalPlan { cfg: l.cfg.eval, seed: l.cfg.seed, ppl_ladders: ladders };
    let report = evaluate(&model, &plan)?;
    let dir = out_dir(common, &l.cfg, "eval")?;
    std::fs::write(dir.join("metrics.csv"), report.metrics_csv())?;
    std::fs::write(dir.join("perplexity.csv"), report.perplexity.to_csv())?;
    print!("{}", report.metrics_csv());
    print!("{}", report.perplexity.to_csv());
    Ok(report)
}
