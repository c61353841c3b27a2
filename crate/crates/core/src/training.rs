//! The three training stages: pretrain the encoder/denoiser pair on the
//! noise loss, refine the GAE on frozen latents, then fine-tune everything
//! jointly. Every step draws its randomness from a stream addressed by
//! `(seed, stage, step)`, so a resumed run replays the same batches.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{ExperimentConfig, Stage, StageConfig};
use crate::dataset::{self, AttributeTuple, GroupSample, LatentStore, DATASET_LEN};
use crate::ddim::{l_simple, l_simple_given_code, NoiseDraw};
use crate::denoiser::{self, Denoiser};
use crate::encoder::{self, SemanticEncoder};
use crate::error::{Error, Result};
use crate::gae::{self, draw_donors, loss_dis, DisTerms, Gae, LatentGroups};
use crate::nn::{adam_step, AdamConfig, Checkpoint, Graph, ParamStore, Scalar, Tensor};
use crate::rng::{stream, Rng};
use crate::schedules::NoiseSchedule;

/// The three networks and the noise schedule of one experiment.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub encoder: SemanticEncoder,
    pub denoiser: Denoiser,
    pub gae: Gae,
    pub schedule: NoiseSchedule,
    pub resolution: usize,
}

impl Pipeline {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            encoder: SemanticEncoder::new(&cfg.encoder)?,
            denoiser: Denoiser::new(&cfg.denoiser)?,
            gae: Gae::new(&cfg.gae)?,
            schedule: cfg.schedule.build()?,
            resolution: cfg.resolution,
        })
    }

    /// Fresh parameters for all three networks.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = Rng::new(seed, stream::INIT);
        let mut p = ParamStore::new();
        self.encoder.init(&mut p, &mut rng)?;
        self.denoiser.init(&mut p, &mut rng)?;
        self.gae.init(&mut p, &mut rng)?;
        Ok(p)
    }

    /// The dataset images in index order.
    pub fn images<T: Scalar>(&self) -> Vec<Tensor<T>> {
        dataset::enumerate_dataset(self.resolution).into_iter().map(|(_, x)| x).collect()
    }
}

/// Parameter-name prefixes each stage optimises.
pub fn trainable_prefixes(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Pretrain => &[encoder::PREFIX, denoiser::PREFIX],
        Stage::Refine => &[gae::PREFIX],
        Stage::Joint => &[encoder::PREFIX, denoiser::PREFIX, gae::PREFIX],
    }
}

fn split_store<T: Scalar>(all: &ParamStore<T>, prefixes: &[&str]) -> (ParamStore<T>, ParamStore<T>) {
    let mut train = ParamStore::new();
    let mut frozen = ParamStore::new();
    for (name, t) in all.iter() {
        let dst = if prefixes.iter().any(|p| name.starts_with(p)) { &mut train } else { &mut frozen };
        dst.insert(name, t.clone()).expect("names are unique");
    }
    for (name, slot) in &all.adam {
        if let Some(dst) = [&mut train, &mut frozen].into_iter().find(|s| s.contains(name)) {
            dst.set_adam_slot(name, slot.clone()).expect("param exists");
        }
    }
    (train, frozen)
}

/// One logged row; terms a stage does not compute are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub l_simple: Option<f64>,
    pub l_r: Option<f64>,
    pub l_ss: Option<f64>,
    pub l_ur: Option<f64>,
    pub total: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "step,l_simple,l_r,l_ss,l_ur,total";

    pub fn csv_line(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{:.9e}",
            self.step,
            f(self.l_simple),
            f(self.l_r),
            f(self.l_ss),
            f(self.l_ur),
            self.total
        )
    }

    fn with_dis(step: usize, l_simple: Option<f64>, d: DisTerms, total: f64) -> Self {
        Self { step, l_simple, l_r: Some(d.l_r), l_ss: Some(d.l_ss), l_ur: Some(d.l_ur), total }
    }
}

pub type Grads<T> = BTreeMap<String, Tensor<T>>;

/// Noise loss and its gradients for the encoder/denoiser pair.
pub fn pretrain_grads<T: Scalar>(
    pipe: &Pipeline,
    params: &ParamStore<T>,
    x0: &Tensor<T>,
    draw: &NoiseDraw<T>,
) -> Result<(LogRow, Grads<T>)> {
    let mut g = Graph::new();
    let loss = l_simple(&mut g, &pipe.encoder, &pipe.denoiser, params, x0, draw, &pipe.schedule)?;
    let v = g.value(loss).item().as_f64();
    let grads = g.backward(loss)?.into_param_grads(params);
    Ok((LogRow { l_simple: Some(v), total: v, ..LogRow::default() }, grads))
}

/// Rows of a group-major batch: anchor, then companion 0, 1, ... per group.
fn group_rows(groups: usize, m: usize) -> (Vec<usize>, Vec<Vec<usize>>) {
    let anchors = (0..groups).map(|k| k * (m + 1)).collect();
    let companions = (0..m).map(|r| (0..groups).map(|k| k * (m + 1) + 1 + r).collect()).collect();
    (anchors, companions)
}

/// `L_simple + gamma * L_dis` over a group-major image batch; the noise
/// loss conditions on the raw semantic codes, the GAE terms reuse them.
#[allow(clippy::too_many_arguments)]
pub fn joint_grads<T: Scalar>(
    pipe: &Pipeline,
    params: &ParamStore<T>,
    x0: &Tensor<T>,
    draw: &NoiseDraw<T>,
    donors: &[Vec<usize>],
    cfg: &StageConfig,
) -> Result<(LogRow, Grads<T>)> {
    let m = pipe.gae.config.layout.len();
    let n = x0.dim(0);
    if !n.is_multiple_of(m + 1) {
        return Err(Error::InvalidArgument(format!("joint batch {n} is not a whole number of groups")));
    }
    let mut g = Graph::new();
    let xv = g.constant(x0.clone());
    let z = pipe.encoder.forward(&mut g, params, xv)?;
    let ls = l_simple_given_code(&mut g, &pipe.denoiser, params, x0, z, draw, &pipe.schedule)?;
    let (ai, ci) = group_rows(n / (m + 1), m);
    let groups = LatentGroups {
        anchors: g.gather_rows(z, &ai)?,
        companions: ci.iter().map(|rows| g.gather_rows(z, rows)).collect::<Result<_>>()?,
    };
    let codec = pipe.gae.bind(params);
    let (ld, terms) = loss_dis(&mut g, &codec, &groups, z, donors, cfg.lambda_ss, cfg.lambda_ur)?;
    let weighted = g.scale(ld, T::lit(cfg.gamma));
    let total = g.add(ls, weighted)?;
    let row = LogRow::with_dis(0, Some(g.value(ls).item().as_f64()), terms, g.value(total).item().as_f64());
    let grads = g.backward(total)?.into_param_grads(params);
    Ok((row, grads))
}

/// `L_dis` over latent groups taken from the store; anchors double as the
/// batch for the reconstruction and reassembly terms.
pub fn refine_grads<T: Scalar>(
    pipe: &Pipeline,
    params: &ParamStore<T>,
    latents: &LatentStore,
    groups: &[GroupSample],
    donors: &[Vec<usize>],
    cfg: &StageConfig,
) -> Result<(LogRow, Grads<T>)> {
    let m = pipe.gae.config.layout.len();
    let anchors: Vec<AttributeTuple> = groups.iter().map(|s| s.anchor).collect();
    let mut g = Graph::new();
    let a = g.constant(latents.batch(&anchors)?);
    let companions = (0..m)
        .map(|r| {
            let tuples: Vec<AttributeTuple> = groups.iter().map(|s| s.companions[r]).collect();
            Ok(g.constant(latents.batch(&tuples)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let lg = LatentGroups { anchors: a, companions };
    let codec = pipe.gae.bind(params);
    let (ld, terms) = loss_dis(&mut g, &codec, &lg, a, donors, cfg.lambda_ss, cfg.lambda_ur)?;
    let grads = g.backward(ld)?.into_param_grads(params);
    Ok((LogRow::with_dis(0, None, terms, terms.total), grads))
}

/// Mutable state of a stage in progress.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub stage: Stage,
    /// Completed optimiser steps.
    pub step: usize,
    pub params: ParamStore<f32>,
    pub frozen: ParamStore<f32>,
    /// Accumulated wall time of this stage across resumes.
    pub wall_seconds: f64,
    /// Accumulated on-CPU time of the training thread, where the OS reports it.
    pub cpu_seconds: f64,
}

impl TrainState {
    /// A stage starting from `all` parameters with a fresh optimiser.
    pub fn start(stage: Stage, all: &ParamStore<f32>) -> Self {
        let mut all = all.clone();
        all.reset_optimizer();
        let (params, frozen) = split_store(&all, trainable_prefixes(stage));
        Self { stage, step: 0, params, frozen, wall_seconds: 0.0, cpu_seconds: 0.0 }
    }

    /// Every parameter, trainable and frozen.
    pub fn all_params(&self) -> ParamStore<f32> {
        let mut all = self.frozen.clone();
        all.merge(self.params.clone()).expect("disjoint");
        all
    }

    pub fn to_checkpoint(&self, schedule: &NoiseSchedule) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.add_store(&self.frozen);
        ck.add_store(&self.params);
        let stage = Stage::ALL.iter().position(|s| *s == self.stage).expect("listed");
        ck.insert("meta/stage", Tensor::scalar(stage as f32));
        // split so step counts stay exact in f32
        ck.insert("meta/step", Tensor::new(&[2], vec![(self.step >> 16) as f32, (self.step & 0xffff) as f32]).expect("2"));
        ck.insert("meta/wall_seconds", Tensor::scalar(self.wall_seconds as f32));
        ck.insert("meta/cpu_seconds", Tensor::scalar(self.cpu_seconds as f32));
        let beta = schedule.beta().iter().map(|&b| b as f32).collect::<Vec<_>>();
        ck.insert("schedule/beta", Tensor::new(&[beta.len()], beta).expect("1-d"));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = |name: &str| ck.get(name).ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")));
        let stage = *Stage::ALL
            .get(meta("meta/stage")?.item() as usize)
            .ok_or_else(|| Error::Format("bad stage id".into()))?;
        let s = meta("meta/step")?.data();
        let step = ((s[0] as usize) << 16) | s[1] as usize;
        let seconds = |name: &str| ck.get(name).map(|t| t.item() as f64).unwrap_or(0.0);
        let (wall_seconds, cpu_seconds) = (seconds("meta/wall_seconds"), seconds("meta/cpu_seconds"));
        let all = ck.store("")?;
        let (params, frozen) = split_store(&all, trainable_prefixes(stage));
        Ok(Self { stage, step, params, frozen, wall_seconds, cpu_seconds })
    }
}

/// What a stage reads besides parameters.
pub struct StageData<'a> {
    pub images: &'a [Tensor<f32>],
    pub latents: Option<&'a LatentStore>,
}

/// Receives log rows and checkpoint requests while a stage runs.
pub trait Observer {
    fn on_log(&mut self, _row: &LogRow) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

/// Collects rows in memory.
impl Observer for Vec<LogRow> {
    fn on_log(&mut self, row: &LogRow) -> Result<()> {
        self.push(*row);
        Ok(())
    }
}

fn stage_stream(stage: Stage) -> u64 {
    match stage {
        Stage::Pretrain => stream::PRETRAIN,
        Stage::Refine => stream::REFINE,
        Stage::Joint => stream::JOINT,
    }
}

/// The randomness of step `step`, independent of every other step.
pub fn step_rng(seed: u64, stage: Stage, step: usize) -> Rng {
    Rng::new(seed, stage_stream(stage) + step as u64)
}

/// Anchors and group samples drawn for one step.
pub fn draw_groups(rng: &mut Rng, count: usize) -> Vec<GroupSample> {
    (0..count)
        .map(|_| {
            let anchor = AttributeTuple::from_index(rng.below(DATASET_LEN)).expect("in range");
            dataset::sample_group(anchor, rng)
        })
        .collect()
}

/// Runs one optimiser step of `state.stage` and returns its log row.
pub fn train_step(
    pipe: &Pipeline,
    cfg: &StageConfig,
    seed: u64,
    state: &mut TrainState,
    data: &StageData,
) -> Result<LogRow> {
    let mut rng = step_rng(seed, state.stage, state.step);
    let p = &state.params;
    let (mut row, grads) = match state.stage {
        Stage::Pretrain => {
            let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.below(data.images.len())).collect();
            let imgs: Vec<Tensor<f32>> = idx.iter().map(|&i| data.images[i].clone()).collect();
            let x0 = Tensor::stack(&imgs)?;
            let draw = NoiseDraw::sample(&mut rng, x0.shape(), &pipe.schedule)?;
            pretrain_grads(pipe, p, &x0, &draw)?
        }
        Stage::Refine => {
            let latents = data
                .latents
                .ok_or_else(|| Error::MissingPrerequisite("refinement needs the latent store".into()))?;
            let groups = draw_groups(&mut rng, cfg.batch);
            let donors = draw_donors(&mut rng, cfg.batch, pipe.gae.config.layout.len())?;
            refine_grads(pipe, p, latents, &groups, &donors, cfg)?
        }
        Stage::Joint => {
            let m = pipe.gae.config.layout.len();
            let groups = draw_groups(&mut rng, cfg.batch / (m + 1));
            let tuples: Vec<AttributeTuple> =
                groups.iter().flat_map(|s| std::iter::once(s.anchor).chain(s.companions)).collect();
            let x0 = dataset::batch_images(data.images, &tuples)?;
            let draw = NoiseDraw::sample(&mut rng, x0.shape(), &pipe.schedule)?;
            let donors = draw_donors(&mut rng, cfg.batch, m)?;
            joint_grads(pipe, p, &x0, &draw, &donors, cfg)?
        }
    };
    if !row.total.is_finite() {
        return Err(Error::NonFinite(format!("{} loss at step {}", state.stage.name(), state.step)));
    }
    adam_step(&mut state.params, &grads, AdamConfig::with_lr(cfg.lr))?;
    state.step += 1;
    row.step = state.step;
    Ok(row)
}

/// Steps `state` until `cfg.steps`, logging every `log_every` steps (and the
/// first and last) and checkpointing every `checkpoint_every` and at the end.
pub fn run_stage(
    pipe: &Pipeline,
    cfg: &StageConfig,
    seed: u64,
    state: &mut TrainState,
    data: &StageData,
    obs: &mut dyn Observer,
) -> Result<()> {
    let mut clock = Instant::now();
    let mut cpu = thread_cpu_seconds();
    while state.step < cfg.steps {
        let row = train_step(pipe, cfg, seed, state, data)?;
        if row.step == 1 || row.step % cfg.log_every == 0 || row.step == cfg.steps {
            obs.on_log(&row)?;
        }
        if row.step % cfg.checkpoint_every == 0 || row.step == cfg.steps {
            state.wall_seconds += clock.elapsed().as_secs_f64();
            clock = Instant::now();
            let now = thread_cpu_seconds();
            state.cpu_seconds += now - cpu;
            cpu = now;
            obs.on_checkpoint(state)?;
        }
    }
    Ok(())
}

/// User + system time of the calling thread from procfs (Linux, 100 Hz
/// ticks); 0 elsewhere.
pub fn thread_cpu_seconds() -> f64 {
    let Ok(stat) = std::fs::read_to_string("/proc/thread-self/stat") else {
        return 0.0;
    };
    // fields after the parenthesised command name; utime and stime are 14 and 15
    let rest = stat.rsplit_once(')').map_or("", |(_, r)| r);
    let f: Vec<u64> = rest.split_whitespace().skip(11).take(2).filter_map(|v| v.parse().ok()).collect();
    f.iter().sum::<u64>() as f64 / 100.0
}

/// Writes the CSV log and checkpoint of one stage under the run directory.
pub struct RunDirObserver {
    pub checkpoint_path: PathBuf,
    pub schedule: NoiseSchedule,
    log: std::fs::File,
    pub echo: bool,
}

impl RunDirObserver {
    /// Opens the log; a resumed run appends, a fresh one truncates.
    pub fn new(log_path: &Path, checkpoint_path: &Path, schedule: &NoiseSchedule, resume: bool) -> Result<Self> {
        if let Some(dir) = log_path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let fresh = !resume || !log_path.exists();
        let mut log = std::fs::OpenOptions::new()
            .create(true)
            .append(!fresh)
            .write(true)
            .truncate(fresh)
            .open(log_path)?;
        if fresh {
            writeln!(log, "{}", LogRow::CSV_HEADER)?;
        }
        Ok(Self { checkpoint_path: checkpoint_path.to_path_buf(), schedule: schedule.clone(), log, echo: false })
    }
}

impl Observer for RunDirObserver {
    fn on_log(&mut self, row: &LogRow) -> Result<()> {
        writeln!(self.log, "{}", row.csv_line())?;
        if self.echo {
            eprintln!("{}", row.csv_line());
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, state: &TrainState) -> Result<()> {
        self.log.flush()?;
        state.to_checkpoint(&self.schedule).save(&self.checkpoint_path)
    }
}

/// Loads a checkpoint that a later stage depends on.
pub fn load_prerequisite(path: &Path, what: &str) -> Result<TrainState> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!("{what} checkpoint {} not found", path.display())));
    }
    TrainState::from_checkpoint(&Checkpoint::load(path)?)
}

/// Initial state of `stage` for a run directory: the stage's own
/// checkpoint when resuming, otherwise the previous stage's output (or
/// fresh weights for pretraining, and for joint training with `from_scratch`).
pub fn prepare_stage(
    pipe: &Pipeline,
    cfg: &ExperimentConfig,
    stage: Stage,
    resume: bool,
    from_scratch: bool,
) -> Result<TrainState> {
    let own = cfg.checkpoint_path(stage);
    if resume && own.exists() {
        let st = TrainState::from_checkpoint(&Checkpoint::load(&own)?)?;
        if st.stage != stage {
            return Err(Error::Format(format!("{} holds a {} checkpoint", own.display(), st.stage.name())));
        }
        return Ok(st);
    }
    let fresh = pipe.init_params::<f32>(cfg.seed)?;
    let all = match stage {
        Stage::Pretrain => fresh.filter_prefix(encoder::PREFIX).merged_with(fresh.filter_prefix(denoiser::PREFIX)),
        Stage::Refine => {
            let prev = load_prerequisite(&cfg.checkpoint_path(Stage::Pretrain), "pretrain")?;
            prev.all_params().merged_with(fresh.filter_prefix(gae::PREFIX))
        }
        Stage::Joint if from_scratch => fresh,
        Stage::Joint => load_prerequisite(&cfg.checkpoint_path(Stage::Refine), "refine")?.all_params(),
    };
    Ok(TrainState::start(stage, &all))
}

trait MergedWith {
    fn merged_with(self, other: Self) -> Self;
}

impl MergedWith for ParamStore<f32> {
    fn merged_with(mut self, other: Self) -> Self {
        self.merge(other).expect("disjoint prefixes");
        self
    }
}
