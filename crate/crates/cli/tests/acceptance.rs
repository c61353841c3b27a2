//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p dgae-cli --test acceptance`; numeric arguments
//! (`-- 1 3 6`) select criteria. The toy-run criterion reads the artifacts
//! that `dgae train` leaves under `runs/toy` (see `configs/toy.json`).

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use dgae_cli::args::{Common as CliCommon, NoiseArg, StageArg};
use dgae_cli::commands;
use dgae_core::config::{ExperimentConfig, Stage, StageConfig};
use dgae_core::dataset::{self, sample_group, AttributeTuple, DATASET_LEN};
use dgae_core::ddim::{ddim_step, invert_step, predict_x0, NoiseDraw};
use dgae_core::denoiser::{Denoiser, DenoiserConfig};
use dgae_core::encoder::{EncoderConfig, SemanticEncoder};
use dgae_core::eval::{evaluate, ppl, ppl_along, EvalPlan, EvalReport, Model};
use dgae_core::gae::{
    draw_donors, loss_dis, loss_r, loss_ss, loss_ur, Attribute, AttributeLayout, Gae, GaeConfig, IdentityCodec,
    LatentGroups,
};
use dgae_core::nn::checkpoint::Checkpoint;
use dgae_core::nn::gradcheck::numeric_grad;
use dgae_core::nn::{adam_step, AdamConfig, Graph, ParamStore, Tensor, Var};
use dgae_core::rng::{stream, Rng};
use dgae_core::schedules::NoiseSchedule;
use dgae_core::training::{self, pretrain_grads, step_rng, train_step, Pipeline, StageData, TrainState};

type Outcome = Result<String, String>;
type Criterion = (usize, &'static str, fn() -> Outcome);

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Collects failed checks; the criterion passes when none failed.
#[derive(Default)]
struct Checks {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Checks {
    fn require(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failures.push(what.into());
        }
    }

    fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }

    fn finish(self) -> Outcome {
        if self.failures.is_empty() {
            Ok(self.notes.join("; "))
        } else {
            Err(self.failures.join("; "))
        }
    }
}

// ---------------------------------------------------------------- 1

fn sample_moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

fn diffusion_math() -> Outcome {
    let mut c = Checks::default();
    let betas: Vec<f64> = (0..10).map(|i| 0.02 + 0.03 * i as f64).collect();
    let sched = NoiseSchedule::from_betas(betas.clone()).map_err(|e| e.to_string())?;

    // composition of single forward steps against the closed-form marginal
    const N: usize = 100_000;
    let x0 = 0.8;
    let mut x: Tensor<f64> = Tensor::full(&[N], x0);
    let mut rng = Rng::new(11, 0);
    let mut ab = 1.0;
    let mut worst: f64 = 0.0;
    for (t, &beta) in betas.iter().enumerate() {
        ab *= 1.0 - beta;
        let eps: Tensor<f64> = rng.normal_tensor(&[N]);
        x = sched.forward_step(&x, t as i64, &eps).map_err(|e| e.to_string())?;
        let (m, v) = sample_moments(x.data());
        let (mean, var) = (ab.sqrt() * x0, 1.0 - ab);
        let zm = (m - mean).abs() / (var / N as f64).sqrt();
        let zv = (v - var).abs() / (var * (2.0 / (N as f64 - 1.0)).sqrt());
        worst = worst.max(zm).max(zv);
        c.require(zm < 3.0 && zv < 3.0, format!("t={t}: mean {m:.5} vs {mean:.5}, var {v:.5} vs {var:.5}"));
    }
    c.note(format!("moments within {worst:.2} sigma at T=10"));

    // exact-noise DDIM step lands on x0
    let long = NoiseSchedule::linear(1000, 1e-4, 0.02).map_err(|e| e.to_string())?;
    let mut rng = Rng::new(12, 0);
    let x0: Tensor<f64> = rng.uniform_tensor(&[4, 3, 8, 8], -1.0, 1.0);
    let eps: Tensor<f64> = rng.normal_tensor(&[4, 3, 8, 8]);
    let mut worst: f64 = 0.0;
    for t in [0i64, 1, 17, 250, 500, 999] {
        let xt = long.q_sample(&x0, t, &eps).map_err(|e| e.to_string())?;
        let direct = ddim_step(&long, &xt, t, -1, &eps).map_err(|e| e.to_string())?;
        let via_x0 = predict_x0(&xt, &eps, long.alpha_bar()[t as usize]).map_err(|e| e.to_string())?;
        worst = worst.max(direct.max_abs_diff(&x0)).max(via_x0.max_abs_diff(&x0));
        if t > 0 {
            // through an intermediate rung
            let mid = ddim_step(&long, &xt, t, t / 2, &eps).map_err(|e| e.to_string())?;
            let end = ddim_step(&long, &mid, t / 2, -1, &eps).map_err(|e| e.to_string())?;
            worst = worst.max(end.max_abs_diff(&x0));
        }
    }
    c.require(worst < 1e-5, format!("exact-noise recovery error {worst:.2e}"));
    c.note(format!("exact-noise recovery {worst:.1e}"));

    // ascent then descent with the same noise is the identity
    let mut rng = Rng::new(13, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let t = rng.below(1000) as i64 - 1;
        let t_next = t + 1 + rng.below((999 - t) as usize) as i64;
        let x: Tensor<f64> = rng.normal_tensor(&[2, 3, 4, 4]);
        let e: Tensor<f64> = rng.normal_tensor(&[2, 3, 4, 4]);
        let up = invert_step(&long, &x, t, t_next, &e).map_err(|e| e.to_string())?;
        let down = ddim_step(&long, &up, t_next, t, &e).map_err(|e| e.to_string())?;
        let scale = x.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(down.max_abs_diff(&x) / scale);
    }
    c.require(worst < 1e-6, format!("step pair inverse error {worst:.2e}"));
    c.note(format!("step pair inverse {worst:.1e}"));
    c.finish()
}

// ---------------------------------------------------------------- 2

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-3;
/// Rounding noise of a central difference on these losses (|L| ~ 10, h = 1e-5).
const FD_NOISE: f64 = 1e-7;

fn grad_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    let peak = |t: &Tensor<f64>| t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak(analytic) < 1e-12 {
        // identically zero (a bias feeding a normalisation): the numeric
        // gradient must be pure noise; scaled so noise-level passes
        return peak(numeric) / FD_NOISE * FD_TOL;
    }
    analytic.max_abs_diff(numeric) / peak(analytic).max(peak(numeric))
}

/// Worst relative error of d(loss)/d(input) over all inputs of a graph
/// whose loss is a fixed random projection of `build`'s output.
fn input_grad_error(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let shape = {
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vs);
        g.shape(out).to_vec()
    };
    let proj: Tensor<f64> = Rng::new(77, 0).normal_tensor(&shape);
    let project = |g: &mut Graph<f64>, out: Var| {
        let p = g.constant(proj.clone());
        let m = g.mul(out, p).unwrap();
        g.sum(m)
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vs);
    let loss = project(&mut g, out);
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vs[k]).expect("input gradient").clone();
        let numeric = numeric_grad(input, FD_H, |probe| {
            let mut g = Graph::inference();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| g.constant(if j == k { probe.clone() } else { t.clone() }))
                .collect();
            let out = build(&mut g, &vs);
            let l = project(&mut g, out);
            g.value(l).item()
        });
        worst = worst.max(grad_error(&analytic, &numeric));
    }
    worst
}

/// Worst relative error over every parameter tensor of `p`.
fn param_grad_error(
    p: &ParamStore<f64>,
    h: f64,
    build: &dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
) -> (f64, String) {
    let mut g = Graph::new();
    let l = build(&mut g, p);
    let grads = g.backward(l).unwrap().into_param_grads(p);
    let mut worst = (0.0, String::new());
    for (name, analytic) in &grads {
        let mut probe_store = p.clone();
        let numeric = numeric_grad(p.get(name).unwrap(), h, |t| {
            *probe_store.get_mut(name).unwrap() = t.clone();
            let mut g = Graph::inference();
            let l = build(&mut g, &probe_store);
            g.value(l).item()
        });
        let err = grad_error(analytic, &numeric);
        if err > worst.0 {
            worst = (err, name.clone());
        }
    }
    worst
}

fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
    Rng::new(seed, 0).normal_tensor(shape)
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>;

fn primitive_cases() -> Vec<(String, Vec<Tensor<f64>>, Build)> {
    let mut cases: Vec<(String, Vec<Tensor<f64>>, Build)> = Vec::new();
    let mut add = |name: &str, inputs: Vec<Tensor<f64>>, f: Build| cases.push((name.to_string(), inputs, f));
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
        add(
            &format!("conv2d s{stride} p{pad} k{k}"),
            vec![rnd(&[2, 3, 5, 5], 1), rnd(&[4, 3, k, k], 2), rnd(&[4], 3)],
            Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap()),
        );
    }
    add("linear", vec![rnd(&[3, 4], 4), rnd(&[5, 4], 5), rnd(&[5], 6)], Box::new(|g, v| g.linear(v[0], v[1], Some(v[2])).unwrap()));
    add(
        "group_norm",
        vec![rnd(&[2, 4, 3, 3], 7), rnd(&[4], 8).map(|v| 1.0 + 0.3 * v), rnd(&[4], 9)],
        Box::new(|g, v| g.group_norm(v[0], 2, Some(v[1]), Some(v[2]), 1e-5).unwrap()),
    );
    add("group_norm [N, C]", vec![rnd(&[3, 8], 10)], Box::new(|g, v| g.group_norm(v[0], 4, None, None, 1e-5).unwrap()));
    add(
        "layer_norm",
        vec![rnd(&[3, 6], 11), rnd(&[6], 12).map(|v| 1.0 + 0.3 * v), rnd(&[6], 13)],
        Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
    );
    add("silu", vec![rnd(&[2, 7], 14)], Box::new(|g, v| g.silu(v[0])));
    // keep entries away from the kink at 0
    add("abs", vec![rnd(&[9], 15).map(|v| v + v.signum() * 0.1)], Box::new(|g, v| g.abs(v[0])));
    add("attention", vec![rnd(&[2, 12, 2, 3], 16)], Box::new(|g, v| g.attention(v[0], 2).unwrap()));
    add(
        "modulate",
        vec![rnd(&[2, 3, 2, 2], 17), rnd(&[2, 3], 18), rnd(&[2, 3], 19)],
        Box::new(|g, v| g.modulate(v[0], v[1], v[2]).unwrap()),
    );
    add("upsample2x", vec![rnd(&[2, 2, 2, 3], 20)], Box::new(|g, v| g.upsample2x(v[0]).unwrap()));
    add(
        "concat_channels",
        vec![rnd(&[2, 2, 3, 3], 21), rnd(&[2, 3, 3, 3], 22)],
        Box::new(|g, v| g.concat_channels(v[0], v[1]).unwrap()),
    );
    add("mean_spatial", vec![rnd(&[2, 3, 3, 2], 23)], Box::new(|g, v| g.mean_spatial(v[0]).unwrap()));
    add("slice_cols", vec![rnd(&[3, 6], 24)], Box::new(|g, v| g.slice_cols(v[0], 1, 4).unwrap()));
    add(
        "splice_cols",
        vec![rnd(&[3, 6], 25), rnd(&[3, 6], 26)],
        Box::new(|g, v| g.splice_cols(v[0], v[1], 2, 5).unwrap()),
    );
    add("gather_rows", vec![rnd(&[4, 3], 27)], Box::new(|g, v| g.gather_rows(v[0], &[3, 0, 0, 2, 1]).unwrap()));
    add(
        "concat_rows",
        vec![rnd(&[2, 3], 28), rnd(&[1, 3], 29)],
        Box::new(|g, v| g.concat_rows(&[v[0], v[1], v[0]]).unwrap()),
    );
    add("cross_entropy", vec![rnd(&[4, 3], 30)], Box::new(|g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]).unwrap()));
    add("sum", vec![rnd(&[3, 3], 31)], Box::new(|g, v| g.sum(v[0])));
    add("mean", vec![rnd(&[3, 3], 32)], Box::new(|g, v| g.mean(v[0])));
    add("sum_squares", vec![rnd(&[3, 3], 33)], Box::new(|g, v| g.sum_squares(v[0])));
    add(
        "l1_mean",
        vec![rnd(&[2, 5], 34), rnd(&[2, 5], 35).map(|v| v + 0.3)],
        Box::new(|g, v| g.l1_mean(v[0], v[1]).unwrap()),
    );
    add("add", vec![rnd(&[2, 3], 36), rnd(&[2, 3], 37)], Box::new(|g, v| g.add(v[0], v[1]).unwrap()));
    add("sub", vec![rnd(&[2, 3], 38), rnd(&[2, 3], 39)], Box::new(|g, v| g.sub(v[0], v[1]).unwrap()));
    add("mul", vec![rnd(&[2, 3], 40), rnd(&[2, 3], 41)], Box::new(|g, v| g.mul(v[0], v[1]).unwrap()));
    add("scale", vec![rnd(&[2, 3], 42)], Box::new(|g, v| g.scale(v[0], -1.7)));
    add(
        "add_all",
        vec![rnd(&[2, 3], 43), rnd(&[2, 3], 44), rnd(&[2, 3], 45)],
        Box::new(|g, v| g.add_all(&[v[0], v[1], v[2], v[0]]).unwrap()),
    );
    add("reshape", vec![rnd(&[2, 3, 2], 46)], Box::new(|g, v| g.reshape(v[0], &[3, 4]).unwrap()));
    cases
}

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        resolution: 8,
        in_channels: 3,
        stem_stride: 2,
        stage_channels: vec![4, 8],
        blocks_per_stage: 1,
        attention_at_stage_end: true,
        attention_max_side: 16,
        heads: 2,
        d_sem: 6,
    }
}

fn small_denoiser() -> DenoiserConfig {
    DenoiserConfig {
        resolution: 8,
        in_channels: 3,
        channels: vec![4, 8],
        attention_sides: vec![4],
        heads: 2,
        d_sem: 6,
        time_dim: 8,
        cond_hidden: 8,
    }
}

fn small_gae() -> GaeConfig {
    let a = |name: &str, cardinality, width| Attribute { name: name.into(), cardinality, width };
    GaeConfig {
        d_sem: 6,
        hidden: 8,
        layout: AttributeLayout::new(vec![a("identity", 6, 2), a("background", 8, 1), a("pose", 10, 1)]).unwrap(),
        bottleneck_factor: 4,
        decoder_groups: 2,
    }
}

fn gradients() -> Outcome {
    let mut c = Checks::default();
    let mut worst: f64 = 0.0;
    let cases = primitive_cases();
    let count = cases.len();
    for (name, inputs, build) in cases {
        let err = input_grad_error(&inputs, build.as_ref());
        worst = worst.max(err);
        c.require(err < FD_TOL, format!("{name}: {err:.2e}"));
    }
    c.note(format!("{count} primitive cases, worst {worst:.1e}"));

    let x = rnd(&[2, 3, 8, 8], 50);
    let z = rnd(&[2, 6], 51);
    let proj_z = rnd(&[2, 6], 52);
    let proj_e = rnd(&[2, 3, 8, 8], 53);

    let enc = SemanticEncoder::new(&small_encoder()).map_err(|e| e.to_string())?;
    let ep: ParamStore<f64> = enc.init_params(&mut Rng::new(54, stream::INIT)).map_err(|e| e.to_string())?;
    let enc_loss = |g: &mut Graph<f64>, p: &ParamStore<f64>, xv: Var| {
        let out = enc.forward(g, p, xv).unwrap();
        let pv = g.constant(proj_z.clone());
        let m = g.mul(out, pv).unwrap();
        g.sum(m)
    };
    let (err, name) = param_grad_error(&ep, FD_H, &|g, p| {
        let xv = g.constant(x.clone());
        enc_loss(g, p, xv)
    });
    let err_x = input_grad_error(std::slice::from_ref(&x), &|g, v| {
        let out = enc.forward(g, &ep, v[0]).unwrap();
        g.reshape(out, &[12]).unwrap()
    });
    c.require(err < FD_TOL && err_x < FD_TOL, format!("encoder: params {err:.2e} ({name}), pixels {err_x:.2e}"));
    c.note(format!("encoder {:.1e}", err.max(err_x)));

    let den = Denoiser::new(&small_denoiser()).map_err(|e| e.to_string())?;
    let dp: ParamStore<f64> = den.init_params(&mut Rng::new(55, stream::INIT)).map_err(|e| e.to_string())?;
    // move the AdaGN projections off their identity initialisation
    let mut dp = dp;
    let mut jitter = Rng::new(56, 0);
    let names: Vec<String> = dp.names().filter(|n| n.contains("/time/") || n.contains("/sem/")).map(String::from).collect();
    for n in &names {
        let t = dp.get_mut(n).unwrap();
        let noise: Tensor<f64> = jitter.normal_tensor(t.shape());
        *t = t.zip_map(&noise, |a, b| a + 0.2 * b).unwrap();
    }
    let ts = [3usize, 700];
    let (err, name) = param_grad_error(&dp, FD_H, &|g, p| {
        let xv = g.constant(x.clone());
        let zv = g.constant(z.clone());
        let e = den.forward(g, p, xv, &ts, zv).unwrap();
        let pv = g.constant(proj_e.clone());
        let m = g.mul(e, pv).unwrap();
        g.sum(m)
    });
    let err_in = input_grad_error(&[x.clone(), z.clone()], &|g, v| den.forward(g, &dp, v[0], &ts, v[1]).unwrap());
    c.require(
        err < FD_TOL && err_in < FD_TOL,
        format!("denoiser: params {err:.2e} ({name}), inputs {err_in:.2e}"),
    );
    c.note(format!("denoiser+AdaGN {:.1e} over {} AdaGN sites", err.max(err_in), den.ada_gn_sites()));

    let gae = Gae::new(&small_gae()).map_err(|e| e.to_string())?;
    let gp: ParamStore<f64> = gae.init_params(&mut Rng::new(57, stream::INIT)).map_err(|e| e.to_string())?;
    let zb = rnd(&[6, 6], 58);
    let comps: Vec<Tensor<f64>> = (0..3).map(|r| rnd(&[2, 6], 59 + r)).collect();
    let donors = draw_donors(&mut Rng::new(62, 0), 6, 3).map_err(|e| e.to_string())?;
    let (err_blocks, name_b) = param_grad_error(&gp, FD_H, &|g, p| {
        let zv = g.constant(zb.clone());
        let e = gae.encode_graph(g, p, zv).unwrap();
        let d = gae.decode_graph(g, p, e).unwrap();
        let pv = g.constant(rnd(&[6, 6], 63));
        let m = g.mul(d, pv).unwrap();
        g.sum(m)
    });
    // the L1 terms have kinks; a small step keeps the probes on one side
    let (err_loss, name_l) = param_grad_error(&gp, 1e-7, &|g, p| {
        let codec = gae.bind(p);
        let b = g.constant(zb.clone());
        let anchors = g.gather_rows(b, &[0, 1]).unwrap();
        let companions = comps.iter().map(|t| g.constant(t.clone())).collect();
        loss_dis(g, &codec, &LatentGroups { anchors, companions }, b, &donors, 1.0, 0.5).unwrap().0
    });
    let err_z = input_grad_error(std::slice::from_ref(&zb), &|g, v| {
        let e = gae.encode_graph(g, &gp, v[0]).unwrap();
        gae.decode_graph(g, &gp, e).unwrap()
    });
    c.require(
        err_blocks < FD_TOL && err_loss < FD_TOL && err_z < FD_TOL,
        format!("GAE: blocks {err_blocks:.2e} ({name_b}), loss {err_loss:.2e} ({name_l}), input {err_z:.2e}"),
    );
    c.note(format!("GAE {:.1e}", err_blocks.max(err_loss).max(err_z)));
    c.finish()
}

// ---------------------------------------------------------------- 3

fn group_algebra() -> Outcome {
    let mut c = Checks::default();
    let layout = AttributeLayout::default();
    let w = layout.width();
    let mut rng = Rng::new(21, 0);
    let code = |rng: &mut Rng| -> Vec<f64> { (0..w).map(|_| rng.normal()).collect() };
    for _ in 0..200 {
        let (a, b, d) = (code(&mut rng), code(&mut rng), code(&mut rng));
        for attr in layout.attributes() {
            let n = &attr.name;
            let a2 = layout.swap(&a, &b, n).unwrap();
            let b2 = layout.swap(&b, &a, n).unwrap();
            c.require(layout.swap(&a2, &b2, n).unwrap() == a, format!("swap involution fails on `{n}`"));
            c.require(layout.swap(&b2, &a2, n).unwrap() == b, format!("swap involution fails on `{n}`"));
            c.require(layout.swap(&a, &a, n).unwrap() == a, format!("self-swap changes `{n}`"));
            // reassembling with every slice from `a` except `n` is a swap
            let donors: BTreeMap<String, &[f64]> = layout
                .attributes()
                .iter()
                .map(|x| (x.name.clone(), if &x.name == n { &b[..] } else { &a[..] }))
                .collect();
            c.require(layout.reassemble(&donors).unwrap() == a2, format!("reassemble/swap disagree on `{n}`"));
        }
        let all_a: BTreeMap<String, &[f64]> = layout.attributes().iter().map(|x| (x.name.clone(), &a[..])).collect();
        c.require(layout.reassemble(&all_a).unwrap() == a, "reassembling one donor is not the identity");
        // each slice comes from its own donor and the slices tile the code
        let three = [&a[..], &b[..], &d[..]];
        let mixed: BTreeMap<String, &[f64]> =
            layout.attributes().iter().enumerate().map(|(r, x)| (x.name.clone(), three[r])).collect();
        let r = layout.reassemble(&mixed).unwrap();
        c.require(r.len() == w, "reassembled width");
        let mut covered = 0;
        for (k, x) in layout.attributes().iter().enumerate() {
            let range = layout.range_of(&x.name).unwrap();
            c.require(range.start == covered, "slices are not contiguous");
            covered = range.end;
            c.require(r[range.clone()] == three[k][range], format!("slice `{}` not from its donor", x.name));
        }
        c.require(covered == w, "slices do not cover the code");
    }

    // groups drawn from the dataset share exactly one attribute per companion
    let mut rng = Rng::new(22, 0);
    let mut bad = 0;
    for _ in 0..1000 {
        let anchor = AttributeTuple::from_index(rng.below(DATASET_LEN)).unwrap();
        let s = sample_group(anchor, &mut rng);
        let ok = s.companions.iter().enumerate().all(|(r, comp)| {
            comp.values()[r] == anchor.values()[r]
                && comp.values().iter().zip(anchor.values()).filter(|(x, y)| **x == *y).count() == 1
        });
        bad += usize::from(!ok);
    }
    c.require(bad == 0, format!("{bad} of 1000 groups break the shared-count-1 invariant"));

    // an identity codec on an ideally factorised code: every loss is exactly 0
    let widths: Vec<usize> = layout.attributes().iter().map(|a| a.width).collect();
    let mut rng = Rng::new(23, 0);
    let tables: Vec<Vec<Vec<f64>>> = layout
        .attributes()
        .iter()
        .zip(&widths)
        .map(|(a, &wd)| (0..a.cardinality).map(|_| (0..wd).map(|_| rng.normal()).collect()).collect())
        .collect();
    let factorised = |t: &AttributeTuple| -> Vec<f64> {
        t.values().iter().enumerate().flat_map(|(r, &v)| tables[r][v].clone()).collect()
    };
    let groups: Vec<_> = (0..32)
        .map(|_| sample_group(AttributeTuple::from_index(rng.below(DATASET_LEN)).unwrap(), &mut rng))
        .collect();
    let rows = |ts: Vec<AttributeTuple>| -> Tensor<f64> {
        let data: Vec<f64> = ts.iter().flat_map(&factorised).collect();
        Tensor::new(&[ts.len(), w], data).unwrap()
    };
    let codec = IdentityCodec(layout.clone());
    let mut g = Graph::<f64>::new();
    let anchors = g.constant(rows(groups.iter().map(|s| s.anchor).collect()));
    let companions = (0..3).map(|r| g.constant(rows(groups.iter().map(|s| s.companions[r]).collect()))).collect();
    let lg = LatentGroups { anchors, companions };
    let donors = draw_donors(&mut rng, 32, 3).unwrap();
    let values = [
        ("L_r", loss_r(&mut g, &codec, anchors).unwrap()),
        ("L_ss", loss_ss(&mut g, &codec, &lg).unwrap()),
        ("L_ur", loss_ur(&mut g, &codec, anchors, &donors).unwrap()),
        ("L_dis", loss_dis(&mut g, &codec, &lg, anchors, &donors, 1.0, 0.5).unwrap().0),
    ];
    for (name, v) in values {
        let x = g.value(v).item();
        c.require(x == 0.0, format!("identity codec {name} = {x:e}"));
    }
    c.note("swap/reassemble laws over 200 code triples, 1000 groups, identity-codec losses exactly 0");
    c.finish()
}

// ---------------------------------------------------------------- 4 and 7

struct ToyRun {
    stages: Vec<(Stage, TrainState)>,
    report: EvalReport,
    eval_seconds: f64,
}

fn toy_config() -> Result<ExperimentConfig, String> {
    let root = workspace_root();
    let mut cfg = ExperimentConfig::load(&root.join("configs/toy.json")).map_err(|e| e.to_string())?;
    cfg.run_dir = root.join(&cfg.run_dir);
    Ok(cfg)
}

fn toy_run() -> &'static Result<ToyRun, String> {
    static RUN: OnceLock<Result<ToyRun, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = toy_config()?;
        let mut stages = Vec::new();
        for stage in Stage::ALL {
            let path = cfg.checkpoint_path(stage);
            let ck = Checkpoint::load(&path).map_err(|e| {
                format!("{e} (train with `dgae train {} --config configs/toy.json`)", stage.name())
            })?;
            stages.push((stage, TrainState::from_checkpoint(&ck).map_err(|e| e.to_string())?));
        }
        let pipe = Pipeline::new(&cfg).map_err(|e| e.to_string())?;
        let params = stages.last().expect("three stages").1.all_params();
        let model = Model::new(&pipe, &params, cfg.eval.sample_steps).map_err(|e| e.to_string())?;
        let plan = EvalPlan { cfg: cfg.eval, seed: cfg.seed, ppl_ladders: vec![10, 50, 100] };
        let t = Instant::now();
        let report = evaluate(&model, &plan).map_err(|e| e.to_string())?;
        let eval_seconds = t.elapsed().as_secs_f64();
        let dir = cfg.run_dir.join("eval");
        let _ = std::fs::create_dir_all(&dir);
        let _ = std::fs::write(dir.join("acceptance_metrics.csv"), report.metrics_csv());
        let _ = std::fs::write(dir.join("acceptance_perplexity.csv"), report.perplexity.to_csv());
        Ok(ToyRun { stages, report, eval_seconds })
    })
}

fn toy_training() -> Outcome {
    let cfg = toy_config()?;
    let run = toy_run().as_ref().map_err(|e| e.clone())?;
    let mut c = Checks::default();
    let (mut wall, mut cpu) = (0.0, 0.0);
    for (stage, state) in &run.stages {
        let want = cfg.stage(*stage).steps;
        c.require(state.step == want, format!("{} stopped at step {} of {want}", stage.name(), state.step));
        wall += state.wall_seconds;
        cpu += state.cpu_seconds;
    }
    c.require(cpu <= 7200.0, format!("training took {cpu:.0} s of CPU time"));
    c.note(format!("steps 20k/5k/5k; train {cpu:.0} s cpu ({wall:.0} s wall), eval {:.0} s", run.eval_seconds));

    let r = &run.report;
    c.require(r.recon_mse < 1e-2, format!("(a) reconstruction MSE {:.3e} >= 1e-2", r.recon_mse));
    c.note(format!("(a) MSE {:.2e}, SSIM {:.3}", r.recon_mse, r.recon_ssim));

    let pm = &r.perplexity;
    let diag = pm.diagonal();
    let excess = pm.max_off_diagonal_excess();
    c.require(diag.iter().all(|&d| d >= 0.9), format!("(b) diagonal {diag:.3?} below 0.90"));
    c.require(excess <= 0.15, format!("(b) off-diagonal exceeds chance by {excess:.3}"));
    c.note(format!("(b) diagonal {diag:.3?}, worst off-diagonal excess {excess:.3}"));

    let f = &r.fidelity;
    c.require(f.all >= 0.8, format!("(c) recombination fidelity {:.2} < 0.80 over {}", f.all, f.trials));
    c.note(format!("(c) fidelity {:.2} (per attribute {:.2?}) over {}", f.all, f.per_attribute, f.trials));
    c.finish()
}

fn path_length() -> Outcome {
    let mut c = Checks::default();
    let mut rng = Rng::new(31, stream::EVAL);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> =
        (0..8).map(|_| ((0..5).map(|_| rng.normal()).collect(), (0..5).map(|_| rng.normal()).collect())).collect();
    let constant = |lat: &[Vec<f64>]| Ok(vec![vec![0.25, -1.0, 3.0]; lat.len()]);
    let v = ppl(&pairs, 1e-2, &mut rng, constant).map_err(|e| e.to_string())?;
    c.require(v == 0.0, format!("constant generator PPL {v:e}"));
    let v2 = ppl_along(&pairs, 1e-4, &mut rng, |a: &Vec<f64>, _b: &Vec<f64>, _u| Ok(a.clone()), constant)
        .map_err(|e| e.to_string())?;
    c.require(v2 == 0.0, format!("constant generator PPL along a lerp path {v2:e}"));
    c.note("constant generator 0");

    let run = toy_run().as_ref().map_err(|e| format!("trained model unavailable: {e}"))?;
    for &(t, v) in &run.report.ppl {
        c.require(v.is_finite(), format!("PPL at T_sample={t} is {v}"));
    }
    let logged: Vec<String> = run.report.ppl.iter().map(|(t, v)| format!("T={t}: {v:.4e}")).collect();
    c.require(run.report.ppl.len() == 3, "expected three ladders");
    c.note(format!("trained PPL {}", logged.join(", ")));
    c.finish()
}

// ---------------------------------------------------------------- 5

fn cli_common(config: &Path, out: Option<PathBuf>) -> CliCommon {
    CliCommon { config: config.to_path_buf(), seed: None, out, steps: None, t_sample: None }
}

fn determinism() -> Outcome {
    let dir = common::scratch_dir("acceptance-determinism");
    let cfg = common::tiny_config(&dir.join("run"));
    let cfg_path = dir.join("tiny.json");
    std::fs::write(&cfg_path, cfg.to_json()).map_err(|e| e.to_string())?;
    let base = cli_common(&cfg_path, None);
    for stage in [StageArg::Pretrain, StageArg::Refine, StageArg::Joint] {
        commands::cmd_train(&base, stage, false, false).map_err(|e| format!("{e:#}"))?;
    }
    let render = |k: usize| -> Result<Vec<(String, Vec<u8>)>, String> {
        let c = cli_common(&cfg_path, Some(dir.join(format!("out{k}"))));
        let e = |e: anyhow::Error| format!("{e:#}");
        // recombine writes to one file per mode, so read each PNG right away
        let read = |p: PathBuf| std::fs::read(p).map_err(|e| e.to_string());
        let donors = ["identity=tuple:1,0,0", "background=tuple:2,5,3", "pose=tuple:4,2,8"].map(String::from);
        Ok(vec![
            ("swap", read(commands::cmd_swap(&c, "tuple:0,1,2", "tuple:3,4,5", None).map_err(e)?)?),
            ("swap pose", read(commands::cmd_swap(&c, "tuple:1,1,1", "tuple:2,6,9", Some("pose")).map_err(e)?)?),
            ("recombine random", read(commands::cmd_recombine(&c, &donors, NoiseArg::Random).map_err(e)?)?),
            ("recombine inferred", read(commands::cmd_recombine(&c, &donors, NoiseArg::Inferred).map_err(e)?)?),
            ("interpolate", read(commands::cmd_interpolate(&c, "tuple:0,0,0", "tuple:5,7,9", 5, None).map_err(e)?)?),
        ]
        .into_iter()
        .map(|(n, b)| (n.to_string(), b))
        .collect())
    };
    let first = render(1)?;
    let second = render(2)?;
    let mut c = Checks::default();
    for ((name, a), (_, b)) in first.iter().zip(&second) {
        c.require(!a.is_empty() && a == b, format!("{name}: PNGs differ between runs"));
    }
    c.note(format!("{} PNGs byte-identical across two runs", first.len()));
    let _ = std::fs::remove_dir_all(&dir);
    c.finish()
}

// ---------------------------------------------------------------- 6

fn gamma_zero() -> Outcome {
    let cfg = ExperimentConfig { run_dir: std::env::temp_dir(), ..Default::default() };
    let pipe = Pipeline::new(&cfg).map_err(|e| e.to_string())?;
    let all = pipe.init_params::<f32>(cfg.seed).map_err(|e| e.to_string())?;
    let images = pipe.images::<f32>();
    let zero = StageConfig { gamma: 0.0, ..cfg.joint };

    // one real joint-stage step
    let mut state = TrainState::start(Stage::Joint, &all);
    let data = StageData { images: &images, latents: None };
    train_step(&pipe, &zero, cfg.seed, &mut state, &data).map_err(|e| e.to_string())?;
    let joint = state.all_params();

    // the same batch and noise through the pretraining objective
    let mut rng = step_rng(cfg.seed, Stage::Joint, 0);
    let groups = training::draw_groups(&mut rng, zero.batch / 4);
    let tuples: Vec<AttributeTuple> =
        groups.iter().flat_map(|s| std::iter::once(s.anchor).chain(s.companions)).collect();
    let x0 = dataset::batch_images(&images, &tuples).map_err(|e| e.to_string())?;
    let draw = NoiseDraw::sample(&mut rng, x0.shape(), &pipe.schedule).map_err(|e| e.to_string())?;
    let mut pre = all.filter_prefix("encoder/");
    pre.merge(all.filter_prefix("denoiser/")).map_err(|e| e.to_string())?;
    let (_, grads) = pretrain_grads(&pipe, &pre, &x0, &draw).map_err(|e| e.to_string())?;
    adam_step(&mut pre, &grads, AdamConfig::with_lr(zero.lr)).map_err(|e| e.to_string())?;

    let mut c = Checks::default();
    let (mut worst, mut moved) = (0.0f32, 0.0f32);
    for (name, p) in pre.iter() {
        let j = joint.get(name).ok_or(format!("{name} missing from the joint store"))?;
        worst = worst.max(p.max_abs_diff(j));
        moved = moved.max(p.max_abs_diff(all.get(name).unwrap()));
    }
    c.require(worst <= 1e-6, format!("encoder/denoiser updates differ by {worst:e}"));
    c.require(moved > 0.0, "the pretraining step did not move any parameter");
    for (name, p) in all.iter().filter(|(n, _)| n.starts_with("gae/")) {
        c.require(joint.get(name) == Some(p), format!("{name} moved with gamma 0"));
    }
    c.note(format!("max update difference {worst:e} (step size up to {moved:.1e}); GAE unchanged"));
    c.finish()
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 7] = [
        (1, "diffusion math", diffusion_math),
        (2, "gradient checks", gradients),
        (3, "group/GAE algebra", group_algebra),
        (4, "toy training run", toy_training),
        (5, "determinism", determinism),
        (6, "gamma=0 equivalence", gamma_zero),
        (7, "path length sanity", path_length),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1} s] {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1} s] {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
