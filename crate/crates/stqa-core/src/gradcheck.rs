//! Central finite-difference verification of tape gradients.
//!
//! A check rebuilds the computation from scratch for every perturbed
//! coordinate, so it is only meant for the small configurations used in
//! tests and the `gradcheck` command.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{EngineError, Result};
use crate::fusion::{context_match, fuse, level_adjust};
use crate::model::{ExampleInput, Model, StreamChannelConfig, TextChannelConfig};
use crate::params::{ParamGroup, ParamSet};
use crate::scoring::{lsep_loss, score_textual, score_visual};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::text::{bilstm, init_bilstm_params, QueryPack, TokenSeq, Vocab};
use crate::video::{inception_block, se_apply, InceptionSpec, StreamConfig, StreamKind, VideoClip};

/// Settings for one finite-difference run.
#[derive(Debug, Clone, Copy)]
pub struct FdConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            eps: 1e-5,
            tolerance: 1e-4,
        }
    }
}

/// Worst coordinate found by a check.
#[derive(Debug, Clone, Copy)]
pub struct WorstCoord {
    pub input: usize,
    pub flat: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst: Option<WorstCoord>,
    /// Number of scalar coordinates compared.
    pub coords: usize,
    pub tolerance: f64,
}

impl FdReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Relative error with a floor that keeps near-zero pairs comparable.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (1e-8_f64).max(analytic.abs() + numeric.abs())
}

/// Compare tape gradients of `f` against central finite differences over
/// every coordinate of every input.
///
/// `f` must build a scalar loss from leaves recorded on the given tape, in
/// the same order as `inputs`.
pub fn finite_diff_check<F>(inputs: &[Tensor], cfg: FdConfig, f: F) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&mut tape, &vars)?;
        tape.item(loss)
    };

    // Analytic gradients from one backward pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).unwrap().to_vec())
        .collect();

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
        coords: 0,
        tolerance: cfg.tolerance,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        if !t.requires_grad {
            continue;
        }
        for flat in 0..t.numel() {
            let orig = t.data()[flat];
            work[ti].data_mut()[flat] = orig + cfg.eps;
            let plus = eval(&work)?;
            work[ti].data_mut()[flat] = orig - cfg.eps;
            let minus = eval(&work)?;
            work[ti].data_mut()[flat] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[ti][flat];
            let e = rel_err(a, numeric);
            report.coords += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some(WorstCoord {
                    input: ti,
                    flat,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// A named gradient check runnable from tests and the `gradcheck`
/// command.
///
/// Composite targets get a looser tolerance than single ops: long chains
/// accumulate central-difference truncation error, and their piecewise
/// activations (relu, max pooling) sit at whatever margins the natural
/// initialization produced.
pub struct GradTarget {
    pub name: &'static str,
    pub tolerance: f64,
    runner: fn(u64, f64) -> Result<FdReport>,
}

impl GradTarget {
    pub fn run(&self, seed: u64) -> Result<FdReport> {
        (self.runner)(seed, self.tolerance)
    }
}

const TARGETS: [GradTarget; 12] = [
    GradTarget {
        name: "conv3d",
        tolerance: 1e-5,
        runner: check_conv3d,
    },
    GradTarget {
        name: "inception",
        tolerance: 1e-4,
        runner: check_inception,
    },
    GradTarget {
        name: "se_block",
        tolerance: 1e-5,
        runner: check_se_block,
    },
    GradTarget {
        name: "bilstm",
        tolerance: 1e-4,
        runner: check_bilstm,
    },
    GradTarget {
        name: "level_adjust",
        tolerance: 1e-5,
        runner: check_level_adjust,
    },
    GradTarget {
        name: "context_match",
        tolerance: 1e-4,
        runner: check_context_match,
    },
    GradTarget {
        name: "fuse",
        tolerance: 1e-4,
        runner: check_fuse,
    },
    GradTarget {
        name: "score_visual",
        tolerance: 1e-4,
        runner: check_score_visual,
    },
    GradTarget {
        name: "score_textual",
        tolerance: 1e-4,
        runner: check_score_textual,
    },
    GradTarget {
        name: "lsep_loss",
        tolerance: 1e-5,
        runner: check_lsep_loss,
    },
    GradTarget {
        name: "text_channel",
        tolerance: 1e-4,
        runner: check_text_channel,
    },
    GradTarget {
        name: "stream_channel",
        tolerance: 1e-4,
        runner: check_stream_channel,
    },
];

/// Every registered target, in documentation order.
pub fn gradcheck_targets() -> &'static [GradTarget] {
    &TARGETS
}

pub fn find_target(name: &str) -> Option<&'static GradTarget> {
    TARGETS.iter().find(|t| t.name == name)
}

/// Look a target up by name and run it.
pub fn run_target(name: &str, seed: u64) -> Result<FdReport> {
    let names: Vec<&str> = TARGETS.iter().map(|t| t.name).collect();
    let target = find_target(name).ok_or_else(|| {
        EngineError::Config(format!(
            "unknown gradcheck target {name:?}; known targets: {}",
            names.join(", ")
        ))
    })?;
    target.run(seed)
}

fn fd(tolerance: f64) -> FdConfig {
    FdConfig {
        eps: 1e-5,
        tolerance,
    }
}

fn signed(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform_range(shape, -1.0, 1.0, rng).with_grad()
}

/// Strictly spaced positive values: every pair of coordinates differs by
/// at least 0.005, so max pooling always has a unique winner by a margin
/// far above the finite-difference step, for any seed.
fn ramped(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::uniform_range(shape, 0.0, 0.005, rng);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v += 0.01 * i as f64;
    }
    t.with_grad()
}

/// Clone a parameter set's tensors, in registration order, as
/// finite-difference inputs.
fn param_inputs(ps: &ParamSet) -> Vec<Tensor> {
    ps.iter().map(|e| e.tensor.clone()).collect()
}

fn sum_squares(tape: &mut Tape, y: Var) -> Result<Var> {
    let sq = tape.mul(y, y)?;
    Ok(tape.sum_all(sq))
}

fn mean_squares(tape: &mut Tape, y: Var) -> Result<Var> {
    let n: usize = tape.shape(y).iter().product();
    let sq = tape.mul(y, y)?;
    let s = tape.sum_all(sq);
    Ok(tape.scale(s, 1.0 / n as f64))
}

// The convolution itself is linear, so any interior point is kink-free;
// the squared readout makes every gradient depend on the perturbed
// coordinate through the output values, which catches index bugs a plain
// sum would let cancel.
fn check_conv3d(seed: u64, tolerance: f64) -> Result<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = signed(vec![2, 4, 4, 2], &mut rng);
    let w = Tensor::uniform_range(vec![3, 3, 3, 2, 2], -0.5, 0.5, &mut rng).with_grad();
    let b = Tensor::uniform_range(vec![2], -0.5, 0.5, &mut rng).with_grad();
    finite_diff_check(&[x, w, b], fd(tolerance), |tape, vars| {
        let y = tape.conv3d(vars[0], vars[1], vars[2], [1, 2, 2], [1, 1, 1])?;
        sum_squares(tape, y)
    })
}

// Positive weights and biased-positive activations keep every relu on its
// linear branch, and the ramped input keeps every pooling window's max
// unique, so the check is robust across seeds.
fn check_inception(seed: u64, tolerance: f64) -> Result<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let conv = |ps: &mut ParamSet,
                rng: &mut ChaCha8Rng,
                tag: &str,
                k: usize,
                ci: usize,
                co: usize|
     -> Result<()> {
        ps.register(
            format!("inc.{tag}.w"),
            ParamGroup::Extractor,
            Tensor::uniform_range(vec![k, k.min(3), k.min(3), ci, co], 0.05, 0.2, rng),
        )?;
        ps.register(
            format!("inc.{tag}.b"),
            ParamGroup::Extractor,
            Tensor::uniform_range(vec![co], 0.1, 0.3, rng),
        )?;
        Ok(())
    };
    conv(&mut ps, &mut rng, "b1", 1, 2, 1)?;
    conv(&mut ps, &mut rng, "b2a", 1, 2, 1)?;
    conv(&mut ps, &mut rng, "b2b", 3, 1, 2)?;
    conv(&mut ps, &mut rng, "b3a", 1, 2, 1)?;
    conv(&mut ps, &mut rng, "b3b", 3, 1, 2)?;
    conv(&mut ps, &mut rng, "b4", 1, 2, 1)?;
    let x = ramped(vec![2, 4, 4, 2], &mut rng);
    let mut inputs = vec![x];
    inputs.extend(param_inputs(&ps));
    finite_diff_check(&inputs, fd(tolerance), move |tape, vars| {
        let bound = ps.bind_existing(&vars[1..])?;
        let y = inception_block(tape, &bound, "inc", 3, vars[0])?;
        mean_squares(tape, y)
    })
}

// Positive input keeps the squeeze mean, and with positive weights the
// bottleneck's relu, strictly on the linear branch.
fn check_se_block(seed: u64, tolerance: f64) -> Result<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    ps.register(
        "se.w1".to_string(),
        ParamGroup::Extractor,
        Tensor::uniform_range(vec![4, 2], 0.2, 0.8, &mut rng),
    )?;
    ps.register(
        "se.w2".to_string(),
        ParamGroup::Extractor,
        Tensor::uniform_range(vec![2, 4], 0.2, 0.8, &mut rng),
    )?;
    let x = Tensor::uniform_range(vec![2, 3, 3, 4], 0.2, 1.0, &mut rng).with_grad();
    let mut inputs = vec![x];
    inputs.extend(param_inputs(&ps));
    finite_diff_check(&inputs, fd(tolerance), move |tape, vars| {
        let bound = ps.bind_existing(&vars[1..])?;
        let y = se_apply(tape, &bound, "se", vars[0])?;
        sum_squares(tape, y)
    })
}

fn check_bilstm(seed: u64, tolerance: f64) -> Result<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    init_bilstm_params(&mut ps, "enc", 3, 2, ParamGroup::Head, &mut rng)?;
    let x = signed(vec![4, 3], &mut rng);
    let mut inputs = vec![x];
    inputs.extend(param_inputs(&ps));
    finite_diff_check(&inputs, fd(tolerance), move |tape, vars| {
        let bound = ps.bind_existing(&vars[1..])?;
        let y = bilstm(tape, &bound, "enc", 2, vars[0])?;
        sum_squares(tape, y)
    })
}

// Alternating large biases pin each column to one side of the leaky kink
// (|xW| < 1 against |b| = 2.5) while both branches stay covered; the
// linear readout keeps the alpha-scaled branch gradients above the
// cancellation floor.
fn check_level_adjust(seed: u64, tolerance: f64) -> Result<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::uniform_range(vec![3, 4], -0.5, 0.5, &mut rng).with_grad();
    let w = Tensor::uniform_range(vec![4, 5], -0.5, 0.5, &mut rng).with_grad();
    let b = Tensor::from_vec(vec![5], vec![2.5, -2.5, 2.5, -2.5, 2.5])?.with_grad();
    finite_diff_check(&[x, w, b], fd(tolerance), |tape, vars| {
        let y = level_adjust(tape, vars[0], vars[1], vars[2], 0.01)?;
        Ok(tape.sum_all(y))
    })
}

fn check_context_match(seed: u64, tolerance: f64) -> Result<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = signed(vec![3, 4], &mut rng);
    let h = signed(vec![2, 4], &mut rng);
    finite_diff_check(&[v, h], fd(tolerance), |tape, vars| {
        let g = context_match(tape, vars[0], vars[1])?;
        sum_squares(tape, g)
    })
}

fn check_fuse(seed: u64, tolerance: f64) -> Result<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = signed(vec![2, 3], &mut rng);
    let gq = signed(vec![2, 3], &mut rng);
    let ga = signed(vec![2, 3], &mut rng);
    finite_diff_check(&[v, gq, ga], fd(tolerance), |tape, vars| {
        let m = fuse(tape, vars[0], vars[1], vars[2])?;
        sum_squares(tape, m)
    })
}

fn check_score_visual(seed: u64, tolerance: f64) -> Result<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = signed(vec![4, 6], &mut rng);
    let w = signed(vec![6, 1], &mut rng);
    let b = signed(vec![1], &mut rng);
    finite_diff_check(&[m, w, b], fd(tolerance), |tape, vars| {
        score_visual(tape, vars[0], vars[1], vars[2])
    })
}

fn check_score_textual(seed: u64, tolerance: f64) -> Result<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    init_bilstm_params(&mut ps, "slstm", 6, 2, ParamGroup::Head, &mut rng)?;
    ps.register(
        "score.w".to_string(),
        ParamGroup::Head,
        signed(vec![4, 1], &mut rng),
    )?;
    ps.register(
        "score.b".to_string(),
        ParamGroup::Head,
        signed(vec![1], &mut rng),
    )?;
    let m = signed(vec![3, 6], &mut rng);
    let mut inputs = vec![m];
    inputs.extend(param_inputs(&ps));
    finite_diff_check(&inputs, fd(tolerance), move |tape, vars| {
        let bound = ps.bind_existing(&vars[1..])?;
        let w = bound.var("score.w")?;
        let b = bound.var("score.b")?;
        score_textual(tape, &bound, "slstm", 2, vars[0], w, b)
    })
}

fn check_lsep_loss(seed: u64, tolerance: f64) -> Result<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = Tensor::uniform_range(vec![5], -2.0, 2.0, &mut rng).with_grad();
    finite_diff_check(&[p], fd(tolerance), |tape, vars| {
        lsep_loss(tape, vars[0], &[2])
    })
}

// The channel losses sit near ln 2 while some recurrent-weight gradients
// are far below the 1e-8 relative-error floor, so finite-difference
// roundoff (which tracks the loss scale through the adjoints) would
// register as error. Scaling the readout shrinks that noise in
// proportion; relative errors of genuine gradient bugs are unaffected by
// a constant factor.
fn scaled_lsep(tape: &mut Tape, scores: Var, correct: usize) -> Result<Var> {
    let loss = lsep_loss(tape, scores, &[correct])?;
    Ok(tape.scale(loss, 0.01))
}

// Sequences long enough that every recurrent weight sees several steps;
// with one-step queries their gradients sink under the finite-difference
// noise floor and the relative error reflects roundoff, not correctness.
fn text_fixture() -> Result<(Vocab, QueryPack, TokenSeq)> {
    let vocab = Vocab::from_tokens(
        ["what", "moved", "in", "clip", "red", "blue", "box", "dot"],
        4,
    )?;
    let pack = QueryPack::new(
        TokenSeq::new(vec![2, 3, 4, 5])?,
        vec![TokenSeq::new(vec![6, 8])?, TokenSeq::new(vec![7, 9])?],
        0,
    )?;
    let subtitle = TokenSeq::new(vec![6, 2, 8, 3, 7, 9])?;
    Ok((vocab, pack, subtitle))
}

fn check_text_channel(seed: u64, tolerance: f64) -> Result<FdReport> {
    let (vocab, pack, subtitle) = text_fixture()?;
    let cfg = TextChannelConfig {
        candidates: 2,
        embed_dim: 4,
        hidden: 3,
        score_hidden: 2,
    };
    let model = Model::init_text(cfg, &vocab, seed)?;
    let inputs = param_inputs(model.params());
    finite_diff_check(&inputs, fd(tolerance), move |tape, vars| {
        let bound = model.params().bind_existing(vars)?;
        let scores = model.forward_scores(
            tape,
            &bound,
            ExampleInput {
                clip: None,
                subtitle: Some(&subtitle),
                pack: &pack,
            },
        )?;
        scaled_lsep(tape, scores, 0)
    })
}

fn check_stream_channel(seed: u64, tolerance: f64) -> Result<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocab::from_tokens(["left", "right"], 3)?;
    let pack = QueryPack::new(
        TokenSeq::new(vec![2, 3])?,
        vec![TokenSeq::new(vec![2])?, TokenSeq::new(vec![3])?],
        0,
    )?;
    let cfg = StreamChannelConfig {
        candidates: 2,
        kind: StreamKind::Rgb,
        stream: StreamConfig {
            in_channels: 3,
            spatial: 8,
            stem_channels: 2,
            temporal_kernel: 3,
            blocks: vec![InceptionSpec {
                b1: 1,
                b2_reduce: 1,
                b2: 2,
                b3_reduce: 1,
                b3: 2,
                pool_proj: 1,
            }],
            use_se: true,
            se_ratio: 2,
            feature_dim: 3,
        },
        embed_dim: 3,
        query_hidden: 2,
        alpha: 0.01,
    };
    let mut model = Model::init_stream(cfg, &vocab, seed)?;
    // Conv biases start at zero, and positions whose inputs were all
    // relu-clipped have pre-activations exactly equal to the bias, i.e.
    // exactly on the relu kink where central differences measure the
    // average of the two one-sided slopes. Shift the extractor biases to
    // check at a point with real margins.
    for i in 0..model.params().len() {
        let entry = model.params_mut().entry_mut(i);
        if entry.name.starts_with("vext.") && entry.name.ends_with(".b") {
            for v in entry.tensor.data_mut() {
                *v += 0.05;
            }
        }
    }
    let rgb = Tensor::uniform_range(vec![3, 8, 8, 3], 0.1, 0.9, &mut rng);
    let flow = Tensor::uniform_range(vec![2, 8, 8, 2], -0.5, 0.5, &mut rng);
    let clip = VideoClip::new(rgb, flow)?;
    let inputs = param_inputs(model.params());
    finite_diff_check(&inputs, fd(tolerance), move |tape, vars| {
        let bound = model.params().bind_existing(vars)?;
        let scores = model.forward_scores(
            tape,
            &bound,
            ExampleInput {
                clip: Some(&clip),
                subtitle: None,
                pack: &pack,
            },
        )?;
        scaled_lsep(tape, scores, 0)
    })
}
