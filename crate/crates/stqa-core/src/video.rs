//! Two-stream spatiotemporal feature extraction.
//!
//! Each stream (RGB frames or optical flow) runs a strided 3-D conv stem,
//! a stack of inception blocks with channel-gating squeeze-excitation
//! after each block, spatial mean pooling, and a linear projection to the
//! shared feature width. The temporal axis is never pooled or strided, so
//! a clip of `n` frames always yields `n` feature rows.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};
use crate::params::{BoundParams, ParamGroup, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which input modality a stream consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Rgb,
    Flow,
}

impl StreamKind {
    pub fn in_channels(self) -> usize {
        match self {
            StreamKind::Rgb => 3,
            StreamKind::Flow => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Rgb => "rgb",
            StreamKind::Flow => "flow",
        }
    }
}

/// Branch widths of one inception block. Output channels are
/// `b1 + b2 + b3 + pool_proj`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InceptionSpec {
    pub b1: usize,
    pub b2_reduce: usize,
    pub b2: usize,
    pub b3_reduce: usize,
    pub b3: usize,
    pub pool_proj: usize,
}

impl InceptionSpec {
    pub fn out_channels(&self) -> usize {
        self.b1 + self.b2 + self.b3 + self.pool_proj
    }
}

/// Architecture of one stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub in_channels: usize,
    /// Input frames are `spatial x spatial` pixels.
    pub spatial: usize,
    pub stem_channels: usize,
    /// Temporal kernel extent for the stem and the 3x3 branches; must be
    /// odd. Extent 1 makes every frame's features independent of its
    /// neighbours.
    pub temporal_kernel: usize,
    pub blocks: Vec<InceptionSpec>,
    pub use_se: bool,
    /// Squeeze-excitation reduction ratio.
    pub se_ratio: usize,
    /// Output feature width per frame.
    pub feature_dim: usize,
}

impl StreamConfig {
    /// Desk-scale default: 24x24 frames, two inception blocks, 64-wide
    /// features.
    pub fn toy(in_channels: usize) -> Self {
        StreamConfig {
            in_channels,
            spatial: 24,
            stem_channels: 8,
            temporal_kernel: 3,
            blocks: vec![
                InceptionSpec {
                    b1: 4,
                    b2_reduce: 4,
                    b2: 8,
                    b3_reduce: 2,
                    b3: 4,
                    pool_proj: 4,
                },
                InceptionSpec {
                    b1: 8,
                    b2_reduce: 8,
                    b2: 16,
                    b3_reduce: 4,
                    b3: 8,
                    pool_proj: 8,
                },
            ],
            use_se: true,
            se_ratio: 4,
            feature_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temporal_kernel == 0 || self.temporal_kernel % 2 == 0 {
            return Err(EngineError::Config(format!(
                "temporal kernel must be odd, got {}",
                self.temporal_kernel
            )));
        }
        if self.spatial < 2 || self.in_channels == 0 || self.stem_channels == 0 {
            return Err(EngineError::Config("degenerate stream geometry".into()));
        }
        if self.blocks.is_empty() {
            return Err(EngineError::Config(
                "at least one inception block required".into(),
            ));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if [b.b1, b.b2_reduce, b.b2, b.b3_reduce, b.b3, b.pool_proj]
                .iter()
                .any(|&w| w == 0)
            {
                return Err(EngineError::Config(format!(
                    "zero-width branch in block {i}"
                )));
            }
            if self.use_se && b.out_channels() % self.se_ratio != 0 {
                return Err(EngineError::Config(format!(
                    "block {i} channels {} not divisible by SE ratio {}",
                    b.out_channels(),
                    self.se_ratio
                )));
            }
        }
        if self.feature_dim == 0 {
            return Err(EngineError::Config("feature_dim must be positive".into()));
        }
        Ok(())
    }

    /// Channel width entering the projection.
    pub fn trunk_channels(&self) -> usize {
        self.blocks
            .last()
            .map(InceptionSpec::out_channels)
            .unwrap_or(0)
    }

    /// Scalar count added by enabling squeeze-excitation: `2 C^2 / r` per
    /// insertion site.
    pub fn se_scalars(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| {
                let c = b.out_channels();
                2 * c * c / self.se_ratio
            })
            .sum()
    }
}

/// One video example: RGB frames plus the optical flow between
/// consecutive frames.
#[derive(Debug, Clone)]
pub struct VideoClip {
    /// `[n, H, W, 3]`
    pub rgb: Tensor,
    /// `[n-1, H, W, 2]`
    pub flow: Tensor,
}

impl VideoClip {
    pub fn new(rgb: Tensor, flow: Tensor) -> Result<Self> {
        let rs = rgb.shape();
        let fs = flow.shape();
        if rs.len() != 4 || rs[3] != 3 {
            return Err(EngineError::Dimension {
                op: "video_clip",
                msg: format!("rgb must be [n,H,W,3], got {rs:?}"),
            });
        }
        if fs.len() != 4 || fs[3] != 2 {
            return Err(EngineError::Dimension {
                op: "video_clip",
                msg: format!("flow must be [n-1,H,W,2], got {fs:?}"),
            });
        }
        if rs[0] < 2 {
            return Err(EngineError::ClipTooShort {
                frames: rs[0],
                min: 2,
            });
        }
        if fs[0] != rs[0] - 1 || fs[1] != rs[1] || fs[2] != rs[2] {
            return Err(EngineError::Dimension {
                op: "video_clip",
                msg: format!("flow shape {fs:?} does not pair with rgb {rs:?}"),
            });
        }
        Ok(VideoClip { rgb, flow })
    }

    pub fn frames(&self) -> usize {
        self.rgb.shape()[0]
    }

    /// Frames `t0..=t1` and the flow fields between them. The window is
    /// inclusive on both ends and must span at least two frames.
    pub fn window(&self, t0: usize, t1: usize) -> Result<VideoClip> {
        let n = self.frames();
        if t0 >= t1 || t1 >= n {
            return Err(EngineError::Validation(format!(
                "window [{t0}, {t1}] invalid for a {n}-frame clip"
            )));
        }
        let take = |t: &Tensor, start: usize, len: usize| -> Tensor {
            let s = t.shape();
            let per = s[1] * s[2] * s[3];
            let data = t.data()[start * per..(start + len) * per].to_vec();
            Tensor::from_vec(vec![len, s[1], s[2], s[3]], data).unwrap()
        };
        VideoClip::new(
            take(&self.rgb, t0, t1 - t0 + 1),
            take(&self.flow, t0, t1 - t0),
        )
    }

    pub fn stream(&self, kind: StreamKind) -> &Tensor {
        match kind {
            StreamKind::Rgb => &self.rgb,
            StreamKind::Flow => &self.flow,
        }
    }
}

/// He-scaled uniform init for relu convolutions: variance-preserving
/// through the rectifier, so stacked blocks neither explode nor wash the
/// sparse block-world signal down to numerical dust. There is no
/// pretrained extractor to fall back on at this scale.
fn conv_init(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in: usize = shape[..4].iter().product();
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::uniform_range(shape, -bound, bound, rng)
}

fn linear_init(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in = shape[0];
    Tensor::uniform_init(shape, fan_in, rng)
}

/// Register all parameters of one stream under `prefix`, tagged to the
/// extractor optimizer group.
pub fn init_stream_params(
    ps: &mut ParamSet,
    prefix: &str,
    cfg: &StreamConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let kt = cfg.temporal_kernel;
    let g = ParamGroup::Extractor;
    ps.register(
        format!("{prefix}.stem.w"),
        g,
        conv_init(vec![kt, 3, 3, cfg.in_channels, cfg.stem_channels], rng),
    )?;
    ps.register(
        format!("{prefix}.stem.b"),
        g,
        Tensor::zeros(vec![cfg.stem_channels]),
    )?;
    let mut in_ch = cfg.stem_channels;
    for (i, b) in cfg.blocks.iter().enumerate() {
        let conv = |ps: &mut ParamSet,
                    rng: &mut ChaCha8Rng,
                    tag: &str,
                    k: [usize; 3],
                    ci: usize,
                    co: usize|
         -> Result<()> {
            ps.register(
                format!("{prefix}.inc{i}.{tag}.w"),
                g,
                conv_init(vec![k[0], k[1], k[2], ci, co], rng),
            )?;
            ps.register(
                format!("{prefix}.inc{i}.{tag}.b"),
                g,
                Tensor::zeros(vec![co]),
            )
        };
        conv(ps, rng, "b1", [1, 1, 1], in_ch, b.b1)?;
        conv(ps, rng, "b2a", [1, 1, 1], in_ch, b.b2_reduce)?;
        conv(ps, rng, "b2b", [kt, 3, 3], b.b2_reduce, b.b2)?;
        conv(ps, rng, "b3a", [1, 1, 1], in_ch, b.b3_reduce)?;
        conv(ps, rng, "b3b", [kt, 3, 3], b.b3_reduce, b.b3)?;
        conv(ps, rng, "b4", [1, 1, 1], in_ch, b.pool_proj)?;
        in_ch = b.out_channels();
        if cfg.use_se {
            let hidden = in_ch / cfg.se_ratio;
            ps.register(
                format!("{prefix}.inc{i}.se.w1"),
                g,
                linear_init(vec![in_ch, hidden], rng),
            )?;
            ps.register(
                format!("{prefix}.inc{i}.se.w2"),
                g,
                linear_init(vec![hidden, in_ch], rng),
            )?;
        }
    }
    // Wider-than-fan init: the trunk descriptor arrives through spatial
    // average pooling of scenes that are mostly background, so its
    // magnitude is a small fraction of the per-position activations. The
    // projection restores O(0.1) feature scale; without it the matching
    // layers see features near numerical zero and learn nothing.
    let proj_bound = 4.0 / (in_ch as f64).sqrt();
    ps.register(
        format!("{prefix}.proj.w"),
        g,
        Tensor::uniform_range(vec![in_ch, cfg.feature_dim], -proj_bound, proj_bound, rng),
    )?;
    ps.register(
        format!("{prefix}.proj.b"),
        g,
        Tensor::zeros(vec![cfg.feature_dim]),
    )?;
    Ok(())
}

fn same_pad(k: usize) -> usize {
    (k - 1) / 2
}

fn conv_relu(
    tape: &mut Tape,
    bound: &BoundParams,
    name_w: &str,
    name_b: &str,
    x: Var,
    stride: [usize; 3],
) -> Result<Var> {
    let w = bound.var(name_w)?;
    let b = bound.var(name_b)?;
    let ks = tape.shape(w);
    let pad = [same_pad(ks[0]), same_pad(ks[1]), same_pad(ks[2])];
    let y = tape.conv3d(x, w, b, stride, pad)?;
    Ok(tape.relu(y))
}

/// One inception block: three conv branches plus a pooled projection
/// branch, concatenated along channels.
pub fn inception_block(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    temporal_kernel: usize,
    x: Var,
) -> Result<Var> {
    let s1 = [1, 1, 1];
    let p1 = conv_relu(
        tape,
        bound,
        &format!("{prefix}.b1.w"),
        &format!("{prefix}.b1.b"),
        x,
        s1,
    )?;
    let r2 = conv_relu(
        tape,
        bound,
        &format!("{prefix}.b2a.w"),
        &format!("{prefix}.b2a.b"),
        x,
        s1,
    )?;
    let p2 = conv_relu(
        tape,
        bound,
        &format!("{prefix}.b2b.w"),
        &format!("{prefix}.b2b.b"),
        r2,
        s1,
    )?;
    let r3 = conv_relu(
        tape,
        bound,
        &format!("{prefix}.b3a.w"),
        &format!("{prefix}.b3a.b"),
        x,
        s1,
    )?;
    let p3 = conv_relu(
        tape,
        bound,
        &format!("{prefix}.b3b.w"),
        &format!("{prefix}.b3b.b"),
        r3,
        s1,
    )?;
    let pooled = tape.max_pool3d_same(x, [temporal_kernel, 3, 3])?;
    let p4 = conv_relu(
        tape,
        bound,
        &format!("{prefix}.b4.w"),
        &format!("{prefix}.b4.b"),
        pooled,
        s1,
    )?;
    tape.concat(&[p1, p2, p3, p4], 3)
}

/// Squeeze-excitation: squeeze by global average pooling, excite through a
/// bias-free two-layer bottleneck, and rescale every channel of `x` by its
/// sigmoid gate.
pub fn se_apply(tape: &mut Tape, bound: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w1 = bound.var(&format!("{prefix}.w1"))?;
    let w2 = bound.var(&format!("{prefix}.w2"))?;
    let c = tape.shape(x)[3];
    let z = tape.reduce_mean(x, &[0, 1, 2])?;
    let z_row = tape.reshape(z, vec![1, c])?;
    let h = tape.matmul(z_row, w1)?;
    let h = tape.relu(h);
    let s = tape.matmul(h, w2)?;
    let s = tape.sigmoid(s);
    let s = tape.reshape(s, vec![c])?;
    tape.mul(x, s)
}

/// Run one stream end to end: `[n, H, W, Cin]` input to `[n, D]`
/// per-frame features.
pub fn extract_visual_features(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    cfg: &StreamConfig,
    frames: Var,
) -> Result<Var> {
    let s = tape.shape(frames).to_vec();
    if s.len() != 4 || s[3] != cfg.in_channels || s[1] != cfg.spatial || s[2] != cfg.spatial {
        return Err(EngineError::Dimension {
            op: "extract_visual_features",
            msg: format!(
                "expected [n, {sp}, {sp}, {c}], got {s:?}",
                sp = cfg.spatial,
                c = cfg.in_channels
            ),
        });
    }
    let mut x = conv_relu(
        tape,
        bound,
        &format!("{prefix}.stem.w"),
        &format!("{prefix}.stem.b"),
        frames,
        [1, 2, 2],
    )?;
    for i in 0..cfg.blocks.len() {
        x = inception_block(
            tape,
            bound,
            &format!("{prefix}.inc{i}"),
            cfg.temporal_kernel,
            x,
        )?;
        if cfg.use_se {
            x = se_apply(tape, bound, &format!("{prefix}.inc{i}.se"), x)?;
        }
    }
    let pooled = tape.reduce_mean(x, &[1, 2])?;
    let w = bound.var(&format!("{prefix}.proj.w"))?;
    let b = bound.var(&format!("{prefix}.proj.b"))?;
    let projected = tape.matmul(pooled, w)?;
    tape.add(projected, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_cfg(in_channels: usize, temporal_kernel: usize) -> StreamConfig {
        StreamConfig {
            in_channels,
            spatial: 8,
            stem_channels: 4,
            temporal_kernel,
            blocks: vec![InceptionSpec {
                b1: 2,
                b2_reduce: 2,
                b2: 4,
                b3_reduce: 2,
                b3: 4,
                pool_proj: 2,
            }],
            use_se: true,
            se_ratio: 4,
            feature_dim: 6,
        }
    }

    fn run_stream(cfg: &StreamConfig, frames: &Tensor, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        init_stream_params(&mut ps, "s", cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let x = tape.leaf(frames);
        let feats = extract_visual_features(&mut tape, &bound, "s", cfg, x).unwrap();
        assert_eq!(tape.shape(feats), &[frames.shape()[0], cfg.feature_dim]);
        tape.value(feats).to_vec()
    }

    #[test]
    fn feature_rows_match_frame_count() {
        let cfg = tiny_cfg(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [2, 4, 5] {
            let frames = Tensor::uniform_range(vec![n, 8, 8, 3], 0.0, 1.0, &mut rng);
            let out = run_stream(&cfg, &frames, 7);
            assert_eq!(out.len(), n * cfg.feature_dim);
        }
    }

    #[test]
    fn se_toggle_changes_param_count_by_formula() {
        let mut with = tiny_cfg(3, 3);
        let mut without = with.clone();
        without.use_se = false;
        let count = |cfg: &StreamConfig| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut ps = ParamSet::new();
            init_stream_params(&mut ps, "s", cfg, &mut rng).unwrap();
            ps.total_scalars()
        };
        let delta = count(&with) - count(&without);
        assert_eq!(delta, with.se_scalars());
        // One site, 12 channels, ratio 4: 2*12*12/4.
        assert_eq!(delta, 72);
        with.se_ratio = 3;
        without.se_ratio = 3;
        assert_eq!(count(&with) - count(&without), 96);
    }

    #[test]
    fn se_gate_stays_strictly_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = 8;
        let mut ps = ParamSet::new();
        ps.register(
            "se.w1",
            ParamGroup::Extractor,
            Tensor::uniform_init(vec![c, 2], c, &mut rng),
        )
        .unwrap();
        ps.register(
            "se.w2",
            ParamGroup::Extractor,
            Tensor::uniform_init(vec![2, c], 2, &mut rng),
        )
        .unwrap();
        let x = Tensor::uniform_range(vec![2, 3, 3, c], -4.0, 4.0, &mut rng);
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let xv = tape.leaf(&x);
        let gated = se_apply(&mut tape, &bound, "se", xv).unwrap();
        for (i, (&orig, &out)) in x.data().iter().zip(tape.value(gated)).enumerate() {
            if orig != 0.0 {
                let scale = out / orig;
                assert!(scale > 0.0 && scale < 1.0, "scale {scale} at {i}");
            }
        }
    }

    #[test]
    fn per_frame_config_isolates_frames_without_se() {
        // With temporal extent 1 everywhere and no cross-frame SE squeeze,
        // editing frame 0 must leave frame 1's features bit-identical.
        let mut cfg = tiny_cfg(3, 1);
        cfg.use_se = false;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let base = Tensor::uniform_range(vec![3, 8, 8, 3], 0.0, 1.0, &mut rng);
        let mut edited = base.clone();
        for v in &mut edited.data_mut()[..8 * 8 * 3] {
            *v += 0.5;
        }
        let a = run_stream(&cfg, &base, 13);
        let b = run_stream(&cfg, &edited, 13);
        assert_ne!(a[..cfg.feature_dim], b[..cfg.feature_dim]);
        assert_eq!(a[cfg.feature_dim..], b[cfg.feature_dim..]);
    }

    #[test]
    fn frame_permutation_permutes_feature_rows() {
        // All temporal kernels 1: reversing the frames reverses the rows.
        // The SE squeeze averages over time, which is permutation
        // invariant up to summation rounding.
        let cfg = tiny_cfg(3, 1);
        let d = cfg.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let base = Tensor::uniform_range(vec![4, 8, 8, 3], 0.0, 1.0, &mut rng);
        let per = 8 * 8 * 3;
        let mut reversed_data = Vec::with_capacity(base.numel());
        for f in (0..4).rev() {
            reversed_data.extend_from_slice(&base.data()[f * per..(f + 1) * per]);
        }
        let reversed = Tensor::from_vec(vec![4, 8, 8, 3], reversed_data).unwrap();
        let a = run_stream(&cfg, &base, 31);
        let b = run_stream(&cfg, &reversed, 31);
        for f in 0..4 {
            let row_a = &a[f * d..(f + 1) * d];
            let row_b = &b[(3 - f) * d..(4 - f) * d];
            for (x, y) in row_a.iter().zip(row_b) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn clip_shape_validation() {
        let rgb = Tensor::zeros(vec![4, 8, 8, 3]);
        let flow = Tensor::zeros(vec![3, 8, 8, 2]);
        let clip = VideoClip::new(rgb.clone(), flow).unwrap();
        assert_eq!(clip.frames(), 4);

        let bad_flow = Tensor::zeros(vec![2, 8, 8, 2]);
        assert!(VideoClip::new(rgb, bad_flow).is_err());

        let one_frame = Tensor::zeros(vec![1, 8, 8, 3]);
        let no_flow = Tensor::zeros(vec![1, 8, 8, 2]);
        assert!(matches!(
            VideoClip::new(one_frame, no_flow),
            Err(EngineError::ClipTooShort { .. })
        ));
    }

    #[test]
    fn inclusive_window_counts() {
        let rgb = Tensor::from_vec(vec![10, 1, 1, 3], (0..30).map(|v| v as f64).collect()).unwrap();
        let flow = Tensor::zeros(vec![9, 1, 1, 2]);
        let clip = VideoClip::new(rgb, flow).unwrap();
        let w = clip.window(2, 6).unwrap();
        assert_eq!(w.rgb.shape()[0], 5);
        assert_eq!(w.flow.shape()[0], 4);
        // First windowed frame is original frame 2.
        assert_eq!(w.rgb.data()[0], 6.0);
        assert!(clip.window(6, 6).is_err());
        assert!(clip.window(2, 10).is_err());
    }
}
