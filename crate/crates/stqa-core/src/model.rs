//! Channel models: parameter layout and end-to-end forward passes from
//! raw inputs to per-candidate scores.
//!
//! Three independent channels exist: the subtitle text channel and one
//! channel per visual stream (RGB appearance, optical flow). Each is
//! trained separately and combined only by the inference ensemble.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};
use crate::fusion::{context_match, fuse, level_adjust};
use crate::params::{BoundParams, ParamGroup, ParamSet};
use crate::scoring::{score_textual, score_visual, Channel};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::text::{encode_query, BiLstmVars, QueryPack, TokenSeq, Vocab};
use crate::video::{
    extract_visual_features, init_stream_params, StreamConfig, StreamKind, VideoClip,
};

/// Configuration of the subtitle text channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextChannelConfig {
    pub candidates: usize,
    /// Embedding width d.
    pub embed_dim: usize,
    /// Hidden width per LSTM direction for query and subtitle encoders;
    /// sequence features are twice this.
    pub hidden: usize,
    /// Hidden width per direction of the scoring LSTM.
    pub score_hidden: usize,
}

impl Default for TextChannelConfig {
    fn default() -> Self {
        TextChannelConfig {
            candidates: 5,
            embed_dim: 50,
            hidden: 50,
            score_hidden: 50,
        }
    }
}

/// Configuration of one visual stream channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamChannelConfig {
    pub candidates: usize,
    pub kind: StreamKind,
    pub stream: StreamConfig,
    pub embed_dim: usize,
    /// Query LSTM hidden width per direction.
    pub query_hidden: usize,
    /// Leaky slope of the level adjusting layers.
    pub alpha: f64,
}

impl StreamChannelConfig {
    pub fn toy(kind: StreamKind) -> Self {
        StreamChannelConfig {
            candidates: 5,
            kind,
            stream: StreamConfig::toy(kind.in_channels()),
            embed_dim: 50,
            query_hidden: 32,
            alpha: 0.01,
        }
    }
}

/// Serializable model identity stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "channel", rename_all = "snake_case")]
pub enum ChannelConfig {
    Text {
        vocab_size: usize,
        #[serde(flatten)]
        cfg: TextChannelConfig,
    },
    Stream {
        vocab_size: usize,
        #[serde(flatten)]
        cfg: StreamChannelConfig,
    },
}

impl ChannelConfig {
    pub fn channel(&self) -> Channel {
        match self {
            ChannelConfig::Text { .. } => Channel::Text,
            ChannelConfig::Stream { cfg, .. } => match cfg.kind {
                StreamKind::Rgb => Channel::Spt,
                StreamKind::Flow => Channel::Tpr,
            },
        }
    }

    pub fn candidates(&self) -> usize {
        match self {
            ChannelConfig::Text { cfg, .. } => cfg.candidates,
            ChannelConfig::Stream { cfg, .. } => cfg.candidates,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            ChannelConfig::Text { vocab_size, .. } => *vocab_size,
            ChannelConfig::Stream { vocab_size, .. } => *vocab_size,
        }
    }
}

/// One question's model-facing inputs. Channels ignore the modalities
/// they do not consume.
#[derive(Debug, Clone, Copy)]
pub struct ExampleInput<'a> {
    pub clip: Option<&'a VideoClip>,
    pub subtitle: Option<&'a TokenSeq>,
    pub pack: &'a QueryPack,
}

/// A channel model: configuration plus its parameter set.
#[derive(Debug, Clone)]
pub struct Model {
    config: ChannelConfig,
    params: ParamSet,
}

impl Model {
    /// Initialize a text channel with seeded parameters.
    pub fn init_text(cfg: TextChannelConfig, vocab: &Vocab, seed: u64) -> Result<Model> {
        if cfg.candidates < 2 {
            return Err(EngineError::Config("need at least 2 candidates".into()));
        }
        if vocab.dim() != cfg.embed_dim {
            return Err(EngineError::Config(format!(
                "vocab width {} != configured embedding width {}",
                vocab.dim(),
                cfg.embed_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let g = ParamGroup::Head;
        ps.register("emb", g, vocab.init_table(&mut rng))?;
        crate::text::init_bilstm_params(&mut ps, "qenc", cfg.embed_dim, cfg.hidden, g, &mut rng)?;
        crate::text::init_bilstm_params(&mut ps, "senc", cfg.embed_dim, cfg.hidden, g, &mut rng)?;
        let fused_width = 5 * 2 * cfg.hidden;
        crate::text::init_bilstm_params(
            &mut ps,
            "slstm",
            fused_width,
            cfg.score_hidden,
            g,
            &mut rng,
        )?;
        ps.register(
            "score.w",
            g,
            Tensor::uniform_init(
                vec![2 * cfg.score_hidden, 1],
                2 * cfg.score_hidden,
                &mut rng,
            ),
        )?;
        ps.register("score.b", g, Tensor::zeros(vec![1]))?;
        Ok(Model {
            config: ChannelConfig::Text {
                vocab_size: vocab.len(),
                cfg,
            },
            params: ps,
        })
    }

    /// Initialize a visual stream channel with seeded parameters.
    pub fn init_stream(cfg: StreamChannelConfig, vocab: &Vocab, seed: u64) -> Result<Model> {
        if cfg.candidates < 2 {
            return Err(EngineError::Config("need at least 2 candidates".into()));
        }
        if vocab.dim() != cfg.embed_dim {
            return Err(EngineError::Config(format!(
                "vocab width {} != configured embedding width {}",
                vocab.dim(),
                cfg.embed_dim
            )));
        }
        if cfg.stream.in_channels != cfg.kind.in_channels() {
            return Err(EngineError::Config(format!(
                "stream config expects {} input channels but {} stream carries {}",
                cfg.stream.in_channels,
                cfg.kind.name(),
                cfg.kind.in_channels()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        init_stream_params(&mut ps, "vext", &cfg.stream, &mut rng)?;
        let g = ParamGroup::Head;
        let d = cfg.stream.feature_dim;
        let qw = 2 * cfg.query_hidden;
        ps.register("emb", g, vocab.init_table(&mut rng))?;
        crate::text::init_bilstm_params(
            &mut ps,
            "qenc",
            cfg.embed_dim,
            cfg.query_hidden,
            g,
            &mut rng,
        )?;
        ps.register("la_v.w", g, Tensor::uniform_init(vec![d, d], d, &mut rng))?;
        ps.register("la_v.b", g, Tensor::zeros(vec![d]))?;
        ps.register("la_t.w", g, Tensor::uniform_init(vec![qw, d], qw, &mut rng))?;
        ps.register("la_t.b", g, Tensor::zeros(vec![d]))?;
        ps.register(
            "score.w",
            g,
            Tensor::uniform_init(vec![5 * d, 1], 5 * d, &mut rng),
        )?;
        ps.register("score.b", g, Tensor::zeros(vec![1]))?;
        Ok(Model {
            config: ChannelConfig::Stream {
                vocab_size: vocab.len(),
                cfg,
            },
            params: ps,
        })
    }

    /// Rebuild a model around restored parameters (checkpoint loading).
    pub fn from_parts(config: ChannelConfig, params: ParamSet) -> Model {
        Model { config, params }
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    pub fn channel(&self) -> Channel {
        self.config.channel()
    }

    pub fn candidates(&self) -> usize {
        self.config.candidates()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Re-apply structural parameter invariants after an in-place update:
    /// the padding embedding row stays all-zero.
    pub fn enforce_invariants(&mut self) {
        if let Some(table) = self.params.get_mut("emb") {
            let d = table.shape()[1];
            for v in &mut table.data_mut()[..d] {
                *v = 0.0;
            }
        }
    }

    /// Raw per-candidate scores `[K]` for one example on the given tape.
    pub fn forward_scores(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        input: ExampleInput<'_>,
    ) -> Result<Var> {
        if input.pack.candidates() != self.candidates() {
            return Err(EngineError::Config(format!(
                "question has {} candidates, model expects {}",
                input.pack.candidates(),
                self.candidates()
            )));
        }
        match &self.config {
            ChannelConfig::Text { cfg, .. } => {
                let sub = input.subtitle.ok_or_else(|| {
                    EngineError::Validation("text channel needs subtitle tokens".into())
                })?;
                self.text_scores(tape, bound, cfg, sub, input.pack)
            }
            ChannelConfig::Stream { cfg, .. } => {
                let clip = input.clip.ok_or_else(|| {
                    EngineError::Validation("stream channel needs a video clip".into())
                })?;
                self.stream_scores(tape, bound, cfg, clip, input.pack)
            }
        }
    }

    fn text_scores(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        cfg: &TextChannelConfig,
        subtitle: &TokenSeq,
        pack: &QueryPack,
    ) -> Result<Var> {
        let table = bound.var("emb")?;
        let senc = BiLstmVars::from_bound(bound, "senc")?;
        let sub_emb = crate::text::embed(tape, table, subtitle)?;
        let h_sub = crate::text::bilstm_vars(tape, sub_emb, &senc, cfg.hidden)?;
        let (h_q, h_a) = encode_query(tape, bound, "emb", "qenc", cfg.hidden, pack)?;
        let g_q = context_match(tape, h_sub, h_q)?;
        let w = bound.var("score.w")?;
        let b = bound.var("score.b")?;
        let mut scores = Vec::with_capacity(pack.candidates());
        for &ha in &h_a {
            let g_a = context_match(tape, h_sub, ha)?;
            let m = fuse(tape, h_sub, g_q, g_a)?;
            let s = score_textual(tape, bound, "slstm", cfg.score_hidden, m, w, b)?;
            scores.push(tape.reshape(s, vec![1])?);
        }
        tape.concat(&scores, 0)
    }

    fn stream_scores(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        cfg: &StreamChannelConfig,
        clip: &VideoClip,
        pack: &QueryPack,
    ) -> Result<Var> {
        let frames = tape.leaf(clip.stream(cfg.kind));
        let v = extract_visual_features(tape, bound, "vext", &cfg.stream, frames)?;
        let la_vw = bound.var("la_v.w")?;
        let la_vb = bound.var("la_v.b")?;
        let v_adj = level_adjust(tape, v, la_vw, la_vb, cfg.alpha)?;
        let (h_q, h_a) = encode_query(tape, bound, "emb", "qenc", cfg.query_hidden, pack)?;
        let la_tw = bound.var("la_t.w")?;
        let la_tb = bound.var("la_t.b")?;
        let hq_adj = level_adjust(tape, h_q, la_tw, la_tb, cfg.alpha)?;
        let g_q = context_match(tape, v_adj, hq_adj)?;
        let w = bound.var("score.w")?;
        let b = bound.var("score.b")?;
        let mut scores = Vec::with_capacity(pack.candidates());
        for &ha in &h_a {
            let ha_adj = level_adjust(tape, ha, la_tw, la_tb, cfg.alpha)?;
            let g_a = context_match(tape, v_adj, ha_adj)?;
            let m = fuse(tape, v_adj, g_q, g_a)?;
            let s = score_visual(tape, m, w, b)?;
            scores.push(tape.reshape(s, vec![1])?);
        }
        tape.concat(&scores, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_vocab(dim: usize) -> Vocab {
        Vocab::from_tokens(
            ["red", "blue", "box", "moves", "left", "right", "still"],
            dim,
        )
        .unwrap()
    }

    fn tiny_stream_cfg(kind: StreamKind) -> StreamChannelConfig {
        StreamChannelConfig {
            candidates: 3,
            kind,
            stream: StreamConfig {
                in_channels: kind.in_channels(),
                spatial: 8,
                stem_channels: 4,
                temporal_kernel: 3,
                blocks: vec![crate::video::InceptionSpec {
                    b1: 2,
                    b2_reduce: 2,
                    b2: 4,
                    b3_reduce: 2,
                    b3: 4,
                    pool_proj: 2,
                }],
                use_se: true,
                se_ratio: 4,
                feature_dim: 8,
            },
            embed_dim: 6,
            query_hidden: 4,
            alpha: 0.01,
        }
    }

    fn tiny_pack(v: &Vocab) -> QueryPack {
        QueryPack::new(
            v.encode("box moves").unwrap(),
            vec![
                v.encode("left").unwrap(),
                v.encode("right").unwrap(),
                v.encode("still").unwrap(),
            ],
            1,
        )
        .unwrap()
    }

    #[test]
    fn text_channel_produces_k_scores() {
        let v = small_vocab(6);
        let cfg = TextChannelConfig {
            candidates: 3,
            embed_dim: 6,
            hidden: 4,
            score_hidden: 3,
        };
        let model = Model::init_text(cfg, &v, 99).unwrap();
        let sub = v.encode("red box moves left").unwrap();
        let pack = tiny_pack(&v);
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let scores = model
            .forward_scores(
                &mut tape,
                &bound,
                ExampleInput {
                    clip: None,
                    subtitle: Some(&sub),
                    pack: &pack,
                },
            )
            .unwrap();
        assert_eq!(tape.shape(scores), &[3]);
        assert!(tape.value(scores).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn stream_channel_produces_k_scores_and_ignores_other_stream() {
        let v = small_vocab(6);
        let model = Model::init_stream(tiny_stream_cfg(StreamKind::Rgb), &v, 7).unwrap();
        let pack = tiny_pack(&v);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rgb = Tensor::uniform_range(vec![4, 8, 8, 3], 0.0, 1.0, &mut rng);
        let flow_a = Tensor::uniform_range(vec![3, 8, 8, 2], -1.0, 1.0, &mut rng);
        let flow_b = Tensor::uniform_range(vec![3, 8, 8, 2], -1.0, 1.0, &mut rng);
        let run = |clip: &VideoClip| {
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape);
            let s = model
                .forward_scores(
                    &mut tape,
                    &bound,
                    ExampleInput {
                        clip: Some(clip),
                        subtitle: None,
                        pack: &pack,
                    },
                )
                .unwrap();
            tape.value(s).to_vec()
        };
        let clip_a = VideoClip::new(rgb.clone(), flow_a).unwrap();
        let clip_b = VideoClip::new(rgb, flow_b).unwrap();
        let sa = run(&clip_a);
        let sb = run(&clip_b);
        assert_eq!(sa.len(), 3);
        // RGB channel never reads the flow tensor.
        assert_eq!(sa, sb);
    }

    #[test]
    fn missing_modality_is_a_validation_error() {
        let v = small_vocab(6);
        let model = Model::init_text(
            TextChannelConfig {
                candidates: 3,
                embed_dim: 6,
                hidden: 3,
                score_hidden: 3,
            },
            &v,
            1,
        )
        .unwrap();
        let pack = tiny_pack(&v);
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let err = model
            .forward_scores(
                &mut tape,
                &bound,
                ExampleInput {
                    clip: None,
                    subtitle: None,
                    pack: &pack,
                },
            )
            .unwrap_err();
        assert!(matches!(err, EngineError::Validation(_)));
    }

    #[test]
    fn candidate_count_mismatch_rejected() {
        let v = small_vocab(6);
        let model = Model::init_text(
            TextChannelConfig {
                candidates: 5,
                embed_dim: 6,
                hidden: 3,
                score_hidden: 3,
            },
            &v,
            1,
        )
        .unwrap();
        let pack = tiny_pack(&v);
        let sub = v.encode("red").unwrap();
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        assert!(matches!(
            model.forward_scores(
                &mut tape,
                &bound,
                ExampleInput {
                    clip: None,
                    subtitle: Some(&sub),
                    pack: &pack
                },
            ),
            Err(EngineError::Config(_))
        ));
    }

    #[test]
    fn same_seed_same_parameters() {
        let v = small_vocab(6);
        let cfg = tiny_stream_cfg(StreamKind::Flow);
        let a = Model::init_stream(cfg.clone(), &v, 31).unwrap();
        let b = Model::init_stream(cfg, &v, 31).unwrap();
        for (ea, eb) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(ea.name, eb.name);
            assert_eq!(ea.tensor.data(), eb.tensor.data());
        }
    }

    #[test]
    fn extractor_and_head_groups_both_present_in_stream_model() {
        let v = small_vocab(6);
        let model = Model::init_stream(tiny_stream_cfg(StreamKind::Rgb), &v, 3).unwrap();
        let has = |g: ParamGroup| model.params().iter().any(|e| e.group == g);
        assert!(has(ParamGroup::Extractor));
        assert!(has(ParamGroup::Head));
        // Text-side parameters must not sit in the extractor group.
        for e in model.params().iter() {
            if e.name.starts_with("vext.") {
                assert_eq!(e.group, ParamGroup::Extractor, "{}", e.name);
            } else {
                assert_eq!(e.group, ParamGroup::Head, "{}", e.name);
            }
        }
    }

    #[test]
    fn config_json_round_trip() {
        let v = small_vocab(6);
        let model = Model::init_stream(tiny_stream_cfg(StreamKind::Rgb), &v, 3).unwrap();
        let json = serde_json::to_string(model.config()).unwrap();
        let back: ChannelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(&back, model.config());
        assert_eq!(back.channel(), Channel::Spt);
    }

    #[test]
    fn pad_row_restored_by_invariant_enforcement() {
        let v = small_vocab(6);
        let mut model = Model::init_text(
            TextChannelConfig {
                candidates: 3,
                embed_dim: 6,
                hidden: 3,
                score_hidden: 3,
            },
            &v,
            1,
        )
        .unwrap();
        model.params_mut().get_mut("emb").unwrap().data_mut()[0] = 9.0;
        model.enforce_invariants();
        assert_eq!(model.params().get("emb").unwrap().data()[0], 0.0);
    }
}
