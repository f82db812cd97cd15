//! Synthetic block-world dataset generator.
//!
//! Every clip shows a single colored square translating at constant
//! velocity over a static ramp backdrop, trailed by a motion-blur ghost,
//! so optical flow is known analytically and the correct answer is
//! decidable by construction:
//! motion and color questions from the pixels, text questions from a
//! sentence planted in the subtitle. One seeded RNG drives everything, so
//! a given (config, seed) pair reproduces the dataset byte for byte.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    tensor_io, write_manifest, write_subtitle, write_vocab, DatasetManifest, ManifestRecord,
    QuestionType, Split, MANIFEST_FILE, MANIFEST_VERSION, VOCAB_FILE,
};
use crate::error::{EngineError, Result};
use crate::tensor::Tensor;
use crate::text::Vocab;

/// Color words with their RGB pixel values.
pub const COLORS: [(&str, [f64; 3]); 5] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("white", [1.0, 1.0, 1.0]),
];

/// Motion words with their unit direction `(dx, dy)` in pixels; x grows
/// rightwards (columns), y grows downwards (rows).
pub const MOTIONS: [(&str, (i64, i64)); 5] = [
    ("left", (-1, 0)),
    ("right", (1, 0)),
    ("up", (0, -1)),
    ("down", (0, 1)),
    ("still", (0, 0)),
];

/// Peak backdrop intensity; kept under every palette value of 1.0 so a
/// backdrop pixel never equals a block color.
const RAMP: f64 = 0.6;

/// Trail intensities as fractions of the block color, one per step back
/// in time. A moving block leaves a tapered streak of ghosts at its
/// previous positions, like motion blur, so direction is decidable from
/// any single frame: the streak fades toward where the block came from.
/// The fractions avoid every palette value so a trail pixel never reads
/// as a block color.
const TRAIL: [f64; 3] = [0.5, 0.3, 0.15];

/// Answer pool for subtitle-only questions.
pub const SECRETS: [&str; 5] = ["anchor", "breeze", "cobalt", "dune", "ember"];

/// Distractor subtitle words; disjoint from every answer pool.
pub const FILLER: [&str; 12] = [
    "morning", "evening", "people", "talk", "music", "plays", "outside", "laughter", "coffee",
    "steam", "quiet", "corner",
];

const QUESTION_MOTION: &str = "which way does the block move";
const QUESTION_COLOR: &str = "what color is the block";
const QUESTION_SECRET: &str = "what is the secret word";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthConfig {
    pub questions: usize,
    /// Answer candidates per question; at most the pool size of 5.
    pub candidates: usize,
    pub frames: usize,
    pub spatial: usize,
    /// Block side length in pixels.
    pub block: usize,
    /// Translation speed in pixels per frame.
    pub speed: usize,
    /// Question types, cycled in order across the dataset.
    pub kinds: Vec<QuestionType>,
    /// Plant the answer-revealing sentence in subtitles. Disabled only
    /// for chance-level baseline data, where subtitles are pure filler
    /// and thus independent of the correct index.
    pub evidence: bool,
    /// Filler tokens per subtitle.
    pub filler: usize,
    /// Emit a `[1, frames-2]` localization window on every clip record.
    pub windows: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            questions: 100,
            candidates: 5,
            frames: 8,
            spatial: 24,
            block: 8,
            speed: 2,
            kinds: QuestionType::ALL.to_vec(),
            evidence: true,
            filler: 6,
            windows: false,
        }
    }
}

impl SynthConfig {
    /// Subtitle-solvable questions only; no video files at all.
    pub fn text(questions: usize) -> Self {
        SynthConfig {
            questions,
            kinds: vec![QuestionType::TextOnly],
            ..SynthConfig::default()
        }
    }

    /// Pixel-solvable questions only. Fewer frames and a larger block
    /// than the default: the block covers ~17% of each frame, so it
    /// survives the extractor's spatial average pooling with usable
    /// magnitude, and the shorter clips buy more optimizer steps per
    /// wall-clock minute.
    pub fn visual(questions: usize) -> Self {
        SynthConfig {
            questions,
            kinds: vec![QuestionType::Motion, QuestionType::Color],
            frames: 6,
            block: 10,
            ..SynthConfig::default()
        }
    }

    /// Every record carries both a clip and a subtitle, so all three
    /// channels can score it; windows exercise localization.
    pub fn ensemble(questions: usize) -> Self {
        SynthConfig {
            questions,
            kinds: vec![
                QuestionType::Motion,
                QuestionType::Color,
                QuestionType::Joint,
            ],
            windows: true,
            ..SynthConfig::default()
        }
    }

    /// Undecidable filler-only questions: any fixed model scores chance
    /// level in expectation because its input is independent of the
    /// correct index.
    pub fn baseline(questions: usize) -> Self {
        SynthConfig {
            questions,
            kinds: vec![QuestionType::TextOnly],
            evidence: false,
            ..SynthConfig::default()
        }
    }

    pub fn mixed(questions: usize) -> Self {
        SynthConfig {
            questions,
            ..SynthConfig::default()
        }
    }

    fn has_video(&self) -> bool {
        self.kinds.iter().any(|k| *k != QuestionType::TextOnly)
    }

    pub fn validate(&self) -> Result<()> {
        if self.questions == 0 {
            return Err(EngineError::Config(
                "question count must be positive".into(),
            ));
        }
        if self.candidates < 2 || self.candidates > COLORS.len() {
            return Err(EngineError::Config(format!(
                "candidates must be in 2..={}, got {}",
                COLORS.len(),
                self.candidates
            )));
        }
        if self.kinds.is_empty() {
            return Err(EngineError::Config(
                "at least one question type required".into(),
            ));
        }
        if !self.evidence && self.filler == 0 {
            return Err(EngineError::Config(
                "filler-only subtitles need at least one filler token".into(),
            ));
        }
        if self.has_video() {
            if self.frames < 2 {
                return Err(EngineError::Config("clips need at least 2 frames".into()));
            }
            if self.windows && self.frames < 4 {
                return Err(EngineError::Config(
                    "localization windows need at least 4 frames".into(),
                ));
            }
            if self.block == 0 || self.speed == 0 {
                return Err(EngineError::Config(
                    "block and speed must be positive".into(),
                ));
            }
            let travel = self.speed * (self.frames - 1);
            if self.spatial < self.block + travel {
                return Err(EngineError::Config(format!(
                    "spatial {} too small for block {} travelling {} px",
                    self.spatial, self.block, travel
                )));
            }
        }
        Ok(())
    }
}

/// Full token list shared by every generated dataset, so vocabularies
/// (and therefore token ids and trained embeddings) agree across
/// profiles.
pub fn synth_tokens() -> Vec<&'static str> {
    let mut out = vec![
        "which", "way", "does", "the", "block", "move", "moves", "what", "color", "is", "secret",
        "word",
    ];
    out.extend(MOTIONS.iter().map(|(w, _)| *w));
    out.extend(COLORS.iter().map(|(w, _)| *w));
    out.extend(SECRETS);
    out.extend(FILLER);
    out
}

/// Render the clip for a block of `color` starting at `(x0, y0)` moving
/// `(vx, vy)` px/frame. Returns `(rgb [n,S,S,3], flow [n-1,S,S,2])`;
/// flow at frame `t` is the velocity inside the frame-`t` footprint.
///
/// Two scene details keep the questions answerable after the extractor's
/// spatial average pooling:
///
/// * The backdrop is a static brightness ramp (red rises left to right,
///   green top to bottom) that the block occludes. Over a flat backdrop
///   the spatial mean of any translation-equivariant feature map is the
///   same wherever the block sits, so pooled rgb features would be blind
///   to position; occluding a ramp shifts the mean as the block travels.
/// * A moving block leaves a faded ghost at its previous position, like
///   motion blur. Per-frame scores are max-pooled over time, so each
///   frame must carry the direction on its own; the ghost marks the
///   trailing side within every single frame.
fn render_clip(
    cfg: &SynthConfig,
    color: [f64; 3],
    v: (i64, i64),
    start: (i64, i64),
) -> (Tensor, Tensor) {
    let (n, s, b) = (cfg.frames, cfg.spatial, cfg.block as i64);
    let mut rgb = vec![0.0; n * s * s * 3];
    let mut flow = vec![0.0; (n - 1) * s * s * 2];
    for t in 0..n {
        for row in 0..s {
            for col in 0..s {
                let p = ((t * s + row) * s + col) * 3;
                rgb[p] = RAMP * col as f64 / (s - 1) as f64;
                rgb[p + 1] = RAMP * row as f64 / (s - 1) as f64;
            }
        }
    }
    for t in 0..n {
        let x = start.0 + v.0 * t as i64;
        let y = start.1 + v.1 * t as i64;
        if v != (0, 0) {
            // Ghosts at previous positions, faintest first so nearer ones
            // win overlaps; clamped at the frame edge (early frames
            // extrapolate back past the start, which may stick out).
            for (k, f) in TRAIL.iter().enumerate().rev() {
                let back = k as i64 + 1;
                for row in (y - v.1 * back).max(0)..((y - v.1 * back + b).min(s as i64)) {
                    for col in (x - v.0 * back).max(0)..((x - v.0 * back + b).min(s as i64)) {
                        let p = ((t as i64 * s as i64 + row) * s as i64 + col) as usize * 3;
                        for (px, ch) in rgb[p..p + 3].iter_mut().zip(color) {
                            *px = ch * f;
                        }
                    }
                }
            }
        }
        for row in y..y + b {
            for col in x..x + b {
                let (row, col) = (row as usize, col as usize);
                let p = ((t * s + row) * s + col) * 3;
                rgb[p..p + 3].copy_from_slice(&color);
                if t + 1 < n {
                    let q = ((t * s + row) * s + col) * 2;
                    flow[q] = v.0 as f64;
                    flow[q + 1] = v.1 as f64;
                }
            }
        }
    }
    (
        Tensor::from_vec(vec![n, s, s, 3], rgb).unwrap(),
        Tensor::from_vec(vec![n - 1, s, s, 2], flow).unwrap(),
    )
}

/// Start coordinate keeping `x .. x + block + travel` inside `0..spatial`
/// for the whole trajectory.
fn start_coord(cfg: &SynthConfig, dir: i64, rng: &mut ChaCha8Rng) -> i64 {
    let travel = (cfg.speed * (cfg.frames - 1)) as i64;
    let hi = (cfg.spatial - cfg.block) as i64;
    let (lo, hi) = match dir.signum() {
        1 => (0, hi - travel),
        -1 => (travel, hi),
        _ => (0, hi),
    };
    rng.random_range(lo..=hi)
}

/// Candidate list: the true word plus distinct decoys from its pool,
/// shuffled. The uniform shuffle makes the correct index uniform.
fn pick_candidates<'a>(
    pool: &[&'a str],
    truth: &'a str,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<&'a str>, usize) {
    let mut decoys: Vec<&str> = pool.iter().copied().filter(|w| *w != truth).collect();
    decoys.shuffle(rng);
    let mut cands = vec![truth];
    cands.extend(decoys.into_iter().take(k - 1));
    cands.shuffle(rng);
    let correct = cands.iter().position(|w| *w == truth).unwrap();
    (cands, correct)
}

/// Filler prefix + evidence + filler suffix, split at a random point.
fn subtitle_tokens(evidence: &[&str], filler_count: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut filler: Vec<&str> = (0..filler_count)
        .map(|_| FILLER[rng.random_range(0..FILLER.len())])
        .collect();
    let cut = rng.random_range(0..=filler.len());
    let tail = filler.split_off(cut);
    filler
        .into_iter()
        .chain(evidence.iter().copied())
        .chain(tail)
        .map(str::to_string)
        .collect()
}

/// Tag tokens with frame numbers spread across the clip; when a window
/// will trim the clip edges, keep every token inside the surviving range.
fn tag_frames(tokens: Vec<String>, cfg: &SynthConfig, windowed: bool) -> Vec<(usize, String)> {
    let n = tokens.len();
    tokens
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let mut frame = i * cfg.frames / n.max(1);
            if windowed {
                frame = frame.clamp(1, cfg.frames - 2);
            }
            (frame, t)
        })
        .collect()
}

/// Generate a dataset directory at `root`. Returns the written manifest.
pub fn generate(root: &Path, cfg: &SynthConfig, seed: u64) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mkdir = |p: &Path| {
        fs::create_dir_all(p).map_err(|e| EngineError::io(format!("creating {}", p.display()), e))
    };
    mkdir(root)?;
    mkdir(&root.join("text"))?;
    if cfg.has_video() {
        mkdir(&root.join("clips"))?;
    }

    let vocab = Vocab::from_tokens(synth_tokens(), 1)?;
    write_vocab(&root.join(VOCAB_FILE), &vocab)?;
    let ids = |text: &str| -> Vec<usize> { text.split(' ').map(|w| vocab.id(w)).collect() };

    let motion_words: Vec<&str> = MOTIONS.iter().map(|(w, _)| *w).collect();
    let color_words: Vec<&str> = COLORS.iter().map(|(w, _)| *w).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(cfg.questions);
    for i in 0..cfg.questions {
        let kind = cfg.kinds[i % cfg.kinds.len()];
        // Within each type, indices cycle through ten slots: 8 train,
        // 1 val, 1 test.
        let split = match (i / cfg.kinds.len()) % 10 {
            8 => Split::Val,
            9 => Split::Test,
            _ => Split::Train,
        };
        let id = format!("q{i:05}");

        let mi = rng.random_range(0..MOTIONS.len());
        let ci = rng.random_range(0..COLORS.len());
        let si = rng.random_range(0..SECRETS.len());
        let (motion_word, unit) = MOTIONS[mi];
        let (color_word, color_val) = COLORS[ci];

        let (question, truth, pool): (&str, &str, &[&str]) = match kind {
            QuestionType::Motion | QuestionType::Joint => {
                (QUESTION_MOTION, motion_word, &motion_words)
            }
            QuestionType::Color => (QUESTION_COLOR, color_word, &color_words),
            QuestionType::TextOnly => (QUESTION_SECRET, SECRETS[si], &SECRETS),
        };
        let (cands, correct) = pick_candidates(pool, truth, cfg.candidates, &mut rng);

        let clip = if kind == QuestionType::TextOnly {
            None
        } else {
            let v = (unit.0 * cfg.speed as i64, unit.1 * cfg.speed as i64);
            let x0 = start_coord(cfg, unit.0, &mut rng);
            let y0 = start_coord(cfg, unit.1, &mut rng);
            let (rgb, flow) = render_clip(cfg, color_val, v, (x0, y0));
            let dir = format!("clips/{id}");
            mkdir(&root.join(&dir))?;
            tensor_io::write_tensor(&root.join(&dir).join("rgb.bin"), &rgb)?;
            tensor_io::write_tensor(&root.join(&dir).join("flow.bin"), &flow)?;
            Some(dir)
        };

        let evidence_text = match kind {
            QuestionType::TextOnly if cfg.evidence => {
                format!("the secret word is {}", SECRETS[si])
            }
            QuestionType::Joint if cfg.evidence => format!("the block moves {motion_word}"),
            _ => String::new(),
        };
        let evidence: Vec<&str> = if evidence_text.is_empty() {
            vec![]
        } else {
            evidence_text.split(' ').collect()
        };
        let window = if cfg.windows && clip.is_some() {
            Some([1, cfg.frames - 2])
        } else {
            None
        };
        let tokens = subtitle_tokens(&evidence, cfg.filler, &mut rng);
        let tagged = tag_frames(tokens, cfg, window.is_some());
        let subtitle_rel = format!("text/{id}.tok");
        write_subtitle(&root.join(&subtitle_rel), &tagged)?;

        records.push(ManifestRecord {
            id,
            clip,
            subtitle: Some(subtitle_rel),
            question: ids(question),
            answers: cands.iter().map(|w| vec![vocab.id(w)]).collect(),
            correct,
            qtype: kind,
            split,
            window,
        });
    }

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        candidates: cfg.candidates,
        vocab: VOCAB_FILE.into(),
        records,
    };
    write_manifest(&root.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Accuracy of the bag-of-words rule "pick the candidate sharing the most
/// tokens with the subtitle" over records of the given types. A score of
/// 1.0 certifies the split is linearly separable in bag-of-words space,
/// since the rule is a linear scorer with subtitle-indicator weights.
pub fn bag_of_words_accuracy(ds: &crate::data::Dataset, types: &[QuestionType]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for i in 0..ds.len() {
        let r = &ds.manifest().records[i];
        if !types.contains(&r.qtype) {
            continue;
        }
        let ex = ds.example(i)?;
        let sub = match &ex.subtitle {
            Some(s) => s.ids().to_vec(),
            None => vec![],
        };
        let overlap = |ans: &[usize]| ans.iter().filter(|t| sub.contains(t)).count();
        let mut best = 0usize;
        for (j, ans) in r.answers.iter().enumerate() {
            if overlap(ans) > overlap(&r.answers[best]) {
                best = j;
            }
        }
        hits += usize::from(best == r.correct);
        total += 1;
    }
    if total == 0 {
        return Err(EngineError::Validation(
            "no records of the requested types".into(),
        ));
    }
    Ok(hits as f64 / total as f64)
}
