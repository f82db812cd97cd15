//! Dataset layout, manifest schema and validated loading.
//!
//! A dataset directory holds `manifest` (JSON), `vocab` (one token per
//! line), `clips/<id>/{rgb,flow}.bin` tensor files and `text/<id>.tok`
//! frame-tagged subtitle files. Question and answer token ids are stored
//! inline in the manifest.

pub mod synth;
pub mod tensor_io;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};
use crate::model::ExampleInput;
use crate::text::{QueryPack, TokenSeq, Vocab, PAD_TOKEN, UNK_TOKEN};
use crate::video::VideoClip;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest";
pub const VOCAB_FILE: &str = "vocab";

/// Synthetic question category, enabling per-type accuracy breakdowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    /// Answer is the direction the block moves; visible in both streams.
    Motion,
    /// Answer is the block color; visible only in RGB.
    Color,
    /// Answer is planted in the subtitle text alone.
    TextOnly,
    /// Answer is stated in the subtitle and shown in the video.
    Joint,
}

impl QuestionType {
    pub const ALL: [QuestionType; 4] = [
        QuestionType::Motion,
        QuestionType::Color,
        QuestionType::TextOnly,
        QuestionType::Joint,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::Motion => "motion",
            QuestionType::Color => "color",
            QuestionType::TextOnly => "text_only",
            QuestionType::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "motion" => Ok(QuestionType::Motion),
            "color" => Ok(QuestionType::Color),
            "text_only" => Ok(QuestionType::TextOnly),
            "joint" => Ok(QuestionType::Joint),
            other => Err(EngineError::Config(format!(
                "unknown question type {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(EngineError::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// One question entry in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// Directory with `rgb.bin` / `flow.bin`, relative to the dataset
    /// root; absent for text-only questions.
    pub clip: Option<String>,
    /// Frame-tagged subtitle token file, relative to the dataset root.
    pub subtitle: Option<String>,
    pub question: Vec<usize>,
    pub answers: Vec<Vec<usize>>,
    pub correct: usize,
    pub qtype: QuestionType,
    pub split: Split,
    /// Inclusive `[start_frame, end_frame]` localization window.
    pub window: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub candidates: usize,
    pub vocab: String,
    pub records: Vec<ManifestRecord>,
}

/// One fully materialized question with windowing applied.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub clip: Option<VideoClip>,
    pub subtitle: Option<TokenSeq>,
    pub pack: QueryPack,
    pub qtype: QuestionType,
}

impl Example {
    pub fn input(&self) -> ExampleInput<'_> {
        ExampleInput {
            clip: self.clip.as_ref(),
            subtitle: self.subtitle.as_ref(),
            pack: &self.pack,
        }
    }
}

/// A validated dataset rooted at a directory; tensors load lazily per
/// example.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
    vocab: Vocab,
}

impl Dataset {
    /// Open and validate. `embed_dim` fixes the vocabulary's embedding
    /// width (the vocab file stores only tokens).
    pub fn open(root: &Path, embed_dim: usize) -> Result<Dataset> {
        let manifest_path = root.join(MANIFEST_FILE);
        let raw = fs::read_to_string(&manifest_path)
            .map_err(|e| EngineError::io(format!("reading {}", manifest_path.display()), e))?;
        let manifest: DatasetManifest = serde_json::from_str(&raw)
            .map_err(|e| EngineError::Validation(format!("{}: {e}", manifest_path.display())))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(EngineError::Validation(format!(
                "manifest version {} unsupported (engine speaks {MANIFEST_VERSION})",
                manifest.version
            )));
        }
        if manifest.candidates < 2 {
            return Err(EngineError::Validation(
                "manifest: fewer than 2 candidates".into(),
            ));
        }
        let vocab = read_vocab(&root.join(&manifest.vocab), embed_dim)?;
        let ds = Dataset {
            root: root.to_path_buf(),
            manifest,
            vocab,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let k = self.manifest.candidates;
        let v = self.vocab.len();
        for (i, r) in self.manifest.records.iter().enumerate() {
            let fail =
                |msg: String| EngineError::Validation(format!("record {i} ({}): {msg}", r.id));
            if r.answers.len() != k {
                return Err(fail(format!(
                    "{} answers, manifest says {k}",
                    r.answers.len()
                )));
            }
            if r.correct >= k {
                return Err(fail(format!("correct index {} out of {k}", r.correct)));
            }
            if r.question.is_empty() {
                return Err(fail("empty question".into()));
            }
            for ids in std::iter::once(&r.question).chain(r.answers.iter()) {
                if ids.is_empty() {
                    return Err(fail("empty answer token list".into()));
                }
                if let Some(&bad) = ids.iter().find(|&&t| t >= v) {
                    return Err(fail(format!("token id {bad} outside vocab of {v}")));
                }
            }
            if let Some(clip) = &r.clip {
                for file in ["rgb.bin", "flow.bin"] {
                    let p = self.root.join(clip).join(file);
                    if !p.is_file() {
                        return Err(fail(format!("missing {}", p.display())));
                    }
                }
            }
            if let Some(sub) = &r.subtitle {
                if !self.root.join(sub).is_file() {
                    return Err(fail(format!("missing {sub}")));
                }
            }
            if let Some([a, b]) = r.window {
                if a >= b {
                    return Err(fail(format!("window [{a}, {b}] spans fewer than 2 frames")));
                }
            }
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn candidates(&self) -> usize {
        self.manifest.candidates
    }

    pub fn len(&self) -> usize {
        self.manifest.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.records.is_empty()
    }

    /// Record indices belonging to a split, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Per-split record counts.
    pub fn split_sizes(&self) -> BTreeMap<Split, usize> {
        let mut out = BTreeMap::new();
        for r in &self.manifest.records {
            *out.entry(r.split).or_insert(0) += 1;
        }
        out
    }

    /// Materialize one question: read tensors and subtitles, apply the
    /// localization window.
    pub fn example(&self, idx: usize) -> Result<Example> {
        let r =
            self.manifest.records.get(idx).ok_or_else(|| {
                EngineError::Validation(format!("record index {idx} out of range"))
            })?;
        let fail = |msg: String| EngineError::Validation(format!("record {idx} ({}): {msg}", r.id));

        let mut clip = match &r.clip {
            Some(dir) => {
                let rgb = tensor_io::read_tensor(&self.root.join(dir).join("rgb.bin"))?;
                let flow = tensor_io::read_tensor(&self.root.join(dir).join("flow.bin"))?;
                Some(VideoClip::new(rgb, flow)?)
            }
            None => None,
        };
        let mut subtitle_frames = match &r.subtitle {
            Some(rel) => Some(read_subtitle(&self.root.join(rel))?),
            None => None,
        };
        if let Some([a, b]) = r.window {
            if let Some(c) = clip.take() {
                clip = Some(c.window(a, b).map_err(|e| fail(e.to_string()))?);
            }
            if let Some(frames) = subtitle_frames.take() {
                subtitle_frames = Some(
                    frames
                        .into_iter()
                        .filter(|&(f, _)| f >= a && f <= b)
                        .collect(),
                );
            }
        }
        let subtitle = match subtitle_frames {
            Some(frames) => {
                let ids: Vec<usize> = frames.iter().map(|(_, t)| self.vocab.id(t)).collect();
                Some(TokenSeq::new(ids).map_err(|_| {
                    fail("no subtitle tokens inside the localization window".into())
                })?)
            }
            None => None,
        };
        let question = TokenSeq::new(r.question.clone()).map_err(|e| fail(e.to_string()))?;
        let answers = r
            .answers
            .iter()
            .map(|ids| TokenSeq::new(ids.clone()))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| fail(e.to_string()))?;
        let pack = QueryPack::new(question, answers, r.correct)?;
        Ok(Example {
            id: r.id.clone(),
            clip,
            subtitle,
            pack,
            qtype: r.qtype,
        })
    }
}

/// Write the token list, one per line, reserved tokens first.
pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut out = String::new();
    for t in vocab.tokens() {
        out.push_str(t);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| EngineError::io(format!("writing {}", path.display()), e))
}

/// Read a token-per-line vocab file with the reserved header tokens.
pub fn read_vocab(path: &Path, dim: usize) -> Result<Vocab> {
    let raw = fs::read_to_string(path)
        .map_err(|e| EngineError::io(format!("reading {}", path.display()), e))?;
    let lines: Vec<&str> = raw.lines().collect();
    if lines.len() < 2 || lines[0] != PAD_TOKEN || lines[1] != UNK_TOKEN {
        return Err(EngineError::Validation(format!(
            "{}: vocab must start with {PAD_TOKEN} and {UNK_TOKEN}",
            path.display()
        )));
    }
    Vocab::from_tokens(lines[2..].iter().map(|s| s.to_string()), dim)
        .map_err(|e| EngineError::Validation(format!("{}: {e}", path.display())))
}

/// Write a frame-tagged subtitle file: one `<frame> <token>` pair per
/// line.
pub fn write_subtitle(path: &Path, tagged: &[(usize, String)]) -> Result<()> {
    let mut out = String::new();
    for (frame, token) in tagged {
        out.push_str(&format!("{frame} {token}\n"));
    }
    fs::write(path, out).map_err(|e| EngineError::io(format!("writing {}", path.display()), e))
}

/// Read a frame-tagged subtitle file.
pub fn read_subtitle(path: &Path) -> Result<Vec<(usize, String)>> {
    let raw = fs::read_to_string(path)
        .map_err(|e| EngineError::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let frame: usize = parts
            .next()
            .unwrap()
            .parse()
            .map_err(|_| bad_tok_line(path, lineno))?;
        let token = parts.next().ok_or_else(|| bad_tok_line(path, lineno))?;
        if parts.next().is_some() {
            return Err(bad_tok_line(path, lineno));
        }
        out.push((frame, token.to_string()));
    }
    Ok(out)
}

fn bad_tok_line(path: &Path, lineno: usize) -> EngineError {
    EngineError::Validation(format!(
        "{} line {}: expected `<frame> <token>`",
        path.display(),
        lineno + 1
    ))
}

/// Save a manifest as pretty JSON (stable field order, diffable).
pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| EngineError::Validation(format!("serializing manifest: {e}")))?;
    fs::write(path, json + "\n")
        .map_err(|e| EngineError::io(format!("writing {}", path.display()), e))
}
