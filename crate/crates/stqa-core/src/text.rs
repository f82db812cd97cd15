//! Tokenized-text encoding: vocabulary, trainable embeddings and a
//! bidirectional LSTM producing per-word sequence features.

use std::collections::{HashMap, HashSet};

use rand_chacha::ChaCha8Rng;

use crate::error::{EngineError, Result};
use crate::params::{BoundParams, ParamGroup, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Reserved padding token; its embedding row stays all-zero.
pub const PAD_ID: usize = 0;
/// Reserved id for tokens outside the vocabulary.
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token table with dense ids. Id 0 is padding, id 1 is unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
}

impl Vocab {
    /// Build from a unique, ordered token list (reserved tokens are added
    /// in front automatically).
    pub fn from_tokens<I, S>(tokens: I, dim: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        if dim == 0 {
            return Err(EngineError::Config(
                "embedding width must be positive".into(),
            ));
        }
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut index: HashMap<String, usize> = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        for t in tokens {
            let t = t.into();
            if index.contains_key(&t) {
                return Err(EngineError::Config(format!("duplicate vocab token {t:?}")));
            }
            index.insert(t.clone(), all.len());
            all.push(t);
        }
        Ok(Vocab {
            tokens: all,
            index,
            dim,
        })
    }

    /// Build from a corpus, keeping every distinct token in first-seen
    /// order.
    pub fn build(corpus: &[String], dim: usize) -> Result<Self> {
        let mut seen = Vec::new();
        let mut have: HashSet<String> = HashSet::new();
        for text in corpus {
            for tok in tokenize(text) {
                if tok != PAD_TOKEN && tok != UNK_TOKEN && have.insert(tok.clone()) {
                    seen.push(tok);
                }
            }
        }
        Vocab::from_tokens(seen, dim)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id for a token, falling back to the unknown id.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    /// Tokenize and map to ids; errors on text with no tokens.
    pub fn encode(&self, text: &str) -> Result<TokenSeq> {
        let ids: Vec<usize> = tokenize(text).iter().map(|t| self.id(t)).collect();
        TokenSeq::new(ids)
    }

    /// Fresh embedding table: seeded uniform rows with the padding row
    /// zeroed.
    pub fn init_table(&self, rng: &mut ChaCha8Rng) -> Tensor {
        let mut t = Tensor::uniform_init(vec![self.len(), self.dim], self.dim, rng);
        for v in &mut t.data_mut()[..self.dim] {
            *v = 0.0;
        }
        t
    }

    /// Overwrite table rows from pretrained vectors (one `token v1 .. vd`
    /// line each). Returns how many vocabulary rows were seeded; the
    /// padding row is never touched.
    pub fn seed_table(&self, table: &mut Tensor, text: &str) -> Result<usize> {
        if table.shape() != [self.len(), self.dim] {
            return Err(EngineError::Dimension {
                op: "seed_table",
                msg: format!(
                    "table shape {:?} does not match vocab [{}, {}]",
                    table.shape(),
                    self.len(),
                    self.dim
                ),
            });
        }
        let mut seeded = 0;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts.next().unwrap();
            let values: Vec<f64> = parts
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| {
                    EngineError::Validation(format!(
                        "embedding line {}: bad float: {e}",
                        lineno + 1
                    ))
                })?;
            if values.len() != self.dim {
                return Err(EngineError::Validation(format!(
                    "embedding line {}: expected {} values, got {}",
                    lineno + 1,
                    self.dim,
                    values.len()
                )));
            }
            if let Some(&id) = self.index.get(token) {
                if id == PAD_ID {
                    continue;
                }
                table.data_mut()[id * self.dim..(id + 1) * self.dim].copy_from_slice(&values);
                seeded += 1;
            }
        }
        Ok(seeded)
    }
}

/// Lowercase split on whitespace and punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Non-empty id sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    ids: Vec<usize>,
}

impl TokenSeq {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(EngineError::Contract("empty token sequence".into()));
        }
        Ok(TokenSeq { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// A question with its candidate answers and the correct index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryPack {
    pub question: TokenSeq,
    pub answers: Vec<TokenSeq>,
    pub correct: usize,
}

impl QueryPack {
    pub fn new(question: TokenSeq, answers: Vec<TokenSeq>, correct: usize) -> Result<Self> {
        if answers.is_empty() {
            return Err(EngineError::Contract(
                "query needs answer candidates".into(),
            ));
        }
        if correct >= answers.len() {
            return Err(EngineError::Validation(format!(
                "correct index {} out of {} candidates",
                correct,
                answers.len()
            )));
        }
        Ok(QueryPack {
            question,
            answers,
            correct,
        })
    }

    pub fn candidates(&self) -> usize {
        self.answers.len()
    }
}

/// Embedding lookup: `[n]` ids to `[n, d]` rows of the table.
pub fn embed(tape: &mut Tape, table: Var, seq: &TokenSeq) -> Result<Var> {
    tape.gather_rows(table, seq.ids())
}

/// Tape handles for one direction of an LSTM.
#[derive(Debug, Clone, Copy)]
pub struct LstmDirVars {
    /// `[in, 4h]`
    pub wx: Var,
    /// `[h, 4h]`
    pub wh: Var,
    /// `[4h]`
    pub b: Var,
}

/// Tape handles for a bidirectional LSTM.
#[derive(Debug, Clone, Copy)]
pub struct BiLstmVars {
    pub fw: LstmDirVars,
    pub bw: LstmDirVars,
}

impl BiLstmVars {
    pub fn from_bound(bound: &BoundParams, prefix: &str) -> Result<Self> {
        let dir = |d: &str| -> Result<LstmDirVars> {
            Ok(LstmDirVars {
                wx: bound.var(&format!("{prefix}.{d}.wx"))?,
                wh: bound.var(&format!("{prefix}.{d}.wh"))?,
                b: bound.var(&format!("{prefix}.{d}.b"))?,
            })
        };
        Ok(BiLstmVars {
            fw: dir("fw")?,
            bw: dir("bw")?,
        })
    }
}

/// Register both directions of a bidirectional LSTM under `prefix`.
pub fn init_bilstm_params(
    ps: &mut ParamSet,
    prefix: &str,
    input_dim: usize,
    hidden: usize,
    group: ParamGroup,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for d in ["fw", "bw"] {
        ps.register(
            format!("{prefix}.{d}.wx"),
            group,
            Tensor::uniform_init(vec![input_dim, 4 * hidden], input_dim, rng),
        )?;
        ps.register(
            format!("{prefix}.{d}.wh"),
            group,
            Tensor::uniform_init(vec![hidden, 4 * hidden], hidden, rng),
        )?;
        ps.register(
            format!("{prefix}.{d}.b"),
            group,
            Tensor::zeros(vec![4 * hidden]),
        )?;
    }
    Ok(())
}

/// One LSTM direction over `x` `[n, in]`; returns the hidden state of
/// every step in forward temporal order, each `[1, h]`.
fn lstm_direction(
    tape: &mut Tape,
    x: Var,
    p: LstmDirVars,
    hidden: usize,
    reverse: bool,
) -> Result<Vec<Var>> {
    let n = tape.shape(x)[0];
    let h0 = tape.constant(vec![1, hidden], vec![0.0; hidden])?;
    let mut h = h0;
    let mut c = h0;
    let mut outputs = vec![h0; n];
    let steps: Vec<usize> = if reverse {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    for t in steps {
        let xt = tape.slice(x, 0, t, 1)?;
        let zx = tape.matmul(xt, p.wx)?;
        let zh = tape.matmul(h, p.wh)?;
        let z = tape.add(zx, zh)?;
        let z = tape.add(z, p.b)?;
        let zi = tape.slice(z, 1, 0, hidden)?;
        let zf = tape.slice(z, 1, hidden, hidden)?;
        let zg = tape.slice(z, 1, 2 * hidden, hidden)?;
        let zo = tape.slice(z, 1, 3 * hidden, hidden)?;
        let gi = tape.sigmoid(zi);
        let gf = tape.sigmoid(zf);
        let gg = tape.tanh(zg);
        let go = tape.sigmoid(zo);
        let keep = tape.mul(gf, c)?;
        let write = tape.mul(gi, gg)?;
        c = tape.add(keep, write)?;
        let ct = tape.tanh(c);
        h = tape.mul(go, ct)?;
        outputs[t] = h;
    }
    Ok(outputs)
}

/// Bidirectional LSTM from pre-bound variables: `[n, in]` to `[n, 2h]`
/// with zero initial states.
pub fn bilstm_vars(tape: &mut Tape, x: Var, p: &BiLstmVars, hidden: usize) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.len() != 2 {
        return Err(EngineError::Dimension {
            op: "bilstm",
            msg: format!("expected rank 2 input, got {shape:?}"),
        });
    }
    let wx_in = tape.shape(p.fw.wx)[0];
    if shape[1] != wx_in {
        return Err(EngineError::ShapeMismatch {
            op: "bilstm",
            lhs: shape.to_vec(),
            rhs: tape.shape(p.fw.wx).to_vec(),
        });
    }
    let n = shape[0];
    let fw = lstm_direction(tape, x, p.fw, hidden, false)?;
    let bw = lstm_direction(tape, x, p.bw, hidden, true)?;
    let mut rows = Vec::with_capacity(n);
    for t in 0..n {
        rows.push(tape.concat(&[fw[t], bw[t]], 1)?);
    }
    tape.concat(&rows, 0)
}

/// Bidirectional LSTM reading parameters registered under `prefix`.
pub fn bilstm(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    hidden: usize,
    x: Var,
) -> Result<Var> {
    let p = BiLstmVars::from_bound(bound, prefix)?;
    bilstm_vars(tape, x, &p, hidden)
}

/// Encode a question and all its candidates with shared embedding and
/// LSTM parameters. Returns `(H_q, [H_a1 .. H_aK])`, each `[n, 2h]`.
pub fn encode_query(
    tape: &mut Tape,
    bound: &BoundParams,
    embed_name: &str,
    lstm_prefix: &str,
    hidden: usize,
    pack: &QueryPack,
) -> Result<(Var, Vec<Var>)> {
    let table = bound.var(embed_name)?;
    let p = BiLstmVars::from_bound(bound, lstm_prefix)?;
    let eq = embed(tape, table, &pack.question)?;
    let hq = bilstm_vars(tape, eq, &p, hidden)?;
    let mut ha = Vec::with_capacity(pack.answers.len());
    for ans in &pack.answers {
        let ea = embed(tape, table, ans)?;
        ha.push(bilstm_vars(tape, ea, &p, hidden)?);
    }
    Ok((hq, ha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn vocab() -> Vocab {
        Vocab::from_tokens(["red", "block", "moves", "left"], 4).unwrap()
    }

    #[test]
    fn tokenize_lowercases_and_splits_punctuation() {
        assert_eq!(
            tokenize("The RED block, moves-left!"),
            ["the", "red", "block", "moves", "left"]
        );
        assert!(tokenize("  ...  ").is_empty());
    }

    #[test]
    fn vocab_reserves_pad_and_unk() {
        let v = vocab();
        assert_eq!(v.id(PAD_TOKEN), PAD_ID);
        assert_eq!(v.id("never-seen"), UNK_ID);
        assert_eq!(v.id("red"), 2);
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn pad_row_is_zero_after_init() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let table = v.init_table(&mut rng);
        assert_eq!(&table.data()[..v.dim()], &[0.0; 4]);
        assert!(table.data()[v.dim()..].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn seed_table_overrides_known_tokens_only() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut table = v.init_table(&mut rng);
        let text = "red 1 2 3 4\nmissing 9 9 9 9\n<pad> 5 5 5 5\n";
        let seeded = v.seed_table(&mut table, text).unwrap();
        assert_eq!(seeded, 1);
        let rid = v.id("red");
        assert_eq!(&table.data()[rid * 4..rid * 4 + 4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(&table.data()[..4], &[0.0; 4]);
        assert!(v.seed_table(&mut table, "red 1 2\n").is_err());
    }

    #[test]
    fn embed_shapes_and_pad_row() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let table = v.init_table(&mut rng).with_grad();
        let mut tape = Tape::new();
        let tv = tape.leaf(&table);
        let seq = TokenSeq::new(vec![PAD_ID]).unwrap();
        let e = embed(&mut tape, tv, &seq).unwrap();
        assert_eq!(tape.shape(e), &[1, 4]);
        assert_eq!(tape.value(e), &[0.0; 4]);
    }

    fn bilstm_zero_params(ps: &mut ParamSet, d: usize, h: usize) {
        for dir in ["fw", "bw"] {
            ps.register(
                format!("l.{dir}.wx"),
                ParamGroup::Head,
                Tensor::zeros(vec![d, 4 * h]),
            )
            .unwrap();
            ps.register(
                format!("l.{dir}.wh"),
                ParamGroup::Head,
                Tensor::zeros(vec![h, 4 * h]),
            )
            .unwrap();
            ps.register(
                format!("l.{dir}.b"),
                ParamGroup::Head,
                Tensor::zeros(vec![4 * h]),
            )
            .unwrap();
        }
    }

    #[test]
    fn bilstm_zero_weights_give_zero_output() {
        let (d, h, n) = (3, 2, 4);
        let mut ps = ParamSet::new();
        bilstm_zero_params(&mut ps, d, h);
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let x = tape
            .constant(vec![n, d], (0..n * d).map(|v| v as f64).collect())
            .unwrap();
        let y = bilstm(&mut tape, &bound, "l", h, x).unwrap();
        assert_eq!(tape.shape(y), &[n, 2 * h]);
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilstm_output_width_is_twice_hidden() {
        let (d, h, n) = (5, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut ps = ParamSet::new();
        init_bilstm_params(&mut ps, "l", d, h, ParamGroup::Head, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let x = tape.constant(vec![n, d], vec![0.3; n * d]).unwrap();
        let y = bilstm(&mut tape, &bound, "l", h, x).unwrap();
        assert_eq!(tape.shape(y), &[n, 2 * h]);
    }

    #[test]
    fn bilstm_directions_are_causal() {
        let (d, h, n) = (3, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut ps = ParamSet::new();
        init_bilstm_params(&mut ps, "l", d, h, ParamGroup::Head, &mut rng).unwrap();
        let run = |data: Vec<f64>| {
            let mut tape = Tape::new();
            let bound = ps.bind(&mut tape);
            let x = tape.constant(vec![n, d], data).unwrap();
            let y = bilstm(&mut tape, &bound, "l", h, x).unwrap();
            tape.value(y).to_vec()
        };
        let mut rng2 = ChaCha8Rng::seed_from_u64(24);
        let base = Tensor::uniform_range(vec![n, d], -1.0, 1.0, &mut rng2);
        let mut bumped = base.data().to_vec();
        // Perturb the last step: forward halves of steps 0..n-1 must not move.
        for v in &mut bumped[(n - 1) * d..] {
            *v += 1.0;
        }
        let a = run(base.data().to_vec());
        let b = run(bumped);
        let w = 2 * h;
        for t in 0..n - 1 {
            assert_eq!(
                a[t * w..t * w + h],
                b[t * w..t * w + h],
                "forward half at {t}"
            );
        }
        // Perturb the first step: backward halves of steps 1..n must not move.
        let mut bumped_front = base.data().to_vec();
        for v in &mut bumped_front[..d] {
            *v += 1.0;
        }
        let c = run(bumped_front);
        for t in 1..n {
            assert_eq!(
                a[t * w + h..(t + 1) * w],
                c[t * w + h..(t + 1) * w],
                "backward half at {t}"
            );
        }
    }

    #[test]
    fn encode_query_shares_parameters_across_candidates() {
        let v = vocab();
        let h = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ps = ParamSet::new();
        ps.register("emb", ParamGroup::Head, v.init_table(&mut rng))
            .unwrap();
        init_bilstm_params(&mut ps, "q", v.dim(), h, ParamGroup::Head, &mut rng).unwrap();
        let pack = QueryPack::new(
            v.encode("red block moves").unwrap(),
            vec![
                v.encode("left").unwrap(),
                v.encode("red left").unwrap(),
                v.encode("left").unwrap(),
            ],
            0,
        )
        .unwrap();
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let (hq, ha) = encode_query(&mut tape, &bound, "emb", "q", h, &pack).unwrap();
        assert_eq!(tape.shape(hq), &[3, 2 * h]);
        assert_eq!(ha.len(), 3);
        // Identical candidate texts give identical features.
        assert_eq!(tape.value(ha[0]), tape.value(ha[2]));
        assert_ne!(tape.value(ha[0]), tape.value(ha[1]));
    }

    #[test]
    fn query_pack_validation() {
        let q = TokenSeq::new(vec![2]).unwrap();
        assert!(QueryPack::new(q.clone(), vec![], 0).is_err());
        assert!(QueryPack::new(q.clone(), vec![q.clone()], 1).is_err());
        assert!(TokenSeq::new(vec![]).is_err());
    }
}
