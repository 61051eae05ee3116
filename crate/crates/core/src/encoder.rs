//! Text-pair encoder: a small pre-norm Transformer that maps `(a, b)` to the
//! vector at its classification position, plus the two-pass peer encoding
//! in which each pair sees the other pair's first-pass vector.
//!
//! Input layout for a pair is `[CLS] a [SEP] b [SEP]`. With a peer vector the
//! projected peer occupies one extra position right after `[CLS]`:
//! `[CLS] <peer> a [SEP] b [SEP]`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lexical::tokenize;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

const PAD_ID: usize = 0;
const UNK_ID: usize = 1;
const CLS_ID: usize = 2;
const SEP_ID: usize = 3;

/// Segment ids: first text (with `[CLS]` and its `[SEP]`), second text, and
/// the injected peer position.
const SEG_FIRST: usize = 0;
const SEG_SECOND: usize = 1;
const SEG_PEER: usize = 2;
const NUM_SEGMENTS: usize = 3;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder shape: {0}")]
    InvalidShape(String),
    #[error("hidden size mismatch: {0} vs {1}")]
    HiddenMismatch(usize, usize),
    #[error("peer vector has length {got}, expected {expected}")]
    PeerLength { expected: usize, got: usize },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EncoderError + '_ {
    move |source| EncoderError::Io { path: path.display().to_string(), source }
}

/// `a ∘ b`: the two texts joined by one separator token.
pub fn concat_text(a: &str, b: &str) -> String {
    [a.trim(), SEP, b.trim()].iter().filter(|s| !s.is_empty()).copied().collect::<Vec<_>>().join(" ")
}

/// Word-level vocabulary with four reserved specials.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, EncoderError> {
        let specials = [PAD, UNK, CLS, SEP];
        if tokens.len() < specials.len() || tokens.iter().zip(specials).any(|(t, s)| t != s) {
            return Err(EncoderError::InvalidShape("vocabulary must start with [PAD] [UNK] [CLS] [SEP]".into()));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self { tokens, index })
    }

    /// Builds a vocabulary of every word in `texts`, sorted so that the
    /// result does not depend on text order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = texts.into_iter().flat_map(tokenize).collect();
        words.sort();
        words.dedup();
        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        Self::from_tokens(tokens).expect("specials are in place")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    /// Token ids for `text`. A literal `[SEP]` maps to the separator; every
    /// other whitespace chunk goes through the lexical tokenizer.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for chunk in text.split_whitespace() {
            if chunk == SEP {
                ids.push(SEP_ID);
            } else {
                ids.extend(tokenize(chunk).iter().map(|t| self.id(t)));
            }
        }
        ids
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Hidden size `d`.
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward inner width.
    pub ffn: usize,
    pub max_len: usize,
    /// Dropout applied in training mode only.
    pub dropout: f64,
    /// Standard deviation of the normal initialisation of weight matrices
    /// and of the position and segment embeddings.
    pub init_std: f64,
    /// Standard deviation of the token-embedding initialisation. Token
    /// identity must dominate position at the input for overlap between
    /// the two texts to be learnable quickly.
    pub token_init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl EncoderConfig {
    /// The desk-scale test encoder: d=32, 2 layers, 4 heads.
    pub fn tiny() -> Self {
        Self { hidden: 32, layers: 2, heads: 4, ffn: 128, max_len: 128, dropout: 0.0, init_std: 0.1, token_init_std: 1.0 }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::InvalidShape(m));
        if self.hidden == 0 || self.heads == 0 || self.layers == 0 || self.ffn == 0 {
            return bad(format!("sizes must be positive: {self:?}"));
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden size {} is not divisible by {} heads", self.hidden, self.heads));
        }
        if self.max_len < 5 {
            return bad(format!("max_len {} leaves no room for text", self.max_len));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Parameter count implied by the architecture.
    pub fn num_parameters(&self, vocab_size: usize) -> usize {
        let (d, f) = (self.hidden, self.ffn);
        let embeddings = vocab_size * d + self.max_len * d + NUM_SEGMENTS * d;
        let peer = d * d + d;
        let attention = 4 * (d * d + d);
        let feed_forward = d * f + f + f * d + d;
        let norms = 2 * 2 * d;
        embeddings + peer + self.layers * (attention + feed_forward + norms) + 2 * d
    }
}

/// Indices of one block's tensors in the store.
#[derive(Clone, Copy, Debug)]
struct LayerIds {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    tok: usize,
    pos: usize,
    seg: usize,
    peer_w: usize,
    peer_b: usize,
    layers: Vec<LayerIds>,
    lnf_g: usize,
    lnf_b: usize,
}

/// Pooled classification-position vector of an encoded pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPair {
    pub representation: Vec<f64>,
}

/// Forward-pass mode. Training mode draws dropout masks from the given RNG.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

#[derive(Debug)]
pub struct Encoder {
    config: EncoderConfig,
    vocab: Vocab,
    params: ParamStore,
    layout: Layout,
    truncations: AtomicUsize,
}

impl Clone for Encoder {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            vocab: self.vocab.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
            truncations: AtomicUsize::new(self.truncations.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for Encoder {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.vocab == other.vocab && self.params == other.params
    }
}

/// Builds a freshly initialised encoder; identical seeds give identical
/// parameters.
pub fn init_tiny_encoder(config: EncoderConfig, vocab: Vocab, seed: u64) -> Result<Encoder, EncoderError> {
    Encoder::new(config, vocab, seed)
}

impl Encoder {
    pub fn new(config: EncoderConfig, vocab: Vocab, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = |std: f64| Normal::new(0.0, std).map_err(|e| EncoderError::InvalidShape(e.to_string()));
        let (weights, tokens) = (normal(config.init_std)?, normal(config.token_init_std)?);
        let (d, f) = (config.hidden, config.ffn);
        let mut params = ParamStore::new();
        let tok_table = Matrix::from_vec(vocab.len(), d, (0..vocab.len() * d).map(|_| tokens.sample(&mut rng)).collect());
        let mut randn = |rows: usize, cols: usize| Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| weights.sample(&mut rng)).collect());

        let tok = params.push("tok_emb", tok_table);
        let pos = params.push("pos_emb", randn(config.max_len, d));
        let seg = params.push("seg_emb", randn(NUM_SEGMENTS, d));
        let peer_w = params.push("peer_w", randn(d, d));
        let peer_b = params.push("peer_b", Matrix::zeros(1, d));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut p = |name: &str, m: Matrix| params.push(format!("layer{l}.{name}"), m);
            layers.push(LayerIds {
                ln1_g: p("ln1_g", Matrix::filled(1, d, 1.0)),
                ln1_b: p("ln1_b", Matrix::zeros(1, d)),
                wq: p("wq", randn(d, d)),
                bq: p("bq", Matrix::zeros(1, d)),
                wk: p("wk", randn(d, d)),
                bk: p("bk", Matrix::zeros(1, d)),
                wv: p("wv", randn(d, d)),
                bv: p("bv", Matrix::zeros(1, d)),
                wo: p("wo", randn(d, d)),
                bo: p("bo", Matrix::zeros(1, d)),
                ln2_g: p("ln2_g", Matrix::filled(1, d, 1.0)),
                ln2_b: p("ln2_b", Matrix::zeros(1, d)),
                w1: p("w1", randn(d, f)),
                b1: p("b1", Matrix::zeros(1, f)),
                w2: p("w2", randn(f, d)),
                b2: p("b2", Matrix::zeros(1, d)),
            });
        }
        let lnf_g = params.push("lnf_g", Matrix::filled(1, d, 1.0));
        let lnf_b = params.push("lnf_b", Matrix::zeros(1, d));
        let layout = Layout { tok, pos, seg, peer_w, peer_b, layers, lnf_g, lnf_b };
        Ok(Self { config, vocab, params, layout, truncations: AtomicUsize::new(0) })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Number of inputs that had to be truncated so far.
    pub fn truncations(&self) -> usize {
        self.truncations.load(Ordering::Relaxed)
    }

    /// Token and segment ids for a pair, truncating the second text first
    /// and then the first until the sequence fits.
    pub fn build_input(&self, a: &str, b: &str, with_peer: bool) -> (Vec<usize>, Vec<usize>) {
        let mut ta = self.vocab.encode(a);
        let mut tb = self.vocab.encode(b);
        let budget = self.config.max_len - 3 - usize::from(with_peer);
        if ta.len() + tb.len() > budget {
            self.truncations.fetch_add(1, Ordering::Relaxed);
            let excess = ta.len() + tb.len() - budget;
            let cut_b = excess.min(tb.len());
            tb.truncate(tb.len() - cut_b);
            ta.truncate(ta.len() - (excess - cut_b));
        }
        let mut ids = Vec::with_capacity(ta.len() + tb.len() + 3);
        let mut segs = Vec::with_capacity(ids.capacity());
        ids.push(CLS_ID);
        segs.push(SEG_FIRST);
        for &t in &ta {
            ids.push(t);
            segs.push(SEG_FIRST);
        }
        ids.push(SEP_ID);
        segs.push(SEG_FIRST);
        for &t in &tb {
            ids.push(t);
            segs.push(SEG_SECOND);
        }
        ids.push(SEP_ID);
        segs.push(SEG_SECOND);
        debug_assert!(!ids.contains(&PAD_ID));
        (ids, segs)
    }

    fn dropout(&self, tape: &mut Tape, x: Var, mode: &mut Mode<'_>) -> Var {
        let p = self.config.dropout;
        match mode {
            Mode::Train(rng) if p > 0.0 => {
                let (r, c) = tape.value(x).shape();
                let keep = 1.0 / (1.0 - p);
                let mask = Matrix::from_vec(r, c, (0..r * c).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect());
                tape.mul_const(x, mask)
            }
            _ => x,
        }
    }

    /// Records the forward pass on `tape` and returns the `1 x d`
    /// classification-position output. `peer`, when given, is a `1 x d`
    /// vector that is projected and inserted after `[CLS]`.
    pub fn forward(&self, tape: &mut Tape, tag: usize, a: &str, b: &str, peer: Option<Var>, mode: &mut Mode<'_>) -> Var {
        let (ids, mut segs) = self.build_input(a, b, peer.is_some());
        let p = |tape: &mut Tape, i: usize| tape.param((tag, i), self.params.get(i));
        let lay = &self.layout;

        let tok_table = p(tape, lay.tok);
        let mut x = tape.gather(tok_table, &ids);
        if let Some(peer) = peer {
            assert_eq!(tape.value(peer).shape(), (1, self.config.hidden), "peer must be 1 x d");
            let w = p(tape, lay.peer_w);
            let b = p(tape, lay.peer_b);
            let proj = tape.matmul(peer, w);
            let proj = tape.add_row(proj, b);
            let cls = tape.slice_rows(x, 0, 1);
            let rest = tape.slice_rows(x, 1, ids.len() - 1);
            x = tape.concat_rows(&[cls, proj, rest]);
            segs.insert(1, SEG_PEER);
        }
        let n = segs.len();
        let positions: Vec<usize> = (0..n).collect();
        let pos_table = p(tape, lay.pos);
        let pos = tape.gather(pos_table, &positions);
        let seg_table = p(tape, lay.seg);
        let seg = tape.gather(seg_table, &segs);
        x = tape.add(x, pos);
        x = tape.add(x, seg);
        x = self.dropout(tape, x, mode);

        let d = self.config.hidden;
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for l in &lay.layers {
            let (pa, pb) = (p(tape, l.ln1_g), p(tape, l.ln1_b));
            let h = layer_norm(tape, x, pa, pb);
            let (pa, pb) = (p(tape, l.wq), p(tape, l.bq));
            let q = linear(tape, h, pa, pb);
            let (pa, pb) = (p(tape, l.wk), p(tape, l.bk));
            let k = linear(tape, h, pa, pb);
            let (pa, pb) = (p(tape, l.wv), p(tape, l.bv));
            let v = linear(tape, h, pa, pb);
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.slice_cols(q, hd * dh, dh);
                let kh = tape.slice_cols(k, hd * dh, dh);
                let vh = tape.slice_cols(v, hd * dh, dh);
                let s = tape.matmul_t(qh, kh);
                let s = tape.scale(s, scale);
                let att = tape.softmax(s);
                outs.push(tape.matmul(att, vh));
            }
            let o = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
            let (pa, pb) = (p(tape, l.wo), p(tape, l.bo));
            let o = linear(tape, o, pa, pb);
            let o = self.dropout(tape, o, mode);
            x = tape.add(x, o);

            let (pa, pb) = (p(tape, l.ln2_g), p(tape, l.ln2_b));
            let h = layer_norm(tape, x, pa, pb);
            let (pa, pb) = (p(tape, l.w1), p(tape, l.b1));
            let f = linear(tape, h, pa, pb);
            let f = tape.gelu(f);
            let (pa, pb) = (p(tape, l.w2), p(tape, l.b2));
            let f = linear(tape, f, pa, pb);
            let f = self.dropout(tape, f, mode);
            x = tape.add(x, f);
        }
        let (pa, pb) = (p(tape, lay.lnf_g), p(tape, lay.lnf_b));
        let out = layer_norm(tape, x, pa, pb);
        tape.slice_rows(out, 0, 1)
    }

    /// Evaluation-mode encoding of `(a, b)`.
    pub fn encode_pair(&self, a: &str, b: &str) -> EncodedPair {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, 0, a, b, None, &mut Mode::Eval);
        EncodedPair { representation: tape.value(out).data().to_vec() }
    }

    /// Evaluation-mode encoding with an explicit peer vector injected.
    pub fn encode_pair_with_peer(&self, a: &str, b: &str, peer: &[f64]) -> Result<EncodedPair, EncoderError> {
        if peer.len() != self.hidden() {
            return Err(EncoderError::PeerLength { expected: self.hidden(), got: peer.len() });
        }
        let mut tape = Tape::new();
        let pv = tape.input(Matrix::row_vector(peer.to_vec()));
        let out = self.forward(&mut tape, 0, a, b, Some(pv), &mut Mode::Eval);
        Ok(EncodedPair { representation: tape.value(out).data().to_vec() })
    }

    pub fn encode_batch(&self, pairs: &[(String, String)]) -> Vec<EncodedPair> {
        use rayon::prelude::*;
        pairs.par_iter().map(|(a, b)| self.encode_pair(a, b)).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<(), EncoderError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let c = &self.config;
        let mut manifest = String::new();
        let _ = writeln!(manifest, "format = encoder-v1");
        let _ = writeln!(manifest, "hidden = {}", c.hidden);
        let _ = writeln!(manifest, "layers = {}", c.layers);
        let _ = writeln!(manifest, "heads = {}", c.heads);
        let _ = writeln!(manifest, "ffn = {}", c.ffn);
        let _ = writeln!(manifest, "max_len = {}", c.max_len);
        let _ = writeln!(manifest, "dropout = {:?}", c.dropout);
        let _ = writeln!(manifest, "init_std = {:?}", c.init_std);
        let _ = writeln!(manifest, "token_init_std = {:?}", c.token_init_std);
        let _ = writeln!(manifest, "vocab_size = {}", self.vocab.len());
        let _ = writeln!(manifest, "vocab_hash = {}", self.vocab.hash());
        for (name, m) in self.params.iter() {
            let _ = writeln!(manifest, "tensor {} {} {}", name, m.rows(), m.cols());
        }
        fs::write(dir.join("manifest.txt"), manifest).map_err(io_err(dir))?;
        let mut vocab = self.vocab.tokens().join("\n");
        vocab.push('\n');
        fs::write(dir.join("vocab.txt"), vocab).map_err(io_err(dir))?;
        self.params.write_tensors(dir).map_err(io_err(dir))
    }

    pub fn load(dir: &Path) -> Result<Self, EncoderError> {
        let bad = |message: String| EncoderError::Checkpoint { path: dir.display().to_string(), message };
        let manifest = fs::read_to_string(dir.join("manifest.txt")).map_err(io_err(dir))?;
        let mut kv = HashMap::new();
        let mut shapes = Vec::new();
        for line in manifest.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                let [name, r, c] = parts[..] else { return Err(bad(format!("bad tensor line {line:?}"))) };
                let r: usize = r.parse().map_err(|_| bad(format!("bad rows in {line:?}")))?;
                let c: usize = c.parse().map_err(|_| bad(format!("bad cols in {line:?}")))?;
                shapes.push((name.to_string(), r, c));
            } else if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.trim().to_string(), v.trim().to_string());
            } else {
                return Err(bad(format!("unrecognised line {line:?}")));
            }
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| bad(format!("missing {k}")));
        let num = |k: &str| -> Result<usize, EncoderError> { get(k)?.parse().map_err(|_| bad(format!("bad {k}"))) };
        let float = |k: &str| -> Result<f64, EncoderError> { get(k)?.parse().map_err(|_| bad(format!("bad {k}"))) };
        if get("format")? != "encoder-v1" {
            return Err(bad("unsupported format".into()));
        }
        let config = EncoderConfig {
            hidden: num("hidden")?,
            layers: num("layers")?,
            heads: num("heads")?,
            ffn: num("ffn")?,
            max_len: num("max_len")?,
            dropout: float("dropout")?,
            init_std: float("init_std")?,
            token_init_std: float("token_init_std")?,
        };
        let vocab_text = fs::read_to_string(dir.join("vocab.txt")).map_err(io_err(dir))?;
        let vocab = Vocab::from_tokens(vocab_text.lines().map(str::to_string).collect())?;
        if vocab.len() != num("vocab_size")? || &vocab.hash() != get("vocab_hash")? {
            return Err(bad("vocabulary does not match manifest".into()));
        }
        let mut enc = Encoder::new(config, vocab, 0)?;
        let expected: Vec<(String, usize, usize)> = enc.params.iter().map(|(n, m)| (n.to_string(), m.rows(), m.cols())).collect();
        if expected != shapes {
            return Err(bad("tensor shapes do not match the configured architecture".into()));
        }
        enc.params.read_tensors(dir).map_err(|e| bad(e.to_string()))?;
        Ok(enc)
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

fn layer_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Var {
    let n = tape.normalize(x, LN_EPS);
    let n = tape.mul_row(n, gain);
    tape.add_row(n, bias)
}

/// Records the two-pass peer encoding of two pairs on `tape`.
///
/// Pass one encodes each pair alone. Pass two re-encodes each pair with the
/// other pair's pass-one vector injected. Gradients flow through both
/// passes, so each encoder's parameters influence the other pair's output.
pub fn peer_forward(
    tape: &mut Tape,
    (enc_a, tag_a): (&Encoder, usize),
    (enc_g, tag_g): (&Encoder, usize),
    pair_a: (&str, &str),
    pair_g: (&str, &str),
    mode: &mut Mode<'_>,
) -> Result<(Var, Var), EncoderError> {
    if enc_a.hidden() != enc_g.hidden() {
        return Err(EncoderError::HiddenMismatch(enc_a.hidden(), enc_g.hidden()));
    }
    let first_a = enc_a.forward(tape, tag_a, pair_a.0, pair_a.1, None, mode);
    let first_g = enc_g.forward(tape, tag_g, pair_g.0, pair_g.1, None, mode);
    let second_a = enc_a.forward(tape, tag_a, pair_a.0, pair_a.1, Some(first_g), mode);
    let second_g = enc_g.forward(tape, tag_g, pair_g.0, pair_g.1, Some(first_a), mode);
    Ok((second_a, second_g))
}

/// Evaluation-mode peer encoding of two pairs.
pub fn peer_encode(enc_a: &Encoder, enc_g: &Encoder, pair_a: (&str, &str), pair_g: (&str, &str)) -> Result<(EncodedPair, EncodedPair), EncoderError> {
    let mut tape = Tape::new();
    let (a, g) = peer_forward(&mut tape, (enc_a, 0), (enc_g, 1), pair_a, pair_g, &mut Mode::Eval)?;
    Ok((
        EncodedPair { representation: tape.value(a).data().to_vec() },
        EncodedPair { representation: tape.value(g).data().to_vec() },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(["the quick brown fox jumps over the lazy dog", "what does the fox say", "a b c d e f g"])
    }

    fn tiny(seed: u64) -> Encoder {
        init_tiny_encoder(EncoderConfig::tiny(), vocab(), seed).unwrap()
    }

    #[test]
    fn concat_uses_one_separator() {
        assert_eq!(concat_text("q", "t"), "q [SEP] t");
        assert_eq!(concat_text("", "t"), "[SEP] t");
        let nested = concat_text("q", &concat_text("r", "t"));
        assert_eq!(nested.matches(SEP).count(), 2);
    }

    #[test]
    fn vocab_maps_separator_and_unknowns() {
        let v = vocab();
        let ids = v.encode("The fox [SEP] zebra!");
        assert_eq!(ids, vec![v.id("the"), v.id("fox"), SEP_ID, UNK_ID]);
        assert!(Vocab::from_tokens(vec!["x".into()]).is_err());
    }

    #[test]
    fn shape_validation() {
        let ok = EncoderConfig { hidden: 32, heads: 4, ..EncoderConfig::tiny() };
        assert!(ok.validate().is_ok());
        let bad = EncoderConfig { hidden: 30, heads: 4, ..EncoderConfig::tiny() };
        assert!(matches!(init_tiny_encoder(bad, vocab(), 0), Err(EncoderError::InvalidShape(_))));
    }

    #[test]
    fn parameter_count_matches_architecture_arithmetic() {
        let enc = tiny(0);
        let v = enc.vocab().len();
        // d=32, f=128, L=128 positions, 2 layers
        let emb = v * 32 + 128 * 32 + 3 * 32;
        let peer = 32 * 32 + 32;
        let per_layer = 4 * (32 * 32 + 32) + (32 * 128 + 128 + 128 * 32 + 32) + 4 * 32;
        let expected = emb + peer + 2 * per_layer + 2 * 32;
        assert_eq!(enc.params().num_scalars(), expected);
        assert_eq!(enc.config().num_parameters(v), expected);
    }

    #[test]
    fn same_seed_same_parameters() {
        assert_eq!(tiny(5), tiny(5));
        assert_ne!(tiny(5).params(), tiny(6).params());
    }

    #[test]
    fn encoding_is_deterministic_and_order_sensitive() {
        let enc = tiny(1);
        let x = enc.encode_pair("the quick fox", "the lazy dog");
        let y = enc.encode_pair("the quick fox", "the lazy dog");
        assert_eq!(x, y);
        assert_eq!(x.representation.len(), 32);
        let z = enc.encode_pair("the lazy dog", "the quick fox");
        assert_ne!(x, z);
    }

    #[test]
    fn batch_matches_single() {
        let enc = tiny(2);
        let pairs = vec![("a b".to_string(), "c d".to_string()), ("the fox".to_string(), "jumps".to_string())];
        let batch = enc.encode_batch(&pairs);
        for ((a, b), got) in pairs.iter().zip(&batch) {
            let single = enc.encode_pair(a, b);
            for (u, v) in single.representation.iter().zip(&got.representation) {
                assert!((u - v).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn truncation_drops_second_text_first() {
        let cfg = EncoderConfig { max_len: 8, ..EncoderConfig::tiny() };
        let enc = init_tiny_encoder(cfg, vocab(), 0).unwrap();
        let (ids, _) = enc.build_input("a b", "c d e f g", false);
        assert_eq!(ids.len(), 8);
        assert_eq!(&ids[..4], &[CLS_ID, enc.vocab().id("a"), enc.vocab().id("b"), SEP_ID]);
        assert_eq!(enc.truncations(), 1);
        let (ids, _) = enc.build_input("a b c d e f g", "a b", false);
        assert_eq!(ids.len(), 8);
        assert_eq!(*ids.last().unwrap(), SEP_ID);
        assert_eq!(ids[ids.len() - 2], SEP_ID, "second text fully dropped");
        // Short inputs are untouched and produce no truncation.
        let before = enc.truncations();
        let _ = enc.encode_pair("a", "b");
        assert_eq!(enc.truncations(), before);
        // A long input still encodes without error.
        let long = "a ".repeat(500);
        assert_eq!(enc.encode_pair(&long, &long).representation.len(), 32);
    }

    #[test]
    fn peer_vector_changes_output() {
        for seed in 0..5 {
            let enc = tiny(seed);
            let zero = enc.encode_pair_with_peer("the fox", "the dog", &[0.0; 32]).unwrap();
            let peer: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
            let real = enc.encode_pair_with_peer("the fox", "the dog", &peer).unwrap();
            assert_ne!(zero, real, "seed {seed}");
        }
        assert!(tiny(0).encode_pair_with_peer("a", "b", &[0.0; 3]).is_err());
    }

    #[test]
    fn peer_encode_differs_from_plain_encode() {
        let enc = tiny(3);
        let (a, _) = peer_encode(&enc, &enc, ("the fox", "the dog"), ("the fox", "the dog")).unwrap();
        assert_ne!(a, enc.encode_pair("the fox", "the dog"));
    }

    #[test]
    fn peer_text_flows_into_other_pair() {
        for seed in 0..5 {
            let ea = tiny(seed);
            let eg = tiny(seed + 100);
            let (a1, _) = peer_encode(&ea, &eg, ("the fox", "jumps"), ("what does", "the fox say")).unwrap();
            let (a2, _) = peer_encode(&ea, &eg, ("the fox", "jumps"), ("a lazy dog", "over")).unwrap();
            assert_ne!(a1, a2, "seed {seed}");
        }
    }

    #[test]
    fn hidden_mismatch_is_rejected() {
        let small = init_tiny_encoder(EncoderConfig { hidden: 16, ffn: 64, ..EncoderConfig::tiny() }, vocab(), 0).unwrap();
        assert!(matches!(peer_encode(&tiny(0), &small, ("a", "b"), ("c", "d")), Err(EncoderError::HiddenMismatch(32, 16))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut enc = tiny(4);
        enc.params_mut().round_to_f32();
        enc.save(dir.path()).unwrap();
        let loaded = Encoder::load(dir.path()).unwrap();
        assert_eq!(loaded, enc);
        assert_eq!(loaded.encode_pair("the fox", "a dog"), enc.encode_pair("the fox", "a dog"));

        std::fs::write(dir.path().join("vocab.txt"), "[PAD]\n[UNK]\n[CLS]\n[SEP]\nzzz\n").unwrap();
        assert!(matches!(Encoder::load(dir.path()), Err(EncoderError::Checkpoint { .. })));
    }

    #[test]
    fn dropout_only_in_training_mode() {
        let cfg = EncoderConfig { dropout: 0.3, ..EncoderConfig::tiny() };
        let enc = init_tiny_encoder(cfg, vocab(), 0).unwrap();
        let eval = |enc: &Encoder| {
            let mut t = Tape::new();
            let v = enc.forward(&mut t, 0, "the fox", "jumps", None, &mut Mode::Eval);
            t.value(v).clone()
        };
        assert_eq!(eval(&enc), eval(&enc));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let v = enc.forward(&mut t, 0, "the fox", "jumps", None, &mut Mode::Train(&mut rng));
        assert_ne!(t.value(v), &eval(&enc));
    }
}
