//! Tokenisation, word embeddings and GRU sentence encoders.
//!
//! Paragraph sentences and object-property sentences share one sentence
//! GRU; the question has its own GRU of width `d_q`. All three read from a
//! shared word vocabulary.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercases, turns every non-alphanumeric character into a space and
/// splits on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c.to_lowercase().next().unwrap_or(c)
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Word ↔ index map with `<pad>` at 0 and `<unk>` at 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Collects every word of `texts`; words are indexed in lexicographic
    /// order after the two reserved entries.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(normalize_words).collect();
        let mut tokens = vec![PAD_TOKEN.to_owned(), UNK_TOKEN.to_owned()];
        tokens.extend(words.into_iter().filter(|w| w != PAD_TOKEN && w != UNK_TOKEN));
        Self::from_tokens(tokens).expect("reserved tokens present and unique")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::Config(
                "vocabulary must start with <pad> and <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// Maps `text` to indices; unknown words become `<unk>` and empty text
    /// becomes a single `<unk>`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let ids: Vec<usize> = normalize_words(text)
            .iter()
            .map(|w| self.get(w).unwrap_or(UNK))
            .collect();
        if ids.is_empty() {
            vec![UNK]
        } else {
            ids
        }
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// `"{name} is {attr₁ attr₂ …}"`, or `"{name} is"` with no attributes so the
/// object keeps its row.
pub fn make_property_sentence(name: &str, attributes: &[String]) -> String {
    let mut s = format!("{} is", name.trim());
    for a in attributes {
        s.push(' ');
        s.push_str(a.trim());
    }
    s
}

/// Overwrites rows of an embedding table from a text file with lines
/// `token v₁ … v_d`. Tokens missing from the vocabulary are skipped and the
/// `<pad>` row is never touched. Returns the number of rows written.
pub fn load_pretrained_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    table: &mut Tensor,
) -> Result<usize> {
    let width = table.cols();
    let reader = BufReader::new(File::open(path)?);
    let mut written = 0;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values = parts
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                path: path.to_owned(),
                line: n + 1,
                message: e.to_string(),
            })?;
        if values.len() != width {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: n + 1,
                message: format!("expected {width} values, found {}", values.len()),
            });
        }
        if let Some(row) = vocab.get(token).filter(|&r| r != PAD) {
            table.data_mut()[row * width..(row + 1) * width].copy_from_slice(&values);
            written += 1;
        }
    }
    Ok(written)
}

/// `U[-0.1, 0.1]` embedding table with a zero `<pad>` row.
pub fn init_embedding_table(rng: &mut impl Rng, vocab_size: usize, width: usize) -> Tensor {
    let mut data: Vec<f64> = (0..vocab_size * width)
        .map(|_| rng.random_range(-0.1..=0.1))
        .collect();
    data[..width].fill(0.0);
    Tensor::matrix(vocab_size, width, data).expect("positive sizes")
}

/// The nine GRU tensors as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

pub const GRU_TENSORS: [&str; 9] = ["b_h", "b_r", "b_z", "u_h", "u_r", "u_z", "w_h", "w_r", "w_z"];

/// Shape of each GRU tensor for input width `d_in` and hidden width `d_h`.
pub fn gru_shape(tensor: &str, d_in: usize, d_h: usize) -> Vec<usize> {
    match tensor.as_bytes()[0] {
        b'w' => vec![d_h, d_in],
        b'u' => vec![d_h, d_h],
        _ => vec![1, d_h],
    }
}

impl GruVars {
    /// Builds the set from a lookup of tensor names (`"w_z"`, `"u_r"`, …).
    pub fn from_lookup(mut lookup: impl FnMut(&str) -> Result<Var>) -> Result<Self> {
        Ok(GruVars {
            w_z: lookup("w_z")?,
            u_z: lookup("u_z")?,
            b_z: lookup("b_z")?,
            w_r: lookup("w_r")?,
            u_r: lookup("u_r")?,
            b_r: lookup("b_r")?,
            w_h: lookup("w_h")?,
            u_h: lookup("u_h")?,
            b_h: lookup("b_h")?,
        })
    }

    pub fn hidden_width(&self, tape: &Tape<'_>) -> usize {
        tape.value(self.b_z).len()
    }
}

/// Hidden-state update for inputs already projected by `W·x + b`.
fn step_projected(
    tape: &mut Tape<'_>,
    h: Var,
    xz: Var,
    xr: Var,
    xh: Var,
    gru: &GruVars,
) -> Result<Var> {
    let hz = tape.matmul_nt(h, gru.u_z)?;
    let z_in = tape.add(xz, hz)?;
    let z = tape.sigmoid(z_in);

    let hr = tape.matmul_nt(h, gru.u_r)?;
    let r_in = tape.add(xr, hr)?;
    let r = tape.sigmoid(r_in);

    let rh = tape.mul(r, h)?;
    let hh = tape.matmul_nt(rh, gru.u_h)?;
    let cand_in = tape.add(xh, hh)?;
    let cand = tape.tanh(cand_in);

    // (1 − z)∘h + z∘h̃ written as h + z∘(h̃ − h)
    let delta = tape.sub(cand, h)?;
    let step = tape.mul(z, delta)?;
    tape.add(h, step)
}

fn project(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Result<Var> {
    let wx = tape.matmul_nt(x, w)?;
    tape.add_row_broadcast(wx, b)
}

/// One GRU step: `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `h̃ = tanh(W_h x + U_h (r∘h) + b_h)`, `h' = (1 − z)∘h + z∘h̃`.
/// `h` is `1 × d_h`, `x` is `1 × d_emb`.
pub fn gru_step(tape: &mut Tape<'_>, h: Var, x: Var, gru: &GruVars) -> Result<Var> {
    let d_h = gru.hidden_width(tape);
    if tape.value(h).len() != d_h || tape.value(h).rows() != 1 {
        return Err(Error::dim("gru_step", tape.shape(h), &[1, d_h]));
    }
    let xz = project(tape, x, gru.w_z, gru.b_z)?;
    let xr = project(tape, x, gru.w_r, gru.b_r)?;
    let xh = project(tape, x, gru.w_h, gru.b_h)?;
    step_projected(tape, h, xz, xr, xh, gru)
}

/// Folds the GRU over the embedded tokens from a zero state and returns the
/// final hidden state (`1 × d_h`).
pub fn encode_sentence(
    tape: &mut Tape<'_>,
    tokens: &[usize],
    table: Var,
    gru: &GruVars,
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Argument("cannot encode an empty sentence".into()));
    }
    let embedded = tape.gather_rows(table, tokens)?;
    // Input projections for all time steps at once.
    let xz = project(tape, embedded, gru.w_z, gru.b_z)?;
    let xr = project(tape, embedded, gru.w_r, gru.b_r)?;
    let xh = project(tape, embedded, gru.w_h, gru.b_h)?;
    let mut h = tape.constant(Tensor::zeros(&[1, gru.hidden_width(tape)]));
    for t in 0..tokens.len() {
        let (z, r, c) = (
            tape.select_row(xz, t)?,
            tape.select_row(xr, t)?,
            tape.select_row(xh, t)?,
        );
        h = step_projected(tape, h, z, r, c, gru)?;
    }
    Ok(h)
}

fn encode_rows(
    tape: &mut Tape<'_>,
    sentences: &[Vec<usize>],
    table: Var,
    gru: &GruVars,
) -> Result<Var> {
    let rows = sentences
        .iter()
        .map(|s| encode_sentence(tape, s, table, gru))
        .collect::<Result<Vec<_>>>()?;
    tape.stack_rows(&rows)
}

/// Paragraph matrix `P` (`K × d`), one encoded sentence per row.
pub fn encode_paragraph(
    tape: &mut Tape<'_>,
    sentences: &[Vec<usize>],
    table: Var,
    gru: &GruVars,
) -> Result<Var> {
    if sentences.is_empty() {
        return Err(Error::Argument("paragraph has no sentences".into()));
    }
    encode_rows(tape, sentences, table, gru)
}

/// Property matrix `C` (`O × d`), row `i` describing visual object `i`.
pub fn encode_properties(
    tape: &mut Tape<'_>,
    sentences: &[Vec<usize>],
    objects: usize,
    table: Var,
    gru: &GruVars,
) -> Result<Var> {
    if sentences.len() != objects || objects == 0 {
        return Err(Error::Alignment(format!(
            "{} property sentences for {objects} objects",
            sentences.len()
        )));
    }
    encode_rows(tape, sentences, table, gru)
}

/// Question vector `q` (`1 × d_q`) from the question GRU.
pub fn encode_question(
    tape: &mut Tape<'_>,
    tokens: &[usize],
    table: Var,
    gru: &GruVars,
) -> Result<Var> {
    encode_sentence(tape, tokens, table, gru)
}
