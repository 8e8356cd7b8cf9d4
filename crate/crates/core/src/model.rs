//! Model variants, parameter initialisation, the forward graph and
//! checkpoint files.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "VTQACKPT"  u64 header_len  header_json  f64 blobs in manifest order
//! ```
//!
//! The JSON header carries `format_version`, the model config, both
//! vocabularies and the tensor manifest (`name → {shape, offset}`, byte
//! offsets relative to the first blob, names in lexicographic order).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AnswerVocabulary, SampleRecord};
use crate::decision::{apply_credit, build_recommendation_list, late_fuse_on_tape, RecommendationList};
use crate::error::{CheckpointError, Error, Result};
use crate::fusion::{
    attend_paragraph_over_objects, fuse_paragraph, fuse_visual, pool_and_gate,
    question_attention, similarity, AttentionVars, GateVars,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::text::{
    encode_paragraph, encode_properties, encode_question, gru_shape, init_embedding_table,
    GruVars, Vocabulary, GRU_TENSORS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "vqa")]
    VqaOnly,
    #[serde(rename = "textqa")]
    TextQaOnly,
    #[serde(rename = "vtqa")]
    Vtqa,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vqa" => Ok(Variant::VqaOnly),
            "textqa" => Ok(Variant::TextQaOnly),
            "vtqa" => Ok(Variant::Vtqa),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected vqa, textqa or vtqa)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::VqaOnly => "vqa",
            Variant::TextQaOnly => "textqa",
            Variant::Vtqa => "vtqa",
        })
    }
}

/// Width presets. `Desk` trains in minutes on one core.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected desk or paper)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub early_fusion: bool,
    pub late_fusion: bool,
    pub answer_recommendation: bool,
    /// Fuse object-property sentences into the visual rows (`[V; V∘C]`).
    pub object_properties: bool,
    /// Question and caption text share one embedding table.
    pub share_question_embeddings: bool,
    /// Also add the recommendation credit (as a constant) while training.
    pub credit_in_training: bool,
    pub d: usize,
    pub d_v: usize,
    pub d_q: usize,
    pub h_a: usize,
    pub h_g: usize,
    pub d_emb: usize,
    pub credit: f64,
    pub seed: u64,
    pub vocab_size: usize,
    pub n_answers: usize,
}

impl ModelConfig {
    /// All fusion levels on, credit 1.0, seed 0.
    pub fn preset(preset: Preset, variant: Variant, vocab_size: usize, n_answers: usize) -> Self {
        let (d, d_q, h, d_emb) = match preset {
            Preset::Desk => (64, 32, 32, 32),
            Preset::Paper => (2048, 1024, 512, 300),
        };
        ModelConfig {
            variant,
            early_fusion: true,
            late_fusion: true,
            answer_recommendation: true,
            object_properties: true,
            share_question_embeddings: true,
            credit_in_training: false,
            d,
            d_v: d,
            d_q,
            h_a: h,
            h_g: h,
            d_emb,
            credit: 1.0,
            seed: 0,
            vocab_size,
            n_answers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant == Variant::Vtqa && !self.early_fusion {
            return Err(Error::Config("the vtqa variant requires early fusion".into()));
        }
        if self.d != self.d_v {
            return Err(Error::Config(format!(
                "d ({}) must equal d_v ({})",
                self.d, self.d_v
            )));
        }
        for (name, w) in [
            ("d", self.d),
            ("d_q", self.d_q),
            ("h_a", self.h_a),
            ("h_g", self.h_g),
            ("d_emb", self.d_emb),
            ("n_answers", self.n_answers),
        ] {
            if w == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must cover <pad> and <unk>".into()));
        }
        if !(self.credit >= 0.0 && self.credit.is_finite()) {
            return Err(Error::Config(format!(
                "credit must be a finite value ≥ 0, got {}",
                self.credit
            )));
        }
        Ok(())
    }

    pub fn uses_visual(&self) -> bool {
        self.variant != Variant::TextQaOnly
    }

    pub fn uses_paragraph(&self) -> bool {
        self.variant != Variant::VqaOnly
    }

    fn uses_properties(&self) -> bool {
        self.uses_visual() && self.object_properties
    }

    fn uses_sentence_gru(&self) -> bool {
        self.uses_paragraph() || self.uses_properties()
    }

    /// Late fusion only exists when both branches do.
    pub fn late_fusion_active(&self) -> bool {
        self.variant == Variant::Vtqa && self.late_fusion
    }

    /// Recommendation needs detected objects, so the text-only variant
    /// never applies it.
    pub fn recommendation_active(&self) -> bool {
        self.uses_visual() && self.answer_recommendation
    }

    /// Every trainable tensor for this config with its shape.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut shapes = BTreeMap::new();
        shapes.insert("embedding".to_string(), vec![self.vocab_size, self.d_emb]);
        if !self.share_question_embeddings {
            shapes.insert("q_embedding".to_string(), vec![self.vocab_size, self.d_emb]);
        }
        for t in GRU_TENSORS {
            shapes.insert(format!("q_gru.{t}"), gru_shape(t, self.d_emb, self.d_q));
            if self.uses_sentence_gru() {
                shapes.insert(format!("sent_gru.{t}"), gru_shape(t, self.d_emb, self.d));
            }
        }
        let mut branch = |prefix: &str, width: usize| {
            let entries = [
                ("att.w_sa", vec![self.h_a, width]),
                ("att.w_qa", vec![self.h_a, self.d_q]),
                ("att.w_a", vec![1, self.h_a]),
                ("gate.w_p", vec![self.h_g, width]),
                ("gate.w_q", vec![self.h_g, self.d_q]),
                ("cls.weight", vec![self.n_answers, self.h_g]),
                ("cls.bias", vec![1, self.n_answers]),
            ];
            for (name, shape) in entries {
                shapes.insert(format!("{prefix}.{name}"), shape);
            }
        };
        if self.uses_paragraph() {
            let width = if self.variant == Variant::Vtqa { 2 * self.d } else { self.d };
            branch("para", width);
        }
        if self.uses_visual() {
            let width = if self.object_properties { 2 * self.d } else { self.d };
            branch("vis", width);
        }
        if self.variant == Variant::Vtqa {
            shapes.insert("para.sim.w_s".to_string(), vec![1, 3 * self.d]);
        }
        shapes
    }
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".bias") || name.rsplit('.').next().is_some_and(|t| t.starts_with("b_"))
}

fn is_embedding(name: &str) -> bool {
    name == "embedding" || name == "q_embedding"
}

/// Named parameter tensors, iterated in lexicographic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Weights `U[-1/√fan_in, 1/√fan_in]`, biases zero, embeddings
    /// `U[-0.1, 0.1]` with a zero PAD row. Drawn in name order from one
    /// generator seeded by `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tensors = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if is_bias(&name) {
                    Tensor::zeros(&shape)
                } else if is_embedding(&name) {
                    init_embedding_table(&mut rng, shape[0], shape[1])
                } else {
                    let r = 1.0 / (shape[1] as f64).sqrt();
                    let n = shape.iter().product();
                    Tensor::new(shape, (0..n).map(|_| rng.random_range(-r..=r)).collect())?
                };
                Ok((name, t))
            })
            .collect::<Result<_>>()?;
        Ok(ModelParams { tensors })
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        ModelParams { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Names and shapes must match `config` exactly.
    pub fn check_against(&self, config: &ModelConfig) -> std::result::Result<(), CheckpointError> {
        let expected = config.param_shapes();
        let missing: Vec<String> = expected
            .keys()
            .filter(|k| !self.tensors.contains_key(*k))
            .cloned()
            .collect();
        let unexpected: Vec<String> = self
            .tensors
            .keys()
            .filter(|k| !expected.contains_key(*k))
            .cloned()
            .collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(CheckpointError::NameMismatch { missing, unexpected });
        }
        for (name, shape) in expected {
            let found = self.tensors[&name].shape();
            if found != shape.as_slice() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: shape,
                    found: found.to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Word and answer vocabularies, both built from training data only.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabs {
    pub words: Vocabulary,
    pub answers: AnswerVocabulary,
}

/// A sample turned into token and class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub visual: Tensor,
    pub properties: Vec<Vec<usize>>,
    pub paragraph: Vec<Vec<usize>>,
    pub question: Vec<usize>,
    /// `None` when the gold answer is outside the answer vocabulary.
    pub target: Option<usize>,
    /// Answer indices named by the objects and their attributes.
    pub recommended: BTreeSet<usize>,
}

impl Vocabs {
    pub fn build(train: &[SampleRecord], min_answer_frequency: usize) -> Result<Self> {
        let mut texts: Vec<String> = Vec::new();
        for r in train {
            texts.push(r.question.clone());
            texts.extend(r.paragraph.iter().cloned());
            texts.extend(r.property_sentences());
        }
        let words = Vocabulary::build(texts.iter().map(String::as_str));
        let answers =
            AnswerVocabulary::build(train.iter().map(|r| r.answer.as_str()), min_answer_frequency)?;
        Ok(Vocabs { words, answers })
    }

    pub fn prepare(&self, record: &SampleRecord) -> Result<PreparedSample> {
        record.validate()?;
        let tok = |s: &String| self.words.tokenize(s);
        let recommended = build_recommendation_list(
            &record.object_names,
            &record.object_attributes,
            &self.answers,
            0.0,
        )?
        .indices;
        Ok(PreparedSample {
            id: record.id.clone(),
            visual: record.visual.clone(),
            properties: record.property_sentences().iter().map(tok).collect(),
            paragraph: record.paragraph.iter().map(tok).collect(),
            question: self.words.tokenize(&record.question),
            target: self.answers.get(&record.answer),
            recommended,
        })
    }

    pub fn prepare_all(&self, records: &[SampleRecord]) -> Result<Vec<PreparedSample>> {
        records.iter().map(|r| self.prepare(r)).collect()
    }
}

/// Tape handles for every parameter, keyed by name.
pub type ParamVars = BTreeMap<String, Var>;

/// Puts every parameter on the tape; `trainable` decides whether gradients
/// flow into them.
pub fn bind_params<'a>(tape: &mut Tape<'a>, params: &'a ModelParams, trainable: bool) -> ParamVars {
    params
        .iter()
        .map(|(name, t)| {
            let v = if trainable { tape.param(t) } else { tape.constant_ref(t) };
            (name.to_string(), v)
        })
        .collect()
}

fn lookup(vars: &ParamVars, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
}

fn attention_vars(vars: &ParamVars, prefix: &str) -> Result<AttentionVars> {
    Ok(AttentionVars {
        w_sa: lookup(vars, &format!("{prefix}.att.w_sa"))?,
        w_qa: lookup(vars, &format!("{prefix}.att.w_qa"))?,
        w_a: lookup(vars, &format!("{prefix}.att.w_a"))?,
    })
}

fn gate_vars(vars: &ParamVars, prefix: &str) -> Result<GateVars> {
    Ok(GateVars {
        w_p: lookup(vars, &format!("{prefix}.gate.w_p"))?,
        w_q: lookup(vars, &format!("{prefix}.gate.w_q"))?,
        cls_weight: lookup(vars, &format!("{prefix}.cls.weight"))?,
        cls_bias: lookup(vars, &format!("{prefix}.cls.bias"))?,
    })
}

fn gru_vars(vars: &ParamVars, prefix: &str) -> Result<GruVars> {
    GruVars::from_lookup(|t| lookup(vars, &format!("{prefix}.{t}")))
}

/// Tape handles produced by [`build_graph`].
#[derive(Clone, Copy, Debug)]
pub struct Graph {
    /// Combined logits before any inference-time credit.
    pub logits: Var,
    pub paragraph_logits: Option<Var>,
    pub visual_logits: Option<Var>,
    /// `1 × K` attention over paragraph rows.
    pub paragraph_attention: Option<Var>,
    /// `1 × O` attention over object rows.
    pub visual_attention: Option<Var>,
}

fn check_sample(sample: &PreparedSample, config: &ModelConfig) -> Result<()> {
    let id = &sample.id;
    if config.uses_visual() {
        let o = sample.visual.rows();
        if !sample.visual.is_matrix() || o == 0 || sample.visual.cols() != config.d_v {
            return Err(Error::Alignment(format!(
                "sample {id:?}: visual features {:?}, expected O × {}",
                sample.visual.shape(),
                config.d_v
            )));
        }
        if config.object_properties && sample.properties.len() != o {
            return Err(Error::Alignment(format!(
                "sample {id:?}: {} property sentences for {o} objects",
                sample.properties.len()
            )));
        }
    }
    if config.uses_paragraph() && sample.paragraph.is_empty() {
        return Err(Error::Alignment(format!("sample {id:?}: empty paragraph")));
    }
    if let Some(&i) = sample.recommended.last() {
        if i >= config.n_answers {
            return Err(Error::Alignment(format!(
                "sample {id:?}: recommended answer {i} outside {} answers",
                config.n_answers
            )));
        }
    }
    Ok(())
}

/// Records the model for one sample on `tape`.
pub fn build_graph(
    tape: &mut Tape<'_>,
    vars: &ParamVars,
    sample: &PreparedSample,
    config: &ModelConfig,
) -> Result<Graph> {
    check_sample(sample, config)?;
    let table = lookup(vars, "embedding")?;
    let q_table = if config.share_question_embeddings {
        table
    } else {
        lookup(vars, "q_embedding")?
    };
    let q = encode_question(tape, &sample.question, q_table, &gru_vars(vars, "q_gru")?)?;
    let sent_gru = if config.uses_sentence_gru() {
        Some(gru_vars(vars, "sent_gru")?)
    } else {
        None
    };
    let v = config.uses_visual().then(|| tape.constant(sample.visual.clone()));

    let (mut paragraph_logits, mut paragraph_attention) = (None, None);
    if config.uses_paragraph() {
        let gru = sent_gru.as_ref().expect("sentence GRU present");
        let p = encode_paragraph(tape, &sample.paragraph, table, gru)?;
        let rows = match (config.variant, v) {
            (Variant::Vtqa, Some(v)) => {
                let s = similarity(tape, v, p, lookup(vars, "para.sim.w_s")?)?;
                let vp = attend_paragraph_over_objects(tape, s, v)?;
                fuse_paragraph(tape, p, vp)?
            }
            _ => p,
        };
        let alpha = question_attention(tape, rows, q, &attention_vars(vars, "para")?)?;
        paragraph_logits = Some(pool_and_gate(tape, rows, alpha, q, &gate_vars(vars, "para")?)?);
        paragraph_attention = Some(alpha);
    }

    let (mut visual_logits, mut visual_attention) = (None, None);
    if let Some(v) = v {
        let rows = if config.object_properties {
            let gru = sent_gru.as_ref().expect("sentence GRU present");
            let c = encode_properties(tape, &sample.properties, sample.visual.rows(), table, gru)?;
            fuse_visual(tape, v, c)?
        } else {
            v
        };
        let alpha = question_attention(tape, rows, q, &attention_vars(vars, "vis")?)?;
        visual_logits = Some(pool_and_gate(tape, rows, alpha, q, &gate_vars(vars, "vis")?)?);
        visual_attention = Some(alpha);
    }

    let logits = match (paragraph_logits, visual_logits) {
        (Some(lp), Some(lv)) if config.late_fusion_active() => late_fuse_on_tape(tape, &[lp, lv])?,
        (Some(lp), Some(lv)) => tape.add(lp, lv)?,
        (Some(l), None) | (None, Some(l)) => l,
        (None, None) => unreachable!("every variant has a branch"),
    };
    Ok(Graph {
        logits,
        paragraph_logits,
        visual_logits,
        paragraph_attention,
        visual_attention,
    })
}

fn credit_list(sample: &PreparedSample, config: &ModelConfig) -> RecommendationList {
    RecommendationList {
        indices: sample.recommended.clone(),
        credit: config.credit,
    }
}

/// Cross-entropy of the combined logits against the sample's target.
/// With `credit_in_training` the recommendation bonus is added as a
/// constant, so no gradient flows through the standard deviation.
pub fn loss_on_tape(
    tape: &mut Tape<'_>,
    vars: &ParamVars,
    sample: &PreparedSample,
    config: &ModelConfig,
) -> Result<Var> {
    let target = sample.target.ok_or_else(|| {
        Error::Argument(format!("sample {:?} has no in-vocabulary answer", sample.id))
    })?;
    let graph = build_graph(tape, vars, sample, config)?;
    let mut logits = graph.logits;
    if config.credit_in_training && config.recommendation_active() {
        let current = tape.value(logits).clone();
        let boosted = apply_credit(&current, &credit_list(sample, config))?;
        let delta = boosted.zip_map(&current, |b, c| b - c);
        let delta = tape.constant(delta);
        logits = tape.add(logits, delta)?;
    }
    tape.cross_entropy(logits, target)
}

/// Loss and gradient of every parameter for one sample. Parameters the
/// sample does not reach get no entry.
pub fn loss_and_gradients(
    params: &ModelParams,
    sample: &PreparedSample,
    config: &ModelConfig,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, params, true);
    let loss = loss_on_tape(&mut tape, &vars, sample, config)?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let out = vars
        .into_iter()
        .filter_map(|(name, v)| grads.take(v).map(|g| (name, g)))
        .collect();
    Ok((value, out))
}

/// Values read off a finished forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// Final scores, including the recommendation credit when enabled.
    pub logits: Tensor,
    pub paragraph_logits: Option<Tensor>,
    pub visual_logits: Option<Tensor>,
    pub paragraph_attention: Option<Tensor>,
    pub visual_attention: Option<Tensor>,
}

/// Inference forward pass. Pure: neither `params` nor `sample` change.
pub fn forward(
    sample: &PreparedSample,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, params, false);
    let g = build_graph(&mut tape, &vars, sample, config)?;
    let value = |v: Option<Var>| v.map(|v| tape.value(v).clone());
    let mut logits = tape.value(g.logits).clone();
    if config.recommendation_active() {
        logits = apply_credit(&logits, &credit_list(sample, config))?;
    }
    Ok(ForwardOutput {
        logits,
        paragraph_logits: value(g.paragraph_logits),
        visual_logits: value(g.visual_logits),
        paragraph_attention: value(g.paragraph_attention),
        visual_attention: value(g.visual_attention),
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VTQACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    words: Vocabulary,
    answers: AnswerVocabulary,
    tensors: BTreeMap<String, ManifestEntry>,
}

/// Everything needed to rerun a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocabs: Vocabs,
    pub params: ModelParams,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.params.check_against(&ckpt.config)?;
    let mut offset = 0u64;
    let tensors = ckpt
        .params
        .iter()
        .map(|(name, t)| {
            let entry = ManifestEntry {
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 8 * t.len() as u64;
            (name.to_string(), entry)
        })
        .collect();
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: ckpt.config.clone(),
        words: ckpt.vocabs.words.clone(),
        answers: ckpt.vocabs.answers.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for (_, t) in ckpt.params.iter() {
        for x in t.data() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn corrupted(msg: impl Into<String>) -> Error {
    CheckpointError::Corrupted(msg.into()).into()
}

/// Reads a checkpoint; the tensors are validated against the config stored
/// in its own header.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(CheckpointError::MissingFile(path.to_path_buf()).into())
        }
        Err(e) => return Err(e.into()),
    };
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupted("bad magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[16..];
    if header_len > body.len() as u64 {
        return Err(corrupted(format!(
            "header claims {header_len} bytes, file has {}",
            body.len()
        )));
    }
    let (json, blobs) = body.split_at(header_len as usize);
    let header: Header =
        serde_json::from_slice(json).map_err(|e| corrupted(format!("header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(corrupted(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    header
        .config
        .validate()
        .map_err(|e| corrupted(format!("stored config: {e}")))?;

    let mut tensors = BTreeMap::new();
    let mut expected_offset = 0u64;
    for (name, entry) in header.tensors {
        let n: usize = entry.shape.iter().product();
        if entry.offset != expected_offset || entry.shape.is_empty() || n == 0 {
            return Err(corrupted(format!("bad manifest entry for {name:?}")));
        }
        let start = entry.offset as usize;
        let end = start + 8 * n;
        if end > blobs.len() {
            return Err(corrupted(format!("tensor {name:?} runs past end of file")));
        }
        let data = blobs[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.insert(name, Tensor::new(entry.shape, data)?);
        expected_offset = end as u64;
    }
    if expected_offset != blobs.len() as u64 {
        return Err(corrupted(format!(
            "{} trailing bytes after the last tensor",
            blobs.len() as u64 - expected_offset
        )));
    }
    let params = ModelParams::from_map(tensors);
    params.check_against(&header.config)?;
    Ok(Checkpoint {
        config: header.config,
        vocabs: Vocabs {
            words: header.words,
            answers: header.answers,
        },
        params,
    })
}

/// Loads only the parameters and checks them against `config` instead of
/// the stored one.
pub fn load_params_for(path: &Path, config: &ModelConfig) -> Result<ModelParams> {
    let ckpt = load_checkpoint(path)?;
    ckpt.params.check_against(config)?;
    Ok(ckpt.params)
}
