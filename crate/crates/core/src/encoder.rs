//! Token embedding of a visit sequence and `[CLS]` pooling.
//!
//! Layout of an encoded sequence with `k` visits:
//!
//! ```text
//! row 0            CLS
//! rows 1..=3       DEM:gender, DEM:race, DEM:income   (+ positional[0])
//! row 4 + 4i + f   V{i}:{sys|bmi|hba1c|chol}
//! ```
//!
//! A biomarker token row is
//! `field[f] + value · value_direction[f] + positional[i] + segment[seg_i]`.

use ndarray::{s, Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::ingest::{encode_demographics, Biomarker, BiomarkerVector, Gender, IncomeClass, Race, TrainingExample};
use crate::nn::{Grads, ParamId, ParamStore};
use crate::rng::Rng;

pub const EMBED_INIT_STD: f64 = 0.02;
pub const DEMOGRAPHIC_TOKENS: usize = 3;
pub const TOKENS_PER_VISIT: usize = 4;

/// `sys: {v}; bmi: {v}; hba1c: {v}; chol: {v}` with four decimals.
pub fn serialize_visit(b: &BiomarkerVector) -> String {
    Biomarker::ALL
        .iter()
        .map(|m| format!("{}: {:.4}", m.token(), b.get(*m)))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Sequence length for `k` visits: CLS, three demographic tokens, four per visit.
pub fn sequence_len(k: usize) -> usize {
    1 + DEMOGRAPHIC_TOKENS + TOKENS_PER_VISIT * k
}

/// Embedding tables, generic over storage so the same layout serves owned
/// matrices, borrowed views and parameter-store handles.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T> {
    /// 4 × d: one row per biomarker field token.
    pub field: T,
    /// 4 × d: scaled by the normalized value.
    pub value_direction: T,
    /// max_visits × d.
    pub positional: T,
    /// 2 × d.
    pub segment: T,
    pub gender: T,
    pub race: T,
    pub income: T,
    /// 1 × d.
    pub cls: T,
}

impl EmbeddingTable<Array2<f64>> {
    pub fn init(rng: &mut Rng, d_model: usize, max_visits: usize) -> Self {
        let mut store = ParamStore::new();
        let ids = EmbeddingTable::<ParamId>::register(&mut store, rng, "", d_model, max_visits);
        let take = |id: ParamId| store.get(id).clone();
        EmbeddingTable {
            field: take(ids.field),
            value_direction: take(ids.value_direction),
            positional: take(ids.positional),
            segment: take(ids.segment),
            gender: take(ids.gender),
            race: take(ids.race),
            income: take(ids.income),
            cls: take(ids.cls),
        }
    }

    pub fn view(&self) -> EmbeddingTable<&Array2<f64>> {
        EmbeddingTable {
            field: &self.field,
            value_direction: &self.value_direction,
            positional: &self.positional,
            segment: &self.segment,
            gender: &self.gender,
            race: &self.race,
            income: &self.income,
            cls: &self.cls,
        }
    }
}

impl EmbeddingTable<ParamId> {
    pub fn register(store: &mut ParamStore, rng: &mut Rng, prefix: &str, d_model: usize, max_visits: usize) -> Self {
        let mut add = |name: &str, rows: usize| store.normal(rng, format!("{prefix}embed.{name}"), (rows, d_model), EMBED_INIT_STD);
        EmbeddingTable {
            field: add("field", TOKENS_PER_VISIT),
            value_direction: add("value_direction", TOKENS_PER_VISIT),
            positional: add("positional", max_visits),
            segment: add("segment", 2),
            gender: add("gender", Gender::ALL.len()),
            race: add("race", Race::ALL.len()),
            income: add("income", IncomeClass::ALL.len()),
            cls: add("cls", 1),
        }
    }

    pub fn resolve<'a>(&self, store: &'a ParamStore) -> EmbeddingTable<&'a Array2<f64>> {
        EmbeddingTable {
            field: store.get(self.field),
            value_direction: store.get(self.value_direction),
            positional: store.get(self.positional),
            segment: store.get(self.segment),
            gender: store.get(self.gender),
            race: store.get(self.race),
            income: store.get(self.income),
            cls: store.get(self.cls),
        }
    }
}

/// Where a row of an encoded sequence came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TokenSource {
    Cls,
    Gender(usize),
    Race(usize),
    Income(usize),
    Biomarker { visit: usize, field: usize, value: f64, segment: usize },
    Padding,
}

impl TokenSource {
    pub fn label(&self) -> String {
        match *self {
            TokenSource::Cls => "CLS".into(),
            TokenSource::Gender(_) => "DEM:gender".into(),
            TokenSource::Race(_) => "DEM:race".into(),
            TokenSource::Income(_) => "DEM:income".into(),
            TokenSource::Biomarker { visit, field, .. } => format!("V{visit}:{}", Biomarker::ALL[field].token()),
            TokenSource::Padding => "PAD".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    /// L × d_model.
    pub matrix: Array2<f64>,
    /// `true` marks a padding row.
    pub mask: Vec<bool>,
    pub tokens: Vec<TokenSource>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn labels(&self) -> Vec<String> {
        self.tokens.iter().map(TokenSource::label).collect()
    }

    pub fn has_padding(&self) -> bool {
        self.mask.iter().any(|&m| m)
    }
}

pub fn embed_example(ex: &TrainingExample, tables: &EmbeddingTable<&Array2<f64>>) -> Result<EncodedSequence> {
    embed_example_padded(ex, tables, 0)
}

/// Embeds `ex`, appending zero rows marked as padding until the sequence has
/// at least `pad_to` rows.
pub fn embed_example_padded(
    ex: &TrainingExample,
    tables: &EmbeddingTable<&Array2<f64>>,
    pad_to: usize,
) -> Result<EncodedSequence> {
    let k = ex.inputs.len();
    if k == 0 {
        return Err(Error::EmptySequence);
    }
    let max = tables.positional.nrows();
    if k > max {
        return Err(Error::SequenceTooLong { visits: k, max });
    }
    if ex.segments.len() != k || ex.positions.len() != k {
        return Err(Error::Shape(format!(
            "{k} visits with {} positions and {} segments",
            ex.positions.len(),
            ex.segments.len()
        )));
    }

    let demo = encode_demographics(&ex.demographics);
    let mut tokens = Vec::with_capacity(sequence_len(k));
    tokens.push(TokenSource::Cls);
    tokens.push(TokenSource::Gender(demo.gender));
    tokens.push(TokenSource::Race(demo.race));
    tokens.push(TokenSource::Income(demo.income));
    for (i, visit) in ex.inputs.iter().enumerate() {
        let position = ex.positions[i];
        if position >= max {
            return Err(Error::SequenceTooLong { visits: position + 1, max });
        }
        let segment = usize::from(ex.segments[i]);
        if segment > 1 {
            return Err(Error::Shape(format!("segment id {segment} at visit {i}")));
        }
        for (field, value) in visit.biomarkers.to_array().into_iter().enumerate() {
            tokens.push(TokenSource::Biomarker { visit: position, field, value, segment });
        }
    }
    let real = tokens.len();
    tokens.resize(real.max(pad_to), TokenSource::Padding);

    let d = tables.cls.ncols();
    let mut matrix = Array2::zeros((tokens.len(), d));
    for (mut row, token) in matrix.rows_mut().into_iter().zip(&tokens) {
        match *token {
            TokenSource::Cls => row.assign(&tables.cls.row(0)),
            TokenSource::Gender(g) => {
                row.assign(&tables.gender.row(g));
                row += &tables.positional.row(0);
            }
            TokenSource::Race(r) => {
                row.assign(&tables.race.row(r));
                row += &tables.positional.row(0);
            }
            TokenSource::Income(i) => {
                row.assign(&tables.income.row(i));
                row += &tables.positional.row(0);
            }
            TokenSource::Biomarker { visit, field, value, segment } => {
                row.assign(&tables.field.row(field));
                row.scaled_add(value, &tables.value_direction.row(field));
                row += &tables.positional.row(visit);
                row += &tables.segment.row(segment);
            }
            TokenSource::Padding => {}
        }
    }
    let mask = tokens.iter().map(|t| matches!(t, TokenSource::Padding)).collect();
    Ok(EncodedSequence { matrix, mask, tokens })
}

/// Scatters the gradient of an encoded sequence back into the tables.
pub fn embed_backward(tokens: &[TokenSource], grad: &Array2<f64>, ids: &EmbeddingTable<ParamId>, grads: &mut Grads) {
    for (token, g) in tokens.iter().zip(grad.rows()) {
        let mut add = |id: ParamId, row: usize, scale: f64| {
            grads.get_mut(id).row_mut(row).scaled_add(scale, &g);
        };
        match *token {
            TokenSource::Cls => add(ids.cls, 0, 1.0),
            TokenSource::Gender(i) => {
                add(ids.gender, i, 1.0);
                add(ids.positional, 0, 1.0);
            }
            TokenSource::Race(i) => {
                add(ids.race, i, 1.0);
                add(ids.positional, 0, 1.0);
            }
            TokenSource::Income(i) => {
                add(ids.income, i, 1.0);
                add(ids.positional, 0, 1.0);
            }
            TokenSource::Biomarker { visit, field, value, segment } => {
                add(ids.field, field, 1.0);
                add(ids.value_direction, field, value);
                add(ids.positional, visit, 1.0);
                add(ids.segment, segment, 1.0);
            }
            TokenSource::Padding => {}
        }
    }
}

/// Linear map from the `[CLS]` row to the latent vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead<T> {
    /// d_model × d_latent.
    pub weight: T,
    /// 1 × d_latent.
    pub bias: T,
}

impl ProjectionHead<ParamId> {
    pub fn register(store: &mut ParamStore, rng: &mut Rng, d_model: usize, d_latent: usize) -> Self {
        ProjectionHead {
            weight: store.normal(rng, "proj.weight", (d_model, d_latent), 1.0 / (d_model as f64).sqrt()),
            bias: store.filled("proj.bias", crate::nn::ParamKind::Decay, (1, d_latent), 0.0),
        }
    }

    pub fn resolve<'a>(&self, store: &'a ParamStore) -> ProjectionHead<&'a Array2<f64>> {
        ProjectionHead { weight: store.get(self.weight), bias: store.get(self.bias) }
    }
}

/// `W_projᵀ · row₀ + b_proj`.
pub fn pool_and_project(encoder_output: &Array2<f64>, head: &ProjectionHead<&Array2<f64>>) -> Array1<f64> {
    encoder_output.row(0).dot(head.weight) + head.bias.row(0)
}

/// Gradient of the projection with respect to the encoder output (only row 0
/// is non-zero); accumulates weight and bias gradients.
pub fn pool_backward(
    encoder_output: &Array2<f64>,
    grad_latent: &Array1<f64>,
    head: &ProjectionHead<ParamId>,
    store: &ParamStore,
    grads: &mut Grads,
) -> Array2<f64> {
    let cls = encoder_output.row(0);
    let outer = cls.insert_axis(Axis(1)).dot(&grad_latent.view().insert_axis(Axis(0)));
    *grads.get_mut(head.weight) += &outer;
    grads.get_mut(head.bias).row_mut(0).scaled_add(1.0, grad_latent);

    let mut grad_out = Array2::zeros(encoder_output.raw_dim());
    grad_out.slice_mut(s![0, ..]).assign(&store.get(head.weight).dot(grad_latent));
    grad_out
}
