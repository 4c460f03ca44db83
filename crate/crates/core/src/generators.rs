//! Embedding generators for unseen tokens.
//!
//! * AVG: the mean of the similar-set embeddings.
//! * ATT: softmax attention with scores `w . E(w')` for one learned vector `w`.
//! * PATT: as ATT, but each entry is scored by the learned row of its
//!   positional relation.
//!
//! The attention variants multiply the weighted sum by `1 / |S|` when
//! `verbatim_prefactor` is set (the default); clearing it leaves the plain
//! convex combination.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::lexicon::{format_float, parse_float, EmbeddingMatrix};
use crate::morphset::{Relation, SimilarSet};
use crate::rng;

/// Half-width of the uniform initializer for trainable parameters.
pub const INIT_HALF_WIDTH: f64 = 0.01;
/// Standard deviation of the initializer for tokens with an empty similar set.
pub const FALLBACK_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GeneratorKind {
    Avg,
    Att,
    Patt,
}

impl GeneratorKind {
    /// Rows of the trainable parameter matrix.
    pub fn param_rows(self) -> usize {
        match self {
            GeneratorKind::Avg => 0,
            GeneratorKind::Att => 1,
            GeneratorKind::Patt => Relation::COUNT,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::Avg => "AVG",
            GeneratorKind::Att => "ATT",
            GeneratorKind::Patt => "PATT",
        }
    }
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "AVG" | "AVG-EG" => Ok(GeneratorKind::Avg),
            "ATT" | "ATT-EG" => Ok(GeneratorKind::Att),
            "PATT" | "PATT-EG" => Ok(GeneratorKind::Patt),
            _ => Err(Error::Config(format!("unknown generator kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    kind: GeneratorKind,
    dim: usize,
    /// `param_rows(kind) x dim`: empty for AVG, `W` for ATT, `W_r` for PATT.
    weights: Array2<f64>,
    pub verbatim_prefactor: bool,
}

impl GeneratorParams {
    pub fn zeros(kind: GeneratorKind, dim: usize) -> Self {
        Self {
            kind,
            dim,
            weights: Array2::zeros((kind.param_rows(), dim)),
            verbatim_prefactor: true,
        }
    }

    /// Uniform in `[-0.01, 0.01)` from a seeded stream.
    pub fn init(kind: GeneratorKind, dim: usize, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let mut params = Self::zeros(kind, dim);
        params
            .weights
            .mapv_inplace(|_| rng.random_range(-INIT_HALF_WIDTH..INIT_HALF_WIDTH));
        params
    }

    pub fn with_weights(kind: GeneratorKind, weights: Array2<f64>) -> Result<Self> {
        if weights.nrows() != kind.param_rows() {
            return Err(Error::DimensionMismatch {
                expected: kind.param_rows(),
                found: weights.nrows(),
            });
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite generator parameter".into()));
        }
        Ok(Self {
            kind,
            dim: weights.ncols(),
            weights,
            verbatim_prefactor: true,
        })
    }

    pub fn with_prefactor(mut self, verbatim: bool) -> Self {
        self.verbatim_prefactor = verbatim;
        self
    }

    pub fn kind(&self) -> GeneratorKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weights
    }

    fn score_row(&self, relation: Relation) -> usize {
        match self.kind {
            GeneratorKind::Patt => relation.index(),
            _ => 0,
        }
    }

    fn prefactor(&self, n: usize) -> f64 {
        if self.verbatim_prefactor {
            1.0 / n as f64
        } else {
            1.0
        }
    }

    /// Header `<kind> <d> <verbatim|normalized>`, then one parameter row per
    /// line.
    pub fn to_text(&self) -> String {
        let policy = if self.verbatim_prefactor {
            "verbatim"
        } else {
            "normalized"
        };
        let mut out = format!("{} {} {}\n", self.kind, self.dim, policy);
        for row in self.weights.rows() {
            let fields: Vec<String> = row.iter().map(|&v| format_float(v)).collect();
            out.push_str(&fields.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(origin, 1, "missing <kind> <d> header"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let (kind, dim, verbatim) = match fields.as_slice() {
            [kind, dim, rest @ ..] if rest.len() <= 1 => {
                let kind = kind
                    .parse::<GeneratorKind>()
                    .map_err(|e| Error::parse(origin, 1, e.to_string()))?;
                let dim = dim
                    .parse::<usize>()
                    .ok()
                    .filter(|&d| d > 0)
                    .ok_or_else(|| Error::parse(origin, 1, "bad dimension"))?;
                let verbatim = match rest.first() {
                    None | Some(&"verbatim") => true,
                    Some(&"normalized") => false,
                    Some(other) => {
                        return Err(Error::parse(origin, 1, format!("bad prefactor policy {other:?}")))
                    }
                };
                (kind, dim, verbatim)
            }
            _ => return Err(Error::parse(origin, 1, "malformed header")),
        };
        let mut values = Vec::new();
        let mut rows = 0;
        for (idx, line) in lines {
            let before = values.len();
            for field in line.split_whitespace() {
                values.push(
                    parse_float(field)
                        .ok_or_else(|| Error::parse(origin, idx + 1, format!("bad float {field:?}")))?,
                );
            }
            if values.len() - before != dim {
                return Err(Error::parse(
                    origin,
                    idx + 1,
                    format!("expected {dim} values, found {}", values.len() - before),
                ));
            }
            rows += 1;
        }
        if rows != kind.param_rows() {
            return Err(Error::parse(
                origin,
                1,
                format!("{kind} needs {} parameter rows, found {rows}", kind.param_rows()),
            ));
        }
        let weights = Array2::from_shape_vec((rows, dim), values).expect("shape checked");
        let mut params = Self::with_weights(kind, weights)?;
        params.dim = dim;
        params.verbatim_prefactor = verbatim;
        Ok(params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path)?, path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn check(set: &SimilarSet, table: ArrayView2<'_, f64>, params: Option<&GeneratorParams>) -> Result<()> {
    if set.is_empty() {
        return Err(Error::EmptySimilarSet);
    }
    if let Some(p) = params {
        if p.dim != table.ncols() {
            return Err(Error::DimensionMismatch {
                expected: table.ncols(),
                found: p.dim,
            });
        }
    }
    Ok(())
}

fn gather(set: &SimilarSet, table: ArrayView2<'_, f64>) -> Array2<f64> {
    let ids: Vec<usize> = set.entries.iter().map(|e| e.id).collect();
    table.select(Axis(0), &ids)
}

/// Mean of the similar-set rows.
pub fn gen_avg(set: &SimilarSet, table: &EmbeddingMatrix) -> Result<Array1<f64>> {
    gen_avg_rows(set, table.rows().view())
}

pub fn gen_avg_rows(set: &SimilarSet, table: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    check(set, table, None)?;
    let rows = gather(set, table);
    Ok(rows.sum_axis(Axis(0)) / set.len() as f64)
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn scores(set: &SimilarSet, rows: &Array2<f64>, params: &GeneratorParams) -> Vec<f64> {
    set.entries
        .iter()
        .zip(rows.rows())
        .map(|(e, row)| params.weights.row(params.score_row(e.relation)).dot(&row))
        .collect()
}

/// Attention weights over the entries of `set`. For ATT every entry is
/// scored by the single learned vector, for PATT by its relation's row.
pub fn attention_weights(
    set: &SimilarSet,
    table: &EmbeddingMatrix,
    params: &GeneratorParams,
) -> Result<Vec<f64>> {
    let view = table.rows().view();
    check(set, view, Some(params))?;
    if params.kind == GeneratorKind::Avg {
        return Ok(vec![1.0 / set.len() as f64; set.len()]);
    }
    let rows = gather(set, view);
    Ok(softmax(&scores(set, &rows, params)))
}

/// Generated embedding for the generator kind in `params`.
pub fn generate(set: &SimilarSet, table: &EmbeddingMatrix, params: &GeneratorParams) -> Result<Array1<f64>> {
    generate_rows(set, table.rows().view(), params)
}

pub fn generate_rows(
    set: &SimilarSet,
    table: ArrayView2<'_, f64>,
    params: &GeneratorParams,
) -> Result<Array1<f64>> {
    check(set, table, Some(params))?;
    if params.kind == GeneratorKind::Avg {
        return gen_avg_rows(set, table);
    }
    let rows = gather(set, table);
    let alpha = softmax(&scores(set, &rows, params));
    let mut out = Array1::zeros(params.dim);
    for (a, row) in alpha.iter().zip(rows.rows()) {
        out.scaled_add(*a, &row);
    }
    out *= params.prefactor(set.len());
    Ok(out)
}

pub fn gen_att(set: &SimilarSet, table: &EmbeddingMatrix, params: &GeneratorParams) -> Result<Array1<f64>> {
    if params.kind != GeneratorKind::Att {
        return Err(Error::Config(format!("expected ATT parameters, got {}", params.kind)));
    }
    generate(set, table, params)
}

pub fn gen_patt(set: &SimilarSet, table: &EmbeddingMatrix, params: &GeneratorParams) -> Result<Array1<f64>> {
    if params.kind != GeneratorKind::Patt {
        return Err(Error::Config(format!("expected PATT parameters, got {}", params.kind)));
    }
    generate(set, table, params)
}

/// Gradients of `upstream . G(w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorGrad {
    /// Same shape as the parameter matrix.
    pub params: Array2<f64>,
    /// One row per similar-set entry, in entry order.
    pub inputs: Array2<f64>,
}

pub fn backward(
    set: &SimilarSet,
    table: &EmbeddingMatrix,
    params: &GeneratorParams,
    upstream: &Array1<f64>,
) -> Result<GeneratorGrad> {
    backward_rows(set, table.rows().view(), params, upstream)
}

pub fn backward_rows(
    set: &SimilarSet,
    table: ArrayView2<'_, f64>,
    params: &GeneratorParams,
    upstream: &Array1<f64>,
) -> Result<GeneratorGrad> {
    if params.kind == GeneratorKind::Avg {
        return Err(Error::NonTrainable);
    }
    check(set, table, Some(params))?;
    if upstream.len() != params.dim {
        return Err(Error::DimensionMismatch {
            expected: params.dim,
            found: upstream.len(),
        });
    }
    let rows = gather(set, table);
    let alpha = softmax(&scores(set, &rows, params));
    let c = params.prefactor(set.len());

    // dL/dalpha_i = c * (e_i . g); dL/ds_i = alpha_i * (u_i - sum_j alpha_j u_j)
    let u: Vec<f64> = rows.rows().into_iter().map(|r| c * r.dot(upstream)).collect();
    let mean_u: f64 = alpha.iter().zip(&u).map(|(a, u)| a * u).sum();

    let mut grad_params = Array2::zeros(params.weights.raw_dim());
    let mut grad_inputs = Array2::zeros(rows.raw_dim());
    for (i, (entry, row)) in set.entries.iter().zip(rows.rows()).enumerate() {
        let ds = alpha[i] * (u[i] - mean_u);
        let r = params.score_row(entry.relation);
        grad_params.row_mut(r).scaled_add(ds, &row);
        let mut gi = grad_inputs.row_mut(i);
        gi.scaled_add(c * alpha[i], upstream);
        gi.scaled_add(ds, &params.weights.row(r));
    }
    Ok(GeneratorGrad {
        params: grad_params,
        inputs: grad_inputs,
    })
}

/// Row for a token whose similar set is empty: `N(0, 0.02^2)` per component.
pub fn fallback_row(dim: usize, rng: &mut impl rand::Rng) -> Array1<f64> {
    let normal = Normal::new(0.0, FALLBACK_STD).expect("valid std");
    Array1::from_shape_fn(dim, |_| normal.sample(rng))
}
