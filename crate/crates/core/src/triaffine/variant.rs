use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{checked_dot, span_attention, triaff, AttentionWeights, TriaffineSite};
use crate::error::{Error, Result};
use crate::span::Span;
use crate::tensor::{MlpParams, Tensor};

/// Model variants compared in the ablation study.
///
/// * `A`: biaffine scoring of the two boundaries, no span representation.
/// * `B`: triaffine attention, linear scoring of the span representation.
/// * `C`: triaffine attention with one tensor shared by all labels.
/// * `D`: attention by a label query against each token, no boundaries.
/// * `E`: linear attention over boundaries and token.
/// * `F`: triaffine attention, linear scoring over boundaries and span representation.
/// * `G`: triaffine attention and triaffine scoring.
/// * `H`: `G` followed by cross-span attention and scoring of the top spans.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
    #[default]
    H,
}

impl Setting {
    pub const ALL: [Setting; 8] =
        [Setting::A, Setting::B, Setting::C, Setting::D, Setting::E, Setting::F, Setting::G, Setting::H];

    pub fn uses_cross(self) -> bool {
        self == Setting::H
    }

    pub fn uses_attention(self) -> bool {
        self != Setting::A
    }

    pub fn description(self) -> &'static str {
        match self {
            Setting::A => "biaffine boundaries",
            Setting::B => "linear scoring, no boundaries",
            Setting::C => "attention without label factor",
            Setting::D => "attention without boundaries",
            Setting::E => "linear attention",
            Setting::F => "linear scoring with boundaries",
            Setting::G => "intermediate predictions",
            Setting::H => "cross-span predictions",
        }
    }
}

/// Which factors a setting uses, split into span representation and span
/// classification, with the function of each part.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Factors {
    pub rep_label: bool,
    pub rep_boundary: bool,
    /// `None` when there is no attention-based representation.
    pub rep_function: Option<&'static str>,
    pub cls_boundary: bool,
    pub cls_attention: bool,
    pub cls_cross: bool,
    pub cls_function: &'static str,
}

impl Setting {
    pub fn factors(self) -> Factors {
        let full = Factors {
            rep_label: true,
            rep_boundary: true,
            rep_function: Some("tri"),
            cls_boundary: true,
            cls_attention: true,
            cls_cross: false,
            cls_function: "tri",
        };
        match self {
            Setting::A => Factors {
                rep_label: false,
                rep_boundary: false,
                rep_function: None,
                cls_attention: false,
                cls_function: "bi",
                ..full
            },
            Setting::B => Factors { cls_boundary: false, cls_function: "lin", ..full },
            Setting::C => Factors { rep_label: false, ..full },
            Setting::D => Factors { rep_boundary: false, rep_function: Some("lin"), ..full },
            Setting::E => Factors { rep_function: Some("lin"), ..full },
            Setting::F => Factors { cls_function: "lin", ..full },
            Setting::G => full,
            Setting::H => Factors { cls_cross: true, ..full },
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = (b'a' + *self as u8) as char;
        write!(f, "{c}")
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().trim_start_matches('(').trim_end_matches(')').to_ascii_lowercase();
        Setting::ALL
            .into_iter()
            .find(|v| v.to_string() == t)
            .ok_or_else(|| Error::Config(format!("unknown setting '{s}' (expected a-h)")))
    }
}

/// How intermediate span logits are computed.
#[derive(Clone, Debug, PartialEq)]
pub enum SpanScorer {
    /// `[u;1]^T V_r [v;1]`: a triaffine site with middle extent 1 fed the constant `[1]`.
    Biaffine(TriaffineSite),
    /// `TriAff(h_i, h_j, h_ijr, V_r)`.
    Triaffine(TriaffineSite),
    /// `V_r . h_ijr + b_r`.
    Linear { weights: Vec<Vec<f64>>, bias: Vec<f64> },
    /// `a_r . MLP_a(h_i) + b_r . MLP_c(h_j) + c_r . h_ijr + bias_r`.
    LinearConcat {
        left: MlpParams,
        right: MlpParams,
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        c: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
}

/// Value-level weights of the span layer of one variant.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantWeights {
    pub setting: Setting,
    /// Label count including None.
    pub labels: usize,
    pub attention: Option<AttentionWeights>,
    pub scorer: SpanScorer,
}

/// Intermediate logits `p_{i,j,r}` of one span for every label.
pub fn variant_score(weights: &VariantWeights, h: &Tensor, span: Span) -> Result<Vec<f64>> {
    let attention = match (&weights.attention, weights.setting.uses_attention()) {
        (Some(att), true) => Some(span_attention(h, span, att)?),
        (None, false) => None,
        _ => {
            return Err(Error::Config(format!(
                "setting {} and the supplied attention weights disagree",
                weights.setting
            )))
        }
    };
    let rep = |r: usize| -> &[f64] {
        let reps = &attention.as_ref().expect("attention present").reps;
        &reps[if reps.len() == 1 { 0 } else { r }]
    };
    let (hi, hj) = (h.row(span.start), h.row(span.end));
    (0..weights.labels)
        .map(|r| match &weights.scorer {
            SpanScorer::Biaffine(site) => triaff(hi, hj, &[1.0], site.tensor(r), &site.mlps),
            SpanScorer::Triaffine(site) => triaff(hi, hj, rep(r), site.tensor(r), &site.mlps),
            SpanScorer::Linear { weights, bias } => Ok(checked_dot(&weights[r], rep(r))? + bias[r]),
            SpanScorer::LinearConcat { left, right, a, b, c, bias } => {
                let u = left.apply(hi)?;
                let v = right.apply(hj)?;
                Ok(checked_dot(&a[r], &u)? + checked_dot(&b[r], &v)? + checked_dot(&c[r], rep(r))? + bias[r])
            }
        })
        .collect()
}
