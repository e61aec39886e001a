//! Model documents and graph export.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::automaton::{Apfa, Edge, StateId};
use crate::error::{Error, Result};
use crate::estimation::FittedApfa;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphabetSpec {
    pub size: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Display label for each symbol, in symbol order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateEntry {
    pub id: StateId,
    pub level: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub n: u64,
    pub log_likelihood: f64,
    pub dimension: u64,
    pub aic: f64,
    pub bic: f64,
}

impl FitSummary {
    pub fn of(f: &FittedApfa) -> Self {
        FitSummary {
            n: f.total(),
            log_likelihood: f.log_likelihood(),
            dimension: f.dimension(),
            aic: f.aic(),
            bic: f.bic(),
        }
    }
}

/// How an artifact was made. No clock values, so reruns are byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub config: serde_json::Value,
    /// SHA-256 of the input dataset bytes, hex encoded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

/// JSON form of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApfaDocument {
    pub schema_version: u32,
    pub levels: usize,
    pub alphabets: Vec<AlphabetSpec>,
    pub states: Vec<StateEntry>,
    pub edges: Vec<Edge>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl ApfaDocument {
    pub fn from_apfa(a: &Apfa) -> Self {
        ApfaDocument {
            schema_version: SCHEMA_VERSION,
            levels: a.num_levels(),
            alphabets: a
                .alphabets()
                .iter()
                .map(|&size| AlphabetSpec {
                    size,
                    name: None,
                    labels: None,
                })
                .collect(),
            states: a.states().map(|id| StateEntry { id, level: a.level(id) }).collect(),
            edges: a.edges().to_vec(),
            fit: None,
            provenance: None,
        }
    }

    /// The fitted model, with its probabilities on the edges and a summary.
    pub fn from_fitted(f: &FittedApfa) -> Self {
        let mut doc = Self::from_apfa(f.apfa());
        doc.fit = Some(FitSummary::of(f));
        doc
    }

    pub fn with_names(mut self, names: &[String]) -> Self {
        for (spec, name) in self.alphabets.iter_mut().zip(names) {
            spec.name = Some(name.clone());
        }
        self
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    /// Rebuilds and validates the model.
    pub fn to_apfa(&self) -> Result<Apfa> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Other(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.alphabets.len() != self.levels {
            return Err(Error::Other(format!(
                "{} alphabets declared for {} levels",
                self.alphabets.len(),
                self.levels
            )));
        }
        for (i, entry) in self.states.iter().enumerate() {
            if entry.id != StateId::from_index(i) {
                return Err(Error::Other(format!("state ids must run 1..=n in order; found {} at position {}", entry.id, i + 1)));
            }
        }
        let alphabets = self.alphabets.iter().map(|a| a.size).collect();
        let levels = self.states.iter().map(|s| s.level).collect();
        Apfa::new(alphabets, levels, self.edges.clone())
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("documents serialize");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DotStyle {
    pub show_counts: bool,
    pub show_synthetic: bool,
}

/// Symbol colors; symbol 1 is red and symbol 2 blue.
pub const PALETTE: [&str; 8] = [
    "red",
    "blue",
    "darkgreen",
    "orange",
    "purple",
    "brown",
    "magenta",
    "gray40",
];

/// Graphviz rendering: left to right, one rank per level, edges colored by
/// symbol and labeled with probabilities to two decimals.
pub fn export_dot(a: &Apfa, style: DotStyle) -> String {
    // states only reachable through hidden edges are hidden too
    let mut visible = vec![false; a.num_states()];
    visible[a.root().index()] = true;
    let mut order: Vec<StateId> = a.states().collect();
    order.sort_by_key(|&s| a.level(s));
    for &s in &order {
        if !visible[s.index()] {
            continue;
        }
        for &e in a.out_edges(s) {
            let edge = a.edge(e);
            if style.show_synthetic || !edge.synthetic {
                visible[edge.target.index()] = true;
            }
        }
    }

    let mut out = String::new();
    out.push_str("digraph apfa {\n  rankdir=LR;\n  node [shape=circle];\n");
    for l in 0..=a.num_levels() {
        let ids: Vec<String> = a
            .states_at_level(l)
            .into_iter()
            .filter(|s| visible[s.index()])
            .map(|s| s.to_string())
            .collect();
        if !ids.is_empty() {
            let _ = writeln!(out, "  {{ rank=same; {}; }}", ids.join("; "));
        }
    }
    for edge in a.edges() {
        if !visible[edge.source.index()] || (edge.synthetic && !style.show_synthetic) {
            continue;
        }
        let color = PALETTE[(edge.symbol as usize - 1) % PALETTE.len()];
        let mut label = Vec::new();
        if let Some(p) = edge.prob {
            label.push(format!("{p:.2}"));
        }
        if style.show_counts {
            if let Some(n) = edge.count {
                label.push(format!("n={n}"));
            }
        }
        let mut attrs = vec![format!("color={color}")];
        if !label.is_empty() {
            attrs.push(format!("label=\"{}\"", label.join(" ")));
        }
        if edge.synthetic {
            attrs.push("style=dashed".into());
        }
        let _ = writeln!(out, "  {} -> {} [{}];", edge.source, edge.target, attrs.join(", "));
    }
    out.push_str("}\n");
    out
}
