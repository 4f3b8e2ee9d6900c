//! Prunable-unit identifiers and submodel plans.
//!
//! A unit is either a whole transformer layer (layer mode) or one of its
//! MHA/FFN halves (component mode). Every unit maps d_model → d_model on the
//! residual stream, so any subset in any order composes into a runnable
//! submodel. Units carry 1-based layer indices to match how plans and
//! diagnostics are reported.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum UnitError {
    #[error("duplicate unit {0} in selection")]
    DuplicateUnit(String),
    #[error("flat unit index {index} outside 1..={max}")]
    FlatIndexOutOfRange { index: usize, max: usize },
}

/// Pruning granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    Layer,
    Component,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitPart {
    Whole,
    Mha,
    Ffn,
}

/// One prunable unit: a 1-based layer index plus which part of the layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UnitId {
    pub layer: usize,
    pub part: UnitPart,
}

impl UnitId {
    pub fn whole(layer: usize) -> Self {
        Self { layer, part: UnitPart::Whole }
    }

    pub fn mha(layer: usize) -> Self {
        Self { layer, part: UnitPart::Mha }
    }

    pub fn ffn(layer: usize) -> Self {
        Self { layer, part: UnitPart::Ffn }
    }

    /// Position key: ascending (layer, part) with MHA before FFN. `Whole`
    /// units only ever compare against other `Whole` units.
    fn order_key(&self) -> (usize, u8) {
        let p = match self.part {
            UnitPart::Whole | UnitPart::Mha => 0,
            UnitPart::Ffn => 1,
        };
        (self.layer, p)
    }

    /// 1-based flat index: layer mode counts layers, component mode counts
    /// [1ᵐʰᵃ, 1ᶠᶠⁿ, 2ᵐʰᵃ, …] positions.
    pub fn flat_index(&self) -> usize {
        match self.part {
            UnitPart::Whole => self.layer,
            UnitPart::Mha => 2 * self.layer - 1,
            UnitPart::Ffn => 2 * self.layer,
        }
    }

    /// Inverse of `flat_index` for the given mode.
    pub fn from_flat(mode: PruneMode, index: usize, n_layers: usize) -> Result<Self, UnitError> {
        let max = match mode {
            PruneMode::Layer => n_layers,
            PruneMode::Component => 2 * n_layers,
        };
        if index == 0 || index > max {
            return Err(UnitError::FlatIndexOutOfRange { index, max });
        }
        Ok(match mode {
            PruneMode::Layer => UnitId::whole(index),
            PruneMode::Component => {
                if index % 2 == 1 {
                    UnitId::mha((index + 1) / 2)
                } else {
                    UnitId::ffn(index / 2)
                }
            }
        })
    }
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.part {
            UnitPart::Whole => write!(f, "{}", self.layer),
            UnitPart::Mha => write!(f, "{}.mha", self.layer),
            UnitPart::Ffn => write!(f, "{}.ffn", self.layer),
        }
    }
}

/// Ordered list of retained units. Invariant: strictly ascending in
/// (layer, part); layer mode holds only `Whole` units, component mode only
/// `Mha`/`Ffn` units.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmodelPlan {
    pub units: Vec<UnitId>,
    pub mode: PruneMode,
}

impl SubmodelPlan {
    /// The unpruned plan at the given granularity.
    pub fn full(n_layers: usize, mode: PruneMode) -> Self {
        let units = match mode {
            PruneMode::Layer => (1..=n_layers).map(UnitId::whole).collect(),
            PruneMode::Component => decompose_components(n_layers),
        };
        Self { units, mode }
    }

    pub fn contains(&self, unit: UnitId) -> bool {
        self.units.contains(&unit)
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn unit_labels(&self) -> Vec<String> {
        self.units.iter().map(|u| u.to_string()).collect()
    }
}

/// The component-mode unit list [1ᵐʰᵃ, 1ᶠᶠⁿ, 2ᵐʰᵃ, …, Nᶠᶠⁿ].
pub fn decompose_components(n_layers: usize) -> Vec<UnitId> {
    let mut units = Vec::with_capacity(2 * n_layers);
    for layer in 1..=n_layers {
        units.push(UnitId::mha(layer));
        units.push(UnitId::ffn(layer));
    }
    units
}

/// Builds a plan from chosen flat unit indices: validates distinctness and
/// sorts ascending by (layer, part).
pub fn assemble_submodel(
    chosen: &[usize],
    mode: PruneMode,
    n_layers: usize,
) -> Result<SubmodelPlan, UnitError> {
    let mut units = chosen
        .iter()
        .map(|&i| UnitId::from_flat(mode, i, n_layers))
        .collect::<Result<Vec<_>, _>>()?;
    units.sort_by_key(|u| u.order_key());
    for pair in units.windows(2) {
        if pair[0] == pair[1] {
            return Err(UnitError::DuplicateUnit(pair[0].to_string()));
        }
    }
    Ok(SubmodelPlan { units, mode })
}
