//! Link prediction bench: a translational structure+text(+image) model,
//! ranking metrics and the comparisons built on them.

mod analysis;
mod features;
mod model;
mod rank;
pub mod synthetic;

pub use analysis::*;
pub use features::*;
pub use model::*;
pub use rank::*;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::round2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Structure,
    /// Original entity description.
    Text,
    /// Caption-derived text of the chosen variant.
    Generated,
    Image,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Structure, Modality::Text, Modality::Generated, Modality::Image];

    fn slot(self) -> usize {
        self as usize
    }
}

/// Named set of active modalities.
///
/// `i+t`, `t+g` and `i+t+g` include structure; `image`, `text` and
/// `image+text` do not; `structure` is structure alone. Other names are read
/// as `+`-joined letters from `s`, `t`, `g`, `i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ModalitySetting {
    name: String,
    active: [bool; 4],
}

impl ModalitySetting {
    pub fn new(name: impl Into<String>, modalities: &[Modality]) -> Self {
        let mut active = [false; 4];
        for m in modalities {
            active[m.slot()] = true;
        }
        Self { name: name.into(), active }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_active(&self, m: Modality) -> bool {
        self.active[m.slot()]
    }

    pub fn modalities(&self) -> Vec<Modality> {
        Modality::ALL.into_iter().filter(|m| self.is_active(*m)).collect()
    }
}

impl FromStr for ModalitySetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        use Modality::*;
        let name = s.trim().to_ascii_lowercase();
        let mods: Vec<Modality> = match name.as_str() {
            "i+t" => vec![Structure, Image, Text],
            "t+g" => vec![Structure, Text, Generated],
            "i+t+g" => vec![Structure, Image, Text, Generated],
            "image" => vec![Image],
            "text" => vec![Text],
            "image+text" => vec![Image, Text],
            "structure" => vec![Structure],
            other => other
                .split('+')
                .map(|tok| match tok {
                    "s" => Ok(Structure),
                    "t" => Ok(Text),
                    "g" => Ok(Generated),
                    "i" => Ok(Image),
                    _ => Err(format!("unknown modality setting {s:?}")),
                })
                .collect::<Result<_, _>>()?,
        };
        Ok(Self::new(name, &mods))
    }
}

impl TryFrom<String> for ModalitySetting {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ModalitySetting> for String {
    fn from(m: ModalitySetting) -> String {
        m.name
    }
}

impl fmt::Display for ModalitySetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMode {
    Raw,
    #[default]
    Filtered,
}

impl FromStr for FilterMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(FilterMode::Raw),
            "filtered" => Ok(FilterMode::Filtered),
            _ => Err(format!("unknown filter mode {s:?}; expected raw or filtered")),
        }
    }
}

impl fmt::Display for FilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterMode::Raw => "raw",
            FilterMode::Filtered => "filtered",
        })
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("improvement is undefined for baseline {0}")]
pub struct UndefinedImprovement(pub f64);

/// Relative gain in percent, unrounded.
pub fn improvement_exact(fusion: f64, baseline: f64) -> Result<f64, UndefinedImprovement> {
    if !fusion.is_finite() || !baseline.is_finite() || baseline <= 0.0 {
        return Err(UndefinedImprovement(baseline));
    }
    Ok(100.0 * (fusion - baseline) / baseline)
}

/// Relative gain in percent, rounded half-up to two decimals.
pub fn improvement(fusion: f64, baseline: f64) -> Result<f64, UndefinedImprovement> {
    improvement_exact(fusion, baseline).map(round2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn settings() {
        let it: ModalitySetting = "i+t".parse().unwrap();
        assert_eq!(it.modalities(), [Modality::Structure, Modality::Text, Modality::Image]);
        let text: ModalitySetting = "text".parse().unwrap();
        assert_eq!(text.modalities(), [Modality::Text]);
        let custom: ModalitySetting = "s+g".parse().unwrap();
        assert_eq!(custom.modalities(), [Modality::Structure, Modality::Generated]);
        assert!("x+y".parse::<ModalitySetting>().is_err());
        assert_eq!(serde_json::to_string(&it).unwrap(), "\"i+t\"");
    }

    #[test]
    fn improvement_examples() {
        assert_eq!(improvement(37.04, 35.03).unwrap(), 5.74);
        assert_eq!(improvement(32.50, 7.50).unwrap(), 333.33);
        assert_eq!(improvement(12.5, 12.5).unwrap(), 0.0);
        assert!(improvement(1.0, 0.0).is_err());
        assert!(improvement(1.0, -2.0).is_err());
    }

    proptest! {
        #[test]
        fn improvement_sign(a in 0.01f64..1000.0, b in 0.01f64..1000.0) {
            let x = improvement_exact(a, b).unwrap();
            prop_assert_eq!(x > 0.0, a > b);
            prop_assert_eq!(x < 0.0, a < b);
        }
    }
}
