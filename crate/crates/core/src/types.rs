//! Coordinate enums shared by every layer of the engine.

use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::Error;

/// Model component an activation was tapped from.
///
/// Variant order is the forward order through a VLM and is used to lay out
/// heatmap columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    VisionEncoder,
    Projector,
    Llm,
    PostLayernorm,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::VisionEncoder,
        Stage::Projector,
        Stage::Llm,
        Stage::PostLayernorm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::VisionEncoder => "vision_encoder",
            Stage::Projector => "projector",
            Stage::Llm => "llm",
            Stage::PostLayernorm => "post_layernorm",
        }
    }

    /// Sequence stages carry visual tokens plus a last token.
    pub fn is_sequence(self) -> bool {
        matches!(self, Stage::Llm | Stage::PostLayernorm)
    }
}

/// How a layer's two-dimensional activation was reduced to a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    RawGrid,
    Avg,
    Region,
    LlmConcat,
    LlmRegion,
    /// Steering-vector halves written for the extractor.
    Steering,
    /// Final-position logit vectors.
    Logits,
}

impl Pooling {
    pub const ALL: [Pooling; 7] = [
        Pooling::RawGrid,
        Pooling::Avg,
        Pooling::Region,
        Pooling::LlmConcat,
        Pooling::LlmRegion,
        Pooling::Steering,
        Pooling::Logits,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::RawGrid => "raw_grid",
            Pooling::Avg => "avg",
            Pooling::Region => "region",
            Pooling::LlmConcat => "llm_concat",
            Pooling::LlmRegion => "llm_region",
            Pooling::Steering => "steering",
            Pooling::Logits => "logits",
        }
    }

    /// Whether probes may be trained on this pooling at the given stage.
    pub fn probeable_at(self, stage: Stage) -> bool {
        match self {
            Pooling::Avg | Pooling::Region => !stage.is_sequence(),
            Pooling::LlmConcat | Pooling::LlmRegion => stage.is_sequence(),
            Pooling::RawGrid | Pooling::Steering | Pooling::Logits => false,
        }
    }
}

/// Dataset partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

macro_rules! str_enum {
    ($ty:ty, $what:literal) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self, Error> {
                <$ty>::ALL
                    .iter()
                    .copied()
                    .find(|v| v.as_str() == s)
                    .ok_or_else(|| Error::InvalidConfig(alloc::format!("unknown {} {s:?}", $what)))
            }
        }
    };
}

str_enum!(Stage, "stage");
str_enum!(Pooling, "pooling");
str_enum!(Split, "split");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
        }
        for p in Pooling::ALL {
            assert_eq!(p.as_str().parse::<Pooling>().unwrap(), p);
        }
        assert!("pooled".parse::<Pooling>().is_err());
    }

    #[test]
    fn llm_pooling_only_on_sequence_stages() {
        assert!(!Pooling::LlmConcat.probeable_at(Stage::VisionEncoder));
        assert!(Pooling::LlmConcat.probeable_at(Stage::PostLayernorm));
        assert!(Pooling::Avg.probeable_at(Stage::Projector));
        assert!(!Pooling::Region.probeable_at(Stage::Llm));
    }
}
