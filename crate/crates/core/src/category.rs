//! Counterfactual categories, the built-in question bank and town-based split
//! assignment.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::types::Split;
use crate::{Error, Result};

/// Identifier of a counterfactual data category.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub enum CategoryId {
    Presence1,
    Presence2,
    Count1,
    Count2,
    Spatial1,
    Spatial2,
    Orientation1,
    Orientation2,
    Custom(String),
}

impl CategoryId {
    pub const BUILTIN: [CategoryId; 8] = [
        CategoryId::Presence1,
        CategoryId::Presence2,
        CategoryId::Count1,
        CategoryId::Count2,
        CategoryId::Spatial1,
        CategoryId::Spatial2,
        CategoryId::Orientation1,
        CategoryId::Orientation2,
    ];

    pub fn as_str(&self) -> &str {
        match self {
            CategoryId::Presence1 => "Presence-1",
            CategoryId::Presence2 => "Presence-2",
            CategoryId::Count1 => "Count-1",
            CategoryId::Count2 => "Count-2",
            CategoryId::Spatial1 => "Spatial-1",
            CategoryId::Spatial2 => "Spatial-2",
            CategoryId::Orientation1 => "Orientation-1",
            CategoryId::Orientation2 => "Orientation-2",
            CategoryId::Custom(name) => name,
        }
    }

    pub fn parse(s: &str) -> CategoryId {
        Self::BUILTIN
            .iter()
            .find(|c| c.as_str() == s)
            .cloned()
            .unwrap_or_else(|| CategoryId::Custom(s.to_string()))
    }

    pub fn concept(&self) -> Concept {
        match self {
            CategoryId::Presence1 | CategoryId::Presence2 => Concept::Presence,
            CategoryId::Count1 | CategoryId::Count2 => Concept::Count,
            CategoryId::Spatial1 | CategoryId::Spatial2 => Concept::Spatial,
            CategoryId::Orientation1 | CategoryId::Orientation2 => Concept::Orientation,
            CategoryId::Custom(_) => Concept::Custom,
        }
    }
}

impl fmt::Display for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<String> for CategoryId {
    fn from(s: String) -> Self {
        CategoryId::parse(&s)
    }
}

impl From<CategoryId> for String {
    fn from(c: CategoryId) -> Self {
        c.as_str().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Concept {
    Presence,
    Count,
    Spatial,
    Orientation,
    Custom,
}

/// One category of the question bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualCategory {
    pub category_id: CategoryId,
    pub concept: Concept,
    pub class_labels: Vec<String>,
    pub question: String,
    pub distances_m: Vec<u32>,
}

pub const STANDARD_DISTANCES_M: [u32; 6] = [5, 10, 20, 30, 40, 50];

impl CounterfactualCategory {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidConfig(alloc::format!("{}: {msg}", self.category_id)));
        if self.class_labels.is_empty() {
            return fail("class_labels is empty");
        }
        for (i, label) in self.class_labels.iter().enumerate() {
            if self.class_labels[..i].contains(label) {
                return fail("duplicate class label");
            }
        }
        if self.distances_m.windows(2).any(|w| w[0] >= w[1]) {
            return fail("distances_m must be strictly increasing");
        }
        if self.category_id == CategoryId::Spatial2 && self.distances_m.contains(&5) {
            return fail("Spatial-2 has no 5 m versions");
        }
        if self.concept == Concept::Count {
            let expected = ["Zero", "One", "Two", "Three", "Four"];
            let prefix: Vec<&str> = self.class_labels.iter().map(String::as_str).collect();
            if !expected.starts_with(&prefix) {
                return fail("count labels must follow numeric order Zero..Four");
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_labels.len()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.class_labels.iter().position(|l| l == label)
    }
}

/// The eight built-in categories with their questions and answer lists.
pub fn builtin_bank() -> Vec<CounterfactualCategory> {
    let binary = |a: &str, b: &str| vec![a.to_string(), b.to_string()];
    let counts: Vec<String> = ["Zero", "One", "Two", "Three", "Four"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let table: [(CategoryId, &str, Vec<String>); 8] = [
        (CategoryId::Presence1, "Is there a pedestrian ahead?", binary("Yes", "No")),
        (CategoryId::Presence2, "Is there a traffic barrel ahead?", binary("Yes", "No")),
        (CategoryId::Count1, "How many pedestrians are ahead?", counts.clone()),
        (CategoryId::Count2, "How many traffic barrels are ahead?", counts),
        (CategoryId::Spatial1, "Which of the truck's blinkers is on?", binary("Left", "Right")),
        (
            CategoryId::Spatial2,
            "On which side of the road is the pedestrian walking?",
            binary("Left", "Right"),
        ),
        (
            CategoryId::Orientation1,
            "In which direction is the pedestrian walking?",
            binary("Left", "Right"),
        ),
        (
            CategoryId::Orientation2,
            "In which direction is the bicycle moving?",
            binary("Left", "Right"),
        ),
    ];
    table
        .into_iter()
        .map(|(id, question, class_labels)| {
            let distances_m = if id == CategoryId::Spatial2 {
                STANDARD_DISTANCES_M[1..].to_vec()
            } else {
                STANDARD_DISTANCES_M.to_vec()
            };
            CounterfactualCategory {
                concept: id.concept(),
                category_id: id,
                class_labels,
                question: question.to_string(),
                distances_m,
            }
        })
        .collect()
}

/// Towns with a built-in split rule.
pub const KNOWN_TOWNS: [&str; 10] = [
    "Town01", "Town02", "Town03", "Town04", "Town05", "Town06", "Town07", "Town10HD", "Town12",
    "Town15",
];

/// User-supplied scene → split mapping for custom scenes.
pub type SceneMap = BTreeMap<String, Split>;

/// Split for a `(category, scene)` pair.
///
/// A custom mapping entry wins over the built-in town rule. Spatial-2 sends
/// both Town01 and Town02 to `Train`; its validation set is carved out of the
/// training pool downstream (see [`carved_validation`]).
pub fn assign_split(category: &CategoryId, scene: &str, custom: &SceneMap) -> Result<Split> {
    if let Some(split) = custom.get(scene) {
        return Ok(*split);
    }
    let default = match scene {
        "Town01" | "Town02" | "Town03" | "Town04" | "Town05" | "Town06" | "Town07"
        | "Town10HD" => Some(Split::Train),
        "Town12" => Some(Split::Val),
        "Town15" => Some(Split::Test),
        _ => None,
    };
    let split = match (category, scene) {
        (CategoryId::Spatial1, "Town10HD") => Some(Split::Val),
        (CategoryId::Spatial2, "Town07") => Some(Split::Test),
        _ => default,
    };
    split.ok_or_else(|| Error::UnknownScene {
        category: category.as_str().to_string(),
        scene: scene.to_string(),
    })
}

/// Whether the category's validation set is carved from its training pool
/// instead of coming from a dedicated town.
pub fn carved_validation(category: &CategoryId) -> bool {
    *category == CategoryId::Spatial2
}
