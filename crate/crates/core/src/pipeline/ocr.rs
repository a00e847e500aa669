use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alto::{AltoPage, WordToken};
use crate::geometry::{contains_point, NormBox};

/// How a word is judged to fall within a predicted box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContainmentPolicy {
    /// The word's center lies in the box (half-open).
    #[default]
    Center,
    /// The word's box lies entirely inside the box.
    Full,
    /// The word's box overlaps the box with positive area.
    AnyOverlap,
}

impl ContainmentPolicy {
    pub fn admits(self, region: &NormBox, token: &WordToken) -> bool {
        match self {
            ContainmentPolicy::Center => {
                let (cx, cy) = token.bbox.center();
                contains_point(region, cx, cy)
            }
            ContainmentPolicy::Full => region.contains_box(&token.bbox),
            ContainmentPolicy::AnyOverlap => region.intersection_area(&token.bbox) > 0.0,
        }
    }
}

impl FromStr for ContainmentPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "center" => Ok(ContainmentPolicy::Center),
            "full" => Ok(ContainmentPolicy::Full),
            "any-overlap" | "any_overlap" => Ok(ContainmentPolicy::AnyOverlap),
            other => Err(format!(
                "unknown containment policy {other:?} (expected center, full or any-overlap)"
            )),
        }
    }
}

impl fmt::Display for ContainmentPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContainmentPolicy::Center => "center",
            ContainmentPolicy::Full => "full",
            ContainmentPolicy::AnyOverlap => "any-overlap",
        })
    }
}

/// Words of `page` that fall within `region`, in reading order.
pub fn extract_ocr_in_box(page: &AltoPage, region: &NormBox, policy: ContainmentPolicy) -> Vec<String> {
    let mut hits: Vec<&WordToken> = page
        .tokens
        .iter()
        .filter(|t| policy.admits(region, t))
        .collect();
    hits.sort_by_key(|t| t.order_index);
    hits.into_iter().map(|t| t.text.clone()).collect()
}
