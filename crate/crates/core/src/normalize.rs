//! Min-max scaling of attribution maps over a chosen pool of maps.
//!
//! The pool (a [`MapGroup`]) is one map at detection scope, all maps of an
//! image at image scope, and every map of a run at dataset scope. Maps that
//! share a pool share one colour scale, which is what makes attributions
//! comparable across detections and images.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detector::Target;
use crate::error::{Error, Result};
use crate::gradcam::{str_enum, AttributionMap};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationScope {
    #[default]
    Detection,
    Image,
    Dataset,
}

str_enum!(NormalizationScope { Detection => "detection", Image => "image", Dataset => "dataset" });

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extrema {
    pub min: f32,
    pub max: f32,
}

impl Extrema {
    pub fn of(values: &[f32]) -> Option<Self> {
        values.iter().fold(None, |acc, &v| Some(Extrema::point(v).merge_opt(acc)))
    }

    pub fn point(v: f32) -> Self {
        Extrema { min: v, max: v }
    }

    pub fn merge(self, other: Extrema) -> Extrema {
        Extrema {
            min: self.min.min(other.min),
            max: self.max.max(other.max),
        }
    }

    fn merge_opt(self, other: Option<Extrema>) -> Extrema {
        other.map_or(self, |o| self.merge(o))
    }

    /// Pools an iterator of extrema; `None` when empty.
    pub fn pool(items: impl IntoIterator<Item = Extrema>) -> Option<Extrema> {
        items.into_iter().fold(None, |acc, e| Some(e.merge_opt(acc)))
    }
}

/// Maps normalized together.
#[derive(Debug, Clone)]
pub struct MapGroup<'a> {
    pub scope: NormalizationScope,
    /// Positions of the member maps in the list passed to [`regroup`].
    pub members: Vec<usize>,
    pub maps: Vec<&'a AttributionMap>,
    pub group_min: f32,
    pub group_max: f32,
}

impl<'a> MapGroup<'a> {
    pub fn new(scope: NormalizationScope, members: Vec<(usize, &'a AttributionMap)>) -> Result<Self> {
        let extrema = Extrema::pool(members.iter().map(|(_, m)| Extrema {
            min: m.raw_min,
            max: m.raw_max,
        }))
        .ok_or_else(|| Error::invalid("cannot normalize an empty map group"))?;
        let (members, maps) = members.into_iter().unzip();
        Ok(MapGroup {
            scope,
            members,
            maps,
            group_min: extrema.min,
            group_max: extrema.max,
        })
    }

    pub fn extrema(&self) -> Extrema {
        Extrema {
            min: self.group_min,
            max: self.group_max,
        }
    }
}

/// A map scaled into `[0, 1]`, still at feature-map resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl NormalizedMap {
    pub fn peak(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }
}

/// `v ↦ (v − min) / (max − min)`; all zeros when `max == min`.
pub fn normalize_values(values: &[f32], extrema: Extrema) -> Vec<f32> {
    let span = extrema.max as f64 - extrema.min as f64;
    if span.is_nan() || span <= 0.0 {
        return vec![0.0; values.len()];
    }
    values
        .iter()
        .map(|&v| (((v as f64 - extrema.min as f64) / span) as f32).clamp(0.0, 1.0))
        .collect()
}

pub fn normalize(group: &MapGroup<'_>) -> Result<Vec<NormalizedMap>> {
    if group.maps.is_empty() {
        return Err(Error::invalid("cannot normalize an empty map group"));
    }
    let extrema = group.extrema();
    Ok(group
        .maps
        .iter()
        .map(|m| NormalizedMap {
            height: m.height(),
            width: m.width(),
            values: normalize_values(m.values.data(), extrema),
        })
        .collect())
}

/// Key that decides which maps share a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupKey {
    pub map: Option<usize>,
    pub image: Option<usize>,
    pub objectness: Option<bool>,
}

impl GroupKey {
    pub fn new(scope: NormalizationScope, map: usize, image: usize, target: Target, separate_targets: bool) -> Self {
        GroupKey {
            map: (scope == NormalizationScope::Detection).then_some(map),
            image: (scope != NormalizationScope::Dataset).then_some(image),
            objectness: separate_targets.then_some(target == Target::Objectness),
        }
    }
}

/// Partitions `maps` into normalization groups. `image_of[i]` identifies
/// the source image of `maps[i]`. With `separate_targets`, objectness and
/// class maps never share a group. Groups appear in order of their first
/// member.
pub fn regroup<'a>(
    maps: &'a [AttributionMap],
    scope: NormalizationScope,
    image_of: &[usize],
    separate_targets: bool,
) -> Result<Vec<MapGroup<'a>>> {
    if image_of.len() != maps.len() {
        return Err(Error::shape("regroup", format!("{} image assignments", maps.len()), image_of.len()));
    }
    let mut slots: HashMap<GroupKey, usize> = HashMap::new();
    let mut buckets: Vec<Vec<(usize, &AttributionMap)>> = Vec::new();
    for (i, (m, &img)) in maps.iter().zip(image_of).enumerate() {
        let key = GroupKey::new(scope, i, img, m.target, separate_targets);
        let slot = *slots.entry(key).or_insert_with(|| {
            buckets.push(Vec::new());
            buckets.len() - 1
        });
        buckets[slot].push((i, m));
    }
    buckets.into_iter().map(|b| MapGroup::new(scope, b)).collect()
}
