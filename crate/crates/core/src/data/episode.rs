use rand::seq::{index, SliceRandom};

use super::{Collection, LabeledImage};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeItem {
    pub image: LabeledImage,
    /// Episode-local label in `[0, way)`.
    pub label: usize,
}

/// One N-way K-shot task. Support and query lists are class-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    /// `classes[local] = global class_id`.
    pub classes: Vec<usize>,
}

impl Episode {
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|s| s.label).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|s| s.label).collect()
    }
}

pub fn sample_episode(
    collection: &Collection,
    way: usize,
    shot: usize,
    queries_per_class: usize,
    rng: &mut StreamRng,
) -> Result<Episode> {
    if way == 0 || shot == 0 {
        return Err(Error::InsufficientData {
            way,
            reason: format!("way = {way}, shot = {shot}; both must be positive"),
        });
    }
    if collection.classes.len() < way {
        return Err(Error::InsufficientData {
            way,
            reason: format!(
                "collection `{}` has only {} classes",
                collection.name,
                collection.classes.len()
            ),
        });
    }
    let need = shot + queries_per_class;
    if let Some(c) = collection.classes.iter().find(|c| c.images.len() < need) {
        return Err(Error::InsufficientData {
            way,
            reason: format!(
                "class `{}` has {} images, needs {need} ({shot} shot + {queries_per_class} query)",
                c.name,
                c.images.len()
            ),
        });
    }

    let mut chosen = index::sample(rng, collection.classes.len(), way).into_vec();
    chosen.shuffle(rng);

    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * queries_per_class);
    let mut classes = Vec::with_capacity(way);
    for (label, &ci) in chosen.iter().enumerate() {
        let group = &collection.classes[ci];
        classes.push(group.class_id);
        let picks = index::sample(rng, group.images.len(), need).into_vec();
        for (j, &p) in picks.iter().enumerate() {
            let item = EpisodeItem {
                image: group.images[p].clone(),
                label,
            };
            if j < shot {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    Ok(Episode {
        support,
        query,
        way,
        shot,
        queries_per_class,
        classes,
    })
}
