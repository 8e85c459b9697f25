//! Panoptic label maps and category tables.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest id representable in either half of a packed pixel label.
pub const MAX_ID: u32 = 0xFFFF;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Category {
    pub id: u32,
    pub name: String,
    pub isthing: bool,
}

/// Ordered category list. The position of a category in the list is its
/// channel index in semantic logits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryTable {
    pub categories: Vec<Category>,
    pub void_id: u32,
}

const CITYSCAPES_STUFF: [&str; 11] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "vegetation",
    "terrain",
    "sky",
];
const CITYSCAPES_THINGS: [&str; 8] = [
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
];

impl CategoryTable {
    pub fn new(categories: Vec<Category>, void_id: u32) -> Result<Self> {
        let t = CategoryTable {
            categories,
            void_id,
        };
        t.validate()?;
        Ok(t)
    }

    /// 11 stuff and 8 thing classes with Cityscapes names; ids 0..19, void 255.
    pub fn cityscapes() -> Self {
        let categories = CITYSCAPES_STUFF
            .iter()
            .map(|n| (n, false))
            .chain(CITYSCAPES_THINGS.iter().map(|n| (n, true)))
            .enumerate()
            .map(|(i, (name, isthing))| Category {
                id: i as u32,
                name: name.to_string(),
                isthing,
            })
            .collect();
        CategoryTable {
            categories,
            void_id: 255,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.void_id > MAX_ID {
            return Err(Error::config("void_id", format!("{} exceeds {MAX_ID}", self.void_id)));
        }
        let mut seen = HashSet::new();
        for c in &self.categories {
            if c.id > MAX_ID {
                return Err(Error::config("categories.id", format!("{} exceeds {MAX_ID}", c.id)));
            }
            if c.id == self.void_id {
                return Err(Error::config("categories.id", format!("{} collides with void_id", c.id)));
            }
            if !seen.insert(c.id) {
                return Err(Error::config("categories.id", format!("duplicate id {}", c.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Category> {
        self.categories.get(index)
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.categories.iter().position(|c| c.id == id)
    }

    pub fn is_thing_id(&self, id: u32) -> bool {
        self.categories.iter().any(|c| c.id == id && c.isthing)
    }

    /// Channel indices of stuff classes, in table order.
    pub fn stuff_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.categories[i].isthing).collect()
    }

    /// Channel indices of thing classes, in table order.
    pub fn thing_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.categories[i].isthing).collect()
    }
}

/// Packs a pixel label as `semantic_id * 65536 + instance_id`.
#[inline]
pub fn pack(semantic_id: u32, instance_id: u32) -> u32 {
    (semantic_id << 16) | instance_id
}

#[inline]
pub fn unpack(id: u32) -> (u32, u32) {
    (id >> 16, id & 0xFFFF)
}

/// Per-pixel (semantic id, instance id) labels. Stuff pixels carry instance 0;
/// void pixels carry the table's `void_id` and instance 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanopticMap {
    height: usize,
    width: usize,
    ids: Vec<u32>,
    categories: CategoryTable,
}

impl PanopticMap {
    /// An all-void map.
    pub fn new(height: usize, width: usize, categories: CategoryTable) -> Self {
        let void = pack(categories.void_id, 0);
        PanopticMap {
            height,
            width,
            ids: vec![void; height * width],
            categories,
        }
    }

    pub fn from_ids(height: usize, width: usize, ids: Vec<u32>, categories: CategoryTable) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::shape(format!(
                "{} labels for a {height}x{width} map",
                ids.len()
            )));
        }
        Ok(PanopticMap {
            height,
            width,
            ids,
            categories,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn categories(&self) -> &CategoryTable {
        &self.categories
    }

    pub fn void_id(&self) -> u32 {
        self.categories.void_id
    }

    /// `(semantic_id, instance_id)` at pixel `(y, x)`.
    pub fn label(&self, y: usize, x: usize) -> (u32, u32) {
        unpack(self.ids[y * self.width + x])
    }

    pub fn set(&mut self, y: usize, x: usize, semantic_id: u32, instance_id: u32) {
        self.ids[y * self.width + x] = pack(semantic_id, instance_id);
    }

    pub fn set_index(&mut self, i: usize, semantic_id: u32, instance_id: u32) {
        self.ids[i] = pack(semantic_id, instance_id);
    }

    pub fn is_void_index(&self, i: usize) -> bool {
        unpack(self.ids[i]).0 == self.categories.void_id
    }

    /// Semantic ids only, row-major.
    pub fn semantic(&self) -> Vec<u32> {
        self.ids.iter().map(|&id| unpack(id).0).collect()
    }

    /// Checks extents and that every label is void or a known category.
    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.height * self.width {
            return Err(Error::shape("label count does not match extents"));
        }
        self.categories.validate()?;
        for (i, &id) in self.ids.iter().enumerate() {
            let (sem, inst) = unpack(id);
            if sem == self.categories.void_id {
                continue;
            }
            match self.categories.index_of(sem) {
                None => {
                    return Err(Error::invalid(format!(
                        "pixel {i} has unknown category id {sem}"
                    )))
                }
                Some(k) if !self.categories.categories[k].isthing && inst != 0 => {
                    return Err(Error::invalid(format!(
                        "pixel {i}: stuff category {sem} with instance id {inst}"
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}
