//! Aesthetic-attribute taxonomy: the universe simulated users draw their
//! likes and dislikes from.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Ordered dimension list with the attributes belonging to each dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaxonomyConfig {
    pub dimensions: Vec<(String, Vec<String>)>,
}

impl Default for TaxonomyConfig {
    /// Seven dimensions of aesthetic attributes: medium, palette, skill,
    /// composition, detail, hue, and style.
    fn default() -> Self {
        let dims: Vec<(&str, Vec<&str>)> = vec![
            (
                "Artistic Medium",
                vec![
                    "Oil Painting",
                    "Fresco",
                    "Acrylic Painting",
                    "Gouache",
                    "Stone Sculpture",
                    "Metal Sculpture",
                    "Ceramic Sculpture",
                    "Glass Sculpture",
                    "Weaving",
                    "Quilting",
                    "Embroidery",
                    "3D Modeling",
                    "AI Art",
                    "Virtual Reality",
                    "Etching",
                    "Woodcut",
                    "Silkscreen",
                    "Photography",
                    "Ceramics",
                    "Drawing",
                ],
            ),
            (
                "Color Palettes",
                vec![
                    "Radiant Red",
                    "Vivid Purple",
                    "Lilac",
                    "Blush Pink",
                    "Powder Blue",
                    "Olive Green",
                    "Warm Brown",
                    "Clay Gray",
                    "Charcoal Black",
                    "Deep Indigo",
                    "Aquamarine",
                    "Navy",
                    "Electric Lime",
                    "Atomic Green",
                    "Pumpkin Spice",
                    "Cranberry Red",
                ],
            ),
            (
                "Skill Expression",
                vec![
                    "Dynamic",
                    "Intuitive",
                    "Meticulous",
                    "Gestural",
                    "Bold",
                    "Spontaneous",
                    "Polished",
                    "Raw",
                    "Inventive",
                    "Lyrical",
                    "Controlled",
                    "Experimental",
                    "Graceful",
                    "Powerful",
                    "Free-flowing",
                    "Structured",
                ],
            ),
            (
                "Compositional Strategy",
                vec![
                    "Rhythmic Patterns",
                    "Centralized Forms",
                    "Decentralized Layouts",
                    "Foreground-Background Contrast",
                    "Shallow Depth",
                    "Extended Depth",
                    "Open Areas",
                    "Enclosed Zones",
                    "Figure-Ground Interplay",
                    "Balanced Arrangement",
                    "Unbalanced Arrangement",
                    "Fragmented Structures",
                    "Compressed Structures",
                    "Grid Organization",
                ],
            ),
            (
                "Detail Treatment",
                vec![
                    "Intricate",
                    "Simplified",
                    "Vivid",
                    "Subtle",
                    "Fine",
                    "Elaborate",
                    "Rough",
                    "Ethereal",
                    "Ambiguous",
                    "Textured",
                    "Realistic",
                    "Expressive",
                    "Minimalistic",
                    "Muted",
                ],
            ),
            (
                "Hues",
                vec![
                    "Red", "Scarlet", "Magenta", "Teal", "Slate", "Indigo", "Gold", "Copper",
                    "Yellow", "Emerald", "Azure", "Turquoise", "Burgundy", "Cerulean", "Crimson",
                ],
            ),
            (
                "Art Styles",
                vec![
                    "Baroque Art",
                    "Graffiti",
                    "Impressionism",
                    "Ukiyo-e",
                    "Surrealism",
                    "Minimalism",
                    "Romanticism",
                    "Byzantine Art",
                    "Digital Art",
                    "Cubism",
                    "Mannerism",
                    "Conceptual Art",
                    "Renaissance Art",
                    "Futurism",
                    "Street Art",
                    "Symbolism",
                    "Art Nouveau",
                    "Queer Art",
                    "Contemporary Abstraction",
                ],
            ),
        ];
        TaxonomyConfig {
            dimensions: dims
                .into_iter()
                .map(|(d, attrs)| {
                    (
                        d.to_string(),
                        attrs.into_iter().map(|a| a.to_string()).collect(),
                    )
                })
                .collect(),
        }
    }
}

/// Validated attribute taxonomy. Attribute identifiers are globally unique;
/// `all_attributes` fixes a stable global ordering (dimension order, then
/// declaration order) that the rest of the crate indexes into.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributeTaxonomy {
    pub dimensions: Vec<String>,
    pub attributes_by_dimension: BTreeMap<String, Vec<String>>,
    all_attributes: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl AttributeTaxonomy {
    pub fn all_attributes(&self) -> &[String] {
        &self.all_attributes
    }

    pub fn len(&self) -> usize {
        self.all_attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.all_attributes.is_empty()
    }

    /// Global index of an attribute identifier, if present.
    pub fn attribute_index(&self, attr: &str) -> Option<usize> {
        if self.index.is_empty() {
            // deserialized taxonomies arrive without the cached index
            self.all_attributes.iter().position(|a| a == attr)
        } else {
            self.index.get(attr).copied()
        }
    }

    pub fn contains(&self, attr: &str) -> bool {
        self.attribute_index(attr).is_some()
    }
}

/// Validate a taxonomy config: unique dimension names, >= 2 attributes per
/// dimension, and globally unique attribute identifiers. Deterministic for a
/// given config.
pub fn build_taxonomy(config: &TaxonomyConfig) -> Result<AttributeTaxonomy> {
    if config.dimensions.is_empty() {
        return Err(Error::validation("taxonomy has no dimensions"));
    }
    let mut dims = Vec::new();
    let mut by_dim = BTreeMap::new();
    let mut all = Vec::new();
    let mut index = BTreeMap::new();
    for (dim, attrs) in &config.dimensions {
        if by_dim.contains_key(dim) {
            return Err(Error::validation(format!("duplicate dimension '{dim}'")));
        }
        if attrs.len() < 2 {
            return Err(Error::validation(format!(
                "dimension '{dim}' has {} attribute(s); every dimension needs at least 2",
                attrs.len()
            )));
        }
        for attr in attrs {
            if index.contains_key(attr) {
                return Err(Error::validation(format!(
                    "duplicate attribute identifier '{attr}'"
                )));
            }
            index.insert(attr.clone(), all.len());
            all.push(attr.clone());
        }
        dims.push(dim.clone());
        by_dim.insert(dim.clone(), attrs.clone());
    }
    Ok(AttributeTaxonomy {
        dimensions: dims,
        attributes_by_dimension: by_dim,
        all_attributes: all,
        index,
    })
}
