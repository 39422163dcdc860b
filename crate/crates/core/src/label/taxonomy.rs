use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Class id as stored in 8-bit mask files.
pub type ClassId = u8;

/// Pixel value that marks unlabeled regions in mask files.
pub const DEFAULT_IGNORE_ID: ClassId = 255;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: ClassId,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<[u8; 3]>,
}

/// Ordered class list with dense ids `0..C` plus an out-of-range ignore id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTaxonomy {
    classes: Vec<ClassInfo>,
    ignore_id: ClassId,
}

const DRIVING_CLASSES: [(&str, [u8; 3]); 19] = [
    ("road", [128, 64, 128]),
    ("sidewalk", [244, 35, 232]),
    ("building", [70, 70, 70]),
    ("wall", [102, 102, 156]),
    ("fence", [190, 153, 153]),
    ("pole", [153, 153, 153]),
    ("traffic light", [250, 170, 30]),
    ("traffic sign", [220, 220, 0]),
    ("vegetation", [107, 142, 35]),
    ("terrain", [152, 251, 152]),
    ("sky", [70, 130, 180]),
    ("person", [220, 20, 60]),
    ("rider", [255, 0, 0]),
    ("car", [0, 0, 142]),
    ("truck", [0, 0, 70]),
    ("bus", [0, 60, 100]),
    ("train", [0, 80, 100]),
    ("motorcycle", [0, 0, 230]),
    ("bicycle", [119, 11, 32]),
];

#[derive(Deserialize)]
struct TaxonomyFile {
    #[serde(default = "default_ignore")]
    ignore_id: ClassId,
    classes: Vec<ClassInfo>,
}

fn default_ignore() -> ClassId {
    DEFAULT_IGNORE_ID
}

impl ClassTaxonomy {
    /// Validates and sorts `classes` by id.
    pub fn new(mut classes: Vec<ClassInfo>, ignore_id: ClassId) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Empty("taxonomy"));
        }
        classes.sort_by_key(|c| c.id);
        let mut names = HashSet::new();
        for (expected, class) in classes.iter().enumerate() {
            if class.id as usize != expected {
                return Err(Error::Config(format!(
                    "class ids must be dense 0..{}; found id {} at position {expected}",
                    classes.len() - 1,
                    class.id
                )));
            }
            if class.name.trim().is_empty() {
                return Err(Error::Config(format!("class {} has an empty name", class.id)));
            }
            if !names.insert(class.name.as_str()) {
                return Err(Error::Config(format!("duplicate class name `{}`", class.name)));
            }
        }
        if (ignore_id as usize) < classes.len() {
            return Err(Error::Config(format!(
                "ignore id {ignore_id} collides with class range 0..{}",
                classes.len() - 1
            )));
        }
        Ok(Self { classes, ignore_id })
    }

    /// The 19-class urban driving taxonomy with its conventional palette, ignore = 255.
    pub fn driving() -> Self {
        let classes = DRIVING_CLASSES
            .iter()
            .enumerate()
            .map(|(i, (name, color))| ClassInfo {
                id: i as ClassId,
                name: (*name).to_string(),
                color: Some(*color),
            })
            .collect();
        Self::new(classes, DEFAULT_IGNORE_ID).expect("built-in taxonomy is valid")
    }

    /// Unnamed classes `class_0..class_{n-1}`; handy for synthetic corpora.
    pub fn numbered(n: usize) -> Result<Self> {
        if n == 0 || n > DEFAULT_IGNORE_ID as usize {
            return Err(Error::arg(format!("class count {n} outside 1..=255")));
        }
        let classes = (0..n)
            .map(|i| ClassInfo {
                id: i as ClassId,
                name: format!("class_{i}"),
                color: None,
            })
            .collect();
        Self::new(classes, DEFAULT_IGNORE_ID)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: TaxonomyFile = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        Self::new(file.classes, file.ignore_id)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("taxonomy serializes")
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn ignore_id(&self) -> ClassId {
        self.ignore_id
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn name(&self, id: ClassId) -> Option<&str> {
        self.classes.get(id as usize).map(|c| c.name.as_str())
    }

    pub fn id_of(&self, name: &str) -> Option<ClassId> {
        self.classes.iter().find(|c| c.name == name).map(|c| c.id)
    }

    pub fn contains(&self, id: ClassId) -> bool {
        (id as usize) < self.classes.len()
    }

    /// Stable palette color; unnamed colors fall back to a hashed hue.
    pub fn color(&self, id: ClassId) -> [u8; 3] {
        match self.classes.get(id as usize).and_then(|c| c.color) {
            Some(c) => c,
            None => {
                let h = (id as u32).wrapping_mul(2_654_435_761);
                [(h >> 8) as u8, (h >> 16) as u8, (h >> 24) as u8]
            }
        }
    }

    /// Hex SHA-256 over the canonical JSON form.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("taxonomy serializes");
        hex::encode(Sha256::digest(&json))
    }
}

impl Default for ClassTaxonomy {
    fn default() -> Self {
        Self::driving()
    }
}
