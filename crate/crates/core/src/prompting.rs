//! Text prompts built from mask content, plus randomized style qualifiers.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{ClassId, ClassTaxonomy};

pub const SCENE_PREFIX: &str = "A city street scene photo";

/// A style token and the phrase appended to the prompt for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleQualifier {
    pub token: String,
    pub template: String,
}

impl StyleQualifier {
    pub fn weather(token: &str) -> Self {
        Self {
            token: token.to_string(),
            template: format!("in {token} weather"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleCatalog {
    qualifiers: Vec<StyleQualifier>,
}

impl StyleCatalog {
    pub fn new(qualifiers: Vec<StyleQualifier>) -> Result<Self> {
        let mut seen = HashSet::new();
        for q in &qualifiers {
            if q.token.trim().is_empty() || q.template.trim().is_empty() {
                return Err(Error::Config("style token and template must be non-empty".into()));
            }
            if !seen.insert(q.token.as_str()) {
                return Err(Error::Config(format!("duplicate style token `{}`", q.token)));
            }
        }
        Ok(Self { qualifiers })
    }

    /// Adverse-weather catalog: foggy, snowy, rainy, overcast, night.
    pub fn adverse_weather() -> Self {
        let mut qualifiers: Vec<_> = ["foggy", "snowy", "rainy", "overcast"]
            .into_iter()
            .map(StyleQualifier::weather)
            .collect();
        qualifiers.push(StyleQualifier {
            token: "night".into(),
            template: "at night".into(),
        });
        Self { qualifiers }
    }

    pub fn qualifiers(&self) -> &[StyleQualifier] {
        &self.qualifiers
    }

    pub fn tokens(&self) -> Vec<&str> {
        self.qualifiers.iter().map(|q| q.token.as_str()).collect()
    }

    pub fn get(&self, token: &str) -> Option<&StyleQualifier> {
        self.qualifiers.iter().find(|q| q.token == token)
    }

    pub fn len(&self) -> usize {
        self.qualifiers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.qualifiers.is_empty()
    }
}

impl Default for StyleCatalog {
    fn default() -> Self {
        Self::adverse_weather()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub scene_prefix: String,
    pub class_names: Vec<String>,
    pub style: Option<StyleQualifier>,
    pub rendered: String,
}

impl PromptSpec {
    pub fn style_token(&self) -> Option<&str> {
        self.style.as_ref().map(|s| s.token.as_str())
    }
}

fn render(prefix: &str, names: &[String], style: Option<&StyleQualifier>) -> String {
    let mut text = prefix.to_string();
    if !names.is_empty() {
        text.push_str(" with ");
        text.push_str(&names.join(", "));
    }
    if let Some(style) = style {
        text.push_str(", ");
        text.push_str(&style.template);
    }
    text
}

fn resolve_names(class_ids: &[ClassId], taxonomy: &ClassTaxonomy) -> Result<Vec<String>> {
    let mut seen = HashSet::new();
    class_ids
        .iter()
        .map(|&id| {
            if !seen.insert(id) {
                return Err(Error::arg(format!("class id {id} listed twice")));
            }
            taxonomy
                .name(id)
                .map(str::to_string)
                .ok_or_else(|| Error::arg(format!("class id {id} not in taxonomy")))
        })
        .collect()
}

/// Renders `"<prefix> with <name_1>, …, <name_k>[, <style phrase>]"`.
///
/// Names appear in the order given; pipeline callers pass `class_set` output,
/// which is ascending by id.
pub fn build_prompt(
    class_ids: &[ClassId],
    taxonomy: &ClassTaxonomy,
    style: Option<&StyleQualifier>,
) -> Result<PromptSpec> {
    if class_ids.is_empty() && style.is_none() {
        return Err(Error::arg(
            "cannot build a prompt from an empty class list without a style qualifier",
        ));
    }
    let class_names = resolve_names(class_ids, taxonomy)?;
    Ok(PromptSpec {
        rendered: render(SCENE_PREFIX, &class_names, style),
        scene_prefix: SCENE_PREFIX.to_string(),
        class_names,
        style: style.cloned(),
    })
}

/// Prompt for one crop of a tiled canvas. A crop holding only ignore pixels and
/// no style falls back to the bare scene prefix instead of failing.
pub fn tile_prompt(
    class_ids: &[ClassId],
    taxonomy: &ClassTaxonomy,
    style: Option<&StyleQualifier>,
) -> Result<PromptSpec> {
    if class_ids.is_empty() && style.is_none() {
        return Ok(PromptSpec {
            scene_prefix: SCENE_PREFIX.to_string(),
            class_names: Vec::new(),
            style: None,
            rendered: SCENE_PREFIX.to_string(),
        });
    }
    build_prompt(class_ids, taxonomy, style)
}

/// With probability `mix_ratio`, a uniformly chosen catalog entry; otherwise `None`.
pub fn sample_style<'a, R: Rng + ?Sized>(
    rng: &mut R,
    mix_ratio: f64,
    catalog: &'a StyleCatalog,
) -> Result<Option<&'a StyleQualifier>> {
    if !(0.0..=1.0).contains(&mix_ratio) {
        return Err(Error::Config(format!("mix ratio {mix_ratio} outside [0, 1]")));
    }
    if catalog.is_empty() {
        if mix_ratio > 0.0 {
            return Err(Error::Config(
                "style catalog is empty but mix ratio is positive".into(),
            ));
        }
        return Ok(None);
    }
    if rng.random_bool(mix_ratio) {
        Ok(catalog.qualifiers.choose(rng))
    } else {
        Ok(None)
    }
}
