// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prompt templates with `{name}` placeholders.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub text: String,
}

impl PromptTemplate {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }

    /// Substitutes every `{name}` placeholder; a placeholder without a value
    /// is an error. `{{` and `}}` produce literal braces.
    pub fn render(&self, vars: &[(&str, &str)]) -> Result<String> {
        let mut out = String::with_capacity(self.text.len());
        let mut rest = self.text.as_str();
        while let Some(pos) = rest.find(['{', '}']) {
            out.push_str(&rest[..pos]);
            let tail = &rest[pos..];
            if tail.starts_with("{{") || tail.starts_with("}}") {
                out.push_str(&tail[..1]);
                rest = &tail[2..];
                continue;
            }
            if tail.starts_with('}') {
                return Err(Error::Config(format!("template {:?}: stray '}}'", self.id)));
            }
            let end = tail
                .find('}')
                .ok_or_else(|| Error::Config(format!("template {:?}: unclosed '{{'", self.id)))?;
            let name = &tail[1..end];
            let value = vars
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Config(format!("template {:?} needs a value for {{{name}}}", self.id)))?;
            out.push_str(value);
            rest = &tail[end + 1..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// The templates used by each interpretation role.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub explain: PromptTemplate,
    pub refine: PromptTemplate,
    pub refine_retry: PromptTemplate,
    pub categorize: PromptTemplate,
    pub categorize_retry: PromptTemplate,
    pub judge: PromptTemplate,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            explain: PromptTemplate::new(
                "explain",
                "You are shown {n_images} images. In each image only the regions where one \
                 internal feature of a vision-language model activates are visible; everything \
                 else is black. Identify the single concept these visible regions have in common \
                 and describe it in one short sentence. If they share no common pattern, answer \
                 exactly: unable to produce explanations",
            ),
            refine: PromptTemplate::new(
                "refine",
                "Condense the following description into a short noun phrase of at most \
                 {max_words} words naming the concept. Answer with the phrase only.\n\
                 Description: {explanation}",
            ),
            refine_retry: PromptTemplate::new(
                "refine_retry",
                "Your answer \"{previous}\" is longer than {max_words} words. Give a noun phrase \
                 of at most {max_words} words for: {explanation}",
            ),
            categorize: PromptTemplate::new(
                "categorize",
                "Which one of these categories best describes \"{label}\": {concepts}? \
                 Answer with the category word only.",
            ),
            categorize_retry: PromptTemplate::new(
                "categorize_retry",
                "\"{previous}\" is not one of the allowed categories. Choose exactly one of \
                 {concepts} for \"{label}\".",
            ),
            judge: PromptTemplate::new(
                "judge",
                "The visible regions of this image are where a model feature activates. Does \
                 the description \"{explanation}\" match those regions? Answer yes or no.",
            ),
        }
    }
}

impl PromptSet {
    /// Built-in templates, each replaced by `<dir>/<id>.txt` when present.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut set = Self::default();
        for t in [
            &mut set.explain,
            &mut set.refine,
            &mut set.refine_retry,
            &mut set.categorize,
            &mut set.categorize_retry,
            &mut set.judge,
        ] {
            let path = dir.join(format!("{}.txt", t.id));
            if path.exists() {
                t.text = std::fs::read_to_string(&path).map_err(Error::at_path(&path))?;
            }
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_substitutes_and_escapes() {
        let t = PromptTemplate::new("t", "a {x} b {{literal}} {y}");
        assert_eq!(t.render(&[("x", "1"), ("y", "2")]).unwrap(), "a 1 b {literal} 2");
    }

    #[test]
    fn missing_value_is_a_config_error() {
        let t = PromptTemplate::new("t", "{x} {z}");
        assert!(matches!(t.render(&[("x", "1")]), Err(Error::Config(_))));
        assert!(PromptTemplate::new("t", "{open").render(&[]).is_err());
    }

    #[test]
    fn defaults_render_with_their_variables() {
        let p = PromptSet::default();
        p.explain.render(&[("n_images", "5")]).unwrap();
        p.refine.render(&[("max_words", "6"), ("explanation", "e")]).unwrap();
        p.refine_retry
            .render(&[("max_words", "6"), ("explanation", "e"), ("previous", "p")])
            .unwrap();
        p.categorize.render(&[("label", "l"), ("concepts", "c")]).unwrap();
        p.categorize_retry
            .render(&[("label", "l"), ("concepts", "c"), ("previous", "p")])
            .unwrap();
        p.judge.render(&[("explanation", "e")]).unwrap();
    }

    #[test]
    fn load_dir_overrides_present_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("judge.txt"), "Is it {explanation}?").unwrap();
        let p = PromptSet::load_dir(dir.path()).unwrap();
        assert_eq!(p.judge.text, "Is it {explanation}?");
        assert_eq!(p.explain, PromptSet::default().explain);
    }
}
