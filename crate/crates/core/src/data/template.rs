use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{McqInstance, Tokenizer};
use crate::error::{Error, Result};
use crate::permute::Permutation;

/// Prompt layout: a permutation-independent prefix, one line per option in
/// display order, then trailing text.
///
/// Placeholders: `{question}`, `{context}` and `{choices}` (e.g. "1, 2 or
/// 3") in `prefix` and `suffix`; `{label}` and `{option}` in `option_line`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub prefix: String,
    pub option_line: String,
    #[serde(default)]
    pub suffix: String,
    #[serde(default = "default_labels")]
    pub labels: Vec<String>,
}

fn default_labels() -> Vec<String> {
    (1..=8).map(|d| d.to_string()).collect()
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::instruct()
    }
}

/// Tokenized prompt for one permutation of one instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub prefix_text: String,
    pub suffix_text: String,
    pub prefix_tokens: Vec<u32>,
    pub suffix_tokens: Vec<u32>,
    /// Token id of the label shown at each position.
    pub label_token_ids: Vec<u32>,
    pub permutation: Permutation,
}

impl RenderedPrompt {
    pub fn text(&self) -> String {
        format!("{}{}", self.prefix_text, self.suffix_text)
    }

    pub fn tokens(&self) -> Vec<u32> {
        let mut t = self.prefix_tokens.clone();
        t.extend_from_slice(&self.suffix_tokens);
        t
    }

    pub fn len(&self) -> usize {
        self.prefix_tokens.len() + self.suffix_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn substitute(template: &str, vars: &[(&str, &str)], what: &str) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}').ok_or_else(|| Error::Template(format!("{what}: unclosed placeholder")))?;
        let name = &after[..close];
        let value = vars
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Template(format!("{what}: unknown placeholder {{{name}}}")))?;
        out.push_str(value);
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// "1", "1 or 2", "1, 2 or 3", ...
fn choices_text(labels: &[String]) -> String {
    match labels {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} or {last}", init.join(", ")),
    }
}

impl PromptTemplate {
    /// Instruction, question, options, "Output: option ".
    pub fn instruct() -> Self {
        Self {
            prefix:
                "Instruct: Answer the following question.\nPlease generate only answer choice ({choices})\n{question}\n"
                    .into(),
            option_line: "{label}. {option}\n".into(),
            suffix: "Output: option ".into(),
            labels: default_labels(),
        }
    }

    /// Context-bearing layout with the question repeated after the options.
    pub fn context_repeat() -> Self {
        Self {
            prefix: "Instruct: Answer the following question using the context provided, reason over it.\nPlease generate only answer choice ({choices}) without any explanations\n\n{question}\ncontext: {context}\n\n"
                .into(),
            option_line: "{label}. {option}\n".into(),
            suffix: "{question}\nOutput: option ".into(),
            labels: default_labels(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let t: Self = toml::from_str(text).map_err(|e| Error::Template(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("template serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !self.prefix.contains("{question}") {
            return Err(Error::Template("prefix must contain {question}".into()));
        }
        if !self.option_line.contains("{label}") || !self.option_line.contains("{option}") {
            return Err(Error::Template("option_line needs {label} and {option}".into()));
        }
        let probe = [("question", ""), ("context", ""), ("choices", "")];
        substitute(&self.prefix, &probe, "prefix")?;
        substitute(&self.suffix, &probe, "suffix")?;
        substitute(&self.option_line, &[("label", ""), ("option", "")], "option_line")?;
        Ok(())
    }

    /// Renders `instance` with its options shown in `perm` order.
    pub fn render(&self, tok: &Tokenizer, instance: &McqInstance, perm: &Permutation) -> Result<RenderedPrompt> {
        self.validate()?;
        let n = instance.n();
        if perm.len() != n {
            return Err(Error::Range(format!("permutation of size {} for {} options", perm.len(), n)));
        }
        if n > self.labels.len() {
            return Err(Error::Template(format!("{n} options but only {} labels", self.labels.len())));
        }
        let labels = &self.labels[..n];
        let choices = choices_text(labels);
        let vars = [
            ("question", instance.question.as_str()),
            ("context", instance.context.as_deref().unwrap_or("")),
            ("choices", choices.as_str()),
        ];
        let prefix_text = substitute(&self.prefix, &vars, "prefix")?;
        let mut suffix_text = String::new();
        for (j, label) in labels.iter().enumerate() {
            let option = &instance.options[perm.content_at(j)];
            suffix_text.push_str(&substitute(
                &self.option_line,
                &[("label", label), ("option", option)],
                "option_line",
            )?);
        }
        suffix_text.push_str(&substitute(&self.suffix, &vars, "suffix")?);

        let prefix_tokens = tok.tokenize(&prefix_text);
        let suffix_tokens = tok.tokenize(&suffix_text);
        let whole = tok.tokenize(&format!("{prefix_text}{suffix_text}"));
        if whole.len() != prefix_tokens.len() + suffix_tokens.len() || whole[..prefix_tokens.len()] != prefix_tokens[..]
        {
            return Err(Error::Template(
                "prefix/options boundary splits a token; end the prefix with whitespace or punctuation".into(),
            ));
        }
        let mut label_token_ids = Vec::with_capacity(n);
        for label in labels {
            let id = tok
                .single_token(label)
                .ok_or_else(|| Error::Template(format!("label {label:?} is not a single token")))?;
            if label_token_ids.contains(&id) {
                return Err(Error::Template(format!("duplicate label {label:?}")));
            }
            label_token_ids.push(id);
        }
        Ok(RenderedPrompt {
            prefix_text,
            suffix_text,
            prefix_tokens,
            suffix_tokens,
            label_token_ids,
            permutation: perm.clone(),
        })
    }
}
