//! Prompt templates: plain text files with `{{name}}` placeholders.
//!
//! The built-in set is compiled in from `templates/`. A directory holding
//! files with the same names overrides individual templates.

use std::collections::BTreeMap;
use std::path::Path;

use super::AgentError;

macro_rules! builtin {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../../templates/", $name, ".txt")))),*]
    };
}

const BUILTIN: &[(&str, &str)] = builtin![
    "solver_system",
    "solver_user",
    "solver_memory",
    "solver_history",
    "solver_reflection",
    "checker_system",
    "checker_user",
    "reflector_system",
    "reflector_user",
    "archiver_sum_system",
    "archiver_sum_user",
    "archiver_evo_system",
    "archiver_evo_user",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    templates: BTreeMap<String, String>,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptTemplates {
    pub fn builtin() -> Self {
        PromptTemplates {
            templates: BUILTIN
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    /// Built-in templates, with any `<name>.txt` found in `dir` taking precedence.
    pub fn with_overrides(dir: &Path) -> std::io::Result<Self> {
        let mut t = Self::builtin();
        for (name, _) in BUILTIN {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                t.templates
                    .insert(name.to_string(), std::fs::read_to_string(path)?);
            }
        }
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Result<&str, AgentError> {
        self.templates
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| AgentError::Template(format!("no template named `{name}`")))
    }

    /// Fills every placeholder of template `name`. Unknown or unfilled
    /// placeholders are errors; substituted values are never rescanned.
    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> Result<String, AgentError> {
        render_str(self.get(name)?, vars)
            .map_err(|e| AgentError::Template(format!("template `{name}`: {e}")))
    }
}

fn render_str(template: &str, vars: &[(&str, &str)]) -> Result<String, String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .ok_or_else(|| "unterminated placeholder".to_string())?;
        let key = after[..end].trim();
        let value = vars
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| format!("no value for placeholder `{key}`"))?;
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}
