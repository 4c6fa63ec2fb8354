use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RewriteError;

pub const STATEMENT: &str = "{statement}";
pub const REFERENCE_SOLUTION: &str = "{reference_solution}";

pub const BUILTIN_RETELL_NAME: &str = "digest-retell";
pub const BUILTIN_RETELL_VERSION: &str = "1";

const BUILTIN_RETELL_TEXT: &str = "Below is a math problem together with a reference solution.

Problem:
{statement}

Reference solution:
{reference_solution}

Read the reference solution carefully until you understand every step. Then solve the problem again in your own words. Do not copy the reference solution verbatim. Reason step by step, and put your final answer within \\boxed{}.";

pub const DEFAULT_PROBLEM_TEMPLATE: &str =
    "{statement}\nPlease reason step by step, and put your final answer within \\boxed{}.";

/// The prompt shown in the guided stage: the problem plus its reference
/// solution, asking for a re-solve in the model's own words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetellPromptTemplate {
    pub name: String,
    pub version: String,
    pub template: String,
}

impl RetellPromptTemplate {
    pub fn new(
        name: impl Into<String>,
        version: impl Into<String>,
        template: impl Into<String>,
    ) -> Result<Self, RewriteError> {
        let t = RetellPromptTemplate {
            name: name.into(),
            version: version.into(),
            template: template.into(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn builtin() -> Self {
        RetellPromptTemplate {
            name: BUILTIN_RETELL_NAME.into(),
            version: BUILTIN_RETELL_VERSION.into(),
            template: BUILTIN_RETELL_TEXT.into(),
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        (name == BUILTIN_RETELL_NAME).then(Self::builtin)
    }

    /// Loads a UTF-8 template file. Its version is a content hash.
    pub fn from_file(path: &Path) -> Result<Self, RewriteError> {
        let text = fs::read_to_string(path)
            .map_err(|e| RewriteError::Template(format!("cannot read {}: {e}", path.display())))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "template".into());
        let version = format!("sha256:{}", &hex::encode(Sha256::digest(text.as_bytes()))[..16]);
        Self::new(name, version, text)
    }

    pub fn validate(&self) -> Result<(), RewriteError> {
        for placeholder in [STATEMENT, REFERENCE_SOLUTION] {
            let n = self.template.matches(placeholder).count();
            if n != 1 {
                return Err(RewriteError::Template(format!(
                    "template `{}` must contain {placeholder} exactly once (found {n})",
                    self.name
                )));
            }
        }
        Ok(())
    }

    pub fn render(&self, statement: &str, reference_solution: &str) -> String {
        splice(
            &self.template,
            &[(STATEMENT, statement), (REFERENCE_SOLUTION, reference_solution)],
        )
    }
}

/// The bare problem prompt used for self-alignment and stored with every
/// training example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemPromptTemplate {
    pub template: String,
}

impl Default for ProblemPromptTemplate {
    fn default() -> Self {
        ProblemPromptTemplate {
            template: DEFAULT_PROBLEM_TEMPLATE.into(),
        }
    }
}

impl ProblemPromptTemplate {
    pub fn new(template: impl Into<String>) -> Result<Self, RewriteError> {
        let template = template.into();
        let n = template.matches(STATEMENT).count();
        if n != 1 {
            return Err(RewriteError::Template(format!(
                "problem template must contain {STATEMENT} exactly once (found {n})"
            )));
        }
        if template.contains(REFERENCE_SOLUTION) {
            return Err(RewriteError::Template(format!(
                "problem template must not contain {REFERENCE_SOLUTION}"
            )));
        }
        Ok(ProblemPromptTemplate { template })
    }

    pub fn render(&self, statement: &str) -> String {
        splice(&self.template, &[(STATEMENT, statement)])
    }
}

/// Single-pass substitution: placeholders are located in the template only,
/// so substituted text containing placeholder syntax is left alone.
fn splice(template: &str, values: &[(&str, &str)]) -> String {
    let mut hits: Vec<(usize, &str, &str)> = values
        .iter()
        .filter_map(|(ph, v)| template.find(ph).map(|pos| (pos, *ph, *v)))
        .collect();
    hits.sort_by_key(|h| h.0);
    let mut out = String::with_capacity(template.len() + values.iter().map(|v| v.1.len()).sum::<usize>());
    let mut cursor = 0;
    for (pos, ph, value) in hits {
        out.push_str(&template[cursor..pos]);
        out.push_str(value);
        cursor = pos + ph.len();
    }
    out.push_str(&template[cursor..]);
    out
}
