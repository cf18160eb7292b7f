use std::path::Path;

use serde::Deserialize;

use crate::GatewayError;

pub const PLACEHOLDER: &str = "{prompt}";

/// The bundled three-template ensemble.
pub const DEFAULT_TEMPLATES: &str = include_str!("../templates/vqa.toml");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VqaTemplateEnsemble {
    templates: Vec<String>,
}

#[derive(Deserialize)]
struct TemplateFile {
    templates: Vec<String>,
}

impl VqaTemplateEnsemble {
    pub fn new(templates: Vec<String>) -> Result<Self, GatewayError> {
        if templates.is_empty() {
            return Err(GatewayError::Template("no templates".into()));
        }
        for (i, t) in templates.iter().enumerate() {
            let n = t.matches(PLACEHOLDER).count();
            if n != 1 {
                return Err(GatewayError::Template(format!("template {i} has {n} {PLACEHOLDER} placeholders")));
            }
        }
        Ok(Self { templates })
    }

    pub fn from_toml(text: &str) -> Result<Self, GatewayError> {
        let f: TemplateFile = toml::from_str(text).map_err(|e| GatewayError::Template(e.to_string()))?;
        Self::new(f.templates)
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Template(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn instantiate(&self, prompt_text: &str) -> Vec<String> {
        self.templates.iter().map(|t| t.replace(PLACEHOLDER, prompt_text)).collect()
    }
}

impl Default for VqaTemplateEnsemble {
    fn default() -> Self {
        Self::from_toml(DEFAULT_TEMPLATES).expect("bundled templates are valid")
    }
}
