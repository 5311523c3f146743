//! Column serialization into the text fed to embedding providers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{sample_from, sample_values, SamplerConfig};
use crate::table::{Column, ColumnType};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const DEFAULT_REPEAT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    #[default]
    Default,
    Verbose,
    Repeat,
    HeaderOnly,
}

impl Format {
    pub const ALL: [Format; 4] = [Format::Default, Format::Verbose, Format::Repeat, Format::HeaderOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Format::Default => "default",
            Format::Verbose => "verbose",
            Format::Repeat => "repeat",
            Format::HeaderOnly => "header-only",
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "header_only" => Ok(Format::HeaderOnly),
            _ => Format::ALL
                .into_iter()
                .find(|f| f.as_str() == s)
                .ok_or_else(|| Error::Config(format!("unknown serialization format {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SerializationConfig {
    pub format: Format,
    pub repeat_k: usize,
}

impl Default for SerializationConfig {
    fn default() -> Self {
        SerializationConfig {
            format: Format::Default,
            repeat_k: DEFAULT_REPEAT,
        }
    }
}

impl SerializationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeat_k == 0 {
            return Err(Error::Config("repeat count must be at least 1".into()));
        }
        Ok(())
    }
}

/// A column reduced to what serialization and prompting need.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerializedColumn {
    pub name: String,
    pub type_label: ColumnType,
    pub sample: Vec<String>,
}

impl SerializedColumn {
    pub fn from_column(column: &Column, sampler: &SamplerConfig) -> Self {
        SerializedColumn {
            name: column.name.clone(),
            type_label: column.inferred_type,
            sample: sample_values(column, sampler),
        }
    }

    /// Profiles a bare (name, values) pair, e.g. a synthetic training column.
    pub fn from_values(name: &str, values: &[String], sampler: &SamplerConfig) -> Self {
        let column = Column::from_cells(name, values.iter().cloned());
        SerializedColumn {
            name: name.to_string(),
            type_label: column.inferred_type,
            sample: sample_from(column.non_missing(), sampler),
        }
    }

    pub fn render(&self, config: &SerializationConfig) -> String {
        serialize(&self.name, self.type_label.as_str(), &self.sample, config)
    }

    /// `Column: <name>, Sample values: [v1, v2, ...]`, the rendering used in
    /// LLM prompts.
    pub fn prompt_line(&self) -> String {
        format!("Column: {}, Sample values: [{}]", self.name, self.sample.join(", "))
    }
}

fn escape(s: &str) -> String {
    s.replace(SEP, "(SEP)").replace(CLS, "(CLS)")
}

pub fn serialize(name: &str, type_label: &str, sample: &[String], config: &SerializationConfig) -> String {
    let name = escape(name);
    let mut out = String::from(CLS);
    match config.format {
        Format::HeaderOnly => {
            out.push_str(&name);
            return out;
        }
        Format::Default => {
            out.push_str(&name);
            out.push_str(SEP);
            out.push_str(type_label);
        }
        Format::Repeat => {
            for i in 0..config.repeat_k.max(1) {
                if i > 0 {
                    out.push_str(SEP);
                }
                out.push_str(&name);
            }
            out.push_str(SEP);
            out.push_str(type_label);
        }
        Format::Verbose => {
            out.push_str("Column: ");
            out.push_str(&name);
            out.push_str(SEP);
            out.push_str("Type: ");
            out.push_str(type_label);
        }
    }
    for (i, v) in sample.iter().enumerate() {
        out.push_str(SEP);
        if i == 0 && config.format == Format::Verbose {
            out.push_str("Values: ");
        }
        out.push_str(&escape(v));
    }
    out
}
