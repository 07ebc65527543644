//! Plain-text `key = value` configuration files with optional `[section]`
//! headers. Keys before any header live in the unnamed root section.
//! `#` starts a comment; blank lines are ignored. Section order and key
//! order within a section are preserved so resolved configs can be written
//! back verbatim.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub entries: Vec<(String, String)>,
}

impl Section {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.require(key)?
            .parse()
            .map_err(|e| Error::InvalidConfig(format!("key `{key}`: {e}")))
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            Some(_) => self.f64(key),
            None => Ok(default),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            Some(v) => v
                .parse()
                .map_err(|e| Error::InvalidConfig(format!("key `{key}`: {e}"))),
            None => Ok(default),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            Some(v) => v
                .parse()
                .map_err(|e| Error::InvalidConfig(format!("key `{key}`: {e}"))),
            None => Ok(default),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(v) => Err(Error::InvalidConfig(format!(
                "key `{key}`: expected true/false, got `{v}`"
            ))),
            None => Ok(default),
        }
    }

    pub fn str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.get(key).unwrap_or(default)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::InvalidConfig(format!("missing key `{key}`")))
    }

    /// Space- or comma-separated list of floats.
    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        self.require(key)?
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| Error::InvalidConfig(format!("key `{key}`: {e}")))
            })
            .collect()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        if let Some(entry) = self.entries.iter_mut().find(|(k, _)| k == key) {
            entry.1 = value;
        } else {
            self.entries.push((key.to_string(), value));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvFile {
    pub sections: Vec<Section>,
    pub source: Option<PathBuf>,
}

impl KvFile {
    pub fn new() -> Self {
        KvFile {
            sections: vec![Section {
                name: String::new(),
                entries: Vec::new(),
            }],
            source: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut kv = Self::parse(&text, path)?;
        kv.source = Some(path.to_path_buf());
        Ok(kv)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut sections = vec![Section {
            name: String::new(),
            entries: Vec::new(),
        }];
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    msg: "unterminated section header".into(),
                })?;
                sections.push(Section {
                    name: name.trim().to_string(),
                    entries: Vec::new(),
                });
            } else if let Some((k, v)) = line.split_once('=') {
                sections
                    .last_mut()
                    .unwrap()
                    .entries
                    .push((k.trim().to_string(), v.trim().to_string()));
            } else {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    msg: format!("expected `key = value`, got `{line}`"),
                });
            }
        }
        Ok(KvFile {
            sections,
            source: None,
        })
    }

    pub fn root(&self) -> &Section {
        &self.sections[0]
    }

    pub fn root_mut(&mut self) -> &mut Section {
        &mut self.sections[0]
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    /// Sections with a nonempty name, in file order.
    pub fn named_sections(&self) -> impl Iterator<Item = &Section> {
        self.sections.iter().filter(|s| !s.name.is_empty())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for section in &self.sections {
            if !section.name.is_empty() {
                let _ = writeln!(out, "[{}]", section.name);
            }
            for (k, v) in &section.entries {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }
}

impl Default for KvFile {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let text = "a = 1\n# comment\n[plant]\nmass = 15000 # kg\nname = truck\n";
        let kv = KvFile::parse(text, Path::new("test")).unwrap();
        assert_eq!(kv.root().f64("a").unwrap(), 1.0);
        let plant = kv.section("plant").unwrap();
        assert_eq!(plant.f64("mass").unwrap(), 15000.0);
        assert_eq!(plant.get("name"), Some("truck"));
    }

    #[test]
    fn rejects_malformed_line() {
        let err = KvFile::parse("not a kv line", Path::new("bad.cfg")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn render_round_trips() {
        let text = "a = 1\n[s]\nb = two\n";
        let kv = KvFile::parse(text, Path::new("t")).unwrap();
        assert_eq!(kv.render(), text);
    }

    #[test]
    fn missing_key_is_an_error() {
        let kv = KvFile::parse("", Path::new("t")).unwrap();
        assert!(kv.root().require("absent").is_err());
    }
}
