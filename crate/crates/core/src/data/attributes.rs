//! Attribute lists per class.
//!
//! One class per line, `class_name | attr1; attr2; ...`. Blank lines and
//! lines starting with `#` are ignored.

use std::path::Path;

use crate::error::{Error, Result};

/// Class name and its attribute strings, in file order.
pub type AttributeMap = Vec<(String, Vec<String>)>;

pub fn parse_attributes(text: &str) -> Result<AttributeMap> {
    let mut out: AttributeMap = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse { line: line_no, msg };
        let (name, rest) = line
            .split_once('|')
            .ok_or_else(|| err("expected `class | attr; attr`".into()))?;
        let name = name.trim();
        if name.is_empty() {
            return Err(err("empty class name".into()));
        }
        if rest.contains('|') {
            return Err(err("more than one `|`".into()));
        }
        if out.iter().any(|(n, _)| n == name) {
            return Err(err(format!("duplicate class `{name}`")));
        }
        let attrs: Vec<String> = rest
            .split(';')
            .map(str::trim)
            .filter(|a| !a.is_empty())
            .map(String::from)
            .collect();
        if attrs.is_empty() {
            return Err(err(format!("class `{name}` has no attributes")));
        }
        out.push((name.to_string(), attrs));
    }
    if out.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: "no classes found".into(),
        });
    }
    Ok(out)
}

pub fn format_attributes(map: &AttributeMap) -> String {
    let mut s = String::new();
    for (name, attrs) in map {
        s.push_str(name);
        s.push_str(" | ");
        s.push_str(&attrs.join("; "));
        s.push('\n');
    }
    s
}

pub fn load_attribute_file(path: impl AsRef<Path>) -> Result<AttributeMap> {
    parse_attributes(&std::fs::read_to_string(path)?)
}

pub fn write_attribute_file(path: impl AsRef<Path>, map: &AttributeMap) -> Result<()> {
    std::fs::write(path, format_attributes(map))?;
    Ok(())
}

/// `"a photo of a <class>, which has <attribute>"` for every attribute.
pub fn composite_prompts(class: &str, attributes: &[String]) -> Vec<String> {
    attributes
        .iter()
        .map(|a| format!("a photo of a {class}, which has {a}"))
        .collect()
}
