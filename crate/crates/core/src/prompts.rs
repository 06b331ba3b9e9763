//! Prompt templates. Defaults ship in `prompts/`; any file of the same name
//! in a configured directory overrides its default.

use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplates {
    pub segmentation: String,
    pub extraction: String,
    pub dedup: String,
    pub merge: String,
    pub compress: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            segmentation: include_str!("../prompts/segmentation.txt").to_string(),
            extraction: include_str!("../prompts/extraction.txt").to_string(),
            dedup: include_str!("../prompts/dedup.txt").to_string(),
            merge: include_str!("../prompts/merge.txt").to_string(),
            compress: include_str!("../prompts/compress.txt").to_string(),
        }
    }
}

impl PromptTemplates {
    pub fn load_dir(dir: &Path) -> std::io::Result<Self> {
        let mut t = Self::default();
        for (name, slot) in [
            ("segmentation.txt", &mut t.segmentation),
            ("extraction.txt", &mut t.extraction),
            ("dedup.txt", &mut t.dedup),
            ("merge.txt", &mut t.merge),
            ("compress.txt", &mut t.compress),
        ] {
            let path = dir.join(name);
            if path.exists() {
                *slot = std::fs::read_to_string(path)?;
            }
        }
        Ok(t)
    }
}

/// Substitutes `{name}` placeholders in one pass; substituted text is never rescanned.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let replaced = after.find('}').and_then(|close| {
            let name = &after[..close];
            vars.iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (v, close))
        });
        match replaced {
            Some((value, close)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Takes the text after the last `FINAL:` marker, or the whole reply.
pub fn final_answer(reply: &str) -> String {
    match reply.rfind("FINAL:") {
        Some(i) => reply[i + "FINAL:".len()..].trim().to_string(),
        None => reply.trim().to_string(),
    }
}

/// Strips a surrounding Markdown code fence, if any.
pub fn strip_code_fence(reply: &str) -> &str {
    let t = reply.trim();
    if let Some(body) = t.strip_prefix("```") {
        let body = body.split_once('\n').map_or("", |(_, b)| b);
        return body.trim_end().strip_suffix("```").unwrap_or(body).trim();
    }
    t
}

/// Removes commas that directly precede a closing bracket or brace,
/// ignoring anything inside string literals.
pub fn strip_trailing_commas(json: &str) -> String {
    let chars: Vec<char> = json.chars().collect();
    let mut out = String::with_capacity(json.len());
    let mut in_string = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_string {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' => {
                in_string = true;
                out.push(c);
            }
            ',' => {
                let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
                if !matches!(next, Some(']') | Some('}')) {
                    out.push(c);
                }
            }
            _ => out.push(c),
        }
    }
    out
}
