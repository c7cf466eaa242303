//! Registry of prompt templates with typed slot substitution, plus the
//! parser that pulls updated class definitions out of model output.
//!
//! Templates are data files (one UTF-8 file per id under `templates/`), so
//! prompt variants can be swapped per experiment without rebuilds; the
//! shipped set is embedded as the default registry. Slot syntax is
//! `{name}`; literal braces are escaped as `{{` and `}}`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Serialize;

use crate::dataset::normalize_name;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateId {
    System,
    MultiClassDetect,
    SingleClassDetect,
    DetectWithInstructions,
    InitSummarize,
    RefineContrastive,
    RefineExcludeFp,
    RefineIncludeFn,
    GenerateAlternative,
    DetpoDetect,
    VqaScore,
}

impl TemplateId {
    pub const ALL: [TemplateId; 11] = [
        TemplateId::System,
        TemplateId::MultiClassDetect,
        TemplateId::SingleClassDetect,
        TemplateId::DetectWithInstructions,
        TemplateId::InitSummarize,
        TemplateId::RefineContrastive,
        TemplateId::RefineExcludeFp,
        TemplateId::RefineIncludeFn,
        TemplateId::GenerateAlternative,
        TemplateId::DetpoDetect,
        TemplateId::VqaScore,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TemplateId::System => "system",
            TemplateId::MultiClassDetect => "multi-class-detect",
            TemplateId::SingleClassDetect => "single-class-detect",
            TemplateId::DetectWithInstructions => "detect-with-instructions",
            TemplateId::InitSummarize => "init-summarize",
            TemplateId::RefineContrastive => "refine-contrastive",
            TemplateId::RefineExcludeFp => "refine-exclude-fp",
            TemplateId::RefineIncludeFn => "refine-include-fn",
            TemplateId::GenerateAlternative => "generate-alternative",
            TemplateId::DetpoDetect => "detpo-detect",
            TemplateId::VqaScore => "vqa-score",
        }
    }

    pub fn from_str_id(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::UnknownTemplate(s.to_string()))
    }
}

/// Slots holding annotator instructions; when bound to an empty string the
/// whole clause introducing them is dropped from the rendered prompt
/// rather than rendered empty.
const INSTRUCTION_CLAUSES: [(&str, &str); 2] = [
    (
        "instructions",
        "\n\nUse the following annotator instructions to improve detection accuracy:\n{instructions}",
    ),
    (
        "dataset_instructions",
        "- Follow these annotator instructions to improve detection accuracy:\n\n{dataset_instructions}\n",
    ),
];

#[derive(Debug, Clone)]
pub struct Template {
    pub text: String,
    pub required_slots: BTreeSet<String>,
}

impl Template {
    fn new(text: String) -> Self {
        let required_slots = scan_slots(&text);
        Self {
            text,
            required_slots,
        }
    }
}

fn scan_slots(text: &str) -> BTreeSet<String> {
    let mut slots = BTreeSet::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if i + 1 < bytes.len() && bytes[i + 1] == b'{' => i += 2,
            b'{' => {
                if let Some(end) = text[i + 1..].find('}') {
                    slots.insert(text[i + 1..i + 1 + end].to_string());
                    i += end + 2;
                } else {
                    i += 1;
                }
            }
            b'}' if i + 1 < bytes.len() && bytes[i + 1] == b'}' => i += 2,
            _ => i += 1,
        }
    }
    slots
}

fn substitute(template_id: &str, text: &str, slots: &BTreeMap<String, String>) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if i + 1 < bytes.len() && bytes[i + 1] == b'{' => {
                out.push('{');
                i += 2;
            }
            b'}' if i + 1 < bytes.len() && bytes[i + 1] == b'}' => {
                out.push('}');
                i += 2;
            }
            b'{' => {
                let end = text[i + 1..].find('}').ok_or_else(|| Error::MissingSlot {
                    template: template_id.to_string(),
                    slot: text[i + 1..].to_string(),
                })?;
                let name = &text[i + 1..i + 1 + end];
                let value = slots.get(name).ok_or_else(|| Error::MissingSlot {
                    template: template_id.to_string(),
                    slot: name.to_string(),
                })?;
                out.push_str(value);
                i += end + 2;
            }
            c => {
                out.push(c as char);
                i += 1;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct PromptRegistry {
    templates: BTreeMap<TemplateId, Template>,
}

impl PromptRegistry {
    /// The registry shipped with the crate.
    pub fn builtin() -> Self {
        let mut templates = BTreeMap::new();
        for id in TemplateId::ALL {
            let text: &str = match id {
                TemplateId::System => include_str!("../templates/system.txt"),
                TemplateId::MultiClassDetect => include_str!("../templates/multi-class-detect.txt"),
                TemplateId::SingleClassDetect => include_str!("../templates/single-class-detect.txt"),
                TemplateId::DetectWithInstructions => {
                    include_str!("../templates/detect-with-instructions.txt")
                }
                TemplateId::InitSummarize => include_str!("../templates/init-summarize.txt"),
                TemplateId::RefineContrastive => include_str!("../templates/refine-contrastive.txt"),
                TemplateId::RefineExcludeFp => include_str!("../templates/refine-exclude-fp.txt"),
                TemplateId::RefineIncludeFn => include_str!("../templates/refine-include-fn.txt"),
                TemplateId::GenerateAlternative => {
                    include_str!("../templates/generate-alternative.txt")
                }
                TemplateId::DetpoDetect => include_str!("../templates/detpo-detect.txt"),
                TemplateId::VqaScore => include_str!("../templates/vqa-score.txt"),
            };
            templates.insert(id, Template::new(text.to_string()));
        }
        Self { templates }
    }

    /// Load a template directory (one `<id>.txt` per template id); ids
    /// missing from the directory fall back to the builtin text.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut registry = Self::builtin();
        for id in TemplateId::ALL {
            let path = dir.join(format!("{}.txt", id.as_str()));
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                registry.templates.insert(id, Template::new(text));
            }
        }
        Ok(registry)
    }

    pub fn template(&self, id: TemplateId) -> &Template {
        &self.templates[&id]
    }

    /// Render a template with every required slot bound. Instruction slots
    /// bound to an empty string drop their introducing clause entirely.
    pub fn render(&self, id: TemplateId, slots: &BTreeMap<String, String>) -> Result<String> {
        let template = self
            .templates
            .get(&id)
            .ok_or_else(|| Error::UnknownTemplate(id.as_str().to_string()))?;
        let mut text = template.text.clone();
        for (slot, clause) in INSTRUCTION_CLAUSES {
            if template.required_slots.contains(slot)
                && slots.get(slot).is_some_and(|v| v.trim().is_empty())
            {
                text = text.replace(clause, "");
            }
        }
        substitute(id.as_str(), &text, slots)
    }
}

/// How confidently a definition was recovered from model output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractionQuality {
    /// Parsed from the requested fenced mapping format.
    Exact,
    /// Raw content of the last fenced block.
    FencedBlock,
    /// Trailing paragraph of an unfenced response.
    TrailingParagraph,
}

#[derive(Debug, Clone)]
pub struct ExtractedDefinition {
    pub definition: String,
    pub quality: ExtractionQuality,
}

fn fenced_blocks(text: &str) -> Vec<&str> {
    let mut blocks = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        match after.find("```") {
            Some(end) => {
                blocks.push(&after[..end]);
                rest = &after[end + 3..];
            }
            None => break,
        }
    }
    blocks
}

fn strip_language_tag(block: &str) -> &str {
    let trimmed = block.trim_start();
    for tag in ["python", "json"] {
        if let Some(rest) = trimmed.strip_prefix(tag) {
            if rest.starts_with(|c: char| c.is_whitespace() || c == '{') {
                return rest;
            }
        }
    }
    block
}

fn strip_symmetric_quotes(s: &str) -> &str {
    let s = s.trim();
    for (open, close) in [('\'', '\''), ('"', '"'), ('`', '\''), ('`', '`')] {
        if s.len() >= 2 && s.starts_with(open) && s.ends_with(close) {
            return s[open.len_utf8()..s.len() - close.len_utf8()].trim();
        }
    }
    s
}

/// Parse `{'<class>': <definition>}` out of a fenced block. Lenient about
/// quote style and embedded apostrophes: the value is everything between
/// the key's colon and the final closing brace, with one symmetric outer
/// quote pair stripped.
fn parse_mapping(block: &str, class_name: &str) -> Option<String> {
    let content = strip_language_tag(block).trim();
    let open = content.find('{')?;
    let close = content.rfind('}')?;
    if close <= open {
        return None;
    }
    let inner = &content[open + 1..close];
    let colon = inner.find(':')?;
    let key = strip_symmetric_quotes(&inner[..colon]);
    let value = strip_symmetric_quotes(&inner[colon + 1..]);
    if value.is_empty() {
        return None;
    }
    // Accept a mismatched key only when it is the sole plausible mapping;
    // the caller asked for a specific class, so note-perfect keys win.
    if !key.is_empty() && normalize_name(key) != normalize_name(class_name) && inner.matches(':').count() > 1 {
        return None;
    }
    Some(value.to_string())
}

/// Pull the updated class definition out of a refinement response.
///
/// Preference order: the requested fenced mapping (searched from the last
/// block backwards), then the last fenced block verbatim, then the trailing
/// paragraph. Empty results are an error so the caller can retry.
pub fn extract_definition(text: &str, class_name: &str) -> Result<ExtractedDefinition> {
    let blocks = fenced_blocks(text);
    for block in blocks.iter().rev() {
        if let Some(definition) = parse_mapping(block, class_name) {
            return Ok(ExtractedDefinition {
                definition,
                quality: ExtractionQuality::Exact,
            });
        }
    }
    if let Some(block) = blocks.last() {
        let cleaned = strip_language_tag(block).trim();
        if !cleaned.is_empty() {
            return Ok(ExtractedDefinition {
                definition: cleaned.to_string(),
                quality: ExtractionQuality::FencedBlock,
            });
        }
    }
    let paragraph = text
        .rsplit("\n\n")
        .map(str::trim)
        .find(|p| !p.is_empty())
        .unwrap_or("");
    if paragraph.is_empty() {
        return Err(Error::EmptyDefinition);
    }
    Ok(ExtractedDefinition {
        definition: paragraph.to_string(),
        quality: ExtractionQuality::TrailingParagraph,
    })
}

/// Comma-joined quoted class names for the multi-class {category_prompt}.
pub fn category_prompt(names: &[String]) -> String {
    names
        .iter()
        .map(|n| format!("'{n}'"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// "name: description" lines for the multi-class instruction variant.
pub fn joined_instructions(pairs: &[(String, String)]) -> String {
    pairs
        .iter()
        .filter(|(_, d)| !d.trim().is_empty())
        .map(|(n, d)| format!("{n}: {d}"))
        .collect::<Vec<_>>()
        .join("\n")
}
