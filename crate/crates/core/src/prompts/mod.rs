//! Prompt template registry.
//!
//! Templates turn a raw datum (a review, an interaction history, ...) into an
//! `(input, target)` text pair. Each template belongs to one of five task
//! families and carries a `family-index` id such as `2-13`. Placeholders use
//! single braces (`{user}`); doubled braces (`{{`, `}}`) escape a literal
//! brace. A split policy divides a registry into templates used for training
//! and templates held out for zero-shot evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Format tag expected at the top of a registry file.
pub const REGISTRY_FORMAT: &str = "prompt-registry/v1";

const DEFAULT_REGISTRY_TOML: &str = include_str!("default_registry.toml");

/// Default separator used when rendering list-valued fields.
pub const DEFAULT_LIST_SEPARATOR: &str = ", ";

/// Errors raised while loading, validating, or rendering prompt templates.
#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("failed to read registry file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse registry file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("unsupported registry format tag {found:?} (expected {REGISTRY_FORMAT:?})")]
    Version { found: String },
    #[error("registry contains no templates")]
    EmptyRegistry,
    #[error("duplicate template id {0}")]
    DuplicateId(PromptId),
    #[error("malformed template id {id:?}: {reason}")]
    MalformedId { id: String, reason: String },
    #[error("template {id} declares family {family:?} but its id implies {implied:?}")]
    FamilyMismatch {
        id: PromptId,
        family: Family,
        implied: Family,
    },
    #[error("unknown family name {0:?}")]
    UnknownFamily(String),
    #[error("template {id} has category {category}, expected 1..={max} for family {family:?}")]
    BadCategory {
        id: PromptId,
        category: u32,
        family: Family,
        max: u32,
    },
    #[error("template {id} is malformed: {reason}")]
    BadTemplate { id: PromptId, reason: String },
    #[error(
        "template {id}: declared fields do not match placeholders \
         (missing from declaration: {missing:?}, declared but unused: {extra:?})"
    )]
    FieldsMismatch {
        id: PromptId,
        missing: Vec<String>,
        extra: Vec<String>,
    },
    #[error("no template with id {0} in registry")]
    UnknownTemplate(PromptId),
    #[error("template {template}: no binding supplied for field {field:?}")]
    MissingBinding { template: PromptId, field: String },
    #[error("template {template}: binding {field:?} does not appear in the template")]
    UnusedBinding { template: PromptId, field: String },
    #[error("template {template}: placeholder {field:?} survived substitution (internal error)")]
    UnreplacedPlaceholder { template: PromptId, field: String },
    #[error("split policy names unknown template id {0}")]
    UnknownPretrainId(PromptId),
    #[error("split policy must keep at least one pretrain template")]
    EmptyPretrainSet,
}

/// The five task families a template can belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Rating,
    Sequential,
    Explanation,
    Review,
    Direct,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Rating,
        Family::Sequential,
        Family::Explanation,
        Family::Review,
        Family::Direct,
    ];

    /// The digit used as the first half of template ids in this family.
    pub fn digit(self) -> u8 {
        match self {
            Family::Rating => 1,
            Family::Sequential => 2,
            Family::Explanation => 3,
            Family::Review => 4,
            Family::Direct => 5,
        }
    }

    pub fn from_digit(d: u8) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.digit() == d)
    }

    /// Number of prompt categories defined within this family.
    pub fn category_count(self) -> u32 {
        match self {
            Family::Rating | Family::Sequential => 3,
            Family::Explanation | Family::Review | Family::Direct => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Rating => "rating",
            Family::Sequential => "sequential",
            Family::Explanation => "explanation",
            Family::Review => "review",
            Family::Direct => "direct",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| PromptError::UnknownFamily(s.to_string()))
    }
}

/// Template identifier of the form `family_digit-index`, e.g. `2-13`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PromptId {
    pub family: u8,
    pub index: u32,
}

impl PromptId {
    pub fn new(family: Family, index: u32) -> PromptId {
        PromptId {
            family: family.digit(),
            index,
        }
    }

    pub fn family_enum(self) -> Option<Family> {
        Family::from_digit(self.family)
    }
}

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.family, self.index)
    }
}

impl FromStr for PromptId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let malformed = |reason: &str| PromptError::MalformedId {
            id: s.to_string(),
            reason: reason.to_string(),
        };
        let (fam, idx) = s
            .split_once('-')
            .ok_or_else(|| malformed("expected `family-index`"))?;
        let family: u8 = fam
            .parse()
            .map_err(|_| malformed("family half is not a digit"))?;
        if Family::from_digit(family).is_none() {
            return Err(malformed("family digit out of range 1..=5"));
        }
        let index: u32 = idx
            .parse()
            .map_err(|_| malformed("index half is not a number"))?;
        if index == 0 {
            return Err(malformed("index must be >= 1"));
        }
        Ok(PromptId { family, index })
    }
}

impl Serialize for PromptId {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PromptId {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One parsed chunk of a template string.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Field(String),
}

fn parse_segments(template: &str) -> Result<Vec<Segment>, String> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut chars = template.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' => {
                if chars.peek() == Some(&'{') {
                    chars.next();
                    literal.push('{');
                    continue;
                }
                let mut name = String::new();
                loop {
                    match chars.next() {
                        Some('}') => break,
                        Some(ch) if ch.is_ascii_alphanumeric() || ch == '_' => name.push(ch),
                        Some(ch) => {
                            return Err(format!("invalid character {ch:?} inside placeholder"))
                        }
                        None => return Err("unterminated placeholder".to_string()),
                    }
                }
                let starts_ok = name
                    .chars()
                    .next()
                    .is_some_and(|c| c.is_ascii_alphabetic() || c == '_');
                if !starts_ok {
                    return Err(format!("invalid placeholder name {name:?}"));
                }
                if !literal.is_empty() {
                    segments.push(Segment::Literal(std::mem::take(&mut literal)));
                }
                segments.push(Segment::Field(name));
            }
            '}' => {
                if chars.peek() == Some(&'}') {
                    chars.next();
                    literal.push('}');
                } else {
                    return Err("unmatched '}' (use '}}' for a literal brace)".to_string());
                }
            }
            _ => literal.push(c),
        }
    }
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    Ok(segments)
}

/// A single prompt template: id, family, category, and the input/target
/// template strings.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub id: PromptId,
    pub family: Family,
    pub category: u32,
    pub input_template: String,
    pub target_template: String,
    /// Every placeholder name appearing in either template string.
    pub required_fields: BTreeSet<String>,
    input_segments: Vec<Segment>,
    target_segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn new(
        id: PromptId,
        family: Family,
        category: u32,
        input_template: &str,
        target_template: &str,
    ) -> Result<PromptTemplate, PromptError> {
        let implied = id
            .family_enum()
            .expect("PromptId construction validates the digit");
        if implied != family {
            return Err(PromptError::FamilyMismatch {
                id,
                family,
                implied,
            });
        }
        if category == 0 || category > family.category_count() {
            return Err(PromptError::BadCategory {
                id,
                category,
                family,
                max: family.category_count(),
            });
        }
        let bad = |reason: String| PromptError::BadTemplate { id, reason };
        let input_segments = parse_segments(input_template).map_err(bad)?;
        let bad = |reason: String| PromptError::BadTemplate { id, reason };
        let target_segments = parse_segments(target_template).map_err(bad)?;
        let mut required_fields = BTreeSet::new();
        for seg in input_segments.iter().chain(&target_segments) {
            if let Segment::Field(name) = seg {
                required_fields.insert(name.clone());
            }
        }
        Ok(PromptTemplate {
            id,
            family,
            category,
            input_template: input_template.to_string(),
            target_template: target_template.to_string(),
            required_fields,
            input_segments,
            target_segments,
        })
    }
}

/// A value bound to a placeholder: plain text, or a list joined by an
/// explicit separator at render time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FieldValue {
    Text(String),
    List { items: Vec<String>, sep: String },
}

impl FieldValue {
    pub fn text(value: impl Into<String>) -> FieldValue {
        FieldValue::Text(value.into())
    }

    /// List value joined with the default `", "` separator.
    pub fn list(items: Vec<String>) -> FieldValue {
        FieldValue::List {
            items,
            sep: DEFAULT_LIST_SEPARATOR.to_string(),
        }
    }

    pub fn list_with_sep(items: Vec<String>, sep: impl Into<String>) -> FieldValue {
        FieldValue::List {
            items,
            sep: sep.into(),
        }
    }

    fn rendered(&self) -> String {
        match self {
            FieldValue::Text(t) => t.clone(),
            FieldValue::List { items, sep } => items.join(sep),
        }
    }
}

/// Field-name → value map consumed by [`render`].
#[derive(Debug, Clone, Default)]
pub struct FieldBindings {
    values: BTreeMap<String, FieldValue>,
}

impl FieldBindings {
    pub fn new() -> FieldBindings {
        FieldBindings::default()
    }

    pub fn set(&mut self, field: impl Into<String>, value: FieldValue) -> &mut Self {
        self.values.insert(field.into(), value);
        self
    }

    pub fn set_text(&mut self, field: impl Into<String>, value: impl Into<String>) -> &mut Self {
        self.set(field, FieldValue::text(value))
    }

    pub fn get(&self, field: &str) -> Option<&FieldValue> {
        self.values.get(field)
    }

    pub fn fields(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    /// Restrict a larger binding map to exactly the fields a template needs.
    ///
    /// Builders typically assemble one map per datum and carve out the slice
    /// each template requires; a field the template needs but the map lacks
    /// is reported as a missing binding.
    pub fn subset_for(&self, template: &PromptTemplate) -> Result<FieldBindings, PromptError> {
        let mut out = FieldBindings::new();
        for field in &template.required_fields {
            let value = self
                .values
                .get(field)
                .ok_or_else(|| PromptError::MissingBinding {
                    template: template.id,
                    field: field.clone(),
                })?;
            out.values.insert(field.clone(), value.clone());
        }
        Ok(out)
    }
}

/// An input/target text pair produced by rendering one template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPair {
    pub input: String,
    pub target: String,
}

/// Substitute bindings into a template's input and target strings.
///
/// Binding keys must cover the template's required fields exactly: a missing
/// field or an extra binding is an error, which keeps builders honest about
/// which fields each template actually consumes.
pub fn render(
    template: &PromptTemplate,
    bindings: &FieldBindings,
) -> Result<RenderedPair, PromptError> {
    for field in bindings.values.keys() {
        if !template.required_fields.contains(field) {
            return Err(PromptError::UnusedBinding {
                template: template.id,
                field: field.clone(),
            });
        }
    }
    let input = render_segments(&template.input_segments, template, bindings)?;
    let target = render_segments(&template.target_segments, template, bindings)?;
    Ok(RenderedPair { input, target })
}

fn render_segments(
    segments: &[Segment],
    template: &PromptTemplate,
    bindings: &FieldBindings,
) -> Result<String, PromptError> {
    let mut out = String::new();
    for seg in segments {
        match seg {
            Segment::Literal(text) => out.push_str(text),
            Segment::Field(name) => match bindings.get(name) {
                Some(value) => out.push_str(&value.rendered()),
                None => {
                    return Err(PromptError::MissingBinding {
                        template: template.id,
                        field: name.clone(),
                    })
                }
            },
        }
    }
    // Defensive: substitution is structural, so a surviving placeholder for a
    // required field means the segment parse and this renderer disagree.
    for field in &template.required_fields {
        let needle = format!("{{{field}}}");
        let escaped_in_source = template.input_template.contains("{{")
            || template.target_template.contains("{{");
        if !escaped_in_source && out.contains(&needle) {
            return Err(PromptError::UnreplacedPlaceholder {
                template: template.id,
                field: field.clone(),
            });
        }
    }
    Ok(out)
}

/// How a registry is divided into pretrain templates and held-out templates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPolicy {
    /// Hold out the highest-index template of every family (the default).
    LastPerFamily,
    /// Use exactly these ids for pretraining; everything else is held out.
    ExplicitPretrain(Vec<PromptId>),
}

/// Disjoint pretrain / zero-shot id sets covering a whole registry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistrySplit {
    pub pretrain_ids: BTreeSet<PromptId>,
    pub zeroshot_ids: BTreeSet<PromptId>,
}

impl RegistrySplit {
    pub fn is_pretrain(&self, id: PromptId) -> bool {
        self.pretrain_ids.contains(&id)
    }

    pub fn is_zeroshot(&self, id: PromptId) -> bool {
        self.zeroshot_ids.contains(&id)
    }
}

/// An ordered, validated collection of prompt templates.
#[derive(Debug, Clone)]
pub struct Registry {
    templates: Vec<PromptTemplate>,
    by_id: BTreeMap<PromptId, usize>,
}

impl Registry {
    /// Build a registry from templates, checking id uniqueness.
    pub fn from_templates(templates: Vec<PromptTemplate>) -> Result<Registry, PromptError> {
        if templates.is_empty() {
            return Err(PromptError::EmptyRegistry);
        }
        let mut by_id = BTreeMap::new();
        for (i, t) in templates.iter().enumerate() {
            if by_id.insert(t.id, i).is_some() {
                return Err(PromptError::DuplicateId(t.id));
            }
        }
        Ok(Registry { templates, by_id })
    }

    /// The built-in default registry (47 templates across five families).
    pub fn builtin() -> Registry {
        Registry::parse_toml(DEFAULT_REGISTRY_TOML)
            .expect("built-in registry must parse; checked by tests")
    }

    /// Load a registry from a TOML file.
    pub fn load(path: &Path) -> Result<Registry, PromptError> {
        let text = std::fs::read_to_string(path)?;
        Registry::parse_toml(&text)
    }

    /// Parse a registry from TOML text.
    pub fn parse_toml(text: &str) -> Result<Registry, PromptError> {
        let file: RegistryFile = toml::from_str(text)?;
        if file.format != REGISTRY_FORMAT {
            return Err(PromptError::Version { found: file.format });
        }
        let mut templates = Vec::with_capacity(file.template.len());
        for record in file.template {
            let id: PromptId = record.id.parse()?;
            let family: Family = record.family.parse()?;
            let template = PromptTemplate::new(
                id,
                family,
                record.category,
                &record.input,
                &record.target,
            )?;
            if let Some(declared) = record.fields {
                let declared: BTreeSet<String> = declared.into_iter().collect();
                if declared != template.required_fields {
                    let missing: Vec<String> = template
                        .required_fields
                        .difference(&declared)
                        .cloned()
                        .collect();
                    let extra: Vec<String> =
                        declared.difference(&template.required_fields).cloned().collect();
                    return Err(PromptError::FieldsMismatch { id, missing, extra });
                }
            }
            templates.push(template);
        }
        Registry::from_templates(templates)
    }

    /// Serialize back to the TOML file format.
    pub fn to_toml_string(&self) -> String {
        let file = RegistryFile {
            format: REGISTRY_FORMAT.to_string(),
            template: self
                .templates
                .iter()
                .map(|t| TemplateRecord {
                    id: t.id.to_string(),
                    family: t.family.name().to_string(),
                    category: t.category,
                    input: t.input_template.clone(),
                    target: t.target_template.clone(),
                    fields: Some(t.required_fields.iter().cloned().collect()),
                })
                .collect(),
        };
        toml::to_string_pretty(&file).expect("registry serialization cannot fail")
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn templates(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.iter()
    }

    pub fn get(&self, id: PromptId) -> Result<&PromptTemplate, PromptError> {
        self.by_id
            .get(&id)
            .map(|&i| &self.templates[i])
            .ok_or(PromptError::UnknownTemplate(id))
    }

    pub fn contains(&self, id: PromptId) -> bool {
        self.by_id.contains_key(&id)
    }

    /// Families that have at least one template, in family order.
    pub fn families(&self) -> Vec<Family> {
        Family::ALL
            .into_iter()
            .filter(|f| self.templates.iter().any(|t| t.family == *f))
            .collect()
    }

    /// Templates of one family, ordered by index.
    pub fn family_templates(&self, family: Family) -> Vec<&PromptTemplate> {
        let mut out: Vec<&PromptTemplate> = self
            .templates
            .iter()
            .filter(|t| t.family == family)
            .collect();
        out.sort_by_key(|t| t.id.index);
        out
    }

    /// The highest-index template id of a family, if the family is present.
    pub fn last_id_in_family(&self, family: Family) -> Option<PromptId> {
        self.family_templates(family).last().map(|t| t.id)
    }

    /// Divide the registry into pretrain and zero-shot id sets.
    pub fn split_for_pretrain(&self, policy: &SplitPolicy) -> Result<RegistrySplit, PromptError> {
        let all: BTreeSet<PromptId> = self.by_id.keys().copied().collect();
        let (pretrain_ids, zeroshot_ids) = match policy {
            SplitPolicy::LastPerFamily => {
                let zeroshot: BTreeSet<PromptId> = self
                    .families()
                    .into_iter()
                    .filter_map(|f| self.last_id_in_family(f))
                    .collect();
                let pretrain: BTreeSet<PromptId> =
                    all.difference(&zeroshot).copied().collect();
                (pretrain, zeroshot)
            }
            SplitPolicy::ExplicitPretrain(ids) => {
                let mut pretrain = BTreeSet::new();
                for id in ids {
                    if !all.contains(id) {
                        return Err(PromptError::UnknownPretrainId(*id));
                    }
                    pretrain.insert(*id);
                }
                let zeroshot: BTreeSet<PromptId> =
                    all.difference(&pretrain).copied().collect();
                (pretrain, zeroshot)
            }
        };
        if pretrain_ids.is_empty() {
            return Err(PromptError::EmptyPretrainSet);
        }
        debug_assert!(pretrain_ids.is_disjoint(&zeroshot_ids));
        debug_assert_eq!(
            pretrain_ids.union(&zeroshot_ids).count(),
            self.templates.len()
        );
        Ok(RegistrySplit {
            pretrain_ids,
            zeroshot_ids,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RegistryFile {
    format: String,
    template: Vec<TemplateRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TemplateRecord {
    id: String,
    family: String,
    category: u32,
    input: String,
    target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fields: Option<Vec<String>>,
}
