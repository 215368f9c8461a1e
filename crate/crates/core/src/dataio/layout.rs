use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DataError;

/// Role of a layer inside an architectural block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "HSGAL1")]
    Hsgal1,
    #[serde(rename = "HSGAL2")]
    Hsgal2,
    #[serde(rename = "POOL")]
    Pool,
    #[serde(rename = "GLOBAL")]
    Global,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Hsgal1 => "HSGAL1",
            Role::Hsgal2 => "HSGAL2",
            Role::Pool => "POOL",
            Role::Global => "GLOBAL",
        }
    }
}

impl FromStr for Role {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "HSGAL1" => Ok(Role::Hsgal1),
            "HSGAL2" => Ok(Role::Hsgal2),
            "POOL" => Ok(Role::Pool),
            "GLOBAL" => Ok(Role::Global),
            other => Err(DataError::SchemaViolation(format!(
                "unknown role `{other}`"
            ))),
        }
    }
}

/// Identifies one analyzed layer: the block it belongs to and its role there.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ComponentId {
    pub block: String,
    pub role: Role,
}

impl ComponentId {
    pub fn new(block: impl Into<String>, role: Role) -> Self {
        Self {
            block: block.into(),
            role,
        }
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.block, self.role.as_str())
    }
}

impl FromStr for ComponentId {
    type Err = DataError;

    /// Parses the `BLOCK.ROLE` form produced by `Display`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (block, role) = s
            .rsplit_once('.')
            .ok_or_else(|| DataError::SchemaViolation(format!("bad component id `{s}`")))?;
        if block.is_empty() {
            return Err(DataError::SchemaViolation(format!(
                "bad component id `{s}`"
            )));
        }
        Ok(ComponentId::new(block, role.parse()?))
    }
}

/// Which columns form one covariance unit for a component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CovarianceAxis {
    /// Columns are the time/space positions of a single sample.
    #[default]
    #[serde(rename = "TEMPORAL")]
    Temporal,
    /// Columns are pooled vectors of several same-class samples.
    #[serde(rename = "CROSS_SAMPLE")]
    CrossSample,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutComponent {
    pub block: String,
    pub role: Role,
    #[serde(default)]
    pub axis: CovarianceAxis,
}

impl LayoutComponent {
    pub fn id(&self) -> ComponentId {
        ComponentId::new(self.block.clone(), self.role)
    }
}

/// Ordered component layout of a multi-branch model.
///
/// Component order is the meta-feature concatenation order; block order is
/// the order of the share vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLayout", into = "RawLayout")]
pub struct Layout {
    blocks: Vec<String>,
    components: Vec<LayoutComponent>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(super) struct RawLayout {
    pub(super) blocks: Vec<String>,
    pub(super) components: Vec<LayoutComponent>,
}

impl TryFrom<RawLayout> for Layout {
    type Error = DataError;

    fn try_from(raw: RawLayout) -> Result<Self, Self::Error> {
        Layout::new(raw.blocks, raw.components)
    }
}

impl From<Layout> for RawLayout {
    fn from(layout: Layout) -> Self {
        RawLayout {
            blocks: layout.blocks,
            components: layout.components,
        }
    }
}

pub const CANONICAL_BRANCHES: [&str; 4] = ["B0", "B1", "B2", "B3"];
pub const CANONICAL_GLOBALS: [&str; 2] = ["GAT_S", "GAT_T"];

impl Layout {
    pub fn new(blocks: Vec<String>, components: Vec<LayoutComponent>) -> Result<Self, DataError> {
        if components.is_empty() {
            return Err(DataError::SchemaViolation(
                "layout has no components".into(),
            ));
        }
        let mut seen_blocks = BTreeSet::new();
        for b in &blocks {
            if b.is_empty() {
                return Err(DataError::SchemaViolation("empty block label".into()));
            }
            if !seen_blocks.insert(b.as_str()) {
                return Err(DataError::SchemaViolation(format!(
                    "block `{b}` listed twice"
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for c in &components {
            if !seen_blocks.contains(c.block.as_str()) {
                return Err(DataError::SchemaViolation(format!(
                    "component {} references undeclared block",
                    c.id()
                )));
            }
            if !seen.insert(c.id()) {
                return Err(DataError::DuplicateComponent(c.id().to_string()));
            }
        }
        for b in &blocks {
            if !components.iter().any(|c| &c.block == b) {
                return Err(DataError::SchemaViolation(format!(
                    "block `{b}` has no components"
                )));
            }
        }
        Ok(Self { blocks, components })
    }

    /// The 14-component layout: four branches with HSGAL1/HSGAL2/POOL layers
    /// followed by the two global attention modules.
    pub fn canonical() -> Self {
        let mut components = Vec::with_capacity(14);
        for b in CANONICAL_BRANCHES {
            for role in [Role::Hsgal1, Role::Hsgal2, Role::Pool] {
                components.push(LayoutComponent {
                    block: b.into(),
                    role,
                    axis: CovarianceAxis::Temporal,
                });
            }
        }
        for g in CANONICAL_GLOBALS {
            components.push(LayoutComponent {
                block: g.into(),
                role: Role::Global,
                axis: CovarianceAxis::Temporal,
            });
        }
        let blocks = CANONICAL_BRANCHES
            .iter()
            .chain(CANONICAL_GLOBALS.iter())
            .map(|s| s.to_string())
            .collect();
        Self { blocks, components }
    }

    /// Returns a copy with every component of `role` switched to `axis`.
    pub fn with_axis(mut self, role: Role, axis: CovarianceAxis) -> Self {
        for c in self.components.iter_mut().filter(|c| c.role == role) {
            c.axis = axis;
        }
        self
    }

    pub fn blocks(&self) -> &[String] {
        &self.blocks
    }

    pub fn components(&self) -> &[LayoutComponent] {
        &self.components
    }

    pub fn component_ids(&self) -> impl Iterator<Item = ComponentId> + '_ {
        self.components.iter().map(LayoutComponent::id)
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn position(&self, id: &ComponentId) -> Option<usize> {
        self.components
            .iter()
            .position(|c| c.block == id.block && c.role == id.role)
    }

    /// Indices (in component order) of the components belonging to `block`.
    pub fn block_members(&self, block: &str) -> Vec<usize> {
        self.components
            .iter()
            .enumerate()
            .filter(|(_, c)| c.block == block)
            .map(|(i, _)| i)
            .collect()
    }
}
