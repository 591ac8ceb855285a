//! Structured operations produced by the command parsers.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    ImageOps,
    PointOps,
    BoxOps,
    MaskOps,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpName {
    OpenImage,
    CloseImage,
    NextSlice,
    PreviousSlice,
    AddPoints,
    AddNegativePoints,
    ClearPoints,
    AddBox,
    ClearBox,
    GenerateMask,
    SaveMask,
}

impl OpName {
    pub const ALL: [OpName; 11] = [
        OpName::OpenImage,
        OpName::CloseImage,
        OpName::NextSlice,
        OpName::PreviousSlice,
        OpName::AddPoints,
        OpName::AddNegativePoints,
        OpName::ClearPoints,
        OpName::AddBox,
        OpName::ClearBox,
        OpName::GenerateMask,
        OpName::SaveMask,
    ];

    pub fn category(self) -> Category {
        use OpName::*;
        match self {
            OpenImage | CloseImage | NextSlice | PreviousSlice => Category::ImageOps,
            AddPoints | AddNegativePoints | ClearPoints => Category::PointOps,
            AddBox | ClearBox => Category::BoxOps,
            GenerateMask | SaveMask => Category::MaskOps,
        }
    }

    /// Slots the operation accepts.
    pub fn allowed_slots(self) -> &'static [SlotKind] {
        use OpName::*;
        use SlotKind::*;
        match self {
            OpenImage => &[Region, Window, Path],
            NextSlice | PreviousSlice => &[Count],
            AddPoints | AddNegativePoints => &[Count, Region, Points],
            AddBox => &[Region, Box],
            GenerateMask => &[Region],
            SaveMask => &[Path],
            CloseImage | ClearPoints | ClearBox => &[],
        }
    }

    pub fn as_str(self) -> &'static str {
        use OpName::*;
        match self {
            OpenImage => "open_image",
            CloseImage => "close_image",
            NextSlice => "next_slice",
            PreviousSlice => "previous_slice",
            AddPoints => "add_points",
            AddNegativePoints => "add_negative_points",
            ClearPoints => "clear_points",
            AddBox => "add_box",
            ClearBox => "clear_box",
            GenerateMask => "generate_mask",
            SaveMask => "save_mask",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.as_str() == s)
    }
}

impl fmt::Display for OpName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SlotKind {
    Count,
    Region,
    Window,
    Path,
    Points,
    Box,
}

impl SlotKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SlotKind::Count => "count",
            SlotKind::Region => "region",
            SlotKind::Window => "window",
            SlotKind::Path => "path",
            SlotKind::Points => "points",
            SlotKind::Box => "box",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowPreset {
    Bone,
    SoftTissue,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Slots {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<WindowPreset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    /// Image-space `(x, y)` coordinates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<[u32; 2]>>,
    /// `[x_min, y_min, x_max, y_max]`.
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "box")]
    pub bbox: Option<[u32; 4]>,
}

impl Slots {
    pub fn present(&self) -> Vec<SlotKind> {
        let mut out = Vec::new();
        if self.count.is_some() {
            out.push(SlotKind::Count);
        }
        if self.region.is_some() {
            out.push(SlotKind::Region);
        }
        if self.window.is_some() {
            out.push(SlotKind::Window);
        }
        if self.path.is_some() {
            out.push(SlotKind::Path);
        }
        if self.points.is_some() {
            out.push(SlotKind::Points);
        }
        if self.bbox.is_some() {
            out.push(SlotKind::Box);
        }
        out
    }

    /// Drop every slot the operation does not accept.
    pub fn restrict_to(mut self, op: OpName) -> Self {
        let allowed = op.allowed_slots();
        let keep = |k: SlotKind| allowed.contains(&k);
        if !keep(SlotKind::Count) {
            self.count = None;
        }
        if !keep(SlotKind::Region) {
            self.region = None;
        }
        if !keep(SlotKind::Window) {
            self.window = None;
        }
        if !keep(SlotKind::Path) {
            self.path = None;
        }
        if !keep(SlotKind::Points) {
            self.points = None;
        }
        if !keep(SlotKind::Box) {
            self.bbox = None;
        }
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpSource {
    Grammar,
    RemoteLlm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuredOp {
    pub category: Category,
    pub op: OpName,
    #[serde(default)]
    pub slots: Slots,
    pub confidence: f64,
    pub source: OpSource,
}

impl StructuredOp {
    /// Same operation and slots, ignoring confidence and provenance.
    pub fn same_meaning(&self, other: &StructuredOp) -> bool {
        self.category == other.category && self.op == other.op && self.slots == other.slots
    }
}
