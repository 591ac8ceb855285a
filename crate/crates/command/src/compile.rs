//! Compilation of structured ops into session actions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::op::{OpName, StructuredOp, WindowPreset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointLabel {
    Positive,
    Negative,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    OpenImage {
        path: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        window: Option<WindowPreset>,
    },
    CloseImage,
    MoveSlice { delta: i64 },
    /// Await `count` clicks carrying `label`.
    SetPointBudget { label: PointLabel, count: u32 },
    AddPoints { label: PointLabel, points: Vec<[u32; 2]> },
    ClearPoints,
    EnterBoxDraw,
    SetBox { bbox: [u32; 4] },
    ClearBox,
    /// One encode, decode and rank pass.
    Segment,
    SaveMask {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<String>,
    },
    /// Anatomy term recorded alongside the other actions; never reaches the model.
    NoteRegion { region: String },
}

/// The parts of session state the compiler consults.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SessionView {
    pub has_image: bool,
    pub has_mask: bool,
    /// Fallback source for `open_image` without a path slot.
    pub image_dir: Option<String>,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum StateError {
    #[error("{op} needs an open image")]
    NoImage { op: OpName },
    #[error("open_image needs a path or a configured image directory")]
    NoImageSource,
    #[error("save_mask needs a generated mask")]
    NoMask,
}

pub fn compile_to_actions(op: &StructuredOp, view: &SessionView) -> Result<Vec<Action>, StateError> {
    let s = &op.slots;
    let needs_image = !matches!(op.op, OpName::OpenImage);
    if needs_image && !view.has_image {
        return Err(StateError::NoImage { op: op.op });
    }
    let mut actions = Vec::new();
    if let Some(region) = &s.region {
        actions.push(Action::NoteRegion { region: region.clone() });
    }
    let label = |neg: bool| if neg { PointLabel::Negative } else { PointLabel::Positive };
    match op.op {
        OpName::OpenImage => {
            let path = s
                .path
                .clone()
                .or_else(|| view.image_dir.clone())
                .ok_or(StateError::NoImageSource)?;
            actions.push(Action::OpenImage { path, window: s.window });
        }
        OpName::CloseImage => actions.push(Action::CloseImage),
        OpName::NextSlice => actions.push(Action::MoveSlice { delta: s.count.unwrap_or(1) as i64 }),
        OpName::PreviousSlice => {
            actions.push(Action::MoveSlice { delta: -(s.count.unwrap_or(1) as i64) })
        }
        OpName::AddPoints | OpName::AddNegativePoints => {
            let label = label(op.op == OpName::AddNegativePoints);
            match &s.points {
                Some(points) => actions.push(Action::AddPoints { label, points: points.clone() }),
                None => actions.push(Action::SetPointBudget { label, count: s.count.unwrap_or(1) }),
            }
        }
        OpName::ClearPoints => actions.push(Action::ClearPoints),
        OpName::AddBox => match s.bbox {
            Some(bbox) => actions.push(Action::SetBox { bbox }),
            None => actions.push(Action::EnterBoxDraw),
        },
        OpName::ClearBox => actions.push(Action::ClearBox),
        OpName::GenerateMask => actions.push(Action::Segment),
        OpName::SaveMask => {
            if !view.has_mask {
                return Err(StateError::NoMask);
            }
            actions.push(Action::SaveMask { path: s.path.clone() });
        }
    }
    Ok(actions)
}
