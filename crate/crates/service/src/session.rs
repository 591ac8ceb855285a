//! Per-session interaction state, its event log and the rules that mutate it.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use spine_command::{Action, StructuredOp, WindowPreset};
use spine_core::metrics::{self, MetricReport};
use spine_core::trainer::Mask;
use spine_core::{Point, PointLabel, PromptBox, PromptSet, SegModel};
use spine_neural::Tensor;

use crate::error::ServiceError;
use crate::images::{ImageStore, Slice};
use crate::rle::Rle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServePrecision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    /// Opened by `open_image` commands that carry no path.
    pub image_dir: Option<String>,
    /// Default destination of `save_mask`, relative to the data root.
    pub export_dir: String,
    /// Segment with the no-prompt token when no point or box is set.
    pub allow_empty_prompts: bool,
    /// Accept clicks without a pending budget.
    pub free_clicks: bool,
    pub precision: ServePrecision,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            image_dir: None,
            export_dir: "exports".into(),
            allow_empty_prompts: true,
            free_clicks: false,
            precision: ServePrecision::F32,
        }
    }
}

/// Shared read-only context for applying session mutations.
pub struct Engine<'a> {
    pub model: &'a SegModel,
    pub store: &'a ImageStore,
    pub cfg: &'a ServiceConfig,
}

#[derive(Clone, Debug)]
pub enum Embedding {
    F32(Arc<Tensor<f32>>),
    F64(Arc<Tensor<f64>>),
}

impl Embedding {
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            Embedding::F32(t) => t.to_f64_vec(),
            Embedding::F64(t) => t.to_f64_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Parse,
    Encode,
    Decode,
    Total,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub phase: Phase,
    pub milliseconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub slice: String,
    pub candidate: usize,
    pub confidence: f64,
    pub rle: Rle,
    pub metrics: Option<MetricReport>,
    /// Prompt state right before this mask was generated.
    pub prompts_before: PromptSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Created { image: Option<String> },
    Command { text: String, op: StructuredOp },
    Point { x: usize, y: usize, label: PointLabel },
    Box { bbox: PromptBox },
    Segment,
    Undo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    /// Milliseconds since the session was created.
    pub at_ms: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Clone, Debug)]
pub struct LoadedImage {
    pub source: String,
    pub stack: Vec<String>,
    pub index: usize,
    pub slice: Slice,
    pub window: Option<WindowPreset>,
}

#[derive(Clone, Debug)]
pub struct Session {
    pub id: String,
    created: Instant,
    pub image: Option<LoadedImage>,
    pub prompts: PromptSet,
    pub pending_label: PointLabel,
    /// A budget was set by an add command; clicks beyond it are rejected.
    pub budget_mode: bool,
    pub box_draw: bool,
    pub region: Option<String>,
    pub history: Vec<MaskEntry>,
    pub log: Vec<Event>,
    cache: BTreeMap<String, Embedding>,
}

/// Result of one segmentation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentOutcome {
    pub entry: MaskEntry,
    pub cache_hit: bool,
    pub encode_ms: f64,
    pub decode_ms: f64,
}

/// What applying a list of actions produced.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Applied {
    pub segment: Option<SegmentOutcome>,
    pub notices: Vec<String>,
}

fn core_label(l: spine_command::PointLabel) -> PointLabel {
    match l {
        spine_command::PointLabel::Positive => PointLabel::Positive,
        spine_command::PointLabel::Negative => PointLabel::Negative,
    }
}

impl Session {
    pub fn new(id: String) -> Self {
        Self {
            id,
            created: Instant::now(),
            image: None,
            prompts: PromptSet::default(),
            pending_label: PointLabel::Positive,
            budget_mode: false,
            box_draw: false,
            region: None,
            history: Vec::new(),
            log: Vec::new(),
            cache: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, kind: EventKind) {
        let seq = self.log.len() as u64;
        let at_ms = self.created.elapsed().as_secs_f64() * 1e3;
        self.log.push(Event { seq, at_ms, kind });
    }

    pub fn size(&self) -> Option<(usize, usize)> {
        self.image.as_ref().map(|i| {
            let s = i.slice.image.shape();
            (s[1], s[0])
        })
    }

    fn reset_prompts(&mut self) {
        self.prompts = PromptSet::default();
        self.pending_label = PointLabel::Positive;
        self.budget_mode = false;
        self.box_draw = false;
    }

    pub fn open(&mut self, store: &ImageStore, reference: &str, window: Option<WindowPreset>) -> Result<(), ServiceError> {
        let stack = store.stack(reference)?;
        let slice = store.load(&stack[0])?;
        self.image = Some(LoadedImage { source: reference.to_string(), stack, index: 0, slice, window });
        self.reset_prompts();
        Ok(())
    }

    fn require_image(&self, what: &str) -> Result<(usize, usize), ServiceError> {
        self.size().ok_or_else(|| ServiceError::State(format!("{what} needs an open image")))
    }

    /// A user click. Budget mode accepts exactly as many clicks as were requested.
    pub fn click(&mut self, x: usize, y: usize, label: Option<PointLabel>, free_clicks: bool) -> Result<(), ServiceError> {
        let (w, h) = self.require_image("a click")?;
        if x >= w || y >= h {
            return Err(ServiceError::Invalid(format!("click ({x}, {y}) outside the {w}x{h} slice")));
        }
        let budget = self.prompts.pending_point_budget;
        if budget == 0 && !free_clicks {
            let message = if self.budget_mode {
                "click budget exhausted; issue a new add command".to_string()
            } else {
                "no pending click budget; issue an add command first".to_string()
            };
            return Err(ServiceError::Rejected { message, remaining: 0 });
        }
        let label = label.unwrap_or(self.pending_label);
        self.prompts.points.push(Point { x, y, label });
        self.prompts.pending_point_budget = budget.saturating_sub(1);
        Ok(())
    }

    pub fn set_box(&mut self, bbox: PromptBox) -> Result<(), ServiceError> {
        let (w, h) = self.require_image("a box")?;
        let mut next = self.prompts.clone();
        next.bbox = Some(bbox);
        next.validate(w, h).map_err(|e| ServiceError::Invalid(e.to_string()))?;
        self.prompts = next;
        self.box_draw = false;
        Ok(())
    }

    /// Pop the newest mask and restore the prompts it was generated from.
    pub fn undo(&mut self) -> Option<MaskEntry> {
        let entry = self.history.pop()?;
        self.prompts = entry.prompts_before.clone();
        Some(entry)
    }

    pub fn embedding(&mut self, engine: &Engine) -> Result<(Embedding, bool), ServiceError> {
        let img = self.image.as_ref().ok_or_else(|| ServiceError::State("no open image".into()))?;
        let key = img.slice.reference.clone();
        if let Some(e) = self.cache.get(&key) {
            return Ok((e.clone(), true));
        }
        let e = compute_embedding(engine, &img.slice.image)?;
        self.cache.insert(key, e.clone());
        Ok((e, false))
    }

    pub fn segment(&mut self, engine: &Engine) -> Result<SegmentOutcome, ServiceError> {
        let (w, h) = self.require_image("segmentation")?;
        if self.prompts.is_empty() && !engine.cfg.allow_empty_prompts {
            return Err(ServiceError::State("segmentation needs at least one point or a box".into()));
        }
        self.prompts.validate(w, h).map_err(|e| ServiceError::Invalid(e.to_string()))?;
        let t = Instant::now();
        let (embedding, cache_hit) = self.embedding(engine)?;
        let encode_ms = t.elapsed().as_secs_f64() * 1e3;
        let img = self.image.as_ref().expect("checked above");
        let t = Instant::now();
        let prediction = match &embedding {
            Embedding::F32(e) => engine.model.predict_with_embedding(e, &img.slice.image.cast::<f32>(), &self.prompts)?,
            Embedding::F64(e) => engine.model.predict_with_embedding(e, &img.slice.image, &self.prompts)?,
        };
        let best = prediction.best();
        let bits = best.binary();
        let metrics = match &img.slice.gt {
            Some(gt) => {
                let gt = Mask::new(w, h, gt.clone())?;
                let pred = Mask::new(w, h, bits.clone())?;
                Some(metrics::evaluate(&gt, &pred, None)?)
            }
            None => None,
        };
        let decode_ms = t.elapsed().as_secs_f64() * 1e3;
        let entry = MaskEntry {
            slice: img.slice.reference.clone(),
            candidate: prediction.selected,
            confidence: best.confidence,
            rle: Rle::encode(w, h, &bits),
            metrics,
            prompts_before: self.prompts.clone(),
        };
        self.history.push(entry.clone());
        Ok(SegmentOutcome { entry, cache_hit, encode_ms, decode_ms })
    }

    /// Apply compiled command actions in order.
    pub fn apply(&mut self, engine: &Engine, actions: &[Action]) -> Result<Applied, ServiceError> {
        let mut out = Applied::default();
        for action in actions {
            match action {
                Action::NoteRegion { region } => self.region = Some(region.clone()),
                Action::OpenImage { path, window } => self.open(engine.store, path, *window)?,
                Action::CloseImage => {
                    self.image = None;
                    self.reset_prompts();
                }
                Action::MoveSlice { delta } => {
                    let img = self.image.as_ref().ok_or_else(|| ServiceError::State("no open image".into()))?;
                    let last = img.stack.len() as i64 - 1;
                    let target = (img.index as i64 + delta).clamp(0, last) as usize;
                    if target == img.index {
                        out.notices.push(format!("already at slice {} of {}", img.index + 1, last + 1));
                    } else {
                        let slice = engine.store.load(&img.stack[target])?;
                        let next = LoadedImage { index: target, slice, ..img.clone() };
                        self.image = Some(next);
                        self.reset_prompts();
                    }
                }
                Action::SetPointBudget { label, count } => {
                    self.prompts.pending_point_budget = *count as usize;
                    self.pending_label = core_label(*label);
                    self.budget_mode = true;
                }
                Action::AddPoints { label, points } => {
                    let (w, h) = self.require_image("adding points")?;
                    for &[x, y] in points {
                        let (x, y) = (x as usize, y as usize);
                        if x >= w || y >= h {
                            return Err(ServiceError::Invalid(format!("point ({x}, {y}) outside the {w}x{h} slice")));
                        }
                        self.prompts.points.push(Point { x, y, label: core_label(*label) });
                    }
                }
                Action::ClearPoints => {
                    self.prompts.points.clear();
                    self.prompts.pending_point_budget = 0;
                }
                Action::EnterBoxDraw => self.box_draw = true,
                Action::SetBox { bbox: [x0, y0, x1, y1] } => self.set_box(PromptBox {
                    x_min: *x0 as usize,
                    y_min: *y0 as usize,
                    x_max: *x1 as usize,
                    y_max: *y1 as usize,
                })?,
                Action::ClearBox => {
                    self.prompts.bbox = None;
                    self.box_draw = false;
                }
                Action::Segment => out.segment = Some(self.segment(engine)?),
                Action::SaveMask { path } => {
                    let entry = self.history.last().ok_or_else(|| ServiceError::State("no mask to save".into()))?;
                    let rel = path
                        .clone()
                        .unwrap_or_else(|| format!("{}/{}_{:03}.png", engine.cfg.export_dir, self.id, self.history.len()));
                    let target = engine.store.resolve(&rel)?;
                    if let Some(dir) = target.parent() {
                        std::fs::create_dir_all(dir).map_err(|e| ServiceError::Internal(e.to_string()))?;
                    }
                    let bits: Vec<u8> = entry.rle.decode().expect("own rle").into_iter().map(u8::from).collect();
                    spine_core::preprocess::png_io::write_mask(&target, entry.rle.width, entry.rle.height, &bits)?;
                    out.notices.push(format!("mask saved to {rel}"));
                }
            }
        }
        Ok(out)
    }

    /// Everything replay must reproduce; timings are excluded.
    pub fn fingerprint(&self) -> serde_json::Value {
        serde_json::json!({
            "image": self.image.as_ref().map(|i| (&i.source, &i.stack, i.index, i.window)),
            "prompts": self.prompts,
            "pending_label": self.pending_label,
            "budget_mode": self.budget_mode,
            "box_draw": self.box_draw,
            "region": self.region,
            "history": self.history,
            "events": self.log.iter().map(|e| (&e.seq, &e.kind)).collect::<Vec<_>>(),
        })
    }
}

pub fn compute_embedding(engine: &Engine, image: &Tensor<f64>) -> Result<Embedding, ServiceError> {
    Ok(match engine.cfg.precision {
        ServePrecision::F32 => Embedding::F32(Arc::new(engine.model.embed(&image.cast::<f32>())?)),
        ServePrecision::F64 => Embedding::F64(Arc::new(engine.model.embed(image)?)),
    })
}
