//! The session store: lifecycle, command execution and replies.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use spine_command::{
    compile_to_actions, parse_via_llm, Action, FallbackReason, Grammar, LlmClientConfig, SessionView, StructuredOp,
    WindowPreset,
};
use spine_core::metrics::MetricReport;
use spine_core::{PointLabel, PromptBox, PromptSet, SegModel};

use crate::error::ServiceError;
use crate::images::ImageStore;
use crate::rle::Rle;
use crate::session::{Engine, Event, EventKind, LatencyRecord, MaskEntry, Phase, SegmentOutcome, ServiceConfig, Session};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub reference: String,
    pub slice: String,
    pub slice_index: usize,
    pub slice_count: usize,
    pub width: usize,
    pub height: usize,
    pub window: Option<WindowPreset>,
    pub has_ground_truth: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskReply {
    pub slice: String,
    pub candidate: usize,
    pub confidence: f64,
    pub area: u64,
    pub rle: Rle,
    pub metrics: Option<MetricReport>,
}

impl From<&MaskEntry> for MaskReply {
    fn from(e: &MaskEntry) -> Self {
        MaskReply {
            slice: e.slice.clone(),
            candidate: e.candidate,
            confidence: e.confidence,
            area: e.rle.area(),
            rle: e.rle.clone(),
            metrics: e.metrics.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateReply {
    pub id: String,
    pub image: Option<ImageInfo>,
    pub prompts: PromptSet,
    pub pending_label: PointLabel,
    pub budget_mode: bool,
    pub box_draw: bool,
    pub region: Option<String>,
    pub history_len: usize,
    pub mask: Option<MaskReply>,
    pub events: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreateReply {
    pub id: String,
    pub state: StateReply,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandReply {
    pub op: StructuredOp,
    pub fallback: Option<FallbackReason>,
    pub actions: Vec<Action>,
    pub notices: Vec<String>,
    pub mask: Option<MaskReply>,
    pub state: StateReply,
    pub latency: Vec<LatencyRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentReply {
    pub mask: MaskReply,
    pub cache_hit: bool,
    pub state: StateReply,
    pub latency: Vec<LatencyRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UndoReply {
    pub undone: bool,
    pub notice: Option<String>,
    pub state: StateReply,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub sessions: usize,
    pub model_input: usize,
}

pub struct Service {
    model: Arc<SegModel>,
    store: ImageStore,
    cfg: ServiceConfig,
    llm: Option<LlmClientConfig>,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn latency(parse: Option<f64>, seg: Option<&SegmentOutcome>, total: f64) -> Vec<LatencyRecord> {
    let mut out = Vec::new();
    if let Some(p) = parse {
        out.push(LatencyRecord { phase: Phase::Parse, milliseconds: p });
    }
    if let Some(s) = seg {
        out.push(LatencyRecord { phase: Phase::Encode, milliseconds: s.encode_ms });
        out.push(LatencyRecord { phase: Phase::Decode, milliseconds: s.decode_ms });
    }
    let floor = out.iter().map(|r| r.milliseconds).fold(0.0, f64::max);
    out.push(LatencyRecord { phase: Phase::Total, milliseconds: total.max(floor) });
    out
}

impl Service {
    pub fn new(model: SegModel, data_root: impl Into<std::path::PathBuf>, cfg: ServiceConfig) -> Self {
        let size = model.cfg.input_size;
        Self {
            model: Arc::new(model),
            store: ImageStore::new(data_root, size),
            cfg,
            llm: None,
            sessions: RwLock::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
        }
    }

    /// Parse commands through a remote endpoint first.
    pub fn with_llm(mut self, llm: LlmClientConfig) -> Self {
        self.llm = Some(llm);
        self
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    pub fn model(&self) -> &SegModel {
        &self.model
    }

    fn engine(&self) -> Engine<'_> {
        Engine { model: &self.model, store: &self.store, cfg: &self.cfg }
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ServiceError> {
        self.sessions
            .read()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("session `{id}` not found")))
    }

    /// Run `f` on a copy of the session and keep the copy only on success, so a
    /// failed request never leaves a partial mutation behind.
    fn mutate<R>(
        &self,
        id: &str,
        f: impl FnOnce(&mut Session, &Engine) -> Result<(R, Option<EventKind>), ServiceError>,
    ) -> Result<(R, StateReply), ServiceError> {
        let handle = self.session(id)?;
        let mut guard = handle.lock().expect("session lock");
        let mut draft = guard.clone();
        let (r, event) = f(&mut draft, &self.engine())?;
        if let Some(kind) = event {
            draft.record(kind);
        }
        *guard = draft;
        Ok((r, state_of(&guard)))
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ok".into(),
            sessions: self.sessions.read().expect("session map lock").len(),
            model_input: self.model.cfg.input_size,
        }
    }

    pub fn create_session(&self, image: Option<&str>) -> Result<CreateReply, ServiceError> {
        let id = format!("s{:06}", self.next_id.fetch_add(1, Ordering::SeqCst));
        let mut session = Session::new(id.clone());
        if let Some(reference) = image {
            session.open(&self.store, reference, None)?;
        }
        session.record(EventKind::Created { image: image.map(String::from) });
        let state = state_of(&session);
        self.sessions.write().expect("session map lock").insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok(CreateReply { id, state })
    }

    pub fn state(&self, id: &str) -> Result<StateReply, ServiceError> {
        let handle = self.session(id)?;
        let guard = handle.lock().expect("session lock");
        Ok(state_of(&guard))
    }

    pub fn events(&self, id: &str) -> Result<Vec<Event>, ServiceError> {
        let handle = self.session(id)?;
        let guard = handle.lock().expect("session lock");
        Ok(guard.log.clone())
    }

    pub fn fingerprint(&self, id: &str) -> Result<serde_json::Value, ServiceError> {
        let handle = self.session(id)?;
        let guard = handle.lock().expect("session lock");
        Ok(guard.fingerprint())
    }

    fn parse(&self, text: &str) -> Result<(StructuredOp, Option<FallbackReason>), ServiceError> {
        match &self.llm {
            Some(cfg) => {
                let out = parse_via_llm(text, cfg, Grammar::load_default())?;
                Ok((out.op, out.fallback))
            }
            None => Ok((Grammar::load_default().parse(text)?, None)),
        }
    }

    pub fn execute_command(&self, id: &str, text: &str) -> Result<CommandReply, ServiceError> {
        let start = Instant::now();
        self.session(id)?;
        let t = Instant::now();
        let (op, fallback) = self.parse(text)?;
        let parse_ms = ms(t);
        let ((actions, applied), state) = self.mutate(id, |s, engine| {
            let (actions, applied) = run_op(s, engine, &op)?;
            Ok(((actions, applied), Some(EventKind::Command { text: text.to_string(), op: op.clone() })))
        })?;
        let latency = latency(Some(parse_ms), applied.segment.as_ref(), ms(start));
        Ok(CommandReply {
            op,
            fallback,
            actions,
            notices: applied.notices,
            mask: applied.segment.as_ref().map(|s| MaskReply::from(&s.entry)),
            state,
            latency,
        })
    }

    pub fn add_point(&self, id: &str, x: usize, y: usize, label: Option<PointLabel>) -> Result<StateReply, ServiceError> {
        let free = self.cfg.free_clicks;
        let ((), state) = self.mutate(id, |s, _| {
            s.click(x, y, label, free)?;
            let label = s.prompts.points.last().expect("just pushed").label;
            Ok(((), Some(EventKind::Point { x, y, label })))
        })?;
        Ok(state)
    }

    pub fn set_box(&self, id: &str, bbox: PromptBox) -> Result<StateReply, ServiceError> {
        let ((), state) = self.mutate(id, |s, _| {
            s.set_box(bbox)?;
            Ok(((), Some(EventKind::Box { bbox })))
        })?;
        Ok(state)
    }

    pub fn segment(&self, id: &str) -> Result<SegmentReply, ServiceError> {
        let start = Instant::now();
        let (outcome, state) = self.mutate(id, |s, engine| Ok((s.segment(engine)?, Some(EventKind::Segment))))?;
        Ok(SegmentReply {
            mask: MaskReply::from(&outcome.entry),
            cache_hit: outcome.cache_hit,
            latency: latency(None, Some(&outcome), ms(start)),
            state,
        })
    }

    pub fn undo(&self, id: &str) -> Result<UndoReply, ServiceError> {
        let (undone, state) = self.mutate(id, |s, _| {
            Ok(match s.undo() {
                Some(_) => (true, Some(EventKind::Undo)),
                None => (false, None),
            })
        })?;
        let notice = (!undone).then(|| "nothing to undo".to_string());
        Ok(UndoReply { undone, notice, state })
    }

    /// 8-bit grayscale PNG (0 / 255) of the newest mask.
    pub fn mask_png(&self, id: &str) -> Result<Vec<u8>, ServiceError> {
        let handle = self.session(id)?;
        let guard = handle.lock().expect("session lock");
        let entry = guard.history.last().ok_or_else(|| ServiceError::NotFound("no mask generated yet".into()))?;
        let bits = entry.rle.decode().expect("own rle");
        encode_png(entry.rle.width, entry.rle.height, &bits)
    }

    /// Rebuild a session from its event log alone.
    pub fn replay(&self, log: &[Event]) -> Result<Session, ServiceError> {
        let engine = self.engine();
        let mut events = log.iter();
        let mut s = match events.next().map(|e| &e.kind) {
            Some(EventKind::Created { image }) => {
                let mut s = Session::new(format!("replay-{}", self.next_id.fetch_add(1, Ordering::SeqCst)));
                if let Some(r) = image {
                    s.open(&self.store, r, None)?;
                }
                s.record(EventKind::Created { image: image.clone() });
                s
            }
            _ => return Err(ServiceError::BadRequest("log must start with a created event".into())),
        };
        for e in events {
            match &e.kind {
                EventKind::Created { .. } => {
                    return Err(ServiceError::BadRequest("duplicate created event".into()));
                }
                EventKind::Command { op, .. } => {
                    run_op(&mut s, &engine, op)?;
                }
                EventKind::Point { x, y, label } => s.click(*x, *y, Some(*label), self.cfg.free_clicks)?,
                EventKind::Box { bbox } => s.set_box(*bbox)?,
                EventKind::Segment => {
                    s.segment(&engine)?;
                }
                EventKind::Undo => {
                    s.undo();
                }
            }
            s.record(e.kind.clone());
        }
        Ok(s)
    }
}

fn run_op(s: &mut Session, engine: &Engine, op: &StructuredOp) -> Result<(Vec<Action>, crate::session::Applied), ServiceError> {
    let view = SessionView {
        has_image: s.image.is_some(),
        has_mask: !s.history.is_empty(),
        image_dir: engine.cfg.image_dir.clone(),
    };
    let actions = compile_to_actions(op, &view)?;
    let applied = s.apply(engine, &actions)?;
    Ok((actions, applied))
}

pub fn state_of(s: &Session) -> StateReply {
    StateReply {
        id: s.id.clone(),
        image: s.image.as_ref().map(|i| {
            let shape = i.slice.image.shape();
            ImageInfo {
                reference: i.source.clone(),
                slice: i.slice.reference.clone(),
                slice_index: i.index,
                slice_count: i.stack.len(),
                width: shape[1],
                height: shape[0],
                window: i.window,
                has_ground_truth: i.slice.gt.is_some(),
            }
        }),
        prompts: s.prompts.clone(),
        pending_label: s.pending_label,
        budget_mode: s.budget_mode,
        box_draw: s.box_draw,
        region: s.region.clone(),
        history_len: s.history.len(),
        mask: s.history.last().map(MaskReply::from),
        events: s.log.len(),
    }
}

pub fn encode_png(width: usize, height: usize, bits: &[bool]) -> Result<Vec<u8>, ServiceError> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| ServiceError::Internal(e.to_string()))?;
        let px: Vec<u8> = bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        w.write_image_data(&px).map_err(|e| ServiceError::Internal(e.to_string()))?;
    }
    Ok(buf)
}
