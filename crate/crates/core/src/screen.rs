//! Screens, objects, commands and sessions, plus their validation rules.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::vocab::Vocab;

/// Hard cap on turns in one session.
pub const MAX_TURNS: usize = 5;
/// Hard cap on tokens in one command.
pub const MAX_COMMAND_TOKENS: usize = 32;

/// Normalized rectangle `[xmin, ymin, xmax, ymax]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        Self { xmin: v[0], ymin: v[1], xmax: v[2], ymax: v[3] }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.xmin, b.ymin, b.xmax, b.ymax]
    }
}

impl BBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        Self { xmin, ymin, xmax, ymax }
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))
    }

    pub fn is_proper(&self) -> bool {
        self.xmin < self.xmax && self.ymin < self.ymax
    }

    /// Area of the intersection with `other` (0 when disjoint).
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.xmax.min(other.xmax) - self.xmin.max(other.xmin);
        let h = self.ymax.min(other.ymax) - self.ymin.max(other.ymin);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        self.into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjType {
    Button,
    Checkbox,
    Text,
    Icon,
    Input,
    Image,
    Toggle,
    ListItem,
    Tab,
    Other,
}

impl ObjType {
    pub const ALL: [ObjType; 10] = [
        ObjType::Button,
        ObjType::Checkbox,
        ObjType::Text,
        ObjType::Icon,
        ObjType::Input,
        ObjType::Image,
        ObjType::Toggle,
        ObjType::ListItem,
        ObjType::Tab,
        ObjType::Other,
    ];

    pub const COUNT: usize = Self::ALL.len();

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjType::Button => "button",
            ObjType::Checkbox => "checkbox",
            ObjType::Text => "text",
            ObjType::Icon => "icon",
            ObjType::Input => "input",
            ObjType::Image => "image",
            ObjType::Toggle => "toggle",
            ObjType::ListItem => "list_item",
            ObjType::Tab => "tab",
            ObjType::Other => "other",
        }
    }

    /// Word tokens naming the type in a command (`list_item` -> `list item`).
    pub fn tokens(self) -> Vec<String> {
        self.name().split('_').map(str::to_owned).collect()
    }
}

impl fmt::Display for ObjType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UiObject {
    pub index: usize,
    pub bbox: BBox,
    pub obj_type: ObjType,
    pub clickable: bool,
    pub leaf: bool,
    pub text: Vec<String>,
    pub resource_id: Vec<String>,
    pub dom_pre: usize,
    pub dom_post: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Screen {
    pub screen_id: String,
    pub app_id: String,
    pub width_px: u32,
    pub height_px: u32,
    pub objects: Vec<UiObject>,
}

impl Screen {
    pub fn clickable_indices(&self) -> Vec<usize> {
        self.objects.iter().filter(|o| o.clickable).map(|o| o.index).collect()
    }

    pub fn object(&self, index: usize) -> Option<&UiObject> {
        self.objects.get(index)
    }

    pub fn is_clickable(&self, index: usize) -> bool {
        self.objects.get(index).is_some_and(|o| o.clickable)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Human,
    Heuristic,
    RandomAblation,
    RepeatC0,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Command {
    pub tokens: Vec<String>,
    pub origin: Origin,
    pub turn: usize,
}

impl Command {
    pub fn new(tokens: Vec<String>, origin: Origin, turn: usize) -> Self {
        Self { tokens, origin, turn }
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    HumanRecord,
    Model,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub command: Command,
    pub action: usize,
    pub agent_kind: AgentKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Dev,
    Test,
    None,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Dev => "dev",
            SplitTag::Test => "test",
            SplitTag::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub screen_id: String,
    pub target: usize,
    pub turns: Vec<Turn>,
    pub completed: bool,
    pub split_tag: SplitTag,
}

impl Session {
    pub fn commands(&self) -> Vec<&Command> {
        self.turns.iter().map(|t| &t.command).collect()
    }

    pub fn actions(&self) -> Vec<usize> {
        self.turns.iter().map(|t| t.action).collect()
    }

    pub fn num_turns(&self) -> usize {
        self.turns.len()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub screens: BTreeMap<String, Screen>,
    pub sessions: Vec<Session>,
    pub vocab: Vec<String>,
}

impl Corpus {
    pub fn screen(&self, id: &str) -> Option<&Screen> {
        self.screens.get(id)
    }

    pub fn sessions_in(&self, split: SplitTag) -> Vec<&Session> {
        self.sessions.iter().filter(|s| s.split_tag == split).collect()
    }
}

/// One broken invariant. `object` is set when the violation is attached to a
/// specific object (or turn, for session checks).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub object: Option<usize>,
    pub field: &'static str,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.object {
            Some(i) => write!(f, "object {i}: {} ({})", self.rule, self.field),
            None => write!(f, "{} ({})", self.rule, self.field),
        }
    }
}

fn violation(object: Option<usize>, field: &'static str, rule: impl Into<String>) -> Violation {
    Violation { object, field, rule: rule.into() }
}

/// Every invariant violation of `screen`, ordered by object index then field.
/// Vocabulary membership is only checked when `vocab` is given.
pub fn validate_screen(screen: &Screen, vocab: Option<&Vocab>) -> Vec<Violation> {
    let mut out = Vec::new();
    for (pos, o) in screen.objects.iter().enumerate() {
        let i = Some(pos);
        if o.index != pos {
            out.push(violation(i, "index", "index contiguous"));
        }
        if o.dom_pre != o.index {
            out.push(violation(i, "dom_pre", "dom_pre=index"));
        }
        let b = o.bbox;
        if [b.xmin, b.ymin, b.xmax, b.ymax].iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            out.push(violation(i, "bbox", "coordinates in [0,1]"));
        }
        if !(b.xmin < b.xmax) {
            out.push(violation(i, "bbox", "xmin<xmax"));
        }
        if !(b.ymin < b.ymax) {
            out.push(violation(i, "bbox", "ymin<ymax"));
        }
        if let Some(v) = vocab {
            if o.text.iter().any(|t| !v.contains(t)) {
                out.push(violation(i, "text", "tokens in vocabulary"));
            }
            if o.resource_id.iter().any(|t| !v.contains(t)) {
                out.push(violation(i, "resource_id", "tokens in vocabulary"));
            }
        }
    }
    if screen.objects.iter().filter(|o| o.clickable).count() < 2 {
        out.push(violation(None, "objects", "min 2 clickable"));
    }
    out
}

/// Session-level invariants against the screen the session refers to.
/// Commands whose origin is `repeat_c0` are exempt from the no-repeat rule.
pub fn validate_session(session: &Session, screen: &Screen) -> Vec<Violation> {
    let mut out = Vec::new();
    if session.screen_id != screen.screen_id {
        out.push(violation(None, "screen_id", "screen_id resolves"));
    }
    let n = session.turns.len();
    if n == 0 || n > MAX_TURNS {
        out.push(violation(None, "turns", format!("1..={MAX_TURNS} turns")));
    }
    if !screen.is_clickable(session.target) {
        out.push(violation(None, "target", "target clickable"));
    }
    if session.completed && session.turns.last().is_some_and(|t| t.action != session.target) {
        out.push(violation(None, "completed", "completed implies last action = target"));
    }
    let mut seen_cmd: HashSet<&[String]> = HashSet::new();
    let mut seen_act = HashSet::new();
    for (t, turn) in session.turns.iter().enumerate() {
        let c = &turn.command;
        if c.tokens.is_empty() || c.tokens.len() > MAX_COMMAND_TOKENS {
            out.push(violation(Some(t), "command", format!("1..={MAX_COMMAND_TOKENS} tokens")));
        }
        if c.origin != Origin::RepeatC0 && !seen_cmd.insert(c.tokens.as_slice()) {
            out.push(violation(Some(t), "command", "no repeated command"));
        }
        if !screen.is_clickable(turn.action) {
            out.push(violation(Some(t), "action", "action clickable"));
        }
        if !seen_act.insert(turn.action) {
            out.push(violation(Some(t), "action", "no repeated action"));
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn obj(index: usize, bbox: [f64; 4], ty: ObjType, clickable: bool, text: &[&str]) -> UiObject {
        UiObject {
            index,
            bbox: bbox.into(),
            obj_type: ty,
            clickable,
            leaf: true,
            text: text.iter().map(|s| s.to_string()).collect(),
            resource_id: vec![],
            dom_pre: index,
            dom_post: index,
        }
    }

    /// Five objects: a title, two "ok" buttons, a search input and an icon.
    pub fn five_object_screen() -> Screen {
        Screen {
            screen_id: "s-fixture".into(),
            app_id: "app-fixture".into(),
            width_px: 1080,
            height_px: 1920,
            objects: vec![
                obj(0, [0.0, 0.0, 1.0, 0.1], ObjType::Text, false, &["settings"]),
                obj(1, [0.1, 0.2, 0.4, 0.3], ObjType::Button, true, &["ok"]),
                obj(2, [0.6, 0.2, 0.9, 0.3], ObjType::Button, true, &["ok"]),
                obj(3, [0.1, 0.5, 0.9, 0.6], ObjType::Input, true, &["search"]),
                obj(4, [0.8, 0.9, 0.9, 1.0], ObjType::Icon, true, &[]),
            ],
        }
    }
}
