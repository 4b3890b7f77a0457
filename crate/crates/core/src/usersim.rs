//! Simulated users: the template-based follow-up generator, initial
//! instructions for synthetic episodes, and the ablation users.
//!
//! The follow-up template is
//! `not the <selected> click the <target> {to|on} the <direction>`,
//! instantiated from view-hierarchy features only.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::screen::{BBox, Command, Origin, Screen, UiObject};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserKind {
    Heuristic,
    RandomHeuristic,
    RepeatC0,
    ScriptedReplay,
}

impl UserKind {
    pub fn name(self) -> &'static str {
        match self {
            UserKind::Heuristic => "heuristic",
            UserKind::RandomHeuristic => "random_heuristic",
            UserKind::RepeatC0 => "repeat_c0",
            UserKind::ScriptedReplay => "scripted_replay",
        }
    }
}

impl std::str::FromStr for UserKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "heuristic" => Ok(UserKind::Heuristic),
            "random_heuristic" | "random" => Ok(UserKind::RandomHeuristic),
            "repeat_c0" | "repeat" => Ok(UserKind::RepeatC0),
            "scripted_replay" | "scripted" => Ok(UserKind::ScriptedReplay),
            other => Err(format!("unknown user kind {other:?}")),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum UserSimError {
    #[error("selection equals the target; no follow-up needed")]
    SelectionIsTarget,
    #[error("object {0} does not exist on the screen")]
    NoSuchObject(usize),
    #[error("target {0} is not clickable")]
    NotClickable(usize),
    #[error("no ambiguity available: every descriptor of object {0} is unique")]
    NoAmbiguity(usize),
    #[error("user kind {0} has no ablation follow-up")]
    UnsupportedKind(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialMode {
    Relative,
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialPhrase {
    pub mode: SpatialMode,
    pub words: Vec<String>,
}

/// Geometry constants for direction phrases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialThresholds {
    /// Above this offset on either axis the phrase switches to a screen region.
    pub absolute: f64,
    /// Components smaller than this get the "slight" qualifier.
    pub slight: f64,
    /// Components smaller than this are dropped.
    pub suppress: f64,
}

impl Default for SpatialThresholds {
    fn default() -> Self {
        Self { absolute: 0.5, slight: 0.2, suppress: 0.05 }
    }
}

const MAX_DESCRIPTOR_TOKENS: usize = 4;

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

/// Shortest natural reference to an object: its text, else its resource id,
/// else its type name.
pub fn descriptor(object: &UiObject) -> Vec<String> {
    if !object.text.is_empty() {
        object.text.iter().take(MAX_DESCRIPTOR_TOKENS).cloned().collect()
    } else if !object.resource_id.is_empty() {
        object.resource_id.iter().take(MAX_DESCRIPTOR_TOKENS).cloned().collect()
    } else {
        object.obj_type.tokens()
    }
}

/// All the ways a command can refer to `object` by attribute.
pub fn descriptor_alternatives(object: &UiObject) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    let mut push = |d: Vec<String>| {
        if !d.is_empty() && !out.contains(&d) {
            out.push(d);
        }
    };
    push(object.text.iter().take(MAX_DESCRIPTOR_TOKENS).cloned().collect());
    push(object.resource_id.iter().take(MAX_DESCRIPTOR_TOKENS).cloned().collect());
    push(object.obj_type.tokens());
    out
}

/// Whether `desc` refers to `object` through any of its attributes.
pub fn matches_descriptor(object: &UiObject, desc: &[String]) -> bool {
    descriptor_alternatives(object).iter().any(|d| d.as_slice() == desc)
}

/// Clickable objects referred to by `desc`, in index order.
pub fn clickable_matches(screen: &Screen, desc: &[String]) -> Vec<usize> {
    screen
        .objects
        .iter()
        .filter(|o| o.clickable && matches_descriptor(o, desc))
        .map(|o| o.index)
        .collect()
}

/// 3x3 region name of a point, e.g. `top right` or `center`.
pub fn region_words(x: f64, y: f64) -> Vec<String> {
    let v = if y < 1.0 / 3.0 {
        Some("top")
    } else if y < 2.0 / 3.0 {
        None
    } else {
        Some("bottom")
    };
    let h = if x < 1.0 / 3.0 {
        Some("left")
    } else if x < 2.0 / 3.0 {
        None
    } else {
        Some("right")
    };
    match (v, h) {
        (None, None) => words("center"),
        (v, h) => v.into_iter().chain(h).map(str::to_owned).collect(),
    }
}

pub fn spatial_phrase(from: &BBox, to: &BBox) -> SpatialPhrase {
    spatial_phrase_with(from, to, &SpatialThresholds::default())
}

/// Direction from the previous selection `from` to the target `to`.
///
/// Far targets get an absolute screen region; near ones a relative
/// direction. Non-slight components come first, then the slight ones behind
/// a single "slight", joined by "and".
pub fn spatial_phrase_with(from: &BBox, to: &BBox, th: &SpatialThresholds) -> SpatialPhrase {
    let (fx, fy) = from.center();
    let (tx, ty) = to.center();
    let (dx, dy) = (tx - fx, ty - fy);
    if dx.abs().max(dy.abs()) > th.absolute {
        let mut w = region_words(tx, ty);
        w.extend(words("of the screen"));
        return SpatialPhrase { mode: SpatialMode::Absolute, words: w };
    }
    let mut strong = Vec::new();
    let mut slight = Vec::new();
    for (d, neg, pos) in [(dx, "left", "right"), (dy, "above", "below")] {
        if d.abs() < th.suppress {
            continue;
        }
        let w = if d < 0.0 { neg } else { pos };
        if d.abs() < th.slight {
            slight.push(w);
        } else {
            strong.push(w);
        }
    }
    let mut w: Vec<String> = Vec::new();
    if strong.is_empty() && slight.is_empty() {
        w.extend(words("right there same spot"));
    } else {
        let mut parts: Vec<Vec<&str>> = strong.into_iter().map(|s| vec![s]).collect();
        if !slight.is_empty() {
            let mut group = vec!["slight"];
            for (i, s) in slight.into_iter().enumerate() {
                if i > 0 {
                    group.push("and");
                }
                group.push(s);
            }
            parts.push(group);
        }
        for (i, p) in parts.into_iter().enumerate() {
            if i > 0 {
                w.push("and".into());
            }
            w.extend(p.into_iter().map(str::to_owned));
        }
    }
    w.extend(words("of your choice"));
    SpatialPhrase { mode: SpatialMode::Relative, words: w }
}

fn object(screen: &Screen, i: usize) -> Result<&UiObject, UserSimError> {
    screen.object(i).ok_or(UserSimError::NoSuchObject(i))
}

/// `not the <a'> click the <g> {to|on} the <dir>` for an arbitrary
/// referenced object `refer` (the target for the honest user).
fn template(screen: &Screen, refer: usize, selected: usize) -> Result<Vec<String>, UserSimError> {
    let sel = object(screen, selected)?;
    let tgt = object(screen, refer)?;
    let phrase = spatial_phrase(&sel.bbox, &tgt.bbox);
    let mut t = words("not the");
    t.extend(descriptor(sel));
    t.extend(words("click the"));
    t.extend(descriptor(tgt));
    t.extend(words(match phrase.mode {
        SpatialMode::Relative => "to the",
        SpatialMode::Absolute => "on the",
    }));
    t.extend(phrase.words);
    Ok(t)
}

/// Deterministic corrective follow-up after a wrong selection.
pub fn heuristic_followup(screen: &Screen, target: usize, selected: usize, turn: usize) -> Result<Command, UserSimError> {
    if selected == target {
        return Err(UserSimError::SelectionIsTarget);
    }
    Ok(Command::new(template(screen, target, selected)?, Origin::Heuristic, turn))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionStyle {
    Full,
    Underspecified,
}

/// Descriptors of `target` that also refer to at least one other clickable
/// object.
pub fn ambiguous_descriptors(screen: &Screen, target: usize) -> Result<Vec<Vec<String>>, UserSimError> {
    let g = object(screen, target)?;
    Ok(descriptor_alternatives(g)
        .into_iter()
        .filter(|d| clickable_matches(screen, d).len() >= 2)
        .collect())
}

/// Opening command `c_0` for a synthetic episode.
///
/// `Full` names the target's descriptor and adds its screen region when the
/// descriptor alone is shared. `Underspecified` picks (by seed) one of the
/// target's descriptors that matches two or more clickable objects.
pub fn initial_instruction(screen: &Screen, target: usize, style: InstructionStyle, seed: u64) -> Result<Command, UserSimError> {
    let g = object(screen, target)?;
    if !g.clickable {
        return Err(UserSimError::NotClickable(target));
    }
    let mut t = words("click the");
    match style {
        InstructionStyle::Full => {
            let d = descriptor(g);
            let shared = clickable_matches(screen, &d).len() >= 2;
            t.extend(d);
            if shared {
                let (x, y) = g.bbox.center();
                t.extend(words("on the"));
                t.extend(region_words(x, y));
                t.extend(words("of the screen"));
            }
        }
        InstructionStyle::Underspecified => {
            let cands = ambiguous_descriptors(screen, target)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = cands.choose(&mut rng).ok_or(UserSimError::NoAmbiguity(target))?;
            t.extend(d.iter().cloned());
        }
    }
    Ok(Command::new(t, Origin::Scripted, 0))
}

/// Follow-ups for the ablation users.
///
/// `RandomHeuristic` fills the template with a uniformly drawn clickable
/// object instead of the target. `RepeatC0` echoes `c_0`.
pub fn ablation_followup(
    kind: UserKind,
    screen: &Screen,
    selected: usize,
    c0: &Command,
    seed: u64,
    turn: usize,
) -> Result<Command, UserSimError> {
    match kind {
        UserKind::RandomHeuristic => {
            let clickable = screen.clickable_indices();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = *clickable.choose(&mut rng).ok_or(UserSimError::NotClickable(selected))?;
            Ok(Command::new(template(screen, r, selected)?, Origin::RandomAblation, turn))
        }
        UserKind::RepeatC0 => Ok(Command::new(c0.tokens.clone(), Origin::RepeatC0, turn)),
        other => Err(UserSimError::UnsupportedKind(other.name())),
    }
}

/// The object a random-heuristic follow-up drawn with `seed` points at.
pub fn random_target_slot(screen: &Screen, seed: u64) -> Option<usize> {
    let clickable = screen.clickable_indices();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    clickable.choose(&mut rng).copied()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::screen::fixtures::*;
    use crate::screen::ObjType;
    use crate::vocab::Vocab;

    fn joined(w: &[String]) -> String {
        w.join(" ")
    }

    fn bbox_at(cx: f64, cy: f64) -> BBox {
        BBox::new(cx - 0.02, cy - 0.02, cx + 0.02, cy + 0.02)
    }

    #[test]
    fn descriptor_priority() {
        let mut o = obj(0, [0.0, 0.0, 0.1, 0.1], ObjType::Button, true, &["sign", "in"]);
        assert_eq!(descriptor(&o), ["sign", "in"]);
        o.text.clear();
        o.resource_id = vec!["login".into(), "icon".into()];
        assert_eq!(descriptor(&o), ["login", "icon"]);
        o.resource_id.clear();
        o.obj_type = ObjType::Icon;
        assert_eq!(descriptor(&o), ["icon"]);
        o.obj_type = ObjType::ListItem;
        assert_eq!(descriptor(&o), ["list", "item"]);
    }

    #[test]
    fn absolute_phrase_far_target() {
        let p = spatial_phrase(&bbox_at(0.2, 0.9), &bbox_at(0.8, 0.1));
        assert_eq!(p.mode, SpatialMode::Absolute);
        assert_eq!(joined(&p.words), "top right of the screen");
    }

    #[test]
    fn relative_phrase_slight_both() {
        let p = spatial_phrase(&bbox_at(0.4, 0.4), &bbox_at(0.5, 0.55));
        assert_eq!(p.mode, SpatialMode::Relative);
        assert_eq!(joined(&p.words), "slight right and below of your choice");
    }

    #[test]
    fn relative_phrase_mixed_strength() {
        let p = spatial_phrase(&bbox_at(0.2, 0.5), &bbox_at(0.5, 0.6));
        assert_eq!(joined(&p.words), "right and slight below of your choice");
        let p = spatial_phrase(&bbox_at(0.5, 0.5), &bbox_at(0.52, 0.2));
        assert_eq!(joined(&p.words), "above of your choice");
    }

    #[test]
    fn degenerate_overlap() {
        let b = bbox_at(0.5, 0.5);
        let p = spatial_phrase(&b, &b);
        assert_eq!(p.mode, SpatialMode::Relative);
        assert_eq!(joined(&p.words), "right there same spot of your choice");
    }

    fn paper_screen() -> Screen {
        let mut s = five_object_screen();
        // icon bottom-left, target "action notifications" top-right
        s.objects[4] = obj(4, [0.15, 0.85, 0.25, 0.95], ObjType::Icon, true, &[]);
        s.objects.push(obj(5, [0.75, 0.05, 0.85, 0.15], ObjType::Button, true, &["action", "notifications"]));
        // a text selection next to an "input search" target
        s.objects.push(obj(6, [0.3, 0.35, 0.5, 0.45], ObjType::Text, true, &[]));
        let mut search = obj(7, [0.4, 0.5, 0.6, 0.6], ObjType::Input, true, &[]);
        search.resource_id = vec!["input".into(), "search".into()];
        s.objects.push(search);
        s
    }

    #[test]
    fn heuristic_followups_match_template_examples() {
        let s = paper_screen();
        let c = heuristic_followup(&s, 5, 4, 1).unwrap();
        assert_eq!(c.text(), "not the icon click the action notifications on the top right of the screen");
        assert_eq!(c.origin, Origin::Heuristic);
        let c = heuristic_followup(&s, 7, 6, 1).unwrap();
        assert_eq!(c.text(), "not the text click the input search to the slight right and below of your choice");
        assert_eq!(heuristic_followup(&s, 5, 5, 1), Err(UserSimError::SelectionIsTarget));
    }

    #[test]
    fn initial_instructions() {
        let s = five_object_screen();
        let c = initial_instruction(&s, 3, InstructionStyle::Full, 0).unwrap();
        assert_eq!(c.text(), "click the search");
        let c = initial_instruction(&s, 2, InstructionStyle::Full, 0).unwrap();
        assert_eq!(c.text(), "click the ok on the top right of the screen");
        // the two "ok" buttons: "ok" and "button" are both shared
        for seed in 0..20 {
            let c = initial_instruction(&s, 1, InstructionStyle::Underspecified, seed).unwrap();
            let desc = &c.tokens[2..];
            assert!(clickable_matches(&s, desc).len() >= 2, "{}", c.text());
        }
        assert_eq!(
            initial_instruction(&s, 3, InstructionStyle::Underspecified, 0),
            Err(UserSimError::NoAmbiguity(3))
        );
        assert_eq!(initial_instruction(&s, 0, InstructionStyle::Full, 0), Err(UserSimError::NotClickable(0)));
    }

    #[test]
    fn ablation_users() {
        let s = five_object_screen();
        let c0 = initial_instruction(&s, 1, InstructionStyle::Underspecified, 3).unwrap();
        let r = ablation_followup(UserKind::RepeatC0, &s, 2, &c0, 9, 1).unwrap();
        assert_eq!(r.tokens, c0.tokens);
        assert_eq!(r.origin, Origin::RepeatC0);
        let a = ablation_followup(UserKind::RandomHeuristic, &s, 2, &c0, 9, 1).unwrap();
        let b = ablation_followup(UserKind::RandomHeuristic, &s, 2, &c0, 9, 1).unwrap();
        assert_eq!(a, b);
        assert!(ablation_followup(UserKind::Heuristic, &s, 2, &c0, 9, 1).is_err());
    }

    #[test]
    fn random_slot_frequency_matches_uniform_rate() {
        let s = paper_screen();
        let n = s.clickable_indices().len() as f64;
        let trials = 20_000u64;
        let hits = (0..trials).filter(|&seed| random_target_slot(&s, seed) == Some(5)).count() as f64;
        let rate = hits / trials as f64;
        // binomial sd ~ 0.0023 at p = 1/7
        assert!((rate - 1.0 / n).abs() < 0.012, "rate {rate} vs {}", 1.0 / n);
    }

    #[test]
    fn generated_tokens_are_in_vocab() {
        let v = Vocab::bundled();
        let s = paper_screen();
        for g in s.clickable_indices() {
            for a in s.clickable_indices() {
                if a != g {
                    let c = heuristic_followup(&s, g, a, 1).unwrap();
                    assert!(c.tokens.len() <= crate::screen::MAX_COMMAND_TOKENS);
                    assert!(c.tokens.iter().all(|t| v.contains(t)), "{}", c.text());
                }
            }
        }
    }
}
