//! Synthetic screen corpus.
//!
//! Screens are laid out like mobile apps (top bar, body, optional bottom
//! bar) from a small set of archetypes. The app identity is a bucket over
//! (archetype, text domain), so screens of one app share structure and
//! wording. Repeated controls ("share" on every card, "more" icons on every
//! row, unlabeled toggles) make descriptors collide, which is where
//! multi-turn sessions come from.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::screen::{AgentKind, BBox, Command, Corpus, ObjType, Origin, Screen, Session, SplitTag, Turn, UiObject};
use crate::usersim::{
    ambiguous_descriptors, clickable_matches, descriptor, descriptor_alternatives, heuristic_followup,
    initial_instruction, region_words, spatial_phrase_with, InstructionStyle, SpatialThresholds, UserSimError,
};
use crate::vocab::Vocab;

#[derive(Debug, Error, PartialEq)]
pub enum GenError {
    #[error("object count range must allow at least 2 objects, got {0}..={1}")]
    ObjectRange(usize, usize),
    #[error("target {0} is not clickable")]
    TargetNotClickable(usize),
    #[error("no ambiguity available for target {0}")]
    NoAmbiguity(usize),
    #[error("session of {0} turns needs at least {0} clickable objects")]
    TooFewClickable(usize),
    #[error("turn count must be in 1..=5, got {0}")]
    TurnCount(usize),
    #[error("could not build a non-repeating follow-up at turn {0}")]
    NoFreshFollowup(usize),
    #[error(transparent)]
    User(#[from] UserSimError),
}

/// Archetypes of synthetic layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Archetype {
    List,
    Form,
    Grid,
    Settings,
    Feed,
    Login,
    Shop,
    Player,
}

const ARCHETYPES: [Archetype; 8] = [
    Archetype::List,
    Archetype::Form,
    Archetype::Grid,
    Archetype::Settings,
    Archetype::Feed,
    Archetype::Login,
    Archetype::Shop,
    Archetype::Player,
];

impl Archetype {
    fn name(self) -> &'static str {
        match self {
            Archetype::List => "list",
            Archetype::Form => "form",
            Archetype::Grid => "grid",
            Archetype::Settings => "settings",
            Archetype::Feed => "feed",
            Archetype::Login => "login",
            Archetype::Shop => "shop",
            Archetype::Player => "player",
        }
    }

    fn has_bottom_bar(self) -> bool {
        matches!(self, Archetype::List | Archetype::Grid | Archetype::Feed | Archetype::Shop | Archetype::Player)
    }
}

/// Text domains: single-word and two-word labels an app of that kind shows.
const DOMAINS: [&[&str]; 8] = [
    &["inbox", "sent", "drafts", "spam", "trash", "archive", "compose", "reply", "forward", "contacts", "new message", "all mail", "starred", "search mail"],
    &["cart", "checkout", "orders", "offers", "deals", "coupon", "wallet", "product details", "add to cart", "buy now", "track order", "returns", "reviews", "categories"],
    &["songs", "albums", "artist", "playlist", "radio", "podcast", "library", "recent", "favorites", "play all", "new playlist", "top songs", "live radio", "downloads"],
    &["flights", "hotels", "trips", "booking", "tickets", "map", "nearby", "directions", "check in", "boarding pass", "my trips", "saved places", "car rental", "guests"],
    &["balance", "transfer", "deposit", "payments", "bills", "budget", "savings", "card details", "pay bill", "send money", "transactions", "stocks", "exchange rate", "loan"],
    &["workout", "steps", "calories", "water", "sleep", "heart rate", "progress", "start workout", "daily goal", "weight", "diet", "exercise", "my stats", "schedule"],
    &["feed", "friends", "messages", "groups", "events", "photos", "videos", "followers", "following", "invite friends", "new post", "my profile", "live", "stories"],
    &["news", "top stories", "local", "weather", "sports", "technology", "business", "health", "saved", "trending", "read more", "latest news", "world", "video"],
];

/// Labels that recur on many rows of one screen.
const REPEATED_BUTTONS: [&str; 8] = ["share", "like", "add", "more", "edit", "delete", "follow", "save"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_clickable_fraction: f64,
    /// Number of app buckets (each bucket fixes archetype and text domain).
    pub num_apps: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { min_objects: 8, max_objects: 32, min_clickable_fraction: 0.6, num_apps: 96 }
    }
}

struct Builder {
    objects: Vec<UiObject>,
    parent: Vec<Option<usize>>,
}

impl Builder {
    fn push(&mut self, parent: Option<usize>, bbox: BBox, ty: ObjType, clickable: bool, text: &str, rid: &str) -> usize {
        let index = self.objects.len();
        let toks = |s: &str| s.split_whitespace().map(str::to_owned).collect::<Vec<_>>();
        self.objects.push(UiObject {
            index,
            bbox,
            obj_type: ty,
            clickable,
            leaf: true,
            text: toks(text),
            resource_id: toks(&rid.replace('_', " ")),
            dom_pre: index,
            dom_post: 0,
        });
        self.parent.push(parent);
        if let Some(p) = parent {
            self.objects[p].leaf = false;
        }
        index
    }

    /// Post-order indices for nodes stored in pre-order with parent links.
    fn finish(mut self) -> Vec<UiObject> {
        let n = self.objects.len();
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut roots = Vec::new();
        for (i, p) in self.parent.iter().enumerate() {
            match p {
                Some(p) => children[*p].push(i),
                None => roots.push(i),
            }
        }
        let mut counter = 0;
        fn visit(i: usize, children: &[Vec<usize>], objs: &mut [UiObject], counter: &mut usize) {
            for &c in &children[i] {
                visit(c, children, objs, counter);
            }
            objs[i].dom_post = *counter;
            *counter += 1;
        }
        for r in roots {
            visit(r, &children, &mut self.objects, &mut counter);
        }
        self.objects
    }
}

fn row_cells(y0: f64, y1: f64, n: usize, x0: f64, x1: f64) -> Vec<BBox> {
    let gap = 0.02;
    let w = (x1 - x0 - gap * (n as f64 - 1.0)) / n as f64;
    (0..n)
        .map(|i| {
            let xa = x0 + i as f64 * (w + gap);
            BBox::new(xa, y0, xa + w, y1)
        })
        .collect()
}

/// Deterministic screen for `seed`.
pub fn generate_screen(seed: u64, config: &GeneratorConfig) -> Result<Screen, GenError> {
    if config.min_objects < 2 || config.max_objects < config.min_objects {
        return Err(GenError::ObjectRange(config.min_objects, config.max_objects));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5c2e_e000_0000);
    let bucket = rng.gen_range(0..config.num_apps.max(1));
    let archetype = ARCHETYPES[bucket % ARCHETYPES.len()];
    let domain = DOMAINS[(bucket / ARCHETYPES.len() + bucket) % DOMAINS.len()];
    let app_id = format!("app-{}-{bucket:03}", archetype.name());
    let budget = rng.gen_range(config.min_objects..=config.max_objects);

    let mut b = Builder { objects: Vec::new(), parent: Vec::new() };
    let pick = |rng: &mut ChaCha8Rng| *domain.choose(rng).expect("non-empty domain");

    // top bar
    let top = b.push(None, BBox::new(0.0, 0.0, 1.0, 0.08), ObjType::Other, false, "", "toolbar");
    b.push(Some(top), BBox::new(0.02, 0.015, 0.1, 0.065), ObjType::Icon, true, "", if rng.gen_bool(0.5) { "back" } else { "" });
    b.push(Some(top), BBox::new(0.14, 0.015, 0.6, 0.065), ObjType::Text, false, pick(&mut rng), "title");
    let top_icons = ["search", "more", "share", "settings", "notifications", "menu"];
    for (i, x) in [0.76, 0.88].into_iter().enumerate() {
        if i == 0 || rng.gen_bool(0.6) {
            let rid = *top_icons.choose(&mut rng).unwrap();
            let rid = if rng.gen_bool(0.3) { "" } else { rid };
            b.push(Some(top), BBox::new(x, 0.015, x + 0.09, 0.065), ObjType::Icon, true, "", rid);
        }
    }

    let bottom_tabs = if archetype.has_bottom_bar() { rng.gen_range(3..=5) } else { 0 };
    let reserve = if bottom_tabs > 0 { bottom_tabs + 1 } else { 0 };
    let body_budget = budget.saturating_sub(b.objects.len() + reserve + 1).max(2);
    let body_bottom = if bottom_tabs > 0 { 0.91 } else { 0.99 };
    let body = b.push(None, BBox::new(0.0, 0.09, 1.0, body_bottom), ObjType::Other, false, "", "content");

    // Body rows: each row is a list of (type, clickable, text, rid) cells.
    type Cell = (ObjType, bool, String, String);
    let mut rows: Vec<Vec<Cell>> = Vec::new();
    let mut used = 0usize;
    let repeated = *REPEATED_BUTTONS.choose(&mut rng).unwrap();
    let c = |t: ObjType, cl: bool, text: &str, rid: &str| (t, cl, text.to_owned(), rid.to_owned());
    while used < body_budget {
        let left = body_budget - used;
        let row: Vec<Cell> = match archetype {
            Archetype::List => {
                let mut r = vec![c(ObjType::ListItem, true, pick(&mut rng), "")];
                if left >= 2 && rng.gen_bool(0.5) {
                    r.push(c(ObjType::Icon, true, "", if rng.gen_bool(0.5) { "more" } else { "" }));
                }
                r
            }
            Archetype::Form => {
                if left >= 3 && rng.gen_bool(0.25) {
                    vec![c(ObjType::Button, true, "ok", ""), c(ObjType::Button, true, "cancel", "")]
                } else if left >= 2 {
                    let w = pick(&mut rng);
                    vec![c(ObjType::Text, false, w, "label"), c(ObjType::Input, true, "", &w.replace(' ', "_"))]
                } else {
                    vec![c(ObjType::Button, true, "submit", "")]
                }
            }
            Archetype::Grid => {
                let cols = left.clamp(1, 3);
                (0..cols)
                    .map(|_| {
                        if rng.gen_bool(0.5) {
                            c(ObjType::Image, true, "", "thumbnail")
                        } else {
                            c(ObjType::Image, true, pick(&mut rng), "")
                        }
                    })
                    .collect()
            }
            Archetype::Settings => {
                let mut r = vec![c(ObjType::Text, true, pick(&mut rng), "")];
                if left >= 2 {
                    let ty = if rng.gen_bool(0.6) { ObjType::Toggle } else { ObjType::Checkbox };
                    r.push(c(ty, true, "", ""));
                }
                r
            }
            Archetype::Feed => {
                let mut r = vec![c(ObjType::Text, false, pick(&mut rng), "post")];
                for _ in 0..left.saturating_sub(1).min(2) {
                    r.push(c(ObjType::Button, true, repeated, ""));
                }
                if r.len() == 3 {
                    r[2] = c(ObjType::Button, true, "comment", "");
                }
                r
            }
            Archetype::Login => {
                let opts: [Cell; 6] = [
                    c(ObjType::Input, true, "", "username"),
                    c(ObjType::Input, true, "", "password"),
                    c(ObjType::Button, true, "login", ""),
                    c(ObjType::Text, true, "forgot password", ""),
                    c(ObjType::Button, true, "sign up", ""),
                    c(ObjType::Checkbox, true, "", "remember"),
                ];
                vec![opts[rows.len() % opts.len()].clone()]
            }
            Archetype::Shop => {
                let mut r = vec![c(ObjType::Image, true, "", "product"), c(ObjType::Text, false, pick(&mut rng), "price")];
                if left >= 3 {
                    r.push(c(ObjType::Button, true, "add", ""));
                }
                r.truncate(left);
                r
            }
            Archetype::Player => {
                if rows.is_empty() {
                    vec![c(ObjType::Image, false, "", "album")]
                } else if rows.len() == 1 && left >= 3 {
                    vec![
                        c(ObjType::Icon, true, "", "previous"),
                        c(ObjType::Icon, true, "", "play"),
                        c(ObjType::Icon, true, "", "next"),
                    ]
                } else {
                    vec![c(ObjType::ListItem, true, pick(&mut rng), ""), c(ObjType::Icon, true, "", "")]
                        .into_iter()
                        .take(left)
                        .collect()
                }
            }
        };
        used += row.len();
        rows.push(row);
    }
    let n_rows = rows.len().max(1);
    let row_h = ((body_bottom - 0.1) / n_rows as f64).min(0.12);
    for (r, row) in rows.iter().enumerate() {
        let y0 = 0.1 + r as f64 * row_h;
        let y1 = y0 + row_h * 0.85;
        for (cell, bbox) in row.iter().zip(row_cells(y0, y1, row.len(), 0.04, 0.96)) {
            b.push(Some(body), bbox, cell.0, cell.1, &cell.2, &cell.3);
        }
    }

    if bottom_tabs > 0 {
        let bar = b.push(None, BBox::new(0.0, 0.92, 1.0, 1.0), ObjType::Other, false, "", "bottom_navigation");
        let labels = ["home", "search", "library", "profile", "settings", "favorites", "explore"];
        let mut chosen: Vec<&str> = labels.to_vec();
        chosen.shuffle(&mut rng);
        for (i, bbox) in row_cells(0.93, 0.99, bottom_tabs, 0.02, 0.98).into_iter().enumerate() {
            let label = if rng.gen_bool(0.85) { chosen[i] } else { "" };
            b.push(Some(bar), bbox, ObjType::Tab, true, label, "tab");
        }
    }

    let mut objects = b.finish();
    // Trim to the object budget from the end of the body, never the bars.
    while objects.len() > config.max_objects {
        let drop = objects
            .iter()
            .rposition(|o| o.leaf && o.obj_type != ObjType::Tab && o.bbox.ymin > 0.09)
            .unwrap_or(objects.len() - 1);
        remove_object(&mut objects, drop);
    }
    // Top up clickability with the non-clickable leaves.
    let need = (config.min_clickable_fraction * objects.len() as f64).ceil() as usize;
    let mut have = objects.iter().filter(|o| o.clickable).count();
    for o in objects.iter_mut() {
        if have >= need {
            break;
        }
        if !o.clickable && o.leaf {
            o.clickable = true;
            have += 1;
        }
    }
    Ok(Screen {
        screen_id: format!("s{seed}"),
        app_id,
        width_px: 1440,
        height_px: 2560,
        objects,
    })
}

fn remove_object(objects: &mut Vec<UiObject>, at: usize) {
    objects.remove(at);
    for (i, o) in objects.iter_mut().enumerate() {
        o.index = i;
        o.dom_pre = i;
    }
    // Post-order ranks stay a permutation after renumbering.
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by_key(|&i| objects[i].dom_post);
    for (rank, i) in order.into_iter().enumerate() {
        objects[i].dom_post = rank;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "style", content = "turns")]
pub enum GoldStyle {
    OneTurn,
    /// Ambiguous opening command followed by corrective turns; the value is
    /// the total number of turns (2..=5).
    AmbiguousMultiTurn(usize),
}

/// Follow-up categories of human corrective turns with their mixture
/// weights (percent).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FollowupCategory {
    RelativePosition,
    AddedInfo,
    AbsolutePosition,
    Rephrase,
    Other,
}

pub const FOLLOWUP_MIX: [(FollowupCategory, f64); 5] = [
    (FollowupCategory::RelativePosition, 50.0),
    (FollowupCategory::AddedInfo, 31.0),
    (FollowupCategory::AbsolutePosition, 10.0),
    (FollowupCategory::Rephrase, 3.0),
    (FollowupCategory::Other, 6.0),
];

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

fn sample_category(rng: &mut ChaCha8Rng) -> FollowupCategory {
    let total: f64 = FOLLOWUP_MIX.iter().map(|(_, w)| w).sum();
    let mut u = rng.gen::<f64>() * total;
    for (c, w) in FOLLOWUP_MIX {
        if u < w {
            return c;
        }
        u -= w;
    }
    FollowupCategory::Other
}

/// A corrective command of the given category after the wrong selection
/// `selected`.
pub fn gold_followup(
    screen: &Screen,
    target: usize,
    selected: usize,
    category: FollowupCategory,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<String>, GenError> {
    let g = &screen.objects[target];
    let sel = &screen.objects[selected];
    let desc = descriptor(g);
    let mut t = words("click the");
    match category {
        FollowupCategory::RelativePosition => {
            let forced = SpatialThresholds { absolute: f64::INFINITY, ..Default::default() };
            t.extend(desc);
            t.extend(words("to the"));
            t.extend(spatial_phrase_with(&sel.bbox, &g.bbox, &forced).words);
        }
        FollowupCategory::AddedInfo => {
            let ty = g.obj_type.tokens();
            if desc != ty {
                t.extend(desc);
                t.extend(ty);
            } else {
                // Type-only objects: anchor on the nearest labeled neighbour.
                let (gx, gy) = g.bbox.center();
                let anchor = screen
                    .objects
                    .iter()
                    .filter(|o| o.index != target && !o.text.is_empty())
                    .min_by(|a, b| {
                        let d = |o: &UiObject| {
                            let (x, y) = o.bbox.center();
                            (x - gx).powi(2) + (y - gy).powi(2)
                        };
                        d(a).total_cmp(&d(b))
                    });
                t.extend(ty);
                if let Some(a) = anchor {
                    t.extend(words("near the"));
                    t.extend(descriptor(a));
                }
            }
        }
        FollowupCategory::AbsolutePosition => {
            let (x, y) = g.bbox.center();
            t.extend(desc);
            t.extend(words("on the"));
            t.extend(region_words(x, y));
            t.extend(words("of the screen"));
        }
        FollowupCategory::Rephrase => {
            let verbs = ["show me", "open", "go to", "tap", "select"];
            t = words(verbs.choose(rng).unwrap());
            let alts = descriptor_alternatives(g);
            let alt = alts.iter().rev().find(|d| **d != desc).cloned().unwrap_or(desc);
            t.extend(alt);
        }
        FollowupCategory::Other => {
            t = heuristic_followup(screen, target, selected, 0)?.tokens;
        }
    }
    Ok(t)
}

/// A recorded-style session on `screen` targeting `target`.
pub fn generate_gold_session(screen: &Screen, target: usize, seed: u64, style: GoldStyle) -> Result<Session, GenError> {
    if !screen.is_clickable(target) {
        return Err(GenError::TargetNotClickable(target));
    }
    let session_id = format!("{}-t{target}-{seed:x}", screen.screen_id);
    let human = |tokens: Vec<String>, turn: usize, action: usize| Turn {
        command: Command::new(tokens, Origin::Human, turn),
        action,
        agent_kind: AgentKind::HumanRecord,
    };
    let turns = match style {
        GoldStyle::OneTurn => {
            let c0 = initial_instruction(screen, target, InstructionStyle::Full, seed)?;
            vec![human(c0.tokens, 0, target)]
        }
        GoldStyle::AmbiguousMultiTurn(n) => {
            if !(2..=crate::screen::MAX_TURNS).contains(&n) {
                return Err(GenError::TurnCount(n));
            }
            if screen.clickable_indices().len() < n {
                return Err(GenError::TooFewClickable(n));
            }
            let c0 = match initial_instruction(screen, target, InstructionStyle::Underspecified, seed) {
                Ok(c) => c,
                Err(UserSimError::NoAmbiguity(_)) => return Err(GenError::NoAmbiguity(target)),
                Err(e) => return Err(e.into()),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xf011);
            let c0_desc = &c0.tokens[2..];
            let (gx, gy) = screen.objects[target].bbox.center();
            let dist = |i: usize| {
                let (x, y) = screen.objects[i].bbox.center();
                (x - gx).powi(2) + (y - gy).powi(2)
            };
            // Wrong selections: c_0 matches first (seeded order), then the
            // clickable objects closest to the target.
            let mut matching: Vec<usize> = clickable_matches(screen, c0_desc).into_iter().filter(|&i| i != target).collect();
            matching.shuffle(&mut rng);
            let mut rest: Vec<usize> = screen
                .clickable_indices()
                .into_iter()
                .filter(|i| *i != target && !matching.contains(i))
                .collect();
            rest.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
            let wrong: Vec<usize> = matching.into_iter().chain(rest).take(n - 1).collect();

            let mut turns = vec![human(c0.tokens.clone(), 0, wrong[0])];
            for t in 1..n {
                let selected = turns[t - 1].action;
                let first = sample_category(&mut rng);
                let order = std::iter::once(first).chain(FOLLOWUP_MIX.iter().map(|(c, _)| *c));
                let mut fresh = None;
                for cat in order {
                    let tokens = gold_followup(screen, target, selected, cat, &mut rng)?;
                    if turns.iter().all(|x| x.command.tokens != tokens) {
                        fresh = Some(tokens);
                        break;
                    }
                }
                let tokens = fresh.ok_or(GenError::NoFreshFollowup(t))?;
                let action = if t == n - 1 { target } else { wrong[t] };
                turns.push(human(tokens, t, action));
            }
            turns
        }
    };
    Ok(Session {
        session_id,
        screen_id: screen.screen_id.clone(),
        target,
        turns,
        completed: true,
        split_tag: SplitTag::None,
    })
}

/// Turn-count distribution of recorded sessions, turns 1..=5, in percent.
pub const TURN_DISTRIBUTION: [f64; 5] = [79.10, 18.15, 2.35, 0.35, 0.06];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub num_screens: usize,
    /// Mean sessions per screen; the integer part always, the fraction with
    /// that probability.
    pub sessions_per_screen: f64,
    pub turn_weights: [f64; 5],
    /// Restrict to single-turn sessions whose opening command names exactly
    /// one clickable object.
    pub unique_one_turn_only: bool,
    pub generator: GeneratorConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            num_screens: 1000,
            sessions_per_screen: 2.5,
            turn_weights: TURN_DISTRIBUTION,
            unique_one_turn_only: false,
            generator: GeneratorConfig::default(),
        }
    }
}

fn sample_turns(rng: &mut ChaCha8Rng, w: &[f64; 5]) -> usize {
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i + 1;
        }
        u -= wi;
    }
    5
}

/// Whether the full opening command for `target` picks out exactly that
/// object among the clickable ones.
pub fn full_instruction_is_unique(screen: &Screen, target: usize) -> bool {
    let g = &screen.objects[target];
    let d = descriptor(g);
    let same: Vec<usize> = clickable_matches(screen, &d);
    if same.len() <= 1 {
        return true;
    }
    let (x, y) = g.bbox.center();
    let region = region_words(x, y);
    same.iter().filter(|&&i| {
        let (ox, oy) = screen.objects[i].bbox.center();
        region_words(ox, oy) == region
    }).count()
        == 1
}

/// Generates screens with seeds `seed * 1_000_003 + k` and their sessions.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus, GenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut corpus = Corpus { vocab: Vocab::bundled().tokens().to_vec(), ..Default::default() };
    let mut pending: VecDeque<usize> = VecDeque::new();
    for k in 0..config.num_screens {
        let screen_seed = config.seed.wrapping_mul(1_000_003).wrapping_add(k as u64);
        let screen = generate_screen(screen_seed, &config.generator)?;
        let whole = config.sessions_per_screen.floor() as usize;
        let extra = rng.gen_bool(config.sessions_per_screen.fract().clamp(0.0, 1.0));
        let count = whole + usize::from(extra);

        let mut clickable = screen.clickable_indices();
        clickable.shuffle(&mut rng);
        let mut used = Vec::new();
        for _ in 0..count {
            let sess_seed = rng.gen::<u64>();
            let wanted = if config.unique_one_turn_only { 1 } else { sample_turns(&mut rng, &config.turn_weights) };
            if wanted > 1 {
                pending.push_back(wanted);
            }
            // Serve the oldest multi-turn request this screen can host.
            let mut made = None;
            if let Some(pos) = pending.iter().position(|&n| clickable.len() >= n) {
                let n = pending[pos];
                let cand = clickable
                    .iter()
                    .copied()
                    .find(|&g| !used.contains(&g) && ambiguous_descriptors(&screen, g).is_ok_and(|d| !d.is_empty()));
                if let Some(g) = cand {
                    if let Ok(s) = generate_gold_session(&screen, g, sess_seed, GoldStyle::AmbiguousMultiTurn(n)) {
                        pending.remove(pos);
                        used.push(g);
                        made = Some(s);
                    }
                }
            }
            let session = match made {
                Some(s) => s,
                None => {
                    let cand = clickable.iter().copied().find(|&g| {
                        !used.contains(&g) && (!config.unique_one_turn_only || full_instruction_is_unique(&screen, g))
                    });
                    let Some(g) = cand else { continue };
                    used.push(g);
                    generate_gold_session(&screen, g, sess_seed, GoldStyle::OneTurn)?
                }
            };
            corpus.sessions.push(session);
        }
        corpus.screens.insert(screen.screen_id.clone(), screen);
    }
    Ok(corpus)
}

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    Ratios([f64; 3]),
    #[error("{apps} apps cannot fill {splits} splits")]
    TooFewApps { apps: usize, splits: usize },
}

/// Assigns every session a split so that each app lands in exactly one.
///
/// Apps are visited largest first (ties by app id) and each goes to the
/// split furthest below its target share, which keeps session proportions
/// close to `ratios` when apps are small relative to the corpus.
pub fn split_corpus(mut corpus: Corpus, ratios: [f64; 3]) -> Result<Corpus, SplitError> {
    if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SplitError::Ratios(ratios));
    }
    let mut per_app: BTreeMap<String, usize> = BTreeMap::new();
    for s in &corpus.sessions {
        if let Some(screen) = corpus.screens.get(&s.screen_id) {
            *per_app.entry(screen.app_id.clone()).or_default() += 1;
        }
    }
    if per_app.len() < ratios.len() {
        return Err(SplitError::TooFewApps { apps: per_app.len(), splits: ratios.len() });
    }
    let mut apps: Vec<(String, usize)> = per_app.into_iter().collect();
    apps.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tags = [SplitTag::Train, SplitTag::Dev, SplitTag::Test];
    let total: usize = apps.iter().map(|a| a.1).sum();
    let mut filled = [0usize; 3];
    let mut assigned: BTreeMap<String, SplitTag> = BTreeMap::new();
    for (i, (app, n)) in apps.iter().enumerate() {
        // Every split gets at least one app.
        let remaining_apps = apps.len() - i;
        let empty: Vec<usize> = (0..3).filter(|&k| filled[k] == 0).collect();
        let k = if empty.len() >= remaining_apps {
            empty[0]
        } else {
            (0..3)
                .max_by(|&a, &b| {
                    let deficit = |k: usize| ratios[k] * total as f64 - filled[k] as f64;
                    deficit(a).total_cmp(&deficit(b)).then(b.cmp(&a))
                })
                .expect("three splits")
        };
        filled[k] += n;
        assigned.insert(app.clone(), tags[k]);
    }
    for s in corpus.sessions.iter_mut() {
        let app = corpus.screens.get(&s.screen_id).map(|sc| sc.app_id.as_str());
        s.split_tag = app.and_then(|a| assigned.get(a)).copied().unwrap_or(SplitTag::None);
    }
    Ok(corpus)
}

/// Sessions whose gold trajectory needed more than one turn.
pub fn challenging_subset(sessions: &[Session]) -> Vec<Session> {
    sessions.iter().filter(|s| s.turns.len() > 1).cloned().collect()
}
