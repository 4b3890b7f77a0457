//! Offline replay, closed-loop online episodes, and the metrics.
//!
//! F1@t is the fraction of episodes whose earliest success turn is at most
//! `t` (a completion-rate CDF with early stop). Γ is the fraction of
//! episodes in which the agent picked the same object twice under
//! instructions that are unique within the episode.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{
    adjust_returns_test_time, build_decoder_input, encode_screen, logits_for, select_action, AgentError, Model, Variant,
};
use crate::encoder::{screen_features, EncodeError};
use crate::screen::{Command, Corpus, Origin, Screen, Session, SplitTag, MAX_TURNS};
use crate::train::command_ids;
use crate::usersim::{ablation_followup, heuristic_followup, UserKind, UserSimError};
use crate::vocab::{hex, Vocab};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no episodes to score")]
    Empty,
    #[error("turn {0} outside 0..={max}", max = MAX_TURNS - 1)]
    TurnRange(usize),
    #[error("session {session}: {source}")]
    Session { session: String, source: Box<EvalError> },
    #[error("unknown screen {0}")]
    UnknownScreen(String),
    #[error("agent has no answer for {0}")]
    NoAnswer(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    User(#[from] UserSimError),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

/// What an agent sees before acting: the screen and the history, never the
/// target.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub session_id: &'a str,
    pub screen: &'a Screen,
    /// Commands `c_0..=c_t`.
    pub commands: &'a [Vec<String>],
    /// Actions `a_0..a_{t-1}`.
    pub actions: &'a [usize],
}

impl Observation<'_> {
    pub fn turn(&self) -> usize {
        self.commands.len() - 1
    }
}

/// A grounding agent: one logit per object of the screen.
pub trait Agent: Sync {
    fn id(&self) -> String;

    fn variant(&self) -> Option<Variant> {
        None
    }

    fn logits(&self, obs: &Observation<'_>) -> Result<Vec<f64>, EvalError>;
}

/// Reads the target from a table keyed by session id.
#[derive(Debug, Clone, Default)]
pub struct OracleAgent {
    pub targets: HashMap<String, usize>,
}

impl OracleAgent {
    pub fn from_sessions<'a>(sessions: impl IntoIterator<Item = &'a Session>) -> Self {
        Self { targets: sessions.into_iter().map(|s| (s.session_id.clone(), s.target)).collect() }
    }
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    (0..n).map(|j| if j == i { 1.0 } else { 0.0 }).collect()
}

impl Agent for OracleAgent {
    fn id(&self) -> String {
        "oracle".into()
    }

    fn logits(&self, obs: &Observation<'_>) -> Result<Vec<f64>, EvalError> {
        let g = self.targets.get(obs.session_id).ok_or_else(|| EvalError::NoAnswer(obs.session_id.to_owned()))?;
        Ok(one_hot(obs.screen.objects.len(), *g))
    }
}

/// Always prefers the same object, then lower indices.
#[derive(Debug, Clone, Copy)]
pub struct ConstantAgent(pub usize);

impl Agent for ConstantAgent {
    fn id(&self) -> String {
        format!("constant-{}", self.0)
    }

    fn logits(&self, obs: &Observation<'_>) -> Result<Vec<f64>, EvalError> {
        let n = obs.screen.objects.len();
        Ok((0..n).map(|j| if j == self.0 { 2.0 } else { -(j as f64) / n as f64 }).collect())
    }
}

/// Independent uniform logits per (session, turn).
#[derive(Debug, Clone, Copy)]
pub struct RandomAgent {
    pub seed: u64,
}

impl Agent for RandomAgent {
    fn id(&self) -> String {
        format!("random-{}", self.seed)
    }

    fn logits(&self, obs: &Observation<'_>) -> Result<Vec<f64>, EvalError> {
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(self.seed, obs.session_id, obs.turn()));
        Ok((0..obs.screen.objects.len()).map(|_| rng.gen::<f64>()).collect())
    }
}

/// Hand-set logits per (session, turn), for tests and audits.
#[derive(Debug, Clone, Default)]
pub struct TableAgent {
    pub table: HashMap<(String, usize), Vec<f64>>,
}

impl Agent for TableAgent {
    fn id(&self) -> String {
        "table".into()
    }

    fn logits(&self, obs: &Observation<'_>) -> Result<Vec<f64>, EvalError> {
        self.table
            .get(&(obs.session_id.to_owned(), obs.turn()))
            .cloned()
            .ok_or_else(|| EvalError::NoAnswer(format!("{} turn {}", obs.session_id, obs.turn())))
    }
}

/// A trained model driving one variant. Screen encodings are cached by
/// screen id.
pub struct ModelAgent<'m> {
    model: &'m Model,
    variant: Variant,
    vocab: &'m Vocab,
    cache: Mutex<HashMap<String, Arc<crate::tensor::Tensor>>>,
}

const CACHE_LIMIT: usize = 512;

impl<'m> ModelAgent<'m> {
    pub fn new(model: &'m Model, variant: Variant, vocab: &'m Vocab) -> Self {
        Self { model, variant, vocab, cache: Mutex::new(HashMap::new()) }
    }

    fn encoded(&self, screen: &Screen) -> Result<Arc<crate::tensor::Tensor>, EvalError> {
        if let Some(v) = self.cache.lock().expect("cache lock").get(&screen.screen_id) {
            return Ok(v.clone());
        }
        let f = screen_features(screen, self.vocab, &self.model.config)?;
        let v = Arc::new(encode_screen(self.model, &f));
        let mut cache = self.cache.lock().expect("cache lock");
        if cache.len() >= CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(screen.screen_id.clone(), v.clone());
        Ok(v)
    }
}

impl Agent for ModelAgent<'_> {
    fn id(&self) -> String {
        format!("model-{}", self.variant)
    }

    fn variant(&self) -> Option<Variant> {
        Some(self.variant)
    }

    fn logits(&self, obs: &Observation<'_>) -> Result<Vec<f64>, EvalError> {
        let v = self.encoded(obs.screen)?;
        let cmds: Vec<Vec<usize>> = obs.commands.iter().map(|c| command_ids(self.vocab, c)).collect();
        let returns = (self.variant == Variant::OfflineRl).then(|| adjust_returns_test_time(obs.turn()));
        let input = build_decoder_input(self.variant, &cmds, obs.actions, returns.as_deref())?;
        Ok(logits_for(self.model, &v, &input)?)
    }
}

/// Seed for per-episode, per-turn randomness, independent of evaluation
/// order.
pub fn episode_seed(seed: u64, session_id: &str, turn: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(session_id.as_bytes());
    h.update((turn as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn logits_digest(logits: &[f64]) -> String {
    let mut h = Sha256::new();
    for l in logits {
        h.update(l.to_le_bytes());
    }
    hex(&h.finalize()[..16])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Offline,
    Online,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "offline" => Ok(Mode::Offline),
            "online" => Ok(Mode::Online),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeTurn {
    pub command: Vec<String>,
    pub origin: Origin,
    pub action: usize,
    pub correct: bool,
    pub logits_digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub session_id: String,
    pub mode: Mode,
    /// Absent for offline replay, where commands come from the record.
    pub user: Option<UserKind>,
    pub agent: String,
    pub variant: Option<Variant>,
    pub turns: Vec<EpisodeTurn>,
    pub success_turn: Option<usize>,
    pub failure: Option<String>,
}

impl EpisodeRecord {
    /// Turn count within the cap and a success turn equal to the first
    /// correct turn, which is also the last.
    pub fn is_consistent(&self) -> bool {
        let first = self.turns.iter().position(|t| t.correct);
        self.turns.len() <= MAX_TURNS
            && first == self.success_turn
            && first.is_none_or(|f| f + 1 == self.turns.len())
    }
}

fn act(agent: &dyn Agent, obs: &Observation<'_>, mask: bool) -> Result<(usize, String), EvalError> {
    let logits = agent.logits(obs)?;
    let forbidden: &[usize] = if mask { obs.actions } else { &[] };
    let non_clickable: Vec<usize> = (0..obs.screen.objects.len()).filter(|&i| !obs.screen.is_clickable(i)).collect();
    let a = select_action(&logits, forbidden, &non_clickable)?;
    Ok((a, logits_digest(&logits)))
}

/// Replays a recorded session: at turn `t` the agent sees the human
/// commands `c_0..=c_t` and the human actions before `t`, and the episode
/// stops at the first correct prediction. With `mask`, objects the human
/// agent already selected are excluded.
pub fn replay_offline(agent: &dyn Agent, session: &Session, screen: &Screen, mask: bool) -> Result<EpisodeRecord, EvalError> {
    let commands: Vec<Vec<String>> = session.turns.iter().map(|t| t.command.tokens.clone()).collect();
    let actions = session.actions();
    let mut rec = EpisodeRecord {
        session_id: session.session_id.clone(),
        mode: Mode::Offline,
        user: None,
        agent: agent.id(),
        variant: agent.variant(),
        turns: Vec::new(),
        success_turn: None,
        failure: None,
    };
    for t in 0..commands.len().min(MAX_TURNS) {
        let obs = Observation { session_id: &session.session_id, screen, commands: &commands[..=t], actions: &actions[..t] };
        let (a, digest) = match act(agent, &obs, mask) {
            Ok(x) => x,
            Err(EvalError::Agent(AgentError::Exhausted)) => {
                rec.failure = Some(AgentError::Exhausted.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let correct = a == session.target;
        rec.turns.push(EpisodeTurn {
            command: commands[t].clone(),
            origin: session.turns[t].command.origin,
            action: a,
            correct,
            logits_digest: digest,
        });
        if correct {
            rec.success_turn = Some(t);
            break;
        }
    }
    Ok(rec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OnlineOptions {
    pub max_turns: usize,
    /// Exclude the agent's earlier selections. Disable only for stress
    /// tests of Γ.
    pub mask: bool,
    pub seed: u64,
}

impl Default for OnlineOptions {
    fn default() -> Self {
        Self { max_turns: MAX_TURNS, mask: true, seed: 0 }
    }
}

/// Closed loop between `agent` and a simulated user, starting from `c0`.
/// `script` supplies the follow-ups for [`UserKind::ScriptedReplay`]
/// (`script[t]` at turn `t`; `script[0]` is ignored).
#[allow(clippy::too_many_arguments)]
pub fn run_online_episode(
    agent: &dyn Agent,
    user: UserKind,
    screen: &Screen,
    session_id: &str,
    target: usize,
    c0: &Command,
    script: &[Command],
    opts: &OnlineOptions,
) -> Result<EpisodeRecord, EvalError> {
    if !screen.is_clickable(target) {
        return Err(UserSimError::NotClickable(target).into());
    }
    let max_turns = opts.max_turns.clamp(1, MAX_TURNS);
    let mut commands = vec![c0.tokens.clone()];
    let mut origins = vec![c0.origin];
    let mut actions: Vec<usize> = Vec::new();
    let mut rec = EpisodeRecord {
        session_id: session_id.to_owned(),
        mode: Mode::Online,
        user: Some(user),
        agent: agent.id(),
        variant: agent.variant(),
        turns: Vec::new(),
        success_turn: None,
        failure: None,
    };
    for t in 0..max_turns {
        let obs = Observation { session_id, screen, commands: &commands, actions: &actions };
        let (a, digest) = match act(agent, &obs, opts.mask) {
            Ok(x) => x,
            Err(EvalError::Agent(AgentError::Exhausted)) => {
                rec.failure = Some(AgentError::Exhausted.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let correct = a == target;
        rec.turns.push(EpisodeTurn { command: commands[t].clone(), origin: origins[t], action: a, correct, logits_digest: digest });
        actions.push(a);
        if correct {
            rec.success_turn = Some(t);
            break;
        }
        if t + 1 == max_turns {
            break;
        }
        let next = match user {
            UserKind::Heuristic => heuristic_followup(screen, target, a, t + 1)?,
            UserKind::RandomHeuristic | UserKind::RepeatC0 => {
                ablation_followup(user, screen, a, c0, episode_seed(opts.seed, session_id, t + 1), t + 1)?
            }
            UserKind::ScriptedReplay => match script.get(t + 1) {
                Some(c) => c.clone(),
                None => {
                    rec.failure = Some("recorded commands exhausted".into());
                    break;
                }
            },
        };
        commands.push(next.tokens);
        origins.push(next.origin);
    }
    Ok(rec)
}

/// Fraction of episodes whose earliest success turn is at most `t`.
pub fn f1_at(success_turns: &[Option<usize>], t: usize) -> Result<f64, EvalError> {
    if t >= MAX_TURNS {
        return Err(EvalError::TurnRange(t));
    }
    if success_turns.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = success_turns.iter().filter(|s| s.is_some_and(|s| s <= t)).count();
    Ok(hits as f64 / success_turns.len() as f64)
}

/// Which turns count as carrying a unique instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaFilter {
    /// Commands that occur exactly once in the episode.
    #[default]
    ExactlyOnce,
    /// The first occurrence of every distinct command.
    FirstOccurrence,
}

impl std::str::FromStr for GammaFilter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exactly_once" => Ok(GammaFilter::ExactlyOnce),
            "first_occurrence" => Ok(GammaFilter::FirstOccurrence),
            other => Err(format!("unknown gamma filter {other:?}")),
        }
    }
}

/// Whether an episode given as (command, action) turns repeats an action
/// among its unique-instruction turns.
pub fn has_duplicate_action<C: AsRef<[String]>>(turns: &[(C, usize)], filter: GammaFilter) -> bool {
    let mut kept = Vec::new();
    for (i, (c, a)) in turns.iter().enumerate() {
        let c = c.as_ref();
        let keep = match filter {
            GammaFilter::ExactlyOnce => turns.iter().filter(|(d, _)| d.as_ref() == c).count() == 1,
            GammaFilter::FirstOccurrence => !turns[..i].iter().any(|(d, _)| d.as_ref() == c),
        };
        if keep {
            kept.push(*a);
        }
    }
    let distinct: BTreeSet<usize> = kept.iter().copied().collect();
    distinct.len() != kept.len()
}

pub fn gamma(episodes: &[EpisodeRecord], filter: GammaFilter) -> Result<f64, EvalError> {
    if episodes.is_empty() {
        return Err(EvalError::Empty);
    }
    let dup = episodes
        .iter()
        .filter(|e| {
            let turns: Vec<(&[String], usize)> = e.turns.iter().map(|t| (t.command.as_slice(), t.action)).collect();
            has_duplicate_action(&turns, filter)
        })
        .count();
    Ok(dup as f64 / episodes.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub count: usize,
    /// F1@0..=4; absent when the subset is empty.
    pub f1: Option<[f64; MAX_TURNS]>,
    pub gamma: Option<f64>,
}

impl SubsetReport {
    pub fn from_episodes(episodes: &[&EpisodeRecord], filter: GammaFilter) -> Self {
        if episodes.is_empty() {
            return Self { count: 0, f1: None, gamma: None };
        }
        let succ: Vec<Option<usize>> = episodes.iter().map(|e| e.success_turn).collect();
        let mut f1 = [0.0; MAX_TURNS];
        for (t, v) in f1.iter_mut().enumerate() {
            *v = f1_at(&succ, t).expect("non-empty, t in range");
        }
        let owned: Vec<EpisodeRecord> = episodes.iter().map(|e| (*e).clone()).collect();
        Self { count: episodes.len(), f1: Some(f1), gamma: Some(gamma(&owned, filter).expect("non-empty")) }
    }

    pub fn is_monotone(&self) -> bool {
        self.f1.is_none_or(|f| f.windows(2).all(|w| w[0] <= w[1]) && f.iter().all(|v| (0.0..=1.0).contains(v)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub agent: String,
    pub variant: Option<Variant>,
    pub mode: Mode,
    pub user: Option<UserKind>,
    pub split: Option<SplitTag>,
    pub seed: u64,
    pub masked: bool,
    pub gamma_filter: GammaFilter,
    pub all: SubsetReport,
    pub challenging: SubsetReport,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("subset,count,f1_0,f1_1,f1_2,f1_3,f1_4,gamma\n");
        for (name, r) in [("all", &self.all), ("challenging", &self.challenging)] {
            s.push_str(&format!("{name},{}", r.count));
            match r.f1 {
                Some(f) => f.iter().for_each(|v| s.push_str(&format!(",{v}"))),
                None => s.push_str(",,,,,"),
            }
            s.push_str(&format!(",{}\n", r.gamma.map(|g| g.to_string()).unwrap_or_default()));
        }
        s
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        let io = |e: std::io::Error| EvalError::Io { path: dir.display().to_string(), msg: e.to_string() };
        fs::create_dir_all(dir).map_err(io)?;
        fs::write(dir.join("report.json"), self.to_json()).map_err(io)?;
        fs::write(dir.join("report.csv"), self.to_csv()).map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self, EvalError> {
        let io = |msg: String| EvalError::Io { path: path.display().to_string(), msg };
        let text = fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| io(e.to_string()))
    }
}

/// Appends one JSON line per episode to the audit file at `path`.
pub fn append_episodes(path: &Path, episodes: &[EpisodeRecord]) -> Result<(), EvalError> {
    let io = |e: std::io::Error| EvalError::Io { path: path.display().to_string(), msg: e.to_string() };
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).map_err(io)?;
    }
    let mut buf = String::new();
    for e in episodes {
        buf.push_str(&serde_json::to_string(e).expect("episode serializes"));
        buf.push('\n');
    }
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    f.write_all(buf.as_bytes()).map_err(io)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub mode: Mode,
    pub user: UserKind,
    pub seed: u64,
    pub mask: bool,
    pub gamma_filter: GammaFilter,
    pub max_turns: usize,
    /// Worker threads; results do not depend on it.
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Online,
            user: UserKind::Heuristic,
            seed: 0,
            mask: true,
            gamma_filter: GammaFilter::ExactlyOnce,
            max_turns: MAX_TURNS,
            workers: 1,
        }
    }
}

fn episode(agent: &dyn Agent, corpus: &Corpus, s: &Session, opts: &EvalOptions) -> Result<EpisodeRecord, EvalError> {
    let screen = corpus.screen(&s.screen_id).ok_or_else(|| EvalError::UnknownScreen(s.screen_id.clone()))?;
    match opts.mode {
        Mode::Offline => replay_offline(agent, s, screen, opts.mask),
        Mode::Online => {
            let script: Vec<Command> = s.turns.iter().map(|t| t.command.clone()).collect();
            let c0 = script.first().ok_or(EvalError::Empty)?;
            let online = OnlineOptions { max_turns: opts.max_turns, mask: opts.mask, seed: opts.seed };
            run_online_episode(agent, opts.user, screen, &s.session_id, s.target, c0, &script, &online)
        }
    }
}

/// Runs the chosen protocol over `sessions` and scores All and Challenging
/// (multi-turn sessions). Episodes come back in input order.
pub fn evaluate(
    agent: &dyn Agent,
    corpus: &Corpus,
    sessions: &[&Session],
    opts: &EvalOptions,
) -> Result<(EvalReport, Vec<EpisodeRecord>), EvalError> {
    if sessions.is_empty() {
        return Err(EvalError::Empty);
    }
    let run = |chunk: &[&Session]| -> Result<Vec<EpisodeRecord>, EvalError> {
        chunk
            .iter()
            .map(|s| {
                episode(agent, corpus, s, opts)
                    .map_err(|e| EvalError::Session { session: s.session_id.clone(), source: Box::new(e) })
            })
            .collect()
    };
    let workers = opts.workers.clamp(1, sessions.len());
    let episodes: Vec<EpisodeRecord> = if workers == 1 {
        run(sessions)?
    } else {
        let size = sessions.len().div_ceil(workers);
        let parts: Vec<Result<Vec<EpisodeRecord>, EvalError>> = std::thread::scope(|sc| {
            let handles: Vec<_> = sessions.chunks(size).map(|c| sc.spawn(move || run(c))).collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        });
        let mut all = Vec::with_capacity(sessions.len());
        for p in parts {
            all.extend(p?);
        }
        all
    };
    let all: Vec<&EpisodeRecord> = episodes.iter().collect();
    let hard: Vec<&EpisodeRecord> =
        episodes.iter().zip(sessions).filter(|(_, s)| s.turns.len() > 1).map(|(e, _)| e).collect();
    let split = sessions[0].split_tag;
    let report = EvalReport {
        agent: agent.id(),
        variant: agent.variant(),
        mode: opts.mode,
        user: (opts.mode == Mode::Online).then_some(opts.user),
        split: sessions.iter().all(|s| s.split_tag == split).then_some(split),
        seed: opts.seed,
        masked: opts.mask,
        gamma_filter: opts.gamma_filter,
        all: SubsetReport::from_episodes(&all, opts.gamma_filter),
        challenging: SubsetReport::from_episodes(&hard, opts.gamma_filter),
    };
    debug_assert!(report.all.is_monotone() && report.challenging.is_monotone());
    Ok((report, episodes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{generate_gold_session, GoldStyle};
    use crate::screen::fixtures::{five_object_screen, obj};
    use crate::screen::{AgentKind, ObjType, Turn};

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn three_button_screen() -> Screen {
        let mut s = five_object_screen();
        s.objects = vec![
            obj(0, [0.0, 0.0, 0.3, 0.1], ObjType::Button, true, &["ok"]),
            obj(1, [0.35, 0.0, 0.65, 0.1], ObjType::Button, true, &["ok"]),
            obj(2, [0.7, 0.0, 1.0, 0.1], ObjType::Button, true, &["ok"]),
        ];
        s
    }

    fn record(success: Option<usize>) -> EpisodeRecord {
        EpisodeRecord {
            session_id: "x".into(),
            mode: Mode::Online,
            user: None,
            agent: "a".into(),
            variant: None,
            turns: Vec::new(),
            success_turn: success,
            failure: None,
        }
    }

    #[test]
    fn f1_counts() {
        let s = [Some(0), Some(1), None];
        assert_eq!(f1_at(&s, 0).unwrap(), 1.0 / 3.0);
        assert_eq!(f1_at(&s, 1).unwrap(), 2.0 / 3.0);
        assert_eq!(f1_at(&s, 4).unwrap(), 2.0 / 3.0);
        assert!(matches!(f1_at(&[], 0), Err(EvalError::Empty)));
        assert!(matches!(f1_at(&s, 5), Err(EvalError::TurnRange(5))));
        let r = SubsetReport::from_episodes(&[&record(Some(0))], GammaFilter::ExactlyOnce);
        assert_eq!(r.f1, Some([1.0; 5]));
    }

    #[test]
    fn gamma_filter_readings() {
        let (c, d) = (words("click ok"), words("the left one"));
        assert!(has_duplicate_action(&[(c.clone(), 3), (d.clone(), 3)], GammaFilter::ExactlyOnce));
        assert!(!has_duplicate_action(&[(c.clone(), 1)], GammaFilter::ExactlyOnce));
        let ccd = [(c.clone(), 1), (c.clone(), 1), (d.clone(), 2)];
        assert!(!has_duplicate_action(&ccd, GammaFilter::ExactlyOnce));
        assert!(!has_duplicate_action(&ccd, GammaFilter::FirstOccurrence));
        let ccd2 = [(c.clone(), 1), (c, 2), (d, 1)];
        assert!(!has_duplicate_action(&ccd2, GammaFilter::ExactlyOnce));
        assert!(has_duplicate_action(&ccd2, GammaFilter::FirstOccurrence));
    }

    #[test]
    fn oracle_and_constant_offline() {
        let screen = five_object_screen();
        let s = generate_gold_session(&screen, 2, 3, GoldStyle::AmbiguousMultiTurn(2)).unwrap();
        let oracle = OracleAgent::from_sessions([&s]);
        assert_eq!(replay_offline(&oracle, &s, &screen, true).unwrap().success_turn, Some(0));
        let wrong = screen.clickable_indices().into_iter().find(|&i| i != s.target).unwrap();
        let rec = replay_offline(&ConstantAgent(wrong), &s, &screen, false).unwrap();
        assert_eq!(rec.success_turn, None);
        assert!(rec.is_consistent());
    }

    #[test]
    fn hand_set_logits_two_turns() {
        let screen = three_button_screen();
        let mk = |a: usize, t: usize| Turn {
            command: Command::new(words(if t == 0 { "click ok" } else { "not that one" }), Origin::Human, t),
            action: a,
            agent_kind: AgentKind::HumanRecord,
        };
        let s = Session {
            session_id: "h".into(),
            screen_id: screen.screen_id.clone(),
            target: 2,
            turns: vec![mk(0, 0), mk(2, 1)],
            completed: true,
            split_tag: SplitTag::Test,
        };
        // Turn 0 prefers object 0 (the human's wrong pick); turn 1 prefers 0
        // again, so only the mask lets the runner-up, the target, through.
        let mut agent = TableAgent::default();
        agent.table.insert(("h".into(), 0), vec![3.0, 1.0, 2.0]);
        agent.table.insert(("h".into(), 1), vec![3.0, 1.0, 2.0]);
        let masked = replay_offline(&agent, &s, &screen, true).unwrap();
        assert_eq!(masked.success_turn, Some(1));
        assert_eq!(masked.turns.iter().map(|t| t.action).collect::<Vec<_>>(), [0, 2]);
        assert_eq!(replay_offline(&agent, &s, &screen, false).unwrap().success_turn, None);
    }

    #[test]
    fn fixed_wrong_agent_reaches_target_by_elimination() {
        let screen = three_button_screen();
        let c0 = Command::new(words("click ok"), Origin::Scripted, 0);
        let rec = run_online_episode(&ConstantAgent(0), UserKind::Heuristic, &screen, "e", 2, &c0, &[], &OnlineOptions::default())
            .unwrap();
        let actions: Vec<usize> = rec.turns.iter().map(|t| t.action).collect();
        assert_eq!(actions, [0, 1, 2]);
        assert_eq!(rec.success_turn, Some(2));
        assert!(rec.is_consistent());
    }

    #[test]
    fn repeat_user_and_exhaustion() {
        let screen = three_button_screen();
        let c0 = Command::new(words("click ok"), Origin::Scripted, 0);
        let opts = OnlineOptions { max_turns: 5, mask: true, seed: 1 };
        let s = screen;
        let rec = run_online_episode(&ConstantAgent(0), UserKind::RepeatC0, &s, "r", 2, &c0, &[], &opts).unwrap();
        assert!(rec.turns.iter().all(|t| t.command == c0.tokens));
        // An agent that never scores the target only fails by exhaustion.
        let mut agent = TableAgent::default();
        for t in 0..5 {
            agent.table.insert(("r".into(), t), vec![3.0, 2.0, f64::NAN]);
        }
        let rec = run_online_episode(&agent, UserKind::RepeatC0, &s, "r", 2, &c0, &[], &opts).unwrap();
        assert_eq!(rec.turns.len(), 2);
        assert_eq!(rec.failure.as_deref(), Some("action space exhausted"));
    }

    #[test]
    fn unmasked_agent_repeats() {
        let screen = three_button_screen();
        let c0 = Command::new(words("click ok"), Origin::Scripted, 0);
        let opts = OnlineOptions { max_turns: 5, mask: false, seed: 1 };
        let rec = run_online_episode(&ConstantAgent(0), UserKind::Heuristic, &screen, "u", 2, &c0, &[], &opts).unwrap();
        assert_eq!(rec.turns.len(), 5);
        assert!(rec.turns.iter().all(|t| t.action == 0));
    }

    #[test]
    fn csv_layout() {
        let r = EvalReport {
            agent: "a".into(),
            variant: None,
            mode: Mode::Offline,
            user: None,
            split: None,
            seed: 0,
            masked: true,
            gamma_filter: GammaFilter::ExactlyOnce,
            all: SubsetReport::from_episodes(&[&record(Some(1)), &record(None)], GammaFilter::ExactlyOnce),
            challenging: SubsetReport { count: 0, f1: None, gamma: None },
        };
        assert_eq!(r.to_csv(), "subset,count,f1_0,f1_1,f1_2,f1_3,f1_4,gamma\nall,2,0,0.5,0.5,0.5,0.5,0\nchallenging,0,,,,,,\n");
    }
}
