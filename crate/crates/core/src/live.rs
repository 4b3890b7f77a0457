//! Live sessions between a person and an agent.
//!
//! States move `awaiting_command → awaiting_confirm → awaiting_command |
//! completed`, and to `exhausted` after a rejected fifth turn or when every
//! clickable object has been tried.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{select_action, AgentError};
use crate::eval::{Agent, EvalError, Observation};
use crate::screen::{AgentKind, Command, Origin, Screen, Session, SplitTag, Turn, MAX_COMMAND_TOKENS, MAX_TURNS};
use crate::vocab::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LiveState {
    AwaitingCommand,
    AwaitingConfirm,
    Completed,
    Exhausted,
}

impl LiveState {
    pub fn is_terminal(self) -> bool {
        matches!(self, LiveState::Completed | LiveState::Exhausted)
    }
}

#[derive(Debug, Error)]
pub enum LiveError {
    #[error("session is {actual:?}, expected {expected:?}")]
    WrongState { expected: LiveState, actual: LiveState },
    #[error("command has no tokens")]
    EmptyCommand,
    #[error("command has {0} tokens; the limit is {MAX_COMMAND_TOKENS}")]
    CommandTooLong(usize),
    #[error("commands may not repeat within a session (same as turn {0})")]
    RepeatedCommand(usize),
    #[error("target {0} is not a clickable object")]
    TargetNotClickable(usize),
    #[error("confirmation contradicts the selection: selected {selection}, target {target}")]
    ConfirmMismatch { selection: usize, target: usize },
    #[error(transparent)]
    Agent(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiveSession {
    pub session_id: String,
    pub screen: Screen,
    pub target: usize,
    pub turns: Vec<Turn>,
    pub state: LiveState,
}

impl LiveSession {
    pub fn new(session_id: String, screen: Screen, target: usize) -> Result<Self, LiveError> {
        if !screen.is_clickable(target) {
            return Err(LiveError::TargetNotClickable(target));
        }
        Ok(Self { session_id, screen, target, turns: Vec::new(), state: LiveState::AwaitingCommand })
    }

    fn expect(&self, expected: LiveState) -> Result<(), LiveError> {
        if self.state == expected {
            Ok(())
        } else {
            Err(LiveError::WrongState { expected, actual: self.state })
        }
    }

    pub fn selection(&self) -> Option<usize> {
        (self.state == LiveState::AwaitingConfirm).then(|| self.turns.last().map(|t| t.action)).flatten()
    }

    /// Tokenizes `text`, asks `agent` for a selection with earlier picks
    /// masked, and records the turn. Returns `None` (and moves to
    /// `exhausted`) when no clickable object is left.
    pub fn post_command(&mut self, text: &str, agent: &dyn Agent) -> Result<Option<usize>, LiveError> {
        self.expect(LiveState::AwaitingCommand)?;
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(LiveError::EmptyCommand);
        }
        if tokens.len() > MAX_COMMAND_TOKENS {
            return Err(LiveError::CommandTooLong(tokens.len()));
        }
        if let Some(t) = self.turns.iter().position(|t| t.command.tokens == tokens) {
            return Err(LiveError::RepeatedCommand(t));
        }
        let mut commands: Vec<Vec<String>> = self.turns.iter().map(|t| t.command.tokens.clone()).collect();
        commands.push(tokens.clone());
        let actions: Vec<usize> = self.turns.iter().map(|t| t.action).collect();
        let obs = Observation { session_id: &self.session_id, screen: &self.screen, commands: &commands, actions: &actions };
        let logits = agent.logits(&obs)?;
        let non_clickable: Vec<usize> = (0..self.screen.objects.len()).filter(|&i| !self.screen.is_clickable(i)).collect();
        match select_action(&logits, &actions, &non_clickable) {
            Ok(a) => {
                let turn = self.turns.len();
                self.turns.push(Turn {
                    command: Command::new(tokens, Origin::Human, turn),
                    action: a,
                    agent_kind: AgentKind::Model,
                });
                self.state = LiveState::AwaitingConfirm;
                Ok(Some(a))
            }
            Err(AgentError::Exhausted) => {
                self.state = LiveState::Exhausted;
                Ok(None)
            }
            Err(e) => Err(EvalError::from(e).into()),
        }
    }

    /// Records the user's verdict on the current selection. A verdict that
    /// disagrees with the target is refused so transcripts stay consistent.
    pub fn confirm(&mut self, correct: bool) -> Result<LiveState, LiveError> {
        self.expect(LiveState::AwaitingConfirm)?;
        let selection = self.turns.last().expect("a turn awaits confirmation").action;
        if correct != (selection == self.target) {
            return Err(LiveError::ConfirmMismatch { selection, target: self.target });
        }
        self.state = if correct {
            LiveState::Completed
        } else if self.turns.len() >= MAX_TURNS {
            LiveState::Exhausted
        } else {
            LiveState::AwaitingCommand
        };
        Ok(self.state)
    }

    /// The transcript as a corpus session.
    pub fn to_session(&self) -> Session {
        Session {
            session_id: self.session_id.clone(),
            screen_id: self.screen.screen_id.clone(),
            target: self.target,
            turns: self.turns.clone(),
            completed: self.state == LiveState::Completed,
            split_tag: SplitTag::None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{replay_offline, ConstantAgent};
    use crate::screen::fixtures::{five_object_screen, obj};
    use crate::screen::{validate_session, ObjType};

    fn live() -> LiveSession {
        let screen = five_object_screen();
        let target = *screen.clickable_indices().last().unwrap();
        LiveSession::new("l1".into(), screen, target).unwrap()
    }

    #[test]
    fn happy_path_and_replay() {
        let mut s = live();
        let agent = ConstantAgent(0);
        let mut texts = ["click ok", "no the other one", "further right", "the last", "try again"].into_iter();
        loop {
            let a = s.post_command(texts.next().unwrap(), &agent).unwrap().unwrap();
            if s.confirm(a == s.target).unwrap() == LiveState::Completed {
                break;
            }
        }
        let session = s.to_session();
        assert!(session.completed);
        assert!(validate_session(&session, &s.screen).is_empty());
        let rec = replay_offline(&agent, &session, &s.screen, true).unwrap();
        assert_eq!(rec.turns.iter().map(|t| t.action).collect::<Vec<_>>(), session.actions());
    }

    #[test]
    fn protocol_errors() {
        let mut s = live();
        let agent = ConstantAgent(0);
        assert!(matches!(s.confirm(true), Err(LiveError::WrongState { .. })));
        assert!(matches!(s.post_command("  !! ", &agent), Err(LiveError::EmptyCommand)));
        let a = s.post_command("Click OK", &agent).unwrap().unwrap();
        assert!(matches!(s.post_command("x", &agent), Err(LiveError::WrongState { .. })));
        assert!(matches!(s.confirm(a != s.target), Err(LiveError::ConfirmMismatch { .. })));
        s.confirm(false).unwrap();
        assert!(matches!(s.post_command("click ok", &agent), Err(LiveError::RepeatedCommand(0))));
    }

    #[test]
    fn fifth_rejection_exhausts() {
        let mut screen = five_object_screen();
        screen.objects.push(obj(5, [0.1, 0.9, 0.2, 0.95], ObjType::Button, true, &["next"]));
        screen.objects.iter_mut().for_each(|o| o.clickable = true);
        let target = screen.objects.len() - 1;
        let mut s = LiveSession::new("l2".into(), screen, target).unwrap();
        let agent = ConstantAgent(0);
        for t in 0..MAX_TURNS {
            let a = s.post_command(&format!("attempt {t}"), &agent).unwrap().unwrap();
            assert_ne!(a, target);
            let st = s.confirm(false).unwrap();
            assert_eq!(st, if t + 1 == MAX_TURNS { LiveState::Exhausted } else { LiveState::AwaitingCommand });
        }
        let session = s.to_session();
        assert!(!session.completed);
        assert!(validate_session(&session, &s.screen).is_empty());
    }
}
