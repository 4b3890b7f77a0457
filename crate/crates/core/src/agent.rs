//! Grounding decoder, object scoring and action selection.
//!
//! The decoder reads an interleaved history of command tokens, selected
//! objects and (for the return-conditioned variant) return tokens, with
//! causal self-attention and cross-attention into the object encodings.
//! The state at a turn's final slot is scored against every object.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, NodeId};
use crate::encoder::{EncoderParams, ScreenFeatures};
use crate::nn::{DecoderBlock, Init, LayerNorm, Linear};
use crate::screen::{MAX_COMMAND_TOKENS, MAX_TURNS};
use crate::tensor::{ParamId, ParamStore, Tensor};
use crate::vocab::SEP_ID;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Single,
    InsOnly,
    Multi,
    Imitation,
    OfflineRl,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Single, Variant::InsOnly, Variant::Multi, Variant::Imitation, Variant::OfflineRl];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Single => "single",
            Variant::InsOnly => "ins_only",
            Variant::Multi => "multi",
            Variant::Imitation => "imitation",
            Variant::OfflineRl => "offline_rl",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error("history needs {expected} actions for {commands} commands, got {got}")]
    ActionCount { commands: usize, expected: usize, got: usize },
    #[error("return tokens are required by offline_rl and only by it")]
    ReturnsPresence,
    #[error("{got} return tokens for {commands} commands")]
    ReturnCount { commands: usize, got: usize },
    #[error("return token {0} outside 1..=4")]
    ReturnRange(u8),
    #[error("history has no commands")]
    NoCommands,
    #[error("command {0} is empty")]
    EmptyCommand(usize),
    #[error("history of {0} turns exceeds the limit of {MAX_TURNS}")]
    TooManyTurns(usize),
    #[error("decoder input of {0} slots exceeds the limit of {1}")]
    TooManySlots(usize, usize),
    #[error("action space exhausted")]
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_ff: usize,
    pub d_tok: usize,
    pub d_feat: usize,
    pub d_flag: usize,
    pub dropout: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub max_objects: usize,
    pub max_slots: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 4,
            d_ff: 128,
            d_tok: 32,
            d_feat: 16,
            d_flag: 8,
            dropout: 0.1,
            grid_h: 16,
            grid_w: 16,
            max_objects: 64,
            max_slots: 192,
        }
    }
}

impl ModelConfig {
    /// Width-4 model used for gradient checks.
    pub fn toy() -> Self {
        Self {
            d_model: 4,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            d_ff: 8,
            d_tok: 4,
            d_feat: 2,
            d_flag: 2,
            dropout: 0.0,
            grid_h: 4,
            grid_w: 4,
            max_objects: 8,
            max_slots: 96,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Command = 0,
    Action = 1,
    Return = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Token(usize),
    /// Encoding of the object selected at this turn.
    Action(usize),
    Return(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub kind: SlotKind,
    pub segment: Segment,
    pub turn: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderInput {
    pub slots: Vec<Slot>,
    /// Slot whose output summarizes the history through each command.
    pub readouts: Vec<usize>,
}

impl DecoderInput {
    pub fn num_action_slots(&self) -> usize {
        self.slots.iter().filter(|s| s.segment == Segment::Action).count()
    }
}

/// Lays out the history for `variant`.
///
/// `single` joins every command with `<sep>` into one turn (just `c_0` when
/// there is one command); `ins_only` keeps the commands as separate turns
/// without action slots; `multi` and `imitation` interleave commands with
/// the selected objects; `offline_rl` adds a return token after each
/// command.
pub fn build_decoder_input(
    variant: Variant,
    commands: &[Vec<usize>],
    actions: &[usize],
    returns: Option<&[u8]>,
) -> Result<DecoderInput, AgentError> {
    if commands.is_empty() {
        return Err(AgentError::NoCommands);
    }
    if commands.len() > MAX_TURNS {
        return Err(AgentError::TooManyTurns(commands.len()));
    }
    if let Some(i) = commands.iter().position(Vec::is_empty) {
        return Err(AgentError::EmptyCommand(i));
    }
    if actions.len() + 1 != commands.len() {
        return Err(AgentError::ActionCount { commands: commands.len(), expected: commands.len() - 1, got: actions.len() });
    }
    if returns.is_some() != (variant == Variant::OfflineRl) {
        return Err(AgentError::ReturnsPresence);
    }
    if let Some(r) = returns {
        if r.len() != commands.len() {
            return Err(AgentError::ReturnCount { commands: commands.len(), got: r.len() });
        }
        if let Some(&bad) = r.iter().find(|w| !(1..=4).contains(*w)) {
            return Err(AgentError::ReturnRange(bad));
        }
    }
    let cmd = |slots: &mut Vec<Slot>, c: &[usize], turn: usize| {
        for &t in c.iter().take(MAX_COMMAND_TOKENS) {
            slots.push(Slot { kind: SlotKind::Token(t), segment: Segment::Command, turn });
        }
    };
    let mut slots = Vec::new();
    let mut readouts = Vec::new();
    match variant {
        Variant::Single => {
            for (t, c) in commands.iter().enumerate() {
                if t > 0 {
                    slots.push(Slot { kind: SlotKind::Token(SEP_ID), segment: Segment::Command, turn: 0 });
                }
                cmd(&mut slots, c, 0);
            }
            readouts.push(slots.len() - 1);
        }
        Variant::InsOnly => {
            for (t, c) in commands.iter().enumerate() {
                cmd(&mut slots, c, t);
                readouts.push(slots.len() - 1);
            }
        }
        Variant::Multi | Variant::Imitation | Variant::OfflineRl => {
            for (t, c) in commands.iter().enumerate() {
                if t > 0 {
                    slots.push(Slot { kind: SlotKind::Action(actions[t - 1]), segment: Segment::Action, turn: t - 1 });
                }
                cmd(&mut slots, c, t);
                if let Some(r) = returns {
                    slots.push(Slot { kind: SlotKind::Return(r[t]), segment: Segment::Return, turn: t });
                }
                readouts.push(slots.len() - 1);
            }
        }
    }
    Ok(DecoderInput { slots, readouts })
}

/// Returns-to-go used in training: turn `t` of a `len`-turn session gets
/// `len - t`, capped at 4, so the last turn carries 1.
pub fn training_returns(len: usize) -> Vec<u8> {
    (0..len).map(|t| (len - t).min(4) as u8).collect()
}

/// Test-time returns when the current turn is `t`: the current turn is
/// forced to 1 and earlier turns count up from it, capped at 4.
pub fn adjust_returns_test_time(t: usize) -> Vec<u8> {
    if t > 3 {
        log::warn!("turn {t} exceeds the return-token range; clamping returns at 4");
    }
    training_returns(t + 1)
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub tok_proj: Linear,
    pub act_proj: Linear,
    pub ret: ParamId,
    pub segment: ParamId,
    pub turn: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub ln: LayerNorm,
    /// Scoring head: w_z·z + w_v·v + zᵀ M v + b.
    pub score_wz: ParamId,
    pub score_wv: ParamId,
    pub score_m: ParamId,
    pub score_b: ParamId,
}

/// Encoder, decoder and scoring head with their parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub enc: EncoderParams,
    pub dec: DecoderParams,
}

impl Model {
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut init = Init { store: &mut params, rng: ChaCha8Rng::seed_from_u64(seed) };
        let enc = EncoderParams::new(&mut init, &config, vocab_size);
        let d = config.d_model;
        let dec = DecoderParams {
            tok_proj: Linear::new(&mut init, "dec.tok_proj", config.d_tok, d),
            act_proj: Linear::new(&mut init, "dec.act_proj", d, d),
            ret: init.table("dec.ret", 4, d, 0.5),
            segment: init.table("dec.segment", 3, d, 0.1),
            turn: init.table("dec.turn", MAX_TURNS, d, 0.1),
            pos: init.table("dec.pos", config.max_slots, d, 0.1),
            blocks: (0..config.dec_layers)
                .map(|l| DecoderBlock::new(&mut init, &format!("dec.block{l}"), d, config.heads, config.d_ff))
                .collect(),
            ln: LayerNorm::new(&mut init, "dec.ln", d),
            score_wz: init.weight("score.wz", 1, d),
            score_wv: init.weight("score.wv", 1, d),
            score_m: init.weight("score.m", d, d),
            score_b: init.constant("score.b", 1, 1, 0.0),
        };
        Self { config, params, enc, dec }
    }

    pub fn encode(&self, g: &mut Graph, f: &ScreenFeatures) -> NodeId {
        self.enc.forward(g, f)
    }

    /// Decoder outputs for every slot (slots × d_model).
    pub fn decode(&self, g: &mut Graph, v: NodeId, input: &DecoderInput) -> Result<NodeId, AgentError> {
        let n = input.slots.len();
        if n > self.config.max_slots {
            return Err(AgentError::TooManySlots(n, self.config.max_slots));
        }
        let d = &self.dec;
        let (mut tok_ids, mut act_ids, mut ret_ids) = (Vec::new(), Vec::new(), Vec::new());
        for s in &input.slots {
            match s.kind {
                SlotKind::Token(t) => tok_ids.push(t),
                SlotKind::Action(a) => act_ids.push(a),
                SlotKind::Return(w) => ret_ids.push(usize::from(w) - 1),
            }
        }
        // Embed each slot kind in bulk, then permute rows into slot order.
        let mut parts = Vec::new();
        if !tok_ids.is_empty() {
            let e = g.gather(self.enc.tok, &tok_ids);
            parts.push(d.tok_proj.forward(g, e));
        }
        if !act_ids.is_empty() {
            let e = g.select_rows(v, &act_ids);
            parts.push(d.act_proj.forward(g, e));
        }
        if !ret_ids.is_empty() {
            parts.push(g.gather(d.ret, &ret_ids));
        }
        let stacked = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
        let (mut ti, mut ai, mut ri) = (0, tok_ids.len(), tok_ids.len() + act_ids.len());
        let order: Vec<usize> = input
            .slots
            .iter()
            .map(|s| {
                let c = match s.kind {
                    SlotKind::Token(_) => &mut ti,
                    SlotKind::Action(_) => &mut ai,
                    SlotKind::Return(_) => &mut ri,
                };
                *c += 1;
                *c - 1
            })
            .collect();
        let x = g.select_rows(stacked, &order);
        let seg_ids: Vec<usize> = input.slots.iter().map(|s| s.segment as usize).collect();
        let turn_ids: Vec<usize> = input.slots.iter().map(|s| s.turn).collect();
        let pos_ids: Vec<usize> = (0..n).collect();
        let seg = g.gather(d.segment, &seg_ids);
        let turn = g.gather(d.turn, &turn_ids);
        let pos = g.gather(d.pos, &pos_ids);
        let mut x = g.add(x, seg);
        x = g.add(x, turn);
        x = g.add(x, pos);
        x = g.dropout(x);
        for b in &d.blocks {
            x = b.forward(g, x, v);
        }
        Ok(d.ln.forward(g, x))
    }

    /// Logits (1 × objects) for decoder state `z` (1 × d_model).
    pub fn score(&self, g: &mut Graph, z: NodeId, v: NodeId) -> NodeId {
        let d = &self.dec;
        let m = g.param(d.score_m);
        let wv = g.param(d.score_wv);
        let wz = g.param(d.score_wz);
        let b = g.param(d.score_b);
        let zm = g.matmul(z, m);
        let u = g.add(zm, wv);
        let per_obj = g.matmul_t(u, v);
        let zz = g.matmul_t(z, wz);
        let shift = g.add(zz, b);
        g.add_bcast(per_obj, shift)
    }
}

/// Object encodings for inference.
pub fn encode_screen(model: &Model, f: &ScreenFeatures) -> Tensor {
    let mut g = Graph::new(&model.params);
    let v = model.encode(&mut g, f);
    g.value(v).clone()
}

/// Decoder outputs for every slot, inference mode.
pub fn decode(model: &Model, v: &Tensor, input: &DecoderInput) -> Result<Tensor, AgentError> {
    let mut g = Graph::new(&model.params);
    let vn = g.input(v.clone());
    let out = model.decode(&mut g, vn, input)?;
    Ok(g.value(out).clone())
}

/// One logit per object for state `z`.
pub fn score_objects(model: &Model, z: &[f64], v: &Tensor) -> Vec<f64> {
    let mut g = Graph::new(&model.params);
    let zn = g.input(Tensor::from_vec(1, z.len(), z.to_vec()));
    let vn = g.input(v.clone());
    let l = model.score(&mut g, zn, vn);
    g.value(l).data.clone()
}

/// Logits at the last readout of `input`.
pub fn logits_for(model: &Model, v: &Tensor, input: &DecoderInput) -> Result<Vec<f64>, AgentError> {
    let states = decode(model, v, input)?;
    let last = *input.readouts.last().expect("inputs have at least one readout");
    Ok(score_objects(model, states.row(last), v))
}

/// Argmax over clickable, not-yet-chosen objects; ties go to the lowest
/// index.
pub fn select_action(logits: &[f64], forbidden: &[usize], non_clickable: &[usize]) -> Result<usize, AgentError> {
    let mut best: Option<usize> = None;
    for (i, &l) in logits.iter().enumerate() {
        if forbidden.contains(&i) || non_clickable.contains(&i) || l.is_nan() {
            continue;
        }
        if best.is_none_or(|b| l > logits[b]) {
            best = Some(i);
        }
    }
    best.ok_or(AgentError::Exhausted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::screen_features;
    use crate::screen::fixtures::five_object_screen;
    use crate::vocab::Vocab;

    fn cmds(n: usize) -> Vec<Vec<usize>> {
        (0..n).map(|t| vec![10 + t, 20 + t]).collect()
    }

    #[test]
    fn layouts() {
        let single = build_decoder_input(Variant::Single, &cmds(1), &[], None).unwrap();
        assert_eq!(single.slots.iter().map(|s| s.kind).collect::<Vec<_>>(), [SlotKind::Token(10), SlotKind::Token(20)]);
        let multi = build_decoder_input(Variant::Multi, &cmds(2), &[3], None).unwrap();
        assert_eq!(
            multi.slots.iter().map(|s| s.kind).collect::<Vec<_>>(),
            [SlotKind::Token(10), SlotKind::Token(20), SlotKind::Action(3), SlotKind::Token(11), SlotKind::Token(21)]
        );
        assert_eq!(multi.readouts, [1, 4]);
        let rl = build_decoder_input(Variant::OfflineRl, &cmds(2), &[3], Some(&[2, 1])).unwrap();
        assert_eq!(
            rl.slots.iter().map(|s| s.kind).collect::<Vec<_>>(),
            [
                SlotKind::Token(10),
                SlotKind::Token(20),
                SlotKind::Return(2),
                SlotKind::Action(3),
                SlotKind::Token(11),
                SlotKind::Token(21),
                SlotKind::Return(1)
            ]
        );
        assert_eq!(rl.readouts, [2, 6]);
        let joined = build_decoder_input(Variant::Single, &cmds(2), &[3], None).unwrap();
        assert_eq!(joined.slots.len(), 5);
        assert_eq!(joined.slots[2].kind, SlotKind::Token(SEP_ID));
        for t in 1..=5 {
            let ins = build_decoder_input(Variant::InsOnly, &cmds(t), &vec![0; t - 1], None).unwrap();
            assert_eq!(ins.num_action_slots(), 0);
            assert_eq!(ins.readouts.len(), t);
        }
    }

    #[test]
    fn layout_errors() {
        assert_eq!(build_decoder_input(Variant::Multi, &[], &[], None), Err(AgentError::NoCommands));
        assert!(matches!(build_decoder_input(Variant::Multi, &cmds(2), &[], None), Err(AgentError::ActionCount { .. })));
        assert_eq!(build_decoder_input(Variant::Multi, &cmds(1), &[], Some(&[1])), Err(AgentError::ReturnsPresence));
        assert_eq!(build_decoder_input(Variant::OfflineRl, &cmds(1), &[], None), Err(AgentError::ReturnsPresence));
        assert!(matches!(build_decoder_input(Variant::OfflineRl, &cmds(2), &[1], Some(&[1])), Err(AgentError::ReturnCount { .. })));
        assert_eq!(build_decoder_input(Variant::OfflineRl, &cmds(1), &[], Some(&[5])), Err(AgentError::ReturnRange(5)));
        assert_eq!(build_decoder_input(Variant::Multi, &[vec![]], &[], None), Err(AgentError::EmptyCommand(0)));
    }

    #[test]
    fn returns() {
        assert_eq!(adjust_returns_test_time(0), [1]);
        assert_eq!(adjust_returns_test_time(2), [3, 2, 1]);
        assert_eq!(adjust_returns_test_time(4), [4, 4, 3, 2, 1]);
        assert_eq!(training_returns(2), [2, 1]);
    }

    #[test]
    fn selection_rules() {
        assert_eq!(select_action(&[0.1, 0.9, 0.3], &[], &[]), Ok(1));
        assert_eq!(select_action(&[0.1, 0.9, 0.3], &[1], &[]), Ok(2));
        assert_eq!(select_action(&[0.5, 0.5, 0.5], &[], &[0]), Ok(1));
        assert_eq!(select_action(&[0.5, 0.5], &[0], &[1]), Err(AgentError::Exhausted));
    }

    fn setup() -> (Model, Tensor) {
        let vocab = Vocab::bundled();
        let model = Model::new(ModelConfig { dropout: 0.0, ..ModelConfig::default() }, vocab.len(), 3);
        let f = screen_features(&five_object_screen(), &vocab, &model.config).unwrap();
        let v = encode_screen(&model, &f);
        (model, v)
    }

    #[test]
    fn decode_is_deterministic_and_causal() {
        let (model, v) = setup();
        let full = build_decoder_input(Variant::Multi, &cmds(3), &[1, 2], None).unwrap();
        let prefix = build_decoder_input(Variant::Multi, &cmds(2), &[1], None).unwrap();
        let a = decode(&model, &v, &full).unwrap();
        let b = decode(&model, &v, &full).unwrap();
        assert_eq!(a, b);
        let p = decode(&model, &v, &prefix).unwrap();
        assert_eq!(p.data[..], a.data[..p.data.len()]);
    }

    #[test]
    fn zero_weights_leave_bias_constant() {
        let (mut model, v) = setup();
        let names: Vec<(ParamId, String)> = model.params.iter().map(|(i, n, _)| (i, n.to_owned())).collect();
        for (id, name) in names {
            let keep = name.ends_with(".b") && name.starts_with("dec.ln");
            let t = model.params.get_mut(id);
            if !keep {
                t.data.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let bias: Vec<f64> = model.params.get(model.dec.ln.b).data.clone();
        let input = build_decoder_input(Variant::Multi, &cmds(2), &[1], None).unwrap();
        let out = decode(&model, &v, &input).unwrap();
        for r in 0..out.rows {
            assert_eq!(out.row(r), &bias[..]);
        }
    }

    #[test]
    fn scoring_oracle() {
        let (mut model, _) = setup();
        // Shrink to a hand-checkable 2-d head.
        *model.params.get_mut(model.dec.score_m) = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, -1.0]]);
        *model.params.get_mut(model.dec.score_wv) = Tensor::from_rows(&[vec![0.25, 2.0]]);
        *model.params.get_mut(model.dec.score_wz) = Tensor::from_rows(&[vec![1.0, 1.0]]);
        *model.params.get_mut(model.dec.score_b) = Tensor::from_rows(&[vec![0.5]]);
        let z = [2.0, -1.0];
        let v = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
        // zM = (1.5, 1.0); u = (1.75, 3.0); shift = 1 + 0.5
        let l = score_objects(&model, &z, &v);
        assert_eq!(l.len(), 3);
        assert_eq!(l, [1.75 + 1.5, 3.0 + 1.5, 1.75 + 1.5]);
        assert_eq!(l[0], l[2]);
        let one = score_objects(&model, &z, &Tensor::from_rows(&[vec![0.0, 0.0]]));
        assert_eq!(one.len(), 1);
    }
}
