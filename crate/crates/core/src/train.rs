//! Losses, gradient checking, the optimizer loop and checkpoints.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{build_decoder_input, training_returns, AgentError, Model, ModelConfig, Variant};
use crate::autograd::{Graph, NodeId};
use crate::encoder::{screen_features, EncodeError, ScreenFeatures};
use crate::eval::{f1_at, replay_offline, ModelAgent};
use crate::screen::{Corpus, Screen, Session, SplitTag, MAX_COMMAND_TOKENS};
use crate::tensor::{ParamStore, Tensor};
use crate::vocab::{hex, Vocab};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("session {0} has no turns")]
    EmptySession(String),
    #[error("session {0} refers to unknown screen {1}")]
    UnknownScreen(String, String),
    #[error("corpus has no {0} sessions")]
    EmptySplit(SplitTag),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("epsilon must be positive, got {0}")]
    Epsilon(f64),
    #[error("loss became NaN at step {step}")]
    NaN { step: usize, last_good: Box<Option<Checkpoint>> },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("evaluation: {0}")]
    Eval(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub model: ModelConfig,
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Steps between dev evaluations; the final step is always evaluated.
    pub eval_every: usize,
    /// Cap on dev sessions per evaluation (all when `None`).
    pub dev_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Multi,
            model: ModelConfig::default(),
            lr: 3e-4,
            warmup_steps: 200,
            total_steps: 2000,
            batch_size: 16,
            seed: 1,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eval_every: 500,
            dev_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_owned()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.total_steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("steps, batch size and eval cadence must be positive");
        }
        if self.warmup_steps >= self.total_steps {
            return bad("warmup must be shorter than training");
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.model.d_model % self.model.heads != 0 {
            return bad("d_model must be divisible by heads");
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then half-cosine
/// decay to 0 at `total`:
/// `lr(s) = peak·s/warmup` for `s < warmup`, else
/// `peak·(1 + cos(π·(s − warmup)/(total − warmup)))/2`.
pub fn lr_at(step: usize, peak: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let p = ((step - warmup) as f64 / span).min(1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

/// One training session lowered to ids.
#[derive(Debug, Clone)]
pub struct Example {
    pub session_id: String,
    pub feats: Arc<ScreenFeatures>,
    pub commands: Vec<Vec<usize>>,
    pub actions: Vec<usize>,
    pub target: usize,
    pub clickable: Vec<usize>,
}

pub fn command_ids(vocab: &Vocab, tokens: &[String]) -> Vec<usize> {
    vocab.ids(&tokens[..tokens.len().min(MAX_COMMAND_TOKENS)])
}

pub fn prepare_example(session: &Session, screen: &Screen, feats: Arc<ScreenFeatures>, vocab: &Vocab) -> Example {
    Example {
        session_id: session.session_id.clone(),
        feats,
        commands: session.turns.iter().map(|t| command_ids(vocab, &t.command.tokens)).collect(),
        actions: session.actions(),
        target: session.target,
        clickable: screen.clickable_indices(),
    }
}

/// Examples for `sessions`, sharing features per screen.
pub fn prepare_examples(
    sessions: &[&Session],
    corpus: &Corpus,
    vocab: &Vocab,
    cfg: &ModelConfig,
) -> Result<Vec<Example>, TrainError> {
    let mut cache: HashMap<&str, Arc<ScreenFeatures>> = HashMap::new();
    let mut out = Vec::with_capacity(sessions.len());
    for s in sessions {
        let screen = corpus
            .screen(&s.screen_id)
            .ok_or_else(|| TrainError::UnknownScreen(s.session_id.clone(), s.screen_id.clone()))?;
        let feats = match cache.get(s.screen_id.as_str()) {
            Some(f) => f.clone(),
            None => {
                let f = Arc::new(screen_features(screen, vocab, cfg)?);
                cache.insert(&s.screen_id, f.clone());
                f
            }
        };
        out.push(prepare_example(s, screen, feats, vocab));
    }
    Ok(out)
}

fn allowed(clickable: &[usize], forbidden: &[usize]) -> Vec<usize> {
    clickable.iter().copied().filter(|i| !forbidden.contains(i)).collect()
}

/// Builds the loss of `ex` under `variant` into `g` and returns its node.
///
/// `single` sees `c_0` only; `ins_only` and `multi` are supervised with the
/// target at the last turn; `imitation` and `offline_rl` sum the
/// cross-entropy of every recorded action given the gold history. The
/// softmax runs over clickable objects not selected earlier in the
/// history.
pub fn loss_node(model: &Model, g: &mut Graph, ex: &Example, variant: Variant) -> Result<NodeId, TrainError> {
    let t_len = ex.commands.len();
    if t_len == 0 {
        return Err(TrainError::EmptySession(ex.session_id.clone()));
    }
    let v = model.encode(g, &ex.feats);
    let history = &ex.actions[..t_len - 1];
    let ce_at = |g: &mut Graph, out: NodeId, slot: usize, target: usize, forbidden: &[usize]| {
        let z = g.select_rows(out, &[slot]);
        let logits = model.score(g, z, v);
        g.cross_entropy(logits, target, &allowed(&ex.clickable, forbidden))
    };
    match variant {
        Variant::Single => {
            let input = build_decoder_input(variant, &ex.commands[..1], &[], None)?;
            let out = model.decode(g, v, &input)?;
            Ok(ce_at(g, out, input.readouts[0], ex.target, &[]))
        }
        Variant::InsOnly | Variant::Multi => {
            let input = build_decoder_input(variant, &ex.commands, history, None)?;
            let out = model.decode(g, v, &input)?;
            Ok(ce_at(g, out, input.readouts[t_len - 1], ex.target, history))
        }
        Variant::Imitation | Variant::OfflineRl => {
            let returns = (variant == Variant::OfflineRl).then(|| training_returns(t_len));
            let input = build_decoder_input(variant, &ex.commands, history, returns.as_deref())?;
            let out = model.decode(g, v, &input)?;
            let terms: Vec<NodeId> = (0..t_len)
                .map(|t| ce_at(g, out, input.readouts[t], ex.actions[t], &ex.actions[..t]))
                .collect();
            Ok(if terms.len() == 1 { terms[0] } else { g.sum(&terms) })
        }
    }
}

/// Loss value and parameter gradients of one example without dropout.
pub fn loss_and_grad(model: &Model, ex: &Example, variant: Variant) -> Result<(f64, Vec<Tensor>), TrainError> {
    let mut grads = model.params.zeros_like();
    let mut g = Graph::new(&model.params);
    let root = loss_node(model, &mut g, ex, variant)?;
    g.backward(root, &mut grads);
    Ok((g.scalar(root), grads))
}

pub fn loss_value(model: &Model, ex: &Example, variant: Variant) -> Result<f64, TrainError> {
    let mut g = Graph::new(&model.params);
    let root = loss_node(model, &mut g, ex, variant)?;
    Ok(g.scalar(root))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub tensors_covered: usize,
    /// (tensor name, element, analytic, numeric) of the worst coordinate.
    pub worst: (String, usize, f64, f64),
}

/// Floor on the denominator of the relative error, so coordinates whose
/// true gradient vanishes are judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares analytic gradients with central differences on at least
/// `min_coords` coordinates, at least one per tensor.
pub fn grad_check(
    model: &mut Model,
    ex: &Example,
    variant: Variant,
    epsilon: f64,
    min_coords: usize,
    seed: u64,
) -> Result<GradCheck, TrainError> {
    if !(epsilon > 0.0) {
        return Err(TrainError::Epsilon(epsilon));
    }
    let (_, grads) = loss_and_grad(model, ex, variant)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_tensors = model.params.len();
    let mut coords: Vec<(usize, usize)> = (0..n_tensors).map(|p| (p, rng.gen_range(0..model.params.tensors()[p].len()))).collect();
    // Prefer coordinates the loss depends on: half from nonzero gradients.
    let nonzero: Vec<(usize, usize)> = grads
        .iter()
        .enumerate()
        .flat_map(|(p, t)| t.data.iter().enumerate().filter(|(_, v)| **v != 0.0).map(move |(e, _)| (p, e)))
        .collect();
    while coords.len() < min_coords {
        if rng.gen_bool(0.5) && !nonzero.is_empty() {
            coords.push(*nonzero.choose(&mut rng).expect("non-empty"));
        } else {
            let p = rng.gen_range(0..n_tensors);
            coords.push((p, rng.gen_range(0..model.params.tensors()[p].len())));
        }
    }
    let mut worst = (String::new(), 0, 0.0, 0.0);
    let mut max_rel: f64 = 0.0;
    for &(p, e) in &coords {
        let orig = model.params.tensors()[p].data[e];
        model.params.tensors_mut()[p].data[e] = orig + epsilon;
        let up = loss_value(model, ex, variant)?;
        model.params.tensors_mut()[p].data[e] = orig - epsilon;
        let down = loss_value(model, ex, variant)?;
        model.params.tensors_mut()[p].data[e] = orig;
        let num = (up - down) / (2.0 * epsilon);
        let ana = grads[p].data[e];
        let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(GRAD_CHECK_FLOOR);
        if rel >= max_rel {
            max_rel = rel;
            worst = (model.params.name(crate::tensor::ParamId(p)).to_owned(), e, ana, num);
        }
    }
    Ok(GradCheck { max_rel_error: max_rel, coordinates: coords.len(), tensors_covered: n_tensors, worst })
}

/// Decoupled first/second moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.tensors_mut().iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: [usize; 2],
    /// Byte offset into `tensors.bin`.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub variant: Variant,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab_digest: String,
    pub vocab_size: usize,
    pub step: usize,
    pub dev_metric: Option<f64>,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: Model,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";

impl Checkpoint {
    pub fn new(model: &Model, train: &TrainConfig, vocab: &Vocab, step: usize, dev_metric: Option<f64>) -> Self {
        let mut offset = 0;
        let tensors = model
            .params
            .iter()
            .map(|(_, name, t)| {
                let e = TensorEntry { name: name.to_owned(), dtype: "f64".into(), shape: [t.rows, t.cols], offset };
                offset += t.len() * 8;
                e
            })
            .collect();
        Self {
            manifest: Manifest {
                format_version: 1,
                variant: train.variant,
                model: model.config.clone(),
                train: train.clone(),
                vocab_digest: vocab.digest(),
                vocab_size: vocab.len(),
                step,
                dev_metric,
                seed: train.seed,
                tensors,
            },
            model: model.clone(),
        }
    }

    pub fn tensor_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.model.params.num_scalars() * 8);
        for t in self.model.params.tensors() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// SHA-256 over the manifest and tensor bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.manifest).expect("manifest serializes"));
        h.update(self.tensor_bytes());
        hex(&h.finalize())
    }

    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        let err = |e: std::io::Error| TrainError::Checkpoint(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir).map_err(err)?;
        let manifest = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(dir.join(MANIFEST_FILE), manifest + "\n").map_err(err)?;
        fs::write(dir.join(TENSORS_FILE), self.tensor_bytes()).map_err(err)
    }

    /// Loads a checkpoint and checks it against `vocab` when given.
    pub fn load(dir: &Path, vocab: Option<&Vocab>) -> Result<Self, TrainError> {
        let err = |e: String| TrainError::Checkpoint(format!("{}: {e}", dir.display()));
        let text = fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(|e| err(e.to_string()))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if let Some(v) = vocab {
            if v.digest() != manifest.vocab_digest {
                return Err(err("vocabulary digest does not match".into()));
            }
        }
        let bytes = fs::read(dir.join(TENSORS_FILE)).map_err(|e| err(e.to_string()))?;
        let mut model = Model::new(manifest.model.clone(), manifest.vocab_size, 0);
        if model.params.len() != manifest.tensors.len() {
            return Err(err(format!("expected {} tensors, manifest lists {}", model.params.len(), manifest.tensors.len())));
        }
        for entry in &manifest.tensors {
            let id = model.params.id(&entry.name).ok_or_else(|| err(format!("unknown tensor {}", entry.name)))?;
            let t = model.params.get_mut(id);
            if [t.rows, t.cols] != entry.shape || entry.dtype != "f64" {
                return Err(err(format!("tensor {} has shape {:?}/{}", entry.name, entry.shape, entry.dtype)));
            }
            let end = entry.offset + t.len() * 8;
            let raw = bytes.get(entry.offset..end).ok_or_else(|| err(format!("tensor {} out of range", entry.name)))?;
            for (v, chunk) in t.data.iter_mut().zip(raw.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
        }
        Ok(Self { manifest, model })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub dev_f1: Option<f64>,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("step,loss,lr,dev_f1\n");
    for r in rows {
        let dev = r.dev_f1.map(|v| format!("{v}")).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.lr, dev));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub metrics: Vec<MetricRow>,
}

/// Offline completion rate by the last turn over `examples` (sessions are
/// replayed with the human history).
pub fn dev_metric(model: &Model, variant: Variant, sessions: &[&Session], corpus: &Corpus, vocab: &Vocab) -> Result<f64, TrainError> {
    let agent = ModelAgent::new(model, variant, vocab);
    let mut succ = Vec::with_capacity(sessions.len());
    for s in sessions {
        let screen = corpus.screen(&s.screen_id).ok_or_else(|| TrainError::UnknownScreen(s.session_id.clone(), s.screen_id.clone()))?;
        let rec = replay_offline(&agent, s, screen, true).map_err(|e| TrainError::Eval(e.to_string()))?;
        succ.push(rec.success_turn);
    }
    f1_at(&succ, crate::screen::MAX_TURNS - 1).map_err(|e| TrainError::Eval(e.to_string()))
}

/// Runs the step loop and returns the best-dev and last checkpoints.
/// `metrics_path` receives the training curve as CSV when given.
pub fn train(corpus: &Corpus, vocab: &Vocab, cfg: &TrainConfig, metrics_path: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let train_s = corpus.sessions_in(SplitTag::Train);
    let mut dev_s = corpus.sessions_in(SplitTag::Dev);
    if train_s.is_empty() {
        return Err(TrainError::EmptySplit(SplitTag::Train));
    }
    if dev_s.is_empty() {
        return Err(TrainError::EmptySplit(SplitTag::Dev));
    }
    if let Some(k) = cfg.dev_limit {
        dev_s.truncate(k);
    }
    let examples = prepare_examples(&train_s, corpus, vocab, &cfg.model)?;
    let mut model = Model::new(cfg.model.clone(), vocab.len(), cfg.seed);
    let mut adam = Adam::new(&model.params, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_5eed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut metrics = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut last_good: Option<Checkpoint> = None;
    let mut csv = match metrics_path {
        Some(p) => Some(MetricsWriter::create(p)?),
        None => None,
    };
    for step in 0..cfg.total_steps {
        let lr = lr_at(step, cfg.lr, cfg.warmup_steps, cfg.total_steps);
        let mut grads = model.params.zeros_like();
        let mut loss_sum = 0.0;
        for b in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ex = &examples[order[cursor]];
            cursor += 1;
            let drop_seed = cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add((step * cfg.batch_size + b) as u64);
            let mut g = Graph::with_dropout(&model.params, cfg.model.dropout, ChaCha8Rng::seed_from_u64(drop_seed));
            let root = loss_node(&model, &mut g, ex, cfg.variant)?;
            g.backward(root, &mut grads);
            loss_sum += g.scalar(root);
        }
        let loss = loss_sum / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(TrainError::NaN { step, last_good: Box::new(last_good) });
        }
        for gr in grads.iter_mut() {
            gr.scale(1.0 / cfg.batch_size as f64);
        }
        clip_global_norm(&mut grads, cfg.grad_clip);
        adam.step(&mut model.params, &grads, lr);
        let done = step + 1;
        let dev_f1 = if done % cfg.eval_every == 0 || done == cfg.total_steps {
            let f1 = dev_metric(&model, cfg.variant, &dev_s, corpus, vocab)?;
            log::info!("step {done} loss {loss:.4} dev F1 {f1:.4}");
            let ck = Checkpoint::new(&model, cfg, vocab, done, Some(f1));
            if best.as_ref().is_none_or(|(b, _)| f1 > *b) {
                best = Some((f1, ck.clone()));
            }
            last_good = Some(ck);
            Some(f1)
        } else {
            None
        };
        let row = MetricRow { step: done, loss, lr, dev_f1 };
        if let Some(w) = csv.as_mut() {
            w.row(&row)?;
        }
        metrics.push(row);
    }
    let last = last_good.expect("the final step is always evaluated");
    let best = best.map(|(_, c)| c).expect("the final step is always evaluated");
    Ok(TrainOutcome { best, last, metrics })
}

struct MetricsWriter {
    path: PathBuf,
    file: fs::File,
}

impl MetricsWriter {
    fn create(path: &Path) -> Result<Self, TrainError> {
        let err = |e: std::io::Error| TrainError::Checkpoint(format!("{}: {e}", path.display()));
        if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(d).map_err(err)?;
        }
        let mut file = fs::File::create(path).map_err(err)?;
        file.write_all(b"step,loss,lr,dev_f1\n").map_err(err)?;
        Ok(Self { path: path.to_owned(), file })
    }

    fn row(&mut self, r: &MetricRow) -> Result<(), TrainError> {
        let line = metrics_csv(std::slice::from_ref(r));
        let body = line.split_once('\n').map(|(_, b)| b).unwrap_or("");
        self.file
            .write_all(body.as_bytes())
            .map_err(|e| TrainError::Checkpoint(format!("{}: {e}", self.path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{generate_gold_session, GoldStyle};
    use crate::screen::fixtures::five_object_screen;

    fn toy_example(turns: usize) -> (Model, Example) {
        let vocab = Vocab::bundled();
        let mut screen = five_object_screen();
        screen.objects.truncate(3);
        screen.objects[0].clickable = true;
        let style = if turns == 1 { GoldStyle::OneTurn } else { GoldStyle::AmbiguousMultiTurn(turns) };
        let session = generate_gold_session(&screen, 2, 5, style).unwrap();
        let model = Model::new(ModelConfig::toy(), vocab.len(), 11);
        let feats = Arc::new(screen_features(&screen, &vocab, &model.config).unwrap());
        let ex = prepare_example(&session, &screen, feats, &vocab);
        (model, ex)
    }

    #[test]
    fn one_turn_losses_coincide() {
        let (model, ex) = toy_example(1);
        let l: Vec<f64> = [Variant::Single, Variant::InsOnly, Variant::Multi, Variant::Imitation]
            .iter()
            .map(|&v| loss_value(&model, &ex, v).unwrap())
            .collect();
        assert!(l.iter().all(|x| *x == l[0]), "{l:?}");
        assert!(l[0] > 0.0);
    }

    #[test]
    fn uniform_scores_give_ln_n() {
        let (mut model, ex) = toy_example(1);
        for id in [model.dec.score_m, model.dec.score_wv, model.dec.score_wz] {
            model.params.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
        }
        let l = loss_value(&model, &ex, Variant::Multi).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12, "{l}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        for variant in Variant::ALL {
            let (mut model, ex) = toy_example(2);
            let r = grad_check(&mut model, &ex, variant, 1e-5, 200, 3).unwrap();
            assert!(r.max_rel_error < 1e-4, "{variant}: {r:?}");
            assert!(r.coordinates >= 200);
        }
    }

    #[test]
    fn zero_epsilon_rejected() {
        let (mut model, ex) = toy_example(1);
        assert!(matches!(grad_check(&mut model, &ex, Variant::Multi, 0.0, 10, 0), Err(TrainError::Epsilon(_))));
    }

    #[test]
    fn single_object_loss_is_constant() {
        let (model, mut ex) = toy_example(1);
        ex.clickable = vec![ex.target];
        let (l, grads) = loss_and_grad(&model, &ex, Variant::Single).unwrap();
        assert_eq!(l, 0.0);
        assert!(grads.iter().all(|g| g.data.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn schedule_shape() {
        let (peak, w, t) = (3e-4, 100, 1000);
        assert_eq!(lr_at(0, peak, w, t), 0.0);
        assert_eq!(lr_at(50, peak, w, t), peak / 2.0);
        assert_eq!(lr_at(100, peak, w, t), peak);
        assert!((lr_at(550, peak, w, t) - peak / 2.0).abs() < 1e-18);
        assert!(lr_at(1000, peak, w, t).abs() < 1e-18);
        let vals: Vec<f64> = (100..=1000).map(|s| lr_at(s, peak, w, t)).collect();
        assert!(vals.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Tensor::from_vec(1, 2, vec![3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data[0] - 0.6).abs() < 1e-15 && (g[0].data[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (model, ex) = toy_example(2);
        let vocab = Vocab::bundled();
        let cfg = TrainConfig { model: model.config.clone(), ..Default::default() };
        let ck = Checkpoint::new(&model, &cfg, &vocab, 7, Some(0.5));
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path(), Some(&vocab)).unwrap();
        assert_eq!(back.manifest, ck.manifest);
        assert_eq!(back.model.params, model.params);
        assert_eq!(loss_value(&back.model, &ex, Variant::Multi).unwrap().to_bits(), loss_value(&model, &ex, Variant::Multi).unwrap().to_bits());
        assert_eq!(back.digest(), ck.digest());
        let other = Vocab::from_lines("<unk>\n<empty>\n<sep>\nx\n").unwrap();
        assert!(Checkpoint::load(dir.path(), Some(&other)).is_err());
    }
}
