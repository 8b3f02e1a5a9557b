//! The assembled model: embedding → stacked weighted graph attention →
//! readout → scoring over the whole vocabulary.
//!
//! Scoring ties input and output embeddings: the projected session
//! embedding is compared against every item's *initial* embedding row,
//! ẑ = X⁰ · (W_out · q*), so unseen items still receive scores.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, TensorId};
use crate::error::{FgnnError, Result};
use crate::layers::{embed_lookup, EmbeddingTable};
use crate::readout::{readout_forward_traced, ReadoutBinding, ReadoutKind, ReadoutModule};
use crate::session_graph::{GraphConfig, SessionGraph};
use crate::wgat::{
    wgat_forward_traced, EdgeWeightNorm, GraphInputs, HeadCombine, WgatLayerBinding,
    WgatLayerParams,
};

/// Architecture hyperparameters; defaults follow the reference setup
/// (d = 100, three 8-head attention layers, three readout steps).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Architecture {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub readout_steps: usize,
    pub combine: HeadCombine,
    pub readout: ReadoutKind,
    pub edge_weight_norm: EdgeWeightNorm,
    pub selfloop_clamp: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            embed_dim: 100,
            layers: 3,
            heads: 8,
            readout_steps: 3,
            combine: HeadCombine::Mean,
            readout: ReadoutKind::Set2Set,
            edge_weight_norm: EdgeWeightNorm::None,
            selfloop_clamp: false,
        }
    }
}

impl Architecture {
    pub fn graph_config(&self) -> GraphConfig {
        GraphConfig {
            selfloop_clamp: self.selfloop_clamp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("readout_steps", self.readout_steps),
        ] {
            if v == 0 {
                return Err(FgnnError::Usage(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// All learnable arrays of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub embedding: EmbeddingTable,
    pub layers: Vec<WgatLayerParams>,
    pub readout: ReadoutModule,
    pub w_out: Tensor, // [d × readout width]
}

impl ModelParams {
    /// Gaussian(0, 0.1) everywhere except the readout GRU's hidden
    /// weights, whose per-gate square blocks are orthogonal.
    pub fn init<R: Rng>(arch: &Architecture, vocab_size: usize, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        if vocab_size == 0 {
            return Err(FgnnError::Usage("vocabulary must be non-empty".into()));
        }
        let d = arch.embed_dim;
        let embedding = EmbeddingTable::new(vocab_size, d, rng);
        let mut layers = Vec::with_capacity(arch.layers);
        let mut width = d;
        for _ in 0..arch.layers {
            let layer = WgatLayerParams::new(arch.heads, width, d, rng);
            width = layer.output_width(arch.combine);
            layers.push(layer);
        }
        let readout = ReadoutModule::new(arch.readout, width, arch.readout_steps, rng);
        let readout_width = arch.readout.output_width(width);
        let w_out = crate::layers::init_gaussian(&[d, readout_width], 0.0, 0.1, rng).with_grad();
        Ok(ModelParams {
            arch: arch.clone(),
            embedding,
            layers,
            readout,
            w_out,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.vocab_size()
    }

    /// Stable name → tensor enumeration; the checkpoint and optimizer
    /// orderings both come from here.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("embedding".into(), &self.embedding.weights)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (k, head) in layer.heads.iter().enumerate() {
                out.push((format!("layer{l}.head{k}.weight"), &head.weight));
                out.push((format!("layer{l}.head{k}.att"), &head.att));
            }
        }
        match &self.readout {
            ReadoutModule::Set2Set(s) => {
                out.push(("readout.gru.input_weights".into(), &s.gru.input_weights));
                out.push(("readout.gru.hidden_weights".into(), &s.gru.hidden_weights));
                out.push(("readout.gru.input_bias".into(), &s.gru.input_bias));
                out.push(("readout.gru.hidden_bias".into(), &s.gru.hidden_bias));
            }
            ReadoutModule::Pool(_) => {}
            ReadoutModule::LastAttention(p) => {
                out.push(("readout.att.last_map".into(), &p.last_map));
                out.push(("readout.att.node_map".into(), &p.node_map));
                out.push(("readout.att.bias".into(), &p.bias));
                out.push(("readout.att.score".into(), &p.score));
            }
        }
        out.push(("w_out".into(), &self.w_out));
        out
    }

    pub fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> =
            vec![("embedding".into(), &mut self.embedding.weights)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (k, head) in layer.heads.iter_mut().enumerate() {
                out.push((format!("layer{l}.head{k}.weight"), &mut head.weight));
                out.push((format!("layer{l}.head{k}.att"), &mut head.att));
            }
        }
        match &mut self.readout {
            ReadoutModule::Set2Set(s) => {
                out.push(("readout.gru.input_weights".into(), &mut s.gru.input_weights));
                out.push((
                    "readout.gru.hidden_weights".into(),
                    &mut s.gru.hidden_weights,
                ));
                out.push(("readout.gru.input_bias".into(), &mut s.gru.input_bias));
                out.push(("readout.gru.hidden_bias".into(), &mut s.gru.hidden_bias));
            }
            ReadoutModule::Pool(_) => {}
            ReadoutModule::LastAttention(p) => {
                out.push(("readout.att.last_map".into(), &mut p.last_map));
                out.push(("readout.att.node_map".into(), &mut p.node_map));
                out.push(("readout.att.bias".into(), &mut p.bias));
                out.push(("readout.att.score".into(), &mut p.score));
            }
        }
        out.push(("w_out".into(), &mut self.w_out));
        out
    }

    /// Bind every parameter onto a tape for one or more forward passes.
    pub fn bind(&self, tape: &mut Tape) -> ModelBinding {
        let embedding = tape.leaf(&self.embedding.weights);
        let layers = self
            .layers
            .iter()
            .map(|layer| WgatLayerBinding::bind(tape, layer))
            .collect();
        let readout = ReadoutBinding::bind(tape, &self.readout);
        let w_out = tape.leaf(&self.w_out);
        ModelBinding {
            embedding,
            layers,
            readout,
            w_out,
        }
    }

    /// Pull tape gradients back into the parameters' own grad slots
    /// (additively). Every bound parameter ends up with a gradient.
    pub fn absorb_grads(&mut self, tape: &Tape, binding: &ModelBinding) -> Result<()> {
        let ids = binding.flat_ids();
        let mut params = self.named_parameters_mut();
        if ids.len() != params.len() {
            return Err(FgnnError::Contract(format!(
                "binding carries {} tensors, model has {}",
                ids.len(),
                params.len()
            )));
        }
        for ((_, param), id) in params.iter_mut().zip(ids) {
            let grad = tape.grad(id).ok_or_else(|| {
                FgnnError::Contract("backward() has not populated a bound parameter".into())
            })?;
            param.accumulate_grad(grad);
        }
        Ok(())
    }

    /// Rebuild a binding from a flat id list in
    /// [`ModelParams::named_parameters`] order; the counterpart of
    /// [`ModelParams::bind`] for leaves bound by external code (the
    /// gradient checker).
    pub fn binding_from_ids(&self, ids: &[TensorId]) -> ModelBinding {
        let mut cursor = 0usize;
        let mut next = || {
            let id = ids[cursor];
            cursor += 1;
            id
        };
        let embedding = next();
        let layers = self
            .layers
            .iter()
            .map(|layer| crate::wgat::WgatLayerBinding {
                heads: layer
                    .heads
                    .iter()
                    .map(|_| crate::wgat::WgatHeadBinding {
                        weight: next(),
                        att: next(),
                        in_dim: layer.in_dim,
                        out_dim: layer.out_dim,
                    })
                    .collect(),
            })
            .collect();
        let readout = match &self.readout {
            ReadoutModule::Set2Set(s) => ReadoutBinding::Set2Set {
                gru: crate::layers::GruBinding {
                    input_weights: next(),
                    hidden_weights: next(),
                    input_bias: next(),
                    hidden_bias: next(),
                    input_dim: s.gru.input_dim,
                    hidden_dim: s.gru.hidden_dim,
                },
                steps: s.steps,
            },
            ReadoutModule::Pool(mode) => ReadoutBinding::Pool(*mode),
            ReadoutModule::LastAttention(_) => ReadoutBinding::LastAttention {
                last_map: next(),
                node_map: next(),
                bias: next(),
                score: next(),
            },
        };
        let w_out = next();
        ModelBinding {
            embedding,
            layers,
            readout,
            w_out,
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, param) in self.named_parameters_mut() {
            param.zero_grad();
        }
    }
}

/// Tape handles for one bound model.
#[derive(Debug, Clone)]
pub struct ModelBinding {
    pub embedding: TensorId,
    pub layers: Vec<WgatLayerBinding>,
    pub readout: ReadoutBinding,
    pub w_out: TensorId,
}

impl ModelBinding {
    /// Ids in the same order as [`ModelParams::named_parameters`].
    pub fn flat_ids(&self) -> Vec<TensorId> {
        let mut out = vec![self.embedding];
        for layer in &self.layers {
            for head in &layer.heads {
                out.push(head.weight);
                out.push(head.att);
            }
        }
        match &self.readout {
            ReadoutBinding::Set2Set { gru, .. } => {
                out.extend([
                    gru.input_weights,
                    gru.hidden_weights,
                    gru.input_bias,
                    gru.hidden_bias,
                ]);
            }
            ReadoutBinding::Pool(_) => {}
            ReadoutBinding::LastAttention {
                last_map,
                node_map,
                bias,
                score,
            } => out.extend([*last_map, *node_map, *bias, *score]),
        }
        out.push(self.w_out);
        out
    }
}

/// Attention coefficients captured during one forward pass: one [E × 1]
/// column per (layer, head), and one node distribution per readout step.
pub struct ForwardTrace {
    pub logits: TensorId,
    pub layer_attention: Vec<Vec<TensorId>>,
    pub readout_attention: Vec<TensorId>,
}

/// Forward pass to vocabulary logits ẑ as an [m × 1] column.
pub fn forward_logits(
    tape: &mut Tape,
    arch: &Architecture,
    binding: &ModelBinding,
    graph: &SessionGraph,
) -> Result<TensorId> {
    forward_traced(tape, arch, binding, graph).map(|t| t.logits)
}

pub fn forward_traced(
    tape: &mut Tape,
    arch: &Architecture,
    binding: &ModelBinding,
    graph: &SessionGraph,
) -> Result<ForwardTrace> {
    let vocab = tape.shape(binding.embedding)[0];
    for &item in graph.node_items() {
        if item >= vocab {
            return Err(FgnnError::IndexOutOfRange {
                what: "graph item",
                index: item,
                size: vocab,
            });
        }
    }

    let inputs = GraphInputs::bind(tape, graph, arch.edge_weight_norm);
    let mut features = embed_lookup(tape, binding.embedding, graph.node_items())?;
    let mut layer_attention = Vec::with_capacity(binding.layers.len());
    for layer in &binding.layers {
        let (next, alphas) =
            wgat_forward_traced(tape, layer, features, graph, &inputs, arch.combine)?;
        features = next;
        layer_attention.push(alphas);
    }

    let trace = readout_forward_traced(tape, &binding.readout, features, graph.last_node())?;
    let projected = tape.matmul(binding.w_out, trace.output)?; // [d × 1]
    let logits = tape.matmul(binding.embedding, projected)?; // [m × 1]
    Ok(ForwardTrace {
        logits,
        layer_attention,
        readout_attention: trace.attention_steps,
    })
}

/// Per-example cross-entropy on the tape (fused log-softmax form).
pub fn loss_on_tape(tape: &mut Tape, logits: TensorId, label: usize) -> Result<TensorId> {
    tape.cross_entropy_logits(logits, label)
}

/// −log ŷ[label] from an already-normalized distribution.
pub fn nll(probabilities: &[f64], label: usize) -> Result<f64> {
    if label >= probabilities.len() {
        return Err(FgnnError::IndexOutOfRange {
            what: "nll label",
            index: label,
            size: probabilities.len(),
        });
    }
    Ok(-probabilities[label].ln())
}

/// Scores over the whole vocabulary for one session, with the derived
/// full ranking (descending probability, ties by ascending item index).
#[derive(Debug, Clone)]
pub struct RankedResult {
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub ranking: Vec<usize>,
}

impl RankedResult {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probabilities: Vec<f64> = scores.iter().map(|&z| (z - max).exp()).collect();
        let total: f64 = probabilities.iter().sum();
        for p in &mut probabilities {
            *p /= total;
        }
        let mut ranking: Vec<usize> = (0..scores.len()).collect();
        ranking.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        RankedResult {
            scores,
            probabilities,
            ranking,
        }
    }
}

/// Run one session through the model and rank the whole item set.
pub fn forward(params: &ModelParams, sequence: &[usize]) -> Result<RankedResult> {
    let graph = SessionGraph::build_with(sequence, params.arch.graph_config())?;
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape);
    let logits = forward_logits(&mut tape, &params.arch, &binding, &graph)?;
    Ok(RankedResult::from_scores(tape.values(logits).to_vec()))
}

/// First K of the ranking; `1 ≤ K ≤ m`.
pub fn predict_topk(result: &RankedResult, k: usize) -> Result<&[usize]> {
    let m = result.ranking.len();
    if k == 0 || k > m {
        return Err(FgnnError::Usage(format!("top-K size {k} outside 1..={m}")));
    }
    Ok(&result.ranking[..k])
}
