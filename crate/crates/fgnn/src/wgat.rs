//! Weighted graph attentional layer.
//!
//! Multi-head self-attention restricted to each node's in-neighborhood,
//! with the scalar edge weight appended to the attention input. Per
//! head k and edge (j → i, w):
//!
//!   e_ij = LeakyReLU₀.₂( att_k · [W_k x_i ‖ W_k x_j ‖ w_ij] )
//!   α_ij = softmax over N(i) of e_ij
//!   pre_i = Σ_{j ∈ N(i)} α_ij · W_k x_j
//!
//! Heads combine either by averaging before one outer ReLU (keeps the
//! feature width at d′, the default for stacked layers) or by
//! concatenating per-head ReLU outputs (width K·d′).

use rand::Rng;

use crate::autodiff::{Tape, Tensor, TensorId};
use crate::error::{FgnnError, Result};
use crate::layers::init_gaussian;
use crate::session_graph::SessionGraph;

pub const LEAKY_SLOPE: f64 = 0.2;

/// How per-head outputs merge into the layer output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadCombine {
    /// Average head pre-activations, then one ReLU; output width d′.
    Mean,
    /// Concatenate per-head ReLU outputs; output width K·d′.
    Concat,
}

impl std::str::FromStr for HeadCombine {
    type Err = FgnnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(HeadCombine::Mean),
            "concat" => Ok(HeadCombine::Concat),
            other => Err(FgnnError::Usage(format!(
                "unknown head combine mode '{other}' (expected mean|concat)"
            ))),
        }
    }
}

/// How raw edge weights enter the attention input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeWeightNorm {
    /// Feed the occurrence count as-is.
    None,
    /// Divide each weight by the source node's total outgoing weight.
    OutDegree,
}

impl std::str::FromStr for EdgeWeightNorm {
    type Err = FgnnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(EdgeWeightNorm::None),
            "out_degree" | "out-degree" => Ok(EdgeWeightNorm::OutDegree),
            other => Err(FgnnError::Usage(format!(
                "unknown edge weight norm '{other}' (expected none|out_degree)"
            ))),
        }
    }
}

/// One attention head: the shared linear map (used both inside the
/// attention input and for aggregation) and the attention vector of
/// length 2d′+1 (two transformed node vectors plus the edge weight).
#[derive(Debug, Clone, PartialEq)]
pub struct WgatHeadParams {
    pub weight: Tensor, // [d' × d]
    pub att: Tensor,    // [2d'+1 × 1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct WgatLayerParams {
    pub heads: Vec<WgatHeadParams>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl WgatLayerParams {
    pub fn new<R: Rng>(head_count: usize, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let heads = (0..head_count)
            .map(|_| WgatHeadParams {
                weight: init_gaussian(&[out_dim, in_dim], 0.0, 0.1, rng).with_grad(),
                att: init_gaussian(&[2 * out_dim + 1, 1], 0.0, 0.1, rng).with_grad(),
            })
            .collect();
        WgatLayerParams {
            heads,
            in_dim,
            out_dim,
        }
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn output_width(&self, combine: HeadCombine) -> usize {
        match combine {
            HeadCombine::Mean => self.out_dim,
            HeadCombine::Concat => self.out_dim * self.head_count(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct WgatHeadBinding {
    pub weight: TensorId,
    pub att: TensorId,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone)]
pub struct WgatLayerBinding {
    pub heads: Vec<WgatHeadBinding>,
}

impl WgatLayerBinding {
    pub fn bind(tape: &mut Tape, params: &WgatLayerParams) -> Self {
        WgatLayerBinding {
            heads: params
                .heads
                .iter()
                .map(|head| WgatHeadBinding {
                    weight: tape.leaf(&head.weight),
                    att: tape.leaf(&head.att),
                    in_dim: params.in_dim,
                    out_dim: params.out_dim,
                })
                .collect(),
        }
    }
}

/// Per-tape constants derived from one session graph, shared by all
/// layers and heads operating on it.
#[derive(Debug, Clone)]
pub struct GraphInputs {
    /// [E × 1] column of (possibly normalized) edge weights.
    pub edge_weights: TensorId,
    /// Edge sources / destinations in edge order.
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// Edge-id groups per destination node.
    pub segments: Vec<Vec<usize>>,
}

impl GraphInputs {
    pub fn bind(tape: &mut Tape, graph: &SessionGraph, norm: EdgeWeightNorm) -> Self {
        let out_sums = graph.out_weight_sums();
        let weights: Vec<f64> = graph
            .edges()
            .iter()
            .map(|e| {
                let w = f64::from(e.weight);
                match norm {
                    EdgeWeightNorm::None => w,
                    EdgeWeightNorm::OutDegree => w / out_sums[e.src],
                }
            })
            .collect();
        GraphInputs {
            edge_weights: tape.constant_column(weights),
            src: graph.edges().iter().map(|e| e.src).collect(),
            dst: graph.edges().iter().map(|e| e.dst).collect(),
            segments: graph.in_edge_segments(),
        }
    }
}

fn check_feature_rows(tape: &Tape, features: TensorId, graph: &SessionGraph) -> Result<()> {
    let shape = tape.shape(features);
    if shape.len() != 2 || shape[0] != graph.node_count() {
        return Err(FgnnError::ShapeMismatch {
            op: "wgat features",
            lhs: shape.to_vec(),
            rhs: vec![graph.node_count(), 0],
        });
    }
    Ok(())
}

/// The transformed node features W_k X, shape [n × d′].
fn transformed_features(
    tape: &mut Tape,
    head: &WgatHeadBinding,
    features: TensorId,
) -> Result<TensorId> {
    let w_t = tape.transpose(head.weight)?;
    tape.matmul(features, w_t)
}

/// Raw attention logits for one head, one entry per directed edge
/// (self-loops included), in the graph's edge order.
pub fn attention_logits(
    tape: &mut Tape,
    head: &WgatHeadBinding,
    features: TensorId,
    graph: &SessionGraph,
    inputs: &GraphInputs,
) -> Result<TensorId> {
    check_feature_rows(tape, features, graph)?;
    let wx = transformed_features(tape, head, features)?;
    logits_from_transformed(tape, head, wx, inputs)
}

fn logits_from_transformed(
    tape: &mut Tape,
    head: &WgatHeadBinding,
    wx: TensorId,
    inputs: &GraphInputs,
) -> Result<TensorId> {
    let d_out = head.out_dim;
    let att_dst = tape.slice_rows(head.att, 0, d_out)?;
    let att_src = tape.slice_rows(head.att, d_out, d_out)?;
    let att_weight = tape.slice_rows(head.att, 2 * d_out, 1)?; // [1 × 1]

    let dst_scores = tape.matmul(wx, att_dst)?; // [n × 1]
    let src_scores = tape.matmul(wx, att_src)?;
    let per_edge_dst = tape.gather_rows(dst_scores, &inputs.dst)?;
    let per_edge_src = tape.gather_rows(src_scores, &inputs.src)?;
    let weight_term = tape.matmul(inputs.edge_weights, att_weight)?; // [E × 1]

    let partial = tape.add(per_edge_dst, per_edge_src)?;
    let raw = tape.add(partial, weight_term)?;
    tape.leaky_relu(raw, LEAKY_SLOPE)
}

/// Softmax of edge logits within each destination's in-neighborhood.
pub fn attention_normalize(
    tape: &mut Tape,
    logits: TensorId,
    inputs: &GraphInputs,
) -> Result<TensorId> {
    tape.segment_softmax(logits, &inputs.segments)
}

/// Pre-activation aggregate for one head: row i is Σ_j α_ij · W_k x_j.
fn head_preactivation(
    tape: &mut Tape,
    alpha: TensorId,
    wx: TensorId,
    inputs: &GraphInputs,
) -> Result<TensorId> {
    let gathered = tape.gather_rows(wx, &inputs.src)?; // [E × d']
    let weighted = tape.scale_rows(gathered, alpha)?;
    tape.segment_sum(weighted, &inputs.segments)
}

/// One head's output with its own ReLU: x′_i = ReLU(Σ_j α_ij W_k x_j).
pub fn head_aggregate(
    tape: &mut Tape,
    head: &WgatHeadBinding,
    alpha: TensorId,
    features: TensorId,
    graph: &SessionGraph,
    inputs: &GraphInputs,
) -> Result<TensorId> {
    check_feature_rows(tape, features, graph)?;
    let wx = transformed_features(tape, head, features)?;
    let pre = head_preactivation(tape, alpha, wx, inputs)?;
    tape.relu(pre)
}

/// Full multi-head layer output plus the per-head attention coefficient
/// columns (one [E × 1] tensor per head), for diagnostics.
pub fn wgat_forward_traced(
    tape: &mut Tape,
    layer: &WgatLayerBinding,
    features: TensorId,
    graph: &SessionGraph,
    inputs: &GraphInputs,
    combine: HeadCombine,
) -> Result<(TensorId, Vec<TensorId>)> {
    check_feature_rows(tape, features, graph)?;
    if layer.heads.is_empty() {
        return Err(FgnnError::Contract("wgat layer with zero heads".into()));
    }

    let mut alphas = Vec::with_capacity(layer.heads.len());
    let mut combined: Option<TensorId> = None;
    let mut concat_parts = Vec::new();

    for head in &layer.heads {
        let wx = transformed_features(tape, head, features)?;
        let logits = logits_from_transformed(tape, head, wx, inputs)?;
        let alpha = attention_normalize(tape, logits, inputs)?;
        alphas.push(alpha);
        let pre = head_preactivation(tape, alpha, wx, inputs)?;
        match combine {
            HeadCombine::Mean => {
                combined = Some(match combined {
                    None => pre,
                    Some(acc) => tape.add(acc, pre)?,
                });
            }
            HeadCombine::Concat => {
                concat_parts.push(tape.relu(pre)?);
            }
        }
    }

    let out = match combine {
        HeadCombine::Mean => {
            let total = combined.expect("at least one head");
            let mean = tape.scale(total, 1.0 / layer.heads.len() as f64)?;
            tape.relu(mean)?
        }
        HeadCombine::Concat => tape.concat_cols(&concat_parts)?,
    };
    Ok((out, alphas))
}

/// Full multi-head layer output.
pub fn wgat_forward(
    tape: &mut Tape,
    layer: &WgatLayerBinding,
    features: TensorId,
    graph: &SessionGraph,
    inputs: &GraphInputs,
    combine: HeadCombine,
) -> Result<TensorId> {
    wgat_forward_traced(tape, layer, features, graph, inputs, combine).map(|(out, _)| out)
}
