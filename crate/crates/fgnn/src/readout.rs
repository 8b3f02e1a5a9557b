//! Graph-level embedding generators.
//!
//! The default is an order-learning set2set readout: a GRU evolves a
//! query vector over T processing steps, each step attending over all
//! node features and appending the attention-weighted mixture to the
//! query. Ablation alternatives: coordinate-wise mean/sum/max pooling
//! and self-attention on the last input item.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, TensorId};
use crate::error::{FgnnError, Result};
use crate::layers::{gru_cell, init_gaussian, GruBinding, GruCellParams};

/// Which readout variant a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutKind {
    Set2Set,
    Mean,
    Sum,
    Max,
    LastAttention,
}

impl std::str::FromStr for ReadoutKind {
    type Err = FgnnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "set2set" => Ok(ReadoutKind::Set2Set),
            "mean" => Ok(ReadoutKind::Mean),
            "sum" => Ok(ReadoutKind::Sum),
            "max" => Ok(ReadoutKind::Max),
            "last_attention" => Ok(ReadoutKind::LastAttention),
            other => Err(FgnnError::Usage(format!(
                "unknown readout '{other}' (expected set2set|mean|sum|max|last_attention)"
            ))),
        }
    }
}

impl ReadoutKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReadoutKind::Set2Set => "set2set",
            ReadoutKind::Mean => "mean",
            ReadoutKind::Sum => "sum",
            ReadoutKind::Max => "max",
            ReadoutKind::LastAttention => "last_attention",
        }
    }

    /// Output width given node feature width d.
    pub fn output_width(&self, d: usize) -> usize {
        match self {
            ReadoutKind::Set2Set | ReadoutKind::LastAttention => 2 * d,
            _ => d,
        }
    }
}

/// Set2set parameters: a GRU with input 2d and hidden d, unrolled for
/// `steps` processing steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Set2SetParams {
    pub gru: GruCellParams,
    pub steps: usize,
}

impl Set2SetParams {
    pub fn new<R: Rng>(d: usize, steps: usize, rng: &mut R) -> Self {
        Set2SetParams {
            gru: GruCellParams::new(2 * d, d, rng),
            steps,
        }
    }
}

/// Last-item attention parameters:
/// e_i = v · sigmoid(A·x_last + B·x_i + c).
#[derive(Debug, Clone, PartialEq)]
pub struct LastAttentionParams {
    pub last_map: Tensor, // A: [d × d]
    pub node_map: Tensor, // B: [d × d]
    pub bias: Tensor,     // c: [d × 1]
    pub score: Tensor,    // v: [d × 1]
}

impl LastAttentionParams {
    pub fn new<R: Rng>(d: usize, rng: &mut R) -> Self {
        LastAttentionParams {
            last_map: init_gaussian(&[d, d], 0.0, 0.1, rng).with_grad(),
            node_map: init_gaussian(&[d, d], 0.0, 0.1, rng).with_grad(),
            bias: init_gaussian(&[d, 1], 0.0, 0.1, rng).with_grad(),
            score: init_gaussian(&[d, 1], 0.0, 0.1, rng).with_grad(),
        }
    }
}

/// A readout module with whatever parameters its variant needs.
#[derive(Debug, Clone, PartialEq)]
pub enum ReadoutModule {
    Set2Set(Set2SetParams),
    Pool(PoolMode),
    LastAttention(LastAttentionParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Mean,
    Sum,
    Max,
}

impl ReadoutModule {
    pub fn new<R: Rng>(kind: ReadoutKind, d: usize, steps: usize, rng: &mut R) -> Self {
        match kind {
            ReadoutKind::Set2Set => ReadoutModule::Set2Set(Set2SetParams::new(d, steps, rng)),
            ReadoutKind::Mean => ReadoutModule::Pool(PoolMode::Mean),
            ReadoutKind::Sum => ReadoutModule::Pool(PoolMode::Sum),
            ReadoutKind::Max => ReadoutModule::Pool(PoolMode::Max),
            ReadoutKind::LastAttention => {
                ReadoutModule::LastAttention(LastAttentionParams::new(d, rng))
            }
        }
    }

    pub fn kind(&self) -> ReadoutKind {
        match self {
            ReadoutModule::Set2Set(_) => ReadoutKind::Set2Set,
            ReadoutModule::Pool(PoolMode::Mean) => ReadoutKind::Mean,
            ReadoutModule::Pool(PoolMode::Sum) => ReadoutKind::Sum,
            ReadoutModule::Pool(PoolMode::Max) => ReadoutKind::Max,
            ReadoutModule::LastAttention(_) => ReadoutKind::LastAttention,
        }
    }
}

#[derive(Debug, Clone)]
pub enum ReadoutBinding {
    Set2Set {
        gru: GruBinding,
        steps: usize,
    },
    Pool(PoolMode),
    LastAttention {
        last_map: TensorId,
        node_map: TensorId,
        bias: TensorId,
        score: TensorId,
    },
}

impl ReadoutBinding {
    pub fn bind(tape: &mut Tape, module: &ReadoutModule) -> Self {
        match module {
            ReadoutModule::Set2Set(params) => ReadoutBinding::Set2Set {
                gru: GruBinding::bind(tape, &params.gru),
                steps: params.steps,
            },
            ReadoutModule::Pool(mode) => ReadoutBinding::Pool(*mode),
            ReadoutModule::LastAttention(params) => ReadoutBinding::LastAttention {
                last_map: tape.leaf(&params.last_map),
                node_map: tape.leaf(&params.node_map),
                bias: tape.leaf(&params.bias),
                score: tape.leaf(&params.score),
            },
        }
    }
}

/// Per-step node attention distributions captured for diagnostics.
pub struct ReadoutTrace {
    pub output: TensorId,
    pub attention_steps: Vec<TensorId>,
}

/// Dispatch to the bound variant. `node_features` is [n × d]; the output
/// is a column of the variant's width.
pub fn readout_forward(
    tape: &mut Tape,
    binding: &ReadoutBinding,
    node_features: TensorId,
    last_node: usize,
) -> Result<TensorId> {
    readout_forward_traced(tape, binding, node_features, last_node).map(|t| t.output)
}

pub fn readout_forward_traced(
    tape: &mut Tape,
    binding: &ReadoutBinding,
    node_features: TensorId,
    last_node: usize,
) -> Result<ReadoutTrace> {
    let shape = tape.shape(node_features);
    if shape.len() != 2 || shape[0] == 0 {
        return Err(FgnnError::Contract(format!(
            "readout needs a non-empty [n × d] feature matrix, got {shape:?}"
        )));
    }
    let n = shape[0];
    if last_node >= n {
        return Err(FgnnError::IndexOutOfRange {
            what: "readout last_node",
            index: last_node,
            size: n,
        });
    }
    match binding {
        ReadoutBinding::Set2Set { gru, steps } => set2set_readout(tape, gru, *steps, node_features),
        ReadoutBinding::Pool(mode) => Ok(ReadoutTrace {
            output: pool_readout(tape, node_features, *mode)?,
            attention_steps: Vec::new(),
        }),
        ReadoutBinding::LastAttention {
            last_map,
            node_map,
            bias,
            score,
        } => last_item_attention_readout(
            tape,
            *last_map,
            *node_map,
            *bias,
            *score,
            node_features,
            last_node,
        ),
    }
}

/// T unrolled set2set steps; returns q*_T = q_T ‖ r_T as a [2d × 1]
/// column. The query starts at zero and the GRU hidden state is the
/// previous step's query.
pub fn set2set_readout(
    tape: &mut Tape,
    gru: &GruBinding,
    steps: usize,
    node_features: TensorId,
) -> Result<ReadoutTrace> {
    if steps == 0 {
        return Err(FgnnError::Contract(
            "set2set readout needs at least one processing step".into(),
        ));
    }
    let n = tape.shape(node_features)[0];
    let d = tape.shape(node_features)[1];
    if gru.input_dim != 2 * d || gru.hidden_dim != d {
        return Err(FgnnError::ShapeMismatch {
            op: "set2set gru",
            lhs: vec![gru.input_dim, gru.hidden_dim],
            rhs: vec![2 * d, d],
        });
    }

    let all_nodes: Vec<Vec<usize>> = vec![(0..n).collect()];
    let mut q_star = tape.constant(vec![2 * d, 1], vec![0.0; 2 * d])?;
    let mut hidden = tape.constant(vec![d, 1], vec![0.0; d])?;
    let mut attention_steps = Vec::with_capacity(steps);

    for _ in 0..steps {
        let query = gru_cell(tape, gru, q_star, hidden)?; // [d × 1]
        hidden = query;
        let scores = tape.matmul(node_features, query)?; // e_i = ⟨x_i, q⟩
        let attention = tape.segment_softmax(scores, &all_nodes)?;
        attention_steps.push(attention);
        let features_t = tape.transpose(node_features)?;
        let mixture = tape.matmul(features_t, attention)?; // r = Xᵀ a, [d × 1]
        q_star = tape.concat_rows(&[query, mixture])?;
    }
    Ok(ReadoutTrace {
        output: q_star,
        attention_steps,
    })
}

/// Coordinate-wise reduction over nodes, returned as a [d × 1] column.
pub fn pool_readout(tape: &mut Tape, node_features: TensorId, mode: PoolMode) -> Result<TensorId> {
    let n = tape.shape(node_features)[0];
    let d = tape.shape(node_features)[1];
    match mode {
        PoolMode::Sum => {
            let all: Vec<Vec<usize>> = vec![(0..n).collect()];
            let row = tape.segment_sum(node_features, &all)?; // [1 × d]
            tape.transpose(row)
        }
        PoolMode::Mean => {
            let all: Vec<Vec<usize>> = vec![(0..n).collect()];
            let row = tape.segment_sum(node_features, &all)?;
            let scaled = tape.scale(row, 1.0 / n as f64)?;
            tape.transpose(scaled)
        }
        PoolMode::Max => {
            // Columnwise max via per-node row slices: ties keep the
            // earliest row, matching the gather gradient route.
            let values = tape.values(node_features);
            let mut argmax = vec![0usize; d];
            for j in 0..d {
                let mut best = values[j];
                for i in 1..n {
                    if values[i * d + j] > best {
                        best = values[i * d + j];
                        argmax[j] = i;
                    }
                }
            }
            // Select each winning entry: gather the winning row per
            // column, then mask to the diagonal and sum columns.
            let picked = tape.gather_rows(node_features, &argmax)?; // [d × d]
            let mut mask = vec![0.0; d * d];
            for j in 0..d {
                mask[j * d + j] = 1.0;
            }
            let mask = tape.constant(vec![d, d], mask)?;
            let diag = tape.mul(picked, mask)?;
            let ones = tape.constant(vec![1, d], vec![1.0; d])?;
            let row = tape.matmul(ones, diag)?; // [1 × d]
            tape.transpose(row)
        }
    }
}

/// Attention over nodes driven by the last input item:
/// e_i = v·σ(A·x_last + B·x_i + c), output s_global ‖ x_last as
/// [2d × 1] for drop-in use where set2set fits.
pub fn last_item_attention_readout(
    tape: &mut Tape,
    last_map: TensorId,
    node_map: TensorId,
    bias: TensorId,
    score: TensorId,
    node_features: TensorId,
    last_node: usize,
) -> Result<ReadoutTrace> {
    let n = tape.shape(node_features)[0];

    let last_row = tape.gather_rows(node_features, &[last_node])?; // [1 × d]
    let last_col = tape.transpose(last_row)?; // [d × 1]
    let mapped_last = tape.matmul(last_map, last_col)?;
    let base = tape.add(mapped_last, bias)?; // [d × 1]

    // Broadcast the shared term to every node row via a ones column.
    let base_row = tape.transpose(base)?;
    let ones = tape.constant(vec![n, 1], vec![1.0; n])?;
    let broadcast = tape.matmul(ones, base_row)?; // [n × d]

    let node_map_t = tape.transpose(node_map)?;
    let mapped_nodes = tape.matmul(node_features, node_map_t)?; // [n × d]
    let pre = tape.add(mapped_nodes, broadcast)?;
    let gate = tape.sigmoid(pre)?;
    let scores = tape.matmul(gate, score)?; // [n × 1]

    let all_nodes: Vec<Vec<usize>> = vec![(0..n).collect()];
    let attention = tape.segment_softmax(scores, &all_nodes)?;
    let features_t = tape.transpose(node_features)?;
    let global = tape.matmul(features_t, attention)?; // [d × 1]
    let output = tape.concat_rows(&[global, last_col])?;
    Ok(ReadoutTrace {
        output,
        attention_steps: vec![attention],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradients, GradCheckConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let values = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, values).unwrap()
    }

    fn eval_variant(module: &ReadoutModule, features: &Tensor, last_node: usize) -> Vec<f64> {
        let mut tape = Tape::new();
        let binding = ReadoutBinding::bind(&mut tape, module);
        let f = tape.leaf(features);
        let out = readout_forward(&mut tape, &binding, f, last_node).unwrap();
        tape.values(out).to_vec()
    }

    #[test]
    fn single_node_set2set_appends_that_node() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = Set2SetParams::new(3, 3, &mut rng);
        let features = random_features(&mut rng, 1, 3);
        let out = eval_variant(&ReadoutModule::Set2Set(params), &features, 0);
        // q*_T = q_T ‖ x_0 regardless of the GRU parameters.
        assert_eq!(out.len(), 6);
        assert_eq!(&out[3..6], features.values());
    }

    #[test]
    fn identical_nodes_attend_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = Set2SetParams::new(3, 2, &mut rng);
        let row: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let features = Tensor::matrix(2, 3, [row.clone(), row.clone()].concat()).unwrap();

        let mut tape = Tape::new();
        let binding = ReadoutBinding::bind(&mut tape, &ReadoutModule::Set2Set(params));
        let f = tape.leaf(&features);
        let trace = readout_forward_traced(&mut tape, &binding, f, 1).unwrap();
        for step in &trace.attention_steps {
            let a = tape.values(*step);
            assert!((a[0] - 0.5).abs() < 1e-12 && (a[1] - 0.5).abs() < 1e-12);
        }
        let out = tape.values(trace.output);
        for (o, r) in out[3..6].iter().zip(&row) {
            assert!((o - r).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_sums_to_one_each_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = Set2SetParams::new(4, 3, &mut rng);
        for _ in 0..10 {
            let n = rng.gen_range(1..7);
            let features = random_features(&mut rng, n, 4);
            let mut tape = Tape::new();
            let binding = ReadoutBinding::bind(&mut tape, &ReadoutModule::Set2Set(params.clone()));
            let f = tape.leaf(&features);
            let trace = readout_forward_traced(&mut tape, &binding, f, 0).unwrap();
            assert_eq!(trace.attention_steps.len(), 3);
            for step in &trace.attention_steps {
                let total: f64 = tape.values(*step).iter().sum();
                assert!((total - 1.0).abs() <= 1e-9);
                assert!(tape.values(*step).iter().all(|&a| a > 0.0));
            }
        }
    }

    #[test]
    fn set2set_is_permutation_invariant_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = Set2SetParams::new(3, 3, &mut rng);
        let module = ReadoutModule::Set2Set(params);
        let features = random_features(&mut rng, 4, 3);
        let perm = [2usize, 0, 3, 1];
        let mut permuted_values = vec![0.0; 12];
        for old in 0..4 {
            for j in 0..3 {
                permuted_values[perm[old] * 3 + j] = features.values()[old * 3 + j];
            }
        }
        let permuted = Tensor::matrix(4, 3, permuted_values).unwrap();

        let base = eval_variant(&module, &features, 0);
        let relabeled = eval_variant(&module, &permuted, perm[0]);
        for (a, b) in base.iter().zip(&relabeled) {
            assert!((a - b).abs() <= 1e-9);
        }
        // Fixed inputs, bit-identical reruns.
        assert_eq!(base, eval_variant(&module, &features, 0));
    }

    #[test]
    fn pool_examples() {
        let row = vec![0.5, -1.5];
        let twice = Tensor::matrix(2, 2, [row.clone(), row.clone()].concat()).unwrap();
        assert_eq!(
            eval_variant(&ReadoutModule::Pool(PoolMode::Mean), &twice, 0),
            row
        );

        let m = Tensor::matrix(2, 2, vec![1.0, -2.0, 0.0, 5.0]).unwrap();
        assert_eq!(
            eval_variant(&ReadoutModule::Pool(PoolMode::Max), &m, 0),
            vec![1.0, 5.0]
        );

        // sum = mean × node count; with a power-of-two count the
        // identity holds bit-exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let features = random_features(&mut rng, 4, 3);
        let sum = eval_variant(&ReadoutModule::Pool(PoolMode::Sum), &features, 0);
        let mean = eval_variant(&ReadoutModule::Pool(PoolMode::Mean), &features, 0);
        for (s, m) in sum.iter().zip(&mean) {
            assert_eq!(*s, m * 4.0);
        }
    }

    #[test]
    fn last_attention_shapes_and_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = LastAttentionParams::new(3, &mut rng);

        // Single node: output is x₀ ‖ x₀.
        let single = random_features(&mut rng, 1, 3);
        let out = eval_variant(&ReadoutModule::LastAttention(params.clone()), &single, 0);
        assert_eq!(&out[0..3], single.values());
        assert_eq!(&out[3..6], single.values());

        // Zero score vector: uniform attention, global = column means.
        let mut uniform = params.clone();
        for v in uniform.score.values_mut() {
            *v = 0.0;
        }
        let features = random_features(&mut rng, 4, 3);
        let out = eval_variant(&ReadoutModule::LastAttention(uniform), &features, 2);
        for (j, v) in out.iter().take(3).enumerate() {
            let mean: f64 = (0..4).map(|i| features.values()[i * 3 + j]).sum::<f64>() / 4.0;
            assert!((v - mean).abs() < 1e-12);
        }

        // Output width is 2d for any graph.
        let out = eval_variant(&ReadoutModule::LastAttention(params), &features, 3);
        assert_eq!(out.len(), 6);
    }

    #[test]
    fn every_variant_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 3;
        let variants = vec![
            ReadoutModule::Set2Set(Set2SetParams::new(d, 3, &mut rng)),
            ReadoutModule::Pool(PoolMode::Mean),
            ReadoutModule::Pool(PoolMode::Sum),
            ReadoutModule::Pool(PoolMode::Max),
            ReadoutModule::LastAttention(LastAttentionParams::new(d, &mut rng)),
        ];
        for module in &variants {
            for _ in 0..10 {
                let n = rng.gen_range(1..6);
                let features = random_features(&mut rng, n, d);
                let mut perm: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    perm.swap(i, rng.gen_range(0..=i));
                }
                let mut permuted_values = vec![0.0; n * d];
                for old in 0..n {
                    for j in 0..d {
                        permuted_values[perm[old] * d + j] = features.values()[old * d + j];
                    }
                }
                let permuted = Tensor::matrix(n, d, permuted_values).unwrap();
                let last = rng.gen_range(0..n);
                let base = eval_variant(module, &features, last);
                let relabeled = eval_variant(module, &permuted, perm[last]);
                for (a, b) in base.iter().zip(&relabeled) {
                    assert!((a - b).abs() <= 1e-9, "{:?} not invariant", module.kind());
                }
            }
        }
    }

    #[test]
    fn empty_feature_matrix_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = Set2SetParams::new(3, 2, &mut rng);
        let mut tape = Tape::new();
        let binding = ReadoutBinding::bind(&mut tape, &ReadoutModule::Set2Set(params));
        let empty = tape.constant(vec![1, 3], vec![0.0; 3]).unwrap();
        // Valid matrix but out-of-range last node.
        assert!(readout_forward(&mut tape, &binding, empty, 3).is_err());
    }

    #[test]
    fn bptt_gradients_through_three_steps_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 3;
        let params = Set2SetParams::new(d, 3, &mut rng);
        let features = random_features(&mut rng, 4, d);
        let cot: Vec<f64> = (0..2 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let named = vec![
            ("features".to_string(), features),
            (
                "gru.input_weights".to_string(),
                params.gru.input_weights.clone(),
            ),
            (
                "gru.hidden_weights".to_string(),
                params.gru.hidden_weights.clone(),
            ),
            ("gru.input_bias".to_string(), params.gru.input_bias.clone()),
            (
                "gru.hidden_bias".to_string(),
                params.gru.hidden_bias.clone(),
            ),
        ];
        let cfg = GradCheckConfig::default();
        let report = check_gradients(
            &named,
            |tape, ids| {
                let gru = GruBinding {
                    input_weights: ids[1],
                    hidden_weights: ids[2],
                    input_bias: ids[3],
                    hidden_bias: ids[4],
                    input_dim: 2 * d,
                    hidden_dim: d,
                };
                let trace = set2set_readout(tape, &gru, 3, ids[0])?;
                let w = tape.constant(vec![2 * d, 1], cot.clone())?;
                let weighted = tape.mul(trace.output, w)?;
                tape.sum(weighted)
            },
            &cfg,
        )
        .unwrap();
        assert!(report.passed(cfg.tolerance), "{report:?}");
    }

    #[test]
    fn max_pool_gradient_routes_to_argmax_rows() {
        let m = Tensor::matrix(3, 2, vec![1.0, -2.0, 5.0, 0.0, 2.0, 7.0])
            .unwrap()
            .with_grad();
        let mut tape = Tape::new();
        let f = tape.leaf(&m);
        let out = pool_readout(&mut tape, f, PoolMode::Max).unwrap();
        assert_eq!(tape.values(out), &[5.0, 7.0]);
        let loss = tape.sum(out).unwrap();
        tape.backward(loss).unwrap();
        // Winners: row 1 for column 0, row 2 for column 1.
        assert_eq!(tape.grad(f).unwrap(), &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    }
}
