//! Parameterized neural primitives: the item embedding table, a GRU
//! cell, and the two initializers used by the model (Gaussian for
//! everything, orthogonal per-gate blocks for the readout GRU's hidden
//! weights).

use rand::Rng;

use crate::autodiff::{Tape, Tensor, TensorId};
use crate::error::{FgnnError, Result};

/// Initial item embeddings, one row per vocabulary item.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub weights: Tensor,
}

impl EmbeddingTable {
    pub fn new<R: Rng>(vocab_size: usize, dim: usize, rng: &mut R) -> Self {
        EmbeddingTable {
            weights: init_gaussian(&[vocab_size, dim], 0.0, 0.1, rng).with_grad(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// Row i of the output is the table row for `items[i]`; gradients
/// scatter back additively, so absent items get exactly zero gradient.
pub fn embed_lookup(tape: &mut Tape, table: TensorId, items: &[usize]) -> Result<TensorId> {
    tape.gather_rows(table, items)
}

/// GRU cell parameters. The three gate blocks are contiguous row slices
/// of each array in the fixed order (reset, update, candidate); the
/// checkpoint manifest records this ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCellParams {
    pub input_weights: Tensor,  // [3h × in]
    pub hidden_weights: Tensor, // [3h × h]
    pub input_bias: Tensor,     // [3h × 1]
    pub hidden_bias: Tensor,    // [3h × 1]
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCellParams {
    /// Gaussian input weights and biases, orthogonal per-gate hidden
    /// blocks.
    pub fn new<R: Rng>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let mut hidden = Vec::with_capacity(3 * hidden_dim * hidden_dim);
        for _ in 0..3 {
            hidden.extend_from_slice(init_orthogonal(&[hidden_dim, hidden_dim], rng).values());
        }
        GruCellParams {
            input_weights: init_gaussian(&[3 * hidden_dim, input_dim], 0.0, 0.1, rng).with_grad(),
            hidden_weights: Tensor::new(vec![3 * hidden_dim, hidden_dim], hidden)
                .expect("gate blocks fill the hidden weight array")
                .with_grad(),
            input_bias: init_gaussian(&[3 * hidden_dim, 1], 0.0, 0.1, rng).with_grad(),
            hidden_bias: init_gaussian(&[3 * hidden_dim, 1], 0.0, 0.1, rng).with_grad(),
            input_dim,
            hidden_dim,
        }
    }
}

/// Tape handles for one GRU cell's parameters.
#[derive(Debug, Clone, Copy)]
pub struct GruBinding {
    pub input_weights: TensorId,
    pub hidden_weights: TensorId,
    pub input_bias: TensorId,
    pub hidden_bias: TensorId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruBinding {
    pub fn bind(tape: &mut Tape, params: &GruCellParams) -> Self {
        GruBinding {
            input_weights: tape.leaf(&params.input_weights),
            hidden_weights: tape.leaf(&params.hidden_weights),
            input_bias: tape.leaf(&params.input_bias),
            hidden_bias: tape.leaf(&params.hidden_bias),
            input_dim: params.input_dim,
            hidden_dim: params.hidden_dim,
        }
    }
}

/// One GRU step on column vectors:
///   r = σ(W_r x + U_r h + b)
///   z = σ(W_z x + U_z h + b)
///   c = tanh(W_c x + U_c (r ⊙ h) + b)
///   out = (1 − z) ⊙ h + z ⊙ c
pub fn gru_cell(
    tape: &mut Tape,
    gru: &GruBinding,
    input: TensorId,
    hidden: TensorId,
) -> Result<TensorId> {
    let h = gru.hidden_dim;
    if tape.shape(input) != [gru.input_dim, 1] {
        return Err(FgnnError::ShapeMismatch {
            op: "gru_cell input",
            lhs: tape.shape(input).to_vec(),
            rhs: vec![gru.input_dim, 1],
        });
    }
    if tape.shape(hidden) != [h, 1] {
        return Err(FgnnError::ShapeMismatch {
            op: "gru_cell hidden",
            lhs: tape.shape(hidden).to_vec(),
            rhs: vec![h, 1],
        });
    }

    let gx_lin = tape.matmul(gru.input_weights, input)?;
    let gx = tape.add(gx_lin, gru.input_bias)?; // [3h, 1]

    // Reset and update gates share the plain U·h path.
    let u_rz = tape.slice_rows(gru.hidden_weights, 0, 2 * h)?;
    let b_rz = tape.slice_rows(gru.hidden_bias, 0, 2 * h)?;
    let gh_lin = tape.matmul(u_rz, hidden)?;
    let gh = tape.add(gh_lin, b_rz)?; // [2h, 1]

    let gx_r = tape.slice_rows(gx, 0, h)?;
    let gh_r = tape.slice_rows(gh, 0, h)?;
    let pre_r = tape.add(gx_r, gh_r)?;
    let reset = tape.sigmoid(pre_r)?;

    let gx_z = tape.slice_rows(gx, h, h)?;
    let gh_z = tape.slice_rows(gh, h, h)?;
    let pre_z = tape.add(gx_z, gh_z)?;
    let update = tape.sigmoid(pre_z)?;

    // Candidate applies the reset gate to the hidden state before U_c.
    let u_c = tape.slice_rows(gru.hidden_weights, 2 * h, h)?;
    let b_c = tape.slice_rows(gru.hidden_bias, 2 * h, h)?;
    let gated_h = tape.mul(reset, hidden)?;
    let uc_h = tape.matmul(u_c, gated_h)?;
    let gx_c = tape.slice_rows(gx, 2 * h, h)?;
    let pre_c_part = tape.add(gx_c, uc_h)?;
    let pre_c = tape.add(pre_c_part, b_c)?;
    let candidate = tape.tanh(pre_c)?;

    let ones = tape.constant(vec![h, 1], vec![1.0; h])?;
    let neg_z = tape.scale(update, -1.0)?;
    let one_minus_z = tape.add(ones, neg_z)?;
    let keep = tape.mul(one_minus_z, hidden)?;
    let take = tape.mul(update, candidate)?;
    tape.add(keep, take)
}

/// I.i.d. normal entries via Box-Muller, fully determined by the rng.
pub fn init_gaussian<R: Rng>(shape: &[usize], mean: f64, std: f64, rng: &mut R) -> Tensor {
    let numel: usize = shape.iter().product();
    let mut values = Vec::with_capacity(numel);
    while values.len() < numel {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        values.push(mean + std * radius * angle.cos());
        if values.len() < numel {
            values.push(mean + std * radius * angle.sin());
        }
    }
    Tensor::new(shape.to_vec(), values).expect("generated the right number of entries")
}

/// Orthogonal initialization: rows (if rows ≤ cols) or columns
/// (otherwise) are orthonormal. Gaussian draws followed by two rounds of
/// modified Gram-Schmidt.
pub fn init_orthogonal<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    assert_eq!(shape.len(), 2, "orthogonal init needs a matrix shape");
    let (rows, cols) = (shape[0], shape[1]);
    let thin = rows.min(cols);
    let wide = rows.max(cols);

    // Orthonormalize `thin` vectors of length `wide`.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(thin);
    while basis.len() < thin {
        let mut v: Vec<f64> = init_gaussian(&[wide], 0.0, 1.0, rng).values().to_vec();
        for _ in 0..2 {
            for q in &basis {
                let dot: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= dot * qi;
                }
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue; // redraw a (vanishingly unlikely) degenerate vector
        }
        for vi in &mut v {
            *vi /= norm;
        }
        basis.push(v);
    }

    let mut values = vec![0.0; rows * cols];
    if rows <= cols {
        for (i, q) in basis.iter().enumerate() {
            values[i * cols..(i + 1) * cols].copy_from_slice(q);
        }
    } else {
        for (j, q) in basis.iter().enumerate() {
            for i in 0..rows {
                values[i * cols + j] = q[i];
            }
        }
    }
    Tensor::new(shape.to_vec(), values).expect("orthogonal basis fills the shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradients, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lookup_returns_rows_and_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = EmbeddingTable::new(5, 2, &mut rng);
        let row0: Vec<f64> = table.weights.values()[0..2].to_vec();

        let mut tape = Tape::new();
        let id = tape.leaf(&table.weights);
        let out = embed_lookup(&mut tape, id, &[0]).unwrap();
        assert_eq!(tape.values(out), row0.as_slice());

        let out = embed_lookup(&mut tape, id, &[2, 2]).unwrap();
        let v = tape.values(out);
        assert_eq!(&v[0..2], &v[2..4]);
    }

    #[test]
    fn lookup_gradient_is_sparse_and_counts_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let table = EmbeddingTable::new(5, 2, &mut rng);
        let mut tape = Tape::new();
        let id = tape.leaf(&table.weights);
        let out = embed_lookup(&mut tape, id, &[2, 2]).unwrap();
        let loss = tape.sum(out).unwrap();
        tape.backward(loss).unwrap();
        let grad = tape.grad(id).unwrap();
        assert_eq!(grad, &[0.0, 0.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_gru_maps_zero_to_zero() {
        let params = GruCellParams {
            input_weights: Tensor::zeros(vec![6, 4]).with_grad(),
            hidden_weights: Tensor::zeros(vec![6, 2]).with_grad(),
            input_bias: Tensor::zeros(vec![6, 1]).with_grad(),
            hidden_bias: Tensor::zeros(vec![6, 1]).with_grad(),
            input_dim: 4,
            hidden_dim: 2,
        };
        let mut tape = Tape::new();
        let gru = GruBinding::bind(&mut tape, &params);
        let x = tape.constant(vec![4, 1], vec![0.0; 4]).unwrap();
        let h = tape.constant(vec![2, 1], vec![0.0; 2]).unwrap();
        let out = gru_cell(&mut tape, &gru, x, h).unwrap();
        assert_eq!(tape.values(out), &[0.0, 0.0]);
    }

    #[test]
    fn saturated_update_gate_carries_hidden_through() {
        // Large negative update-gate bias forces z → 0, out ≈ hidden.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = GruCellParams::new(3, 2, &mut rng);
        for i in 2..4 {
            params.input_bias.values_mut()[i] = -40.0;
            params.hidden_bias.values_mut()[i] = -40.0;
        }
        let mut tape = Tape::new();
        let gru = GruBinding::bind(&mut tape, &params);
        let x = tape.constant(vec![3, 1], vec![0.3, -0.8, 0.1]).unwrap();
        let h = tape.constant(vec![2, 1], vec![0.5, -0.25]).unwrap();
        let out = gru_cell(&mut tape, &gru, x, h).unwrap();
        let v = tape.values(out);
        assert!((v[0] - 0.5).abs() < 1e-9 && (v[1] + 0.25).abs() < 1e-9);
    }

    #[test]
    fn gru_output_stays_in_unit_interval_from_zero_hidden() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let params = GruCellParams::new(4, 3, &mut rng);
            let mut tape = Tape::new();
            let gru = GruBinding::bind(&mut tape, &params);
            let xv: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let x = tape.constant(vec![4, 1], xv).unwrap();
            let h = tape.constant(vec![3, 1], vec![0.0; 3]).unwrap();
            let out = gru_cell(&mut tape, &gru, x, h).unwrap();
            assert!(tape.values(out).iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = GruCellParams::new(3, 2, &mut rng);
        let x0: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h0: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let named = vec![
            ("input_weights".to_string(), params.input_weights.clone()),
            ("hidden_weights".to_string(), params.hidden_weights.clone()),
            ("input_bias".to_string(), params.input_bias.clone()),
            ("hidden_bias".to_string(), params.hidden_bias.clone()),
        ];
        let cfg = GradCheckConfig::default();
        let report = check_gradients(
            &named,
            |tape, ids| {
                let gru = GruBinding {
                    input_weights: ids[0],
                    hidden_weights: ids[1],
                    input_bias: ids[2],
                    hidden_bias: ids[3],
                    input_dim: 3,
                    hidden_dim: 2,
                };
                let x = tape.constant(vec![3, 1], x0.clone())?;
                let h = tape.constant(vec![2, 1], h0.clone())?;
                let out = gru_cell(tape, &gru, x, h)?;
                tape.sum(out)
            },
            &cfg,
        )
        .unwrap();
        assert!(report.passed(cfg.tolerance), "{report:?}");
    }

    #[test]
    fn gaussian_init_hits_requested_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = init_gaussian(&[100, 100], 0.0, 0.1, &mut rng);
        let n = t.numel() as f64;
        let mean: f64 = t.values().iter().sum::<f64>() / n;
        let var: f64 = t
            .values()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var.sqrt() - 0.1).abs() < 0.01, "std {}", var.sqrt());

        let mut rng_a = ChaCha8Rng::seed_from_u64(6);
        let mut rng_b = ChaCha8Rng::seed_from_u64(6);
        assert_eq!(
            init_gaussian(&[7, 3], 0.0, 0.1, &mut rng_a),
            init_gaussian(&[7, 3], 0.0, 0.1, &mut rng_b)
        );

        let constant = init_gaussian(&[10], 0.25, 0.0, &mut rng);
        assert!(constant.values().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn orthogonal_init_produces_orthonormal_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);

        // Square: MᵀM = I.
        let m = init_orthogonal(&[4, 4], &mut rng);
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = (0..4)
                    .map(|k| m.values()[k * 4 + i] * m.values()[k * 4 + j])
                    .sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-8);
            }
        }

        // Wide: MMᵀ = I on the row side.
        let m = init_orthogonal(&[2, 5], &mut rng);
        for i in 0..2 {
            for j in 0..2 {
                let dot: f64 = (0..5)
                    .map(|k| m.values()[i * 5 + k] * m.values()[j * 5 + k])
                    .sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-8);
            }
        }

        // Tall: MᵀM = I on the column side.
        let m = init_orthogonal(&[5, 3], &mut rng);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..5)
                    .map(|k| m.values()[k * 3 + i] * m.values()[k * 3 + j])
                    .sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn orthogonal_determinant_is_plus_or_minus_one() {
        // LU decomposition with partial pivoting as the determinant
        // oracle, independent of the orthogonalization path.
        fn lu_det(values: &[f64], n: usize) -> f64 {
            let mut a = values.to_vec();
            let mut det = 1.0;
            for col in 0..n {
                let pivot = (col..n)
                    .max_by(|&x, &y| {
                        a[x * n + col]
                            .abs()
                            .partial_cmp(&a[y * n + col].abs())
                            .unwrap()
                    })
                    .unwrap();
                if pivot != col {
                    for j in 0..n {
                        a.swap(col * n + j, pivot * n + j);
                    }
                    det = -det;
                }
                let diag = a[col * n + col];
                det *= diag;
                if diag == 0.0 {
                    return 0.0;
                }
                for row in col + 1..n {
                    let factor = a[row * n + col] / diag;
                    for j in col..n {
                        a[row * n + j] -= factor * a[col * n + j];
                    }
                }
            }
            det
        }

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [2usize, 3, 5, 8] {
            let m = init_orthogonal(&[n, n], &mut rng);
            let det = lu_det(m.values(), n);
            assert!(
                (det.abs() - 1.0).abs() < 1e-8,
                "determinant {det} for n={n}"
            );
        }
    }
}
