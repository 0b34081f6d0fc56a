//! One graph layer: confidence, affinity, weighted aggregation, transform.
//! The forward pass records everything the manual backward pass needs.

use crate::linalg::{self, Matrix};

use super::{GnnOptions, LayerParams};

/// Cosine of each node to the sum (equivalently, the mean) of all other
/// nodes. Zero when either vector is zero.
pub fn node_confidences(x: &Matrix) -> Vec<f64> {
    confidence_parts(x).into_iter().map(|c| c.value).collect()
}

#[derive(Clone, Copy, Debug)]
struct Confidence {
    value: f64,
    norm_x: f64,
    norm_u: f64,
}

fn column_sum(x: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        linalg::axpy(1.0, x.row(i), &mut s);
    }
    s
}

fn others(sum: &[f64], xi: &[f64]) -> Vec<f64> {
    sum.iter().zip(xi).map(|(s, v)| s - v).collect()
}

fn confidence_parts(x: &Matrix) -> Vec<Confidence> {
    let sum = column_sum(x);
    (0..x.rows())
        .map(|i| {
            let xi = x.row(i);
            let u = others(&sum, xi);
            let (nx, nu) = (linalg::norm(xi), linalg::norm(&u));
            let value = if nx == 0.0 || nu == 0.0 {
                0.0
            } else {
                linalg::dot(xi, &u) / (nx * nu)
            };
            Confidence {
                value,
                norm_x: nx,
                norm_u: nu,
            }
        })
        .collect()
}

/// `σ(V·(d∘d) + b)` with `d = x_i − x_j`.
pub fn edge_affinity(xi: &[f64], xj: &[f64], layer: &LayerParams) -> f64 {
    linalg::sigmoid(affinity_logit(xi, xj, layer))
}

fn affinity_logit(xi: &[f64], xj: &[f64], layer: &LayerParams) -> f64 {
    xi.iter()
        .zip(xj)
        .zip(&layer.v)
        .map(|((a, b), v)| v * (a - b) * (a - b))
        .sum::<f64>()
        + layer.b
}

/// Full affinity matrix; the diagonal holds `σ(b)` (zero distance) and is
/// never used for aggregation.
pub fn affinity_matrix(x: &Matrix, layer: &LayerParams) -> Matrix {
    let n = x.rows();
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        a[(i, i)] = linalg::sigmoid(layer.b);
        for j in (i + 1)..n {
            let v = edge_affinity(x.row(i), x.row(j), layer);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    a
}

/// Recorded forward pass of one layer.
#[derive(Clone, Debug)]
pub struct LayerTape {
    pub input: Matrix,
    /// Raw confidences, before clamping.
    pub confidence: Vec<f64>,
    conf_detail: Vec<Confidence>,
    /// Aggregation weight per source node (`max(c, 0)` or 1).
    pub weights: Vec<f64>,
    pub affinity: Matrix,
    /// Denominator per receiving node.
    pub denominators: Vec<f64>,
    pub aggregated: Matrix,
    pub preactivation: Matrix,
    pub output: Matrix,
}

impl LayerTape {
    /// Normalized aggregation weights of node `i` over the other nodes
    /// (`None` when the denominator is zero).
    pub fn aggregation_weights(&self, i: usize) -> Option<Vec<f64>> {
        let den = self.denominators[i];
        if den <= 0.0 {
            return None;
        }
        Some(
            (0..self.input.rows())
                .map(|j| {
                    if j == i {
                        0.0
                    } else {
                        self.weights[j] * self.affinity[(i, j)] / den
                    }
                })
                .collect(),
        )
    }
}

pub fn layer_forward(x: &Matrix, layer: &LayerParams, opts: &GnnOptions) -> LayerTape {
    let (n, d) = (x.rows(), x.cols());
    let conf_detail = confidence_parts(x);
    let confidence: Vec<f64> = conf_detail.iter().map(|c| c.value).collect();
    let weights: Vec<f64> = if opts.confidence {
        confidence.iter().map(|&c| c.max(0.0)).collect()
    } else {
        vec![1.0; n]
    };
    let affinity = if opts.affinity {
        affinity_matrix(x, layer)
    } else {
        Matrix::from_vec(n, n, vec![1.0; n * n])
    };
    let mut denominators = vec![0.0; n];
    let mut aggregated = Matrix::zeros(n, d);
    for i in 0..n {
        let mut den = 0.0;
        let mut acc = vec![0.0; d];
        for j in 0..n {
            if j == i {
                continue;
            }
            let w = weights[j] * affinity[(i, j)];
            den += w;
            linalg::axpy(w, x.row(j), &mut acc);
        }
        denominators[i] = den;
        if den > 0.0 {
            acc.iter_mut().for_each(|v| *v /= den);
            aggregated.row_mut(i).copy_from_slice(&acc);
        } else {
            aggregated.row_mut(i).copy_from_slice(x.row(i));
        }
    }
    let mut preactivation = Matrix::zeros(n, d);
    for i in 0..n {
        let z = if opts.transform {
            layer.w.matvec(aggregated.row(i))
        } else {
            aggregated.row(i).to_vec()
        };
        preactivation.row_mut(i).copy_from_slice(&z);
    }
    let mut output = preactivation.clone();
    if opts.relu {
        output.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    }
    LayerTape {
        input: x.clone(),
        confidence,
        conf_detail,
        weights,
        affinity,
        denominators,
        aggregated,
        preactivation,
        output,
    }
}

/// Accumulates parameter gradients into `grad` and returns d loss / d input.
pub fn layer_backward(
    tape: &LayerTape,
    layer: &LayerParams,
    opts: &GnnOptions,
    d_out: &Matrix,
    grad: &mut LayerParams,
) -> Matrix {
    let x = &tape.input;
    let (n, d) = (x.rows(), x.cols());
    let mut dz = d_out.clone();
    if opts.relu {
        for (g, &z) in dz.as_mut_slice().iter_mut().zip(tape.preactivation.as_slice()) {
            if z <= 0.0 {
                *g = 0.0;
            }
        }
    }
    let mut dg = Matrix::zeros(n, d);
    for i in 0..n {
        if opts.transform {
            grad.w.add_outer(1.0, dz.row(i), tape.aggregated.row(i));
            dg.row_mut(i).copy_from_slice(&layer.w.matvec_t(dz.row(i)));
        } else {
            dg.row_mut(i).copy_from_slice(dz.row(i));
        }
    }

    let mut dx = Matrix::zeros(n, d);
    let mut dw = vec![0.0; n];
    let mut da = Matrix::zeros(n, n);
    for i in 0..n {
        let den = tape.denominators[i];
        let dgi = dg.row(i);
        if den <= 0.0 {
            linalg::axpy(1.0, dgi, dx.row_mut(i));
            continue;
        }
        let gi_dot = linalg::dot(dgi, tape.aggregated.row(i));
        for j in 0..n {
            if j == i {
                continue;
            }
            let a = tape.affinity[(i, j)];
            let w = tape.weights[j];
            let d_omega = (linalg::dot(dgi, x.row(j)) - gi_dot) / den;
            linalg::axpy(w * a / den, dgi, dx.row_mut(j));
            dw[j] += d_omega * a;
            da[(i, j)] += d_omega * w;
        }
    }

    if opts.affinity {
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let a = tape.affinity[(i, j)];
                let ds = da[(i, j)] * a * (1.0 - a);
                if ds == 0.0 {
                    continue;
                }
                grad.b += ds;
                for k in 0..d {
                    let delta = x[(i, k)] - x[(j, k)];
                    grad.v[k] += ds * delta * delta;
                    let dd = 2.0 * ds * layer.v[k] * delta;
                    dx[(i, k)] += dd;
                    dx[(j, k)] -= dd;
                }
            }
        }
    }

    if opts.confidence {
        let sum = column_sum(x);
        let mut du_total = vec![0.0; d];
        let mut du_each = Matrix::zeros(n, d);
        for i in 0..n {
            let c = tape.conf_detail[i];
            if c.value <= 0.0 || c.norm_x == 0.0 || c.norm_u == 0.0 {
                continue;
            }
            let dc = dw[i];
            if dc == 0.0 {
                continue;
            }
            let xi = x.row(i);
            let u = others(&sum, xi);
            let ab = c.norm_x * c.norm_u;
            for k in 0..d {
                dx[(i, k)] += dc * (u[k] / ab - c.value * xi[k] / (c.norm_x * c.norm_x));
                let du = dc * (xi[k] / ab - c.value * u[k] / (c.norm_u * c.norm_u));
                du_each[(i, k)] = du;
                du_total[k] += du;
            }
        }
        // u_i = Σ_{k≠i} x_k, so x_k receives every du_i except its own.
        for k in 0..n {
            for c in 0..d {
                dx[(k, c)] += du_total[c] - du_each[(k, c)];
            }
        }
    }
    dx
}

/// Activation pattern of a tape: which ReLUs fire, which confidences pass the
/// clamp, which nodes fell back. Two points with equal signatures lie on the
/// same smooth piece.
pub fn kink_signature(tape: &LayerTape, opts: &GnnOptions, out: &mut Vec<bool>) {
    if opts.relu {
        out.extend(tape.preactivation.as_slice().iter().map(|&z| z > 0.0));
    }
    if opts.confidence {
        out.extend(tape.confidence.iter().map(|&c| c > 0.0));
        out.extend(tape.conf_detail.iter().map(|c| c.norm_x > 0.0 && c.norm_u > 0.0));
    }
    out.extend(tape.denominators.iter().map(|&den| den > 0.0));
}

/// Smallest distance of any kink variable from its kink.
pub fn kink_margin(tape: &LayerTape, opts: &GnnOptions) -> f64 {
    let mut m = f64::INFINITY;
    if opts.relu {
        m = tape.preactivation.as_slice().iter().fold(m, |acc, z| acc.min(z.abs()));
    }
    if opts.confidence {
        m = tape.confidence.iter().fold(m, |acc, c| acc.min(c.abs()));
    }
    m
}
