//! Auxiliary error variables `e_1, …, e_r` built from an output-error jet.
//!
//! For a jet `ξ = (ξ_1, …, ξ_r) ∈ R^{rm}` and gains `k_1, …, k_{r-1}` the
//! variables are
//!
//! ```text
//! e_1(ξ)     = ξ_1
//! e_{i+1}(ξ) = e_i(S ξ) + k_i e_i(ξ),      S(ξ_1, …, ξ_r) = (ξ_2, …, ξ_r, 0)
//! ```
//!
//! Along a smooth error signal `ζ` with jet `χ(ζ)(t)` this is the filter
//! `e_{i+1} = d/dt e_i + k_i e_i`, i.e. `e_{i+1} = p_i(d/dt) ζ` with
//! `p_i(s) = Π_{j≤i} (s + k_j)`.

use std::ops::Deref;

use nalgebra::DMatrix;

use crate::error::{invalid, Result};

/// Strictly positive gains `k_1, …, k_{r-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainVector(Vec<f64>);

impl GainVector {
    pub fn new(gains: Vec<f64>) -> Result<Self> {
        if let Some((i, k)) = gains
            .iter()
            .enumerate()
            .find(|(_, k)| !(k.is_finite() && **k > 0.0))
        {
            return Err(invalid(format!("gain k_{} = {k} must be positive", i + 1)));
        }
        Ok(Self(gains))
    }

    /// Gains for relative degree one.
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn relative_degree(&self) -> usize {
        self.0.len() + 1
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl Deref for GainVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// `r` stacked blocks of dimension `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct JetVector {
    r: usize,
    m: usize,
    data: Vec<f64>,
}

impl JetVector {
    pub fn new(r: usize, m: usize, data: Vec<f64>) -> Result<Self> {
        if r == 0 || m == 0 {
            return Err(invalid("jet dimensions must be positive"));
        }
        if data.len() != r * m {
            return Err(invalid(format!(
                "jet of {r} blocks of size {m} needs {} entries, got {}",
                r * m,
                data.len()
            )));
        }
        Ok(Self { r, m, data })
    }

    pub fn from_blocks(blocks: &[Vec<f64>]) -> Result<Self> {
        let m = blocks.first().map_or(0, Vec::len);
        if blocks.iter().any(|b| b.len() != m) {
            return Err(invalid("jet blocks must share one dimension"));
        }
        Self::new(blocks.len(), m, blocks.concat())
    }

    pub fn zeros(r: usize, m: usize) -> Self {
        Self {
            r,
            m,
            data: vec![0.0; r * m],
        }
    }

    /// Scalar jet, one entry per block.
    pub fn scalar(values: &[f64]) -> Result<Self> {
        Self::new(values.len(), 1, values.to_vec())
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Block `i`, zero-based.
    pub fn block(&self, i: usize) -> &[f64] {
        &self.data[i * self.m..(i + 1) * self.m]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn block_norms(&self) -> Vec<f64> {
        (0..self.r).map(|i| norm(self.block(i))).collect()
    }

    /// Left shift `S`.
    pub fn shifted(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        data[..(self.r - 1) * self.m].copy_from_slice(&self.data[self.m..]);
        Self {
            r: self.r,
            m: self.m,
            data,
        }
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_gains(gains: &[f64], r: usize) -> Result<()> {
    if gains.len() + 1 != r {
        return Err(invalid(format!(
            "relative degree {r} needs {} gains, got {}",
            r - 1,
            gains.len()
        )));
    }
    Ok(())
}

/// Table of `e_i(S^s ξ)` for `i = 1..=r`, `s = 0..r`.
///
/// Built straight from the recursion, so the shifted evaluations that appear
/// as time derivatives (`e_i^{(l)} = e_i(S^l χ)` whenever `i + l ≤ r`) come
/// for free.
#[derive(Debug, Clone)]
pub struct ErrorTable {
    r: usize,
    m: usize,
    values: Vec<f64>,
}

impl ErrorTable {
    pub fn new(r: usize, m: usize) -> Self {
        Self {
            r,
            m,
            values: vec![0.0; r * r * m],
        }
    }

    /// Fill the table from a flat jet of `r·m` entries.
    pub fn fill(&mut self, xi: &[f64], gains: &[f64]) {
        let (r, m) = (self.r, self.m);
        debug_assert_eq!(xi.len(), r * m);
        debug_assert_eq!(gains.len() + 1, r);
        // e_1(S^s ξ) = ξ_{s+1}
        for s in 0..r {
            let dst = s * m;
            self.values[dst..dst + m].copy_from_slice(&xi[s * m..(s + 1) * m]);
        }
        for i in 1..r {
            let k = gains[i - 1];
            for s in 0..r {
                for c in 0..m {
                    let shifted = if s + 1 < r {
                        self.values[((i - 1) * r + s + 1) * m + c]
                    } else {
                        0.0
                    };
                    let here = self.values[((i - 1) * r + s) * m + c];
                    self.values[(i * r + s) * m + c] = shifted + k * here;
                }
            }
        }
    }

    /// `e_i(S^s ξ)` with one-based `i`.
    pub fn get(&self, i: usize, s: usize) -> &[f64] {
        let off = ((i - 1) * self.r + s) * self.m;
        &self.values[off..off + self.m]
    }

    /// `e_i(ξ)` with one-based `i`.
    pub fn error(&self, i: usize) -> &[f64] {
        self.get(i, 0)
    }
}

/// `(e_1(ξ), …, e_r(ξ))` by the defining recursion.
pub fn error_variables(xi: &JetVector, gains: &[f64]) -> Result<JetVector> {
    check_gains(gains, xi.r)?;
    let mut table = ErrorTable::new(xi.r, xi.m);
    table.fill(&xi.data, gains);
    let mut data = Vec::with_capacity(xi.r * xi.m);
    for i in 1..=xi.r {
        data.extend_from_slice(table.error(i));
    }
    JetVector::new(xi.r, xi.m, data)
}

/// The time derivative `e_i^{(l)}` along a trajectory, read off the jet.
///
/// Requires `i + l ≤ r` so that no derivative beyond the jet is needed.
pub fn error_derivative(xi: &JetVector, gains: &[f64], i: usize, l: usize) -> Result<Vec<f64>> {
    check_gains(gains, xi.r)?;
    if i == 0 || i + l > xi.r {
        return Err(invalid(format!(
            "e_{i}^({l}) is not determined by a jet of order {}",
            xi.r
        )));
    }
    let mut table = ErrorTable::new(xi.r, xi.m);
    table.fill(&xi.data, gains);
    Ok(table.get(i, l).to_vec())
}

/// Coefficients of `p_i(s) = Π_{j=1}^{i} (s + k_j)`, ascending powers.
///
/// `i = 0` yields the constant polynomial `1`.
pub fn polynomial_coefficients(gains: &[f64], i: usize) -> Result<Vec<f64>> {
    if i > gains.len() {
        return Err(invalid(format!(
            "polynomial index {i} out of range 0..={}",
            gains.len()
        )));
    }
    let mut coeffs = vec![1.0];
    for &k in &gains[..i] {
        // multiply by (s + k)
        let mut next = vec![0.0; coeffs.len() + 1];
        for (p, c) in coeffs.iter().enumerate() {
            next[p] += k * c;
            next[p + 1] += c;
        }
        coeffs = next;
    }
    Ok(coeffs)
}

/// Linear map `S` with `(e_1, …, e_r) = S · χ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainMatrix {
    r: usize,
    m: usize,
    entries: DMatrix<f64>,
}

impl ChainMatrix {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn apply(&self, xi: &JetVector) -> Result<JetVector> {
        if xi.r != self.r || xi.m != self.m {
            return Err(invalid("jet shape does not match chain matrix"));
        }
        let mut out = vec![0.0; self.r * self.m];
        for (row, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (col, x) in xi.data.iter().enumerate() {
                let a = self.entries[(row, col)];
                if a != 0.0 {
                    acc += a * x;
                }
            }
            *o = acc;
        }
        JetVector::new(self.r, self.m, out)
    }

    pub fn determinant(&self) -> f64 {
        self.entries.clone().determinant()
    }

    /// Block lower-triangular with identity diagonal blocks.
    pub fn is_unit_block_lower_triangular(&self) -> bool {
        let n = self.r * self.m;
        (0..n).all(|row| {
            (0..n).all(|col| {
                let a = self.entries[(row, col)];
                let (bi, bj) = (row / self.m, col / self.m);
                if bj > bi {
                    a == 0.0
                } else if bi == bj {
                    a == if row == col { 1.0 } else { 0.0 }
                } else {
                    row % self.m == col % self.m || a == 0.0
                }
            })
        })
    }
}

/// Build the chain matrix; block row `i` holds the coefficients of `p_{i-1}`.
pub fn chain_matrix(gains: &[f64], r: usize, m: usize) -> Result<ChainMatrix> {
    if r == 0 || m == 0 {
        return Err(invalid("dimensions must be positive"));
    }
    check_gains(gains, r)?;
    let n = r * m;
    let mut entries = DMatrix::zeros(n, n);
    for block_row in 0..r {
        let coeffs = polynomial_coefficients(gains, block_row)?;
        for (power, c) in coeffs.iter().enumerate() {
            for ch in 0..m {
                entries[(block_row * m + ch, power * m + ch)] = *c;
            }
        }
    }
    Ok(ChainMatrix { r, m, entries })
}

/// Five-point first difference applied `order` times to uniformly spaced
/// samples. The result at index `n` is valid for `2·order ≤ n < len - 2·order`.
fn repeated_central_difference(samples: &[Vec<f64>], h: f64, order: usize) -> Vec<Vec<f64>> {
    let mut current = samples.to_vec();
    for _ in 0..order {
        let mut next = current.clone();
        for n in 2..current.len().saturating_sub(2) {
            for c in 0..current[n].len() {
                next[n][c] = (current[n - 2][c] - 8.0 * current[n - 1][c]
                    + 8.0 * current[n + 1][c]
                    - current[n + 2][c])
                    / (12.0 * h);
            }
        }
        current = next;
    }
    current
}

/// Largest residual of `e_r = e^{(r-1)} + Σ_j k_j e_j^{(r-j-1)}` over a sampled
/// error trajectory.
///
/// `jets[n]` is the error jet `χ(e)(t_n)` on a uniform grid of spacing `h`.
/// The derivatives `e_j^{(r-j-1)}` are taken by repeated five-point differences
/// of the sampled `e_j`, independently of the algebraic form of `e_r`.
pub fn highest_error_identity_check(gains: &[f64], jets: &[JetVector], h: f64) -> Result<f64> {
    let first = jets.first().ok_or_else(|| invalid("no samples supplied"))?;
    let (r, m) = (first.r, first.m);
    check_gains(gains, r)?;
    if jets.iter().any(|j| j.r != r || j.m != m) {
        return Err(invalid("jets must share one shape"));
    }
    if !(h > 0.0) {
        return Err(invalid("sample spacing must be positive"));
    }
    let max_order = r.saturating_sub(2);
    let reach = 2 * max_order;
    if jets.len() < 2 * reach + 1 {
        return Err(invalid(format!(
            "{} samples cannot support derivatives of order {max_order}",
            jets.len()
        )));
    }
    let errors: Vec<JetVector> = jets
        .iter()
        .map(|xi| error_variables(xi, gains))
        .collect::<Result<_>>()?;
    // derivative[j-1][n] = e_j^{(r-j-1)}(t_n)
    let derivatives: Vec<Vec<Vec<f64>>> = (1..r)
        .map(|j| {
            let series: Vec<Vec<f64>> = errors.iter().map(|e| e.block(j - 1).to_vec()).collect();
            repeated_central_difference(&series, h, r - j - 1)
        })
        .collect();
    let mut worst: f64 = 0.0;
    for n in reach..jets.len() - reach {
        for c in 0..m {
            let mut rhs = jets[n].block(r - 1)[c];
            for j in 1..r {
                rhs += gains[j - 1] * derivatives[j - 1][n][c];
            }
            let lhs = errors[n].block(r - 1)[c];
            worst = worst.max((lhs - rhs).abs());
        }
    }
    Ok(worst)
}

impl From<JetVector> for Vec<f64> {
    fn from(j: JetVector) -> Self {
        j.data
    }
}
