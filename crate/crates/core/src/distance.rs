//! Information distance matrices and their maximum-likelihood estimators.
//!
//! The Gaussian distance is `-log |rho_ij|`, the symmetric discrete distance
//! is `-(K-1) log(1 - K theta_ij)`, and the general discrete distance is the
//! determinant form `-log( |det J| / sqrt(det M_i det M_j) )`. All three are
//! additive along tree paths, which is what every learner in this crate
//! relies on. `+inf` is a first-class value: it records estimated
//! correlations of zero (or disagreement rates at or past the symmetric
//! boundary) and is excluded naturally by downstream thresholding.

use crate::error::{Error, Result};
use crate::model::SampleMatrix;
use crate::tree::NodeId;
use std::collections::BTreeMap;
use std::io::{BufRead, Write};

/// Provenance of a distance matrix.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum DistanceSource {
    /// Computed from model parameters.
    Exact,
    /// Estimated from `n` samples.
    Estimated(usize),
}

/// Symmetric matrix of information distances over a labeled node set, with
/// an optional correlation-sign matrix.
#[derive(Clone, Debug)]
pub struct DistanceMatrix {
    labels: Vec<NodeId>,
    index: BTreeMap<NodeId, usize>,
    d: Vec<f64>,
    sign: Option<Vec<i8>>,
    /// Where the entries came from.
    pub source: DistanceSource,
}

impl DistanceMatrix {
    /// Zero matrix over the given nodes.
    pub fn zeros(labels: Vec<NodeId>, source: DistanceSource) -> Self {
        let m = labels.len();
        let index = labels.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        DistanceMatrix {
            labels,
            index,
            d: vec![0.0; m * m],
            sign: None,
            source,
        }
    }

    /// Number of nodes.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    /// True when empty.
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Node labels in matrix order.
    pub fn labels(&self) -> &[NodeId] {
        &self.labels
    }

    /// Position of a node.
    pub fn position(&self, n: NodeId) -> Result<usize> {
        self.index.get(&n).copied().ok_or(Error::UnknownNode(n))
    }

    /// True if the node is present.
    pub fn contains(&self, n: NodeId) -> bool {
        self.index.contains_key(&n)
    }

    /// Distance by node id.
    pub fn get(&self, i: NodeId, j: NodeId) -> Result<f64> {
        Ok(self.d[self.position(i)? * self.len() + self.position(j)?])
    }

    /// Distance by position.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.len() + j]
    }

    /// Sets the symmetric entry for a node pair.
    pub fn set(&mut self, i: NodeId, j: NodeId, v: f64) -> Result<()> {
        let (a, b) = (self.position(i)?, self.position(j)?);
        let m = self.len();
        self.d[a * m + b] = v;
        self.d[b * m + a] = v;
        Ok(())
    }

    /// Sign entry by node id (+1 when no sign matrix is attached).
    pub fn sign(&self, i: NodeId, j: NodeId) -> Result<i8> {
        let (a, b) = (self.position(i)?, self.position(j)?);
        Ok(match &self.sign {
            Some(s) => s[a * self.len() + b],
            None => 1,
        })
    }

    /// Attaches a sign matrix (row-major, same order as the labels).
    pub fn set_signs(&mut self, sign: Vec<i8>) {
        assert_eq!(sign.len(), self.len() * self.len());
        self.sign = Some(sign);
    }

    /// True if a sign matrix is attached.
    pub fn has_signs(&self) -> bool {
        self.sign.is_some()
    }

    /// Appends a new node with the given distances to the existing nodes.
    /// `dists` maps existing node -> distance. Missing pairs default to
    /// `+inf`; the new diagonal entry is zero.
    pub fn push_node(&mut self, n: NodeId, dists: &BTreeMap<NodeId, f64>) {
        let m = self.len();
        let mut d = vec![f64::INFINITY; (m + 1) * (m + 1)];
        for i in 0..m {
            for j in 0..m {
                d[i * (m + 1) + j] = self.d[i * m + j];
            }
        }
        for (node, &v) in dists {
            if let Some(&i) = self.index.get(node) {
                d[i * (m + 1) + m] = v;
                d[m * (m + 1) + i] = v;
            }
        }
        d[m * (m + 1) + m] = 0.0;
        if let Some(sign) = &self.sign {
            let mut s = vec![1i8; (m + 1) * (m + 1)];
            for i in 0..m {
                for j in 0..m {
                    s[i * (m + 1) + j] = sign[i * m + j];
                }
            }
            self.sign = Some(s);
        }
        self.d = d;
        self.index.insert(n, m);
        self.labels.push(n);
    }

    /// Restriction to a subset of nodes, preserving the given order.
    pub fn restrict(&self, nodes: &[NodeId]) -> Result<DistanceMatrix> {
        let mut out = DistanceMatrix::zeros(nodes.to_vec(), self.source);
        let mut signs = vec![1i8; nodes.len() * nodes.len()];
        for (a, &i) in nodes.iter().enumerate() {
            for (b, &j) in nodes.iter().enumerate() {
                out.d[a * nodes.len() + b] = self.get(i, j)?;
                signs[a * nodes.len() + b] = self.sign(i, j)?;
            }
        }
        if self.sign.is_some() {
            out.sign = Some(signs);
        }
        Ok(out)
    }

    /// Largest finite entry (0 when none).
    pub fn max_finite(&self) -> f64 {
        self.d
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(0.0, f64::max)
    }

    /// Delta-method standard deviation of an estimated entry: with
    /// `d = -log |rho|` and `sd(rho_hat) ~ (1 - rho^2)/sqrt(n)`, the noise
    /// scale is `(1/rho - rho)/sqrt(n) = 2 sinh(d)/sqrt(n)`. Exact matrices
    /// report zero.
    pub fn noise_scale(&self, i: NodeId, j: NodeId) -> Result<f64> {
        match self.source {
            DistanceSource::Exact => Ok(0.0),
            DistanceSource::Estimated(n) => {
                let d = self.get(i, j)?.min(30.0);
                Ok(2.0 * d.sinh() / (n.max(1) as f64).sqrt())
            }
        }
    }

    /// Writes the matrix as CSV: header of labels, then one row per node.
    /// `inf` encodes `+inf`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = self.labels.iter().map(|n| n.to_string()).collect();
        writeln!(w, "{}", header.join(","))?;
        let m = self.len();
        for i in 0..m {
            let row: Vec<String> = (0..m)
                .map(|j| {
                    let v = self.d[i * m + j];
                    if v.is_infinite() {
                        "inf".to_string()
                    } else {
                        format!("{v:.17e}")
                    }
                })
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Writes the companion sign matrix as CSV (all `1` when absent).
    pub fn write_sign_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = self.labels.iter().map(|n| n.to_string()).collect();
        writeln!(w, "{}", header.join(","))?;
        let m = self.len();
        for i in 0..m {
            let row: Vec<String> = (0..m)
                .map(|j| match &self.sign {
                    Some(s) => s[i * m + j].to_string(),
                    None => "1".to_string(),
                })
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Reads a matrix written by [`DistanceMatrix::write_csv`].
    pub fn read_csv<R: BufRead>(r: R) -> Result<DistanceMatrix> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidTree("empty distance CSV".into()))??;
        let labels: Vec<NodeId> = header
            .split(',')
            .enumerate()
            .map(|(i, s)| parse_header_token(s.trim(), i))
            .collect();
        let m = labels.len();
        let mut out = DistanceMatrix::zeros(labels, DistanceSource::Exact);
        let mut row = 0usize;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != m {
                return Err(Error::RaggedRows(row + 1));
            }
            for (j, c) in cells.iter().enumerate() {
                let c = c.trim();
                let v = if c.eq_ignore_ascii_case("inf") {
                    f64::INFINITY
                } else {
                    c.parse::<f64>().map_err(|_| Error::NonNumeric {
                        value: c.to_string(),
                        row: row + 1,
                        column: j,
                    })?
                };
                out.d[row * m + j] = v;
            }
            row += 1;
        }
        if row != m {
            return Err(Error::RaggedRows(row));
        }
        Ok(out)
    }
}

/// Header tokens: `h<k>` parses as a hidden node, a bare integer as that
/// observed id, anything else as observed with positional id.
pub(crate) fn parse_header_token(s: &str, position: usize) -> NodeId {
    if let Some(rest) = s.strip_prefix('h') {
        if let Ok(k) = rest.parse::<u32>() {
            return NodeId::Hidden(k);
        }
    }
    match s.parse::<u32>() {
        Ok(k) => NodeId::Observed(k),
        Err(_) => NodeId::Observed(position as u32),
    }
}

fn clamp_nonneg(d: f64) -> f64 {
    if d < 0.0 && d > -1e-12 {
        0.0
    } else {
        d.max(0.0)
    }
}

/// ML information distances for Gaussian samples: uncentered second moments
/// (the mean is taken as known and zero), correlations, then `-log |rho|`.
pub fn estimate_gaussian(samples: &SampleMatrix) -> Result<DistanceMatrix> {
    let m = samples.num_columns();
    let n = samples.num_rows();
    if n < 2 {
        return Err(Error::TooFewNodes(n));
    }
    let mut second = vec![0.0f64; m * m];
    for r in 0..n {
        let row = samples.row(r);
        for i in 0..m {
            for j in i..m {
                second[i * m + j] += row[i] * row[j];
            }
        }
    }
    for v in &mut second {
        *v /= n as f64;
    }
    for i in 0..m {
        if second[i * m + i] <= 0.0 {
            return Err(Error::ZeroVariance(i));
        }
    }
    let mut out = DistanceMatrix::zeros(samples.columns().to_vec(), DistanceSource::Estimated(n));
    let mut signs = vec![1i8; m * m];
    for i in 0..m {
        for j in i + 1..m {
            let rho = second[i * m + j] / (second[i * m + i] * second[j * m + j]).sqrt();
            let d = if rho == 0.0 {
                f64::INFINITY
            } else {
                clamp_nonneg(-rho.abs().ln())
            };
            out.d[i * m + j] = d;
            out.d[j * m + i] = d;
            let s = if rho < 0.0 { -1 } else { 1 };
            signs[i * m + j] = s;
            signs[j * m + i] = s;
        }
    }
    out.set_signs(signs);
    Ok(out)
}

/// ML information distances for symmetric discrete samples: per-pair
/// disagreement rates, then `-(K-1) log(1 - K theta)`.
pub fn estimate_symmetric(samples: &SampleMatrix, k: u32) -> Result<DistanceMatrix> {
    let m = samples.num_columns();
    let n = samples.num_rows();
    let data = samples.discrete_data(k)?;
    let mut out = DistanceMatrix::zeros(samples.columns().to_vec(), DistanceSource::Estimated(n));
    for i in 0..m {
        for j in i + 1..m {
            let mut disagree = 0usize;
            for r in 0..n {
                if data[r * m + i] != data[r * m + j] {
                    disagree += 1;
                }
            }
            let theta = disagree as f64 / n as f64;
            let base = 1.0 - k as f64 * theta;
            let d = if base <= 0.0 {
                f64::INFINITY
            } else {
                clamp_nonneg(-(k as f64 - 1.0) * base.ln())
            };
            out.d[i * m + j] = d;
            out.d[j * m + i] = d;
        }
    }
    Ok(out)
}

/// ML information distances for general discrete samples via the empirical
/// joint/marginal determinant form.
pub fn estimate_general_discrete(samples: &SampleMatrix, k: u32) -> Result<DistanceMatrix> {
    let m = samples.num_columns();
    let n = samples.num_rows();
    let data = samples.discrete_data(k)?;
    let kk = k as usize;

    // Empirical marginals.
    let mut marg = vec![0.0f64; m * kk];
    for r in 0..n {
        for i in 0..m {
            marg[i * kk + data[r * m + i] as usize] += 1.0;
        }
    }
    for v in &mut marg {
        *v /= n as f64;
    }
    let log_det_marg: Vec<Option<f64>> = (0..m)
        .map(|i| {
            let cells = &marg[i * kk..(i + 1) * kk];
            if cells.iter().any(|&p| p == 0.0) {
                None
            } else {
                Some(cells.iter().map(|p| p.ln()).sum())
            }
        })
        .collect();

    let mut out = DistanceMatrix::zeros(samples.columns().to_vec(), DistanceSource::Estimated(n));
    for i in 0..m {
        for j in i + 1..m {
            let mut joint = vec![0.0f64; kk * kk];
            for r in 0..n {
                let (a, b) = (data[r * m + i] as usize, data[r * m + j] as usize);
                joint[a * kk + b] += 1.0;
            }
            for v in &mut joint {
                *v /= n as f64;
            }
            let det = det_small(&joint, kk);
            let d = match (det.abs() > 0.0, log_det_marg[i], log_det_marg[j]) {
                (true, Some(li), Some(lj)) => clamp_nonneg(-(det.abs().ln() - 0.5 * (li + lj))),
                _ => f64::INFINITY,
            };
            out.d[i * m + j] = d;
            out.d[j * m + i] = d;
        }
    }
    Ok(out)
}

/// Determinant of a small row-major square matrix by LU with partial
/// pivoting.
pub(crate) fn det_small(a: &[f64], k: usize) -> f64 {
    let mut m = a.to_vec();
    let mut det = 1.0f64;
    for col in 0..k {
        let mut pivot = col;
        for r in col + 1..k {
            if m[r * k + col].abs() > m[pivot * k + col].abs() {
                pivot = r;
            }
        }
        if m[pivot * k + col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for c in 0..k {
                m.swap(col * k + c, pivot * k + c);
            }
            det = -det;
        }
        det *= m[col * k + col];
        for r in col + 1..k {
            let f = m[r * k + col] / m[col * k + col];
            for c in col..k {
                m[r * k + c] -= f * m[col * k + c];
            }
        }
    }
    det
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SampleMatrix;
    use crate::tree::NodeId::Observed as O;

    fn samples_from(cols: Vec<NodeId>, rows: Vec<Vec<f64>>) -> SampleMatrix {
        SampleMatrix::new(cols, rows.into_iter().flatten().collect(), None).unwrap()
    }

    #[test]
    fn gaussian_identical_and_orthogonal_columns() {
        let s = samples_from(
            vec![O(0), O(1), O(2)],
            vec![
                vec![1.0, 1.0, 1.0],
                vec![-1.0, -1.0, 1.0],
                vec![2.0, 2.0, -1.0],
                vec![-2.0, -2.0, -1.0],
            ],
        );
        let d = estimate_gaussian(&s).unwrap();
        assert_eq!(d.get(O(0), O(1)).unwrap(), 0.0);
        // Columns 0 and 2 have empirical inner product zero.
        assert!(d.get(O(0), O(2)).unwrap().is_infinite());
        assert_eq!(d.sign(O(0), O(1)).unwrap(), 1);
    }

    #[test]
    fn gaussian_zero_variance_column() {
        let s = samples_from(
            vec![O(0), O(1)],
            vec![vec![0.0, 1.0], vec![0.0, -1.0]],
        );
        assert!(matches!(
            estimate_gaussian(&s),
            Err(Error::ZeroVariance(0))
        ));
    }

    #[test]
    fn symmetric_identical_and_boundary() {
        let s = samples_from(
            vec![O(0), O(1), O(2)],
            vec![
                vec![0.0, 0.0, 1.0],
                vec![1.0, 1.0, 0.0],
                vec![0.0, 0.0, 0.0],
                vec![1.0, 1.0, 0.0],
            ],
        );
        let d = estimate_symmetric(&s, 2).unwrap();
        assert_eq!(d.get(O(0), O(1)).unwrap(), 0.0);
        // Disagreement fraction between columns 0 and 2 is exactly 1/2.
        assert!(d.get(O(0), O(2)).unwrap().is_infinite());
    }

    #[test]
    fn symmetric_rejects_out_of_alphabet() {
        let s = samples_from(vec![O(0), O(1)], vec![vec![0.0, 3.0]]);
        assert!(matches!(
            estimate_symmetric(&s, 2),
            Err(Error::AlphabetViolation { .. })
        ));
    }

    #[test]
    fn general_discrete_identical_columns() {
        let s = samples_from(
            vec![O(0), O(1)],
            vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 0.0], vec![1.0, 1.0]],
        );
        let d = estimate_general_discrete(&s, 2).unwrap();
        assert!(d.get(O(0), O(1)).unwrap().abs() < 1e-12);
    }

    #[test]
    fn general_discrete_independent_quarter_counts() {
        let s = samples_from(
            vec![O(0), O(1)],
            vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]],
        );
        let d = estimate_general_discrete(&s, 2).unwrap();
        assert!(d.get(O(0), O(1)).unwrap().is_infinite());
    }

    #[test]
    fn binary_determinant_form_matches_centered_correlation() {
        // Both routes are exact formulas on binary data, so they agree to
        // round-off.
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = 500;
            let flip: f64 = rng.random_range(0.05..0.45);
            let mut rows = Vec::with_capacity(n);
            for _ in 0..n {
                let a = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
                let b = if rng.random_bool(flip) { 1.0 - a } else { a };
                rows.push(vec![a, b]);
            }
            let s = samples_from(vec![O(0), O(1)], rows.clone());
            let d = estimate_general_discrete(&s, 2).unwrap();
            let got = d.get(O(0), O(1)).unwrap();

            // Independent oracle: centered Pearson correlation.
            let n_f = n as f64;
            let (mut ma, mut mb) = (0.0, 0.0);
            for r in &rows {
                ma += r[0];
                mb += r[1];
            }
            ma /= n_f;
            mb /= n_f;
            let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
            for r in &rows {
                cov += (r[0] - ma) * (r[1] - mb);
                va += (r[0] - ma).powi(2);
                vb += (r[1] - mb).powi(2);
            }
            let rho = cov / (va * vb).sqrt();
            let want = -rho.abs().ln();
            if want.is_finite() {
                assert!((got - want).abs() < 1e-10, "got {got}, want {want}");
            }
        }
    }

    #[test]
    fn csv_round_trip_with_inf() {
        let mut d = DistanceMatrix::zeros(vec![O(0), O(1), O(2)], DistanceSource::Exact);
        d.set(O(0), O(1), 0.25).unwrap();
        d.set(O(0), O(2), f64::INFINITY).unwrap();
        d.set(O(1), O(2), 1.5).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = DistanceMatrix::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.get(O(0), O(1)).unwrap(), 0.25);
        assert!(back.get(O(0), O(2)).unwrap().is_infinite());
        assert_eq!(back.get(O(2), O(1)).unwrap(), 1.5);
    }

    #[test]
    fn push_node_grows_matrix() {
        let mut d = DistanceMatrix::zeros(vec![O(0), O(1)], DistanceSource::Exact);
        d.set(O(0), O(1), 1.0).unwrap();
        let mut dists = BTreeMap::new();
        dists.insert(O(0), 0.5);
        dists.insert(O(1), 0.5);
        d.push_node(NodeId::Hidden(0), &dists);
        assert_eq!(d.get(NodeId::Hidden(0), O(1)).unwrap(), 0.5);
        assert_eq!(d.get(O(0), O(1)).unwrap(), 1.0);
    }
}
