//! Continuous Gaussian CRF over superpixel depths.
//!
//! With unary outputs `h` and pairwise weights `W_ij = sum_k beta_k S^k_ij`
//! on the unordered neighbor edges, the energy is
//!
//! ```text
//! E(y) = -sum_i (y_i - h_i)^2 - sum_edges W_ij (y_i - y_j)^2
//!      = -(y'Ay - 2h'y + h'h),        A = I + L(W)
//! ```
//!
//! where `L(W)` is the weighted graph Laplacian. `A` is symmetric with all
//! eigenvalues at least 1, so `Pr(y) ∝ exp(E)` is a Gaussian with mean
//! `A^-1 h` and the negative log-likelihood has the closed form
//!
//! ```text
//! nll = y'Ay - 2h'y + h'A^-1 h + (p/2) log(pi) - (1/2) log det A.
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};

const CG_TOLERANCE: f64 = 1e-8;

/// Borrowed neighbor structure: node count, unordered edges and one
/// similarity per edge for each kind.
#[derive(Debug, Clone, Copy)]
pub struct CrfGraph<'a> {
    pub nodes: usize,
    pub edges: &'a [(usize, usize)],
    pub similarities: &'a [Vec<f64>],
}

impl<'a> CrfGraph<'a> {
    pub fn kinds(&self) -> usize {
        self.similarities.len()
    }

    fn validate(&self) -> Result<()> {
        for (k, s) in self.similarities.iter().enumerate() {
            if s.len() != self.edges.len() {
                return Err(Error::Shape(format!("{} similarities of kind {k} for {} edges", s.len(), self.edges.len())));
            }
        }
        if let Some(&(i, j)) = self.edges.iter().find(|&&(i, j)| i >= self.nodes || j >= self.nodes || i == j) {
            return Err(Error::Shape(format!("edge ({i}, {j}) invalid for {} nodes", self.nodes)));
        }
        Ok(())
    }
}

/// Pairwise weights and regularization strengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrfParams {
    pub beta: Vec<f64>,
    pub lambda_theta: f64,
    pub lambda_beta: f64,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self { beta: vec![1.0, 1.0], lambda_theta: 1e-3, lambda_beta: 1e-3 }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        if self.beta.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return Err(param("beta must be finite and >= 0"));
        }
        if !(self.lambda_theta >= 0.0 && self.lambda_beta >= 0.0) {
            return Err(param("regularization strengths must be >= 0"));
        }
        Ok(())
    }

    /// Clamps every `beta_k` at zero.
    pub fn project(&mut self) {
        self.beta.iter_mut().for_each(|b| *b = b.max(0.0));
    }
}

/// The assembled quadratic form `A = I + L(W)` of one image.
#[derive(Debug, Clone)]
pub struct CrfSystem<'a> {
    graph: CrfGraph<'a>,
    /// `W` per edge.
    weights: Vec<f64>,
    diag: Vec<f64>,
}

impl<'a> CrfSystem<'a> {
    pub fn new(graph: CrfGraph<'a>, beta: &[f64]) -> Result<Self> {
        graph.validate()?;
        if beta.len() != graph.kinds() {
            return Err(Error::Shape(format!("{} beta values for {} similarity kinds", beta.len(), graph.kinds())));
        }
        if beta.iter().any(|b| !(*b >= 0.0)) {
            return Err(param("beta must be >= 0"));
        }
        let weights: Vec<f64> = (0..graph.edges.len())
            .map(|e| beta.iter().zip(graph.similarities).map(|(b, s)| b * s[e]).sum())
            .collect();
        let mut diag = vec![1.0; graph.nodes];
        for (&(i, j), w) in graph.edges.iter().zip(&weights) {
            diag[i] += w;
            diag[j] += w;
        }
        Ok(Self { graph, weights, diag })
    }

    pub fn len(&self) -> usize {
        self.graph.nodes
    }

    pub fn is_empty(&self) -> bool {
        self.graph.nodes == 0
    }

    pub fn edge_weights(&self) -> &[f64] {
        &self.weights
    }

    /// `A x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = x.iter().zip(&self.diag).map(|(v, d)| v * d).collect();
        for (&(i, j), w) in self.graph.edges.iter().zip(&self.weights) {
            out[i] -= w * x[j];
            out[j] -= w * x[i];
        }
        out
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut a = DMatrix::from_diagonal(&DVector::from_column_slice(&self.diag));
        for (&(i, j), w) in self.graph.edges.iter().zip(&self.weights) {
            a[(i, j)] -= w;
            a[(j, i)] -= w;
        }
        debug_assert_eq!(a.nrows(), n);
        a
    }

    /// Solves `A y = h` by Jacobi-preconditioned conjugate gradient to a
    /// relative residual of `1e-8`.
    pub fn solve(&self, h: &[f64]) -> Result<Vec<f64>> {
        let n = self.len();
        let h_norm = dot(h, h).sqrt();
        let mut x: Vec<f64> = h.iter().zip(&self.diag).map(|(v, d)| v / d).collect();
        if h_norm == 0.0 {
            return Ok(vec![0.0; n]);
        }
        let ax = self.apply(&x);
        let mut r: Vec<f64> = h.iter().zip(&ax).map(|(a, b)| a - b).collect();
        let mut z: Vec<f64> = r.iter().zip(&self.diag).map(|(v, d)| v / d).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        for _ in 0..(10 * n + 100) {
            if dot(&r, &r).sqrt() <= CG_TOLERANCE * h_norm {
                return Ok(x);
            }
            let ap = self.apply(&p);
            let alpha = rz / dot(&p, &ap);
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            z = r.iter().zip(&self.diag).map(|(v, d)| v / d).collect();
            let rz_next = dot(&r, &z);
            let beta = rz_next / rz;
            rz = rz_next;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        if dot(&r, &r).sqrt() <= CG_TOLERANCE * h_norm {
            Ok(x)
        } else {
            Err(Error::Internal("conjugate gradient did not converge".into()))
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_len(name: &str, v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::Shape(format!("{name} has {} entries for {n} nodes", v.len())));
    }
    Ok(())
}

fn check_finite(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Input(format!("{name} contains non-finite values")))
    }
}

/// Energy of depths `y` given unary outputs `h`; unordered edges count once.
pub fn energy(y: &[f64], h: &[f64], graph: CrfGraph, beta: &[f64]) -> Result<f64> {
    let sys = CrfSystem::new(graph, beta)?;
    check_len("y", y, graph.nodes)?;
    check_len("h", h, graph.nodes)?;
    let unary: f64 = y.iter().zip(h).map(|(a, b)| (a - b).powi(2)).sum();
    let pairwise: f64 = graph.edges.iter().zip(&sys.weights).map(|(&(i, j), w)| w * (y[i] - y[j]).powi(2)).sum();
    Ok(-unary - pairwise)
}

/// MAP depths: the solution of `A y = h`.
pub fn map_infer(h: &[f64], graph: CrfGraph, beta: &[f64]) -> Result<Vec<f64>> {
    let sys = CrfSystem::new(graph, beta)?;
    check_len("h", h, graph.nodes)?;
    check_finite("h", h)?;
    sys.solve(h)
}

/// Negative log-likelihood with its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct NllGrad {
    pub value: f64,
    pub d_h: Vec<f64>,
    pub d_beta: Vec<f64>,
}

struct Factored {
    a: DMatrix<f64>,
    a_inv: DMatrix<f64>,
    log_det: f64,
}

fn factor(sys: &CrfSystem) -> Result<Factored> {
    let a = sys.dense();
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Internal("CRF system matrix is not positive definite".into()))?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(Factored { a_inv: chol.inverse(), a, log_det })
}

fn nll_parts(y: &[f64], h: &[f64], f: &Factored) -> (f64, DVector<f64>) {
    let p = y.len();
    let yv = DVector::from_column_slice(y);
    let hv = DVector::from_column_slice(h);
    let m = &f.a_inv * &hv;
    let value = yv.dot(&(&f.a * &yv)) - 2.0 * hv.dot(&yv) + hv.dot(&m) + 0.5 * p as f64 * std::f64::consts::PI.ln()
        - 0.5 * f.log_det;
    (value, m)
}

fn prepare<'a>(y: &[f64], h: &[f64], graph: CrfGraph<'a>, beta: &[f64]) -> Result<CrfSystem<'a>> {
    let sys = CrfSystem::new(graph, beta)?;
    check_len("y", y, graph.nodes)?;
    check_len("h", h, graph.nodes)?;
    check_finite("y", y)?;
    check_finite("h", h)?;
    Ok(sys)
}

/// `-log Pr(y | h)` under the normalized Gaussian.
pub fn nll(y: &[f64], h: &[f64], graph: CrfGraph, beta: &[f64]) -> Result<f64> {
    let sys = prepare(y, h, graph, beta)?;
    Ok(nll_parts(y, h, &factor(&sys)?).0)
}

/// NLL and its derivatives with respect to the unary outputs and to each
/// pairwise weight.
pub fn nll_grad(y: &[f64], h: &[f64], graph: CrfGraph, beta: &[f64]) -> Result<NllGrad> {
    let sys = prepare(y, h, graph, beta)?;
    let f = factor(&sys)?;
    let (value, m) = nll_parts(y, h, &f);
    let d_h = (0..y.len()).map(|i| 2.0 * (m[i] - y[i])).collect();
    let d_beta = graph
        .similarities
        .iter()
        .map(|s| {
            graph
                .edges
                .iter()
                .zip(s)
                .map(|(&(i, j), s)| {
                    let trace = f.a_inv[(i, i)] + f.a_inv[(j, j)] - 2.0 * f.a_inv[(i, j)];
                    s * ((y[i] - y[j]).powi(2) - (m[i] - m[j]).powi(2) - 0.5 * trace)
                })
                .sum()
        })
        .collect();
    Ok(NllGrad { value, d_h, d_beta })
}

/// `d nll / d y = 2 A y - 2 h`.
pub fn nll_grad_y(y: &[f64], h: &[f64], graph: CrfGraph, beta: &[f64]) -> Result<Vec<f64>> {
    let sys = prepare(y, h, graph, beta)?;
    Ok(sys.apply(y).iter().zip(h).map(|(a, b)| 2.0 * a - 2.0 * b).collect())
}

/// One image's ground truth, unary outputs and graph.
#[derive(Debug, Clone, Copy)]
pub struct CrfSample<'a> {
    pub y: &'a [f64],
    pub h: &'a [f64],
    pub graph: CrfGraph<'a>,
}

/// Summed NLL plus `lambda_theta/2 |theta|^2 + lambda_beta/2 |beta|^2`.
pub fn objective(batch: &[CrfSample], theta_norm_sq: f64, params: &CrfParams) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("objective of an empty batch".into()));
    }
    let data: f64 = batch.iter().map(|s| nll(s.y, s.h, s.graph, &params.beta)).sum::<Result<f64>>()?;
    Ok(data + regularizer(theta_norm_sq, params))
}

pub fn regularizer(theta_norm_sq: f64, params: &CrfParams) -> f64 {
    let beta_sq: f64 = params.beta.iter().map(|b| b * b).sum();
    0.5 * params.lambda_theta * theta_norm_sq + 0.5 * params.lambda_beta * beta_sq
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::PI;

    struct Owned {
        nodes: usize,
        edges: Vec<(usize, usize)>,
        sims: Vec<Vec<f64>>,
    }

    impl Owned {
        fn graph(&self) -> CrfGraph<'_> {
            CrfGraph { nodes: self.nodes, edges: &self.edges, similarities: &self.sims }
        }
    }

    fn pair(s: f64) -> Owned {
        Owned { nodes: 2, edges: vec![(0, 1)], sims: vec![vec![s]] }
    }

    fn random_graph(nodes: usize, seed: u64) -> Owned {
        let mut rng = rng_for(&[seed, 0xC4F]);
        let mut edges = Vec::new();
        for i in 0..nodes {
            for j in i + 1..nodes {
                if j == i + 1 || rng.random::<f64>() < 0.4 {
                    edges.push((i, j));
                }
            }
        }
        let sims = (0..2).map(|_| edges.iter().map(|_| rng.random_range(0.05..1.0)).collect()).collect();
        Owned { nodes, edges, sims }
    }

    #[test]
    fn energy_hand_values() {
        let g = pair(1.0);
        assert_eq!(energy(&[1.0, 5.0], &[1.0, 5.0], g.graph(), &[0.0]).unwrap(), 0.0);
        assert_eq!(energy(&[0.0, 2.0], &[0.0, 2.0], g.graph(), &[1.0]).unwrap(), -4.0);
        assert!(matches!(energy(&[0.0], &[0.0, 2.0], g.graph(), &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn energy_equals_quadratic_form_and_is_translation_invariant() {
        let g = random_graph(6, 1);
        let beta = [0.7, 1.3];
        let mut rng = rng_for(&[2]);
        let y: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..10.0)).collect();
        let h: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..10.0)).collect();
        let e = energy(&y, &h, g.graph(), &beta).unwrap();
        let sys = CrfSystem::new(g.graph(), &beta).unwrap();
        let quad = -(dot(&y, &sys.apply(&y)) - 2.0 * dot(&h, &y) + dot(&h, &h));
        assert!((e - quad).abs() <= 1e-10 * e.abs().max(1.0));
        let ys: Vec<f64> = y.iter().map(|v| v + 3.5).collect();
        let hs: Vec<f64> = h.iter().map(|v| v + 3.5).collect();
        assert!((energy(&ys, &hs, g.graph(), &beta).unwrap() - e).abs() < 1e-9);
    }

    #[test]
    fn map_hand_values() {
        let g = pair(1.0);
        assert_eq!(map_infer(&[0.3, 2.0], g.graph(), &[0.0]).unwrap(), vec![0.3, 2.0]);
        let y = map_infer(&[0.0, 2.0], g.graph(), &[1.0]).unwrap();
        assert!((y[0] - 2.0 / 3.0).abs() < 1e-9 && (y[1] - 4.0 / 3.0).abs() < 1e-9);
        let big = random_graph(30, 3);
        let y = map_infer(&[4.2; 30], big.graph(), &[2.0, 0.5]).unwrap();
        assert!(y.iter().all(|v| (v - 4.2).abs() < 1e-7));
        assert!(matches!(map_infer(&[f64::NAN, 1.0], g.graph(), &[1.0]), Err(Error::Input(_))));
    }

    #[test]
    fn map_matches_dense_solve() {
        let g = random_graph(12, 4);
        let beta = [1.5, 0.4];
        let h: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin() * 5.0 + 8.0).collect();
        let y = map_infer(&h, g.graph(), &beta).unwrap();
        let sys = CrfSystem::new(g.graph(), &beta).unwrap();
        let exact = sys.dense().lu().solve(&DVector::from_column_slice(&h)).unwrap();
        for i in 0..12 {
            assert!((y[i] - exact[i]).abs() < 1e-7);
        }
        let r: Vec<f64> = sys.apply(&y).iter().zip(&h).map(|(a, b)| a - b).collect();
        assert!(dot(&r, &r).sqrt() <= 1e-8 * dot(&h, &h).sqrt());
    }

    #[test]
    fn single_node_nll() {
        let g = Owned { nodes: 1, edges: vec![], sims: vec![vec![], vec![]] };
        let v = nll(&[2.5], &[2.5], g.graph(), &[0.3, 0.1]).unwrap();
        assert!((v - 0.5 * PI.ln()).abs() < 1e-12);
        assert!((v - 0.57236).abs() < 1e-5);
        let v = nll(&[1.0], &[3.0], g.graph(), &[0.0, 0.0]).unwrap();
        assert!((v - (4.0 + 0.5 * PI.ln())).abs() < 1e-12);
        let gr = nll_grad(&[1.0], &[3.0], g.graph(), &[0.0, 0.0]).unwrap();
        assert!((gr.d_h[0] - (-2.0 * (1.0 - 3.0))).abs() < 1e-12);
    }

    #[test]
    fn two_node_likelihood_matches_numerical_normalization() {
        let g = pair(0.8);
        let (h, beta) = ([1.0, 2.5], [1.2]);
        let m = map_infer(&h, g.graph(), &beta).unwrap();
        // Unnormalized density exp(E(y)); integrate on a grid around the mean.
        let n = 801;
        let half = 6.0;
        let step = 2.0 * half / (n - 1) as f64;
        let mut z = 0.0;
        for a in 0..n {
            for b in 0..n {
                let y = [m[0] - half + a as f64 * step, m[1] - half + b as f64 * step];
                z += energy(&y, &h, g.graph(), &beta).unwrap().exp();
            }
        }
        z *= step * step;
        for y in [[1.0, 2.0], [1.7, 1.7], [0.2, 3.1]] {
            let expected = energy(&y, &h, g.graph(), &beta).unwrap().exp() / z;
            let got = (-nll(&y, &h, g.graph(), &beta).unwrap()).exp();
            assert!((got - expected).abs() < 1e-4, "{got} vs {expected}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let g = random_graph(5, 10 + seed);
            let mut rng = rng_for(&[seed, 77]);
            let y: Vec<f64> = (0..5).map(|_| rng.random_range(1.0..6.0)).collect();
            let h: Vec<f64> = (0..5).map(|_| rng.random_range(1.0..6.0)).collect();
            let beta = vec![rng.random_range(0.2..2.0), rng.random_range(0.2..2.0)];
            let gr = nll_grad(&y, &h, g.graph(), &beta).unwrap();
            let eps = 1e-6;
            let close = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-2) < 1e-4;
            for i in 0..5 {
                let f = |d: f64| {
                    let mut h2 = h.clone();
                    h2[i] += d;
                    nll(&y, &h2, g.graph(), &beta).unwrap()
                };
                let fd = (f(eps) - f(-eps)) / (2.0 * eps);
                assert!(close(fd, gr.d_h[i]), "d_h[{i}]: {fd} vs {}", gr.d_h[i]);
            }
            for k in 0..2 {
                let f = |d: f64| {
                    let mut b2 = beta.clone();
                    b2[k] += d;
                    nll(&y, &h, g.graph(), &b2).unwrap()
                };
                let fd = (f(eps) - f(-eps)) / (2.0 * eps);
                assert!(close(fd, gr.d_beta[k]), "d_beta[{k}]: {fd} vs {}", gr.d_beta[k]);
            }
            assert!((gr.value - nll(&y, &h, g.graph(), &beta).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn map_is_stationary_for_nll() {
        let g = random_graph(8, 20);
        let beta = [0.9, 0.3];
        let h: Vec<f64> = (0..8).map(|i| 3.0 + i as f64 * 0.4).collect();
        let y = map_infer(&h, g.graph(), &beta).unwrap();
        for d in nll_grad_y(&y, &h, g.graph(), &beta).unwrap() {
            assert!(d.abs() < 1e-7);
        }
    }

    #[test]
    fn objective_regularizers() {
        let g = pair(0.5);
        let s = CrfSample { y: &[1.0, 2.0], h: &[1.5, 1.5], graph: g.graph() };
        let mut p = CrfParams { beta: vec![0.8], lambda_theta: 0.0, lambda_beta: 0.0 };
        let plain = objective(&[s], 7.0, &p).unwrap();
        assert_eq!(plain, nll(s.y, s.h, s.graph, &p.beta).unwrap());
        p.lambda_beta = 0.1;
        let r1 = objective(&[s], 0.0, &p).unwrap() - plain;
        p.lambda_beta = 0.2;
        let r2 = objective(&[s], 0.0, &p).unwrap() - plain;
        assert!((r2 - 2.0 * r1).abs() < 1e-15);
        assert_eq!(regularizer(0.0, &CrfParams { beta: vec![0.0], lambda_theta: 1.0, lambda_beta: 1.0 }), 0.0);
        assert!(objective(&[], 0.0, &p).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn system_is_positive_definite(seed in 0u64..10_000, n in 2usize..9, b0 in 0.0f64..5.0, b1 in 0.0f64..5.0) {
            let g = random_graph(n, seed);
            let sys = CrfSystem::new(g.graph(), &[b0, b1]).unwrap();
            prop_assert!(sys.dense().cholesky().is_some());
            let mut rng = rng_for(&[seed, 5]);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            prop_assert!(dot(&x, &sys.apply(&x)) >= dot(&x, &x) * (1.0 - 1e-12));
        }

        #[test]
        fn map_minimizes_nll(seed in 0u64..10_000, n in 2usize..7) {
            let g = random_graph(n, seed);
            let mut rng = rng_for(&[seed, 6]);
            let h: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..8.0)).collect();
            let beta = [rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)];
            let y_star = map_infer(&h, g.graph(), &beta).unwrap();
            let best = nll(&y_star, &h, g.graph(), &beta).unwrap();
            for _ in 0..20 {
                let y: Vec<f64> = y_star.iter().map(|v| v + rng.random_range(-1.0..1.0)).collect();
                prop_assert!(nll(&y, &h, g.graph(), &beta).unwrap() >= best - 1e-12);
            }
        }

        #[test]
        fn projection_keeps_beta_non_negative(b in proptest::collection::vec(-5.0f64..5.0, 1..4)) {
            let mut p = CrfParams { beta: b, ..Default::default() };
            p.project();
            prop_assert!(p.beta.iter().all(|&v| v >= 0.0));
        }
    }
}
