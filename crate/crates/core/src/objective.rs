//! The personalized objective F = f + h and its derived constants.
//!
//! `f(x) = (1/n) sum_i f_i(x_i)` holds the per-client losses over the n
//! model blocks; `h(x) = (1/n) sum_i (lambda/2) ||x_i - xbar||^2` penalizes
//! distance to the block average. Two local losses are provided: l2-regularized
//! logistic regression (strongly convex for l2 > 0) and sigmoid-loss
//! regression (bounded, nonconvex) for exercising the nonconvex bounds.

use ndarray::{Array1, Array2, ArrayView1, ArrayViewMut1};

use crate::data::PartitionedDataset;

/// The concatenated iterate: n model blocks of dimension d, with an optional
/// cached block average.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedModel {
    blocks: Vec<Array1<f64>>,
    cached_average: Option<Array1<f64>>,
}

impl StackedModel {
    pub fn zeros(n: usize, d: usize) -> Self {
        StackedModel {
            blocks: vec![Array1::zeros(d); n],
            cached_average: None,
        }
    }

    pub fn from_blocks(blocks: Vec<Array1<f64>>) -> Self {
        assert!(!blocks.is_empty(), "stacked model needs at least one block");
        let d = blocks[0].len();
        assert!(
            blocks.iter().all(|b| b.len() == d),
            "all blocks must share the dimension"
        );
        StackedModel {
            blocks,
            cached_average: None,
        }
    }

    /// All blocks equal to `w`.
    pub fn replicated(w: Array1<f64>, n: usize) -> Self {
        StackedModel::from_blocks(vec![w; n])
    }

    pub fn n(&self) -> usize {
        self.blocks.len()
    }

    pub fn d(&self) -> usize {
        self.blocks[0].len()
    }

    pub fn block(&self, i: usize) -> ArrayView1<'_, f64> {
        self.blocks[i].view()
    }

    /// Mutable block access; drops the cached average.
    pub fn block_mut(&mut self, i: usize) -> ArrayViewMut1<'_, f64> {
        self.cached_average = None;
        self.blocks[i].view_mut()
    }

    pub fn blocks(&self) -> &[Array1<f64>] {
        &self.blocks
    }

    /// Freshly computed block average (1/n) sum_i x_i.
    pub fn average(&self) -> Array1<f64> {
        let mut avg = Array1::zeros(self.d());
        for b in &self.blocks {
            avg += b;
        }
        avg / self.n() as f64
    }

    /// Computes and stores the average so later reads can reuse it.
    pub fn refresh_average(&mut self) -> &Array1<f64> {
        if self.cached_average.is_none() {
            self.cached_average = Some(self.average());
        }
        self.cached_average.as_ref().unwrap()
    }

    pub fn cached_average(&self) -> Option<&Array1<f64>> {
        self.cached_average.as_ref()
    }

    pub fn sq_norm(&self) -> f64 {
        self.blocks.iter().map(|b| b.dot(b)).sum()
    }

    pub fn sq_distance(&self, other: &StackedModel) -> f64 {
        assert_eq!(self.n(), other.n());
        self.blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| {
                let diff = a - b;
                diff.dot(&diff)
            })
            .sum()
    }

    /// self += coeff * other, blockwise.
    pub fn add_scaled(&mut self, coeff: f64, other: &StackedModel) {
        assert_eq!(self.n(), other.n());
        self.cached_average = None;
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.scaled_add(coeff, b);
        }
    }
}

/// A block-separable smooth term f plus the averaging penalty weight.
pub trait Objective: Sync {
    fn n(&self) -> usize;
    fn d(&self) -> usize;
    fn lambda(&self) -> f64;
    /// f_i evaluated at one block.
    fn local_loss(&self, i: usize, x_i: ArrayView1<'_, f64>) -> f64;
    /// The full local gradient of f_i (not divided by n).
    fn local_gradient(&self, i: usize, x_i: ArrayView1<'_, f64>) -> Array1<f64>;
}

/// f(x) = (1/n) sum_i f_i(x_i).
pub fn f_value(obj: &impl Objective, x: &StackedModel) -> f64 {
    let n = obj.n();
    (0..n).map(|i| obj.local_loss(i, x.block(i))).sum::<f64>() / n as f64
}

/// Block i of the gradient of f is (1/n) * grad f_i(x_i).
pub fn f_gradient(obj: &impl Objective, x: &StackedModel) -> StackedModel {
    let n = obj.n() as f64;
    StackedModel::from_blocks(
        (0..obj.n())
            .map(|i| obj.local_gradient(i, x.block(i)) / n)
            .collect(),
    )
}

/// h(x) = (1/n) sum_i (lambda/2) ||x_i - xbar||^2.
pub fn h_value(obj: &impl Objective, x: &StackedModel) -> f64 {
    let avg = x.average();
    let lambda = obj.lambda();
    let mut acc = 0.0;
    for i in 0..x.n() {
        let diff = &x.block(i) - &avg;
        acc += 0.5 * lambda * diff.dot(&diff);
    }
    acc / x.n() as f64
}

/// Block i of the gradient of h is (lambda/n)(x_i - xbar).
pub fn h_gradient(obj: &impl Objective, x: &StackedModel) -> StackedModel {
    let avg = x.average();
    let coeff = obj.lambda() / x.n() as f64;
    StackedModel::from_blocks(
        (0..x.n())
            .map(|i| {
                let mut g = x.block(i).to_owned();
                g -= &avg;
                g * coeff
            })
            .collect(),
    )
}

/// F = f + h.
pub fn objective_value(obj: &impl Objective, x: &StackedModel) -> f64 {
    f_value(obj, x) + h_value(obj, x)
}

pub fn full_gradient(obj: &impl Objective, x: &StackedModel) -> StackedModel {
    let mut g = f_gradient(obj, x);
    g.add_scaled(1.0, &h_gradient(obj, x));
    g
}

/// Smoothness/strong-convexity constants of f under the blockwise Hessian
/// bounds. `strongly_convex` is false when l2 = 0 (mu = 0 then).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SmoothnessConstants {
    pub l_f: f64,
    /// L = n * L_f.
    pub l: f64,
    pub mu: f64,
    pub strongly_convex: bool,
}

/// Smoothness bound for the full objective F = f + h: the penalty Hessian
/// has spectral norm lambda/n.
pub fn full_smoothness_bound(l_f: f64, lambda: f64, n: usize) -> f64 {
    l_f + lambda / n as f64
}

/// Largest eigenvalue of A^T A by power iteration with a deterministic
/// start. Inflated by 1e-9 relative so the result stays a valid upper bound
/// under late-iteration truncation.
fn gram_spectral_norm(a: &Array2<f64>) -> f64 {
    let d = a.ncols();
    if a.nrows() == 0 || d == 0 {
        return 0.0;
    }
    let b = a.t().dot(a);
    let mut v: Array1<f64> =
        Array1::from_iter((0..d).map(|j| 1.0 + 0.001 * ((j * 2_654_435_761) % 97) as f64));
    let norm = v.dot(&v).sqrt();
    v /= norm;
    let mut lambda = 0.0f64;
    for _ in 0..20_000 {
        let w = b.dot(&v);
        let w_norm = w.dot(&w).sqrt();
        if w_norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / w_norm;
        if (next - lambda).abs() <= 1e-13 * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda * (1.0 + 1e-9)
}

/// One client's dense examples.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub features: Array2<f64>,
    pub labels: Array1<f64>,
}

impl ClientData {
    fn margins(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        &self.features.dot(&x) * &self.labels
    }

    fn count(&self) -> usize {
        self.labels.len()
    }
}

fn densify(dataset: &PartitionedDataset) -> Vec<ClientData> {
    (0..dataset.n())
        .map(|i| {
            let (features, labels) = dataset.dense_client(i);
            ClientData { features, labels }
        })
        .collect()
}

/// Numerically stable log(1 + e^t).
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Numerically stable 1 / (1 + e^-t).
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// l2-regularized logistic regression over a client partition:
/// f_i(x) = (1/n_i) sum_j log(1 + exp(-b_j a_j^T x)) + (l2/2) ||x||^2.
#[derive(Debug, Clone)]
pub struct LogisticProblem {
    clients: Vec<ClientData>,
    d: usize,
    pub l2: f64,
    pub lambda: f64,
}

impl LogisticProblem {
    pub fn new(dataset: &PartitionedDataset, l2: f64, lambda: f64) -> Self {
        assert!(l2 >= 0.0 && lambda >= 0.0);
        assert!(
            dataset.clients.iter().all(|c| !c.is_empty()),
            "every client needs at least one example"
        );
        LogisticProblem {
            clients: densify(dataset),
            d: dataset.d,
            l2,
            lambda,
        }
    }

    pub fn client(&self, i: usize) -> &ClientData {
        &self.clients[i]
    }

    /// The same data and regularization with a different penalty weight.
    pub fn with_lambda(&self, lambda: f64) -> Self {
        let mut copy = self.clone();
        copy.lambda = lambda;
        copy
    }

    /// L_f = (1/n) max_i (sigma_max(A_i^T A_i) / (4 n_i) + l2), mu = l2/n.
    pub fn smoothness(&self) -> SmoothnessConstants {
        smoothness_from_curvature(&self.clients, self.l2, 0.25)
    }

    /// 0/1 accuracy of block i of `x` on client i's own shard.
    pub fn per_client_accuracy(&self, x: &StackedModel) -> Vec<f64> {
        self.clients
            .iter()
            .enumerate()
            .map(|(i, c)| shard_accuracy(c, x.block(i)))
            .collect()
    }

    /// 0/1 accuracy of a single model on the pooled examples of all shards.
    pub fn pooled_accuracy(&self, w: ArrayView1<'_, f64>) -> f64 {
        let mut correct = 0usize;
        let mut total = 0usize;
        for c in &self.clients {
            let margins = c.margins(w);
            correct += margins.iter().filter(|&&m| m > 0.0).count();
            total += c.count();
        }
        correct as f64 / total as f64
    }
}

fn shard_accuracy(client: &ClientData, x: ArrayView1<'_, f64>) -> f64 {
    let margins = client.margins(x);
    margins.iter().filter(|&&m| m > 0.0).count() as f64 / client.count() as f64
}

fn smoothness_from_curvature(
    clients: &[ClientData],
    l2: f64,
    curvature: f64,
) -> SmoothnessConstants {
    let n = clients.len() as f64;
    let worst = clients
        .iter()
        .map(|c| curvature * gram_spectral_norm(&c.features) / c.count() as f64 + l2)
        .fold(0.0f64, f64::max);
    let l_f = worst / n;
    SmoothnessConstants {
        l_f,
        l: n * l_f,
        mu: l2 / n,
        strongly_convex: l2 > 0.0,
    }
}

impl Objective for LogisticProblem {
    fn n(&self) -> usize {
        self.clients.len()
    }

    fn d(&self) -> usize {
        self.d
    }

    fn lambda(&self) -> f64 {
        self.lambda
    }

    fn local_loss(&self, i: usize, x_i: ArrayView1<'_, f64>) -> f64 {
        let c = &self.clients[i];
        let margins = c.margins(x_i);
        let mean = margins.iter().map(|&m| softplus(-m)).sum::<f64>() / c.count() as f64;
        mean + 0.5 * self.l2 * x_i.dot(&x_i)
    }

    fn local_gradient(&self, i: usize, x_i: ArrayView1<'_, f64>) -> Array1<f64> {
        let c = &self.clients[i];
        let margins = c.margins(x_i);
        // d/dm softplus(-m) = -sigmoid(-m)
        let weights = Array1::from_iter(
            margins
                .iter()
                .zip(c.labels.iter())
                .map(|(&m, &b)| -b * sigmoid(-m)),
        );
        let mut grad = c.features.t().dot(&weights) / c.count() as f64;
        grad.scaled_add(self.l2, &x_i);
        grad
    }
}

/// Sigmoid-loss regression, a bounded nonconvex objective:
/// f_i(x) = (1/n_i) sum_j sigmoid(-b_j a_j^T x) + (l2/2) ||x||^2.
#[derive(Debug, Clone)]
pub struct SigmoidProblem {
    clients: Vec<ClientData>,
    d: usize,
    pub l2: f64,
    pub lambda: f64,
}

impl SigmoidProblem {
    pub fn new(dataset: &PartitionedDataset, l2: f64, lambda: f64) -> Self {
        SigmoidProblem {
            clients: densify(dataset),
            d: dataset.d,
            l2,
            lambda,
        }
    }

    /// Curvature of sigmoid loss is bounded by 1/(6 sqrt(3)).
    pub fn smoothness(&self) -> SmoothnessConstants {
        smoothness_from_curvature(&self.clients, self.l2, 1.0 / (6.0 * 3.0f64.sqrt()))
    }
}

impl Objective for SigmoidProblem {
    fn n(&self) -> usize {
        self.clients.len()
    }

    fn d(&self) -> usize {
        self.d
    }

    fn lambda(&self) -> f64 {
        self.lambda
    }

    fn local_loss(&self, i: usize, x_i: ArrayView1<'_, f64>) -> f64 {
        let c = &self.clients[i];
        let margins = c.margins(x_i);
        let mean = margins.iter().map(|&m| sigmoid(-m)).sum::<f64>() / c.count() as f64;
        mean + 0.5 * self.l2 * x_i.dot(&x_i)
    }

    fn local_gradient(&self, i: usize, x_i: ArrayView1<'_, f64>) -> Array1<f64> {
        let c = &self.clients[i];
        let margins = c.margins(x_i);
        let weights = Array1::from_iter(margins.iter().zip(c.labels.iter()).map(|(&m, &b)| {
            let s = sigmoid(-m);
            -b * s * (1.0 - s)
        }));
        let mut grad = c.features.t().dot(&weights) / c.count() as f64;
        grad.scaled_add(self.l2, &x_i);
        grad
    }
}

/// Result of the deterministic full-gradient descent oracle.
#[derive(Debug, Clone)]
pub struct MinimizerReport {
    pub x: StackedModel,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Full-gradient descent on F from zero with stepsize 1/(L_f + 2 lambda/n),
/// run until ||grad F|| <= tol. The reference point for every bound that
/// mentions the minimizer.
pub fn minimize(
    obj: &impl Objective,
    l_f: f64,
    tol: f64,
    max_iterations: usize,
) -> MinimizerReport {
    let step = 1.0 / (l_f + 2.0 * obj.lambda() / obj.n() as f64);
    let mut x = StackedModel::zeros(obj.n(), obj.d());
    let mut gradient_norm = f64::INFINITY;
    for iter in 0..max_iterations {
        let g = full_gradient(obj, &x);
        gradient_norm = g.sq_norm().sqrt();
        if gradient_norm <= tol {
            return MinimizerReport {
                x,
                gradient_norm,
                iterations: iter,
                converged: true,
            };
        }
        x.add_scaled(-step, &g);
    }
    MinimizerReport {
        x,
        gradient_norm,
        iterations: max_iterations,
        converged: false,
    }
}
