//! Synthetic labeled mixtures and their analytic oracles.
//!
//! The canonical dataset is a three-node, two-class isotropic Gaussian
//! mixture: two nodes are purely blue, the third emits blue and red at
//! 50/50. Node selection is uniform. The exact Bayes class posterior of
//! the mixture replaces a trained classifier everywhere a "does this
//! sample match the forbidden class" question is asked.

use crate::error::{Error, Result};
use crate::rng::GaussStream;

pub const BLUE: usize = 0;
pub const RED: usize = 1;

/// Mahalanobis cutoff for calling a sample on-support (retains ≥ 99.96%
/// of true mixture mass in 2-D).
pub const DEFAULT_MAHAL_THRESHOLD: f64 = 4.0;

/// One isotropic mixture node.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub center: Vec<f64>,
    /// Standard deviation of the isotropic Gaussian.
    pub scale: f64,
}

/// Ground-truth labeled Gaussian mixture with uniform node weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub nodes: Vec<Node>,
    /// Per-node class emission probabilities, rows sum to 1.
    pub class_weights: Vec<Vec<f64>>,
    pub num_classes: usize,
}

/// A dataset point with its class label and originating node.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoint {
    pub x: Vec<f64>,
    pub class: usize,
    pub node: usize,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidRange("mixture needs at least one node".into()));
        }
        let dim = self.nodes[0].center.len();
        for node in &self.nodes {
            if node.scale <= 0.0 {
                return Err(Error::InvalidRange(format!("node scale {}", node.scale)));
            }
            if node.center.len() != dim {
                return Err(Error::ShapeMismatch("node centers differ in dim".into()));
            }
        }
        if self.class_weights.len() != self.nodes.len() {
            return Err(Error::ShapeMismatch("class weights per node".into()));
        }
        for row in &self.class_weights {
            if row.len() != self.num_classes {
                return Err(Error::ShapeMismatch("class weight row".into()));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 || row.iter().any(|&w| w < 0.0) {
                return Err(Error::InvalidRange(format!("class weights {row:?}")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.nodes[0].center.len()
    }

    /// Per-node log densities (up to nothing — fully normalized).
    fn node_log_densities(&self, x: &[f64]) -> Vec<f64> {
        let dim = self.dim() as f64;
        self.nodes
            .iter()
            .map(|node| {
                let d2: f64 = x
                    .iter()
                    .zip(&node.center)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let var = node.scale * node.scale;
                -d2 / (2.0 * var) - dim / 2.0 * (std::f64::consts::TAU * var).ln()
            })
            .collect()
    }

    fn log_sum_exp(terms: &[f64]) -> f64 {
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
    }

    /// Exact Bayes posterior p(class | x) under the mixture.
    pub fn class_posterior(&self, x: &[f64], class: usize) -> f64 {
        assert!(class < self.num_classes, "class {class} out of range");
        let logs = self.node_log_densities(x);
        let w = (self.nodes.len() as f64).recip();
        let class_terms: Vec<f64> = logs
            .iter()
            .zip(&self.class_weights)
            .filter(|(_, cw)| cw[class] > 0.0)
            .map(|(l, cw)| l + (w * cw[class]).ln())
            .collect();
        let all_terms: Vec<f64> = logs.iter().map(|l| l + w.ln()).collect();
        let num = Self::log_sum_exp(&class_terms);
        let den = Self::log_sum_exp(&all_terms);
        if num == f64::NEG_INFINITY {
            return 0.0;
        }
        (num - den).exp()
    }

    /// Mixture log density at x, in nats.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let logs = self.node_log_densities(x);
        let w = (self.nodes.len() as f64).recip();
        Self::log_sum_exp(&logs.iter().map(|l| l + w.ln()).collect::<Vec<_>>())
    }

    /// Log density of the mixture restricted to non-forbidden class mass,
    /// renormalized. `None` forbids nothing and equals `log_density`.
    pub fn log_density_kept(&self, x: &[f64], forbidden: Option<usize>) -> f64 {
        let Some(f) = forbidden else {
            return self.log_density(x);
        };
        assert!(f < self.num_classes, "class {f} out of range");
        let logs = self.node_log_densities(x);
        let w = (self.nodes.len() as f64).recip();
        let mut kept_mass = 0.0;
        let mut terms = Vec::with_capacity(self.nodes.len());
        for (l, cw) in logs.iter().zip(&self.class_weights) {
            let keep = 1.0 - cw[f];
            kept_mass += w * keep;
            if keep > 0.0 {
                terms.push(l + (w * keep).ln());
            }
        }
        Self::log_sum_exp(&terms) - kept_mass.ln()
    }

    /// Minimum over nodes of the Mahalanobis distance ‖x − c‖/scale.
    pub fn min_mahalanobis(&self, x: &[f64]) -> f64 {
        self.nodes
            .iter()
            .map(|node| {
                let d2: f64 = x
                    .iter()
                    .zip(&node.center)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                d2.sqrt() / node.scale
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Index of the node with the smallest Mahalanobis distance.
    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, node) in self.nodes.iter().enumerate() {
            let d2: f64 = x
                .iter()
                .zip(&node.center)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let d = d2.sqrt() / node.scale;
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// Draw labeled points from the mixture, seeded.
    pub fn sample_points(&self, seed: u64, n: usize) -> Vec<LabeledPoint> {
        let mut rng = GaussStream::new(seed);
        let dim = self.dim();
        (0..n)
            .map(|_| {
                let node = rng.index(self.nodes.len());
                let x: Vec<f64> = (0..dim)
                    .map(|d| self.nodes[node].center[d] + self.nodes[node].scale * rng.gauss())
                    .collect();
                let u = rng.uniform();
                let mut acc = 0.0;
                let mut class = self.num_classes - 1;
                for (c, &w) in self.class_weights[node].iter().enumerate() {
                    acc += w;
                    if u < acc {
                        class = c;
                        break;
                    }
                }
                LabeledPoint { x, class, node }
            })
            .collect()
    }
}

/// The toy dataset: nodes at (−4,0), (4,0), (0,5), isotropic scale 0.5;
/// nodes 1–2 are pure blue, node 3 mixes blue/red at 0.5/0.5.
pub fn make_threenode(seed: u64, n: usize) -> Result<(MixtureSpec, Vec<LabeledPoint>)> {
    if n < 1 {
        return Err(Error::InvalidRange("need at least one sample".into()));
    }
    let spec = MixtureSpec {
        nodes: vec![
            Node {
                center: vec![-4.0, 0.0],
                scale: 0.5,
            },
            Node {
                center: vec![4.0, 0.0],
                scale: 0.5,
            },
            Node {
                center: vec![0.0, 5.0],
                scale: 0.5,
            },
        ],
        class_weights: vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.5, 0.5]],
        num_classes: 2,
    };
    spec.validate()?;
    let points = spec.sample_points(seed, n);
    Ok((spec, points))
}

/// Fraction of samples farther than `mahal_threshold` from every node.
pub fn off_support_fraction(
    spec: &MixtureSpec,
    samples: &[Vec<f64>],
    mahal_threshold: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    if mahal_threshold <= 0.0 {
        return Err(Error::InvalidRange(format!(
            "mahalanobis threshold {mahal_threshold}"
        )));
    }
    let off = samples
        .iter()
        .filter(|x| spec.min_mahalanobis(x) > mahal_threshold)
        .count();
    Ok(off as f64 / samples.len() as f64)
}
