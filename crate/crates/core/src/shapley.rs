//! Shapley feature contributions with an interventional (marginal) value
//! function: `v(S)` is the mean model output over background rows `b` after
//! overwriting the features in `S` with the explained instance `x`.
//!
//! Exact mode enumerates all `2^m` coalitions. Sampled mode walks random
//! feature permutations against random background rows and then spreads the
//! leftover efficiency gap over the features in proportion to `|phi|`, so the
//! contributions always add up to `prediction - base_value`.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureDescriptor;
use crate::label::Label;
use crate::predictor::{sigmoid, Model};

pub const DEFAULT_EXACT_LIMIT: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ShapMethod {
    Exact,
    Sampled {
        n_samples: usize,
        seed: u64,
        /// `prediction - base - sum(phi)` before redistribution.
        residual: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub feature_id: String,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionSet {
    pub row_key: String,
    pub target_label: Label,
    pub base_value: f64,
    pub prediction: f64,
    pub method: ShapMethod,
    pub background_rows: usize,
    pub contributions: Vec<Contribution>,
}

impl ContributionSet {
    pub fn phi(&self, feature_id: &str) -> Option<f64> {
        self.contributions
            .iter()
            .find(|c| c.feature_id == feature_id)
            .map(|c| c.phi)
    }

    pub fn phi_sum(&self) -> f64 {
        self.contributions.iter().map(|c| c.phi).sum()
    }

    /// `|base + sum(phi) - prediction|`.
    pub fn efficiency_gap(&self) -> f64 {
        (self.base_value + self.phi_sum() - self.prediction).abs()
    }
}

/// Raw attribution for an arbitrary value function.
#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    pub base_value: f64,
    pub prediction: f64,
    pub phi: Vec<f64>,
    pub residual: f64,
}

fn check_background(x: &[Option<f64>], background: &[Vec<Option<f64>>]) -> Result<()> {
    if background.is_empty() {
        return Err(Error::InvalidInput("background is empty".into()));
    }
    if let Some(b) = background.iter().find(|b| b.len() != x.len()) {
        return Err(Error::InvalidInput(format!(
            "background row has {} features, instance has {}",
            b.len(),
            x.len()
        )));
    }
    Ok(())
}

/// Shapley kernel weights `s! (m-s-1)! / m!` for `s = 0..m`.
fn shapley_weights(m: usize) -> Vec<f64> {
    (0..m)
        .map(|s| {
            // 1 / (m * C(m-1, s)); binomials are exact in f64 for small m
            let mut c = 1.0;
            for j in 0..s {
                c = c * (m - 1 - j) as f64 / (j + 1) as f64;
            }
            1.0 / (m as f64 * c)
        })
        .collect()
}

/// Exact enumeration over all coalitions of `f`'s inputs.
pub fn exact_attribution<F>(
    f: &F,
    x: &[Option<f64>],
    background: &[Vec<Option<f64>>],
    exact_limit: usize,
) -> Result<Attribution>
where
    F: Fn(&[Option<f64>]) -> f64 + Sync,
{
    check_background(x, background)?;
    let m = x.len();
    if m > exact_limit {
        return Err(Error::ExactLimit {
            features: m,
            limit: exact_limit,
        });
    }
    let n_masks = 1usize << m;
    let values: Vec<f64> = (0..n_masks)
        .into_par_iter()
        .map_init(
            || vec![None; m],
            |buf, mask| {
                let mut total = 0.0;
                for b in background {
                    for i in 0..m {
                        buf[i] = if mask >> i & 1 == 1 { x[i] } else { b[i] };
                    }
                    total += f(buf);
                }
                total / background.len() as f64
            },
        )
        .collect();
    Ok(Attribution {
        base_value: values[0],
        prediction: f(x),
        phi: phi_from_values(&values, m),
        residual: 0.0,
    })
}

/// Combines the coalition values `v(mask)` into Shapley values.
fn phi_from_values(values: &[f64], m: usize) -> Vec<f64> {
    let weights = shapley_weights(m);
    let mut phi = vec![0.0; m];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1usize << i;
        let mut acc = 0.0;
        for mask in 0..values.len() {
            if mask & bit == 0 {
                let s = mask.count_ones() as usize;
                acc += weights[s] * (values[mask | bit] - values[mask]);
            }
        }
        *p = acc;
    }
    phi
}

/// Coalition values of `sigmoid(bias + sum of terms)` for a model whose
/// logit is additive over features. Each background row fills a subset-sum
/// table, so a coalition costs one addition and one sigmoid.
fn additive_values(bias: f64, x_terms: &[f64], background_terms: &[Vec<f64>]) -> Vec<f64> {
    let m = x_terms.len();
    let n_masks = 1usize << m;
    let total = background_terms
        .par_iter()
        .fold(
            || (vec![0.0; n_masks], vec![0.0; n_masks]),
            |(mut acc, mut sums), b| {
                sums[0] = bias + b.iter().sum::<f64>();
                for mask in 1..n_masks {
                    let i = mask.trailing_zeros() as usize;
                    sums[mask] = sums[mask & (mask - 1)] + (x_terms[i] - b[i]);
                }
                for (a, s) in acc.iter_mut().zip(&sums) {
                    *a += sigmoid(*s);
                }
                (acc, sums)
            },
        )
        .map(|(acc, _)| acc)
        .reduce(
            || vec![0.0; n_masks],
            |mut a, b| {
                for (p, q) in a.iter_mut().zip(b) {
                    *p += q;
                }
                a
            },
        );
    total.into_iter().map(|v| v / background_terms.len() as f64).collect()
}

/// Permutation-sampling estimate with residual redistribution.
pub fn sampled_attribution<F>(
    f: &F,
    x: &[Option<f64>],
    background: &[Vec<Option<f64>>],
    n_samples: usize,
    seed: u64,
) -> Result<Attribution>
where
    F: Fn(&[Option<f64>]) -> f64,
{
    check_background(x, background)?;
    if n_samples == 0 {
        return Err(Error::InvalidInput("n_samples must be at least 1".into()));
    }
    let m = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..m).collect();
    let mut phi = vec![0.0; m];
    let mut z = vec![None; m];
    for _ in 0..n_samples {
        order.shuffle(&mut rng);
        let b = &background[rng.random_range(0..background.len())];
        z.copy_from_slice(b);
        let mut prev = f(&z);
        for &i in &order {
            z[i] = x[i];
            let cur = f(&z);
            phi[i] += cur - prev;
            prev = cur;
        }
    }
    for p in &mut phi {
        *p /= n_samples as f64;
    }
    let base_value = background.iter().map(|b| f(b)).sum::<f64>() / background.len() as f64;
    let prediction = f(x);
    let residual = prediction - base_value - phi.iter().sum::<f64>();
    redistribute(&mut phi, residual);
    Ok(Attribution {
        base_value,
        prediction,
        phi,
        residual,
    })
}

/// Adds `residual` to `phi` in proportion to `|phi|` (evenly if all are zero).
fn redistribute(phi: &mut [f64], residual: f64) {
    if residual == 0.0 || phi.is_empty() {
        return;
    }
    let total: f64 = phi.iter().map(|p| p.abs()).sum();
    if total > 0.0 {
        for p in phi.iter_mut() {
            *p += residual * p.abs() / total;
        }
    } else {
        let share = residual / phi.len() as f64;
        for p in phi.iter_mut() {
            *p += share;
        }
    }
}

fn contribution_set(model: &Model, row_key: &str, a: Attribution, method: ShapMethod, n_bg: usize) -> ContributionSet {
    ContributionSet {
        row_key: row_key.to_string(),
        target_label: model.target_label,
        base_value: a.base_value,
        prediction: a.prediction,
        method,
        background_rows: n_bg,
        contributions: model
            .feature_ids
            .iter()
            .zip(a.phi)
            .map(|(f, phi)| Contribution {
                feature_id: f.clone(),
                phi,
            })
            .collect(),
    }
}

fn check_model_input(model: &Model, x: &[Option<f64>]) -> Result<()> {
    if x.len() != model.feature_ids.len() {
        return Err(Error::InvalidInput(format!(
            "feature vector has {} entries, model expects {}",
            x.len(),
            model.feature_ids.len()
        )));
    }
    Ok(())
}

/// Exact contributions to the model's probability output.
pub fn shap_exact(
    model: &Model,
    row_key: &str,
    x: &[Option<f64>],
    background: &[Vec<Option<f64>>],
    exact_limit: usize,
) -> Result<ContributionSet> {
    check_model_input(model, x)?;
    check_background(x, background)?;
    let m = x.len();
    if m > exact_limit {
        return Err(Error::ExactLimit {
            features: m,
            limit: exact_limit,
        });
    }
    let terms: Vec<Vec<f64>> = background.iter().map(|b| model.feature_terms(b)).collect();
    let values = additive_values(model.bias, &model.feature_terms(x), &terms);
    let a = Attribution {
        base_value: values[0],
        prediction: model.predict_unchecked(x),
        phi: phi_from_values(&values, m),
        residual: 0.0,
    };
    Ok(contribution_set(model, row_key, a, ShapMethod::Exact, background.len()))
}

/// Sampled contributions to the model's probability output.
pub fn shap_sampled(
    model: &Model,
    row_key: &str,
    x: &[Option<f64>],
    background: &[Vec<Option<f64>>],
    n_samples: usize,
    seed: u64,
) -> Result<ContributionSet> {
    check_model_input(model, x)?;
    let f = |v: &[Option<f64>]| model.predict_unchecked(v);
    let a = sampled_attribution(&f, x, background, n_samples, seed)?;
    let method = ShapMethod::Sampled {
        n_samples,
        seed,
        residual: a.residual,
    };
    Ok(contribution_set(model, row_key, a, method, background.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplainConfig {
    pub exact_limit: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            exact_limit: DEFAULT_EXACT_LIMIT,
            n_samples: 2000,
            seed: 42,
        }
    }
}

/// Exact when the model is small enough, sampled otherwise.
pub fn explain(
    model: &Model,
    row_key: &str,
    x: &[Option<f64>],
    background: &[Vec<Option<f64>>],
    config: &ExplainConfig,
) -> Result<ContributionSet> {
    if model.feature_ids.len() <= config.exact_limit {
        shap_exact(model, row_key, x, background, config.exact_limit)
    } else {
        shap_sampled(model, row_key, x, background, config.n_samples, config.seed)
    }
}

/// Feature hierarchy node; leaves carry a feature id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyNode {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_id: Option<String>,
    pub group_contribution: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<HierarchyNode>,
}

impl HierarchyNode {
    fn group(label: &str) -> Self {
        HierarchyNode {
            label: label.to_string(),
            feature_id: None,
            group_contribution: 0.0,
            children: vec![],
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.feature_id.is_some()
    }

    /// Leaf nodes in depth-first order.
    pub fn leaves(&self) -> Vec<&HierarchyNode> {
        let mut out = Vec::new();
        fn walk<'a>(n: &'a HierarchyNode, out: &mut Vec<&'a HierarchyNode>) {
            if n.is_leaf() {
                out.push(n);
            }
            for c in &n.children {
                walk(c, out);
            }
        }
        walk(self, &mut out);
        out
    }

    /// Drops leaves for which `keep` is false, then empty groups.
    pub fn retain_leaves(&mut self, keep: &dyn Fn(&str) -> bool) {
        self.children.retain_mut(|c| {
            if let Some(f) = &c.feature_id {
                keep(f)
            } else {
                c.retain_leaves(keep);
                !c.children.is_empty()
            }
        });
    }

    /// Recursively orders children.
    pub fn sort(&mut self, key: SortKey) {
        sort_nodes(&mut self.children, key);
        for c in &mut self.children {
            c.sort(key);
        }
    }
}

/// Builds the `[phase, group, leaf]` hierarchy from descriptors, keeping the
/// first-seen order of labels. All contributions start at zero.
pub fn build_hierarchy(descriptors: &[FeatureDescriptor]) -> HierarchyNode {
    let mut root = HierarchyNode::group("all");
    for d in descriptors {
        let mut node = &mut root;
        let depth = d.hierarchy_path.len();
        for (level, label) in d.hierarchy_path.iter().enumerate() {
            if level + 1 == depth {
                node.children.push(HierarchyNode {
                    label: label.clone(),
                    feature_id: Some(d.feature_id.clone()),
                    group_contribution: 0.0,
                    children: vec![],
                });
            } else {
                let pos = match node.children.iter().position(|c| !c.is_leaf() && c.label == *label) {
                    Some(p) => p,
                    None => {
                        node.children.push(HierarchyNode::group(label));
                        node.children.len() - 1
                    }
                };
                node = &mut node.children[pos];
            }
        }
    }
    root
}

/// Fills leaf contributions and sums them up through every group.
pub fn group_rollup(hierarchy: &HierarchyNode, contributions: &[Contribution]) -> Result<HierarchyNode> {
    let mut phi: HashMap<&str, f64> = HashMap::with_capacity(contributions.len());
    for c in contributions {
        if phi.insert(c.feature_id.as_str(), c.phi).is_some() {
            return Err(Error::Hierarchy(format!("duplicate contribution for {}", c.feature_id)));
        }
    }
    let mut seen = 0usize;
    fn fill(node: &HierarchyNode, phi: &HashMap<&str, f64>, seen: &mut usize) -> Result<HierarchyNode> {
        if let Some(f) = &node.feature_id {
            let v = *phi
                .get(f.as_str())
                .ok_or_else(|| Error::Hierarchy(format!("leaf {f} has no contribution")))?;
            *seen += 1;
            return Ok(HierarchyNode {
                group_contribution: v,
                ..node.clone()
            });
        }
        let children = node
            .children
            .iter()
            .map(|c| fill(c, phi, seen))
            .collect::<Result<Vec<_>>>()?;
        Ok(HierarchyNode {
            label: node.label.clone(),
            feature_id: None,
            group_contribution: children.iter().map(|c| c.group_contribution).sum(),
            children,
        })
    }
    let out = fill(hierarchy, &phi, &mut seen)?;
    if seen != phi.len() {
        let leaves: Vec<&str> = out.leaves().iter().filter_map(|l| l.feature_id.as_deref()).collect();
        let orphan = contributions
            .iter()
            .find(|c| !leaves.contains(&c.feature_id.as_str()))
            .map(|c| c.feature_id.clone())
            .unwrap_or_default();
        return Err(Error::Hierarchy(format!("orphan feature {orphan}")));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortKey {
    /// Signed contribution, largest first.
    Contribution,
    /// Absolute contribution, largest first.
    Magnitude,
    /// Label, alphabetical.
    Name,
}

impl std::str::FromStr for SortKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contribution" => Ok(SortKey::Contribution),
            "magnitude" | "abs" => Ok(SortKey::Magnitude),
            "name" => Ok(SortKey::Name),
            other => Err(Error::InvalidInput(format!("unknown sort key {other:?}"))),
        }
    }
}

fn sort_nodes(nodes: &mut [HierarchyNode], key: SortKey) {
    match key {
        SortKey::Contribution => nodes.sort_by(|a, b| b.group_contribution.total_cmp(&a.group_contribution)),
        SortKey::Magnitude => nodes.sort_by(|a, b| b.group_contribution.abs().total_cmp(&a.group_contribution.abs())),
        SortKey::Name => nodes.sort_by(|a, b| a.label.cmp(&b.label)),
    }
}

/// Stable sort of one displayed level, then the `|phi|` floor, then top-k.
pub fn sort_filter(
    nodes: &[HierarchyNode],
    key: SortKey,
    min_abs: Option<f64>,
    top_k: Option<usize>,
) -> Vec<HierarchyNode> {
    let mut out: Vec<HierarchyNode> = nodes
        .iter()
        .filter(|n| min_abs.is_none_or(|t| n.group_contribution.abs() >= t))
        .cloned()
        .collect();
    sort_nodes(&mut out, key);
    if let Some(k) = top_k {
        out.truncate(k);
    }
    out
}
