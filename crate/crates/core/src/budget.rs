//! Budget planning: turning importance profiles into exact per-layer and
//! per-head retention budgets.
//!
//! The total prompt budget `k_p` is expressed as a per-head average summed
//! over layers, so a layer with budget `k_l` retains `num_heads * k_l` prompt
//! KV pairs. Every allocator here conserves budget exactly: the flooring
//! shortfall is handed back one unit at a time to the highest-importance
//! (or highest-preference) unit, ties going to the lower index.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Simplified analogues of published allocation baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselinePolicy {
    /// Equal budget for every layer and head.
    Uniform,
    /// Uniform budgets; selection uses an observation window of prompt
    /// queries instead of mask queries.
    Snap,
    /// Linearly decreasing layer budgets with depth.
    Pyramid,
    /// Three layer groups by importance; the least important group gets a
    /// 40% smaller per-layer share.
    Squeeze,
    /// Uniform layers; heads weighted by preference mass with a 20% floor.
    Ada,
}

impl fmt::Display for BaselinePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            BaselinePolicy::Uniform => "uniform",
            BaselinePolicy::Snap => "snap",
            BaselinePolicy::Pyramid => "pyramid",
            BaselinePolicy::Squeeze => "squeeze",
            BaselinePolicy::Ada => "ada",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for BaselinePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(BaselinePolicy::Uniform),
            "snap" => Ok(BaselinePolicy::Snap),
            "pyramid" => Ok(BaselinePolicy::Pyramid),
            "squeeze" => Ok(BaselinePolicy::Squeeze),
            "ada" => Ok(BaselinePolicy::Ada),
            other => Err(Error::config(format!("unknown policy {other:?}"))),
        }
    }
}

/// Parameters of the hybrid layer/head allocator.
#[derive(Debug, Clone)]
pub struct BudgetConfig {
    /// Total per-head prompt budget summed over layers.
    pub total_budget: usize,
    /// Head base rate: share of each layer budget handed out uniformly.
    pub alpha: f64,
    /// Layer base rate: share of the total budget handed out uniformly.
    pub beta: f64,
    /// Boundary layer group; `None` means first and last layer.
    pub boundary_layers: Option<Vec<usize>>,
    /// When set, plan with a baseline allocator instead of the hybrid one.
    pub baseline: Option<BaselinePolicy>,
}

impl BudgetConfig {
    /// Hybrid allocator with the stock base rates (alpha 0.1, beta 0.4).
    pub fn hybrid(total_budget: usize) -> Self {
        BudgetConfig {
            total_budget,
            alpha: 0.1,
            beta: 0.4,
            boundary_layers: None,
            baseline: None,
        }
    }

    /// Baseline allocator with the same total budget.
    pub fn baseline(total_budget: usize, policy: BaselinePolicy) -> Self {
        BudgetConfig { baseline: Some(policy), ..BudgetConfig::hybrid(total_budget) }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config(format!("beta {} outside [0, 1]", self.beta)));
        }
        Ok(())
    }
}

/// First and last layer indices (deduplicated for single-layer models).
pub fn default_boundary(num_layers: usize) -> Vec<usize> {
    if num_layers <= 1 {
        vec![0]
    } else {
        vec![0, num_layers - 1]
    }
}

/// Averaged per-layer importance and per-head prompt preference.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationProfile {
    /// One importance value per layer, in `[0, 2]`.
    pub layer_importance: Vec<f64>,
    /// Per layer, one preference value per head, in `[0, 1]`.
    pub head_preference: Vec<Vec<f64>>,
    /// Number of samples averaged.
    pub sample_count: usize,
    /// Where the profile came from (seed list, trace paths, file path).
    pub source: String,
}

impl CalibrationProfile {
    pub fn num_layers(&self) -> usize {
        self.layer_importance.len()
    }

    pub fn num_heads(&self) -> usize {
        self.head_preference.first().map_or(0, Vec::len)
    }

    fn validate(&self) -> Result<()> {
        let d = self.num_layers();
        if d == 0 || self.head_preference.len() != d {
            return Err(Error::config("profile layer counts are inconsistent"));
        }
        let h = self.num_heads();
        if h == 0 || self.head_preference.iter().any(|row| row.len() != h) {
            return Err(Error::config("profile head counts are inconsistent"));
        }
        let ok_imp = self.layer_importance.iter().all(|x| x.is_finite() && (0.0..=2.0).contains(x));
        let ok_pref = self
            .head_preference
            .iter()
            .flatten()
            .all(|x| x.is_finite() && (0.0..=1.0).contains(x));
        if !ok_imp || !ok_pref {
            return Err(Error::config("profile values outside their score bounds"));
        }
        Ok(())
    }
}

/// Scores measured from a single calibration sample.
#[derive(Debug, Clone)]
pub struct SampleScores {
    pub layer_importance: Vec<f64>,
    pub head_preference: Vec<Vec<f64>>,
}

/// Average per-sample scores into a profile.
pub fn calibrate(samples: &[SampleScores], source: impl Into<String>) -> Result<CalibrationProfile> {
    let first = samples.first().ok_or_else(|| Error::config("empty calibration set"))?;
    let d = first.layer_importance.len();
    let h = first.head_preference.first().map_or(0, Vec::len);
    let n = samples.len() as f64;

    let mut layer_importance = vec![0.0; d];
    let mut head_preference = vec![vec![0.0; h]; d];
    for sample in samples {
        if sample.layer_importance.len() != d
            || sample.head_preference.len() != d
            || sample.head_preference.iter().any(|row| row.len() != h)
        {
            return Err(Error::config("calibration samples disagree on model dimensions"));
        }
        for (acc, x) in layer_importance.iter_mut().zip(&sample.layer_importance) {
            *acc += x;
        }
        for (acc_row, row) in head_preference.iter_mut().zip(&sample.head_preference) {
            for (acc, x) in acc_row.iter_mut().zip(row) {
                *acc += x;
            }
        }
    }
    for x in &mut layer_importance {
        *x /= n;
    }
    for row in &mut head_preference {
        for x in row {
            *x /= n;
        }
    }
    let profile = CalibrationProfile {
        layer_importance,
        head_preference,
        sample_count: samples.len(),
        source: source.into(),
    };
    profile.validate()?;
    Ok(profile)
}

/// A unit that received one remainder token during flooring repair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemainderUnit {
    Layer(usize),
    Head { layer: usize, head: usize },
}

/// Resolved budgets with exact conservation and the remainder audit trail.
#[derive(Debug, Clone)]
pub struct BudgetPlan {
    /// Per-layer per-head average budget `k_l`; sums to the total budget.
    pub layer_budgets: Vec<usize>,
    /// Per-layer per-head budgets `k_{l,h}`; each row sums to
    /// `num_heads * k_l` exactly.
    pub head_budgets: Vec<Vec<usize>>,
    /// The total budget the plan conserves.
    pub total_budget: usize,
    /// Every +1 adjustment made to repair flooring shortfalls.
    pub remainder_audit: Vec<RemainderUnit>,
}

impl BudgetPlan {
    /// Total retained prompt KV pairs across all layers and heads.
    pub fn total_retained_pairs(&self) -> usize {
        self.head_budgets.iter().flatten().sum()
    }
}

/// Distribute `shortfall` units over `values`-ranked units (descending value,
/// ties to the lower index), cycling if the shortfall exceeds the unit count.
fn distribute_shortfall(
    budgets: &mut [usize],
    values: &[f64],
    mut shortfall: usize,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..budgets.len()).collect();
    order.sort_by(|&a, &b| {
        values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut touched = Vec::with_capacity(shortfall);
    while shortfall > 0 {
        for &idx in &order {
            if shortfall == 0 {
                break;
            }
            budgets[idx] += 1;
            touched.push(idx);
            shortfall -= 1;
        }
    }
    touched
}

/// Trim `excess` units in the reverse of the remainder order. Only reachable
/// through floating-point edge cases in the group split.
fn trim_excess(budgets: &mut [usize], values: &[f64], mut excess: usize) {
    let mut order: Vec<usize> = (0..budgets.len()).collect();
    order.sort_by(|&a, &b| {
        values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a))
    });
    while excess > 0 {
        for &idx in &order {
            if excess == 0 {
                break;
            }
            if budgets[idx] > 0 {
                budgets[idx] -= 1;
                excess -= 1;
            }
        }
    }
}

/// Hybrid per-layer allocation: a uniform base share plus an importance-
/// weighted split between the boundary and middle layer groups.
///
/// With `beta == 1` the whole budget is the uniform base, so the profile is
/// ignored and the flooring remainder goes to the lowest layer indices.
pub fn allocate_layers(
    total_budget: usize,
    beta: f64,
    layer_importance: &[f64],
    boundary: &[usize],
) -> Result<(Vec<usize>, Vec<RemainderUnit>)> {
    let d = layer_importance.len();
    if d == 0 {
        return Err(Error::config("allocate_layers: no layers"));
    }
    if layer_importance.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::config("allocate_layers: importance must be finite and nonnegative"));
    }
    if boundary.is_empty() {
        return Err(Error::config("allocate_layers: boundary set is empty"));
    }
    if boundary.iter().any(|&b| b >= d) {
        return Err(Error::config("allocate_layers: boundary layer index out of range"));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::config(format!("beta {beta} outside [0, 1]")));
    }

    let mut is_boundary = vec![false; d];
    for &b in boundary {
        is_boundary[b] = true;
    }
    let n_bound = is_boundary.iter().filter(|x| **x).count();
    let n_mid = d - n_bound;

    // beta == 1 leaves no importance-driven budget at all; every layer holds
    // an equal claim, so remainder ties resolve purely by index.
    if beta == 1.0 {
        let base = total_budget / d;
        let mut budgets = vec![base; d];
        let touched = distribute_shortfall(&mut budgets, &vec![0.0; d], total_budget - base * d);
        let audit = touched.into_iter().map(RemainderUnit::Layer).collect();
        return Ok((budgets, audit));
    }

    let base = ((beta * total_budget as f64) / d as f64).floor() as usize;
    let importance_budget = total_budget - d * base;

    let i_bound: f64 =
        (0..d).filter(|&l| is_boundary[l]).map(|l| layer_importance[l]).sum();
    let i_mid: f64 = (0..d).filter(|&l| !is_boundary[l]).map(|l| layer_importance[l]).sum();

    let mut budgets = vec![base; d];
    if i_bound + i_mid == 0.0 {
        log::warn!("allocate_layers: zero total importance, importance budget split uniformly");
        let share = importance_budget / d;
        for b in &mut budgets {
            *b += share;
        }
    } else {
        let group_bound = importance_budget as f64 * i_bound / (i_bound + i_mid);
        let group_mid = importance_budget as f64 - group_bound;
        let add_bound =
            if n_bound > 0 { (group_bound / n_bound as f64).floor() as usize } else { 0 };
        let add_mid = if n_mid > 0 { (group_mid / n_mid as f64).floor() as usize } else { 0 };
        for (l, b) in budgets.iter_mut().enumerate() {
            *b += if is_boundary[l] { add_bound } else { add_mid };
        }
    }

    let assigned: usize = budgets.iter().sum();
    if assigned > total_budget {
        trim_excess(&mut budgets, layer_importance, assigned - total_budget);
    }
    let assigned: usize = budgets.iter().sum();
    let touched = distribute_shortfall(&mut budgets, layer_importance, total_budget - assigned);
    let audit = touched.into_iter().map(RemainderUnit::Layer).collect();
    Ok((budgets, audit))
}

/// Per-head allocation: a uniform floor plus a share proportional to the
/// normalized preference, conserving `num_heads * layer_budget` exactly.
pub fn allocate_heads(
    layer_budget: usize,
    alpha: f64,
    preferences: &[f64],
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_h = preferences.len();
    if n_h == 0 {
        return Err(Error::config("allocate_heads: no heads"));
    }
    if preferences.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::config("allocate_heads: preferences must be finite and nonnegative"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha {alpha} outside [0, 1]")));
    }

    if alpha == 1.0 {
        return Ok((vec![layer_budget; n_h], Vec::new()));
    }

    let total: f64 = preferences.iter().sum();
    let normalized: Vec<f64> = if total == 0.0 {
        log::warn!("allocate_heads: zero preference mass, using uniform normalization");
        vec![1.0 / n_h as f64; n_h]
    } else {
        preferences.iter().map(|p| p / total).collect()
    };

    let target = n_h * layer_budget;
    let mut budgets: Vec<usize> = normalized
        .iter()
        .map(|p_hat| {
            (alpha * layer_budget as f64 + (1.0 - alpha) * target as f64 * p_hat).floor() as usize
        })
        .collect();

    let assigned: usize = budgets.iter().sum();
    if assigned > target {
        trim_excess(&mut budgets, &normalized, assigned - target);
    }
    let assigned: usize = budgets.iter().sum();
    let touched = distribute_shortfall(&mut budgets, &normalized, target - assigned);
    Ok((budgets, touched))
}

/// Compose the layer and head allocators (or a baseline) into a full plan.
pub fn plan_budget(config: &BudgetConfig, profile: &CalibrationProfile) -> Result<BudgetPlan> {
    config.validate()?;
    profile.validate()?;
    if let Some(policy) = config.baseline {
        return baseline_allocate(
            policy,
            config.total_budget,
            profile.num_layers(),
            profile.num_heads(),
            Some(profile),
        );
    }

    let d = profile.num_layers();
    let boundary = match &config.boundary_layers {
        Some(b) => b.clone(),
        None => default_boundary(d),
    };
    let (layer_budgets, mut audit) =
        allocate_layers(config.total_budget, config.beta, &profile.layer_importance, &boundary)?;
    let mut head_budgets = Vec::with_capacity(d);
    for (layer, &k_l) in layer_budgets.iter().enumerate() {
        let (heads, touched) =
            allocate_heads(k_l, config.alpha, &profile.head_preference[layer])?;
        audit.extend(touched.into_iter().map(|head| RemainderUnit::Head { layer, head }));
        head_budgets.push(heads);
    }
    Ok(BudgetPlan {
        layer_budgets,
        head_budgets,
        total_budget: config.total_budget,
        remainder_audit: audit,
    })
}

/// Allocate per-layer budgets from real-valued shares, conserving exactly.
fn layers_from_shares(total: usize, shares: &[f64]) -> (Vec<usize>, Vec<RemainderUnit>) {
    let sum: f64 = shares.iter().sum();
    let mut budgets: Vec<usize> = if sum == 0.0 {
        vec![0; shares.len()]
    } else {
        shares.iter().map(|s| (total as f64 * s / sum).floor() as usize).collect()
    };
    let assigned: usize = budgets.iter().sum();
    if assigned > total {
        trim_excess(&mut budgets, shares, assigned - total);
    }
    let assigned: usize = budgets.iter().sum();
    let touched = distribute_shortfall(&mut budgets, shares, total - assigned);
    (budgets, touched.into_iter().map(RemainderUnit::Layer).collect())
}

/// Simplified baseline allocators. `profile` is required by the squeeze and
/// ada policies; the others ignore it.
pub fn baseline_allocate(
    policy: BaselinePolicy,
    total_budget: usize,
    num_layers: usize,
    num_heads: usize,
    profile: Option<&CalibrationProfile>,
) -> Result<BudgetPlan> {
    if num_layers == 0 || num_heads == 0 {
        return Err(Error::config("baseline_allocate: zero layers or heads"));
    }
    if let Some(p) = profile {
        if p.num_layers() != num_layers || p.num_heads() != num_heads {
            return Err(Error::config("baseline_allocate: profile dims do not match"));
        }
    }
    let need_profile = || {
        profile.ok_or_else(|| Error::config(format!("policy {policy} requires a profile")))
    };

    let (layer_budgets, mut audit) = match policy {
        BaselinePolicy::Uniform | BaselinePolicy::Snap | BaselinePolicy::Ada => {
            layers_from_shares(total_budget, &vec![1.0; num_layers])
        }
        BaselinePolicy::Pyramid => {
            // Arithmetic progression: weight D - l gives a strictly
            // decreasing ramp from the first layer to the last.
            let shares: Vec<f64> = (0..num_layers).map(|l| (num_layers - l) as f64).collect();
            layers_from_shares(total_budget, &shares)
        }
        BaselinePolicy::Squeeze => {
            let p = need_profile()?;
            let mut order: Vec<usize> = (0..num_layers).collect();
            order.sort_by(|&a, &b| {
                p.layer_importance[a]
                    .partial_cmp(&p.layer_importance[b])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            // Least-important third gets a 40% smaller share; the freed
            // budget is spread evenly over the remaining layers. Shares are
            // scaled to integers so the floors stay float-exact:
            // 0.6 -> 6*(D-low), 1 + 0.4*low/(D-low) -> 10*(D-low) + 4*low.
            let low_count = num_layers / 3;
            let mut shares = vec![1.0; num_layers];
            if low_count > 0 && low_count < num_layers {
                let rest = (num_layers - low_count) as f64;
                for (rank, &layer) in order.iter().enumerate() {
                    shares[layer] = if rank < low_count {
                        6.0 * rest
                    } else {
                        10.0 * rest + 4.0 * low_count as f64
                    };
                }
            }
            layers_from_shares(total_budget, &shares)
        }
    };

    let mut head_budgets = Vec::with_capacity(num_layers);
    match policy {
        BaselinePolicy::Ada => {
            let p = need_profile()?;
            for (layer, &k_l) in layer_budgets.iter().enumerate() {
                let (heads, touched) = allocate_heads(k_l, 0.2, &p.head_preference[layer])?;
                audit.extend(touched.into_iter().map(|head| RemainderUnit::Head { layer, head }));
                head_budgets.push(heads);
            }
        }
        _ => {
            for &k_l in &layer_budgets {
                head_budgets.push(vec![k_l; num_heads]);
            }
        }
    }

    Ok(BudgetPlan { layer_budgets, head_budgets, total_budget, remainder_audit: audit })
}

// ── Profile persistence ─────────────────────────────────────────────────────

fn format_score(x: f64) -> String {
    format!("{x:.8e}")
}

/// Write a profile in the line-oriented text format.
pub fn write_profile<W: Write>(profile: &CalibrationProfile, mut w: W) -> Result<()> {
    profile.validate()?;
    let d = profile.num_layers();
    let h = profile.num_heads();
    writeln!(w, "maskkv-profile v1 D={d} H={h} samples={}", profile.sample_count)?;
    for (idx, imp) in profile.layer_importance.iter().enumerate() {
        writeln!(w, "layer {idx} importance {}", format_score(*imp))?;
    }
    for (idx, prefs) in profile.head_preference.iter().enumerate() {
        write!(w, "heads {idx}")?;
        for p in prefs {
            write!(w, " {}", format_score(*p))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Save a profile to a file.
pub fn save_profile(profile: &CalibrationProfile, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_profile(profile, std::io::BufWriter::new(file))
}

/// Parse a profile from the text format, reporting line-located errors.
pub fn read_profile<R: BufRead>(reader: R, source: impl Into<String>) -> Result<CalibrationProfile> {
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse_at_line(1, "empty profile file"))?;
    let header = header?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 || fields[0] != "maskkv-profile" || fields[1] != "v1" {
        return Err(Error::parse_at_line(1, format!("bad header {header:?}")));
    }
    let dim = |field: &str, key: &str| -> Result<usize> {
        field
            .strip_prefix(&format!("{key}="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::parse_at_line(1, format!("bad header field {field:?}")))
    };
    let d = dim(fields[2], "D")?;
    let h = dim(fields[3], "H")?;
    let samples = dim(fields[4], "samples")?;
    if d == 0 || h == 0 {
        return Err(Error::parse_at_line(1, "zero layer or head count"));
    }

    let parse_value = |line_no: usize, token: &str| -> Result<f64> {
        token
            .parse::<f64>()
            .map_err(|_| Error::parse_at_line(line_no, format!("bad decimal {token:?}")))
    };

    let mut layer_importance = Vec::with_capacity(d);
    let mut head_preference = Vec::with_capacity(d);
    for expect_idx in 0..d {
        let line_no = 2 + expect_idx;
        let (_, line) = lines
            .next()
            .ok_or_else(|| Error::parse_at_line(line_no, "missing layer line"))?;
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "layer" || fields[2] != "importance" {
            return Err(Error::parse_at_line(line_no, format!("bad layer line {line:?}")));
        }
        if fields[1] != expect_idx.to_string() {
            return Err(Error::parse_at_line(line_no, format!("expected layer {expect_idx}")));
        }
        layer_importance.push(parse_value(line_no, fields[3])?);
    }
    for expect_idx in 0..d {
        let line_no = 2 + d + expect_idx;
        let (_, line) = lines
            .next()
            .ok_or_else(|| Error::parse_at_line(line_no, "missing heads line"))?;
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 + h || fields[0] != "heads" {
            return Err(Error::parse_at_line(line_no, format!("bad heads line {line:?}")));
        }
        if fields[1] != expect_idx.to_string() {
            return Err(Error::parse_at_line(line_no, format!("expected heads {expect_idx}")));
        }
        let mut prefs = Vec::with_capacity(h);
        for token in &fields[2..] {
            prefs.push(parse_value(line_no, token)?);
        }
        head_preference.push(prefs);
    }
    if let Some((idx, line)) = lines.next() {
        let line = line?;
        if !line.trim().is_empty() {
            return Err(Error::parse_at_line(idx + 1, format!("unexpected trailing line {line:?}")));
        }
    }

    let profile = CalibrationProfile {
        layer_importance,
        head_preference,
        sample_count: samples,
        source: source.into(),
    };
    profile.validate().map_err(|e| Error::parse_at_line(1, e.to_string()))?;
    Ok(profile)
}

/// Load a profile from a file.
pub fn load_profile(path: impl AsRef<Path>) -> Result<CalibrationProfile> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    read_profile(std::io::BufReader::new(file), path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_profile(d: usize, h: usize) -> CalibrationProfile {
        CalibrationProfile {
            layer_importance: vec![0.5; d],
            head_preference: vec![vec![0.5; h]; d],
            sample_count: 1,
            source: "test".into(),
        }
    }

    #[test]
    fn pure_base_rate_is_uniform() {
        let (k, audit) = allocate_layers(64, 1.0, &[0.9, 0.1, 0.1, 0.9], &[0, 3]).unwrap();
        assert_eq!(k, vec![16, 16, 16, 16]);
        assert!(audit.is_empty());
    }

    #[test]
    fn pure_base_rate_remainder_goes_to_low_indices() {
        let (k, _) = allocate_layers(66, 1.0, &[0.1, 0.9, 0.9, 0.1], &[0, 3]).unwrap();
        assert_eq!(k, vec![17, 17, 16, 16]);
    }

    #[test]
    fn degenerate_importance_concentrates_on_boundary() {
        let (k, _) = allocate_layers(64, 0.0, &[0.5, 0.0, 0.0, 0.5], &[0, 3]).unwrap();
        assert_eq!(k, vec![32, 0, 0, 32]);
    }

    #[test]
    fn hand_worked_hybrid_allocation() {
        // base 10 each, importance budget 60 split 45/15, floors give
        // (32, 17, 17, 32), two remainder units land on the boundary layers.
        let (k, audit) = allocate_layers(100, 0.4, &[0.3, 0.1, 0.1, 0.3], &[0, 3]).unwrap();
        assert_eq!(k, vec![33, 17, 17, 33]);
        assert_eq!(audit, vec![RemainderUnit::Layer(0), RemainderUnit::Layer(3)]);
    }

    #[test]
    fn zero_importance_falls_back_to_uniform() {
        let (k, _) = allocate_layers(40, 0.0, &[0.0; 4], &[0, 3]).unwrap();
        assert_eq!(k, vec![10, 10, 10, 10]);
    }

    #[test]
    fn layer_conservation_over_seeds() {
        for total in [0usize, 1, 7, 63, 100, 4096] {
            for beta in [0.0, 0.3, 0.4, 0.77, 1.0] {
                let imp = [1.3, 0.2, 0.01, 0.9, 0.9];
                let (k, _) = allocate_layers(total, beta, &imp, &[0, 4]).unwrap();
                assert_eq!(k.iter().sum::<usize>(), total, "beta={beta} total={total}");
            }
        }
    }

    #[test]
    fn uniform_head_base_rate() {
        let (k, audit) = allocate_heads(8, 1.0, &[0.9, 0.0, 0.0, 0.1]).unwrap();
        assert_eq!(k, vec![8, 8, 8, 8]);
        assert!(audit.is_empty());
    }

    #[test]
    fn fully_concentrated_heads() {
        let (k, _) = allocate_heads(8, 0.0, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(k, vec![32, 0, 0, 0]);
    }

    #[test]
    fn hand_worked_head_allocation() {
        let (k, _) = allocate_heads(10, 0.5, &[0.7, 0.3]).unwrap();
        assert_eq!(k, vec![12, 8]);
        assert_eq!(k.iter().sum::<usize>(), 20);
    }

    #[test]
    fn zero_preference_mass_splits_uniformly() {
        let (k, _) = allocate_heads(5, 0.0, &[0.0; 4]).unwrap();
        assert_eq!(k, vec![5, 5, 5, 5]);
    }

    #[test]
    fn calibrate_single_sample_is_identity() {
        let sample = SampleScores {
            layer_importance: vec![0.25, 0.5],
            head_preference: vec![vec![0.5, 0.5], vec![0.75, 0.25]],
        };
        let profile = calibrate(&[sample.clone()], "one").unwrap();
        assert_eq!(profile.layer_importance, sample.layer_importance);
        assert_eq!(profile.head_preference, sample.head_preference);
        assert_eq!(profile.sample_count, 1);
    }

    #[test]
    fn calibrate_duplicated_sample_matches_single() {
        let sample = SampleScores {
            layer_importance: vec![0.25, 0.5],
            head_preference: vec![vec![0.5, 0.5], vec![0.75, 0.25]],
        };
        let once = calibrate(&[sample.clone()], "x").unwrap();
        let twice = calibrate(&[sample.clone(), sample], "x").unwrap();
        assert_eq!(once.layer_importance, twice.layer_importance);
        assert_eq!(once.head_preference, twice.head_preference);
    }

    #[test]
    fn calibrate_two_samples_is_elementwise_mean() {
        let a = SampleScores {
            layer_importance: vec![0.2, 0.6],
            head_preference: vec![vec![0.4, 0.6], vec![0.1, 0.9]],
        };
        let b = SampleScores {
            layer_importance: vec![0.4, 0.2],
            head_preference: vec![vec![0.8, 0.2], vec![0.3, 0.7]],
        };
        let profile = calibrate(&[a.clone(), b.clone()], "x").unwrap();
        for l in 0..2 {
            let want = (a.layer_importance[l] + b.layer_importance[l]) / 2.0;
            assert!((profile.layer_importance[l] - want).abs() < 1e-15);
            for h in 0..2 {
                let want = (a.head_preference[l][h] + b.head_preference[l][h]) / 2.0;
                assert!((profile.head_preference[l][h] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn calibrate_empty_set_is_config_error() {
        assert!(matches!(calibrate(&[], "x"), Err(Error::Config(_))));
    }

    #[test]
    fn plan_uniform_degenerate() {
        let profile = CalibrationProfile {
            layer_importance: vec![1.4, 0.1, 0.2, 1.1],
            head_preference: vec![vec![0.9, 0.1, 0.3, 0.7]; 4],
            sample_count: 1,
            source: "test".into(),
        };
        let config = BudgetConfig {
            total_budget: 41,
            alpha: 1.0,
            beta: 1.0,
            boundary_layers: None,
            baseline: None,
        };
        let plan = plan_budget(&config, &profile).unwrap();
        let uniform = baseline_allocate(BaselinePolicy::Uniform, 41, 4, 4, Some(&profile)).unwrap();
        assert_eq!(plan.layer_budgets, uniform.layer_budgets);
        assert_eq!(plan.head_budgets, uniform.head_budgets);
    }

    #[test]
    fn plan_zero_budget_is_zero_plan() {
        let profile = flat_profile(3, 2);
        let plan = plan_budget(&BudgetConfig::hybrid(0), &profile).unwrap();
        assert!(plan.layer_budgets.iter().all(|&k| k == 0));
        assert!(plan.head_budgets.iter().flatten().all(|&k| k == 0));
    }

    #[test]
    fn plan_conserves_exactly_at_stock_rates() {
        let profile = CalibrationProfile {
            layer_importance: vec![1.2, 0.3, 0.1, 0.2, 0.05, 1.4],
            head_preference: vec![vec![0.6, 0.2, 0.15, 0.05]; 6],
            sample_count: 3,
            source: "test".into(),
        };
        let plan = plan_budget(&BudgetConfig::hybrid(257), &profile).unwrap();
        assert_eq!(plan.layer_budgets.iter().sum::<usize>(), 257);
        for (l, heads) in plan.head_budgets.iter().enumerate() {
            assert_eq!(heads.iter().sum::<usize>(), 4 * plan.layer_budgets[l]);
        }
    }

    #[test]
    fn uniform_baseline_example() {
        let plan = baseline_allocate(BaselinePolicy::Uniform, 40, 4, 4, None).unwrap();
        assert_eq!(plan.layer_budgets, vec![10, 10, 10, 10]);
        for heads in &plan.head_budgets {
            assert_eq!(heads, &vec![10, 10, 10, 10]);
        }
    }

    #[test]
    fn pyramid_is_strictly_decreasing_progression() {
        let plan = baseline_allocate(BaselinePolicy::Pyramid, 40, 4, 2, None).unwrap();
        assert_eq!(plan.layer_budgets, vec![16, 12, 8, 4]);
        assert_eq!(plan.layer_budgets.iter().sum::<usize>(), 40);
    }

    #[test]
    fn squeeze_least_important_group_gets_less() {
        let profile = CalibrationProfile {
            layer_importance: vec![0.1, 0.5, 0.9],
            head_preference: vec![vec![0.5, 0.5]; 3],
            sample_count: 1,
            source: "test".into(),
        };
        let plan = baseline_allocate(BaselinePolicy::Squeeze, 30, 3, 2, Some(&profile)).unwrap();
        // Uniform share 10; least-important layer 0 gets 40% less (6) and the
        // freed 4 units split over the other two layers.
        assert_eq!(plan.layer_budgets, vec![6, 12, 12]);
    }

    #[test]
    fn squeeze_requires_profile() {
        assert!(matches!(
            baseline_allocate(BaselinePolicy::Squeeze, 30, 3, 2, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ada_heads_follow_preference_with_floor() {
        let profile = CalibrationProfile {
            layer_importance: vec![0.5, 0.5],
            head_preference: vec![vec![1.0, 0.0], vec![0.5, 0.5]],
            sample_count: 1,
            source: "test".into(),
        };
        let plan = baseline_allocate(BaselinePolicy::Ada, 20, 2, 2, Some(&profile)).unwrap();
        assert_eq!(plan.layer_budgets, vec![10, 10]);
        // Layer 0: floor(0.2*10 + 0.8*20*1.0) = 18, partner gets 2.
        assert_eq!(plan.head_budgets[0], vec![18, 2]);
        assert_eq!(plan.head_budgets[1], vec![10, 10]);
    }

    #[test]
    fn unknown_policy_string_is_config_error() {
        assert!(matches!("h2o".parse::<BaselinePolicy>(), Err(Error::Config(_))));
    }

    #[test]
    fn profile_round_trip_is_exact() {
        let profile = CalibrationProfile {
            layer_importance: vec![0.123456789, 1.99999999, 0.0],
            head_preference: vec![
                vec![0.5, 0.25],
                vec![0.333333333, 0.666666667],
                vec![1.0, 0.0],
            ],
            sample_count: 7,
            source: "orig".into(),
        };
        let mut buf = Vec::new();
        write_profile(&profile, &mut buf).unwrap();
        let loaded = read_profile(std::io::Cursor::new(&buf), "copy").unwrap();
        let mut buf2 = Vec::new();
        write_profile(&loaded, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
        assert_eq!(loaded.sample_count, 7);
    }

    #[test]
    fn profile_bad_header_is_located_parse_error() {
        let err = read_profile(std::io::Cursor::new(b"nonsense v1 D=2 H=2 samples=1" as &[u8]), "x")
            .unwrap_err();
        match err {
            Error::Parse { location, .. } => assert_eq!(location, "line 1"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn profile_truncated_is_located_parse_error() {
        let text = "maskkv-profile v1 D=2 H=2 samples=1\nlayer 0 importance 5.00000000e-1\n";
        let err = read_profile(std::io::Cursor::new(text.as_bytes()), "x").unwrap_err();
        match err {
            Error::Parse { location, .. } => assert_eq!(location, "line 3"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn format_score_has_nine_significant_digits() {
        assert_eq!(format_score(0.25), "2.50000000e-1");
        assert_eq!(format_score(1.0), "1.00000000e0");
    }
}
