//! Policy-versus-budget sweeps against a full-cache reference run.

use std::fmt;

use super::report::{format_tokens, RunReport};
use super::stats::{agreement_rate, spearman};
use super::tasks::{needle_task, random_prompt, NEEDLE_TOKEN};
use crate::budget::{calibrate, BaselinePolicy, BudgetConfig, CalibrationProfile};
use crate::cache::{CacheConfig, MODELED_ELEM_BYTES};
use crate::error::{Error, Result};
use crate::eviction::SelectionPolicy;
use crate::model::{
    decode, forward_step, remask, sample_scores_from_step, stage1_importance, CacheMode,
    DecodeOptions, DecodeResult, DenoisingState, EvictionConfig, ModelConfig, ModelParams,
    RemaskPolicy,
};
use crate::scoring::MaskSegment;

/// An eviction policy as exposed by the harness: a budget allocator coupled
/// with a token-selection rule. `snap` isolates the selection signal (prompt
/// observation window, uniform budgets); the other baselines isolate the
/// allocator and share mask-voting selection with `maskkv`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyName {
    MaskKv,
    Uniform,
    Snap,
    Pyramid,
    Squeeze,
    Ada,
}

impl PolicyName {
    pub const ALL: [PolicyName; 6] = [
        PolicyName::MaskKv,
        PolicyName::Uniform,
        PolicyName::Snap,
        PolicyName::Pyramid,
        PolicyName::Squeeze,
        PolicyName::Ada,
    ];

    fn baseline(self) -> Option<BaselinePolicy> {
        match self {
            PolicyName::MaskKv => None,
            PolicyName::Uniform => Some(BaselinePolicy::Uniform),
            PolicyName::Snap => Some(BaselinePolicy::Snap),
            PolicyName::Pyramid => Some(BaselinePolicy::Pyramid),
            PolicyName::Squeeze => Some(BaselinePolicy::Squeeze),
            PolicyName::Ada => Some(BaselinePolicy::Ada),
        }
    }
}

impl fmt::Display for PolicyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            PolicyName::MaskKv => "maskkv",
            PolicyName::Uniform => "uniform",
            PolicyName::Snap => "snap",
            PolicyName::Pyramid => "pyramid",
            PolicyName::Squeeze => "squeeze",
            PolicyName::Ada => "ada",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for PolicyName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maskkv" => Ok(PolicyName::MaskKv),
            "uniform" => Ok(PolicyName::Uniform),
            "snap" => Ok(PolicyName::Snap),
            "pyramid" => Ok(PolicyName::Pyramid),
            "squeeze" => Ok(PolicyName::Squeeze),
            "ada" => Ok(PolicyName::Ada),
            other => Err(Error::config(format!("unknown policy {other:?}"))),
        }
    }
}

/// Full sweep configuration.
#[derive(Debug, Clone)]
pub struct CompareConfig {
    pub model: ModelConfig,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub policy: RemaskPolicy,
    pub cache: CacheConfig,
    /// Per-head average budgets to sweep; the total budget is `b * layers`.
    pub budgets: Vec<usize>,
    pub policies: Vec<PolicyName>,
    /// Needle-task seeds evaluated per policy and budget.
    pub seeds: Vec<u64>,
    /// Seeds for the offline calibration profile.
    pub calibration_seeds: Vec<u64>,
    pub alpha: f64,
    pub beta: f64,
    pub boundary_layers: Option<Vec<usize>>,
    pub mask_segment: MaskSegment,
    pub snap_window: usize,
    pub needle_depth: f64,
}

impl CompareConfig {
    pub fn new(model: ModelConfig) -> Self {
        CompareConfig {
            model,
            prompt_len: 64,
            gen_len: 8,
            policy: RemaskPolicy::default(),
            cache: CacheConfig::default(),
            budgets: vec![2, 4, 8, 16],
            policies: vec![PolicyName::MaskKv, PolicyName::Uniform],
            seeds: (1..=10).collect(),
            calibration_seeds: (9001..=9008).collect(),
            alpha: 0.1,
            beta: 0.4,
            boundary_layers: None,
            mask_segment: MaskSegment::All,
            snap_window: 32,
            needle_depth: 0.5,
        }
    }

    fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.cache.validate()?;
        self.policy.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("compare needs at least one seed"));
        }
        if self.calibration_seeds.is_empty() {
            return Err(Error::config("compare needs at least one calibration seed"));
        }
        if self.budgets.is_empty() && !self.policies.is_empty() {
            return Err(Error::config("compare needs at least one budget"));
        }
        Ok(())
    }

    fn selection(&self, policy: PolicyName) -> SelectionPolicy {
        match policy {
            PolicyName::Snap => SelectionPolicy::SnapWindow { window: self.snap_window },
            _ => SelectionPolicy::MaskVoting(self.mask_segment),
        }
    }

    fn budget_config(&self, policy: PolicyName, per_head_budget: usize) -> BudgetConfig {
        BudgetConfig {
            total_budget: per_head_budget * self.model.num_layers,
            alpha: self.alpha,
            beta: self.beta,
            boundary_layers: self.boundary_layers.clone(),
            baseline: policy.baseline(),
        }
    }
}

/// Offline calibration over fresh filler prompts.
pub fn calibrate_from_seeds(
    params: &ModelParams,
    seeds: &[u64],
    prompt_len: usize,
    gen_len: usize,
) -> Result<CalibrationProfile> {
    let mut samples = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let prompt = random_prompt(seed, prompt_len, params.config.vocab_size);
        let steps = crate::model::required_steps(gen_len, &RemaskPolicy::default());
        let state = DenoisingState::initial(&params.config, &prompt, gen_len, steps)?;
        let out = forward_step(params, &state, CacheMode::Off, false)?;
        samples.push(sample_scores_from_step(&out, &state.masked_positions(), prompt_len)?);
    }
    let source = format!("seeds {seeds:?}");
    calibrate(&samples, source)
}

/// Mean Spearman correlation of per-head mask-voting importance between the
/// first two denoising steps, measured with full recomputation.
fn importance_stability(
    params: &ModelParams,
    prompt: &[u32],
    gen_len: usize,
    policy: &RemaskPolicy,
    segment: MaskSegment,
) -> Result<f64> {
    let steps = crate::model::required_steps(gen_len, policy);
    if steps < 2 {
        return Ok(1.0);
    }
    let state = DenoisingState::initial(&params.config, prompt, gen_len, steps)?;
    let out_t = forward_step(params, &state, CacheMode::Off, false)?;
    let grid_t = stage1_importance(
        &out_t,
        &state.masked_positions(),
        prompt.len(),
        SelectionPolicy::MaskVoting(segment),
    )?;
    let next = remask(&state, &out_t.logits, policy)?;
    if next.masked_count() == 0 {
        return Ok(1.0);
    }
    let out_prev = forward_step(params, &next, CacheMode::Off, false)?;
    let grid_prev = stage1_importance(
        &out_prev,
        &next.masked_positions(),
        prompt.len(),
        SelectionPolicy::MaskVoting(segment),
    )?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (layer_t, layer_prev) in grid_t.scores.iter().zip(&grid_prev.scores) {
        for (head_t, head_prev) in layer_t.iter().zip(layer_prev) {
            total += spearman(head_t, head_prev)?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn decode_options(config: &CompareConfig, eviction: Option<EvictionConfig>) -> DecodeOptions {
    DecodeOptions {
        policy: config.policy.clone(),
        cache: Some(config.cache.clone()),
        num_steps: None,
        eviction,
    }
}

fn contains_needle(result: &DecodeResult) -> bool {
    result.response_tokens().contains(&NEEDLE_TOKEN)
}

fn echo_config(report: &mut RunReport, config: &CompareConfig) {
    let section = report.section("config");
    section.push("model_layers", config.model.num_layers.to_string());
    section.push("model_heads", config.model.num_heads.to_string());
    section.push("model_dim", config.model.model_dim.to_string());
    section.push("vocab_size", config.model.vocab_size.to_string());
    section.push("model_seed", config.model.seed.to_string());
    section.push("use_rotary", config.model.use_rotary.to_string());
    section.push("prompt_len", config.prompt_len.to_string());
    section.push("gen_len", config.gen_len.to_string());
    section.push("block_length", config.policy.block_length.to_string());
    section.push_f64("transfer_ratio", config.policy.transfer_ratio);
    section.push("prompt_refresh_interval", config.cache.prompt_refresh_interval.to_string());
    section.push("response_refresh_interval", config.cache.response_refresh_interval.to_string());
    section.push_f64("shift_threshold", config.cache.shift_threshold);
    section.push("probe_layer", config.cache.probe_layer.to_string());
    section.push("prompt_state_exclusion", config.cache.prompt_state_exclusion.to_string());
    section.push("mask_only_projection", config.cache.mask_only_projection.to_string());
    section.push_f64("alpha", config.alpha);
    section.push_f64("beta", config.beta);
    let boundary = config
        .boundary_layers
        .clone()
        .unwrap_or_else(|| crate::budget::default_boundary(config.model.num_layers));
    section.push(
        "boundary_layers",
        boundary.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","),
    );
    section.push("mask_segment", format!("{:?}", config.mask_segment).to_lowercase());
    section.push("snap_window", config.snap_window.to_string());
    section.push_f64("needle_depth", config.needle_depth);
    section.push(
        "budgets",
        config.budgets.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(","),
    );
    section.push(
        "policies",
        config.policies.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(","),
    );
    section.push("seeds", config.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
    section.push(
        "calibration_seeds",
        config.calibration_seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
    );
}

/// Run the full sweep: a full-cache reference per seed, then every policy at
/// every budget, with per-run sections and per-(policy, budget) aggregates.
pub fn run_compare(config: &CompareConfig) -> Result<RunReport> {
    config.validate()?;
    let params = crate::model::init_model(&config.model)?;
    let profile =
        calibrate_from_seeds(&params, &config.calibration_seeds, config.prompt_len, config.gen_len)?;

    let mut report = RunReport::default();
    echo_config(&mut report, config);

    // Reference runs: cache enabled, no eviction.
    let mut prompts = Vec::with_capacity(config.seeds.len());
    let mut references = Vec::with_capacity(config.seeds.len());
    let mut reference_needle_hits = 0usize;
    for &seed in &config.seeds {
        let (prompt, _) =
            needle_task(seed, config.prompt_len, config.needle_depth, config.model.vocab_size);
        let reference = decode(&params, &prompt, config.gen_len, &decode_options(config, None))?;
        let stability = importance_stability(
            &params,
            &prompt,
            config.gen_len,
            &config.policy,
            config.mask_segment,
        )?;
        let needle_hit = contains_needle(&reference);
        reference_needle_hits += needle_hit as usize;

        let section = report.section(format!("reference seed={seed}"));
        section.push("response_tokens", format_tokens(reference.response_tokens()));
        section.push("needle_hit", (needle_hit as u8).to_string());
        section.push_f64("importance_stability", stability);
        section.push("kv_bytes", reference.final_kv_bytes.to_string());
        section.push("peak_modeled_bytes", reference.peak_modeled_bytes.to_string());
        if let Some(stats) = &reference.cache_stats {
            section.push("prompt_refreshes", stats.prompt_refreshes.to_string());
            section.push(
                "periodic_response_refreshes",
                stats.periodic_response_refreshes.to_string(),
            );
            section.push("shift_response_refreshes", stats.shift_response_refreshes.to_string());
        }
        prompts.push(prompt);
        references.push(reference);
    }
    {
        let section = report.section("aggregate reference");
        section.push("runs", config.seeds.len().to_string());
        section.push_f64(
            "needle_accuracy",
            reference_needle_hits as f64 / config.seeds.len() as f64,
        );
    }

    for &policy in &config.policies {
        for &budget in &config.budgets {
            let mut agreement_sum = 0.0;
            let mut needle_hits = 0usize;
            let mut mass_sum = 0.0;
            for (idx, &seed) in config.seeds.iter().enumerate() {
                let eviction = EvictionConfig {
                    budget: config.budget_config(policy, budget),
                    profile: Some(profile.clone()),
                    selection: config.selection(policy),
                    rescore_after_prompt_refresh: false,
                };
                let result = decode(
                    &params,
                    &prompts[idx],
                    config.gen_len,
                    &decode_options(config, Some(eviction)),
                )?;
                let agreement =
                    agreement_rate(result.response_tokens(), references[idx].response_tokens())?;
                let needle_hit = contains_needle(&result);
                let mass = result
                    .eviction
                    .as_ref()
                    .map_or(1.0, |report| report.mean_retained_mass());
                agreement_sum += agreement;
                needle_hits += needle_hit as usize;
                mass_sum += mass;

                let section =
                    report.section(format!("run policy={policy} budget={budget} seed={seed}"));
                section.push("response_tokens", format_tokens(result.response_tokens()));
                section.push_f64("agreement", agreement);
                section.push("needle_hit", (needle_hit as u8).to_string());
                section.push_f64("retained_mass", mass);
                section.push("kv_bytes", result.final_kv_bytes.to_string());
                section.push("peak_modeled_bytes", result.peak_modeled_bytes.to_string());
            }
            let n = config.seeds.len() as f64;
            let section = report.section(format!("aggregate policy={policy} budget={budget}"));
            section.push("runs", config.seeds.len().to_string());
            section.push_f64("mean_agreement", agreement_sum / n);
            section.push_f64("needle_accuracy", needle_hits as f64 / n);
            section.push_f64("mean_retained_mass", mass_sum / n);
            section.push(
                "kv_budget_bytes",
                super::memory::kv_memory_bytes(
                    budget as u64 + config.gen_len as u64,
                    config.model.num_heads as u64,
                    config.model.head_dim() as u64,
                    MODELED_ELEM_BYTES,
                    config.model.num_layers as u64,
                )
                .to_string(),
            );
        }
    }
    Ok(report)
}

/// Aggregate metrics parsed back out of a report, used by tests and the CLI.
pub fn aggregate_metric(report: &RunReport, policy: &str, budget: usize, key: &str) -> Option<f64> {
    report
        .find(&format!("aggregate policy={policy} budget={budget}"))
        .and_then(|s| s.get(key))
        .and_then(|v| v.parse().ok())
}
