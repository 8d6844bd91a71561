//! The full denoising loop: refresh scheduling, one-shot eviction after the
//! first step, and run statistics.

use std::collections::BTreeSet;

use super::forward::{forward_step, probe_values, sample_scores_from_step, CacheMode, StepOutput};
use super::params::ModelParams;
use super::state::{remask, required_steps, DenoisingState, RemaskPolicy};
use crate::budget::{calibrate, plan_budget, BudgetConfig, CalibrationProfile};
use crate::cache::{
    prompt_refresh_set, response_refresh_set, CacheConfig, FeatureCache, MODELED_ELEM_BYTES,
};
use crate::error::{Error, Result};
use crate::eviction::{
    evict, eviction_report, head_importance, EvictionReport, ImportanceGrid, SelectionPolicy,
};

/// One-shot eviction settings.
#[derive(Debug, Clone)]
pub struct EvictionConfig {
    /// Budget allocator parameters (total budget, base rates, policy).
    pub budget: BudgetConfig,
    /// Offline profile; when absent, the profile is measured from the first
    /// step of this very run (online mode, full peak memory).
    pub profile: Option<CalibrationProfile>,
    /// How token importance is scored.
    pub selection: SelectionPolicy,
    /// Recompute Stage-1 importance at prompt refresh steps and update the
    /// report's retained-mass against the fresh scores. Keep sets never
    /// change: eviction is irreversible within a run.
    pub rescore_after_prompt_refresh: bool,
}

impl EvictionConfig {
    pub fn new(budget: BudgetConfig) -> Self {
        EvictionConfig {
            budget,
            profile: None,
            selection: SelectionPolicy::default(),
            rescore_after_prompt_refresh: false,
        }
    }
}

/// Everything `decode` needs besides the prompt.
#[derive(Debug, Clone)]
pub struct DecodeOptions {
    pub policy: RemaskPolicy,
    /// `None` runs cache-free (full recompute every step).
    pub cache: Option<CacheConfig>,
    /// Override the step count; must cover the remasking schedule.
    pub num_steps: Option<usize>,
    pub eviction: Option<EvictionConfig>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            policy: RemaskPolicy::default(),
            cache: Some(CacheConfig::default()),
            num_steps: None,
            eviction: None,
        }
    }
}

/// Per-step record kept in the decode result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepSummary {
    /// Countdown step the forward pass ran at.
    pub t: usize,
    /// Size of the refresh set.
    pub refreshed: usize,
    /// Positions committed this step with their tokens.
    pub decoded: Vec<(usize, u32)>,
}

/// Position-refresh event counts over a cached run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CacheRunStats {
    /// Positions written by the initial cache fill.
    pub initial_fill: u64,
    /// Prompt position refreshes after the initial fill.
    pub prompt_refreshes: u64,
    /// Periodic response refreshes after the initial fill.
    pub periodic_response_refreshes: u64,
    /// Shift-triggered response refreshes.
    pub shift_response_refreshes: u64,
}

/// Output of one decode run.
#[derive(Debug, Clone)]
pub struct DecodeResult {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    pub num_steps: usize,
    pub steps: Vec<StepSummary>,
    pub cache_stats: Option<CacheRunStats>,
    /// Retained prompt KV per (layer, head) at the end of the run.
    pub retained_counts: Option<Vec<Vec<usize>>>,
    /// Largest modeled cache footprint observed (KV plus cached outputs).
    pub peak_modeled_bytes: u64,
    /// Modeled KV bytes at the end of the run.
    pub final_kv_bytes: u64,
    pub eviction: Option<EvictionReport>,
}

impl DecodeResult {
    pub fn response_tokens(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }
}

/// Stage-1 importance for every (layer, head) from one step's attention.
pub fn stage1_importance(
    out: &StepOutput,
    masked: &[usize],
    prompt_len: usize,
    selection: SelectionPolicy,
) -> Result<ImportanceGrid> {
    let num_layers = out.attention.len();
    let num_heads = out.attention.first().map_or(0, Vec::len);
    let mut scores = Vec::with_capacity(num_layers);
    for layer in 0..num_layers {
        let mut per_head = Vec::with_capacity(num_heads);
        for head in 0..num_heads {
            let mask_rows = out.mask_attention_for(layer, head, masked, prompt_len)?.rows;
            let prompt_rows = match selection {
                SelectionPolicy::SnapWindow { .. } => {
                    out.prompt_rows_for(layer, head, prompt_len)?
                }
                SelectionPolicy::MaskVoting(_) => Vec::new(),
            };
            per_head.push(head_importance(selection, &mask_rows, &prompt_rows, prompt_len));
        }
        scores.push(per_head);
    }
    Ok(ImportanceGrid { scores })
}

/// Run iterative denoising to completion.
pub fn decode(
    params: &ModelParams,
    prompt: &[u32],
    gen_len: usize,
    options: &DecodeOptions,
) -> Result<DecodeResult> {
    let config = &params.config;
    options.policy.validate()?;
    if let Some(cc) = &options.cache {
        cc.validate()?;
    }
    if options.eviction.is_some() && options.cache.is_none() {
        return Err(Error::config("eviction requires a cache configuration"));
    }
    let required = required_steps(gen_len, &options.policy);
    let num_steps = options.num_steps.unwrap_or(required);
    if num_steps < required {
        return Err(Error::config(format!(
            "num_steps {num_steps} cannot decode {gen_len} positions (need {required})"
        )));
    }

    let mut state = DenoisingState::initial(config, prompt, gen_len, num_steps)?;
    let prompt_positions = state.prompt_positions();
    let response_positions = state.response_positions();
    let seq_len = state.seq_len();

    let mut cache = options.cache.as_ref().map(|cc| {
        FeatureCache::new(
            config.num_layers,
            config.num_heads,
            config.head_dim(),
            prompt.len(),
            seq_len,
            cc.prompt_state_exclusion,
        )
    });
    let mask_only = options.cache.as_ref().map_or(false, |cc| cc.mask_only_projection);

    let mut stats = options.cache.as_ref().map(|_| CacheRunStats::default());
    let mut steps_log = Vec::new();
    let mut peak_bytes = 0u64;
    let mut eviction_out: Option<EvictionReport> = None;
    let mut prev_out: Option<StepOutput> = None;
    let mut probe_prev: Option<Vec<Vec<f64>>> = None;

    let mut ordinal: u64 = 0;
    while state.step() > 0 && state.masked_count() > 0 {
        let t = state.step();

        // Refresh set for this step. The first step fills the cache, later
        // steps follow the periodic and shift rules.
        let mut prompt_set = Vec::new();
        let mut response_set = Vec::new();
        let mut probe_now = None;
        let refresh: Vec<usize> = if options.cache.is_none() || ordinal == 0 {
            (0..seq_len).collect()
        } else {
            let cc = options.cache.as_ref().unwrap();
            prompt_set = prompt_refresh_set(t, cc, &prompt_positions);
            if let Some(c) = &cache {
                prompt_set.retain(|&p| c.retained_anywhere(p));
            }
            let now = probe_values(params, &state, cc.probe_layer, prev_out.as_ref(), &response_positions)?;
            let prev = probe_prev.as_ref().expect("probe history exists after the first step");
            response_set = response_refresh_set(t, cc, &now, prev, &response_positions)?;
            probe_now = Some(now);
            let merged: BTreeSet<usize> =
                prompt_set.iter().chain(response_set.iter()).copied().collect();
            merged.into_iter().collect()
        };

        let mode = match &cache {
            None => CacheMode::Off,
            Some(c) => CacheMode::Cached { cache: c, refresh: &refresh },
        };
        let out = forward_step(params, &state, mode, mask_only)?;

        if let Some(c) = cache.as_mut() {
            let cc = options.cache.as_ref().unwrap();
            if ordinal == 0 {
                if let Some(ev) = &options.eviction {
                    let grid = stage1_importance(
                        &out,
                        &state.masked_positions(),
                        prompt.len(),
                        ev.selection,
                    )?;
                    let profile = match &ev.profile {
                        Some(p) => p.clone(),
                        None => {
                            let scores = sample_scores_from_step(
                                &out,
                                &state.masked_positions(),
                                prompt.len(),
                            )?;
                            calibrate(&[scores], "online first step")?
                        }
                    };
                    let plan = plan_budget(&ev.budget, &profile)?;
                    if ev.profile.is_some() {
                        // Offline plan: install keep sets before anything is
                        // written, so evicted entries never materialize and
                        // the peak stays at the compacted level.
                        c.compact(&plan, &grid)?;
                        c.apply_refresh(&out.features, &refresh, ordinal)?;
                        let before = c.unpruned_kv_bytes(MODELED_ELEM_BYTES);
                        eviction_out =
                            Some(eviction_report(c, &grid, before, MODELED_ELEM_BYTES)?);
                    } else {
                        c.apply_refresh(&out.features, &refresh, ordinal)?;
                        peak_bytes = peak_bytes.max(c.modeled_bytes(MODELED_ELEM_BYTES));
                        eviction_out = Some(evict(c, &plan, &grid, MODELED_ELEM_BYTES)?);
                    }
                } else {
                    c.apply_refresh(&out.features, &refresh, ordinal)?;
                }
                if let Some(s) = stats.as_mut() {
                    s.initial_fill = refresh.len() as u64;
                }
            } else {
                c.apply_refresh(&out.features, &refresh, ordinal)?;
                if let Some(s) = stats.as_mut() {
                    s.prompt_refreshes += prompt_set.len() as u64;
                    if t % cc.response_refresh_interval == 0 {
                        s.periodic_response_refreshes += response_set.len() as u64;
                    } else {
                        s.shift_response_refreshes += response_set.len() as u64;
                    }
                }
                if let Some(ev) = &options.eviction {
                    let prompt_refresh_step = !prompt_set.is_empty();
                    if ev.rescore_after_prompt_refresh && prompt_refresh_step {
                        let masked_refreshed: Vec<usize> = state
                            .masked_positions()
                            .into_iter()
                            .filter(|p| refresh.binary_search(p).is_ok())
                            .collect();
                        if !masked_refreshed.is_empty() {
                            let grid = stage1_importance(
                                &out,
                                &masked_refreshed,
                                prompt.len(),
                                ev.selection,
                            )?;
                            if let (Some(report), Some(sets)) =
                                (eviction_out.as_mut(), c.keep_sets())
                            {
                                for (layer, heads) in sets.iter().enumerate() {
                                    for (head, keep) in heads.iter().enumerate() {
                                        let scores = &grid.scores[layer][head];
                                        let total: f64 = scores.iter().sum();
                                        let kept: f64 =
                                            keep.iter().map(|&p| scores[p]).sum();
                                        report.retained_mass[layer][head] =
                                            if total > 0.0 { kept / total } else { 1.0 };
                                    }
                                }
                            }
                        }
                    }
                }
            }
            peak_bytes = peak_bytes.max(c.modeled_bytes(MODELED_ELEM_BYTES));
        }

        let next = remask(&state, &out.logits, &options.policy)?;
        let decoded: Vec<(usize, u32)> = next
            .tokens()
            .iter()
            .enumerate()
            .filter(|&(pos, _)| state.is_masked(pos) && !next.is_masked(pos))
            .map(|(pos, &tok)| (pos, tok))
            .collect();
        steps_log.push(StepSummary { t, refreshed: refresh.len(), decoded });

        if let Some(now) = probe_now {
            probe_prev = Some(now);
        } else if options.cache.is_some() {
            // After the initial fill, seed the probe history from the
            // current tokens so the next step has a comparison point.
            probe_prev = Some(probe_values(
                params,
                &state,
                options.cache.as_ref().unwrap().probe_layer,
                Some(&out),
                &response_positions,
            )?);
        }
        prev_out = Some(out);
        state = next;
        ordinal += 1;
    }

    if state.masked_count() != 0 {
        return Err(Error::Protocol("decode ended with masked positions remaining".into()));
    }

    let final_kv_bytes =
        cache.as_ref().map_or(0, |c| c.modeled_kv_bytes(MODELED_ELEM_BYTES));
    let retained_counts = cache.as_ref().map(|c| c.retained_prompt_counts());
    Ok(DecodeResult {
        tokens: state.tokens().to_vec(),
        prompt_len: prompt.len(),
        num_steps,
        steps: steps_log,
        cache_stats: stats,
        retained_counts,
        peak_modeled_bytes: peak_bytes,
        final_kv_bytes,
        eviction: eviction_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::BaselinePolicy;
    use crate::model::{init_model, ModelConfig};

    fn small_config(seed: u64) -> ModelConfig {
        ModelConfig::new(2, 2, 8, 16, seed)
    }

    fn prompt() -> Vec<u32> {
        vec![1, 4, 9, 2, 7, 3]
    }

    fn cache_all() -> CacheConfig {
        CacheConfig {
            prompt_refresh_interval: 1,
            response_refresh_interval: 1,
            shift_threshold: -1.0,
            ..CacheConfig::default()
        }
    }

    #[test]
    fn decode_is_deterministic() {
        let params = init_model(&small_config(7)).unwrap();
        let options = DecodeOptions::default();
        let a = decode(&params, &prompt(), 8, &options).unwrap();
        let b = decode(&params, &prompt(), 8, &options).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.peak_modeled_bytes, b.peak_modeled_bytes);
    }

    #[test]
    fn refresh_everything_matches_cache_free() {
        let params = init_model(&small_config(7)).unwrap();
        let cache_free =
            DecodeOptions { cache: None, ..DecodeOptions::default() };
        let always_fresh =
            DecodeOptions { cache: Some(cache_all()), ..DecodeOptions::default() };
        let a = decode(&params, &prompt(), 8, &cache_free).unwrap();
        let b = decode(&params, &prompt(), 8, &always_fresh).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn full_budget_eviction_keeps_tokens_identical() {
        let params = init_model(&small_config(9)).unwrap();
        let no_evict = DecodeOptions::default();
        let a = decode(&params, &prompt(), 8, &no_evict).unwrap();

        // Budget of prompt_len per head everywhere keeps every prompt entry.
        let budget = BudgetConfig {
            total_budget: prompt().len() * 2,
            alpha: 1.0,
            beta: 1.0,
            boundary_layers: None,
            baseline: None,
        };
        let evict_all_kept = DecodeOptions {
            eviction: Some(EvictionConfig::new(budget)),
            ..DecodeOptions::default()
        };
        let b = decode(&params, &prompt(), 8, &evict_all_kept).unwrap();
        assert_eq!(a.tokens, b.tokens);
        let report = b.eviction.unwrap();
        for row in &report.retained_mass {
            for &m in row {
                assert!((m - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eviction_reduces_modeled_memory() {
        let params = init_model(&small_config(3)).unwrap();
        let budget = BudgetConfig::hybrid(4); // 2 per layer on average
        let options = DecodeOptions {
            eviction: Some(EvictionConfig::new(budget)),
            ..DecodeOptions::default()
        };
        let result = decode(&params, &prompt(), 8, &options).unwrap();
        let report = result.eviction.unwrap();
        assert!(report.kv_bytes_after < report.kv_bytes_before);
        let retained = result.retained_counts.unwrap();
        let total: usize = retained.iter().flatten().sum();
        assert_eq!(total, 4 * 2); // total_budget * num_heads prompt pairs
    }

    #[test]
    fn offline_profile_lowers_peak_memory() {
        let params = init_model(&small_config(5)).unwrap();
        let online = DecodeOptions {
            eviction: Some(EvictionConfig::new(BudgetConfig::hybrid(4))),
            ..DecodeOptions::default()
        };
        let online_run = decode(&params, &prompt(), 8, &online).unwrap();

        // Use the online run's implicit first-step profile shape: calibrate
        // from a separate seed instead.
        let calib_params = init_model(&small_config(77)).unwrap();
        let out = forward_step(
            &calib_params,
            &DenoisingState::initial(&calib_params.config, &prompt(), 8, 6).unwrap(),
            CacheMode::Off,
            false,
        )
        .unwrap();
        let scores = sample_scores_from_step(&out, &(6..14).collect::<Vec<_>>(), 6).unwrap();
        let profile = calibrate(&[scores], "calib").unwrap();

        let offline = DecodeOptions {
            eviction: Some(EvictionConfig {
                profile: Some(profile),
                ..EvictionConfig::new(BudgetConfig::hybrid(4))
            }),
            ..DecodeOptions::default()
        };
        let offline_run = decode(&params, &prompt(), 8, &offline).unwrap();
        assert!(offline_run.peak_modeled_bytes < online_run.peak_modeled_bytes);
    }

    #[test]
    fn eviction_without_cache_is_config_error() {
        let params = init_model(&small_config(3)).unwrap();
        let options = DecodeOptions {
            cache: None,
            eviction: Some(EvictionConfig::new(BudgetConfig::hybrid(4))),
            ..DecodeOptions::default()
        };
        assert!(matches!(decode(&params, &prompt(), 8, &options), Err(Error::Config(_))));
    }

    #[test]
    fn too_few_steps_is_config_error() {
        let params = init_model(&small_config(3)).unwrap();
        let options = DecodeOptions { num_steps: Some(2), ..DecodeOptions::default() };
        assert!(matches!(decode(&params, &prompt(), 8, &options), Err(Error::Config(_))));
    }

    #[test]
    fn extra_steps_are_allowed_and_finish_early() {
        let params = init_model(&small_config(3)).unwrap();
        let exact = decode(&params, &prompt(), 8, &DecodeOptions::default()).unwrap();
        let padded = DecodeOptions { num_steps: Some(20), ..DecodeOptions::default() };
        let result = decode(&params, &prompt(), 8, &padded).unwrap();
        assert_eq!(result.steps.len(), exact.steps.len());
        assert!(result.tokens.iter().all(|&t| t != params.config.mask_token()));
    }

    #[test]
    fn refresh_counters_track_schedule() {
        let params = init_model(&small_config(3)).unwrap();
        let cc = CacheConfig {
            prompt_refresh_interval: 2,
            response_refresh_interval: 2,
            shift_threshold: -1.0,
            ..CacheConfig::default()
        };
        let options = DecodeOptions { cache: Some(cc), ..DecodeOptions::default() };
        let result = decode(&params, &prompt(), 8, &options).unwrap();
        let stats = result.cache_stats.unwrap();
        assert_eq!(stats.initial_fill, 14);
        // Steps run at t = 6..1; ordinals 1.. see t = 5,4,3,2,1; prompt and
        // periodic refreshes fire at t = 4 and t = 2.
        assert_eq!(stats.prompt_refreshes, 12);
        assert_eq!(stats.periodic_response_refreshes, 16);
        assert_eq!(stats.shift_response_refreshes, 0);
    }

    #[test]
    fn concurrent_decodes_agree_with_serial() {
        let params = init_model(&small_config(41)).unwrap();
        let serial = decode(&params, &prompt(), 8, &DecodeOptions::default()).unwrap();
        let shared = std::sync::Arc::new(params);
        let handles: Vec<_> = (0..2)
            .map(|_| {
                let p = shared.clone();
                std::thread::spawn(move || {
                    decode(&p, &prompt(), 8, &DecodeOptions::default()).unwrap().tokens
                })
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), serial.tokens);
        }
    }
}
