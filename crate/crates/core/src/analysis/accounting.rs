use serde::{Deserialize, Serialize};

use super::ArchConfig;
use crate::adapters::{lora_targets, AdapterSpec, Method, ParamReport};
use crate::error::{Error, Result};

/// Backbone entries of one block, by field.
pub fn layer_param_counts(arch: &ArchConfig) -> Vec<(&'static str, usize)> {
    let (dm, di, h, r, k) = (arch.d_model, arch.d_inner(), arch.d_state, arch.dt_rank, arch.conv_width);
    let mut v = vec![
        ("norm", dm),
        ("in_proj", 2 * di * dm),
        ("conv_weight", di * k),
    ];
    if arch.conv_bias {
        v.push(("conv_bias", di));
    }
    v.extend([
        ("a_log", di * h),
        ("w_b", h * di),
        ("w_c", h * di),
        ("w_dt_in", r * di),
        ("w_dt", di * r),
        ("b_dt", di),
        ("skip_d", di),
        ("out_proj", dm * di),
    ]);
    v
}

/// Entries of the assembled backbone: blocks, embedding, final norm and an
/// untied head if present.
pub fn backbone_params(arch: &ArchConfig) -> usize {
    let per_layer: usize = layer_param_counts(arch).iter().map(|p| p.1).sum();
    let head = if arch.tie_embeddings { 0 } else { arch.vocab * arch.d_model };
    arch.n_layer * per_layer + arch.vocab * arch.d_model + arch.d_model + head
}

fn sum_fields(arch: &ArchConfig, fields: &[&str]) -> usize {
    layer_param_counts(arch)
        .iter()
        .filter(|(f, _)| fields.contains(f))
        .map(|p| p.1)
        .sum::<usize>()
        * arch.n_layer
}

/// Returns `(trainable, added)`: how many entries train and how many the
/// adapter adds on top of the backbone.
fn adapter_counts(arch: &ArchConfig, spec: &AdapterSpec) -> Result<(usize, usize)> {
    spec.validate()?;
    let (n, dm, di, h, r_dt) = (arch.n_layer, arch.d_model, arch.d_inner(), arch.d_state, arch.dt_rank);
    let added = |count: usize| Ok((count, count));
    match spec.method {
        Method::FullAll => Ok((backbone_params(arch), 0)),
        Method::FullS6 => Ok((sum_fields(arch, &crate::adapters::S6_FIELDS), 0)),
        Method::Bitfit => Ok((sum_fields(arch, &crate::adapters::BIAS_FIELDS), 0)),
        Method::Sdt => {
            let (c, s) = spec.sdt_keep_fraction.unwrap_or((1.0, 1.0));
            let keep = |f: f64, total: usize| ((f * total as f64).round() as usize).clamp(1, total);
            Ok((n * 3 * keep(c, di) * keep(s, h), 0))
        }
        Method::StateOffsetH | Method::InitialState => added(n * di * h),
        Method::StateOffsetY => added(n * di),
        Method::StateOffsetHLowrank => {
            let r = spec.rank_r.unwrap_or_default();
            if r > di.min(h) {
                return Err(Error::contract(format!("offset rank {r} exceeds min({di}, {h})")));
            }
            added(n * r * (di + h))
        }
        Method::PromptTuning => added(spec.virtual_tokens_v.unwrap_or_default() * dm),
        Method::PrefixTuning => added(n * spec.virtual_tokens_v.unwrap_or_default() * di),
        Method::Lora => {
            let r = spec.rank_r.unwrap_or_default();
            let mut per_layer = 0;
            for (field, rows, cols) in lora_targets(di, h, r_dt) {
                if r > rows.min(cols) {
                    return Err(Error::contract(format!("LoRA rank {r} exceeds min({rows}, {cols}) of {field}")));
                }
                per_layer += r * (rows + cols);
            }
            added(n * per_layer)
        }
        Method::AdditionalScan => added(n * 3 * di * spec.extra_states.unwrap_or_default()),
    }
}

/// Trainable count, total count and percentage, computed from shapes alone.
/// Adapter-added parameters count toward the total.
pub fn count_params(arch: &ArchConfig, spec: &AdapterSpec) -> Result<ParamReport> {
    let (trainable, added) = adapter_counts(arch, spec)?;
    Ok(ParamReport::new(trainable, backbone_params(arch) + added))
}

/// Multiply-accumulate counts for a sequence of `seq_len` tokens.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub seq_len: usize,
    pub base_macs: u64,
    pub adapter_extra_macs: u64,
    pub base_macs_per_token: f64,
    pub adapter_extra_macs_per_token: f64,
    /// `adapter_extra_macs / base_macs`
    pub relative_overhead: f64,
}

/// Backbone MACs for one token: projections, convolution, scan update and
/// readout in every block, plus the output head.
pub fn base_macs_per_token(arch: &ArchConfig) -> u64 {
    let (dm, di, h, r, k) = (arch.d_model, arch.d_inner(), arch.d_state, arch.dt_rank, arch.conv_width);
    let per_layer = dm * 2 * di // in_proj
        + di * k // depthwise conv
        + di * (r + 2 * h) // dt, B, C projections
        + r * di // dt up-projection
        + 2 * di * h // state update and readout
        + di * dm; // out_proj
    (arch.n_layer * per_layer + dm * arch.vocab) as u64
}

/// Scan-side MACs of one position inside a block (everything after the conv).
fn ssm_position_macs(arch: &ArchConfig) -> u64 {
    let (di, h, r) = (arch.d_inner(), arch.d_state, arch.dt_rank);
    (di * (r + 2 * h) + r * di + 2 * di * h) as u64
}

/// Extra MACs an adapter adds for a sequence of `seq_len` tokens.
///
/// Per-token costs: state offset `h` adds `D·H` per block, offset `y` adds
/// `D`, unmerged LoRA adds `r·(m+n)` per wrapped matrix, extra scan states
/// add their projection, update and readout. Per-sequence costs: virtual
/// tokens, the low-rank offset product, the initial-state decay.
pub fn adapter_extra_macs(arch: &ArchConfig, spec: &AdapterSpec, seq_len: usize) -> Result<u64> {
    spec.validate()?;
    let (n, di, h) = (arch.n_layer as u64, arch.d_inner() as u64, arch.d_state as u64);
    let l = seq_len as u64;
    Ok(match spec.method {
        Method::FullAll | Method::FullS6 | Method::Bitfit | Method::Sdt => 0,
        Method::StateOffsetH => l * n * di * h,
        Method::StateOffsetY => l * n * di,
        Method::StateOffsetHLowrank => {
            let r = spec.rank_r.unwrap_or_default() as u64;
            n * di * r * h + l * n * di * h
        }
        Method::InitialState => n * di * h,
        Method::PromptTuning => spec.virtual_tokens_v.unwrap_or_default() as u64 * base_macs_per_token(arch),
        Method::PrefixTuning => spec.virtual_tokens_v.unwrap_or_default() as u64 * n * ssm_position_macs(arch),
        Method::Lora => {
            let r = spec.rank_r.unwrap_or_default();
            let per_token: usize = lora_targets(arch.d_inner(), arch.d_state, arch.dt_rank)
                .iter()
                .map(|&(_, rows, cols)| r * (rows + cols))
                .sum();
            l * n * per_token as u64
        }
        Method::AdditionalScan => {
            let e = spec.extra_states.unwrap_or_default() as u64;
            // B and C rows, state update and readout
            l * n * 4 * di * e
        }
    })
}

pub fn estimate_flops(arch: &ArchConfig, spec: &AdapterSpec, seq_len: usize) -> Result<FlopReport> {
    if seq_len == 0 {
        return Err(Error::contract("sequence length must be at least 1"));
    }
    let base = base_macs_per_token(arch) * seq_len as u64;
    let extra = adapter_extra_macs(arch, spec, seq_len)?;
    Ok(FlopReport {
        seq_len,
        base_macs: base,
        adapter_extra_macs: extra,
        base_macs_per_token: base as f64 / seq_len as f64,
        adapter_extra_macs_per_token: extra as f64 / seq_len as f64,
        relative_overhead: extra as f64 / base as f64,
    })
}
