//! Parameter-efficient fine-tuning methods: which parameters train and what
//! each one adds to the forward pass.

mod sdt;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::model::{layer_name, MambaModel, Trainable};
use crate::ssm::SsmLayerParams;

pub use sdt::{sdt_select, select_sdt_mask, SdtSelection};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FullAll,
    FullS6,
    StateOffsetH,
    StateOffsetY,
    StateOffsetHLowrank,
    InitialState,
    PromptTuning,
    PrefixTuning,
    Bitfit,
    Lora,
    AdditionalScan,
    Sdt,
}

impl Method {
    pub const ALL: [Method; 12] = [
        Method::FullAll,
        Method::FullS6,
        Method::StateOffsetH,
        Method::StateOffsetY,
        Method::StateOffsetHLowrank,
        Method::InitialState,
        Method::PromptTuning,
        Method::PrefixTuning,
        Method::Bitfit,
        Method::Lora,
        Method::AdditionalScan,
        Method::Sdt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::FullAll => "full_all",
            Method::FullS6 => "full_s6",
            Method::StateOffsetH => "state_offset_h",
            Method::StateOffsetY => "state_offset_y",
            Method::StateOffsetHLowrank => "state_offset_h_lowrank",
            Method::InitialState => "initial_state",
            Method::PromptTuning => "prompt_tuning",
            Method::PrefixTuning => "prefix_tuning",
            Method::Bitfit => "bitfit",
            Method::Lora => "lora",
            Method::AdditionalScan => "additional_scan",
            Method::Sdt => "sdt",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Lookup {
                kind: "adapter method",
                name: s.to_string(),
            })
    }
}

/// One PEFT method plus exactly the hyperparameters it needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_r: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub virtual_tokens_v: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra_states: Option<usize>,
    /// (channel fraction, state fraction) kept trainable
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sdt_keep_fraction: Option<(f64, f64)>,
}

impl AdapterSpec {
    fn bare(method: Method) -> Self {
        AdapterSpec {
            method,
            rank_r: None,
            virtual_tokens_v: None,
            extra_states: None,
            sdt_keep_fraction: None,
        }
    }

    /// Spec for a method without hyperparameters.
    pub fn plain(method: Method) -> Result<Self> {
        let s = Self::bare(method);
        s.validate()?;
        Ok(s)
    }

    pub fn lora(rank: usize) -> Self {
        AdapterSpec {
            rank_r: Some(rank),
            ..Self::bare(Method::Lora)
        }
    }

    pub fn lowrank_offset(rank: usize) -> Self {
        AdapterSpec {
            rank_r: Some(rank),
            ..Self::bare(Method::StateOffsetHLowrank)
        }
    }

    pub fn prompt(v: usize) -> Self {
        AdapterSpec {
            virtual_tokens_v: Some(v),
            ..Self::bare(Method::PromptTuning)
        }
    }

    pub fn prefix(v: usize) -> Self {
        AdapterSpec {
            virtual_tokens_v: Some(v),
            ..Self::bare(Method::PrefixTuning)
        }
    }

    pub fn additional_scan(extra: usize) -> Self {
        AdapterSpec {
            extra_states: Some(extra),
            ..Self::bare(Method::AdditionalScan)
        }
    }

    pub fn sdt(channels: f64, states: f64) -> Self {
        AdapterSpec {
            sdt_keep_fraction: Some((channels, states)),
            ..Self::bare(Method::Sdt)
        }
    }

    /// Hyperparameters used for the published Mamba runs: LoRA rank 8,
    /// 64 virtual tokens, 8 extra states, SDT keeping half the channels and a
    /// quarter of the states, low-rank offsets of rank 4.
    pub fn default_for(method: Method) -> Self {
        match method {
            Method::Lora => Self::lora(8),
            Method::StateOffsetHLowrank => Self::lowrank_offset(4),
            Method::PromptTuning => Self::prompt(64),
            Method::PrefixTuning => Self::prefix(64),
            Method::AdditionalScan => Self::additional_scan(8),
            Method::Sdt => Self::sdt(0.5, 0.25),
            m => Self::bare(m),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let needs = (
            matches!(self.method, Method::Lora | Method::StateOffsetHLowrank),
            matches!(self.method, Method::PromptTuning | Method::PrefixTuning),
            self.method == Method::AdditionalScan,
            self.method == Method::Sdt,
        );
        let has = (
            self.rank_r.is_some(),
            self.virtual_tokens_v.is_some(),
            self.extra_states.is_some(),
            self.sdt_keep_fraction.is_some(),
        );
        let fields = ["rank_r", "virtual_tokens_v", "extra_states", "sdt_keep_fraction"];
        let pairs = [(needs.0, has.0), (needs.1, has.1), (needs.2, has.2), (needs.3, has.3)];
        for (field, (need, got)) in fields.iter().zip(pairs) {
            if need != got {
                let what = if need { "requires" } else { "does not take" };
                return Err(Error::Config {
                    path: format!("adapter.{field}"),
                    message: format!("method {} {what} {field}", self.method),
                });
            }
        }
        for (field, v) in [
            ("rank_r", self.rank_r),
            ("virtual_tokens_v", self.virtual_tokens_v),
            ("extra_states", self.extra_states),
        ] {
            if v == Some(0) {
                return Err(Error::Config {
                    path: format!("adapter.{field}"),
                    message: "must be a positive integer".into(),
                });
            }
        }
        if let Some((c, s)) = self.sdt_keep_fraction {
            if !(c > 0.0 && c <= 1.0 && s > 0.0 && s <= 1.0) {
                return Err(Error::Config {
                    path: "adapter.sdt_keep_fraction".into(),
                    message: format!("fractions must lie in (0, 1], got ({c}, {s})"),
                });
            }
        }
        Ok(())
    }
}

/// Parameters of the selective-scan sublayer, per block.
pub const S6_FIELDS: [&str; 9] = [
    "conv_weight",
    "conv_bias",
    "a_log",
    "w_b",
    "w_c",
    "w_dt_in",
    "w_dt",
    "b_dt",
    "skip_d",
];

/// Bias arrays touched by BitFit.
pub const BIAS_FIELDS: [&str; 2] = ["conv_bias", "b_dt"];

/// Weights wrapped by LoRA: `(field, rows, cols)` as a function of `(D, H, R)`.
pub fn lora_targets(d: usize, h: usize, r: usize) -> [(&'static str, usize, usize); 4] {
    [("w_b", h, d), ("w_c", h, d), ("w_dt", d, r), ("w_dt_in", r, d)]
}

/// Readout offset used by State-offset Tuning (h): `ŷ[d] = y[d] + Σ_n C[n]·h'[d,n]`.
pub fn apply_state_offset_h(y_t: &[f64], c_t: &[f64], h_prime: &Tensor) -> Result<Vec<f64>> {
    let h = c_t.len();
    if h_prime.shape() != [y_t.len(), h] {
        return Err(Error::dim(
            "state_offset_h",
            format!("y has {} channels, C has {h} states, h' is {:?}", y_t.len(), h_prime.shape()),
        ));
    }
    Ok(y_t
        .iter()
        .zip(h_prime.data().chunks(h.max(1)))
        .map(|(y, row)| y + row.iter().zip(c_t).map(|(o, c)| o * c).sum::<f64>())
        .collect())
}

/// `ŷ = y + y'`.
pub fn apply_state_offset_y(y_t: &[f64], y_prime: &[f64]) -> Result<Vec<f64>> {
    if y_t.len() != y_prime.len() {
        return Err(Error::dim("state_offset_y", format!("{} vs {}", y_t.len(), y_prime.len())));
    }
    Ok(y_t.iter().zip(y_prime).map(|(a, b)| a + b).collect())
}

/// LoRA factors for an `m×n` weight: `U` zero, `Vt ~ N(0, 1/n)`.
#[derive(Clone, Debug)]
pub struct LoraPair {
    /// `[m,r]`
    pub u: Tensor,
    /// `[r,n]`
    pub vt: Tensor,
    pub alpha: f64,
}

impl LoraPair {
    pub fn init<R: Rng>(rng: &mut R, m: usize, n: usize, r: usize) -> Result<Self> {
        if r == 0 {
            return Err(Error::contract("LoRA rank must be positive"));
        }
        if r > m.min(n) {
            return Err(Error::contract(format!("LoRA rank {r} exceeds min({m}, {n})")));
        }
        Ok(LoraPair {
            u: Tensor::zeros(&[m, r]),
            vt: normal(rng, &[r, n], (n as f64).powf(-0.5)),
            alpha: r as f64,
        })
    }

    pub fn rank(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn trainable(&self) -> usize {
        self.u.len() + self.vt.len()
    }
}

/// Effective weight `W + (α/r)·U·Vt`.
pub fn apply_lora(w: &Tensor, lora: &LoraPair) -> Result<Tensor> {
    let (m, n, r) = (w.shape()[0], w.shape()[1], lora.rank());
    if lora.u.shape() != [m, r] || lora.vt.shape() != [r, n] {
        return Err(Error::dim(
            "lora",
            format!("W {:?}, U {:?}, Vt {:?}", w.shape(), lora.u.shape(), lora.vt.shape()),
        ));
    }
    let delta = crate::diffmath::kernels::matmul(lora.u.data(), lora.vt.data(), m, r, n);
    let scale = lora.alpha / r as f64;
    let out = w.data().iter().zip(&delta).map(|(a, b)| a + scale * b).collect();
    Tensor::new(&[m, n], out)
}

/// Realized `A` of added scan states.
pub const ADDED_STATE_A: f64 = -100.0;

/// Extra scan states: `a_log [D,n]`, `w_b [n,D]` (small random), `w_c [n,D]` (zero).
pub fn additional_scan_init<R: Rng>(rng: &mut R, d: usize, n_add: usize) -> Result<(Tensor, Tensor, Tensor)> {
    if n_add == 0 {
        return Err(Error::contract("additional scan needs at least one extra state"));
    }
    Ok((
        Tensor::full(&[d, n_add], (-ADDED_STATE_A).ln()),
        normal(rng, &[n_add, d], 0.02),
        Tensor::zeros(&[n_add, d]),
    ))
}

/// `params` with `n_add` extra states appended; returns the extended layer.
pub fn apply_additional_scan<R: Rng>(params: &SsmLayerParams, n_add: usize, rng: &mut R) -> Result<SsmLayerParams> {
    let d = params.a_log.shape()[0];
    let h = params.a_log.shape()[1];
    let (a_new, b_new, c_new) = additional_scan_init(rng, d, n_add)?;
    let mut a_log = Vec::with_capacity(d * (h + n_add));
    for (old, new) in params.a_log.data().chunks(h).zip(a_new.data().chunks(n_add)) {
        a_log.extend_from_slice(old);
        a_log.extend_from_slice(new);
    }
    let stack = |top: &Tensor, bottom: &Tensor| {
        let mut v = top.data().to_vec();
        v.extend_from_slice(bottom.data());
        Tensor::new(&[h + n_add, d], v)
    };
    Ok(SsmLayerParams {
        a_log: Tensor::new(&[d, h + n_add], a_log)?,
        w_b: stack(&params.w_b, &b_new)?,
        w_c: stack(&params.w_c, &c_new)?,
        ..params.clone()
    })
}

fn normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).unwrap();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}

/// A copy of `model` with the backbone frozen and `spec` applied.
///
/// For SDT the scan matrices are left fully trainable; [`select_sdt_mask`]
/// narrows them after a warmup pass.
pub fn apply_adapter(model: &MambaModel, spec: &AdapterSpec, seed: u64) -> Result<MambaModel> {
    spec.validate()?;
    let mut out = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = out.arch.clone();
    let (d, h, r_dt, dm) = (arch.d_inner(), arch.d_state, arch.dt_rank, arch.d_model);
    let store = &mut out.params;
    store.freeze_all();
    let backbone: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.backbone)
        .map(|(n, _)| n.clone())
        .collect();
    let layer_fields = |fields: &[&str]| -> Vec<String> {
        (0..arch.n_layer)
            .flat_map(|i| fields.iter().map(move |f| layer_name(i, f)))
            .collect()
    };

    match spec.method {
        Method::FullAll => {
            for name in &backbone {
                store.set_trainable(name, Trainable::Full)?;
            }
        }
        Method::FullS6 | Method::Sdt => {
            let fields: &[&str] = if spec.method == Method::Sdt {
                &["a_log", "w_b", "w_c"]
            } else {
                &S6_FIELDS
            };
            for name in layer_fields(fields) {
                if store.contains(&name) {
                    store.set_trainable(&name, Trainable::Full)?;
                }
            }
        }
        Method::Bitfit => {
            let mut any = false;
            for name in layer_fields(&BIAS_FIELDS) {
                if store.contains(&name) {
                    store.set_trainable(&name, Trainable::Full)?;
                    any = true;
                }
            }
            if !any {
                log::warn!("bitfit: model has no bias arrays, nothing is trainable");
            }
        }
        Method::StateOffsetH => {
            for i in 0..arch.n_layer {
                store.insert_adapter(layer_name(i, "state_offset_h"), Tensor::zeros(&[d, h]), false);
            }
        }
        Method::StateOffsetY => {
            for i in 0..arch.n_layer {
                store.insert_adapter(layer_name(i, "state_offset_y"), Tensor::zeros(&[d]), false);
            }
        }
        Method::StateOffsetHLowrank => {
            let r = spec.rank_r.unwrap_or_default();
            if r > d.min(h) {
                return Err(Error::contract(format!("offset rank {r} exceeds min({d}, {h})")));
            }
            for i in 0..arch.n_layer {
                store.insert_adapter(layer_name(i, "state_offset_u"), Tensor::zeros(&[d, r]), false);
                let vt = normal(&mut rng, &[r, h], (r as f64).powf(-0.5));
                store.insert_adapter(layer_name(i, "state_offset_vt"), vt, false);
            }
        }
        Method::InitialState => {
            for i in 0..arch.n_layer {
                store.insert_adapter(layer_name(i, "h0"), Tensor::zeros(&[d, h]), false);
            }
        }
        Method::PromptTuning => {
            let v = spec.virtual_tokens_v.unwrap_or_default();
            let emb = store.tensor("embedding")?;
            let mut rows = Vec::with_capacity(v * dm);
            for _ in 0..v {
                rows.extend_from_slice(emb.row(rng.random_range(0..arch.vocab)));
            }
            store.insert_adapter("prompt", Tensor::new(&[v, dm], rows)?, false);
        }
        Method::PrefixTuning => {
            let v = spec.virtual_tokens_v.unwrap_or_default();
            for i in 0..arch.n_layer {
                store.insert_adapter(layer_name(i, "prefix"), normal(&mut rng, &[v, d], 0.02), false);
            }
        }
        Method::Lora => {
            let r = spec.rank_r.unwrap_or_default();
            for i in 0..arch.n_layer {
                for (field, m, n) in lora_targets(d, h, r_dt) {
                    let pair = LoraPair::init(&mut rng, m, n, r)?;
                    store.insert_adapter(layer_name(i, &format!("lora.{field}.u")), pair.u, true);
                    store.insert_adapter(layer_name(i, &format!("lora.{field}.vt")), pair.vt, true);
                }
            }
        }
        Method::AdditionalScan => {
            let n_add = spec.extra_states.unwrap_or_default();
            for i in 0..arch.n_layer {
                let (a, b, c) = additional_scan_init(&mut rng, d, n_add)?;
                store.insert_adapter(layer_name(i, "add_scan.a_log"), a, false);
                store.insert_adapter(layer_name(i, "add_scan.w_b"), b, true);
                store.insert_adapter(layer_name(i, "add_scan.w_c"), c, true);
            }
        }
    }
    Ok(out)
}

/// Trainable and total parameter counts; the total includes parameters an
/// adapter adds on top of the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub trainable: usize,
    pub total: usize,
    pub percent: f64,
}

impl ParamReport {
    pub fn new(trainable: usize, total: usize) -> Self {
        let percent = if total == 0 {
            0.0
        } else {
            100.0 * trainable as f64 / total as f64
        };
        ParamReport {
            trainable,
            total,
            percent,
        }
    }
}

pub fn trainable_parameter_report(model: &MambaModel) -> ParamReport {
    ParamReport::new(model.params.trainable_count(), model.params.total_count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::ArchConfig;

    fn toy() -> MambaModel {
        MambaModel::init(&ArchConfig::toy(8, 2, 4, 16), 3).unwrap()
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert!("adapter".parse::<Method>().is_err());
    }

    #[test]
    fn spec_requires_exact_hyperparameters() {
        for m in Method::ALL {
            AdapterSpec::default_for(m).validate().unwrap();
        }
        let mut bad = AdapterSpec::lora(4);
        bad.virtual_tokens_v = Some(3);
        assert!(bad.validate().is_err());
        assert!(AdapterSpec::plain(Method::Lora).is_err());
        assert!(AdapterSpec::lora(0).validate().is_err());
        assert!(AdapterSpec::sdt(0.0, 0.5).validate().is_err());
        let parsed: AdapterSpec = serde_json::from_str(r#"{"method":"lora","rank_r":8}"#).unwrap();
        assert_eq!(parsed, AdapterSpec::lora(8));
        assert!(serde_json::from_str::<AdapterSpec>(r#"{"method":"lora","rank":8}"#).is_err());
    }

    #[test]
    fn offset_h_with_scalar_state() {
        let h = Tensor::new(&[2, 1], vec![3.0, 3.0]).unwrap();
        let out = apply_state_offset_h(&[1.0, -1.0], &[2.0], &h).unwrap();
        assert_eq!(out, vec![7.0, 5.0]);
        let zero = Tensor::zeros(&[2, 1]);
        assert_eq!(apply_state_offset_h(&[1.0, -1.0], &[2.0], &zero).unwrap(), vec![1.0, -1.0]);
        assert_eq!(apply_state_offset_y(&[1.0], &[0.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn lora_starts_neutral_and_full_rank_spans_any_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = normal(&mut rng, &[2, 2], 1.0);
        let pair = LoraPair::init(&mut rng, 2, 2, 2).unwrap();
        assert!(apply_lora(&w, &pair).unwrap().bit_eq(&w));
        // any 2x2 delta: U = delta, Vt = I
        let target = Tensor::new(&[2, 2], vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        let full = LoraPair {
            u: target.clone(),
            vt: Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            alpha: 2.0,
        };
        let eff = apply_lora(&w, &full).unwrap();
        let expect: Vec<f64> = w.data().iter().zip(target.data()).map(|(a, b)| a + b).collect();
        assert_eq!(eff.data(), expect.as_slice());
        assert!(LoraPair::init(&mut rng, 2, 2, 0).is_err());
        assert_eq!(LoraPair::init(&mut rng, 16, 4, 8).map(|_| ()).unwrap_err().to_string().contains("exceeds"), true);
    }

    #[test]
    fn lora_count_for_w_b() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (h, d) = (16, 64);
        assert_eq!(LoraPair::init(&mut rng, h, d, 8).unwrap().trainable(), 8 * (h + d));
    }

    #[test]
    fn additional_scan_shapes_and_neutral_readout() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = SsmLayerParams::random(&mut rng, 3, 4, 1, 0.3);
        let ext = apply_additional_scan(&p, 2, &mut rng).unwrap();
        assert_eq!(ext.a_log.shape(), &[3, 6]);
        assert_eq!(ext.w_b.shape(), &[6, 3]);
        let x = Tensor::new(&[4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let a = crate::ssm::s6_scan(&p, &x, None).unwrap();
        let b = crate::ssm::s6_scan(&ext, &x, None).unwrap();
        assert!(a.y_seq.max_abs_diff(&b.y_seq) <= 1e-12);
    }

    #[test]
    fn bitfit_counts_dt_bias_only_without_conv_bias() {
        let mut arch = ArchConfig::toy(8, 2, 4, 16);
        arch.conv_bias = false;
        let m = MambaModel::init(&arch, 0).unwrap();
        let a = apply_adapter(&m, &AdapterSpec::plain(Method::Bitfit).unwrap(), 0).unwrap();
        assert_eq!(trainable_parameter_report(&a).trainable, arch.n_layer * arch.d_inner());
    }

    #[test]
    fn full_all_is_one_hundred_percent() {
        let a = apply_adapter(&toy(), &AdapterSpec::plain(Method::FullAll).unwrap(), 0).unwrap();
        assert_eq!(trainable_parameter_report(&a).percent, 100.0);
    }

    #[test]
    fn adapters_leave_forward_unchanged_at_init() {
        let m = toy();
        let tokens = [1, 5, 2, 9, 3, 3];
        let base = m.forward(&tokens).unwrap();
        for method in Method::ALL {
            if matches!(method, Method::PromptTuning | Method::PrefixTuning) {
                continue;
            }
            let spec = match method {
                Method::Lora => AdapterSpec::lora(1),
                Method::StateOffsetHLowrank => AdapterSpec::lowrank_offset(2),
                _ => AdapterSpec::default_for(method),
            };
            let a = apply_adapter(&m, &spec, 7).unwrap();
            let out = a.forward(&tokens).unwrap();
            assert!(out.max_abs_diff(&base) <= 1e-12, "{method}: {}", out.max_abs_diff(&base));
        }
    }
}
