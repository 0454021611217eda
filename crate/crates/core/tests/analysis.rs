use ssm_peft::adapters::{apply_adapter, select_sdt_mask, trainable_parameter_report, AdapterSpec, Method};
use ssm_peft::analysis::{
    builtin_config, builtin_configs, compare_methods, count_params, estimate_flops, find_config, load_config_overrides,
    ArchConfig,
};
use ssm_peft::model::MambaModel;

fn tiny() -> ArchConfig {
    ArchConfig::toy(8, 2, 4, 16)
}

fn allocated(spec: &AdapterSpec) -> ssm_peft::adapters::ParamReport {
    let base = MambaModel::init(&tiny(), 5).unwrap();
    let mut m = apply_adapter(&base, spec, 5).unwrap();
    if spec.method == Method::Sdt {
        let warm = vec![(vec![1, 2, 3, 4, 5], vec![(4, 7)])];
        select_sdt_mask(&mut m, &warm, spec.sdt_keep_fraction.unwrap()).unwrap();
    }
    trainable_parameter_report(&m)
}

#[test]
fn symbolic_count_matches_allocated_model_for_every_method() {
    let arch = tiny();
    for m in Method::ALL {
        let spec = match m {
            Method::Lora => AdapterSpec::lora(1),
            Method::StateOffsetHLowrank => AdapterSpec::lowrank_offset(2),
            Method::PromptTuning => AdapterSpec::prompt(3),
            Method::PrefixTuning => AdapterSpec::prefix(3),
            _ => AdapterSpec::default_for(m),
        };
        let sym = count_params(&arch, &spec).unwrap();
        let got = allocated(&spec);
        assert_eq!((sym.trainable, sym.total), (got.trainable, got.total), "{m}");
    }
}

#[test]
fn symbolic_count_matches_without_conv_bias_or_tying() {
    let mut arch = tiny();
    arch.conv_bias = false;
    arch.tie_embeddings = false;
    for m in [Method::Bitfit, Method::FullAll, Method::FullS6, Method::StateOffsetH] {
        let spec = AdapterSpec::default_for(m);
        let base = MambaModel::init(&arch, 2).unwrap();
        let got = trainable_parameter_report(&apply_adapter(&base, &spec, 2).unwrap());
        let sym = count_params(&arch, &spec).unwrap();
        assert_eq!((sym.trainable, sym.total), (got.trainable, got.total), "{m}");
    }
}

#[test]
fn assembled_totals_near_nominal_sizes() {
    for (name, nominal) in [
        ("mamba-130m", 130e6),
        ("mamba-370m", 370e6),
        ("mamba-790m", 790e6),
        ("mamba-1.4b", 1.4e9),
        ("mamba-2.8b", 2.8e9),
    ] {
        let total = count_params(&builtin_config(name).unwrap(), &AdapterSpec::default_for(Method::FullAll))
            .unwrap()
            .total as f64;
        let rel = (total - nominal).abs() / nominal;
        println!("{name}: {total} ({:.2}% off nominal)", 100.0 * rel);
        assert!(rel < 0.025, "{name} total {total}");
    }
}

#[test]
fn table_rows_for_state_methods() {
    let arch = builtin_config("mamba-1.4b").unwrap();
    let specs: Vec<_> = Method::ALL.iter().map(|&m| AdapterSpec::default_for(m)).collect();
    let t = compare_methods(&arch, &specs, 128).unwrap();
    let pct = |m: &str| t.rows.iter().find(|r| r.method == m).unwrap().params_percent;
    assert!((pct("state_offset_h") - 0.2287).abs() <= 0.01);
    assert!((pct("initial_state") - 0.2287).abs() <= 0.01);
    assert!((pct("state_offset_y") - 0.0143).abs() <= 0.01);
    assert!((pct("lora") - 0.4644).abs() <= 0.01);
    assert!((pct("bitfit") - 0.0287).abs() <= 0.01);
    assert!((pct("additional_scan") - 0.3427).abs() <= 0.01);
    assert_eq!(pct("full_all"), 100.0);
}

#[test]
fn doubling_length_doubles_per_token_costs() {
    for arch in builtin_configs() {
        for m in [Method::StateOffsetH, Method::StateOffsetY, Method::Lora, Method::AdditionalScan, Method::FullAll] {
            let spec = AdapterSpec::default_for(m);
            let a = estimate_flops(&arch, &spec, 64).unwrap();
            let b = estimate_flops(&arch, &spec, 128).unwrap();
            assert_eq!(b.base_macs, 2 * a.base_macs);
            assert_eq!(b.adapter_extra_macs, 2 * a.adapter_extra_macs, "{m}");
        }
    }
}

#[test]
fn overhead_is_non_negative_and_ordered() {
    for arch in builtin_configs() {
        let f = |m| estimate_flops(&arch, &AdapterSpec::default_for(m), 512).unwrap();
        for m in Method::ALL {
            assert!(f(m).relative_overhead >= 0.0);
        }
        assert!(f(Method::StateOffsetY).relative_overhead < f(Method::StateOffsetH).relative_overhead);
        assert!(f(Method::Lora).adapter_extra_macs > f(Method::StateOffsetH).adapter_extra_macs);
    }
}

#[test]
fn registry_lookup_and_overrides() {
    assert!(builtin_config("mamba-9b").is_err());
    let extra = r#"[{"name":"mamba-130m","d_model":512,"n_layer":2,"d_state":8,"expand":2,"dt_rank":32,"vocab":100,"conv_width":4},
                    {"name":"tiny","d_model":8,"n_layer":1,"d_state":4,"expand":2,"dt_rank":1,"vocab":16,"conv_width":4}]"#;
    let reg = load_config_overrides(extra).unwrap();
    assert_eq!(find_config(&reg, "mamba-130m").unwrap().d_model, 512);
    assert_eq!(find_config(&reg, "tiny").unwrap().vocab, 16);
    assert_eq!(find_config(&reg, "mamba-2.8b").unwrap().d_model, 2560);
    assert!(load_config_overrides(r#"[{"name":"x"}]"#).is_err());
}
