use ssm_peft::adapters::{apply_adapter, AdapterSpec, Method};
use ssm_peft::analysis::ArchConfig;
use ssm_peft::error::Error;
use ssm_peft::model::{MambaModel, Trainable};
use ssm_peft::tasks::{ClassRule, TaskSpec};
use ssm_peft::trainer::{evaluate, grid_search, probe_loss, train, TaskData, TrainConfig};

fn arch() -> ArchConfig {
    ArchConfig::toy(8, 2, 4, 16)
}

fn data() -> TaskData {
    let spec = TaskSpec::classification(6, ClassRule::MajorityToken, 16);
    TaskData {
        train: spec.dataset(0, 24).unwrap(),
        val: spec.dataset(1000, 12).unwrap(),
    }
}

fn cfg(epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::new(1e-2, epochs, 4, 3);
    c.early_stopping = false;
    c
}

#[test]
fn parameters_outside_the_mask_are_bit_identical() {
    let base = MambaModel::init(&arch(), 1).unwrap();
    for spec in [
        AdapterSpec::default_for(Method::StateOffsetH),
        AdapterSpec::lora(1),
        AdapterSpec::sdt(0.5, 0.5),
        AdapterSpec::default_for(Method::Bitfit),
    ] {
        let mut m = apply_adapter(&base, &spec, 1).unwrap();
        let before = m.clone();
        train(&mut m, &spec, &data(), &cfg(2)).unwrap();
        for (name, p) in m.params.iter() {
            let old = before.params.get(name).unwrap();
            match &p.trainable {
                Trainable::Frozen => assert!(p.tensor.bit_eq(&old.tensor), "{name} moved under {}", spec.method),
                Trainable::Masked(mask) => {
                    for (i, &keep) in mask.iter().enumerate() {
                        if !keep {
                            assert_eq!(p.tensor.data()[i].to_bits(), old.tensor.data()[i].to_bits(), "{name}[{i}]");
                        }
                    }
                }
                Trainable::Full => {}
            }
        }
    }
}

#[test]
fn same_seed_same_curve() {
    let base = MambaModel::init(&arch(), 2).unwrap();
    let spec = AdapterSpec::default_for(Method::FullS6);
    let run = || {
        let mut m = apply_adapter(&base, &spec, 2).unwrap();
        serde_json::to_string(&train(&mut m, &spec, &data(), &cfg(3)).unwrap()).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn nothing_trainable_gives_flat_metrics() {
    let mut m = MambaModel::init(&arch(), 3).unwrap();
    m.params.freeze_all();
    let r = train(&mut m, &AdapterSpec::default_for(Method::FullAll), &data(), &cfg(3)).unwrap();
    assert_eq!(r.trainable, 0);
    let first = &r.epochs[0];
    for e in &r.epochs {
        assert_eq!(e.val_loss, first.val_loss);
        assert_eq!(e.val_accuracy, first.val_accuracy);
        // same per-example losses, summed in a different shuffle order
        assert!((e.train_loss - first.train_loss).abs() <= 1e-12 * first.train_loss.abs());
    }
}

#[test]
fn best_epoch_holds_the_best_validation_accuracy() {
    let base = MambaModel::init(&arch(), 4).unwrap();
    let spec = AdapterSpec::default_for(Method::FullAll);
    let mut m = apply_adapter(&base, &spec, 4).unwrap();
    let d = data();
    let r = train(&mut m, &spec, &d, &cfg(4)).unwrap();
    assert!(r.best_epoch >= 1 && r.best_epoch <= 4);
    let best = r.epochs.iter().map(|e| e.val_accuracy).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(r.best_val_accuracy, best);
    assert_eq!(r.epochs[r.best_epoch - 1].val_accuracy, best);
    // the returned model is the best-epoch checkpoint
    assert_eq!(evaluate(&m, &d.val).unwrap().accuracy, best);
}

#[test]
fn early_stopping_on_plateau() {
    let mut m = MambaModel::init(&arch(), 3).unwrap();
    m.params.freeze_all();
    let mut c = cfg(20);
    c.early_stopping = true;
    c.patience = 2;
    let r = train(&mut m, &AdapterSpec::default_for(Method::FullAll), &data(), &c).unwrap();
    assert!(r.stopped_early);
    assert_eq!(r.epochs.len(), 3);
}

#[test]
fn grid_of_one_returns_it() {
    let base = MambaModel::init(&arch(), 5).unwrap();
    let spec = AdapterSpec::default_for(Method::StateOffsetH);
    let lr = grid_search(|| apply_adapter(&base, &spec, 5), &spec, &data(), &[3e-3], 8, &cfg(1)).unwrap();
    assert_eq!(lr, 3e-3);
}

#[test]
fn diverging_candidates_are_skipped() {
    let base = MambaModel::init(&arch(), 5).unwrap();
    let spec = AdapterSpec::default_for(Method::FullAll);
    let f = || apply_adapter(&base, &spec, 5);
    assert!(probe_loss(&f, &spec, &data(), 1e300, &cfg(1)).map_or(true, |l| !l.is_finite()));
    let lr = grid_search(f, &spec, &data(), &[1e300, 1e-2], 8, &cfg(1)).unwrap();
    assert_eq!(lr, 1e-2);
    let err = grid_search(f, &spec, &data(), &[1e300, 1e301], 8, &cfg(1)).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)));
    assert!(err.to_string().contains("1e300"));
}

#[test]
fn grid_winner_has_the_lowest_replayed_probe_loss() {
    let base = MambaModel::init(&arch(), 6).unwrap();
    let spec = AdapterSpec::default_for(Method::StateOffsetY);
    let f = || apply_adapter(&base, &spec, 6);
    let grid = [1e-1, 3e-2, 1e-2, 1e-3];
    let c = cfg(1);
    let d = data();
    let chosen = grid_search(f, &spec, &d, &grid, 8, &c).unwrap();
    let probe = TaskData {
        train: d.train[..8].to_vec(),
        val: Vec::new(),
    };
    let losses: Vec<f64> = grid.iter().map(|&lr| probe_loss(&f, &spec, &probe, lr, &c).unwrap()).collect();
    let best = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let at = grid.iter().position(|&g| g == chosen).unwrap();
    assert_eq!(losses[at], best);
}

#[test]
fn empty_data_is_rejected() {
    let mut m = MambaModel::init(&arch(), 3).unwrap();
    let spec = AdapterSpec::default_for(Method::FullAll);
    assert!(train(&mut m, &spec, &TaskData::default(), &cfg(1)).is_err());
}
