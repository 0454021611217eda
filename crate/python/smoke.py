"""Smoke test for the compiled extension: build with `maturin develop` (or
install the wheel) from crates/python, then run this file."""

import tempfile
from pathlib import Path

import ssm_peft


def main():
    pct = ssm_peft.count_params("mamba-1.4b", "state_offset_h")["percent"]
    assert abs(pct - 0.2287) < 0.01, pct
    flops = ssm_peft.estimate_flops("mamba-130m", "full_all", 128)
    assert abs(flops["base_macs"] / 1e9 - 16.45) / 16.45 < 0.15

    report = ssm_peft.verify(0)
    assert report["passed"], report

    model = ssm_peft.Model.toy(8, 2, 4, 16, seed=1)
    adapted = model.with_adapter("state_offset_h")
    assert adapted.trainable_count == 2 * 16 * 4
    tokens = [4, 9, 1, 15, 7, 2]
    # zero offsets leave the backbone's logits untouched
    assert adapted.forward(tokens) == model.forward(tokens)

    spec = {"kind": {"type": "classification", "rule": "majority_token"}, "seq_len": 6, "vocab": 16}
    train = ssm_peft.dataset(spec, 0, 32)
    val = ssm_peft.dataset(spec, 1000, 16)
    config = {"lr": 0.01, "epochs": 2, "batch_size": 8, "seed": 0}
    trained, metrics = ssm_peft.train(adapted, "state_offset_h", train, val, config)
    assert metrics["best_epoch"] <= 2 and len(metrics["epochs"]) == 2
    assert trained.parameter("layers.0.in_proj") == model.parameter("layers.0.in_proj")

    with tempfile.TemporaryDirectory() as tmp:
        path = str(Path(tmp) / "m.ckpt")
        trained.save(path)
        back = ssm_peft.Model.load(path)
        assert back.forward(tokens) == trained.forward(tokens)

    try:
        ssm_peft.count_params("mamba-9b", "lora")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown config accepted")

    print("smoke ok:", adapted, f"best val accuracy {metrics['best_val_accuracy']:.3f}")


if __name__ == "__main__":
    main()
