"""Smoke tests for the Python bindings: core numerics plus one tiny
end-to-end extension pipeline."""

import math

import pytest

import pele


def tiny_config():
    cfg = pele.default_config()
    cfg["model"].update(
        {
            "n_enc_layers": 3,
            "n_dec_layers": 1,
            "d_model": 16,
            "n_heads": 2,
            "d_ff": 32,
            "d_feat": 8,
            "n_lp_split": 1,
            "vocab_size": 2 + 3 * 6,
            "max_vocab": 64,
        }
    )
    cfg["data"].update(
        {
            "n_base_langs": 3,
            "base_train": 10,
            "base_dev": 2,
            "base_test": 5,
            "new_train_sizes": [10, 10],
            "new_dev": 2,
            "new_test": 5,
        }
    )
    cfg["data"]["synth"].update({"d_feat": 8, "tokens_per_lang": 6})
    cfg["train"].update({"base_steps": 40, "extend_steps": 30, "batch_size": 4})
    cfg["n_new_langs"] = 2
    cfg["lid"]["source_layer"] = 1
    cfg["seed"] = 3
    return cfg


def test_version():
    assert pele.__version__


def test_edit_distance_and_error_rate():
    counts = pele.edit_distance([1, 2, 3], [1, 9, 3])
    assert counts["sub"] == 1 and counts["total"] == 1
    assert pele.error_rate([([1, 2, 3], [1, 2, 3])]) == 0.0
    assert pele.error_rate([([1], [1, 2, 3])]) == pytest.approx(2.0)


def test_ctc_matches_brute_force():
    # Uniform two-frame distribution over one token plus blank.
    row = [math.log(0.5), math.log(0.5)]
    log_probs = [row, row]
    expected = -math.log(3.0 / 4.0)
    assert pele.ctc_nll(log_probs, [0]) == pytest.approx(expected, abs=1e-12)
    assert pele.ctc_brute_force(log_probs, [0]) == pytest.approx(expected, abs=1e-12)
    # Infeasible target is flagged with +inf, not clamped.
    assert math.isinf(pele.ctc_nll(log_probs, [0, 0]))


def test_collapse_and_greedy_decode():
    assert pele.ctc_collapse([1, 1, 4, 1], 4) == [1, 1]
    peaked = [
        [0.0, -9.0, -9.0],
        [0.0, -9.0, -9.0],
        [-9.0, -9.0, 0.0],
        [-9.0, 0.0, -9.0],
    ]
    assert pele.greedy_ctc_decode(peaked) == [0, 1]


def test_pipeline_round_trip(tmp_path):
    cfg = tiny_config()
    out = str(tmp_path / "run")

    path, checksum = pele.train_base(cfg, out)
    assert path.endswith("base.model")
    assert checksum.startswith("0x")

    bundles = pele.extend(cfg, out)
    assert len(bundles) == 2

    report = pele.evaluate(cfg, out)
    langs = {r["lang"]: r for r in report["per_language"]}
    assert len(langs) == 5
    # The frozen base plus ground-truth routing cannot forget.
    for r in report["per_language"]:
        if r["base_language"]:
            assert r["forgetting_delta"] == 0.0
        else:
            assert r["inc_params"] > 0

    # Determinism: evaluating again yields the identical report.
    again = pele.evaluate(cfg, out)
    assert again == report


def test_raw_baseline(tmp_path):
    cfg = tiny_config()
    out = str(tmp_path / "run")
    pele.train_base(cfg, out)
    report = pele.run_baseline(cfg, out, "raw")
    for r in report["per_language"]:
        if not r["base_language"]:
            assert r["error"] >= 0.9
