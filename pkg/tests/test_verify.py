import numpy as np

from recdevid import verify as V

LAYERS = {"ConvLSTM1D.step", "ConvLSTM1D.forward", "BatchNorm.train", "BatchNorm.infer", "LSTM.forward",
          "LSTM.reverse", "BiLSTM", "attention", "MultiHeadAttention", "LayerNorm", "Dense", "Dense.linear",
          "EncoderBlock"}


def test_every_layer_has_a_gradient_case():
    assert {name for name, _, _ in V.layer_gradient_cases()} == LAYERS


def test_full_suite_passes():
    results = V.run_checks()
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]
    names = {r.name for r in results if r.group == "gradient"}
    for layer in LAYERS:
        assert f"{layer} (float32)" in names and f"{layer} (float64)" in names
    report = V.format_report(results)
    assert report.splitlines()[-1] == f"{len(results)}/{len(results)} checks passed"


def test_group_filter():
    results = V.run_checks(["roundtrip"])
    assert results and {r.group for r in results} == {"roundtrip"}


def test_raising_check_is_reported(monkeypatch):
    def broken():
        raise RuntimeError("boom")
    monkeypatch.setattr(V, "_REGISTRY", [("oracle", broken)])
    (res,) = V.run_checks()
    assert not res.passed and "boom" in res.detail and res.line().startswith("FAIL")


def test_nan_measurement_fails():
    assert not V.CheckResult("g", "n", float("nan"), 1.0).passed
    assert V.CheckResult("g", "n", 0.0, 0.0).passed
    assert not V.CheckResult("g", "n", np.inf, 1e300).passed
