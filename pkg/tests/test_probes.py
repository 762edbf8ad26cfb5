import math

import numpy as np
import pytest

from vit5 import probes as P
from vit5.config import ModelConfig


def _thetas(base, d_head):
    n = d_head // 4
    return base ** (2 * np.arange(n) / (d_head / 2))


def _coupling_oracle(d_head, grid, registers, patch_base, reg_base):
    """Per-slot positional cosine profile correlated against Manhattan distance, by loops."""
    tp = _thetas(patch_base, d_head)
    tr = _thetas(reg_base, d_head) if reg_base is not None else np.zeros(d_head // 4)
    slots = [(k, 0) for k in range(registers)] + [(registers, 0)]
    scores = []
    for cx, cy in slots:
        sim, dist = [], []
        for py in range(grid):
            for px in range(grid):
                s = sum(math.cos(px * a - cx * b) for a, b in zip(tp, tr))
                s += sum(math.cos(py * a - cy * b) for a, b in zip(tp, tr))
                sim.append(s / (d_head / 2))
                dist.append(abs(px - cx) + abs(py - cy))
        scores.append(abs(np.corrcoef(sim, dist)[0, 1]))
    return float(np.mean(scores))


@pytest.mark.parametrize("variant", ["none", "same_base", "high_base"])
def test_register_coupling_matches_loop_oracle(variant):
    cfg = ModelConfig()
    pb, rb = cfg.rope_bases
    reg_base = {"none": None, "same_base": pb, "high_base": rb}[variant]
    expected = _coupling_oracle(cfg.d_head, cfg.grid[0], cfg.registers, pb, reg_base)
    assert P.register_coupling(cfg, variant) == pytest.approx(expected, abs=1e-12)


def test_register_coupling_verdict():
    res = P.run_probe("register-coupling")
    verdict = res[-1]
    assert verdict.name == "register-coupling[high<same]" and verdict.passed
    assert [r.passed for r in res[:-1]] == [None, None, None]


def test_translation_rope_only_invariant_ape_sensitive():
    cfg = ModelConfig()
    assert P.translation_delta(cfg.replace(ape="off"), trials=10) < 1e-5
    assert P.translation_delta(cfg.replace(ape="on"), trials=10) > 1e-3


def test_translation_without_rope_or_ape_is_trivially_invariant():
    assert P.translation_delta(ModelConfig(rope="off", ape="off"), trials=5) < 1e-12


def test_flip_is_report_only():
    res = P.run_probe("flip")
    assert len(res) == 3 and all(r.passed is None and r.relation == "report" for r in res)
    # with no positional signal at all a mirror just permutes the logits
    assert res[2].measured < 1e-12


def test_rope_identity_and_qk_bound():
    assert P.run_probe("rope-identity")[0].passed
    (qk,) = P.probe_qk_bound(ModelConfig(), sets=50)
    assert qk.passed and qk.threshold == pytest.approx(math.sqrt(32) + 1e-5)


def test_result_line_and_dict():
    r = P.ProbeResult("x", 0.5, 1.0, "<", True)
    assert r.line() == "x: 5.000e-01 < 1 PASS"
    assert r.to_dict()["details"] == {}
    assert P.ProbeResult("y", 2.0, None, "report", None).line().endswith("REPORT")


def test_unknown_probe():
    with pytest.raises(ValueError):
        P.run_probe("scale")
