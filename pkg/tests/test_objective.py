import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import central_difference, max_rel_err, pck_recount
from siagcn.errors import ConfigError, ContractError, ShapeError
from siagcn.objective import (PCK_DELTAS, LossConfig, format_report, mpck, pck, render_gaussian, render_maps,
                              report_json, total_loss)


def test_gaussian_on_grid_peak_and_symmetry():
    for sigma in (0.5, 1.5, 4.0):
        g = render_gaussian((3, 3), (7, 7), sigma)
        assert g[3, 3] == 1.0 and g.max() == 1.0
        np.testing.assert_allclose(g, g[::-1], atol=0)
        np.testing.assert_allclose(g, g[:, ::-1], atol=0)
        np.testing.assert_allclose(g, g.T, atol=0)


def test_gaussian_closed_form_and_limits():
    g = render_gaussian((2, 2), (5, 5), 1.0)
    assert abs(g[2, 3] - np.exp(-0.5)) < 1e-15
    assert abs(g[2, 3] - 0.60653) < 1e-5
    assert render_gaussian((2, 2), (5, 5), 1e6).min() > 1 - 1e-10
    off = render_gaussian((-3.0, 40.0), (8, 8), 2.0)
    assert np.isfinite(off).all() and 0 < off.max() < 1


def test_gaussian_mass_and_sigma_validation():
    for sigma in (1.0, 1.5, 2.0):
        g = render_gaussian((32, 32), (64, 64), sigma)
        assert abs(g.sum() / (2 * np.pi * sigma**2) - 1) < 0.01
    for bad in (0.0, -1.0):
        with pytest.raises(ConfigError):
            render_gaussian((1, 1), (3, 3), bad)


def test_render_maps_matches_single_renders():
    kp = np.array([[1.0, 2.0], [4.5, 0.2], [3.0, 3.0]])
    maps = render_maps(kp, (6, 7), 1.3)
    for k in range(3):
        np.testing.assert_array_equal(maps[k], render_gaussian(kp[k], (6, 7), 1.3))


def test_loss_examples():
    cfg = LossConfig(((0, 0.1),))
    Y = np.random.default_rng(0).random((3, 4, 4))
    loss, g = total_loss(None, Y, Y, cfg, 0)
    assert loss == 0 and not g.any()

    loss, g = total_loss(None, np.array([[[2.0]]]), np.array([[[0.0]]]), LossConfig(((0, 0.0),)), 0)
    assert loss == 4 and g[0, 0, 0] == 4

    S = Y[None].copy()
    S[0, 1, 2, 3] += 1.0
    loss, g = total_loss(S, Y, Y, cfg, 0)
    assert abs(loss - 0.1) < 1e-15 and not g.any()


def test_loss_gradient_and_errors():
    rng = np.random.default_rng(1)
    S, Yb, Ys = rng.random((2, 3, 5, 5)), rng.random((3, 5, 5)), rng.random((3, 5, 5))
    cfg = LossConfig()
    _, g = total_loss(S, Yb, Ys, cfg, 3)
    assert max_rel_err(g, central_difference(lambda: total_loss(S, Yb, Ys, cfg, 3)[0], Yb)) < 1e-6
    with pytest.raises(ShapeError):
        total_loss(None, Yb, Ys[:2], cfg, 0)
    with pytest.raises(ShapeError):
        total_loss(S[:, :2], Yb, Ys, cfg, 0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), epoch=st.integers(0, 50), T=st.integers(0, 3))
def test_property_loss_nonnegative(seed, epoch, T):
    rng = np.random.default_rng(seed)
    Ys = rng.random((2, 4, 4))
    S = rng.random((T, 2, 4, 4)) if T else None
    loss, _ = total_loss(S, rng.standard_normal((2, 4, 4)), Ys, LossConfig(), epoch)
    assert loss >= 0


def test_alpha_schedule():
    cfg = LossConfig(((0, 1.0), (40, 0.1)))
    assert cfg.alpha(0) == 1.0 and cfg.alpha(39) == 1.0 and cfg.alpha(40) == 0.1 and cfg.alpha(99) == 0.1
    for bad in (((0, 1.0), (5, 0.5), (5, 0.1)), ((3, 1.0),), ((0, -1.0),), ()):
        with pytest.raises(ConfigError):
            LossConfig(bad)


def test_pck_examples():
    gt = np.random.default_rng(2).random((21, 2)) * 32
    assert pck(gt, gt, 0.01, 32) == 1.0
    d = 0.05 * 32 + 1
    assert pck(gt + [d, 0], gt, 0.05, 32) == 0.0
    gt2 = np.array([[10.0, 10.0], [20.0, 20.0]])
    pred = np.array([[10.0, 10.0], [20.0, 20.0 + 0.05 * 32]])
    assert pck(pred, gt2, 0.04, 32) == 0.5
    assert pck(pred, gt2, 0.05, 32) == 1.0
    with pytest.raises(ShapeError):
        pck(pred[:1], gt2, 0.05, 32)


def test_mpck_examples():
    gt = np.zeros((1, 5, 2))
    m, table = mpck(gt, gt)
    assert m == 1.0 and all(v == 1.0 for v in table.values())
    # distances chosen so the six thresholds give PCK 0.2, 0.4, 0.6, 0.8, 1, 1
    pred = np.array([[[0, 0], [0.015 * 32, 0], [0.025 * 32, 0], [0.035 * 32, 0], [0.045 * 32, 0]]])
    m, table = mpck(pred, gt, s=32)
    np.testing.assert_allclose(list(table.values()), [0.2, 0.4, 0.6, 0.8, 1.0, 1.0], atol=1e-15)
    assert abs(m - 2 / 3) < 1e-15
    with pytest.raises(ContractError):
        mpck(np.zeros((0, 5, 2)), np.zeros((0, 5, 2)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 6))
def test_property_mpck_recount_and_monotone(seed, n):
    rng = np.random.default_rng(seed)
    gt = rng.random((n, 7, 2)) * 32
    pred = gt + rng.normal(0, 1.5, gt.shape)
    m, table = mpck(pred, gt, PCK_DELTAS, 32)
    for d in PCK_DELTAS:
        assert abs(table[d] - pck_recount(pred, gt, d, 32)) < 1e-12
    vals = [table[d] for d in PCK_DELTAS]
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    assert abs(m - np.mean(vals)) < 1e-15


def test_report_formats():
    systems = {"input": (0.5, {d: 0.5 for d in PCK_DELTAS}), "sia": (0.75, {d: 0.75 for d in PCK_DELTAS})}
    text = format_report(systems, PCK_DELTAS, ["split=test"])
    lines = text.splitlines()
    assert lines[0] == "# split=test"
    assert lines[1].split() == ["delta", "input", "sia"]
    assert len(lines) == 2 + len(PCK_DELTAS) + 1
    assert lines[-1].split() == ["mPCK", "50.00", "75.00"]
    doc = json.loads(report_json(systems, PCK_DELTAS, {"split": "test"}))
    assert doc["systems"]["sia"]["mpck"] == 0.75 and doc["deltas"] == list(PCK_DELTAS)
