import numpy as np
import pytest

from seqalign import numcore as nc
from seqalign.losses import (LOG_SCALE_MAX, LOG_SCALE_MIN, BatchOutputs, LossConfig, coarse_loss,
                             cosine_sim_matrix, fine_direction, fine_loss, info_nce,
                             init_logit_scale, temperature, total_loss)

LN_1_PLUS_INV_E = np.log(1.0 + np.exp(-1.0))


@pytest.mark.parametrize("a,b,expected", [
    ([[1.0, 0.0]], [[1.0, 0.0]], 1.0),
    ([[1.0, 0.0]], [[0.0, 1.0]], 0.0),
    ([[1.0, 1.0]], [[1.0, 0.0]], 0.70711),
])
def test_cosine_examples(a, b, expected):
    assert cosine_sim_matrix(a, b).item() == pytest.approx(expected, abs=1e-5)


def test_info_nce_closed_forms():
    eye = np.eye(2)
    assert info_nce(eye, eye, 1.0).item() == pytest.approx(LN_1_PLUS_INV_E, abs=1e-9)
    same = np.ones((4, 3))
    assert info_nce(same, same, 0.07).item() == pytest.approx(np.log(4), abs=1e-9)
    assert info_nce(np.array([[0.3, 0.1]]), np.array([[1.0, 2.0]]), 0.5).item() == 0.0


def test_coarse_loss_closed_forms():
    eye = np.eye(2)
    assert coarse_loss(eye, eye, 1.0).item() == pytest.approx(2 * LN_1_PLUS_INV_E, abs=1e-9)
    assert coarse_loss(np.ones((4, 2)), np.ones((4, 2)), 1.0).item() == pytest.approx(
        2 * np.log(4), abs=1e-9)


def test_coarse_directions_agree_for_symmetric_similarity():
    x = nc.Rng(6).normal((6, 4))
    y = x * nc.Rng(7).uniform((6, 1), 0.5, 2.0)  # same directions, so cos(x, y) is symmetric
    assert info_nce(x, y, 0.2).item() == pytest.approx(info_nce(y, x, 0.2).item(), abs=1e-12)
    v, l = nc.Rng(7).normal((5, 4)), nc.Rng(8).normal((5, 4))
    sym = coarse_loss(v, l, 0.2).item()
    assert sym == pytest.approx(info_nce(v, l, 0.2).item() + info_nce(l, v, 0.2).item(), abs=1e-12)


def test_info_nce_invariants():
    for seed in range(20):
        rng = nc.Rng(seed, "nce")
        v, l = rng.normal((6, 5)), rng.normal((6, 5))
        base = info_nce(v, l, 0.1).item()
        assert base >= 0
        scaled = info_nce(v * rng.uniform((6, 1), 0.1, 10.0), l * rng.uniform((6, 1), 0.1, 10), 0.1)
        assert scaled.item() == pytest.approx(base, abs=1e-9)


def test_lower_temperature_sharpens_diagonal_dominant_case():
    for seed in range(20):
        rng = nc.Rng(seed, "sharp")
        l = rng.normal((5, 8))
        v = l + 0.1 * rng.normal((5, 8))
        losses = [info_nce(v, l, t).item() for t in (1.0, 0.5, 0.2, 0.1)]
        assert all(a > b for a, b in zip(losses, losses[1:])), (seed, losses)


def _noise_off(method):
    return LossConfig(fine_method=method, gumbel_noise=False, tau_g=1.0)


def test_fine_loss_identity_sort():
    eye = nc.Node(np.eye(2))
    cfg = _noise_off("sort")
    sim = cosine_sim_matrix(eye, np.eye(2))
    assert fine_direction(sim, cfg, None).item() == pytest.approx(LN_1_PLUS_INV_E, abs=1e-12)
    assert fine_loss(eye, np.eye(2), cfg).item() == pytest.approx(2 * LN_1_PLUS_INV_E, abs=1e-12)


def test_fine_loss_anti_diagonal_sort():
    H = nc.Node([[0.0, 1.0], [1.0, 0.0]])
    cfg = _noise_off("sort")
    sim = cosine_sim_matrix(H, np.eye(2))
    assert np.array_equal(sim.value, [[0.0, 1.0], [1.0, 0.0]])
    assert fine_direction(sim, cfg, None).item() == pytest.approx(
        -np.log(1.0 / (np.e + 1.0)), abs=1e-12)
    assert -np.log(1.0 / (np.e + 1.0)) == pytest.approx(1.31326, abs=1e-5)


@pytest.mark.parametrize("method", ["sort", "viterbi", "split"])
def test_fine_loss_single_sentence_frame_direction_is_zero(method):
    H = nc.Node(nc.Rng(1).normal((5, 3)))
    sim = cosine_sim_matrix(H, nc.Rng(2).normal((1, 3)))
    assert fine_direction(sim, _noise_off(method), None).item() == pytest.approx(0.0, abs=1e-15)


def test_fine_loss_split_requires_enough_frames():
    with pytest.raises(ValueError):
        fine_loss(nc.Node(np.ones((2, 3))), np.ones((3, 3)), _noise_off("split"))


@pytest.mark.parametrize("method", ["sort", "viterbi", "split"])
def test_fine_loss_finite_and_differentiable(method):
    rng = nc.Rng(3, method)
    H = nc.parameter(rng.normal((6, 4)), name="H")
    S = rng.normal((3, 4))
    cfg = LossConfig(fine_method=method)
    value = fine_loss(H, S, cfg, nc.Rng(9))
    assert np.isfinite(value.item())
    err = nc.gradcheck(lambda: fine_loss(H, S, cfg, nc.Rng(9)), [H])
    assert err < 1e-3


def test_temperature_init_and_clamp():
    scale = init_logit_scale(0.07)
    assert temperature(scale).item() == pytest.approx(0.07)
    scale.value[:] = 50.0
    assert temperature(scale).item() == pytest.approx(0.01)
    assert LOG_SCALE_MIN == pytest.approx(np.log(0.01))
    assert LOG_SCALE_MAX == pytest.approx(np.log(100.0))


def _outputs(rng, b=4, n=5, k=3, d=6, with_cls=False):
    V = nc.parameter(rng.normal((b, d)), name="V")
    Hs = [nc.parameter(rng.normal((n, d)), name=f"H{i}") for i in range(b)]
    out = BatchOutputs(V, rng.normal((b, d)), Hs, [rng.normal((k, d)) for _ in range(b)])
    if with_cls:
        out.logits = nc.parameter(rng.normal((b, 3)), name="logits")
        out.labels = np.array([0, 2, 1, 0][:b])
    return out


def test_total_loss_without_fine_equals_coarse():
    out = _outputs(nc.Rng(1))
    cfg = LossConfig(lambda_fine=0.0)
    terms = total_loss(out, cfg, 0.07, nc.Rng(2))
    assert terms.total.item() == coarse_loss(out.V, out.L, 0.07).item()
    assert terms.fine == 0.0


def test_default_fine_weight():
    assert LossConfig().lambda_fine == 1.0


def test_total_loss_composition_and_gradient():
    rng = nc.Rng(4)
    out = _outputs(rng, with_cls=True)
    cfg = LossConfig(lambda_fine=0.5, cls_weight=2.0)
    scale = init_logit_scale()
    terms = total_loss(out, cfg, temperature(scale), nc.Rng(5))
    assert terms.total.item() == pytest.approx(terms.coarse + 0.5 * terms.fine + 2.0 * terms.cls)
    leaves = [out.V, *out.H, out.logits, scale]
    err = nc.gradcheck(lambda: total_loss(out, cfg, temperature(scale), nc.Rng(5)).total, leaves)
    assert err < 1e-3
