import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import special_ortho_group

from seqalign import numcore as nc
from seqalign.config import RunConfig
from seqalign.data import gen_dataset, make_pairs
from seqalign.errors import ContractError
from seqalign.evalkit import (MatchInstance, build_match_instances, format_metrics, match_eval,
                              norm_euclid, roc_auc, verify, verify_decisions, video_reps)
from seqalign.model import init_params


def pairwise_auc(scores, labels):
    """Fraction of (positive, negative) pairs the positive wins; ties count one half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_norm_euclid_examples():
    v = np.array([0.3, -2.0, 1.0])
    assert norm_euclid(v, v) == 0.0
    assert norm_euclid([1.0, 0.0], [0.0, 1.0]) == pytest.approx(np.sqrt(2), abs=1e-12)
    assert norm_euclid(v, -3 * v) == pytest.approx(2.0, abs=1e-12)


def test_norm_euclid_cosine_identity():
    rng = nc.Rng(0, "cos")
    for _ in range(1000):
        a, b = rng.normal(6), rng.normal(6)
        cos = a @ b / np.linalg.norm(a) / np.linalg.norm(b)
        assert abs(norm_euclid(a, b) ** 2 - (2 - 2 * cos)) <= 1e-9


@pytest.mark.parametrize("scores,labels,expected", [
    ([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0], 1.0),
    ([0.4, 0.4, 0.4, 0.4], [1, 0, 1, 0], 0.5),
    ([0.8, 0.3, 0.5, 0.1], [1, 1, 0, 0], 0.75),
])
def test_roc_auc_examples(scores, labels, expected):
    assert roc_auc(scores, labels) == pytest.approx(expected, abs=1e-12)


def test_roc_auc_single_class():
    with pytest.raises(ContractError):
        roc_auc([0.1, 0.2], [1, 1])


def test_roc_auc_matches_pairwise_oracle():
    for seed in range(100):
        rng = nc.Rng(seed, "auc")
        n = int(rng.generator.integers(2, 40))
        # coarse rounding forces plenty of ties
        scores = np.round(rng.normal(n), 1)
        labels = np.arange(n) % 2 == 0
        labels = labels[rng.permutation(n)]
        assert abs(roc_auc(scores, labels) - pairwise_auc(scores, labels)) <= 1e-12


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(-500, 500), min_size=2, max_size=30), st.integers(0, 2**31))
def test_roc_auc_rank_properties(ticks, seed):
    scores = np.asarray(ticks) / 10.0
    labels = np.arange(len(scores)) % 2 == 1
    labels = labels[nc.Rng(seed).permutation(len(scores))]
    base = roc_auc(scores, labels)
    assert roc_auc(np.exp(scores / 10.0) * 3 - 1, labels) == pytest.approx(base, abs=1e-12)
    assert abs(base + roc_auc(scores, ~labels) - 1.0) <= 1e-12


SMALL = RunConfig(d_raw=8, d_model=8, d_rep=8, depth=1, heads=2, d_ff=16, n_max=8, n_frames=8,
                  n_steps=3, n_tasks=3, n_orders=2, videos_per_order=3, eval_videos_per_order=3)


def test_verify_identical_vs_random():
    ds = gen_dataset(SMALL, nc.Rng(1))
    rng = nc.Rng(2)
    reps = {s.video_id: rng.normal(8) for s in ds.eval}
    pos = [(s, s, True) for s in ds.eval]
    neg = [(a, b, False) for a, b in zip(ds.eval, ds.eval[1:])]
    assert verify(pos + neg, reps) == 1.0


def test_verify_rotation_invariant():
    ds = gen_dataset(SMALL, nc.Rng(3))
    pairs = make_pairs(ds.eval, nc.Rng(4))
    reps = video_reps(ds.eval, init_params(SMALL, nc.Rng(5)))
    rot = special_ortho_group.rvs(8, random_state=nc.Rng(6).generator)
    rotated = {k: rot @ v for k, v in reps.items()}
    assert abs(verify(pairs, reps) - verify(pairs, rotated)) <= 1e-9


def test_verify_decisions_threshold():
    ds = gen_dataset(SMALL, nc.Rng(7))
    s = ds.eval[0]
    reps = {s.video_id: np.array([1.0, 0.0]), ds.eval[1].video_id: np.array([0.0, 1.0])}
    pairs = [(s, s, True), (s, ds.eval[1], False)]
    assert verify_decisions(pairs, reps, 1.0).tolist() == [1, 0]
    assert verify_decisions(pairs, reps, 1.5).tolist() == [1, 1]


def test_untrained_model_is_near_chance():
    aucs = []
    for seed in range(5):
        cfg = RunConfig(seed=seed)
        ds = gen_dataset(cfg, nc.Rng(seed, "data"))
        pairs = make_pairs(ds.eval, nc.Rng(seed, "pairs"))
        aucs.append(verify(pairs, init_params(cfg, nc.Rng(seed, "init"))))
    assert abs(np.mean(aucs) - 0.5) <= 0.1, aucs


def test_match_eval_paragraph_injected():
    rng = nc.Rng(8)
    instances = []
    for i in range(10):
        para = rng.normal(6)
        cands = rng.normal((5, 6))
        cands[i % 5] = para * 2.5
        instances.append(MatchInstance(para, cands, i % 5))
    acc, auc = match_eval(instances)
    assert acc == 1.0 and auc == 1.0


def test_match_eval_tie_rule():
    para = np.array([1.0, 0.0, 0.0])
    cands = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])
    assert match_eval([MatchInstance(para, cands, 0)])[0] == 1.0
    assert match_eval([MatchInstance(para, cands, 2)])[0] == 0.0


def test_match_instance_requires_valid_index():
    with pytest.raises(ContractError):
        MatchInstance(np.ones(2), np.ones((3, 2)), 3)


def test_build_match_instances():
    cfg = SMALL.replace(n_orders=3)
    ds = gen_dataset(cfg, nc.Rng(9))
    inst = build_match_instances(ds.eval, init_params(cfg, nc.Rng(10)), nc.Rng(11),
                                 n_candidates=5)
    assert len(inst) == cfg.n_tasks * 3
    assert all(len(i.candidates) == 3 for i in inst)
    again = build_match_instances(ds.eval, init_params(cfg, nc.Rng(10)), nc.Rng(11))
    assert [i.correct for i in inst] == [i.correct for i in again]


def test_format_metrics():
    m = {"verify_auc": 0.75, "n_pairs": 12}
    assert format_metrics(m) == "verify_auc\t0.75\nn_pairs\t12\n"
    assert json.loads(format_metrics(m, as_json=True)) == m
