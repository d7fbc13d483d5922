import itertools
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from hcpr.consolidation import (
    Hypothesis,
    PseudoLabelSet,
    SelectionConfig,
    build_all_hypotheses,
    class_centroids,
    confidence_select,
    consolidate,
    near_centroid_from_embeddings,
    near_centroid_select,
    rank_hypotheses,
    rank_thresholds,
    rationale_representation,
    read_report,
    round_half_up,
    select_reliable,
    top_k_hypotheses,
    write_report,
)
from hcpr.data import Dataset
from hcpr.errors import ConfigError, InputError
from hcpr.model import logit_feature_gradient
from hcpr.preadapt import predict


def hyp(iid, label, rationale=(0.0,), rank=None):
    return Hypothesis(iid, label, 0.5, np.asarray(rationale, dtype=np.float64), rank)


def loop_rationale(fm, g):
    h, w, d = fm.shape
    out = [0.0] * d
    for m in range(h):
        for n in range(w):
            weight = max(sum(float(g[m, n, k]) * float(fm[m, n, k]) for k in range(d)), 0.0)
            for k in range(d):
                out[k] += weight * float(fm[m, n, k])
    return np.array(out) / (h * w)


# ---------------------------------------------------------------- top-k


def test_top_k_examples():
    assert top_k_hypotheses([0.7, 0.2, 0.1], 2) == [(0, 0.7), (1, 0.2)]
    assert [c for c, _ in top_k_hypotheses([0.25] * 4, 3)] == [0, 1, 2]
    with pytest.raises(ConfigError):
        top_k_hypotheses([0.5, 0.5], 3)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 10))
def test_top_k_matches_full_sort(seed, c):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(c)).round(2)
    k = int(rng.integers(1, c + 1))
    oracle = sorted(range(c), key=lambda j: (-p[j], j))[:k]
    assert [cls for cls, _ in top_k_hypotheses(p, k)] == oracle


# ---------------------------------------------------------------- rationale


def test_rationale_closed_forms():
    f = np.array([[[1.0, 2.0]]])
    assert np.array_equal(rationale_representation(f, np.array([[[-1.0, 0.0]]])), [0.0, 0.0])
    assert np.array_equal(rationale_representation(np.array([[[1.0, 0.0]]]), np.array([[[1.0, 0.0]]])), [1.0, 0.0])
    with pytest.raises(InputError):
        rationale_representation(np.zeros((2, 2, 3)), np.zeros((2, 2, 4)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 4), st.integers(1, 4), st.integers(1, 6))
def test_rationale_matches_loop_and_lies_in_cone(seed, h, w, d):
    rng = np.random.default_rng(seed)
    fm = np.maximum(rng.normal(size=(h, w, d)), 0)
    g = rng.normal(size=(h, w, d))
    a = rationale_representation(fm, g)
    assert np.allclose(a, loop_rationale(fm, g), atol=1e-9)
    weights = np.maximum((fm * g).sum(-1), 0)
    assert (weights >= 0).all()
    assert np.allclose(a, np.tensordot(weights, fm, axes=([0, 1], [0, 1])) / (h * w))


def test_build_all_hypotheses_counts_and_recompute(small_model):
    rng = np.random.default_rng(0)
    ds = Dataset(rng.random((7, 8, 8, 1)), ids=np.arange(100, 107), domain="target")
    before = {k: v.clone() for k, v in small_model.state_dict().items()}
    hyps = build_all_hypotheses(small_model, ds, 2, batch_size=3)
    assert len(hyps) == 14
    for k, v in small_model.state_dict().items():
        assert torch.equal(v, before[k])
    by_id = {}
    for h in hyps:
        by_id.setdefault(h.instance_id, []).append(h)
    assert sorted(by_id) == list(range(100, 107))
    for iid, hs in by_id.items():
        assert len({h.hyp_label for h in hs}) == 2
        assert hs[0].posterior_value >= hs[1].posterior_value
    # one instance at a time, from scratch
    from hcpr.model import forward, eval_mode

    for h in hyps[::3]:
        pos = int(ds.positions([h.instance_id])[0])
        img = ds.images[pos : pos + 1]
        g = logit_feature_gradient(small_model, img, h.hyp_label)[0]
        with eval_mode(small_model), torch.no_grad():
            fm = forward(small_model, img).feature_map[0]
        assert np.allclose(h.rationale, rationale_representation(fm.numpy(), g.numpy()), atol=1e-6)


def test_k_tilde_larger_than_classes(small_model):
    ds = Dataset(np.zeros((2, 8, 8, 1)), domain="target")
    with pytest.raises(ConfigError):
        build_all_hypotheses(small_model, ds, 4)


# ---------------------------------------------------------------- centroids and ranks


def test_centroid_examples():
    c = class_centroids([hyp(0, 2, (3.0, 4.0))], num_classes=3)
    assert np.array_equal(c.centroids[2], [3.0, 4.0])
    assert c.absent == [0, 1]
    c = class_centroids([hyp(0, 1, (1.0, 0.0)), hyp(1, 1, (0.0, 1.0))])
    assert np.array_equal(c.centroids[1], [0.5, 0.5])
    with pytest.raises(InputError):
        class_centroids([])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_centroids_match_grouped_mean(seed):
    rng = np.random.default_rng(seed)
    hs = [hyp(i, int(rng.integers(0, 5)), rng.normal(size=3)) for i in range(100)]
    c = class_centroids(hs, 5)
    for cls in range(5):
        members = [h.rationale for h in hs if h.hyp_label == cls]
        if members:
            assert np.allclose(c.centroids[cls], np.mean(members, 0), atol=1e-6)
            assert c.counts[cls] == len(members)
        else:
            assert cls in c.absent


def test_rank_examples():
    single = rank_hypotheses([hyp(0, 0, (1.0,))], class_centroids([hyp(0, 0, (1.0,))]))
    assert single[0].rank == 0
    hs = [hyp(0, 0, (2.0,)), hyp(1, 0, (1.0,)), hyp(2, 0, (3.0,))]
    cents = class_centroids([hyp(9, 0, (0.0,))])
    assert [h.rank for h in rank_hypotheses(hs, cents)] == [1, 0, 2]


def euclid(a, b):
    return math.sqrt(sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)))


def rank_oracle(hs, cents, pool="per_class"):
    ranks = {}
    keyf = (lambda h: h.hyp_label) if pool == "per_class" else (lambda h: 0)
    for key in {keyf(h) for h in hs}:
        members = [h for h in hs if keyf(h) == key]
        members.sort(key=lambda h: (euclid(h.rationale, cents.centroids[h.hyp_label]), h.instance_id, h.hyp_label))
        for r, h in enumerate(members):
            ranks[(h.instance_id, h.hyp_label)] = r
    return ranks


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["per_class", "global"]))
def test_ranks_match_sort_oracle(seed, pool):
    rng = np.random.default_rng(seed)
    hs = []
    for i in range(40):
        for c in rng.choice(6, size=3, replace=False):
            hs.append(hyp(i, int(c), rng.integers(-2, 3, size=2).astype(float)))  # integer grid: many ties
    cents = class_centroids(hs)
    ranked = rank_hypotheses(hs, cents, pool)
    oracle = rank_oracle(hs, cents, pool)
    assert {(h.instance_id, h.hyp_label): h.rank for h in ranked} == oracle
    for h in ranked:
        assert h.distance == pytest.approx(float(np.linalg.norm(h.rationale - cents.centroids[h.hyp_label])))
    if pool == "per_class":
        for c in range(6):
            rs = sorted(h.rank for h in ranked if h.hyp_label == c)
            assert rs == list(range(len(rs)))


# ---------------------------------------------------------------- selection


def test_thresholds_round_half_up():
    assert round_half_up(2.5) == 3 and round_half_up(2.4999) == 2
    assert rank_thresholds(SelectionConfig(), 1000) == (8, 16)
    assert rank_thresholds(SelectionConfig(tau1_pct=0.75, tau2_pct=1.25), 200) == (2, 3)
    with pytest.raises(ConfigError):
        rank_thresholds(SelectionConfig(tau1_pct=0.1, tau2_pct=0.2), 100)
    with pytest.raises(ValueError, match="tau1_pct.*tau2_pct"):
        SelectionConfig(tau1_pct=2, tau2_pct=1)


def test_case1_selected_case2_rejected():
    cfg = SelectionConfig(tau1_pct=10, tau2_pct=20)  # N=100 -> tau1=10, tau2=20
    case1 = [hyp(0, 3, rank=2), hyp(0, 5, rank=40), hyp(0, 7, rank=25)]
    case2 = [hyp(1, 1, rank=2), hyp(1, 2, rank=15), hyp(1, 4, rank=60)]
    edge = [hyp(2, 1, rank=0), hyp(2, 2, rank=20)]  # other rank equal to tau2 is not "> tau2"
    ps = select_reliable(case1 + case2 + edge, cfg, 100)
    assert ps.labeled == {0: 3}
    assert ps.unlabeled_ids == [1, 2]


def rule_oracle(ranks_by_instance, tau1, tau2):
    chosen = {}
    for iid, pairs in ranks_by_instance.items():
        for label, r in pairs:
            if r < tau1 and all(r2 > tau2 for l2, r2 in pairs if l2 != label):
                assert iid not in chosen
                chosen[iid] = label
    return chosen


def test_exhaustive_rank_patterns():
    tau1, tau2 = 2, 4
    cfg = SelectionConfig(tau1_pct=4, tau2_pct=8)  # N=50
    assert rank_thresholds(cfg, 50) == (tau1, tau2)
    for k in (2, 3):
        hs, truth = [], {}
        for iid, pattern in enumerate(itertools.product(range(7), repeat=k)):
            pairs = list(enumerate(pattern))
            hs += [hyp(iid, label, rank=r) for label, r in pairs]
            truth[iid] = pairs
        ps = select_reliable(hs, cfg, 50)
        assert ps.labeled == rule_oracle(truth, tau1, tau2)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_selection_partition_and_monotonicity(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(20, 200))
    k = int(rng.integers(2, 5))
    hs = []
    for i in range(n):
        for c in rng.choice(8, size=k, replace=False):
            hs.append(hyp(i, int(c), rng.normal(size=2)))
    ranked = rank_hypotheses(hs, class_centroids(hs))
    ids = list(range(n))
    t1, t2 = 5.0, 12.0
    ps = select_reliable(ranked, SelectionConfig(tau1_pct=t1, tau2_pct=t2), n, ids)
    assert set(ps.labeled) | set(ps.unlabeled_ids) == set(ids)
    assert not set(ps.labeled) & set(ps.unlabeled_ids)
    smaller_t1 = select_reliable(ranked, SelectionConfig(tau1_pct=2.0, tau2_pct=t2), n, ids)
    larger_t2 = select_reliable(ranked, SelectionConfig(tau1_pct=t1, tau2_pct=20.0), n, ids)
    if rank_thresholds(SelectionConfig(tau1_pct=2.0, tau2_pct=t2), n)[0] <= rank_thresholds(SelectionConfig(tau1_pct=t1, tau2_pct=t2), n)[0]:
        assert set(smaller_t1.labeled) <= set(ps.labeled)
    assert set(larger_t2.labeled) <= set(ps.labeled)


def test_unranked_input_rejected():
    with pytest.raises(InputError):
        select_reliable([hyp(0, 0)], SelectionConfig(), 1000)


# ---------------------------------------------------------------- baselines


def test_confidence_select():
    post = torch.tensor([[0.96, 0.04], [0.5, 0.5], [0.01, 0.99]])
    ps = confidence_select(post, [10, 11, 12], 0.95)
    assert ps.labeled == {10: 0, 12: 1} and ps.unlabeled_ids == [11]


def test_near_centroid_single_instance_per_class():
    emb = np.array([[0.0, 0.0], [5.0, 5.0], [9.0, 1.0]])
    ps = near_centroid_from_embeddings(emb, np.array([0, 1, 2]), [3, 4, 5], 1)
    assert ps.labeled == {3: 0, 4: 1, 5: 2}


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 5))
def test_near_centroid_matches_sort_oracle(seed, tau1):
    rng = np.random.default_rng(seed)
    emb = rng.integers(-3, 4, size=(30, 2)).astype(float)
    pseudo = rng.integers(0, 3, 30)
    ids = rng.permutation(1000)[:30]
    ps = near_centroid_from_embeddings(emb, pseudo, ids, tau1)
    expected = {}
    for c in set(pseudo.tolist()):
        members = [j for j in range(30) if pseudo[j] == c]
        centre = emb[members].mean(0)
        members.sort(key=lambda j: (np.linalg.norm(emb[j] - centre), ids[j]))
        expected.update({int(ids[j]): c for j in members[:tau1]})
    assert ps.labeled == expected


def test_near_centroid_select_uses_tau1_of_total(small_model):
    rng = np.random.default_rng(0)
    ds = Dataset(rng.random((50, 8, 8, 1)), domain="target")
    ps = near_centroid_select(small_model, ds, tau1_pct=4.0)  # 2 per predicted class
    _, post = predict(small_model, ds.images)
    counts = np.bincount(post.argmax(1).numpy(), minlength=3)
    assert len(ps) == sum(min(2, c) for c in counts)


# ---------------------------------------------------------------- full pass and report


def test_consolidate_is_deterministic_and_report_round_trips(tmp_path, small_model):
    rng = np.random.default_rng(0)
    ds = Dataset(rng.random((60, 8, 8, 1)), domain="target")
    cfg = SelectionConfig(k_tilde=2, tau1_pct=10, tau2_pct=20)
    a = consolidate(small_model, ds, cfg)
    b = consolidate(small_model, ds, cfg)
    assert a.pseudo.labeled == b.pseudo.labeled
    assert [h.rank for h in a.hypotheses] == [h.rank for h in b.hypotheses]
    path = write_report(a, tmp_path / "c.json", len(ds))
    pseudo, summary = read_report(path)
    assert pseudo.labeled == a.pseudo.labeled
    assert summary["quantity_pct"] == len(a.pseudo) / len(ds) * 100.0
    blob = json.loads(path.read_text())
    rec = blob["instances"][0]
    assert {"id", "labels", "posteriors", "distances", "ranks", "selected", "selected_label"} <= set(rec)
    assert len(rec["labels"]) == 2
