import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from prognosis.datapipe import CorpusError, load_corpus, write_packed
from prognosis.synthdisease import (
    MISSING,
    DiseaseChain,
    bayes_oracle,
    build_dataset,
    default_baseline_stages,
    make_chain,
    procedural_corpus,
    render_stage,
    sample_trajectory,
    uniform_baseline,
)


def path_enumeration(T, m0, k):
    """Distribution of the stage k steps ahead by summing over every path (no matrix power)."""
    n = T.shape[0]
    dist = np.zeros(n)
    for path in itertools.product(range(n), repeat=k):
        p, m = 1.0, m0
        for nxt in path:
            p *= T[m, nxt]
            m = nxt
            if p == 0.0:
                break
        dist[path[-1]] += p
    return dist


# chain

def test_make_chain_examples():
    c = make_chain(1.0)
    assert c.n_stages == 9
    for m in range(8):
        assert c.T[m, m + 1] == 1.0
    assert c.T[8, 8] == 1.0
    c = make_chain(0.75)
    assert c.T[0, 1] == 0.75 and c.T[0, 0] == 0.25
    np.testing.assert_allclose(c.T.sum(1), 1.0, atol=1e-12)
    for bad in (0.0, -0.1, 1.2):
        with pytest.raises(ValueError):
            make_chain(bad)


def test_chain_validation():
    with pytest.raises(ValueError):
        DiseaseChain(np.array([[0.5, 0.5], [0.5, 0.5]]))
    with pytest.raises(ValueError):
        DiseaseChain(np.array([[0.5, 0.6], [0.0, 1.0]]))


@pytest.mark.parametrize("p", [0.75, 0.9, 1.0])
def test_powers_stay_stochastic(p):
    c = make_chain(p)
    for k in range(1, 9):
        np.testing.assert_allclose(c.power(k).sum(1), 1.0, atol=1e-10)


# trajectories

def test_sample_trajectory_examples(rng):
    c = make_chain(1.0)
    assert sample_trajectory(c, 3, 4, rng).tolist() == [4, 5, 6, 7]
    assert sample_trajectory(c, 8, 4, rng).tolist() == [8, 8, 8, 8]


@pytest.mark.parametrize("p", [0.75, 0.9])
def test_empirical_transition_rate(p):
    c = make_chain(p)
    r = np.random.default_rng(11)
    adv = [int(sample_trajectory(c, 0, 1, r)[0] == 1) for _ in range(100_000)]
    assert abs(np.mean(adv) - p) < 0.01


@given(st.floats(0.05, 1.0), st.integers(0, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_trajectories_monotone_without_skips(p, m0, K, seed):
    traj = sample_trajectory(make_chain(p), m0, K, np.random.default_rng(seed))
    steps = np.diff(np.r_[m0, traj])
    assert np.all((steps == 0) | (steps == 1))


# rendering

def test_render_examples():
    img = procedural_corpus(1, 28, 0)[0]
    assert np.array_equal(render_stage(img, 0), img)
    assert np.array_equal(render_stage(img, 4), np.rot90(img, 2))
    assert np.array_equal(render_stage(render_stage(img, 2), 2), render_stage(img, 4))
    for m in (0, 2, 4, 6):
        assert np.array_equal(render_stage(img, m), np.rot90(img, m // 2))
    with pytest.raises(ValueError):
        render_stage(np.zeros((4, 5)), 1)


def test_odd_stages_rotate_by_45_degrees():
    # a single bright pixel on the +x axis lands on the diagonal (counter-clockwise)
    img = np.zeros((21, 21))
    img[10, 18] = 1.0
    out = render_stage(img, 1)
    i, j = np.unravel_index(np.argmax(out), out.shape)
    assert (i - 10, j - 10) in {(-6, 6), (-5, 5), (-6, 5), (-5, 6)}


def test_stage_eight_coincides_with_stage_zero():
    img = procedural_corpus(1, 28, 0)[0]
    assert np.array_equal(render_stage(img, 8), img)
    assert default_baseline_stages(9) == list(range(8))


def test_all_rendered_stages_distinct():
    img = procedural_corpus(1, 28, 3)[0].astype(float)
    views = [render_stage(img, m) for m in range(8)]
    for a, b in itertools.combinations(range(8), 2):
        assert np.abs(views[a] - views[b]).mean() > 5.0


# oracle

def test_oracle_examples():
    for k in range(1, 5):
        assert bayes_oracle(make_chain(1.0), k)["accuracy"] == 1.0
    o = bayes_oracle(make_chain(0.75), 1)
    np.testing.assert_allclose(o["accuracy_by_stage"][:8], 0.75)
    T2 = make_chain(0.9).power(2)
    np.testing.assert_allclose(T2[0, :3], [0.01, 0.18, 0.81], atol=1e-15)
    assert abs(bayes_oracle(make_chain(0.9), 2)["accuracy_by_stage"][0] - 0.81) < 1e-15
    with pytest.raises(ValueError):
        bayes_oracle(make_chain(0.9), 0)


@pytest.mark.parametrize("p", [0.75, 0.9])
def test_oracle_matches_path_enumeration(p):
    c = make_chain(p, n_stages=5)
    for k in range(1, 5):
        o = bayes_oracle(c, k)
        for m0 in range(5):
            dist = path_enumeration(c.T, m0, k)
            assert abs(o["accuracy_by_stage"][m0] - dist.max()) < 1e-12
            assert o["prediction"][m0] == np.argmax(dist)


def test_oracle_horizon_profile():
    """Accuracy falls with k until mass piling into the absorbing stage lifts it again.

    Without the absorbing boundary the k-step law is binomial and its mode
    shrinks monotonically; with it, p=0.75 already turns upward at k=4.
    """
    dist = uniform_baseline(9, default_baseline_stages(9))
    acc = {p: [bayes_oracle(make_chain(p), k, dist)["accuracy"] for k in range(1, 5)] for p in (0.75, 0.9, 1.0)}
    assert acc[1.0] == [1.0] * 4
    assert acc[0.9] == sorted(acc[0.9], reverse=True)
    assert acc[0.75][:3] == sorted(acc[0.75][:3], reverse=True)
    assert acc[0.75][3] > acc[0.75][2]
    # an unbounded chain (no absorbing stage within reach) is monotone
    wide = make_chain(0.75, n_stages=40)
    start = np.zeros(40)
    start[0] = 1.0
    accs = [bayes_oracle(wide, k, start)["accuracy"] for k in range(1, 9)]
    assert accs == sorted(accs, reverse=True)
    for k in range(4):
        assert acc[1.0][k] >= acc[0.9][k] >= acc[0.75][k]


# datasets

def test_build_dataset_examples():
    corpus = procedural_corpus(20, 28, 0)
    recs = build_dataset(corpus, make_chain(1.0), 100, seed=0, K=4)
    assert len(recs) == 100
    for r in recs:
        assert r.K == 4 and np.all(r.stage_labels != MISSING) and np.all(r.progression_labels != MISSING)
        assert r.image.dtype == np.uint8 and r.image.shape == (28, 28)
        m0 = r.baseline
        assert r.stage_labels.tolist() == [min(m0 + k, 8) for k in range(5)]
        src = corpus[r.meta["source_index"]].astype(float)
        assert np.array_equal(r.image, np.clip(np.round(render_stage(src, m0)), 0, 255).astype(np.uint8))
    again = build_dataset(corpus, make_chain(1.0), 100, seed=0, K=4)
    assert all(np.array_equal(a.image, b.image) and np.array_equal(a.stage_labels, b.stage_labels)
               for a, b in zip(recs, again))


def test_mask_fraction_binomial():
    recs = build_dataset(procedural_corpus(5), make_chain(0.9), 2000, seed=1, mask_fraction=0.3)
    miss = np.mean([r.stage_labels[1:] == MISSING for r in recs])
    # 8000 Bernoulli(0.3) draws: sd ~ 0.005
    assert abs(miss - 0.3) < 0.02
    assert all(r.baseline != MISSING for r in recs)


def test_baseline_distribution_uniform():
    recs = build_dataset(procedural_corpus(5), make_chain(0.9), 4000, seed=2)
    counts = np.bincount([r.baseline for r in recs], minlength=9)
    assert counts[8] == 0
    assert np.all(np.abs(counts[:8] / 4000 - 1 / 8) < 0.02)
    full = build_dataset(procedural_corpus(5), make_chain(0.9), 900, seed=2, baseline_stages=range(9))
    assert np.bincount([r.baseline for r in full], minlength=9)[8] > 0


def test_dataset_from_packed_corpus(tmp_path):
    corpus = procedural_corpus(4, 16, 0)
    write_packed(tmp_path / "c.pk8", corpus)
    loaded = load_corpus(tmp_path / "c.pk8")
    assert np.array_equal(loaded, corpus)
    assert len(build_dataset(loaded, make_chain(1.0), 3)) == 3
    with pytest.raises(CorpusError, match="missing.pk8"):
        load_corpus(tmp_path / "missing.pk8")
    with pytest.raises(ValueError):
        build_dataset(np.zeros((0, 4, 4), np.uint8), make_chain(1.0), 3)
