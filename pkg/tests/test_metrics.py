import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from drgan.data import Dataset, generate_corpus
from drgan.errors import NumericError, ValidationError
from drgan.metrics import (
    EmbeddingSet,
    MetricReport,
    RandomConvEmbedding,
    augmentation_ab,
    classification_report,
    conditioning_fidelity,
    confusion_matrix,
    embed,
    fid,
    frechet_distance,
    laplacian_pyramid,
    per_grade_fid,
    quadratic_weighted_kappa,
    swd,
    tpr_per_class,
    write_table,
)


def exact_moments(n, mean, std, seed=0):
    z = np.random.default_rng(seed).standard_normal(n)
    z = (z - z.mean()) / z.std(ddof=1)
    return mean + std * z


# ---------------------------------------------------------------- FID


def test_fid_planted_1d():
    a = EmbeddingSet(exact_moments(500, 0.0, 1.0))
    b = EmbeddingSet(exact_moments(700, 3.0, 1.0, seed=1))
    assert abs(fid(a, b) - 9.0) < 1e-6
    c = EmbeddingSet(exact_moments(700, 3.0, 2.0, seed=1))
    # (m1 - m2)^2 + (s1 - s2)^2
    assert abs(fid(a, c) - 10.0) < 1e-6


def test_fid_closed_form_diagonal():
    mu1, mu2 = np.array([0.0, 1.0]), np.array([2.0, -1.0])
    c1, c2 = np.diag([1.0, 4.0]), np.diag([9.0, 1.0])
    expected = 4 + 4 + (1 - 3) ** 2 + (2 - 1) ** 2
    assert frechet_distance(mu1, c1, mu2, c2) == pytest.approx(expected, abs=1e-12)


def test_fid_self_symmetry_rotation():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((400, 6)) @ rng.standard_normal((6, 6))
    b = rng.standard_normal((300, 6)) * 2 + 0.5
    ea, eb = EmbeddingSet(a), EmbeddingSet(b)
    assert abs(fid(ea, ea)) < 1e-8
    assert fid(ea, eb) == pytest.approx(fid(eb, ea), abs=1e-9)
    q = ortho_group.rvs(6, random_state=1)
    assert abs(fid(EmbeddingSet(a @ q), EmbeddingSet(b @ q)) - fid(ea, eb)) < 1e-6


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), dim=st.integers(1, 5))
def test_fid_non_negative(seed, dim):
    rng = np.random.default_rng(seed)
    a = EmbeddingSet(rng.standard_normal((30, dim)))
    b = EmbeddingSet(rng.standard_normal((30, dim)) * rng.uniform(0.1, 3))
    assert fid(a, b) >= 0


def test_fid_validation_and_warning():
    with pytest.raises(ValidationError):
        EmbeddingSet(np.array([[1.0, np.nan], [0.0, 0.0]]))
    with pytest.raises(ValidationError):
        EmbeddingSet(np.zeros((1, 3)))
    with pytest.raises(ValidationError):
        fid(EmbeddingSet(np.zeros((4, 2))), EmbeddingSet(np.zeros((4, 3))))
    rng = np.random.default_rng(0)
    with pytest.warns(RuntimeWarning):
        fid(EmbeddingSet(rng.standard_normal((5, 8))), EmbeddingSet(rng.standard_normal((5, 8))))


def test_fid_rejects_indefinite_covariance():
    with pytest.raises(NumericError):
        frechet_distance(np.zeros(2), np.diag([1.0, -1.0]), np.zeros(2), np.eye(2))


def test_embedding_is_fixed_and_pluggable(tiny_corpus):
    a = embed(tiny_corpus, RandomConvEmbedding(7))
    b = embed(tiny_corpus, RandomConvEmbedding(7))
    assert np.array_equal(a.features, b.features)
    assert a.features.shape == (10, 64)
    custom = embed(tiny_corpus, lambda x: x.mean(dim=(2, 3)))
    assert custom.features.shape == (10, 3)


def test_per_grade_fid(tiny_corpus):
    with pytest.warns(RuntimeWarning, match="fewer samples"):
        avg, per = per_grade_fid(tiny_corpus, tiny_corpus)
    assert len(per) == 5
    assert avg == pytest.approx(0.0, abs=1e-8)


# ---------------------------------------------------------------- SWD


@pytest.fixture(scope="module")
def swd_images():
    return np.stack([s.image for s in generate_corpus(21, [4] * 5, 64)])[:16]


def test_swd_self_is_zero(swd_images):
    res = swd(swd_images, swd_images.copy(), rng=3)
    assert max(res.per_level) < 1e-9 and res.avg < 1e-9


def test_swd_brightness_lands_on_residual_level(swd_images):
    res = swd(swd_images, swd_images + 0.1, rng=0)
    assert res.per_level[2] > 1e3 * max(res.per_level[0], res.per_level[1])


@pytest.mark.parametrize("seed", range(3))
def test_swd_monotone_in_brightness(swd_images, seed):
    values = [swd(swd_images, swd_images + s, rng=seed).avg for s in (0.05, 0.1, 0.2)]
    assert values[0] < values[1] < values[2]


def test_swd_validation(swd_images):
    with pytest.raises(ValidationError):
        swd(swd_images, swd_images[:, :32, :32])
    with pytest.raises(ValidationError):
        swd(swd_images[:8], swd_images[:8])


def test_swd_accepts_generator_and_unequal_sizes(swd_images):
    more = np.concatenate([swd_images, swd_images[:4]])
    res = swd(swd_images, more, rng=np.random.default_rng(0))
    assert res.avg >= 0
    f = res.formatted()
    assert f["swd_avg"] == pytest.approx(res.avg * 1e3)


def test_laplacian_constant_offset_only_moves_residual(f64):
    x = torch.rand(2, 3, 32, 32)
    a, b = laplacian_pyramid(x), laplacian_pyramid(x + 0.3)
    for la, lb in zip(a[:-1], b[:-1]):
        torch.testing.assert_close(la, lb, atol=1e-12, rtol=0)
    torch.testing.assert_close(b[-1] - a[-1], torch.full_like(a[-1], 0.3), atol=1e-12, rtol=0)
    assert [l.shape[-1] for l in a] == [32, 16, 8]


# ---------------------------------------------------------------- kappa / TPR


def brute_confusion(pred, truth, k=5):
    m = [[0] * k for _ in range(k)]
    for p, t in zip(pred, truth):
        m[t][p] += 1
    return m


def brute_kappa(pred, truth, k=5):
    o = brute_confusion(pred, truth, k)
    n = len(pred)
    rows = [sum(o[i]) for i in range(k)]
    cols = [sum(o[i][j] for i in range(k)) for j in range(k)]
    num = sum((i - j) ** 2 * o[i][j] for i in range(k) for j in range(k))
    den = sum((i - j) ** 2 * rows[i] * cols[j] / n for i in range(k) for j in range(k))
    return 1 - num / den


def test_kappa_hand_case():
    # O has two off-diagonal ones at distance 4; E has 0.5 at (0,0),(0,4),(4,0),(4,4)
    assert quadratic_weighted_kappa([4, 0], [0, 4]) == pytest.approx(-1.0, abs=1e-15)
    assert brute_kappa([4, 0], [0, 4]) == -1.0


def test_kappa_and_tpr_perfect():
    y = [0, 1, 2, 3, 4, 2]
    assert quadratic_weighted_kappa(y, y) == 1.0
    assert tpr_per_class(y, y).tolist() == [1.0] * 5


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=2, max_size=60))
def test_against_brute_force(pairs):
    pred, truth = zip(*pairs)
    assert confusion_matrix(pred, truth).tolist() == brute_confusion(pred, truth)
    tpr = tpr_per_class(pred, truth)
    o = brute_confusion(pred, truth)
    for g in range(5):
        if sum(o[g]) == 0:
            assert math.isnan(tpr[g])
        else:
            assert tpr[g] == o[g][g] / sum(o[g])
    den_zero = len(set(pred) | set(truth)) == 1
    if not den_zero:
        assert quadratic_weighted_kappa(pred, truth) == pytest.approx(brute_kappa(pred, truth), abs=1e-12)


def test_kappa_invariant_to_sample_order():
    rng = np.random.default_rng(0)
    p, t = rng.integers(0, 5, 50), rng.integers(0, 5, 50)
    perm = rng.permutation(50)
    assert quadratic_weighted_kappa(p, t) == pytest.approx(quadratic_weighted_kappa(p[perm], t[perm]), abs=1e-15)


def test_single_class_agreement():
    assert quadratic_weighted_kappa([2, 2], [2, 2]) == 1.0


def test_label_validation():
    with pytest.raises(ValidationError):
        quadratic_weighted_kappa([0, 5], [0, 1])
    with pytest.raises(ValidationError):
        quadratic_weighted_kappa([0], [0, 1])
    with pytest.raises(ValidationError):
        quadratic_weighted_kappa([], [])


# ---------------------------------------------------------------- reports


def test_report_validation():
    with pytest.raises(ValidationError):
        MetricReport(fid=-1.0)
    with pytest.raises(ValidationError):
        MetricReport(kappa=1.5)
    with pytest.raises(ValidationError):
        MetricReport(tpr=[0.5, 1.2, 0, 0, 0])
    with pytest.raises(ValidationError):
        MetricReport(swd_avg=-0.1)


def test_report_json_flat_and_nan_sentinel(tmp_path):
    r = classification_report([0, 1, 1], [0, 1, 2], {"seed": 4})
    r.swd_per_level, r.swd_avg = [0.001, 0.002, 0.003], 0.002
    r.write_json(tmp_path / "report.json")
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["tpr_3"] is None and data["tpr_0"] == 1.0
    assert data["swd_avg"] == pytest.approx(2.0)
    assert data["meta.seed"] == 4
    assert data["accuracy"] == pytest.approx(2 / 3)
    write_table({"a": r}, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0].startswith("arm,accuracy,kappa,tpr_0")
    assert lines[1].split(",")[-1] == ""


# ---------------------------------------------------------------- A/B + conditioning


def majority_factory(train_set, seed, config):
    counts = train_set.counts()
    label = int(np.argmax(counts))
    return lambda ds: np.full(len(ds), label)


def test_ab_overlap_rejected(tiny_corpus):
    with pytest.raises(ValidationError):
        augmentation_ab(tiny_corpus, Dataset(), tiny_corpus[:2], seeds=(0,), classifier_factory=majority_factory)


def test_ab_empty_fake_arm_has_zero_delta(tiny_corpus):
    test = generate_corpus(77, [2] * 5, 64)
    ab = augmentation_ab(tiny_corpus, Dataset(), test, {"epochs": 1, "batch_size": 8, "base_channels": 4}, seeds=(0, 1))
    for d in ab.deltas:
        assert d["accuracy"] == 0 and d["kappa"] == 0
        assert all(v == 0 or math.isnan(v) for v in d["tpr"])
    assert len(ab.baseline) == len(ab.augmented) == 2


def test_ab_pluggable_classifier(tiny_corpus):
    test = generate_corpus(78, [1] * 5, 64)
    fake = generate_corpus(79, [0, 0, 0, 0, 20], 64)
    ab = augmentation_ab(tiny_corpus, fake, test, seeds=(0,), classifier_factory=majority_factory)
    assert ab.augmented[0].tpr[4] == 1.0
    assert ab.deltas[0]["tpr"][4] == 1.0
    assert ab.median_delta_tpr((3, 4)) == pytest.approx(0.5)


def test_conditioning_fidelity_detects_lesion_use(tiny_corpus):
    from drgan.data import to_tensors

    c, _, y = to_tensors(tiny_corpus)

    def uses_lesions(c, g, gen):
        base = torch.rand(c.shape[0], 3, *c.shape[-2:], generator=gen) * 0.01
        return base + c[:, 2:].amax(dim=1, keepdim=True)

    res = conditioning_fidelity(uses_lesions, c, y)
    assert res.p_value < 0.01
    assert len(res.inside) == 8  # grade-0 samples carry no lesions

    def ignores(c, g, gen):
        return torch.rand(c.shape[0], 3, *c.shape[-2:], generator=gen)

    assert np.allclose(conditioning_fidelity(ignores, c, y).inside, 0)
