import math

import numpy as np
import pytest

from multipose.errors import (
    DimMismatch,
    EmptyList,
    EmptyTemplate,
    NoComparablePairs,
    NoSharedPipelines,
    PipelineMismatch,
    ZeroVector,
)
from multipose.features import FeatureVector
from multipose.matching import (
    FusionConfig,
    RepresentationSet,
    ScoreMatrix,
    cosine_sim,
    image_similarity,
    load_score_matrix,
    pairwise_template_scores,
    save_score_matrix,
    softmax_fuse,
    template_similarity,
)


def fv(values, pipeline="p"):
    return FeatureVector(np.asarray(values, dtype=float), pipeline)


def rset(image_id, **pipeline_values):
    return RepresentationSet(
        image_id, {pid: fv(vals, pid) for pid, vals in pipeline_values.items()})


def oracle_fuse(scores, beta):
    """Direct formula, no shifting: sum(s e^(b s)) / sum(e^(b s))."""
    num = sum(s * math.exp(beta * s) for s in scores)
    den = sum(math.exp(beta * s) for s in scores)
    return num / den


# ---------------------------------------------------------------------------
# cosine_sim

def test_cosine_self_is_one():
    a = fv([0.3, -1.2, 4.0])
    assert cosine_sim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_cosine_orthogonal_is_zero():
    assert cosine_sim(fv([1, 0]), fv([0, 1])) == 0.0


def test_cosine_scale_invariance():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = rng.normal(size=5)
        c = rng.uniform(1e-6, 1e6)
        assert cosine_sim(fv(a), fv(c * a)) == pytest.approx(1.0, abs=1e-12)


def test_cosine_range_and_symmetry():
    rng = np.random.default_rng(1)
    for _ in range(200):
        a, b = fv(rng.normal(size=7)), fv(rng.normal(size=7))
        s = cosine_sim(a, b)
        assert -1.0 <= s <= 1.0
        assert cosine_sim(b, a) == s


def test_cosine_errors():
    with pytest.raises(DimMismatch):
        cosine_sim(fv([1, 2]), fv([1, 2, 3]))
    with pytest.raises(PipelineMismatch):
        cosine_sim(fv([1, 2], "a"), fv([1, 2], "b"))
    with pytest.raises(ZeroVector):
        cosine_sim(fv([0.0, 0.0]), fv([1.0, 0.0]))


# ---------------------------------------------------------------------------
# softmax_fuse

def test_fuse_single_score_identity():
    assert softmax_fuse([0.7312]) == 0.7312


def test_fuse_two_scores_beta_ten():
    expected = math.exp(10) / (1 + math.exp(10))
    assert softmax_fuse([0.0, 1.0], FusionConfig(beta=10.0)) == pytest.approx(
        expected, abs=1e-8)
    assert expected == pytest.approx(0.99995460, abs=1e-8)


def test_fuse_beta_zero_is_mean():
    rng = np.random.default_rng(2)
    for _ in range(50):
        s = rng.uniform(-1, 1, size=int(rng.integers(1, 10)))
        assert softmax_fuse(s, FusionConfig(beta=0.0)) == pytest.approx(
            s.mean(), abs=1e-12)


def test_fuse_matches_direct_formula():
    rng = np.random.default_rng(3)
    for _ in range(200):
        s = rng.uniform(-1, 1, size=int(rng.integers(1, 8)))
        beta = float(rng.uniform(0, 20))
        assert softmax_fuse(s, FusionConfig(beta=beta)) == pytest.approx(
            oracle_fuse(s, beta), abs=1e-10)


def test_fuse_bounded_by_min_max():
    rng = np.random.default_rng(4)
    for _ in range(300):
        s = rng.uniform(-1, 1, size=int(rng.integers(1, 12)))
        beta = float(rng.uniform(0, 100))
        out = softmax_fuse(s, FusionConfig(beta=beta))
        assert s.min() - 1e-12 <= out <= s.max() + 1e-12


def test_fuse_monotone_in_beta():
    rng = np.random.default_rng(5)
    for _ in range(100):
        s = np.unique(rng.uniform(-1, 1, size=6))
        betas = np.sort(rng.uniform(0, 50, size=5))
        values = [softmax_fuse(s, FusionConfig(beta=b)) for b in betas]
        assert np.all(np.diff(values) >= -1e-12)


def test_fuse_limit_is_max():
    rng = np.random.default_rng(6)
    for _ in range(50):
        s = rng.uniform(-1, 1, size=8)
        s[rng.integers(0, 8)] = s.max() + 0.01  # enforce a clear gap
        out = softmax_fuse(s, FusionConfig(beta=1e4))
        assert out == pytest.approx(s.max(), abs=1e-9)


def test_fuse_permutation_invariant_exactly():
    rng = np.random.default_rng(7)
    s = list(rng.uniform(-1, 1, size=9))
    base = softmax_fuse(s)
    for _ in range(20):
        rng.shuffle(s)
        assert softmax_fuse(s) == base


def test_fuse_empty_and_nonfinite():
    with pytest.raises(EmptyList):
        softmax_fuse([])
    with pytest.raises(ValueError):
        softmax_fuse([0.1, float("nan")])
    with pytest.raises(ValueError):
        FusionConfig(beta=-1.0)


# ---------------------------------------------------------------------------
# image_similarity

def test_image_similarity_identical_single_pipeline():
    x = rset("x", p=[1.0, 2.0, 3.0])
    assert image_similarity(x, x) == pytest.approx(1.0, abs=1e-12)


def test_image_similarity_two_pipelines_fused():
    # engineered per-pipeline cosines 0.2 and 0.8
    x = rset("x", a=[1.0, 0.0], b=[1.0, 0.0])
    y = RepresentationSet("y", {
        "a": fv([0.2, math.sqrt(1 - 0.04)], "a"),
        "b": fv([0.8, math.sqrt(1 - 0.64)], "b"),
    })
    expected = oracle_fuse([0.2, 0.8], 10.0)
    assert expected == pytest.approx(0.79852, abs=1e-4)
    assert image_similarity(x, y) == pytest.approx(expected, abs=1e-12)


def test_image_similarity_restricted_to_shared_pipelines():
    x = rset("x", a=[1.0, 0.0], b=[0.0, 1.0])
    y = rset("y", a=[1.0, 0.0], c=[1.0, 1.0])
    assert image_similarity(x, y) == pytest.approx(1.0, abs=1e-12)  # only "a" is shared


def test_image_similarity_no_shared_pipelines():
    with pytest.raises(NoSharedPipelines):
        image_similarity(rset("x", a=[1.0]), rset("y", b=[1.0]))


# ---------------------------------------------------------------------------
# template_similarity

def test_template_1x1_equals_image_similarity():
    x = rset("x", p=[1.0, 0.3])
    y = rset("y", p=[0.8, 0.4])
    assert template_similarity([x], [y]) == image_similarity(x, y)


def test_template_2x3_matches_enumeration_oracle():
    rng = np.random.default_rng(8)
    tx = [rset(f"x{i}", p=rng.normal(size=4)) for i in range(2)]
    ty = [rset(f"y{i}", p=rng.normal(size=4)) for i in range(3)]
    pair_scores = [image_similarity(x, y) for x in tx for y in ty]
    assert len(pair_scores) == 6
    assert template_similarity(tx, ty) == pytest.approx(
        oracle_fuse(pair_scores, 10.0), abs=1e-12)


def test_template_symmetry_exact():
    rng = np.random.default_rng(9)
    tx = [rset(f"x{i}", p=rng.normal(size=5), q=rng.normal(size=3)) for i in range(3)]
    ty = [rset(f"y{i}", p=rng.normal(size=5), q=rng.normal(size=3)) for i in range(2)]
    assert template_similarity(tx, ty) == template_similarity(ty, tx)


def test_template_image_order_invariant_exactly():
    rng = np.random.default_rng(10)
    tx = [rset(f"x{i}", p=rng.normal(size=5)) for i in range(4)]
    ty = [rset(f"y{i}", p=rng.normal(size=5)) for i in range(3)]
    base = template_similarity(tx, ty)
    assert template_similarity(tx[::-1], ty[::-1]) == base


def test_template_self_score_beats_random_on_separated_data():
    rng = np.random.default_rng(11)
    anchor = rng.normal(size=16)
    own = [rset(f"a{i}", p=anchor + rng.normal(scale=0.01, size=16)) for i in range(3)]
    strangers = [rset(f"s{i}", p=rng.normal(size=16)) for i in range(3)]
    self_score = template_similarity(own, own)
    assert self_score >= template_similarity(own, strangers)


def test_template_skips_unshared_pairs_but_errors_when_none_comparable():
    a = [rset("a1", p=[1.0, 0.0]), rset("a2", q=[1.0, 0.0])]
    b = [rset("b1", p=[1.0, 0.0])]
    # a2/b1 has no shared pipeline and is skipped; a1/b1 remains
    assert template_similarity(a, b) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(NoComparablePairs):
        template_similarity([rset("a2", q=[1.0])], [rset("b1", p=[1.0])])
    with pytest.raises(EmptyTemplate):
        template_similarity([], b)


def test_downstream_scale_invariance():
    rng = np.random.default_rng(12)
    tx = [rset(f"x{i}", p=rng.normal(size=6)) for i in range(2)]
    ty = [rset(f"y{i}", p=rng.normal(size=6)) for i in range(2)]
    base = template_similarity(tx, ty)
    scaled = [RepresentationSet(r.image_id, {k: fv(37.5 * v.values, k)
                                             for k, v in r.reps.items()}) for r in tx]
    assert template_similarity(scaled, ty) == pytest.approx(base, abs=1e-12)


# ---------------------------------------------------------------------------
# pairwise matrix and score CSV

def test_pairwise_matrix_matches_loops_and_jobs_are_deterministic():
    rng = np.random.default_rng(13)
    probes = [[rset(f"p{i}{k}", p=rng.normal(size=8)) for k in range(2)] for i in range(4)]
    gallery = [[rset(f"g{j}{k}", p=rng.normal(size=8)) for k in range(2)] for j in range(3)]
    serial = pairwise_template_scores(probes, gallery)
    expected = np.array([[template_similarity(p, g) for g in gallery] for p in probes])
    assert np.array_equal(serial, expected)
    threaded = pairwise_template_scores(probes, gallery, jobs=4)
    assert np.array_equal(serial, threaded)


def test_score_matrix_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(14)
    matrix = ScoreMatrix(
        probe_ids=[f"p{i}" for i in range(5)],
        gallery_ids=[f"g{j}" for j in range(4)],
        scores=rng.uniform(-1, 1, size=(5, 4)),
    )
    path = tmp_path / "scores.csv"
    save_score_matrix(path, matrix)
    loaded = load_score_matrix(path)
    assert loaded.probe_ids == matrix.probe_ids
    assert loaded.gallery_ids == matrix.gallery_ids
    assert np.array_equal(loaded.scores, matrix.scores)  # 17 sig digits round-trip
    head = path.read_text().splitlines()[0]
    assert head == "probe_template_id,gallery_template_id,score"


def test_score_matrix_mated_mask():
    matrix = ScoreMatrix(["p1", "p2"], ["g1", "g2"], np.zeros((2, 2)),
                         probe_subjects=["s1", "s9"], gallery_subjects=["s1", "s2"])
    assert np.array_equal(matrix.mated_mask(), [[True, False], [False, False]])
    with pytest.raises(ValueError):
        ScoreMatrix(["p"], ["g"], np.zeros((1, 1))).mated_mask()
