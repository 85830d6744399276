import math

import numpy as np
import pytest

from multipose.errors import DegenerateConfiguration, MissingAnchors, SchemaMismatch
from multipose.geometry import (
    Image,
    LandmarkSet,
    ReferenceModel,
    SimilarityTransform,
    align,
    alignment_residual,
    average_reference_model,
    estimate_roll,
    estimate_similarity_transform,
    load_reference_model,
    roll_correct,
    save_reference_model,
    warp_and_crop,
)

REF_5PT = np.array([
    [34.0, 56.0],   # left eye
    [94.0, 56.0],   # right eye
    [64.0, 92.0],   # nose tip
    [44.0, 118.0],  # left mouth corner
    [84.0, 118.0],  # right mouth corner
])


def ref_model():
    return ReferenceModel("test-ref", LandmarkSet(REF_5PT, "5pt"))


def random_landmarks(rng, n=10, spread=100.0):
    return LandmarkSet(rng.uniform(-spread, spread, size=(n, 2)), f"rand{n}")


def random_transform(rng):
    s = rng.uniform(0.5, 2.0)
    theta = rng.uniform(-math.pi, math.pi)
    tx, ty = rng.uniform(-100, 100, size=2)
    return SimilarityTransform.from_params(s, theta, tx, ty)


def residual_of_params(params, src, ref):
    """Objective of the 4-parameter fit, vectorized over a (k, 4) parameter array."""
    a, b, tx, ty = params[:, 0:1], params[:, 1:2], params[:, 2:3], params[:, 3:4]
    x, y = src[:, 0][None, :], src[:, 1][None, :]
    u, v = ref[:, 0][None, :], ref[:, 1][None, :]
    r1 = a * x - b * y + tx - u
    r2 = b * x + a * y + ty - v
    return np.sum(r1 * r1 + r2 * r2, axis=1)


# ---------------------------------------------------------------------------
# SimilarityTransform type

def test_transform_params_roundtrip():
    t = SimilarityTransform.from_params(1.7, 0.3, 4.0, -2.0)
    assert t.scale == pytest.approx(1.7, abs=1e-12)
    assert t.rotation == pytest.approx(0.3, abs=1e-12)
    assert t.translation == pytest.approx([4.0, -2.0], abs=1e-12)


def test_transform_rejects_reflection():
    m = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]])
    with pytest.raises(ValueError):
        SimilarityTransform(m)


def test_transform_rejects_bad_bottom_row():
    m = np.eye(3)
    m[2, 0] = 1e-15
    with pytest.raises(ValueError):
        SimilarityTransform(m)


def test_inverse_and_compose():
    rng = np.random.default_rng(7)
    for _ in range(100):
        t = random_transform(rng)
        ident = t.compose(t.inverse()).matrix
        assert np.allclose(ident, np.eye(3), atol=1e-9)


# ---------------------------------------------------------------------------
# estimate_similarity_transform

def test_identity_when_src_equals_ref():
    src = LandmarkSet(REF_5PT, "5pt")
    t = estimate_similarity_transform(src, src)
    assert np.array_equal(t.matrix, np.eye(3))


def test_recovers_known_transform_inverse():
    # src = T0(ref) must be mapped back by exactly T0^-1
    t0 = SimilarityTransform.from_params(2.0, math.radians(30.0), 5.0, -3.0)
    ref = LandmarkSet(REF_5PT, "5pt")
    src = ref.transformed(t0)
    est = estimate_similarity_transform(src, ref)
    expected = np.linalg.inv(t0.matrix)  # independent inverse
    assert np.max(np.abs(est.matrix - expected)) < 1e-9


def test_noisy_fit_is_least_squares_optimal():
    rng = np.random.default_rng(42)
    t0 = SimilarityTransform.from_params(2.0, math.radians(30.0), 5.0, -3.0)
    ref_pts = rng.uniform(0, 128, size=(68, 2))
    ref = LandmarkSet(ref_pts, "68pt")
    src = LandmarkSet(t0.apply(ref_pts) + rng.normal(0.0, 0.5, size=(68, 2)), "68pt")

    est = estimate_similarity_transform(src, ref)
    r_est = alignment_residual(est, src, ref)

    t0_inv = np.linalg.inv(t0.matrix)
    naive = SimilarityTransform(np.where(np.abs(t0_inv) < 1e-15, 0.0, t0_inv))
    assert r_est <= alignment_residual(naive, src, ref)

    # beat 10,000 random 4-parameter candidates scattered around the fit
    p = np.array([est.matrix[0, 0], est.matrix[1, 0], est.matrix[0, 2], est.matrix[1, 2]])
    scales = np.repeat([1e-4, 1e-3, 1e-2, 1e-1, 1.0], 2000)[:, None]
    candidates = p[None, :] + rng.normal(size=(10000, 4)) * scales
    assert np.all(residual_of_params(candidates, src.points, ref.points) >= r_est - 1e-12)


def test_recovery_property_random_cases():
    rng = np.random.default_rng(3)
    for _ in range(300):
        pts = random_landmarks(rng, n=int(rng.integers(2, 30)))
        t0 = random_transform(rng)
        src = pts.transformed(t0)
        est = estimate_similarity_transform(src, pts)
        err = np.linalg.norm(est.matrix - np.linalg.inv(t0.matrix))
        assert err < 1e-8
        # non-reflectivity
        assert np.linalg.det(est.matrix[:2, :2]) > 0


def test_optimality_under_small_perturbations():
    rng = np.random.default_rng(11)
    pts = random_landmarks(rng, n=12)
    t0 = random_transform(rng)
    src = LandmarkSet(t0.apply(pts.points) + rng.normal(0, 1.0, (12, 2)), "rand12")
    est = estimate_similarity_transform(src, pts)
    r_est = alignment_residual(est, src, pts)
    p = np.array([est.matrix[0, 0], est.matrix[1, 0], est.matrix[0, 2], est.matrix[1, 2]])
    perturbed = p[None, :] + rng.normal(scale=1e-3, size=(1000, 4))
    assert np.all(residual_of_params(perturbed, src.points, pts.points) >= r_est)


def test_equivariance_under_source_transform():
    # estimate(A*src, ref) == estimate(src, ref) . A^-1
    rng = np.random.default_rng(19)
    for _ in range(50):
        pts = random_landmarks(rng, n=8)
        ref = random_landmarks(rng, n=8)
        a = random_transform(rng)
        lhs = estimate_similarity_transform(pts.transformed(a), ref)
        rhs = estimate_similarity_transform(pts, ref).compose(a.inverse())
        assert np.allclose(lhs.matrix, rhs.matrix, atol=1e-8)


def test_schema_mismatch():
    with pytest.raises(SchemaMismatch):
        estimate_similarity_transform(
            LandmarkSet(REF_5PT, "5pt"), LandmarkSet(np.zeros((5, 2)), "other5"))


def test_degenerate_coincident_points():
    pts = LandmarkSet(np.ones((5, 2)) * 3.0, "same")
    with pytest.raises(DegenerateConfiguration):
        estimate_similarity_transform(pts, LandmarkSet(REF_5PT, "same"))


def test_too_few_points():
    with pytest.raises(DegenerateConfiguration):
        estimate_similarity_transform(
            LandmarkSet(np.array([[1.0, 2.0]]), "one"),
            LandmarkSet(np.array([[0.0, 0.0]]), "one"))


# ---------------------------------------------------------------------------
# estimate_roll

def five_pt(left, right):
    pts = REF_5PT.copy()
    pts[0] = left
    pts[1] = right
    return LandmarkSet(pts, "5pt")


def test_roll_horizontal_eyes():
    assert estimate_roll(five_pt((40, 60), (88, 60))) == 0.0


def test_roll_constructed_angle():
    lm = five_pt((40, 60), (40 + 48 * math.cos(0.2), 60 + 48 * math.sin(0.2)))
    assert estimate_roll(lm) == pytest.approx(0.2, abs=1e-12)


def test_roll_swapped_eyes_gives_pi():
    assert estimate_roll(five_pt((88, 60), (40, 60))) == pytest.approx(math.pi)


def test_roll_range_is_half_open():
    rng = np.random.default_rng(5)
    for _ in range(200):
        lm = five_pt(rng.uniform(0, 100, 2), rng.uniform(0, 100, 2))
        r = estimate_roll(lm)
        assert -math.pi < r <= math.pi


def test_roll_68pt_uses_eye_corner_means():
    pts = np.zeros((68, 2))
    pts[36] = (30, 62)   # left outer
    pts[39] = (46, 58)   # left inner; mean (38, 60)
    pts[42] = (82, 61)   # right inner
    pts[45] = (98, 59)   # right outer; mean (90, 60)
    assert estimate_roll(LandmarkSet(pts, "68pt")) == 0.0


def test_roll_missing_anchors():
    with pytest.raises(MissingAnchors):
        estimate_roll(LandmarkSet(np.zeros((4, 2)), "unregistered"))


# ---------------------------------------------------------------------------
# roll_correct

def checker_image(h=120, w=150, seed=0):
    rng = np.random.default_rng(seed)
    return Image(rng.integers(0, 256, size=(h, w), dtype=np.uint8))


def test_roll_correct_noop_when_level():
    img = checker_image()
    lm = five_pt((40, 60), (88, 60))
    out_img, out_lm = roll_correct(img, lm)
    assert np.array_equal(out_img.array, img.array)
    assert np.allclose(out_lm.points, lm.points, atol=1e-9)


def test_roll_correct_inverts_synthetic_rotation():
    # rotate level landmarks by +15 deg about their centroid, then correct
    base = five_pt((40, 60), (88, 60))
    theta = math.radians(15.0)
    c, s = math.cos(theta), math.sin(theta)
    centroid = base.points.mean(axis=0)
    rotated = (base.points - centroid) @ np.array([[c, -s], [s, c]]).T + centroid
    out_img, out_lm = roll_correct(checker_image(), LandmarkSet(rotated, "5pt"))
    assert np.allclose(out_lm.points, base.points, atol=1e-6)
    assert abs(estimate_roll(out_lm)) < 1e-9


def test_roll_correct_quarter_turn():
    pts = REF_5PT.copy()
    pts[0] = (60, 40)
    pts[1] = (60, 88)  # eye line pointing straight down: roll = +pi/2
    out_img, out_lm = roll_correct(checker_image(), LandmarkSet(pts, "5pt"))
    left, right = out_lm.points[0], out_lm.points[1]
    assert abs(right[1] - left[1]) < 1e-9
    assert abs(estimate_roll(out_lm)) < 1e-9


def test_roll_correct_moves_pixels_with_landmarks():
    # a bright dot planted at a landmark must follow it through the rotation
    img = np.zeros((120, 150), dtype=np.uint8)
    base = five_pt((40, 60), (88, 60))
    theta = math.radians(10.0)
    c, s = math.cos(theta), math.sin(theta)
    centroid = base.points.mean(axis=0)
    rotated = (base.points - centroid) @ np.array([[c, -s], [s, c]]).T + centroid
    dot = np.rint(rotated[2]).astype(int)  # nose, at integer pixel
    img[dot[1], dot[0]] = 255
    lm = LandmarkSet(rotated - (rotated[2] - dot), "5pt")  # snap so nose is exactly on the dot
    out_img, out_lm = roll_correct(Image(img), lm)
    nx, ny = out_lm.points[2]
    ix, iy = int(round(nx)), int(round(ny))
    window = out_img.array[max(iy - 1, 0):iy + 2, max(ix - 1, 0):ix + 2]
    # bilinear resampling spreads the dot over <= 4 pixels around the landmark
    assert int(window.sum()) >= 150
    assert window.max() >= 55
    assert out_img.array.sum() == window.sum()  # nothing lands elsewhere


# ---------------------------------------------------------------------------
# warp_and_crop

def test_identity_warp_exact():
    rng = np.random.default_rng(1)
    img = Image(rng.integers(0, 256, size=(160, 128), dtype=np.uint8))
    out = warp_and_crop(img, SimilarityTransform.identity(), ref_model())
    assert np.array_equal(out.array, img.array)


def test_integer_translation_exact_on_overlap():
    rng = np.random.default_rng(2)
    img = rng.integers(0, 256, size=(200, 180), dtype=np.uint8)
    t = SimilarityTransform.from_params(1.0, 0.0, 10.0, 5.0)
    out = warp_and_crop(Image(img), t, ref_model()).array
    # output (x,y) samples input (x-10, y-5)
    assert np.array_equal(out[5:160, 10:128], img[0:155, 0:118])
    assert np.all(out[:5, :] == 0) and np.all(out[:, :10] == 0)


def test_constant_image_invariant():
    img = Image(np.full((400, 400), 77, dtype=np.uint8))
    # build t so its inverse maps the whole crop inside the input
    t = SimilarityTransform.from_params(1.3, 0.4, 120.0, 140.0).inverse()
    out = warp_and_crop(img, t, ref_model())
    assert np.all(out.array == 77)


def test_rgb_warp_channels_independent():
    rng = np.random.default_rng(3)
    img = rng.integers(0, 256, size=(200, 180, 3), dtype=np.uint8)
    t = SimilarityTransform.from_params(1.0, 0.0, 7.0, 3.0)
    out = warp_and_crop(Image(img), t, ref_model()).array
    for ch in range(3):
        ref = warp_and_crop(Image(img[:, :, ch]), t, ref_model()).array
        assert np.array_equal(out[:, :, ch], ref)


def test_warp_then_crop_equals_direct():
    # single-resampling contract, checked where both paths are exact
    rng = np.random.default_rng(4)
    img = rng.integers(0, 256, size=(220, 200), dtype=np.uint8)
    t = SimilarityTransform.from_params(1.0, 0.0, -12.0, 30.0)
    direct = warp_and_crop(Image(img), t, ref_model()).array
    full_ref = ReferenceModel("full", LandmarkSet(np.array([[0.0, 0.0], [1.0, 1.0]]), "pair"),
                              crop_width=200, crop_height=220)
    warped_full = warp_and_crop(Image(img), t, full_ref).array
    assert np.array_equal(direct, warped_full[:160, :128])


# ---------------------------------------------------------------------------
# align

def test_align_identity_when_landmarks_match_ref():
    rng = np.random.default_rng(6)
    img = Image(rng.integers(0, 256, size=(160, 128), dtype=np.uint8))
    crop, t = align(img, LandmarkSet(REF_5PT, "5pt"), ref_model())
    assert np.array_equal(crop.array, img.array)
    assert np.allclose(t.matrix, np.eye(3), atol=1e-12)


def test_align_synthetic_round_trip():
    rng = np.random.default_rng(8)
    ref = ref_model()
    t0 = SimilarityTransform.from_params(1.4, math.radians(20.0), 90.0, 70.0)
    src_pts = t0.apply(ref.landmarks.points)
    img = Image(rng.integers(0, 256, size=(400, 400), dtype=np.uint8))
    crop, composed = align(img, LandmarkSet(src_pts, "5pt"), ref)
    assert crop.array.shape == (160, 128)
    back = composed.apply(src_pts)
    assert np.allclose(back, ref.landmarks.points, atol=1e-6)


def test_align_equals_manual_composition():
    rng = np.random.default_rng(9)
    ref = ref_model()
    t0 = SimilarityTransform.from_params(0.9, math.radians(-12.0), 60.0, 40.0)
    src = LandmarkSet(t0.apply(ref.landmarks.points), "5pt")
    img = Image(rng.integers(0, 256, size=(260, 260), dtype=np.uint8))

    crop, _ = align(img, src, ref)

    corrected_img, corrected_lm = roll_correct(img, src)
    manual = warp_and_crop(
        corrected_img, estimate_similarity_transform(corrected_lm, ref.landmarks), ref)
    assert np.array_equal(crop.array, manual.array)


def test_align_redetect_callback_used():
    ref = ref_model()
    img = Image(np.zeros((160, 128), dtype=np.uint8))
    calls = []

    def redetect(image, landmarks):
        calls.append(landmarks)
        return landmarks

    align(img, LandmarkSet(REF_5PT, "5pt"), ref, redetect=redetect)
    assert len(calls) == 1


# ---------------------------------------------------------------------------
# reference model files

def test_reference_model_file_roundtrip(tmp_path):
    model = ref_model()
    path = tmp_path / "ref.txt"
    save_reference_model(path, model)
    loaded = load_reference_model(path)
    assert loaded.name == model.name
    assert loaded.crop_width == 128 and loaded.crop_height == 160
    assert loaded.landmarks.schema_id == "5pt"
    assert np.array_equal(loaded.landmarks.points, model.landmarks.points)


def test_average_reference_model():
    rng = np.random.default_rng(10)
    sets = [LandmarkSet(REF_5PT + rng.normal(0, 1.0, REF_5PT.shape), "5pt") for _ in range(20)]
    model = average_reference_model("avg", sets)
    expected = np.mean([s.points for s in sets], axis=0)
    assert np.allclose(model.landmarks.points, expected)


def test_landmark_set_validation():
    with pytest.raises(ValueError):
        LandmarkSet(np.array([[np.nan, 0.0]]), "x")
    with pytest.raises(ValueError):
        LandmarkSet(np.zeros((4, 2)), "5pt")  # wrong count for registered schema
