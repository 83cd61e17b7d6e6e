import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cryosort.align import (BandCoder, FrequencyBand, OrientationGrid, Patch, ReferenceBank,
                            ScoreRecord, match_orientation, ncc, ncc_many, read_scores_csv,
                            score_dataset, score_fixed, write_scores_csv)
from cryosort.errors import ParameterError, ScoreError
from cryosort.sort import bic_margin
from cryosort.volume import (Orientation, Volume3D, euler_to_matrix, lowpass, make_phantom,
                             random_orientations, render)

PIXEL = 2.5


def band_limit(img, band, pixel_size):
    """Real-space band-limited copy built from the full 2-D FFT."""
    n = img.shape[0]
    ky = np.fft.fftfreq(n)[:, None]
    kx = np.fft.fftfreq(n)[None, :]
    k = np.sqrt(kx**2 + ky**2) / pixel_size
    mask = k >= band.lo
    if band.hi < 0.5 / pixel_size:
        mask &= k <= band.hi
    return np.fft.ifft2(np.fft.fft2(img) * mask).real


def patch(img):
    return Patch(np.asarray(img, float), PIXEL)


# ------------------------------------------------------------------ ncc

def test_ncc_identity_and_negation(rng):
    x = rng.standard_normal((32, 32))
    full = FrequencyBand.full(PIXEL)
    assert ncc(patch(x), patch(x), full) == pytest.approx(1.0, abs=1e-12)
    assert ncc(patch(x), patch(-x), full) == pytest.approx(-1.0, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), lo=st.floats(0, 0.05), width=st.floats(0.03, 0.2))
def test_ncc_matches_real_space_oracle(seed, lo, width):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 32, 32))
    band = FrequencyBand(lo, min(lo + width, 0.2))
    fa, fb = band_limit(a, band, PIXEL), band_limit(b, band, PIXEL)
    expected = np.vdot(fa, fb) / (np.linalg.norm(fa) * np.linalg.norm(fb))
    got = ncc(patch(a), patch(b), band)
    assert got == pytest.approx(expected, abs=1e-10)
    assert -1.0 <= got <= 1.0


def test_full_band_ncc_is_cosine(rng):
    a, b = rng.standard_normal((2, 64, 64))
    expected = np.vdot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
    assert ncc(patch(a), patch(b), FrequencyBand.full(PIXEL)) == pytest.approx(expected, abs=1e-12)


def test_parseval_band_vectors(rng):
    a = rng.standard_normal((32, 32))
    band = FrequencyBand()
    coder = BandCoder(32, PIXEL, band)
    v = coder.encode(coder.coefficients(a))
    fa = band_limit(a, band, PIXEL)
    assert v @ v == pytest.approx(32**2 * np.vdot(fa, fa), rel=1e-10)


def test_ncc_zero_norm_raises():
    with pytest.raises(ScoreError):
        ncc(patch(np.ones((32, 32))), patch(np.ones((32, 32))), FrequencyBand())


def test_ncc_shape_mismatch():
    with pytest.raises(ParameterError):
        ncc(patch(np.zeros((32, 32))), patch(np.zeros((64, 64))), FrequencyBand())


@pytest.mark.parametrize("lo,hi", [(-0.1, 0.1), (0.1, 0.1), (0.2, 0.1)])
def test_band_validation(lo, hi):
    with pytest.raises(ParameterError):
        FrequencyBand(lo, hi)


def test_band_above_nyquist():
    with pytest.raises(ParameterError):
        FrequencyBand(0.0, 0.5).rfft_mask(32, PIXEL)


def test_noise_ncc_std_is_one_over_n(phantom64, ctf):
    rng = np.random.default_rng(31)
    ref = render(phantom64, random_orientations(rng, 1)[0], ctf)
    noise = rng.standard_normal((10_000, 64, 64))
    scores = ncc_many(noise, ref, FrequencyBand.full(PIXEL), PIXEL)
    assert scores.std() == pytest.approx(1 / 64, rel=0.05)


# ------------------------------------------------------------------ grid

def test_fibonacci_grid_size_and_spacing():
    g = OrientationGrid.fibonacci(7.5)
    assert g.n_in_plane == 48
    assert 800 <= g.n_directions <= 900
    assert np.rad2deg(g.spacing) < 2 * 7.5
    assert len(g) == g.n_directions * 48
    assert g.shifts().shape == (49, 2)


def test_grid_validation():
    with pytest.raises(ParameterError):
        OrientationGrid(np.empty((0, 3)), 0.1)
    with pytest.raises(ParameterError):
        OrientationGrid(np.array([[0, 0, 1.0]]), 0.0)
    with pytest.raises(ParameterError):
        OrientationGrid(np.array([[0, 0, 1.0]]), 0.1, max_shift=-1)


def test_grid_angles_reproduce_direction():
    g = OrientationGrid.fibonacci(15.0)
    for idx in (0, 37, len(g) - 1):
        r = euler_to_matrix(*g.angles(idx))
        d = g.directions[idx // g.n_in_plane]
        assert np.allclose(r[:, 2], d, atol=1e-12)


# ------------------------------------------------------------------ matching

@pytest.mark.parametrize("index,shift", [(0, (0, 0)), (1234, (2, -1)), (5000, (-3, 3))])
def test_self_match(phantom32, ctf, coarse_grid, bank32, index, shift):
    index = index % len(coarse_grid)
    o = coarse_grid.orientation(index, *shift)
    img = render(phantom32, o, ctf)
    rec = match_orientation(patch(img), phantom32, ctf, coarse_grid, FrequencyBand(), bank=bank32)
    assert rec.candidate == index
    assert (rec.orientation.dx, rec.orientation.dy) == pytest.approx(shift, abs=1e-6)
    assert rec.score >= 0.999


def test_pure_noise_scores_below_six_over_n(phantom32, ctf):
    # Full band at N=32 on the default grid; see the decisions ledger for the calibration.
    rng = np.random.default_rng(5)
    grid = OrientationGrid.fibonacci(7.5)
    band = FrequencyBand.full(PIXEL)
    imgs = rng.standard_normal((150, 32, 32))
    recs = score_dataset([patch(x) for x in imgs], phantom32, ctf, grid, band)
    scores = np.array([r.score for r in recs])
    assert np.mean(np.abs(scores) < 6 / 32) >= 0.99


def local_grid(target, spacing_deg, in_plane_deg):
    """Fibonacci directions within three spacings of ``target``."""
    g = OrientationGrid.fibonacci(spacing_deg, in_plane_deg)
    near = g.directions @ target > np.cos(np.deg2rad(3 * spacing_deg))
    return OrientationGrid(g.directions[near], g.in_plane_step, 0)


def midway_orientation(spacing_deg):
    g = OrientationGrid.fibonacci(spacing_deg)
    d = g.directions
    i = len(d) // 3
    j = int(np.argsort(d @ d[i])[-2])  # nearest neighbour of direction i
    m = d[i] + d[j]
    m /= np.linalg.norm(m)
    return m, Orientation(float(np.arctan2(m[1], m[0]) % (2 * np.pi)),
                          float(np.arccos(np.clip(m[2], -1, 1))), 0.0)


def test_midway_score_ladder(phantom32, ctf):
    band = FrequencyBand()
    losses = []
    for spacing in (15.0, 7.5, 3.75):
        target, o = midway_orientation(spacing)
        grid = local_grid(target, spacing, spacing)
        img = render(phantom32, o, ctf)
        mid = match_orientation(patch(img), phantom32, ctf, grid, band).score
        own = OrientationGrid(target[None], grid.in_plane_step, 0)
        self_score = match_orientation(patch(img), phantom32, ctf, own, band).score
        assert mid < self_score
        losses.append(self_score - mid)
    assert losses[0] > losses[1] > losses[2] > 0


def test_nested_grid_refinement_never_lowers_score(phantom32, ctf):
    rng = np.random.default_rng(8)
    coarse = OrientationGrid.fibonacci(20.0, 20.0, max_shift=2)
    extra = OrientationGrid.fibonacci(14.0).directions
    # Halving the in-plane step keeps every coarse angle; appending directions keeps every coarse direction.
    fine = OrientationGrid(np.vstack([coarse.directions, extra]), coarse.in_plane_step / 2, 2)
    imgs = [render(phantom32, o, ctf) + 3.0 * rng.standard_normal((32, 32))
            for o in random_orientations(rng, 12, 2.0)]
    band = FrequencyBand()
    a = score_dataset([patch(x) for x in imgs], phantom32, ctf, coarse, band)
    b = score_dataset([patch(x) for x in imgs], phantom32, ctf, fine, band)
    for ra, rb in zip(a, b):
        assert rb.score >= ra.score - 1e-6


def test_singleton_equals_match(phantom32, ctf, coarse_grid, bank32, rng):
    img = patch(rng.standard_normal((32, 32)))
    one = score_dataset([img], phantom32, ctf, coarse_grid, FrequencyBand(), bank=bank32)[0]
    rec = match_orientation(img, phantom32, ctf, coarse_grid, FrequencyBand(), bank=bank32)
    assert one == rec


def test_order_and_worker_invariance(phantom32, ctf, coarse_grid, bank32):
    rng = np.random.default_rng(17)
    imgs = [patch(render(phantom32, o, ctf) + 4 * rng.standard_normal((32, 32)))
            for o in random_orientations(rng, 70, 2.0)]
    ids = [f"p{i}" for i in range(70)]
    band = FrequencyBand()
    base = score_dataset(imgs, phantom32, ctf, coarse_grid, band, ids=ids, bank=bank32)
    threaded = score_dataset(imgs, phantom32, ctf, coarse_grid, band, ids=ids, workers=3,
                             bank=bank32)
    assert base == threaded
    perm = rng.permutation(70)
    shuffled = score_dataset([imgs[i] for i in perm], phantom32, ctf, coarse_grid, band,
                             ids=[ids[i] for i in perm], bank=bank32)
    assert shuffled == [base[i] for i in perm]


def test_scores_within_bounds_and_zero_patch_flagged(phantom32, ctf, coarse_grid, bank32, rng):
    imgs = [patch(rng.standard_normal((32, 32))), patch(np.zeros((32, 32)))]
    recs = score_dataset(imgs, phantom32, ctf, coarse_grid, FrequencyBand(), bank=bank32)
    assert -1 <= recs[0].score <= 1 and not recs[0].failed
    assert recs[1].failed and np.isnan(recs[1].score) and recs[1].orientation is None


def test_score_dataset_errors(phantom32, ctf, coarse_grid):
    with pytest.raises(ParameterError):
        score_dataset([], phantom32, ctf, coarse_grid, FrequencyBand())
    with pytest.raises(ParameterError):
        score_dataset([np.zeros((64, 64))], phantom32, ctf, coarse_grid, FrequencyBand())
    with pytest.raises(ParameterError):
        score_dataset([Patch(np.ones((32, 32)), 1.0)], phantom32, ctf, coarse_grid,
                      FrequencyBand())


@pytest.mark.parametrize("reference", ["truth", "lowpass"])
def test_good_mean_exceeds_noise_mean(phantom32, ctf, coarse_grid, reference):
    rng = np.random.default_rng(23)
    vol = phantom32 if reference == "truth" else lowpass(phantom32, 1 / 3)
    good = []
    for o in random_orientations(rng, 40, 2.0):
        r = render(phantom32, o, ctf)
        good.append(r / np.sqrt(np.mean(r**2)) * np.sqrt(0.1) + rng.standard_normal((32, 32)))
    noise = list(rng.standard_normal((40, 32, 32)))
    band = FrequencyBand()
    g = score_dataset([patch(x) for x in good], vol, ctf, coarse_grid, band)
    n = score_dataset([patch(x) for x in noise], vol, ctf, coarse_grid, band)
    assert np.mean([r.score for r in g]) > np.mean([r.score for r in n])


def test_score_fixed_matches_ncc(phantom32, ctf, rng):
    orients = random_orientations(rng, 3)
    imgs = rng.standard_normal((3, 32, 32))
    band = FrequencyBand()
    got = score_fixed(list(imgs), phantom32, ctf, orients, band)
    for x, o, s in zip(imgs, orients, got):
        assert s == pytest.approx(ncc(patch(x), patch(render(phantom32, o, ctf)), band), abs=1e-12)


def test_bank_rejects_pixel_mismatch(phantom32, coarse_grid):
    from cryosort.volume import CtfParams
    with pytest.raises(ParameterError):
        ReferenceBank(phantom32, CtfParams(pixel_size=1.0), coarse_grid, FrequencyBand())


@pytest.mark.slow
def test_bimodal_scores_on_standard_set(phantom64, ctf):
    from cryosort.datasets import ground_truth_stack

    stack = ground_truth_stack(phantom64, ctf, 200, 200, 0.1, seed=3)
    recs = score_dataset(stack.patches, phantom64, ctf, OrientationGrid.fibonacci(7.5),
                         FrequencyBand())
    assert bic_margin([r.score for r in recs]) > 0


# ------------------------------------------------------------------ CSV

def test_scores_csv_round_trip(tmp_path):
    recs = [ScoreRecord("mic000/p0", Orientation(0.1, 1.2, 2.3, 0.5, -1.25), 0.3141592653, 2),
            ScoreRecord("mic000/p1", None, float("nan"), 2, -1, "zero norm")]
    path = tmp_path / "scores.csv"
    write_scores_csv(path, recs)
    assert path.read_text().splitlines()[0] == "particle_id,score,phi,theta,psi,dx,dy,iteration"
    back = read_scores_csv(path)
    assert back[0].particle_id == "mic000/p0"
    assert back[0].score == pytest.approx(0.3141592653, rel=1e-9)
    assert back[0].orientation.theta == pytest.approx(1.2)
    assert back[1].failed and back[1].orientation is None
