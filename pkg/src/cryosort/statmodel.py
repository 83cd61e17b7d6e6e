"""Monte-Carlo checks of the statistical model behind the score histogram.

* Pure-noise patches scored against a fixed unit reference follow
  ``N(0, 1/N^2)``.
* ``||eps|| / (sigma N)`` concentrates at 1 with spread ``1 / (N sqrt 2)``.
* Errors in the reference (``delta1``) and in the orientations
  (``delta2``) widen the good-score peak; a non-spherical molecule widens it
  even without errors.

Every experiment draws its randomness from ``SeedSequence([seed, i])``
streams, one per chunk of trials, so results do not depend on how chunks
are scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .align import FrequencyBand, ncc_many
from .errors import ParameterError
from .volume import (CtfParams, Volume3D, lowpass, make_phantom, perturb_orientation,
                     random_orientations, render)

ALLOWED_N = (32, 64, 128)
MIN_TRIALS = 1000
CHUNK = 500


def _check(n: int, trials: int) -> None:
    if n not in ALLOWED_N:
        raise ParameterError(f"N={n} is not supported; allowed values are {list(ALLOWED_N)}")
    if trials < MIN_TRIALS:
        raise ParameterError(f"trials={trials} is too few; need >= {MIN_TRIALS}")


def _chunks(trials: int):
    for i, start in enumerate(range(0, trials, CHUNK)):
        yield i, min(CHUNK, trials - start)


@dataclass(frozen=True)
class NoiseScoreExperiment:
    n: int
    trials: int
    band: FrequencyBand | None
    mean: float
    variance: float

    @property
    def predicted_variance(self) -> float:
        return 1.0 / self.n**2

    @property
    def relative_error(self) -> float:
        return self.variance / self.predicted_variance - 1

    @property
    def mean_tolerance(self) -> float:
        return 3.0 / (self.n * np.sqrt(self.trials))


def run_noise_law(n: int = 64, trials: int = 10_000, seed: int = 0,
                  band: FrequencyBand | None = None, pixel_size: float = 2.5) -> NoiseScoreExperiment:
    """Score Gaussian noise patches against one fixed reference projection.

    The reference is a CTF-modulated projection of a phantom at a random but
    fixed orientation; there is no maximisation over orientations.
    """
    _check(n, trials)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    vol = make_phantom(seed, 12, True, n, pixel_size)
    orient = random_orientations(rng, 1)[0]
    ref = render(vol, orient, CtfParams(pixel_size=pixel_size))
    band = band or FrequencyBand.full(pixel_size)
    scores = []
    for i, count in _chunks(trials):
        r = np.random.default_rng(np.random.SeedSequence([seed, 1, i]))
        scores.append(ncc_many(r.standard_normal((count, n, n)), ref, band, pixel_size))
    s = np.concatenate(scores)
    return NoiseScoreExperiment(n, trials, band, float(s.mean()), float(s.var(ddof=1)))


@dataclass(frozen=True)
class ChiSquareReport:
    n: int
    trials: int
    mean: float
    std: float

    @property
    def predicted_std(self) -> float:
        return 1.0 / (self.n * np.sqrt(2))


def run_chi_square_concentration(n: int = 64, trials: int = 10_000, seed: int = 0,
                                 sigma: float = 1.0) -> ChiSquareReport:
    """Distribution of ``||eps|| / (sigma N)`` for ``eps ~ N(0, sigma^2 I_{N^2})``."""
    _check(n, trials)
    vals = []
    for i, count in _chunks(trials):
        r = np.random.default_rng(np.random.SeedSequence([seed, 2, i]))
        eps = r.normal(0.0, sigma, size=(count, n * n))
        vals.append(np.linalg.norm(eps, axis=1) / (sigma * n))
    v = np.concatenate(vals)
    return ChiSquareReport(n, trials, float(v.mean()), float(v.std(ddof=1)))


@dataclass(frozen=True)
class SweepConfig:
    n_good: int = 200
    n_noise: int = 200
    snr: float = 0.1
    seed: int = 0
    band: FrequencyBand = field(default_factory=FrequencyBand)
    ctf: CtfParams | None = None


@dataclass(frozen=True)
class PerturbationExperiment:
    delta1: float  # ||mu - mu_ref|| / ||mu|| before renormalisation
    delta2: float  # geodesic orientation error, radians
    good_mean: float
    good_var: float
    noise_mean: float
    noise_var: float

    @property
    def width_ratio(self) -> float:
        """Good-peak std over noise-peak std."""
        return float(np.sqrt(self.good_var / self.noise_var))


def perturb_reference(vol: Volume3D, delta1: float, rng: np.random.Generator,
                      cutoff: float = 1.0) -> Volume3D:
    """Add noise of relative norm ``delta1``, then restore the original norm.

    The noise is low-passed to ``cutoff`` (fraction of Nyquist) and confined
    to the particle support, so it behaves like an error in the density
    rather than voxel-level grain that projection would average away.
    """
    if delta1 == 0:
        return vol
    n = vol.size
    z, y, x = np.mgrid[:n, :n, :n] - n // 2
    support = (x * x + y * y + z * z) < (0.4 * n) ** 2
    noise = rng.standard_normal(vol.data.shape)
    if cutoff < 1:
        noise = lowpass(Volume3D(noise, vol.voxel_size), cutoff).data
    noise = noise * support
    norm = np.linalg.norm(vol.data)
    out = vol.data + delta1 * norm * noise / np.linalg.norm(noise)
    return Volume3D(out * norm / np.linalg.norm(out), vol.voxel_size)


def run_perturbation_sweep(vol: Volume3D, delta1_levels, delta2_levels,
                           cfg: SweepConfig = SweepConfig()) -> list[PerturbationExperiment]:
    """Good- and noise-peak moments at every ``(delta1, delta2)`` level.

    A fixed set of good patches ``P_j mu + eps_j`` (global amplitude set by
    ``snr``) is scored at orientations jittered by ``delta2`` against a
    reference perturbed by ``delta1``, with the perturbation band-limited to
    the scoring band. Pure-noise patches are scored at random orientations
    against the same reference.
    """
    n = vol.size
    ctf = cfg.ctf or CtfParams(pixel_size=vol.voxel_size)
    cutoff = min(1.0, cfg.band.hi / vol.nyquist)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    orients = random_orientations(rng, cfg.n_good)
    clean = np.stack([render(vol, o, ctf) for o in orients])
    amp = np.sqrt(cfg.snr / np.mean(clean**2))
    good = amp * clean + rng.standard_normal(clean.shape)
    noise = rng.standard_normal((cfg.n_noise, n, n))
    noise_orients = random_orientations(rng, cfg.n_noise)

    out = []
    for d1 in sorted(delta1_levels):
        ref = perturb_reference(vol, d1, np.random.default_rng(
            np.random.SeedSequence([cfg.seed, 4, int(round(d1 * 1e6))])), cutoff)
        noise_refs = np.stack([render(ref, o, ctf) for o in noise_orients])
        ns = ncc_many(noise, noise_refs, cfg.band, vol.voxel_size)
        for d2 in sorted(delta2_levels):
            jr = np.random.default_rng(np.random.SeedSequence([cfg.seed, 5, int(round(d2 * 1e6))]))
            est = [perturb_orientation(o, d2, jr) for o in orients]
            refs = np.stack([render(ref, o, ctf) for o in est])
            gs = ncc_many(good, refs, cfg.band, vol.voxel_size)
            out.append(PerturbationExperiment(float(d1), float(d2), float(gs.mean()),
                                              float(gs.var(ddof=1)), float(ns.mean()),
                                              float(ns.var(ddof=1))))
    return out


@dataclass(frozen=True)
class NarrowingVerdict:
    passed: bool
    offending_round: int | None
    stds: tuple[float, ...]
    tolerance: float


def run_narrowing_trace(trace, tolerance: float = 0.1) -> NarrowingVerdict:
    """Check that the good-peak std never grows by ``tolerance`` or more between rounds.

    ``trace`` is a :class:`~cryosort.sort.LoopTrace` or a plain sequence of
    per-round stds. A rise of exactly ``tolerance`` counts as a failure.
    Rounds are numbered from 1.
    """
    stds = tuple(float(s) for s in getattr(trace, "good_peak_stds", trace))
    if len(stds) < 3:
        raise ParameterError(f"trace has {len(stds)} rounds; need >= 3")
    for i in range(1, len(stds)):
        limit = stds[i - 1] * (1 + tolerance)
        if stds[i] > limit or np.isclose(stds[i], limit, rtol=1e-12, atol=0):
            return NarrowingVerdict(False, i + 1, stds, tolerance)
    return NarrowingVerdict(True, None, stds, tolerance)


def noise_mode_agreement(noise_scores, low_mean: float, k: float = 2.0) -> bool:
    """Whether the low-scoring mode sits within ``k`` noise stds of the noise-score mean."""
    s = np.asarray(noise_scores, dtype=np.float64)
    return bool(abs(s.mean() - low_mean) <= k * s.std(ddof=1))
