"""Two-Gaussian score model, equal-probability threshold, and the refine-sort loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .align import FrequencyBand, OrientationGrid, ReferenceBank, ScoreRecord, score_dataset
from .errors import (FitError, InsufficientDataError, ParameterError, SortInfeasibleError,
                     ThresholdError)
from .reconstruct import MIN_PARTICLES, reconstruct
from .volume import CtfParams, Volume3D

log = logging.getLogger(__name__)

MIN_SCORES = 20


@dataclass(frozen=True)
class GaussianMixture2:
    """Component 1 is the low-scoring (noise) mode, component 2 the good one."""

    weights: tuple[float, float]
    means: tuple[float, float]
    stds: tuple[float, float]
    loglik: float = float("nan")
    n_iter: int = 0
    loglik_trace: tuple[float, ...] = ()

    @property
    def separation(self) -> float:
        return (self.means[1] - self.means[0]) / max(self.stds)

    def component_logpdf(self, x):
        x = np.asarray(x, dtype=np.float64)[..., None]
        w, m, s = (np.asarray(a) for a in (self.weights, self.means, self.stds))
        return np.log(w) - np.log(s) - 0.5 * np.log(2 * np.pi) - 0.5 * ((x - m) / s) ** 2

    def bic(self, n: int) -> float:
        return 5 * np.log(n) - 2 * self.loglik


def _loglik(x, w, m, s):
    lp = np.log(w) - np.log(s) - 0.5 * np.log(2 * np.pi) - 0.5 * ((x[:, None] - m) / s) ** 2
    return lp, logsumexp(lp, axis=1)


def fit_gmm2(scores, max_iter: int = 500, tol: float = 1e-8) -> GaussianMixture2:
    """Expectation-maximisation for a 1-D two-component Gaussian mixture.

    Initialised deterministically at the 25th/75th percentiles with the
    sample standard deviation for both components and equal weights.
    Standard deviations are floored at ``1e-4 * range(scores)``; the floored
    M-step is still a coordinate-wise maximiser, so the log-likelihood is
    non-decreasing.
    """
    x = np.asarray(scores, dtype=np.float64).ravel()
    x = x[np.isfinite(x)]
    if x.size < MIN_SCORES:
        raise FitError(f"need at least {MIN_SCORES} scores, got {x.size}")
    span = x.max() - x.min()
    if not span > 0:
        raise FitError("all scores are equal")
    floor = 1e-4 * span
    m = np.percentile(x, [25, 75]).astype(np.float64)
    if m[0] == m[1]:
        m = np.array([x.min(), x.max()])
    s = np.full(2, max(x.std(), floor))
    w = np.array([0.5, 0.5])

    trace = []
    lp, ll_i = _loglik(x, w, m, s)
    ll = float(ll_i.sum())
    trace.append(ll)
    it = 0
    for it in range(1, max_iter + 1):
        r = np.exp(lp - ll_i[:, None])
        nk = r.sum(axis=0)
        if np.any(nk <= 1e-9 * x.size):
            bad = int(np.argmin(nk)) + 1
            raise FitError(f"component {bad} lost all responsibility", component=bad)
        w = nk / x.size
        m = (r * x[:, None]).sum(axis=0) / nk
        s = np.sqrt((r * (x[:, None] - m) ** 2).sum(axis=0) / nk)
        s = np.maximum(s, floor)
        lp, ll_i = _loglik(x, w, m, s)
        new = float(ll_i.sum())
        trace.append(new)
        done = abs(new - ll) < tol * abs(ll) if ll != 0 else abs(new - ll) < tol
        ll = new
        if done:
            break

    order = np.argsort(m, kind="stable")
    w, m, s = w[order], m[order], s[order]
    for k in range(2):
        if s[k] <= floor * (1 + 1e-12) and w[k] * x.size < 2:
            raise FitError(f"component {k + 1} collapsed onto a single score", component=k + 1)
    return GaussianMixture2(tuple(map(float, w)), tuple(map(float, m)), tuple(map(float, s)),
                            ll, it, tuple(trace))


def fit_gaussian1(scores) -> tuple[float, float, float]:
    """Maximum-likelihood single Gaussian: ``(mean, std, loglik)``."""
    x = np.asarray(scores, dtype=np.float64)
    mu, sd = x.mean(), x.std()
    ll = float(np.sum(-np.log(sd) - 0.5 * np.log(2 * np.pi) - 0.5 * ((x - mu) / sd) ** 2))
    return float(mu), float(sd), ll


def bic_margin(scores) -> float:
    """BIC(1 Gaussian) - BIC(2-component mixture); positive favours two modes."""
    x = np.asarray(scores, dtype=np.float64)
    _, _, ll1 = fit_gaussian1(x)
    g = fit_gmm2(x)
    bic1 = 2 * np.log(x.size) - 2 * ll1
    return float(bic1 - g.bic(x.size))


def _log_odds_coefficients(g: GaussianMixture2):
    (w1, w2), (m1, m2), (s1, s2) = g.weights, g.means, g.stds
    a = 1 / s1**2 - 1 / s2**2
    b = -2 * (m1 / s1**2 - m2 / s2**2)
    c = m1**2 / s1**2 - m2**2 / s2**2 - 2 * np.log(w1 * s2 / (w2 * s1))
    return a, b, c


def equal_probability_point(g: GaussianMixture2) -> tuple[float, bool]:
    """Score where ``w1 phi1 = w2 phi2``, and whether the midpoint fallback was used."""
    m1, m2 = g.means
    if not m1 < m2:
        raise ThresholdError("mixture means coincide; no separation")
    w1, w2 = g.weights
    s1, s2 = g.stds
    if w1 == w2 and s1 == s2:
        # Symmetric: the root is the midpoint; skip the rounding of the general formula.
        return 0.5 * (m1 + m2), False
    a, b, c = _log_odds_coefficients(g)
    scale = max(abs(m1), abs(m2), m2 - m1)
    if abs(a) * scale <= 1e-12 * abs(b):
        roots = [-c / b] if b != 0 else []
    else:
        disc = b * b - 4 * a * c
        if disc < 0:
            roots = []
        else:
            q = -0.5 * (b + np.copysign(np.sqrt(disc), b))
            roots = [q / a] + ([c / q] if q != 0 else [])
    inside = [r for r in roots if m1 <= r <= m2]
    if not inside:
        return 0.5 * (m1 + m2), True
    x = min(inside, key=lambda r: abs(r - 0.5 * (m1 + m2)))
    for _ in range(3):
        f = a * x * x + b * x + c
        d = 2 * a * x + b
        if d == 0:
            break
        step = f / d
        x -= step
        if abs(step) < 1e-15 * max(1.0, abs(x)):
            break
    return float(x), False


def equal_probability_threshold(g: GaussianMixture2) -> float:
    x, degenerate = equal_probability_point(g)
    if degenerate:
        log.warning("no equal-probability root between the means; using the midpoint")
    return x


def classify(records, threshold: float) -> np.ndarray:
    """Boolean labels: ``score > threshold``. Failed records are never good."""
    scores = np.array([_score_of(r) for r in records], dtype=np.float64)
    if scores.size == 0:
        return np.zeros(0, dtype=bool)
    return np.where(np.isnan(scores), False, scores > threshold)


def _score_of(r):
    if isinstance(r, ScoreRecord):
        return np.nan if r.failed else r.score
    return float(r)


@dataclass
class SortResult:
    threshold: float
    labels: np.ndarray
    mixture: GaussianMixture2 | None
    diagnostics: dict = field(default_factory=dict)

    @property
    def retained(self) -> int:
        return int(np.count_nonzero(self.labels))


def two_modes(scores, g: GaussianMixture2, min_separation: float) -> str | None:
    """Why the fitted mixture ``g`` does not describe two populations, or ``None``.

    The separation statistic alone is unreliable: the maximum-likelihood
    split of a single Gaussian sample often has separation above 1. The
    split must also be preferred over one Gaussian by BIC.
    """
    if g.separation < min_separation:
        return f"separation {g.separation:.3f} < {min_separation}"
    x = np.asarray(scores, dtype=np.float64)
    _, _, ll1 = fit_gaussian1(x)
    margin = 2 * np.log(x.size) - 2 * ll1 - g.bic(x.size)
    if margin <= 0:
        return f"BIC prefers one Gaussian (margin {margin:.2f})"
    return None


def sort_scores(records, min_separation: float | None = None) -> SortResult:
    """Fit the mixture to the valid scores and split at the equal-probability point.

    With ``min_separation`` set, a fit that does not describe two
    populations (see :func:`two_modes`) raises :class:`SortInfeasibleError`.
    """
    scores = np.array([_score_of(r) for r in records], dtype=np.float64)
    valid = scores[np.isfinite(scores)]
    g = fit_gmm2(valid)
    if min_separation is not None:
        why = two_modes(valid, g, min_separation)
        if why:
            raise SortInfeasibleError(f"score distribution is unimodal ({why})")
    thr, degenerate = equal_probability_point(g)
    labels = classify(records, thr)
    diag = dict(loglik=g.loglik, em_iterations=g.n_iter, separation=g.separation,
                degenerate=degenerate, unimodal=False)
    return SortResult(thr, labels, g, diag)


# ------------------------------------------------------------------ refine-sort loop

@dataclass(frozen=True)
class LoopConfig:
    max_rounds: int = 7
    stability_tol: float = 0.005
    min_separation: float = 1.0
    noise_probe: int = 64
    seed: int = 0
    workers: int = 1
    min_rounds: int = 1  # stability is not checked before this round

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ParameterError("max_rounds must be >= 1")
        if not 1 <= self.min_rounds <= self.max_rounds:
            raise ParameterError("min_rounds must lie in [1, max_rounds]")
        if not (self.stability_tol > 0 and self.min_separation > 0):
            raise ParameterError("tolerances must be positive")


@dataclass(frozen=True)
class RoundRecord:
    round: int
    retained: int
    threshold: float
    mixture: GaussianMixture2 | None
    good_peak_std: float


@dataclass
class LoopTrace:
    rounds: list[RoundRecord] = field(default_factory=list)
    records: list[list[ScoreRecord]] = field(default_factory=list)

    def __len__(self):
        return len(self.rounds)

    @property
    def retained(self) -> list[int]:
        return [r.retained for r in self.rounds]

    @property
    def good_peak_stds(self) -> list[float]:
        return [r.good_peak_std for r in self.rounds]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["round", "retained", "threshold", "w1", "m1", "s1", "w2", "m2", "s2",
                        "good_peak_std"])
            for r in self.rounds:
                g = r.mixture
                mix = [""] * 6 if g is None else [f"{v:.10g}" for v in (
                    g.weights[0], g.means[0], g.stds[0], g.weights[1], g.means[1], g.stds[1])]
                w.writerow([r.round, r.retained, f"{r.threshold:.10g}", *mix,
                            f"{r.good_peak_std:.10g}"])

    @classmethod
    def from_csv(cls, path) -> "LoopTrace":
        rounds = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                g = None
                if row["w1"] != "":
                    g = GaussianMixture2((float(row["w1"]), float(row["w2"])),
                                         (float(row["m1"]), float(row["m2"])),
                                         (float(row["s1"]), float(row["s2"])))
                rounds.append(RoundRecord(int(row["round"]), int(row["retained"]),
                                          float(row["threshold"]), g, float(row["good_peak_std"])))
        return cls(rounds)


def noise_ceiling(bank: ReferenceBank, count: int, seed: int) -> np.ndarray:
    """Scores of ``count`` synthetic pure-noise patches against the bank."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6E6F6973]))
    imgs = rng.standard_normal((count, bank.n, bank.n))
    res = bank.match_batch(imgs)
    return np.array([r[3] for r in res if not isinstance(r, str)])


def sort_round(records, bank: ReferenceBank, cfg: LoopConfig) -> SortResult:
    """Sort one round of scores against the empirical noise mode.

    Pure-noise patches are scored against ``bank`` to find the noise
    ceiling (their highest score). If nearly every score lies above it
    (10th percentile), every particle is signal and the ceiling is the
    threshold. Otherwise the mixture must describe two populations (see
    :func:`two_modes`) whose upper mode lies above the ceiling, or
    :class:`SortInfeasibleError` is raised.
    """
    scores = np.array([_score_of(r) for r in records], dtype=np.float64)
    valid = scores[np.isfinite(scores)]
    ceiling = float(noise_ceiling(bank, cfg.noise_probe, cfg.seed).max())
    try:
        g = fit_gmm2(valid)
    except FitError as exc:
        g, why = None, str(exc)
    else:
        why = two_modes(valid, g, cfg.min_separation)
        if why is None and g.means[1] <= ceiling:
            why = f"upper mode {g.means[1]:.4f} is not above the noise ceiling {ceiling:.4f}"
    if valid.size and np.percentile(valid, 10) > ceiling:
        diag = dict(loglik=g.loglik if g else float("nan"), em_iterations=g.n_iter if g else 0,
                    separation=g.separation if g else float("nan"), degenerate=False,
                    unimodal=True, noise_ceiling=ceiling)
        return SortResult(ceiling, classify(records, ceiling), g, diag)
    if why is not None:
        raise SortInfeasibleError(f"scores do not split into signal and noise: {why}")
    thr, degenerate = equal_probability_point(g)
    diag = dict(loglik=g.loglik, em_iterations=g.n_iter, separation=g.separation,
                degenerate=degenerate, unimodal=False, noise_ceiling=ceiling)
    return SortResult(thr, classify(records, thr), g, diag)


def _score_halves(patches, refs, banks, ctf, grid, band, rnd, ids, workers):
    """Score half-set ``h`` (patch index ``i % 2 == h``) against ``refs[h]`` only."""
    records: list = [None] * len(patches)
    for h in (0, 1):
        idx = range(h, len(patches), 2)
        if not len(idx):
            continue
        sub = score_dataset([patches[i] for i in idx], refs[h], ctf, grid, band, iteration=rnd,
                            ids=[ids[i] for i in idx], workers=workers, bank=banks[h])
        for i, r in zip(idx, sub):
            records[i] = r
    return records


def refine_sort_loop(patches, initial_vol: Volume3D, ctf: CtfParams | None,
                     grid: OrientationGrid, band: FrequencyBand, cfg: LoopConfig = LoopConfig(),
                     ids=None, on_round=None):
    """Alternate scoring, sorting, and reconstruction until the retained count settles.

    Patches are split into half-sets by index parity and each half is
    aligned only against the half-map built from its own members, starting
    from the shared ``initial_vol``. Every round rescores all input patches;
    the sort pools both halves. Stops when the retained count changes by
    less than ``stability_tol`` (relative) from the previous round, but not
    before ``min_rounds``, or after ``max_rounds``.

    Returns ``(volume, sort_result, trace)``; ``volume`` pools both halves and
    ``trace.records`` holds the score records of every round.
    """
    n = initial_vol.size
    ids = [str(i) for i in range(len(patches))] if ids is None else [str(i) for i in ids]
    parity = np.arange(len(patches)) % 2
    ref = initial_vol
    refs = (initial_vol, initial_vol)
    trace = LoopTrace()
    result = None
    prev = None
    for rnd in range(1, cfg.max_rounds + 1):
        first = ReferenceBank(refs[0], ctf, grid, band)
        banks = (first, first if refs[1] is refs[0] else ReferenceBank(refs[1], ctf, grid, band))
        records = _score_halves(patches, refs, banks, ctf, grid, band, rnd, ids, cfg.workers)
        result = sort_round(records, banks[0], cfg)
        kept = np.flatnonzero(result.labels)
        good_std = result.mixture.stds[1] if result.mixture is not None and \
            not result.diagnostics.get("unimodal") else \
            float(np.std([records[i].score for i in kept])) if kept.size else float("nan")
        trace.rounds.append(RoundRecord(rnd, int(kept.size), result.threshold,
                                        result.mixture, float(good_std)))
        trace.records.append(records)
        log.info("round %d: retained %d, threshold %.5f", rnd, kept.size, result.threshold)
        if on_round is not None:
            on_round(rnd, records, result)
        if kept.size < MIN_PARTICLES or min(np.bincount(parity[kept], minlength=2)) < 1:
            raise InsufficientDataError(
                f"round {rnd} retained {kept.size} particles; need >= {MIN_PARTICLES}")
        rec = reconstruct([patches[i] for i in kept], [records[i].orientation for i in kept],
                          ctf, n, initial_vol.voxel_size, halves=parity[kept])
        ref, refs = rec.volume, rec.half_maps
        if (prev is not None and rnd >= cfg.min_rounds
                and abs(kept.size - prev) / max(prev, 1) < cfg.stability_tol):
            break
        prev = kept.size
    return ref, result, trace
