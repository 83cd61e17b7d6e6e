"""Synthetic micrographs with known ground truth.

Good sites carry a CTF-modulated projection of the phantom; junk sites are
recorded but left as bare background, so a patch cut there is pure Gaussian
noise. Contamination is rendered as dark, smooth-edged disks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError, PlacementError
from .volume import CtfParams, Orientation, Volume3D, random_orientations, render

MAX_RETRIES = 10_000


@dataclass(frozen=True)
class SimConfig:
    n_good: int = 100
    n_junk: int = 100
    snr: float = 0.1
    min_separation: float = 64.0
    contamination_count: int = 2
    seed: int = 0
    width: int = 1280
    height: int = 1280
    noise_sigma: float = 1.0
    max_shift: float = 3.0
    contamination_amplitude: float = 10.0  # in units of noise_sigma
    junk_mode: str = "empty"

    def validate(self, patch_size: int) -> None:
        if not self.snr > 0:
            raise ParameterError("snr must be positive")
        if self.min_separation < patch_size / 2:
            raise ParameterError(f"min_separation must be >= {patch_size / 2}")
        if min(self.width, self.height) < 4 * patch_size:
            raise ParameterError(f"micrograph sides must be >= {4 * patch_size}")
        if self.n_good < 0 or self.n_junk < 0 or self.contamination_count < 0:
            raise ParameterError("counts must be non-negative")
        if self.junk_mode not in ("empty", "fragment"):
            raise ParameterError(f"unknown junk_mode {self.junk_mode!r}")
        if not self.noise_sigma > 0:
            raise ParameterError("noise_sigma must be positive")


@dataclass(frozen=True)
class Micrograph:
    data: np.ndarray
    pixel_size: float
    name: str = "mic000"

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class Particle:
    id: str
    x: int
    y: int
    kind: str  # "good" | "junk"
    orientation: Orientation | None = None


@dataclass(frozen=True)
class Contamination:
    x: float
    y: float
    radius: float
    amplitude: float


@dataclass
class GroundTruth:
    particles: list[Particle]
    noise_sigma: float
    contamination: list[Contamination] = field(default_factory=list)
    micrograph: str = "mic000"

    @property
    def good(self):
        return [p for p in self.particles if p.kind == "good"]

    @property
    def junk(self):
        return [p for p in self.particles if p.kind == "junk"]

    def to_csv(self, path, append=False) -> None:
        write_truth_csv(path, self.particles, append=append)


def write_truth_csv(path, particles, append=False) -> None:
    path = Path(path)
    header = not (append and path.exists())
    with path.open("a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(["id", "x", "y", "phi", "theta", "psi", "dx", "dy", "kind"])
        for p in particles:
            o = p.orientation
            angles = ["", "", "", "", ""] if o is None else \
                [f"{v:.10g}" for v in (o.phi, o.theta, o.psi, o.dx, o.dy)]
            w.writerow([p.id, p.x, p.y, *angles, p.kind])


def read_truth_csv(path) -> list[Particle]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            o = None
            if row["phi"] != "":
                o = Orientation(*(float(row[k]) for k in ("phi", "theta", "psi", "dx", "dy")))
            out.append(Particle(row["id"], int(row["x"]), int(row["y"]), row["kind"], o))
    return out


def _contamination_disk(shape, c: Contamination, taper: float) -> np.ndarray:
    h, w = shape
    y, x = np.ogrid[:h, :w]
    r = np.sqrt((x - c.x) ** 2 + (y - c.y) ** 2)
    t = np.clip((r - c.radius) / taper, 0, 1)
    return c.amplitude * 0.5 * (1 + np.cos(np.pi * t))


def _place_sites(rng, count, shape, margin, min_sep, blocked):
    h, w = shape
    pts = np.empty((0, 2))
    for placed in range(count):
        for _ in range(MAX_RETRIES):
            p = np.array([rng.integers(margin, w - margin + 1), rng.integers(margin, h - margin + 1)])
            if len(pts) and np.min(np.sum((pts - p) ** 2, axis=1)) < min_sep**2:
                continue
            if any((p[0] - cx) ** 2 + (p[1] - cy) ** 2 < cr**2 for cx, cy, cr in blocked):
                continue
            pts = np.vstack([pts, p])
            break
        else:
            raise PlacementError(
                f"placed only {placed} of {count} particles after {MAX_RETRIES} retries", placed)
    return pts.astype(int)


def synthesize_micrograph(vol: Volume3D, ctf: CtfParams, cfg: SimConfig,
                          name: str = "mic000") -> tuple[Micrograph, GroundTruth]:
    """Render one micrograph and its ground truth.

    Particle renders are scaled by one global factor so that the mean
    per-particle signal power ``||P mu||^2 / N^2`` equals ``snr * sigma^2``.
    ``snr=inf`` gives a noiseless micrograph whose renders have unit mean power.
    """
    n = vol.size
    cfg.validate(n)
    rng = np.random.default_rng(cfg.seed)
    shape = (cfg.height, cfg.width)
    noiseless = np.isinf(cfg.snr)
    sigma = 0.0 if noiseless else cfg.noise_sigma
    power = cfg.noise_sigma**2 if noiseless else cfg.snr * sigma**2

    particle_radius = 0.4 * n
    taper = particle_radius / 2
    contamination = []
    for _ in range(cfg.contamination_count):
        radius = rng.uniform(2, 6) * particle_radius
        contamination.append(Contamination(
            float(rng.uniform(0, cfg.width)), float(rng.uniform(0, cfg.height)),
            float(radius), -cfg.contamination_amplitude * sigma))
    blocked = [(c.x, c.y, c.radius + taper + n / 2) for c in contamination]

    total = cfg.n_good + cfg.n_junk
    sites = _place_sites(rng, total, shape, n // 2, cfg.min_separation, blocked)
    kinds = np.array(["good"] * cfg.n_good + ["junk"] * cfg.n_junk)[rng.permutation(total)]
    good_idx = np.flatnonzero(kinds == "good")
    orients = random_orientations(rng, len(good_idx), cfg.max_shift)

    renders = [render(vol, o, ctf) for o in orients]
    scale = 1.0
    if renders:
        mean_power = np.mean([np.mean(r**2) for r in renders])
        scale = np.sqrt(power / mean_power)

    img = np.zeros(shape)
    for c in contamination:
        if c.amplitude:
            img += _contamination_disk(shape, c, taper)
    half = n // 2
    for i, r in zip(good_idx, renders):
        x, y = sites[i]
        img[y - half:y + half, x - half:x + half] += scale * r

    junk_orients = {}
    if cfg.junk_mode == "fragment":
        frag = fragment_volume(vol)
        for i in np.flatnonzero(kinds == "junk"):
            o = random_orientations(rng, 1, cfg.max_shift)[0]
            x, y = sites[i]
            img[y - half:y + half, x - half:x + half] += scale * render(frag, o, ctf)
            junk_orients[i] = o

    if sigma > 0:
        img += rng.normal(0.0, sigma, size=shape)

    orient_of = dict(zip(good_idx, orients))
    particles = [
        Particle(f"{name}/{i}", int(sites[i][0]), int(sites[i][1]), str(kinds[i]),
                 orient_of.get(i, junk_orients.get(i)))
        for i in range(total)
    ]
    truth = GroundTruth(particles, sigma, contamination, name)
    return Micrograph(img, ctf.pixel_size, name), truth


def fragment_volume(vol: Volume3D) -> Volume3D:
    """The phantom with the half-space ``x > 0`` deleted."""
    n = vol.size
    keep = (np.arange(n) - n // 2) <= 0
    return Volume3D(vol.data * keep[None, None, :], vol.voxel_size)


def crop(image: np.ndarray, x: int, y: int, n: int) -> np.ndarray:
    half = n // 2
    if y - half < 0 or x - half < 0 or y + half > image.shape[0] or x + half > image.shape[1]:
        raise ParameterError(f"crop at ({x}, {y}) leaves the image")
    return image[y - half:y + half, x - half:x + half]


def measure_snr(micrograph: Micrograph, truth: GroundTruth, vol: Volume3D,
                ctf: CtfParams) -> float:
    """Signal-to-noise ratio of the good particles, measured from the micrograph.

    The render amplitude is estimated by pooled least squares of each good
    patch against its noiseless render; the result is the mean of
    ``||a P_j mu||^2 / (sigma^2 N^2)``.
    """
    good = truth.good
    if not good:
        raise ParameterError("no good particles to measure")
    n = vol.size
    renders = [render(vol, p.orientation, ctf) for p in good]
    patches = [crop(micrograph.data, p.x, p.y, n) for p in good]
    num = sum(float(np.vdot(y, r)) for y, r in zip(patches, renders))
    den = sum(float(np.vdot(r, r)) for r in renders)
    amp = num / den
    signal = amp**2 * den / len(good) / n**2
    if truth.noise_sigma == 0:
        return float("inf")
    return signal / truth.noise_sigma**2
