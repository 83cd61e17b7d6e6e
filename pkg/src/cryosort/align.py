"""Projection matching: best orientation and band-limited NCC score per patch.

Images are compared through their rfft2 coefficients inside a frequency
band. Each coefficient off the self-conjugate columns stands for itself and
its mirror, so it is weighted by 2; with that weighting the real inner
product of two "band vectors" equals the real-space inner product of the
band-limited images (times ``n**2``). Templates are stored as unit band
vectors, which turns the search over orientations and integer shifts into
one matrix product per batch.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ScoreError
from .volume import CtfParams, Orientation, Volume3D, euler_to_matrix

log = logging.getLogger(__name__)

PATCH_CHUNK = 32
TEMPLATE_CHUNK = 8192


@dataclass(frozen=True)
class FrequencyBand:
    """Scoring band in 1/Å. An upper edge at (or above) Nyquist keeps the
    corners of the square spectrum, so ``FrequencyBand(0, nyquist)`` is the
    whole spectrum."""

    lo: float = 1 / 40
    hi: float = 1 / 8

    def __post_init__(self):
        if not 0 <= self.lo < self.hi:
            raise ParameterError(f"invalid band [{self.lo}, {self.hi}]")

    @classmethod
    def full(cls, pixel_size: float) -> "FrequencyBand":
        return cls(0.0, 0.5 / pixel_size)

    def rfft_mask(self, n: int, pixel_size: float) -> np.ndarray:
        nyq = 0.5 / pixel_size
        if self.hi > nyq * (1 + 1e-9):
            raise ParameterError(f"band upper edge {self.hi:.4g} exceeds Nyquist {nyq:.4g}")
        ky = np.fft.fftfreq(n)[:, None]
        kx = np.fft.rfftfreq(n)[None, :]
        k = np.sqrt(kx**2 + ky**2) / pixel_size
        mask = k >= self.lo
        if self.hi < nyq * (1 - 1e-9):
            mask &= k <= self.hi
        return mask


@dataclass(frozen=True)
class Patch:
    data: np.ndarray
    pixel_size: float
    source: tuple = ("", -1)

    @property
    def size(self) -> int:
        return self.data.shape[0]


def _pixels(x, pixel_size):
    if isinstance(x, Patch):
        return x.data, x.pixel_size
    return np.asarray(x, dtype=np.float64), pixel_size


class BandCoder:
    """Maps images to weighted real vectors of their in-band rfft2 coefficients."""

    def __init__(self, n: int, pixel_size: float, band: FrequencyBand):
        self.n = n
        self.pixel_size = pixel_size
        self.band = band
        mask = band.rfft_mask(n, pixel_size)
        self.iy, self.ix = np.nonzero(mask)
        if self.iy.size == 0:
            raise ScoreError("frequency band contains no Fourier samples")
        ky = np.fft.fftfreq(n)[self.iy]
        kx = np.fft.rfftfreq(n)[self.ix]
        self.kx, self.ky = kx, ky
        w = np.where((self.ix == 0) | (self.ix == n // 2), 1.0, 2.0)
        self.sqrt_w = np.sqrt(w)
        self.k_inv_angstrom = np.sqrt(kx**2 + ky**2) / pixel_size
        # Re-centres image coefficients on pixel n // 2, the projector's origin.
        self.centre = np.where((self.ix + self.iy) % 2, -1.0, 1.0)

    @property
    def dof(self) -> int:
        """Real degrees of freedom of a band-limited real image."""
        full = np.where((self.ix == 0) | (self.ix == self.n // 2), 1, 2)
        selfconj = (self.ix == 0) | (self.ix == self.n // 2)
        selfconj &= (self.iy == 0) | (self.iy == self.n // 2)
        return int(full.sum() - selfconj.sum())

    def coefficients(self, images: np.ndarray) -> np.ndarray:
        ft = np.fft.rfft2(np.asarray(images, dtype=np.float64))
        return ft[..., self.iy, self.ix] * self.centre

    def encode(self, coeffs: np.ndarray, dtype=np.float64) -> np.ndarray:
        c = coeffs * self.sqrt_w
        return np.concatenate([c.real, c.imag], axis=-1).astype(dtype, copy=False)

    def shift_phases(self, shifts: np.ndarray) -> np.ndarray:
        """Phases that translate a patch by ``-s``; scoring the result against a
        template equals scoring the patch against the template moved by ``+s``."""
        s = np.asarray(shifts, dtype=np.float64).reshape(-1, 2)
        return np.exp(2j * np.pi * (np.outer(s[:, 0], self.kx) + np.outer(s[:, 1], self.ky)))


def ncc(patch, reference, band: FrequencyBand, pixel_size: float | None = None) -> float:
    """Normalised cross-correlation of two images restricted to ``band``."""
    a, ps = _pixels(patch, pixel_size)
    b, ps_b = _pixels(reference, ps)
    ps = ps if ps is not None else ps_b
    if ps is None:
        raise ParameterError("pixel_size is required for bare arrays")
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    coder = BandCoder(a.shape[0], ps, band)
    va = coder.encode(coder.coefficients(a))
    vb = coder.encode(coder.coefficients(b))
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        raise ScoreError("zero norm inside the frequency band")
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


def ncc_many(patches: np.ndarray, references: np.ndarray, band: FrequencyBand,
             pixel_size: float) -> np.ndarray:
    """Row-wise band-limited NCC between two stacks (or a stack and one image)."""
    patches = np.asarray(patches, dtype=np.float64)
    coder = BandCoder(patches.shape[-1], pixel_size, band)
    va = coder.encode(coder.coefficients(patches))
    vb = coder.encode(coder.coefficients(references))
    num = np.sum(va * vb, axis=-1)
    den = np.linalg.norm(va, axis=-1) * np.linalg.norm(vb, axis=-1)
    if np.any(den == 0):
        raise ScoreError("zero norm inside the frequency band")
    return np.clip(num / den, -1.0, 1.0)


# ------------------------------------------------------------------ orientation grid

def fibonacci_sphere(count: int) -> np.ndarray:
    i = np.arange(count) + 0.5
    z = 1 - 2 * i / count
    r = np.sqrt(1 - z * z)
    golden = np.pi * (3 - np.sqrt(5))
    phi = golden * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


@dataclass(frozen=True, eq=False)
class OrientationGrid:
    directions: np.ndarray  # (d, 3) unit viewing axes
    in_plane_step: float  # radians
    max_shift: int = 3

    def __post_init__(self):
        d = np.atleast_2d(np.asarray(self.directions, dtype=np.float64))
        if d.shape[0] < 1 or d.shape[1] != 3:
            raise ParameterError("grid needs at least one 3-vector direction")
        d = d / np.linalg.norm(d, axis=1, keepdims=True)
        object.__setattr__(self, "directions", d)
        if not self.in_plane_step > 0:
            raise ParameterError("in_plane_step must be positive")
        if self.max_shift < 0:
            raise ParameterError("max_shift must be >= 0")

    @classmethod
    def fibonacci(cls, spacing_deg: float = 7.5, in_plane_step_deg: float | None = None,
                  max_shift: int = 3) -> "OrientationGrid":
        """Quasi-uniform sphere covering whose mean neighbour spacing is about ``spacing_deg``."""
        s = np.deg2rad(spacing_deg)
        count = max(1, int(np.ceil(2 / np.sqrt(3) * 4 * np.pi / s**2)))
        step = np.deg2rad(in_plane_step_deg if in_plane_step_deg is not None else spacing_deg)
        return cls(fibonacci_sphere(count), step, max_shift)

    @property
    def n_directions(self) -> int:
        return len(self.directions)

    @property
    def n_in_plane(self) -> int:
        return max(1, int(round(2 * np.pi / self.in_plane_step)))

    def __len__(self):
        return self.n_directions * self.n_in_plane

    @property
    def spacing(self) -> float:
        """Largest nearest-neighbour arc (radians) between directions."""
        d = self.directions
        if len(d) < 2:
            return np.pi
        from scipy.spatial import cKDTree
        dist, _ = cKDTree(d).query(d, k=2)
        chord = dist[:, 1].max()
        return float(2 * np.arcsin(min(chord / 2, 1.0)))

    def angles(self, index: int) -> tuple[float, float, float]:
        di, pi = divmod(int(index), self.n_in_plane)
        x, y, z = self.directions[di]
        phi = float(np.arctan2(y, x) % (2 * np.pi))
        theta = float(np.arccos(np.clip(z, -1, 1)))
        return phi, theta, float(pi * 2 * np.pi / self.n_in_plane)

    def orientation(self, index: int, dx: float = 0.0, dy: float = 0.0) -> Orientation:
        return Orientation(*self.angles(index), float(dx), float(dy))

    def rotations(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        stop = len(self) if stop is None else stop
        return np.stack([euler_to_matrix(*self.angles(i)) for i in range(start, stop)])

    def shifts(self) -> np.ndarray:
        s = np.arange(-self.max_shift, self.max_shift + 1)
        dy, dx = np.meshgrid(s, s, indexing="ij")
        return np.stack([dx.ravel(), dy.ravel()], axis=1)


# ------------------------------------------------------------------ scoring

@dataclass
class ScoreRecord:
    particle_id: str
    orientation: Orientation | None
    score: float
    iteration: int = 0
    candidate: int = -1
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


class ReferenceBank:
    """Unit band vectors of every CTF-modulated reference projection in a grid."""

    def __init__(self, vol: Volume3D, ctf: CtfParams | None, grid: OrientationGrid,
                 band: FrequencyBand):
        if ctf is not None and not np.isclose(ctf.pixel_size, vol.voxel_size):
            raise ParameterError("CTF pixel size differs from the volume voxel size")
        self.vol, self.ctf, self.grid, self.band = vol, ctf, grid, band
        self.n = vol.size
        self.coder = BandCoder(self.n, vol.voxel_size, band)
        self.shifts = grid.shifts()
        self.phases = self.coder.shift_phases(self.shifts)
        ctf_w = ctf(self.coder.k_inv_angstrom) if ctf is not None else 1.0
        plane = np.stack([self.coder.kx, self.coder.ky], axis=1)
        parts = []
        for start in range(0, len(grid), 2048):
            rots = grid.rotations(start, min(start + 2048, len(grid)))
            pts = np.einsum("tij,kj->tki", rots[:, :, :2], plane)
            coeffs = vol.sample_fourier(pts, single=True) * ctf_w
            vec = self.coder.encode(coeffs, np.float64)
            norms = np.linalg.norm(vec, axis=1, keepdims=True)
            if np.any(norms == 0):
                raise ScoreError("a reference projection is empty inside the band")
            parts.append((vec / norms).astype(np.float32))
        self.templates = np.concatenate(parts)

    def _patch_coefficients(self, images):
        coeffs = self.coder.coefficients(images)
        norms = np.linalg.norm(self.coder.encode(coeffs), axis=-1)
        return coeffs, norms

    def _ncc_at(self, coeffs, norm, template, shift):
        phase = self.coder.shift_phases(shift)[0]
        v = self.coder.encode(coeffs * phase)
        t = template.astype(np.float64)
        return float(v @ t / (norm * np.linalg.norm(t)))

    def match_batch(self, images: np.ndarray):
        """Best (candidate, shift, score) for a stack of images.

        Returns a list whose entries are ``(candidate, dx, dy, score)`` or an
        error string for images that are empty inside the band.
        """
        images = np.asarray(images, dtype=np.float64)
        coeffs, norms = self._patch_coefficients(images)
        ok = norms > 0
        out: list = ["zero norm inside the frequency band"] * len(images)
        if not ok.any():
            return out
        c = coeffs[ok] / norms[ok, None]
        b, ns = c.shape[0], len(self.shifts)
        rows = self.coder.encode(c[:, None, :] * self.phases[None], np.float32).reshape(b * ns, -1)
        best = np.full(b * ns, -np.inf, dtype=np.float32)
        arg = np.zeros(b * ns, dtype=np.int64)
        for start in range(0, len(self.templates), TEMPLATE_CHUNK):
            block = rows @ self.templates[start:start + TEMPLATE_CHUNK].T
            j = np.argmax(block, axis=1)
            v = block[np.arange(len(j)), j]
            better = v > best
            best[better] = v[better]
            arg[better] = j[better] + start
        best = best.reshape(b, ns)
        arg = arg.reshape(b, ns)
        for bi, idx in enumerate(np.flatnonzero(ok)):
            order = np.lexsort((np.arange(ns), arg[bi], -best[bi]))
            si = order[0]
            cand = int(arg[bi, si])
            s = self.shifts[si].astype(np.float64)
            tmpl = self.templates[cand]
            score = self._ncc_at(coeffs[idx], norms[idx], tmpl, s)
            refined = s.copy()
            for axis in (0, 1):
                e = np.zeros(2)
                e[axis] = 1.0
                fm = self._ncc_at(coeffs[idx], norms[idx], tmpl, s - e)
                fp = self._ncc_at(coeffs[idx], norms[idx], tmpl, s + e)
                curv = fm - 2 * score + fp
                if curv < 0:
                    refined[axis] += np.clip(0.5 * (fm - fp) / curv, -0.5, 0.5)
            refined = np.clip(refined, -self.grid.max_shift, self.grid.max_shift)
            out[idx] = (cand, float(refined[0]), float(refined[1]), float(np.clip(score, -1, 1)))
        return out


def _as_images(patches):
    arrs = []
    for p in patches:
        arrs.append(p.data if isinstance(p, Patch) else np.asarray(p, dtype=np.float64))
    return np.stack(arrs) if arrs else np.empty((0, 0, 0))


def score_dataset(patches, vol: Volume3D, ctf: CtfParams | None, grid: OrientationGrid,
                  band: FrequencyBand, iteration: int = 0, ids=None, workers: int = 1,
                  bank: ReferenceBank | None = None) -> list[ScoreRecord]:
    """Match every patch against ``vol``; output order follows input order.

    Patches are processed in fixed-size chunks, so the result does not
    depend on ``workers``. Failures are recorded on the affected record
    instead of aborting the run.
    """
    if len(patches) == 0:
        raise ParameterError("score_dataset needs at least one patch")
    images = _as_images(patches)
    if images.shape[1:] != (vol.size, vol.size):
        raise ParameterError(f"patch shape {images.shape[1:]} does not match volume side {vol.size}")
    for p in patches:
        if isinstance(p, Patch) and not np.isclose(p.pixel_size, vol.voxel_size):
            raise ParameterError("patch pixel size differs from volume voxel size")
    if bank is None:
        bank = ReferenceBank(vol, ctf, grid, band)
    ids = [str(i) for i in range(len(images))] if ids is None else [str(i) for i in ids]
    chunks = [(s, images[s:s + PATCH_CHUNK]) for s in range(0, len(images), PATCH_CHUNK)]
    results: list = [None] * len(images)

    def run(chunk):
        start, imgs = chunk
        for k, r in enumerate(bank.match_batch(imgs)):
            results[start + k] = r

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, chunks))
    else:
        for ch in chunks:
            run(ch)

    records = []
    for pid, r in zip(ids, results):
        if isinstance(r, str):
            records.append(ScoreRecord(pid, None, float("nan"), iteration, -1, r))
        else:
            cand, dx, dy, score = r
            records.append(ScoreRecord(pid, grid.orientation(cand, dx, dy), score, iteration, cand))
    return records


def match_orientation(patch, vol: Volume3D, ctf: CtfParams | None, grid: OrientationGrid,
                      band: FrequencyBand, bank: ReferenceBank | None = None,
                      particle_id: str = "0") -> ScoreRecord:
    rec = score_dataset([patch], vol, ctf, grid, band, ids=[particle_id], bank=bank)[0]
    if rec.failed:
        raise ScoreError(rec.error)
    return rec


def score_fixed(patches, vol: Volume3D, ctf: CtfParams | None, orientations,
                band: FrequencyBand) -> np.ndarray:
    """NCC of each patch against the reference rendered at a given orientation."""
    from .volume import render

    images = _as_images(patches)
    refs = np.stack([render(vol, o, ctf) for o in orientations])
    return ncc_many(images, refs, band, vol.voxel_size)


# ------------------------------------------------------------------ CSV

SCORE_FIELDS = ["particle_id", "score", "phi", "theta", "psi", "dx", "dy", "iteration"]


def write_scores_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_FIELDS)
        for r in records:
            o = r.orientation
            vals = ["", "", "", "", ""] if o is None else \
                [f"{v:.10g}" for v in (o.phi, o.theta, o.psi, o.dx, o.dy)]
            score = "nan" if r.failed else f"{r.score:.10g}"
            w.writerow([r.particle_id, score, *vals, r.iteration])


def read_scores_csv(path) -> list[ScoreRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            o = None
            if row["phi"] != "":
                o = Orientation(*(float(row[k]) for k in ("phi", "theta", "psi", "dx", "dy")))
            score = float(row["score"])
            err = "failed" if np.isnan(score) else None
            out.append(ScoreRecord(row["particle_id"], o, score, int(row["iteration"]), -1, err))
    return out
