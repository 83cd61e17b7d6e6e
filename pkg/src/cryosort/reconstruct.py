"""Direct Fourier inversion from oriented patches, with even/odd half-maps.

Each patch is zero-padded to twice its side, transformed, and inserted as a
central slice into an oversampled 3-D Fourier grid with trilinear weights.
The numerator accumulates ``w * CTF * F`` and the denominator
``w * (CTF**2 + kappa)``; their ratio is the map's Fourier transform.
Accumulation runs in a fixed particle order, so the output is bit-identical
for identical inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError, ParameterError
from .volume import CtfParams, FscCurve, Orientation, Volume3D, fsc, resolution_at_threshold

KAPPA = 1e-2
MIN_PARTICLES = 10
BATCH = 16


@dataclass
class Reconstruction:
    volume: Volume3D
    n_particles: int
    half_maps: tuple[Volume3D, Volume3D] | None = None

    def half_map_fsc(self) -> FscCurve:
        if self.half_maps is None:
            raise ParameterError("reconstruction has no half-maps")
        return fsc(*self.half_maps)


class _Accumulator:
    def __init__(self, n: int):
        self.n = n
        self.m = 2 * n
        self.num_re = np.zeros(self.m**3)
        self.num_im = np.zeros(self.m**3)
        self.den = np.zeros(self.m**3)

    def __iadd__(self, other):
        self.num_re += other.num_re
        self.num_im += other.num_im
        self.den += other.den
        return self

    def copy(self):
        c = _Accumulator(self.n)
        c += self
        return c

    def volume(self, voxel_size: float) -> Volume3D:
        m, n = self.m, self.n
        ok = self.den > 1e-12
        ft = np.zeros(m**3, dtype=np.complex128)
        ft[ok] = (self.num_re[ok] + 1j * self.num_im[ok]) / self.den[ok]
        ft = ft.reshape(m, m, m)
        pad = np.fft.fftshift(np.fft.ifftn(np.fft.ifftshift(ft))).real
        o = (m - n) // 2
        return Volume3D(pad[o:o + n, o:o + n, o:o + n].copy(), voxel_size)


def _insert(acc: _Accumulator, images: np.ndarray, rotations: np.ndarray,
            ctf: CtfParams | None, pixel_size: float) -> None:
    n, m = acc.n, acc.m
    o = (m - n) // 2
    k = np.fft.fftfreq(m)
    ky, kx = np.meshgrid(k, k, indexing="ij")
    inside = (kx**2 + ky**2) < (0.5 - 1.0 / m) ** 2
    kx, ky = kx[inside], ky[inside]
    c = ctf(np.sqrt(kx**2 + ky**2) / pixel_size) if ctf is not None else np.ones_like(kx)
    for b0 in range(0, len(images), BATCH):
        imgs = images[b0:b0 + BATCH]
        rots = rotations[b0:b0 + BATCH]
        pad = np.zeros((len(imgs), m, m))
        pad[:, o:o + n, o:o + n] = imgs
        ft = np.fft.fft2(np.fft.ifftshift(pad, axes=(1, 2)))[:, inside]
        # Slice positions in padded-grid index units, (z, y, x) order.
        pos = (np.einsum("bij,pj->bpi", rots[:, :, :2], np.stack([kx, ky], 1)) * m + m // 2)
        pos = pos[..., ::-1].reshape(-1, 3)
        vals_re = (ft.real * c).ravel()
        vals_im = (ft.imag * c).ravel()
        wden = np.broadcast_to(c**2 + KAPPA, ft.shape).ravel()
        base = np.floor(pos).astype(np.int64)
        frac = pos - base
        for dz in (0, 1):
            for dy in (0, 1):
                for dx in (0, 1):
                    w = (np.where(dz, frac[:, 0], 1 - frac[:, 0])
                         * np.where(dy, frac[:, 1], 1 - frac[:, 1])
                         * np.where(dx, frac[:, 2], 1 - frac[:, 2]))
                    idx = ((base[:, 0] + dz) * m + (base[:, 1] + dy)) * m + (base[:, 2] + dx)
                    size = m**3
                    acc.num_re += np.bincount(idx, w * vals_re, size)
                    acc.num_im += np.bincount(idx, w * vals_im, size)
                    acc.den += np.bincount(idx, w * wden, size)


def reconstruct(patches, orientations, ctf: CtfParams | None, grid_size: int,
                pixel_size: float | None = None, half_maps: bool = True,
                halves=None) -> Reconstruction:
    """Reconstruct a map from patches and their orientations.

    ``halves`` gives the half-set (0 or 1) of each patch; by default patches
    with even list index go to the first half-map and odd ones to the
    second. The full map pools both.
    """
    images = np.stack([getattr(p, "data", p) for p in patches]) if len(patches) else np.empty((0,))
    if len(images) != len(orientations):
        raise ParameterError("patches and orientations differ in length")
    if len(images) < MIN_PARTICLES:
        raise InsufficientDataError(
            f"reconstruction needs >= {MIN_PARTICLES} particles, got {len(images)}")
    if images.shape[1:] != (grid_size, grid_size):
        raise ParameterError(f"patch shape {images.shape[1:]} does not match grid {grid_size}")
    if pixel_size is None:
        pixel_size = getattr(patches[0], "pixel_size", None) or (ctf.pixel_size if ctf else 1.0)
    images = images.astype(np.float64)
    halves = np.arange(len(images)) % 2 if halves is None else np.asarray(halves)
    if halves.shape != (len(images),) or not np.all((halves == 0) | (halves == 1)):
        raise ParameterError("halves must hold one 0/1 entry per patch")
    # Undo the shift found during alignment before insertion.
    shifts = np.array([[o.dx, o.dy] for o in orientations])
    if np.any(shifts):
        ky = np.fft.fftfreq(grid_size)[:, None]
        kx = np.fft.rfftfreq(grid_size)[None, :]
        ph = np.exp(2j * np.pi * (kx[None] * shifts[:, 0, None, None] + ky[None] * shifts[:, 1, None, None]))
        images = np.fft.irfft2(np.fft.rfft2(images) * ph, s=(grid_size, grid_size))
    rots = np.stack([o.matrix() for o in orientations])
    accs = [_Accumulator(grid_size), _Accumulator(grid_size)]
    for parity in (0, 1):
        sel = halves == parity
        _insert(accs[parity], images[sel], rots[sel], ctf, pixel_size)
    full = accs[0].copy()
    full += accs[1]
    vol = full.volume(pixel_size)
    hm = (accs[0].volume(pixel_size), accs[1].volume(pixel_size)) if half_maps else None
    return Reconstruction(vol, len(images), hm)


@dataclass
class ComparisonReport:
    resolution_all: float  # 1/Å at FSC 0.143
    resolution_sorted: float
    fsc_all: FscCurve
    fsc_sorted: FscCurve
    truth_fsc_all: FscCurve | None
    truth_fsc_sorted: FscCurve | None
    probe_frequency: float
    n_all: int
    n_sorted: int
    volume_all: Volume3D | None = None
    volume_sorted: Volume3D | None = None

    @property
    def truth_gain(self) -> float:
        """Sorted minus unsorted FSC-vs-truth at the probe frequency."""
        if self.truth_fsc_all is None:
            return float("nan")
        return self.truth_fsc_sorted.at(self.probe_frequency) - self.truth_fsc_all.at(self.probe_frequency)

    def lines(self) -> list[str]:
        def ang(f):
            return f"{1 / f:.2f} A" if f > 0 else "inf"
        out = [
            f"all particles:    n={self.n_all:5d}  FSC0.143 resolution {ang(self.resolution_all)}",
            f"sorted particles: n={self.n_sorted:5d}  FSC0.143 resolution {ang(self.resolution_sorted)}",
        ]
        if self.truth_fsc_all is not None:
            out.append(
                f"FSC vs truth at {self.probe_frequency:.4f} 1/A: all "
                f"{self.truth_fsc_all.at(self.probe_frequency):.3f}, sorted "
                f"{self.truth_fsc_sorted.at(self.probe_frequency):.3f}")
        return out


def compare_sorted_vs_unsorted(patches, records, labels, ctf: CtfParams | None,
                               truth_vol: Volume3D | None, grid_size: int,
                               pixel_size: float | None = None) -> ComparisonReport:
    """Reconstruct from every scored particle and from the retained subset.

    Particle ``i`` belongs to half-set ``i % 2`` in both reconstructions,
    the same split :func:`cryosort.sort.refine_sort_loop` refines
    independently.
    """
    usable = [i for i, r in enumerate(records) if not r.failed]
    kept = [i for i in usable if labels[i]]
    rec_all = reconstruct([patches[i] for i in usable], [records[i].orientation for i in usable],
                          ctf, grid_size, pixel_size, halves=np.array(usable) % 2)
    rec_sorted = reconstruct([patches[i] for i in kept], [records[i].orientation for i in kept],
                             ctf, grid_size, pixel_size, halves=np.array(kept) % 2)
    f_all, f_sorted = rec_all.half_map_fsc(), rec_sorted.half_map_fsc()
    t_all = t_sorted = None
    nyq = rec_all.volume.nyquist
    if truth_vol is not None:
        t_all = fsc(rec_all.volume, truth_vol)
        t_sorted = fsc(rec_sorted.volume, truth_vol)
    return ComparisonReport(resolution_at_threshold(f_all), resolution_at_threshold(f_sorted),
                            f_all, f_sorted, t_all, t_sorted, nyq / 3, len(usable), len(kept),
                            rec_all.volume, rec_sorted.volume)


def orientation_list(records) -> list[Orientation]:
    return [r.orientation for r in records]
