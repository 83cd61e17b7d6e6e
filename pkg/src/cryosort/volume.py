"""Density volumes, the projection + CTF imaging operator, and FSC.

Conventions
-----------
* Arrays are indexed ``[z, y, x]`` (volumes) and ``[y, x]`` (images); the
  origin of every box of even side ``n`` sits at index ``n // 2``.
* Rotations use intrinsic ZYZ Euler angles, ``R = Rz(phi) Ry(theta) Rz(psi)``.
  A projection integrates ``vol(R @ (x, y, t))`` over ``t``, so its 2-D
  Fourier transform is the 3-D transform sampled on the plane spanned by the
  first two columns of ``R``; the viewing axis is ``R @ e_z``.
* Frequencies are in cycles per pixel internally and in 1/Å at the public
  surface (FSC curves, frequency bands, CTF).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates, spline_filter
from scipy.spatial.transform import Rotation

from .errors import ParameterError

# Oversampling of the Fourier volume used by the slice projector.
PAD_FACTOR = 2


@dataclass(frozen=True, eq=False)
class Volume3D:
    data: np.ndarray
    voxel_size: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or len(set(data.shape)) != 1:
            raise ParameterError(f"volume must be cubic, got shape {data.shape}")
        n = data.shape[0]
        if n % 2 or n < 16:
            raise ParameterError(f"volume side must be even and >= 16, got {n}")
        if not self.voxel_size > 0:
            raise ParameterError("voxel_size must be positive")
        if not np.all(np.isfinite(data)):
            raise ParameterError("volume contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @property
    def size(self) -> int:
        return self.data.shape[0]

    @property
    def nyquist(self) -> float:
        return 0.5 / self.voxel_size

    def __neg__(self):
        return Volume3D(-self.data, self.voxel_size)

    def __mul__(self, a):
        return Volume3D(self.data * float(a), self.voxel_size)

    __rmul__ = __mul__

    @cached_property
    def _fourier_coefficients(self) -> np.ndarray:
        # Cubic B-spline coefficients of the zero-padded, centred 3-D FT.
        n = self.size
        m = PAD_FACTOR * n
        pad = np.zeros((m, m, m))
        o = (m - n) // 2
        pad[o:o + n, o:o + n, o:o + n] = self.data
        ft = np.fft.fftshift(np.fft.fftn(np.fft.ifftshift(pad)))
        coef = np.empty(ft.shape, dtype=np.complex128)
        coef.real = spline_filter(ft.real, order=3, mode="grid-wrap")
        coef.imag = spline_filter(ft.imag, order=3, mode="grid-wrap")
        return coef

    @cached_property
    def _fourier_coefficients32(self) -> np.ndarray:
        return self._fourier_coefficients.astype(np.complex64)

    def sample_fourier(self, points: np.ndarray, single: bool = False) -> np.ndarray:
        """Evaluate the volume's Fourier transform at arbitrary frequencies.

        Parameters
        ----------
        points : ndarray, shape (..., 3)
            ``(kx, ky, kz)`` in cycles per voxel. Points beyond Nyquist
            (``|k| > 0.5``) evaluate to zero.
        single : bool
            Interpolate in complex64 (faster, used for template banks).
        """
        points = np.asarray(points, dtype=np.float64)
        shape = points.shape[:-1]
        flat = points.reshape(-1, 3)
        m = PAD_FACTOR * self.size
        coords = flat[:, ::-1].T * m + m // 2
        coef = self._fourier_coefficients32 if single else self._fourier_coefficients
        vals = map_coordinates(coef, coords, order=3, mode="grid-wrap", prefilter=False)
        vals[np.einsum("ij,ij->i", flat, flat) > 0.25] = 0
        return vals.reshape(shape)


@dataclass(frozen=True)
class Orientation:
    """ZYZ Euler angles (radians) plus an in-plane shift in pixels."""

    phi: float = 0.0
    theta: float = 0.0
    psi: float = 0.0
    dx: float = 0.0
    dy: float = 0.0

    @property
    def euler(self) -> tuple[float, float, float]:
        return (self.phi, self.theta, self.psi)

    @property
    def shift(self) -> tuple[float, float]:
        return (self.dx, self.dy)

    def matrix(self) -> np.ndarray:
        return euler_to_matrix(self.phi, self.theta, self.psi)

    @classmethod
    def from_matrix(cls, r, dx=0.0, dy=0.0) -> "Orientation":
        phi, theta, psi = Rotation.from_matrix(r).as_euler("ZYZ")
        return cls(float(phi % (2 * np.pi)), float(theta), float(psi % (2 * np.pi)),
                   float(dx), float(dy))

    def with_shift(self, dx, dy) -> "Orientation":
        return Orientation(self.phi, self.theta, self.psi, float(dx), float(dy))


def euler_to_matrix(phi, theta, psi) -> np.ndarray:
    return Rotation.from_euler("ZYZ", [phi, theta, psi]).as_matrix()


def random_orientations(rng: np.random.Generator, count: int, max_shift: float = 0.0):
    """Orientations uniform on SO(3) with shifts uniform in ``[-max_shift, max_shift]``."""
    quats = rng.standard_normal((count, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    shifts = rng.uniform(-max_shift, max_shift, size=(count, 2)) if max_shift else np.zeros((count, 2))
    mats = Rotation.from_quat(quats).as_matrix()
    return [Orientation.from_matrix(r, *s) for r, s in zip(mats, shifts)]


def perturb_orientation(orient: Orientation, angle: float, rng: np.random.Generator) -> Orientation:
    """Rotate ``orient`` about a random axis by the geodesic ``angle`` (radians)."""
    if angle == 0:
        return orient
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    delta = Rotation.from_rotvec(axis * angle).as_matrix()
    return Orientation.from_matrix(delta @ orient.matrix(), orient.dx, orient.dy)


# --------------------------------------------------------------------------- CTF

def electron_wavelength(voltage_kv: float) -> float:
    """Relativistic electron wavelength in Å."""
    v = voltage_kv * 1e3
    h, m0, e, c = 6.62607015e-34, 9.1093837015e-31, 1.602176634e-19, 299792458.0
    lam = h / np.sqrt(2 * m0 * e * v * (1 + e * v / (2 * m0 * c**2)))
    return lam * 1e10


@dataclass(frozen=True)
class CtfParams:
    defocus: float = 15000.0  # Å, underfocus positive
    voltage: float = 300.0  # kV
    spherical_aberration: float = 2.7  # mm
    amplitude_contrast: float = 0.07
    pixel_size: float = 1.0  # Å

    def __post_init__(self):
        if self.defocus < 0:
            raise ParameterError("defocus must be non-negative (underfocus convention)")
        if not 0 <= self.amplitude_contrast <= 1:
            raise ParameterError("amplitude_contrast must lie in [0, 1]")
        if not self.pixel_size > 0 or not self.voltage > 0:
            raise ParameterError("pixel_size and voltage must be positive")

    @property
    def wavelength(self) -> float:
        return electron_wavelength(self.voltage)

    def chi(self, k):
        """Phase aberration at spatial frequency ``k`` (1/Å)."""
        lam = self.wavelength
        cs = self.spherical_aberration * 1e7
        k2 = np.square(k)
        return np.pi * lam * self.defocus * k2 - 0.5 * np.pi * cs * lam**3 * k2 * k2

    def __call__(self, k):
        """CTF value at spatial frequency ``k`` (1/Å); negative at low frequency."""
        a = self.amplitude_contrast
        chi = self.chi(k)
        return -(np.sqrt(1 - a * a) * np.sin(chi) + a * np.cos(chi))

    def first_zero(self) -> float:
        """Closed-form frequency (1/Å) of the first CTF zero.

        The CTF vanishes where ``chi = pi - arcsin(A)``; with ``u = k**2`` this
        is a quadratic in ``u``.
        """
        a = self.amplitude_contrast
        target = np.pi - np.arcsin(a)
        lam = self.wavelength
        cs = self.spherical_aberration * 1e7
        p = np.pi * lam * self.defocus
        q = 0.5 * np.pi * cs * lam**3
        if q == 0:
            if p == 0:
                raise ParameterError("CTF has no zero crossing")
            return float(np.sqrt(target / p))
        disc = p * p - 4 * q * target
        if disc < 0:
            raise ParameterError("chi never reaches the first-zero phase")
        u = 2 * target / (p + np.sqrt(disc))
        return float(np.sqrt(u))

    def image(self, n: int, rfft: bool = True) -> np.ndarray:
        """CTF sampled on the (r)fft frequency grid of an ``n x n`` image."""
        ky = np.fft.fftfreq(n)[:, None]
        kx = (np.fft.rfftfreq(n) if rfft else np.fft.fftfreq(n))[None, :]
        k = np.sqrt(kx**2 + ky**2) / self.pixel_size
        return self(k)


def apply_ctf(image: np.ndarray, ctf: CtfParams) -> np.ndarray:
    """Multiply a square, even-sided image's 2-D FT by the CTF."""
    image = np.asarray(image, dtype=np.float64)
    n = image.shape[0]
    if image.ndim != 2 or image.shape[1] != n or n % 2:
        raise ParameterError("apply_ctf needs a square image with even side")
    # Origin at n//2: the CTF is real and radially symmetric, so no phase fix-up.
    return np.fft.irfft2(np.fft.rfft2(image) * ctf.image(n), s=image.shape)


# -------------------------------------------------------------------- projection

def slice_frequencies(n: int, rotations: np.ndarray, kx=None, ky=None) -> np.ndarray:
    """3-D frequencies (cycles/voxel) of the central slices for ``rotations``.

    ``kx``/``ky`` default to the rfft2 grid of an ``n x n`` image. Returns an
    array of shape ``rotations.shape[:-2] + kx.shape + (3,)``.
    """
    if kx is None:
        ky, kx = np.meshgrid(np.fft.fftfreq(n), np.fft.rfftfreq(n), indexing="ij")
    plane = np.stack([kx, ky], axis=-1)
    rot = np.asarray(rotations)[..., :, :2]
    return np.einsum("...ij,pqj->...pqi", rot, plane) if plane.ndim == 3 else \
        np.einsum("...ij,pj->...pi", rot, plane)


def shift_phase(n: int, dx: float, dy: float) -> np.ndarray:
    """rfft2-grid phase factor translating an image by ``(dx, dy)`` pixels."""
    ky = np.fft.fftfreq(n)[:, None]
    kx = np.fft.rfftfreq(n)[None, :]
    return np.exp(-2j * np.pi * (kx * dx + ky * dy))


def _centre_phase(n: int) -> np.ndarray:
    # Moves the origin from index 0 to index n//2 on the rfft2 grid.
    iy = np.arange(n)[:, None]
    ix = np.arange(n // 2 + 1)[None, :]
    return np.where((ix + iy) % 2, -1.0, 1.0)


def project_fourier(vol: Volume3D, orient: Orientation) -> np.ndarray:
    """rfft2 coefficients (origin-centred) of the projection of ``vol``."""
    n = vol.size
    pts = slice_frequencies(n, orient.matrix())
    ft = vol.sample_fourier(pts)
    if orient.dx or orient.dy:
        ft = ft * shift_phase(n, orient.dx, orient.dy)
    return ft


def project(vol: Volume3D, orient: Orientation) -> np.ndarray:
    """Tomographic projection of ``vol`` along ``orient``; side equals the volume side.

    Computed by central-slice extraction from the oversampled 3-D FT, then
    translated by the orientation's shift through a Fourier phase ramp.
    """
    n = vol.size
    ft = project_fourier(vol, orient)
    return np.fft.irfft2(ft * _centre_phase(n), s=(n, n))


def project_real_space(vol: Volume3D, orient: Orientation, order: int = 3) -> np.ndarray:
    """Reference projector: rotate the volume in real space and sum along z."""
    n = vol.size
    g = np.arange(n) - n // 2
    z, y, x = np.meshgrid(g, g, g, indexing="ij")
    body = np.stack([x, y, z], axis=-1) @ orient.matrix().T
    coords = body[..., ::-1].transpose(3, 0, 1, 2) + n // 2
    rotated = map_coordinates(vol.data, coords.reshape(3, -1), order=order, mode="constant")
    proj = rotated.reshape(n, n, n).sum(axis=0)
    if orient.dx or orient.dy:
        ft = np.fft.rfft2(proj) * shift_phase(n, orient.dx, orient.dy)
        proj = np.fft.irfft2(ft, s=(n, n))
    return proj


def render(vol: Volume3D, orient: Orientation, ctf: CtfParams | None) -> np.ndarray:
    """Imaging operator: projection followed by the CTF."""
    n = vol.size
    ft = project_fourier(vol, orient)
    if ctf is not None:
        ft = ft * ctf.image(n)
    return np.fft.irfft2(ft * _centre_phase(n), s=(n, n))


# ---------------------------------------------------------------------- phantoms

def make_phantom(seed: int = 0, n_blobs: int = 12, asymmetric: bool = True,
                 grid_size: int = 64, voxel_size: float = 1.0) -> Volume3D:
    """Sum of Gaussian blobs inside a sphere of radius ``0.4 * grid_size``.

    With ``asymmetric=False`` the blobs are isotropic and the first one is
    centred, so a single-blob phantom is spherically symmetric. With
    ``asymmetric=True`` blobs are anisotropic, randomly oriented, and the
    layout is redrawn until it has no inversion symmetry.
    """
    if grid_size % 2 or grid_size < 32:
        raise ParameterError(f"grid_size must be even and >= 32, got {grid_size}")
    if n_blobs < 1:
        raise ParameterError("n_blobs must be >= 1")
    rng = np.random.default_rng(seed)
    n = grid_size
    radius = 0.4 * n
    g = np.arange(n) - n // 2
    z, y, x = np.meshgrid(g, g, g, indexing="ij")
    r = np.stack([x, y, z], axis=-1).astype(np.float64)
    support = np.sqrt(x**2 + y**2 + z**2) <= radius

    for _attempt in range(100):
        data = np.zeros((n, n, n))
        for i in range(n_blobs):
            if asymmetric:
                sig = rng.uniform(0.02 * n, 0.07 * n, size=3)
                rot = Rotation.random(random_state=rng).as_matrix()
            else:
                sig = np.full(3, rng.uniform(0.03 * n, 0.06 * n) if i else 0.05 * n)
                rot = np.eye(3)
            if i == 0 and not asymmetric:
                centre = np.zeros(3)
            else:
                reach = max(radius - 2.5 * sig.max(), 0.0)
                d = rng.standard_normal(3)
                centre = d / np.linalg.norm(d) * reach * rng.uniform() ** (1 / 3)
            amp = rng.uniform(0.5, 1.0) if i else 1.0
            local = (r - centre) @ rot
            data += amp * np.exp(-0.5 * np.sum((local / sig) ** 2, axis=-1))
        data *= support
        if not asymmetric or _inversion_asymmetry(data) > 0.2:
            break
    return Volume3D(data, voxel_size)


def _inversion_asymmetry(data: np.ndarray) -> float:
    # Distance between the map and its inversion through the centre of mass.
    n = data.shape[0]
    g = np.arange(n) - n // 2
    z, y, x = np.meshgrid(g, g, g, indexing="ij")
    com = np.array([(data * c).sum() for c in (z, y, x)]) / data.sum()
    coords = np.stack([2 * com[i] - c + n // 2 for i, c in enumerate((z, y, x))])
    inverted = map_coordinates(data, coords.reshape(3, -1), order=1).reshape(data.shape)
    return float(np.linalg.norm(data - inverted) / np.linalg.norm(data))


def make_elongated_phantom(grid_size: int = 64, voxel_size: float = 1.0,
                           aspect: float = 3.0) -> Volume3D:
    """A single prolate Gaussian whose long axis is ``aspect`` times its short axes."""
    if grid_size % 2 or grid_size < 32:
        raise ParameterError(f"grid_size must be even and >= 32, got {grid_size}")
    n = grid_size
    g = np.arange(n) - n // 2
    z, y, x = np.meshgrid(g, g, g, indexing="ij")
    s = 0.035 * n
    data = np.exp(-0.5 * ((x / s) ** 2 + (y / s) ** 2 + (z / (aspect * s)) ** 2))
    data *= np.sqrt(x**2 + y**2 + z**2) <= 0.4 * n
    return Volume3D(data, voxel_size)


def lowpass(vol: Volume3D, fraction_of_nyquist: float, edge_width: float = 2.0) -> Volume3D:
    """Low-pass filter with a raised-cosine edge ``edge_width`` Fourier voxels wide."""
    n = vol.size
    k = np.fft.fftfreq(n) * n
    kz, ky, kx = np.meshgrid(k, k, np.fft.rfftfreq(n) * n, indexing="ij")
    r = np.sqrt(kx**2 + ky**2 + kz**2)
    cut = fraction_of_nyquist * n / 2
    t = np.clip((r - cut + edge_width / 2) / edge_width, 0, 1)
    filt = 0.5 * (1 + np.cos(np.pi * t))
    out = np.fft.irfftn(np.fft.rfftn(vol.data) * filt, s=vol.data.shape, axes=(0, 1, 2))
    return Volume3D(out, vol.voxel_size)


def normalized(vol: Volume3D) -> Volume3D:
    return Volume3D(vol.data / np.linalg.norm(vol.data), vol.voxel_size)


# ---------------------------------------------------------------------------- FSC

@dataclass(frozen=True)
class FscCurve:
    frequencies: np.ndarray  # 1/Å
    correlations: np.ndarray
    nyquist: float = field(default=np.nan)

    def __len__(self):
        return len(self.frequencies)

    def at(self, frequency: float) -> float:
        return float(np.interp(frequency, self.frequencies, self.correlations))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["frequency_inv_angstrom", "correlation"])
            for f, c in zip(self.frequencies, self.correlations):
                w.writerow([f"{f:.8g}", f"{c:.8g}"])

    @classmethod
    def from_csv(cls, path) -> "FscCurve":
        rows = list(csv.DictReader(Path(path).open()))
        f = np.array([float(r["frequency_inv_angstrom"]) for r in rows])
        c = np.array([float(r["correlation"]) for r in rows])
        return cls(f, c, float(f[-1]) if len(f) else np.nan)


def fsc(vol_a: Volume3D, vol_b: Volume3D) -> FscCurve:
    """Fourier shell correlation with one-voxel-wide shells up to Nyquist."""
    if vol_a.data.shape != vol_b.data.shape or vol_a.voxel_size != vol_b.voxel_size:
        raise ParameterError("fsc needs volumes on the same grid and voxel size")
    n = vol_a.size
    fa = np.fft.fftn(vol_a.data)
    fb = np.fft.fftn(vol_b.data)
    k = np.fft.fftfreq(n) * n
    kz, ky, kx = np.meshgrid(k, k, k, indexing="ij")
    shell = np.rint(np.sqrt(kx**2 + ky**2 + kz**2)).astype(int).ravel()
    nshell = n // 2 + 1
    keep = shell < nshell
    shell = shell[keep]
    fa, fb = fa.ravel()[keep], fb.ravel()[keep]
    cross = np.bincount(shell, (fa * fb.conj()).real, nshell)
    pa = np.bincount(shell, np.abs(fa) ** 2, nshell)
    pb = np.bincount(shell, np.abs(fb) ** 2, nshell)
    denom = np.sqrt(pa * pb)
    corr = np.divide(cross, denom, out=np.zeros(nshell), where=denom > 0)
    freqs = np.arange(nshell) / (n * vol_a.voxel_size)
    return FscCurve(freqs, np.clip(corr, -1.0, 1.0), vol_a.nyquist)


def resolution_at_threshold(curve: FscCurve, cutoff: float = 0.143) -> float:
    """Frequency (1/Å) where the curve first drops below ``cutoff``.

    Linearly interpolated between neighbouring shells; returns the last
    (Nyquist) frequency when the curve never drops below the cutoff.
    """
    if len(curve) == 0:
        raise ParameterError("empty FSC curve")
    if not 0 < cutoff < 1:
        raise ParameterError("cutoff must lie in (0, 1)")
    f = np.asarray(curve.frequencies, dtype=float)
    c = np.asarray(curve.correlations, dtype=float)
    below = np.flatnonzero(c < cutoff)
    if below.size == 0:
        return float(f[-1])
    i = below[0]
    if i == 0:
        return float(f[0])
    frac = (c[i - 1] - cutoff) / (c[i - 1] - c[i])
    return float(f[i - 1] + frac * (f[i] - f[i - 1]))
