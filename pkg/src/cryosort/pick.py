"""Particle picking by Gaussian-kernel saliency with exclusion masking."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ExtractionError, ParameterError
from .simulate import Micrograph


@dataclass(frozen=True)
class PickSet:
    coords: np.ndarray  # (n, 2) integer (x, y)
    kernel_radius_angstrom: float = float("nan")
    micrograph: str = "mic000"
    saliency: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return len(self.coords)


def gaussian_saliency(m: Micrograph, radius_angstrom: float = 60.0) -> np.ndarray:
    """Convolve the sign-flipped, mean-subtracted micrograph with a Gaussian.

    The kernel has unit integral and standard deviation ``radius / 2``
    pixels; the convolution is cyclic (computed by FFT).
    """
    radius_px = radius_angstrom / m.pixel_size
    if radius_px < 2:
        raise ParameterError(f"kernel radius is {radius_px:.2f} px; need >= 2 px")
    sigma = radius_px / 2
    img = -(m.data - m.data.mean())
    h, w = img.shape
    ky = np.fft.fftfreq(h)[:, None]
    kx = np.fft.rfftfreq(w)[None, :]
    kernel_ft = np.exp(-2 * np.pi**2 * sigma**2 * (kx**2 + ky**2))
    return np.fft.irfft2(np.fft.rfft2(img) * kernel_ft, s=img.shape)


def mask_high_contrast(m: Micrograph, z_cut: float = 5.0, dilation_radius: int = 16,
                       border: int = 32, min_area: int = 0) -> np.ndarray:
    """Exclude pixels far from the median, grown by a disk, plus a border band.

    The contrast scale is the MAD-based robust sigma (falls back to the
    standard deviation when the MAD is zero). Connected groups of
    thresholded pixels smaller than ``min_area`` are dropped before
    dilation, so bright particle pixels do not mask their own particle
    while extended contamination still does.
    """
    if not z_cut > 0:
        raise ParameterError("z_cut must be positive")
    data = m.data
    med = np.median(data)
    dev = np.abs(data - med)
    scale = 1.4826 * np.median(dev)
    if scale == 0:
        scale = data.std()
    mask = dev > z_cut * scale if scale > 0 else np.zeros(data.shape, bool)
    if min_area > 0 and mask.any():
        labels, count = ndimage.label(mask)
        sizes = np.bincount(labels.ravel(), minlength=count + 1)
        keep = sizes >= min_area
        keep[0] = False
        mask = keep[labels]
    if dilation_radius > 0 and mask.any():
        r = int(np.ceil(dilation_radius))
        y, x = np.ogrid[-r:r + 1, -r:r + 1]
        disk = x**2 + y**2 <= dilation_radius**2
        mask = ndimage.binary_dilation(mask, structure=disk)
    if border > 0:
        mask[:border, :] = True
        mask[-border:, :] = True
        mask[:, :border] = True
        mask[:, -border:] = True
    return mask


def detect_maxima(s: np.ndarray, mask: np.ndarray, min_distance: int = 32) -> np.ndarray:
    """Local maxima of ``s`` outside ``mask``, thinned to ``min_distance``.

    A candidate is an unmasked pixel equal to the maximum over the unmasked
    pixels of its ``(2 * min_distance + 1)`` square neighbourhood (cyclic),
    so a bright masked region cannot hide nearby particles. Candidates are
    then accepted greedily in order of decreasing saliency, ties broken by
    ``(y, x)``, rejecting any within ``min_distance`` of an accepted one.
    Returns an ``(n, 2)`` array of ``(x, y)``.
    """
    if min_distance < 1:
        raise ParameterError("min_distance must be >= 1")
    size = 2 * int(min_distance) + 1
    masked = np.where(mask, -np.inf, s)
    peak = (masked == ndimage.maximum_filter(masked, size=size, mode="wrap")) & ~mask
    ys, xs = np.nonzero(peak)
    order = np.lexsort((xs, ys, -s[ys, xs]))
    pts = np.empty((len(order), 2), dtype=np.int64)
    count = 0
    for i in order:
        p = (xs[i], ys[i])
        if count and np.any(np.sum((pts[:count] - p) ** 2, axis=1) < min_distance**2):
            continue
        pts[count] = p
        count += 1
    return pts[:count].astype(int)


def pick_micrograph(m: Micrograph, radius_angstrom: float, patch_size: int,
                    z_cut: float = 5.0, dilation_radius: int = 16,
                    min_distance: int = 32, min_area: int | None = None) -> PickSet:
    """Mask, saliency and maxima in one call.

    Masked contrast regions are filled with the background median before
    smoothing so their blurred tails do not drag nearby maxima onto the
    mask edge. ``min_area`` defaults to the area of one particle disk.
    """
    if min_area is None:
        min_area = int(np.pi * (radius_angstrom / m.pixel_size) ** 2)
    contrast = mask_high_contrast(m, z_cut, dilation_radius, border=0, min_area=min_area)
    data = m.data
    if contrast.any():
        data = np.where(contrast, np.median(m.data[~contrast]), m.data)
    sal = gaussian_saliency(Micrograph(data, m.pixel_size, m.name), radius_angstrom)
    mask = contrast.copy()
    b = patch_size // 2
    mask[:b, :] = mask[-b:, :] = True
    mask[:, :b] = mask[:, -b:] = True
    coords = detect_maxima(sal, mask, min_distance)
    return PickSet(coords, radius_angstrom, m.name, sal)


def extract_patches(m: Micrograph, coords, n: int) -> list[np.ndarray]:
    """``n x n`` crops centred on each pick, normalised to zero mean, unit variance."""
    half = n // 2
    h, w = m.data.shape
    out = []
    for x, y in np.asarray(coords, dtype=int).reshape(-1, 2):
        if x < half or y < half or x + half > w or y + half > h:
            raise ExtractionError(f"pick ({x}, {y}) is within {half} px of the border")
        crop = m.data[y - half:y + half, x - half:x + half]
        sd = crop.std()
        if not sd > 0:
            raise ExtractionError(f"constant crop at ({x}, {y})")
        out.append((crop - crop.mean()) / sd)
    return out


def match_picks(coords, truth_xy, radius: float):
    """Greedy one-to-one matching of picks to truth sites within ``radius``.

    Returns ``assign`` with ``assign[i]`` the truth index matched to pick
    ``i`` or -1.
    """
    coords = np.asarray(coords, float).reshape(-1, 2)
    truth_xy = np.asarray(truth_xy, float).reshape(-1, 2)
    assign = np.full(len(coords), -1)
    if not len(coords) or not len(truth_xy):
        return assign
    tree = cKDTree(truth_xy)
    pairs = []
    for i, nbrs in enumerate(tree.query_ball_point(coords, radius)):
        for j in nbrs:
            pairs.append((np.sum((coords[i] - truth_xy[j]) ** 2), i, j))
    used = set()
    for _, i, j in sorted(pairs):
        if assign[i] < 0 and j not in used:
            assign[i] = j
            used.add(j)
    return assign


def write_picks_csv(path, picks) -> None:
    """Write ``(micrograph_id, x, y)`` rows; :class:`PickSet` items are expanded."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["micrograph_id", "x", "y"])
        for item in picks:
            if isinstance(item, PickSet):
                for x, y in item.coords:
                    w.writerow([item.micrograph, int(x), int(y)])
            else:
                name, x, y = item
                w.writerow([name, int(x), int(y)])


def read_picks_csv(path) -> list[tuple[str, int, int]]:
    """Rows in file order."""
    with open(path, newline="") as fh:
        return [(row["micrograph_id"], int(row["x"]), int(row["y"])) for row in csv.DictReader(fh)]
