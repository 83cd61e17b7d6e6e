"""Flat ``section.key = value`` run configuration.

Every key has a default. Files are read line by line; ``#`` starts a
comment. Unknown keys and unparsable values are rejected with the key
named. Values given on the command line override the file, which overrides
the defaults.
"""

from __future__ import annotations

import os
from pathlib import Path

from .errors import ConfigError

# key -> (type, default, description)
SCHEMA: dict[str, tuple[type, object, str]] = {
    "run.seed": (int, 0, "master seed"),
    "run.workers": (int, 0, "scoring threads; 0 uses every available core"),
    "phantom.kind": (str, "asymmetric", "asymmetric | spherical | elongated"),
    "phantom.grid_size": (int, 64, "box side N in voxels"),
    "phantom.voxel_size": (float, 2.5, "angstrom per voxel and per micrograph pixel"),
    "phantom.n_blobs": (int, 12, "Gaussian blobs in the blob phantoms"),
    "ctf.defocus": (float, 15000.0, "angstrom, positive underfocus"),
    "ctf.voltage": (float, 300.0, "kV"),
    "ctf.cs": (float, 2.7, "spherical aberration, mm"),
    "ctf.amplitude_contrast": (float, 0.07, "fraction"),
    "sim.micrographs": (int, 4, "number of micrographs"),
    "sim.n_good": (int, 100, "particles per micrograph"),
    "sim.n_junk": (int, 100, "empty (or fragment) sites per micrograph"),
    "sim.snr": (float, 0.1, "mean particle signal power over noise variance"),
    "sim.width": (int, 1280, "pixels"),
    "sim.height": (int, 1280, "pixels"),
    "sim.min_separation": (float, 64.0, "pixels between site centres"),
    "sim.contamination_count": (int, 2, "contamination blobs per micrograph"),
    "sim.contamination_amplitude": (float, 10.0, "in noise sigmas"),
    "sim.noise_sigma": (float, 1.0, "noise standard deviation"),
    "sim.max_shift": (float, 3.0, "pixels of sub-box offset per particle"),
    "sim.junk_mode": (str, "empty", "empty | fragment"),
    "pick.source": (str, "detect", "detect | truth (use the simulated sites)"),
    "pick.radius": (float, 60.0, "saliency kernel radius, angstrom"),
    "pick.z_cut": (float, 5.0, "contrast mask threshold in robust sigmas"),
    "pick.dilation_radius": (int, 16, "mask dilation, pixels"),
    "pick.min_distance": (int, 32, "minimum distance between picks, pixels"),
    "pick.match_radius": (float, 16.0, "pick-to-truth match radius, pixels"),
    "grid.spacing": (float, 7.5, "direction spacing, degrees"),
    "grid.in_plane_step": (float, 7.5, "in-plane step, degrees"),
    "grid.max_shift": (int, 3, "translation search half-width, pixels"),
    "band.lo": (float, 1 / 40, "lower band edge, 1/angstrom"),
    "band.hi": (float, 1 / 8, "upper band edge, 1/angstrom"),
    "loop.max_rounds": (int, 7, "refine-sort rounds at most"),
    "loop.min_rounds": (int, 1, "rounds before the stability stop may trigger"),
    "loop.stability_tol": (float, 0.005, "relative retained-count change that stops the loop"),
    "loop.min_separation": (float, 1.0, "round-1 separation below which scores are unimodal"),
    "loop.noise_probe": (int, 64, "pure-noise patches scored to calibrate unimodal rounds"),
    "reference.lowpass": (float, 1 / 3, "initial reference: truth low-passed to this fraction of Nyquist"),
    "report.bins": (int, 40, "histogram bins"),
    "report.min_precision": (float, 0.95, "report invariant"),
    "report.min_recall": (float, 0.90, "report invariant"),
    "verify.n": (int, 64, "patch side for the noise checks"),
    "verify.trials": (int, 10000, "Monte-Carlo trials"),
    "verify.sweep_particles": (int, 200, "good and noise patches in the perturbation sweep"),
}

CHOICES = {
    "phantom.kind": ("asymmetric", "spherical", "elongated"),
    "sim.junk_mode": ("empty", "fragment"),
    "pick.source": ("detect", "truth"),
}

RUN_ROOT_ENV = "CRYOSORT_RUN_ROOT"


def _convert(key: str, raw: str):
    typ = SCHEMA[key][0]
    text = raw.strip()
    try:
        if typ is int:
            value = int(text)
        elif typ is float:
            value = float(text)
        else:
            value = text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {typ.__name__}") from None
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigError(f"{key}: {value!r} is not one of {', '.join(CHOICES[key])}")
    return value


def parse_lines(lines, source: str = "<config>") -> dict:
    out = {}
    for no, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{no}: expected key = value")
        key, raw = (t.strip() for t in text.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{no}: unknown key {key!r}")
        out[key] = _convert(key, raw)
    return out


class RunConfig:
    """Resolved configuration; read values with ``cfg["sim.snr"]``."""

    def __init__(self, values: dict | None = None):
        self._values = {k: v[1] for k, v in SCHEMA.items()}
        for key, value in (values or {}).items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}")
            self._values[key] = _convert(key, str(value)) if isinstance(value, str) else value
        self._check()

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        values = {}
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file {p} not found")
            values.update(parse_lines(p.read_text().splitlines(), str(p)))
        values.update(overrides or {})
        return cls(values)

    def _check(self):
        v = self._values
        if v["phantom.grid_size"] % 2 or v["phantom.grid_size"] < 32:
            raise ConfigError("phantom.grid_size must be even and >= 32")
        if v["sim.micrographs"] < 1:
            raise ConfigError("sim.micrographs must be >= 1")
        if not 0 < v["band.lo"] < v["band.hi"]:
            raise ConfigError("band.lo must satisfy 0 < band.lo < band.hi")
        if not 0 < v["reference.lowpass"] <= 1:
            raise ConfigError("reference.lowpass must lie in (0, 1]")
        if v["run.workers"] < 0:
            raise ConfigError("run.workers must be >= 0")

    def __getitem__(self, key):
        return self._values[key]

    def items(self):
        return self._values.items()

    @property
    def workers(self) -> int:
        return self["run.workers"] or (os.cpu_count() or 1)

    def dumps(self) -> str:
        """Every key in schema order; parsing this text gives back the same config."""
        lines = []
        section = None
        for key in SCHEMA:
            sec = key.split(".", 1)[0]
            if sec != section:
                if section is not None:
                    lines.append("")
                section = sec
            value = self._values[key]
            lines.append(f"{key} = {value!r}" if isinstance(value, float) else f"{key} = {value}")
        return "\n".join(lines) + "\n"


def parse_overrides(items) -> dict:
    """``["sim.snr=0.2", ...]`` from repeated ``--set`` flags."""
    return parse_lines(items or [], "--set")
