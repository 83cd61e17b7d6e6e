"""Standard synthetic particle stacks cut at ground-truth sites."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .align import Patch
from .pick import extract_patches
from .simulate import GroundTruth, Micrograph, SimConfig, synthesize_micrograph
from .volume import CtfParams, Volume3D


@dataclass
class ParticleStack:
    patches: list[Patch]
    kinds: np.ndarray  # "good" / "junk" per patch
    ids: list[str]
    truth: GroundTruth
    micrograph: Micrograph

    @property
    def is_good(self) -> np.ndarray:
        return self.kinds == "good"


def ground_truth_stack(vol: Volume3D, ctf: CtfParams, n_good: int = 200, n_junk: int = 200,
                       snr: float = 0.1, seed: int = 0, contamination_count: int = 0,
                       junk_mode: str = "empty") -> ParticleStack:
    """Simulate one micrograph large enough for every site and crop all sites."""
    n = vol.size
    total = n_good + n_junk
    side = int(np.ceil(np.sqrt(max(total, 1) * (n + 8) ** 2 / 0.3) / 64) * 64)
    side = max(side, 4 * n)
    cfg = SimConfig(n_good=n_good, n_junk=n_junk, snr=snr, min_separation=float(n),
                    contamination_count=contamination_count, seed=seed, width=side, height=side,
                    junk_mode=junk_mode)
    mic, truth = synthesize_micrograph(vol, ctf, cfg)
    coords = [(p.x, p.y) for p in truth.particles]
    data = extract_patches(mic, coords, n)
    patches = [Patch(d, mic.pixel_size, (mic.name, i)) for i, d in enumerate(data)]
    kinds = np.array([p.kind for p in truth.particles])
    return ParticleStack(patches, kinds, [p.id for p in truth.particles], truth, mic)
