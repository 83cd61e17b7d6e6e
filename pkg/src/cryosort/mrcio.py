"""Reading and writing the MRC-2014 subset used for maps, micrographs and masks.

Files are little-endian with a 1024-byte header, mode 2 (float32) for data
and mode 0 (int8) for masks. The creation-time label that ``mrcfile``
writes by default is cleared so identical arrays give identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import mrcfile
import numpy as np

from .errors import ParameterError


def write_mrc(path, data: np.ndarray, voxel_size: float) -> None:
    """Write a 2-D or 3-D array; booleans are stored as mode 0, everything else as mode 2."""
    arr = np.asarray(data)
    if arr.ndim not in (2, 3):
        raise ParameterError(f"MRC data must be 2-D or 3-D, got shape {arr.shape}")
    arr = arr.astype(np.int8) if arr.dtype == bool else arr.astype("<f4")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with mrcfile.new(path, overwrite=True) as m:
        m.set_data(np.ascontiguousarray(arr))
        m.voxel_size = voxel_size
        m.header.nlabl = 0
        m.header.label[:] = b""


def read_mrc(path) -> tuple[np.ndarray, float]:
    """Return ``(data, voxel_size)``; data is float64 for mode 2 and bool for mode 0."""
    with mrcfile.open(path, permissive=False) as m:
        mode = int(m.header.mode)
        if mode not in (0, 2):
            raise ParameterError(f"{path}: unsupported MRC mode {mode}")
        data = m.data.astype(bool) if mode == 0 else m.data.astype(np.float64)
        return data, float(m.voxel_size.x)
