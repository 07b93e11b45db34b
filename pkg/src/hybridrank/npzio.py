"""Byte-deterministic .npz writing.

np.savez stamps zip entries with the current time, so identical arrays saved
twice give different file bytes.  Reproducible-manifest runs need equal bytes,
so entries are written with a fixed timestamp instead.  np.load reads the
result like any other .npz.
"""

from __future__ import annotations

import io
import zipfile

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)  # earliest timestamp zip can represent


def deterministic_savez(path, **arrays) -> None:
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]),
                                      allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=_EPOCH),
                        buf.getvalue())
