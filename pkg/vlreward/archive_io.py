"""Deterministic `.npz` containers with a JSON header.

numpy's own `savez` stamps zip members with the wall-clock time, so two identical saves differ
byte-wise. The writer here fixes member timestamps and ordering; the result is still a plain
`.npz` that `numpy.load` reads.
"""
import io
import json
import logging
import zipfile
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple, Union

import numpy as np

from .exceptions import VersionError

logger = logging.getLogger(__name__)

HEADER_KEY = "__header__"
_EPOCH = (1980, 1, 1, 0, 0, 0)

PathLike = Union[str, Path]


def write_container(path: PathLike, header: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    members = {HEADER_KEY: np.frombuffer(header_bytes, dtype=np.uint8)}
    for key in sorted(arrays):
        if key == HEADER_KEY:
            raise ValueError(f"{HEADER_KEY} is reserved")
        members[key] = np.ascontiguousarray(arrays[key])

    with zipfile.ZipFile(path, mode="w", compression=zipfile.ZIP_DEFLATED) as zf:
        for key, array in members.items():
            buffer = io.BytesIO()
            np.lib.format.write_array(buffer, array, allow_pickle=False)
            info = zipfile.ZipInfo(f"{key}.npy", date_time=_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, buffer.getvalue())
    logger.debug("Wrote %s (%d arrays)", path, len(arrays))
    return path


def read_container(
    path: PathLike, expected_format: str, supported_versions: Tuple[int, ...]
) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    with np.load(Path(path), allow_pickle=False) as npz:
        if HEADER_KEY not in npz.files:
            raise VersionError(f"{path} has no header; not a {expected_format} file")
        header = json.loads(npz[HEADER_KEY].tobytes().decode("utf-8"))
        arrays = {key: npz[key] for key in npz.files if key != HEADER_KEY}

    if header.get("format") != expected_format:
        raise VersionError(f"{path} holds format {header.get('format')!r}, expected {expected_format!r}")
    if header.get("version") not in supported_versions:
        raise VersionError(
            f"{path} has {expected_format} version {header.get('version')}, supported: {supported_versions}"
        )
    return header, arrays
