"""Versioned array containers.

Every persisted artifact (model checkpoints, clip files) is a zip archive of
``.npy`` members plus a ``header.json`` member.  Archives are written with a
fixed member timestamp so identical content produces identical bytes, which
keeps dataset manifests and their checksums reproducible.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class ContainerError(ValueError):
    """Raised when a container is malformed or has the wrong kind/version."""


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def write_container(path: str | Path, kind: str, header: Mapping[str, Any],
                    arrays: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format_version": FORMAT_VERSION, "kind": kind, **header,
            "arrays": sorted(arrays)}
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_member("header.json"), json.dumps(meta, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]),
                                      allow_pickle=False)
            zf.writestr(_member(f"{name}.npy"), buf.getvalue())
    return path


def read_container(path: str | Path, kind: str | None = None
                   ) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path, "r")
    except (OSError, zipfile.BadZipFile) as exc:
        raise ContainerError(f"{path}: not a readable container ({exc})") from exc
    with zf:
        try:
            header = json.loads(zf.read("header.json"))
        except KeyError as exc:
            raise ContainerError(f"{path}: missing header.json") from exc
        if header.get("format_version") != FORMAT_VERSION:
            raise ContainerError(
                f"{path}: format version {header.get('format_version')!r}, "
                f"expected {FORMAT_VERSION}")
        if kind is not None and header.get("kind") != kind:
            raise ContainerError(f"{path}: holds {header.get('kind')!r}, expected {kind!r}")
        arrays = {}
        for name in header["arrays"]:
            with zf.open(f"{name}.npy") as fh:
                arrays[name] = np.lib.format.read_array(io.BytesIO(fh.read()),
                                                        allow_pickle=False)
    return header, arrays


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))
