"""Archive container shared by generator, mapper and discriminator checkpoints.

A checkpoint is a zip file with two members:

``manifest.json``
    UTF-8 JSON object. Always has ``kind`` and ``format_version``; the rest
    depends on the kind (architecture dims, iteration, config_hash, ...).
``params.npz``
    numpy ``savez`` archive, one array per parameter or buffer, keyed by
    the module's ``state_dict`` name.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import zipfile
from typing import Any, Mapping

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_archive(path: str | os.PathLike, manifest: Mapping[str, Any],
                 arrays: Mapping[str, np.ndarray]) -> None:
    manifest = {"format_version": FORMAT_VERSION, **manifest}
    buf = io.BytesIO()
    np.savez(buf, **{k: np.asarray(v, order="C") for k, v in arrays.items()})
    tmp = f"{os.fspath(path)}.tmp"
    # fixed timestamps keep the archive bytes reproducible
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("manifest.json", (1980, 1, 1, 0, 0, 0)),
                    json.dumps(manifest, sort_keys=True, indent=1))
        zf.writestr(zipfile.ZipInfo("params.npz", (1980, 1, 1, 0, 0, 0)), buf.getvalue())
    os.replace(tmp, path)


def load_archive(path: str | os.PathLike) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json").decode("utf-8"))
            with np.load(io.BytesIO(zf.read("params.npz")), allow_pickle=False) as npz:
                arrays = {k: npz[k] for k in npz.files}
    except (zipfile.BadZipFile, KeyError, ValueError, OSError, EOFError) as exc:
        raise CheckpointError(f"cannot read checkpoint {os.fspath(path)!r}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{os.fspath(path)!r}: unsupported format_version "
                              f"{manifest.get('format_version')!r}")
    return manifest, arrays


def digest_arrays(arrays: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(arrays):
        a = np.ascontiguousarray(arrays[k])
        h.update(k.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def digest_json(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()
