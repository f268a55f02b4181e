"""On-disk formats.

HRec v1 stores a recording as ``<stem>.json`` (header) plus ``<stem>.f32``
(little-endian float32 samples, channel-major). Hypnograms are CSV files with
columns ``epoch_index,stage_code``.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .core import Hypnogram, Recording, ValidationError

HREC_FORMAT = "HRec"
HREC_VERSION = 1


def write_recording(r: Recording, path) -> Path:
    """Write ``r`` to ``path`` (the ``.json`` header); returns the header path."""
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = path.with_suffix(".f32")
    header = {
        "format": HREC_FORMAT,
        "version": HREC_VERSION,
        "id": r.id,
        "sample_rate": r.sample_rate,
        "channel_names": list(r.channel_names),
        "channel_roles": list(r.channel_roles),
        "T": r.n_samples,
        "domain_tag": r.domain_tag,
        "data_file": blob.name,
        "meta": r.meta,
    }
    blob.write_bytes(np.ascontiguousarray(r.samples, dtype="<f4").tobytes())
    path.write_text(json.dumps(header, indent=2, sort_keys=True))
    return path


def read_recording(path) -> Recording:
    path = Path(path)
    header = json.loads(path.read_text())
    if header.get("format") != HREC_FORMAT or header.get("version") != HREC_VERSION:
        raise ValidationError(f"{path} is not an HRec v1 header")
    n_ch = len(header["channel_names"])
    raw = np.frombuffer((path.parent / header["data_file"]).read_bytes(), dtype="<f4")
    if raw.size != n_ch * header["T"]:
        raise ValidationError(f"{path}: sample blob has {raw.size} values, expected {n_ch * header['T']}")
    return Recording(
        id=header["id"],
        samples=raw.reshape(n_ch, header["T"]).astype(np.float32),
        channel_names=header["channel_names"],
        channel_roles=header["channel_roles"],
        sample_rate=header["sample_rate"],
        domain_tag=header["domain_tag"],
        meta=header.get("meta", {}),
    )


def write_hypnogram(h: Hypnogram, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch_index", "stage_code"])
        for i, s in enumerate(h.stages):
            w.writerow([i, int(s)])
    return path


def read_hypnogram(path) -> Hypnogram:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    idx = [int(r["epoch_index"]) for r in rows]
    if idx != list(range(len(idx))):
        raise ValidationError(f"{path}: epoch_index must run 0..E-1 in order")
    return Hypnogram(np.array([int(r["stage_code"]) for r in rows], dtype=np.int64))
