"""Model checkpoints.

A checkpoint is a zip archive of ``.npy`` members (readable with ``np.load``)::

    format.npy        str    "imumatch-checkpoint/1"
    kind.npy          str    "nn" | "logistic"
    descriptor.npy    str    JSON architecture descriptor (always contains "W")
    params.npy        f8[n]  flat parameter vector in descriptor layout order
    stats_mean.npy    f8[9]  running mean, channel order of imumatch.signals.CHANNELS
    stats_var.npy     f8[9]  running variance
    stats_meta.npy    str    JSON {"momentum": float, "frozen": bool}
    extra.npy         str    JSON training metadata (loss history, config), may be "{}"
    adam_m.npy, adam_v.npy, adam_step.npy   optional optimizer state for resuming

Members are written with a fixed timestamp so identical models give identical
bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .estimator import LogisticEstimator, RunningStats
from .network import Architecture, DualConvAttentionNet

FORMAT = "imumatch-checkpoint/1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
    return buf.getvalue()


def save(model, path, extra: dict | None = None, optimizer: dict | None = None) -> Path:
    path = Path(path)
    members = {
        "format": np.array(FORMAT),
        "kind": np.array(model.kind),
        "descriptor": np.array(json.dumps(model.descriptor(), sort_keys=True)),
        "params": model.params,
        "stats_mean": model.stats.mean,
        "stats_var": model.stats.var,
        "stats_meta": np.array(
            json.dumps({"momentum": model.stats.momentum, "frozen": model.stats.frozen})
        ),
        "extra": np.array(json.dumps(extra or {}, sort_keys=True)),
    }
    if optimizer is not None:
        members["adam_m"] = optimizer["m"]
        members["adam_v"] = optimizer["v"]
        members["adam_step"] = np.array(optimizer["step"], dtype=np.int64)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in members.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH)
            zf.writestr(info, _npy_bytes(arr))
    return path


def load_full(path):
    """Return ``(model, extra, optimizer_state_or_None)``."""
    with np.load(Path(path), allow_pickle=False) as z:
        if str(z["format"]) != FORMAT:
            raise ValueError(f"{path}: not an imumatch checkpoint")
        kind = str(z["kind"])
        desc = json.loads(str(z["descriptor"]))
        meta = json.loads(str(z["stats_meta"]))
        stats = RunningStats(z["stats_mean"], z["stats_var"], meta["momentum"], meta["frozen"])
        params = z["params"]
        extra = json.loads(str(z["extra"]))
        opt = None
        if "adam_m" in z.files:
            opt = {"m": z["adam_m"], "v": z["adam_v"], "step": int(z["adam_step"])}
    if kind == "nn":
        model = DualConvAttentionNet(Architecture(**desc), stats, params)
    elif kind == "logistic":
        model = LogisticEstimator(desc["W"], stats, params)
    else:
        raise ValueError(f"{path}: unknown model kind {kind!r}")
    return model, extra, opt


def load(path):
    return load_full(path)[0]
