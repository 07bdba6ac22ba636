"""File formats for everything the CLI writes."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from vaco.numerics import ParamSet
from vaco.training import StageResult


def _header(config_hash: str, extra: str = "") -> str:
    line = f"# config_hash={config_hash}"
    return f"{line} {extra}".rstrip() + "\n"


def _csv_text(rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(x: float) -> str:
    return repr(float(x))


def curve_csv(result: StageResult, num_tasks: int, config_hash: str) -> str:
    cols = ["step", "lr", "text_loss"]
    for i in range(num_tasks):
        cols += [f"task_{i}_mse", f"task_{i}_nce"]
    cols.append("total")
    rows: list[list] = [cols]
    for r in result.curve:
        row = [r.step, _fmt(r.lr), _fmt(r.text)]
        for mse, nce in r.tasks:
            row += [_fmt(mse), _fmt(nce)]
        row += [""] * (len(cols) - 1 - len(row))
        row.append(_fmt(r.total))
        rows.append(row)
    return _header(config_hash) + _csv_text(rows)


SWEEP_COLUMNS = ["setting", "seed", "final_text_loss", "final_task_loss", "accuracy"]
GEN_NOTE = "gen modes use pure MSE regression (no denoising objective)"


def sweep_csv(rows: Sequence[dict], config_hash: str) -> str:
    body = [SWEEP_COLUMNS] + [
        [r["setting"], r["seed"], _fmt(r["final_text_loss"]),
         "" if r["final_task_loss"] is None else _fmt(r["final_task_loss"]), _fmt(r["accuracy"])]
        for r in rows
    ]
    return _header(config_hash, f"note={GEN_NOTE.replace(' ', '_')}") + _csv_text(body)


def attention_csv(layer_scores: np.ndarray, config_hash: str) -> str:
    """``layer_scores`` is ``N x L x h x K``: per sample, layer, head, vision index."""
    rows: list[list] = [["sample_id", "layer", "head", "vision_index", "score"]]
    n, layers, heads, k = layer_scores.shape
    for s in range(n):
        for layer in range(layers):
            for h in range(heads):
                for v in range(k):
                    rows.append([s, layer, h, v, _fmt(layer_scores[s, layer, h, v])])
    return _header(config_hash) + _csv_text(rows)


def write_aligned_features(path: Path, features: np.ndarray) -> None:
    """ASCII ``"M D"`` line followed by little-endian float32 values."""
    m, d = features.shape
    with open(path, "wb") as fh:
        fh.write(f"{m} {d}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def read_aligned_features(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    head, _, body = raw.partition(b"\n")
    m, d = (int(v) for v in head.decode("ascii").split())
    return np.frombuffer(body, dtype="<f4").reshape(m, d)


def save_checkpoint(path: Path, params: ParamSet, config_hash: str) -> None:
    arrays = {name: p.data for name, p in params.params.items()}
    np.savez(path, __config_hash__=np.array(config_hash), **arrays)


def load_checkpoint(path: Path, params: ParamSet) -> str:
    with np.load(path) as data:
        values = {k: data[k] for k in data.files if k != "__config_hash__"}
        config_hash = str(data["__config_hash__"]) if "__config_hash__" in data.files else ""
    missing = set(params.names()) - set(values)
    if missing:
        raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    params.load(values)
    return config_hash
