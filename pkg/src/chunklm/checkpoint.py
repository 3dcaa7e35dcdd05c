"""Checkpoint directory: ``manifest.txt`` (config, array names/dtypes/shapes)
plus ``arrays.bin`` holding the little-endian arrays back to back in manifest order."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .config import TrainConfig, apply_overrides, dump_config, parse_config_text
from .model import ModelParams, init_params

FORMAT = "chunklm-checkpoint 1"


def save_checkpoint(path, params: ModelParams, cfg: TrainConfig, step=0, batch_index=0, moments=None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = dict(params.arrays())
    if moments is not None:
        for kind in ("m", "v"):
            for k, v in moments[kind].items():
                arrays[f"adam.{kind}.{k}"] = v
    precision = str(params.embed.dtype)
    lines = [f"format {FORMAT}", f"precision {precision}", f"step {step}", f"batch_index {batch_index}"]
    lines += [f"config {ln}" for ln in dump_config(cfg).splitlines()]
    with open(path / "arrays.bin", "wb") as fh:
        for name, a in arrays.items():
            le = a.astype(a.dtype.newbyteorder("<"), copy=False)
            lines.append(f"array {name} {le.dtype.str} {','.join(str(s) for s in a.shape)}")
            fh.write(le.tobytes())
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")
    return path


def load_checkpoint(path):
    """Returns (params, cfg, meta, moments-or-None)."""
    path = Path(path)
    cfg_lines, specs, meta = [], [], {}
    for line in (path / "manifest.txt").read_text().splitlines():
        if not line:
            continue
        tag, rest = line.split(" ", 1)
        if tag == "config":
            cfg_lines.append(rest)
        elif tag == "array":
            name, dt, shape = rest.split(" ")
            specs.append((name, np.dtype(dt), tuple(int(s) for s in shape.split(",") if s)))
        else:
            meta[tag] = rest
    if meta.get("format") != FORMAT:
        raise ValueError(f"{path} is not a chunklm checkpoint")
    cfg = apply_overrides(TrainConfig(), parse_config_text("\n".join(cfg_lines)))
    raw = (path / "arrays.bin").read_bytes()
    arrays, off = {}, 0
    for name, dt, shape in specs:
        n = int(np.prod(shape)) * dt.itemsize
        arrays[name] = np.frombuffer(raw[off : off + n], dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        off += n
    params = init_params(cfg.model)
    for name, t in params.named().items():
        a = arrays[name]
        if a.shape != t.data.shape:
            raise ValueError(f"checkpoint array {name} has shape {a.shape}, model expects {t.data.shape}")
        t.data = a.copy()
    moments = None
    if any(k.startswith("adam.") for k in arrays):
        moments = {kind: {k: arrays[f"adam.{kind}.{k}"].copy() for k in params.named()} for kind in ("m", "v")}
    meta["step"] = int(meta.get("step", 0))
    meta["batch_index"] = int(meta.get("batch_index", 0))
    return params, cfg, meta, moments
