"""Checkpoint container.

Layout (a zip archive written with ``numpy.savez``; stable across versions):

    meta.json-like header   array ``__meta__``: UTF-8 JSON bytes with
                            {"format": "dail-checkpoint", "version": 1,
                             "config": {ModelConfig fields}, "seed": int,
                             "adapter": null | {"rank": int, "alpha": float}}
    param/<name>            one float array per base tensor
    adapter/<target>.A      rank x in   (only when an adapter is stored)
    adapter/<target>.B      out x rank

Arrays keep the dtype they were saved with.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .model import LowRankAdapter, ModelConfig, ModelParams

FORMAT = "dail-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, params: ModelParams, adapter: LowRankAdapter | None = None) -> None:
    cfg = params.config
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "config": {
            "vocab_size": cfg.vocab_size, "embed_dim": cfg.embed_dim, "layers": cfg.layers,
            "heads": cfg.heads, "context_len": cfg.context_len, "precision": cfg.precision,
            "positional": cfg.positional,
        },
        "seed": params.seed,
        "adapter": None if adapter is None else {"rank": adapter.rank, "alpha": adapter.alpha},
    }
    arrays = {"__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for name in sorted(params.tensors):
        arrays[f"param/{name}"] = params[name].detach().cpu().numpy()
    if adapter is not None:
        for name, t in adapter.named_tensors():
            arrays[f"adapter/{name}"] = t.detach().cpu().numpy()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, LowRankAdapter | None]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        try:
            meta = json.loads(bytes(data["__meta__"]).decode())
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing header") from exc
        if meta.get("format") != FORMAT:
            raise CheckpointError(f"{path}: not a {FORMAT} file")
        if meta.get("version") != VERSION:
            raise CheckpointError(f"{path}: unsupported version {meta.get('version')}")
        config = ModelConfig(**meta["config"])
        tensors = {k[len("param/"):]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("param/")}
        expected = config.expected_shapes()
        if set(tensors) != set(expected):
            raise CheckpointError(f"{path}: tensor set does not match the declared architecture")
        params = ModelParams(config, int(meta["seed"]), tensors)
        adapter = None
        if meta["adapter"] is not None:
            factors: dict[str, list] = {}
            for k in data.files:
                if k.startswith("adapter/"):
                    target, part = k[len("adapter/"):].rsplit(".", 1)
                    factors.setdefault(target, [None, None])["AB".index(part)] = torch.from_numpy(data[k].copy())
            adapter = LowRankAdapter(int(meta["adapter"]["rank"]), float(meta["adapter"]["alpha"]),
                                     {k: (v[0], v[1]) for k, v in factors.items()})
    return params, adapter
