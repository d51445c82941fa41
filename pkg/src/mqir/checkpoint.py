"""Checkpoint archive: named parameter arrays + a JSON metadata record.

Array names are a fixed contract (W_v, b_v, W_e, gru_fwd.*, gru_bwd.*,
pool_vis.*, pool_txt.*, vr.*, head.*). Every 2-D matrix is stored in
(in, out) orientation, i.e. it applies to row vectors as `row @ M`; GRU
blocks keep the native stacked (reset|update|new) layout of the runtime.
Save/load is bit-exact: loading a checkpoint reproduces forward values
exactly at the same precision.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, RetrievalScorer

_GRU_FIELDS = ("weight_ih", "weight_hh", "bias_ih", "bias_hh")
_POOL_FIELDS = ("W_ave", "W_r", "W_s")

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def _export_arrays(model: RetrievalScorer) -> dict[str, np.ndarray]:
    def npy(t: torch.Tensor) -> np.ndarray:
        return t.detach().cpu().numpy()

    arrays = {
        "W_v": npy(model.region_enc.fc.weight.t()),
        "b_v": npy(model.region_enc.fc.bias),
        "W_e": npy(model.query_enc.embed.weight),
    }
    gru = model.query_enc.gru
    for field in _GRU_FIELDS:
        arrays[f"gru_fwd.{field}"] = npy(getattr(gru, f"{field}_l0"))
        arrays[f"gru_bwd.{field}"] = npy(getattr(gru, f"{field}_l0_reverse"))
    for prefix, pool in (("pool_vis", model.pool_vis), ("pool_txt", model.pool_txt)):
        arrays[f"{prefix}.W_ave"] = npy(pool.w_ave.weight.t())
        arrays[f"{prefix}.W_r"] = npy(pool.w_r.weight.t())
        arrays[f"{prefix}.W_s"] = npy(pool.w_s.weight.t())
    vr = model.reasoner
    arrays["vr.W_c"] = npy(vr.w_c.weight.t())
    arrays["vr.W_q"] = npy(vr.w_q.weight.t())
    arrays["vr.W_k"] = npy(vr.w_k.weight.t())
    arrays["vr.W_R"] = npy(vr.w_r.weight.t())
    arrays["head.w"] = npy(vr.head.weight.reshape(-1))
    arrays["head.b"] = npy(vr.head.bias.reshape(()))
    return arrays


def _import_arrays(model: RetrievalScorer, arrays: dict[str, np.ndarray]) -> None:
    def copy(param: torch.Tensor, value: np.ndarray, transpose: bool = False):
        t = torch.from_numpy(np.ascontiguousarray(value))
        if transpose:
            t = t.t()
        with torch.no_grad():
            param.copy_(t.reshape(param.shape))

    copy(model.region_enc.fc.weight, arrays["W_v"], transpose=True)
    copy(model.region_enc.fc.bias, arrays["b_v"])
    copy(model.query_enc.embed.weight, arrays["W_e"])
    gru = model.query_enc.gru
    for field in _GRU_FIELDS:
        copy(getattr(gru, f"{field}_l0"), arrays[f"gru_fwd.{field}"])
        copy(getattr(gru, f"{field}_l0_reverse"), arrays[f"gru_bwd.{field}"])
    for prefix, pool in (("pool_vis", model.pool_vis), ("pool_txt", model.pool_txt)):
        copy(pool.w_ave.weight, arrays[f"{prefix}.W_ave"], transpose=True)
        copy(pool.w_r.weight, arrays[f"{prefix}.W_r"], transpose=True)
        copy(pool.w_s.weight, arrays[f"{prefix}.W_s"], transpose=True)
    vr = model.reasoner
    copy(vr.w_c.weight, arrays["vr.W_c"], transpose=True)
    copy(vr.w_q.weight, arrays["vr.W_q"], transpose=True)
    copy(vr.w_k.weight, arrays["vr.W_k"], transpose=True)
    copy(vr.w_r.weight, arrays["vr.W_R"], transpose=True)
    copy(vr.head.weight, arrays["head.w"])
    copy(vr.head.bias, arrays["head.b"])


@dataclass
class CheckpointBundle:
    model: RetrievalScorer
    meta: dict
    path: Path
    file_hash: str

    @property
    def direction(self) -> str:
        return self.meta["direction"]


def save_checkpoint(model: RetrievalScorer, path, *, direction: str,
                    vocab_hash: str, alpha: float, beta: float, tau: float,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dtype = str(model.dtype).removeprefix("torch.")
    meta = {
        "direction": direction,
        "vocab_hash": vocab_hash,
        "model": model.cfg.to_dict(),
        "alpha": alpha,
        "beta": beta,
        "tau": tau,
        "dtype": dtype,
    }
    if extra:
        meta["extra"] = extra
    arrays = _export_arrays(model)
    arrays["__meta__"] = np.array(json.dumps(meta))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> CheckpointBundle:
    path = Path(path)
    with np.load(path, allow_pickle=False) as npz:
        arrays = {k: npz[k] for k in npz.files}
    meta = json.loads(str(arrays.pop("__meta__")))
    cfg = ModelConfig(**meta["model"])
    dtype = _DTYPES.get(meta.get("dtype", "float32"), torch.float32)
    model = RetrievalScorer(cfg, dtype=dtype)
    _import_arrays(model, arrays)
    model.eval()
    return CheckpointBundle(model, meta, path, checkpoint_hash(path))


def checkpoint_hash(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def parameter_arrays(path) -> dict[str, np.ndarray]:
    """Named trainable arrays stored in a checkpoint file."""
    with np.load(Path(path), allow_pickle=False) as npz:
        return {k: npz[k] for k in npz.files if k != "__meta__"}
