"""Shared tensor helpers and input validation."""

from __future__ import annotations

import random

import numpy as np
import torch

EPS = 1e-8


def l2norm(x: torch.Tensor, dim: int = -1, eps: float = EPS) -> torch.Tensor:
    """L2-normalize `x` along `dim`; zero vectors stay zero (eps guard)."""
    return x / (x.norm(dim=dim, keepdim=True) + eps)


def l2norm_strict(x: torch.Tensor, dim: int = -1, tol: float = 1e-12) -> torch.Tensor:
    """L2-normalize, raising on (near-)zero vectors instead of guarding."""
    norm = x.norm(dim=dim, keepdim=True)
    if (norm <= tol).any():
        raise ValueError("degenerate pooled vector")
    return x / norm


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def check_finite(x, name: str = "array"):
    """Raise ValueError if `x` contains NaN/Inf. Accepts tensors and ndarrays."""
    t = x.detach() if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_2d(x: np.ndarray, name: str = "array") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {x.shape}")
    check_finite(x, name)
    return x


def check_unit_norm(x: torch.Tensor, name: str, tol: float = 1e-4) -> None:
    norms = x.norm(dim=-1)
    if (norms - 1.0).abs().max().item() > tol:
        raise ValueError(f"{name} is not unit-normalized (max deviation "
                         f"{(norms - 1.0).abs().max().item():.2e})")


def to_tensor(x, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)
