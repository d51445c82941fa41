"""Shared test utilities: tiny models, random instances, finite differences."""

import numpy as np
import torch

from mqir.data import SyntheticConfig, SyntheticWorld
from mqir.model import ModelConfig, RetrievalScorer


def tiny_model(vocab_size=12, feature_dim=6, word_dim=5, embed_dim=4,
               seed=0, dtype=torch.float64, **overrides) -> RetrievalScorer:
    torch.manual_seed(seed)
    cfg = ModelConfig(vocab_size=vocab_size, feature_dim=feature_dim,
                      word_dim=word_dim, embed_dim=embed_dim, **overrides)
    return RetrievalScorer(cfg, dtype=dtype)


def toy_world(num_scenes=24, num_regions=4, num_queries=3, feature_dim=12,
              colors=3, objects=4, positions=3, noise=0.05, seed=0):
    cfg = SyntheticConfig(num_scenes=num_scenes, num_regions=num_regions,
                          num_queries=num_queries, feature_dim=feature_dim,
                          colors=colors, objects=objects, positions=positions,
                          noise=noise, seed=seed)
    return SyntheticWorld(cfg)


def random_batch(rng: np.random.Generator, n, k, num_q, x, vocab_size,
                 max_len=5, dtype=torch.float64):
    features = torch.tensor(rng.standard_normal((n, k, x)), dtype=dtype)
    lengths = torch.tensor(rng.integers(1, max_len + 1, size=(n, num_q)))
    tokens = torch.zeros((n, num_q, max_len), dtype=torch.long)
    for b in range(n):
        for j in range(num_q):
            m = int(lengths[b, j])
            tokens[b, j, :m] = torch.tensor(
                rng.integers(2, vocab_size, size=m))
    return features, tokens, lengths


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def finite_difference_grads(loss_fn, model: torch.nn.Module,
                            step: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of loss_fn() w.r.t. every model parameter."""
    grads = {}
    seen = set()
    for name, param in model.named_parameters():
        if id(param) in seen:
            continue
        seen.add(id(param))
        grad = np.zeros(param.numel())
        flat = param.data.view(-1)
        for i in range(param.numel()):
            orig = float(flat[i])
            flat[i] = orig + step
            up = float(loss_fn())
            flat[i] = orig - step
            down = float(loss_fn())
            flat[i] = orig
            grad[i] = (up - down) / (2 * step)
        grads[name] = grad.reshape(tuple(param.shape))
    return grads


def analytic_grads(loss_fn, model: torch.nn.Module) -> dict[str, np.ndarray]:
    model.zero_grad()
    loss = loss_fn()
    loss.backward()
    out = {}
    seen = set()
    for name, param in model.named_parameters():
        if id(param) in seen:
            continue
        seen.add(id(param))
        grad = param.grad
        out[name] = (np.zeros(tuple(param.shape)) if grad is None
                     else grad.detach().cpu().numpy().copy())
    model.zero_grad()
    return out
