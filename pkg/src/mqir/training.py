"""Contrastive training of one similarity model (split or joint strategy)."""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field, asdict

import torch

from .data import Dataset, iterate_batches
from .losses import check_weights, infonce_loss
from .model import ModelConfig, RetrievalScorer
from .utils import seed_everything

DIRECTIONS = ("it", "ti", "joint")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    direction: str = "it"
    alpha: float = 0.4
    beta: float = 0.4
    tau: float = 40.0
    epochs: int = 150
    batch_size: int = 128
    lr: float = 4e-4
    lr_drop_epoch: int | None = None   # default: halfway
    lr_drop_factor: float = 0.1
    grad_clip: float = 2.0
    seed: int = 0
    eval_every: int = 1
    val_rounds: int | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        check_weights(self.alpha, self.beta)
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def drop_epoch(self) -> int:
        return self.epochs // 2 if self.lr_drop_epoch is None else self.lr_drop_epoch

    def needed_levels(self) -> set[str]:
        """Similarity levels with nonzero loss weight; others are skipped."""
        need = set()
        if self.alpha > 0:
            need |= {"it", "ti"} if self.direction == "joint" else {self.direction}
        if self.beta > 0:
            need.add("r")
        if 1.0 - self.alpha - self.beta > 0:
            need.add("g")
        if not need:
            raise ValueError("all similarity levels have zero weight")
        return need

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: RetrievalScorer
    config: TrainConfig
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float | None = None


def _batch_loss(model: RetrievalScorer, batch, cfg: TrainConfig,
                need: set[str]) -> torch.Tensor:
    sims = model.cross_similarities(batch.features, batch.tokens,
                                    batch.lengths, need)
    losses = {k: infonce_loss(v, cfg.tau) for k, v in sims.items()}
    zero = torch.zeros((), dtype=model.dtype)
    l_r = losses.get("r", zero)
    l_g = losses.get("g", zero)
    gamma = 1.0 - cfg.alpha - cfg.beta
    if cfg.direction == "joint":
        # both directions' totals summed; r/g terms appear in each total
        return (cfg.alpha * (losses.get("it", zero) + losses.get("ti", zero))
                + 2 * cfg.beta * l_r + 2 * gamma * l_g)
    l_local = losses.get(cfg.direction, zero)
    return cfg.alpha * l_local + cfg.beta * l_r + gamma * l_g


def train_model(model_cfg: ModelConfig, cfg: TrainConfig, train_ds: Dataset,
                val_ds: Dataset | None = None, log=None) -> TrainResult:
    """Optimize all parameters with Adam on the weighted InfoNCE objective.

    Query order is re-sampled per record per epoch; the best validation
    Avg R@Sum snapshot is restored at the end (final weights if no val set).
    Deterministic under cfg.seed at fixed precision.
    """
    from .evaluation import evaluate  # local import: evaluation imports losses

    seed_everything(cfg.seed)
    model = RetrievalScorer(model_cfg, dtype=cfg.torch_dtype)
    need = cfg.needed_levels()
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    result = TrainResult(model=model, config=cfg)
    best_state = None
    eval_mode = "ensemble" if cfg.direction == "joint" else cfg.direction

    for epoch in range(cfg.epochs):
        lr = cfg.lr * (cfg.lr_drop_factor if epoch >= cfg.drop_epoch() else 1.0)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        epoch_loss, steps = 0.0, 0
        tic = time.time()
        for step, batch in enumerate(iterate_batches(
                train_ds, cfg.batch_size, shuffle=True, seed=cfg.seed,
                epoch=epoch, train_mode=True, dtype=cfg.torch_dtype)):
            optimizer.zero_grad()
            try:
                loss = _batch_loss(model, batch, cfg, need)
            except ValueError as exc:
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step} "
                    f"(direction={cfg.direction}, lr={lr:g}): {exc}") from exc
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step} "
                    f"(direction={cfg.direction}, lr={lr:g})")
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            epoch_loss += float(loss.detach())
            steps += 1

        row = {"epoch": epoch, "lr": lr, "loss": epoch_loss / max(steps, 1),
               "seconds": round(time.time() - tic, 2)}
        if val_ds is not None and (epoch + 1) % cfg.eval_every == 0:
            report = evaluate({eval_mode: model} if eval_mode != "ensemble"
                              else {"it": model, "ti": model},
                              val_ds, mode=eval_mode, alpha=cfg.alpha,
                              beta=cfg.beta, rounds=cfg.val_rounds)
            row["val_rsum"] = report.avg_rsum
            if result.best_val is None or report.avg_rsum > result.best_val:
                result.best_val = report.avg_rsum
                result.best_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())
        result.history.append(row)
        if log:
            log(row)

    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        result.best_epoch = cfg.epochs - 1
    model.eval()
    return result


def train_split_pair(model_cfg: ModelConfig, cfg: TrainConfig, train_ds: Dataset,
                     val_ds: Dataset | None = None, log=None) -> dict[str, TrainResult]:
    """Train the two directional models separately (the split strategy)."""
    out = {}
    for direction in ("it", "ti"):
        sub = TrainConfig(**{**cfg.to_dict(), "direction": direction})
        out[direction] = train_model(model_cfg, sub, train_ds, val_ds, log=log)
    return out
