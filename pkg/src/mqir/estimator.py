"""sklearn-style estimator: fit on a Dataset, predict gallery rankings.

The estimator is a thin orchestration layer over the training loop and the
evaluator; hyperparameters follow the sklearn convention (stored verbatim,
learned state in trailing-underscore attributes), so get_params/set_params,
clone, and grid-search tooling work out of the box.
"""

from __future__ import annotations

import json
from pathlib import Path

from sklearn.base import BaseEstimator

from .checkpoint import CheckpointBundle, load_checkpoint, save_checkpoint
from .data import Dataset, Vocabulary
from .evaluation import MetricsReport, encode_gallery, evaluate, rank_gallery
from .model import ModelConfig
from .training import TrainConfig, train_model

_FIT_DIRECTIONS = ("ensemble", "it", "ti", "joint")


class NotFittedError(RuntimeError):
    pass


class MultiQueryRetriever(BaseEstimator):
    """Retrieves images from a gallery given multiple region-specific queries.

    direction="ensemble" trains the two directional models separately and
    sums their aggregated similarities at prediction time; "it"/"ti" train a
    single direction; "joint" trains one model on both directions' losses.
    """

    def __init__(self, direction: str = "ensemble", alpha: float = 0.4,
                 beta: float = 0.4, tau: float = 40.0, lambda1: float = 5.0,
                 lambda2: float = 15.0, word_dim: int = 300,
                 embed_dim: int = 256, vr_steps: int = 3,
                 intra_mode: str = "sub", shared_pool: bool = False,
                 epochs: int = 150, batch_size: int = 128, lr: float = 4e-4,
                 lr_drop_epoch: int | None = None, lr_drop_factor: float = 0.1,
                 grad_clip: float = 2.0, seed: int = 0, eval_every: int = 1,
                 val_rounds: int | None = None, dtype: str = "float32"):
        self.direction = direction
        self.alpha = alpha
        self.beta = beta
        self.tau = tau
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.word_dim = word_dim
        self.embed_dim = embed_dim
        self.vr_steps = vr_steps
        self.intra_mode = intra_mode
        self.shared_pool = shared_pool
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_drop_epoch = lr_drop_epoch
        self.lr_drop_factor = lr_drop_factor
        self.grad_clip = grad_clip
        self.seed = seed
        self.eval_every = eval_every
        self.val_rounds = val_rounds
        self.dtype = dtype

    # -- configuration ------------------------------------------------------

    def _model_config(self, vocab_size: int, feature_dim: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, feature_dim=feature_dim,
            word_dim=self.word_dim, embed_dim=self.embed_dim,
            lambda1=self.lambda1, lambda2=self.lambda2,
            vr_steps=self.vr_steps, intra_mode=self.intra_mode,
            shared_pool=self.shared_pool)

    def _train_config(self, direction: str) -> TrainConfig:
        return TrainConfig(
            direction=direction, alpha=self.alpha, beta=self.beta,
            tau=self.tau, epochs=self.epochs, batch_size=self.batch_size,
            lr=self.lr, lr_drop_epoch=self.lr_drop_epoch,
            lr_drop_factor=self.lr_drop_factor, grad_clip=self.grad_clip,
            seed=self.seed, eval_every=self.eval_every,
            val_rounds=self.val_rounds, dtype=self.dtype)

    @property
    def _mode(self) -> str:
        return "ensemble" if self.direction in ("ensemble", "joint") else self.direction

    # -- fitting ------------------------------------------------------------

    def fit(self, dataset: Dataset, vocab: Vocabulary,
            val_dataset: Dataset | None = None, log=None) -> "MultiQueryRetriever":
        if self.direction not in _FIT_DIRECTIONS:
            raise ValueError(f"direction must be one of {_FIT_DIRECTIONS}")
        if len(dataset) == 0:
            raise ValueError("empty training dataset")
        feature_dims = {r.regions.feature_dim for r in dataset.records}
        if len(feature_dims) != 1:
            raise ValueError("all records must share the feature dimension")
        self.n_features_in_ = feature_dims.pop()
        for rec in dataset.records:
            rec.queries.check_ids(len(vocab))

        model_cfg = self._model_config(len(vocab), self.n_features_in_)
        directions = {"ensemble": ("it", "ti"), "joint": ("joint",)}.get(
            self.direction, (self.direction,))
        self.models_, self.history_ = {}, {}
        for d in directions:
            result = train_model(model_cfg, self._train_config(d), dataset,
                                 val_dataset, log=log)
            self.history_[d] = result.history
            if d == "joint":
                self.models_["it"] = result.model
                self.models_["ti"] = result.model
            else:
                self.models_[d] = result.model
        self.vocab_ = vocab
        self.model_config_ = model_cfg
        return self

    def _check_fitted(self):
        if not hasattr(self, "models_"):
            raise NotFittedError("call fit() or load() first")

    # -- inference ----------------------------------------------------------

    def rank(self, dataset: Dataset, round_r: int | None = None,
             gallery: Dataset | None = None) -> list:
        """RoundRanking per record, scored against `gallery` (default: the
        dataset itself) using the first `round_r` queries (default: all)."""
        self._check_fitted()
        gallery = gallery if gallery is not None else dataset
        enc = encode_gallery(self.models_, gallery.records)
        ids = [r.image_id for r in gallery.records]
        out = []
        for rec in dataset.records:
            r = round_r or rec.queries.num_queries
            out.append(rank_gallery(self.models_, enc, ids, rec.queries, r,
                                    mode=self._mode, alpha=self.alpha,
                                    beta=self.beta))
        return out

    def predict(self, dataset: Dataset, round_r: int | None = None,
                gallery: Dataset | None = None) -> list[str]:
        """Top-1 gallery image id for each record's query set."""
        return [rr.ranking[0] for rr in self.rank(dataset, round_r, gallery)]

    def evaluate(self, dataset: Dataset, rounds: int | None = None,
                 ks=(1, 5, 10)) -> MetricsReport:
        self._check_fitted()
        return evaluate(self.models_, dataset, mode=self._mode,
                        alpha=self.alpha, beta=self.beta, rounds=rounds, ks=ks)

    def score(self, dataset: Dataset, rounds: int | None = None) -> float:
        """Avg R@Sum on the dataset (higher is better)."""
        return self.evaluate(dataset, rounds=rounds).avg_rsum

    # -- persistence --------------------------------------------------------

    def save(self, out_dir) -> Path:
        self._check_fitted()
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.vocab_.save(out / "vocab.txt")
        if self.direction == "joint":
            to_save = {"joint": self.models_["it"]}
        else:
            to_save = {d: self.models_[d] for d in sorted(self.models_)}
        for d, model in to_save.items():
            save_checkpoint(model, out / f"{d}.npz", direction=d,
                            vocab_hash=self.vocab_.content_hash(),
                            alpha=self.alpha, beta=self.beta, tau=self.tau)
        (out / "estimator.json").write_text(json.dumps({
            "params": {k: v for k, v in self.get_params().items()},
            "directions": sorted(to_save),
        }, indent=1))
        return out

    @classmethod
    def load(cls, out_dir) -> "MultiQueryRetriever":
        out = Path(out_dir)
        spec = json.loads((out / "estimator.json").read_text())
        est = cls(**spec["params"])
        est.vocab_ = Vocabulary.load(out / "vocab.txt")
        est.models_ = {}
        for d in spec["directions"]:
            bundle: CheckpointBundle = load_checkpoint(out / f"{d}.npz")
            est.models_[d] = bundle.model
        if est.direction == "joint":
            model = est.models_.get("joint") or next(iter(est.models_.values()))
            est.models_ = {"it": model, "ti": model}
        est.model_config_ = next(iter(est.models_.values())).cfg
        est.n_features_in_ = est.model_config_.feature_dim
        return est
