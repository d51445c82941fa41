"""Per-round retrieval evaluation, ablation grid, and report emission.

Evaluation is cumulative: at round r every gallery image is scored against
the first r queries of a record, with all attention/graph machinery running
on exactly r queries. Ranking ties are broken by ascending image_id.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .data import Dataset, QuerySet, Record, PAD_ID
from .losses import aggregate_similarity, check_weights, ensemble_similarity
from .model import ModelConfig, RetrievalScorer

MODES = ("it", "ti", "ensemble")
DEFAULT_KS = (1, 5, 10)


@dataclass
class RoundRanking:
    query_image_id: str
    round: int
    rank_of_target: int
    ranking: list[str] | None = None    # gallery ids, best first
    scores: list[float] | None = None   # aligned with ranking


@dataclass
class RoundMetrics:
    round: int
    recalls: dict[int, float]          # K -> percentage
    mean_rank: float


@dataclass
class MetricsReport:
    rounds: list[RoundMetrics]
    ks: tuple[int, ...]
    avg_recalls: dict[int, float]
    avg_rsum: float
    avg_mr: float


def _pad_tokens(queries: list[list[int]], dtype=torch.long):
    max_len = max(len(q) for q in queries)
    tokens = torch.full((len(queries), max_len), PAD_ID, dtype=dtype)
    lengths = torch.zeros(len(queries), dtype=dtype)
    for j, q in enumerate(queries):
        tokens[j, :len(q)] = torch.tensor(q, dtype=dtype)
        lengths[j] = len(q)
    return tokens, lengths


def encode_gallery(models: dict[str, RetrievalScorer], records: list[Record],
                   batch_size: int = 256) -> dict[str, tuple[torch.Tensor, torch.Tensor]]:
    """Precompute (V_loc, v_glo) for every gallery image, per direction."""
    out = {}
    with torch.no_grad():
        for direction, model in models.items():
            chunks_loc, chunks_glo = [], []
            for start in range(0, len(records), batch_size):
                feats = torch.stack([
                    torch.as_tensor(r.regions.features, dtype=model.dtype)
                    for r in records[start:start + batch_size]])
                v_loc, v_glo = model.encode_images(feats)
                chunks_loc.append(v_loc)
                chunks_glo.append(v_glo)
            out[direction] = (torch.cat(chunks_loc), torch.cat(chunks_glo))
    return out


def _needed_levels(direction: str, alpha: float, beta: float) -> set[str]:
    need = set()
    if alpha > 0:
        need.add(direction)
    if beta > 0:
        need.add("r")
    if 1.0 - alpha - beta > 0:
        need.add("g")
    return need or {direction}


def score_gallery(models: dict[str, RetrievalScorer],
                  gallery_enc: dict[str, tuple[torch.Tensor, torch.Tensor]],
                  tokens: torch.Tensor, lengths: torch.Tensor, mode: str,
                  alpha: float, beta: float) -> torch.Tensor:
    """Score every gallery image against one query prefix -> (G,).

    `tokens` is (r, L) with (r,) lengths. This is the single source of truth
    for both the offline evaluator and the retrieval service.
    """
    check_weights(alpha, beta)
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")

    def one(direction: str) -> torch.Tensor:
        model = models[direction]
        v_loc, v_glo = gallery_enc[direction]
        with torch.no_grad():
            t_loc, t_glo = model.encode_queries(tokens.unsqueeze(0),
                                                lengths.unsqueeze(0))
            need = _needed_levels(direction, alpha, beta)
            sims = model.pair_similarities(v_loc, v_glo, t_loc, t_glo, need)
        zero = torch.zeros(())
        return aggregate_similarity(sims.get(direction, zero),
                                    sims.get("r", zero),
                                    sims.get("g", zero), alpha, beta)

    if mode == "ensemble":
        return ensemble_similarity(one("it"), one("ti"))
    return one(mode)


def order_by_score(scores: np.ndarray, id_rank: np.ndarray) -> np.ndarray:
    """Indices sorted by score desc, ties by ascending image_id."""
    return np.lexsort((id_rank, -scores))


def _id_ranks(image_ids: list[str]) -> np.ndarray:
    order = np.argsort(np.asarray(image_ids))
    ranks = np.empty(len(image_ids), dtype=np.int64)
    ranks[order] = np.arange(len(image_ids))
    return ranks


def rank_gallery(models: dict[str, RetrievalScorer],
                 gallery_enc: dict[str, tuple[torch.Tensor, torch.Tensor]],
                 image_ids: list[str], queryset: QuerySet, round_r: int,
                 mode: str = "ensemble", alpha: float = 0.4, beta: float = 0.4,
                 keep_order: bool = True) -> RoundRanking:
    """Rank the gallery against the first `round_r` queries of a query set."""
    if not image_ids:
        raise ValueError("gallery is empty")
    if round_r < 1 or round_r > queryset.num_queries:
        raise ValueError(f"round {round_r} outside 1..{queryset.num_queries}")
    if mode == "ensemble":
        missing = {"it", "ti"} - set(models)
        if missing:
            raise ValueError(f"ensemble mode needs checkpoints for {sorted(missing)}")
    tokens, lengths = _pad_tokens(queryset.queries[:round_r])
    scores = score_gallery(models, gallery_enc, tokens, lengths, mode,
                           alpha, beta).to(torch.float64).numpy()
    order = order_by_score(scores, _id_ranks(image_ids))
    ranked = [image_ids[i] for i in order]
    try:
        rank = ranked.index(queryset.image_id) + 1
    except ValueError:
        rank = -1
    return RoundRanking(queryset.image_id, round_r, rank,
                        ranked if keep_order else None,
                        [float(scores[i]) for i in order] if keep_order else None)


def evaluate(models: dict[str, RetrievalScorer], dataset: Dataset,
             mode: str = "ensemble", alpha: float = 0.4, beta: float = 0.4,
             rounds: int | None = None, ks: tuple[int, ...] = DEFAULT_KS,
             chunk: int = 64, max_records: int | None = None) -> MetricsReport:
    """Full-gallery per-round retrieval metrics over a dataset split.

    Every image of the split is a gallery candidate; record q's query prefix
    of length r is scored against all of them for r = 1..rounds.
    """
    records = dataset.records[:max_records] if max_records else dataset.records
    if not records:
        raise ValueError("empty dataset")
    n_rounds = rounds or min(r.queries.num_queries for r in records)
    if any(r.queries.num_queries < n_rounds for r in records):
        raise ValueError(f"some records have fewer than {n_rounds} queries")
    if mode == "ensemble" and ({"it", "ti"} - set(models)):
        raise ValueError("ensemble mode needs both directions")

    gallery_enc = encode_gallery(models, records)
    image_ids = [r.image_id for r in records]
    id_rank = _id_ranks(image_ids)
    id_to_idx = {img: i for i, img in enumerate(image_ids)}
    per_round: dict[int, list[RoundRanking]] = {}
    for r in range(1, n_rounds + 1):
        rankings = []
        for start in range(0, len(records), chunk):
            batch = records[start:start + chunk]
            scores = _score_block(models, gallery_enc, batch, r, mode, alpha, beta)
            for row, rec in zip(scores, batch):
                order = order_by_score(row, id_rank)
                target = id_to_idx[rec.image_id]
                rank = int(np.nonzero(order == target)[0][0]) + 1
                rankings.append(RoundRanking(rec.image_id, r, rank))
        per_round[r] = rankings
    return compute_metrics(per_round, ks=ks)


def _score_block(models, gallery_enc, records: list[Record], round_r: int,
                 mode: str, alpha: float, beta: float) -> np.ndarray:
    """(len(records), G) scores of all gallery images for each query prefix."""
    queries = [rec.queries.queries[:round_r] for rec in records]
    flat = [q for qs in queries for q in qs]
    tokens, lengths = _pad_tokens(flat)
    q = len(records)
    tokens = tokens.view(q, round_r, -1)
    lengths = lengths.view(q, round_r)

    def one(direction: str) -> torch.Tensor:
        model = models[direction]
        v_loc, v_glo = gallery_enc[direction]
        with torch.no_grad():
            t_loc, t_glo = model.encode_queries(tokens, lengths)
            need = _needed_levels(direction, alpha, beta)
            sims = model.pair_similarities(
                v_loc.unsqueeze(0), v_glo.unsqueeze(0),
                t_loc.unsqueeze(1), t_glo.unsqueeze(1), need)
        zero = torch.zeros(())
        return aggregate_similarity(sims.get(direction, zero),
                                    sims.get("r", zero),
                                    sims.get("g", zero), alpha, beta)

    if mode == "ensemble":
        scores = ensemble_similarity(one("it"), one("ti"))
    else:
        scores = one(mode)
    return scores.to(torch.float64).numpy()


def compute_metrics(per_round: dict[int, list[RoundRanking]],
                    ks: tuple[int, ...] = DEFAULT_KS) -> MetricsReport:
    """Aggregate rankings into per-round R@K / MR plus round averages."""
    if not per_round:
        raise ValueError("no rankings")
    rounds = sorted(per_round)
    expected = {rr.query_image_id for rr in per_round[rounds[0]]}
    if rounds != list(range(1, len(rounds) + 1)):
        raise ValueError(f"missing round: have {rounds}")
    rows = []
    for r in rounds:
        entries = per_round[r]
        if {e.query_image_id for e in entries} != expected:
            raise ValueError(f"missing round {r} rankings for some records")
        ranks = np.array([e.rank_of_target for e in entries], dtype=np.float64)
        if (ranks < 1).any():
            raise ValueError("target missing from a ranking")
        recalls = {k: 100.0 * float((ranks <= k).mean()) for k in ks}
        rows.append(RoundMetrics(r, recalls, float(ranks.mean())))
    avg_recalls = {k: float(np.mean([m.recalls[k] for m in rows])) for k in ks}
    return MetricsReport(
        rounds=rows, ks=tuple(ks), avg_recalls=avg_recalls,
        avg_rsum=float(sum(avg_recalls.values())),
        avg_mr=float(np.mean([m.mean_rank for m in rows])),
    )


def format_report(report: MetricsReport, fmt: str = "text") -> str:
    """Emit the per-round table with an averages row (text or csv)."""
    header = ["round"] + [f"R@{k}" for k in report.ks] + ["MR"]
    rows = [[str(m.round)] + [f"{m.recalls[k]:.1f}" for k in report.ks]
            + [f"{m.mean_rank:.1f}"] for m in report.rounds]
    avg = ["avg"] + [f"{report.avg_recalls[k]:.1f}" for k in report.ks] \
        + [f"{report.avg_mr:.1f}"]
    if fmt == "csv":
        lines = [",".join(header)] + [",".join(r) for r in rows + [avg]]
        return "\n".join(lines)
    if fmt != "text":
        raise ValueError("format must be 'text' or 'csv'")
    widths = [max(len(h), *(len(r[i]) for r in rows + [avg]))
              for i, h in enumerate(header)]
    def line(cells):
        return "  ".join(c.rjust(w) for c, w in zip(cells, widths))
    out = [line(header), line(["-" * w for w in widths])]
    out += [line(r) for r in rows]
    out.append(line(avg))
    out.append(f"Avg R@Sum = {report.avg_rsum:.1f}")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationSpec:
    name: str
    use_it: bool = False
    use_ti: bool = False
    use_g: bool = False
    use_r: bool = False
    vr_steps: int | None = None
    intra_mode: str | None = None

    def active_levels(self) -> set[str]:
        levels = set()
        if self.use_it:
            levels.add("it")
        if self.use_ti:
            levels.add("ti")
        if self.use_g:
            levels.add("g")
        if self.use_r:
            levels.add("r")
        return levels


def default_ablation_grid() -> list[AblationSpec]:
    """The 9-configuration mask grid over the three similarity levels."""
    return [
        AblationSpec("it-only", use_it=True),
        AblationSpec("g-only", use_g=True),
        AblationSpec("r-only", use_r=True),
        AblationSpec("ti-only", use_ti=True),
        AblationSpec("ti+g", use_ti=True, use_g=True),
        AblationSpec("it+g", use_it=True, use_g=True),
        AblationSpec("ti+g+r", use_ti=True, use_g=True, use_r=True),
        AblationSpec("it+g+r", use_it=True, use_g=True, use_r=True),
        AblationSpec("full-ensemble", use_it=True, use_ti=True,
                     use_g=True, use_r=True),
    ]


def _masked_weights(spec: AblationSpec, alpha0: float, beta0: float,
                    local_active: bool) -> tuple[float, float]:
    """Renormalize base weights over the active levels; masked levels get 0."""
    gamma0 = 1.0 - alpha0 - beta0
    a = alpha0 if local_active else 0.0
    b = beta0 if spec.use_r else 0.0
    g = gamma0 if spec.use_g else 0.0
    total = a + b + g
    if total <= 0:
        raise ValueError(f"ablation row '{spec.name}' has no active similarity level")
    return a / total, b / total


def run_ablation(model_cfg: ModelConfig, train_cfg, train_ds: Dataset,
                 val_ds: Dataset | None, test_ds: Dataset,
                 grid: list[AblationSpec] | None = None, rounds: int | None = None,
                 log=None) -> list[dict]:
    """Train + evaluate one row per ablation configuration (Split strategy)."""
    from .training import TrainConfig, train_model

    grid = grid if grid is not None else default_ablation_grid()
    rows = []
    for spec in grid:
        if not spec.active_levels():
            raise ValueError(f"ablation row '{spec.name}' has no active similarity level")
        mc = ModelConfig(**{**model_cfg.to_dict(),
                            **({"vr_steps": spec.vr_steps} if spec.vr_steps else {}),
                            **({"intra_mode": spec.intra_mode} if spec.intra_mode else {})})
        directions = [d for d in ("it", "ti") if getattr(spec, f"use_{d}")]
        train_dirs = directions or ["it"]   # local weight is 0: direction inert
        models = {}
        for d in train_dirs:
            alpha, beta = _masked_weights(spec, train_cfg.alpha, train_cfg.beta,
                                          local_active=bool(directions))
            tc = TrainConfig(**{**train_cfg.to_dict(), "direction": d,
                                "alpha": alpha, "beta": beta})
            models[d] = train_model(mc, tc, train_ds, val_ds).model
        alpha, beta = _masked_weights(spec, train_cfg.alpha, train_cfg.beta,
                                      local_active=bool(directions))
        if len(directions) == 2:
            mode = "ensemble"
        elif directions:
            mode = directions[0]
        else:
            mode = "it"
            models = {"it": models["it"]}
        report = evaluate(models, test_ds, mode=mode, alpha=alpha, beta=beta,
                          rounds=rounds)
        row = {
            "name": spec.name, "mode": mode, "alpha": alpha, "beta": beta,
            "use_it": spec.use_it, "use_ti": spec.use_ti,
            "use_g": spec.use_g, "use_r": spec.use_r,
            "vr_steps": spec.vr_steps or model_cfg.vr_steps,
            "intra_mode": spec.intra_mode or model_cfg.intra_mode,
            **{f"avg_r{k}": report.avg_recalls[k] for k in report.ks},
            "avg_rsum": report.avg_rsum, "avg_mr": report.avg_mr,
        }
        rows.append(row)
        if log:
            log(row)
    return rows


def count_parameters(source) -> dict:
    """Element counts of all trainable arrays: total, minus-embedding, per module.

    `source` is a RetrievalScorer or a checkpoint path.
    """
    if isinstance(source, RetrievalScorer):
        seen, by_module = set(), {}
        for name, p in source.named_parameters():
            if id(p) in seen:
                continue            # shared pooling params counted once
            seen.add(id(p))
            by_module[name.split(".")[0]] = by_module.get(name.split(".")[0], 0) \
                + p.numel()
        embed = source.query_enc.embed.weight.numel()
    else:
        from .checkpoint import parameter_arrays
        arrays = parameter_arrays(source)
        by_module = {}
        for name, arr in arrays.items():
            by_module[name.split(".")[0]] = by_module.get(name.split(".")[0], 0) \
                + int(arr.size)
        embed = int(arrays["W_e"].size)
    total = sum(by_module.values())
    return {"total": total, "total_excluding_embedding": total - embed,
            "by_module": by_module}
