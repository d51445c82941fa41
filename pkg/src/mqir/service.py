"""Session-based HTTP service for interactive multi-round retrieval.

Rankings come from the same scoring path as the offline evaluator
(`evaluation.rank_gallery` over a prebuilt gallery index), so service and
offline results are order-identical for the same checkpoints and queries.
Sessions live in process memory; per-session mutations are serialized.
"""

from __future__ import annotations

import threading
import time
import uuid
from dataclasses import dataclass, field

import torch
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from .data import Dataset, QuerySet, Record, Vocabulary, tokenize_query
from .evaluation import MODES, RoundRanking, encode_gallery, rank_gallery
from .model import RetrievalScorer


@dataclass
class GalleryIndex:
    """Cached per-image encodings for every loaded model direction."""

    gallery_id: str
    image_ids: list[str]
    records: dict[str, Record]
    encodings: dict[str, tuple[torch.Tensor, torch.Tensor]]
    checkpoint_hash: str
    thumbnails: dict[str, str] = field(default_factory=dict)

    @classmethod
    def build(cls, gallery_id: str, models: dict[str, RetrievalScorer],
              dataset: Dataset, checkpoint_hash: str,
              thumbnails: dict[str, str] | None = None) -> "GalleryIndex":
        return cls(
            gallery_id=gallery_id,
            image_ids=[r.image_id for r in dataset.records],
            records={r.image_id: r for r in dataset.records},
            encodings=encode_gallery(models, dataset.records),
            checkpoint_hash=checkpoint_hash,
            thumbnails=thumbnails or {},
        )


@dataclass
class Session:
    session_id: str
    gallery_id: str
    mode: str
    queries: list[dict] = field(default_factory=list)   # {text, ids}
    ranking: list[dict] = field(default_factory=list)   # {image_id, score}
    created: float = field(default_factory=time.time)
    updated: float = field(default_factory=time.time)
    lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def round(self) -> int:
        return len(self.queries)


class CreateSessionRequest(BaseModel):
    gallery_id: str
    mode: str | None = None


class AddQueryRequest(BaseModel):
    text: str


class LoadGalleryRequest(BaseModel):
    manifest: str


class RetrievalService:
    """Holds models, galleries, and sessions behind the HTTP app."""

    def __init__(self, models: dict[str, RetrievalScorer], vocab: Vocabulary,
                 checkpoint_hash: str, alpha: float = 0.4, beta: float = 0.4,
                 default_mode: str = "ensemble", top_k: int = 12):
        if default_mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.models = models
        self.vocab = vocab
        self.checkpoint_hash = checkpoint_hash
        self.alpha = alpha
        self.beta = beta
        self.default_mode = default_mode
        self.top_k = top_k
        self.galleries: dict[str, GalleryIndex] = {}
        self.sessions: dict[str, Session] = {}

    def add_gallery(self, gallery_id: str, dataset: Dataset,
                    thumbnails: dict[str, str] | None = None) -> GalleryIndex:
        index = GalleryIndex.build(gallery_id, self.models, dataset,
                                   self.checkpoint_hash, thumbnails)
        self.galleries[gallery_id] = index
        return index

    def _gallery(self, gallery_id: str) -> GalleryIndex:
        if gallery_id not in self.galleries:
            raise HTTPException(404, f"unknown gallery '{gallery_id}'")
        return self.galleries[gallery_id]

    def _session(self, session_id: str) -> Session:
        if session_id not in self.sessions:
            raise HTTPException(404, f"unknown session '{session_id}'")
        return self.sessions[session_id]

    def _recompute(self, session: Session) -> None:
        if not session.queries:
            session.ranking = []
            return
        gallery = self._gallery(session.gallery_id)
        qs = QuerySet(image_id="", queries=[q["ids"] for q in session.queries],
                      texts=[q["text"] for q in session.queries])
        ranking = rank_gallery(
            self.models, gallery.encodings, gallery.image_ids, qs,
            round_r=session.round, mode=session.mode,
            alpha=self.alpha, beta=self.beta, keep_order=True)
        session.ranking = [
            {"image_id": i, "score": s}
            for i, s in zip(ranking.ranking, ranking.scores)
        ]

    # -- session operations -------------------------------------------------

    def create_session(self, gallery_id: str, mode: str | None = None) -> Session:
        self._gallery(gallery_id)
        mode = mode or self.default_mode
        if mode not in MODES:
            raise HTTPException(400, f"mode must be one of {MODES}")
        if mode == "ensemble" and ({"it", "ti"} - set(self.models)):
            raise HTTPException(400, "ensemble mode needs both checkpoints")
        if mode != "ensemble" and mode not in self.models:
            raise HTTPException(400, f"no checkpoint loaded for mode '{mode}'")
        session = Session(session_id=uuid.uuid4().hex, gallery_id=gallery_id,
                          mode=mode)
        self.sessions[session.session_id] = session
        return session

    def add_query(self, session_id: str, text: str) -> Session:
        session = self._session(session_id)
        try:
            ids, _ = tokenize_query(text, self.vocab)
        except ValueError as exc:
            raise HTTPException(400, str(exc))
        with session.lock:
            session.queries.append({"text": text, "ids": ids})
            self._recompute(session)
            session.updated = time.time()
        return session

    def remove_query(self, session_id: str, index: int) -> Session:
        session = self._session(session_id)
        with session.lock:
            if index < 0 or index >= len(session.queries):
                raise HTTPException(400, f"query index {index} out of range")
            session.queries.pop(index)
            self._recompute(session)
            session.updated = time.time()
        return session

    def explanation(self, session_id: str, image_id: str) -> dict:
        session = self._session(session_id)
        if not session.queries:
            raise HTTPException(400, "session has no queries")
        gallery = self._gallery(session.gallery_id)
        record = gallery.records.get(image_id)
        if record is None:
            raise HTTPException(404, f"image '{image_id}' not in gallery")
        # text-image attention from the model that computes region weights in
        # the current mode: the ti member when present, else the it member
        direction = "ti" if "ti" in self.models else "it"
        model = self.models[direction]
        from .evaluation import _pad_tokens
        tokens, lengths = _pad_tokens([q["ids"] for q in session.queries])
        features = torch.as_tensor(record.regions.features, dtype=model.dtype)
        info = model.explain(features, tokens, lengths)
        boxes = record.regions.boxes
        out = []
        for j, q in enumerate(session.queries):
            top = int(info["top_region"][j])
            out.append({
                "query_index": j,
                "text": q["text"],
                "weights": [float(w) for w in info["weights"][j]],
                "cosine": [float(c) for c in info["cosine"][j]],
                "top_region": top,
                "box": [float(v) for v in boxes[top]] if boxes is not None else None,
            })
        return {
            "image_id": image_id,
            "direction": direction,
            "queries": out,
            "thumbnail": gallery.thumbnails.get(image_id),
        }


def _session_payload(service: RetrievalService, session: Session,
                     k: int | None) -> dict:
    k = k if k is not None else service.top_k
    return {
        "session_id": session.session_id,
        "gallery_id": session.gallery_id,
        "mode": session.mode,
        "round": session.round,
        "queries": [q["text"] for q in session.queries],
        "ranking": session.ranking[:k] if k > 0 else [],
        "checkpoint_hash": service.checkpoint_hash,
    }


def create_app(service: RetrievalService, dataset_loader=None,
               ui_dir=None) -> FastAPI:
    """HTTP wiring over a RetrievalService.

    dataset_loader(manifest_path) -> Dataset enables POST /galleries/{id}/load.
    """
    app = FastAPI(title="mqir retrieval service")

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "round": 0,
                "checkpoint_hash": service.checkpoint_hash,
                "galleries": sorted(service.galleries),
                "sessions": len(service.sessions)}

    @app.post("/galleries/{gallery_id}/load")
    def load_gallery(gallery_id: str, req: LoadGalleryRequest):
        if dataset_loader is None:
            raise HTTPException(400, "gallery loading is disabled")
        try:
            dataset = dataset_loader(req.manifest)
        except FileNotFoundError as exc:
            raise HTTPException(404, str(exc))
        index = service.add_gallery(gallery_id, dataset)
        return {"gallery_id": gallery_id, "size": len(index.image_ids),
                "round": 0, "checkpoint_hash": service.checkpoint_hash}

    @app.post("/sessions")
    def create_session(req: CreateSessionRequest):
        session = service.create_session(req.gallery_id, req.mode)
        return _session_payload(service, session, None)

    @app.post("/sessions/{session_id}/queries")
    def add_query(session_id: str, req: AddQueryRequest, k: int | None = None):
        session = service.add_query(session_id, req.text)
        return _session_payload(service, session, k)

    @app.delete("/sessions/{session_id}/queries/{index}")
    def remove_query(session_id: str, index: int, k: int | None = None):
        session = service.remove_query(session_id, index)
        return _session_payload(service, session, k)

    @app.get("/sessions/{session_id}/ranking")
    def get_ranking(session_id: str, k: int | None = None):
        session = service._session(session_id)
        return _session_payload(service, session, k)

    @app.get("/sessions/{session_id}/explain/{image_id}")
    def explain(session_id: str, image_id: str):
        session = service._session(session_id)
        payload = service.explanation(session_id, image_id)
        payload.update({"round": session.round,
                        "checkpoint_hash": service.checkpoint_hash})
        return payload

    if ui_dir is not None:
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")
    return app
