"""Dataset schema, vocabulary, synthetic scene generation, and batching.

Images are represented by precomputed region features (K regions x X dims);
each image carries an ordered list of region-specific text queries. The
synthetic generator builds scenes whose region features are deterministic
functions of (color, object, position) attribute tuples, with one templated
caption per region, so retrieval ground truth is known exactly.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .utils import check_finite

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_WORD_RE = re.compile(r"[^\w\s]+")


def _split_words(text: str) -> list[str]:
    """Lowercase, strip punctuation, whitespace split."""
    return _WORD_RE.sub(" ", text.lower()).split()


class Vocabulary:
    """Word <-> id mapping with reserved pad=0 and unk=1 slots."""

    def __init__(self, tokens: list[str]):
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        if PAD_TOKEN in tokens or UNK_TOKEN in tokens:
            raise ValueError("reserved tokens may not appear in the corpus list")
        self.id_to_token = [PAD_TOKEN, UNK_TOKEN] + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode_token(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def decode(self, ids) -> str:
        return " ".join(self.id_to_token[i] for i in ids)

    def content_hash(self) -> str:
        payload = "\n".join(self.id_to_token[2:]).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()

    def save(self, path) -> None:
        # one token per line, line number = id - 2 (ids 0, 1 reserved)
        Path(path).write_text("\n".join(self.id_to_token[2:]) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


def build_vocabulary(corpus: list[str], min_count: int = 1) -> Vocabulary:
    """Index every token occurring >= min_count times; rarer tokens map to unk.

    Ordering is deterministic: frequency descending, ties lexicographic.
    """
    if not corpus:
        raise ValueError("empty corpus")
    counts = Counter()
    for text in corpus:
        counts.update(_split_words(text))
    kept = sorted((t for t, c in counts.items() if c >= min_count),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def tokenize_query(text: str, vocab: Vocabulary) -> tuple[list[int], int]:
    """Tokenize one query; returns (token ids, true length M). OOV -> unk."""
    words = _split_words(text)
    if not words:
        raise ValueError("empty query")
    ids = [vocab.encode_token(w) for w in words]
    return ids, len(ids)


@dataclass
class RegionFeatureSet:
    """One image's K region feature vectors plus optional pixel boxes."""

    image_id: str
    features: np.ndarray            # (K, X) float32
    boxes: np.ndarray | None = None  # (K, 4) as (x, y, w, h)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"features must be (K>=1, X), got {self.features.shape}")
        check_finite(self.features, f"features[{self.image_id}]")
        if self.boxes is not None:
            self.boxes = np.asarray(self.boxes, dtype=np.float32)
            if self.boxes.shape != (self.features.shape[0], 4):
                raise ValueError("boxes must be (K, 4)")
            if (self.boxes[:, 2] <= 0).any() or (self.boxes[:, 3] <= 0).any():
                raise ValueError("box width/height must be positive")

    @property
    def num_regions(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass
class QuerySet:
    """Ordered region-specific queries for one image, as token-id sequences."""

    image_id: str
    queries: list[list[int]]
    texts: list[str] | None = None

    def __post_init__(self):
        if len(self.queries) < 1:
            raise ValueError("a query set needs at least one query")
        if any(len(q) < 1 for q in self.queries):
            raise ValueError("queries must have true length >= 1")
        if self.texts is not None and len(self.texts) != len(self.queries):
            raise ValueError("texts and queries length mismatch")

    @property
    def num_queries(self) -> int:
        return len(self.queries)

    @property
    def lengths(self) -> list[int]:
        return [len(q) for q in self.queries]

    def check_ids(self, vocab_size: int) -> None:
        if any(i >= vocab_size or i < 0 for q in self.queries for i in q):
            raise ValueError("token id out of vocabulary range")


@dataclass
class Record:
    regions: RegionFeatureSet
    queries: QuerySet

    def __post_init__(self):
        if self.regions.image_id != self.queries.image_id:
            raise ValueError("region/query image_id mismatch")

    @property
    def image_id(self) -> str:
        return self.regions.image_id


@dataclass
class Dataset:
    records: list[Record]
    split: str = "train"

    def __post_init__(self):
        ids = [r.image_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate image_ids in split '{self.split}'")

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> Record:
        return self.records[i]

    def require_min_queries(self, n: int) -> None:
        short = [r.image_id for r in self.records if r.queries.num_queries < n]
        if short:
            raise ValueError(f"{len(short)} records have fewer than {n} queries "
                             f"(e.g. {short[0]})")


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

_COLOR_NAMES = ["red", "blue", "green", "yellow", "black", "white", "orange",
                "purple", "brown", "silver"]
_OBJECT_NAMES = ["mouse", "desk", "chair", "lamp", "keyboard", "monitor",
                 "tv set", "coffee table", "plant", "shelf", "sofa", "rug"]
_POSITION_NAMES = ["left", "right", "top", "bottom", "center", "corner",
                   "front", "back"]


def _attribute_names(base: list[str], count: int, prefix: str) -> list[str]:
    if count <= len(base):
        return base[:count]
    return base + [f"{prefix}{i}" for i in range(len(base), count)]


@dataclass(frozen=True)
class SyntheticConfig:
    num_scenes: int
    num_regions: int        # K
    num_queries: int        # N, one query per distinct region
    feature_dim: int = 36   # X
    colors: int = 5
    objects: int = 8
    positions: int = 4
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_queries > self.num_regions:
            raise ValueError("num_queries must not exceed num_regions "
                             "(each query describes a distinct region)")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.colors * self.objects * self.positions < self.num_regions:
            raise ValueError("attribute space smaller than regions per scene")
        if min(self.num_scenes, self.num_regions, self.num_queries) < 1:
            raise ValueError("counts must be positive")
        if self.feature_dim < 3:
            raise ValueError("feature_dim must be >= 3")


_SPLIT_SALT = {"train": 0, "val": 1, "test": 2}

_CANVAS = 256


class SyntheticWorld:
    """Fixed attribute bases + vocabulary shared by all splits of one config."""

    def __init__(self, cfg: SyntheticConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 815])
        d = cfg.feature_dim
        chunk = d // 3
        self.dims = (d - 2 * chunk, chunk, chunk)
        self.color_basis = rng.standard_normal((cfg.colors, self.dims[0]))
        self.object_basis = rng.standard_normal((cfg.objects, self.dims[1]))
        self.position_basis = rng.standard_normal((cfg.positions, self.dims[2]))
        self.color_names = _attribute_names(_COLOR_NAMES, cfg.colors, "color")
        self.object_names = _attribute_names(_OBJECT_NAMES, cfg.objects, "object")
        self.position_names = _attribute_names(_POSITION_NAMES, cfg.positions, "position")
        corpus = [self.caption(c, o, p)
                  for c in range(cfg.colors)
                  for o in range(cfg.objects)
                  for p in range(cfg.positions)]
        self.vocab = build_vocabulary(corpus, min_count=1)

    def caption(self, c: int, o: int, p: int) -> str:
        return f"{self.color_names[c]} {self.object_names[o]} at {self.position_names[p]}"

    def feature(self, c: int, o: int, p: int, rng: np.random.Generator) -> np.ndarray:
        x = np.concatenate([self.color_basis[c], self.object_basis[o],
                            self.position_basis[p]])
        if self.cfg.noise > 0:
            x = x + self.cfg.noise * rng.standard_normal(x.shape)
        return x.astype(np.float32)

    def box(self, p: int, o: int) -> np.ndarray:
        # deterministic schematic layout: position picks a cell on a 3x3-ish
        # grid, object index nudges the size so overlapping boxes stay visible
        cols = 3
        cell = _CANVAS // cols
        gx, gy = p % cols, (p // cols) % cols
        w = cell - 10 - 2 * (o % 4)
        h = cell - 10 - 2 * ((o // 4) % 4)
        return np.array([gx * cell + 5, gy * cell + 5, max(w, 8), max(h, 8)],
                        dtype=np.float32)

    def _scene(self, split: str, idx: int, rng: np.random.Generator) -> Record:
        cfg = self.cfg
        space = cfg.colors * cfg.objects * cfg.positions
        flat = rng.choice(space, size=cfg.num_regions, replace=False)
        tuples = [(int(f) // (cfg.objects * cfg.positions),
                   (int(f) // cfg.positions) % cfg.objects,
                   int(f) % cfg.positions) for f in flat]
        feats = np.stack([self.feature(c, o, p, rng) for c, o, p in tuples])
        boxes = np.stack([self.box(p, o) for _, o, p in tuples])
        image_id = f"{split}-{idx:06d}"
        texts = [self.caption(*tuples[j]) for j in range(cfg.num_queries)]
        queries = [tokenize_query(t, self.vocab)[0] for t in texts]
        return Record(
            regions=RegionFeatureSet(image_id, feats, boxes),
            queries=QuerySet(image_id, queries, texts),
        )

    def generate_split(self, split: str, num_scenes: int | None = None) -> Dataset:
        n = self.cfg.num_scenes if num_scenes is None else num_scenes
        salt = _SPLIT_SALT.get(split, abs(hash(split)) % 997 + 3)
        rng = np.random.default_rng([self.cfg.seed, salt])
        return Dataset([self._scene(split, i, rng) for i in range(n)], split=split)


def generate_synthetic_dataset(cfg: SyntheticConfig,
                               split: str = "train") -> tuple[Dataset, Vocabulary]:
    """Generate one synthetic split; pure function of (cfg, split)."""
    world = SyntheticWorld(cfg)
    return world.generate_split(split), world.vocab


# ---------------------------------------------------------------------------
# Manifest + feature blob persistence
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write manifest.json plus one little-endian float32 blob per image."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    records = []
    for rec in dataset.records:
        rel = f"features/{rec.image_id}.bin"
        rec.regions.features.astype("<f4").tofile(out / rel)
        entry = {
            "image_id": rec.image_id,
            "feature_file": rel,
            "K": rec.regions.num_regions,
            "X": rec.regions.feature_dim,
            "captions": rec.queries.texts,
        }
        if rec.regions.boxes is not None:
            entry["boxes"] = rec.regions.boxes.tolist()
        records.append(entry)
    manifest = {"split": dataset.split, "records": records}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return path


def load_dataset(manifest_path, vocab: Vocabulary) -> Dataset:
    """Load a manifest written by save_dataset; captions are re-tokenized."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text(encoding="utf-8"))
    base = path.parent
    records = []
    for entry in manifest["records"]:
        feats = np.fromfile(base / entry["feature_file"], dtype="<f4")
        feats = feats.reshape(entry["K"], entry["X"])
        boxes = np.asarray(entry["boxes"], dtype=np.float32) if "boxes" in entry else None
        texts = entry["captions"]
        queries = [tokenize_query(t, vocab)[0] for t in texts]
        qs = QuerySet(entry["image_id"], queries, texts)
        qs.check_ids(len(vocab))
        records.append(Record(RegionFeatureSet(entry["image_id"], feats, boxes), qs))
    return Dataset(records, split=manifest.get("split", "train"))


def render_schematic(record: Record, path, canvas: int = _CANVAS) -> None:
    """Draw region boxes as a schematic thumbnail for the UI gallery."""
    from PIL import Image, ImageDraw

    palette = ["#e6194b", "#3cb44b", "#ffe119", "#4363d8", "#f58231",
               "#911eb4", "#46f0f0", "#f032e6", "#bcf60c", "#008080"]
    img = Image.new("RGB", (canvas, canvas), "white")
    draw = ImageDraw.Draw(img)
    boxes = record.regions.boxes
    if boxes is not None:
        for i, (x, y, w, h) in enumerate(boxes):
            draw.rectangle([x, y, x + w, y + h],
                           outline=palette[i % len(palette)], width=3)
    img.save(path)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    image_ids: list[str]
    features: torch.Tensor   # (B, K, X) float
    tokens: torch.Tensor     # (B, N, L) long, pad id in masked slots
    lengths: torch.Tensor    # (B, N) long, true lengths

    def __len__(self) -> int:
        return len(self.image_ids)


def collate(records: list[Record], query_orders: list[list[int]] | None = None,
            dtype: torch.dtype = torch.float32) -> Batch:
    """Stack records into one batch, padding queries to the batch max length."""
    ks = {r.regions.num_regions for r in records}
    ns = {r.queries.num_queries for r in records}
    if len(ks) != 1 or len(ns) != 1:
        raise ValueError("batched records must share K and N")
    n = ns.pop()
    if query_orders is None:
        query_orders = [list(range(n))] * len(records)
    ordered = [[rec.queries.queries[j] for j in order]
               for rec, order in zip(records, query_orders)]
    max_len = max(len(q) for qs in ordered for q in qs)
    tokens = torch.full((len(records), n, max_len), PAD_ID, dtype=torch.long)
    lengths = torch.zeros((len(records), n), dtype=torch.long)
    for b, qs in enumerate(ordered):
        for j, q in enumerate(qs):
            tokens[b, j, :len(q)] = torch.tensor(q, dtype=torch.long)
            lengths[b, j] = len(q)
    features = torch.stack(
        [torch.as_tensor(r.regions.features, dtype=dtype) for r in records])
    return Batch([r.image_id for r in records], features, tokens, lengths)


def iterate_batches(dataset: Dataset, batch_size: int, shuffle: bool = False,
                    seed: int = 0, epoch: int = 0, train_mode: bool = False,
                    dtype: torch.dtype = torch.float32):
    """Yield Batches; the last partial batch is emitted.

    In train mode each record's query order is re-sampled per epoch; the
    stream replays exactly under the same (seed, epoch). Val/test mode keeps
    the stored query order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng([seed, epoch, 57])
    order = np.arange(len(dataset))
    if shuffle:
        rng.shuffle(order)
    perms: list[list[int]] | None = None
    if train_mode:
        perms = [rng.permutation(dataset[int(i)].queries.num_queries).tolist()
                 for i in order]
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        recs = [dataset[int(i)] for i in idx]
        sub = perms[start:start + batch_size] if perms is not None else None
        yield collate(recs, sub, dtype=dtype)
