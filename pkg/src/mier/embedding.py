"""Record-pair serialization, a hashed character n-gram embedder, and the
binary embedding file format shared with externally computed vectors."""
from __future__ import annotations

import hashlib
import json
import math
import re
import struct
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import CandidatePairSet, DataError

LEFT, RIGHT, FIELD = "«L»", "«R»", "«F»"
_ESCAPE = re.compile(r"\\(.)", re.S)

EMB_MAGIC = b"MIEREMB1"
MANIFEST_VERSION = 1


@dataclass
class PairEmbeddingSet:
    """One vector per candidate pair, rows in ``pair_ids`` order.

    Vectors are stored as float32 so that the on-disk format round-trips
    exactly. ``intent_id`` is None for intent-agnostic vectors.
    """
    intent_id: int | None
    vectors: np.ndarray
    pair_ids: np.ndarray

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        self.pair_ids = np.asarray(self.pair_ids, dtype=np.int64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.pair_ids):
            raise DataError(
                f"embedding shape {self.vectors.shape} does not match "
                f"{len(self.pair_ids)} pair ids")
        if not np.all(np.isfinite(self.vectors)):
            row = int(np.argwhere(~np.isfinite(self.vectors))[0, 0])
            raise DataError(f"non-finite value in embedding of pair {self.pair_ids[row]}")

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.pair_ids)

    def aligned(self) -> np.ndarray:
        """Vectors reordered so that row i belongs to pair_id i."""
        order = np.argsort(self.pair_ids, kind="stable")
        if not np.array_equal(self.pair_ids[order], np.arange(len(order))):
            raise DataError("pair ids are not a permutation of 0..n-1")
        return self.vectors[order]

    def __eq__(self, other):
        return (isinstance(other, PairEmbeddingSet)
                and self.intent_id == other.intent_id
                and np.array_equal(self.pair_ids, other.pair_ids)
                and self.vectors.tobytes() == other.vectors.tobytes())


# -- serialization -----------------------------------------------------------

def _escape(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (list, tuple)):
        value = " ".join(str(v) for v in value)
    s = str(value)
    return s.replace("\\", "\\\\").replace("«", "\\«").replace("»", "\\»")


def _unescape(s: str) -> str:
    return _ESCAPE.sub(r"\1", s)


def serialize_record(record, fields=None) -> str:
    names = list(record.fields) if fields is None else fields
    return f" {FIELD} ".join(_escape(record.get(n)) for n in names)


def serialize_pair(pair, records, fields=None) -> str:
    """``«L» <left values> «R» <right values>`` with ``«F»`` between attributes.

    Delimiter characters inside values are backslash-escaped.
    """
    left = records[pair.left_id]
    right = records[pair.right_id]
    return f"{LEFT} {serialize_record(left, fields)} {RIGHT} {serialize_record(right, fields)}"


def parse_serialized(text: str) -> tuple[list[str], list[str]]:
    """Inverse of :func:`serialize_pair`: field values of both records."""
    if not text.startswith(LEFT + " "):
        raise ValueError("serialized pair must start with the left delimiter")
    body = text[len(LEFT) + 1:]
    left, sep, right = body.partition(f" {RIGHT} ")
    if not sep:
        raise ValueError("serialized pair has no right delimiter")
    split = lambda side: [_unescape(v) for v in side.split(f" {FIELD} ")]
    return split(left), split(right)


# -- lexical embedder ----------------------------------------------------------

def char_ngrams(text: str, n_min=3, n_max=5):
    text = text.lower()
    for n in range(n_min, n_max + 1):
        for i in range(len(text) - n + 1):
            yield text[i:i + n]


class _GramHasher:
    def __init__(self, dim, seed):
        self.dim = dim
        self.key = struct.pack("<q", seed)
        self.cache = {}

    def __call__(self, gram):
        hit = self.cache.get(gram)
        if hit is None:
            h = int.from_bytes(
                hashlib.blake2b(gram.encode(), digest_size=8, key=self.key).digest(), "little")
            hit = (h % self.dim, 1.0 if (h >> 63) & 1 else -1.0)
            self.cache[gram] = hit
        return hit


def embed_lexical(pairs: CandidatePairSet, records, dim=256, seed=0, train_mask=None,
                  fields=None, ngram_range=(3, 5), shared_grams=False) -> PairEmbeddingSet:
    """Signed feature-hashed TF-IDF of character n-grams of each serialized pair.

    Document frequencies come from the pairs selected by ``train_mask`` only
    (all pairs when it is None). Rows are L2-normalized.

    With ``shared_grams`` the vector is split in two halves: the signed bag of
    the whole pair, then an unsigned hashed bag of the grams the two records
    have in common, weighted by ``min(count_left, count_right) * idf``. A plain
    bag of the concatenation cannot tell which side a gram came from, so a
    small classifier has a hard time learning agreement between the sides;
    the second half states it directly.
    """
    if dim < 16:
        raise ValueError(f"dim must be >= 16, got {dim}")
    if shared_grams and dim % 2:
        raise ValueError(f"dim must be even with shared_grams, got {dim}")
    texts = [serialize_pair(p, records, fields) for p in pairs]
    counts = [Counter(char_ngrams(t, *ngram_range)) for t in texts]
    train = range(len(texts)) if train_mask is None else np.flatnonzero(train_mask)
    df = Counter()
    for i in train:
        df.update(counts[i].keys())
    n_train = len(train)
    half = dim // 2 if shared_grams else dim
    hasher = _GramHasher(half, seed)

    def idf(gram):
        return math.log((1 + n_train) / (1 + df.get(gram, 0))) + 1.0

    side_grams = {}

    def grams_of(rid):
        if rid not in side_grams:
            side_grams[rid] = Counter(char_ngrams(serialize_record(records[rid], fields),
                                                  *ngram_range))
        return side_grams[rid]

    def has_content(rid):
        rec = records[rid]
        names = list(rec.fields) if fields is None else fields
        return any(_escape(rec.get(n)).strip() for n in names)

    out = np.zeros((len(texts), dim))
    for i, c in enumerate(counts):
        row = out[i]
        if not (has_content(pairs[i].left_id) or has_content(pairs[i].right_id)):
            # delimiters alone would still give grams; an all-null pair stays zero
            warnings.warn(f"pair {i} has an empty serialization; zero vector used",
                          stacklevel=2)
            continue
        # sorted grams fix the float summation order
        for gram in sorted(c):
            j, sign = hasher(gram)
            row[j] += sign * c[gram] * idf(gram)
        if shared_grams:
            p = pairs[i]
            left, right = grams_of(p.left_id), grams_of(p.right_id)
            for gram in sorted(left.keys() & right.keys()):
                j, _ = hasher(gram)
                row[half + j] += min(left[gram], right[gram]) * idf(gram)
        if shared_grams:
            for block in (row[:half], row[half:]):
                norm = np.linalg.norm(block)
                if norm > 0:
                    block /= norm * math.sqrt(2.0)
        norm = np.linalg.norm(row)
        if norm > 0:
            row /= norm
    return PairEmbeddingSet(None, out, np.arange(len(texts)))


# -- file format ---------------------------------------------------------------

def _write_matrix(path, vectors):
    rows, dim = vectors.shape
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC + struct.pack("<II", dim, rows))
        fh.write(vectors.astype("<f4").tobytes(order="C"))


def _read_matrix(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:8] != EMB_MAGIC:
        raise DataError(f"{path}: bad embedding header")
    dim, rows = struct.unpack_from("<II", data, 8)
    expected = 16 + 4 * dim * rows
    if len(data) != expected:
        raise DataError(f"{path}: expected {expected} bytes for {rows}x{dim}, got {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(rows, dim).astype(np.float32)


def export_embeddings(sets, directory) -> Path:
    """Write one matrix + index file per set and a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dims = {s.dim for s in sets}
    counts = {len(s) for s in sets}
    if len(counts) != 1:
        raise DataError(f"embedding sets cover different pair counts {sorted(counts)}")
    files = []
    for k, s in enumerate(sets):
        stem = f"intent_{k}" if s.intent_id is None else f"intent_{s.intent_id}"
        _write_matrix(directory / f"{stem}.emb", s.vectors)
        (directory / f"{stem}.idx").write_text("".join(f"{int(i)}\n" for i in s.pair_ids))
        files.append({"intent_id": s.intent_id, "matrix": f"{stem}.emb",
                      "index": f"{stem}.idx", "dim": s.dim})
    manifest = {"version": MANIFEST_VERSION, "P": len(sets),
                "dim": dims.pop() if len(dims) == 1 else None,
                "pair_count": counts.pop(), "files": files}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def import_embeddings(manifest_path, pair_count=None, align=False) -> list[PairEmbeddingSet]:
    """Load and validate the sets listed in a manifest.

    Every set must cover pair ids ``0..pair_count-1`` exactly once. With
    ``align`` the rows are reordered by pair id.
    """
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataError(f"{manifest_path}: unsupported manifest version {manifest.get('version')}")
    n = manifest["pair_count"] if pair_count is None else pair_count
    if manifest["pair_count"] != n:
        raise DataError(f"{manifest_path}: manifest covers {manifest['pair_count']} pairs, "
                        f"expected {n}")
    if len(manifest["files"]) != manifest["P"]:
        raise DataError(f"{manifest_path}: P={manifest['P']} but {len(manifest['files'])} files")
    out = []
    for entry in manifest["files"]:
        mat_path = manifest_path.parent / entry["matrix"]
        vectors = _read_matrix(mat_path)
        ids = np.array([int(x) for x in
                        (manifest_path.parent / entry["index"]).read_text().split()],
                       dtype=np.int64)
        want_dim = entry.get("dim", manifest.get("dim"))
        if want_dim is not None and vectors.shape[1] != want_dim:
            raise DataError(f"{mat_path}: dimension {vectors.shape[1]}, manifest says {want_dim}")
        if len(ids) != vectors.shape[0]:
            raise DataError(f"{mat_path}: {vectors.shape[0]} rows but {len(ids)} index entries")
        seen = np.zeros(n, dtype=bool)
        for i in ids:
            if i < 0 or i >= n or seen[i]:
                raise DataError(f"{mat_path}: unexpected or repeated pair id {i}")
            seen[i] = True
        if not seen.all():
            raise DataError(f"{mat_path}: missing pair id {int(np.flatnonzero(~seen)[0])}")
        bad = ~np.isfinite(vectors)
        if bad.any():
            raise DataError(f"{mat_path}: non-finite value for pair id "
                            f"{int(ids[np.argwhere(bad)[0, 0]])}")
        s = PairEmbeddingSet(entry["intent_id"], vectors, ids)
        if align:
            s = PairEmbeddingSet(s.intent_id, s.aligned(), np.arange(n))
        out.append(s)
    return out
