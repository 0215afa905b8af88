"""Pre-scored ranking data: containers, parsers, filtering and query-level splits.

Two on-disk formats are understood:

* JSONL, one query per line::

      {"qid": "q1", "docs": [{"id": "a", "score": 1.5, "rel": 2}, ...]}

* SVMLight/LETOR feature lines (``<rel> qid:<id> <f>:<v> ...``) with a
  sidecar file holding one external score per feature line.

Any path ending in ``.gz`` is read (and written) through gzip.
"""

import gzip
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import ValidationError

logger = logging.getLogger(__name__)

MAX_GRADE = 4


class ParseError(ValueError):
    """Raised for malformed input lines; carries the 1-based line number."""

    def __init__(self, message, lineno=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if lineno is not None:
            where += f":{lineno}" if where else f"line {lineno}"
        super().__init__(f"{where}: {message}" if where else message)
        self.lineno = lineno
        self.path = path


@dataclass(frozen=True)
class Document:
    doc_id: str
    raw_score: float
    relevance: int


@dataclass(frozen=True)
class ScoredQuery:
    qid: str
    docs: tuple

    def __post_init__(self):
        object.__setattr__(self, "docs", tuple(self.docs))
        if not self.docs:
            raise ValidationError(f"query {self.qid!r} has no documents")
        ids = [d.doc_id for d in self.docs]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate doc_id within query {self.qid!r}")

    def __len__(self):
        return len(self.docs)

    @property
    def doc_ids(self):
        return [d.doc_id for d in self.docs]

    @property
    def scores(self):
        return np.array([d.raw_score for d in self.docs], dtype=float)

    @property
    def relevances(self):
        return np.array([d.relevance for d in self.docs], dtype=int)


@dataclass(frozen=True)
class QueryCollection:
    queries: tuple
    provenance: str = ""
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "queries", tuple(self.queries))
        index = {}
        for i, q in enumerate(self.queries):
            if q.qid in index:
                raise ValidationError(f"duplicate qid {q.qid!r} in collection")
            index[q.qid] = i
        object.__setattr__(self, "_index", index)

    def __len__(self):
        return len(self.queries)

    def __iter__(self):
        return iter(self.queries)

    def __getitem__(self, qid):
        return self.queries[self._index[qid]]

    @property
    def qids(self):
        return [q.qid for q in self.queries]

    def subset(self, qids, provenance=None):
        return QueryCollection(
            [self[q] for q in qids],
            provenance=self.provenance if provenance is None else provenance,
        )


@dataclass(frozen=True)
class SplitSpec:
    calibration_fraction: float = 0.25
    seed: int = 0
    trial_index: int = 0

    def __post_init__(self):
        if not 0.0 < self.calibration_fraction < 1.0:
            raise ValidationError(
                f"calibration_fraction must lie in (0, 1), got {self.calibration_fraction}"
            )
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")
        if int(self.trial_index) < 0:
            raise ValidationError("trial_index must be non-negative")


def _open_text(path, mode="rt"):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode, encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def make_document(doc_id, score, rel, max_grade=MAX_GRADE):
    score = float(score)
    if not math.isfinite(score):
        raise ValidationError(f"document {doc_id!r}: score must be finite, got {score}")
    if isinstance(rel, bool) or int(rel) != rel:
        raise ValidationError(f"document {doc_id!r}: relevance must be an integer, got {rel!r}")
    rel = int(rel)
    if not 0 <= rel <= max_grade:
        raise ValidationError(
            f"document {doc_id!r}: relevance grade {rel} outside [0, {max_grade}]"
        )
    return Document(str(doc_id), score, rel)


def parse_jsonl(path, max_grade=MAX_GRADE):
    """Read a JSONL file with one query object per line."""
    queries = []
    with _open_text(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON ({exc.msg})", lineno, path) from None
            try:
                qid = str(obj["qid"])
                docs = [
                    make_document(d["id"], d["score"], d["rel"], max_grade)
                    for d in obj["docs"]
                ]
                queries.append(ScoredQuery(qid, docs))
            except (KeyError, TypeError) as exc:
                raise ParseError(f"missing or invalid field {exc}", lineno, path) from None
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return QueryCollection(queries, provenance=f"jsonl:{path}")


def query_to_dict(query):
    return {
        "qid": query.qid,
        "docs": [{"id": d.doc_id, "score": d.raw_score, "rel": d.relevance} for d in query.docs],
    }


def write_jsonl(collection, path):
    with _open_text(path, "wt") as fh:
        for q in collection:
            fh.write(json.dumps(query_to_dict(q)) + "\n")


def parse_svmlight(features_path, scores_path, max_grade=MAX_GRADE):
    """Group LETOR feature lines into queries and attach sidecar scores.

    Feature values are skipped; only the grade, the qid and the external
    score survive. A qid that reappears after a different qid is an error.
    """
    with _open_text(scores_path) as fh:
        score_lines = [ln for ln in (s.strip() for s in fh) if ln]
    queries = []
    seen = set()
    current_qid, current_docs = None, []
    n_lines = 0
    with _open_text(features_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if n_lines >= len(score_lines):
                raise ParseError(
                    f"feature file has more lines than score file ({len(score_lines)})",
                    lineno, features_path,
                )
            tokens = body.split()
            if len(tokens) < 2 or not tokens[1].startswith("qid:"):
                raise ParseError("missing qid token", lineno, features_path)
            qid = tokens[1][4:]
            try:
                rel = float(tokens[0])
                score = float(score_lines[n_lines])
            except ValueError as exc:
                raise ParseError(str(exc), lineno, features_path) from None
            if rel != int(rel):
                raise ParseError(f"non-integer relevance {tokens[0]}", lineno, features_path)
            n_lines += 1
            if qid != current_qid:
                if current_qid is not None:
                    queries.append(ScoredQuery(current_qid, current_docs))
                if qid in seen:
                    raise ParseError(
                        f"qid {qid} reappears after a different qid (non-consecutive block)",
                        lineno, features_path,
                    )
                seen.add(qid)
                current_qid, current_docs = qid, []
            doc_id = f"{qid}:{len(current_docs)}"
            try:
                current_docs.append(make_document(doc_id, score, int(rel), max_grade))
            except ValidationError as exc:
                raise ValidationError(f"{features_path}:{lineno}: {exc}") from None
    if n_lines != len(score_lines):
        raise ParseError(
            f"line-count mismatch: {n_lines} feature lines vs {len(score_lines)} scores",
            path=scores_path,
        )
    if current_qid is not None:
        queries.append(ScoredQuery(current_qid, current_docs))
    return QueryCollection(queries, provenance=f"svmlight:{features_path}+{scores_path}")


def filter_no_relevant(collection, min_grade=1):
    """Drop queries without any document graded ``>= min_grade``.

    Returns ``(filtered, n_removed)``.
    """
    if not 1 <= min_grade <= MAX_GRADE:
        raise ValidationError(f"min_grade must lie in [1, {MAX_GRADE}], got {min_grade}")
    kept = [q for q in collection if any(d.relevance >= min_grade for d in q.docs)]
    removed = len(collection) - len(kept)
    if removed:
        logger.info("removed %d of %d queries without relevant documents",
                    removed, len(collection))
    return QueryCollection(kept, provenance=collection.provenance), removed


def split(collection, spec):
    """Partition queries into (calibration, test) deterministically from the spec."""
    n = len(collection)
    if n < 2:
        raise ValidationError(f"need at least 2 queries to split, got {n}")
    n_cal = int(math.floor(spec.calibration_fraction * n + 0.5))
    n_cal = min(max(n_cal, 1), n - 1)
    ss = np.random.SeedSequence(int(spec.seed), spawn_key=(0x5B1, int(spec.trial_index)))
    perm = np.random.default_rng(ss).permutation(n)
    cal_idx = np.sort(perm[:n_cal])
    test_idx = np.sort(perm[n_cal:])
    qids = collection.qids
    return (
        collection.subset([qids[i] for i in cal_idx]),
        collection.subset([qids[i] for i in test_idx]),
    )
