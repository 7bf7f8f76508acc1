"""Requests as token sequences: CSV ingestion, synthetic corpora, class grouping,
the adjacency view of normal traffic and second-order random walks over it."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

MAX_LEN = 16
CSV_COLUMNS = ("timestamp", "source", "destination", "request_len", "ip_flags",
               "tcp_len", "tcp_flags", "tcp_window", "protocol", "label")
FEATURE_COLUMNS = ("request_len", "ip_flags", "tcp_len", "tcp_flags", "tcp_window")
LABELS = ("normal", "attack")


class CorpusError(ValueError):
    pass


class SchemaError(CorpusError):
    pass


class CorpusFormatError(CorpusError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


class EmptyCorpusError(CorpusError):
    pass


@dataclass(frozen=True)
class SubRequest:
    token_id: int
    feature_value: float
    class_id: int = -1


class Request:
    """One source's ordered sub-requests, stored column-wise."""

    __slots__ = ("tokens", "values", "classes", "source_id", "label", "interval_index",
                 "destination")

    def __init__(self, tokens, values, classes=None, source_id="", label="normal",
                 interval_index=None, destination="server"):
        self.tokens = np.asarray(tokens, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)
        n = self.tokens.size
        if not 1 <= n <= MAX_LEN:
            raise ValueError(f"request length {n} outside [1, {MAX_LEN}]")
        if self.values.shape != (n,):
            raise ValueError("tokens and values differ in length")
        self.classes = (np.full(n, -1, dtype=np.int64) if classes is None
                        else np.asarray(classes, dtype=np.int64))
        if label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {label!r}")
        self.source_id = source_id
        self.label = label
        self.interval_index = interval_index
        self.destination = destination

    def __len__(self):
        return self.tokens.size

    @property
    def subs(self):
        return [SubRequest(int(t), float(v), int(c))
                for t, v, c in zip(self.tokens, self.values, self.classes)]

    def replace(self, **kw):
        fields = {s: getattr(self, s) for s in self.__slots__}
        fields.update(kw)
        return Request(**fields)

    def __eq__(self, other):
        if not isinstance(other, Request):
            return NotImplemented
        return (np.array_equal(self.tokens, other.tokens)
                and np.array_equal(self.values, other.values)
                and np.array_equal(self.classes, other.classes)
                and (self.source_id, self.label, self.interval_index, self.destination)
                == (other.source_id, other.label, other.interval_index, other.destination))

    def __repr__(self):
        return (f"Request(source_id={self.source_id!r}, label={self.label!r}, "
                f"tokens={self.tokens.tolist()})")


def _bucket(value):
    v = float(value)
    return int(v) if v.is_integer() else v


class Vocabulary:
    """Token id <-> (feature bucket, protocol) descriptor, ids in first-seen order."""

    def __init__(self, descriptors=()):
        self._items = []
        self._index = {}
        for d in descriptors:
            self.add(*d)

    def add(self, bucket, protocol):
        key = (_bucket(bucket), str(protocol))
        if key not in self._index:
            self._index[key] = len(self._items)
            self._items.append(key)
        return self._index[key]

    def lookup(self, bucket, protocol):
        return self._index.get((_bucket(bucket), str(protocol)))

    def descriptor(self, token_id):
        return self._items[token_id]

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self._items == other._items

    def copy(self):
        return Vocabulary(self._items)

    def to_list(self):
        return [list(d) for d in self._items]

    @classmethod
    def from_list(cls, items):
        return cls([tuple(d) for d in items])


@dataclass
class RequestCorpus:
    requests: list
    vocab: Vocabulary
    feature_name: str = "request_len"
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.requests)

    def __iter__(self):
        return iter(self.requests)

    def __getitem__(self, i):
        return self.requests[i]

    def token_sequences(self):
        return [r.tokens for r in self.requests]

    def class_sequences(self):
        return [r.classes for r in self.requests]

    @property
    def labels(self):
        return np.array([r.label for r in self.requests])

    def is_attack(self):
        return np.array([r.label == "attack" for r in self.requests], dtype=bool)

    def feature_values(self):
        if not self.requests:
            return np.empty(0)
        return np.concatenate([r.values for r in self.requests])

    def subset(self, indices):
        return RequestCorpus([self.requests[i] for i in indices], self.vocab,
                             self.feature_name, dict(self.metadata))

    def with_requests(self, requests):
        return RequestCorpus(list(requests), self.vocab, self.feature_name,
                             dict(self.metadata))


# ------------------------------------------------------------------ CSV I/O


def ingest_csv(path, feature_name="request_len", schema=None, vocab=None,
               interval_seconds=None, max_len=MAX_LEN):
    """Read a packet-level CSV into a :class:`RequestCorpus`.

    ``schema`` maps logical fields (``timestamp``, ``source``, ``destination``,
    ``feature``, ``protocol``, ``label``) to header names; unspecified fields
    use the column of the same name and ``feature`` defaults to
    ``feature_name``. Rows are sorted by timestamp, grouped per
    (source, destination) and cut into requests of at most ``max_len``.
    Passing ``vocab`` extends an existing vocabulary (it is copied, not
    mutated) so token ids line up with previously trained models.
    """
    path = Path(path)
    cols = {k: k for k in ("timestamp", "source", "destination", "protocol", "label")}
    cols["feature"] = feature_name
    cols.update(schema or {})
    vocab = Vocabulary() if vocab is None else vocab.copy()

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyCorpusError(f"{path}: empty file")
        header = [h.strip() for h in header]
        pos = {}
        for key, name in cols.items():
            if name not in header:
                raise SchemaError(f"{path}: column {name!r} (for {key}) not in header")
            pos[key] = header.index(name)
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CorpusFormatError(line_no, f"expected {len(header)} fields, got {len(row)}")
            try:
                ts = float(row[pos["timestamp"]])
                value = float(row[pos["feature"]])
            except ValueError as exc:
                raise CorpusFormatError(line_no, str(exc)) from None
            label = row[pos["label"]].strip()
            if label not in LABELS:
                raise CorpusFormatError(line_no, f"unknown label {label!r}")
            rows.append((ts, row[pos["source"]].strip(), row[pos["destination"]].strip(),
                         value, row[pos["protocol"]].strip(), label))
    if not rows:
        raise EmptyCorpusError(f"{path}: no data rows")

    rows.sort(key=lambda r: r[0])
    open_chunks = {}
    finished = []  # (start order, chunk)
    order = 0
    for ts, src, dst, value, proto, label in rows:
        tok = vocab.add(value, proto)
        key = (src, dst)
        chunk = open_chunks.get(key)
        if chunk is None or len(chunk["tokens"]) >= max_len:
            chunk = {"order": order, "ts": ts, "src": src, "dst": dst,
                     "tokens": [], "values": [], "attack": False}
            order += 1
            open_chunks[key] = chunk
            finished.append(chunk)
        chunk["tokens"].append(tok)
        chunk["values"].append(value)
        chunk["attack"] |= label == "attack"

    requests = []
    for ch in finished:
        interval = None if interval_seconds is None else int(ch["ts"] // interval_seconds)
        requests.append(Request(ch["tokens"], ch["values"], source_id=ch["src"],
                                label="attack" if ch["attack"] else "normal",
                                interval_index=interval, destination=ch["dst"]))
    return RequestCorpus(requests, vocab, feature_name)


def write_csv(corpus, path, interval_seconds=60.0):
    """Write one row per sub-request in the packet-level CSV schema.

    Requests are spread evenly over their interval (interval 0 when unset) so
    that re-ingesting with the same ``interval_seconds`` restores interval
    membership. Feature columns other than ``corpus.feature_name`` are 0.
    """
    if corpus.feature_name not in FEATURE_COLUMNS:
        raise SchemaError(f"feature {corpus.feature_name!r} is not a CSV feature column")
    by_interval = {}
    for r in corpus.requests:
        by_interval.setdefault(r.interval_index or 0, []).append(r)
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for t in sorted(by_interval):
            reqs = by_interval[t]
            span = interval_seconds / (len(reqs) + 1)
            for i, r in enumerate(reqs):
                base = t * interval_seconds + i * span
                for j, (tok, value) in enumerate(zip(r.tokens, r.values)):
                    ts = base + span * j / (MAX_LEN + 1)
                    _, proto = corpus.vocab.descriptor(int(tok))
                    feats = {c: 0 for c in FEATURE_COLUMNS}
                    feats[corpus.feature_name] = _bucket(value)
                    w.writerow([f"{ts:.6f}", r.source_id, r.destination,
                                *(feats[c] for c in FEATURE_COLUMNS), proto, r.label])
    return path


# -------------------------------------------------------- synthetic corpora


@dataclass(frozen=True)
class SkewSpec:
    """Skewed marginal over feature values plus a per-request protocol mix.

    Within a request, values move by a Metropolis-Hastings chain whose proposal
    picks one of the two ring neighbours of the current value (ring order =
    ``values`` order), or any other value when ``topology="complete"``. The chain is reversible with
    stationary law ``probs`` and starts from it, so every position has exactly
    that marginal while the transition graph stays sparse. ``persistence``
    makes the chain lazy: with that probability a value simply repeats.
    """

    values: tuple
    probs: tuple
    protocols: tuple = ("tcp",)
    protocol_probs: tuple = (1.0,)
    persistence: float = 0.0
    topology: str = "ring"
    min_len: int = MAX_LEN
    max_len: int = MAX_LEN

    def validate(self):
        for name, ps in (("probs", self.probs), ("protocol_probs", self.protocol_probs)):
            ps = np.asarray(ps, dtype=np.float64)
            if np.any(ps < 0) or abs(ps.sum() - 1.0) > 1e-9:
                raise ValueError(f"{name} must be nonnegative and sum to 1 (sum={ps.sum():g})")
        if len(self.values) != len(self.probs):
            raise ValueError("values and probs differ in length")
        if len(self.protocols) != len(self.protocol_probs):
            raise ValueError("protocols and protocol_probs differ in length")
        if len(set(self.values)) != len(self.values):
            raise ValueError("duplicate feature values")
        if self.topology not in ("ring", "complete"):
            raise ValueError(f"topology must be 'ring' or 'complete', got {self.topology!r}")
        if not 0.0 <= self.persistence < 1.0:
            raise ValueError("persistence must lie in [0, 1)")
        if not 1 <= self.min_len <= self.max_len <= MAX_LEN:
            raise ValueError(f"need 1 <= min_len <= max_len <= {MAX_LEN}")
        return self

    def top_mass(self, k=3):
        return float(np.sort(np.asarray(self.probs))[::-1][:k].sum())

    def transition_matrix(self):
        """Row-stochastic value-to-value matrix of the ring chain."""
        p = np.asarray(self.probs, dtype=np.float64)
        n = p.size
        P = np.zeros((n, n))
        if n == 1:
            return np.ones((1, 1))
        for i in range(n):
            if p[i] == 0:
                P[i, i] = 1.0
                continue
            if self.topology == "ring":
                nbrs = sorted({(i - 1) % n, (i + 1) % n})
            else:
                nbrs = [j for j in range(n) if j != i]
            for j in nbrs:
                P[i, j] += min(1.0, p[j] / p[i]) / len(nbrs)
            P[i, i] = 1.0 - P[i].sum()
        return self.persistence * np.eye(n) + (1.0 - self.persistence) * P


# Request Len marginals. Only the CAIDA07 top-3 split (81 / 6 / 4.2 %) is
# published per value; the HULK and LOIC splits only honour the published
# top-3 totals (79.7 % and 60.4 %).
SKEW_PRESETS = {
    "caida-skew": SkewSpec(
        values=(60, 52, 1500, 40, 66, 576, 1514, 98),
        probs=(0.81, 0.06, 0.042, 0.03, 0.02, 0.015, 0.013, 0.01),
        protocols=("tcp", "icmp"), protocol_probs=(0.8, 0.2),
        persistence=0.8, topology="complete"),
    "hulk-skew": SkewSpec(
        values=(60, 1514, 2974, 66, 54, 1460, 583, 120),
        probs=(0.52, 0.19, 0.087, 0.06, 0.05, 0.04, 0.03, 0.023),
        protocols=("tcp", "udp"), protocol_probs=(0.85, 0.15),
        persistence=0.8, topology="complete"),
    "loic-skew": SkewSpec(
        values=(60, 66, 1514, 54, 74, 1460, 583, 120),
        probs=(0.35, 0.15, 0.104, 0.1, 0.09, 0.08, 0.066, 0.06),
        protocols=("tcp", "udp"), protocol_probs=(0.7, 0.3),
        persistence=0.8, topology="complete"),
}


def synth_normal_corpus(spec, n_requests, seed, feature_name="request_len"):
    """Sample ``n_requests`` normal requests from ``spec`` (PCG64, seeded)."""
    spec.validate()
    rng = np.random.default_rng(seed)
    values = np.asarray(spec.values, dtype=np.float64)
    probs = np.asarray(spec.probs, dtype=np.float64)
    cdf = np.cumsum(spec.transition_matrix(), axis=1)
    cdf /= cdf[:, -1:]
    first = np.cumsum(probs)
    first /= first[-1]
    T = spec.max_len
    lengths = rng.integers(spec.min_len, spec.max_len + 1, size=n_requests)
    proto_idx = rng.choice(len(spec.protocols), size=n_requests, p=spec.protocol_probs)
    u = rng.random((n_requests, T))
    idx = np.empty((n_requests, T), dtype=np.int64)
    idx[:, 0] = (u[:, :1] >= first[None, :]).sum(axis=1)
    for t in range(1, T):
        idx[:, t] = (u[:, t:t + 1] >= cdf[idx[:, t - 1]]).sum(axis=1)

    vocab = Vocabulary()
    requests = []
    width = len(str(max(n_requests, 1)))
    for i in range(n_requests):
        proto = spec.protocols[proto_idx[i]]
        vals = values[idx[i, :lengths[i]]]
        toks = [vocab.add(v, proto) for v in vals]
        requests.append(Request(toks, vals, source_id=f"n{i:0{width}d}"))
    return RequestCorpus(requests, vocab, feature_name, {"seed": seed})


# ---------------------------------------------------------- class grouping


class FeatureClassGrouper(TransformerMixin, BaseEstimator):
    """Map raw feature values to ``n_classes`` condition classes.

    The ``n_classes - 1`` most frequent values get their own class (ties go to
    the smaller value); every other value falls into the last class.
    """

    def __init__(self, n_classes=3):
        self.n_classes = n_classes

    def fit(self, X, y=None):
        if isinstance(X, RequestCorpus):
            X = X.feature_values()
        values = np.asarray(X, dtype=np.float64).ravel()
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if values.size == 0:
            raise ValueError("cannot group an empty set of values")
        counts = Counter(values.tolist())
        if len(counts) < self.n_classes:
            raise ValueError(f"only {len(counts)} distinct values for {self.n_classes} classes")
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        self.top_values_ = np.array([v for v, _ in ranked[:self.n_classes - 1]])
        self.frequencies_ = np.array([c for _, c in ranked[:self.n_classes - 1]]) / values.size
        return self

    def transform(self, X):
        check_is_fitted(self, "top_values_")
        values = np.asarray(X, dtype=np.float64)
        out = np.full(values.shape, self.n_classes - 1, dtype=np.int64)
        for k, v in enumerate(self.top_values_):
            out[values == v] = k
        return out

    def class_of(self, value):
        return int(self.transform(np.array([value]))[0])

    def token_classes(self, vocab):
        """Class id of every token, read off its descriptor's feature bucket."""
        return self.transform(np.array([float(b) for b, _ in vocab], dtype=np.float64))


FeatureClassMap = FeatureClassGrouper


def group_feature_classes(corpus, K=3):
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    return FeatureClassGrouper(K).fit(corpus.feature_values())


def annotate_classes(corpus, class_map):
    """Copy of ``corpus`` with every sub-request's ``class_id`` filled in."""
    reqs = [r.replace(classes=class_map.transform(r.values)) for r in corpus.requests]
    out = corpus.with_requests(reqs)
    out.metadata["top_values"] = class_map.top_values_.tolist()
    return out


# ------------------------------------------------------- adjacency & walks


def build_adjacency(corpus):
    """Binary symmetric N x N matrix of consecutive token pairs (self-loops kept)."""
    N = len(corpus.vocab)
    if N < 2:
        raise ValueError("need a vocabulary of at least 2 tokens")
    adj = np.zeros((N, N), dtype=np.uint8)
    for r in corpus.requests:
        if len(r) > 1:
            adj[r.tokens[:-1], r.tokens[1:]] = 1
    return adj | adj.T


@dataclass
class WalkSet:
    walks: np.ndarray  # (count, T)
    p: float
    q: float

    def __len__(self):
        return self.walks.shape[0]


def sample_walks(adj, T=MAX_LEN, count=1000, p=1.0, q=1.0, seed=0, start_nodes=None):
    """Biased second-order random walks over ``adj``.

    From current node ``v`` reached from ``t`` the candidate ``x`` gets
    weight ``1/p`` if ``x == t``, ``1`` if ``x`` neighbours ``t`` and ``1/q``
    otherwise. Starts are uniform over nodes with at least one neighbour
    unless ``start_nodes`` fixes them. If every candidate weight vanishes
    (e.g. ``p=inf`` at a leaf) the step falls back to a uniform neighbour.
    """
    adj = np.asarray(adj)
    if T < 2:
        raise ValueError("T must be >= 2")
    A = (adj > 0).astype(np.float64)
    deg = A.sum(axis=1)
    live = np.flatnonzero(deg > 0)
    if live.size == 0:
        raise ValueError("graph has no edges")
    rng = np.random.default_rng(seed)
    walks = np.empty((count, T), dtype=np.int64)
    if start_nodes is None:
        walks[:, 0] = live[rng.integers(0, live.size, size=count)]
    else:
        walks[:, 0] = np.broadcast_to(np.asarray(start_nodes), (count,))
        if np.any(deg[walks[:, 0]] == 0):
            raise ValueError("start node without neighbours")
    inv_p = 0.0 if np.isinf(p) else 1.0 / p
    inv_q = 0.0 if np.isinf(q) else 1.0 / q
    rows = np.arange(count)
    for step in range(1, T):
        cur = walks[:, step - 1]
        w = A[cur].copy()
        if step > 1:
            prev = walks[:, step - 2]
            near = A[prev]
            bias = near + (1.0 - near) * inv_q
            bias[rows, prev] = inv_p
            w *= bias
        dead = w.sum(axis=1) <= 0
        if np.any(dead):
            w[dead] = A[cur[dead]]
        cum = np.cumsum(w, axis=1)
        u = rng.random(count) * cum[:, -1]
        walks[:, step] = (u[:, None] >= cum).sum(axis=1)
    return WalkSet(walks, p, q)
