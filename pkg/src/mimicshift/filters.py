"""Defender side: normal-traffic model and online attack filters."""

import csv
import math
import warnings
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import seqnet
from ._validation import PAD, check_fraction, check_random_state, check_sequences, one_hot
from .lm import DivergenceError, SequenceLM
from .seqnet import AdamState, SeqModelParams
from .traffic import RequestCorpus


class OutOfVocabularyWarning(UserWarning):
    pass


# --------------------------------------------------------- normal model


class NormalModel(SequenceLM):
    """Next-token model of normal traffic with one reserved UNK token.

    The alphabet is ``n_tokens + 1``; id ``n_tokens`` is UNK. Tokens outside
    ``[0, n_tokens)`` are mapped to UNK at scoring time and counted in
    ``n_unknown_``.
    """

    def __init__(self, n_tokens=None, n_hidden=32, learning_rate=0.01, batch_size=128,
                 n_epochs=5, clip_norm=5.0, holdout_fraction=0.1, random_state=0):
        self.n_tokens = n_tokens
        self.holdout_fraction = holdout_fraction
        super().__init__(n_symbols=None, n_hidden=n_hidden, learning_rate=learning_rate,
                         batch_size=batch_size, n_epochs=n_epochs, clip_norm=clip_norm,
                         random_state=random_state)

    def _vocab_size(self, X, padded):
        if self.n_tokens is not None:
            return int(self.n_tokens)
        if isinstance(X, RequestCorpus):
            return len(X.vocab)
        return int(padded.max()) + 1

    def fit(self, X, y=None):
        padded, lengths = check_sequences(X)
        self.n_tokens_ = self._vocab_size(X, padded)
        self.unk_ = self.n_tokens_
        self.n_symbols = self.n_tokens_ + 1
        n_hold = int(round(self.holdout_fraction * len(padded)))
        if n_hold >= len(padded):
            raise ValueError("holdout leaves no training data")
        cut = len(padded) - n_hold
        train = self._map_unknown(padded[:cut], count=False)
        self._init(train)
        self._train(train, lengths[:cut], self.n_epochs)
        self.n_unknown_ = 0
        self.train_nll_ = self._pooled_nll(train, lengths[:cut])
        self.heldout_nll_ = (self._pooled_nll(self._map_unknown(padded[cut:], count=False),
                                              lengths[cut:]) if n_hold else self.train_nll_)
        return self

    def _map_unknown(self, padded, count=True):
        bad = (padded != PAD) & ((padded < 0) | (padded >= self.n_tokens_))
        n_bad = int(bad.sum())
        if n_bad and count:
            self.n_unknown_ += n_bad
            warnings.warn(f"{n_bad} out-of-vocabulary tokens mapped to UNK",
                          OutOfVocabularyWarning)
        return np.where(bad, self.unk_, padded)

    def _pooled_nll(self, padded, lengths):
        logp, mask = self._log_probs(padded, lengths)
        return float(-logp.sum() / mask.sum())

    def _prepare(self, X):
        check_is_fitted(self, "params_")
        padded, lengths = _sequences_allow_unknown(X)
        return self._map_unknown(padded), lengths

    def score_samples(self, X):
        """Per-request mean log-likelihood; higher means more normal."""
        padded, lengths = self._prepare(X)
        logp, mask = self._log_probs(padded, lengths)
        return logp.sum(axis=1) / mask.sum(axis=1)

    def loss(self, X):
        padded, lengths = self._prepare(X)
        return self._pooled_nll(padded, lengths)


def _sequences_allow_unknown(X):
    # like check_sequences but negative ids other than padding become UNK later
    if isinstance(X, RequestCorpus):
        X = X.token_sequences()
    seqs = [np.asarray(s, dtype=np.int64).ravel() for s in X] if not (
        isinstance(X, np.ndarray) and X.ndim == 2) else None
    if seqs is None:
        return check_sequences(X)
    lengths = np.array([s.size for s in seqs], dtype=np.int64)
    if not len(seqs) or np.any(lengths < 1):
        raise ValueError("empty sequence or no sequences")
    padded = np.full((len(seqs), lengths.max()), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        padded[i, :s.size] = np.where(s < 0, np.iinfo(np.int64).max, s)
    return padded, lengths


def train_normal_model(corpus, random_state=0, **params):
    return NormalModel(random_state=random_state, **params).fit(corpus)


def score_normal(model, requests):
    return model.score_samples(requests)


# --------------------------------------------------------------- helpers


def minmax_normalize(raw):
    """Scale to [0, 1]; a constant vector maps to 0.5."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        return raw.copy()
    lo, hi = raw.min(), raw.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi), abs(lo)):
        return np.full(raw.shape, 0.5)
    return (raw - lo) / (hi - lo)


class FilterDecision(NamedTuple):
    request_index: int
    score: float
    verdict: str
    interval: int


def reject_mask(scores, rejection_rate):
    """Boolean mask of the ``floor(rate * n)`` lowest scores.

    Ties are broken by arrival order: the earlier request is rejected first.
    """
    check_fraction("rejection_rate", rejection_rate)
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    # the epsilon keeps e.g. 0.8 * 10 from flooring to 7
    k = min(n, int(math.floor(rejection_rate * n + 1e-9)))
    order = np.lexsort((np.arange(n), scores))
    mask = np.zeros(n, dtype=bool)
    mask[order[:k]] = True
    return mask


def decide(scores, rejection_rate, interval=0):
    mask = reject_mask(scores, rejection_rate)
    return [FilterDecision(i, float(s), "reject" if m else "accept", interval)
            for i, (s, m) in enumerate(zip(np.asarray(scores, dtype=np.float64), mask))]


# -------------------------------------------------------------- schedules


class IntervalSchedule(NamedTuple):
    mode: str
    lengths: tuple
    seed: int

    def boundaries(self, n_minutes):
        """``(start, stop)`` minute ranges covering ``n_minutes``; the last may be cut short."""
        if self.mode == "offline":
            return [(0, n_minutes)]
        out, start = [], 0
        for length in self.lengths:
            if start >= n_minutes:
                break
            out.append((start, min(start + length, n_minutes)))
            start += length
        if start < n_minutes:
            raise ValueError(f"schedule covers {start} of {n_minutes} minutes")
        return out


def make_interval_schedule(mode, n, seed=0, length=1, first_length=5, choices=(1, 2, 3)):
    """Interval lengths in minutes for ``n`` intervals.

    ``fixed`` repeats ``length``; ``offline`` is a single unbounded interval;
    ``randomized`` starts with ``first_length`` and then draws uniformly from
    ``choices``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if mode == "fixed":
        if length < 1:
            raise ValueError("length must be >= 1")
        return IntervalSchedule(mode, (int(length),) * n, seed)
    if mode == "offline":
        return IntervalSchedule(mode, (math.inf,), seed)
    if mode == "randomized":
        rng = np.random.default_rng([int(seed), 0x1E7])
        rest = rng.choice(np.asarray(choices), size=n - 1)
        return IntervalSchedule(mode, (int(first_length),) + tuple(int(x) for x in rest), seed)
    raise ValueError(f"unknown schedule mode {mode!r}")


# ---------------------------------------------------------------- filters


class _OnlineFilter(BaseEstimator):
    """Shared plumbing: a trained :class:`NormalModel` and per-interval updates."""

    def _check_normal(self):
        if self.normal_model is None:
            raise ValueError("a fitted NormalModel is required")
        check_is_fitted(self.normal_model, "params_")
        return self.normal_model

    def fit(self, X=None, y=None):
        self.normal_ = self._check_normal()
        self.n_intervals_ = 0
        self.log_ = []
        self._reset()
        return self

    def _reset(self):
        pass

    def partial_fit(self, X, y=None):
        """Consume one interval of traffic."""
        check_is_fitted(self, "normal_")
        if isinstance(X, RequestCorpus):
            X = X.token_sequences()
        if len(X) == 0:
            self.log_.append(f"interval {self.n_intervals_}: empty, skipped")
            return self
        padded, lengths = _sequences_allow_unknown(X)
        padded = self.normal_._map_unknown(padded, count=False)
        self._update(padded, lengths)
        self.n_intervals_ += 1
        return self

    def score_samples(self, X):
        """Raw filter score (higher = more normal) from the current state."""
        check_is_fitted(self, "normal_")
        if isinstance(X, RequestCorpus):
            X = X.token_sequences()
        if len(X) == 0:
            return np.empty(0)
        padded, lengths = _sequences_allow_unknown(X)
        return self._score(self.normal_._map_unknown(padded), lengths)

    def transform(self, X):
        """Scores min-max normalized over ``X``."""
        return minmax_normalize(self.score_samples(X))

    def predict(self, X, rejection_rate=0.8):
        """1 for rejected requests, 0 for accepted."""
        return reject_mask(self.score_samples(X), rejection_rate).astype(np.int64)


class NOnlyFilter(_OnlineFilter):
    """Scores by the normal model alone; never trains on interval traffic."""

    def __init__(self, normal_model=None):
        self.normal_model = normal_model

    def _update(self, padded, lengths):
        pass

    def _score(self, padded, lengths):
        return self.normal_.score_samples(padded)


class NOverDFilter(_OnlineFilter):
    """Ratio of the normal model to an online attack-density model D.

    D starts as a copy of the normal model and gets ``epochs_per_interval``
    passes over each interval. Scores are ``log N - log D`` per token.
    """

    def __init__(self, normal_model=None, learning_rate=0.01, batch_size=128,
                 epochs_per_interval=1, random_state=0):
        self.normal_model = normal_model
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs_per_interval = epochs_per_interval
        self.random_state = random_state

    def _reset(self):
        N = self.normal_
        self.attack_model_ = SequenceLM(
            n_symbols=N.n_symbols_, n_hidden=N.n_hidden, learning_rate=self.learning_rate,
            batch_size=self.batch_size, clip_norm=N.clip_norm,
            random_state=self.random_state).warm_start_from(N)

    def _update(self, padded, lengths):
        nd_interval_update(self, padded, lengths)

    def _score(self, padded, lengths):
        return self.normal_.score_samples(padded) - self.attack_model_.score_samples(padded)


def nd_interval_update(filt, padded, lengths):
    """Train the attack density model of ``filt`` on one interval only."""
    filt.attack_model_._train(padded, lengths, filt.epochs_per_interval)
    return filt


class IterativeClassifierFilter(_OnlineFilter):
    """Online two-class LSTM classifier trained on pseudo-labelled intervals.

    Each interval the ``alpha`` fraction ranked least normal is labelled
    attack and the rest normal. Ranking uses the normal model on the first
    interval and the classifier from the previous interval afterwards. A
    replayed normal sample of ``replay_ratio * len(interval)`` requests is
    added with the normal label.
    """

    def __init__(self, normal_model=None, normal_corpus=None, alpha=0.8, n_hidden=32,
                 learning_rate=0.01, batch_size=128, epochs_per_interval=1,
                 replay_ratio=1.0, clip_norm=5.0, random_state=0):
        self.normal_model = normal_model
        self.normal_corpus = normal_corpus
        self.alpha = alpha
        self.n_hidden = n_hidden
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs_per_interval = epochs_per_interval
        self.replay_ratio = replay_ratio
        self.clip_norm = clip_norm
        self.random_state = random_state

    def _reset(self):
        check_fraction("alpha", self.alpha, 0.0, 1.0, closed=False)
        if self.normal_corpus is None:
            raise ValueError("IterativeClassifierFilter needs normal_corpus for replay")
        self.replay_, self.replay_lengths_ = self.normal_._map_unknown(
            check_sequences(self.normal_corpus)[0], count=False), None
        self.replay_lengths_ = (self.replay_ != PAD).sum(axis=1)
        seed = 0 if self.random_state is None else int(self.random_state)
        self.classifier_ = SeqModelParams.initialize(self.normal_.n_symbols_, self.n_hidden, 1,
                                                     seed=seed)
        self.optimizer_ = AdamState.for_params(self.classifier_, self.learning_rate)
        self.rng_ = check_random_state(seed + 1)
        self.trained_ = False

    def _update(self, padded, lengths):
        iterative_interval_update(self, padded, lengths)

    def attack_proba(self, padded, lengths):
        n_sym = self.normal_.n_symbols_
        out = np.empty(len(padded))
        for s in range(0, len(padded), 2048):
            p, L = padded[s:s + 2048], lengths[s:s + 2048]
            cache = seqnet.lstm_forward(self.classifier_, one_hot(p, n_sym))
            out[s:s + 2048] = seqnet.sigmoid(cache.logits[np.arange(len(p)), L - 1, 0])
        return out

    def _score(self, padded, lengths):
        return 1.0 - self.attack_proba(padded, lengths)


def _pad_to(padded, T):
    if padded.shape[1] >= T:
        return padded
    out = np.full((padded.shape[0], T), PAD, dtype=np.int64)
    out[:, :padded.shape[1]] = padded
    return out


def iterative_interval_update(filt, padded, lengths):
    """Pseudo-label one interval and train the classifier for one pass."""
    n = len(padded)
    if filt.trained_:
        rank = filt._score(padded, lengths)
    else:
        rank = filt.normal_.score_samples(padded)
    labels = reject_mask(rank, filt.alpha).astype(np.float64)

    n_rep = int(round(filt.replay_ratio * n))
    if n_rep:
        idx = filt.rng_.choice(len(filt.replay_), size=n_rep, replace=n_rep > len(filt.replay_))
        T = max(padded.shape[1], filt.replay_.shape[1])
        X = np.concatenate([_pad_to(padded, T), _pad_to(filt.replay_[idx], T)])
        L = np.concatenate([lengths, filt.replay_lengths_[idx]])
        y = np.concatenate([labels, np.zeros(n_rep)])
    else:
        X, L, y = padded, lengths, labels

    n_sym = filt.normal_.n_symbols_
    for _ in range(filt.epochs_per_interval):
        order = filt.rng_.permutation(len(X))
        for s in range(0, len(X), filt.batch_size):
            b = order[s:s + filt.batch_size]
            Tb = int(L[b].max())
            loss, grads = seqnet.binary_cross_entropy_loss(
                filt.classifier_, one_hot(X[b, :Tb], n_sym), L[b], y[b])
            if not np.isfinite(loss):
                raise DivergenceError("classifier loss non-finite")
            grads = seqnet.clip_gradients(grads, filt.clip_norm)
            filt.classifier_, filt.optimizer_ = seqnet.adam_update(
                filt.classifier_, grads, filt.optimizer_)
    filt.trained_ = True
    return filt


# ------------------------------------------------------------ online loop


class OnlineRun(NamedTuple):
    scores: list          # normalized scores per minute
    raw_scores: list
    boundaries: list      # (start, stop) minutes per interval
    interval_of: list     # interval index of every minute


def run_online(filt, minutes, schedule, causal=False):
    """Feed per-minute corpora through ``filt`` interval by interval.

    Each minute is scored by the state after its interval's update, or by
    the state before it when ``causal`` is set.
    """
    bounds = schedule.boundaries(len(minutes))
    raw = [None] * len(minutes)
    interval_of = [None] * len(minutes)
    for t, (a, b) in enumerate(bounds):
        seqs = [s for m in minutes[a:b] for s in _as_token_lists(m)]
        if causal:
            for i in range(a, b):
                raw[i] = filt.score_samples(_as_token_lists(minutes[i]))
        filt.partial_fit(seqs)
        for i in range(a, b):
            interval_of[i] = t
            if not causal:
                raw[i] = filt.score_samples(_as_token_lists(minutes[i]))
    return OnlineRun([minmax_normalize(r) for r in raw], raw, bounds, interval_of)


def _as_token_lists(m):
    if isinstance(m, RequestCorpus):
        return m.token_sequences()
    return list(m)


DECISION_COLUMNS = ("interval", "request_index", "score", "verdict", "label")


def write_decision_log(path, decisions, labels=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DECISION_COLUMNS)
        for i, d in enumerate(decisions):
            lab = "" if labels is None else labels[i]
            w.writerow([d.interval, d.request_index, repr(d.score), d.verdict, lab])


def read_decision_log(path):
    rows = []
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        missing = set(DECISION_COLUMNS) - set(r.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in r:
            rows.append(row)
    return rows
