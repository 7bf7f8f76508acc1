"""Input checks and array plumbing shared by the estimators."""

import numbers

import numpy as np

from .traffic import RequestCorpus

PAD = -1


def check_sequences(X, max_len=None):
    """Normalise ``X`` to ``(padded, lengths)``.

    Accepts a :class:`RequestCorpus`, a list of 1-D integer sequences, or a
    2-D integer array padded with ``-1``. Empty sequences are rejected.
    """
    if isinstance(X, RequestCorpus):
        X = X.token_sequences()
    if isinstance(X, np.ndarray) and X.ndim == 2:
        padded = X.astype(np.int64, copy=False)
        valid = padded != PAD
        lengths = valid.sum(axis=1)
        # padding must be a suffix
        if np.any(valid[:, 1:] & ~valid[:, :-1]):
            raise ValueError("padding (-1) must only appear at the end of a sequence")
    else:
        seqs = [np.asarray(s, dtype=np.int64).ravel() for s in X]
        lengths = np.array([s.size for s in seqs], dtype=np.int64)
        T = int(lengths.max()) if len(seqs) else 0
        padded = np.full((len(seqs), T), PAD, dtype=np.int64)
        for i, s in enumerate(seqs):
            padded[i, :s.size] = s
    if padded.shape[0] == 0:
        raise ValueError("no sequences given")
    if np.any(lengths < 1):
        raise ValueError("empty sequence")
    if max_len is not None and padded.shape[1] > max_len:
        raise ValueError(f"sequence longer than {max_len}")
    if np.any(padded[padded != PAD] < 0):
        raise ValueError("negative symbol id")
    return padded, lengths


def one_hot(ids, n):
    """One-hot encode an int array; ``-1`` entries become zero vectors."""
    ids = np.asarray(ids)
    out = np.zeros(ids.shape + (n,))
    valid = ids >= 0
    out[valid, ids[valid]] = 1.0
    return out


def lm_batch(padded, lengths, n_symbols):
    """Teacher-forcing inputs for next-symbol prediction.

    Step ``t`` sees the one-hot of symbol ``t - 1`` (zeros at ``t = 0``) and
    is trained to emit symbol ``t``.
    """
    B, T = padded.shape
    prev = np.full((B, T), PAD, dtype=np.int64)
    prev[:, 1:] = padded[:, :-1]
    inputs = one_hot(prev, n_symbols)
    mask = (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)
    targets = np.where(mask > 0, padded, 0)
    return inputs, targets, mask


def check_random_state(seed):
    """``np.random.Generator`` from None / int / Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None or isinstance(seed, (numbers.Integral, np.integer)):
        return np.random.default_rng(seed)
    raise ValueError(f"{seed!r} cannot seed a numpy Generator")


def check_fraction(name, value, low=0.0, high=1.0, closed=True):
    ok = (low <= value <= high) if closed else (low < value < high)
    if not ok:
        bounds = f"[{low}, {high}]" if closed else f"({low}, {high})"
        raise ValueError(f"{name} must lie in {bounds}, got {value}")
    return float(value)
