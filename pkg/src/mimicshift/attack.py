"""Attack side: mimic model, conditional sequence GAN and shift scheduling."""

import warnings
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import seqnet
from ._validation import check_random_state, check_sequences, lm_batch, one_hot
from .lm import DivergenceError, SequenceLM
from .markov import ShiftProfile, sample_class_sequences, validate_params
from .seqnet import AdamState, SeqModelParams
from .traffic import (MAX_LEN, FeatureClassGrouper, Request, RequestCorpus,
                      build_adjacency, sample_walks)


class ModeCollapseWarning(UserWarning):
    pass


# --------------------------------------------------------------- mimic C


class MimicModel(SequenceLM):
    """Next-class predictor over condition classes.

    Trained with teacher forcing on class sequences. ``generate`` replays an
    injected class sequence and samples each output class from the model's
    prediction given the injected prefix.
    """

    def __init__(self, n_symbols=3, n_hidden=10, learning_rate=0.01, batch_size=128,
                 n_epochs=5, clip_norm=5.0, random_state=0):
        super().__init__(n_symbols=n_symbols, n_hidden=n_hidden,
                         learning_rate=learning_rate, batch_size=batch_size,
                         n_epochs=n_epochs, clip_norm=clip_norm, random_state=random_state)

    def generate(self, seed_sequences, random_state=None):
        check_is_fitted(self, "params_")
        padded, lengths = check_sequences(seed_sequences)
        self._check_symbols(padded)
        rng = check_random_state(random_state)
        inputs, _, mask = lm_batch(padded, lengths, self.n_symbols_)
        logits = seqnet.lstm_forward(self.params_, inputs).logits
        out = np.argmax(logits + rng.gumbel(size=logits.shape), axis=2)
        return np.where(mask > 0, out, -1)


class MimicFit(NamedTuple):
    model: MimicModel
    heldout_loss: float
    transition_entropy: float


def _transition_entropy(padded, lengths, K):
    # conditional entropy of the empirical first-order law, with a
    # separate "start" row for position 0
    counts = np.zeros((K + 1, K))
    for row, n in zip(padded, lengths):
        prev = K
        for s in row[:n]:
            counts[prev, s] += 1
            prev = s
    tot = counts.sum()
    h = 0.0
    for r in counts:
        n = r.sum()
        if n:
            p = r[r > 0] / n
            h -= (n / tot) * float((p * np.log(p)).sum())
    return h


def train_mimic(class_sequences, n_classes=3, n_epochs=5, holdout_fraction=0.1,
                random_state=0, **params):
    """Fit C on the leading part of ``class_sequences`` and score the tail."""
    padded, lengths = check_sequences(class_sequences)
    n_hold = int(round(holdout_fraction * len(padded)))
    if n_hold >= len(padded):
        raise ValueError("holdout leaves no training data")
    cut = len(padded) - n_hold
    model = MimicModel(n_symbols=n_classes, n_epochs=n_epochs,
                       random_state=random_state, **params)
    model.fit(padded[:cut])
    held = padded[cut:] if n_hold else padded
    loss = model.loss(held)
    return MimicFit(model, loss, _transition_entropy(*check_sequences(held), n_classes))


def mimic_generate(model, seed_sequences, random_state=None):
    return model.generate(seed_sequences, random_state)


# ------------------------------------------------------------------ GAN


class MimicShift(BaseEstimator):
    """Conditional LSTM GAN whose output traffic follows injected class sequences.

    Each training iteration makes one mimic update, one generator update
    and ``omega`` discriminator updates. The generator receives the mimic's
    class sequence as its per-step condition.

    Parameters
    ----------
    real_condition : {"mimic", "true"}
        Condition paired with real requests when training D. ``"mimic"`` uses
        the mimic output regenerated from the request's own classes,
        ``"true"`` uses the request's classes directly.
    real_source : {"corpus", "walks"}
        Real sequences are either full-length corpus requests or random walks
        over the corpus adjacency graph.
    relaxation : {"straight_through", "soft"}
        How the generator feeds its sampled token back during G updates.
    mimic_pretrain_epochs : int
        Epochs of mimic training before the adversarial loop starts.
    generator_pretrain_epochs : int
        Epochs of teacher-forced maximum-likelihood training of G (step size
        ``lr_pretrain``) before the adversarial loop, using the same real
        conditions D sees.
    """

    def __init__(self, n_classes=3, mimic_hidden=10, generator_hidden=40,
                 discriminator_hidden=35, noise_dim=None, batch_size=128, seq_len=MAX_LEN,
                 lr_mimic=0.01, lr_gan=2e-4, omega=3, n_iterations=300,
                 mimic_pretrain_epochs=2, generator_pretrain_epochs=5, lr_pretrain=0.01,
                 tau=1.0, relaxation="straight_through",
                 real_condition="true", real_source="corpus", walk_p=1.0, walk_q=1.0,
                 n_walks=10000, holdout_fraction=0.1, check_every=10, clip_norm=5.0,
                 random_state=0):
        self.n_classes = n_classes
        self.mimic_hidden = mimic_hidden
        self.generator_hidden = generator_hidden
        self.discriminator_hidden = discriminator_hidden
        self.noise_dim = noise_dim
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.lr_mimic = lr_mimic
        self.lr_gan = lr_gan
        self.omega = omega
        self.n_iterations = n_iterations
        self.mimic_pretrain_epochs = mimic_pretrain_epochs
        self.generator_pretrain_epochs = generator_pretrain_epochs
        self.lr_pretrain = lr_pretrain
        self.tau = tau
        self.relaxation = relaxation
        self.real_condition = real_condition
        self.real_source = real_source
        self.walk_p = walk_p
        self.walk_q = walk_q
        self.n_walks = n_walks
        self.holdout_fraction = holdout_fraction
        self.check_every = check_every
        self.clip_norm = clip_norm
        self.random_state = random_state

    def _check_params(self):
        if self.omega < 1:
            raise ValueError("omega must be >= 1")
        if self.real_condition not in ("mimic", "true"):
            raise ValueError(f"real_condition must be 'mimic' or 'true', got {self.real_condition!r}")
        if self.real_source not in ("corpus", "walks"):
            raise ValueError(f"real_source must be 'corpus' or 'walks', got {self.real_source!r}")
        if self.relaxation not in ("straight_through", "soft"):
            raise ValueError(f"unknown relaxation {self.relaxation!r}")
        if not 1 <= self.seq_len <= MAX_LEN:
            raise ValueError(f"seq_len must lie in [1, {MAX_LEN}]")
        if self.batch_size < 1 or self.n_iterations < 0:
            raise ValueError("batch_size must be positive and n_iterations nonnegative")

    def _real_sequences(self, corpus):
        T = self.seq_len
        if self.real_source == "walks":
            adj = build_adjacency(corpus)
            walks = sample_walks(adj, T=T, count=self.n_walks, p=self.walk_p,
                                 q=self.walk_q, seed=self._seed + 11)
            return walks.walks
        seqs = [r.tokens[:T] for r in corpus if len(r) >= T]
        if not seqs:
            raise ValueError(f"corpus has no request with at least {T} sub-requests")
        return np.asarray(seqs, dtype=np.int64)

    def fit(self, corpus, y=None, class_map=None):
        """Train C, G and D on a normal :class:`RequestCorpus`."""
        self._check_params()
        if not isinstance(corpus, RequestCorpus) or len(corpus) == 0:
            raise ValueError("fit expects a nonempty RequestCorpus")
        self._seed = 0 if self.random_state is None else int(self.random_state)
        rng = check_random_state(self._seed)
        if class_map is None:
            class_map = FeatureClassGrouper(self.n_classes).fit(corpus)
        self.class_map_ = class_map
        self.vocab_ = corpus.vocab.copy()
        self.token_classes_ = np.asarray(class_map.token_classes(self.vocab_), dtype=np.int64)
        N, K = len(self.vocab_), self.n_classes
        self.n_tokens_ = N

        real = self._real_sequences(corpus)
        n_hold = max(1, int(round(self.holdout_fraction * len(real))))
        if n_hold >= len(real):
            raise ValueError("too few real sequences for the holdout split")
        self.train_real_, self.heldout_real_ = real[:-n_hold], real[-n_hold:]

        self.mimic_ = MimicModel(n_symbols=K, n_hidden=self.mimic_hidden,
                                 learning_rate=self.lr_mimic, batch_size=self.batch_size,
                                 n_epochs=self.mimic_pretrain_epochs,
                                 clip_norm=self.clip_norm, random_state=self._seed + 1)
        train_classes = self.token_classes_[self.train_real_]
        if self.mimic_pretrain_epochs > 0:
            self.mimic_.fit(train_classes)
        else:
            self.mimic_.partial_fit(train_classes[:1], n_epochs=0)

        d = self.noise_dim or self.generator_hidden
        self.generator_ = SeqModelParams.initialize(N + K, self.generator_hidden, N,
                                                    n_noise=d, seed=self._seed + 2)
        self.discriminator_ = SeqModelParams.initialize(N + K, self.discriminator_hidden, 1,
                                                        seed=self._seed + 3)
        self._g_opt = AdamState.for_params(self.generator_, self.lr_gan)
        self._d_opt = AdamState.for_params(self.discriminator_, self.lr_gan)
        self._rng = rng
        self.pretrain_loss_ = []
        if self.generator_pretrain_epochs > 0:
            self._pretrain_generator()
        self.update_counts_ = []
        self.history_ = {"generator": [], "discriminator": [], "mimic": [], "d_accuracy": []}
        self.warnings_ = []
        self._pinned = 0
        for it in range(self.n_iterations):
            self._iteration(it)
        self.d_accuracy_ = self.discriminator_accuracy()
        return self

    # -- training internals

    def _pretrain_generator(self):
        rng = self._rng
        opt = AdamState.for_params(self.generator_, self.lr_pretrain)
        data = self.train_real_
        B, T = data.shape
        prev = np.full((B, T), -1, dtype=np.int64)
        prev[:, 1:] = data[:, :-1]
        for _ in range(self.generator_pretrain_epochs):
            order = rng.permutation(B)
            for start in range(0, B, self.batch_size):
                idx = order[start:start + self.batch_size]
                x = data[idx]
                s, s_tilde = self._conditions_for(x, rng)
                cond = s_tilde if self.real_condition == "mimic" else s
                inputs = np.concatenate([one_hot(prev[idx], self.n_tokens_),
                                         one_hot(cond, self.n_classes)], axis=2)
                z = rng.standard_normal((len(idx), self.generator_.n_noise))
                loss, grads = seqnet.cross_entropy_loss(self.generator_, inputs, x, z=z)
                if not np.isfinite(loss):
                    raise DivergenceError("generator pretraining diverged")
                grads = seqnet.clip_gradients(grads, self.clip_norm)
                self.generator_, opt = seqnet.adam_update(self.generator_, grads, opt)
                self.pretrain_loss_.append(loss)

    def _sample_real(self, rng):
        n = len(self.train_real_)
        idx = rng.choice(n, size=min(self.batch_size, n), replace=False)
        return self.train_real_[idx]

    def _conditions_for(self, tokens, rng):
        s = self.token_classes_[tokens]
        s_tilde = self.mimic_.generate(s, rng)
        return s, s_tilde

    def _real_inputs(self, tokens, s, s_tilde):
        cond = s_tilde if self.real_condition == "mimic" else s
        return np.concatenate([one_hot(tokens, self.n_tokens_),
                               one_hot(cond, self.n_classes)], axis=2)

    def _noise(self, B, T, rng):
        z = rng.standard_normal((B, self.generator_.n_noise))
        g = rng.gumbel(size=(B, T, self.n_tokens_))
        return z, g

    def _iteration(self, it):
        rng = self._rng
        T = self.train_real_.shape[1]
        counts = [0, 0, 0]

        x = self._sample_real(rng)
        s = self.token_classes_[x]
        loss_c = self.mimic_.step(s, np.full(len(s), T))
        counts[0] += 1
        s_tilde = self.mimic_.generate(s, rng)
        cond = one_hot(s_tilde, self.n_classes)

        z, g = self._noise(len(x), T, rng)
        loss_g, grads = seqnet.generator_objective(self.generator_, self.discriminator_,
                                                   cond, z, g, self.tau, self.relaxation)
        if not np.isfinite(loss_g):
            raise DivergenceError(f"generator loss non-finite at iteration {it}")
        grads = seqnet.clip_gradients(grads, self.clip_norm)
        self.generator_, self._g_opt = seqnet.adam_update(self.generator_, grads, self._g_opt)
        counts[1] += 1

        for _ in range(self.omega):
            x = self._sample_real(rng)
            s, s_tilde = self._conditions_for(x, rng)
            cond = one_hot(s_tilde, self.n_classes)
            z, g = self._noise(len(x), T, rng)
            fake = seqnet.generator_rollout(self.generator_, cond, z, g, self.tau).samples
            real_in = self._real_inputs(x, s, s_tilde)
            fake_in = np.concatenate([fake, cond], axis=2)
            val_d, grads = seqnet.discriminator_objective(self.discriminator_, real_in, fake_in)
            if not np.isfinite(val_d):
                raise DivergenceError(f"discriminator loss non-finite at iteration {it}")
            grads = seqnet.clip_gradients(grads, self.clip_norm)
            self.discriminator_, self._d_opt = seqnet.adam_update(
                self.discriminator_, grads, self._d_opt, maximize=True)
            counts[2] += 1

        self.update_counts_.append(tuple(counts))
        self.history_["mimic"].append(loss_c)
        self.history_["generator"].append(loss_g)
        self.history_["discriminator"].append(val_d)
        if self.check_every and (it + 1) % self.check_every == 0:
            acc = self.discriminator_accuracy()
            self.history_["d_accuracy"].append(acc)
            self._pinned = self._pinned + 1 if acc >= 1.0 else 0
            if self._pinned == 50:
                msg = f"discriminator accuracy pinned at 1.0 for 50 checks (iteration {it})"
                self.warnings_.append(msg)
                warnings.warn(msg, ModeCollapseWarning)

    def discriminator_accuracy(self, n=None, random_state=None):
        """D accuracy on a balanced batch of held-out real and fresh generated sequences."""
        check_is_fitted(self, "generator_")
        rng = check_random_state(self._seed + 7 if random_state is None else random_state)
        real = self.heldout_real_
        if n is not None and n < len(real):
            real = real[rng.choice(len(real), n, replace=False)]
        s, s_tilde = self._conditions_for(real, rng)
        cond = one_hot(s_tilde, self.n_classes)
        z, g = self._noise(len(real), real.shape[1], rng)
        fake = seqnet.generator_rollout(self.generator_, cond, z, g, self.tau).samples
        p_real = seqnet.sigmoid(seqnet.lstm_forward(
            self.discriminator_, self._real_inputs(real, s, s_tilde)).logits[:, -1, 0])
        p_fake = seqnet.sigmoid(seqnet.lstm_forward(
            self.discriminator_, np.concatenate([fake, cond], axis=2)).logits[:, -1, 0])
        return float(((p_real > 0.5).sum() + (p_fake <= 0.5).sum()) / (2 * len(real)))

    # -- generation

    def sample_conditions(self, params, count, random_state=None):
        """Markov class sequences for ``params`` passed through the mimic."""
        check_is_fitted(self, "mimic_")
        validate_params(params)
        rng = check_random_state(random_state)
        seq = sample_class_sequences(params, count, self.seq_len, rng)
        return seq, self.mimic_.generate(seq, rng)

    def generate(self, conditions, random_state=None, interval_index=None):
        """Generate one request per row of ``conditions`` (class ids)."""
        check_is_fitted(self, "generator_")
        return generate_requests(self, conditions, random_state, interval_index)

    def generate_interval(self, params, count, random_state=None, interval_index=None):
        """Requests whose conditions follow the Markov chain ``params``."""
        rng = check_random_state(random_state)
        injected, s_tilde = self.sample_conditions(params, count, rng)
        corpus = generate_requests(self, s_tilde, rng, interval_index)
        corpus.metadata["injected_classes"] = injected
        return corpus


def generate_requests(model, conditions, random_state=None, interval_index=None):
    """Sample attack requests from the trained generator of ``model``."""
    rng = check_random_state(random_state)
    vocab = model.vocab_.copy()
    meta = {"conditions": np.zeros((0, model.seq_len), dtype=np.int64)}
    conditions = np.asarray(conditions, dtype=np.int64)
    if conditions.size == 0:
        return RequestCorpus([], vocab, metadata=meta)
    if conditions.ndim != 2 or conditions.min() < 0 or conditions.max() >= model.n_classes:
        raise ValueError("conditions must be a 2-D array of class ids")
    B, T = conditions.shape
    z, g = model._noise(B, T, rng)
    roll = seqnet.generator_rollout(model.generator_, one_hot(conditions, model.n_classes),
                                    z, g, model.tau)
    requests = []
    for i, toks in enumerate(roll.tokens):
        values = [vocab.descriptor(t)[0] for t in toks]
        requests.append(Request(toks.tolist(), values, classes=model.token_classes_[toks],
                                source_id=f"a{i}", label="attack",
                                interval_index=interval_index))
    meta["conditions"] = conditions
    return RequestCorpus(requests, vocab, metadata=meta)


# -------------------------------------------------------- score matrix


class ScoreMatrix(NamedTuple):
    counts: np.ndarray      # directed bigram counts
    symmetric: np.ndarray   # elementwise max of counts and its transpose


def build_score_matrix(requests, n_tokens=None):
    """Bigram counts over generated requests, symmetrized with the max rule."""
    if isinstance(requests, RequestCorpus):
        n_tokens = n_tokens or len(requests.vocab)
        seqs = requests.token_sequences()
    else:
        seqs = [np.asarray(s, dtype=np.int64) for s in requests]
    if not len(seqs):
        raise ValueError("no requests")
    if n_tokens is None:
        n_tokens = int(max(s.max() for s in seqs)) + 1
    S = np.zeros((n_tokens, n_tokens), dtype=np.int64)
    for s in seqs:
        s = np.asarray(s)
        if s.size > 1:
            np.add.at(S, (s[:-1], s[1:]), 1)
    return ScoreMatrix(S, np.maximum(S, S.T))


def binarize(S, threshold=None, top_k=None):
    """Adjacency from a symmetric score matrix by thresholding or top-k selection.

    Top-k ranks the upper triangle (diagonal included) by score, breaking ties
    by (row, col), and mirrors the picks.
    """
    if isinstance(S, ScoreMatrix):
        S = S.symmetric
    S = np.asarray(S)
    if (threshold is None) == (top_k is None):
        raise ValueError("give exactly one of threshold or top_k")
    if not np.array_equal(S, S.T):
        raise ValueError("score matrix must be symmetric")
    if threshold is not None:
        return (S >= threshold).astype(np.uint8)
    rows, cols = np.triu_indices(S.shape[0])
    vals = S[rows, cols]
    nz = vals > 0
    if top_k > nz.sum():
        warnings.warn(f"top_k={top_k} exceeds the {nz.sum()} nonzero entries; using all of them")
        top_k = int(nz.sum())
    order = np.lexsort((cols, rows, -vals))[:top_k]
    A = np.zeros(S.shape, dtype=np.uint8)
    A[rows[order], cols[order]] = 1
    A[cols[order], rows[order]] = 1
    return A


# ------------------------------------------------------ shift schedule


def make_shift_schedule(profile, n_intervals, seed=0):
    """Draw one setting per interval, uniformly with replacement.

    Returns ``(indices, params)``.
    """
    if not isinstance(profile, ShiftProfile):
        profile = ShiftProfile(profile)
    rng = np.random.default_rng([int(seed), 0x5117])
    idx = rng.integers(0, len(profile), size=n_intervals)
    return idx, [profile[i] for i in idx]
