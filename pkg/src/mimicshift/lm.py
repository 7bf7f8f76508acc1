"""Next-symbol LSTM language model as a scikit-learn style estimator."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import seqnet
from ._validation import check_random_state, check_sequences, lm_batch
from .seqnet import AdamState, SeqModelParams


class DivergenceError(FloatingPointError):
    pass


class SequenceLM(BaseEstimator):
    """LSTM that models ``p(x_t | x_<t)`` over ``n_symbols`` discrete symbols.

    Parameters
    ----------
    n_symbols : int or None
        Alphabet size. Inferred from the data on the first ``fit`` when None.
    n_hidden : int
        LSTM units.
    learning_rate : float
        Adam step size.
    batch_size : int
    n_epochs : int
        Passes over the data made by ``fit``.
    clip_norm : float
        Global gradient-norm clip applied before every Adam step.
    random_state : int or None
    """

    def __init__(self, n_symbols=None, n_hidden=32, learning_rate=0.01, batch_size=128,
                 n_epochs=5, clip_norm=5.0, random_state=0):
        self.n_symbols = n_symbols
        self.n_hidden = n_hidden
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_epochs = n_epochs
        self.clip_norm = clip_norm
        self.random_state = random_state

    # -- lifecycle

    def _init(self, padded):
        n = self.n_symbols or int(padded.max()) + 1
        self.n_symbols_ = n
        self.params_ = SeqModelParams.initialize(n, self.n_hidden, n, seed=self._seed())
        self.optimizer_ = AdamState.for_params(self.params_, self.learning_rate)
        self.rng_ = check_random_state(self._seed() + 1)
        self.loss_history_ = []
        self.n_updates_ = 0

    def _seed(self):
        return 0 if self.random_state is None else int(self.random_state)

    def fit(self, X, y=None):
        padded, lengths = check_sequences(X)
        self._init(padded)
        return self._train(padded, lengths, self.n_epochs)

    def partial_fit(self, X, y=None, n_epochs=1):
        """Continue training from the current weights (initialises on first call)."""
        padded, lengths = check_sequences(X)
        if not hasattr(self, "params_"):
            self._init(padded)
        return self._train(padded, lengths, n_epochs)

    def warm_start_from(self, other):
        """Adopt another fitted model's weights with a fresh optimizer."""
        check_is_fitted(other, "params_")
        self.n_symbols_ = other.n_symbols_
        self.params_ = other.params_.copy()
        self.optimizer_ = AdamState.for_params(self.params_, self.learning_rate)
        self.rng_ = check_random_state(self._seed() + 1)
        self.loss_history_ = []
        self.n_updates_ = 0
        return self

    def _check_symbols(self, padded):
        if padded.max() >= self.n_symbols_:
            raise ValueError(f"symbol {padded.max()} outside alphabet of size {self.n_symbols_}")

    def _train(self, padded, lengths, n_epochs):
        self._check_symbols(padded)
        n = padded.shape[0]
        for _ in range(n_epochs):
            order = self.rng_.permutation(n)
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                self.step(padded[idx], lengths[idx])
        return self

    def step(self, padded, lengths):
        """One Adam update on a single batch; returns the batch loss."""
        T = int(lengths.max())
        inputs, targets, mask = lm_batch(padded[:, :T], lengths, self.n_symbols_)
        loss, grads = seqnet.cross_entropy_loss(self.params_, inputs, targets, mask)
        if not np.isfinite(loss):
            raise DivergenceError(f"loss became non-finite at update {self.n_updates_}")
        grads = seqnet.clip_gradients(grads, self.clip_norm)
        self.params_, self.optimizer_ = seqnet.adam_update(self.params_, grads, self.optimizer_)
        self.loss_history_.append(loss)
        self.n_updates_ += 1
        return loss

    # -- inference

    def _log_probs(self, padded, lengths):
        T = int(lengths.max())
        padded = padded[:, :T]
        inputs, targets, mask = lm_batch(padded, lengths, self.n_symbols_)
        out = np.empty(padded.shape)
        chunk = 2048
        for s in range(0, padded.shape[0], chunk):
            cache = seqnet.lstm_forward(self.params_, inputs[s:s + chunk])
            logp = seqnet.log_softmax(cache.logits)
            out[s:s + chunk] = np.take_along_axis(
                logp, targets[s:s + chunk, :, None], axis=2)[..., 0]
        return out * mask, mask

    def score_samples(self, X):
        """Mean per-symbol log-likelihood of every sequence (higher is more typical)."""
        check_is_fitted(self, "params_")
        padded, lengths = check_sequences(X)
        self._check_symbols(padded)
        logp, mask = self._log_probs(padded, lengths)
        return logp.sum(axis=1) / mask.sum(axis=1)

    def loss(self, X):
        """Mean per-symbol negative log-likelihood pooled over ``X``."""
        check_is_fitted(self, "params_")
        padded, lengths = check_sequences(X)
        self._check_symbols(padded)
        logp, mask = self._log_probs(padded, lengths)
        return float(-logp.sum() / mask.sum())

    def predict_proba_next(self, X):
        """Predicted distribution for each position given its prefix, (B, T, n)."""
        check_is_fitted(self, "params_")
        padded, lengths = check_sequences(X)
        inputs, _, _ = lm_batch(padded, lengths, self.n_symbols_)
        return seqnet.softmax(seqnet.lstm_forward(self.params_, inputs).logits)
