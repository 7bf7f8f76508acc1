"""Slow, obviously-correct reimplementations used as test oracles."""

import itertools
import math
from fractions import Fraction

import numpy as np


def chunk_counts(n_rows, max_len=16):
    return [max_len] * (n_rows // max_len) + ([n_rows % max_len] if n_rows % max_len else [])


def pair_scan(sequences, n):
    adj = [[0] * n for _ in range(n)]
    for s in sequences:
        for a, b in zip(s, s[1:]):
            adj[a][b] = adj[b][a] = 1
    return np.array(adj, dtype=np.uint8)


def bigram_counter(sequences, n):
    S = [[0] * n for _ in range(n)]
    for s in sequences:
        for a, b in zip(s, s[1:]):
            S[a][b] += 1
    return np.array(S, dtype=np.int64)


def top_k_by_sort(S, k):
    n = S.shape[0]
    cells = sorted(((-int(S[i][j]), i, j) for i in range(n) for j in range(i, n) if S[i][j] > 0))
    A = np.zeros((n, n), dtype=np.uint8)
    for _, i, j in cells[:k]:
        A[i][j] = A[j][i] = 1
    return A


def second_order_weights(adj, prev, cur, p, q):
    """Normalized next-step probabilities of the biased walk, by enumeration."""
    n = len(adj)
    w = {}
    for x in range(n):
        if not adj[cur][x]:
            continue
        if x == prev:
            w[x] = 1 / p
        elif adj[prev][x]:
            w[x] = 1.0
        else:
            w[x] = 1 / q
    z = sum(w.values())
    return {x: v / z for x, v in w.items()}


def lstm_reference(W, b, Wo, bo, inputs, h0=None, c0=None):
    """Per-example, per-step loop LSTM with gate order [i, f, o, g]."""
    B, T, _ = inputs.shape
    H = b.size // 4
    logits = np.zeros((B, T, bo.size))
    for n in range(B):
        h = np.zeros(H) if h0 is None else h0[n].copy()
        c = np.zeros(H) if c0 is None else c0[n].copy()
        for t in range(T):
            a = np.concatenate([inputs[n, t], h]) @ W + b
            i = 1 / (1 + math.e ** -a[:H])
            f = 1 / (1 + math.e ** -a[H:2 * H])
            o = 1 / (1 + math.e ** -a[2 * H:3 * H])
            g = np.tanh(a[3 * H:])
            c = f * c + i * g
            h = o * np.tanh(c)
            logits[n, t] = h @ Wo + bo
    return logits


def finite_difference(f, params, h=1e-5):
    out = {}
    t = {k: v.copy() for k, v in params.tensors.items()}
    for k, v in params.tensors.items():
        g = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            t[k][idx] = v[idx] + h
            up = f(params.replace(t))
            t[k][idx] = v[idx] - h
            down = f(params.replace(t))
            t[k][idx] = v[idx]
            g[idx] = (up - down) / (2 * h)
        out[k] = g
    return out


def relative_error(a, b):
    num = math.sqrt(sum(float(np.sum((a[k] - b[k]) ** 2)) for k in a))
    den = max(math.sqrt(sum(float(np.sum(a[k] ** 2)) for k in a)),
              math.sqrt(sum(float(np.sum(b[k] ** 2)) for k in b)), 1e-12)
    return num / den


def tally(rejected, is_attack):
    tp = tn = fp = fn = 0
    for r, a in zip(rejected, is_attack):
        if a and r:
            tp += 1
        elif a:
            fn += 1
        elif r:
            fp += 1
        else:
            tn += 1
    return tp, tn, fp, fn


def metrics_by_formula(tp, tn, fp, fn):
    """FNR = FN/(FN+TP), FPR = FP/(FP+TN), ACC = (TP+TN)/(all),
    Precision = TP/(TP+FP), Recall = TP/(TP+FN), F1 = 2PR/(P+R)."""
    def div(a, b):
        return None if b == 0 else Fraction(a, b)
    P, R = div(tp, tp + fp), div(tp, tp + fn)
    f1 = None if P is None or R is None or P + R == 0 else 2 * P * R / (P + R)
    return {"fnr": div(fn, fn + tp), "fpr": div(fp, fp + tn),
            "acc": div(tp + tn, tp + tn + fp + fn), "precision": P, "recall": R, "f1": f1}


def lowest_k(scores, k):
    """Indices of the k lowest scores, earlier index first among ties."""
    order = sorted(range(len(scores)), key=lambda i: (scores[i], i))
    return set(order[:k])


def curve_by_recount(scores, is_attack, ratio, axis):
    n = len(scores)
    if axis == "acceptance-fnr":
        k = math.floor((1 - Fraction(ratio)) * n + Fraction(1, 10**9))
    else:
        k = math.floor(Fraction(ratio) * n + Fraction(1, 10**9))
    rej = lowest_k(scores, min(k, n))
    tp, tn, fp, fn = tally([i in rej for i in range(n)], is_attack)
    if axis == "acceptance-fnr":
        if ratio == 0:
            return Fraction(0)
        return None if tp + fn == 0 else Fraction(fn, tp + fn)
    return None if fp + tn == 0 else Fraction(fp, fp + tn)


def exhaustive_tie_oracle(scores, k):
    """Among all valid lowest-k subsets, the one whose sorted indices come first."""
    n = len(scores)
    valid = [c for c in itertools.combinations(range(n), k)
             if all(scores[i] <= scores[j] for i in c for j in range(n) if j not in c)]
    return set(min(valid))


def algorithm_loss_errors(seed, H=4, N=5, K=3, B=3, T=4):
    """Analytic-vs-FD relative error of the mimic, generator and discriminator losses
    for one random draw of 4-unit models."""
    from mimicshift import seqnet

    rng = np.random.default_rng(seed)

    def draw(n_in, n_out, n_noise=0):
        p = seqnet.SeqModelParams.initialize(n_in, H, n_out, n_noise=n_noise,
                                             seed=int(rng.integers(2**31)))
        scale = rng.uniform(1.0, 8.0)
        return p.replace({k: v * scale for k, v in p.tensors.items()})

    out = {}
    C = draw(K, K)
    x = np.eye(K)[rng.integers(0, K, (B, T))]
    y = rng.integers(0, K, (B, T))
    mask = (rng.random((B, T)) > 0.3).astype(float)
    mask[:, 0] = 1
    _, g = seqnet.cross_entropy_loss(C, x, y, mask)
    out["mimic"] = relative_error(
        g, finite_difference(lambda p: seqnet.cross_entropy_loss(p, x, y, mask)[0], C))

    D = draw(N + K, 1)
    real = np.concatenate([np.eye(N)[rng.integers(0, N, (B, T))],
                           np.eye(K)[rng.integers(0, K, (B, T))]], axis=2)
    fake = np.concatenate([rng.dirichlet(np.ones(N), (B, T)),
                           np.eye(K)[rng.integers(0, K, (B, T))]], axis=2)
    _, g = seqnet.discriminator_objective(D, real, fake)
    out["discriminator"] = relative_error(
        g, finite_difference(lambda p: seqnet.discriminator_objective(p, real, fake)[0], D))

    G = draw(N + K, N, n_noise=H)
    cond = np.eye(K)[rng.integers(0, K, (B, T))]
    z = rng.standard_normal((B, H))
    gum = rng.gumbel(size=(B, T, N))
    tau = rng.uniform(0.5, 2.0)
    _, g = seqnet.generator_objective(G, D, cond, z, gum, tau, mode="soft")
    out["generator"] = relative_error(g, finite_difference(
        lambda p: seqnet.generator_objective(p, D, cond, z, gum, tau, mode="soft")[0], G))
    return out
