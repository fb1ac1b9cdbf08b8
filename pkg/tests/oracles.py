"""Independent reference computations used as test oracles.

Nothing here imports the package's numerical code; each function restates
the arithmetic in the most literal form available.
"""

import math

import numpy as np


def softmax_direct(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def nll_double_sum(probs, true_ids, vocab_size):
    """-(1/M) sum_i sum_c y_ic log a_ic with explicit one-hot vectors."""
    m = len(true_ids)
    total = 0.0
    for i in range(m):
        y = np.zeros(vocab_size)
        y[true_ids[i]] = 1.0
        for c in range(vocab_size):
            if y[c] != 0.0:
                total += y[c] * math.log(probs[i][c])
    return -total / m


def phi(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def layer_norm_row(x, g, b, eps):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return [(v - mu) / math.sqrt(var + eps) * gi + bi for v, gi, bi in zip(x, g, b)]


def reference_logits(tensors, cfg, input_ids, n_real, masked_positions):
    """Straight-line float64 forward pass of the encoder, one chunk, no dropout."""
    T = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
    L = len(input_ids)
    D, H = cfg.hidden_dim, cfg.heads
    dh = D // H
    eps = cfg.layer_norm_eps
    h = []
    for p in range(L):
        row = [T["tok_emb"][input_ids[p], j] + T["pos_emb"][p, j] for j in range(D)]
        h.append(layer_norm_row(row, T["emb_ln.g"], T["emb_ln.b"], eps))
    for li in range(cfg.layers):
        P = f"layers.{li}."

        def lin(x, name):
            w, b = T[P + name + ".w"], T[P + name + ".b"]
            return [sum(x[i] * w[i, j] for i in range(len(x))) + b[j] for j in range(w.shape[1])]

        q = [lin(x, "q") for x in h]
        k = [lin(x, "k") for x in h]
        v = [lin(x, "v") for x in h]
        ctx = [[0.0] * D for _ in range(L)]
        for head in range(H):
            sl = range(head * dh, (head + 1) * dh)
            for a in range(L):
                scores = []
                for bpos in range(n_real):
                    scores.append(sum(q[a][j] * k[bpos][j] for j in sl) / math.sqrt(dh))
                mx = max(scores)
                ex = [math.exp(s - mx) for s in scores]
                tot = sum(ex)
                for j in sl:
                    ctx[a][j] = sum(ex[bpos] / tot * v[bpos][j] for bpos in range(n_real))
        att = [lin(c, "o") for c in ctx]
        h1 = [layer_norm_row([x[j] + y[j] for j in range(D)], T[P + "ln1.g"], T[P + "ln1.b"], eps) for x, y in zip(h, att)]
        f = [[z * phi(z) for z in lin(x, "ff1")] for x in h1]
        f2 = [lin(z, "ff2") for z in f]
        h = [layer_norm_row([x[j] + y[j] for j in range(D)], T[P + "ln2.g"], T[P + "ln2.b"], eps) for x, y in zip(h1, f2)]
    out = []
    for p in masked_positions:
        x = h[p]
        t = [sum(x[i] * T["head.w"][i, j] for i in range(D)) + T["head.b"][j] for j in range(D)]
        t = [z * phi(z) for z in t]
        t = layer_norm_row(t, T["head_ln.g"], T["head_ln.b"], eps)
        V = T["out.w"].shape[1]
        out.append([sum(t[i] * T["out.w"][i, c] for i in range(D)) + T["out.b"][c] for c in range(V)])
    return np.array(out)


def mahalanobis2_closed_form(point, mean, cov):
    (a, b), (c, d) = cov
    det = a * d - b * c
    inv = ((d / det, -b / det), (-c / det, a / det))
    v0, v1 = point[0] - mean[0], point[1] - mean[1]
    return v0 * (inv[0][0] * v0 + inv[0][1] * v1) + v1 * (inv[1][0] * v0 + inv[1][1] * v1)


def top_k_mean(values, k):
    s = sorted(values, reverse=True)
    return sum(s[:k]) / len(s[:k])


def fbeta_oracle(p, r, beta):
    if p == 0 and r == 0:
        return 0.0
    return (1 + beta**2) * p * r / (beta**2 * p + r)
