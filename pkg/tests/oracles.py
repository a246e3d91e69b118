"""Naive scalar-loop reference implementations used as test oracles.

These deliberately avoid numpy vectorization and torch so they share no code
path with the package under test.
"""

import math


def softmax(logits, temperature=1.0):
    m = max(logits)
    exps = [math.exp((x - m) / temperature) for x in logits]
    z = sum(exps)
    return [e / z for e in exps]


def cross_entropy(logits, label):
    p = softmax(logits)
    if isinstance(label, int):
        return -math.log(p[label])
    return -sum(q * math.log(pi) for q, pi in zip(label, p))


def kl(p_t, p_s, eps=1e-12):
    total = 0.0
    for a, b in zip(p_t, p_s):
        if a > 0:
            total += a * (math.log(a) - math.log(max(b, eps)))
    return total


def response_loss(s_logits, t_logits, label, lam, T, t2=True):
    term = kl(softmax(t_logits, T), softmax(s_logits, T))
    return cross_entropy(s_logits, label) + lam * (T * T if t2 else 1.0) * term


def attention_map(f):
    C, H, W = len(f), len(f[0]), len(f[0][0])
    out = [[0.0] * W for _ in range(H)]
    for c in range(C):
        for h in range(H):
            for w in range(W):
                out[h][w] += f[c][h][w] ** 2
    return out


def _flat(m):
    return [v for row in m for v in row]


def _normalize(v, eps=1e-12):
    n = math.sqrt(sum(x * x for x in v))
    n = max(n, eps)
    return [x / n for x in v]


def _dist(u, v):
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(u, v)))


def at_distance(f_t, f_s):
    return _dist(_normalize(_flat(attention_map(f_t))), _normalize(_flat(attention_map(f_s))))


def channel_norms(f):
    return [math.sqrt(sum(v * v for row in ch for v in row)) for ch in f]


def topk_select(f, k):
    norms = channel_norms(f)
    # exhaustive: repeatedly take the largest remaining, lowest index on ties
    remaining = list(range(len(norms)))
    chosen = []
    for _ in range(k):
        best = remaining[0]
        for j in remaining[1:]:
            if norms[j] > norms[best]:
                best = j
        chosen.append(best)
        remaining.remove(best)
    return chosen


def df_distance(f_t, f_s, k):
    total = 0.0
    for j in topk_select(f_t, k):
        a_t = [v * v for row in f_t[j] for v in row]
        a_s = [v * v for row in f_s[j] for v in row]
        total += _dist(_normalize(a_t), _normalize(a_s))
    return total


def feature_loss(pairs, s_logits, label, alpha, beta, k):
    total = cross_entropy(s_logits, label)
    for f_t, f_s in pairs:
        total += alpha * at_distance(f_t, f_s) + beta * df_distance(f_t, f_s, k)
    return total


def fsp_matrix(f_in, f_out):
    Ci, Co, H, W = len(f_in), len(f_out), len(f_in[0]), len(f_in[0][0])
    g = [[0.0] * Co for _ in range(Ci)]
    for m in range(Ci):
        for n in range(Co):
            s = 0.0
            for h in range(H):
                for w in range(W):
                    s += f_in[m][h][w] * f_out[n][h][w]
            g[m][n] = s / (H * W)
    return g


def mse(a, b):
    vals = [(x - y) ** 2 for ra, rb in zip(a, b) for x, y in zip(ra, rb)]
    return sum(vals) / len(vals)


def relation_loss(t_fsp, s_fsp, s_logits, label, gamma):
    return cross_entropy(s_logits, label) + gamma * sum(mse(a, b) for a, b in zip(t_fsp, s_fsp))


def rskd_total(ce, rp, fe, re, eta, xi, tau_w):
    return ce + eta * rp + xi * fe + tau_w * re


def pearson(xs, ys):
    n = len(xs)
    mx, my = sum(xs) / n, sum(ys) / n
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    sxx = sum((x - mx) ** 2 for x in xs)
    syy = sum((y - my) ** 2 for y in ys)
    return sxy / math.sqrt(sxx * syy)


def entropy(p):
    return -sum(x * math.log(x) for x in p if x > 0)
