"""Independent brute-force reference implementations used as test oracles.

These are written straight from the displayed formulas with explicit
Python loops and no shared code with the library paths they check.
"""

import numpy as np


def cross_entropy_oracle(logits, labels):
    total = 0.0
    for row, label in zip(logits, labels):
        m = max(row)
        lse = m + np.log(sum(np.exp(v - m) for v in row))
        total += -(row[label] - lse)
    return total / len(labels)


def contrastive_oracle(anchors, candidates, anchor_labels, candidate_labels, tau):
    a = np.array([row / np.linalg.norm(row) for row in anchors])
    c = np.array([row / np.linalg.norm(row) for row in candidates])
    per_anchor = []
    for i in range(len(a)):
        positives = [j for j in range(len(c)) if candidate_labels[j] == anchor_labels[i]]
        if not positives:
            continue
        logits = [float(a[i] @ c[k]) / tau for k in range(len(c))]
        m = max(logits)
        lse = m + np.log(sum(np.exp(v - m) for v in logits))
        vals = [-(logits[j] - lse) for j in positives]
        per_anchor.append(sum(vals) / len(vals))
    if not per_anchor:
        return 0.0
    return sum(per_anchor) / len(per_anchor)


def mmd_oracle(f_a, f_b, bandwidths):
    def kernel(x, y, bw):
        d = float(((x - y) ** 2).sum())
        return np.exp(-d / bw)

    total = 0.0
    for bw in bandwidths:
        aa = np.mean([[kernel(x, y, bw) for y in f_a] for x in f_a])
        bb = np.mean([[kernel(x, y, bw) for y in f_b] for x in f_b])
        ab = np.mean([[kernel(x, y, bw) for y in f_b] for x in f_a])
        total += aa + bb - 2.0 * ab
    return total


def mstn_oracle(f_a, labels_a, f_b, labels_b):
    shared = sorted(set(labels_a) & set(labels_b))
    if not shared:
        return 0.0
    total = 0.0
    for cls in shared:
        mean_a = np.mean([f for f, l in zip(f_a, labels_a) if l == cls], axis=0)
        mean_b = np.mean([f for f, l in zip(f_b, labels_b) if l == cls], axis=0)
        total += float(((mean_a - mean_b) ** 2).sum())
    return total / len(shared)


def weighted_kmeans_oracle(features, logits, rounds):
    """Soft-weighted round-1 centers, then hard-mean reassignment rounds."""
    t, c = logits.shape
    feats = np.array([row / np.linalg.norm(row) for row in features])
    delta = np.zeros((t, c))
    for j in range(t):
        e = np.exp(logits[j] - logits[j].max())
        delta[j] = e / e.sum()

    def cosine_distance(u, v):
        return 1.0 - float(u @ v) / (np.linalg.norm(u) * np.linalg.norm(v))

    def assign(centers, active):
        labels = np.zeros(t, dtype=int)
        for j in range(t):
            best, best_k = np.inf, None
            for k in range(c):
                if not active[k]:
                    continue
                d = cosine_distance(feats[j], centers[k])
                if d < best:  # strict: ties keep the smaller index
                    best, best_k = d, k
            labels[j] = best_k
        return labels

    centers = np.zeros((c, feats.shape[1]))
    active = np.zeros(c, dtype=bool)
    for k in range(c):
        mass = sum(delta[j, k] for j in range(t))
        if mass > 1e-12:
            active[k] = True
            centers[k] = sum(delta[j, k] * feats[j] for j in range(t)) / mass
    labels = assign(centers, active)

    for _ in range(rounds - 1):
        active = np.zeros(c, dtype=bool)
        centers = np.zeros_like(centers)
        for k in range(c):
            members = [feats[j] for j in range(t) if labels[j] == k]
            if members:
                active[k] = True
                centers[k] = np.mean(members, axis=0)
        labels = assign(centers, active)
    return labels, centers, active


def knn_oracle(features, labels, k):
    feats = np.array([row / np.linalg.norm(row) for row in features])
    t = len(feats)
    n_classes = int(max(labels)) + 1
    out = np.zeros(t, dtype=int)
    for i in range(t):
        dists = []
        for j in range(t):
            if j == i:
                continue
            dists.append((1.0 - float(feats[i] @ feats[j]), j))
        dists.sort()
        votes = [0] * n_classes
        for _, j in dists[:k]:
            votes[labels[j]] += 1
        best = max(votes)
        out[i] = votes.index(best)  # index() returns the smallest tied class
    return out


def masked_attention_oracle(x, wq, bq, wk, bk, wv, bv, mask):
    """Single-head dense attention, one sample: softmax(QK^T/sqrt(d)+M)V."""
    q = x @ wq + bq
    k = x @ wk + bk
    v = x @ wv + bv
    d = q.shape[1]
    logits = q @ k.T / np.sqrt(d) + mask
    out = np.zeros_like(v)
    for i in range(len(logits)):
        row = logits[i]
        m = row.max()
        e = np.exp(row - m)
        out[i] = (e / e.sum()) @ v
    return out
