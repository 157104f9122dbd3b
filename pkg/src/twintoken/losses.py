"""Training objectives: domain-wise cross-entropy, the two single-sided
contrastive transfer losses, and the alternative transfer criteria
(kernel two-sample distance, per-class center alignment)."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import LabelError, ParameterError

logger = logging.getLogger(__name__)


@dataclass
class LossBundle:
    l_s: Tensor
    l_t: Tensor
    l_s_con: Tensor
    l_t_con: Tensor
    total: Tensor
    lam: float
    tau: float

    def values(self) -> dict[str, float]:
        return {
            "l_s": float(self.l_s.data),
            "l_t": float(self.l_t.data),
            "l_s_con": float(self.l_s_con.data),
            "l_t_con": float(self.l_t_con.data),
            "total": float(self.total.data),
        }


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.intp)
    b, c = logits.shape
    if labels.shape != (b,):
        raise LabelError(f"labels shape {labels.shape} does not match batch size {b}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise LabelError(f"labels must lie in [0, {c})")
    onehot = np.zeros((b, c))
    onehot[np.arange(b), labels] = 1.0
    logsm = ad.log_softmax_lastdim(logits)
    return ad.scale(ad.sum_all(ad.mul(logsm, ad.constant(onehot))), -1.0 / b)


def supervised_contrastive(anchors: Tensor, candidates: Tensor, anchor_labels,
                           candidate_labels, tau: float,
                           stop_grad_side: str | None = "candidates") -> Tensor:
    """Label-supervised InfoNCE over l2-normalized embeddings.

    For each anchor with at least one same-label candidate, averages
    -log( exp(sim(a, c+)/tau) / sum_c exp(sim(a, c)/tau) ) over its
    positives; anchors without positives are skipped.  The designated
    side is detached from the graph before the similarity.
    """
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    if stop_grad_side not in (None, "anchors", "candidates"):
        raise ParameterError(f"unknown stop_grad_side {stop_grad_side!r}")
    anchor_labels = np.asarray(anchor_labels, dtype=np.intp)
    candidate_labels = np.asarray(candidate_labels, dtype=np.intp)

    if stop_grad_side == "anchors":
        anchors = ad.stop_gradient(anchors)
    elif stop_grad_side == "candidates":
        candidates = ad.stop_gradient(candidates)

    pos = anchor_labels[:, None] == candidate_labels[None, :]
    per_anchor = pos.sum(axis=1)
    valid = per_anchor > 0
    if not valid.any():
        logger.warning("supervised_contrastive: no anchor has a positive; returning 0")
        return ad.constant(0.0)

    a_n = ad.l2_normalize_lastdim(anchors)
    c_n = ad.l2_normalize_lastdim(candidates)
    sims = ad.scale(ad.matmul(a_n, ad.transpose(c_n)), 1.0 / tau)
    logsm = ad.log_softmax_lastdim(sims)

    weights = np.zeros(pos.shape)
    n_valid = int(valid.sum())
    weights[valid] = pos[valid] / (per_anchor[valid, None] * n_valid)
    return ad.scale(ad.sum_all(ad.mul(logsm, ad.constant(weights))), -1.0)


def source_view_transfer_loss(feat_source: Tensor, feat_target: Tensor,
                              source_labels, target_pseudolabels, tau: float) -> Tensor:
    """Pull source-oriented target features toward the (frozen) source ones.

    Target features act as anchors, source features as candidates; the
    source side is stop-gradient so the source-oriented mapping stays put.
    """
    return supervised_contrastive(
        anchors=feat_target,
        candidates=feat_source,
        anchor_labels=target_pseudolabels,
        candidate_labels=source_labels,
        tau=tau,
        stop_grad_side="candidates",
    )


def target_view_transfer_loss(feat_source: Tensor, feat_target: Tensor,
                              source_labels, target_pseudolabels, tau: float) -> Tensor:
    """Mirror direction: source anchors move toward frozen target-oriented features."""
    return supervised_contrastive(
        anchors=feat_source,
        candidates=feat_target,
        anchor_labels=source_labels,
        candidate_labels=target_pseudolabels,
        tau=tau,
        stop_grad_side="candidates",
    )


def median_sqdist(a: np.ndarray, b: np.ndarray) -> float:
    """Median pairwise squared distance over the pooled sample (bandwidth base)."""
    pooled = np.concatenate([a, b], axis=0)
    sq = (pooled * pooled).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * pooled @ pooled.T
    iu = np.triu_indices(len(pooled), k=1)
    med = float(np.median(np.maximum(d[iu], 0.0)))
    return med if med > 0 else 1.0


def mmd_transfer(f_a: Tensor, f_b: Tensor, bandwidths=None,
                 stop_grad_side: str | None = "a") -> Tensor:
    """Biased squared kernel two-sample distance with a multi-Gaussian kernel.

    Per bandwidth bw: mean k(a, a') + mean k(b, b') - 2 mean k(a, b) with
    k(x, y) = exp(-||x - y||^2 / bw); contributions are summed over the
    bandwidth list.  Default bandwidths: median heuristic x {0.5, 1, 2}.
    """
    if f_a.shape[0] < 2 or f_b.shape[0] < 2:
        raise ParameterError("mmd_transfer needs at least 2 samples per side")
    if stop_grad_side not in (None, "a", "b"):
        raise ParameterError(f"unknown stop_grad_side {stop_grad_side!r}")
    if bandwidths is None:
        base = median_sqdist(f_a.data, f_b.data)
        bandwidths = [0.5 * base, base, 2.0 * base]
    bandwidths = [float(bw) for bw in bandwidths]
    if any(bw <= 0 for bw in bandwidths):
        raise ParameterError(f"bandwidths must be positive, got {bandwidths}")

    if stop_grad_side == "a":
        f_a = ad.stop_gradient(f_a)
    elif stop_grad_side == "b":
        f_b = ad.stop_gradient(f_b)

    d_aa = ad.pairwise_sqdist(f_a, f_a)
    d_bb = ad.pairwise_sqdist(f_b, f_b)
    d_ab = ad.pairwise_sqdist(f_a, f_b)
    total = ad.constant(0.0)
    for bw in bandwidths:
        k_aa = ad.mean_all(ad.exp(ad.scale(d_aa, -1.0 / bw)))
        k_bb = ad.mean_all(ad.exp(ad.scale(d_bb, -1.0 / bw)))
        k_ab = ad.mean_all(ad.exp(ad.scale(d_ab, -1.0 / bw)))
        total = ad.add(total, ad.add(ad.add(k_aa, k_bb), ad.scale(k_ab, -2.0)))
    return total


def mstn_center_transfer(f_a: Tensor, labels_a, f_b: Tensor, labels_b,
                         stop_grad_side: str | None = "a") -> Tensor:
    """Mean squared distance between per-class feature means of the two sets.

    Classes missing on either side are skipped; no shared class at all
    yields 0 with a warning.
    """
    if stop_grad_side not in (None, "a", "b"):
        raise ParameterError(f"unknown stop_grad_side {stop_grad_side!r}")
    labels_a = np.asarray(labels_a, dtype=np.intp)
    labels_b = np.asarray(labels_b, dtype=np.intp)
    shared = sorted(set(labels_a.tolist()) & set(labels_b.tolist()))
    if not shared:
        logger.warning("mstn_center_transfer: no class present on both sides; returning 0")
        return ad.constant(0.0)

    if stop_grad_side == "a":
        f_a = ad.stop_gradient(f_a)
    elif stop_grad_side == "b":
        f_b = ad.stop_gradient(f_b)

    def mean_matrix(labels, n_rows):
        w = np.zeros((len(shared), n_rows))
        for i, cls in enumerate(shared):
            members = labels == cls
            w[i, members] = 1.0 / members.sum()
        return ad.constant(w)

    means_a = ad.matmul(mean_matrix(labels_a, f_a.shape[0]), f_a)
    means_b = ad.matmul(mean_matrix(labels_b, f_b.shape[0]), f_b)
    diff = ad.sub(means_a, means_b)
    return ad.scale(ad.sum_all(ad.mul(diff, diff)), 1.0 / len(shared))


def total_loss(l_s: Tensor, l_t: Tensor, l_s_con: Tensor, l_t_con: Tensor,
               lam: float, tau: float) -> LossBundle:
    """Combine the four components with the single trade-off weight."""
    if lam < 0:
        raise ParameterError(f"lambda must be nonnegative, got {lam}")
    total = ad.add(ad.add(l_s, l_t), ad.scale(ad.add(l_s_con, l_t_con), lam))
    return LossBundle(l_s, l_t, l_s_con, l_t_con, total, lam, tau)
