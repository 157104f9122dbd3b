"""Target pseudo-label production and refinement.

The main route builds class centers as prediction-probability-weighted
means of l2-normalized target features, reassigns labels by cosine
distance to the nearest center, then runs hard-mean reassignment rounds.
A K-nearest-neighbor majority vote is provided as the alternative route.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, RefinementError

logger = logging.getLogger(__name__)


@dataclass
class PseudoLabelState:
    labels: np.ndarray            # (T,) hard class indices
    centers: np.ndarray           # (C, D) class centers in normalized feature space
    active: np.ndarray            # (C,) bool, classes with a defined center
    round: int
    representation_choice: str = "source_oriented"

    def to_json_dict(self, previous_labels=None) -> dict:
        changed = int((self.labels != previous_labels).sum()) if previous_labels is not None else None
        return {
            "round": self.round,
            "labels": self.labels.tolist(),
            "center_norms": np.linalg.norm(self.centers, axis=1).tolist(),
            "active": self.active.tolist(),
            "changed": changed,
        }


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return x / norms


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _assign(features_n: np.ndarray, centers: np.ndarray, active: np.ndarray) -> np.ndarray:
    """Nearest active center by cosine distance; ties to the smallest index."""
    if not active.any():
        raise RefinementError("all classes inactive during refinement")
    dist = 1.0 - features_n @ _normalize_rows(centers).T
    dist[:, ~active] = np.inf
    return dist.argmin(axis=1)


def weighted_kmeans_refine(features: np.ndarray, logits: np.ndarray,
                           rounds: int = 2) -> PseudoLabelState:
    """Probability-weighted centers, then hard reassignment rounds.

    Round 1 weights each (normalized) feature by the softmax probability
    of each class; later rounds recompute centers as plain means of the
    currently assigned features.  A class whose weight mass (or member
    count) vanishes is marked inactive and excluded from assignment.
    """
    if rounds < 1:
        raise ParameterError(f"rounds must be >= 1, got {rounds}")
    features = np.asarray(features, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if features.ndim != 2 or logits.ndim != 2 or len(features) != len(logits):
        raise ParameterError(
            f"features {features.shape} and logits {logits.shape} must be (T, D) and (T, C)"
        )
    n_classes = logits.shape[1]
    feats = _normalize_rows(features)

    delta = _softmax_rows(logits)                 # (T, C)
    mass = delta.sum(axis=0)                      # (C,)
    active = mass > 1e-12
    if not active.any():
        raise RefinementError("no class received any probability mass")
    if not active.all():
        logger.warning("weighted_kmeans_refine: inactive classes %s", np.flatnonzero(~active).tolist())
    centers = np.zeros((n_classes, feats.shape[1]))
    centers[active] = (delta.T[active] @ feats) / mass[active, None]
    labels = _assign(feats, centers, active)

    for _ in range(rounds - 1):
        counts = np.bincount(labels, minlength=n_classes)
        active = counts > 0
        if not active.all():
            logger.warning("weighted_kmeans_refine: empty classes %s after reassignment",
                           np.flatnonzero(~active).tolist())
        centers = np.zeros_like(centers)
        for cls in np.flatnonzero(active):
            centers[cls] = feats[labels == cls].mean(axis=0)
        labels = _assign(feats, centers, active)

    return PseudoLabelState(labels=labels, centers=centers, active=active, round=rounds)


def knn_refine(features: np.ndarray, current_labels, k: int = 5) -> np.ndarray:
    """Majority vote over the K nearest neighbors by cosine distance.

    Self is excluded; vote ties break toward the smallest class index.
    """
    features = np.asarray(features, dtype=np.float64)
    current_labels = np.asarray(current_labels, dtype=np.intp)
    t = len(features)
    if k < 1 or k >= t:
        raise ParameterError(f"k must satisfy 1 <= k < {t}, got {k}")
    feats = _normalize_rows(features)
    dist = 1.0 - feats @ feats.T
    np.fill_diagonal(dist, np.inf)
    neighbors = np.argsort(dist, axis=1, kind="stable")[:, :k]
    n_classes = int(current_labels.max()) + 1
    out = np.empty(t, dtype=np.intp)
    for i in range(t):
        votes = np.bincount(current_labels[neighbors[i]], minlength=n_classes)
        out[i] = votes.argmax()
    return out


def select_refinement_features(output, representation_choice: str) -> np.ndarray:
    """Pick the token view used for refinement from a target-batch forward."""
    if representation_choice == "source_oriented":
        return output.feat_src_view.data
    if representation_choice == "target_oriented":
        return output.feat_tgt_view.data
    raise ParameterError(f"unknown representation_choice {representation_choice!r}")


def dump_state(state: PseudoLabelState, path, previous_labels=None):
    """Optional diagnostic dump of one refinement round."""
    with open(path, "w") as fh:
        json.dump(state.to_json_dict(previous_labels), fh, indent=2)
