"""Two-stage training loop.

Stage 1 trains the backbone on source labels only and seeds the target
pseudo-labels from the source-oriented target features.  Stage 2 starts
from a fresh initialization and jointly optimizes the four-part
objective, refining pseudo-labels once per epoch.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tensor
from .config import RunConfig
from .data import DomainSet
from .errors import DegenerateRowError, TrainingError
from .model import ForwardOutput, TwoTokenTransformer, token_cosine_similarity
from .refine import PseudoLabelState, knn_refine, weighted_kmeans_refine

logger = logging.getLogger(__name__)

_EVAL_BATCH = 128

REPORT_COLUMNS = [
    "epoch", "l_s", "l_t", "l_s_con", "l_t_con", "total",
    "src_acc", "tgt_acc", "src_head_on_tgt", "tgt_head_on_src",
    "pseudo_acc", "mean_token_cos",
]


class SGD:
    """SGD with momentum and decoupled-from-nothing L2 weight decay.

    Classifier head parameters take a larger learning rate via
    ``classifier_lr_multiplier``.  Shared tensors (single-head ablation)
    are updated once.
    """

    def __init__(self, params: dict[str, Tensor], base_lr: float,
                 classifier_lr_multiplier: float = 10.0, momentum: float = 0.9,
                 weight_decay: float = 1e-3, schedule: str = "constant",
                 total_steps: int | None = None,
                 classifier_filter=TwoTokenTransformer.is_classifier_param):
        self.entries = []
        seen = set()
        for name, t in params.items():
            if id(t) in seen:
                continue
            seen.add(id(t))
            self.entries.append((name, t, bool(classifier_filter(name))))
        self.base_lr = base_lr
        self.classifier_lr_multiplier = classifier_lr_multiplier
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.total_steps = total_steps
        self.velocity = {name: np.zeros_like(t.data) for name, t, _ in self.entries}
        self.step_count = 0

    def lr_at(self, step: int) -> float:
        if self.schedule == "inv_decay":
            progress = step / max(self.total_steps or 1, 1)
            return self.base_lr / (1.0 + 10.0 * progress) ** 0.75
        return self.base_lr

    def step(self):
        lr = self.lr_at(self.step_count)
        for name, t, is_classifier in self.entries:
            grad = t.grad if t.grad is not None else np.zeros_like(t.data)
            v = self.velocity[name]
            v *= self.momentum
            v += grad + self.weight_decay * t.data
            t.data -= (lr * self.classifier_lr_multiplier if is_classifier else lr) * v
        self.step_count += 1


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    wall_clock: float = 0.0

    def add(self, **kwargs):
        self.rows.append({col: kwargs[col] for col in REPORT_COLUMNS})

    def to_csv(self, path):
        # timings stay out of the CSV so fixed-seed runs are byte-identical
        with open(path, "w", newline="") as fh:
            fh.write(",".join(REPORT_COLUMNS) + "\n")
            for row in self.rows:
                fh.write(",".join(_fmt(row[c]) for c in REPORT_COLUMNS) + "\n")

    def last(self) -> dict:
        return self.rows[-1] if self.rows else {}

    def series(self, column: str) -> list:
        return [row[column] for row in self.rows]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class ExperimentResult:
    config: RunConfig
    stage1_model: TwoTokenTransformer
    model: TwoTokenTransformer
    report: TrainReport
    stage1_source_acc: float
    stage1_target_acc: float
    initial_pseudo_acc: float

    def summary(self) -> dict:
        last = self.report.last()
        return {
            "seed": self.config.seed,
            "stage1_source_acc": self.stage1_source_acc,
            "stage1_target_acc": self.stage1_target_acc,
            "initial_pseudo_acc": self.initial_pseudo_acc,
            "final": {k: last.get(k) for k in REPORT_COLUMNS},
            "adaptation_gain": (last.get("tgt_acc", 0.0) - self.stage1_target_acc),
        }


# ---------------------------------------------------------------------------
# forward helpers


def forward_full(model: TwoTokenTransformer, images: np.ndarray,
                 batch_size: int = _EVAL_BATCH):
    """Batched full-dataset forward; returns stacked numpy outputs."""
    feats_s, feats_t, logit_s, logit_t = [], [], [], []
    for lo in range(0, len(images), batch_size):
        out = model.forward(images[lo:lo + batch_size])
        feats_s.append(out.feat_src_view.data)
        feats_t.append(out.feat_tgt_view.data)
        logit_s.append(out.logits_src.data)
        logit_t.append(out.logits_tgt.data)
    return (np.concatenate(feats_s), np.concatenate(feats_t),
            np.concatenate(logit_s), np.concatenate(logit_t))


def evaluate(model: TwoTokenTransformer, dataset: DomainSet, which_head: str = "tgt") -> float:
    """Classification accuracy of the chosen head on a labeled set."""
    if which_head not in ("src", "tgt"):
        raise ValueError(f"which_head must be 'src' or 'tgt', got {which_head!r}")
    _, _, logits_src, logits_tgt = forward_full(model, dataset.images)
    logits = logits_src if which_head == "src" else logits_tgt
    return float((logits.argmax(axis=1) == dataset.labels).mean())


def _check_finite(value: float, step: int):
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss at step {step}")


def _forward_training(model: TwoTokenTransformer, images: np.ndarray, step: int):
    """Forward pass that reports numerical blow-ups with the failing step."""
    try:
        return model.forward(images)
    except DegenerateRowError as exc:
        raise TrainingError(f"non-finite activations at step {step}: {exc}") from exc


# ---------------------------------------------------------------------------
# objective assembly


def _domain_losses(config: RunConfig, out_s: ForwardOutput, out_t: ForwardOutput,
                   source_labels, pseudo_labels):
    if config.objective_mode == "shared":
        # both heads trained on both domains through their own token view;
        # averaged so the objective scale matches the separate mode
        l_s = ad.scale(ad.add(losses.cross_entropy(out_s.logits_src, source_labels),
                              losses.cross_entropy(out_t.logits_src, pseudo_labels)), 0.5)
        l_t = ad.scale(ad.add(losses.cross_entropy(out_s.logits_tgt, source_labels),
                              losses.cross_entropy(out_t.logits_tgt, pseudo_labels)), 0.5)
        return l_s, l_t
    l_s = losses.cross_entropy(out_s.logits_src, source_labels)
    l_t = losses.cross_entropy(out_t.logits_tgt, pseudo_labels)
    return l_s, l_t


def _transfer_losses(config: RunConfig, out_s: ForwardOutput, out_t: ForwardOutput,
                     source_labels, pseudo_labels):
    zero = ad.constant(0.0)
    if config.transfer_method == "none":
        return zero, zero
    l_s_con, l_t_con = zero, zero
    if config.transfer_method == "contrastive":
        if config.use_source_transfer:
            l_s_con = losses.source_view_transfer_loss(
                out_s.feat_src_view, out_t.feat_src_view, source_labels, pseudo_labels, config.tau)
        if config.use_target_transfer:
            l_t_con = losses.target_view_transfer_loss(
                out_s.feat_tgt_view, out_t.feat_tgt_view, source_labels, pseudo_labels, config.tau)
    elif config.transfer_method == "mmd":
        if config.use_source_transfer:
            l_s_con = losses.mmd_transfer(out_s.feat_src_view, out_t.feat_src_view, stop_grad_side="a")
        if config.use_target_transfer:
            l_t_con = losses.mmd_transfer(out_s.feat_tgt_view, out_t.feat_tgt_view, stop_grad_side="b")
    elif config.transfer_method == "mstn":
        if config.use_source_transfer:
            l_s_con = losses.mstn_center_transfer(
                out_s.feat_src_view, source_labels, out_t.feat_src_view, pseudo_labels, stop_grad_side="a")
        if config.use_target_transfer:
            l_t_con = losses.mstn_center_transfer(
                out_s.feat_tgt_view, source_labels, out_t.feat_tgt_view, pseudo_labels, stop_grad_side="b")
    return l_s_con, l_t_con


def _refine_labels(config: RunConfig, model: TwoTokenTransformer, target: DomainSet,
                   current_labels: np.ndarray) -> np.ndarray:
    feat_s, feat_t, logits_s, logits_t = forward_full(model, target.images)
    if config.refinement_representation == "source_oriented":
        feats, logits = feat_s, logits_s
    else:
        feats, logits = feat_t, logits_t
    if config.refinement_method == "knn":
        return knn_refine(feats, current_labels, k=config.knn_k)
    state = weighted_kmeans_refine(feats, logits, rounds=config.kmeans_rounds)
    return state.labels


def _epoch_batches(n_source: int, n_target: int, batch_size: int, rng):
    """One pass over the larger domain, cycling the smaller one."""
    perm_s = rng.permutation(n_source)
    perm_t = rng.permutation(n_target)
    steps = max(n_source, n_target) // batch_size
    for step in range(max(steps, 1)):
        lo = step * batch_size
        sb = perm_s[(lo + np.arange(batch_size)) % n_source]
        tb = perm_t[(lo + np.arange(batch_size)) % n_target]
        yield sb, tb


# ---------------------------------------------------------------------------
# stages


def stage1_pretrain(config: RunConfig, source: DomainSet, target: DomainSet):
    """Source-only training, then initial pseudo-labels from weighted K-means."""
    model = TwoTokenTransformer(
        config.model, seed=config.seed,
        shared_head=(config.classifier_mode == "shared"),
        mask_enabled=config.mask_enabled,
    )
    total_steps = config.stage1_epochs * max(len(source) // config.batch_size, 1)
    opt = SGD(model.parameters(), config.base_lr, config.classifier_lr_multiplier,
              config.momentum, config.weight_decay, config.lr_schedule, total_steps)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    global_step = 0
    for _ in range(config.stage1_epochs):
        for sb, _tb in _epoch_batches(len(source), len(target), config.batch_size, rng):
            out = _forward_training(model, source.images[sb], global_step)
            loss = losses.cross_entropy(out.logits_src, source.labels[sb])
            _check_finite(float(loss.data), global_step)
            model.zero_grad()
            loss.backward()
            opt.step()
            global_step += 1
    feat_s, _, logits_s, _ = forward_full(model, target.images)
    state = weighted_kmeans_refine(feat_s, logits_s, rounds=config.kmeans_rounds)
    state.representation_choice = "source_oriented"
    return model, state


def stage2_train(config: RunConfig, source: DomainSet, target: DomainSet,
                 initial_state: PseudoLabelState):
    """Joint training with the four-part objective and per-epoch refinement."""
    model = TwoTokenTransformer(
        config.model, seed=config.seed + 10_000,
        shared_head=(config.classifier_mode == "shared"),
        mask_enabled=config.mask_enabled,
    )
    steps_per_epoch = max(max(len(source), len(target)) // config.batch_size, 1)
    opt = SGD(model.parameters(), config.base_lr, config.classifier_lr_multiplier,
              config.momentum, config.weight_decay, config.lr_schedule,
              config.stage2_epochs * steps_per_epoch)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    pseudo = initial_state.labels.copy()
    report = TrainReport()
    start = time.perf_counter()
    global_step = 0

    for epoch in range(config.stage2_epochs):
        sums = {k: 0.0 for k in ("l_s", "l_t", "l_s_con", "l_t_con", "total")}
        n_steps = 0
        for sb, tb in _epoch_batches(len(source), len(target), config.batch_size, rng):
            out_s = _forward_training(model, source.images[sb], global_step)
            out_t = _forward_training(model, target.images[tb], global_step)
            l_s, l_t = _domain_losses(config, out_s, out_t, source.labels[sb], pseudo[tb])
            l_s_con, l_t_con = _transfer_losses(config, out_s, out_t, source.labels[sb], pseudo[tb])
            bundle = losses.total_loss(l_s, l_t, l_s_con, l_t_con, config.lam, config.tau)
            _check_finite(float(bundle.total.data), global_step)
            model.zero_grad()
            bundle.total.backward()
            opt.step()
            for key, val in bundle.values().items():
                sums[key] += val
            n_steps += 1
            global_step += 1

        pseudo = _refine_labels(config, model, target, pseudo)

        feat_s, feat_t, logits_s, logits_t = forward_full(model, target.images)
        src_feat_s, src_feat_t, src_logits_s, src_logits_t = forward_full(model, source.images)
        report.add(
            epoch=epoch,
            **{k: sums[k] / n_steps for k in sums},
            src_acc=float((src_logits_s.argmax(axis=1) == source.labels).mean()),
            tgt_acc=float((logits_t.argmax(axis=1) == target.labels).mean()),
            src_head_on_tgt=float((logits_s.argmax(axis=1) == target.labels).mean()),
            tgt_head_on_src=float((src_logits_t.argmax(axis=1) == source.labels).mean()),
            pseudo_acc=float((pseudo == target.labels).mean()),
            mean_token_cos=float(token_cosine_similarity(feat_s, feat_t).mean()),
        )
    report.wall_clock = time.perf_counter() - start
    return model, report


def run_experiment(config: RunConfig, source: DomainSet | None = None,
                   target: DomainSet | None = None) -> ExperimentResult:
    from .data import generate, load_dataset  # local import avoids cycle at module load
    from pathlib import Path

    config.validate()
    if source is None or target is None:
        if config.dataset_path is not None:
            base = Path(config.dataset_path)
            source = load_dataset(base / "source")
            target = load_dataset(base / "target")
        else:
            spec = config.dataset
            if spec.seed != config.seed:
                spec = type(spec)(**{**spec.__dict__, "seed": config.seed})
            source, target = generate(spec)

    stage1_model, initial_state = stage1_pretrain(config, source, target)
    stage1_src_acc = evaluate(stage1_model, source, "src")
    stage1_tgt_acc = evaluate(stage1_model, target, "src")
    initial_pseudo_acc = float((initial_state.labels == target.labels).mean())
    logger.info("stage1: src_acc=%.3f tgt_acc=%.3f pseudo_acc=%.3f",
                stage1_src_acc, stage1_tgt_acc, initial_pseudo_acc)

    model, report = stage2_train(config, source, target, initial_state)
    return ExperimentResult(
        config=config,
        stage1_model=stage1_model,
        model=model,
        report=report,
        stage1_source_acc=stage1_src_acc,
        stage1_target_acc=stage1_tgt_acc,
        initial_pseudo_acc=initial_pseudo_acc,
    )
