"""Margin-driven class weighting and adversarial multi-source training.

The training objective couples a joint source classification loss with a
weighted domain-adversarial loss over one shared feature net F, classifier
head G, and domain discriminator D:

* every target sample gets a pseudo-label and a prediction margin (top
  probability minus runner-up) from the current classifier;
* a running per-class register averages those margins over the batches seen
  so far, but only while every source sub-batch is classified with error
  below a gate threshold, so garbage early predictions never enter it;
* source samples are weighted by their class's register value, target
  samples by margin times the register value of their pseudo-label, which
  down-weights source-private classes and likely-unknown target samples in
  the domain loss;
* one backward pass realizes the min-max: the discriminator descends the
  domain loss while a gradient-reversal stage feeds the negated (and
  ramped) feature gradient back into F.

At inference a sample is assigned its argmax class when its margin clears
the rejection threshold w0 and is marked UNKNOWN otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .labelspace import LabelPartition, membership_masks
from .nn import (
    Mlp,
    Tape,
    Value,
    forward_mlp,
    grad_reverse,
    l2_normalize,
    mlp_apply,
    run_backward,
    scalar_sum,
    sgd_step,
    softmax,
    softmax_cross_entropy,
)
from .synth import batch_iterator

__all__ = [
    "UNKNOWN",
    "MarginResult",
    "margin_of",
    "batch_margins",
    "margin_vector",
    "TargetMarginRegister",
    "source_weight",
    "target_weight",
    "normalize_weights",
    "classification_loss",
    "domain_loss",
    "grl_lambda",
    "Hyperparams",
    "LossReport",
    "TrainResult",
    "TrainingDiverged",
    "train",
    "extract_features",
    "predict_classes",
    "infer",
]

UNKNOWN = -1


@dataclass(frozen=True)
class MarginResult:
    """Pseudo-label and margin of one probability vector."""

    pseudo_label: int
    margin: float


def margin_of(probs) -> MarginResult:
    """Margin of a single probability vector: top entry minus runner-up.

    The argmax breaks ties toward the lowest index. Probabilities live in
    the simplex, so the margin is always inside [0, 1].
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.shape[0] < 2:
        raise ValueError("margin needs a 1-d probability vector of length >= 2")
    top = int(np.argmax(probs))
    rest = np.delete(probs, top)
    return MarginResult(top, float(probs[top] - rest.max()))


def batch_margins(probs: np.ndarray):
    """Vectorized pseudo-labels and margins for a batch of probability rows."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] < 2:
        raise ValueError("expected a (n, k>=2) probability matrix")
    pseudo = probs.argmax(axis=1)
    part = np.partition(probs, -2, axis=1)
    margins = part[:, -1] - part[:, -2]
    return pseudo, margins


def margin_vector(probs: np.ndarray):
    """Per-class mean margin over a batch, grouped by pseudo-label.

    Returns ``(values, present)`` where ``present[c]`` says whether any
    sample was pseudo-labeled c; absent classes get value 0.
    """
    pseudo, margins = batch_margins(probs)
    k = probs.shape[1]
    sums = np.bincount(pseudo, weights=margins, minlength=k)
    counts = np.bincount(pseudo, minlength=k)
    present = counts > 0
    return sums / np.maximum(counts, 1), present


class TargetMarginRegister:
    """Running per-class mean of batch margin vectors.

    Classes absent from a batch contribute nothing to their component, so
    after any update history each component equals the plain mean of the
    contributions that class actually received; never-seen classes stay 0.
    ``step`` counts update calls.
    """

    def __init__(self, n_classes: int):
        if n_classes < 1:
            raise ValueError("need at least one class")
        self.n_classes = n_classes
        self.step = 0
        self._sums = np.zeros(n_classes)
        self._counts = np.zeros(n_classes, dtype=np.int64)

    @property
    def values(self) -> np.ndarray:
        return self._sums / np.maximum(self._counts, 1)

    def update(self, vector, present):
        vector = np.asarray(vector, dtype=np.float64)
        present = np.asarray(present, dtype=bool)
        if vector.shape != (self.n_classes,) or present.shape != (self.n_classes,):
            raise ValueError(f"expected vectors of length {self.n_classes}")
        if (vector < -1e-12).any() or (vector > 1 + 1e-12).any():
            raise ValueError("margin contributions must lie in [0, 1]")
        self._sums[present] += vector[present]
        self._counts[present] += 1
        self.step += 1

    def as_rows(self):
        return [(c, float(v)) for c, v in enumerate(self.values)]


def source_weight(register: TargetMarginRegister, label: int) -> float:
    """Class weight of a labeled source sample: the register value of its class."""
    if not 0 <= label < register.n_classes:
        raise ValueError(f"label {label} outside [0, {register.n_classes})")
    return float(register.values[label])


def target_weight(register: TargetMarginRegister, result: MarginResult) -> float:
    """Sample weight of a target sample: margin times its pseudo-class register value."""
    return result.margin * source_weight(register, result.pseudo_label)


def normalize_weights(raw) -> np.ndarray:
    """Divide by the group mean so the output averages to 1; all-zero stays zero."""
    raw = np.asarray(raw, dtype=np.float64)
    if (raw < 0).any():
        raise ValueError("weights must be nonnegative")
    mean = raw.mean() if raw.size else 0.0
    if mean == 0.0:
        return np.zeros_like(raw)
    return raw / mean


def _normalize_jointly(parts):
    """Normalize several weight groups by their joint mean, keeping the split."""
    flat = normalize_weights(np.concatenate(parts))
    out, k = [], 0
    for p in parts:
        out.append(flat[k : k + len(p)])
        k += len(p)
    return out


def classification_loss(per_source_logits, per_source_labels, tape: Tape | None = None) -> Value:
    """Average of the per-source mean cross entropies."""
    m = len(per_source_logits)
    if m == 0 or m != len(per_source_labels):
        raise ValueError("need matching, nonempty logits and label lists")
    parts = [
        softmax_cross_entropy(lg, y, np.ones(lg.data.shape[0]), tape)
        for lg, y in zip(per_source_logits, per_source_labels)
    ]
    return scalar_sum(parts, [1.0 / m] * m, tape)


_CLIP = 1e-7


def domain_loss(source_outs, source_weights, target_out, target_weights, tape: Tape | None = None) -> Value:
    """Weighted domain discrimination loss.

    Sources should be scored 1 and the target 0:
    mean over sources of E[-w log D] plus E[-w log(1 - D)] on the target.
    Discriminator outputs are clipped away from {0, 1} before the log.
    Weights are taken as constants; no gradient flows through them.
    """
    m = len(source_outs)
    if m == 0 or m != len(source_weights):
        raise ValueError("need matching, nonempty output and weight lists")
    total = 0.0
    clipped_s = []
    for out, w in zip(source_outs, source_weights):
        d = np.clip(out.data[:, 0], _CLIP, 1 - _CLIP)
        clipped_s.append(d)
        total += float((-np.asarray(w) * np.log(d)).mean() / m)
    dt = np.clip(target_out.data[:, 0], _CLIP, 1 - _CLIP)
    wt = np.asarray(target_weights, dtype=np.float64)
    total += float((-wt * np.log(1.0 - dt)).mean())
    node = Value([[total]])
    if tape is not None:
        def op():
            g = node.grad[0, 0]
            if g == 0.0:
                return
            for out, w, d in zip(source_outs, source_weights, clipped_s):
                inside = (out.data[:, 0] > _CLIP) & (out.data[:, 0] < 1 - _CLIP)
                n = d.shape[0]
                out.grad[:, 0] += g * inside * (-np.asarray(w) / (m * n * d))
            inside_t = (target_out.data[:, 0] > _CLIP) & (target_out.data[:, 0] < 1 - _CLIP)
            nt = dt.shape[0]
            target_out.grad[:, 0] += g * inside_t * (wt / (nt * (1.0 - dt)))

        tape.record(op)
    return node


def grl_lambda(step: int, total_steps: int, max_lambda: float = 1.0, gamma: float = 10.0) -> float:
    """Ramp of the gradient-reversal coefficient from 0 toward max_lambda."""
    p = step / total_steps if total_steps > 0 else 1.0
    return max_lambda * (2.0 / (1.0 + math.exp(-gamma * p)) - 1.0)


@dataclass(frozen=True)
class Hyperparams:
    """Training knobs. Architecture widths are deliberately small; the
    problems this targets are low-dimensional point clouds."""

    w0: float = 0.5
    epsilon: float = 0.1
    max_steps: int = 2500
    batch_size: int = 32
    lr_features: float = 0.1
    lr_classifier: float = 0.1
    lr_discriminator: float = 0.1
    grl_max_lambda: float = 1.0
    grl_gamma: float = 10.0
    weight_decay: float = 0.0
    feature_hidden: tuple[int, ...] = (64,)
    feature_dim: int = 32
    disc_hidden: tuple[int, ...] = (32,)
    seed: int = 0

    def violations(self) -> list[str]:
        out = []
        if not 0.0 <= self.w0 <= 1.0:
            out.append(f"w0 must lie in [0, 1], got {self.w0}")
        if not 0.0 <= self.epsilon <= 1.0:
            out.append(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.max_steps < 0:
            out.append(f"max_steps must be >= 0, got {self.max_steps}")
        if self.batch_size < 1:
            out.append(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("lr_features", "lr_classifier", "lr_discriminator"):
            if getattr(self, name) <= 0:
                out.append(f"{name} must be > 0, got {getattr(self, name)}")
        if self.grl_max_lambda < 0:
            out.append(f"grl_max_lambda must be >= 0, got {self.grl_max_lambda}")
        if self.weight_decay < 0:
            out.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.feature_dim < 1:
            out.append(f"feature_dim must be >= 1, got {self.feature_dim}")
        for name in ("feature_hidden", "disc_hidden"):
            if any(h < 1 for h in getattr(self, name)):
                out.append(f"{name} widths must be >= 1, got {getattr(self, name)}")
        return out


@dataclass(frozen=True)
class LossReport:
    """Per-step trace row. Weight summaries are the raw (pre-normalization)
    values; groups with no samples in the batch report 0."""

    step: int
    class_loss: float
    domain_loss: float
    source_errors: tuple[float, ...]
    mean_weight_common: float
    mean_weight_private: float
    mean_weight_target: float
    tmr_updated: bool = False


@dataclass
class TrainResult:
    feature_net: Mlp
    classifier: Mlp
    discriminator: Mlp
    register: TargetMarginRegister
    trace: list[LossReport] = field(default_factory=list)


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss; carries the last finite trace row."""

    def __init__(self, step: int, last_report: LossReport | None):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.last_report = last_report


def _build_nets(hp: Hyperparams, in_dim: int, n_classes: int):
    def rng(tag):
        return np.random.default_rng(np.random.SeedSequence(hp.seed, spawn_key=(100 + tag,)))

    f_sizes = [in_dim, *hp.feature_hidden, hp.feature_dim]
    feature_net = Mlp(f_sizes, ["relu"] * len(hp.feature_hidden) + ["linear"], rng(0))
    classifier = Mlp([hp.feature_dim, n_classes], ["linear"], rng(1))
    d_sizes = [hp.feature_dim, *hp.disc_hidden, 1]
    discriminator = Mlp(d_sizes, ["relu"] * len(hp.disc_hidden) + ["sigmoid"], rng(2))
    return feature_net, classifier, discriminator


def _check_datasets(datasets, partition: LabelPartition):
    if len(datasets) != partition.n_sources + 1:
        raise ValueError(
            f"expected {partition.n_sources} source datasets plus one target, got {len(datasets)}"
        )
    if partition.source_union != tuple(range(partition.n_source_classes)):
        raise ValueError("source classes must form a contiguous range starting at 0")
    for i, ds in enumerate(datasets[:-1]):
        if ds.labels is None:
            raise ValueError(f"dataset {i} has no labels but is used as a source")
        extra = set(np.unique(ds.labels)) - set(partition.source_labels[i])
        if extra:
            raise ValueError(f"source {i + 1} carries labels {sorted(extra)} outside its label set")
    target = datasets[-1]
    if target.labels is not None:
        raise ValueError("the last dataset must be the unlabeled target")
    if target.eval_labels is not None:
        extra = set(np.unique(target.eval_labels)) - set(partition.target_labels)
        if extra:
            raise ValueError(f"target evaluation labels {sorted(extra)} outside the target label set")


def train(
    datasets,
    partition: LabelPartition,
    hp: Hyperparams,
    *,
    adversarial: bool = True,
    weight_mode: str = "margin",
) -> TrainResult:
    """Run the per-batch training loop for ``hp.max_steps`` steps.

    ``adversarial=False`` drops the domain loss entirely (classification
    only; the register is never touched). ``weight_mode`` selects how the
    domain loss weighs samples: ``"margin"`` is the register-based scheme
    described in the module docstring, ``"ones"`` forces every weight to 1,
    which turns the run into plain unweighted adversarial adaptation while
    leaving every other code path identical.
    """
    problems = hp.violations()
    if problems:
        raise ValueError("; ".join(problems))
    if weight_mode not in ("margin", "ones"):
        raise ValueError(f"unknown weight_mode {weight_mode!r}")
    _check_datasets(datasets, partition)

    n_classes = partition.n_source_classes
    in_dim = datasets[0].features.shape[1]
    feature_net, classifier, discriminator = _build_nets(hp, in_dim, n_classes)
    register = TargetMarginRegister(n_classes)
    masks = membership_masks(partition)
    common_mask = masks.common[:n_classes]

    batch_seed = int(np.random.SeedSequence(hp.seed, spawn_key=(200,)).generate_state(1)[0])
    batches = batch_iterator(datasets, hp.batch_size, batch_seed)

    trace: list[LossReport] = []
    for step in range(hp.max_steps):
        batch = next(batches)
        src, tgt = batch[:-1], batch[-1]
        tape = Tape()

        feats_s, logits_s = [], []
        for b in src:
            f = l2_normalize(forward_mlp(feature_net, b.features, tape), tape)
            feats_s.append(f)
            logits_s.append(forward_mlp(classifier, f, tape))
        feat_t = l2_normalize(forward_mlp(feature_net, tgt.features, tape), tape)

        # detached predictions drive margins, the gate, and all weights
        probs_t = softmax(mlp_apply(classifier, feat_t.data))
        pseudo, margins = batch_margins(probs_t)
        errors = tuple(
            float((lg.data.argmax(axis=1) != b.labels).mean())
            for lg, b in zip(logits_s, src)
        )

        updated = False
        if adversarial and max(errors) < hp.epsilon:
            vec, present = margin_vector(probs_t)
            register.update(vec, present)
            updated = True

        e_g = classification_loss(logits_s, [b.labels for b in src], tape)

        if adversarial:
            if weight_mode == "margin":
                raw_ws = [register.values[b.labels] for b in src]
                raw_wt = margins * register.values[pseudo]
            else:
                raw_ws = [np.ones(len(b.features)) for b in src]
                raw_wt = np.ones(len(tgt.features))
            ws = _normalize_jointly(raw_ws)
            wt = normalize_weights(raw_wt)
            lam = grl_lambda(step, hp.max_steps, hp.grl_max_lambda, hp.grl_gamma)
            d_src = [
                forward_mlp(discriminator, grad_reverse(f, lam, tape), tape)
                for f in feats_s
            ]
            d_tgt = forward_mlp(discriminator, grad_reverse(feat_t, lam, tape), tape)
            e_d = domain_loss(d_src, ws, d_tgt, wt, tape)
        else:
            raw_ws = [np.zeros(len(b.features)) for b in src]
            raw_wt = np.zeros(len(tgt.features))
            e_d = Value(np.zeros((1, 1)))

        eg_val, ed_val = float(e_g.data[0, 0]), float(e_d.data[0, 0])
        if not (math.isfinite(eg_val) and math.isfinite(ed_val)):
            raise TrainingDiverged(step, trace[-1] if trace else None)

        total = scalar_sum([e_g, e_d], tape=tape)
        run_backward(tape, total)
        sgd_step(feature_net, hp.lr_features, hp.weight_decay)
        sgd_step(classifier, hp.lr_classifier, hp.weight_decay)
        if adversarial:
            # outside the graph in classification-only runs; stepping it
            # there would still apply weight decay
            sgd_step(discriminator, hp.lr_discriminator, hp.weight_decay)

        all_ws = np.concatenate(raw_ws)
        all_labels = np.concatenate([b.labels for b in src])
        in_common = common_mask[all_labels]
        trace.append(
            LossReport(
                step=step,
                class_loss=eg_val,
                domain_loss=ed_val,
                source_errors=errors,
                mean_weight_common=float(all_ws[in_common].mean()) if in_common.any() else 0.0,
                mean_weight_private=float(all_ws[~in_common].mean()) if (~in_common).any() else 0.0,
                mean_weight_target=float(np.asarray(raw_wt).mean()),
                tmr_updated=updated,
            )
        )

    return TrainResult(feature_net, classifier, discriminator, register, trace)


def extract_features(feature_net: Mlp, x: np.ndarray) -> np.ndarray:
    """Unit-norm features as consumed by the classifier and discriminator."""
    return l2_normalize(forward_mlp(feature_net, np.asarray(x, dtype=np.float64))).data


def predict_classes(feature_net: Mlp, classifier: Mlp, x: np.ndarray, w0: float) -> np.ndarray:
    """Batch inference: argmax class where the margin clears w0, else UNKNOWN."""
    probs = softmax(mlp_apply(classifier, extract_features(feature_net, x)))
    pseudo, margins = batch_margins(probs)
    return np.where(margins >= w0, pseudo, UNKNOWN)


def infer(feature_net: Mlp, classifier: Mlp, x, w0: float) -> int:
    """Single-sample inference; the boundary margin == w0 counts as known."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("infer expects a single feature vector")
    return int(predict_classes(feature_net, classifier, x[None, :], w0)[0])
