"""The 12 per-layer scalar signals and the layer-by-signal feature matrix.

Canonical column order (fixed everywhere: CSV export, fusion features,
importance tables):

    inhibition        mean activation value
    intensity         mean absolute activation
    energy            mean squared activation
    task_mi           mutual information between activation summaries and labels
    flow_mi           variance of a layer's summary explained by the next layer's
    grad_magnitude    mean absolute loss gradient over the layer's parameters
    grad_fisher       mean squared loss gradient (batch-level Fisher proxy)
    weight_norm       L2 norm of the layer's concatenated weight matrices
    weight_sparsity   fraction of near-zero weights (|w| <= 1e-8)
    weight_entropy    entropy of the normalized absolute-weight distribution
    attention_weight  mean attention score over unmasked (query, key) pairs
    attention_entropy summed attention entropy per head, averaged over heads
                      and samples
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelState, loss_and_grads

SIGNAL_NAMES = (
    "inhibition",
    "intensity",
    "energy",
    "task_mi",
    "flow_mi",
    "grad_magnitude",
    "grad_fisher",
    "weight_norm",
    "weight_sparsity",
    "weight_entropy",
    "attention_weight",
    "attention_entropy",
)

SPARSITY_THRESHOLD = 1e-8
ENTROPY_EPS = 1e-12
MI_BINS = 8


class SignalError(Exception):
    pass


@dataclass(frozen=True)
class SignalVector:
    inhibition: float
    intensity: float
    energy: float
    task_mi: float
    flow_mi: float
    grad_magnitude: float
    grad_fisher: float
    weight_norm: float
    weight_sparsity: float
    weight_entropy: float
    attention_weight: float
    attention_entropy: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in SIGNAL_NAMES])


@dataclass
class SignalMatrix:
    """One row per live layer (index order), columns in SIGNAL_NAMES order."""

    layer_indices: list[int]
    values: np.ndarray  # (n_layers, 12)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, SIGNAL_NAMES.index(name)]

    def row(self, layer: int) -> np.ndarray:
        return self.values[self.layer_indices.index(layer)]

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("layer," + ",".join(SIGNAL_NAMES) + "\n")
            for idx, row in zip(self.layer_indices, self.values):
                fh.write(f"{idx}," + ",".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------------------
# activation signals


def activation_signals(acts: np.ndarray) -> dict[str, float]:
    """inhibition = mean, intensity = mean(|.|), energy = mean(.^2)."""
    acts = np.asarray(acts, dtype=np.float64)
    if acts.size == 0:
        raise SignalError("activation_signals: empty activation matrix")
    if not np.all(np.isfinite(acts)):
        raise SignalError("activation_signals: non-finite activations")
    return {
        "inhibition": float(acts.mean()),
        "intensity": float(np.abs(acts).mean()),
        "energy": float((acts * acts).mean()),
    }


# ---------------------------------------------------------------------------
# mutual-information signals


def per_sample_summaries(acts: np.ndarray, sample_index: np.ndarray | None, n_samples: int | None = None) -> np.ndarray:
    """Scalar summary per sample: mean of the sample's activation block."""
    acts = np.asarray(acts, dtype=np.float64)
    if sample_index is None:
        return acts.reshape(acts.shape[0], -1).mean(axis=1)
    sample_index = np.asarray(sample_index)
    n = int(sample_index.max()) + 1 if n_samples is None else n_samples
    row_means = acts.mean(axis=1)
    sums = np.bincount(sample_index, weights=row_means, minlength=n)
    counts = np.bincount(sample_index, minlength=n)
    if np.any(counts == 0):
        raise SignalError("per_sample_summaries: sample with no activation rows")
    return sums / counts


def _quantile_bins(s: np.ndarray, bins: int) -> np.ndarray:
    edges = np.quantile(s, [j / bins for j in range(1, bins)])
    edges = np.unique(edges)
    return np.searchsorted(edges, s, side="left")


def task_relevance_mi(acts: np.ndarray, labels: np.ndarray, sample_index: np.ndarray | None = None,
                      bins: int = MI_BINS) -> tuple[float, bool]:
    """Plug-in discrete MI (nats) between quantile-binned per-sample activation
    summaries and labels. Returns (mi, degenerate); a constant summary puts
    every sample in one bin and yields (0.0, True)."""
    labels = np.asarray(labels)
    summaries = per_sample_summaries(acts, sample_index, len(labels))
    if len(summaries) != len(labels):
        raise SignalError(
            f"task_relevance_mi: {len(summaries)} summaries vs {len(labels)} labels"
        )
    if len(labels) < 16:
        raise SignalError("task_relevance_mi: need at least 16 samples")
    if len(np.unique(labels)) < 2:
        raise SignalError("task_relevance_mi: need at least 2 distinct labels")
    binned = _quantile_bins(summaries, bins)
    if len(np.unique(binned)) < 2:
        return 0.0, True
    return _discrete_mi(binned, labels), False


def _discrete_mi(a: np.ndarray, y: np.ndarray) -> float:
    n = len(a)
    a_vals, a_idx = np.unique(a, return_inverse=True)
    y_vals, y_idx = np.unique(y, return_inverse=True)
    joint = np.zeros((len(a_vals), len(y_vals)))
    np.add.at(joint, (a_idx, y_idx), 1.0)
    joint /= n
    pa = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    mi = float((joint[nz] * np.log(joint[nz] / (pa @ py)[nz])).sum())
    return max(mi, 0.0)


def flow_relevance_mi(acts_l: np.ndarray, acts_next: np.ndarray,
                      sample_index_l: np.ndarray | None = None,
                      sample_index_next: np.ndarray | None = None) -> float:
    """Var(s_l) minus the residual variance of regressing s_l on s_{l+1},
    clamped at zero. s are per-sample scalar summaries."""
    s_l = per_sample_summaries(acts_l, sample_index_l)
    s_next = per_sample_summaries(acts_next, sample_index_next)
    if len(s_l) != len(s_next):
        raise SignalError(f"flow_relevance_mi: sample counts differ ({len(s_l)} vs {len(s_next)})")
    if len(s_l) < 3:
        raise SignalError("flow_relevance_mi: need at least 3 samples")
    var_l = float(s_l.var())
    if var_l == 0.0:
        return 0.0
    var_next = float(s_next.var())
    if var_next == 0.0:
        return 0.0
    slope = float(np.cov(s_l, s_next, bias=True)[0, 1]) / var_next
    resid = s_l - s_l.mean() - slope * (s_next - s_next.mean())
    return max(var_l - float(resid.var()), 0.0)


# ---------------------------------------------------------------------------
# gradient signals


def gradient_signals(grad_batches) -> dict[str, float]:
    """grad_magnitude = mean |g| over parameters and batches; grad_fisher =
    mean over parameters of the batch-average squared gradient.

    `grad_batches` is a sequence with one flattened gradient vector per batch
    (all of one layer's parameters concatenated).
    """
    vecs = [np.asarray(g, dtype=np.float64).ravel() for g in grad_batches]
    if not vecs:
        raise SignalError("gradient_signals: no gradient batches")
    if len({v.size for v in vecs}) != 1:
        raise SignalError("gradient_signals: batches disagree on parameter count")
    stacked = np.stack(vecs)
    return {
        "grad_magnitude": float(np.abs(stacked).mean()),
        "grad_fisher": float((stacked * stacked).mean()),
    }


# ---------------------------------------------------------------------------
# weight signals


def weight_signals(weights: np.ndarray) -> tuple[dict[str, float], bool]:
    """L2 norm, near-zero fraction, and abs-distribution entropy of a layer's
    concatenated weight matrices. All-zero weights are degenerate:
    (norm 0, sparsity 1, entropy 0, flag True)."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size == 0:
        raise SignalError("weight_signals: empty weight vector")
    aw = np.abs(w)
    norm = float(np.sqrt((w * w).sum()))
    sparsity = float((aw <= SPARSITY_THRESHOLD).mean())
    l1 = aw.sum()
    if l1 == 0.0:
        return {"weight_norm": 0.0, "weight_sparsity": 1.0, "weight_entropy": 0.0}, True
    p = aw / l1
    # the epsilon inside the log pushes exact point masses to -1e-12; clamp
    entropy = max(float(-(p * np.log(p + ENTROPY_EPS)).sum()), 0.0)
    return {"weight_norm": norm, "weight_sparsity": sparsity, "weight_entropy": entropy}, False


# ---------------------------------------------------------------------------
# attention signals


def attention_signals(alpha: np.ndarray, mask: np.ndarray) -> dict[str, float]:
    """Mean attention score and summed attention entropy over unmasked pairs.

    alpha: (batch, heads, seq, seq) attention probabilities; mask: (batch,
    seq) with 1 on real tokens. The mean uses the actual unmasked pair count
    per sample, so with no padding it equals 1/n exactly. Entropy follows
    the sum-over-queries form: per head, -sum_{i,j} a log(a + eps), averaged
    over heads then over samples.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    mask = np.asarray(mask)
    if alpha.ndim != 4:
        raise SignalError(f"attention_signals: expected (batch, heads, seq, seq), got {alpha.shape}")
    n_batch, n_heads, seq, seq2 = alpha.shape
    if seq != seq2 or mask.shape != (n_batch, seq):
        raise SignalError(f"attention_signals: inconsistent shapes {alpha.shape} vs {mask.shape}")
    weights = []
    entropies = []
    for b in range(n_batch):
        valid = np.flatnonzero(mask[b] > 0)
        n = len(valid)
        if n == 0:
            continue
        sub = alpha[b][:, valid[:, None], valid[None, :]]  # (heads, n, n)
        row_sums = sub.sum(axis=2)
        if np.abs(row_sums - 1.0).max() > 1e-6:
            raise SignalError(
                f"attention_signals: sample {b} has non-stochastic rows "
                f"(max deviation {np.abs(row_sums - 1.0).max():.3e})"
            )
        weights.append(sub.sum() / (n_heads * n * n))
        entropies.append(max(float(-(sub * np.log(sub + ENTROPY_EPS)).sum()) / n_heads, 0.0))
    if not weights:
        raise SignalError("attention_signals: every sample fully masked")
    return {
        "attention_weight": float(np.mean(weights)),
        "attention_entropy": float(np.mean(entropies)),
    }


# ---------------------------------------------------------------------------
# the full feature matrix


def build_signal_matrix(model: ModelState, probe_batches) -> SignalMatrix:
    """One SignalVector per live layer, averaged over the probe batches.

    Activation, MI, and attention signals are computed per batch and
    averaged; gradient signals average squared/absolute gradients across
    batches as their defining formulas do; weight signals do not depend on
    the batch and are computed once.
    """
    probe_batches = list(probe_batches)
    if not probe_batches:
        raise SignalError("build_signal_matrix: no probe batches")
    live = model.live_layers()
    per_batch: dict[int, list[np.ndarray]] = {l: [] for l in live}
    grad_vecs: dict[int, list[np.ndarray]] = {l: [] for l in live}

    for batch in probe_batches:
        _, bundles, caches = loss_and_grads(model, batch, capture=True)
        for pos, layer in enumerate(live):
            acts = caches.activations[layer]
            sample_idx = caches.sample_index[layer]
            act = activation_signals(acts)
            task, _ = task_relevance_mi(acts, caches.labels, sample_idx)
            next_layer = live[pos + 1] if pos + 1 < len(live) else layer
            flow = flow_relevance_mi(
                acts,
                caches.activations[next_layer],
                sample_idx,
                caches.sample_index[next_layer],
            )
            att = attention_signals(caches.attention[layer], caches.mask)
            vals = {**act, "task_mi": task, "flow_mi": flow, **att}
            per_batch[layer].append(
                np.array([vals.get(n, 0.0) for n in SIGNAL_NAMES])
            )
            grad_vecs[layer].append(
                np.concatenate([bundles[layer][k].ravel() for k in sorted(bundles[layer])])
            )

    rows = []
    for layer in live:
        mean_vals = np.stack(per_batch[layer]).mean(axis=0)
        grads = gradient_signals(grad_vecs[layer])
        w_sig, _ = weight_signals(model.layer_weight_matrices(layer))
        for name, val in {**grads, **w_sig}.items():
            mean_vals[SIGNAL_NAMES.index(name)] = val
        rows.append(mean_vals)
    return SignalMatrix(list(live), np.stack(rows))


def read_signal_csv(path) -> SignalMatrix:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header != ["layer", *SIGNAL_NAMES]:
            raise SignalError(f"{path}: unexpected signal CSV header")
        indices, rows = [], []
        for line in fh:
            parts = line.strip().split(",")
            indices.append(int(parts[0]))
            rows.append([float(v) for v in parts[1:]])
    return SignalMatrix(indices, np.array(rows))


__all__ = [
    "SIGNAL_NAMES",
    "SignalError",
    "SignalMatrix",
    "SignalVector",
    "activation_signals",
    "attention_signals",
    "build_signal_matrix",
    "flow_relevance_mi",
    "gradient_signals",
    "per_sample_summaries",
    "read_signal_csv",
    "task_relevance_mi",
    "weight_signals",
]
