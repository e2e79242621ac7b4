"""Desk-scale transformer encoder classifier with prunable layers.

Twelve pre-norm encoder layers over learned token + position embeddings.
A pruned layer is an identity wrapper: it contributes nothing to forward
and nothing to the parameter count. Pre-norm residuals make a layer whose
attention and FFN outputs are zero an exact identity, which is what the
pruning equivalence checks rely on.

The classifier head reads the first token position (the corpus generator
reserves a BOS token there), so the model has to move evidence across the
sequence through attention; that keeps layer pruning consequential instead
of saturating on bag-of-words shortcuts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .tensor import (
    Tensor,
    add,
    backward,
    cross_entropy,
    embedding,
    gelu,
    layernorm,
    matmul,
    no_grad,
    reshape,
    scale,
    softmax,
    token_at,
    transpose,
    zero_grads,
)


class ModelError(Exception):
    pass


class CheckpointError(ModelError):
    pass


ATTENTION_MASK_BIAS = -1e30  # exp() underflows to exactly 0 for masked keys


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    max_seq_len: int = 32
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    n_layers: int = 12
    n_classes: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ModelError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_layers < 2:
            raise ModelError(f"n_layers must be >= 2, got {self.n_layers}")


# per-layer tensors in declaration order, (suffix, shape function)
_LAYER_TENSORS = (
    ("ln1.g", lambda c: (c.d_model,)),
    ("ln1.b", lambda c: (c.d_model,)),
    ("wq", lambda c: (c.d_model, c.d_model)),
    ("bq", lambda c: (c.d_model,)),
    ("wk", lambda c: (c.d_model, c.d_model)),
    ("bk", lambda c: (c.d_model,)),
    ("wv", lambda c: (c.d_model, c.d_model)),
    ("bv", lambda c: (c.d_model,)),
    ("wo", lambda c: (c.d_model, c.d_model)),
    ("bo", lambda c: (c.d_model,)),
    ("ln2.g", lambda c: (c.d_model,)),
    ("ln2.b", lambda c: (c.d_model,)),
    ("w1", lambda c: (c.d_model, c.d_ff)),
    ("b1", lambda c: (c.d_ff,)),
    ("w2", lambda c: (c.d_ff, c.d_model)),
    ("b2", lambda c: (c.d_model,)),
)

_WEIGHT_MATRIX_SUFFIXES = ("wq", "wk", "wv", "wo", "w1", "w2")


def _tensor_manifest(config: ModelConfig):
    """All (name, shape) pairs in declaration order, pruning ignored."""
    out = [
        ("emb.tok", (config.vocab_size, config.d_model)),
        ("emb.pos", (config.max_seq_len, config.d_model)),
        ("emb.ln.g", (config.d_model,)),
        ("emb.ln.b", (config.d_model,)),
    ]
    for layer in range(config.n_layers):
        for suffix, shape_fn in _LAYER_TENSORS:
            out.append((f"layer{layer:02d}.{suffix}", shape_fn(config)))
    out.extend(
        [
            ("final_ln.g", (config.d_model,)),
            ("final_ln.b", (config.d_model,)),
            ("cls.w", (config.d_model, config.n_classes)),
            ("cls.b", (config.n_classes,)),
        ]
    )
    return out


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    draw = rng.normal(0.0, std, size=shape)
    return np.clip(draw, -2.0 * std, 2.0 * std)


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, Tensor]
    prune_mask: list[bool]

    def live_layers(self) -> list[int]:
        return [i for i, pruned in enumerate(self.prune_mask) if not pruned]

    def layer_params(self, layer: int) -> dict[str, Tensor]:
        prefix = f"layer{layer:02d}."
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def layer_weight_matrices(self, layer: int) -> np.ndarray:
        """Attention + FFN matrices of one layer, flattened and concatenated.

        Biases and layernorm parameters are excluded (they are not part of
        the weight signals).
        """
        prefix = f"layer{layer:02d}."
        return np.concatenate(
            [self.params[prefix + s].data.ravel() for s in _WEIGHT_MATRIX_SUFFIXES]
        )

    def copy(self) -> "ModelState":
        params = {
            name: Tensor(t.data.copy(), requires_grad=True) for name, t in self.params.items()
        }
        return ModelState(self.config, params, list(self.prune_mask))


def init_model(config: ModelConfig) -> ModelState:
    """Fresh random model: truncated-normal weights (sigma 0.02), zero biases,
    unit layernorm affines."""
    rng = np.random.default_rng(config.seed)
    params: dict[str, Tensor] = {}
    for name, shape in _tensor_manifest(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("g",):
            data = np.ones(shape)
        elif leaf in ("b", "bq", "bk", "bv", "bo", "b1", "b2"):
            data = np.zeros(shape)
        else:
            data = _trunc_normal(rng, shape)
        params[name] = Tensor(data, requires_grad=True)
    return ModelState(config, params, [False] * config.n_layers)


@dataclass
class LayerCaches:
    """Per-layer activations and attention captured during one forward pass.

    activations[l]: rows are the layer's output at unmasked token positions,
    flattened over (batch, position); sample_index[l] maps each row back to
    its sample. attention[l] has shape (batch, heads, seq, seq).
    """

    activations: dict[int, np.ndarray] = field(default_factory=dict)
    sample_index: dict[int, np.ndarray] = field(default_factory=dict)
    attention: dict[int, np.ndarray] = field(default_factory=dict)
    mask: np.ndarray | None = None
    labels: np.ndarray | None = None


def forward(model: ModelState, batch, capture: bool = False):
    """Run the classifier; returns (logits Tensor, LayerCaches | None).

    Pruned layers are exact identities on their input. With capture set,
    activation and attention caches are populated for every live layer.
    """
    cfg = model.config
    p = model.params
    ids = np.asarray(batch.ids)
    mask = np.asarray(batch.mask)
    n_batch, seq = ids.shape
    if seq != cfg.max_seq_len:
        raise ModelError(f"batch seq length {seq} != max_seq_len {cfg.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ModelError(
            f"token id out of range [0, {cfg.vocab_size}): min={ids.min()}, max={ids.max()}"
        )

    x = embedding(p["emb.tok"], ids)
    pos = embedding(p["emb.pos"], np.arange(seq))
    x = add(x, pos)
    x = layernorm(x, p["emb.ln.g"], p["emb.ln.b"])

    # additive bias: 0 on real keys, -1e30 on padding keys
    bias = np.where(mask[:, None, None, :] > 0, 0.0, ATTENTION_MASK_BIAS)
    att_bias = Tensor(bias)

    caches = LayerCaches(mask=mask.copy(), labels=np.asarray(batch.labels).copy()) if capture else None
    valid = mask.reshape(-1) > 0
    row_sample = np.repeat(np.arange(n_batch), seq)[valid]

    n_heads = cfg.n_heads
    d_head = cfg.d_model // n_heads
    for layer in model.live_layers():
        pre = f"layer{layer:02d}."
        h = layernorm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])

        def heads(t):
            t = reshape(t, (n_batch, seq, n_heads, d_head))
            return transpose(t, (0, 2, 1, 3))

        # the 1/sqrt(d_head) scale is folded into q (smaller array than scores)
        q = scale(heads(add(matmul(h, p[pre + "wq"]), p[pre + "bq"])), 1.0 / np.sqrt(d_head))
        k = heads(add(matmul(h, p[pre + "wk"]), p[pre + "bk"]))
        v = heads(add(matmul(h, p[pre + "wv"]), p[pre + "bv"]))
        scores = matmul(q, transpose(k, (0, 1, 3, 2)))
        att = softmax(add(scores, att_bias))
        ctx = transpose(matmul(att, v), (0, 2, 1, 3))
        ctx = reshape(ctx, (n_batch, seq, cfg.d_model))
        x = add(x, add(matmul(ctx, p[pre + "wo"]), p[pre + "bo"]))

        h2 = layernorm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        f = add(matmul(gelu(add(matmul(h2, p[pre + "w1"]), p[pre + "b1"])), p[pre + "w2"]), p[pre + "b2"])
        x = add(x, f)

        if capture:
            flat = x.data.reshape(-1, cfg.d_model)
            caches.activations[layer] = flat[valid].copy()
            caches.sample_index[layer] = row_sample.copy()
            caches.attention[layer] = att.data.copy()

    xf = layernorm(x, p["final_ln.g"], p["final_ln.b"])
    pooled = token_at(xf, 0)
    logits = add(matmul(pooled, p["cls.w"]), p["cls.b"])
    return logits, caches


def loss_and_grads(model: ModelState, batch, capture: bool = False):
    """Mean cross-entropy loss plus gradients grouped by live layer.

    Returns (loss value, {layer: {param name: gradient array}}, caches).
    caches is None unless capture is set. Pruned layers have no bundle;
    asking signals for one is an error upstream.
    """
    if len(batch) == 0:
        raise ModelError("loss_and_grads: empty batch")
    zero_grads(model.params)
    logits, caches = forward(model, batch, capture=capture)
    loss = cross_entropy(logits, np.asarray(batch.labels))
    backward(loss)
    bundles: dict[int, dict[str, np.ndarray]] = {}
    for layer in model.live_layers():
        bundles[layer] = {
            name: t.grad_or_zero().copy() for name, t in model.layer_params(layer).items()
        }
    return float(loss.data), bundles, caches


def evaluate_accuracy(model: ModelState, batches) -> float:
    correct = 0
    total = 0
    with no_grad():
        for batch in batches:
            logits, _ = forward(model, batch)
            pred = logits.data.argmax(axis=1)
            correct += int((pred == np.asarray(batch.labels)).sum())
            total += len(batch)
    if total == 0:
        raise ModelError("evaluate_accuracy: no samples")
    return correct / total


# ---------------------------------------------------------------------------
# parameter accounting


def param_count(config: ModelConfig, prune_mask=None) -> int:
    """Exact trainable-parameter count, excluding pruned layers."""
    manifest = _tensor_manifest(config)
    if prune_mask is None:
        prune_mask = [False] * config.n_layers
    pruned = {f"layer{i:02d}." for i, m in enumerate(prune_mask) if m}
    total = 0
    for name, shape in manifest:
        if any(name.startswith(pre) for pre in pruned):
            continue
        total += int(np.prod(shape))
    return total


def per_layer_param_count(config: ModelConfig) -> int:
    return param_count(config) - param_count(config, [True] + [False] * (config.n_layers - 1))


def bert_base_reference_count(n_classes: int = 10, n_pruned: int = 0) -> int:
    """Parameter-count formula evaluated at BERT-base dimensions.

    vocab 30522, hidden 768, 12 layers, FFN 3072, 512 positions, 2 token
    types, pooler, classification head.
    """
    v, d, ff, layers, pos, types = 30522, 768, 3072, 12, 512, 2
    emb = v * d + pos * d + types * d + 2 * d
    per_layer = 4 * (d * d + d) + 2 * d + (d * ff + ff) + (ff * d + d) + 2 * d
    pooler = d * d + d
    head = d * n_classes + n_classes
    return emb + (layers - n_pruned) * per_layer + pooler + head


def bert_base_per_layer_count() -> int:
    return bert_base_reference_count() - bert_base_reference_count(n_pruned=1)


def size_gb(count: int) -> float:
    """Model size in GB at 32-bit weights."""
    if count < 0:
        raise ModelError(f"negative parameter count: {count}")
    return count * 4 / 2**30


# ---------------------------------------------------------------------------
# checkpoint io: one JSON header line, then raw little-endian float64 tensors
# in declaration order


def save_checkpoint(model: ModelState, path) -> None:
    manifest = _tensor_manifest(model.config)
    header = {
        "format": "prunefuse-ckpt-v1",
        "config": asdict(model.config),
        "prune_mask": [bool(b) for b in model.prune_mask],
        "tensors": [[name, list(shape)] for name, shape in manifest],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for name, _ in manifest:
            fh.write(model.params[name].data.astype("<f8").tobytes())


def load_checkpoint(path) -> ModelState:
    try:
        with open(path, "rb") as fh:
            header_line = fh.readline()
            header = json.loads(header_line.decode("utf-8"))
            if header.get("format") != "prunefuse-ckpt-v1":
                raise CheckpointError(f"{path}: not a prunefuse checkpoint")
            config = ModelConfig(**header["config"])
            params: dict[str, Tensor] = {}
            for name, shape in header["tensors"]:
                shape = tuple(shape)
                n = int(np.prod(shape))
                raw = fh.read(n * 8)
                if len(raw) != n * 8:
                    raise CheckpointError(f"{path}: truncated tensor data for '{name}'")
                params[name] = Tensor(
                    np.frombuffer(raw, dtype="<f8").reshape(shape).copy(), requires_grad=True
                )
            trailing = fh.read(1)
            if trailing:
                raise CheckpointError(f"{path}: trailing bytes after declared tensors")
            mask = [bool(b) for b in header["prune_mask"]]
            if len(mask) != config.n_layers:
                raise CheckpointError(f"{path}: prune mask length {len(mask)} != n_layers")
            return ModelState(config, params, mask)
    except CheckpointError:
        raise
    except (OSError, ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: cannot load checkpoint ({exc})") from exc


def make_zero_effect_layer(model: ModelState, layer: int) -> None:
    """Zero a layer's attention/FFN weights and biases in place.

    With pre-norm residuals the layer then computes x + 0 + 0, an exact
    identity, so pruning it must leave logits bit-identical.
    """
    prefix = f"layer{layer:02d}."
    for suffix, _ in _LAYER_TENSORS:
        if suffix.endswith(".g"):
            continue  # layernorm scale stays at identity-affine
        model.params[prefix + suffix].data[:] = 0.0
