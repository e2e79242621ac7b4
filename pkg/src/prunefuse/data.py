"""Seeded synthetic text-classification corpora and fixed-width tokenization.

Label structure is a pair conjunction: classes draw their two trigger
tokens from a shared pool of n_classes + 1 singles, class c owning the
pair (pool[c], pool[c + 1]). Adjacent classes share a single, and filler
positions carry pool singles that never complete a second pair, so no
linear bag-of-words readout separates the classes; the model has to detect
the completed pair. That keeps layer pruning consequential instead of
saturating on token counts.

A sample starts with a BOS token (the classifier reads position 0). With
probability keyword_strength the class pair is planted at two random
positions; otherwise nothing is planted and the label is unrecoverable, so
keyword_strength controls Bayes accuracy. Every other position holds a
pair-safe distractor single with probability
keyword_strength * (1 - noise_rate), else a noise token.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD_ID = 0
BOS_ID = 1
MIN_LEN = 8
N_SPECIAL = 2  # pad, bos


class DataError(Exception):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    name: str = "desk"
    n_classes: int = 10
    vocab_size: int = 256
    n_train: int = 1024
    n_val: int = 384
    n_test: int = 384
    keyword_strength: float = 0.85
    noise_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.n_classes <= 20:
            raise DataError(f"n_classes must be in [2, 20], got {self.n_classes}")
        if not (0.0 <= self.keyword_strength <= 1.0 and 0.0 <= self.noise_rate <= 1.0):
            raise DataError("keyword_strength and noise_rate must be in [0, 1]")
        needed = N_SPECIAL + pool_size(self.n_classes) + 1
        if self.vocab_size < needed:
            raise DataError(
                f"vocab_size={self.vocab_size} too small: need >= {needed} "
                f"({N_SPECIAL} special + {pool_size(self.n_classes)} pool singles + noise)"
            )


Sample = tuple[tuple[int, ...], int]  # (token ids, label)


@dataclass
class CorpusSplits:
    spec: DatasetSpec
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]


def pool_size(n_classes: int) -> int:
    return n_classes + 1


def class_pair(label: int) -> tuple[int, int]:
    """The two trigger tokens whose joint presence identifies the class."""
    return (N_SPECIAL + label, N_SPECIAL + label + 1)


def _balanced_labels(n: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform class histogram within one sample, order shuffled."""
    base = n // n_classes
    labels = np.repeat(np.arange(n_classes), base)
    extra = rng.permutation(n_classes)[: n - base * n_classes]
    labels = np.concatenate([labels, extra])
    rng.shuffle(labels)
    return labels.astype(np.int64)


def _completes_foreign_pair(token: int, present: set[int], own: tuple[int, int], n_classes: int) -> bool:
    for c in range(n_classes):
        pair = class_pair(c)
        if pair == own:
            continue
        other = pair[1] if token == pair[0] else pair[0] if token == pair[1] else None
        if other is not None and other in present:
            return True
    return False


def generate_corpus(spec: DatasetSpec) -> CorpusSplits:
    """Deterministic train/val/test splits; the three sample sets are
    pairwise disjoint by construction (collision resampling)."""
    rng = np.random.default_rng(spec.seed)
    pool_lo = N_SPECIAL
    pool_hi = N_SPECIAL + pool_size(spec.n_classes)
    noise_lo = pool_hi
    p_single = spec.keyword_strength * (1.0 - spec.noise_rate)
    seen: set[tuple[int, ...]] = set()

    def draw(label: int) -> Sample:
        own = class_pair(label)
        for _ in range(10_000):
            length = int(rng.integers(MIN_LEN, 33))
            toks = [0] * length
            toks[0] = BOS_ID
            body = list(range(1, length))
            plant = rng.random() < spec.keyword_strength
            present: set[int] = set()
            planted: set[int] = set()
            if plant:
                spots = rng.choice(len(body), size=2, replace=False)
                toks[body[spots[0]]] = own[0]
                toks[body[spots[1]]] = own[1]
                present.update(own)
                planted.update((body[spots[0]], body[spots[1]]))
            for pos in body:
                if pos in planted:
                    continue
                if rng.random() < p_single:
                    for _ in range(8):  # pair-safe distractor single
                        cand = int(rng.integers(pool_lo, pool_hi))
                        if not _completes_foreign_pair(cand, present, own if plant else (-1, -1), spec.n_classes):
                            toks[pos] = cand
                            present.add(cand)
                            break
                    else:
                        toks[pos] = int(rng.integers(noise_lo, spec.vocab_size))
                else:
                    toks[pos] = int(rng.integers(noise_lo, spec.vocab_size))
            key = tuple(toks)
            if key not in seen:
                seen.add(key)
                return key, label
        raise DataError(
            f"could not draw a fresh sample for class {label}; spec too constrained"
        )

    splits = []
    for n in (spec.n_train, spec.n_val, spec.n_test):
        labels = _balanced_labels(n, spec.n_classes, rng)
        splits.append([draw(int(lbl)) for lbl in labels])
    return CorpusSplits(spec, *splits)


def keyword_count_label(tokens, n_classes: int) -> int:
    """Brute-force pair-conjunction classifier: the class whose two trigger
    tokens are both present, ties to the lowest class."""
    present = set(tokens)
    best, best_score = 0, -1
    for c in range(n_classes):
        a, b = class_pair(c)
        score = int(a in present) + int(b in present)
        if score > best_score:
            best, best_score = c, score
    return best


@dataclass
class TokenBatch:
    ids: np.ndarray          # (batch, max_len) int64
    mask: np.ndarray         # (batch, max_len), 1 on real tokens
    labels: np.ndarray       # (batch,) int64
    degenerate_rows: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return self.ids.shape[0]


def tokenize_batch(samples, max_len: int = 32) -> TokenBatch:
    """Pad/truncate each sample to exactly max_len; truncation keeps the
    first max_len tokens. Empty sequences become all-pad rows and are
    flagged degenerate."""
    n = len(samples)
    ids = np.full((n, max_len), PAD_ID, dtype=np.int64)
    mask = np.zeros((n, max_len), dtype=np.int64)
    labels = np.empty(n, dtype=np.int64)
    degenerate = []
    for i, (tokens, label) in enumerate(samples):
        tokens = tuple(tokens)[:max_len]
        if not tokens:
            degenerate.append(i)
        ids[i, : len(tokens)] = tokens
        mask[i, : len(tokens)] = 1
        labels[i] = label
    return TokenBatch(ids, mask, labels, degenerate)


def batches_of(samples, batch_size: int, max_len: int = 32) -> list[TokenBatch]:
    return [
        tokenize_batch(samples[i : i + batch_size], max_len)
        for i in range(0, len(samples), batch_size)
    ]


# ---------------------------------------------------------------------------
# corpus export/import: one file per split, "label id id id ..." per line


def export_corpus(splits: CorpusSplits, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for split_name in ("train", "val", "test"):
        with open(out_dir / f"{split_name}.txt", "w", encoding="utf-8") as fh:
            for tokens, label in getattr(splits, split_name):
                fh.write(f"{label} {' '.join(str(t) for t in tokens)}\n")


def import_split(path) -> list[Sample]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                label = int(parts[0])
                tokens = tuple(int(t) for t in parts[1:])
            except ValueError as exc:
                raise DataError(f"{path}:{line_no}: malformed record") from exc
            out.append((tokens, label))
    return out
