"""Optimization: Adam, shape-grouped batching, and base-model pretraining.

Batches are drawn from shape groups — examples whose (input-shape, target
length) keys match exactly — so every batch stacks into rectangular arrays
with no padding.  A group is picked with probability proportional to its
size, then examples are drawn uniformly with replacement inside it, keeping
the marginal distribution over examples uniform.  All randomness comes from
one splitmix64 stream, so runs are reproducible bit for bit.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import BaseModel, ModelConfig, SegmentedInput
from .rng import SplitMix64, derive_seed

Array = np.ndarray


class Adam:
    """Adam with bias correction, updating tensors in place.

    Moment buffers live in one flat array per moment; gradients are gathered
    into a matching scratch buffer each step (missing gradients count as
    zero) and the update is computed with a handful of whole-buffer numpy
    ops before being scattered back into the parameter tensors.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._order = [p for p in self.params.values() if p.requires_grad]
        self._slices: list[slice] = []
        lo = 0
        for p in self._order:
            self._slices.append(slice(lo, lo + p.data.size))
            lo += p.data.size
        self._m = np.zeros(lo)
        self._v = np.zeros(lo)
        self._g = np.zeros(lo)

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * np.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        g = self._g
        for p, sl in zip(self._order, self._slices):
            if p.requires_grad and p.grad is not None:
                g[sl] = p.grad.ravel()
            else:
                g[sl] = 0.0
        self._m *= b1
        self._m += (1.0 - b1) * g
        self._v *= b2
        self._v += (1.0 - b2) * (g * g)
        update = self._m / (np.sqrt(self._v) + self.eps)
        update *= lr_t
        for p, sl in zip(self._order, self._slices):
            p.data -= update[sl].reshape(p.data.shape)

    def zero_grad(self) -> None:
        for p in self._order:
            p.grad = None


class ShapeGroupedBatcher:
    """Deterministic sampler of rectangular batches.

    ``key_fn`` maps an item to a hashable shape key; items sharing a key can
    be stacked without padding.  Keys are ordered by their sorted position so
    group enumeration never depends on dict insertion order.
    """

    def __init__(self, items: Sequence, key_fn: Callable, batch_size: int,
                 rng: SplitMix64):
        if not items:
            raise ValueError("empty item list")
        self.items = list(items)
        self.batch_size = batch_size
        self.rng = rng
        groups: dict = {}
        for i, item in enumerate(self.items):
            groups.setdefault(key_fn(item), []).append(i)
        self._keys = sorted(groups)
        self._groups = [groups[k] for k in self._keys]
        sizes = np.array([len(g) for g in self._groups], dtype=np.float64)
        self._cum = np.cumsum(sizes / sizes.sum())

    def next(self) -> list:
        u = self.rng.uniform(1)[0]
        gi = int(np.searchsorted(self._cum, u, side="right"))
        gi = min(gi, len(self._groups) - 1)
        group = self._groups[gi]
        picks = self.rng.integers(self.batch_size, 0, len(group))
        return [self.items[group[int(i)]] for i in picks]


def encode_copy_batch(model: BaseModel, xs: Sequence[Sequence[int]]) -> tuple[Tensor, int]:
    """Encode a batch of equal-length bare inputs (single segment, id 0)."""
    segs = [SegmentedInput(segments=[(list(x), 0)]) for x in xs]
    rows = model.embed_batch(segs)
    length = len(xs[0])
    return model.encode(rows, len(xs), length), length


def copy_accuracy(model: BaseModel, examples: Sequence) -> float:
    """Teacher-forced token accuracy of the bare model on (x, y) examples.

    Examples are grouped by shape; the result is the position-weighted mean
    over all target positions (EOS included).
    """
    groups: dict = {}
    for ex in examples:
        groups.setdefault((len(ex.x), len(ex.y)), []).append(ex)
    correct = 0.0
    total = 0
    for key in sorted(groups):
        batch = groups[key]
        enc_out, enc_len = encode_copy_batch(model, [ex.x for ex in batch])
        y = np.array([ex.y for ex in batch], dtype=np.int64)
        acc = model.token_accuracy(enc_out, len(batch), enc_len, y)
        n = y.shape[0] * (y.shape[1] + 1)
        correct += acc * n
        total += n
    return correct / total


def pretrain_base(train_corpus: Sequence, heldout_corpus: Sequence,
                  config: ModelConfig, seed: int, steps: int = 1500,
                  lr: float = 1e-3, batch_size: int = 32,
                  log_every: int = 50) -> tuple[BaseModel, dict]:
    """Train the base model on the copy task, evaluate held out, freeze.

    Returns the frozen model and a metrics dict with the loss curve and
    held-out token accuracy.  Raises ``FloatingPointError`` on divergence.
    """
    model = BaseModel(config, seed)
    opt = Adam(model.params, lr=lr)
    batcher = ShapeGroupedBatcher(train_corpus, lambda ex: (len(ex.x), len(ex.y)),
                                  batch_size, SplitMix64(derive_seed(seed, "pretrain/batches")))
    curve: list[tuple[int, float]] = []
    for step in range(steps):
        batch = batcher.next()
        enc_out, enc_len = encode_copy_batch(model, [ex.x for ex in batch])
        y = np.array([ex.y for ex in batch], dtype=np.int64)
        loss = model.sequence_loss(enc_out, len(batch), enc_len, y)
        value = float(loss.data)
        if not np.isfinite(value):
            raise FloatingPointError(f"pretraining diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % log_every == 0 or step == steps - 1:
            curve.append((step, value))
    model.freeze()
    metrics = {
        "heldout_accuracy": copy_accuracy(model, heldout_corpus),
        "final_loss": curve[-1][1],
        "steps": steps,
        "loss_curve": [[s, l] for s, l in curve],
    }
    return model, metrics
