"""Plugin families: separately trained prompts attached to a frozen model.

A plugin carries the trainable parameters for one aspect.  Three families
are supported, differing in where parameters enter the encoder:

* ``prompt``: p continuous rows appended once after the embedded input.
* ``prefix``: per-layer key/value rows prepended inside encoder
  self-attention (no input rows, no constraint segment).  Because a prefix
  has no way to read the constraint text, a prefix plugin is trained for one
  fixed aspect value (``Plugin.value``), mirroring attribute-specific
  prefixes; value selection happens when a combo is assembled.
* ``gated``: input rows like ``prompt`` plus, per encoder layer, additive
  rows P and gate logits G; the attention output at plugin rows is rewritten
  to ``sigmoid(G) * (A + P)``.

Prompt and gated plugins read their aspect's value from a constraint
segment c rendered into the input (one segment per plugin, own segment id,
positions restarting at 1), so a single plugin serves every value of its
aspect.

Combination is concatenation: plugins keep their parameters untouched, their
input rows / prefixes / gates are applied side by side in combo order, and
the frozen base model is shared.  Joint training of several plugins at once
exists only as the supervised reference for interference measurement.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import taskgen
from .autodiff import Tensor
from .model import ActivationTrace, BaseModel, LayerMods, ModelConfig, SegmentedInput
from .optim import Adam, ShapeGroupedBatcher
from .rng import SplitMix64, derive_seed

Array = np.ndarray

FAMILIES = ("prompt", "prefix", "gated")

#: Default probability of muting each plugin key row during training.  A
#: plugin trained alone otherwise monopolizes the attention mass it needs;
#: combining it with others then splits that mass and its effect collapses.
#: Randomly dropping plugin rows from the softmax while training forces the
#: surviving rows to work at the diluted mass levels combination produces.
KEY_DROP = 0.5

#: Fraction of training examples the dropout applies to.  The rest keep all
#: rows, so a plugin stays calibrated for stand-alone use (full attention
#: mass) as well as for combined use (diluted mass).  Training on only one
#: regime breaks the other.
_DROP_MIX = 0.5

#: Default relative parameter noise for single-plugin training (see
#: :func:`joint_train_plugins`).
PARAM_NOISE = 0.0

#: Default decoupled weight decay for single-plugin training (see
#: :func:`joint_train_plugins`).
WEIGHT_DECAY = 0.0

#: Initial value of every gate logit.  0.0 starts the gates half open
#: (sigmoid 0.5); a negative value starts them mostly closed, so training
#: opens only the channels the aspect actually needs.  Weight decay pulls
#: gate logits back toward this resting point rather than toward zero.
GATE_INIT = 0.0

_INIT_STD = 0.02
_JITTER_STD = 0.005


def plugin_param_names(family: str, enc_layers: int) -> list[str]:
    """Serialization-order parameter names for one plugin of a family."""
    if family == "prompt":
        return ["p0"]
    if family == "gated":
        names = ["p0"]
        for j in range(1, enc_layers + 1):
            names.extend((f"p{j}", f"g{j}"))
        return names
    if family == "prefix":
        names = []
        for j in range(1, enc_layers + 1):
            names.extend((f"pk{j}", f"pv{j}"))
        return names
    raise ValueError(f"unknown family {family!r}")


@dataclass
class Plugin:
    """Trainable parameters dedicated to one aspect.

    ``value`` is None for constraint-reading families (prompt, gated) and
    the pinned aspect value for the prefix family.  ``params`` maps the
    family's block names to (p, d) tensors; prefix blocks hold all heads
    side by side (columns h*head_dim:(h+1)*head_dim belong to head h).
    """

    aspect_name: str
    family: str
    params: dict[str, Tensor]
    value: object | None = None

    def trainables(self) -> list[Tensor]:
        return list(self.params.values())

    def label(self) -> str:
        if self.value is None:
            return self.aspect_name
        v = self.value
        vtxt = "+".join(str(t) for t in v) if isinstance(v, list) else str(v)
        return f"{self.aspect_name}={vtxt}"

    def clone(self) -> "Plugin":
        """Deep copy with fresh tensors, e.g. to warm-start joint training."""
        params = {k: Tensor(t.data.copy(), requires_grad=True, name=t.name)
                  for k, t in self.params.items()}
        return Plugin(aspect_name=self.aspect_name, family=self.family,
                      params=params, value=self.value)


def init_plugin(aspect_name: str, family: str, config: ModelConfig, seed: int,
                value: object | None = None,
                model: "BaseModel | None" = None) -> Plugin:
    """Fresh plugin: zero gate logits, rows from one of two schemes.

    Without ``model``, every non-gate block draws Gaussian(0, 0.02^2).  With
    ``model``, rows are initialized from the frozen token embeddings of
    random shift-band ids plus a small jitter — prompt rows copy the
    embeddings directly, prefix rows copy them through the layer's key/value
    projections.  Rows that imitate real tokens sit where the frozen
    attention already looks, which converges several times faster than
    starting from noise.  Every block draws from its own named stream of
    ``seed``, so values are independent of construction order.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    p, d = config.prompt_len, config.d_model
    params: dict[str, Tensor] = {}
    plug = Plugin(aspect_name=aspect_name, family=family, params=params, value=value)
    emb = model.params["tok_emb"].data if model is not None else None
    band = np.arange(taskgen.SHIFT_LO, taskgen.SHIFT_HI)
    for name in plugin_param_names(family, config.enc_layers):
        tag = f"plugin/{family}/{plug.label()}/{name}"
        if name.startswith("g"):
            data = np.zeros((p, d))
        elif emb is None:
            rng = SplitMix64(derive_seed(seed, tag))
            data = rng.gaussian(p * d, std=_INIT_STD).reshape(p, d)
        else:
            rng = SplitMix64(derive_seed(seed, tag))
            rows = emb[band[rng.integers(p, 0, len(band))]]
            if name.startswith(("pk", "pv")):
                layer = int(name[2:])
                kind = "wk" if name.startswith("pk") else "wv"
                w = model.params[f"enc{layer - 1}.attn.{kind}"].data
                b = model.params[f"enc{layer - 1}.attn.b{kind[1]}"].data
                rows = rows @ w + b
            data = rows + rng.gaussian(p * d, std=_JITTER_STD).reshape(p, d)
        params[name] = Tensor(data, requires_grad=True, name=tag)
    return plug


@dataclass
class PluginCombo:
    """An ordered concatenation of same-family plugins."""

    plugins: list[Plugin] = field(default_factory=list)

    @property
    def family(self) -> str:
        return self.plugins[0].family if self.plugins else "none"

    def __len__(self) -> int:
        return len(self.plugins)


def combine_plugins(plugins: Sequence[Plugin],
                    config: ModelConfig | None = None) -> PluginCombo:
    """Concatenate plugins in order; parameters are shared, never copied."""
    plugins = list(plugins)
    if not plugins:
        raise ValueError("empty combination")
    families = {p.family for p in plugins}
    if len(families) != 1:
        raise ValueError(f"mixed families {sorted(families)}")
    names = [p.aspect_name for p in plugins]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate aspects {names}")
    if config is not None and len(plugins) > config.max_segments - 1:
        raise ValueError("combination exceeds segment budget")
    return PluginCombo(plugins=plugins)


# ---------------------------------------------------------------------------
# Input assembly and plugged forwards
# ---------------------------------------------------------------------------

def build_input(x: Sequence[int], combo: PluginCombo, config: ModelConfig,
                values: dict[str, object] | None = None,
                ) -> tuple[SegmentedInput, list[tuple[int, int]]]:
    """Assemble the segmented input and the plugin-row span map.

    Prompt/gated families contribute one constraint segment per plugin
    followed by p plugin rows each; the prefix family contributes nothing
    here.  A constraint's segment id is fixed by its aspect's registry
    position, not by its slot in the combo, so a plugin meets exactly the
    same embedded constraint whether it runs alone or combined with others
    in any order.  Prompt rows carry no position or segment embedding, so
    they are not counted against ``max_len`` (which sizes the position
    table).  Spans are (lo, hi) row ranges, one per plugin in combo order,
    empty when no rows are appended.
    """
    segments: list[tuple[list[int], int]] = [(list(x), 0)]
    spans: list[tuple[int, int]] = []
    if combo.plugins and combo.family in ("prompt", "gated"):
        for plug in combo.plugins:
            value = plug.value
            if value is None:
                if values is None or plug.aspect_name not in values:
                    raise ValueError(f"no value for aspect {plug.aspect_name!r}")
                value = values[plug.aspect_name]
            seg_id = 1 + taskgen.CANONICAL_ORDER.index(plug.aspect_name)
            segments.append((taskgen.render_constraint(plug.aspect_name, value), seg_id))
        seg_input = SegmentedInput(segments=segments)
        n_emb = seg_input.total_len()
        p = config.prompt_len
        for i in range(len(combo.plugins)):
            spans.append((n_emb + i * p, n_emb + (i + 1) * p))
    else:
        seg_input = SegmentedInput(segments=segments)
    seg_input.validate(config)
    return seg_input, spans


def layer_mods_for(combo: PluginCombo, spans: Sequence[tuple[int, int]],
                   enc_layers: int) -> list[LayerMods] | None:
    """Per-layer encoder hooks realizing the combo's family."""
    if not combo.plugins:
        return None
    if combo.family == "prefix":
        return [LayerMods(prefixes=[(p.params[f"pk{j + 1}"], p.params[f"pv{j + 1}"])
                                    for p in combo.plugins])
                for j in range(enc_layers)]
    if combo.family == "gated":
        return [LayerMods(gates=[(lo, hi, p.params[f"p{j + 1}"], p.params[f"g{j + 1}"])
                                 for (lo, hi), p in zip(spans, combo.plugins)])
                for j in range(enc_layers)]
    return [LayerMods() for _ in range(enc_layers)]


def encode_with_plugins(model: BaseModel, xs: Sequence[Sequence[int]],
                        combo: PluginCombo,
                        values_list: Sequence[dict[str, object]] | None = None,
                        key_mask: Array | None = None,
                        trace: ActivationTrace | None = None,
                        ) -> tuple[Tensor, int, int, int]:
    """Encode a batch of same-shape inputs under a plugin combination.

    Returns (encoder output rows, batch, rows per example, embedded rows per
    example).  All inputs must produce identical segment shapes — group by
    shape before calling.  ``values_list`` supplies per-example aspect
    values for constraint rendering (ignored by the prefix family);
    ``key_mask`` is forwarded to every encoder layer's attention.
    """
    cfg = model.config
    batch = len(xs)
    seg_inputs = []
    spans: list[tuple[int, int]] = []
    shape_key = None
    for i, x in enumerate(xs):
        values = values_list[i] if values_list is not None else None
        seg_input, spans = build_input(x, combo, cfg, values)
        key = tuple(len(toks) for toks, _ in seg_input.segments)
        if shape_key is None:
            shape_key = key
        elif key != shape_key:
            raise ValueError("mixed input shapes in one batch")
        seg_inputs.append(seg_input)
    n_emb = seg_inputs[0].total_len()
    emb = model.embed_batch(seg_inputs)
    if spans:
        prompts = [p.params["p0"] for p in combo.plugins]
        rows = ad.assemble_rows(emb, prompts, batch, n_emb)
        length = n_emb + len(combo.plugins) * cfg.prompt_len
        n_norm = n_emb
    else:
        rows = emb
        length = n_emb
        n_norm = length
    mods = layer_mods_for(combo, spans, cfg.enc_layers)
    enc_out = model.encode(rows, batch, length, n_norm=n_norm, mods=mods,
                           key_mask=key_mask, trace=trace)
    return enc_out, batch, length, n_emb


def apply_gating(a: Array, spans: Sequence[tuple[int, int]], combo: PluginCombo,
                 layer: int) -> Array:
    """Reference gating rewrite on a single example's attention output.

    ``a`` is (length, d); rows inside plugin i's span become
    ``sigmoid(G_i) * (a + P_i)`` for the given 1-based encoder layer; all
    other rows are returned untouched.  This is the plain-numpy statement of
    the rule the fused training path implements.
    """
    if combo.family != "gated":
        raise ValueError("gating applies to the gated family only")
    out = np.array(a, dtype=np.float64, copy=True)
    for (lo, hi), plug in zip(spans, combo.plugins):
        p = plug.params[f"p{layer}"].data
        g = plug.params[f"g{layer}"].data
        out[lo:hi] = (1.0 / (1.0 + np.exp(-g))) * (a[lo:hi] + p)
    return out


def decode_with_plugins(model: BaseModel, combo: PluginCombo,
                        examples: Sequence[taskgen.Example],
                        max_steps: int | None = None) -> list[list[int]]:
    """Greedy-decode every example under one fixed combo.

    Examples are grouped by input shape internally; results come back in
    input order.  ``max_steps`` defaults to a small margin over the longest
    reference target.
    """
    if max_steps is None:
        longest = max((len(ex.y) for ex in examples), default=1)
        max_steps = min(longest + 4, model.config.max_len - 1)
    groups: dict = {}
    for i, ex in enumerate(examples):
        seg_input, _ = build_input(ex.x, combo, model.config, ex.aspects)
        key = tuple(len(toks) for toks, _ in seg_input.segments)
        groups.setdefault(key, []).append(i)
    outputs: list[list[int] | None] = [None] * len(examples)
    for key in sorted(groups):
        idxs = groups[key]
        xs = [examples[i].x for i in idxs]
        values = [examples[i].aspects for i in idxs]
        enc_out, batch, length, _ = encode_with_plugins(model, xs, combo, values)
        decoded = model.greedy_decode(enc_out, batch, length, max_steps)
        for i, out in zip(idxs, decoded):
            outputs[i] = out
    return outputs  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _drop_masks(combo: PluginCombo, config: ModelConfig, batch: int,
                n_emb: int, rate: float, rng: SplitMix64,
                ) -> tuple[Array, Array | None]:
    """Bernoulli key masks muting plugin rows for one training batch.

    A share ``_DROP_MIX`` of the examples mute each plugin row with
    probability ``rate``; the rest keep every row.  Returns (encoder mask,
    decoder cross-attention mask).  Prompt and gated rows sit in the encoder
    output, so the same columns are masked in both places; prefix rows exist
    only inside encoder self-attention, so the decoder mask is None there.
    Embedded rows are never masked.
    """
    p = config.prompt_len
    n_rows = len(combo.plugins) * p
    diluted = rng.uniform(batch) < _DROP_MIX
    drop = rng.uniform(batch * n_rows).reshape(batch, n_rows) < rate
    drop &= diluted[:, None]
    if combo.family == "prefix":
        enc = np.zeros((batch, n_rows + n_emb), dtype=bool)
        enc[:, :n_rows] = drop
        return enc, None
    enc = np.zeros((batch, n_emb + n_rows), dtype=bool)
    enc[:, n_emb:] = drop
    return enc, enc


def joint_train_plugins(model: BaseModel, plugins: Sequence[Plugin],
                        corpus: Sequence[taskgen.Example], seed: int,
                        steps: int = 2000, lr: float = 3e-3,
                        batch_size: int = 16, key_drop: float = 0.0,
                        param_noise: float = 0.0, weight_decay: float = 0.0,
                        log_every: int = 50) -> dict:
    """Optimize the given plugins together on a labeled corpus.

    The base model must be frozen; this is asserted bit-for-bit afterwards.
    With one plugin this is ordinary separate training; with several it is
    the jointly supervised reference.  Three regularizers target the
    combined-use regime, where separately found solutions must coexist:
    ``key_drop`` mutes each plugin key row with that probability per
    example per step (see :data:`KEY_DROP`); ``param_noise`` perturbs
    every plugin parameter for each forward pass by a Gaussian with that
    standard deviation relative to the tensor's RMS, flattening the found
    minimum; ``weight_decay`` shrinks plugin parameters toward zero after
    each step (decoupled, ``p -= lr * weight_decay * p``), favoring the
    smallest injection that still realizes the aspect.  Evaluation and
    inference never drop or perturb anything.  Plugins are modified in
    place and a metrics dict (loss curve) is returned.
    """
    if any(p.requires_grad for p in model.params.values()):
        raise ValueError("base model must be frozen before plugin training")
    base_before = model.snapshot()
    combo = combine_plugins(plugins, model.config)
    named = {f"{p.label()}/{k}": t for p in plugins for k, t in p.params.items()}
    opt = Adam(named, lr=lr)

    def shape_key(ex: taskgen.Example):
        seg_input, _ = build_input(ex.x, combo, model.config, ex.aspects)
        return (tuple(len(toks) for toks, _ in seg_input.segments), len(ex.y))

    batcher = ShapeGroupedBatcher(corpus, shape_key, batch_size,
                                  SplitMix64(derive_seed(seed, "train/batches")))
    drop_rng = SplitMix64(derive_seed(seed, "train/dropout")) if key_drop > 0.0 else None
    noise_rng = SplitMix64(derive_seed(seed, "train/noise")) if param_noise > 0.0 else None
    curve: list[tuple[int, float]] = []
    for step in range(steps):
        batch = batcher.next()
        xs = [ex.x for ex in batch]
        values = [ex.aspects for ex in batch]
        key_mask = cross_mask = None
        if drop_rng is not None:
            seg0, _ = build_input(batch[0].x, combo, model.config, batch[0].aspects)
            key_mask, cross_mask = _drop_masks(combo, model.config, len(batch),
                                               seg0.total_len(), key_drop, drop_rng)
        clean: dict[str, Array] = {}
        if noise_rng is not None:
            for name, t in named.items():
                clean[name] = t.data.copy()
                rms = float(np.sqrt(np.mean(t.data ** 2)))
                if rms > 0.0:
                    t.data += noise_rng.gaussian(t.data.size,
                                                 std=param_noise * rms).reshape(t.data.shape)
        enc_out, b, length, _ = encode_with_plugins(model, xs, combo, values,
                                                    key_mask=key_mask)
        y = np.array([ex.y for ex in batch], dtype=np.int64)
        loss = model.sequence_loss(enc_out, b, length, y, cross_key_mask=cross_mask)
        value = float(loss.data)
        if not np.isfinite(value):
            raise FloatingPointError(f"plugin training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        if noise_rng is not None:
            # gradient taken at the perturbed point, applied to the clean one
            for name, t in named.items():
                t.data[...] = clean[name]
        opt.step()
        if weight_decay > 0.0:
            for t in named.values():
                t.data -= lr * weight_decay * t.data
        if step % log_every == 0 or step == steps - 1:
            curve.append((step, value))
    base_after = model.snapshot()
    for name, before in base_before.items():
        if not np.array_equal(before, base_after[name]):
            raise AssertionError(f"frozen base parameter {name} changed during training")
    return {
        "final_loss": curve[-1][1] if curve else float("nan"),
        "steps": steps,
        "loss_curve": [[s, l] for s, l in curve],
    }


def train_plugin(model: BaseModel, corpus: Sequence[taskgen.Example],
                 aspect_name: str, family: str, seed: int,
                 steps: int = 2000, lr: float = 3e-3, batch_size: int = 16,
                 value: object | None = None, key_drop: float = KEY_DROP,
                 param_noise: float = PARAM_NOISE,
                 weight_decay: float = WEIGHT_DECAY,
                 log_every: int = 50) -> tuple[Plugin, dict]:
    """Initialize and train one plugin on single-aspect data.

    The combined-use regularizers default on here (unlike joint training)
    because a plugin trained alone must stay functional under the
    attention-mass dilution and injection crowding that later combination
    causes.
    """
    plugin = init_plugin(aspect_name, family, model.config, seed, value=value,
                         model=model)
    metrics = joint_train_plugins(model, [plugin], corpus, seed, steps=steps,
                                  lr=lr, batch_size=batch_size, key_drop=key_drop,
                                  param_noise=param_noise,
                                  weight_decay=weight_decay, log_every=log_every)
    return plugin, metrics
