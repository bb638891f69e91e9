"""Mutual-interference measurement and attention-head bound analysis.

Two groups of tools live here.  The first compares hidden states between
two plugin settings — separately trained plugins combined zero-shot versus
the jointly trained reference — and reports the per-layer averaged L2 norm
of the difference (``measure_mi``, ``mi_layer_curve``).  The second group
re-derives attention arithmetic outside the training graph: it splits a
plugged head's output into base and plugin parts (``decompose_head``,
``decompose_two``), checks the dominance assumption behind the lower-bound
argument (``check_assumption``), and evaluates the single-head and
multi-head interference bounds (``single_head_bound``, ``multi_head_bound``).

Probe conventions shared by every decomposition:

* Original rows are the embedded input rows — the source tokens plus any
  constraint segments; plugin rows are the prompt/prefix rows.  At every
  layer the original rows' queries, keys and values come from a plugin-free
  forward of the same segmented input, so the unplugged output ``h_bar``,
  the single-plugin outputs and the pair outputs of one instance all share
  one query and one set of original keys.  Differences between settings are
  then carried entirely by the plugin key/value blocks.
* The prefix family contributes its per-layer key/value parameters directly
  (they are attention entries, not token rows).  The prompt and gated
  families contribute the traced plugin rows of the previous layer's
  output, projected by the current layer's key/value matrices; at layer 1
  the embedding-level prompt rows play that role.
* Within one instance, pair masses and the derived single-plugin masses are
  computed from one shared set of exponentials, so identities like
  t_i = alpha / (gamma + alpha) hold to float rounding, not merely on paper.

Layer, head and query-position indices in every public record are 1-based
for layers (matching "layer 1 .. layer E" in reports) and 0-based for heads
and positions.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import taskgen
from .autodiff import Array
from .linalg import householder_qr, mean_abs_diag
from .model import ActivationTrace, BaseModel, SegmentedInput
from .plugins import Plugin, PluginCombo, build_input, combine_plugins, encode_with_plugins

__all__ = [
    "MIReport", "measure_mi", "mi_layer_curve",
    "HeadDecomposition", "TwoPluginDecomposition", "AssumptionReport",
    "BoundEstimate", "BoundSweep",
    "AttentionProbe", "head_split",
    "decompose_head", "decompose_two", "check_assumption",
    "single_head_bound", "multi_head_bound", "bound_sweep",
    "GateStats", "gate_stats",
    "write_mi_curve_csv", "write_bound_csv", "write_gates_csv",
]


# ---------------------------------------------------------------------------
# Mutual interference
# ---------------------------------------------------------------------------

@dataclass
class MIReport:
    """Per-layer interference between a zero-shot and a joint plugin setting.

    ``per_layer[j-1]`` is the mean, over every evaluation example and every
    source-token position, of the L2 norm of the hidden-state difference
    after encoder layer j.  Plugin and constraint positions are excluded:
    they differ structurally between families and would conflate the
    measurement with architecture.
    """

    family: str
    aspects: tuple[str, ...]
    per_layer: list[float]
    n_examples: int
    n_positions: int
    eval_set_id: str
    seed: int | None = None

    def last_over_first(self) -> float:
        return self.per_layer[-1] / self.per_layer[0] if self.per_layer[0] else float("inf")


def eval_set_id(examples: Sequence[taskgen.Example]) -> str:
    """Short stable identifier of an evaluation corpus (content hash)."""
    h = hashlib.sha256()
    for ex in examples:
        aspects = sorted((k, tuple(v) if isinstance(v, list) else v)
                         for k, v in ex.aspects.items())
        h.update(repr((tuple(ex.x), tuple(ex.y), aspects)).encode())
    return h.hexdigest()[:12]


def measure_mi(model: BaseModel, separate: PluginCombo, joint: PluginCombo,
               eval_set: Sequence[taskgen.Example],
               seed: int | None = None) -> MIReport:
    """Average per-layer hidden-state gap between two settings of one combo.

    ``separate`` holds the plugins trained one aspect at a time and combined
    zero-shot; ``joint`` holds the jointly trained reference for the same
    aspects.  Both are run on every example and the L2 norm of the row
    difference is averaged over examples and source positions, one value per
    encoder layer.  Identical parameters give exactly 0.0 everywhere.
    """
    if separate.family != joint.family:
        raise ValueError("separate and joint combos use different families")
    hat_aspects = tuple(p.aspect_name for p in separate.plugins)
    til_aspects = tuple(p.aspect_name for p in joint.plugins)
    if hat_aspects != til_aspects:
        raise ValueError(f"aspect mismatch: {hat_aspects} vs {til_aspects}")
    if not eval_set:
        raise ValueError("empty evaluation set")

    n_layers = model.config.enc_layers
    sums = np.zeros(n_layers)
    count = 0

    groups: dict = {}
    for i, ex in enumerate(eval_set):
        seg_input, _ = build_input(ex.x, separate, model.config, ex.aspects)
        key = tuple(len(toks) for toks, _ in seg_input.segments)
        groups.setdefault(key, []).append(i)

    with ad.no_grad():
        for key in sorted(groups):
            idxs = groups[key]
            xs = [eval_set[i].x for i in idxs]
            values = [eval_set[i].aspects for i in idxs]
            n_x = len(xs[0])
            trace_hat = ActivationTrace()
            trace_til = ActivationTrace()
            encode_with_plugins(model, xs, separate, values, trace=trace_hat)
            encode_with_plugins(model, xs, joint, values, trace=trace_til)
            for j in range(n_layers):
                diff = trace_hat.hidden[j][:, :n_x] - trace_til.hidden[j][:, :n_x]
                sums[j] += np.sqrt((diff * diff).sum(axis=2)).sum()
            count += len(idxs) * n_x

    return MIReport(family=separate.family, aspects=hat_aspects,
                    per_layer=(sums / count).tolist(),
                    n_examples=len(eval_set), n_positions=count,
                    eval_set_id=eval_set_id(eval_set), seed=seed)


def mi_layer_curve(reports: Sequence[MIReport]) -> dict:
    """Aggregate per-seed MI reports into per-family mean and sd curves.

    Returns ``{family: {"seeds": [...], "mean": [...], "sd": [...]}}`` with
    one entry per layer; the standard deviation is the population sd over
    seeds (0.0 for a single seed).  All reports of one family must share the
    layer count.
    """
    by_family: dict[str, list[MIReport]] = {}
    for rep in reports:
        by_family.setdefault(rep.family, []).append(rep)
    summary: dict[str, dict] = {}
    for family in sorted(by_family):
        reps = sorted(by_family[family], key=lambda r: (r.seed is None, r.seed))
        rows = np.array([r.per_layer for r in reps])
        if rows.ndim != 2:
            raise ValueError("inconsistent layer counts across reports")
        summary[family] = {
            "seeds": [r.seed for r in reps],
            "mean": rows.mean(axis=0).tolist(),
            "sd": rows.std(axis=0).tolist(),
        }
    return summary


# ---------------------------------------------------------------------------
# Attention probe
# ---------------------------------------------------------------------------

def head_split(q: Array, k_orig: Array, v_orig: Array,
               blocks: Sequence[tuple[Array, Array]], scale: float) -> dict:
    """One query's attention over original keys plus plugin key blocks.

    ``q`` is (e,); ``k_orig``/``v_orig`` are (n, e); each block is a
    (keys, values) pair of (p, e) arrays appended to the key set.  A single
    softmax pass over all scores yields everything downstream analysis
    needs:

    * ``h``      — plugged head output over all keys,
    * ``h_bar``  — unplugged output over the original keys alone,
    * ``masses`` — [original, block 1, block 2, ...] softmax mass split,
    * ``deltas`` — per-block value-weighted averages (0-vector for an
      empty or massless block),
    * ``exp_sums`` — the raw exponential sums behind the masses, from which
      single-plugin masses can be derived consistently.
    """
    if k_orig.shape[0] == 0:
        raise ValueError("head_split requires at least one original key")
    scores_orig = (k_orig @ q) * scale
    block_scores = [(bk @ q) * scale for bk, _ in blocks]
    peak = scores_orig.max()
    for sc in block_scores:
        if sc.size:
            peak = max(peak, sc.max())

    e_orig = np.exp(scores_orig - peak)
    e0 = e_orig.sum()
    h_bar = (e_orig @ v_orig) / e0

    exp_sums = [e0]
    deltas = []
    numerator = e_orig @ v_orig
    for (bk, bv), sc in zip(blocks, block_scores):
        eb = np.exp(sc - peak)
        sb = eb.sum()
        exp_sums.append(sb)
        if sb > 0.0:
            contrib = eb @ bv
            deltas.append(contrib / sb)
            numerator = numerator + contrib
        else:
            deltas.append(np.zeros_like(h_bar))
    total = float(sum(exp_sums))
    masses = [s / total for s in exp_sums]
    return {"h": numerator / total, "h_bar": h_bar, "masses": masses,
            "deltas": deltas, "exp_sums": exp_sums}


class _BaseParts:
    """Per-layer head-shaped Q/K/V of the original rows (plugin-free run)."""

    def __init__(self, model: BaseModel, seg_input: SegmentedInput):
        cfg = model.config
        n = seg_input.total_len()
        heads, e = cfg.n_heads, cfg.head_dim
        trace = ActivationTrace()
        with ad.no_grad():
            rows = model.embed_batch([seg_input])
            model.encode(rows, 1, n, trace=trace)
        self.n_orig = n
        self.trace = trace
        self.q: list[Array] = []
        self.k: list[Array] = []
        self.v: list[Array] = []
        p = model.params
        for j in range(cfg.enc_layers):
            src = trace.layer_inputs[j][0]
            for name, store in (("wq", self.q), ("wk", self.k), ("wv", self.v)):
                w = p[f"enc{j}.attn.{name}"].data
                b = p[f"enc{j}.attn.{name.replace('w', 'b')}"].data
                store.append((src @ w + b).reshape(n, heads, e).transpose(1, 0, 2))


class AttentionProbe:
    """Per-layer attention pieces for one example under one plugin combo.

    Holds, for every encoder layer, the original rows' queries/keys/values
    from a plugin-free forward of the same segmented input, and one
    key/value block per plugin.  ``split`` runs one query position through
    :func:`head_split`.  Pass ``base`` to share the plugin-free parts
    between two probes of the same example (e.g. zero-shot vs joint).
    """

    def __init__(self, model: BaseModel, x: Sequence[int],
                 combo: PluginCombo | None, values: dict | None = None,
                 base: _BaseParts | None = None):
        cfg = model.config
        self.model = model
        self.n_x = len(x)
        if combo is None or not combo.plugins:
            seg_input = SegmentedInput(segments=[(list(x), 0)])
            seg_input.validate(cfg)
            spans: list[tuple[int, int]] = []
            self.family = None
        else:
            seg_input, spans = build_input(x, combo, cfg, values)
            self.family = combo.family
        self.n_orig = seg_input.total_len()
        if base is None:
            base = _BaseParts(model, seg_input)
        elif base.n_orig != self.n_orig:
            raise ValueError("shared base was built for a different input shape")
        self.base = base
        self.scale = 1.0 / np.sqrt(cfg.head_dim)
        heads, e = cfg.n_heads, cfg.head_dim
        self.blocks_k: list[list[Array]] = [[] for _ in range(cfg.enc_layers)]
        self.blocks_v: list[list[Array]] = [[] for _ in range(cfg.enc_layers)]
        if combo is None or not combo.plugins:
            return
        if combo.family == "prefix":
            for j in range(cfg.enc_layers):
                for plug in combo.plugins:
                    pk = plug.params[f"pk{j + 1}"].data
                    pv = plug.params[f"pv{j + 1}"].data
                    n_rows = pk.shape[0]
                    self.blocks_k[j].append(pk.reshape(n_rows, heads, e).transpose(1, 0, 2))
                    self.blocks_v[j].append(pv.reshape(n_rows, heads, e).transpose(1, 0, 2))
        else:
            trace = ActivationTrace()
            with ad.no_grad():
                encode_with_plugins(model, [list(x)], combo,
                                    [values] if values is not None else None,
                                    trace=trace)
            p = model.params
            for j in range(cfg.enc_layers):
                src = trace.layer_inputs[j][0]
                wk = p[f"enc{j}.attn.wk"].data
                bk = p[f"enc{j}.attn.bk"].data
                wv = p[f"enc{j}.attn.wv"].data
                bv = p[f"enc{j}.attn.bv"].data
                for lo, hi in spans:
                    rows = src[lo:hi]
                    n_rows = hi - lo
                    self.blocks_k[j].append(
                        (rows @ wk + bk).reshape(n_rows, heads, e).transpose(1, 0, 2))
                    self.blocks_v[j].append(
                        (rows @ wv + bv).reshape(n_rows, heads, e).transpose(1, 0, 2))

    def split(self, layer: int, head: int, query_pos: int,
              subset: Sequence[int] | None = None) -> dict:
        """Run :func:`head_split` at one (1-based layer, head, position)."""
        cfg = self.model.config
        if not 1 <= layer <= cfg.enc_layers:
            raise ValueError(f"layer must be in [1, {cfg.enc_layers}], got {layer}")
        if not 0 <= head < cfg.n_heads:
            raise ValueError(f"head out of range: {head}")
        if not 0 <= query_pos < self.n_orig:
            raise ValueError(f"query position out of range: {query_pos}")
        j = layer - 1
        block_ix = range(len(self.blocks_k[j])) if subset is None else subset
        blocks = [(self.blocks_k[j][m][head], self.blocks_v[j][m][head])
                  for m in block_ix]
        return head_split(self.base.q[j][head, query_pos], self.base.k[j][head],
                          self.base.v[j][head], blocks, self.scale)


# ---------------------------------------------------------------------------
# Decompositions
# ---------------------------------------------------------------------------

@dataclass
class HeadDecomposition:
    """Split of one plugged head output into base and plugin-offset parts.

    ``h = s * h_bar + t * delta`` with ``s`` the softmax mass on original
    keys and ``t`` the mass on plugin keys; ``delta`` is ``(h - s*h_bar)/t``
    (the zero vector by convention when ``t`` vanishes).
    """

    layer: int
    head: int
    query_pos: int
    h: Array
    h_bar: Array
    s: float
    t: float
    delta: Array
    delta_norm: float
    recon_residual: float
    mass_err: float


@dataclass
class TwoPluginDecomposition:
    """Mass and offset split of a head plugged with two plugins at once.

    ``h = gamma * h_bar + alpha * delta_i + beta * delta_j`` where the
    offsets are value-weighted averages over each plugin's rows.  The
    derived single-plugin masses (``s_i``, ``t_i``, ...) come from the same
    exponentials, and ``conditions`` records the mass inequalities the
    bound argument assumes (all automatic for softmax attention, recorded
    so violations are flagged rather than silently used).
    """

    layer: int
    head: int
    query_pos: int
    h: Array
    h_bar: Array
    gamma: float
    alpha: float
    beta: float
    delta_i: Array
    delta_j: Array
    s_i: float
    t_i: float
    s_j: float
    t_j: float
    recon_residual: float
    mass_err: float
    conditions: dict[str, bool] = field(default_factory=dict)

    def conditions_hold(self) -> bool:
        return all(self.conditions.values())


def _combo_of(plugin: Plugin | Sequence[Plugin] | PluginCombo | None,
              config) -> PluginCombo | None:
    if plugin is None:
        return None
    if isinstance(plugin, PluginCombo):
        return plugin
    if isinstance(plugin, Plugin):
        return PluginCombo([plugin])
    return combine_plugins(list(plugin), config)


def decompose_head(model: BaseModel, layer: int, head: int, query_pos: int,
                   x: Sequence[int], plugin: Plugin | None,
                   values: dict | None = None) -> HeadDecomposition:
    """Decompose one head output under a single plugin (or none).

    With no plugin the split is trivial: s = 1, t = 0, delta = 0.  With a
    plugin, s and t are measured from the softmax masses independently and
    their sum is checked against 1; ``delta`` follows the offset formula.
    A vanishing t together with a non-vanishing ``h - s*h_bar`` is a
    numerical contradiction and raises.
    """
    combo = _combo_of(plugin, model.config)
    probe = AttentionProbe(model, x, combo, values)
    sp = probe.split(layer, head, query_pos)
    h, h_bar = sp["h"], sp["h_bar"]
    if len(sp["masses"]) == 1:
        s, t = 1.0, 0.0
    else:
        s = sp["masses"][0]
        t = float(sum(sp["masses"][1:]))
    mass_err = abs(s + t - 1.0)
    resid = h - s * h_bar
    if t < 1e-12:
        if float(np.abs(resid).max()) > 1e-10:
            raise FloatingPointError(
                "plugin mass below 1e-12 but the head output differs from the base")
        delta = np.zeros_like(h)
    else:
        delta = resid / t
    recon = s * h_bar + t * delta
    return HeadDecomposition(
        layer=layer, head=head, query_pos=query_pos, h=h, h_bar=h_bar,
        s=s, t=t, delta=delta, delta_norm=float(np.linalg.norm(delta)),
        recon_residual=float(np.linalg.norm(h - recon)), mass_err=mass_err)


def _two_from_split(layer: int, head: int, query_pos: int, sp: dict) -> TwoPluginDecomposition:
    h, h_bar = sp["h"], sp["h_bar"]
    gamma, alpha, beta = sp["masses"]
    delta_i, delta_j = sp["deltas"]
    e0, ei, ej = sp["exp_sums"]
    s_i = e0 / (e0 + ei)
    t_i = ei / (e0 + ei)
    s_j = e0 / (e0 + ej)
    t_j = ej / (e0 + ej)
    recon = gamma * h_bar + alpha * delta_i + beta * delta_j
    return TwoPluginDecomposition(
        layer=layer, head=head, query_pos=query_pos, h=h, h_bar=h_bar,
        gamma=gamma, alpha=alpha, beta=beta,
        delta_i=delta_i, delta_j=delta_j,
        s_i=s_i, t_i=t_i, s_j=s_j, t_j=t_j,
        recon_residual=float(np.linalg.norm(h - recon)),
        mass_err=abs(gamma + alpha + beta - 1.0),
        conditions={"gamma<s_i": gamma < s_i, "gamma<s_j": gamma < s_j,
                    "alpha<t_i": alpha < t_i, "beta<t_j": beta < t_j})


def decompose_two(model: BaseModel, layer: int, head: int, query_pos: int,
                  x: Sequence[int], plugin_i: Plugin, plugin_j: Plugin,
                  values: dict | None = None) -> TwoPluginDecomposition:
    """Decompose one head output under two zero-shot combined plugins."""
    combo = combine_plugins([plugin_i, plugin_j], model.config)
    probe = AttentionProbe(model, x, combo, values)
    return _two_from_split(layer, head, query_pos, probe.split(layer, head, query_pos))


# ---------------------------------------------------------------------------
# Assumption check and bounds
# ---------------------------------------------------------------------------

@dataclass
class AssumptionReport:
    """Dominance-assumption outcome across heads and positions of a layer.

    The assumption states that the joint pair moves the head output further
    from the base than the two single-plugin moves combined:
    ``|h_joint - h_bar| > |h_i - h_bar| + |h_j - h_bar|``.
    """

    layer: int
    records: list[tuple[int, int, float, float, float, bool]]
    # (head, query_pos, lhs, rhs, margin, holds)

    @property
    def fraction(self) -> float:
        if not self.records:
            return 0.0
        return sum(1 for r in self.records if r[5]) / len(self.records)

    @property
    def margins(self) -> list[float]:
        return [r[4] for r in self.records]


@dataclass
class BoundEstimate:
    """One evaluated interference lower bound (single head or whole layer).

    ``lhs`` is the measured interference at the probe (``|h_joint - h_pair|``
    for a single head; the same difference after the output projection for
    the multi-head case).  ``rhs`` is the bound value.  The bound is a
    theorem only on instances where ``assumption_holds`` and ``mass_ok``;
    elsewhere both sides are still reported.  The multi-head estimate adds
    the QR scale ``lambda_o``, the head count, and the residual of its
    diagonal-approximation step.
    """

    scope: str
    layer: int
    head: int
    query_pos: int
    lhs: float
    rhs: float
    assumption_holds: bool
    mass_ok: bool
    margin: float
    components: dict
    lambda_o: float | None = None
    n_heads: int | None = None
    approx_residual: float | None = None


def _pair_probes(model: BaseModel, x: Sequence[int],
                 hat_i: Plugin, hat_j: Plugin, joint_pair: Sequence[Plugin] | PluginCombo,
                 values: dict | None) -> tuple[AttentionProbe, AttentionProbe]:
    hat = combine_plugins([hat_i, hat_j], model.config)
    til = _combo_of(joint_pair, model.config)
    if til is None or len(til.plugins) != 2:
        raise ValueError("the joint reference must hold exactly two plugins")
    if til.family != hat.family:
        raise ValueError("joint reference family differs from the plugin pair")
    probe_hat = AttentionProbe(model, x, hat, values)
    probe_til = AttentionProbe(model, x, til, values, base=probe_hat.base)
    return probe_hat, probe_til


def _instance_pieces(probe_hat: AttentionProbe, probe_til: AttentionProbe,
                     layer: int, head: int, query_pos: int) -> dict:
    """Everything the assumption check and both bounds need at one instance."""
    two = _two_from_split(layer, head, query_pos,
                          probe_hat.split(layer, head, query_pos))
    sp_til = probe_til.split(layer, head, query_pos)
    h_bar = two.h_bar
    dev_i = two.delta_i - h_bar
    dev_j = two.delta_j - h_bar
    norm_dev_i = float(np.linalg.norm(dev_i))
    norm_dev_j = float(np.linalg.norm(dev_j))
    h_hat_i = two.s_i * h_bar + two.t_i * two.delta_i
    h_hat_j = two.s_j * h_bar + two.t_j * two.delta_j
    a_lhs = float(np.linalg.norm(sp_til["h"] - h_bar))
    a_rhs = float(np.linalg.norm(h_hat_i - h_bar) + np.linalg.norm(h_hat_j - h_bar))
    return {
        "two": two,
        "h_tilde": sp_til["h"],
        "lhs": float(np.linalg.norm(sp_til["h"] - two.h)),
        "rhs": (two.t_i - two.alpha) * norm_dev_i + (two.t_j - two.beta) * norm_dev_j,
        "assumption_lhs": a_lhs,
        "assumption_rhs": a_rhs,
        "assumption_holds": a_lhs > a_rhs,
        "norm_dev_i": norm_dev_i,
        "norm_dev_j": norm_dev_j,
        "head_delta": sp_til["h"] - two.h,
    }


def _single_estimate(pieces: dict, layer: int, head: int, query_pos: int) -> BoundEstimate:
    two = pieces["two"]
    return BoundEstimate(
        scope="single", layer=layer, head=head, query_pos=query_pos,
        lhs=pieces["lhs"], rhs=pieces["rhs"],
        assumption_holds=pieces["assumption_holds"],
        mass_ok=two.conditions_hold(),
        margin=pieces["lhs"] - pieces["rhs"],
        components={
            "t_i": two.t_i, "t_j": two.t_j,
            "alpha": two.alpha, "beta": two.beta,
            "ti_minus_alpha": two.t_i - two.alpha,
            "tj_minus_beta": two.t_j - two.beta,
            "norm_dev_i": pieces["norm_dev_i"],
            "norm_dev_j": pieces["norm_dev_j"],
            "norm_offset_i": float(np.linalg.norm(two.delta_i)),
            "norm_offset_j": float(np.linalg.norm(two.delta_j)),
            "assumption_lhs": pieces["assumption_lhs"],
            "assumption_rhs": pieces["assumption_rhs"],
            "recon_residual": two.recon_residual,
            "mass_err": two.mass_err,
        })


def check_assumption(model: BaseModel, layer: int, x: Sequence[int],
                     hat_i: Plugin, hat_j: Plugin,
                     joint_pair: Sequence[Plugin] | PluginCombo,
                     values: dict | None = None) -> AssumptionReport:
    """Evaluate the dominance assumption at every head and source position."""
    probe_hat, probe_til = _pair_probes(model, x, hat_i, hat_j, joint_pair, values)
    records = []
    for head in range(model.config.n_heads):
        for pos in range(probe_hat.n_x):
            p = _instance_pieces(probe_hat, probe_til, layer, head, pos)
            records.append((head, pos, p["assumption_lhs"], p["assumption_rhs"],
                            p["assumption_lhs"] - p["assumption_rhs"],
                            p["assumption_holds"]))
    return AssumptionReport(layer=layer, records=records)


def single_head_bound(model: BaseModel, layer: int, head: int, query_pos: int,
                      x: Sequence[int], hat_i: Plugin, hat_j: Plugin,
                      joint_pair: Sequence[Plugin] | PluginCombo,
                      values: dict | None = None) -> BoundEstimate:
    """Lower bound on single-head interference at one probe instance.

    LHS is ``|h_joint - h_pair|``; RHS is
    ``(t_i - alpha)*|delta_i - h_bar| + (t_j - beta)*|delta_j - h_bar|``.
    Given the dominance assumption and the softmax mass conditions, LHS
    exceeds RHS up to float rounding; both sides are reported regardless so
    failing instances stay visible.
    """
    probe_hat, probe_til = _pair_probes(model, x, hat_i, hat_j, joint_pair, values)
    pieces = _instance_pieces(probe_hat, probe_til, layer, head, query_pos)
    return _single_estimate(pieces, layer, head, query_pos)


def multi_head_bound(model: BaseModel, layer: int, query_pos: int,
                     x: Sequence[int], hat_i: Plugin, hat_j: Plugin,
                     joint_pair: Sequence[Plugin] | PluginCombo,
                     values: dict | None = None) -> BoundEstimate:
    """Layer-level bound across all heads through the output projection.

    LHS is the norm of the concatenated per-head differences after the
    output matrix (its bias cancels in the difference).  The RHS scales the
    summed per-head bound terms by ``lambda_o / sqrt(K)`` where
    ``lambda_o`` is the mean absolute diagonal of R from a Householder QR
    of the output matrix — the step that treats R as diagonal is an
    approximation, so its residual ``|LHS - lambda_o * |concat||`` is
    reported alongside.  With one head the RHS reduces to ``lambda_o``
    times the single-head RHS exactly.
    """
    probe_hat, probe_til = _pair_probes(model, x, hat_i, hat_j, joint_pair, values)
    return _multi_from_probes(model, probe_hat, probe_til, layer, query_pos)


def _multi_from_probes(model: BaseModel, probe_hat: AttentionProbe,
                       probe_til: AttentionProbe, layer: int,
                       query_pos: int) -> BoundEstimate:
    cfg = model.config
    wo = model.params[f"enc{layer - 1}.attn.wo"].data
    q_mat, r_mat = householder_qr(wo)
    diag = np.abs(np.diag(r_mat))
    if diag.min() < 1e-12:
        raise ValueError(f"rank-deficient output matrix at layer {layer}")
    lam = mean_abs_diag(r_mat)

    terms = []
    deltas = []
    assumption = True
    mass_ok = True
    per_head = []
    for head in range(cfg.n_heads):
        p = _instance_pieces(probe_hat, probe_til, layer, head, query_pos)
        terms.append(p["rhs"])
        deltas.append(p["head_delta"])
        assumption = assumption and p["assumption_holds"]
        mass_ok = mass_ok and p["two"].conditions_hold()
        per_head.append({"head": head, "term": p["rhs"], "lhs": p["lhs"],
                         "assumption_holds": p["assumption_holds"]})
    concat = np.concatenate(deltas)
    lhs = float(np.linalg.norm(concat @ wo))
    concat_norm = float(np.linalg.norm(concat))
    rhs = lam / np.sqrt(cfg.n_heads) * sum(terms)
    return BoundEstimate(
        scope="multi", layer=layer, head=-1, query_pos=query_pos,
        lhs=lhs, rhs=rhs, assumption_holds=assumption, mass_ok=mass_ok,
        margin=lhs - rhs,
        components={"head_terms": per_head, "concat_norm": concat_norm,
                    "qr_recon_err": float(np.abs(q_mat @ r_mat - wo).max()),
                    "qr_orth_err": float(np.abs(q_mat.T @ q_mat - np.eye(wo.shape[0])).max())},
        lambda_o=lam, n_heads=cfg.n_heads,
        approx_residual=abs(lhs - lam * concat_norm))


# ---------------------------------------------------------------------------
# Instance sweep
# ---------------------------------------------------------------------------

@dataclass
class BoundSweep:
    """Decompositions and bound estimates over sampled probe instances."""

    singles: list[BoundEstimate]
    multis: list[BoundEstimate]
    head_decos: list[HeadDecomposition]
    two_decos: list[TwoPluginDecomposition]

    @property
    def assumption_fraction(self) -> float:
        if not self.singles:
            return 0.0
        return sum(1 for b in self.singles if b.assumption_holds) / len(self.singles)

    def conditional_instances(self) -> list[BoundEstimate]:
        """Instances where the assumption and all mass conditions hold."""
        return [b for b in self.singles if b.assumption_holds and b.mass_ok]

    def conditional_violations(self, tol: float = 1e-8) -> list[BoundEstimate]:
        return [b for b in self.conditional_instances() if b.lhs < b.rhs - tol]

    @property
    def max_recon_residual(self) -> float:
        vals = [d.recon_residual for d in self.head_decos] \
            + [d.recon_residual for d in self.two_decos]
        return max(vals) if vals else 0.0

    @property
    def max_mass_err(self) -> float:
        vals = [d.mass_err for d in self.head_decos] \
            + [d.mass_err for d in self.two_decos]
        return max(vals) if vals else 0.0


def bound_sweep(model: BaseModel, hat_i: Plugin, hat_j: Plugin,
                joint_pair: Sequence[Plugin] | PluginCombo,
                examples: Sequence[taskgen.Example], n_instances: int,
                seed: int) -> BoundSweep:
    """Sample (example, layer, head, position) instances and evaluate all
    decompositions and bounds at each.

    Per sampled instance this records an Eq-style single-plugin
    decomposition (alternating between the two plugins), a two-plugin
    decomposition, and a single-head bound estimate; one multi-head
    estimate is added per distinct (example, layer, position) drawn.
    Probes are cached per example, so the cost is a few forwards per
    distinct example plus cheap per-instance softmax arithmetic.
    """
    from .rng import SplitMix64, derive_seed

    if not examples:
        raise ValueError("bound_sweep needs at least one example")
    cfg = model.config
    rng = SplitMix64(derive_seed(seed, "bound/instances"))
    probe_cache: dict[int, tuple[AttentionProbe, AttentionProbe]] = {}

    singles: list[BoundEstimate] = []
    multis: list[BoundEstimate] = []
    head_decos: list[HeadDecomposition] = []
    two_decos: list[TwoPluginDecomposition] = []
    multi_seen: set[tuple[int, int, int]] = set()

    for it in range(n_instances):
        ex_ix = int(rng.integers(1, 0, len(examples))[0])
        layer = 1 + int(rng.integers(1, 0, cfg.enc_layers)[0])
        head = int(rng.integers(1, 0, cfg.n_heads)[0])
        ex = examples[ex_ix]
        if ex_ix not in probe_cache:
            probe_cache[ex_ix] = _pair_probes(model, ex.x, hat_i, hat_j,
                                              joint_pair, ex.aspects)
        probe_hat, probe_til = probe_cache[ex_ix]
        pos = int(rng.integers(1, 0, probe_hat.n_x)[0])

        pieces = _instance_pieces(probe_hat, probe_til, layer, head, pos)
        singles.append(_single_estimate(pieces, layer, head, pos))
        two_decos.append(pieces["two"])
        plugin = hat_i if it % 2 == 0 else hat_j
        head_decos.append(decompose_head(model, layer, head, pos, ex.x,
                                         plugin, ex.aspects))
        key = (ex_ix, layer, pos)
        if key not in multi_seen:
            multi_seen.add(key)
            multis.append(_multi_from_probes(model, probe_hat, probe_til, layer, pos))
    return BoundSweep(singles=singles, multis=multis,
                      head_decos=head_decos, two_decos=two_decos)


# ---------------------------------------------------------------------------
# Gate statistics
# ---------------------------------------------------------------------------

@dataclass
class GateStats:
    """Per-layer gate activations and additive-vector magnitudes of one
    gated plugin, with their across-layer correlation as a diagnostic."""

    aspect_name: str
    layers: list[int]
    gate_mean: list[float]
    p_l1_mean: list[float]
    correlation: float


def gate_stats(plugin: Plugin, model: BaseModel) -> GateStats:
    """Mean sigmoid gate and mean row-L1 of the additive vectors per layer.

    A zero gate-logit block gives exactly 0.5; a zero additive block gives
    0.0.  The correlation is the Pearson coefficient between the two
    per-layer series (NaN when either series is constant).
    """
    if plugin.family != "gated":
        raise ValueError(f"gate statistics require a gated plugin, got {plugin.family}")
    n_layers = model.config.enc_layers
    gate_mean = []
    p_l1_mean = []
    for j in range(1, n_layers + 1):
        g = plugin.params[f"g{j}"].data
        p = plugin.params[f"p{j}"].data
        gate_mean.append(float((1.0 / (1.0 + np.exp(-g))).mean()))
        p_l1_mean.append(float(np.abs(p).sum(axis=1).mean()))
    a = np.array(gate_mean)
    b = np.array(p_l1_mean)
    sa, sb = a.std(), b.std()
    if n_layers < 2 or sa == 0.0 or sb == 0.0:
        corr = float("nan")
    else:
        corr = float(((a - a.mean()) * (b - b.mean())).mean() / (sa * sb))
    return GateStats(aspect_name=plugin.aspect_name,
                     layers=list(range(1, n_layers + 1)),
                     gate_mean=gate_mean, p_l1_mean=p_l1_mean,
                     correlation=corr)


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

def _write_lines(path, lines: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_mi_curve_csv(path, reports: Sequence[MIReport], config_hash: str) -> dict:
    """Write per-(family, seed, layer) MI rows plus summary comment lines.

    Returns the :func:`mi_layer_curve` summary that the trailing comments
    were rendered from.
    """
    summary = mi_layer_curve(reports)
    lines = [f"# config_hash={config_hash}", "family,seed,layer,mi"]
    ordered = sorted(reports, key=lambda r: (r.family, r.seed is None, r.seed))
    for rep in ordered:
        seed = "" if rep.seed is None else rep.seed
        for j, mi in enumerate(rep.per_layer, start=1):
            lines.append(f"{rep.family},{seed},{j},{mi!r}")
    for family in sorted(summary):
        stats = summary[family]
        for j, (m, s) in enumerate(zip(stats["mean"], stats["sd"]), start=1):
            lines.append(f"# summary family={family} layer={j} mean={m!r} sd={s!r}")
    _write_lines(path, lines)
    return summary


def write_bound_csv(path, estimates: Sequence[BoundEstimate], config_hash: str) -> None:
    """Write bound rows; multi-head (whole-layer) rows carry head = -1.

    ``lambda_o`` and ``approx_residual`` are filled for multi-head rows and
    empty for single-head rows; each single-head row's rhs is the per-head
    bound term that the multi-head rhs at the same probe sums over.
    """
    lines = [f"# config_hash={config_hash}",
             "scope,layer,head,query_pos,lhs,rhs,assumption,mass_ok,margin,"
             "lambda_o,approx_residual"]
    for b in estimates:
        lam = "" if b.lambda_o is None else repr(b.lambda_o)
        res = "" if b.approx_residual is None else repr(b.approx_residual)
        lines.append(f"{b.scope},{b.layer},{b.head},{b.query_pos},{b.lhs!r},"
                     f"{b.rhs!r},{int(b.assumption_holds)},{int(b.mass_ok)},"
                     f"{b.margin!r},{lam},{res}")
    _write_lines(path, lines)


def write_gates_csv(path, stats: GateStats, config_hash: str) -> None:
    """Write per-layer gate means and additive-vector L1 norms."""
    lines = [f"# config_hash={config_hash}", "layer,gate_mean,p_l1_mean"]
    for layer, g, p in zip(stats.layers, stats.gate_mean, stats.p_l1_mean):
        lines.append(f"{layer},{g!r},{p!r}")
    lines.append(f"# correlation={stats.correlation!r} aspect={stats.aspect_name}")
    _write_lines(path, lines)
