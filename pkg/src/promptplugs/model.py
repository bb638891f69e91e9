"""Small encoder-decoder transformer with pluggable encoder hooks.

The base model is a standard post-layer-norm encoder-decoder stack operating
on token ids, with three embedding tables (token, position, segment) summed
at the input.  Positions restart at 1 inside every segment and each segment
carries its own segment embedding, so constraint segments keep their internal
geometry wherever they sit in the concatenation.

Two hooks distinguish this from a vanilla transformer, both confined to the
encoder's attention sublayer:

* rows appended after the embedded input ("plugin rows") receive no residual
  connection and no layer norm at the attention sublayer — their attention
  output is either passed through unchanged or rewritten by a gating block
  ``sigmoid(G) * (A + P)``; the FFN sublayer then treats all rows alike;
* per-layer key/value prefixes can be prepended inside self-attention.

Both hooks are supplied per layer via :class:`LayerMods`; with no mods the
encoder is exactly the textbook stack (tested against a brute-force oracle).

Batching: examples grouped by identical shape are stacked into (B*L, d)
matrices (see autodiff).  All forwards here take ``batch`` plus per-example
lengths and never mix rows across examples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Tensor
from .rng import SplitMix64, derive_seed

Array = np.ndarray


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; all sizes are validated together."""

    vocab_size: int = 64
    d_model: int = 32
    n_heads: int = 4
    enc_layers: int = 4
    dec_layers: int = 2
    ffn_dim: int = 128
    prompt_len: int = 16
    max_len: int = 48
    max_segments: int = 6
    ln_eps: float = 1e-5
    bos_id: int = 1
    eos_id: int = 63

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be a multiple of n_heads")
        if self.prompt_len < 1:
            raise ValueError("prompt_len must be >= 1")
        if min(self.vocab_size, self.enc_layers, self.dec_layers,
               self.ffn_dim, self.max_len, self.max_segments) < 1:
            raise ValueError("all size fields must be positive")
        if not (0 <= self.bos_id < self.vocab_size and 0 <= self.eos_id < self.vocab_size):
            raise ValueError("special token ids out of range")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class SegmentedInput:
    """Token ids split into segments, each with restarted positions.

    ``segments`` is an ordered list of (token-id list, segment-id).  The
    flattened views feed the embedding tables directly: ``positions`` restart
    at 1 per segment (stored 0-based for table lookup), ``segment_ids``
    repeat each segment's id across its tokens.
    """

    segments: list[tuple[list[int], int]]

    def token_ids(self) -> list[int]:
        return [t for toks, _ in self.segments for t in toks]

    def position_rows(self) -> list[int]:
        return [i for toks, _ in self.segments for i in range(len(toks))]

    def segment_ids(self) -> list[int]:
        return [s for toks, s in self.segments for _ in toks]

    def total_len(self) -> int:
        return sum(len(toks) for toks, _ in self.segments)

    def validate(self, config: ModelConfig) -> None:
        if self.total_len() > config.max_len:
            raise ValueError(f"input length {self.total_len()} exceeds max_len {config.max_len}")
        for toks, seg in self.segments:
            if seg >= config.max_segments:
                raise ValueError(f"segment id {seg} out of range")
            if len(toks) > config.max_len:
                raise ValueError("segment longer than max_len")
            for t in toks:
                if not (0 <= t < config.vocab_size):
                    raise ValueError(f"token id {t} out of vocabulary")


@dataclass
class LayerMods:
    """Per-encoder-layer plugin hooks.

    ``gates``: (lo, hi, P, G) blocks in example-local row coordinates whose
    attention output is rewritten to ``sigmoid(G) * (A + P)``.
    ``prefixes``: (Pk, Pv) pairs prepended as extra keys/values inside
    self-attention, in list order, ahead of the original keys.
    """

    gates: list[tuple[int, int, Tensor, Tensor]] = field(default_factory=list)
    prefixes: list[tuple[Tensor, Tensor]] = field(default_factory=list)


class ActivationTrace:
    """Per-encoder-layer activations recorded during a traced forward.

    All entries are plain (batch, length, d) float arrays (detached copies):
    ``layer_inputs[j]`` is the hidden state entering layer j, ``post_attn[j]``
    the attention sublayer output before any gating, ``post_gate[j]`` the
    same after gating (identical when no gating applies), and ``hidden[j]``
    the layer's final output.  ``attn_weights[j]`` is (batch, heads, length,
    n_prefix + length) and ``n_prefix[j]`` counts prepended prefix keys.
    """

    def __init__(self) -> None:
        self.layer_inputs: list[Array] = []
        self.post_attn: list[Array] = []
        self.post_gate: list[Array] = []
        self.hidden: list[Array] = []
        self.attn_weights: list[Array] = []
        self.n_prefix: list[int] = []


_EMB_INIT_STD = 0.02


class BaseModel:
    """Encoder-decoder transformer holding all parameters in a flat dict.

    ``params`` maps stable names to tensors; the insertion order is the
    serialization order.  Initialization draws every weight from an
    independent named stream of one seed, so parameter values do not depend
    on construction order elsewhere in the program.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        d, f, v = config.d_model, config.ffn_dim, config.vocab_size
        self._weight("tok_emb", (v, d), std=_EMB_INIT_STD)
        self._weight("pos_emb", (config.max_len, d), std=_EMB_INIT_STD)
        self._weight("seg_emb", (config.max_segments, d), std=_EMB_INIT_STD)
        for i in range(config.enc_layers):
            self._attn_block(f"enc{i}.attn")
            self._ln_block(f"enc{i}.ln1")
            self._ffn_block(f"enc{i}.ffn", d, f)
            self._ln_block(f"enc{i}.ln2")
        for i in range(config.dec_layers):
            self._attn_block(f"dec{i}.self")
            self._ln_block(f"dec{i}.ln1")
            self._attn_block(f"dec{i}.cross")
            self._ln_block(f"dec{i}.ln2")
            self._ffn_block(f"dec{i}.ffn", d, f)
            self._ln_block(f"dec{i}.ln3")
        self._weight("out.w", (d, v))
        self._zeros("out.b", (1, v))

    # -- parameter construction -------------------------------------------

    def _weight(self, name: str, shape: tuple[int, int],
                std: float | None = None) -> None:
        # Matrices use fan-scaled draws: at d_model=32 a flat small std leaves
        # attention logits so close to uniform that the copy task stalls for
        # thousands of steps before position addressing emerges.
        rng = SplitMix64(derive_seed(self.seed, f"init/{name}"))
        if std is None:
            std = float(np.sqrt(2.0 / (shape[0] + shape[1])))
        data = rng.gaussian(shape[0] * shape[1], std=std).reshape(shape)
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def _zeros(self, name: str, shape: tuple[int, int]) -> None:
        self.params[name] = Tensor(np.zeros(shape), requires_grad=True, name=name)

    def _ones(self, name: str, shape: tuple[int, int]) -> None:
        self.params[name] = Tensor(np.ones(shape), requires_grad=True, name=name)

    def _attn_block(self, prefix: str) -> None:
        d = self.config.d_model
        for w in ("wq", "wk", "wv", "wo"):
            self._weight(f"{prefix}.{w}", (d, d))
        for b in ("bq", "bk", "bv", "bo"):
            self._zeros(f"{prefix}.{b}", (1, d))

    def _ln_block(self, prefix: str) -> None:
        d = self.config.d_model
        self._ones(f"{prefix}.g", (1, d))
        self._zeros(f"{prefix}.b", (1, d))

    def _ffn_block(self, prefix: str, d: int, f: int) -> None:
        self._weight(f"{prefix}.w1", (d, f))
        self._zeros(f"{prefix}.b1", (1, f))
        self._weight(f"{prefix}.w2", (f, d))
        self._zeros(f"{prefix}.b2", (1, d))

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False

    def unfreeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = True

    def snapshot(self) -> dict[str, Array]:
        return {name: p.data.copy() for name, p in self.params.items()}

    # -- embedding ----------------------------------------------------------

    def embed(self, token_ids: Array, position_rows: Array,
              segment_ids: Array | None = None) -> Tensor:
        """Sum token + position (+ segment) embeddings for flat index arrays."""
        pairs = [(self.params["tok_emb"], token_ids),
                 (self.params["pos_emb"], position_rows)]
        if segment_ids is not None:
            pairs.append((self.params["seg_emb"], segment_ids))
        return ad.embedding_sum(pairs)

    def embed_batch(self, inputs: Sequence[SegmentedInput]) -> Tensor:
        """Embed a batch of same-shape segmented inputs into (B*L, d) rows."""
        ids = np.concatenate([np.asarray(s.token_ids(), dtype=np.int64) for s in inputs])
        pos = np.concatenate([np.asarray(s.position_rows(), dtype=np.int64) for s in inputs])
        seg = np.concatenate([np.asarray(s.segment_ids(), dtype=np.int64) for s in inputs])
        return self.embed(ids, pos, seg)

    # -- encoder ------------------------------------------------------------

    def encode(self, rows: Tensor, batch: int, length: int,
               n_norm: int | None = None,
               mods: Sequence[LayerMods] | None = None,
               key_mask: Array | None = None,
               trace: ActivationTrace | None = None) -> Tensor:
        """Run the encoder stack over stacked rows.

        ``n_norm`` is the number of leading rows per example that receive the
        residual + layer-norm treatment at the attention sublayer (default:
        all of them); trailing rows are plugin rows.  ``mods``, when given,
        must have one :class:`LayerMods` per encoder layer.  ``key_mask``
        (batch, n_prefix + length) drops the True key columns from every
        layer's attention; training uses it to mute plugin rows at random.
        """
        cfg = self.config
        if n_norm is None:
            n_norm = length
        if mods is not None and len(mods) != cfg.enc_layers:
            raise ValueError("mods must list one entry per encoder layer")
        h = rows
        d = cfg.d_model
        for j in range(cfg.enc_layers):
            p = self.params
            mod = mods[j] if mods is not None else LayerMods()
            if trace is not None:
                trace.layer_inputs.append(h.data.reshape(batch, length, d).copy())
            sink: dict | None = {} if trace is not None else None
            a = ad.multi_head_attention(
                h, h,
                p[f"enc{j}.attn.wq"], p[f"enc{j}.attn.bq"],
                p[f"enc{j}.attn.wk"], p[f"enc{j}.attn.bk"],
                p[f"enc{j}.attn.wv"], p[f"enc{j}.attn.bv"],
                p[f"enc{j}.attn.wo"], p[f"enc{j}.attn.bo"],
                cfg.n_heads, batch, length, length,
                prefixes=mod.prefixes, key_mask=key_mask, weights_sink=sink)
            if trace is not None:
                trace.post_attn.append(a.data.reshape(batch, length, d).copy())
                trace.attn_weights.append(sink["weights"])
                trace.n_prefix.append(sink["n_prefix"])
            if mod.gates:
                a = ad.gate_rows(a, mod.gates, batch, length)
            if trace is not None:
                trace.post_gate.append(a.data.reshape(batch, length, d).copy())
            h1 = ad.residual_norm(h, a, p[f"enc{j}.ln1.g"], p[f"enc{j}.ln1.b"],
                                  batch, length, n_norm, cfg.ln_eps)
            ff = self._ffn(h1, f"enc{j}.ffn")
            h = ad.residual_norm(h1, ff, p[f"enc{j}.ln2.g"], p[f"enc{j}.ln2.b"],
                                 batch, length, length, cfg.ln_eps)
            if trace is not None:
                trace.hidden.append(h.data.reshape(batch, length, d).copy())
        return h

    def _ffn(self, h: Tensor, prefix: str) -> Tensor:
        p = self.params
        return ad.ffn(h, p[f"{prefix}.w1"], p[f"{prefix}.b1"],
                      p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    # -- decoder ------------------------------------------------------------

    def decode_logits(self, enc_out: Tensor, batch: int, enc_len: int,
                      y_in: Array,
                      cross_key_mask: Array | None = None) -> Tensor:
        """Teacher-forced decoder logits, (batch * T, vocab).

        ``y_in`` is a (batch, T) array of decoder input ids (BOS-led).
        Decoder rows use token + position embeddings only; cross-attention
        sees every encoder row, plugin rows included, minus any columns a
        (batch, enc_len) ``cross_key_mask`` marks True.
        """
        cfg = self.config
        y_in = np.asarray(y_in, dtype=np.int64)
        b, t = y_in.shape
        if b != batch:
            raise ValueError("decoder batch mismatch")
        ids = y_in.reshape(-1)
        pos = np.tile(np.arange(t, dtype=np.int64), b)
        h = self.embed(ids, pos, None)
        p = self.params
        for j in range(cfg.dec_layers):
            a = ad.multi_head_attention(
                h, h,
                p[f"dec{j}.self.wq"], p[f"dec{j}.self.bq"],
                p[f"dec{j}.self.wk"], p[f"dec{j}.self.bk"],
                p[f"dec{j}.self.wv"], p[f"dec{j}.self.bv"],
                p[f"dec{j}.self.wo"], p[f"dec{j}.self.bo"],
                cfg.n_heads, batch, t, t, causal=True)
            h = ad.residual_norm(h, a, p[f"dec{j}.ln1.g"], p[f"dec{j}.ln1.b"],
                                 batch, t, t, cfg.ln_eps)
            c = ad.multi_head_attention(
                h, enc_out,
                p[f"dec{j}.cross.wq"], p[f"dec{j}.cross.bq"],
                p[f"dec{j}.cross.wk"], p[f"dec{j}.cross.bk"],
                p[f"dec{j}.cross.wv"], p[f"dec{j}.cross.bv"],
                p[f"dec{j}.cross.wo"], p[f"dec{j}.cross.bo"],
                cfg.n_heads, batch, t, enc_len, key_mask=cross_key_mask)
            h = ad.residual_norm(h, c, p[f"dec{j}.ln2.g"], p[f"dec{j}.ln2.b"],
                                 batch, t, t, cfg.ln_eps)
            ff = self._ffn(h, f"dec{j}.ffn")
            h = ad.residual_norm(h, ff, p[f"dec{j}.ln3.g"], p[f"dec{j}.ln3.b"],
                                 batch, t, t, cfg.ln_eps)
        return ad.add(ad.matmul(h, p["out.w"]), p["out.b"])

    # -- losses and decoding -------------------------------------------------

    def sequence_loss(self, enc_out: Tensor, batch: int, enc_len: int,
                      targets: Array,
                      cross_key_mask: Array | None = None) -> Tensor:
        """Mean cross-entropy of teacher-forced next-token prediction.

        ``targets`` is (batch, T); the decoder reads BOS followed by the
        target and predicts the target shifted left with EOS appended.
        ``cross_key_mask`` is forwarded to the decoder's cross-attention.
        """
        cfg = self.config
        y = np.asarray(targets, dtype=np.int64)
        b, t = y.shape
        y_in = np.concatenate([np.full((b, 1), cfg.bos_id, dtype=np.int64), y], axis=1)
        y_out = np.concatenate([y, np.full((b, 1), cfg.eos_id, dtype=np.int64)], axis=1)
        logits = self.decode_logits(enc_out, batch, enc_len, y_in,
                                    cross_key_mask=cross_key_mask)
        return ad.cross_entropy(logits, y_out.reshape(-1))

    def token_accuracy(self, enc_out: Tensor, batch: int, enc_len: int,
                       targets: Array) -> float:
        """Teacher-forced argmax accuracy over all target positions."""
        cfg = self.config
        y = np.asarray(targets, dtype=np.int64)
        b, t = y.shape
        y_in = np.concatenate([np.full((b, 1), cfg.bos_id, dtype=np.int64), y], axis=1)
        y_out = np.concatenate([y, np.full((b, 1), cfg.eos_id, dtype=np.int64)], axis=1)
        with ad.no_grad():
            logits = self.decode_logits(enc_out, batch, enc_len, y_in)
        pred = np.argmax(logits.data, axis=1)
        return float((pred == y_out.reshape(-1)).mean())

    def greedy_decode(self, enc_out: Tensor, batch: int, enc_len: int,
                      max_steps: int) -> list[list[int]]:
        """Iterative argmax decoding; ties resolve to the lowest token id.

        Each sequence stops at its first EOS (EOS excluded from the result);
        decoding runs until every sequence finished or ``max_steps`` tokens
        were emitted.
        """
        cfg = self.config
        y = np.full((batch, 1), cfg.bos_id, dtype=np.int64)
        done = np.zeros(batch, dtype=bool)
        outputs: list[list[int]] = [[] for _ in range(batch)]
        with ad.no_grad():
            for _ in range(max_steps):
                logits = self.decode_logits(enc_out, batch, enc_len, y)
                last = logits.data.reshape(batch, y.shape[1], cfg.vocab_size)[:, -1]
                nxt = np.argmax(last, axis=1)  # first max = lowest id on ties
                for i in range(batch):
                    if not done[i]:
                        if nxt[i] == cfg.eos_id:
                            done[i] = True
                        else:
                            outputs[i].append(int(nxt[i]))
                if done.all():
                    break
                y = np.concatenate([y, nxt.reshape(batch, 1)], axis=1)
        return outputs

    def forward_plain(self, x: Sequence[int], trace: ActivationTrace | None = None) -> Tensor:
        """Encode a single bare input sequence (segment 0, no plugins)."""
        seg = SegmentedInput(segments=[(list(x), 0)])
        seg.validate(self.config)
        rows = self.embed_batch([seg])
        return self.encode(rows, 1, seg.total_len(), trace=trace)
