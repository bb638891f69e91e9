"""Binary artifact files and report writers.

Two binary formats share one block encoding so a checkpoint and a plugin
file differ only in magic and header fields:

* model checkpoint — magic ``MCTG1``
* plugin file      — magic ``MCTGP1``

Layout after the magic bytes::

    [u32 header_len][header JSON, UTF-8]
    [u32 block_count]
    block*: [u32 name_len][name UTF-8][u32 ndim][u32 dim]*ndim [float64 LE data, row-major]

All integers are little-endian uint32.  Header JSON is canonical (sorted
keys, no whitespace) so identical contents give identical bytes.  Blocks
are written in the owner's parameter order — the model's parameter dict
for checkpoints, the plugin's block order for plugins — which is fixed by
construction, so a save/load/save cycle is byte-identical.

Floats are written with ``ndarray.tobytes()`` and read with
``np.frombuffer``: a round trip is bit-exact, which the plugin tests rely
on.

Report helpers (metrics JSON, loss-curve CSV) also live here so every
writer that stamps a config hash shares one implementation.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import IO, Sequence

import numpy as np

from .autodiff import Tensor
from .model import BaseModel, ModelConfig
from .plugins import FAMILIES, Plugin, plugin_param_names

MAGIC_MODEL = b"MCTG1"
MAGIC_PLUGIN = b"MCTGP1"


class ArtifactError(Exception):
    """A required artifact is missing, truncated, or malformed."""


def canonical_json(obj) -> str:
    """Deterministic JSON text: sorted keys, minimal separators."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    """12-hex digest of an object's canonical JSON, stamped into reports."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Low-level block encoding
# ---------------------------------------------------------------------------

def _write_u32(f: IO[bytes], value: int) -> None:
    f.write(struct.pack("<I", value))


def _read_exact(f: IO[bytes], n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ArtifactError(f"truncated file while reading {what}")
    return data


def _read_u32(f: IO[bytes], what: str) -> int:
    return struct.unpack("<I", _read_exact(f, 4, what))[0]


def _write_header(f: IO[bytes], header: dict) -> None:
    blob = canonical_json(header).encode("utf-8")
    _write_u32(f, len(blob))
    f.write(blob)


def _read_header(f: IO[bytes]) -> dict:
    n = _read_u32(f, "header length")
    try:
        return json.loads(_read_exact(f, n, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"bad header JSON: {exc}") from exc


def _write_blocks(f: IO[bytes], items: Sequence[tuple[str, np.ndarray]]) -> None:
    _write_u32(f, len(items))
    for name, arr in items:
        raw = name.encode("utf-8")
        _write_u32(f, len(raw))
        f.write(raw)
        _write_u32(f, arr.ndim)
        for dim in arr.shape:
            _write_u32(f, dim)
        f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_blocks(f: IO[bytes]) -> dict[str, np.ndarray]:
    count = _read_u32(f, "block count")
    blocks: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = _read_u32(f, "block name length")
        name = _read_exact(f, name_len, "block name").decode("utf-8")
        ndim = _read_u32(f, f"ndim of {name}")
        shape = tuple(_read_u32(f, f"dim of {name}") for _ in range(ndim))
        n_items = int(np.prod(shape)) if shape else 1
        raw = _read_exact(f, 8 * n_items, f"data of {name}")
        if name in blocks:
            raise ArtifactError(f"duplicate block {name!r}")
        blocks[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    if f.read(1):
        raise ArtifactError("trailing bytes after last block")
    return blocks


def _open_artifact(path: str | Path, magic: bytes, kind: str) -> IO[bytes]:
    p = Path(path)
    if not p.exists():
        raise ArtifactError(f"missing {kind} file: {p}")
    f = open(p, "rb")
    lead = f.read(len(magic))
    if lead != magic:
        f.close()
        raise ArtifactError(f"{p} is not a {kind} file (bad magic {lead!r})")
    return f


# ---------------------------------------------------------------------------
# Model checkpoints
# ---------------------------------------------------------------------------

def save_model(path: str | Path, model: BaseModel) -> None:
    """Write a checkpoint: config header plus every parameter block."""
    with open(path, "wb") as f:
        f.write(MAGIC_MODEL)
        _write_header(f, {"config": model.config.to_dict(), "kind": "model"})
        _write_blocks(f, [(name, t.data) for name, t in model.params.items()])


def load_model(path: str | Path) -> BaseModel:
    """Read a checkpoint back into a frozen model.

    The parameter set must match the config's architecture exactly — no
    missing, extra, or misshapen blocks.
    """
    with _open_artifact(path, MAGIC_MODEL, "checkpoint") as f:
        header = _read_header(f)
        blocks = _read_blocks(f)
    try:
        config = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactError(f"bad checkpoint config: {exc}") from exc
    model = BaseModel(config, seed=0)
    expect = set(model.params)
    got = set(blocks)
    if expect != got:
        missing, extra = sorted(expect - got), sorted(got - expect)
        raise ArtifactError(f"parameter mismatch: missing {missing}, extra {extra}")
    for name, tensor in model.params.items():
        if blocks[name].shape != tensor.data.shape:
            raise ArtifactError(
                f"block {name!r} has shape {blocks[name].shape}, "
                f"expected {tensor.data.shape}")
        tensor.data = blocks[name]
    model.freeze()
    return model


# ---------------------------------------------------------------------------
# Plugin files
# ---------------------------------------------------------------------------

def save_plugin(path: str | Path, plugin: Plugin, config: ModelConfig) -> None:
    """Write one plugin: identity header plus its parameter blocks."""
    header = {
        "aspect_name": plugin.aspect_name,
        "config": config.to_dict(),
        "family": plugin.family,
        "kind": "plugin",
        "value": plugin.value,
    }
    with open(path, "wb") as f:
        f.write(MAGIC_PLUGIN)
        _write_header(f, header)
        _write_blocks(f, [(name, t.data) for name, t in plugin.params.items()])


def load_plugin(path: str | Path, config: ModelConfig | None = None) -> Plugin:
    """Read a plugin file; optionally check it against a model config."""
    with _open_artifact(path, MAGIC_PLUGIN, "plugin") as f:
        header = _read_header(f)
        blocks = _read_blocks(f)
    family = header.get("family")
    if family not in FAMILIES:
        raise ArtifactError(f"unknown plugin family {family!r}")
    try:
        own_cfg = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactError(f"bad plugin config: {exc}") from exc
    if config is not None and own_cfg != config:
        raise ArtifactError("plugin was trained under a different model config")
    expect = plugin_param_names(family, own_cfg.enc_layers)
    if list(blocks) != expect:
        raise ArtifactError(
            f"plugin blocks {list(blocks)} do not match family layout {expect}")
    value = header.get("value")
    plugin = Plugin(aspect_name=header.get("aspect_name", ""), family=family,
                    params={}, value=value)
    p, d = own_cfg.prompt_len, own_cfg.d_model
    for name in expect:
        arr = blocks[name]
        if arr.shape != (p, d):
            raise ArtifactError(f"block {name!r} has shape {arr.shape}, "
                                f"expected {(p, d)}")
        plugin.params[name] = Tensor(arr, requires_grad=True,
                                     name=f"plugin/{family}/{plugin.label()}/{name}")
    return plugin


# ---------------------------------------------------------------------------
# Report writers
# ---------------------------------------------------------------------------

def write_metrics_json(path: str | Path, metrics: dict, cfg_hash: str) -> None:
    """Metrics JSON: canonical dump with the config hash folded in."""
    payload = dict(metrics)
    payload["config_hash"] = cfg_hash
    Path(path).write_text(canonical_json(payload) + "\n", encoding="utf-8")


def write_loss_csv(path: str | Path, curve: Sequence[Sequence[float]],
                   cfg_hash: str) -> None:
    """Loss curve CSV: ``step,loss`` rows under a config-hash comment."""
    lines = [f"# config_hash={cfg_hash}", "step,loss"]
    for step, value in curve:
        lines.append(f"{int(step)},{value!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_decode_file(path: str | Path, outputs: Sequence[Sequence[int]],
                      cfg_hash: str) -> None:
    """Decoded sequences, one space-joined line each, hash comment first."""
    lines = [f"# config_hash={cfg_hash}"]
    for seq in outputs:
        lines.append(" ".join(str(int(t)) for t in seq))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
