"""Command-line entry point: deterministic runs from a JSON config.

Subcommands cover the full pipeline — ``pretrain`` → ``train-plugin`` →
``infer``/``evaluate`` → ``mi-analyze``/``bound-check``/``gate-stats`` —
plus ``gradcheck`` for gradient verification.  Every command is a pure
function of (config, seed, input files): rerunning it writes byte-identical
artifacts.  The one exception is ``timings.json``, which records wall-clock
seconds and is documented as non-reproducible.

Exit codes: 0 success, 2 config error, 3 missing or malformed artifact,
4 numeric failure (divergence/NaN), 5 verification failure.

The ``MCTG_THREADS`` environment variable caps BLAS parallelism (default 1
for reproducible timings); it must be resolved before numpy loads, which is
why this module sets the standard thread variables at import time.
"""

import os

_threads = os.environ.get("MCTG_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ.setdefault(_var, _threads)

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import taskgen as tg
from .autodiff import grad_check
from .config import ConfigError, RunConfig
from .fileio import (ArtifactError, load_model, load_plugin, save_model,
                     save_plugin, write_decode_file, write_loss_csv,
                     write_metrics_json)
from .interference import (bound_sweep, gate_stats, measure_mi,
                           write_bound_csv, write_gates_csv, write_mi_curve_csv)
from .model import BaseModel
from .optim import encode_copy_batch, pretrain_base
from .plugins import (FAMILIES, combine_plugins, decode_with_plugins,
                      encode_with_plugins, init_plugin, train_plugin)
from .rng import SplitMix64, derive_seed
from .study import StudyConfig


class VerificationError(Exception):
    """A numeric verification (e.g. gradcheck) did not pass."""


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def _load_run(args) -> RunConfig:
    run = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        run = replace(run, seed=args.seed)
    if getattr(args, "out", None) is not None:
        run = replace(run, out_dir=args.out)
    return run


def _out_dir(run: RunConfig) -> Path:
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _streams(run: RunConfig) -> StudyConfig:
    """Data-stream layout shared with the in-memory study driver."""
    return StudyConfig(model=run.model, data_seed=run.data_seed,
                       key_drop=run.key_drop, n_train=run.n_train,
                       n_heldout=run.n_heldout, n_eval=run.n_eval,
                       core_min=run.core_min, core_max=run.core_max)


def _require_model(args, run: RunConfig) -> BaseModel:
    path = args.model or str(_out_dir(run) / "model.bin")
    return load_model(path)


def _load_plugins(paths: str | None, config) -> list:
    if not paths:
        return []
    return [load_plugin(p, config) for p in paths.split(",") if p]


def _parse_aspect(text: str) -> tuple[str, object | None]:
    """``NAME`` or ``NAME=VALUE``; keyword values are comma-joined ints."""
    name, _, value = text.partition("=")
    if not name:
        raise ConfigError(f"empty aspect in {text!r}")
    if not value:
        return name, None
    if name == "keyword":
        try:
            return name, [int(t) for t in value.split(",")]
        except ValueError:
            raise ConfigError(f"keyword value must be comma-joined ints, got {value!r}") from None
    return name, value


def _update_timings(out: Path, stage: str, seconds: float) -> None:
    path = out / "timings.json"
    data = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
    data[stage] = seconds
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _decode_bare(model: BaseModel, xs: list[list[int]], max_steps: int) -> list[list[int]]:
    """Greedy copy decoding without plugins, grouped by input length."""
    groups: dict[int, list[int]] = {}
    for i, x in enumerate(xs):
        groups.setdefault(len(x), []).append(i)
    outputs: list[list[int] | None] = [None] * len(xs)
    for length in sorted(groups):
        idxs = groups[length]
        enc_out, enc_len = encode_copy_batch(model, [xs[i] for i in idxs])
        for i, out in zip(idxs, model.greedy_decode(enc_out, len(idxs),
                                                    enc_len, max_steps)):
            outputs[i] = out
    return outputs  # type: ignore[return-value]


def _corpus_examples(args, run: RunConfig) -> list[tg.Example]:
    if not args.input:
        raise ConfigError("--input corpus file is required")
    try:
        return tg.load_jsonl(args.input)
    except FileNotFoundError:
        raise ArtifactError(f"corpus file not found: {args.input}") from None


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_pretrain(args) -> None:
    run = _load_run(args)
    out = _out_dir(run)
    streams = _streams(run)
    train = tg.gen_base_corpus(run.n_train, seed=streams.corpus_seed("base-train"))
    held = tg.gen_base_corpus(run.n_heldout, seed=streams.corpus_seed("base-heldout"))
    t0 = time.perf_counter()
    model, metrics = pretrain_base(train, held, run.model, seed=run.seed,
                                   steps=run.pretrain_steps, lr=run.pretrain_lr,
                                   batch_size=run.pretrain_batch)
    wall = time.perf_counter() - t0
    save_model(out / "model.bin", model)
    write_metrics_json(out / "pretrain_metrics.json",
                       {"heldout_accuracy": metrics["heldout_accuracy"],
                        "final_loss": metrics["final_loss"],
                        "steps": metrics["steps"], "seed": run.seed}, run.hash)
    write_loss_csv(out / "pretrain_loss.csv", metrics["loss_curve"], run.hash)
    _update_timings(out, "pretrain", wall)
    print(f"pretrain: heldout_accuracy={metrics['heldout_accuracy']!r} "
          f"steps={metrics['steps']} -> {out / 'model.bin'}")
    print(f"wall_seconds={wall:.1f}", file=sys.stderr)


def cmd_train_plugin(args) -> None:
    run = _load_run(args)
    out = _out_dir(run)
    if not args.aspect:
        raise ConfigError("--aspect NAME[=VALUE] is required")
    aspect, value = _parse_aspect(args.aspect)
    family = args.family or run.family
    if family not in FAMILIES:
        raise ConfigError(f"unknown family {family!r}")
    model = _require_model(args, run)
    streams = _streams(run)
    pinned = value is not None
    tag = f"train/{aspect}" + ("/pinned" if pinned else "")
    corpus = tg.gen_multi_aspect([aspect], run.n_train,
                                 seed=streams.corpus_seed(tag),
                                 values={aspect: value} if pinned else None,
                                 min_len=run.core_min, max_len=run.core_max)
    t0 = time.perf_counter()
    plugin, metrics = train_plugin(model, corpus, aspect, family, run.seed,
                                   steps=run.steps_for(aspect), lr=run.plugin_lr,
                                   batch_size=run.plugin_batch, value=value,
                                   key_drop=run.key_drop)
    wall = time.perf_counter() - t0
    label = plugin.label()
    save_plugin(out / f"plugin_{family}_{label}.bin", plugin, model.config)
    write_loss_csv(out / f"loss_{family}_{label}.csv", metrics["loss_curve"], run.hash)
    write_metrics_json(out / f"metrics_{family}_{label}.json",
                       {"aspect": aspect, "family": family,
                        "final_loss": metrics["final_loss"],
                        "steps": metrics["steps"], "seed": run.seed}, run.hash)
    _update_timings(out, f"train-plugin/{family}/{label}", wall)
    print(f"train-plugin: {family}/{label} final_loss={metrics['final_loss']!r} "
          f"-> {out / f'plugin_{family}_{label}.bin'}")
    print(f"wall_seconds={wall:.1f}", file=sys.stderr)


def cmd_infer(args) -> None:
    run = _load_run(args)
    out = _out_dir(run)
    model = _require_model(args, run)
    plugins = _load_plugins(args.plugins, model.config)
    if args.input:
        examples = _corpus_examples(args, run)
    elif args.tokens:
        try:
            x = [int(t) for t in args.tokens.replace(",", " ").split()]
        except ValueError:
            raise ConfigError(f"--tokens must be integers, got {args.tokens!r}") from None
        values: dict = {}
        for spec in args.aspect_values or []:
            name, value = _parse_aspect(spec)
            if value is None:
                raise ConfigError(f"--aspect {spec!r} needs =VALUE for inference")
            values[name] = value
        examples = [tg.Example(x=x, y=[], aspects=values)]
    else:
        raise ConfigError("infer needs --input or --tokens")
    max_steps = min(max(len(ex.x) for ex in examples) + 8,
                    model.config.max_len - 1)
    if plugins:
        combo = combine_plugins(plugins, model.config)
        outputs = decode_with_plugins(model, combo, examples, max_steps=max_steps)
    else:
        outputs = _decode_bare(model, [list(ex.x) for ex in examples], max_steps)
    for seq in outputs:
        print(" ".join(str(t) for t in seq))
    write_decode_file(out / "decode.txt", outputs, run.hash)


def cmd_evaluate(args) -> None:
    run = _load_run(args)
    out = _out_dir(run)
    model = _require_model(args, run)
    plugins = _load_plugins(args.plugins, model.config)
    if not plugins:
        raise ConfigError("evaluate needs --plugins")
    examples = _corpus_examples(args, run)
    combo = combine_plugins(plugins, model.config)
    outputs = decode_with_plugins(model, combo, examples)
    result = tg.evaluate(outputs, examples)
    gaps = None
    if args.baseline:
        try:
            baseline = json.loads(Path(args.baseline).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ArtifactError(f"baseline metrics not found: {args.baseline}") from None
        except json.JSONDecodeError as exc:
            raise ArtifactError(f"baseline metrics not valid JSON: {exc}") from None
        base_aspects = baseline.get("aspects", {})
        gaps = {a: result["aspects"][a] - base_aspects[a]
                for a in result["aspects"] if a in base_aspects}
    metrics = dict(result)
    metrics["gaps"] = gaps
    write_metrics_json(out / "eval_metrics.json", metrics, run.hash)
    scores = " ".join(f"{a}={v!r}" for a, v in result["aspects"].items())
    print(f"evaluate: {scores} average={result['average']!r} n={result['n']}")
    if gaps is not None:
        print("gaps: " + " ".join(f"{a}={v!r}" for a, v in gaps.items()))


def cmd_mi_analyze(args) -> None:
    run = _load_run(args)
    out = _out_dir(run)
    model = _require_model(args, run)
    separate = _load_plugins(args.plugins, model.config)
    joint = _load_plugins(args.joint, model.config)
    if not separate or not joint:
        raise ConfigError("mi-analyze needs --plugins (separate) and --joint")
    examples = _corpus_examples(args, run)
    report = measure_mi(model, combine_plugins(separate, model.config),
                        combine_plugins(joint, model.config), examples,
                        seed=run.seed)
    write_mi_curve_csv(out / "mi_curve.csv", [report], run.hash)
    curve = " ".join(f"L{j}={v!r}" for j, v in enumerate(report.per_layer, start=1))
    print(f"mi-analyze: family={report.family} {curve}")


def cmd_bound_check(args) -> None:
    run = _load_run(args)
    out = _out_dir(run)
    model = _require_model(args, run)
    hats = _load_plugins(args.plugins, model.config)
    joint = _load_plugins(args.joint, model.config)
    if len(hats) != 2 or len(joint) != 2:
        raise ConfigError("bound-check needs exactly two --plugins and two --joint")
    examples = _corpus_examples(args, run)
    sweep = bound_sweep(model, hats[0], hats[1], joint, examples,
                        n_instances=args.instances, seed=run.seed)
    write_bound_csv(out / "bounds.csv", sweep.singles + sweep.multis, run.hash)
    violations = sweep.conditional_violations()
    conditional = sweep.conditional_instances()
    summary = {
        "n_instances": len(sweep.singles),
        "assumption_fraction": sweep.assumption_fraction,
        "n_conditional": len(conditional),
        "n_conditional_violations": len(violations),
        "max_recon_residual": sweep.max_recon_residual,
        "max_mass_err": sweep.max_mass_err,
    }
    write_metrics_json(out / "bound_summary.json", summary, run.hash)
    print(f"bound-check: instances={summary['n_instances']} "
          f"assumption_fraction={summary['assumption_fraction']!r} "
          f"conditional={summary['n_conditional']} "
          f"violations={summary['n_conditional_violations']}")


def cmd_gate_stats(args) -> None:
    run = _load_run(args)
    out = _out_dir(run)
    model = _require_model(args, run)
    plugins = _load_plugins(args.plugins, model.config)
    if not plugins:
        raise ConfigError("gate-stats needs --plugins")
    for plugin in plugins:
        stats = gate_stats(plugin, model)
        path = out / f"gates_{plugin.label()}.csv"
        write_gates_csv(path, stats, run.hash)
        means = " ".join(f"L{j}={g:.4f}" for j, g in zip(stats.layers, stats.gate_mean))
        print(f"gate-stats: {plugin.label()} {means} "
              f"correlation={stats.correlation!r} -> {path}")


def cmd_gradcheck(args) -> None:
    run = _load_run(args)
    out = _out_dir(run)
    per_family = max(1, args.entries // len(FAMILIES))
    all_rows = []
    worst = (0.0, "", 0)
    total = 0
    for family in FAMILIES:
        model = BaseModel(run.model, seed=run.seed)
        plugins = [init_plugin("shift", family, run.model, run.seed),
                   init_plugin("mark", family, run.model, run.seed)]
        combo = combine_plugins(plugins, run.model)
        # A fixed core length keeps every example the same shape, so the
        # two examples batch together for one loss.
        examples = tg.gen_multi_aspect(
            ["shift", "mark"], 2,
            seed=derive_seed(run.data_seed, f"gradcheck/{family}"),
            min_len=3, max_len=3)
        xs = [ex.x for ex in examples]
        values = [ex.aspects for ex in examples]
        y = np.array([ex.y for ex in examples], dtype=np.int64)

        def build_loss():
            enc_out, b, length, _ = encode_with_plugins(model, xs, combo, values)
            return model.sequence_loss(enc_out, b, length, y)

        params = dict(model.params)
        for plugin in plugins:
            for k, t in plugin.params.items():
                params[f"{plugin.label()}/{k}"] = t
        names = sorted(params)
        rng = SplitMix64(derive_seed(run.seed, f"gradcheck/{family}"))
        indices = []
        for _ in range(per_family):
            name = names[int(rng.integers(1, 0, len(names))[0])]
            flat = int(rng.integers(1, 0, params[name].data.size)[0])
            indices.append((name, flat))
        report = grad_check(build_loss, params, indices, step=1e-5, tol=1e-4)
        total += report.n_checked
        if report.max_rel_err >= worst[0]:
            worst = (report.max_rel_err, f"{family}:{report.worst_param}",
                     report.worst_index)
        for name, ix, an, fd, rel in report.rows:
            all_rows.append(f"{family},{name},{ix},{an!r},{fd!r},{rel!r}")
        print(f"gradcheck[{family}]: {report.summary()}")
    lines = [f"# config_hash={run.hash}",
             "family,param,index,analytic,numeric,rel_err"] + all_rows
    (out / "gradcheck.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"gradcheck: total_entries={total} max_rel_err={worst[0]:.3e} "
          f"worst={worst[1]}[{worst[2]}]")
    if worst[0] >= 1e-4:
        raise VerificationError(
            f"gradient check failed: max rel err {worst[0]:.3e} >= 1e-4")


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptplugs",
        description="Train, combine, and analyze aspect plugins on a frozen "
                    "sequence model.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model_flag=True):
        p.add_argument("--config", help="run config JSON (defaults used if omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the config output directory")
        if model_flag:
            p.add_argument("--model", help="base model checkpoint path "
                                           "(default: OUT/model.bin)")

    p = sub.add_parser("pretrain", help="train and freeze the base model")
    common(p, model_flag=False)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-plugin", help="train one aspect plugin")
    common(p)
    p.add_argument("--aspect", required=True, metavar="NAME[=VALUE]",
                   help="aspect to train; =VALUE pins one value (required "
                        "for prefix-family categorical control)")
    p.add_argument("--family", choices=list(FAMILIES),
                   help="plugin family (default: config family)")
    p.set_defaults(func=cmd_train_plugin)

    p = sub.add_parser("infer", help="greedy-decode with zero or more plugins")
    common(p)
    p.add_argument("--plugins", help="comma-joined plugin files")
    p.add_argument("--input", help="JSONL corpus to decode")
    p.add_argument("--tokens", help="space- or comma-joined input token ids")
    p.add_argument("--aspect", dest="aspect_values", action="append",
                   metavar="NAME=VALUE",
                   help="constraint value for --tokens mode (repeatable)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score a plugin combination on a corpus")
    common(p)
    p.add_argument("--plugins", help="comma-joined plugin files")
    p.add_argument("--input", help="JSONL evaluation corpus")
    p.add_argument("--baseline", help="metrics JSON with single-plugin scores; "
                                      "enables the per-aspect gap column")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("mi-analyze", help="per-layer interference between "
                                          "separate and joint plugins")
    common(p)
    p.add_argument("--plugins", help="separately trained plugin files")
    p.add_argument("--joint", help="jointly trained plugin files")
    p.add_argument("--input", help="JSONL evaluation corpus")
    p.set_defaults(func=cmd_mi_analyze)

    p = sub.add_parser("bound-check", help="attention decompositions and "
                                           "interference bounds")
    common(p)
    p.add_argument("--plugins", help="two separately trained plugin files")
    p.add_argument("--joint", help="two jointly trained plugin files")
    p.add_argument("--input", help="JSONL corpus to probe")
    p.add_argument("--instances", type=int, default=200,
                   help="number of sampled probe instances (default 200)")
    p.set_defaults(func=cmd_bound_check)

    p = sub.add_parser("gate-stats", help="per-layer gate statistics of "
                                          "gated plugins")
    common(p)
    p.add_argument("--plugins", help="comma-joined gated plugin files")
    p.set_defaults(func=cmd_gate_stats)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check "
                                         "over all families")
    common(p, model_flag=False)
    p.add_argument("--entries", type=int, default=600,
                   help="total parameter entries to probe (default 600)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ArtifactError, FileNotFoundError) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return 3
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except VerificationError as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return 5
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
