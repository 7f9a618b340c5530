"""Command-line front end.

    lipsoc [--seed N] [--deterministic] [--config FILE] [--out DIR] <command> ...

Commands: verify, bench-grad, train, certify, report, dataset gen.  Values in
the config file (``key = value`` per line, keys named like the long flags)
become defaults; flags given on the command line win.
"""
from __future__ import annotations

import argparse
import contextlib
import sys
import time
from pathlib import Path

import numpy as np

from . import bench, pipeline, verify
from .checkpoint import load_config, load_network, save_network
from .data import (
    SyntheticSpec,
    load_dataset,
    parse_shape,
    save_dataset,
    shape_for_dims,
    synthetic_dataset,
)
from .manifest import RunManifest, file_digest
from .network import HEAD_KINDS, POOL_KINDS, LipConvnetConfig, build_lipconvnet
from .train import TrainConfig, sgd_train

GLOBAL_KEYS = ("seed", "deterministic", "out")
TRUE = {"1", "true", "yes", "on"}
FALSE = {"0", "false", "no", "off"}


def _ints(text: str) -> list[int]:
    return [int(v) for v in str(text).split(",") if v.strip()]


def _global_flags(parser, suppress: bool) -> None:
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--seed", type=int, **({} if suppress else {"default": 0}), **kw,
                        help="seed for every random choice (default 0)")
    parser.add_argument("--deterministic", action="store_true", **kw,
                        help="single-threaded BLAS for bit-reproducible output")
    parser.add_argument("--config", **({} if suppress else {"default": None}), **kw,
                        help="key=value file supplying defaults")
    parser.add_argument("--out", **({} if suppress else {"default": "out"}), **kw,
                        help="output directory (default ./out)")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="lipsoc", description=__doc__.split("\n\n")[0])
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = subs["verify"] = sub.add_parser("verify", parents=[common], help="run invariant suites")
    p.add_argument("--suite", action="append", default=None,
                   help=f"suite name ({', '.join(verify.SUITES)}, all); repeatable or comma separated")
    p.add_argument("--pairs", type=int, default=100_000, help="sample pairs per pooling variant")
    p.add_argument("--corrupt-skew", action="store_true", help=argparse.SUPPRESS)

    p = subs["bench-grad"] = sub.add_parser("bench-grad", parents=[common],
                                            help="time exact vs fast SOC weight gradients")
    p.add_argument("--depths", type=_ints, default="6,11,16,21", help="conv-layer counts (1 + multiple of 5)")
    p.add_argument("--ks", type=_ints, default="10", help="series lengths k")
    p.add_argument("--reps", type=int, default=bench.MIN_REPS)
    p.add_argument("--warmup", type=int, default=bench.MIN_WARMUP)
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--spatial", type=int, default=32)
    p.add_argument("--layer-only", action="store_true", help="skip the full-network step timing")

    p = subs["train"] = sub.add_parser("train", parents=[common], help="train a LipConvnet")
    p.add_argument("--data", required=False, help="LCDS file or synthetic:classes=2,shape=3x16x16,...")
    p.add_argument("--depth", type=int, default=5)
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--blocks", type=int, default=3)
    p.add_argument("--pool", choices=POOL_KINDS, default="max")
    p.add_argument("--head", choices=HEAD_KINDS, default="linear")
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--unsigned-pool", action="store_true", help="unsigned (distance-to-wedge) angular pooling")
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--lr-drop", type=float, default=0.1)
    p.add_argument("--drop-epochs", type=_ints, default="15,20")
    p.add_argument("--rho", type=float, default=36 / 255)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--pgd-steps", type=int, default=5)
    p.add_argument("--pgd-step-size", type=float, default=None)
    p.add_argument("--k-train", type=int, default=5)
    p.add_argument("--k-eval", type=int, default=15)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--max-operator-norm", type=float, default=1.0, help="0 disables the cap")
    p.add_argument("--exact-grad", action="store_true", help="exact SOC weight gradient")

    p = subs["certify"] = sub.add_parser("certify", parents=[common], help="certify a dataset slice")
    p.add_argument("--checkpoint", default=None, help="default: <out>/checkpoint.lcrt")
    p.add_argument("--data", required=False)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--top-j", type=int, default=None)
    p.add_argument("--audit-iters", type=int, default=200)

    p = subs["report"] = sub.add_parser("report", parents=[common], help="merge runs into a report")
    p.add_argument("--run", action="append", default=None,
                   help="NAME=DIR holding history.csv / certificates.csv / certify_summary.csv")

    p = subs["dataset"] = sub.add_parser("dataset", parents=[common], help="dataset tools")
    dsub = p.add_subparsers(dest="dataset_command", required=True)
    g = subs["dataset gen"] = dsub.add_parser("gen", parents=[common], help="write a synthetic LCDS file")
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--dims", type=int, default=None, help="pixel count (3-channel square if possible)")
    g.add_argument("--shape", type=parse_shape, default="3,16,16")
    g.add_argument("--margin", type=float, default=1.0)
    g.add_argument("--count", type=int, default=256)
    g.add_argument("--noise", type=float, default=None)
    g.add_argument("--output", default=None, help="default: <out>/dataset.lcds")
    return parser, subs


def _coerce(parser: argparse.ArgumentParser, key: str, value: str):
    for action in parser._actions:
        if action.dest == key:
            if isinstance(action, (argparse._StoreTrueAction,)):
                low = value.lower()
                if low not in TRUE | FALSE:
                    raise SystemExit(f"config: {key} must be a boolean, got {value!r}")
                return low in TRUE
            return value  # argparse applies ``type`` to string defaults
    return None


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if known.config:
        path = Path(known.config)
        if not path.exists():
            raise SystemExit(f"config file {path} does not exist")
        values = load_config(path)
        command = next((a for a in argv if a in subs or a == "dataset"), None)
        if command == "dataset":
            command = "dataset gen"
        target = subs.get(command)
        for key, value in values.items():
            if key in GLOBAL_KEYS:
                parser.set_defaults(**{key: _coerce(parser, key, value)})
                continue
            if target is None or _coerce(target, key, value) is None:
                raise SystemExit(f"config: unknown key {key!r} for command {command!r}")
            target.set_defaults(**{key: _coerce(target, key, value)})
    args = parser.parse_args(argv)
    for action in parser._actions:
        if action.dest in GLOBAL_KEYS + ("config",) and not hasattr(args, action.dest):
            setattr(args, action.dest, parser.get_default(action.dest))
    return args


# -- data -------------------------------------------------------------------

def dataset_from_arg(text: str | None, seed: int):
    if not text:
        raise SystemExit("--data is required (LCDS path or synthetic:key=value,...)")
    if text.startswith("synthetic"):
        fields = {}
        body = text.split(":", 1)[1] if ":" in text else ""
        for item in filter(None, body.split(",")):
            key, _, value = item.partition("=")
            fields[key.strip()] = value.strip()
        kwargs = {"seed": int(fields.pop("seed", seed))}
        for key, cast in (("classes", int), ("margin", float), ("count", int), ("noise", float)):
            if key in fields:
                kwargs[key] = cast(fields.pop(key))
        if "shape" in fields:
            kwargs["shape"] = parse_shape(fields.pop("shape"))
        if "dims" in fields:
            kwargs["shape"] = shape_for_dims(int(fields.pop("dims")))
        if fields:
            raise SystemExit(f"unknown synthetic fields: {sorted(fields)}")
        return synthetic_dataset(SyntheticSpec(**kwargs))
    return load_dataset(text)


def _data_id(text: str) -> str:
    """Synthetic specs identify themselves; files by content, not path."""
    return text if text.startswith("synthetic") else file_digest(text)


# -- commands ---------------------------------------------------------------

def cmd_verify(args, out: Path, manifest: RunManifest) -> int:
    names = [n for s in (args.suite or ["all"]) for n in s.split(",") if n]
    manifest.config = {"suites": names, "pairs": args.pairs, "corrupt_skew": args.corrupt_skew}
    try:
        checks = verify.run_suites(names, seed=args.seed, pairs=args.pairs, corrupt_skew=args.corrupt_skew)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    lines = [c.line() for c in checks]
    failed = sum(not c.passed for c in checks)
    lines.append(f"{len(checks) - failed}/{len(checks)} checks passed")
    print("\n".join(lines))
    (out / "verify.txt").write_text(f"# manifest={manifest.id}\n" + "\n".join(lines) + "\n")
    return 1 if failed else 0


def cmd_bench(args, out: Path, manifest: RunManifest) -> int:
    try:
        results, raw = bench.bench_grad(args.depths, args.ks, args.reps, args.warmup, args.channels,
                                        args.batch, args.spatial, args.seed, not args.layer_only,
                                        log=lambda r: print(f"{r.config_id}: reduction {r.reduction:.4f}"))
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    (out / "bench.csv").write_text(bench.results_csv(results, manifest.id))
    (out / "bench_raw.csv").write_text(bench.raw_csv(raw, manifest.id))
    md = bench.results_markdown(results, manifest.id)
    if len(set(args.ks)) >= 2:
        fast, exact, ratio = bench.slope_ratio(results)
        md += f"\nWeight-gradient slope in k: fast {fast:.3e} s, exact {exact:.3e} s, ratio {ratio:.4f}\n"
    (out / "bench.md").write_text(md)
    print(md)
    return 0


def _arch(args, data) -> LipConvnetConfig:
    return LipConvnetConfig(depth=args.depth, base_channels=args.base_channels, blocks=args.blocks,
                            pool=args.pool, head=args.head, hidden=args.hidden, in_shape=data.shape,
                            classes=data.classes, k_train=args.k_train, k_eval=args.k_eval,
                            signed_pool=not args.unsigned_pool)


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, lr=args.lr, lr_drop=args.lr_drop,
                       drop_epochs=tuple(args.drop_epochs), rho=args.rho, gamma=args.gamma,
                       pgd_steps=args.pgd_steps, pgd_step_size=args.pgd_step_size,
                       k_train=args.k_train, k_eval=args.k_eval, seed=args.seed,
                       batch_size=args.batch_size, exact_grad=args.exact_grad,
                       max_operator_norm=args.max_operator_norm or None)


def cmd_train(args, out: Path, manifest: RunManifest) -> int:
    data = dataset_from_arg(args.data, args.seed)
    try:
        arch = _arch(args, data)
        tcfg = _train_config(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    manifest.config = {"arch": arch.to_dict(), "train": tcfg.to_dict(), "data": _data_id(args.data)}
    net = build_lipconvnet(arch, seed=args.seed)
    result = sgd_train(net, data, tcfg, log=lambda r: print(
        f"epoch {r.epoch}: loss {r.loss:.5f} (ce {r.ce:.5f}, reg {r.reg:.5f}) "
        f"{r.seconds:.2f}s, SOC weight-grad {r.soc_grad_seconds:.3f}s [{r.grad_path}]"))
    save_network(net, out / "checkpoint.lcrt", extra={"manifest": int(manifest.id, 16)})
    (out / "history.csv").write_text(pipeline.history_csv(result.history, manifest.id))
    (out / "history_timing.csv").write_text(pipeline.history_timing_csv(result.history, manifest.id))
    if result.diverged:
        print(f"training diverged ({result.message}); wrote last good checkpoint", file=sys.stderr)
        return 3
    print(f"initial loss {result.initial_loss:.5f}, final loss {result.final_loss:.5f}")
    return 0


def cmd_certify(args, out: Path, manifest: RunManifest) -> int:
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.lcrt"
    try:
        net, _ = load_network(ckpt)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    data = dataset_from_arg(args.data, args.seed)
    stop = None if args.count is None else args.start + args.count
    data = data.subset(args.start, stop)
    manifest.config = {"checkpoint": file_digest(ckpt), "data": _data_id(args.data), "start": args.start,
                       "count": len(data), "top_j": args.top_j}
    try:
        records, corr = pipeline.certify_dataset(net, data, args.top_j, audit_iters=args.audit_iters,
                                                 offset=args.start)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    (out / "certificates.csv").write_text(pipeline.certificates_csv(records, manifest.id))
    (out / "certify_timing.csv").write_text(pipeline.certify_timing_csv(records, manifest.id))
    summary = pipeline.summary_csv(records, net.config.head, corr, manifest.id)
    (out / "certify_summary.csv").write_text(summary)
    print(summary, end="")
    return 0


def cmd_report(args, out: Path, manifest: RunManifest) -> int:
    specs = args.run or [f"{out.name}={out}"]
    runs = []
    for spec in specs:
        name, _, folder = spec.partition("=")
        folder = Path(folder or name)
        found = {key: folder / fname for key, fname in (("history", "history.csv"),
                                                        ("certificates", "certificates.csv"),
                                                        ("summary", "certify_summary.csv"))
                 if (folder / fname).exists()}
        if not found:
            print(f"error: {folder} holds no history or certificate files", file=sys.stderr)
            return 2
        runs.append(pipeline.RunInputs(name, **found))
    manifest.config = {"runs": [r.name for r in runs],
                       "inputs": [pipeline.manifest_of(p) for r in runs
                                  for p in (r.history, r.certificates, r.summary) if p]}
    for fname, text in pipeline.build_report(runs, manifest.id).items():
        (out / fname).write_text(text)
    print((out / "report.md").read_text(), end="")
    return 0


def cmd_dataset_gen(args, out: Path, manifest: RunManifest) -> int:
    shape = shape_for_dims(args.dims) if args.dims else tuple(args.shape)
    spec = SyntheticSpec(classes=args.classes, shape=shape, margin=args.margin, count=args.count,
                         seed=args.seed, noise=args.noise)
    manifest.config = {"spec": spec.__dict__ | {"shape": list(shape)}}
    path = Path(args.output) if args.output else out / "dataset.lcds"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(synthetic_dataset(spec), path)
    print(f"wrote {spec.count} samples of shape {shape} to {path}")
    return 0


def main(argv=None) -> int:
    args = parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    command = args.command if args.command != "dataset" else "dataset gen"
    manifest = RunManifest(args.seed, command, {})
    limiter = contextlib.nullcontext()
    if args.deterministic:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(1)
    np.seterr(over="ignore")
    start = time.perf_counter()
    with limiter:
        if command == "verify":
            code = cmd_verify(args, out, manifest)
        elif command == "bench-grad":
            manifest.config = {k: getattr(args, k) for k in ("depths", "ks", "reps", "warmup",
                                                              "channels", "batch", "spatial", "layer_only")}
            code = cmd_bench(args, out, manifest)
        elif command == "train":
            code = cmd_train(args, out, manifest)
        elif command == "certify":
            code = cmd_certify(args, out, manifest)
        elif command == "report":
            code = cmd_report(args, out, manifest)
        else:
            code = cmd_dataset_gen(args, out, manifest)
    manifest.finish()
    manifest.write(out)
    print(f"[{command}] done in {time.perf_counter() - start:.1f}s", file=sys.stderr)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
