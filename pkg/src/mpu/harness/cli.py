"""Command line entry point: ``mpu <command> ...``.

Run settings come from an optional JSON config file (``--config``), then
per-field flags, then ``--set key=value`` overrides (values parsed as JSON
when possible). Outputs go under ``$MPU_OUTPUT_ROOT`` (default
``./mpu_runs``) unless ``--out`` is given.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import threading
from dataclasses import fields
from pathlib import Path

import numpy as np

from ..objectives import ObjectiveConfig, ObjectiveKind
from ..protocol import serve_tcp
from ..symmetry import apply, invert, sample_reparam, spec_to_manifest
from ..tinyformer import forward_logits
from . import checkpoint, metrics
from .experiment import ExperimentConfig, output_root, run_context, run_experiment, sweep

log = logging.getLogger("mpu")

_SCALAR_FIELDS = [f for f in fields(ExperimentConfig) if f.type in ("int", "float", "str", "bool", "str | None")]


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field (nested: model.d_model=64)")
    p.add_argument("--objective", choices=[k.value for k in ObjectiveKind])
    for f in _SCALAR_FIELDS:
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            p.add_argument(flag, dest=f.name, type=lambda s: s.lower() in ("1", "true", "yes"), default=None,
                           metavar="BOOL")
        else:
            p.add_argument(flag, dest=f.name, type=_parse_value, default=None)


def build_config(args) -> ExperimentConfig:
    d = ExperimentConfig().to_dict()
    if args.config:
        d.update(json.loads(args.config.read_text(encoding="utf-8")))
    for f in _SCALAR_FIELDS:
        v = getattr(args, f.name, None)
        if v is not None:
            d[f.name] = v
    if args.objective:
        d["objective"] = {**d["objective"], "kind": args.objective}
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        target = d
        *path, leaf = key.split(".")
        for part in path:
            target = target[part]
        target[leaf] = _parse_value(raw)
    return ExperimentConfig.from_dict(d)


def cmd_pretrain(args) -> int:
    cfg = build_config(args)
    ctx = run_context(cfg)
    out = Path(args.out) if args.out else output_root() / "pretrain"
    checkpoint.save(out / "base", ctx.theta_base, cfg.model)
    checkpoint.save(out / "theta0", ctx.theta0, cfg.model)
    data = ctx.dataset.unlearn_data()
    from ..objectives import forget_ce, retain_ce
    summary = {
        "forget_ce": {k: forget_ce(t, cfg.model, data) for k, t in
                      (("init", ctx.theta_init), ("base", ctx.theta_base), ("theta0", ctx.theta0))},
        "retain_ce": {k: retain_ce(t, cfg.model, data) for k, t in
                      (("init", ctx.theta_init), ("base", ctx.theta_base), ("theta0", ctx.theta0))},
        "task_vector_rms": {n: float(np.sqrt(np.mean(v * v))) for n, v in ctx.task_vector.items()},
    }
    (out / "pretrain.json").write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
    print(json.dumps({k: summary[k] for k in ("forget_ce", "retain_ce")}, indent=1))
    print(f"wrote {out}")
    return 0


def _print_rows(rows) -> None:
    print(",".join(metrics.COLUMNS))
    for r in rows:
        print(",".join("" if getattr(r, c) is None else str(getattr(r, c)) for c in metrics.COLUMNS))


def cmd_run(args) -> int:
    cfg = build_config(args)
    res = run_experiment(cfg, args.out or "auto", connect=args.connect)
    _print_rows(res.rows)
    print(f"wrote {res.out_dir}")
    return 0


def _sweep_values(axis: str, text: str):
    items = [t for t in text.split(",") if t]
    if axis == "round_epoch":
        return [tuple(int(x) for x in t.split("x")) for t in items]
    if axis == "copies":
        return [int(t) for t in items]
    return [float(t) for t in items]


def cmd_sweep(args) -> int:
    cfg = build_config(args)
    modes = args.modes.split(",") if args.modes else None
    report = sweep(cfg, args.axis, _sweep_values(args.axis, args.values), modes=modes,
                   out_dir=args.out or "auto", workers=args.workers)
    for c in report.cells:
        print(json.dumps(c))
    for mode, fit in report.fits.items():
        print(f"fit[{mode}]: slope={fit.slope:.4f} intercept={fit.intercept:.4f} r2={fit.r_squared:.4f}")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_verify
    reports = run_verify(quick=not args.full)
    for r in reports:
        print(r.line())
    failed = sum(not r.passed for r in reports)
    print(f"{len(reports) - failed}/{len(reports)} checks passed")
    return 1 if failed else 0


def cmd_reparam(args) -> int:
    theta, cfg = checkpoint.load(args.checkpoint)
    spec = sample_reparam(args.seed, args.copy, cfg)
    out = invert(spec, theta) if args.invert else apply(spec, theta)
    rng = np.random.default_rng(args.input_seed)
    tokens = rng.integers(cfg.vocab, size=(args.batch, cfg.max_seq))
    dev = float(np.max(np.abs(forward_logits(out, cfg, tokens) - forward_logits(theta, cfg, tokens))))
    back = invert(spec, out) if not args.invert else apply(spec, out)
    print(json.dumps({"max_logit_deviation": dev, "round_trip_error": (back - theta).max_abs(),
                      "spec": spec_to_manifest(spec) if args.show_spec else None}, indent=1))
    if args.out:
        checkpoint.save(args.out, out, cfg)
        print(f"wrote {args.out}")
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        for name in ("config.json", "metrics.csv", "final.json", "sweep.json"):
            if (path / name).exists():
                print(f"== {name}")
                _inspect_file(path / name)
        return 0
    _inspect_file(path)
    return 0


def _inspect_file(path: Path) -> None:
    if path.suffix == ".csv":
        _print_rows(metrics.read_csv(path))
    elif path.suffix in (".json", ".bin") and (path.with_suffix(".json").exists()):
        doc = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        if doc.get("format") == checkpoint.FORMAT:
            print(f"checkpoint {path.with_suffix('')}: config {doc['config_digest']}, {doc['payload_bytes']} bytes")
            for b in doc["blocks"]:
                print(f"  {b['name']:<24} {str(tuple(b['shape'])):<12} {b['dtype']} @ {b['offset']}")
        elif doc.get("version") == metrics.CSV_VERSION:
            _print_rows(metrics.read_json(path))
        else:
            print(json.dumps(doc, indent=1))
    else:
        raise SystemExit(f"don't know how to inspect {path}")


def cmd_client(args) -> int:
    from ..protocol import UnlearningClient
    cfg = build_config(args)
    ctx = run_context(cfg)
    handler = UnlearningClient(cfg.model, cfg.objective, cfg.train_config(), ctx.unlearn_data(cfg.objective),
                               cfg.wire_dtype)

    def ready(port):
        print(f"listening on {args.host}:{port}", flush=True)

    serve_tcp(handler, args.host, args.port, ready)
    return 0


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mpu", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="build the base and fine-tuned checkpoints")
    _add_config_flags(p)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("run", help="run one experiment")
    _add_config_flags(p)
    p.add_argument("--out")
    p.add_argument("--connect", metavar="HOST:PORT", help="use a TCP client started with `mpu client`")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sweep", help="grid over kappa, copies or round_epoch")
    _add_config_flags(p)
    p.add_argument("--axis", required=True, choices=["kappa", "copies", "round_epoch"])
    p.add_argument("--values", required=True, help="comma list; round_epoch as RxE, e.g. 1x10,2x5")
    p.add_argument("--modes", help="comma list of modes (kappa axis default: mpu,noised)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("verify", help="run the oracle and invariant checks")
    p.add_argument("--full", action="store_true", help="use the larger Monte-Carlo sample sizes")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("reparam", help="apply or invert a symmetry on a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--seed", type=int, default=0, help="reparameterization seed t_r")
    p.add_argument("--copy", type=int, default=1)
    p.add_argument("--invert", action="store_true")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--input-seed", type=int, default=0)
    p.add_argument("--show-spec", action="store_true")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_reparam)

    p = sub.add_parser("inspect", help="print a checkpoint manifest, metrics file or run directory")
    p.add_argument("path")
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("client", help="serve the unlearning client over TCP")
    _add_config_flags(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.set_defaults(fn=cmd_client)
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
