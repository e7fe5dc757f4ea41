"""``scheme <command> --config <path> [--out <dir>] [--seed <n>]``.

Commands: train, gradcheck, plan, probe, bench, eval.  Every command writes
CSV files (with a header row) into the output directory, plus a verbatim
copy of the config file and the fully resolved config.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import io
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import accounting, analysis, bench as benchmod
from .backbone import build_model, load_checkpoint, save_checkpoint
from .config import COMMANDS, RunConfig, emit_config, parse_config_text
from .data import Dataset, generate_synthetic, load_idx
from .errors import SchemeError
from .mixers import MIXER_KINDS, MixerConfig
from .training import evaluate, gradcheck, one_minus_alpha, train

log = logging.getLogger("scheme")

FLOPS_NOTE = "# FLOPs = 2 x MACs (multiply-add convention); MACs count weight products only"


def _thread_limit():
    raw = os.environ.get("SCHEME_THREADS")
    if not raw:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(raw))


def load_datasets(rc: RunConfig) -> tuple[Dataset, Dataset | None]:
    d = rc.data
    if d.source == "idx":
        train_set = load_idx(d.images, d.labels, "train")
        eval_set = load_idx(d.eval_images, d.eval_labels, "eval") if d.eval_images else None
        return train_set, eval_set
    _, h, w = rc.model.in_shape
    kwargs = dict(classes=d.classes, grid=(h, w), structure=d.structure, channels=rc.model.in_shape[0], noise=d.noise)
    train_set = generate_synthetic(d.seed, d.n_per_class, split="train", **kwargs)
    eval_set = generate_synthetic(d.seed + 1, d.eval_n_per_class, split="eval", **kwargs) if d.eval_n_per_class else None
    return train_set, eval_set


def _write(out: Path, name: str, text: str) -> None:
    (out / name).write_text(text)
    log.info("wrote %s", out / name)


def _model(rc: RunConfig):
    model = build_model(rc.model, rc.block)
    if rc.paths.checkpoint:
        load_checkpoint(model, rc.paths.checkpoint)
    return model


def cmd_train(rc: RunConfig, out: Path) -> int:
    train_set, eval_set = load_datasets(rc)
    model = build_model(rc.model, rc.block)
    tlog = train(
        model, train_set, rc.hyper, eval_set,
        on_epoch=lambda e, lg: log.info("epoch %d loss %.4f train_acc %.4f", e, lg.loss[-1], lg.train_acc[-1]),
    )
    tlog.write(out)
    save_checkpoint(model, out / "model.ckpt")
    _, final = one_minus_alpha(model)
    if final:
        print(f"mean 1-alpha: initial {np.mean(tlog.initial_one_minus_alpha):.4f} final {np.mean(final):.4f}")
    print(f"epochs {tlog.epochs} final train_acc {tlog.train_acc[-1]:.4f} eval_acc {tlog.eval_acc[-1]:.4f}")
    return 0


def cmd_gradcheck(rc: RunConfig, out: Path) -> int:
    g = rc.gradcheck
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("mixer", "tensor", "rel_err", "passed"))
    ok = True
    for kind in MIXER_KINDS:
        block = rc.block
        if kind == "dense":
            block = dataclasses.replace(block, mixer_cfg=dataclasses.replace(block.mixer_cfg, g1=1, g2=1))
        block = dataclasses.replace(block, mixer=kind)
        report = gradcheck(block, (g.d, g.N), g.eps, g.tol, seed=rc.hyper.seed)
        ok &= report.passed
        for name, err in report.errors.items():
            w.writerow((kind, name, repr(err), int(err <= g.tol)))
        print(f"{kind:15s} worst rel_err {report.worst:.3e} {'PASS' if report.passed else 'FAIL'}")
    _write(out, "gradcheck.csv", buf.getvalue())
    return 0 if ok else 1


def cmd_plan(rc: RunConfig, out: Path) -> int:
    p = rc.plan
    budget = p.budget
    if budget <= 0:
        budget = accounting.mixer_macs(MixerConfig(d=p.d, E=p.dense_E), 1)
    plan = accounting.iso_flop_plan(p.d, budget, p.expansions, p.groups, p.rel_tol)
    _write(out, "plan.csv", accounting.plan_csv(plan))
    print(FLOPS_NOTE)
    print(f"budget {budget} MACs/token ({2 * budget} FLOPs/token), {len(plan)} configurations")
    for cfg, rep in plan:
        print(f"  {cfg.name:10s} params {rep.params:8d} macs/token {rep.macs_per_token:8d}")
    return 0


def cmd_probe(rc: RunConfig, out: Path) -> int:
    train_set, eval_set = load_datasets(rc)
    model = build_model(rc.model, rc.block)
    if rc.paths.checkpoint:
        load_checkpoint(model, rc.paths.checkpoint)
    else:
        train(model, train_set, rc.hyper)
    model.set_mode("inference")
    data = eval_set if eval_set is not None else train_set
    feats = analysis.extract_group_features(model, data, list(rc.probe.layers))
    report = analysis.group_probe(
        feats, data.labels, rc.probe.train_frac, rc.hyper.seed, rc.probe.epochs, rc.probe.lr, list(rc.probe.layers)
    )
    _write(out, "probe.csv", report.csv())
    sep = analysis.class_separability(np.concatenate(feats, axis=1), data.labels)
    _write(out, "separability.csv", sep.csv())
    print(f"group accuracies {report.group_accuracy} ensemble {report.ensemble_accuracy:.4f}")
    print(f"class separability ({sep.metric}) mean {sep.mean:.4f}")
    return 0


def cmd_bench(rc: RunConfig, out: Path) -> int:
    b = rc.bench
    dtype = {"float64": np.float64, "float32": np.float32}[b.dtype]
    rows = benchmod.iso_flop_rows(b.d, b.E, b.g, b.N, b.reps, b.warmup, dtype)
    _write(out, "bench.csv", benchmod.bench_csv(rows))
    print(FLOPS_NOTE)
    print("# timings are machine-dependent and report-only")
    for r in rows:
        print(f"  {r.kind:6s} E={r.E} g={r.g1}/{r.g2} macs {r.macs} median {r.median * 1e3:.3f} ms")
    return 0


def cmd_eval(rc: RunConfig, out: Path) -> int:
    train_set, eval_set = load_datasets(rc)
    data = eval_set if eval_set is not None else train_set
    model = _model(rc)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("mode", "accuracy", "mixer_macs_per_image"))
    for mode in ("train", "inference"):
        acc = evaluate(model, data, mode=mode)
        macs = 0
        for block, m in zip(model.blocks, model.mixers):
            n = block.grid[0] * block.grid[1]
            macs += accounting.mixer_macs(m.cfg, n, include_cca=m.has_cca and mode == "train")
        w.writerow((mode, repr(acc), macs))
        print(f"{mode:9s} accuracy {acc:.4f} mixer MACs/image {macs}")
    _write(out, "eval.csv", buf.getvalue())
    return 0


HANDLERS = {
    "train": cmd_train,
    "gradcheck": cmd_gradcheck,
    "plan": cmd_plan,
    "probe": cmd_probe,
    "bench": cmd_bench,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scheme", description=__doc__.split("\n\n")[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="key=value config file (defaults apply when omitted)")
    parser.add_argument("--out", help="output directory (overrides paths.out)")
    parser.add_argument("--seed", type=int, help="override every seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        text = Path(args.config).read_text() if args.config else ""
        rc = parse_config_text(text, args.command)
        if args.seed is not None:
            rc = rc.with_seed(args.seed)
        out = Path(args.out or rc.paths.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(text)
        (out / "resolved_config.txt").write_text(emit_config(rc))
        with _thread_limit():
            return HANDLERS[args.command](rc, out)
    except (SchemeError, OSError) as exc:
        print(f"scheme {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
