"""Command-line entry point: ``bnnreuse <subcommand> ...``.

Every stochastic generator takes a mandatory ``--seed``. Reports go to
stdout (or ``--out``) as CSV unless ``--format json`` is given.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import archsim
from .counters import CostCounters
from .engine import BACKENDS, infer
from .errors import BnnError
from .model import (
    BINARYNET_INPUT,
    BINARYNET_LAYERS,
    BINARYNET_PARTITION_PARAMS,
    gen_input,
    gen_synthetic_model,
    load_images,
    load_model,
    save_images,
    save_model,
    shipped_model_path,
    workload_summary,
)
from .reorder import MAX_REORDER_RANGE, make_reorder_plan
from .report import FORMATS, emit_report
from .similarity import REPORT_COLUMNS, dataset_report, kernel_similarity, plan_kernel_similarity


def _parse_arch(text: str):
    """``conv:3x3x16x32,pool,conv:3x3x32x32`` -> layer entries."""
    layers = []
    for item in filter(None, (t.strip() for t in text.split(","))):
        if item == "pool":
            layers.append("pool")
            continue
        kind, _, dims = item.partition(":")
        parts = dims.split("x")
        if kind != "conv" or len(parts) != 4:
            raise BnnError(f"bad layer {item!r}; expected conv:RxSxCxK or pool")
        layers.append(("conv", *(int(p) for p in parts)))
    if not layers:
        raise BnnError("empty architecture")
    return layers


def _parse_dims(text: str) -> tuple[int, int, int]:
    parts = text.split("x")
    if len(parts) != 3:
        raise BnnError(f"bad dims {text!r}; expected HxWxC")
    return tuple(int(p) for p in parts)


def _model(path):
    return load_model(path or shipped_model_path())


def _config(path):
    return archsim.load_config(path) if path else archsim.ArchConfig()


def _emit(args, records, columns=None):
    emit_report(records, args.format, args.out or sys.stdout, columns)


def _attach_plans(m, partitions, block_size):
    """Plans for every conv layer; ``partitions`` is one K or one K per conv."""
    conv = m.conv_indices()
    if len(partitions) == 1:
        partitions = partitions * len(conv)
    if len(partitions) != len(conv):
        raise BnnError(f"got {len(partitions)} partition counts for {len(conv)} conv layers")
    plans = {}
    for i, K in zip(conv, partitions):
        ks = m.layers[i].weights
        plans[i] = make_reorder_plan(ks, min(K, ks.k), block_size)
    return m.with_plans(plans)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_model(args):
    if args.binarynet:
        dims, layers = BINARYNET_INPUT, BINARYNET_LAYERS
    else:
        dims, layers = _parse_dims(args.input), _parse_arch(args.arch)
    m = gen_synthetic_model(dims, layers, seed=args.seed, activation=args.activation,
                            fixed_format=(args.total_bits, args.frac_bits), padding=args.padding)
    if args.plan:
        parts, block = args.partitions, args.block_size or None
        if parts is None:
            # whole-layer mode needs the layer's K; block mode cuts one 64-kernel partition per block
            parts = [k for _, k in BINARYNET_PARTITION_PARAMS] if args.binarynet and block is None else [1]
        m = _attach_plans(m, parts, block)
    save_model(m, args.out)
    print(f"wrote {args.out}: {len(m.layers)} layers, {len(m.plans)} plans")


def cmd_gen_inputs(args):
    dims = _parse_dims(args.dims)
    fixed = (args.total_bits, args.frac_bits) if args.fixed else None
    images = [gen_input(args.kind, dims, args.seed + n, p=args.p, fixed=fixed) for n in range(args.count)]
    save_images(args.out, images)
    print(f"wrote {args.out}: {args.count} x {dims}")


def cmd_analyze(args):
    m = _model(args.model)
    report = dataset_report(m, load_images(args.inputs), args.limit, args.dataset, args.network)
    rows = report.rows()
    if args.headline:
        rows = rows[:1]
    _emit(args, rows, REPORT_COLUMNS)


def cmd_reorder(args):
    m = _model(args.model)
    m = _attach_plans(m, args.partitions, args.block_size or None)
    rows = []
    for i, plan in m.plans.items():
        ks = m.layers[i].weights
        post = plan_kernel_similarity(ks, plan).ratio if plan.k > plan.K else None
        rows.append({"layer": m.layers[i].name or f"layer{i}", "kernels": plan.k, "partitions": plan.K,
                     "reorder_range": plan.max_range, "sequence_bits": plan.sequence_bits(),
                     "kernel_sim_pre": kernel_similarity(ks).ratio if ks.k > 1 else None,
                     "kernel_sim_post": post})
    if args.save:
        save_model(m, args.save)
    _emit(args, rows)


def cmd_infer(args):
    m = _model(args.model)
    images = load_images(args.inputs)
    if args.backend == "weight_reuse" and not all(i in m.plans for i in m.conv_indices()):
        m = _attach_plans(m, [1], MAX_REORDER_RANGE)
    backends = [args.backend]
    if args.check_equivalence:
        backends = ["reference"] + [b for b in BACKENDS if b != "reference"]
        if not all(i in m.plans for i in m.conv_indices()):
            m = _attach_plans(m, [1], MAX_REORDER_RANGE)
    rows, mismatches = [], 0
    for n, img in enumerate(images):
        results = {b: infer(m, img, b, row_reset=not args.no_row_reset) for b in backends}
        ref = results[backends[0]]
        for b, res in results.items():
            same = np.array_equal(res.accumulators, ref.accumulators)
            mismatches += not same
            rows.append({"image": n, "backend": b, "prediction": res.prediction,
                         "matches_reference": same, **res.counters.as_dict()})
    if args.check_equivalence:
        msg = "EXACT MATCH" if mismatches == 0 else f"MISMATCH in {mismatches} backend runs"
        print(msg, file=sys.stderr if args.out is None and args.report else sys.stdout)
        if args.report:
            _emit(args, rows)
        return 0 if mismatches == 0 else 1
    _emit(args, rows)
    return 0


def cmd_simulate(args):
    m = _model(args.model)
    cfg = _config(args.config)
    if args.sweep:
        _emit(args, archsim.speedup_curve(m, args.kernel_sim, cfg, partition_size=args.block_size))
        return
    if args.classes:
        _emit(args, archsim.class_speedups(m, cfg, seed=args.seed))
        return
    if args.inputs is None:
        raise BnnError("simulate needs --inputs, --sweep or --classes")
    images = load_images(args.inputs)
    if args.strategy == "weight_reuse" and not all(i in m.plans for i in m.conv_indices()):
        m = _attach_plans(m, [1], MAX_REORDER_RANGE)
    rows = []
    for n, img in enumerate(images):
        res = infer(m, img, "reference", keep_activations=True)
        for i in m.conv_indices():
            trace = archsim.simulate_layer(m.layers[i], res.activations[i], args.strategy, cfg,
                                           m.plans.get(i), not args.no_row_reset)
            rows.append({"image": n, **trace.row(cfg)})
    _emit(args, rows)


def cmd_compare(args):
    m = _model(args.model)
    images = load_images(args.inputs)
    base, reuse = CostCounters(), CostCounters()
    backend = args.backend
    if backend == "weight_reuse" and not all(i in m.plans for i in m.conv_indices()):
        m = _attach_plans(m, [1], MAX_REORDER_RANGE)
    per_layer: dict[str, tuple[CostCounters, CostCounters]] = {}
    channels = {m.layers[i].name or f"layer{i}": m.layers[i].weights.c for i in m.conv_indices()}
    for img in images:
        ref = infer(m, img, "reference")
        out = infer(m, img, backend, row_reset=not args.no_row_reset)
        for name, rc in ref.layer_counters.items():
            b, r = per_layer.setdefault(name, (CostCounters(), CostCounters()))
            b.merge(rc)
            r.merge(out.layer_counters[name])
    rows, first_total = [], 0
    for name, (b, r) in per_layer.items():
        first = r.full_computations * channels[name] if backend == "input_reuse" else None
        rows.append(_compare_row(name, backend, b, r, first))
        base.merge(b)
        reuse.merge(r)
        first_total += first or 0
    rows.append(_compare_row("total", backend, base, reuse, first_total if backend == "input_reuse" else None))
    _emit(args, rows)


def _saved(before: int, after: int) -> float:
    return 1.0 - after / before if before else 0.0


def _compare_row(name, backend, b: CostCounters, r: CostCounters, first_ops: int | None) -> dict:
    """``ops_saved_steady`` leaves out the full computations at chain starts
    (the first column under row reset); it is only defined for input reuse."""
    steady = None if first_ops is None else _saved(b.bit_ops - first_ops, r.bit_ops - first_ops)
    return {"layer": name, "backend": backend,
            "baseline_bit_ops": b.bit_ops, "reuse_bit_ops": r.bit_ops,
            "ops_saved": _saved(b.bit_ops, r.bit_ops), "ops_saved_steady": steady,
            "baseline_weight_words": b.weight_words_read, "reuse_weight_words": r.weight_words_read,
            "word_access_saved": _saved(b.weight_words_read, r.weight_words_read),
            "full_computations": r.full_computations, "broadcasts": r.broadcasts}


def cmd_select(args):
    m = _model(args.model)
    cfg = _config(args.config)
    if args.input_sim is not None or args.kernel_sim is not None:
        if args.input_sim is None or args.kernel_sim is None:
            raise BnnError("--input-sim and --kernel-sim go together")
        decision = archsim.select_at(m, args.input_sim, args.kernel_sim, cfg, args.block_size)
    else:
        if args.inputs is None:
            raise BnnError("select needs --inputs or an (--input-sim, --kernel-sim) operating point")
        decision = archsim.select_strategy(m, load_images(args.inputs), cfg, partition_size=args.block_size)
    _emit(args, [decision.evidence()])


def cmd_workload(args):
    _emit(args, workload_summary(_model(args.model)))


def cmd_config(args):
    sys.stdout.write(archsim.dump_config(_config(args.config)))


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _report_flags(p):
    p.add_argument("--format", choices=FORMATS, default="csv")
    p.add_argument("--out", type=Path, help="write the report here instead of stdout")


def _model_flag(p):
    p.add_argument("--model", type=Path, help="model file (default: shipped BinaryNet CIFAR-10 model)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bnnreuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate synthetic models or input sets")
    gsub = gen.add_subparsers(dest="what", required=True)
    gm = gsub.add_parser("model", help="random +/-1 model")
    gm.add_argument("--seed", type=int, required=True)
    gm.add_argument("--out", type=Path, required=True)
    shape = gm.add_mutually_exclusive_group(required=True)
    shape.add_argument("--binarynet", action="store_true", help="the BinaryNet CIFAR-10 conv workload")
    shape.add_argument("--arch", help="e.g. conv:3x3x16x32,pool,conv:3x3x32x32")
    gm.add_argument("--input", default="16x16x16", help="HxWxC (with --arch)")
    gm.add_argument("--activation", choices=("binary", "fixed"), default="binary")
    gm.add_argument("--total-bits", type=int, default=8)
    gm.add_argument("--frac-bits", type=int, default=4)
    gm.add_argument("--padding", choices=("same", "none"), default="same")
    gm.add_argument("--plan", action="store_true", help="attach reorder plans")
    gm.add_argument("--partitions", type=int, nargs="+", help="K per conv layer (or one for all)")
    gm.add_argument("--block-size", type=int, default=MAX_REORDER_RANGE, help="0 = whole-layer mode")
    gm.set_defaults(func=cmd_gen_model)

    gi = gsub.add_parser("inputs", help="synthetic input set (.npz)")
    gi.add_argument("--seed", type=int, required=True)
    gi.add_argument("--out", type=Path, required=True)
    gi.add_argument("--kind", choices=("constant", "noise", "vstripes", "smooth"), required=True)
    gi.add_argument("--dims", required=True, help="HxWxC")
    gi.add_argument("--count", type=int, default=1)
    gi.add_argument("--p", type=float, help="vstripes repeat probability")
    gi.add_argument("--fixed", action="store_true", help="fixed-point activations")
    gi.add_argument("--total-bits", type=int, default=8)
    gi.add_argument("--frac-bits", type=int, default=4)
    gi.set_defaults(func=cmd_gen_inputs)

    an = sub.add_parser("analyze", help="input/kernel similarity report")
    _model_flag(an)
    an.add_argument("--inputs", type=Path, required=True)
    an.add_argument("--limit", type=int, help="sample at most this many images")
    an.add_argument("--dataset", default="synthetic")
    an.add_argument("--network", default="model")
    an.add_argument("--headline", action="store_true", help="only the model-input row")
    _report_flags(an)
    an.set_defaults(func=cmd_analyze)

    ro = sub.add_parser("reorder", help="build reorder plans, report similarity before/after")
    _model_flag(ro)
    ro.add_argument("--partitions", type=int, nargs="+", default=[1])
    ro.add_argument("--block-size", type=int, default=MAX_REORDER_RANGE, help="0 = whole-layer mode")
    ro.add_argument("--save", type=Path, help="write the model with plans attached")
    _report_flags(ro)
    ro.set_defaults(func=cmd_reorder)

    inf = sub.add_parser("infer", help="run inference through a backend")
    _model_flag(inf)
    inf.add_argument("--inputs", type=Path, required=True)
    inf.add_argument("--backend", choices=BACKENDS, default="reference")
    inf.add_argument("--check-equivalence", action="store_true",
                     help="run all backends and compare accumulators bit-exactly")
    inf.add_argument("--report", action="store_true", help="with --check-equivalence, also emit rows")
    inf.add_argument("--no-row-reset", action="store_true")
    _report_flags(inf)
    inf.set_defaults(func=cmd_infer)

    sim = sub.add_parser("simulate", help="cycle traces, similarity sweeps, input-class speedups")
    _model_flag(sim)
    sim.add_argument("--config", type=Path, help="key = value architecture config")
    sim.add_argument("--inputs", type=Path)
    sim.add_argument("--strategy", choices=archsim.STRATEGIES, default="input_reuse")
    sim.add_argument("--sweep", action="store_true", help="speedup vs input similarity")
    sim.add_argument("--kernel-sim", type=float, default=0.588, help="weight-reuse operating point for --sweep")
    sim.add_argument("--classes", action="store_true", help="per-layer max/img/rand speedups")
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--block-size", type=int, default=MAX_REORDER_RANGE)
    sim.add_argument("--no-row-reset", action="store_true")
    _report_flags(sim)
    sim.set_defaults(func=cmd_simulate)

    cmp_ = sub.add_parser("compare", help="baseline vs reuse cost counters")
    _model_flag(cmp_)
    cmp_.add_argument("--inputs", type=Path, required=True)
    cmp_.add_argument("--backend", choices=BACKENDS[1:], default="input_reuse")
    cmp_.add_argument("--no-row-reset", action="store_true")
    _report_flags(cmp_)
    cmp_.set_defaults(func=cmd_compare)

    sel = sub.add_parser("select", help="choose input or weight reuse")
    _model_flag(sel)
    sel.add_argument("--config", type=Path)
    sel.add_argument("--inputs", type=Path)
    sel.add_argument("--input-sim", type=float)
    sel.add_argument("--kernel-sim", type=float)
    sel.add_argument("--block-size", type=int, default=MAX_REORDER_RANGE)
    _report_flags(sel)
    sel.set_defaults(func=cmd_select)

    wl = sub.add_parser("workload", help="per-layer workload summary")
    _model_flag(wl)
    _report_flags(wl)
    wl.set_defaults(func=cmd_workload)

    cf = sub.add_parser("config", help="print the effective architecture config")
    cf.add_argument("--config", type=Path)
    cf.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "classes", False) and args.seed is None:
        parser.error("--classes generates inputs and needs --seed")
    try:
        code = args.func(args)
    except (ValueError, OSError) as exc:
        print(f"bnnreuse {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0 if code is None else code


if __name__ == "__main__":
    sys.exit(main())
