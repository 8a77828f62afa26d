"""``streamxl`` command line.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O or
file-format error. Every command accepts ``--json`` for machine-readable
output on stdout.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from .attention import ContextWindow
from .errors import ConfigError, DimensionError, FormatError, NumericalError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _window(text: str) -> ContextWindow:
    try:
        return ContextWindow.parse(text)
    except ConfigError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _num(v: float):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, float) and v.is_integer():
        return int(v)
    return v


def _emit_json(obj) -> None:
    print(json.dumps(obj, indent=None, sort_keys=False))


def _table(rows: list[list], header: list[str]) -> None:
    print("\t".join(header))
    for r in rows:
        print("\t".join(str(x) for x in r))


# ---------------------------------------------------------------------------
# analyze-context


def cmd_analyze_context(args) -> int:
    from .layers import plan_geometry
    from .streaming import accumulate_context, latency_ms

    if args.layers < 1:
        raise UsageError("--layers must be >= 1")
    enc_right = enc_left = 0
    if args.frontend == "vgg":
        g = plan_geometry()
        enc_right, enc_left = g.lookahead, g.left_context
    if args.ic and (args.ic_kernel < 1 or args.ic_kernel % 2 == 0):
        raise UsageError("--ic-kernel must be odd and positive")
    reach = (args.ic_kernel - 1) // 2 if args.ic else 0
    rows = []
    for layer in range(1, args.layers + 1):
        acc = accumulate_context(args.window, layer, enc_right, enc_left, reach)
        lat = latency_ms(acc.right, args.frame_ms)
        rows.append({"layer": layer, "per_layer": args.window.spec(), "accumulated": acc.spec(),
                     "left": _num(acc.left), "right": _num(acc.right), "latency_ms": _num(lat)})
    total = rows[-1]
    summary = {"layers": args.layers, "window": args.window.spec(), "frontend": args.frontend,
               "encoder_lookahead": enc_right, "encoder_left": enc_left, "ic_reach": reach,
               "accumulated": total["accumulated"], "right_context": total["right"],
               "latency_ms": total["latency_ms"], "frame_ms": args.frame_ms}
    if args.json:
        _emit_json({"summary": summary, "per_layer": rows})
        return EXIT_OK
    _table([[r["layer"], r["per_layer"], r["accumulated"], r["right"], r["latency_ms"]] for r in rows],
           ["layer", "window", "accumulated", "right_frames", "latency_ms"])
    acc_str = str(ContextWindow(total["left"] if total["left"] != "-inf" else -math.inf,
                                total["right"] if total["right"] != "inf" else math.inf))
    print(f"# total context {acc_str}: right context {total['right']} frames "
          f"(front-end lookahead {enc_right}), latency {total['latency_ms']} ms at {args.frame_ms:g} ms/frame")
    return EXIT_OK


# ---------------------------------------------------------------------------
# grad-check


def cmd_grad_check(args) -> int:
    from . import gradcheck as G

    dtype = np.float64 if args.dtype == "f64" else np.float32
    seeds = [args.seed] if args.seed is not None else list(range(args.seeds))
    t0 = time.perf_counter()
    results = G.run_suite(seeds, dtype)
    by_case: dict[str, list] = {}
    for r in results:
        by_case.setdefault(r.name, []).append(r)
    rows = []
    for name, rs in by_case.items():
        worst = max(r.error for r in rs)
        rows.append({"case": name, "kind": rs[0].kind, "worst_error": worst, "tol": rs[0].tol,
                     "seeds": len(rs), "passed": all(r.passed for r in rs)})
    failed = [r["case"] for r in rows if not r["passed"]]
    degraded = dtype == np.float32
    ok = degraded or not failed
    if args.json:
        _emit_json({"dtype": args.dtype, "seeds": seeds, "degraded": degraded, "cases": rows,
                    "failed": failed, "passed": ok, "seconds": time.perf_counter() - t0})
    else:
        _table([[r["case"], r["kind"], f"{r['worst_error']:.3e}", f"{r['tol']:.0e}",
                 "PASS" if r["passed"] else ("WARN" if degraded else "FAIL")] for r in rows],
               ["case", "kind", "worst_rel_error", "tol", "status"])
        if degraded:
            print(f"# f32 mode: degraded tolerance {G.F32_TOL:g}, eps {G.F32_EPS:g}; "
                  f"{len(failed)} case(s) above it, reported only")
        else:
            print(f"# {len(rows) - len(failed)}/{len(rows)} cases passed over {len(seeds)} seed(s)")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# stream-equiv


def cmd_stream_equiv(args) -> int:
    from .config import ModelConfig
    from .model import build_model
    from .streaming import stream_collect, xl_offline_oracle

    if args.chunk < 1 or args.seqlen < 1 or args.layers < 1:
        raise UsageError("--chunk, --seqlen and --layers must be positive")
    cfg = ModelConfig(n_layers=args.layers, n_heads=2, d_model=args.d_model, d_ff=2 * args.d_model,
                      front_end=args.frontend, feat_dim=args.feat_dim, n_classes=8, norm=args.norm,
                      interleaved_conv=args.ic, streaming="xl", chunk=args.chunk, seed=args.seed,
                      dtype="float64", vgg_channels=(4, 4, 8, 8), dropout=0.0)
    model = build_model(cfg.validate(), requires_grad=False)
    rng = np.random.default_rng(args.seed + 1)
    x = rng.uniform(-1, 1, (args.seqlen, cfg.feat_dim))
    streamed = stream_collect(model, x, args.chunk, args.read_block)
    oracle = xl_offline_oracle(model, x, args.chunk)
    if streamed.shape != oracle.shape:
        diff = math.inf
    else:
        diff = float(np.abs(streamed - oracle).max()) if oracle.size else 0.0
    ok = diff <= args.tol
    info = {"layers": args.layers, "chunk": args.chunk, "seqlen": args.seqlen, "seed": args.seed,
            "frames": int(oracle.shape[0]), "max_abs_diff": diff, "tol": args.tol, "passed": ok}
    if args.json:
        _emit_json(info)
    else:
        print(f"frames\t{info['frames']}\nmax_abs_diff\t{diff:.3e}\ntol\t{args.tol:g}\n"
              f"status\t{'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# train / infer


def cmd_train(args) -> int:
    from .fileio import read_config_file
    from .model import build_model, save
    from .trainer import evaluate, jsonl_logger, task_for, toy_setup, train

    if args.task != "synthetic":
        raise UsageError(f"unknown task {args.task!r}")
    if args.config:
        config, schedule = read_config_file(args.config)
    else:
        config, schedule = toy_setup(seed=args.seed)
    task = task_for(config, seed=args.seed, n_sequences=args.sequences)
    heldout = task.heldout(max(8, args.sequences // 4))
    model = build_model(config)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.jsonl")
    with open(log_path, "w", encoding="utf-8") as fh:
        result = train(model, task, schedule, args.steps, eval_task=heldout, eval_every=args.eval_every,
                       target_accuracy=args.target_accuracy, seed=args.seed, log=jsonl_logger(fh))
    save(model, out)
    acc = evaluate(model, heldout)
    reached = args.target_accuracy is None or acc >= args.target_accuracy
    info = {"steps_run": len(result.history), "final_loss": result.history[-1]["loss"] if result.history else None,
            "eval_accuracy": acc, "target_accuracy": args.target_accuracy, "reached_step": result.reached_step,
            "model": str(out), "log": str(log_path), "passed": reached}
    if args.json:
        _emit_json(info)
    else:
        for k, v in info.items():
            print(f"{k}\t{v}")
    return EXIT_OK if reached else EXIT_FAIL


def cmd_infer(args) -> int:
    from . import tensor as T
    from .fileio import FeatureFile, FeatureWriter
    from .model import load
    from .streaming import XLStreamer

    model = load(args.model)
    feats = FeatureFile.read(args.features)
    if feats.feature_dim != model.config.feat_dim:
        raise DimensionError(f"{args.features}: feature dim {feats.feature_dim}, model expects {model.config.feat_dim}")
    x = feats.data.astype(model.dtype)
    stride = model.frontend.geometry.stride
    period = feats.frame_period_ms * stride
    n_classes = model.config.n_classes
    chunk_count = 0
    if args.mode == "xl":
        chunk = args.chunk or model.config.chunk
        streamer = XLStreamer(model, chunk)
        block = args.read_block or chunk * stride
        n = 0
        with FeatureWriter(args.out, n_classes, period) as w:
            for s in range(0, x.shape[0], block):
                n += _write_emissions(w, streamer.push(x[s:s + block]), args)
            n += _write_emissions(w, streamer.finish(), args)
        chunk_count = len(streamer.chunk_sizes)
    else:
        window = args.window if args.window is not None else model.config.window
        with T.no_grad():
            post = model.forward(x, mode="eval", streaming=args.mode, window=window)
        FeatureFile(post.data.astype(np.float32), period).write(args.out)
        n = post.shape[0]
    info = {"mode": args.mode, "frames_in": feats.frame_count, "frames_out": n, "classes": n_classes,
            "chunks": chunk_count, "out": str(args.out)}
    if args.json:
        _emit_json(info)
    else:
        for k, v in info.items():
            print(f"{k}\t{v}")
    return EXIT_OK


def _write_emissions(writer, emissions, args) -> int:
    if not emissions:
        return 0
    writer.write_rows(np.stack([p for _, p in emissions]))
    if args.progress:
        print(f"emitted frames {emissions[0][0]}..{emissions[-1][0]}", file=sys.stderr, flush=True)
    return len(emissions)


# ---------------------------------------------------------------------------
# reports


def cmd_init_stats(args) -> int:
    from .config import ModelConfig
    from .diagnostics import init_stats, sample_stats
    from .init import InitSpec, init_bound
    from .model import build_model

    cfg = ModelConfig(n_layers=args.layers, n_heads=1, d_model=args.d_model, d_ff=args.d_ff,
                      front_end="linear", feat_dim=args.d_model, n_classes=args.d_model,
                      init=args.scheme, seed=args.seed, interleaved_conv=args.ic).validate()
    stats = init_stats(build_model(cfg, requires_grad=False))
    xavier = init_bound(InitSpec("xavier_uniform", 1, args.d_model, args.d_model))
    depth1 = init_bound(InitSpec("depth_scale", 1, args.d_model, args.d_model))
    probe = sample_stats(InitSpec(args.scheme, args.probe_layer, args.d_model, args.d_model, args.seed), args.samples)
    var_err = abs(probe.variance / probe.expected_variance - 1.0)
    checks = {"l1_equals_xavier": depth1 == xavier, "probe_variance_within_2pct": var_err <= 0.02,
              "probe_ks_below_critical": probe.ks_ok}
    ok = all(checks.values())
    if args.json:
        _emit_json({"scheme": args.scheme, "layers": [s.__dict__ | {"ks_ok": s.ks_ok} for s in stats],
                    "probe": probe.__dict__ | {"n": args.samples, "variance_rel_error": var_err},
                    "checks": checks, "passed": ok})
    else:
        _table([[s.name, s.layer, f"{s.bound:.6g}", f"{s.variance:.4e}", f"{s.expected_variance:.4e}",
                 f"{s.ks:.4f}", f"{s.ks_critical:.4f}"] for s in stats],
               ["param", "layer", "bound", "variance", "b^2/3", "ks", "ks_crit_1%"])
        print(f"# probe l={args.probe_layer} n={args.samples}: bound {probe.bound:.6g}, variance "
              f"{probe.variance:.5e} vs {probe.expected_variance:.5e} ({100 * var_err:.3f}%), "
              f"KS {probe.ks:.5f} < {probe.ks_critical:.5f}: {probe.ks_ok}")
        print(f"# l=1 bound {depth1!r} equals Xavier {xavier!r}: {depth1 == xavier}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_param_count(args) -> int:
    from .fileio import read_config_file
    from .model import REFERENCE_CONFIGS, count_params_config, reference_config

    if args.list:
        for name, (kw, size) in REFERENCE_CONFIGS.items():
            print(f"{name}\t{size}\t" + ",".join(f"{k}={v}" for k, v in kw.items()))
        return EXIT_OK
    if args.config:
        cfg, _ = read_config_file(args.config, notice=lambda m: None)
        reported = None
        label = str(args.config)
    else:
        cfg, reported = reference_config(args.reference)
        label = args.reference
    total, breakdown = count_params_config(cfg)
    rel = None if reported is None else total / (reported * 1e6) - 1.0
    ok = rel is None or abs(rel) <= args.tolerance
    per_block = breakdown.pop("per_block")
    if args.json:
        _emit_json({"config": label, "total": total, "breakdown": dict(breakdown), "per_block": per_block,
                    "reported_millions": reported, "relative_diff": rel, "tolerance": args.tolerance,
                    "note": None if reported is None else _residual_note(cfg, breakdown, total, reported),
                    "passed": ok})
    else:
        _table([[k, v, f"{v / 1e6:.3f}"] for k, v in breakdown.items()], ["component", "params", "millions"])
        print(f"per_block\t{per_block}\t{per_block / 1e6:.3f}")
        print(f"total\t{total}\t{total / 1e6:.3f}")
        if reported is not None:
            print(f"reported\t{reported}M\trelative_diff {100 * rel:+.1f}% (tolerance ±{100 * args.tolerance:g}%)")
            print(f"# {_residual_note(cfg, breakdown, total, reported)}")
    return EXIT_OK if ok else EXIT_FAIL


def _residual_note(cfg, breakdown, total, reported) -> str:
    d, L = cfg.d_model, cfg.n_layers
    biases = L * (4 * d + cfg.d_ff + d) + cfg.n_classes
    return (f"residual {(total - reported * 1e6) / 1e6:+.2f}M; convention-dependent parts: "
            f"front-end {breakdown['front_end'] / 1e6:.2f}M (VGG widths {','.join(map(str, cfg.vgg_channels))}), "
            f"projection biases {biases / 1e6:.2f}M, layer norms {breakdown['layer_norm'] / 1e6:.2f}M")


def cmd_make_features(args) -> int:
    from .fileio import FeatureFile

    if args.frames < 0 or args.dim < 1:
        raise UsageError("--frames must be >= 0 and --dim >= 1")
    rng = np.random.default_rng(args.seed)
    FeatureFile(rng.standard_normal((args.frames, args.dim)).astype(np.float32), args.frame_ms).write(args.out)
    if args.json:
        _emit_json({"out": str(args.out), "frames": args.frames, "dim": args.dim})
    else:
        print(f"wrote {args.frames}x{args.dim} features to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamxl", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--json", action="store_true", help="machine-readable output")
        sp.set_defaults(func=fn)
        return sp

    a = add("analyze-context", cmd_analyze_context, "accumulated context and latency of a layer stack")
    a.add_argument("--layers", type=int, required=True)
    a.add_argument("--window", type=_window, required=True, help="per-layer window L:R, e.g. -inf:3")
    a.add_argument("--ic", action="store_true", help="interleaved conv in every block")
    a.add_argument("--ic-kernel", type=int, default=3)
    a.add_argument("--frontend", choices=("none", "linear", "vgg"), default="none")
    a.add_argument("--frame-ms", type=float, default=20.0)

    g = add("grad-check", cmd_grad_check, "finite-difference check of every primitive and block")
    g.add_argument("--seed", type=int, default=None, help="run a single seed")
    g.add_argument("--seeds", type=int, default=10, help="run seeds 0..N-1 (default 10)")
    g.add_argument("--dtype", choices=("f64", "f32"), default="f64")

    s = add("stream-equiv", cmd_stream_equiv, "chunked XL streaming vs block-mask offline forward")
    s.add_argument("--layers", type=int, default=4)
    s.add_argument("--chunk", type=int, default=16)
    s.add_argument("--seqlen", type=int, default=96)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--d-model", type=int, default=16)
    s.add_argument("--feat-dim", type=int, default=8)
    s.add_argument("--frontend", choices=("linear", "vgg"), default="linear")
    s.add_argument("--norm", choices=("pre", "post"), default="pre")
    s.add_argument("--ic", action="store_true")
    s.add_argument("--read-block", type=int, default=None, help="raw frames per read (default: one chunk)")
    s.add_argument("--tol", type=float, default=1e-10)

    t = add("train", cmd_train, "train on the synthetic frame-classification task")
    t.add_argument("--config", help="key=value file with model and schedule fields (default: toy setup)")
    t.add_argument("--task", default="synthetic")
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--out", required=True, help="model file to write")
    t.add_argument("--log", help="training log (default: <out>.log.jsonl)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--sequences", type=int, default=64)
    t.add_argument("--eval-every", type=int, default=25)
    t.add_argument("--target-accuracy", type=float, default=None,
                   help="stop once held-out frame accuracy reaches this; exit 1 if never reached")

    i = add("infer", cmd_infer, "write log-posteriors for a feature file")
    i.add_argument("--model", required=True)
    i.add_argument("--features", required=True)
    i.add_argument("--mode", choices=("offline", "masked", "xl"), default="offline")
    i.add_argument("--window", type=_window, default=None, help="per-layer window for masked mode")
    i.add_argument("--chunk", type=int, default=None)
    i.add_argument("--read-block", type=int, default=None)
    i.add_argument("--out", required=True)
    i.add_argument("--progress", action="store_true", help="report each emission on stderr")

    n = add("init-stats", cmd_init_stats, "initialization bounds, variances and KS statistics")
    n.add_argument("--layers", type=int, default=12)
    n.add_argument("--d-model", type=int, default=64)
    n.add_argument("--d-ff", type=int, default=256)
    n.add_argument("--scheme", choices=("xavier_uniform", "depth_scale"), default="depth_scale")
    n.add_argument("--ic", action="store_true")
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--samples", type=int, default=1_000_000)
    n.add_argument("--probe-layer", type=int, default=1)

    c = add("param-count", cmd_param_count, "parameter breakdown against a reported model size")
    c.add_argument("--reference", default="vgg-n8-624")
    c.add_argument("--config", help="count a config file instead")
    c.add_argument("--tolerance", type=float, default=0.15)
    c.add_argument("--list", action="store_true", help="list named configurations")

    f = add("make-features", cmd_make_features, "write a random feature file")
    f.add_argument("--frames", type=int, required=True)
    f.add_argument("--dim", type=int, default=80)
    f.add_argument("--frame-ms", type=float, default=10.0)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)
    return p


_WINDOW_FLAGS = ("--window",)


def _join_negative_values(argv: list[str]) -> list[str]:
    # "--window -2:1" would otherwise be parsed as an unknown option
    out, i = [], 0
    while i < len(argv):
        if argv[i] in _WINDOW_FLAGS and i + 1 < len(argv) and argv[i + 1].startswith("-"):
            out.append(f"{argv[i]}={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv: list[str] | None = None) -> int:
    argv = _join_negative_values(list(sys.argv[1:] if argv is None else argv))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as e:
        print(f"streamxl {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, DimensionError) as e:
        print(f"streamxl {args.command}: {e}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as e:
        print(f"streamxl {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"streamxl {args.command}: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
