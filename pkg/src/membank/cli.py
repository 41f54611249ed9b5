"""Command-line entry point: ``membank <subcommand> [flags]``.

Precedence for every setting is subcommand default < ``--config`` file <
explicit flag. Failures print one JSON line on stderr and exit non-zero.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import bench
from .memory_bank import SamplingStrategy, Scope, UpdatePolicy
from .pipeline import (
    BankConfig,
    FrameFeatures,
    PipelineConfig,
    StreamParseError,
    VideoRunner,
    frame_to_json,
    read_stream,
    results_csv,
    write_stream,
)
from .synthgen import ScoreModel, StreamSpec, generate_stream

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger("membank")

_COMMON = dict(seed=0, reps=None, out=None, rho=0.9, noise=0.5, classes=10, score_model="uniform",
               strategy="random", update="feature", scope="video", threads=1, grid=None)

DEFAULTS = {
    "runtime-vs-nm": dict(dim=256, heads=8, n_key=256, n_mem=24000, reps=15, concat_reps=3, n_queries=300,
                          mem_budget_mb=2048.0),
    "nk-sweep": dict(dim=256, heads=8, n_key=256, n_mem=24000, reps=15, n_queries=300),
    "diversity": dict(dim=16, n_mem=2000, n_key=256, reps=30, frames=100, rho=0.95, score_model="frame",
                      per_frame=50),
    "update-policy": dict(dim=1, n_mem=2000, per_frame=50, frames=None, videos=2),
    "quality-proxy": dict(dim=64, heads=4, n_key=256, query_sigma=0.5, alpha=0.5, qk_scale=2.0,
                          exemplars=100, n_queries=1000),
    "run-video": dict(dim=64, heads=4, n_mem=2000, n_key=256, n_pix=1, n_ins=2, u_pix=100, u_ins=75,
                      frames=30, pixel_per_frame=100, per_frame=30, offline=False, timing=True),
    "gen-stream": dict(dim=64, frames=30, pixel_per_frame=100, per_frame=30),
}


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message)


def _shared_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    add = p.add_argument
    add("--config", help="TOML-style key = value file; flags override it")
    add("--seed", type=int)
    add("--dim", type=int)
    add("--heads", type=int)
    add("--n-mem", type=int)
    add("--n-key", type=int)
    add("--strategy", choices=[s.value for s in SamplingStrategy])
    add("--update", help="frame | feature | feature:<strategy>")
    add("--scope", choices=[s.value for s in Scope])
    add("--n-pix", type=int)
    add("--n-ins", type=int)
    add("--frames", type=int)
    add("--reps", type=int)
    add("--out")
    add("--stream")
    add("--grid", help="comma-separated sweep values")
    add("--threads", type=int)
    add("--rho", type=float)
    add("--noise", type=float)
    add("--classes", type=int)
    add("--score-model", choices=[m.value for m in ScoreModel])
    add("--per-frame", type=int, help="features inserted (or generated) per frame")
    add("--pixel-per-frame", type=int)
    add("--n-queries", type=int)
    add("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="membank", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    shared = _shared_flags()
    cmds = {name: sub.add_parser(name, parents=[shared]) for name in DEFAULTS}
    cmds["runtime-vs-nm"].add_argument("--mem-budget-mb", type=float)
    cmds["runtime-vs-nm"].add_argument("--concat-reps", type=int)
    for name in ("quality-proxy", "nk-sweep"):
        cmds[name].add_argument("--query-sigma", type=float)
        cmds[name].add_argument("--alpha", type=float)
        cmds[name].add_argument("--qk-scale", type=float)
        cmds[name].add_argument("--exemplars", type=int)
    cmds["update-policy"].add_argument("--videos", type=int)
    rv = cmds["run-video"]
    rv.add_argument("--offline", action="store_const", const=True)
    rv.add_argument("--no-timing", dest="timing", action="store_const", const=False,
                    help="leave latency_ns empty so the CSV is byte-reproducible")
    rv.add_argument("--u-pix", type=int)
    rv.add_argument("--u-ins", type=int)
    rv.add_argument("--snapshot", help="write the instance bank snapshot (JSONL) here")
    rv.add_argument("--features-out", help="write enhanced frames (stream JSONL) here")
    return parser


def load_config(path) -> dict:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    return {k.replace("-", "_"): v for k, v in raw.items()}


def resolve(args: argparse.Namespace) -> dict:
    opts = {**_COMMON, **DEFAULTS[args.command]}
    if args.config:
        opts.update(load_config(args.config))
    opts.update({k: v for k, v in vars(args).items() if v is not None})
    return opts


def _grid(opts, cast=int):
    g = opts.get("grid")
    if g is None:
        return ()
    if isinstance(g, str):
        g = [x for x in g.split(",") if x.strip()]
    return tuple(cast(x) if cast else x.strip() for x in g)


def _update(opts) -> UpdatePolicy:
    text = opts["update"]
    if text == "feature":
        return UpdatePolicy.feature_wise(opts["strategy"])
    return UpdatePolicy.parse(text)


def _stream_spec(opts) -> StreamSpec:
    return StreamSpec(
        n_frames=opts.get("frames") or 30,
        d=opts["dim"],
        n_classes=opts["classes"],
        pixel_per_frame=opts.get("pixel_per_frame", 0),
        instance_per_frame=opts.get("per_frame", 30),
        noise_sigma=opts["noise"],
        redundancy_rho=opts["rho"],
        score_model=opts["score_model"],
        seed=opts["seed"],
    )


def experiment_spec(command: str, opts: dict) -> bench.ExperimentSpec:
    kw = dict(
        experiment=command,
        seed=opts["seed"],
        out=opts.get("out"),
        repetitions=opts["reps"] or 1,
        strategy=opts["strategy"],
        update=_update(opts),
        scope=opts["scope"],
        threads=opts["threads"],
    )
    if command == "runtime-vs-nm":
        kw.update(dim=opts["dim"], heads=opts["heads"], n_key=opts["n_key"], n_queries=opts["n_queries"],
                  mem_budget_mb=opts["mem_budget_mb"], concat_repetitions=opts["concat_reps"],
                  grid=_grid(opts))
    elif command in ("nk-sweep", "quality-proxy"):
        quality = DEFAULTS["quality-proxy"]
        q_dim = opts["dim"] if command == "quality-proxy" else quality["dim"]
        kw.update(
            stream=StreamSpec(d=q_dim, n_classes=opts["classes"], seed=opts["seed"]),
            query_sigma=opts.get("query_sigma", quality["query_sigma"]),
            alpha=opts.get("alpha", quality["alpha"]),
            qk_scale=opts.get("qk_scale", quality["qk_scale"]),
            exemplars_per_class=opts.get("exemplars", quality["exemplars"]),
            quality_heads=opts["heads"] if command == "quality-proxy" else quality["heads"],
            grid=_grid(opts) or ((opts["n_key"],) if command == "quality-proxy" else ()),
        )
        if command == "nk-sweep":
            kw.update(dim=opts["dim"], heads=opts["heads"], n_mem=opts["n_mem"], n_queries=opts["n_queries"])
        else:
            kw.update(n_eval=opts["n_queries"])
    elif command == "diversity":
        kw.update(
            stream=_stream_spec({**opts, "pixel_per_frame": 0}),
            n_mem=opts["n_mem"], n_key=opts["n_key"], grid=_grid(opts, cast=None),
        )
    elif command == "update-policy":
        kw.update(n_mem=opts["n_mem"], per_frame=opts["per_frame"], n_frames=opts["frames"],
                  n_videos=opts["videos"], dim=opts["dim"], grid=_grid(opts, cast=None))
    return bench.ExperimentSpec(**kw)


def pipeline_config(opts: dict) -> PipelineConfig:
    bank = BankConfig(
        capacity=opts["n_mem"],
        n_key=opts["n_key"],
        strategy=opts["strategy"],
        update_policy=_update(opts),
        scope=opts["scope"],
    )
    return PipelineConfig(
        n_pix=opts["n_pix"],
        n_ins=opts["n_ins"],
        offline_test=bool(opts["offline"]),
        u_pix=opts["u_pix"],
        u_ins=opts["u_ins"],
        pixel_bank=bank,
        instance_bank=bank,
        n_heads=opts["heads"],
        seed=opts["seed"],
        timing=bool(opts["timing"]),
    )


def _emit(text: str, out) -> None:
    if out:
        with open(out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_run_video(opts: dict) -> None:
    frames = read_stream(opts["stream"]) if opts.get("stream") else generate_stream(_stream_spec(opts))
    config = pipeline_config(opts)
    runner = VideoRunner(config)
    results = runner.run(frames)
    _emit(results_csv(results, timing=config.timing), opts.get("out"))
    if opts.get("snapshot"):
        runner.bank_ins.save(opts["snapshot"])
    if opts.get("features_out"):
        with open(opts["features_out"], "w") as fh:
            for r in results:
                fh.write(frame_to_json(FrameFeatures(r.frame_index, r.enhanced_pixel, r.enhanced_instance)) + "\n")


def cmd_gen_stream(opts: dict) -> None:
    frames = generate_stream(_stream_spec(opts))
    if opts.get("out"):
        write_stream(frames, opts["out"])
    else:
        for f in frames:
            sys.stdout.write(frame_to_json(f) + "\n")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        opts = resolve(args)
        if args.command == "run-video":
            cmd_run_video(opts)
        elif args.command == "gen-stream":
            cmd_gen_stream(opts)
        else:
            text = bench.run_experiment(experiment_spec(args.command, opts))
            if not opts.get("out"):
                sys.stdout.write(text)
    except StreamParseError as exc:
        _fail(exc, line=exc.line)
        return 1
    except CLIError as exc:
        _fail(exc, kind="UsageError")
        return 2
    except (OSError, ValueError, KeyError, TypeError) as exc:
        _fail(exc)
        return 1
    return 0


def _fail(exc: BaseException, kind: str | None = None, **extra) -> None:
    payload = {"error": kind or type(exc).__name__, "message": str(exc), **extra}
    sys.stderr.write(json.dumps(payload) + "\n")


if __name__ == "__main__":
    sys.exit(main())
