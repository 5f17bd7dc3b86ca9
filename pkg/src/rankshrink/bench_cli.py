"""Pipeline orchestration: CLI subcommands, RTF measurement, run manifests.

The real-time factor is processing seconds divided by audio-equivalent
seconds (frames times the frame period, 10 ms by default). Measurements use
a monotonic clock, run an untimed warm-up pass first, and report the median
over repeats together with the (min, median, max) spread.

Every subcommand writes a manifest next to its primary output recording the
command, config hash, seeds, input/output hashes and toolkit version, so a
run can be reproduced and its artifacts verified.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import statistics
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import __version__, compress, decoder, trainer
from .errors import RankshrinkError, RejectedInputError
from .nnet.network import Model, forward, forward_batch, load_model, save_model
from .nnet.spec import (
    NetworkSpec,
    build_preset,
    param_count,
    spec_from_dict,
    PRESET_NAMES,
)

DEFAULT_FRAME_PERIOD = 0.01  # seconds of audio per frame
SEED_ENV_VAR = "RANKSHRINK_SEED"

_ALLOCATOR_TUNED = False


def _tune_allocator_for_benchmarks() -> None:
    """Keep large temporaries on the heap during timing runs.

    glibc returns big freed buffers to the kernel and re-faults them on the
    next allocation, which injects page-fault noise an order of magnitude
    larger than the differences being measured. Raising the mmap threshold
    once (best effort, glibc only) makes repeat timings stable.
    """
    global _ALLOCATOR_TUNED
    if _ALLOCATOR_TUNED:
        return
    _ALLOCATOR_TUNED = True
    try:
        import ctypes
        libc = ctypes.CDLL("libc.so.6")
        m_mmap_threshold = -3
        libc.mallopt(m_mmap_threshold, 64 * 1024 * 1024)
    except Exception:
        pass


@dataclass
class RtfMeasurement:
    """Median-of-repeats real-time factor for one model on one dataset."""

    processing_seconds: float      # median repeat
    audio_seconds: float
    rtf: float                     # processing_seconds / audio_seconds
    repeats: int
    spread: tuple[float, float, float]  # (min, median, max) rtf over repeats
    per_repeat: list[float]


def measure_rtf(params, spec: NetworkSpec, graph: decoder.DecodeGraph,
                dataset: trainer.Dataset, config: decoder.DecodeConfig,
                repeats: int = 5,
                frame_period: float = DEFAULT_FRAME_PERIOD) -> RtfMeasurement:
    """Time forward + decoding over the dataset, median of ``repeats`` runs.

    File I/O and data generation are outside the timed region; a warm-up pass
    runs first so one-time allocation noise is excluded. Equal-length
    utterances are processed as one batch (the arithmetic is identical and
    the work becomes matrix-bound); ragged datasets fall back to per-utterance
    passes. Use at least 3 repeats when the median is meant to be reported.
    """
    _tune_allocator_for_benchmarks()
    if repeats < 1:
        raise RejectedInputError("repeats must be >= 1")
    if not dataset.sequences:
        raise RejectedInputError("cannot measure RTF on an empty dataset")
    if frame_period <= 0:
        raise RejectedInputError("frame_period must be positive")

    audio_seconds = dataset.total_frames() * frame_period
    lengths = {seq.frames.shape[0] for seq in dataset.sequences}
    stacked = np.stack([seq.frames for seq in dataset.sequences]) \
        if len(lengths) == 1 else None

    def one_pass():
        if stacked is not None:
            decoder.decode_scores_batch(
                graph, forward_batch(params, spec, stacked), config)
        else:
            for seq in dataset.sequences:
                decoder.decode_scores(graph, forward(params, spec, seq.frames),
                                      config)

    one_pass()  # warm-up, untimed
    timings = []
    for _ in range(repeats):
        started = time.perf_counter()
        one_pass()
        timings.append(time.perf_counter() - started)

    processing = float(statistics.median(timings))
    rtfs = [t / audio_seconds for t in timings]
    return RtfMeasurement(
        processing_seconds=processing,
        audio_seconds=audio_seconds,
        rtf=processing / audio_seconds,
        repeats=repeats,
        spread=(min(rtfs), float(statistics.median(rtfs)), max(rtfs)),
        per_repeat=rtfs,
    )


def compare_rtf(candidates, graph: decoder.DecodeGraph, dataset: trainer.Dataset,
                config: decoder.DecodeConfig, repeats: int = 5,
                passes_per_repeat: int = 3,
                frame_period: float = DEFAULT_FRAME_PERIOD) -> dict:
    """Paired RTF measurement of several models on identical data.

    Host load and clock-frequency drift hit all models alike only if their
    repeats interleave, so repeat i times every candidate back to back before
    moving on. Each repeat times ``passes_per_repeat`` full dataset passes and
    reports their mean; each model still gets a median over ``repeats``.
    Returns ``{name: RtfMeasurement}``.
    """
    _tune_allocator_for_benchmarks()
    if repeats < 1 or passes_per_repeat < 1:
        raise RejectedInputError("repeats and passes_per_repeat must be >= 1")
    if not dataset.sequences:
        raise RejectedInputError("cannot measure RTF on an empty dataset")

    audio_seconds = dataset.total_frames() * frame_period
    lengths = {seq.frames.shape[0] for seq in dataset.sequences}
    stacked = np.stack([seq.frames for seq in dataset.sequences]) \
        if len(lengths) == 1 else None

    def one_pass(params, spec):
        if stacked is not None:
            decoder.decode_scores_batch(
                graph, forward_batch(params, spec, stacked), config)
        else:
            for seq in dataset.sequences:
                decoder.decode_scores(graph, forward(params, spec, seq.frames),
                                      config)

    names = list(candidates)
    for name in names:  # warm-up, untimed
        one_pass(*candidates[name])
    timings = {name: [] for name in names}
    for _ in range(repeats):
        for name in names:
            params, spec = candidates[name]
            started = time.perf_counter()
            for _ in range(passes_per_repeat):
                one_pass(params, spec)
            timings[name].append(
                (time.perf_counter() - started) / passes_per_repeat)

    out = {}
    for name in names:
        processing = float(statistics.median(timings[name]))
        rtfs = [t / audio_seconds for t in timings[name]]
        out[name] = RtfMeasurement(
            processing_seconds=processing,
            audio_seconds=audio_seconds,
            rtf=processing / audio_seconds,
            repeats=repeats,
            spread=(min(rtfs), float(statistics.median(rtfs)), max(rtfs)),
            per_repeat=rtfs,
        )
    return out


# ---------------------------------------------------------------------------
# Manifests

def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _config_hash(payload: dict) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    ).hexdigest()


def write_manifest(command: str, args: dict, seeds: dict, inputs: list[str],
                   outputs: list[str], primary_output: str) -> str:
    manifest = {
        "command": command,
        "args": {k: str(v) for k, v in args.items()},
        "config_hash": _config_hash(args),
        "seeds": seeds,
        "inputs": [{"path": p, "sha256": _sha256(p)} for p in inputs],
        "outputs": [{"path": p, "sha256": _sha256(p)} for p in outputs],
        "toolkit_version": __version__,
        "platform": platform.platform(),
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    path = primary_output + ".manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return path


def load_manifest(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# Run records and the comparison report

def write_run_record(path: str, record: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=1)
        fh.write("\n")


def load_run_record(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        record = json.load(fh)
    for key in ("name", "model"):
        if key not in record:
            raise RejectedInputError(f"run record {path} is missing {key!r}")
    return record


def render_report(records: list[dict], baseline: str) -> str:
    """Comparison table with signed relative deltas against a baseline row.

    Each record needs name/model plus whatever metrics it carries (rtf,
    token_error_rate). The parameter column is recomputed from the model file,
    never trusted from the record.
    """
    if not records:
        raise RejectedInputError("no run records to report")
    rows = []
    for record in records:
        model = load_model(record["model"])
        rows.append({
            "name": record["name"],
            "config": record.get("config_desc", ""),
            "params": param_count(model.spec),
            "rtf": record.get("rtf"),
            "ter": record.get("token_error_rate"),
        })
    rows.sort(key=lambda r: (r["name"], r["config"]))
    base = next((r for r in rows if r["name"] == baseline), None)
    if base is None:
        raise RejectedInputError(
            f"baseline row {baseline!r} not found among "
            f"{sorted({r['name'] for r in rows})}")

    def fmt(value, pattern="{:.4f}"):
        return "-" if value is None else pattern.format(value)

    def delta(value, ref):
        if value is None or ref in (None, 0):
            return "-"
        return f"{100.0 * (value - ref) / ref:+.2f}%"

    with_deltas = len(rows) > 1
    header = ["model", "config", "params", "rtf", "token_err"]
    if with_deltas:
        header += ["d_params", "d_rtf", "d_token_err"]
    table = [header]
    for row in rows:
        cells = [row["name"], row["config"] or "-", str(row["params"]),
                 fmt(row["rtf"]), fmt(row["ter"])]
        if with_deltas:
            cells += [delta(row["params"], base["params"]),
                      delta(row["rtf"], base["rtf"]),
                      delta(row["ter"], base["ter"])]
        table.append(cells)
    widths = [max(len(line[i]) for line in table) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip()
             for line in table]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# CLI

def _seed_from(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV_VAR)
    return int(env) if env else 0


def _build_graph(dataset: trainer.Dataset, history_depth: int) -> decoder.DecodeGraph:
    return decoder.build_symbol_graph(
        dataset.num_symbols, transition=dataset.task.transition,
        history_depth=history_depth)


def _cmd_gen_data(args) -> int:
    seed = _seed_from(args)
    task = trainer.standard_task(num_symbols=args.symbols,
                                 feature_dim=args.feature_dim, seed=seed)
    dataset = trainer.generate(task, args.sequences, args.frames)
    trainer.save_dataset(dataset, args.out)
    write_manifest("gen-data", vars(args), {"seed": seed}, [], [args.out], args.out)
    print(f"wrote {args.sequences} sequences x {args.frames} frames to {args.out}")
    return 0


def _resolve_spec(args, dataset: trainer.Dataset) -> NetworkSpec:
    if args.spec:
        with open(args.spec, "r", encoding="utf-8") as fh:
            return spec_from_dict(json.load(fh))
    if not args.preset:
        raise RejectedInputError("either --preset or --spec is required")
    return build_preset(args.preset, dataset.feature_dim, dataset.num_symbols)


def _cmd_train(args) -> int:
    seed = _seed_from(args)
    dataset = trainer.load_dataset(args.data)
    spec = _resolve_spec(args, dataset)
    config = trainer.TrainConfig(steps=args.steps, batch_size=args.batch_size,
                                 learning_rate=args.learning_rate,
                                 lr_decay=args.lr_decay, seed=seed,
                                 eval_every=args.eval_every)
    result = trainer.train(spec, config, dataset)
    model = Model(spec=spec, params=result.params, seed=seed, metadata={
        "steps": args.steps,
        "final_loss": result.history[-1][1],
        "initial_loss": result.history[0][1],
        "data": args.data,
    })
    save_model(model, args.out)
    write_manifest("train", vars(args), {"seed": seed}, [args.data], [args.out],
                   args.out)
    print(f"trained {args.steps} steps: loss {result.history[0][1]:.4f} -> "
          f"{result.history[-1][1]:.4f}; wrote {args.out}")
    return 0


def _cmd_compress(args) -> int:
    model = load_model(args.model_in)
    policy = compress.SvdPolicy(
        energy_threshold=args.energy_threshold,
        shrinkage_threshold=args.shrinkage_threshold,
        prune_interpretation=(compress.RETAINED_ENERGY if args.prune_mode == "retained"
                              else compress.PRUNED_ENERGY),
        include_output_layer=args.include_output_layer,
    )
    new_params, new_spec, report = compress.compress_network(
        model.params, model.spec, policy)
    compressed = Model(spec=new_spec, params=new_params, seed=model.seed,
                       metadata={**model.metadata, "compressed_from": args.model_in,
                                 "energy_threshold": args.energy_threshold})
    save_model(compressed, args.out)
    outputs = [args.out]
    if args.report:
        compress.save_report(report, args.report)
        outputs.append(args.report)
    write_manifest("compress", vars(args), {"seed": model.seed},
                   [args.model_in], outputs, args.out)
    print(compress.render_report_table(report))
    print(f"wrote {args.out}")
    return 0


def _cmd_bottleneck(args) -> int:
    seed = _seed_from(args)
    report = compress.load_report(args.report)
    if report.spec is None:
        raise RejectedInputError(
            "report file does not embed the source spec; cannot derive")
    spec = compress.derive_bottleneck_spec(report.spec, report)
    dataset = trainer.load_dataset(args.data)
    config = trainer.TrainConfig(steps=args.steps, batch_size=args.batch_size,
                                 learning_rate=args.learning_rate,
                                 lr_decay=args.lr_decay, seed=seed,
                                 eval_every=args.eval_every)
    result = trainer.train(spec, config, dataset)
    model = Model(spec=spec, params=result.params, seed=seed, metadata={
        "steps": args.steps, "from_report": args.report,
        "final_loss": result.history[-1][1],
    })
    save_model(model, args.out)
    write_manifest("bottleneck", vars(args), {"seed": seed},
                   [args.report, args.data], [args.out], args.out)
    print(f"retrained bottleneck spec ({param_count(spec)} params); wrote {args.out}")
    return 0


def _cmd_decode(args) -> int:
    model = load_model(args.model)
    dataset = trainer.load_dataset(args.data)
    graph = _build_graph(dataset, args.history_depth)
    rows = decoder.sweep(model.params, model.spec, graph, dataset,
                         [args.max_active], [args.beam],
                         acoustic_scale=args.acoustic_scale,
                         frame_period=args.frame_period_ms / 1000.0)
    print(decoder.sweep_table(rows))
    if args.out:
        row = rows[0]
        write_run_record(args.out, {
            "name": args.name or os.path.splitext(os.path.basename(args.model))[0],
            "model": args.model,
            "kind": "decode",
            "token_error_rate": row.mean_token_error_rate,
            "rtf": row.mean_rtf,
            "tokens_expanded": row.mean_tokens_expanded,
            "config_desc": f"beam={args.beam:g},max_active={args.max_active}",
        })
        write_manifest("decode", vars(args), {"seed": model.seed},
                       [args.model, args.data], [args.out], args.out)
    return 0


def _cmd_bench(args) -> int:
    model = load_model(args.model)
    dataset = trainer.load_dataset(args.data)
    graph = _build_graph(dataset, args.history_depth)
    config = decoder.DecodeConfig(beam=args.beam, max_active=args.max_active,
                                  acoustic_scale=args.acoustic_scale)
    measurement = measure_rtf(model.params, model.spec, graph, dataset, config,
                              repeats=args.repeats,
                              frame_period=args.frame_period_ms / 1000.0)
    rows = decoder.sweep(model.params, model.spec, graph, dataset,
                         [args.max_active], [args.beam],
                         acoustic_scale=args.acoustic_scale,
                         frame_period=args.frame_period_ms / 1000.0)
    ter = rows[0].mean_token_error_rate
    lo, mid, hi = measurement.spread
    print(f"rtf median {measurement.rtf:.6f} over {measurement.repeats} repeats "
          f"(spread {lo:.6f} / {mid:.6f} / {hi:.6f}); token error rate {ter:.4f}")
    if args.out:
        write_run_record(args.out, {
            "name": args.name or os.path.splitext(os.path.basename(args.model))[0],
            "model": args.model,
            "kind": "bench",
            "rtf": measurement.rtf,
            "rtf_spread": list(measurement.spread),
            "token_error_rate": ter,
            "repeats": measurement.repeats,
            "config_desc": f"beam={args.beam:g},max_active={args.max_active}",
        })
        write_manifest("bench", vars(args), {"seed": model.seed},
                       [args.model, args.data], [args.out], args.out)
    return 0


def _cmd_report(args) -> int:
    records = [load_run_record(path) for path in args.paths]
    print(render_report(records, args.baseline))
    return 0


def _add_common_decode_flags(parser):
    parser.add_argument("--max-active", type=int, default=1_000_000)
    parser.add_argument("--beam", type=float, default=float("inf"))
    parser.add_argument("--acoustic-scale", type=float, default=0.1)
    parser.add_argument("--history-depth", type=int, default=0,
                        help="symbols of left context keyed into the graph")
    parser.add_argument("--frame-period-ms", type=float, default=10.0)
    parser.add_argument("--out", default=None, help="write a run record JSON here")
    parser.add_argument("--name", default=None, help="row name for reports")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rankshrink",
        description="Train, compress, retrain and benchmark small TDNN+LSTM models.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--symbols", type=int, default=8)
    p.add_argument("--feature-dim", type=int, default=20)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--sequences", type=int, default=200)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--preset", choices=PRESET_NAMES, default=None)
    p.add_argument("--spec", default=None, help="JSON network spec file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--learning-rate", type=float, default=0.05)
    p.add_argument("--lr-decay", type=float, default=0.999)
    p.add_argument("--eval-every", type=int, default=50)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("compress", help="factorize a trained model")
    p.add_argument("--in", dest="model_in", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--energy-threshold", type=float,
                   default=compress.DEFAULT_ENERGY_THRESHOLD)
    p.add_argument("--shrinkage-threshold", type=float,
                   default=compress.DEFAULT_SHRINKAGE_THRESHOLD)
    p.add_argument("--prune-mode", choices=("retained", "pruned"), default="retained")
    p.add_argument("--include-output-layer", action="store_true")
    p.add_argument("--report", default=None, help="write the compression report here")
    p.set_defaults(func=_cmd_compress)

    p = sub.add_parser("bottleneck",
                       help="retrain the shrunken architecture from scratch")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--learning-rate", type=float, default=0.05)
    p.add_argument("--lr-decay", type=float, default=0.999)
    p.add_argument("--eval-every", type=int, default=50)
    p.set_defaults(func=_cmd_bottleneck)

    p = sub.add_parser("decode", help="decode a dataset and score it")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    _add_common_decode_flags(p)
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("bench", help="measure the real-time factor")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--repeats", type=int, default=5)
    _add_common_decode_flags(p)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("report", help="render a comparison table from run records")
    p.add_argument("--baseline", required=True)
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (RankshrinkError, OSError, json.JSONDecodeError) as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)},
                  sys.stderr)
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
