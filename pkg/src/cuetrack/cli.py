"""Command line entry point: synth, train, track, eval, gradcheck, sweep."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import numerics as nx
from .config import TrainConfig
from .evaluation import evaluate, format_table, merge_reports, write_report
from .gradcheck import format_results, run_gradchecks
from .model import load_model, save_model
from .scene_model import (ConfigError, Frame, GroundTruthSequence, SceneConfig, SchemaError,
                          fill_frame_gaps, generate_scene, ingest_detections, write_frames)
from .tracker import track_sequence
from .training import LabelledSequence, TrainingDiverged, train

log = logging.getLogger("cuetrack")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

DET_SUFFIX, GT_SUFFIX = ".det.jsonl", ".gt.jsonl"


# ---------------------------------------------------------------- run config

@dataclasses.dataclass
class DataConfig:
    n_sequences: int = 4


@dataclasses.dataclass
class PathConfig:
    data_dir: str = "data"
    checkpoint: str = "model.npz"
    loss_log: str = "loss.csv"
    tracks_dir: str = "tracks"
    report: str = "report.json"


SECTIONS = {"train": TrainConfig, "scene": SceneConfig, "data": DataConfig, "paths": PathConfig}


def default_run_config() -> dict:
    return {name: dataclasses.asdict(cls()) for name, cls in SECTIONS.items()}


def _json_ready(obj):
    if isinstance(obj, dict):
        return {k: _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    return obj


def merge_config(base: dict, override: dict) -> dict:
    """Overlay ``override`` on ``base``; unknown sections or keys raise ConfigError."""
    out = {k: dict(v) for k, v in base.items()}
    for section, values in override.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be an object")
        for key, value in values.items():
            if key not in out[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            out[section][key] = value
    return out


def parse_assignment(text: str) -> tuple[str, str, object]:
    """``section.key=value``; the value is read as JSON when possible, else as a string."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"--set expects section.key=value, got {text!r}")
    path, raw = text.split("=", 1)
    section, key = path.split(".", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section, key, value


def load_run_config(path: str | None, assignments=()) -> dict:
    cfg = default_run_config()
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = merge_config(cfg, doc)
    for text in assignments:
        section, key, value = parse_assignment(text)
        cfg = merge_config(cfg, {section: {key: value}})
    train_cfg(cfg)
    scene_cfg(cfg)
    return cfg


def train_cfg(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(cfg["train"])


def scene_cfg(cfg: dict, seed_offset: int = 0) -> SceneConfig:
    values = dict(cfg["scene"])
    for key in ("class_probs", "speed_ranges", "sizes", "occlusions"):
        values[key] = tuple(tuple(v) if isinstance(v, list) else v for v in values[key])
    values["seed"] = int(values["seed"]) + seed_offset
    try:
        sc = SceneConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    sc.validate()
    return sc


def print_effective(cfg: dict) -> None:
    print("effective config: " + json.dumps(_json_ready(cfg), sort_keys=True), file=sys.stderr)


# ---------------------------------------------------------------- data helpers

def _sequence_names(data_dir: Path) -> list[str]:
    return sorted(p.name[: -len(DET_SUFFIX)] for p in data_dir.glob("*" + DET_SUFFIX))


def align_frames(gt_frames, det_frames) -> tuple[list[Frame], list[Frame]]:
    """Give ground truth and detections the same contiguous frame range."""
    both = list(gt_frames) + list(det_frames)
    if not both:
        return [], []
    lo, hi = min(f.index for f in both), max(f.index for f in both)
    stamps = {f.index: f.timestamp for f in both}

    def pad(frames):
        by = {f.index: f for f in frames}
        for i in (lo, hi):
            by.setdefault(i, Frame(i, stamps[i], ()))
        return fill_frame_gaps(sorted(by.values(), key=lambda f: f.index))

    return pad(gt_frames), pad(det_frames)


def load_dataset(data_dir, num_classes: int) -> list[LabelledSequence]:
    data_dir = Path(data_dir)
    out = []
    for name in _sequence_names(data_dir):
        gt_path = data_dir / (name + GT_SUFFIX)
        if not gt_path.exists():
            raise SchemaError(f"{gt_path}: missing ground truth for {name}")
        gt, det = align_frames(ingest_detections(gt_path, num_classes),
                               ingest_detections(data_dir / (name + DET_SUFFIX), num_classes))
        if gt:
            out.append(LabelledSequence(GroundTruthSequence(tuple(gt)), det))
    return out


def _write_loss_rows(path, rows, append: bool) -> None:
    new = not append or not Path(path).exists()
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["epoch", "step", "lr", "L_a", "L_p", "L"])
        for r in rows:
            w.writerow([r.epoch, r.step, f"{r.lr:.10g}", f"{r.l_assoc:.10g}", f"{r.l_pos:.10g}", f"{r.loss:.10g}"])


def _pool_map(fn, items, jobs: int):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: dict, out_dir) -> list[str]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(cfg["data"]["n_sequences"]):
        gt, det = generate_scene(scene_cfg(cfg, i))
        name = f"seq_{i:04d}"
        write_frames(out_dir / (name + DET_SUFFIX), det)
        write_frames(out_dir / (name + GT_SUFFIX), gt.frames)
        names.append(name)
    return names


def cmd_train(cfg: dict, data_dir, out_checkpoint, loss_log=None, resume=None):
    tc = train_cfg(cfg)
    model, optim_state, start_epoch = None, None, 0
    if resume:
        model, header, optim_state = load_model(resume)
        start_epoch = int(header.get("epoch", 0))
        arch = {k: getattr(model.cfg, k) for k in TrainConfig.ARCH_KEYS}
        tc = dataclasses.replace(tc, **arch)
        model.cfg = tc
    dataset = load_dataset(data_dir, tc.num_classes)
    if not dataset:
        raise SchemaError(f"{data_dir}: no labelled sequences found")
    result = train(dataset, tc, model=model, optimizer_state=optim_state, start_epoch=start_epoch)
    save_model(out_checkpoint, result.model, result.optimizer.state_arrays(), epoch=result.last_epoch)
    if loss_log:
        _write_loss_rows(loss_log, result.rows, append=bool(resume))
    return result


def _track_one(job):
    checkpoint, det_path, out_path = job
    model, _, _ = load_model(checkpoint)
    frames = ingest_detections(det_path, model.cfg.num_classes)
    out, fps = track_sequence(frames, model)
    write_frames(out_path, out)
    return str(det_path), len(frames), fps


def cmd_track(checkpoint, detections, out, jobs: int = 1) -> list[tuple[str, int, float]]:
    """Track one file or every ``*.det.jsonl`` in a directory (output mirrors the input)."""
    detections, out = Path(detections), Path(out)
    if detections.is_dir():
        out.mkdir(parents=True, exist_ok=True)
        work = [(checkpoint, detections / (n + DET_SUFFIX), out / (n + ".tracks.jsonl"))
                for n in _sequence_names(detections)]
    else:
        work = [(checkpoint, detections, out)]
    return _pool_map(_track_one, work, jobs)


def _eval_pair(gt_path, track_path, num_classes: int = 7) -> dict:
    gt = ingest_detections(gt_path, num_classes)
    pred = ingest_detections(track_path, num_classes) if Path(track_path).exists() else []
    for f in pred:
        if any(d.track_id is None for d in f.detections):
            raise SchemaError(f"{track_path}: frame {f.index} has a detection without track_id")
    return evaluate(gt, pred)


def cmd_eval(gt, tracks) -> dict:
    """Evaluate one pair of files, or a ground-truth directory against a tracks directory."""
    gt, tracks = Path(gt), Path(tracks)
    if gt.is_dir():
        reports = [_eval_pair(gt / (n + GT_SUFFIX), tracks / (n + ".tracks.jsonl")) for n in _sequence_names(gt)]
        if not reports:
            raise SchemaError(f"{gt}: no sequences")
        return merge_reports(reports)
    return _eval_pair(gt, tracks)


def cmd_gradcheck(seed: int, instances: int = 20, corrupt: float = 0.0):
    return run_gradchecks(seed, instances, corrupt)


def _sweep_one(job):
    cfg, train_dir, eval_dir = job
    tc = train_cfg(cfg)
    result = train(load_dataset(train_dir, tc.num_classes), tc)
    reports = []
    for seq in load_dataset(eval_dir, tc.num_classes):
        out, _ = track_sequence(seq.detections, result.model)
        reports.append(evaluate(list(seq.gt.frames), out))
    return merge_reports(reports)


def parse_grid(specs) -> list[tuple[str, str, list]]:
    grid = []
    for text in specs:
        section, key, _ = parse_assignment(text.split("=", 1)[0] + "=0")
        values = [parse_assignment(f"{section}.{key}={v}")[2] for v in text.split("=", 1)[1].split(",")]
        grid.append((section, key, values))
    return grid


def cmd_sweep(cfg: dict, grid_specs, train_dir, eval_dir, jobs: int = 1) -> list[tuple[dict, dict]]:
    """Train and evaluate once per point of the cartesian grid."""
    grid = parse_grid(grid_specs)
    points, jobs_in = [], []
    for combo in itertools.product(*[vals for _, _, vals in grid]):
        point = {f"{s}.{k}": v for (s, k, _), v in zip(grid, combo)}
        run = cfg
        for (s, k, _), v in zip(grid, combo):
            run = merge_config(run, {s: {k: v}})
        train_cfg(run)
        points.append(point)
        jobs_in.append((run, train_dir, eval_dir))
    return list(zip(points, _pool_map(_sweep_one, jobs_in, jobs)))


# ---------------------------------------------------------------- argparse

def _common(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies must not reset values given before the subcommand name
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=d(None), help="run config JSON (sections: train, scene, data, paths)")
    common.add_argument("--set", dest="assignments", action="append", default=d([]), metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--jobs", type=int, default=d(1), help="max worker processes")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common(suppress=True)
    parser = argparse.ArgumentParser(prog="cuetrack", description=__doc__, parents=[_common(suppress=False)])
    parser.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", parents=[common], help="write synthetic detection and ground-truth files")
    p.add_argument("--out", help="output directory (default paths.data_dir)")

    p = sub.add_parser("train", parents=[common], help="train a model on a synthetic/labelled directory")
    p.add_argument("--data", help="directory of *.det.jsonl / *.gt.jsonl pairs (default paths.data_dir)")
    p.add_argument("--out", help="checkpoint path (default paths.checkpoint)")
    p.add_argument("--log", help="loss CSV (default paths.loss_log)")
    p.add_argument("--resume", help="continue from this checkpoint")

    p = sub.add_parser("track", parents=[common], help="run the online tracker")
    p.add_argument("--checkpoint", help="model checkpoint (default paths.checkpoint)")
    p.add_argument("--detections", required=True, help="detection file or directory")
    p.add_argument("--out", required=True, help="track file or directory")

    p = sub.add_parser("eval", parents=[common], help="score tracks against ground truth")
    p.add_argument("--gt", required=True, help="ground-truth file or directory")
    p.add_argument("--tracks", required=True, help="track file or directory")
    p.add_argument("--out", help="JSON report path (a .txt table is written beside it)")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--corrupt", type=float, default=0.0, help="scale analytic gradients by 1+CORRUPT (self-test)")

    p = sub.add_parser("sweep", parents=[common], help="train/evaluate over a grid of config values")
    p.add_argument("--grid", action="append", required=True, metavar="SECTION.KEY=V1,V2",
                   help="values to sweep (repeatable; cartesian product)")
    p.add_argument("--data", required=True, help="training directory")
    p.add_argument("--eval-data", required=True, help="held-out directory")
    p.add_argument("--out", help="JSON file for the sweep results")
    return parser


def _run(args) -> int:
    cfg = load_run_config(args.config, args.assignments)
    if args.dump_config or args.command is None:
        print(json.dumps(_json_ready(cfg), indent=2, sort_keys=True))
        return EXIT_OK
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    print_effective(cfg)
    paths = cfg["paths"]

    if args.command == "synth":
        names = cmd_synth(cfg, args.out or paths["data_dir"])
        print(f"wrote {len(names)} sequence(s) to {args.out or paths['data_dir']}")
    elif args.command == "train":
        result = cmd_train(cfg, args.data or paths["data_dir"], args.out or paths["checkpoint"],
                           args.log or paths["loss_log"], args.resume)
        final = result.epoch_losses[-1] if result.epoch_losses else float("nan")
        print(f"trained to epoch {result.last_epoch}; final epoch loss {final:.6f}")
    elif args.command == "track":
        for name, n, fps in cmd_track(args.checkpoint or paths["checkpoint"], args.detections, args.out, args.jobs):
            print(f"{name}: {n} frames, throughput {fps:.1f} frames/s")
    elif args.command == "eval":
        report = cmd_eval(args.gt, args.tracks)
        print(format_table(report), end="")
        if args.out:
            write_report(report, args.out, Path(args.out).with_suffix(".txt"))
    elif args.command == "gradcheck":
        results = cmd_gradcheck(args.seed, args.instances, args.corrupt)
        print(format_results(results))
        if not all(r.passed for r in results):
            return EXIT_NUMERIC
    elif args.command == "sweep":
        rows = cmd_sweep(cfg, args.grid, args.data, args.eval_data, args.jobs)
        for point, report in rows:
            print(json.dumps(point), f"AMOTA={report['AMOTA']:.4f} MOTA={report['MOTA']:.4f} IDS={report['IDS']}")
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                json.dump([{"point": p, "report": r} for p, r in rows], fh, indent=2)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (ConfigError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        print(json.dumps(exc.diagnostics), file=sys.stderr)
        return EXIT_NUMERIC
    except nx.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
