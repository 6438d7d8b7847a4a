"""Command-line entry point for the pipeline stages.

Commands: synth, pretrain, score, train-stcnet, complete, train-reid,
evaluate, visualize, and pipeline (all stages in order). Configuration layers
as defaults < --config file < explicit flags; every stage writes the resolved
snapshot, its inputs/outputs, and checkpoint hashes to a run_manifest.json in
its output directory. Failures exit nonzero with one machine-parseable line:
``error.<class>: <message>`` where class is usage, config, or stage.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoints import checkpoint_sha
from .data import (
    DatasetManifest,
    SynthConfig,
    VideoDataset,
    generate_synthetic_dataset,
    load_dataset,
    occlusions_from_json,
    occlusions_to_json,
)
from .occlusion import (
    DEFAULT_TAU,
    calibrate_tau,
    detection_auc,
    locate_all,
    score_track,
    tau_sweep,
)
from .reid import ReidFeatureExtractor, format_report
from .training import (
    Guider,
    TrainConfig,
    complete_dataset,
    evaluate_dataset,
    load_reid_model,
    load_stcnet_bundle,
    pretrain_reid,
    save_reid_checkpoint,
    save_stcnet_checkpoint,
    train_reid_model,
    train_stcnet,
    write_metrics,
)
from .visualize import save_completion_grids, save_score_strips

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_STAGE = 4


class UsageError(Exception):
    pass


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: A003 - argparse API
        raise UsageError(message)


def _write_json(path: Path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return path


def _write_run_manifest(
    out_dir: Path, command: str, config: dict, inputs: dict, outputs: dict, hashes: dict | None = None
) -> Path:
    return _write_json(
        Path(out_dir) / "run_manifest.json",
        {
            "command": command,
            "config": config,
            "seed": config.get("seed"),
            "inputs": {k: str(v) for k, v in inputs.items()},
            "outputs": {k: str(v) for k, v in outputs.items()},
            "checkpoint_hashes": hashes or {},
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        },
    )


def _layered(defaults: dict, args: argparse.Namespace) -> dict:
    """defaults < --config file < explicitly passed flags."""
    resolved = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            overrides = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        unknown = set(overrides) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(overrides)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


_TRAIN_DEFAULTS = {
    "seed": 0,
    "profile": "tiny",
    "batch_size": 8,
    "epochs": 20,
    "steps": 600,
    "tau": DEFAULT_TAU,
    "spatial_only": False,
    "temporal": True,
    "temporal_variant": "attention",
    "local_disc": True,
    "global_disc": True,
    "guider": True,
    "nonlocal_blocks": True,
}

_SYNTH_DEFAULTS = {
    "seed": 0,
    "identities": 20,
    "tracklets": 4,
    "frames": 16,
    "height": 64,
    "width": 32,
    "cameras": 2,
    "occlusion_rate": 0.25,
    "train_fraction": 0.5,
}


def _train_config(params: dict) -> TrainConfig:
    return TrainConfig.desk(
        seed=params["seed"],
        profile=params["profile"],
        batch_size=params["batch_size"],
        reid_epochs=params["epochs"],
        stcnet_steps=params["steps"],
        spatial_only=params["spatial_only"],
        use_temporal=params["temporal"],
        temporal_variant=params["temporal_variant"],
        use_local_disc=params["local_disc"],
        use_global_disc=params["global_disc"],
        use_guider=params["guider"],
        use_nonlocal=params["nonlocal_blocks"],
    )


def _records_for(dataset: VideoDataset, occlusions_path: str | None):
    if occlusions_path:
        path = Path(occlusions_path)
        if not path.is_file():
            raise ConfigError(f"occlusions file not found: {path}")
        return occlusions_from_json(json.loads(path.read_text()))
    return list(dataset.manifest.occlusions)


# ---------------------------------------------------------------------------
# stage runners (used by both the individual commands and `pipeline`)
# ---------------------------------------------------------------------------

def run_synth(out: Path, params: dict) -> dict:
    config = SynthConfig(
        root=Path(out),
        identities=params["identities"],
        tracklets_per_identity=params["tracklets"],
        frames_per_tracklet=params["frames"],
        height=params["height"],
        width=params["width"],
        cameras=params["cameras"],
        occlusion_rate=params["occlusion_rate"],
        train_fraction=params["train_fraction"],
        seed=params["seed"],
    )
    manifest = generate_synthetic_dataset(config)
    outputs = {"dataset": out, "manifest": Path(out) / "manifest.json"}
    _write_run_manifest(out, "synth", params, {}, outputs)
    return outputs


def run_pretrain(data: Path, out: Path, params: dict) -> dict:
    dataset = load_dataset(data)
    result = pretrain_reid(dataset, _train_config(params))
    ckpt = save_reid_checkpoint(Path(out) / "reid_pretrain.pt", result)
    history = _write_json(Path(out) / "history.json", result.history)
    outputs = {"checkpoint": ckpt, "history": history}
    _write_run_manifest(out, "pretrain", params, {"data": data}, outputs, {"checkpoint": checkpoint_sha(ckpt)})
    return outputs


def run_score(data: Path, ckpt: Path, out: Path, params: dict, calibrate: bool = False) -> dict:
    dataset = load_dataset(data)
    model, _ = load_reid_model(ckpt)
    extractor = ReidFeatureExtractor(model)
    tables = {tid: score_track(dataset.tracks[tid], extractor) for tid in sorted(dataset.tracks)}
    tau = params["tau"]
    flagged = locate_all(tables, tau)

    out = Path(out)
    tables_path = _write_json(out / "tables.json", {str(tid): t.to_dict() for tid, t in tables.items()})
    flagged_path = _write_json(out / "flagged.json", occlusions_to_json(flagged))
    summary = {"tau": tau, "flagged": len(flagged), "tracklets": len(tables)}
    truth = dataset.manifest.occlusions
    if truth:
        summary["detection_auc"] = detection_auc(tables, truth)
    outputs = {"tables": tables_path, "flagged": flagged_path}

    if calibrate:
        if not truth:
            raise ConfigError("calibration needs ground-truth occlusions in the manifest")
        scores = np.concatenate([t.scores.reshape(-1) for t in tables.values()])
        grid = np.unique(np.quantile(scores, np.linspace(0.01, 0.99, 99)))
        points = tau_sweep(tables, truth, grid)
        best = calibrate_tau(tables, truth, grid)
        calibration = {
            "best_tau": best,
            "points": [vars(p) for p in points],
        }
        outputs["calibration"] = _write_json(out / "calibration.json", calibration)
        summary["best_tau"] = best

    outputs["summary"] = _write_json(out / "summary.json", summary)
    _write_run_manifest(out, "score", params, {"data": data, "checkpoint": ckpt}, outputs,
                        {"checkpoint": checkpoint_sha(ckpt)})
    return outputs


def run_train_stcnet(
    data: Path, out: Path, params: dict, guider_ckpt: Path | None, occlusions_path: str | None
) -> dict:
    dataset = load_dataset(data)
    config = _train_config(params)
    guider = None
    if config.use_guider:
        if guider_ckpt is None:
            raise ConfigError("a pretrained guider checkpoint is required unless --no-guider is set")
        guider = Guider.from_checkpoint(guider_ckpt)
    records = _records_for(dataset, occlusions_path)
    result = train_stcnet(dataset, records, config, guider=guider)
    ckpt = save_stcnet_checkpoint(Path(out) / "stcnet.pt", result)
    metrics = write_metrics(Path(out) / "metrics.jsonl", result.metrics)
    outputs = {"checkpoint": ckpt, "metrics": metrics}
    inputs = {"data": data, "occlusions": occlusions_path or "manifest", "guider": guider_ckpt or ""}
    _write_run_manifest(out, "train-stcnet", params, inputs, outputs, {"checkpoint": checkpoint_sha(ckpt)})
    return outputs


def run_complete(data: Path, ckpt: Path, out: Path, params: dict, occlusions_path: str | None) -> dict:
    dataset = load_dataset(data)
    bundle = load_stcnet_bundle(ckpt)
    records = _records_for(dataset, occlusions_path)
    sha = checkpoint_sha(ckpt)
    complete_dataset(dataset, records, bundle, Path(out), source_checkpoint=sha)
    outputs = {"dataset": out, "manifest": Path(out) / "manifest.json"}
    inputs = {"data": data, "checkpoint": ckpt, "occlusions": occlusions_path or "manifest"}
    _write_run_manifest(out, "complete", params, inputs, outputs, {"checkpoint": sha})
    return outputs


def run_train_reid(data: Path, out: Path, params: dict) -> dict:
    dataset = load_dataset(data)
    config = _train_config(params)
    result = train_reid_model(dataset, config, use_nonlocal=params["nonlocal_blocks"])
    ckpt = save_reid_checkpoint(Path(out) / "reid.pt", result)
    history = _write_json(Path(out) / "history.json", result.history)
    outputs = {"checkpoint": ckpt, "history": history}
    _write_run_manifest(out, "train-reid", params, {"data": data}, outputs, {"checkpoint": checkpoint_sha(ckpt)})
    return outputs


def run_evaluate(data: Path, ckpt: Path, out: Path, params: dict) -> dict:
    dataset = load_dataset(data)
    model, _ = load_reid_model(ckpt)
    report = evaluate_dataset(dataset, model)
    out = Path(out)
    report_path = _write_json(out / "report.json", report)
    text_path = out / "report.txt"
    text_path.write_text(format_report(report) + "\n")
    outputs = {"report": report_path, "text": text_path}
    _write_run_manifest(out, "evaluate", params, {"data": data, "checkpoint": ckpt}, outputs,
                        {"checkpoint": checkpoint_sha(ckpt)})
    return outputs


def run_visualize(
    data: Path,
    out: Path,
    params: dict,
    scores_path: str | None = None,
    ckpt: Path | None = None,
    completed: Path | None = None,
    occlusions_path: str | None = None,
    limit: int = 8,
) -> dict:
    from .occlusion import RegionScoreTable

    dataset = load_dataset(data)
    out = Path(out)
    outputs: dict = {}

    tables = None
    if scores_path:
        payload = json.loads(Path(scores_path).read_text())
        tables = {int(tid): RegionScoreTable.from_dict(t) for tid, t in payload.items()}
    elif ckpt:
        model, _ = load_reid_model(ckpt)
        extractor = ReidFeatureExtractor(model)
        tables = {tid: score_track(dataset.tracks[tid], extractor) for tid in sorted(dataset.tracks)}
    if tables:
        strip_paths = save_score_strips(tables, out / "strips", limit=limit)
        outputs["strips"] = out / "strips"
        outputs["strip_count"] = len(strip_paths)

    records = _records_for(dataset, occlusions_path)
    if records:
        completed_dataset_obj = load_dataset(completed) if completed else None
        grid_paths = save_completion_grids(dataset, records, out / "grids", completed_dataset_obj, limit=limit)
        outputs["grids"] = out / "grids"
        outputs["grid_count"] = len(grid_paths)

    inputs = {"data": data, "scores": scores_path or "", "completed": completed or ""}
    _write_run_manifest(out, "visualize", params, inputs, outputs)
    return outputs


def run_pipeline(out: Path, params: dict, data: Path | None = None) -> dict:
    out = Path(out)
    if data is None:
        data = Path(run_synth(out / "dataset", params)["dataset"])
    pretrain = run_pretrain(data, out / "pretrain", params)
    score = run_score(data, pretrain["checkpoint"], out / "score", params)
    stcnet = run_train_stcnet(
        data, out / "stcnet", params, guider_ckpt=pretrain["checkpoint"],
        occlusions_path=str(score["flagged"]),
    )
    completed = run_complete(data, stcnet["checkpoint"], out / "completed", params, str(score["flagged"]))
    reid = run_train_reid(Path(completed["dataset"]), out / "reid", params)
    evaluation = run_evaluate(Path(completed["dataset"]), reid["checkpoint"], out / "evaluation", params)
    visualization = run_visualize(
        data,
        out / "visualization",
        params,
        scores_path=str(score["tables"]),
        completed=Path(completed["dataset"]),
        occlusions_path=str(score["flagged"]),
    )
    outputs = {
        "dataset": data,
        "pretrain": pretrain["checkpoint"],
        "stcnet": stcnet["checkpoint"],
        "completed": completed["dataset"],
        "reid": reid["checkpoint"],
        "report": evaluation["report"],
        "visualization": out / "visualization",
    }
    _write_run_manifest(out, "pipeline", params, {"data": data}, outputs)
    return outputs


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file with config overrides")
    parser.add_argument("--seed", type=int, default=None)


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--profile", choices=["tiny", "paper"], default=None)
    parser.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--steps", type=int, default=None)
    parser.add_argument("--tau", type=float, default=None)
    parser.add_argument("--spatial-only", dest="spatial_only", action="store_true", default=None)
    parser.add_argument("--temporal", dest="temporal", action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--temporal-variant", dest="temporal_variant", choices=["attention", "ae", "tae"], default=None)
    parser.add_argument("--local-disc", dest="local_disc", action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--global-disc", dest="global_disc", action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--guider", dest="guider", action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--nonlocal", dest="nonlocal_blocks", action=argparse.BooleanOptionalAction, default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="trackmend", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate the synthetic occluded dataset")
    p.add_argument("--out", required=True)
    for key in ("identities", "tracklets", "frames", "height", "width", "cameras"):
        p.add_argument(f"--{key}", type=int, default=None)
    p.add_argument("--occlusion-rate", dest="occlusion_rate", type=float, default=None)
    p.add_argument("--train-fraction", dest="train_fraction", type=float, default=None)
    _add_common(p)

    p = sub.add_parser("pretrain", help="train the plain identity network (extractor + guider)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    _add_train_flags(p)

    p = sub.add_parser("score", help="score frame regions and flag occlusions")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--calibrate", action="store_true")
    _add_common(p)
    _add_train_flags(p)

    p = sub.add_parser("train-stcnet", help="train the completion networks")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--guider-ckpt", dest="guider_ckpt", default=None)
    p.add_argument("--occlusions", default=None, help="flagged-regions JSON (default: manifest records)")
    _add_common(p)
    _add_train_flags(p)

    p = sub.add_parser("complete", help="rewrite flagged regions with the trained networks")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--occlusions", default=None)
    _add_common(p)

    p = sub.add_parser("train-reid", help="train the final re-ID network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    _add_train_flags(p)

    p = sub.add_parser("evaluate", help="CMC/mAP evaluation of a trained re-ID network")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("visualize", help="score strips and completion grids")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scores", default=None)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--completed", default=None)
    p.add_argument("--occlusions", default=None)
    p.add_argument("--limit", type=int, default=8)
    _add_common(p)

    p = sub.add_parser("pipeline", help="run every stage in order")
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None, help="existing dataset (default: synthesize one)")
    for key in ("identities", "tracklets", "frames", "height", "width", "cameras"):
        p.add_argument(f"--{key}", type=int, default=None)
    p.add_argument("--occlusion-rate", dest="occlusion_rate", type=float, default=None)
    p.add_argument("--train-fraction", dest="train_fraction", type=float, default=None)
    _add_common(p)
    _add_train_flags(p)

    return parser


def dispatch(argv) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required (see --help)")
        if args.command == "synth":
            params = _layered(_SYNTH_DEFAULTS, args)
            run_synth(Path(args.out), params)
        elif args.command == "pretrain":
            params = _layered(_TRAIN_DEFAULTS, args)
            run_pretrain(Path(args.data), Path(args.out), params)
        elif args.command == "score":
            params = _layered(_TRAIN_DEFAULTS, args)
            run_score(Path(args.data), Path(args.ckpt), Path(args.out), params, calibrate=args.calibrate)
        elif args.command == "train-stcnet":
            params = _layered(_TRAIN_DEFAULTS, args)
            guider_ckpt = Path(args.guider_ckpt) if args.guider_ckpt else None
            run_train_stcnet(Path(args.data), Path(args.out), params, guider_ckpt, args.occlusions)
        elif args.command == "complete":
            params = _layered(_TRAIN_DEFAULTS, args)
            run_complete(Path(args.data), Path(args.ckpt), Path(args.out), params, args.occlusions)
        elif args.command == "train-reid":
            params = _layered(_TRAIN_DEFAULTS, args)
            run_train_reid(Path(args.data), Path(args.out), params)
        elif args.command == "evaluate":
            params = _layered(_TRAIN_DEFAULTS, args)
            run_evaluate(Path(args.data), Path(args.ckpt), Path(args.out), params)
        elif args.command == "visualize":
            params = _layered(_TRAIN_DEFAULTS, args)
            run_visualize(
                Path(args.data),
                Path(args.out),
                params,
                scores_path=args.scores,
                ckpt=Path(args.ckpt) if args.ckpt else None,
                completed=Path(args.completed) if args.completed else None,
                occlusions_path=args.occlusions,
                limit=args.limit,
            )
        elif args.command == "pipeline":
            params = _layered({**_SYNTH_DEFAULTS, **_TRAIN_DEFAULTS}, args)
            run_pipeline(Path(args.out), params, data=Path(args.data) if args.data else None)
        else:  # pragma: no cover - argparse limits choices
            raise UsageError(f"unknown command {args.command!r}")
        return EXIT_OK
    except UsageError as exc:
        print(f"error.usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error.config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surface any stage failure uniformly
        print(f"error.stage: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
