"""Command-line client for the detection pipeline.

Every subcommand builds the same request model the HTTP service accepts
and runs it in-process; pass ``--server http://host:port`` to send it to
a running service instead. Commands exit 0 on success and print one
machine-parsable ``error:<kind>:<message>`` line on failure.

The FGA_THREADS environment variable caps the per-image worker count
used during dataset-wide prediction (default 1; reductions stay in a
fixed order either way).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from pydantic import BaseModel

from . import runners, schemas
from .config import parse_config_file
from .errors import ConfigError

_ENDPOINTS = {
    "gradcheck": ("/gradcheck", runners.run_gradcheck, schemas.GradcheckResponse),
    "synth": ("/synth", runners.run_synth, schemas.SynthResponse),
    "train": ("/train", runners.run_train, schemas.TrainResponse),
    "eval": ("/evaluate", runners.run_eval, schemas.EvalResponse),
    "eval-files": ("/evaluate-files", runners.run_eval_files, schemas.EvalResponse),
    "metrics": ("/metrics", runners.run_metrics, schemas.MetricsResponse),
    "split": ("/split", runners.run_split, schemas.SplitResponse),
    "dump-anchors": ("/anchors", runners.run_dump_anchors, schemas.DumpAnchorsResponse),
    "predict": ("/predict", runners.run_predict, schemas.PredictResponse),
}


def _dispatch(command: str, request: BaseModel, server: str | None):
    path, handler, response_model = _ENDPOINTS[command]
    if server is None:
        return handler(request)
    import httpx

    resp = httpx.post(server.rstrip("/") + path,
                      json=json.loads(request.model_dump_json()), timeout=None)
    if resp.status_code != 200:
        raise RuntimeError(f"server returned {resp.status_code}: {resp.text}")
    return response_model.model_validate(resp.json())


def _config_model(args) -> schemas.ConfigModel:
    overrides = {}
    if args.config:
        cfg = parse_config_file(Path(args.config).read_text(), seed=args.seed)
        overrides = cfg.to_dict()
        seed = overrides.pop("seed")
    else:
        if args.seed is None:
            raise ConfigError("seed is mandatory: pass --seed or a config file with one")
        seed = args.seed
    for item in args.set or []:
        key, _, val = item.partition("=")
        if not val:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key] = json.loads(val) if val.startswith("[") else _coerce(val)
    return schemas.ConfigModel(seed=seed, overrides=overrides)


def _coerce(val: str):
    try:
        return int(val)
    except ValueError:
        pass
    try:
        return float(val)
    except ValueError:
        pass
    if "," in val:
        return [int(v) for v in val.split(",")]
    return val


def _print(payload: BaseModel, as_json: bool, summary_lines: list[str]):
    if as_json:
        print(payload.model_dump_json(indent=1))
    else:
        for line in summary_lines:
            print(line)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="hoidet",
                                     description="fine-grained-anchor HOI detection")
    parser.add_argument("--server", help="send the request to a running service")
    parser.add_argument("--json", action="store_true", help="print the full JSON response")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", action="store_true",
                   help="negative control: corrupt one gradient and expect failure")

    p = sub.add_parser("synth", help="generate a synthetic scene corpus")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--objects", type=int, default=3)
    p.add_argument("--verbs", type=int, default=3)
    p.add_argument("--pairs", type=int, default=1)
    p.add_argument("--ar-range", type=float, nargs=2, default=(0.0, 1.0))
    p.add_argument("--lr-range", type=float, nargs=2, default=(0.0, 2.0))

    p = sub.add_parser("train", help="train on an annotation dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", choices=("stagewise", "end2end"), default="stagewise")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config entry")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--setting", choices=("default", "known"), default="default")
    p.add_argument("--out-prefix")
    p.add_argument("--train-data", help="training set used for rare-class counts")
    p.add_argument("--rare-threshold", type=int, default=10)
    p.add_argument("--interpolation", choices=("all", "11point"), default="all")

    p = sub.add_parser("eval-files", help="evaluate prediction/ground-truth files")
    p.add_argument("--predictions", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--num-verbs", type=int, required=True)
    p.add_argument("--setting", choices=("default", "known"), default="default")
    p.add_argument("--interpolation", choices=("all", "11point"), default="all")

    p = sub.add_parser("metrics", help="difficulty histogram of an annotation file")
    p.add_argument("--annotations", required=True)
    p.add_argument("--metric", choices=("ar", "lr"), default="ar")
    p.add_argument("--edges", help="comma-separated list of 11 bin edges")
    p.add_argument("--out-prefix")
    p.add_argument("--per-instance", action="store_true")

    p = sub.add_parser("split", help="difficulty-stratified train/test split")
    p.add_argument("--annotations", required=True)
    p.add_argument("--metric", choices=("ar", "lr"), default="ar")
    p.add_argument("--test-intervals", default="0",
                   help="comma-separated interval indices for the test side")
    p.add_argument("--edges")
    p.add_argument("--min-instances", type=int, default=0)
    p.add_argument("--out-prefix", required=True)

    p = sub.add_parser("dump-anchors", help="serialize fine-grained anchors for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", help="path to a .npy image")
    p.add_argument("--data", help="dataset directory (with --image-id)")
    p.add_argument("--image-id", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("predict", help="scored triplets for one dataset image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--image-id", type=int, required=True)
    p.add_argument("--top-k", type=int, default=100)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    p = sub.add_parser("info", help="print version and config presets")

    args = parser.parse_args(argv)
    try:
        return _run(args)
    except Exception as e:  # contract: one machine-parsable line, nonzero exit
        message = " ".join(str(e).split())
        print(f"error:{type(e).__name__}:{message}", file=sys.stderr)
        return 1


def _run(args) -> int:
    if args.command == "serve":
        import uvicorn

        from .service import app
        uvicorn.run(app, host=args.host, port=args.port)
        return 0

    if args.command == "info":
        print(runners.info().model_dump_json(indent=1))
        return 0

    if args.command == "gradcheck":
        req = schemas.GradcheckRequest(seed=args.seed, corrupt=args.corrupt)
        resp = _dispatch("gradcheck", req, args.server)
        lines = [f"{name}: max rel err {err:.3e}" for name, err in resp.ops.items()]
        lines += [f"model/{name}: max rel err {err:.3e}" for name, err in resp.model.items()]
        lines += [f"op target {resp.op_target:g}, model target {resp.model_target:g}",
                  f"params checked: {resp.param_count}",
                  f"runtime: {resp.runtime_s}s",
                  f"PASSED" if resp.passed else "FAILED"]
        _print(resp, args.json, lines)
        return 0 if resp.passed else 1

    if args.command == "synth":
        req = schemas.SynthRequest(
            seed=args.seed, n_scenes=args.scenes, out_dir=args.out,
            spec=schemas.SceneSpecModel(
                image_size=args.image_size, num_objects=args.objects,
                num_verbs=args.verbs, pairs_per_scene=args.pairs,
                ar_range=tuple(args.ar_range), lr_range=tuple(args.lr_range)))
        resp = _dispatch("synth", req, args.server)
        _print(resp, args.json,
               [f"wrote {resp.n_images} scenes ({resp.n_pairs} pairs) to {resp.out_dir}"])
        return 0

    if args.command == "train":
        req = schemas.TrainRequest(data_dir=args.data, out_dir=args.out,
                                   strategy=args.strategy, config=_config_model(args))
        resp = _dispatch("train", req, args.server)
        _print(resp, args.json, [
            f"epochs: {len(resp.epochs)}",
            f"loss: {resp.initial_loss:.4f} -> {resp.final_loss:.4f}",
            f"checkpoints: {', '.join(resp.checkpoints)}",
            f"loss log: {resp.loss_log_path}"])
        return 0

    if args.command == "eval":
        req = schemas.EvalRequest(
            checkpoint=args.checkpoint, data_dir=args.data, setting=args.setting,
            out_prefix=args.out_prefix, train_data_dir=args.train_data,
            rare_threshold=args.rare_threshold, interpolation=args.interpolation)
        resp = _dispatch("eval", req, args.server)
        _print(resp, args.json, [
            f"setting: {resp.setting}",
            f"full mAP:     {resp.full_map:.6f}",
            f"rare mAP:     {resp.rare_map:.6f}",
            f"non-rare mAP: {resp.non_rare_map:.6f}",
            *( [f"report: {resp.report_json}"] if resp.report_json else [] )])
        return 0

    if args.command == "eval-files":
        req = schemas.EvalFilesRequest(
            predictions_path=args.predictions, ground_truth_path=args.ground_truth,
            num_verbs=args.num_verbs, setting=args.setting,
            interpolation=args.interpolation)
        resp = _dispatch("eval-files", req, args.server)
        _print(resp, args.json, [f"setting: {resp.setting}",
                                 f"full mAP: {resp.full_map:.6f} over {resp.n_classes} classes"])
        return 0

    if args.command == "metrics":
        edges = [float(v) for v in args.edges.split(",")] if args.edges else None
        req = schemas.MetricsRequest(annotations_path=args.annotations,
                                     metric=args.metric, edges=edges,
                                     out_prefix=args.out_prefix,
                                     per_instance=args.per_instance)
        resp = _dispatch("metrics", req, args.server)
        lines = [f"{args.metric} histogram over {resp.total} pairs:"]
        lines += [f"  bin {i}: {c}" for i, c in enumerate(resp.counts)]
        if resp.csv_path:
            lines.append(f"wrote {resp.json_path} and {resp.csv_path}")
        _print(resp, args.json, lines)
        return 0

    if args.command == "split":
        edges = [float(v) for v in args.edges.split(",")] if args.edges else None
        req = schemas.SplitRequest(
            annotations_path=args.annotations, metric=args.metric,
            test_intervals=[int(v) for v in args.test_intervals.split(",")],
            edges=edges, min_instances=args.min_instances, out_prefix=args.out_prefix)
        resp = _dispatch("split", req, args.server)
        _print(resp, args.json, [
            f"train: {resp.train_images} images -> {resp.train_path}",
            f"test:  {resp.test_images} images -> {resp.test_path}"])
        return 0

    if args.command == "dump-anchors":
        req = schemas.DumpAnchorsRequest(
            checkpoint=args.checkpoint, image_path=args.image,
            data_dir=args.data, image_id=args.image_id, out_path=args.out)
        resp = _dispatch("dump-anchors", req, args.server)
        _print(resp, args.json,
               [f"wrote {resp.n_layers} layers x {resp.n_queries} queries to {resp.out_path}"])
        return 0

    if args.command == "predict":
        req = schemas.PredictRequest(checkpoint=args.checkpoint, data_dir=args.data,
                                     image_id=args.image_id, top_k=args.top_k)
        resp = _dispatch("predict", req, args.server)
        lines = [f"image {resp.image_id}: {len(resp.triplets)} triplets"]
        for t in resp.triplets[:10]:
            lines.append(f"  object {t['object']} verb {t['verb']} score {t['score']:.4f}")
        _print(resp, args.json, lines)
        return 0

    raise ConfigError(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
