"""Command-line workflow: synth, train-cnn, convert, train-rnn, predict,
evaluate, selftest and config.

Every command writes under a run directory and records its inputs and
output digests in ``manifest.json`` there. Failures exit nonzero with a
one-line JSON error on stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import data as D
from . import pipeline as P
from .config import ConfigError, RunConfig, desk_scale, load_config
from .evaluate import FinalPrediction, match_vertebrae, predict_volume, summarize
from .net import (cnn_section, convert_to_fcn, fcn_from_section, fcn_section, params_from_section,
                  read_checkpoint, write_checkpoint)
from .sequence import BiRnnArch, BiRnnParams

log = logging.getLogger("spinemark")

EXIT_CONFIG = 2
EXIT_FAILURE = 1


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def record(run_dir, command: str, inputs: dict, outputs: list) -> None:
    """Append one entry to ``run_dir/manifest.json``; no timestamps so reruns
    produce identical manifests."""
    run_dir = Path(run_dir)
    path = run_dir / "manifest.json"
    doc = json.loads(path.read_text()) if path.exists() else {"entries": []}
    entry = {"command": command, "inputs": inputs,
             "outputs": {str(Path(p).relative_to(run_dir)): _digest(p) for p in outputs}}
    doc["entries"] = [e for e in doc["entries"] if e["command"] != command] + [entry]
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    doc = cfg.to_json()
    for item in getattr(args, "set", None) or []:
        key, sep, raw = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        doc.setdefault(section, {})[name] = value
    for flag in ("train_dir", "test_dir", "run_dir"):
        value = getattr(args, flag, None)
        if value is not None:
            doc["paths"][flag] = value
    return RunConfig.from_json(doc)


def _run_dir(cfg: RunConfig) -> Path:
    path = Path(cfg.paths.run_dir or "run")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_jsonl(path, rows) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def _load_birnn(sections) -> BiRnnParams | None:
    if "birnn" not in sections:
        return None
    desc, tensors = sections["birnn"]
    return BiRnnParams(BiRnnArch.from_json(desc), tensors)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> None:
    doc = json.loads(Path(args.spec_file).read_text())
    spec = P.CorpusSpec.from_json(doc)
    items = P.phantom_corpus(spec)
    out = Path(args.out_dir)
    paths = P.write_corpus(out, items)
    outputs = paths + [D.sidecar_path(p) for p in paths]
    record(out, "synth", {"spec": spec.to_json()}, outputs)
    print(f"wrote {len(paths)} phantoms to {out}")


def cmd_train_cnn(args) -> None:
    cfg = _config(args)
    cfg.require("train_dir")
    run = _run_dir(cfg)
    volumes = P.load_corpus(cfg.paths.train_dir)
    history = []
    params = P.train_cnn_stage(cfg, volumes, history)
    ckpt = run / "cnn.spmk"
    write_checkpoint(ckpt, [cnn_section(params)])
    _write_jsonl(run / "cnn_history.jsonl", history)
    (run / "config.json").write_text(cfg.dumps())
    record(run, "train-cnn", {"config": cfg.to_json()}, [ckpt, run / "cnn_history.jsonl"])
    print(f"wrote {ckpt}")


def cmd_convert(args) -> None:
    sections = read_checkpoint(args.checkpoint)
    if "cnn" not in sections:
        raise ValueError(f"{args.checkpoint} has no cnn section")
    fcn = convert_to_fcn(params_from_section(sections["cnn"]))
    run = Path(args.run_dir or Path(args.checkpoint).parent)
    run.mkdir(parents=True, exist_ok=True)
    out = run / "fcn.spmk"
    write_checkpoint(out, [fcn_section(fcn)])
    record(run, "convert", {"checkpoint": _digest(args.checkpoint)}, [out])
    print(f"wrote {out}")


def cmd_train_rnn(args) -> None:
    cfg = _config(args)
    cfg.require("train_dir")
    run = _run_dir(cfg)
    sections = read_checkpoint(args.model)
    if "fcn" not in sections:
        raise ValueError(f"{args.model} has no fcn section; run `convert` first")
    fcn = fcn_from_section(sections["fcn"])
    volumes = P.load_corpus(cfg.paths.train_dir)
    history = []
    birnn = P.train_rnn_stage(cfg, fcn, volumes, history)
    out = run / "model.spmk"
    write_checkpoint(out, [fcn_section(fcn), ("birnn", birnn.arch.to_json(), birnn.tensors)])
    _write_jsonl(run / "rnn_history.jsonl", history)
    record(run, "train-rnn", {"config": cfg.to_json(), "model": _digest(args.model)},
           [out, run / "rnn_history.jsonl"])
    print(f"wrote {out}")


def _volume_paths(target) -> list[Path]:
    target = Path(target)
    if target.is_dir():
        return sorted(target.glob("*.vvol"))
    return [target]


def cmd_predict(args) -> None:
    sections = read_checkpoint(args.model)
    if "fcn" not in sections:
        raise ValueError(f"{args.model} has no fcn section")
    fcn = fcn_from_section(sections["fcn"])
    birnn = _load_birnn(sections)
    run = Path(args.run_dir or "run")
    out_dir = run / "predictions"
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for path in _volume_paths(args.volume):
        vol, _ = D.load_volume(path)
        vol, _ = D.resample(vol)
        pred = predict_volume(fcn, birnn, vol)
        doc = {"volume": path.name, "spacing_mm": list(vol.spacing_mm), "dims": list(vol.dims),
               "sequence_length": pred.sequence_length, "diagnostic": pred.diagnostic,
               "cnn_birnn": [p.to_json() for p in pred.rnn.values()] if birnn else None,
               "cnn_only": [p.to_json() for p in pred.cnn.values()]}
        out = out_dir / f"{path.stem}.json"
        P.dump_json(out, doc)
        outputs.append(out)
    record(run, "predict", {"model": _digest(args.model)}, outputs)
    print(f"wrote {len(outputs)} prediction files to {out_dir}")


def _finals(entries) -> dict[int, FinalPrediction]:
    out = {}
    for e in entries:
        label = D.encode_label(e["label"])
        out[label] = FinalPrediction(label, tuple(e["centroid_voxel"]), int(e["support_count"]),
                                     float(e["mean_confidence"]))
    return out


def cmd_evaluate(args) -> None:
    preds = sorted(Path(args.pred).glob("*.json")) if Path(args.pred).is_dir() else [Path(args.pred)]
    gt_paths = {p.stem: p for p in _volume_paths(args.gt)}
    rows = {"cnn_only": [], "cnn_birnn": []}
    fps = {"cnn_only": [], "cnn_birnn": []}
    for path in preds:
        doc = json.loads(path.read_text())
        stem = Path(doc["volume"]).stem
        if stem not in gt_paths:
            raise FileNotFoundError(f"no ground truth volume for prediction {path.name}")
        _, ann = D.load_volume(gt_paths[stem])
        if ann is None:
            raise FileNotFoundError(f"{gt_paths[stem]} has no annotation sidecar")
        for key in rows:
            if doc.get(key) is None:
                continue
            final = _finals(doc[key])
            rows[key] += match_vertebrae(final, ann, doc["spacing_mm"], args.threshold_mm)
            present = set(ann.labels.tolist())
            fps[key] += [f"{stem}:{D.decode_label(k)}" for k in final if k not in present]
    report = {key: summarize(rows[key], fps[key]) for key in rows if rows[key]}
    run = Path(args.run_dir or "run")
    run.mkdir(parents=True, exist_ok=True)
    out = run / "report.json"
    P.dump_json(out, report)
    record(run, "evaluate", {"predictions": [_digest(p) for p in preds]}, [out])
    print(json.dumps(report, indent=2, sort_keys=True))


def cmd_selftest(args) -> None:
    from .selftest import run_selftest
    ok = run_selftest(end_to_end=args.end_to_end, run_dir=args.run_dir)
    if not ok:
        raise SystemExit(EXIT_FAILURE)


def cmd_config(args) -> None:
    cfg = desk_scale() if args.desk_scale else RunConfig()
    if args.parse:
        cfg = load_config(args.parse)
    sys.stdout.write(cfg.dumps())


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _threads(value) -> int:
    if value is None:
        value = os.environ.get("SPINEMARK_THREADS")
    if value is None:
        return os.cpu_count() or 1
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"thread count must be an integer, got {value!r}") from None
    if n < 1:
        raise ConfigError(f"thread count must be >= 1, got {n}")
    return n


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spinemark", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", help="BLAS threads (default: $SPINEMARK_THREADS or the core count)")
    ap.add_argument("--log-level", default="INFO")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="RunConfig JSON file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value (JSON literal)")
        p.add_argument("--train-dir")
        p.add_argument("--run-dir")
        return p

    p = sub.add_parser("synth", help="write a phantom corpus")
    p.add_argument("spec_file")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_synth)

    p = with_config(sub.add_parser("train-cnn", help="train the multi-task CNN"))
    p.set_defaults(func=cmd_train_cnn)

    p = sub.add_parser("convert", help="re-lay a CNN checkpoint out as an FCN")
    p.add_argument("checkpoint")
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_convert)

    p = with_config(sub.add_parser("train-rnn", help="train the Bi-RNN on FCN features"))
    p.add_argument("--model", required=True, help="checkpoint with an fcn section")
    p.set_defaults(func=cmd_train_rnn)

    p = sub.add_parser("predict", help="predict centroids for a volume or a directory of volumes")
    p.add_argument("volume")
    p.add_argument("--model", required=True)
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against annotated volumes")
    p.add_argument("pred", help="prediction JSON or directory of them")
    p.add_argument("gt", help="annotated .vvol or directory")
    p.add_argument("--threshold-mm", type=float, default=20.0)
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("selftest", help="run the oracle suite")
    p.add_argument("--end-to-end", action="store_true", help="also train and score on phantoms")
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("config", help="print a config (defaults, desk scale, or parsed file)")
    p.add_argument("--desk-scale", action="store_true")
    p.add_argument("--parse", metavar="FILE", help="parse FILE and re-emit it")
    p.set_defaults(func=cmd_config)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=_threads(args.threads)):
            args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except ConfigError as exc:
        _fail(args.command, exc)
        return EXIT_CONFIG
    except Exception as exc:  # every failure becomes a structured message
        _fail(args.command, exc)
        return EXIT_FAILURE
    return 0


def _fail(command, exc) -> None:
    sys.stderr.write(json.dumps({"command": command, "error": type(exc).__name__,
                                 "message": str(exc)}) + "\n")


if __name__ == "__main__":
    raise SystemExit(main())
