"""Command-line entry point.

JSON results go to stdout, diagnostics to stderr. Exit codes: 0 success,
1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, FuseError
from .fmri import PatchSpec, load_volume
from .metadata import MetadataSchema, default_schema

log = logging.getLogger("fmrifuse")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("FUSE_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise ConfigError(f"FUSE_SEED must be an integer, got {env!r}") from exc


def _read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, Path):
        return str(x)
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


# ---------------------------------------------------------------------------
# run configuration


class RunConfig:
    """Parsed ``train`` config: model, train and data sections plus output directory."""

    def __init__(self, obj: dict, base: Path):
        from .model import ModelConfig
        from .training import TrainConfig

        unknown = sorted(set(obj) - {"model", "train", "data", "output_dir"})
        if unknown:
            raise ConfigError(f"unknown run config keys: {unknown}")
        data = obj.get("data") or {}
        if "manifest" not in data or "patch" not in data:
            raise ConfigError("run config 'data' needs 'manifest' and 'patch'")
        self.model = ModelConfig.from_dict(obj.get("model") or {})
        self.train = TrainConfig.from_dict(obj.get("train") or {})
        self.manifest = base / data["manifest"]
        self.eval_manifest = base / data["eval_manifest"] if data.get("eval_manifest") else None
        self.patch = PatchSpec.from_sequence(data["patch"])
        self.schema_path = base / data["schema"] if data.get("schema") else None
        self.output_dir = base / obj.get("output_dir", "run")

    def validate(self):
        from .synth import load_manifest

        for path in (self.manifest, self.eval_manifest, self.schema_path):
            if path is not None and not path.exists():
                raise ConfigError(f"referenced path {path} does not exist")
        dataset = load_manifest(self.manifest)
        shape = load_volume(dataset.samples[0].volume).shape
        try:
            self.patch.check(shape)
        except FuseError as exc:
            raise ConfigError(str(exc)) from exc
        return dataset

    @property
    def schema(self) -> MetadataSchema:
        return MetadataSchema.load(self.schema_path) if self.schema_path else default_schema()


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    from .synth import SynthConfig, synth_dataset

    cfg = SynthConfig.from_dict(_read_json(args.config)) if args.config else SynthConfig()
    overrides = {"n_samples": args.n_samples, "n_test": args.n_test, "domain_count": args.domains}
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    cfg.validate()
    result = synth_dataset(cfg, _seed(args), args.out)
    _emit(result)
    return EXIT_OK


def cmd_train(args) -> int:
    from .synth import load_manifest
    from .training import file_sha256, train_loop

    run = RunConfig(_read_json(args.config), Path(args.config).parent)
    if args.seed is not None or "FUSE_SEED" in os.environ:
        run.train.seed = _seed(args)
    if args.out:
        run.output_dir = Path(args.out)
    dataset = run.validate()
    eval_dataset = load_manifest(run.eval_manifest) if run.eval_manifest else None
    result = train_loop(dataset, run.model, run.train, run.patch, run.schema, run.output_dir, eval_dataset)
    _emit({
        "final_checkpoint": str(result.final_checkpoint),
        "best_checkpoint": str(result.best_checkpoint),
        "metrics_log": str(run.output_dir / "metrics.jsonl"),
        "checkpoint_sha256": file_sha256(result.final_checkpoint),
        "final_epoch": result.history[-1],
    })
    return EXIT_OK


def cmd_eval(args) -> int:
    from .synth import load_manifest
    from .training import evaluate

    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint {args.checkpoint} does not exist")
    _emit(evaluate(args.checkpoint, load_manifest(args.manifest)).to_dict())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import desk_gradcheck

    report = desk_gradcheck(_seed(args), args.eps, args.lam)
    _emit({**report.to_dict(), "tolerance": args.tol, "passed": report.max_rel_err < args.tol})
    return EXIT_OK if report.max_rel_err < args.tol else EXIT_FAILURE


def cmd_inspect_meta(args) -> int:
    from .dicom import load_metadata

    path = Path(args.path)
    if not path.exists():
        raise FileNotFoundError(f"metadata file {path} does not exist")
    schema = MetadataSchema.load(args.schema) if args.schema else default_schema()
    _emit(load_metadata(path, schema).to_dict())
    return EXIT_OK


def cmd_export_attention(args) -> int:
    from .model import export_attention, forward, load_checkpoint
    from .metadata import NormStats
    from .synth import Dataset, load_manifest
    from .training import prepare

    cfg, params, extra = load_checkpoint(args.checkpoint)
    dataset = load_manifest(args.manifest)
    if not 0 <= args.index < len(dataset):
        raise ConfigError(f"sample index {args.index} outside [0, {len(dataset)})")
    schema = MetadataSchema.from_dict(extra["schema"])
    one = Dataset([dataset.samples[args.index]], dataset.class_count, dataset.root)
    data = prepare(one, PatchSpec.from_sequence(extra["patch_spec"]), schema, NormStats.from_dict(extra["norm_stats"]))
    out = forward(params, cfg, data.fmri, data.meta, training=False, meta_names=list(schema.names))
    doc = export_attention(out.attention, args.out)
    _emit({
        "path": args.out,
        "probs": out.probs.data[0].tolist(),
        "label": int(data.labels[0]),
        "layers": len(doc["layers"]),
    })
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fmrifuse", description="Multimodal fMRI + DICOM-metadata transformer.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a planted-signal synthetic dataset")
    p.add_argument("--config", help="synth config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--domains", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--out", help="override the output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the composite loss")
    p.add_argument("--seed", type=int)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect-meta", help="parse a DICOM or JSON metadata file")
    p.add_argument("path")
    p.add_argument("--schema")
    p.set_defaults(func=cmd_inspect_meta)

    p = sub.add_parser("export-attention", help="write attention maps for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_export_attention)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"fmrifuse: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"fmrifuse: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FuseError, OSError) as exc:
        print(f"fmrifuse: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
