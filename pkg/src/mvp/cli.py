"""Command-line entry point: ``mvp {gen-data,train,ablate,report}``.

Exit codes: 0 success, 1 environment or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .audio import AugmentConfig
from .backbone import BackboneConfig
from .evalharness import load_manifest, reports_from_csv, reports_to_csv, render_table, run_experiment
from .fusion import TEFusionConfig
from .model import STRATEGY_NAMES, StrategySpec
from .optim import TrainConfig
from .synthgen import GenConfig, gen_dataset

OUTPUT_ROOT_ENV = "MVP_OUTPUT_ROOT"
FUSION_SWEEP = ("iff-concat", "iff-ap", "iff-te", "iff-gating", "iff-film")
LAYER_SWEEP = "4,5,6,7,last,weighted"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise UsageError(f"{where}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise UsageError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise UsageError(f"{where}: {e}") from None


@dataclass
class ExperimentConfig:
    """Every tunable of a run; defaults are the full-scale training recipe."""

    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    te: TEFusionConfig = field(default_factory=TEFusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    folds: int = 10
    seed: int = 0
    frozen: bool = False
    vowel_seed: int = 101
    sentence_seed: int = 202
    wc_order: str = "sentence-vowel"
    seconds: float = 5.0

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        nested = {"backbone": BackboneConfig, "te": TEFusionConfig, "train": TrainConfig, "augment": AugmentConfig}
        data = dict(data)
        for key, sub in nested.items():
            if key in data:
                data[key] = _build(sub, data[key], key)
        return _build(cls, data, "config")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except OSError as e:
            raise DataError(f"cannot read config {path}: {e}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"config {path} is not valid JSON: {e}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def spec(self, strategy: str) -> StrategySpec:
        return StrategySpec.from_name(
            strategy,
            frozen=self.frozen,
            backbone=self.backbone,
            te=self.te,
            vowel_seed=self.vowel_seed,
            sentence_seed=self.sentence_seed,
            wc_order=self.wc_order,
            seconds=self.seconds,
        )


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    backbone = cfg.backbone
    if getattr(args, "layer", None) is not None:
        backbone = dataclasses.replace(backbone, extraction=args.layer)
    overrides = {"backbone": backbone}
    if args.frozen:
        overrides["frozen"] = True
    if args.folds is not None:
        if args.folds < 2:
            raise UsageError(f"--folds must be at least 2, got {args.folds}")
        overrides["folds"] = args.folds
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        return dataclasses.replace(cfg, **overrides)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _run_dir(kind: str, cfg: ExperimentConfig, manifest_hash: str, out: str | None) -> Path:
    tag = hashlib.sha256(json.dumps([cfg.to_dict(), manifest_hash], sort_keys=True).encode()).hexdigest()[:8]
    root = Path(out) if out else output_root()
    return root / f"{kind}-seed{cfg.seed}-{tag}"


def _load_records(path):
    if not Path(path).is_file():
        raise DataError(f"manifest not found: {path}")
    try:
        records = load_manifest(path)
    except ValueError as e:
        raise DataError(str(e)) from None
    missing = [p for r in records for p in (r.vowel_path, r.sentence_path) if not Path(p).is_file()]
    if missing:
        raise DataError(f"{len(missing)} audio files listed in {path} are missing, e.g. {missing[0]}")
    return records


def _write_run_header(run_dir: Path, cfg: ExperimentConfig, manifest: str, extra: dict) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    meta = {"manifest": str(Path(manifest).resolve()), "manifest_sha256": file_sha256(manifest), "seed": cfg.seed, **extra}
    (run_dir / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(args) -> int:
    if not 0.0 <= args.patho_ratio <= 1.0:
        raise UsageError(f"--patho-ratio must lie in [0, 1], got {args.patho_ratio}")
    if args.subjects < 1:
        raise UsageError(f"--subjects must be positive, got {args.subjects}")
    share = dict(vowel_cue_share=0.5, both_share=0.0) if args.complementary else dict(vowel_cue_share=0.0, both_share=1.0)
    cfg = GenConfig(n_subjects=args.subjects, patho_fraction=args.patho_ratio, seed=args.seed, **share)
    try:
        manifest = gen_dataset(cfg, args.out)
    except OSError as e:
        raise DataError(f"cannot write dataset to {args.out}: {e}") from None
    print(manifest)
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    records = _load_records(args.manifest)
    spec = cfg.spec(args.strategy)
    run_dir = _run_dir(args.strategy, cfg, file_sha256(args.manifest), args.out)
    _write_run_header(run_dir, cfg, args.manifest, {"strategy": args.strategy})
    print(f"# {args.strategy}: config {json.dumps(cfg.to_dict(), sort_keys=True)}", file=sys.stderr)
    reports = run_experiment(records, [spec], cfg.train, cfg.augment, cfg.folds, cfg.seed, run_dir, args.jobs)
    sys.stdout.write(render_table(reports_from_csv(reports_to_csv(reports))))
    print(f"run directory: {run_dir}")
    return 0 if all(r.status == "ok" for r in reports) else 1


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    records = _load_records(args.manifest)
    if args.axis == "fusion":
        specs = [cfg.spec(s) for s in FUSION_SWEEP]
        labels = list(FUSION_SWEEP)
    else:
        specs, labels = [], []
        for layer in args.layers.split(","):
            try:
                bb = dataclasses.replace(cfg.backbone, extraction=layer.strip())
            except ValueError as e:
                raise UsageError(f"--layers: {e}") from None
            specs.append(dataclasses.replace(cfg, backbone=bb).spec(args.strategy))
            labels.append(f"{args.strategy}@{layer.strip()}")
    run_dir = _run_dir(f"ablate-{args.axis}", cfg, file_sha256(args.manifest), args.out)
    _write_run_header(run_dir, cfg, args.manifest, {"axis": args.axis, "rows": labels})
    reports = run_experiment(
        records, specs, cfg.train, cfg.augment, cfg.folds, cfg.seed, run_dir, args.jobs, labels=labels
    )
    sys.stdout.write(render_table(reports_from_csv(reports_to_csv(reports))))
    print(f"run directory: {run_dir}")
    return 0 if all(r.status == "ok" for r in reports) else 1


def cmd_report(args) -> int:
    root = Path(args.runs)
    files = sorted(root.rglob("report.csv")) if root.is_dir() else []
    if not files:
        raise DataError(f"no report.csv found under {root}")
    rows = []
    for f in files:
        rows.extend(reports_from_csv(f.read_text()))
    if args.format == "csv":
        from .evalharness import CSV_FIELDS
        import csv
        import io

        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        sys.stdout.write(buf.getvalue())
    else:
        sys.stdout.write(render_table(rows))
    return 0


def _layer(value: str):
    if value in ("last", "weighted"):
        return value
    try:
        return int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"layer must be an integer, 'last' or 'weighted', got {value!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvp", description="Multi-source voice pathology experiments")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic paired vowel/sentence dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--subjects", type=int, default=200)
    g.add_argument("--patho-ratio", type=float, default=0.5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument(
        "--complementary",
        action="store_true",
        help="split patients between vowel-only and sentence-only cues (otherwise every patient shows both)",
    )
    g.set_defaults(func=cmd_gen_data)

    def common(sp):
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--frozen", action="store_true")
        sp.add_argument("--layer", type=_layer, default=None)
        sp.add_argument("--folds", type=int, default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--config", default=None, help="JSON ExperimentConfig; unknown keys are rejected")
        sp.add_argument("--jobs", type=int, default=1, help="parallel folds (1 keeps runs bit-reproducible)")
        sp.add_argument("--out", default=None, help=f"output root (default ${OUTPUT_ROOT_ENV} or ./runs)")

    t = sub.add_parser("train", help="cross-validate one strategy")
    common(t)
    t.add_argument("--strategy", required=True, choices=STRATEGY_NAMES)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="fusion-method or layer-depth sweep")
    common(a)
    a.add_argument("--axis", required=True, choices=("fusion", "layer"))
    a.add_argument("--layers", default=LAYER_SWEEP)
    a.add_argument("--strategy", default="iff-te", choices=STRATEGY_NAMES, help="strategy for the layer sweep")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="merge MetricsReports into one table")
    r.add_argument("--runs", required=True)
    r.add_argument("--format", choices=("csv", "text"), default="text")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
