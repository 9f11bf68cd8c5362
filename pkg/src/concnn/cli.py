"""Command-line surface: synth, preprocess, train, classify, crossval.

Every run resolves one RunConfig (flags override an optional key=value
config file override built-in defaults) and echoes it into the output
directory, so any run can be reproduced from its own artifacts. Exit
codes: 0 success, 1 validation failure, 2 runtime failure.
"""

from __future__ import annotations

import os

# Pin BLAS to one thread before numpy loads, or reductions could change
# summation order with the machine's core count and break byte-for-byte
# reproducibility of reports across hosts and --threads settings.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataset import (
    CLASS_NAMES,
    ImagePair,
    SectionRecord,
    SynthConfig,
    generate_synthetic,
    ingest_manifest,
    write_manifest,
)
from .ensemble import (
    VOTE_CONCAT,
    VOTE_MODES,
    BranchWeights,
    fuse_section,
    statistical_revision,
    write_prediction_report,
)
from .evaluation import (
    SPLIT_MODES,
    SPLIT_SECTION,
    CrossvalConfig,
    build_patch_cache,
    run_crossval,
    train_three_branches,
    write_report_files,
)
from .model import (
    BRANCH_ROLES,
    BranchConfig,
    BranchModel,
    TrainConfig,
    batch_forward,
    load_model,
    save_model,
)
from .patching import aligned_triples
from .preprocess import load_raster, preprocess_pair, save_raster

RESOLVED_CONFIG_NAME = "resolved_config.txt"


# ---------------------------------------------------------------------------
# Run configuration: defaults < config file < flags.
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Every tunable setting of every command, fully resolved.

    Paths (manifest, output, model directory) stay on the command line;
    keeping them out of the echoed config makes output directories
    byte-comparable and the echo reusable as a --config file anywhere.
    """

    seed: int = 0
    threads: int = 1
    patch_size: int = 224
    padding: int = 1
    widths: tuple[int, ...] = (16, 32, 64, 128, 128)
    fc_widths: tuple[int, ...] = (256, 128)
    num_classes: int = 13
    learning_rate: float = 0.01
    batch_size: int = 32
    iterations: int = 20000
    momentum: float = 0.0
    weights: tuple[float, float, float] = (0.4, 0.4, 0.2)
    folds: int = 5
    split: str = SPLIT_SECTION
    vote: str = VOTE_CONCAT
    sections_per_class: int = 3
    image_size: int = 448
    noise_sigma: float = 2.0
    angles: tuple[int, ...] = (0,)

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        if self.threads < 1:
            raise ValueError(f"threads must be positive, got {self.threads}")
        if self.padding not in (0, 1):
            raise ValueError(f"padding must be 0 or 1, got {self.padding}")
        if self.split not in SPLIT_MODES:
            raise ValueError(f"split must be one of {SPLIT_MODES}, got {self.split!r}")
        if self.vote not in VOTE_MODES:
            raise ValueError(f"vote must be one of {VOTE_MODES}, got {self.vote!r}")
        if len(self.weights) != 3:
            raise ValueError("weights needs exactly three values: ppl,xpl,ci")

    def branch_config(self) -> BranchConfig:
        return BranchConfig(
            patch_size=self.patch_size,
            channel_widths=self.widths,
            fc_widths=self.fc_widths,
            num_classes=self.num_classes,
            conv_padding=self.padding,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            self.learning_rate, self.batch_size, self.iterations, self.seed, self.momentum
        )

    def branch_weights(self) -> BranchWeights:
        return BranchWeights(*self.weights)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            num_classes=self.num_classes,
            sections_per_class=self.sections_per_class,
            image_size=self.image_size,
            angles=self.angles,
            noise_sigma=self.noise_sigma,
            seed=self.seed,
        )


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(","))


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.split(","))


_FIELD_PARSERS = {
    "seed": int,
    "threads": int,
    "patch_size": int,
    "padding": int,
    "widths": _parse_ints,
    "fc_widths": _parse_ints,
    "num_classes": int,
    "learning_rate": float,
    "batch_size": int,
    "iterations": int,
    "momentum": float,
    "weights": _parse_floats,
    "folds": int,
    "split": str,
    "vote": str,
    "sections_per_class": int,
    "image_size": int,
    "noise_sigma": float,
    "angles": _parse_ints,
}


def load_config_file(path: str | Path) -> dict[str, str]:
    """key=value lines; blank lines and # comments are skipped."""
    path = Path(path)
    values: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _FIELD_PARSERS:
            raise ValueError(f"{path}:{lineno}: unknown setting {key!r}")
        values[key] = value.strip()
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, the optional config file, then command-line flags."""
    values: dict[str, object] = {}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for name in _FIELD_PARSERS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    resolved = {}
    for name, parse in _FIELD_PARSERS.items():
        if name in values:
            value = values[name]
            resolved[name] = parse(value) if isinstance(value, str) else value
    return RunConfig(**resolved)


def _format_setting(value: object) -> str:
    if isinstance(value, tuple):
        return ",".join(_format_setting(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_resolved_config(config: RunConfig, out_dir: Path) -> None:
    """Echo the resolved settings; the file is itself valid --config input.

    ``threads`` is omitted for the same reason paths are: it may not
    influence output bytes, so the echo lists exactly the settings that
    determine results and stays byte-comparable across thread counts.
    """
    settings = {name: value for name, value in asdict(config).items() if name != "threads"}
    lines = [f"{name}={_format_setting(value)}" for name, value in sorted(settings.items())]
    (out_dir / RESOLVED_CONFIG_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Commands.
# ---------------------------------------------------------------------------


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out = _out_dir(args)
    records = generate_synthetic(config.synth_config(), out, threads=config.threads)
    write_manifest(records, out / "manifest.txt")
    write_resolved_config(config, out)
    images = sum(len(r.images) for r in records)
    print(f"wrote {len(records)} sections ({2 * images} rasters) to {out}")
    return 0


def _preprocess_section(record: SectionRecord, out: Path) -> SectionRecord:
    pairs = []
    for pair in record.images:
        ppl = load_raster(pair.ppl_path)
        xpl = load_raster(pair.xpl_path)
        ci = load_raster(pair.ci_path) if pair.ci_path is not None else None
        ppl, xpl, ci = preprocess_pair(ppl, xpl, ci)
        stem = f"{record.section_id}_a{pair.angle:03d}"
        paths = {}
        for name, raster in (("ppl", ppl), ("xpl", xpl), ("ci", ci)):
            path = out / f"{stem}_{name}.ppm"
            save_raster(raster, path)
            paths[name] = path
        pairs.append(ImagePair(pair.angle, paths["ppl"], paths["xpl"], paths["ci"]))
    return SectionRecord(record.section_id, record.rock_type, pairs)


def cmd_preprocess(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    records = ingest_manifest(args.manifest)
    if not records:
        raise ValueError("manifest lists no sections")
    out = _out_dir(args)

    def task(record: SectionRecord) -> tuple[SectionRecord | None, str | None]:
        try:
            return _preprocess_section(record, out), None
        except Exception as exc:  # one diagnostic per failed section
            return None, f"{record.section_id}: {exc}"

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            outcomes = list(pool.map(task, records))
    else:
        outcomes = [task(record) for record in records]

    processed = [record for record, _ in outcomes if record is not None]
    failures = [message for _, message in outcomes if message is not None]
    write_manifest(processed, out / "manifest.txt")
    write_resolved_config(config, out)
    print(f"processed {len(processed)} of {len(records)} sections into {out}")
    for message in failures:
        print(f"error: {message}", file=sys.stderr)
    return 1 if failures else 0


def _validate_labels(records: list[SectionRecord], num_classes: int) -> None:
    for record in records:
        if record.label >= num_classes:
            raise ValueError(
                f"section {record.section_id!r} has class index {record.label}, "
                f"but the config allows {num_classes} classes"
            )


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    records = ingest_manifest(args.manifest)
    if not records:
        raise ValueError("manifest lists no sections")
    branch_cfg = config.branch_config()
    _validate_labels(records, branch_cfg.num_classes)
    out = _out_dir(args)
    cache = build_patch_cache(records, branch_cfg.patch_size)
    models, logs = train_three_branches(
        records, cache, branch_cfg, config.train_config(), (config.seed,)
    )
    for role in BRANCH_ROLES:
        (out / f"model_{role}.bin").write_bytes(save_model(models[role]))
    log_lines = ["branch,iteration,loss"]
    for role in BRANCH_ROLES:
        log_lines.extend(
            f"{role},{i},{loss:.9f}" for i, loss in enumerate(logs[role].losses)
        )
    (out / "training_log.txt").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    write_resolved_config(config, out)
    summary = " ".join(f"{role}={logs[role].losses[-1]:.4f}" for role in BRANCH_ROLES)
    print(f"trained 3 branches on {len(records)} sections; final loss {summary}")
    return 0


def _load_models(models_dir: Path) -> dict[str, BranchModel]:
    models = {}
    for role in BRANCH_ROLES:
        path = models_dir / f"model_{role}.bin"
        if not path.is_file():
            raise ValueError(f"missing model file {path.name} in {models_dir}")
        model = load_model(path.read_bytes())
        if model.role != role:
            raise ValueError(f"{path.name} holds a {model.role!r} branch, expected {role!r}")
        models[role] = model
    configs = {models[role].config for role in BRANCH_ROLES}
    if len(configs) != 1:
        raise ValueError("the three model files disagree on architecture")
    return models


def cmd_classify(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    models = _load_models(Path(args.models))
    branch_cfg = models["ppl"].config
    weights = config.branch_weights()
    if args.manifest:
        records = ingest_manifest(args.manifest)
        if not records:
            raise ValueError("manifest lists no sections")
        sections = [(record.section_id, record.images) for record in records]
    else:
        pair = ImagePair(
            0, Path(args.ppl), Path(args.xpl), Path(args.ci) if args.ci else None
        )
        sections = [(Path(args.ppl).stem, [pair])]
    out = _out_dir(args)

    names = CLASS_NAMES[: branch_cfg.num_classes]
    predictions = []
    verdicts = []
    for section_id, pairs in sections:
        votes: list[int] = []
        for pair in pairs:
            try:
                ppl = load_raster(pair.ppl_path)
                xpl = load_raster(pair.xpl_path)
                ci = load_raster(pair.ci_path) if pair.ci_path is not None else None
                ppl, xpl, ci = preprocess_pair(ppl, xpl, ci)
                grids = aligned_triples(ppl, xpl, ci, branch_cfg.patch_size)
            except (ValueError, OSError) as exc:
                raise ValueError(f"section {section_id}: {exc}") from exc
            probs = {
                role: batch_forward(
                    models[role], grid.patches.transpose(0, 3, 1, 2).astype(np.float32)
                )
                for role, grid in zip(BRANCH_ROLES, grids)
            }
            prediction = fuse_section(
                section_id,
                grids[0].rows,
                grids[0].cols,
                probs["ppl"],
                probs["xpl"],
                probs["ci"],
                weights,
                vote=config.vote,
            )
            predictions.append(prediction)
            votes.extend(prediction.votes)
        verdict, _ = statistical_revision(votes)
        verdicts.append((section_id, verdict))

    write_prediction_report(predictions, out / "predictions.csv", names)
    verdict_lines = [f"{section_id},{names[verdict]}" for section_id, verdict in verdicts]
    (out / "verdicts.txt").write_text("\n".join(verdict_lines) + "\n", encoding="utf-8")
    write_resolved_config(config, out)
    for section_id, verdict in verdicts:
        print(f"{section_id}: {names[verdict]}")
    return 0


def cmd_crossval(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    records = ingest_manifest(args.manifest)
    if not records:
        raise ValueError("manifest lists no sections")
    crossval_cfg = CrossvalConfig(
        branch=config.branch_config(),
        train=config.train_config(),
        weights=config.branch_weights(),
        folds=config.folds,
        seed=config.seed,
        split=config.split,
        vote=config.vote,
        threads=config.threads,
    )
    report = run_crossval(records, crossval_cfg)
    out = _out_dir(args)
    write_report_files(report, out)
    write_resolved_config(config, out)
    print(
        f"{config.folds}-fold cross-validation over {len(records)} sections: "
        f"section accuracy {report.section_accuracy:.4f}, "
        f"kappa {report.section_kappa:.4f}"
    )
    return 0


# ---------------------------------------------------------------------------
# Argument parsing and entry point.
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit code 2 on usage errors; we reserve 2 for
    runtime failures, so usage problems exit 1 like other validation."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(1, f"error: {message}\n")


def _add_settings(parser: argparse.ArgumentParser, *names: str) -> None:
    specs = {
        "config": dict(help="key=value settings file; flags override it"),
        "seed": dict(type=int, help="root seed for all randomness"),
        "threads": dict(type=int, help="worker cap; 1 matches any N byte for byte"),
        "patch-size": dict(type=int, help="square patch edge in pixels"),
        "padding": dict(type=int, choices=(0, 1), help="conv border padding"),
        "weights": dict(help="branch weights as ppl,xpl,ci"),
        "folds": dict(type=int, help="number of cross-validation folds"),
        "split": dict(choices=SPLIT_MODES, help="fold granularity"),
        "vote": dict(choices=VOTE_MODES, help="revision vote population"),
    }
    for name in names:
        parser.add_argument(f"--{name}", default=None, **specs[name])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="concnn", description="thin-section rock classification pipeline")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    synth = sub.add_parser("synth", help="render a labeled synthetic corpus")
    synth.add_argument("--out", required=True, help="corpus output directory")
    _add_settings(synth, "config", "seed", "threads")
    synth.set_defaults(func=cmd_synth)

    preprocess = sub.add_parser("preprocess", help="equalize, fuse and store rasters")
    preprocess.add_argument("--manifest", required=True)
    preprocess.add_argument("--out", required=True)
    _add_settings(preprocess, "config", "seed", "threads")
    preprocess.set_defaults(func=cmd_preprocess)

    train = sub.add_parser("train", help="train the three branches on a corpus")
    train.add_argument("--manifest", required=True)
    train.add_argument("--out", required=True, help="model output directory")
    _add_settings(train, "config", "seed", "threads", "patch-size", "padding")
    train.set_defaults(func=cmd_train)

    classify = sub.add_parser("classify", help="classify sections with trained models")
    classify.add_argument("--models", required=True, help="directory holding model_*.bin")
    classify.add_argument("--manifest", help="sections to classify")
    classify.add_argument("--ppl", help="single PPL raster (with --xpl)")
    classify.add_argument("--xpl", help="single XPL raster (with --ppl)")
    classify.add_argument("--ci", help="optional precomputed comprehensive image")
    classify.add_argument("--out", required=True)
    _add_settings(classify, "config", "seed", "threads", "weights", "vote")
    classify.set_defaults(func=cmd_classify)

    crossval = sub.add_parser("crossval", help="k-fold evaluation with reports")
    crossval.add_argument("--manifest", required=True)
    crossval.add_argument("--out", required=True)
    _add_settings(
        crossval,
        "config",
        "seed",
        "threads",
        "patch-size",
        "padding",
        "weights",
        "folds",
        "split",
        "vote",
    )
    crossval.set_defaults(func=cmd_crossval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "classify":
        if bool(args.manifest) == bool(args.ppl or args.xpl):
            parser.error("classify needs either --manifest or a --ppl/--xpl pair")
        if not args.manifest and not (args.ppl and args.xpl):
            parser.error("--ppl and --xpl must be given together")
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything unexpected is a runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
