"""Command-line driver: generate data, train the teacher, fit heads, distill,
analyze and ablate, all from one INI-style config file.

Every run directory receives ``config.ini``, the resolved configuration
including command-line overrides. Exit codes: 0 success, 1 unexpected
failure, 2 usage, 3 missing or unreadable file, 4 contract violation,
5 integrity failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from dih import analysis, datagen
from dih.cohort import attach_heads, fit_heads, load_cohort, save_cohort, submodel_param_counts
from dih.errors import (ArtifactError, ArtifactNotFoundError, ContractError, DihError, DimensionError,
                        IntegrityError)
from dih.netarch import Network, build_network, forward, load_network, network_to_bytes, param_count, save_network
from dih.optim import MODES, TrainConfig
from dih.trainer import train

log = logging.getLogger("dih")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_FILE, EXIT_CONTRACT, EXIT_INTEGRITY = 0, 1, 2, 3, 4, 5
PHASES = ("teacher", "heads", "student")


class UsageError(DihError):
    """The configuration or the command line is invalid."""


# -- configuration ------------------------------------------------------------------


@dataclass
class DataSpec:
    generator: str
    classes: int
    per_class: int
    seed: int
    noise: float = 0.05
    turns: float = 1.0
    dim: int = 2
    spread: float = 4.0

    def generate(self) -> tuple[datagen.Dataset, datagen.Dataset]:
        if self.generator == "spirals":
            return datagen.make_spirals(self.classes, self.per_class, self.noise, self.seed, turns=self.turns)
        return datagen.make_blobs(self.classes, self.per_class, self.dim, self.spread, self.seed)

    @property
    def input_dim(self) -> int:
        return 2 if self.generator == "spirals" else self.dim


@dataclass
class ArchSpec:
    widths: list[int]
    activation: str = "relu"
    init_seed: int = 0
    mounts: list[int] = field(default_factory=list)
    head_activation: str = "relu"
    head_seed: int = 0

    def build(self, input_dim: int, num_classes: int, seed_offset: int = 0) -> Network:
        return build_network(input_dim, self.widths, num_classes, self.mounts, self.activation,
                             seed=self.init_seed + seed_offset)


@dataclass
class ExperimentConfig:
    data: DataSpec
    teacher: ArchSpec
    student: ArchSpec
    train: dict[str, TrainConfig]
    seeds: list[int]
    out_dir: Path
    masks: list[str] = field(default_factory=list)
    raw: configparser.ConfigParser | None = None

    def path(self, *parts: str) -> Path:
        return self.out_dir.joinpath(*parts)


def _ints(text: str) -> list[int]:
    return [int(tok) for tok in text.replace(",", " ").split()]


def _get(parser: configparser.ConfigParser, section: str, key: str, convert, default=None):
    if not parser.has_option(section, key):
        if default is None:
            raise UsageError(f"config is missing [{section}] {key}")
        return default
    raw = parser.get(section, key)
    try:
        return convert(raw)
    except ValueError as exc:
        raise UsageError(f"bad value for [{section}] {key}: {raw!r}") from exc


def _train_config(parser: configparser.ConfigParser, phase: str) -> TrainConfig:
    section = f"train.{phase}"
    if not parser.has_section(section):
        raise UsageError(f"config is missing section [{section}]")
    known = TrainConfig.field_names()
    kwargs = {}
    for key, raw in parser.items(section):
        if key not in known:
            raise UsageError(f"unknown key [{section}] {key}")
        default = getattr(TrainConfig, key)
        try:
            kwargs[key] = raw.strip().upper() if key == "mode" else type(default)(raw)
        except ValueError as exc:
            raise UsageError(f"bad value for [{section}] {key}: {raw!r}") from exc
    try:
        return TrainConfig(**kwargs)
    except ContractError as exc:
        raise UsageError(f"[{section}]: {exc}") from exc


def _arch(parser: configparser.ConfigParser, section: str, num_classes: int) -> ArchSpec:
    if not parser.has_section(section):
        raise UsageError(f"config is missing section [{section}]")
    declared = _get(parser, section, "classes", int, num_classes)
    if declared != num_classes:
        raise UsageError(f"[{section}] classes={declared} disagrees with [data] classes={num_classes}")
    spec = ArchSpec(
        widths=_get(parser, section, "widths", _ints),
        activation=_get(parser, section, "activation", str, "relu"),
        init_seed=_get(parser, section, "init_seed", int, 0),
        mounts=_get(parser, section, "mounts", _ints, []) if parser.get(section, "mounts", fallback="").strip() else [],
        head_activation=_get(parser, section, "head_activation", str, "relu"),
        head_seed=_get(parser, section, "head_seed", int, 0),
    )
    if not spec.widths or min(spec.widths) < 1:
        raise UsageError(f"[{section}] widths must be a non-empty list of positive integers")
    for name in ("activation", "head_activation"):
        if getattr(spec, name) not in ("relu", "identity"):
            raise UsageError(f"[{section}] {name} must be relu or identity")
    if spec.mounts != sorted(set(spec.mounts)) or any(m < 0 or m >= len(spec.widths) for m in spec.mounts):
        raise UsageError(f"[{section}] mounts must be unique sorted block indices below {len(spec.widths)}")
    return spec


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Parse and validate a config file, applying command-line overrides."""
    path = Path(path)
    if not path.is_file():
        raise ArtifactNotFoundError(f"no such config file: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.read(path)
    for (section, key), value in (overrides or {}).items():
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, value)

    if not parser.has_section("data"):
        raise UsageError("config is missing section [data]")
    generator = _get(parser, "data", "generator", str)
    if generator not in ("spirals", "blobs"):
        raise UsageError(f"[data] generator must be spirals or blobs, got {generator!r}")
    data = DataSpec(
        generator=generator,
        classes=_get(parser, "data", "classes", int),
        per_class=_get(parser, "data", "per_class", int),
        seed=_get(parser, "data", "seed", int, 0),
        noise=_get(parser, "data", "noise", float, 0.05),
        turns=_get(parser, "data", "turns", float, 1.0),
        dim=_get(parser, "data", "dim", int, 2),
        spread=_get(parser, "data", "spread", float, 4.0),
    )
    if data.classes < 2 or data.per_class < 2:
        raise UsageError("[data] classes and per_class must both be at least 2")

    teacher = _arch(parser, "teacher", data.classes)
    student = _arch(parser, "student", data.classes)
    trains = {phase: _train_config(parser, phase) for phase in PHASES}
    seeds = _get(parser, "experiment", "seeds", _ints, [0]) if parser.has_section("experiment") else [0]
    if not seeds:
        raise UsageError("[experiment] seeds must list at least one seed")
    out_dir = Path(parser.get("experiment", "out_dir", fallback="runs/default"))
    masks = [m.strip() for m in parser.get("ablate", "masks", fallback="").split(",") if m.strip()]
    return ExperimentConfig(data, teacher, student, trains, seeds, out_dir, masks, parser)


def freeze_config(cfg: ExperimentConfig, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "config.ini", "w") as fh:
        cfg.raw.write(fh)


# -- helpers -------------------------------------------------------------------------


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _require(path: Path, phase: str) -> Path:
    if not path.is_file():
        raise ArtifactNotFoundError(f"missing {path}; run '{phase}' first")
    return path


def _load_data(cfg: ExperimentConfig) -> tuple[datagen.Dataset, datagen.Dataset]:
    train_set = datagen.load_dataset(_require(cfg.path("data", "train.dsb"), "gen-data"))
    test_set = datagen.load_dataset(_require(cfg.path("data", "test.dsb"), "gen-data"))
    return train_set, test_set


def _teacher_path(cfg: ExperimentConfig) -> Path:
    return cfg.path("teacher", "teacher.ckpt")


def _cohort_path(cfg: ExperimentConfig) -> Path:
    return cfg.path("cohort", "cohort.ckpt")


# -- commands ----------------------------------------------------------------------------


def cmd_gen_data(cfg: ExperimentConfig) -> Path:
    out = cfg.path("data")
    out.mkdir(parents=True, exist_ok=True)
    train_set, test_set = cfg.data.generate()
    for ds in (train_set, test_set):
        datagen.save_dataset(ds, out / f"{ds.split}.dsb")
        datagen.export_csv(ds, out / f"{ds.split}.csv")
    manifest = {
        "generator": cfg.data.generator,
        "params": {k: v for k, v in vars(cfg.data).items() if k != "generator"},
        "seed": cfg.data.seed,
        "files": {f"{s}.dsb": _sha256_file(out / f"{s}.dsb") for s in ("train", "test")},
        "sizes": {"train": len(train_set), "test": len(test_set)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    freeze_config(cfg, out)
    log.info("wrote %d train / %d test samples to %s", len(train_set), len(test_set), out)
    return out


def cmd_train_teacher(cfg: ExperimentConfig) -> Path:
    train_set, test_set = _load_data(cfg)
    teacher = cfg.teacher.build(train_set.dim, train_set.num_classes)
    teacher, metrics = train(teacher, None, train_set, cfg.train["teacher"].with_(mode="CE"), test_set)
    out = cfg.path("teacher")
    out.mkdir(parents=True, exist_ok=True)
    save_network(teacher, out / "teacher.ckpt")
    metrics.write_csv(out / "metrics.csv")
    freeze_config(cfg, out)
    log.info("teacher: train %.2f%% test %.2f%% (%.1fs)", metrics.final_train_acc, metrics.final_test_acc,
             metrics.wall_time)
    return out / "teacher.ckpt"


def cmd_fit_heads(cfg: ExperimentConfig) -> Path:
    train_set, _ = _load_data(cfg)
    teacher_file = _require(_teacher_path(cfg), "train-teacher")
    digest_before = _sha256_file(teacher_file)
    teacher = load_network(teacher_file)
    if not teacher.mount_positions:
        raise ContractError("teacher has no mount positions; set [teacher] mounts")
    cohort = attach_heads(teacher, cfg.teacher.head_activation, cfg.teacher.head_seed)
    cohort, metrics = fit_heads(cohort, train_set, cfg.train["heads"])

    out = cfg.path("cohort")
    out.mkdir(parents=True, exist_ok=True)
    save_cohort(cohort, out / "cohort.ckpt", teacher_path=teacher_file)
    metrics.write_csv(out / "metrics.csv", cohort.k)
    freeze_config(cfg, out)

    digest_after = _sha256_file(teacher_file)
    in_memory = hashlib.sha256(network_to_bytes(cohort.teacher)).hexdigest()
    if not digest_before == digest_after == in_memory:
        raise IntegrityError("teacher backbone changed while fitting heads")
    print(f"backbone integrity: OK sha256={digest_after}")
    log.info("heads: final train accuracy %s", [round(a, 2) for a in metrics.epochs[-1].head_train_acc]
             if metrics.epochs else "n/a (0 epochs)")
    return out / "cohort.ckpt"


def _teacher_for_mode(cfg: ExperimentConfig, mode: str):
    if mode == "CE":
        return None
    if mode == "KD":
        return load_network(_require(_teacher_path(cfg), "train-teacher"))
    return load_cohort(_require(_cohort_path(cfg), "fit-heads"))


def cmd_distill(cfg: ExperimentConfig, mode: str | None = None) -> Path:
    base = cfg.train["student"]
    mode = (mode or base.mode).upper()
    if mode not in MODES:
        raise UsageError(f"--mode must be one of {MODES}")
    train_set, test_set = _load_data(cfg)
    source = _teacher_for_mode(cfg, mode)
    out = cfg.path("distill", mode)
    finals = []
    for seed in cfg.seeds:
        student = cfg.student.build(train_set.dim, train_set.num_classes, seed_offset=seed)
        trained, metrics = train(student, source, train_set, base.with_(mode=mode, seed=seed), test_set)
        run_dir = out / f"seed_{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        save_network(trained, run_dir / "student.ckpt")
        metrics.write_csv(run_dir / "metrics.csv")
        freeze_config(cfg, run_dir)
        finals.append(metrics.final_test_acc)
        log.info("%s seed %d: test %.2f%%", mode, seed, metrics.final_test_acc)
    write_summary(out / "summary.csv", cfg.seeds, finals)
    return out


def write_summary(path: Path, seeds: Sequence[int], finals: Sequence[float]) -> None:
    arr = np.array(finals, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "final_test_acc"])
        for seed, acc in zip(seeds, finals):
            writer.writerow([seed, repr(float(acc))])
        writer.writerow(["mean", repr(float(arr.mean()))])
        writer.writerow(["min", repr(float(arr.min()))])
        writer.writerow(["max", repr(float(arr.max()))])
        writer.writerow(["range", repr(float(arr.max() - arr.min()))])


def cmd_analyze(cfg: ExperimentConfig) -> Path:
    train_set, _ = _load_data(cfg)
    cohort = load_cohort(_require(_cohort_path(cfg), "fit-heads"))
    out = cfg.path("analysis")
    out.mkdir(parents=True, exist_ok=True)
    tau = cfg.train["student"].tau
    analysis.head_stats(cohort, train_set, tau).write_csv(out / "head_stats.csv")
    analysis.venn_counts(cohort, train_set).write_csv(out / "venn.csv")

    student = cfg.student.build(train_set.dim, train_set.num_classes)
    with open(out / "params.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "parameters"])
        writer.writerow(["teacher", param_count(cohort.teacher).total])
        writer.writerow(["student", param_count(student).total])
        for name, count in zip(cohort.member_names(), submodel_param_counts(cohort)):
            writer.writerow([f"submodel_{name}", count])
        for name, head in zip(cohort.member_names(), cohort.heads):
            writer.writerow([f"head_{name}", head.weight.size + head.bias.size])
        writer.writerow(["capacity_ratio", repr(analysis.capacity_ratio(cohort.teacher, student))])
    freeze_config(cfg, out)
    return out


def cmd_ablate(cfg: ExperimentConfig) -> Path:
    train_set, test_set = _load_data(cfg)
    cohort = load_cohort(_require(_cohort_path(cfg), "fit-heads"))
    if cfg.masks:
        masks = [analysis.parse_mask(m, cohort.size) for m in cfg.masks]
    elif cohort.size > analysis.MAX_FULL_GRID_MEMBERS:
        raise UsageError(f"a full grid over {cohort.size} members has {2 ** cohort.size} rows; pass --masks")
    else:
        masks = analysis.all_masks(cohort.size)
    seed = cfg.seeds[0]
    student = cfg.student.build(train_set.dim, train_set.num_classes, seed_offset=seed)
    rows = analysis.ablation_run(cohort, student, train_set, cfg.train["student"].with_(seed=seed), masks, test_set)
    out = cfg.path("ablation")
    out.mkdir(parents=True, exist_ok=True)
    analysis.write_ablation_csv(rows, cohort.member_names(), out / "ablation.csv")
    freeze_config(cfg, out)
    return out / "ablation.csv"


def cmd_pipeline(cfg: ExperimentConfig, modes: Sequence[str]) -> None:
    cmd_gen_data(cfg)
    cmd_train_teacher(cfg)
    cmd_fit_heads(cfg)
    for mode in modes:
        cmd_distill(cfg, mode)
    cmd_analyze(cfg)


# -- entry point -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True)
    common.add_argument("--out-dir")
    common.add_argument("--seed-list", help="comma-separated seeds, overrides [experiment] seeds")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="dih", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train-teacher", "fit-heads", "distill", "analyze", "ablate", "pipeline"):
        p = sub.add_parser(name, parents=[common])
        if name in ("distill", "pipeline"):
            p.add_argument("--mode", help="CE, KD, DIH or ENSEMBLE (pipeline accepts a comma list)")
        if name == "ablate":
            p.add_argument("--masks", help="comma-separated 0/1 masks, heads in depth order then Main")
    return parser


def _overrides(args) -> dict:
    ov = {}
    if args.out_dir:
        ov[("experiment", "out_dir")] = args.out_dir
    if args.seed_list:
        ov[("experiment", "seeds")] = args.seed_list
    if getattr(args, "mode", None) and args.command == "distill":
        ov[("train.student", "mode")] = args.mode.upper()
    if getattr(args, "masks", None):
        ov[("ablate", "masks")] = args.masks
    return ov


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "train-teacher":
            cmd_train_teacher(cfg)
        elif args.command == "fit-heads":
            cmd_fit_heads(cfg)
        elif args.command == "distill":
            cmd_distill(cfg)
        elif args.command == "analyze":
            cmd_analyze(cfg)
        elif args.command == "ablate":
            cmd_ablate(cfg)
        elif args.command == "pipeline":
            modes = [m.strip().upper() for m in (args.mode or ",".join(MODES)).split(",") if m.strip()]
            bad = [m for m in modes if m not in MODES]
            if bad:
                raise UsageError(f"unknown modes {bad}")
            cmd_pipeline(cfg, modes)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArtifactError, FileNotFoundError) as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return EXIT_FILE
    except (ContractError, DimensionError) as exc:
        print(f"contract error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
