"""Flat `key = value` run configuration shared by every CLI subcommand.

The file format is one assignment per line; blank lines and lines starting
with `#` are skipped.  Every key is typed and validated against a fixed
registry, and unknown keys are rejected up front so a typo cannot silently
fall back to a default after outputs have been written.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Mapping

from .distill import DistillConfig
from .synth import SynthConfig, standard_config


class ConfigError(ValueError):
    """Bad configuration: unknown key, bad value, or unusable combination."""


def _parse_int(minimum: int | None = None) -> Callable[[str], int]:
    def parse(raw: str) -> int:
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"expected an integer, got {raw!r}") from None
        if minimum is not None and value < minimum:
            raise ConfigError(f"must be >= {minimum}, got {value}")
        return value
    return parse


def _parse_float(minimum: float | None = None, maximum: float | None = None,
                 exclusive_min: bool = False) -> Callable[[str], float]:
    def parse(raw: str) -> float:
        try:
            value = float(raw)
        except ValueError:
            raise ConfigError(f"expected a number, got {raw!r}") from None
        if minimum is not None:
            if exclusive_min and value <= minimum:
                raise ConfigError(f"must be > {minimum}, got {value}")
            if not exclusive_min and value < minimum:
                raise ConfigError(f"must be >= {minimum}, got {value}")
        if maximum is not None and value > maximum:
            raise ConfigError(f"must be <= {maximum}, got {value}")
        return value
    return parse


def _parse_bool(raw: str) -> bool:
    lowered = raw.lower()
    if lowered == "true":
        return True
    if lowered == "false":
        return False
    raise ConfigError(f"expected true or false, got {raw!r}")


def _parse_choice(*options: str) -> Callable[[str], str]:
    def parse(raw: str) -> str:
        if raw not in options:
            raise ConfigError(
                f"expected one of {', '.join(options)}, got {raw!r}")
        return raw
    return parse


def _parse_str(raw: str) -> str:
    return raw


_SYNTH_DEFAULTS = asdict(standard_config())

# key -> (parser, default).  Defaults are the package's operating point;
# synth.* defaults reproduce the bundled standard fixture exactly.
KEY_SPECS: dict[str, tuple[Callable[[str], object], object]] = {
    "data.dir": (_parse_str, ""),
    "out.dir": (_parse_str, ""),
    "eval.pred_dir": (_parse_str, ""),
    "seed": (_parse_int(0), 0),
    "oracle.mode": (_parse_choice("synthetic", "bridge"), "synthetic"),
    "oracle.jitter": (_parse_float(0.0, 1.0), 0.1),
    "oracle.seed": (_parse_int(0), 7),
    "oracle.failure_fraction": (_parse_float(0.0, 1.0, exclusive_min=True),
                                0.5),
    "oracle.fail_small": (_parse_bool, True),
    "oracle.bridge_dir": (_parse_str, ""),
    "ot.lambda": (_parse_float(0.0, exclusive_min=True), 0.1),
    "ot.tol": (_parse_float(0.0, exclusive_min=True), 1e-6),
    "ot.max_iter": (_parse_int(1), 2000),
    "patch.per_axis": (_parse_int(1), 6),
    "morph.connectivity": (_parse_choice("4", "8"), 4),
    "morph.min_distance": (_parse_int(1), 3),
    "morph.edge_dilate": (_parse_float(0.0), 1.0),
    "score.threshold_mode": (_parse_choice("mean_plus_std", "std_over_mean"),
                             "mean_plus_std"),
    "distill.rounds": (_parse_int(0), 3),
    "distill.epochs": (_parse_int(1), 20),
    "distill.lr": (_parse_float(0.0), 0.1),
    "distill.hidden": (_parse_int(1), 32),
    "distill.seed": (_parse_int(0), 0),
    "metrics.adjacent_radius": (_parse_float(0.0, exclusive_min=True), 2.0),
    "metrics.adjacent_min_neighbors": (_parse_int(1), 1),
    "synth.seed": (_parse_int(0), _SYNTH_DEFAULTS["seed"]),
    "synth.train_images": (_parse_int(0), _SYNTH_DEFAULTS["train_images"]),
    "synth.test_images": (_parse_int(0), _SYNTH_DEFAULTS["test_images"]),
    "synth.size": (_parse_int(16), _SYNTH_DEFAULTS["size"]),
    "synth.cells": (_parse_int(0), _SYNTH_DEFAULTS["cells"]),
    "synth.radius_min": (_parse_float(0.0, exclusive_min=True),
                         _SYNTH_DEFAULTS["radius_min"]),
    "synth.radius_max": (_parse_float(0.0, exclusive_min=True),
                         _SYNTH_DEFAULTS["radius_max"]),
    "synth.overlap": (_parse_float(0.0, 1.0), _SYNTH_DEFAULTS["overlap"]),
    "synth.depth": (_parse_int(3), _SYNTH_DEFAULTS["depth"]),
    "synth.noise": (_parse_float(0.0), _SYNTH_DEFAULTS["noise"]),
    "synth.erode": (_parse_float(0.0, 1.0), _SYNTH_DEFAULTS["erode"]),
    "synth.drop": (_parse_float(0.0, 1.0), _SYNTH_DEFAULTS["drop"]),
    "synth.drop_grid": (_parse_int(1), _SYNTH_DEFAULTS["drop_grid"]),
    "synth.small_fraction": (_parse_float(0.0, 1.0),
                             _SYNTH_DEFAULTS["small_fraction"]),
    "synth.small_radius_min": (_parse_float(0.0, exclusive_min=True),
                               _SYNTH_DEFAULTS["small_radius_min"]),
    "synth.small_radius_max": (_parse_float(0.0, exclusive_min=True),
                               _SYNTH_DEFAULTS["small_radius_max"]),
    "synth.speckle_fraction": (_parse_float(0.0, 1.0),
                               _SYNTH_DEFAULTS["speckle_fraction"]),
}

# Module seeds that follow the global `seed` key unless set explicitly.
_SEED_FOLLOWERS = ("distill.seed", "oracle.seed", "synth.seed")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw key -> value strings; rejects unknown keys and syntax errors."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(
                f"{source}:{lineno}: expected `key = value`, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in KEY_SPECS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = raw
    return values


@dataclass(frozen=True)
class RunConfig:
    """Fully typed settings for one CLI invocation."""

    data_dir: str
    out_dir: str
    pred_dir: str
    seed: int
    oracle_mode: str
    oracle_jitter: float
    oracle_seed: int
    oracle_failure_fraction: float
    oracle_fail_small: bool
    oracle_bridge_dir: str
    ot_lambda: float
    ot_tol: float
    ot_max_iter: int
    per_axis: int
    connectivity: int
    min_distance: int
    edge_dilate: float
    threshold_mode: str
    rounds: int
    epochs: int
    lr: float
    hidden: int
    distill_seed: int
    adjacent_radius: float
    adjacent_min_neighbors: int
    synth: SynthConfig

    def distill_config(self) -> DistillConfig:
        return DistillConfig(
            rounds=self.rounds, epochs=self.epochs, lr=self.lr,
            hidden=self.hidden, seed=self.distill_seed,
            per_axis=self.per_axis, lam=self.ot_lambda, tol=self.ot_tol,
            max_iter=self.ot_max_iter, min_distance=self.min_distance,
            connectivity=self.connectivity, edge_dilate=self.edge_dilate,
            threshold_mode=self.threshold_mode,
            adjacent_radius=self.adjacent_radius,
            adjacent_min_neighbors=self.adjacent_min_neighbors)


def build_run_config(file_values: Mapping[str, str] | None = None,
                     overrides: Mapping[str, str] | None = None) -> RunConfig:
    """Merge file values and flag overrides (flag wins) into a RunConfig."""
    raw: dict[str, str] = {}
    for source in (file_values, overrides):
        for key, value in (source or {}).items():
            if key not in KEY_SPECS:
                raise ConfigError(f"unknown key {key!r}")
            raw[key] = str(value)
    typed: dict[str, object] = {}
    for key, (parser, default) in KEY_SPECS.items():
        if key in raw:
            try:
                typed[key] = parser(raw[key])
            except ConfigError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        else:
            typed[key] = default
    if "seed" in raw:
        for follower in _SEED_FOLLOWERS:
            if follower not in raw:
                typed[follower] = typed["seed"]
    try:
        synth = SynthConfig(
            seed=typed["synth.seed"],
            train_images=typed["synth.train_images"],
            test_images=typed["synth.test_images"],
            size=typed["synth.size"],
            cells=typed["synth.cells"],
            radius_min=typed["synth.radius_min"],
            radius_max=typed["synth.radius_max"],
            overlap=typed["synth.overlap"],
            depth=typed["synth.depth"],
            noise=typed["synth.noise"],
            erode=typed["synth.erode"],
            drop=typed["synth.drop"],
            drop_grid=typed["synth.drop_grid"],
            small_fraction=typed["synth.small_fraction"],
            small_radius_min=typed["synth.small_radius_min"],
            small_radius_max=typed["synth.small_radius_max"],
            speckle_fraction=typed["synth.speckle_fraction"])
    except ValueError as exc:
        raise ConfigError(f"synth.*: {exc}") from None
    config = RunConfig(
        data_dir=typed["data.dir"],
        out_dir=typed["out.dir"],
        pred_dir=typed["eval.pred_dir"],
        seed=typed["seed"],
        oracle_mode=typed["oracle.mode"],
        oracle_jitter=typed["oracle.jitter"],
        oracle_seed=typed["oracle.seed"],
        oracle_failure_fraction=typed["oracle.failure_fraction"],
        oracle_fail_small=typed["oracle.fail_small"],
        oracle_bridge_dir=typed["oracle.bridge_dir"],
        ot_lambda=typed["ot.lambda"],
        ot_tol=typed["ot.tol"],
        ot_max_iter=typed["ot.max_iter"],
        per_axis=typed["patch.per_axis"],
        connectivity=int(typed["morph.connectivity"]),
        min_distance=typed["morph.min_distance"],
        edge_dilate=typed["morph.edge_dilate"],
        threshold_mode=typed["score.threshold_mode"],
        rounds=typed["distill.rounds"],
        epochs=typed["distill.epochs"],
        lr=typed["distill.lr"],
        hidden=typed["distill.hidden"],
        distill_seed=typed["distill.seed"],
        adjacent_radius=typed["metrics.adjacent_radius"],
        adjacent_min_neighbors=typed["metrics.adjacent_min_neighbors"],
        synth=synth)
    try:
        config.distill_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return config
