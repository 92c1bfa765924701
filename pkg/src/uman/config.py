"""Experiment configuration: JSON parsing, validation, canonical hashing.

A config file describes one experiment: the label-set size matrix (two
rows, last column = target), optional pairwise overlap overrides, the
synthetic data spec, training hyperparameters, the methods to run, the
seeds, and the output directory. Validation is collect-everything: a bad
file reports all of its problems at once. The canonical hash is computed
over a normalized dict with sorted keys, so formatting, key order, and
spelled-out defaults do not change it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields, replace

from .core import Hyperparams
from .labelspace import LabelConfigError, UmdaMatrix, partition_from_matrix
from .synth import SyntheticSpec

__all__ = [
    "ExperimentConfig",
    "KNOWN_METHODS",
    "SWEEP_AXES",
    "parse_config",
    "load_config",
    "config_hash",
    "canonical_dict",
    "derive_sweep_cell",
]

KNOWN_METHODS = ("uman", "source_only", "unweighted_adv")
SWEEP_AXES = ("num_sources", "common_overlap", "target_private_size", "source_private_overlap")

_TOP_KEYS = {"umda_matrix", "overrides", "synthetic", "hyperparams", "methods", "seeds", "output_dir"}


@dataclass(frozen=True)
class ExperimentConfig:
    matrix: UmdaMatrix
    synthetic: SyntheticSpec
    hyperparams: Hyperparams
    methods: tuple[str, ...]
    seeds: tuple[int, ...]
    output_dir: str


def _take_int(obj, key, problems, where, default=None, minimum=None):
    if key not in obj:
        return default
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, int):
        problems.append(f"{where}.{key} must be an integer, got {v!r}")
        return default
    if minimum is not None and v < minimum:
        problems.append(f"{where}.{key} must be >= {minimum}, got {v}")
        return default
    return v


def _parse_matrix(obj, problems):
    raw = obj.get("umda_matrix")
    if raw is None:
        problems.append("umda_matrix is required")
        return None
    if (
        not isinstance(raw, list)
        or len(raw) != 2
        or any(not isinstance(row, list) or len(row) < 2 for row in raw)
        or len(raw[0]) != len(raw[1])
    ):
        problems.append(
            "umda_matrix must be two equal-length integer rows of M+1 entries "
            "(per-source sizes, then the target column)"
        )
        return None
    for r, row in enumerate(raw):
        for c, v in enumerate(row):
            if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                problems.append(f"umda_matrix[{r}][{c}] must be a nonnegative integer, got {v!r}")
                return None

    def overlap(section):
        block = obj.get("overrides", {}).get(section)
        if block is None:
            return None
        out = {}
        for key, v in block.items():
            try:
                i, j = (int(p) for p in str(key).split("-"))
            except ValueError:
                problems.append(f"overrides.{section} key {key!r} must look like 'i-j'")
                return None
            if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                problems.append(f"overrides.{section}[{key}] must be a nonnegative integer, got {v!r}")
                return None
            out[(i, j)] = v
        return out or None

    overrides = obj.get("overrides", {})
    if not isinstance(overrides, dict) or set(overrides) - {"common", "source_private"}:
        problems.append("overrides must be an object with keys from {common, source_private}")
        return None
    matrix = UmdaMatrix(
        common_sizes=tuple(raw[0][:-1]),
        private_sizes=tuple(raw[1][:-1]),
        target_common=raw[0][-1],
        target_private=raw[1][-1],
        common_overlap=overlap("common"),
        private_overlap=overlap("source_private"),
    )
    problems.extend(matrix.violations())
    return matrix


def _parse_section(obj, key, cls, problems):
    raw = obj.get(key, {})
    if not isinstance(raw, dict):
        problems.append(f"{key} must be an object")
        return cls()
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        problems.append(f"{key} has unknown fields: {sorted(unknown)}")
    kwargs = {}
    for name, v in raw.items():
        if name not in known:
            continue
        want = known[name].type
        if want in ("int", int):
            ok = isinstance(v, int) and not isinstance(v, bool)
        elif want in ("float", float):
            ok = isinstance(v, (int, float)) and not isinstance(v, bool)
            v = float(v) if ok else v
        elif want in ("bool", bool):
            ok = isinstance(v, bool)
        else:  # integer tuples (layer widths)
            ok = isinstance(v, list) and all(
                isinstance(x, int) and not isinstance(x, bool) for x in v
            )
            v = tuple(v) if ok else v
        if not ok:
            problems.append(f"{key}.{name} has the wrong type: {raw[name]!r}")
            continue
        kwargs[name] = v
    section = cls(**kwargs)
    problems.extend(f"{key}: {p}" for p in section.violations())
    return section


def parse_config(obj) -> tuple[ExperimentConfig | None, list[str]]:
    """Validate a parsed JSON object; returns (config, problems).

    The config is None whenever problems is nonempty, and problems lists
    every violation found, not just the first.
    """
    problems: list[str] = []
    if not isinstance(obj, dict):
        return None, ["the config must be a JSON object"]
    unknown = set(obj) - _TOP_KEYS
    if unknown:
        problems.append(f"unknown top-level keys: {sorted(unknown)}")

    matrix = _parse_matrix(obj, problems)
    synthetic = _parse_section(obj, "synthetic", SyntheticSpec, problems)
    hyperparams = _parse_section(obj, "hyperparams", Hyperparams, problems)

    methods = obj.get("methods", ["uman"])
    if (
        not isinstance(methods, list)
        or not methods
        or any(m not in KNOWN_METHODS for m in methods)
        or len(set(methods)) != len(methods)
    ):
        problems.append(f"methods must be a nonempty list of distinct names from {KNOWN_METHODS}")
        methods = []

    seeds = obj.get("seeds", [0])
    if (
        not isinstance(seeds, list)
        or not seeds
        or any(isinstance(s, bool) or not isinstance(s, int) for s in seeds)
        or len(set(seeds)) != len(seeds)
    ):
        problems.append("seeds must be a nonempty list of distinct integers")
        seeds = []

    output_dir = obj.get("output_dir")
    if not isinstance(output_dir, str) or not output_dir:
        problems.append("output_dir is required and must be a nonempty string")

    if matrix is not None:
        try:
            partition_from_matrix(matrix)
        except LabelConfigError as exc:
            problems.append(str(exc))

    if problems:
        return None, problems
    return (
        ExperimentConfig(
            matrix=matrix,
            synthetic=synthetic,
            hyperparams=hyperparams,
            methods=tuple(methods),
            seeds=tuple(seeds),
            output_dir=output_dir,
        ),
        [],
    )


def load_config(path) -> tuple[ExperimentConfig | None, list[str]]:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except OSError as exc:
        return None, [f"cannot read {path}: {exc}"]
    except json.JSONDecodeError as exc:
        return None, [f"{path} is not valid JSON: {exc}"]
    return parse_config(obj)


def canonical_dict(config: ExperimentConfig) -> dict:
    """Fully normalized plain-dict form; the hash input."""
    m = config.matrix

    def overlaps(d):
        return {f"{i}-{j}": v for (i, j), v in sorted((d or {}).items())}

    return {
        "umda_matrix": [
            list(m.common_sizes) + [m.target_common],
            list(m.private_sizes) + [m.target_private],
        ],
        "overrides": {
            "common": overlaps(m.common_overlap),
            "source_private": overlaps(m.private_overlap),
        },
        "synthetic": {
            f.name: getattr(config.synthetic, f.name) for f in fields(SyntheticSpec)
        },
        "hyperparams": {
            f.name: list(v) if isinstance(v := getattr(config.hyperparams, f.name), tuple) else v
            for f in fields(Hyperparams)
        },
        "methods": list(config.methods),
        "seeds": list(config.seeds),
        "output_dir": config.output_dir,
    }


def config_hash(config: ExperimentConfig) -> str:
    blob = json.dumps(canonical_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def derive_sweep_cell(config: ExperimentConfig, axis: str, value: int) -> tuple[ExperimentConfig | None, list[str]]:
    """Build the config of one sweep cell; returns (config, problems).

    Axes mirror the usual experiment grids: the number of sources (each a
    copy of source 1's block sizes), the intersection size of the two
    shared blocks (per-source shared sizes grow to keep the union fixed),
    the number of target-private classes, and the intersection size of the
    two private blocks (per-source private sizes grow to keep their union
    fixed).
    """
    m = config.matrix
    problems: list[str] = []
    if axis not in SWEEP_AXES:
        return None, [f"unknown axis {axis!r}; expected one of {SWEEP_AXES}"]
    if value < 0:
        return None, [f"{axis} value must be >= 0, got {value}"]

    if axis == "num_sources":
        if value < 1:
            return None, ["num_sources must be >= 1"]
        matrix = replace(
            m,
            common_sizes=(m.common_sizes[0],) * value,
            private_sizes=(m.private_sizes[0],) * value,
            common_overlap=None,
            private_overlap=None,
        )
    elif axis == "target_private_size":
        matrix = replace(m, target_private=value)
    elif axis == "common_overlap":
        if m.n_sources != 2:
            return None, ["common_overlap sweeps need a 2-source base config"]
        n1 = (m.target_common + value) // 2
        matrix = replace(
            m,
            common_sizes=(n1, m.target_common + value - n1),
            common_overlap={(1, 2): value},
        )
    else:  # source_private_overlap
        if m.n_sources != 2:
            return None, ["source_private_overlap sweeps need a 2-source base config"]
        existing = (m.private_overlap or {}).get((1, 2), 0)
        union = sum(m.private_sizes) - existing
        p1 = (union + value) // 2
        matrix = replace(
            m,
            private_sizes=(p1, union + value - p1),
            private_overlap={(1, 2): value},
        )

    problems.extend(matrix.violations())
    if not problems:
        try:
            partition_from_matrix(matrix)
        except LabelConfigError as exc:
            problems.append(str(exc))
    if problems:
        return None, problems
    return replace(config, matrix=matrix), []
