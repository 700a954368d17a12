"""Synthetic transfer-learning datasets and the plain-text file formats.

Target category means sit on scaled signed unit-vector corners (``+-e_k``);
a ``relatedness`` fraction of the source means is placed within
``noise_sigma`` of a randomly chosen target mean and the rest at least
``10 * noise_sigma`` away from every target mean.  Samples are the category
mean plus isotropic Gaussian noise.

Every random draw comes from a PCG64 stream keyed on ``(seed, purpose, ...)``
so that, for example, adding a source category leaves the noise of the
existing categories untouched.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .errors import InvalidSpec, ParseError, SchemaError
from .network import LabeledSet
from .ot import CostMatrix

PURPOSE_TARGET_PLACEMENT = 10
PURPOSE_SOURCE_PLACEMENT = 11
PURPOSE_NOISE = 12

SPLIT_TARGET_TRAIN = 0
SPLIT_TARGET_TEST = 1
SPLIT_SOURCE = 2

UNRELATED_MIN_GAP = 10.0
UNRELATED_SPREAD = 5.0


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(key))))


@dataclass(frozen=True)
class SyntheticSpec:
    feature_dim: int = 8
    target_categories: int = 5
    source_categories: int = 10
    samples_per_target_train: int = 4
    samples_per_target_test: int = 40
    samples_per_source: int = 40
    relatedness: float = 0.9
    noise_sigma: float = 1.0
    seed: int = 0
    # distance of each target mean from the origin, in units of noise_sigma
    class_separation: float = 2.5

    def validate(self) -> None:
        counts = {
            "feature_dim": self.feature_dim,
            "target_categories": self.target_categories,
            "source_categories": self.source_categories,
            "samples_per_target_train": self.samples_per_target_train,
            "samples_per_target_test": self.samples_per_target_test,
            "samples_per_source": self.samples_per_source,
        }
        for name, value in counts.items():
            if int(value) != value or value < 1:
                raise InvalidSpec(f"{name} must be a positive integer, got {value!r}")
        if not 0.0 <= self.relatedness <= 1.0:
            raise InvalidSpec(f"relatedness must lie in [0, 1], got {self.relatedness!r}")
        if not self.noise_sigma > 0:
            raise InvalidSpec("noise_sigma must be positive")
        if not self.class_separation > 0:
            raise InvalidSpec("class_separation must be positive")
        if self.target_categories > 2 * self.feature_dim:
            raise InvalidSpec(
                f"at most 2 * feature_dim = {2 * self.feature_dim} target categories fit on the corner grid"
            )


@dataclass
class TransferDataset:
    target_train: LabeledSet
    target_test: LabeledSet
    source: LabeledSet
    target_means: np.ndarray
    source_means: np.ndarray
    # index of the target category each source category was placed near, -1 if unrelated
    related_target: np.ndarray


def _random_directions(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    g = rng.standard_normal((n, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _target_means(spec: SyntheticSpec) -> np.ndarray:
    d = spec.feature_dim
    corners = np.vstack([np.eye(d), -np.eye(d)])
    rng = _rng(spec.seed, PURPOSE_TARGET_PLACEMENT)
    pick = rng.permutation(2 * d)[: spec.target_categories]
    return spec.class_separation * spec.noise_sigma * corners[pick]


def _source_means(spec: SyntheticSpec, target_means: np.ndarray):
    d = spec.feature_dim
    s = spec.source_categories
    sigma = spec.noise_sigma
    rng = _rng(spec.seed, PURPOSE_SOURCE_PLACEMENT)
    n_related = int(round(spec.relatedness * s))
    related_slots = np.sort(rng.permutation(s)[:n_related])
    related = np.full(s, -1, dtype=np.int64)
    # one draw per category, in category order, so each category's placement is fixed
    choice = rng.integers(0, spec.target_categories, size=s)
    directions = _random_directions(rng, s, d)
    unit = rng.random(s)
    means = np.empty((s, d))
    outer = float(np.linalg.norm(target_means, axis=1).max())
    for k in range(s):
        if k in related_slots:
            related[k] = choice[k]
            radius = sigma * unit[k] ** (1.0 / d)
            means[k] = target_means[choice[k]] + radius * directions[k]
        else:
            # outside the ball holding every target mean, by at least the required gap
            radius = outer + sigma * (UNRELATED_MIN_GAP + UNRELATED_SPREAD * unit[k])
            means[k] = radius * directions[k]
    return means, related


def _sample(spec: SyntheticSpec, means: np.ndarray, per_category: int, split: int) -> LabeledSet:
    feats, labels = [], []
    for k, mean in enumerate(means):
        rng = _rng(spec.seed, PURPOSE_NOISE, split, k)
        feats.append(mean + spec.noise_sigma * rng.standard_normal((per_category, spec.feature_dim)))
        labels.append(np.full(per_category, k, dtype=np.int64))
    return LabeledSet(np.vstack(feats), np.concatenate(labels), len(means))


def generate(spec: SyntheticSpec) -> TransferDataset:
    """Draw a dataset from ``spec``; identical specs give identical datasets."""
    spec.validate()
    tmeans = _target_means(spec)
    smeans, related = _source_means(spec, tmeans)
    return TransferDataset(
        target_train=_sample(spec, tmeans, spec.samples_per_target_train, SPLIT_TARGET_TRAIN),
        target_test=_sample(spec, tmeans, spec.samples_per_target_test, SPLIT_TARGET_TEST),
        source=_sample(spec, smeans, spec.samples_per_source, SPLIT_SOURCE),
        target_means=tmeans,
        source_means=smeans,
        related_target=related,
    )


# ---------------------------------------------------------------- file formats


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_header(line: str, required, lineno: int) -> Dict[str, str]:
    fields = {}
    for part in line.strip().split(","):
        if "=" not in part:
            raise ParseError(f"malformed header field {part!r}", lineno)
        key, value = part.split("=", 1)
        fields[key.strip()] = value.strip()
    for key in required:
        if key not in fields:
            raise SchemaError(f"header is missing the {key!r} column")
    return fields


def _parse_int(text: str, what: str, lineno: int) -> int:
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"{what} must be an integer, got {text!r}", lineno) from None


def _parse_float(text: str, what: str, lineno: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"{what} is not a number: {text!r}", lineno) from None


def format_labeled_set(data: LabeledSet) -> str:
    lines = [f"feature_dim={data.feature_dim},label_count={data.label_count}"]
    for row, label in zip(data.features, data.labels):
        lines.append(",".join([str(int(label) + 1)] + [_fmt(v) for v in row]))
    return "\n".join(lines) + "\n"


def save_labeled_set(data: LabeledSet, path) -> None:
    """Write ``data``; labels are stored 1-based."""
    atomic_write_text(path, format_labeled_set(data))


def parse_labeled_set(text: str) -> LabeledSet:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].strip():
        raise ParseError("empty file: expected a 'feature_dim=...,label_count=...' header", 1)
    header = _parse_header(lines[0], ("feature_dim", "label_count"), 1)
    d = _parse_int(header["feature_dim"], "feature_dim", 1)
    count = _parse_int(header["label_count"], "label_count", 1)
    if d < 1 or count < 1:
        raise SchemaError("feature_dim and label_count must be positive")
    feats, labels = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            raise ParseError("blank line", lineno)
        cells = line.split(",")
        if len(cells) < d + 1:
            missing = "label" if not cells[0].strip() else f"x{len(cells)}"
            raise SchemaError(f"line {lineno}: missing column {missing} (expected label plus {d} features)")
        if len(cells) > d + 1:
            raise ParseError(f"expected {d + 1} columns, found {len(cells)}", lineno)
        label = _parse_int(cells[0], "label", lineno)
        if not 1 <= label <= count:
            raise SchemaError(f"line {lineno}: label {label} outside [1, {count}]")
        labels.append(label - 1)
        feats.append([_parse_float(c, f"column x{i + 1}", lineno) for i, c in enumerate(cells[1:])])
    if not labels:
        raise ParseError("no samples after the header", len(lines) + 1)
    return LabeledSet(np.array(feats, dtype=np.float64), np.array(labels, dtype=np.int64), count)


def load_labeled_set(path) -> LabeledSet:
    return parse_labeled_set(Path(path).read_text(encoding="utf-8"))


def format_cost_matrix(cost: CostMatrix, comments: Optional[Dict[str, object]] = None) -> str:
    rows, cols = cost.shape
    lines = [f"rows={rows},cols={cols},normalized={'true' if cost.normalized else 'false'}"]
    meta = {"scale": _fmt(cost.scale)}
    meta.update(comments or {})
    lines += [f"# {k}={v}" for k, v in meta.items()]
    lines += [",".join(_fmt(v) for v in row) for row in cost.entries]
    lines.append("# row_labels=" + ",".join(str(x) for x in cost.row_labels))
    lines.append("# col_labels=" + ",".join(str(x) for x in cost.col_labels))
    return "\n".join(lines) + "\n"


def save_cost_matrix(cost: CostMatrix, path, comments: Optional[Dict[str, object]] = None) -> None:
    atomic_write_text(path, format_cost_matrix(cost, comments))


def _label_list(text: str):
    out = []
    for item in text.split(","):
        item = item.strip()
        try:
            out.append(int(item))
        except ValueError:
            out.append(item)
    return tuple(out)


def parse_cost_matrix(text: str):
    """Parse a cost-matrix file; returns ``(CostMatrix, comments)``."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].strip():
        raise ParseError("empty file: expected a 'rows=...,cols=...,normalized=...' header", 1)
    header = _parse_header(lines[0], ("rows", "cols", "normalized"), 1)
    nrows = _parse_int(header["rows"], "rows", 1)
    ncols = _parse_int(header["cols"], "cols", 1)
    norm = header["normalized"].lower()
    if norm not in ("true", "false"):
        raise ParseError(f"normalized must be true or false, got {norm!r}", 1)
    comments: Dict[str, str] = {}
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                key, value = body.split("=", 1)
                comments[key.strip()] = value.strip()
            continue
        if not line.strip():
            raise ParseError("blank line", lineno)
        cells = line.split(",")
        if len(cells) != ncols:
            raise ParseError(f"expected {ncols} columns, found {len(cells)}", lineno)
        entries.append([_parse_float(c, f"column {i + 1}", lineno) for i, c in enumerate(cells)])
    if len(entries) != nrows:
        raise SchemaError(f"header declares {nrows} rows, found {len(entries)}")
    row_labels = _label_list(comments["row_labels"]) if "row_labels" in comments else None
    col_labels = _label_list(comments["col_labels"]) if "col_labels" in comments else None
    scale = float(comments.get("scale", 1.0))
    cost = CostMatrix(np.array(entries, dtype=np.float64), row_labels, col_labels,
                      normalized=(norm == "true"), scale=scale)
    return cost, comments


def load_cost_matrix(path) -> CostMatrix:
    return parse_cost_matrix(Path(path).read_text(encoding="utf-8"))[0]


def parse_histogram(text: str) -> np.ndarray:
    """Numbers separated by commas, whitespace or newlines; ``#`` starts a comment."""
    values = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        line = line.split("#", 1)[0]
        for tok in line.replace(",", " ").split():
            values.append(_parse_float(tok, "histogram entry", lineno))
    if not values:
        raise ParseError("no histogram entries found", 1)
    return np.array(values, dtype=np.float64)


def load_histogram(path) -> np.ndarray:
    return parse_histogram(Path(path).read_text(encoding="utf-8"))


def save_histogram(weights, path) -> None:
    atomic_write_text(path, ",".join(_fmt(w) for w in np.asarray(weights, dtype=np.float64)) + "\n")


def save_matrix_csv(matrix, path) -> None:
    atomic_write_text(path, "".join(",".join(_fmt(v) for v in row) + "\n" for row in np.asarray(matrix)))


DATASET_FILES = {
    "target_train": "target_train.txt",
    "target_test": "target_test.txt",
    "source": "source.txt",
}


def save_dataset(ds: TransferDataset, directory) -> Dict[str, Path]:
    directory = Path(directory)
    paths = {}
    for key, name in DATASET_FILES.items():
        paths[key] = directory / name
        save_labeled_set(getattr(ds, key), paths[key])
    meta = ["# category means; source rows carry the related target index (0-based, -1 if unrelated)"]
    for k, m in enumerate(ds.target_means):
        meta.append(f"target,{k},-1," + ",".join(_fmt(v) for v in m))
    for k, m in enumerate(ds.source_means):
        meta.append(f"source,{k},{int(ds.related_target[k])}," + ",".join(_fmt(v) for v in m))
    paths["means"] = directory / "means.txt"
    atomic_write_text(paths["means"], "\n".join(meta) + "\n")
    return paths
