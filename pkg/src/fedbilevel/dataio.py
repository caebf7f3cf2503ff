"""Tabular dataset ingestion and federated splits.

Loads CSV files into standardized feature matrices, then carves them into
the splits the simulator consumes: a stratified 7:3 train/test split,
uniform or group-skewed client partitions, and group-balanced validation
subsets. Every split is a measure-preserving partition and deterministic
under a fixed RngStream.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .numerics import RngStream


class SchemaError(ValueError):
    """A declared column is missing or a cell cannot be parsed."""


class SplitError(ValueError):
    """A split precondition (group size, client count) is violated."""


@dataclass(frozen=True)
class DatasetSchema:
    """Declares how to interpret the CSV columns.

    Columns other than the label and group columns are features; those
    listed in `categorical` are one-hot encoded, the rest parsed as
    numbers and z-scored unless `standardize` is off.
    """

    label_column: str
    group_column: str
    categorical: tuple[str, ...] = ()
    standardize: bool = True


@dataclass
class TabularDataset:
    """Feature matrix with binary labels and sensitive-group ids.

    group_count is the global number of groups; shards produced by the
    partitioners keep the global count even when a group is locally absent.
    """

    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int, values in {0, 1}
    groups: np.ndarray  # (n,) int, values in [0, group_count)
    feature_names: list[str]
    group_count: int
    label_mapping: dict = field(default_factory=dict)
    group_mapping: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.groups.shape != (n,):
            raise ValueError("features, labels and groups must have equal length")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain NaN or Inf")
        if n and (self.groups.min() < 0 or self.groups.max() >= self.group_count):
            raise ValueError("group ids must lie in [0, group_count)")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0/1")

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, idx) -> "TabularDataset":
        idx = np.asarray(idx, dtype=int)
        return TabularDataset(
            features=self.features[idx],
            labels=self.labels[idx],
            groups=self.groups[idx],
            feature_names=self.feature_names,
            group_count=self.group_count,
            label_mapping=self.label_mapping,
            group_mapping=self.group_mapping,
        )

    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.groups, minlength=self.group_count)


def _read_rows(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row required") from None
        rows = [row for row in reader if row]
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise SchemaError(f"{path}: row {i + 1} has {len(row)} cells, header has {len(header)}")
    return header, rows


def load_csv(path, schema: DatasetSchema) -> TabularDataset:
    """Load a CSV into a TabularDataset per the declared schema.

    Numeric feature columns are z-scored (constant columns pass through),
    categorical ones are one-hot encoded, and the label/group columns are
    mapped to integer codes with the mappings recorded on the dataset.
    """
    header, rows = _read_rows(path)
    for col in (schema.label_column, schema.group_column, *schema.categorical):
        if col not in header:
            raise SchemaError(f"{path}: missing column {col!r}")
    col_of = {name: j for j, name in enumerate(header)}
    n = len(rows)
    if n == 0:
        raise SchemaError(f"{path}: no data rows")

    label_raw = [row[col_of[schema.label_column]] for row in rows]
    group_raw = [row[col_of[schema.group_column]] for row in rows]
    label_values = sorted(set(label_raw))
    if len(label_values) != 2:
        raise SchemaError(
            f"{path}: label column {schema.label_column!r} must be binary, "
            f"found {len(label_values)} distinct values"
        )
    group_values = sorted(set(group_raw))
    label_mapping = {v: i for i, v in enumerate(label_values)}
    group_mapping = {v: i for i, v in enumerate(group_values)}
    labels = np.array([label_mapping[v] for v in label_raw], dtype=int)
    groups = np.array([group_mapping[v] for v in group_raw], dtype=int)

    feature_cols = [c for c in header if c not in (schema.label_column, schema.group_column)]
    blocks: list[np.ndarray] = []
    names: list[str] = []
    for col in feature_cols:
        j = col_of[col]
        raw = [row[j] for row in rows]
        if col in schema.categorical:
            cats = sorted(set(raw))
            onehot = np.zeros((n, len(cats)))
            cat_idx = {c: k for k, c in enumerate(cats)}
            for i, v in enumerate(raw):
                onehot[i, cat_idx[v]] = 1.0
            blocks.append(onehot)
            names.extend(f"{col}={c}" for c in cats)
        else:
            vals = np.empty(n)
            for i, v in enumerate(raw):
                try:
                    vals[i] = float(v)
                except ValueError:
                    raise SchemaError(
                        f"{path}: row {i + 1}, column {col!r}: cannot parse {v!r} as a number"
                    ) from None
            if schema.standardize:
                std = vals.std()
                vals = (vals - vals.mean()) / (std if std > 0 else 1.0)
            blocks.append(vals[:, None])
            names.append(col)
    features = np.hstack(blocks) if blocks else np.zeros((n, 0))

    return TabularDataset(
        features=features,
        labels=labels,
        groups=groups,
        feature_names=names,
        group_count=len(group_values),
        label_mapping=label_mapping,
        group_mapping=group_mapping,
    )


def save_csv(ds: TabularDataset, path, label_column="label", group_column="group") -> None:
    """Write the processed dataset back out; reload with standardize=False."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([*ds.feature_names, label_column, group_column])
        for i in range(len(ds)):
            writer.writerow(
                [*(repr(float(v)) for v in ds.features[i]), int(ds.labels[i]), int(ds.groups[i])]
            )


def split_train_test(
    ds: TabularDataset, rng: RngStream, ratio: float = 0.7
) -> tuple[TabularDataset, TabularDataset]:
    """Group-stratified split: each group's samples split ratio:(1-ratio)."""
    if not 0 < ratio < 1:
        raise SplitError(f"ratio must be in (0, 1), got {ratio}")
    train_idx: list[int] = []
    test_idx: list[int] = []
    for g in range(ds.group_count):
        members = np.nonzero(ds.groups == g)[0]
        if len(members) < 2:
            raise SplitError(f"group {g} has {len(members)} samples, need at least 2 to split")
        perm = members[rng.permutation(len(members))]
        n_train = int(round(ratio * len(members)))
        n_train = min(max(n_train, 1), len(members) - 1)
        train_idx.extend(perm[:n_train])
        test_idx.extend(perm[n_train:])
    return ds.subset(sorted(train_idx)), ds.subset(sorted(test_idx))


def partition_iid(ds: TabularDataset, num_clients: int, rng: RngStream) -> list[TabularDataset]:
    """Random permutation chunked into near-equal shards (sizes differ by <= 1)."""
    if num_clients < 1:
        raise SplitError(f"num_clients must be >= 1, got {num_clients}")
    perm = rng.permutation(len(ds))
    base, extra = divmod(len(ds), num_clients)
    shards = []
    start = 0
    for m in range(num_clients):
        size = base + (1 if m < extra else 0)
        shards.append(ds.subset(sorted(perm[start : start + size])))
        start += size
    return shards


def partition_noniid(ds: TabularDataset, rng: RngStream, num_clients: int = 3) -> list[TabularDataset]:
    """Skewed 3-client partition: per group, shares of 20%/20%/60%.

    Each group is split into shares of floor(0.2 n), floor(0.2 n) and the
    remainder, and the three shares are dealt to the three clients by a
    fresh random permutation per group.
    """
    if num_clients != 3:
        raise SplitError(f"the skewed partition scheme is 3-client specific, got {num_clients}")
    per_client: list[list[int]] = [[], [], []]
    for g in range(ds.group_count):
        members = np.nonzero(ds.groups == g)[0]
        n = len(members)
        if n < 3:
            raise SplitError(f"group {g} has {n} samples, need at least 3")
        shuffled = members[rng.permutation(n)]
        small = n // 5
        shares = [shuffled[:small], shuffled[small : 2 * small], shuffled[2 * small :]]
        assignment = rng.permutation(3)
        for share, client in zip(shares, assignment):
            per_client[int(client)].extend(share)
    return [ds.subset(sorted(idx)) for idx in per_client]


def build_balanced_validation(
    ds: TabularDataset, per_group: int, rng: RngStream
) -> tuple[TabularDataset, TabularDataset]:
    """Carve a group-balanced validation set out of a client's train set.

    Draws exactly per_group samples from every group present, without
    replacement, and removes them from the training remainder.
    """
    if per_group < 0:
        raise SplitError(f"per_group must be >= 0, got {per_group}")
    val_idx: list[int] = []
    present = [g for g in range(ds.group_count) if (ds.groups == g).any()]
    for g in present:
        members = np.nonzero(ds.groups == g)[0]
        if len(members) < per_group:
            raise SplitError(
                f"group {g} has {len(members)} samples, "
                f"{per_group - len(members)} short of the requested {per_group}"
            )
        chosen = members[rng.permutation(len(members))][:per_group]
        val_idx.extend(chosen)
    mask = np.zeros(len(ds), dtype=bool)
    mask[val_idx] = True
    return ds.subset(sorted(val_idx)), ds.subset(np.nonzero(~mask)[0])
