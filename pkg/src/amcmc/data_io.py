"""Dataset ingestion, splits, standardisation, and run configuration."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .targets import ConfigError

CONFIG_VERSION = 1


@dataclass
class Dataset:
    """Binary-classification matrix with optional train-fitted scaling."""

    features: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    feature_means: np.ndarray | None = None
    feature_stds: np.ndarray | None = None
    dropped_rows: int = 0

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if np.any(~np.isfinite(self.features)):
            raise ConfigError("features contain NaN/inf after ingestion")
        if not np.all(np.isin(self.labels, (0.0, 1.0))):
            raise ConfigError("labels must be 0/1")
        if self.features.shape[0] != self.labels.size:
            raise ConfigError("feature/label row counts differ")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


def load_csv(path: str, label_column: str) -> Dataset:
    """Header CSV with numeric features and a binary label column.

    Rows with missing values are dropped (count kept on the dataset);
    labels coded {-1, +1} are remapped with -1 -> 0.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: empty file") from None
        if label_column not in header:
            raise ConfigError(f"{path}: no column named {label_column!r}")
        label_idx = header.index(label_column)
        rows, labels, dropped = [], [], 0
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                dropped += 1
                continue
            if any(cell.strip() == "" for cell in row):
                dropped += 1
                continue
            try:
                values = [float(cell) for cell in row]
            except ValueError:
                bad = next(i for i, cell in enumerate(row) if not _is_float(cell))
                raise ConfigError(
                    f"{path}:{line_no}: unparseable cell in column {header[bad]!r}: "
                    f"{row[bad]!r}"
                ) from None
            labels.append(values.pop(label_idx))
            rows.append(values)
    if not rows:
        raise ConfigError(f"{path}: no usable rows")
    y = np.array(labels)
    if set(np.unique(y)) == {-1.0, 1.0}:
        y = (y + 1.0) / 2.0
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise ConfigError(
            f"{path}: labels must be binary 0/1 or -1/+1, got {sorted(set(y))[:5]}"
        )
    return Dataset(np.array(rows), y, name=path, dropped_rows=dropped)


def _is_float(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint, exhaustive, seed-deterministic split; standardisation stats
    are fit on the train side and applied to both."""
    if not (0 < test_fraction < 1):
        raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n_test = int(round(dataset.n * test_fraction))
    if n_test == 0 or n_test == dataset.n:
        raise ConfigError("split would leave one side empty")
    perm = np.random.default_rng(seed).permutation(dataset.n)
    test_idx, train_idx = perm[:n_test], perm[n_test:]

    X_train = dataset.features[train_idx]
    means = X_train.mean(axis=0)
    stds = X_train.std(axis=0)
    # zero-variance columns pass through unscaled
    safe_stds = np.where(stds > 0, stds, 1.0)

    def scaled(idx):
        return (dataset.features[idx] - means) / safe_stds

    train = Dataset(
        scaled(train_idx), dataset.labels[train_idx], name=f"{dataset.name}-train",
        feature_means=means, feature_stds=safe_stds,
    )
    test = Dataset(
        scaled(test_idx), dataset.labels[test_idx], name=f"{dataset.name}-test",
        feature_means=means, feature_stds=safe_stds,
    )
    return train, test


def make_two_arcs(
    n: int = 400, noise: float = 0.2, label_flip: float = 0.08, seed: int = 0
) -> Dataset:
    """Two interleaved half-circle classes in the plane; the bundled
    nonlinear binary task, so the acceptance suite needs no downloads.

    label_flip injects an irreducible error floor so the task difficulty
    sits in the regime of small noisy tabular benchmarks rather than a
    clean geometry puzzle.
    """
    rng = np.random.default_rng(seed)
    n0 = n // 2
    n1 = n - n0
    t0 = rng.uniform(0, np.pi, n0)
    t1 = rng.uniform(0, np.pi, n1)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([1 - np.cos(t1), 0.5 - np.sin(t1)])
    X = np.vstack([upper, lower]) + noise * rng.standard_normal((n, 2))
    y = np.concatenate([np.zeros(n0), np.ones(n1)])
    if label_flip > 0:
        mask = rng.random(n) < label_flip
        y = np.where(mask, 1 - y, y)
    perm = rng.permutation(n)
    return Dataset(X[perm], y[perm], name="two-arcs")


def make_linear_latent_data(
    n: int = 500,
    latent_dim: int = 2,
    observed_dim: int = 5,
    noise_std: float = 0.1,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Synthetic x = W z + noise with z ~ N(0, I); returns (X, W_true)."""
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((observed_dim, latent_dim))
    Z = rng.standard_normal((n, latent_dim))
    X = Z @ W.T + noise_std * rng.standard_normal((n, observed_dim))
    return X, W


_CONFIG_FIELDS: dict[str, type] = {
    "version": int,
    "task": str,
    "out_dir": str,
    "seed": int,
    "iterations": int,
    "particles": int,
    "eval_every": int,
    "eval_samples": int,
    "sampler_family": str,
    "rule": str,
    "beta": float,
    "generator_loss_variant": str,
    "independent_z0": bool,
    "kernel_steps": int,
    "step_size": float,
    "metropolis_adjust": bool,
    "acceptance_target": (float, type(None)),
    "lr_phi": float,
    "lr_psi": float,
    "lr_theta": float,
    "dataset_csv": (str, type(None)),
    "label_column": str,
    "test_fraction": float,
    "n_splits": int,
    "sweep_repeats": int,
    "mala_particles": int,
    "mala_steps": int,
    "prior_std": float,
    "decoder": str,
    "n_data": int,
    "chains": int,
    "chain_steps": int,
    "render_figures": bool,
    "eval_target": str,
    "samples_csv": (str, type(None)),
    "obs_noise_std": float,
    "label_flip": float,
    "arc_noise": float,
    "minibatch": (int, type(None)),
    "disc_warmup": int,
}

_CONFIG_DEFAULTS = {
    "version": CONFIG_VERSION,
    "task": "gmm-fit",
    "out_dir": "out",
    "seed": 0,
    "iterations": 2000,
    "particles": 10,
    "eval_every": 100,
    "eval_samples": 1000,
    "sampler_family": "implicit_mlp",
    "rule": "adversarial_js",
    "beta": 2.0,
    "generator_loss_variant": "nonsaturating",
    "independent_z0": False,
    "kernel_steps": 10,
    "step_size": 0.1,
    "metropolis_adjust": True,
    "acceptance_target": None,
    "lr_phi": 1e-3,
    "lr_psi": 1e-3,
    "lr_theta": 1e-3,
    "dataset_csv": None,
    "label_column": "label",
    "test_fraction": 0.2,
    "n_splits": 5,
    "sweep_repeats": 10,
    "mala_particles": 100,
    "mala_steps": 1000,
    "prior_std": 1.0,
    "decoder": "linear",
    "n_data": 400,
    "chains": 20,
    "chain_steps": 100,
    "render_figures": True,
    "eval_target": "gmm",
    "samples_csv": None,
    "obs_noise_std": 0.5,
    "label_flip": 0.08,
    "arc_noise": 0.2,
    "minibatch": None,
    "disc_warmup": 0,
}


@dataclass
class RunConfig:
    """Flat, versioned run configuration; unknown keys are rejected."""

    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = dict(_CONFIG_DEFAULTS)
        for key, value in self.values.items():
            if key not in _CONFIG_FIELDS:
                raise ConfigError(f"unknown config key {key!r}")
            expected = _CONFIG_FIELDS[key]
            if not isinstance(expected, tuple):
                expected = (expected,)
            if isinstance(value, int) and float in expected and bool not in expected:
                value = float(value)
            if not isinstance(value, expected) or (
                isinstance(value, bool) and bool not in expected
            ):
                raise ConfigError(
                    f"config key {key!r} expects {expected}, got {type(value)}"
                )
            merged[key] = value
        if merged["version"] != CONFIG_VERSION:
            raise ConfigError(
                f"config version {merged['version']} unsupported "
                f"(expected {CONFIG_VERSION})"
            )
        self.values = merged

    def __getitem__(self, key: str):
        return self.values[key]

    def replaced(self, **overrides) -> "RunConfig":
        merged = dict(self.values)
        merged.update(overrides)
        return RunConfig(merged)

    def to_json(self) -> str:
        return json.dumps(self.values, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        payload = json.loads(text)
        if not isinstance(payload, dict):
            raise ConfigError("config must be a JSON object")
        return cls(payload)

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        with open(path) as fh:
            return cls.from_json(fh.read())


def write_float_csv(path: str, header: list[str], rows: list[list]) -> None:
    """CSV writer that formats floats with %.17g so dumps round-trip."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [f"{v:.17g}" if isinstance(v, float) else v for v in row]
            )


def read_float_csv(path: str) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(cell) for cell in row] for row in reader]
    return header, np.array(rows)
