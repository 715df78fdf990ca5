"""Benchmark harness: datasets, corruption generators, recall metrics, and
the sequential write / corrupted read experiment runner.

The protocol stores one vector per timestep (optionally forgetting on a
fixed schedule), then queries every stored item through a corruption:
white noise is recalled auto-associatively, dropout and right-edge masking
hetero-associatively with the untouched entries as the key.  Results are
emitted one CSV row per item; runs are deterministic per seed up to the
timing column.
"""

from __future__ import annotations

import io
import math
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .baselines import (
    GpcnModel,
    MhnMemory,
    _mhn_recall_batch,
    as_zero_cov_memory,
    gpcn_write_offline,
    gpcn_write_online,
    init_gpcn,
    mhn_store,
)
from .engine import (
    DivergenceError,
    OptimizerConfig,
    ReadConfig,
    _read_auto_batch,
    _read_hetero_batch,
    forget,
    write,
)
from .network import build_memory

RAW_TENSOR_MAGIC = b"BPTD"
RAW_TENSOR_VERSION = 1
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixels

MODELS = ("bayespcn", "gpcn-offline", "gpcn-online", "mhn", "identity")
CORRUPTIONS = ("white_noise", "dropout", "mask")

CSV_COLUMNS = (
    "seed",
    "model",
    "task",
    "T",
    "item_index",
    "batch_index",
    "mse",
    "correct",
    "cumulative_mean_mse",
    "elapsed_ms",
)


@dataclass
class Dataset:
    """Vectors in [-1, 1] plus provenance and optional image geometry."""

    vectors: np.ndarray
    source: str = "synthetic"
    image_shape: tuple | None = None

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if self.vectors.size and (self.vectors.min() < -1.0 or self.vectors.max() > 1.0):
            raise ValueError("dataset values must lie in [-1, 1]")

    def __len__(self) -> int:
        return self.vectors.shape[0]


def synthetic_dataset(count: int, dim: int, seed, n_harmonics: int = 6) -> Dataset:
    """Smooth random harmonic mixtures in [-1, 1], seeded.

    Each vector is a low-frequency cosine/sine superposition with 1/k
    coefficient decay, rescaled to peak amplitude 0.9.  Like natural
    images, the vectors share low-dimensional structure, which is the
    regime the recall protocol is meant to probe.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(dim)
    x = np.zeros((count, dim))
    for k in range(1, n_harmonics + 1):
        coef = rng.normal(0.0, 1.0 / k, size=(count, 2))
        x += coef[:, :1] * np.cos(2.0 * np.pi * k * t / dim)
        x += coef[:, 1:] * np.sin(2.0 * np.pi * k * t / dim)
    x *= 0.9 / np.abs(x).max(axis=1, keepdims=True)
    return Dataset(vectors=x, source="synthetic")


def synthetic_iid_dataset(count: int, dim: int, seed) -> Dataset:
    """Unstructured uniform vectors in [-1, 1]: no shared structure, so
    recall must come from per-item storage rather than generalization."""
    rng = np.random.default_rng(seed)
    return Dataset(vectors=rng.uniform(-1.0, 1.0, size=(count, dim)), source="synthetic")


def load_cifar10(path) -> Dataset:
    """Read CIFAR-10 binary batches (one file, or every *.bin in a directory).

    Each 3073-byte record is one label byte followed by 3072 channel-major
    pixel bytes; labels are discarded and pixels map linearly onto [-1, 1].
    """
    path = Path(path)
    files = sorted(path.glob("*.bin")) if path.is_dir() else [path]
    if not files:
        raise ValueError(f"no CIFAR-10 batch files under {path}")
    raw = b"".join(f.read_bytes() for f in files)
    if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
        raise ValueError(
            f"CIFAR-10 payload of {len(raw)} bytes is not a whole number of "
            f"{CIFAR_RECORD_BYTES}-byte records"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    pixels = records[:, 1:].astype(np.float64)
    vectors = 2.0 * pixels / 255.0 - 1.0
    return Dataset(vectors=vectors, source="cifar10-binary", image_shape=(3, 32, 32))


def load_raw_tensor(path) -> Dataset:
    """Read the little-endian raw-tensor container (magic 'BPTD', float32 rows)."""
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise ValueError("raw-tensor file too short for its header")
    magic, version, count, dim = struct.unpack("<4sIII", blob[:16])
    if magic != RAW_TENSOR_MAGIC:
        raise ValueError(f"bad raw-tensor magic {magic!r}")
    if version != RAW_TENSOR_VERSION:
        raise ValueError(f"unsupported raw-tensor version {version}")
    if count == 0:
        raise ValueError("raw-tensor file holds an empty dataset")
    expected = 16 + 4 * count * dim
    if len(blob) != expected:
        raise ValueError(f"raw-tensor payload is {len(blob)} bytes, expected {expected}")
    values = np.frombuffer(blob, dtype="<f4", offset=16).astype(np.float64)
    vectors = values.reshape(count, dim)
    if vectors.min() < -1.0 or vectors.max() > 1.0:
        raise ValueError("raw-tensor values fall outside [-1, 1]")
    return Dataset(vectors=vectors, source="raw-tensor")


def save_raw_tensor(path, vectors) -> None:
    """Write vectors (rows, float32) in the raw-tensor container format."""
    arr = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if arr.size and (arr.min() < -1.0 or arr.max() > 1.0):
        raise ValueError("raw-tensor values must lie in [-1, 1]")
    count, dim = arr.shape
    if count == 0:
        raise ValueError("refusing to write an empty raw-tensor file")
    header = struct.pack("<4sIII", RAW_TENSOR_MAGIC, RAW_TENSOR_VERSION, count, dim)
    Path(path).write_bytes(header + arr.astype("<f4").tobytes())


# ---------------------------------------------------------------------------
# Corruption
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorruptionSpec:
    """kind: white_noise (param = noise sd on the [0,1] pixel scale),
    dropout (param = fraction of pixel sites blacked out), or
    mask (param = fraction of rightmost columns blacked out)."""

    kind: str
    param: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"corruption kind must be one of {CORRUPTIONS}")
        if self.param < 0:
            raise ValueError("corruption parameter must be non-negative")
        if self.kind in ("dropout", "mask") and self.param > 1:
            raise ValueError("blacked-out fraction cannot exceed 1")


def corrupt(x, spec: CorruptionSpec, image_shape=None, rng=None):
    """Corrupt one vector; returns (corrupted, known_mask-or-None).

    White noise is additive with sd 2 * param (param is quoted on the [0,1]
    pixel scale, the data lives in [-1, 1]) and yields no key mask.
    Dropout blacks out round(param * H * W) random pixel sites across all
    channels; mask blacks out the ceil(param * W) rightmost columns.  Both
    return a known_mask that is True exactly on the untouched entries.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if spec.kind == "white_noise":
        gen = rng if rng is not None else np.random.default_rng(spec.seed)
        noisy = x + gen.normal(0.0, 2.0 * spec.param, size=x.shape)
        return noisy, None

    if image_shape is None:
        raise ValueError(f"{spec.kind} corruption needs an image_shape (channels, height, width)")
    channels, height, width = image_shape
    if channels * height * width != x.shape[0]:
        raise ValueError(
            f"image_shape {image_shape} does not cover a vector of length {x.shape[0]}"
        )
    out = x.copy()
    hit = np.zeros((channels, height, width), dtype=bool)
    if spec.kind == "dropout":
        gen = rng if rng is not None else np.random.default_rng(spec.seed)
        n_sites = int(round(spec.param * height * width))
        sites = gen.choice(height * width, size=n_sites, replace=False)
        rows, cols = np.unravel_index(sites, (height, width))
        hit[:, rows, cols] = True
    else:  # mask
        n_cols = math.ceil(spec.param * width)
        if n_cols:
            hit[:, :, width - n_cols :] = True
    flat_hit = hit.reshape(-1)
    out[flat_hit] = -1.0
    return out, ~flat_hit


def mse(a, b) -> float:
    """Mean squared difference over all elements, in the [-1, 1] scale."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    diff = a - b
    return float(diff @ diff / a.shape[0])


def recall_accuracy(pairs, threshold: float = 0.01) -> float:
    """Fraction of (truth, recall) pairs with MSE below the threshold."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("recall_accuracy of an empty collection")
    hits = sum(1 for truth, rec in pairs if mse(truth, rec) < threshold)
    return hits / len(pairs)


# ---------------------------------------------------------------------------
# Experiment runner
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    model: str = "bayespcn"
    dims: tuple = (48, 64, 64, 64)
    activation: str = "gelu"
    n_particles: int = 1
    sigma_w2: float = 1.0
    sigma_x2: float = 1e-4
    sequence_length: int = 64
    corruption: CorruptionSpec = field(default_factory=lambda: CorruptionSpec("dropout", 0.25))
    forget_beta: float = 0.0
    forget_every: int | None = None
    read: ReadConfig = field(default_factory=ReadConfig)
    write_steps: int = 500
    seeds: tuple = (0,)
    data: str = "synthetic"  # "synthetic", "cifar10:<path>" or "raw:<path>"
    image_shape: tuple | None = None
    accuracy_threshold: float = 0.01
    mhn_beta: float = 10000.0
    gpcn_weight_lr: float = 1e-3
    gpcn_weight_iters: int = 100

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if self.sequence_length < 1:
            raise ValueError("sequence_length must be at least 1")
        if self.forget_every is not None and self.forget_every < 1:
            raise ValueError("forget_every must be positive when set")


@dataclass
class ExperimentResult:
    rows: list
    overall_mse: float
    accuracy: float
    batch_mse: list
    elapsed_ms: float

    def write_csv(self, fileobj) -> None:
        fileobj.write(",".join(CSV_COLUMNS) + "\n")
        for row in self.rows:
            fileobj.write(",".join(_csv_cell(row[c]) for c in CSV_COLUMNS) + "\n")

    def csv_bytes(self) -> bytes:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue().encode()


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _load_items(cfg: ExperimentConfig, seed: int) -> Dataset:
    if cfg.data == "synthetic":
        return synthetic_dataset(cfg.sequence_length, cfg.dims[0], seed=[seed, 7919])
    if cfg.data == "synthetic-iid":
        return synthetic_iid_dataset(cfg.sequence_length, cfg.dims[0], seed=[seed, 7919])
    if cfg.data.startswith("cifar10:"):
        return load_cifar10(cfg.data.split(":", 1)[1])
    if cfg.data.startswith("raw:"):
        return load_raw_tensor(cfg.data.split(":", 1)[1])
    raise ValueError(f"unknown data source {cfg.data!r}")


def _write_phase(cfg: ExperimentConfig, items: np.ndarray, seed: int):
    """Returns an opaque trained model handle for the read phase."""
    opt = OptimizerConfig(steps=cfg.write_steps)
    if cfg.model == "identity":
        return None
    if cfg.model == "mhn":
        mem = MhnMemory(beta=cfg.mhn_beta)
        for x in items:
            mem = mhn_store(mem, x)
        return mem
    if cfg.model == "gpcn-offline":
        model = init_gpcn(cfg.dims, cfg.activation, cfg.sigma_x2, seed)
        return gpcn_write_offline(
            model, items, opt, weight_iters=cfg.gpcn_weight_iters, weight_lr=cfg.gpcn_weight_lr
        )
    if cfg.model == "gpcn-online":
        model = init_gpcn(cfg.dims, cfg.activation, cfg.sigma_x2, seed)
        for i, x in enumerate(items):
            model = gpcn_write_online(model, x, opt, weight_lr=cfg.gpcn_weight_lr)
        return model
    mem = build_memory(
        cfg.dims,
        activation=cfg.activation,
        n_particles=cfg.n_particles,
        sigma_w2=cfg.sigma_w2,
        sigma_x2=cfg.sigma_x2,
        seed=seed,
    )
    for i, x in enumerate(items):
        mem = write(mem, x, opt)
        if cfg.forget_every is not None and (i + 1) % cfg.forget_every == 0:
            mem = forget(mem, cfg.forget_beta)
    return mem


def _corrupt_items(cfg: ExperimentConfig, items: np.ndarray, image_shape, seed: int):
    queries = np.empty_like(items)
    masks = None
    if cfg.corruption.kind != "white_noise":
        masks = np.empty(items.shape, dtype=bool)
    for i, x in enumerate(items):
        rng = np.random.default_rng([cfg.corruption.seed, seed, i])
        q, known = corrupt(x, cfg.corruption, image_shape, rng=rng)
        queries[i] = q
        if masks is not None:
            masks[i] = known
    return queries, masks


def _read_phase(cfg: ExperimentConfig, handle, queries, masks):
    """Recall every query; returns (recalls, per-item error flags)."""
    failed = np.zeros(queries.shape[0], dtype=bool)
    if cfg.model == "identity":
        return queries.copy(), failed
    if cfg.model == "mhn":
        if masks is None:
            out = _mhn_recall_batch(handle, queries, None, cfg.read.steps_per_phase, 1.0)
        else:
            steps = cfg.read.icm_iterations * cfg.read.steps_per_phase
            out = _mhn_recall_batch(handle, queries, masks, steps, 1.0)
        return out, failed
    mem = handle if cfg.model == "bayespcn" else as_zero_cov_memory(handle)
    try:
        if masks is None:
            out, _ = _read_auto_batch(mem, queries, cfg.read)
        else:
            out = _read_hetero_batch(mem, queries, masks, cfg.read)
        return out, failed
    except DivergenceError:
        pass
    # The batch diverged somewhere: fall back to per-item reads so one bad
    # query is recorded as a failure instead of sinking the whole run.
    out = queries.copy()
    for i in range(queries.shape[0]):
        try:
            if masks is None:
                rec, _ = _read_auto_batch(mem, queries[i : i + 1], cfg.read)
            else:
                rec = _read_hetero_batch(mem, queries[i : i + 1], masks[i : i + 1], cfg.read)
            out[i] = rec[0]
        except DivergenceError:
            failed[i] = True
    return out, failed


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Sequential write phase, corrupted read phase, one CSV row per item."""
    t_start = time.perf_counter()
    rows = []
    all_mses = []
    n_correct = 0
    n_items = 0
    batch_size = max(1, cfg.sequence_length // 16)
    batch_sums: dict = {}

    for seed in cfg.seeds:
        dataset = _load_items(cfg, seed)
        if len(dataset) < cfg.sequence_length:
            raise ValueError(
                f"dataset provides {len(dataset)} items, need {cfg.sequence_length}"
            )
        items = dataset.vectors[: cfg.sequence_length]
        image_shape = cfg.image_shape or dataset.image_shape or (1, 1, cfg.dims[0])

        handle = _write_phase(cfg, items, seed)
        queries, masks = _corrupt_items(cfg, items, image_shape, seed)
        t_read = time.perf_counter()
        recalls, failed = _read_phase(cfg, handle, queries, masks)
        per_item_ms = (time.perf_counter() - t_read) * 1000.0 / len(items)

        running = []
        for i in range(len(items)):
            err = math.nan if failed[i] else mse(items[i], recalls[i])
            correct = int(np.isfinite(err) and err < cfg.accuracy_threshold)
            if np.isfinite(err):
                running.append(err)
                all_mses.append(err)
            n_correct += correct
            n_items += 1
            batch_idx = i // batch_size
            batch_sums.setdefault(batch_idx, []).append(err)
            rows.append(
                {
                    "seed": seed,
                    "model": cfg.model,
                    "task": cfg.corruption.kind,
                    "T": cfg.sequence_length,
                    "item_index": i,
                    "batch_index": batch_idx,
                    "mse": err,
                    "correct": correct,
                    "cumulative_mean_mse": float(np.mean(running)) if running else math.nan,
                    "elapsed_ms": per_item_ms,
                }
            )

    batch_mse = [
        float(np.nanmean(batch_sums[k])) if len(batch_sums[k]) else math.nan
        for k in sorted(batch_sums)
    ]
    return ExperimentResult(
        rows=rows,
        overall_mse=float(np.mean(all_mses)) if all_mses else math.nan,
        accuracy=n_correct / n_items if n_items else math.nan,
        batch_mse=batch_mse,
        elapsed_ms=(time.perf_counter() - t_start) * 1000.0,
    )


# ---------------------------------------------------------------------------
# Flat key=value experiment configs
# ---------------------------------------------------------------------------

_CONFIG_KEYS = {
    "model": str,
    "dims": "ints",
    "activation": str,
    "particles": int,
    "sigma_w2": float,
    "sigma_x2": float,
    "sequence_length": int,
    "corruption": str,
    "corruption_param": float,
    "corruption_seed": int,
    "forget_beta": float,
    "forget_every": "optint",
    "icm_iterations": int,
    "steps_per_phase": int,
    "learning_rate": float,
    "write_steps": int,
    "seeds": "ints",
    "data": str,
    "image_shape": "ints",
    "accuracy_threshold": float,
    "mhn_beta": float,
    "gpcn_weight_lr": float,
    "gpcn_weight_iters": int,
}


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse the flat key=value experiment config format.

    Lines starting with '#' and blank lines are ignored; list values are
    comma-separated; forget_every accepts 'none'.
    """
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno} is not key=value: {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ValueError(f"unknown config key {key!r} on line {lineno}")
        raw[key] = value

    def parsed(key, default):
        if key not in raw:
            return default
        kind = _CONFIG_KEYS[key]
        value = raw[key]
        if kind == "ints":
            return tuple(int(v) for v in value.split(","))
        if kind == "optint":
            return None if value.lower() == "none" else int(value)
        return kind(value)

    corruption = CorruptionSpec(
        kind=parsed("corruption", "dropout"),
        param=parsed("corruption_param", 0.25),
        seed=parsed("corruption_seed", 0),
    )
    read = ReadConfig(
        icm_iterations=parsed("icm_iterations", 30),
        steps_per_phase=parsed("steps_per_phase", 500),
        optimizer=OptimizerConfig(learning_rate=parsed("learning_rate", 0.01)),
    )
    return ExperimentConfig(
        model=parsed("model", "bayespcn"),
        dims=parsed("dims", (48, 64, 64, 64)),
        activation=parsed("activation", "gelu"),
        n_particles=parsed("particles", 1),
        sigma_w2=parsed("sigma_w2", 1.0),
        sigma_x2=parsed("sigma_x2", 1e-4),
        sequence_length=parsed("sequence_length", 64),
        corruption=corruption,
        forget_beta=parsed("forget_beta", 0.0),
        forget_every=parsed("forget_every", None),
        read=read,
        write_steps=parsed("write_steps", 500),
        seeds=parsed("seeds", (0,)),
        data=parsed("data", "synthetic"),
        image_shape=parsed("image_shape", None),
        accuracy_threshold=parsed("accuracy_threshold", 0.01),
        mhn_beta=parsed("mhn_beta", 10000.0),
        gpcn_weight_lr=parsed("gpcn_weight_lr", 1e-3),
        gpcn_weight_iters=parsed("gpcn_weight_iters", 100),
    )


def load_config(path) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text())
