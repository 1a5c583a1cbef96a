"""Data sources: the Synthetic(gamma, xi) generator, non-i.i.d. partitioners,
IDX (MNIST / Fashion-MNIST) ingestion, and flat dataset serialization.

Synthetic(gamma, xi), per device i::

    u_i ~ N(0, gamma)        B_i ~ N(0, xi)           (scalars)
    W_i ~ N(u_i, 1)  (d x C) b_i ~ N(u_i, 1)  (C)
    v_i ~ N(B_i, 1)  (d)     x ~ N(v_i, Sigma),  Sigma_jj = j ** -1.2
    y   = argmax softmax(x W_i + b_i)

The second argument of N(., .) is a variance. In iid mode one set of
(W, b, v) is drawn and shared by every device.

Serialized dataset layouts
--------------------------
CSV: first line ``m,d,C``; then m lines of ``x_1,...,x_d,label`` with floats
written by ``repr`` (exact round trip). LF line endings.

Binary: 8-byte magic ``HFLDSET1``; three little-endian uint64 (m, d, C); then
m records of d little-endian float64 features followed by one little-endian
int64 label.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .streams import Streams
from .workloads import Dataset

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# 42,522 samples over 100 devices: the reference size of Synthetic(0,0).
SAMPLES_PER_DEVICE = 425.22


@dataclass(frozen=True)
class SyntheticSpec:
    gamma: float = 0.0
    xi: float = 0.0
    num_devices: int = 100
    d: int = 60
    num_classes: int = 10
    size_exponent: float = 1.5
    min_samples: int = 32
    total_samples: int | None = None
    iid_mode: bool = False
    seed: int = 0
    test_fraction: float = 0.2
    cov_decay: float = 1.2

    def __post_init__(self):
        if self.gamma < 0 or self.xi < 0:
            raise ValueError("gamma and xi must be >= 0")
        if self.num_devices < 1:
            raise ValueError("num_devices must be >= 1")
        if self.d < 1 or self.num_classes < 2:
            raise ValueError("need d >= 1 and num_classes >= 2")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in [0, 1)")
        if self.size_exponent <= 0:
            raise ValueError("size_exponent must be > 0")
        if self.min_samples < 2:
            raise ValueError("min_samples must be >= 2")

    @property
    def total(self) -> int:
        if self.total_samples is not None:
            return int(self.total_samples)
        return int(round(SAMPLES_PER_DEVICE * self.num_devices))


@dataclass
class GeneratingParams:
    weights: np.ndarray
    bias: np.ndarray
    feature_mean: np.ndarray


@dataclass
class SyntheticData:
    train: list[Dataset]
    test: Dataset
    generators: list[GeneratingParams]
    feature_std: np.ndarray
    sizes: np.ndarray = field(repr=False)

    def pooled_train(self) -> Dataset:
        return Dataset.concat(self.train)


class InsufficientSamplesError(ValueError):
    def __init__(self, device: int, message: str):
        super().__init__(f"device {device}: {message}")
        self.device = device


def powerlaw_sizes(
    num_devices: int,
    total: int,
    rng: np.random.Generator,
    exponent: float = 1.5,
    min_samples: int = 32,
) -> np.ndarray:
    """Split ``total`` samples over devices with Pareto(exponent)-distributed shares.

    Every device gets ``min_samples`` first; the remainder is divided in
    proportion to Pareto draws. Rounding leftovers go to the largest fractional
    parts (ties to the lower device id). The result sums to ``total``.
    """
    if total < num_devices * min_samples:
        raise ValueError(
            f"total={total} cannot give {num_devices} devices {min_samples} samples each"
        )
    raw = rng.pareto(exponent, num_devices) + 1.0
    extra = total - num_devices * min_samples
    share = raw / raw.sum() * extra
    base = np.floor(share).astype(np.int64)
    leftover = int(extra - base.sum())
    if leftover:
        order = np.argsort(-(share - base), kind="stable")
        base[order[:leftover]] += 1
    return base + min_samples


def _draw_samples(rng, n, gen: GeneratingParams, std, allowed, budget=20):
    """Draw n samples from one generating model, keeping only allowed labels.

    Returns None if the model emits too few allowed labels within ``budget``
    candidate batches.
    """
    d = std.shape[0]
    if allowed is None:
        x = gen.feature_mean + rng.standard_normal((n, d)) * std
        return x, np.argmax(x @ gen.weights + gen.bias, axis=1)
    allowed = np.asarray(sorted(allowed))
    xs, ys, have = [], [], 0
    for _ in range(budget):
        x = gen.feature_mean + rng.standard_normal((max(n, 64), d)) * std
        y = np.argmax(x @ gen.weights + gen.bias, axis=1)
        keep = np.isin(y, allowed)
        xs.append(x[keep])
        ys.append(y[keep])
        have += int(keep.sum())
        if have >= n:
            return np.concatenate(xs)[:n], np.concatenate(ys)[:n]
    return None


def gen_synthetic(spec: SyntheticSpec, label_sets=None, max_model_draws: int = 200) -> SyntheticData:
    """Generate per-device training shards and a pooled test set.

    ``label_sets`` optionally restricts device i to labels ``label_sets[i]``.
    Samples with other labels are rejected; a device whose generating model
    (almost) never emits its allowed labels gets a fresh model, up to
    ``max_model_draws`` times.
    Each device draws ``n_i`` samples; the last ``round(test_fraction * n_i)``
    go to the shared test set.
    """
    if label_sets is not None and len(label_sets) != spec.num_devices:
        raise ValueError("label_sets must have one entry per device")
    streams = Streams(spec.seed)
    sizes = powerlaw_sizes(
        spec.num_devices,
        spec.total,
        streams.get("synthetic.sizes"),
        spec.size_exponent,
        spec.min_samples,
    )
    rng = streams.get("synthetic.draws")
    d, c = spec.d, spec.num_classes
    std = np.arange(1, d + 1, dtype=np.float64) ** (-spec.cov_decay / 2.0)
    sd_gamma, sd_xi = np.sqrt(spec.gamma), np.sqrt(spec.xi)

    def draw_model() -> GeneratingParams:
        u = rng.normal(0.0, sd_gamma)
        w = u + rng.standard_normal((d, c))
        b = u + rng.standard_normal(c)
        bb = rng.normal(0.0, sd_xi)
        v = bb + rng.standard_normal(d)
        return GeneratingParams(w, b, v)

    shared = draw_model() if spec.iid_mode else None
    train, tests, gens = [], [], []
    for i, n in enumerate(sizes):
        allowed = None if label_sets is None else label_sets[i]
        for _ in range(max_model_draws):
            gen = shared if shared is not None else draw_model()
            drawn = _draw_samples(rng, int(n), gen, std, allowed)
            if drawn is not None or shared is not None:
                break
        if drawn is None:
            raise InsufficientSamplesError(
                i, f"no generating model emitted labels {sorted(allowed)} often enough"
            )
        x, y = drawn
        n_test = int(round(spec.test_fraction * n))
        n_train = int(n) - n_test
        train.append(Dataset(x[:n_train], y[:n_train], c))
        if n_test:
            tests.append(Dataset(x[n_train:], y[n_train:], c))
        gens.append(gen)
    test = Dataset.concat(tests) if tests else Dataset(np.zeros((0, d)), np.zeros(0, np.int64), c)
    return SyntheticData(train, test, gens, std, sizes)


@dataclass
class PartitionPlan:
    indices: list[np.ndarray]
    label_sets: list[tuple[int, ...]]

    def shards(self, source: Dataset) -> list[Dataset]:
        return [source.subset(ix) for ix in self.indices]

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for ix in self.indices:
            h.update(np.asarray(ix, dtype="<i8").tobytes())
            h.update(b"|")
        return h.hexdigest()[:16]


def partition_powerlaw_labels(
    source: Dataset,
    num_devices: int,
    labels_per_device: int = 2,
    seed: int = 0,
    *,
    exponent: float = 1.5,
    min_samples: int = 32,
    label_sets=None,
    usage: float = 1.0,
) -> PartitionPlan:
    """Give each device a power-law-sized shard drawn only from its own labels.

    Device i's label set defaults to ``i mod C`` plus ``labels_per_device - 1``
    distinct random labels. A device's size is split evenly over its labels;
    where a label's pool cannot cover the demand, the claimants' surplus over
    ``min_samples`` is scaled down proportionally.
    """
    c = source.num_classes
    streams = Streams(seed)
    rng = streams.get("partition.labels")
    if label_sets is None:
        if not 1 <= labels_per_device <= c:
            raise ValueError(f"labels_per_device must lie in [1, {c}]")
        label_sets = []
        for i in range(num_devices):
            first = i % c
            rest = [l for l in range(c) if l != first]
            extra = rng.choice(rest, size=labels_per_device - 1, replace=False)
            label_sets.append(tuple(sorted([first, *map(int, extra)])))
    else:
        label_sets = [tuple(sorted(map(int, s))) for s in label_sets]
        if len(label_sets) != num_devices:
            raise ValueError("label_sets must have one entry per device")
    total = int(len(source) * usage)
    sizes = powerlaw_sizes(num_devices, total, streams.get("partition.sizes"), exponent, min_samples)

    def split(n, labels):
        row = np.zeros(c, dtype=np.int64)
        per, rem = divmod(int(n), len(labels))
        for j, lab in enumerate(labels):
            row[lab] = per + (1 if j < rem else 0)
        return row

    # The min_samples floor is reserved first; only the power-law surplus is
    # scaled down when a label pool is oversubscribed.
    floor = np.stack([split(min(min_samples, n), labels) for n, labels in zip(sizes, label_sets)])
    surplus = np.stack([split(n, labels) for n, labels in zip(sizes, label_sets)]) - floor

    pools = [np.flatnonzero(source.labels == lab) for lab in range(c)]
    shuffle = streams.get("partition.shuffle")
    for lab in range(c):
        pools[lab] = shuffle.permutation(pools[lab])
        room = len(pools[lab]) - floor[:, lab].sum()
        if room < 0:
            floor[:, lab] = np.floor(floor[:, lab] * (len(pools[lab]) / floor[:, lab].sum())).astype(np.int64)
            surplus[:, lab] = 0
        elif surplus[:, lab].sum() > room:
            surplus[:, lab] = np.floor(surplus[:, lab] * (room / surplus[:, lab].sum())).astype(np.int64)
    demand = floor + surplus

    cursor = np.zeros(c, dtype=np.int64)
    indices = []
    for i in range(num_devices):
        if demand[i].sum() < min_samples:
            raise InsufficientSamplesError(
                i, f"labels {label_sets[i]} supply only {int(demand[i].sum())} < {min_samples} samples"
            )
        parts = []
        for lab in label_sets[i]:
            k = int(demand[i, lab])
            parts.append(pools[lab][cursor[lab] : cursor[lab] + k])
            cursor[lab] += k
        indices.append(np.sort(np.concatenate(parts)))
    return PartitionPlan(indices, label_sets)


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(raw: bytes, magic: int, ndims: int, path) -> np.ndarray:
    header = 4 + 4 * ndims
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: header truncated ({len(raw)} bytes)")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise IdxMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: header truncated ({len(raw)} bytes)")
    dims = struct.unpack(f">{ndims}I", raw[4:header])
    count = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) < count:
        raise IdxTruncatedError(f"{path}: payload has {len(payload)} of {count} bytes")
    return np.frombuffer(payload, dtype=np.uint8, count=count).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair into a Dataset with features in [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images.shape[0]} images vs {labels.shape[0]} labels"
        )
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), num_classes)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (m, rows, cols) and labels (m,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


_BIN_MAGIC = b"HFLDSET1"


def write_dataset(path, data: Dataset, fmt: str = "csv") -> None:
    path = Path(path)
    m, d, c = len(data), data.num_features, data.num_classes
    if fmt == "csv":
        lines = [f"{m},{d},{c}"]
        for row, label in zip(data.features, data.labels):
            lines.append(",".join(repr(float(v)) for v in row) + f",{int(label)}")
        path.write_text("\n".join(lines) + "\n", newline="\n")
    elif fmt == "bin":
        rec = np.dtype([("x", "<f8", (d,)), ("y", "<i8")])
        arr = np.zeros(m, dtype=rec)
        arr["x"] = data.features
        arr["y"] = data.labels
        with open(path, "wb") as f:
            f.write(_BIN_MAGIC + struct.pack("<3Q", m, d, c))
            f.write(arr.tobytes())
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")


def read_dataset(path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    if raw.startswith(_BIN_MAGIC):
        m, d, c = struct.unpack("<3Q", raw[8:32])
        rec = np.dtype([("x", "<f8", (d,)), ("y", "<i8")])
        arr = np.frombuffer(raw[32:], dtype=rec, count=m)
        return Dataset(arr["x"].copy(), arr["y"].copy(), int(c))
    lines = raw.decode("utf-8").splitlines()
    m, d, c = (int(v) for v in lines[0].split(","))
    body = np.array([[float(v) for v in ln.split(",")] for ln in lines[1 : 1 + m]]).reshape(m, d + 1)
    return Dataset(body[:, :d], body[:, d].astype(np.int64), c)
