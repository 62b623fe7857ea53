"""Dataset acquisition and task construction.

Handles the IDX container format of the MNIST family, integrity-checked
mirror downloads, pixel-permutation task views and class-balanced stream
splits. Mirrors and pinned SHA-256 digests (of the decompressed files)
ship as plain-text config under `dataset_config/`; METABNN_MIRROR_FILE may
point at a local file whose mirror prefixes are tried first.

Cache layout: <cache_dir>/<dataset>/<filename> with decompressed files
only. A cached file failing digest verification is renamed aside with a
`.quarantine` suffix and reported, never silently reused.
"""

import gzip
import hashlib
import os
import struct
import urllib.request
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801

DATASET_NAMES = ("mnist", "fmnist")
DATASET_FILES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)

PERM_SALT = 101
STREAM_SALT = 102
BATCH_SALT = 301


class IdxFormatError(ValueError):
    """Malformed IDX payload; `code` is one of bad_magic, truncated,
    dimension_mismatch."""

    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


class FetchError(RuntimeError):
    """Dataset acquisition failed on every configured mirror."""


class DigestMismatchError(FetchError):
    """A file's SHA-256 does not match the pinned digest."""


def parse_idx(raw: bytes) -> np.ndarray:
    """Decode an IDX byte string.

    Image files (magic 0x00000803) come back as uint8 [N, rows*cols];
    label files (magic 0x00000801) as int64 [N].
    """
    if len(raw) < 4:
        raise IdxFormatError("truncated", "shorter than the magic number")
    magic, = struct.unpack(">I", raw[:4])
    if magic == IDX_MAGIC_LABELS:
        ndim = 1
    elif magic == IDX_MAGIC_IMAGES:
        ndim = 3
    else:
        raise IdxFormatError("bad_magic", f"unsupported magic 0x{magic:08x}")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxFormatError("truncated", "header shorter than declared rank")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    expected = int(np.prod(dims))
    payload = len(raw) - header_end
    if payload < expected:
        raise IdxFormatError(
            "truncated",
            f"payload {payload} bytes, dimensions {dims} need {expected}")
    if payload > expected:
        raise IdxFormatError(
            "dimension_mismatch",
            f"payload {payload} bytes exceeds {expected} from dimensions {dims}")
    data = np.frombuffer(raw, dtype=np.uint8, offset=header_end)
    if magic == IDX_MAGIC_LABELS:
        return data.astype(np.int64)
    return data.reshape(dims[0], dims[1] * dims[2]).copy()


def encode_idx(arr: np.ndarray) -> bytes:
    """Inverse of parse_idx for synthetic fixtures and round-trip checks.
    1-D input becomes a label file; 2-D [N, r*c] with square r*c becomes an
    image file."""
    arr = np.asarray(arr)
    if arr.ndim == 1:
        header = struct.pack(">II", IDX_MAGIC_LABELS, arr.shape[0])
        return header + arr.astype(np.uint8).tobytes()
    if arr.ndim == 2:
        side = int(round(np.sqrt(arr.shape[1])))
        if side * side != arr.shape[1]:
            raise ValueError("image rows must flatten a square raster")
        header = struct.pack(">IIII", IDX_MAGIC_IMAGES, arr.shape[0], side, side)
        return header + arr.astype(np.uint8).tobytes()
    raise ValueError(f"cannot encode rank-{arr.ndim} array")


@dataclass(frozen=True)
class LabeledDataset:
    """One split: images scaled into [-1, 1], integer labels 0..9."""
    images: np.ndarray
    labels: np.ndarray
    name: str

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("image/label counts differ")

    def __len__(self):
        return len(self.images)


def scale_pixels(raw_uint8: np.ndarray) -> np.ndarray:
    """Byte v -> v/255*2 - 1, mapping {0, 255} to exactly {-1.0, +1.0}."""
    return (raw_uint8.astype(np.float32) / 255.0) * 2.0 - 1.0


def default_cache_dir() -> Path:
    return Path(os.environ.get("METABNN_CACHE",
                               Path.home() / ".cache" / "metabnn"))


def _config_lines(filename):
    text = resources.files("metabnn").joinpath("dataset_config", filename) \
        .read_text(encoding="utf-8")
    return [ln.strip() for ln in text.splitlines()
            if ln.strip() and not ln.startswith("#")]


def dataset_digests(name) -> dict:
    """Pinned SHA-256 digests of the decompressed files."""
    pairs = (ln.split() for ln in _config_lines(f"{name}.sha256"))
    return {fn: digest for fn, digest in pairs}


def dataset_mirrors(name) -> list:
    """Mirror URL prefixes, METABNN_MIRROR_FILE entries first."""
    mirrors = []
    env_file = os.environ.get("METABNN_MIRROR_FILE")
    if env_file:
        with open(env_file, encoding="utf-8") as fh:
            mirrors += [ln.strip() for ln in fh
                        if ln.strip() and not ln.startswith("#")]
    mirrors += _config_lines(f"{name}.mirrors")
    return mirrors


def _default_http_get(url, timeout=120):
    with urllib.request.urlopen(url, timeout=timeout) as response:
        return response.read()


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def fetch_dataset(name, cache_dir=None, mirrors=None, digests=None,
                  http_get=None):
    """Ensure the four files of `name` are cached and verified; returns
    their paths.

    Cached files are digest-checked and reused without touching the
    network. Downloads pull `<mirror><filename>.gz` from each mirror in
    order, first success wins; a download whose decompressed digest
    mismatches is refused and the next mirror is tried. A *cached* file
    failing verification is quarantined and raises DigestMismatchError.
    """
    if name not in DATASET_NAMES:
        raise ValueError(f"unknown dataset {name!r}; expected one of {DATASET_NAMES}")
    cache_dir = Path(cache_dir) if cache_dir else default_cache_dir()
    mirrors = dataset_mirrors(name) if mirrors is None else list(mirrors)
    digests = dataset_digests(name) if digests is None else dict(digests)
    http_get = http_get or _default_http_get

    target_dir = cache_dir / name
    target_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for filename in DATASET_FILES:
        want = digests[filename]
        path = target_dir / filename
        if path.exists():
            have = _sha256(path.read_bytes())
            if have != want:
                quarantine = path.with_name(path.name + ".quarantine")
                path.replace(quarantine)
                raise DigestMismatchError(
                    f"cached {path} has sha256 {have}, expected {want}; "
                    f"moved to {quarantine}")
            paths.append(path)
            continue
        failures = []
        for mirror in mirrors:
            url = mirror + filename + ".gz"
            try:
                blob = gzip.decompress(http_get(url))
            except Exception as exc:
                failures.append(f"{url}: {exc}")
                continue
            have = _sha256(blob)
            if have != want:
                failures.append(f"{url}: sha256 {have} != pinned {want}")
                continue
            path.write_bytes(blob)
            paths.append(path)
            break
        else:
            raise FetchError(
                f"could not fetch {filename} for {name}; attempts:\n  "
                + "\n  ".join(failures or ["no mirrors configured"]))
    return paths


def load_split(name, split, cache_dir=None) -> LabeledDataset:
    """Load 'train' or 'test' from the cache (fetch_dataset must have run)."""
    prefix = {"train": "train", "test": "t10k"}[split]
    cache_dir = Path(cache_dir) if cache_dir else default_cache_dir()
    images_raw = (cache_dir / name / f"{prefix}-images-idx3-ubyte").read_bytes()
    labels_raw = (cache_dir / name / f"{prefix}-labels-idx1-ubyte").read_bytes()
    return LabeledDataset(images=scale_pixels(parse_idx(images_raw)),
                          labels=parse_idx(labels_raw), name=name)


def load_dataset(name, cache_dir=None):
    """(train, test) splits of a cached dataset."""
    return load_split(name, "train", cache_dir), load_split(name, "test", cache_dir)


@dataclass(frozen=True)
class TaskView:
    """A dataset seen through a fixed pixel permutation."""
    base: LabeledDataset
    perm: np.ndarray     # bijection on pixel indices
    task_index: int

    @property
    def labels(self):
        return self.base.labels

    def permuted(self, indices=None) -> np.ndarray:
        """Images (optionally a row subset) with the permutation applied."""
        images = self.base.images if indices is None else self.base.images[indices]
        return images[:, self.perm]


def make_permuted_task(dataset, master_seed, task_index) -> TaskView:
    """Task 0 is the unpermuted dataset; task k >= 1 shuffles the pixel
    indices with a generator seeded by (master_seed, k), so any task can be
    rebuilt independently of the others."""
    if task_index < 0:
        raise ValueError("task_index must be >= 0")
    n_pixels = dataset.images.shape[1]
    if task_index == 0:
        perm = np.arange(n_pixels)
    else:
        rng = np.random.default_rng([master_seed, PERM_SALT, task_index])
        perm = rng.permutation(n_pixels)
    return TaskView(base=dataset, perm=perm, task_index=task_index)


@dataclass(frozen=True)
class StreamSplit:
    """Disjoint index subsets covering a dataset, class-balanced to within
    one example per class."""
    subsets: tuple
    k: int


def make_stream_splits(dataset, k, seed) -> StreamSplit:
    """Deal each class's (shuffled) indices round-robin into k subsets."""
    if k < 1:
        raise ValueError("k must be >= 1")
    labels = dataset.labels
    classes = np.unique(labels)
    min_count = min(int((labels == c).sum()) for c in classes)
    if k > min_count:
        raise ValueError(
            f"k={k} exceeds the smallest class count {min_count}")
    rng = np.random.default_rng([seed, STREAM_SALT])
    per_subset = [[] for _ in range(k)]
    for c in classes:
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        for j in range(k):
            per_subset[j].append(idx[j::k])
    subsets = tuple(np.sort(np.concatenate(parts)) for parts in per_subset)
    return StreamSplit(subsets=subsets, k=k)


def minibatch_indices(n, batch_size, rng):
    """Shuffled minibatch index arrays covering 0..n-1 (last one may be
    short)."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def epoch_rng(seed, task_index, epoch):
    """Deterministic per-epoch generator for minibatch order, independent
    of training method and of any other random stream."""
    return np.random.default_rng([seed, BATCH_SALT, task_index, epoch])
