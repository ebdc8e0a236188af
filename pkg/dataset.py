"""
Embedding datasets: one news item per record, with the text and image
embeddings already produced by frozen encoders.

On disk a dataset is a JSON manifest plus a record file. The record file is
either JSON lines (inspectable) or a dense little-endian binary dump:

    header : b"FNRE" | u16 version | u16 reserved | u32 d_in | u32 count
    record : u16 id_len | id (utf-8) | u8 split | u8 label
             | f32 x d_in text | f32 x d_in image

split: 0 = train, 1 = test. label: 0 = real, 1 = fake.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from errors import ContractError, DataError
from fnr_model import REAL, FAKE, CLASS_NAMES, ClassBalance

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")
BINARY_MAGIC = b"FNRE"
BINARY_VERSION = 1
_HEADER = struct.Struct("<4sHHII")


@dataclass
class EmbeddingRecord:
    id: str
    split: str
    label: int
    text_embedding: np.ndarray
    image_embedding: np.ndarray


@dataclass
class DatasetMeta:
    name: str
    d_in: int
    counts: dict = field(default_factory=dict)  # {"train": {"fake": n, "real": n}, "test": {...}}
    text_length: str = ""
    image_shape: tuple = ()

    @property
    def total(self):
        return sum(sum(by_label.values()) for by_label in self.counts.values())

    def count(self, split, label):
        return self.counts.get(split, {}).get(CLASS_NAMES[label], 0)

    def to_dict(self):
        return {
            "name": self.name,
            "d_in": self.d_in,
            "counts": self.counts,
            "text_length": self.text_length,
            "image_shape": list(self.image_shape),
        }


# Published split sizes of the two benchmark corpora
PRESETS = {
    "twitter": DatasetMeta(
        name="twitter",
        d_in=768,
        counts={"train": {"fake": 6649, "real": 4599}, "test": {"fake": 545, "real": 444}},
        text_length="32 words",
        image_shape=(224, 224, 3),
    ),
    "weibo": DatasetMeta(
        name="weibo",
        d_in=768,
        counts={"train": {"fake": 3748, "real": 3758}, "test": {"fake": 999, "real": 995}},
        text_length="200 characters",
        image_shape=(224, 224, 3),
    ),
}


@dataclass
class Batch:
    ids: list
    text: np.ndarray
    image: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.ids)


# ---------------------------------------------------------------------- #
# validation and accounting
# ---------------------------------------------------------------------- #
def _embedding(values, d_in, record_id, which, where):
    if values is None:
        raise DataError(f"{where}: record {record_id!r} has no {which} embedding")
    try:
        vector = np.asarray(values, dtype=np.float32)
    except (TypeError, ValueError):
        raise DataError(f"{where}: record {record_id!r} has a non-numeric {which} embedding") from None
    if vector.ndim != 1 or vector.size == 0:
        raise DataError(f"{where}: record {record_id!r} has a missing or malformed {which} embedding")
    if d_in is not None and vector.size != d_in:
        raise DataError(f"{where}: record {record_id!r} {which} embedding has length {vector.size}, expected {d_in}")
    if not np.isfinite(vector).all():
        raise DataError(f"{where}: record {record_id!r} has a non-finite {which} embedding entry")
    return vector


def validate_record(raw, d_in, where):
    if not isinstance(raw, dict):
        raise DataError(f"{where}: expected an object")
    record_id = raw.get("id")
    if not isinstance(record_id, str) or not record_id:
        raise DataError(f"{where}: record without an id")
    split = raw.get("split")
    if split not in SPLITS:
        raise DataError(f"{where}: record {record_id!r} has split {split!r}, expected train or test")
    label = raw.get("label")
    if isinstance(label, bool) or label not in (REAL, FAKE):
        raise DataError(f"{where}: record {record_id!r} has label {label!r}, expected 0 (real) or 1 (fake)")
    return EmbeddingRecord(
        id=record_id,
        split=split,
        label=int(label),
        text_embedding=_embedding(raw.get("text_embedding"), d_in, record_id, "text", where),
        image_embedding=_embedding(raw.get("image_embedding"), d_in, record_id, "image", where),
    )


def count_records(records):
    """{"train": {"fake": n, "real": n}, "test": {...}} via a split x label crosstab."""
    frame = pd.DataFrame({"split": [r.split for r in records], "label": [CLASS_NAMES[r.label] for r in records]})
    table = pd.crosstab(frame["split"], frame["label"]).reindex(index=list(SPLITS), columns=["fake", "real"], fill_value=0)
    return {split: {label: int(table.loc[split, label]) for label in table.columns} for split in table.index}


def _check_unique(records):
    seen = set()
    for r in records:
        if r.id in seen:
            raise DataError(f"Duplicate record id {r.id!r}")
        seen.add(r.id)


# ---------------------------------------------------------------------- #
# record files
# ---------------------------------------------------------------------- #
def _read_jsonl(path, d_in):
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{where}: malformed record ({e.msg})") from None
            records.append(validate_record(raw, d_in, where))
    return records


def _write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps({
                "id": r.id,
                "split": r.split,
                "label": r.label,
                "text_embedding": [float(x) for x in r.text_embedding],
                "image_embedding": [float(x) for x in r.image_embedding],
            }) + "\n")


def _read_binary(path, d_in):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, _, file_d_in, count = _HEADER.unpack_from(data, 0)
    if magic != BINARY_MAGIC:
        raise DataError(f"{path}: not an embedding record file (magic {magic!r})")
    if version != BINARY_VERSION:
        raise DataError(f"{path}: unsupported record file version {version}")
    if d_in is not None and file_d_in != d_in:
        raise DataError(f"{path}: record file d_in {file_d_in} does not match manifest d_in {d_in}")

    vector_bytes = 4 * file_d_in
    offset = _HEADER.size
    records = []
    for index in range(count):
        where = f"{path}: record {index}"
        try:
            (id_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            record_id = data[offset:offset + id_len].decode("utf-8")
            offset += id_len
            split, label = struct.unpack_from("<BB", data, offset)
            offset += 2
            if offset + 2 * vector_bytes > len(data):
                raise DataError(f"{where}: truncated embeddings")
            text = np.frombuffer(data, dtype="<f4", count=file_d_in, offset=offset)
            image = np.frombuffer(data, dtype="<f4", count=file_d_in, offset=offset + vector_bytes)
            offset += 2 * vector_bytes
        except (struct.error, UnicodeDecodeError) as e:
            raise DataError(f"{where}: malformed record ({e})") from None
        raw = {
            "id": record_id,
            "split": SPLITS[split] if split < len(SPLITS) else split,
            "label": label,
            "text_embedding": text,
            "image_embedding": image,
        }
        records.append(validate_record(raw, file_d_in, where))
    if offset != len(data):
        raise DataError(f"{path}: {len(data) - offset} trailing bytes after {count} records")
    return records


def _write_binary(path, records, d_in):
    with open(path, "wb") as f:
        f.write(_HEADER.pack(BINARY_MAGIC, BINARY_VERSION, 0, d_in, len(records)))
        for r in records:
            encoded = r.id.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", SPLITS.index(r.split), r.label))
            f.write(np.asarray(r.text_embedding, dtype="<f4").tobytes())
            f.write(np.asarray(r.image_embedding, dtype="<f4").tobytes())


# ---------------------------------------------------------------------- #
# public operations
# ---------------------------------------------------------------------- #
def load_dataset(path):
    """Read a manifest and its record file; returns (records, DatasetMeta)."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"Dataset manifest not found: {path}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: malformed manifest ({e.msg})") from None

    try:
        d_in = int(manifest["d_in"])
        fmt = manifest.get("format", "jsonl")
        record_path = path.parent / manifest["records"]
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{path}: manifest is missing {e}") from None

    if not record_path.is_file():
        raise DataError(f"Record file not found: {record_path}")
    if fmt == "jsonl":
        records = _read_jsonl(record_path, d_in)
    elif fmt == "binary":
        records = _read_binary(record_path, d_in)
    else:
        raise DataError(f"{path}: unknown record format {fmt!r}")

    _check_unique(records)
    meta = DatasetMeta(
        name=manifest.get("name", path.stem),
        d_in=d_in,
        counts=count_records(records),
        text_length=manifest.get("text_length", ""),
        image_shape=tuple(manifest.get("image_shape", ())),
    )
    declared = manifest.get("counts")
    if declared is not None:
        for split in SPLITS:
            for label in ("fake", "real"):
                expected = int(declared.get(split, {}).get(label, 0))
                if expected != meta.counts[split][label]:
                    raise DataError(
                        f"{path}: manifest declares {expected} {split}/{label} records, found {meta.counts[split][label]}"
                    )

    logger.info(f"Loaded {len(records)} records from {record_path} (d_in={d_in}, {fmt})")
    return records, meta


def save_dataset(records, meta, path, fmt="jsonl"):
    """Write manifest `path` plus a record file next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt not in ("jsonl", "binary"):
        raise ContractError(f"Unknown record format {fmt!r}")
    _check_unique(records)
    for index, r in enumerate(records):
        validate_record(vars(r), meta.d_in, f"record {index}")

    record_path = path.with_suffix(".jsonl" if fmt == "jsonl" else ".bin")
    if fmt == "jsonl":
        _write_jsonl(record_path, records)
    else:
        _write_binary(record_path, records, meta.d_in)

    manifest = meta.to_dict()
    manifest.update({"format": fmt, "records": record_path.name, "counts": count_records(records)})
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    logger.info(f"Saved {len(records)} records to {record_path}")
    return path


def compute_alpha(labels):
    """alpha = majority count / minority count; ties make fake the minority."""
    labels = np.asarray(labels)
    n_real = int((labels == REAL).sum())
    n_fake = int((labels == FAKE).sum())
    if n_real == 0 or n_fake == 0:
        raise DataError(f"Both classes must be present in train (real={n_real}, fake={n_fake})")
    minority = REAL if n_real < n_fake else FAKE
    return ClassBalance(alpha=max(n_real, n_fake) / min(n_real, n_fake), minority=minority)


def split_by(records, split):
    return [r for r in records if r.split == split]


def split_validation(records, frac, seed):
    """Stratified, seeded train/validation split; both outputs keep input order."""
    if not 0.0 < frac < 0.5:
        raise ContractError(f"validation fraction must be in (0, 0.5), got {frac}")
    rng = np.random.default_rng(seed)
    labels = np.array([r.label for r in records])
    val_index = set()
    for label in (REAL, FAKE):
        members = np.flatnonzero(labels == label)
        if members.size < 2:
            raise DataError(f"Class {CLASS_NAMES[label]} has {members.size} train records; need at least 2")
        n_val = min(max(1, int(round(frac * members.size))), members.size - 1)
        val_index.update(rng.permutation(members)[:n_val].tolist())

    train = [r for i, r in enumerate(records) if i not in val_index]
    val = [r for i, r in enumerate(records) if i in val_index]
    return train, val


def stack(records):
    return Batch(
        ids=[r.id for r in records],
        text=np.stack([r.text_embedding for r in records]),
        image=np.stack([r.image_embedding for r in records]),
        labels=np.array([r.label for r in records], dtype=np.int64),
    )


def make_batches(records, b, seed=0, shuffle=True):
    """
    Fixed-size batches. A final batch of one record is merged into the
    previous batch (the b x b similarity matrix is degenerate at b = 1).
    """
    if b < 2:
        raise ContractError(f"batch size must be >= 2, got {b}")
    if len(records) < 2:
        raise ContractError(f"need at least 2 records to batch, got {len(records)}")

    order = np.random.default_rng(seed).permutation(len(records)) if shuffle else np.arange(len(records))
    chunks = [order[i:i + b] for i in range(0, len(order), b)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return [stack([records[i] for i in chunk]) for chunk in chunks]


# ---------------------------------------------------------------------- #
# synthetic datasets
# ---------------------------------------------------------------------- #
def _assign_splits(labels, rng, test_fraction):
    splits = np.array(["train"] * len(labels), dtype=object)
    for label in (REAL, FAKE):
        members = rng.permutation(np.flatnonzero(labels == label))
        splits[members[:int(round(test_fraction * members.size))]] = "test"
    return splits


def _unit(rng, d):
    u = rng.standard_normal(d)
    return u / np.linalg.norm(u)


def _records(prefix, labels, text, image, splits):
    return [
        EmbeddingRecord(
            id=f"{prefix}-{i:05d}",
            split=str(splits[i]),
            label=int(labels[i]),
            text_embedding=text[i].astype(np.float32),
            image_embedding=image[i].astype(np.float32),
        )
        for i in range(len(labels))
    ]


def gen_synthetic_xor(n, d, seed, mu=1.0, sigma=0.3, test_fraction=0.2):
    """
    Each modality sits at +mu or -mu along its own fixed direction; the label
    is XOR of the two signs, so neither modality alone says anything about it.
    """
    if n < 8 or n % 2:
        raise ContractError(f"n must be even and >= 8, got {n}")
    if d < 2:
        raise ContractError(f"d must be >= 2, got {d}")
    rng = np.random.default_rng(seed)
    u_text, u_image = _unit(rng, d), _unit(rng, d)
    s_text = rng.choice([-1.0, 1.0], size=n)
    s_image = rng.choice([-1.0, 1.0], size=n)
    labels = ((s_text > 0) ^ (s_image > 0)).astype(np.int64)

    text = mu * s_text[:, None] * u_text + sigma * rng.standard_normal((n, d))
    image = mu * s_image[:, None] * u_image + sigma * rng.standard_normal((n, d))
    return _records("xor", labels, text, image, _assign_splits(labels, rng, test_fraction))


def gen_synthetic_clusters(n, d, seed, separation, sigma=1.0, test_fraction=0.2):
    """
    Fake and real items drawn from two unit-variance Gaussian clusters per
    modality whose centres lie `separation` (in units of sigma) apart.
    """
    if n < 8:
        raise ContractError(f"n must be >= 8, got {n}")
    if separation < 0:
        raise ContractError(f"separation must be >= 0, got {separation}")
    rng = np.random.default_rng(seed)
    u_text, u_image = _unit(rng, d), _unit(rng, d)
    labels = rng.permutation(np.arange(n) % 2).astype(np.int64)
    side = np.where(labels == FAKE, 0.5, -0.5) * separation * sigma

    text = side[:, None] * u_text + sigma * rng.standard_normal((n, d))
    image = side[:, None] * u_image + sigma * rng.standard_normal((n, d))
    return _records("clusters", labels, text, image, _assign_splits(labels, rng, test_fraction))


def synthetic_meta(name, records):
    return DatasetMeta(name=name, d_in=records[0].text_embedding.size, counts=count_records(records))
