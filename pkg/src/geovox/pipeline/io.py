"""Binary volume files, checkpoint archives and the dataset manifest."""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DataError, ShapeError

MAGIC = b"GVL1"
VERSION = 1
HEADER = struct.Struct("<4sHB3I")

CATEGORICAL, CONDITION, CONTINUOUS, FIELDMAP = 0, 1, 2, 3
_DTYPES = {CATEGORICAL: np.dtype("<u1"), CONDITION: np.dtype("<i1"), CONTINUOUS: np.dtype("<f4"),
           FIELDMAP: np.dtype("<f4")}


def atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _read(path: Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError as e:
        raise DataError(f"missing file: {path}") from e


# -- volume files ------------------------------------------------------------

def encode_volume(arr: np.ndarray, kind: int) -> bytes:
    """Serialize a volume; kind 2 takes [K,X,Y,Z] and records only the spatial dims."""
    if kind not in _DTYPES:
        raise ConfigError(f"unknown volume kind {kind}")
    arr = np.asarray(arr)
    if kind == CONTINUOUS:
        if arr.ndim != 4:
            raise ShapeError(f"continuous volume must be [K,X,Y,Z], got {arr.shape}")
        dims = arr.shape[1:]
    else:
        if arr.ndim != 3:
            raise ShapeError(f"volume must be 3-D, got {arr.shape}")
        dims = arr.shape
    if kind in (CATEGORICAL, CONDITION) and arr.dtype.kind not in "iu":
        raise DataError(f"kind {kind} needs integer labels, got {arr.dtype}")
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
    return HEADER.pack(MAGIC, VERSION, kind, *dims) + payload


def decode_volume(data: bytes) -> tuple[np.ndarray, int]:
    if len(data) < HEADER.size:
        raise DataError("truncated volume header")
    magic, version, kind, *dims = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DataError(f"bad magic {magic!r}")
    if version != VERSION:
        raise DataError(f"unsupported volume version {version}")
    if kind not in _DTYPES:
        raise DataError(f"unknown volume kind {kind}")
    dt = _DTYPES[kind]
    payload = data[HEADER.size:]
    n = int(np.prod(dims))
    if kind == CONTINUOUS:
        if n == 0 or len(payload) % (n * dt.itemsize):
            raise DataError("continuous payload is not a whole number of channels")
        shape = (len(payload) // (n * dt.itemsize),) + tuple(dims)
    else:
        if len(payload) != n * dt.itemsize:
            raise DataError(f"payload has {len(payload)} bytes, expected {n * dt.itemsize}")
        shape = tuple(dims)
    return np.frombuffer(payload, dtype=dt).reshape(shape).copy(), kind


def write_volume(path, arr: np.ndarray, kind: int) -> None:
    atomic_write(Path(path), encode_volume(arr, kind))


def read_volume(path, expect_kind: int | None = None) -> np.ndarray:
    arr, kind = decode_volume(_read(path))
    if expect_kind is not None and kind != expect_kind:
        raise DataError(f"{path}: volume kind {kind}, expected {expect_kind}")
    return arr


# -- checkpoints ---------------------------------------------------------------

CKPT_MAGIC = b"GVCK"


def encode_checkpoint(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    """Named little-endian float32 tensors with shape headers, then a JSON meta blob."""
    parts = [CKPT_MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise DataError(f"checkpoint tensor {name!r} must be float32, got {arr.dtype}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)) + blob)
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    try:
        if data[:4] != CKPT_MAGIC:
            raise DataError("not a checkpoint archive")
        version, n = struct.unpack_from("<HI", data, 4)
        if version != VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        off = 10
        out = {}
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + ln].decode("utf-8")
            off += ln
            (nd,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{nd}I", data, off)
            off += 4 * nd
            size = int(np.prod(shape)) * 4
            if off + size > len(data):
                raise DataError("truncated checkpoint payload")
            out[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=off).reshape(shape).copy()
            off += size
        (ln,) = struct.unpack_from("<I", data, off)
        meta = json.loads(data[off + 4:off + 4 + ln].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"corrupt checkpoint: {e}") from e
    return out, meta


def write_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    atomic_write(Path(path), encode_checkpoint(tensors, meta))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_checkpoint(_read(path))


# -- json ----------------------------------------------------------------------

def write_json(path, obj) -> None:
    atomic_write(Path(path), (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def read_json(path):
    try:
        return json.loads(_read(path).decode("utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON: {e}") from e


# -- manifest --------------------------------------------------------------------

SPLITS = ("train", "val", "ood")
MODALITIES = ("truth", "condition", "gravity", "magnetics")


@dataclass
class CaseEntry:
    case_id: str
    split: str
    seed: int
    files: dict[str, str] = field(default_factory=dict)  # modality -> path relative to the run dir
    boreholes: list[list[int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"case_id": self.case_id, "split": self.split, "seed": self.seed, "files": dict(self.files),
                "boreholes": [list(b) for b in self.boreholes]}


@dataclass
class Manifest:
    cases: list[CaseEntry]
    grid: tuple[int, int, int]
    root: Path = Path(".")

    def __post_init__(self):
        ids = [c.case_id for c in self.cases]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate case ids in manifest")
        for c in self.cases:
            if c.split not in SPLITS:
                raise DataError(f"case {c.case_id}: unknown split {c.split!r}")

    def split(self, name: str) -> list[CaseEntry]:
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [c for c in self.cases if c.split == name]

    def counts(self) -> dict[str, int]:
        return {s: len(self.split(s)) for s in SPLITS}

    def path(self, case: CaseEntry, modality: str) -> Path:
        if modality not in case.files:
            raise DataError(f"case {case.case_id} has no {modality} file")
        return self.root / case.files[modality]

    def to_dict(self) -> dict:
        return {"grid": list(self.grid), "cases": [c.to_dict() for c in self.cases]}

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path, check_files: bool = True) -> "Manifest":
        path = Path(path)
        d = read_json(path)
        try:
            cases = [CaseEntry(c["case_id"], c["split"], int(c["seed"]), dict(c["files"]),
                               [list(b) for b in c.get("boreholes", [])]) for c in d["cases"]]
            m = cls(cases, tuple(d["grid"]), path.parent)
        except (KeyError, TypeError) as e:
            raise DataError(f"{path}: malformed manifest: {e}") from e
        if check_files:
            for c in m.cases:
                for mod in c.files:
                    if not m.path(c, mod).is_file():
                        raise DataError(f"case {c.case_id}: missing {mod} file {c.files[mod]}")
        return m

