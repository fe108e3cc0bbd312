"""
Bundle serialization for FactorSets and datasets
Layout: magic "AOFB", uint32 version, uint32 header length, UTF-8 JSON
header, then every entry's payload as little-endian float64 in C order.
"""

import json
import struct
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from aofusion.model.spec import DecompositionFactors, DecompositionKind, FactorSet, ModelSpec
from aofusion.tensor.containers import Dataset, RaggedTensor

MAGIC = b"AOFB"
BUNDLE_VERSION = 1
TRACE_VERSION = 1

_PREAMBLE = struct.Struct("<4sII")
_DTYPE = np.dtype("<f8")


class BundleFormatError(ValueError):
    """Raised when a bundle file is malformed or holds the wrong kind of content"""
    pass


class Bundle:
    """Named float64 arrays plus JSON metadata"""

    def __init__(self, kind: str, metadata: Optional[dict] = None):
        self.kind = kind
        self.metadata = metadata or {}
        self.entries: Dict[str, np.ndarray] = {}

    def add(self, name: str, array: np.ndarray):
        if name in self.entries:
            raise BundleFormatError(f"duplicate entry '{name}'")
        self.entries[name] = np.ascontiguousarray(array, dtype=_DTYPE)

    def __getitem__(self, name: str) -> np.ndarray:
        if name not in self.entries:
            raise BundleFormatError(f"bundle has no entry '{name}'")
        return self.entries[name]

    def write(self, path):
        header = {
            "kind": self.kind,
            "metadata": self.metadata,
            "entries": [{"name": name, "shape": list(a.shape)} for name, a in self.entries.items()],
        }
        encoded = json.dumps(header).encode("utf-8")
        with open(path, "wb") as f:
            f.write(_PREAMBLE.pack(MAGIC, BUNDLE_VERSION, len(encoded)))
            f.write(encoded)
            for array in self.entries.values():
                f.write(array.tobytes(order="C"))

    @classmethod
    def read(cls, path, expected_kind: Optional[str] = None) -> "Bundle":
        raw = Path(path).read_bytes()
        if len(raw) < _PREAMBLE.size:
            raise BundleFormatError(f"{path}: file too short for a bundle")
        magic, version, header_length = _PREAMBLE.unpack_from(raw)
        if magic != MAGIC:
            raise BundleFormatError(f"{path}: not a bundle file (magic {magic!r})")
        if version != BUNDLE_VERSION:
            raise BundleFormatError(f"{path}: unsupported bundle version {version}")
        offset = _PREAMBLE.size
        try:
            header = json.loads(raw[offset:offset + header_length].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise BundleFormatError(f"{path}: corrupt header: {e}") from e
        if expected_kind is not None and header.get("kind") != expected_kind:
            raise BundleFormatError(f"{path}: expected a '{expected_kind}' bundle, got '{header.get('kind')}'")

        bundle = cls(header["kind"], header.get("metadata", {}))
        offset += header_length
        for entry in header["entries"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64))
            end = offset + count * _DTYPE.itemsize
            if end > len(raw):
                raise BundleFormatError(f"{path}: payload truncated in entry '{entry['name']}'")
            bundle.add(entry["name"], np.frombuffer(raw, dtype=_DTYPE, count=count, offset=offset).reshape(shape).copy())
            offset = end
        if offset != len(raw):
            raise BundleFormatError(f"{path}: {len(raw) - offset} trailing bytes after the payload")
        return bundle


def _names(count: int, names: Optional[Sequence[str]]) -> List[str]:
    names = list(names) if names is not None else [f"X{d}" for d in range(count)]
    if len(names) != count:
        raise BundleFormatError(f"{len(names)} names for {count} items")
    return names


def write_factors(path, factors: FactorSet, names: Optional[Sequence[str]] = None):
    names = _names(len(factors), names)
    decompositions = []
    bundle = Bundle("factors")
    for name, decomposition in zip(names, factors):
        ragged = []
        for m, factor in enumerate(decomposition):
            if isinstance(factor, list):
                ragged.append(m)
                for k, Bk in enumerate(factor):
                    bundle.add(f"{name}.{m}[{k}]", Bk)
            else:
                bundle.add(f"{name}.{m}", factor)
        decompositions.append({
            "name": name,
            "kind": decomposition.kind.value,
            "n_modes": len(decomposition),
            "ragged_modes": ragged,
            "slices": len(decomposition[ragged[0]]) if ragged else 0,
        })
    bundle.metadata["decompositions"] = decompositions
    bundle.write(path)


def read_factors(path) -> Tuple[FactorSet, List[str]]:
    bundle = Bundle.read(path, expected_kind="factors")
    decompositions = []
    names = []
    for meta in bundle.metadata.get("decompositions", []):
        name = meta["name"]
        factors = []
        for m in range(meta["n_modes"]):
            if m in meta["ragged_modes"]:
                factors.append([bundle[f"{name}.{m}[{k}]"] for k in range(meta["slices"])])
            else:
                factors.append(bundle[f"{name}.{m}"])
        decompositions.append(DecompositionFactors(DecompositionKind(meta["kind"]), factors))
        names.append(name)
    return FactorSet(decompositions), names


def write_datasets(path, datasets: Sequence[Dataset], names: Optional[Sequence[str]] = None):
    names = _names(len(datasets), names)
    bundle = Bundle("datasets")
    layout = []
    for name, data in zip(names, datasets):
        if isinstance(data, RaggedTensor):
            for k, Xk in enumerate(data):
                bundle.add(f"{name}[{k}]", Xk)
            layout.append({"name": name, "ragged": True, "slices": data.n_slices})
        else:
            bundle.add(name, data)
            layout.append({"name": name, "ragged": False})
    bundle.metadata["datasets"] = layout
    bundle.write(path)


def read_datasets(path) -> Tuple[List[Dataset], List[str]]:
    bundle = Bundle.read(path, expected_kind="datasets")
    datasets: List[Dataset] = []
    names = []
    for meta in bundle.metadata.get("datasets", []):
        name = meta["name"]
        if meta["ragged"]:
            datasets.append(RaggedTensor([bundle[f"{name}[{k}]"] for k in range(meta["slices"])]))
        else:
            datasets.append(np.array(bundle[name]))
        names.append(name)
    return datasets, names


def trace_frame(model: ModelSpec, records) -> pd.DataFrame:
    frame = pd.DataFrame([record.as_row(model) for record in records])
    frame.insert(0, "trace_version", TRACE_VERSION)
    return frame


def write_trace(path, model: ModelSpec, records):
    trace_frame(model, records).to_csv(path, index=False, float_format="%.17g")


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def write_json(path, data: dict):
    with open(path, "w") as f:
        json.dump(_jsonable(data), f, indent=2)
        f.write("\n")
