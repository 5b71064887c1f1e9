"""Parameter storage and the LFW1 weight file format.

An LFW1 file is a single-line UTF-8 JSON manifest terminated by ``\\n``,
followed by a contiguous blob of little-endian float32 values::

    {"format":"LFW1","config":{...},"tensors":[{"name","shape","offset","length"},...]}\\n<blob>

``offset`` and ``length`` are in bytes relative to the start of the blob.
Tensors are packed back to back in manifest order with no gaps.
"""

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from lfvit.config import ModelConfig
from lfvit.errors import ManifestError

FORMAT_TAG = "LFW1"

BLOCK_PARAMS = (
    "ln1_g", "ln1_b",
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln2_g", "ln2_b",
    "fc1", "fc1_b", "fc2", "fc2_b",
)


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor names and shapes, in file order."""
    d, hidden = cfg.dim, 4 * cfg.dim
    shapes = {
        "patch_proj": (3 * cfg.patch ** 2, d),
        "patch_bias": (d,),
        "cls_token": (d,),
        "pos_embed": (cfg.n_fine + 1, d),
    }
    per_block = {
        "ln1_g": (d,), "ln1_b": (d,),
        "wq": (d, d), "bq": (d,),
        "wk": (d, d), "bk": (d,),
        "wv": (d, d), "bv": (d,),
        "wo": (d, d), "bo": (d,),
        "ln2_g": (d,), "ln2_b": (d,),
        "fc1": (d, hidden), "fc1_b": (hidden,),
        "fc2": (hidden, d), "fc2_b": (d,),
    }
    for i in range(cfg.depth):
        for name in BLOCK_PARAMS:
            shapes[f"blocks.{i}.{name}"] = per_block[name]
    shapes["align_w"] = (d, d)
    shapes["align_b"] = (d,)
    shapes["head_w"] = (d, cfg.classes)
    shapes["head_b"] = (cfg.classes,)
    return shapes


def _fan_in(name: str, cfg: ModelConfig) -> int:
    if name.startswith("patch_"):
        return 3 * cfg.patch ** 2
    if name.endswith(("fc2", "fc2_b")):
        return 4 * cfg.dim
    return cfg.dim


@dataclass(frozen=True)
class WeightStore:
    """Read-only parameter set for one model; safe to share across threads."""

    config: ModelConfig
    tensors: dict

    def __post_init__(self):
        expected = expected_shapes(self.config)
        missing = set(expected) - set(self.tensors)
        extra = set(self.tensors) - set(expected)
        if missing or extra:
            raise ManifestError(
                f"tensor names do not match config: missing={sorted(missing)[:5]} "
                f"extra={sorted(extra)[:5]}"
            )
        frozen = {}
        for name, shape in expected.items():
            arr = np.array(self.tensors[name], dtype=np.float32, order="C")
            if arr.shape != shape:
                raise ManifestError(
                    f"tensor {name!r} has shape {list(arr.shape)}, config expects {list(shape)}"
                )
            arr.flags.writeable = False
            frozen[name] = arr
        object.__setattr__(self, "tensors", frozen)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def block(self, i: int) -> dict[str, np.ndarray]:
        return {name: self.tensors[f"blocks.{i}.{name}"] for name in BLOCK_PARAMS}

    def with_config(self, cfg: ModelConfig) -> "WeightStore":
        """Same parameters under a config that differs only in policy fields."""
        return WeightStore(cfg, self.tensors)

    def replace(self, **updates) -> "WeightStore":
        tensors = dict(self.tensors)
        tensors.update(updates)
        return WeightStore(self.config, tensors)


def init_weights(cfg: ModelConfig, seed: int = 0) -> WeightStore:
    """Deterministic init: uniform in +-1/sqrt(fan_in), layer norms at identity.

    Draws come from ``numpy.random.default_rng(seed)`` (PCG64) in file order,
    so the same (config, seed) always yields the same parameters.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in expected_shapes(cfg).items():
        short = name.rsplit(".", 1)[-1]
        if short in ("ln1_g", "ln2_g"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif short in ("ln1_b", "ln2_b"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            bound = 1.0 / math.sqrt(_fan_in(name, cfg))
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return WeightStore(cfg, tensors)


def to_bytes(store: WeightStore) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, shape in expected_shapes(store.config).items():
        raw = store[name].astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(shape), "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT_TAG, "config": store.config.to_dict(), "tensors": entries}
    header = json.dumps(manifest, separators=(",", ":")).encode("utf-8") + b"\n"
    return header + b"".join(chunks)


def from_bytes(data: bytes) -> WeightStore:
    end = data.find(b"\n")
    if end < 0:
        raise ManifestError("no manifest terminator found")
    try:
        manifest = json.loads(data[:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_TAG:
        raise ManifestError(f"not an {FORMAT_TAG} file")
    cfg = ModelConfig.from_dict(manifest.get("config", {}))
    blob = memoryview(data)[end + 1:]
    entries = manifest.get("tensors")
    if not isinstance(entries, list):
        raise ManifestError("manifest has no tensor list")

    expected = expected_shapes(cfg)
    names = [e.get("name") for e in entries]
    if sorted(names) != sorted(expected) or len(set(names)) != len(names):
        raise ManifestError("manifest tensor names do not match config")

    cursor = 0
    tensors = {}
    for e in sorted(entries, key=lambda e: e["offset"]):
        name, shape = e["name"], tuple(e["shape"])
        if shape != expected[name]:
            raise ManifestError(
                f"tensor {name!r} shape {list(shape)} does not match config {list(expected[name])}"
            )
        nbytes = 4 * math.prod(shape)
        if e["length"] != nbytes:
            raise ManifestError(f"tensor {name!r} length {e['length']} != {nbytes} for its shape")
        if e["offset"] != cursor:
            raise ManifestError(
                f"manifest inconsistency: tensor {name!r} at offset {e['offset']}, expected {cursor}"
            )
        cursor += nbytes
        if cursor > len(blob):
            raise ManifestError(f"blob truncated: tensor {name!r} ends past {len(blob)} bytes")
        tensors[name] = np.frombuffer(blob[e["offset"]:cursor], dtype="<f4").reshape(shape)
    if cursor != len(blob):
        raise ManifestError(f"blob has {len(blob) - cursor} trailing bytes not covered by manifest")
    return WeightStore(cfg, tensors)


def save_weights(store: WeightStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(store))


def load_weights(path) -> WeightStore:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def gen_weights(cfg: ModelConfig, seed: int, path) -> WeightStore:
    store = init_weights(cfg, seed)
    save_weights(store, os.fspath(path))
    return store
