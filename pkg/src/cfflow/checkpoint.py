"""Self-describing text checkpoints.

Layout::

    cfflow-checkpoint <version>
    meta <json>
    rng <json bit-generator state>
    config <n lines>
    ...n config lines...
    arrays <k>
    <name> <shape, comma-separated> <little-endian float64 payload as hex>

The hex payload reproduces every array bitwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_config, serialize_config
from .numerics import Mlp

FORMAT_VERSION = 1
MAGIC = "cfflow-checkpoint"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    config: RunConfig
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_net(cls, net: Mlp, config: RunConfig, rng: np.random.Generator | None = None, **meta) -> "Checkpoint":
        arrays = {name: p.data.copy() for name, p in net.named_parameters()}
        state = rng.bit_generator.state if rng is not None else {}
        return cls(arrays, config, state, dict(meta))

    def build_net(self) -> Mlp:
        net = make_net(self.config)
        net.load_arrays(self.arrays)
        return net


def make_net(cfg: RunConfig, seed=None) -> Mlp:
    t = cfg.task
    return Mlp(t.context_dim, t.horizon, t.action_dim, cfg.train.hidden, seed=cfg.seed if seed is None else seed)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    config_lines = serialize_config(ckpt.config).splitlines()
    lines = [
        f"{MAGIC} {ckpt.version}",
        "meta " + json.dumps(ckpt.meta, sort_keys=True),
        "rng " + json.dumps(ckpt.rng_state, sort_keys=True),
        f"config {len(config_lines)}",
        *config_lines,
        f"arrays {len(ckpt.arrays)}",
    ]
    for name, arr in ckpt.arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"{name} {shape} {arr.tobytes().hex()}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path) -> Checkpoint:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(MAGIC + " "):
        raise CheckpointError(f"{path}: not a {MAGIC} file")
    version = int(lines[0].split()[1])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, this build reads version {FORMAT_VERSION}")
    meta = json.loads(lines[1].partition(" ")[2])
    rng_state = json.loads(lines[2].partition(" ")[2])
    n_cfg = int(lines[3].split()[1])
    config = parse_config("\n".join(lines[4 : 4 + n_cfg]))
    pos = 4 + n_cfg
    n_arrays = int(lines[pos].split()[1])
    arrays = {}
    for line in lines[pos + 1 : pos + 1 + n_arrays]:
        name, shape_text, payload = line.split(" ")
        shape = tuple(int(s) for s in shape_text.split(",") if s)
        arrays[name] = np.frombuffer(bytes.fromhex(payload), dtype="<f8").reshape(shape).astype(np.float64)
    if len(arrays) != n_arrays:
        raise CheckpointError(f"{path}: expected {n_arrays} arrays, found {len(arrays)}")
    return Checkpoint(arrays, config, rng_state, meta, version)


def restore_rng(ckpt: Checkpoint) -> np.random.Generator:
    rng = np.random.default_rng()
    if ckpt.rng_state:
        rng.bit_generator.state = ckpt.rng_state
    return rng
