"""Text checkpoints with exact hex-encoded float64 blocks and a sha256 trailer.

Layout::

    EGCKPT1
    role <G1|G2|D>
    arch <json>
    config <json>
    meta <json>
    block <name> <d1,d2,...> <hex of little-endian float64 values>
    ...
    digest <sha256 of every preceding byte>
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptionError, RoleError, VersionError
from .layers import Module
from .ranker import MatchingModel
from .seq2seq import Seq2SeqModel

MAGIC = "EGCKPT1"
ROLES = ("G1", "G2", "D")


@dataclass
class Checkpoint:
    role: str
    arch: dict
    params: dict[str, np.ndarray]
    config: dict | None = None
    meta: dict = field(default_factory=dict)
    extra: dict[str, np.ndarray] = field(default_factory=dict)

    def build_model(self) -> Module:
        model = Seq2SeqModel(**self.arch) if self.role == "G1" else MatchingModel(**self.arch)
        model.load_state_dict(self.params)
        return model


def _block(name: str, arr: np.ndarray) -> str:
    if any(c.isspace() for c in name):
        raise ValueError(f"block name {name!r} contains whitespace")
    arr = np.asarray(arr, dtype=np.float64)
    shape = ",".join(str(d) for d in arr.shape) or "-"
    return f"block {name} {shape} {arr.astype('<f8').tobytes().hex()}\n"


def checkpoint_save(model: Module, role: str, path, config: dict | None = None,
                    meta: dict | None = None, extra: dict | None = None) -> None:
    """Write ``model`` under ``role``; ``extra`` blocks carry optimizer moments and the like."""
    if role not in ROLES:
        raise RoleError(f"unknown role {role!r}")
    head = [MAGIC + "\n", f"role {role}\n",
            f"arch {json.dumps(model.arch, sort_keys=True)}\n",
            f"config {json.dumps(config, sort_keys=True)}\n",
            f"meta {json.dumps(meta or {}, sort_keys=True)}\n"]
    body = [_block(k, v.data) for k, v in model.params.items()]
    body += [_block("extra." + k, v) for k, v in (extra or {}).items()]
    text = "".join(head + body)
    digest = hashlib.sha256(text.encode("ascii")).hexdigest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text + f"digest {digest}\n", encoding="ascii")
    tmp.replace(path)


def read_checkpoint(path, role: str | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError:
        raise CorruptionError(f"{path}: not a text checkpoint") from None
    first = text.split("\n", 1)[0]
    if not first.startswith("EGCKPT"):
        raise CorruptionError(f"{path}: missing checkpoint magic")
    if first != MAGIC:
        raise VersionError(f"{path}: unsupported checkpoint version {first!r}")
    body, sep, trailer = text.rstrip("\n").rpartition("\ndigest ")
    if not sep or hashlib.sha256((body + "\n").encode("ascii")).hexdigest() != trailer.strip():
        raise CorruptionError(f"{path}: digest mismatch (truncated or modified)")
    lines = body.split("\n")[1:]
    try:
        found_role = lines[0].split(" ", 1)[1]
        arch = json.loads(lines[1].split(" ", 1)[1])
        config = json.loads(lines[2].split(" ", 1)[1])
        meta = json.loads(lines[3].split(" ", 1)[1])
        params, extra = {}, {}
        for line in lines[4:]:
            tag, name, shape, hexdata = line.split(" ")
            if tag != "block":
                raise ValueError(line[:40])
            dims = () if shape == "-" else tuple(int(d) for d in shape.split(","))
            arr = np.frombuffer(bytes.fromhex(hexdata), dtype="<f8").astype(np.float64)
            arr = arr.reshape(dims)
            if name.startswith("extra."):
                extra[name[len("extra."):]] = arr
            else:
                params[name] = arr
    except (IndexError, ValueError) as exc:
        raise CorruptionError(f"{path}: malformed checkpoint ({exc})") from None
    if role is not None and found_role != role:
        raise RoleError(f"{path}: holds a {found_role} model, expected {role}")
    return Checkpoint(found_role, arch, params, config, meta, extra)


def checkpoint_load(path, role: str | None = None) -> Module:
    """Load and rebuild the model; ``role`` (if given) must match the stored role."""
    return read_checkpoint(path, role).build_model()
