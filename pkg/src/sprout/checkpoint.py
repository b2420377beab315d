"""SPCK binary checkpoints.

Layout (all integers little-endian)::

    b"SPCK" | u32 version | u32 n + n bytes UTF-8 config text | u64 step
    | weights table | ema table | optimizer table

Each table is ``u32 count`` followed by entries of
``u32 name_len, name, u32 rank, rank * u32 dims, float32 values``.
An absent EMA or optimizer table is written with count 0.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from sprout.errors import FormatError
from sprout.imageio import atomic_write_bytes
from sprout.model import UDiTModel, build_model, config_from_text, config_to_text

MAGIC = b"SPCK"
VERSION = 1
TRAIN_PREFIX = "train."


@dataclass
class Checkpoint:
    config_text: str
    step: int
    weights: dict[str, np.ndarray]
    ema: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def model_config_text(self) -> str:
        return "".join(
            ln + "\n" for ln in self.config_text.splitlines() if not ln.strip().startswith(TRAIN_PREFIX)
        )

    @property
    def train_settings(self) -> dict[str, str]:
        out = {}
        for ln in self.config_text.splitlines():
            ln = ln.strip()
            if ln.startswith(TRAIN_PREFIX):
                key, _, value = ln[len(TRAIN_PREFIX) :].partition("=")
                out[key.strip()] = value.strip()
        return out


def _pack_table(table: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(table))]
    for name, arr in table.items():
        arr = np.asarray(arr, dtype="<f4", order="C")  # keeps rank 0, unlike ascontiguousarray
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def encode(ckpt: Checkpoint) -> bytes:
    text = ckpt.config_text.encode("utf-8")
    head = MAGIC + struct.pack("<I", VERSION) + struct.pack("<I", len(text)) + text + struct.pack("<Q", ckpt.step)
    return head + _pack_table(ckpt.weights) + _pack_table(ckpt.ema) + _pack_table(ckpt.optimizer)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, section: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"checkpoint truncated in {section} section (need {n} bytes at offset {self.pos})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, section: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), section))


def _read_table(r: _Reader, section: str) -> dict[str, np.ndarray]:
    (count,) = r.unpack("<I", section)
    table = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I", section)
        try:
            name = r.take(name_len, section).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"checkpoint {section} section: tensor name is not UTF-8") from exc
        (rank,) = r.unpack("<I", section)
        dims = r.unpack(f"<{rank}I", section) if rank else ()
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        values = np.frombuffer(r.take(4 * n, section), dtype="<f4").reshape(dims)
        table[name] = values.astype(np.float32)
    return table


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("not an SPCK checkpoint (bad magic)")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"checkpoint version mismatch: file has {version}, reader supports {VERSION}")
    (text_len,) = r.unpack("<I", "config")
    try:
        text = r.take(text_len, "config").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("checkpoint config section is not UTF-8") from exc
    (step,) = r.unpack("<Q", "step")
    weights = _read_table(r, "weights")
    ema = _read_table(r, "ema")
    optim = _read_table(r, "optimizer")
    if r.pos != len(data):
        raise FormatError(f"checkpoint has {len(data) - r.pos} trailing bytes after optimizer section")
    return Checkpoint(text, step, weights, ema, optim)


def state_table(module_or_state) -> dict[str, np.ndarray]:
    state = module_or_state.state_dict() if hasattr(module_or_state, "state_dict") else module_or_state
    return {k: v.detach().cpu().to(torch.float32).numpy().copy() for k, v in state.items()}


def save_checkpoint(model: UDiTModel, path, step: int = 0, ema=None, optimizer_state=None, train_text: str = "") -> Checkpoint:
    """Atomically write ``model`` (plus optional EMA/optimizer tables) to ``path``."""
    text = config_to_text(model.config)
    for ln in train_text.splitlines():
        if ln.strip():
            text += f"{TRAIN_PREFIX}{ln.strip()}\n"
    ckpt = Checkpoint(
        config_text=text,
        step=int(step),
        weights=state_table(model),
        ema=state_table(ema) if ema is not None else {},
        optimizer=dict(optimizer_state or {}),
    )
    atomic_write_bytes(path, encode(ckpt))
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(data)


def model_from_checkpoint(ckpt: Checkpoint, use_ema: bool = False) -> UDiTModel:
    model = build_model(config_from_text(ckpt.model_config_text), seed=0)
    table = ckpt.ema if use_ema and ckpt.ema else ckpt.weights
    expected = set(model.state_dict())
    if set(table) != expected:
        missing, extra = sorted(expected - set(table)), sorted(set(table) - expected)
        raise FormatError(f"checkpoint weights do not match config (missing {missing[:3]}, unexpected {extra[:3]})")
    state = {}
    for name, ref in model.state_dict().items():
        arr = table[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise FormatError(f"tensor {name} has shape {arr.shape}, config expects {tuple(ref.shape)}")
        state[name] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model.eval()


def load_model(path, use_ema: bool = False) -> UDiTModel:
    return model_from_checkpoint(load_checkpoint(path), use_ema=use_ema)
