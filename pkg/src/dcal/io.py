"""Checkpoints, training-state files, config files, metrics and attention maps.

Binary container (little-endian throughout)::

    b"DCAL" | u32 version | u32 tensor_count
    per tensor: u16 name_len | name (UTF-8) | u8 rank | u64 dims[rank] | f32 payload
    u32 text_len | text (UTF-8)

For checkpoints the trailing text is the model config as ``key=value`` lines.
Training-state files reuse the container with a different magic and a JSON
text block.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SyntheticSpec
from .model import ConfigError, DcalConfig, DcalParams
from .pnm import write_pnm
from .rollout import RolloutMap, cls_response, rollout, select_local_queries
from .tensor import ShapeError, Tensor
from .training import EpochMetrics, TrainHyper, TrainState

MAGIC = b"DCAL"
STATE_MAGIC = b"DCTS"
VERSION = 1
METRICS_FILE = "metrics.tsv"


class CheckpointError(Exception):
    code = 10


class BadMagicError(CheckpointError):
    code = 11


class VersionError(CheckpointError):
    code = 12


class TruncatedError(CheckpointError):
    code = 13


class ShapeMismatchError(CheckpointError, ShapeError):
    code = 14


# ---------------------------------------------------------------------------
# binary container


def _encode(magic: bytes, tensors: dict[str, np.ndarray], text: str) -> bytes:
    out = [magic, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = text.encode("utf-8")
    out.append(struct.pack("<I", len(body)) + body)
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"truncated payload: file ends inside {what}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _decode(buf: bytes, magic: bytes) -> tuple[dict[str, np.ndarray], str]:
    r = _Reader(buf)
    if buf[:4] != magic:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {magic!r}")
    r.pos = 4
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise VersionError(f"unsupported version {version} (this build reads {VERSION})")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        (n,) = r.unpack("<H", f"name length of tensor #{i}")
        name = r.take(n, f"name of tensor #{i}").decode("utf-8")
        (rank,) = r.unpack("<B", f"tensor '{name}'")
        dims = r.unpack(f"<{rank}Q", f"tensor '{name}'")
        size = int(np.prod(dims, dtype=np.int64))
        payload = r.take(4 * size, f"tensor '{name}'")
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    (n,) = r.unpack("<I", "config block")
    text = r.take(n, "config block").decode("utf-8")
    return tensors, text


# ---------------------------------------------------------------------------
# key = value config text


def _parse_value(raw: str, current):
    if raw == "None":
        return None
    if isinstance(current, bool):
        if raw not in ("true", "false"):
            raise ValueError(raw)
        return raw == "true"
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_lines(text: str, source: str) -> dict[str, tuple[int, str]]:
    entries: dict[str, tuple[int, str]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in entries:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        entries[key] = (lineno, value)
    return entries


def _fill(obj, entries: dict[str, tuple[int, str]], source: str, used: set[str]):
    values = {}
    for f in dataclasses.fields(obj):
        if f.name in entries:
            lineno, raw = entries[f.name]
            try:
                values[f.name] = _parse_value(raw, getattr(obj, f.name))
            except ValueError:
                raise ConfigError(f"{source}:{lineno}: bad value {raw!r} for {f.name}") from None
            used.add(f.name)
        elif f.default is None:
            values[f.name] = None  # derived field: let __post_init__ recompute it
    return dataclasses.replace(obj, **values)


def model_config_text(cfg: DcalConfig) -> str:
    return "".join(f"{f.name}={_format_value(getattr(cfg, f.name))}\n" for f in dataclasses.fields(cfg))


def parse_model_config(text: str, source: str = "<config>") -> DcalConfig:
    entries = _parse_lines(text, source)
    used: set[str] = set()
    cfg = _fill(DcalConfig(), entries, source, used)
    unknown = sorted(set(entries) - used)
    if unknown:
        raise ConfigError(f"{source}: unknown keys {unknown}")
    return cfg.validate()


@dataclass
class RunConfig:
    """Everything a config file can set. Keys shared by the model and the
    data generator (image size, patch size, class count) set both."""

    model: DcalConfig = field(default_factory=DcalConfig)
    hyper: TrainHyper = field(default_factory=TrainHyper)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    entries = _parse_lines(text, source)
    used: set[str] = set()
    model = _fill(DcalConfig(), entries, source, used)
    hyper = _fill(TrainHyper(), entries, source, used)
    data = _fill(SyntheticSpec(), entries, source, used)
    unknown = sorted(set(entries) - used)
    if unknown:
        raise ConfigError(f"{source}: unknown keys {unknown}")
    return RunConfig(model.validate(), hyper, data)


def serialize_config(run: RunConfig) -> str:
    lines, seen = [], set()
    for section, obj in (("model", run.model), ("training", run.hyper), ("data", run.data)):
        lines.append(f"# {section}")
        for f in dataclasses.fields(obj):
            if f.name in seen:
                continue
            seen.add(f.name)
            lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), str(path))


# ---------------------------------------------------------------------------
# checkpoints


def _params_from_arrays(cfg: DcalConfig, arrays: dict[str, np.ndarray]) -> DcalParams:
    try:
        return DcalParams.from_named(cfg, {k: Tensor(v, requires_grad=True) for k, v in arrays.items()})
    except ShapeError as exc:
        raise ShapeMismatchError(str(exc)) from None


def save_checkpoint(path, params: DcalParams, cfg: DcalConfig) -> None:
    arrays = {k: t.data for k, t in params.named().items()}
    Path(path).write_bytes(_encode(MAGIC, arrays, model_config_text(cfg)))


def load_checkpoint(path) -> tuple[DcalParams, DcalConfig]:
    arrays, text = _decode(Path(path).read_bytes(), MAGIC)
    cfg = parse_model_config(text, f"{path} (config block)")
    return _params_from_arrays(cfg, arrays), cfg


# ---------------------------------------------------------------------------
# training state (resume)


def save_train_state(path, state: TrainState, cfg: DcalConfig) -> None:
    arrays = {f"param.{k}": t.data for k, t in state.params.named().items()}
    arrays.update({f"opt.{k}": v for k, v in state.opt_state.items()})
    meta = {
        "config": model_config_text(cfg),
        "opt_step": state.opt_step,
        "epoch": state.epoch,
        "seed": state.seed,
        "history": [m.as_row() for m in state.history],
    }
    Path(path).write_bytes(_encode(STATE_MAGIC, arrays, json.dumps(meta)))


def load_train_state(path) -> tuple[TrainState, DcalConfig]:
    arrays, text = _decode(Path(path).read_bytes(), STATE_MAGIC)
    meta = json.loads(text)
    cfg = parse_model_config(meta["config"], f"{path} (config block)")
    params = _params_from_arrays(
        cfg, {k[len("param.") :]: v for k, v in arrays.items() if k.startswith("param.")}
    )
    opt_state = {k[len("opt.") :]: v.copy() for k, v in arrays.items() if k.startswith("opt.")}
    state = TrainState(
        params=params,
        opt_state=opt_state,
        opt_step=meta["opt_step"],
        epoch=meta["epoch"],
        seed=meta["seed"],
        history=[EpochMetrics.from_row(row) for row in meta["history"]],
    )
    return state, cfg


# ---------------------------------------------------------------------------
# metrics.tsv


def write_metrics(path, history: list[EpochMetrics]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(EpochMetrics.COLUMNS)
        writer.writerows([_format_value(v) for v in m.as_row()] for m in history)


def read_metrics(path) -> list[EpochMetrics]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows or tuple(rows[0]) != EpochMetrics.COLUMNS:
        raise ValueError(f"{path}: missing or unexpected header")
    return [EpochMetrics.from_row([float(v) for v in row]) for row in rows[1:]]


# ---------------------------------------------------------------------------
# attention maps


@dataclass
class AttentionExport:
    pixels: np.ndarray  # (rows, cols) uint8
    selected: list[tuple[int, int]]  # (row, col) of the top-R patches
    degenerate: bool  # responses were constant; image is all zero


def attention_image(responses: np.ndarray, grid: tuple[int, int]) -> tuple[np.ndarray, bool]:
    """Min-max normalise to [0, 255] on the patch grid; constant input maps
    to all zeros."""
    rows, cols = grid
    r = np.asarray(responses, dtype=np.float64).reshape(-1)
    if r.size != rows * cols:
        raise ShapeError(f"{r.size} responses do not fit a {rows}x{cols} grid")
    lo, hi = r.min(), r.max()
    if hi == lo:
        return np.zeros((rows, cols), np.uint8), True
    scaled = np.floor((r - lo) / (hi - lo) * 255.0 + 0.5)
    return scaled.astype(np.uint8).reshape(rows, cols), False


def export_attention_map(s_hat, grid: tuple[int, int], out_path, ratio: float = 0.25) -> AttentionExport:
    """Write the CLS-row rollout response as a P5 image at grid resolution,
    plus ``<out_path>.txt`` listing the selected patch coordinates.

    ``s_hat`` is a RolloutMap, a single (N+1, N+1) map, or a list of
    per-layer maps to be rolled out first.
    """
    if isinstance(s_hat, (list, tuple)):
        s_hat = rollout(list(s_hat))
    mat = s_hat.s_hat if isinstance(s_hat, RolloutMap) else s_hat
    rows, cols = grid
    mat = np.asarray(getattr(mat, "data", mat))
    if mat.shape[-1] - 1 != rows * cols:
        raise ShapeError(f"map over {mat.shape[-1] - 1} patches does not fit a {rows}x{cols} grid")
    responses = np.asarray(cls_response(mat))
    pixels, degenerate = attention_image(responses, grid)
    sel = select_local_queries(responses, ratio)
    patches = [int(i) - 1 for i in np.asarray(sel.indices)[1:]]
    selected = [(p // cols, p % cols) for p in patches]
    out_path = Path(out_path)
    write_pnm(out_path, pixels[:, :, None].astype(np.float32) / 255.0)
    lines = [f"grid\t{rows}\t{cols}", f"degenerate\t{int(degenerate)}", "rank\trow\tcol\tresponse"]
    lines += [f"{k}\t{r}\t{c}\t{responses[r * cols + c]!r}" for k, (r, c) in enumerate(selected)]
    out_path.with_name(out_path.name + ".txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return AttentionExport(pixels, selected, degenerate)
