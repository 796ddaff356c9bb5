"""File formats: PGM/PPM image codec, ground-truth label decoding, dataset
discovery, the binary checkpoint format, and key=value config parsing.

Checkpoint layout (all little-endian):

    magic "MVFC" | u32 version | u64 fingerprint | u32 entry_count
    entries sorted by (layer_id, role):
        u16 layer_id | u8 role | u8 rank | u32 dims[rank] | payload
    u64 checksum over every preceding byte

Payloads are 32-bit words: IEEE-754 floats for tensors, raw unsigned words
for the rng-position entry (role 6, layer 0). Roles 0-5 are weight, bias,
gamma, beta, running_mean, running_var; role 7 is the optimizer step count
and roles 8+r / 12+r carry the optimizer's first/second moments for the
parameter with role r. The fingerprint hashes the architecture table, so a
checkpoint only loads into a graph with the identical layer layout.
"""

import re
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, DataError
from .rng import STATE_WORDS

MAGIC = b"MVFC"
VERSION = 1

ROLE_WEIGHT = 0
ROLE_BIAS = 1
ROLE_GAMMA = 2
ROLE_BETA = 3
ROLE_RUNNING_MEAN = 4
ROLE_RUNNING_VAR = 5
ROLE_RNG = 6
ROLE_ADAM_STEP = 7
ADAM_M_BASE = 8
ADAM_V_BASE = 12

PARAM_ROLES = {"weight": ROLE_WEIGHT, "bias": ROLE_BIAS,
               "gamma": ROLE_GAMMA, "beta": ROLE_BETA}
ROLE_NAMES = {v: k for k, v in PARAM_ROLES.items()}


def checksum64(data: bytes) -> int:
    """64-bit checksum built from two decorrelated CRC-32 passes."""
    lo = zlib.crc32(data)
    hi = zlib.crc32(data, 0x9E3779B9)
    return lo | (hi << 32)


# ---------------------------------------------------------------------------
# PGM / PPM codec
# ---------------------------------------------------------------------------

def _parse_pnm(data: bytes, path):
    if len(data) < 2 or data[:1] != b"P" or data[1:2] not in (b"5", b"6"):
        raise DataError(f"{path}: not a binary PGM/PPM file")
    channels = 1 if data[1:2] == b"5" else 3
    values = []
    i = 2
    while len(values) < 3:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if i < len(data) and data[i] == ord("#"):
            nl = data.find(b"\n", i)
            i = len(data) if nl < 0 else nl + 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        token = data[i:j]
        if not token.isdigit():
            raise DataError(f"{path}: malformed header token {token!r}")
        values.append(int(token))
        i = j
    if i >= len(data) or not data[i:i + 1].isspace():
        raise DataError(f"{path}: malformed header")
    i += 1
    width, height, maxval = values
    if width < 1 or height < 1:
        raise DataError(f"{path}: empty image {width}x{height}")
    if maxval != 255:
        raise DataError(f"{path}: unsupported bit depth (maxval {maxval}, need 255)")
    need = width * height * channels
    payload = data[i:i + need]
    if len(payload) < need:
        raise DataError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    pixels = np.frombuffer(payload, dtype=np.uint8)
    return channels, height, width, pixels


def load_image(path):
    """Read a binary PGM (P5) or PPM (P6) into a (1, c, h, w) float32 tensor
    scaled to [0, 1]. Interleaved pixels become channel-major planes."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    channels, h, w, pixels = _parse_pnm(data, path)
    planes = pixels.reshape(h, w, channels).transpose(2, 0, 1)
    return (planes.astype(np.float32) / 255.0)[None]


def save_image(array, path):
    """Write a [0, 1]-valued array as 8-bit PGM/PPM; value = round(255 * v).

    Accepts (h, w), (c, h, w), or (1, c, h, w) with c in {1, 3}.
    """
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise DataError(f"cannot encode array of shape {np.asarray(array).shape}")
    c, h, w = arr.shape
    body = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    interleaved = body.transpose(1, 2, 0).tobytes()
    magic = b"P5" if c == 1 else b"P6"
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + interleaved)


def ensure_rgb(tensor):
    """Replicate a single-channel tensor to three channels when needed."""
    if tensor.shape[1] == 3:
        return tensor
    if tensor.shape[1] == 1:
        return np.repeat(tensor, 3, axis=1)
    raise DataError(f"expected 1 or 3 channels, got {tensor.shape[1]}")


# ---------------------------------------------------------------------------
# Ground-truth decoding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GtMapping:
    """Label byte -> class assignment for ground-truth frames.

    Default follows the change-detection convention: 255 foreground, 0 and
    50 (shadow) background, 85/170 excluded from scoring via the roi.
    """

    foreground: tuple[int, ...] = (255,)
    background: tuple[int, ...] = (0, 50)
    exclude: tuple[int, ...] = (85, 170)
    strict: bool = True


def load_gt(path, mapping: GtMapping = GtMapping()):
    """Decode a grayscale ground-truth frame into (mask, roi), both float32
    {0, 1} arrays of shape (h, w)."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    channels, h, w, pixels = _parse_pnm(data, path)
    if channels != 1:
        raise DataError(f"{path}: ground truth must be grayscale (P5)")
    values = pixels.reshape(h, w)
    mask = np.isin(values, mapping.foreground)
    excluded = np.isin(values, mapping.exclude)
    if mapping.strict:
        known = mask | excluded | np.isin(values, mapping.background)
        if not known.all():
            bad = sorted(set(np.unique(values[~known]).tolist()))
            raise DataError(f"{path}: unmapped ground-truth value(s) {bad}")
    return mask.astype(np.float32), (~excluded).astype(np.float32)


# ---------------------------------------------------------------------------
# Dataset discovery
# ---------------------------------------------------------------------------

_NATURE_BY_DIR = {
    "baseline": "baseline",
    "dynamicbackground": "dynamic background",
    "camerajitter": "camera jitter",
    "shadow": "shadow",
    "ptz": "PTZ",
    "lowframerate": "low framerate",
}


@dataclass(frozen=True)
class FramePair:
    index: int
    image_path: Path
    gt_path: Path


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    name: str
    frames: tuple[FramePair, ...]
    roi_path: Path | None = None
    nature: str | None = None

    @property
    def n(self) -> int:
        return len(self.frames)


def _index_files(directory: Path) -> dict[int, Path]:
    indexed = {}
    for entry in sorted(directory.iterdir()):
        if entry.suffix.lower() not in (".pgm", ".ppm"):
            continue
        digits = re.findall(r"\d+", entry.stem)
        if not digits:
            continue
        idx = int(digits[-1])
        if idx in indexed:
            raise DataError(f"duplicate frame index {idx} in {directory}")
        indexed[idx] = entry
    return indexed


def discover_dataset(root, strict: bool = True) -> DatasetManifest:
    """Scan a `<root>/input` + `<root>/groundtruth` tree into an ordered,
    index-aligned manifest.

    Strict mode rejects inputs without ground truth and gaps in the frame
    numbering; lenient mode skips unmatched frames with a warning.
    """
    import logging

    root = Path(root)
    input_dir = root / "input"
    gt_dir = root / "groundtruth"
    if not input_dir.is_dir() or not gt_dir.is_dir():
        raise DataError(f"{root} does not contain input/ and groundtruth/ directories")
    inputs = _index_files(input_dir)
    gts = _index_files(gt_dir)
    if not inputs or not gts:
        raise DataError(f"{root}: empty input/ or groundtruth/ directory")
    orphan_gts = sorted(set(gts) - set(inputs))
    if orphan_gts:
        raise DataError(f"{root}: ground-truth frames {orphan_gts} have no input frame")
    frames = []
    for idx in sorted(inputs):
        if idx not in gts:
            if strict:
                raise DataError(f"{root}: input frame {idx} has no ground truth")
            logging.getLogger(__name__).warning(
                "skipping frame %d of %s: no ground truth", idx, root)
            continue
        frames.append(FramePair(idx, inputs[idx], gts[idx]))
    if not frames:
        raise DataError(f"{root}: no aligned input/ground-truth pairs")
    if strict:
        indices = [f.index for f in frames]
        gaps = [b for a, b in zip(indices, indices[1:]) if b != a + 1]
        if gaps:
            raise DataError(f"{root}: frame numbering has gaps before {gaps}")
    roi = root / "ROI.pgm"
    nature = _NATURE_BY_DIR.get(re.sub(r"[\s_-]", "", root.parent.name).lower())
    return DatasetManifest(root=root, name=root.name, frames=tuple(frames),
                           roi_path=roi if roi.is_file() else None, nature=nature)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class CheckpointPayload:
    """In-memory checkpoint: architecture fingerprint plus one array per
    (layer_id, role) entry."""

    fingerprint: int
    entries: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    def has_optimizer(self) -> bool:
        return (0, ROLE_ADAM_STEP) in self.entries


def snapshot_state(graph, rng=None, adam=None) -> CheckpointPayload:
    """Deep-copy the graph's parameters, batch-norm statistics, the rng
    position, and (optionally) the optimizer moments."""
    payload = CheckpointPayload(fingerprint=graph.fingerprint())
    for lid, name, arr in graph.parameter_items():
        payload.entries[(lid, PARAM_ROLES[name])] = arr.copy()
    for lid, state in graph.bn_states.items():
        payload.entries[(lid, ROLE_RUNNING_MEAN)] = state.running_mean.copy()
        payload.entries[(lid, ROLE_RUNNING_VAR)] = state.running_var.copy()
    if rng is not None:
        payload.entries[(0, ROLE_RNG)] = rng.state_words()
    if adam is not None:
        payload.entries[(0, ROLE_ADAM_STEP)] = np.array([adam.t], dtype=np.float32)
        for (lid, name), m in adam.m.items():
            payload.entries[(lid, ADAM_M_BASE + PARAM_ROLES[name])] = m.copy()
        for (lid, name), v in adam.v.items():
            payload.entries[(lid, ADAM_V_BASE + PARAM_ROLES[name])] = v.copy()
    return payload


def save_checkpoint(path, payload: CheckpointPayload) -> None:
    """Serialize a payload; identical payloads produce byte-identical files."""
    chunks = [MAGIC, struct.pack("<IQ", VERSION, payload.fingerprint),
              struct.pack("<I", len(payload.entries))]
    for (lid, role) in sorted(payload.entries):
        arr = payload.entries[(lid, role)]
        dims = arr.shape if arr.ndim else (1,)
        chunks.append(struct.pack("<HBB", lid, role, len(dims)))
        chunks.append(struct.pack(f"<{len(dims)}I", *dims))
        if role == ROLE_RNG:
            chunks.append(np.ascontiguousarray(arr, dtype="<u4").tobytes())
        else:
            chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(chunks)
    Path(path).write_bytes(body + struct.pack("<Q", checksum64(body)))


def load_checkpoint(path, graph=None) -> CheckpointPayload:
    """Parse and validate a checkpoint file.

    When ``graph`` is given, the architecture fingerprint and every tensor
    shape are checked against it before anything is returned.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if len(data) < len(MAGIC) + 4 + 8 + 4 + 8:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    if checksum64(data[:-8]) != struct.unpack("<Q", data[-8:])[0]:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    version, fingerprint = struct.unpack_from("<IQ", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unknown format version {version}")
    (count,) = struct.unpack_from("<I", data, 16)
    payload = CheckpointPayload(fingerprint=fingerprint)
    offset = 20
    end = len(data) - 8
    for _ in range(count):
        if offset + 4 > end:
            raise CheckpointError(f"{path}: truncated entry table")
        lid, role, rank = struct.unpack_from("<HBB", data, offset)
        offset += 4
        if offset + 4 * rank > end:
            raise CheckpointError(f"{path}: truncated entry dims")
        dims = struct.unpack_from(f"<{rank}I", data, offset)
        offset += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        if offset + 4 * size > end:
            raise CheckpointError(f"{path}: truncated entry payload")
        raw = data[offset:offset + 4 * size]
        offset += 4 * size
        dtype = "<u4" if role == ROLE_RNG else "<f4"
        payload.entries[(lid, role)] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    if offset != end:
        raise CheckpointError(f"{path}: {end - offset} stray bytes after entries")
    if graph is not None:
        validate_payload(graph, payload, source=str(path))
    return payload


def validate_payload(graph, payload: CheckpointPayload, source="checkpoint"):
    """Refuse anything but an exact architecture and shape match."""
    if payload.fingerprint != graph.fingerprint():
        raise CheckpointError(
            f"{source}: architecture fingerprint {payload.fingerprint:#018x} does "
            f"not match the graph ({graph.fingerprint():#018x})"
        )
    expected = {}
    for lid, name, arr in graph.parameter_items():
        expected[(lid, PARAM_ROLES[name])] = (name, arr.shape)
    for lid, state in graph.bn_states.items():
        expected[(lid, ROLE_RUNNING_MEAN)] = ("running_mean", state.running_mean.shape)
        expected[(lid, ROLE_RUNNING_VAR)] = ("running_var", state.running_var.shape)
    for key, (name, shape) in expected.items():
        lid, role = key
        if key not in payload.entries:
            raise CheckpointError(f"{source}: missing {name} for layer {lid}")
        got = payload.entries[key].shape
        if tuple(got) != tuple(shape):
            raise CheckpointError(
                f"{source}: layer {lid} {name} shaped {tuple(got)}, graph has {tuple(shape)}"
            )
    rng_entry = payload.entries.get((0, ROLE_RNG))
    if rng_entry is not None and rng_entry.size != STATE_WORDS:
        raise CheckpointError(f"{source}: rng entry must hold {STATE_WORDS} words")


def apply_state(graph, payload: CheckpointPayload, rng=None, adam=None) -> None:
    """Copy a validated payload into the graph (and optionally restore the
    rng position and optimizer moments)."""
    validate_payload(graph, payload)
    for lid, name, arr in graph.parameter_items():
        np.copyto(arr, payload.entries[(lid, PARAM_ROLES[name])])
    for lid, state in graph.bn_states.items():
        np.copyto(state.running_mean, payload.entries[(lid, ROLE_RUNNING_MEAN)])
        np.copyto(state.running_var, payload.entries[(lid, ROLE_RUNNING_VAR)])
        state.initialized = True
    if rng is not None and (0, ROLE_RNG) in payload.entries:
        rng.set_state_words(payload.entries[(0, ROLE_RNG)])
    if adam is not None and payload.has_optimizer():
        adam.t = int(payload.entries[(0, ROLE_ADAM_STEP)][0])
        adam.m.clear()
        adam.v.clear()
        for lid, name, arr in graph.parameter_items():
            m = payload.entries.get((lid, ADAM_M_BASE + PARAM_ROLES[name]))
            v = payload.entries.get((lid, ADAM_V_BASE + PARAM_ROLES[name]))
            if m is not None:
                adam.m[(lid, name)] = m.copy()
            if v is not None:
                adam.v[(lid, name)] = v.copy()


# ---------------------------------------------------------------------------
# Score-map sidecars (exact float32 copies of emitted score maps)
# ---------------------------------------------------------------------------

SCORE_MAGIC = b"MVSC"


def save_scoremap(score, path) -> None:
    score = np.asarray(score, dtype=np.float32)
    if score.ndim != 2:
        raise DataError(f"score map must be 2-d, got {score.shape}")
    h, w = score.shape
    Path(path).write_bytes(SCORE_MAGIC + struct.pack("<II", h, w)
                           + np.ascontiguousarray(score, dtype="<f4").tobytes())


def load_scoremap(path):
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != SCORE_MAGIC or len(data) < 12:
        raise DataError(f"{path}: not a score-map sidecar")
    h, w = struct.unpack_from("<II", data, 4)
    need = 12 + 4 * h * w
    if len(data) < need:
        raise DataError(f"{path}: truncated score map")
    return np.frombuffer(data[12:need], dtype="<f4").reshape(h, w).copy()


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Flat engine configuration; every field maps to one config-file key."""

    seed: int = 7
    input_height: int = 240
    input_width: int = 320
    normalize_inputs: bool = True
    base_lr: float = 2e-4
    lr_decay_factor: float = 0.8
    lr_decay_every: int = 5          # 0 disables the schedule
    batch_size: int = 8
    max_epochs: int = 30
    dropout_rate: float = 0.3
    augment: bool = True
    max_rotation_deg: float = 10.0
    shift_fraction: float = 0.1
    zoom_fraction: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    bn_momentum: float = 0.99
    split_ratio: float = 0.7
    threshold: float | str = "otsu"  # "otsu" or a float in [0, 1]
    min_area: int = 50
    connectivity: int = 8
    gt_foreground: tuple[int, ...] = (255,)
    gt_background: tuple[int, ...] = (0, 50)
    gt_exclude: tuple[int, ...] = (85, 170)
    gt_strict: bool = True
    eval_resolution: str = "network"  # or "native"
    deterministic: bool = True

    def gt_mapping(self) -> GtMapping:
        return GtMapping(self.gt_foreground, self.gt_background,
                         self.gt_exclude, self.gt_strict)


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("true", "false"):
        return v == "true"
    raise ConfigError(f"expected true/false, got {value!r}")


def _parse_int_list(value: str) -> tuple[int, ...]:
    try:
        return tuple(int(tok) for tok in value.split(",") if tok.strip() != "")
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {value!r}") from exc


def _parse_threshold(value: str):
    v = value.strip().lower()
    if v == "otsu":
        return "otsu"
    try:
        t = float(v)
    except ValueError as exc:
        raise ConfigError(f"threshold must be 'otsu' or a number, got {value!r}") from exc
    return t


_CONFIG_PARSERS = {
    "seed": int,
    "input_height": int,
    "input_width": int,
    "normalize_inputs": _parse_bool,
    "base_lr": float,
    "lr_decay_factor": float,
    "lr_decay_every": int,
    "batch_size": int,
    "max_epochs": int,
    "dropout_rate": float,
    "augment": _parse_bool,
    "max_rotation_deg": float,
    "shift_fraction": float,
    "zoom_fraction": float,
    "adam_beta1": float,
    "adam_beta2": float,
    "adam_eps": float,
    "bn_momentum": float,
    "split_ratio": float,
    "threshold": _parse_threshold,
    "min_area": int,
    "connectivity": int,
    "gt_foreground": _parse_int_list,
    "gt_background": _parse_int_list,
    "gt_exclude": _parse_int_list,
    "gt_strict": _parse_bool,
    "eval_resolution": str.strip,
    "deterministic": _parse_bool,
}


def validate_config(cfg: RunConfig) -> RunConfig:
    def check(cond, message):
        if not cond:
            raise ConfigError(message)

    check(cfg.seed >= 0, "seed must be non-negative")
    check(cfg.input_height > 0 and cfg.input_width > 0, "input size must be positive")
    check(cfg.input_height % 16 == 0 and cfg.input_width % 16 == 0,
          f"input size {cfg.input_height}x{cfg.input_width} must be divisible by 16")
    check(cfg.base_lr > 0, "base_lr must be positive")
    check(0 < cfg.lr_decay_factor < 1, "lr_decay_factor must be in (0, 1)")
    check(cfg.lr_decay_every >= 0, "lr_decay_every must be >= 0")
    check(cfg.batch_size >= 1, "batch_size must be >= 1")
    check(cfg.max_epochs >= 1, "max_epochs must be >= 1")
    check(0 <= cfg.dropout_rate < 1, "dropout_rate must be in [0, 1)")
    check(0 <= cfg.max_rotation_deg < 180, "max_rotation_deg must be in [0, 180)")
    check(0 <= cfg.shift_fraction < 1, "shift_fraction must be in [0, 1)")
    check(0 <= cfg.zoom_fraction < 1, "zoom_fraction must be in [0, 1)")
    check(0 < cfg.adam_beta1 < 1 and 0 < cfg.adam_beta2 < 1, "adam betas must be in (0, 1)")
    check(cfg.adam_eps > 0, "adam_eps must be positive")
    check(0 < cfg.bn_momentum < 1, "bn_momentum must be in (0, 1)")
    check(0 < cfg.split_ratio < 1, "split_ratio must be in (0, 1)")
    if cfg.threshold != "otsu":
        check(0.0 <= float(cfg.threshold) <= 1.0, "threshold must be in [0, 1]")
    check(cfg.min_area >= 0, "min_area must be non-negative")
    check(cfg.connectivity in (4, 8), "connectivity must be 4 or 8")
    check(cfg.eval_resolution in ("network", "native"),
          "eval_resolution must be 'network' or 'native'")
    return cfg


def parse_config(path) -> RunConfig:
    """Parse a UTF-8 `key = value` file; `#` starts a full-line comment.

    Unknown keys and out-of-range values are rejected.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _CONFIG_PARSERS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _CONFIG_PARSERS[key](value.strip())
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return validate_config(RunConfig(**values))
