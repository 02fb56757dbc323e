"""Text dumps, images and model checkpoints.

Floats in text dumps are written with 17 significant digits, which
round-trips IEEE doubles exactly.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .flow import PARAM_NAMES, MlpModel, ResampledModel, VelocityModel
from .latent import check_cube

CHECKPOINT_MAGIC = "VFLOW1"


def _fmt(values: np.ndarray) -> str:
    return "\n".join(format(float(v), ".17g") for v in np.ravel(values))


def _write_text(path, text: str) -> Path:
    path = Path(path)
    try:
        path.write_text(text, encoding="ascii")
    except OSError as err:
        raise OSError(f"cannot write {path}: {err}") from err
    return path


def _read_tokens(path) -> list[str]:
    try:
        return Path(path).read_text(encoding="ascii").split()
    except OSError as err:
        raise OSError(f"cannot read {path}: {err}") from err


def write_voxgrid(path, grid: np.ndarray) -> Path:
    R = check_cube(grid)
    return _write_text(path, f"VOXGRID {R}\n{_fmt(grid)}\n")


def read_voxgrid(path) -> np.ndarray:
    tokens = _read_tokens(path)
    if len(tokens) < 2 or tokens[0] != "VOXGRID":
        raise ValueError(f"{path}: not a VOXGRID file")
    R = int(tokens[1])
    values = np.array(tokens[2:], dtype=np.float64)
    if values.size != R**3:
        raise ValueError(f"{path}: expected {R**3} values, found {values.size}")
    return values.reshape(R, R, R)


def write_slatf(path, features: np.ndarray, activity: np.ndarray) -> Path:
    R = check_cube(features, "features")
    F = features.shape[3]
    if activity.shape != (R, R, R):
        raise ValueError(f"activity shape {activity.shape} does not match features {features.shape}")
    return _write_text(path, f"SLATF {R} {F}\n{_fmt(features)}\n{_fmt(activity)}\n")


def read_slatf(path) -> tuple[np.ndarray, np.ndarray]:
    tokens = _read_tokens(path)
    if len(tokens) < 3 or tokens[0] != "SLATF":
        raise ValueError(f"{path}: not a SLATF file")
    R, F = int(tokens[1]), int(tokens[2])
    values = np.array(tokens[3:], dtype=np.float64)
    n_feat = R**3 * F
    if values.size != n_feat + R**3:
        raise ValueError(f"{path}: expected {n_feat + R**3} values, found {values.size}")
    return values[:n_feat].reshape(R, R, R, F), values[n_feat:].reshape(R, R, R)


def _write_bytes(path, header: bytes, body: bytes) -> Path:
    path = Path(path)
    try:
        path.write_bytes(header + body)
    except OSError as err:
        raise OSError(f"cannot write {path}: {err}") from err
    return path


def write_pgm16(path, image: np.ndarray) -> Path:
    """Grayscale image in ``[0, 1]`` as a 16-bit binary PGM."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("PGM image must be 2-D")
    h, w = image.shape
    data = np.round(np.clip(image, 0.0, 1.0) * 65535).astype(">u2")
    return _write_bytes(path, f"P5\n{w} {h}\n65535\n".encode(), data.tobytes())


def _read_netpbm(path, magic: bytes):
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} image")
    w, h, maxval = (int(f) for f in fields[1:])
    return w, h, maxval, raw[pos + 1 :]


def read_pgm16(path) -> np.ndarray:
    w, h, maxval, body = _read_netpbm(path, b"P5")
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(body, dtype=dtype, count=w * h).reshape(h, w) / maxval


def write_ppm(path, image: np.ndarray) -> Path:
    """RGB image in ``[0, 1]`` as an 8-bit binary PPM."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("PPM image must be (H, W, 3)")
    h, w, _ = image.shape
    data = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    return _write_bytes(path, f"P6\n{w} {h}\n255\n".encode(), data.tobytes())


def read_ppm(path) -> np.ndarray:
    w, h, maxval, body = _read_netpbm(path, b"P6")
    return np.frombuffer(body, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3) / maxval


def save_checkpoint(path, model: VelocityModel) -> Path:
    """``VFLOW1`` header line, one JSON line of dimensions, then float64 parameters."""
    factor = 1
    if isinstance(model, ResampledModel):
        factor, model = model.factor, model.inner
    if not isinstance(model, MlpModel):
        raise ValueError("only MLP models can be checkpointed")
    dims = {
        "latent_shape": list(model.latent_shape),
        "cond_dim": model.cond_dim,
        "hidden": model.hidden,
        "cond_hidden": model.cond_hidden,
        "n_freq": model.n_freq,
        "output": model.output,
        "in_scale": model.in_scale,
        "factor": factor,
    }
    header = f"{CHECKPOINT_MAGIC}\n{json.dumps(dims, sort_keys=True)}\n".encode("ascii")
    body = b"".join(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes() for n in PARAM_NAMES)
    return _write_bytes(path, header, body)


def load_checkpoint(path) -> VelocityModel:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint {path} not found")
    raw = Path(path).read_bytes()
    magic, dims_line, body = raw.split(b"\n", 2)
    if magic.decode("ascii", "replace") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint")
    dims = json.loads(dims_line)
    factor = dims.pop("factor", 1)
    model = MlpModel(**dims)
    params, offset = {}, 0
    for name, shape in model.param_shapes().items():
        n = int(np.prod(shape))
        params[name] = np.frombuffer(body, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * n
    if offset != len(body):
        raise ValueError(f"{path}: parameter block has {len(body)} bytes, expected {offset}")
    model.params = params
    return ResampledModel(model, factor) if factor != 1 else model
