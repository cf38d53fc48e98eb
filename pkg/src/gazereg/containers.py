"""Raw binary containers for heatmaps, images, and flow fields.

All formats are little-endian with a 4-byte magic:

* ``GHM1`` heatmap: u32 width, u32 height, u32 kind (0 continuous, 1 binary,
  2 distribution), u32 reserved, then width*height float32, row-major.
  Distributions are stored with width=N, height=1.
* ``GIM1`` image: u32 width, u32 height, u32 channels, u32 reserved, then
  width*height*channels float32, row-major (y, x, c).
* ``GFL1`` flow: u32 width, u32 height, then the fx plane followed by the
  fy plane, each width*height float32 row-major.
"""

import struct

import numpy as np

from .errors import ParseError

KIND_CONTINUOUS = 0
KIND_BINARY = 1
KIND_DISTRIBUTION = 2

_HEAT_HDR = struct.Struct("<4sIIII")
_IMG_HDR = struct.Struct("<4sIIII")
_FLOW_HDR = struct.Struct("<4sII")


def write_heatmap(path, values, kind):
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise ParseError("heatmap container expects a 2-D array")
    h, w = values.shape
    with open(path, "wb") as f:
        f.write(_HEAT_HDR.pack(b"GHM1", w, h, int(kind), 0))
        f.write(np.ascontiguousarray(values).tobytes())


def read_heatmap(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEAT_HDR.size:
        raise ParseError(f"{path}: truncated GHM1 header")
    magic, w, h, kind, _ = _HEAT_HDR.unpack_from(raw)
    if magic != b"GHM1":
        raise ParseError(f"{path}: bad magic {magic!r}, expected GHM1")
    data = np.frombuffer(raw, dtype="<f4", count=w * h, offset=_HEAT_HDR.size)
    if data.size != w * h:
        raise ParseError(f"{path}: truncated GHM1 payload")
    return data.reshape(h, w).astype(np.float64), kind


def write_image(path, pixels):
    pixels = np.asarray(pixels, dtype=np.float32)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    if pixels.ndim != 3:
        raise ParseError("image container expects a (h, w, c) array")
    h, w, c = pixels.shape
    with open(path, "wb") as f:
        f.write(_IMG_HDR.pack(b"GIM1", w, h, c, 0))
        f.write(np.ascontiguousarray(pixels).tobytes())


def read_image(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _IMG_HDR.size:
        raise ParseError(f"{path}: truncated GIM1 header")
    magic, w, h, c, _ = _IMG_HDR.unpack_from(raw)
    if magic != b"GIM1":
        raise ParseError(f"{path}: bad magic {magic!r}, expected GIM1")
    data = np.frombuffer(raw, dtype="<f4", count=w * h * c, offset=_IMG_HDR.size)
    if data.size != w * h * c:
        raise ParseError(f"{path}: truncated GIM1 payload")
    return data.reshape(h, w, c).astype(np.float64)


def write_flow(path, fx, fy):
    fx = np.asarray(fx, dtype=np.float32)
    fy = np.asarray(fy, dtype=np.float32)
    if fx.shape != fy.shape or fx.ndim != 2:
        raise ParseError("flow container expects two equal 2-D planes")
    h, w = fx.shape
    with open(path, "wb") as f:
        f.write(_FLOW_HDR.pack(b"GFL1", w, h))
        f.write(np.ascontiguousarray(fx).tobytes())
        f.write(np.ascontiguousarray(fy).tobytes())


def read_flow(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _FLOW_HDR.size:
        raise ParseError(f"{path}: truncated GFL1 header")
    magic, w, h = _FLOW_HDR.unpack_from(raw)
    if magic != b"GFL1":
        raise ParseError(f"{path}: bad magic {magic!r}, expected GFL1")
    n = w * h
    data = np.frombuffer(raw, dtype="<f4", count=2 * n, offset=_FLOW_HDR.size)
    if data.size != 2 * n:
        raise ParseError(f"{path}: truncated GFL1 payload")
    fx = data[:n].reshape(h, w).astype(np.float64)
    fy = data[n:].reshape(h, w).astype(np.float64)
    return fx, fy
