"""Dense flow estimation and forward/backward occlusion checking.

The consistency distance follows the signed difference of displacement
magnitudes: d = |F_fwd(p)| - |F_bwd(p_hat)| per axis, with the flagging
condition sqrt(dx^2 + dy^2) > epsilon.  A conventional warp-sum variant
(F_fwd(p) + F_bwd(p_hat)) is available via ``mode="warp_sum"``.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import containers
from .errors import FlowProviderError, ParameterError, ShapeError
from .ingest import AGGREGATED, AlignmentWindow, GazeSample, align_window
from .kernels import block_match_sad

MODE_MAGNITUDE_DIFF = "magnitude_diff"  # the published formula
MODE_WARP_SUM = "warp_sum"  # standard forward/backward residual

MAJOR = "major"
MINOR = "minor"

DEFAULT_EPSILON_PX = 20.0
DEFAULT_ETA = 0.60


@dataclass
class FlowField:
    fx: np.ndarray  # (height, width) horizontal displacement, pixels
    fy: np.ndarray
    src_frame: int = -1
    dst_frame: int = -1

    @property
    def shape(self):
        return self.fx.shape


@dataclass
class OcclusionReport:
    eta_observed: float
    verdict: str
    epsilon_px: float
    eta_threshold: float


def estimate_flow_blockmatch(src, dst, block, search, src_frame=-1, dst_frame=-1):
    """Per-block integer displacements minimising SAD, broadcast to pixels.

    Deterministic: ties resolve to the smallest displacement magnitude, then
    lexicographic (dy, dx).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.ndim != 2 or dst.ndim != 2:
        raise ShapeError("block matching expects 2-D grayscale images")
    if src.shape != dst.shape:
        raise ShapeError(f"image shapes differ: {src.shape} vs {dst.shape}")
    if block <= 0 or search <= 0:
        raise ParameterError("block and search must be > 0")

    fy_b, fx_b = block_match_sad(src, dst, int(block), int(search))
    h, w = src.shape
    fy = np.repeat(np.repeat(fy_b, block, axis=0), block, axis=1)[:h, :w]
    fx = np.repeat(np.repeat(fx_b, block, axis=0), block, axis=1)[:h, :w]
    return FlowField(fx=fx, fy=fy, src_frame=src_frame, dst_frame=dst_frame)


def _sample_flow(field, x, y, interp):
    h, w = field.shape
    if interp == "nearest":
        ix = min(max(int(round(x)), 0), w - 1)
        iy = min(max(int(round(y)), 0), h - 1)
        return field.fx[iy, ix], field.fy[iy, ix]
    if interp == "bilinear":
        x = min(max(x, 0.0), w - 1.0)
        y = min(max(y, 0.0), h - 1.0)
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
        ax, ay = x - x0, y - y0
        def lerp(plane):
            top = plane[y0, x0] * (1 - ax) + plane[y0, x1] * ax
            bot = plane[y1, x0] * (1 - ax) + plane[y1, x1] * ax
            return top * (1 - ay) + bot * ay
        return lerp(field.fx), lerp(field.fy)
    raise ParameterError(f"unknown interpolation {interp!r}")


def translate_pixel(p, flow_fwd, interp="nearest"):
    """Move a point by the forward flow; clamps to bounds with a flag.

    Returns ((x_hat, y_hat), clamped).
    """
    x, y = p
    fx, fy = _sample_flow(flow_fwd, x, y, interp)
    xh, yh = x + fx, y + fy
    h, w = flow_fwd.shape
    cx = min(max(xh, 0.0), w - 1.0)
    cy = min(max(yh, 0.0), h - 1.0)
    return (cx, cy), (cx != xh or cy != yh)


def consistency_distance(p, flow_fwd, flow_bwd, interp="nearest", mode=MODE_MAGNITUDE_DIFF):
    """Signed per-axis consistency distance at point ``p``."""
    if flow_fwd.shape != flow_bwd.shape:
        raise ShapeError("forward and backward flows must share a grid")
    x, y = p
    fxf, fyf = _sample_flow(flow_fwd, x, y, interp)
    (xh, yh), _ = translate_pixel(p, flow_fwd, interp)
    fxb, fyb = _sample_flow(flow_bwd, xh, yh, interp)
    if mode == MODE_MAGNITUDE_DIFF:
        return abs(fxf) - abs(fxb), abs(fyf) - abs(fyb)
    if mode == MODE_WARP_SUM:
        return fxf + fxb, fyf + fyb
    raise ParameterError(f"unknown consistency mode {mode!r}")


def occlusion_check(
    flow_fwd,
    flow_bwd,
    epsilon_px=DEFAULT_EPSILON_PX,
    eta_threshold=DEFAULT_ETA,
    mode=MODE_MAGNITUDE_DIFF,
):
    """Fraction of pixels whose consistency distance exceeds epsilon.

    verdict is major iff eta_observed > eta_threshold.
    """
    if flow_fwd.shape != flow_bwd.shape:
        raise ShapeError("forward and backward flows must share a grid")
    h, w = flow_fwd.shape
    ys, xs = np.mgrid[0:h, 0:w]
    xh = np.clip(np.rint(xs + flow_fwd.fx), 0, w - 1).astype(np.intp)
    yh = np.clip(np.rint(ys + flow_fwd.fy), 0, h - 1).astype(np.intp)
    fxb = flow_bwd.fx[yh, xh]
    fyb = flow_bwd.fy[yh, xh]
    if mode == MODE_MAGNITUDE_DIFF:
        dx = np.abs(flow_fwd.fx) - np.abs(fxb)
        dy = np.abs(flow_fwd.fy) - np.abs(fyb)
    elif mode == MODE_WARP_SUM:
        dx = flow_fwd.fx + fxb
        dy = flow_fwd.fy + fyb
    else:
        raise ParameterError(f"unknown consistency mode {mode!r}")
    exceeded = np.sqrt(dx * dx + dy * dy) > epsilon_px
    eta = float(exceeded.sum()) / float(h * w)
    verdict = MAJOR if eta > eta_threshold else MINOR
    return OcclusionReport(
        eta_observed=eta, verdict=verdict, epsilon_px=epsilon_px, eta_threshold=eta_threshold
    )


def translate_gaze_point(sample, flow_fwd, width, height, interp="nearest"):
    """Move one gaze point into the final frame by the forward flow."""
    (xh, yh), _ = translate_pixel((sample.x, sample.y), flow_fwd, interp)
    xh = min(max(xh, 0.0), width - 1.0)
    yh = min(max(yh, 0.0), height - 1.0)
    return GazeSample(timestamp_ms=sample.timestamp_ms, x=xh, y=yh)


def aggregate_with_occlusion(
    track,
    frames,
    target,
    delta_ms,
    flow_provider,
    epsilon_px=DEFAULT_EPSILON_PX,
    eta_threshold=DEFAULT_ETA,
    interp="nearest",
    mode=MODE_MAGNITUDE_DIFF,
):
    """Aggregated alignment window with occlusion correction.

    ``frames`` lists the frames available inside the window (may include the
    target).  Each selected gaze sample is attributed to the latest frame at
    or before its timestamp; samples attributed to the target pass through
    unchanged.  For every earlier frame, a major occlusion verdict drops its
    samples entirely, a minor one translates them by the forward flow.
    """
    window = align_window(track, target, AGGREGATED, delta_ms)
    candidates = sorted(
        {f.frame_id: f for f in list(frames) + [target]}.values(),
        key=lambda f: f.timestamp_ms,
    )

    groups = {}
    for s in window.selected:
        # each sample pairs with the frame nearest its timestamp (tie: earlier)
        owner = min(candidates,
                    key=lambda f: (abs(f.timestamp_ms - s.timestamp_ms), f.timestamp_ms))
        groups.setdefault(owner.frame_id, (owner, []))[1].append(s)

    kept = []
    for frame_id, (frame, samples) in groups.items():
        if frame_id == target.frame_id:
            kept.extend(samples)
            continue
        try:
            fwd, bwd = flow_provider(frame, target)
        except FlowProviderError:
            raise
        except Exception as exc:
            raise FlowProviderError(frame.frame_id, target.frame_id, str(exc)) from exc
        if fwd is None or bwd is None:
            raise FlowProviderError(frame.frame_id, target.frame_id)
        report = occlusion_check(fwd, bwd, epsilon_px, eta_threshold, mode)
        if report.verdict == MAJOR:
            continue
        for s in samples:
            kept.append(translate_gaze_point(s, fwd, target.width, target.height, interp))

    kept.sort(key=lambda s: s.timestamp_ms)
    return AlignmentWindow(
        frame_id=target.frame_id, mode=AGGREGATED, delta_ms=delta_ms, selected=tuple(kept)
    )


class BlockMatchFlowProvider:
    """Flow provider backed by the built-in SAD block matcher.

    ``images`` maps frame_id to a 2-D grayscale array (multi-channel arrays
    are averaged).
    """

    def __init__(self, images, block=8, search=6):
        self.images = images
        self.block = block
        self.search = search

    def _gray(self, frame):
        try:
            img = self.images[frame.frame_id]
        except KeyError:
            raise FlowProviderError(frame.frame_id, -1, "no image for frame") from None
        img = np.asarray(img, dtype=np.float64)
        if img.ndim == 3:
            img = img.mean(axis=2)
        return img

    def __call__(self, src, dst):
        a = self._gray(src)
        b = self._gray(dst)
        fwd = estimate_flow_blockmatch(a, b, self.block, self.search, src.frame_id, dst.frame_id)
        bwd = estimate_flow_blockmatch(b, a, self.block, self.search, dst.frame_id, src.frame_id)
        return fwd, bwd


class FileFlowProvider:
    """Reads precomputed GFL1 flow files named ``flow_<src>_<dst>.gfl``."""

    def __init__(self, directory):
        self.directory = directory

    def _load(self, a, b):
        path = os.path.join(self.directory, f"flow_{a}_{b}.gfl")
        if not os.path.exists(path):
            raise FlowProviderError(a, b, f"missing {path}")
        fx, fy = containers.read_flow(path)
        return FlowField(fx=fx, fy=fy, src_frame=a, dst_frame=b)

    def __call__(self, src, dst):
        return (
            self._load(src.frame_id, dst.frame_id),
            self._load(dst.frame_id, src.frame_id),
        )
