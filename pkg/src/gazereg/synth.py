"""Synthetic planted-signal dataset.

One patch per frame (the signal) carries a clean class glyph; every other
patch shows a noisy distractor glyph.  The signal patch advances
deterministically (row-major) each frame, gaze points at it with jitter, and
the labels are a pure function of (class, position, motion rule) -- so gaze
provably carries the information needed for future-token prediction.

Token slots cycle [class, row, col]; ids are class ids, then row ids, then
col ids inside the configured vocabulary.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import containers
from .config import RunConfig
from .errors import ConfigError
from .flow import FlowField
from .ingest import FrameRef, GazeSample, GazeTrack, format_gaze_csv, parse_gaze_csv

GAZE_RATE_HZ = 30
PLANTED_FLOW_PX = 12.0  # inconsistency magnitude planted in truth flows
_GLYPH_SEED = 7130

# Fixed, versioned id -> word table used when rendering tokens for ROUGE-L.
TOKEN_WORDS_VERSION = "v1"
TOKEN_WORDS = (
    "amber basil cedar delta ember fjord garnet hazel indigo jasper "
    "kelp lotus maple nectar ochre pearl quartz raven sable thistle "
    "umber violet walnut xenon yarrow zephyr acorn birch coral dune "
    "elm fern grove heron iris juniper kestrel lichen moss nettle "
    "onyx poppy quince reed spruce tarn urchin vale willow yew "
    "aspen brook cliff dell eyrie flint glen heath isle knoll "
    "larch mead ridge stone"
).split()


@dataclass
class OcclusionEvent:
    frame_index: int
    rect: tuple  # (y0, x0, y1, x1) in pixels
    coverage: float
    micro_refs: list = field(default_factory=list)  # earlier in-window frames
    micro_images: dict = field(default_factory=dict)  # frame_id -> (h, w, c)
    flows: dict = field(default_factory=dict)  # (src_id, dst_id) -> FlowField


@dataclass
class SynthSample:
    frames: np.ndarray  # (tau_o, h, w, c)
    track: GazeTrack
    frame_refs: list
    future_tokens: np.ndarray
    current_tokens: np.ndarray
    signal_class: int
    start_pos: int
    event: OcclusionEvent = None


def glyph_bitmaps(n_classes, patch_px):
    """Deterministic per-class glyphs, values in {0.1, 0.9}."""
    rng = np.random.default_rng(_GLYPH_SEED)
    bits = rng.random((n_classes, patch_px, patch_px)) > 0.5
    return 0.1 + 0.8 * bits.astype(np.float64)


def slot_vocab_size(cfg, slot):
    return (cfg.n_classes, cfg.n_v, cfg.n_h)[slot % 3]


def token_for(cfg, signal_class, pos, slot):
    kind = slot % 3
    if kind == 0:
        return signal_class
    if kind == 1:
        return cfg.n_classes + pos // cfg.n_h
    return cfg.n_classes + cfg.n_v + pos % cfg.n_h


def position_at(cfg, start_pos, frame_index):
    """Deterministic motion rule: the signal advances motion_step columns per
    frame, wrapping within its row.  Future tokens therefore depend on the
    current location, which only gaze reveals reliably."""
    row, col = divmod(start_pos, cfg.n_h)
    return row * cfg.n_h + (col + frame_index * cfg.motion_step) % cfg.n_h


def patch_center(cfg, pos):
    row, col = divmod(pos, cfg.n_h)
    x = (col + 0.5) * cfg.patch_px
    y = (row + 0.5) * cfg.patch_px
    return x, y


def _render_frame(cfg, rng, pos, signal_class, glyphs):
    h, w = cfg.image_height, cfg.image_width
    p = cfg.patch_px
    img = np.empty((h, w), dtype=np.float64)
    for j in range(cfg.n_patches):
        row, col = divmod(j, cfg.n_h)
        if j == pos:
            tile = glyphs[signal_class].copy()
            if cfg.signal_noise > 0:
                tile += cfg.signal_noise * rng.standard_normal((p, p))
        else:
            # distractors are dimmed and noisy: the signal patch is the one
            # full-contrast glyph, so locating it is learnable while its
            # class stays confusable at a distance
            tile = cfg.distractor_gain * glyphs[rng.integers(cfg.n_classes)] \
                + cfg.distractor_noise * rng.standard_normal((p, p))
        img[row * p : (row + 1) * p, col * p : (col + 1) * p] = tile
    img = np.clip(img, 0.0, 1.0)
    frame = np.repeat(img[:, :, None], cfg.channels, axis=2)
    return frame.astype(np.float32).astype(np.float64)


def _token_sequence(cfg, rng, signal_class, start_pos, frame_indices):
    ids = []
    for fi in frame_indices:
        pos = position_at(cfg, start_pos, fi)
        for slot in range(cfg.tokens_per_frame):
            if cfg.scramble_labels:
                size = slot_vocab_size(cfg, slot)
                base = (0, cfg.n_classes, cfg.n_classes + cfg.n_v)[slot % 3]
                ids.append(base + int(rng.integers(size)))
            else:
                ids.append(token_for(cfg, signal_class, pos, slot))
    return np.asarray(ids, dtype=np.int64)


def generate_sample(cfg, sample_seed):
    rng = np.random.default_rng(sample_seed)
    glyphs = glyph_bitmaps(cfg.n_classes, cfg.patch_px)
    signal_class = int(rng.integers(cfg.n_classes))
    start_pos = int(rng.integers(cfg.n_patches))

    frames = np.stack(
        [_render_frame(cfg, rng, position_at(cfg, start_pos, f), signal_class, glyphs)
         for f in range(cfg.tau_o)]
    )
    frame_refs = [
        FrameRef(frame_id=f, timestamp_ms=(f + 1) * 1000, image_path="",
                 width=cfg.image_width, height=cfg.image_height)
        for f in range(cfg.tau_o)
    ]

    event = None
    if cfg.occl_event_p > 0 and rng.random() < cfg.occl_event_p:
        event = _make_event(cfg, rng, frames)

    # 30 Hz gaze aimed at the signal patch of the frame each instant belongs to
    samples = []
    n_gaze = cfg.tau_o * GAZE_RATE_HZ
    for i in range(n_gaze + 1):
        ts = round(i * 1000.0 / GAZE_RATE_HZ)
        fi = min(cfg.tau_o - 1, max(0, math.ceil(ts / 1000.0) - 1))
        target_t = frame_refs[fi].timestamp_ms
        if (
            event is not None
            and fi == event.frame_index
            and target_t - cfg.delta_ms < ts < target_t
        ):
            y0, x0, y1, x1 = event.rect
            cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
        else:
            cx, cy = patch_center(cfg, position_at(cfg, start_pos, fi))
        jx, jy = cfg.gaze_jitter_px * rng.standard_normal(2)
        samples.append(GazeSample(timestamp_ms=ts, x=float(np.float32(cx + jx)),
                                  y=float(np.float32(cy + jy))))
    track = GazeTrack(samples=tuple(samples))

    future = _token_sequence(
        cfg, rng, signal_class, start_pos,
        range(cfg.tau_o, cfg.tau_o + cfg.tau_a),
    )
    current = _token_sequence(cfg, rng, signal_class, start_pos, range(cfg.tau_o))

    return SynthSample(
        frames=frames, track=track, frame_refs=frame_refs,
        future_tokens=future, current_tokens=current,
        signal_class=signal_class, start_pos=start_pos, event=event,
    )


def _make_event(cfg, rng, frames):
    h, w = cfg.image_height, cfg.image_width
    fo = int(rng.integers(cfg.tau_o))
    coverage = float(rng.uniform(0.65, 0.92))
    rh = min(h, max(1, round(h * math.sqrt(coverage))))
    rw = min(w, max(1, round(w * math.sqrt(coverage))))
    y0 = int(rng.integers(h - rh + 1))
    x0 = int(rng.integers(w - rw + 1))
    rect = (y0, x0, y0 + rh, x0 + rw)
    texture = rng.uniform(0.2, 0.8, size=(rh, rw)).astype(np.float32).astype(np.float64)

    event = OcclusionEvent(frame_index=fo, rect=rect,
                           coverage=(rh * rw) / float(h * w))
    target_t = (fo + 1) * 1000
    target_id = fo
    # in-window gaze instants strictly before the frame instant
    k = 0
    for i in range(cfg.tau_o * GAZE_RATE_HZ + 1):
        ts = round(i * 1000.0 / GAZE_RATE_HZ)
        if not (target_t - cfg.delta_ms < ts < target_t):
            continue
        frame_id = 10_000 + fo * 100 + k
        k += 1
        img = frames[fo].copy()
        img[y0 : y0 + rh, x0 : x0 + rw, :] = texture[:, :, None]
        event.micro_refs.append(
            FrameRef(frame_id=frame_id, timestamp_ms=ts, image_path="",
                     width=w, height=h)
        )
        event.micro_images[frame_id] = img

        fx = np.zeros((h, w))
        fx[y0 : y0 + rh, x0 : x0 + rw] = PLANTED_FLOW_PX
        zeros = np.zeros((h, w))
        event.flows[(frame_id, target_id)] = FlowField(
            fx=fx, fy=zeros.copy(), src_frame=frame_id, dst_frame=target_id)
        event.flows[(target_id, frame_id)] = FlowField(
            fx=zeros.copy(), fy=zeros.copy(), src_frame=target_id, dst_frame=frame_id)
    event.micro_images[target_id] = frames[fo]
    return event


def generate(cfg, seed=None):
    """All three splits; sample i draws from rng(seed XOR global index)."""
    seed = cfg.seed if seed is None else seed
    sizes = (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test))
    splits = {}
    idx = 0
    for name, size in sizes:
        splits[name] = [generate_sample(cfg, seed ^ j) for j in range(idx, idx + size)]
        idx += size
    return splits


def bayes_ceiling(cfg):
    """Token accuracy of the optimal predictor that knows the signal location.

    Enumerates every (class, start position) outcome of the motion rule.
    Only exact enumeration is supported: small grids, few classes, and a
    noise-free signal patch.
    """
    if cfg.n_patches > 16 or cfg.n_classes > 8:
        raise ConfigError("config too large for enumeration (need <=16 patches, <=8 classes)")
    if cfg.scramble_labels:
        # labels independent of the frames: best play is the per-slot mode
        slots = [slot % 3 for slot in range(cfg.tokens_per_frame)]
        return float(np.mean([1.0 / slot_vocab_size(cfg, s) for s in slots]))
    if cfg.signal_noise != 0.0:
        raise ConfigError("enumeration requires a noise-free signal patch")
    if cfg.task == "activity_understanding":
        frame_indices = range(cfg.tau_o)
    else:
        frame_indices = range(cfg.tau_o, cfg.tau_o + cfg.tau_a)
    correct = 0
    total = 0
    for c in range(cfg.n_classes):
        for p0 in range(cfg.n_patches):
            for fi in frame_indices:
                pos = position_at(cfg, p0, fi)
                for slot in range(cfg.tokens_per_frame):
                    label = token_for(cfg, c, pos, slot)
                    # the informed predictor reads the clean glyph and knows
                    # the location, so it reproduces the rule exactly
                    prediction = token_for(cfg, c, pos, slot)
                    correct += int(prediction == label)
                    total += 1
    return correct / total


# ---------------------------------------------------------------------------
# constructed occlusion scenes (ground-truth flows)


def make_occlusion_scene(height, width, coverage, pan, seed,
                         inconsistency_px=30.0):
    """Frame pair with exact flows for occlusion-check validation.

    With ``coverage`` > 0 the scene is static and an occluder covering that
    fraction of the destination frame appears; the occluded region has no
    correspondence, which the ground-truth flows express as a planted
    backward inconsistency of ``inconsistency_px``.  The flagged proportion
    then equals the occluder coverage exactly.

    With ``coverage`` == 0 the scene is a pure camera pan by (dy, dx) and the
    flows are the exact pan everywhere.
    """
    rng = np.random.default_rng(seed)
    dy, dx = pan
    src = (rng.integers(0, 256, size=(height, width)) / 255.0).astype(np.float64)
    zeros = np.zeros((height, width))

    if coverage <= 0:
        dst = np.roll(src, shift=(dy, dx), axis=(0, 1))
        fwd = FlowField(fx=np.full((height, width), float(dx)),
                        fy=np.full((height, width), float(dy)))
        bwd = FlowField(fx=np.full((height, width), float(-dx)),
                        fy=np.full((height, width), float(-dy)))
        return {"src": src, "dst": dst, "fwd": fwd, "bwd": bwd, "rect": None}

    rh = min(height, max(1, round(height * math.sqrt(coverage))))
    rw = min(width, max(1, round(width * math.sqrt(coverage))))
    y0 = int(rng.integers(height - rh + 1))
    x0 = int(rng.integers(width - rw + 1))
    rect = (y0, x0, y0 + rh, x0 + rw)
    dst = src.copy()
    dst[y0 : y0 + rh, x0 : x0 + rw] = rng.uniform(0.2, 0.8, size=(rh, rw))

    fwd = FlowField(fx=zeros.copy(), fy=zeros.copy())
    bwd = FlowField(fx=zeros.copy(), fy=zeros.copy())
    bwd.fx[y0 : y0 + rh, x0 : x0 + rw] = inconsistency_px
    return {"src": src, "dst": dst, "fwd": fwd, "bwd": bwd, "rect": rect}


# ---------------------------------------------------------------------------
# on-disk layout


def write_dataset(directory, splits, cfg):
    os.makedirs(directory, exist_ok=True)
    index = {
        "version": 1,
        "token_words": TOKEN_WORDS_VERSION,
        "config": cfg.to_dict(),
        "splits": {name: len(samples) for name, samples in splits.items()},
    }
    with open(os.path.join(directory, "index.json"), "w") as f:
        json.dump(index, f, indent=2, sort_keys=True)
    for name, samples in splits.items():
        for i, s in enumerate(samples):
            sdir = os.path.join(directory, name, f"s{i:05d}")
            os.makedirs(sdir, exist_ok=True)
            for f_idx in range(s.frames.shape[0]):
                containers.write_image(os.path.join(sdir, f"frame_{f_idx:03d}.gim"),
                                       s.frames[f_idx])
            with open(os.path.join(sdir, "gaze.csv"), "w") as f:
                f.write(format_gaze_csv(s.track))
            meta = {
                "future_tokens": s.future_tokens.tolist(),
                "current_tokens": s.current_tokens.tolist(),
                "signal_class": s.signal_class,
                "start_pos": s.start_pos,
                "frame_refs": [
                    {"frame_id": r.frame_id, "timestamp_ms": r.timestamp_ms,
                     "image_path": f"frame_{j:03d}.gim",
                     "width": r.width, "height": r.height}
                    for j, r in enumerate(s.frame_refs)
                ],
                "event": None,
            }
            if s.event is not None:
                ev = s.event
                meta["event"] = {
                    "frame_index": ev.frame_index,
                    "rect": list(ev.rect),
                    "coverage": ev.coverage,
                    "micro_refs": [
                        {"frame_id": r.frame_id, "timestamp_ms": r.timestamp_ms,
                         "width": r.width, "height": r.height}
                        for r in ev.micro_refs
                    ],
                }
                for fid, img in ev.micro_images.items():
                    containers.write_image(os.path.join(sdir, f"micro_{fid}.gim"), img)
                for (a, b), fl in ev.flows.items():
                    containers.write_flow(os.path.join(sdir, f"flow_{a}_{b}.gfl"),
                                          fl.fx, fl.fy)
            with open(os.path.join(sdir, "meta.json"), "w") as f:
                json.dump(meta, f, indent=2, sort_keys=True)


def load_dataset(directory):
    with open(os.path.join(directory, "index.json")) as f:
        index = json.load(f)
    cfg = RunConfig.from_dict(index["config"])
    splits = {}
    for name, size in index["splits"].items():
        samples = []
        for i in range(size):
            sdir = os.path.join(directory, name, f"s{i:05d}")
            with open(os.path.join(sdir, "meta.json")) as f:
                meta = json.load(f)
            refs = [
                FrameRef(frame_id=r["frame_id"], timestamp_ms=r["timestamp_ms"],
                         image_path="", width=r["width"], height=r["height"])
                for r in meta["frame_refs"]
            ]
            frames = np.stack([
                containers.read_image(os.path.join(sdir, f"frame_{j:03d}.gim"))
                for j in range(len(refs))
            ])
            with open(os.path.join(sdir, "gaze.csv")) as f:
                track = parse_gaze_csv(f.read())
            event = None
            if meta["event"] is not None:
                em = meta["event"]
                event = OcclusionEvent(
                    frame_index=em["frame_index"], rect=tuple(em["rect"]),
                    coverage=em["coverage"],
                )
                for r in em["micro_refs"]:
                    ref = FrameRef(frame_id=r["frame_id"], timestamp_ms=r["timestamp_ms"],
                                   image_path="", width=r["width"], height=r["height"])
                    event.micro_refs.append(ref)
                    event.micro_images[ref.frame_id] = containers.read_image(
                        os.path.join(sdir, f"micro_{ref.frame_id}.gim"))
                target_id = em["frame_index"]
                event.micro_images[target_id] = containers.read_image(
                    os.path.join(sdir, f"micro_{target_id}.gim"))
                for r in em["micro_refs"]:
                    for a, b in ((r["frame_id"], target_id), (target_id, r["frame_id"])):
                        fx, fy = containers.read_flow(os.path.join(sdir, f"flow_{a}_{b}.gfl"))
                        event.flows[(a, b)] = FlowField(fx=fx, fy=fy, src_frame=a, dst_frame=b)
            samples.append(SynthSample(
                frames=frames, track=track, frame_refs=refs,
                future_tokens=np.asarray(meta["future_tokens"], dtype=np.int64),
                current_tokens=np.asarray(meta["current_tokens"], dtype=np.int64),
                signal_class=meta["signal_class"], start_pos=meta["start_pos"],
                event=event,
            ))
        splits[name] = samples
    return splits, cfg
