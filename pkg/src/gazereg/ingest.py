"""Gaze log parsing, frame manifests, and gaze-to-frame alignment.

Gaze CSV format: UTF-8, header exactly ``timestamp_ms,x,y``, one sample per
line.  Frame manifests are JSON arrays of
``{frame_id, timestamp_ms, image_path, width, height}``.
"""

import bisect
import io
import json
from dataclasses import dataclass, field

from .errors import OrderingError, ParameterError, ParseError

GAZE_CSV_HEADER = "timestamp_ms,x,y"
DEFAULT_RATE_HZ = 30.0

SINGULAR = "singular"
AGGREGATED = "aggregated"


@dataclass(frozen=True)
class GazeSample:
    timestamp_ms: int
    x: float
    y: float


@dataclass
class GazeTrack:
    """Time-ordered gaze samples; timestamps strictly increasing."""

    samples: tuple
    rate_hz: float = DEFAULT_RATE_HZ
    duplicate_count: int = 0  # rows collapsed during parsing

    def __len__(self):
        return len(self.samples)

    def timestamps(self):
        return [s.timestamp_ms for s in self.samples]


@dataclass(frozen=True)
class FrameRef:
    frame_id: int
    timestamp_ms: int
    image_path: str
    width: int
    height: int


@dataclass(frozen=True)
class AlignmentWindow:
    """Samples selected for one frame.

    ``selected`` is empty when no sample qualifies; callers decide the
    fallback (the heatmap layer produces an all-zero map).
    """

    frame_id: int
    mode: str
    delta_ms: int
    selected: tuple = field(default=())

    @property
    def is_empty(self):
        return len(self.selected) == 0


def parse_gaze_csv(data):
    """Parse a gaze CSV byte-stream (or str) into a GazeTrack.

    Duplicate timestamps collapse to the last occurrence (counted in
    ``duplicate_count``); a timestamp smaller than its predecessor raises
    OrderingError with the line number.
    """
    if isinstance(data, bytes):
        text = data.decode("utf-8")
    elif isinstance(data, str):
        text = data
    else:
        text = data.read()
        if isinstance(text, bytes):
            text = text.decode("utf-8")

    lines = io.StringIO(text).read().splitlines()
    if not lines or lines[0].strip() != GAZE_CSV_HEADER:
        raise ParseError(f"expected header {GAZE_CSV_HEADER!r}", line_number=1)

    samples = []
    duplicates = 0
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise ParseError(f"expected 3 fields, got {len(parts)}", line_number=ln)
        try:
            ts = int(parts[0])
            x = float(parts[1])
            y = float(parts[2])
        except ValueError as exc:
            raise ParseError(str(exc), line_number=ln) from None
        if samples:
            prev = samples[-1].timestamp_ms
            if ts == prev:
                samples[-1] = GazeSample(ts, x, y)
                duplicates += 1
                continue
            if ts < prev:
                raise OrderingError(
                    f"timestamp {ts} not increasing (previous {prev})", line_number=ln
                )
        samples.append(GazeSample(ts, x, y))
    return GazeTrack(samples=tuple(samples), duplicate_count=duplicates)


def format_gaze_csv(track):
    """Inverse of parse_gaze_csv; float coordinates keep full precision."""
    lines = [GAZE_CSV_HEADER]
    for s in track.samples:
        lines.append(f"{s.timestamp_ms},{s.x!r},{s.y!r}")
    return "\n".join(lines) + "\n"


def parse_frame_manifest(data):
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        entries = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid manifest JSON: {exc}") from None
    if not isinstance(entries, list):
        raise ParseError("frame manifest must be a JSON array")
    frames = []
    for i, e in enumerate(entries):
        try:
            frames.append(
                FrameRef(
                    frame_id=int(e["frame_id"]),
                    timestamp_ms=int(e["timestamp_ms"]),
                    image_path=str(e["image_path"]),
                    width=int(e["width"]),
                    height=int(e["height"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"manifest entry {i}: {exc}") from None
    return frames


def align_window(track, frame, mode, delta_ms=200):
    """Select the gaze samples feeding the heatmap of ``frame``.

    singular: the sample nearest to (and not after) the frame timestamp.
    aggregated: all samples with timestamp in (t - delta, t].  The left
    endpoint is open so a delta of 200 ms at 30 Hz yields at most 6 points
    (12 at 400 ms); see the decisions log for the boundary choice.
    """
    if mode not in (SINGULAR, AGGREGATED):
        raise ParameterError(f"unknown alignment mode {mode!r}")
    if mode == AGGREGATED and delta_ms <= 0:
        raise ParameterError("aggregated alignment requires delta_ms > 0")

    t = frame.timestamp_ms
    stamps = [s.timestamp_ms for s in track.samples]

    if mode == SINGULAR:
        idx = bisect.bisect_right(stamps, t) - 1
        selected = () if idx < 0 else (track.samples[idx],)
    else:
        lo = bisect.bisect_right(stamps, t - delta_ms)
        hi = bisect.bisect_right(stamps, t)
        selected = tuple(track.samples[lo:hi])
    return AlignmentWindow(
        frame_id=frame.frame_id, mode=mode, delta_ms=delta_ms, selected=selected
    )
