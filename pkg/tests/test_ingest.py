import pytest

from gazereg.errors import OrderingError, ParameterError, ParseError
from gazereg.ingest import (
    AGGREGATED,
    SINGULAR,
    AlignmentWindow,
    FrameRef,
    GazeSample,
    GazeTrack,
    align_window,
    format_gaze_csv,
    parse_frame_manifest,
    parse_gaze_csv,
)


def frame(t, fid=0):
    return FrameRef(frame_id=fid, timestamp_ms=t, image_path="", width=64, height=64)


def track_at(stamps):
    return GazeTrack(samples=tuple(GazeSample(t, float(t), 1.0) for t in stamps))


class TestParseGazeCsv:
    def test_two_samples(self):
        track = parse_gaze_csv(b"timestamp_ms,x,y\n0,10.5,20.0\n33,11.0,20.5")
        assert len(track) == 2
        assert track.samples[0] == GazeSample(0, 10.5, 20.0)
        assert track.samples[1] == GazeSample(33, 11.0, 20.5)
        assert track.rate_hz == 30.0

    def test_empty_body(self):
        track = parse_gaze_csv("timestamp_ms,x,y\n")
        assert len(track) == 0

    def test_malformed_row_carries_line_number(self):
        with pytest.raises(ParseError) as exc:
            parse_gaze_csv("timestamp_ms,x,y\n0,1.0,2.0\n33,abc,20")
        assert exc.value.line_number == 3

    def test_bad_header(self):
        with pytest.raises(ParseError) as exc:
            parse_gaze_csv("time,x,y\n0,1,2")
        assert exc.value.line_number == 1

    def test_wrong_field_count(self):
        with pytest.raises(ParseError):
            parse_gaze_csv("timestamp_ms,x,y\n0,1.0")

    def test_duplicate_timestamps_collapse_to_last(self):
        track = parse_gaze_csv("timestamp_ms,x,y\n5,1.0,1.0\n5,9.0,9.0\n10,2.0,2.0")
        assert len(track) == 2
        assert track.samples[0] == GazeSample(5, 9.0, 9.0)
        assert track.duplicate_count == 1

    def test_decreasing_timestamp_is_ordering_error(self):
        with pytest.raises(OrderingError) as exc:
            parse_gaze_csv("timestamp_ms,x,y\n10,1.0,1.0\n5,2.0,2.0")
        assert exc.value.line_number == 3

    def test_roundtrip_through_format(self):
        text = "timestamp_ms,x,y\n0,10.5,20.0\n33,11.25,20.5\n"
        track = parse_gaze_csv(text)
        assert format_gaze_csv(track) == text


class TestFrameManifest:
    def test_parse(self):
        frames = parse_frame_manifest(
            '[{"frame_id": 3, "timestamp_ms": 1000, "image_path": "f.gim",'
            ' "width": 32, "height": 24}]'
        )
        assert frames == [FrameRef(3, 1000, "f.gim", 32, 24)]

    def test_bad_json(self):
        with pytest.raises(ParseError):
            parse_frame_manifest("{not json")

    def test_missing_key(self):
        with pytest.raises(ParseError):
            parse_frame_manifest('[{"frame_id": 1}]')


class TestAlignWindow:
    def test_aggregated_selects_six_at_200ms(self):
        # samples every 33 ms; the left endpoint (0 ms) falls outside the
        # 200 ms window ending at t=200
        track = track_at(range(0, 300, 33))
        win = align_window(track, frame(200), AGGREGATED, 200)
        assert [s.timestamp_ms for s in win.selected] == [33, 66, 99, 132, 165, 198]

    def test_singular_nearest_not_after(self):
        track = track_at(range(0, 300, 33))
        win = align_window(track, frame(200), SINGULAR)
        assert [s.timestamp_ms for s in win.selected] == [198]

    def test_frame_before_first_sample_is_empty(self):
        track = track_at(range(100, 300, 33))
        win = align_window(track, frame(50), AGGREGATED, 200)
        assert win.is_empty
        assert align_window(track, frame(50), SINGULAR).is_empty

    def test_aggregated_respects_rate_bound(self):
        # |selected| <= floor(delta * rate / 1000) + 1 for any frame time
        stamps = [round(i * 1000 / 30) for i in range(0, 150)]
        track = track_at(stamps)
        for t in range(0, 4000, 77):
            win = align_window(track, frame(t), AGGREGATED, 200)
            assert len(win.selected) <= 200 * 30 // 1000 + 1
            win400 = align_window(track, frame(t), AGGREGATED, 400)
            assert len(win400.selected) <= 400 * 30 // 1000 + 1

    def test_aggregated_at_30hz_has_at_most_6_points(self):
        stamps = [round(i * 1000 / 30) for i in range(0, 150)]
        track = track_at(stamps)
        counts = {len(align_window(track, frame(t), AGGREGATED, 200).selected)
                  for t in range(300, 4000, 13)}
        assert max(counts) == 6

    def test_pure_function(self):
        track = track_at(range(0, 300, 33))
        a = align_window(track, frame(200), AGGREGATED, 200)
        b = align_window(track, frame(200), AGGREGATED, 200)
        assert a == b

    def test_singular_subset_of_aggregated(self):
        track = track_at(range(0, 1000, 33))
        for t in range(0, 1200, 49):
            single = align_window(track, frame(t), SINGULAR)
            agg = align_window(track, frame(t), AGGREGATED, 200)
            if single.is_empty:
                continue
            s = single.selected[0]
            if t - 200 < s.timestamp_ms <= t:
                assert s in agg.selected

    def test_unknown_mode(self):
        with pytest.raises(ParameterError):
            align_window(track_at([0]), frame(0), "both")

    def test_aggregated_needs_positive_delta(self):
        with pytest.raises(ParameterError):
            align_window(track_at([0]), frame(0), AGGREGATED, 0)

    def test_window_is_dataclass_with_flags(self):
        win = AlignmentWindow(frame_id=1, mode=SINGULAR, delta_ms=0)
        assert win.is_empty
