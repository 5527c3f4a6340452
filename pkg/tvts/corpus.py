"""
Synthetic narrated videos and the window / frame / mask sampling procedures

A video is a coloured shape moving along a piecewise path; its narration is a
stream of timestamped words describing the scene as it happens. Phrases such
as "now it turns around" are only placeable in time by looking at the video.
"""

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from tvts.errors import (
    ConfigError,
    DataError,
    EmptyTranscriptError,
    SamplingError,
    VocabError,
    WindowRangeError,
)
from tvts.schemas import GenConfig, Manifest, ManifestEntry, TranscriptRecord, WordRecord

logger = logging.getLogger(__name__)

GAP_SECONDS = 1.0
TIME_QUANTUM = 1.0 / 64.0
MAX_WINDOW_RETRIES = 10

SHAPES = ("circle", "square")
MOTIONS = ("slide", "climb", "drift", "dash", "pause")
CATEGORIES = tuple(f"{shape}-{motion}" for shape in SHAPES for motion in MOTIONS)

PALETTE: Dict[str, Tuple[float, float, float]] = {
    "red": (0.9, 0.15, 0.1),
    "green": (0.15, 0.8, 0.2),
    "blue": (0.15, 0.3, 0.95),
    "yellow": (0.95, 0.85, 0.1),
    "white": (0.95, 0.95, 0.95),
    "purple": (0.6, 0.2, 0.8),
}
BACKGROUND = (0.08, 0.08, 0.1)
SHAPE_RADIUS = 0.12
MARGIN_LOW, MARGIN_HIGH = 0.15, 0.85
TRAVEL = 0.3

PHRASE_EVERY = 1.0
PHRASE_JITTER = 0.2
WORD_GAP = 0.12

PAD, CLS, UNK = "[PAD]", "[CLS]", "[UNK]"
SPECIAL_TOKENS = (PAD, CLS, UNK)

PHRASE_WORDS = (
    "the", "it", "is", "now", "turns", "around", "moves", "goes", "dashes", "stops", "waits",
    "near", "top", "bottom", "left", "right", "up", "down", "and", "in", "middle",
) + SHAPES + tuple(PALETTE)


# -----------------------------------------------------------------------------
# Scenes
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class PathSegment:
    """The shape travels linearly from start to end over [t0, t1] in one colour"""
    t0: float
    t1: float
    start: Tuple[float, float]
    end: Tuple[float, float]
    color: str

    @property
    def moving(self) -> bool:
        return self.start != self.end

    @property
    def heading(self) -> Tuple[int, int]:
        """Sign of (dx, dy); y grows downwards"""
        dx = self.end[0] - self.start[0]
        dy = self.end[1] - self.start[1]
        return (int(np.sign(round(dx, 9))), int(np.sign(round(dy, 9))))

    def position(self, t: float) -> Tuple[float, float]:
        frac = 0.0 if self.t1 <= self.t0 else min(max((t - self.t0) / (self.t1 - self.t0), 0.0), 1.0)
        return (self.start[0] + frac * (self.end[0] - self.start[0]),
                self.start[1] + frac * (self.end[1] - self.start[1]))


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    motion: str
    segments: Tuple[PathSegment, ...]

    def segment_at(self, t: float) -> Tuple[int, PathSegment]:
        for i, seg in enumerate(self.segments):
            if t < seg.t1:
                return i, seg
        return len(self.segments) - 1, self.segments[-1]

    def state(self, t: float) -> Tuple[Tuple[float, float], str]:
        _, seg = self.segment_at(t)
        return seg.position(t), seg.color

    def to_dict(self) -> dict:
        return {
            "shape": self.shape,
            "motion": self.motion,
            "segments": [
                {"t0": s.t0, "t1": s.t1, "start": list(s.start), "end": list(s.end), "color": s.color}
                for s in self.segments
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        return cls(
            shape=data["shape"],
            motion=data["motion"],
            segments=tuple(
                PathSegment(s["t0"], s["t1"], tuple(s["start"]), tuple(s["end"]), s["color"])
                for s in data["segments"]
            ),
        )


def _step_axis(value: float, preferred: int, travel: float) -> Tuple[float, int]:
    direction = preferred
    if not (MARGIN_LOW <= value + direction * travel <= MARGIN_HIGH):
        direction = -direction
    return value + direction * travel, direction


def _round_pos(p: Sequence[float]) -> Tuple[float, float]:
    return (round(float(p[0]), 6), round(float(p[1]), 6))


def make_scene(category: str, duration: float, rng: np.random.Generator) -> SceneSpec:
    """Random piecewise path for one category; every segment stays inside the frame margins"""
    shape, motion = category.split("-")
    colors = list(PALETTE)
    pos = _round_pos(rng.uniform(0.3, 0.7, size=2))
    color = colors[int(rng.integers(len(colors)))]
    dx, dy = int(rng.choice([-1, 1])), int(rng.choice([-1, 1]))
    segments: List[PathSegment] = []
    t = 0.0
    index = 0
    while t < duration:
        length = float(rng.uniform(3.0, 5.0))
        end = pos
        if motion == "slide":
            x, dx = _step_axis(pos[0], dx, TRAVEL)
            end = (x, pos[1])
            dx = -dx
        elif motion == "climb":
            y, dy = _step_axis(pos[1], dy, TRAVEL)
            end = (pos[0], y)
            dy = -dy
        elif motion == "drift":
            x, dx = _step_axis(pos[0], dx, TRAVEL / math.sqrt(2.0))
            y, dy = _step_axis(pos[1], dy, TRAVEL / math.sqrt(2.0))
            end = (x, y)
            dx, dy = -dx, -dy
        elif motion == "dash":
            length = float(rng.uniform(1.5, 2.5))
            if rng.random() < 0.5:
                x, _ = _step_axis(pos[0], int(rng.choice([-1, 1])), TRAVEL)
                end = (x, pos[1])
            else:
                y, _ = _step_axis(pos[1], int(rng.choice([-1, 1])), TRAVEL)
                end = (pos[0], y)
        elif motion == "pause":
            if index % 2 == 0:
                x, dx = _step_axis(pos[0], dx, TRAVEL)
                end = (x, pos[1])
                dx = -dx
        else:
            raise ConfigError(f"unknown motion {motion!r}")
        t1 = min(t + length, duration)
        segments.append(PathSegment(round(t, 6), round(t1, 6), pos, _round_pos(end), color))
        pos = _round_pos(end)
        color = colors[(colors.index(color) + 1 + int(rng.integers(len(colors) - 1))) % len(colors)]
        t = t1
        index += 1
    return SceneSpec(shape=shape, motion=motion, segments=tuple(segments))


def render_frame(scene: SceneSpec, t: float, height: int, width: int) -> np.ndarray:
    """uint8 H x W x 3 frame at time t"""
    (cx, cy), color = scene.state(t)
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    gx, gy = np.meshgrid(xs, ys)
    if scene.shape == "circle":
        inside = (gx - cx) ** 2 + (gy - cy) ** 2 <= SHAPE_RADIUS ** 2
    else:
        inside = (np.abs(gx - cx) <= SHAPE_RADIUS) & (np.abs(gy - cy) <= SHAPE_RADIUS)
    frame = np.empty((height, width, 3), dtype=np.float64)
    frame[...] = BACKGROUND
    frame[inside] = PALETTE[color]
    return np.round(frame * 255.0).astype(np.uint8)


# -----------------------------------------------------------------------------
# Narration
# -----------------------------------------------------------------------------

_DIRECTION_WORDS = {
    (1, 0): ["right"], (-1, 0): ["left"], (0, -1): ["up"], (0, 1): ["down"],
    (1, -1): ["up", "and", "right"], (-1, -1): ["up", "and", "left"],
    (1, 1): ["down", "and", "right"], (-1, 1): ["down", "and", "left"],
}


def _region_words(pos: Tuple[float, float]) -> List[str]:
    x, y = pos
    if y < 0.35:
        return ["near", "the", "top"]
    if y > 0.65:
        return ["near", "the", "bottom"]
    if x < 0.35:
        return ["near", "the", "left"]
    if x > 0.65:
        return ["near", "the", "right"]
    return ["in", "the", "middle"]


def describe(scene: SceneSpec, t: float, rng: np.random.Generator) -> List[str]:
    """One phrase (at most five words) that is true of the scene at time t"""
    index, seg = scene.segment_at(t)
    pos = seg.position(t)
    if index > 0 and t - seg.t0 < 1.0:
        prev = scene.segments[index - 1]
        events = [["now", "it", "is", seg.color]]
        if seg.moving and prev.moving and tuple(-h for h in prev.heading) == seg.heading:
            events.append(["now", "it", "turns", "around"])
        return events[int(rng.integers(len(events)))]
    if not seg.moving:
        options = [["the", seg.color, scene.shape, "stops"], ["it", "waits"] + _region_words(pos)]
    else:
        heading = _DIRECTION_WORDS[seg.heading]
        verb = "dashes" if scene.motion == "dash" else "moves"
        options = [["it", verb] + heading, ["it", "is"] + _region_words(pos)]
        if len(heading) == 1:
            options.append(["the", seg.color, scene.shape, verb] + heading)
            options.append(["it", "goes"] + heading)
    return options[int(rng.integers(len(options)))]


@dataclass(frozen=True)
class TimedWord:
    word: str
    timestamp: float


@dataclass(frozen=True)
class TimedTranscriptStream:
    """A video's narration: words with nondecreasing timestamps"""
    words: Tuple[TimedWord, ...]
    duration: float

    def __post_init__(self):
        times = [w.timestamp for w in self.words]
        if any(b < a for a, b in zip(times, times[1:])):
            raise DataError("transcript timestamps must be nondecreasing")
        if times and (times[0] < 0 or times[-1] > self.duration):
            raise DataError(f"transcript timestamps must lie in [0, {self.duration}]")

    @property
    def times(self) -> np.ndarray:
        return np.array([w.timestamp for w in self.words], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.words)

    @classmethod
    def from_record(cls, record: TranscriptRecord) -> "TimedTranscriptStream":
        return cls(tuple(TimedWord(w.w, w.s) for w in record.words), record.duration_s)


def narrate(scene: SceneSpec, duration: float, rng: np.random.Generator) -> TimedTranscriptStream:
    words: List[TimedWord] = []
    t = float(rng.uniform(0.0, PHRASE_JITTER))
    while t + 5 * WORD_GAP <= duration:
        for k, word in enumerate(describe(scene, t, rng)):
            words.append(TimedWord(word, round(t + k * WORD_GAP, 2)))
        t += PHRASE_EVERY + float(rng.uniform(0.0, PHRASE_JITTER))
    return TimedTranscriptStream(tuple(words), duration)


def min_window_density(stream: TimedTranscriptStream, span: float) -> int:
    """Fewest words found in any closed window [s, s + span] inside the stream"""
    if span > stream.duration:
        return 0
    times = stream.times
    starts = np.arange(0.0, stream.duration - span + 1e-9, TIME_QUANTUM)
    counts = np.searchsorted(times, starts + span, side="right") - np.searchsorted(times, starts, side="left")
    return int(counts.min())


# -----------------------------------------------------------------------------
# Videos and the corpus on disk
# -----------------------------------------------------------------------------

@dataclass
class NarratedVideo:
    video_id: str
    category: str
    duration: float
    fps: float
    height: int
    width: int
    transcript: TimedTranscriptStream
    scene: SceneSpec
    frames_dir: Optional[Path] = None

    @property
    def frame_count(self) -> int:
        return int(round(self.duration * self.fps))

    def frame_time(self, index: int) -> float:
        return index / self.fps

    def frame(self, index: int) -> np.ndarray:
        """uint8 frame, read from the archive when there is one, else rendered"""
        if not 0 <= index < self.frame_count:
            raise SamplingError(f"{self.video_id}: frame {index} out of range [0, {self.frame_count})")
        if self.frames_dir is not None:
            raw = np.fromfile(self.frames_dir / f"{index:06d}.rgb", dtype=np.uint8)
            if raw.size != self.height * self.width * 3:
                raise DataError(f"{self.video_id}: frame {index} has {raw.size} bytes")
            return raw.reshape(self.height, self.width, 3)
        return render_frame(self.scene, self.frame_time(index), self.height, self.width)

    def frames(self, indices: Iterable[int]) -> np.ndarray:
        """Frames as floats in [0, 1], shape (n, H, W, 3)"""
        return np.stack([self.frame(i) for i in indices]).astype(np.float64) / 255.0


def _generate_one(index: int, config: GenConfig, seed: int) -> Tuple[NarratedVideo, List[np.ndarray]]:
    rng = np.random.default_rng([seed, index])
    category = CATEGORIES[index % len(CATEGORIES)]
    scene = make_scene(category, config.duration, rng)
    stream = narrate(scene, config.duration, rng)
    density = min_window_density(stream, config.window_seconds)
    if density < config.min_words:
        raise ConfigError(
            f"narration too sparse: a {config.window_seconds}s window holds only {density} words "
            f"(min_words={config.min_words}); raise window_seconds or lower min_words"
        )
    video = NarratedVideo(
        video_id=f"v{index:05d}", category=category, duration=config.duration, fps=config.fps,
        height=config.height, width=config.width, transcript=stream, scene=scene,
    )
    frames = [render_frame(scene, video.frame_time(i), config.height, config.width) for i in range(video.frame_count)]
    return video, frames


def _write_video(out: Path, video: NarratedVideo, frames: List[np.ndarray]) -> str:
    frame_dir = out / "frames" / video.video_id
    frame_dir.mkdir(parents=True, exist_ok=True)
    digest = hashlib.sha256()
    for i, frame in enumerate(frames):
        data = np.ascontiguousarray(frame, dtype=np.uint8).tobytes()
        (frame_dir / f"{i:06d}.rgb").write_bytes(data)
        digest.update(data)
    return digest.hexdigest()


def generate_corpus(config: GenConfig, seed: int, out: Union[str, Path]) -> str:
    """
    Write `config.count` narrated videos under `out`; returns the manifest's sha256.

    Layout: manifest.json, transcripts.jsonl, vocab.json and frames/<video_id>/<index>.rgb.
    Category of video i is CATEGORIES[i % 10], so counts are stratified.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)

    def work(index: int) -> Tuple[NarratedVideo, str]:
        video, frames = _generate_one(index, config, seed)
        return video, _write_video(out, video, frames)

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        results = list(pool.map(work, range(config.count)))

    entries = {}
    records = []
    for video, digest in results:
        entries[video.video_id] = ManifestEntry(
            fps=video.fps, height=video.height, width=video.width, count=video.frame_count,
            category=video.category, frames_sha256=digest, scene=video.scene.to_dict(),
        )
        records.append(TranscriptRecord(
            video_id=video.video_id, duration_s=video.duration, category=video.category,
            words=[WordRecord(w=w.word, s=w.timestamp) for w in video.transcript.words],
        ))
    manifest = Manifest(seed=seed, config=config, categories=list(CATEGORIES), videos=entries)
    manifest_bytes = json.dumps(manifest.model_dump(mode="json"), sort_keys=True, indent=2).encode("utf-8")
    (out / "manifest.json").write_bytes(manifest_bytes)
    with open(out / "transcripts.jsonl", "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record.model_dump(mode="json"), sort_keys=True) + "\n")
    (out / "vocab.json").write_text(json.dumps(sorted(set(PHRASE_WORDS)), indent=2), encoding="utf-8")
    manifest_hash = hashlib.sha256(manifest_bytes).hexdigest()
    logger.info(f"✅ Wrote {config.count} videos to {out} (manifest {manifest_hash[:12]})")
    return manifest_hash


class Corpus:
    """Read-only view of a generated corpus directory"""

    def __init__(self, root: Path, manifest: Manifest, videos: Dict[str, NarratedVideo], vocab: "Vocabulary"):
        self.root = root
        self.manifest = manifest
        self.videos = videos
        self.vocab = vocab

    @classmethod
    def open(cls, root: Union[str, Path]) -> "Corpus":
        root = Path(root)
        try:
            manifest = Manifest.model_validate_json((root / "manifest.json").read_text(encoding="utf-8"))
            lines = (root / "transcripts.jsonl").read_text(encoding="utf-8").splitlines()
            vocab = Vocabulary(json.loads((root / "vocab.json").read_text(encoding="utf-8")))
        except FileNotFoundError as exc:
            raise DataError(f"{root} is not a corpus directory: {exc.filename} missing") from exc
        videos: Dict[str, NarratedVideo] = {}
        for line in lines:
            if not line.strip():
                continue
            record = TranscriptRecord.model_validate_json(line)
            entry = manifest.videos.get(record.video_id)
            if entry is None:
                raise DataError(f"transcript for unknown video {record.video_id}")
            videos[record.video_id] = NarratedVideo(
                video_id=record.video_id, category=record.category, duration=record.duration_s,
                fps=entry.fps, height=entry.height, width=entry.width,
                transcript=TimedTranscriptStream.from_record(record),
                scene=SceneSpec.from_dict(entry.scene),
                frames_dir=root / "frames" / record.video_id,
            )
        logger.info(f"Opened corpus {root} with {len(videos)} videos")
        return cls(root, manifest, videos, vocab)

    @property
    def ids(self) -> List[str]:
        return sorted(self.videos)

    @property
    def categories(self) -> List[str]:
        return list(self.manifest.categories)

    def __len__(self) -> int:
        return len(self.videos)

    def __getitem__(self, video_id: str) -> NarratedVideo:
        return self.videos[video_id]

    def category_index(self, video_id: str) -> int:
        return self.categories.index(self.videos[video_id].category)

    def split(self, holdout_fraction: float, seed: int) -> Tuple[List[str], List[str]]:
        """Stratified (train_ids, held_out_ids); round(fraction * n) ids per category are held out"""
        rng = np.random.default_rng([seed, 3])
        train: List[str] = []
        held: List[str] = []
        for category in self.categories:
            members = [vid for vid in self.ids if self.videos[vid].category == category]
            order = rng.permutation(len(members))
            n_held = int(round(holdout_fraction * len(members)))
            held.extend(members[i] for i in order[:n_held])
            train.extend(members[i] for i in order[n_held:])
        return sorted(train), sorted(held)


# -----------------------------------------------------------------------------
# Transcript windows
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class TranscriptWindow:
    """
    K transcripts cut from one stream.

    spans are in true chronological order; texts are in slot order, where slot i
    holds the transcript whose true position is order[i] (0-based).
    """
    s_begin: float
    span: float
    spans: Tuple[Tuple[float, float], ...]
    texts: Tuple[Tuple[str, ...], ...]
    order: Tuple[int, ...]

    @property
    def num_transcripts(self) -> int:
        return len(self.spans)

    @property
    def start(self) -> float:
        return self.spans[0][0]

    @property
    def end(self) -> float:
        return self.spans[-1][1]

    @property
    def is_identity(self) -> bool:
        return self.order == tuple(range(len(self.order)))

    def unshuffle(self) -> "TranscriptWindow":
        true_texts: List[Tuple[str, ...]] = [()] * len(self.texts)
        for slot, position in enumerate(self.order):
            true_texts[position] = self.texts[slot]
        return TranscriptWindow(self.s_begin, self.span, self.spans, tuple(true_texts),
                                tuple(range(len(self.texts))))

    def permute(self, order: Sequence[int]) -> "TranscriptWindow":
        """Reorder so that slot i holds true transcript order[i]"""
        order = tuple(int(o) for o in order)
        if sorted(order) != list(range(self.num_transcripts)):
            raise ConfigError(f"{order} is not a permutation of 0..{self.num_transcripts - 1}")
        true_texts = self.unshuffle().texts
        return TranscriptWindow(self.s_begin, self.span, self.spans,
                                tuple(true_texts[o] for o in order), order)


def transcript_spans(s_begin: float, num: int, span: float) -> List[Tuple[float, float]]:
    """[S_k, E_k] with S_k = s_begin + k (span + 1) and E_k = S_k + span"""
    spans = []
    for k in range(num):
        start = s_begin + k * (span + GAP_SECONDS)
        spans.append((start, start + span))
    return spans


def sample_transcript_window(stream: TimedTranscriptStream, s_begin: float, num: int,
                             span: float) -> TranscriptWindow:
    """Cut K consecutive transcripts separated by 1 s gaps; words in the gaps are dropped"""
    if num < 2:
        raise ConfigError(f"a window needs K >= 2 transcripts, got {num}")
    if span <= 0:
        raise ConfigError(f"transcript span must be > 0, got {span}")
    needed = num * span + (num - 1) * GAP_SECONDS
    if s_begin < 0 or s_begin + needed > stream.duration:
        raise WindowRangeError(
            f"window [{s_begin}, {s_begin + needed}] exceeds the stream duration {stream.duration}"
        )
    spans = transcript_spans(s_begin, num, span)
    times = stream.times
    texts = []
    for k, (start, end) in enumerate(spans):
        lo = int(np.searchsorted(times, start, side="left"))
        hi = int(np.searchsorted(times, end, side="right"))
        words = tuple(w.word for w in stream.words[lo:hi])
        if not words:
            raise EmptyTranscriptError(f"transcript {k} over [{start}, {end}] is empty", transcript_index=k)
        texts.append(words)
    return TranscriptWindow(s_begin, span, tuple(spans), tuple(texts), tuple(range(num)))


def shuffle_transcripts(window: TranscriptWindow, rng: np.random.Generator) -> TranscriptWindow:
    if window.num_transcripts < 2:
        raise ConfigError("shuffling needs K >= 2")
    return window.permute(rng.permutation(window.num_transcripts))


def quantize_time(t: float) -> float:
    return math.floor(t / TIME_QUANTUM) * TIME_QUANTUM


def draw_window(stream: TimedTranscriptStream, num: int, span_range: Tuple[float, float],
                rng: np.random.Generator, retries: int = MAX_WINDOW_RETRIES) -> Optional[TranscriptWindow]:
    """
    Random unshuffled window, or None when `retries` starts all gave an empty transcript.

    s_begin (and l when a range is given) are multiples of 1/64 s, so the span
    arithmetic is exact in binary floating point.
    """
    low, high = span_range
    for _ in range(retries):
        span = low if high <= low else max(quantize_time(float(rng.uniform(low, high))), TIME_QUANTUM)
        room = stream.duration - (num * span + (num - 1) * GAP_SECONDS)
        if room < 0:
            raise WindowRangeError(f"K={num}, l={span} does not fit in {stream.duration}s")
        s_begin = quantize_time(float(rng.uniform(0.0, room)))
        try:
            return sample_transcript_window(stream, s_begin, num, span)
        except EmptyTranscriptError:
            continue
    return None


# -----------------------------------------------------------------------------
# Frames
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class ClipFrames:
    frames: np.ndarray  # (M, H, W, 3) in [0, 1]
    timestamps: Tuple[float, ...]
    frame_indices: Tuple[int, ...] = ()

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def segment_frame_indices(video: NarratedVideo, s_first: float, e_last: float, num: int) -> List[np.ndarray]:
    """Stored frame indices falling in each of `num` equal segments of [s_first, e_last]"""
    times = np.arange(video.frame_count) / video.fps
    width = (e_last - s_first) / num
    out = []
    for j in range(num):
        lo = s_first + j * width
        hi = s_first + (j + 1) * width
        if j == num - 1:
            inside = (times >= lo) & (times <= e_last)
        else:
            inside = (times >= lo) & (times < hi)
        out.append(np.nonzero(inside)[0])
    return out


def sample_clip_frames(video: NarratedVideo, s_first: float, e_last: float, num: int,
                       rng: Optional[np.random.Generator] = None, center: bool = False) -> ClipFrames:
    """
    Segment-based frame sampling: split [s_first, e_last] into `num` equal parts and
    take one stored frame from each, uniformly at random (or the middle one).
    """
    if num < 1:
        raise ConfigError(f"need at least one frame, got M={num}")
    if e_last <= s_first:
        raise SamplingError(f"empty sampling range [{s_first}, {e_last}]")
    chosen = []
    for j, candidates in enumerate(segment_frame_indices(video, s_first, e_last, num)):
        if candidates.size == 0:
            raise SamplingError(
                f"{video.video_id}: segment {j} of [{s_first}, {e_last}] holds no frame at {video.fps} fps; "
                f"raise fps or lower M={num}"
            )
        if center or rng is None:
            chosen.append(int(candidates[(candidates.size - 1) // 2]))
        else:
            chosen.append(int(candidates[int(rng.integers(candidates.size))]))
    return ClipFrames(
        frames=video.frames(chosen),
        timestamps=tuple(video.frame_time(i) for i in chosen),
        frame_indices=tuple(chosen),
    )


def crop_and_resize(frames: np.ndarray, box: Tuple[int, int, int], height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resize of the square crop (top, left, side) back to height x width"""
    top, left, side = box
    rows = top + (np.arange(height) * side) // height
    cols = left + (np.arange(width) * side) // width
    return frames[:, rows[:, None], cols[None, :], :]


def crop_box(height: int, width: int, scale: float, rng: Optional[np.random.Generator]) -> Tuple[int, int, int]:
    """Square box of side round(min(H, W) / scale); random offset, or centred when rng is None"""
    side = max(1, int(round(min(height, width) / scale)))
    if rng is None:
        return (height - side) // 2, (width - side) // 2, side
    return int(rng.integers(height - side + 1)), int(rng.integers(width - side + 1)), side


def augment_clip(clip: ClipFrames, scale: float, rng: Optional[np.random.Generator]) -> ClipFrames:
    """Same crop for every frame of the clip"""
    if scale <= 1.0:
        return clip
    h, w = clip.frames.shape[1:3]
    frames = crop_and_resize(clip.frames, crop_box(h, w, scale, rng), h, w)
    return ClipFrames(frames=frames, timestamps=clip.timestamps, frame_indices=clip.frame_indices)


# -----------------------------------------------------------------------------
# Masks
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class MaskPattern:
    """visible[s] lists the kept spatial indices of temporal slice s, ascending"""
    visible: np.ndarray  # (num_slices, n_visible) int
    ratio: float
    tokens_per_slice: int

    @property
    def num_slices(self) -> int:
        return self.visible.shape[0]

    @property
    def visible_per_slice(self) -> int:
        return self.visible.shape[1]

    @property
    def num_visible(self) -> int:
        return int(self.visible.size)


def visible_count(tokens_per_slice: int, ratio: float) -> int:
    return int(round((1.0 - ratio) * tokens_per_slice))


def build_mask(tokens_per_slice: int, num_slices: int, ratio: float,
               rng: Optional[np.random.Generator] = None) -> MaskPattern:
    """Independent uniform choice of round((1 - ratio) * tokens_per_slice) tokens per slice"""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"mask ratio must be in [0, 1), got {ratio}")
    keep = visible_count(tokens_per_slice, ratio)
    if keep < 1:
        raise ConfigError(f"mask ratio {ratio} leaves no visible token out of {tokens_per_slice}")
    if keep == tokens_per_slice:
        visible = np.tile(np.arange(tokens_per_slice), (num_slices, 1))
    else:
        if rng is None:
            raise ConfigError("a random mask needs an rng")
        noise = rng.random((num_slices, tokens_per_slice))
        visible = np.sort(np.argsort(noise, axis=1, kind="stable")[:, :keep], axis=1)
    return MaskPattern(visible=visible.astype(np.int64), ratio=ratio, tokens_per_slice=tokens_per_slice)


# -----------------------------------------------------------------------------
# Text
# -----------------------------------------------------------------------------

class Vocabulary:
    """[PAD]=0, [CLS]=1, [UNK]=2, then the corpus words in sorted order"""

    def __init__(self, words: Iterable[str]):
        words = sorted({w.lower() for w in words} - set(SPECIAL_TOKENS))
        self.itos: List[str] = list(SPECIAL_TOKENS) + words
        self.stoi: Dict[str, int] = {w: i for i, w in enumerate(self.itos)}

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @property
    def cls_id(self) -> int:
        return self.stoi[CLS]

    @property
    def unk_id(self) -> int:
        return self.stoi[UNK]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def id_of(self, word: str) -> int:
        return self.stoi.get(word.lower(), self.unk_id)

    def word_of(self, index: int) -> str:
        if not 0 <= index < len(self.itos):
            raise VocabError(f"token id {index} outside vocabulary of size {len(self.itos)}")
        return self.itos[index]

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(PHRASE_WORDS)


def tokenize(text: Union[str, Sequence[str]], vocab: Vocabulary, max_len: int) -> List[int]:
    """[CLS] + lowercased whitespace tokens (unknown -> [UNK]), cut/padded to max_len"""
    words = text.lower().split() if isinstance(text, str) else [w.lower() for w in text]
    ids = [vocab.cls_id] + [vocab.id_of(w) for w in words]
    ids = ids[:max_len]
    return ids + [vocab.pad_id] * (max_len - len(ids))


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.word_of(int(i)) for i in ids if int(i) not in (vocab.pad_id, vocab.cls_id))
