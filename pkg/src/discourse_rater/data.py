"""Dataset model, file formats, aggregation rules, and a synthetic generator.

A lesson is split into 16-minute segments; each segment carries three
pre-extracted feature sequences (utterance text embeddings, 10-second audio
chunk embeddings, 10-second video window embeddings) and one rating per
discourse component.  Feature sequences live in a small binary container
("DFX1") and the dataset manifest is a JSON document, so anything that can
produce these two artifacts can feed the models.

The synthetic generator plants a per-component linear signal into the
embeddings, which makes learnability quantifiable: a simple linear readout
bounds what any model should achieve on the generated data.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import DataError, FormatError, UsageError
from .objective import COMPONENTS, RATINGS, rating_to_index

TEXT_DIM = 768
AUDIO_DIM = 1024
VIDEO_DIM = 768

SEGMENT_S = 960.0       # 16-minute rating window
MIN_REMAINDER_S = 480.0  # shorter leftovers merge into the previous window
CHUNK_S = 10.0

FEATURE_MAGIC = b"DFX1"

_MODALITY_DIMS = {"text": TEXT_DIM, "audio": AUDIO_DIM, "video": VIDEO_DIM}


@dataclass
class SegmentFeatures:
    """Feature sequences for one lesson segment.

    Absent modalities are encoded as arrays with zero rows.
    """

    segment_id: str
    teacher_id: str
    lesson_id: str
    text: np.ndarray
    audio: np.ndarray
    video: np.ndarray
    duration_s: float = SEGMENT_S

    def modality(self, name: str) -> np.ndarray:
        try:
            return getattr(self, name)
        except AttributeError:
            raise UsageError(f"unknown modality {name!r}") from None

    def validate(self) -> None:
        for name, dim in _MODALITY_DIMS.items():
            arr = self.modality(name)
            if arr.ndim != 2:
                raise DataError(f"segment {self.segment_id}: {name} must be 2-D")
            if arr.shape[0] > 0 and arr.shape[1] != dim:
                raise DataError(
                    f"segment {self.segment_id}: {name} width {arr.shape[1]} != {dim}"
                )
            if arr.size and not np.isfinite(arr).all():
                raise DataError(f"segment {self.segment_id}: {name} has non-finite entries")
        if self.audio.shape[0] > 0 and self.video.shape[0] > 0 \
                and self.audio.shape[0] != self.video.shape[0]:
            raise DataError(
                f"segment {self.segment_id}: audio/video chunk counts differ "
                f"({self.audio.shape[0]} vs {self.video.shape[0]})"
            )


@dataclass
class SegmentRecord:
    segment_id: str
    teacher_id: str
    lesson_id: str
    path: str
    labels: dict[str, float]


@dataclass
class RaterRecord:
    segment_id: str
    rater_id: str
    component: str
    score: int


@dataclass
class StudentRecord:
    student_id: str
    teacher_id: str
    test_score: float
    interest: float
    self_efficacy: float


@dataclass
class DatasetManifest:
    segments: list[SegmentRecord] = field(default_factory=list)
    rater_records: list[RaterRecord] = field(default_factory=list)
    student_records: list[StudentRecord] = field(default_factory=list)

    def teacher_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for seg in self.segments:
            seen.setdefault(seg.teacher_id, None)
        return list(seen)

    def segments_by_teacher(self) -> dict[str, list[SegmentRecord]]:
        out: dict[str, list[SegmentRecord]] = {}
        for seg in self.segments:
            out.setdefault(seg.teacher_id, []).append(seg)
        return out

    def validate(self) -> None:
        seen_ids: set[str] = set()
        for seg in self.segments:
            if seg.segment_id in seen_ids:
                raise DataError(f"duplicate segment id {seg.segment_id!r}")
            seen_ids.add(seg.segment_id)
            for component in COMPONENTS:
                if component not in seg.labels:
                    raise DataError(f"segment {seg.segment_id}: missing label {component!r}")
                rating_to_index(seg.labels[component])
        if self.rater_records:
            counts: dict[tuple[str, str], set[str]] = {}
            for rec in self.rater_records:
                if rec.component not in COMPONENTS:
                    raise DataError(f"unknown component {rec.component!r} in rater records")
                if not 1 <= int(rec.score) <= 4:
                    raise DataError(f"rater score {rec.score} outside 1..4")
                counts.setdefault((rec.segment_id, rec.component), set()).add(rec.rater_id)
            for seg in self.segments:
                for component in COMPONENTS:
                    raters = counts.get((seg.segment_id, component), set())
                    if len(raters) != 2:
                        raise DataError(
                            f"segment {seg.segment_id}: expected 2 raters for "
                            f"{component}, found {len(raters)}"
                        )

    def to_json(self) -> str:
        doc = {
            "segments": [asdict(s) for s in self.segments],
            "rater_records": [asdict(r) for r in self.rater_records],
            "student_records": [asdict(r) for r in self.student_records],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest is not valid JSON: {exc}") from exc
        try:
            return cls(
                segments=[SegmentRecord(**s) for s in doc.get("segments", [])],
                rater_records=[RaterRecord(**r) for r in doc.get("rater_records", [])],
                student_records=[StudentRecord(**r) for r in doc.get("student_records", [])],
            )
        except TypeError as exc:
            raise FormatError(f"manifest field mismatch: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


# -- preprocessing rules -------------------------------------------------------


def segment_boundaries(lesson_duration_s: float) -> list[tuple[float, float]]:
    """Split a lesson into consecutive 16-minute windows.

    A final remainder shorter than 8 minutes merges into the previous window;
    a lesson shorter than one window is a single segment.
    """
    if lesson_duration_s <= 0:
        raise DataError(f"lesson duration must be positive, got {lesson_duration_s}")
    if lesson_duration_s <= SEGMENT_S:
        return [(0.0, float(lesson_duration_s))]
    bounds = []
    start = 0.0
    while start + SEGMENT_S <= lesson_duration_s:
        bounds.append((start, start + SEGMENT_S))
        start += SEGMENT_S
    remainder = lesson_duration_s - start
    if remainder > 0:
        if remainder < MIN_REMAINDER_S:
            bounds[-1] = (bounds[-1][0], float(lesson_duration_s))
        else:
            bounds.append((start, float(lesson_duration_s)))
    return bounds


def aggregate_words_to_utterances(word_embs: np.ndarray,
                                  utterance_spans: Sequence[tuple[int, int]]) -> np.ndarray:
    """Mean word embeddings within each utterance span.

    Spans are half-open [start, end) index ranges that must partition the
    word rows in order.
    """
    word_embs = np.asarray(word_embs)
    cursor = 0
    rows = []
    for start, end in utterance_spans:
        if start != cursor:
            raise DataError(f"utterance spans must tile the words; gap/overlap at {start}")
        if end <= start:
            raise DataError(f"empty utterance span [{start}, {end})")
        rows.append(word_embs[start:end].mean(axis=0))
        cursor = end
    if cursor != word_embs.shape[0]:
        raise DataError(f"utterance spans cover {cursor} of {word_embs.shape[0]} words")
    return np.stack(rows).astype(word_embs.dtype)


def aggregate_to_chunks(frame_embs: np.ndarray, rate_hz: float,
                        window_s: float = CHUNK_S) -> np.ndarray:
    """Mean frame embeddings over non-overlapping windows of ``window_s``.

    The final partial window is kept as long as it holds at least one frame,
    so the chunk count is ceil(frames / (rate * window)).
    """
    frame_embs = np.asarray(frame_embs)
    if frame_embs.ndim != 2 or frame_embs.shape[0] < 1:
        raise DataError(f"frame embeddings must be a nonempty [F, d] array, got {frame_embs.shape}")
    per_window = rate_hz * window_s
    if per_window <= 0:
        raise UsageError("rate_hz and window_s must be positive")
    n_frames = frame_embs.shape[0]
    n_chunks = int(np.ceil(n_frames / per_window))
    rows = []
    for k in range(n_chunks):
        lo = int(np.floor(k * per_window))
        hi = min(int(np.floor((k + 1) * per_window)), n_frames)
        rows.append(frame_embs[lo:hi].mean(axis=0))
    return np.stack(rows).astype(frame_embs.dtype)


def average_rater_scores(rater_records: Iterable[RaterRecord],
                         segment_id: str, component: str) -> float:
    """Mean of the two integer rater scores for a segment/component."""
    scores = [int(r.score) for r in rater_records
              if r.segment_id == segment_id and r.component == component]
    if len(scores) != 2:
        raise DataError(
            f"segment {segment_id}/{component}: expected exactly 2 ratings, got {len(scores)}"
        )
    for s in scores:
        if not 1 <= s <= 4:
            raise DataError(f"segment {segment_id}/{component}: score {s} outside 1..4")
    return (scores[0] + scores[1]) / 2.0


# -- feature files ---------------------------------------------------------------


def write_feature_file(path: str | Path, seg: SegmentFeatures) -> None:
    """Serialize the three feature matrices to the "DFX1" binary container."""
    blocks = []
    for name in ("text", "audio", "video"):
        arr = np.ascontiguousarray(seg.modality(name), dtype="<f4")
        if arr.ndim != 2:
            raise UsageError(f"{name} features must be 2-D")
        blocks.append(struct.pack("<II", arr.shape[0], arr.shape[1]) + arr.tobytes())
    Path(path).write_bytes(FEATURE_MAGIC + b"".join(blocks))


def read_feature_file(path: str | Path, segment_id: str = "", teacher_id: str = "",
                      lesson_id: str = "", duration_s: float = SEGMENT_S) -> SegmentFeatures:
    """Read a "DFX1" file; malformed input raises with the failing byte offset."""
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}", offset=0)
    offset = 4
    arrays = []
    for name, dim in _MODALITY_DIMS.items():
        if len(raw) < offset + 8:
            raise FormatError(f"{path}: truncated {name} header", offset=offset)
        rows, cols = struct.unpack_from("<II", raw, offset)
        if rows > 0 and cols != dim:
            raise FormatError(f"{path}: {name} width {cols} != {dim}", offset=offset + 4)
        offset += 8
        nbytes = rows * cols * 4
        if len(raw) < offset + nbytes:
            raise FormatError(f"{path}: truncated {name} data", offset=len(raw))
        arr = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=offset)
        arrays.append(arr.reshape(rows, cols).copy())
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes", offset=offset)
    return SegmentFeatures(segment_id=segment_id, teacher_id=teacher_id,
                           lesson_id=lesson_id, text=arrays[0], audio=arrays[1],
                           video=arrays[2], duration_s=duration_s)


# -- dataset containers ------------------------------------------------------------


class Example(NamedTuple):
    features: SegmentFeatures
    labels: dict[str, float]


@dataclass
class Dataset:
    """A manifest plus its feature matrices held in memory."""

    manifest: DatasetManifest
    features: dict[str, SegmentFeatures]

    @classmethod
    def load(cls, root: str | Path, manifest_name: str = "manifest.json") -> "Dataset":
        root = Path(root)
        manifest = DatasetManifest.load(root / manifest_name)
        manifest.validate()
        features = {}
        for seg in manifest.segments:
            feats = read_feature_file(root / seg.path, segment_id=seg.segment_id,
                                      teacher_id=seg.teacher_id, lesson_id=seg.lesson_id)
            feats.validate()
            features[seg.segment_id] = feats
        return cls(manifest=manifest, features=features)

    def examples(self, segment_ids: Sequence[str] | None = None) -> list[Example]:
        wanted = None if segment_ids is None else set(segment_ids)
        out = []
        for seg in self.manifest.segments:
            if wanted is None or seg.segment_id in wanted:
                out.append(Example(self.features[seg.segment_id], dict(seg.labels)))
        return out

    def examples_for_teachers(self, teacher_ids: Iterable[str]) -> list[Example]:
        teachers = set(teacher_ids)
        return [Example(self.features[s.segment_id], dict(s.labels))
                for s in self.manifest.segments if s.teacher_id in teachers]


# -- synthetic data -----------------------------------------------------------------


def uniform_signal(strength: float) -> dict[str, dict[str, float]]:
    """Same planted-signal strength for every (modality, component) pair."""
    return {m: {c: float(strength) for c in COMPONENTS} for m in _MODALITY_DIMS}


@dataclass
class SynthConfig:
    """Controls for the planted-signal synthetic dataset.

    ``signal_strength[modality][component]`` in [0, 1] scales how strongly a
    component's latent quality is written into that modality's embeddings
    along a fixed random direction.  ``label_correlation`` couples the three
    latent qualities; 1.0 makes the three label sequences identical.
    """

    n_teachers: int = 10
    segments_per_teacher: int = 4
    lessons_per_teacher: int = 2
    text_len: tuple[int, int] = (5, 9)
    chunk_len: tuple[int, int] = (6, 10)
    signal_strength: dict[str, dict[str, float]] = field(
        default_factory=lambda: uniform_signal(0.8))
    label_correlation: float = 0.3
    noise_sd: float = 0.1
    rater_noise_sd: float = 0.4
    students_per_teacher: int = 0
    outcome_noise_sd: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.n_teachers < 1 or self.segments_per_teacher < 1:
            raise UsageError("need at least one teacher and one segment per teacher")
        if not 0.0 <= self.label_correlation <= 1.0:
            raise UsageError("label_correlation must lie in [0, 1]")
        for modality, per_component in self.signal_strength.items():
            if modality not in _MODALITY_DIMS:
                raise UsageError(f"unknown modality {modality!r} in signal_strength")
            for component, value in per_component.items():
                if component not in COMPONENTS:
                    raise UsageError(f"unknown component {component!r} in signal_strength")
                if not 0.0 <= value <= 1.0:
                    raise UsageError("signal strengths must lie in [0, 1]")


def _nearest_rating(value: float) -> float:
    return RATINGS[int(np.argmin([abs(value - r) for r in RATINGS]))]


def _correlated_latents(rng: np.random.Generator, rho: float) -> dict[str, float]:
    shared = rng.standard_normal()
    return {c: np.sqrt(rho) * shared + np.sqrt(1.0 - rho) * rng.standard_normal()
            for c in COMPONENTS}


def _gauss_to_quality(z: float) -> float:
    """Map a standard normal draw to a latent quality in [1, 4]."""
    from scipy.special import ndtr

    return 1.0 + 3.0 * float(ndtr(z))


def generate_synthetic(cfg: SynthConfig, out_dir: str | Path | None = None) -> Dataset:
    """Generate a planted-signal dataset; optionally write it to disk.

    Per segment, three correlated latent qualities in [1, 4] drive both the
    labels and the embeddings.  Two synthetic raters quantize each quality:
    their base scores bracket the nearest half-point rating, independent
    Gaussian noise (``rater_noise_sd``) perturbs them, and the stored label is
    their mean, so the double-rating invariant holds by construction and with
    zero rater noise the label is exactly the nearest rating to the latent.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)

    directions = {
        m: {c: _unit_vector(rng, dim) for c in COMPONENTS}
        for m, dim in _MODALITY_DIMS.items()
    }
    teacher_effects = [_correlated_latents(rng, cfg.label_correlation)
                       for _ in range(cfg.n_teachers)]

    manifest = DatasetManifest()
    features: dict[str, SegmentFeatures] = {}
    for t in range(cfg.n_teachers):
        teacher_id = f"t{t:03d}"
        rater_a = f"r{(2 * t) % (cfg.n_teachers + 3):03d}"
        rater_b = f"r{(2 * t + 1) % (cfg.n_teachers + 3):03d}"
        for s in range(cfg.segments_per_teacher):
            lesson = s * cfg.lessons_per_teacher // max(cfg.segments_per_teacher, 1)
            lesson_id = f"{teacher_id}-l{lesson}"
            segment_id = f"{teacher_id}-l{lesson}-s{s:02d}"

            seg_latent = _correlated_latents(rng, cfg.label_correlation)
            quality = {
                c: _gauss_to_quality(
                    np.sqrt(0.5) * teacher_effects[t][c] + np.sqrt(0.5) * seg_latent[c])
                for c in COMPONENTS
            }

            labels: dict[str, float] = {}
            for c in COMPONENTS:
                nearest = _nearest_rating(quality[c])
                base_low, base_high = np.floor(nearest), np.ceil(nearest)
                score_a = _noisy_score(base_low, cfg.rater_noise_sd, rng)
                score_b = _noisy_score(base_high, cfg.rater_noise_sd, rng)
                manifest.rater_records.append(RaterRecord(segment_id, rater_a, c, score_a))
                manifest.rater_records.append(RaterRecord(segment_id, rater_b, c, score_b))
                labels[c] = (score_a + score_b) / 2.0

            text_len = int(rng.integers(cfg.text_len[0], cfg.text_len[1] + 1))
            chunk_len = int(rng.integers(cfg.chunk_len[0], cfg.chunk_len[1] + 1))
            arrays = {}
            for modality, dim in _MODALITY_DIMS.items():
                length = text_len if modality == "text" else chunk_len
                base = cfg.noise_sd * rng.standard_normal((length, dim))
                for c in COMPONENTS:
                    strength = cfg.signal_strength.get(modality, {}).get(c, 0.0)
                    base += strength * quality[c] * directions[modality][c][None, :]
                arrays[modality] = base.astype(np.float32)

            feats = SegmentFeatures(segment_id=segment_id, teacher_id=teacher_id,
                                    lesson_id=lesson_id, text=arrays["text"],
                                    audio=arrays["audio"], video=arrays["video"],
                                    duration_s=chunk_len * CHUNK_S)
            features[segment_id] = feats
            manifest.segments.append(SegmentRecord(
                segment_id=segment_id, teacher_id=teacher_id, lesson_id=lesson_id,
                path=f"features/{segment_id}.dfx", labels=labels))

        for n in range(cfg.students_per_teacher):
            aggregates = _teacher_label_aggregate(manifest, teacher_id)
            manifest.student_records.append(StudentRecord(
                student_id=f"{teacher_id}-st{n:03d}",
                teacher_id=teacher_id,
                test_score=aggregates["nature"] + cfg.outcome_noise_sd * rng.standard_normal(),
                interest=aggregates["questioning"] + cfg.outcome_noise_sd * rng.standard_normal(),
                self_efficacy=aggregates["explanations"]
                + cfg.outcome_noise_sd * rng.standard_normal(),
            ))

    dataset = Dataset(manifest=manifest, features=features)
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "features").mkdir(parents=True, exist_ok=True)
        for seg in manifest.segments:
            write_feature_file(out_dir / seg.path, features[seg.segment_id])
        manifest.save(out_dir / "manifest.json")
    return dataset


def _unit_vector(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _noisy_score(base: float, noise_sd: float, rng: np.random.Generator) -> int:
    noisy = base if noise_sd <= 0 else base + noise_sd * rng.standard_normal()
    return int(min(max(round(noisy), 1), 4))


def _teacher_label_aggregate(manifest: DatasetManifest, teacher_id: str) -> dict[str, float]:
    """Mean label over segments within each lesson, then over lessons."""
    by_lesson: dict[str, list[dict[str, float]]] = {}
    for seg in manifest.segments:
        if seg.teacher_id == teacher_id:
            by_lesson.setdefault(seg.lesson_id, []).append(seg.labels)
    out = {}
    for c in COMPONENTS:
        lesson_means = [float(np.mean([labels[c] for labels in group]))
                        for group in by_lesson.values()]
        out[c] = float(np.mean(lesson_means))
    return out
