"""Dataset manifests, artist-exclusive splits, and segment indexing.

A manifest is a UTF-8 CSV with a header row and columns::

    clip_id, audio_path, artist, domain, <7 feature columns>

The seven feature columns follow ``FEATURE_NAMES`` order exactly and are
left empty for unlabelled (target-domain) clips.
"""

from __future__ import annotations

import csv
import math
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# Fixed order of the seven mid-level features.  Serialized column order,
# label vectors, and model outputs all follow this order.
FEATURE_NAMES = (
    "melodiousness",
    "articulation",
    "rhythmic_complexity",
    "rhythmic_stability",
    "dissonance",
    "tonal_stability",
    "modality",
)

N_FEATURES = len(FEATURE_NAMES)

LABEL_MIN = 1.0
LABEL_MAX = 10.0

DOMAINS = ("source", "target")

SEGMENT_LENGTH_S = 15


class ManifestError(ValueError):
    """Malformed manifest content (bad row, bad label, duplicate id)."""


class SplitError(ValueError):
    """Requested split cannot be realized within tolerance."""


def validate_label_vector(values: Sequence[float]) -> np.ndarray:
    """Check a 7-component label vector and return it as float64."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != (N_FEATURES,):
        raise ManifestError(
            f"label vector must have {N_FEATURES} components, got shape {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise ManifestError("label vector contains non-finite values")
    if np.any(arr < LABEL_MIN) or np.any(arr > LABEL_MAX):
        bad = arr[(arr < LABEL_MIN) | (arr > LABEL_MAX)]
        raise ManifestError(
            f"label components outside [{LABEL_MIN:g}, {LABEL_MAX:g}]: {bad.tolist()}"
        )
    return arr


@dataclass
class ClipRecord:
    """One audio clip: identity, location, artist, domain, optional labels."""

    clip_id: str
    audio_path: str
    artist: str
    domain: str = "source"
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ManifestError(
                f"clip {self.clip_id!r}: domain must be one of {DOMAINS}, got {self.domain!r}"
            )
        if self.labels is not None:
            self.labels = validate_label_vector(self.labels)

    @property
    def labelled(self) -> bool:
        return self.labels is not None


def load_manifest(path: str | Path) -> list[ClipRecord]:
    """Parse a manifest CSV into validated ClipRecords.

    Raises ManifestError on malformed rows, labels outside [1, 10], or
    duplicate clip ids.
    """
    path = Path(path)
    records: list[ClipRecord] = []
    seen: set[str] = set()
    expected_header = ["clip_id", "audio_path", "artist", "domain", *FEATURE_NAMES]
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        if [h.strip() for h in header] != expected_header:
            raise ManifestError(
                f"{path}: bad header; expected {expected_header}, got {header}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(expected_header):
                raise ManifestError(
                    f"{path}:{lineno}: expected {len(expected_header)} cells, got {len(row)}"
                )
            clip_id, audio_path, artist, domain = (c.strip() for c in row[:4])
            label_cells = [c.strip() for c in row[4:]]
            filled = [c for c in label_cells if c]
            if filled and len(filled) != N_FEATURES:
                raise ManifestError(
                    f"{path}:{lineno}: labels must be all present or all empty"
                )
            labels = None
            if filled:
                try:
                    labels = [float(c) for c in label_cells]
                except ValueError as exc:
                    raise ManifestError(f"{path}:{lineno}: bad label cell: {exc}") from None
            if clip_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate clip_id {clip_id!r}")
            seen.add(clip_id)
            try:
                records.append(ClipRecord(clip_id, audio_path, artist, domain, labels))
            except ManifestError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
    return records


def save_manifest(records: Iterable[ClipRecord], path: str | Path,
                  extra_columns: dict[str, Sequence[str]] | None = None) -> None:
    """Write records back out in the standard manifest format.

    ``extra_columns`` appends provenance columns (name -> per-record cells),
    used e.g. for pseudo-labelled sets that record their teacher ids.
    """
    records = list(records)
    extra_columns = extra_columns or {}
    for name, cells in extra_columns.items():
        if len(cells) != len(records):
            raise ValueError(f"extra column {name!r} has {len(cells)} cells for "
                             f"{len(records)} records")
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["clip_id", "audio_path", "artist", "domain",
                         *FEATURE_NAMES, *extra_columns])
        for i, rec in enumerate(records):
            cells = ["" for _ in FEATURE_NAMES]
            if rec.labels is not None:
                cells = [repr(float(v)) for v in rec.labels]
            writer.writerow([rec.clip_id, rec.audio_path, rec.artist, rec.domain,
                             *cells, *(extra_columns[name][i] for name in extra_columns)])


def extract_piano_subset(records: Sequence[ClipRecord],
                         piano_ids: Iterable[str]) -> tuple[list[ClipRecord], list[ClipRecord]]:
    """Partition records into (piano, rest) by an explicit clip-id list."""
    wanted = set(piano_ids)
    known = {rec.clip_id for rec in records}
    unknown = wanted - known
    if unknown:
        raise ManifestError(f"piano list contains unknown clip ids: {sorted(unknown)[:5]}")
    piano = [rec for rec in records if rec.clip_id in wanted]
    rest = [rec for rec in records if rec.clip_id not in wanted]
    return piano, rest


def load_id_list(path: str | Path) -> list[str]:
    """Read a one-clip-id-per-line file (e.g. the piano-subset list)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip()]


BUCKETS = ("train", "validation", "test", "piano_test")


@dataclass
class SplitAssignment:
    """Disjoint clip-id buckets covering a manifest."""

    train: set[str]
    validation: set[str]
    test: set[str]
    piano_test: set[str] = field(default_factory=set)
    seed: int = 0

    def buckets(self) -> dict[str, set[str]]:
        return {"train": self.train, "validation": self.validation,
                "test": self.test, "piano_test": self.piano_test}

    def bucket_of(self, clip_id: str) -> str:
        for name, ids in self.buckets().items():
            if clip_id in ids:
                return name
        raise KeyError(clip_id)

    def save(self, path: str | Path) -> None:
        """One line per clip: ``clip_id<TAB>bucket``, sorted by clip_id."""
        rows = []
        for name, ids in self.buckets().items():
            rows.extend((cid, name) for cid in ids)
        rows.sort()
        Path(path).write_text(
            "".join(f"{cid}\t{name}\n" for cid, name in rows), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, seed: int = 0) -> "SplitAssignment":
        sets: dict[str, set[str]] = {name: set() for name in BUCKETS}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                cid, bucket = line.split("\t")
            except ValueError:
                raise SplitError(f"{path}:{lineno}: expected 'clip_id<TAB>bucket'") from None
            if bucket not in sets:
                raise SplitError(f"{path}:{lineno}: unknown bucket {bucket!r}")
            sets[bucket].add(cid)
        return cls(sets["train"], sets["validation"], sets["test"],
                   sets["piano_test"], seed=seed)


def split_by_artist(records: Sequence[ClipRecord],
                    fractions: tuple[float, float, float] = (0.90, 0.02, 0.08),
                    seed: int = 0,
                    piano_ids: Iterable[str] = (),
                    tolerance: float = 0.02) -> SplitAssignment:
    """Artist-exclusive greedy split of non-piano clips into train/val/test.

    Clips listed in ``piano_ids`` go to the piano_test bucket; the remaining
    clips are assigned artist-by-artist (largest artist first, seeded order
    among equal sizes) to whichever bucket is furthest below its requested
    fraction.  Raises SplitError if any realized fraction ends up more than
    ``tolerance`` away from its request.
    """
    if not records:
        raise SplitError("cannot split an empty manifest")
    if len(fractions) != 3:
        raise SplitError("fractions must be (train, validation, test)")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions must sum to 1, got {sum(fractions)}")

    piano, rest = extract_piano_subset(records, piano_ids)
    piano_set = {rec.clip_id for rec in piano}
    if not rest:
        raise SplitError("no clips left to split after piano extraction")

    by_artist: dict[str, list[str]] = {}
    for rec in rest:
        by_artist.setdefault(rec.artist, []).append(rec.clip_id)

    rng = np.random.default_rng(seed)
    artists = sorted(by_artist)
    rng.shuffle(artists)
    # Stable sort keeps the seeded order among artists of equal size.
    artists.sort(key=lambda a: -len(by_artist[a]))

    total = len(rest)
    targets = [f * total for f in fractions]
    counts = [0, 0, 0]
    assignment: list[set[str]] = [set(), set(), set()]
    for artist in artists:
        deficits = [targets[i] - counts[i] for i in range(3)]
        bucket = max(range(3), key=lambda i: (deficits[i], -i))
        assignment[bucket].update(by_artist[artist])
        counts[bucket] += len(by_artist[artist])

    for i, name in enumerate(("train", "validation", "test")):
        realized = counts[i] / total
        if abs(realized - fractions[i]) > tolerance + 1e-12:
            raise SplitError(
                f"infeasible split: {name} fraction {realized:.4f} deviates more than "
                f"{tolerance:g} from requested {fractions[i]:.4f} "
                f"(artist granularity does not permit this split)")

    return SplitAssignment(assignment[0], assignment[1], assignment[2],
                           piano_set, seed=seed)


@dataclass
class SegmentIndex:
    """Complete 15-second segment offsets for one long recording."""

    recording_path: str
    sample_rate: int
    offsets: list[int]
    segment_length_s: int = SEGMENT_LENGTH_S

    @property
    def segment_samples(self) -> int:
        return self.segment_length_s * self.sample_rate

    def __len__(self) -> int:
        return len(self.offsets)


def _recording_length(recording, sample_rate: int) -> tuple[str, int]:
    """Resolve (path, n_samples) from a path, sample array, or raw count."""
    if isinstance(recording, (str, Path)):
        with wave.open(str(recording), "rb") as wf:
            return str(recording), wf.getnframes()
    if isinstance(recording, np.ndarray):
        return "<array>", recording.shape[0]
    if isinstance(recording, (int, np.integer)):
        return "<length>", int(recording)
    raise TypeError(f"recording must be a path, array, or sample count, got {type(recording)}")


def build_segment_index(recording, sample_rate: int,
                        segment_length_s: int = SEGMENT_LENGTH_S) -> SegmentIndex:
    """Index complete ``segment_length_s`` windows; trailing partials dropped."""
    path, n_samples = _recording_length(recording, sample_rate)
    seg = segment_length_s * sample_rate
    if n_samples < seg:
        raise ValueError(
            f"{path}: recording has {n_samples} samples, shorter than one "
            f"{segment_length_s}s segment ({seg} samples)")
    n_segments = n_samples // seg
    offsets = [i * seg for i in range(n_segments)]
    return SegmentIndex(path, sample_rate, offsets, segment_length_s)


def sample_segments(indices: Sequence[SegmentIndex], n: int, seed: int = 0) -> list[ClipRecord]:
    """Uniformly sample ``n`` segments without replacement across recordings.

    Returned records carry domain 'target' and no labels; clip ids encode
    recording path and sample offset.
    """
    pool: list[tuple[str, int]] = []
    for idx in indices:
        pool.extend((idx.recording_path, off) for off in idx.offsets)
    if n > len(pool):
        raise ValueError(f"requested {n} segments but only {len(pool)} available")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(pool), size=n, replace=False) if n else []
    out = []
    for i in sorted(int(c) for c in chosen):
        path, off = pool[i]
        out.append(ClipRecord(clip_id=f"{Path(path).stem}@{off}",
                              audio_path=path, artist="", domain="target"))
    return out


def total_segments(indices: Sequence[SegmentIndex]) -> int:
    return sum(len(idx) for idx in indices)


def corpus_segment_count(durations_s: Sequence[float], sample_rate: int,
                         segment_length_s: int = SEGMENT_LENGTH_S) -> int:
    """Total complete segments over a corpus given per-recording durations."""
    return sum(int(d * sample_rate) // (segment_length_s * sample_rate)
               for d in durations_s)
