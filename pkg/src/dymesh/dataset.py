"""Curation pipeline: ingest, motion and topology filters, windowed slicing, reverse augmentation.

Order of operations per source: ingest (dedup + centroid normalization),
frame-count gate, slicing, per-slice filters, reversed copies of accepted
slices (filtered again and deduplicated by content hash). Every decision,
accepted or not, becomes one manifest record.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .formats import FormatError, TopologyError, obj_frames, read_sequence, write_dms
from .mesh import DynamicMeshSequence, centroid_normalize, merge_duplicate_sequence

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FilterRule:
    min_max_disp: float = 0.01
    max_max_disp: float = 1.0
    max_face_ratio: float = 2.5
    min_frames: int = 16
    max_frames: int = 200

    def __post_init__(self):
        if not 0.0 <= self.min_max_disp < self.max_max_disp:
            raise ValueError("need 0 <= min_max_disp < max_max_disp")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ValueError("need 1 <= min_frames <= max_frames")


@dataclass(frozen=True)
class SliceConfig:
    windows: tuple[int, ...] = (16, 32, 64)
    strides: tuple[int, ...] | None = None     # default: window // 2
    keep_reversed: bool = True

    def __post_init__(self):
        if self.strides is not None and len(self.strides) != len(self.windows):
            raise ValueError("one stride per window")
        for w, s in zip(self.windows, self.stride_list()):
            if not 1 <= s <= w:
                raise ValueError(f"stride {s} outside [1, {w}]")

    def stride_list(self) -> tuple[int, ...]:
        return self.strides if self.strides is not None else tuple(max(1, w // 2) for w in self.windows)


@dataclass
class FilterDecision:
    accepted: bool
    reason: str
    max_disp: float
    face_ratio: float


@dataclass
class Slice:
    sequence: DynamicMeshSequence
    window: int
    start: int
    reversed: bool = False


@dataclass
class ManifestRecord:
    id: str
    source: str
    frames: int
    vertices: int
    faces: int
    caption: str = ""
    accepted: bool = False
    reason: str = ""
    window: int = 0
    reversed: bool = False
    start: int = 0
    path: str = ""


COLUMNS = tuple(f.name for f in fields(ManifestRecord))


class ManifestError(ValueError):
    pass


# -- per-sequence rules ------------------------------------------------------------

def max_displacement(seq: DynamicMeshSequence) -> float:
    if seq.n_frames < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(seq.frames, axis=0), axis=-1).max())


def apply_filters(seq: DynamicMeshSequence, rules: FilterRule = FilterRule()) -> FilterDecision:
    """Reject static, exploding or face-heavy sequences; boundary values are accepted."""
    disp = max_displacement(seq)
    ratio = seq.n_faces / seq.n_vertices if seq.n_vertices else float("inf")
    if disp < rules.min_max_disp:
        reason = "below-motion"
    elif disp > rules.max_max_disp:
        reason = "above-motion"
    elif ratio > rules.max_face_ratio:
        reason = "face-ratio"
    else:
        reason = ""
    return FilterDecision(not reason, reason, disp, ratio)


def length_gate(n_frames: int, rules: FilterRule = FilterRule()) -> str:
    if n_frames < rules.min_frames:
        return "too-short"
    if n_frames > rules.max_frames:
        return "too-long"
    return ""


def ingest(path: str | Path, tol: float = 1e-8) -> DynamicMeshSequence:
    """Read a .dms file or OBJ frame directory, merge duplicate vertices, center frame 0."""
    seq = read_sequence(path)
    seq, _ = merge_duplicate_sequence(seq, tol)
    return centroid_normalize(seq)


def slice_starts(n_frames: int, window: int, stride: int) -> list[int]:
    return list(range(0, n_frames - window + 1, stride)) if n_frames >= window else []


def slice_windows(seq: DynamicMeshSequence, cfg: SliceConfig = SliceConfig()) -> list[Slice]:
    out = []
    for w, s in zip(cfg.windows, cfg.stride_list()):
        for start in slice_starts(seq.n_frames, w, s):
            part = DynamicMeshSequence(seq.faces, seq.frames[start:start + w], seq.caption)
            out.append(Slice(centroid_normalize(part), w, start))
    return out


def content_hash(seq: DynamicMeshSequence) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(seq.faces, dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(seq.frames, dtype="<f8").tobytes())
    return h.hexdigest()


def augment_reverse(slices: list[Slice], rules: FilterRule = FilterRule()) -> tuple[list[Slice], list[Slice]]:
    """Input slices plus reversed copies that pass the filters and are new content.

    Returns ``(kept, rejected)`` where ``rejected`` lists reversed copies
    that failed a filter. Copies identical to an existing slice are dropped.
    """
    seen = {content_hash(s.sequence) for s in slices}
    kept = list(slices)
    rejected = []
    for s in slices:
        rev = centroid_normalize(s.sequence.reversed())
        key = content_hash(rev)
        if key in seen:
            continue
        seen.add(key)
        copy = Slice(rev, s.window, s.start, True)
        (kept if apply_filters(rev, rules).accepted else rejected).append(copy)
    return kept, rejected


# -- sources and the pipeline ----------------------------------------------------------

def discover_sources(root: str | Path) -> list[Path]:
    """A .dms file, an OBJ frame directory, or a directory holding several of either."""
    root = Path(root)
    if root.is_file() or (root.is_dir() and obj_frames(root)):
        return [root]
    if not root.is_dir():
        raise FileNotFoundError(root)
    found = []
    for p in sorted(root.iterdir()):
        if p.is_file() and p.suffix.lower() == ".dms":
            found.append(p)
        elif p.is_dir() and obj_frames(p):
            found.append(p)
    return found


def caption_for(source: Path) -> str:
    for cand in (source.with_suffix(".txt"), source / "caption.txt"):
        if cand.is_file():
            return str(cand)
    return ""


def _slice_id(stem: str, s: Slice) -> str:
    return f"{stem}-w{s.window}-s{s.start}" + ("-r" if s.reversed else "")


@dataclass
class SourceResult:
    records: list[ManifestRecord]
    error: str = ""
    slices: dict[str, DynamicMeshSequence] = field(default_factory=dict)


def process_source(source: Path, stem: str, rules: FilterRule, cfg: SliceConfig) -> SourceResult:
    try:
        seq = ingest(source)
    except (FormatError, TopologyError, ValueError, OSError) as exc:
        return SourceResult([], f"{source}: {exc}")
    caption = caption_for(source)
    base = dict(source=str(source), caption=caption)
    reason = length_gate(seq.n_frames, rules)
    if reason:
        return SourceResult([ManifestRecord(stem, frames=seq.n_frames, vertices=seq.n_vertices,
                                            faces=seq.n_faces, reason=reason, **base)])
    decided = []
    for s in slice_windows(seq, cfg):
        d = apply_filters(s.sequence, rules)
        decided.append((s, d.reason))
    kept = [s for s, reason in decided if not reason]
    reversed_ = []
    if cfg.keep_reversed:
        extra, rejected_rev = augment_reverse(kept, rules)
        reversed_ = [(s, "") for s in extra[len(kept):]]
        reversed_ += [(s, apply_filters(s.sequence, rules).reason) for s in rejected_rev]
        reversed_.sort(key=lambda item: (item[0].window, item[0].start))
    result = SourceResult([])
    for s, reason in decided + reversed_:
        rec = _record(stem, s, not reason, reason, base)
        result.records.append(rec)
        if not reason:
            result.slices[rec.id] = s.sequence
    return result


def _record(stem: str, s: Slice, accepted: bool, reason: str, base: dict) -> ManifestRecord:
    q = s.sequence
    return ManifestRecord(_slice_id(stem, s), frames=q.n_frames, vertices=q.n_vertices, faces=q.n_faces,
                          accepted=accepted, reason=reason, window=s.window, reversed=s.reversed,
                          start=s.start, **base)


def _unique_stems(sources: list[Path]) -> list[str]:
    stems, used = [], {}
    for p in sources:
        stem = p.stem if p.is_file() else p.name
        n = used.get(stem, 0)
        used[stem] = n + 1
        stems.append(stem if n == 0 else f"{stem}~{n}")
    return stems


def process(sources: list[Path], out_dir: str | Path, rules: FilterRule = FilterRule(),
            cfg: SliceConfig = SliceConfig(), threads: int = 1) -> tuple[list[ManifestRecord], list[str]]:
    """Run the pipeline over ``sources``; accepted slices are written as .dms files.

    Sources are processed in parallel but results are merged in source order,
    so the manifest does not depend on ``threads``.
    """
    out_dir = Path(out_dir)
    slice_dir = out_dir / "slices"
    slice_dir.mkdir(parents=True, exist_ok=True)
    stems = _unique_stems(sources)
    jobs = list(zip(sources, stems))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda j: process_source(j[0], j[1], rules, cfg), jobs))
    else:
        results = [process_source(src, stem, rules, cfg) for src, stem in jobs]
    records, errors = [], []
    for res in results:
        if res.error:
            log.error(res.error)
            errors.append(res.error)
        for rec in res.records:
            if rec.id in res.slices:
                path = slice_dir / f"{rec.id}.dms"
                write_dms(res.slices[rec.id], path)
                rec.path = str(path)
            records.append(rec)
    return records, errors


# -- manifest ----------------------------------------------------------------------------

def _cell(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    s = str(v)
    if any(c in s for c in "\t\n\r"):
        raise ManifestError(f"field value {s!r} contains a tab or newline")
    return s


def write_manifest(records: list[ManifestRecord], path: str | Path) -> None:
    ids = set()
    for r in records:
        if r.id in ids:
            raise ManifestError(f"duplicate id {r.id!r}")
        ids.add(r.id)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n", quoting=csv.QUOTE_NONE)
        w.writerow(COLUMNS)
        for r in records:
            w.writerow([_cell(getattr(r, c)) for c in COLUMNS])


def _parse_field(name: str, kind: str, raw: str):
    if kind == "bool":
        if raw not in ("0", "1"):
            raise ValueError(f"{name} must be 0 or 1, got {raw!r}")
        return raw == "1"
    if kind == "int":
        return int(raw)
    return raw


def read_manifest(path: str | Path, check_files: bool = False) -> list[ManifestRecord]:
    kinds = {f.name: str(f.type) for f in fields(ManifestRecord)}
    records, ids = [], set()
    with open(path, encoding="utf-8", newline="") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ManifestError(f"{path}:1: missing header line")
    header = tuple(lines[0].split("\t"))
    if header != COLUMNS:
        raise ManifestError(f"{path}:1: header {header} does not match {COLUMNS}")
    for lineno, line in enumerate(lines[1:], 2):
        cells = line.split("\t")
        if len(cells) != len(COLUMNS):
            raise ManifestError(f"{path}:{lineno}: expected {len(COLUMNS)} fields, got {len(cells)}")
        try:
            rec = ManifestRecord(**{c: _parse_field(c, kinds[c], v) for c, v in zip(COLUMNS, cells)})
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
        if rec.id in ids:
            raise ManifestError(f"{path}:{lineno}: duplicate id {rec.id!r}")
        if check_files and rec.accepted and not Path(rec.path).is_file():
            raise ManifestError(f"{path}:{lineno}: container {rec.path!r} is missing")
        ids.add(rec.id)
        records.append(rec)
    return records
