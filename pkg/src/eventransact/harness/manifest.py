"""Dataset manifests for DVS Gesture recordings and synthetic corpora."""

from __future__ import annotations

import functools
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from .. import _serde
from ..events_io import (
    PATTERNS,
    EventStream,
    GestureSegment,
    SynthParams,
    parse_gesture_labels,
    read_aedat,
    read_canonical_file,
    slice_stream,
    synth_stream,
    write_canonical_file,
)
from ..frames import derive_seed, load_frames_dir

# Class ids 1..11 of the DVS Gesture label files; id 11 is the background
# ("other gestures") class dropped by the 10-class protocol.
DVS_CLASS_NAMES = (
    "hand_clapping",
    "right_hand_wave",
    "left_hand_wave",
    "right_arm_clockwise",
    "right_arm_counter_clockwise",
    "left_arm_clockwise",
    "left_arm_counter_clockwise",
    "arm_roll",
    "air_drums",
    "air_guitar",
    "other_gestures",
)
DVS_BACKGROUND_CLASS = 11
DVS_TRAIN_SUBJECTS = 23
DVS_SUBJECTS = 29


@functools.lru_cache(maxsize=8)
def _aedat_stream(path: str) -> EventStream:
    with open(path, "rb") as fh:
        return read_aedat(fh.read()).stream


@dataclass
class ManifestSample:
    source_id: str
    path: str
    label: int
    kind: str = "evt"  # evt | aedat | frames
    segment: GestureSegment | None = None
    subject_id: str | None = None

    def load(self):
        """The sample's events (segment-sliced, re-based) or pre-encoded video."""
        if not os.path.exists(self.path):
            raise FileNotFoundError(self.path)
        if self.kind == "frames":
            return load_frames_dir(self.path, label=self.label)
        if self.kind == "aedat":
            stream = _aedat_stream(os.path.abspath(self.path))
        elif self.kind == "evt":
            stream = read_canonical_file(self.path)
        else:
            raise ValueError(f"unknown sample kind {self.kind!r}")
        if self.segment is not None:
            stream = slice_stream(stream, self.segment.start_usec, self.segment.end_usec)
        return stream


@dataclass
class DatasetManifest:
    name: str
    class_names: list[str]
    samples: list[ManifestSample] = field(default_factory=list)
    split: str = "train"

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        n = len(self.class_names)
        for s in self.samples:
            if not 0 <= s.label < n:
                raise ValueError(f"sample {s.source_id!r}: label {s.label} outside [0, {n})")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_histogram(self) -> list[int]:
        counts = [0] * self.num_classes
        for s in self.samples:
            counts[s.label] += 1
        return counts

    def subjects(self) -> set[str]:
        return {s.subject_id for s in self.samples if s.subject_id is not None}

    def save(self, path) -> None:
        """JSON with sample paths relative to the manifest's directory."""
        path = Path(path)
        base = path.parent.resolve()
        data = _serde.to_dict(self)
        for s in data["samples"]:
            p = Path(s["path"]).resolve()
            try:
                s["path"] = str(p.relative_to(base))
            except ValueError:
                s["path"] = str(p)
        path.write_text(json.dumps(data, indent=2))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        manifest = _serde.from_dict(cls, json.loads(path.read_text()))
        for s in manifest.samples:
            if not os.path.isabs(s.path):
                s.path = str(path.parent / s.path)
        return manifest


def check_disjoint(train: DatasetManifest, test: DatasetManifest) -> None:
    overlap = train.subjects() & test.subjects()
    if overlap:
        raise ValueError(f"subjects in both splits: {sorted(overlap)}")


# -- DVS Gesture -------------------------------------------------------------

_TRIAL = re.compile(r"^(user\d+)_.*\.aedat$")


def _read_listing(path: Path) -> list[str]:
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def _default_split(trials: list[str]) -> tuple[list[str], list[str]]:
    train, test = [], []
    for t in trials:
        m = _TRIAL.match(t)
        if not m:
            continue
        subject = int(m.group(1)[4:])
        (train if subject <= DVS_TRAIN_SUBJECTS else test).append(t)
    return train, test


def build_dvs_manifest(root, protocol: str = "11class"):
    """Train/test manifests for a DVS Gesture directory.

    ``root`` holds ``userNN_<lighting>.aedat`` trials with matching
    ``*_labels.csv`` files. Splits come from ``trials_to_train.txt`` /
    ``trials_to_test.txt`` when present, otherwise subjects 1-23 train and
    24-29 test. Each gesture segment becomes one sample; the ``10class``
    protocol drops the background class.
    """
    if protocol not in ("10class", "11class"):
        raise ValueError(f"unknown protocol {protocol!r}")
    root = Path(root)
    keep_background = protocol == "11class"
    class_names = list(DVS_CLASS_NAMES if keep_background else DVS_CLASS_NAMES[:-1])
    train_list, test_list = root / "trials_to_train.txt", root / "trials_to_test.txt"
    if train_list.exists() and test_list.exists():
        splits = {"train": _read_listing(train_list), "test": _read_listing(test_list)}
    else:
        trials = sorted(p.name for p in root.glob("*.aedat"))
        tr, te = _default_split(trials)
        splits = {"train": tr, "test": te}

    manifests = {}
    for split, trials in splits.items():
        samples = []
        for trial in trials:
            aedat = root / trial
            labels = aedat.with_name(aedat.stem + "_labels.csv")
            if not labels.exists():
                raise FileNotFoundError(f"missing label file {labels}")
            m = _TRIAL.match(trial)
            subject = m.group(1) if m else None
            for i, seg in enumerate(parse_gesture_labels(labels.read_text())):
                if seg.class_id == DVS_BACKGROUND_CLASS and not keep_background:
                    continue
                samples.append(
                    ManifestSample(
                        source_id=f"{aedat.stem}#{i}",
                        path=str(aedat),
                        label=seg.class_id - 1,
                        kind="aedat",
                        segment=seg,
                        subject_id=subject,
                    )
                )
        manifests[split] = DatasetManifest(f"dvs_gesture_{protocol}", class_names, samples, split)
    check_disjoint(manifests["train"], manifests["test"])
    return manifests["train"], manifests["test"]


# -- synthetic corpus --------------------------------------------------------


@dataclass(frozen=True)
class SynthCorpusSpec:
    patterns: tuple[str, ...] = PATTERNS
    train_per_class: int = 8
    test_per_class: int = 4
    params: SynthParams = field(default_factory=SynthParams)


def build_synth_manifest(spec: SynthCorpusSpec, seed: int, out_dir):
    """Write a balanced synthetic corpus of canonical EVT files under
    ``out_dir/{train,test}`` and return ``(train, test)`` manifests (also saved
    as ``train.json`` / ``test.json``). Labels index ``spec.patterns``."""
    if spec.train_per_class <= 0 or spec.test_per_class <= 0:
        raise ValueError("every class needs a positive sample count")
    if not spec.patterns:
        raise ValueError("no patterns requested")
    out_dir = Path(out_dir)
    manifests = []
    for split, count in (("train", spec.train_per_class), ("test", spec.test_per_class)):
        (out_dir / split).mkdir(parents=True, exist_ok=True)
        samples = []
        for label, pattern in enumerate(spec.patterns):
            for i in range(count):
                stream, _ = synth_stream(pattern, spec.params, derive_seed(seed, split, pattern, i))
                source_id = f"{split}/{pattern}_{i:03d}"
                path = out_dir / split / f"{pattern}_{i:03d}.evt"
                write_canonical_file(stream, path)
                samples.append(ManifestSample(source_id, str(path), label, "evt"))
        manifest = DatasetManifest("synthetic", list(spec.patterns), samples, split)
        manifest.save(out_dir / f"{split}.json")
        manifests.append(manifest)
    return tuple(manifests)
