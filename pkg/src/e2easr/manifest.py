"""Line-delimited JSON manifests: {"id", "features" | "audio", "text"} per line."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from .features import FeatureMatrix, NormStats, apply_norm, extract_logmel, read_wav


class ManifestError(ValueError):
    pass


@dataclass
class Entry:
    uid: str
    text: str
    features: Optional[str] = None
    audio: Optional[str] = None
    duration: Optional[float] = None

    def to_json(self) -> str:
        d = {"id": self.uid, "text": self.text}
        if self.features is not None:
            d["features"] = self.features
        if self.audio is not None:
            d["audio"] = self.audio
        if self.duration is not None:
            d["duration"] = self.duration
        return json.dumps(d, ensure_ascii=False, sort_keys=True)


def read_manifest(path: Union[str, Path], check_files: bool = True) -> List[Entry]:
    """Parse a manifest; relative file paths resolve against the manifest's directory."""
    path = Path(path)
    base = path.parent
    entries, seen = [], set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict):
                raise TypeError("record is not an object")
            uid, text = rec["id"], rec["text"]
            if not isinstance(uid, str) or not isinstance(text, str):
                raise TypeError("'id' and 'text' must be strings")
        except (ValueError, KeyError, TypeError) as exc:
            raise ManifestError(f"{path}:{lineno}: malformed manifest line ({exc})") from None
        if ("features" in rec) == ("audio" in rec):
            raise ManifestError(f"{path}:{lineno}: exactly one of 'features' or 'audio' is required")
        if uid in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate utterance id {uid!r}")
        seen.add(uid)
        e = Entry(uid, text, rec.get("features"), rec.get("audio"), rec.get("duration"))
        for attr in ("features", "audio"):
            ref = getattr(e, attr)
            if ref is not None:
                full = Path(ref) if Path(ref).is_absolute() else base / ref
                if check_files and not full.exists():
                    raise ManifestError(f"{path}:{lineno}: referenced file {full} does not exist")
                setattr(e, attr, str(full))
        entries.append(e)
    return entries


def write_manifest(entries: List[Entry], path: Union[str, Path]) -> None:
    Path(path).write_text("".join(e.to_json() + "\n" for e in entries), encoding="utf-8")


def load_features(entry: Entry, stats: Optional[NormStats] = None) -> np.ndarray:
    """Feature matrix for an entry (extracted from audio if needed), optionally normalized."""
    if entry.features is not None:
        f = FeatureMatrix(np.load(entry.features))
    else:
        f = extract_logmel(read_wav(entry.audio))
    return apply_norm(f, stats).frames if stats is not None else f.frames


def audio_seconds(entry: Entry, num_frames: int, frame_shift_ms: float = 10.0) -> float:
    """Duration from the manifest, or reconstructed from the frame count."""
    if entry.duration is not None:
        return float(entry.duration)
    return num_frames * frame_shift_ms / 1000.0
