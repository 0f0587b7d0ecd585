"""Dataset directory layout shared by the synthetic generator and the trainer.

Layout: images/j{j}_k{k}.png, canonical/j{j}.png, masks/j{j}.png,
backgrounds/k{k}.png, manifest.json. Captured data in the same layout can be
dropped in directly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core_math import Camera
from .errors import DataError
from .imageio import load_image, load_mask

MANIFEST_NAMES = ("manifest.json", "manifest")


@dataclass
class FrameRecord:
    camera_id: int
    background_id: int | None      # None marks a canonical (variable light off) frame
    image: str
    mask: str

    def to_dict(self) -> dict:
        return {"camera": self.camera_id, "background": self.background_id,
                "image": self.image, "mask": self.mask}

    @classmethod
    def from_dict(cls, d: dict) -> "FrameRecord":
        return cls(camera_id=d["camera"], background_id=d["background"],
                   image=d["image"], mask=d["mask"])


@dataclass
class DatasetManifest:
    width: int
    height: int
    cameras: list = field(default_factory=list)       # camera dict + "split"
    backgrounds: list = field(default_factory=list)   # {"id", "path", "split"}
    frames: list = field(default_factory=list)        # FrameRecord
    bounds: dict | None = None                        # {"min": [...], "max": [...]}
    seed: int = 0

    def save(self, root) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        payload = {
            "version": 1,
            "width": self.width,
            "height": self.height,
            "seed": self.seed,
            "bounds": self.bounds,
            "cameras": self.cameras,
            "backgrounds": self.backgrounds,
            "frames": [f.to_dict() for f in self.frames],
        }
        (root / "manifest.json").write_text(json.dumps(payload, indent=2))

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        for name in MANIFEST_NAMES:
            p = root / name
            if p.exists():
                break
        else:
            raise DataError(f"no manifest found under {root}")
        d = json.loads(p.read_text())
        return cls(width=d["width"], height=d["height"], seed=d.get("seed", 0),
                   bounds=d.get("bounds"), cameras=d["cameras"],
                   backgrounds=d["backgrounds"],
                   frames=[FrameRecord.from_dict(f) for f in d["frames"]])


class SplatDataset:
    """Loader over a dataset directory with a small in-memory cache."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = DatasetManifest.load(self.root)
        self.cameras = {c["id"]: Camera.from_dict(c) for c in self.manifest.cameras}
        self.train_camera_ids = [c["id"] for c in self.manifest.cameras
                                 if c.get("split", "train") == "train"]
        self.test_camera_ids = [c["id"] for c in self.manifest.cameras
                                if c.get("split") == "test"]
        self.train_background_ids = [b["id"] for b in self.manifest.backgrounds
                                     if b.get("split", "train") == "train"]
        self.test_background_ids = [b["id"] for b in self.manifest.backgrounds
                                    if b.get("split") == "test"]
        self._background_paths = {b["id"]: b["path"] for b in self.manifest.backgrounds}
        self._frames = {}
        for f in self.manifest.frames:
            self._frames[(f.camera_id, f.background_id)] = f
        self._cache = {}

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if self.manifest.bounds:
            return (np.array(self.manifest.bounds["min"], dtype=np.float64),
                    np.array(self.manifest.bounds["max"], dtype=np.float64))
        centers = np.stack([c.center for c in self.cameras.values()])
        ext = 0.5 * np.linalg.norm(centers.max(0) - centers.min(0) + 1e-6)
        mid = centers.mean(0)
        return mid - ext, mid + ext

    def _load(self, key, path, loader):
        if key not in self._cache:
            self._cache[key] = loader(self.root / path)
        return self._cache[key]

    def frame(self, camera_id: int, background_id: int | None) -> np.ndarray:
        rec = self._frames.get((camera_id, background_id))
        if rec is None:
            raise DataError(f"no frame for camera {camera_id}, background {background_id}")
        return self._load(("img", camera_id, background_id), rec.image, load_image)

    def canonical(self, camera_id: int) -> np.ndarray:
        return self.frame(camera_id, None)

    def mask(self, camera_id: int) -> np.ndarray:
        rec = self._frames.get((camera_id, None))
        if rec is None:
            raise DataError(f"no canonical frame for camera {camera_id}")
        return self._load(("mask", camera_id), rec.mask, load_mask)

    def background(self, background_id: int) -> np.ndarray:
        path = self._background_paths.get(background_id)
        if path is None:
            raise DataError(f"unknown background id {background_id}")
        return self._load(("bg", background_id), path, load_image)

    def masks_by_camera(self, camera_ids=None) -> dict:
        ids = camera_ids if camera_ids is not None else list(self.cameras)
        return {j: self.mask(j) for j in ids}
