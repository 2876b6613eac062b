"""Single-file binary scene dataset.

Layout (all little-endian):
    header   : magic "EMRLSCN1" | u32 version | u64 scene_count | u16 H | u16 W
               | u16 max_objects | u64 generator seed | 32s preset name
    records  : per scene -
               u16 n_objects | 3*f32 background color
               | n_objects * (u16 shape_id | 3*f32 color | f32 scale
                              | f32 x | f32 y | f32 angle)
               | H*W*3 raw image bytes (row-major)
               | (n_objects+1) bit-packed mask planes, ceil(H*W/8) bytes each
    index    : scene_count * u64 absolute record offsets
    footer   : u64 index offset | magic

The trailing index gives random access; a missing/short index (e.g. header
promises more scenes than were written) surfaces as a truncation error.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from ..config import GeneratorPreset
from .generate import ObjectFactors, Scene, SceneFactors

MAGIC = b"EMRLSCN1"
VERSION = 1

_HEADER = struct.Struct("<8sIQHHHQ32s")
_RECORD_HEAD = struct.Struct("<H3f")
_OBJECT = struct.Struct("<H7f")
_FOOTER = struct.Struct("<Q8s")


class DatasetError(Exception):
    pass


@dataclass
class DatasetHeader:
    scene_count: int
    height: int
    width: int
    max_objects: int
    seed: int
    preset_name: str
    version: int = VERSION

    def pack(self) -> bytes:
        name = self.preset_name.encode()
        if len(name) > 32:
            raise DatasetError(f"preset name too long: {self.preset_name!r}")
        return _HEADER.pack(
            MAGIC, self.version, self.scene_count, self.height, self.width,
            self.max_objects, self.seed, name.ljust(32, b"\x00"),
        )

    @classmethod
    def unpack(cls, raw: bytes) -> "DatasetHeader":
        if len(raw) < _HEADER.size:
            raise DatasetError("file too short for a dataset header")
        magic, version, count, h, w, max_objects, seed, name = _HEADER.unpack(
            raw[: _HEADER.size]
        )
        if magic != MAGIC:
            raise DatasetError(f"bad magic {magic!r}")
        if version != VERSION:
            raise DatasetError(f"unsupported format version {version}")
        return cls(
            scene_count=count, height=h, width=w, max_objects=max_objects,
            seed=seed, preset_name=name.rstrip(b"\x00").decode(), version=version,
        )


def _pack_scene(scene: Scene, h: int, w: int) -> bytes:
    n = len(scene.factors.objects)
    parts = [_RECORD_HEAD.pack(n, *scene.factors.background_color.tolist())]
    for o in scene.factors.objects:
        parts.append(
            _OBJECT.pack(
                o.shape_id, *o.color.tolist(), float(o.scale),
                float(o.position[0]), float(o.position[1]), float(o.angle),
            )
        )
    img = np.ascontiguousarray(scene.image, dtype=np.uint8)
    if img.shape != (h, w, 3):
        raise DatasetError(f"scene image shape {img.shape} != ({h}, {w}, 3)")
    parts.append(img.tobytes())
    masks = scene.true_masks
    if masks.shape != (n + 1, h, w):
        raise DatasetError(f"mask shape {masks.shape} != ({n + 1}, {h}, {w})")
    for plane in masks:
        parts.append(np.packbits(plane.reshape(-1)).tobytes())
    return b"".join(parts)


def write_dataset(
    scenes: Iterable[Scene],
    path: str | Path,
    seed: int = 0,
    preset_name: str = "",
    max_objects: int | None = None,
) -> int:
    """Write scenes to path; returns the number written. One writer owns the file."""
    scenes = list(scenes)
    if not scenes:
        raise DatasetError("refusing to write an empty dataset")
    h, w, _ = scenes[0].image.shape
    if max_objects is None:
        max_objects = max(len(s.factors.objects) for s in scenes)
    header = DatasetHeader(
        scene_count=len(scenes), height=h, width=w,
        max_objects=max_objects, seed=seed, preset_name=preset_name,
    )
    offsets = []
    with open(path, "wb") as f:
        f.write(header.pack())
        for scene in scenes:
            if len(scene.factors.objects) > max_objects:
                raise DatasetError("scene exceeds max_objects")
            offsets.append(f.tell())
            f.write(_pack_scene(scene, h, w))
        index_offset = f.tell()
        f.write(struct.pack(f"<{len(offsets)}Q", *offsets))
        f.write(_FOOTER.pack(index_offset, MAGIC))
    return len(scenes)


class DatasetReader:
    """Lazy random-access reader; safe to share across threads (uses os.pread)."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fd = os.open(self.path, os.O_RDONLY)
        try:
            size = os.fstat(self._fd).st_size
            self.header = DatasetHeader.unpack(os.pread(self._fd, _HEADER.size, 0))
            if size < _HEADER.size + _FOOTER.size:
                raise DatasetError("truncated dataset: no footer")
            idx_off, magic = _FOOTER.unpack(os.pread(self._fd, _FOOTER.size, size - _FOOTER.size))
            if magic != MAGIC:
                raise DatasetError("truncated dataset: footer magic missing")
            n = self.header.scene_count
            expect = 8 * n
            if idx_off + expect + _FOOTER.size != size:
                raise DatasetError(
                    f"truncated dataset: header promises {n} scenes but the "
                    f"index does not match the payload"
                )
            raw = os.pread(self._fd, expect, idx_off)
            if len(raw) != expect:
                raise DatasetError("truncated dataset: short index")
            self._offsets = list(struct.unpack(f"<{n}Q", raw))
            for off in self._offsets:
                if not (_HEADER.size <= off < idx_off):
                    raise DatasetError("corrupt dataset: record offset out of range")
            self._end = idx_off
        except Exception:
            os.close(self._fd)
            raise

    def __len__(self) -> int:
        return self.header.scene_count

    def close(self):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _read(self, size: int, offset: int) -> bytes:
        raw = os.pread(self._fd, size, offset)
        if len(raw) != size:
            raise DatasetError("truncated dataset: record extends past payload")
        return raw

    def __getitem__(self, index: int) -> Scene:
        n = self.header.scene_count
        if not (0 <= index < n):
            raise IndexError(f"scene index {index} out of range [0, {n})")
        h, w = self.header.height, self.header.width
        off = self._offsets[index]
        pos = off
        n_obj, br, bg_, bb = _RECORD_HEAD.unpack(self._read(_RECORD_HEAD.size, pos))
        pos += _RECORD_HEAD.size
        if n_obj > self.header.max_objects:
            raise DatasetError("corrupt dataset: object count exceeds max_objects")
        objects = []
        for _ in range(n_obj):
            sid, r, g, b, scale, x, y, angle = _OBJECT.unpack(
                self._read(_OBJECT.size, pos)
            )
            pos += _OBJECT.size
            objects.append(
                ObjectFactors(
                    shape_id=sid,
                    color=np.array([r, g, b], dtype=np.float32),
                    scale=np.float32(scale),
                    position=np.array([x, y], dtype=np.float32),
                    angle=np.float32(angle),
                )
            )
        img_bytes = h * w * 3
        image = np.frombuffer(self._read(img_bytes, pos), dtype=np.uint8)
        image = image.reshape(h, w, 3).copy()
        pos += img_bytes
        plane_bytes = (h * w + 7) // 8
        masks = np.zeros((n_obj + 1, h, w), dtype=bool)
        for i in range(n_obj + 1):
            bits = np.unpackbits(
                np.frombuffer(self._read(plane_bytes, pos), dtype=np.uint8)
            )[: h * w]
            masks[i] = bits.reshape(h, w).astype(bool)
            pos += plane_bytes
        if pos > self._end:
            raise DatasetError("truncated dataset: record extends into the index")
        factors = SceneFactors(
            objects=objects,
            background_color=np.array([br, bg_, bb], dtype=np.float32),
        )
        return Scene(image=image, true_masks=masks, factors=factors)

    def __iter__(self) -> Iterator[Scene]:
        for i in range(len(self)):
            yield self[i]


class DatasetView:
    """A contiguous index range over a reader."""

    def __init__(self, reader: DatasetReader, start: int, stop: int):
        if not (0 <= start <= stop <= len(reader)):
            raise DatasetError(
                f"view [{start}, {stop}) out of range for {len(reader)} scenes"
            )
        self.reader = reader
        self.start = start
        self.stop = stop

    def __len__(self) -> int:
        return self.stop - self.start

    def __getitem__(self, index: int) -> Scene:
        if not (0 <= index < len(self)):
            raise IndexError(f"index {index} out of range for view of {len(self)}")
        return self.reader[self.start + index]

    def __iter__(self) -> Iterator[Scene]:
        for i in range(len(self)):
            yield self[i]


def split_dataset(
    path_or_reader: str | Path | DatasetReader, n_train: int, n_test: int
) -> tuple[DatasetView, DatasetView]:
    """First n_train scenes for training, the next n_test held out for testing."""
    reader = (
        path_or_reader
        if isinstance(path_or_reader, DatasetReader)
        else DatasetReader(path_or_reader)
    )
    if n_train < 0 or n_test < 0:
        raise DatasetError("split sizes must be non-negative")
    if n_train + n_test > len(reader):
        raise DatasetError(
            f"insufficient scenes: need {n_train}+{n_test}, have {len(reader)}"
        )
    return (
        DatasetView(reader, 0, n_train),
        DatasetView(reader, n_train, n_train + n_test),
    )


def generate_dataset(
    preset: GeneratorPreset, n_scenes: int, seed: int, path: str | Path
) -> int:
    """Generate n_scenes deterministically (seed stream per index) and write them."""
    from .generate import generate_scene

    scenes = []
    for i in range(n_scenes):
        scene_seed = int(
            np.random.SeedSequence(entropy=seed, spawn_key=(i,)).generate_state(1)[0]
        )
        scenes.append(generate_scene(scene_seed, preset))
    return write_dataset(
        scenes, path, seed=seed, preset_name=preset.name,
        max_objects=preset.max_objects,
    )
