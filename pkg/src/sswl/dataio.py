"""On-disk CT slice container, manifests, dataset splits, normalization, resizing."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from numpy.random import PCG64, Generator, SeedSequence

MAGIC = b"CTSL"
_HEADER = struct.Struct("<4sIIQ")  # magic | u32 height | u32 width | u64 crc64 of payload
MANIFEST_NAME = "manifest.json"

BodyRegion = Literal["abdomen", "chest", "phantom"]
BODY_REGIONS = ("abdomen", "chest", "phantom")

FULL_RANGE_NORM_LO = -1024.0  # 12-bit CT convention
FULL_RANGE_NORM_HI = 3071.0


class SliceFormatError(Exception):
    """A slice file violates the container format."""


class BadMagicError(SliceFormatError):
    pass


class TruncatedSliceError(SliceFormatError):
    pass


class ChecksumMismatchError(SliceFormatError):
    pass


# CRC-64/XZ: reflected ECMA-182 polynomial, init and xorout all-ones.
_CRC64_POLY = 0xC96C5795D7870F42


def _crc64_table() -> list[int]:
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC64_POLY if crc & 1 else crc >> 1
        table.append(crc)
    return table


_TABLE = _crc64_table()


def crc64(data: bytes) -> int:
    crc = 0xFFFFFFFFFFFFFFFF
    for byte in data:
        crc = _TABLE[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class DoseLevel:
    """Radiation dose as a fraction of the routine (full) dose."""

    fraction: float

    def __post_init__(self) -> None:
        f = float(self.fraction)
        if not np.isfinite(f) or not 0.0 < f <= 1.0:
            raise ValueError(f"dose fraction must be in (0, 1], got {self.fraction}")
        object.__setattr__(self, "fraction", f)

    @property
    def is_full(self) -> bool:
        return self.fraction == 1.0


FULL_DOSE = DoseLevel(1.0)


@dataclass(frozen=True)
class NormalizationSpec:
    """Affine HU -> [0, 1] map: hu_min -> 0, hu_max -> 1, clamped outside."""

    hu_min: float = FULL_RANGE_NORM_LO
    hu_max: float = FULL_RANGE_NORM_HI

    def __post_init__(self) -> None:
        if not self.hu_min < self.hu_max:
            raise ValueError(f"hu_min must be < hu_max, got ({self.hu_min}, {self.hu_max})")


@dataclass
class CTSlice:
    """A 2D grid of Hounsfield-unit values plus scan/dose metadata.

    Pixels are canonically float32 (the container's payload type), so write/read
    round-trips are bit-exact.
    """

    pixels: np.ndarray
    scan_id: str = ""
    slice_index: int = 0
    body_region: BodyRegion = "phantom"
    dose: DoseLevel = field(default_factory=lambda: FULL_DOSE)

    def __post_init__(self) -> None:
        px = np.ascontiguousarray(self.pixels, dtype=np.float32)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"pixels must be a non-empty 2D grid, got shape {px.shape}")
        if not np.isfinite(px).all():
            raise ValueError("pixels contain non-finite values")
        if self.body_region not in BODY_REGIONS:
            raise ValueError(f"unknown body_region {self.body_region!r}")
        if self.slice_index < 0:
            raise ValueError(f"slice_index must be >= 0, got {self.slice_index}")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def with_pixels(self, pixels: np.ndarray, dose: DoseLevel | None = None) -> "CTSlice":
        """New slice with replaced pixels and metadata preserved."""
        return CTSlice(
            pixels=pixels,
            scan_id=self.scan_id,
            slice_index=self.slice_index,
            body_region=self.body_region,
            dose=self.dose if dose is None else dose,
        )


def write_slice(slc: CTSlice, path: Path | str) -> None:
    """Write a slice in the container format; read_slice(path) reproduces it bit-exactly."""
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"parent directory does not exist: {path.parent}")
    if not np.isfinite(slc.pixels).all():
        raise ValueError(f"cannot write {path}: pixels contain non-finite values")
    payload = np.ascontiguousarray(slc.pixels, dtype="<f4").tobytes()
    header = _HEADER.pack(MAGIC, slc.height, slc.width, crc64(payload))
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"failed to write slice file {path}: {exc}") from exc


def read_slice(path: Path | str, manifest: "ScanManifest | None" = None) -> CTSlice:
    """Read a slice file; metadata comes from the sidecar manifest entry if present."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"failed to read slice file {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise TruncatedSliceError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, height, width, crc = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if height < 1 or width < 1:
        raise SliceFormatError(f"{path}: invalid dimensions {height}x{width}")
    payload = raw[_HEADER.size:]
    expected = height * width * 4
    if len(payload) < expected:
        raise TruncatedSliceError(
            f"{path}: payload holds {len(payload)} bytes, header declares {expected}"
        )
    if len(payload) > expected:
        raise SliceFormatError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    actual_crc = crc64(payload)
    if actual_crc != crc:
        raise ChecksumMismatchError(
            f"{path}: payload CRC-64 {actual_crc:#018x} != header {crc:#018x}"
        )
    pixels = np.frombuffer(payload, dtype="<f4").reshape(height, width)

    if manifest is None:
        sidecar = path.parent / MANIFEST_NAME
        if sidecar.is_file():
            try:
                manifest = ScanManifest.load(sidecar)
            except (OSError, ValueError):
                manifest = None
    entry = manifest.find(path) if manifest is not None else None
    if entry is not None:
        return CTSlice(
            pixels=pixels,
            scan_id=entry.scan_id,
            slice_index=entry.slice_index,
            body_region=entry.body_region,
            dose=DoseLevel(entry.dose),
        )
    return CTSlice(pixels=pixels)


@dataclass(frozen=True)
class SliceEntry:
    """One manifest row; path is relative to the manifest's dataset root."""

    path: str
    scan_id: str
    slice_index: int
    body_region: str
    dose: float
    height: int
    width: int
    crc64: int

    def key(self) -> tuple[str, int]:
        return (self.scan_id, self.slice_index)


@dataclass
class ScanManifest:
    entries: list[SliceEntry]
    root: Path = Path(".")

    def __post_init__(self) -> None:
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            dupes = sorted({p for p in paths if paths.count(p) > 1})
            raise ValueError(f"duplicate manifest paths: {dupes}")

    def find(self, path: Path | str) -> SliceEntry | None:
        name = Path(path).name
        for entry in self.entries:
            if entry.path == str(path) or Path(entry.path).name == name:
                return entry
        return None

    def resolve(self, entry: SliceEntry) -> Path:
        return self.root / entry.path

    def load_slice(self, entry: SliceEntry) -> CTSlice:
        """Read the entry's file, verifying its checksum against the manifest."""
        slc = read_slice(self.resolve(entry), manifest=self)
        payload = np.ascontiguousarray(slc.pixels, dtype="<f4").tobytes()
        actual = crc64(payload)
        if actual != entry.crc64:
            raise ChecksumMismatchError(
                f"{entry.path}: payload CRC-64 {actual:#018x} != manifest {entry.crc64:#018x}"
            )
        return slc

    def save(self, path: Path | str | None = None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        rows = [
            {
                "path": e.path,
                "scan_id": e.scan_id,
                "slice_index": e.slice_index,
                "body_region": e.body_region,
                "dose": e.dose,
                "height": e.height,
                "width": e.width,
                "crc64": e.crc64,
            }
            for e in sorted(self.entries, key=lambda e: e.path)
        ]
        path.write_text(json.dumps({"entries": rows}, indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Path | str) -> "ScanManifest":
        path = Path(path)
        data = json.loads(path.read_text(encoding="utf-8"))
        entries = [
            SliceEntry(
                path=row["path"],
                scan_id=row["scan_id"],
                slice_index=int(row["slice_index"]),
                body_region=row["body_region"],
                dose=float(row["dose"]),
                height=int(row["height"]),
                width=int(row["width"]),
                crc64=int(row["crc64"]),
            )
            for row in data["entries"]
        ]
        return cls(entries=entries, root=path.parent)


def entry_for(slc: CTSlice, relpath: str) -> SliceEntry:
    payload = np.ascontiguousarray(slc.pixels, dtype="<f4").tobytes()
    return SliceEntry(
        path=relpath,
        scan_id=slc.scan_id,
        slice_index=slc.slice_index,
        body_region=slc.body_region,
        dose=slc.dose.fraction,
        height=slc.height,
        width=slc.width,
        crc64=crc64(payload),
    )


def normalize_hu(slc: CTSlice, spec: NormalizationSpec) -> CTSlice:
    """Map HU to unitless [0, 1]: hu_min -> 0, hu_max -> 1, clamped outside."""
    values = slc.pixels.astype(np.float64)
    out = np.clip((values - spec.hu_min) / (spec.hu_max - spec.hu_min), 0.0, 1.0)
    return slc.with_pixels(out.astype(np.float32))


def resize_bilinear(slc: CTSlice, out_h: int, out_w: int) -> CTSlice:
    """Corner-aligned bilinear resize; identity sizes return bit-equal pixels."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output dims must be >= 1, got {out_h}x{out_w}")
    src = slc.pixels.astype(np.float64)
    h, w = src.shape

    def coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if n_out == 1 or n_in == 1:
            base = np.zeros(n_out, dtype=np.int64)
            return base, base, np.zeros(n_out)
        pos = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
        i0 = np.floor(pos).astype(np.int64)
        i0 = np.minimum(i0, n_in - 2)
        return i0, i0 + 1, pos - i0

    y0, y1, fy = coords(h, out_h)
    x0, x1, fx = coords(w, out_w)
    # Lerp along x then y; exact when a fraction is 0, so constants and
    # identity resizes are preserved bit-for-bit.
    top = src[y0][:, x0] + fx[None, :] * (src[y0][:, x1] - src[y0][:, x0])
    bot = src[y1][:, x0] + fx[None, :] * (src[y1][:, x1] - src[y1][:, x0])
    out = top + fy[:, None] * (bot - top)
    return slc.with_pixels(out.astype(np.float32))


@dataclass
class DatasetSplit:
    """Labeled pairs, unlabeled LDCT refs, validation pairs, and test pairs."""

    labeled: list[tuple[SliceEntry, SliceEntry]]
    unlabeled: list[SliceEntry]
    validation: list[tuple[SliceEntry, SliceEntry]]
    test: list[tuple[SliceEntry, SliceEntry]]
    root: Path = Path(".")


def paired_entries(
    manifest: ScanManifest, dose: float | None = None
) -> list[tuple[SliceEntry, SliceEntry]]:
    """All (low-dose, full-dose) entry pairs sharing (scan_id, slice_index)."""
    by_key: dict[tuple[str, int], dict[str, list[SliceEntry]]] = {}
    for entry in manifest.entries:
        bucket = by_key.setdefault(entry.key(), {"full": [], "low": []})
        bucket["full" if entry.dose == 1.0 else "low"].append(entry)
    pairs = []
    for key in sorted(by_key):
        bucket = by_key[key]
        if not bucket["full"] or not bucket["low"]:
            continue
        lows = bucket["low"]
        if dose is not None:
            lows = [e for e in lows if e.dose == dose]
            if not lows:
                continue
        if len(lows) > 1:
            doses = sorted(e.dose for e in lows)
            raise ValueError(
                f"slice {key} has multiple low-dose entries {doses}; pass an explicit dose"
            )
        pairs.append((lows[0], bucket["full"][0]))
    return pairs


def make_splits(
    manifest: ScanManifest,
    labeled_size: int | str,
    val_fraction: float,
    seed: int,
    *,
    test_scan_fraction: float = 0.0,
    subset_seed: int | None = None,
    dose: float | None = None,
) -> DatasetSplit:
    """Deterministically partition paired slices into labeled/unlabeled/validation/test.

    Test scans are drawn scan-level (disjoint from all training partitions);
    validation is drawn per-slice from the remaining training pairs. The labeled
    subset is sampled without replacement using subset_seed (defaults to seed),
    so sweeps can vary the labeled subset while keeping the partition fixed.
    """
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in [0, 1), got {val_fraction}")
    if not 0.0 <= test_scan_fraction < 1.0:
        raise ValueError(f"test_scan_fraction must be in [0, 1), got {test_scan_fraction}")
    pairs = paired_entries(manifest, dose)
    if not pairs:
        raise ValueError("manifest contains no (low, full) dose pairs")

    scans = sorted({low.scan_id for low, _ in pairs})
    n_test = int(round(test_scan_fraction * len(scans)))
    perm = Generator(PCG64(SeedSequence((seed, 101)))).permutation(len(scans))
    test_scans = {scans[i] for i in perm[:n_test]}
    test = [p for p in pairs if p[0].scan_id in test_scans]
    train = [p for p in pairs if p[0].scan_id not in test_scans]

    n_val = int(round(val_fraction * len(train)))
    perm = Generator(PCG64(SeedSequence((seed, 202)))).permutation(len(train))
    validation = [train[i] for i in sorted(perm[:n_val])]
    remaining = [train[i] for i in sorted(perm[n_val:])]

    if labeled_size == "full":
        labeled = remaining
    else:
        k = int(labeled_size)
        if k > len(remaining):
            raise ValueError(
                f"labeled_size {k} exceeds the {len(remaining)} available training pairs"
            )
        lab_seed = seed if subset_seed is None else subset_seed
        perm = Generator(PCG64(SeedSequence((lab_seed, 303)))).permutation(len(remaining))
        labeled = [remaining[i] for i in sorted(perm[:k])]
    labeled_keys = {low.key() for low, _ in labeled}
    unlabeled = [low for low, _ in remaining if low.key() not in labeled_keys]
    return DatasetSplit(
        labeled=labeled, unlabeled=unlabeled, validation=validation, test=test, root=manifest.root
    )
