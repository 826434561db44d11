"""Volumes, cases, file IO, normalization, patch sampling and augmentation.

Volume file layout (``VSEG1``)::

    VSEG1 <f32|u8> D H W spacing_x spacing_y spacing_z\\n
    <little-endian payload, x fastest>

Arrays are held as ``(D, H, W)`` = ``(z, y, x)`` in C order, so the payload is
simply ``data.tobytes()``. ``Volume.spacing`` follows array axis order
``(z, y, x)``; the header lists it x-first.
"""
from __future__ import annotations

import math
import queue
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError, ParseError, ShapeError
from .regions import ENHANCING, LABELS, NECROSIS, EDEMA

MAGIC = "VSEG1"
MODALITIES = ("t1", "t1ce", "t2", "flair")
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


@dataclass
class Volume:
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.data.ndim != 3:
            raise ShapeError(f"volume must be 3-d, got shape {self.data.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class LabelVolume:
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.data.ndim != 3:
            raise ShapeError(f"label volume must be 3-d, got shape {self.data.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        bad = np.setdiff1d(np.unique(self.data), LABELS)
        if bad.size:
            raise ValueError(f"label values {bad.tolist()} not in {LABELS}")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class Case:
    id: str
    modalities: List[Volume]
    label: Optional[LabelVolume] = None
    dataset_tag: int = 0

    def __post_init__(self):
        if len(self.modalities) != len(MODALITIES):
            raise ShapeError(f"case {self.id}: expected {len(MODALITIES)} modalities, got {len(self.modalities)}")
        ref = self.modalities[0]
        others = list(self.modalities[1:]) + ([self.label] if self.label is not None else [])
        for v in others:
            if v.shape != ref.shape or not np.allclose(v.spacing, ref.spacing):
                raise ShapeError(
                    f"case {self.id}: volumes disagree in shape/spacing "
                    f"({v.shape}, {v.spacing}) vs ({ref.shape}, {ref.spacing})"
                )

    @property
    def shape(self):
        return self.modalities[0].shape

    @property
    def spacing(self):
        return self.modalities[0].spacing

    def image(self) -> np.ndarray:
        """Modalities stacked as channels: [4, D, H, W] float32."""
        return np.stack([m.data for m in self.modalities])


# -- file IO -----------------------------------------------------------------
def _format_header(dtype_code: str, shape, spacing) -> bytes:
    d, h, w = shape
    sz, sy, sx = spacing
    return f"{MAGIC} {dtype_code} {d} {h} {w} {sx!r} {sy!r} {sz!r}\n".encode("ascii")


def write_volume(volume, path) -> None:
    """Write a Volume (f32) or LabelVolume (u8)."""
    code = "u8" if isinstance(volume, LabelVolume) else "f32"
    payload = np.ascontiguousarray(volume.data, dtype=_DTYPES[code]).tobytes()
    with open(path, "wb") as fh:
        fh.write(_format_header(code, volume.shape, volume.spacing))
        fh.write(payload)


def _parse_header(line: bytes, path):
    try:
        fields = line.decode("ascii").split()
    except UnicodeDecodeError:
        raise ParseError(path, "header", "not ASCII") from None
    if not fields or fields[0] != MAGIC:
        raise ParseError(path, "magic", f"expected {MAGIC!r}, got {fields[:1]}")
    if len(fields) != 8:
        raise ParseError(path, "header", f"expected 8 fields, got {len(fields)}")
    code = fields[1]
    if code not in _DTYPES:
        raise ParseError(path, "dtype", f"unsupported dtype {code!r}")
    try:
        shape = tuple(int(x) for x in fields[2:5])
    except ValueError:
        raise ParseError(path, "shape", f"non-integer dimensions {fields[2:5]}") from None
    if min(shape) < 1:
        raise ParseError(path, "shape", f"dimensions must be positive, got {shape}")
    try:
        sx, sy, sz = (float(x) for x in fields[5:8])
    except ValueError:
        raise ParseError(path, "spacing", f"non-numeric spacing {fields[5:8]}") from None
    if min(sx, sy, sz) <= 0 or not all(map(math.isfinite, (sx, sy, sz))):
        raise ParseError(path, "spacing", f"spacing must be positive, got {(sx, sy, sz)}")
    return code, shape, (sz, sy, sx)


def read_header(path):
    """Return ``(dtype_code, shape, spacing)`` without loading the payload."""
    with open(path, "rb") as fh:
        line = fh.readline()
    return _parse_header(line, path)


def read_volume(path):
    """Read a VSEG1 file as Volume (f32) or LabelVolume (u8)."""
    with open(path, "rb") as fh:
        code, shape, spacing = _parse_header(fh.readline(), path)
        payload = fh.read()
    dtype = _DTYPES[code]
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) < expected:
        raise ParseError(path, "payload", f"truncated: {len(payload)} bytes, header implies {expected}")
    if len(payload) > expected:
        raise ParseError(path, "payload", f"{len(payload) - expected} trailing bytes after payload")
    data = np.frombuffer(payload, dtype=dtype).reshape(shape)
    if code == "u8":
        try:
            return LabelVolume(data.copy(), spacing)
        except ValueError as exc:
            raise ParseError(path, "labels", str(exc)) from None
    return Volume(data.astype(np.float32), spacing)


@dataclass
class CaseDescriptor:
    id: str
    dataset_tag: int
    modality_paths: List[Path]
    label_path: Optional[Path]
    shape: Tuple[int, int, int]
    spacing: Tuple[float, float, float]


def read_manifest(path) -> List[CaseDescriptor]:
    """Parse a tab-separated manifest and check every case's headers agree.

    Columns: id, dataset_tag, t1, t1ce, t2, flair[, label]. Relative paths
    resolve against the manifest's directory; ``#`` starts a comment.
    """
    path = Path(path)
    root = path.parent
    cases, seen = [], set()
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        cols = [c.strip() for c in line.split("\t")]
        where = f"line {lineno}"
        if len(cols) not in (6, 7):
            raise ParseError(path, where, f"expected 6 or 7 tab-separated columns, got {len(cols)}")
        case_id = cols[0]
        if case_id in seen:
            raise ParseError(path, where, f"duplicate case id {case_id!r}")
        seen.add(case_id)
        try:
            tag = int(cols[1])
        except ValueError:
            raise ParseError(path, where, f"case {case_id}: dataset_tag {cols[1]!r} is not an integer") from None
        files = [root / c for c in cols[2:]]
        for f in files:
            if not f.exists():
                raise ParseError(path, where, f"case {case_id}: missing file {f}")
        headers = [read_header(f) for f in files]
        shape, spacing = headers[0][1], headers[0][2]
        for f, (code, s, sp), name in zip(files, headers, MODALITIES + ("label",)):
            if s != shape or not np.allclose(sp, spacing):
                raise ParseError(
                    path, where,
                    f"case {case_id}: {name} has shape {s} spacing {sp}, expected {shape} {spacing}",
                )
            expected = "u8" if name == "label" else "f32"
            if code != expected:
                raise ParseError(path, where, f"case {case_id}: {name} stored as {code}, expected {expected}")
        cases.append(CaseDescriptor(
            case_id, tag, files[:4], files[4] if len(files) == 5 else None, shape, spacing,
        ))
    return cases


def load_case(desc: CaseDescriptor) -> Case:
    modalities = [read_volume(p) for p in desc.modality_paths]
    label = read_volume(desc.label_path) if desc.label_path is not None else None
    return Case(desc.id, modalities, label, desc.dataset_tag)


def load_manifest(path) -> List[Case]:
    return [load_case(d) for d in read_manifest(path)]


def write_case(case: Case, directory) -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, vol in zip(MODALITIES, case.modalities):
        p = directory / f"{case.id}_{name}.vseg"
        write_volume(vol, p)
        paths.append(p)
    if case.label is not None:
        p = directory / f"{case.id}_seg.vseg"
        write_volume(case.label, p)
        paths.append(p)
    return paths


def write_manifest(cases: Sequence[Case], directory, name: str = "manifest.tsv") -> Path:
    """Write every case's volumes into ``directory`` plus a manifest listing them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["# id\tdataset_tag\tt1\tt1ce\tt2\tflair\tlabel"]
    for case in cases:
        paths = write_case(case, directory)
        lines.append("\t".join([case.id, str(case.dataset_tag)] + [p.name for p in paths]))
    out = directory / name
    out.write_text("\n".join(lines) + "\n")
    return out


# -- preprocessing -------------------------------------------------------------
def normalize_case(case: Case) -> Case:
    """Z-score each modality over its own brain region (nonzero voxels); zero outside."""
    normalized = []
    for name, vol in zip(MODALITIES, case.modalities):
        data = vol.data.astype(np.float64)
        mask = data != 0
        if not mask.any():
            raise DegenerateInputError(f"case {case.id}: modality {name} has an empty brain region")
        brain = data[mask]
        std = brain.std()
        if std == 0:
            raise DegenerateInputError(f"case {case.id}: modality {name} has zero variance in the brain region")
        out = np.zeros_like(data)
        out[mask] = (brain - brain.mean()) / std
        normalized.append(Volume(out.astype(np.float32), vol.spacing))
    return Case(case.id, normalized, case.label, case.dataset_tag)


# -- patches -----------------------------------------------------------------
def _as_triple(size) -> Tuple[int, int, int]:
    if isinstance(size, (int, np.integer)):
        return (int(size),) * 3
    size = tuple(int(s) for s in size)
    if len(size) != 3:
        raise ValueError(f"patch size needs 3 values, got {size}")
    return size


def pad_to_at_least(image: np.ndarray, label: Optional[np.ndarray], size):
    """Zero-pad (background for labels) so every spatial axis is >= size."""
    size = _as_triple(size)
    spatial = image.shape[1:]
    pads = []
    for s, p in zip(spatial, size):
        total = max(0, p - s)
        pads.append((total // 2, total - total // 2))
    if not any(sum(p) for p in pads):
        return image, label
    image = np.pad(image, [(0, 0)] + pads)
    if label is not None:
        label = np.pad(label, pads)
    return image, label


def sample_patch(case: Case, patch_size, rng: np.random.Generator):
    """Crop a patch at a uniformly random feasible corner.

    Returns ``(image [4, P, P, P], label [P, P, P] or None)``.
    """
    size = _as_triple(patch_size)
    image, label = pad_to_at_least(case.image(), case.label.data if case.label else None, size)
    corner = [int(rng.integers(0, s - p + 1)) for s, p in zip(image.shape[1:], size)]
    sl = tuple(slice(c, c + p) for c, p in zip(corner, size))
    return image[(slice(None),) + sl].copy(), (label[sl].copy() if label is not None else None)


def center_crop(case: Case, patch_size):
    """Deterministic central patch (used for validation)."""
    size = _as_triple(patch_size)
    image, label = pad_to_at_least(case.image(), case.label.data if case.label else None, size)
    corner = [(s - p) // 2 for s, p in zip(image.shape[1:], size)]
    sl = tuple(slice(c, c + p) for c, p in zip(corner, size))
    return image[(slice(None),) + sl].copy(), (label[sl].copy() if label is not None else None)


# -- augmentation --------------------------------------------------------------
@dataclass
class AugmentConfig:
    rotation_max_deg: Tuple[float, float, float] = (15.0, 15.0, 15.0)
    scale_range: Tuple[float, float] = (0.85, 1.25)
    elastic_grid: int = 8
    elastic_sigma: float = 2.0
    gamma_range: Tuple[float, float] = (0.7, 1.5)
    mirror_axes: Tuple[int, ...] = (0, 1, 2)
    p_rotation: float = 0.2
    p_scale: float = 0.2
    p_elastic: float = 0.2
    p_gamma: float = 0.2
    p_mirror: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        self.rotation_max_deg = tuple(float(x) for x in self.rotation_max_deg)
        self.scale_range = tuple(float(x) for x in self.scale_range)
        self.gamma_range = tuple(float(x) for x in self.gamma_range)
        self.mirror_axes = tuple(int(x) for x in self.mirror_axes)
        if min(self.scale_range) <= 0 or self.scale_range[0] > self.scale_range[1]:
            raise ValueError(f"scale_range must be positive and ordered, got {self.scale_range}")
        if min(self.gamma_range) <= 0 or self.gamma_range[0] > self.gamma_range[1]:
            raise ValueError(f"gamma_range must be positive and ordered, got {self.gamma_range}")
        for name in ("p_rotation", "p_scale", "p_elastic", "p_gamma", "p_mirror"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if any(a not in (0, 1, 2) for a in self.mirror_axes):
            raise ValueError(f"mirror_axes must be drawn from (0, 1, 2), got {self.mirror_axes}")
        if self.elastic_grid < 1 or self.elastic_sigma < 0:
            raise ValueError("elastic_grid must be >= 1 and elastic_sigma >= 0")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(p_rotation=0.0, p_scale=0.0, p_elastic=0.0, p_gamma=0.0, p_mirror=0.0)

    def to_dict(self) -> dict:
        return asdict(self)


def _rotation_matrix(angles) -> np.ndarray:
    a, b, c = angles
    rz = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
    ry = np.array([[np.cos(b), 0, np.sin(b)], [0, 1, 0], [-np.sin(b), 0, np.cos(b)]])
    rx = np.array([[np.cos(c), -np.sin(c), 0], [np.sin(c), np.cos(c), 0], [0, 0, 1]])
    return rz @ ry @ rx


def _elastic_field(shape, grid, sigma, rng) -> np.ndarray:
    """Smooth random displacement (voxels), [3, D, H, W]."""
    coarse = tuple(max(2, int(np.ceil(s / grid)) + 1) for s in shape)
    out = np.empty((3,) + tuple(shape))
    for i in range(3):
        ctrl = rng.normal(0.0, sigma, size=coarse)
        zoomed = ndimage.zoom(ctrl, [s / c for s, c in zip(shape, coarse)], order=3, mode="nearest",
                              grid_mode=True)
        out[i] = zoomed[: shape[0], : shape[1], : shape[2]]
    return out


def augment(image: np.ndarray, label: Optional[np.ndarray], cfg: AugmentConfig,
            rng: np.random.Generator):
    """Random rotation/scaling/elastic warp (one resampling), gamma, mirroring.

    Images resample trilinearly, labels by nearest neighbor; both use edge
    extension so no label value can appear that was not already present.
    """
    image = np.asarray(image)
    if label is not None and label.shape != image.shape[1:]:
        raise ShapeError(f"image {image.shape} and label {label.shape} are not congruent")
    shape = image.shape[1:]

    matrix = np.eye(3)
    warped = False
    if rng.random() < cfg.p_rotation:
        angles = [np.deg2rad(rng.uniform(-m, m)) for m in cfg.rotation_max_deg]
        matrix = _rotation_matrix(angles) @ matrix
        warped = True
    if rng.random() < cfg.p_scale:
        matrix = matrix / rng.uniform(*cfg.scale_range)
        warped = True
    displacement = None
    if rng.random() < cfg.p_elastic:
        displacement = _elastic_field(shape, cfg.elastic_grid, cfg.elastic_sigma, rng)
        warped = True

    if warped:
        center = (np.asarray(shape, dtype=float) - 1) / 2
        grid = np.indices(shape, dtype=float).reshape(3, -1) - center[:, None]
        coords = (matrix @ grid + center[:, None]).reshape((3,) + tuple(shape))
        if displacement is not None:
            coords = coords + displacement
        image = np.stack([
            ndimage.map_coordinates(ch, coords, order=1, mode="nearest") for ch in image
        ]).astype(image.dtype)
        if label is not None:
            label = ndimage.map_coordinates(label, coords, order=0, mode="nearest").astype(label.dtype)

    if rng.random() < cfg.p_gamma:
        image = image.copy()
        for c in range(image.shape[0]):
            image[c] = gamma_correct(image[c], rng.uniform(*cfg.gamma_range))

    for axis in cfg.mirror_axes:
        if rng.random() < cfg.p_mirror:
            image = np.flip(image, axis=axis + 1)
            if label is not None:
                label = np.flip(label, axis=axis)
    image = np.ascontiguousarray(image)
    label = np.ascontiguousarray(label) if label is not None else None
    return image, label


def gamma_correct(x: np.ndarray, gamma: float) -> np.ndarray:
    """Apply ``gamma`` after min-max rescaling to [0, 1], then map back."""
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 0:
        return x.copy()
    unit = (x.astype(np.float64) - lo) / (hi - lo)
    return (unit ** gamma * (hi - lo) + lo).astype(x.dtype)


# -- synthetic cohort ------------------------------------------------------------
# relative intensity per modality for (healthy, necrosis, edema, enhancing)
_CONTRAST = {
    "t1": (1.0, 0.55, 0.80, 0.90),
    "t1ce": (1.0, 0.60, 0.85, 2.00),
    "t2": (1.0, 1.50, 1.80, 1.30),
    "flair": (1.0, 1.20, 2.00, 1.50),
}


def _ellipsoid(coords, center, radii) -> np.ndarray:
    r = np.maximum(np.asarray(radii, dtype=float), 1e-6)
    return sum(((coords[i] - center[i]) / r[i]) ** 2 for i in range(3)) <= 1.0


def synth_case(case_id: str, size, rng: np.random.Generator, has_enhancing: bool = True,
               spacing=(1.0, 1.0, 1.0), noise_std: float = 0.05, dataset_tag: int = 0) -> Case:
    shape = np.asarray(_as_triple(size), dtype=float)
    if shape.min() < 16:
        raise ValueError(f"synthetic volumes need >= 16 voxels per axis, got {tuple(shape.astype(int))}")
    coords = np.indices(tuple(shape.astype(int)), dtype=float)

    brain_center = (shape - 1) / 2 + rng.uniform(-0.03, 0.03, 3) * shape
    brain = _ellipsoid(coords, brain_center, shape * rng.uniform(0.40, 0.46, 3))
    tumor_center = brain_center + rng.uniform(-0.1, 0.1, 3) * shape
    edema_r = shape * rng.uniform(0.2, 0.3, 3)
    core_r = edema_r * rng.uniform(0.55, 0.75)
    rim = max(1.0, 0.3 * float(core_r.mean()))
    edema = _ellipsoid(coords, tumor_center, edema_r) & brain
    core = _ellipsoid(coords, tumor_center, core_r) & brain
    inner = _ellipsoid(coords, tumor_center, core_r - rim) & brain

    labels = np.zeros(coords.shape[1:], dtype=np.uint8)
    labels[edema] = EDEMA
    labels[core] = NECROSIS
    if has_enhancing:
        labels[core & ~inner] = ENHANCING

    tissue = np.select(
        [labels == NECROSIS, labels == EDEMA, labels == ENHANCING], [1, 2, 3], default=0
    )
    modalities = []
    for name in MODALITIES:
        field_noise = ndimage.gaussian_filter(rng.normal(size=labels.shape), sigma=shape.min() / 8)
        field_noise *= 0.15 / max(np.abs(field_noise).max(), 1e-12)
        contrast = np.asarray(_CONTRAST[name])[tissue]
        values = contrast * (1.0 + field_noise) + noise_std * rng.normal(size=labels.shape)
        values = np.where(brain, np.maximum(values, 0.05), 0.0)
        modalities.append(Volume(values.astype(np.float32), spacing))
    return Case(case_id, modalities, LabelVolume(labels, spacing), dataset_tag)


def synth_cohort(n: int, size=32, rng_seed: int = 0, et_free_fraction: float = 0.3,
                 spacing=(1.0, 1.0, 1.0), noise_std: float = 0.05, dataset_tag: int = 0,
                 id_prefix: str = "synth") -> List[Case]:
    """Desk-scale cohort of brain-like volumes with nested tumor compartments.

    A fraction ``et_free_fraction`` of cases (in expectation) has no enhancing
    tumor at all.
    """
    if not 0.0 <= et_free_fraction <= 1.0:
        raise ValueError("et_free_fraction must lie in [0, 1]")
    seeds = np.random.SeedSequence(rng_seed).spawn(n)
    cases = []
    for i, seed in enumerate(seeds):
        rng = np.random.default_rng(seed)
        has_et = rng.random() >= et_free_fraction
        cases.append(synth_case(f"{id_prefix}{i:03d}", size, rng, has_et, spacing, noise_std, dataset_tag))
    return cases


# -- batch production --------------------------------------------------------------
@dataclass
class BatchGenerator:
    """Produces (images [B, 4, P, P, P], labels [B, P, P, P]) training batches.

    Batch ``j`` is built by worker ``j % workers`` from that worker's own
    seeded stream, so the sequence depends only on ``(seed, workers)``. With
    ``workers > 1`` each worker runs in a thread and feeds a bounded queue.
    """

    cases: Sequence[Case]
    patch_size: int
    batch_size: int
    augment_cfg: AugmentConfig = field(default_factory=AugmentConfig.disabled)
    seed: int = 0
    workers: int = 1
    prefetch: int = 2

    def __post_init__(self):
        if not self.cases:
            raise ValueError("BatchGenerator needs at least one case")
        self.workers = max(1, int(self.workers))
        seeds = np.random.SeedSequence(self.seed).spawn(self.workers)
        self._rngs = [np.random.default_rng(s) for s in seeds]
        self._count = 0
        self._queues = None
        self._stop = threading.Event()

    def _make(self, rng) -> Tuple[np.ndarray, np.ndarray]:
        images, labels = [], []
        for _ in range(self.batch_size):
            case = self.cases[int(rng.integers(len(self.cases)))]
            img, lab = sample_patch(case, self.patch_size, rng)
            img, lab = augment(img, lab, self.augment_cfg, rng)
            images.append(img)
            labels.append(lab)
        return np.stack(images), np.stack(labels)

    def _worker(self, w: int) -> None:
        q = self._queues[w]
        while not self._stop.is_set():
            batch = self._make(self._rngs[w])
            while not self._stop.is_set():
                try:
                    q.put(batch, timeout=0.1)
                    break
                except queue.Full:
                    continue

    def next_batch(self):
        w = self._count % self.workers
        self._count += 1
        if self.workers == 1:
            return self._make(self._rngs[0])
        if self._queues is None:
            self._queues = [queue.Queue(maxsize=self.prefetch) for _ in range(self.workers)]
            self._threads = [
                threading.Thread(target=self._worker, args=(i,), daemon=True) for i in range(self.workers)
            ]
            for t in self._threads:
                t.start()
        return self._queues[w].get()

    def close(self) -> None:
        self._stop.set()

    def __iter__(self):
        return self

    def __next__(self):
        return self.next_batch()
