"""
Synthetic multi-view datasets and split management.

Every shape is a latent vector (feature mode) or image (pixel mode) seen through a
bank of viewpoint maps shared by the whole dataset. Views are stored in a random
order, so only the multiset of a shape's views carries meaning.
"""
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, model_validator
from scipy.stats import ortho_group

from app.models.schemas import SyntheticSpec
from app.services.initializer import ShapeRecord, load_features, save_features
from app.utils.context_container import RunContext
from app.utils.error_handler import ConfigError, InputError, ParseError

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")


class ViewDataset:
    """Shape records addressable by id, in their stored order"""

    def __init__(self, records: Sequence[ShapeRecord]):
        self.records: List[ShapeRecord] = list(records)
        self._index: Dict[str, int] = {}
        for position, record in enumerate(self.records):
            if record.shape_id in self._index:
                raise InputError(f"duplicate shape id '{record.shape_id}'")
            self._index[record.shape_id] = position

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, shape_id: str) -> bool:
        return shape_id in self._index

    @property
    def ids(self) -> List[str]:
        return [record.shape_id for record in self.records]

    def record(self, shape_id: str) -> ShapeRecord:
        if shape_id not in self._index:
            raise InputError(f"unknown shape id '{shape_id}'")
        return self.records[self._index[shape_id]]

    def position(self, shape_id: str) -> int:
        return self._index[shape_id]

    def target(self, shape_id: str, target: str = "label") -> int:
        record = self.record(shape_id)
        return record.sublabel if target == "sublabel" else record.label

    def num_targets(self, target: str = "label") -> int:
        if not self.records:
            return 0
        return 1 + max(self.target(r.shape_id, target) for r in self.records)

    @property
    def num_classes(self) -> int:
        return self.num_targets("label")

    @property
    def num_sublabels(self) -> int:
        return self.num_targets("sublabel")

    @property
    def view_shape(self) -> Tuple[int, ...]:
        return self.records[0].views.shape[1:] if self.records else ()


class DatasetSplit(BaseModel):
    """Disjoint train/val/test id lists plus the label maps they index"""
    train: List[str] = []
    val: List[str] = []
    test: List[str] = []
    labels: Dict[str, int] = {}
    sublabels: Dict[str, int] = {}

    @model_validator(mode="after")
    def check_disjoint(self):
        seen = set()
        for name in SPLIT_NAMES:
            ids = getattr(self, name)
            overlap = seen.intersection(ids)
            if overlap or len(set(ids)) != len(ids):
                raise ValueError(f"split '{name}' repeats shape ids: {sorted(overlap)[:5]}")
            seen.update(ids)
        return self

    def part(self, name: str) -> List[str]:
        if name not in SPLIT_NAMES:
            raise InputError(f"unknown split '{name}'; expected one of {', '.join(SPLIT_NAMES)}")
        return getattr(self, name)


# ===== GENERATION =====

def _unit_rows(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    rows = rng.normal(size=(count, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _class_directions(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    """Orthonormal when there is room, otherwise random unit directions"""
    if count <= dim and dim > 1:
        return ortho_group.rvs(dim, random_state=rng)[:count]
    return _unit_rows(rng, count, dim)


def _camera_bank(rng: np.random.Generator, views: int, dim: int, identity: bool) -> np.ndarray:
    """One random orthogonal viewpoint map per view slot; every shape is seen through the same rig"""
    if identity or dim == 1:
        return np.stack([np.eye(dim)] * views)
    bank = ortho_group.rvs(dim, size=views, random_state=rng)
    return bank.reshape(views, dim, dim)


def _pixel_cameras(rng: np.random.Generator, views: int, identity: bool) -> List[Tuple[int, bool]]:
    """(quarter turns, mirrored) pairs from the eight symmetries of the square"""
    if identity:
        return [(0, False)] * views
    codes = rng.integers(0, 8, size=views)
    return [(int(code) % 4, bool(code >= 4)) for code in codes]


def _apply_pixel_camera(image: np.ndarray, camera: Tuple[int, bool]) -> np.ndarray:
    turns, mirrored = camera
    out = np.rot90(image, k=turns, axes=(1, 2))
    if mirrored:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def _feature_shapes(spec: SyntheticSpec, rng: np.random.Generator) -> List[ShapeRecord]:
    dim = spec.feature_dim
    prototypes = spec.margin * _class_directions(rng, spec.num_classes, dim)
    offsets = spec.subclass_separation * spec.margin * _unit_rows(rng, spec.num_classes * spec.subclasses, dim)
    offsets = offsets.reshape(spec.num_classes, spec.subclasses, dim)
    cameras = _camera_bank(rng, spec.views, dim, spec.identity_viewpoints)

    records = []
    for label in range(spec.num_classes):
        for index in range(spec.shapes_per_class):
            sublabel = index % spec.subclasses
            latent = prototypes[label] + offsets[label, sublabel]
            latent = latent + spec.shape_spread * rng.normal(size=dim) / math.sqrt(dim)
            views = np.einsum("mij,j->mi", cameras, latent)
            views = views + spec.noise * rng.normal(size=views.shape) / math.sqrt(dim)
            views = views[rng.permutation(spec.views)]
            records.append(ShapeRecord(
                f"s{label:03d}_{index:04d}",
                label,
                label * spec.subclasses + sublabel,
                views,
            ))
    return records


def _pixel_shapes(spec: SyntheticSpec, rng: np.random.Generator) -> List[ShapeRecord]:
    geometry = (spec.image_channels, spec.image_height, spec.image_width)
    size = int(np.prod(geometry))
    # margin sets prototype contrast; pixels stay in [0, 1]
    prototypes = 0.5 + 0.5 * np.tanh(spec.margin / 5.0 * rng.normal(size=(spec.num_classes, *geometry)))
    blend = min(spec.subclass_separation, 1.0)
    variants = rng.uniform(0.0, 1.0, size=(spec.num_classes, spec.subclasses, *geometry))
    cameras = _pixel_cameras(rng, spec.views, spec.identity_viewpoints)

    records = []
    for label in range(spec.num_classes):
        for index in range(spec.shapes_per_class):
            sublabel = index % spec.subclasses
            image = (1.0 - blend) * prototypes[label] + blend * variants[label, sublabel]
            image = image + spec.shape_spread * 0.1 * rng.normal(size=geometry)
            views = np.stack([_apply_pixel_camera(image, camera) for camera in cameras])
            views = views + spec.noise * rng.normal(size=views.shape) / math.sqrt(size)
            views = np.clip(views, 0.0, 1.0)[rng.permutation(spec.views)]
            records.append(ShapeRecord(
                f"s{label:03d}_{index:04d}",
                label,
                label * spec.subclasses + sublabel,
                views,
            ))
    return records


def generate_synthetic(spec: SyntheticSpec) -> ViewDataset:
    """Seed-deterministic dataset; sublabels are numbered globally (label * subclasses + k)"""
    if spec.mode == "feature" and spec.feature_dim < 1:
        raise ConfigError("synthetic.feature_dim must be positive")
    rng = RunContext(spec.seed).rng("data")
    records = _feature_shapes(spec, rng) if spec.mode == "feature" else _pixel_shapes(spec, rng)
    logger.info(
        f"Generated {len(records)} {spec.mode}-mode shapes: {spec.num_classes} classes x "
        f"{spec.subclasses} subclasses, {spec.views} views each"
    )
    return ViewDataset(records)


# ===== SAMPLING AND SPLITS =====

def subset_views(views: np.ndarray, count: int, seed: int, key: int = 0) -> np.ndarray:
    """`count` views drawn uniformly without replacement; same (seed, key), same subset"""
    total = views.shape[0]
    if not 1 <= count <= total:
        raise InputError(f"cannot select {count} views from a set of {total}")
    rng = RunContext(seed).rng("subset", key)
    return views[rng.permutation(total)[:count]]


def _allocate(size: int, ratios: Sequence[float]) -> List[int]:
    """Largest-remainder rounding of size * ratios; ties go to the earlier split"""
    raw = [size * r for r in ratios]
    counts = [int(math.floor(v + 1e-9)) for v in raw]
    leftovers = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in leftovers[: size - sum(counts)]:
        counts[i] += 1
    return counts


def split(dataset: ViewDataset, ratios: Sequence[float], seed: int) -> DatasetSplit:
    """Stratified by class, deterministic under seed"""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InputError(f"split ratios must be three nonnegative numbers summing to 1, got {list(ratios)}")
    context = RunContext(seed)
    needed = sum(1 for r in ratios if r > 0)
    parts: Dict[str, List[str]] = {name: [] for name in SPLIT_NAMES}
    for label in range(dataset.num_classes):
        members = [r.shape_id for r in dataset.records if r.label == label]
        if not members:
            continue
        counts = _allocate(len(members), ratios)
        if len(members) < needed or counts[0] == 0:
            raise InputError(
                f"class {label} has {len(members)} shapes, too few to stratify over ratios {list(ratios)}"
            )
        order = context.rng("split", label).permutation(len(members))
        shuffled = [members[i] for i in order]
        start = 0
        for name, count in zip(SPLIT_NAMES, counts):
            parts[name].extend(shuffled[start:start + count])
            start += count
    result = DatasetSplit(
        **parts,
        labels={r.shape_id: r.label for r in dataset.records},
        sublabels={r.shape_id: r.sublabel for r in dataset.records},
    )
    logger.info(f"Split {len(dataset)} shapes into {len(result.train)}/{len(result.val)}/{len(result.test)}")
    return result


# ===== FILES =====

def save_dataset(path: Union[str, Path], dataset: ViewDataset) -> None:
    save_features(path, dataset.records)


def load_dataset(path: Union[str, Path]) -> ViewDataset:
    if not Path(path).is_file():
        raise InputError(f"dataset file not found: {path}")
    return ViewDataset(load_features(path))


def write_split(path: Union[str, Path], parts: DatasetSplit) -> None:
    lines = [f"{name}: {' '.join(parts.part(name))}".rstrip() for name in SPLIT_NAMES]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")
    logger.info(f"Wrote split sidecar to {path}")


def read_split(path: Union[str, Path], dataset: Optional[ViewDataset] = None) -> DatasetSplit:
    """Parse `train:`/`val:`/`test:` lines; ids are checked against the dataset when given"""
    if not Path(path).is_file():
        raise InputError(f"split file not found: {path}")
    parts: Dict[str, List[str]] = {}
    for number, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        name, sep, rest = line.partition(":")
        name = name.strip()
        if not sep or name not in SPLIT_NAMES:
            raise ParseError(f"expected 'train:', 'val:' or 'test:', got '{line}'", number)
        if name in parts:
            raise ParseError(f"split '{name}' listed twice", number)
        parts[name] = rest.split()
        if dataset is not None:
            unknown = [shape_id for shape_id in parts[name] if shape_id not in dataset]
            if unknown:
                raise ParseError(f"unknown shape id '{unknown[0]}' in '{name}'", number)
    try:
        if dataset is None:
            return DatasetSplit(**parts)
        return DatasetSplit(
            **parts,
            labels={r.shape_id: r.label for r in dataset.records},
            sublabels={r.shape_id: r.sublabel for r in dataset.records},
        )
    except ValueError as exc:
        raise InputError(f"invalid split file {path}: {exc}")
