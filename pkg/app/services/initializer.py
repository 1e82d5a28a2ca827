import logging
from pathlib import Path
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from app.models.schemas import InitializerConfig
from app.services.numerics import (
    Module,
    Parameter,
    Tensor,
    apply_op,
    concat,
    glorot_uniform,
    matmul,
    relu,
    reshape,
)
from app.utils import constants
from app.utils.error_handler import DimensionError, InputError, ParseError

logger = logging.getLogger(__name__)

Views = Union[np.ndarray, Sequence[np.ndarray]]


class ShapeRecord(NamedTuple):
    """One shape of a dataset: its id, labels and its views (rows or images)"""
    shape_id: str
    label: int
    sublabel: int
    views: np.ndarray


# ===== CONVOLUTION PRIMITIVES =====

def output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    if kernel > size + 2 * padding:
        raise DimensionError(f"kernel {kernel} larger than padded input {size} + 2*{padding}")
    return (size + 2 * padding - kernel) // stride + 1


def _windows(padded: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """(C, H', W', k, k) view of every kernel window"""
    win = np.lib.stride_tricks.sliding_window_view(padded, (kernel, kernel), axis=(1, 2))
    return win[:, ::stride, ::stride]


def _scatter_windows(dwin: np.ndarray, padded_shape: Tuple[int, int, int], kernel: int, stride: int) -> np.ndarray:
    """Adjoint of _windows for dwin shaped (C, k, k, H', W')"""
    out = np.zeros(padded_shape)
    h_out, w_out = dwin.shape[3], dwin.shape[4]
    for i in range(kernel):
        for j in range(kernel):
            out[:, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += dwin[:, i, j]
    return out


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a (C_in, H, W) input with (C_out, C_in, k, k) kernels"""
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise DimensionError(f"conv2d expects (C,H,W) and (O,C,k,k), got {x.shape} and {kernels.shape}")
    channels, height, width = x.shape
    c_out, c_in, k, k2 = kernels.shape
    if c_in != channels or k != k2:
        raise DimensionError(f"kernel shape {kernels.shape} does not fit input {x.shape}")
    h_out = output_extent(height, k, stride, padding)
    w_out = output_extent(width, k, stride, padding)

    padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    win = _windows(padded, k, stride)[:, :h_out, :w_out]
    out = np.tensordot(kernels.data, win, axes=([1, 2, 3], [0, 3, 4]))

    def backward(g):
        dkernels = np.tensordot(g, win, axes=([1, 2], [1, 2]))
        dwin = np.tensordot(kernels.data, g, axes=([0], [0]))
        dpadded = _scatter_windows(dwin, padded.shape, k, stride)
        return dpadded[:, padding:padding + height, padding:padding + width], dkernels

    return apply_op(out, (x, kernels), "conv2d", backward)


def max_pool(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Windowed maximum; padding never wins"""
    if x.data.ndim != 3:
        raise DimensionError(f"max_pool expects (C,H,W), got {x.shape}")
    channels, height, width = x.shape
    h_out = output_extent(height, kernel, stride, padding)
    w_out = output_extent(width, kernel, stride, padding)

    padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = _windows(padded, kernel, stride)[:, :h_out, :w_out].reshape(channels, h_out, w_out, kernel * kernel)
    winners = win.argmax(axis=-1)
    out = np.take_along_axis(win, winners[..., None], axis=-1)[..., 0]

    def backward(g):
        di, dj = np.divmod(winners, kernel)
        c_idx, y_idx, x_idx = np.indices(winners.shape)
        dpadded = np.zeros(padded.shape)
        np.add.at(dpadded, (c_idx, y_idx * stride + di, x_idx * stride + dj), g)
        return (dpadded[:, padding:padding + height, padding:padding + width],)

    return apply_op(out, (x,), "max_pool", backward)


class BatchNorm2d(Module):
    """
    Per-channel normalization with running statistics.

    In training mode the statistics come from the current view alone (its spatial
    positions), so no information crosses views before the encoder.
    """

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = constants.BATCH_NORM_MOMENTUM, eps: float = constants.BATCH_NORM_EPS):
        super().__init__()
        self.g = Parameter(np.ones(channels))
        self.b = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor, training: Optional[bool] = None) -> Tensor:
        training = self.training if training is None else training
        gain = self.g.data[:, None, None]
        shift = self.b.data[:, None, None]
        if not training:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)[:, None, None]
            normed = (x.data - self.running_mean[:, None, None]) * inv_std

            def eval_backward(g):
                return g * gain * inv_std, (g * normed).sum(axis=(1, 2)), g.sum(axis=(1, 2))

            return apply_op(normed * gain + shift, (x, self.g, self.b), "batch_norm", eval_backward)

        n = x.shape[1] * x.shape[2]
        mean = x.data.mean(axis=(1, 2), keepdims=True)
        centered = x.data - mean
        var = (centered**2).mean(axis=(1, 2), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        normed = centered * inv_std

        unbiased = var[:, 0, 0] * (n / (n - 1)) if n > 1 else var[:, 0, 0]
        self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean[:, 0, 0]
        self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased

        def train_backward(g):
            dnormed = g * gain
            dx = inv_std / n * (
                n * dnormed
                - dnormed.sum(axis=(1, 2), keepdims=True)
                - normed * (dnormed * normed).sum(axis=(1, 2), keepdims=True)
            )
            return dx, (g * normed).sum(axis=(1, 2)), g.sum(axis=(1, 2))

        return apply_op(normed * gain + shift, (x, self.g, self.b), "batch_norm", train_backward)


class ConvLayer(Module):
    """Conv (no bias, batch-norm follows) + batch-norm + ReLU"""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, padding: int, momentum: float, rng: np.random.Generator):
        super().__init__()
        fan_in, fan_out = c_in * kernel * kernel, c_out * kernel * kernel
        self.w = Parameter(glorot_uniform(rng, fan_in, fan_out, (c_out, c_in, kernel, kernel)))
        self.bn = BatchNorm2d(c_out, momentum=momentum)
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor, training: Optional[bool] = None) -> Tensor:
        return relu(self.bn.forward(conv2d(x, self.w, self.stride, self.padding), training))


# ===== INITIALIZERS =====

class ViewInitializer(Module):
    """Maps each view of a set to one row of Z(0), independently"""

    def __init__(self, cfg: InitializerConfig):
        super().__init__()
        self.cfg = cfg
        self.output_dim = cfg.output_dim or constants.VIEW_DIM

    def check_views(self, views: Views) -> np.ndarray:
        raise NotImplementedError

    def forward(self, views: Views, training: Optional[bool] = None) -> Tensor:
        raise NotImplementedError


class PrecomputedInitializer(ViewInitializer):
    """One learned affine map from precomputed feature rows to width D"""

    def __init__(self, cfg: InitializerConfig, rng: np.random.Generator):
        super().__init__(cfg)
        if cfg.feature_dim is None:
            raise InputError("precomputed initializer needs initializer.feature_dim (the feature row width)")
        self.feature_dim = cfg.feature_dim
        self.w = Parameter(glorot_uniform(rng, self.feature_dim, self.output_dim))
        self.b = Parameter(np.zeros(self.output_dim))

    def check_views(self, views: Views) -> np.ndarray:
        rows = _stack_views(views)
        if rows.ndim != 2:
            raise InputError(f"precomputed views must be feature rows, got array of shape {rows.shape}")
        if rows.shape[1] != self.feature_dim:
            raise InputError(f"feature width {rows.shape[1]} does not match initializer.feature_dim {self.feature_dim}")
        return rows

    def forward(self, views: Views, training: Optional[bool] = None) -> Tensor:
        rows = self.check_views(views)
        return matmul(Tensor(rows), self.w) + self.b


class ShallowConvInitializer(ViewInitializer):
    """Conv stack from the shallow-conv table, then flatten and one affine map to D"""

    def __init__(self, cfg: InitializerConfig, rng: np.random.Generator):
        super().__init__(cfg)
        layers = constants.SHALLOW_CONV_LAYERS[cfg.kind]
        first_in = layers[0][0]
        if cfg.view_channels != first_in:
            raise InputError(f"{cfg.kind} expects {first_in}-channel views, config says {cfg.view_channels}")
        self.geometry = (cfg.view_channels, cfg.view_height, cfg.view_width)
        self.pool = constants.SHALLOW_CONV_POOL
        self.layers = [ConvLayer(*spec, momentum=cfg.bn_momentum, rng=rng) for spec in layers]
        channels, height, width = conv_stack_output(cfg)
        self.flat_dim = channels * height * width
        self.w = Parameter(glorot_uniform(rng, self.flat_dim, self.output_dim))
        self.b = Parameter(np.zeros(self.output_dim))

    def _children(self):
        yield from super()._children()
        for index, layer in enumerate(self.layers):
            yield f"conv{index + 1}", layer

    def check_views(self, views: Views) -> np.ndarray:
        images = _stack_views(views)
        if images.ndim != 4 or images.shape[1:] != self.geometry:
            raise InputError(f"views must be (M, {', '.join(map(str, self.geometry))}) images, got {images.shape}")
        if images.min() < 0.0 or images.max() > 1.0:
            raise InputError("pixel values must lie in [0, 1]")
        return images

    def forward_view(self, image: np.ndarray, training: Optional[bool] = None) -> Tensor:
        x = Tensor(image)
        for index, layer in enumerate(self.layers):
            x = layer.forward(x, training)
            if index == 0:
                x = max_pool(x, *self.pool)
        return matmul(reshape(x, (1, self.flat_dim)), self.w) + self.b

    def forward(self, views: Views, training: Optional[bool] = None) -> Tensor:
        images = self.check_views(views)
        return concat([self.forward_view(image, training) for image in images], axis=0)


def _stack_views(views: Views) -> np.ndarray:
    if isinstance(views, np.ndarray):
        array = views.astype(np.float64, copy=False)
    else:
        if len(views) == 0:
            raise InputError("a view set needs at least one view")
        shapes = {np.shape(v) for v in views}
        if len(shapes) != 1:
            raise InputError(f"inconsistent view geometry: {sorted(shapes)}")
        array = np.stack([np.asarray(v, dtype=np.float64) for v in views])
    if array.shape[0] == 0:
        raise InputError("a view set needs at least one view")
    return array


def conv_stack_output(cfg: InitializerConfig) -> Tuple[int, int, int]:
    """(C, H, W) of the final activation map of a shallow-conv stack"""
    height, width = cfg.view_height, cfg.view_width
    channels = cfg.view_channels
    for index, (_, c_out, kernel, stride, padding) in enumerate(constants.SHALLOW_CONV_LAYERS[cfg.kind]):
        height = output_extent(height, kernel, stride, padding)
        width = output_extent(width, kernel, stride, padding)
        channels = c_out
        if index == 0:
            pool_k, pool_s, pool_p = constants.SHALLOW_CONV_POOL
            height = output_extent(height, pool_k, pool_s, pool_p)
            width = output_extent(width, pool_k, pool_s, pool_p)
    return channels, height, width


def parameter_count(cfg: InitializerConfig) -> int:
    """Learnable parameters of an initializer, computed without building it"""
    d = cfg.output_dim or constants.VIEW_DIM
    if cfg.kind == "precomputed":
        if cfg.feature_dim is None:
            raise InputError("precomputed parameter count needs initializer.feature_dim")
        return cfg.feature_dim * d + d
    count = 0
    for c_in, c_out, kernel, _, _ in constants.SHALLOW_CONV_LAYERS[cfg.kind]:
        count += c_out * c_in * kernel * kernel + 2 * c_out
    channels, height, width = conv_stack_output(cfg)
    return count + channels * height * width * d + d


def build_initializer(cfg: InitializerConfig, rng: np.random.Generator) -> ViewInitializer:
    if cfg.kind == "precomputed":
        return PrecomputedInitializer(cfg, rng)
    return ShallowConvInitializer(cfg, rng)


def initialize_view_set(views: Views, initializer: ViewInitializer, training: Optional[bool] = None) -> Tensor:
    """Z(0): one D-wide row per view, row i computed from view i alone"""
    return initializer.forward(views, training)


# ===== FILES =====

def load_view_image(path: Union[str, Path], size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Read an RGB view as a (3, H, W) array of reals in [0, 1]"""
    with Image.open(path) as image:
        image = image.convert("RGB")
        if size is not None:
            image = image.resize((size[1], size[0]), Image.Resampling.BILINEAR)
        pixels = np.asarray(image, dtype=np.float64) / 255.0
    return np.ascontiguousarray(pixels.transpose(2, 0, 1))


def save_features(path: Union[str, Path], records: Sequence[ShapeRecord]) -> None:
    """Write records in the text feature format; floats use shortest round-trip repr"""
    dims = {int(np.prod(r.views.shape[1:])) for r in records}
    if len(dims) > 1:
        raise InputError(f"records disagree on feature width: {sorted(dims)}")
    dim = dims.pop() if dims else 0
    geometries = {r.views.shape[1:] for r in records}
    header = f"dim={dim} shapes={len(records)}"
    if records and records[0].views.ndim == 4 and len(geometries) == 1:
        header += " geometry=" + "x".join(str(v) for v in records[0].views.shape[1:])

    lines = [header]
    for record in records:
        rows = record.views.reshape(record.views.shape[0], -1)
        lines.append(f"shape {record.shape_id} label={record.label} sublabel={record.sublabel} views={rows.shape[0]}")
        lines.extend(" ".join(repr(value) for value in row.tolist()) for row in rows)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")
    logger.info(f"Wrote {len(records)} shapes ({dim} values per view) to {path}")


def _parse_fields(tokens: Iterable[str], line_number: int) -> dict:
    fields = {}
    for token in tokens:
        if "=" not in token:
            raise ParseError(f"expected key=value, got '{token}'", line_number)
        key, value = token.split("=", 1)
        fields[key] = value
    return fields


def _parse_int(fields: dict, key: str, line_number: int) -> int:
    if key not in fields:
        raise ParseError(f"missing '{key}='", line_number)
    try:
        return int(fields[key])
    except ValueError:
        raise ParseError(f"'{key}' must be an integer, got '{fields[key]}'", line_number)


def load_features(path: Union[str, Path]) -> List[ShapeRecord]:
    """Parse a feature file; pixel datasets are reshaped back to (M, C, H, W)"""
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise ParseError("missing header 'dim=<D> shapes=<N>'", 1)
    header = _parse_fields(lines[0].split(), 1)
    dim = _parse_int(header, "dim", 1)
    count = _parse_int(header, "shapes", 1)
    geometry = None
    if "geometry" in header:
        try:
            geometry = tuple(int(v) for v in header["geometry"].split("x"))
        except ValueError:
            raise ParseError(f"bad geometry '{header['geometry']}'", 1)
        if int(np.prod(geometry)) != dim:
            raise ParseError(f"geometry {geometry} does not hold dim={dim} values", 1)

    records: List[ShapeRecord] = []
    cursor = 1
    while cursor < len(lines):
        line_number = cursor + 1
        tokens = lines[cursor].split()
        cursor += 1
        if not tokens:
            continue
        if tokens[0] != "shape" or len(tokens) < 2:
            raise ParseError(f"expected 'shape <id> label=.. sublabel=.. views=..', got '{lines[cursor - 1]}'", line_number)
        shape_id = tokens[1]
        fields = _parse_fields(tokens[2:], line_number)
        label = _parse_int(fields, "label", line_number)
        sublabel = _parse_int(fields, "sublabel", line_number)
        num_views = _parse_int(fields, "views", line_number)
        if num_views < 1:
            raise ParseError(f"shape {shape_id} declares {num_views} views", line_number)

        rows = []
        for _ in range(num_views):
            if cursor >= len(lines):
                raise ParseError(f"shape {shape_id}: file ends before all {num_views} views", cursor)
            row_number = cursor + 1
            values = lines[cursor].split()
            cursor += 1
            if len(values) != dim:
                raise ParseError(f"shape {shape_id}: view row has {len(values)} values, expected dim={dim}", row_number)
            try:
                rows.append([float(v) for v in values])
            except ValueError:
                raise ParseError(f"shape {shape_id}: non-numeric value in view row", row_number)
        views = np.array(rows, dtype=np.float64)
        if geometry is not None:
            views = views.reshape((num_views, *geometry))
        records.append(ShapeRecord(shape_id, label, sublabel, views))

    if len(records) != count:
        raise ParseError(f"header declares {count} shapes, file holds {len(records)}", 1)
    logger.info(f"Loaded {len(records)} shapes from {path}")
    return records
