"""Localization and segmentation networks and the image -> box -> mask chain."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .tensor_core import ConfigError, LayerSpec, LayerParams

MIN_BOX_SIDE = 10.0
MIN_CROP_PIXELS = 2.0
THRESHOLD = 0.5


@dataclass
class NetworkConfig:
    name: str
    input_shape: tuple
    layers: list
    profile: str = "desk"

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec.from_dict(l)
                       for l in self.layers]

    def infer_shapes(self) -> list[tuple]:
        """Run shape inference; returns the shape after every layer."""
        shapes = [self.input_shape]
        for spec in self.layers:
            shapes.append(tc.output_shape(spec, shapes[-1]))
        return shapes

    @property
    def output_size(self) -> int:
        return int(np.prod(self.infer_shapes()[-1]))

    def to_dict(self) -> dict:
        return {"name": self.name, "profile": self.profile,
                "input_shape": list(self.input_shape),
                "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(name=d["name"], input_shape=d["input_shape"], layers=d["layers"],
                   profile=d.get("profile", "desk"))


def _conv(name, k, size, c=None, stride=1, pad=0):
    return LayerSpec("conv", name, kernels=k, size=size, channels=c, stride=stride, pad=pad)


def paper_localization_config() -> NetworkConfig:
    # five conv + three fc; first seven layers follow the AlexNet layout
    layers = [
        _conv("conv1", 96, 11, 3, stride=4, pad=2), LayerSpec("relu", "relu1"),
        LayerSpec("rn", "rn1"), LayerSpec("maxpool", "pool1"),
        _conv("conv2", 256, 5, 96, pad=2), LayerSpec("relu", "relu2"),
        LayerSpec("rn", "rn2"), LayerSpec("maxpool", "pool2"),
        _conv("conv3", 384, 3, 256, pad=1), LayerSpec("relu", "relu3"),
        _conv("conv4", 384, 3, 384, pad=1), LayerSpec("relu", "relu4"),
        _conv("conv5", 256, 3, 384, pad=1), LayerSpec("relu", "relu5"),
        LayerSpec("maxpool", "pool5"),
        LayerSpec("fc", "fc6", outputs=4096), LayerSpec("relu", "relu6"),
        LayerSpec("fc", "fc7", outputs=4096), LayerSpec("relu", "relu7"),
        LayerSpec("fc", "fc8", outputs=4),
    ]
    return NetworkConfig("localization", (224, 224, 3), layers, profile="paper")


def paper_segmentation_config() -> NetworkConfig:
    # C(256,5x5x3)-RN-MP-C(384,3x3x256)-C(384,3x3x384)-C(256,3x3x384)-MP-FC
    layers = [
        _conv("conv1", 256, 5, 3), LayerSpec("relu", "relu1"),
        LayerSpec("rn", "rn1"), LayerSpec("maxpool", "pool1"),
        _conv("conv2", 384, 3, 256, pad=1), LayerSpec("relu", "relu2"),
        _conv("conv3", 384, 3, 384, pad=1), LayerSpec("relu", "relu3"),
        _conv("conv4", 256, 3, 384, pad=1), LayerSpec("relu", "relu4"),
        LayerSpec("maxpool", "pool2"),
        LayerSpec("fc", "fc5", outputs=50 * 50),
        LayerSpec("logistic", "prob"),
    ]
    return NetworkConfig("segmentation", (55, 55, 3), layers, profile="paper")


def desk_localization_config(width: int = 16) -> NetworkConfig:
    w = width
    layers = [
        _conv("conv1", w, 5, 3, stride=2, pad=2), LayerSpec("relu", "relu1"),
        LayerSpec("rn", "rn1"), LayerSpec("maxpool", "pool1"),
        _conv("conv2", 2 * w, 3, w, pad=1), LayerSpec("relu", "relu2"),
        LayerSpec("maxpool", "pool2"),
        _conv("conv3", 2 * w, 3, 2 * w, pad=1), LayerSpec("relu", "relu3"),
        LayerSpec("maxpool", "pool3"),
        LayerSpec("fc", "fc4", outputs=64), LayerSpec("relu", "relu4"),
        LayerSpec("fc", "fc5", outputs=4),
    ]
    return NetworkConfig("localization", (64, 64, 3), layers, profile="desk")


def desk_segmentation_config(width: int = 16, side: int = 31, mask_side: int = 26) -> NetworkConfig:
    w = width
    layers = [
        _conv("conv1", 2 * w, 5, 3), LayerSpec("relu", "relu1"),
        LayerSpec("rn", "rn1"), LayerSpec("maxpool", "pool1"),
        _conv("conv2", 3 * w, 3, 2 * w, pad=1), LayerSpec("relu", "relu2"),
        _conv("conv3", 3 * w, 3, 3 * w, pad=1), LayerSpec("relu", "relu3"),
        _conv("conv4", 2 * w, 3, 3 * w, pad=1), LayerSpec("relu", "relu4"),
        LayerSpec("maxpool", "pool2"),
        LayerSpec("fc", "fc5", outputs=mask_side * mask_side),
        LayerSpec("logistic", "prob"),
    ]
    return NetworkConfig("segmentation", (side, side, 3), layers, profile="desk")


def profile_configs(profile: str) -> tuple[NetworkConfig, NetworkConfig]:
    if profile == "paper":
        return paper_localization_config(), paper_segmentation_config()
    if profile == "desk":
        return desk_localization_config(), desk_segmentation_config()
    raise ConfigError(f"unknown profile {profile!r}")


def load_network_configs(path) -> tuple[NetworkConfig, NetworkConfig]:
    """Read ``{"profile": ..., "localization": {...}, "segmentation": {...}}``.

    Missing network sections fall back to the named profile.
    """
    d = json.loads(Path(path).read_text())
    loc, seg = profile_configs(d.get("profile", "desk"))
    if "localization" in d:
        loc = NetworkConfig.from_dict(d["localization"])
    if "segmentation" in d:
        seg = NetworkConfig.from_dict(d["segmentation"])
    validate_pair(loc, seg)
    return loc, seg


def save_network_configs(path, loc: NetworkConfig, seg: NetworkConfig):
    Path(path).write_text(json.dumps(
        {"profile": loc.profile, "localization": loc.to_dict(),
         "segmentation": seg.to_dict()}, indent=2))


def validate_pair(loc: NetworkConfig, seg: NetworkConfig):
    lshapes, sshapes = loc.infer_shapes(), seg.infer_shapes()
    if loc.input_shape[-1] != 3 or seg.input_shape[-1] != 3:
        raise ConfigError("both networks take 3-channel input")
    if loc.input_shape[0] != loc.input_shape[1]:
        raise ConfigError("localization input must be square")
    if lshapes[-1] != (4,):
        raise ConfigError(f"localization output must be 4 box coordinates, got {lshapes[-1]}")
    m = int(round(np.sqrt(sshapes[-1][0])))
    if len(sshapes[-1]) != 1 or m * m != sshapes[-1][0]:
        raise ConfigError(f"segmentation output {sshapes[-1]} is not a square mask")
    if seg.layers[-1].kind != "logistic":
        raise ConfigError("segmentation network must end in a logistic layer")


class Network:
    """A feed-forward stack of layers sharing one parameter list."""

    def __init__(self, config: NetworkConfig, params: list):
        self.config = config
        self.layers = config.layers
        self.params = params
        self.shapes = config.infer_shapes()
        self._cache = None

    @classmethod
    def build(cls, config: NetworkConfig, rng: np.random.Generator, init_std=0.01,
              dtype=np.float64) -> "Network":
        shapes = config.infer_shapes()
        params = [tc.init_params(s, shapes[i], rng, init_std, dtype) if s.has_params else None
                  for i, s in enumerate(config.layers)]
        return cls(config, params)

    @property
    def dtype(self):
        return next(p.weights.dtype for p in self.params if p is not None)

    def param_layers(self):
        for spec, p in zip(self.layers, self.params):
            if p is not None:
                yield spec, p

    def zero_grad(self):
        for _, p in self.param_layers():
            p.zero_grad()

    def forward(self, x: np.ndarray, train: bool = False, logits: bool = False) -> np.ndarray:
        """Batched forward.  ``logits`` stops before a trailing logistic layer."""
        if x.shape[1:] != self.config.input_shape:
            raise ConfigError(f"{self.config.name}: input {x.shape[1:]} != "
                              f"{self.config.input_shape}")
        x = x.astype(self.dtype, copy=False)
        cache = []
        layers = self.layers
        if logits and layers[-1].kind == "logistic":
            layers = layers[:-1]
        for spec, p in zip(layers, self.params):
            inp = x
            aux = None
            if spec.kind == "conv":
                x = tc.conv_forward(x, p, spec)
            elif spec.kind == "relu":
                x = tc.relu_forward(x)
            elif spec.kind == "rn":
                x = tc.response_norm_forward(x, spec)
            elif spec.kind == "maxpool":
                x, aux = tc.maxpool_forward(x, spec, with_argmax=train)
            elif spec.kind == "fc":
                x = tc.fc_forward(x, p, spec)
            else:
                x = tc.logistic_forward(x)
            if train:
                cache.append((inp, aux))
        self._cache = (cache, len(layers)) if train else None
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        """Backpropagate from the output of the last ``forward(train=True)``."""
        if self._cache is None:
            raise RuntimeError("backward called without a training forward pass")
        cache, n = self._cache
        for i in range(n - 1, -1, -1):
            spec, p = self.layers[i], self.params[i]
            inp, aux = cache[i]
            if spec.kind == "conv":
                grad = tc.conv_backward(inp, grad, p, spec)
            elif spec.kind == "relu":
                grad = tc.relu_backward(inp, grad)
            elif spec.kind == "rn":
                grad = tc.response_norm_backward(inp, grad, spec)
            elif spec.kind == "maxpool":
                grad = tc.maxpool_backward(inp, grad, aux, spec)
            elif spec.kind == "fc":
                grad = tc.fc_backward(inp, grad, p, spec)
            else:
                grad = tc.logistic_backward(inp, grad)
            if not np.all(np.isfinite(grad)):
                raise FloatingPointError(f"{self.config.name}/{spec.name}: non-finite gradient")
        self._cache = None
        return grad

    def state_dict(self, prefix: str = "") -> dict:
        out = {}
        for spec, p in self.param_layers():
            out[f"{prefix}{spec.name}.weights"] = p.weights
            out[f"{prefix}{spec.name}.biases"] = p.biases
        return out

    def load_state_dict(self, tensors: dict, prefix: str = ""):
        for spec, p in self.param_layers():
            w = tensors[f"{prefix}{spec.name}.weights"]
            b = tensors[f"{prefix}{spec.name}.biases"]
            if w.shape != p.weights.shape or b.shape != p.biases.shape:
                raise ConfigError(f"{prefix}{spec.name}: checkpoint shape mismatch")
            p.weights = np.array(w, dtype=p.weights.dtype)
            p.biases = np.array(b, dtype=p.biases.dtype)
            p.weight_grads = np.zeros_like(p.weights)
            p.bias_grads = np.zeros_like(p.biases)

    def copy(self) -> "Network":
        params = [None if p is None else LayerParams(p.weights.copy(), p.biases.copy())
                  for p in self.params]
        return Network(self.config, params)

    def astype(self, dtype) -> "Network":
        params = [None if p is None else LayerParams(p.weights.astype(dtype), p.biases.astype(dtype))
                  for p in self.params]
        return Network(self.config, params)


@dataclass
class JointModel:
    loc: Network
    seg: Network

    @property
    def frame(self) -> float:
        return float(self.loc.config.input_shape[0])

    @property
    def crop_side(self) -> int:
        return self.seg.config.input_shape[0]

    @property
    def mask_side(self) -> int:
        return int(round(np.sqrt(self.seg.config.output_size)))

    @classmethod
    def build(cls, loc_cfg: NetworkConfig, seg_cfg: NetworkConfig, rng, init_std=0.01,
              dtype=np.float64) -> "JointModel":
        validate_pair(loc_cfg, seg_cfg)
        return cls(Network.build(loc_cfg, rng, init_std, dtype),
                   Network.build(seg_cfg, rng, init_std, dtype))

    def state_dict(self) -> dict:
        return {**self.loc.state_dict("loc."), **self.seg.state_dict("seg.")}

    def load_state_dict(self, tensors: dict):
        self.loc.load_state_dict(tensors, "loc.")
        self.seg.load_state_dict(tensors, "seg.")

    def save(self, path, meta: dict | None = None, extra: dict | None = None):
        meta = dict(meta or {})
        meta["networks"] = {"localization": self.loc.config.to_dict(),
                            "segmentation": self.seg.config.to_dict()}
        tc.save_tensors(path, {**self.state_dict(), **(extra or {})}, meta)

    @classmethod
    def load(cls, path, dtype=None) -> tuple["JointModel", dict, dict]:
        """Returns ``(model, meta, tensors)``."""
        tensors, meta = tc.load_tensors(path)
        try:
            nets = meta["networks"]
            loc_cfg = NetworkConfig.from_dict(nets["localization"])
            seg_cfg = NetworkConfig.from_dict(nets["segmentation"])
        except KeyError as e:
            raise ValueError(f"{path}: checkpoint lacks network configuration") from e
        dtype = dtype or tensors["loc." + next(s.name for s in loc_cfg.layers if s.has_params)
                                 + ".weights"].dtype
        model = cls.build(loc_cfg, seg_cfg, np.random.default_rng(0), 0.0, dtype)
        model.load_state_dict(tensors)
        return model, meta, tensors


# -- boxes and geometry ------------------------------------------------------

def clamp_box(raw, frame: float, min_side: float = MIN_BOX_SIDE) -> np.ndarray:
    """Clamp ``(..., 4)`` boxes into ``[0, frame]``.

    Boxes left with ``x2 <= x1`` (or ``y2 <= y1``) are replaced, per axis, by a
    ``min_side`` interval centred on the midpoint and shifted inside the frame.
    """
    b = np.clip(np.asarray(raw, dtype=np.float64), 0.0, frame)
    b = b.copy()
    for lo, hi in ((0, 2), (1, 3)):
        bad = b[..., hi] <= b[..., lo]
        if np.any(bad):
            mid = 0.5 * (b[..., lo] + b[..., hi])
            start = np.clip(mid - min_side / 2, 0.0, frame - min_side)
            b[..., lo] = np.where(bad, start, b[..., lo])
            b[..., hi] = np.where(bad, start + min_side, b[..., hi])
    return b


def box_to_pixels(box, frame: float, height: int, width: int) -> np.ndarray:
    """Map normalized-frame boxes to source pixel coordinates (each axis independently)."""
    b = np.asarray(box, dtype=np.float64)
    scale = np.array([width, height, width, height], dtype=np.float64) / frame
    return b * scale


def _expand_degenerate(px: np.ndarray, height: int, width: int):
    """Ensure every pixel box spans at least MIN_CROP_PIXELS on each axis."""
    px = np.array(px, dtype=np.float64)
    flagged = np.zeros(px.shape[:-1], dtype=bool)
    for lo, hi, ext in ((0, 2, width), (1, 3, height)):
        small = (px[..., hi] - px[..., lo]) < MIN_CROP_PIXELS
        if np.any(small):
            mid = 0.5 * (px[..., lo] + px[..., hi])
            start = np.clip(mid - MIN_CROP_PIXELS / 2, 0.0, max(ext - MIN_CROP_PIXELS, 0.0))
            px[..., lo] = np.where(small, start, px[..., lo])
            px[..., hi] = np.where(small, start + MIN_CROP_PIXELS, px[..., hi])
            flagged |= small
    return px, flagged


def _sample_coords(lo, hi, n):
    """Pixel-centre sample positions of an n-cell resampling of [lo, hi)."""
    t = (np.arange(n) + 0.5) / n
    return lo[..., None] + t * (hi - lo)[..., None]


def crop_pixels(image: np.ndarray, px_boxes: np.ndarray, side: int):
    """Bilinear crops of ``image`` for ``(B, 4)`` pixel boxes -> ``(B, side, side, C)``."""
    h, w = image.shape[:2]
    px, flagged = _expand_degenerate(np.atleast_2d(px_boxes), h, w)
    xs = np.clip(_sample_coords(px[:, 0], px[:, 2], side) - 0.5, 0, w - 1)
    ys = np.clip(_sample_coords(px[:, 1], px[:, 3], side) - 0.5, 0, h - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (xs - x0)[:, None, :, None]
    wy = (ys - y0)[:, :, None, None]
    Y0, Y1 = y0[:, :, None], y1[:, :, None]
    X0, X1 = x0[:, None, :], x1[:, None, :]
    top = image[Y0, X0] * (1 - wx) + image[Y0, X1] * wx
    bot = image[Y1, X0] * (1 - wx) + image[Y1, X1] * wx
    return top * (1 - wy) + bot * wy, flagged


def crop_mask_pixels(mask: np.ndarray, px_boxes: np.ndarray, side: int) -> np.ndarray:
    """Nearest-neighbour crops of a binary mask -> ``(B, side, side)``."""
    h, w = mask.shape
    px, _ = _expand_degenerate(np.atleast_2d(px_boxes), h, w)
    xi = np.clip(np.floor(_sample_coords(px[:, 0], px[:, 2], side)).astype(np.intp), 0, w - 1)
    yi = np.clip(np.floor(_sample_coords(px[:, 1], px[:, 3], side)).astype(np.intp), 0, h - 1)
    return mask[yi[:, :, None], xi[:, None, :]]


def outside_foreground(mask: np.ndarray, px_boxes: np.ndarray) -> np.ndarray:
    """Foreground pixels whose centres lie outside each pixel box.

    Uses the same inclusion rule as ``paint_mask`` (centre in ``[x1, x2)``) and
    the same degenerate-box expansion as the crops.
    """
    h, w = mask.shape
    px, _ = _expand_degenerate(np.atleast_2d(px_boxes), h, w)
    sat = np.zeros((h + 1, w + 1), dtype=np.int64)
    sat[1:, 1:] = np.cumsum(np.cumsum(mask, axis=0), axis=1)
    # pixel i is inside iff x1 <= i + 0.5 < x2
    c0 = np.clip(np.ceil(px[:, 0] - 0.5), 0, w).astype(np.intp)
    c1 = np.clip(np.ceil(px[:, 2] - 0.5), 0, w).astype(np.intp)
    r0 = np.clip(np.ceil(px[:, 1] - 0.5), 0, h).astype(np.intp)
    r1 = np.clip(np.ceil(px[:, 3] - 0.5), 0, h).astype(np.intp)
    c1, r1 = np.maximum(c1, c0), np.maximum(r1, r0)
    inside = sat[r1, c1] - sat[r0, c1] - sat[r1, c0] + sat[r0, c0]
    return sat[h, w] - inside


def crop_resize(image: np.ndarray, box, frame: float, side: int):
    """Crop one normalized-frame box and resize it to ``side x side``.

    Returns ``(crop, expanded)`` where ``expanded`` flags a degenerate box that
    had to be widened to the minimum crop size.
    """
    h, w = image.shape[:2]
    crops, flagged = crop_pixels(image, box_to_pixels(box, frame, h, w)[None], side)
    return crops[0], bool(flagged[0])


def resize_image(image: np.ndarray, side: int) -> np.ndarray:
    h, w = image.shape[:2]
    return crop_pixels(image, np.array([[0.0, 0.0, w, h]]), side)[0][0]


def paint_mask(binary: np.ndarray, px_box, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour upsample of an m x m mask into a pixel box of an HxW frame."""
    m = binary.shape[0]
    px, _ = _expand_degenerate(np.asarray(px_box, dtype=np.float64)[None], height, width)
    x1, y1, x2, y2 = px[0]
    cx = np.arange(width) + 0.5
    cy = np.arange(height) + 0.5
    inx = (cx >= x1) & (cx < x2)
    iny = (cy >= y1) & (cy < y2)
    ci = np.clip(np.floor((cx - x1) / (x2 - x1) * m).astype(np.intp), 0, m - 1)
    ri = np.clip(np.floor((cy - y1) / (y2 - y1) * m).astype(np.intp), 0, m - 1)
    full = binary[ri[:, None], ci[None, :]]
    return full & iny[:, None] & inx[None, :]


# -- inference chain ---------------------------------------------------------

@dataclass
class MaskPrediction:
    probabilities: np.ndarray
    binary: np.ndarray = field(default=None)
    threshold: float = THRESHOLD

    def __post_init__(self):
        if self.binary is None:
            self.binary = self.probabilities > self.threshold


@dataclass
class Extraction:
    box: np.ndarray
    mask: MaskPrediction
    full_mask: np.ndarray
    expanded: bool = False


def _check_image(image: np.ndarray):
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")


def prepare_input(x: np.ndarray) -> np.ndarray:
    """Centre pixel values; networks see images in [-0.5, 0.5]."""
    return x - 0.5


def localize_batch(images, loc: Network, raw: bool = False) -> np.ndarray:
    side = loc.config.input_shape[0]
    for im in images:
        _check_image(im)
    batch = np.stack([resize_image(im, side) for im in images])
    out = loc.forward(prepare_input(batch)).astype(np.float64)
    return out if raw else clamp_box(out, float(side))


def localize(image: np.ndarray, loc: Network) -> np.ndarray:
    return localize_batch([image], loc)[0]


def segment_batch(crops: np.ndarray, seg: Network) -> np.ndarray:
    """``(B, s, s, 3)`` crops -> ``(B, m, m)`` foreground probabilities."""
    if crops.shape[1:] != seg.config.input_shape:
        raise ConfigError(f"crop dims {crops.shape[1:]} != segmentation input "
                          f"{seg.config.input_shape}")
    p = seg.forward(prepare_input(crops)).astype(np.float64)
    m = int(round(np.sqrt(p.shape[1])))
    return p.reshape(-1, m, m)


def segment(crop: np.ndarray, seg: Network, threshold: float = THRESHOLD) -> MaskPrediction:
    return MaskPrediction(segment_batch(crop[None], seg)[0], threshold=threshold)


def extract(image: np.ndarray, model: JointModel, threshold: float = THRESHOLD) -> Extraction:
    _check_image(image)
    h, w = image.shape[:2]
    box = localize(image, model.loc)
    crop, expanded = crop_resize(image, box, model.frame, model.crop_side)
    pred = segment(crop, model.seg, threshold)
    full = paint_mask(pred.binary, box_to_pixels(box, model.frame, h, w), h, w)
    return Extraction(box, pred, full, expanded)
